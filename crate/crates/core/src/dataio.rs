//! Dataset bundles: in-memory records, on-disk layout, validation and the
//! synthetic generator used for desk-scale experiments.
//!
//! A bundle is a directory holding `manifest.json` plus one `.ten` file per
//! (video, field), named `<id>.<field>.ten`.

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::segment::{to_original_frames, ShotSegmentation};
use crate::tensor::Tensor;

pub const MANIFEST_FILE: &str = "manifest.json";

pub const FIELD_FEATURES: &str = "features";
pub const FIELD_PICKS: &str = "picks";
pub const FIELD_GTSCORE: &str = "gtscore";
pub const FIELD_USER_SUMMARIES: &str = "user_summaries";
pub const FIELD_CHANGE_POINTS: &str = "change_points";

/// Controls how multiple user summaries are aggregated during evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DatasetKind {
    SummeLike,
    TvsumLike,
    Synthetic,
}

/// One video: sampled-frame features plus optional annotations over original frames.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoRecord {
    pub id: String,
    /// `[T_s x D]` features of the sampled frames.
    pub features: Array2<f32>,
    /// Mean user score per sampled frame.
    pub gtscore: Option<Array1<f32>>,
    /// `[U x N_f]` binary key-shot membership, one row per user.
    pub user_summaries: Option<Array2<u8>>,
    /// Inclusive original-frame shot intervals.
    pub change_points: Option<Vec<[usize; 2]>>,
    pub n_frames: usize,
    /// Original-frame index of each sampled frame.
    pub picks: Vec<usize>,
}

impl VideoRecord {
    pub fn n_sampled(&self) -> usize {
        self.features.nrows()
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn features_f64(&self) -> Array2<f64> {
        self.features.mapv(f64::from)
    }

    pub fn gtscore_f64(&self) -> Option<Vec<f64>> {
        self.gtscore
            .as_ref()
            .map(|g| g.iter().map(|&v| f64::from(v)).collect())
    }

    fn present_fields(&self) -> Vec<String> {
        let mut fields = vec![FIELD_FEATURES.to_string(), FIELD_PICKS.to_string()];
        if self.gtscore.is_some() {
            fields.push(FIELD_GTSCORE.into());
        }
        if self.user_summaries.is_some() {
            fields.push(FIELD_USER_SUMMARIES.into());
        }
        if self.change_points.is_some() {
            fields.push(FIELD_CHANGE_POINTS.into());
        }
        fields
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub kind: DatasetKind,
    pub videos: Vec<VideoRecord>,
    /// Free-form provenance (generator spec, planted truth, config echo).
    pub meta: serde_json::Value,
}

impl Dataset {
    pub fn get(&self, id: &str) -> Option<&VideoRecord> {
        self.videos.iter().find(|v| v.id == id)
    }

    pub fn ids(&self) -> Vec<String> {
        self.videos.iter().map(|v| v.id.clone()).collect()
    }

    /// Sub-dataset with the given ids, in the given order.
    pub fn subset(&self, ids: &[String]) -> Result<Dataset> {
        let videos = ids
            .iter()
            .map(|id| {
                self.get(id)
                    .cloned()
                    .ok_or_else(|| Error::Config(format!("unknown video id '{id}'")))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Dataset {
            name: self.name.clone(),
            kind: self.kind,
            videos,
            meta: serde_json::Value::Null,
        })
    }
}

/// A single broken invariant. `video` is empty for dataset-level rules.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    pub video: String,
    pub field: String,
    pub rule: String,
}

impl Violation {
    fn new(video: &str, field: &str, rule: impl Into<String>) -> Self {
        Violation {
            video: video.to_string(),
            field: field.to_string(),
            rule: rule.into(),
        }
    }

    pub fn into_error(self) -> Error {
        Error::validation(self.video, self.field, self.rule)
    }
}

fn id_is_file_safe(id: &str) -> bool {
    !id.is_empty()
        && !id.starts_with('.')
        && id
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || matches!(c, '_' | '-'))
}

/// Checks every record invariant; returns one entry per broken rule.
pub fn validate(d: &Dataset) -> Vec<Violation> {
    let mut out = Vec::new();
    if d.videos.is_empty() {
        out.push(Violation::new("", "videos", "empty dataset"));
    }
    let mut seen = HashSet::new();
    for v in &d.videos {
        if !seen.insert(v.id.as_str()) {
            out.push(Violation::new(&v.id, "id", "duplicate video id"));
        }
        validate_video(v, &mut out);
    }
    out
}

fn validate_video(v: &VideoRecord, out: &mut Vec<Violation>) {
    let id = v.id.as_str();
    if !id_is_file_safe(id) {
        out.push(Violation::new(
            id,
            "id",
            "id must be non-empty ASCII alphanumeric, '_' or '-'",
        ));
    }
    let (t_s, dim) = v.features.dim();
    if t_s == 0 {
        out.push(Violation::new(id, FIELD_FEATURES, "no sampled frames"));
    }
    if dim == 0 {
        out.push(Violation::new(
            id,
            FIELD_FEATURES,
            "feature dimension is zero",
        ));
    }
    if v.features.iter().any(|x| !x.is_finite()) {
        out.push(Violation::new(
            id,
            FIELD_FEATURES,
            "non-finite feature value",
        ));
    }
    if v.n_frames == 0 {
        out.push(Violation::new(id, "n_frames", "n_frames must be positive"));
    }

    if v.picks.len() != t_s {
        out.push(Violation::new(
            id,
            FIELD_PICKS,
            format!("length {} differs from {t_s} sampled frames", v.picks.len()),
        ));
    }
    if v.picks.windows(2).any(|w| w[0] >= w[1]) {
        out.push(Violation::new(
            id,
            FIELD_PICKS,
            "picks not strictly increasing",
        ));
    }
    if v.picks.last().is_some_and(|&p| p >= v.n_frames) {
        out.push(Violation::new(id, FIELD_PICKS, "pick index >= n_frames"));
    }

    if let Some(g) = &v.gtscore {
        if g.len() != t_s {
            out.push(Violation::new(
                id,
                FIELD_GTSCORE,
                format!("length {} differs from {t_s} sampled frames", g.len()),
            ));
        }
        if g.iter().any(|&s| !(0.0..=1.0).contains(&s)) {
            out.push(Violation::new(id, FIELD_GTSCORE, "score out of [0,1]"));
        }
    }

    if let Some(u) = &v.user_summaries {
        if u.ncols() != v.n_frames {
            out.push(Violation::new(
                id,
                FIELD_USER_SUMMARIES,
                format!(
                    "row length {} differs from n_frames {}",
                    u.ncols(),
                    v.n_frames
                ),
            ));
        }
        if u.nrows() == 0 {
            out.push(Violation::new(id, FIELD_USER_SUMMARIES, "no users"));
        }
        if u.iter().any(|&b| b > 1) {
            out.push(Violation::new(
                id,
                FIELD_USER_SUMMARIES,
                "value not in {0,1}",
            ));
        }
    }

    if let Some(cps) = &v.change_points {
        if let Err(rule) = check_intervals(cps, v.n_frames) {
            out.push(Violation::new(id, FIELD_CHANGE_POINTS, rule));
        }
    }
}

/// Sorted, disjoint, contiguous cover of `[0, n-1]`.
pub(crate) fn check_intervals(iv: &[[usize; 2]], n: usize) -> std::result::Result<(), String> {
    if iv.is_empty() {
        return Err("no intervals".into());
    }
    for (i, &[s, e]) in iv.iter().enumerate() {
        if s > e {
            return Err(format!("interval {i} has start > end"));
        }
        if i > 0 {
            let prev_end = iv[i - 1][1];
            if s <= prev_end {
                return Err("intervals overlap".into());
            }
            if s != prev_end + 1 {
                return Err("intervals leave a gap".into());
            }
        }
    }
    if iv[0][0] != 0 {
        return Err("intervals do not start at frame 0".into());
    }
    if iv[iv.len() - 1][1] + 1 != n {
        return Err("intervals do not end at frame n_frames-1".into());
    }
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    name: String,
    kind: DatasetKind,
    videos: Vec<ManifestVideo>,
    #[serde(default)]
    meta: serde_json::Value,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestVideo {
    id: String,
    n_frames: usize,
    fields: Vec<String>,
}

fn tensor_path(dir: &Path, id: &str, field: &str) -> std::path::PathBuf {
    dir.join(format!("{id}.{field}.ten"))
}

fn usize_to_i32(video: &str, field: &str, v: usize) -> Result<i32> {
    i32::try_from(v).map_err(|_| Error::validation(video, field, "index exceeds i32 range"))
}

/// Writes `d` as a bundle directory (created if missing).
pub fn write_dataset(d: &Dataset, path: &Path) -> Result<()> {
    if d.videos.is_empty() {
        return Err(Error::Format("empty dataset".into()));
    }
    if let Some(v) = validate(d).into_iter().next() {
        return Err(v.into_error());
    }
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))?;

    for v in &d.videos {
        let id = v.id.as_str();
        Tensor::from_f32_matrix(&v.features).write_file(&tensor_path(path, id, FIELD_FEATURES))?;
        let picks = v
            .picks
            .iter()
            .map(|&p| usize_to_i32(id, FIELD_PICKS, p))
            .collect::<Result<Vec<_>>>()?;
        Tensor::from_i32(vec![picks.len()], picks)?.write_file(&tensor_path(
            path,
            id,
            FIELD_PICKS,
        ))?;
        if let Some(g) = &v.gtscore {
            Tensor::from_f32_vector(g).write_file(&tensor_path(path, id, FIELD_GTSCORE))?;
        }
        if let Some(u) = &v.user_summaries {
            Tensor::from_u8_matrix(u).write_file(&tensor_path(path, id, FIELD_USER_SUMMARIES))?;
        }
        if let Some(cps) = &v.change_points {
            let flat = cps
                .iter()
                .flat_map(|iv| iv.iter())
                .map(|&x| usize_to_i32(id, FIELD_CHANGE_POINTS, x))
                .collect::<Result<Vec<_>>>()?;
            Tensor::from_i32(vec![cps.len(), 2], flat)?.write_file(&tensor_path(
                path,
                id,
                FIELD_CHANGE_POINTS,
            ))?;
        }
    }

    let manifest = Manifest {
        name: d.name.clone(),
        kind: d.kind,
        videos: d
            .videos
            .iter()
            .map(|v| ManifestVideo {
                id: v.id.clone(),
                n_frames: v.n_frames,
                fields: v.present_fields(),
            })
            .collect(),
        meta: d.meta.clone(),
    };
    let text = serde_json::to_string_pretty(&manifest)
        .map_err(|e| Error::Format(format!("manifest encode: {e}")))?;
    let mpath = path.join(MANIFEST_FILE);
    fs::write(&mpath, text).map_err(|e| Error::io(&mpath, e))
}

fn to_indices(video: &str, field: &str, values: Vec<i32>) -> Result<Vec<usize>> {
    values
        .into_iter()
        .map(|x| usize::try_from(x).map_err(|_| Error::validation(video, field, "negative index")))
        .collect()
}

/// Loads and validates a bundle directory.
pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let mpath = path.join(MANIFEST_FILE);
    if !mpath.is_file() {
        return Err(Error::Format(format!(
            "missing manifest: {} not found",
            mpath.display()
        )));
    }
    let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let manifest: Manifest = serde_json::from_str(&text)
        .map_err(|e| Error::Format(format!("{}: {e}", mpath.display())))?;

    let mut videos = Vec::with_capacity(manifest.videos.len());
    for mv in manifest.videos {
        let id = mv.id.as_str();
        if !id_is_file_safe(id) {
            return Err(Error::validation(id, "id", "id is not file-name safe"));
        }
        let has = |f: &str| mv.fields.iter().any(|x| x == f);
        for f in &mv.fields {
            if ![
                FIELD_FEATURES,
                FIELD_PICKS,
                FIELD_GTSCORE,
                FIELD_USER_SUMMARIES,
                FIELD_CHANGE_POINTS,
            ]
            .contains(&f.as_str())
            {
                return Err(Error::Format(format!("video '{id}': unknown field '{f}'")));
            }
        }
        for required in [FIELD_FEATURES, FIELD_PICKS] {
            if !has(required) {
                return Err(Error::validation(id, required, "required field missing"));
            }
        }
        let read = |field: &str| Tensor::read_file(&tensor_path(path, id, field));
        let what = |field: &str| format!("{id}.{field}");

        let features = read(FIELD_FEATURES)?.into_f32_matrix(&what(FIELD_FEATURES))?;
        let (pdims, picks) = read(FIELD_PICKS)?.into_i32(&what(FIELD_PICKS))?;
        if pdims.len() != 1 {
            return Err(Error::Format(format!(
                "{}: expected rank 1",
                what(FIELD_PICKS)
            )));
        }
        let picks = to_indices(id, FIELD_PICKS, picks)?;
        let gtscore = if has(FIELD_GTSCORE) {
            Some(read(FIELD_GTSCORE)?.into_f32_vector(&what(FIELD_GTSCORE))?)
        } else {
            None
        };
        let user_summaries = if has(FIELD_USER_SUMMARIES) {
            Some(read(FIELD_USER_SUMMARIES)?.into_u8_matrix(&what(FIELD_USER_SUMMARIES))?)
        } else {
            None
        };
        let change_points = if has(FIELD_CHANGE_POINTS) {
            let (dims, flat) = read(FIELD_CHANGE_POINTS)?.into_i32(&what(FIELD_CHANGE_POINTS))?;
            if dims.len() != 2 || dims[1] != 2 {
                return Err(Error::Format(format!(
                    "{}: expected shape [S x 2], found {dims:?}",
                    what(FIELD_CHANGE_POINTS)
                )));
            }
            let flat = to_indices(id, FIELD_CHANGE_POINTS, flat)?;
            Some(flat.chunks_exact(2).map(|c| [c[0], c[1]]).collect())
        } else {
            None
        };
        videos.push(VideoRecord {
            id: mv.id,
            features,
            gtscore,
            user_summaries,
            change_points,
            n_frames: mv.n_frames,
            picks,
        });
    }

    let d = Dataset {
        name: manifest.name,
        kind: manifest.kind,
        videos,
        meta: manifest.meta,
    };
    if let Some(v) = validate(&d).into_iter().next() {
        return Err(v.into_error());
    }
    Ok(d)
}

/// Parameters of the synthetic generator. Generation is a pure function of this value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    pub name: String,
    pub n_videos: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub dim: usize,
    pub n_users: usize,
    pub min_segments: usize,
    pub max_segments: usize,
    /// Original frames per sampled frame (picks spacing).
    pub frame_step: usize,
    /// Feature noise standard deviation; 0 gives piecewise-constant features.
    pub noise: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            name: "synthetic".into(),
            n_videos: 8,
            min_len: 90,
            max_len: 110,
            dim: 32,
            n_users: 5,
            min_segments: 6,
            max_segments: 10,
            frame_step: 15,
            noise: 0.3,
            seed: 7,
        }
    }
}

impl SyntheticSpec {
    pub fn check(&self) -> Result<()> {
        let positive = [
            ("n_videos", self.n_videos),
            ("min_len", self.min_len),
            ("max_len", self.max_len),
            ("dim", self.dim),
            ("n_users", self.n_users),
            ("min_segments", self.min_segments),
            ("max_segments", self.max_segments),
            ("frame_step", self.frame_step),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("synthetic.{name} must be positive")));
        }
        if self.min_len > self.max_len || self.min_segments > self.max_segments {
            return Err(Error::Config(
                "synthetic ranges must satisfy min <= max".into(),
            ));
        }
        if 2 * self.max_segments > self.min_len {
            return Err(Error::Config(
                "synthetic.min_len must allow two frames per segment".into(),
            ));
        }
        if !(self.noise.is_finite() && self.noise >= 0.0) {
            return Err(Error::Config("synthetic.noise must be >= 0".into()));
        }
        Ok(())
    }
}

/// Planted ground truth of one synthetic video, kept in the dataset meta.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantedTruth {
    pub id: String,
    /// Sampled-frame index where each segment starts (first is 0).
    pub segment_starts: Vec<usize>,
    pub important: Vec<bool>,
    /// Original-frame intervals implied by the segment starts.
    pub intervals: Vec<[usize; 2]>,
}

pub fn planted_truth(d: &Dataset) -> Option<Vec<PlantedTruth>> {
    serde_json::from_value(d.meta.get("truth")?.clone()).ok()
}

const IMPORTANT_SCORE: f64 = 0.8;
const BACKGROUND_SCORE: f64 = 0.2;
const FLAT_SCORE: f64 = 0.5;

fn normal_vec(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n)
        .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
        .collect()
}

/// Builds piecewise-stationary videos with known segment boundaries.
///
/// Background segments sit near a per-video base centroid; important segments
/// get distinct centroids and three times the frame-to-frame jitter. Scores are
/// high on important segments, and each user keeps a segment when its score plus
/// Gaussian noise clears 0.5.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Dataset> {
    spec.check()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut videos = Vec::with_capacity(spec.n_videos);
    let mut truth = Vec::with_capacity(spec.n_videos);

    for vi in 0..spec.n_videos {
        let id = format!("video_{:03}", vi + 1);
        let t_s = rng.random_range(spec.min_len..=spec.max_len);
        let n_seg = rng.random_range(spec.min_segments..=spec.max_segments);

        // Segment lengths: 2 frames each plus a random split of the remainder.
        let spare = t_s - 2 * n_seg;
        let mut cuts: Vec<usize> = (0..n_seg - 1)
            .map(|_| rng.random_range(0..=spare))
            .collect();
        cuts.sort_unstable();
        let mut starts = vec![0];
        starts.extend(cuts.iter().enumerate().map(|(k, &c)| 2 * (k + 1) + c));
        debug_assert_eq!(starts.len(), n_seg);

        let mut important: Vec<bool> = (0..n_seg).map(|_| rng.random_bool(0.3)).collect();
        if n_seg == 1 {
            important[0] = false;
        } else {
            if !important.iter().any(|&b| b) {
                let k = rng.random_range(0..n_seg);
                important[k] = true;
            }
            if important.iter().all(|&b| b) {
                let k = rng.random_range(0..n_seg);
                important[k] = false;
            }
        }

        let base = normal_vec(&mut rng, spec.dim, 1.0);
        let mut features = Array2::<f32>::zeros((t_s, spec.dim));
        let mut gtscore = Array1::<f32>::zeros(t_s);
        for s in 0..n_seg {
            let lo = starts[s];
            let hi = if s + 1 < n_seg { starts[s + 1] } else { t_s };
            let centroid: Vec<f64> = if important[s] {
                normal_vec(&mut rng, spec.dim, 1.5)
            } else {
                let off = normal_vec(&mut rng, spec.dim, 0.5);
                base.iter().zip(off).map(|(b, o)| b + o).collect()
            };
            let jitter = spec.noise * if important[s] { 3.0 } else { 1.0 };
            let level = match (n_seg, important[s]) {
                (1, _) => FLAT_SCORE,
                (_, true) => IMPORTANT_SCORE,
                (_, false) => BACKGROUND_SCORE,
            };
            for t in lo..hi {
                for (j, c) in centroid.iter().enumerate() {
                    let e: f64 = rng.sample(StandardNormal);
                    features[[t, j]] = (c + jitter * e) as f32;
                }
                let g = if spec.noise > 0.0 {
                    level + 0.05 * rng.sample::<f64, _>(StandardNormal)
                } else {
                    level
                };
                gtscore[t] = g.clamp(0.0, 1.0) as f32;
            }
        }

        let n_frames = t_s * spec.frame_step;
        let picks: Vec<usize> = (0..t_s).map(|i| i * spec.frame_step).collect();
        let sampled = ShotSegmentation::from_starts(&starts, t_s)?;
        let intervals = to_original_frames(&sampled, &picks, n_frames)?.intervals;

        let mut users = Array2::<u8>::zeros((spec.n_users, n_frames));
        for u in 0..spec.n_users {
            for (s, iv) in intervals.iter().enumerate() {
                let level = if n_seg == 1 {
                    FLAT_SCORE
                } else if important[s] {
                    IMPORTANT_SCORE
                } else {
                    BACKGROUND_SCORE
                };
                let noisy = level + 0.15 * rng.sample::<f64, _>(StandardNormal);
                if noisy > 0.5 {
                    for f in iv[0]..=iv[1] {
                        users[[u, f]] = 1;
                    }
                }
            }
        }

        truth.push(PlantedTruth {
            id: id.clone(),
            segment_starts: starts,
            important,
            intervals: intervals.clone(),
        });
        videos.push(VideoRecord {
            id,
            features,
            gtscore: Some(gtscore),
            user_summaries: Some(users),
            change_points: Some(intervals),
            n_frames,
            picks,
        });
    }

    Ok(Dataset {
        name: spec.name.clone(),
        kind: DatasetKind::Synthetic,
        videos,
        meta: serde_json::json!({
            "generator": spec,
            "truth": truth,
        }),
    })
}
