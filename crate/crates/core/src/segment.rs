//! Kernel temporal segmentation: an exact dynamic program over within-segment
//! kernel scatter with a model-selection penalty on the number of segments.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::dataio::check_intervals;
use crate::error::{Error, Result};

/// Ordered, disjoint, contiguous inclusive intervals covering `[0, n-1]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShotSegmentation {
    pub intervals: Vec<[usize; 2]>,
}

impl ShotSegmentation {
    pub fn new(intervals: Vec<[usize; 2]>, n: usize) -> Result<Self> {
        check_intervals(&intervals, n).map_err(Error::Domain)?;
        Ok(ShotSegmentation { intervals })
    }

    /// Segmentation of `[0, n-1]` whose segments begin at `starts` (first must be 0).
    pub fn from_starts(starts: &[usize], n: usize) -> Result<Self> {
        if starts.first() != Some(&0) {
            return Err(Error::Domain("first segment must start at 0".into()));
        }
        let intervals = starts
            .iter()
            .enumerate()
            .map(|(k, &s)| {
                let end = starts.get(k + 1).map_or(n, |&next| next);
                [s, end.wrapping_sub(1)]
            })
            .collect();
        ShotSegmentation::new(intervals, n)
    }

    pub fn len(&self) -> usize {
        self.intervals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.intervals.is_empty()
    }

    pub fn n_frames(&self) -> usize {
        self.intervals.last().map_or(0, |iv| iv[1] + 1)
    }

    /// Start index of every segment after the first.
    pub fn change_points(&self) -> Vec<usize> {
        self.intervals.iter().skip(1).map(|iv| iv[0]).collect()
    }

    pub fn lengths(&self) -> Vec<usize> {
        self.intervals.iter().map(|iv| iv[1] - iv[0] + 1).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case", deny_unknown_fields)]
pub enum KernelKind {
    Linear,
    /// `exp(-|x_i - x_j|^2 / (2 bandwidth^2))`
    Rbf {
        bandwidth: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct KtsConfig {
    pub kernel: KernelKind,
    /// Defaults to `ceil(T_s / 10)` when unset.
    pub max_segments: Option<usize>,
    pub penalty_weight: f64,
}

impl Default for KtsConfig {
    fn default() -> Self {
        KtsConfig {
            kernel: KernelKind::Linear,
            max_segments: None,
            penalty_weight: 1.0,
        }
    }
}

pub fn kernel_matrix(x: &Array2<f64>) -> Array2<f64> {
    x.dot(&x.t())
}

pub fn kernel_matrix_with(x: &Array2<f64>, kind: KernelKind) -> Array2<f64> {
    match kind {
        KernelKind::Linear => kernel_matrix(x),
        KernelKind::Rbf { bandwidth } => {
            let gram = kernel_matrix(x);
            let n = gram.nrows();
            let denom = 2.0 * bandwidth * bandwidth;
            Array2::from_shape_fn((n, n), |(i, j)| {
                let d2 = (gram[[i, i]] + gram[[j, j]] - 2.0 * gram[[i, j]]).max(0.0);
                (-d2 / denom).exp()
            })
        }
    }
}

/// Model-selection penalty `m (ln(T/m) + 1)`.
pub fn segment_count_penalty(m: usize, t: usize) -> f64 {
    let m = m as f64;
    m * ((t as f64 / m).ln() + 1.0)
}

/// O(1) within-segment scatter queries via 2-D prefix sums.
pub struct ScatterTable {
    n: usize,
    block: Vec<f64>,
    diag: Vec<f64>,
}

impl ScatterTable {
    pub fn new(k: &Array2<f64>) -> Self {
        let n = k.nrows();
        let w = n + 1;
        let mut block = vec![0.0; w * w];
        for i in 0..n {
            for j in 0..n {
                block[(i + 1) * w + j + 1] =
                    k[[i, j]] + block[i * w + j + 1] + block[(i + 1) * w + j] - block[i * w + j];
            }
        }
        let mut diag = vec![0.0; w];
        for i in 0..n {
            diag[i + 1] = diag[i] + k[[i, i]];
        }
        ScatterTable { n, block, diag }
    }

    /// Scatter of the inclusive segment `[a, b]`.
    pub fn scatter(&self, a: usize, b: usize) -> f64 {
        let w = self.n + 1;
        let (lo, hi) = (a, b + 1);
        let sum = self.block[hi * w + hi] - self.block[lo * w + hi] - self.block[hi * w + lo]
            + self.block[lo * w + lo];
        let len = (hi - lo) as f64;
        self.diag[hi] - self.diag[lo] - sum / len
    }
}

/// Penalised objective of a given segmentation: total scatter plus `w * g(m)`.
pub fn kts_objective(k: &Array2<f64>, seg: &ShotSegmentation, penalty_weight: f64) -> f64 {
    let table = ScatterTable::new(k);
    let scatter: f64 = seg
        .intervals
        .iter()
        .map(|iv| table.scatter(iv[0], iv[1]))
        .sum();
    scatter + penalty_weight * segment_count_penalty(seg.len(), k.nrows())
}

/// Exact minimiser of total scatter plus `penalty_weight * g(m)` over all
/// segmentations with at most `max_segments` segments. Indices are sampled frames.
pub fn kts_changepoints(
    k: &Array2<f64>,
    max_segments: usize,
    penalty_weight: f64,
) -> Result<ShotSegmentation> {
    let n = k.nrows();
    if k.ncols() != n {
        return Err(Error::Shape(format!("kernel matrix is {:?}", k.dim())));
    }
    if n == 0 {
        return Err(Error::Domain("empty kernel matrix".into()));
    }
    if max_segments == 0 {
        return Err(Error::Config("max_segments must be >= 1".into()));
    }
    if max_segments > n {
        return Err(Error::Config(format!(
            "max_segments {max_segments} exceeds sequence length {n}"
        )));
    }
    let table = ScatterTable::new(k);

    // cost[m][t]: best scatter of frames 0..t split into m+1 segments.
    let mut cost = vec![vec![f64::INFINITY; n + 1]; max_segments];
    let mut back = vec![vec![0usize; n + 1]; max_segments];
    for t in 1..=n {
        cost[0][t] = table.scatter(0, t - 1);
    }
    for m in 1..max_segments {
        for t in (m + 1)..=n {
            let mut best = f64::INFINITY;
            let mut arg = m;
            for s in m..t {
                let c = cost[m - 1][s] + table.scatter(s, t - 1);
                if c < best {
                    best = c;
                    arg = s;
                }
            }
            cost[m][t] = best;
            back[m][t] = arg;
        }
    }

    let mut best_m = 0;
    let mut best_total = f64::INFINITY;
    for m in 0..max_segments {
        let total = cost[m][n] + penalty_weight * segment_count_penalty(m + 1, n);
        if total < best_total {
            best_total = total;
            best_m = m;
        }
    }
    if !best_total.is_finite() {
        return Err(Error::Numeric(
            "segmentation objective is not finite".into(),
        ));
    }

    let mut starts = vec![0; best_m + 1];
    let mut t = n;
    for m in (1..=best_m).rev() {
        let s = back[m][t];
        starts[m] = s;
        t = s;
    }
    ShotSegmentation::from_starts(&starts, n)
}

/// Segments `x` with the configured kernel and defaults.
pub fn segment_features(x: &Array2<f64>, cfg: &KtsConfig) -> Result<ShotSegmentation> {
    let n = x.nrows();
    let max_segments = cfg.max_segments.unwrap_or(n.div_ceil(10)).min(n).max(1);
    kts_changepoints(
        &kernel_matrix_with(x, cfg.kernel),
        max_segments,
        cfg.penalty_weight,
    )
}

/// Maps a sampled-frame segmentation onto original frames.
///
/// A boundary after sampled index `i` becomes an original boundary at
/// `floor((picks[i] + picks[i+1]) / 2)`; the last interval is extended to
/// `n_frames - 1`.
pub fn to_original_frames(
    seg: &ShotSegmentation,
    picks: &[usize],
    n_frames: usize,
) -> Result<ShotSegmentation> {
    if seg.n_frames() != picks.len() {
        return Err(Error::Domain(format!(
            "segmentation covers {} sampled frames but picks has {}",
            seg.n_frames(),
            picks.len()
        )));
    }
    if picks.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Domain("picks not strictly increasing".into()));
    }
    if picks.last().is_some_and(|&p| p >= n_frames) {
        return Err(Error::Domain("pick index >= n_frames".into()));
    }
    let mut out = Vec::with_capacity(seg.len());
    let mut start = 0;
    for (k, iv) in seg.intervals.iter().enumerate() {
        let end = if k + 1 == seg.len() {
            n_frames - 1
        } else {
            (picks[iv[1]] + picks[iv[1] + 1]) / 2
        };
        out.push([start, end]);
        start = end + 1;
    }
    ShotSegmentation::new(out, n_frames)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn orthonormal_rows_give_identity_kernel() {
        let x = array![[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
        assert_eq!(kernel_matrix(&x), Array2::<f64>::eye(3));
    }

    #[test]
    fn duplicated_rows_share_kernel_entries() {
        let x = array![[1.0, 2.0], [1.0, 2.0], [0.5, -1.0]];
        let k = kernel_matrix(&x);
        assert_eq!(k[[0, 1]], k[[0, 0]]);
    }

    #[test]
    fn rbf_kernel_has_unit_diagonal() {
        let x = array![[1.0, 2.0], [3.0, -1.0]];
        let k = kernel_matrix_with(&x, KernelKind::Rbf { bandwidth: 1.0 });
        assert_eq!(k[[0, 0]], 1.0);
        assert!(k[[0, 1]] < 1.0 && k[[0, 1]] > 0.0);
    }

    #[test]
    fn single_segment_when_max_is_one() {
        let x = array![[0.0], [0.0], [10.0], [10.0]];
        let seg = kts_changepoints(&kernel_matrix(&x), 1, 0.0).unwrap();
        assert_eq!(seg.intervals, vec![[0, 3]]);
    }

    #[test]
    fn two_blocks_split_at_boundary() {
        let mut x = Array2::zeros((10, 3));
        for t in 0..5 {
            x[[t, 0]] = 1.0;
        }
        for t in 5..10 {
            x[[t, 1]] = 2.0;
        }
        let seg = kts_changepoints(&kernel_matrix(&x), 3, 1.0).unwrap();
        assert_eq!(seg.change_points(), vec![5]);
    }

    #[test]
    fn rejects_too_many_segments() {
        let x = array![[1.0], [2.0]];
        assert!(kts_changepoints(&kernel_matrix(&x), 3, 1.0).is_err());
        assert!(kts_changepoints(&kernel_matrix(&x), 0, 1.0).is_err());
    }

    #[test]
    fn scatter_matches_direct_sum() {
        let x = array![[1.0, 0.5], [0.2, -1.0], [3.0, 0.0], [0.0, 0.1]];
        let k = kernel_matrix(&x);
        let table = ScatterTable::new(&k);
        let direct = |a: usize, b: usize| {
            let len = (b - a + 1) as f64;
            let diag: f64 = (a..=b).map(|t| k[[t, t]]).sum();
            let mut block = 0.0;
            for s in a..=b {
                for t in a..=b {
                    block += k[[s, t]];
                }
            }
            diag - block / len
        };
        for a in 0..4 {
            for b in a..4 {
                assert!((table.scatter(a, b) - direct(a, b)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn identity_picks_leave_intervals_unchanged() {
        let seg = ShotSegmentation::new(vec![[0, 2], [3, 5]], 6).unwrap();
        let picks: Vec<usize> = (0..6).collect();
        assert_eq!(to_original_frames(&seg, &picks, 6).unwrap(), seg);
    }

    #[test]
    fn single_segment_extends_to_all_frames() {
        let seg = ShotSegmentation::new(vec![[0, 4]], 5).unwrap();
        let out = to_original_frames(&seg, &[0, 2, 4, 6, 8], 10).unwrap();
        assert_eq!(out.intervals, vec![[0, 9]]);
    }

    #[test]
    fn midpoint_boundary_convention() {
        // split so the second segment starts at sampled index 3
        let seg = ShotSegmentation::from_starts(&[0, 3], 5).unwrap();
        let out = to_original_frames(&seg, &[0, 2, 4, 6, 8], 10).unwrap();
        assert_eq!(out.intervals, vec![[0, 5], [6, 9]]);
    }

    #[test]
    fn inconsistent_picks_are_rejected() {
        let seg = ShotSegmentation::new(vec![[0, 4]], 5).unwrap();
        assert!(to_original_frames(&seg, &[0, 1, 2], 10).is_err());
        assert!(to_original_frames(&seg, &[0, 1, 2, 3, 12], 10).is_err());
    }

    #[test]
    fn from_starts_validates() {
        assert!(ShotSegmentation::from_starts(&[1, 3], 5).is_err());
        assert!(ShotSegmentation::from_starts(&[0, 3, 3], 5).is_err());
    }
}
