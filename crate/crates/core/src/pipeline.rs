//! Scores to reports: segmentation, key-shot selection and F-score per video,
//! the per-split train/test protocol, and the ablation sweep.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::dataio::{Dataset, DatasetKind, VideoRecord};
use crate::error::{Error, Result};
use crate::eval::{
    evaluate_video, make_splits, report, Aggregation, EvalReport, Prf, Provenance, Setting, Split,
    VideoRef, VideoResult,
};
use crate::segment::{segment_features, to_original_frames, KtsConfig, ShotSegmentation};
use crate::summarize::{summarize, SummaryConfig, SummarySelection};
use crate::trainer::{
    ablation_matrix, train, AblationFlags, Model, ModelConfig, TrainConfig, TrainHistory,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub setting: Setting,
    /// Number of folds (and test repetitions) for canonical/augmented.
    pub n_repeats: usize,
    /// Seed of the split shuffle.
    pub seed: u64,
    /// User aggregation for synthetic bundles.
    pub synthetic_aggregation: Aggregation,
    pub summary: SummaryConfig,
    pub kts: KtsConfig,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            setting: Setting::Canonical,
            n_repeats: 5,
            seed: 0,
            synthetic_aggregation: Aggregation::Mean,
            summary: SummaryConfig::default(),
            kts: KtsConfig::default(),
        }
    }
}

impl EvalConfig {
    pub fn check(&self) -> Result<()> {
        if self.n_repeats < 2 {
            return Err(Error::Config("eval.n_repeats must be >= 2".into()));
        }
        if !(self.kts.penalty_weight >= 0.0) {
            return Err(Error::Config("eval.kts.penalty_weight must be >= 0".into()));
        }
        self.summary.check()
    }
}

/// Shots over original frames: the stored change points, or KTS on the
/// sampled features mapped through `picks`.
pub fn video_segmentation(video: &VideoRecord, kts: &KtsConfig) -> Result<ShotSegmentation> {
    match &video.change_points {
        Some(cps) => ShotSegmentation::new(cps.clone(), video.n_frames),
        None => {
            let seg = segment_features(&video.features_f64(), kts)?;
            to_original_frames(&seg, &video.picks, video.n_frames)
        }
    }
}

/// Selection and F-score for one video given its sampled-frame scores.
pub fn evaluate_scores(
    video: &VideoRecord,
    p: &[f64],
    kind: DatasetKind,
    cfg: &EvalConfig,
) -> Result<(Prf, SummarySelection)> {
    let users = video
        .user_summaries
        .as_ref()
        .ok_or_else(|| Error::validation(&video.id, "user_summaries", "required for evaluation"))?;
    let seg = video_segmentation(video, &cfg.kts)?;
    let sel = summarize(p, &video.picks, &seg, video.n_frames, &cfg.summary)?;
    let prf = evaluate_video(
        &sel.frame_mask,
        users,
        Aggregation::for_kind(kind, cfg.synthetic_aggregation),
    )?;
    Ok((prf, sel))
}

fn resolve<'a>(
    refs: &[VideoRef],
    datasets: &[&'a Dataset],
) -> Result<Vec<(&'a VideoRecord, DatasetKind)>> {
    refs.iter()
        .map(|r| {
            let d = datasets
                .iter()
                .find(|d| d.name == r.dataset)
                .ok_or_else(|| Error::Config(format!("unknown dataset '{}'", r.dataset)))?;
            let v = d
                .get(&r.id)
                .ok_or_else(|| Error::Config(format!("video '{}' not in '{}'", r.id, r.dataset)))?;
            Ok((v, d.kind))
        })
        .collect()
}

fn corpus<'a>(target: &'a Dataset, auxiliary: &'a [Dataset]) -> Result<Vec<&'a Dataset>> {
    let all: Vec<&Dataset> = std::iter::once(target).chain(auxiliary).collect();
    for (i, d) in all.iter().enumerate() {
        if all[..i].iter().any(|o| o.name == d.name) {
            return Err(Error::Config(format!(
                "dataset name '{}' used twice",
                d.name
            )));
        }
    }
    Ok(all)
}

fn test_results(
    model: &Model,
    split: &Split,
    datasets: &[&Dataset],
    cfg: &EvalConfig,
) -> Result<Vec<VideoResult>> {
    resolve(&split.test, datasets)?
        .into_iter()
        .map(|(v, kind)| {
            let p = model.scorer.forward(&v.features_f64())?;
            let (prf, _) = evaluate_scores(v, p.as_slice(), kind, cfg)?;
            Ok(VideoResult {
                split: split.index,
                video: v.id.clone(),
                precision: prf.precision,
                recall: prf.recall,
                fscore: prf.fscore,
            })
        })
        .collect()
}

/// Scores every split's test videos with one fixed model.
pub fn evaluate_model(
    model: &Model,
    target: &Dataset,
    auxiliary: &[Dataset],
    cfg: &EvalConfig,
    config_echo: serde_json::Value,
) -> Result<EvalReport> {
    cfg.check()?;
    let datasets = corpus(target, auxiliary)?;
    let splits = make_splits(target, auxiliary, cfg.setting, cfg.n_repeats, cfg.seed)?;
    let mut results = Vec::new();
    for s in &splits {
        results.extend(test_results(model, s, &datasets, cfg)?);
    }
    report(
        cfg.setting,
        results,
        Provenance {
            seed: cfg.seed,
            splits,
            config: config_echo,
        },
    )
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProtocolOutcome {
    pub report: EvalReport,
    pub histories: Vec<TrainHistory>,
}

/// Trains a fresh model on each split's training videos and tests it on the
/// split's test videos.
pub fn run_protocol(
    target: &Dataset,
    auxiliary: &[Dataset],
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    cfg: &EvalConfig,
    config_echo: serde_json::Value,
) -> Result<ProtocolOutcome> {
    cfg.check()?;
    let datasets = corpus(target, auxiliary)?;
    let splits = make_splits(target, auxiliary, cfg.setting, cfg.n_repeats, cfg.seed)?;
    let mut results = Vec::new();
    let mut histories = Vec::new();
    for s in &splits {
        let train_set: Vec<&VideoRecord> = resolve(&s.train, &datasets)?
            .into_iter()
            .map(|(v, _)| v)
            .collect();
        let (model, history) = train(&train_set, model_cfg, train_cfg)?;
        results.extend(test_results(&model, s, &datasets, cfg)?);
        histories.push(history);
    }
    let report = report(
        cfg.setting,
        results,
        Provenance {
            seed: cfg.seed,
            splits,
            config: config_echo,
        },
    )?;
    Ok(ProtocolOutcome { report, histories })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    /// 1-based experiment number.
    pub exp: usize,
    pub flags: AblationFlags,
    pub seeds: Vec<u64>,
    /// Final F-score per seed.
    pub fscores: Vec<f64>,
    pub mean_fscore: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
    pub config: serde_json::Value,
}

impl AblationTable {
    pub fn to_markdown(&self) -> String {
        let on = |b: bool| if b { "on" } else { "off" };
        let mut s = String::new();
        let _ = writeln!(
            s,
            "| Exp. | CSNet | Difference | Variance Loss | F-score (%) | per seed |"
        );
        let _ = writeln!(
            s,
            "|------|-------|------------|---------------|-------------|----------|"
        );
        for r in &self.rows {
            let per: Vec<String> = r.fscores.iter().map(|f| format!("{f:.2}")).collect();
            let _ = writeln!(
                s,
                "| Exp.{} | {} | {} | {} | {:.2} | {} |",
                r.exp,
                on(r.flags.use_csnet),
                on(r.flags.use_difference),
                on(r.flags.use_variance_loss),
                r.mean_fscore,
                per.join(" ")
            );
        }
        s
    }

    pub fn to_jsonl(&self) -> String {
        self.rows
            .iter()
            .map(|r| serde_json::to_string(r).expect("plain record") + "\n")
            .collect()
    }
}

/// Runs the eight ablation configurations under the split protocol once per
/// training seed.
pub fn run_ablation(
    target: &Dataset,
    auxiliary: &[Dataset],
    model_cfg: &ModelConfig,
    base: &TrainConfig,
    cfg: &EvalConfig,
    seeds: &[u64],
    config_echo: serde_json::Value,
) -> Result<AblationTable> {
    if seeds.is_empty() {
        return Err(Error::Config("ablate.seeds must not be empty".into()));
    }
    let mut rows = Vec::with_capacity(8);
    for (i, row_cfg) in ablation_matrix(base).into_iter().enumerate() {
        let mut fscores = Vec::with_capacity(seeds.len());
        for &seed in seeds {
            let tc = TrainConfig {
                seed,
                ..row_cfg.clone()
            };
            let out = run_protocol(
                target,
                auxiliary,
                model_cfg,
                &tc,
                cfg,
                serde_json::Value::Null,
            )?;
            fscores.push(out.report.final_fscore);
        }
        rows.push(AblationRow {
            exp: i + 1,
            flags: row_cfg.ablation,
            seeds: seeds.to_vec(),
            mean_fscore: fscores.iter().sum::<f64>() / fscores.len() as f64,
            fscores,
        });
    }
    Ok(AblationTable {
        rows,
        config: config_echo,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::{generate_synthetic, SyntheticSpec};

    #[test]
    fn perfect_scores_beat_flat_scores() {
        let d = generate_synthetic(&SyntheticSpec {
            n_videos: 1,
            ..SyntheticSpec::default()
        })
        .unwrap();
        let v = &d.videos[0];
        let cfg = EvalConfig::default();
        let gt = v.gtscore_f64().unwrap();
        let (good, sel) = evaluate_scores(v, &gt, d.kind, &cfg).unwrap();
        assert!(sel.frame_mask.iter().filter(|&&m| m == 1).count() <= sel.budget_frames);
        let inverted: Vec<f64> = gt.iter().map(|g| 1.0 - g).collect();
        let (bad, _) = evaluate_scores(v, &inverted, d.kind, &cfg).unwrap();
        assert!(good.fscore > bad.fscore);
    }

    #[test]
    fn missing_users_is_an_error() {
        let mut d = generate_synthetic(&SyntheticSpec {
            n_videos: 1,
            ..SyntheticSpec::default()
        })
        .unwrap();
        d.videos[0].user_summaries = None;
        let v = &d.videos[0];
        let p = vec![0.5; v.n_sampled()];
        assert!(evaluate_scores(v, &p, d.kind, &EvalConfig::default()).is_err());
    }
}
