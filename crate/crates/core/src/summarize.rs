//! Frame scores to key-shot summaries under a length budget.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::segment::ShotSegmentation;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum ShotPooling {
    #[default]
    Mean,
    Max,
    Sum,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SummaryConfig {
    /// Summary length as a fraction of the original frame count.
    pub budget_ratio: f64,
    pub pooling: ShotPooling,
}

impl Default for SummaryConfig {
    fn default() -> Self {
        SummaryConfig {
            budget_ratio: 0.15,
            pooling: ShotPooling::Mean,
        }
    }
}

impl SummaryConfig {
    pub fn check(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.budget_ratio) {
            return Err(Error::Config(
                "summary.budget_ratio must lie in [0,1]".into(),
            ));
        }
        Ok(())
    }

    pub fn budget(&self, n_frames: usize) -> usize {
        (self.budget_ratio * n_frames as f64).floor() as usize
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SummarySelection {
    pub chosen_shots: Vec<usize>,
    pub frame_mask: Vec<u8>,
    pub budget_frames: usize,
}

/// Pools sampled-frame scores into one value per shot; shots without a
/// sampled frame score 0.
pub fn shot_scores(p: &[f64], picks: &[usize], seg: &ShotSegmentation) -> Result<Vec<f64>> {
    shot_scores_with(p, picks, seg, ShotPooling::Mean)
}

pub fn shot_scores_with(
    p: &[f64],
    picks: &[usize],
    seg: &ShotSegmentation,
    pooling: ShotPooling,
) -> Result<Vec<f64>> {
    if p.len() != picks.len() {
        return Err(Error::Shape(format!(
            "{} scores for {} picks",
            p.len(),
            picks.len()
        )));
    }
    let mut acc: Vec<Vec<f64>> = vec![Vec::new(); seg.len()];
    let mut shot = 0;
    for (&score, &frame) in p.iter().zip(picks) {
        while shot < seg.len() && seg.intervals[shot][1] < frame {
            shot += 1;
        }
        if shot == seg.len() {
            return Err(Error::Domain(format!(
                "pick {frame} lies beyond the last shot"
            )));
        }
        acc[shot].push(score);
    }
    Ok(acc
        .into_iter()
        .map(|v| {
            if v.is_empty() {
                return 0.0;
            }
            match pooling {
                ShotPooling::Mean => v.iter().sum::<f64>() / v.len() as f64,
                ShotPooling::Max => v.iter().copied().fold(f64::NEG_INFINITY, f64::max),
                ShotPooling::Sum => v.iter().sum(),
            }
        })
        .collect())
}

/// Exact 0/1 knapsack over an integer capacity.
///
/// Among optimal sets, lower indices are preferred: item `i` is taken whenever
/// some optimal completion includes it, scanning from index 0.
pub fn knapsack_select(values: &[f64], lengths: &[usize], budget: usize) -> Result<Vec<usize>> {
    if values.len() != lengths.len() {
        return Err(Error::Shape(format!(
            "{} values for {} lengths",
            values.len(),
            lengths.len()
        )));
    }
    if lengths.contains(&0) {
        return Err(Error::Domain("shot lengths must be positive".into()));
    }
    let n = values.len();
    let w = budget + 1;
    // best[i][c]: optimal value using items i.. with capacity c.
    let mut best = vec![0.0f64; (n + 1) * w];
    for i in (0..n).rev() {
        for c in 0..w {
            let skip = best[(i + 1) * w + c];
            best[i * w + c] = if lengths[i] <= c {
                skip.max(values[i] + best[(i + 1) * w + c - lengths[i]])
            } else {
                skip
            };
        }
    }
    let mut chosen = Vec::new();
    let mut c = budget;
    for i in 0..n {
        if lengths[i] <= c
            && values[i] + best[(i + 1) * w + c - lengths[i]] >= best[(i + 1) * w + c]
        {
            chosen.push(i);
            c -= lengths[i];
        }
    }
    Ok(chosen)
}

pub fn to_frame_summary(
    chosen: &[usize],
    seg: &ShotSegmentation,
    n_frames: usize,
) -> Result<Vec<u8>> {
    let mut mask = vec![0u8; n_frames];
    for &s in chosen {
        let iv = seg
            .intervals
            .get(s)
            .ok_or_else(|| Error::Domain(format!("shot {s} out of range")))?;
        if iv[1] >= n_frames {
            return Err(Error::Domain(format!("shot {s} exceeds {n_frames} frames")));
        }
        mask[iv[0]..=iv[1]].fill(1);
    }
    Ok(mask)
}

/// Full selection for one video: pool, knapsack at the configured budget, expand to frames.
pub fn summarize(
    p: &[f64],
    picks: &[usize],
    seg: &ShotSegmentation,
    n_frames: usize,
    cfg: &SummaryConfig,
) -> Result<SummarySelection> {
    let values = shot_scores_with(p, picks, seg, cfg.pooling)?;
    let budget = cfg.budget(n_frames);
    let chosen = knapsack_select(&values, &seg.lengths(), budget)?;
    let frame_mask = to_frame_summary(&chosen, seg, n_frames)?;
    Ok(SummarySelection {
        chosen_shots: chosen,
        frame_mask,
        budget_frames: budget,
    })
}
