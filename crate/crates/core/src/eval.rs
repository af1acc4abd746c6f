//! Key-shot F-score, per-dataset aggregation of multiple users, the
//! canonical/augmented/transfer split protocol and report assembly.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataio::{Dataset, DatasetKind};
use crate::error::{Error, Result};

pub const RECORDS_FILE: &str = "report.jsonl";
pub const SUMMARY_FILE: &str = "summary.txt";
pub const REPORT_FILE: &str = "report.json";

/// Precision and recall in [0,1]; F-score in percent.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub fscore: f64,
}

/// Overlap-based precision/recall/F between two binary frame masks.
/// Empty prediction gives P = 0, empty user summary R = 0, and P + R = 0 gives F = 0.
pub fn fscore(pred: &[u8], user: &[u8]) -> Result<Prf> {
    if pred.len() != user.len() {
        return Err(Error::Shape(format!(
            "prediction has {} frames, user summary {}",
            pred.len(),
            user.len()
        )));
    }
    let mut overlap = 0usize;
    let mut n_pred = 0usize;
    let mut n_user = 0usize;
    for (&a, &b) in pred.iter().zip(user) {
        let (a, b) = (a != 0, b != 0);
        n_pred += a as usize;
        n_user += b as usize;
        overlap += (a && b) as usize;
    }
    let precision = if n_pred == 0 {
        0.0
    } else {
        overlap as f64 / n_pred as f64
    };
    let recall = if n_user == 0 {
        0.0
    } else {
        overlap as f64 / n_user as f64
    };
    let fscore = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall) * 100.0
    };
    Ok(Prf {
        precision,
        recall,
        fscore,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Aggregation {
    Max,
    #[default]
    Mean,
}

impl Aggregation {
    /// SumMe-style data keeps the best-matching user; TVSum-style averages users.
    pub fn for_kind(kind: DatasetKind, synthetic: Aggregation) -> Aggregation {
        match kind {
            DatasetKind::SummeLike => Aggregation::Max,
            DatasetKind::TvsumLike => Aggregation::Mean,
            DatasetKind::Synthetic => synthetic,
        }
    }
}

/// Scores a predicted mask against every user. Under `Max` the P/R of the
/// best user are reported; under `Mean` all three figures are averaged.
pub fn evaluate_video(pred: &[u8], users: &Array2<u8>, aggregation: Aggregation) -> Result<Prf> {
    if users.nrows() == 0 {
        return Err(Error::Domain("no user summaries".into()));
    }
    let per_user = users
        .rows()
        .into_iter()
        .map(|row| fscore(pred, row.as_slice().expect("standard layout")))
        .collect::<Result<Vec<_>>>()?;
    Ok(match aggregation {
        Aggregation::Max => per_user
            .into_iter()
            .reduce(|best, x| if x.fscore > best.fscore { x } else { best })
            .expect("at least one user"),
        Aggregation::Mean => {
            let n = per_user.len() as f64;
            Prf {
                precision: per_user.iter().map(|x| x.precision).sum::<f64>() / n,
                recall: per_user.iter().map(|x| x.recall).sum::<f64>() / n,
                fscore: per_user.iter().map(|x| x.fscore).sum::<f64>() / n,
            }
        }
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Setting {
    #[default]
    Canonical,
    Augmented,
    Transfer,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct VideoRef {
    pub dataset: String,
    pub id: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub index: usize,
    pub train: Vec<VideoRef>,
    pub test: Vec<VideoRef>,
}

fn refs(d: &Dataset) -> Vec<VideoRef> {
    d.videos
        .iter()
        .map(|v| VideoRef {
            dataset: d.name.clone(),
            id: v.id.clone(),
        })
        .collect()
}

/// Train/test splits for a target dataset.
///
/// Canonical: the shuffled target is cut into `n_repeats` disjoint folds whose
/// sizes differ by at most one; each fold is tested once, the rest trains.
/// Augmented: canonical folds with every auxiliary video added to training.
/// Transfer: one split training on auxiliary data and testing on the whole target.
pub fn make_splits(
    target: &Dataset,
    auxiliary: &[Dataset],
    setting: Setting,
    n_repeats: usize,
    seed: u64,
) -> Result<Vec<Split>> {
    let aux: Vec<VideoRef> = auxiliary.iter().flat_map(refs).collect();
    match setting {
        Setting::Transfer => {
            if aux.is_empty() {
                return Err(Error::Config(
                    "transfer setting needs auxiliary datasets".into(),
                ));
            }
            if target.videos.is_empty() {
                return Err(Error::Config("target dataset is empty".into()));
            }
            Ok(vec![Split {
                index: 0,
                train: aux,
                test: refs(target),
            }])
        }
        Setting::Canonical | Setting::Augmented => {
            if setting == Setting::Augmented && aux.is_empty() {
                return Err(Error::Config(
                    "augmented setting needs auxiliary datasets".into(),
                ));
            }
            if n_repeats < 2 {
                return Err(Error::Config("n_repeats must be at least 2".into()));
            }
            let n = target.videos.len();
            if n < n_repeats {
                return Err(Error::Config(format!(
                    "dataset too small: {n} videos for {n_repeats} folds"
                )));
            }
            let mut order = refs(target);
            order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
            let base = n / n_repeats;
            let extra = n % n_repeats;
            let mut splits = Vec::with_capacity(n_repeats);
            let mut lo = 0;
            for f in 0..n_repeats {
                let hi = lo + base + usize::from(f < extra);
                let test = order[lo..hi].to_vec();
                let mut train: Vec<VideoRef> =
                    order[..lo].iter().chain(&order[hi..]).cloned().collect();
                if setting == Setting::Augmented {
                    train.extend(aux.iter().cloned());
                }
                splits.push(Split {
                    index: f,
                    train,
                    test,
                });
                lo = hi;
            }
            Ok(splits)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VideoResult {
    pub split: usize,
    pub video: String,
    pub precision: f64,
    pub recall: f64,
    pub fscore: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub seed: u64,
    pub splits: Vec<Split>,
    pub config: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub setting: Setting,
    pub per_video: Vec<VideoResult>,
    /// Mean F over the test videos of each split, in split order.
    pub split_means: Vec<f64>,
    /// Mean of the split means.
    pub final_fscore: f64,
    pub provenance: Provenance,
}

/// Aggregates per-video results; every split in the provenance must have results.
pub fn report(
    setting: Setting,
    results: Vec<VideoResult>,
    provenance: Provenance,
) -> Result<EvalReport> {
    if results.is_empty() {
        return Err(Error::Domain("no evaluation results".into()));
    }
    let n_splits = provenance.splits.len().max(1);
    let mut split_means = Vec::with_capacity(n_splits);
    for s in 0..n_splits {
        let fs: Vec<f64> = results
            .iter()
            .filter(|r| r.split == s)
            .map(|r| r.fscore)
            .collect();
        if fs.is_empty() {
            return Err(Error::Domain(format!("missing results for split {s}")));
        }
        split_means.push(fs.iter().sum::<f64>() / fs.len() as f64);
    }
    if let Some(r) = results.iter().find(|r| r.split >= n_splits) {
        return Err(Error::Domain(format!(
            "result for unknown split {}",
            r.split
        )));
    }
    let final_fscore = split_means.iter().sum::<f64>() / split_means.len() as f64;
    Ok(EvalReport {
        setting,
        per_video: results,
        split_means,
        final_fscore,
        provenance,
    })
}

impl EvalReport {
    pub fn records_jsonl(&self) -> String {
        self.per_video
            .iter()
            .map(|r| serde_json::to_string(r).expect("plain record") + "\n")
            .collect()
    }

    pub fn summary_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "setting: {:?}", self.setting);
        let _ = writeln!(s, "| split | videos | F-score (%) |");
        let _ = writeln!(s, "|-------|--------|-------------|");
        for (i, m) in self.split_means.iter().enumerate() {
            let n = self.per_video.iter().filter(|r| r.split == i).count();
            let _ = writeln!(s, "| {i} | {n} | {m:.2} |");
        }
        let _ = writeln!(
            s,
            "| final | {} | {:.2} |",
            self.per_video.len(),
            self.final_fscore
        );
        s
    }

    /// Writes `report.jsonl`, `summary.txt` and `report.json` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let put = |name: &str, text: String| {
            let p = dir.join(name);
            fs::write(&p, text).map_err(|e| Error::io(&p, e))
        };
        put(RECORDS_FILE, self.records_jsonl())?;
        put(SUMMARY_FILE, self.summary_table())?;
        put(
            REPORT_FILE,
            serde_json::to_string_pretty(self).map_err(|e| Error::Format(e.to_string()))?,
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn perfect_and_disjoint() {
        let a = [1, 1, 0, 0];
        let r = fscore(&a, &a).unwrap();
        assert_eq!((r.precision, r.recall, r.fscore), (1.0, 1.0, 100.0));
        assert_eq!(fscore(&[1, 1, 0, 0], &[0, 0, 1, 1]).unwrap().fscore, 0.0);
    }

    #[test]
    fn analytic_example() {
        let mut pred = vec![0u8; 40];
        let mut user = vec![0u8; 40];
        pred[0..10].fill(1);
        user[5..25].fill(1);
        let r = fscore(&pred, &user).unwrap();
        assert_eq!(r.precision, 0.5);
        assert_eq!(r.recall, 0.25);
        assert!((r.fscore - 100.0 / 3.0).abs() < 1e-9);
    }

    #[test]
    fn zero_denominators() {
        let r = fscore(&[0, 0], &[1, 0]).unwrap();
        assert_eq!((r.precision, r.fscore), (0.0, 0.0));
        let r = fscore(&[1, 0], &[0, 0]).unwrap();
        assert_eq!((r.recall, r.fscore), (0.0, 0.0));
        assert!(fscore(&[1], &[1, 0]).is_err());
    }

    #[test]
    fn max_versus_mean_users() {
        let pred = [1, 1, 0, 0];
        let users = array![[1, 1, 0, 0], [0, 0, 1, 1]];
        assert_eq!(
            evaluate_video(&pred, &users, Aggregation::Max)
                .unwrap()
                .fscore,
            100.0
        );
        assert_eq!(
            evaluate_video(&pred, &users, Aggregation::Mean)
                .unwrap()
                .fscore,
            50.0
        );
        let one = array![[1, 0, 0, 1]];
        let direct = fscore(&pred, &[1, 0, 0, 1]).unwrap();
        for agg in [Aggregation::Max, Aggregation::Mean] {
            assert_eq!(evaluate_video(&pred, &one, agg).unwrap(), direct);
        }
        assert!(evaluate_video(&pred, &Array2::zeros((0, 4)), Aggregation::Max).is_err());
    }

    #[test]
    fn aggregation_follows_kind() {
        assert_eq!(
            Aggregation::for_kind(DatasetKind::SummeLike, Aggregation::Mean),
            Aggregation::Max
        );
        assert_eq!(
            Aggregation::for_kind(DatasetKind::TvsumLike, Aggregation::Max),
            Aggregation::Mean
        );
        assert_eq!(
            Aggregation::for_kind(DatasetKind::Synthetic, Aggregation::Max),
            Aggregation::Max
        );
    }

    fn result(split: usize, f: f64) -> VideoResult {
        VideoResult {
            split,
            video: format!("v{split}"),
            precision: 0.0,
            recall: 0.0,
            fscore: f,
        }
    }

    fn provenance(n: usize) -> Provenance {
        Provenance {
            seed: 0,
            splits: (0..n)
                .map(|index| Split {
                    index,
                    train: vec![],
                    test: vec![],
                })
                .collect(),
            config: serde_json::Value::Null,
        }
    }

    #[test]
    fn report_means() {
        let r = report(
            Setting::Canonical,
            (0..5).map(|s| result(s, 50.0)).collect(),
            provenance(5),
        )
        .unwrap();
        assert_eq!(r.final_fscore, 50.0);
        let r = report(
            Setting::Canonical,
            [40.0, 45.0, 50.0, 55.0, 60.0]
                .iter()
                .enumerate()
                .map(|(s, &f)| result(s, f))
                .collect(),
            provenance(5),
        )
        .unwrap();
        assert_eq!(r.final_fscore, 50.0);
        assert!(r.summary_table().contains("| final | 5 | 50.00 |"));
        assert_eq!(r.records_jsonl().lines().count(), 5);
    }

    #[test]
    fn report_errors() {
        assert!(report(Setting::Canonical, vec![], provenance(5)).is_err());
        let missing = (0..4).map(|s| result(s, 1.0)).collect();
        assert!(report(Setting::Canonical, missing, provenance(5)).is_err());
    }
}
