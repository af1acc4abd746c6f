//! End-to-end behaviour of the training loop on small synthetic data.

use vsum_core::adversarial::{TrainWeights, VaeGanConfig};
use vsum_core::csnet::CsNetConfig;
use vsum_core::dataio::{generate_synthetic, Dataset, SyntheticSpec};
use vsum_core::trainer::{train_dataset, AblationFlags, Model, ModelConfig, TrainConfig};
use vsum_core::Error;

fn data(n: usize, seed: u64) -> Dataset {
    generate_synthetic(&SyntheticSpec {
        n_videos: n,
        min_len: 30,
        max_len: 40,
        dim: 8,
        min_segments: 3,
        max_segments: 5,
        seed,
        ..SyntheticSpec::default()
    })
    .unwrap()
}

fn model(dim: usize) -> ModelConfig {
    ModelConfig {
        csnet: CsNetConfig {
            input_dim: dim,
            hidden: 8,
            ..CsNetConfig::default()
        },
        vaegan: VaeGanConfig {
            latent: 8,
            hidden: 8,
            disc_hidden: 8,
            ..VaeGanConfig::default()
        },
    }
}

fn bce(p: &[f64], y: &[f64]) -> f64 {
    let e = 1e-12;
    p.iter()
        .zip(y)
        .map(|(p, y)| -(y * (p + e).ln() + (1.0 - y) * (1.0 - p + e).ln()))
        .sum::<f64>()
        / p.len() as f64
}

#[test]
fn training_is_deterministic() {
    let d = data(3, 1);
    let cfg = TrainConfig {
        max_epochs: 2,
        seed: 5,
        ..TrainConfig::default()
    };
    let (m1, h1) = train_dataset(&d, &model(8), &cfg).unwrap();
    let (m2, h2) = train_dataset(&d, &model(8), &cfg).unwrap();
    assert_eq!(h1.to_jsonl(), h2.to_jsonl());
    assert_eq!(h1.epochs.len(), 2);
    assert_eq!(h1.steps.len(), 6);
    assert_eq!(m1.scorer.store, m2.scorer.store);
    let x = d.videos[0].features_f64();
    assert_eq!(
        m1.scorer.forward(&x).unwrap(),
        m2.scorer.forward(&x).unwrap()
    );

    let other = TrainConfig { seed: 6, ..cfg };
    let (_, h3) = train_dataset(&d, &model(8), &other).unwrap();
    assert_ne!(h1.to_jsonl(), h3.to_jsonl());
}

#[test]
fn supervised_without_labels_is_a_config_error() {
    let mut d = data(2, 2);
    d.videos[1].gtscore = None;
    let cfg = TrainConfig {
        max_epochs: 1,
        supervised: true,
        ..TrainConfig::default()
    };
    assert!(matches!(
        train_dataset(&d, &model(8), &cfg),
        Err(Error::Config(_))
    ));
}

#[test]
fn supervised_term_fits_labels() {
    let d = data(2, 3);
    let cfg = TrainConfig {
        max_epochs: 30,
        base_lr: 1e-2,
        decay_epoch: 1000,
        supervised: true,
        weights: TrainWeights {
            variance: 0.0,
            sparsity: 0.0,
            recon: 0.0,
            prior: 0.0,
            gan: 0.0,
            ..TrainWeights::default()
        },
        ablation: AblationFlags {
            use_variance_loss: false,
            ..AblationFlags::default()
        },
        ..TrainConfig::default()
    };
    let (after, _) = train_dataset(&d, &model(8), &cfg).unwrap();
    let initial = Model::new(&model(8), cfg.ablation.scorer_flags(), cfg.seed).unwrap();
    let loss = |m: &Model| {
        d.videos
            .iter()
            .map(|v| {
                bce(
                    m.scorer.forward(&v.features_f64()).unwrap().as_slice(),
                    &v.gtscore_f64().unwrap(),
                )
            })
            .sum::<f64>()
    };
    let start = loss(&initial);
    let end = loss(&after);
    assert!(end < 0.8 * start, "bce {start} -> {end}");
}

#[test]
fn variance_term_raises_score_spread() {
    let d = data(4, 4);
    let seeds = [0u64, 1, 2];
    let mut mean = vec![0.0; 5];
    for &seed in &seeds {
        let cfg = TrainConfig {
            max_epochs: 5,
            base_lr: 1e-3,
            seed,
            ..TrainConfig::default()
        };
        let (_, h) = train_dataset(&d, &model(8), &cfg).unwrap();
        for (acc, e) in mean.iter_mut().zip(&h.epochs) {
            *acc += e.score_variance / seeds.len() as f64;
        }
    }
    assert!(mean.windows(2).all(|w| w[1] >= w[0]), "{mean:?}");
}
