//! Optimisation loop: alternating generator/discriminator updates per video,
//! the step learning-rate schedule, and the eight-way ablation matrix.

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::adversarial::{
    adversarial_objectives, bce_graph, sparsity_loss_graph, variance_loss_graph,
    weight_features_graph, Discriminator, LossBundle, TrainWeights, Vae, VaeGanConfig,
};
use crate::csnet::{CsNet, CsNetConfig, ScorerFlags};
use crate::dataio::{Dataset, VideoRecord};
use crate::error::{Error, Result};
use crate::graph::{Graph, Mat};
use crate::nn::{clip_grad_norm, Adam};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationFlags {
    pub use_csnet: bool,
    pub use_difference: bool,
    pub use_variance_loss: bool,
}

impl Default for AblationFlags {
    fn default() -> Self {
        AblationFlags {
            use_csnet: true,
            use_difference: true,
            use_variance_loss: true,
        }
    }
}

impl AblationFlags {
    pub fn scorer_flags(&self) -> ScorerFlags {
        ScorerFlags {
            two_stream: self.use_csnet,
            difference: self.use_difference,
        }
    }

    fn new(use_csnet: bool, use_difference: bool, use_variance_loss: bool) -> Self {
        AblationFlags {
            use_csnet,
            use_difference,
            use_variance_loss,
        }
    }
}

/// Flag triples (CSNet, difference, variance loss) of Exp. 1 to Exp. 8.
pub const ABLATION_ROWS: [(bool, bool, bool); 8] = [
    (false, false, false),
    (true, false, false),
    (false, true, false),
    (false, false, true),
    (true, true, false),
    (true, false, true),
    (false, true, true),
    (true, true, true),
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub max_epochs: usize,
    pub base_lr: f64,
    /// Factor applied to the learning rate from `decay_epoch` on.
    pub lr_decay: f64,
    pub decay_epoch: usize,
    /// Discriminator learning rate relative to the generator's.
    pub disc_lr_scale: f64,
    pub grad_clip: f64,
    pub weights: TrainWeights,
    pub ablation: AblationFlags,
    pub supervised: bool,
    /// Also apply the variance loss to the two stream scores.
    pub variance_on_streams: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            max_epochs: 20,
            base_lr: 1e-4,
            lr_decay: 0.1,
            decay_epoch: 10,
            disc_lr_scale: 1.0,
            grad_clip: 5.0,
            weights: TrainWeights::default(),
            ablation: AblationFlags::default(),
            supervised: false,
            variance_on_streams: false,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn check(&self) -> Result<()> {
        if self.max_epochs == 0 {
            return Err(Error::Config("train.max_epochs must be >= 1".into()));
        }
        if !(self.base_lr.is_finite() && self.base_lr > 0.0) {
            return Err(Error::Config("train.base_lr must be > 0".into()));
        }
        if !(self.lr_decay.is_finite() && self.lr_decay > 0.0) {
            return Err(Error::Config("train.lr_decay must be > 0".into()));
        }
        if !(self.disc_lr_scale.is_finite() && self.disc_lr_scale > 0.0) {
            return Err(Error::Config("train.disc_lr_scale must be > 0".into()));
        }
        if !(self.grad_clip > 0.0) {
            return Err(Error::Config("train.grad_clip must be > 0".into()));
        }
        self.weights.check()
    }
}

/// Learning rate at `epoch`: `base_lr` before `decay_epoch`, scaled by
/// `lr_decay` afterwards.
pub fn lr_schedule(epoch: usize, cfg: &TrainConfig) -> Result<f64> {
    cfg.check()?;
    if epoch >= cfg.max_epochs {
        return Err(Error::Domain(format!(
            "epoch {epoch} outside 0..{}",
            cfg.max_epochs
        )));
    }
    Ok(if epoch < cfg.decay_epoch {
        cfg.base_lr
    } else {
        cfg.base_lr * cfg.lr_decay
    })
}

/// The eight configurations of the ablation table, Exp. 1 first.
pub fn ablation_matrix(base: &TrainConfig) -> Vec<TrainConfig> {
    ABLATION_ROWS
        .iter()
        .map(|&(c, d, v)| TrainConfig {
            ablation: AblationFlags::new(c, d, v),
            ..base.clone()
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub csnet: CsNetConfig,
    pub vaegan: VaeGanConfig,
}

impl ModelConfig {
    pub fn check(&self) -> Result<()> {
        self.csnet.check()?;
        self.vaegan.check()
    }
}

/// Scorer plus the VAE-GAN used to train it.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub flags: ScorerFlags,
    pub scorer: CsNet,
    pub vae: Vae,
    pub disc: Discriminator,
}

impl Model {
    /// Freshly initialised networks; every sub-network gets its own stream
    /// derived from `seed`.
    pub fn new(config: &ModelConfig, flags: ScorerFlags, seed: u64) -> Result<Self> {
        config.check()?;
        let mut seeds = ChaCha8Rng::seed_from_u64(seed);
        let d = config.csnet.input_dim;
        let scorer = CsNet::new(&config.csnet, flags, seeds.next_u64())?;
        let vae = Vae::new(d, &config.vaegan, seeds.next_u64());
        let disc = Discriminator::new(d, &config.vaegan, seeds.next_u64());
        Ok(Model {
            config: config.clone(),
            flags,
            scorer,
            vae,
            disc,
        })
    }
}

/// Population variance of a score vector.
pub fn score_variance(p: &[f64]) -> f64 {
    if p.is_empty() {
        return 0.0;
    }
    let n = p.len() as f64;
    let mean = p.iter().sum::<f64>() / n;
    p.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    /// Mean of the pre-update bundles over the epoch's steps.
    pub losses: LossBundle,
    /// Mean over training videos of the score variance after the epoch.
    pub score_variance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    /// Every step's bundle in order.
    pub steps: Vec<LossBundle>,
    /// Seconds spent per epoch; kept out of the log so reruns stay identical.
    #[serde(skip)]
    pub wall_seconds: Vec<f64>,
}

impl TrainHistory {
    /// One JSON record per epoch.
    pub fn to_jsonl(&self) -> String {
        self.epochs
            .iter()
            .map(|e| serde_json::to_string(e).expect("plain record") + "\n")
            .collect()
    }
}

/// Mutable training state: the model, one optimiser per parameter group, and
/// the random stream for shuffling and noise.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub model: Model,
    opt_scorer: Adam,
    opt_vae: Adam,
    opt_disc: Adam,
    rng: ChaCha8Rng,
    pub epoch: usize,
}

impl TrainState {
    pub fn new(model_cfg: &ModelConfig, cfg: &TrainConfig) -> Result<Self> {
        cfg.check()?;
        let model = Model::new(model_cfg, cfg.ablation.scorer_flags(), cfg.seed)?;
        Ok(TrainState {
            opt_scorer: Adam::new(&model.scorer.store),
            opt_vae: Adam::new(&model.vae.store),
            opt_disc: Adam::new(&model.disc.store),
            model,
            rng: ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5e_ed0f_7a1e),
            epoch: 0,
        })
    }
}

fn gaussian(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Mat {
    Array2::from_shape_simple_fn((rows, cols), || rng.sample::<f64, _>(StandardNormal))
}

/// One alternating update on a single video. Both objectives are evaluated
/// at the pre-update parameters; the generator side (scorer and VAE) then
/// steps on its objective and the discriminator on its own.
pub fn train_step(
    video: &VideoRecord,
    state: &mut TrainState,
    cfg: &TrainConfig,
    lr: f64,
) -> Result<LossBundle> {
    let target = if cfg.supervised {
        Some(video.gtscore_f64().ok_or_else(|| {
            Error::Config(format!(
                "supervised training needs gtscore (video {})",
                video.id
            ))
        })?)
    } else {
        None
    };
    let x = video.features_f64();
    let t = x.nrows();
    let latent = state.model.vae.latent;
    let eta = gaussian(&mut state.rng, t, latent);
    let eta_uniform = gaussian(&mut state.rng, t, latent);
    let uniform = Array2::from_shape_simple_fn((t, 1), || state.rng.random::<f64>());

    let model = &state.model;
    let w = &cfg.weights;
    let mut g = Graph::new();
    let ps = model.scorer.store.bind(&mut g);
    let pv = model.vae.store.bind(&mut g);
    let pd = model.disc.store.bind(&mut g);

    let sv = model.scorer.forward_graph(&mut g, &ps, &x)?;
    let xc = g.constant(x);
    let x_tilde = weight_features_graph(&mut g, xc, sv.p);
    let rec = model.vae.forward_graph(&mut g, &pv, x_tilde, &eta)?;
    let u = g.constant(uniform);
    let x_uniform = weight_features_graph(&mut g, xc, u);
    let rec_u = model
        .vae
        .forward_graph(&mut g, &pv, x_uniform, &eta_uniform)?;
    let adv = adversarial_objectives(
        &mut g,
        &model.disc,
        &pd,
        xc,
        rec.x_hat,
        rec_u.x_hat,
        rec.mu,
        rec.logvar,
        model.config.vaegan.recon,
    )?;
    let var = variance_loss_graph(&mut g, sv.p, w.eps);
    let sparsity = sparsity_loss_graph(&mut g, sv.p, w.sigma_target);

    let mut terms = vec![
        (w.sparsity, sparsity),
        (w.recon, adv.recon),
        (w.prior, adv.prior),
        (w.gan, adv.gan_g),
    ];
    if cfg.ablation.use_variance_loss {
        terms.push((w.variance, var));
        if cfg.variance_on_streams {
            terms.push((w.variance, variance_loss_graph(&mut g, sv.p1, w.eps)));
            if let Some(p2) = sv.p2 {
                terms.push((w.variance, variance_loss_graph(&mut g, p2, w.eps)));
            }
        }
    }
    if let Some(y) = &target {
        terms.push((1.0, bce_graph(&mut g, sv.p, y)));
    }
    let mut total: Option<_> = None;
    for (lambda, v) in terms {
        if lambda == 0.0 {
            continue;
        }
        let s = g.scale(v, lambda);
        total = Some(match total {
            Some(acc) => g.add(acc, s),
            None => s,
        });
    }

    let bundle = LossBundle {
        var: g.scalar(var),
        sparsity: g.scalar(sparsity),
        recon: g.scalar(adv.recon),
        prior: g.scalar(adv.prior),
        gan_g: g.scalar(adv.gan_g),
        gan_d: g.scalar(adv.gan_d),
    };
    if !bundle.all_finite() {
        return Err(Error::Numeric(format!(
            "non-finite loss at epoch {} on video {}: {bundle:?}",
            state.epoch, video.id
        )));
    }

    let mut scorer_grads = Vec::new();
    let mut vae_grads = Vec::new();
    if let Some(total) = total {
        let grads = g.backward(total);
        scorer_grads = model.scorer.store.grads(&ps, &grads);
        vae_grads = model.vae.store.grads(&pv, &grads);
    }
    let d_grads = g.backward(adv.gan_d);
    let mut disc_grads = model.disc.store.grads(&pd, &d_grads);
    drop(g);

    if !scorer_grads.is_empty() {
        let mut joint: Vec<Mat> = scorer_grads.into_iter().chain(vae_grads).collect();
        let norm = clip_grad_norm(&mut joint, cfg.grad_clip);
        if !norm.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite generator gradient at epoch {} on video {}",
                state.epoch, video.id
            )));
        }
        let n_scorer = state.model.scorer.store.len();
        let vae_part = joint.split_off(n_scorer);
        state
            .opt_scorer
            .step(&mut state.model.scorer.store, &joint, lr);
        state
            .opt_vae
            .step(&mut state.model.vae.store, &vae_part, lr);
    }
    let norm = clip_grad_norm(&mut disc_grads, cfg.grad_clip);
    if !norm.is_finite() {
        return Err(Error::Numeric(format!(
            "non-finite discriminator gradient at epoch {} on video {}",
            state.epoch, video.id
        )));
    }
    state.opt_disc.step(
        &mut state.model.disc.store,
        &disc_grads,
        lr * cfg.disc_lr_scale,
    );
    Ok(bundle)
}

/// Mean score variance of the current scorer over `videos`.
pub fn mean_score_variance(model: &Model, videos: &[&VideoRecord]) -> Result<f64> {
    let mut total = 0.0;
    for v in videos {
        let p = model.scorer.forward(&v.features_f64())?;
        total += score_variance(p.as_slice());
    }
    Ok(total / videos.len().max(1) as f64)
}

/// Trains on `videos` for `cfg.max_epochs` epochs, one video per step in a
/// seeded shuffled order.
pub fn train(
    videos: &[&VideoRecord],
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
) -> Result<(Model, TrainHistory)> {
    if videos.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    if let Some(v) = videos.iter().find(|v| v.dim() != model_cfg.csnet.input_dim) {
        return Err(Error::Shape(format!(
            "video {} has feature dimension {}, model expects {}",
            v.id,
            v.dim(),
            model_cfg.csnet.input_dim
        )));
    }
    let mut state = TrainState::new(model_cfg, cfg)?;
    let mut history = TrainHistory::default();
    let mut order: Vec<usize> = (0..videos.len()).collect();
    for epoch in 0..cfg.max_epochs {
        let started = std::time::Instant::now();
        state.epoch = epoch;
        let lr = lr_schedule(epoch, cfg)?;
        order.shuffle(&mut state.rng);
        let mut sum = LossBundle::default();
        for &i in &order {
            let b = train_step(videos[i], &mut state, cfg, lr)?;
            sum = sum.add(&b);
            history.steps.push(b);
        }
        let score_variance = mean_score_variance(&state.model, videos)?;
        history.epochs.push(EpochRecord {
            epoch,
            lr,
            losses: sum.scaled(1.0 / order.len() as f64),
            score_variance,
        });
        history.wall_seconds.push(started.elapsed().as_secs_f64());
    }
    Ok((state.model, history))
}

/// [`train`] over every video of a dataset.
pub fn train_dataset(
    dataset: &Dataset,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
) -> Result<(Model, TrainHistory)> {
    let videos: Vec<&VideoRecord> = dataset.videos.iter().collect();
    train(&videos, model_cfg, cfg)
}
