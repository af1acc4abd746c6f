//! Training objectives: score-weighted reconstruction through a recurrent VAE,
//! a recurrent discriminator, and the score regularisers (sparsity and the
//! median-deviation variance loss).

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Mat, Var};
use crate::nn::{Bound, Linear, Lstm, ParamStore};

/// Loss weights and regulariser constants.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainWeights {
    pub variance: f64,
    pub sparsity: f64,
    pub recon: f64,
    pub prior: f64,
    pub gan: f64,
    /// Target mean score of the sparsity term.
    pub sigma_target: f64,
    /// Added to the deviation statistic before taking the reciprocal.
    pub eps: f64,
}

impl Default for TrainWeights {
    fn default() -> Self {
        TrainWeights {
            variance: 1.0,
            sparsity: 1.0,
            recon: 1.0,
            prior: 1.0,
            gan: 1.0,
            sigma_target: 0.3,
            eps: 1e-8,
        }
    }
}

impl TrainWeights {
    pub fn check(&self) -> Result<()> {
        let lambdas = [
            self.variance,
            self.sparsity,
            self.recon,
            self.prior,
            self.gan,
        ];
        if lambdas.iter().any(|l| !(l.is_finite() && *l >= 0.0)) {
            return Err(Error::Config("loss weights must be finite and >= 0".into()));
        }
        if !(self.sigma_target > 0.0 && self.sigma_target < 1.0) {
            return Err(Error::Config(
                "weights.sigma_target must lie in (0,1)".into(),
            ));
        }
        if !(self.eps > 0.0) {
            return Err(Error::Config("weights.eps must be > 0".into()));
        }
        Ok(())
    }
}

/// Every loss term of one training step.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBundle {
    pub var: f64,
    pub sparsity: f64,
    pub recon: f64,
    pub prior: f64,
    pub gan_g: f64,
    pub gan_d: f64,
}

impl LossBundle {
    pub fn all_finite(&self) -> bool {
        [
            self.var,
            self.sparsity,
            self.recon,
            self.prior,
            self.gan_g,
            self.gan_d,
        ]
        .iter()
        .all(|v| v.is_finite())
    }

    pub fn scaled(&self, s: f64) -> LossBundle {
        LossBundle {
            var: self.var * s,
            sparsity: self.sparsity * s,
            recon: self.recon * s,
            prior: self.prior * s,
            gan_g: self.gan_g * s,
            gan_d: self.gan_d * s,
        }
    }

    pub fn add(&self, o: &LossBundle) -> LossBundle {
        LossBundle {
            var: self.var + o.var,
            sparsity: self.sparsity + o.sparsity,
            recon: self.recon + o.recon,
            prior: self.prior + o.prior,
            gan_g: self.gan_g + o.gan_g,
            gan_d: self.gan_d + o.gan_d,
        }
    }
}

/// Indices of the order statistics defining the median: one for odd length,
/// the two middle elements for even length. Ties keep the earlier index first.
pub fn median_indices(p: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..p.len()).collect();
    order.sort_by(|&a, &b| p[a].total_cmp(&p[b]).then(a.cmp(&b)));
    let n = p.len();
    if n % 2 == 1 {
        vec![order[n / 2]]
    } else {
        vec![order[n / 2 - 1], order[n / 2]]
    }
}

pub fn median(p: &[f64]) -> Result<f64> {
    if p.is_empty() {
        return Err(Error::Domain("median of an empty vector".into()));
    }
    let idx = median_indices(p);
    Ok(idx.iter().map(|&i| p[i]).sum::<f64>() / idx.len() as f64)
}

/// Mean squared deviation of the scores from their median.
pub fn median_deviation_variance(p: &[f64]) -> Result<f64> {
    let med = median(p)?;
    Ok(p.iter().map(|&x| (x - med) * (x - med)).sum::<f64>() / p.len() as f64)
}

/// Reciprocal of the median-deviation variance (plus `eps`).
pub fn variance_loss(p: &[f64], eps: f64) -> Result<f64> {
    Ok(1.0 / (median_deviation_variance(p)? + eps))
}

pub fn sparsity_loss(p: &[f64], sigma_target: f64) -> Result<f64> {
    if p.is_empty() {
        return Err(Error::Domain("sparsity loss of an empty vector".into()));
    }
    let mean = p.iter().sum::<f64>() / p.len() as f64;
    Ok((mean - sigma_target) * (mean - sigma_target))
}

/// Scales row `t` of `x` by `p[t]`.
pub fn weight_features(x: &Array2<f64>, p: &[f64]) -> Result<Array2<f64>> {
    if x.nrows() != p.len() {
        return Err(Error::Shape(format!(
            "{} feature rows for {} scores",
            x.nrows(),
            p.len()
        )));
    }
    let mut out = x.clone();
    for (mut row, &s) in out.rows_mut().into_iter().zip(p) {
        row *= s;
    }
    Ok(out)
}

/// Graph form of [`median_deviation_variance`] for a `[T x 1]` node. The
/// gradient flows through the selected order statistic(s).
pub fn median_deviation_variance_graph(g: &mut Graph, p: Var) -> Var {
    let values: Vec<f64> = g.value(p).column(0).to_vec();
    let t = values.len();
    let idx = median_indices(&values).into_iter().map(Some).collect();
    let picked = g.gather_rows(p, idx);
    let med = g.mean(picked);
    let med_t = g.broadcast_scalar(med, t, 1);
    let dev = g.sub(p, med_t);
    let sq = g.square(dev);
    g.mean(sq)
}

pub fn variance_loss_graph(g: &mut Graph, p: Var, eps: f64) -> Var {
    let v = median_deviation_variance_graph(g, p);
    let shifted = g.add_const(v, eps);
    g.recip(shifted)
}

pub fn sparsity_loss_graph(g: &mut Graph, p: Var, sigma_target: f64) -> Var {
    let m = g.mean(p);
    let d = g.add_const(m, -sigma_target);
    g.square(d)
}

/// `x` is `[T x D]`, `p` is `[T x 1]`.
pub fn weight_features_graph(g: &mut Graph, x: Var, p: Var) -> Var {
    let d = g.shape(x).1;
    let pp = g.broadcast_cols(p, d);
    g.mul(x, pp)
}

/// Mean binary cross-entropy of scores `p` against targets in [0,1].
pub fn bce_graph(g: &mut Graph, p: Var, target: &[f64]) -> Var {
    let t = target.len();
    let y = g.constant(Array2::from_shape_vec((t, 1), target.to_vec()).expect("column"));
    let one_minus_y = g.constant(Array2::from_shape_fn((t, 1), |(i, _)| 1.0 - target[i]));
    let pc = g.clamp(p, 1e-12, 1.0 - 1e-12);
    let lp = g.ln(pc);
    let neg = g.scale(pc, -1.0);
    let q = g.add_const(neg, 1.0);
    let lq = g.ln(q);
    let a = g.mul(y, lp);
    let b = g.mul(one_minus_y, lq);
    let s = g.add(a, b);
    let m = g.mean(s);
    g.scale(m, -1.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum ReconLoss {
    /// Squared distance between discriminator last hidden states.
    #[default]
    FeatureMatching,
    /// Mean squared error on the raw features.
    RawMse,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VaeGanConfig {
    pub latent: usize,
    pub hidden: usize,
    pub disc_hidden: usize,
    pub recon: ReconLoss,
}

impl Default for VaeGanConfig {
    fn default() -> Self {
        VaeGanConfig {
            latent: 256,
            hidden: 256,
            disc_hidden: 256,
            recon: ReconLoss::FeatureMatching,
        }
    }
}

impl VaeGanConfig {
    pub fn check(&self) -> Result<()> {
        if self.latent == 0 || self.hidden == 0 || self.disc_hidden == 0 {
            return Err(Error::Config("vaegan widths must be >= 1".into()));
        }
        Ok(())
    }
}

/// Encoder LSTM to per-frame latent statistics, decoder LSTM back to features.
#[derive(Debug, Clone, PartialEq)]
pub struct Vae {
    pub store: ParamStore,
    encoder: Lstm,
    mu: Linear,
    logvar: Linear,
    decoder: Lstm,
    output: Linear,
    pub latent: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct VaeVars {
    pub x_hat: Var,
    pub mu: Var,
    pub logvar: Var,
    pub latent: Var,
}

impl Vae {
    pub fn new(input_dim: usize, cfg: &VaeGanConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let encoder = Lstm::new(&mut store, "enc", input_dim, cfg.hidden, &mut rng);
        let mu = Linear::new(&mut store, "enc.mu", cfg.hidden, cfg.latent, &mut rng);
        let logvar = Linear::new(&mut store, "enc.logvar", cfg.hidden, cfg.latent, &mut rng);
        let decoder = Lstm::new(&mut store, "dec", cfg.latent, cfg.hidden, &mut rng);
        let output = Linear::new(&mut store, "dec.out", cfg.hidden, input_dim, &mut rng);
        Vae {
            store,
            encoder,
            mu,
            logvar,
            decoder,
            output,
            latent: cfg.latent,
        }
    }

    /// Encodes `x_tilde` (`[T x D]`), samples `mu + exp(logvar / 2) * noise`
    /// with the supplied `[T x latent]` noise, and decodes.
    pub fn forward_graph(
        &self,
        g: &mut Graph,
        p: &Bound,
        x_tilde: Var,
        noise: &Mat,
    ) -> Result<VaeVars> {
        let t = g.shape(x_tilde).0;
        if noise.dim() != (t, self.latent) {
            return Err(Error::Shape(format!(
                "noise is {:?}, expected ({t}, {})",
                noise.dim(),
                self.latent
            )));
        }
        let (h, _) = self.encoder.run(g, p, x_tilde, 1, false);
        let mu = self.mu.forward(g, p, h);
        let logvar = self.logvar.forward(g, p, h);
        if let Some(bad) = [mu, logvar]
            .iter()
            .find(|v| g.value(**v).iter().any(|x| !x.is_finite()))
        {
            let which = if *bad == mu { "mu" } else { "logvar" };
            return Err(Error::Numeric(format!(
                "non-finite latent statistic {which}"
            )));
        }
        let half = g.scale(logvar, 0.5);
        let std = g.exp(half);
        let eta = g.constant(noise.clone());
        let spread = g.mul(std, eta);
        let latent = g.add(mu, spread);
        let (hd, _) = self.decoder.run(g, p, latent, 1, false);
        let x_hat = self.output.forward(g, p, hd);
        Ok(VaeVars {
            x_hat,
            mu,
            logvar,
            latent,
        })
    }
}

/// Recurrent real/fake classifier; its last hidden state doubles as the
/// feature space of the reconstruction loss.
#[derive(Debug, Clone, PartialEq)]
pub struct Discriminator {
    pub store: ParamStore,
    lstm: Lstm,
    head: Linear,
    pub hidden: usize,
}

impl Discriminator {
    pub fn new(input_dim: usize, cfg: &VaeGanConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let lstm = Lstm::new(&mut store, "disc", input_dim, cfg.disc_hidden, &mut rng);
        let head = Linear::new(&mut store, "disc.head", cfg.disc_hidden, 1, &mut rng);
        Discriminator {
            store,
            lstm,
            head,
            hidden: cfg.disc_hidden,
        }
    }

    /// Returns `(logit [1 x 1], h_last [1 x hidden])`.
    pub fn forward_graph(&self, g: &mut Graph, p: &Bound, x: Var) -> (Var, Var) {
        let (_, h_last) = self.lstm.run(g, p, x, 1, false);
        let logit = self.head.forward(g, p, h_last);
        (logit, h_last)
    }

    pub fn discriminate(&self, x: &Mat) -> (f64, Vec<f64>) {
        let mut g = Graph::new();
        let p = self.store.bind_frozen(&mut g);
        let xc = g.constant(x.clone());
        let (logit, h) = self.forward_graph(&mut g, &p, xc);
        (g.scalar(logit), g.value(h).row(0).to_vec())
    }
}

/// Graph nodes of the VAE-GAN terms.
#[derive(Debug, Clone, Copy)]
pub struct AdversarialVars {
    pub recon: Var,
    pub prior: Var,
    pub gan_g: Var,
    pub gan_d: Var,
}

/// KL of `N(mu, exp(logvar))` from the standard normal, summed over latent
/// dimensions and averaged over time.
pub fn kl_prior_graph(g: &mut Graph, mu: Var, logvar: Var) -> Var {
    let t = g.shape(mu).0 as f64;
    let mu2 = g.square(mu);
    let var = g.exp(logvar);
    let a = g.add(mu2, var);
    let b = g.sub(a, logvar);
    let c = g.add_const(b, -1.0);
    let s = g.sum(c);
    g.scale(s, 0.5 / t)
}

/// BCE of a logit against the "real" label: `softplus(-logit)`.
fn bce_real(g: &mut Graph, logit: Var) -> Var {
    let neg = g.scale(logit, -1.0);
    g.softplus(neg)
}

/// BCE of a logit against the "fake" label: `softplus(logit)`.
fn bce_fake(g: &mut Graph, logit: Var) -> Var {
    g.softplus(logit)
}

/// Reconstruction, prior and both GAN objectives.
#[allow(clippy::too_many_arguments)]
pub fn adversarial_objectives(
    g: &mut Graph,
    disc: &Discriminator,
    pd: &Bound,
    x: Var,
    x_hat: Var,
    x_hat_uniform: Var,
    mu: Var,
    logvar: Var,
    recon: ReconLoss,
) -> Result<AdversarialVars> {
    if g.shape(x) != g.shape(x_hat) || g.shape(x) != g.shape(x_hat_uniform) {
        return Err(Error::Shape(format!(
            "x {:?}, x_hat {:?}, x_hat_uniform {:?}",
            g.shape(x),
            g.shape(x_hat),
            g.shape(x_hat_uniform)
        )));
    }
    if g.shape(mu) != g.shape(logvar) {
        return Err(Error::Shape("mu and logvar shapes differ".into()));
    }
    let (logit_real, h_real) = disc.forward_graph(g, pd, x);
    let (logit_fake, h_fake) = disc.forward_graph(g, pd, x_hat);
    let (logit_uni, _) = disc.forward_graph(g, pd, x_hat_uniform);

    let recon = match recon {
        ReconLoss::FeatureMatching => {
            let d = g.sub(h_real, h_fake);
            let sq = g.square(d);
            g.mean(sq)
        }
        ReconLoss::RawMse => {
            let d = g.sub(x, x_hat);
            let sq = g.square(d);
            g.mean(sq)
        }
    };
    let prior = kl_prior_graph(g, mu, logvar);

    let d_real = bce_real(g, logit_real);
    let d_fake = bce_fake(g, logit_fake);
    let d_uni = bce_fake(g, logit_uni);
    let d_sum = g.add(d_real, d_fake);
    let gan_d = g.add(d_sum, d_uni);
    let gan_g = bce_real(g, logit_fake);
    Ok(AdversarialVars {
        recon,
        prior,
        gan_g,
        gan_d,
    })
}
