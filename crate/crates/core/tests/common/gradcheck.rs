//! Central finite-difference checks of every loss term and of the scorer.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vsum_core::adversarial::{
    adversarial_objectives, kl_prior_graph, sparsity_loss_graph, variance_loss_graph,
    Discriminator, ReconLoss, Vae, VaeGanConfig,
};
use vsum_core::csnet::{CsNet, CsNetConfig, FusionMode, ScorerFlags};
use vsum_core::graph::{Graph, Var};
use vsum_core::nn::{Bound, ParamStore};

pub const STEP: f64 = 1e-3;
pub const TOL: f64 = 1e-4;
pub const POINTS: u64 = 20;

/// Largest per-tensor relative error seen and the tensor it came from.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Worst {
    pub error: f64,
    pub tensor: String,
}

impl Worst {
    fn max(self, other: Worst) -> Worst {
        if other.error > self.error {
            other
        } else {
            self
        }
    }
}

/// Compares the tape gradient of `f` with central differences, coordinate by
/// coordinate, and returns the worst per-tensor relative error
/// `|g_a - g_n| / max(|g_a|, |g_n|)` (L2 norms over the tensor).
pub fn check<F>(stores: &mut [ParamStore], f: F) -> Worst
where
    F: Fn(&mut Graph, &[Bound], &[ParamStore]) -> Var,
{
    let eval = |stores: &[ParamStore]| {
        let mut g = Graph::new();
        let bound: Vec<Bound> = stores.iter().map(|s| s.bind(&mut g)).collect();
        let root = f(&mut g, &bound, stores);
        g.scalar(root)
    };
    let mut g = Graph::new();
    let bound: Vec<Bound> = stores.iter().map(|s| s.bind(&mut g)).collect();
    let root = f(&mut g, &bound, stores);
    let grads = g.backward(root);
    let analytic: Vec<Vec<Array2<f64>>> = stores
        .iter()
        .zip(&bound)
        .map(|(s, b)| s.grads(b, &grads))
        .collect();

    let mut worst = Worst::default();
    for si in 0..stores.len() {
        for ti in 0..stores[si].len() {
            let mut numeric = Array2::zeros(stores[si].tensors()[ti].dim());
            for ((r, c), slot) in numeric.indexed_iter_mut() {
                let orig = stores[si].tensors()[ti][[r, c]];
                stores[si].tensors_mut()[ti][[r, c]] = orig + STEP;
                let up = eval(stores);
                stores[si].tensors_mut()[ti][[r, c]] = orig - STEP;
                let down = eval(stores);
                stores[si].tensors_mut()[ti][[r, c]] = orig;
                *slot = (up - down) / (2.0 * STEP);
            }
            let a = &analytic[si][ti];
            let diff = (a - &numeric).mapv(|v| v * v).sum().sqrt();
            let scale = a
                .mapv(|v| v * v)
                .sum()
                .sqrt()
                .max(numeric.mapv(|v| v * v).sum().sqrt());
            let e = if scale == 0.0 { 0.0 } else { diff / scale };
            if e >= worst.error {
                worst = Worst {
                    error: e,
                    tensor: stores[si].names()[ti].to_string(),
                };
            }
        }
    }
    worst
}

fn store_of(name: &str, m: Array2<f64>) -> ParamStore {
    let mut s = ParamStore::new();
    s.add(name, m);
    s
}

/// Scores in (0.05, 0.95) whose sorted gaps exceed 20 finite-difference steps,
/// so the median order statistics do not change under perturbation.
fn tie_free_scores(rng: &mut ChaCha8Rng, t: usize) -> Array2<f64> {
    loop {
        let v: Vec<f64> = (0..t).map(|_| rng.random_range(0.05..0.95)).collect();
        let mut s = v.clone();
        s.sort_by(f64::total_cmp);
        if s.windows(2).all(|w| w[1] - w[0] > 20.0 * STEP) {
            return Array2::from_shape_vec((t, 1), v).unwrap();
        }
    }
}

fn random_mat(rng: &mut ChaCha8Rng, r: usize, c: usize, scale: f64) -> Array2<f64> {
    Array2::from_shape_simple_fn((r, c), || rng.random_range(-scale..scale))
}

pub fn variance_worked_point() -> Worst {
    let mut stores = [store_of(
        "p",
        Array2::from_shape_vec((3, 1), vec![0.1, 0.2, 0.9]).unwrap(),
    )];
    check(&mut stores, |g, b, s| {
        variance_loss_graph(g, b[0].var(s[0].id_of("p").unwrap()), 1e-8)
    })
}

pub fn variance_points() -> Worst {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst = Worst::default();
    for k in 0..POINTS {
        let t = 3 + (k as usize % 8);
        let mut stores = [store_of("p", tie_free_scores(&mut rng, t))];
        worst = worst.max(check(&mut stores, |g, b, s| {
            variance_loss_graph(g, b[0].var(s[0].id_of("p").unwrap()), 1e-8)
        }));
    }
    worst
}

pub fn sparsity_points() -> Worst {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst = Worst::default();
    for k in 0..POINTS {
        let t = (2 + k as usize).min(12);
        let mut stores = [store_of("p", tie_free_scores(&mut rng, t))];
        worst = worst.max(check(&mut stores, |g, b, s| {
            sparsity_loss_graph(g, b[0].var(s[0].id_of("p").unwrap()), 0.3)
        }));
    }
    worst
}

pub fn prior_points() -> Worst {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst = Worst::default();
    for _ in 0..POINTS {
        let mut s = ParamStore::new();
        s.add("mu", random_mat(&mut rng, 5, 3, 1.0));
        s.add("logvar", random_mat(&mut rng, 5, 3, 1.0));
        let mut stores = [s];
        worst = worst.max(check(&mut stores, |g, b, s| {
            kl_prior_graph(
                g,
                b[0].var(s[0].id_of("mu").unwrap()),
                b[0].var(s[0].id_of("logvar").unwrap()),
            )
        }));
    }
    worst
}

fn tiny_vaegan() -> VaeGanConfig {
    VaeGanConfig {
        latent: 3,
        hidden: 4,
        disc_hidden: 4,
        ..VaeGanConfig::default()
    }
}

/// Which adversarial term to differentiate.
#[derive(Clone, Copy)]
pub enum Term {
    Recon(ReconLoss),
    GanG,
    GanD,
}

pub fn adversarial_points(term: Term, seed: u64) -> Worst {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (t, d) = (6, 4);
    let mut worst = Worst::default();
    for k in 0..POINTS {
        let disc = Discriminator::new(d, &tiny_vaegan(), seed * 100 + k);
        let x = random_mat(&mut rng, t, d, 1.0);
        let mut inputs = ParamStore::new();
        inputs.add("x_hat", random_mat(&mut rng, t, d, 1.0));
        inputs.add("x_uniform", random_mat(&mut rng, t, d, 1.0));
        let template = disc.clone();
        let mut stores = [inputs, disc.store.clone()];
        worst = worst.max(check(&mut stores, |g, b, s| {
            let mut dd = template.clone();
            dd.store = s[1].clone();
            let xc = g.constant(x.clone());
            let mu = g.constant(Array2::zeros((t, 3)));
            let recon = match term {
                Term::Recon(r) => r,
                _ => ReconLoss::FeatureMatching,
            };
            let o = adversarial_objectives(
                g,
                &dd,
                &b[1],
                xc,
                b[0].var(s[0].id_of("x_hat").unwrap()),
                b[0].var(s[0].id_of("x_uniform").unwrap()),
                mu,
                mu,
                recon,
            )
            .unwrap();
            match term {
                Term::Recon(_) => o.recon,
                Term::GanG => o.gan_g,
                Term::GanD => o.gan_d,
            }
        }));
    }
    worst
}

pub fn vae_points() -> Worst {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut worst = Worst::default();
    for k in 0..POINTS {
        let vae = Vae::new(4, &tiny_vaegan(), 300 + k);
        let x = random_mat(&mut rng, 5, 4, 1.0);
        let noise = random_mat(&mut rng, 5, 3, 1.0);
        let weights = random_mat(&mut rng, 5, 4, 1.0);
        let template = vae.clone();
        let mut stores = [vae.store.clone()];
        worst = worst.max(check(&mut stores, |g, b, s| {
            let mut v = template.clone();
            v.store = s[0].clone();
            let xc = g.constant(x.clone());
            let out = v.forward_graph(g, &b[0], xc, &noise).unwrap();
            let r = g.constant(weights.clone());
            let prod = g.mul(out.x_hat, r);
            let a = g.sum(prod);
            let kl = kl_prior_graph(g, out.mu, out.logvar);
            g.add(a, kl)
        }));
    }
    worst
}

pub fn scorer_points(flags: ScorerFlags, fusion_mode: FusionMode, seed: u64) -> Worst {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = Worst::default();
    for k in 0..POINTS {
        let cfg = CsNetConfig {
            divisions: 3,
            input_dim: 4,
            hidden: 3,
            fusion_mode,
            ..CsNetConfig::default()
        };
        let mut net = CsNet::new(&cfg, flags, seed * 1000 + k).unwrap();
        if flags.two_stream && fusion_mode == FusionMode::Affine {
            net.set_fusion_raw([0.45, 0.0]).unwrap();
        }
        let t = 7 + (k as usize % 4);
        let x = random_mat(&mut rng, t, 4, 1.0);
        let template = net.clone();
        let mut stores = [net.store.clone()];
        worst = worst.max(check(&mut stores, |g, b, s| {
            let mut n = template.clone();
            n.store = s[0].clone();
            let out = n.forward_graph(g, &b[0], &x).unwrap();
            g.mean(out.p)
        }));
    }
    worst
}

pub fn variance_through_scorer() -> Worst {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let cfg = CsNetConfig {
        divisions: 2,
        input_dim: 3,
        hidden: 3,
        ..CsNetConfig::default()
    };
    let mut worst = Worst::default();
    let mut checked = 0;
    let mut k = 0;
    while checked < POINTS {
        k += 1;
        let net = CsNet::new(&cfg, ScorerFlags::default(), 5000 + k).unwrap();
        let x = random_mat(&mut rng, 9, 3, 2.0);
        let p = net.forward(&x).unwrap();
        let mut sorted = p.0.clone();
        sorted.sort_by(f64::total_cmp);
        // Scores must stay well separated so the median index is stable.
        if sorted.windows(2).any(|w| w[1] - w[0] < 1e-2) {
            continue;
        }
        let template = net.clone();
        let mut stores = [net.store.clone()];
        worst = worst.max(check(&mut stores, |g, b, s| {
            let mut n = template.clone();
            n.store = s[0].clone();
            let out = n.forward_graph(g, &b[0], &x).unwrap();
            variance_loss_graph(g, out.p, 1e-8)
        }));
        checked += 1;
    }
    worst
}

/// Every check, labelled.
pub fn all() -> Vec<(&'static str, Worst)> {
    let two = ScorerFlags::default();
    let single = ScorerFlags {
        two_stream: false,
        difference: true,
    };
    vec![
        ("variance (worked point)", variance_worked_point()),
        ("variance", variance_points()),
        ("sparsity", sparsity_points()),
        ("prior", prior_points()),
        (
            "recon feature-matching",
            adversarial_points(Term::Recon(ReconLoss::FeatureMatching), 4),
        ),
        (
            "recon raw mse",
            adversarial_points(Term::Recon(ReconLoss::RawMse), 5),
        ),
        ("gan generator", adversarial_points(Term::GanG, 6)),
        ("gan discriminator", adversarial_points(Term::GanD, 7)),
        ("vae", vae_points()),
        ("scorer convex", scorer_points(two, FusionMode::Convex, 9)),
        ("scorer affine", scorer_points(two, FusionMode::Affine, 10)),
        (
            "scorer single stream",
            scorer_points(single, FusionMode::Convex, 11),
        ),
        ("variance through scorer", variance_through_scorer()),
    ]
}
