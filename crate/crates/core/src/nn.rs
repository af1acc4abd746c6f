//! Parameter storage, the recurrent and affine layers built on [`Graph`], and
//! the optimiser.

use std::collections::BTreeMap;

use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::{Grads, Graph, Mat, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

/// Named, ordered parameter tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Mat>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Mat) -> ParamId {
        let name = name.into();
        debug_assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.tensors.push(value);
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Mat {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Mat {
        &mut self.tensors[id.0]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Mat] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Mat] {
        &mut self.tensors
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Mat)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn by_name(&self, name: &str) -> Option<&Mat> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| &self.tensors[i])
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    /// Registers every tensor as a gradient-tracked leaf.
    pub fn bind(&self, g: &mut Graph) -> Bound {
        Bound(self.tensors.iter().map(|t| g.param(t.clone())).collect())
    }

    /// Registers every tensor as a constant leaf.
    pub fn bind_frozen(&self, g: &mut Graph) -> Bound {
        Bound(self.tensors.iter().map(|t| g.constant(t.clone())).collect())
    }

    /// Gradients of all tensors, zeros where the root does not depend on them.
    pub fn grads(&self, bound: &Bound, grads: &Grads) -> Vec<Mat> {
        bound
            .0
            .iter()
            .zip(&self.tensors)
            .map(|(v, t)| grads.get_or_zeros(*v, t.dim()))
            .collect()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(|t| t.iter().all(|x| x.is_finite()))
    }

    /// Replaces tensors by name; every stored tensor must be supplied with its shape.
    pub fn load_from(&mut self, mut named: BTreeMap<String, Mat>) -> Result<()> {
        for (name, slot) in self.names.iter().zip(self.tensors.iter_mut()) {
            let t = named
                .remove(name)
                .ok_or_else(|| Error::Format(format!("checkpoint lacks tensor '{name}'")))?;
            if t.dim() != slot.dim() {
                return Err(Error::Shape(format!(
                    "tensor '{name}' is {:?}, expected {:?}",
                    t.dim(),
                    slot.dim()
                )));
            }
            *slot = t;
        }
        if let Some(extra) = named.keys().next() {
            return Err(Error::Format(format!(
                "unexpected tensor '{extra}' in checkpoint"
            )));
        }
        Ok(())
    }
}

/// Graph handles for a [`ParamStore`], in store order.
#[derive(Debug, Clone)]
pub struct Bound(Vec<Var>);

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.0[id.0]
    }
}

/// Uniform `[-a, a]` with `a = 1 / sqrt(fan_in)`.
pub fn uniform_init(rng: &mut ChaCha8Rng, rows: usize, cols: usize, fan_in: usize) -> Mat {
    let a = 1.0 / (fan_in.max(1) as f64).sqrt();
    Array2::from_shape_simple_fn((rows, cols), || rng.random_range(-a..=a))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub input: usize,
    pub output: usize,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        input: usize,
        output: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let w = store.add(
            format!("{name}.weight"),
            uniform_init(rng, input, output, input),
        );
        let b = store.add(format!("{name}.bias"), uniform_init(rng, 1, output, input));
        Linear {
            w,
            b,
            input,
            output,
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Var {
        g.affine(x, p.var(self.w), p.var(self.b))
    }
}

/// Single-layer LSTM running a batch of equal-length sequences.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Lstm {
    pub w_ih: ParamId,
    pub w_hh: ParamId,
    pub b: ParamId,
    pub input: usize,
    pub hidden: usize,
}

impl Lstm {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        input: usize,
        hidden: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let w_ih = store.add(
            format!("{name}.w_ih"),
            uniform_init(rng, input, 4 * hidden, input),
        );
        let w_hh = store.add(
            format!("{name}.w_hh"),
            uniform_init(rng, hidden, 4 * hidden, hidden),
        );
        let b = store.add(
            format!("{name}.bias"),
            uniform_init(rng, 1, 4 * hidden, hidden),
        );
        Lstm {
            w_ih,
            w_hh,
            b,
            input,
            hidden,
        }
    }

    /// Runs over a time-major input: row `step * batch + m` is sequence `m` at
    /// `step`. Returns the hidden states in the same layout, and the final
    /// hidden state (`[batch x hidden]`, last step processed).
    pub fn run(&self, g: &mut Graph, p: &Bound, x: Var, batch: usize, reverse: bool) -> (Var, Var) {
        let rows = g.shape(x).0;
        debug_assert_eq!(rows % batch, 0);
        let steps = rows / batch;
        let xw = g.affine(x, p.var(self.w_ih), p.var(self.b));
        let mut c = g.constant(Array2::zeros((batch, self.hidden)));
        let mut h: Option<Var> = None;
        let mut outs = vec![None; steps];
        let order: Vec<usize> = if reverse {
            (0..steps).rev().collect()
        } else {
            (0..steps).collect()
        };
        for step in order {
            let xs = g.slice_rows(xw, step * batch, batch);
            let gates = match h {
                Some(hv) => {
                    let hh = g.matmul(hv, p.var(self.w_hh));
                    g.add(xs, hh)
                }
                None => xs,
            };
            let hc = g.lstm_cell(gates, c);
            let hv = g.slice_cols(hc, 0, self.hidden);
            c = g.slice_cols(hc, self.hidden, self.hidden);
            h = Some(hv);
            outs[step] = Some(hv);
        }
        let outs: Vec<Var> = outs
            .into_iter()
            .map(|o| o.expect("every step ran"))
            .collect();
        let all = g.concat_rows(&outs);
        (all, h.expect("at least one step"))
    }
}

/// Forward and backward LSTMs with concatenated outputs (`[rows x 2H]`).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BiLstm {
    pub fwd: Lstm,
    pub bwd: Lstm,
}

impl BiLstm {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        input: usize,
        hidden: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        BiLstm {
            fwd: Lstm::new(store, &format!("{name}.fwd"), input, hidden, rng),
            bwd: Lstm::new(store, &format!("{name}.bwd"), input, hidden, rng),
        }
    }

    pub fn run(&self, g: &mut Graph, p: &Bound, x: Var, batch: usize) -> Var {
        let (f, _) = self.fwd.run(g, p, x, batch, false);
        let (b, _) = self.bwd.run(g, p, x, batch, true);
        g.concat_cols(&[f, b])
    }

    pub fn output_width(&self) -> usize {
        self.fwd.hidden * 2
    }
}

/// Rescales gradients so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut [Mat], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .map(|g| g.iter().map(|x| x * x).sum::<f64>())
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        grads.iter_mut().for_each(|g| g.mapv_inplace(|x| x * s));
    }
    norm
}

/// First-order adaptive-moment optimiser with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: i32,
    m: Vec<Mat>,
    v: Vec<Mat>,
}

impl Adam {
    pub fn new(store: &ParamStore) -> Self {
        let zeros: Vec<Mat> = store
            .tensors()
            .iter()
            .map(|t| Array2::zeros(t.dim()))
            .collect();
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// Applies one update to every tensor in `store`.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Mat], lr: f64) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step);
        let bc2 = 1.0 - self.beta2.powi(self.step);
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        for ((t, g), (m, v)) in store
            .tensors_mut()
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            ndarray::Zip::from(t)
                .and(g)
                .and(m)
                .and(v)
                .for_each(|t, &g, m, v| {
                    *m = b1 * *m + (1.0 - b1) * g;
                    *v = b2 * *v + (1.0 - b2) * g * g;
                    let mh = *m / bc1;
                    let vh = *v / bc2;
                    *t -= lr * mh / (vh.sqrt() + eps);
                });
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn init_respects_bound() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let w = uniform_init(&mut rng, 16, 8, 16);
        assert!(w.iter().all(|x| x.abs() <= 0.25));
    }

    #[test]
    fn lstm_shapes_and_direction() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let lstm = BiLstm::new(&mut store, "enc", 3, 5, &mut rng);
        let mut g = Graph::new();
        let p = store.bind(&mut g);
        let x = g.constant(Array2::from_shape_fn((8, 3), |(i, j)| {
            (i * 3 + j) as f64 * 0.1
        }));
        let out = lstm.run(&mut g, &p, x, 2);
        assert_eq!(g.shape(out), (8, 10));
        // the backward direction sees the final step first
        let (_, last_fwd) = lstm.fwd.run(&mut g, &p, x, 2, false);
        let fwd_all = g.value(out).slice(ndarray::s![6..8, 0..5]).to_owned();
        assert_eq!(&fwd_all, g.value(last_fwd));
    }

    #[test]
    fn clip_scales_to_max_norm() {
        let mut g = vec![
            Array2::from_elem((1, 2), 3.0),
            Array2::from_elem((1, 2), 4.0),
        ];
        let before = clip_grad_norm(&mut g, 1.0);
        assert!((before - 50f64.sqrt()).abs() < 1e-12);
        let after: f64 = g
            .iter()
            .flat_map(|m| m.iter())
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt();
        assert!((after - 1.0).abs() < 1e-12);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut store = ParamStore::new();
        store.add("x", Array2::from_elem((1, 1), 1.0));
        let mut opt = Adam::new(&store);
        opt.step(&mut store, &[Array2::from_elem((1, 1), 123.0)], 0.01);
        assert!((store.tensors()[0][[0, 0]] - 0.99).abs() < 1e-9);
    }

    #[test]
    fn load_from_checks_names_and_shapes() {
        let mut store = ParamStore::new();
        store.add("a", Array2::zeros((1, 2)));
        let mut named = BTreeMap::new();
        named.insert("a".to_string(), Array2::zeros((2, 2)));
        assert!(store.clone().load_from(named).is_err());
        assert!(store.load_from(BTreeMap::new()).is_err());
    }
}
