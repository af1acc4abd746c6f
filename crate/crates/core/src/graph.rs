//! A small reverse-mode autodiff tape over dense `f64` matrices.
//!
//! Nodes are appended in evaluation order, so a single reverse sweep is a valid
//! topological order for backpropagation. Leaves created with [`Graph::param`]
//! require gradients; [`Graph::constant`] leaves do not, and gradient work for
//! subgraphs that only depend on constants is skipped.

use ndarray::{concatenate, s, Array2, Axis, Zip};

pub type Mat = Array2<f64>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddConst(Var),
    BroadcastRows(Var),
    BroadcastCols(Var),
    BroadcastScalar(Var),
    Sigmoid(Var),
    Tanh(Var),
    Exp(Var),
    Ln(Var),
    Softplus(Var),
    Abs(Var),
    Square(Var),
    Recip(Var),
    Clamp(Var, f64, f64),
    Sum(Var),
    Mean(Var),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    GatherRows(Var, Vec<Option<usize>>),
    /// Gates `[i | f | g | o]` and previous cell state to `[h | c]`.
    LstmCell(Var, Var),
}

#[derive(Debug)]
struct Node {
    value: Mat,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Mat, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn unary(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let value = self.nodes[a.0].value.mapv(f);
        let rg = self.needs(&[a]);
        self.push(value, op, rg)
    }

    pub fn param(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn constant(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    /// Value of a 1x1 node.
    pub fn scalar(&self, v: Var) -> f64 {
        let m = self.value(v);
        debug_assert_eq!(m.dim(), (1, 1));
        m[[0, 0]]
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.value(v).dim()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(self.value(b));
        let rg = self.needs(&[a, b]);
        self.push(value, Op::MatMul(a, b), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) + self.value(b);
        let rg = self.needs(&[a, b]);
        self.push(value, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) - self.value(b);
        let rg = self.needs(&[a, b]);
        self.push(value, Op::Sub(a, b), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) * self.value(b);
        let rg = self.needs(&[a, b]);
        self.push(value, Op::Mul(a, b), rg)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, Op::Scale(a, c), |x| c * x)
    }

    pub fn add_const(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, Op::AddConst(a), |x| x + c)
    }

    /// Repeats a `1 x n` row `rows` times.
    pub fn broadcast_rows(&mut self, a: Var, rows: usize) -> Var {
        let v = self.value(a);
        assert_eq!(v.nrows(), 1, "broadcast_rows expects a row vector");
        let value = v
            .broadcast((rows, v.ncols()))
            .expect("row broadcast")
            .to_owned();
        let rg = self.needs(&[a]);
        self.push(value, Op::BroadcastRows(a), rg)
    }

    /// Repeats an `r x 1` column `cols` times.
    pub fn broadcast_cols(&mut self, a: Var, cols: usize) -> Var {
        let v = self.value(a);
        assert_eq!(v.ncols(), 1, "broadcast_cols expects a column vector");
        let r = v.nrows();
        let value = Array2::from_shape_fn((r, cols), |(i, _)| v[[i, 0]]);
        let rg = self.needs(&[a]);
        self.push(value, Op::BroadcastCols(a), rg)
    }

    pub fn broadcast_scalar(&mut self, a: Var, rows: usize, cols: usize) -> Var {
        let x = self.scalar(a);
        let rg = self.needs(&[a]);
        self.push(
            Array2::from_elem((rows, cols), x),
            Op::BroadcastScalar(a),
            rg,
        )
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sigmoid(a), sigmoid)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, Op::Tanh(a), f64::tanh)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Op::Exp(a), f64::exp)
    }

    pub fn ln(&mut self, a: Var) -> Var {
        self.unary(a, Op::Ln(a), f64::ln)
    }

    /// `ln(1 + e^x)`, evaluated stably.
    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, Op::Softplus(a), softplus)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(a, Op::Abs(a), f64::abs)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, Op::Square(a), |x| x * x)
    }

    pub fn recip(&mut self, a: Var) -> Var {
        self.unary(a, Op::Recip(a), |x| 1.0 / x)
    }

    /// Clamps elementwise; gradient passes only where the input is inside `[lo, hi]`.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        self.unary(a, Op::Clamp(a, lo, hi), |x| x.clamp(lo, hi))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Array2::from_elem((1, 1), self.value(a).sum());
        let rg = self.needs(&[a]);
        self.push(value, Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let value = Array2::from_elem((1, 1), v.sum() / v.len() as f64);
        let rg = self.needs(&[a]);
        self.push(value, Op::Mean(a), rg)
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let value = self.value(a).slice(s![start..start + len, ..]).to_owned();
        let rg = self.needs(&[a]);
        self.push(value, Op::SliceRows(a, start), rg)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let value = self.value(a).slice(s![.., start..start + len]).to_owned();
        let rg = self.needs(&[a]);
        self.push(value, Op::SliceCols(a, start), rg)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|p| self.value(*p).view()).collect();
        let value = concatenate(Axis(0), &views).expect("concat_rows shapes");
        let rg = self.needs(parts);
        self.push(value, Op::ConcatRows(parts.to_vec()), rg)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|p| self.value(*p).view()).collect();
        let value = concatenate(Axis(1), &views).expect("concat_cols shapes");
        let rg = self.needs(parts);
        self.push(value, Op::ConcatCols(parts.to_vec()), rg)
    }

    /// Row `i` of the output is row `index[i]` of `a`, or zeros for `None`.
    pub fn gather_rows(&mut self, a: Var, index: Vec<Option<usize>>) -> Var {
        let src = self.value(a);
        let mut value = Array2::zeros((index.len(), src.ncols()));
        for (i, ix) in index.iter().enumerate() {
            if let Some(j) = *ix {
                value.row_mut(i).assign(&src.row(j));
            }
        }
        let rg = self.needs(&[a]);
        self.push(value, Op::GatherRows(a, index), rg)
    }

    /// One LSTM cell update. `gates` is `[B x 4H]` pre-activations in `i, f, g, o`
    /// order; `c_prev` is `[B x H]`. Returns `[B x 2H]` holding `[h | c]`.
    pub fn lstm_cell(&mut self, gates: Var, c_prev: Var) -> Var {
        let gv = self.value(gates);
        let cv = self.value(c_prev);
        let (b, h4) = gv.dim();
        let h = h4 / 4;
        assert_eq!(cv.dim(), (b, h), "lstm_cell state shape");
        let mut out = Array2::zeros((b, 2 * h));
        for r in 0..b {
            for k in 0..h {
                let i = sigmoid(gv[[r, k]]);
                let f = sigmoid(gv[[r, h + k]]);
                let g = gv[[r, 2 * h + k]].tanh();
                let o = sigmoid(gv[[r, 3 * h + k]]);
                let c = f * cv[[r, k]] + i * g;
                out[[r, k]] = o * c.tanh();
                out[[r, h + k]] = c;
            }
        }
        let rg = self.needs(&[gates, c_prev]);
        self.push(out, Op::LstmCell(gates, c_prev), rg)
    }

    /// `x W + b` with `b` a `1 x n` row.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Var {
        let xw = self.matmul(x, w);
        let rows = self.shape(xw).0;
        let bb = self.broadcast_rows(b, rows);
        self.add(xw, bb)
    }

    /// Gradients of the scalar `root` with respect to every node.
    pub fn backward(&self, root: Var) -> Grads {
        assert_eq!(
            self.value(root).dim(),
            (1, 1),
            "backward root must be scalar"
        );
        let mut grads: Vec<Option<Mat>> = vec![None; root.0 + 1];
        grads[root.0] = Some(Array2::ones((1, 1)));

        for idx in (0..=root.0).rev() {
            let Some(gout) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            if node.requires_grad {
                self.propagate(node, &gout, &mut grads);
            }
            grads[idx] = Some(gout);
        }
        Grads { grads }
    }

    fn propagate(&self, node: &Node, gout: &Mat, grads: &mut [Option<Mat>]) {
        let want = |v: Var| self.nodes[v.0].requires_grad;
        let val = |v: Var| &self.nodes[v.0].value;
        let mut acc = |v: Var, g: Mat| accumulate(grads, v, g);

        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if want(*a) {
                    acc(*a, gout.dot(&val(*b).t()));
                }
                if want(*b) {
                    acc(*b, val(*a).t().dot(gout));
                }
            }
            Op::Add(a, b) => {
                if want(*a) {
                    acc(*a, gout.clone());
                }
                if want(*b) {
                    acc(*b, gout.clone());
                }
            }
            Op::Sub(a, b) => {
                if want(*a) {
                    acc(*a, gout.clone());
                }
                if want(*b) {
                    acc(*b, -gout);
                }
            }
            Op::Mul(a, b) => {
                if want(*a) {
                    acc(*a, gout * val(*b));
                }
                if want(*b) {
                    acc(*b, gout * val(*a));
                }
            }
            Op::Scale(a, c) => acc(*a, gout * *c),
            Op::AddConst(a) => acc(*a, gout.clone()),
            Op::BroadcastRows(a) => acc(*a, gout.sum_axis(Axis(0)).insert_axis(Axis(0))),
            Op::BroadcastCols(a) => acc(*a, gout.sum_axis(Axis(1)).insert_axis(Axis(1))),
            Op::BroadcastScalar(a) => acc(*a, Array2::from_elem((1, 1), gout.sum())),
            Op::Sigmoid(a) => {
                let mut g = gout.clone();
                Zip::from(&mut g)
                    .and(&node.value)
                    .for_each(|g, &y| *g *= y * (1.0 - y));
                acc(*a, g);
            }
            Op::Tanh(a) => {
                let mut g = gout.clone();
                Zip::from(&mut g)
                    .and(&node.value)
                    .for_each(|g, &y| *g *= 1.0 - y * y);
                acc(*a, g);
            }
            Op::Exp(a) => acc(*a, gout * &node.value),
            Op::Ln(a) => acc(*a, gout / val(*a)),
            Op::Softplus(a) => acc(*a, gout * &val(*a).mapv(sigmoid)),
            Op::Abs(a) => acc(
                *a,
                gout * &val(*a).mapv(|x| if x == 0.0 { 0.0 } else { x.signum() }),
            ),
            Op::Square(a) => acc(*a, gout * &val(*a).mapv(|x| 2.0 * x)),
            Op::Recip(a) => acc(*a, gout * &node.value.mapv(|y| -y * y)),
            Op::Clamp(a, lo, hi) => {
                let (lo, hi) = (*lo, *hi);
                let mut g = gout.clone();
                Zip::from(&mut g).and(val(*a)).for_each(|g, &x| {
                    if x < lo || x > hi {
                        *g = 0.0;
                    }
                });
                acc(*a, g);
            }
            Op::Sum(a) => acc(*a, Array2::from_elem(val(*a).dim(), gout[[0, 0]])),
            Op::Mean(a) => {
                let n = val(*a).len() as f64;
                acc(*a, Array2::from_elem(val(*a).dim(), gout[[0, 0]] / n));
            }
            Op::SliceRows(a, start) => {
                let mut g = Array2::zeros(val(*a).dim());
                g.slice_mut(s![*start..*start + gout.nrows(), ..])
                    .assign(gout);
                acc(*a, g);
            }
            Op::SliceCols(a, start) => {
                let mut g = Array2::zeros(val(*a).dim());
                g.slice_mut(s![.., *start..*start + gout.ncols()])
                    .assign(gout);
                acc(*a, g);
            }
            Op::ConcatRows(parts) => {
                let mut lo = 0;
                for p in parts {
                    let n = val(*p).nrows();
                    if want(*p) {
                        acc(*p, gout.slice(s![lo..lo + n, ..]).to_owned());
                    }
                    lo += n;
                }
            }
            Op::ConcatCols(parts) => {
                let mut lo = 0;
                for p in parts {
                    let n = val(*p).ncols();
                    if want(*p) {
                        acc(*p, gout.slice(s![.., lo..lo + n]).to_owned());
                    }
                    lo += n;
                }
            }
            Op::GatherRows(a, index) => {
                let mut g = Array2::zeros(val(*a).dim());
                for (i, ix) in index.iter().enumerate() {
                    if let Some(j) = *ix {
                        let mut row = g.row_mut(j);
                        row += &gout.row(i);
                    }
                }
                acc(*a, g);
            }
            Op::LstmCell(gates, c_prev) => {
                let gv = val(*gates);
                let cv = val(*c_prev);
                let (b, h4) = gv.dim();
                let h = h4 / 4;
                let mut dgates = Array2::zeros((b, h4));
                let mut dc_prev = Array2::zeros((b, h));
                for r in 0..b {
                    for k in 0..h {
                        let i = sigmoid(gv[[r, k]]);
                        let f = sigmoid(gv[[r, h + k]]);
                        let g = gv[[r, 2 * h + k]].tanh();
                        let o = sigmoid(gv[[r, 3 * h + k]]);
                        let c = node.value[[r, h + k]];
                        let tc = c.tanh();
                        let dh = gout[[r, k]];
                        let dc = gout[[r, h + k]] + dh * o * (1.0 - tc * tc);
                        dgates[[r, k]] = dc * g * i * (1.0 - i);
                        dgates[[r, h + k]] = dc * cv[[r, k]] * f * (1.0 - f);
                        dgates[[r, 2 * h + k]] = dc * i * (1.0 - g * g);
                        dgates[[r, 3 * h + k]] = dh * tc * o * (1.0 - o);
                        dc_prev[[r, k]] = dc * f;
                    }
                }
                if want(*gates) {
                    acc(*gates, dgates);
                }
                if want(*c_prev) {
                    acc(*c_prev, dc_prev);
                }
            }
        }
    }
}

fn accumulate(grads: &mut [Option<Mat>], v: Var, g: Mat) {
    match &mut grads[v.0] {
        Some(existing) => *existing += &g,
        slot @ None => *slot = Some(g),
    }
}

/// Result of [`Graph::backward`].
#[derive(Debug)]
pub struct Grads {
    grads: Vec<Option<Mat>>,
}

impl Grads {
    pub fn get(&self, v: Var) -> Option<&Mat> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, or zeros shaped like `like` if the root does not depend on it.
    pub fn get_or_zeros(&self, v: Var, like: (usize, usize)) -> Mat {
        self.get(v).cloned().unwrap_or_else(|| Array2::zeros(like))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    /// Central-difference check of d(root)/d(input) for a graph builder.
    fn check(build: impl Fn(&mut Graph, Var) -> Var, x0: Mat) {
        let mut g = Graph::new();
        let x = g.param(x0.clone());
        let root = build(&mut g, x);
        let analytic = g.backward(root).get_or_zeros(x, x0.dim());
        let h = 1e-6;
        for idx in 0..x0.len() {
            let eval = |delta: f64| {
                let mut xp = x0.clone();
                *xp.iter_mut().nth(idx).unwrap() += delta;
                let mut g = Graph::new();
                let x = g.param(xp);
                let r = build(&mut g, x);
                g.scalar(r)
            };
            let numeric = (eval(h) - eval(-h)) / (2.0 * h);
            let a = *analytic.iter().nth(idx).unwrap();
            let err = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-8);
            assert!(err < 1e-6, "element {idx}: analytic {a} numeric {numeric}");
        }
    }

    #[test]
    fn elementwise_ops() {
        let x0 = array![[0.3, -0.7], [1.2, 0.4]];
        check(
            |g, x| {
                let y = g.sigmoid(x);
                g.sum(y)
            },
            x0.clone(),
        );
        check(
            |g, x| {
                let y = g.tanh(x);
                g.mean(y)
            },
            x0.clone(),
        );
        check(
            |g, x| {
                let y = g.exp(x);
                g.sum(y)
            },
            x0.clone(),
        );
        check(
            |g, x| {
                let y = g.softplus(x);
                g.sum(y)
            },
            x0.clone(),
        );
        check(
            |g, x| {
                let y = g.abs(x);
                let z = g.square(y);
                g.sum(z)
            },
            x0.clone(),
        );
        check(
            |g, x| {
                let y = g.add_const(x, 2.0);
                let z = g.recip(y);
                let w = g.ln(y);
                let s = g.add(z, w);
                g.sum(s)
            },
            x0.clone(),
        );
        check(
            |g, x| {
                let y = g.clamp(x, -0.5, 1.0);
                let z = g.scale(y, 3.0);
                g.sum(z)
            },
            x0,
        );
    }

    #[test]
    fn structural_ops() {
        let x0 = array![[0.3, -0.7, 0.1], [1.2, 0.4, -0.2]];
        check(
            |g, x| {
                let w = g.constant(array![[1.0], [2.0], [-1.0]]);
                let y = g.matmul(x, w);
                let yy = g.broadcast_cols(y, 2);
                let s = g.slice_cols(x, 1, 2);
                let z = g.mul(yy, s);
                let c = g.concat_rows(&[z, s]);
                let r = g.slice_rows(c, 1, 3);
                let q = g.gather_rows(r, vec![Some(2), None, Some(0), Some(2)]);
                let sq = g.square(q);
                g.sum(sq)
            },
            x0.clone(),
        );
        check(
            |g, x| {
                let row = g.slice_rows(x, 0, 1);
                let b = g.broadcast_rows(row, 4);
                let m = g.mean(x);
                let bs = g.broadcast_scalar(m, 4, 3);
                let d = g.sub(b, bs);
                let cc = g.concat_cols(&[d, bs]);
                let sq = g.square(cc);
                g.sum(sq)
            },
            x0,
        );
    }

    #[test]
    fn lstm_cell_gradients() {
        let gates = array![[0.1, -0.3, 0.5, 0.2, 0.7, -0.1, 0.05, -0.4]];
        check(
            |g, x| {
                let c0 = g.constant(array![[0.3, -0.6]]);
                let hc = g.lstm_cell(x, c0);
                let w = g.constant(array![[1.0], [-2.0], [0.5], [1.5]]);
                let y = g.matmul(hc, w);
                g.sum(y)
            },
            gates,
        );
        check(
            |g, x| {
                let gates = g.constant(array![[0.1, -0.3, 0.5, 0.2, 0.7, -0.1, 0.05, -0.4]]);
                let hc = g.lstm_cell(gates, x);
                let sq = g.square(hc);
                g.sum(sq)
            },
            array![[0.3, -0.6]],
        );
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut g = Graph::new();
        let c = g.constant(array![[1.0, 2.0]]);
        let p = g.param(array![[3.0, 4.0]]);
        let y = g.mul(c, p);
        let s = g.sum(y);
        let grads = g.backward(s);
        assert!(grads.get(c).is_none());
        assert_eq!(grads.get(p).unwrap(), &array![[1.0, 2.0]]);
    }
}
