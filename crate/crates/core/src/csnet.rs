//! The chunk/stride scorer.
//!
//! The projected feature sequence is split two ways into `M` sub-sequences:
//! consecutive blocks (chunk stream, local view) and interleaved frames at
//! interval `M` (stride stream, global view). Each stream runs a Bi-LSTM shared
//! across its `M` parts plus a per-frame score head; the scores are put back in
//! frame order, offset by the difference-attention signal, squashed, and fused.

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Mat, Var};
use crate::nn::{BiLstm, Bound, Linear, ParamId, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum BoundaryMode {
    /// Differences reaching past the last frame are zero.
    #[default]
    ZeroPad,
    /// The last frame is repeated.
    Clamp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum FusionMode {
    /// `w1 p1 + w2 p2` with softmax-normalised weights.
    #[default]
    Convex,
    /// `W (p1 + p2)` clamped into the open unit interval.
    Affine,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CsNetConfig {
    /// Number of divisions `M` (also the stride interval).
    pub divisions: usize,
    pub input_dim: usize,
    /// Width of the projected features and of each LSTM direction.
    pub hidden: usize,
    pub strides: Vec<usize>,
    pub boundary_mode: BoundaryMode,
    pub fusion_mode: FusionMode,
    /// Chunk and stride streams use the same encoder and head.
    pub share_streams: bool,
}

impl Default for CsNetConfig {
    fn default() -> Self {
        CsNetConfig {
            divisions: 4,
            input_dim: 1024,
            hidden: 256,
            strides: vec![1, 2, 4],
            boundary_mode: BoundaryMode::ZeroPad,
            fusion_mode: FusionMode::Convex,
            share_streams: false,
        }
    }
}

impl CsNetConfig {
    pub fn check(&self) -> Result<()> {
        if self.divisions == 0 {
            return Err(Error::Config("csnet.divisions must be >= 1".into()));
        }
        if self.input_dim == 0 || self.hidden == 0 {
            return Err(Error::Config(
                "csnet.input_dim and csnet.hidden must be >= 1".into(),
            ));
        }
        if self.strides.contains(&0) {
            return Err(Error::Config("csnet.strides must be positive".into()));
        }
        let mut s = self.strides.clone();
        s.sort_unstable();
        s.dedup();
        if s.len() != self.strides.len() {
            return Err(Error::Config("csnet.strides must be distinct".into()));
        }
        Ok(())
    }
}

/// Which parts of the scorer are active (the ablation switches).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScorerFlags {
    /// Chunk and stride streams; otherwise a single Bi-LSTM over the whole sequence.
    pub two_stream: bool,
    pub difference: bool,
}

impl Default for ScorerFlags {
    fn default() -> Self {
        ScorerFlags {
            two_stream: true,
            difference: true,
        }
    }
}

/// Per-sampled-frame importance scores.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreSequence(pub Vec<f64>);

impl ScoreSequence {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PartitionMode {
    Chunk,
    Stride,
}

/// Length after zero-padding `t` up to a multiple of `m`.
pub fn padded_len(t: usize, m: usize) -> usize {
    t.div_ceil(m) * m
}

fn check_division(t: usize, m: usize) -> Result<()> {
    if m == 0 {
        return Err(Error::Config("division count must be >= 1".into()));
    }
    if m > t {
        return Err(Error::Config(format!(
            "division count {m} exceeds sequence length {t}"
        )));
    }
    Ok(())
}

/// Frame held at position `j` of part `part` (0-based) for a padded length.
fn frame_at(mode: PartitionMode, t_pad: usize, m: usize, part: usize, j: usize) -> usize {
    match mode {
        PartitionMode::Chunk => part * (t_pad / m) + j,
        PartitionMode::Stride => part + j * m,
    }
}

/// For each part, the original frame at each position; `None` marks padding.
pub fn partition_indices(
    mode: PartitionMode,
    t: usize,
    m: usize,
) -> Result<Vec<Vec<Option<usize>>>> {
    check_division(t, m)?;
    let t_pad = padded_len(t, m);
    let len = t_pad / m;
    Ok((0..m)
        .map(|part| {
            (0..len)
                .map(|j| Some(frame_at(mode, t_pad, m, part, j)).filter(|&f| f < t))
                .collect()
        })
        .collect())
}

fn partition(x: &Array2<f64>, m: usize, mode: PartitionMode) -> Result<Vec<Array2<f64>>> {
    let idx = partition_indices(mode, x.nrows(), m)?;
    Ok(idx
        .iter()
        .map(|part| {
            let mut out = Array2::zeros((part.len(), x.ncols()));
            for (j, f) in part.iter().enumerate() {
                if let Some(f) = f {
                    out.row_mut(j).assign(&x.row(*f));
                }
            }
            out
        })
        .collect())
}

/// `M` blocks of consecutive rows; the last block is zero-padded when `M` does not divide `T`.
pub fn chunk_partition(x: &Array2<f64>, m: usize) -> Result<Vec<Array2<f64>>> {
    partition(x, m, PartitionMode::Chunk)
}

/// `M` interleaved sub-sequences: part `m` holds rows `m, m+M, m+2M, ...`.
pub fn stride_partition(x: &Array2<f64>, m: usize) -> Result<Vec<Array2<f64>>> {
    partition(x, m, PartitionMode::Stride)
}

/// Inverse of the partitions on per-position values; padding positions are dropped.
pub fn reassemble<T: Clone>(
    parts: &[Vec<T>],
    mode: PartitionMode,
    t: usize,
    m: usize,
) -> Result<Vec<T>> {
    let idx = partition_indices(mode, t, m)?;
    if parts.len() != idx.len() || parts.iter().zip(&idx).any(|(p, i)| p.len() != i.len()) {
        return Err(Error::Shape(format!(
            "expected {m} parts of length {}, got lengths {:?}",
            idx[0].len(),
            parts.iter().map(Vec::len).collect::<Vec<_>>()
        )));
    }
    let mut out: Vec<Option<T>> = vec![None; t];
    for (part, frames) in parts.iter().zip(&idx) {
        for (value, f) in part.iter().zip(frames) {
            if let Some(f) = f {
                out[*f] = Some(value.clone());
            }
        }
    }
    Ok(out
        .into_iter()
        .map(|v| v.expect("partition covers every frame"))
        .collect())
}

/// Time-major gather index for a stream: row `j * M + m` is position `j` of part `m`.
fn stream_gather_index(mode: PartitionMode, t: usize, m: usize) -> Result<Vec<Option<usize>>> {
    let idx = partition_indices(mode, t, m)?;
    let len = idx[0].len();
    Ok((0..len)
        .flat_map(|j| idx.iter().map(move |part| part[j]))
        .collect())
}

/// For every frame `t`, the time-major stream row holding it.
fn stream_scatter_index(mode: PartitionMode, t: usize, m: usize) -> Result<Vec<Option<usize>>> {
    let gather = stream_gather_index(mode, t, m)?;
    let mut out = vec![None; t];
    for (row, f) in gather.iter().enumerate() {
        if let Some(f) = f {
            out[*f] = Some(row);
        }
    }
    Ok(out)
}

/// `|x_{t+k} - x_t|` elementwise, with the boundary rule for `t + k >= T`.
pub fn raw_difference(x: &Array2<f64>, k: usize, boundary: BoundaryMode) -> Array2<f64> {
    let (t, d) = x.dim();
    let mut out = Array2::zeros((t, d));
    for i in 0..t {
        let j = match (i + k < t, boundary) {
            (true, _) => i + k,
            (false, BoundaryMode::ZeroPad) => continue,
            (false, BoundaryMode::Clamp) => t - 1,
        };
        for c in 0..d {
            out[[i, c]] = (x[[j, c]] - x[[i, c]]).abs();
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Stream {
    encoder: BiLstm,
    head: Linear,
}

/// The scorer network and its parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct CsNet {
    pub config: CsNetConfig,
    pub flags: ScorerFlags,
    pub store: ParamStore,
    projection: Linear,
    chunk: Stream,
    stride: Stream,
    difference: Vec<Linear>,
    fusion: Option<ParamId>,
}

/// Graph handles of one forward pass; every node is `[T x 1]`.
#[derive(Debug, Clone, Copy)]
pub struct ScorerVars {
    pub p: Var,
    /// Chunk-stream (or single-stream) scores.
    pub p1: Var,
    pub p2: Option<Var>,
    pub attention: Option<Var>,
}

/// Numeric trace of a forward pass, for plotting and inspection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScorerTrace {
    pub p: Vec<f64>,
    pub p1: Vec<f64>,
    pub p2: Option<Vec<f64>>,
    pub attention: Option<Vec<f64>>,
}

fn column(m: &Mat) -> Vec<f64> {
    m.column(0).to_vec()
}

impl CsNet {
    pub fn new(config: &CsNetConfig, flags: ScorerFlags, seed: u64) -> Result<Self> {
        config.check()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let h = config.hidden;
        let projection = Linear::new(&mut store, "proj", config.input_dim, h, &mut rng);
        let make_stream = |store: &mut ParamStore, name: &str, rng: &mut ChaCha8Rng| {
            let encoder = BiLstm::new(store, &format!("{name}.lstm"), h, h, rng);
            let head = Linear::new(store, &format!("{name}.head"), 2 * h, 1, rng);
            Stream { encoder, head }
        };
        let (chunk, stride) = if !flags.two_stream {
            let s = make_stream(&mut store, "single", &mut rng);
            (s, s)
        } else if config.share_streams {
            let s = make_stream(&mut store, "shared", &mut rng);
            (s, s)
        } else {
            let c = make_stream(&mut store, "chunk", &mut rng);
            let s = make_stream(&mut store, "stride", &mut rng);
            (c, s)
        };
        let difference = if flags.difference {
            config
                .strides
                .iter()
                .map(|k| {
                    Linear::new(
                        &mut store,
                        &format!("diff{k}"),
                        config.input_dim,
                        1,
                        &mut rng,
                    )
                })
                .collect()
        } else {
            Vec::new()
        };
        let fusion = flags
            .two_stream
            .then(|| store.add("fusion.weight", Array2::from_elem((1, 2), 0.5)));
        Ok(CsNet {
            config: config.clone(),
            flags,
            store,
            projection,
            chunk,
            stride,
            difference,
            fusion,
        })
    }

    fn check_input(&self, x: &Mat) -> Result<()> {
        let (t, d) = x.dim();
        if d != self.config.input_dim {
            return Err(Error::Shape(format!(
                "features have dimension {d}, scorer expects {}",
                self.config.input_dim
            )));
        }
        if t == 0 {
            return Err(Error::Shape("empty feature sequence".into()));
        }
        if self.flags.two_stream && t < self.config.divisions {
            return Err(Error::Config(format!(
                "sequence length {t} is shorter than {} divisions",
                self.config.divisions
            )));
        }
        if self.flags.difference {
            if let Some(k) = self.config.strides.iter().find(|&&k| k >= t) {
                return Err(Error::Config(format!(
                    "difference stride {k} is not shorter than sequence length {t}"
                )));
            }
        }
        Ok(())
    }

    fn run_stream(
        &self,
        g: &mut Graph,
        p: &Bound,
        proj: Var,
        stream: &Stream,
        mode: PartitionMode,
    ) -> Result<Var> {
        let t = g.shape(proj).0;
        let m = self.config.divisions;
        let input = g.gather_rows(proj, stream_gather_index(mode, t, m)?);
        let enc = stream.encoder.run(g, p, input, m);
        let scores = stream.head.forward(g, p, enc);
        Ok(g.gather_rows(scores, stream_scatter_index(mode, t, m)?))
    }

    /// Per-frame difference-attention signal `d_t` as a `[T x 1]` node.
    pub fn attention_graph(&self, g: &mut Graph, p: &Bound, x: &Mat) -> Option<Var> {
        let mut total: Option<Var> = None;
        for (k, lin) in self.config.strides.iter().zip(&self.difference) {
            let raw = g.constant(raw_difference(x, *k, self.config.boundary_mode));
            let proj = lin.forward(g, p, raw);
            total = Some(match total {
                Some(acc) => g.add(acc, proj),
                None => proj,
            });
        }
        total
    }

    /// Builds the forward pass on `g` with parameters bound as `p`.
    pub fn forward_graph(&self, g: &mut Graph, p: &Bound, x: &Mat) -> Result<ScorerVars> {
        self.check_input(x)?;
        let t = x.nrows();
        let xc = g.constant(x.clone());
        let proj = self.projection.forward(g, p, xc);
        let attention = self.attention_graph(g, p, x);
        let with_attention = |g: &mut Graph, logits: Var| match attention {
            Some(d) => g.add(logits, d),
            None => logits,
        };

        if !self.flags.two_stream {
            let enc = self.chunk.encoder.run(g, p, proj, 1);
            let logits = self.chunk.head.forward(g, p, enc);
            let pre = with_attention(g, logits);
            let p1 = g.sigmoid(pre);
            return Ok(ScorerVars {
                p: p1,
                p1,
                p2: None,
                attention,
            });
        }

        let c = self.run_stream(g, p, proj, &self.chunk, PartitionMode::Chunk)?;
        let s = self.run_stream(g, p, proj, &self.stride, PartitionMode::Stride)?;
        let pre1 = with_attention(g, c);
        let pre2 = with_attention(g, s);
        let p1 = g.sigmoid(pre1);
        let p2 = g.sigmoid(pre2);
        let w = p.var(self.fusion.expect("two-stream scorer has fusion weights"));

        let fused = match self.config.fusion_mode {
            FusionMode::Convex => {
                let shift = g.value(w).iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let centred = g.add_const(w, -shift);
                let e = g.exp(centred);
                let z = g.sum(e);
                let inv = g.recip(z);
                let inv2 = g.broadcast_scalar(inv, 1, 2);
                let wn = g.mul(e, inv2);
                let w1 = g.slice_cols(wn, 0, 1);
                let w2 = g.slice_cols(wn, 1, 1);
                let w1t = g.broadcast_scalar(w1, t, 1);
                let w2t = g.broadcast_scalar(w2, t, 1);
                let a = g.mul(p1, w1t);
                let b = g.mul(p2, w2t);
                g.add(a, b)
            }
            FusionMode::Affine => {
                let w0 = g.slice_cols(w, 0, 1);
                let wt = g.broadcast_scalar(w0, t, 1);
                let sum = g.add(p1, p2);
                let scaled = g.mul(sum, wt);
                g.clamp(scaled, 1e-6, 1.0 - 1e-6)
            }
        };
        Ok(ScorerVars {
            p: fused,
            p1,
            p2: Some(p2),
            attention,
        })
    }

    /// Inference-only forward returning the full trace.
    pub fn trace(&self, x: &Mat) -> Result<ScorerTrace> {
        let mut g = Graph::new();
        let p = self.store.bind_frozen(&mut g);
        let vars = self.forward_graph(&mut g, &p, x)?;
        let out = ScorerTrace {
            p: column(g.value(vars.p)),
            p1: column(g.value(vars.p1)),
            p2: vars.p2.map(|v| column(g.value(v))),
            attention: vars.attention.map(|v| column(g.value(v))),
        };
        if let Some(t) = out.p.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("non-finite score at frame {t}")));
        }
        Ok(out)
    }

    pub fn forward(&self, x: &Mat) -> Result<ScoreSequence> {
        self.trace(x).map(|t| ScoreSequence(t.p))
    }

    /// Difference-attention signal alone (zeros when disabled).
    pub fn difference_attention(&self, x: &Mat) -> Vec<f64> {
        let mut g = Graph::new();
        let p = self.store.bind_frozen(&mut g);
        match self.attention_graph(&mut g, &p, x) {
            Some(v) => column(g.value(v)),
            None => vec![0.0; x.nrows()],
        }
    }

    /// Fusion weights after normalisation (`None` for the single-stream scorer).
    pub fn fusion_weights(&self) -> Option<[f64; 2]> {
        let w = self.store.get(self.fusion?);
        let (a, b) = (w[[0, 0]], w[[0, 1]]);
        Some(match self.config.fusion_mode {
            FusionMode::Convex => {
                let m = a.max(b);
                let (ea, eb) = ((a - m).exp(), (b - m).exp());
                [ea / (ea + eb), eb / (ea + eb)]
            }
            FusionMode::Affine => [a, a],
        })
    }

    /// Overwrites the raw fusion parameters.
    pub fn set_fusion_raw(&mut self, w: [f64; 2]) -> Result<()> {
        let id = self
            .fusion
            .ok_or_else(|| Error::Config("single-stream scorer has no fusion weights".into()))?;
        let t = self.store.get_mut(id);
        t[[0, 0]] = w[0];
        t[[0, 1]] = w[1];
        Ok(())
    }
}
