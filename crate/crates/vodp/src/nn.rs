//! Parameter storage and the shared layers built on the tape ops.
//!
//! Weights live outside any tape in a [`ParamStore`]; each training step
//! leases them onto a fresh tape as gradient-tracked leaves via
//! [`GraphParams`], runs forward/backward, and reads the gradients back
//! aligned to store order.

use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::tensor::{numel, Scalar, Tape, ValueId};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(pub(crate) usize);

#[derive(Debug, Clone, Copy)]
pub enum Init {
    Zeros,
    Normal(f64),
    /// std = sqrt(2 / (fan_in + fan_out))
    Xavier,
    /// std = sqrt(2 / fan_in)
    He,
    Ones,
}

struct Entry<S> {
    name: String,
    data: Vec<S>,
    shape: Vec<usize>,
}

pub struct ParamStore<S> {
    entries: Vec<Entry<S>>,
}

impl<S: Scalar> Default for ParamStore<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> ParamStore<S> {
    pub fn new() -> Self {
        ParamStore { entries: Vec::new() }
    }

    pub fn register(&mut self, name: &str, shape: Vec<usize>, init: Init, rng: &mut ChaCha8Rng) -> ParamId {
        let n = numel(&shape);
        let (fan_in, fan_out) = fans(&shape);
        let std = match init {
            Init::Zeros | Init::Ones => 0.0,
            Init::Normal(s) => s,
            Init::Xavier => (2.0 / (fan_in + fan_out) as f64).sqrt(),
            Init::He => (2.0 / fan_in as f64).sqrt(),
        };
        let data: Vec<S> = match init {
            Init::Zeros => vec![S::ZERO; n],
            Init::Ones => vec![S::ONE; n],
            _ => (0..n)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(rng);
                    S::from_f64(z * std)
                })
                .collect(),
        };
        self.entries.push(Entry { name: name.to_string(), data, shape });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar values across all parameters.
    pub fn value_count(&self) -> usize {
        self.entries.iter().map(|e| e.data.len()).sum()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn shape(&self, id: ParamId) -> &[usize] {
        &self.entries[id.0].shape
    }

    pub fn data(&self, id: ParamId) -> &[S] {
        &self.entries[id.0].data
    }

    pub fn data_mut(&mut self, id: ParamId) -> &mut [S] {
        &mut self.entries[id.0].data
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &[usize], &[S])> {
        self.entries.iter().map(|e| (e.name.as_str(), &e.shape[..], &e.data[..]))
    }

    /// Deep copy (used for the EMA shadow).
    pub fn clone_values(&self) -> ParamStore<S> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|e| Entry { name: e.name.clone(), data: e.data.clone(), shape: e.shape.clone() })
                .collect(),
        }
    }

    /// Replaces the values of `id`; shape must match.
    pub fn set_data(&mut self, id: ParamId, data: Vec<S>) -> Result<()> {
        if data.len() != self.entries[id.0].data.len() {
            return Err(Error::ShapeMismatch {
                op: "set_data",
                lhs: vec![data.len()],
                rhs: self.entries[id.0].shape.clone(),
            });
        }
        self.entries[id.0].data = data;
        Ok(())
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }
}

fn fans(shape: &[usize]) -> (usize, usize) {
    match shape.len() {
        0 => (1, 1),
        1 => (shape[0], shape[0]),
        2 => (shape[0], shape[1]),
        // conv weight (cout, cin, kh, kw)
        _ => {
            let rf: usize = shape[2..].iter().product();
            (shape[1] * rf, shape[0] * rf)
        }
    }
}

/// Per-tape lease cache: each parameter enters the tape at most once, so
/// gradient accumulation for shared weights happens on the tape node.
pub struct GraphParams<'a, S: Scalar> {
    store: &'a ParamStore<S>,
    leased: Vec<Option<ValueId>>,
    frozen: bool,
}

impl<'a, S: Scalar> GraphParams<'a, S> {
    pub fn new(store: &'a ParamStore<S>) -> Self {
        GraphParams { store, leased: vec![None; store.len()], frozen: false }
    }

    /// Inference-time variant: weights enter the tape as plain constants.
    pub fn frozen(store: &'a ParamStore<S>) -> Self {
        GraphParams { store, leased: vec![None; store.len()], frozen: true }
    }

    pub fn get(&mut self, tape: &mut Tape<S>, id: ParamId) -> Result<ValueId> {
        if let Some(v) = self.leased[id.0] {
            return Ok(v);
        }
        let data = self.store.data(id).to_vec();
        let shape = self.store.shape(id).to_vec();
        let v = if self.frozen { tape.leaf(data, shape)? } else { tape.param(data, shape)? };
        self.leased[id.0] = Some(v);
        Ok(v)
    }

    /// Gradients aligned to store order; `None` for params not touched by
    /// this tape or unreached by backward.
    pub fn grads(&self, tape: &Tape<S>) -> Vec<Option<Vec<S>>> {
        self.leased
            .iter()
            .map(|lease| lease.and_then(|v| tape.grad(v).map(|g| g.to_vec())))
            .collect()
    }
}

// ---- layers ---------------------------------------------------------------

#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Linear {
    pub fn register<S: Scalar>(
        store: &mut ParamStore<S>,
        name: &str,
        d_in: usize,
        d_out: usize,
        bias: bool,
        init: Init,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let w = store.register(&format!("{name}.w"), vec![d_in, d_out], init, rng);
        let b = bias.then(|| store.register(&format!("{name}.b"), vec![d_out], Init::Zeros, rng));
        Linear { w, b }
    }

    pub fn apply<S: Scalar>(&self, tape: &mut Tape<S>, gp: &mut GraphParams<S>, x: ValueId) -> Result<ValueId> {
        let w = gp.get(tape, self.w)?;
        let y = tape.matmul(x, w)?;
        match self.b {
            Some(b) => {
                let b = gp.get(tape, b)?;
                tape.add(y, b)
            }
            None => Ok(y),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
    pub eps: f64,
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

impl LayerNorm {
    pub fn register<S: Scalar>(store: &mut ParamStore<S>, name: &str, dim: usize, rng: &mut ChaCha8Rng) -> Self {
        let gain = store.register(&format!("{name}.gain"), vec![dim], Init::Ones, rng);
        let bias = store.register(&format!("{name}.bias"), vec![dim], Init::Zeros, rng);
        LayerNorm { gain, bias, eps: LAYER_NORM_EPS }
    }

    pub fn apply<S: Scalar>(&self, tape: &mut Tape<S>, gp: &mut GraphParams<S>, x: ValueId) -> Result<ValueId> {
        let g = gp.get(tape, self.gain)?;
        let b = gp.get(tape, self.bias)?;
        tape.layer_norm(x, g, b, self.eps)
    }
}

/// Multi-head attention with the projection family W_Q/W_K/W_V/out, all
/// C x C without bias, scores scaled by 1/sqrt(C).
#[derive(Debug, Clone, Copy)]
pub struct MultiHeadAttention {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
    pub heads: usize,
    pub width: usize,
}

/// Attention output plus the post-softmax weights (B, heads, Lq, Lk) for
/// row-stochasticity probes.
pub struct AttentionOut {
    pub out: ValueId,
    pub probs: ValueId,
}

impl MultiHeadAttention {
    pub fn register<S: Scalar>(
        store: &mut ParamStore<S>,
        name: &str,
        width: usize,
        heads: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        assert_eq!(width % heads, 0, "width must divide evenly into heads");
        let proj = |suffix: &str, s: &mut ParamStore<S>, r: &mut ChaCha8Rng| {
            s.register(&format!("{name}.{suffix}"), vec![width, width], Init::Xavier, r)
        };
        MultiHeadAttention {
            wq: proj("wq", store, rng),
            wk: proj("wk", store, rng),
            wv: proj("wv", store, rng),
            wo: proj("wo", store, rng),
            heads,
            width,
        }
    }

    /// `q_in` (B, Lq, C) attends over `kv_in` (B, Lk, C). An optional
    /// additive `mask` (broadcastable to (B, heads, Lq, Lk)) is applied to
    /// the scores before softmax.
    pub fn apply<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        gp: &mut GraphParams<S>,
        q_in: ValueId,
        kv_in: ValueId,
        mask: Option<ValueId>,
    ) -> Result<AttentionOut> {
        let (b, lq, c) = dims3("attention", tape.shape(q_in))?;
        let (bk, lk, ck) = dims3("attention", tape.shape(kv_in))?;
        if b != bk || c != ck || c != self.width {
            return Err(Error::ShapeMismatch {
                op: "attention",
                lhs: tape.shape(q_in).to_vec(),
                rhs: tape.shape(kv_in).to_vec(),
            });
        }
        let h = self.heads;
        let dh = c / h;
        let scale = 1.0 / (c as f64).sqrt();

        let wq = gp.get(tape, self.wq)?;
        let wk = gp.get(tape, self.wk)?;
        let wv = gp.get(tape, self.wv)?;
        let wo = gp.get(tape, self.wo)?;

        let q = tape.matmul(q_in, wq)?;
        let k = tape.matmul(kv_in, wk)?;
        let v = tape.matmul(kv_in, wv)?;

        // (B, L, C) -> (B, H, L, Dh)
        let split = |tape: &mut Tape<S>, x: ValueId, l: usize| -> Result<ValueId> {
            let r = tape.reshape(x, vec![b, l, h, dh])?;
            tape.permute(r, &[0, 2, 1, 3])
        };
        let qh = split(tape, q, lq)?;
        let kh = split(tape, k, lk)?;
        let vh = split(tape, v, lk)?;

        let kt = tape.permute(kh, &[0, 1, 3, 2])?; // (B, H, Dh, Lk)
        let scores = tape.matmul(qh, kt)?;
        let scores = tape.scale(scores, scale)?;
        let scores = match mask {
            Some(m) => tape.add(scores, m)?,
            None => scores,
        };
        let probs = tape.softmax(scores, 3)?;
        let ctx = tape.matmul(probs, vh)?; // (B, H, Lq, Dh)
        let merged = tape.permute(ctx, &[0, 2, 1, 3])?;
        let merged = tape.reshape(merged, vec![b, lq, c])?;
        let out = tape.matmul(merged, wo)?;
        Ok(AttentionOut { out, probs })
    }
}

/// Two-layer feed-forward block C -> 4C -> C with GELU.
#[derive(Debug, Clone, Copy)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

impl FeedForward {
    pub fn register<S: Scalar>(store: &mut ParamStore<S>, name: &str, width: usize, rng: &mut ChaCha8Rng) -> Self {
        FeedForward {
            up: Linear::register(store, &format!("{name}.up"), width, 4 * width, true, Init::Xavier, rng),
            down: Linear::register(store, &format!("{name}.down"), 4 * width, width, true, Init::Xavier, rng),
        }
    }

    pub fn apply<S: Scalar>(&self, tape: &mut Tape<S>, gp: &mut GraphParams<S>, x: ValueId) -> Result<ValueId> {
        let h = self.up.apply(tape, gp, x)?;
        let h = tape.gelu(h)?;
        self.down.apply(tape, gp, h)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Conv2d {
    pub w: ParamId,
    pub b: ParamId,
    pub stride: (usize, usize),
    pub pad: (usize, usize),
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn register<S: Scalar>(
        store: &mut ParamStore<S>,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: (usize, usize),
        stride: (usize, usize),
        pad: (usize, usize),
        init: Init,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let w = store.register(&format!("{name}.w"), vec![c_out, c_in, kernel.0, kernel.1], init, rng);
        let b = store.register(&format!("{name}.b"), vec![c_out], Init::Zeros, rng);
        Conv2d { w, b, stride, pad }
    }

    pub fn apply<S: Scalar>(&self, tape: &mut Tape<S>, gp: &mut GraphParams<S>, x: ValueId) -> Result<ValueId> {
        let w = gp.get(tape, self.w)?;
        let b = gp.get(tape, self.b)?;
        tape.conv2d(x, w, b, self.stride, self.pad)
    }
}

/// 1-D convolution over the trailing axis of (B, C, N), via conv2d on a
/// height-1 image.
#[derive(Debug, Clone, Copy)]
pub struct Conv1d {
    inner: Conv2d,
}

impl Conv1d {
    #[allow(clippy::too_many_arguments)]
    pub fn register<S: Scalar>(
        store: &mut ParamStore<S>,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        pad: usize,
        init: Init,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        Conv1d { inner: Conv2d::register(store, name, c_in, c_out, (1, kernel), (1, 1), (0, pad), init, rng) }
    }

    pub fn zero_weights<S: Scalar>(&self, store: &mut ParamStore<S>) {
        store.data_mut(self.inner.w).fill(S::ZERO);
        store.data_mut(self.inner.b).fill(S::ZERO);
    }

    pub fn apply<S: Scalar>(&self, tape: &mut Tape<S>, gp: &mut GraphParams<S>, x: ValueId) -> Result<ValueId> {
        let (b, c, n) = dims3("conv1d", tape.shape(x))?;
        let x4 = tape.reshape(x, vec![b, c, 1, n])?;
        let y = self.inner.apply(tape, gp, x4)?;
        let ys = tape.shape(y).to_vec();
        tape.reshape(y, vec![ys[0], ys[1], ys[3]])
    }
}

pub fn dims3(op: &'static str, shape: &[usize]) -> Result<(usize, usize, usize)> {
    if shape.len() != 3 {
        return Err(Error::ShapeMismatch { op, lhs: shape.to_vec(), rhs: vec![0, 0, 0] });
    }
    Ok((shape[0], shape[1], shape[2]))
}
