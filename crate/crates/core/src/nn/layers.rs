use std::cell::RefCell;
use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Array, Binder, Init, ParamId, ParamStore, Tensor};
use crate::error::{Error, Result};

pub(crate) const LN_EPS: f64 = 1e-5;

/// Parameter construction: a store, an init RNG and a name prefix.
pub struct Builder<'a> {
    pub store: &'a mut ParamStore,
    pub rng: &'a mut ChaCha8Rng,
    prefix: String,
}

impl<'a> Builder<'a> {
    pub fn new(store: &'a mut ParamStore, rng: &'a mut ChaCha8Rng) -> Self {
        Self {
            store,
            rng,
            prefix: String::new(),
        }
    }

    pub fn sub(&mut self, name: &str) -> Builder<'_> {
        let prefix = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        };
        Builder {
            store: self.store,
            rng: self.rng,
            prefix,
        }
    }

    pub fn param(&mut self, name: &str, shape: &[usize], init: Init) -> ParamId {
        let full = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        };
        self.store.add(&full, shape, init, self.rng)
    }
}

/// Forward-pass context: parameter bindings plus dropout state.
pub struct Ctx<'a> {
    pub bind: Binder<'a>,
    dropout: f64,
    rng: RefCell<ChaCha8Rng>,
}

impl<'a> Ctx<'a> {
    pub fn inference(store: &'a ParamStore) -> Self {
        Self {
            bind: Binder::new(store, false),
            dropout: 0.0,
            rng: RefCell::new(ChaCha8Rng::seed_from_u64(0)),
        }
    }

    pub fn training(store: &'a ParamStore, dropout: f64, seed: u64) -> Self {
        Self {
            bind: Binder::new(store, true),
            dropout,
            rng: RefCell::new(ChaCha8Rng::seed_from_u64(seed)),
        }
    }

    pub fn p(&self, id: ParamId) -> Tensor {
        self.bind.param(id)
    }

    pub fn dropout(&self, x: Tensor) -> Result<Tensor> {
        if self.dropout <= 0.0 || !self.bind.trainable() {
            return Ok(x);
        }
        let keep = 1.0 - self.dropout;
        let mut rng = self.rng.borrow_mut();
        let mask: Vec<f64> = (0..x.value().len())
            .map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        x.mul(&Tensor::constant(Array::new(x.shape().to_vec(), mask)?))
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub input: usize,
    pub output: usize,
}

impl Linear {
    pub fn new(b: &mut Builder, name: &str, input: usize, output: usize) -> Self {
        let mut s = b.sub(name);
        let w = s.param("w", &[input, output], Init::FanIn);
        let bias = s.param("b", &[output], Init::Zeros);
        Self {
            w,
            b: Some(bias),
            input,
            output,
        }
    }

    pub fn without_bias(b: &mut Builder, name: &str, input: usize, output: usize) -> Self {
        let w = b.sub(name).param("w", &[input, output], Init::FanIn);
        Self {
            w,
            b: None,
            input,
            output,
        }
    }

    pub fn forward(&self, ctx: &Ctx, x: &Tensor) -> Result<Tensor> {
        let y = x.matmul(&ctx.p(self.w))?;
        match self.b {
            Some(b) => y.add(&ctx.p(b)),
            None => Ok(y),
        }
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(b: &mut Builder, name: &str, dim: usize) -> Self {
        let mut s = b.sub(name);
        Self {
            gain: s.param("g", &[dim], Init::Ones),
            bias: s.param("b", &[dim], Init::Zeros),
        }
    }

    pub fn forward(&self, ctx: &Ctx, x: &Tensor) -> Result<Tensor> {
        x.layer_norm(&ctx.p(self.gain), &ctx.p(self.bias), LN_EPS)
    }
}

/// LayerNorm → Linear → swish → Linear.
#[derive(Clone, Debug)]
pub struct FeedForward {
    pub norm: LayerNorm,
    pub up: Linear,
    pub down: Linear,
}

impl FeedForward {
    pub fn new(b: &mut Builder, name: &str, dim: usize, hidden: usize) -> Self {
        let mut s = b.sub(name);
        Self {
            norm: LayerNorm::new(&mut s, "norm", dim),
            up: Linear::new(&mut s, "up", dim, hidden),
            down: Linear::new(&mut s, "down", hidden, dim),
        }
    }

    pub fn forward(&self, ctx: &Ctx, x: &Tensor) -> Result<Tensor> {
        let h = self.up.forward(ctx, &self.norm.forward(ctx, x)?)?.swish()?;
        let h = ctx.dropout(h)?;
        self.down.forward(ctx, &h)
    }
}

/// Padding description for a batch of variable-length sequences.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SeqMask {
    pub lengths: Vec<usize>,
    pub max_len: usize,
}

impl SeqMask {
    pub fn new(lengths: Vec<usize>, max_len: usize) -> Self {
        debug_assert!(lengths.iter().all(|&l| l <= max_len));
        Self { lengths, max_len }
    }

    pub fn full(batch: usize, len: usize) -> Self {
        Self::new(vec![len; batch], len)
    }

    pub fn batch(&self) -> usize {
        self.lengths.len()
    }

    pub fn is_full(&self) -> bool {
        self.lengths.iter().all(|&l| l == self.max_len)
    }

    /// `[B, N, 1]` tensor of 1.0 on real frames and 0.0 on padding.
    pub fn frame_weights(&self) -> Tensor {
        let mut data = Vec::with_capacity(self.batch() * self.max_len);
        for &l in &self.lengths {
            data.extend((0..self.max_len).map(|t| if t < l { 1.0 } else { 0.0 }));
        }
        Tensor::constant(Array::from_parts(vec![self.batch(), self.max_len, 1], data))
    }

    /// Zeroes padded frames of a `[B, N, d]` tensor.
    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        if self.is_full() {
            return Ok(x.clone());
        }
        x.mul(&self.frame_weights())
    }

    /// Subsampled lengths after two stride-2 stages.
    pub fn subsampled(&self) -> SeqMask {
        let f = |l: usize| l.div_ceil(2).div_ceil(2);
        SeqMask::new(
            self.lengths.iter().map(|&l| f(l)).collect(),
            f(self.max_len),
        )
    }
}

/// Which key positions a query may attend to.
#[derive(Clone, Debug, Default)]
pub struct AttnSpec {
    pub key_lengths: Option<Vec<usize>>,
    pub causal: bool,
    /// Limited context: keys with `|i - j| > window` are masked.
    pub window: Option<usize>,
}

impl AttnSpec {
    fn blocked(&self, b: usize, i: usize, j: usize) -> bool {
        if let Some(l) = &self.key_lengths {
            if j >= l[b] {
                return true;
            }
        }
        if self.causal && j > i {
            return true;
        }
        if let Some(w) = self.window {
            if i.abs_diff(j) > w {
                return true;
            }
        }
        false
    }

    /// Mask for queries `q0..q1` against keys `k0..k1`, or `None` when
    /// nothing is blocked.
    fn mask(&self, batch: usize, q0: usize, q1: usize, k0: usize, k1: usize) -> Option<Rc<Vec<bool>>> {
        let mut any = false;
        let mut m = Vec::with_capacity(batch * (q1 - q0) * (k1 - k0));
        for b in 0..batch {
            for i in q0..q1 {
                for j in k0..k1 {
                    let x = self.blocked(b, i, j);
                    any |= x;
                    m.push(x);
                }
            }
        }
        any.then(|| Rc::new(m))
    }
}

const MASKED_SCORE: f64 = -1e30;
/// Query block size for limited-context attention over long inputs.
const BAND_BLOCK: usize = 64;

#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
}

impl MultiHeadAttention {
    pub fn new(b: &mut Builder, name: &str, dim: usize, heads: usize) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::Config(format!(
                "model dim {dim} not divisible by {heads} heads"
            )));
        }
        let mut s = b.sub(name);
        Ok(Self {
            q: Linear::new(&mut s, "q", dim, dim),
            k: Linear::without_bias(&mut s, "k", dim, dim),
            v: Linear::new(&mut s, "v", dim, dim),
            o: Linear::new(&mut s, "o", dim, dim),
            heads,
        })
    }

    /// `query: [B, Nq, d]`, `memory: [B, Nk, d]`.
    pub fn forward(&self, ctx: &Ctx, query: &Tensor, memory: &Tensor, spec: &AttnSpec) -> Result<Tensor> {
        let q = self.q.forward(ctx, query)?;
        let k = self.k.forward(ctx, memory)?;
        let v = self.v.forward(ctx, memory)?;
        let (batch, nq) = (q.shape()[0], q.shape()[1]);
        let nk = k.shape()[1];
        let dim = q.shape()[2];
        let dh = dim / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut heads = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = q.slice_last(h * dh, (h + 1) * dh)?;
            let kh = k.slice_last(h * dh, (h + 1) * dh)?;
            let vh = v.slice_last(h * dh, (h + 1) * dh)?;
            let out = match spec.window {
                Some(w) if nq > BAND_BLOCK && nq == nk => {
                    let mut blocks = Vec::new();
                    let mut s = 0;
                    while s < nq {
                        let e = (s + BAND_BLOCK).min(nq);
                        let (k0, k1) = (s.saturating_sub(w), (e + w).min(nk));
                        let qb = qh.slice(1, s, e)?;
                        let kb = kh.slice(1, k0, k1)?;
                        let vb = vh.slice(1, k0, k1)?;
                        blocks.push(attend(ctx, &qb, &kb, &vb, scale, spec.mask(batch, s, e, k0, k1))?);
                        s = e;
                    }
                    let refs: Vec<&Tensor> = blocks.iter().collect();
                    Tensor::concat(&refs, 1)?
                }
                _ => attend(ctx, &qh, &kh, &vh, scale, spec.mask(batch, 0, nq, 0, nk))?,
            };
            heads.push(out);
        }
        let refs: Vec<&Tensor> = heads.iter().collect();
        let merged = if refs.len() == 1 {
            heads[0].clone()
        } else {
            Tensor::concat(&refs, 2)?
        };
        self.o.forward(ctx, &merged)
    }
}

fn attend(
    ctx: &Ctx,
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    scale: f64,
    mask: Option<Rc<Vec<bool>>>,
) -> Result<Tensor> {
    let mut scores = q.matmul(&k.transpose()?)?.scale(scale)?;
    if let Some(m) = mask {
        scores = scores.masked_fill(m, MASKED_SCORE)?;
    }
    let att = ctx.dropout(scores.softmax()?)?;
    att.matmul(v)
}

/// Conformer convolution module: pointwise-GLU → depthwise conv →
/// LayerNorm → swish → pointwise.
#[derive(Clone, Debug)]
pub struct ConvModule {
    pub norm: LayerNorm,
    pub pw_in: Linear,
    pub depthwise: ParamId,
    pub dw_bias: ParamId,
    pub dw_norm: LayerNorm,
    pub pw_out: Linear,
    pub dim: usize,
}

impl ConvModule {
    pub fn new(b: &mut Builder, name: &str, dim: usize, kernel: usize) -> Self {
        let mut s = b.sub(name);
        Self {
            norm: LayerNorm::new(&mut s, "norm", dim),
            pw_in: Linear::new(&mut s, "pw_in", dim, 2 * dim),
            depthwise: s.param("dw", &[dim, kernel], Init::Uniform((1.0 / kernel as f64).sqrt())),
            dw_bias: s.param("dw_b", &[dim], Init::Zeros),
            dw_norm: LayerNorm::new(&mut s, "dw_norm", dim),
            pw_out: Linear::new(&mut s, "pw_out", dim, dim),
            dim,
        }
    }

    pub fn forward(&self, ctx: &Ctx, x: &Tensor, mask: &SeqMask) -> Result<Tensor> {
        let h = self.pw_in.forward(ctx, &self.norm.forward(ctx, x)?)?;
        let a = h.slice_last(0, self.dim)?;
        let g = h.slice_last(self.dim, 2 * self.dim)?.sigmoid()?;
        let h = mask.apply(&a.mul(&g)?)?;
        let h = h.depthwise_conv1d(&ctx.p(self.depthwise))?.add(&ctx.p(self.dw_bias))?;
        let h = self.dw_norm.forward(ctx, &h)?.swish()?;
        self.pw_out.forward(ctx, &ctx.dropout(h)?)
    }
}

/// Convolutional gating MLP: up-projection, swish, split into content and
/// gate halves, gate normalized and depthwise-convolved, product projected
/// back down.
#[derive(Clone, Debug)]
pub struct CgMlp {
    pub up: Linear,
    pub gate_norm: LayerNorm,
    pub gate_conv: ParamId,
    pub gate_bias: ParamId,
    pub down: Linear,
    pub half: usize,
}

impl CgMlp {
    pub fn new(b: &mut Builder, name: &str, dim: usize, units: usize, kernel: usize) -> Self {
        let mut s = b.sub(name);
        let half = units / 2;
        Self {
            up: Linear::new(&mut s, "up", dim, units),
            gate_norm: LayerNorm::new(&mut s, "gate_norm", half),
            gate_conv: s.param("gate_conv", &[half, kernel], Init::Uniform((1.0 / kernel as f64).sqrt())),
            gate_bias: s.param("gate_b", &[half], Init::Ones),
            down: Linear::new(&mut s, "down", half, dim),
            half,
        }
    }

    pub fn forward(&self, ctx: &Ctx, x: &Tensor, mask: &SeqMask) -> Result<Tensor> {
        let h = self.up.forward(ctx, x)?.swish()?;
        let content = h.slice_last(0, self.half)?;
        let gate = self.gate_norm.forward(ctx, &h.slice_last(self.half, 2 * self.half)?)?;
        let gate = mask
            .apply(&gate)?
            .depthwise_conv1d(&ctx.p(self.gate_conv))?
            .add(&ctx.p(self.gate_bias))?;
        let z = ctx.dropout(content.mul(&gate)?)?;
        self.down.forward(ctx, &z)
    }
}

#[derive(Clone, Debug)]
pub struct Embedding {
    pub table: ParamId,
    pub dim: usize,
    pub vocab: usize,
}

impl Embedding {
    pub fn new(b: &mut Builder, name: &str, vocab: usize, dim: usize) -> Self {
        Self {
            table: b.param(name, &[vocab, dim], Init::Normal(1.0 / (dim as f64).sqrt())),
            dim,
            vocab,
        }
    }

    /// `ids` laid out as `[batch, len]`.
    pub fn forward(&self, ctx: &Ctx, ids: &[usize], batch: usize, len: usize) -> Result<Tensor> {
        Tensor::embedding(&ctx.p(self.table), ids, &[batch, len])
    }
}

/// Sinusoidal absolute positions `[len, dim]` starting at `offset`.
pub fn sinusoidal_positions(offset: usize, len: usize, dim: usize) -> Tensor {
    let mut data = Vec::with_capacity(len * dim);
    for pos in offset..offset + len {
        for i in 0..dim {
            let rate = 1.0 / 10000f64.powf((2 * (i / 2)) as f64 / dim as f64);
            let angle = pos as f64 * rate;
            data.push(if i % 2 == 0 { angle.sin() } else { angle.cos() });
        }
    }
    Tensor::constant(Array::from_parts(vec![len, dim], data))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::grad_check;

    fn randn(shape: &[usize], seed: u64) -> Array {
        use rand_distr::{Distribution, StandardNormal};
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Array::new(shape.to_vec(), (0..n).map(|_| StandardNormal.sample(&mut rng)).collect()).unwrap()
    }

    #[test]
    fn single_frame_attention_is_identity_weighting() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mha = MultiHeadAttention::new(&mut Builder::new(&mut store, &mut rng), "att", 8, 2).unwrap();
        let ctx = Ctx::inference(&store);
        let x = Tensor::constant(randn(&[1, 1, 8], 1));
        let q = mha.q.forward(&ctx, &x).unwrap();
        let k = mha.k.forward(&ctx, &x).unwrap();
        let att = q.matmul(&k.transpose().unwrap()).unwrap().softmax().unwrap();
        assert_eq!(att.data(), &[1.0]);
        let y = mha.forward(&ctx, &x, &x, &AttnSpec::default()).unwrap();
        let v = mha.v.forward(&ctx, &x).unwrap();
        let expect = mha.o.forward(&ctx, &v).unwrap();
        for (a, b) in y.data().iter().zip(expect.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn banded_attention_matches_masked_full_attention() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mha = MultiHeadAttention::new(&mut Builder::new(&mut store, &mut rng), "att", 8, 2).unwrap();
        let ctx = Ctx::inference(&store);
        let n = 150;
        let x = Tensor::constant(randn(&[1, n, 8], 3));
        let spec = AttnSpec {
            window: Some(3),
            ..Default::default()
        };
        let banded = mha.forward(&ctx, &x, &x, &spec).unwrap();
        // Reference: one full masked attention per head.
        let q = mha.q.forward(&ctx, &x).unwrap();
        let k = mha.k.forward(&ctx, &x).unwrap();
        let v = mha.v.forward(&ctx, &x).unwrap();
        let mut heads = Vec::new();
        for h in 0..2 {
            let sl = |t: &Tensor| t.slice_last(h * 4, h * 4 + 4).unwrap();
            heads.push(attend(&ctx, &sl(&q), &sl(&k), &sl(&v), 0.5, spec.mask(1, 0, n, 0, n)).unwrap());
        }
        let full = mha
            .o
            .forward(&ctx, &Tensor::concat(&[&heads[0], &heads[1]], 2).unwrap())
            .unwrap();
        let diff = banded
            .data()
            .iter()
            .zip(full.data())
            .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        assert!(diff < 1e-12, "{diff}");
    }

    #[test]
    fn attention_gradient_check() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mha = MultiHeadAttention::new(&mut Builder::new(&mut store, &mut rng), "att", 8, 2).unwrap();
        let ctx = Ctx::inference(&store);
        let w = Tensor::constant(randn(&[2, 5, 8], 5));
        let spec = AttnSpec {
            key_lengths: Some(vec![5, 3]),
            causal: true,
            window: None,
        };
        let err = grad_check(
            |x| mha.forward(&ctx, &x[0], &x[0], &spec)?.mul(&w)?.sum(),
            &[randn(&[2, 5, 8], 6)],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn positions_start_at_offset() {
        let a = sinusoidal_positions(0, 10, 6);
        let b = sinusoidal_positions(4, 3, 6);
        assert_eq!(&a.data()[4 * 6..7 * 6], b.data());
    }
}
