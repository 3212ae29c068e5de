//! The two encoder block variants.

use super::layers::{AttnSpec, Builder, CgMlp, ConvModule, Ctx, FeedForward, LayerNorm, MultiHeadAttention, SeqMask};
use crate::autodiff::{Init, ParamId, Tensor};
use crate::error::Result;

/// Macaron feed-forward (half step) → self-attention → convolution module →
/// feed-forward (half step) → LayerNorm.
#[derive(Clone, Debug)]
pub struct ConformerBlock {
    pub ff1: FeedForward,
    pub att_norm: LayerNorm,
    pub att: MultiHeadAttention,
    pub conv: ConvModule,
    pub ff2: FeedForward,
    pub out_norm: LayerNorm,
}

impl ConformerBlock {
    pub fn new(b: &mut Builder, name: &str, dim: usize, heads: usize, ff_units: usize, kernel: usize) -> Result<Self> {
        let mut s = b.sub(name);
        Ok(Self {
            ff1: FeedForward::new(&mut s, "ff1", dim, ff_units),
            att_norm: LayerNorm::new(&mut s, "att_norm", dim),
            att: MultiHeadAttention::new(&mut s, "att", dim, heads)?,
            conv: ConvModule::new(&mut s, "conv", dim, kernel),
            ff2: FeedForward::new(&mut s, "ff2", dim, ff_units),
            out_norm: LayerNorm::new(&mut s, "out_norm", dim),
        })
    }

    pub fn forward(&self, ctx: &Ctx, x: &Tensor, mask: &SeqMask, spec: &AttnSpec) -> Result<Tensor> {
        let x = x.add(&self.ff1.forward(ctx, x)?.scale(0.5)?)?;
        let h = self.att_norm.forward(ctx, &x)?;
        let x = x.add(&ctx.dropout(self.att.forward(ctx, &h, &h, spec)?)?)?;
        let x = x.add(&self.conv.forward(ctx, &x, mask)?)?;
        let x = x.add(&self.ff2.forward(ctx, &x)?.scale(0.5)?)?;
        self.out_norm.forward(ctx, &x)
    }
}

/// Macaron feed-forward → parallel attention and cgMLP branches merged by a
/// depthwise convolution and a linear projection → feed-forward →
/// LayerNorm.
#[derive(Clone, Debug)]
pub struct EbranchformerBlock {
    pub ff1: FeedForward,
    pub att_norm: LayerNorm,
    pub att: MultiHeadAttention,
    pub mlp_norm: LayerNorm,
    pub cgmlp: CgMlp,
    pub merge_conv: ParamId,
    pub merge_bias: ParamId,
    pub merge_proj: super::layers::Linear,
    pub ff2: FeedForward,
    pub out_norm: LayerNorm,
}

impl EbranchformerBlock {
    pub fn new(
        b: &mut Builder,
        name: &str,
        dim: usize,
        heads: usize,
        ff_units: usize,
        cgmlp_units: usize,
        kernel: usize,
    ) -> Result<Self> {
        let mut s = b.sub(name);
        Ok(Self {
            ff1: FeedForward::new(&mut s, "ff1", dim, ff_units),
            att_norm: LayerNorm::new(&mut s, "att_norm", dim),
            att: MultiHeadAttention::new(&mut s, "att", dim, heads)?,
            mlp_norm: LayerNorm::new(&mut s, "mlp_norm", dim),
            cgmlp: CgMlp::new(&mut s, "cgmlp", dim, cgmlp_units, kernel),
            merge_conv: s.param("merge_dw", &[2 * dim, kernel], Init::Uniform((1.0 / kernel as f64).sqrt())),
            merge_bias: s.param("merge_dw_b", &[2 * dim], Init::Zeros),
            merge_proj: super::layers::Linear::new(&mut s, "merge_proj", 2 * dim, dim),
            ff2: FeedForward::new(&mut s, "ff2", dim, ff_units),
            out_norm: LayerNorm::new(&mut s, "out_norm", dim),
        })
    }

    /// The two branch outputs before merging.
    pub fn branches(&self, ctx: &Ctx, x: &Tensor, mask: &SeqMask, spec: &AttnSpec) -> Result<(Tensor, Tensor)> {
        let h = self.att_norm.forward(ctx, x)?;
        let global = ctx.dropout(self.att.forward(ctx, &h, &h, spec)?)?;
        let local = ctx.dropout(self.cgmlp.forward(ctx, &self.mlp_norm.forward(ctx, x)?, mask)?)?;
        Ok((global, local))
    }

    /// Concatenates the branches, adds their depthwise convolution and
    /// projects back to the model dimension.
    pub fn merge(&self, ctx: &Ctx, global: &Tensor, local: &Tensor, mask: &SeqMask) -> Result<Tensor> {
        let cat = mask.apply(&Tensor::concat(&[global, local], 2)?)?;
        let conv = cat.depthwise_conv1d(&ctx.p(self.merge_conv))?.add(&ctx.p(self.merge_bias))?;
        self.merge_proj.forward(ctx, &cat.add(&conv)?)
    }

    pub fn forward(&self, ctx: &Ctx, x: &Tensor, mask: &SeqMask, spec: &AttnSpec) -> Result<Tensor> {
        let x = x.add(&self.ff1.forward(ctx, x)?.scale(0.5)?)?;
        let (global, local) = self.branches(ctx, &x, mask, spec)?;
        let x = x.add(&ctx.dropout(self.merge(ctx, &global, &local, mask)?)?)?;
        let x = x.add(&self.ff2.forward(ctx, &x)?.scale(0.5)?)?;
        self.out_norm.forward(ctx, &x)
    }
}
