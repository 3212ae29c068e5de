use serde::{Deserialize, Serialize};

use super::layers::{sinusoidal_positions, AttnSpec, Builder, Ctx, Embedding, FeedForward, LayerNorm, Linear, MultiHeadAttention};
use crate::autodiff::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecoderConfig {
    pub num_blocks: usize,
    pub dim: usize,
    pub heads: usize,
    pub ff_units: usize,
    pub dropout: f64,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            num_blocks: 2,
            dim: 64,
            heads: 4,
            ff_units: 256,
            dropout: 0.0,
        }
    }
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_blocks == 0 || self.dim == 0 || self.ff_units == 0 {
            return Err(Error::Config("decoder sizes must be positive".into()));
        }
        if self.heads == 0 || self.dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "decoder.dim {} not divisible by decoder.heads {}",
                self.dim, self.heads
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct DecoderBlock {
    pub self_norm: LayerNorm,
    pub self_att: MultiHeadAttention,
    pub cross: Option<(LayerNorm, MultiHeadAttention)>,
    pub ff: FeedForward,
}

/// Pre-norm transformer stack over token ids. With cross-attention it is the
/// attention decoder; without, a causal language model.
#[derive(Clone, Debug)]
pub struct TransformerDecoder {
    pub cfg: DecoderConfig,
    pub classes: usize,
    pub embed: Embedding,
    pub blocks: Vec<DecoderBlock>,
    pub out_norm: LayerNorm,
    pub out: Linear,
}

impl TransformerDecoder {
    pub fn new(b: &mut Builder, name: &str, cfg: DecoderConfig, classes: usize, cross: bool) -> Result<Self> {
        cfg.validate()?;
        let mut s = b.sub(name);
        let embed = Embedding::new(&mut s, "embed", classes, cfg.dim);
        let mut blocks = Vec::with_capacity(cfg.num_blocks);
        for i in 0..cfg.num_blocks {
            let mut bs = s.sub(&format!("block{}", i + 1));
            let self_norm = LayerNorm::new(&mut bs, "self_norm", cfg.dim);
            let self_att = MultiHeadAttention::new(&mut bs, "self_att", cfg.dim, cfg.heads)?;
            let cross = if cross {
                Some((
                    LayerNorm::new(&mut bs, "cross_norm", cfg.dim),
                    MultiHeadAttention::new(&mut bs, "cross_att", cfg.dim, cfg.heads)?,
                ))
            } else {
                None
            };
            let ff = FeedForward::new(&mut bs, "ff", cfg.dim, cfg.ff_units);
            blocks.push(DecoderBlock {
                self_norm,
                self_att,
                cross,
                ff,
            });
        }
        let out_norm = LayerNorm::new(&mut s, "out_norm", cfg.dim);
        let out = Linear::new(&mut s, "out", cfg.dim, classes);
        Ok(Self {
            cfg,
            classes,
            embed,
            blocks,
            out_norm,
            out,
        })
    }

    pub fn has_cross_attention(&self) -> bool {
        self.blocks.first().is_some_and(|b| b.cross.is_some())
    }

    /// Log-probabilities `[B, L, classes]` for token ids laid out `[B, L]`.
    /// `memory` is `[B, N, d]` with per-row lengths.
    pub fn forward(
        &self,
        ctx: &Ctx,
        ids: &[usize],
        batch: usize,
        len: usize,
        memory: Option<(&Tensor, &[usize])>,
    ) -> Result<Tensor> {
        if ids.len() != batch * len || len == 0 {
            return Err(Error::dim("decoder", format!("{} ids for [{batch}, {len}]", ids.len())));
        }
        if let Some(&bad) = ids.iter().find(|&&t| t >= self.classes) {
            return Err(Error::Vocabulary(format!("token id {bad} outside {}", self.classes)));
        }
        if memory.is_some() != self.has_cross_attention() {
            return Err(Error::Contract("encoder memory must be given exactly when the decoder has cross-attention".into()));
        }
        let mut h = self
            .embed
            .forward(ctx, ids, batch, len)?
            .add(&sinusoidal_positions(0, len, self.cfg.dim))?;
        let self_spec = AttnSpec {
            causal: true,
            ..Default::default()
        };
        let cross_spec = memory.map(|(m, lengths)| AttnSpec {
            key_lengths: lengths.iter().any(|&l| l < m.shape()[1]).then(|| lengths.to_vec()),
            ..Default::default()
        });
        for block in &self.blocks {
            let x = block.self_norm.forward(ctx, &h)?;
            h = h.add(&ctx.dropout(block.self_att.forward(ctx, &x, &x, &self_spec)?)?)?;
            if let (Some((norm, att)), Some((mem, _)), Some(spec)) = (&block.cross, memory, &cross_spec) {
                let x = norm.forward(ctx, &h)?;
                h = h.add(&ctx.dropout(att.forward(ctx, &x, mem, spec)?)?)?;
            }
            h = h.add(&ctx.dropout(block.ff.forward(ctx, &h)?)?)?;
        }
        self.out
            .forward(ctx, &self.out_norm.forward(ctx, &h)?)?
            .log_softmax()
    }
}
