use serde::{Deserialize, Serialize};

use super::blocks::{ConformerBlock, EbranchformerBlock};
use super::layers::{sinusoidal_positions, AttnSpec, Builder, Ctx, SeqMask};
use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::interctc::{TapAssignment, TapModule, TapOutput};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderVariant {
    ConformerLite,
    EbranchformerLite,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub variant: EncoderVariant,
    pub num_blocks: usize,
    pub dim: usize,
    pub heads: usize,
    pub ff_units: usize,
    pub cgmlp_units: usize,
    pub kernel: usize,
    /// Restrict self-attention to `|i - j| <= window`.
    pub attention_window: Option<usize>,
    pub positional: bool,
    pub dropout: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            variant: EncoderVariant::ConformerLite,
            num_blocks: 6,
            dim: 64,
            heads: 4,
            ff_units: 256,
            cgmlp_units: 256,
            kernel: 15,
            attention_window: None,
            positional: true,
            dropout: 0.0,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_blocks == 0 || self.dim == 0 || self.ff_units == 0 {
            return Err(Error::Config("encoder sizes must be positive".into()));
        }
        if self.heads == 0 || self.dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "encoder.dim {} not divisible by encoder.heads {}",
                self.dim, self.heads
            )));
        }
        if self.kernel % 2 == 0 {
            return Err(Error::Config(format!("encoder.kernel {} must be odd", self.kernel)));
        }
        if self.variant == EncoderVariant::EbranchformerLite && (self.cgmlp_units < 2 || self.cgmlp_units % 2 != 0) {
            return Err(Error::Config(format!(
                "encoder.cgmlp_units {} must be even",
                self.cgmlp_units
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("encoder.dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub enum EncoderBlock {
    Conformer(ConformerBlock),
    Ebranchformer(EbranchformerBlock),
}

impl EncoderBlock {
    pub fn forward(&self, ctx: &Ctx, x: &Tensor, mask: &SeqMask, spec: &AttnSpec) -> Result<Tensor> {
        match self {
            EncoderBlock::Conformer(b) => b.forward(ctx, x, mask, spec),
            EncoderBlock::Ebranchformer(b) => b.forward(ctx, x, mask, spec),
        }
    }
}

#[derive(Clone, Debug)]
pub struct EncoderOutput {
    pub hidden: Tensor,
    pub taps: Vec<TapOutput>,
}

#[derive(Clone, Debug)]
pub struct Encoder {
    pub cfg: EncoderConfig,
    pub blocks: Vec<EncoderBlock>,
    pub taps: Vec<TapModule>,
}

impl Encoder {
    pub fn new(b: &mut Builder, cfg: EncoderConfig, taps: &TapAssignment, classes: usize) -> Result<Self> {
        cfg.validate()?;
        taps.validate(cfg.num_blocks)?;
        let mut s = b.sub("encoder");
        let mut blocks = Vec::with_capacity(cfg.num_blocks);
        for i in 0..cfg.num_blocks {
            let name = format!("block{}", i + 1);
            blocks.push(match cfg.variant {
                EncoderVariant::ConformerLite => EncoderBlock::Conformer(ConformerBlock::new(
                    &mut s,
                    &name,
                    cfg.dim,
                    cfg.heads,
                    cfg.ff_units,
                    cfg.kernel,
                )?),
                EncoderVariant::EbranchformerLite => EncoderBlock::Ebranchformer(EbranchformerBlock::new(
                    &mut s,
                    &name,
                    cfg.dim,
                    cfg.heads,
                    cfg.ff_units,
                    cfg.cgmlp_units,
                    cfg.kernel,
                )?),
            });
        }
        let taps = taps.0.iter().map(|t| TapModule::new(&mut s, t, cfg.dim, classes)).collect();
        Ok(Self { cfg, blocks, taps })
    }

    /// `x: [B, N, d]` after the front-end.
    pub fn forward(&self, ctx: &Ctx, x: &Tensor, mask: &SeqMask) -> Result<EncoderOutput> {
        let shape = x.shape();
        if shape.len() != 3 || shape[2] != self.cfg.dim || shape[0] != mask.batch() || shape[1] != mask.max_len {
            return Err(Error::dim(
                "encoder",
                format!("input {shape:?} with mask {}x{}", mask.batch(), mask.max_len),
            ));
        }
        let spec = AttnSpec {
            key_lengths: (!mask.is_full()).then(|| mask.lengths.clone()),
            causal: false,
            window: self.cfg.attention_window,
        };
        let mut h = if self.cfg.positional {
            x.add(&sinusoidal_positions(0, shape[1], shape[2]))?
        } else {
            x.clone()
        };
        let mut outputs = Vec::with_capacity(self.taps.len());
        let mut next_tap = self.taps.iter().peekable();
        for (i, block) in self.blocks.iter().enumerate() {
            h = block.forward(ctx, &h, mask, &spec)?;
            if let Some(tap) = next_tap.next_if(|t| t.layer == i + 1) {
                let post = tap.posteriors(ctx, &h)?;
                let zs: Vec<&Tensor> = post.iter().map(|(_, _, z)| z).collect();
                let conditioned = tap.self_condition(ctx, &h, &zs)?;
                outputs.push(TapOutput {
                    layer: tap.layer,
                    hidden: h.clone(),
                    log_probs: post.iter().map(|(o, lp, _)| (*o, lp.clone())).collect(),
                });
                h = mask.apply(&conditioned)?;
            }
        }
        Ok(EncoderOutput { hidden: h, taps: outputs })
    }
}
