use serde::{Deserialize, Serialize};

use super::layers::{Builder, Ctx, Linear, SeqMask};
use crate::autodiff::{Array, Tensor};
use crate::error::{Error, Result};

/// Minimum input frames accepted by the front-end.
pub const MIN_FRAMES: usize = 4;
pub const SUBSAMPLING: usize = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrontendConfig {
    pub input_dim: usize,
    pub dim: usize,
}

/// Two stride-2 convolutions (kernel 2) with swish, subsampling time by 4.
#[derive(Clone, Debug)]
pub struct Frontend {
    pub conv1: Linear,
    pub conv2: Linear,
    pub cfg: FrontendConfig,
}

pub fn subsampled_len(frames: usize) -> usize {
    frames.div_ceil(2).div_ceil(2)
}

impl Frontend {
    pub fn new(b: &mut Builder, cfg: FrontendConfig) -> Self {
        let mut s = b.sub("frontend");
        Self {
            conv1: Linear::new(&mut s, "conv1", 2 * cfg.input_dim, cfg.dim),
            conv2: Linear::new(&mut s, "conv2", 2 * cfg.dim, cfg.dim),
            cfg,
        }
    }

    fn stage(&self, ctx: &Ctx, conv: &Linear, x: &Tensor, mask: &SeqMask) -> Result<(Tensor, SeqMask)> {
        let (b, t, f) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let x = if t % 2 == 1 {
            let pad = Tensor::constant(Array::zeros(&[b, 1, f]));
            Tensor::concat(&[x, &pad], 1)?
        } else {
            x.clone()
        };
        let half = t.div_ceil(2);
        let y = conv.forward(ctx, &x.reshape(&[b, half, 2 * f])?)?.swish()?;
        let out_mask = SeqMask::new(mask.lengths.iter().map(|l| l.div_ceil(2)).collect(), half);
        let y = out_mask.apply(&y)?;
        Ok((y, out_mask))
    }

    /// `features: [B, T, F]` → `[B, ceil(ceil(T/2)/2), d]`.
    pub fn forward(&self, ctx: &Ctx, features: &Tensor, mask: &SeqMask) -> Result<(Tensor, SeqMask)> {
        let shape = features.shape();
        if shape.len() != 3 || shape[2] != self.cfg.input_dim {
            return Err(Error::dim(
                "frontend",
                format!("expected [B, T, {}], got {shape:?}", self.cfg.input_dim),
            ));
        }
        if let Some(&short) = mask.lengths.iter().find(|&&l| l < MIN_FRAMES) {
            return Err(Error::InputTooShort {
                frames: short,
                min: MIN_FRAMES,
            });
        }
        let (h, m) = self.stage(ctx, &self.conv1, features, mask)?;
        self.stage(ctx, &self.conv2, &h, &m)
    }
}
