//! Intermediate CTC taps: per-layer objectives, self-conditioning and loss
//! composition.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::ctc::CtcHead;
use crate::error::{Error, Result};
use crate::nn::{Builder, Ctx, LayerNorm, Linear};

pub const DEFAULT_ALPHA: f64 = 0.5;
pub const DEFAULT_LAMBDA: f64 = 0.3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Objective {
    Asr,
    Did,
}

impl fmt::Display for Objective {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Objective::Asr => "asr",
            Objective::Did => "did",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TapSpec {
    pub layer: usize,
    pub objectives: Vec<Objective>,
}

/// Encoder layers (1-based, counted after each block) carrying InterCTC
/// objectives.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TapAssignment(pub Vec<TapSpec>);

impl TapAssignment {
    pub fn none() -> Self {
        Self(Vec::new())
    }

    /// Builds an assignment from multi-task and DID-only layer lists.
    pub fn from_layers(multitask: &[usize], did: &[usize]) -> Self {
        let mut layers: Vec<usize> = multitask.iter().chain(did).copied().collect();
        layers.sort_unstable();
        layers.dedup();
        Self(
            layers
                .into_iter()
                .map(|layer| {
                    let mut objectives = Vec::new();
                    if multitask.contains(&layer) {
                        objectives.push(Objective::Asr);
                    }
                    if multitask.contains(&layer) || did.contains(&layer) {
                        objectives.push(Objective::Did);
                    }
                    TapSpec { layer, objectives }
                })
                .collect(),
        )
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn validate(&self, num_blocks: usize) -> Result<()> {
        let mut prev = 0;
        for tap in &self.0 {
            if tap.layer == 0 || tap.layer >= num_blocks {
                return Err(Error::Config(format!(
                    "tap layer {} outside 1..{} (the last layer feeds the final CTC head)",
                    tap.layer,
                    num_blocks.saturating_sub(1)
                )));
            }
            if tap.layer <= prev {
                return Err(Error::Config(format!(
                    "tap layers must be strictly ascending, {} follows {prev}",
                    tap.layer
                )));
            }
            if tap.objectives.is_empty() {
                return Err(Error::Config(format!("tap layer {} has no objectives", tap.layer)));
            }
            let mut objs = tap.objectives.clone();
            objs.sort();
            objs.dedup();
            if objs.len() != tap.objectives.len() {
                return Err(Error::Config(format!("tap layer {} repeats an objective", tap.layer)));
            }
            prev = tap.layer;
        }
        Ok(())
    }

    /// Number of (layer, objective) pairs.
    pub fn num_losses(&self) -> usize {
        self.0.iter().map(|t| t.objectives.len()).sum()
    }

    /// Lowest layer with a DID objective.
    pub fn did_layer(&self) -> Option<usize> {
        self.0
            .iter()
            .find(|t| t.objectives.contains(&Objective::Did))
            .map(|t| t.layer)
    }

    /// Short human-readable description, e.g. `MT@{3,5} DID@{2}`.
    pub fn describe(&self) -> String {
        let mt: Vec<String> = self
            .0
            .iter()
            .filter(|t| t.objectives.contains(&Objective::Asr) && t.objectives.contains(&Objective::Did))
            .map(|t| t.layer.to_string())
            .collect();
        let did: Vec<String> = self
            .0
            .iter()
            .filter(|t| t.objectives == [Objective::Did])
            .map(|t| t.layer.to_string())
            .collect();
        let asr: Vec<String> = self
            .0
            .iter()
            .filter(|t| t.objectives == [Objective::Asr])
            .map(|t| t.layer.to_string())
            .collect();
        let mut parts = Vec::new();
        for (label, layers) in [("MT", mt), ("DID", did), ("ASR", asr)] {
            if !layers.is_empty() {
                parts.push(format!("{label}@{{{}}}", layers.join(",")));
            }
        }
        if parts.is_empty() {
            "none".into()
        } else {
            parts.join(" ")
        }
    }
}

/// Maps a layer of a 12-block encoder to a 6-block one.
pub fn reindex_layer(layer: usize) -> usize {
    layer.div_ceil(2)
}

/// The seven layer-assignment rows, re-indexed for a 6-block encoder.
pub fn sweep_presets() -> Vec<(String, TapAssignment)> {
    let r = |ls: &[usize]| -> Vec<usize> { ls.iter().map(|&l| reindex_layer(l)).collect() };
    let rows: [(&[usize], &[usize]); 7] = [
        (&[], &[]),
        (&[], &[3, 6, 9]),
        (&[], &[3, 6]),
        (&[], &[3]),
        (&[9], &[3, 6]),
        (&[6, 9], &[3]),
        (&[3, 6, 9], &[]),
    ];
    rows.iter()
        .map(|(mt, did)| {
            let taps = TapAssignment::from_layers(&r(mt), &r(did));
            (taps.describe(), taps)
        })
        .collect()
}

/// The desk analogue of the best row: DID at the shallow layer, multi-task
/// deeper.
pub fn best_preset() -> TapAssignment {
    sweep_presets().swap_remove(5).1
}

pub fn preset(name: &str) -> Option<TapAssignment> {
    sweep_presets()
        .into_iter()
        .enumerate()
        .find(|(i, (n, _))| n == name || format!("row{}", i + 1) == name)
        .map(|(_, (_, t))| t)
}

/// One tapped layer: its normalization, and a CTC head plus injection per
/// objective.
#[derive(Clone, Debug)]
pub struct TapModule {
    pub layer: usize,
    pub norm: LayerNorm,
    pub heads: Vec<(Objective, CtcHead, Linear)>,
}

impl TapModule {
    pub fn new(b: &mut Builder, spec: &TapSpec, dim: usize, classes: usize) -> Self {
        let mut s = b.sub(&format!("tap{}", spec.layer));
        let norm = LayerNorm::new(&mut s, "norm", dim);
        let heads = spec
            .objectives
            .iter()
            .map(|&o| {
                let head = CtcHead::new(&mut s, &format!("{o}_ctc"), dim, classes);
                let inject = Linear::new(&mut s, &format!("{o}_inject"), classes, dim);
                (o, head, inject)
            })
            .collect();
        Self {
            layer: spec.layer,
            norm,
            heads,
        }
    }

    /// Per-objective `(log_probs, posteriors)` of a hidden sequence.
    pub fn posteriors(&self, ctx: &Ctx, h: &Tensor) -> Result<Vec<(Objective, Tensor, Tensor)>> {
        self.heads
            .iter()
            .map(|(o, head, _)| {
                let (lp, logits) = head.forward(ctx, h)?;
                Ok((*o, lp, logits.softmax()?))
            })
            .collect()
    }

    /// `NRM(h) + Σ LIN_obj(Z_obj)`.
    pub fn self_condition(&self, ctx: &Ctx, h: &Tensor, posteriors: &[&Tensor]) -> Result<Tensor> {
        if posteriors.len() != self.heads.len() {
            return Err(Error::dim(
                "self_condition",
                format!("{} posteriors for {} objectives", posteriors.len(), self.heads.len()),
            ));
        }
        let mut out = self.norm.forward(ctx, h)?;
        for ((_, _, inject), z) in self.heads.iter().zip(posteriors) {
            let zs = z.shape();
            if zs.len() != h.shape().len() || zs[..zs.len() - 1] != h.shape()[..h.shape().len() - 1] {
                return Err(Error::dim(
                    "self_condition",
                    format!("posteriors {zs:?} vs hidden {:?}", h.shape()),
                ));
            }
            out = out.add(&inject.forward(ctx, z)?)?;
        }
        Ok(out)
    }
}

/// Output of one tapped layer during a forward pass.
#[derive(Clone, Debug)]
pub struct TapOutput {
    pub layer: usize,
    /// Hidden state before self-conditioning.
    pub hidden: Tensor,
    pub log_probs: Vec<(Objective, Tensor)>,
}

impl TapOutput {
    pub fn objective(&self, o: Objective) -> Option<&Tensor> {
        self.log_probs.iter().find(|(x, _)| *x == o).map(|(_, t)| t)
    }
}

/// One CTC loss per (layer, objective), in tap order.
pub fn intermediate_losses<F>(taps: &[TapOutput], mut loss: F) -> Result<Vec<(usize, Objective, Tensor)>>
where
    F: FnMut(Objective, &Tensor) -> Result<Tensor>,
{
    let mut out = Vec::new();
    for tap in taps {
        for (o, lp) in &tap.log_probs {
            out.push((tap.layer, *o, loss(*o, lp)?));
        }
    }
    Ok(out)
}

fn check_weight(name: &str, w: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&w) {
        return Err(Error::Config(format!("{name} = {w} outside [0, 1]")));
    }
    Ok(())
}

/// Mean of the intermediate losses, `None` when there are none.
pub fn mean_loss(losses: &[f64]) -> Option<f64> {
    (!losses.is_empty()).then(|| losses.iter().sum::<f64>() / losses.len() as f64)
}

/// `α·mean(inter) + (1−α)·ctc`, or `ctc` when there are no intermediate
/// losses.
pub fn compose_ctc_loss(inter: &[f64], ctc: f64, alpha: f64) -> Result<f64> {
    check_weight("alpha", alpha)?;
    Ok(match mean_loss(inter) {
        Some(m) => alpha * m + (1.0 - alpha) * ctc,
        None => ctc,
    })
}

/// `λ·ctc' + (1−λ)·dec`.
pub fn compose_total_loss(ctc: f64, dec: f64, lambda: f64) -> Result<f64> {
    check_weight("lambda", lambda)?;
    Ok(lambda * ctc + (1.0 - lambda) * dec)
}

/// Graph versions of the two compositions. Values agree bitwise with the
/// scalar functions above.
pub fn compose_ctc_loss_tensor(inter: &[&Tensor], ctc: &Tensor, alpha: f64) -> Result<Tensor> {
    check_weight("alpha", alpha)?;
    if inter.is_empty() {
        return Ok(ctc.clone());
    }
    let flat: Vec<Tensor> = inter.iter().map(|t| t.reshape(&[1])).collect::<Result<_>>()?;
    let refs: Vec<&Tensor> = flat.iter().collect();
    let mean = Tensor::concat(&refs, 0)?.mean()?;
    mean.scale(alpha)?.add(&ctc.scale(1.0 - alpha)?)
}

pub fn compose_total_loss_tensor(ctc: &Tensor, dec: &Tensor, lambda: f64) -> Result<Tensor> {
    check_weight("lambda", lambda)?;
    ctc.scale(lambda)?.add(&dec.scale(1.0 - lambda)?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InterLoss {
    pub layer: usize,
    pub objective: Objective,
    pub value: f64,
}

/// Every component of a training loss.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InterLossReport {
    pub inter: Vec<InterLoss>,
    pub inter_mean: Option<f64>,
    pub ctc: f64,
    pub ctc_composed: f64,
    /// Absent when λ = 1.
    pub decoder: Option<f64>,
    pub total: f64,
    pub alpha: f64,
    pub lambda: f64,
}

impl InterLossReport {
    /// Recomputes `(ctc_composed, total)` from the parts.
    pub fn recompose(&self) -> Result<(f64, f64)> {
        let inter: Vec<f64> = self.inter.iter().map(|l| l.value).collect();
        let composed = compose_ctc_loss(&inter, self.ctc, self.alpha)?;
        let total = match self.decoder {
            Some(d) => compose_total_loss(composed, d, self.lambda)?,
            None => composed,
        };
        Ok((composed, total))
    }

    /// Mean intermediate loss for one objective.
    pub fn objective_mean(&self, o: Objective) -> Option<f64> {
        let v: Vec<f64> = self.inter.iter().filter(|l| l.objective == o).map(|l| l.value).collect();
        mean_loss(&v)
    }
}
