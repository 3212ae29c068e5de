//! Front-end, tapped encoder, final CTC head and attention decoder assembled
//! into one trainable model.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{checkpoint, Adam, Array, OptimConfig, ParamStore, Tensor};
use crate::ctc::{ctc_greedy_decode, ctc_loss_batch, min_frames, CtcHead};
use crate::error::{Error, Result};
use crate::interctc::{
    best_preset, compose_ctc_loss_tensor, compose_total_loss_tensor, InterLoss, InterLossReport, Objective,
    TapAssignment, DEFAULT_ALPHA, DEFAULT_LAMBDA,
};
use crate::nn::{
    subsampled_len, Builder, Ctx, DecoderConfig, Encoder, EncoderConfig, Frontend, FrontendConfig, SeqMask,
    TransformerDecoder, MIN_FRAMES,
};
use crate::vocab::{Dialect, UtteranceTargets, Vocabulary};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub input_dim: usize,
    pub encoder: EncoderConfig,
    pub decoder: DecoderConfig,
    pub taps: TapAssignment,
    pub alpha: f64,
    pub lambda: f64,
    pub label_smoothing: f64,
    /// Prepend the dialect tag to decoder and CTC targets.
    pub tagged: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            input_dim: 16,
            encoder: EncoderConfig::default(),
            decoder: DecoderConfig::default(),
            taps: best_preset(),
            alpha: DEFAULT_ALPHA,
            lambda: DEFAULT_LAMBDA,
            label_smoothing: 0.1,
            tagged: true,
        }
    }
}

impl ModelConfig {
    /// Small CTC-only model with frame-local context, so chunked inference
    /// reproduces full-stream posteriors away from chunk joins.
    pub fn aligner(input_dim: usize) -> Self {
        Self {
            input_dim,
            encoder: EncoderConfig {
                num_blocks: 2,
                dim: 32,
                heads: 2,
                ff_units: 64,
                cgmlp_units: 64,
                kernel: 3,
                attention_window: Some(1),
                positional: false,
                ..EncoderConfig::default()
            },
            taps: TapAssignment::none(),
            lambda: 1.0,
            tagged: false,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(Error::Config("input_dim must be positive".into()));
        }
        self.encoder.validate()?;
        self.taps.validate(self.encoder.num_blocks)?;
        for (name, w) in [("alpha", self.alpha), ("lambda", self.lambda)] {
            if !(0.0..=1.0).contains(&w) {
                return Err(Error::Config(format!("{name} = {w} outside [0, 1]")));
            }
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(Error::Config(format!(
                "label_smoothing = {} outside [0, 1)",
                self.label_smoothing
            )));
        }
        if self.has_decoder() {
            self.decoder.validate()?;
            if self.decoder.dim != self.encoder.dim {
                return Err(Error::Config(format!(
                    "decoder.dim {} differs from encoder.dim {}",
                    self.decoder.dim, self.encoder.dim
                )));
            }
        }
        Ok(())
    }

    /// No decoder is built for pure CTC training.
    pub fn has_decoder(&self) -> bool {
        self.lambda < 1.0
    }
}

/// Padded features plus targets for a set of utterances.
#[derive(Clone, Debug)]
pub struct Batch {
    pub ids: Vec<String>,
    /// `[B, T, F]`, zero beyond each length.
    pub features: Array,
    pub lengths: Vec<usize>,
    pub targets: Vec<UtteranceTargets>,
}

impl Batch {
    pub fn new(items: &[(&str, &Array, &UtteranceTargets)]) -> Result<Self> {
        let first = items.first().ok_or_else(|| Error::Contract("empty batch".into()))?;
        let f = first.1.last_dim();
        let t = items.iter().map(|(_, x, _)| x.rows()).max().unwrap_or(0);
        let mut data = vec![0.0; items.len() * t * f];
        for (i, (id, x, _)) in items.iter().enumerate() {
            if x.rank() != 2 || x.last_dim() != f {
                return Err(Error::dim("batch", format!("utterance {id} has shape {:?}", x.shape())));
            }
            data[i * t * f..i * t * f + x.len()].copy_from_slice(x.data());
        }
        Ok(Self {
            ids: items.iter().map(|(id, _, _)| id.to_string()).collect(),
            features: Array::new(vec![items.len(), t, f], data)?,
            lengths: items.iter().map(|(_, x, _)| x.rows()).collect(),
            targets: items.iter().map(|(_, _, y)| (*y).clone()).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Result of a training forward pass.
pub struct TrainOutput {
    pub loss: Tensor,
    pub report: InterLossReport,
}

/// Encoder-side outputs of one utterance.
#[derive(Clone, Debug)]
pub struct Encoded {
    /// `[N, d]`.
    pub memory: Array,
    /// `[N, C]`.
    pub ctc_log_probs: Array,
    pub taps: Vec<(usize, Objective, Array)>,
}

impl Encoded {
    pub fn tap(&self, layer: usize, o: Objective) -> Option<&Array> {
        self.taps.iter().find(|(l, x, _)| *l == layer && *x == o).map(|(_, _, a)| a)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum DidDiagnostic {
    /// Greedy output was exactly one tag.
    Clean,
    /// Greedy output was something else; posterior mass decided.
    MassFallback { collapsed: Vec<usize> },
    /// No DID tap; the decoder's first-token tag distribution decided.
    DecoderTag,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DidPrediction {
    pub dialect: Dialect,
    pub diagnostic: DidDiagnostic,
}

/// DID from a `[N, C]` CTC log-posterior matrix over `V'` plus blank.
pub fn predict_did_from_posteriors(vocab: &Vocabulary, log_probs: &Array) -> Result<DidPrediction> {
    if log_probs.rank() != 2 || log_probs.last_dim() != vocab.ctc_classes() {
        return Err(Error::dim(
            "predict_did",
            format!("{:?} for {} classes", log_probs.shape(), vocab.ctc_classes()),
        ));
    }
    let collapsed: Vec<usize> = ctc_greedy_decode(log_probs).into_iter().map(|c| c - 1).collect();
    if let [only] = collapsed.as_slice() {
        if let Some(d) = vocab.dialect_of(*only) {
            return Ok(DidPrediction {
                dialect: d,
                diagnostic: DidDiagnostic::Clean,
            });
        }
    }
    let c = log_probs.last_dim();
    let mut best = (Dialect::Ul, f64::NEG_INFINITY);
    for d in Dialect::ALL {
        let class = vocab.tag_id(d)? + 1;
        let mass: f64 = (0..log_probs.rows()).map(|t| log_probs.data()[t * c + class].exp()).sum();
        if mass > best.1 {
            best = (d, mass);
        }
    }
    Ok(DidPrediction {
        dialect: best.0,
        diagnostic: DidDiagnostic::MassFallback { collapsed },
    })
}

pub struct Model {
    pub cfg: ModelConfig,
    pub vocab: Vocabulary,
    pub store: ParamStore,
    pub frontend: Frontend,
    pub encoder: Encoder,
    pub ctc_head: CtcHead,
    pub decoder: Option<TransformerDecoder>,
}

impl Model {
    pub fn new(cfg: ModelConfig, vocab: Vocabulary, seed: u64) -> Result<Self> {
        cfg.validate()?;
        if !vocab.has_tags() {
            return Err(Error::Vocabulary("model vocabulary must include dialect tags".into()));
        }
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut b = Builder::new(&mut store, &mut rng);
        let frontend = Frontend::new(
            &mut b,
            FrontendConfig {
                input_dim: cfg.input_dim,
                dim: cfg.encoder.dim,
            },
        );
        let classes = vocab.ctc_classes();
        let encoder = Encoder::new(&mut b, cfg.encoder.clone(), &cfg.taps, classes)?;
        let ctc_head = CtcHead::new(&mut b, "ctc", cfg.encoder.dim, classes);
        let decoder = if cfg.has_decoder() {
            Some(TransformerDecoder::new(
                &mut b,
                "decoder",
                cfg.decoder.clone(),
                vocab.output_classes(),
                true,
            )?)
        } else {
            None
        };
        Ok(Self {
            cfg,
            vocab,
            store,
            frontend,
            encoder,
            ctc_head,
            decoder,
        })
    }

    pub fn num_parameters(&self) -> usize {
        self.store.num_scalars()
    }

    fn check_feasible(&self, batch: &Batch, enc_lengths: &[usize]) -> Result<()> {
        for (i, t) in batch.targets.iter().enumerate() {
            let wrap = |e: Error| e.for_utterance(batch.ids[i].clone());
            if batch.lengths[i] < MIN_FRAMES {
                return Err(wrap(Error::InputTooShort {
                    frames: batch.lengths[i],
                    min: MIN_FRAMES,
                }));
            }
            let target = t.ctc_classes();
            let required = min_frames(&target);
            if required > enc_lengths[i] {
                return Err(wrap(Error::InfeasibleTarget {
                    target_len: target.len(),
                    repeats: required - target.len(),
                    required,
                    frames: enc_lengths[i],
                }));
            }
        }
        Ok(())
    }

    /// Training loss and its decomposition.
    pub fn forward_train(&self, ctx: &Ctx, batch: &Batch) -> Result<TrainOutput> {
        let b = batch.len();
        let shape = batch.features.shape();
        if shape[2] != self.cfg.input_dim {
            return Err(Error::dim(
                "forward_train",
                format!("feature dim {} vs configured {}", shape[2], self.cfg.input_dim),
            ));
        }
        let enc_lengths: Vec<usize> = batch.lengths.iter().map(|&l| subsampled_len(l)).collect();
        self.check_feasible(batch, &enc_lengths)?;
        let mask = SeqMask::new(batch.lengths.clone(), shape[1]);
        let x = Tensor::constant(batch.features.clone());
        let (h, m) = self.frontend.forward(ctx, &x, &mask)?;
        let out = self.encoder.forward(ctx, &h, &m)?;

        let ctc_targets: Vec<Vec<usize>> = batch.targets.iter().map(|t| t.ctc_classes()).collect();
        let did_targets: Vec<Vec<usize>> = batch.targets.iter().map(|t| t.did_classes()).collect();
        let (lp, _) = self.ctc_head.forward(ctx, &out.hidden)?;
        let (ctc, _) = ctc_loss_batch(&lp, &m.lengths, &ctc_targets)?;

        let mut inter = Vec::new();
        for tap in &out.taps {
            for (o, tap_lp) in &tap.log_probs {
                let targets = match o {
                    Objective::Asr => &ctc_targets,
                    Objective::Did => &did_targets,
                };
                inter.push((tap.layer, *o, ctc_loss_batch(tap_lp, &m.lengths, targets)?.0));
            }
        }
        let inter_refs: Vec<&Tensor> = inter.iter().map(|(_, _, t)| t).collect();
        let composed = compose_ctc_loss_tensor(&inter_refs, &ctc, self.cfg.alpha)?;

        let (loss, decoder) = match &self.decoder {
            Some(dec) => {
                let d = self.decoder_loss(ctx, dec, &out.hidden, &m.lengths, &batch.targets, b)?;
                (compose_total_loss_tensor(&composed, &d, self.cfg.lambda)?, Some(d.item()))
            }
            None => (composed.clone(), None),
        };
        let inter_vals: Vec<InterLoss> = inter
            .iter()
            .map(|(layer, objective, t)| InterLoss {
                layer: *layer,
                objective: *objective,
                value: t.item(),
            })
            .collect();
        let inter_mean = crate::interctc::mean_loss(&inter_vals.iter().map(|l| l.value).collect::<Vec<_>>());
        let report = InterLossReport {
            inter: inter_vals,
            inter_mean,
            ctc: ctc.item(),
            ctc_composed: composed.item(),
            decoder,
            total: loss.item(),
            alpha: self.cfg.alpha,
            lambda: self.cfg.lambda,
        };
        Ok(TrainOutput { loss, report })
    }

    /// Label-smoothed cross-entropy summed over tokens, averaged over
    /// utterances.
    fn decoder_loss(
        &self,
        ctx: &Ctx,
        dec: &TransformerDecoder,
        memory: &Tensor,
        mem_lengths: &[usize],
        targets: &[UtteranceTargets],
        b: usize,
    ) -> Result<Tensor> {
        let len = targets.iter().map(|t| t.decoder.len() - 1).max().unwrap_or(1);
        let classes = dec.classes;
        let eos = self.vocab.eos();
        let mut ids = vec![eos; b * len];
        let mut weights = vec![0.0; b * len * classes];
        let eps = self.cfg.label_smoothing;
        let off = eps / classes as f64;
        for (i, t) in targets.iter().enumerate() {
            let (input, output) = t.teacher_forcing();
            ids[i * len..i * len + input.len()].copy_from_slice(input);
            for (k, &y) in output.iter().enumerate() {
                let row = &mut weights[(i * len + k) * classes..(i * len + k + 1) * classes];
                row.fill(off);
                row[y] += 1.0 - eps;
            }
        }
        let lp = dec.forward(ctx, &ids, b, len, Some((memory, mem_lengths)))?;
        let w = Tensor::constant(Array::new(vec![b, len, classes], weights)?);
        lp.mul(&w)?.sum()?.scale(-1.0 / b as f64)
    }

    /// Encoder, final CTC head and tap posteriors for one `[T, F]` input.
    pub fn encode(&self, features: &Array) -> Result<Encoded> {
        let mut all = self.encode_batch(&[features])?;
        Ok(all.remove(0))
    }

    pub fn encode_batch(&self, features: &[&Array]) -> Result<Vec<Encoded>> {
        let ctx = Ctx::inference(&self.store);
        let f = self.cfg.input_dim;
        if let Some(x) = features.iter().find(|x| x.rank() != 2 || x.last_dim() != f) {
            return Err(Error::dim("encode", format!("expected [T, {f}], got {:?}", x.shape())));
        }
        let b = features.len();
        let t = features.iter().map(|x| x.rows()).max().unwrap_or(0);
        let mut data = vec![0.0; b * t * f];
        for (i, x) in features.iter().enumerate() {
            data[i * t * f..i * t * f + x.len()].copy_from_slice(x.data());
        }
        let mask = SeqMask::new(features.iter().map(|x| x.rows()).collect(), t);
        let x = Tensor::constant(Array::new(vec![b, t, f], data)?);
        let (h, m) = self.frontend.forward(&ctx, &x, &mask)?;
        let out = self.encoder.forward(&ctx, &h, &m)?;
        let (lp, _) = self.ctc_head.forward(&ctx, &out.hidden)?;
        let n = m.max_len;
        let rows = |a: &Tensor, i: usize, len: usize| -> Array {
            let c = a.shape()[2];
            Array::from_parts(vec![len, c], a.data()[i * n * c..(i * n + len) * c].to_vec())
        };
        Ok((0..b)
            .map(|i| {
                let len = m.lengths[i];
                Encoded {
                    memory: rows(&out.hidden, i, len),
                    ctc_log_probs: rows(&lp, i, len),
                    taps: out
                        .taps
                        .iter()
                        .flat_map(|tap| tap.log_probs.iter().map(move |(o, a)| (tap.layer, *o, a)))
                        .map(|(l, o, a)| (l, o, rows(a, i, len)))
                        .collect(),
                }
            })
            .collect())
    }

    fn require_decoder(&self) -> Result<&TransformerDecoder> {
        self.decoder
            .as_ref()
            .ok_or_else(|| Error::Capability("model has no attention decoder".into()))
    }

    /// Next-token log-probabilities for each prefix (all of equal length,
    /// starting with sos).
    pub fn decoder_scores(&self, memory: &Array, prefixes: &[&[usize]]) -> Result<Vec<Vec<f64>>> {
        let dec = self.require_decoder()?;
        let len = prefixes.first().map_or(0, |p| p.len());
        if prefixes.iter().any(|p| p.len() != len || p.first() != Some(&self.vocab.sos())) {
            return Err(Error::Contract("prefixes must share a length and start with sos".into()));
        }
        let ctx = Ctx::inference(&self.store);
        let b = prefixes.len();
        let (n, d) = (memory.rows(), memory.last_dim());
        let mut mem = Vec::with_capacity(b * n * d);
        for _ in 0..b {
            mem.extend_from_slice(memory.data());
        }
        let mem = Tensor::constant(Array::new(vec![b, n, d], mem)?);
        let ids: Vec<usize> = prefixes.iter().flat_map(|p| p.iter().copied()).collect();
        let lengths = vec![n; b];
        let lp = dec.forward(&ctx, &ids, b, len, Some((&mem, &lengths)))?;
        let c = dec.classes;
        Ok((0..b)
            .map(|i| lp.data()[((i * len) + len - 1) * c..(i * len + len) * c].to_vec())
            .collect())
    }

    pub fn decoder_step(&self, memory: &Array, prefix: &[usize]) -> Result<Vec<f64>> {
        Ok(self.decoder_scores(memory, &[prefix])?.remove(0))
    }

    /// `Σ_k log P(y_k | X, y_<k)` over `[sos, …, eos]` under teacher forcing.
    pub fn decoder_log_likelihood(&self, memory: &Array, sequence: &[usize]) -> Result<f64> {
        let dec = self.require_decoder()?;
        if sequence.len() < 2 {
            return Err(Error::Contract("sequence needs sos and at least one token".into()));
        }
        let ctx = Ctx::inference(&self.store);
        let (n, d) = (memory.rows(), memory.last_dim());
        let mem = Tensor::constant(memory.clone().reshaped(vec![1, n, d])?);
        let len = sequence.len() - 1;
        let lp = dec.forward(&ctx, &sequence[..len], 1, len, Some((&mem, &[n])))?;
        let c = dec.classes;
        Ok((0..len).map(|k| lp.data()[k * c + sequence[k + 1]]).sum())
    }

    /// DID from the lowest DID-tapped layer, or from the decoder's first-token
    /// tag scores when no tap carries DID.
    pub fn predict_did(&self, enc: &Encoded) -> Result<DidPrediction> {
        if let Some(layer) = self.cfg.taps.did_layer() {
            let lp = enc
                .tap(layer, Objective::Did)
                .ok_or_else(|| Error::Contract(format!("encoded output lacks DID tap {layer}")))?;
            return predict_did_from_posteriors(&self.vocab, lp);
        }
        if self.decoder.is_none() || !self.cfg.tagged {
            return Err(Error::Capability("no DID tap and no tagged decoder".into()));
        }
        let scores = self.decoder_step(&enc.memory, &[self.vocab.sos()])?;
        let mut best = (Dialect::Ul, f64::NEG_INFINITY);
        for d in Dialect::ALL {
            let s = scores[self.vocab.tag_id(d)?];
            if s > best.1 {
                best = (d, s);
            }
        }
        Ok(DidPrediction {
            dialect: best.0,
            diagnostic: DidDiagnostic::DecoderTag,
        })
    }

    /// Writes `config.json`, `vocab.txt` and `model.ictx` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("config.json"), serde_json::to_string_pretty(&self.cfg)?)?;
        self.vocab.save(&dir.join("vocab.txt"))?;
        checkpoint::save(&self.store, &dir.join("model.ictx"))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let cfg: ModelConfig = serde_json::from_str(&std::fs::read_to_string(dir.join("config.json"))?)?;
        let vocab = Vocabulary::load(&dir.join("vocab.txt"))?;
        let mut model = Self::new(cfg, vocab, 0)?;
        checkpoint::load_into(&mut model.store, &dir.join("model.ictx"))?;
        Ok(model)
    }
}

/// Model plus optimizer state.
pub struct Trainer {
    pub model: Model,
    pub adam: Adam,
    pub dropout: f64,
}

impl Trainer {
    pub fn new(model: Model, optim: OptimConfig) -> Self {
        let adam = Adam::new(optim, &model.store);
        let dropout = model.cfg.encoder.dropout.max(model.cfg.decoder.dropout);
        Self { model, adam, dropout }
    }

    /// One optimizer update on `batch`; `seed` drives dropout.
    pub fn step(&mut self, batch: &Batch, seed: u64) -> Result<InterLossReport> {
        let (grads, report) = {
            let ctx = Ctx::training(&self.model.store, self.dropout, seed);
            let out = self.model.forward_train(&ctx, batch)?;
            (out.loss.backward()?, out.report)
        };
        self.model.store.accumulate(&grads);
        self.adam.step(&mut self.model.store);
        Ok(report)
    }
}
