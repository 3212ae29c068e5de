//! End-to-end orchestration: datasets, training loops, evaluation reports,
//! alignment streams and the InterCTC placement sweep.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Array, OptimConfig};
use crate::corpus::{
    load_utterances, speed_perturb, spec_augment, split_sets, Corpus, SpecAugmentConfig, SplitRatios, Splits,
    SynthConfig, TextSampler, Utterance,
};
use crate::decode::{joint_beam_search, BeamConfig, ModelAttention, PrefixLm};
use crate::error::{Error, Result};
use crate::interctc::{sweep_presets, Objective, TapAssignment};
use crate::lm::{Lm, Sentence, TextCorpus};
use crate::metrics::{did_accuracy, ErrorCount};
use crate::model::{Batch, Model, ModelConfig, Trainer};
use crate::nn::{EncoderVariant, SUBSAMPLING};
use crate::segment::{align_corpus, SegmentConfig, SegmentResult, UtteranceText};
use crate::vocab::{build_targets, Dialect, UtteranceTargets, Vocabulary};

/// Utterances plus their speaker-disjoint splits.
pub struct Dataset {
    /// Base vocabulary (no tags).
    pub vocab: Vocabulary,
    pub utterances: Vec<Utterance>,
    pub splits: Splits,
}

impl Dataset {
    pub fn new(vocab: Vocabulary, utterances: Vec<Utterance>, split_seed: u64) -> Result<Self> {
        let records: Vec<_> = utterances.iter().map(|u| u.record.clone()).collect();
        let splits = split_sets(&records, SplitRatios::default(), split_seed)?;
        Ok(Self {
            vocab,
            utterances,
            splits,
        })
    }

    pub fn from_corpus(corpus: Corpus, split_seed: u64) -> Result<Self> {
        Self::new(corpus.vocab, corpus.utterances, split_seed)
    }

    /// Reads `manifest.jsonl` and `vocab.txt` from a corpus directory.
    pub fn load(dir: &Path, split_seed: u64) -> Result<Self> {
        let vocab = Vocabulary::load(&dir.join("vocab.txt"))?;
        let utterances = load_utterances(&dir.join("manifest.jsonl"))?;
        Self::new(vocab, utterances, split_seed)
    }

    fn pick(&self, idx: &[usize]) -> Vec<&Utterance> {
        idx.iter().map(|&i| &self.utterances[i]).collect()
    }

    pub fn train(&self) -> Vec<&Utterance> {
        self.pick(&self.splits.train)
    }

    pub fn valid(&self) -> Vec<&Utterance> {
        self.pick(&self.splits.valid)
    }

    pub fn test(&self) -> Vec<&Utterance> {
        self.pick(&self.splits.test)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    /// Factors drawn uniformly per utterance and step; empty disables.
    pub speed_factors: Vec<f64>,
    pub spec_augment: Option<SpecAugmentConfig>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub optim: OptimConfig,
    pub steps: usize,
    pub batch: usize,
    pub seed: u64,
    pub augment: AugmentConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            optim: OptimConfig::default(),
            steps: 2000,
            batch: 16,
            seed: 1,
            augment: AugmentConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.batch == 0 {
            return Err(Error::Config("batch must be positive".into()));
        }
        if self.augment.speed_factors.iter().any(|f| !(*f > 0.0 && f.is_finite())) {
            return Err(Error::Config("augment.speed_factors must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub learning_rate: f64,
    pub total: f64,
    pub ctc: f64,
    pub ctc_composed: f64,
    pub inter_mean: Option<f64>,
    pub decoder: Option<f64>,
}

pub fn utterance_targets(vocab: &Vocabulary, utt: &Utterance, tagged: bool) -> Result<UtteranceTargets> {
    let ids: Vec<usize> = utt
        .record
        .text
        .iter()
        .map(|w| vocab.id(w))
        .collect::<Result<_>>()
        .map_err(|e| e.for_utterance(utt.record.id.clone()))?;
    build_targets(vocab, &ids, utt.record.dialect, tagged).map_err(|e| e.for_utterance(utt.record.id.clone()))
}

/// Trains a fresh model on `train`, calling `on_step` after every update.
pub fn train_model(
    cfg: &TrainConfig,
    base_vocab: &Vocabulary,
    train: &[&Utterance],
    on_step: &mut dyn FnMut(&StepLog),
) -> Result<(Model, Vec<StepLog>)> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Split("training set is empty".into()));
    }
    let vocab = if base_vocab.has_tags() {
        base_vocab.clone()
    } else {
        base_vocab.extend_with_tags()?
    };
    let targets: Vec<UtteranceTargets> = train
        .iter()
        .map(|u| utterance_targets(&vocab, u, cfg.model.tagged))
        .collect::<Result<_>>()?;
    let model = Model::new(cfg.model.clone(), vocab, cfg.seed)?;
    let mut trainer = Trainer::new(model, cfg.optim.clone());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed);
    let mut order: Vec<usize> = Vec::new();
    let mut log = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let mut picked = Vec::with_capacity(cfg.batch);
        while picked.len() < cfg.batch {
            if order.is_empty() {
                order = (0..train.len()).collect();
                order.shuffle(&mut rng);
            }
            picked.push(order.pop().unwrap());
        }
        let feats: Vec<Array> = picked
            .iter()
            .map(|&i| augment(&cfg.augment, &train[i].features, &mut rng))
            .collect::<Result<_>>()?;
        let items: Vec<(&str, &Array, &UtteranceTargets)> = picked
            .iter()
            .zip(&feats)
            .map(|(&i, x)| (train[i].record.id.as_str(), x, &targets[i]))
            .collect();
        let batch = Batch::new(&items)?;
        let lr = trainer.adam.learning_rate(trainer.adam.steps_taken() + 1);
        let r = trainer.step(&batch, cfg.seed.wrapping_add(step as u64))?;
        if !r.total.is_finite() {
            return Err(Error::Numerical(format!("training loss {} at step {}", r.total, step + 1)));
        }
        let entry = StepLog {
            step: step + 1,
            learning_rate: lr,
            total: r.total,
            ctc: r.ctc,
            ctc_composed: r.ctc_composed,
            inter_mean: r.inter_mean,
            decoder: r.decoder,
        };
        on_step(&entry);
        log.push(entry);
    }
    Ok((trainer.model, log))
}

fn augment(cfg: &AugmentConfig, x: &Array, rng: &mut ChaCha8Rng) -> Result<Array> {
    let mut out = match cfg.speed_factors.as_slice() {
        [] => x.clone(),
        fs => speed_perturb(x, fs[rng.random_range(0..fs.len())])?,
    };
    if let Some(sa) = &cfg.spec_augment {
        out = spec_augment(&out, sa, rng.random());
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreParts {
    pub attention: f64,
    pub ctc: f64,
    pub lm: f64,
    pub total: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UtteranceRecord {
    pub id: String,
    pub dialect: Dialect,
    pub reference: String,
    pub hypothesis: String,
    /// From the decoded leading tag.
    pub predicted_dialect: Option<Dialect>,
    /// From the DID InterCTC tap.
    pub did_tap: Option<Dialect>,
    pub errors: usize,
    pub words: usize,
    pub scores: ScoreParts,
    pub truncated: bool,
    pub malformed: bool,
}

/// Joint decoding of one utterance. Models without a decoder are decoded
/// from CTC scores alone.
pub fn decode_utterance(model: &Model, lm: Option<&Lm>, utt: &Utterance, beam: &BeamConfig) -> Result<UtteranceRecord> {
    let wrap = |e: Error| e.for_utterance(utt.record.id.clone());
    let vocab = &model.vocab;
    let enc = model.encode(&utt.features).map_err(wrap)?;
    let mut cfg = beam.clone();
    if !model.cfg.has_decoder() {
        cfg.ctc_weight = 1.0;
    }
    let att = ModelAttention {
        model,
        memory: &enc.memory,
    };
    let attention = model.cfg.has_decoder().then_some(&att as &dyn crate::decode::AttentionScorer);
    let nbest = joint_beam_search(vocab, &enc.ctc_log_probs, attention, lm.map(|l| l as &dyn PrefixLm), &cfg)
        .map_err(wrap)?;
    let best = nbest.best();
    let stripped = best.strip(vocab);
    let hyp: Vec<&str> = stripped.text.iter().map(|&t| vocab.token(t)).collect::<Result<_>>()?;
    let reference: Vec<&str> = utt.record.text.iter().map(String::as_str).collect();
    let mut count = ErrorCount::default();
    count.add(&reference, &hyp).map_err(wrap)?;
    let did_tap = match model.cfg.taps.did_layer() {
        Some(_) => Some(model.predict_did(&enc).map_err(wrap)?.dialect),
        None => None,
    };
    Ok(UtteranceRecord {
        id: utt.record.id.clone(),
        dialect: utt.record.dialect,
        reference: reference.join(" "),
        hypothesis: hyp.join(" "),
        predicted_dialect: stripped.dialect,
        did_tap,
        errors: count.errors,
        words: count.words,
        scores: ScoreParts {
            attention: best.att,
            ctc: best.ctc,
            lm: best.lm,
            total: best.score,
        },
        truncated: nbest.truncated,
        malformed: stripped.malformed,
    })
}

pub fn decode_all(model: &Model, lm: Option<&Lm>, utts: &[&Utterance], beam: &BeamConfig) -> Result<Vec<UtteranceRecord>> {
    utts.iter().map(|u| decode_utterance(model, lm, u, beam)).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub utterances: usize,
    pub errors: usize,
    pub words: usize,
    pub wer: f64,
    pub wer_by_dialect: BTreeMap<Dialect, f64>,
    pub did_accuracy_tap: Option<f64>,
    pub did_accuracy_decoder: Option<f64>,
    /// Tap-based when the model has a DID tap, decoder-tag based otherwise.
    pub did_accuracy: Option<f64>,
    pub records: Vec<UtteranceRecord>,
}

/// Aggregates per-utterance records; WERs pool edit counts.
pub fn evaluate(records: Vec<UtteranceRecord>) -> Result<EvalReport> {
    if records.is_empty() {
        return Err(Error::Metric("no decoded utterances".into()));
    }
    let mut all = ErrorCount::default();
    let mut per: BTreeMap<Dialect, ErrorCount> = BTreeMap::new();
    for r in &records {
        let c = ErrorCount {
            errors: r.errors,
            words: r.words,
        };
        all.merge(c);
        per.entry(r.dialect).or_default().merge(c);
    }
    let wer_by_dialect = per
        .into_iter()
        .map(|(d, c)| Ok((d, c.rate()?)))
        .collect::<Result<_>>()?;
    let labels: Vec<Dialect> = records.iter().map(|r| r.dialect).collect();
    let tap = if records.iter().all(|r| r.did_tap.is_some()) {
        let preds: Vec<Dialect> = records.iter().map(|r| r.did_tap.unwrap()).collect();
        Some(did_accuracy(&labels, &preds)?)
    } else {
        None
    };
    let decoder = if records.iter().any(|r| r.predicted_dialect.is_some()) {
        let preds: Vec<Option<Dialect>> = records.iter().map(|r| r.predicted_dialect).collect();
        let wrapped: Vec<Option<Dialect>> = labels.iter().map(|&d| Some(d)).collect();
        Some(did_accuracy(&wrapped, &preds)?)
    } else {
        None
    };
    Ok(EvalReport {
        utterances: records.len(),
        errors: all.errors,
        words: all.words,
        wer: all.rate()?,
        wer_by_dialect,
        did_accuracy_tap: tap,
        did_accuracy_decoder: decoder,
        did_accuracy: tap.or(decoder),
        records,
    })
}

fn pct(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |x| format!("{:.1}", 100.0 * x))
}

impl EvalReport {
    pub fn summary(&self) -> String {
        let mut s = format!(
            "utterances {}  WER {:.2}%  DID(tap) {}  DID(tag) {}\n",
            self.utterances,
            100.0 * self.wer,
            pct(self.did_accuracy_tap),
            pct(self.did_accuracy_decoder)
        );
        for (d, w) in &self.wer_by_dialect {
            let _ = writeln!(s, "  {d}: WER {:.2}%", 100.0 * w);
        }
        s
    }
}

/// Generic training text, tag-prefixed fine-tuning text and tagged
/// held-out text drawn from the corpus text source.
pub fn lm_text_corpora(cfg: &SynthConfig, sentences: usize, seed: u64) -> Result<(TextCorpus, TextCorpus, TextCorpus)> {
    let specs = crate::corpus::dialect_specs(cfg)?;
    let sampler = TextSampler::new(cfg, &specs);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let make = |n: usize, tagged: bool, rng: &mut ChaCha8Rng| TextCorpus {
        sentences: (0..n)
            .map(|i| {
                let d = Dialect::ALL[rng.random_range(0..3)];
                let tokens = if tagged {
                    sampler.sample(rng, d)
                } else {
                    sampler.sample_plain(rng)
                };
                Sentence {
                    line: i + 1,
                    dialect: tagged.then_some(d),
                    tokens,
                }
            })
            .collect(),
    };
    let plain = make(sentences, false, &mut rng);
    let tagged = make(sentences, true, &mut rng);
    let held = make((sentences / 10).max(1), true, &mut rng);
    Ok((plain, tagged, held))
}

/// Utterances concatenated into one feature stream, with true boundaries
/// in encoder frames at the middle of each inter-utterance silence.
pub struct Stream {
    pub features: Array,
    pub texts: Vec<UtteranceText>,
    pub boundaries: Vec<f64>,
}

pub fn build_stream(vocab: &Vocabulary, utts: &[&Utterance]) -> Result<Stream> {
    let f = utts
        .first()
        .ok_or_else(|| Error::Contract("empty stream".into()))?
        .features
        .last_dim();
    let mut data = Vec::new();
    let mut texts = Vec::with_capacity(utts.len());
    let mut spans = Vec::with_capacity(utts.len());
    let mut offset = 0;
    for u in utts {
        if u.features.last_dim() != f {
            return Err(Error::dim("build_stream", "feature dims differ"));
        }
        data.extend_from_slice(u.features.data());
        let (s, e) = u.record.speech.unwrap_or((0, u.record.frames));
        spans.push((offset + s, offset + e));
        offset += u.features.rows();
        let tokens = u.record.text.iter().map(|w| vocab.id(w)).collect::<Result<_>>()?;
        texts.push(UtteranceText {
            id: u.record.id.clone(),
            tokens,
        });
    }
    let boundaries = spans
        .windows(2)
        .map(|w| (w[0].1 + w[1].0) as f64 / 2.0 / SUBSAMPLING as f64)
        .collect();
    Ok(Stream {
        features: Array::new(vec![offset, f], data)?,
        texts,
        boundaries,
    })
}

/// Disjoint groups of `per_stream` utterance indices drawn without
/// replacement.
pub fn stream_groups(utterances: usize, streams: usize, per_stream: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if per_stream < 2 || streams * per_stream > utterances {
        return Err(Error::Config(format!(
            "{streams} streams of {per_stream} utterances need more than {utterances} utterances"
        )));
    }
    let mut order: Vec<usize> = (0..utterances).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    Ok(order.chunks_exact(per_stream).take(streams).map(<[usize]>::to_vec).collect())
}

/// Predicted boundaries within `tolerance` encoder frames of the truth.
pub fn boundary_hits(segments: &[SegmentResult], truth: &[f64], tolerance: f64) -> (usize, usize) {
    let hits = segments
        .windows(2)
        .zip(truth)
        .filter(|(w, t)| (w[1].start_frame as f64 - **t).abs() <= tolerance)
        .count();
    (hits, truth.len())
}

pub fn align_stream(model: &Model, stream: &Stream, cfg: &SegmentConfig) -> Result<Vec<SegmentResult>> {
    align_corpus(model, &stream.features, &stream.texts, cfg)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepSpec {
    pub presets: Vec<(String, TapAssignment)>,
    pub variants: Vec<EncoderVariant>,
    pub seeds: Vec<u64>,
    pub parallel: bool,
}

impl Default for SweepSpec {
    fn default() -> Self {
        Self {
            presets: sweep_presets(),
            variants: vec![EncoderVariant::ConformerLite],
            seeds: vec![1],
            parallel: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub row: usize,
    pub preset: String,
    pub multitask_layers: Vec<usize>,
    pub did_layers: Vec<usize>,
    pub variant: EncoderVariant,
    pub seed: u64,
    pub did_accuracy: Option<f64>,
    pub wer: Option<f64>,
    pub wer_by_dialect: BTreeMap<Dialect, f64>,
    /// Final-layer CTC loss at every training step.
    pub asr_loss: Vec<f64>,
    pub error: Option<String>,
}

impl SweepRow {
    pub fn ok(&self) -> bool {
        self.error.is_none()
    }
}

fn layers_with(taps: &TapAssignment, pred: impl Fn(&[Objective]) -> bool) -> Vec<usize> {
    taps.0.iter().filter(|t| pred(&t.objectives)).map(|t| t.layer).collect()
}

fn sweep_one(
    row: usize,
    (name, taps): &(String, TapAssignment),
    variant: EncoderVariant,
    seed: u64,
    base: &TrainConfig,
    data: &Dataset,
    beam: &BeamConfig,
) -> SweepRow {
    let mut cfg = base.clone();
    cfg.model.taps = taps.clone();
    cfg.model.encoder.variant = variant;
    cfg.seed = seed;
    let mut out = SweepRow {
        row,
        preset: name.clone(),
        multitask_layers: layers_with(taps, |o| o.contains(&Objective::Asr) && o.contains(&Objective::Did)),
        did_layers: layers_with(taps, |o| o == [Objective::Did]),
        variant,
        seed,
        did_accuracy: None,
        wer: None,
        wer_by_dialect: BTreeMap::new(),
        asr_loss: Vec::new(),
        error: None,
    };
    let result = (|| -> Result<EvalReport> {
        let (model, log) = train_model(&cfg, &data.vocab, &data.train(), &mut |_| {})?;
        out.asr_loss = log.iter().map(|l| l.ctc).collect();
        evaluate(decode_all(&model, None, &data.test(), beam)?)
    })();
    match result {
        Ok(r) => {
            out.did_accuracy = r.did_accuracy;
            out.wer = Some(r.wer);
            out.wer_by_dialect = r.wer_by_dialect;
        }
        Err(e) => out.error = Some(e.to_string()),
    }
    out
}

/// One training and evaluation run per preset, variant and seed.
pub fn run_sweep(spec: &SweepSpec, base: &TrainConfig, data: &Dataset, beam: &BeamConfig) -> Vec<SweepRow> {
    let mut jobs = Vec::new();
    for (i, p) in spec.presets.iter().enumerate() {
        for &v in &spec.variants {
            for &s in &spec.seeds {
                jobs.push((i + 1, p, v, s));
            }
        }
    }
    if spec.parallel {
        std::thread::scope(|scope| {
            let handles: Vec<_> = jobs
                .iter()
                .map(|&(row, p, v, s)| scope.spawn(move || sweep_one(row, p, v, s, base, data, beam)))
                .collect();
            handles.into_iter().map(|h| h.join().expect("sweep worker panicked")).collect()
        })
    } else {
        jobs.into_iter()
            .map(|(row, p, v, s)| sweep_one(row, p, v, s, base, data, beam))
            .collect()
    }
}

fn layer_set(layers: &[usize]) -> String {
    if layers.is_empty() {
        "-".into()
    } else {
        let l: Vec<String> = layers.iter().map(usize::to_string).collect();
        format!("L{}", l.join(","))
    }
}

pub fn sweep_table(rows: &[SweepRow]) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "{:>3}  {:<10} {:<8} {:<17} {:>4}  {:>7}  {:>6} {:>6} {:>6} {:>6}",
        "#", "Multi-task", "DID", "Encoder", "Seed", "DID Acc", "WER", "UL", "CO", "MU"
    );
    for r in rows {
        let variant = serde_json::to_value(r.variant)
            .ok()
            .and_then(|v| v.as_str().map(String::from))
            .unwrap_or_default();
        let _ = write!(
            s,
            "{:>3}  {:<10} {:<8} {:<17} {:>4}  ",
            r.row,
            layer_set(&r.multitask_layers),
            layer_set(&r.did_layers),
            variant,
            r.seed
        );
        match &r.error {
            Some(e) => {
                let _ = writeln!(s, "FAILED: {e}");
            }
            None => {
                let w = |d: Dialect| pct(r.wer_by_dialect.get(&d).copied());
                let _ = writeln!(
                    s,
                    "{:>7}  {:>6} {:>6} {:>6} {:>6}",
                    pct(r.did_accuracy),
                    pct(r.wer),
                    w(Dialect::Ul),
                    w(Dialect::Co),
                    w(Dialect::Mu)
                );
            }
        }
    }
    s
}

/// Means of consecutive non-overlapping windows.
pub fn window_means(values: &[f64], window: usize) -> Vec<f64> {
    values
        .chunks_exact(window.max(1))
        .map(|c| c.iter().sum::<f64>() / c.len() as f64)
        .collect()
}

pub fn strictly_decreasing(values: &[f64]) -> bool {
    values.windows(2).all(|w| w[1] < w[0])
}
