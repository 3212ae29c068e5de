//! Causal transformer language model over V' with two-stage training
//! (plain text, then tag-prefixed text) and prefix scoring for fusion.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{checkpoint, Adam, Array, OptimConfig, ParamStore, Tensor};
use crate::decode::PrefixLm;
use crate::error::{Error, Result};
use crate::nn::{Builder, Ctx, DecoderConfig, TransformerDecoder};
use crate::vocab::{Dialect, Vocabulary};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LmConfig {
    pub num_blocks: usize,
    pub dim: usize,
    pub heads: usize,
    pub ff_units: usize,
    /// Maximum input length, sos included.
    pub context: usize,
    pub dropout: f64,
}

impl Default for LmConfig {
    fn default() -> Self {
        Self {
            num_blocks: 2,
            dim: 64,
            heads: 4,
            ff_units: 256,
            context: 64,
            dropout: 0.0,
        }
    }
}

impl LmConfig {
    fn decoder(&self) -> DecoderConfig {
        DecoderConfig {
            num_blocks: self.num_blocks,
            dim: self.dim,
            heads: self.heads,
            ff_units: self.ff_units,
            dropout: self.dropout,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.context < 2 {
            return Err(Error::Config("lm.context must be at least 2".into()));
        }
        self.decoder().validate()
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Sentence {
    /// 1-based source line.
    pub line: usize,
    pub dialect: Option<Dialect>,
    pub tokens: Vec<usize>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct TextCorpus {
    pub sentences: Vec<Sentence>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct CleanStats {
    pub kept: usize,
    pub out_of_vocabulary: usize,
    pub duplicates: usize,
}

fn parse_line(vocab: &Vocabulary, line: &str) -> std::result::Result<(Option<Dialect>, Vec<usize>), String> {
    let mut words = line.split_whitespace().peekable();
    let dialect = match words.peek() {
        Some(w) if w.starts_with('[') => {
            let d = Dialect::from_tag(w).ok_or_else(|| format!("unknown tag {w}"))?;
            words.next();
            Some(d)
        }
        _ => None,
    };
    let tokens = words
        .map(|w| match vocab.id(w) {
            Ok(id) if !vocab.is_tag(id) => Ok(id),
            Ok(_) => Err(format!("tag {w} after the first position")),
            Err(_) => Err(format!("token {w} not in vocabulary")),
        })
        .collect::<std::result::Result<Vec<_>, _>>()?;
    if tokens.is_empty() {
        return Err("sentence has no tokens".into());
    }
    Ok((dialect, tokens))
}

impl TextCorpus {
    /// One sentence per line, optionally prefixed by a dialect tag. Blank
    /// lines are skipped.
    pub fn parse(vocab: &Vocabulary, text: &str) -> Result<Self> {
        let mut sentences = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let (dialect, tokens) = parse_line(vocab, line).map_err(|detail| Error::Corpus { line: i + 1, detail })?;
            sentences.push(Sentence {
                line: i + 1,
                dialect,
                tokens,
            });
        }
        Ok(Self { sentences })
    }

    pub fn read(vocab: &Vocabulary, path: &Path) -> Result<Self> {
        Self::parse(vocab, &std::fs::read_to_string(path)?)
    }

    /// Drops lines with out-of-vocabulary tokens and exact duplicates
    /// instead of failing.
    pub fn clean(vocab: &Vocabulary, text: &str) -> (Self, CleanStats) {
        let mut stats = CleanStats::default();
        let mut seen = HashSet::new();
        let mut sentences = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            match parse_line(vocab, line) {
                Err(_) => stats.out_of_vocabulary += 1,
                Ok((dialect, tokens)) => {
                    if !seen.insert((dialect, tokens.clone())) {
                        stats.duplicates += 1;
                        continue;
                    }
                    sentences.push(Sentence {
                        line: i + 1,
                        dialect,
                        tokens,
                    });
                }
            }
        }
        stats.kept = sentences.len();
        (Self { sentences }, stats)
    }

    pub fn render(&self, vocab: &Vocabulary) -> Result<String> {
        let mut out = String::new();
        for s in &self.sentences {
            if let Some(d) = s.dialect {
                out.push_str(&d.tag());
                out.push(' ');
            }
            let words: Vec<&str> = s.tokens.iter().map(|&t| vocab.token(t)).collect::<Result<_>>()?;
            let _ = writeln!(out, "{}", words.join(" "));
        }
        Ok(out)
    }

    pub fn write(&self, vocab: &Vocabulary, path: &Path) -> Result<()> {
        std::fs::write(path, self.render(vocab)?)?;
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.sentences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sentences.is_empty()
    }

    /// LM token sequences: the tag id (when present) followed by the text.
    pub fn sequences(&self, vocab: &Vocabulary) -> Result<Vec<Vec<usize>>> {
        self.sentences
            .iter()
            .map(|s| {
                let mut seq = Vec::with_capacity(s.tokens.len() + 1);
                if let Some(d) = s.dialect {
                    seq.push(vocab.tag_id(d)?);
                }
                seq.extend(&s.tokens);
                Ok(seq)
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LmTrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub seed: u64,
    pub optim: OptimConfig,
}

impl Default for LmTrainConfig {
    fn default() -> Self {
        Self {
            steps: 600,
            batch: 32,
            seed: 11,
            optim: OptimConfig {
                warmup_steps: 100,
                ..OptimConfig::default()
            },
        }
    }
}

pub struct Lm {
    pub cfg: LmConfig,
    pub vocab: Vocabulary,
    pub store: ParamStore,
    pub net: TransformerDecoder,
}

impl Lm {
    /// The vocabulary must already carry the dialect tags so both training
    /// stages share one parameter layout.
    pub fn new(cfg: LmConfig, vocab: Vocabulary, seed: u64) -> Result<Self> {
        cfg.validate()?;
        if !vocab.has_tags() {
            return Err(Error::Vocabulary("LM vocabulary must include dialect tags".into()));
        }
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut b = Builder::new(&mut store, &mut rng);
        let net = TransformerDecoder::new(&mut b, "lm", cfg.decoder(), vocab.output_classes(), false)?;
        Ok(Self { cfg, vocab, store, net })
    }

    pub fn classes(&self) -> usize {
        self.vocab.output_classes()
    }

    fn check_len(&self, input_len: usize) -> Result<()> {
        if input_len > self.cfg.context {
            return Err(Error::Context {
                len: input_len,
                context: self.cfg.context,
            });
        }
        Ok(())
    }

    /// Padded `[sos, seq..]` inputs and one-hot next-token weights.
    fn teacher_batch(&self, seqs: &[&[usize]]) -> Result<(Vec<usize>, usize, Array)> {
        let len = seqs.iter().map(|s| s.len() + 1).max().unwrap_or(1);
        self.check_len(len)?;
        let c = self.classes();
        let (sos, eos) = (self.vocab.sos(), self.vocab.eos());
        let mut ids = vec![eos; seqs.len() * len];
        let mut weights = vec![0.0; seqs.len() * len * c];
        for (i, s) in seqs.iter().enumerate() {
            ids[i * len] = sos;
            ids[i * len + 1..i * len + 1 + s.len()].copy_from_slice(s);
            for k in 0..=s.len() {
                let y = if k < s.len() { s[k] } else { eos };
                weights[(i * len + k) * c + y] = 1.0;
            }
        }
        Ok((ids, len, Array::new(vec![seqs.len(), len, c], weights)?))
    }

    /// Mean next-token NLL over every predicted position (eos included).
    pub fn loss(&self, ctx: &Ctx, seqs: &[&[usize]]) -> Result<Tensor> {
        if seqs.is_empty() {
            return Err(Error::Contract("empty LM batch".into()));
        }
        let (ids, len, w) = self.teacher_batch(seqs)?;
        let count: usize = seqs.iter().map(|s| s.len() + 1).sum();
        let lp = self.net.forward(ctx, &ids, seqs.len(), len, None)?;
        lp.mul(&Tensor::constant(w))?.sum()?.scale(-1.0 / count as f64)
    }

    /// Summed log-likelihood of `sos seq eos` for each sequence.
    pub fn log_likelihoods(&self, seqs: &[&[usize]]) -> Result<Vec<f64>> {
        let ctx = Ctx::inference(&self.store);
        let (ids, len, w) = self.teacher_batch(seqs)?;
        let lp = self.net.forward(&ctx, &ids, seqs.len(), len, None)?;
        let per = len * self.classes();
        Ok((0..seqs.len())
            .map(|i| {
                lp.data()[i * per..(i + 1) * per]
                    .iter()
                    .zip(&w.data()[i * per..(i + 1) * per])
                    .filter(|(_, &m)| m != 0.0)
                    .map(|(l, _)| l)
                    .sum()
            })
            .collect())
    }

    /// Log-distribution over the next token after `sos prefix`.
    pub fn score_prefix(&self, prefix: &[usize]) -> Result<Vec<f64>> {
        Ok(self.score_prefixes(&[prefix])?.remove(0))
    }

    pub fn score_prefixes(&self, prefixes: &[&[usize]]) -> Result<Vec<Vec<f64>>> {
        if prefixes.is_empty() {
            return Ok(Vec::new());
        }
        let len = prefixes.iter().map(|p| p.len() + 1).max().unwrap();
        self.check_len(len)?;
        let (sos, eos) = (self.vocab.sos(), self.vocab.eos());
        let mut ids = vec![eos; prefixes.len() * len];
        for (i, p) in prefixes.iter().enumerate() {
            ids[i * len] = sos;
            ids[i * len + 1..i * len + 1 + p.len()].copy_from_slice(p);
        }
        let ctx = Ctx::inference(&self.store);
        let lp = self.net.forward(&ctx, &ids, prefixes.len(), len, None)?;
        let c = self.classes();
        Ok(prefixes
            .iter()
            .enumerate()
            .map(|(i, p)| {
                let row = i * len + p.len();
                lp.data()[row * c..(row + 1) * c].to_vec()
            })
            .collect())
    }

    /// `exp` of the mean per-token NLL, from batched teacher forcing.
    pub fn perplexity(&self, seqs: &[Vec<usize>]) -> Result<f64> {
        let mut nll = 0.0;
        let mut count = 0usize;
        for chunk in seqs.chunks(64) {
            let refs: Vec<&[usize]> = chunk.iter().map(Vec::as_slice).collect();
            nll -= self.log_likelihoods(&refs)?.iter().sum::<f64>();
            count += chunk.iter().map(|s| s.len() + 1).sum::<usize>();
        }
        if count == 0 {
            return Err(Error::Metric("perplexity of an empty corpus".into()));
        }
        Ok((nll / count as f64).exp())
    }

    /// Same quantity accumulated one prefix at a time.
    pub fn perplexity_chain(&self, seqs: &[Vec<usize>]) -> Result<f64> {
        let mut nll = 0.0;
        let mut count = 0usize;
        for s in seqs {
            for k in 0..=s.len() {
                let y = if k < s.len() { s[k] } else { self.vocab.eos() };
                nll -= self.score_prefix(&s[..k])?[y];
                count += 1;
            }
        }
        if count == 0 {
            return Err(Error::Metric("perplexity of an empty corpus".into()));
        }
        Ok((nll / count as f64).exp())
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("lm_config.json"), serde_json::to_string_pretty(&self.cfg)?)?;
        self.vocab.save(&dir.join("vocab.txt"))?;
        checkpoint::save(&self.store, &dir.join("lm.ictx"))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let cfg: LmConfig = serde_json::from_str(&std::fs::read_to_string(dir.join("lm_config.json"))?)?;
        let vocab = Vocabulary::load(&dir.join("vocab.txt"))?;
        let mut lm = Self::new(cfg, vocab, 0)?;
        checkpoint::load_into(&mut lm.store, &dir.join("lm.ictx"))?;
        Ok(lm)
    }
}

impl PrefixLm for Lm {
    fn classes(&self) -> usize {
        Lm::classes(self)
    }

    fn score_batch(&self, prefixes: &[&[usize]]) -> Result<Vec<Vec<f64>>> {
        self.score_prefixes(prefixes)
    }
}

/// Per-step training losses.
pub type LossCurve = Vec<f64>;

fn fit(lm: &mut Lm, seqs: &[Vec<usize>], cfg: &LmTrainConfig) -> Result<LossCurve> {
    if seqs.is_empty() {
        return Err(Error::Corpus {
            line: 0,
            detail: "empty training corpus".into(),
        });
    }
    if let Some(s) = seqs.iter().find(|s| s.len() + 1 > lm.cfg.context) {
        return Err(Error::Context {
            len: s.len() + 1,
            context: lm.cfg.context,
        });
    }
    let mut adam = Adam::new(cfg.optim.clone(), &lm.store);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = Vec::new();
    let mut curve = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let mut picked = Vec::with_capacity(cfg.batch);
        while picked.len() < cfg.batch.max(1) {
            if order.is_empty() {
                order = (0..seqs.len()).collect();
                order.shuffle(&mut rng);
            }
            picked.push(order.pop().unwrap());
        }
        let refs: Vec<&[usize]> = picked.iter().map(|&i| seqs[i].as_slice()).collect();
        let grads = {
            let ctx = Ctx::training(&lm.store, lm.cfg.dropout, cfg.seed.wrapping_add(step as u64));
            let loss = lm.loss(&ctx, &refs)?;
            curve.push(loss.item());
            loss.backward()?
        };
        lm.store.accumulate(&grads);
        adam.step(&mut lm.store);
    }
    Ok(curve)
}

/// Stage 1: plain text only.
pub fn train_lm(lm: &mut Lm, corpus: &TextCorpus, cfg: &LmTrainConfig) -> Result<LossCurve> {
    if let Some(s) = corpus.sentences.iter().find(|s| s.dialect.is_some()) {
        return Err(Error::Corpus {
            line: s.line,
            detail: "stage-1 corpus must not carry dialect tags".into(),
        });
    }
    fit(lm, &corpus.sequences(&lm.vocab)?, cfg)
}

/// Stage 2: every sentence carries its dialect tag.
pub fn finetune_lm(lm: &mut Lm, corpus: &TextCorpus, cfg: &LmTrainConfig) -> Result<LossCurve> {
    if corpus.is_empty() {
        return Err(Error::Corpus {
            line: 0,
            detail: "fine-tuning corpus is empty".into(),
        });
    }
    if let Some(s) = corpus.sentences.iter().find(|s| s.dialect.is_none()) {
        return Err(Error::Corpus {
            line: s.line,
            detail: "fine-tuning sentence lacks a dialect tag".into(),
        });
    }
    fit(lm, &corpus.sequences(&lm.vocab)?, cfg)
}

#[cfg(test)]
mod tests;
