//! Label-synchronous joint beam search over attention-decoder, CTC prefix
//! and optional language-model scores.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::autodiff::Array;
use crate::ctc::{CtcPrefixScorer, CtcPrefixState, Label};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::vocab::{strip_tag, Stripped, Vocabulary};

/// Next-token log-probabilities from an attention decoder. Prefixes exclude
/// sos and all have the same length.
pub trait AttentionScorer {
    fn classes(&self) -> usize;
    fn score_batch(&self, prefixes: &[&[usize]]) -> Result<Vec<Vec<f64>>>;
}

/// Next-token log-probabilities from a prefix language model. Prefixes
/// exclude sos.
pub trait PrefixLm {
    fn classes(&self) -> usize;
    fn score_batch(&self, prefixes: &[&[usize]]) -> Result<Vec<Vec<f64>>>;
}

/// A trained model's decoder bound to one utterance's encoder memory.
pub struct ModelAttention<'a> {
    pub model: &'a Model,
    pub memory: &'a Array,
}

impl AttentionScorer for ModelAttention<'_> {
    fn classes(&self) -> usize {
        self.model.vocab.output_classes()
    }

    fn score_batch(&self, prefixes: &[&[usize]]) -> Result<Vec<Vec<f64>>> {
        let sos = self.model.vocab.sos();
        let full: Vec<Vec<usize>> = prefixes
            .iter()
            .map(|p| std::iter::once(sos).chain(p.iter().copied()).collect())
            .collect();
        let refs: Vec<&[usize]> = full.iter().map(Vec::as_slice).collect();
        self.model.decoder_scores(self.memory, &refs)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BeamConfig {
    pub beam: usize,
    pub ctc_weight: f64,
    pub lm_weight: f64,
    pub length_bonus: f64,
    /// Token limit including eos; defaults to one more than the number of
    /// CTC frames.
    pub max_len: Option<usize>,
    /// Restrict the first token to dialect tags.
    pub force_tag_first: bool,
}

impl Default for BeamConfig {
    fn default() -> Self {
        Self {
            beam: 10,
            ctc_weight: 0.3,
            lm_weight: 0.3,
            length_bonus: 0.0,
            max_len: None,
            force_tag_first: false,
        }
    }
}

impl BeamConfig {
    pub fn validate(&self) -> Result<()> {
        if self.beam == 0 {
            return Err(Error::Config("beam must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.ctc_weight) {
            return Err(Error::Config(format!("ctc_weight {} outside [0, 1]", self.ctc_weight)));
        }
        if !self.lm_weight.is_finite() || !self.length_bonus.is_finite() {
            return Err(Error::Config("beam weights must be finite".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct Hypothesis {
    /// Emitted V' ids, without sos; finished hypotheses end in eos.
    pub tokens: Vec<usize>,
    pub att: f64,
    pub ctc: f64,
    pub lm: f64,
    pub score: f64,
    pub finished: bool,
    pub ctc_state: Option<CtcPrefixState>,
}

impl Hypothesis {
    /// Tokens without the trailing eos.
    pub fn text_ids(&self, vocab: &Vocabulary) -> &[usize] {
        match self.tokens.last() {
            Some(&t) if t == vocab.eos() => &self.tokens[..self.tokens.len() - 1],
            _ => &self.tokens,
        }
    }

    pub fn strip(&self, vocab: &Vocabulary) -> Stripped {
        strip_tag(vocab, &self.tokens)
    }
}

#[derive(Clone, Debug)]
pub struct NBest {
    /// Best first.
    pub hyps: Vec<Hypothesis>,
    /// No hypothesis reached eos; `hyps` holds the best unfinished one.
    pub truncated: bool,
}

impl NBest {
    pub fn best(&self) -> &Hypothesis {
        &self.hyps[0]
    }
}

/// `(1 - w_ctc)·att + w_ctc·ctc + w_lm·lm + bonus·len`, skipping terms
/// whose weight is zero.
pub fn combine(cfg: &BeamConfig, att: f64, ctc: f64, lm: f64, len: usize) -> f64 {
    let mut s = 0.0;
    if cfg.ctc_weight != 1.0 {
        s += (1.0 - cfg.ctc_weight) * att;
    }
    if cfg.ctc_weight != 0.0 {
        s += cfg.ctc_weight * ctc;
    }
    if cfg.lm_weight != 0.0 {
        s += cfg.lm_weight * lm;
    }
    s + cfg.length_bonus * len as f64
}

/// LM log-probability of `next` after `prefix`, scaled by the fusion
/// weight.
pub fn shallow_fuse(lm: &dyn PrefixLm, prefix: &[usize], next: usize, weight: f64) -> Result<f64> {
    let lp = lm.score_batch(&[prefix])?;
    let v = lp[0]
        .get(next)
        .ok_or_else(|| Error::Fusion(format!("token {next} outside LM classes {}", lm.classes())))?;
    Ok(weight * v)
}

fn rank(a: &Hypothesis, b: &Hypothesis) -> Ordering {
    b.score.total_cmp(&a.score).then_with(|| a.tokens.cmp(&b.tokens))
}

/// Joint beam search. `ctc_log_probs` is `[N, |V'| + 1]` with blank at
/// column 0 and V' id `i` at column `i + 1`.
pub fn joint_beam_search(
    vocab: &Vocabulary,
    ctc_log_probs: &Array,
    attention: Option<&dyn AttentionScorer>,
    lm: Option<&dyn PrefixLm>,
    cfg: &BeamConfig,
) -> Result<NBest> {
    cfg.validate()?;
    let classes = vocab.output_classes();
    if ctc_log_probs.rank() != 2 || ctc_log_probs.last_dim() != vocab.ctc_classes() {
        return Err(Error::dim(
            "joint_beam_search",
            format!("ctc posteriors {:?} for {} CTC classes", ctc_log_probs.shape(), vocab.ctc_classes()),
        ));
    }
    if let Some(a) = attention {
        if a.classes() != classes {
            return Err(Error::Vocabulary(format!(
                "decoder has {} classes, vocabulary {classes}",
                a.classes()
            )));
        }
    } else if cfg.ctc_weight != 1.0 {
        return Err(Error::Capability("attention weight is non-zero but no decoder is attached".into()));
    }
    if let Some(l) = lm {
        if l.classes() != classes {
            return Err(Error::Fusion(format!(
                "LM has {} classes, decoder vocabulary {classes}",
                l.classes()
            )));
        }
    }
    let use_ctc = cfg.ctc_weight != 0.0;
    let lm = lm.filter(|_| cfg.lm_weight != 0.0);
    let scorer = CtcPrefixScorer::new(ctc_log_probs)?;
    let max_len = cfg.max_len.unwrap_or(ctc_log_probs.rows() + 1).max(1);
    let eos = vocab.eos();

    let mut running = vec![Hypothesis {
        tokens: Vec::new(),
        att: 0.0,
        ctc: 0.0,
        lm: 0.0,
        score: 0.0,
        finished: false,
        ctc_state: use_ctc.then(|| scorer.initial()),
    }];
    let mut ended: Vec<Hypothesis> = Vec::new();

    for step in 0..max_len {
        let prefixes: Vec<&[usize]> = running.iter().map(|h| h.tokens.as_slice()).collect();
        let att = match attention {
            Some(a) => Some(a.score_batch(&prefixes)?),
            None => None,
        };
        let lmp = match lm {
            Some(l) => Some(l.score_batch(&prefixes)?),
            None => None,
        };
        let mut cands = Vec::with_capacity(running.len() * classes);
        for (i, h) in running.iter().enumerate() {
            for c in 0..classes {
                if cfg.force_tag_first && step == 0 && !vocab.is_tag(c) {
                    continue;
                }
                let a = h.att + att.as_ref().map_or(0.0, |s| s[i][c]);
                let l = h.lm + lmp.as_ref().map_or(0.0, |s| s[i][c]);
                let (ctc, state) = match &h.ctc_state {
                    Some(st) => {
                        let label = if c == eos { Label::End } else { Label::Class(c + 1) };
                        let (next, _) = scorer.extend(st, label)?;
                        (next.prefix_score, Some(next))
                    }
                    None => (0.0, None),
                };
                let mut tokens = h.tokens.clone();
                tokens.push(c);
                let score = combine(cfg, a, ctc, l, tokens.len());
                if score.is_nan() || score == f64::NEG_INFINITY {
                    continue;
                }
                cands.push(Hypothesis {
                    tokens,
                    att: a,
                    ctc,
                    lm: l,
                    score,
                    finished: c == eos,
                    ctc_state: state,
                });
            }
        }
        cands.sort_by(rank);
        cands.truncate(cfg.beam);
        running.clear();
        for h in cands {
            if h.finished {
                ended.push(h);
            } else {
                running.push(h);
            }
        }
        ended.sort_by(rank);
        ended.truncate(cfg.beam);
        if running.is_empty() {
            break;
        }
        // With no length bonus every score increment is non-positive, so a
        // full ended list that beats all running hypotheses is final.
        if cfg.length_bonus <= 0.0 && ended.len() >= cfg.beam && running[0].score < ended[ended.len() - 1].score {
            break;
        }
    }
    if ended.is_empty() {
        running.sort_by(rank);
        running.truncate(1);
        return Ok(NBest {
            hyps: running,
            truncated: true,
        });
    }
    Ok(NBest {
        hyps: ended,
        truncated: false,
    })
}

/// Greedy attention decoding: argmax at every step (lowest id on ties)
/// until eos or `max_len` tokens.
pub fn greedy_attention_decode(attention: &dyn AttentionScorer, eos: usize, max_len: usize) -> Result<Vec<usize>> {
    let mut tokens = Vec::new();
    while tokens.len() < max_len {
        let lp = attention.score_batch(&[&tokens])?.remove(0);
        let mut best = 0;
        for (c, v) in lp.iter().enumerate() {
            if *v > lp[best] {
                best = c;
            }
        }
        tokens.push(best);
        if best == eos {
            break;
        }
    }
    Ok(tokens)
}
