//! CTC segmentation: trellis alignment of known texts to a long stream,
//! per-utterance confidence, and chunked inference for long inputs.

use serde::{Deserialize, Serialize};

use crate::autodiff::Array;
use crate::ctc::BLANK;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::nn::{subsampled_len, SUBSAMPLING};
use crate::vocab::Vocabulary;

/// Best log-scores over `(frames + 1) × (tokens + 1)` cells: cell `(t, j)`
/// has consumed `j` tokens after `t` frames.
#[derive(Clone, Debug)]
pub struct Trellis {
    pub frames: usize,
    /// CTC class ids.
    pub tokens: Vec<usize>,
    scores: Vec<f64>,
    advance: Vec<bool>,
    stay_token: Vec<bool>,
}

impl Trellis {
    fn idx(&self, t: usize, j: usize) -> usize {
        t * (self.tokens.len() + 1) + j
    }

    pub fn score(&self, t: usize, j: usize) -> f64 {
        self.scores[self.idx(t, j)]
    }

    pub fn best_score(&self) -> f64 {
        self.score(self.frames, self.tokens.len())
    }
}

fn stay_score(lp: &Array, t: usize, token: Option<usize>) -> (f64, bool) {
    let row = lp.row(t);
    match token {
        Some(z) if row[z] > row[BLANK] => (row[z], true),
        _ => (row[BLANK], false),
    }
}

/// Forward pass with stay (blank or the current token) and advance-by-one
/// transitions.
pub fn build_trellis(lp: &Array, tokens: &[usize]) -> Result<Trellis> {
    if lp.rank() != 2 {
        return Err(Error::dim("build_trellis", format!("{:?}", lp.shape())));
    }
    let (n, c) = (lp.rows(), lp.last_dim());
    if let Some(&bad) = tokens.iter().find(|&&z| z == BLANK || z >= c) {
        return Err(Error::Contract(format!("token class {bad} invalid for {c} classes")));
    }
    let j_max = tokens.len();
    if j_max > n {
        return Err(Error::AlignmentInfeasible(format!("{j_max} tokens in {n} frames")));
    }
    let cells = (n + 1) * (j_max + 1);
    let mut tr = Trellis {
        frames: n,
        tokens: tokens.to_vec(),
        scores: vec![f64::NEG_INFINITY; cells],
        advance: vec![false; cells],
        stay_token: vec![false; cells],
    };
    tr.scores[0] = 0.0;
    for t in 1..=n {
        let row = lp.row(t - 1);
        // Cells with j > t are unreachable; j < J - (n - t) cannot finish.
        let lo = j_max.saturating_sub(n - t);
        for j in lo..=j_max.min(t) {
            let (stay, is_token) = stay_score(lp, t - 1, (j > 0).then(|| tokens[j - 1]));
            let from_stay = tr.score(t - 1, j) + stay;
            let from_adv = if j > 0 {
                tr.score(t - 1, j - 1) + row[tokens[j - 1]]
            } else {
                f64::NEG_INFINITY
            };
            let i = tr.idx(t, j);
            if from_adv > from_stay {
                tr.scores[i] = from_adv;
                tr.advance[i] = true;
            } else {
                tr.scores[i] = from_stay;
                tr.stay_token[i] = is_token;
            }
        }
    }
    if tr.best_score() == f64::NEG_INFINITY || tr.best_score().is_nan() {
        return Err(Error::AlignmentInfeasible("no path reaches the final token".into()));
    }
    Ok(tr)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Alignment {
    /// Frame at which each token is entered.
    pub token_frames: Vec<usize>,
    /// Last frame on which each token (rather than blank) is emitted.
    pub token_ends: Vec<usize>,
    /// Tokens consumed after each frame.
    pub states: Vec<usize>,
    pub score: f64,
}

/// Follows back-pointers from `(N, J)`; ties were resolved toward staying,
/// so each token gets its earliest best timing.
pub fn backtrack(tr: &Trellis) -> Alignment {
    let j_max = tr.tokens.len();
    let mut states = vec![0; tr.frames];
    let mut token_frames = vec![0; j_max];
    let mut token_ends = vec![0; j_max];
    let mut seen_end = vec![false; j_max];
    let mut j = j_max;
    for t in (1..=tr.frames).rev() {
        states[t - 1] = j;
        let i = tr.idx(t, j);
        let emits = tr.advance[i] || tr.stay_token[i];
        if j > 0 && emits && !seen_end[j - 1] {
            token_ends[j - 1] = t - 1;
            seen_end[j - 1] = true;
        }
        if tr.advance[i] {
            token_frames[j - 1] = t - 1;
            j -= 1;
        }
    }
    Alignment {
        token_frames,
        token_ends,
        states,
        score: tr.best_score(),
    }
}

/// `exp` of the lowest mean token log-probability over windows of
/// `window` consecutive tokens (one window when there are fewer tokens).
pub fn confidence(lp: &Array, tokens: &[usize], token_frames: &[usize], window: usize) -> f64 {
    if tokens.is_empty() {
        return 0.0;
    }
    let scores: Vec<f64> = tokens
        .iter()
        .zip(token_frames)
        .map(|(&z, &t)| lp.row(t)[z])
        .collect();
    let w = window.clamp(1, scores.len());
    let worst = scores
        .windows(w)
        .map(|s| s.iter().sum::<f64>() / w as f64)
        .fold(f64::INFINITY, f64::min);
    worst.exp()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegmentResult {
    pub id: String,
    /// Encoder frames, end exclusive.
    pub start_frame: usize,
    pub end_frame: usize,
    pub confidence: f64,
    pub text: String,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct UtteranceText {
    pub id: String,
    /// V' ids without tags.
    pub tokens: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SegmentConfig {
    /// Chunk size in encoder frames.
    pub max_frames: usize,
    pub overlap_frames: usize,
    /// Confidence window in tokens.
    pub window: usize,
    /// Segments with lower confidence are dropped.
    pub threshold: f64,
}

impl Default for SegmentConfig {
    fn default() -> Self {
        Self {
            max_frames: 6000,
            overlap_frames: 10,
            window: 3,
            threshold: 0.0,
        }
    }
}

/// Aligns the concatenated texts to `lp` and cuts one segment per
/// utterance, splitting blank gaps at their midpoint.
pub fn segment_utterances(
    vocab: &Vocabulary,
    lp: &Array,
    utts: &[UtteranceText],
    window: usize,
) -> Result<Vec<SegmentResult>> {
    if utts.is_empty() {
        return Err(Error::Contract("no utterance texts to align".into()));
    }
    let mut classes = Vec::new();
    let mut ranges = Vec::with_capacity(utts.len());
    for u in utts {
        if u.tokens.is_empty() {
            return Err(Error::Contract(format!("utterance {} has no tokens", u.id)));
        }
        let start = classes.len();
        classes.extend(u.tokens.iter().map(|&t| t + 1));
        ranges.push(start..classes.len());
    }
    let tr = build_trellis(lp, &classes)?;
    let al = backtrack(&tr);
    let mut out: Vec<SegmentResult> = Vec::with_capacity(utts.len());
    for (k, (u, r)) in utts.iter().zip(&ranges).enumerate() {
        let first = al.token_frames[r.start];
        let start = if k == 0 {
            first
        } else {
            let prev_end = al.token_ends[r.start - 1];
            (prev_end + 1 + first) / 2
        };
        let end = match ranges.get(k + 1) {
            Some(next) => (al.token_ends[r.end - 1] + 1 + al.token_frames[next.start]) / 2,
            None => al.token_ends[r.end - 1] + 1,
        };
        let words: Vec<&str> = u.tokens.iter().map(|&t| vocab.token(t)).collect::<Result<_>>()?;
        out.push(SegmentResult {
            id: u.id.clone(),
            start_frame: start,
            end_frame: end,
            confidence: confidence(lp, &classes[r.clone()], &al.token_frames[r.clone()], window),
            text: words.join(" "),
        });
    }
    Ok(out)
}

/// Final CTC log-posteriors for a long `[T, F]` stream, computed on
/// overlapping chunks of at most `max_frames` encoder frames. Half of each
/// overlap is discarded on either side of a join.
pub fn partition_infer(model: &Model, features: &Array, max_frames: usize, overlap: usize) -> Result<Array> {
    if overlap * 2 >= max_frames {
        return Err(Error::Config(format!(
            "overlap {overlap} must be below half of max_frames {max_frames}"
        )));
    }
    let total_in = features.rows();
    let n = subsampled_len(total_in);
    if n <= max_frames {
        return Ok(model.encode(features)?.ctc_log_probs);
    }
    let f = features.last_dim();
    let step = max_frames - overlap;
    let classes = model.vocab.ctc_classes();
    let mut out: Vec<f64> = Vec::with_capacity(n * classes);
    let mut s = 0;
    loop {
        let e = (s + max_frames).min(n);
        let (a, b) = (s * SUBSAMPLING, (e * SUBSAMPLING).min(total_in));
        let chunk = Array::new(vec![b - a, f], features.data()[a * f..b * f].to_vec())?;
        let lp = model.encode(&chunk)?.ctc_log_probs;
        let keep_from = if s == 0 { 0 } else { overlap / 2 };
        let keep_to = if e == n { e - s } else { e - s - (overlap - overlap / 2) };
        out.extend_from_slice(&lp.data()[keep_from * classes..keep_to * classes]);
        if e == n {
            break;
        }
        s += step;
    }
    Array::new(vec![n, classes], out)
}

/// Chunked inference, alignment and confidence filtering.
pub fn align_corpus(
    model: &Model,
    features: &Array,
    utts: &[UtteranceText],
    cfg: &SegmentConfig,
) -> Result<Vec<SegmentResult>> {
    let lp = partition_infer(model, features, cfg.max_frames, cfg.overlap_frames)?;
    let segs = segment_utterances(&model.vocab, &lp, utts, cfg.window)?;
    Ok(segs.into_iter().filter(|s| s.confidence >= cfg.threshold).collect())
}

#[cfg(test)]
mod tests;
