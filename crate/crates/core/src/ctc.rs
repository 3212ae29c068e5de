//! Connectionist temporal classification.
//!
//! Log-probability matrices are `[N, C]` with class 0 the blank. Targets are
//! sequences of non-blank class indices. All dynamic programming runs in log
//! space; `-inf` only enters sums through [`log_add`].

use crate::autodiff::{log_softmax_row, Array, Tensor};
use crate::error::{Error, Result};
use crate::nn::{Builder, Ctx, Linear};

pub const BLANK: usize = 0;

/// Largest instance the brute-force oracle will enumerate.
pub const ORACLE_MAX_FRAMES: usize = 8;
pub const ORACLE_MAX_CLASSES: usize = 5;

#[inline]
pub(crate) fn log_add(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let (hi, lo) = if a > b { (a, b) } else { (b, a) };
    hi + (lo - hi).exp().ln_1p()
}

/// Linear projection to `classes` outputs followed by log-softmax.
#[derive(Clone, Debug)]
pub struct CtcHead {
    pub proj: Linear,
    pub classes: usize,
}

impl CtcHead {
    pub fn new(b: &mut Builder, name: &str, dim: usize, classes: usize) -> Self {
        Self {
            proj: Linear::new(b, name, dim, classes),
            classes,
        }
    }

    /// Returns `(log_probs, logits)` for `[B, N, d]` input.
    pub fn forward(&self, ctx: &Ctx, h: &Tensor) -> Result<(Tensor, Tensor)> {
        let logits = self.proj.forward(ctx, h)?;
        Ok((logits.log_softmax()?, logits))
    }
}

fn adjacent_repeats(target: &[usize]) -> usize {
    target.windows(2).filter(|w| w[0] == w[1]).count()
}

/// Frames needed to emit `target`: one per label plus a separating blank
/// between equal neighbours.
pub fn min_frames(target: &[usize]) -> usize {
    target.len() + adjacent_repeats(target)
}

fn validate(lp: &Array, target: &[usize]) -> Result<(usize, usize)> {
    if lp.rank() != 2 {
        return Err(Error::dim("ctc_loss", format!("log-probs must be [N, C], got {:?}", lp.shape())));
    }
    let (n, c) = (lp.shape()[0], lp.shape()[1]);
    if let Some(&bad) = target.iter().find(|&&t| t == BLANK || t >= c) {
        return Err(Error::Contract(format!(
            "target label {bad} is not a non-blank class of {c}"
        )));
    }
    let required = min_frames(target);
    if required > n {
        return Err(Error::InfeasibleTarget {
            target_len: target.len(),
            repeats: adjacent_repeats(target),
            required,
            frames: n,
        });
    }
    Ok((n, c))
}

/// Negative log-likelihood of `target` and its gradient with respect to
/// every log-probability entry.
pub fn ctc_loss_and_grad(lp: &Array, target: &[usize]) -> Result<(f64, Array)> {
    let (n, c) = validate(lp, target)?;
    let s_len = 2 * target.len() + 1;
    let label = |s: usize| if s % 2 == 0 { BLANK } else { target[s / 2] };
    let can_skip = |s: usize| s >= 2 && s % 2 == 1 && label(s) != label(s - 2);
    let ninf = f64::NEG_INFINITY;
    let at = |t: usize, k: usize| lp.data()[t * c + k];

    let mut alpha = vec![ninf; n * s_len];
    alpha[0] = at(0, BLANK);
    if s_len > 1 {
        alpha[1] = at(0, label(1));
    }
    for t in 1..n {
        for s in 0..s_len {
            let prev = &alpha[(t - 1) * s_len..t * s_len];
            let mut acc = prev[s];
            if s >= 1 {
                acc = log_add(acc, prev[s - 1]);
            }
            if can_skip(s) {
                acc = log_add(acc, prev[s - 2]);
            }
            alpha[t * s_len + s] = if acc == ninf { ninf } else { acc + at(t, label(s)) };
        }
    }
    let last = &alpha[(n - 1) * s_len..];
    let log_p = if s_len > 1 {
        log_add(last[s_len - 1], last[s_len - 2])
    } else {
        last[0]
    };
    if log_p == ninf || !log_p.is_finite() {
        return Err(Error::Numerical(format!(
            "CTC total probability is {log_p} for a length-feasible target"
        )));
    }

    // beta excludes the emission at its own frame.
    let mut beta = vec![ninf; n * s_len];
    beta[(n - 1) * s_len + s_len - 1] = 0.0;
    if s_len > 1 {
        beta[(n - 1) * s_len + s_len - 2] = 0.0;
    }
    for t in (0..n - 1).rev() {
        for s in 0..s_len {
            let next = (t + 1) * s_len;
            let mut acc = ninf;
            for s2 in [s, s + 1, s + 2] {
                if s2 >= s_len || (s2 == s + 2 && !can_skip(s2)) {
                    continue;
                }
                let b = beta[next + s2];
                if b != ninf {
                    acc = log_add(acc, b + at(t + 1, label(s2)));
                }
            }
            beta[t * s_len + s] = acc;
        }
    }

    let mut grad = Array::zeros(lp.shape());
    let g = grad.data_mut();
    for t in 0..n {
        for s in 0..s_len {
            let (a, b) = (alpha[t * s_len + s], beta[t * s_len + s]);
            if a == ninf || b == ninf {
                continue;
            }
            g[t * c + label(s)] -= (a + b - log_p).exp();
        }
    }
    Ok((-log_p, grad))
}

pub fn ctc_loss(lp: &Array, target: &[usize]) -> Result<f64> {
    ctc_loss_and_grad(lp, target).map(|(l, _)| l)
}

/// Differentiable CTC loss on a `[N, C]` log-probability tensor.
pub fn ctc_loss_tensor(lp: &Tensor, target: &[usize]) -> Result<Tensor> {
    let (loss, grad) = ctc_loss_and_grad(lp.value(), target)?;
    lp.external("ctc_loss", loss, grad)
}

/// Mean CTC loss over a padded `[B, N, C]` batch, plus per-utterance values.
/// Errors carry the failing batch index.
pub fn ctc_loss_batch(lp: &Tensor, lengths: &[usize], targets: &[Vec<usize>]) -> Result<(Tensor, Vec<f64>)> {
    let shape = lp.shape();
    if shape.len() != 3 || shape[0] != lengths.len() || lengths.len() != targets.len() {
        return Err(Error::dim(
            "ctc_loss",
            format!("batch {shape:?} with {} lengths, {} targets", lengths.len(), targets.len()),
        ));
    }
    let (b, n, c) = (shape[0], shape[1], shape[2]);
    let mut jac = Array::zeros(shape);
    let mut per_utt = Vec::with_capacity(b);
    for i in 0..b {
        let len = lengths[i];
        let rows = &lp.data()[i * n * c..(i * n + len) * c];
        let view = Array::new(vec![len, c], rows.to_vec())?;
        let (loss, grad) = ctc_loss_and_grad(&view, &targets[i]).map_err(|e| e.for_utterance(i.to_string()))?;
        per_utt.push(loss);
        let dst = &mut jac.data_mut()[i * n * c..(i * n + len) * c];
        for (d, g) in dst.iter_mut().zip(grad.data()) {
            *d = g / b as f64;
        }
    }
    let mean = per_utt.iter().sum::<f64>() / b as f64;
    Ok((lp.external("ctc_loss", mean, jac)?, per_utt))
}

/// Removes repeats, then blanks.
pub fn collapse(path: &[usize]) -> Vec<usize> {
    let mut out = Vec::new();
    let mut prev = None;
    for &k in path {
        if Some(k) != prev && k != BLANK {
            out.push(k);
        }
        prev = Some(k);
    }
    out
}

/// Enumerates every alignment path. `+inf` when no path collapses to the
/// target.
pub fn ctc_loss_bruteforce(lp: &Array, target: &[usize]) -> Result<f64> {
    if lp.rank() != 2 {
        return Err(Error::dim("ctc_loss_bruteforce", format!("{:?}", lp.shape())));
    }
    let (n, c) = (lp.shape()[0], lp.shape()[1]);
    if n > ORACLE_MAX_FRAMES || c > ORACLE_MAX_CLASSES {
        return Err(Error::OracleBound(format!(
            "{n} frames x {c} classes exceeds {ORACLE_MAX_FRAMES} x {ORACLE_MAX_CLASSES}"
        )));
    }
    let mut total = f64::NEG_INFINITY;
    let mut path = vec![0usize; n];
    let count = c.pow(n as u32);
    for mut code in 0..count {
        let mut score = 0.0;
        for (t, slot) in path.iter_mut().enumerate() {
            *slot = code % c;
            code /= c;
            score += lp.data()[t * c + *slot];
        }
        if collapse(&path) == target {
            total = log_add(total, score);
        }
    }
    Ok(-total)
}

/// Per-frame argmax (ties to the lowest class), collapsed.
pub fn ctc_greedy_decode(lp: &Array) -> Vec<usize> {
    let c = lp.last_dim();
    let path: Vec<usize> = (0..lp.rows())
        .map(|t| {
            let row = &lp.data()[t * c..(t + 1) * c];
            let mut best = 0;
            for k in 1..c {
                if row[k] > row[best] {
                    best = k;
                }
            }
            best
        })
        .collect();
    collapse(&path)
}

/// Next symbol offered to the prefix scorer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Label {
    Class(usize),
    End,
}

/// Forward variables of a label prefix: log-probability of the prefix having
/// been emitted by frame t, ending in a non-blank (`nonblank`) or blank.
#[derive(Clone, Debug, PartialEq)]
pub struct CtcPrefixState {
    pub nonblank: Vec<f64>,
    pub blank: Vec<f64>,
    pub last: Option<usize>,
    /// log P(labelling starts with this prefix).
    pub prefix_score: f64,
}

impl CtcPrefixState {
    /// Log-probability that the labelling is exactly this prefix.
    pub fn full_score(&self) -> f64 {
        let t = self.blank.len() - 1;
        log_add(self.nonblank[t], self.blank[t])
    }
}

/// Incremental CTC prefix scoring for label-synchronous decoding.
#[derive(Clone, Debug)]
pub struct CtcPrefixScorer<'a> {
    lp: &'a Array,
    frames: usize,
    classes: usize,
}

impl<'a> CtcPrefixScorer<'a> {
    pub fn new(lp: &'a Array) -> Result<Self> {
        if lp.rank() != 2 || lp.shape()[0] == 0 {
            return Err(Error::dim("ctc_prefix_score", format!("{:?}", lp.shape())));
        }
        Ok(Self {
            lp,
            frames: lp.shape()[0],
            classes: lp.shape()[1],
        })
    }

    fn at(&self, t: usize, k: usize) -> f64 {
        self.lp.data()[t * self.classes + k]
    }

    /// State of the empty prefix.
    pub fn initial(&self) -> CtcPrefixState {
        let mut blank = Vec::with_capacity(self.frames);
        let mut acc = 0.0;
        for t in 0..self.frames {
            acc += self.at(t, BLANK);
            blank.push(acc);
        }
        CtcPrefixState {
            nonblank: vec![f64::NEG_INFINITY; self.frames],
            blank,
            last: None,
            prefix_score: 0.0,
        }
    }

    /// Extends `state` by `next` and returns the new state with the change in
    /// prefix log-score. For [`Label::End`] the new score is the probability
    /// of the prefix as a complete labelling.
    pub fn extend(&self, state: &CtcPrefixState, next: Label) -> Result<(CtcPrefixState, f64)> {
        if state.blank.len() != self.frames {
            return Err(Error::Contract(format!(
                "prefix state has {} frames, scorer {}",
                state.blank.len(),
                self.frames
            )));
        }
        let c = match next {
            Label::End => {
                let full = state.full_score();
                let mut done = state.clone();
                done.prefix_score = full;
                return Ok((done, full - state.prefix_score));
            }
            Label::Class(BLANK) => {
                return Err(Error::Contract("blank is not a label".into()));
            }
            Label::Class(k) if k >= self.classes => {
                return Err(Error::Contract(format!("class {k} outside {}", self.classes)));
            }
            Label::Class(k) => k,
        };
        let ninf = f64::NEG_INFINITY;
        let mut nonblank = vec![ninf; self.frames];
        let mut blank = vec![ninf; self.frames];
        // Probability mass that can start emitting `c` at frame t.
        let phi = |t: usize| -> f64 {
            if state.last == Some(c) {
                state.blank[t]
            } else {
                log_add(state.blank[t], state.nonblank[t])
            }
        };
        let mut prefix = ninf;
        if state.last.is_none() {
            nonblank[0] = self.at(0, c);
            prefix = nonblank[0];
        }
        for t in 1..self.frames {
            let p = phi(t - 1);
            let emit = self.at(t, c);
            nonblank[t] = log_add(nonblank[t - 1], p);
            if nonblank[t] != ninf {
                nonblank[t] += emit;
            }
            let b = log_add(blank[t - 1], nonblank[t - 1]);
            blank[t] = if b == ninf { ninf } else { b + self.at(t, BLANK) };
            if p != ninf {
                prefix = log_add(prefix, p + emit);
            }
        }
        let increment = prefix - state.prefix_score;
        Ok((
            CtcPrefixState {
                nonblank,
                blank,
                last: Some(c),
                prefix_score: prefix,
            },
            increment,
        ))
    }
}

/// Log-softmax of raw rows, for building fixtures.
pub fn normalize_rows(logits: &Array) -> Array {
    let c = logits.last_dim();
    let mut out = Array::zeros(logits.shape());
    for r in 0..logits.rows() {
        log_softmax_row(logits.row(r), &mut out.data_mut()[r * c..(r + 1) * c]);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::grad_check;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_lp(rng: &mut ChaCha8Rng, n: usize, c: usize) -> Array {
        let raw: Vec<f64> = (0..n * c).map(|_| rng.random_range(-3.0..3.0)).collect();
        normalize_rows(&Array::new(vec![n, c], raw).unwrap())
    }

    fn uniform(n: usize, c: usize) -> Array {
        Array::full(&[n, c], -(c as f64).ln())
    }

    #[test]
    fn uniform_two_frames_single_label() {
        // Paths {aa, a-, -a} out of 9.
        let lp = uniform(2, 3);
        let dp = ctc_loss(&lp, &[1]).unwrap();
        let bf = ctc_loss_bruteforce(&lp, &[1]).unwrap();
        assert!((dp - 3f64.ln()).abs() < 1e-12);
        assert!((bf - 3f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn infeasible_targets_are_errors() {
        let lp = uniform(1, 3);
        assert!(matches!(ctc_loss(&lp, &[1, 2]), Err(Error::InfeasibleTarget { .. })));
        let lp = uniform(2, 3);
        let err = ctc_loss(&lp, &[1, 1]).unwrap_err();
        assert!(matches!(err, Error::InfeasibleTarget { required: 3, frames: 2, .. }), "{err}");
        assert_eq!(ctc_loss_bruteforce(&lp, &[1, 1]).unwrap(), f64::INFINITY);
        assert!(ctc_loss(&uniform(3, 3), &[1, 1]).is_ok());
    }

    #[test]
    fn blank_in_target_is_rejected() {
        assert!(matches!(ctc_loss(&uniform(3, 3), &[0]), Err(Error::Contract(_))));
    }

    #[test]
    fn single_frame_single_label_is_one_path() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let lp = random_lp(&mut rng, 1, 4);
        let bf = ctc_loss_bruteforce(&lp, &[2]).unwrap();
        assert!((bf + lp.data()[2]).abs() < 1e-15);
        assert!((ctc_loss(&lp, &[2]).unwrap() - bf).abs() < 1e-12);
    }

    #[test]
    fn oracle_refuses_large_instances() {
        assert!(matches!(
            ctc_loss_bruteforce(&uniform(9, 3), &[1]),
            Err(Error::OracleBound(_))
        ));
    }

    #[test]
    fn matches_bruteforce_on_random_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        for _ in 0..500 {
            let n = rng.random_range(1..=6);
            let c = rng.random_range(2..=4);
            let len = rng.random_range(0..=n.min(4));
            let target: Vec<usize> = (0..len).map(|_| rng.random_range(1..c)).collect();
            let lp = random_lp(&mut rng, n, c);
            let bf = ctc_loss_bruteforce(&lp, &target).unwrap();
            match ctc_loss(&lp, &target) {
                Ok(dp) => assert!((dp - bf).abs() < 1e-6, "{dp} vs {bf}"),
                Err(Error::InfeasibleTarget { .. }) => assert_eq!(bf, f64::INFINITY),
                Err(e) => panic!("{e}"),
            }
        }
    }

    #[test]
    fn label_sequence_probabilities_sum_to_at_most_one() {
        // Every label sequence over {1, 2} of length <= N.
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for n in 1..=4 {
            let lp = random_lp(&mut rng, n, 3);
            let mut total = 0.0;
            for len in 0..=n {
                for code in 0..(1usize << len) {
                    let target: Vec<usize> = (0..len).map(|i| 1 + ((code >> i) & 1)).collect();
                    if let Ok(l) = ctc_loss(&lp, &target) {
                        total += (-l).exp();
                    }
                }
            }
            assert!(total <= 1.0 + 1e-9, "{total}");
            assert!((total - 1.0).abs() < 1e-9, "all paths are accounted for: {total}");
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let logits = Array::new(vec![4, 3], (0..12).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap();
        let err = grad_check(|x| ctc_loss_tensor(&x[0].log_softmax()?, &[1, 2]), &[logits.clone()], 1e-5).unwrap();
        assert!(err < 1e-4, "{err}");
        // Also directly in log-prob space.
        let lp = normalize_rows(&logits);
        let err = grad_check(|x| ctc_loss_tensor(&x[0], &[2, 2]), &[lp], 1e-5).unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn batch_loss_is_mean_of_utterances() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let a = random_lp(&mut rng, 5, 3);
        let b = random_lp(&mut rng, 5, 3);
        let mut data = a.data().to_vec();
        data.extend_from_slice(b.data());
        let lp = Tensor::variable(Array::new(vec![2, 5, 3], data).unwrap());
        let targets = vec![vec![1, 2], vec![2]];
        let (mean, per) = ctc_loss_batch(&lp, &[5, 3], &targets).unwrap();
        let b3 = Array::new(vec![3, 3], b.data()[..9].to_vec()).unwrap();
        assert!((per[0] - ctc_loss(&a, &[1, 2]).unwrap()).abs() < 1e-12);
        assert!((per[1] - ctc_loss(&b3, &[2]).unwrap()).abs() < 1e-12);
        assert!((mean.item() - (per[0] + per[1]) / 2.0).abs() < 1e-15);
        // Padded frames get no gradient.
        let g = mean.backward().unwrap().wrt(&lp);
        assert!(g.data()[(5 + 3) * 3..].iter().all(|&x| x == 0.0));
    }

    #[test]
    fn greedy_collapse_rules() {
        let onehot = |frames: &[usize]| {
            let mut a = Array::full(&[frames.len(), 3], -10.0);
            for (t, &k) in frames.iter().enumerate() {
                a.data_mut()[t * 3 + k] = 0.0;
            }
            a
        };
        assert_eq!(ctc_greedy_decode(&onehot(&[1, 1, 0, 2])), vec![1, 2]);
        assert_eq!(ctc_greedy_decode(&onehot(&[0, 0, 0])), Vec::<usize>::new());
        assert_eq!(ctc_greedy_decode(&onehot(&[1, 0, 1])), vec![1, 1]);
        // Ties go to the lowest class.
        assert_eq!(ctc_greedy_decode(&uniform(3, 3)), Vec::<usize>::new());
    }

    #[test]
    fn prefix_increments_sum_to_sequence_probability() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for _ in 0..50 {
            let lp = random_lp(&mut rng, 6, 4);
            let target = [1, 3];
            let scorer = CtcPrefixScorer::new(&lp).unwrap();
            let mut state = scorer.initial();
            let mut total = 0.0;
            let mut prev_prefix = 0.0;
            for &k in &target {
                let (s, inc) = scorer.extend(&state, Label::Class(k)).unwrap();
                assert!(s.prefix_score <= prev_prefix + 1e-12, "monotone prefix probability");
                prev_prefix = s.prefix_score;
                total += inc;
                state = s;
            }
            let (_, inc) = scorer.extend(&state, Label::End).unwrap();
            total += inc;
            let loss = ctc_loss(&lp, &target).unwrap();
            assert!((total + loss).abs() < 1e-6, "{total} vs {}", -loss);
        }
    }

    #[test]
    fn empty_prefix_scores_all_blank_paths() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let lp = random_lp(&mut rng, 5, 3);
        let scorer = CtcPrefixScorer::new(&lp).unwrap();
        let (_, inc) = scorer.extend(&scorer.initial(), Label::End).unwrap();
        let bf = ctc_loss_bruteforce(&lp, &[]).unwrap();
        assert!((inc + bf).abs() < 1e-12);
    }

    #[test]
    fn blank_is_not_a_label() {
        let lp = uniform(3, 3);
        let scorer = CtcPrefixScorer::new(&lp).unwrap();
        assert!(matches!(
            scorer.extend(&scorer.initial(), Label::Class(BLANK)),
            Err(Error::Contract(_))
        ));
    }

    proptest! {
        #[test]
        fn greedy_of_onehot_is_its_collapse(path in proptest::collection::vec(0usize..4, 1..12)) {
            let mut lp = Array::full(&[path.len(), 4], -5.0);
            for (t, &k) in path.iter().enumerate() {
                lp.data_mut()[t * 4 + k] = -0.1;
            }
            prop_assert_eq!(ctc_greedy_decode(&lp), collapse(&path));
        }

        #[test]
        fn prefix_states_stay_probabilities(seed in any::<u64>(), labels in proptest::collection::vec(1usize..3, 0..4)) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let lp = random_lp(&mut rng, 5, 3);
            let scorer = CtcPrefixScorer::new(&lp).unwrap();
            let mut state = scorer.initial();
            for k in labels {
                let (next, _) = scorer.extend(&state, Label::Class(k)).unwrap();
                for t in 0..5 {
                    prop_assert!(next.nonblank[t] <= 1e-12 && next.blank[t] <= 1e-12);
                }
                prop_assert!(next.prefix_score <= state.prefix_score + 1e-12);
                state = next;
            }
        }
    }
}
