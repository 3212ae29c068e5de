use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::*;
use crate::ctc::normalize_rows;
use crate::model::ModelConfig;

const NEG: f64 = -1e9;

fn random_lp(seed: u64, n: usize, c: usize) -> Array {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x: Vec<f64> = (0..n * c)
        .map(|_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            2.0 * z
        })
        .collect();
    normalize_rows(&Array::new(vec![n, c], x).unwrap())
}

/// Log-posteriors that put all mass on `frames[t]`.
fn one_hot(classes: usize, frames: &[usize]) -> Array {
    let mut data = vec![NEG; frames.len() * classes];
    for (t, &k) in frames.iter().enumerate() {
        data[t * classes + k] = 0.0;
    }
    Array::new(vec![frames.len(), classes], data).unwrap()
}

/// All monotone state sequences ending at `j_max`, scored with the same
/// transitions as the trellis.
fn exhaustive(lp: &Array, tokens: &[usize]) -> (f64, Vec<usize>) {
    let n = lp.rows();
    let mut best = (f64::NEG_INFINITY, Vec::new());
    for mask in 0u32..(1 << n) {
        if mask.count_ones() as usize != tokens.len() {
            continue;
        }
        let mut j = 0;
        let mut score = 0.0;
        let mut frames = Vec::new();
        for t in 0..n {
            let row = lp.row(t);
            if mask & (1 << t) != 0 {
                score += row[tokens[j]];
                frames.push(t);
                j += 1;
            } else if j == 0 {
                score += row[BLANK];
            } else {
                score += row[BLANK].max(row[tokens[j - 1]]);
            }
        }
        if score > best.0 {
            best = (score, frames);
        }
    }
    best
}

#[test]
fn trellis_matches_exhaustive_paths() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for seed in 0..300 {
        let n = rng.random_range(1..=6);
        let j = rng.random_range(1..=3.min(n));
        let tokens: Vec<usize> = (0..j).map(|_| rng.random_range(1..4)).collect();
        let lp = random_lp(seed, n, 4);
        let tr = build_trellis(&lp, &tokens).unwrap();
        let al = backtrack(&tr);
        let (score, frames) = exhaustive(&lp, &tokens);
        assert!((tr.best_score() - score).abs() < 1e-9, "seed {seed}");
        assert_eq!(al.token_frames, frames, "seed {seed}");
        assert_eq!(al.states.last(), Some(&j));
        assert!(al.states.windows(2).all(|w| w[1] >= w[0] && w[1] - w[0] <= 1));
    }
}

#[test]
fn path_score_equals_best_score() {
    let lp = random_lp(3, 12, 5);
    let tokens = [2, 4, 4, 1];
    let tr = build_trellis(&lp, &tokens).unwrap();
    let al = backtrack(&tr);
    let mut score = 0.0;
    let mut prev = 0;
    for (t, &j) in al.states.iter().enumerate() {
        let row = lp.row(t);
        score += if j > prev {
            row[tokens[j - 1]]
        } else if j == 0 {
            row[BLANK]
        } else {
            row[BLANK].max(row[tokens[j - 1]])
        };
        prev = j;
    }
    assert!((score - al.score).abs() < 1e-12);
    for t in 1..=12 {
        for j in 0..=4 {
            assert!(tr.score(t, j) <= tr.score(t - 1, j).max(if j > 0 { tr.score(t - 1, j - 1) } else { f64::NEG_INFINITY }) + 1e-12);
        }
    }
}

#[test]
fn one_hot_posteriors_give_exact_frames() {
    let lp = one_hot(4, &[0, 1, 0, 0, 2, 0, 0, 3, 0]);
    let tr = build_trellis(&lp, &[1, 2, 3]).unwrap();
    assert_eq!(tr.best_score(), 0.0);
    let al = backtrack(&tr);
    assert_eq!(al.token_frames, vec![1, 4, 7]);
    assert_eq!(al.token_ends, vec![1, 4, 7]);
    assert_eq!(confidence(&lp, &[1, 2, 3], &al.token_frames, 3), 1.0);
}

#[test]
fn peak_and_tie_timing() {
    let p = |a: f64| [(1.0 - a).ln(), a.ln()];
    let rows: Vec<f64> = [p(0.2), p(0.3), p(0.9)].concat();
    let lp = Array::new(vec![3, 2], rows).unwrap();
    assert_eq!(backtrack(&build_trellis(&lp, &[1]).unwrap()).token_frames, vec![2]);
    let flat = Array::full(&[5, 3], -(3f64).ln());
    assert_eq!(backtrack(&build_trellis(&flat, &[1, 2]).unwrap()).token_frames, vec![0, 1]);
}

#[test]
fn infeasible_inputs() {
    let blank_only = Array::new(vec![3, 2], vec![0.0, f64::NEG_INFINITY].repeat(3)).unwrap();
    assert!(matches!(
        build_trellis(&blank_only, &[1]),
        Err(Error::AlignmentInfeasible(_))
    ));
    let lp = random_lp(1, 2, 3);
    assert!(matches!(build_trellis(&lp, &[1, 2, 1]), Err(Error::AlignmentInfeasible(_))));
    assert!(matches!(build_trellis(&lp, &[0]), Err(Error::Contract(_))));
}

#[test]
fn confidence_window_minimum() {
    let mut lp = one_hot(3, &[1, 2, 1, 2]);
    lp.data_mut()[3 + 2] = 0.1f64.ln();
    let c = confidence(&lp, &[1, 2, 1, 2], &[0, 1, 2, 3], 1);
    assert!((c - 0.1).abs() < 1e-12);
    let c3 = confidence(&lp, &[1, 2, 1, 2], &[0, 1, 2, 3], 3);
    assert!((c3 - (0.1f64.ln() / 3.0).exp()).abs() < 1e-12);
}

fn vocab() -> Vocabulary {
    Vocabulary::new(&["a", "b", "c", "d"]).unwrap().extend_with_tags().unwrap()
}

/// Frames for utterances separated by blank gaps of `gap` frames; each token
/// lasts two frames.
fn stream(utts: &[Vec<usize>], gap: usize) -> (Vec<usize>, Vec<usize>) {
    let mut frames = vec![0; gap];
    let mut truth = Vec::new();
    for (k, u) in utts.iter().enumerate() {
        if k > 0 {
            truth.push(frames.len() - gap / 2);
        }
        for &t in u {
            frames.extend([t + 1, t + 1]);
            frames.push(0);
        }
        frames.extend(std::iter::repeat_n(0, gap - 1));
    }
    (frames, truth)
}

fn texts(utts: &[Vec<usize>]) -> Vec<UtteranceText> {
    utts.iter()
        .enumerate()
        .map(|(i, t)| UtteranceText {
            id: format!("u{i}"),
            tokens: t.clone(),
        })
        .collect()
}

#[test]
fn segments_are_ordered_and_split_gaps() {
    let v = vocab();
    let utts = vec![vec![0, 1], vec![2, 2, 3], vec![1], vec![3, 0], vec![2, 1, 0]];
    let (frames, truth) = stream(&utts, 8);
    let c = v.ctc_classes();
    let mut lp = one_hot(c, &frames);
    for x in lp.data_mut() {
        *x = if *x == 0.0 { (0.9f64).ln() } else { (0.1 / (c - 1) as f64).ln() };
    }
    let segs = segment_utterances(&v, &lp, &texts(&utts), 3).unwrap();
    assert_eq!(segs.len(), 5);
    for (k, s) in segs.iter().enumerate() {
        assert_eq!(s.id, format!("u{k}"));
        assert!(s.start_frame < s.end_frame && s.end_frame <= frames.len());
        assert!(s.confidence > 0.8);
    }
    assert_eq!(segs[1].text, "c c d");
    for (w, t) in segs.windows(2).zip(&truth) {
        assert_eq!(w[0].end_frame, w[1].start_frame);
        assert!(w[0].end_frame.abs_diff(*t) <= 1, "{} vs {t}", w[0].end_frame);
    }
}

#[test]
fn corrupted_middle_utterance_scores_lowest() {
    let v = vocab();
    let utts = vec![vec![0, 1, 2], vec![3, 0, 1], vec![2, 3, 0]];
    let (frames, _) = stream(&utts, 6);
    let c = v.ctc_classes();
    let mut lp = one_hot(c, &frames);
    for x in lp.data_mut() {
        *x = if *x == 0.0 { (0.9f64).ln() } else { (0.1 / (c - 1) as f64).ln() };
    }
    let mut claimed = texts(&utts);
    claimed[1].tokens = vec![1, 3, 2];
    let segs = segment_utterances(&v, &lp, &claimed, 3).unwrap();
    assert!(segs[1].confidence < segs[0].confidence);
    assert!(segs[1].confidence < segs[2].confidence);
}

fn aligner() -> Model {
    Model::new(ModelConfig::aligner(3), vocab(), 4).unwrap()
}

fn features(seed: u64, frames: usize) -> Array {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Array::new(
        vec![frames, 3],
        (0..frames * 3)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                z
            })
            .collect(),
    )
    .unwrap()
}

#[test]
fn partitioned_inference_matches_direct() {
    let model = aligner();
    let x = features(1, 4 * 80 - 3);
    let direct = model.encode(&x).unwrap().ctc_log_probs;
    let same = partition_infer(&model, &x, 80, 10).unwrap();
    assert_eq!(same.data(), direct.data());
    for (max, overlap) in [(40, 10), (25, 10), (33, 12)] {
        let part = partition_infer(&model, &x, max, overlap).unwrap();
        assert_eq!(part.shape(), direct.shape());
        let diff = part
            .data()
            .iter()
            .zip(direct.data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(diff < 1e-9, "max {max}: {diff}");
    }
    assert!(matches!(partition_infer(&model, &x, 20, 10), Err(Error::Config(_))));
}

#[test]
fn threshold_filters_segments() {
    let model = aligner();
    let x = features(2, 120);
    let utts = texts(&[vec![0, 1], vec![2, 3, 1], vec![0]]);
    let keep = SegmentConfig {
        threshold: 0.0,
        ..SegmentConfig::default()
    };
    assert_eq!(align_corpus(&model, &x, &utts, &keep).unwrap().len(), 3);
    let drop = SegmentConfig {
        threshold: 1.1,
        ..SegmentConfig::default()
    };
    assert!(align_corpus(&model, &x, &utts, &drop).unwrap().is_empty());
    assert!(align_corpus(&model, &x, &[], &keep).is_err());
}
