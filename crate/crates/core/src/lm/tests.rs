use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::corpus::{dialect_specs, SynthConfig, TextSampler};

fn vocab() -> Vocabulary {
    let words: Vec<String> = (0..12).map(|i| format!("w{i:02}")).collect();
    Vocabulary::new(&words).unwrap().extend_with_tags().unwrap()
}

fn small_cfg() -> LmConfig {
    LmConfig {
        num_blocks: 1,
        dim: 16,
        heads: 2,
        ff_units: 32,
        context: 16,
        dropout: 0.0,
    }
}

fn train_cfg(steps: usize) -> LmTrainConfig {
    LmTrainConfig {
        steps,
        batch: 16,
        seed: 3,
        optim: OptimConfig {
            peak_lr: 5e-3,
            warmup_steps: 20,
            ..OptimConfig::default()
        },
    }
}

fn random_seqs(seed: u64, n: usize, v: &Vocabulary) -> Vec<Vec<usize>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| (0..rng.random_range(1..6)).map(|_| rng.random_range(0..v.base_len())).collect())
        .collect()
}

#[test]
fn uniform_model_has_perplexity_equal_to_class_count() {
    let v = vocab();
    let mut lm = Lm::new(small_cfg(), v.clone(), 1).unwrap();
    let out = lm.net.out.clone();
    lm.store.value_mut(out.w).data_mut().fill(0.0);
    lm.store.value_mut(out.b.unwrap()).data_mut().fill(0.0);
    let seqs = random_seqs(1, 20, &v);
    let c = v.output_classes() as f64;
    assert!((lm.perplexity(&seqs).unwrap() - c).abs() < 1e-9);
    assert!((lm.perplexity_chain(&seqs).unwrap() - c).abs() < 1e-9);
}

#[test]
fn perplexity_two_ways_agree() {
    let v = vocab();
    let lm = Lm::new(small_cfg(), v.clone(), 2).unwrap();
    let seqs = random_seqs(2, 30, &v);
    let a = lm.perplexity(&seqs).unwrap();
    let b = lm.perplexity_chain(&seqs).unwrap();
    assert!((a - b).abs() < 1e-9, "{a} vs {b}");
}

#[test]
fn prefix_scores_are_distributions_and_chain() {
    let v = vocab();
    let lm = Lm::new(small_cfg(), v.clone(), 3).unwrap();
    let seq = vec![v.tag_id(Dialect::Co).unwrap(), 1, 4, 4, 7];
    let mut chain = 0.0;
    for k in 0..=seq.len() {
        let lp = lm.score_prefix(&seq[..k]).unwrap();
        assert_eq!(lp.len(), v.output_classes());
        assert!((lp.iter().map(|x| x.exp()).sum::<f64>() - 1.0).abs() < 1e-12);
        assert_eq!(lp, lm.score_prefix(&seq[..k]).unwrap());
        chain += lp[if k < seq.len() { seq[k] } else { v.eos() }];
    }
    let full = lm.log_likelihoods(&[&seq]).unwrap()[0];
    assert!((chain - full).abs() < 1e-9);
    let batched = lm.score_prefixes(&[&seq[..2], &seq[..4]]).unwrap();
    let single = lm.score_prefix(&seq[..2]).unwrap();
    for (a, b) in batched[0].iter().zip(&single) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn overlong_prefix_is_context_error() {
    let v = vocab();
    let lm = Lm::new(small_cfg(), v, 3).unwrap();
    assert!(lm.score_prefix(&[0; 15]).is_ok());
    assert!(matches!(
        lm.score_prefix(&[0; 16]),
        Err(Error::Context { len: 17, context: 16 })
    ));
}

#[test]
fn corpus_parsing_reports_lines() {
    let v = vocab();
    let c = TextCorpus::parse(&v, "w01 w02\n\n[CO] w03\n").unwrap();
    assert_eq!(c.len(), 2);
    assert_eq!(c.sentences[1].line, 3);
    assert_eq!(c.sentences[1].dialect, Some(Dialect::Co));
    assert_eq!(c.render(&v).unwrap(), "w01 w02\n[CO] w03\n");
    for (text, line) in [("w01\nw01 zz\n", 2), ("[XX] w01\n", 1), ("w01 [UL] w02\n", 1), ("w01\n[MU]\n", 2)] {
        match TextCorpus::parse(&v, text) {
            Err(Error::Corpus { line: l, .. }) => assert_eq!(l, line, "{text:?}"),
            other => panic!("{text:?}: {other:?}"),
        }
    }
}

#[test]
fn cleaning_filters_and_dedups() {
    let v = vocab();
    let (c, stats) = TextCorpus::clean(&v, "w01 w02\nw01 zz\nw01 w02\n[UL] w01 w02\n");
    assert_eq!(c.len(), 2);
    assert_eq!(
        stats,
        CleanStats {
            kept: 2,
            out_of_vocabulary: 1,
            duplicates: 1
        }
    );
}

#[test]
fn stage_contracts() {
    let v = vocab();
    let mut lm = Lm::new(small_cfg(), v.clone(), 1).unwrap();
    let tagged = TextCorpus::parse(&v, "w01\n[UL] w02\n").unwrap();
    assert!(matches!(
        train_lm(&mut lm, &tagged, &train_cfg(1)),
        Err(Error::Corpus { line: 2, .. })
    ));
    let plain = TextCorpus::parse(&v, "[UL] w01\nw02\n").unwrap();
    assert!(matches!(
        finetune_lm(&mut lm, &plain, &train_cfg(1)),
        Err(Error::Corpus { line: 2, .. })
    ));
    assert!(matches!(
        finetune_lm(&mut lm, &TextCorpus::default(), &train_cfg(1)),
        Err(Error::Corpus { .. })
    ));
    assert!(Lm::new(small_cfg(), Vocabulary::new(&["a"]).unwrap(), 0).is_err());
}

#[test]
fn repeated_sentence_is_memorized() {
    let v = vocab();
    let mut lm = Lm::new(small_cfg(), v.clone(), 4).unwrap();
    let corpus = TextCorpus::parse(&v, &"w03 w07 w01 w09\n".repeat(8)).unwrap();
    train_lm(&mut lm, &corpus, &train_cfg(150)).unwrap();
    let ppl = lm.perplexity(&[vec![3, 7, 1, 9]]).unwrap();
    assert!(ppl < 1.1, "{ppl}");
}

fn synth_text(seed: u64, n: usize, tagged: bool) -> (Vocabulary, TextCorpus) {
    let cfg = SynthConfig::default();
    let specs = dialect_specs(&cfg).unwrap();
    let sampler = TextSampler::new(&cfg, &specs);
    let words: Vec<String> = (0..cfg.vocab_size).map(crate::corpus::token_name).collect();
    let v = Vocabulary::new(&words).unwrap().extend_with_tags().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sentences = (0..n)
        .map(|i| {
            let d = Dialect::ALL[i % 3];
            Sentence {
                line: i + 1,
                dialect: tagged.then_some(d),
                tokens: sampler.sample(&mut rng, d),
            }
        })
        .collect();
    (v, TextCorpus { sentences })
}

#[test]
fn training_lowers_perplexity_and_is_deterministic() {
    let (v, corpus) = synth_text(1, 600, false);
    let (_, held) = synth_text(2, 100, false);
    let held = held.sequences(&v).unwrap();
    let cfg = LmConfig {
        context: 16,
        ..small_cfg()
    };
    let mut a = Lm::new(cfg.clone(), v.clone(), 5).unwrap();
    let before = a.perplexity(&held).unwrap();
    train_lm(&mut a, &corpus, &train_cfg(200)).unwrap();
    let after = a.perplexity(&held).unwrap();
    assert!(after < before, "{after} vs {before}");
    let mut b = Lm::new(cfg, v, 5).unwrap();
    train_lm(&mut b, &corpus, &train_cfg(200)).unwrap();
    assert_eq!(after.to_bits(), b.perplexity(&held).unwrap().to_bits());
}

#[test]
fn finetuning_learns_tag_prior() {
    let (v, plain) = synth_text(3, 600, false);
    let (_, tagged) = synth_text(4, 600, true);
    let (_, held) = synth_text(5, 150, true);
    let held = held.sequences(&v).unwrap();
    let mut lm = Lm::new(small_cfg(), v.clone(), 6).unwrap();
    train_lm(&mut lm, &plain, &train_cfg(300)).unwrap();
    let stage1 = lm.perplexity(&held).unwrap();
    let shapes: Vec<Vec<usize>> = lm.store.named_values().map(|(_, a)| a.shape().to_vec()).collect();
    finetune_lm(&mut lm, &tagged, &train_cfg(300)).unwrap();
    let stage2 = lm.perplexity(&held).unwrap();
    assert!(stage2 < 0.9 * stage1, "{stage2} vs {stage1}");
    let after: Vec<Vec<usize>> = lm.store.named_values().map(|(_, a)| a.shape().to_vec()).collect();
    assert_eq!(shapes, after);

    let first = lm.score_prefix(&[]).unwrap();
    for d in Dialect::ALL {
        let p = first[v.tag_id(d).unwrap()].exp();
        assert!((p - 1.0 / 3.0).abs() < 0.05, "{d}: {p}");
    }
    let dir = tempfile::tempdir().unwrap();
    lm.save(dir.path()).unwrap();
    let back = Lm::load(dir.path()).unwrap();
    let x = back.score_prefix(&[1, 2]).unwrap();
    let y = lm.score_prefix(&[1, 2]).unwrap();
    for (a, b) in x.iter().zip(&y) {
        assert!((a - b).abs() < 1e-4);
    }
}

#[test]
fn dialect_marker_word_follows_its_tag() {
    let v = vocab();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut text = String::new();
    for i in 0..300 {
        let d = Dialect::ALL[i % 3];
        text.push_str(&d.tag());
        if d == Dialect::Co && rng.random_bool(0.5) {
            text.push_str(" w11");
        }
        for _ in 0..rng.random_range(1..5) {
            text.push_str(&format!(" w{:02}", rng.random_range(0..10)));
        }
        text.push('\n');
    }
    let corpus = TextCorpus::parse(&v, &text).unwrap();
    let mut lm = Lm::new(small_cfg(), v.clone(), 9).unwrap();
    finetune_lm(&mut lm, &corpus, &train_cfg(200)).unwrap();
    let marker = v.id("w11").unwrap();
    let co = lm.score_prefix(&[v.tag_id(Dialect::Co).unwrap()]).unwrap();
    let ul = lm.score_prefix(&[v.tag_id(Dialect::Ul).unwrap()]).unwrap();
    assert!(co[marker] > ul[marker] + 1.0, "{} vs {}", co[marker], ul[marker]);
}
