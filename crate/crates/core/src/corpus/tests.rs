use super::*;

fn small() -> SynthConfig {
    SynthConfig {
        speakers_per_dialect: 5,
        utterances_per_speaker: 20,
        ..SynthConfig::default()
    }
}

fn dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(dir).unwrap().display().to_string();
                out.push((rel, std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn generation_is_byte_identical_across_runs() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    Corpus::generate(&small()).unwrap().write(a.path()).unwrap();
    Corpus::generate(&small()).unwrap().write(b.path()).unwrap();
    let (x, y) = (dir_bytes(a.path()), dir_bytes(b.path()));
    assert_eq!(x.len(), 15 * 20 + 2);
    assert!(x == y);
}

#[test]
fn different_seed_changes_output() {
    let a = Corpus::generate(&small()).unwrap();
    let b = Corpus::generate(&SynthConfig { seed: 8, ..small() }).unwrap();
    assert_ne!(a.utterances[0].features.data(), b.utterances[0].features.data());
}

#[test]
fn reload_matches_memory() {
    let dir = tempfile::tempdir().unwrap();
    let c = Corpus::generate(&small()).unwrap();
    c.write(dir.path()).unwrap();
    let back = load_utterances(&dir.path().join("manifest.jsonl")).unwrap();
    assert_eq!(back.len(), c.utterances.len());
    for (a, b) in c.utterances.iter().zip(&back) {
        assert_eq!(a.record, b.record);
        assert_eq!(a.features.data(), b.features.data());
    }
    let vocab = Vocabulary::load(&dir.path().join("vocab.txt")).unwrap();
    assert_eq!(vocab.len(), 50);
}

#[test]
fn variants_only_appear_in_their_dialect() {
    let c = Corpus::generate(&small()).unwrap();
    let mut used = [false; 3];
    for u in &c.utterances {
        let d = u.record.dialect.index();
        for w in &u.record.text {
            let id = c.vocab.id(w).unwrap();
            for spec in &c.dialects {
                if spec.rules.iter().any(|&(_, v)| v == id) {
                    assert_eq!(spec.dialect.index(), d, "{w} leaked into {}", u.record.id);
                    used[d] = true;
                }
            }
        }
    }
    assert!(used.iter().all(|&u| u));
    let plain = Corpus::generate(&small().without_dialect_cues()).unwrap();
    let reserved = plain.cfg.source_tokens();
    assert!(plain
        .utterances
        .iter()
        .flat_map(|u| &u.record.text)
        .all(|w| plain.vocab.id(w).unwrap() < reserved));
}

#[test]
fn no_self_transitions_and_length_bounds() {
    let c = Corpus::generate(&small()).unwrap();
    for u in &c.utterances {
        let n = u.record.text.len();
        assert!((3..=8).contains(&n));
        let (s, e) = u.record.speech.unwrap();
        assert!(s >= 2 && e <= u.record.frames - 2 && s < e);
    }
}

fn mean_features(x: &Array) -> Vec<f64> {
    let mut m = vec![0.0; x.last_dim()];
    for r in 0..x.rows() {
        for (a, v) in m.iter_mut().zip(x.row(r)) {
            *a += v / x.rows() as f64;
        }
    }
    m
}

/// Nearest-centroid dialect classifier on utterance-mean features, fit on
/// train speakers and scored on test speakers.
fn centroid_accuracy(cfg: &SynthConfig) -> f64 {
    let c = Corpus::generate(cfg).unwrap();
    let records: Vec<_> = c.utterances.iter().map(|u| u.record.clone()).collect();
    let s = split_sets(&records, SplitRatios::default(), 1).unwrap();
    let f = cfg.feature_dim;
    let mut cent = vec![vec![0.0; f]; 3];
    let mut counts = [0usize; 3];
    for &i in &s.train {
        let d = records[i].dialect.index();
        for (a, v) in cent[d].iter_mut().zip(mean_features(&c.utterances[i].features)) {
            *a += v;
        }
        counts[d] += 1;
    }
    for d in 0..3 {
        cent[d].iter_mut().for_each(|v| *v /= counts[d] as f64);
    }
    let held: Vec<usize> = s.valid.iter().chain(&s.test).copied().collect();
    let correct = held
        .iter()
        .filter(|&&i| {
            let m = mean_features(&c.utterances[i].features);
            let dist = |d: usize| cent[d].iter().zip(&m).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
            let best = (0..3).min_by(|&a, &b| dist(a).total_cmp(&dist(b))).unwrap();
            best == records[i].dialect.index()
        })
        .count();
    correct as f64 / held.len() as f64
}

#[test]
fn acoustic_cues_are_separable() {
    let cfg = SynthConfig {
        speakers_per_dialect: 10,
        utterances_per_speaker: 30,
        ..SynthConfig::default()
    };
    assert!(centroid_accuracy(&cfg) > 0.9);
    let chance = centroid_accuracy(&cfg.without_dialect_cues());
    assert!(chance < 0.6, "{chance}");
}

#[test]
fn splits_are_speaker_and_text_disjoint() {
    let c = Corpus::generate(&small()).unwrap();
    let records: Vec<_> = c.utterances.iter().map(|u| u.record.clone()).collect();
    let s = split_sets(&records, SplitRatios::default(), 3).unwrap();
    let sets = [&s.train, &s.valid, &s.test];
    for a in 0..3 {
        for d in Dialect::ALL {
            assert!(sets[a].iter().any(|&i| records[i].dialect == d));
        }
        for b in a + 1..3 {
            let spk: HashSet<_> = sets[a].iter().map(|&i| &records[i].speaker).collect();
            let txt: HashSet<_> = sets[a].iter().map(|&i| &records[i].text).collect();
            for &i in sets[b] {
                assert!(!spk.contains(&records[i].speaker));
                assert!(!txt.contains(&records[i].text));
            }
        }
    }
}

fn record(speaker: &str, dialect: Dialect, text: &str) -> ManifestRecord {
    ManifestRecord {
        id: format!("{speaker}-{text}"),
        speaker: speaker.into(),
        dialect,
        text: text.split(' ').map(String::from).collect(),
        features: String::new(),
        frames: 10,
        speech: None,
    }
}

#[test]
fn shared_text_lands_in_one_set() {
    let mut records = Vec::new();
    for d in Dialect::ALL {
        for s in 0..3 {
            let spk = format!("{}{s}", d.code());
            records.push(record(&spk, d, "same text"));
            records.push(record(&spk, d, &format!("own {s}")));
        }
    }
    let s = split_sets(&records, SplitRatios::default(), 0).unwrap();
    let count = |set: &Vec<usize>| set.iter().filter(|&&i| records[i].text.join(" ") == "same text").count();
    let holders = [&s.train, &s.valid, &s.test].iter().filter(|set| count(set) > 0).count();
    assert_eq!(holders, 1);
}

#[test]
fn too_few_speakers_is_split_error() {
    let records = vec![
        record("a", Dialect::Ul, "x"),
        record("b", Dialect::Ul, "y"),
        record("b", Dialect::Ul, "z"),
    ];
    let err = split_sets(&records, SplitRatios::default(), 0).unwrap_err();
    assert!(matches!(err, Error::Split(_)), "{err}");
}

#[test]
fn speed_perturb_lengths() {
    let x = Array::new(vec![100, 3], (0..300).map(|v| v as f64).collect()).unwrap();
    assert_eq!(speed_perturb(&x, 0.9).unwrap().rows(), 111);
    assert_eq!(speed_perturb(&x, 1.1).unwrap().rows(), 91);
    let same = speed_perturb(&x, 1.0).unwrap();
    assert_eq!(same.data(), x.data());
    let y = speed_perturb(&x, 0.5).unwrap();
    assert_eq!(y.row(1), &[1.5, 2.5, 3.5]);
    assert!(speed_perturb(&x, 0.0).is_err());
}

#[test]
fn spec_augment_masks_one_band_with_mean() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let x = Array::new(vec![100, 4], gaussian(&mut rng, 400, 1.0)).unwrap();
    let cfg = SpecAugmentConfig {
        time_masks: 1,
        time_width: 10,
        freq_masks: 0,
        freq_width: 0,
    };
    let y = spec_augment(&x, &cfg, 5);
    let mean = mean_features(&x);
    let changed: Vec<usize> = (0..100).filter(|&r| y.row(r) != x.row(r)).collect();
    assert_eq!(changed.len(), 10);
    assert_eq!(changed[9] - changed[0], 9);
    for &r in &changed {
        for (a, b) in y.row(r).iter().zip(&mean) {
            assert!((a - b).abs() < 1e-12);
        }
    }
    let freq = SpecAugmentConfig {
        time_masks: 0,
        time_width: 0,
        freq_masks: 1,
        freq_width: 2,
    };
    let z = spec_augment(&x, &freq, 5);
    let cols: Vec<usize> = (0..4).filter(|&j| (0..100).any(|r| z.row(r)[j] != x.row(r)[j])).collect();
    assert_eq!(cols.len(), 2);
}

#[test]
fn corrupt_inputs_report_location() {
    let dir = tempfile::tempdir().unwrap();
    let feat = dir.path().join("bad.feat");
    std::fs::write(&feat, b"FEAT1\x02\0\0\0\0\0\0\0\x02\0\0\0\0\0\0\0abc").unwrap();
    assert!(matches!(read_features(&feat), Err(Error::Format { .. })));
    let manifest = dir.path().join("m.jsonl");
    let good = serde_json::to_string(&record("s", Dialect::Co, "a b")).unwrap();
    std::fs::write(&manifest, format!("{good}\n{{\"id\": 3}}\n")).unwrap();
    match read_manifest(&manifest) {
        Err(Error::Corpus { line, .. }) => assert_eq!(line, 2),
        other => panic!("{other:?}"),
    }
}

#[test]
fn invalid_config_rejected() {
    let cfg = SynthConfig {
        vocab_size: 10,
        ..SynthConfig::default()
    };
    assert!(matches!(Corpus::generate(&cfg), Err(Error::Config(_))));
}
