//! Deterministic synthetic multi-dialect corpus with speaker/text-disjoint
//! splits, plus speed perturbation and SpecAugment.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::Array;
use crate::error::{Error, Result};
use crate::vocab::{Dialect, Vocabulary};

pub const FEATURE_MAGIC: &[u8; 5] = b"FEAT1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub seed: u64,
    pub speakers_per_dialect: usize,
    pub utterances_per_speaker: usize,
    pub vocab_size: usize,
    /// Dialect-variant tokens reserved per dialect at the end of the
    /// vocabulary.
    pub variants_per_dialect: usize,
    pub feature_dim: usize,
    pub frames_per_token: usize,
    pub min_tokens: usize,
    pub max_tokens: usize,
    pub noise: f64,
    pub speaker_scale: f64,
    /// Standard deviation of each dialect's acoustic offset components.
    pub dialect_offset: f64,
    /// Probability that a rule source token is replaced by its variant.
    pub p_lex: f64,
    /// Duration multipliers are `1 - s`, `1`, `1 + s`.
    pub duration_spread: f64,
    pub max_silence: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            speakers_per_dialect: 10,
            utterances_per_speaker: 200,
            vocab_size: 50,
            variants_per_dialect: 4,
            feature_dim: 16,
            frames_per_token: 8,
            min_tokens: 3,
            max_tokens: 8,
            noise: 0.4,
            speaker_scale: 0.2,
            dialect_offset: 0.5,
            p_lex: 0.5,
            duration_spread: 0.1,
            max_silence: 6,
        }
    }
}

impl SynthConfig {
    /// Same corpus shape with every dialect cue switched off.
    pub fn without_dialect_cues(&self) -> Self {
        Self {
            p_lex: 0.0,
            dialect_offset: 0.0,
            duration_spread: 0.0,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("speakers_per_dialect", self.speakers_per_dialect),
            ("utterances_per_speaker", self.utterances_per_speaker),
            ("vocab_size", self.vocab_size),
            ("feature_dim", self.feature_dim),
            ("frames_per_token", self.frames_per_token),
            ("min_tokens", self.min_tokens),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if self.max_tokens < self.min_tokens {
            return Err(Error::Config("max_tokens < min_tokens".into()));
        }
        let reserved = 3 * self.variants_per_dialect;
        if self.vocab_size < reserved + self.variants_per_dialect.max(1) + 2 {
            return Err(Error::Config(format!(
                "vocab_size {} too small for {} variant tokens per dialect",
                self.vocab_size, self.variants_per_dialect
            )));
        }
        for (name, v) in [
            ("noise", self.noise),
            ("speaker_scale", self.speaker_scale),
            ("dialect_offset", self.dialect_offset),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be non-negative")));
            }
        }
        if !(0.0..=1.0).contains(&self.p_lex) {
            return Err(Error::Config("p_lex outside [0, 1]".into()));
        }
        if !(0.0..0.5).contains(&self.duration_spread) {
            return Err(Error::Config("duration_spread outside [0, 0.5)".into()));
        }
        Ok(())
    }

    /// Tokens the bigram source can emit.
    pub fn source_tokens(&self) -> usize {
        self.vocab_size - 3 * self.variants_per_dialect
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DialectSpec {
    pub dialect: Dialect,
    /// `(source token, variant token)`.
    pub rules: Vec<(usize, usize)>,
    pub offset: Vec<f64>,
    pub duration: f64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub id: String,
    pub speaker: String,
    pub dialect: Dialect,
    pub text: Vec<String>,
    pub features: String,
    pub frames: usize,
    /// Input frames `[start, end)` covered by speech.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub speech: Option<(usize, usize)>,
}

#[derive(Clone, Debug)]
pub struct Utterance {
    pub record: ManifestRecord,
    /// `[T, F]`.
    pub features: Array,
}

/// Bigram text source with per-dialect lexical substitution.
#[derive(Clone, Debug)]
pub struct TextSampler {
    transitions: Vec<Vec<f64>>,
    min_tokens: usize,
    max_tokens: usize,
    p_lex: f64,
    rules: Vec<HashMap<usize, usize>>,
}

impl TextSampler {
    pub fn new(cfg: &SynthConfig, dialects: &[DialectSpec]) -> Self {
        let n = cfg.source_tokens();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(1);
        let transitions = (0..n)
            .map(|i| {
                let mut row: Vec<f64> = (0..n)
                    .map(|j| {
                        let e: f64 = Exp1.sample(&mut rng);
                        if i == j { 0.0 } else { e * e }
                    })
                    .collect();
                let s: f64 = row.iter().sum();
                row.iter_mut().for_each(|v| *v /= s);
                row
            })
            .collect();
        Self {
            transitions,
            min_tokens: cfg.min_tokens,
            max_tokens: cfg.max_tokens,
            p_lex: cfg.p_lex,
            rules: dialects.iter().map(|d| d.rules.iter().copied().collect()).collect(),
        }
    }

    /// Source text before any dialect substitution.
    pub fn sample_plain<R: Rng>(&self, rng: &mut R) -> Vec<usize> {
        let n = self.transitions.len();
        let len = rng.random_range(self.min_tokens..=self.max_tokens);
        let mut out = vec![rng.random_range(0..n)];
        while out.len() < len {
            let row = &self.transitions[*out.last().unwrap()];
            let u: f64 = rng.random();
            let mut acc = 0.0;
            let mut next = n - 1;
            for (j, p) in row.iter().enumerate() {
                acc += p;
                if u < acc {
                    next = j;
                    break;
                }
            }
            out.push(next);
        }
        out
    }

    pub fn apply_dialect<R: Rng>(&self, rng: &mut R, text: &[usize], dialect: Dialect) -> Vec<usize> {
        let rules = &self.rules[dialect.index()];
        text.iter()
            .map(|t| match rules.get(t) {
                Some(&v) if rng.random::<f64>() < self.p_lex => v,
                _ => *t,
            })
            .collect()
    }

    pub fn sample<R: Rng>(&self, rng: &mut R, dialect: Dialect) -> Vec<usize> {
        let plain = self.sample_plain(rng);
        self.apply_dialect(rng, &plain, dialect)
    }
}

pub struct Corpus {
    pub cfg: SynthConfig,
    /// Base vocabulary (no tags).
    pub vocab: Vocabulary,
    pub dialects: Vec<DialectSpec>,
    pub sampler: TextSampler,
    pub utterances: Vec<Utterance>,
    prototypes: Vec<Vec<f64>>,
    speakers: BTreeMap<String, (Dialect, Vec<f64>)>,
}

fn gaussian<R: Rng>(rng: &mut R, n: usize, scale: f64) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            z * scale
        })
        .collect()
}

pub fn token_name(i: usize) -> String {
    format!("w{i:02}")
}

pub fn dialect_specs(cfg: &SynthConfig) -> Result<Vec<DialectSpec>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(2);
    let k = cfg.variants_per_dialect;
    let first_variant = cfg.source_tokens();
    Ok(Dialect::ALL
        .iter()
        .enumerate()
        .map(|(d, &dialect)| DialectSpec {
            dialect,
            rules: (0..k).map(|i| (i, first_variant + d * k + i)).collect(),
            offset: gaussian(&mut rng, cfg.feature_dim, cfg.dialect_offset),
            duration: 1.0 + cfg.duration_spread * (d as f64 - 1.0),
        })
        .collect())
}

fn round_f32(v: f64) -> f64 {
    v as f32 as f64
}

impl Corpus {
    pub fn generate(cfg: &SynthConfig) -> Result<Self> {
        let dialects = dialect_specs(cfg)?;
        let names: Vec<String> = (0..cfg.vocab_size).map(token_name).collect();
        let vocab = Vocabulary::new(&names)?;
        let sampler = TextSampler::new(cfg, &dialects);
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(3);
        // Prototype 0 is silence.
        let mut prototypes = vec![vec![0.0; cfg.feature_dim]];
        prototypes.extend((0..cfg.vocab_size).map(|_| gaussian(&mut rng, cfg.feature_dim, 1.0)));
        let mut speakers = BTreeMap::new();
        for d in Dialect::ALL {
            for s in 0..cfg.speakers_per_dialect {
                let name = format!("{}-spk{s:02}", d.code().to_lowercase());
                speakers.insert(name, (d, gaussian(&mut rng, cfg.feature_dim, cfg.speaker_scale)));
            }
        }
        let mut corpus = Self {
            cfg: cfg.clone(),
            vocab,
            dialects,
            sampler,
            utterances: Vec::new(),
            prototypes,
            speakers,
        };
        let mut index = 0u64;
        let speaker_names: Vec<String> = corpus.speakers.keys().cloned().collect();
        let mut utterances = Vec::with_capacity(speaker_names.len() * cfg.utterances_per_speaker);
        for spk in &speaker_names {
            for u in 0..cfg.utterances_per_speaker {
                index += 1;
                let mut urng = ChaCha8Rng::seed_from_u64(cfg.seed);
                urng.set_stream(1000 + index);
                let dialect = corpus.speakers[spk].0;
                let text = corpus.sampler.sample(&mut urng, dialect);
                let id = format!("{spk}-{u:04}");
                utterances.push(corpus.render(&mut urng, id, spk, &text)?);
            }
        }
        corpus.utterances = utterances;
        Ok(corpus)
    }

    /// Acoustic rendering of a token sequence for a speaker.
    pub fn render<R: Rng>(&self, rng: &mut R, id: String, speaker: &str, text: &[usize]) -> Result<Utterance> {
        let cfg = &self.cfg;
        let (dialect, spk_offset) = self
            .speakers
            .get(speaker)
            .ok_or_else(|| Error::Corpus {
                line: 0,
                detail: format!("unknown speaker {speaker}"),
            })?;
        let spec = &self.dialects[dialect.index()];
        let f = cfg.feature_dim;
        let mut frames: Vec<usize> = Vec::new();
        let lead = rng.random_range(2..=cfg.max_silence.max(2));
        frames.extend(std::iter::repeat_n(0, lead));
        for &t in text {
            let jitter = rng.random_range(0.8..1.2);
            let n = ((cfg.frames_per_token as f64 * spec.duration * jitter).round() as usize).max(2);
            frames.extend(std::iter::repeat_n(t + 1, n));
        }
        let speech_end = frames.len();
        let trail = rng.random_range(2..=cfg.max_silence.max(2));
        frames.extend(std::iter::repeat_n(0, trail));
        let mut data = Vec::with_capacity(frames.len() * f);
        for &p in &frames {
            for j in 0..f {
                let z: f64 = StandardNormal.sample(rng);
                let v = self.prototypes[p][j] + spk_offset[j] + spec.offset[j] + cfg.noise * z;
                data.push(round_f32(v));
            }
        }
        let words = text.iter().map(|&t| token_name(t)).collect();
        let n = frames.len();
        Ok(Utterance {
            record: ManifestRecord {
                features: format!("feats/{id}.feat"),
                id,
                speaker: speaker.to_string(),
                dialect: *dialect,
                text: words,
                frames: n,
                speech: Some((lead, speech_end)),
            },
            features: Array::new(vec![n, f], data)?,
        })
    }

    pub fn speakers(&self) -> impl Iterator<Item = (&str, Dialect)> {
        self.speakers.iter().map(|(k, (d, _))| (k.as_str(), *d))
    }

    /// Writes `manifest.jsonl`, `vocab.txt` and one feature file per
    /// utterance under `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir.join("feats"))?;
        for u in &self.utterances {
            write_features(&dir.join(&u.record.features), &u.features)?;
        }
        let records: Vec<&ManifestRecord> = self.utterances.iter().map(|u| &u.record).collect();
        write_manifest(&dir.join("manifest.jsonl"), records)?;
        self.vocab.save(&dir.join("vocab.txt"))
    }
}

pub fn write_features(path: &Path, x: &Array) -> Result<()> {
    if x.rank() != 2 {
        return Err(Error::dim("write_features", format!("{:?}", x.shape())));
    }
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(FEATURE_MAGIC)?;
    w.write_all(&(x.rows() as u64).to_le_bytes())?;
    w.write_all(&(x.last_dim() as u64).to_le_bytes())?;
    for &v in x.data() {
        w.write_all(&(v as f32).to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_features(path: &Path) -> Result<Array> {
    let bad = |detail: String| Error::Format {
        path: path.to_path_buf(),
        detail,
    };
    let mut bytes = Vec::new();
    File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() < 21 || &bytes[..5] != FEATURE_MAGIC {
        return Err(bad("missing FEAT1 header".into()));
    }
    let frames = u64::from_le_bytes(bytes[5..13].try_into().unwrap()) as usize;
    let dim = u64::from_le_bytes(bytes[13..21].try_into().unwrap()) as usize;
    let payload = &bytes[21..];
    if payload.len() != frames * dim * 4 {
        return Err(bad(format!("{} payload bytes for {frames}x{dim}", payload.len())));
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    Array::new(vec![frames, dim], data)
}

pub fn write_manifest<'a>(path: &Path, records: impl IntoIterator<Item = &'a ManifestRecord>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestRecord>> {
    let r = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Corpus {
            line: i + 1,
            detail: e.to_string(),
        })?);
    }
    Ok(out)
}

/// Loads the features of every record, resolving paths against the
/// manifest's directory and checking frame counts.
pub fn load_utterances(manifest: &Path) -> Result<Vec<Utterance>> {
    let base: PathBuf = manifest.parent().map(Path::to_path_buf).unwrap_or_default();
    read_manifest(manifest)?
        .into_iter()
        .map(|record| {
            let path = base.join(&record.features);
            let features = read_features(&path)?;
            if features.rows() != record.frames {
                return Err(Error::Format {
                    path,
                    detail: format!("{} frames, manifest says {}", features.rows(), record.frames),
                });
            }
            Ok(Utterance { record, features })
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitRatios {
    pub train: f64,
    pub valid: f64,
    pub test: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        Self {
            train: 0.8,
            valid: 0.1,
            test: 0.1,
        }
    }
}

/// Indices into the record list.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Splits {
    pub train: Vec<usize>,
    pub valid: Vec<usize>,
    pub test: Vec<usize>,
}

/// Assigns whole speakers to sets per dialect, then drops held-out
/// utterances whose text already occurs in an earlier set.
pub fn split_sets(records: &[ManifestRecord], ratios: SplitRatios, seed: u64) -> Result<Splits> {
    let mut by_dialect: BTreeMap<Dialect, Vec<String>> = BTreeMap::new();
    let mut texts: BTreeMap<Dialect, HashSet<&[String]>> = BTreeMap::new();
    for r in records {
        let spk = by_dialect.entry(r.dialect).or_default();
        if !spk.contains(&r.speaker) {
            spk.push(r.speaker.clone());
        }
        texts.entry(r.dialect).or_default().insert(&r.text);
    }
    let mut set_of: HashMap<String, usize> = HashMap::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (d, speakers) in &mut by_dialect {
        if speakers.len() < 3 {
            return Err(Error::Split(format!(
                "dialect {d} has {} speakers; speaker disjointness needs at least 3",
                speakers.len()
            )));
        }
        if texts[d].len() < 3 {
            return Err(Error::Split(format!("dialect {d} has fewer than 3 distinct texts")));
        }
        speakers.sort();
        speakers.shuffle(&mut rng);
        let n = speakers.len() as f64;
        let total = ratios.train + ratios.valid + ratios.test;
        let n_valid = ((ratios.valid / total * n).round() as usize).max(1);
        let n_test = ((ratios.test / total * n).round() as usize).max(1);
        if n_valid + n_test >= speakers.len() {
            return Err(Error::Split(format!("dialect {d}: no speakers left for training")));
        }
        for (i, s) in speakers.iter().enumerate() {
            let set = if i < n_valid {
                1
            } else if i < n_valid + n_test {
                2
            } else {
                0
            };
            set_of.insert(s.clone(), set);
        }
    }
    let mut seen: Vec<HashSet<&[String]>> = vec![HashSet::new(); 3];
    let mut out = Splits::default();
    for set in 0..3 {
        for (i, r) in records.iter().enumerate() {
            if set_of[&r.speaker] != set {
                continue;
            }
            if (0..set).any(|earlier| seen[earlier].contains(r.text.as_slice())) {
                continue;
            }
            seen[set].insert(&r.text);
            match set {
                0 => out.train.push(i),
                1 => out.valid.push(i),
                _ => out.test.push(i),
            }
        }
    }
    for (name, part) in [("train", &out.train), ("valid", &out.valid), ("test", &out.test)] {
        if part.is_empty() {
            return Err(Error::Split(format!("{name} set is empty after text deduplication")));
        }
    }
    Ok(out)
}

/// Time-axis resampling by linear interpolation to `round(T / factor)`
/// frames.
pub fn speed_perturb(x: &Array, factor: f64) -> Result<Array> {
    if !(factor > 0.0 && factor.is_finite()) {
        return Err(Error::Contract(format!("speed factor {factor} must be positive")));
    }
    if factor == 1.0 {
        return Ok(x.clone());
    }
    let (t, f) = (x.rows(), x.last_dim());
    let out_len = ((t as f64 / factor).round() as usize).max(1);
    let mut data = Vec::with_capacity(out_len * f);
    for i in 0..out_len {
        let pos = (i as f64 * factor).min((t - 1) as f64);
        let lo = pos.floor() as usize;
        let hi = (lo + 1).min(t - 1);
        let w = pos - lo as f64;
        for j in 0..f {
            let a = x.data()[lo * f + j];
            let b = x.data()[hi * f + j];
            data.push(a + w * (b - a));
        }
    }
    Array::new(vec![out_len, f], data)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SpecAugmentConfig {
    pub time_masks: usize,
    pub time_width: usize,
    pub freq_masks: usize,
    pub freq_width: usize,
}

impl Default for SpecAugmentConfig {
    fn default() -> Self {
        Self {
            time_masks: 1,
            time_width: 4,
            freq_masks: 1,
            freq_width: 2,
        }
    }
}

/// Masks fixed-width time and frequency bands with the utterance's
/// per-dimension feature mean.
pub fn spec_augment(x: &Array, cfg: &SpecAugmentConfig, seed: u64) -> Array {
    let (t, f) = (x.rows(), x.last_dim());
    let mut out = x.clone();
    if t == 0 || (cfg.time_masks == 0 && cfg.freq_masks == 0) {
        return out;
    }
    let mut mean = vec![0.0; f];
    for r in 0..t {
        for (m, v) in mean.iter_mut().zip(x.row(r)) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= t as f64);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = out.data_mut();
    if cfg.time_width <= t {
        for _ in 0..cfg.time_masks {
            let start = rng.random_range(0..=t - cfg.time_width);
            for r in start..start + cfg.time_width {
                data[r * f..(r + 1) * f].copy_from_slice(&mean);
            }
        }
    }
    if cfg.freq_width <= f {
        for _ in 0..cfg.freq_masks {
            let start = rng.random_range(0..=f - cfg.freq_width);
            for r in 0..t {
                for j in start..start + cfg.freq_width {
                    data[r * f + j] = mean[j];
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests;
