//! `ictx` command-line front end.
//!
//! Every command accepts `--config FILE` (JSON). Flags override file values;
//! each flag's config key is shown in its help text.

use std::fmt::Write as _;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use ictx::corpus::{read_features, write_features, Corpus, SynthConfig, Utterance};
use ictx::decode::BeamConfig;
use ictx::harness::{
    boundary_hits, build_stream, decode_all, evaluate, lm_text_corpora, run_sweep, stream_groups,
    sweep_table, train_model, Dataset, EvalReport, StepLog, SweepSpec, TrainConfig, UtteranceRecord,
};
use ictx::interctc::{preset, sweep_presets};
use ictx::lm::{finetune_lm, train_lm, Lm, LmConfig, LmTrainConfig, TextCorpus};
use ictx::metrics::ErrorCount;
use ictx::model::{Model, ModelConfig};
use ictx::nn::EncoderVariant;
use ictx::segment::{align_corpus, SegmentConfig, UtteranceText};
use ictx::vocab::Vocabulary;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

#[derive(Debug)]
enum CliError {
    Config(String),
    Core(ictx::Error),
    Runtime(String),
}

impl From<ictx::Error> for CliError {
    fn from(e: ictx::Error) -> Self {
        CliError::Core(e)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Core(e.into())
    }
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Core(ictx::Error::Config(_)) => 2,
            CliError::Core(e) if e.is_data_error() => 3,
            CliError::Core(ictx::Error::Io(_) | ictx::Error::Json(_)) => 3,
            _ => 4,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "config error: {m}"),
            CliError::Core(e) => write!(f, "{e}"),
            CliError::Runtime(m) => write!(f, "{m}"),
        }
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

#[derive(Parser)]
#[command(name = "ictx", version, about = "Dialect-aware CTC/attention ASR toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic multi-dialect corpus, LM text and alignment streams.
    Generate(GenerateFlags),
    /// Train an ASR model.
    Train(TrainFlags),
    /// Decode a corpus split with joint CTC/attention beam search.
    Decode(DecodeFlags),
    /// Align known transcripts to a long feature stream.
    Align(AlignFlags),
    /// Train the stage-1 language model on untagged text.
    LmTrain(LmTrainFlags),
    /// Fine-tune a language model on dialect-tagged text.
    LmFinetune(LmFinetuneFlags),
    /// Score decoded records.
    Eval(EvalFlags),
    /// Train and evaluate one model per InterCTC placement preset.
    Sweep(SweepFlags),
}

/// Sets `root[a][b]..` from a dotted key, creating objects as needed.
fn set_path(root: &mut Value, key: &str, v: Value) {
    let mut cur = root;
    let parts: Vec<&str> = key.split('.').collect();
    for p in &parts[..parts.len() - 1] {
        if !cur.get(*p).is_some_and(Value::is_object) {
            cur[*p] = Value::Object(Map::new());
        }
        cur = &mut cur[*p];
    }
    cur[parts[parts.len() - 1]] = v;
}

/// Merges flag values over the optional config file and deserializes.
fn resolve<T: DeserializeOwned>(config: Option<&Path>, flags: &impl Serialize) -> CliResult<T> {
    let mut root = match config {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?;
            serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?
        }
        None => Value::Object(Map::new()),
    };
    if !root.is_object() {
        return Err(CliError::Config("config file must hold a JSON object".into()));
    }
    let flags = serde_json::to_value(flags).map_err(|e| CliError::Config(e.to_string()))?;
    if let Value::Object(m) = flags {
        for (k, v) in m {
            if !v.is_null() && v != Value::Bool(false) {
                set_path(&mut root, &k, v);
            }
        }
    }
    serde_path_to_error::deserialize(root).map_err(|e| {
        let path = e.path().to_string();
        CliError::Config(format!("key `{path}`: {}", e.into_inner()))
    })
}

fn require<'a>(v: &'a Option<PathBuf>, key: &str) -> CliResult<&'a Path> {
    v.as_deref()
        .ok_or_else(|| CliError::Config(format!("missing required key `{key}`")))
}

fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> CliResult<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    for it in items {
        serde_json::to_writer(&mut w, it).map_err(ictx::Error::from)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

fn read_jsonl<T: DeserializeOwned>(path: &Path) -> CliResult<Vec<T>> {
    let r = BufReader::new(fs::File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| {
            CliError::Core(ictx::Error::Corpus {
                line: i + 1,
                detail: e.to_string(),
            })
        })?);
    }
    Ok(out)
}

fn write_json<T: Serialize>(path: &Path, v: &T) -> CliResult<()> {
    let text = serde_json::to_string_pretty(v).map_err(ictx::Error::from)?;
    fs::write(path, text + "\n")?;
    Ok(())
}

// ---------------------------------------------------------------- generate

#[derive(Args, Serialize)]
struct GenerateFlags {
    #[arg(long)]
    #[serde(skip)]
    config: Option<PathBuf>,
    /// Output directory [out]
    #[arg(long)]
    out: Option<PathBuf>,
    /// [corpus.seed]
    #[arg(long)]
    #[serde(rename = "corpus.seed")]
    seed: Option<u64>,
    /// [corpus.speakers_per_dialect]
    #[arg(long)]
    #[serde(rename = "corpus.speakers_per_dialect")]
    speakers_per_dialect: Option<usize>,
    /// [corpus.utterances_per_speaker]
    #[arg(long)]
    #[serde(rename = "corpus.utterances_per_speaker")]
    utterances_per_speaker: Option<usize>,
    /// [corpus.vocab_size]
    #[arg(long)]
    #[serde(rename = "corpus.vocab_size")]
    vocab_size: Option<usize>,
    /// [corpus.feature_dim]
    #[arg(long)]
    #[serde(rename = "corpus.feature_dim")]
    feature_dim: Option<usize>,
    /// Remove lexical, offset and duration dialect cues [no_dialect_cues]
    #[arg(long)]
    no_dialect_cues: bool,
    /// Sentences of LM training text; 0 skips LM text [lm_sentences]
    #[arg(long)]
    lm_sentences: Option<usize>,
    /// Concatenated alignment streams to write [streams]
    #[arg(long)]
    streams: Option<usize>,
    /// Utterances per stream [stream_utterances]
    #[arg(long)]
    stream_utterances: Option<usize>,
}

#[derive(Deserialize)]
#[serde(default, deny_unknown_fields)]
struct GenerateOptions {
    out: Option<PathBuf>,
    corpus: SynthConfig,
    no_dialect_cues: bool,
    lm_sentences: usize,
    streams: usize,
    stream_utterances: usize,
}

impl Default for GenerateOptions {
    fn default() -> Self {
        Self {
            out: None,
            corpus: SynthConfig::default(),
            no_dialect_cues: false,
            lm_sentences: 3000,
            streams: 0,
            stream_utterances: 5,
        }
    }
}

#[derive(Serialize)]
struct StreamTruth {
    ids: Vec<String>,
    /// Encoder frames.
    boundaries: Vec<f64>,
}

fn write_texts(path: &Path, vocab: &Vocabulary, utts: &[UtteranceText]) -> CliResult<()> {
    let mut s = String::new();
    for u in utts {
        let words: Vec<&str> = u.tokens.iter().map(|&t| vocab.token(t)).collect::<ictx::Result<_>>()?;
        let _ = writeln!(s, "{} {}", u.id, words.join(" "));
    }
    fs::write(path, s)?;
    Ok(())
}

fn cmd_generate(f: GenerateFlags) -> CliResult<()> {
    let o: GenerateOptions = resolve(f.config.as_deref(), &f)?;
    let out = require(&o.out, "out")?;
    let cfg = if o.no_dialect_cues {
        o.corpus.without_dialect_cues()
    } else {
        o.corpus.clone()
    };
    cfg.validate()?;
    let corpus = Corpus::generate(&cfg)?;
    corpus.write(out)?;
    write_json(&out.join("synth_config.json"), &cfg)?;
    let tagged_vocab = corpus.vocab.extend_with_tags()?;
    if o.lm_sentences > 0 {
        let (plain, tagged, held) = lm_text_corpora(&cfg, o.lm_sentences, cfg.seed.wrapping_add(1))?;
        plain.write(&tagged_vocab, &out.join("lm_train.txt"))?;
        tagged.write(&tagged_vocab, &out.join("lm_finetune.txt"))?;
        held.write(&tagged_vocab, &out.join("lm_heldout.txt"))?;
    }
    if o.streams > 0 {
        let dir = out.join("streams");
        fs::create_dir_all(&dir)?;
        let groups = stream_groups(corpus.utterances.len(), o.streams, o.stream_utterances, cfg.seed)?;
        for (k, g) in groups.iter().enumerate() {
            let utts: Vec<&Utterance> = g.iter().map(|&i| &corpus.utterances[i]).collect();
            let s = build_stream(&tagged_vocab, &utts)?;
            let stem = dir.join(format!("stream{k:03}"));
            write_features(&stem.with_extension("feat"), &s.features)?;
            write_texts(&stem.with_extension("txt"), &tagged_vocab, &s.texts)?;
            let truth = StreamTruth {
                ids: s.texts.iter().map(|t| t.id.clone()).collect(),
                boundaries: s.boundaries,
            };
            write_json(&stem.with_extension("truth.json"), &truth)?;
        }
    }
    eprintln!(
        "wrote {} utterances ({} speakers) to {}",
        corpus.utterances.len(),
        corpus.speakers().count(),
        out.display()
    );
    Ok(())
}

// ---------------------------------------------------------------- train

#[derive(Args, Serialize)]
struct TrainFlags {
    #[arg(long)]
    #[serde(skip)]
    config: Option<PathBuf>,
    /// Corpus directory [corpus]
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// Model output directory [out]
    #[arg(long)]
    out: Option<PathBuf>,
    /// [split_seed]
    #[arg(long)]
    split_seed: Option<u64>,
    /// InterCTC placement preset name or rowN [preset]
    #[arg(long)]
    preset: Option<String>,
    /// Train the small CTC-only alignment model [aligner]
    #[arg(long)]
    aligner: bool,
    /// [train.steps]
    #[arg(long)]
    #[serde(rename = "train.steps")]
    steps: Option<usize>,
    /// [train.batch]
    #[arg(long)]
    #[serde(rename = "train.batch")]
    batch: Option<usize>,
    /// [train.seed]
    #[arg(long)]
    #[serde(rename = "train.seed")]
    seed: Option<u64>,
    /// [train.optim.peak_lr]
    #[arg(long)]
    #[serde(rename = "train.optim.peak_lr")]
    lr: Option<f64>,
    /// Print losses every N steps [log_every]
    #[arg(long)]
    log_every: Option<usize>,
}

#[derive(Deserialize)]
#[serde(default, deny_unknown_fields)]
struct TrainOptions {
    corpus: Option<PathBuf>,
    out: Option<PathBuf>,
    split_seed: u64,
    preset: Option<String>,
    aligner: bool,
    train: TrainConfig,
    log_every: usize,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            corpus: None,
            out: None,
            split_seed: 0,
            preset: None,
            aligner: false,
            train: TrainConfig::default(),
            log_every: 50,
        }
    }
}

fn feature_dim(data: &Dataset) -> CliResult<usize> {
    data.utterances
        .first()
        .map(|u| u.features.last_dim())
        .ok_or_else(|| CliError::Core(ictx::Error::Split("corpus is empty".into())))
}

fn cmd_train(f: TrainFlags) -> CliResult<()> {
    let mut o: TrainOptions = resolve(f.config.as_deref(), &f)?;
    let corpus = require(&o.corpus, "corpus")?.to_path_buf();
    let out = require(&o.out, "out")?.to_path_buf();
    let data = Dataset::load(&corpus, o.split_seed)?;
    let dim = feature_dim(&data)?;
    if o.aligner {
        o.train.model = ModelConfig::aligner(dim);
    }
    if let Some(name) = &o.preset {
        o.train.model.taps =
            preset(name).ok_or_else(|| CliError::Config(format!("key `preset`: unknown preset {name:?}")))?;
    }
    if o.train.model.input_dim != dim {
        return Err(CliError::Config(format!(
            "key `train.model.input_dim`: {} but corpus features have {dim}",
            o.train.model.input_dim
        )));
    }
    let every = o.log_every.max(1);
    let mut on_step = |l: &StepLog| {
        if l.step % every == 0 || l.step == 1 {
            eprintln!(
                "step {:>6}  lr {:.2e}  total {:.4}  ctc {:.4}  inter {}  dec {}",
                l.step,
                l.learning_rate,
                l.total,
                l.ctc,
                l.inter_mean.map_or("-".into(), |v| format!("{v:.4}")),
                l.decoder.map_or("-".into(), |v| format!("{v:.4}")),
            );
        }
    };
    let (model, log) = train_model(&o.train, &data.vocab, &data.train(), &mut on_step)?;
    model.save(&out)?;
    write_jsonl(&out.join("train_log.jsonl"), &log)?;
    write_json(&out.join("train_config.json"), &o.train)?;
    eprintln!("saved model ({} parameters) to {}", model.num_parameters(), out.display());
    Ok(())
}

// ---------------------------------------------------------------- decode

#[derive(Args, Serialize)]
struct DecodeFlags {
    #[arg(long)]
    #[serde(skip)]
    config: Option<PathBuf>,
    /// Model directory [model]
    #[arg(long)]
    model: Option<PathBuf>,
    /// Corpus directory [corpus]
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// train, valid, test or all [split]
    #[arg(long)]
    split: Option<String>,
    /// [split_seed]
    #[arg(long)]
    split_seed: Option<u64>,
    /// Output records, JSON lines [out]
    #[arg(long)]
    out: Option<PathBuf>,
    /// Language model directory for shallow fusion [lm]
    #[arg(long)]
    lm: Option<PathBuf>,
    /// [beam.lm_weight]
    #[arg(long)]
    #[serde(rename = "beam.lm_weight")]
    lm_weight: Option<f64>,
    /// [beam.beam]
    #[arg(long)]
    #[serde(rename = "beam.beam")]
    beam: Option<usize>,
    /// [beam.ctc_weight]
    #[arg(long)]
    #[serde(rename = "beam.ctc_weight")]
    ctc_weight: Option<f64>,
    /// [beam.length_bonus]
    #[arg(long)]
    #[serde(rename = "beam.length_bonus")]
    length_bonus: Option<f64>,
}

#[derive(Deserialize)]
#[serde(default, deny_unknown_fields)]
struct DecodeOptions {
    model: Option<PathBuf>,
    corpus: Option<PathBuf>,
    split: String,
    split_seed: u64,
    out: Option<PathBuf>,
    lm: Option<PathBuf>,
    beam: BeamConfig,
}

impl Default for DecodeOptions {
    fn default() -> Self {
        Self {
            model: None,
            corpus: None,
            split: "test".into(),
            split_seed: 0,
            out: None,
            lm: None,
            beam: BeamConfig::default(),
        }
    }
}

fn cmd_decode(f: DecodeFlags) -> CliResult<()> {
    let o: DecodeOptions = resolve(f.config.as_deref(), &f)?;
    o.beam.validate()?;
    let model = Model::load(require(&o.model, "model")?)?;
    let data = Dataset::load(require(&o.corpus, "corpus")?, o.split_seed)?;
    let utts = match o.split.as_str() {
        "train" => data.train(),
        "valid" => data.valid(),
        "test" => data.test(),
        "all" => data.utterances.iter().collect(),
        s => return Err(CliError::Config(format!("key `split`: unknown split {s:?}"))),
    };
    let lm = o.lm.as_deref().map(Lm::load).transpose()?;
    let records = decode_all(&model, lm.as_ref(), &utts, &o.beam)?;
    if let Some(out) = &o.out {
        write_jsonl(out, &records)?;
    }
    print!("{}", evaluate(records)?.summary());
    Ok(())
}

// ---------------------------------------------------------------- eval

#[derive(Args, Serialize)]
struct EvalFlags {
    #[arg(long)]
    #[serde(skip)]
    config: Option<PathBuf>,
    /// Decoded records, JSON lines [decoded]
    #[arg(long)]
    decoded: Option<PathBuf>,
    /// Report output, JSON [out]
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct EvalOptions {
    decoded: Option<PathBuf>,
    out: Option<PathBuf>,
}

/// Recounts edits from the reference and hypothesis strings.
fn rescore(mut r: UtteranceRecord) -> CliResult<UtteranceRecord> {
    let reference: Vec<&str> = r.reference.split_whitespace().collect();
    let hyp: Vec<&str> = r.hypothesis.split_whitespace().collect();
    let mut c = ErrorCount::default();
    c.add(&reference, &hyp)
        .map_err(|e| CliError::Core(e.for_utterance(r.id.clone())))?;
    r.errors = c.errors;
    r.words = c.words;
    Ok(r)
}

fn cmd_eval(f: EvalFlags) -> CliResult<()> {
    let o: EvalOptions = resolve(f.config.as_deref(), &f)?;
    let records: Vec<UtteranceRecord> = read_jsonl(require(&o.decoded, "decoded")?)?;
    let records = records.into_iter().map(rescore).collect::<CliResult<_>>()?;
    let report: EvalReport = evaluate(records)?;
    if let Some(out) = &o.out {
        write_json(out, &report)?;
    }
    print!("{}", report.summary());
    Ok(())
}

// ---------------------------------------------------------------- align

#[derive(Args, Serialize)]
struct AlignFlags {
    #[arg(long)]
    #[serde(skip)]
    config: Option<PathBuf>,
    /// Model directory [model]
    #[arg(long)]
    model: Option<PathBuf>,
    /// Stream features [features]
    #[arg(long)]
    features: Option<PathBuf>,
    /// Transcripts, one `id word ...` line per utterance [text]
    #[arg(long)]
    text: Option<PathBuf>,
    /// Segments output, JSON lines [out]
    #[arg(long)]
    out: Option<PathBuf>,
    /// Ground-truth boundaries to score against [truth]
    #[arg(long)]
    truth: Option<PathBuf>,
    /// Boundary tolerance in encoder frames [tolerance]
    #[arg(long)]
    tolerance: Option<f64>,
    /// [segment.max_frames]
    #[arg(long)]
    #[serde(rename = "segment.max_frames")]
    max_frames: Option<usize>,
    /// [segment.overlap_frames]
    #[arg(long)]
    #[serde(rename = "segment.overlap_frames")]
    overlap_frames: Option<usize>,
    /// [segment.threshold]
    #[arg(long)]
    #[serde(rename = "segment.threshold")]
    threshold: Option<f64>,
}

#[derive(Deserialize)]
#[serde(default, deny_unknown_fields)]
struct AlignOptions {
    model: Option<PathBuf>,
    features: Option<PathBuf>,
    text: Option<PathBuf>,
    out: Option<PathBuf>,
    truth: Option<PathBuf>,
    tolerance: f64,
    segment: SegmentConfig,
}

impl Default for AlignOptions {
    fn default() -> Self {
        Self {
            model: None,
            features: None,
            text: None,
            out: None,
            truth: None,
            tolerance: 3.0,
            segment: SegmentConfig::default(),
        }
    }
}

#[derive(Deserialize)]
struct TruthFile {
    boundaries: Vec<f64>,
}

fn read_texts(path: &Path, vocab: &Vocabulary) -> CliResult<Vec<UtteranceText>> {
    let text = fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let mut it = line.split_whitespace();
        let Some(id) = it.next() else { continue };
        let tokens = it
            .map(|w| vocab.id(w))
            .collect::<ictx::Result<Vec<_>>>()
            .map_err(|e| {
                CliError::Core(ictx::Error::Corpus {
                    line: i + 1,
                    detail: e.to_string(),
                })
            })?;
        out.push(UtteranceText {
            id: id.to_string(),
            tokens,
        });
    }
    Ok(out)
}

fn cmd_align(f: AlignFlags) -> CliResult<()> {
    let o: AlignOptions = resolve(f.config.as_deref(), &f)?;
    let model = Model::load(require(&o.model, "model")?)?;
    let features = read_features(require(&o.features, "features")?)?;
    let utts = read_texts(require(&o.text, "text")?, &model.vocab)?;
    let segs = align_corpus(&model, &features, &utts, &o.segment)?;
    if let Some(out) = &o.out {
        write_jsonl(out, &segs)?;
    }
    for s in &segs {
        println!("{}\t{}\t{}\t{:.4}", s.id, s.start_frame, s.end_frame, s.confidence);
    }
    if let Some(t) = &o.truth {
        let truth: TruthFile = serde_json::from_str(&fs::read_to_string(t)?).map_err(ictx::Error::from)?;
        let (hits, total) = boundary_hits(&segs, &truth.boundaries, o.tolerance);
        println!("boundaries within {} frames: {hits}/{total}", o.tolerance);
    }
    Ok(())
}

// ---------------------------------------------------------------- lm

#[derive(Args, Serialize)]
struct LmTrainFlags {
    #[arg(long)]
    #[serde(skip)]
    config: Option<PathBuf>,
    /// Untagged training text [text]
    #[arg(long)]
    text: Option<PathBuf>,
    /// Vocabulary file [vocab]
    #[arg(long)]
    vocab: Option<PathBuf>,
    /// LM output directory [out]
    #[arg(long)]
    out: Option<PathBuf>,
    /// Tagged held-out text for perplexity [heldout]
    #[arg(long)]
    heldout: Option<PathBuf>,
    /// [train.steps]
    #[arg(long)]
    #[serde(rename = "train.steps")]
    steps: Option<usize>,
    /// [train.seed]
    #[arg(long)]
    #[serde(rename = "train.seed")]
    seed: Option<u64>,
}

#[derive(Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct LmTrainOptions {
    text: Option<PathBuf>,
    vocab: Option<PathBuf>,
    out: Option<PathBuf>,
    heldout: Option<PathBuf>,
    lm: LmConfig,
    train: LmTrainConfig,
}

fn report_perplexity(lm: &Lm, heldout: Option<&Path>) -> CliResult<()> {
    if let Some(p) = heldout {
        let held = TextCorpus::read(&lm.vocab, p)?;
        println!("held-out perplexity {:.4}", lm.perplexity(&held.sequences(&lm.vocab)?)?);
    }
    Ok(())
}

fn log_curve(curve: &[f64]) {
    for (i, l) in curve.iter().enumerate() {
        if (i + 1) % 50 == 0 || i + 1 == curve.len() {
            eprintln!("step {:>6}  loss {l:.4}", i + 1);
        }
    }
}

fn cmd_lm_train(f: LmTrainFlags) -> CliResult<()> {
    let o: LmTrainOptions = resolve(f.config.as_deref(), &f)?;
    let vocab = Vocabulary::load(require(&o.vocab, "vocab")?)?;
    let vocab = if vocab.has_tags() { vocab } else { vocab.extend_with_tags()? };
    let text = TextCorpus::read(&vocab, require(&o.text, "text")?)?;
    let mut lm = Lm::new(o.lm.clone(), vocab, o.train.seed)?;
    let curve = train_lm(&mut lm, &text, &o.train)?;
    log_curve(&curve);
    lm.save(require(&o.out, "out")?)?;
    report_perplexity(&lm, o.heldout.as_deref())
}

#[derive(Args, Serialize)]
struct LmFinetuneFlags {
    #[arg(long)]
    #[serde(skip)]
    config: Option<PathBuf>,
    /// Stage-1 LM directory [lm]
    #[arg(long)]
    lm: Option<PathBuf>,
    /// Dialect-tagged text [text]
    #[arg(long)]
    text: Option<PathBuf>,
    /// LM output directory [out]
    #[arg(long)]
    out: Option<PathBuf>,
    /// Tagged held-out text for perplexity [heldout]
    #[arg(long)]
    heldout: Option<PathBuf>,
    /// [train.steps]
    #[arg(long)]
    #[serde(rename = "train.steps")]
    steps: Option<usize>,
    /// [train.seed]
    #[arg(long)]
    #[serde(rename = "train.seed")]
    seed: Option<u64>,
}

#[derive(Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct LmFinetuneOptions {
    lm: Option<PathBuf>,
    text: Option<PathBuf>,
    out: Option<PathBuf>,
    heldout: Option<PathBuf>,
    train: LmTrainConfig,
}

fn cmd_lm_finetune(f: LmFinetuneFlags) -> CliResult<()> {
    let o: LmFinetuneOptions = resolve(f.config.as_deref(), &f)?;
    let mut lm = Lm::load(require(&o.lm, "lm")?)?;
    let text = TextCorpus::read(&lm.vocab, require(&o.text, "text")?)?;
    report_perplexity(&lm, o.heldout.as_deref())?;
    let curve = finetune_lm(&mut lm, &text, &o.train)?;
    log_curve(&curve);
    lm.save(require(&o.out, "out")?)?;
    report_perplexity(&lm, o.heldout.as_deref())
}

// ---------------------------------------------------------------- sweep

#[derive(Args, Serialize)]
struct SweepFlags {
    #[arg(long)]
    #[serde(skip)]
    config: Option<PathBuf>,
    /// Corpus directory [corpus]
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// Report directory [out]
    #[arg(long)]
    out: Option<PathBuf>,
    /// [split_seed]
    #[arg(long)]
    split_seed: Option<u64>,
    /// Comma-separated seeds [seeds]
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    /// Run presets concurrently [parallel]
    #[arg(long)]
    parallel: bool,
    /// [train.steps]
    #[arg(long)]
    #[serde(rename = "train.steps")]
    steps: Option<usize>,
    /// [train.batch]
    #[arg(long)]
    #[serde(rename = "train.batch")]
    batch: Option<usize>,
    /// [beam.beam]
    #[arg(long)]
    #[serde(rename = "beam.beam")]
    beam: Option<usize>,
}

#[derive(Deserialize)]
#[serde(default, deny_unknown_fields)]
struct SweepOptions {
    corpus: Option<PathBuf>,
    out: Option<PathBuf>,
    split_seed: u64,
    seeds: Vec<u64>,
    variants: Vec<EncoderVariant>,
    parallel: bool,
    train: TrainConfig,
    beam: BeamConfig,
}

impl Default for SweepOptions {
    fn default() -> Self {
        let spec = SweepSpec::default();
        Self {
            corpus: None,
            out: None,
            split_seed: 0,
            seeds: spec.seeds,
            variants: spec.variants,
            parallel: false,
            train: TrainConfig::default(),
            beam: BeamConfig::default(),
        }
    }
}

fn cmd_sweep(f: SweepFlags) -> CliResult<()> {
    let o: SweepOptions = resolve(f.config.as_deref(), &f)?;
    if o.seeds.is_empty() || o.variants.is_empty() {
        return Err(CliError::Config("keys `seeds` and `variants` must be nonempty".into()));
    }
    let data = Dataset::load(require(&o.corpus, "corpus")?, o.split_seed)?;
    let spec = SweepSpec {
        presets: sweep_presets(),
        variants: o.variants.clone(),
        seeds: o.seeds.clone(),
        parallel: o.parallel,
    };
    let rows = run_sweep(&spec, &o.train, &data, &o.beam);
    let table = sweep_table(&rows);
    print!("{table}");
    if let Some(out) = &o.out {
        fs::create_dir_all(out)?;
        fs::write(out.join("sweep.txt"), &table)?;
        write_jsonl(&out.join("sweep.jsonl"), &rows)?;
    }
    let failed = rows.iter().filter(|r| !r.ok()).count();
    if failed > 0 {
        return Err(CliError::Runtime(format!("{failed} of {} sweep runs failed", rows.len())));
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Generate(f) => cmd_generate(f),
        Command::Train(f) => cmd_train(f),
        Command::Decode(f) => cmd_decode(f),
        Command::Align(f) => cmd_align(f),
        Command::LmTrain(f) => cmd_lm_train(f),
        Command::LmFinetune(f) => cmd_lm_finetune(f),
        Command::Eval(f) => cmd_eval(f),
        Command::Sweep(f) => cmd_sweep(f),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
