//! The `tmt` binary: generate a synthetic tri-modal corpus, fit tokenizers,
//! train the shared translation model, and run decoding, evaluation, and
//! reporting — all from one executable so a whole experiment is a short
//! shell script.
//!
//! Conventions shared by every subcommand:
//! - the resolved configuration (after `--config` merging) is echoed as
//!   `key=value` lines before any work starts;
//! - `--config FILE` supplies `key=value` defaults for the same flags, with
//!   explicit command-line flags winning; unknown keys are rejected;
//! - exit code 0 on success, 1 for usage problems, 2 for runtime failures,
//!   which print a single line `error: <code>: <message>` on stderr.

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use tmt_core::bpe::{decode_text, BpeModel};
use tmt_core::codebook::{
    raster_to_patches, tokenize_image, tokenize_speech, Codebook, KmeansOptions, PatchGrid,
    SPEECH_TOKEN_CAP,
};
use tmt_core::decode::{translate_tokens, DecodeConfig};
use tmt_core::formats::{
    read_bpe, read_codebook, read_features, read_manifest, read_ppm, write_bpe, write_codebook,
    write_features, write_ppm, write_predictions, write_token_corpus, Prediction,
};
use tmt_core::mat::Mat;
use tmt_core::metrics::{
    evaluate_direction, speech_tokens_to_transcript, DirectionScores, EvalContext, EvalExample,
};
use tmt_core::model::{read_checkpoint, ModelConfig, ModelParams};
use tmt_core::tokens::{bits_report, Direction, Modality, TokenSequence, Vocabulary};
use tmt_core::trainer::{
    back_translate, mean_corpus_loss, tokenize_manifest, train, TokenizedCorpus, TokenizerBundle,
    TrainConfig, TrainSet,
};
use tmt_core::world::{generate_corpus, manifest_path, Split, WorldConfig, SPEECH_DIM};
use tmt_core::{derive_seed, Error, Result};

#[derive(Parser, Debug)]
#[command(
    name = "tmt",
    version,
    about = "Tri-modal translation: treat images, speech, and text as languages over one shared token vocabulary",
    term_width = 100,
    disable_help_subcommand = true
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic corpus: scene images, speech feature files, captions, and split manifests
    GenCorpus(GenCorpusArgs),
    /// Fit the speech/image codebooks and the text subword model on the train split
    TrainTokenizers(TrainTokenizersArgs),
    /// Tokenize every split of a corpus into unified token-id files
    Tokenize(TokenizeArgs),
    /// Train the shared encoder-decoder on the six translation directions
    Train(TrainArgs),
    /// Back-translate monolingual targets into pseudo-pairs and continue training on the merged data
    Bt(BtArgs),
    /// Translate one input file between modalities
    Translate(TranslateArgs),
    /// Decode a split in each direction and score it
    Evaluate(EvaluateArgs),
    /// Re-run tokenizer training, model training, and evaluation once per speech vocabulary size
    SweepSpeechVocab(SweepArgs),
    /// Print raw-data versus token-stream bit accounting
    BitsReport(BitsArgs),
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::GenCorpus(_) => "gen-corpus",
            Command::TrainTokenizers(_) => "train-tokenizers",
            Command::Tokenize(_) => "tokenize",
            Command::Train(_) => "train",
            Command::Bt(_) => "bt",
            Command::Translate(_) => "translate",
            Command::Evaluate(_) => "evaluate",
            Command::SweepSpeechVocab(_) => "sweep-speech-vocab",
            Command::BitsReport(_) => "bits-report",
        }
    }
}

// ---------------------------------------------------------------------------
// Shared flag groups

#[derive(Args, Debug, Clone)]
struct ModelFlags {
    /// Model width
    #[arg(long, default_value_t = 64, value_name = "N")]
    d_model: usize,
    /// Attention heads; must divide the model width
    #[arg(long, default_value_t = 4, value_name = "N")]
    heads: usize,
    /// Feed-forward hidden width
    #[arg(long, default_value_t = 256, value_name = "N")]
    ffn: usize,
    /// Encoder depth
    #[arg(long, default_value_t = 2, value_name = "N")]
    enc_layers: usize,
    /// Decoder depth
    #[arg(long, default_value_t = 2, value_name = "N")]
    dec_layers: usize,
    /// Positional capacity: longest sequence including BOS/EOS
    #[arg(long, default_value_t = 400, value_name = "N")]
    max_len: usize,
    /// Dropout rate inside attention/FFN blocks and on embeddings
    #[arg(long, default_value_t = 0.0, value_name = "P")]
    dropout: f64,
    /// Keep the output projection untied from the token embedding
    #[arg(long)]
    untied: bool,
}

impl ModelFlags {
    fn to_config(&self, vocab_total: usize) -> ModelConfig {
        ModelConfig {
            d_model: self.d_model,
            n_heads: self.heads,
            ffn_dim: self.ffn,
            enc_layers: self.enc_layers,
            dec_layers: self.dec_layers,
            max_len: self.max_len,
            vocab_total,
            dropout: self.dropout,
            tied_output: !self.untied,
        }
    }

    fn echo(&self, pairs: &mut Vec<(&'static str, String)>) {
        pairs.push(("d-model", self.d_model.to_string()));
        pairs.push(("heads", self.heads.to_string()));
        pairs.push(("ffn", self.ffn.to_string()));
        pairs.push(("enc-layers", self.enc_layers.to_string()));
        pairs.push(("dec-layers", self.dec_layers.to_string()));
        pairs.push(("max-len", self.max_len.to_string()));
        pairs.push(("dropout", self.dropout.to_string()));
        pairs.push(("untied", self.untied.to_string()));
    }
}

#[derive(Args, Debug, Clone)]
struct OptimFlags {
    /// Optimisation steps
    #[arg(long, default_value_t = 5000, value_name = "N")]
    steps: usize,
    /// Examples sampled per direction per step
    #[arg(long, default_value_t = 16, value_name = "N")]
    batch_size: usize,
    /// Peak learning rate after warmup
    #[arg(long, default_value_t = 1e-4, value_name = "R")]
    peak_lr: f64,
    /// Linear warmup length in steps
    #[arg(long, default_value_t = 500, value_name = "N")]
    warmup: usize,
    /// Global gradient-norm clip; 0 disables
    #[arg(long, default_value_t = 1.0, value_name = "R")]
    clip: f64,
    /// Log losses every this many steps
    #[arg(long, default_value_t = 50, value_name = "N")]
    log_every: usize,
    /// Write a checkpoint every this many steps
    #[arg(long, default_value_t = 1000, value_name = "N")]
    ckpt_every: usize,
}

impl OptimFlags {
    fn echo(&self, pairs: &mut Vec<(&'static str, String)>) {
        pairs.push(("steps", self.steps.to_string()));
        pairs.push(("batch-size", self.batch_size.to_string()));
        pairs.push(("peak-lr", self.peak_lr.to_string()));
        pairs.push(("warmup", self.warmup.to_string()));
        pairs.push(("clip", self.clip.to_string()));
        pairs.push(("log-every", self.log_every.to_string()));
        pairs.push(("ckpt-every", self.ckpt_every.to_string()));
    }
}

// ---------------------------------------------------------------------------
// Per-command arguments

#[derive(Args, Debug)]
struct GenCorpusArgs {
    /// Output corpus directory (created if missing)
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
    /// Number of scenes across all three splits
    #[arg(long, default_value_t = 2000, value_name = "N")]
    n: usize,
    /// Master random seed
    #[arg(long, default_value_t = 0, value_name = "N")]
    seed: u64,
    /// Speech feature noise standard deviation
    #[arg(long, default_value_t = 0.05, value_name = "SIGMA")]
    noise: f64,
    /// Speech feature dimensionality
    #[arg(long, default_value_t = SPEECH_DIM, value_name = "N")]
    speech_dim: usize,
    /// key=value file supplying flag defaults
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct TrainTokenizersArgs {
    /// Corpus directory from gen-corpus
    #[arg(long, value_name = "DIR")]
    data: PathBuf,
    /// Output directory for tokenizer files
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
    /// Speech codebook size
    #[arg(long, default_value_t = 200, value_name = "K")]
    speech_vocab: usize,
    /// Image patch codebook size
    #[arg(long, default_value_t = 256, value_name = "K")]
    image_vocab: usize,
    /// Text subword vocabulary size (base characters plus merges)
    #[arg(long, default_value_t = 200, value_name = "N")]
    text_vocab: usize,
    /// Iteration cap for codebook clustering
    #[arg(long, default_value_t = 100, value_name = "N")]
    kmeans_iters: usize,
    /// Master random seed
    #[arg(long, default_value_t = 0, value_name = "N")]
    seed: u64,
    /// key=value file supplying flag defaults
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
}

#[derive(Args, Debug, Clone)]
struct TokenizeArgs {
    /// Corpus directory from gen-corpus
    #[arg(long, value_name = "DIR")]
    data: PathBuf,
    /// Tokenizer directory from train-tokenizers
    #[arg(long, value_name = "DIR")]
    tokenizers: PathBuf,
    /// Output directory for token files
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
    /// Random seed; this command is deterministic, the flag is accepted for uniformity
    #[arg(long, default_value_t = 0, value_name = "N")]
    seed: u64,
    /// key=value file supplying flag defaults
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Token-file directory from tokenize
    #[arg(long, value_name = "DIR")]
    data: PathBuf,
    /// Tokenizer directory from train-tokenizers
    #[arg(long, value_name = "DIR")]
    tokenizers: PathBuf,
    /// Output directory for checkpoints and the training log
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
    /// Directions to train: "all" or a comma list like i2t,t2i
    #[arg(long, default_value = "all", value_name = "LIST")]
    directions: String,
    /// Master random seed
    #[arg(long, default_value_t = 0, value_name = "N")]
    seed: u64,
    #[command(flatten)]
    model: ModelFlags,
    #[command(flatten)]
    optim: OptimFlags,
    /// key=value file supplying flag defaults
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct BtArgs {
    /// Checkpoint of the intermediate model
    #[arg(long, value_name = "FILE")]
    model: PathBuf,
    /// Tokenizer directory from train-tokenizers
    #[arg(long, value_name = "DIR")]
    tokenizers: PathBuf,
    /// Token-file directory from tokenize
    #[arg(long, value_name = "DIR")]
    data: PathBuf,
    /// Output directory for pseudo-pairs, continued checkpoints, and logs
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
    /// Directions to back-translate: "all" or a comma list
    #[arg(long, default_value = "all", value_name = "LIST")]
    directions: String,
    /// Target sequences to back-translate per direction
    #[arg(long, default_value_t = 500, value_name = "N")]
    per_direction: usize,
    /// Beam width for pseudo-source decoding; 1 is greedy
    #[arg(long, default_value_t = 1, value_name = "N")]
    beam: usize,
    /// Length-normalisation exponent for decoding
    #[arg(long, default_value_t = 0.0, value_name = "A")]
    alpha: f64,
    /// Steps of continued training on the merged corpus; 0 skips it
    #[arg(long, default_value_t = 500, value_name = "N")]
    continue_steps: usize,
    /// Peak learning rate for continued training
    #[arg(long, default_value_t = 5e-5, value_name = "R")]
    continue_peak_lr: f64,
    /// Warmup length for continued training
    #[arg(long, default_value_t = 100, value_name = "N")]
    continue_warmup: usize,
    /// Examples sampled per direction per continued step
    #[arg(long, default_value_t = 16, value_name = "N")]
    batch_size: usize,
    /// Global gradient-norm clip during continued training; 0 disables
    #[arg(long, default_value_t = 1.0, value_name = "R")]
    clip: f64,
    /// Log losses every this many continued steps
    #[arg(long, default_value_t = 50, value_name = "N")]
    log_every: usize,
    /// Checkpoint every this many continued steps
    #[arg(long, default_value_t = 1000, value_name = "N")]
    ckpt_every: usize,
    /// Master random seed
    #[arg(long, default_value_t = 0, value_name = "N")]
    seed: u64,
    /// key=value file supplying flag defaults
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct TranslateArgs {
    /// Checkpoint to decode with
    #[arg(long, value_name = "FILE")]
    model: PathBuf,
    /// Tokenizer directory from train-tokenizers
    #[arg(long, value_name = "DIR")]
    tokenizers: PathBuf,
    /// Direction, e.g. s2t or i2s
    #[arg(long, value_name = "DIR")]
    direction: String,
    /// Input file: .ppm raster, speech feature file, or UTF-8 text per the source modality
    #[arg(long, value_name = "FILE")]
    input: PathBuf,
    /// Directory for the materialised output artifact (optional)
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Beam width; 1 is greedy
    #[arg(long, default_value_t = 5, value_name = "N")]
    beam: usize,
    /// Length-normalisation exponent
    #[arg(long, default_value_t = 0.0, value_name = "A")]
    alpha: f64,
    /// Step cap for text/speech targets; defaults to the model capacity
    #[arg(long, value_name = "N")]
    max_steps: Option<usize>,
    /// Random seed; this command is deterministic, the flag is accepted for uniformity
    #[arg(long, default_value_t = 0, value_name = "N")]
    seed: u64,
    /// key=value file supplying flag defaults
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    /// Checkpoint to evaluate
    #[arg(long, value_name = "FILE")]
    model: PathBuf,
    /// Tokenizer directory from train-tokenizers
    #[arg(long, value_name = "DIR")]
    tokenizers: PathBuf,
    /// Token-file directory from tokenize
    #[arg(long, value_name = "DIR")]
    data: PathBuf,
    /// Output directory for prediction dumps
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
    /// Which split to score
    #[arg(long, default_value = "test", value_name = "SPLIT")]
    split: String,
    /// Directions to score: "all" or a comma list
    #[arg(long, default_value = "all", value_name = "LIST")]
    directions: String,
    /// Beam width; 1 is greedy
    #[arg(long, default_value_t = 5, value_name = "N")]
    beam: usize,
    /// Length-normalisation exponent
    #[arg(long, default_value_t = 0.0, value_name = "A")]
    alpha: f64,
    /// Random seed; this command is deterministic, the flag is accepted for uniformity
    #[arg(long, default_value_t = 0, value_name = "N")]
    seed: u64,
    /// key=value file supplying flag defaults
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SweepArgs {
    /// Corpus directory from gen-corpus
    #[arg(long, value_name = "DIR")]
    data: PathBuf,
    /// Output directory; each size gets a subdirectory
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
    /// Comma list of speech codebook sizes (at least two)
    #[arg(long, value_name = "LIST")]
    sizes: String,
    /// Image patch codebook size (shared across sizes)
    #[arg(long, default_value_t = 256, value_name = "K")]
    image_vocab: usize,
    /// Text subword vocabulary size (shared across sizes)
    #[arg(long, default_value_t = 200, value_name = "N")]
    text_vocab: usize,
    /// Iteration cap for codebook clustering
    #[arg(long, default_value_t = 100, value_name = "N")]
    kmeans_iters: usize,
    /// Which split to score
    #[arg(long, default_value = "test", value_name = "SPLIT")]
    split: String,
    /// Beam width for evaluation decoding
    #[arg(long, default_value_t = 5, value_name = "N")]
    beam: usize,
    /// Master random seed (shared by every per-size run)
    #[arg(long, default_value_t = 0, value_name = "N")]
    seed: u64,
    #[command(flatten)]
    model: ModelFlags,
    #[command(flatten)]
    optim: OptimFlags,
    /// key=value file supplying flag defaults
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct BitsArgs {
    /// Audio duration in seconds (16 kHz, 16-bit mono)
    #[arg(long, default_value_t = 1.0, value_name = "S")]
    audio_seconds: f64,
    /// Speech tokens per second of audio
    #[arg(long, default_value_t = 50.0, value_name = "R")]
    token_rate: f64,
    /// Speech token vocabulary size
    #[arg(long, default_value_t = 200, value_name = "K")]
    speech_vocab: u32,
    /// Image side length in pixels (8-bit RGB, square)
    #[arg(long, default_value_t = 224, value_name = "PX")]
    image_hw: u32,
    /// Tokens per image
    #[arg(long, default_value_t = 32, value_name = "N")]
    image_tokens: u32,
    /// Image token vocabulary size
    #[arg(long, default_value_t = 8192, value_name = "K")]
    image_vocab: u32,
    /// Random seed; this command is deterministic, the flag is accepted for uniformity
    #[arg(long, default_value_t = 0, value_name = "N")]
    seed: u64,
    /// key=value file supplying flag defaults
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
}

// ---------------------------------------------------------------------------
// Entry point and plumbing

fn main() -> ExitCode {
    let argv: Vec<String> = std::env::args().collect();
    let argv = match inject_config_args(argv) {
        Ok(v) => v,
        Err(e) => {
            eprintln!("error: {}: {}", e.code(), e.message());
            return ExitCode::from(2);
        }
    };
    let cli = match Cli::try_parse_from(&argv) {
        Ok(c) => c,
        Err(e) => {
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    print!("{e}");
                    ExitCode::SUCCESS
                }
                _ => {
                    eprint!("{e}");
                    ExitCode::from(1)
                }
            };
        }
    };
    let name = cli.command.name();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}: {}: {}", e.code(), name, e.message());
            ExitCode::from(2)
        }
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::GenCorpus(a) => cmd_gen_corpus(&a),
        Command::TrainTokenizers(a) => cmd_train_tokenizers(&a),
        Command::Tokenize(a) => cmd_tokenize(&a),
        Command::Train(a) => cmd_train(&a).map(|_| ()),
        Command::Bt(a) => cmd_bt(&a),
        Command::Translate(a) => cmd_translate(&a),
        Command::Evaluate(a) => cmd_evaluate(&a).map(|_| ()),
        Command::SweepSpeechVocab(a) => cmd_sweep(&a),
        Command::BitsReport(a) => cmd_bits(&a),
    }
}

/// Splice flags from a `key=value` config file (if any) into the argument
/// list. Keys are flag names without the leading dashes; boolean flags take
/// `true`/`false`. A key the command line already sets is skipped, so
/// explicit flags win; unknown keys fail flag parsing, which is exactly the
/// rejection the format promises.
fn inject_config_args(argv: Vec<String>) -> Result<Vec<String>> {
    if argv.len() < 2 {
        return Ok(argv);
    }
    let mut path: Option<String> = None;
    let mut i = 2;
    while i < argv.len() {
        if argv[i] == "--config" {
            path = argv.get(i + 1).cloned();
            i += 2;
            continue;
        }
        if let Some(rest) = argv[i].strip_prefix("--config=") {
            path = Some(rest.to_string());
        }
        i += 1;
    }
    let Some(path) = path else { return Ok(argv) };
    let explicit: Vec<&str> = argv[2..]
        .iter()
        .filter_map(|a| a.strip_prefix("--"))
        .map(|r| r.split('=').next().unwrap_or(r))
        .collect();
    let text = fs::read_to_string(&path)
        .map_err(|e| Error::Io(format!("config file {path}: {e}")))?;
    let mut flags = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(Error::Config(format!(
                "{path} line {}: expected key=value, got {raw:?}",
                idx + 1
            )));
        };
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() {
            return Err(Error::Config(format!("{path} line {}: empty key", idx + 1)));
        }
        if explicit.contains(&k) {
            continue;
        }
        match v {
            "true" => flags.push(format!("--{k}")),
            "false" => {}
            _ => {
                flags.push(format!("--{k}"));
                flags.push(v.to_string());
            }
        }
    }
    let mut out = argv[..2].to_vec();
    out.extend(flags);
    out.extend(argv[2..].iter().cloned());
    Ok(out)
}

fn echo(command: &str, pairs: &[(&'static str, String)]) {
    println!("command={command}");
    for (k, v) in pairs {
        println!("{k}={v}");
    }
}

fn disp(p: &Path) -> String {
    p.display().to_string()
}

fn join_ids(ids: &[u32]) -> String {
    ids.iter().map(|t| t.to_string()).collect::<Vec<_>>().join(" ")
}

fn parse_directions(s: &str) -> Result<Vec<Direction>> {
    if s.trim() == "all" {
        return Ok(Direction::ALL.to_vec());
    }
    let mut out = Vec::new();
    for part in s.split(',') {
        let part = part.trim();
        if part.is_empty() {
            return Err(Error::InvalidArgument(format!("empty entry in direction list {s:?}")));
        }
        let d = Direction::parse(part)?;
        if out.contains(&d) {
            return Err(Error::InvalidArgument(format!("direction {d} listed twice")));
        }
        out.push(d);
    }
    Ok(out)
}

fn directions_echo(dirs: &[Direction]) -> String {
    dirs.iter().map(|d| d.to_string()).collect::<Vec<_>>().join(",")
}

fn tokens_path(dir: &Path, split: Split) -> PathBuf {
    dir.join(format!("tokens-{}.tsv", split.name()))
}

/// Everything loadable from a tokenizer directory, plus the vocabulary the
/// three pieces imply.
struct Tokenizers {
    speech: Codebook<f64>,
    image: Codebook<f64>,
    bpe: BpeModel,
    vocab: Vocabulary,
}

fn load_tokenizers(dir: &Path) -> Result<Tokenizers> {
    let speech = read_codebook::<f64>(&dir.join("speech.tmtcb"))?;
    let image = read_codebook::<f64>(&dir.join("image.tmtcb"))?;
    let bpe = read_bpe(&dir.join("text.tmtbpe"))?;
    let vocab = Vocabulary::new(image.k() as u32, speech.k() as u32, bpe.vocab_size() as u32)?;
    Ok(Tokenizers { speech, image, bpe, vocab })
}

fn load_model(path: &Path, vocab: &Vocabulary) -> Result<ModelParams<f32>> {
    let params: ModelParams<f32> = read_checkpoint(path)?;
    if params.cfg.vocab_total != vocab.total() as usize {
        return Err(Error::Config(format!(
            "checkpoint vocabulary size {} does not match the tokenizers' {}",
            params.cfg.vocab_total,
            vocab.total()
        )));
    }
    Ok(params)
}

/// Rebuild an error with a prefix on its message, keeping the class.
fn with_context(ctx: &str, e: Error) -> Error {
    let m = |s: String| format!("{ctx}: {s}");
    match e {
        Error::InvalidArgument(s) => Error::InvalidArgument(m(s)),
        Error::Range(s) => Error::Range(m(s)),
        Error::Domain(s) => Error::Domain(m(s)),
        Error::Shape(s) => Error::Shape(m(s)),
        Error::Length(s) => Error::Length(m(s)),
        Error::InsufficientData(s) => Error::InsufficientData(m(s)),
        Error::Config(s) => Error::Config(m(s)),
        Error::NonFinite(s) => Error::NonFinite(m(s)),
        Error::Decode(s) => Error::Decode(m(s)),
        Error::Io(s) => Error::Io(m(s)),
    }
}

// ---------------------------------------------------------------------------
// Commands

fn cmd_gen_corpus(a: &GenCorpusArgs) -> Result<()> {
    echo(
        "gen-corpus",
        &[
            ("out", disp(&a.out)),
            ("n", a.n.to_string()),
            ("seed", a.seed.to_string()),
            ("noise", a.noise.to_string()),
            ("speech-dim", a.speech_dim.to_string()),
        ],
    );
    let cfg = WorldConfig {
        n_scenes: a.n,
        seed: a.seed,
        noise_sigma: a.noise,
        speech_dim: a.speech_dim,
    };
    let s = generate_corpus(&a.out, &cfg)?;
    println!("scenes train={} valid={} test={}", s.n_train, s.n_valid, s.n_test);
    Ok(())
}

fn cmd_train_tokenizers(a: &TrainTokenizersArgs) -> Result<()> {
    echo(
        "train-tokenizers",
        &[
            ("data", disp(&a.data)),
            ("out", disp(&a.out)),
            ("speech-vocab", a.speech_vocab.to_string()),
            ("image-vocab", a.image_vocab.to_string()),
            ("text-vocab", a.text_vocab.to_string()),
            ("kmeans-iters", a.kmeans_iters.to_string()),
            ("seed", a.seed.to_string()),
        ],
    );
    fs::create_dir_all(&a.out).map_err(Error::from)?;
    let entries = read_manifest(&manifest_path(&a.data, Split::Train))?;
    let grid = PatchGrid::default_32();

    let mut frame_data: Vec<f64> = Vec::new();
    let mut frame_rows = 0usize;
    let mut dim = 0usize;
    let mut patch_data: Vec<f64> = Vec::new();
    let mut patch_rows = 0usize;
    let mut captions = Vec::with_capacity(entries.len());
    for e in &entries {
        let frames = read_features::<f64>(&a.data.join(&e.speech))?;
        dim = frames.cols();
        frame_rows += frames.rows();
        frame_data.extend_from_slice(frames.data());
        let img = read_ppm(&a.data.join(&e.image))?;
        let patches = raster_to_patches::<f64>(&img, &grid)?;
        patch_rows += patches.rows();
        patch_data.extend_from_slice(patches.data());
        captions.push(e.caption.clone());
    }
    let frames = Mat::from_vec(frame_rows, dim, frame_data)?;
    let patches = Mat::from_vec(patch_rows, grid.patch_dim(), patch_data)?;

    let opts = KmeansOptions { max_iters: a.kmeans_iters };
    let (speech_cb, sr) =
        Codebook::train(&frames, a.speech_vocab, &opts, derive_seed(a.seed, "speech-codebook"))?;
    let (image_cb, ir) =
        Codebook::train(&patches, a.image_vocab, &opts, derive_seed(a.seed, "image-codebook"))?;
    let bpe = BpeModel::train(&captions, a.text_vocab)?;

    write_codebook(&a.out.join("speech.tmtcb"), &speech_cb)?;
    write_codebook(&a.out.join("image.tmtcb"), &image_cb)?;
    write_bpe(&a.out.join("text.tmtbpe"), &bpe)?;
    println!(
        "speech-codebook k={} frames={} iterations={} converged={}",
        speech_cb.k(),
        frame_rows,
        sr.iterations,
        sr.converged
    );
    println!(
        "image-codebook k={} patches={} iterations={} converged={}",
        image_cb.k(),
        patch_rows,
        ir.iterations,
        ir.converged
    );
    println!(
        "text-bpe vocab={} base={} merges={}",
        bpe.vocab_size(),
        bpe.n_base(),
        bpe.vocab_size() - bpe.n_base()
    );
    Ok(())
}

fn cmd_tokenize(a: &TokenizeArgs) -> Result<()> {
    echo(
        "tokenize",
        &[
            ("data", disp(&a.data)),
            ("tokenizers", disp(&a.tokenizers)),
            ("out", disp(&a.out)),
            ("seed", a.seed.to_string()),
        ],
    );
    let tk = load_tokenizers(&a.tokenizers)?;
    let bundle = TokenizerBundle::new(&tk.vocab, &tk.speech, &tk.image, &tk.bpe);
    fs::create_dir_all(&a.out).map_err(Error::from)?;
    for split in Split::ALL {
        let records = tokenize_manifest(&a.data, split, &bundle)?;
        write_token_corpus(&tokens_path(&a.out, split), &records)?;
        println!("split={} examples={}", split.name(), records.len() / 3);
    }
    Ok(())
}

fn cmd_train(a: &TrainArgs) -> Result<PathBuf> {
    let dirs = parse_directions(&a.directions)?;
    let mut pairs = vec![
        ("data", disp(&a.data)),
        ("tokenizers", disp(&a.tokenizers)),
        ("out", disp(&a.out)),
        ("directions", directions_echo(&dirs)),
        ("seed", a.seed.to_string()),
    ];
    a.model.echo(&mut pairs);
    a.optim.echo(&mut pairs);
    echo("train", &pairs);

    let tk = load_tokenizers(&a.tokenizers)?;
    let corpus = TokenizedCorpus::read(&tokens_path(&a.data, Split::Train))?;
    let data = TrainSet::from_corpus(&corpus);
    let mcfg = a.model.to_config(tk.vocab.total() as usize);
    let mut params: ModelParams<f32> = ModelParams::init(&mcfg, derive_seed(a.seed, "init"))?;
    let tcfg = TrainConfig {
        steps: a.optim.steps,
        batch_size: a.optim.batch_size,
        peak_lr: a.optim.peak_lr,
        warmup: a.optim.warmup,
        clip: a.optim.clip,
        log_every: a.optim.log_every,
        ckpt_every: a.optim.ckpt_every,
        seed: a.seed,
        directions: dirs,
    };
    fs::create_dir_all(&a.out).map_err(Error::from)?;
    let mut log_file = fs::File::create(a.out.join("train.log")).map_err(Error::from)?;
    train(&mut params, &data, &tk.vocab, &tcfg, Some(&a.out), &mut |line| {
        println!("{line}");
        let _ = writeln!(log_file, "{line}");
    })?;
    log_file.flush().map_err(Error::from)?;

    let valid = tokens_path(&a.data, Split::Valid);
    if valid.exists() {
        let vc = TokenizedCorpus::read(&valid)?;
        let (total, per) = mean_corpus_loss(&params, &tk.vocab, &vc, 32)?;
        for (d, l) in &per {
            println!("valid dir={d} loss={l:.6}");
        }
        println!("valid loss={total:.6}");
    }
    let ckpt = a.out.join("ckpt-final.tmtckpt");
    println!("checkpoint={}", ckpt.display());
    Ok(ckpt)
}

fn cmd_bt(a: &BtArgs) -> Result<()> {
    let dirs = parse_directions(&a.directions)?;
    echo(
        "bt",
        &[
            ("model", disp(&a.model)),
            ("tokenizers", disp(&a.tokenizers)),
            ("data", disp(&a.data)),
            ("out", disp(&a.out)),
            ("directions", directions_echo(&dirs)),
            ("per-direction", a.per_direction.to_string()),
            ("beam", a.beam.to_string()),
            ("alpha", a.alpha.to_string()),
            ("continue-steps", a.continue_steps.to_string()),
            ("continue-peak-lr", a.continue_peak_lr.to_string()),
            ("continue-warmup", a.continue_warmup.to_string()),
            ("batch-size", a.batch_size.to_string()),
            ("clip", a.clip.to_string()),
            ("log-every", a.log_every.to_string()),
            ("ckpt-every", a.ckpt_every.to_string()),
            ("seed", a.seed.to_string()),
        ],
    );
    let tk = load_tokenizers(&a.tokenizers)?;
    let mut params = load_model(&a.model, &tk.vocab)?;
    let corpus = TokenizedCorpus::read(&tokens_path(&a.data, Split::Train))?;
    fs::create_dir_all(&a.out).map_err(Error::from)?;

    let dcfg = DecodeConfig { beam: a.beam, alpha: a.alpha, max_steps: None, image_len: 32 };
    let outcome = back_translate(&params, &tk.vocab, &corpus, &dirs, a.per_direction, &dcfg)?;
    write_token_corpus(&a.out.join("bt-pairs.tsv"), &outcome.records)?;
    for (d, attempted, usable) in &outcome.per_direction {
        println!("bt dir={d} attempted={attempted} usable={usable}");
    }
    println!(
        "bt attempted={} usable={} fraction={:.4}",
        outcome.attempted,
        outcome.usable,
        outcome.usable_fraction()
    );
    if a.continue_steps == 0 {
        return Ok(());
    }

    let valid = tokens_path(&a.data, Split::Valid);
    let held_out =
        if valid.exists() { Some(TokenizedCorpus::read(&valid)?) } else { None };
    if let Some(vc) = &held_out {
        let (total, per) = mean_corpus_loss(&params, &tk.vocab, vc, 32)?;
        for (d, l) in &per {
            println!("valid-before dir={d} loss={l:.6}");
        }
        println!("valid-before loss={total:.6}");
    }

    let mut data = TrainSet::from_corpus(&corpus);
    let merged = data.add_pseudo_pairs(&outcome.records)?;
    println!("pseudo-pairs merged={merged}");
    let tcfg = TrainConfig {
        steps: a.continue_steps,
        batch_size: a.batch_size,
        peak_lr: a.continue_peak_lr,
        warmup: a.continue_warmup,
        clip: a.clip,
        log_every: a.log_every,
        ckpt_every: a.ckpt_every,
        seed: a.seed,
        directions: Direction::ALL.to_vec(),
    };
    let mut log_file = fs::File::create(a.out.join("bt-train.log")).map_err(Error::from)?;
    train(&mut params, &data, &tk.vocab, &tcfg, Some(&a.out), &mut |line| {
        println!("{line}");
        let _ = writeln!(log_file, "{line}");
    })?;
    log_file.flush().map_err(Error::from)?;

    if let Some(vc) = &held_out {
        let (total, per) = mean_corpus_loss(&params, &tk.vocab, vc, 32)?;
        for (d, l) in &per {
            println!("valid-after dir={d} loss={l:.6}");
        }
        println!("valid-after loss={total:.6}");
    }
    println!("checkpoint={}", a.out.join("ckpt-final.tmtckpt").display());
    Ok(())
}

fn cmd_translate(a: &TranslateArgs) -> Result<()> {
    let d = Direction::parse(&a.direction)?;
    echo(
        "translate",
        &[
            ("model", disp(&a.model)),
            ("tokenizers", disp(&a.tokenizers)),
            ("direction", d.to_string()),
            ("input", disp(&a.input)),
            ("out", a.out.as_deref().map(disp).unwrap_or_default()),
            ("beam", a.beam.to_string()),
            ("alpha", a.alpha.to_string()),
            (
                "max-steps",
                a.max_steps.map(|v| v.to_string()).unwrap_or_else(|| "model-capacity".into()),
            ),
            ("seed", a.seed.to_string()),
        ],
    );
    let tk = load_tokenizers(&a.tokenizers)?;
    let params = load_model(&a.model, &tk.vocab)?;
    let bundle = TokenizerBundle::new(&tk.vocab, &tk.speech, &tk.image, &tk.bpe);

    let src: Vec<u32> = match d.source {
        Modality::Image => {
            tokenize_image(&tk.image, &tk.vocab, &read_ppm(&a.input)?, &bundle.grid)?.tokens
        }
        Modality::Speech => {
            let frames = read_features::<f64>(&a.input)?;
            tokenize_speech(&tk.speech, &tk.vocab, &frames, SPEECH_TOKEN_CAP)?.tokens
        }
        Modality::Text => {
            let text = fs::read_to_string(&a.input)
                .map_err(|e| Error::Io(format!("{}: {e}", a.input.display())))?;
            bundle.text_to_tokens(text.trim_end())?
        }
    };
    let dcfg = DecodeConfig { beam: a.beam, alpha: a.alpha, max_steps: a.max_steps, image_len: 32 };
    let hyp = translate_tokens(&params, &tk.vocab, &src, d, &dcfg)?;
    println!("source-tokens={}", join_ids(&src));
    println!("output-tokens={}", join_ids(&hyp.tokens));
    println!("finished={} score={:.6}", hyp.finished, hyp.score);

    if let Some(out) = &a.out {
        fs::create_dir_all(out).map_err(Error::from)?;
    }
    match d.target {
        Modality::Text => {
            let seq = TokenSequence::new(Modality::Text, hyp.tokens.clone());
            let text = decode_text(&tk.bpe, &tk.vocab, &seq)?;
            println!("text={text}");
            if let Some(out) = &a.out {
                fs::write(out.join("translation.txt"), format!("{text}\n"))
                    .map_err(Error::from)?;
                println!("wrote={}", out.join("translation.txt").display());
            }
        }
        Modality::Speech => {
            let transcript = speech_tokens_to_transcript(&tk.speech, &tk.vocab, &hyp.tokens)?;
            println!("transcript={transcript}");
            if let Some(out) = &a.out {
                let mut data = Vec::with_capacity(hyp.tokens.len() * tk.speech.dim());
                for &t in &hyp.tokens {
                    let (_, local) = tk.vocab.global_to_local(t)?;
                    data.extend_from_slice(tk.speech.dequantize(local as usize)?);
                }
                let frames = Mat::from_vec(hyp.tokens.len(), tk.speech.dim(), data)?;
                write_features(&out.join("translation.feat"), &frames)?;
                println!("wrote={}", out.join("translation.feat").display());
            }
        }
        Modality::Image => {
            let seq = TokenSequence::new(Modality::Image, hyp.tokens.clone());
            let img = tmt_core::codebook::detokenize_image(&tk.image, &tk.vocab, &seq, &bundle.grid)?;
            if let Some(out) = &a.out {
                write_ppm(&out.join("translation.ppm"), &img)?;
                println!("wrote={}", out.join("translation.ppm").display());
            }
        }
    }
    Ok(())
}

fn cmd_evaluate(a: &EvaluateArgs) -> Result<Vec<(Direction, DirectionScores)>> {
    let split = Split::parse(&a.split)?;
    let dirs = parse_directions(&a.directions)?;
    echo(
        "evaluate",
        &[
            ("model", disp(&a.model)),
            ("tokenizers", disp(&a.tokenizers)),
            ("data", disp(&a.data)),
            ("out", disp(&a.out)),
            ("split", split.name().to_string()),
            ("directions", directions_echo(&dirs)),
            ("beam", a.beam.to_string()),
            ("alpha", a.alpha.to_string()),
            ("seed", a.seed.to_string()),
        ],
    );
    let tk = load_tokenizers(&a.tokenizers)?;
    let params = load_model(&a.model, &tk.vocab)?;
    let corpus = TokenizedCorpus::read(&tokens_path(&a.data, split))?;
    fs::create_dir_all(&a.out).map_err(Error::from)?;
    let ctx = EvalContext {
        params: &params,
        vocab: &tk.vocab,
        speech_codebook: &tk.speech,
        image_codebook: &tk.image,
        bpe: &tk.bpe,
        decode: DecodeConfig { beam: a.beam, alpha: a.alpha, max_steps: None, image_len: 32 },
    };

    let mut all = Vec::with_capacity(dirs.len());
    for &d in &dirs {
        let examples: Vec<EvalExample> = (0..corpus.len())
            .map(|i| EvalExample {
                id: corpus.ids[i].clone(),
                src: corpus.seqs(d.source)[i].clone(),
                tgt: corpus.seqs(d.target)[i].clone(),
            })
            .collect();
        let (scores, hyps) = evaluate_direction(&ctx, d, &examples)?;
        let mut preds = Vec::with_capacity(hyps.len());
        for (ex, h) in examples.iter().zip(&hyps) {
            let payload = match d.target {
                Modality::Text => {
                    let seq = TokenSequence::new(Modality::Text, h.tokens.clone());
                    decode_text(&tk.bpe, &tk.vocab, &seq)?
                }
                Modality::Speech => {
                    speech_tokens_to_transcript(&tk.speech, &tk.vocab, &h.tokens)?
                }
                Modality::Image => join_ids(&h.tokens),
            };
            preds.push(Prediction { id: ex.id.clone(), direction: d, payload });
        }
        write_predictions(&a.out.join(format!("predictions-{d}.tsv")), &preds)?;
        println!("direction={d}");
        for (k, v) in scores.key_values() {
            println!("{k}={v:.6}");
        }
        all.push((d, scores));
    }
    print_metric_table(&all);
    if all.iter().any(|(d, _)| d.target == Modality::Image) {
        println!(
            "note: image columns are token exact-match and codebook patch cosine, \
             not a learned perceptual score"
        );
    }
    Ok(all)
}

fn print_metric_table(rows: &[(Direction, DirectionScores)]) {
    const COLS: [&str; 7] =
        ["bleu4", "rouge_l", "cider", "cider_x100", "wer", "exact_match", "patch_cosine"];
    let mut table = vec![];
    for (d, s) in rows {
        let mut cells = vec![d.to_string()];
        let kv = s.key_values();
        let find = |k: &str| kv.iter().find(|(n, _)| *n == k).map(|(_, v)| *v);
        for col in COLS {
            let v = match col {
                "cider_x100" => find("cider").map(|c| c * 100.0),
                _ => find(col),
            };
            cells.push(v.map(|v| format!("{v:.4}")).unwrap_or_else(|| "-".into()));
        }
        table.push(cells);
    }
    let mut header = vec!["direction".to_string()];
    header.extend(COLS.iter().map(|c| c.to_string()));
    let widths: Vec<usize> = (0..header.len())
        .map(|i| {
            table
                .iter()
                .map(|r| r[i].len())
                .chain(std::iter::once(header[i].len()))
                .max()
                .unwrap_or(0)
        })
        .collect();
    let fmt_row = |cells: &[String]| {
        cells
            .iter()
            .zip(&widths)
            .map(|(c, w)| format!("{c:<w$}"))
            .collect::<Vec<_>>()
            .join("  ")
            .trim_end()
            .to_string()
    };
    println!("{}", fmt_row(&header));
    for row in &table {
        println!("{}", fmt_row(row));
    }
}

fn cmd_sweep(a: &SweepArgs) -> Result<()> {
    let sizes = parse_sizes(&a.sizes)?;
    let mut pairs = vec![
        ("data", disp(&a.data)),
        ("out", disp(&a.out)),
        (
            "sizes",
            sizes.iter().map(|s| s.to_string()).collect::<Vec<_>>().join(","),
        ),
        ("image-vocab", a.image_vocab.to_string()),
        ("text-vocab", a.text_vocab.to_string()),
        ("kmeans-iters", a.kmeans_iters.to_string()),
        ("split", a.split.clone()),
        ("beam", a.beam.to_string()),
        ("seed", a.seed.to_string()),
    ];
    a.model.echo(&mut pairs);
    a.optim.echo(&mut pairs);
    echo("sweep-speech-vocab", &pairs);

    let mut rows = Vec::with_capacity(sizes.len());
    for &size in &sizes {
        let row = run_sweep_size(a, size)
            .map_err(|e| with_context(&format!("speech vocab {size}"), e))?;
        rows.push(row);
    }

    let header = ["size", "wer_s2t", "bleu4_i2s", "rouge_l_i2s", "cider_i2s"];
    let mut tsv = header.join("\t");
    tsv.push('\n');
    let cells: Vec<[String; 5]> = rows
        .iter()
        .map(|r| {
            [
                r.size.to_string(),
                format!("{:.6}", r.wer_s2t),
                format!("{:.6}", r.bleu4_i2s),
                format!("{:.6}", r.rouge_l_i2s),
                format!("{:.6}", r.cider_i2s),
            ]
        })
        .collect();
    let widths: Vec<usize> = (0..header.len())
        .map(|i| cells.iter().map(|r| r[i].len()).chain([header[i].len()]).max().unwrap())
        .collect();
    let fmt_row = |row: &[String]| {
        row.iter()
            .zip(&widths)
            .map(|(c, w)| format!("{c:<w$}"))
            .collect::<Vec<_>>()
            .join("  ")
            .trim_end()
            .to_string()
    };
    println!("{}", fmt_row(&header.map(String::from)));
    for r in &cells {
        println!("{}", fmt_row(r));
        tsv.push_str(&r.join("\t"));
        tsv.push('\n');
    }
    fs::write(a.out.join("sweep.tsv"), tsv).map_err(Error::from)?;
    println!("wrote={}", a.out.join("sweep.tsv").display());
    Ok(())
}

struct SweepRow {
    size: usize,
    wer_s2t: f64,
    bleu4_i2s: f64,
    rouge_l_i2s: f64,
    cider_i2s: f64,
}

fn run_sweep_size(a: &SweepArgs, size: usize) -> Result<SweepRow> {
    let size_dir = a.out.join(format!("size-{size}"));
    let tok_dir = size_dir.join("tokenizers");
    let tokens_dir = size_dir.join("tokens");
    let model_dir = size_dir.join("model");
    cmd_train_tokenizers(&TrainTokenizersArgs {
        data: a.data.clone(),
        out: tok_dir.clone(),
        speech_vocab: size,
        image_vocab: a.image_vocab,
        text_vocab: a.text_vocab,
        kmeans_iters: a.kmeans_iters,
        seed: a.seed,
        config: None,
    })?;
    cmd_tokenize(&TokenizeArgs {
        data: a.data.clone(),
        tokenizers: tok_dir.clone(),
        out: tokens_dir.clone(),
        seed: a.seed,
        config: None,
    })?;
    let ckpt = cmd_train(&TrainArgs {
        data: tokens_dir.clone(),
        tokenizers: tok_dir.clone(),
        out: model_dir,
        directions: "all".into(),
        seed: a.seed,
        model: a.model.clone(),
        optim: a.optim.clone(),
        config: None,
    })?;
    let scores = cmd_evaluate(&EvaluateArgs {
        model: ckpt,
        tokenizers: tok_dir,
        data: tokens_dir,
        out: size_dir.join("eval"),
        split: a.split.clone(),
        directions: "s2t,i2s".into(),
        beam: a.beam,
        alpha: 0.0,
        seed: a.seed,
        config: None,
    })?;

    let mut row = SweepRow {
        size,
        wer_s2t: f64::NAN,
        bleu4_i2s: f64::NAN,
        rouge_l_i2s: f64::NAN,
        cider_i2s: f64::NAN,
    };
    for (d, s) in scores {
        match s {
            DirectionScores::Text { wer, .. } if d.source == Modality::Speech => {
                row.wer_s2t = wer;
            }
            DirectionScores::Speech { bleu4, rouge_l, cider, .. }
                if d.source == Modality::Image =>
            {
                row.bleu4_i2s = bleu4;
                row.rouge_l_i2s = rouge_l;
                row.cider_i2s = cider;
            }
            _ => {}
        }
    }
    Ok(row)
}

fn parse_sizes(s: &str) -> Result<Vec<usize>> {
    let mut out = Vec::new();
    for part in s.split(',') {
        let part = part.trim();
        let v: usize = part
            .parse()
            .map_err(|_| Error::InvalidArgument(format!("bad size {part:?} in {s:?}")))?;
        if v == 0 {
            return Err(Error::InvalidArgument("speech vocab size 0 is not usable".into()));
        }
        if out.contains(&v) {
            return Err(Error::InvalidArgument(format!("size {v} listed twice")));
        }
        out.push(v);
    }
    if out.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "a sweep needs at least 2 sizes, got {}",
            out.len()
        )));
    }
    Ok(out)
}

fn cmd_bits(a: &BitsArgs) -> Result<()> {
    echo(
        "bits-report",
        &[
            ("audio-seconds", a.audio_seconds.to_string()),
            ("token-rate", a.token_rate.to_string()),
            ("speech-vocab", a.speech_vocab.to_string()),
            ("image-hw", a.image_hw.to_string()),
            ("image-tokens", a.image_tokens.to_string()),
            ("image-vocab", a.image_vocab.to_string()),
            ("seed", a.seed.to_string()),
        ],
    );
    let r = bits_report(
        a.audio_seconds,
        a.token_rate,
        a.speech_vocab,
        a.image_hw,
        a.image_tokens,
        a.image_vocab,
    )?;
    match r.audio_percent {
        Some(p) => println!(
            "speech: raw={} bits, tokens={} bits ({} bits/token), ratio={:.6}%",
            r.audio_raw_bits, r.audio_token_bits, r.speech_token_width, p
        ),
        None => println!(
            "speech: raw=0 bits, tokens=0 bits ({} bits/token), ratio=undefined (zero-length audio)",
            r.speech_token_width
        ),
    }
    println!(
        "image: raw={} bits, tokens={} bits ({} bits/token), ratio={:.6}%",
        r.image_raw_bits, r.image_token_bits, r.image_token_width, r.image_percent
    );
    Ok(())
}
