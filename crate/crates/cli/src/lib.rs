//! Command-line front end. Flag parsing and the exit-code contract live
//! here; subcommand bodies live in [`commands`]. [`run`] never exits the
//! process and writes only to the sinks it is handed, so tests can drive
//! the full binary contract in-process.

mod commands;

use std::ffi::OsString;
use std::io::Write;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use scribe_core::dsp::WindowFn;
use scribe_core::Error;

/// Success.
pub const EXIT_OK: i32 = 0;
/// Usage error: unknown flags, missing required flags, invalid settings.
pub const EXIT_USAGE: i32 = 1;
/// Data error: missing or corrupt files, bad manifests, empty references.
pub const EXIT_DATA: i32 = 2;
/// Numeric failure: divergence or a gradient check over tolerance.
pub const EXIT_NUMERIC: i32 = 3;

#[derive(Parser)]
#[command(
    name = "scribe",
    version,
    about = "From-scratch speech-to-text: tone-chord corpora, bidirectional \
             LSTM acoustic models, CTC training, beam decoding, LM rescoring",
    after_help = "Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.\n\
                  Stdout carries machine-parseable CSV/TSV only; diagnostics go to stderr."
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize a deterministic tone-chord corpus and write a manifest
    SynthData(SynthDataArgs),
    /// Print the magnitude spectrum of a tone mix as CSV
    Spectrum(SpectrumArgs),
    /// Train the acoustic model on a manifest and write a checkpoint
    Train(TrainArgs),
    /// Transcribe one raw PCM file with a trained acoustic model
    Transcribe(TranscribeArgs),
    /// Print n-best beam-search transcripts for one audio file as TSV
    Nbest(NbestArgs),
    /// Re-rank n-best transcripts with a character LM and print TSV
    Rescore(RescoreArgs),
    /// Score a model against manifest references (per-utterance CER/WER)
    Evaluate(EvaluateArgs),
    /// Check analytic gradients against central differences
    Gradcheck(GradcheckArgs),
    /// Train the character LM on manifest transcripts
    TrainLm(TrainLmArgs),
}

#[derive(Args)]
struct SynthDataArgs {
    /// Directory for the PCM files and manifest.jsonl
    #[arg(long)]
    out: PathBuf,
    /// RNG seed; the corpus is a pure function of it
    #[arg(long)]
    seed: u64,
    /// Number of utterances
    #[arg(long, default_value_t = 20)]
    n: usize,
    /// Minimum transcript length in characters
    #[arg(long, default_value_t = 3)]
    min_len: usize,
    /// Maximum transcript length in characters
    #[arg(long, default_value_t = 5)]
    max_len: usize,
    /// Sampling rate in Hz
    #[arg(long, default_value_t = 8000.0)]
    sr: f64,
    /// Duration of one character chord in milliseconds
    #[arg(long, default_value_t = 100.0)]
    char_ms: f64,
    /// Alphabet file, one symbol per line; defaults to A-Z plus space
    #[arg(long)]
    alphabet: Option<PathBuf>,
}

#[derive(Args)]
struct SpectrumArgs {
    /// Comma-separated tone frequencies in Hz
    #[arg(long, value_delimiter = ',', required = true)]
    freqs: Vec<f64>,
    /// Comma-separated per-tone amplitudes; defaults to 1.0 each
    #[arg(long, value_delimiter = ',')]
    amps: Option<Vec<f64>>,
    /// Sampling rate in Hz
    #[arg(long)]
    sr: f64,
    /// Duration in seconds
    #[arg(long, default_value_t = 1.0)]
    dur: f64,
}

#[derive(Args)]
struct TrainArgs {
    /// Manifest of training utterances (JSONL)
    #[arg(long)]
    manifest: PathBuf,
    /// Output checkpoint path
    #[arg(long)]
    out: PathBuf,
    /// RNG seed for init, shuffling, and regularizers; rerunning with the
    /// same seed and data reproduces the checkpoint bit for bit
    #[arg(long)]
    seed: u64,
    /// Stacked bidirectional LSTM layers
    #[arg(long, default_value_t = 2)]
    layers: usize,
    /// Hidden units per direction
    #[arg(long, default_value_t = 32)]
    hidden: usize,
    /// TOML file with optimizer fields; explicit flags override it
    #[arg(long)]
    config: Option<PathBuf>,
    /// Learning rate (default 0.01)
    #[arg(long)]
    lr: Option<f64>,
    /// Momentum coefficient (default 0.9)
    #[arg(long)]
    momentum: Option<f64>,
    /// Global L2 gradient-clipping threshold (default 5.0)
    #[arg(long)]
    clip: Option<f64>,
    /// Inter-layer dropout probability (default 0)
    #[arg(long)]
    dropout: Option<f64>,
    /// Std of Gaussian weight noise at gradient evaluation (default 0)
    #[arg(long)]
    weight_noise: Option<f64>,
    /// Training epochs (default 100)
    #[arg(long)]
    epochs: Option<usize>,
    /// Visit utterances in manifest order instead of reshuffling per epoch
    #[arg(long)]
    no_shuffle: bool,
    /// Alphabet file; defaults to A-Z plus space
    #[arg(long)]
    alphabet: Option<PathBuf>,
    /// Analysis window length in milliseconds
    #[arg(long, default_value_t = 20.0)]
    frame_ms: f64,
    /// Hop between window starts in milliseconds
    #[arg(long, default_value_t = 20.0)]
    hop_ms: f64,
    /// Keep spectral bins at or below this frequency
    #[arg(long, default_value_t = 4000.0)]
    cutoff_hz: f64,
    /// Transform size; defaults to zero-padding each frame to a power of two
    #[arg(long)]
    fft_size: Option<usize>,
    /// Analysis window shape
    #[arg(long, value_enum, default_value_t = WindowArg::Rectangular)]
    window: WindowArg,
}

#[derive(Args)]
struct TranscribeArgs {
    /// Acoustic checkpoint; framing settings are read from it
    #[arg(long)]
    model: PathBuf,
    /// Raw signed 16-bit little-endian PCM, no header
    #[arg(long)]
    audio: PathBuf,
    /// Sampling rate of the PCM data in Hz
    #[arg(long)]
    sr: f64,
    /// Prefix beam width; omitted means greedy best-path decoding
    #[arg(long)]
    beam_width: Option<usize>,
}

#[derive(Args)]
struct NbestArgs {
    /// Acoustic checkpoint; framing settings are read from it
    #[arg(long)]
    model: PathBuf,
    /// Raw signed 16-bit little-endian PCM, no header
    #[arg(long)]
    audio: PathBuf,
    /// Sampling rate of the PCM data in Hz
    #[arg(long)]
    sr: f64,
    /// Number of transcripts to keep
    #[arg(long, default_value_t = 5)]
    nbest: usize,
    /// Prefix beam width; defaults to max(8, --nbest)
    #[arg(long)]
    beam_width: Option<usize>,
    /// Rank by per-character score instead of total log probability
    #[arg(long)]
    length_normalize: bool,
}

#[derive(Args)]
struct RescoreArgs {
    #[command(flatten)]
    nbest: NbestArgs,
    /// Character LM checkpoint; its alphabet must match the acoustic model
    #[arg(long)]
    lm: PathBuf,
    /// LM interpolation weight: combined = acoustic + lambda * LM
    #[arg(long, default_value_t = 1.0)]
    lambda: f64,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Manifest of reference utterances (JSONL)
    #[arg(long)]
    manifest: PathBuf,
    /// Acoustic checkpoint; framing settings are read from it
    #[arg(long)]
    model: PathBuf,
    /// Prefix beam width; omitted means greedy unless --nbest or --lm asks
    /// for a beam, then max(8, --nbest)
    #[arg(long)]
    beam_width: Option<usize>,
    /// Hypotheses to keep per utterance before picking the best
    #[arg(long, default_value_t = 1)]
    nbest: usize,
    /// Character LM checkpoint for rescored evaluation
    #[arg(long)]
    lm: Option<PathBuf>,
    /// LM interpolation weight: combined = acoustic + lambda * LM
    #[arg(long, default_value_t = 1.0)]
    lambda: f64,
    /// Rank by per-character score instead of total log probability
    #[arg(long)]
    length_normalize: bool,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Seed for the model, features, and target of the check instance
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Central-difference step
    #[arg(long, default_value_t = 1e-5)]
    step: f64,
    /// Largest acceptable relative error; above it the exit code is 3
    #[arg(long, default_value_t = 1e-3)]
    tol: f64,
}

#[derive(Args)]
struct TrainLmArgs {
    /// Manifest whose transcripts are the LM training text
    #[arg(long)]
    manifest: PathBuf,
    /// Output checkpoint path
    #[arg(long)]
    out: PathBuf,
    /// RNG seed for init and shuffling
    #[arg(long)]
    seed: u64,
    /// Hidden units of the single forward LSTM layer
    #[arg(long, default_value_t = 16)]
    hidden: usize,
    /// TOML file with optimizer fields; explicit flags override it
    #[arg(long)]
    config: Option<PathBuf>,
    /// Learning rate (default 0.01)
    #[arg(long)]
    lr: Option<f64>,
    /// Momentum coefficient (default 0.9)
    #[arg(long)]
    momentum: Option<f64>,
    /// Global L2 gradient-clipping threshold (default 5.0)
    #[arg(long)]
    clip: Option<f64>,
    /// Std of Gaussian weight noise at gradient evaluation (default 0)
    #[arg(long)]
    weight_noise: Option<f64>,
    /// Training epochs (default 100)
    #[arg(long)]
    epochs: Option<usize>,
    /// Visit transcripts in manifest order instead of reshuffling per epoch
    #[arg(long)]
    no_shuffle: bool,
    /// Alphabet file; defaults to A-Z plus space
    #[arg(long)]
    alphabet: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum WindowArg {
    Rectangular,
    Hann,
}

impl From<WindowArg> for WindowFn {
    fn from(w: WindowArg) -> WindowFn {
        match w {
            WindowArg::Rectangular => WindowFn::Rectangular,
            WindowArg::Hann => WindowFn::Hann,
        }
    }
}

/// Parse `argv` and run the selected subcommand, writing machine output to
/// `out` and diagnostics to `err`. Returns the process exit code.
pub fn run<I, S>(argv: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            // Help and version requests are successes; everything else a
            // clap error catches is misuse.
            let rendered = e.render().to_string();
            return if e.use_stderr() {
                let _ = write!(err, "{rendered}");
                EXIT_USAGE
            } else {
                let _ = write!(out, "{rendered}");
                EXIT_OK
            };
        }
    };

    let result = match &cli.command {
        Command::SynthData(a) => commands::synth_data(a, out, err),
        Command::Spectrum(a) => commands::spectrum(a, out, err),
        Command::Train(a) => commands::train(a, out, err),
        Command::Transcribe(a) => commands::transcribe(a, out),
        Command::Nbest(a) => commands::nbest(a, out),
        Command::Rescore(a) => commands::rescore(a, out),
        Command::Evaluate(a) => commands::evaluate(a, out, err),
        Command::Gradcheck(a) => commands::gradcheck(a, out, err),
        Command::TrainLm(a) => commands::train_lm(a, out, err),
    };

    match result {
        Ok(code) => code,
        // A consumer hanging up mid-stream is not our failure.
        Err(Error::Io(e)) if e.kind() == std::io::ErrorKind::BrokenPipe => EXIT_OK,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            exit_code(&e)
        }
    }
}

/// Split runtime failures into the documented exit-code classes. Settings
/// problems count as usage; broken inputs count as data; only genuinely
/// numerical events reach 3.
fn exit_code(e: &Error) -> i32 {
    match e {
        Error::InvalidConfig(_)
        | Error::NyquistViolation { .. }
        | Error::LengthMismatch { .. }
        | Error::NonPowerOfTwo(_)
        | Error::InstanceTooLarge { .. } => EXIT_USAGE,
        Error::Diverged { .. } | Error::ImpossibleTarget => EXIT_NUMERIC,
        _ => EXIT_DATA,
    }
}
