//! Subcommand bodies. Every handler returns the exit code on success and a
//! [`scribe_core::Error`] otherwise; [`crate::run`] maps errors to codes.
//! Stdout gets machine-parseable rows only, with floats at 9 significant
//! digits; anything meant for humans goes to stderr.

use std::io::Write;
use std::path::{Path, PathBuf};

use scribe_core::corpus::{self, CorpusSpec, Manifest};
use scribe_core::ctc::{Alphabet, LabelSequence};
use scribe_core::dsp::{
    decode_pcm_s16le, dominant_peaks, extract_features, spectrum_of, synthesize_tones,
    FeatureConfig, Signal,
};
use scribe_core::eval::{self, EvalItem, EvalOptions};
use scribe_core::linalg::Mat;
use scribe_core::lm::{self, CharLm};
use scribe_core::nn::{ModelParams, ModelSpec};
use scribe_core::rng;
use scribe_core::train::{
    self, grad_check, load_acoustic_checkpoint, load_lm_checkpoint, save_acoustic_checkpoint,
    save_lm_checkpoint, TrainConfig, TrainItem,
};
use scribe_core::{Error, Result};

use crate::{
    EvaluateArgs, GradcheckArgs, NbestArgs, RescoreArgs, SpectrumArgs, SynthDataArgs, TrainArgs,
    TrainLmArgs, TranscribeArgs, EXIT_NUMERIC, EXIT_OK,
};

/// Beam width used when rescoring or n-best output needs a beam but the
/// user did not pick one.
const DEFAULT_BEAM_WIDTH: usize = 8;

/// Relative floor passed to [`dominant_peaks`] for the stderr peak summary.
const PEAK_REL_FLOOR: f64 = 0.05;

fn sig9(x: f64) -> String {
    format!("{x:.8e}")
}

fn load_alphabet(path: &Option<PathBuf>) -> Result<Alphabet> {
    match path {
        Some(p) => Alphabet::load(p),
        None => Ok(Alphabet::default_charset()),
    }
}

fn read_audio(path: &Path, sample_rate_hz: f64) -> Result<Signal> {
    let bytes = std::fs::read(path)?;
    decode_pcm_s16le(&bytes, sample_rate_hz)
}

/// An explicit width wins; otherwise a beam appears exactly when n-best
/// lists or an LM need one.
fn effective_beam(width: Option<usize>, n_best: usize, uses_lm: bool) -> Option<usize> {
    match width {
        Some(w) => Some(w),
        None if n_best > 1 || uses_lm => Some(n_best.max(DEFAULT_BEAM_WIDTH)),
        None => None,
    }
}

fn check_lm_alphabet(lm: &CharLm, acoustic: &Alphabet) -> Result<()> {
    if lm.alphabet().symbols() != acoustic.symbols() {
        return Err(Error::Malformed {
            what: "lm checkpoint",
            detail: "LM alphabet differs from the acoustic model's".into(),
        });
    }
    Ok(())
}

/// Optimizer fields accepted in a `--config` TOML file. Everything is
/// optional; defaults fill the gaps and explicit flags override the file.
#[derive(Default, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
struct ConfigFile {
    learning_rate: Option<f64>,
    momentum: Option<f64>,
    clip_norm: Option<f64>,
    dropout_p: Option<f64>,
    weight_noise_std: Option<f64>,
    epochs: Option<usize>,
    shuffle: Option<bool>,
    seed: Option<u64>,
}

/// Flag-level overrides shared by `train` and `train-lm`.
struct Overrides {
    lr: Option<f64>,
    momentum: Option<f64>,
    clip: Option<f64>,
    dropout: Option<f64>,
    weight_noise: Option<f64>,
    epochs: Option<usize>,
    no_shuffle: bool,
}

/// Defaults, then the config file, then explicit flags. The seed comes
/// only from `--seed`: a seed hiding in a config file is rejected so no
/// run's provenance depends on which file happened to be passed.
fn resolve_train_config(path: Option<&Path>, seed: u64, o: &Overrides) -> Result<TrainConfig> {
    let mut cfg = TrainConfig::default();
    if let Some(p) = path {
        let text = std::fs::read_to_string(p)?;
        let file: ConfigFile = toml::from_str(&text)
            .map_err(|e| Error::InvalidConfig(format!("config {}: {e}", p.display())))?;
        if file.seed.is_some() {
            return Err(Error::InvalidConfig(
                "set the seed with --seed, not the config file".into(),
            ));
        }
        if let Some(v) = file.learning_rate {
            cfg.learning_rate = v;
        }
        if let Some(v) = file.momentum {
            cfg.momentum = v;
        }
        if let Some(v) = file.clip_norm {
            cfg.clip_norm = v;
        }
        if let Some(v) = file.dropout_p {
            cfg.dropout_p = v;
        }
        if let Some(v) = file.weight_noise_std {
            cfg.weight_noise_std = v;
        }
        if let Some(v) = file.epochs {
            cfg.epochs = v;
        }
        if let Some(v) = file.shuffle {
            cfg.shuffle = v;
        }
    }
    if let Some(v) = o.lr {
        cfg.learning_rate = v;
    }
    if let Some(v) = o.momentum {
        cfg.momentum = v;
    }
    if let Some(v) = o.clip {
        cfg.clip_norm = v;
    }
    if let Some(v) = o.dropout {
        cfg.dropout_p = v;
    }
    if let Some(v) = o.weight_noise {
        cfg.weight_noise_std = v;
    }
    if let Some(v) = o.epochs {
        cfg.epochs = v;
    }
    if o.no_shuffle {
        cfg.shuffle = false;
    }
    cfg.seed = seed;
    cfg.validate()?;
    Ok(cfg)
}

pub(crate) fn synth_data(
    args: &SynthDataArgs,
    out: &mut dyn Write,
    err: &mut dyn Write,
) -> Result<i32> {
    let alphabet = load_alphabet(&args.alphabet)?;
    let spec = CorpusSpec {
        n: args.n,
        min_len: args.min_len,
        max_len: args.max_len,
        sample_rate_hz: args.sr,
        char_ms: args.char_ms,
    };
    let manifest = corpus::synth_corpus(&spec, &alphabet, args.seed, &args.out)?;
    for entry in &manifest.entries {
        writeln!(out, "{}\t{}", entry.id, entry.transcript)?;
    }
    writeln!(
        err,
        "wrote {} utterances under {}",
        manifest.entries.len(),
        args.out.display()
    )?;
    Ok(EXIT_OK)
}

pub(crate) fn spectrum(
    args: &SpectrumArgs,
    out: &mut dyn Write,
    err: &mut dyn Write,
) -> Result<i32> {
    let amps = match &args.amps {
        Some(a) => a.clone(),
        None => vec![1.0; args.freqs.len()],
    };
    let signal = synthesize_tones(&args.freqs, &amps, args.dur, args.sr)?;
    let spectrum = spectrum_of(&signal);
    writeln!(out, "frequency_hz,magnitude")?;
    for (bin, magnitude) in spectrum.magnitudes.iter().enumerate() {
        writeln!(out, "{},{}", sig9(spectrum.frequency(bin)), sig9(*magnitude))?;
    }
    let peaks: Vec<String> = dominant_peaks(&spectrum, PEAK_REL_FLOOR)
        .iter()
        .map(|&bin| format!("{:.1}", spectrum.frequency(bin)))
        .collect();
    writeln!(err, "dominant peaks at {} Hz", peaks.join(", "))?;
    Ok(EXIT_OK)
}

fn load_train_items(
    manifest: &Manifest,
    alphabet: &Alphabet,
    features: &FeatureConfig,
) -> Result<Vec<TrainItem>> {
    manifest
        .entries
        .iter()
        .map(|entry| {
            let utt = corpus::load_utterance(entry)?;
            let feats = extract_features(&utt.audio, features)?;
            let labels = alphabet.encode(&utt.transcript)?;
            Ok(TrainItem {
                id: utt.id,
                features: feats.frames,
                labels,
            })
        })
        .collect()
}

pub(crate) fn train(args: &TrainArgs, out: &mut dyn Write, err: &mut dyn Write) -> Result<i32> {
    let config = resolve_train_config(
        args.config.as_deref(),
        args.seed,
        &Overrides {
            lr: args.lr,
            momentum: args.momentum,
            clip: args.clip,
            dropout: args.dropout,
            weight_noise: args.weight_noise,
            epochs: args.epochs,
            no_shuffle: args.no_shuffle,
        },
    )?;
    let alphabet = load_alphabet(&args.alphabet)?;
    let features = FeatureConfig {
        frame_ms: args.frame_ms,
        hop_ms: args.hop_ms,
        cutoff_hz: args.cutoff_hz,
        fft_size: args.fft_size,
        window: args.window.into(),
    };
    let manifest = corpus::load_manifest(&args.manifest)?;
    let items = load_train_items(&manifest, &alphabet, &features)?;
    let Some(first) = items.first() else {
        return Err(Error::EmptyCorpus);
    };
    let spec = ModelSpec {
        layers: args.layers,
        hidden: args.hidden,
        input: first.features.cols(),
        alphabet_len: alphabet.len(),
    };
    let model = ModelParams::init(&spec, &mut rng::stream(config.seed))?;
    let (trained, report) = train::train_acoustic(model, &items, &config)?;
    for (epoch, (loss, cer)) in report.epoch_loss.iter().zip(&report.epoch_cer).enumerate() {
        writeln!(out, "{epoch}\t{}\t{}", sig9(*loss), sig9(*cer))?;
    }
    save_acoustic_checkpoint(&args.out, &trained, &alphabet, &features)?;
    writeln!(
        err,
        "wrote {} ({} params, {} epochs, {:.1} s)",
        args.out.display(),
        trained.num_params(),
        config.epochs,
        report.wall_time_s
    )?;
    Ok(EXIT_OK)
}

pub(crate) fn transcribe(args: &TranscribeArgs, out: &mut dyn Write) -> Result<i32> {
    let (model, alphabet, features) = load_acoustic_checkpoint(&args.model)?;
    let signal = read_audio(&args.audio, args.sr)?;
    let feats = extract_features(&signal, &features)?;
    let opts = EvalOptions {
        beam_width: args.beam_width,
        ..EvalOptions::default()
    };
    let text = eval::decode_utterance(&model, &alphabet, &feats.frames, &opts)?;
    writeln!(out, "{text}")?;
    Ok(EXIT_OK)
}

/// Shared body of `nbest` and `rescore`: decode one file to a TSV ranking.
/// With an LM the rows gain a `log_p_lm` column before the transcript.
fn print_ranking(args: &NbestArgs, lm: Option<(&Path, f64)>, out: &mut dyn Write) -> Result<i32> {
    let (model, alphabet, features) = load_acoustic_checkpoint(&args.model)?;
    let lm_model = match lm {
        Some((path, _)) => {
            let m = load_lm_checkpoint(path)?;
            check_lm_alphabet(&m, &alphabet)?;
            Some(m)
        }
        None => None,
    };
    let signal = read_audio(&args.audio, args.sr)?;
    let feats = extract_features(&signal, &features)?;
    let opts = EvalOptions {
        beam_width: effective_beam(args.beam_width, args.nbest, lm_model.is_some()),
        n_best: args.nbest,
        lm: lm_model.as_ref(),
        lambda: lm.map_or(1.0, |(_, l)| l),
        length_normalize: args.length_normalize,
    };
    let hyps = eval::decode_hypotheses(&model, &feats.frames, &opts)?;
    for (i, hyp) in hyps.iter().enumerate() {
        let text = alphabet.decode(&hyp.transcript)?;
        match hyp.log_p_lm {
            Some(lp) => writeln!(
                out,
                "{}\t{}\t{}\t{}\t{}",
                i + 1,
                sig9(hyp.combined),
                sig9(hyp.log_p_acoustic),
                sig9(lp),
                text
            )?,
            None => writeln!(
                out,
                "{}\t{}\t{}\t{}",
                i + 1,
                sig9(hyp.combined),
                sig9(hyp.log_p_acoustic),
                text
            )?,
        }
    }
    Ok(EXIT_OK)
}

pub(crate) fn nbest(args: &NbestArgs, out: &mut dyn Write) -> Result<i32> {
    print_ranking(args, None, out)
}

pub(crate) fn rescore(args: &RescoreArgs, out: &mut dyn Write) -> Result<i32> {
    print_ranking(&args.nbest, Some((&args.lm, args.lambda)), out)
}

pub(crate) fn evaluate(
    args: &EvaluateArgs,
    out: &mut dyn Write,
    err: &mut dyn Write,
) -> Result<i32> {
    let (model, alphabet, features) = load_acoustic_checkpoint(&args.model)?;
    let lm_model = match &args.lm {
        Some(path) => {
            let m = load_lm_checkpoint(path)?;
            check_lm_alphabet(&m, &alphabet)?;
            Some(m)
        }
        None => None,
    };
    let manifest = corpus::load_manifest(&args.manifest)?;
    let items: Vec<EvalItem> = manifest
        .entries
        .iter()
        .map(|entry| {
            let utt = corpus::load_utterance(entry)?;
            let feats = extract_features(&utt.audio, &features)?;
            Ok(EvalItem {
                id: utt.id,
                features: feats.frames,
                reference: utt.transcript,
            })
        })
        .collect::<Result<_>>()?;
    let opts = EvalOptions {
        beam_width: effective_beam(args.beam_width, args.nbest, lm_model.is_some()),
        n_best: args.nbest,
        lm: lm_model.as_ref(),
        lambda: args.lambda,
        length_normalize: args.length_normalize,
    };
    let report = eval::evaluate(&model, &alphabet, &items, &opts)?;
    for utt in &report.utterances {
        writeln!(out, "{}\t{}\t{}", utt.id, sig9(utt.cer), sig9(utt.wer))?;
    }
    writeln!(out, "TOTAL\t{}\t{}", sig9(report.cer), sig9(report.wer))?;
    writeln!(err, "scored {} utterances", report.utterances.len())?;
    Ok(EXIT_OK)
}

pub(crate) fn gradcheck(
    args: &GradcheckArgs,
    out: &mut dyn Write,
    err: &mut dyn Write,
) -> Result<i32> {
    // Two layers cross a dropout boundary, two directions each; small
    // enough that central differences over every parameter stay cheap.
    let spec = ModelSpec {
        layers: 2,
        hidden: 5,
        input: 4,
        alphabet_len: 3,
    };
    let frames = 6;
    let mut stream = rng::stream(args.seed);
    let model = ModelParams::init(&spec, &mut stream)?;
    let mut features = Mat::zeros(frames, spec.input);
    for v in features.data_mut() {
        *v = rng::uniform(&mut stream, -1.0, 1.0);
    }
    let labels = LabelSequence(vec![
        rng::uniform(&mut stream, 0.0, spec.alphabet_len as f64).floor() as usize,
        rng::uniform(&mut stream, 0.0, spec.alphabet_len as f64).floor() as usize,
    ]);
    let item = TrainItem {
        id: "gradcheck".into(),
        features,
        labels,
    };
    let max_err = grad_check(&model, &item, args.step)?;
    writeln!(out, "{}", sig9(max_err))?;
    if max_err > args.tol {
        writeln!(
            err,
            "FAIL: max relative error {} exceeds tolerance {}",
            sig9(max_err),
            sig9(args.tol)
        )?;
        return Ok(EXIT_NUMERIC);
    }
    writeln!(
        err,
        "ok: max relative error {} within tolerance {}",
        sig9(max_err),
        sig9(args.tol)
    )?;
    Ok(EXIT_OK)
}

pub(crate) fn train_lm(
    args: &TrainLmArgs,
    out: &mut dyn Write,
    err: &mut dyn Write,
) -> Result<i32> {
    let config = resolve_train_config(
        args.config.as_deref(),
        args.seed,
        &Overrides {
            lr: args.lr,
            momentum: args.momentum,
            clip: args.clip,
            dropout: None,
            weight_noise: args.weight_noise,
            epochs: args.epochs,
            no_shuffle: args.no_shuffle,
        },
    )?;
    let alphabet = load_alphabet(&args.alphabet)?;
    let manifest = corpus::load_manifest(&args.manifest)?;
    let transcripts: Vec<LabelSequence> = manifest
        .entries
        .iter()
        .map(|entry| alphabet.encode(&entry.transcript))
        .collect::<Result<_>>()?;
    let (lm_model, report) = lm::lm_train(&transcripts, alphabet, args.hidden, &config)?;
    for (epoch, loss) in report.epoch_loss.iter().enumerate() {
        writeln!(out, "{epoch}\t{}", sig9(*loss))?;
    }
    save_lm_checkpoint(&args.out, &lm_model)?;
    writeln!(
        err,
        "wrote {} ({} epochs, {:.1} s)",
        args.out.display(),
        config.epochs,
        report.wall_time_s
    )?;
    Ok(EXIT_OK)
}
