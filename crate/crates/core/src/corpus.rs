//! Synthetic speech corpus: each character becomes a fixed two-tone chord,
//! space becomes silence, and utterances are chords concatenated at a fixed
//! per-character duration. Audio is stored as headerless s16le PCM next to a
//! JSONL manifest.
//!
//! The chord table keeps every character's pair inside the 4 kHz band so the
//! default sampling rate of 8 kHz is alias-free, and spaces the fundamentals
//! 100 Hz apart so characters stay separable after the log-magnitude front
//! end. The 57 Hz offset of the second tone keeps chords from sharing
//! partials.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::ctc::Alphabet;
use crate::dsp::{self, Signal};
use crate::error::{Error, Result};
use crate::rng::{substream, Stream};

pub const DEFAULT_SAMPLE_RATE_HZ: f64 = 8000.0;
pub const DEFAULT_CHAR_MS: f64 = 100.0;

/// Fundamental of character index 0.
pub const CHORD_BASE_HZ: f64 = 300.0;
/// Fundamental spacing between adjacent character indices.
pub const CHORD_STEP_HZ: f64 = 100.0;
/// Offset of each chord's second tone above its fundamental.
pub const CHORD_OFFSET_HZ: f64 = 57.0;
/// Every chord component must stay strictly below this.
pub const SPEECH_BUDGET_HZ: f64 = 4000.0;

const CHORD_AMP: f64 = 0.4;

/// One labelled audio clip.
#[derive(Debug, Clone, PartialEq)]
pub struct Utterance {
    pub id: String,
    pub audio: Signal,
    pub transcript: String,
}

/// One line of `manifest.jsonl`. `audio` is stored relative to the manifest
/// file; [`load_manifest`] resolves it against the manifest's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub audio: PathBuf,
    pub transcript: String,
    pub sample_rate_hz: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
}

/// Corpus generation settings for [`synth_corpus`]. Transcript lengths are
/// drawn uniformly from `min_len..=max_len`.
#[derive(Debug, Clone, PartialEq)]
pub struct CorpusSpec {
    pub n: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub sample_rate_hz: f64,
    pub char_ms: f64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        CorpusSpec {
            n: 20,
            min_len: 3,
            max_len: 5,
            sample_rate_hz: DEFAULT_SAMPLE_RATE_HZ,
            char_ms: DEFAULT_CHAR_MS,
        }
    }
}

impl CorpusSpec {
    fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(Error::InvalidConfig("corpus size must be at least 1".into()));
        }
        if self.min_len == 0 || self.min_len > self.max_len {
            return Err(Error::InvalidConfig(format!(
                "transcript length range {}..={} is empty or zero",
                self.min_len, self.max_len
            )));
        }
        if !(self.sample_rate_hz > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "sample rate must be positive, got {}",
                self.sample_rate_hz
            )));
        }
        if !(self.char_ms > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "character duration must be positive, got {} ms",
                self.char_ms
            )));
        }
        Ok(())
    }
}

/// The two-tone chord (or silence, for space) that voices one character.
pub fn char_chord(
    c: char,
    alphabet: &Alphabet,
    sample_rate_hz: f64,
    char_ms: f64,
) -> Result<Signal> {
    let index = alphabet.label_of(c).ok_or(Error::OutOfVocabulary(c))?;
    let duration_s = char_ms / 1000.0;
    if c == ' ' {
        let n = (duration_s * sample_rate_hz).floor() as usize;
        return Signal::new(vec![0.0; n], sample_rate_hz);
    }
    let f1 = CHORD_BASE_HZ + CHORD_STEP_HZ * index as f64;
    let f2 = f1 + CHORD_OFFSET_HZ;
    if f2 >= SPEECH_BUDGET_HZ {
        return Err(Error::FrequencyBudget { ch: c, freq_hz: f2 });
    }
    dsp::synthesize_tones(&[f1, f2], &[CHORD_AMP, CHORD_AMP], duration_s, sample_rate_hz)
}

/// Voice a whole transcript: one chord per character, concatenated.
pub fn synth_utterance(
    id: &str,
    text: &str,
    alphabet: &Alphabet,
    sample_rate_hz: f64,
    char_ms: f64,
) -> Result<Utterance> {
    if text.is_empty() {
        return Err(Error::BadUtterance {
            id: id.to_string(),
            reason: "empty transcript".into(),
        });
    }
    let mut samples = Vec::new();
    for c in text.chars() {
        samples.extend_from_slice(&char_chord(c, alphabet, sample_rate_hz, char_ms)?.samples);
    }
    Ok(Utterance {
        id: id.to_string(),
        audio: Signal::new(samples, sample_rate_hz)?,
        transcript: text.to_string(),
    })
}

fn random_transcript(rng: &mut Stream, alphabet: &Alphabet, min_len: usize, max_len: usize) -> String {
    let symbols = alphabet.symbols();
    loop {
        let len = rng.random_range(min_len..=max_len);
        let text: String = (0..len)
            .map(|_| symbols[rng.random_range(0..symbols.len())])
            .collect();
        // All-space transcripts are pure silence; resample those.
        if text.chars().any(|c| c != ' ') {
            return text;
        }
    }
}

/// Generate `spec.n` random utterances under `out_dir` as `utt0000.pcm`,
/// `utt0001.pcm`, ... plus `manifest.jsonl`. The same seed writes
/// byte-identical files; utterance `i` depends only on `(seed, i)`, not on
/// `spec.n`. Returned entries carry resolved audio paths.
pub fn synth_corpus(
    spec: &CorpusSpec,
    alphabet: &Alphabet,
    seed: u64,
    out_dir: &Path,
) -> Result<Manifest> {
    spec.validate()?;
    fs::create_dir_all(out_dir)?;
    let mut entries = Vec::with_capacity(spec.n);
    for i in 0..spec.n {
        let mut rng = substream(seed, &[i as u64]);
        let text = random_transcript(&mut rng, alphabet, spec.min_len, spec.max_len);
        let id = format!("utt{i:04}");
        let utt = synth_utterance(&id, &text, alphabet, spec.sample_rate_hz, spec.char_ms)?;
        let file = format!("{id}.pcm");
        fs::write(out_dir.join(&file), dsp::encode_pcm_s16le(&utt.audio.samples))?;
        entries.push(ManifestEntry {
            id,
            audio: PathBuf::from(file),
            transcript: text,
            sample_rate_hz: spec.sample_rate_hz,
        });
    }
    write_manifest(&out_dir.join("manifest.jsonl"), &entries)?;
    for e in &mut entries {
        e.audio = out_dir.join(&e.audio);
    }
    Ok(Manifest { entries })
}

/// Serialize entries as JSONL, one entry per line, paths written as given.
pub fn write_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<()> {
    let mut out = String::new();
    for e in entries {
        out.push_str(&serde_json::to_string(e).expect("manifest entries serialize"));
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

/// Parse a JSONL manifest. Ids must be unique; relative audio paths are
/// resolved against the manifest's directory.
pub fn load_manifest(path: &Path) -> Result<Manifest> {
    let text = fs::read_to_string(path)?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    let mut seen = BTreeSet::new();
    let mut entries = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let mut entry: ManifestEntry = serde_json::from_str(line).map_err(|e| {
            Error::malformed("manifest", format!("line {}: {e}", i + 1))
        })?;
        if !seen.insert(entry.id.clone()) {
            return Err(Error::malformed(
                "manifest",
                format!("line {}: duplicate id {:?}", i + 1, entry.id),
            ));
        }
        if entry.audio.is_relative() {
            entry.audio = base.join(&entry.audio);
        }
        entries.push(entry);
    }
    Ok(Manifest { entries })
}

/// Read and decode one entry's PCM audio. A missing file is reported as a
/// bad utterance naming the id rather than a bare I/O error.
pub fn load_audio(entry: &ManifestEntry) -> Result<Signal> {
    let bytes = fs::read(&entry.audio).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            Error::BadUtterance {
                id: entry.id.clone(),
                reason: format!("audio file missing: {}", entry.audio.display()),
            }
        } else {
            Error::Io(e)
        }
    })?;
    dsp::decode_pcm_s16le(&bytes, entry.sample_rate_hz)
}

/// [`load_audio`] plus the transcript, as one [`Utterance`].
pub fn load_utterance(entry: &ManifestEntry) -> Result<Utterance> {
    Ok(Utterance {
        id: entry.id.clone(),
        audio: load_audio(entry)?,
        transcript: entry.transcript.clone(),
    })
}
