//! Spectral front end: tone synthesis, Nyquist validation, DFT/FFT and
//! log-magnitude feature extraction with the 4 kHz speech cutoff.
//!
//! `dft_complex`/`dft_naive` are the O(n^2) reference transforms; `fft` is
//! the radix-2 implementation checked against them. Everything here is a
//! pure function of its inputs.

use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::linalg::Mat;

/// Discrete audio: real amplitudes at a fixed sampling rate.
#[derive(Debug, Clone, PartialEq)]
pub struct Signal {
    pub samples: Vec<f64>,
    pub sample_rate_hz: f64,
}

impl Signal {
    pub fn new(samples: Vec<f64>, sample_rate_hz: f64) -> Result<Self> {
        if !(sample_rate_hz > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "sample rate must be positive, got {sample_rate_hz}"
            )));
        }
        if samples.iter().any(|s| !s.is_finite()) {
            return Err(Error::InvalidConfig("signal contains non-finite samples".into()));
        }
        Ok(Signal {
            samples,
            sample_rate_hz,
        })
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate_hz
    }
}

/// One-sided magnitude spectrum of a real signal: bins `0..=n/2`.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrum {
    pub magnitudes: Vec<f64>,
    /// Hz per bin: `sample_rate / transform_size`.
    pub bin_hz: f64,
}

impl Spectrum {
    pub fn frequency(&self, bin: usize) -> f64 {
        bin as f64 * self.bin_hz
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NyquistCheck {
    Ok,
    Violation,
}

/// Sampling-rate rule: alias-free iff `sample_rate >= 2 * max_signal`.
pub fn check_nyquist(max_signal_hz: f64, sample_rate_hz: f64) -> NyquistCheck {
    assert!(
        max_signal_hz >= 0.0 && sample_rate_hz >= 0.0,
        "frequencies must be non-negative"
    );
    if sample_rate_hz >= 2.0 * max_signal_hz {
        NyquistCheck::Ok
    } else {
        NyquistCheck::Violation
    }
}

/// Superimpose phase-zero sine tones: `x[n] = sum_j amps[j] sin(2 pi f_j n / sr)`.
pub fn synthesize_tones(
    freqs: &[f64],
    amps: &[f64],
    duration_s: f64,
    sample_rate_hz: f64,
) -> Result<Signal> {
    if freqs.len() != amps.len() {
        return Err(Error::LengthMismatch {
            left: freqs.len(),
            right: amps.len(),
        });
    }
    if !(duration_s > 0.0) {
        return Err(Error::InvalidConfig(format!(
            "duration must be positive, got {duration_s}"
        )));
    }
    if !(sample_rate_hz > 0.0) {
        return Err(Error::InvalidConfig(format!(
            "sample rate must be positive, got {sample_rate_hz}"
        )));
    }
    let max_freq = freqs.iter().copied().fold(0.0, f64::max);
    if check_nyquist(max_freq, sample_rate_hz) == NyquistCheck::Violation {
        return Err(Error::NyquistViolation {
            max_signal_hz: max_freq,
            sample_rate_hz,
        });
    }
    let n = (duration_s * sample_rate_hz).floor() as usize;
    let mut samples = vec![0.0; n];
    for (&f, &a) in freqs.iter().zip(amps) {
        let w = std::f64::consts::TAU * f / sample_rate_hz;
        for (i, s) in samples.iter_mut().enumerate() {
            *s += a * (w * i as f64).sin();
        }
    }
    Signal::new(samples, sample_rate_hz)
}

/// Full two-sided DFT by direct summation. O(n^2); the FFT oracle.
pub fn dft_complex(samples: &[f64]) -> Vec<Complex64> {
    let n = samples.len();
    let mut out = Vec::with_capacity(n);
    for k in 0..n {
        let mut acc = Complex64::new(0.0, 0.0);
        for (i, &x) in samples.iter().enumerate() {
            let angle = -std::f64::consts::TAU * (k as f64) * (i as f64) / (n as f64);
            acc += Complex64::new(angle.cos(), angle.sin()) * x;
        }
        out.push(acc);
    }
    out
}

/// One-sided magnitude spectrum via the naive DFT. Accepts any length >= 1.
pub fn dft_naive(samples: &[f64], sample_rate_hz: f64) -> Spectrum {
    assert!(!samples.is_empty(), "dft of empty signal");
    let n = samples.len();
    let full = dft_complex(samples);
    Spectrum {
        magnitudes: full[..=n / 2].iter().map(|c| c.norm()).collect(),
        bin_hz: sample_rate_hz / n as f64,
    }
}

/// Full two-sided radix-2 FFT. Errors unless the length is a power of two.
pub fn fft_complex(samples: &[f64]) -> Result<Vec<Complex64>> {
    let n = samples.len();
    if n == 0 || !n.is_power_of_two() {
        return Err(Error::NonPowerOfTwo(n));
    }
    let mut buf: Vec<Complex64> = samples.iter().map(|&x| Complex64::new(x, 0.0)).collect();
    fft_in_place(&mut buf);
    Ok(buf)
}

fn fft_in_place(buf: &mut [Complex64]) {
    let n = buf.len();
    if n <= 1 {
        return;
    }
    // Bit-reversal permutation.
    let bits = n.trailing_zeros();
    for i in 0..n {
        let j = i.reverse_bits() >> (usize::BITS - bits);
        if j > i {
            buf.swap(i, j);
        }
    }
    let mut len = 2;
    while len <= n {
        let half = len / 2;
        for start in (0..n).step_by(len) {
            for k in 0..half {
                // Direct twiddle evaluation; cheaper recurrences lose precision.
                let angle = -std::f64::consts::TAU * k as f64 / len as f64;
                let w = Complex64::new(angle.cos(), angle.sin());
                let a = buf[start + k];
                let b = buf[start + k + half] * w;
                buf[start + k] = a + b;
                buf[start + k + half] = a - b;
            }
        }
        len *= 2;
    }
}

/// One-sided magnitude spectrum via the radix-2 FFT.
pub fn fft(samples: &[f64], sample_rate_hz: f64) -> Result<Spectrum> {
    let n = samples.len();
    let full = fft_complex(samples)?;
    Ok(Spectrum {
        magnitudes: full[..=n / 2].iter().map(|c| c.norm()).collect(),
        bin_hz: sample_rate_hz / n as f64,
    })
}

/// Spectrum of a whole signal: FFT when the length is a power of two,
/// otherwise the exact-length direct transform (keeps tone frequencies on
/// exact bins instead of smearing them by zero-padding).
pub fn spectrum_of(signal: &Signal) -> Spectrum {
    let n = signal.samples.len();
    if n > 0 && n.is_power_of_two() {
        fft(&signal.samples, signal.sample_rate_hz).expect("power of two checked")
    } else {
        dft_naive(&signal.samples, signal.sample_rate_hz)
    }
}

/// Indices of interior local maxima of the magnitude spectrum.
pub fn local_maxima(spectrum: &Spectrum) -> Vec<usize> {
    let m = &spectrum.magnitudes;
    (1..m.len().saturating_sub(1))
        .filter(|&k| m[k] > m[k - 1] && m[k] > m[k + 1])
        .collect()
}

/// Local maxima at least `rel_floor` times the global maximum, in bin order.
pub fn dominant_peaks(spectrum: &Spectrum, rel_floor: f64) -> Vec<usize> {
    let max = spectrum.magnitudes.iter().copied().fold(0.0, f64::max);
    local_maxima(spectrum)
        .into_iter()
        .filter(|&k| spectrum.magnitudes[k] >= rel_floor * max)
        .collect()
}

/// Contiguous windows of `window_ms` every `hop_ms`; the trailing partial
/// window is dropped. Frame count is `floor((len - window)/hop) + 1`.
pub fn frame_signal(signal: &Signal, window_ms: f64, hop_ms: f64) -> Result<Vec<&[f64]>> {
    if !(window_ms > 0.0) || !(hop_ms > 0.0) {
        return Err(Error::InvalidConfig(format!(
            "window ({window_ms} ms) and hop ({hop_ms} ms) must be positive"
        )));
    }
    let window = (window_ms * signal.sample_rate_hz / 1000.0).round() as usize;
    let hop = (hop_ms * signal.sample_rate_hz / 1000.0).round() as usize;
    if window == 0 || hop == 0 {
        return Err(Error::InvalidConfig(
            "window and hop must be at least one sample".into(),
        ));
    }
    let len = signal.samples.len();
    if len < window {
        return Err(Error::SignalTooShort {
            samples: len,
            window,
        });
    }
    let count = (len - window) / hop + 1;
    Ok((0..count)
        .map(|i| &signal.samples[i * hop..i * hop + window])
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WindowFn {
    Rectangular,
    Hann,
}

/// Settings for [`extract_features`]. Serialized into acoustic checkpoints
/// so transcription always frames audio the way training did.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct FeatureConfig {
    pub frame_ms: f64,
    pub hop_ms: f64,
    pub cutoff_hz: f64,
    /// Transform size; `None` zero-pads each frame to the next power of two.
    pub fft_size: Option<usize>,
    pub window: WindowFn,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        FeatureConfig {
            frame_ms: 20.0,
            hop_ms: 20.0,
            cutoff_hz: 4000.0,
            fft_size: None,
            window: WindowFn::Rectangular,
        }
    }
}

/// Per-frame log-magnitude spectra, per-utterance normalized.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSequence {
    /// T x F.
    pub frames: Mat,
    pub frame_ms: f64,
    pub sample_rate_hz: f64,
    pub cutoff_hz: f64,
}

impl FeatureSequence {
    pub fn num_frames(&self) -> usize {
        self.frames.rows()
    }

    pub fn dim(&self) -> usize {
        self.frames.cols()
    }
}

const LOG_FLOOR: f64 = 1e-10;
const VARIANCE_FLOOR: f64 = 1e-8;

fn resolve_fft_size(window: usize, cfg: &FeatureConfig) -> Result<usize> {
    let size = match cfg.fft_size {
        Some(s) => s,
        None => window.next_power_of_two(),
    };
    if !size.is_power_of_two() {
        return Err(Error::NonPowerOfTwo(size));
    }
    if size < window {
        return Err(Error::InvalidConfig(format!(
            "fft_size {size} smaller than the {window}-sample frame"
        )));
    }
    Ok(size)
}

fn feature_row(frame: &[f64], fft_size: usize, retained: usize, window: WindowFn) -> Vec<f64> {
    let mut padded = vec![0.0; fft_size];
    match window {
        WindowFn::Rectangular => padded[..frame.len()].copy_from_slice(frame),
        WindowFn::Hann => {
            let n = frame.len();
            for (i, (&x, p)) in frame.iter().zip(padded.iter_mut()).enumerate() {
                let w = if n > 1 {
                    0.5 - 0.5 * (std::f64::consts::TAU * i as f64 / (n - 1) as f64).cos()
                } else {
                    1.0
                };
                *p = x * w;
            }
        }
    }
    let spectrum = fft(&padded, 1.0).expect("power of two size");
    spectrum.magnitudes[..retained]
        .iter()
        .map(|&m| (m + LOG_FLOOR).ln())
        .collect()
}

fn normalize_per_dim(frames: &mut Mat) {
    let (t, f) = (frames.rows(), frames.cols());
    for j in 0..f {
        let mut mean = 0.0;
        for i in 0..t {
            mean += frames.at(i, j);
        }
        mean /= t as f64;
        let mut var = 0.0;
        for i in 0..t {
            let d = frames.at(i, j) - mean;
            var += d * d;
        }
        var /= t as f64;
        let std = var.max(VARIANCE_FLOOR).sqrt();
        for i in 0..t {
            *frames.at_mut(i, j) = (frames.at(i, j) - mean) / std;
        }
    }
}

struct FramePlan {
    fft_size: usize,
    retained: usize,
}

fn plan(signal: &Signal, cfg: &FeatureConfig) -> Result<FramePlan> {
    let window = (cfg.frame_ms * signal.sample_rate_hz / 1000.0).round() as usize;
    let fft_size = resolve_fft_size(window, cfg)?;
    let bin_hz = signal.sample_rate_hz / fft_size as f64;
    let one_sided = fft_size / 2 + 1;
    // Bins with frequency k*bin_hz <= cutoff.
    let retained = (0..one_sided)
        .take_while(|&k| k as f64 * bin_hz <= cfg.cutoff_hz)
        .count();
    if retained == 0 {
        return Err(Error::InvalidConfig(format!(
            "cutoff {} Hz retains no bins at {} Hz/bin",
            cfg.cutoff_hz, bin_hz
        )));
    }
    Ok(FramePlan { fft_size, retained })
}

fn finish(rows: Vec<Vec<f64>>, signal: &Signal, cfg: &FeatureConfig) -> FeatureSequence {
    let mut frames = Mat::from_rows(&rows);
    normalize_per_dim(&mut frames);
    FeatureSequence {
        frames,
        frame_ms: cfg.frame_ms,
        sample_rate_hz: signal.sample_rate_hz,
        cutoff_hz: cfg.cutoff_hz,
    }
}

/// Frame, zero-pad, FFT, keep bins up to the cutoff, log-compress, then
/// normalize each feature dimension to zero mean / unit variance over the
/// utterance. Dispatches to the parallel path when the `parallel` feature
/// is enabled.
pub fn extract_features(signal: &Signal, cfg: &FeatureConfig) -> Result<FeatureSequence> {
    #[cfg(feature = "parallel")]
    {
        extract_features_par(signal, cfg)
    }
    #[cfg(not(feature = "parallel"))]
    {
        extract_features_seq(signal, cfg)
    }
}

/// Sequential [`extract_features`]. Bit-identical to the parallel path.
pub fn extract_features_seq(signal: &Signal, cfg: &FeatureConfig) -> Result<FeatureSequence> {
    let p = plan(signal, cfg)?;
    let rows: Vec<Vec<f64>> = frame_signal(signal, cfg.frame_ms, cfg.hop_ms)?
        .iter()
        .map(|frame| feature_row(frame, p.fft_size, p.retained, cfg.window))
        .collect();
    Ok(finish(rows, signal, cfg))
}

/// Parallel [`extract_features`]: frames are independent, so their rows are
/// computed with rayon and collected in frame order.
#[cfg(feature = "parallel")]
pub fn extract_features_par(signal: &Signal, cfg: &FeatureConfig) -> Result<FeatureSequence> {
    use rayon::prelude::*;
    let p = plan(signal, cfg)?;
    let rows: Vec<Vec<f64>> = frame_signal(signal, cfg.frame_ms, cfg.hop_ms)?
        .par_iter()
        .map(|frame| feature_row(frame, p.fft_size, p.retained, cfg.window))
        .collect();
    Ok(finish(rows, signal, cfg))
}

/// Decode headerless 16-bit little-endian signed PCM; amplitude = value/32768.
pub fn decode_pcm_s16le(bytes: &[u8], sample_rate_hz: f64) -> Result<Signal> {
    if bytes.len() % 2 != 0 {
        return Err(Error::malformed(
            "pcm audio",
            format!("odd byte count {}", bytes.len()),
        ));
    }
    let samples = bytes
        .chunks_exact(2)
        .map(|b| i16::from_le_bytes([b[0], b[1]]) as f64 / 32768.0)
        .collect();
    Signal::new(samples, sample_rate_hz)
}

/// Encode samples as headerless s16le PCM, clamping outside [-1, 1).
pub fn encode_pcm_s16le(samples: &[f64]) -> Vec<u8> {
    let mut out = Vec::with_capacity(samples.len() * 2);
    for &s in samples {
        let v = (s * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}
