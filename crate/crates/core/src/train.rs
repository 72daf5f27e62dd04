//! Training loop shared by the acoustic model and the language model:
//! SGD with momentum, global-norm gradient clipping, weight-noise and
//! non-recurrent-dropout regularization, finite-difference gradient
//! checking, and the JSON checkpoint format.
//!
//! Every run is a pure function of (dataset, config): shuffling and
//! regularization noise come from streams derived from the config seed,
//! so repeated runs produce bit-identical parameters.

use std::collections::HashMap;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::ctc::{ctc_loss, min_frames, Alphabet, LabelSequence};
use crate::decode::{edit_distance, greedy_decode};
use crate::dsp::FeatureConfig;
use crate::error::{Error, Result};
use crate::linalg::Mat;
use crate::lm::CharLm;
use crate::nn::{backward_full, forward_full, ModelParams, ModelSpec};
use crate::rng::{self, Stream};

/// Optimizer and regularization settings. The same config drives acoustic
/// and LM training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    /// Momentum coefficient, in [0, 1).
    pub momentum: f64,
    /// Global L2 clipping threshold, > 0.
    pub clip_norm: f64,
    /// Inter-layer dropout probability, in [0, 1).
    pub dropout_p: f64,
    /// Std of Gaussian weight noise applied at gradient evaluation, >= 0.
    pub weight_noise_std: f64,
    pub epochs: usize,
    pub seed: u64,
    pub shuffle: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.01,
            momentum: 0.9,
            clip_norm: 5.0,
            dropout_p: 0.0,
            weight_noise_std: 0.0,
            epochs: 100,
            seed: 1,
            shuffle: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return bad(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum must lie in [0, 1), got {}", self.momentum));
        }
        if !(self.clip_norm.is_finite() && self.clip_norm > 0.0) {
            return bad(format!("clip_norm must be positive, got {}", self.clip_norm));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return bad(format!("dropout_p must lie in [0, 1), got {}", self.dropout_p));
        }
        if !(self.weight_noise_std.is_finite() && self.weight_noise_std >= 0.0) {
            return bad(format!(
                "weight_noise_std must be non-negative, got {}",
                self.weight_noise_std
            ));
        }
        if self.epochs < 1 {
            return bad("epochs must be >= 1".into());
        }
        Ok(())
    }
}

/// Per-epoch curves plus wall time for one training run.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    /// Mean loss per utterance (CTC loss, or per-character cross-entropy
    /// for the LM), one entry per epoch.
    pub epoch_loss: Vec<f64>,
    /// Training-set CER by greedy decoding, one entry per epoch. Empty
    /// for LM training, where CER is not defined.
    pub epoch_cer: Vec<f64>,
    pub wall_time_s: f64,
}

/// One training example: extracted features and the label-index target.
#[derive(Debug, Clone)]
pub struct TrainItem {
    pub id: String,
    pub features: Mat,
    pub labels: LabelSequence,
}

/// Gaussian-perturbed copy of the parameters. The copy is used only to
/// evaluate gradients; updates always apply to the clean weights, so the
/// noise itself never enters the stored parameters.
pub fn apply_weight_noise(params: &ModelParams, std: f64, rng: &mut Stream) -> ModelParams {
    assert!(std >= 0.0, "noise std must be non-negative");
    let mut noisy = params.clone();
    noise_views(&mut noisy.tensor_views_mut(), std, rng);
    noisy
}

pub(crate) fn noise_views(views: &mut [&mut [f64]], std: f64, rng: &mut Stream) {
    if std == 0.0 {
        return;
    }
    for view in views.iter_mut() {
        for v in view.iter_mut() {
            *v += std * rng::gaussian(rng);
        }
    }
}

/// Inverted-scaling dropout masks, one per inter-layer boundary. Entries
/// are 0 with probability `p` and 1/(1-p) otherwise, fixed for the whole
/// sequence. Recurrent connections are never masked: the only application
/// site is the activation handed from one layer to the next.
pub fn make_dropout_masks(boundary_sizes: &[usize], p: f64, rng: &mut Stream) -> Vec<Vec<f64>> {
    assert!((0.0..1.0).contains(&p), "dropout p must lie in [0, 1)");
    let keep = 1.0 / (1.0 - p);
    boundary_sizes
        .iter()
        .map(|&size| {
            (0..size)
                .map(|_| if rng::uniform(rng, 0.0, 1.0) < p { 0.0 } else { keep })
                .collect()
        })
        .collect()
}

fn global_norm(views: &[&mut [f64]]) -> f64 {
    views
        .iter()
        .flat_map(|v| v.iter())
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt()
}

pub(crate) fn clip_views(views: &mut [&mut [f64]], clip_norm: f64) -> f64 {
    assert!(clip_norm > 0.0, "clip_norm must be positive");
    let norm = global_norm(views);
    if norm > clip_norm {
        let scale = clip_norm / norm;
        for view in views.iter_mut() {
            for v in view.iter_mut() {
                *v *= scale;
            }
        }
    }
    norm
}

/// Scale all gradients by clip_norm/norm when the global L2 norm exceeds
/// the threshold; otherwise leave them untouched. Returns the pre-clip
/// norm. Scaling preserves the gradient direction exactly.
pub fn clip_gradients(grads: &mut ModelParams, clip_norm: f64) -> f64 {
    clip_views(&mut grads.tensor_views_mut(), clip_norm)
}

pub(crate) fn sgd_views(
    params: &mut [&mut [f64]],
    velocity: &mut [&mut [f64]],
    grads: &[&[f64]],
    lr: f64,
    momentum: f64,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != velocity.len() {
        return Err(Error::shape(
            "sgd tensors",
            format!("{} tensors", params.len()),
            format!("{} grads, {} velocity", grads.len(), velocity.len()),
        ));
    }
    for ((w, v), g) in params.iter_mut().zip(velocity.iter_mut()).zip(grads) {
        if w.len() != g.len() || w.len() != v.len() {
            return Err(Error::shape(
                "sgd tensor",
                format!("{} elements", w.len()),
                format!("{} grad, {} velocity", g.len(), v.len()),
            ));
        }
        for j in 0..w.len() {
            v[j] = momentum * v[j] - lr * g[j];
            w[j] += v[j];
        }
    }
    Ok(())
}

/// Momentum SGD: v <- momentum*v - lr*g; w <- w + v.
pub fn sgd_step(
    params: &mut ModelParams,
    velocity: &mut ModelParams,
    grads: &ModelParams,
    lr: f64,
    momentum: f64,
) -> Result<()> {
    let grad_views = grads.tensor_views();
    let flat: Vec<&[f64]> = grad_views.iter().map(|(_, _, d)| *d).collect();
    sgd_views(
        &mut params.tensor_views_mut(),
        &mut velocity.tensor_views_mut(),
        &flat,
        lr,
        momentum,
    )
}

fn check_items(model: &ModelParams, items: &[TrainItem]) -> Result<()> {
    if items.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let classes = model.num_classes();
    for item in items {
        let fail = |reason: String| {
            Err(Error::BadUtterance {
                id: item.id.clone(),
                reason,
            })
        };
        if item.labels.is_empty() {
            return fail("empty transcript".into());
        }
        if let Some(&bad) = item.labels.as_slice().iter().find(|&&l| l + 1 >= classes) {
            return fail(format!("label {bad} out of range for {} classes", classes));
        }
        if item.features.cols() != model.input_size() {
            return fail(format!(
                "feature dim {} does not match model input {}",
                item.features.cols(),
                model.input_size()
            ));
        }
        let needed = min_frames(&item.labels);
        if item.features.rows() < needed {
            return fail(format!(
                "infeasible for CTC: needs {needed} frames, has {}",
                item.features.rows()
            ));
        }
    }
    Ok(())
}

/// Training-set CER under greedy decoding: total edit distance over total
/// reference length (micro average), computed on label indices.
pub fn training_cer(model: &ModelParams, items: &[TrainItem]) -> Result<f64> {
    let mut edits = 0usize;
    let mut total = 0usize;
    for item in items {
        let (log_probs, _) = forward_full(model, &item.features, None)?;
        let hyp = greedy_decode(&log_probs);
        edits += edit_distance(hyp.transcript.as_slice(), item.labels.as_slice());
        total += item.labels.len();
    }
    if total == 0 {
        return Err(Error::EmptyReference);
    }
    Ok(edits as f64 / total as f64)
}

/// Train the acoustic model with per-utterance (batch size 1) updates.
///
/// Each epoch draws a fresh shuffle stream from (seed, epoch); each
/// utterance draws a regularization stream from (seed, epoch, dataset
/// index). Weight noise and dropout consume randomness only when their
/// knobs are nonzero, so zero-valued knobs reproduce the unregularized
/// run bit-exactly.
pub fn train_acoustic(
    mut model: ModelParams,
    items: &[TrainItem],
    config: &TrainConfig,
) -> Result<(ModelParams, TrainReport)> {
    config.validate()?;
    check_items(&model, items)?;
    let start = Instant::now();
    let mut velocity = model.zeros_like();
    let mut epoch_loss = Vec::with_capacity(config.epochs);
    let mut epoch_cer = Vec::with_capacity(config.epochs);

    for epoch in 0..config.epochs {
        let mut order: Vec<usize> = (0..items.len()).collect();
        if config.shuffle {
            let mut shuffle_rng = rng::substream(config.seed, &[0, epoch as u64]);
            rng::shuffle(&mut shuffle_rng, &mut order);
        }

        let mut total_loss = 0.0;
        for &idx in &order {
            let item = &items[idx];
            let mut utt_rng = rng::substream(config.seed, &[1, epoch as u64, idx as u64]);

            let noisy;
            let eval_params = if config.weight_noise_std > 0.0 {
                noisy = apply_weight_noise(&model, config.weight_noise_std, &mut utt_rng);
                &noisy
            } else {
                &model
            };
            let masks = if config.dropout_p > 0.0 {
                Some(make_dropout_masks(
                    &model.boundary_sizes(),
                    config.dropout_p,
                    &mut utt_rng,
                ))
            } else {
                None
            };

            let (log_probs, cache) = forward_full(eval_params, &item.features, masks.as_deref())?;
            // NaN logits (exploded weights, corrupt features) are divergence,
            // not a property of the target; catch them before the loss does.
            if log_probs.data().iter().any(|v| v.is_nan()) {
                return Err(Error::Diverged {
                    epoch,
                    utterance: item.id.clone(),
                });
            }
            let (loss, dlogits) = ctc_loss(&log_probs, &item.labels)?;
            let (mut grads, _) = backward_full(eval_params, &cache, &dlogits)?;
            clip_gradients(&mut grads, config.clip_norm);
            sgd_step(&mut model, &mut velocity, &grads, config.learning_rate, config.momentum)?;
            total_loss += loss;
        }

        epoch_loss.push(total_loss / items.len() as f64);
        epoch_cer.push(training_cer(&model, items)?);
    }

    Ok((
        model,
        TrainReport {
            epoch_loss,
            epoch_cer,
            wall_time_s: start.elapsed().as_secs_f64(),
        },
    ))
}

const GRAD_CHECK_MAX_PARAMS: usize = 50_000;

/// Guard denominator for per-parameter gradient comparisons. A central
/// difference of the loss carries cancellation noise near ulp(loss)/step
/// (~1e-10 at the default step), so gradients under this scale are compared
/// absolutely at this scale; a systematic backprop error also shows up on
/// parameters with gradients far above it.
const GRAD_ERR_GUARD: f64 = 1e-5;

fn grad_error(fd: f64, analytic: f64) -> f64 {
    (fd - analytic).abs() / fd.abs().max(analytic.abs()).max(GRAD_ERR_GUARD)
}

fn ctc_loss_of(model: &ModelParams, item: &TrainItem) -> Result<f64> {
    let (log_probs, _) = forward_full(model, &item.features, None)?;
    Ok(ctc_loss(&log_probs, &item.labels)?.0)
}

fn grad_check_validate(model: &ModelParams, item: &TrainItem, step: f64) -> Result<Vec<f64>> {
    if !(step.is_finite() && step > 0.0) {
        return Err(Error::InvalidConfig(format!(
            "finite-difference step must be positive, got {step}"
        )));
    }
    let n = model.num_params();
    if n == 0 || n > GRAD_CHECK_MAX_PARAMS {
        return Err(Error::InvalidConfig(format!(
            "gradient check needs 1..={GRAD_CHECK_MAX_PARAMS} parameters, model has {n}"
        )));
    }
    check_items(model, std::slice::from_ref(item))?;
    let (log_probs, cache) = forward_full(model, &item.features, None)?;
    let (_, dlogits) = ctc_loss(&log_probs, &item.labels)?;
    let (grads, _) = backward_full(model, &cache, &dlogits)?;
    Ok(grads
        .tensor_views()
        .iter()
        .flat_map(|(_, _, d)| d.iter().copied().collect::<Vec<_>>())
        .collect())
}

fn view_offsets(model: &ModelParams) -> Vec<(usize, usize)> {
    // (view index, element index) for each flat parameter position.
    let mut map = Vec::with_capacity(model.num_params());
    for (vi, (_, _, data)) in model.tensor_views().iter().enumerate() {
        for k in 0..data.len() {
            map.push((vi, k));
        }
    }
    map
}

/// Central finite differences of the CTC loss against `backward_full`,
/// over every parameter; returns the worst relative error. Sequential
/// probe loop.
pub fn grad_check_seq(model: &ModelParams, item: &TrainItem, step: f64) -> Result<f64> {
    let analytic = grad_check_validate(model, item, step)?;
    let offsets = view_offsets(model);
    let mut probe = model.clone();
    let mut worst = 0.0f64;
    for (flat, &(vi, k)) in offsets.iter().enumerate() {
        let orig = probe.tensor_views_mut()[vi][k];
        probe.tensor_views_mut()[vi][k] = orig + step;
        let up = ctc_loss_of(&probe, item)?;
        probe.tensor_views_mut()[vi][k] = orig - step;
        let down = ctc_loss_of(&probe, item)?;
        probe.tensor_views_mut()[vi][k] = orig;
        let fd = (up - down) / (2.0 * step);
        worst = worst.max(grad_error(fd, analytic[flat]));
    }
    Ok(worst)
}

/// Parallel variant of [`grad_check_seq`]: each parameter's probe is an
/// independent evaluation, so the maximum is identical bit for bit.
#[cfg(feature = "parallel")]
pub fn grad_check_par(model: &ModelParams, item: &TrainItem, step: f64) -> Result<f64> {
    use rayon::prelude::*;
    let analytic = grad_check_validate(model, item, step)?;
    let offsets = view_offsets(model);
    let errs: Result<Vec<f64>> = offsets
        .par_iter()
        .enumerate()
        .map(|(flat, &(vi, k))| {
            let mut probe = model.clone();
            let orig = probe.tensor_views_mut()[vi][k];
            probe.tensor_views_mut()[vi][k] = orig + step;
            let up = ctc_loss_of(&probe, item)?;
            probe.tensor_views_mut()[vi][k] = orig - step;
            let down = ctc_loss_of(&probe, item)?;
            let fd = (up - down) / (2.0 * step);
            Ok(grad_error(fd, analytic[flat]))
        })
        .collect();
    Ok(errs?.into_iter().fold(0.0, f64::max))
}

/// Gradient check using the parallel path when available.
pub fn grad_check(model: &ModelParams, item: &TrainItem, step: f64) -> Result<f64> {
    #[cfg(feature = "parallel")]
    {
        grad_check_par(model, item, step)
    }
    #[cfg(not(feature = "parallel"))]
    {
        grad_check_seq(model, item, step)
    }
}

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    data: Vec<f64>,
}

/// On-disk checkpoint: JSON with named flat tensors. f64 values survive
/// the round trip bit-exactly (shortest-round-trip formatting).
#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    format_version: u32,
    model_kind: String,
    alphabet: String,
    layers: usize,
    hidden: usize,
    input: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    feature_config: Option<FeatureConfig>,
    tensors: Vec<TensorEntry>,
}

fn tensors_of(views: Vec<(String, Vec<usize>, &[f64])>) -> Vec<TensorEntry> {
    views
        .into_iter()
        .map(|(name, shape, data)| TensorEntry {
            name,
            shape,
            data: data.to_vec(),
        })
        .collect()
}

fn write_checkpoint(path: &Path, file: &CheckpointFile) -> Result<()> {
    let mut json = serde_json::to_string(file)
        .map_err(|e| Error::malformed("checkpoint", e.to_string()))?;
    json.push('\n');
    std::fs::write(path, json)?;
    Ok(())
}

fn read_checkpoint(path: &Path, expected_kind: &str) -> Result<CheckpointFile> {
    let text = std::fs::read_to_string(path)?;
    let file: CheckpointFile = serde_json::from_str(&text)
        .map_err(|e| Error::malformed("checkpoint", e.to_string()))?;
    if file.format_version != CHECKPOINT_FORMAT_VERSION {
        return Err(Error::FormatVersion(file.format_version));
    }
    if file.model_kind != expected_kind {
        return Err(Error::malformed(
            "checkpoint",
            format!("model_kind {:?}, expected {expected_kind:?}", file.model_kind),
        ));
    }
    Ok(file)
}

/// Copy file tensors into the model views, requiring an exact match of
/// tensor names and shapes in both directions.
fn fill_views(
    meta: Vec<(String, Vec<usize>)>,
    views: Vec<&mut [f64]>,
    tensors: Vec<TensorEntry>,
) -> Result<()> {
    if tensors.len() != meta.len() {
        return Err(Error::malformed(
            "checkpoint",
            format!("{} tensors, expected {}", tensors.len(), meta.len()),
        ));
    }
    let mut by_name: HashMap<String, TensorEntry> = HashMap::with_capacity(tensors.len());
    for entry in tensors {
        if by_name.insert(entry.name.clone(), entry).is_some() {
            return Err(Error::malformed("checkpoint", "duplicate tensor name".to_string()));
        }
    }
    for ((name, shape), view) in meta.into_iter().zip(views) {
        let entry = by_name
            .remove(&name)
            .ok_or_else(|| Error::malformed("checkpoint", format!("missing tensor {name:?}")))?;
        if entry.shape != shape {
            return Err(Error::shape(
                "checkpoint tensor",
                format!("{name}: {shape:?}"),
                format!("{:?}", entry.shape),
            ));
        }
        if entry.data.len() != view.len() {
            return Err(Error::malformed(
                "checkpoint",
                format!("tensor {name:?} has {} values for shape {shape:?}", entry.data.len()),
            ));
        }
        view.copy_from_slice(&entry.data);
    }
    Ok(())
}

/// Write an acoustic checkpoint. The feature extraction settings ride
/// along so later transcription frames audio exactly as training did.
pub fn save_acoustic_checkpoint(
    path: &Path,
    model: &ModelParams,
    alphabet: &Alphabet,
    features: &FeatureConfig,
) -> Result<()> {
    if model.num_classes() != alphabet.num_classes() {
        return Err(Error::shape(
            "checkpoint alphabet",
            format!("{} classes", model.num_classes()),
            format!("{} classes", alphabet.num_classes()),
        ));
    }
    let file = CheckpointFile {
        format_version: CHECKPOINT_FORMAT_VERSION,
        model_kind: "acoustic".into(),
        alphabet: alphabet.symbols().iter().collect(),
        layers: model.num_layers(),
        hidden: model.hidden_size(),
        input: model.input_size(),
        feature_config: Some(features.clone()),
        tensors: tensors_of(model.tensor_views()),
    };
    write_checkpoint(path, &file)
}

pub fn load_acoustic_checkpoint(path: &Path) -> Result<(ModelParams, Alphabet, FeatureConfig)> {
    let file = read_checkpoint(path, "acoustic")?;
    let alphabet = Alphabet::from_str_symbols(&file.alphabet)?;
    let spec = ModelSpec {
        layers: file.layers,
        hidden: file.hidden,
        input: file.input,
        alphabet_len: alphabet.len(),
    };
    let mut model = ModelParams::zeros(&spec)?;
    let feature_config = file.feature_config.ok_or_else(|| {
        Error::malformed("checkpoint", "acoustic checkpoint lacks feature_config".to_string())
    })?;
    let meta: Vec<(String, Vec<usize>)> = model
        .tensor_views()
        .into_iter()
        .map(|(n, s, _)| (n, s))
        .collect();
    fill_views(meta, model.tensor_views_mut(), file.tensors)?;
    Ok((model, alphabet, feature_config))
}

pub fn save_lm_checkpoint(path: &Path, lm: &CharLm) -> Result<()> {
    let file = CheckpointFile {
        format_version: CHECKPOINT_FORMAT_VERSION,
        model_kind: "lm".into(),
        alphabet: lm.alphabet().symbols().iter().collect(),
        layers: 1,
        hidden: lm.hidden_size(),
        input: lm.input_size(),
        feature_config: None,
        tensors: tensors_of(lm.tensor_views()),
    };
    write_checkpoint(path, &file)
}

pub fn load_lm_checkpoint(path: &Path) -> Result<CharLm> {
    let file = read_checkpoint(path, "lm")?;
    let alphabet = Alphabet::from_str_symbols(&file.alphabet)?;
    let mut lm = CharLm::zeros(alphabet, file.hidden);
    if file.input != lm.input_size() {
        return Err(Error::shape(
            "checkpoint lm input",
            format!("{}", lm.input_size()),
            format!("{}", file.input),
        ));
    }
    let meta: Vec<(String, Vec<usize>)> = lm
        .tensor_views()
        .into_iter()
        .map(|(n, s, _)| (n, s))
        .collect();
    fill_views(meta, lm.tensor_views_mut(), file.tensors)?;
    Ok(lm)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::lstm_sequence_forward;
    use crate::rng::uniform;

    fn spec(layers: usize, hidden: usize, input: usize, alphabet_len: usize) -> ModelSpec {
        ModelSpec {
            layers,
            hidden,
            input,
            alphabet_len,
        }
    }

    fn random_item(rng: &mut Stream, id: &str, t_len: usize, dim: usize, labels: &[usize]) -> TrainItem {
        let mut features = Mat::zeros(t_len, dim);
        for v in features.data_mut() {
            *v = uniform(rng, -1.0, 1.0);
        }
        TrainItem {
            id: id.into(),
            features,
            labels: LabelSequence(labels.to_vec()),
        }
    }

    #[test]
    fn config_ranges_are_enforced() {
        let ok = TrainConfig::default();
        assert!(ok.validate().is_ok());
        for broken in [
            TrainConfig { epochs: 0, ..ok.clone() },
            TrainConfig { momentum: 1.0, ..ok.clone() },
            TrainConfig { momentum: -0.1, ..ok.clone() },
            TrainConfig { dropout_p: 1.0, ..ok.clone() },
            TrainConfig { weight_noise_std: -0.5, ..ok.clone() },
            TrainConfig { clip_norm: 0.0, ..ok.clone() },
            TrainConfig { learning_rate: 0.0, ..ok.clone() },
            TrainConfig { learning_rate: f64::NAN, ..ok.clone() },
        ] {
            assert!(matches!(broken.validate(), Err(Error::InvalidConfig(_))));
        }
    }

    #[test]
    fn weight_noise_statistics() {
        let s = spec(1, 1, 1, 1);
        let model = ModelParams::init(&s, &mut rng::stream(31)).unwrap();
        // std = 0 is an exact copy.
        let copy = apply_weight_noise(&model, 0.0, &mut rng::stream(1));
        assert_eq!(copy, model);
        // Two rng states differ.
        let a = apply_weight_noise(&model, 0.1, &mut rng::stream(2));
        let b = apply_weight_noise(&model, 0.1, &mut rng::stream(3));
        assert_ne!(a, b);

        // Track one weight across 10000 fresh draws.
        let mut rng = rng::stream(32);
        let base = model.b_y[0];
        let n = 10_000;
        let samples: Vec<f64> = (0..n)
            .map(|_| apply_weight_noise(&model, 0.1, &mut rng).b_y[0] - base)
            .collect();
        let mean = samples.iter().sum::<f64>() / n as f64;
        let var = samples.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n as f64;
        assert!(mean.abs() < 4.0 * 0.1 / (n as f64).sqrt(), "mean {mean}");
        assert!((var.sqrt() - 0.1).abs() < 0.005, "std {}", var.sqrt());
    }

    #[test]
    fn dropout_mask_contract() {
        let masks = make_dropout_masks(&[64, 64], 0.0, &mut rng::stream(33));
        assert!(masks.iter().flatten().all(|&v| v == 1.0));

        let masks = make_dropout_masks(&[100_000], 0.5, &mut rng::stream(34));
        let kept = masks[0].iter().filter(|&&v| v != 0.0).count() as f64 / 100_000.0;
        assert!((0.49..=0.51).contains(&kept), "keep fraction {kept}");
        assert!(masks[0].iter().all(|&v| v == 0.0 || v == 2.0));

        // A fixed mask is idempotent up to its own square (exact for
        // power-of-two scales).
        let x = 0.7_f64;
        for &m in masks[0].iter().take(100) {
            assert_eq!(x * m * m, x * (m * m));
        }
    }

    #[test]
    fn clipping_rescales_only_above_threshold() {
        let s = spec(1, 2, 2, 1);
        let mut grads = ModelParams::zeros(&s).unwrap();
        // Zero gradients stay zero.
        assert_eq!(clip_gradients(&mut grads, 5.0), 0.0);
        assert!(grads.tensor_views().iter().all(|(_, _, d)| d.iter().all(|&v| v == 0.0)));

        // Below threshold: bitwise untouched.
        let mut rng = rng::stream(35);
        let mut grads = ModelParams::init(&s, &mut rng).unwrap();
        for view in grads.tensor_views_mut() {
            for v in view.iter_mut() {
                *v *= 1e-3;
            }
        }
        let before = grads.clone();
        let norm = clip_gradients(&mut grads, 5.0);
        assert!(norm < 5.0);
        assert_eq!(grads, before);

        // Above threshold: direction preserved, new norm = clip.
        let mut grads = ModelParams::init(&s, &mut rng).unwrap();
        for view in grads.tensor_views_mut() {
            for v in view.iter_mut() {
                *v *= 10.0;
            }
        }
        let before = grads.clone();
        let norm = clip_gradients(&mut grads, 5.0);
        assert!(norm > 5.0);
        let after_norm = global_norm(&grads.tensor_views_mut());
        assert!((after_norm - 5.0).abs() < 1e-12);

        let flat = |m: &ModelParams| -> Vec<f64> {
            m.tensor_views().iter().flat_map(|(_, _, d)| d.to_vec()).collect()
        };
        let (a, b) = (flat(&before), flat(&grads));
        let dot: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
        let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((dot / (na * nb) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn sgd_identities_and_convergence() {
        let s = spec(1, 1, 1, 1);
        let mut rng = rng::stream(36);
        let model0 = ModelParams::init(&s, &mut rng).unwrap();

        // lr = 0 changes nothing.
        let mut m = model0.clone();
        let mut v = m.zeros_like();
        let g = ModelParams::init(&s, &mut rng).unwrap();
        sgd_step(&mut m, &mut v, &g, 0.0, 0.9).unwrap();
        assert_eq!(m, model0);

        // momentum = 0 is plain gradient descent.
        let mut m = model0.clone();
        let mut v = m.zeros_like();
        sgd_step(&mut m, &mut v, &g, 0.5, 0.0).unwrap();
        assert!((m.b_y[0] - (model0.b_y[0] - 0.5 * g.b_y[0])).abs() < 1e-15);

        // Quadratic bowl: loss = w^2/2, grad = w, every coordinate decays.
        let mut m = model0.clone();
        for view in m.tensor_views_mut() {
            for w in view.iter_mut() {
                *w = 1.0;
            }
        }
        let mut v = m.zeros_like();
        for _ in 0..200 {
            let g = m.clone();
            sgd_step(&mut m, &mut v, &g, 0.1, 0.9).unwrap();
        }
        assert!(m.tensor_views().iter().all(|(_, _, d)| d.iter().all(|w| w.abs() < 1e-3)));

        // Mismatched shapes are rejected.
        let other = ModelParams::zeros(&spec(1, 2, 1, 1)).unwrap();
        let mut v = model0.zeros_like();
        let mut m = model0.clone();
        assert!(sgd_step(&mut m, &mut v, &other, 0.1, 0.9).is_err());
    }

    #[test]
    fn single_utterance_loss_decreases() {
        let s = spec(2, 8, 6, 3);
        let mut rng = rng::stream(37);
        let model = ModelParams::init(&s, &mut rng).unwrap();
        let item = random_item(&mut rng, "utt0", 12, 6, &[0, 2, 1]);
        let config = TrainConfig {
            epochs: 5,
            shuffle: false,
            seed: 7,
            ..TrainConfig::default()
        };
        let (_, report) = train_acoustic(model, &[item], &config).unwrap();
        assert_eq!(report.epoch_loss.len(), 5);
        for pair in report.epoch_loss.windows(2) {
            assert!(pair[1] < pair[0], "loss did not decrease: {:?}", report.epoch_loss);
        }
        assert!(report.epoch_loss.iter().all(|l| l.is_finite() && *l >= 0.0));
        assert!(report.wall_time_s >= 0.0);
    }

    #[test]
    fn training_is_bit_deterministic() {
        let s = spec(2, 4, 5, 2);
        let mut rng = rng::stream(38);
        let model = ModelParams::init(&s, &mut rng).unwrap();
        let items: Vec<TrainItem> = (0..4)
            .map(|i| random_item(&mut rng, &format!("utt{i}"), 10, 5, &[i % 2, (i + 1) % 2]))
            .collect();
        let config = TrainConfig {
            epochs: 3,
            seed: 99,
            dropout_p: 0.2,
            weight_noise_std: 0.05,
            ..TrainConfig::default()
        };
        let (a, ra) = train_acoustic(model.clone(), &items, &config).unwrap();
        let (b, rb) = train_acoustic(model.clone(), &items, &config).unwrap();
        assert_eq!(a, b);
        assert_eq!(ra.epoch_loss, rb.epoch_loss);
        assert_eq!(ra.epoch_cer, rb.epoch_cer);

        let other = TrainConfig { seed: 100, ..config };
        let (c, _) = train_acoustic(model, &items, &other).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn zero_knob_regularization_matches_a_plain_loop() {
        // With dropout_p = 0 and weight_noise_std = 0, train_acoustic must
        // be indistinguishable from a loop with no regularization code at
        // all, bit for bit.
        let s = spec(2, 4, 5, 2);
        let mut rng = rng::stream(39);
        let model = ModelParams::init(&s, &mut rng).unwrap();
        let items: Vec<TrainItem> = (0..3)
            .map(|i| random_item(&mut rng, &format!("utt{i}"), 9, 5, &[0, 1]))
            .collect();
        let config = TrainConfig {
            epochs: 4,
            seed: 5,
            dropout_p: 0.0,
            weight_noise_std: 0.0,
            ..TrainConfig::default()
        };
        let (trained, _) = train_acoustic(model.clone(), &items, &config).unwrap();

        let mut plain = model;
        let mut velocity = plain.zeros_like();
        for epoch in 0..config.epochs {
            let mut order: Vec<usize> = (0..items.len()).collect();
            let mut shuffle_rng = rng::substream(config.seed, &[0, epoch as u64]);
            rng::shuffle(&mut shuffle_rng, &mut order);
            for &idx in &order {
                let item = &items[idx];
                let (log_probs, cache) = forward_full(&plain, &item.features, None).unwrap();
                let (_, dlogits) = ctc_loss(&log_probs, &item.labels).unwrap();
                let (mut grads, _) = backward_full(&plain, &cache, &dlogits).unwrap();
                clip_gradients(&mut grads, config.clip_norm);
                sgd_step(&mut plain, &mut velocity, &grads, config.learning_rate, config.momentum)
                    .unwrap();
            }
        }
        assert_eq!(trained, plain);
    }

    #[test]
    fn dropout_only_touches_the_layer_boundary() {
        // Recurrent matrices never see the mask: the network below and
        // above the boundary can be reproduced by hand from the cached
        // (masked) boundary activation alone.
        let s = spec(2, 3, 4, 2);
        let mut rng = rng::stream(40);
        let model = ModelParams::init(&s, &mut rng).unwrap();
        let item = random_item(&mut rng, "utt", 6, 4, &[0]);
        let masks = make_dropout_masks(&model.boundary_sizes(), 0.4, &mut rng::stream(41));

        let (log_probs, cache) = forward_full(&model, &item.features, Some(&masks)).unwrap();

        // The boundary input equals mask * concat(layer-0 outputs).
        let (h0_f, h0_b) = cache.layer_hidden(0);
        let boundary = cache.layer_input(1);
        for t in 0..6 {
            for j in 0..3 {
                assert_eq!(boundary.at(t, j), h0_f.at(t, j) * masks[0][j]);
                assert_eq!(boundary.at(t, 3 + j), h0_b.at(t, j) * masks[0][3 + j]);
            }
        }

        // Re-running layer 1 directly on that boundary matrix reproduces
        // the model output exactly: no other mask entry point exists.
        let (h1_f, _) = lstm_sequence_forward(&model.layers[1].fwd, boundary, false);
        let (h1_b, _) = lstm_sequence_forward(&model.layers[1].bwd, boundary, true);
        let (c1_f, c1_b) = cache.layer_hidden(1);
        assert_eq!(h1_f.data(), c1_f.data());
        assert_eq!(h1_b.data(), c1_b.data());

        // And layer 0 is mask-independent entirely.
        let other_masks = make_dropout_masks(&model.boundary_sizes(), 0.4, &mut rng::stream(42));
        let (_, cache2) = forward_full(&model, &item.features, Some(&other_masks)).unwrap();
        let (g0_f, g0_b) = cache2.layer_hidden(0);
        assert_eq!(h0_f.data(), g0_f.data());
        assert_eq!(h0_b.data(), g0_b.data());
        let _ = log_probs;
    }

    #[test]
    fn bad_datasets_are_rejected_with_context() {
        let s = spec(1, 3, 4, 2);
        let model = ModelParams::zeros(&s).unwrap();
        let config = TrainConfig { epochs: 1, ..TrainConfig::default() };

        let err = train_acoustic(model.clone(), &[], &config).unwrap_err();
        assert!(matches!(err, Error::EmptyCorpus));

        let mut rng = rng::stream(43);
        // Target needs 3 frames (repeat inserts a blank) but has 2.
        let short = TrainItem {
            labels: LabelSequence(vec![1, 1]),
            ..random_item(&mut rng, "tight", 2, 4, &[1, 1])
        };
        let err = train_acoustic(model.clone(), &[short], &config).unwrap_err();
        match err {
            Error::BadUtterance { id, reason } => {
                assert_eq!(id, "tight");
                assert!(reason.contains("infeasible"));
            }
            other => panic!("unexpected error {other:?}"),
        }

        let empty = TrainItem {
            labels: LabelSequence(vec![]),
            ..random_item(&mut rng, "empty", 5, 4, &[])
        };
        assert!(matches!(
            train_acoustic(model.clone(), &[empty], &config),
            Err(Error::BadUtterance { .. })
        ));

        let oov = TrainItem {
            labels: LabelSequence(vec![7]),
            ..random_item(&mut rng, "oov", 5, 4, &[7])
        };
        assert!(matches!(
            train_acoustic(model, &[oov], &config),
            Err(Error::BadUtterance { .. })
        ));
    }

    #[test]
    fn non_finite_loss_reports_divergence() {
        let s = spec(1, 3, 4, 2);
        let mut rng = rng::stream(44);
        let model = ModelParams::init(&s, &mut rng).unwrap();
        let mut item = random_item(&mut rng, "nan-utt", 5, 4, &[0]);
        item.features.data_mut()[0] = f64::NAN;
        let config = TrainConfig { epochs: 1, ..TrainConfig::default() };
        match train_acoustic(model, &[item], &config) {
            Err(Error::Diverged { epoch: 0, utterance }) => assert_eq!(utterance, "nan-utt"),
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn grad_check_small_model_is_accurate() {
        let s = spec(2, 5, 4, 3);
        let mut rng = rng::stream(45);
        let model = ModelParams::init(&s, &mut rng).unwrap();
        let item = random_item(&mut rng, "gc", 6, 4, &[0, 2]);

        let err_small = grad_check_seq(&model, &item, 1e-5).unwrap();
        assert!(err_small < 1e-4, "relative error {err_small}");
        // Coarse steps lose accuracy to truncation.
        let err_large = grad_check_seq(&model, &item, 1e-1).unwrap();
        assert!(err_large > err_small);
    }

    #[cfg(feature = "parallel")]
    #[test]
    fn grad_check_parallel_matches_sequential_bitwise() {
        let s = spec(1, 4, 3, 2);
        let mut rng = rng::stream(46);
        let model = ModelParams::init(&s, &mut rng).unwrap();
        let item = random_item(&mut rng, "gc", 5, 3, &[1, 0]);
        let seq = grad_check_seq(&model, &item, 1e-5).unwrap();
        let par = grad_check_par(&model, &item, 1e-5).unwrap();
        assert_eq!(seq.to_bits(), par.to_bits());
    }

    #[test]
    fn grad_check_rejects_bad_inputs() {
        let mut rng = rng::stream(47);
        let small = ModelParams::init(&spec(1, 2, 2, 1), &mut rng).unwrap();
        let item = random_item(&mut rng, "gc", 4, 2, &[0]);
        assert!(matches!(
            grad_check_seq(&small, &item, 0.0),
            Err(Error::InvalidConfig(_))
        ));
        assert!(matches!(
            grad_check_seq(&small, &item, -1e-5),
            Err(Error::InvalidConfig(_))
        ));

        // 4 * (H*F + H*H) * 2 directions alone exceeds the cap at H = 96.
        let big = ModelParams::zeros(&spec(1, 96, 64, 1)).unwrap();
        let mut wide = Mat::zeros(4, 64);
        for v in wide.data_mut() {
            *v = 0.1;
        }
        let big_item = TrainItem {
            id: "big".into(),
            features: wide,
            labels: LabelSequence(vec![0]),
        };
        assert!(matches!(
            grad_check_seq(&big, &big_item, 1e-5),
            Err(Error::InvalidConfig(_))
        ));
    }

    #[test]
    fn acoustic_checkpoint_round_trips_bit_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let s = spec(2, 4, 7, 3);
        let mut rng = rng::stream(48);
        let model = ModelParams::init(&s, &mut rng).unwrap();
        let alphabet = Alphabet::from_str_symbols("AB ").unwrap();
        let features = FeatureConfig::default();

        save_acoustic_checkpoint(&path, &model, &alphabet, &features).unwrap();
        let (loaded, ab2, feat2) = load_acoustic_checkpoint(&path).unwrap();
        assert_eq!(loaded, model);
        assert_eq!(ab2.symbols(), alphabet.symbols());
        assert_eq!(feat2, features);

        // Saving the loaded model again produces identical bytes.
        let path2 = dir.path().join("model2.ckpt");
        save_acoustic_checkpoint(&path2, &loaded, &ab2, &feat2).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
    }

    #[test]
    fn checkpoint_rejects_bad_files() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let s = spec(1, 2, 3, 2);
        let model = ModelParams::zeros(&s).unwrap();
        let alphabet = Alphabet::from_str_symbols("AB").unwrap();
        save_acoustic_checkpoint(&path, &model, &alphabet, &FeatureConfig::default()).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();

        // Unsupported version.
        let versioned = text.replace("\"format_version\":1", "\"format_version\":999");
        std::fs::write(&path, &versioned).unwrap();
        assert!(matches!(
            load_acoustic_checkpoint(&path),
            Err(Error::FormatVersion(999))
        ));

        // Truncation is malformed, never a partial model.
        std::fs::write(&path, &text[..text.len() / 2]).unwrap();
        assert!(matches!(
            load_acoustic_checkpoint(&path),
            Err(Error::Malformed { .. })
        ));

        // Wrong kind.
        let wrong_kind = text.replace("\"model_kind\":\"acoustic\"", "\"model_kind\":\"lm\"");
        std::fs::write(&path, &wrong_kind).unwrap();
        assert!(matches!(
            load_acoustic_checkpoint(&path),
            Err(Error::Malformed { .. })
        ));

        // Renamed tensor breaks the strict name match.
        let renamed = text.replace("layer0.fwd.w_xi", "layer0.fwd.w_zz");
        std::fs::write(&path, &renamed).unwrap();
        assert!(matches!(
            load_acoustic_checkpoint(&path),
            Err(Error::Malformed { .. })
        ));

        // Missing file is an io error.
        assert!(matches!(
            load_acoustic_checkpoint(&dir.path().join("absent.ckpt")),
            Err(Error::Io(_))
        ));
    }

    #[test]
    fn report_cer_reaches_zero_on_trivial_fit() {
        // A single short utterance is learnable, but CTC spends a while on
        // the all-blank plateau first; give it room to break out.
        let s = spec(1, 8, 4, 2);
        let mut rng = rng::stream(49);
        let model = ModelParams::init(&s, &mut rng).unwrap();
        let item = random_item(&mut rng, "easy", 8, 4, &[1]);
        let config = TrainConfig {
            epochs: 150,
            learning_rate: 0.1,
            shuffle: false,
            seed: 3,
            ..TrainConfig::default()
        };
        let (_, report) = train_acoustic(model, &[item], &config).unwrap();
        assert_eq!(report.epoch_cer.len(), 150);
        assert_eq!(*report.epoch_cer.last().unwrap(), 0.0);
        assert!(
            *report.epoch_loss.last().unwrap() < report.epoch_loss[0],
            "loss should shrink: {:?}",
            report.epoch_loss
        );
    }
}
