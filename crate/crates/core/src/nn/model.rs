//! Deep bidirectional model: stacked forward/backward LSTM pairs whose
//! directional outputs are concatenated between layers and summed through
//! separate projections at the log-softmax output layer.

use crate::error::{Error, Result};
use crate::linalg::Mat;
use crate::nn::{
    lstm_sequence_backward, lstm_sequence_forward, CellCache, LstmParams,
};
use crate::numeric::lse;
use crate::rng::Stream;

/// Architecture sizes: `layers` stacked bidirectional pairs of `hidden`
/// units over `input`-dimensional frames, classifying into
/// `alphabet_len + 1` classes (labels plus blank).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelSpec {
    pub layers: usize,
    pub hidden: usize,
    pub input: usize,
    pub alphabet_len: usize,
}

impl ModelSpec {
    pub fn num_classes(&self) -> usize {
        self.alphabet_len + 1
    }

    fn validate(&self) -> Result<()> {
        if self.layers < 1 || self.hidden < 1 || self.input < 1 || self.alphabet_len < 1 {
            return Err(Error::InvalidConfig(format!(
                "all model sizes must be >= 1, got {self:?}"
            )));
        }
        Ok(())
    }
}

/// One stacked layer: a forward-time and a backward-time LSTM.
#[derive(Debug, Clone, PartialEq)]
pub struct BiLayer {
    pub fwd: LstmParams,
    pub bwd: LstmParams,
}

/// Full acoustic model parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub layers: Vec<BiLayer>,
    /// Output projections, one per direction: `num_classes x hidden`.
    pub w_yf: Mat,
    pub w_yb: Mat,
    pub b_y: Vec<f64>,
}

impl ModelParams {
    /// Seeded initialization, one stream drawn front to back: weights
    /// uniform in [-0.1, 0.1], forget biases 1.0, other biases zero.
    pub fn init(spec: &ModelSpec, rng: &mut Stream) -> Result<Self> {
        spec.validate()?;
        let mut layers = Vec::with_capacity(spec.layers);
        for l in 0..spec.layers {
            let input = if l == 0 { spec.input } else { 2 * spec.hidden };
            layers.push(BiLayer {
                fwd: LstmParams::init(input, spec.hidden, rng),
                bwd: LstmParams::init(input, spec.hidden, rng),
            });
        }
        let c = spec.num_classes();
        let mut w_yf = Mat::zeros(c, spec.hidden);
        let mut w_yb = Mat::zeros(c, spec.hidden);
        for w in [&mut w_yf, &mut w_yb] {
            for v in w.data_mut() {
                *v = crate::rng::uniform(rng, -0.1, 0.1);
            }
        }
        Ok(ModelParams {
            layers,
            w_yf,
            w_yb,
            b_y: vec![0.0; c],
        })
    }

    pub fn zeros(spec: &ModelSpec) -> Result<Self> {
        spec.validate()?;
        let mut layers = Vec::with_capacity(spec.layers);
        for l in 0..spec.layers {
            let input = if l == 0 { spec.input } else { 2 * spec.hidden };
            layers.push(BiLayer {
                fwd: LstmParams::zeros(input, spec.hidden),
                bwd: LstmParams::zeros(input, spec.hidden),
            });
        }
        let c = spec.num_classes();
        Ok(ModelParams {
            layers,
            w_yf: Mat::zeros(c, spec.hidden),
            w_yb: Mat::zeros(c, spec.hidden),
            b_y: vec![0.0; c],
        })
    }

    pub fn zeros_like(&self) -> Self {
        ModelParams::zeros(&self.spec()).expect("existing model has valid sizes")
    }

    pub fn spec(&self) -> ModelSpec {
        ModelSpec {
            layers: self.layers.len(),
            hidden: self.hidden_size(),
            input: self.input_size(),
            alphabet_len: self.num_classes() - 1,
        }
    }

    pub fn input_size(&self) -> usize {
        self.layers[0].fwd.input_size()
    }

    pub fn hidden_size(&self) -> usize {
        self.layers[0].fwd.hidden_size()
    }

    pub fn num_classes(&self) -> usize {
        self.b_y.len()
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    /// Sizes of the inter-layer activations dropout masks apply to:
    /// one `2*hidden` boundary per adjacent layer pair.
    pub fn boundary_sizes(&self) -> Vec<usize> {
        vec![2 * self.hidden_size(); self.num_layers().saturating_sub(1)]
    }

    /// Named flat tensors in a fixed, documented order (checkpoint layout).
    pub fn tensor_views(&self) -> Vec<(String, Vec<usize>, &[f64])> {
        let mut out = Vec::new();
        for (l, pair) in self.layers.iter().enumerate() {
            for (dir, p) in [("fwd", &pair.fwd), ("bwd", &pair.bwd)] {
                for (name, shape, data) in p.tensor_views() {
                    out.push((format!("layer{l}.{dir}.{name}"), shape, data));
                }
            }
        }
        out.push((
            "w_yf".into(),
            vec![self.w_yf.rows(), self.w_yf.cols()],
            self.w_yf.data(),
        ));
        out.push((
            "w_yb".into(),
            vec![self.w_yb.rows(), self.w_yb.cols()],
            self.w_yb.data(),
        ));
        out.push(("b_y".into(), vec![self.b_y.len()], self.b_y.as_slice()));
        out
    }

    /// Mutable flat tensors in the same order as [`Self::tensor_views`].
    pub fn tensor_views_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::new();
        for pair in &mut self.layers {
            out.extend(pair.fwd.tensor_views_mut());
            out.extend(pair.bwd.tensor_views_mut());
        }
        out.push(self.w_yf.data_mut());
        out.push(self.w_yb.data_mut());
        out.push(&mut self.b_y);
        out
    }

    pub fn num_params(&self) -> usize {
        self.tensor_views().iter().map(|(_, _, d)| d.len()).sum()
    }
}

/// Everything the backward pass needs from a forward run.
pub struct ForwardCache {
    /// Input to each layer after masking; `[0]` is the feature matrix.
    layer_inputs: Vec<Mat>,
    dir_caches: Vec<(Vec<CellCache>, Vec<CellCache>)>,
    /// Per-layer directional hidden sequences, original time order.
    hs: Vec<(Mat, Mat)>,
    masks: Option<Vec<Vec<f64>>>,
}

impl ForwardCache {
    /// The (masked) matrix layer `l` consumed.
    pub fn layer_input(&self, layer: usize) -> &Mat {
        &self.layer_inputs[layer]
    }

    /// Forward and backward hidden sequences produced by layer `l`.
    pub fn layer_hidden(&self, layer: usize) -> (&Mat, &Mat) {
        let (f, b) = &self.hs[layer];
        (f, b)
    }
}

fn log_softmax_rows(logits: &Mat) -> Mat {
    let mut out = logits.clone();
    for t in 0..out.rows() {
        let z = lse(out.row(t));
        for v in out.row_mut(t) {
            *v -= z;
        }
    }
    out
}

fn validate_masks(m: &ModelParams, masks: &Option<&[Vec<f64>]>) -> Result<()> {
    if let Some(ms) = masks {
        let expected = m.boundary_sizes();
        if ms.len() != expected.len() {
            return Err(Error::shape(
                "dropout masks",
                format!("{} masks", expected.len()),
                format!("{} masks", ms.len()),
            ));
        }
        for (i, (mask, want)) in ms.iter().zip(&expected).enumerate() {
            if mask.len() != *want {
                return Err(Error::shape(
                    "dropout mask",
                    format!("boundary {i}: {want}"),
                    format!("{}", mask.len()),
                ));
            }
        }
    }
    Ok(())
}

/// Full network forward pass over `features` (T x F). Per layer both
/// directions run over the same input; their outputs are concatenated
/// `[h_fwd | h_bwd]` to feed the next layer (dropout masks, when given,
/// multiply exactly these inter-layer activations, one fixed mask per
/// boundary). The last layer feeds summed projections
/// `logits_t = W_yf h_fwd_t + W_yb h_bwd_t + b_y`, and rows are
/// log-softmaxed.
pub fn forward_full(
    m: &ModelParams,
    features: &Mat,
    masks: Option<&[Vec<f64>]>,
) -> Result<(Mat, ForwardCache)> {
    if features.cols() != m.input_size() {
        return Err(Error::shape(
            "features",
            format!("{} dims", m.input_size()),
            format!("{} dims", features.cols()),
        ));
    }
    if features.rows() == 0 {
        return Err(Error::shape("features", "T >= 1", "T = 0"));
    }
    validate_masks(m, &masks)?;

    let t_len = features.rows();
    let h = m.hidden_size();
    let mut layer_inputs = vec![features.clone()];
    let mut dir_caches = Vec::with_capacity(m.num_layers());
    let mut hs = Vec::with_capacity(m.num_layers());

    for (l, pair) in m.layers.iter().enumerate() {
        let input = &layer_inputs[l];
        let (hs_f, hs_b, caches_f, caches_b) = run_directions(pair, input);
        if l + 1 < m.num_layers() {
            let mut concat = Mat::zeros(t_len, 2 * h);
            for t in 0..t_len {
                concat.row_mut(t)[..h].copy_from_slice(hs_f.row(t));
                concat.row_mut(t)[h..].copy_from_slice(hs_b.row(t));
            }
            if let Some(ms) = masks {
                let mask = &ms[l];
                for t in 0..t_len {
                    for (v, mv) in concat.row_mut(t).iter_mut().zip(mask) {
                        *v *= mv;
                    }
                }
            }
            layer_inputs.push(concat);
        }
        dir_caches.push((caches_f, caches_b));
        hs.push((hs_f, hs_b));
    }

    let (last_f, last_b) = &hs[m.num_layers() - 1];
    let mut logits = Mat::zeros(t_len, m.num_classes());
    for t in 0..t_len {
        let row = logits.row_mut(t);
        row.copy_from_slice(&m.b_y);
        m.w_yf.matvec_acc(last_f.row(t), row);
        m.w_yb.matvec_acc(last_b.row(t), row);
    }
    let log_probs = log_softmax_rows(&logits);

    Ok((
        log_probs,
        ForwardCache {
            layer_inputs,
            dir_caches,
            hs,
            masks: masks.map(|ms| ms.to_vec()),
        },
    ))
}

#[cfg(feature = "parallel")]
fn run_directions(pair: &BiLayer, input: &Mat) -> (Mat, Mat, Vec<CellCache>, Vec<CellCache>) {
    // The two directions share only read-only inputs.
    let ((hs_f, caches_f), (hs_b, caches_b)) = rayon::join(
        || lstm_sequence_forward(&pair.fwd, input, false),
        || lstm_sequence_forward(&pair.bwd, input, true),
    );
    (hs_f, hs_b, caches_f, caches_b)
}

#[cfg(not(feature = "parallel"))]
fn run_directions(pair: &BiLayer, input: &Mat) -> (Mat, Mat, Vec<CellCache>, Vec<CellCache>) {
    let (hs_f, caches_f) = lstm_sequence_forward(&pair.fwd, input, false);
    let (hs_b, caches_b) = lstm_sequence_forward(&pair.bwd, input, true);
    (hs_f, hs_b, caches_f, caches_b)
}

/// Analytic gradients for the scalar loss whose gradient with respect to
/// the output logits is `dlogits`. Returns parameter gradients in
/// [`ModelParams`] shape plus the gradient with respect to the input
/// features.
pub fn backward_full(
    m: &ModelParams,
    cache: &ForwardCache,
    dlogits: &Mat,
) -> Result<(ModelParams, Mat)> {
    let t_len = cache.layer_inputs[0].rows();
    if dlogits.rows() != t_len || dlogits.cols() != m.num_classes() {
        return Err(Error::shape(
            "dlogits",
            format!("{} x {}", t_len, m.num_classes()),
            format!("{} x {}", dlogits.rows(), dlogits.cols()),
        ));
    }
    if cache.dir_caches.len() != m.num_layers() {
        return Err(Error::shape(
            "forward cache",
            format!("{} layers", m.num_layers()),
            format!("{} layers", cache.dir_caches.len()),
        ));
    }

    let h = m.hidden_size();
    let mut grads = m.zeros_like();

    // Output layer.
    let (last_f, last_b) = &cache.hs[m.num_layers() - 1];
    let mut dh_f = Mat::zeros(t_len, h);
    let mut dh_b = Mat::zeros(t_len, h);
    for t in 0..t_len {
        let d = dlogits.row(t);
        grads.w_yf.add_outer(d, last_f.row(t));
        grads.w_yb.add_outer(d, last_b.row(t));
        crate::linalg::add_assign(&mut grads.b_y, d);
        m.w_yf.matvec_t_acc(d, dh_f.row_mut(t));
        m.w_yb.matvec_t_acc(d, dh_b.row_mut(t));
    }

    // Walk layers top-down, splitting the concatenated gradient at each
    // masked boundary.
    for l in (0..m.num_layers()).rev() {
        let pair = &m.layers[l];
        let gpair = &mut grads.layers[l];
        let (caches_f, caches_b) = &cache.dir_caches[l];
        let dx_f = lstm_sequence_backward(&pair.fwd, caches_f, &dh_f, false, &mut gpair.fwd);
        let dx_b = lstm_sequence_backward(&pair.bwd, caches_b, &dh_b, true, &mut gpair.bwd);

        let mut d_input = dx_f;
        for t in 0..t_len {
            crate::linalg::add_assign(d_input.row_mut(t), dx_b.row(t));
        }

        if l == 0 {
            return Ok((grads, d_input));
        }

        if let Some(ms) = &cache.masks {
            let mask = &ms[l - 1];
            for t in 0..t_len {
                for (v, mv) in d_input.row_mut(t).iter_mut().zip(mask) {
                    *v *= mv;
                }
            }
        }
        dh_f = Mat::zeros(t_len, h);
        dh_b = Mat::zeros(t_len, h);
        for t in 0..t_len {
            dh_f.row_mut(t).copy_from_slice(&d_input.row(t)[..h]);
            dh_b.row_mut(t).copy_from_slice(&d_input.row(t)[h..]);
        }
    }
    unreachable!("layer 0 returns")
}
