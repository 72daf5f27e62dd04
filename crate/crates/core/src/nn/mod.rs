//! Peephole LSTM cells with hand-derived backpropagation through time,
//! stacked into a deep bidirectional network with a log-softmax output
//! layer. No autodiff: every gradient here is analytic and checked against
//! finite differences in the tests.

mod model;

pub use model::{
    backward_full, forward_full, BiLayer, ForwardCache, ModelParams, ModelSpec,
};

use crate::linalg::{add_assign, add_hadamard, Mat};
use crate::rng::{uniform, Stream};

pub(crate) fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// All weights of one LSTM direction: input-to-gate and recurrent matrices,
/// diagonal peephole vectors, and gate biases.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmParams {
    pub w_xi: Mat,
    pub w_xf: Mat,
    pub w_xc: Mat,
    pub w_xo: Mat,
    pub w_hi: Mat,
    pub w_hf: Mat,
    pub w_hc: Mat,
    pub w_ho: Mat,
    pub w_ci: Vec<f64>,
    pub w_cf: Vec<f64>,
    pub w_co: Vec<f64>,
    pub b_i: Vec<f64>,
    pub b_f: Vec<f64>,
    pub b_c: Vec<f64>,
    pub b_o: Vec<f64>,
}

impl LstmParams {
    pub fn zeros(input: usize, hidden: usize) -> Self {
        LstmParams {
            w_xi: Mat::zeros(hidden, input),
            w_xf: Mat::zeros(hidden, input),
            w_xc: Mat::zeros(hidden, input),
            w_xo: Mat::zeros(hidden, input),
            w_hi: Mat::zeros(hidden, hidden),
            w_hf: Mat::zeros(hidden, hidden),
            w_hc: Mat::zeros(hidden, hidden),
            w_ho: Mat::zeros(hidden, hidden),
            w_ci: vec![0.0; hidden],
            w_cf: vec![0.0; hidden],
            w_co: vec![0.0; hidden],
            b_i: vec![0.0; hidden],
            b_f: vec![0.0; hidden],
            b_c: vec![0.0; hidden],
            b_o: vec![0.0; hidden],
        }
    }

    /// Weights (matrices and peepholes) uniform in [-0.1, 0.1]; forget bias
    /// 1.0 for early gradient flow, other biases zero.
    pub fn init(input: usize, hidden: usize, rng: &mut Stream) -> Self {
        let mut p = LstmParams::zeros(input, hidden);
        for w in [
            &mut p.w_xi, &mut p.w_xf, &mut p.w_xc, &mut p.w_xo,
            &mut p.w_hi, &mut p.w_hf, &mut p.w_hc, &mut p.w_ho,
        ] {
            for v in w.data_mut() {
                *v = uniform(rng, -0.1, 0.1);
            }
        }
        for w in [&mut p.w_ci, &mut p.w_cf, &mut p.w_co] {
            for v in w.iter_mut() {
                *v = uniform(rng, -0.1, 0.1);
            }
        }
        p.b_f.iter_mut().for_each(|v| *v = 1.0);
        p
    }

    pub fn input_size(&self) -> usize {
        self.w_xi.cols()
    }

    pub fn hidden_size(&self) -> usize {
        self.w_xi.rows()
    }

    pub(crate) const TENSOR_NAMES: [&'static str; 15] = [
        "w_xi", "w_xf", "w_xc", "w_xo", "w_hi", "w_hf", "w_hc", "w_ho",
        "w_ci", "w_cf", "w_co", "b_i", "b_f", "b_c", "b_o",
    ];

    pub(crate) fn tensor_views(&self) -> Vec<(&'static str, Vec<usize>, &[f64])> {
        let h = self.hidden_size();
        let mats = [
            &self.w_xi, &self.w_xf, &self.w_xc, &self.w_xo,
            &self.w_hi, &self.w_hf, &self.w_hc, &self.w_ho,
        ];
        let vecs = [
            &self.w_ci, &self.w_cf, &self.w_co,
            &self.b_i, &self.b_f, &self.b_c, &self.b_o,
        ];
        let mut out = Vec::with_capacity(15);
        for (name, m) in Self::TENSOR_NAMES[..8].iter().zip(mats) {
            out.push((*name, vec![m.rows(), m.cols()], m.data()));
        }
        for (name, v) in Self::TENSOR_NAMES[8..].iter().zip(vecs) {
            out.push((*name, vec![h], v.as_slice()));
        }
        out
    }

    /// Mutable flat views in the same order as [`Self::tensor_views`].
    pub(crate) fn tensor_views_mut(&mut self) -> Vec<&mut [f64]> {
        vec![
            self.w_xi.data_mut(), self.w_xf.data_mut(), self.w_xc.data_mut(), self.w_xo.data_mut(),
            self.w_hi.data_mut(), self.w_hf.data_mut(), self.w_hc.data_mut(), self.w_ho.data_mut(),
            &mut self.w_ci, &mut self.w_cf, &mut self.w_co,
            &mut self.b_i, &mut self.b_f, &mut self.b_c, &mut self.b_o,
        ]
    }
}

/// Recurrent state carried between time steps.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmState {
    pub h: Vec<f64>,
    pub c: Vec<f64>,
}

impl LstmState {
    pub fn zeros(hidden: usize) -> Self {
        LstmState {
            h: vec![0.0; hidden],
            c: vec![0.0; hidden],
        }
    }
}

/// Intermediate activations of one cell step, kept for the backward pass.
#[derive(Debug, Clone)]
pub struct CellCache {
    pub x: Vec<f64>,
    pub h_prev: Vec<f64>,
    pub c_prev: Vec<f64>,
    pub i: Vec<f64>,
    pub f: Vec<f64>,
    pub g: Vec<f64>,
    pub o: Vec<f64>,
    pub c: Vec<f64>,
    pub tanh_c: Vec<f64>,
}

/// One step of the peephole LSTM:
///
/// ```text
/// i_t = sigma(W_xi x_t + W_hi h_{t-1} + w_ci . c_{t-1} + b_i)
/// f_t = sigma(W_xf x_t + W_hf h_{t-1} + w_cf . c_{t-1} + b_f)
/// c_t = f_t . c_{t-1} + i_t . tanh(W_xc x_t + W_hc h_{t-1} + b_c)
/// o_t = sigma(W_xo x_t + W_ho h_{t-1} + w_co . c_t + b_o)
/// h_t = o_t . tanh(c_t)
/// ```
pub fn lstm_cell_forward(p: &LstmParams, x: &[f64], prev: &LstmState) -> (LstmState, CellCache) {
    let h = p.hidden_size();
    assert_eq!(x.len(), p.input_size(), "input size mismatch");
    assert_eq!(prev.h.len(), h, "state size mismatch");

    let mut a_i = p.b_i.clone();
    p.w_xi.matvec_acc(x, &mut a_i);
    p.w_hi.matvec_acc(&prev.h, &mut a_i);
    add_hadamard(&mut a_i, &p.w_ci, &prev.c);

    let mut a_f = p.b_f.clone();
    p.w_xf.matvec_acc(x, &mut a_f);
    p.w_hf.matvec_acc(&prev.h, &mut a_f);
    add_hadamard(&mut a_f, &p.w_cf, &prev.c);

    let mut a_g = p.b_c.clone();
    p.w_xc.matvec_acc(x, &mut a_g);
    p.w_hc.matvec_acc(&prev.h, &mut a_g);

    let i: Vec<f64> = a_i.iter().map(|&v| sigmoid(v)).collect();
    let f: Vec<f64> = a_f.iter().map(|&v| sigmoid(v)).collect();
    let g: Vec<f64> = a_g.iter().map(|&v| v.tanh()).collect();

    let c: Vec<f64> = (0..h).map(|j| f[j] * prev.c[j] + i[j] * g[j]).collect();

    let mut a_o = p.b_o.clone();
    p.w_xo.matvec_acc(x, &mut a_o);
    p.w_ho.matvec_acc(&prev.h, &mut a_o);
    add_hadamard(&mut a_o, &p.w_co, &c);
    let o: Vec<f64> = a_o.iter().map(|&v| sigmoid(v)).collect();

    let tanh_c: Vec<f64> = c.iter().map(|&v| v.tanh()).collect();
    let h_out: Vec<f64> = (0..h).map(|j| o[j] * tanh_c[j]).collect();

    let state = LstmState {
        h: h_out,
        c: c.clone(),
    };
    let cache = CellCache {
        x: x.to_vec(),
        h_prev: prev.h.clone(),
        c_prev: prev.c.clone(),
        i,
        f,
        g,
        o,
        c,
        tanh_c,
    };
    (state, cache)
}

/// Backward through one cell step. `dh` is the total gradient into `h_t`,
/// `dc_carry` the gradient into `c_t` arriving from step t+1. Parameter
/// gradients accumulate into `grads`; returns `(dx, dh_prev, dc_prev)`.
pub fn lstm_cell_backward(
    p: &LstmParams,
    cache: &CellCache,
    dh: &[f64],
    dc_carry: &[f64],
    grads: &mut LstmParams,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let h = p.hidden_size();
    let n_in = p.input_size();

    // Output gate; a_o also feeds c_t through the peephole.
    let mut da_o = vec![0.0; h];
    let mut dc = dc_carry.to_vec();
    for j in 0..h {
        let do_j = dh[j] * cache.tanh_c[j];
        da_o[j] = do_j * cache.o[j] * (1.0 - cache.o[j]);
        dc[j] += dh[j] * cache.o[j] * (1.0 - cache.tanh_c[j] * cache.tanh_c[j])
            + da_o[j] * p.w_co[j];
    }

    let mut da_i = vec![0.0; h];
    let mut da_f = vec![0.0; h];
    let mut da_g = vec![0.0; h];
    let mut dc_prev = vec![0.0; h];
    for j in 0..h {
        da_g[j] = dc[j] * cache.i[j] * (1.0 - cache.g[j] * cache.g[j]);
        da_i[j] = dc[j] * cache.g[j] * cache.i[j] * (1.0 - cache.i[j]);
        da_f[j] = dc[j] * cache.c_prev[j] * cache.f[j] * (1.0 - cache.f[j]);
        dc_prev[j] = dc[j] * cache.f[j] + da_i[j] * p.w_ci[j] + da_f[j] * p.w_cf[j];
    }

    // Parameter gradients.
    grads.w_xi.add_outer(&da_i, &cache.x);
    grads.w_xf.add_outer(&da_f, &cache.x);
    grads.w_xc.add_outer(&da_g, &cache.x);
    grads.w_xo.add_outer(&da_o, &cache.x);
    grads.w_hi.add_outer(&da_i, &cache.h_prev);
    grads.w_hf.add_outer(&da_f, &cache.h_prev);
    grads.w_hc.add_outer(&da_g, &cache.h_prev);
    grads.w_ho.add_outer(&da_o, &cache.h_prev);
    add_hadamard(&mut grads.w_ci, &da_i, &cache.c_prev);
    add_hadamard(&mut grads.w_cf, &da_f, &cache.c_prev);
    add_hadamard(&mut grads.w_co, &da_o, &cache.c);
    add_assign(&mut grads.b_i, &da_i);
    add_assign(&mut grads.b_f, &da_f);
    add_assign(&mut grads.b_c, &da_g);
    add_assign(&mut grads.b_o, &da_o);

    // Upstream gradients.
    let mut dx = vec![0.0; n_in];
    p.w_xi.matvec_t_acc(&da_i, &mut dx);
    p.w_xf.matvec_t_acc(&da_f, &mut dx);
    p.w_xc.matvec_t_acc(&da_g, &mut dx);
    p.w_xo.matvec_t_acc(&da_o, &mut dx);
    let mut dh_prev = vec![0.0; h];
    p.w_hi.matvec_t_acc(&da_i, &mut dh_prev);
    p.w_hf.matvec_t_acc(&da_f, &mut dh_prev);
    p.w_hc.matvec_t_acc(&da_g, &mut dh_prev);
    p.w_ho.matvec_t_acc(&da_o, &mut dh_prev);

    (dx, dh_prev, dc_prev)
}

/// Run the cell over a sequence from a zero initial state. With
/// `reverse = true` the recurrence runs from the last frame to the first;
/// hidden vectors are always returned in original time order.
pub fn lstm_sequence_forward(p: &LstmParams, xs: &Mat, reverse: bool) -> (Mat, Vec<CellCache>) {
    let t_len = xs.rows();
    let h = p.hidden_size();
    assert!(t_len >= 1, "empty sequence");
    let mut hs = Mat::zeros(t_len, h);
    let mut caches: Vec<Option<CellCache>> = (0..t_len).map(|_| None).collect();
    let mut state = LstmState::zeros(h);
    let order: Vec<usize> = if reverse {
        (0..t_len).rev().collect()
    } else {
        (0..t_len).collect()
    };
    for &t in &order {
        let (next, cache) = lstm_cell_forward(p, xs.row(t), &state);
        hs.row_mut(t).copy_from_slice(&next.h);
        caches[t] = Some(cache);
        state = next;
    }
    (hs, caches.into_iter().map(Option::unwrap).collect())
}

/// BPTT over a sequence processed by [`lstm_sequence_forward`]. `dhs` holds
/// the upstream gradient into each returned hidden vector (original time
/// order). Parameter gradients accumulate into `grads`; returns the
/// gradient with respect to each input row.
pub fn lstm_sequence_backward(
    p: &LstmParams,
    caches: &[CellCache],
    dhs: &Mat,
    reverse: bool,
    grads: &mut LstmParams,
) -> Mat {
    let t_len = caches.len();
    let h = p.hidden_size();
    assert_eq!(dhs.rows(), t_len);
    assert_eq!(dhs.cols(), h);

    let mut dxs = Mat::zeros(t_len, p.input_size());
    let mut dh_carry = vec![0.0; h];
    let mut dc_carry = vec![0.0; h];
    // Walk opposite to the processing order so the carry follows the chain.
    let order: Vec<usize> = if reverse {
        (0..t_len).collect()
    } else {
        (0..t_len).rev().collect()
    };
    for &t in &order {
        let mut dh = dhs.row(t).to_vec();
        add_assign(&mut dh, &dh_carry);
        let (dx, dh_prev, dc_prev) = lstm_cell_backward(p, &caches[t], &dh, &dc_carry, grads);
        dxs.row_mut(t).copy_from_slice(&dx);
        dh_carry = dh_prev;
        dc_carry = dc_prev;
    }
    dxs
}
