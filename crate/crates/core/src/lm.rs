//! Character-level LSTM language model and n-best rescoring. The LM scores
//! a transcript by teacher forcing: each step consumes the previous
//! character (or a start marker) one-hot and predicts a distribution over
//! the alphabet plus an end marker. Rescoring adds λ times the LM score to
//! the acoustic score, which in probability space multiplies the two
//! model outputs.

use crate::ctc::{Alphabet, LabelSequence};
use crate::decode::Hypothesis;
use crate::error::{Error, Result};
use crate::linalg::Mat;
use crate::nn::{lstm_sequence_backward, lstm_sequence_forward, LstmParams};
use crate::numeric::lse;
use crate::rng::{self, Stream};
use crate::train::{clip_views, noise_views, sgd_views, TrainConfig, TrainReport};

/// Single-direction LSTM over characters. Input one-hots have `V + 1`
/// slots (alphabet plus start marker at slot `V`); the output distribution
/// has `V + 1` slots (alphabet plus end marker at slot `V`).
#[derive(Debug, Clone, PartialEq)]
pub struct CharLm {
    alphabet: Alphabet,
    pub lstm: LstmParams,
    /// Output projection, `(V + 1) x hidden`.
    pub w_y: Mat,
    pub b_y: Vec<f64>,
}

impl CharLm {
    pub fn zeros(alphabet: Alphabet, hidden: usize) -> Self {
        let v = alphabet.len();
        CharLm {
            alphabet,
            lstm: LstmParams::zeros(v + 1, hidden),
            w_y: Mat::zeros(v + 1, hidden),
            b_y: vec![0.0; v + 1],
        }
    }

    /// Same scheme as the acoustic model: weights uniform in [-0.1, 0.1],
    /// forget biases 1, other biases 0.
    pub fn init(alphabet: Alphabet, hidden: usize, rng: &mut Stream) -> Self {
        let v = alphabet.len();
        let mut lm = CharLm {
            alphabet,
            lstm: LstmParams::init(v + 1, hidden, rng),
            w_y: Mat::zeros(v + 1, hidden),
            b_y: vec![0.0; v + 1],
        };
        for w in lm.w_y.data_mut() {
            *w = rng::uniform(rng, -0.1, 0.1);
        }
        lm
    }

    pub fn alphabet(&self) -> &Alphabet {
        &self.alphabet
    }

    pub fn hidden_size(&self) -> usize {
        self.lstm.hidden_size()
    }

    pub fn input_size(&self) -> usize {
        self.lstm.input_size()
    }

    fn vocab(&self) -> usize {
        self.alphabet.len()
    }

    pub(crate) fn tensor_views(&self) -> Vec<(String, Vec<usize>, &[f64])> {
        let mut out: Vec<(String, Vec<usize>, &[f64])> = self
            .lstm
            .tensor_views()
            .into_iter()
            .map(|(n, s, d)| (format!("lstm.{n}"), s, d))
            .collect();
        out.push(("w_y".into(), vec![self.w_y.rows(), self.w_y.cols()], self.w_y.data()));
        out.push(("b_y".into(), vec![self.b_y.len()], self.b_y.as_slice()));
        out
    }

    pub(crate) fn tensor_views_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = self.lstm.tensor_views_mut();
        out.push(self.w_y.data_mut());
        out.push(&mut self.b_y);
        out
    }

    fn validate(&self, transcript: &LabelSequence) -> Result<()> {
        let v = self.vocab();
        for &label in transcript.as_slice() {
            if label >= v {
                return Err(Error::LabelOutOfRange { index: label, len: v });
            }
        }
        Ok(())
    }

    /// Teacher-forced inputs: start marker, then each character.
    fn one_hot_inputs(&self, transcript: &LabelSequence) -> Mat {
        let v = self.vocab();
        let mut xs = Mat::zeros(transcript.len() + 1, v + 1);
        *xs.at_mut(0, v) = 1.0;
        for (i, &label) in transcript.as_slice().iter().enumerate() {
            *xs.at_mut(i + 1, label) = 1.0;
        }
        xs
    }

    /// Per-step next-symbol log distributions (rows sum to one in
    /// probability space) plus the recurrence tapes for training.
    fn step_log_probs(
        &self,
        transcript: &LabelSequence,
    ) -> Result<(Mat, Mat, Vec<crate::nn::CellCache>)> {
        self.validate(transcript)?;
        let xs = self.one_hot_inputs(transcript);
        let (hs, caches) = lstm_sequence_forward(&self.lstm, &xs, false);
        let steps = xs.rows();
        let mut log_probs = Mat::zeros(steps, self.vocab() + 1);
        for s in 0..steps {
            let row = log_probs.row_mut(s);
            row.copy_from_slice(&self.b_y);
            self.w_y.matvec_acc(hs.row(s), row);
            let z = lse(row);
            for v in row.iter_mut() {
                *v -= z;
            }
        }
        Ok((log_probs, hs, caches))
    }

    fn targets(&self, transcript: &LabelSequence) -> Vec<usize> {
        let mut t: Vec<usize> = transcript.as_slice().to_vec();
        t.push(self.vocab());
        t
    }

    /// Teacher-forced log-probability of the transcript followed by the
    /// end marker: Σ log P(char_i | chars before it) + log P(end | all).
    /// Always ≤ 0.
    pub fn lm_score(&self, transcript: &LabelSequence) -> Result<f64> {
        let (log_probs, _, _) = self.step_log_probs(transcript)?;
        Ok(self
            .targets(transcript)
            .iter()
            .enumerate()
            .map(|(s, &t)| log_probs.at(s, t))
            .sum())
    }

    /// Cross-entropy loss (−lm_score) and its parameter gradients.
    fn loss_and_grads(&self, transcript: &LabelSequence) -> Result<(f64, CharLm)> {
        let (log_probs, hs, caches) = self.step_log_probs(transcript)?;
        let targets = self.targets(transcript);
        let steps = log_probs.rows();
        let loss: f64 = -targets
            .iter()
            .enumerate()
            .map(|(s, &t)| log_probs.at(s, t))
            .sum::<f64>();

        let mut grads = CharLm::zeros(self.alphabet.clone(), self.hidden_size());
        let mut dhs = Mat::zeros(steps, self.hidden_size());
        for s in 0..steps {
            // d(-log p[target])/dlogit = softmax - one_hot(target).
            let mut dlogit: Vec<f64> = log_probs.row(s).iter().map(|lp| lp.exp()).collect();
            dlogit[targets[s]] -= 1.0;
            grads.w_y.add_outer(&dlogit, hs.row(s));
            crate::linalg::add_assign(&mut grads.b_y, &dlogit);
            self.w_y.matvec_t_acc(&dlogit, dhs.row_mut(s));
        }
        lstm_sequence_backward(&self.lstm, &caches, &dhs, false, &mut grads.lstm);
        Ok((loss, grads))
    }
}

/// Train a character LM with the shared optimizer loop: seeded shuffling,
/// optional weight noise, global-norm clipping, and momentum SGD with
/// per-transcript updates. The single-layer LM has no inter-layer
/// boundary, so `dropout_p` has nothing to act on and is ignored.
/// `TrainReport.epoch_loss` holds mean per-character cross-entropy (the
/// end marker counts as a character); `epoch_cer` stays empty.
pub fn lm_train(
    transcripts: &[LabelSequence],
    alphabet: Alphabet,
    hidden: usize,
    config: &TrainConfig,
) -> Result<(CharLm, TrainReport)> {
    config.validate()?;
    if transcripts.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let start = std::time::Instant::now();
    let mut lm = CharLm::init(alphabet, hidden, &mut rng::stream(config.seed));
    for t in transcripts {
        lm.validate(t)?;
    }
    let mut velocity = CharLm::zeros(lm.alphabet.clone(), hidden);
    let mut epoch_loss = Vec::with_capacity(config.epochs);

    for epoch in 0..config.epochs {
        let mut order: Vec<usize> = (0..transcripts.len()).collect();
        if config.shuffle {
            let mut shuffle_rng = rng::substream(config.seed, &[0, epoch as u64]);
            rng::shuffle(&mut shuffle_rng, &mut order);
        }
        let mut total_loss = 0.0;
        let mut total_steps = 0usize;
        for &idx in &order {
            let transcript = &transcripts[idx];
            let mut utt_rng = rng::substream(config.seed, &[1, epoch as u64, idx as u64]);
            let noisy;
            let eval_lm = if config.weight_noise_std > 0.0 {
                let mut copy = lm.clone();
                noise_views(&mut copy.tensor_views_mut(), config.weight_noise_std, &mut utt_rng);
                noisy = copy;
                &noisy
            } else {
                &lm
            };
            let (loss, mut grads) = eval_lm.loss_and_grads(transcript)?;
            if !loss.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    utterance: format!("transcript {idx}"),
                });
            }
            clip_views(&mut grads.tensor_views_mut(), config.clip_norm);
            let grad_views = grads.tensor_views();
            let flat: Vec<&[f64]> = grad_views.iter().map(|(_, _, d)| *d).collect();
            sgd_views(
                &mut lm.tensor_views_mut(),
                &mut velocity.tensor_views_mut(),
                &flat,
                config.learning_rate,
                config.momentum,
            )?;
            total_loss += loss;
            total_steps += transcript.len() + 1;
        }
        epoch_loss.push(total_loss / total_steps as f64);
    }

    Ok((
        lm,
        TrainReport {
            epoch_loss,
            epoch_cer: Vec::new(),
            wall_time_s: start.elapsed().as_secs_f64(),
        },
    ))
}

/// Combine acoustic and LM scores: `combined = log_p_acoustic +
/// λ·lm_score`, then re-sort best-first. The sort is stable, so equal
/// combined scores keep their prior relative order; transcripts are never
/// altered. λ = 1 is the plain product of the two model probabilities.
pub fn rescore(hyps: Vec<Hypothesis>, lm: &CharLm, lambda: f64) -> Result<Vec<Hypothesis>> {
    assert!(
        lambda >= 0.0 && lambda.is_finite(),
        "lambda must be a non-negative finite weight"
    );
    let mut out = Vec::with_capacity(hyps.len());
    for mut h in hyps {
        let score = lm.lm_score(&h.transcript)?;
        h.log_p_lm = Some(score);
        h.combined = h.log_p_acoustic + lambda * score;
        out.push(h);
    }
    out.sort_by(|a, b| {
        b.combined
            .partial_cmp(&a.combined)
            .expect("combined scores are never NaN")
    });
    Ok(out)
}
