//! Corpus-level decoding and error rates.
//!
//! Utterances are decoded independently, so evaluation is an ordered
//! data-parallel map: the parallel and sequential paths produce bit-identical
//! reports. Error rates are micro-averaged (total edits over total reference
//! length), not a mean of per-utterance rates.

use crate::ctc::Alphabet;
use crate::decode::{self, Hypothesis};
use crate::error::{Error, Result};
use crate::linalg::Mat;
use crate::lm::{self, CharLm};
use crate::nn::{forward_full, ModelParams};

/// One utterance ready to score: features already extracted.
#[derive(Debug, Clone)]
pub struct EvalItem {
    pub id: String,
    pub features: Mat,
    pub reference: String,
}

/// Decoding settings shared by transcription and evaluation.
#[derive(Debug, Clone, Copy)]
pub struct EvalOptions<'a> {
    /// `None` decodes greedily; `Some(w)` runs prefix beam search at width w.
    pub beam_width: Option<usize>,
    /// Hypotheses kept from beam search before picking the best.
    pub n_best: usize,
    /// Rescoring language model; requires beam search.
    pub lm: Option<&'a CharLm>,
    /// LM weight used when `lm` is set.
    pub lambda: f64,
    /// Re-rank beam output by combined score divided by transcript length.
    pub length_normalize: bool,
}

impl Default for EvalOptions<'static> {
    fn default() -> Self {
        EvalOptions {
            beam_width: None,
            n_best: 1,
            lm: None,
            lambda: 1.0,
            length_normalize: false,
        }
    }
}

/// Per-utterance outcome; edit counts feed the micro-average.
#[derive(Debug, Clone, PartialEq)]
pub struct UtteranceScore {
    pub id: String,
    pub hypothesis: String,
    pub char_edits: usize,
    pub char_len: usize,
    pub word_edits: usize,
    pub word_len: usize,
    pub cer: f64,
    pub wer: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub utterances: Vec<UtteranceScore>,
    /// Micro-averaged rates over the whole corpus.
    pub cer: f64,
    pub wer: f64,
}

/// Run the full decode stack on one utterance and return the best
/// hypothesis list (a single entry for greedy decoding).
pub fn decode_hypotheses(
    model: &ModelParams,
    features: &Mat,
    opts: &EvalOptions,
) -> Result<Vec<Hypothesis>> {
    if opts.lm.is_some() && opts.beam_width.is_none() {
        return Err(Error::InvalidConfig(
            "rescoring needs beam search; set a beam width".into(),
        ));
    }
    let (log_probs, _) = forward_full(model, features, None)?;
    match opts.beam_width {
        None => Ok(vec![decode::greedy_decode(&log_probs)]),
        Some(w) => {
            let mut hyps = decode::beam_search(&log_probs, w, opts.n_best.max(1));
            if let Some(lm) = opts.lm {
                hyps = lm::rescore(hyps, lm, opts.lambda)?;
            }
            if opts.length_normalize {
                hyps = decode::sort_nbest(hyps, true);
            }
            Ok(hyps)
        }
    }
}

/// Best transcript for one utterance, as text.
pub fn decode_utterance(
    model: &ModelParams,
    alphabet: &Alphabet,
    features: &Mat,
    opts: &EvalOptions,
) -> Result<String> {
    let hyps = decode_hypotheses(model, features, opts)?;
    let best = hyps.first().expect("decoding always yields a hypothesis");
    alphabet.decode(&best.transcript)
}

fn score_one(
    model: &ModelParams,
    alphabet: &Alphabet,
    item: &EvalItem,
    opts: &EvalOptions,
) -> Result<UtteranceScore> {
    if item.reference.is_empty() {
        return Err(Error::BadUtterance {
            id: item.id.clone(),
            reason: "empty reference transcript".into(),
        });
    }
    let ref_words: Vec<&str> = item.reference.split_whitespace().collect();
    if ref_words.is_empty() {
        return Err(Error::BadUtterance {
            id: item.id.clone(),
            reason: "reference transcript has no words".into(),
        });
    }
    let hypothesis = decode_utterance(model, alphabet, &item.features, opts)?;

    let ref_chars: Vec<char> = item.reference.chars().collect();
    let hyp_chars: Vec<char> = hypothesis.chars().collect();
    let char_edits = decode::edit_distance(&hyp_chars, &ref_chars);
    let hyp_words: Vec<&str> = hypothesis.split_whitespace().collect();
    let word_edits = decode::edit_distance(&hyp_words, &ref_words);

    Ok(UtteranceScore {
        id: item.id.clone(),
        hypothesis,
        char_edits,
        char_len: ref_chars.len(),
        word_edits,
        word_len: ref_words.len(),
        cer: char_edits as f64 / ref_chars.len() as f64,
        wer: word_edits as f64 / ref_words.len() as f64,
    })
}

fn aggregate(utterances: Vec<UtteranceScore>) -> EvalReport {
    let (mut ce, mut cl, mut we, mut wl) = (0usize, 0usize, 0usize, 0usize);
    for u in &utterances {
        ce += u.char_edits;
        cl += u.char_len;
        we += u.word_edits;
        wl += u.word_len;
    }
    EvalReport {
        utterances,
        cer: ce as f64 / cl as f64,
        wer: we as f64 / wl as f64,
    }
}

/// Score a corpus; dispatches to the parallel path when the `parallel`
/// feature is enabled.
pub fn evaluate(
    model: &ModelParams,
    alphabet: &Alphabet,
    items: &[EvalItem],
    opts: &EvalOptions,
) -> Result<EvalReport> {
    #[cfg(feature = "parallel")]
    {
        evaluate_par(model, alphabet, items, opts)
    }
    #[cfg(not(feature = "parallel"))]
    {
        evaluate_seq(model, alphabet, items, opts)
    }
}

/// Sequential [`evaluate`]. Bit-identical to the parallel path.
pub fn evaluate_seq(
    model: &ModelParams,
    alphabet: &Alphabet,
    items: &[EvalItem],
    opts: &EvalOptions,
) -> Result<EvalReport> {
    if items.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let utterances = items
        .iter()
        .map(|item| score_one(model, alphabet, item, opts))
        .collect::<Result<Vec<_>>>()?;
    Ok(aggregate(utterances))
}

/// Parallel [`evaluate`]: utterances are independent, scored with rayon and
/// collected in corpus order.
#[cfg(feature = "parallel")]
pub fn evaluate_par(
    model: &ModelParams,
    alphabet: &Alphabet,
    items: &[EvalItem],
    opts: &EvalOptions,
) -> Result<EvalReport> {
    use rayon::prelude::*;
    if items.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let utterances = items
        .par_iter()
        .map(|item| score_one(model, alphabet, item, opts))
        .collect::<Result<Vec<_>>>()?;
    Ok(aggregate(utterances))
}
