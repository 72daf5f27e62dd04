//! Decoding log-probability lattices into transcripts: greedy best-path,
//! CTC prefix beam search to an n-best list, n-best sorting, and
//! edit-distance error metrics.

use std::collections::BTreeMap;

use crate::ctc::{collapse, LabelSequence, BLANK};
use crate::error::{Error, Result};
use crate::linalg::Mat;
use crate::numeric::lse2;

/// One candidate transcription with its scores (natural logs).
///
/// `combined` equals `log_p_acoustic` until rescoring fills `log_p_lm`.
/// Greedy decoding reports the single best path's score while beam search
/// reports the summed prefix probability, so scores are comparable within
/// one decoder but not across decoders.
#[derive(Debug, Clone, PartialEq)]
pub struct Hypothesis {
    pub transcript: LabelSequence,
    pub log_p_acoustic: f64,
    pub log_p_lm: Option<f64>,
    pub combined: f64,
}

impl Hypothesis {
    fn acoustic(transcript: LabelSequence, log_p: f64) -> Self {
        Hypothesis {
            transcript,
            log_p_acoustic: log_p,
            log_p_lm: None,
            combined: log_p,
        }
    }
}

/// Collapse the per-frame argmax path. The score is the log-probability of
/// that single path, a lower bound on the transcript's true probability.
pub fn greedy_decode(log_probs: &Mat) -> Hypothesis {
    let mut path = Vec::with_capacity(log_probs.rows());
    let mut log_p = 0.0;
    for t in 0..log_probs.rows() {
        let row = log_probs.row(t);
        let (mut best_k, mut best) = (0, f64::NEG_INFINITY);
        for (k, &v) in row.iter().enumerate() {
            if v > best {
                best = v;
                best_k = k;
            }
        }
        path.push(best_k);
        log_p += best;
    }
    Hypothesis::acoustic(collapse(&path), log_p)
}

/// Blank-ending and non-blank-ending log path mass for one prefix.
#[derive(Clone, Copy)]
struct PrefixMass {
    blank: f64,
    non_blank: f64,
}

impl PrefixMass {
    const EMPTY: PrefixMass = PrefixMass {
        blank: f64::NEG_INFINITY,
        non_blank: f64::NEG_INFINITY,
    };

    fn total(&self) -> f64 {
        lse2(self.blank, self.non_blank)
    }
}

/// CTC prefix beam search. Hypotheses are keyed by collapsed prefix;
/// paths reaching the same prefix merge by log-sum-exp, kept separately by
/// whether they end in blank (which decides if a repeated character extends
/// the prefix or collapses into it). After each frame only the
/// `beam_width` most probable prefixes survive; no score thresholding.
///
/// Returns at most `n_best` hypotheses, sorted by raw combined score with
/// lexicographic tie-breaking. `log_p_acoustic` is the summed probability
/// of all surviving paths for the prefix, not a single path's.
pub fn beam_search(log_probs: &Mat, beam_width: usize, n_best: usize) -> Vec<Hypothesis> {
    assert!(beam_width >= 1, "beam_width must be >= 1");
    assert!(n_best >= 1, "n_best must be >= 1");
    let num_classes = log_probs.cols();

    // BTreeMap keeps prefix iteration order canonical, which fixes the
    // floating-point accumulation order and keeps results bit-stable.
    let mut beam: BTreeMap<Vec<usize>, PrefixMass> = BTreeMap::new();
    beam.insert(
        Vec::new(),
        PrefixMass {
            blank: 0.0,
            non_blank: f64::NEG_INFINITY,
        },
    );

    for t in 0..log_probs.rows() {
        let row = log_probs.row(t);
        let mut next: BTreeMap<Vec<usize>, PrefixMass> = BTreeMap::new();

        for (prefix, mass) in &beam {
            let total = mass.total();

            // Emit blank: prefix unchanged, now blank-ending.
            let entry = next.entry(prefix.clone()).or_insert(PrefixMass::EMPTY);
            entry.blank = lse2(entry.blank, total + row[BLANK]);

            for class in 1..num_classes {
                let label = class - 1;
                let lp = row[class];
                if prefix.last() == Some(&label) {
                    // Repeat without an intervening blank collapses.
                    let entry = next.entry(prefix.clone()).or_insert(PrefixMass::EMPTY);
                    entry.non_blank = lse2(entry.non_blank, mass.non_blank + lp);
                    // After a blank the same character starts a new symbol.
                    let mut extended = prefix.clone();
                    extended.push(label);
                    let entry = next.entry(extended).or_insert(PrefixMass::EMPTY);
                    entry.non_blank = lse2(entry.non_blank, mass.blank + lp);
                } else {
                    let mut extended = prefix.clone();
                    extended.push(label);
                    let entry = next.entry(extended).or_insert(PrefixMass::EMPTY);
                    entry.non_blank = lse2(entry.non_blank, total + lp);
                }
            }
        }

        if next.len() > beam_width {
            let mut ranked: Vec<(Vec<usize>, PrefixMass)> = next.into_iter().collect();
            ranked.sort_by(|a, b| {
                b.1.total()
                    .partial_cmp(&a.1.total())
                    .expect("prefix scores are never NaN")
                    .then_with(|| a.0.cmp(&b.0))
            });
            ranked.truncate(beam_width);
            next = ranked.into_iter().collect();
        }
        beam = next;
    }

    let hyps: Vec<Hypothesis> = beam
        .into_iter()
        .filter(|(_, mass)| mass.total() > f64::NEG_INFINITY)
        .map(|(prefix, mass)| Hypothesis::acoustic(LabelSequence(prefix), mass.total()))
        .collect();
    let mut sorted = sort_nbest(hyps, false);
    sorted.truncate(n_best);
    sorted
}

/// Sort hypotheses best-first. The default key is the raw combined
/// log-probability; with `length_normalize` the key becomes
/// `combined / max(1, |transcript|)`, which favors longer transcripts when
/// deletions dominate. Ties break lexicographically on the transcript.
pub fn sort_nbest(mut hyps: Vec<Hypothesis>, length_normalize: bool) -> Vec<Hypothesis> {
    let key = |h: &Hypothesis| -> f64 {
        if length_normalize {
            h.combined / h.transcript.len().max(1) as f64
        } else {
            h.combined
        }
    };
    hyps.sort_by(|a, b| {
        key(b)
            .partial_cmp(&key(a))
            .expect("hypothesis scores are never NaN")
            .then_with(|| a.transcript.cmp(&b.transcript))
    });
    hyps
}

/// Levenshtein distance with unit insert/delete/substitute costs.
pub fn edit_distance<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    if a.is_empty() {
        return b.len();
    }
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0usize; b.len() + 1];
    for (i, ai) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, bj) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(ai != bj);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Character error rate: edit distance over characters divided by the
/// reference length. Exceeds 1 when the hypothesis is much longer.
pub fn cer(hypothesis: &str, reference: &str) -> Result<f64> {
    let h: Vec<char> = hypothesis.chars().collect();
    let r: Vec<char> = reference.chars().collect();
    if r.is_empty() {
        return Err(Error::EmptyReference);
    }
    Ok(edit_distance(&h, &r) as f64 / r.len() as f64)
}

/// Word error rate over space-separated tokens.
pub fn wer(hypothesis: &str, reference: &str) -> Result<f64> {
    let h: Vec<&str> = hypothesis.split_whitespace().collect();
    let r: Vec<&str> = reference.split_whitespace().collect();
    if r.is_empty() {
        return Err(Error::EmptyReference);
    }
    Ok(edit_distance(&h, &r) as f64 / r.len() as f64)
}
