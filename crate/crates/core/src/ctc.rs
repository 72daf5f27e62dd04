//! Connectionist temporal classification over an augmented alphabet:
//! the collapse function, target expansion, the log-space forward-backward
//! loss with analytic logit gradients, and an exhaustive path-enumeration
//! oracle for small instances.
//!
//! Class-index convention: network output row k indexes
//! `k = 0` -> blank, `k = l + 1` -> `Alphabet.symbols[l]`. Targets
//! ([`LabelSequence`]) hold label indices (into `symbols`), never blank.

use crate::error::{Error, Result};
use crate::linalg::Mat;
use crate::numeric::lse2;

/// Class index reserved for the CTC blank.
pub const BLANK: usize = 0;

/// Ordered label symbols. Space is an ordinary member; blank is implicit
/// and lives outside the alphabet.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Alphabet {
    symbols: Vec<char>,
}

impl Alphabet {
    pub fn new(symbols: Vec<char>) -> Result<Self> {
        if symbols.is_empty() {
            return Err(Error::InvalidConfig("alphabet must not be empty".into()));
        }
        let mut seen = std::collections::HashSet::new();
        for &c in &symbols {
            if !seen.insert(c) {
                return Err(Error::InvalidConfig(format!(
                    "duplicate alphabet symbol {c:?}"
                )));
            }
        }
        Ok(Alphabet { symbols })
    }

    pub fn from_str_symbols(s: &str) -> Result<Self> {
        Alphabet::new(s.chars().collect())
    }

    /// 26 uppercase letters plus space.
    pub fn default_charset() -> Self {
        let mut symbols: Vec<char> = ('A'..='Z').collect();
        symbols.push(' ');
        Alphabet { symbols }
    }

    /// Number of label symbols (K). Network output dimension is `K + 1`.
    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.symbols.len() + 1
    }

    pub fn symbols(&self) -> &[char] {
        &self.symbols
    }

    pub fn label_of(&self, c: char) -> Option<usize> {
        self.symbols.iter().position(|&s| s == c)
    }

    pub fn char_of(&self, label: usize) -> Option<char> {
        self.symbols.get(label).copied()
    }

    pub fn encode(&self, text: &str) -> Result<LabelSequence> {
        text.chars()
            .map(|c| self.label_of(c).ok_or(Error::OutOfVocabulary(c)))
            .collect::<Result<Vec<_>>>()
            .map(LabelSequence)
    }

    pub fn decode(&self, labels: &LabelSequence) -> Result<String> {
        labels
            .0
            .iter()
            .map(|&l| {
                self.char_of(l).ok_or(Error::LabelOutOfRange {
                    index: l,
                    len: self.symbols.len(),
                })
            })
            .collect()
    }

    /// Parse the alphabet file format: one symbol per line, optional `#`
    /// comment on line 1, blank never listed.
    pub fn parse(text: &str) -> Result<Self> {
        let mut symbols = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if i == 0 && line.starts_with('#') {
                continue;
            }
            let mut chars = line.chars();
            match (chars.next(), chars.next()) {
                (Some(c), None) => symbols.push(c),
                (None, _) => {
                    return Err(Error::malformed(
                        "alphabet file",
                        format!("line {} is empty", i + 1),
                    ))
                }
                _ => {
                    return Err(Error::malformed(
                        "alphabet file",
                        format!("line {} holds more than one symbol", i + 1),
                    ))
                }
            }
        }
        Alphabet::new(symbols)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Alphabet::parse(&std::fs::read_to_string(path)?)
    }
}

/// Target transcript as label indices into [`Alphabet::symbols`].
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub struct LabelSequence(pub Vec<usize>);

impl LabelSequence {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.0
    }
}

/// Step 1 of collapse: merge maximal runs of identical classes.
pub fn merge_repeats(path: &[usize]) -> Vec<usize> {
    let mut out = Vec::new();
    for &c in path {
        if out.last() != Some(&c) {
            out.push(c);
        }
    }
    out
}

/// Map a frame-level class path to its transcript: merge repeated classes,
/// then delete blanks (in that order).
pub fn collapse(path: &[usize]) -> LabelSequence {
    LabelSequence(
        merge_repeats(path)
            .into_iter()
            .filter(|&c| c != BLANK)
            .map(|c| c - 1)
            .collect(),
    )
}

/// Interleave blanks around the target: `(y1..yL) -> (_, y1, _, ... , yL, _)`,
/// in class-index space, length `2L + 1`.
pub fn expand_target(y: &LabelSequence) -> Vec<usize> {
    let mut z = Vec::with_capacity(2 * y.len() + 1);
    z.push(BLANK);
    for &l in &y.0 {
        z.push(l + 1);
        z.push(BLANK);
    }
    z
}

/// Minimum number of frames able to emit `y`: its length plus one separating
/// blank per adjacent repeat.
pub fn min_frames(y: &LabelSequence) -> usize {
    let repeats = y.0.windows(2).filter(|w| w[0] == w[1]).count();
    y.len() + repeats
}

fn validate_target(y: &LabelSequence, num_classes: usize) -> Result<()> {
    for &l in &y.0 {
        if l + 1 >= num_classes {
            return Err(Error::LabelOutOfRange {
                index: l,
                len: num_classes - 1,
            });
        }
    }
    Ok(())
}

/// CTC loss and its gradient with respect to the logits.
///
/// `log_probs` is T x (K+1) of per-frame log-softmax outputs. Returns
/// `(-ln P(y | x), dloss/dlogits)` where the probability marginalizes over
/// every path that collapses to `y`, computed by log-space forward-backward
/// over the expanded target.
pub fn ctc_loss(log_probs: &Mat, y: &LabelSequence) -> Result<(f64, Mat)> {
    let t_len = log_probs.rows();
    let num_classes = log_probs.cols();
    validate_target(y, num_classes)?;
    let needed = min_frames(y);
    if t_len < needed {
        return Err(Error::InfeasibleTarget {
            needed,
            got: t_len,
        });
    }

    let z = expand_target(y);
    let s_len = z.len();
    let lp = |t: usize, class: usize| log_probs.at(t, class);

    // Forward: alpha[t][s] = log-prob of prefixes of z reaching s at t,
    // including the frame-t emission.
    let mut alpha = vec![vec![f64::NEG_INFINITY; s_len]; t_len];
    alpha[0][0] = lp(0, z[0]);
    if s_len > 1 {
        alpha[0][1] = lp(0, z[1]);
    }
    for t in 1..t_len {
        for s in 0..s_len {
            let mut acc = alpha[t - 1][s];
            if s >= 1 {
                acc = lse2(acc, alpha[t - 1][s - 1]);
            }
            if s >= 2 && z[s] != BLANK && z[s] != z[s - 2] {
                acc = lse2(acc, alpha[t - 1][s - 2]);
            }
            alpha[t][s] = acc + lp(t, z[s]);
        }
    }

    let log_p = if s_len > 1 {
        lse2(alpha[t_len - 1][s_len - 1], alpha[t_len - 1][s_len - 2])
    } else {
        alpha[t_len - 1][s_len - 1]
    };

    // Backward: beta[t][s] = log-prob of suffixes of z starting at s at t,
    // also including the frame-t emission.
    let mut beta = vec![vec![f64::NEG_INFINITY; s_len]; t_len];
    beta[t_len - 1][s_len - 1] = lp(t_len - 1, z[s_len - 1]);
    if s_len > 1 {
        beta[t_len - 1][s_len - 2] = lp(t_len - 1, z[s_len - 2]);
    }
    for t in (0..t_len - 1).rev() {
        for s in 0..s_len {
            let mut acc = beta[t + 1][s];
            if s + 1 < s_len {
                acc = lse2(acc, beta[t + 1][s + 1]);
            }
            if s + 2 < s_len && z[s] != BLANK && z[s] != z[s + 2] {
                acc = lse2(acc, beta[t + 1][s + 2]);
            }
            beta[t][s] = acc + lp(t, z[s]);
        }
    }

    // dloss/dlogit[t][k] = p[t][k] - (1/P) sum_{s: z_s = k} alpha*beta / p[t][k],
    // assembled in log space before the final exp.
    let mut dlogits = Mat::zeros(t_len, num_classes);
    let mut occupancy = vec![f64::NEG_INFINITY; num_classes];
    for t in 0..t_len {
        occupancy.iter_mut().for_each(|v| *v = f64::NEG_INFINITY);
        for s in 0..s_len {
            let joint = alpha[t][s] + beta[t][s];
            occupancy[z[s]] = lse2(occupancy[z[s]], joint);
        }
        for k in 0..num_classes {
            let posterior = if occupancy[k] == f64::NEG_INFINITY {
                0.0
            } else {
                (occupancy[k] - lp(t, k) - log_p).exp()
            };
            *dlogits.at_mut(t, k) = lp(t, k).exp() - posterior;
        }
    }

    let loss = -log_p;
    if !loss.is_finite() {
        return Err(Error::ImpossibleTarget);
    }
    Ok((loss, dlogits))
}

const BRUTE_MAX_FRAMES: usize = 8;
const BRUTE_MAX_LABELS: usize = 4;

/// Exhaustive CTC loss: enumerate all `(K+1)^T` paths in probability space
/// and keep those whose collapse equals the target. Tractability-guarded;
/// this is the independent oracle for [`ctc_loss`].
pub fn ctc_loss_bruteforce(probs: &Mat, y: &LabelSequence) -> Result<f64> {
    let t_len = probs.rows();
    let num_classes = probs.cols();
    if t_len > BRUTE_MAX_FRAMES || num_classes - 1 > BRUTE_MAX_LABELS {
        return Err(Error::InstanceTooLarge {
            frames: t_len,
            labels: num_classes - 1,
        });
    }
    validate_target(y, num_classes)?;

    let mut total = 0.0;
    let mut path = vec![0usize; t_len];
    loop {
        if collapse(&path) == *y {
            let mut p = 1.0;
            for (t, &c) in path.iter().enumerate() {
                p *= probs.at(t, c);
            }
            total += p;
        }
        // Odometer increment over class indices.
        let mut pos = 0;
        loop {
            if pos == t_len {
                if total == 0.0 {
                    return Err(Error::ImpossibleTarget);
                }
                return Ok(-total.ln());
            }
            path[pos] += 1;
            if path[pos] < num_classes {
                break;
            }
            path[pos] = 0;
            pos += 1;
        }
    }
}

/// Normalized random probability table, useful to tests and the oracle
/// comparisons: T x C rows each summing to 1.
pub fn random_prob_rows(rng: &mut crate::rng::Stream, t_len: usize, num_classes: usize) -> Mat {
    let mut m = Mat::zeros(t_len, num_classes);
    for t in 0..t_len {
        let mut sum = 0.0;
        for k in 0..num_classes {
            let v = crate::rng::uniform(rng, 0.05, 1.0);
            *m.at_mut(t, k) = v;
            sum += v;
        }
        for k in 0..num_classes {
            *m.at_mut(t, k) /= sum;
        }
    }
    m
}
