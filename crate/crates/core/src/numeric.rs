//! Log-domain arithmetic shared by the CTC loss and the decoders.

/// `ln(exp(a) + exp(b))` with max-subtraction; tolerates `-inf` operands.
pub fn lse2(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

/// `ln(sum exp(xs))` with max-subtraction; `-inf` for an empty or all-`-inf` input.
pub fn lse(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    m + xs.iter().map(|&x| (x - m).exp()).sum::<f64>().ln()
}

/// Relative error with the guard denominator `max(|a|, |b|, 1e-8)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lse_matches_direct_sum() {
        let xs: [f64; 3] = [-1.0, -2.0, -3.0];
        let direct: f64 = xs.iter().map(|x| x.exp()).sum();
        assert!((lse(&xs) - direct.ln()).abs() < 1e-12);
        assert!((lse2(-1.0, -2.0) - (0.36787944117144233f64 + 0.1353352832366127).ln()).abs() < 1e-12);
    }

    #[test]
    fn lse_handles_neg_inf() {
        assert_eq!(lse2(f64::NEG_INFINITY, -3.0), -3.0);
        assert_eq!(lse2(-3.0, f64::NEG_INFINITY), -3.0);
        assert_eq!(lse2(f64::NEG_INFINITY, f64::NEG_INFINITY), f64::NEG_INFINITY);
        assert_eq!(lse(&[]), f64::NEG_INFINITY);
    }

    #[test]
    fn lse_survives_tiny_probabilities() {
        // 1000 terms each around ln(1e-300): no underflow or NaN.
        let xs = vec![-690.0; 1000];
        let r = lse(&xs);
        assert!((r - (-690.0 + (1000f64).ln())).abs() < 1e-9);
    }
}
