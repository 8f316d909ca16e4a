//! Small helpers for arithmetic on log-domain values.

/// `log(sum(exp(terms)))`, returning `-inf` for an empty or all-`-inf` input.
pub(crate) fn log_sum_exp<I>(terms: I) -> f64
where
    I: IntoIterator<Item = f64> + Clone,
{
    let max = terms.clone().into_iter().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    let sum: f64 = terms.into_iter().map(|t| (t - max).exp()).sum();
    max + sum.ln()
}

/// Natural log that maps exact zero to `-inf` without warnings from callers.
pub(crate) fn ln_or_neg_inf(p: f64) -> f64 {
    if p > 0.0 {
        p.ln()
    } else {
        f64::NEG_INFINITY
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lse_matches_direct_sum() {
        let terms = [0.1f64.ln(), 0.2f64.ln(), 0.7f64.ln()];
        assert!((log_sum_exp(terms.iter().copied()) - 0.0).abs() < 1e-15);
        assert_eq!(log_sum_exp(std::iter::empty::<f64>()), f64::NEG_INFINITY);
        assert_eq!(
            log_sum_exp([f64::NEG_INFINITY, f64::NEG_INFINITY].iter().copied()),
            f64::NEG_INFINITY
        );
    }

    #[test]
    fn lse_survives_tiny_values() {
        let v = log_sum_exp([-2000.0, -2000.0].iter().copied());
        assert!((v - (-2000.0 + 2f64.ln())).abs() < 1e-12);
    }
}
