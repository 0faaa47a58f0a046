//! Entropy and divergence on log-space distributions (nats).

use std::collections::BTreeSet;

use crate::dist::LogDistribution;
use crate::error::{Error, Result};
use crate::vocab::TokenId;

/// `-Σ q ln q` with `0 ln 0 = 0`.
///
/// A sparse distribution's residual mass counts as one lumped outcome.
pub fn entropy(dist: &LogDistribution) -> Result<f64> {
    if !dist.is_normalized() {
        return Err(Error::usage("entropy of an unnormalized distribution"));
    }
    let mut terms: Vec<f64> = dist.entries().iter().map(|e| e.1).collect();
    if dist.is_truncated() {
        terms.push(dist.residual_log_mass());
    }
    let h: f64 = terms
        .iter()
        .filter(|lp| lp.is_finite())
        .map(|&lp| -lp.exp() * lp)
        .sum();
    Ok(h.max(0.0))
}

/// Entropy of the empirical distribution given by outcome counts.
///
/// Evaluated as `ln n - Σ (c/n) ln c`, so `k` singleton outcomes give
/// exactly `ln k`.
pub fn entropy_from_counts(counts: &[u64]) -> Result<f64> {
    let n: u64 = counts.iter().sum();
    if n == 0 {
        return Err(Error::usage("entropy of an empty frequency table"));
    }
    let nonzero: Vec<u64> = counts.iter().copied().filter(|&c| c > 0).collect();
    if nonzero.len() == 1 {
        return Ok(0.0);
    }
    let nf = n as f64;
    let correction: f64 = nonzero
        .iter()
        .filter(|&&c| c > 1)
        .map(|&c| (c as f64 / nf) * (c as f64).ln())
        .sum();
    Ok((nf.ln() - correction).max(0.0))
}

/// `KL(q_p || q_pr) = Σ q_p ln(q_p / q_pr)`.
///
/// Terms with zero `q_p` mass contribute zero. If either side is truncated,
/// both are restricted to the union of listed supports and renormalized there.
pub fn kl_divergence(q_p: &LogDistribution, q_pr: &LogDistribution) -> Result<f64> {
    if q_p.size() != q_pr.size() {
        return Err(Error::usage(format!(
            "KL between distributions of sizes {} and {}",
            q_p.size(),
            q_pr.size()
        )));
    }
    if !q_p.is_normalized() || !q_pr.is_normalized() {
        return Err(Error::usage("KL of an unnormalized distribution"));
    }
    let (a, b) = if q_p.is_truncated() || q_pr.is_truncated() {
        let support: BTreeSet<TokenId> = q_p
            .entries()
            .iter()
            .chain(q_pr.entries())
            .map(|e| e.0)
            .collect();
        (restrict(q_p, &support)?, restrict(q_pr, &support)?)
    } else {
        (q_p.to_dense_log_probs(), q_pr.to_dense_log_probs())
    };
    let kl: f64 = a
        .iter()
        .zip(&b)
        .filter(|(lp, _)| lp.is_finite())
        .map(|(&lp, &lq)| lp.exp() * (lp - lq))
        .sum();
    Ok(kl.max(0.0))
}

fn restrict(dist: &LogDistribution, support: &BTreeSet<TokenId>) -> Result<Vec<f64>> {
    let dense = dist.to_dense_log_probs();
    let picked: Vec<f64> = support.iter().map(|&t| dense[t as usize]).collect();
    crate::dist::log_normalize(&picked)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dist::EPS_TOY;

    fn d(ps: &[f64]) -> LogDistribution {
        LogDistribution::from_probs(ps, EPS_TOY).unwrap()
    }

    #[test]
    fn entropy_examples() {
        assert_eq!(entropy(&d(&[0.0, 1.0, 0.0])).unwrap(), 0.0);
        assert!((entropy(&d(&[0.25; 4])).unwrap() - 4f64.ln()).abs() < 1e-15);
        assert!((entropy(&d(&[0.5, 0.25, 0.25])).unwrap() - 1.5 * 2f64.ln()).abs() < 1e-15);
        let un = LogDistribution::dense_unchecked(vec![0.0, 0.0], false);
        assert!(entropy(&un).unwrap_err().is_usage());
    }

    #[test]
    fn entropy_counts_exact_for_singletons() {
        assert_eq!(entropy_from_counts(&[1, 1, 1]).unwrap(), 3f64.ln());
        assert_eq!(entropy_from_counts(&[1, 1]).unwrap(), 2f64.ln());
        assert_eq!(entropy_from_counts(&[5]).unwrap(), 0.0);
        assert_eq!(entropy_from_counts(&[0, 4, 0]).unwrap(), 0.0);
        assert!((entropy_from_counts(&[2, 2]).unwrap() - 2f64.ln()).abs() < 1e-15);
        assert!(entropy_from_counts(&[0, 0]).is_err());
    }

    #[test]
    fn kl_examples() {
        let q = d(&[0.2, 0.3, 0.5]);
        assert_eq!(kl_divergence(&q, &q).unwrap(), 0.0);
        let kl = kl_divergence(&d(&[1.0, 0.0]), &d(&[0.5, 0.5])).unwrap();
        assert!((kl - 2f64.ln()).abs() < 1e-15);
        assert!(kl_divergence(&d(&[1.0, 0.0]), &d(&[0.2, 0.3, 0.5])).unwrap_err().is_usage());
        let inf = kl_divergence(&d(&[0.5, 0.5]), &d(&[1.0, 0.0])).unwrap();
        assert_eq!(inf, f64::INFINITY);
    }

    #[test]
    fn kl_truncated_uses_union_support() {
        let a = LogDistribution::sparse(4, vec![(0, 0.5f64.ln()), (1, 0.25f64.ln())], 0.25f64.ln(), EPS_TOY)
            .unwrap();
        let b = LogDistribution::sparse(4, vec![(0, 0.3f64.ln()), (1, 0.3f64.ln())], 0.4f64.ln(), EPS_TOY)
            .unwrap();
        // renormalized: a = (2/3, 1/3), b = (1/2, 1/2)
        let want = (2.0 / 3.0) * ((2.0 / 3.0) / 0.5f64).ln() + (1.0 / 3.0) * ((1.0 / 3.0) / 0.5f64).ln();
        assert!((kl_divergence(&a, &b).unwrap() - want).abs() < 1e-14);
    }
}
