//! Log-space categorical distributions.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::vocab::TokenId;

/// Normalization tolerance for backends that transport rounded values.
pub const EPS_REAL: f64 = 1e-6;
/// Normalization tolerance for exactly enumerable tabular models.
pub const EPS_TOY: f64 = 1e-12;

/// `log Σ exp(v_i)` with max-shift. All `-inf` inputs give exactly `-inf`.
pub fn log_sum_exp(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::usage("log_sum_exp of an empty list"));
    }
    Ok(log_sum_exp_unchecked(values))
}

pub(crate) fn log_sum_exp_unchecked(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    if max == f64::INFINITY {
        return f64::INFINITY;
    }
    let sum: f64 = values.iter().map(|v| (v - max).exp()).sum();
    max + sum.ln()
}

/// Shift a finite-or-`-inf` log vector so it exponentiates to one.
pub fn log_normalize(values: &[f64]) -> Result<Vec<f64>> {
    let z = log_sum_exp(values)?;
    if !z.is_finite() {
        return Err(Error::degenerate("cannot normalize a vector with zero total mass"));
    }
    Ok(values.iter().map(|v| v - z).collect())
}

/// Indices of the smallest probability-descending prefix whose mass reaches
/// `tau`. Order is descending probability, then ascending index.
///
/// With `include_boundary_ties`, every entry tied with the last included one
/// is appended as well.
pub fn top_mass_prefix(log_probs: &[f64], tau: f64, include_boundary_ties: bool) -> Vec<usize> {
    let mut order: Vec<usize> = (0..log_probs.len()).collect();
    order.sort_by(|&a, &b| {
        log_probs[b]
            .partial_cmp(&log_probs[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let mut cum = 0.0;
    let mut cut = order.len();
    for (i, &idx) in order.iter().enumerate() {
        cum += log_probs[idx].exp();
        // slack absorbs summation rounding, e.g. 9 x 0.1 < 0.9
        if cum >= tau - 1e-12 {
            cut = i + 1;
            break;
        }
    }
    if include_boundary_ties && cut < order.len() {
        let boundary = log_probs[order[cut - 1]];
        while cut < order.len() && log_probs[order[cut]] == boundary {
            cut += 1;
        }
    }
    order.truncate(cut);
    order
}

/// A categorical distribution over `size` outcomes, held in log space.
///
/// Dense distributions list every outcome in index order. Sparse ones list a
/// subset and fold the rest into `residual_log_mass`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogDistribution {
    size: usize,
    entries: Vec<(TokenId, f64)>,
    residual_log_mass: f64,
    normalized: bool,
}

impl LogDistribution {
    /// Dense normalized log-probabilities, checked against `eps`.
    pub fn dense(log_probs: Vec<f64>, eps: f64) -> Result<Self> {
        let d = Self::dense_unchecked(log_probs, true);
        d.validate(eps)?;
        Ok(d)
    }

    /// Dense log-probabilities without a normalization check.
    pub fn dense_unchecked(log_probs: Vec<f64>, normalized: bool) -> Self {
        let size = log_probs.len();
        let entries = log_probs
            .into_iter()
            .enumerate()
            .map(|(i, lp)| (i as TokenId, lp))
            .collect();
        Self {
            size,
            entries,
            residual_log_mass: f64::NEG_INFINITY,
            normalized,
        }
    }

    /// Normalizes arbitrary logits (softmax in log space).
    pub fn from_logits(logits: &[f64]) -> Result<Self> {
        Ok(Self::dense_unchecked(log_normalize(logits)?, true))
    }

    /// From linear-space probabilities; zeros become `-inf`.
    pub fn from_probs(probs: &[f64], eps: f64) -> Result<Self> {
        Self::dense(probs.iter().map(|p| p.ln()).collect(), eps)
    }

    /// Sparse form. Entries must be unique and inside `[0, size)`.
    pub fn sparse(
        size: usize,
        entries: Vec<(TokenId, f64)>,
        residual_log_mass: f64,
        eps: f64,
    ) -> Result<Self> {
        let d = Self {
            size,
            entries,
            residual_log_mass,
            normalized: true,
        };
        d.validate(eps)?;
        Ok(d)
    }

    /// Restricts a dense distribution to the prefix reaching mass `tau`.
    /// `tau >= 1` returns the dense distribution unchanged.
    pub fn truncate_to_mass(&self, tau: f64) -> Result<Self> {
        if !(tau > 0.0 && tau <= 1.0) {
            return Err(Error::usage(format!("top mass {tau} outside (0, 1]")));
        }
        if tau >= 1.0 || !self.is_dense() {
            return Ok(self.clone());
        }
        let lps: Vec<f64> = self.entries.iter().map(|e| e.1).collect();
        let keep = top_mass_prefix(&lps, tau, true);
        let mut kept = vec![false; lps.len()];
        for &i in &keep {
            kept[i] = true;
        }
        let excluded: Vec<f64> = lps
            .iter()
            .zip(&kept)
            .filter(|(_, &k)| !k)
            .map(|(lp, _)| *lp)
            .collect();
        let residual = if excluded.is_empty() {
            f64::NEG_INFINITY
        } else {
            log_sum_exp_unchecked(&excluded)
        };
        Ok(Self {
            size: self.size,
            entries: keep.into_iter().map(|i| self.entries[i]).collect(),
            residual_log_mass: residual,
            normalized: self.normalized,
        })
    }

    pub fn validate(&self, eps: f64) -> Result<()> {
        let mut seen = vec![false; self.size];
        for &(t, lp) in &self.entries {
            let idx = t as usize;
            if idx >= self.size {
                return Err(Error::usage(format!(
                    "entry token {t} outside distribution of size {}",
                    self.size
                )));
            }
            if seen[idx] {
                return Err(Error::usage(format!("duplicate entry for token {t}")));
            }
            seen[idx] = true;
            if lp.is_nan() {
                return Err(Error::usage(format!("NaN log-probability for token {t}")));
            }
            if self.normalized && lp > eps {
                return Err(Error::usage(format!(
                    "log-probability {lp} for token {t} exceeds zero"
                )));
            }
        }
        if self.normalized {
            let total = self.total_log_mass();
            if !(total.abs() <= eps) {
                return Err(Error::usage(format!(
                    "distribution log mass {total} is not within {eps} of zero"
                )));
            }
        }
        Ok(())
    }

    /// `log` of listed mass plus residual.
    pub fn total_log_mass(&self) -> f64 {
        let mut all: Vec<f64> = self.entries.iter().map(|e| e.1).collect();
        all.push(self.residual_log_mass);
        log_sum_exp_unchecked(&all)
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn entries(&self) -> &[(TokenId, f64)] {
        &self.entries
    }

    pub fn residual_log_mass(&self) -> f64 {
        self.residual_log_mass
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn is_dense(&self) -> bool {
        self.entries.len() == self.size
            && self
                .entries
                .iter()
                .enumerate()
                .all(|(i, &(t, _))| t as usize == i)
    }

    /// Whether mass was cut off (listed subset with non-zero residual).
    pub fn is_truncated(&self) -> bool {
        self.residual_log_mass > f64::NEG_INFINITY
    }

    /// Log-probability of `token`, or `None` if not listed.
    pub fn log_prob(&self, token: TokenId) -> Option<f64> {
        if self.is_dense() {
            return self.entries.get(token as usize).map(|e| e.1);
        }
        self.entries.iter().find(|e| e.0 == token).map(|e| e.1)
    }

    /// Dense vector with `-inf` for unlisted tokens.
    pub fn to_dense_log_probs(&self) -> Vec<f64> {
        let mut out = vec![f64::NEG_INFINITY; self.size];
        for &(t, lp) in &self.entries {
            out[t as usize] = lp;
        }
        out
    }

    /// Listed entries sorted by descending probability, then ascending token.
    pub fn sorted_entries(&self) -> Vec<(TokenId, f64)> {
        let mut e = self.entries.clone();
        e.sort_by(|a, b| {
            b.1.partial_cmp(&a.1)
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(a.0.cmp(&b.0))
        });
        e
    }

    /// Entries with probability at least `min_prob`, most probable first.
    pub fn top_entries(&self, min_prob: f64) -> Vec<(TokenId, f64)> {
        self.sorted_entries()
            .into_iter()
            .filter(|e| e.1.exp() >= min_prob)
            .map(|(t, lp)| (t, lp.exp()))
            .collect()
    }

    /// Renormalizes the listed entries over themselves, dropping the residual.
    pub fn renormalized(&self) -> Result<Self> {
        let lps: Vec<f64> = self.entries.iter().map(|e| e.1).collect();
        let z = log_sum_exp(&lps)?;
        if !z.is_finite() {
            return Err(Error::degenerate("listed entries carry no mass"));
        }
        Ok(Self {
            size: self.size,
            entries: self.entries.iter().map(|&(t, lp)| (t, lp - z)).collect(),
            residual_log_mass: f64::NEG_INFINITY,
            normalized: true,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lse_examples() {
        let half = 0.5f64.ln();
        assert!(log_sum_exp(&[half, half]).unwrap().abs() < 1e-15);
        assert_eq!(log_sum_exp(&[f64::NEG_INFINITY, -1.25]).unwrap(), -1.25);
        let v = [0.1f64.ln(), 0.2f64.ln(), 0.3f64.ln()];
        assert!((log_sum_exp(&v).unwrap() - 0.6f64.ln()).abs() < 1e-14);
        assert_eq!(
            log_sum_exp(&[f64::NEG_INFINITY, f64::NEG_INFINITY]).unwrap(),
            f64::NEG_INFINITY
        );
        assert!(log_sum_exp(&[]).unwrap_err().is_usage());
    }

    #[test]
    fn lse_is_stable_for_large_magnitudes() {
        let v = [1000.0, 1000.0];
        assert!((log_sum_exp(&v).unwrap() - (1000.0 + 2f64.ln())).abs() < 1e-12);
        let v = [-1000.0, -1000.0];
        assert!((log_sum_exp(&v).unwrap() - (-1000.0 + 2f64.ln())).abs() < 1e-12);
    }

    #[test]
    fn top_mass_examples() {
        let lp = |ps: &[f64]| ps.iter().map(|p| p.ln()).collect::<Vec<_>>();
        assert_eq!(top_mass_prefix(&lp(&[0.5, 0.3, 0.15, 0.05]), 0.9, false), vec![0, 1, 2]);
        assert_eq!(top_mass_prefix(&lp(&[0.1; 10]), 0.9, false).len(), 9);
        assert_eq!(top_mass_prefix(&lp(&[0.1; 10]), 0.9, true).len(), 10);
        assert_eq!(top_mass_prefix(&lp(&[0.0, 1.0, 0.0]), 0.9, false), vec![1]);
        assert_eq!(top_mass_prefix(&lp(&[0.2, 0.4, 0.4]), 0.5, false), vec![1, 2]);
    }

    #[test]
    fn dense_validation() {
        assert!(LogDistribution::from_probs(&[0.5, 0.5], EPS_TOY).is_ok());
        assert!(LogDistribution::from_probs(&[0.5, 0.6], EPS_TOY).is_err());
        assert!(LogDistribution::dense(vec![f64::NAN, 0.0], EPS_TOY).is_err());
    }

    #[test]
    fn truncation_keeps_ties_and_records_residual() {
        let d = LogDistribution::from_probs(&[0.4, 0.3, 0.3], EPS_TOY).unwrap();
        let t = d.truncate_to_mass(0.6).unwrap();
        assert_eq!(t.entries().len(), 3);
        assert!(!t.is_truncated());
        let t = d.truncate_to_mass(0.3).unwrap();
        assert_eq!(t.entries().len(), 1);
        assert!((t.residual_log_mass() - 0.6f64.ln()).abs() < 1e-15);
        assert!(t.total_log_mass().abs() < 1e-15);
        assert_eq!(t.log_prob(1), None);
        let full = d.truncate_to_mass(1.0).unwrap();
        assert!(full.is_dense());
        assert_eq!(full.residual_log_mass(), f64::NEG_INFINITY);
        assert!(d.truncate_to_mass(0.0).is_err());
    }

    #[test]
    fn renormalize_drops_residual() {
        let d = LogDistribution::sparse(4, vec![(2, 0.25f64.ln()), (0, 0.25f64.ln())], 0.5f64.ln(), EPS_TOY)
            .unwrap();
        let r = d.renormalized().unwrap();
        assert!((r.log_prob(2).unwrap() - 0.5f64.ln()).abs() < 1e-15);
        assert!(!r.is_truncated());
        assert!(LogDistribution::sparse(2, vec![(2, 0.0)], f64::NEG_INFINITY, EPS_TOY).is_err());
    }
}
