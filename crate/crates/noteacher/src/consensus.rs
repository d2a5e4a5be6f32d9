//! Weights for the paired-network consistency objective.
//!
//! Model: a latent per-sample consensus score `c` exists, and each observed
//! score is `c` plus independent Gaussian noise — network one with variance
//! `sigma1_sq`, network two with `sigma2_sq`, and (when the sample is
//! labeled) the label itself with variance `sigma_y_sq`. Integrating the
//! consensus out of the joint density leaves, up to an additive constant, a
//! quadratic penalty on every pair of observations:
//!
//! ```text
//! -log p(obs) = const + sum over pairs (m, k) of w(m, k) * (obs_m - obs_k)^2
//! w(m, k) = 1 / (2 * var_m * var_k * sum over all i of 1/var_i)
//! ```
//!
//! Those pair weights are what the training loss uses: the labeled terms
//! couple each network to the label, the consistency terms couple the two
//! networks to each other, and the unlabeled weight is the two-observation
//! special case `1 / (2 * (sigma1_sq + sigma2_sq))`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

fn check_variance(name: &'static str, v: f64) -> Result<()> {
    if !(v > 0.0) || !v.is_finite() {
        return Err(Error::InvalidHyperParam {
            name,
            value: v,
            reason: "variance must be finite and positive",
        });
    }
    Ok(())
}

/// Penalty weight coupling observations `m` and `k` when all of `variances`
/// observe the same latent consensus.
pub fn pairwise_weight(variances: &[f64], m: usize, k: usize) -> Result<f64> {
    if variances.len() < 2 {
        return Err(Error::InvalidHyperParam {
            name: "variances",
            value: variances.len() as f64,
            reason: "need at least two observers of the consensus",
        });
    }
    if m == k || m >= variances.len() || k >= variances.len() {
        return Err(Error::InvalidHyperParam {
            name: "pair indices",
            value: if m == k { m as f64 } else { m.max(k) as f64 },
            reason: "indices must be distinct and in range",
        });
    }
    for &v in variances {
        check_variance("variances", v)?;
    }
    let precision_sum: f64 = variances.iter().map(|v| 1.0 / v).sum();
    Ok(1.0 / (2.0 * variances[m] * variances[k] * precision_sum))
}

/// The four weights the paired-network loss needs, fixed by the three noise
/// variances.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConsensusWeights {
    /// Couples the label to network one's output on labeled samples.
    pub label_net1: f64,
    /// Couples the label to network two's output on labeled samples.
    pub label_net2: f64,
    /// Couples the two networks on labeled samples.
    pub cross_labeled: f64,
    /// Couples the two networks on unlabeled samples (no label observer).
    pub cross_unlabeled: f64,
}

impl ConsensusWeights {
    /// Derive all four weights from the network and label noise variances.
    ///
    /// Closed forms, with `d = 2 * (s1*s2 + s2*sy + s1*sy)`:
    /// `label_net1 = s2/d`, `label_net2 = s1/d`, `cross_labeled = sy/d`,
    /// and `cross_unlabeled = 1 / (2*(s1 + s2))`.
    pub fn from_variances(sigma1_sq: f64, sigma2_sq: f64, sigma_y_sq: f64) -> Result<Self> {
        check_variance("sigma1_sq", sigma1_sq)?;
        check_variance("sigma2_sq", sigma2_sq)?;
        check_variance("sigma_y_sq", sigma_y_sq)?;
        let (s1, s2, sy) = (sigma1_sq, sigma2_sq, sigma_y_sq);
        let d = 2.0 * (s1 * s2 + s2 * sy + s1 * sy);
        Ok(ConsensusWeights {
            label_net1: s2 / d,
            label_net2: s1 / d,
            cross_labeled: sy / d,
            cross_unlabeled: 1.0 / (2.0 * (s1 + s2)),
        })
    }

    /// Reject hand-built weight sets that no variance assignment could
    /// produce (non-positive or non-finite entries).
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("label_net1", self.label_net1),
            ("label_net2", self.label_net2),
            ("cross_labeled", self.cross_labeled),
            ("cross_unlabeled", self.cross_unlabeled),
        ] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::InvalidHyperParam {
                    name,
                    value: v,
                    reason: "consensus weights must be finite and positive",
                });
            }
        }
        Ok(())
    }
}

/// The quadratic penalty surface for one labeled sample, up to the additive
/// constant dropped when the consensus is integrated out. Used as the
/// reference surface when checking the weights against direct numerical
/// integration.
pub fn labeled_quadratic(w: &ConsensusWeights, f1: f64, f2: f64, y: f64) -> f64 {
    w.label_net1 * (y - f1).powi(2)
        + w.label_net2 * (y - f2).powi(2)
        + w.cross_labeled * (f1 - f2).powi(2)
}

/// The unlabeled counterpart of [`labeled_quadratic`].
pub fn unlabeled_quadratic(w: &ConsensusWeights, f1: f64, f2: f64) -> f64 {
    w.cross_unlabeled * (f1 - f2).powi(2)
}
