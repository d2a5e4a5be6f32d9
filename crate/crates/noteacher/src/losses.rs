//! Training objectives: the paired-network consistency losses and the
//! supervised, pseudo-label, Mean Teacher, and virtual adversarial baselines.
//!
//! All functions build onto a caller-owned [`Tape`]. Network outputs arrive
//! as probability nodes (post sigmoid or softmax); anything that must not
//! receive gradient — labels, teacher outputs, pseudo-labels, clean-pass
//! predictions — arrives as a plain [`Tensor`] and enters the tape as a
//! constant leaf.

use crate::consensus::ConsensusWeights;
use crate::error::{Error, Result};
use crate::rng::StreamRng;
use crate::tensor::{NodeId, Tape, Tensor};

/// Probabilities are clamped into this interval before any logarithm, so
/// saturated outputs produce large-but-finite losses. Gradient does not pass
/// through clamped entries.
pub const PROB_CLAMP: (f64, f64) = (1e-7, 1.0 - 1e-7);

/// Whether a task scores each label independently (sigmoid outputs, any
/// number of positives per sample) or picks exactly one class (softmax
/// outputs, one-hot targets).
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum TaskKind {
    #[serde(rename = "multilabel")]
    MultiLabel,
    #[serde(rename = "unilabel")]
    UniLabel,
}

/// Outputs of the two paired networks on one batch. The unlabeled pair must
/// be both present or both absent.
#[derive(Clone, Copy, Debug)]
pub struct PairedOutputs {
    pub net1_labeled: NodeId,
    pub net2_labeled: NodeId,
    pub net1_unlabeled: Option<NodeId>,
    pub net2_unlabeled: Option<NodeId>,
}

impl PairedOutputs {
    fn unlabeled_pair(&self) -> Result<Option<(NodeId, NodeId)>> {
        match (self.net1_unlabeled, self.net2_unlabeled) {
            (Some(a), Some(b)) => Ok(Some((a, b))),
            (None, None) => Ok(None),
            _ => Err(Error::Config(
                "unlabeled outputs must be provided for both networks or neither".into(),
            )),
        }
    }
}

fn log_clamped(t: &mut Tape, a: NodeId) -> Result<NodeId> {
    let c = t.clamp(a, PROB_CLAMP.0, PROB_CLAMP.1)?;
    t.log(c)
}

fn one_minus(t: &mut Tape, a: NodeId) -> Result<NodeId> {
    let n = t.neg(a)?;
    t.add_scalar(n, 1.0)
}

fn check_target_shape(t: &Tape, probs: NodeId, targets: &Tensor) -> Result<()> {
    if t.value(probs).shape() != targets.shape() {
        return Err(Error::ShapeMismatch {
            op: "cross_entropy targets",
            lhs: t.value(probs).shape(),
            rhs: targets.shape(),
        });
    }
    Ok(())
}

/// Cross-entropy between hard targets and predicted probabilities, averaged
/// over the batch. Multi-label tasks also average over labels (per-label
/// Bernoulli terms); uni-label tasks sum the one-hot pick per row.
pub fn cross_entropy(
    t: &mut Tape,
    probs: NodeId,
    targets: &Tensor,
    kind: TaskKind,
) -> Result<NodeId> {
    check_target_shape(t, probs, targets)?;
    match kind {
        TaskKind::MultiLabel => {
            let y = t.leaf(targets.clone());
            let lf = log_clamped(t, probs)?;
            let pos = t.mul(y, lf)?;
            let omf = one_minus(t, probs)?;
            let lomf = log_clamped(t, omf)?;
            let omy = t.leaf(targets.map(|v| 1.0 - v));
            let neg_part = t.mul(omy, lomf)?;
            let s = t.add(pos, neg_part)?;
            let m = t.mean_all(s)?;
            t.neg(m)
        }
        TaskKind::UniLabel => {
            let y = t.leaf(targets.clone());
            let lf = log_clamped(t, probs)?;
            let picked = t.mul(y, lf)?;
            let per_row = t.row_sum(picked)?;
            let m = t.mean_all(per_row)?;
            t.neg(m)
        }
    }
}

/// Mean squared error over every entry of two same-shape nodes.
pub fn mse(t: &mut Tape, a: NodeId, b: NodeId) -> Result<NodeId> {
    let d = t.sub(a, b)?;
    let sq = t.mul(d, d)?;
    t.mean_all(sq)
}

/// MSE pooled over labeled and unlabeled rows together (entry counts weight
/// the two means so the result equals one mean over the union).
fn mse_all_rows(
    t: &mut Tape,
    a_l: NodeId,
    b_l: NodeId,
    unlabeled: Option<(NodeId, NodeId)>,
) -> Result<NodeId> {
    let m_l = mse(t, a_l, b_l)?;
    let Some((a_u, b_u)) = unlabeled else {
        return Ok(m_l);
    };
    let n_l = t.value(a_l).rows() as f64;
    let n_u = t.value(a_u).rows() as f64;
    let m_u = mse(t, a_u, b_u)?;
    let wl = t.mul_scalar(m_l, n_l / (n_l + n_u))?;
    let wu = t.mul_scalar(m_u, n_u / (n_l + n_u))?;
    t.add(wl, wu)
}

/// The paired-network consistency loss.
///
/// Labeled rows tie each network to the target with its label weight and the
/// networks to each other with the labeled cross weight; unlabeled rows tie
/// the networks together with the unlabeled cross weight, scaled by the
/// unlabeled-to-labeled row ratio so the term keeps the weight it would have
/// in a joint sum over all rows normalized by the labeled count.
pub fn not_loss(
    t: &mut Tape,
    out: &PairedOutputs,
    targets: &Tensor,
    weights: &ConsensusWeights,
    kind: TaskKind,
) -> Result<NodeId> {
    weights.validate()?;
    let unlabeled = out.unlabeled_pair()?;
    let ce1 = cross_entropy(t, out.net1_labeled, targets, kind)?;
    let ce2 = cross_entropy(t, out.net2_labeled, targets, kind)?;
    let term1 = t.mul_scalar(ce1, weights.label_net1)?;
    let term2 = t.mul_scalar(ce2, weights.label_net2)?;
    let mse_l = mse(t, out.net1_labeled, out.net2_labeled)?;
    let term3 = t.mul_scalar(mse_l, weights.cross_labeled)?;
    let mut total = t.add(term1, term2)?;
    total = t.add(total, term3)?;
    if let Some((u1, u2)) = unlabeled {
        let n_l = t.value(out.net1_labeled).rows() as f64;
        let n_u = t.value(u1).rows() as f64;
        let mse_u = mse(t, u1, u2)?;
        let term4 = t.mul_scalar(mse_u, weights.cross_unlabeled * n_u / n_l)?;
        total = t.add(total, term4)?;
    }
    Ok(total)
}

/// The squared-error, sum-aggregated sibling of [`not_loss`]: exactly the
/// quadratic surface left over when the latent consensus is integrated out,
/// summed over every observation. Kept separate so tests can tie the
/// training loss back to the probabilistic model it came from.
pub fn not_loss_squared_sum(
    t: &mut Tape,
    out: &PairedOutputs,
    targets: &Tensor,
    weights: &ConsensusWeights,
) -> Result<NodeId> {
    weights.validate()?;
    let unlabeled = out.unlabeled_pair()?;
    check_target_shape(t, out.net1_labeled, targets)?;
    let y = t.leaf(targets.clone());
    let sq_sum = |t: &mut Tape, a: NodeId, b: NodeId| -> Result<NodeId> {
        let d = t.sub(a, b)?;
        let sq = t.mul(d, d)?;
        t.sum_all(sq)
    };
    let s1 = sq_sum(t, y, out.net1_labeled)?;
    let s2 = sq_sum(t, y, out.net2_labeled)?;
    let s12 = sq_sum(t, out.net1_labeled, out.net2_labeled)?;
    let term1 = t.mul_scalar(s1, weights.label_net1)?;
    let term2 = t.mul_scalar(s2, weights.label_net2)?;
    let term3 = t.mul_scalar(s12, weights.cross_labeled)?;
    let mut total = t.add(term1, term2)?;
    total = t.add(total, term3)?;
    if let Some((u1, u2)) = unlabeled {
        let su = sq_sum(t, u1, u2)?;
        let term4 = t.mul_scalar(su, weights.cross_unlabeled)?;
        total = t.add(total, term4)?;
    }
    Ok(total)
}

/// Per-row MSE between softmax outputs and every one-hot vector, as an
/// `r x K` node: entry `(i, k)` is `mean_j (f[i,j] - onehot_k[j])^2`.
/// Expanded algebraically so it stays a cheap tape expression.
fn mse_to_each_class(t: &mut Tape, probs: NodeId) -> Result<NodeId> {
    let k = t.value(probs).cols() as f64;
    let ff = t.mul(probs, probs)?;
    let sumsq = t.row_sum(ff)?;
    let m2 = t.mul_scalar(probs, -2.0)?;
    let spread = t.add_col_vec(m2, sumsq)?;
    let plus1 = t.add_scalar(spread, 1.0)?;
    t.mul_scalar(plus1, 1.0 / k)
}

/// The prior-guided variant of the paired loss for uni-label tasks with a
/// class-skewed labeled set.
///
/// `gamma[k]` is the fraction of class `k` that is labeled. Labeled rows pay
/// the usual cross-entropy terms; the cross-network MSE runs over labeled
/// and unlabeled rows pooled; and each unlabeled row pays
/// `-log sum_k (1 - gamma[k]) * exp(-w1 * d1k - w2 * d2k)` where `d_ik` is
/// network i's MSE to one-hot class `k` — softly aligning unlabeled rows
/// with the classes the labeled set under-covers.
pub fn notga_loss(
    t: &mut Tape,
    out: &PairedOutputs,
    targets: &Tensor,
    weights: &ConsensusWeights,
    gamma: &[f64],
) -> Result<NodeId> {
    weights.validate()?;
    let unlabeled = out.unlabeled_pair()?;
    check_target_shape(t, out.net1_labeled, targets)?;
    let k = targets.cols();
    if gamma.len() != k {
        return Err(Error::Config(format!(
            "gamma has {} entries but the task has {} classes",
            gamma.len(),
            k
        )));
    }
    if let Some(&bad) = gamma.iter().find(|g| !(0.0..=1.0).contains(*g)) {
        return Err(Error::InvalidHyperParam {
            name: "gamma",
            value: bad,
            reason: "label propensities must lie in [0, 1]",
        });
    }
    if unlabeled.is_some() && gamma.iter().all(|&g| g >= 1.0) {
        return Err(Error::Config(
            "every class is fully labeled (gamma all 1) yet unlabeled rows were supplied".into(),
        ));
    }
    for r in 0..targets.rows() {
        let row = targets.row(r);
        let sum: f64 = row.iter().sum();
        if (sum - 1.0).abs() > 1e-9 || row.iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::Config(format!(
                "target row {r} is not one-hot; this loss is for uni-label tasks"
            )));
        }
    }

    let ce1 = cross_entropy(t, out.net1_labeled, targets, TaskKind::UniLabel)?;
    let ce2 = cross_entropy(t, out.net2_labeled, targets, TaskKind::UniLabel)?;
    let term1 = t.mul_scalar(ce1, weights.label_net1)?;
    let term2 = t.mul_scalar(ce2, weights.label_net2)?;
    let mse_all = mse_all_rows(t, out.net1_labeled, out.net2_labeled, unlabeled)?;
    let term3 = t.mul_scalar(mse_all, weights.cross_labeled)?;
    let mut total = t.add(term1, term2)?;
    total = t.add(total, term3)?;

    if let Some((u1, u2)) = unlabeled {
        let m1 = mse_to_each_class(t, u1)?;
        let m2 = mse_to_each_class(t, u2)?;
        let a1 = t.mul_scalar(m1, -weights.label_net1)?;
        let a2 = t.mul_scalar(m2, -weights.label_net2)?;
        let arg = t.add(a1, a2)?;
        // ln(1 - gamma): fully labeled classes get -inf and drop out of the
        // log-sum-exp (their gradient contribution is exactly zero).
        let log_open = Tensor::from_vec(1, k, gamma.iter().map(|&g| (1.0 - g).ln()).collect());
        let lo = t.leaf(log_open);
        let shifted = t.add_row_vec(arg, lo)?;
        let lse = t.logsumexp_rows(shifted)?;
        let mean = t.mean_all(lse)?;
        let align = t.neg(mean)?;
        total = t.add(total, align)?;
    }
    Ok(total)
}

/// Mean Teacher: supervised cross-entropy on labeled rows plus a weighted
/// MSE tying the student to a frozen teacher over all rows. The teacher
/// tensors are the EMA model's outputs and receive no gradient.
#[allow(clippy::too_many_arguments)]
pub fn mean_teacher_loss(
    t: &mut Tape,
    student_labeled: NodeId,
    student_unlabeled: Option<NodeId>,
    teacher_labeled: &Tensor,
    teacher_unlabeled: Option<&Tensor>,
    targets: &Tensor,
    consistency_weight: f64,
    kind: TaskKind,
) -> Result<NodeId> {
    if !(consistency_weight >= 0.0) || !consistency_weight.is_finite() {
        return Err(Error::InvalidHyperParam {
            name: "consistency_weight",
            value: consistency_weight,
            reason: "must be finite and non-negative",
        });
    }
    if t.value(student_labeled).shape() != teacher_labeled.shape() {
        return Err(Error::ShapeMismatch {
            op: "mean_teacher labeled outputs",
            lhs: t.value(student_labeled).shape(),
            rhs: teacher_labeled.shape(),
        });
    }
    let unlabeled = match (student_unlabeled, teacher_unlabeled) {
        (Some(s), Some(tu)) => {
            if t.value(s).shape() != tu.shape() {
                return Err(Error::ShapeMismatch {
                    op: "mean_teacher unlabeled outputs",
                    lhs: t.value(s).shape(),
                    rhs: tu.shape(),
                });
            }
            let tu = t.leaf(tu.clone());
            Some((s, tu))
        }
        (None, None) => None,
        _ => {
            return Err(Error::Config(
                "student and teacher unlabeled outputs must be provided together".into(),
            ))
        }
    };
    let ce = cross_entropy(t, student_labeled, targets, kind)?;
    let tl = t.leaf(teacher_labeled.clone());
    let cons = mse_all_rows(t, student_labeled, tl, unlabeled)?;
    let weighted = t.mul_scalar(cons, consistency_weight)?;
    t.add(ce, weighted)
}

/// Turn predicted probabilities into hard pseudo-targets. Multi-label:
/// per-entry threshold, ties (exactly at the threshold) count as positive.
/// Uni-label: one-hot argmax per row, ties to the lowest class index.
pub fn harden(probs: &Tensor, kind: TaskKind, threshold: f64) -> Tensor {
    match kind {
        TaskKind::MultiLabel => probs.map(|v| if v >= threshold { 1.0 } else { 0.0 }),
        TaskKind::UniLabel => {
            let mut out = Tensor::zeros(probs.rows(), probs.cols());
            for r in 0..probs.rows() {
                let row = probs.row(r);
                let mut best = 0;
                for (c, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = c;
                    }
                }
                out[(r, best)] = 1.0;
            }
            out
        }
    }
}

/// Pseudo-labeling: supervised cross-entropy plus weighted cross-entropy
/// against hard pseudo-targets (from [`harden`] on a clean forward pass,
/// detached) on unlabeled rows.
pub fn pseudo_label_loss(
    t: &mut Tape,
    labeled_probs: NodeId,
    targets: &Tensor,
    unlabeled_probs: Option<NodeId>,
    pseudo_targets: Option<&Tensor>,
    weight: f64,
    kind: TaskKind,
) -> Result<NodeId> {
    if !(weight >= 0.0) || !weight.is_finite() {
        return Err(Error::InvalidHyperParam {
            name: "pseudo_weight",
            value: weight,
            reason: "must be finite and non-negative",
        });
    }
    let ce_l = cross_entropy(t, labeled_probs, targets, kind)?;
    match (unlabeled_probs, pseudo_targets) {
        (Some(u), Some(p)) => {
            let ce_u = cross_entropy(t, u, p, kind)?;
            let weighted = t.mul_scalar(ce_u, weight)?;
            t.add(ce_l, weighted)
        }
        (None, None) => Ok(ce_l),
        _ => Err(Error::Config(
            "unlabeled probabilities and pseudo-targets must be provided together".into(),
        )),
    }
}

fn xlnx(v: f64) -> f64 {
    if v > 0.0 {
        v * v.ln()
    } else {
        0.0
    }
}

/// KL divergence from a fixed reference distribution `p` to the predicted
/// node `q`, averaged over the batch. Multi-label: mean of per-entry
/// Bernoulli KLs (so also averaged over labels). Uni-label: categorical KL
/// per row. Only `q` receives gradient.
pub fn kl_divergence(t: &mut Tape, p: &Tensor, q: NodeId, kind: TaskKind) -> Result<NodeId> {
    if t.value(q).shape() != p.shape() {
        return Err(Error::ShapeMismatch {
            op: "kl_divergence",
            lhs: p.shape(),
            rhs: t.value(q).shape(),
        });
    }
    let n_entries = (p.rows() * p.cols()) as f64;
    let n_rows = p.rows() as f64;
    match kind {
        TaskKind::MultiLabel => {
            // Entropy side is constant; only the cross term rides the tape.
            let neg_entropy: f64 = p
                .data()
                .iter()
                .map(|&v| xlnx(v) + xlnx(1.0 - v))
                .sum::<f64>()
                / n_entries;
            let pl = t.leaf(p.clone());
            let lq = log_clamped(t, q)?;
            let pos = t.mul(pl, lq)?;
            let omq = one_minus(t, q)?;
            let lomq = log_clamped(t, omq)?;
            let omp = t.leaf(p.map(|v| 1.0 - v));
            let neg = t.mul(omp, lomq)?;
            let s = t.add(pos, neg)?;
            let cross = t.mean_all(s)?;
            let negc = t.neg(cross)?;
            t.add_scalar(negc, neg_entropy)
        }
        TaskKind::UniLabel => {
            let neg_entropy: f64 = p.data().iter().map(|&v| xlnx(v)).sum::<f64>() / n_rows;
            let pl = t.leaf(p.clone());
            let lq = log_clamped(t, q)?;
            let picked = t.mul(pl, lq)?;
            let per_row = t.row_sum(picked)?;
            let cross = t.mean_all(per_row)?;
            let negc = t.neg(cross)?;
            t.add_scalar(negc, neg_entropy)
        }
    }
}

fn row_l2_normalize(d: &mut Tensor) {
    let cols = d.cols();
    for r in 0..d.rows() {
        let norm: f64 = (0..cols).map(|c| d[(r, c)] * d[(r, c)]).sum::<f64>().sqrt();
        if norm > 1e-12 {
            for c in 0..cols {
                d[(r, c)] /= norm;
            }
        }
    }
}

/// Power iteration for the virtual adversarial direction: the unit
/// perturbation (per row) along which the model's output distribution moves
/// fastest from its clean prediction. `forward` maps an input node to a
/// probability node and is called on a fresh tape each iteration.
pub fn vat_direction(
    mut forward: impl FnMut(&mut Tape, NodeId) -> Result<NodeId>,
    x: &Tensor,
    p_clean: &Tensor,
    kind: TaskKind,
    xi: f64,
    power_iters: usize,
    rng: &mut StreamRng,
) -> Result<Tensor> {
    if !(xi > 0.0) || !xi.is_finite() {
        return Err(Error::InvalidHyperParam {
            name: "xi",
            value: xi,
            reason: "must be finite and positive",
        });
    }
    if power_iters < 1 {
        return Err(Error::InvalidHyperParam {
            name: "power_iters",
            value: power_iters as f64,
            reason: "need at least one power iteration",
        });
    }
    let mut d = Tensor::zeros(x.rows(), x.cols());
    for v in d.data_mut() {
        *v = rng.standard_normal();
    }
    row_l2_normalize(&mut d);
    for _ in 0..power_iters {
        let mut t = Tape::new();
        let r = t.leaf(d.map(|v| v * xi));
        let xl = t.leaf(x.clone());
        let xp = t.add(xl, r)?;
        let q = forward(&mut t, xp)?;
        let kl = kl_divergence(&mut t, p_clean, q, kind)?;
        let g = t.backward(kl)?;
        d = g.wrt(r).clone();
        row_l2_normalize(&mut d);
    }
    Ok(d)
}
