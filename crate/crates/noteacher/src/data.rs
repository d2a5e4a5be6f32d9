//! Datasets, synthetic generators, budget-driven annotation sampling,
//! class-mismatch split construction, augmentation, and CSV interchange.
//!
//! Everything here is deterministic given a seed: generators and samplers
//! take their randomness from named [`StreamRng`] streams, and datasets are
//! immutable once built, so splits can be replayed exactly from a manifest.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::TaskKind;
use crate::rng::StreamRng;
use crate::tensor::Tensor;

// ---------------------------------------------------------------------------
// Dataset
// ---------------------------------------------------------------------------

/// Whether a sample is a single feature vector or a variable-length bag of
/// per-slice feature vectors pooled at inference time.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Structure {
    Flat,
    ScanBag,
}

/// An immutable collection of samples with binary targets.
///
/// Each sample is a bag of one or more rows over the same feature columns;
/// flat datasets hold exactly one row per bag. `labeled[i]` records whether
/// sample `i` carries trustworthy targets — ingested files may leave label
/// cells empty, and split constructors strip targets from unlabeled pools.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    kind: TaskKind,
    structure: Structure,
    bags: Vec<Tensor>,
    targets: Tensor,
    labeled: Vec<bool>,
}

impl Dataset {
    /// Build and validate a dataset. Targets must be binary, one row per
    /// bag; uni-label targets must be one-hot on labeled samples; flat
    /// structure requires single-row bags; all bags share a feature width.
    pub fn new(
        kind: TaskKind,
        structure: Structure,
        bags: Vec<Tensor>,
        targets: Tensor,
        labeled: Vec<bool>,
    ) -> Result<Self> {
        if bags.is_empty() {
            return Err(Error::Config("a dataset needs at least one sample".into()));
        }
        if targets.rows() != bags.len() || labeled.len() != bags.len() {
            return Err(Error::ShapeMismatch {
                op: "dataset",
                lhs: (bags.len(), labeled.len()),
                rhs: targets.shape(),
            });
        }
        let dim = bags[0].cols();
        for (i, bag) in bags.iter().enumerate() {
            if bag.rows() == 0 || bag.cols() != dim {
                return Err(Error::Config(format!(
                    "bag {i} has shape {:?}, expected nonempty rows by {dim} columns",
                    bag.shape()
                )));
            }
            if structure == Structure::Flat && bag.rows() != 1 {
                return Err(Error::Config(format!(
                    "flat dataset has a {}-row bag at sample {i}",
                    bag.rows()
                )));
            }
        }
        for (r, &is_labeled) in labeled.iter().enumerate() {
            let row = targets.row(r);
            if row.iter().any(|&v| v != 0.0 && v != 1.0) {
                return Err(Error::Config(format!(
                    "target row {r} is not binary: {row:?}"
                )));
            }
            if kind == TaskKind::UniLabel && is_labeled {
                let sum: f64 = row.iter().sum();
                if sum != 1.0 {
                    return Err(Error::Config(format!(
                        "uni-label target row {r} is not one-hot: {row:?}"
                    )));
                }
            }
        }
        Ok(Dataset {
            kind,
            structure,
            bags,
            targets,
            labeled,
        })
    }

    pub fn len(&self) -> usize {
        self.bags.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bags.is_empty()
    }

    pub fn kind(&self) -> TaskKind {
        self.kind
    }

    pub fn structure(&self) -> Structure {
        self.structure
    }

    pub fn num_labels(&self) -> usize {
        self.targets.cols()
    }

    pub fn feature_dim(&self) -> usize {
        self.bags[0].cols()
    }

    pub fn bag(&self, i: usize) -> &Tensor {
        &self.bags[i]
    }

    pub fn target_row(&self, i: usize) -> &[f64] {
        self.targets.row(i)
    }

    pub fn targets(&self) -> &Tensor {
        &self.targets
    }

    pub fn is_labeled(&self, i: usize) -> bool {
        self.labeled[i]
    }

    pub fn labeled_indices(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.labeled[i]).collect()
    }

    pub fn unlabeled_indices(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| !self.labeled[i]).collect()
    }

    /// Clone the bags at `idx` in order.
    pub fn bags_at(&self, idx: &[usize]) -> Vec<Tensor> {
        idx.iter().map(|&i| self.bags[i].clone()).collect()
    }

    /// Stack the target rows at `idx` into an `idx.len() x K` tensor.
    pub fn targets_at(&self, idx: &[usize]) -> Tensor {
        let rows: Vec<Vec<f64>> = idx.iter().map(|&i| self.targets.row(i).to_vec()).collect();
        Tensor::from_rows(&rows)
    }

    /// A new dataset holding the samples at `idx`, labels kept.
    pub fn subset(&self, idx: &[usize]) -> Result<Dataset> {
        Dataset::new(
            self.kind,
            self.structure,
            self.bags_at(idx),
            self.targets_at(idx),
            idx.iter().map(|&i| self.labeled[i]).collect(),
        )
    }

    /// A new dataset holding the samples at `idx` with targets zeroed and
    /// the labeled flags cleared — the unlabeled pool a sampler hands to a
    /// trainer.
    pub fn subset_without_labels(&self, idx: &[usize]) -> Result<Dataset> {
        Dataset::new(
            self.kind,
            self.structure,
            self.bags_at(idx),
            Tensor::zeros(idx.len(), self.num_labels()),
            vec![false; idx.len()],
        )
    }

    /// Per-label count of positive labeled samples.
    pub fn positives_per_label(&self) -> Vec<usize> {
        let mut counts = vec![0usize; self.num_labels()];
        for i in 0..self.len() {
            if !self.labeled[i] {
                continue;
            }
            for (k, count) in counts.iter_mut().enumerate() {
                if self.targets[(i, k)] >= 0.5 {
                    *count += 1;
                }
            }
        }
        counts
    }

    /// Class index of a uni-label sample (position of the 1 in its one-hot
    /// row).
    pub fn class_of(&self, i: usize) -> Option<usize> {
        self.target_row(i).iter().position(|&v| v == 1.0)
    }
}

// ---------------------------------------------------------------------------
// Synthetic generation
// ---------------------------------------------------------------------------

/// Geometry of the synthetic class structure.
///
/// Multi-label data places each label's positives along a random unit
/// direction at `separation` from the origin; uni-label data uses one such
/// direction per class. `noise_sd` controls the within-blob spread, so
/// `separation / noise_sd` sets how much the classes overlap.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Geometry {
    pub feature_dim: usize,
    /// Distance from the origin to each positive-class center.
    pub separation: f64,
    /// Standard deviation of the isotropic within-class noise.
    pub noise_sd: f64,
    /// Multi-label positive rate per label.
    pub prevalence: f64,
    /// Probability that a label copies a shared latent bit instead of being
    /// drawn independently (multi-label only).
    pub label_correlation: f64,
    /// Inclusive range of slices per bag (scan-bag structure only).
    pub bag_slices: (usize, usize),
    /// Fraction of slices in a bag that carry the class signal; at least one
    /// slice always does.
    pub signal_fraction: f64,
}

impl Default for Geometry {
    fn default() -> Self {
        Geometry {
            feature_dim: 10,
            separation: 3.0,
            noise_sd: 1.0,
            prevalence: 0.3,
            label_correlation: 0.0,
            bag_slices: (3, 7),
            signal_fraction: 0.5,
        }
    }
}

impl Geometry {
    pub fn validate(&self) -> Result<()> {
        if self.feature_dim == 0 {
            return Err(Error::InvalidHyperParam {
                name: "feature_dim",
                value: 0.0,
                reason: "must be at least 1",
            });
        }
        if !self.separation.is_finite() || self.separation < 0.0 {
            return Err(Error::InvalidHyperParam {
                name: "separation",
                value: self.separation,
                reason: "must be finite and nonnegative",
            });
        }
        if !self.noise_sd.is_finite() || self.noise_sd <= 0.0 {
            return Err(Error::InvalidHyperParam {
                name: "noise_sd",
                value: self.noise_sd,
                reason: "must be positive",
            });
        }
        if !(0.0..=1.0).contains(&self.prevalence)
            || self.prevalence == 0.0
            || self.prevalence == 1.0
        {
            return Err(Error::InvalidHyperParam {
                name: "prevalence",
                value: self.prevalence,
                reason: "must lie strictly between 0 and 1",
            });
        }
        if !(0.0..=1.0).contains(&self.label_correlation) {
            return Err(Error::InvalidHyperParam {
                name: "label_correlation",
                value: self.label_correlation,
                reason: "must lie in [0, 1]",
            });
        }
        if self.bag_slices.0 == 0 || self.bag_slices.0 > self.bag_slices.1 {
            return Err(Error::InvalidHyperParam {
                name: "bag_slices",
                value: self.bag_slices.0 as f64,
                reason: "range must satisfy 1 <= lo <= hi",
            });
        }
        if !(self.signal_fraction > 0.0 && self.signal_fraction <= 1.0) {
            return Err(Error::InvalidHyperParam {
                name: "signal_fraction",
                value: self.signal_fraction,
                reason: "must lie in (0, 1]",
            });
        }
        Ok(())
    }
}

/// Generate a synthetic dataset on the `dataset` stream of `seed`.
///
/// Multi-label targets are per-label Bernoulli draws, optionally coupled
/// through a shared latent bit; uni-label classes are assigned round-robin
/// so every class is populated evenly. Scan-bag structure emits bags with a
/// uniformly drawn slice count where only the signal slices carry the class
/// displacement. All samples come back labeled.
pub fn gen_synthetic(
    seed: u64,
    n: usize,
    k: usize,
    kind: TaskKind,
    structure: Structure,
    geometry: &Geometry,
) -> Result<Dataset> {
    geometry.validate()?;
    if k == 0 {
        return Err(Error::Config("label count must be at least 1".into()));
    }
    if n < k {
        return Err(Error::Config(format!(
            "need at least one sample per label: n = {n} < K = {k}"
        )));
    }
    let mut rng = StreamRng::new(seed, "dataset");
    let d = geometry.feature_dim;

    // One unit direction per label/class, fixed for the whole dataset.
    let directions: Vec<Vec<f64>> = (0..k)
        .map(|_| {
            let v: Vec<f64> = (0..d).map(|_| rng.standard_normal()).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
            v.into_iter()
                .map(|x| x * geometry.separation / norm)
                .collect()
        })
        .collect();

    let mut bags = Vec::with_capacity(n);
    let mut target_rows = Vec::with_capacity(n);
    for i in 0..n {
        let mut target = vec![0.0; k];
        match kind {
            TaskKind::MultiLabel => {
                let latent = rng.bernoulli(0.5);
                for t in target.iter_mut() {
                    let coupled = rng.uniform01() < geometry.label_correlation;
                    let on = if coupled {
                        latent
                    } else {
                        rng.bernoulli(geometry.prevalence)
                    };
                    if on {
                        *t = 1.0;
                    }
                }
            }
            TaskKind::UniLabel => target[i % k] = 1.0,
        }

        // The class displacement shared by every signal slice of the sample.
        let mut signal = vec![0.0; d];
        for (c, dir) in directions.iter().enumerate() {
            if target[c] == 1.0 {
                for (s, &v) in signal.iter_mut().zip(dir) {
                    *s += v;
                }
            }
        }

        let slices = match structure {
            Structure::Flat => 1,
            Structure::ScanBag => {
                let (lo, hi) = geometry.bag_slices;
                lo + rng.below(hi - lo + 1)
            }
        };
        let with_signal = match structure {
            Structure::Flat => 1,
            Structure::ScanBag => {
                let want = (geometry.signal_fraction * slices as f64).round() as usize;
                want.clamp(1, slices)
            }
        };
        let order = rng.permutation(slices);
        let mut rows = vec![vec![0.0; d]; slices];
        for (rank, &slice) in order.iter().enumerate() {
            let carries_signal = rank < with_signal;
            for (j, cell) in rows[slice].iter_mut().enumerate() {
                let base = if carries_signal { signal[j] } else { 0.0 };
                *cell = base + rng.normal(0.0, geometry.noise_sd);
            }
        }
        bags.push(Tensor::from_rows(&rows));
        target_rows.push(target);
    }

    Dataset::new(
        kind,
        structure,
        bags,
        Tensor::from_rows(&target_rows),
        vec![true; n],
    )
}

// ---------------------------------------------------------------------------
// Annotation-budget sampling
// ---------------------------------------------------------------------------

/// A plan for simulating an annotation campaign over increasing budgets.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BudgetPlan {
    /// Strictly ascending labeled-set target sizes.
    pub budgets: Vec<usize>,
    /// Keep annotating past the budget until every label has at least this
    /// many positives.
    pub min_positives_per_label: usize,
    /// Validation never shrinks below this many samples.
    pub min_val_size: usize,
    /// Fraction of the final labeled set reserved for validation, in (0, 1).
    pub val_fraction: f64,
}

impl BudgetPlan {
    pub fn validate(&self) -> Result<()> {
        if self.budgets.is_empty() {
            return Err(Error::Config(
                "budget plan needs at least one budget".into(),
            ));
        }
        if self.budgets.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config(format!(
                "budgets must be strictly ascending: {:?}",
                self.budgets
            )));
        }
        if self.budgets[0] == 0 {
            return Err(Error::Config("budgets must be positive".into()));
        }
        if self.min_positives_per_label == 0 {
            return Err(Error::InvalidHyperParam {
                name: "min_positives_per_label",
                value: 0.0,
                reason: "must be at least 1",
            });
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return Err(Error::InvalidHyperParam {
                name: "val_fraction",
                value: self.val_fraction,
                reason: "must lie strictly between 0 and 1",
            });
        }
        Ok(())
    }
}

/// The split produced for one budget: indices into the pool.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BudgetSplit {
    /// The requested budget L.
    pub budget: usize,
    /// Annotations actually spent after coverage top-up.
    pub final_labeled: usize,
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub unlabeled: Vec<usize>,
}

/// Simulate annotating `pool` under `plan`, one split per budget.
///
/// A single random order of the pool plays the annotator's queue: each
/// budget takes samples from where the previous one stopped, so labeled sets
/// nest. After reaching the budget, annotation continues one sample at a
/// time until every label has `min_positives_per_label` positives among the
/// labeled set, giving a final labeled size at or above the budget. The
/// labeled set is then split into train and validation — validation gets
/// `max(min_val_size, round(val_fraction * final))` samples, drawn at random
/// — and everything never annotated forms the unlabeled pool.
pub fn realistic_sample(pool: &Dataset, plan: &BudgetPlan, seed: u64) -> Result<Vec<BudgetSplit>> {
    plan.validate()?;
    if pool.labeled_indices().len() != pool.len() {
        return Err(Error::Config(
            "annotation simulation needs a fully labeled pool".into(),
        ));
    }
    let k = pool.num_labels();
    let mut rng = StreamRng::new(seed, "sampling");
    let queue = rng.permutation(pool.len());

    let mut splits = Vec::with_capacity(plan.budgets.len());
    let mut annotated: Vec<usize> = Vec::new();
    let mut positives = vec![0usize; k];
    let mut cursor = 0usize;
    let annotate = |annotated: &mut Vec<usize>, positives: &mut Vec<usize>, cursor: &mut usize| {
        let i = queue[*cursor];
        *cursor += 1;
        annotated.push(i);
        for (c, count) in positives.iter_mut().enumerate() {
            if pool.target_row(i)[c] >= 0.5 {
                *count += 1;
            }
        }
    };

    for &budget in &plan.budgets {
        if budget > pool.len() {
            return Err(Error::Config(format!(
                "budget {budget} exceeds pool size {}",
                pool.len()
            )));
        }
        while annotated.len() < budget {
            annotate(&mut annotated, &mut positives, &mut cursor);
        }
        // Annotate past the budget until every label is covered.
        while let Some(deficient) = positives
            .iter()
            .position(|&c| c < plan.min_positives_per_label)
        {
            if cursor == queue.len() {
                return Err(Error::UnsatisfiableCoverage {
                    label: deficient,
                    needed: plan.min_positives_per_label,
                    have: positives[deficient],
                });
            }
            annotate(&mut annotated, &mut positives, &mut cursor);
        }

        let final_labeled = annotated.len();
        let val_size = plan
            .min_val_size
            .max((plan.val_fraction * final_labeled as f64).round() as usize);
        if val_size >= final_labeled {
            return Err(Error::Config(format!(
                "validation would consume the whole labeled set: \
                 {val_size} of {final_labeled} at budget {budget}"
            )));
        }
        let mut order = annotated.clone();
        rng.shuffle(&mut order);
        let mut val: Vec<usize> = order[..val_size].to_vec();
        let mut train: Vec<usize> = order[val_size..].to_vec();
        val.sort_unstable();
        train.sort_unstable();
        let unlabeled: Vec<usize> = queue[cursor..].to_vec();
        splits.push(BudgetSplit {
            budget,
            final_labeled,
            train,
            val,
            unlabeled,
        });
    }
    Ok(splits)
}

// ---------------------------------------------------------------------------
// Class-mismatch construction
// ---------------------------------------------------------------------------

/// Per-class sample counts for the four mismatch splits.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitCounts {
    pub labeled: Vec<usize>,
    pub unlabeled: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl SplitCounts {
    fn check_len(&self, k: usize) -> Result<()> {
        for (name, v) in [
            ("labeled", &self.labeled),
            ("unlabeled", &self.unlabeled),
            ("val", &self.val),
            ("test", &self.test),
        ] {
            if v.len() != k {
                return Err(Error::Config(format!(
                    "{name} counts list {} classes, expected {k}",
                    v.len()
                )));
            }
        }
        Ok(())
    }
}

/// A requested labeled/unlabeled class-distribution mismatch.
///
/// Ratios describe the intended labeled and unlabeled class proportions (up
/// to scale); counts pin the exact number of samples drawn per class and
/// split. At least one of the two must be present. When only ratios are
/// given, [`MismatchSpec::from_ratios`] apportions whole-sample counts by
/// largest remainder.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MismatchSpec {
    pub class_names: Vec<String>,
    pub labeled_ratio: Option<Vec<f64>>,
    pub unlabeled_ratio: Option<Vec<f64>>,
    pub counts: Option<SplitCounts>,
}

/// How far a realized class proportion may drift from its stated ratio
/// before the request is rejected as inconsistent. Realistic mismatch
/// setups round per-class counts away from exact proportionality, so this
/// is a tolerance, not an equality.
const RATIO_TOLERANCE: f64 = 0.05;

impl MismatchSpec {
    /// Distribute `totals = (labeled, unlabeled, val, test)` over classes by
    /// largest remainder: labeled counts follow `labeled_ratio`; unlabeled,
    /// validation, and test all follow `unlabeled_ratio`.
    pub fn from_ratios(
        class_names: Vec<String>,
        labeled_ratio: Vec<f64>,
        unlabeled_ratio: Vec<f64>,
        totals: (usize, usize, usize, usize),
    ) -> Result<MismatchSpec> {
        let spec = MismatchSpec {
            class_names,
            labeled_ratio: Some(labeled_ratio),
            unlabeled_ratio: Some(unlabeled_ratio),
            counts: None,
        };
        spec.validate()?;
        let labeled_ratio = spec.labeled_ratio.as_ref().unwrap();
        let unlabeled_ratio = spec.unlabeled_ratio.as_ref().unwrap();
        let counts = SplitCounts {
            labeled: apportion(labeled_ratio, totals.0),
            unlabeled: apportion(unlabeled_ratio, totals.1),
            val: apportion(unlabeled_ratio, totals.2),
            test: apportion(unlabeled_ratio, totals.3),
        };
        Ok(MismatchSpec {
            counts: Some(counts),
            ..spec
        })
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.num_classes();
        if k == 0 {
            return Err(Error::Config("mismatch spec names no classes".into()));
        }
        if self.counts.is_none() && (self.labeled_ratio.is_none() || self.unlabeled_ratio.is_none())
        {
            return Err(Error::Config(
                "mismatch spec needs explicit counts or both ratio vectors".into(),
            ));
        }
        for (name, ratio) in [
            ("labeled_ratio", &self.labeled_ratio),
            ("unlabeled_ratio", &self.unlabeled_ratio),
        ] {
            if let Some(r) = ratio {
                if r.len() != k {
                    return Err(Error::Config(format!(
                        "{name} lists {} classes, expected {k}",
                        r.len()
                    )));
                }
                if r.iter().any(|&v| !v.is_finite() || v < 0.0) || r.iter().sum::<f64>() <= 0.0 {
                    return Err(Error::Config(format!(
                        "{name} must be nonnegative with a positive sum: {r:?}"
                    )));
                }
            }
        }
        if let Some(counts) = &self.counts {
            counts.check_len(k)?;
            if let Some(r) = &self.labeled_ratio {
                check_ratio_consistency("labeled", &counts.labeled, r)?;
            }
            if let Some(r) = &self.unlabeled_ratio {
                check_ratio_consistency("unlabeled", &counts.unlabeled, r)?;
                check_ratio_consistency("val", &counts.val, r)?;
                check_ratio_consistency("test", &counts.test, r)?;
            }
        }
        Ok(())
    }

    /// The per-class counts this spec resolves to.
    pub fn resolved_counts(&self) -> Result<&SplitCounts> {
        self.counts.as_ref().ok_or_else(|| {
            Error::Config(
                "mismatch spec has no explicit counts; build them with from_ratios".into(),
            )
        })
    }
}

/// Largest-remainder apportionment of `total` over `ratio`, ties broken
/// toward the lowest class index.
fn apportion(ratio: &[f64], total: usize) -> Vec<usize> {
    let sum: f64 = ratio.iter().sum();
    let quotas: Vec<f64> = ratio.iter().map(|&r| total as f64 * r / sum).collect();
    let mut counts: Vec<usize> = quotas.iter().map(|&q| q.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..ratio.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = quotas[a] - quotas[a].floor();
        let fb = quotas[b] - quotas[b].floor();
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    for &c in order.iter().take(total - assigned) {
        counts[c] += 1;
    }
    counts
}

fn check_ratio_consistency(split: &str, counts: &[usize], ratio: &[f64]) -> Result<()> {
    let count_total: usize = counts.iter().sum();
    if count_total == 0 {
        return Ok(());
    }
    let ratio_total: f64 = ratio.iter().sum();
    for (c, (&n, &r)) in counts.iter().zip(ratio).enumerate() {
        let realized = n as f64 / count_total as f64;
        let intended = r / ratio_total;
        if (realized - intended).abs() > RATIO_TOLERANCE {
            return Err(Error::Config(format!(
                "{split} counts disagree with the stated ratio at class {c}: \
                 realized proportion {realized:.4}, intended {intended:.4}"
            )));
        }
    }
    Ok(())
}

/// The realized mismatch splits: pool indices, per-class counts, and the
/// per-class probability that a sample is labeled.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MismatchSplits {
    pub labeled: Vec<usize>,
    pub unlabeled: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
    pub counts: SplitCounts,
    /// `gamma[k]` = labeled_k / (labeled_k + unlabeled_k) over the training
    /// pools.
    pub gamma: Vec<f64>,
}

/// Draw the four mismatch splits from a fully labeled uni-label pool.
///
/// The pool is shuffled once on the `sampling` stream; each class then fills
/// its labeled, unlabeled, validation, and test quotas in that order from
/// its own shuffled queue, so splits are disjoint by construction.
pub fn build_mismatch(pool: &Dataset, spec: &MismatchSpec, seed: u64) -> Result<MismatchSplits> {
    spec.validate()?;
    let counts = spec.resolved_counts()?.clone();
    if pool.kind() != TaskKind::UniLabel {
        return Err(Error::Config(
            "mismatch construction expects a uni-label pool".into(),
        ));
    }
    if pool.num_labels() != spec.num_classes() {
        return Err(Error::Config(format!(
            "pool has {} classes, spec names {}",
            pool.num_labels(),
            spec.num_classes()
        )));
    }
    if pool.labeled_indices().len() != pool.len() {
        return Err(Error::Config(
            "mismatch construction needs a fully labeled pool".into(),
        ));
    }

    let mut rng = StreamRng::new(seed, "sampling");
    let order = rng.permutation(pool.len());
    let mut queues: Vec<Vec<usize>> = vec![Vec::new(); spec.num_classes()];
    for &i in &order {
        let class = pool
            .class_of(i)
            .ok_or_else(|| Error::Config(format!("sample {i} has no class assignment")))?;
        queues[class].push(i);
    }
    // Queues are popped from the back; reverse so draws follow shuffle order.
    for q in &mut queues {
        q.reverse();
    }

    let mut splits = MismatchSplits {
        labeled: Vec::new(),
        unlabeled: Vec::new(),
        val: Vec::new(),
        test: Vec::new(),
        counts: counts.clone(),
        gamma: Vec::new(),
    };
    let plan: [(&'static str, &[usize]); 4] = [
        ("labeled", &counts.labeled),
        ("unlabeled", &counts.unlabeled),
        ("val", &counts.val),
        ("test", &counts.test),
    ];
    for (split_name, per_class) in plan {
        for (c, &need) in per_class.iter().enumerate() {
            let queue = &mut queues[c];
            if queue.len() < need {
                return Err(Error::InsufficientClassSamples {
                    class: spec.class_names[c].clone(),
                    split: match split_name {
                        "labeled" => "labeled",
                        "unlabeled" => "unlabeled",
                        "val" => "val",
                        _ => "test",
                    },
                    need,
                    have: queue.len(),
                });
            }
            let target = match split_name {
                "labeled" => &mut splits.labeled,
                "unlabeled" => &mut splits.unlabeled,
                "val" => &mut splits.val,
                _ => &mut splits.test,
            };
            for _ in 0..need {
                target.push(queue.pop().unwrap());
            }
        }
    }
    splits.gamma = counts
        .labeled
        .iter()
        .zip(&counts.unlabeled)
        .map(|(&l, &u)| {
            if l + u == 0 {
                0.0
            } else {
                l as f64 / (l + u) as f64
            }
        })
        .collect();
    Ok(splits)
}

// ---------------------------------------------------------------------------
// Augmentation
// ---------------------------------------------------------------------------

/// Augmentation strength ladder. Each level includes everything below it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AugLevel {
    /// Identity: the output is the input, bitwise, with no randomness drawn.
    None,
    /// Additive Gaussian feature noise.
    Noise,
    /// Noise plus a random global scale and shift.
    NoiseAffine,
    /// Noise, affine, plus a random monotone curve on each feature.
    NoiseAffineIntensity,
}

/// Feature-space augmentation policy.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugPolicy {
    pub level: AugLevel,
    /// Standard deviation of the additive noise.
    pub noise_sd: f64,
    /// Scale is drawn from `[1 - jitter, 1 + jitter]`, shift from
    /// `[-jitter, jitter]`.
    pub scale_jitter: f64,
    /// The monotone curve `x + c * x^3` draws `c` from `[0, strength]`.
    pub intensity_strength: f64,
}

impl Default for AugPolicy {
    fn default() -> Self {
        AugPolicy {
            level: AugLevel::Noise,
            noise_sd: 0.1,
            scale_jitter: 0.1,
            intensity_strength: 0.2,
        }
    }
}

impl AugPolicy {
    pub fn validate(&self) -> Result<()> {
        if !self.noise_sd.is_finite() || self.noise_sd < 0.0 {
            return Err(Error::InvalidHyperParam {
                name: "noise_sd",
                value: self.noise_sd,
                reason: "must be finite and nonnegative",
            });
        }
        if !(0.0..1.0).contains(&self.scale_jitter) {
            return Err(Error::InvalidHyperParam {
                name: "scale_jitter",
                value: self.scale_jitter,
                reason: "must lie in [0, 1)",
            });
        }
        if !self.intensity_strength.is_finite() || self.intensity_strength < 0.0 {
            return Err(Error::InvalidHyperParam {
                name: "intensity_strength",
                value: self.intensity_strength,
                reason: "must be finite and nonnegative",
            });
        }
        Ok(())
    }

    pub fn identity() -> Self {
        AugPolicy {
            level: AugLevel::None,
            ..AugPolicy::default()
        }
    }
}

/// The parameters of one drawn transform, shared by every slice of a bag.
struct Transform {
    noise: Vec<f64>,
    scale: f64,
    shift: f64,
    curve: f64,
}

impl Transform {
    fn draw(policy: &AugPolicy, dim: usize, rng: &mut StreamRng) -> Transform {
        let noise = if policy.level >= AugLevel::Noise {
            (0..dim).map(|_| rng.normal(0.0, policy.noise_sd)).collect()
        } else {
            vec![0.0; dim]
        };
        let (scale, shift) = if policy.level >= AugLevel::NoiseAffine {
            (
                rng.uniform(1.0 - policy.scale_jitter, 1.0 + policy.scale_jitter),
                rng.uniform(-policy.scale_jitter, policy.scale_jitter),
            )
        } else {
            (1.0, 0.0)
        };
        let curve = if policy.level >= AugLevel::NoiseAffineIntensity {
            rng.uniform(0.0, policy.intensity_strength)
        } else {
            0.0
        };
        Transform {
            noise,
            scale,
            shift,
            curve,
        }
    }

    fn apply(&self, value: f64, feature: usize) -> f64 {
        let jittered = self.scale * (value + self.noise[feature]) + self.shift;
        jittered + self.curve * jittered.powi(3)
    }
}

/// Augment one bag: a single transform is drawn and applied identically to
/// every slice, mirroring how a whole scan is transformed as one image
/// stack. Level `None` returns the input bitwise and consumes no
/// randomness. Targets are never touched — this operates on features only.
pub fn augment_bag(bag: &Tensor, policy: &AugPolicy, rng: &mut StreamRng) -> Tensor {
    if policy.level == AugLevel::None {
        return bag.clone();
    }
    let transform = Transform::draw(policy, bag.cols(), rng);
    let mut out = bag.clone();
    for r in 0..out.rows() {
        for c in 0..out.cols() {
            out[(r, c)] = transform.apply(bag[(r, c)], c);
        }
    }
    out
}

/// Augment the bags at `idx`, one independent transform per bag.
pub fn augment_bags(
    ds: &Dataset,
    idx: &[usize],
    policy: &AugPolicy,
    rng: &mut StreamRng,
) -> Vec<Tensor> {
    idx.iter()
        .map(|&i| augment_bag(ds.bag(i), policy, rng))
        .collect()
}

// ---------------------------------------------------------------------------
// CSV interchange
// ---------------------------------------------------------------------------

/// Column layout of a dataset CSV file.
///
/// The header must match exactly: an optional bag-id column first, then the
/// feature columns, then the label columns. Label cells are `0`, `1`, or
/// empty; a row with every label cell empty is an unlabeled sample, and
/// mixing empty and filled label cells in one row is an error.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CsvSchema {
    pub kind: TaskKind,
    pub feature_cols: Vec<String>,
    pub label_cols: Vec<String>,
    /// Present for scan-bag files; rows of one bag are contiguous and share
    /// an id and identical label cells.
    pub bag_col: Option<String>,
}

impl CsvSchema {
    /// Conventional column names: features `f0..`, labels `y0..`.
    pub fn flat(kind: TaskKind, features: usize, labels: usize) -> CsvSchema {
        CsvSchema {
            kind,
            feature_cols: (0..features).map(|i| format!("f{i}")).collect(),
            label_cols: (0..labels).map(|i| format!("y{i}")).collect(),
            bag_col: None,
        }
    }

    pub fn scan_bag(kind: TaskKind, features: usize, labels: usize) -> CsvSchema {
        CsvSchema {
            bag_col: Some("bag".into()),
            ..CsvSchema::flat(kind, features, labels)
        }
    }

    fn header(&self) -> Vec<String> {
        let mut cols = Vec::new();
        if let Some(b) = &self.bag_col {
            cols.push(b.clone());
        }
        cols.extend(self.feature_cols.iter().cloned());
        cols.extend(self.label_cols.iter().cloned());
        cols
    }

    fn matches(&self, ds: &Dataset) -> Result<()> {
        if self.feature_cols.len() != ds.feature_dim()
            || self.label_cols.len() != ds.num_labels()
            || self.kind != ds.kind()
            || (self.bag_col.is_some()) != (ds.structure() == Structure::ScanBag)
        {
            return Err(Error::Config(format!(
                "schema ({} features, {} labels, bag column {}) does not fit the dataset \
                 ({} features, {} labels, {:?})",
                self.feature_cols.len(),
                self.label_cols.len(),
                self.bag_col.is_some(),
                ds.feature_dim(),
                ds.num_labels(),
                ds.structure()
            )));
        }
        Ok(())
    }
}

/// Write a dataset as CSV, one row per slice. Floats are printed in the
/// shortest form that parses back to the same bits, so an export/ingest
/// round trip is exact.
pub fn export_csv(ds: &Dataset, schema: &CsvSchema, path: &Path) -> Result<()> {
    schema.matches(ds)?;
    let mut writer = csv::Writer::from_path(path).map_err(csv_io_error)?;
    writer.write_record(schema.header()).map_err(csv_io_error)?;
    for i in 0..ds.len() {
        let bag = ds.bag(i);
        for r in 0..bag.rows() {
            let mut record: Vec<String> = Vec::new();
            if schema.bag_col.is_some() {
                record.push(i.to_string());
            }
            record.extend(bag.row(r).iter().map(|v| format!("{v}")));
            for k in 0..ds.num_labels() {
                if ds.is_labeled(i) {
                    record.push(format!("{}", ds.target_row(i)[k]));
                } else {
                    record.push(String::new());
                }
            }
            writer.write_record(&record).map_err(csv_io_error)?;
        }
    }
    writer.flush()?;
    Ok(())
}

fn csv_io_error(e: csv::Error) -> Error {
    Error::Config(format!("csv write failed: {e}"))
}

/// Read a dataset back from CSV under `schema`. Errors carry the 1-based
/// line number of the offending row.
pub fn ingest_csv(path: &Path, schema: &CsvSchema) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(false)
        .from_path(path)
        .map_err(|e| Error::Config(format!("cannot open csv {}: {e}", path.display())))?;
    let header: Vec<String> = reader
        .headers()
        .map_err(|e| Error::Config(format!("unreadable csv header: {e}")))?
        .iter()
        .map(str::to_owned)
        .collect();
    if header != schema.header() {
        return Err(Error::Config(format!(
            "csv header {header:?} does not match the schema {:?}",
            schema.header()
        )));
    }

    let d = schema.feature_cols.len();
    let k = schema.label_cols.len();
    let bag_offset = usize::from(schema.bag_col.is_some());

    struct PendingBag {
        id: String,
        rows: Vec<Vec<f64>>,
        target: Vec<f64>,
        labeled: bool,
        first_line: usize,
    }

    let mut bags: Vec<Tensor> = Vec::new();
    let mut targets: Vec<Vec<f64>> = Vec::new();
    let mut labeled: Vec<bool> = Vec::new();
    let mut seen_ids: BTreeMap<String, usize> = BTreeMap::new();
    let mut pending: Option<PendingBag> = None;

    let flush = |p: PendingBag,
                 bags: &mut Vec<Tensor>,
                 targets: &mut Vec<Vec<f64>>,
                 labeled: &mut Vec<bool>|
     -> Result<()> {
        if schema.kind == TaskKind::UniLabel && p.labeled {
            let sum: f64 = p.target.iter().sum();
            if sum != 1.0 {
                return Err(Error::MalformedRow {
                    line: p.first_line,
                    reason: format!("uni-label target is not one-hot: {:?}", p.target),
                });
            }
        }
        bags.push(Tensor::from_rows(&p.rows));
        targets.push(p.target);
        labeled.push(p.labeled);
        Ok(())
    };

    for (idx, record) in reader.records().enumerate() {
        let line = idx + 2; // 1-based, after the header line
        let record = record.map_err(|e| Error::MalformedRow {
            line,
            reason: format!("unparsable record: {e}"),
        })?;
        if record.len() != bag_offset + d + k {
            return Err(Error::MalformedRow {
                line,
                reason: format!(
                    "expected {} fields, found {}",
                    bag_offset + d + k,
                    record.len()
                ),
            });
        }
        let mut features = Vec::with_capacity(d);
        for j in 0..d {
            let cell = &record[bag_offset + j];
            let v: f64 = cell.parse().map_err(|_| Error::MalformedRow {
                line,
                reason: format!(
                    "feature column {} holds {cell:?}, not a number",
                    schema.feature_cols[j]
                ),
            })?;
            features.push(v);
        }
        let mut target = Vec::with_capacity(k);
        let mut empties = 0usize;
        for j in 0..k {
            let cell = record[bag_offset + d + j].trim();
            if cell.is_empty() {
                empties += 1;
                target.push(0.0);
                continue;
            }
            let v: f64 = cell.parse().map_err(|_| Error::MalformedRow {
                line,
                reason: format!(
                    "label column {} holds {cell:?}, not 0/1/empty",
                    schema.label_cols[j]
                ),
            })?;
            if v != 0.0 && v != 1.0 {
                return Err(Error::MalformedRow {
                    line,
                    reason: format!(
                        "label column {} holds {v}, not 0 or 1",
                        schema.label_cols[j]
                    ),
                });
            }
            target.push(v);
        }
        if empties != 0 && empties != k {
            return Err(Error::MalformedRow {
                line,
                reason: format!("row mixes labeled and empty label cells ({empties} of {k} empty)"),
            });
        }
        let is_labeled = empties == 0;

        let bag_id = if bag_offset == 1 {
            record[0].to_owned()
        } else {
            // Flat files: every row is its own bag.
            format!("row-{line}")
        };

        match pending.take() {
            Some(p) if p.id == bag_id && bag_offset == 1 => {
                if p.target != target || p.labeled != is_labeled {
                    return Err(Error::MalformedRow {
                        line,
                        reason: format!("bag {bag_id} changes labels between slices"),
                    });
                }
                let mut p = p;
                p.rows.push(features);
                pending = Some(p);
            }
            Some(p) => {
                flush(p, &mut bags, &mut targets, &mut labeled)?;
                if let Some(&first) = seen_ids.get(&bag_id) {
                    return Err(Error::MalformedRow {
                        line,
                        reason: format!(
                            "bag {bag_id} reappears after line {first}; bag rows must be contiguous"
                        ),
                    });
                }
                seen_ids.insert(bag_id.clone(), line);
                pending = Some(PendingBag {
                    id: bag_id,
                    rows: vec![features],
                    target,
                    labeled: is_labeled,
                    first_line: line,
                });
            }
            None => {
                seen_ids.insert(bag_id.clone(), line);
                pending = Some(PendingBag {
                    id: bag_id,
                    rows: vec![features],
                    target,
                    labeled: is_labeled,
                    first_line: line,
                });
            }
        }
    }
    if let Some(p) = pending.take() {
        flush(p, &mut bags, &mut targets, &mut labeled)?;
    }
    if bags.is_empty() {
        return Err(Error::Config("csv file holds no data rows".into()));
    }
    let structure = if schema.bag_col.is_some() {
        Structure::ScanBag
    } else {
        Structure::Flat
    };
    Dataset::new(
        schema.kind,
        structure,
        bags,
        Tensor::from_rows(&targets),
        labeled,
    )
}

// ---------------------------------------------------------------------------
// Manifests
// ---------------------------------------------------------------------------

/// Everything needed to regenerate a synthetic dataset bitwise.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenManifest {
    pub seed: u64,
    pub n: usize,
    pub k: usize,
    pub kind: TaskKind,
    pub structure: Structure,
    pub geometry: Geometry,
}

impl GenManifest {
    pub fn generate(&self) -> Result<Dataset> {
        gen_synthetic(
            self.seed,
            self.n,
            self.k,
            self.kind,
            self.structure,
            &self.geometry,
        )
    }
}

/// Record of one annotation-simulation run: the plan, the seed, and the
/// exact membership of every split, for replay without re-sampling.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleManifest {
    pub seed: u64,
    pub plan: BudgetPlan,
    pub splits: Vec<BudgetSplit>,
}

/// Record of one mismatch construction.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MismatchManifest {
    pub seed: u64,
    pub spec: MismatchSpec,
    pub splits: MismatchSplits,
}
