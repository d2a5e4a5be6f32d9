//! The training loop shared by every method: minibatch composition,
//! optimization, moving-average copies, plateau learning-rate schedule,
//! early stopping, validation instrumentation, and bit-exact
//! checkpoint/resume.
//!
//! Every run maintains exactly two parameter sets, whose roles depend on the
//! method: the paired-consistency methods train both networks by gradient;
//! the mean-teacher baseline trains the first and moves the second only by
//! exponential averaging; the single-model baselines train the first and
//! keep the second as a moving-average copy so model selection can pick
//! whichever validates better. One history schema therefore fits all
//! methods: two validation scores and one disagreement count per event.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::consensus::ConsensusWeights;
use crate::data::{augment_bag, AugPolicy, Dataset, Structure};
use crate::error::{Error, Result};
use crate::losses::{
    cross_entropy, harden, kl_divergence, mean_teacher_loss, not_loss, notga_loss,
    pseudo_label_loss, vat_direction, PairedOutputs, TaskKind,
};
use crate::metrics::{
    disagreement_count, full_report, mean_defined, per_label_auroc, MetricsReport,
};
use crate::models::{ema_update, output_probs, Activation, Mlp, MlpNodes};
use crate::rng::StreamRng;
use crate::tensor::{NodeId, Tape, Tensor};

/// Minimum increase in mean validation score that counts as an improvement
/// for the patience counters.
pub const IMPROVEMENT_EPS: f64 = 1e-5;

/// Version stamp written into checkpoints; loading rejects other versions.
pub const CHECKPOINT_VERSION: &str = env!("CARGO_PKG_VERSION");

/// Training method.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Method {
    /// Supervised baseline: labeled cross-entropy only.
    #[serde(rename = "SUP")]
    Sup,
    /// Pseudo-labeling: self-training on hardened predictions.
    #[serde(rename = "PSU")]
    Psu,
    /// Virtual adversarial training: smoothness under worst-case input
    /// perturbations.
    #[serde(rename = "VAT")]
    Vat,
    /// Mean teacher: consistency with an exponentially averaged copy.
    #[serde(rename = "MT")]
    Mt,
    /// Paired networks with consensus-derived loss weights.
    #[serde(rename = "NoT")]
    Not,
    /// The uni-label variant that reweights unlabeled guesses by how
    /// over-represented each class is among labeled data.
    #[serde(rename = "NoT-GA")]
    NotGa,
}

impl Method {
    /// Both parameter sets receive gradient updates.
    fn trains_both(self) -> bool {
        matches!(self, Method::Not | Method::NotGa)
    }

    /// The second parameter set is an exponential moving average of the
    /// first.
    fn keeps_ema_copy(self) -> bool {
        !self.trains_both()
    }

    /// The method reads unlabeled rows at all.
    fn uses_unlabeled(self) -> bool {
        !matches!(self, Method::Sup)
    }

    pub fn name(self) -> &'static str {
        match self {
            Method::Sup => "SUP",
            Method::Psu => "PSU",
            Method::Vat => "VAT",
            Method::Mt => "MT",
            Method::Not => "NoT",
            Method::NotGa => "NoT-GA",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Method> {
        match s {
            "SUP" => Ok(Method::Sup),
            "PSU" => Ok(Method::Psu),
            "VAT" => Ok(Method::Vat),
            "MT" => Ok(Method::Mt),
            "NoT" => Ok(Method::Not),
            "NoT-GA" => Ok(Method::NotGa),
            other => Err(Error::Config(format!(
                "unknown method {other:?}; expected SUP, PSU, VAT, MT, NoT, or NoT-GA"
            ))),
        }
    }
}

/// The three variances of the latent-consensus model, from which the paired
/// loss weights follow in closed form.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GraphHyperParams {
    pub var_net1: f64,
    pub var_net2: f64,
    pub var_label: f64,
}

impl Default for GraphHyperParams {
    fn default() -> Self {
        // Equal quarter variances: label weights 2/3, cross weights 2/3 and 1.
        GraphHyperParams {
            var_net1: 0.25,
            var_net2: 0.25,
            var_label: 0.25,
        }
    }
}

impl GraphHyperParams {
    pub fn weights(&self) -> Result<ConsensusWeights> {
        ConsensusWeights::from_variances(self.var_net1, self.var_net2, self.var_label)
    }
}

/// Complete description of one training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub method: Method,
    /// Labeled samples per batch.
    pub n_labeled: usize,
    /// Unlabeled samples per batch, drawn with replacement.
    pub n_unlabeled: usize,
    pub lr: f64,
    /// Decoupled weight decay.
    pub weight_decay: f64,
    pub adam_betas: (f64, f64),
    pub adam_eps: f64,
    /// Decay of every moving-average copy (teacher or selection copy).
    pub ema_decay: f64,
    /// Weight of the consistency / pseudo-label / adversarial-smoothness
    /// term in the baselines.
    pub lambda_cons: f64,
    /// Radius of the adversarial perturbation.
    pub vat_epsilon: f64,
    /// Finite-difference scale inside the adversarial power iteration.
    pub vat_xi: f64,
    pub vat_power_iters: usize,
    pub graph: GraphHyperParams,
    /// Per-class labeled-given-class probabilities; required by `NoT-GA`.
    pub gamma: Option<Vec<f64>>,
    pub max_epochs: usize,
    pub early_stop_patience: usize,
    pub reduce_lr_patience: usize,
    pub lr_reduce_factor: f64,
    /// Validate (and checkpoint) every this many iterations.
    pub checkpoint_interval_iters: usize,
    /// Threshold for binarized predictions and disagreement counting.
    pub binarize_tau: f64,
    /// Hidden-layer widths of both networks.
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub augment: AugPolicy,
    pub seed: u64,
}

impl TrainConfig {
    /// A reasonable starting point for desk-scale experiments; callers
    /// override what they study.
    pub fn baseline(method: Method, seed: u64) -> TrainConfig {
        TrainConfig {
            method,
            n_labeled: 16,
            n_unlabeled: 16,
            lr: 1e-3,
            weight_decay: 1e-5,
            adam_betas: (0.9, 0.999),
            adam_eps: 1e-8,
            ema_decay: 0.95,
            lambda_cons: 1.0,
            vat_epsilon: 1.0,
            vat_xi: 1e-6,
            vat_power_iters: 1,
            graph: GraphHyperParams::default(),
            gamma: None,
            max_epochs: 50,
            early_stop_patience: 10,
            reduce_lr_patience: 5,
            lr_reduce_factor: 0.1,
            checkpoint_interval_iters: 10,
            binarize_tau: 0.5,
            hidden: vec![16],
            activation: Activation::Relu,
            augment: AugPolicy::default(),
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_labeled == 0 {
            return Err(Error::InvalidHyperParam {
                name: "n_labeled",
                value: 0.0,
                reason: "every batch needs at least one labeled sample",
            });
        }
        for (name, v, lo_open) in [
            ("lr", self.lr, true),
            ("weight_decay", self.weight_decay, false),
            ("lambda_cons", self.lambda_cons, false),
        ] {
            if !v.is_finite() || v < 0.0 || (lo_open && v == 0.0) {
                return Err(Error::InvalidHyperParam {
                    name,
                    value: v,
                    reason: "must be finite and positive",
                });
            }
        }
        for (name, b) in [("beta1", self.adam_betas.0), ("beta2", self.adam_betas.1)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::InvalidHyperParam {
                    name,
                    value: b,
                    reason: "must lie in [0, 1)",
                });
            }
        }
        if !(self.adam_eps > 0.0) || !self.adam_eps.is_finite() {
            return Err(Error::InvalidHyperParam {
                name: "adam_eps",
                value: self.adam_eps,
                reason: "must be finite and positive",
            });
        }
        if !(0.0..1.0).contains(&self.ema_decay) {
            return Err(Error::InvalidHyperParam {
                name: "ema_decay",
                value: self.ema_decay,
                reason: "must lie in [0, 1)",
            });
        }
        if self.method == Method::Vat {
            if !(self.vat_epsilon > 0.0) || !self.vat_epsilon.is_finite() {
                return Err(Error::InvalidHyperParam {
                    name: "vat_epsilon",
                    value: self.vat_epsilon,
                    reason: "must be finite and positive",
                });
            }
            if !(self.vat_xi > 0.0) || !self.vat_xi.is_finite() {
                return Err(Error::InvalidHyperParam {
                    name: "vat_xi",
                    value: self.vat_xi,
                    reason: "must be finite and positive",
                });
            }
            if self.vat_power_iters == 0 {
                return Err(Error::InvalidHyperParam {
                    name: "vat_power_iters",
                    value: 0.0,
                    reason: "need at least one power iteration",
                });
            }
        }
        if self.method.trains_both() {
            self.graph.weights()?;
        }
        if self.max_epochs == 0 {
            return Err(Error::InvalidHyperParam {
                name: "max_epochs",
                value: 0.0,
                reason: "must be at least 1",
            });
        }
        if self.early_stop_patience == 0 || self.reduce_lr_patience == 0 {
            return Err(Error::InvalidHyperParam {
                name: "patience",
                value: 0.0,
                reason: "patience values must be at least 1",
            });
        }
        if !(self.lr_reduce_factor > 0.0 && self.lr_reduce_factor < 1.0) {
            return Err(Error::InvalidHyperParam {
                name: "lr_reduce_factor",
                value: self.lr_reduce_factor,
                reason: "must lie strictly between 0 and 1",
            });
        }
        if self.checkpoint_interval_iters == 0 {
            return Err(Error::InvalidHyperParam {
                name: "checkpoint_interval_iters",
                value: 0.0,
                reason: "must be at least 1",
            });
        }
        if !(self.binarize_tau > 0.0 && self.binarize_tau < 1.0) {
            return Err(Error::InvalidHyperParam {
                name: "binarize_tau",
                value: self.binarize_tau,
                reason: "must lie strictly between 0 and 1",
            });
        }
        if self.method == Method::NotGa {
            let gamma = self
                .gamma
                .as_ref()
                .ok_or_else(|| Error::Config("NoT-GA needs per-class gamma values".into()))?;
            if gamma.iter().any(|&g| !(0.0..=1.0).contains(&g)) {
                return Err(Error::Config(format!(
                    "gamma values must lie in [0, 1], got {gamma:?}"
                )));
            }
        }
        self.augment.validate()?;
        Ok(())
    }
}

/// The three splits a run consumes. The unlabeled pool is optional; when
/// present its targets are already stripped.
#[derive(Clone, Debug)]
pub struct TrainData {
    pub train_labeled: Dataset,
    pub train_unlabeled: Option<Dataset>,
    pub val: Dataset,
}

impl TrainData {
    pub fn new(
        train_labeled: Dataset,
        train_unlabeled: Option<Dataset>,
        val: Dataset,
    ) -> Result<TrainData> {
        let data = TrainData {
            train_labeled,
            train_unlabeled,
            val,
        };
        data.check()?;
        Ok(data)
    }

    fn check(&self) -> Result<()> {
        let l = &self.train_labeled;
        if l.labeled_indices().len() != l.len() {
            return Err(Error::Config(
                "the labeled training split contains unlabeled samples".into(),
            ));
        }
        if self.val.labeled_indices().len() != self.val.len() {
            return Err(Error::Config(
                "the validation split contains unlabeled samples".into(),
            ));
        }
        for (name, ds) in [("validation", &self.val)] {
            if ds.kind() != l.kind()
                || ds.num_labels() != l.num_labels()
                || ds.feature_dim() != l.feature_dim()
            {
                return Err(Error::Config(format!(
                    "the {name} split does not match the labeled split's shape"
                )));
            }
        }
        if let Some(u) = &self.train_unlabeled {
            if u.kind() != l.kind()
                || u.num_labels() != l.num_labels()
                || u.feature_dim() != l.feature_dim()
            {
                return Err(Error::Config(
                    "the unlabeled split does not match the labeled split's shape".into(),
                ));
            }
        }
        Ok(())
    }

    /// Assemble the splits of one annotation budget.
    pub fn from_budget_split(
        pool: &Dataset,
        split: &crate::data::BudgetSplit,
    ) -> Result<TrainData> {
        let unlabeled = if split.unlabeled.is_empty() {
            None
        } else {
            Some(pool.subset_without_labels(&split.unlabeled)?)
        };
        TrainData::new(
            pool.subset(&split.train)?,
            unlabeled,
            pool.subset(&split.val)?,
        )
    }

    /// Assemble the training splits of a mismatch construction; the held-out
    /// test split comes back separately.
    pub fn from_mismatch(
        pool: &Dataset,
        splits: &crate::data::MismatchSplits,
    ) -> Result<(TrainData, Dataset)> {
        let unlabeled = if splits.unlabeled.is_empty() {
            None
        } else {
            Some(pool.subset_without_labels(&splits.unlabeled)?)
        };
        let data = TrainData::new(
            pool.subset(&splits.labeled)?,
            unlabeled,
            pool.subset(&splits.val)?,
        )?;
        Ok((data, pool.subset(&splits.test)?))
    }
}

// ---------------------------------------------------------------------------
// Optimizer
// ---------------------------------------------------------------------------

/// Adam with decoupled weight decay over a fixed, ordered parameter list.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct AdamW {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
    t: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl AdamW {
    fn new(config: &TrainConfig, shapes: &[(usize, usize)]) -> AdamW {
        AdamW {
            lr: config.lr,
            beta1: config.adam_betas.0,
            beta2: config.adam_betas.1,
            eps: config.adam_eps,
            weight_decay: config.weight_decay,
            t: 0,
            m: shapes.iter().map(|&(r, c)| Tensor::zeros(r, c)).collect(),
            v: shapes.iter().map(|&(r, c)| Tensor::zeros(r, c)).collect(),
        }
    }

    fn step(&mut self, params: &mut [&mut Tensor], grads: &[Tensor]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::Config(format!(
                "optimizer tracks {} tensors, got {} params and {} grads",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            for i in 0..p.data().len() {
                let grad = g.data()[i];
                m.data_mut()[i] = self.beta1 * m.data()[i] + (1.0 - self.beta1) * grad;
                v.data_mut()[i] = self.beta2 * v.data()[i] + (1.0 - self.beta2) * grad * grad;
                let m_hat = m.data()[i] / bc1;
                let v_hat = v.data()[i] / bc2;
                let value = p.data()[i];
                p.data_mut()[i] = value
                    - self.lr * (m_hat / (v_hat.sqrt() + self.eps) + self.weight_decay * value);
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Run records
// ---------------------------------------------------------------------------

/// One validation event in the run history.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistoryRow {
    pub iter: u64,
    pub epoch: u64,
    /// Learning rate in effect for the iterations leading up to this event.
    pub lr: f64,
    /// Training loss of the most recent batch.
    pub train_loss: f64,
    /// Mean validation score of each parameter set; absent when undefined.
    pub val_auroc: [Option<f64>; 2],
    /// Validation samples on which the two sets' binarized predictions
    /// differ.
    pub disagreement: usize,
}

/// The parameters that validated best, with both sets kept so the winner is
/// recorded alongside its partner.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BestSnapshot {
    pub iter: u64,
    pub score: f64,
    /// Which parameter set won: 0 or 1.
    pub network: usize,
    pub nets: [Mlp; 2],
}

impl BestSnapshot {
    pub fn best_model(&self) -> &Mlp {
        &self.nets[self.network]
    }
}

/// Everything a completed run hands back.
#[derive(Clone, Debug)]
pub struct TrainedRun {
    pub config: TrainConfig,
    pub best: BestSnapshot,
    pub final_nets: [Mlp; 2],
    pub history: Vec<HistoryRow>,
    /// Training loss of every iteration, in order.
    pub step_losses: Vec<f64>,
    /// State captured at each validation event, resumable.
    pub checkpoints: Vec<Checkpoint>,
    pub iters: u64,
    pub stopped_early: bool,
}

/// Resumable snapshot of a run, taken at every validation event.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: String,
    pub config: TrainConfig,
    pub iter: u64,
    pub epoch: u64,
    pub nets: [Mlp; 2],
    opt: AdamW,
    batching: StreamRng,
    augmenting: StreamRng,
    epoch_order: Vec<usize>,
    epoch_pos: usize,
    best: Option<BestSnapshot>,
    stale_validations: usize,
    lr_stale_validations: usize,
    pub history: Vec<HistoryRow>,
    pub step_losses: Vec<f64>,
    stopped: bool,
}

impl Checkpoint {
    /// Serialize to a file, atomically: the content lands under a temporary
    /// name and is renamed into place, so a reader never sees a torn file.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = serde_json::to_vec(self)
            .map_err(|e| Error::CorruptCheckpoint(format!("serialization failed: {e}")))?;
        write_atomic(path, &bytes)
    }

    /// Load and verify a checkpoint. Nothing is mutated on failure.
    pub fn load(path: &Path) -> Result<Checkpoint> {
        let bytes = std::fs::read(path)?;
        let value: serde_json::Value = serde_json::from_slice(&bytes)
            .map_err(|e| Error::CorruptCheckpoint(format!("unparsable checkpoint: {e}")))?;
        let found = value
            .get("version")
            .and_then(|v| v.as_str())
            .ok_or_else(|| Error::CorruptCheckpoint("checkpoint has no version field".into()))?;
        if found != CHECKPOINT_VERSION {
            return Err(Error::CheckpointVersion {
                found: found.to_owned(),
                expected: CHECKPOINT_VERSION.to_owned(),
            });
        }
        serde_json::from_value(value)
            .map_err(|e| Error::CorruptCheckpoint(format!("malformed checkpoint: {e}")))
    }
}

/// Write `contents` to `path` through a temporary sibling plus rename.
pub fn write_atomic(path: &Path, contents: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp-write");
    std::fs::write(&tmp, contents)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

/// Serialize the history rows as CSV. Scores print in shortest-round-trip
/// form, so identical runs produce byte-identical files; undefined scores
/// leave their cell empty.
pub fn history_csv(rows: &[HistoryRow]) -> String {
    let mut out =
        String::from("iter,epoch,lr,train_loss,val_auroc_net1,val_auroc_net2,disagreement\n");
    for row in rows {
        let fmt_score = |s: Option<f64>| s.map(|v| v.to_string()).unwrap_or_default();
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            row.iter,
            row.epoch,
            row.lr,
            row.train_loss,
            fmt_score(row.val_auroc[0]),
            fmt_score(row.val_auroc[1]),
            row.disagreement
        ));
    }
    out
}

/// Parse a history CSV produced by [`history_csv`].
pub fn parse_history_csv(text: &str) -> Result<Vec<HistoryRow>> {
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if i == 0 {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 7 {
            return Err(Error::MalformedRow {
                line: i + 1,
                reason: format!("expected 7 fields, found {}", fields.len()),
            });
        }
        let bad = |what: &str| Error::MalformedRow {
            line: i + 1,
            reason: format!("unparsable {what}"),
        };
        let score = |s: &str, what: &str| -> Result<Option<f64>> {
            if s.is_empty() {
                Ok(None)
            } else {
                s.parse().map(Some).map_err(|_| bad(what))
            }
        };
        rows.push(HistoryRow {
            iter: fields[0].parse().map_err(|_| bad("iter"))?,
            epoch: fields[1].parse().map_err(|_| bad("epoch"))?,
            lr: fields[2].parse().map_err(|_| bad("lr"))?,
            train_loss: fields[3].parse().map_err(|_| bad("train_loss"))?,
            val_auroc: [
                score(fields[4], "val_auroc_net1")?,
                score(fields[5], "val_auroc_net2")?,
            ],
            disagreement: fields[6].parse().map_err(|_| bad("disagreement"))?,
        });
    }
    Ok(rows)
}

// ---------------------------------------------------------------------------
// Validation
// ---------------------------------------------------------------------------

/// One network's deterministic evaluation on a split, without augmentation.
#[derive(Clone, Debug)]
pub struct ValReport {
    pub per_label_auroc: Vec<Option<f64>>,
    pub mean_auroc: Option<f64>,
    pub probs: Tensor,
    pub binarized: Tensor,
}

/// Evaluate one parameter set on a labeled split.
pub fn validate_model(model: &Mlp, split: &Dataset, tau: f64) -> Result<ValReport> {
    if split.is_empty() {
        return Err(Error::Config("cannot validate on an empty split".into()));
    }
    let idx: Vec<usize> = (0..split.len()).collect();
    let probs = model.predict_bags(&split.bags_at(&idx), split.kind())?;
    let per_label = per_label_auroc(&probs, split.targets());
    Ok(ValReport {
        mean_auroc: mean_defined(&per_label),
        per_label_auroc: per_label,
        binarized: harden(&probs, split.kind(), tau),
        probs,
    })
}

/// Full metrics of one parameter set on a labeled split.
pub fn evaluate_model(model: &Mlp, split: &Dataset, tau: f64) -> Result<MetricsReport> {
    let idx: Vec<usize> = (0..split.len()).collect();
    let probs = model.predict_bags(&split.bags_at(&idx), split.kind())?;
    full_report(&probs, split.targets(), split.kind(), tau)
}

// ---------------------------------------------------------------------------
// The loop
// ---------------------------------------------------------------------------

struct LoopState {
    config: TrainConfig,
    nets: [Mlp; 2],
    opt: AdamW,
    batching: StreamRng,
    augmenting: StreamRng,
    iter: u64,
    epoch: u64,
    epoch_order: Vec<usize>,
    epoch_pos: usize,
    best: Option<BestSnapshot>,
    stale_validations: usize,
    lr_stale_validations: usize,
    history: Vec<HistoryRow>,
    step_losses: Vec<f64>,
    stopped: bool,
}

impl LoopState {
    fn fresh(config: &TrainConfig, kind_dims: (usize, usize)) -> Result<LoopState> {
        let (input_dim, output_dim) = kind_dims;
        let mut init1 = StreamRng::new(config.seed, "init-1");
        let net1 = Mlp::new(
            input_dim,
            &config.hidden,
            output_dim,
            config.activation,
            &mut init1,
        )?;
        let net2 = if config.method.trains_both() {
            let mut init2 = StreamRng::new(config.seed, "init-2");
            Mlp::new(
                input_dim,
                &config.hidden,
                output_dim,
                config.activation,
                &mut init2,
            )?
        } else {
            // Moving-average copies start equal to their source.
            net1.clone()
        };
        let mut shapes: Vec<(usize, usize)> =
            net1.param_tensors().iter().map(|t| t.shape()).collect();
        if config.method.trains_both() {
            shapes.extend(net2.param_tensors().iter().map(|t| t.shape()));
        }
        Ok(LoopState {
            opt: AdamW::new(config, &shapes),
            config: config.clone(),
            nets: [net1, net2],
            batching: StreamRng::new(config.seed, "batching"),
            augmenting: StreamRng::new(config.seed, "augmentation"),
            iter: 0,
            epoch: 0,
            epoch_order: Vec::new(),
            epoch_pos: 0,
            best: None,
            stale_validations: 0,
            lr_stale_validations: 0,
            history: Vec::new(),
            step_losses: Vec::new(),
            stopped: false,
        })
    }

    fn from_checkpoint(cp: Checkpoint) -> LoopState {
        LoopState {
            config: cp.config,
            nets: cp.nets,
            opt: cp.opt,
            batching: cp.batching,
            augmenting: cp.augmenting,
            iter: cp.iter,
            epoch: cp.epoch,
            epoch_order: cp.epoch_order,
            epoch_pos: cp.epoch_pos,
            best: cp.best,
            stale_validations: cp.stale_validations,
            lr_stale_validations: cp.lr_stale_validations,
            history: cp.history,
            step_losses: cp.step_losses,
            stopped: cp.stopped,
        }
    }

    fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            version: CHECKPOINT_VERSION.to_owned(),
            config: self.config.clone(),
            iter: self.iter,
            epoch: self.epoch,
            nets: self.nets.clone(),
            opt: self.opt.clone(),
            batching: self.batching.clone(),
            augmenting: self.augmenting.clone(),
            epoch_order: self.epoch_order.clone(),
            epoch_pos: self.epoch_pos,
            best: self.best.clone(),
            stale_validations: self.stale_validations,
            lr_stale_validations: self.lr_stale_validations,
            history: self.history.clone(),
            step_losses: self.step_losses.clone(),
            stopped: self.stopped,
        }
    }
}

/// Train from scratch.
pub fn train(config: &TrainConfig, data: &TrainData) -> Result<TrainedRun> {
    config.validate()?;
    check_method_against_data(config, data)?;
    let state = LoopState::fresh(
        config,
        (
            data.train_labeled.feature_dim(),
            data.train_labeled.num_labels(),
        ),
    )?;
    run_loop(state, data)
}

/// Continue a checkpointed run to completion. The checkpoint's own config
/// drives the continuation, so the result matches the uninterrupted run.
pub fn resume(checkpoint: Checkpoint, data: &TrainData) -> Result<TrainedRun> {
    if checkpoint.version != CHECKPOINT_VERSION {
        return Err(Error::CheckpointVersion {
            found: checkpoint.version,
            expected: CHECKPOINT_VERSION.to_owned(),
        });
    }
    checkpoint.config.validate()?;
    check_method_against_data(&checkpoint.config, data)?;
    run_loop(LoopState::from_checkpoint(checkpoint), data)
}

fn check_method_against_data(config: &TrainConfig, data: &TrainData) -> Result<()> {
    data.check()?;
    let kind = data.train_labeled.kind();
    if config.n_unlabeled > 0 && data.train_unlabeled.is_none() {
        return Err(Error::Config(
            "the batch asks for unlabeled samples but the unlabeled pool is empty".into(),
        ));
    }
    if config.method == Method::NotGa {
        if kind != TaskKind::UniLabel {
            return Err(Error::Config(
                "the class-adjusted method needs a uni-label task".into(),
            ));
        }
        if let Some(gamma) = &config.gamma {
            if gamma.len() != data.train_labeled.num_labels() {
                return Err(Error::Config(format!(
                    "gamma lists {} classes, the data has {}",
                    gamma.len(),
                    data.train_labeled.num_labels()
                )));
            }
        }
    }
    if config.method == Method::Vat && data.train_labeled.structure() != Structure::Flat {
        return Err(Error::Config(
            "adversarial perturbations are defined on flat features only".into(),
        ));
    }
    Ok(())
}

fn run_loop(mut state: LoopState, data: &TrainData) -> Result<TrainedRun> {
    let mut checkpoints: Vec<Checkpoint> = Vec::new();
    let labeled_n = data.train_labeled.len();
    let interval = state.config.checkpoint_interval_iters as u64;

    while !state.stopped {
        if state.epoch_pos >= state.epoch_order.len() {
            if state.epoch_order.is_empty() {
                // Either the first epoch or a resume exactly at an epoch edge.
            } else {
                state.epoch += 1;
                state.epoch_order.clear();
            }
            if state.epoch >= state.config.max_epochs as u64 {
                break;
            }
            if state.epoch_order.is_empty() {
                let mut order: Vec<usize> = (0..labeled_n).collect();
                state.batching.shuffle(&mut order);
                state.epoch_order = order;
                state.epoch_pos = 0;
            }
        }

        let end = (state.epoch_pos + state.config.n_labeled).min(state.epoch_order.len());
        let labeled_idx: Vec<usize> = state.epoch_order[state.epoch_pos..end].to_vec();
        state.epoch_pos = end;

        let unlabeled_idx: Vec<usize> = match (&data.train_unlabeled, state.config.n_unlabeled) {
            (Some(pool), n) if n > 0 && state.config.method.uses_unlabeled() => {
                (0..n).map(|_| state.batching.below(pool.len())).collect()
            }
            _ => Vec::new(),
        };

        let loss = training_step(&mut state, data, &labeled_idx, &unlabeled_idx)?;
        state.iter += 1;
        state.step_losses.push(loss);

        if state.iter.is_multiple_of(interval) {
            validation_event(&mut state, data)?;
            checkpoints.push(state.checkpoint());
        }
        if state.epoch_pos >= state.epoch_order.len() {
            state.epoch += 1;
            state.epoch_order.clear();
            state.epoch_pos = 0;
            if state.epoch >= state.config.max_epochs as u64 {
                break;
            }
        }
    }

    // A run that ends between scheduled validations still reports a final
    // score, so every run has a best snapshot.
    if !state.stopped && !state.iter.is_multiple_of(interval) && state.iter > 0 {
        validation_event(&mut state, data)?;
        checkpoints.push(state.checkpoint());
    }

    let best = state
        .best
        .clone()
        .ok_or_else(|| Error::Config("training never reached a validation event".into()))?;
    Ok(TrainedRun {
        config: state.config,
        best,
        final_nets: state.nets,
        history: state.history,
        step_losses: state.step_losses,
        checkpoints,
        iters: state.iter,
        stopped_early: state.stopped,
    })
}

fn validation_event(state: &mut LoopState, data: &TrainData) -> Result<()> {
    let tau = state.config.binarize_tau;
    let rep0 = validate_model(&state.nets[0], &data.val, tau)?;
    let rep1 = validate_model(&state.nets[1], &data.val, tau)?;
    let disagreement = disagreement_count(&rep0.probs, &rep1.probs, tau);
    let scores = [rep0.mean_auroc, rep1.mean_auroc];
    let (network, score) = match (scores[0], scores[1]) {
        (Some(a), Some(b)) if b > a => (1, b),
        (Some(a), _) => (0, a),
        (None, Some(b)) => (1, b),
        (None, None) => (0, f64::NEG_INFINITY),
    };

    state.history.push(HistoryRow {
        iter: state.iter,
        epoch: state.epoch,
        lr: state.opt.lr,
        train_loss: state.step_losses.last().copied().unwrap_or(f64::NAN),
        val_auroc: scores,
        disagreement,
    });

    let improved = match &state.best {
        None => true,
        Some(best) => score > best.score + IMPROVEMENT_EPS,
    };
    if improved {
        state.best = Some(BestSnapshot {
            iter: state.iter,
            score,
            network,
            nets: state.nets.clone(),
        });
        state.stale_validations = 0;
        state.lr_stale_validations = 0;
    } else {
        state.stale_validations += 1;
        state.lr_stale_validations += 1;
        if state.lr_stale_validations >= state.config.reduce_lr_patience {
            state.opt.lr *= state.config.lr_reduce_factor;
            state.lr_stale_validations = 0;
        }
        if state.stale_validations >= state.config.early_stop_patience {
            state.stopped = true;
        }
    }
    Ok(())
}

/// One optimizer step. Returns the batch loss.
fn training_step(
    state: &mut LoopState,
    data: &TrainData,
    labeled_idx: &[usize],
    unlabeled_idx: &[usize],
) -> Result<f64> {
    let config = &state.config;
    let kind = data.train_labeled.kind();
    let targets = data.train_labeled.targets_at(labeled_idx);
    let labeled_raw: Vec<&Tensor> = labeled_idx
        .iter()
        .map(|&i| data.train_labeled.bag(i))
        .collect();
    let unlabeled_raw: Vec<&Tensor> = match &data.train_unlabeled {
        Some(pool) => unlabeled_idx.iter().map(|&i| pool.bag(i)).collect(),
        None => Vec::new(),
    };
    let augment_all = |rng: &mut StreamRng| -> (Vec<Tensor>, Vec<Tensor>) {
        let l: Vec<Tensor> = labeled_raw
            .iter()
            .map(|b| augment_bag(b, &config.augment, rng))
            .collect();
        let u: Vec<Tensor> = unlabeled_raw
            .iter()
            .map(|b| augment_bag(b, &config.augment, rng))
            .collect();
        (l, u)
    };

    let flat_ids = |nodes: &MlpNodes| -> Vec<NodeId> {
        nodes.params.iter().flat_map(|&(w, b)| [w, b]).collect()
    };

    let mut t = Tape::new();
    let (loss_node, param_ids) = match config.method {
        Method::Sup => {
            let (view_l, _) = augment_all(&mut state.augmenting);
            let nodes = state.nets[0].enter(&mut t);
            let logits = state.nets[0].forward_bags(&mut t, &nodes, &view_l)?;
            let probs = output_probs(&mut t, logits, kind)?;
            (
                cross_entropy(&mut t, probs, &targets, kind)?,
                flat_ids(&nodes),
            )
        }
        Method::Psu => {
            let (view_l, view_u) = augment_all(&mut state.augmenting);
            let nodes = state.nets[0].enter(&mut t);
            let logits_l = state.nets[0].forward_bags(&mut t, &nodes, &view_l)?;
            let probs_l = output_probs(&mut t, logits_l, kind)?;
            let (probs_u, pseudo) = if view_u.is_empty() {
                (None, None)
            } else {
                let logits_u = state.nets[0].forward_bags(&mut t, &nodes, &view_u)?;
                let probs_u = output_probs(&mut t, logits_u, kind)?;
                // Hard targets from the same forward pass, detached.
                let pseudo = harden(t.value(probs_u), kind, config.binarize_tau);
                (Some(probs_u), Some(pseudo))
            };
            let loss = pseudo_label_loss(
                &mut t,
                probs_l,
                &targets,
                probs_u,
                pseudo.as_ref(),
                config.lambda_cons,
                kind,
            )?;
            (loss, flat_ids(&nodes))
        }
        Method::Vat => {
            let (view_l, view_u) = augment_all(&mut state.augmenting);
            // Flat structure: stack the single-row bags into matrices.
            let mut all_rows: Vec<Vec<f64>> = Vec::with_capacity(view_l.len() + view_u.len());
            for b in view_l.iter().chain(view_u.iter()) {
                all_rows.push(b.row(0).to_vec());
            }
            let x_all = Tensor::from_rows(&all_rows);
            let x_labeled = Tensor::from_rows(&all_rows[..view_l.len()]);

            let model = state.nets[0].clone();
            let p_clean = model.predict_bags(
                &view_l
                    .iter()
                    .chain(view_u.iter())
                    .cloned()
                    .collect::<Vec<_>>(),
                kind,
            )?;
            let forward =
                |t: &mut Tape, x: crate::tensor::NodeId| -> Result<crate::tensor::NodeId> {
                    let nodes = model.enter(t);
                    let logits = model.forward(t, &nodes, x)?;
                    output_probs(t, logits, kind)
                };
            let direction = vat_direction(
                forward,
                &x_all,
                &p_clean,
                kind,
                config.vat_xi,
                config.vat_power_iters,
                &mut state.augmenting,
            )?;
            let mut x_adv = x_all.clone();
            for (a, d) in x_adv.data_mut().iter_mut().zip(direction.data()) {
                *a += config.vat_epsilon * d;
            }

            let nodes = state.nets[0].enter(&mut t);
            let xl = t.leaf(x_labeled);
            let logits_l = state.nets[0].forward(&mut t, &nodes, xl)?;
            let probs_l = output_probs(&mut t, logits_l, kind)?;
            let ce = cross_entropy(&mut t, probs_l, &targets, kind)?;
            let xa = t.leaf(x_adv);
            let logits_adv = state.nets[0].forward(&mut t, &nodes, xa)?;
            let probs_adv = output_probs(&mut t, logits_adv, kind)?;
            let lds = kl_divergence(&mut t, &p_clean, probs_adv, kind)?;
            let weighted = t.mul_scalar(lds, config.lambda_cons)?;
            (t.add(ce, weighted)?, flat_ids(&nodes))
        }
        Method::Mt => {
            let (student_l, student_u) = augment_all(&mut state.augmenting);
            let (teacher_l, teacher_u) = augment_all(&mut state.augmenting);
            let teacher_probs_l = state.nets[1].predict_bags(&teacher_l, kind)?;
            let teacher_probs_u = if teacher_u.is_empty() {
                None
            } else {
                Some(state.nets[1].predict_bags(&teacher_u, kind)?)
            };
            let nodes = state.nets[0].enter(&mut t);
            let logits_l = state.nets[0].forward_bags(&mut t, &nodes, &student_l)?;
            let probs_l = output_probs(&mut t, logits_l, kind)?;
            let probs_u = if student_u.is_empty() {
                None
            } else {
                let logits_u = state.nets[0].forward_bags(&mut t, &nodes, &student_u)?;
                Some(output_probs(&mut t, logits_u, kind)?)
            };
            let loss = mean_teacher_loss(
                &mut t,
                probs_l,
                probs_u,
                &teacher_probs_l,
                teacher_probs_u.as_ref(),
                &targets,
                config.lambda_cons,
                kind,
            )?;
            (loss, flat_ids(&nodes))
        }
        Method::Not | Method::NotGa => {
            let (view1_l, view1_u) = augment_all(&mut state.augmenting);
            let (view2_l, view2_u) = augment_all(&mut state.augmenting);
            let nodes1 = state.nets[0].enter(&mut t);
            let nodes2 = state.nets[1].enter(&mut t);
            let logits1_l = state.nets[0].forward_bags(&mut t, &nodes1, &view1_l)?;
            let net1_labeled = output_probs(&mut t, logits1_l, kind)?;
            let logits2_l = state.nets[1].forward_bags(&mut t, &nodes2, &view2_l)?;
            let net2_labeled = output_probs(&mut t, logits2_l, kind)?;
            let (net1_unlabeled, net2_unlabeled) = if view1_u.is_empty() {
                (None, None)
            } else {
                let logits1_u = state.nets[0].forward_bags(&mut t, &nodes1, &view1_u)?;
                let logits2_u = state.nets[1].forward_bags(&mut t, &nodes2, &view2_u)?;
                (
                    Some(output_probs(&mut t, logits1_u, kind)?),
                    Some(output_probs(&mut t, logits2_u, kind)?),
                )
            };
            let out = PairedOutputs {
                net1_labeled,
                net2_labeled,
                net1_unlabeled,
                net2_unlabeled,
            };
            let weights = config.graph.weights()?;
            let loss = match config.method {
                Method::Not => not_loss(&mut t, &out, &targets, &weights, kind)?,
                _ => {
                    let gamma = config.gamma.as_ref().ok_or_else(|| {
                        Error::Config("NoT-GA needs per-class gamma values".into())
                    })?;
                    notga_loss(&mut t, &out, &targets, &weights, gamma)?
                }
            };
            let mut ids = flat_ids(&nodes1);
            ids.extend(flat_ids(&nodes2));
            (loss, ids)
        }
    };

    let loss_value = t.scalar_value(loss_node);
    let grads = t.backward(loss_node)?;
    let trains_both = config.method.trains_both();
    let grad_list: Vec<Tensor> = param_ids.iter().map(|&id| grads.wrt(id).clone()).collect();

    {
        let (first, second) = state.nets.split_at_mut(1);
        let mut params: Vec<&mut Tensor> = first[0].param_tensors_mut();
        if trains_both {
            params.extend(second[0].param_tensors_mut());
        }
        state.opt.step(&mut params, &grad_list)?;
    }

    // Moving-average maintenance: the teacher and the selection copies move
    // toward the trained model after every step; paired methods keep both
    // networks purely gradient-trained.
    if config.method.keeps_ema_copy() {
        let (first, second) = state.nets.split_at_mut(1);
        ema_update(&mut second[0], &first[0], config.ema_decay)?;
    }

    Ok(loss_value)
}
