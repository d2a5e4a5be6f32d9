//! The TOML experiment description: dataset source, split construction,
//! per-method training overrides, seeds, and output location. Unknown keys
//! are rejected, and every referenced file must exist when the config is
//! parsed.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::Deserialize;

use noteacher::data::{
    AugLevel, AugPolicy, BudgetPlan, Geometry, MismatchSpec, SplitCounts, Structure,
};
use noteacher::error::{Error, Result};
use noteacher::losses::TaskKind;
use noteacher::models::Activation;
use noteacher::trainer::{GraphHyperParams, Method, TrainConfig};

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// One full experiment per seed.
    pub seeds: Vec<u64>,
    /// Output root; overridden by `--out`, falling back to the
    /// `NOTEACHER_OUT` environment variable and then the working directory.
    pub out_dir: Option<PathBuf>,
    pub dataset: DatasetConfig,
    pub sampling: Option<SamplingConfig>,
    pub mismatch: Option<MismatchConfig>,
    /// Per-method training sections, keyed by method name.
    #[serde(default)]
    pub train: BTreeMap<String, TrainOverrides>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    Generate,
    Csv,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub source: DataSource,
    /// Pool size (generated datasets).
    pub n: Option<usize>,
    /// Number of labels/classes (generated datasets).
    pub classes: Option<usize>,
    pub kind: Option<TaskKind>,
    pub structure: Option<Structure>,
    /// Extra held-out test samples to generate beyond the pool.
    pub test_n: Option<usize>,
    pub geometry: Option<GeometryOverrides>,
    /// Pool CSV (csv datasets).
    pub path: Option<PathBuf>,
    /// Optional held-out test CSV.
    pub test_path: Option<PathBuf>,
}

#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeometryOverrides {
    pub feature_dim: Option<usize>,
    pub separation: Option<f64>,
    pub noise_sd: Option<f64>,
    pub prevalence: Option<f64>,
    pub label_correlation: Option<f64>,
    pub bag_slices: Option<(usize, usize)>,
    pub signal_fraction: Option<f64>,
}

impl GeometryOverrides {
    pub fn apply(&self) -> Geometry {
        let mut g = Geometry::default();
        if let Some(v) = self.feature_dim {
            g.feature_dim = v;
        }
        if let Some(v) = self.separation {
            g.separation = v;
        }
        if let Some(v) = self.noise_sd {
            g.noise_sd = v;
        }
        if let Some(v) = self.prevalence {
            g.prevalence = v;
        }
        if let Some(v) = self.label_correlation {
            g.label_correlation = v;
        }
        if let Some(v) = self.bag_slices {
            g.bag_slices = v;
        }
        if let Some(v) = self.signal_fraction {
            g.signal_fraction = v;
        }
        g
    }
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplingConfig {
    pub budgets: Vec<usize>,
    pub min_positives_per_label: Option<usize>,
    pub min_val_size: Option<usize>,
    pub val_fraction: Option<f64>,
}

impl SamplingConfig {
    pub fn plan(&self) -> BudgetPlan {
        BudgetPlan {
            budgets: self.budgets.clone(),
            min_positives_per_label: self.min_positives_per_label.unwrap_or(1),
            min_val_size: self.min_val_size.unwrap_or(5),
            val_fraction: self.val_fraction.unwrap_or(0.1),
        }
    }
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MismatchConfig {
    pub class_names: Vec<String>,
    pub labeled_ratio: Option<Vec<f64>>,
    pub unlabeled_ratio: Option<Vec<f64>>,
    /// Split totals `[labeled, unlabeled, val, test]`, apportioned by the
    /// ratios; alternative to explicit per-class counts.
    pub totals: Option<[usize; 4]>,
    pub counts: Option<CountsConfig>,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CountsConfig {
    pub labeled: Vec<usize>,
    pub unlabeled: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl MismatchConfig {
    pub fn spec(&self) -> Result<MismatchSpec> {
        if let Some(c) = &self.counts {
            let spec = MismatchSpec {
                class_names: self.class_names.clone(),
                labeled_ratio: self.labeled_ratio.clone(),
                unlabeled_ratio: self.unlabeled_ratio.clone(),
                counts: Some(SplitCounts {
                    labeled: c.labeled.clone(),
                    unlabeled: c.unlabeled.clone(),
                    val: c.val.clone(),
                    test: c.test.clone(),
                }),
            };
            spec.validate()?;
            return Ok(spec);
        }
        match (&self.labeled_ratio, &self.unlabeled_ratio, self.totals) {
            (Some(lr), Some(ur), Some([l, u, v, t])) => MismatchSpec::from_ratios(
                self.class_names.clone(),
                lr.clone(),
                ur.clone(),
                (l, u, v, t),
            ),
            _ => Err(Error::Config(
                "mismatch needs either explicit counts or both ratios plus totals".into(),
            )),
        }
    }
}

#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GraphOverrides {
    pub var_net1: Option<f64>,
    pub var_net2: Option<f64>,
    pub var_label: Option<f64>,
}

#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugOverrides {
    pub level: Option<AugLevel>,
    pub noise_sd: Option<f64>,
    pub scale_jitter: Option<f64>,
    pub intensity_strength: Option<f64>,
}

#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainOverrides {
    pub n_labeled: Option<usize>,
    pub n_unlabeled: Option<usize>,
    pub lr: Option<f64>,
    pub weight_decay: Option<f64>,
    pub adam_betas: Option<(f64, f64)>,
    pub adam_eps: Option<f64>,
    pub ema_decay: Option<f64>,
    pub lambda_cons: Option<f64>,
    pub vat_epsilon: Option<f64>,
    pub vat_xi: Option<f64>,
    pub vat_power_iters: Option<usize>,
    pub graph: Option<GraphOverrides>,
    pub gamma: Option<Vec<f64>>,
    pub max_epochs: Option<usize>,
    pub early_stop_patience: Option<usize>,
    pub reduce_lr_patience: Option<usize>,
    pub lr_reduce_factor: Option<f64>,
    pub checkpoint_interval_iters: Option<usize>,
    pub binarize_tau: Option<f64>,
    pub hidden: Option<Vec<usize>>,
    pub activation: Option<Activation>,
    pub augment: Option<AugOverrides>,
}

impl TrainOverrides {
    /// Baseline config for `method` and `seed` with every present override
    /// applied. `auto_gamma` supplies per-class labeled probabilities from a
    /// mismatch construction when the section does not pin its own.
    pub fn build(&self, method: Method, seed: u64, auto_gamma: Option<&[f64]>) -> TrainConfig {
        let mut c = TrainConfig::baseline(method, seed);
        if let Some(v) = self.n_labeled {
            c.n_labeled = v;
        }
        if let Some(v) = self.n_unlabeled {
            c.n_unlabeled = v;
        }
        if let Some(v) = self.lr {
            c.lr = v;
        }
        if let Some(v) = self.weight_decay {
            c.weight_decay = v;
        }
        if let Some(v) = self.adam_betas {
            c.adam_betas = v;
        }
        if let Some(v) = self.adam_eps {
            c.adam_eps = v;
        }
        if let Some(v) = self.ema_decay {
            c.ema_decay = v;
        }
        if let Some(v) = self.lambda_cons {
            c.lambda_cons = v;
        }
        if let Some(v) = self.vat_epsilon {
            c.vat_epsilon = v;
        }
        if let Some(v) = self.vat_xi {
            c.vat_xi = v;
        }
        if let Some(v) = self.vat_power_iters {
            c.vat_power_iters = v;
        }
        if let Some(g) = &self.graph {
            let mut graph = GraphHyperParams::default();
            if let Some(v) = g.var_net1 {
                graph.var_net1 = v;
            }
            if let Some(v) = g.var_net2 {
                graph.var_net2 = v;
            }
            if let Some(v) = g.var_label {
                graph.var_label = v;
            }
            c.graph = graph;
        }
        c.gamma = self
            .gamma
            .clone()
            .or_else(|| auto_gamma.map(|g| g.to_vec()));
        if let Some(v) = self.max_epochs {
            c.max_epochs = v;
        }
        if let Some(v) = self.early_stop_patience {
            c.early_stop_patience = v;
        }
        if let Some(v) = self.reduce_lr_patience {
            c.reduce_lr_patience = v;
        }
        if let Some(v) = self.lr_reduce_factor {
            c.lr_reduce_factor = v;
        }
        if let Some(v) = self.checkpoint_interval_iters {
            c.checkpoint_interval_iters = v;
        }
        if let Some(v) = self.binarize_tau {
            c.binarize_tau = v;
        }
        if let Some(v) = &self.hidden {
            c.hidden = v.clone();
        }
        if let Some(v) = self.activation {
            c.activation = v;
        }
        if let Some(a) = &self.augment {
            let mut policy = AugPolicy::default();
            if let Some(v) = a.level {
                policy.level = v;
            }
            if let Some(v) = a.noise_sd {
                policy.noise_sd = v;
            }
            if let Some(v) = a.scale_jitter {
                policy.scale_jitter = v;
            }
            if let Some(v) = a.intensity_strength {
                policy.intensity_strength = v;
            }
            c.augment = policy;
        }
        c
    }
}

impl ExperimentConfig {
    /// Parse and validate a config file. Syntax problems, unknown keys,
    /// missing referenced files, and inconsistent sections all fail here,
    /// before any command does work.
    pub fn load(path: &Path) -> Result<ExperimentConfig> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        let config: ExperimentConfig =
            toml::from_str(&text).map_err(|e| Error::Config(format!("config parse error: {e}")))?;
        config.validate(path.parent().unwrap_or(Path::new(".")))?;
        Ok(config)
    }

    /// `base` resolves relative CSV paths against the config file location.
    pub fn validate(&self, base: &Path) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::Config("seeds must list at least one seed".into()));
        }
        let d = &self.dataset;
        match d.source {
            DataSource::Generate => {
                if d.n.is_none() || d.classes.is_none() {
                    return Err(Error::Config(
                        "generated datasets need both n and classes".into(),
                    ));
                }
                if d.classes == Some(0) {
                    return Err(Error::Config("classes must be at least 1".into()));
                }
                if d.n == Some(0) {
                    return Err(Error::Config("n must be at least 1".into()));
                }
                if d.path.is_some() || d.test_path.is_some() {
                    return Err(Error::Config("generated datasets take no csv paths".into()));
                }
            }
            DataSource::Csv => {
                let path = d
                    .path
                    .as_ref()
                    .ok_or_else(|| Error::Config("csv datasets need a path".into()))?;
                for p in [Some(path), d.test_path.as_ref()].into_iter().flatten() {
                    if !self.resolve(base, p).is_file() {
                        return Err(Error::Config(format!(
                            "referenced file does not exist: {}",
                            p.display()
                        )));
                    }
                }
                if d.n.is_some() || d.classes.is_some() || d.test_n.is_some() {
                    return Err(Error::Config(
                        "csv datasets take no generation sizes; the file decides".into(),
                    ));
                }
            }
        }
        if self.sampling.is_some() && self.mismatch.is_some() {
            return Err(Error::Config(
                "sampling and mismatch sections are mutually exclusive".into(),
            ));
        }
        if let Some(s) = &self.sampling {
            s.plan().validate()?;
        }
        if let Some(m) = &self.mismatch {
            m.spec()?;
            if d.kind.unwrap_or(TaskKind::MultiLabel) != TaskKind::UniLabel {
                return Err(Error::Config(
                    "mismatch construction needs kind = \"unilabel\"".into(),
                ));
            }
        }
        for (name, overrides) in &self.train {
            let method: Method = name.parse()?;
            // Fail before any training when the class-adjusted method can
            // never obtain gamma: no explicit values and no mismatch
            // construction to derive them from.
            if method == Method::NotGa && overrides.gamma.is_none() && self.mismatch.is_none() {
                return Err(Error::Config(
                    "NoT-GA needs explicit gamma values outside mismatch mode".into(),
                ));
            }
            // Everything except gamma/seed can be checked right away.
            let probe = overrides.build(method, 0, Some(&[0.5; 4]));
            probe.validate()?;
        }
        Ok(())
    }

    pub fn resolve(&self, base: &Path, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_owned()
        } else {
            base.join(p)
        }
    }

    pub fn methods(&self) -> Result<Vec<(Method, &TrainOverrides)>> {
        self.train
            .iter()
            .map(|(name, o)| Ok((name.parse::<Method>()?, o)))
            .collect()
    }

    pub fn kind(&self) -> TaskKind {
        self.dataset.kind.unwrap_or(TaskKind::MultiLabel)
    }

    pub fn structure(&self) -> Structure {
        self.dataset.structure.unwrap_or(Structure::Flat)
    }

    pub fn geometry(&self) -> Geometry {
        self.dataset.geometry.clone().unwrap_or_default().apply()
    }
}
