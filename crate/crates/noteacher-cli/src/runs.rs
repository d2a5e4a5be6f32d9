//! Materializing datasets, naming runs, and reading/writing run artifacts.

use std::io::BufRead;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use noteacher::data::{export_csv, gen_synthetic, ingest_csv, CsvSchema, Dataset, Structure};
use noteacher::error::{Error, Result};
use noteacher::losses::TaskKind;
use noteacher::metrics::MetricsReport;
use noteacher::trainer::{
    evaluate_model, history_csv, write_atomic, BestSnapshot, Method, TrainConfig, TrainedRun,
};

use crate::config::{DataSource, ExperimentConfig};

/// The splits a seed's experiment trains against, before budget/mismatch
/// subdivision.
pub struct DatasetBundle {
    pub pool: Dataset,
    pub test: Option<Dataset>,
}

/// Build the pool (and held-out test set, when configured) for one seed.
pub fn materialize(config: &ExperimentConfig, base: &Path, seed: u64) -> Result<DatasetBundle> {
    match config.dataset.source {
        DataSource::Generate => {
            let n = config.dataset.n.expect("validated");
            let k = config.dataset.classes.expect("validated");
            let test_n = config.dataset.test_n.unwrap_or(0);
            let all = gen_synthetic(
                seed,
                n + test_n,
                k,
                config.kind(),
                config.structure(),
                &config.geometry(),
            )?;
            let idx: Vec<usize> = (0..n + test_n).collect();
            let pool = all.subset(&idx[..n])?;
            let test = if test_n > 0 {
                Some(all.subset(&idx[n..])?)
            } else {
                None
            };
            Ok(DatasetBundle { pool, test })
        }
        DataSource::Csv => {
            let path = config.resolve(base, config.dataset.path.as_ref().expect("validated"));
            let pool = ingest_with_inferred_schema(&path, config.kind())?;
            let test = match &config.dataset.test_path {
                Some(p) => Some(ingest_with_inferred_schema(
                    &config.resolve(base, p),
                    config.kind(),
                )?),
                None => None,
            };
            Ok(DatasetBundle { pool, test })
        }
    }
}

/// Read a CSV's header to recover its schema: a leading `bag` column marks
/// scan-bags, then `f*` feature columns followed by `y*` label columns.
pub fn ingest_with_inferred_schema(path: &Path, kind: TaskKind) -> Result<Dataset> {
    let file = std::fs::File::open(path)
        .map_err(|e| Error::Config(format!("cannot open csv {}: {e}", path.display())))?;
    let mut header = String::new();
    std::io::BufReader::new(file)
        .read_line(&mut header)
        .map_err(|e| Error::Config(format!("unreadable csv header: {e}")))?;
    let cols: Vec<&str> = header.trim_end().split(',').collect();
    let has_bag = cols.first() == Some(&"bag");
    let body = if has_bag { &cols[1..] } else { &cols[..] };
    let features = body.iter().take_while(|c| c.starts_with('f')).count();
    let labels = body.len() - features;
    if features == 0 || labels == 0 {
        return Err(Error::Config(format!(
            "csv header of {} has no recognizable f*/y* columns",
            path.display()
        )));
    }
    let schema = if has_bag {
        CsvSchema::scan_bag(kind, features, labels)
    } else {
        CsvSchema::flat(kind, features, labels)
    };
    ingest_csv(path, &schema)
}

/// Schema matching a dataset's shape, for exports.
pub fn schema_for(ds: &Dataset) -> CsvSchema {
    match ds.structure() {
        Structure::Flat => CsvSchema::flat(ds.kind(), ds.feature_dim(), ds.num_labels()),
        Structure::ScanBag => CsvSchema::scan_bag(ds.kind(), ds.feature_dim(), ds.num_labels()),
    }
}

/// Which split construction a run trained under.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Scope {
    Budget(usize),
    Mismatch,
}

impl Scope {
    pub fn tag(&self) -> String {
        match self {
            Scope::Budget(b) => format!("b{b}"),
            Scope::Mismatch => "mm".into(),
        }
    }
}

pub fn run_id(method: Method, scope: &Scope, seed: u64) -> String {
    format!("{}_{}_s{}", method.name(), scope.tag(), seed)
}

pub fn run_dir(out: &Path, id: &str) -> PathBuf {
    out.join("runs").join(id)
}

/// `run.json`: everything needed to re-evaluate or aggregate a run without
/// reloading its checkpoints.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunSummary {
    pub id: String,
    pub scope: Scope,
    pub seed: u64,
    pub config: TrainConfig,
    pub best_iter: u64,
    pub best_score: f64,
    pub best_network: usize,
    pub iters: u64,
    pub stopped_early: bool,
}

/// `metrics.json`: the best model's full report on the named split.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunMetrics {
    pub split: String,
    pub report: MetricsReport,
}

/// Persist one completed run: history CSV, every checkpoint, the best
/// snapshot, a summary, and the final metrics report.
pub fn write_run(
    dir: &Path,
    scope: &Scope,
    seed: u64,
    run: &TrainedRun,
    eval_split: &Dataset,
    split_name: &str,
) -> Result<RunMetrics> {
    std::fs::create_dir_all(dir.join("checkpoints"))?;
    write_atomic(
        &dir.join("history.csv"),
        history_csv(&run.history).as_bytes(),
    )?;
    for cp in &run.checkpoints {
        cp.save(
            &dir.join("checkpoints")
                .join(format!("ckpt_{:06}.json", cp.iter)),
        )?;
    }
    write_json(&dir.join("best.json"), &run.best)?;
    let id = dir
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let summary = RunSummary {
        id,
        scope: scope.clone(),
        seed,
        config: run.config.clone(),
        best_iter: run.best.iter,
        best_score: run.best.score,
        best_network: run.best.network,
        iters: run.iters,
        stopped_early: run.stopped_early,
    };
    write_json(&dir.join("run.json"), &summary)?;
    let metrics = RunMetrics {
        split: split_name.to_owned(),
        report: evaluate_model(run.best.best_model(), eval_split, run.config.binarize_tau)?,
    };
    write_json(&dir.join("metrics.json"), &metrics)?;
    Ok(metrics)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)
        .map_err(|e| Error::Config(format!("cannot serialize {}: {e}", path.display())))?;
    bytes.push(b'\n');
    write_atomic(path, &bytes)
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let bytes = std::fs::read(path)?;
    serde_json::from_slice(&bytes)
        .map_err(|e| Error::Config(format!("cannot parse {}: {e}", path.display())))
}

pub fn read_summary(out: &Path, id: &str) -> Result<RunSummary> {
    read_json(&run_dir(out, id).join("run.json"))
}

pub fn read_best(out: &Path, id: &str) -> Result<BestSnapshot> {
    read_json(&run_dir(out, id).join("best.json"))
}

/// Export a dataset plus its generation record.
pub fn export_dataset(ds: &Dataset, dir: &Path, stem: &str) -> Result<PathBuf> {
    std::fs::create_dir_all(dir)?;
    let path = dir.join(format!("{stem}.csv"));
    export_csv(ds, &schema_for(ds), &path)?;
    Ok(path)
}
