//! The seven subcommands. Each takes the parsed experiment config, the
//! directory its relative paths resolve against, the output root, and the
//! quiet flag; each writes its artifacts atomically and is idempotent for
//! identical inputs.

use std::collections::BTreeMap;
use std::path::Path;

use noteacher::data::{
    build_mismatch, realistic_sample, Dataset, GenManifest, MismatchManifest, SampleManifest,
};
use noteacher::error::{Error, Result};
use noteacher::trainer::{evaluate_model, parse_history_csv, train, write_atomic, TrainData};

use crate::config::ExperimentConfig;
use crate::runs::{
    self, export_dataset, materialize, read_best, read_summary, run_dir, run_id, write_json,
    write_run, RunMetrics, Scope,
};
use crate::svg::{dual_axis_chart, Series, PALETTE};

fn say(quiet: bool, msg: &str) {
    if !quiet {
        println!("{msg}");
    }
}

fn seeds_of(config: &ExperimentConfig, seed_override: Option<u64>) -> Vec<u64> {
    match seed_override {
        Some(s) => vec![s],
        None => config.seeds.clone(),
    }
}

/// Scopes this config trains under: one per budget, or the single mismatch
/// construction.
fn scopes_of(config: &ExperimentConfig) -> Result<Vec<Scope>> {
    if let Some(s) = &config.sampling {
        return Ok(s.budgets.iter().map(|&b| Scope::Budget(b)).collect());
    }
    if config.mismatch.is_some() {
        return Ok(vec![Scope::Mismatch]);
    }
    Err(Error::Config(
        "this command needs a sampling or mismatch section".into(),
    ))
}

pub fn cmd_gen(
    config: &ExperimentConfig,
    base: &Path,
    out: &Path,
    seed_override: Option<u64>,
    quiet: bool,
) -> Result<()> {
    if config.dataset.n.is_none() {
        return Err(Error::Config(
            "gen needs a generated dataset (source = \"generate\")".into(),
        ));
    }
    for seed in seeds_of(config, seed_override) {
        let bundle = materialize(config, base, seed)?;
        let dir = out.join("data").join(format!("seed_{seed}"));
        let pool_path = export_dataset(&bundle.pool, &dir, "dataset")?;
        if let Some(test) = &bundle.test {
            export_dataset(test, &dir, "test")?;
        }
        let manifest = GenManifest {
            seed,
            n: config.dataset.n.expect("validated") + config.dataset.test_n.unwrap_or(0),
            k: config.dataset.classes.expect("validated"),
            kind: config.kind(),
            structure: config.structure(),
            geometry: config.geometry(),
        };
        write_json(&dir.join("gen_manifest.json"), &manifest)?;
        say(
            quiet,
            &format!(
                "gen seed {seed}: {} samples -> {}",
                bundle.pool.len(),
                pool_path.display()
            ),
        );
    }
    Ok(())
}

pub fn cmd_sample(
    config: &ExperimentConfig,
    base: &Path,
    out: &Path,
    seed_override: Option<u64>,
    quiet: bool,
) -> Result<()> {
    let plan = config
        .sampling
        .as_ref()
        .ok_or_else(|| Error::Config("sample needs a sampling section".into()))?
        .plan();
    let dir = out.join("samples");
    std::fs::create_dir_all(&dir)?;
    for seed in seeds_of(config, seed_override) {
        let bundle = materialize(config, base, seed)?;
        let splits = realistic_sample(&bundle.pool, &plan, seed)?;
        let manifest = SampleManifest {
            seed,
            plan: plan.clone(),
            splits,
        };
        write_json(&dir.join(format!("seed_{seed}.json")), &manifest)?;
        for split in &manifest.splits {
            say(
                quiet,
                &format!(
                    "sample seed {seed} budget {}: {} labeled ({} train / {} val), {} unlabeled",
                    split.budget,
                    split.final_labeled,
                    split.train.len(),
                    split.val.len(),
                    split.unlabeled.len()
                ),
            );
        }
    }
    Ok(())
}

pub fn cmd_mismatch(
    config: &ExperimentConfig,
    base: &Path,
    out: &Path,
    seed_override: Option<u64>,
    quiet: bool,
) -> Result<()> {
    let spec = config
        .mismatch
        .as_ref()
        .ok_or_else(|| Error::Config("mismatch needs a mismatch section".into()))?
        .spec()?;
    let dir = out.join("mismatch");
    std::fs::create_dir_all(&dir)?;
    for seed in seeds_of(config, seed_override) {
        let bundle = materialize(config, base, seed)?;
        let splits = build_mismatch(&bundle.pool, &spec, seed)?;
        say(
            quiet,
            &format!(
                "mismatch seed {seed}: labeled {:?}, unlabeled {:?}, gamma {:?}",
                splits.counts.labeled, splits.counts.unlabeled, splits.gamma
            ),
        );
        let manifest = MismatchManifest {
            seed,
            spec: spec.clone(),
            splits,
        };
        write_json(&dir.join(format!("seed_{seed}.json")), &manifest)?;
    }
    Ok(())
}

/// The data and evaluation split of one (scope, seed) cell.
struct Cell {
    data: TrainData,
    eval: Dataset,
    eval_name: &'static str,
    gamma: Option<Vec<f64>>,
}

fn build_cell(config: &ExperimentConfig, base: &Path, scope: &Scope, seed: u64) -> Result<Cell> {
    let bundle = materialize(config, base, seed)?;
    match scope {
        Scope::Budget(budget) => {
            let plan = config
                .sampling
                .as_ref()
                .ok_or_else(|| Error::Config("budget runs need a sampling section".into()))?
                .plan();
            let splits = realistic_sample(&bundle.pool, &plan, seed)?;
            let split = splits.iter().find(|s| s.budget == *budget).ok_or_else(|| {
                Error::Config(format!("budget {budget} is not in the sampling plan"))
            })?;
            let data = TrainData::from_budget_split(&bundle.pool, split)?;
            let (eval, eval_name) = match bundle.test {
                Some(test) => (test, "test"),
                None => (data.val.clone(), "val"),
            };
            Ok(Cell {
                data,
                eval,
                eval_name,
                gamma: None,
            })
        }
        Scope::Mismatch => {
            let spec = config
                .mismatch
                .as_ref()
                .ok_or_else(|| Error::Config("mismatch runs need a mismatch section".into()))?
                .spec()?;
            let splits = build_mismatch(&bundle.pool, &spec, seed)?;
            let (data, test) = TrainData::from_mismatch(&bundle.pool, &splits)?;
            Ok(Cell {
                data,
                eval: test,
                eval_name: "test",
                gamma: Some(splits.gamma),
            })
        }
    }
}

pub fn cmd_train(
    config: &ExperimentConfig,
    base: &Path,
    out: &Path,
    seed_override: Option<u64>,
    quiet: bool,
) -> Result<()> {
    let methods = config.methods()?;
    if methods.is_empty() {
        return Err(Error::Config("no train sections configured".into()));
    }
    for scope in scopes_of(config)? {
        for &seed in &seeds_of(config, seed_override) {
            let cell = build_cell(config, base, &scope, seed)?;
            for (method, overrides) in &methods {
                let tc = overrides.build(*method, seed, cell.gamma.as_deref());
                let run = train(&tc, &cell.data)?;
                let id = run_id(*method, &scope, seed);
                let metrics = write_run(
                    &run_dir(out, &id),
                    &scope,
                    seed,
                    &run,
                    &cell.eval,
                    cell.eval_name,
                )?;
                say(
                    quiet,
                    &format!(
                        "train {id}: best val {:.4} at iter {}, {} mean AUROC {}",
                        run.best.score,
                        run.best.iter,
                        cell.eval_name,
                        metrics
                            .report
                            .mean_auroc
                            .map(|v| format!("{v:.4}"))
                            .unwrap_or_else(|| "undefined".into()),
                    ),
                );
            }
        }
    }
    Ok(())
}

pub fn cmd_eval(
    config: &ExperimentConfig,
    base: &Path,
    out: &Path,
    id: &str,
    quiet: bool,
) -> Result<()> {
    let summary = read_summary(out, id)?;
    let best = read_best(out, id)?;
    let cell = build_cell(config, base, &summary.scope, summary.seed)?;
    let metrics = RunMetrics {
        split: cell.eval_name.to_owned(),
        report: evaluate_model(best.best_model(), &cell.eval, summary.config.binarize_tau)?,
    };
    let text = serde_json::to_string_pretty(&metrics)
        .map_err(|e| Error::Config(format!("cannot serialize metrics: {e}")))?;
    // The report is the command's output, so it prints even under --quiet.
    let _ = quiet;
    println!("{text}");
    Ok(())
}

/// Population standard deviation (the spread of exactly these seeds).
fn mean_and_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

pub fn cmd_compare(
    config: &ExperimentConfig,
    _base: &Path,
    out: &Path,
    seed_override: Option<u64>,
    quiet: bool,
) -> Result<()> {
    let methods = config.methods()?;
    if methods.is_empty() {
        return Err(Error::Config("no train sections configured".into()));
    }
    let scopes = scopes_of(config)?;
    let seeds = seeds_of(config, seed_override);

    let mut missing = Vec::new();
    let mut table: BTreeMap<(String, String), (f64, f64, usize)> = BTreeMap::new();
    let mut rows: Vec<(String, String, f64, f64, usize)> = Vec::new();
    for (method, _) in &methods {
        for scope in &scopes {
            let mut values = Vec::new();
            for &seed in &seeds {
                let id = run_id(*method, scope, seed);
                let dir = run_dir(out, &id);
                if !dir.join("metrics.json").is_file() {
                    missing.push(id);
                    continue;
                }
                let metrics: RunMetrics = runs::read_json(&dir.join("metrics.json"))?;
                let auroc = metrics
                    .report
                    .mean_auroc
                    .ok_or(Error::UndefinedMetric("mean AUROC"))?;
                values.push(auroc);
            }
            if !missing.is_empty() {
                continue;
            }
            let (mean, std) = mean_and_std(&values);
            table.insert(
                (method.name().to_owned(), scope.tag()),
                (mean, std, values.len()),
            );
            rows.push((
                method.name().to_owned(),
                scope.tag(),
                mean,
                std,
                values.len(),
            ));
        }
    }
    if !missing.is_empty() {
        return Err(Error::Config(format!(
            "missing run directories: {}",
            missing.join(", ")
        )));
    }

    let mut csv = String::from("method,scope,mean_auroc,std_auroc,n_seeds\n");
    for (method, scope, mean, std, n) in &rows {
        csv.push_str(&format!("{method},{scope},{mean},{std},{n}\n"));
    }
    write_atomic(&out.join("compare.csv"), csv.as_bytes())?;

    // Aligned text table: methods as rows, scopes as columns.
    let scope_tags: Vec<String> = scopes.iter().map(|s| s.tag()).collect();
    let method_w = methods
        .iter()
        .map(|(m, _)| m.name().len())
        .max()
        .unwrap_or(6)
        .max("method".len());
    let cell_of = |m: &str, s: &str| -> String {
        let (mean, std, _) = table[&(m.to_owned(), s.to_owned())];
        format!("{mean:.3} \u{b1} {std:.3}")
    };
    let col_w = scope_tags
        .iter()
        .map(|s| s.len())
        .chain(std::iter::once(13))
        .max()
        .unwrap();
    let mut text = format!("{:<method_w$}", "method");
    for tag in &scope_tags {
        text.push_str(&format!("  {tag:>col_w$}"));
    }
    text.push('\n');
    for (method, _) in &methods {
        text.push_str(&format!("{:<method_w$}", method.name()));
        for tag in &scope_tags {
            text.push_str(&format!("  {:>col_w$}", cell_of(method.name(), tag)));
        }
        text.push('\n');
    }
    write_atomic(&out.join("compare.txt"), text.as_bytes())?;
    say(quiet, text.trim_end());
    Ok(())
}

pub fn cmd_dynamics(
    _config: &ExperimentConfig,
    _base: &Path,
    out: &Path,
    run_a: &str,
    run_b: &str,
    quiet: bool,
) -> Result<()> {
    // Cells are copied verbatim from each run's history file, so the merged
    // CSV matches the sources byte-for-byte.
    let read_rows = |id: &str| -> Result<Vec<Vec<String>>> {
        let path = run_dir(out, id).join("history.csv");
        if !path.is_file() {
            return Err(Error::Config(format!(
                "missing run directory or history: {id}"
            )));
        }
        let text = std::fs::read_to_string(&path)?;
        parse_history_csv(&text)?; // shape check with line-numbered errors
        Ok(text
            .lines()
            .skip(1)
            .map(|l| l.split(',').map(str::to_owned).collect())
            .collect())
    };
    let rows_a = read_rows(run_a)?;
    let rows_b = read_rows(run_b)?;

    // Per iteration, each run's (val_auroc_net1, val_auroc_net2, disagreement).
    type HistoryCells = (String, String, String);
    let mut merged: BTreeMap<u64, [Option<HistoryCells>; 2]> = BTreeMap::new();
    for (which, rows) in [(0usize, &rows_a), (1, &rows_b)] {
        for f in rows {
            let iter: u64 = f[0].parse().map_err(|_| {
                Error::Config(format!("unparsable iter column in history: {}", f[0]))
            })?;
            merged.entry(iter).or_default()[which] =
                Some((f[4].clone(), f[5].clone(), f[6].clone()));
        }
    }

    let mut csv = String::from(
        "iter,auroc_a_net1,auroc_a_net2,auroc_b_net1,auroc_b_net2,disagreement_a,disagreement_b\n",
    );
    for (iter, cells) in &merged {
        let blank = || ("".to_owned(), "".to_owned(), "".to_owned());
        let (a1, a2, da) = cells[0].clone().unwrap_or_else(blank);
        let (b1, b2, db) = cells[1].clone().unwrap_or_else(blank);
        csv.push_str(&format!("{iter},{a1},{a2},{b1},{b2},{da},{db}\n"));
    }
    write_atomic(&out.join("dynamics.csv"), csv.as_bytes())?;

    // Series for the chart, parsed from the same cells.
    let mut series = Vec::new();
    let mut push_run = |which: usize, id: &str, dashed: bool| {
        let mut auroc1 = Vec::new();
        let mut auroc2 = Vec::new();
        let mut dis = Vec::new();
        for (&iter, cells) in &merged {
            if let Some((a1, a2, d)) = &cells[which] {
                let x = iter as f64;
                if let Ok(v) = a1.parse::<f64>() {
                    auroc1.push((x, v));
                }
                if let Ok(v) = a2.parse::<f64>() {
                    auroc2.push((x, v));
                }
                if let Ok(v) = d.parse::<f64>() {
                    dis.push((x, v));
                }
            }
        }
        series.push(Series {
            label: format!("{id} net 1 AUROC"),
            points: auroc1,
            color: PALETTE[which * 2],
            dashed,
            class: "auroc",
        });
        series.push(Series {
            label: format!("{id} net 2 AUROC"),
            points: auroc2,
            color: PALETTE[which * 2 + 1],
            dashed,
            class: "auroc",
        });
        series.push(Series {
            label: format!("{id} disagreement"),
            points: dis,
            color: PALETTE[4 + which],
            dashed,
            class: "disagreement",
        });
    };
    push_run(0, run_a, false);
    push_run(1, run_b, true);

    let svg = dual_axis_chart(
        &format!("training dynamics: {run_a} vs {run_b}"),
        "iteration",
        &series,
    );
    write_atomic(&out.join("dynamics.svg"), svg.as_bytes())?;
    say(
        quiet,
        &format!(
            "dynamics: {} rows -> {} and {}",
            merged.len(),
            out.join("dynamics.csv").display(),
            out.join("dynamics.svg").display()
        ),
    );
    Ok(())
}
