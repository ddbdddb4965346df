use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;

use super::{write_atomic, ExperimentConfig};
use crate::data::{synthesize, SynthDataset};
use crate::debias::{evaluate, train, BaselineColor, BaselineInput, Method, RunRecord};
use crate::error::{Error, Result};
use crate::metrics::{mean_stderr, median, MeanStderr};
use crate::model::Mlp;

/// Result of one seed. Exactly one of `record` and `error` is set.
#[derive(Debug, Clone)]
pub struct SeedOutcome {
    pub seed: u64,
    pub record: Option<RunRecord>,
    pub model: Option<Mlp>,
    pub error: Option<String>,
    pub wall_time_secs: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub succeeded: usize,
    pub failed: usize,
    pub bacc: Option<MeanStderr>,
    pub gm: Option<MeanStderr>,
    pub bacc_median: Option<f64>,
    pub gm_median: Option<f64>,
}

impl Aggregate {
    fn from_outcomes(outcomes: &[SeedOutcome]) -> Self {
        let evals: Vec<_> = outcomes
            .iter()
            .filter_map(|o| o.record.as_ref().map(|r| &r.evaluation))
            .collect();
        let baccs: Vec<f64> = evals.iter().map(|e| e.bacc).collect();
        let gms: Vec<f64> = evals.iter().map(|e| e.gm).collect();
        let some = !evals.is_empty();
        Self {
            succeeded: evals.len(),
            failed: outcomes.len() - evals.len(),
            bacc: some.then(|| mean_stderr(&baccs)),
            gm: some.then(|| mean_stderr(&gms)),
            bacc_median: some.then(|| median(&baccs)),
            gm_median: some.then(|| median(&gms)),
        }
    }
}

#[derive(Debug, Clone)]
pub struct RunSet {
    pub label: String,
    pub config: ExperimentConfig,
    pub outcomes: Vec<SeedOutcome>,
    pub aggregate: Aggregate,
}

impl RunSet {
    pub fn all_failed(&self) -> bool {
        self.aggregate.succeeded == 0
    }

    pub fn baccs(&self) -> Vec<f64> {
        self.records().map(|r| r.evaluation.bacc).collect()
    }

    pub fn records(&self) -> impl Iterator<Item = &RunRecord> {
        self.outcomes.iter().filter_map(|o| o.record.as_ref())
    }
}

fn baseline_for(cfg: &ExperimentConfig, data: &SynthDataset) -> BaselineInput {
    let white = data.training_view().max_abs_coordinate();
    BaselineInput::from_color(cfg.train.lcgc.baseline, data.dim(), white)
}

/// Trains and evaluates one seed on an already synthesized dataset.
pub fn run_seed(cfg: &ExperimentConfig, data: &SynthDataset, seed: u64) -> Result<(RunRecord, Mlp)> {
    let mut model = Mlp::init(&cfg.model_dims(), seed)?;
    let baseline = baseline_for(cfg, data);
    let steps = train(&mut model, &data.training_view(), &cfg.train, &baseline, seed)?;
    let evaluation = evaluate(
        &model,
        data.evaluation_view().test,
        &baseline,
        cfg.train.refines_at_test(),
        cfg.train.lcgc.double_subtract,
    )?;
    Ok((RunRecord { seed, steps, evaluation }, model))
}

fn isolated(cfg: &ExperimentConfig, data: &SynthDataset, seed: u64) -> SeedOutcome {
    let start = Instant::now();
    let result = catch_unwind(AssertUnwindSafe(|| run_seed(cfg, data, seed)));
    let wall_time_secs = start.elapsed().as_secs_f64();
    let (record, model, error) = match result {
        Ok(Ok((record, model))) => (Some(record), Some(model), None),
        Ok(Err(e)) => (None, None, Some(e.to_string())),
        Err(panic) => {
            let msg = panic
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| panic.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            (None, None, Some(format!("panic: {msg}")))
        }
    };
    SeedOutcome { seed, record, model, error, wall_time_secs }
}

/// Runs every seed in parallel. A failing seed is recorded, not propagated.
pub fn run(cfg: &ExperimentConfig) -> Result<RunSet> {
    cfg.validate()?;
    let data = synthesize(&cfg.dataset)?;
    let outcomes: Vec<SeedOutcome> = cfg.seeds.par_iter().map(|&s| isolated(cfg, &data, s)).collect();
    let aggregate = Aggregate::from_outcomes(&outcomes);
    Ok(RunSet {
        label: cfg.name.clone(),
        config: cfg.clone(),
        outcomes,
        aggregate,
    })
}

fn json_bytes(value: &serde_json::Value) -> Result<Vec<u8>> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    Ok(bytes)
}

/// Writes `seed-<s>/{steps.csv,confusion.csv,summary.json}` and
/// `aggregate.json` under `dir`.
pub fn write_run_set(set: &RunSet, dir: &Path) -> Result<()> {
    for o in &set.outcomes {
        let seed_dir = dir.join(format!("seed-{}", o.seed));
        let summary = match &o.record {
            Some(r) => {
                write_atomic(&seed_dir.join("steps.csv"), r.steps_csv().as_bytes())?;
                write_atomic(&seed_dir.join("confusion.csv"), r.evaluation.confusion.to_csv().as_bytes())?;
                json!({
                    "config": set.config,
                    "seed": o.seed,
                    "status": "ok",
                    "bacc": r.evaluation.bacc,
                    "gm": r.evaluation.gm,
                    "confusion": r.evaluation.confusion,
                    "final_kl_loss": r.steps.last().map(|s| s.kl_loss),
                    "wall_time_secs": o.wall_time_secs,
                })
            }
            None => json!({
                "config": set.config,
                "seed": o.seed,
                "status": "failed",
                "error": o.error,
                "wall_time_secs": o.wall_time_secs,
            }),
        };
        write_atomic(&seed_dir.join("summary.json"), &json_bytes(&summary)?)?;
    }
    let aggregate = json!({
        "label": set.label,
        "config": set.config,
        "seeds": set.outcomes.iter().map(|o| o.seed).collect::<Vec<_>>(),
        "aggregate": set.aggregate,
    });
    write_atomic(&dir.join("aggregate.json"), &json_bytes(&aggregate)?)
}

/// One row of a sweep or ablation table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub variant: String,
    pub method: Method,
    pub lambda: f64,
    pub baseline: BaselineColor,
    pub refine_pseudo_labels: bool,
    pub refine_at_test: bool,
    pub tau: f64,
    pub aggregate: Aggregate,
}

impl TableRow {
    fn from_set(variant: String, set: &RunSet) -> Self {
        let t = &set.config.train;
        Self {
            variant,
            method: t.method,
            lambda: t.lcgc.lambda,
            baseline: t.lcgc.baseline,
            refine_pseudo_labels: t.lcgc.refine_pseudo_labels,
            refine_at_test: t.lcgc.refine_at_test,
            tau: t.tau,
            aggregate: set.aggregate.clone(),
        }
    }
}

/// CSV with one line per row; missing aggregates are written as `nan`.
pub fn write_table(rows: &[TableRow], path: &Path) -> Result<()> {
    let mut out = String::from(
        "variant,method,lambda,baseline,refine_pseudo_labels,refine_at_test,tau,\
         succeeded,failed,bacc_mean,bacc_stderr,gm_mean,gm_stderr,bacc_median\n",
    );
    let pair = |m: &Option<MeanStderr>| m.as_ref().map_or((f64::NAN, f64::NAN), |m| (m.mean, m.stderr));
    for r in rows {
        let (bm, bs) = pair(&r.aggregate.bacc);
        let (gm, gs) = pair(&r.aggregate.gm);
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{}\n",
            r.variant,
            r.method,
            r.lambda,
            r.baseline,
            r.refine_pseudo_labels,
            r.refine_at_test,
            r.tau,
            r.aggregate.succeeded,
            r.aggregate.failed,
            bm,
            bs,
            gm,
            gs,
            r.aggregate.bacc_median.unwrap_or(f64::NAN),
        ));
    }
    write_atomic(path, out.as_bytes())
}

/// `0.0, 0.2, …, 1.4`
pub fn default_lambda_grid() -> Vec<f64> {
    (0..8).map(|i| f64::from(i) / 5.0).collect()
}

fn variant_sets(
    base: &ExperimentConfig,
    variants: Vec<(String, ExperimentConfig)>,
    out_dir: Option<&Path>,
) -> Result<Vec<TableRow>> {
    let mut rows = Vec::with_capacity(variants.len());
    for (label, mut cfg) in variants {
        cfg.name = format!("{}-{label}", base.name);
        let set = run(&cfg)?;
        if let Some(dir) = out_dir {
            write_run_set(&set, &dir.join(&label))?;
        }
        rows.push(TableRow::from_set(label, &set));
    }
    Ok(rows)
}

/// One LCGC run set per λ.
pub fn sweep_lambda(base: &ExperimentConfig, lambdas: &[f64], out_dir: Option<&Path>) -> Result<Vec<TableRow>> {
    if lambdas.is_empty() {
        return Err(Error::config(None, Some("lcgc.lambda"), "empty λ grid"));
    }
    let variants = lambdas
        .iter()
        .map(|&l| {
            let mut cfg = base.clone();
            cfg.train.method = Method::Lcgc;
            cfg.train.lcgc.lambda = l;
            (format!("lambda-{l}"), cfg)
        })
        .collect();
    variant_sets(base, variants, out_dir)
}

/// One run set per baseline color, everything else fixed.
pub fn ablate_baseline_colors(
    base: &ExperimentConfig,
    colors: &[BaselineColor],
    out_dir: Option<&Path>,
) -> Result<Vec<TableRow>> {
    if colors.is_empty() {
        return Err(Error::config(None, Some("lcgc.baseline"), "no colors given"));
    }
    let variants = colors
        .iter()
        .map(|&c| {
            let mut cfg = base.clone();
            cfg.train.lcgc.baseline = c;
            (format!("baseline-{c}"), cfg)
        })
        .collect();
    variant_sets(base, variants, out_dir)
}

/// Full method, each refinement switched off in turn, and a confidence threshold of 0.95.
pub fn ablate_components(base: &ExperimentConfig, out_dir: Option<&Path>) -> Result<Vec<TableRow>> {
    let mut full = base.clone();
    full.train.method = Method::Lcgc;
    full.train.lcgc.refine_pseudo_labels = true;
    full.train.lcgc.refine_at_test = true;
    full.train.tau = 0.0;

    let mut no_pseudo = full.clone();
    no_pseudo.train.lcgc.refine_pseudo_labels = false;
    let mut no_test = full.clone();
    no_test.train.lcgc.refine_at_test = false;
    let mut thresholded = full.clone();
    thresholded.train.tau = 0.95;

    let variants = vec![
        ("full".to_string(), full),
        ("no-pseudo-label-refinement".to_string(), no_pseudo),
        ("no-test-refinement".to_string(), no_test),
        ("tau-0.95".to_string(), thresholded),
    ];
    variant_sets(base, variants, out_dir)
}
