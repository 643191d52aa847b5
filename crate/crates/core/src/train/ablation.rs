//! Long-format results tables and the grid runner.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::checkpoint::{write_atomic, Checkpoint, ParamCounts};
use super::eval::evaluate;
use super::tune::{train_rep, TrainRegime};
use crate::backbone::BackboneWeights;
use crate::data::Splits;
use crate::error::{Error, Result};
use crate::experiment::{AblationCell, ExperimentConfig};
use crate::missing::Scenario;
use crate::rep::RepConfig;
use crate::rng::SeedTree;

/// One line of the results table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ResultRow {
    pub cell_id: String,
    pub dynamic_init: bool,
    pub dual_buffers: bool,
    pub replay: bool,
    pub private_buffer: bool,
    pub l: usize,
    pub d: usize,
    pub eps_n: f64,
    pub noise_type: String,
    pub seed: u64,
    pub scenario: String,
    pub acc: f64,
    pub f1_macro: f64,
    pub auroc: f64,
    pub param_fraction: f64,
}

pub const CSV_HEADER: [&str; 15] = [
    "cell_id",
    "dynamic_init",
    "dual_buffers",
    "replay",
    "private_buffer",
    "l",
    "d",
    "eps_n",
    "noise_type",
    "seed",
    "scenario",
    "acc",
    "f1_macro",
    "auroc",
    "param_fraction",
];

impl ResultRow {
    pub fn key(&self) -> (String, u64, String) {
        (self.cell_id.clone(), self.seed, self.scenario.clone())
    }
}

/// Row of the JSON mirror: the CSV row plus the full REP config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JsonRow {
    #[serde(flatten)]
    pub row: ResultRow,
    pub config: RepConfig,
}

pub fn write_csv(path: &Path, rows: &[ResultRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    if rows.is_empty() {
        w.write_record(CSV_HEADER)?;
    }
    for r in rows {
        w.serialize(r)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    write_atomic(path, &bytes)
}

/// Reads a results table, rejecting any header other than [`CSV_HEADER`].
pub fn read_csv(path: &Path) -> Result<Vec<ResultRow>> {
    let mut r = csv::Reader::from_path(path)?;
    let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    if header != CSV_HEADER {
        return Err(Error::Schema(format!("unexpected header {header:?}, expected {CSV_HEADER:?}")));
    }
    r.deserialize()
        .enumerate()
        .map(|(i, row)| row.map_err(|e| Error::Schema(format!("row {}: {e}", i + 1))))
        .collect()
}

/// A cell that failed, recorded in the errors sidecar.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellError {
    pub cell_id: String,
    pub seed: u64,
    pub scenario: String,
    pub error: String,
}

/// Trains and evaluates one cell for one seed. Under a matched regime each
/// scenario gets its own tuning run; under complete training one run is
/// evaluated on every scenario. Returns one row per scenario.
pub fn run_cell(
    exp: &ExperimentConfig,
    cell: &AblationCell,
    backbone: &BackboneWeights,
    splits: &Splits,
    seed: u64,
    scenarios: &[Scenario],
) -> Result<Vec<ResultRow>> {
    let rep_config = cell.apply(&exp.rep);
    rep_config.check_backbone(&backbone.config)?;
    let seeds = SeedTree::new(seed);
    let kinds = exp.task.kinds();
    let fraction = ParamCounts::expected(&backbone.config, &rep_config).trainable_fraction();
    let row = |scenario: &Scenario, acc: f64, f1: f64, auroc: f64| ResultRow {
        cell_id: cell.id.clone(),
        dynamic_init: rep_config.components.dynamic_init,
        dual_buffers: rep_config.components.dual_buffers,
        replay: rep_config.components.replay,
        private_buffer: rep_config.components.private_buffer,
        l: rep_config.buffer_width,
        d: rep_config.replay_depth,
        eps_n: rep_config.noise_intensity,
        noise_type: rep_config.noise_type.to_string(),
        seed,
        scenario: scenario.to_string(),
        acc,
        f1_macro: f1,
        auroc,
        param_fraction: fraction,
    };
    let tune = |train_scenario: &Scenario| -> Result<Checkpoint> {
        let out = train_rep(
            backbone,
            &rep_config,
            splits,
            train_scenario,
            exp.train_regime,
            &kinds,
            &exp.optimizer,
            &seeds,
        )?;
        Ok(Checkpoint::from_tuned(backbone, &out.rep, &out.head, seed))
    };
    let mut rows = Vec::with_capacity(scenarios.len());
    match exp.train_regime {
        TrainRegime::Matched => {
            for s in scenarios {
                let ck = tune(s)?;
                let report = evaluate(&ck, &splits.test, std::slice::from_ref(s), &kinds, &seeds)?;
                let m = &report.scenarios[0];
                rows.push(row(s, m.accuracy, m.f1_macro, m.auroc));
            }
        }
        TrainRegime::Complete => {
            let ck = tune(&Scenario::Complete)?;
            let report = evaluate(&ck, &splits.test, scenarios, &kinds, &seeds)?;
            for (s, m) in scenarios.iter().zip(&report.scenarios) {
                rows.push(row(s, m.accuracy, m.f1_macro, m.auroc));
            }
        }
    }
    Ok(rows)
}

/// Output locations of a grid run.
pub struct AblationPaths<'a> {
    pub csv: &'a Path,
    pub json: &'a Path,
    pub errors: &'a Path,
}

/// Progress events reported while a grid runs.
pub enum Progress<'a> {
    Skipped { cell: &'a str, seed: u64 },
    Done { cell: &'a str, seed: u64, rows: &'a [ResultRow] },
    Failed { cell: &'a str, seed: u64, error: &'a Error },
}

/// Runs every `(cell, seed)` pair that has no rows in `paths.csv` yet,
/// rewriting the CSV, the JSON mirror and the errors sidecar after each
/// pair. Failed pairs are recorded and the rest proceed.
///
/// `backbone_for` supplies the frozen backbone and data for a seed.
pub fn run_ablation(
    exp: &ExperimentConfig,
    cells: &[AblationCell],
    paths: &AblationPaths<'_>,
    mut backbone_for: impl FnMut(u64) -> Result<(BackboneWeights, Splits)>,
    mut progress: impl FnMut(Progress<'_>),
) -> Result<Vec<ResultRow>> {
    let mut rows = if paths.csv.exists() { read_csv(paths.csv)? } else { Vec::new() };
    let mut json_rows: Vec<JsonRow> = if paths.json.exists() {
        serde_json::from_str(&std::fs::read_to_string(paths.json)?)?
    } else {
        Vec::new()
    };
    let done: BTreeSet<(String, u64)> = rows.iter().map(|r| (r.cell_id.clone(), r.seed)).collect();
    let mut errors: Vec<CellError> = Vec::new();
    let mut cache: BTreeMap<u64, (BackboneWeights, Splits)> = BTreeMap::new();

    for &seed in &exp.seeds {
        for cell in cells {
            if done.contains(&(cell.id.clone(), seed)) {
                progress(Progress::Skipped { cell: &cell.id, seed });
                continue;
            }
            let result = (|| -> Result<Vec<ResultRow>> {
                if !cache.contains_key(&seed) {
                    let pair = backbone_for(seed)?;
                    cache.insert(seed, pair);
                }
                let (bb, splits) = &cache[&seed];
                run_cell(exp, cell, bb, splits, seed, &exp.scenarios)
            })();
            match result {
                Ok(new_rows) => {
                    progress(Progress::Done {
                        cell: &cell.id,
                        seed,
                        rows: &new_rows,
                    });
                    let config = cell.apply(&exp.rep);
                    json_rows.extend(new_rows.iter().map(|r| JsonRow {
                        row: r.clone(),
                        config: config.clone(),
                    }));
                    rows.extend(new_rows);
                }
                Err(e) => {
                    progress(Progress::Failed {
                        cell: &cell.id,
                        seed,
                        error: &e,
                    });
                    for s in &exp.scenarios {
                        errors.push(CellError {
                            cell_id: cell.id.clone(),
                            seed,
                            scenario: s.to_string(),
                            error: e.to_string(),
                        });
                    }
                }
            }
            write_csv(paths.csv, &rows)?;
            write_atomic(paths.json, (serde_json::to_string_pretty(&json_rows)? + "\n").as_bytes())?;
            write_atomic(paths.errors, (serde_json::to_string_pretty(&errors)? + "\n").as_bytes())?;
        }
    }
    Ok(rows)
}
