use std::path::{Path, PathBuf};

use anyhow::Context as _;
use rep_core::backbone::{pretrain_backbone, BackboneWeights};
use rep_core::data::{generate_synthetic, Splits};
use rep_core::experiment::{parse_override, ExperimentConfig};
use rep_core::missing::Scenario;
use rep_core::rng::SeedTree;
use rep_core::train::ablation::{run_ablation, AblationPaths, Progress};
use rep_core::train::checkpoint::{write_atomic, Checkpoint};
use rep_core::train::eval::{evaluate as evaluate_checkpoint, MetricsReport};
use rep_core::train::report::{report_files, summary_table};
use rep_core::train::tune::{train_rep, EpochLog, TrainRegime};
use rep_core::train::ablation::read_csv;
use rep_core::Error;

use crate::{Common, RepFlags};

pub const OUTPUT_DIR_ENV: &str = "REP_OUTPUT_DIR";

pub const RESOLVED_CONFIG: &str = "resolved_config.json";
pub const BACKBONE_CHECKPOINT: &str = "backbone.json";
pub const REP_CHECKPOINT: &str = "rep_checkpoint.json";
pub const METRICS: &str = "metrics.json";
pub const TRAIN_LOG: &str = "train_log.csv";
pub const RESULTS_CSV: &str = "results.csv";
pub const RESULTS_JSON: &str = "results.json";
pub const ERRORS_JSON: &str = "errors.json";

/// Config file (or defaults), then `--set` overrides, then `--seed`, then
/// the output-directory environment variable.
fn load(common: &Common) -> anyhow::Result<ExperimentConfig> {
    let mut exp = match &common.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(Error::from)
                .with_context(|| format!("reading {}", path.display()))?;
            ExperimentConfig::from_json(&text).with_context(|| format!("in {}", path.display()))?
        }
        None => ExperimentConfig::default(),
    };
    let overrides = common
        .overrides
        .iter()
        .map(|o| parse_override(o))
        .collect::<Result<Vec<_>, _>>()?;
    exp = exp.with_overrides(&overrides)?;
    if let Some(seed) = common.seed {
        exp.seeds = vec![seed];
    }
    if let Some(dir) = std::env::var_os(OUTPUT_DIR_ENV) {
        exp.output_dir = PathBuf::from(dir);
    }
    Ok(exp)
}

fn prepare_output(exp: &ExperimentConfig) -> anyhow::Result<&Path> {
    let dir = exp.output_dir.as_path();
    std::fs::create_dir_all(dir)
        .map_err(Error::from)
        .with_context(|| format!("creating {}", dir.display()))?;
    Ok(dir)
}

fn write_resolved(exp: &ExperimentConfig) -> anyhow::Result<()> {
    write_atomic(&exp.output_dir.join(RESOLVED_CONFIG), exp.to_json_pretty()?.as_bytes())?;
    Ok(())
}

fn pretrain_for_seed(exp: &ExperimentConfig, seed: u64) -> rep_core::Result<(BackboneWeights, Splits, Checkpoint)> {
    let seeds = SeedTree::new(seed);
    let splits = generate_synthetic(&exp.task, &seeds)?;
    let (weights, report) = pretrain_backbone(
        &exp.backbone,
        &splits,
        &exp.pretrain.optimizer,
        exp.pretrain.threshold,
        &seeds,
    )?;
    let ck = Checkpoint::from_backbone(&weights, seed).with_record("pretrain", &report)?;
    Ok((weights, splits, ck))
}

pub fn pretrain(common: &Common) -> anyhow::Result<()> {
    let exp = load(common)?;
    exp.validate()?;
    let seed = exp.seeds[0];
    let dir = prepare_output(&exp)?;
    write_resolved(&exp)?;
    let (_, _, ck) = pretrain_for_seed(&exp, seed)?;
    let path = dir.join(BACKBONE_CHECKPOINT);
    ck.save(&path)?;
    let r = &ck.records["pretrain"];
    println!(
        "pretrained seed={seed} train_accuracy={:.6} val_accuracy={:.6} test_accuracy={:.6} checkpoint={} sha256={}",
        r["train_accuracy"].as_f64().unwrap_or(f64::NAN),
        r["val_accuracy"].as_f64().unwrap_or(f64::NAN),
        r["test_accuracy"].as_f64().unwrap_or(f64::NAN),
        path.display(),
        ck.digest()?
    );
    Ok(())
}

fn apply_rep_flags(exp: &mut ExperimentConfig, flags: &RepFlags) -> anyhow::Result<()> {
    if !flags.scenarios.is_empty() {
        exp.scenarios = flags
            .scenarios
            .iter()
            .map(|s| s.parse::<Scenario>())
            .collect::<Result<_, _>>()?;
    }
    if let Some(v) = flags.buffer_width {
        exp.rep.buffer_width = v;
    }
    if let Some(v) = flags.buffer_depth {
        exp.rep.replay_depth = v;
    }
    if let Some(v) = flags.noise_eps {
        exp.rep.noise_intensity = v;
    }
    if let Some(v) = flags.noise_type {
        exp.rep.noise_type = v;
    }
    if let Some(v) = flags.ortho_weight {
        exp.rep.ortho_weight = v;
    }
    Ok(())
}

/// Fails with a compatibility error when a checkpoint was built for a
/// different backbone than the config describes.
fn check_checkpoint(exp: &ExperimentConfig, ck: &Checkpoint) -> rep_core::Result<()> {
    let (have, want) = (&ck.backbone_config, &exp.backbone);
    if have != want {
        return Err(Error::Compatibility(format!(
            "checkpoint backbone has d_model {} with {} modalities and {} layers, config expects d_model {} with {} modalities and {} layers{}",
            have.d_model,
            have.n_modalities(),
            have.n_layers,
            want.d_model,
            want.n_modalities(),
            want.n_layers,
            if have.d_model == want.d_model
                && have.n_modalities() == want.n_modalities()
                && have.n_layers == want.n_layers
            {
                " (other backbone fields differ)"
            } else {
                ""
            }
        )));
    }
    Ok(())
}

fn log_csv(log: &[EpochLog]) -> anyhow::Result<Vec<u8>> {
    let n_alpha = log.first().map_or(0, |r| r.alpha.len());
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header: Vec<String> = ["epoch", "loss", "task_loss", "ortho_loss"].map(String::from).to_vec();
    header.extend((0..n_alpha).map(|m| format!("alpha_{m}")));
    header.extend(["eps_shared", "beta_private", "beta_shared", "degenerate_pairs"].map(String::from));
    w.write_record(&header)?;
    for r in log {
        let mut rec = vec![
            r.epoch.to_string(),
            r.loss.to_string(),
            r.task_loss.to_string(),
            r.ortho_loss.to_string(),
        ];
        rec.extend(r.alpha.iter().map(f64::to_string));
        rec.push(r.eps_shared.map(|e| e.to_string()).unwrap_or_default());
        rec.push(r.beta_private.to_string());
        rec.push(r.beta_shared.to_string());
        rec.push(r.degenerate_pairs.to_string());
        w.write_record(&rec)?;
    }
    Ok(w.into_inner()?)
}

fn print_metrics(report: &MetricsReport) {
    for s in &report.scenarios {
        println!(
            "scenario={} accuracy={:.6} f1_macro={:.6} auroc={:.6}",
            s.scenario, s.accuracy, s.f1_macro, s.auroc
        );
    }
    println!("param_fraction={:.4} config_hash={}", report.param_fraction, report.config_hash);
}

pub fn tune(common: &Common, flags: &RepFlags, backbone: Option<&Path>) -> anyhow::Result<()> {
    let mut exp = load(common)?;
    apply_rep_flags(&mut exp, flags)?;
    exp.validate()?;
    let seed = exp.seeds[0];
    let seeds = SeedTree::new(seed);

    let loaded = match backbone {
        Some(path) => {
            let ck = Checkpoint::load(path).with_context(|| format!("loading {}", path.display()))?;
            check_checkpoint(&exp, &ck)?;
            let weights = ck.backbone()?;
            if !weights.frozen {
                return Err(Error::Compatibility(format!("{} is not a frozen backbone", path.display())).into());
            }
            Some(weights)
        }
        None => None,
    };
    exp.rep.check_backbone(&exp.backbone)?;

    let dir = prepare_output(&exp)?.to_path_buf();
    write_resolved(&exp)?;
    let (weights, splits) = match loaded {
        Some(w) => (w, generate_synthetic(&exp.task, &seeds)?),
        None => {
            let (w, s, _) = pretrain_for_seed(&exp, seed)?;
            (w, s)
        }
    };

    let kinds = exp.task.kinds();
    let train_scenario = match exp.train_regime {
        TrainRegime::Matched => exp.scenarios[0].clone(),
        TrainRegime::Complete => Scenario::Complete,
    };
    let out = train_rep(
        &weights,
        &exp.rep,
        &splits,
        &train_scenario,
        exp.train_regime,
        &kinds,
        &exp.optimizer,
        &seeds,
    )?;
    write_atomic(&dir.join(TRAIN_LOG), &log_csv(&out.log)?)?;

    let ck = Checkpoint::from_tuned(&weights, &out.rep, &out.head, seed);
    let report = evaluate_checkpoint(&ck, &splits.test, &exp.scenarios, &kinds, &seeds)?;
    let ck = ck.with_record("train_log", &out.log)?.with_record("metrics", &report)?;
    ck.save(&dir.join(REP_CHECKPOINT))?;
    write_atomic(&dir.join(METRICS), (serde_json::to_string_pretty(&report)? + "\n").as_bytes())?;

    println!("tuned seed={seed} trained_on={train_scenario}");
    print_metrics(&report);
    Ok(())
}

pub fn evaluate(common: &Common, checkpoint: &Path, scenarios: &[String]) -> anyhow::Result<()> {
    let mut exp = load(common)?;
    if !scenarios.is_empty() {
        exp.scenarios = scenarios.iter().map(|s| s.parse::<Scenario>()).collect::<Result<_, _>>()?;
    }
    let ck = Checkpoint::load(checkpoint).with_context(|| format!("loading {}", checkpoint.display()))?;
    if common.seed.is_none() {
        exp.seeds = vec![ck.seed];
    }
    exp.validate()?;
    check_checkpoint(&exp, &ck)?;
    let seeds = SeedTree::new(exp.seeds[0]);
    let splits = generate_synthetic(&exp.task, &seeds)?;
    let report = evaluate_checkpoint(&ck, &splits.test, &exp.scenarios, &exp.task.kinds(), &seeds)?;
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}

/// Loads the cached backbone for `seed` when it matches the config,
/// otherwise pretrains and caches it.
fn backbone_for_seed(exp: &ExperimentConfig, cache_dir: &Path, seed: u64) -> rep_core::Result<(BackboneWeights, Splits)> {
    let path = cache_dir.join(format!("seed-{seed}.json"));
    if path.exists() {
        let ck = Checkpoint::load(&path)?;
        if ck.backbone_config == exp.backbone && ck.seed == seed && ck.records.contains_key("pretrain") {
            let splits = generate_synthetic(&exp.task, &SeedTree::new(seed))?;
            return Ok((ck.backbone()?, splits));
        }
    }
    let (weights, splits, ck) = pretrain_for_seed(exp, seed)?;
    std::fs::create_dir_all(cache_dir)?;
    ck.save(&path)?;
    Ok((weights, splits))
}

/// Everything that must match for previous rows to be reusable. Seeds may
/// be extended between runs.
fn resume_key(exp: &ExperimentConfig) -> anyhow::Result<serde_json::Value> {
    let mut v = serde_json::to_value(exp)?;
    if let Some(map) = v.as_object_mut() {
        map.remove("seeds");
        map.remove("output_dir");
    }
    Ok(v)
}

pub fn ablate(common: &Common) -> anyhow::Result<()> {
    let exp = load(common)?;
    exp.validate()?;
    let cells = exp.ablation.resolve_cells()?;
    for cell in &cells {
        cell.apply(&exp.rep)
            .check_backbone(&exp.backbone)
            .map_err(|e| match e {
                Error::Config { path, message } => Error::Config {
                    path: format!("ablation cell `{}`: {path}", cell.id),
                    message,
                },
                Error::Compatibility(m) => Error::Compatibility(format!("cell `{}`: {m}", cell.id)),
                other => other,
            })?;
    }
    let dir = prepare_output(&exp)?.to_path_buf();
    let csv_path = dir.join(RESULTS_CSV);
    let resolved_path = dir.join(RESOLVED_CONFIG);
    if csv_path.exists() && resolved_path.exists() {
        let previous = ExperimentConfig::from_json(&std::fs::read_to_string(&resolved_path).map_err(Error::from)?)?;
        if resume_key(&previous)? != resume_key(&exp)? {
            return Err(Error::config(
                "output_dir",
                format!("{} holds results of a different config; pick another output directory", dir.display()),
            )
            .into());
        }
    }
    write_resolved(&exp)?;

    let paths = AblationPaths {
        csv: &csv_path,
        json: &dir.join(RESULTS_JSON),
        errors: &dir.join(ERRORS_JSON),
    };
    let cache_dir = dir.join("backbones");
    let total = cells.len() * exp.seeds.len();
    let mut seen = 0usize;
    let mut failed = 0usize;
    let rows = run_ablation(
        &exp,
        &cells,
        &paths,
        |seed| backbone_for_seed(&exp, &cache_dir, seed),
        |p| {
            seen += 1;
            match p {
                Progress::Skipped { cell, seed } => eprintln!("[{seen}/{total}] {cell} seed={seed} already done"),
                Progress::Done { cell, seed, rows } => {
                    let accs: Vec<String> = rows.iter().map(|r| format!("{}={:.4}", r.scenario, r.acc)).collect();
                    eprintln!("[{seen}/{total}] {cell} seed={seed} {}", accs.join(" "));
                }
                Progress::Failed { cell, seed, error } => {
                    failed += 1;
                    eprintln!("[{seen}/{total}] {cell} seed={seed} FAILED: {error}");
                }
            }
        },
    )?;
    println!("rows={} failed_cells={failed} results={}", rows.len(), csv_path.display());
    if failed > 0 {
        eprintln!("warning: {failed} cell(s) failed; see {}", paths.errors.display());
    }
    Ok(())
}

pub fn report(results: &Path, out: Option<&Path>) -> anyhow::Result<()> {
    let rows = read_csv(results).with_context(|| format!("reading {}", results.display()))?;
    let dir = match out {
        Some(d) => d.to_path_buf(),
        None => results.parent().map(Path::to_path_buf).unwrap_or_default(),
    };
    if !dir.as_os_str().is_empty() {
        std::fs::create_dir_all(&dir).map_err(Error::from)?;
    }
    for (name, contents) in report_files(&rows) {
        write_atomic(&dir.join(name), contents.as_bytes())?;
    }
    print!("{}", summary_table(&rows));
    Ok(())
}
