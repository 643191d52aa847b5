use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

const TINY: &str = r#"{
  "task": {"n_train": 64, "n_val": 32, "n_test": 32},
  "backbone": {"d_model": 8, "n_layers": 2, "n_heads": 2, "ffn_hidden": 16},
  "pretrain": {"optimizer": {"epochs": 2}, "threshold": 0.0},
  "rep": {"buffer_width": 2, "replay_depth": 2, "calibration_samples": 8},
  "optimizer": {"epochs": 1, "lr": 0.05},
  "seeds": [0]
}"#;

struct Workspace {
    dir: tempfile::TempDir,
}

impl Workspace {
    fn new() -> Self {
        let ws = Self {
            dir: tempfile::tempdir().unwrap(),
        };
        ws.write("tiny.json", TINY);
        ws
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn write(&self, name: &str, text: &str) -> PathBuf {
        let p = self.path(name);
        std::fs::write(&p, text).unwrap();
        p
    }

    fn read(&self, name: &str) -> String {
        std::fs::read_to_string(self.path(name)).unwrap()
    }

    fn json(&self, name: &str) -> Value {
        serde_json::from_str(&self.read(name)).unwrap()
    }

    /// Runs `rep` inside the workspace with the tiny config and `out` as the
    /// output directory unless the arguments say otherwise.
    fn rep(&self, args: &[&str]) -> Output {
        self.rep_in(args, "out")
    }

    fn rep_in(&self, args: &[&str], out: &str) -> Output {
        Command::new(env!("CARGO_BIN_EXE_rep"))
            .args(args)
            .current_dir(self.dir.path())
            .env("REP_OUTPUT_DIR", out)
            .output()
            .unwrap()
    }
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn field(line: &str, key: &str) -> String {
    line.split_whitespace()
        .find_map(|kv| kv.strip_prefix(&format!("{key}=")))
        .unwrap_or_else(|| panic!("no {key} in {line}"))
        .to_string()
}

#[test]
fn missing_required_field_exits_2_naming_the_path() {
    let ws = Workspace::new();
    ws.write("bad.json", r#"{"scenarios": [{"mode": "multi", "modalities": [0, 1]}]}"#);
    let o = ws.rep(&["pretrain", "-c", "bad.json"]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));
    assert!(stderr(&o).contains("scenarios[0].rate"), "{}", stderr(&o));
}

#[test]
fn unknown_override_exits_2() {
    let ws = Workspace::new();
    let o = ws.rep(&["tune", "-c", "tiny.json", "--set", "rep.buffer_widht=3"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("rep.buffer_widht"));
}

#[test]
fn pretrain_is_deterministic_and_reports_its_record() {
    let ws = Workspace::new();
    let a = ws.rep_in(&["pretrain", "-c", "tiny.json"], "a");
    let b = ws.rep_in(&["pretrain", "-c", "tiny.json"], "b");
    assert_eq!(code(&a), 0, "{}", stderr(&a));
    assert_eq!(code(&b), 0);
    let (la, lb) = (stdout(&a), stdout(&b));
    assert_eq!(field(&la, "sha256"), field(&lb, "sha256"));
    assert_eq!(ws.read("a/backbone.json"), ws.read("b/backbone.json"));

    let ck = ws.json("a/backbone.json");
    let record = &ck["records"]["pretrain"];
    for key in ["train_accuracy", "val_accuracy", "test_accuracy"] {
        let printed: f64 = field(&la, key).parse().unwrap();
        let stored = record[key].as_f64().unwrap();
        assert_eq!(printed, format!("{stored:.6}").parse::<f64>().unwrap());
    }
}

#[test]
fn convergence_failure_exits_4() {
    let ws = Workspace::new();
    let o = ws.rep(&["pretrain", "-c", "tiny.json", "--set", "pretrain.threshold=1.01"]);
    assert_eq!(code(&o), 4, "{}", stderr(&o));
    assert!(stderr(&o).contains("did not converge"));
}

#[test]
fn replay_deeper_than_backbone_exits_3_with_both_numbers() {
    let ws = Workspace::new();
    let o = ws.rep(&["tune", "-c", "tiny.json", "--buffer-depth", "5"]);
    assert_eq!(code(&o), 3);
    let err = stderr(&o);
    assert!(err.contains('5') && err.contains('2'), "{err}");
}

#[test]
fn mismatched_backbone_checkpoint_exits_3() {
    let ws = Workspace::new();
    assert_eq!(code(&ws.rep(&["pretrain", "-c", "tiny.json"])), 0);
    let o = ws.rep(&[
        "tune",
        "-c",
        "tiny.json",
        "--backbone",
        "out/backbone.json",
        "--set",
        "backbone.d_model=12",
    ]);
    assert_eq!(code(&o), 3, "{}", stderr(&o));
    assert!(stderr(&o).contains("d_model 8") && stderr(&o).contains("d_model 12"));
}

#[test]
fn tune_writes_outputs_and_resolves_flags() {
    let ws = Workspace::new();
    let o = ws.rep(&[
        "tune",
        "-c",
        "tiny.json",
        "--missing-scenario",
        "single:image:0.7",
        "--missing-scenario",
        "complete",
        "--buffer-width",
        "3",
        "--noise-eps",
        "0.3",
        "--noise-type",
        "laplace",
        "--ortho-weight",
        "0.5",
        "--seed",
        "4",
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let resolved = ws.json("out/resolved_config.json");
    assert_eq!(resolved["rep"]["buffer_width"], 3);
    assert_eq!(resolved["rep"]["noise_intensity"], 0.3);
    assert_eq!(resolved["rep"]["noise_type"], "laplace");
    assert_eq!(resolved["rep"]["ortho_weight"], 0.5);
    assert_eq!(resolved["seeds"], serde_json::json!([4]));
    assert_eq!(resolved["output_dir"], "out");

    let metrics = ws.json("out/metrics.json");
    let names: Vec<&str> = metrics["scenarios"]
        .as_array()
        .unwrap()
        .iter()
        .map(|s| s["scenario"].as_str().unwrap())
        .collect();
    assert_eq!(names, ["single:0:0.7", "complete"]);
    assert_eq!(metrics["seed"], 4);

    let log = ws.read("out/train_log.csv");
    let header = log.lines().next().unwrap();
    assert!(header.starts_with("epoch,loss,task_loss,ortho_loss,alpha_0,alpha_1,eps_shared,beta_private,beta_shared"));
    assert_eq!(log.lines().count(), 2);
}

#[test]
fn default_tune_resolves_the_desk_buffer_width() {
    let ws = Workspace::new();
    let o = ws.rep(&["tune", "-c", "tiny.json", "--set", "rep.buffer_width=36"]);
    assert_eq!(code(&o), 0);
    assert_eq!(ws.json("out/resolved_config.json")["rep"]["buffer_width"], 36);

    // an empty config resolves every default, including the clipped width
    ws.write("empty.json", "{}");
    let o = ws.rep_in(&["pretrain", "-c", "empty.json", "--set", "pretrain.optimizer.epochs=0", "--set", "pretrain.threshold=0", "--set", "task.n_train=8", "--set", "task.n_val=8", "--set", "task.n_test=8"], "defaults");
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let resolved = ws.json("defaults/resolved_config.json");
    assert_eq!(resolved["rep"]["buffer_width"], 4);
    assert_eq!(resolved["rep"]["replay_depth"], 6);
}

#[test]
fn rerun_from_resolved_config_reproduces_metrics_bitwise() {
    let ws = Workspace::new();
    let o = ws.rep_in(&["tune", "-c", "tiny.json", "--buffer-width", "3", "--seed", "2"], "first");
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let o = ws.rep_in(&["tune", "-c", "first/resolved_config.json"], "second");
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(ws.read("first/metrics.json"), ws.read("second/metrics.json"));
    assert_eq!(ws.read("first/rep_checkpoint.json"), ws.read("second/rep_checkpoint.json"));
}

#[test]
fn tune_with_pretrained_checkpoint_matches_inline_pretraining() {
    let ws = Workspace::new();
    assert_eq!(code(&ws.rep_in(&["pretrain", "-c", "tiny.json"], "bb")), 0);
    let a = ws.rep_in(&["tune", "-c", "tiny.json", "--backbone", "bb/backbone.json"], "a");
    let b = ws.rep_in(&["tune", "-c", "tiny.json"], "b");
    assert_eq!(code(&a), 0, "{}", stderr(&a));
    assert_eq!(code(&b), 0);
    assert_eq!(ws.read("a/metrics.json"), ws.read("b/metrics.json"));
}

#[test]
fn evaluate_reproduces_tuned_metrics() {
    let ws = Workspace::new();
    assert_eq!(code(&ws.rep(&["tune", "-c", "tiny.json"])), 0);
    let o = ws.rep(&["evaluate", "-c", "tiny.json", "--checkpoint", "out/rep_checkpoint.json"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let printed: Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(printed, ws.json("out/metrics.json"));
}

fn grid_config(ws: &Workspace, cells: &str, seeds: &str) -> PathBuf {
    let mut v: Value = serde_json::from_str(TINY).unwrap();
    v["ablation"] = serde_json::from_str(cells).unwrap();
    v["seeds"] = serde_json::from_str(seeds).unwrap();
    ws.write("grid.json", &v.to_string())
}

#[test]
fn one_cell_grid_equals_tune() {
    let ws = Workspace::new();
    grid_config(&ws, r#"{"cells": [{"id": "only"}]}"#, "[3]");
    let o = ws.rep_in(&["ablate", "-c", "grid.json"], "grid");
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let o = ws.rep_in(&["tune", "-c", "grid.json"], "tune");
    assert_eq!(code(&o), 0, "{}", stderr(&o));

    let rows = ws.json("grid/results.json");
    let row = &rows[0];
    let metrics = ws.json("tune/metrics.json");
    let m = &metrics["scenarios"][0];
    assert_eq!(row["acc"], m["accuracy"]);
    assert_eq!(row["f1_macro"], m["f1_macro"]);
    assert_eq!(row["auroc"], m["auroc"]);
    assert_eq!(row["param_fraction"], metrics["param_fraction"]);
}

#[test]
fn grid_cardinality_and_resume() {
    let ws = Workspace::new();
    let cells = r#"{"cells": [{"id": "a"}, {"id": "b", "buffer_width": 3}]}"#;
    let mut v: Value = serde_json::from_str(TINY).unwrap();
    v["ablation"] = serde_json::from_str(cells).unwrap();
    v["seeds"] = serde_json::json!([0, 1]);
    v["scenarios"] = serde_json::json!([
        {"mode": "multi", "modalities": [0, 1], "rate": 0.7},
        {"mode": "single", "modality": 1, "rate": 0.5}
    ]);
    ws.write("grid.json", &v.to_string());

    let o = ws.rep_in(&["ablate", "-c", "grid.json"], "full");
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let full = ws.read("full/results.csv");
    // header plus cells × seeds × scenarios
    assert_eq!(full.lines().count(), 1 + 2 * 2 * 2);

    // interrupt after the first pair: keep only the rows of cell a, seed 0
    std::fs::create_dir_all(ws.path("part")).unwrap();
    let kept: Vec<&str> = full
        .lines()
        .enumerate()
        .filter(|(i, l)| *i == 0 || (l.starts_with("a,") && l.split(',').nth(9) == Some("0")))
        .map(|(_, l)| l)
        .collect();
    assert_eq!(kept.len(), 3);
    ws.write("part/results.csv", &(kept.join("\n") + "\n"));
    let rows: Vec<Value> = serde_json::from_str(&ws.read("full/results.json")).unwrap();
    let kept_json: Vec<&Value> = rows.iter().filter(|r| r["cell_id"] == "a" && r["seed"] == 0).collect();
    ws.write("part/results.json", &serde_json::to_string_pretty(&kept_json).unwrap());
    std::fs::copy(ws.path("full/resolved_config.json"), ws.path("part/resolved_config.json")).unwrap();

    let o = ws.rep_in(&["ablate", "-c", "grid.json"], "part");
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let err = stderr(&o);
    assert_eq!(err.matches("already done").count(), 1, "{err}");
    assert!(err.contains("a seed=0 already done"));
    let mut a: Vec<&str> = full.lines().collect();
    let resumed = ws.read("part/results.csv");
    let mut b: Vec<&str> = resumed.lines().collect();
    a.sort_unstable();
    b.sort_unstable();
    assert_eq!(a, b);
    assert_eq!(ws.read("part/errors.json").trim(), "[]");

    // a finished grid reruns nothing
    let o = ws.rep_in(&["ablate", "-c", "grid.json"], "full");
    assert_eq!(stderr(&o).matches("already done").count(), 4);
    assert_eq!(ws.read("full/results.csv"), full);
}

#[test]
fn resume_refuses_a_different_config() {
    let ws = Workspace::new();
    grid_config(&ws, r#"{"cells": [{"id": "a"}]}"#, "[0]");
    assert_eq!(code(&ws.rep(&["ablate", "-c", "grid.json"])), 0);
    let o = ws.rep(&["ablate", "-c", "grid.json", "--set", "rep.ortho_weight=0.5"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("different config"));
}

#[test]
fn failing_cells_go_to_the_sidecar() {
    let ws = Workspace::new();
    grid_config(
        &ws,
        r#"{"cells": [{"id": "ok"}, {"id": "boom"}]}"#,
        "[0]",
    );
    // every run diverges: both cells are listed and no rows are written
    let o = ws.rep(&["ablate", "-c", "grid.json", "--set", "optimizer.lr=1e300"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let errors = ws.json("out/errors.json");
    let ids: Vec<&str> = errors.as_array().unwrap().iter().map(|e| e["cell_id"].as_str().unwrap()).collect();
    assert_eq!(ids, ["ok", "boom"]);
    assert_eq!(ws.read("out/results.csv").lines().count(), 1);
}

const HEADER: &str = "cell_id,dynamic_init,dual_buffers,replay,private_buffer,l,d,eps_n,noise_type,seed,scenario,acc,f1_macro,auroc,param_fraction";

fn results_row(cell: &str, seed: u64, acc: f64) -> String {
    format!("{cell},true,true,true,true,4,6,0.2,gaussian,{seed},\"multi:0,1:0.7\",{acc},0.5,0.75,0.0172")
}

fn summary_line<'a>(text: &'a str, cell: &str) -> Vec<&'a str> {
    text.lines()
        .find(|l| l.starts_with(&format!("{cell}\t")))
        .unwrap()
        .split('\t')
        .collect()
}

#[test]
fn report_single_row_has_zero_std() {
    let ws = Workspace::new();
    ws.write("r.csv", &format!("{HEADER}\n{}\n", results_row("full", 0, 0.9)));
    let o = ws.rep(&["report", "r.csv", "--out", "rep"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let s = ws.read("rep/summary.tsv");
    let cols = summary_line(&s, "full");
    assert_eq!(&cols[2..5], ["1", "0.900000", "0.000000"]);
    assert_eq!(cols.last(), Some(&"0.0172"));
}

#[test]
fn report_matches_a_hand_average_and_is_byte_stable() {
    let ws = Workspace::new();
    let accs = [0.80, 0.85, 0.90, 0.70, 0.75];
    let mut text = format!("{HEADER}\n");
    for (seed, a) in accs.iter().enumerate() {
        text += &results_row("full", seed as u64, *a);
        text += "\n";
    }
    ws.write("r.csv", &text);
    assert_eq!(code(&ws.rep(&["report", "r.csv", "--out", "one"])), 0);
    assert_eq!(code(&ws.rep(&["report", "r.csv", "--out", "two"])), 0);
    for name in ["summary.tsv", "plot_l.tsv", "plot_d.tsv", "plot_eps_n.tsv", "plot_noise_type.tsv", "plot_depth_width.tsv"] {
        assert_eq!(ws.read(&format!("one/{name}")), ws.read(&format!("two/{name}")), "{name}");
    }
    // mean 4.0 / 5 = 0.8; squared deviations 0 + .0025 + .01 + .01 + .0025 = .025 over 4
    let s = ws.read("one/summary.tsv");
    let cols = summary_line(&s, "full");
    assert_eq!(cols[3], "0.800000");
    assert_eq!(cols[4], format!("{:.6}", (0.025f64 / 4.0).sqrt()));
    assert!(ws.read("one/plot_l.tsv").lines().nth(1).unwrap().starts_with("4\tmulti:0,1:0.7\t5\t0.800000"));
}

#[test]
fn report_rejects_a_foreign_schema() {
    let ws = Workspace::new();
    ws.write("r.csv", "cell,acc\nx,0.5\n");
    let o = ws.rep(&["report", "r.csv"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("header"));
}

#[test]
fn output_dir_comes_from_the_environment() {
    let ws = Workspace::new();
    let o = ws.rep_in(&["pretrain", "-c", "tiny.json", "--set", "output_dir=ignored"], "from_env");
    assert_eq!(code(&o), 0);
    assert!(Path::new(&ws.path("from_env/backbone.json")).exists());
    assert!(!ws.path("ignored").exists());
}
