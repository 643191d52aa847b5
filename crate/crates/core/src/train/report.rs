//! Aggregation of a results table into summary and plot-data files.
//!
//! Every output is plain tab- or comma-separated text with fixed float
//! formatting and sorted keys, so rerunning on the same input reproduces
//! the same bytes.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use super::ablation::ResultRow;

/// Mean and sample standard deviation (`n − 1` denominator; 0 for a single
/// value).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let ss: f64 = values.iter().map(|v| (v - mean) * (v - mean)).sum();
    (mean, (ss / (n - 1) as f64).sqrt())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Aggregate {
    pub n: usize,
    pub acc: (f64, f64),
    pub f1_macro: (f64, f64),
    pub auroc: (f64, f64),
}

fn aggregate<'a>(rows: impl IntoIterator<Item = &'a ResultRow>) -> Aggregate {
    let (mut a, mut f, mut u) = (Vec::new(), Vec::new(), Vec::new());
    for r in rows {
        a.push(r.acc);
        f.push(r.f1_macro);
        u.push(r.auroc);
    }
    Aggregate {
        n: a.len(),
        acc: mean_std(&a),
        f1_macro: mean_std(&f),
        auroc: mean_std(&u),
    }
}

fn metric_columns(a: &Aggregate) -> String {
    format!(
        "{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.6}",
        a.acc.0, a.acc.1, a.f1_macro.0, a.f1_macro.1, a.auroc.0, a.auroc.1
    )
}

const METRIC_HEADER: &str = "acc_mean\tacc_std\tf1_macro_mean\tf1_macro_std\tauroc_mean\tauroc_std";

/// Sort key that orders numeric strings numerically and others lexically.
fn sort_key(s: &str) -> (u8, i128, String) {
    match s.parse::<f64>() {
        Ok(v) if v.is_finite() => (0, (v * 1e9).round() as i128, s.to_string()),
        _ => (1, 0, s.to_string()),
    }
}

/// Per-cell summary: one line per `(cell, scenario)`, cells in first-seen
/// order.
pub fn summary_table(rows: &[ResultRow]) -> String {
    let mut order: Vec<String> = Vec::new();
    let mut groups: BTreeMap<(String, String), Vec<&ResultRow>> = BTreeMap::new();
    for r in rows {
        if !order.contains(&r.cell_id) {
            order.push(r.cell_id.clone());
        }
        groups.entry((r.cell_id.clone(), r.scenario.clone())).or_default().push(r);
    }
    let mut out = format!("cell_id\tscenario\tn\t{METRIC_HEADER}\tparam_fraction\n");
    for cell in &order {
        for ((c, scenario), group) in &groups {
            if c != cell {
                continue;
            }
            let agg = aggregate(group.iter().copied());
            let _ = writeln!(
                out,
                "{c}\t{scenario}\t{}\t{}\t{:.4}",
                agg.n,
                metric_columns(&agg),
                group[0].param_fraction
            );
        }
    }
    out
}

/// Plot data along one axis: one line per `(axis value, scenario)`.
pub fn axis_table(rows: &[ResultRow], axis: &str, value: impl Fn(&ResultRow) -> String) -> String {
    let mut groups: BTreeMap<((u8, i128, String), String), Vec<&ResultRow>> = BTreeMap::new();
    for r in rows {
        groups.entry((sort_key(&value(r)), r.scenario.clone())).or_default().push(r);
    }
    let mut out = format!("{axis}\tscenario\tn\t{METRIC_HEADER}\n");
    for (((_, _, v), scenario), group) in &groups {
        let agg = aggregate(group.iter().copied());
        let _ = writeln!(out, "{v}\t{scenario}\t{}\t{}", agg.n, metric_columns(&agg));
    }
    out
}

/// Depth × width grid: one line per `(d, l, scenario)`.
pub fn depth_width_table(rows: &[ResultRow]) -> String {
    let mut groups: BTreeMap<(usize, usize, String), Vec<&ResultRow>> = BTreeMap::new();
    for r in rows {
        groups.entry((r.d, r.l, r.scenario.clone())).or_default().push(r);
    }
    let mut out = format!("d\tl\tscenario\tn\t{METRIC_HEADER}\n");
    for ((d, l, scenario), group) in &groups {
        let agg = aggregate(group.iter().copied());
        let _ = writeln!(out, "{d}\t{l}\t{scenario}\t{}\t{}", agg.n, metric_columns(&agg));
    }
    out
}

/// All report files as `(file name, contents)`.
pub fn report_files(rows: &[ResultRow]) -> Vec<(String, String)> {
    vec![
        ("summary.tsv".into(), summary_table(rows)),
        ("plot_l.tsv".into(), axis_table(rows, "l", |r| r.l.to_string())),
        ("plot_d.tsv".into(), axis_table(rows, "d", |r| r.d.to_string())),
        ("plot_eps_n.tsv".into(), axis_table(rows, "eps_n", |r| r.eps_n.to_string())),
        ("plot_noise_type.tsv".into(), axis_table(rows, "noise_type", |r| r.noise_type.clone())),
        ("plot_depth_width.tsv".into(), depth_width_table(rows)),
    ]
}
