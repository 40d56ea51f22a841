//! Gnuplot scripts for the tabular outputs of a record.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::record::{ExperimentRecord, Table};
use crate::LabError;

fn col(t: &Table, name: &str) -> Option<usize> {
    t.columns.iter().position(|c| c == name).map(|i| i + 1)
}

fn header(title: &str, xlabel: &str, ylabel: &str, log: bool) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "set datafile separator ','");
    let _ = writeln!(s, "set key autotitle columnhead");
    let _ = writeln!(s, "set title '{title}'");
    let _ = writeln!(s, "set xlabel '{xlabel}'");
    let _ = writeln!(s, "set ylabel '{ylabel}'");
    if log {
        let _ = writeln!(s, "set logscale xy");
    }
    s
}

fn series(file: &str, x: usize, ys: &[usize], style: &str) -> String {
    let parts: Vec<String> = ys.iter().map(|y| format!("'{file}' using {x}:{y} with {style}")).collect();
    format!("plot {}\n", parts.join(", \\\n     "))
}

/// Script text for one table, or `None` for tables without a standard plot.
pub fn script(t: &Table) -> Option<String> {
    let file = format!("{}.csv", t.name);
    let (mut s, x, ys, style) = match t.name.as_str() {
        "bands" => {
            let ys: Vec<usize> = t.columns.iter().enumerate().filter(|(_, c)| c.starts_with("band_")).map(|(i, _)| i + 1).collect();
            (header("band structure", "k_x", "energy", false), col(t, "kx")?, ys, "lines")
        }
        "decoupling" => (header("decoupling", "separation", "delta", true), col(t, "separation")?, vec![col(t, "delta")?], "linespoints"),
        "localization" => (
            header("localization errors", "R", "error", true),
            col(t, "radius")?,
            vec![col(t, "e_rho")?, col(t, "e_kin")?],
            "linespoints",
        ),
        "macrolimit" => (header("macroscopic limit", "lambda", "lambda F_crys", false), col(t, "lambda")?, vec![col(t, "lambda_f_crys")?], "linespoints"),
        "trial_sweep" => (header("dilated trial states", "lambda", "lambda (E - E_per)", false), col(t, "lambda")?, vec![col(t, "scaled")?], "linespoints"),
        "binding" => (header("binding table", "k", "energy", false), col(t, "k")?, vec![col(t, "split")?, col(t, "e_n")?], "points"),
        "outer_trace" => (header("alternating minimization", "half step", "energy", false), col(t, "half_step")?, vec![col(t, "energy")?], "lines"),
        "choquard_trace" => (header("Choquard descent", "iteration", "energy", false), col(t, "iteration")?, vec![col(t, "energy")?], "lines"),
        _ => return None,
    };
    if ys.is_empty() {
        return None;
    }
    s.push_str(&series(&file, x, &ys, style));
    Some(s)
}

/// Writes one `<table>.gp` per plottable table into `dir` and returns their paths.
pub fn emit_plots(record: &ExperimentRecord, dir: &Path) -> Result<Vec<PathBuf>, LabError> {
    let mut paths = Vec::new();
    for t in &record.table_data {
        if let Some(text) = script(t) {
            let path = dir.join(format!("{}.gp", t.name));
            fs::write(&path, text)?;
            paths.push(path);
        }
    }
    Ok(paths)
}
