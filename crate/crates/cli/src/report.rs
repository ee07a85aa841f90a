//! Measured-versus-predicted tables gathered from finished run directories.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde_json::{json, Value};

use crate::output::Row;

/// One line of the comparison table.
#[derive(Clone, Debug, PartialEq)]
pub struct ReportLine {
    pub run: String,
    pub experiment: String,
    pub quantity: String,
    pub measured: f64,
    pub predicted: Option<f64>,
    pub pass: bool,
}

fn run_name(dir: &Path) -> String {
    dir.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| dir.display().to_string())
}

fn num(v: &Value) -> f64 {
    v.as_f64().unwrap_or(f64::NAN)
}

/// Reads `summary.json` from each directory. Directories without one are
/// skipped; finding none at all is an error.
pub fn collect(dirs: &[PathBuf]) -> Result<Vec<ReportLine>> {
    let mut lines = Vec::new();
    let mut found = 0;
    for dir in dirs {
        let path = dir.join("summary.json");
        if !path.exists() {
            continue;
        }
        let text = std::fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
        let s: Value = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        found += 1;
        lines.extend(lines_of(&run_name(dir), &s));
    }
    if found == 0 {
        bail!("no summary.json found in {} director{}", dirs.len(), if dirs.len() == 1 { "y" } else { "ies" });
    }
    Ok(lines)
}

fn lines_of(run: &str, s: &Value) -> Vec<ReportLine> {
    let experiment = s["experiment"].as_str().unwrap_or("unknown").to_string();
    let d = &s["details"];
    let line = |quantity: &str, measured: f64, predicted: Option<f64>, pass: bool| ReportLine {
        run: run.to_string(),
        experiment: experiment.clone(),
        quantity: quantity.to_string(),
        measured,
        predicted,
        pass,
    };
    let pass = s["pass"].as_bool().unwrap_or(false);
    match experiment.as_str() {
        "rates" => d["fits"]
            .as_array()
            .map(|fits| {
                fits.iter()
                    .map(|f| {
                        line(
                            &format!("{} exponent", f["quantity"].as_str().unwrap_or("?")),
                            num(&f["measured"]),
                            Some(num(&f["predicted"])),
                            f["pass"].as_bool().unwrap_or(false),
                        )
                    })
                    .collect()
            })
            .unwrap_or_default(),
        "trace" => vec![line("tail exponent vs threshold", num(&d["tail_exponent"]), Some(-1.0), pass)],
        "fixed-point" => vec![
            line("contraction ratio", num(&d["q_empirical"]), Some(num(&d["q_theory"])), pass),
            line("lambda0", num(&d["lambda0"]), None, pass),
        ],
        "ou-check" => vec![line("relative derivative gap", num(&d["max_relative_gap"]), Some(num(&d["tolerance"])), pass)],
        "control" => vec![line("relative residual", num(&d["max_relative_residual"]), Some(num(&d["residual_tolerance"])), pass)],
        "uniqueness" => vec![line("cells passed", num(&d["passed"]), Some(num(&d["cells"])), pass)],
        "simulate" => vec![line("final second moment", num(&d["final_second_moment"]), d["exact_check"]["second_moment"].as_f64(), pass)],
        "cauchy" => vec![line("monotone gaps", if d["monotone"].as_bool() == Some(true) { 1.0 } else { 0.0 }, Some(1.0), pass)],
        _ => Vec::new(),
    }
}

pub fn rows(lines: &[ReportLine]) -> Vec<Row> {
    let mut out = Vec::new();
    for l in lines {
        let key = format!("{}/{}/{}", l.run, l.experiment, l.quantity);
        out.push(Row::new(format!("{key}/measured"), None, l.measured, None));
        if let Some(p) = l.predicted {
            out.push(Row::new(format!("{key}/predicted"), None, p, None));
        }
    }
    out
}

pub fn markdown(lines: &[ReportLine]) -> String {
    let mut s = String::from("| run | experiment | quantity | measured | predicted | pass |\n|---|---|---|---|---|---|\n");
    for l in lines {
        let predicted = l.predicted.map(|p| format!("{p:.4}")).unwrap_or_else(|| "-".into());
        s.push_str(&format!(
            "| {} | {} | {} | {:.4} | {} | {} |\n",
            l.run,
            l.experiment,
            l.quantity,
            l.measured,
            predicted,
            if l.pass { "yes" } else { "no" }
        ));
    }
    s
}

pub fn summary(lines: &[ReportLine]) -> Value {
    json!({
        "experiment": "report",
        "lines": lines.len(),
        "passed": lines.iter().filter(|l| l.pass).count(),
        "pass": lines.iter().all(|l| l.pass),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rates_summary_becomes_lines() {
        let s = json!({
            "experiment": "rates",
            "pass": true,
            "details": {"fits": [{"quantity": "gamma-v", "measured": 0.71, "predicted": 0.7, "pass": true}]}
        });
        let lines = lines_of("heat", &s);
        assert_eq!(lines.len(), 1);
        assert_eq!(lines[0].quantity, "gamma-v exponent");
        assert_eq!(lines[0].predicted, Some(0.7));
        assert!(markdown(&lines).contains("| heat | rates | gamma-v exponent | 0.7100 | 0.7000 | yes |"));
    }

    #[test]
    fn empty_directory_list_is_an_error() {
        assert!(collect(&[std::env::temp_dir().join("weak-spde-no-such-run")]).is_err());
    }
}
