//! CSV and aligned-text rendering of scenario summaries.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::harness::ScenarioSummary;

pub const CSV_COLUMNS: [&str; 17] = [
    "scenario_id",
    "method",
    "selection",
    "time_adjust",
    "effect_model",
    "engine",
    "estimand_kind",
    "truth",
    "n_reps",
    "n_converged",
    "mean_estimate",
    "bias",
    "empirical_se",
    "median_model_se",
    "coverage",
    "rejection_rate",
    "mc_se_rejection",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum EmitFormat {
    Csv,
    Text,
}

/// Serialized name of a unit enum variant.
fn label<T: Serialize>(v: &T) -> String {
    match serde_json::to_value(v) {
        Ok(serde_json::Value::String(s)) => s,
        other => format!("{other:?}"),
    }
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

fn sorted(summaries: &[ScenarioSummary]) -> Vec<&ScenarioSummary> {
    let mut v: Vec<&ScenarioSummary> = summaries.iter().collect();
    v.sort_by(|a, b| (&a.scenario_id, &a.method_key).cmp(&(&b.scenario_id, &b.method_key)));
    v
}

pub fn render_csv(summaries: &[ScenarioSummary]) -> String {
    let mut out = CSV_COLUMNS.join(",");
    out.push('\n');
    for s in sorted(summaries) {
        let fields = [
            csv_field(&s.scenario_id),
            csv_field(&s.method_key),
            label(&s.selection),
            label(&s.time_adjust),
            label(&s.effect_model),
            label(&s.engine),
            label(&s.estimand_kind),
            opt(s.truth),
            s.n_reps.to_string(),
            s.n_converged.to_string(),
            opt(s.mean_estimate),
            opt(s.bias),
            opt(s.empirical_se),
            opt(s.median_model_se),
            opt(s.coverage),
            opt(s.rejection_rate),
            opt(s.mc_se_rejection),
        ];
        out.push_str(&fields.join(","));
        out.push('\n');
    }
    out
}

fn fixed(v: Option<f64>) -> String {
    v.map_or_else(|| "**".to_string(), |x| format!("{x:.3}"))
}

/// One panel per scenario, one row per method; absent values print as `**`.
pub fn render_text(summaries: &[ScenarioSummary]) -> String {
    let rows = sorted(summaries);
    let width = rows.iter().map(|s| s.method_key.len()).max().unwrap_or(0).max(6);
    let mut out = String::new();
    let mut current: Option<&str> = None;
    for s in rows {
        if current != Some(s.scenario_id.as_str()) {
            if current.is_some() {
                out.push('\n');
            }
            current = Some(&s.scenario_id);
            let _ = writeln!(out, "Scenario {}", s.scenario_id);
            let _ = writeln!(
                out,
                "{:<width$}  {:>12}  {:>8}  {:>8}  {:>8}  {:>8}  {:>8}  {:>8}  {:>8}  {:>9}",
                "method", "estimand", "truth", "estimate", "bias", "emp_se", "model_se", "coverage", "reject", "converged"
            );
        }
        let _ = writeln!(
            out,
            "{:<width$}  {:>12}  {:>8}  {:>8}  {:>8}  {:>8}  {:>8}  {:>8}  {:>8}  {:>9}",
            s.method_key,
            label(&s.estimand_kind),
            fixed(s.truth),
            fixed(s.mean_estimate),
            fixed(s.bias),
            fixed(s.empirical_se),
            fixed(s.median_model_se),
            fixed(s.coverage),
            fixed(s.rejection_rate),
            format!("{}/{}", s.n_converged, s.n_reps),
        );
    }
    out
}

pub fn render(summaries: &[ScenarioSummary], format: EmitFormat) -> String {
    match format {
        EmitFormat::Csv => render_csv(summaries),
        EmitFormat::Text => render_text(summaries),
    }
}

pub fn emit_summaries(summaries: &[ScenarioSummary], format: EmitFormat, path: &Path) -> Result<()> {
    std::fs::write(path, render(summaries, format)).map_err(|source| Error::Io {
        path: path.display().to_string(),
        source,
    })
}
