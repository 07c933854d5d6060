//! JSON reports and CSV tables.
//!
//! Reports are `serde_json::Value` trees. Objects are `BTreeMap`-backed, so keys
//! come out sorted and the rendered text depends only on the values; together
//! with ryu float formatting that makes a report byte-for-byte reproducible.
//! Non-finite floats render as `null`.

use std::path::Path;

use serde::Serialize;
use serde_json::{json, Value};

use crate::config::RunConfig;
use crate::diophantine::DiophantineVerdict;
use crate::error::{KamError, Result};
use crate::kam_newton::{KamBudget, TorusSolution};
use crate::smoothing::ApproximantSequence;

/// Bumped whenever the layout of a report changes.
pub const REPORT_VERSION: u32 = 1;

pub fn to_value<T: Serialize>(t: &T) -> Result<Value> {
    serde_json::to_value(t).map_err(|e| KamError::Io(format!("serializing report: {e}")))
}

/// Wraps `body` with the version, the report kind and the resolved config.
pub fn document(kind: &str, config: Option<&RunConfig>, body: Value) -> Result<Value> {
    let config = match config {
        Some(c) => to_value(c)?,
        None => Value::Null,
    };
    Ok(json!({
        "version": REPORT_VERSION,
        "code_version": env!("CARGO_PKG_VERSION"),
        "kind": kind,
        "config": config,
        "body": body,
    }))
}

/// Canonical text form: pretty-printed, trailing newline.
pub fn render(v: &Value) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("a Value always serializes");
    s.push('\n');
    s
}

/// Re-renders a report read back from disk; `reemit(render(v)) == render(v)`.
pub fn reemit(text: &str) -> Result<String> {
    let v: Value = serde_json::from_str(text).map_err(|e| KamError::Parse { line: e.line(), message: e.to_string() })?;
    if v.get("version").and_then(Value::as_u64).is_none() {
        return Err(KamError::Parse { line: 1, message: "not a report: missing `version`".into() });
    }
    Ok(render(&v))
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir).map_err(|e| KamError::Io(format!("{}: {e}", dir.display())))?;
        }
    }
    std::fs::write(path, text).map_err(|e| KamError::Io(format!("{}: {e}", path.display())))
}

pub fn write_json(path: &Path, v: &Value) -> Result<()> {
    write_text(path, &render(v))
}

/// CSV with a header row; floats in `{:e}` form.
pub fn csv_table(header: &[&str], rows: &[Vec<f64>]) -> String {
    let mut s = header.join(",");
    s.push('\n');
    for r in rows {
        let cells: Vec<String> = r.iter().map(|x| format!("{x:e}")).collect();
        s.push_str(&cells.join(","));
        s.push('\n');
    }
    s
}

pub fn diophantine_body(omega: &[f64], gamma: f64, sigma: f64, v: &DiophantineVerdict) -> Value {
    json!({
        "omega": omega,
        "gamma": gamma,
        "sigma": sigma,
        "pass": v.pass,
        "gamma_est": v.gamma_est,
        "worst_k": v.worst_k,
        "margin": v.margin,
        "verified_up_to": v.verified_up_to,
    })
}

pub fn solve_body(sol: &TorusSolution, budget: &KamBudget) -> Result<Value> {
    Ok(json!({
        "lambda": sol.lambda,
        "initial_residual": sol.initial_residual,
        "residual": to_value(&sol.residual)?,
        "rho_final": sol.rho_final,
        "iterations": sol.iterations(),
        "history": to_value(&sol.history)?,
        "smallness": to_value(&sol.smallness)?,
        "c_calibrated": sol.c_calibrated,
        "budget": to_value(budget)?,
        // The two beta formulas differ; both are carried, beta_step is audited.
        "beta_step": budget.beta_step,
        "beta_total": budget.beta_total,
        "audit": to_value(&sol.audit)?,
        "audit_pass": sol.audit.pass(),
        "audit_failures": sol.audit.failures(),
        "diagnostics_initial": to_value(&sol.initial_nondegeneracy)?,
        "diagnostics": to_value(&sol.nondegeneracy.diagnostics())?,
    }))
}

/// Per-iteration residuals and step diagnostics.
pub fn history_csv(sol: &TorusSolution) -> String {
    let rows: Vec<Vec<f64>> = sol
        .history
        .iter()
        .map(|h| {
            vec![
                h.iteration as f64,
                h.step.rho_in,
                h.step.rho_out,
                h.step.residual_in,
                h.step.residual_out,
                h.residual,
                h.step.correction_norm,
                h.step.c_obs,
            ]
        })
        .collect();
    csv_table(
        &["iteration", "rho_in", "rho_out", "residual_in", "residual_out", "residual_half_strip", "correction", "c_obs"],
        &rows,
    )
}

pub fn selection_body(seq: &ApproximantSequence) -> Result<Value> {
    let elements: Vec<Value> = seq
        .elements
        .iter()
        .map(|e| json!({"k": e.k, "level": e.level, "distance": e.distance, "threshold": e.threshold}))
        .collect();
    Ok(json!({
        "backend": to_value(&seq.backend)?,
        "a": seq.a,
        "exponent": seq.exponent,
        "k0": seq.k0,
        "elements": elements,
        "consecutive": seq.consecutive,
        "envelope_holds": seq.envelope_holds,
        "records": to_value(&seq.records)?,
        "stall": to_value(&seq.stall)?,
    }))
}

/// `k, level, measured distance, threshold` for every retained element.
pub fn selection_csv(seq: &ApproximantSequence) -> String {
    let rows: Vec<Vec<f64>> =
        seq.elements.iter().map(|e| vec![e.k as f64, e.level as f64, e.distance, e.threshold]).collect();
    csv_table(&["k", "level", "distance", "threshold"], &rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn keys_are_sorted_and_reemit_is_idempotent() {
        let doc = document("demo", None, json!({"zeta": 1.0, "alpha": [1, 2], "nan": f64::NAN})).unwrap();
        let text = render(&doc);
        assert!(text.find("\"alpha\"").unwrap() < text.find("\"zeta\"").unwrap());
        assert!(text.contains("\"nan\": null"));
        let again = reemit(&text).unwrap();
        assert_eq!(again, text);
        assert_eq!(reemit(&again).unwrap(), text);
    }

    #[test]
    fn reemit_rejects_non_reports() {
        assert!(reemit("{\"a\": 1}").is_err());
        assert!(matches!(reemit("{\n\"version\": ").unwrap_err(), KamError::Parse { line: 2, .. }));
    }

    #[test]
    fn config_is_embedded() {
        let cfg = RunConfig::default();
        let doc = document("solve", Some(&cfg), Value::Null).unwrap();
        assert_eq!(doc["config"]["solver"]["rho"], json!(0.1));
        assert_eq!(doc["version"], json!(REPORT_VERSION));
    }

    #[test]
    fn csv_layout() {
        let s = csv_table(&["a", "b"], &[vec![1.0, 0.5], vec![2.0, 1e-12]]);
        assert_eq!(s, "a,b\n1e0,5e-1\n2e0,1e-12\n");
    }
}
