//! `analyze`: read a metrics table and emit the fitted decay rate, the
//! policy-disagreement exponent, and final-row statistics.

use crate::commands::train::parse_metrics_csv;
use crate::jsonio::{self, JsonObject};
use anyhow::Context;
use dqlab_core::analysis::{fit_holder, fit_rate};
use std::path::Path;

pub fn run(metrics_path: &Path, hash: &str, out: &Path) -> anyhow::Result<()> {
    let text = std::fs::read_to_string(metrics_path)
        .with_context(|| format!("reading {}", metrics_path.display()))?;
    let records = parse_metrics_csv(&text)?;
    if records.is_empty() {
        anyhow::bail!("{} holds no metric rows", metrics_path.display());
    }
    let rate = fit_rate(&records, None);
    let holder = fit_holder(&records);
    let last = records.last().unwrap();
    let report = JsonObject::new()
        .raw("meta", &jsonio::meta_object(hash, &[]))
        .uint("records", records.len() as u64)
        .raw(
            "rate_fit",
            &rate.map(|f| jsonio::fit_report_json(&f)).unwrap_or_else(|e| jsonio::escape(&e.to_string())),
        )
        .raw(
            "holder_fit",
            &holder.map(|f| jsonio::fit_report_json(&f)).unwrap_or_else(|e| jsonio::escape(&e.to_string())),
        )
        .float("final_e", last.e_t)
        .float("final_sup_q_err", last.sup_q_err)
        .float("final_c_t", last.c_t)
        .float("final_f_pop", last.f_pop)
        .finish();
    jsonio::write_file(out, &report)
}
