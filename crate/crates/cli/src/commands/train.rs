//! `train`: run the training loop against planted instance files and write
//! the metrics table.

use crate::config::ExperimentConfig;
use crate::jsonio::{self, VERSION};
use anyhow::Context;
use dqlab_core::analysis::MetricsRecord;
use dqlab_core::env::MdpSpec;
use dqlab_core::error::Error;
use dqlab_core::format_f64;
use dqlab_core::qnet::NetworkWeights;
use std::path::Path;

pub const METRICS_HEADER: &str = "t,epsilon,e_t,e_t_aligned,sup_q_err,c_t,f_pop,grad_gap,wall_ms";

pub fn metrics_csv(records: &[MetricsRecord], hash: &str) -> String {
    let mut out = format!("# {VERSION} config_hash={hash}\n{METRICS_HEADER}\n");
    for r in records {
        let grad_gap = r.grad_gap.map(format_f64).unwrap_or_default();
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{}\n",
            r.t,
            format_f64(r.epsilon),
            format_f64(r.e_t),
            format_f64(r.e_t_aligned),
            format_f64(r.sup_q_err),
            format_f64(r.c_t),
            format_f64(r.f_pop),
            grad_gap,
            format_f64(r.wall_ms),
        ));
    }
    out
}

pub fn parse_metrics_csv(text: &str) -> anyhow::Result<Vec<MetricsRecord>> {
    let mut records = Vec::new();
    for line in text.lines() {
        if line.starts_with('#') || line.starts_with("t,") || line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 9 {
            anyhow::bail!("metrics row has {} fields, expected 9: {line:?}", fields.len());
        }
        let f = |i: usize| -> anyhow::Result<f64> {
            fields[i].parse().with_context(|| format!("field {i} in {line:?}"))
        };
        records.push(MetricsRecord {
            t: fields[0].parse().with_context(|| format!("t in {line:?}"))?,
            epsilon: f(1)?,
            e_t: f(2)?,
            e_t_aligned: f(3)?,
            sup_q_err: f(4)?,
            c_t: f(5)?,
            f_pop: f(6)?,
            grad_gap: if fields[7].is_empty() { None } else { Some(f(7)?) },
            wall_ms: f(8)?,
        });
    }
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn metrics_csv_round_trip() {
        let records = vec![
            MetricsRecord {
                t: 0,
                epsilon: 1.0,
                e_t: 0.4,
                e_t_aligned: 0.39,
                sup_q_err: 0.05,
                c_t: 0.2,
                f_pop: 1.5e-3,
                grad_gap: None,
                wall_ms: 0.0,
            },
            MetricsRecord {
                t: 1,
                epsilon: 0.9,
                e_t: 0.3,
                e_t_aligned: 0.29,
                sup_q_err: 0.04,
                c_t: 0.1,
                f_pop: 9.0e-4,
                grad_gap: Some(0.123),
                wall_ms: 17.0,
            },
        ];
        let text = metrics_csv(&records, "abcd");
        assert!(text.starts_with("# dqlab"));
        let parsed = parse_metrics_csv(&text).unwrap();
        assert_eq!(parsed, records);
    }
}

/// Exit code 3 when training diverges; the partial metrics table is still
/// written.
pub fn run(
    cfg: &ExperimentConfig,
    spec: &MdpSpec,
    wstar: &NetworkWeights,
    out: &Path,
) -> anyhow::Result<i32> {
    cfg.validate()?;
    let hash = jsonio::config_hash(&cfg.canonical_json());
    match dqlab_core::trainer::run(spec, wstar, &cfg.train) {
        Ok(records) => {
            jsonio::write_file(out, &metrics_csv(&records, &hash))?;
            Ok(0)
        }
        Err(Error::Divergence { t, m, records }) => {
            jsonio::write_file(out, &metrics_csv(&records, &hash))?;
            eprintln!("training diverged at outer loop {t}, inner step {m}; partial metrics kept");
            Ok(3)
        }
        Err(e) => Err(anyhow::anyhow!("{e}")),
    }
}
