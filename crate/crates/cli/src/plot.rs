use std::collections::BTreeMap;

use dvpo_core::{LabError, Result};

use crate::metrics::LogLine;

/// Per-step numeric fields that can be extracted.
pub const SERIES: [&str; 9] = [
    "mean_reward",
    "eval_reward",
    "surrogate_loss",
    "kl_mean",
    "clip_fraction",
    "value_loss",
    "generation_passes",
    "prompts",
    "backprop_passes",
];

/// Tab-separated table with a `step` column and one column per algorithm, in
/// order of first appearance. Cells the log has no value for are empty.
pub fn plot_data(lines: &[LogLine], series: &str) -> Result<String> {
    if !SERIES.contains(&series) {
        return Err(LabError::Config(format!(
            "unknown series `{series}` (known: {})",
            SERIES.join(", ")
        )));
    }
    let mut algos: Vec<String> = Vec::new();
    let mut rows: BTreeMap<u64, BTreeMap<usize, String>> = BTreeMap::new();
    for l in lines.iter().filter(|l| l.kind == "step") {
        let algo = l.record["algorithm"].as_str().unwrap_or("?").to_string();
        let col = match algos.iter().position(|a| *a == algo) {
            Some(i) => i,
            None => {
                algos.push(algo);
                algos.len() - 1
            }
        };
        let step = l.record["step"]
            .as_u64()
            .ok_or_else(|| LabError::Data(format!("record {} has no step", l.seq)))?;
        let v = &l.record[series];
        if !v.is_null() {
            rows.entry(step).or_default().insert(col, v.to_string());
        } else {
            rows.entry(step).or_default();
        }
    }
    let mut out = String::from("step");
    for a in &algos {
        out.push('\t');
        out.push_str(a);
    }
    out.push('\n');
    for (step, cells) in rows {
        out.push_str(&step.to_string());
        for c in 0..algos.len() {
            out.push('\t');
            if let Some(v) = cells.get(&c) {
                out.push_str(v);
            }
        }
        out.push('\n');
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn line(seq: u64, algo: &str, step: u64, reward: f64) -> LogLine {
        LogLine {
            schema_version: 1,
            seq,
            stage: "train-policy".into(),
            kind: "step".into(),
            record: json!({"algorithm": algo, "step": step, "mean_reward": reward, "eval_reward": null}),
        }
    }

    #[test]
    fn empty_log_is_header_only() {
        assert_eq!(plot_data(&[], "mean_reward").unwrap(), "step\n");
    }

    #[test]
    fn columns_per_algorithm() {
        let lines = vec![
            line(0, "dvpo", 1, 0.5),
            line(1, "dvpo", 2, 0.25),
            line(2, "ppo", 1, -0.5),
        ];
        let t = plot_data(&lines, "mean_reward").unwrap();
        assert_eq!(t, "step\tdvpo\tppo\n1\t0.5\t-0.5\n2\t0.25\t\n");
        assert!(plot_data(&lines, "nonsense").is_err());
    }
}
