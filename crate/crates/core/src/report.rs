//! JSON and CSV report files.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::Serialize;

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::train::AblationRow;

/// A command's result together with everything needed to reproduce it.
#[derive(Debug, Clone, Serialize)]
pub struct Report<T: Serialize> {
    pub command: String,
    pub seed: u64,
    pub config: BTreeMap<String, String>,
    pub result: T,
}

impl<T: Serialize> Report<T> {
    pub fn new(command: &str, cfg: &RunConfig, result: T) -> Self {
        Self {
            command: command.to_owned(),
            seed: cfg.train.seed,
            config: config_map(cfg),
            result,
        }
    }
}

pub fn config_map(cfg: &RunConfig) -> BTreeMap<String, String> {
    cfg.render()
        .lines()
        .filter_map(|l| l.split_once(" = "))
        .map(|(k, v)| (k.to_owned(), v.to_owned()))
        .collect()
}

pub fn to_json<T: Serialize>(value: &T) -> Result<String> {
    let mut s = serde_json::to_string_pretty(value)
        .map_err(|e| Error::invalid(format!("cannot serialize report: {e}")))?;
    s.push('\n');
    Ok(s)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, to_json(value)?).map_err(|e| Error::io(path, e))
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| x.to_string())
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut out = String::from("mode,vp,sp,rg,accuracy,ci95,lambda_mean_support,lambda_mean_query,best_epoch\n");
    for r in rows {
        let m = r.report.mode;
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{}\n",
            r.label,
            m.vp,
            m.sp,
            m.rg,
            r.report.accuracy,
            r.report.ci95,
            opt(r.report.lambda_mean_support),
            opt(r.report.lambda_mean_query),
            r.best_epoch
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn report_embeds_config_and_seed() {
        let mut cfg = RunConfig::default();
        cfg.train.seed = 42;
        let json = to_json(&Report::new("eval", &cfg, 1.5)).unwrap();
        let v: serde_json::Value = serde_json::from_str(&json).unwrap();
        assert_eq!(v["seed"], 42);
        assert_eq!(v["config"]["alpha"], "0.2");
        assert_eq!(v["config"]["seed"], "42");
        assert_eq!(v["result"], 1.5);
    }
}
