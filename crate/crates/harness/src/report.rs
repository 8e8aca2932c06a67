//! Artifacts, assertions and the on-disk layout of a run.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde_json::{json, Value};

use crate::config::ExperimentConfig;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Artifact {
    pub name: String,
    pub bytes: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: String,
    pub pass: bool,
    pub detail: String,
}

impl Check {
    pub fn new(name: impl Into<String>, pass: bool, detail: impl Into<String>) -> Self {
        Self { name: name.into(), pass, detail: detail.into() }
    }
}

#[derive(Debug, Clone, Default)]
pub struct Report {
    pub artifacts: Vec<Artifact>,
    pub checks: Vec<Check>,
    /// Extra machine-readable output, written as `<name>.json`.
    pub json: Vec<(String, Value)>,
}

impl Report {
    pub fn all_pass(&self) -> bool {
        self.checks.iter().all(|c| c.pass)
    }

    pub fn check(&mut self, name: impl Into<String>, pass: bool, detail: impl Into<String>) {
        self.checks.push(Check::new(name, pass, detail));
    }
}

pub fn num(v: f64) -> String {
    format!("{v:e}")
}

/// RFC-4180 CSV with a mandatory header row.
pub fn csv(name: &str, header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> Result<Artifact> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header)?;
    for r in rows {
        if r.len() != header.len() {
            bail!("{name}: row of width {} under a header of width {}", r.len(), header.len());
        }
        w.write_record(&r)?;
    }
    let bytes = w.into_inner().context("flushing csv")?;
    Ok(Artifact { name: name.to_string(), bytes })
}

pub fn manifest(cfg: &ExperimentConfig, report: &Report) -> Value {
    json!({
        "subcommand": cfg.subcommand.to_string(),
        "seed": cfg.seed,
        "shards": cfg.shards,
        "params": cfg.params,
        "artifacts": report.artifacts.iter().map(|a| a.name.clone()).collect::<Vec<_>>(),
        "checks": report.checks.iter().map(|c| json!({"name": c.name, "pass": c.pass})).collect::<Vec<_>>(),
        "all_pass": report.all_pass(),
    })
}

pub fn summary(report: &Report) -> String {
    let mut s = String::new();
    for c in &report.checks {
        s.push_str(&format!("{} {}: {}\n", if c.pass { "PASS" } else { "FAIL" }, c.name, c.detail));
    }
    s.push_str(&format!("{}\n", if report.all_pass() { "ALL PASS" } else { "FAILED" }));
    s
}

fn staging_dir(out: &Path) -> Result<PathBuf> {
    let name = out.file_name().with_context(|| format!("output path {} has no final component", out.display()))?;
    let parent = out.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    Ok(parent.join(format!(".{}.partial-{}", name.to_string_lossy(), std::process::id())))
}

/// Write everything into a sibling staging directory, then move it into place.
/// A previous run's directory (recognised by its manifest) is replaced; any
/// other non-empty directory is left alone and the write fails.
pub fn write_outputs(cfg: &ExperimentConfig, report: &Report) -> Result<()> {
    let out = &cfg.out_dir;
    if out.exists() {
        let empty = fs::read_dir(out)?.next().is_none();
        if !empty && !out.join("manifest.json").exists() {
            bail!("refusing to replace {}: not empty and not a previous run", out.display());
        }
    }
    let stage = staging_dir(out)?;
    if stage.exists() {
        fs::remove_dir_all(&stage)?;
    }
    let result = (|| -> Result<()> {
        fs::create_dir_all(&stage)?;
        let mut m = serde_json::to_string_pretty(&manifest(cfg, report))?;
        m.push('\n');
        fs::write(stage.join("manifest.json"), m)?;
        for a in &report.artifacts {
            fs::write(stage.join(&a.name), &a.bytes)?;
        }
        for (name, v) in &report.json {
            let mut s = serde_json::to_string_pretty(v)?;
            s.push('\n');
            fs::write(stage.join(format!("{name}.json")), s)?;
        }
        fs::write(stage.join("summary.txt"), summary(report))?;
        if out.exists() {
            fs::remove_dir_all(out)?;
        }
        fs::rename(&stage, out)?;
        Ok(())
    })();
    if result.is_err() && stage.exists() {
        let _ = fs::remove_dir_all(&stage);
    }
    result
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_quotes_and_checks_width() {
        let a = csv("t.csv", &["a", "b"], [vec!["1".into(), "x,y".into()]]).unwrap();
        assert_eq!(String::from_utf8(a.bytes).unwrap(), "a,b\n1,\"x,y\"\n");
        assert!(csv("t.csv", &["a"], [vec!["1".into(), "2".into()]]).is_err());
    }
}
