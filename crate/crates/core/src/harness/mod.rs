//! Experiment configuration, presets, CSV emission and manifests.

pub mod presets;
pub mod runners;

use crate::engine::BackgroundInit;
use crate::model::{self, Diagnostics, ModelSpec};
use crate::observables::CensoredTime;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("config error: {0}")]
    Config(String),
    #[error("runtime error: {0}")]
    Runtime(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl HarnessError {
    /// Process exit code: 1 for configuration problems, 2 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Config(_) => 1,
            _ => 2,
        }
    }
}

pub(crate) fn runtime<E: std::fmt::Display>(e: E) -> HarnessError {
    HarnessError::Runtime(e.to_string())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub preset: String,
    /// Not used by the `oracle` preset, which runs its own fixed cases.
    #[serde(default)]
    pub model: Option<ModelSpec>,
    pub dim: usize,
    pub radius: u32,
    pub horizon: f64,
    #[serde(default)]
    pub snapshot_dt: Option<f64>,
    pub trials: u64,
    pub seed: u64,
    #[serde(default = "default_background")]
    pub background: BackgroundInit,
    /// Preset-specific parameters; see [`presets`].
    #[serde(default)]
    pub params: Value,
}

fn default_background() -> BackgroundInit {
    BackgroundInit::Zero
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<ExperimentConfig, HarnessError> {
        serde_json::from_str(text).map_err(|e| HarnessError::Config(format!("cannot parse config: {e}")))
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let text = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(text.as_bytes()))
    }

    pub fn model(&self) -> Result<&ModelSpec, HarnessError> {
        self.model.as_ref().ok_or_else(|| HarnessError::Config(format!("preset '{}' needs a \"model\" entry", self.preset)))
    }

    /// Structural checks and model diagnostics.
    pub fn validate(&self) -> Result<Option<Diagnostics>, HarnessError> {
        if !(1..=3).contains(&self.dim) {
            return Err(HarnessError::Config(format!("dim must be 1, 2 or 3 (got {})", self.dim)));
        }
        if !(self.horizon > 0.0) {
            return Err(HarnessError::Config(format!("horizon must be positive (got {})", self.horizon)));
        }
        if let Some(dt) = self.snapshot_dt {
            if !(dt > 0.0) {
                return Err(HarnessError::Config("snapshot_dt must be positive".into()));
            }
        }
        if presets::find(&self.preset).is_none() {
            return Err(HarnessError::Config(format!("unknown preset '{}'; run `cpdre list-presets`", self.preset)));
        }
        presets::check_params(self)?;
        match &self.model {
            Some(m) => model::validate_model(m, self.dim).map(Some).map_err(|e| HarnessError::Config(format!("invalid model: {e}"))),
            None => Ok(None),
        }
    }
}

/// Set `key.sub.path = value` in a JSON document. The value is parsed as JSON
/// and taken as a string when that fails.
pub fn apply_override(doc: &mut Value, spec: &str) -> Result<(), HarnessError> {
    let (key, raw) = spec.split_once('=').ok_or_else(|| HarnessError::Config(format!("override '{spec}' is not key=value")))?;
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut cur = doc;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        if part.is_empty() {
            return Err(HarnessError::Config(format!("empty path segment in '{key}'")));
        }
        if cur.is_null() {
            *cur = Value::Object(Default::default());
        }
        let last = i + 1 == parts.len();
        cur = match cur {
            Value::Object(map) => {
                if last {
                    map.insert(part.to_string(), value);
                    return Ok(());
                }
                map.entry(part.to_string()).or_insert(Value::Null)
            }
            Value::Array(items) => {
                let idx: usize = part.parse().map_err(|_| HarnessError::Config(format!("'{part}' indexes an array")))?;
                let len = items.len();
                let slot = items.get_mut(idx).ok_or_else(|| HarnessError::Config(format!("index {idx} out of range ({len})")))?;
                if last {
                    *slot = value;
                    return Ok(());
                }
                slot
            }
            _ => return Err(HarnessError::Config(format!("cannot descend into '{part}' of '{key}'"))),
        };
    }
    Ok(())
}

/// Load a config file (or a preset default) and apply overrides.
pub fn load_config(path: Option<&Path>, preset: Option<&str>, overrides: &[String]) -> Result<ExperimentConfig, HarnessError> {
    let mut doc = match (path, preset) {
        (Some(p), _) => {
            let text = std::fs::read_to_string(p).map_err(|e| HarnessError::Config(format!("cannot read {}: {e}", p.display())))?;
            serde_json::from_str(&text).map_err(|e| HarnessError::Config(format!("{}: {e}", p.display())))?
        }
        (None, Some(name)) => serde_json::to_value(presets::default_config(name).ok_or_else(|| HarnessError::Config(format!("unknown preset '{name}'")))?).expect("config serializes"),
        (None, None) => return Err(HarnessError::Config("need --config or --preset".into())),
    };
    if let (Some(_), Some(name)) = (path, preset) {
        doc["preset"] = Value::String(name.to_string());
    }
    for o in overrides {
        apply_override(&mut doc, o)?;
    }
    serde_json::from_value(doc).map_err(|e| HarnessError::Config(format!("invalid config: {e}")))
}

/// A CSV table with a unit per column.
#[derive(Clone, Debug)]
pub struct Table {
    pub name: String,
    pub columns: Vec<(String, String)>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new(name: &str, columns: &[(&str, &str)]) -> Table {
        Table { name: name.into(), columns: columns.iter().map(|(c, u)| (c.to_string(), u.to_string())).collect(), rows: Vec::new() }
    }

    pub fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.columns.len());
        self.rows.push(row);
    }

    pub fn to_csv(&self) -> Vec<u8> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(self.columns.iter().map(|c| c.0.as_str())).expect("in-memory write");
        for r in &self.rows {
            w.write_record(r).expect("in-memory write");
        }
        w.into_inner().expect("in-memory flush")
    }
}

/// Fixed-precision float for CSV output.
pub fn num(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.6}")
    } else {
        "NA".into()
    }
}

/// Pass/fail line of a preset.
#[derive(Clone, Debug, Serialize)]
pub struct Check {
    pub name: String,
    pub pass: bool,
    pub detail: String,
}

impl Check {
    pub fn new(name: &str, pass: bool, detail: impl Into<String>) -> Check {
        Check { name: name.into(), pass, detail: detail.into() }
    }
}

#[derive(Clone, Debug, Default)]
pub struct PresetOutput {
    pub tables: Vec<Table>,
    pub checks: Vec<Check>,
}

#[derive(Clone, Debug, Serialize)]
pub struct RunReport {
    pub preset: String,
    pub checks: Vec<Check>,
    pub files: BTreeMap<String, String>,
}

impl RunReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.pass)
    }
}

/// One value of one trial; `None` marks a failed trial.
#[derive(Clone, Debug)]
pub struct TrialValue {
    pub trial: u64,
    pub metric: String,
    pub value: Option<CensoredTime>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SummaryRow {
    pub metric: String,
    pub n: u64,
    pub finite: u64,
    pub censored: u64,
    pub infinite: u64,
    pub failed: u64,
    pub mean: Option<f64>,
    pub ci_lo: Option<f64>,
    pub ci_hi: Option<f64>,
}

/// Per-metric counts and the mean of finite values with a normal 95% CI.
/// Every trial id in `0..trials` must appear once per metric, possibly as a
/// failure marker. The result does not depend on the input order.
pub fn aggregate(rows: &[TrialValue], trials: u64) -> Result<Vec<SummaryRow>, HarnessError> {
    let mut by_metric: BTreeMap<&str, BTreeMap<u64, Option<CensoredTime>>> = BTreeMap::new();
    for r in rows {
        if by_metric.entry(&r.metric).or_default().insert(r.trial, r.value).is_some() {
            return Err(HarnessError::Runtime(format!("trial {} reported twice for {}", r.trial, r.metric)));
        }
    }
    let mut out = Vec::new();
    for (metric, vals) in by_metric {
        if let Some(t) = (0..trials).find(|t| !vals.contains_key(t)) {
            return Err(HarnessError::Runtime(format!("trial {t} missing for {metric} without a failure marker")));
        }
        let mut s = SummaryRow { metric: metric.to_string(), n: vals.len() as u64, finite: 0, censored: 0, infinite: 0, failed: 0, mean: None, ci_lo: None, ci_hi: None };
        let mut xs = Vec::new();
        for v in vals.values() {
            match v {
                Some(CensoredTime::Finite(x)) => {
                    s.finite += 1;
                    xs.push(*x);
                }
                Some(CensoredTime::CensoredAtHorizon) => s.censored += 1,
                Some(CensoredTime::Infinite) => s.infinite += 1,
                None => s.failed += 1,
            }
        }
        if !xs.is_empty() {
            let n = xs.len() as f64;
            let m = xs.iter().sum::<f64>() / n;
            let half = if xs.len() > 1 { 1.96 * (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0) / n).sqrt() } else { 0.0 };
            s.mean = Some(m);
            s.ci_lo = Some(m - half);
            s.ci_hi = Some(m + half);
        }
        out.push(s);
    }
    Ok(out)
}

pub fn summary_table(rows: &[SummaryRow]) -> Table {
    let mut t = Table::new(
        "summary",
        &[("metric", "-"), ("n", "count"), ("finite", "count"), ("censored", "count"), ("infinite", "count"), ("failed", "count"), ("mean", "metric"), ("ci_lo", "metric"), ("ci_hi", "metric")],
    );
    let o = |v: Option<f64>| v.map(num).unwrap_or_else(|| "NA".into());
    for r in rows {
        t.push(vec![r.metric.clone(), r.n.to_string(), r.finite.to_string(), r.censored.to_string(), r.infinite.to_string(), r.failed.to_string(), o(r.mean), o(r.ci_lo), o(r.ci_hi)]);
    }
    t
}

/// Thread count from `--jobs`, else `CPDRE_JOBS`, else all cores.
pub fn resolve_jobs(flag: Option<usize>) -> Result<usize, HarnessError> {
    if let Some(j) = flag {
        return if j == 0 { Err(HarnessError::Config("--jobs must be at least 1".into())) } else { Ok(j) };
    }
    match std::env::var("CPDRE_JOBS") {
        Ok(v) => v.parse::<usize>().ok().filter(|j| *j > 0).ok_or_else(|| HarnessError::Config(format!("CPDRE_JOBS='{v}' is not a positive integer"))),
        Err(_) => Ok(std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1)),
    }
}

/// Run a preset with `jobs` threads and write its CSVs, `checks.csv` and
/// `manifest.json` into `out`.
pub fn run_preset(cfg: &ExperimentConfig, out: &Path, jobs: usize) -> Result<RunReport, HarnessError> {
    cfg.validate()?;
    let preset = presets::find(&cfg.preset).expect("validated");
    let pool = rayon::ThreadPoolBuilder::new().num_threads(jobs).build().map_err(runtime)?;
    let result = pool.install(|| (preset.run)(cfg))?;
    std::fs::create_dir_all(out)?;
    let mut files = BTreeMap::new();
    let mut columns = BTreeMap::new();
    let mut checks = Table::new("checks", &[("check", "-"), ("pass", "bool"), ("detail", "-")]);
    for c in &result.checks {
        checks.push(vec![c.name.clone(), c.pass.to_string(), c.detail.clone()]);
    }
    for t in result.tables.iter().chain(std::iter::once(&checks)) {
        let name = format!("{}.csv", t.name);
        let bytes = t.to_csv();
        std::fs::write(out.join(&name), &bytes)?;
        files.insert(name.clone(), hex::encode(Sha256::digest(&bytes)));
        columns.insert(name, t.columns.iter().cloned().collect::<BTreeMap<_, _>>());
    }
    let manifest = serde_json::json!({
        "preset": cfg.preset,
        "seed": cfg.seed,
        "config_sha256": cfg.hash(),
        "config": cfg,
        "version": env!("CARGO_PKG_VERSION"),
        "files": files,
        "columns": columns,
    });
    std::fs::write(out.join("manifest.json"), serde_json::to_string_pretty(&manifest).expect("json"))?;
    Ok(RunReport { preset: cfg.preset.clone(), checks: result.checks, files })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_set_nested_values() {
        let mut v = serde_json::json!({"a": {"b": 1}, "xs": [1, 2]});
        apply_override(&mut v, "a.b=2.5").unwrap();
        apply_override(&mut v, "a.c.d=[1,2]").unwrap();
        apply_override(&mut v, "xs.1=7").unwrap();
        apply_override(&mut v, "name=shape").unwrap();
        assert_eq!(v, serde_json::json!({"a": {"b": 2.5, "c": {"d": [1, 2]}}, "xs": [1, 7], "name": "shape"}));
        assert!(apply_override(&mut v, "novalue").is_err());
        assert!(apply_override(&mut v, "xs.9=1").is_err());
        assert!(apply_override(&mut v, "name.x=1").is_err());
    }

    fn tv(trial: u64, metric: &str, value: Option<CensoredTime>) -> TrialValue {
        TrialValue { trial, metric: metric.into(), value }
    }

    #[test]
    fn aggregation_is_order_independent_and_recomputable() {
        let mut rows: Vec<TrialValue> = (0..6).map(|t| tv(t, "tau", Some(CensoredTime::Finite(t as f64)))).collect();
        rows.push(tv(0, "sigma", Some(CensoredTime::CensoredAtHorizon)));
        rows.push(tv(1, "sigma", None));
        let a = aggregate(&rows[..6], 6).unwrap();
        let mut rev = rows[..6].to_vec();
        rev.reverse();
        assert_eq!(a, aggregate(&rev, 6).unwrap());
        assert_eq!(a[0].mean, Some(2.5));
        let sd = (17.5f64 / 5.0).sqrt();
        assert!((a[0].ci_hi.unwrap() - (2.5 + 1.96 * sd / 6f64.sqrt())).abs() < 1e-12);
    }

    #[test]
    fn aggregation_needs_every_trial_or_a_marker() {
        let rows = vec![tv(0, "x", Some(CensoredTime::Infinite)), tv(2, "x", None)];
        assert!(aggregate(&rows, 3).is_err());
        let rows = vec![tv(0, "x", Some(CensoredTime::Infinite)), tv(1, "x", Some(CensoredTime::CensoredAtHorizon)), tv(2, "x", None)];
        let s = aggregate(&rows, 3).unwrap();
        assert_eq!((s[0].infinite, s[0].censored, s[0].failed, s[0].mean), (1, 1, 1, None));
        assert_eq!(summary_table(&s).rows[0][6], "NA");
        assert!(aggregate(&[tv(0, "x", None), tv(0, "x", None)], 1).is_err());
    }

    #[test]
    fn config_roundtrip_and_hash() {
        for p in presets::PRESETS {
            let c = presets::default_config(p.name).unwrap();
            let text = serde_json::to_string(&c).unwrap();
            let back = ExperimentConfig::from_json(&text).unwrap();
            assert_eq!(c, back);
            assert_eq!(c.hash(), back.hash());
            c.validate().unwrap_or_else(|e| panic!("{}: {e}", p.name));
        }
        assert!(ExperimentConfig::from_json("{\"preset\": \"oracle\", \"bogus\": 1}").is_err());
    }

    #[test]
    fn jobs_resolution() {
        assert_eq!(resolve_jobs(Some(3)).unwrap(), 3);
        assert!(resolve_jobs(Some(0)).is_err());
    }
}
