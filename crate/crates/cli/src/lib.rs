//! Experiment harness: flat `key = value` configs, per-round CSV metrics, JSON
//! summaries, attention heatmaps and one-axis sweeps.

use std::fs::{self, File};
use std::io::{self, BufWriter};
use std::path::{Path, PathBuf};

use fedsim::engine::{
    heatmap_labels, summary_accuracy, HeatmapAccumulator, Heatmap, Hooks, RoundMetrics, RunConfig,
    Simulation,
};
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

pub const CSV_HEADER: [&str; 5] = ["round", "train_loss", "test_accuracy", "drift", "elapsed_ms"];
pub const METRICS_FILE: &str = "metrics.csv";
pub const SUMMARY_FILE: &str = "summary.json";
pub const HEATMAP_FILE: &str = "heatmap.csv";
pub const SWEEP_FILE: &str = "sweep.csv";

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("line {line}: expected `key = value`, got `{text}`")]
    Syntax { line: usize, text: String },
    #[error("unknown config key `{0}`")]
    UnknownKey(String),
    #[error("bad value for `{key}`: {reason}")]
    Value { key: String, reason: String },
    #[error("invalid config: {0}")]
    Invalid(fedsim::Error),
    #[error("bad sweep axis `{0}`: expected key=v1,v2,... or k1+k2=a+b,c+d,...")]
    Axis(String),
    #[error("run failed: {0}")]
    Run(fedsim::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = CliError> = std::result::Result<T, E>;

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Every config key with its default value.
fn defaults() -> Map<String, Value> {
    match serde_json::to_value(RunConfig::default()) {
        Ok(Value::Object(map)) => map,
        _ => unreachable!("RunConfig serializes to an object"),
    }
}

/// Config keys accepted in files and as `--key` flags, sorted.
pub fn config_keys() -> Vec<String> {
    defaults().keys().cloned().collect()
}

/// Splits a flat config file into `(key, value)` entries. Blank lines and
/// `#` comments are skipped; surrounding quotes on values are stripped.
pub fn parse_entries(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(CliError::Syntax {
                line: n + 1,
                text: raw.to_string(),
            });
        };
        let (k, v) = (k.trim(), v.trim().trim_matches('"'));
        if k.is_empty() {
            return Err(CliError::Syntax {
                line: n + 1,
                text: raw.to_string(),
            });
        }
        out.push((k.to_string(), v.to_string()));
    }
    Ok(out)
}

fn typed_value(key: &str, default: &Value, raw: &str) -> Result<Value> {
    let bad = |reason: String| CliError::Value {
        key: key.to_string(),
        reason,
    };
    Ok(match default {
        Value::Bool(_) => Value::Bool(
            raw.parse()
                .map_err(|_| bad(format!("expected true or false, got `{raw}`")))?,
        ),
        Value::Number(n) if n.is_u64() => Value::from(
            raw.parse::<u64>()
                .map_err(|_| bad(format!("expected a non-negative integer, got `{raw}`")))?,
        ),
        Value::Number(_) => {
            let x: f64 = raw
                .parse()
                .map_err(|_| bad(format!("expected a number, got `{raw}`")))?;
            serde_json::Number::from_f64(x)
                .map(Value::Number)
                .ok_or_else(|| bad(format!("must be finite, got `{raw}`")))?
        }
        Value::String(_) | Value::Null => Value::String(raw.to_string()),
        Value::Array(_) | Value::Object(_) => unreachable!("config is flat"),
    })
}

/// Applies entries in order over the defaults and validates the result.
/// Later entries win, so file entries followed by flag entries gives flags
/// precedence.
pub fn build_config(entries: &[(String, String)]) -> Result<RunConfig> {
    let mut map = defaults();
    for (key, raw) in entries {
        let default = map
            .get(key)
            .ok_or_else(|| CliError::UnknownKey(key.clone()))?;
        let v = typed_value(key, default, raw)?;
        map.insert(key.clone(), v);
        // Enum-valued keys are only checked by deserializing.
        serde_json::from_value::<RunConfig>(Value::Object(map.clone())).map_err(|e| CliError::Value {
            key: key.clone(),
            reason: e.to_string(),
        })?;
    }
    let cfg: RunConfig = serde_json::from_value(Value::Object(map))?;
    cfg.validate().map_err(CliError::Invalid)?;
    Ok(cfg)
}

/// Reads the config file, if any, then applies flag overrides.
pub fn parse_config(path: Option<&Path>, overrides: &[(String, String)]) -> Result<RunConfig> {
    build_config(&config_entries(path, overrides)?)
}

fn config_entries(path: Option<&Path>, overrides: &[(String, String)]) -> Result<Vec<(String, String)>> {
    let mut entries = match path {
        Some(p) => parse_entries(&fs::read_to_string(p).map_err(io_err(p))?)?,
        None => Vec::new(),
    };
    entries.extend_from_slice(overrides);
    Ok(entries)
}

/// Contents of `summary.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub config: RunConfig,
    pub status: RunStatus,
    pub error: Option<String>,
    pub rounds_completed: usize,
    /// Mean test accuracy over the last `ceil(R / 10)` evaluations.
    pub summary_accuracy: Option<f64>,
    pub final_drift: Option<f64>,
    pub matching_rate: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RunStatus {
    Ok,
    Failed,
}

/// Options beyond the config itself.
#[derive(Clone, Copy, Debug, Default)]
pub struct RunOptions {
    pub hooks: Hooks,
    /// Also average the attention matrix and write `heatmap.csv`.
    pub heatmap: bool,
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// One CSV row per evaluated round.
pub fn csv_record(m: &RoundMetrics) -> [String; 5] {
    [
        m.round.to_string(),
        opt(m.train_loss),
        opt(m.test_accuracy),
        m.drift.to_string(),
        m.elapsed_ms.to_string(),
    ]
}

/// Runs one experiment into `out`, writing the metrics CSV as rounds
/// complete. On divergence the partial CSV and a failed summary are left in
/// place and the error is returned.
pub fn run_experiment(cfg: &RunConfig, out: &Path, opts: RunOptions) -> Result<Summary> {
    fs::create_dir_all(out).map_err(io_err(out))?;
    let csv_path = out.join(METRICS_FILE);
    let file = File::create(&csv_path).map_err(io_err(&csv_path))?;
    let mut writer = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(BufWriter::new(file));
    writer.write_record(CSV_HEADER)?;

    let mut metrics: Vec<RoundMetrics> = Vec::new();
    let mut heatmap: Option<Heatmap> = None;
    let result = (|| -> Result<()> {
        let sim = Simulation::<f64>::from_config(cfg.clone()).map_err(CliError::Run)?;
        let sim = &mut sim.with_hooks(opts.hooks);
        let labels = match opts.heatmap {
            true => Some(heatmap_labels(sim).map_err(CliError::Run)?),
            false => None,
        };
        let mut acc = HeatmapAccumulator::new(cfg.clients);
        let mut write_err = None;
        let run = sim.run_with(|o| {
            acc.observe(o);
            if o.metrics.evaluated() {
                if let Err(e) = writer.write_record(csv_record(&o.metrics)).and_then(|_| Ok(writer.flush()?)) {
                    write_err = Some(e);
                }
            }
            metrics.push(o.metrics.clone());
            Ok(())
        });
        if let Some(e) = write_err {
            return Err(e.into());
        }
        run.map_err(CliError::Run)?;
        if let Some(labels) = labels {
            heatmap = Some(acc.finish(labels));
        }
        Ok(())
    })();
    writer.flush().map_err(io_err(&csv_path))?;

    if let Some(h) = &heatmap {
        write_heatmap(&out.join(HEATMAP_FILE), &h.scores)?;
    }
    let summary = Summary {
        config: cfg.clone(),
        status: if result.is_ok() { RunStatus::Ok } else { RunStatus::Failed },
        error: result.as_ref().err().map(|e| e.to_string()),
        rounds_completed: metrics.len(),
        summary_accuracy: summary_accuracy(&metrics, cfg.rounds),
        final_drift: metrics.last().map(|m| m.drift),
        matching_rate: heatmap.as_ref().map(|h| h.matching_rate),
    };
    write_summary(&out.join(SUMMARY_FILE), &summary)?;
    result.map(|_| summary)
}

fn write_summary(path: &Path, summary: &Summary) -> Result<()> {
    let mut text = serde_json::to_string_pretty(summary)?;
    text.push('\n');
    fs::write(path, text).map_err(io_err(path))
}

/// Writes a square score matrix, one row per line, no header.
pub fn write_heatmap(path: &Path, scores: &[Vec<f64>]) -> Result<()> {
    let file = File::create(path).map_err(io_err(path))?;
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(BufWriter::new(file));
    for row in scores {
        w.write_record(row.iter().map(|x| x.to_string()))?;
    }
    w.flush().map_err(io_err(path))
}

/// One sweep dimension: a tuple of keys and the tuples of values to try.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Axis {
    pub keys: Vec<String>,
    pub values: Vec<Vec<String>>,
}

impl Axis {
    /// Parses `key=v1,v2,...`, or `k1+k2=a1+b1,a2+b2,...` to vary several
    /// keys together.
    pub fn parse(text: &str) -> Result<Self> {
        let err = || CliError::Axis(text.to_string());
        let (keys, values) = text.split_once('=').ok_or_else(err)?;
        let keys: Vec<String> = keys.split('+').map(|k| k.trim().to_string()).collect();
        let values: Vec<Vec<String>> = values
            .split(',')
            .map(|v| v.split('+').map(|x| x.trim().to_string()).collect())
            .collect();
        if keys.iter().any(String::is_empty)
            || values.iter().any(|v: &Vec<String>| v.len() != keys.len() || v.iter().any(String::is_empty))
        {
            return Err(err());
        }
        let known = config_keys();
        if let Some(k) = keys.iter().find(|k| !known.contains(k)) {
            return Err(CliError::UnknownKey(k.clone()));
        }
        Ok(Self { keys, values })
    }

    fn cell_name(&self, i: usize) -> String {
        format!("{}={}", self.keys.join("+"), self.values[i].join("+"))
    }
}

/// Outcome of one sweep cell.
#[derive(Clone, Debug, PartialEq)]
pub struct SweepCell {
    pub value: String,
    pub summary: Option<Summary>,
    pub error: Option<String>,
}

/// Runs one experiment per axis value in `out/<key>=<value>`, continuing
/// past failed cells, and writes `sweep.csv` comparing them.
pub fn run_sweep(
    path: Option<&Path>,
    overrides: &[(String, String)],
    axis: &Axis,
    out: &Path,
    opts: RunOptions,
) -> Result<Vec<SweepCell>> {
    let base = config_entries(path, overrides)?;
    fs::create_dir_all(out).map_err(io_err(out))?;
    let mut cells = Vec::new();
    for (i, values) in axis.values.iter().enumerate() {
        let mut entries = base.clone();
        entries.extend(axis.keys.iter().cloned().zip(values.iter().cloned()));
        let outcome = build_config(&entries)
            .and_then(|cfg| run_experiment(&cfg, &out.join(axis.cell_name(i)), opts));
        let value = values.join("+");
        cells.push(match outcome {
            Ok(s) => SweepCell {
                value,
                summary: Some(s),
                error: None,
            },
            Err(e) => SweepCell {
                value,
                summary: None,
                error: Some(e.to_string()),
            },
        });
    }

    let path = out.join(SWEEP_FILE);
    let file = File::create(&path).map_err(io_err(&path))?;
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(BufWriter::new(file));
    w.write_record([axis.keys.join("+").as_str(), "status", "summary_accuracy", "final_drift"])?;
    for c in &cells {
        let s = c.summary.as_ref();
        w.write_record([
            c.value.clone(),
            if c.error.is_none() { "ok" } else { "failed" }.to_string(),
            opt(s.and_then(|s| s.summary_accuracy)),
            opt(s.and_then(|s| s.final_drift)),
        ])?;
    }
    w.flush().map_err(io_err(&path))?;
    Ok(cells)
}
