//! Configuration files, command dispatch and report persistence.
//!
//! A config file is flat `key = value` text. Keys use dotted sections
//! (`regularizer.alpha`), `#` starts a comment line, lists are
//! comma-separated and unknown keys are rejected. Relative data paths are
//! resolved against the config file's directory.
//!
//! ```text
//! epochs = 200
//! lr = 0.001
//! regularizer.method = grug
//! regularizer.alpha = 0.35
//! regularizer.beta = 0.01
//! ```

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::str::FromStr;
use std::time::Instant;

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::analysis::{self, Axis, SweepResult, SweepRow, SweepSpec};
use crate::graph::{self, HeteroGraph, SynthConfig};
use crate::oracle::{self, CheckRecord};
use crate::regularizers::Method;
use crate::training::{self, Metrics, TaskData, TraceRow, TrainConfig};
use crate::{Error, Result};

pub const TRACE_HEADER: [&str; 6] = ["epoch", "train_loss", "valid_loss", "valid_metric", "grad_l1", "grad_l2"];
pub const SWEEP_HEADER: [&str; 7] = [
    "axis",
    "value",
    "method",
    "repeat",
    "metric",
    "epochs_to_threshold",
    "macro_f1",
];
/// Written for missing values in CSV output.
pub const NA: &str = "NA";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataFiles {
    pub nodes: PathBuf,
    pub edges: PathBuf,
    pub features: PathBuf,
    pub labels: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    Files(DataFiles),
    Synthetic(SynthConfig),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepSettings {
    pub axis: Option<Axis>,
    /// `None` selects the axis defaults.
    pub values: Option<Vec<f64>>,
    pub methods: Vec<Method>,
    pub repeats: usize,
    pub loss_threshold: f64,
}

impl Default for SweepSettings {
    fn default() -> Self {
        Self {
            axis: None,
            values: None,
            methods: vec![Method::Clean, Method::Grug],
            repeats: 5,
            loss_threshold: 0.1,
        }
    }
}

pub fn default_axis_values(axis: Axis) -> Vec<f64> {
    match axis {
        Axis::Depth => vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0],
        Axis::AttackRatio => vec![0.0, 0.1, 0.2, 0.3, 0.4],
        Axis::Alpha => vec![0.01, 0.05, 0.1, 0.2, 0.35],
        Axis::Beta => vec![0.001, 0.005, 0.01, 0.05, 0.1],
        Axis::Method => Vec::new(),
    }
}

/// A fully validated configuration file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub data: DataSource,
    pub train: TrainConfig,
    pub sweep: SweepSettings,
    pub attack_ratio: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            data: DataSource::Synthetic(SynthConfig::default()),
            train: TrainConfig::default(),
            sweep: SweepSettings::default(),
            attack_ratio: 0.2,
        }
    }
}

fn bad(key: &str, msg: impl std::fmt::Display) -> Error {
    Error::Config(format!("key `{key}`: {msg}"))
}

fn parse_value<T: FromStr>(key: &str, value: &str, what: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| bad(key, format!("expected {what}, got {value:?}")))
}

fn parse_enum<T: FromStr<Err = String>>(key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|e: String| bad(key, e))
}

fn parse_list<T>(key: &str, value: &str, item: impl Fn(&str) -> Result<T>) -> Result<Vec<T>> {
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(item)
        .collect::<Result<Vec<T>>>()
        .and_then(|v| {
            if v.is_empty() {
                Err(bad(key, "empty list"))
            } else {
                Ok(v)
            }
        })
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" => Ok(true),
        "false" => Ok(false),
        other => Err(bad(key, format!("expected true or false, got {other:?}"))),
    }
}

pub const KNOWN_KEYS: &[&str] = &[
    "data.nodes",
    "data.edges",
    "data.features",
    "data.labels",
    "synth.nodes_per_type",
    "synth.relation_count",
    "synth.feature_dim",
    "synth.num_classes",
    "synth.homophily",
    "synth.avg_degree",
    "synth.class_separation",
    "synth.noise",
    "synth.labeled_types",
    "synth.seed",
    "epochs",
    "lr",
    "seed",
    "task",
    "backbone",
    "layers",
    "hidden_dim",
    "eval_every",
    "best_valid",
    "regularizer.method",
    "regularizer.drop_rate",
    "regularizer.alpha",
    "regularizer.beta",
    "regularizer.steps",
    "regularizer.edge_eps",
    "regularizer.ascent",
    "sweep.axis",
    "sweep.values",
    "sweep.methods",
    "sweep.repeats",
    "sweep.loss_threshold",
    "attack.ratio",
];

impl RunConfig {
    pub fn parse_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let dir = path.parent().unwrap_or_else(|| Path::new("."));
        Self::parse_str(&text, dir)
    }

    /// Parses config text; relative data paths are joined onto `base_dir`.
    pub fn parse_str(text: &str, base_dir: &Path) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let mut synth = SynthConfig::default();
        let (mut nodes, mut edges, mut features, mut labels) = (None, None, None, None);
        let mut seen = std::collections::HashSet::new();

        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::Config(format!(
                    "line {}: expected `key = value`, got {line:?}",
                    i + 1
                )));
            };
            let key = key.trim();
            let value = value.trim().trim_matches('"');
            if !KNOWN_KEYS.contains(&key) {
                return Err(Error::Config(format!("unknown key `{key}` on line {}", i + 1)));
            }
            if !seen.insert(key.to_string()) {
                return Err(bad(key, "set more than once"));
            }
            let path = |v: &str| -> PathBuf {
                let p = Path::new(v);
                if p.is_absolute() {
                    p.to_path_buf()
                } else {
                    base_dir.join(p)
                }
            };
            let t = &mut cfg.train;
            let r = &mut t.regularizer;
            let s = &mut cfg.sweep;
            match key {
                "data.nodes" => nodes = Some(path(value)),
                "data.edges" => edges = Some(path(value)),
                "data.features" => features = Some(path(value)),
                "data.labels" => labels = Some(path(value)),
                "synth.nodes_per_type" => {
                    synth.nodes_per_type = parse_list(key, value, |v| parse_value(key, v, "an integer"))?
                }
                "synth.relation_count" => synth.relation_count = parse_value(key, value, "an integer")?,
                "synth.feature_dim" => synth.feature_dim = parse_value(key, value, "an integer")?,
                "synth.num_classes" => synth.num_classes = parse_value(key, value, "an integer")?,
                "synth.homophily" => synth.homophily = parse_value(key, value, "a real")?,
                "synth.avg_degree" => synth.avg_degree = parse_value(key, value, "a real")?,
                "synth.class_separation" => synth.class_separation = parse_value(key, value, "a real")?,
                "synth.noise" => synth.noise = parse_value(key, value, "a real")?,
                "synth.labeled_types" => {
                    synth.labeled_types = parse_list(key, value, |v| parse_value(key, v, "an integer"))?
                }
                "synth.seed" => synth.seed = parse_value(key, value, "an unsigned integer")?,
                "epochs" => t.epochs = parse_value(key, value, "an integer")?,
                "lr" => t.lr = parse_value(key, value, "a real")?,
                "seed" => t.seed = parse_value(key, value, "an unsigned integer")?,
                "task" => t.task = parse_enum(key, value)?,
                "backbone" => t.backbone = parse_enum(key, value)?,
                "layers" => t.layers = parse_value(key, value, "an integer")?,
                "hidden_dim" => t.hidden_dim = parse_value(key, value, "an integer")?,
                "eval_every" => t.eval_every = parse_value(key, value, "an integer")?,
                "best_valid" => t.best_valid = parse_bool(key, value)?,
                "regularizer.method" => r.method = parse_enum(key, value)?,
                "regularizer.drop_rate" => r.drop_rate = parse_value(key, value, "a real")?,
                "regularizer.alpha" => r.alpha = parse_value(key, value, "a real")?,
                "regularizer.beta" => r.beta = parse_value(key, value, "a real")?,
                "regularizer.steps" => r.steps = parse_value(key, value, "an integer")?,
                "regularizer.edge_eps" => r.edge_eps = parse_value(key, value, "a real")?,
                "regularizer.ascent" => r.ascent = parse_enum(key, value)?,
                "sweep.axis" => s.axis = Some(parse_enum(key, value)?),
                "sweep.values" => s.values = Some(parse_list(key, value, |v| parse_value(key, v, "a real"))?),
                "sweep.methods" => s.methods = parse_list(key, value, |v| parse_enum(key, v))?,
                "sweep.repeats" => s.repeats = parse_value(key, value, "an integer")?,
                "sweep.loss_threshold" => s.loss_threshold = parse_value(key, value, "a real")?,
                "attack.ratio" => cfg.attack_ratio = parse_value(key, value, "a real")?,
                _ => unreachable!("key list and match arms disagree on {key}"),
            }
        }

        let any_file = nodes.is_some() || edges.is_some() || features.is_some() || labels.is_some();
        let any_synth = seen.iter().any(|k| k.starts_with("synth."));
        if any_file && any_synth {
            return Err(Error::Config("data.* and synth.* keys are mutually exclusive".into()));
        }
        cfg.data = if any_file {
            let need = |k: &str, p: Option<PathBuf>| p.ok_or_else(|| bad(k, "required when any data.* key is set"));
            DataSource::Files(DataFiles {
                nodes: need("data.nodes", nodes)?,
                edges: need("data.edges", edges)?,
                features: need("data.features", features)?,
                labels,
            })
        } else {
            DataSource::Synthetic(synth)
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Checks every constraint, naming the offending key.
    pub fn validate(&self) -> Result<()> {
        if let DataSource::Files(f) = &self.data {
            let files = [("data.nodes", Some(&f.nodes)), ("data.edges", Some(&f.edges)), ("data.features", Some(&f.features)), ("data.labels", f.labels.as_ref())];
            for (key, p) in files {
                if let Some(p) = p {
                    if !p.is_file() {
                        return Err(bad(key, format!("file {} does not exist", p.display())));
                    }
                }
            }
        }
        self.train.validate()?;
        let s = &self.sweep;
        if s.repeats == 0 {
            return Err(bad("sweep.repeats", "must be at least 1"));
        }
        if !(s.loss_threshold.is_finite()) {
            return Err(bad("sweep.loss_threshold", "must be finite"));
        }
        if !(0.0..=1.0).contains(&self.attack_ratio) {
            return Err(bad("attack.ratio", format!("must lie in [0, 1], got {}", self.attack_ratio)));
        }
        Ok(())
    }

    pub fn load_graph(&self) -> Result<HeteroGraph> {
        Ok(match &self.data {
            DataSource::Files(f) => graph::load_graph(&f.nodes, &f.edges, &f.features, f.labels.as_deref())?,
            DataSource::Synthetic(s) => graph::synth_graph(s)?,
        })
    }

    pub fn sweep_spec(&self, axis: Axis) -> Result<SweepSpec> {
        let spec = SweepSpec {
            axis,
            values: self.sweep.values.clone().unwrap_or_else(|| default_axis_values(axis)),
            methods: self.sweep.methods.clone(),
            repeats: self.sweep.repeats,
            base: self.train.clone(),
            loss_threshold: self.sweep.loss_threshold,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Canonical config text; parsing it yields the same configuration.
    pub fn to_text(&self) -> String {
        fn name<T: Serialize>(v: &T) -> String {
            match serde_json::to_value(v) {
                Ok(serde_json::Value::String(s)) => s,
                other => panic!("enum did not serialize to a string: {other:?}"),
            }
        }
        fn list<T: ToString>(xs: &[T]) -> String {
            xs.iter().map(ToString::to_string).collect::<Vec<_>>().join(", ")
        }
        let mut out = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(out, "{k} = {v}");
        };
        match &self.data {
            DataSource::Files(f) => {
                kv("data.nodes", f.nodes.display().to_string());
                kv("data.edges", f.edges.display().to_string());
                kv("data.features", f.features.display().to_string());
                if let Some(l) = &f.labels {
                    kv("data.labels", l.display().to_string());
                }
            }
            DataSource::Synthetic(s) => {
                kv("synth.nodes_per_type", list(&s.nodes_per_type));
                kv("synth.relation_count", s.relation_count.to_string());
                kv("synth.feature_dim", s.feature_dim.to_string());
                kv("synth.num_classes", s.num_classes.to_string());
                kv("synth.homophily", format!("{:?}", s.homophily));
                kv("synth.avg_degree", format!("{:?}", s.avg_degree));
                kv("synth.class_separation", format!("{:?}", s.class_separation));
                kv("synth.noise", format!("{:?}", s.noise));
                kv("synth.labeled_types", list(&s.labeled_types));
                kv("synth.seed", s.seed.to_string());
            }
        }
        let t = &self.train;
        kv("epochs", t.epochs.to_string());
        kv("lr", format!("{:?}", t.lr));
        kv("seed", t.seed.to_string());
        kv("task", name(&t.task));
        kv("backbone", name(&t.backbone));
        kv("layers", t.layers.to_string());
        kv("hidden_dim", t.hidden_dim.to_string());
        kv("eval_every", t.eval_every.to_string());
        kv("best_valid", t.best_valid.to_string());
        let r = &t.regularizer;
        kv("regularizer.method", r.method.name().to_string());
        kv("regularizer.drop_rate", format!("{:?}", r.drop_rate));
        kv("regularizer.alpha", format!("{:?}", r.alpha));
        kv("regularizer.beta", format!("{:?}", r.beta));
        kv("regularizer.steps", r.steps.to_string());
        kv("regularizer.edge_eps", format!("{:?}", r.edge_eps));
        kv("regularizer.ascent", name(&r.ascent));
        let s = &self.sweep;
        if let Some(a) = s.axis {
            kv("sweep.axis", a.name().to_string());
        }
        if let Some(v) = &s.values {
            kv("sweep.values", v.iter().map(|x| format!("{x:?}")).collect::<Vec<_>>().join(", "));
        }
        kv("sweep.methods", list(&s.methods));
        kv("sweep.repeats", s.repeats.to_string());
        kv("sweep.loss_threshold", format!("{:?}", s.loss_threshold));
        kv("attack.ratio", format!("{:?}", self.attack_ratio));
        out
    }
}

fn real(x: f64) -> String {
    format!("{x:.16e}")
}

fn opt_real(x: Option<f64>) -> String {
    x.map_or_else(|| NA.to_string(), real)
}

/// CSV bytes of a training trace.
pub fn trace_csv(trace: &[TraceRow]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(TRACE_HEADER)?;
    for r in trace {
        w.write_record([
            r.epoch.to_string(),
            real(r.train_loss),
            opt_real(r.valid_loss),
            opt_real(r.valid_metric),
            real(r.grad_l1),
            real(r.grad_l2),
        ])?;
    }
    w.into_inner().map_err(|e| Error::Config(format!("csv buffer: {e}")))
}

/// CSV bytes of every per-repeat sweep record.
pub fn sweep_csv(result: &SweepResult) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(SWEEP_HEADER)?;
    for r in &result.records {
        w.write_record([
            r.axis.name().to_string(),
            real(r.value),
            r.method.name().to_string(),
            r.repeat.to_string(),
            real(r.metric),
            r.epochs_to_threshold.map_or_else(|| NA.to_string(), |e| e.to_string()),
            opt_real(r.macro_f1),
        ])?;
    }
    w.into_inner().map_err(|e| Error::Config(format!("csv buffer: {e}")))
}

/// Final metrics of one training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub valid: Metrics,
    pub test: Metrics,
}

/// Row of the ablation table: five methods then `GAP`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub label: String,
    pub mean: f64,
    pub std: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub version: String,
    pub command: String,
    pub seed: u64,
    /// The configuration as parsed, after command-line overrides.
    pub config: RunConfig,
    /// Equivalent config file text.
    pub config_text: String,
    pub trace: Vec<TraceRow>,
    pub metrics: Option<RunMetrics>,
    pub attack_ratio: Option<f64>,
    pub sweep_rows: Vec<SweepRow>,
    pub table: Vec<TableRow>,
    pub verification: Vec<CheckRecord>,
    pub wall_clock_secs: f64,
}

impl ExperimentReport {
    fn new(command: &str, config: &RunConfig) -> Self {
        Self {
            version: env!("CARGO_PKG_VERSION").to_string(),
            command: command.to_string(),
            seed: config.train.seed,
            config: config.clone(),
            config_text: config.to_text(),
            trace: Vec::new(),
            metrics: None,
            attack_ratio: None,
            sweep_rows: Vec::new(),
            table: Vec::new(),
            verification: Vec::new(),
            wall_clock_secs: 0.0,
        }
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let path = dir.join("report.json");
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    /// Plain-text rendering for terminals.
    pub fn summary(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "grugraph {} `{}` seed {}", self.version, self.command, self.seed);
        if let Some(r) = self.attack_ratio {
            let _ = writeln!(s, "attack ratio {r}");
        }
        if let Some(last) = self.trace.last() {
            let _ = writeln!(s, "epochs {} final train loss {:.6}", last.epoch, last.train_loss);
        }
        if let Some(m) = &self.metrics {
            for (name, x) in [("valid", &m.valid), ("test", &m.test)] {
                let _ = write!(s, "{name}: loss {:.4}", x.loss);
                if let (Some(mi), Some(ma)) = (x.micro_f1, x.macro_f1) {
                    let _ = write!(s, " micro-F1 {:.2} macro-F1 {:.2}", 100.0 * mi, 100.0 * ma);
                }
                if let Some(a) = x.auc_roc {
                    let _ = write!(s, " AUC {:.2}", 100.0 * a);
                }
                s.push('\n');
            }
        }
        if !self.table.is_empty() {
            for r in &self.table {
                let _ = writeln!(s, "{:<8} {:6.2}±{:.2}", r.label, 100.0 * r.mean, 100.0 * r.std);
            }
        } else if !self.sweep_rows.is_empty() {
            let axis = self.config.sweep.axis.map_or("value", Axis::name);
            let _ = writeln!(s, "{axis:>12} {:<12} {:>14} {:>8}", "method", "metric", "epochs");
            for r in &self.sweep_rows {
                let ep = r.mean_epochs_to_threshold.map_or_else(|| NA.to_string(), |e| format!("{e:.1}"));
                let _ = writeln!(s, "{:>12} {:<12} {:>8.2}±{:<5.2} {ep:>8}", r.value, r.method.name(), 100.0 * r.mean, 100.0 * r.std);
            }
        }
        for c in &self.verification {
            let _ = writeln!(
                s,
                "[{}] criterion {} {}: {:.3e} {} {:.3e}",
                if c.passed { "PASS" } else { "FAIL" },
                c.criterion,
                c.name,
                c.observed,
                c.relation,
                c.tolerance
            );
        }
        let _ = writeln!(s, "wall clock {:.2}s", self.wall_clock_secs);
        s
    }
}

/// Writes `bytes` to `path` through a temporary file in the same directory.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let file = path.file_name().map(|f| f.to_string_lossy().into_owned()).unwrap_or_default();
    let tmp = path.with_file_name(format!(".{file}.{}.tmp", std::process::id()));
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| {
        let _ = fs::remove_file(&tmp);
        Error::io(path, e)
    })
}

/// Writes all outputs or none: files already written are removed when a
/// later one fails.
pub fn write_outputs(dir: &Path, files: &[(&str, Vec<u8>)]) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut written = Vec::new();
    for (name, bytes) in files {
        let path = dir.join(name);
        if let Err(e) = write_atomic(&path, bytes) {
            for p in &written {
                let _ = fs::remove_file(p);
            }
            return Err(e);
        }
        written.push(path);
    }
    Ok(written)
}

#[derive(Clone, Debug, PartialEq, Subcommand)]
pub enum Command {
    /// Train one model and write trace.csv and report.json.
    Train,
    /// Sweep one axis over methods and paired seeds; writes sweep.csv.
    Sweep {
        /// depth, attack_ratio, alpha, beta or method
        #[arg(long)]
        axis: Option<String>,
    },
    /// Train on the graph after adding random edges.
    Attack {
        /// Added edges as a fraction of the existing ones
        #[arg(long)]
        ratio: Option<f64>,
    },
    /// Run grug_n, grug_e, grug_m, grug_T and grug under identical seeds.
    Ablate,
    /// Run the verification checks; exits nonzero if any fails.
    Verify,
    /// Print a summary of a finished run.
    Report {
        #[arg(long)]
        from: PathBuf,
    },
}

#[derive(Clone, Debug, Parser)]
#[command(
    name = "grugraph",
    version,
    about = "Heterogeneous GNN training with gradient regularization",
    after_help = "Outputs:\n  report.json  config echo, trace, metrics, sweep rows, checks, wall clock, version, seed\n  trace.csv    epoch,train_loss,valid_loss,valid_metric,grad_l1,grad_l2\n  sweep.csv    axis,value,method,repeat,metric,epochs_to_threshold,macro_f1\nReals are written with 17 significant digits; missing values as NA.\nSet GRUGRAPH_LOG=error|info|debug for logging."
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// Flat key = value config file
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the config seed
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
    /// Worker threads for sweeps
    #[arg(long, global = true, default_value_t = 1)]
    pub jobs: usize,
}

/// Outcome of one command: the report and whether every check passed.
pub struct RunOutcome {
    pub report: ExperimentReport,
    pub written: Vec<PathBuf>,
    pub passed: bool,
}

fn table_from(ab: &analysis::AblationResult) -> Vec<TableRow> {
    let mut rows: Vec<TableRow> = ab
        .sweep
        .rows
        .iter()
        .map(|r| TableRow {
            label: r.method.name().to_string(),
            mean: r.mean,
            std: r.std,
        })
        .collect();
    rows.push(TableRow {
        label: "GAP".to_string(),
        mean: ab.gap_mean,
        std: ab.gap_std,
    });
    rows
}

fn train_once(report: &mut ExperimentReport, g: &HeteroGraph, config: &RunConfig, attack: Option<f64>) -> Result<Vec<u8>> {
    let cfg = &config.train;
    let mut data = TaskData::prepare(g, cfg.task, cfg.seed)?;
    if let Some(ratio) = attack {
        let attacked = graph::add_random_edges(data.message_graph(), ratio, cfg.seed ^ 0xa77ac)?;
        data = data.with_message_graph(attacked);
        report.attack_ratio = Some(ratio);
    }
    let out = training::train(data.build_model(cfg), &data, cfg)?;
    let csv = trace_csv(&out.trace)?;
    report.trace = out.trace;
    report.metrics = Some(RunMetrics {
        valid: out.valid,
        test: out.test,
    });
    Ok(csv)
}

/// Runs one command against a parsed configuration and writes its outputs
/// into `out`.
pub fn run(command: &Command, config: &RunConfig, out: &Path, jobs: usize) -> Result<RunOutcome> {
    let started = Instant::now();
    let label = match command {
        Command::Train => "train",
        Command::Sweep { .. } => "sweep",
        Command::Attack { .. } => "attack",
        Command::Ablate => "ablate",
        Command::Verify => "verify",
        Command::Report { .. } => "report",
    };
    let mut config = config.clone();
    let mut files: Vec<(&str, Vec<u8>)> = Vec::new();
    let mut passed = true;
    let mut report;
    match command {
        Command::Report { from } => {
            let report = ExperimentReport::read(from)?;
            return Ok(RunOutcome {
                report,
                written: Vec::new(),
                passed: true,
            });
        }
        Command::Train => {
            report = ExperimentReport::new(label, &config);
            let g = config.load_graph()?;
            files.push(("trace.csv", train_once(&mut report, &g, &config, None)?));
        }
        Command::Attack { ratio } => {
            if let Some(r) = ratio {
                config.attack_ratio = *r;
                config.validate()?;
            }
            report = ExperimentReport::new(label, &config);
            let g = config.load_graph()?;
            files.push(("trace.csv", train_once(&mut report, &g, &config, Some(config.attack_ratio))?));
        }
        Command::Sweep { axis } => {
            let axis = match axis {
                Some(a) => Axis::from_str(a).map_err(|e| bad("--axis", e))?,
                None => config
                    .sweep
                    .axis
                    .ok_or_else(|| bad("sweep.axis", "no axis given in the config or with --axis"))?,
            };
            config.sweep.axis = Some(axis);
            report = ExperimentReport::new(label, &config);
            let g = config.load_graph()?;
            let result = analysis::run_sweep(&g, &config.sweep_spec(axis)?, jobs)?;
            files.push(("sweep.csv", sweep_csv(&result)?));
            report.sweep_rows = result.rows;
        }
        Command::Ablate => {
            config.sweep.axis = Some(Axis::Method);
            report = ExperimentReport::new(label, &config);
            let g = config.load_graph()?;
            let ab = analysis::ablation_grid(&g, config.sweep.repeats, &config.train, jobs)?;
            files.push(("sweep.csv", sweep_csv(&ab.sweep)?));
            report.table = table_from(&ab);
            report.sweep_rows = ab.sweep.rows;
        }
        Command::Verify => {
            report = ExperimentReport::new(label, &config);
            report.verification = oracle::verify_suite(config.train.seed)?;
            passed = report.verification.iter().all(|c| c.passed);
        }
    }
    report.wall_clock_secs = started.elapsed().as_secs_f64();
    let json = serde_json::to_vec_pretty(&report)?;
    files.push(("report.json", json));
    let written = write_outputs(out, &files)?;
    Ok(RunOutcome {
        report,
        written,
        passed,
    })
}

/// Parses the config named on the command line (or the defaults) and
/// applies the `--seed` override.
pub fn resolve_config(cli: &Cli) -> Result<RunConfig> {
    let mut config = match &cli.config {
        Some(p) => RunConfig::parse_file(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        config.train.seed = s;
    }
    Ok(config)
}

pub fn init_logging() {
    let env = env_logger::Env::new().filter_or("GRUGRAPH_LOG", "error");
    let _ = env_logger::Builder::from_env(env).format_timestamp(None).try_init();
}

/// Entry point of the `grugraph` binary.
pub fn main_with_args<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    init_logging();
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(2) } else { ExitCode::SUCCESS };
        }
    };
    let result = resolve_config(&cli).and_then(|config| run(&cli.command, &config, &cli.out, cli.jobs));
    match result {
        Ok(outcome) => {
            print!("{}", outcome.report.summary());
            for p in &outcome.written {
                log::info!("wrote {}", p.display());
            }
            if outcome.passed {
                ExitCode::SUCCESS
            } else {
                eprintln!("verification failed");
                ExitCode::FAILURE
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_config_gets_defaults() {
        let c = RunConfig::parse_str("# nothing\n\n", Path::new(".")).unwrap();
        assert_eq!(c.train.epochs, 200);
        assert_eq!(c.train.lr, 0.001);
        assert_eq!(c.train.eval_every, 5);
        assert_eq!(c.train.regularizer.steps, 3);
    }

    #[test]
    fn typo_and_constraint_errors_name_the_key() {
        let e = RunConfig::parse_str("regularizer.droput_rate = 0.1", Path::new(".")).unwrap_err();
        assert!(e.to_string().contains("regularizer.droput_rate"), "{e}");
        let e = RunConfig::parse_str("regularizer.alpha = -0.1", Path::new(".")).unwrap_err();
        assert!(e.to_string().contains("regularizer.alpha"), "{e}");
        let e = RunConfig::parse_str("epochs = many", Path::new(".")).unwrap_err();
        assert!(e.to_string().contains("epochs"), "{e}");
    }

    #[test]
    fn text_round_trip() {
        let text = "lr = 0.01\nregularizer.method = grug_T\nsweep.values = 1, 2, 3\nsynth.nodes_per_type = 10, 20\n";
        let c = RunConfig::parse_str(text, Path::new(".")).unwrap();
        let again = RunConfig::parse_str(&c.to_text(), Path::new(".")).unwrap();
        assert_eq!(c, again);
    }

    #[test]
    fn missing_data_file_is_rejected() {
        let e = RunConfig::parse_str(
            "data.nodes = /nonexistent/n.tsv\ndata.edges = /nonexistent/e.tsv\ndata.features = /nonexistent/f.txt",
            Path::new("."),
        )
        .unwrap_err();
        assert!(e.to_string().contains("data.nodes"), "{e}");
    }
}
