//! Measurement protocols: depth, attack-ratio and hyperparameter sweeps,
//! the ablation grid, the perturbation variance probe, diversity counting
//! and convergence epochs.
//!
//! Sweeps are paired: repeat `r` uses seed `base.seed + r` for the split,
//! the model initialization and the regularizer, whatever the method or axis
//! value.

use std::collections::HashSet;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backbone::Model;
use crate::graph::{self, HeteroGraph};
use crate::regularizers::{GradRegConfig, Method, Recorder, Regularizer};
use crate::tensor::Matrix;
use crate::training::{self, regularizer_seed, TaskData, TraceRow, TrainConfig};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Axis {
    Depth,
    AttackRatio,
    Method,
    Alpha,
    Beta,
}

impl Axis {
    pub fn name(self) -> &'static str {
        match self {
            Axis::Depth => "depth",
            Axis::AttackRatio => "attack_ratio",
            Axis::Method => "method",
            Axis::Alpha => "alpha",
            Axis::Beta => "beta",
        }
    }
}

impl std::str::FromStr for Axis {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "depth" => Ok(Axis::Depth),
            "attack_ratio" => Ok(Axis::AttackRatio),
            "method" => Ok(Axis::Method),
            "alpha" => Ok(Axis::Alpha),
            "beta" => Ok(Axis::Beta),
            other => Err(format!(
                "unknown sweep axis {other:?} (expected depth, attack_ratio, method, alpha or beta)"
            )),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepSpec {
    pub axis: Axis,
    /// Axis values; ignored for [`Axis::Method`], where the methods are the axis.
    pub values: Vec<f64>,
    pub methods: Vec<Method>,
    pub repeats: usize,
    pub base: TrainConfig,
    /// Train-loss level used for epochs-to-threshold.
    pub loss_threshold: f64,
}

impl SweepSpec {
    pub fn validate(&self) -> Result<()> {
        if self.repeats == 0 {
            return Err(Error::Config("sweep.repeats must be at least 1".into()));
        }
        if self.methods.is_empty() {
            return Err(Error::Config("sweep.methods must not be empty".into()));
        }
        if self.axis != Axis::Method && self.values.is_empty() {
            return Err(Error::Config("sweep.values must not be empty".into()));
        }
        for &v in &self.values {
            let ok = match self.axis {
                Axis::Depth => v >= 1.0 && v.fract() == 0.0,
                Axis::AttackRatio => (0.0..=1.0).contains(&v),
                Axis::Alpha | Axis::Beta => v.is_finite() && v >= 0.0,
                Axis::Method => true,
            };
            if !ok {
                return Err(Error::Config(format!(
                    "sweep value {v} invalid for axis {}",
                    self.axis.name()
                )));
            }
        }
        self.base.validate()
    }

    fn axis_values(&self) -> Vec<f64> {
        if self.axis == Axis::Method {
            vec![0.0]
        } else {
            self.values.clone()
        }
    }
}

/// One trained cell of a sweep.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRecord {
    pub axis: Axis,
    pub value: f64,
    pub method: Method,
    pub repeat: usize,
    /// Test Micro-F1 (nodes) or AUC (links).
    pub metric: f64,
    pub macro_f1: Option<f64>,
    pub epochs_to_threshold: Option<usize>,
    pub final_train_loss: f64,
}

/// Aggregate over repeats for one `(value, method)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub value: f64,
    pub method: Method,
    pub mean: f64,
    pub std: f64,
    /// Mean over the repeats that reached the threshold.
    pub mean_epochs_to_threshold: Option<f64>,
    pub repeats: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub axis: Axis,
    pub records: Vec<SweepRecord>,
    pub rows: Vec<SweepRow>,
}

/// Mean and unbiased standard deviation; a single sample has std 0.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len();
    if n == 0 {
        return (f64::NAN, 0.0);
    }
    let mean = xs.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, var.sqrt())
}

impl SweepResult {
    fn from_records(axis: Axis, mut records: Vec<SweepRecord>, order: &[Method]) -> Self {
        let pos = |m: Method| order.iter().position(|&x| x == m).unwrap_or(usize::MAX);
        records.sort_by(|a, b| {
            a.value
                .total_cmp(&b.value)
                .then(pos(a.method).cmp(&pos(b.method)))
                .then(a.repeat.cmp(&b.repeat))
        });
        let mut rows: Vec<SweepRow> = Vec::new();
        for chunk in records.chunk_by(|a, b| a.value == b.value && a.method == b.method) {
            let metrics: Vec<f64> = chunk.iter().map(|r| r.metric).collect();
            let (mean, std) = mean_std(&metrics);
            let reached: Vec<f64> = chunk
                .iter()
                .filter_map(|r| r.epochs_to_threshold.map(|e| e as f64))
                .collect();
            rows.push(SweepRow {
                value: chunk[0].value,
                method: chunk[0].method,
                mean,
                std,
                mean_epochs_to_threshold: (!reached.is_empty()).then(|| mean_std(&reached).0),
                repeats: chunk.len(),
            });
        }
        Self {
            axis,
            records,
            rows,
        }
    }

    pub fn row(&self, value: f64, method: Method) -> Option<&SweepRow> {
        self.rows.iter().find(|r| r.value == value && r.method == method)
    }

    /// Per-repeat metrics for one cell, ordered by repeat.
    pub fn metrics(&self, value: f64, method: Method) -> Vec<f64> {
        self.records
            .iter()
            .filter(|r| r.value == value && r.method == method)
            .map(|r| r.metric)
            .collect()
    }
}

/// First 1-indexed epoch whose train loss is at or below `threshold`.
pub fn convergence_epochs(trace: &[TraceRow], threshold: f64) -> Option<usize> {
    trace.iter().find(|r| r.train_loss <= threshold).map(|r| r.epoch)
}

fn cell_config(spec: &SweepSpec, value: f64, method: Method, repeat: usize) -> TrainConfig {
    let mut cfg = spec.base.clone();
    cfg.seed = spec.base.seed + repeat as u64;
    cfg.regularizer.method = method;
    match spec.axis {
        Axis::Depth => cfg.layers = value as usize,
        Axis::Alpha => cfg.regularizer.alpha = value,
        Axis::Beta => cfg.regularizer.beta = value,
        Axis::AttackRatio | Axis::Method => {}
    }
    cfg
}

fn run_cell(g: &HeteroGraph, spec: &SweepSpec, value: f64, method: Method, repeat: usize) -> Result<SweepRecord> {
    let cfg = cell_config(spec, value, method, repeat);
    let mut data = TaskData::prepare(g, cfg.task, cfg.seed)?;
    if spec.axis == Axis::AttackRatio {
        let attacked = graph::add_random_edges(data.message_graph(), value, cfg.seed ^ 0xa77ac)?;
        data = data.with_message_graph(attacked);
    }
    let model = data.build_model(&cfg);
    let out = training::train(model, &data, &cfg)?;
    Ok(SweepRecord {
        axis: spec.axis,
        value,
        method,
        repeat,
        metric: out.test.primary(),
        macro_f1: out.test.macro_f1,
        epochs_to_threshold: convergence_epochs(&out.trace, spec.loss_threshold),
        final_train_loss: out.trace.last().map_or(f64::NAN, |r| r.train_loss),
    })
}

/// Trains every `(value, method, repeat)` cell, using up to `jobs` worker
/// threads. Output order does not depend on scheduling.
pub fn run_sweep(g: &HeteroGraph, spec: &SweepSpec, jobs: usize) -> Result<SweepResult> {
    spec.validate()?;
    let cells: Vec<(f64, Method, usize)> = spec
        .axis_values()
        .into_iter()
        .flat_map(|v| {
            spec.methods
                .iter()
                .flat_map(move |&m| (0..spec.repeats).map(move |r| (v, m, r)))
        })
        .collect();
    let run = || -> Result<Vec<SweepRecord>> {
        cells
            .par_iter()
            .map(|&(v, m, r)| {
                log::info!("sweep cell {}={v} method={m} repeat={r}", spec.axis.name());
                run_cell(g, spec, v, m, r)
            })
            .collect()
    };
    let records = if jobs <= 1 {
        cells
            .iter()
            .map(|&(v, m, r)| run_cell(g, spec, v, m, r))
            .collect::<Result<Vec<_>>>()?
    } else {
        rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build()
            .map_err(|e| Error::Config(format!("cannot start {jobs} workers: {e}")))?
            .install(run)?
    };
    Ok(SweepResult::from_records(spec.axis, records, &spec.methods))
}

/// Depth sweep; every method sees the same seeds at each repeat.
pub fn oversmoothing_sweep(
    g: &HeteroGraph,
    methods: &[Method],
    depths: &[usize],
    repeats: usize,
    base: &TrainConfig,
    jobs: usize,
) -> Result<SweepResult> {
    let spec = SweepSpec {
        axis: Axis::Depth,
        values: depths.iter().map(|&d| d as f64).collect(),
        methods: methods.to_vec(),
        repeats,
        base: base.clone(),
        loss_threshold: 0.1,
    };
    run_sweep(g, &spec, jobs)
}

/// Random edge-addition sweep. Only the message-passing graph is attacked;
/// labels and the evaluation protocol are untouched.
pub fn robustness_sweep(
    g: &HeteroGraph,
    methods: &[Method],
    ratios: &[f64],
    repeats: usize,
    base: &TrainConfig,
    jobs: usize,
) -> Result<SweepResult> {
    let spec = SweepSpec {
        axis: Axis::AttackRatio,
        values: ratios.to_vec(),
        methods: methods.to_vec(),
        repeats,
        base: base.clone(),
        loss_threshold: 0.1,
    };
    run_sweep(g, &spec, jobs)
}

/// The five perturbation variants under identical seeds, plus the paired
/// `grug_T - grug` gap.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationResult {
    pub sweep: SweepResult,
    pub gap_mean: f64,
    pub gap_std: f64,
}

pub fn ablation_grid(g: &HeteroGraph, repeats: usize, base: &TrainConfig, jobs: usize) -> Result<AblationResult> {
    let spec = SweepSpec {
        axis: Axis::Method,
        values: Vec::new(),
        methods: Method::ABLATION.to_vec(),
        repeats,
        base: base.clone(),
        loss_threshold: 0.1,
    };
    let sweep = run_sweep(g, &spec, jobs)?;
    let t = sweep.metrics(0.0, Method::GrugT);
    let full = sweep.metrics(0.0, Method::Grug);
    let gaps: Vec<f64> = t.iter().zip(&full).map(|(a, b)| a - b).collect();
    let (gap_mean, gap_std) = mean_std(&gaps);
    Ok(AblationResult {
        sweep,
        gap_mean,
        gap_std,
    })
}

/// Empirical variances of per-step perturbation increments.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct VarianceProbe {
    pub v_delta: f64,
    pub v_gamma: f64,
    pub v_total: f64,
    pub samples: u64,
}

pub const MIN_PROBE_SAMPLES: u64 = 100;

pub fn variance_probe(recorder: &Recorder) -> Result<VarianceProbe> {
    let samples = recorder.total.count;
    if samples < MIN_PROBE_SAMPLES {
        return Err(Error::Probe(format!(
            "{samples} recorded increments, need at least {MIN_PROBE_SAMPLES}"
        )));
    }
    Ok(VarianceProbe {
        v_delta: recorder.delta.variance(),
        v_gamma: recorder.gamma.variance(),
        v_total: recorder.total.variance(),
        samples,
    })
}

/// Trains with recording switched on and returns the recorder.
pub fn recorded_run(data: &TaskData, cfg: &TrainConfig) -> Result<(training::TrainOutcome, Recorder)> {
    let mut reg = Regularizer::new(cfg.regularizer.clone(), regularizer_seed(cfg.seed))?;
    reg.enable_recording();
    let model = data.build_model(cfg);
    let out = training::train_with(model, data, cfg, &mut reg)?;
    let rec = reg.take_recorder().expect("recording enabled above");
    Ok((out, rec))
}

/// Number of pairwise-distinct matrices under exact entry comparison.
pub fn count_distinct(ms: &[Matrix]) -> usize {
    let keys: HashSet<(usize, usize, Vec<u64>)> = ms
        .iter()
        .map(|m| {
            // +0.0 folds -0.0 into 0.0 so equal values compare equal
            let bits = m.data().iter().map(|x| (x + 0.0).to_bits()).collect();
            (m.rows(), m.cols(), bits)
        })
        .collect();
    keys.len()
}

pub const MAX_DIVERSITY_EPOCHS: usize = 200;
pub const MAX_DIVERSITY_ENTRIES: usize = 100_000;

/// Distinct effective (post-hook) layer-0 message matrices over `epochs`
/// frozen-parameter epochs of one regularizer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Diversity {
    pub epochs: usize,
    pub distinct_messages: usize,
    /// Distinct masks (drop methods), otherwise 0.
    pub distinct_masks: usize,
}

pub fn diversity_run(model: &Model, data: &TaskData, reg_cfg: &GradRegConfig, epochs: usize, seed: u64) -> Result<Diversity> {
    let k = data.index().num_messages();
    let width = model.layer_widths()[0];
    if epochs > MAX_DIVERSITY_EPOCHS || k * width > MAX_DIVERSITY_ENTRIES {
        return Err(Error::Probe(format!(
            "diversity recording capped at {MAX_DIVERSITY_EPOCHS} epochs and {MAX_DIVERSITY_ENTRIES} entries, got {epochs} epochs of {k}x{width}"
        )));
    }
    let mut reg = Regularizer::new(reg_cfg.clone(), seed)?;
    reg.enable_recording();
    let mut frozen = model.clone();
    for epoch in 1..=epochs {
        let objective = data.train_objective(epoch, seed)?;
        reg.epoch(&mut frozen, data.index(), data.features(), &objective, None)?;
    }
    let rec = reg.take_recorder().expect("recording enabled above");
    Ok(Diversity {
        epochs,
        distinct_messages: count_distinct(&rec.messages),
        distinct_masks: count_distinct(&rec.masks),
    })
}

/// Distinct effective message counts for a Grug run and a DropMessage run
/// of equal length.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DiversityCount {
    pub distinct_grug: usize,
    pub distinct_drop: usize,
    pub drop_masks: usize,
}

pub fn diversity_count(
    model: &Model,
    data: &TaskData,
    grug: &GradRegConfig,
    drop: &GradRegConfig,
    epochs: usize,
    seed: u64,
) -> Result<DiversityCount> {
    let g = diversity_run(model, data, grug, epochs, seed)?;
    let d = diversity_run(model, data, drop, epochs, seed)?;
    Ok(DiversityCount {
        distinct_grug: g.distinct_messages,
        distinct_drop: d.distinct_messages,
        drop_masks: d.distinct_masks,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(epoch: usize, loss: f64) -> TraceRow {
        TraceRow {
            epoch,
            train_loss: loss,
            valid_loss: None,
            valid_metric: None,
            grad_l1: 0.0,
            grad_l2: 0.0,
        }
    }

    #[test]
    fn convergence_epochs_examples() {
        let trace = vec![row(1, 1.0), row(2, 0.5), row(3, 0.2)];
        assert_eq!(convergence_epochs(&trace, 0.5), Some(2));
        assert_eq!(convergence_epochs(&trace, 0.1), None);
    }

    #[test]
    fn mean_std_conventions() {
        assert_eq!(mean_std(&[0.7]), (0.7, 0.0));
        let (m, s) = mean_std(&[1.0, 2.0, 3.0]);
        assert_eq!(m, 2.0);
        assert!((s - 1.0).abs() < 1e-15);
    }

    #[test]
    fn distinct_counting_is_exact() {
        let a = Matrix::from_rows(&[[1.0, 0.0]]);
        let b = Matrix::from_rows(&[[1.0, -0.0]]);
        let c = Matrix::from_rows(&[[1.0, 1e-300]]);
        assert_eq!(count_distinct(&[a.clone(), b, a]), 1);
        assert_eq!(count_distinct(&[Matrix::from_rows(&[[1.0, 0.0]]), c]), 2);
    }

    #[test]
    fn probe_needs_samples() {
        let rec = Recorder::default();
        assert!(matches!(variance_probe(&rec), Err(Error::Probe(_))));
    }

    #[test]
    fn sweep_spec_validation() {
        let mut spec = SweepSpec {
            axis: Axis::Depth,
            values: vec![1.0, 2.5],
            methods: vec![Method::Clean],
            repeats: 1,
            base: TrainConfig::default(),
            loss_threshold: 0.1,
        };
        assert!(spec.validate().is_err());
        spec.values = vec![1.0, 2.0];
        assert!(spec.validate().is_ok());
        spec.repeats = 0;
        assert!(spec.validate().is_err());
    }
}
