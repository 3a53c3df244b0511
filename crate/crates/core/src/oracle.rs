//! Forward-only verification: finite-difference gradient checks,
//! Monte-Carlo expectations over drop masks, first-order Taylor checks of
//! the worst-case perturbation, and bit-level identities between
//! regularizer configurations.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::analysis::{self, recorded_run, variance_probe};
use crate::backbone::{Backbone, ForwardHooks, GraphIndex, Model, ModelError};
use crate::graph::{synth_graph, SynthConfig};
use crate::regularizers::{GradRegConfig, HookShapes, Method, Regularizer, RunningStats};
use crate::tensor::{Matrix, Tape, Var};
use crate::training::{self, Objective, Task, TaskData, TrainConfig};
use crate::{Error, Result};

/// Central-difference step.
pub const FD_STEP: f64 = 1e-5;
/// Denominator floor of the finite-difference relative error.
pub const FD_FLOOR: f64 = 1e-6;
const MAX_RESAMPLES: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GradTarget {
    Params,
    Features,
    Messages,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Side {
    Features,
    Messages,
}

/// `L2` pairs an l2 ball with the l2 gradient norm; `L1` pairs an l-inf
/// ball (sign direction) with the l1 gradient norm.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormKind {
    L1,
    L2,
}

/// Adds fixed matrices to the features and per-layer messages through
/// gradient-tracked leaves.
#[derive(Default)]
struct Offsets {
    features: Option<Matrix>,
    messages: Vec<Option<Matrix>>,
    feature_var: Option<Var>,
    message_vars: Vec<Option<Var>>,
}

impl Offsets {
    fn zeros(model: &Model, index: &GraphIndex, features: &Matrix, side: Option<GradTarget>) -> Self {
        let shapes = HookShapes::of(model, index, features);
        let mut o = Offsets::default();
        match side {
            Some(GradTarget::Features) => o.features = Some(Matrix::zeros(features.rows(), features.cols())),
            Some(GradTarget::Messages) => {
                o.messages = shapes.messages.iter().map(|&(k, w)| Some(Matrix::zeros(k, w))).collect()
            }
            _ => {}
        }
        o
    }
}

impl ForwardHooks for Offsets {
    fn on_features(&mut self, tape: &mut Tape, features: Var) -> std::result::Result<Var, ModelError> {
        match &self.features {
            None => Ok(features),
            Some(d) => {
                let v = tape.leaf(d.clone(), true);
                self.feature_var = Some(v);
                Ok(tape.add(features, v)?)
            }
        }
    }

    fn on_messages(
        &mut self,
        tape: &mut Tape,
        messages: Var,
        layer: usize,
        _index: &GraphIndex,
    ) -> std::result::Result<Var, ModelError> {
        if self.message_vars.len() <= layer {
            self.message_vars.resize(layer + 1, None);
        }
        match self.messages.get(layer).and_then(Option::as_ref) {
            None => Ok(messages),
            Some(g) => {
                let v = tape.leaf(g.clone(), true);
                self.message_vars[layer] = Some(v);
                Ok(tape.add(messages, v)?)
            }
        }
    }
}

struct Evaluated {
    loss: f64,
    signature: Vec<bool>,
}

fn forward_loss(
    model: &Model,
    index: &GraphIndex,
    features: &Matrix,
    objective: &Objective,
    offsets: &mut Offsets,
) -> Result<Evaluated> {
    let mut tape = Tape::new();
    let f = tape.constant(features.clone());
    let fwd = model.forward(&mut tape, f, index, offsets, false)?;
    let loss = objective.loss(&mut tape, fwd.output)?;
    Ok(Evaluated {
        loss: tape.value(loss).data()[0],
        signature: tape.activation_signature(),
    })
}

/// Autodiff gradients of the loss with respect to the parameters, the
/// feature matrix or each layer's message matrix.
fn autodiff_grads(
    model: &Model,
    index: &GraphIndex,
    features: &Matrix,
    objective: &Objective,
    target: GradTarget,
) -> Result<Vec<Matrix>> {
    let mut offsets = Offsets::zeros(model, index, features, Some(target));
    let mut tape = Tape::new();
    let f = tape.constant(features.clone());
    let fwd = model.forward(&mut tape, f, index, &mut offsets, target == GradTarget::Params)?;
    let loss = objective.loss(&mut tape, fwd.output)?;
    tape.backward(loss)?;
    let vars: Vec<Var> = match target {
        GradTarget::Params => fwd.params,
        GradTarget::Features => offsets.feature_var.into_iter().collect(),
        GradTarget::Messages => offsets.message_vars.into_iter().flatten().collect(),
    };
    Ok(vars
        .into_iter()
        .map(|v| {
            tape.grad(v).cloned().unwrap_or_else(|| {
                let (r, c) = tape.shape(v);
                Matrix::zeros(r, c)
            })
        })
        .collect())
}

/// Result of a finite-difference comparison.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheck {
    pub target: GradTarget,
    pub samples: usize,
    pub max_rel_error: f64,
    /// Coordinates redrawn because an activation changed side under the step.
    pub resampled: usize,
}

/// `|a - n| / max(|a|, |n|, FD_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FD_FLOOR)
}

/// Compares autodiff gradients against central differences at `samples`
/// random coordinates. Coordinates whose ±step evaluation flips any relu
/// or leaky-relu input are redrawn.
pub fn finite_diff_check(
    model: &Model,
    index: &GraphIndex,
    features: &Matrix,
    objective: &Objective,
    target: GradTarget,
    samples: usize,
    seed: u64,
) -> Result<GradCheck> {
    if samples == 0 {
        return Err(Error::Config("finite_diff_check needs at least one sample".into()));
    }
    let grads = autodiff_grads(model, index, features, objective, target)?;
    let sizes: Vec<usize> = grads.iter().map(Matrix::len).collect();
    let total: usize = sizes.iter().sum();
    if total == 0 {
        return Err(Error::Config(format!("no {target:?} coordinates to check")));
    }
    let base = forward_loss(model, index, features, objective, &mut Offsets::default())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut max_rel = 0.0f64;
    let mut resampled = 0;

    let eval_at = |block: usize, pos: usize, h: f64| -> Result<Evaluated> {
        match target {
            GradTarget::Params => {
                let mut m = model.clone();
                m.params_mut()[block].data_mut()[pos] += h;
                forward_loss(&m, index, features, objective, &mut Offsets::default())
            }
            GradTarget::Features => {
                let mut f = features.clone();
                f.data_mut()[pos] += h;
                forward_loss(model, index, &f, objective, &mut Offsets::default())
            }
            GradTarget::Messages => {
                let mut o = Offsets::zeros(model, index, features, Some(GradTarget::Messages));
                if let Some(Some(m)) = o.messages.get_mut(block) {
                    m.data_mut()[pos] += h;
                }
                forward_loss(model, index, features, objective, &mut o)
            }
        }
    };

    for _ in 0..samples {
        let mut attempts = 0;
        loop {
            let mut flat = rng.random_range(0..total);
            let mut block = 0;
            while flat >= sizes[block] {
                flat -= sizes[block];
                block += 1;
            }
            let plus = eval_at(block, flat, FD_STEP)?;
            let minus = eval_at(block, flat, -FD_STEP)?;
            if (plus.signature != base.signature || minus.signature != base.signature) && attempts < MAX_RESAMPLES {
                attempts += 1;
                resampled += 1;
                continue;
            }
            let numeric = (plus.loss - minus.loss) / (2.0 * FD_STEP);
            let analytic = grads[block].data()[flat];
            max_rel = max_rel.max(relative_error(analytic, numeric));
            break;
        }
    }
    Ok(GradCheck {
        target,
        samples,
        max_rel_error: max_rel,
        resampled,
    })
}

/// Monte-Carlo estimate of the expected loss under random drop masks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct McExpectation {
    pub method: Method,
    pub keep_prob: f64,
    pub trials: usize,
    pub mean_perturbed_loss: f64,
    pub clean_loss: f64,
    /// Half-width of the 95% normal interval around the mean.
    pub ci_halfwidth: f64,
}

impl McExpectation {
    pub fn gap(&self) -> f64 {
        self.mean_perturbed_loss - self.clean_loss
    }
}

pub const MIN_MC_TRIALS: usize = 1000;

/// Averages the training-mode loss over `trials` independent masks of a
/// drop method, with the parameters fixed.
#[allow(clippy::too_many_arguments)]
pub fn mc_drop_expectation(
    model: &Model,
    index: &GraphIndex,
    features: &Matrix,
    objective: &Objective,
    method: Method,
    keep_prob: f64,
    trials: usize,
    seed: u64,
) -> Result<McExpectation> {
    if !method.is_drop() {
        return Err(Error::Config(format!("{method} is not a drop method")));
    }
    if trials < MIN_MC_TRIALS {
        return Err(Error::Config(format!(
            "Monte-Carlo estimate needs at least {MIN_MC_TRIALS} trials, got {trials}"
        )));
    }
    let cfg = GradRegConfig {
        method,
        drop_rate: 1.0 - keep_prob,
        ..GradRegConfig::default()
    };
    let mut reg = Regularizer::new(cfg, seed)?;
    let shapes = HookShapes::of(model, index, features);
    let clean = forward_loss(model, index, features, objective, &mut Offsets::default())?.loss;
    let mut stats = RunningStats::default();
    for _ in 0..trials {
        let mut hooks = reg.make_hooks(&shapes)?;
        let mut tape = Tape::new();
        let f = tape.constant(features.clone());
        let fwd = model.forward(&mut tape, f, index, &mut hooks, false)?;
        let loss = objective.loss(&mut tape, fwd.output)?;
        stats.push(tape.value(loss).data()[0]);
    }
    Ok(McExpectation {
        method,
        keep_prob,
        trials,
        mean_perturbed_loss: stats.mean(),
        clean_loss: clean,
        ci_halfwidth: 1.96 * (stats.variance() / trials as f64).sqrt(),
    })
}

/// First-order prediction of the loss increase under the worst-case
/// perturbation of one side, against the observed increase.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaylorEstimate {
    pub side: Side,
    pub radius: f64,
    pub norm_kind: NormKind,
    pub predicted_delta_loss: f64,
    pub observed_delta_loss: f64,
    pub rel_error: f64,
}

pub const MAX_TAYLOR_RADIUS: f64 = 1e-2;

fn taylor_rel_error(observed: f64, predicted: f64) -> f64 {
    (observed - predicted).abs() / observed.abs().max(1e-12)
}

/// Maximizer of the linearized loss over the ball of `radius`, and the
/// predicted increase.
fn worst_case(grads: &[Matrix], radius: f64, kind: NormKind) -> Option<(Vec<Matrix>, f64)> {
    let l2 = grads.iter().map(|g| g.data().iter().map(|x| x * x).sum::<f64>()).sum::<f64>().sqrt();
    if l2 == 0.0 {
        return None;
    }
    match kind {
        NormKind::L2 => Some((grads.iter().map(|g| g.scaled(radius / l2)).collect(), radius * l2)),
        NormKind::L1 => {
            let l1: f64 = grads.iter().map(|g| g.data().iter().map(|x| x.abs()).sum::<f64>()).sum();
            Some((
                grads
                    .iter()
                    .map(|g| g.map(|x| if x == 0.0 { 0.0 } else { radius * x.signum() }))
                    .collect(),
                radius * l1,
            ))
        }
    }
}

fn side_target(side: Side) -> GradTarget {
    match side {
        Side::Features => GradTarget::Features,
        Side::Messages => GradTarget::Messages,
    }
}

fn offsets_for(side: Side, pert: Vec<Matrix>, into: &mut Offsets) {
    match side {
        Side::Features => into.features = pert.into_iter().next(),
        Side::Messages => into.messages = pert.into_iter().map(Some).collect(),
    }
}

/// `None` when the gradient on `side` is exactly zero.
#[allow(clippy::too_many_arguments)]
pub fn taylor_perturbation_check(
    model: &Model,
    index: &GraphIndex,
    features: &Matrix,
    objective: &Objective,
    side: Side,
    radius: f64,
    kind: NormKind,
) -> Result<Option<TaylorEstimate>> {
    if !(0.0..=MAX_TAYLOR_RADIUS).contains(&radius) {
        return Err(Error::Config(format!(
            "Taylor radius must lie in [0, {MAX_TAYLOR_RADIUS}], got {radius}"
        )));
    }
    let grads = autodiff_grads(model, index, features, objective, side_target(side))?;
    let Some((pert, predicted)) = worst_case(&grads, radius, kind) else {
        return Ok(None);
    };
    let base = forward_loss(model, index, features, objective, &mut Offsets::default())?.loss;
    let mut offsets = Offsets::default();
    offsets_for(side, pert, &mut offsets);
    let observed = forward_loss(model, index, features, objective, &mut offsets)?.loss - base;
    Ok(Some(TaylorEstimate {
        side,
        radius,
        norm_kind: kind,
        predicted_delta_loss: predicted,
        observed_delta_loss: observed,
        rel_error: taylor_rel_error(observed, predicted),
    }))
}

/// Joint feature and message perturbation against the sum of the two
/// single-side predictions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JointTaylor {
    pub feature_radius: f64,
    pub message_radius: f64,
    pub predicted_sum: f64,
    pub observed_joint: f64,
    pub rel_error: f64,
}

pub fn joint_taylor_check(
    model: &Model,
    index: &GraphIndex,
    features: &Matrix,
    objective: &Objective,
    feature_radius: f64,
    message_radius: f64,
) -> Result<Option<JointTaylor>> {
    for r in [feature_radius, message_radius] {
        if !(0.0..=MAX_TAYLOR_RADIUS).contains(&r) {
            return Err(Error::Config(format!(
                "Taylor radius must lie in [0, {MAX_TAYLOR_RADIUS}], got {r}"
            )));
        }
    }
    let gf = autodiff_grads(model, index, features, objective, GradTarget::Features)?;
    let gm = autodiff_grads(model, index, features, objective, GradTarget::Messages)?;
    let (Some((pf, pred_f)), Some((pm, pred_m))) = (
        worst_case(&gf, feature_radius, NormKind::L2),
        worst_case(&gm, message_radius, NormKind::L2),
    ) else {
        return Ok(None);
    };
    let base = forward_loss(model, index, features, objective, &mut Offsets::default())?.loss;
    let mut offsets = Offsets::default();
    offsets_for(Side::Features, pf, &mut offsets);
    offsets_for(Side::Messages, pm, &mut offsets);
    let observed = forward_loss(model, index, features, objective, &mut offsets)?.loss - base;
    let predicted = pred_f + pred_m;
    Ok(Some(JointTaylor {
        feature_radius,
        message_radius,
        predicted_sum: predicted,
        observed_joint: observed,
        rel_error: taylor_rel_error(observed, predicted),
    }))
}

/// Largest absolute difference between two training runs' per-epoch losses
/// and gradient norms (infinite if the lengths differ).
pub fn trace_distance(a: &[training::TraceRow], b: &[training::TraceRow]) -> f64 {
    if a.len() != b.len() {
        return f64::INFINITY;
    }
    a.iter()
        .zip(b)
        .flat_map(|(x, y)| {
            [
                (x.train_loss - y.train_loss).abs(),
                (x.grad_l1 - y.grad_l1).abs(),
                (x.grad_l2 - y.grad_l2).abs(),
            ]
        })
        .fold(0.0, f64::max)
}

/// A pair of configurations expected to produce the same run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IdentityCheck {
    pub name: String,
    pub max_diff: f64,
}

/// Trains each degenerate configuration next to its reference for
/// `base.epochs` epochs and reports the largest trace difference.
pub fn degenerate_identities(data: &TaskData, base: &TrainConfig) -> Result<Vec<IdentityCheck>> {
    let (a, b) = (base.regularizer.alpha, base.regularizer.beta);
    let with = |reg: GradRegConfig| TrainConfig {
        regularizer: reg,
        ..base.clone()
    };
    let run = |cfg: &TrainConfig| -> Result<Vec<training::TraceRow>> {
        Ok(training::train(data.build_model(cfg), data, cfg)?.trace)
    };
    let cfg_of = |method: Method, alpha: f64, beta: f64, steps: usize| {
        with(GradRegConfig {
            method,
            alpha,
            beta,
            steps,
            ..base.regularizer.clone()
        })
    };
    let steps = base.regularizer.steps;
    let clean = run(&cfg_of(Method::Clean, a, b, steps))?;
    let mut out = Vec::new();
    let mut push = |name: &str, x: &[training::TraceRow], y: &[training::TraceRow]| {
        out.push(IdentityCheck {
            name: name.to_string(),
            max_diff: trace_distance(x, y),
        })
    };

    let zero = run(&cfg_of(Method::Grug, 0.0, 0.0, 1))?;
    push("grug(alpha=0,beta=0,N=1) == clean", &zero, &clean);

    let no_feat = run(&cfg_of(Method::Grug, a, 0.0, steps))?;
    let msg_only = run(&cfg_of(Method::GrugM, a, 0.0, steps))?;
    push("grug(beta=0) == grug_m", &no_feat, &msg_only);

    let no_msg = run(&cfg_of(Method::Grug, 0.0, b, steps))?;
    let flag = run(&cfg_of(Method::Flag, 0.0, b, steps))?;
    let grug_n = run(&cfg_of(Method::GrugN, 0.0, b, steps))?;
    push("grug(alpha=0) == flag", &no_msg, &flag);
    push("flag == grug_n", &flag, &grug_n);

    for m in [Method::Dropout, Method::DropNode, Method::DropEdge, Method::DropMessage] {
        let dropped = run(&with(GradRegConfig {
            method: m,
            drop_rate: 0.0,
            ..base.regularizer.clone()
        }))?;
        push(&format!("{m}(keep=1) == clean"), &dropped, &clean);
    }
    Ok(out)
}

/// One machine-checked assertion.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckRecord {
    pub criterion: u8,
    pub name: String,
    /// One of `<`, `<=`, `==`.
    pub relation: String,
    pub tolerance: f64,
    pub observed: f64,
    pub passed: bool,
}

impl CheckRecord {
    fn new(criterion: u8, name: impl Into<String>, observed: f64, relation: &str, tolerance: f64) -> Self {
        let passed = match relation {
            "<" => observed < tolerance,
            "<=" => observed <= tolerance,
            _ => observed == tolerance,
        };
        Self {
            criterion,
            name: name.into(),
            relation: relation.to_string(),
            tolerance,
            observed,
            passed,
        }
    }
}

/// Small labelled graph used by the verification suite.
pub fn verification_graph(seed: u64) -> Result<TaskData> {
    let g = synth_graph(&SynthConfig {
        nodes_per_type: vec![40, 40, 40],
        feature_dim: 8,
        seed,
        ..SynthConfig::default()
    })?;
    TaskData::prepare(&g, Task::NodeClassification, seed)
}

fn node_objective(data: &TaskData) -> Result<Objective> {
    data.train_objective(1, 0)
}

/// Gradient checks over 1-layer RGCN and RGAT: one record per backbone and
/// target, reporting the largest error over five seeds.
pub fn gradient_checks(seed: u64) -> Result<Vec<CheckRecord>> {
    let mut out = Vec::new();
    for backbone in [Backbone::Rgcn, Backbone::Rgat] {
        for target in [GradTarget::Params, GradTarget::Features, GradTarget::Messages] {
            let mut worst = 0.0f64;
            for s in 0..5 {
                let data = verification_graph(seed + s)?;
                let obj = node_objective(&data)?;
                let mut model = Model::new(
                    backbone,
                    data.features().cols(),
                    8,
                    data.output_dim(8),
                    1,
                    data.message_graph().relation_count(),
                    seed + s,
                );
                let mut rng = ChaCha8Rng::seed_from_u64(seed + s);
                for p in model.params_mut() {
                    for v in p.data_mut() {
                        *v += rng.random_range(-0.1..0.1);
                    }
                }
                let check = finite_diff_check(&model, data.index(), data.features(), &obj, target, 100, seed + s)?;
                worst = worst.max(check.max_rel_error);
            }
            let name = format!("finite differences {backbone:?} {target:?}").to_lowercase();
            out.push(CheckRecord::new(1, name, worst, "<", 1e-4));
        }
    }
    Ok(out)
}

fn identity_checks(seed: u64) -> Result<Vec<CheckRecord>> {
    let data = verification_graph(seed)?;
    let base = TrainConfig {
        epochs: 20,
        lr: 0.01,
        seed,
        layers: 2,
        hidden_dim: 8,
        regularizer: GradRegConfig::grug(0.1, 0.05),
        ..TrainConfig::default()
    };
    Ok(degenerate_identities(&data, &base)?
        .into_iter()
        .map(|c| CheckRecord::new(2, c.name, c.max_diff, "<", 1e-12))
        .collect())
}

fn variance_checks(seed: u64) -> Result<Vec<CheckRecord>> {
    let data = verification_graph(seed)?;
    let (alpha, beta) = (0.35, 0.01);
    let cfg = TrainConfig {
        epochs: 200,
        lr: 0.01,
        seed,
        layers: 2,
        hidden_dim: 8,
        regularizer: GradRegConfig::grug(alpha, beta),
        ..TrainConfig::default()
    };
    let (_, rec) = recorded_run(&data, &cfg)?;
    let probe = variance_probe(&rec)?;
    Ok(vec![
        CheckRecord::new(3, "variance of gamma increments", probe.v_gamma, "<", alpha * alpha),
        CheckRecord::new(3, "variance of delta increments", probe.v_delta, "<", beta * beta),
        CheckRecord::new(3, "variance of all increments", probe.v_total, "<", alpha * alpha + beta * beta),
    ])
}

/// A 2-layer RGCN trained without regularization on the verification graph.
pub fn trained_toy_model(data: &TaskData, seed: u64) -> Result<Model> {
    let cfg = TrainConfig {
        epochs: 100,
        lr: 0.01,
        seed,
        layers: 2,
        hidden_dim: 8,
        ..TrainConfig::default()
    };
    Ok(training::train(data.build_model(&cfg), data, &cfg)?.model)
}

fn taylor_checks(seed: u64) -> Result<Vec<CheckRecord>> {
    let data = verification_graph(seed)?;
    let model = trained_toy_model(&data, seed)?;
    let obj = node_objective(&data)?;
    let (idx, f) = (data.index(), data.features());
    let mut out = Vec::new();
    for side in [Side::Features, Side::Messages] {
        let name = format!("taylor l2 {side:?} radius 1e-4").to_lowercase();
        let rel = taylor_perturbation_check(&model, idx, f, &obj, side, 1e-4, NormKind::L2)?
            .map_or(f64::INFINITY, |t| t.rel_error);
        out.push(CheckRecord::new(4, name, rel, "<", 0.05));
    }
    let joint = joint_taylor_check(&model, idx, f, &obj, 1e-4, 1e-4)?.map_or(f64::INFINITY, |j| j.rel_error);
    out.push(CheckRecord::new(4, "joint perturbation vs sum of sides", joint, "<", 0.1));
    Ok(out)
}

fn drop_checks(seed: u64) -> Result<Vec<CheckRecord>> {
    let data = verification_graph(seed)?;
    let model = trained_toy_model(&data, seed)?;
    let obj = node_objective(&data)?;
    let (idx, f) = (data.index(), data.features());
    let trials = MIN_MC_TRIALS;
    let mut out = Vec::new();

    let full = mc_drop_expectation(&model, idx, f, &obj, Method::DropMessage, 1.0, trials, seed)?;
    out.push(CheckRecord::new(5, "keep=1 gap", full.gap().abs(), "==", 0.0));
    out.push(CheckRecord::new(5, "keep=1 interval", full.ci_halfwidth, "==", 0.0));

    let half = mc_drop_expectation(&model, idx, f, &obj, Method::DropMessage, 0.5, trials, seed)?;
    let near = mc_drop_expectation(&model, idx, f, &obj, Method::DropMessage, 0.99, trials, seed)?;
    out.push(CheckRecord::new(5, "gap(keep=0.99) - gap(keep=0.5)", near.gap() - half.gap(), "<", 0.0));
    out.push(CheckRecord::new(
        5,
        "keep=0.5 mean not below clean beyond noise",
        half.clean_loss - half.mean_perturbed_loss - half.ci_halfwidth,
        "<=",
        0.0,
    ));

    let linear = Model::new(Backbone::Rgcn, f.cols(), 8, 4, 1, data.message_graph().relation_count(), seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x11);
    let mut w = Matrix::zeros(f.rows(), 4);
    for v in w.data_mut() {
        *v = rng.random_range(-1.0..1.0);
    }
    let lin_obj = Objective::Linear { weights: w };
    for m in [Method::DropMessage, Method::Dropout] {
        let e = mc_drop_expectation(&linear, idx, f, &lin_obj, m, 0.5, trials, seed)?;
        out.push(CheckRecord::new(
            5,
            format!("linear model {m} gap within interval"),
            e.gap().abs(),
            "<=",
            e.ci_halfwidth,
        ));
    }
    Ok(out)
}

fn diversity_checks(seed: u64) -> Result<Vec<CheckRecord>> {
    let data = verification_graph(seed)?;
    let cfg = TrainConfig {
        seed,
        layers: 2,
        hidden_dim: 8,
        ..TrainConfig::default()
    };
    let model = data.build_model(&cfg);
    let epochs = 50;
    let d = analysis::diversity_count(
        &model,
        &data,
        &GradRegConfig::grug(0.1, 0.01),
        &GradRegConfig {
            drop_rate: 0.1,
            ..GradRegConfig::new(Method::DropMessage)
        },
        epochs,
        seed,
    )?;
    Ok(vec![
        CheckRecord::new(6, "distinct grug message matrices", d.distinct_grug as f64, "==", epochs as f64),
        CheckRecord::new(
            6,
            "distinct dropmessage matrices vs distinct masks",
            d.distinct_drop as f64,
            "<=",
            d.drop_masks as f64,
        ),
    ])
}

/// Checks for one criterion (1 to 6).
pub fn verify_criterion(criterion: u8, seed: u64) -> Result<Vec<CheckRecord>> {
    match criterion {
        1 => gradient_checks(seed),
        2 => identity_checks(seed),
        3 => variance_checks(seed),
        4 => taylor_checks(seed),
        5 => drop_checks(seed),
        6 => diversity_checks(seed),
        other => Err(Error::Config(format!("no verification criterion {other}"))),
    }
}

/// All verification checks, in criterion order.
pub fn verify_suite(seed: u64) -> Result<Vec<CheckRecord>> {
    let mut out = Vec::new();
    for c in 1..=6 {
        log::info!("verification criterion {c}");
        out.extend(verify_criterion(c, seed)?);
    }
    Ok(out)
}

pub fn records_json(records: &[CheckRecord]) -> Result<String> {
    Ok(serde_json::to_string_pretty(records)?)
}
