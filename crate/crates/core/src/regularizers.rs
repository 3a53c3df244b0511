//! Gradient regularizers expressed as forward hooks plus an epoch protocol.
//!
//! Perturbation methods (FLAG and the Grug family) keep additive
//! perturbations `delta` on the feature matrix and `gamma` on every layer's
//! message matrix. Each epoch re-draws them uniformly, then runs `N` inner
//! forward/backward passes: parameter gradients accumulate at `1/N` scale
//! and the perturbations take a normalized gradient-ascent step between
//! passes. `beta` is always the feature-side step and `alpha` the
//! message-side step.
//!
//! Drop methods (Dropout, DropNode, DropEdge, DropMessage) multiply the
//! features or messages by a fresh Bernoulli keep-mask each epoch, scaled
//! by `1/keep_prob` so the masked matrix is unbiased.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{ForwardHooks, GraphIndex, Model, ModelError, NoHooks};
use crate::tensor::{norms, Matrix, Tape, Var};
use crate::training::{Adam, Objective};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Method {
    #[default]
    #[serde(rename = "clean")]
    Clean,
    #[serde(rename = "dropout")]
    Dropout,
    #[serde(rename = "dropnode")]
    DropNode,
    #[serde(rename = "dropedge")]
    DropEdge,
    #[serde(rename = "dropmessage")]
    DropMessage,
    #[serde(rename = "flag")]
    Flag,
    #[serde(rename = "grug")]
    Grug,
    #[serde(rename = "grug_n")]
    GrugN,
    #[serde(rename = "grug_e")]
    GrugE,
    #[serde(rename = "grug_m")]
    GrugM,
    #[serde(rename = "grug_T")]
    GrugT,
}

impl Method {
    pub const ALL: [Method; 11] = [
        Method::Clean,
        Method::Dropout,
        Method::DropNode,
        Method::DropEdge,
        Method::DropMessage,
        Method::Flag,
        Method::Grug,
        Method::GrugN,
        Method::GrugE,
        Method::GrugM,
        Method::GrugT,
    ];

    /// The five perturbation variants compared in the ablation grid.
    pub const ABLATION: [Method; 5] = [
        Method::GrugN,
        Method::GrugE,
        Method::GrugM,
        Method::GrugT,
        Method::Grug,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Clean => "clean",
            Method::Dropout => "dropout",
            Method::DropNode => "dropnode",
            Method::DropEdge => "dropedge",
            Method::DropMessage => "dropmessage",
            Method::Flag => "flag",
            Method::Grug => "grug",
            Method::GrugN => "grug_n",
            Method::GrugE => "grug_e",
            Method::GrugM => "grug_m",
            Method::GrugT => "grug_T",
        }
    }

    pub fn perturbs_features(self) -> bool {
        matches!(self, Method::Flag | Method::Grug | Method::GrugN | Method::GrugT)
    }

    pub fn perturbs_messages(self) -> bool {
        matches!(self, Method::Grug | Method::GrugM | Method::GrugT)
    }

    pub fn perturbs_relations(self) -> bool {
        matches!(self, Method::GrugE | Method::GrugT)
    }

    pub fn is_perturbation(self) -> bool {
        self.perturbs_features() || self.perturbs_messages() || self.perturbs_relations()
    }

    pub fn is_drop(self) -> bool {
        matches!(
            self,
            Method::Dropout | Method::DropNode | Method::DropEdge | Method::DropMessage
        )
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Method {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s || (s == "grug_t" && *m == Method::GrugT))
            .ok_or_else(|| {
                let names: Vec<&str> = Method::ALL.iter().map(|m| m.name()).collect();
                format!("unknown method {s:?} (expected one of {})", names.join(", "))
            })
    }
}

/// Normalization of the ascent direction.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AscentNorm {
    /// `step * grad / ||grad||_F`
    #[default]
    L2,
    /// `step * sign(grad)`
    Sign,
}

impl std::str::FromStr for AscentNorm {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "l2" => Ok(Self::L2),
            "sign" => Ok(Self::Sign),
            other => Err(format!("unknown ascent norm {other:?} (expected l2 or sign)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradRegConfig {
    pub method: Method,
    /// Drop probability `1 - keep_prob` for the drop baselines.
    pub drop_rate: f64,
    /// Message-side init radius and ascent step.
    pub alpha: f64,
    /// Feature-side init radius and ascent step.
    pub beta: f64,
    /// Inner ascent passes per epoch.
    pub steps: usize,
    /// Relation-weight init radius and ascent step.
    pub edge_eps: f64,
    pub ascent: AscentNorm,
}

impl Default for GradRegConfig {
    fn default() -> Self {
        Self {
            method: Method::Clean,
            drop_rate: 0.1,
            alpha: 0.01,
            beta: 0.01,
            steps: 3,
            edge_eps: 0.01,
            ascent: AscentNorm::L2,
        }
    }
}

impl GradRegConfig {
    pub fn new(method: Method) -> Self {
        Self {
            method,
            ..Self::default()
        }
    }

    pub fn grug(alpha: f64, beta: f64) -> Self {
        Self {
            method: Method::Grug,
            alpha,
            beta,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.drop_rate) {
            return Err(Error::Config(format!(
                "regularizer.drop_rate must be in [0, 1), got {}",
                self.drop_rate
            )));
        }
        for (name, v) in [("alpha", self.alpha), ("beta", self.beta), ("edge_eps", self.edge_eps)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!(
                    "regularizer.{name} must be a non-negative real, got {v}"
                )));
            }
        }
        if self.steps == 0 {
            return Err(Error::Config("regularizer.steps must be at least 1".into()));
        }
        Ok(())
    }

    pub fn keep_prob(&self) -> f64 {
        1.0 - self.drop_rate
    }
}

/// I.i.d. `Uniform(-radius, radius)` entries; zeros when `radius == 0`.
pub fn init_perturbation(rows: usize, cols: usize, radius: f64, rng: &mut impl Rng) -> Result<Matrix> {
    if !(radius.is_finite() && radius >= 0.0) {
        return Err(Error::Config(format!(
            "perturbation radius must be non-negative, got {radius}"
        )));
    }
    let mut m = Matrix::zeros(rows, cols);
    if radius > 0.0 {
        for v in m.data_mut() {
            *v = rng.random_range(-radius..radius);
        }
    }
    Ok(m)
}

/// Gradient norms below this are treated as zero by [`ascend`].
pub const ASCENT_EPS: f64 = 1e-12;

/// One normalized ascent step: `pert + step * grad / ||grad||`.
pub fn ascend(pert: &Matrix, grad: &Matrix, step: f64, norm: AscentNorm) -> Result<Matrix> {
    if pert.shape() != grad.shape() {
        return Err(Error::State(format!(
            "perturbation is {:?} but its gradient is {:?}",
            pert.shape(),
            grad.shape()
        )));
    }
    if !(step.is_finite() && step >= 0.0) {
        return Err(Error::Config(format!("ascent step must be non-negative, got {step}")));
    }
    let mut out = pert.clone();
    match norm {
        AscentNorm::L2 => {
            let n = grad.frobenius();
            if n < ASCENT_EPS {
                return Ok(out);
            }
            let s = step / n;
            for (o, g) in out.data_mut().iter_mut().zip(grad.data()) {
                *o += s * g;
            }
        }
        AscentNorm::Sign => {
            if grad.frobenius() < ASCENT_EPS {
                return Ok(out);
            }
            for (o, g) in out.data_mut().iter_mut().zip(grad.data()) {
                if *g != 0.0 {
                    *o += step * g.signum();
                }
            }
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Granularity {
    FeatureElement,
    FeatureRow,
    MessageRow,
    MessageElement,
}

impl Granularity {
    fn per_row(self) -> bool {
        matches!(self, Granularity::FeatureRow | Granularity::MessageRow)
    }
}

/// Bernoulli keep-mask.
#[derive(Clone, Debug, PartialEq)]
pub struct DropMask {
    pub keep_prob: f64,
    pub granularity: Granularity,
    /// 0/1 entries, same shape as the masked matrix.
    pub mask: Matrix,
}

fn check_keep_prob(keep_prob: f64) -> Result<()> {
    if !(keep_prob > 0.0 && keep_prob <= 1.0) {
        return Err(Error::Config(format!(
            "keep probability must be in (0, 1], got {keep_prob}"
        )));
    }
    Ok(())
}

impl DropMask {
    pub fn sample(
        rows: usize,
        cols: usize,
        granularity: Granularity,
        keep_prob: f64,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        check_keep_prob(keep_prob)?;
        let mut mask = Matrix::zeros(rows, cols);
        if granularity.per_row() {
            let keep: Vec<bool> = (0..rows).map(|_| rng.random::<f64>() < keep_prob).collect();
            return Self::from_row_keep(&keep, cols, granularity, keep_prob);
        }
        for v in mask.data_mut() {
            *v = if rng.random::<f64>() < keep_prob { 1.0 } else { 0.0 };
        }
        Ok(Self {
            keep_prob,
            granularity,
            mask,
        })
    }

    /// Row mask of width `cols` from per-row keep decisions.
    pub fn from_row_keep(keep: &[bool], cols: usize, granularity: Granularity, keep_prob: f64) -> Result<Self> {
        check_keep_prob(keep_prob)?;
        let mut mask = Matrix::zeros(keep.len(), cols);
        for (r, &k) in keep.iter().enumerate() {
            if k {
                mask.row_mut(r).iter_mut().for_each(|v| *v = 1.0);
            }
        }
        Ok(Self {
            keep_prob,
            granularity,
            mask,
        })
    }

    /// `mask / keep_prob`, the multiplier applied during training.
    pub fn multiplier(&self) -> Matrix {
        let s = 1.0 / self.keep_prob;
        self.mask.map(|m| m * s)
    }

    pub fn kept(&self) -> usize {
        self.mask.data().iter().filter(|&&m| m != 0.0).count()
    }
}

/// Kept entries scaled by `1/keep_prob`, dropped entries zeroed.
pub fn apply_drop(matrix: &Matrix, mask: &DropMask) -> Result<Matrix> {
    check_keep_prob(mask.keep_prob)?;
    if matrix.shape() != mask.mask.shape() {
        return Err(Error::State(format!(
            "mask is {:?} but matrix is {:?}",
            mask.mask.shape(),
            matrix.shape()
        )));
    }
    let s = 1.0 / mask.keep_prob;
    let data = matrix
        .data()
        .iter()
        .zip(mask.mask.data())
        .map(|(&x, &m)| if m != 0.0 { x * s } else { 0.0 })
        .collect();
    Ok(Matrix::from_vec(matrix.rows(), matrix.cols(), data)?)
}

/// Streaming mean/variance (Welford).
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunningStats {
    pub count: u64,
    mean: f64,
    m2: f64,
}

impl RunningStats {
    pub fn push(&mut self, x: f64) {
        self.count += 1;
        let d = x - self.mean;
        self.mean += d / self.count as f64;
        self.m2 += d * (x - self.mean);
    }

    pub fn extend(&mut self, xs: impl IntoIterator<Item = f64>) {
        for x in xs {
            self.push(x);
        }
    }

    pub fn mean(&self) -> f64 {
        self.mean
    }

    /// Unbiased sample variance; 0 for fewer than two samples.
    pub fn variance(&self) -> f64 {
        if self.count < 2 {
            0.0
        } else {
            self.m2 / (self.count - 1) as f64
        }
    }
}

/// Shapes a regularizer needs to build masks and perturbations.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct HookShapes {
    pub features: (usize, usize),
    /// `(k, width)` per layer.
    pub messages: Vec<(usize, usize)>,
    pub relations: usize,
}

impl HookShapes {
    pub fn of(model: &Model, index: &GraphIndex, features: &Matrix) -> Self {
        Self {
            features: features.shape(),
            messages: model
                .layer_widths()
                .into_iter()
                .map(|w| (index.num_messages(), w))
                .collect(),
            relations: index.relation_count,
        }
    }
}

/// Trained perturbations for the feature matrix, each layer's messages and
/// the per-relation message weights.
#[derive(Clone, Debug)]
pub struct PerturbationState {
    pub delta: Option<Matrix>,
    pub gamma: Vec<Matrix>,
    /// Per-relation offsets; relation `r` messages are scaled by `1 + rho_r`.
    pub relation: Option<Matrix>,
    pub alpha: f64,
    pub beta: f64,
    pub edge_eps: f64,
    pub steps: usize,
    /// Ascent steps taken since the last re-initialization.
    pub t: usize,
    pub norm: AscentNorm,
    method: Method,
    delta_rng: ChaCha8Rng,
    gamma_rng: ChaCha8Rng,
    relation_rng: ChaCha8Rng,
}

impl PerturbationState {
    pub fn new(cfg: &GradRegConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            delta: None,
            gamma: Vec::new(),
            relation: None,
            alpha: cfg.alpha,
            beta: cfg.beta,
            edge_eps: cfg.edge_eps,
            steps: cfg.steps,
            t: 0,
            norm: cfg.ascent,
            method: cfg.method,
            // independent streams so that turning one side off leaves the
            // other side's draws unchanged
            delta_rng: ChaCha8Rng::seed_from_u64(seed ^ 0xde17a),
            gamma_rng: ChaCha8Rng::seed_from_u64(seed ^ 0x6a33a),
            relation_rng: ChaCha8Rng::seed_from_u64(seed ^ 0x7e1a7),
        })
    }

    /// Fresh uniform draws for every side the method perturbs.
    pub fn reinit(&mut self, shapes: &HookShapes) -> Result<()> {
        self.t = 0;
        self.delta = if self.method.perturbs_features() {
            let (r, c) = shapes.features;
            Some(init_perturbation(r, c, self.beta, &mut self.delta_rng)?)
        } else {
            None
        };
        self.gamma = if self.method.perturbs_messages() {
            shapes
                .messages
                .iter()
                .map(|&(r, c)| init_perturbation(r, c, self.alpha, &mut self.gamma_rng))
                .collect::<Result<_>>()?
        } else {
            Vec::new()
        };
        self.relation = if self.method.perturbs_relations() {
            Some(init_perturbation(
                shapes.relations,
                1,
                self.edge_eps,
                &mut self.relation_rng,
            )?)
        } else {
            None
        };
        Ok(())
    }

    /// Ascends every active perturbation using the gradients on `tape`.
    fn ascend_from(&mut self, tape: &Tape, hooks: &RegHooks, recorder: Option<&mut Recorder>) -> Result<()> {
        let mut rec = recorder;
        if let (Some(delta), Some(var)) = (&self.delta, hooks.feature_var) {
            let grad = grad_or_zeros(tape, var);
            let next = ascend(delta, &grad, self.beta, self.norm)?;
            if let Some(r) = rec.as_deref_mut() {
                r.record_increment(Side::Features, delta, &next);
            }
            self.delta = Some(next);
        }
        for (l, gamma) in self.gamma.iter_mut().enumerate() {
            let Some(Some(var)) = hooks.message_vars.get(l) else {
                continue;
            };
            let grad = grad_or_zeros(tape, *var);
            let next = ascend(gamma, &grad, self.alpha, self.norm)?;
            if let Some(r) = rec.as_deref_mut() {
                r.record_increment(Side::Messages, gamma, &next);
            }
            *gamma = next;
        }
        if let (Some(rho), Some(var)) = (&self.relation, hooks.relation_var) {
            let grad = grad_or_zeros(tape, var);
            self.relation = Some(ascend(rho, &grad, self.edge_eps, self.norm)?);
        }
        self.t += 1;
        Ok(())
    }

    /// Largest absolute entry of `delta` and of all `gamma`s.
    pub fn max_abs(&self) -> (f64, f64) {
        let m = |x: &Matrix| x.data().iter().fold(0.0f64, |a, v| a.max(v.abs()));
        (
            self.delta.as_ref().map_or(0.0, m),
            self.gamma.iter().map(m).fold(0.0, f64::max),
        )
    }
}

fn grad_or_zeros(tape: &Tape, v: Var) -> Matrix {
    tape.grad(v).cloned().unwrap_or_else(|| {
        let (r, c) = tape.shape(v);
        Matrix::zeros(r, c)
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Side {
    Features,
    Messages,
}

/// Optional per-run recording used by the variance and diversity probes.
#[derive(Clone, Debug, Default)]
pub struct Recorder {
    /// Layer-0 effective message matrix of the first pass of each epoch.
    pub messages: Vec<Matrix>,
    /// Layer-0 message mask of each epoch (drop methods only).
    pub masks: Vec<Matrix>,
    pub delta: RunningStats,
    pub gamma: RunningStats,
    pub total: RunningStats,
}

impl Recorder {
    fn record_increment(&mut self, side: Side, before: &Matrix, after: &Matrix) {
        for (a, b) in after.data().iter().zip(before.data()) {
            let inc = a - b;
            match side {
                Side::Features => self.delta.push(inc),
                Side::Messages => self.gamma.push(inc),
            }
            self.total.push(inc);
        }
    }
}

enum Edit {
    Add(Matrix),
    Scale(Matrix),
}

/// Forward hooks realizing one regularizer for one pass.
pub struct RegHooks {
    features: Option<Edit>,
    messages: Vec<Option<Edit>>,
    relation: Option<Matrix>,
    record: bool,
    /// Perturbation leaves created during the forward pass.
    pub feature_var: Option<Var>,
    pub message_vars: Vec<Option<Var>>,
    pub relation_var: Option<Var>,
    /// Effective message matrices per layer, when recording.
    pub recorded: Vec<Matrix>,
}

impl RegHooks {
    pub fn identity() -> Self {
        Self {
            features: None,
            messages: Vec::new(),
            relation: None,
            record: false,
            feature_var: None,
            message_vars: Vec::new(),
            relation_var: None,
            recorded: Vec::new(),
        }
    }

    pub fn recording(mut self, on: bool) -> Self {
        self.record = on;
        self
    }

    pub fn is_identity(&self) -> bool {
        self.features.is_none() && self.messages.iter().all(Option::is_none) && self.relation.is_none()
    }

    /// Hooks that add the state's current perturbations.
    pub fn from_state(state: &PerturbationState) -> Self {
        let mut h = Self::identity();
        h.features = state.delta.clone().map(Edit::Add);
        h.messages = state.gamma.iter().cloned().map(|g| Some(Edit::Add(g))).collect();
        h.relation = state.relation.clone();
        h
    }
}

impl ForwardHooks for RegHooks {
    fn on_features(&mut self, tape: &mut Tape, features: Var) -> std::result::Result<Var, ModelError> {
        match &self.features {
            None => Ok(features),
            Some(Edit::Add(delta)) => {
                let d = tape.leaf(delta.clone(), true);
                self.feature_var = Some(d);
                Ok(tape.add(features, d)?)
            }
            Some(Edit::Scale(mask)) => {
                let m = tape.constant(mask.clone());
                Ok(tape.mul(features, m)?)
            }
        }
    }

    fn on_messages(
        &mut self,
        tape: &mut Tape,
        messages: Var,
        layer: usize,
        index: &GraphIndex,
    ) -> std::result::Result<Var, ModelError> {
        let mut m = messages;
        if let Some(rho) = &self.relation {
            let rv = match self.relation_var {
                Some(v) => v,
                None => {
                    let v = tape.leaf(rho.clone(), true);
                    self.relation_var = Some(v);
                    v
                }
            };
            let ones = tape.constant(Matrix::filled(rho.rows(), 1, 1.0));
            let w = tape.add(ones, rv)?;
            let per_edge = tape.gather_rows(w, &index.rel)?;
            m = tape.mul(m, per_edge)?;
        }
        if self.message_vars.len() <= layer {
            self.message_vars.resize(layer + 1, None);
        }
        match self.messages.get(layer).and_then(Option::as_ref) {
            None => {}
            Some(Edit::Add(gamma)) => {
                if gamma.shape() != tape.shape(m) {
                    return Err(ModelError::Hook(format!(
                        "gamma for layer {layer} is {:?} but messages are {:?}; state must be re-initialized",
                        gamma.shape(),
                        tape.shape(m)
                    )));
                }
                let g = tape.leaf(gamma.clone(), true);
                self.message_vars[layer] = Some(g);
                m = tape.add(m, g)?;
            }
            Some(Edit::Scale(mask)) => {
                if mask.shape() != tape.shape(m) {
                    return Err(ModelError::Hook(format!(
                        "message mask for layer {layer} is {:?} but messages are {:?}",
                        mask.shape(),
                        tape.shape(m)
                    )));
                }
                let c = tape.constant(mask.clone());
                m = tape.mul(m, c)?;
            }
        }
        if self.record {
            self.recorded.push(tape.value(m).clone());
        }
        Ok(m)
    }
}

/// Per-epoch outcome.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochStats {
    /// Mean of the inner-pass losses.
    pub loss: f64,
    pub inner_losses: Vec<f64>,
    /// Norms of the accumulated parameter gradient.
    pub grad_l1: f64,
    pub grad_l2: f64,
}

fn collect_param_grads(tape: &Tape, params: &[Var]) -> Vec<Matrix> {
    params.iter().map(|&v| grad_or_zeros(tape, v)).collect()
}

fn grad_norms(grads: &[Matrix]) -> (f64, f64) {
    let (l1, sq) = grads.iter().fold((0.0, 0.0), |(a, b), g| {
        let (l1, l2) = norms(g);
        (a + l1, b + l2 * l2)
    });
    (l1, sq.sqrt())
}

/// One pass, one optimizer step (clean and drop methods).
fn single_pass_epoch(
    model: &mut Model,
    index: &GraphIndex,
    features: &Matrix,
    objective: &Objective,
    hooks: &mut dyn ForwardHooks,
    optimizer: Option<&mut Adam>,
) -> Result<EpochStats> {
    let mut tape = Tape::new();
    let f = tape.constant(features.clone());
    let fwd = model.forward(&mut tape, f, index, hooks, true)?;
    let loss = objective.loss(&mut tape, fwd.output)?;
    tape.backward(loss)?;
    let value = tape.value(loss).data()[0];
    let grads = collect_param_grads(&tape, &fwd.params);
    let (grad_l1, grad_l2) = grad_norms(&grads);
    if let Some(opt) = optimizer {
        opt.step(model.params_mut(), &grads)?;
    }
    Ok(EpochStats {
        loss: value,
        inner_losses: vec![value],
        grad_l1,
        grad_l2,
    })
}

/// One Grug-family epoch: re-draw the perturbations, run `N` passes that
/// accumulate `1/N`-scaled parameter gradients and ascend the perturbations
/// between passes, then take one optimizer step. Passing no optimizer
/// freezes the parameters.
pub fn grug_epoch(
    model: &mut Model,
    index: &GraphIndex,
    features: &Matrix,
    objective: &Objective,
    state: &mut PerturbationState,
    mut recorder: Option<&mut Recorder>,
    optimizer: Option<&mut Adam>,
) -> Result<EpochStats> {
    state.reinit(&HookShapes::of(model, index, features))?;
    let n = state.steps;
    let scale = 1.0 / n as f64;
    let mut accum: Vec<Matrix> = model
        .params()
        .iter()
        .map(|p| Matrix::zeros(p.rows(), p.cols()))
        .collect();
    let mut losses = Vec::with_capacity(n);
    for t in 0..n {
        let record = t == 0 && recorder.is_some();
        let mut hooks = RegHooks::from_state(state).recording(record);
        let mut tape = Tape::new();
        let f = tape.constant(features.clone());
        let fwd = model.forward(&mut tape, f, index, &mut hooks, true).map_err(|e| match e {
            ModelError::Hook(msg) => Error::State(msg),
            other => other.into(),
        })?;
        let loss = objective.loss(&mut tape, fwd.output)?;
        tape.backward(loss)?;
        losses.push(tape.value(loss).data()[0]);
        for (acc, &pv) in accum.iter_mut().zip(&fwd.params) {
            if let Some(g) = tape.grad(pv) {
                for (a, x) in acc.data_mut().iter_mut().zip(g.data()) {
                    *a += x * scale;
                }
            }
        }
        if record {
            if let (Some(r), Some(m0)) = (recorder.as_deref_mut(), hooks.recorded.first()) {
                r.messages.push(m0.clone());
            }
        }
        if t + 1 < n {
            state.ascend_from(&tape, &hooks, recorder.as_deref_mut())?;
        }
    }
    let (grad_l1, grad_l2) = grad_norms(&accum);
    if let Some(opt) = optimizer {
        opt.step(model.params_mut(), &accum)?;
    }
    Ok(EpochStats {
        loss: losses.iter().sum::<f64>() / n as f64,
        inner_losses: losses,
        grad_l1,
        grad_l2,
    })
}

/// A configured regularizer with its random streams and state.
pub struct Regularizer {
    cfg: GradRegConfig,
    state: PerturbationState,
    drop_rng: ChaCha8Rng,
    recorder: Option<Recorder>,
}

impl Regularizer {
    pub fn new(cfg: GradRegConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let state = PerturbationState::new(&cfg, seed)?;
        Ok(Self {
            cfg,
            state,
            drop_rng: ChaCha8Rng::seed_from_u64(seed ^ 0xd209),
            recorder: None,
        })
    }

    pub fn config(&self) -> &GradRegConfig {
        &self.cfg
    }

    pub fn state(&self) -> &PerturbationState {
        &self.state
    }

    pub fn enable_recording(&mut self) {
        self.recorder = Some(Recorder::default());
    }

    pub fn recorder(&self) -> Option<&Recorder> {
        self.recorder.as_ref()
    }

    pub fn take_recorder(&mut self) -> Option<Recorder> {
        self.recorder.take()
    }

    /// Training-mode hooks for the configured method. Drop methods draw a
    /// fresh mask on every call; perturbation methods use the current state.
    pub fn make_hooks(&mut self, shapes: &HookShapes) -> Result<RegHooks> {
        let mu = self.cfg.keep_prob();
        let mut h = RegHooks::identity();
        match self.cfg.method {
            Method::Clean => {}
            Method::Dropout | Method::DropNode => {
                let gran = if self.cfg.method == Method::Dropout {
                    Granularity::FeatureElement
                } else {
                    Granularity::FeatureRow
                };
                let (r, c) = shapes.features;
                let mask = DropMask::sample(r, c, gran, mu, &mut self.drop_rng)?;
                h.features = Some(Edit::Scale(mask.multiplier()));
            }
            Method::DropEdge => {
                let k = shapes.messages.first().map_or(0, |s| s.0);
                let keep: Vec<bool> = (0..k).map(|_| self.drop_rng.random::<f64>() < mu).collect();
                h.messages = shapes
                    .messages
                    .iter()
                    .map(|&(_, w)| {
                        DropMask::from_row_keep(&keep, w, Granularity::MessageRow, mu)
                            .map(|m| Some(Edit::Scale(m.multiplier())))
                    })
                    .collect::<Result<_>>()?;
            }
            Method::DropMessage => {
                h.messages = shapes
                    .messages
                    .iter()
                    .map(|&(k, w)| {
                        DropMask::sample(k, w, Granularity::MessageElement, mu, &mut self.drop_rng)
                            .map(|m| Some(Edit::Scale(m.multiplier())))
                    })
                    .collect::<Result<_>>()?;
            }
            _ => h = RegHooks::from_state(&self.state),
        }
        Ok(h)
    }

    /// One training epoch under the configured method. `None` for the
    /// optimizer runs the protocol with frozen parameters.
    pub fn epoch(
        &mut self,
        model: &mut Model,
        index: &GraphIndex,
        features: &Matrix,
        objective: &Objective,
        optimizer: Option<&mut Adam>,
    ) -> Result<EpochStats> {
        if self.cfg.method.is_perturbation() {
            return grug_epoch(
                model,
                index,
                features,
                objective,
                &mut self.state,
                self.recorder.as_mut(),
                optimizer,
            );
        }
        if self.cfg.method == Method::Clean {
            let mut hooks = RegHooks::identity().recording(self.recorder.is_some());
            let stats = single_pass_epoch(model, index, features, objective, &mut hooks, optimizer)?;
            self.record_pass(&hooks, None);
            return Ok(stats);
        }
        let shapes = HookShapes::of(model, index, features);
        let mut hooks = self.make_hooks(&shapes)?.recording(self.recorder.is_some());
        let mask0 = match hooks.messages.first() {
            Some(Some(Edit::Scale(m))) => Some(m.clone()),
            _ => None,
        };
        let stats = single_pass_epoch(model, index, features, objective, &mut hooks, optimizer)?;
        self.record_pass(&hooks, mask0);
        Ok(stats)
    }

    fn record_pass(&mut self, hooks: &RegHooks, mask: Option<Matrix>) {
        if let Some(r) = self.recorder.as_mut() {
            if let Some(m0) = hooks.recorded.first() {
                r.messages.push(m0.clone());
            }
            if let Some(m) = mask {
                r.masks.push(m);
            }
        }
    }
}

/// Evaluation forward: regularizers never act outside training.
pub fn eval_hooks() -> NoHooks {
    NoHooks
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn method_names_round_trip() {
        for m in Method::ALL {
            assert_eq!(m.name().parse::<Method>().unwrap(), m);
        }
        assert_eq!("grug_t".parse::<Method>().unwrap(), Method::GrugT);
        assert!("droput".parse::<Method>().is_err());
    }

    #[test]
    fn init_radius_zero_and_bounds() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(init_perturbation(3, 4, 0.0, &mut rng).unwrap(), Matrix::zeros(3, 4));
        let m = init_perturbation(50, 50, 0.35, &mut rng).unwrap();
        assert!(m.data().iter().all(|v| v.abs() <= 0.35));
        assert!(matches!(init_perturbation(1, 1, -0.1, &mut rng), Err(Error::Config(_))));
    }

    #[test]
    fn ascend_examples() {
        let z = Matrix::zeros(1, 2);
        let g = Matrix::from_rows(&[[3.0, 4.0]]);
        let out = ascend(&z, &g, 1.0, AscentNorm::L2).unwrap();
        assert!((out.get(0, 0) - 0.6).abs() < 1e-15);
        assert!((out.get(0, 1) - 0.8).abs() < 1e-15);
        let p = Matrix::from_rows(&[[0.1, -0.2]]);
        assert_eq!(ascend(&p, &z, 1.0, AscentNorm::L2).unwrap(), p);
        let twice = ascend(&out, &g, 1.0, AscentNorm::L2).unwrap();
        assert!((twice.frobenius() - 2.0).abs() < 1e-15);
        assert!(matches!(
            ascend(&z, &Matrix::zeros(2, 1), 1.0, AscentNorm::L2),
            Err(Error::State(_))
        ));
        let s = ascend(&z, &Matrix::from_rows(&[[-3.0, 0.0]]), 0.5, AscentNorm::Sign).unwrap();
        assert_eq!(s.data(), &[-0.5, 0.0]);
    }

    #[test]
    fn drop_mask_contracts() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Matrix::from_rows(&[[1.0, -2.0], [3.0, 4.0]]);
        let full = DropMask::sample(2, 2, Granularity::FeatureElement, 1.0, &mut rng).unwrap();
        assert_eq!(apply_drop(&x, &full).unwrap(), x);
        assert!(DropMask::sample(2, 2, Granularity::FeatureElement, 0.0, &mut rng).is_err());
        let rows = DropMask::sample(40, 5, Granularity::MessageRow, 0.5, &mut rng).unwrap();
        for r in 0..40 {
            let row = rows.mask.row(r);
            assert!(row.iter().all(|&v| v == row[0]));
        }
    }

    #[test]
    fn config_validation() {
        assert!(GradRegConfig::default().validate().is_ok());
        let bad = GradRegConfig {
            alpha: -0.1,
            ..GradRegConfig::default()
        };
        assert!(matches!(bad.validate(), Err(Error::Config(m)) if m.contains("alpha")));
        let bad = GradRegConfig {
            drop_rate: 1.0,
            ..GradRegConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = GradRegConfig {
            steps: 0,
            ..GradRegConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn running_stats_matches_two_pass() {
        let xs = [1.0, 4.0, -2.0, 0.5, 3.0];
        let mut s = RunningStats::default();
        s.extend(xs);
        let mean = xs.iter().sum::<f64>() / 5.0;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / 4.0;
        assert!((s.mean() - mean).abs() < 1e-15);
        assert!((s.variance() - var).abs() < 1e-14);
    }

    #[test]
    fn clean_hooks_are_identity() {
        let mut reg = Regularizer::new(GradRegConfig::new(Method::Clean), 0).unwrap();
        let shapes = HookShapes {
            features: (3, 2),
            messages: vec![(4, 2)],
            relations: 1,
        };
        assert!(reg.make_hooks(&shapes).unwrap().is_identity());
    }
}
