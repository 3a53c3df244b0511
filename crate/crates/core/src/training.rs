//! Optimizer, task objectives, the epoch loop and evaluation metrics.

use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{pair_logits, Backbone, GraphIndex, Model};
use crate::graph::{self, GraphError, HeteroGraph, LabelSplit, SplitSpec};
use crate::regularizers::{GradRegConfig, Regularizer};
use crate::tensor::{Matrix, Tape, Var};
use crate::{Error, Result};

/// Bias-corrected Adam.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    first: Vec<Matrix>,
    second: Vec<Matrix>,
}

impl Adam {
    pub fn new(params: &[&Matrix], lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            first: params.iter().map(|p| Matrix::zeros(p.rows(), p.cols())).collect(),
            second: params.iter().map(|p| Matrix::zeros(p.rows(), p.cols())).collect(),
        }
    }

    pub fn for_model(model: &Model, lr: f64) -> Self {
        Self::new(&model.params(), lr)
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One update. A non-finite gradient aborts before any parameter moves.
    pub fn step(&mut self, mut params: Vec<&mut Matrix>, grads: &[Matrix]) -> Result<()> {
        if params.len() != grads.len() || params.len() != self.first.len() {
            return Err(Error::State(format!(
                "adam tracks {} parameters, got {} params and {} grads",
                self.first.len(),
                params.len(),
                grads.len()
            )));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.shape() != g.shape() || p.shape() != self.first[i].shape() {
                return Err(Error::State(format!(
                    "parameter {i} is {:?} but its gradient is {:?}",
                    p.shape(),
                    g.shape()
                )));
            }
            if let Some(pos) = g.data().iter().position(|x| !x.is_finite()) {
                return Err(Error::Numeric(format!(
                    "non-finite gradient for parameter {i} at flat index {pos} (step {})",
                    self.step + 1
                )));
            }
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (i, p) in params.iter_mut().enumerate() {
            let g = grads[i].data();
            let m = self.first[i].data_mut();
            let v = self.second[i].data_mut();
            for (j, x) in p.data_mut().iter_mut().enumerate() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g[j];
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g[j] * g[j];
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                *x -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// Loss attached to a model output.
#[derive(Clone, Debug, PartialEq)]
pub enum Objective {
    /// Masked mean cross-entropy over node logits.
    NodeClassification { labels: Vec<usize>, mask: Vec<bool> },
    /// Mean binary cross-entropy of `emb_u · emb_v` logits.
    LinkPrediction {
        pairs: Vec<(usize, usize)>,
        targets: Vec<f64>,
    },
    /// `sum(output ⊙ weights)`; linear in the output.
    Linear { weights: Matrix },
}

impl Objective {
    pub fn loss(&self, tape: &mut Tape, output: Var) -> Result<Var> {
        match self {
            Objective::NodeClassification { labels, mask } => {
                Ok(tape.softmax_cross_entropy(output, labels, Some(mask))?)
            }
            Objective::LinkPrediction { pairs, targets } => {
                let logits = pair_logits(tape, output, pairs)?;
                Ok(tape.bce_with_logits(logits, targets)?)
            }
            Objective::Linear { weights } => {
                let w = tape.constant(weights.clone());
                let prod = tape.mul(output, w)?;
                Ok(tape.sum_all(prod)?)
            }
        }
    }

    /// Loss of a fixed output matrix.
    pub fn evaluate(&self, output: &Matrix) -> Result<f64> {
        let mut tape = Tape::new();
        let out = tape.constant(output.clone());
        let loss = self.loss(&mut tape, out)?;
        Ok(tape.value(loss).data()[0])
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    #[default]
    NodeClassification,
    LinkPrediction,
}

impl std::str::FromStr for Task {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "node_classification" => Ok(Self::NodeClassification),
            "link_prediction" => Ok(Self::LinkPrediction),
            other => Err(format!(
                "unknown task {other:?} (expected node_classification or link_prediction)"
            )),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub seed: u64,
    pub task: Task,
    pub backbone: Backbone,
    pub layers: usize,
    pub hidden_dim: usize,
    pub regularizer: GradRegConfig,
    pub eval_every: usize,
    /// Report the best-validation checkpoint instead of the final model.
    pub best_valid: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            lr: 0.001,
            seed: 0,
            task: Task::NodeClassification,
            backbone: Backbone::Rgcn,
            layers: 1,
            hidden_dim: 64,
            regularizer: GradRegConfig::default(),
            eval_every: 5,
            best_valid: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.layers == 0 {
            return Err(Error::Config("layers must be at least 1".into()));
        }
        if self.eval_every == 0 {
            return Err(Error::Config("eval_every must be at least 1".into()));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if self.hidden_dim == 0 {
            return Err(Error::Config("hidden_dim must be at least 1".into()));
        }
        self.regularizer.validate()
    }
}

/// Task-specific metrics; the fields present match the task.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub micro_f1: Option<f64>,
    pub macro_f1: Option<f64>,
    pub auc_roc: Option<f64>,
    pub loss: f64,
}

impl Metrics {
    /// Headline number: Micro-F1 for nodes, AUC for links.
    pub fn primary(&self) -> f64 {
        self.micro_f1.or(self.auc_roc).unwrap_or(f64::NAN)
    }
}

/// One row of the per-epoch trace.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub epoch: usize,
    pub train_loss: f64,
    pub valid_loss: Option<f64>,
    pub valid_metric: Option<f64>,
    pub grad_l1: f64,
    pub grad_l2: f64,
}

fn unordered(u: usize, v: usize) -> (usize, usize) {
    (u.min(v), u.max(v))
}

/// Samples `n` distinct node pairs `u != v` that are neither in `positives`
/// nor edges of `g` (both treated as unordered).
pub fn negative_sample(
    g: &HeteroGraph,
    positives: &[(usize, usize)],
    n: usize,
    seed: u64,
) -> Result<Vec<(usize, usize)>> {
    let mut exclude: HashSet<(usize, usize)> = g.edges().iter().map(|e| unordered(e.src, e.dst)).collect();
    exclude.extend(positives.iter().map(|&(u, v)| unordered(u, v)));
    sample_excluding(g.num_nodes(), &exclude, n, seed)
}

fn sample_excluding(
    p: usize,
    exclude: &HashSet<(usize, usize)>,
    n: usize,
    seed: u64,
) -> Result<Vec<(usize, usize)>> {
    if n == 0 {
        return Ok(Vec::new());
    }
    if p < 2 {
        return Err(GraphError::Sampling("negative sampling needs at least two nodes".into()).into());
    }
    let total = p * (p - 1) / 2;
    let blocked = exclude.iter().filter(|(u, v)| u != v).count();
    let available = total - blocked.min(total);
    if n > available {
        return Err(GraphError::Sampling(format!(
            "requested {n} negatives but only {available} non-edges exist"
        ))
        .into());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    if n * 2 > available {
        let mut all: Vec<(usize, usize)> = (0..p)
            .flat_map(|u| (u + 1..p).map(move |v| (u, v)))
            .filter(|pair| !exclude.contains(pair))
            .collect();
        all.shuffle(&mut rng);
        all.truncate(n);
        return Ok(all);
    }
    let mut seen = HashSet::with_capacity(n);
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let u = rng.random_range(0..p);
        let v = rng.random_range(0..p);
        if u == v {
            continue;
        }
        let key = unordered(u, v);
        if exclude.contains(&key) || !seen.insert(key) {
            continue;
        }
        out.push((u, v));
    }
    Ok(out)
}

/// Prepared node-classification data.
#[derive(Clone, Debug)]
pub struct NodeTask {
    pub graph: HeteroGraph,
    pub index: GraphIndex,
    pub features: Matrix,
    /// One class per node; unlabeled nodes hold 0 and are always masked.
    pub labels: Vec<usize>,
    pub split: LabelSplit,
    pub num_classes: usize,
}

/// Prepared link-prediction data.
#[derive(Clone, Debug)]
pub struct LinkTask {
    pub graph: HeteroGraph,
    pub train_graph: HeteroGraph,
    pub index: GraphIndex,
    pub features: Matrix,
    pub train_pos: Vec<(usize, usize)>,
    pub valid_pairs: Vec<(usize, usize)>,
    pub valid_targets: Vec<f64>,
    pub test_pairs: Vec<(usize, usize)>,
    pub test_targets: Vec<f64>,
    exclude: HashSet<(usize, usize)>,
}

#[derive(Clone, Debug)]
pub enum TaskData {
    Node(NodeTask),
    Link(LinkTask),
}

fn mask_of(p: usize, nodes: &[usize]) -> Vec<bool> {
    let mut m = vec![false; p];
    for &n in nodes {
        m[n] = true;
    }
    m
}

impl TaskData {
    /// Node classification with a stratified label split.
    pub fn node(g: &HeteroGraph, spec: &SplitSpec, feature_seed: u64) -> Result<Self> {
        let split = graph::split_labels(g, spec)?;
        let mut labels = vec![0; g.num_nodes()];
        for &(n, c) in g.labels() {
            labels[n] = c;
        }
        Ok(TaskData::Node(NodeTask {
            graph: g.clone(),
            index: GraphIndex::new(g),
            features: g.feature_matrix(feature_seed),
            labels,
            split,
            num_classes: g.num_classes(),
        }))
    }

    /// Link prediction with a relation-stratified edge split and 1:1
    /// negatives for validation and test drawn once from the split seed.
    pub fn link(g: &HeteroGraph, spec: &SplitSpec, feature_seed: u64) -> Result<Self> {
        let split = graph::split_edges(g, spec)?;
        let pairs = |links: &[graph::Link]| links.iter().map(|l| (l.src, l.dst)).collect::<Vec<_>>();
        let train_pos = pairs(&split.train);
        let valid_pos = pairs(&split.valid);
        let test_pos = pairs(&split.test);
        let exclude: HashSet<(usize, usize)> = g.edges().iter().map(|e| unordered(e.src, e.dst)).collect();
        let negatives = sample_excluding(
            g.num_nodes(),
            &exclude,
            valid_pos.len() + test_pos.len(),
            spec.seed ^ 0x6e65_6761,
        )?;
        let (valid_neg, test_neg) = negatives.split_at(valid_pos.len());
        let labeled = |pos: &[(usize, usize)], neg: &[(usize, usize)]| {
            let mut p = pos.to_vec();
            p.extend_from_slice(neg);
            let mut t = vec![1.0; pos.len()];
            t.extend(std::iter::repeat_n(0.0, neg.len()));
            (p, t)
        };
        let (valid_pairs, valid_targets) = labeled(&valid_pos, valid_neg);
        let (test_pairs, test_targets) = labeled(&test_pos, test_neg);
        Ok(TaskData::Link(LinkTask {
            graph: g.clone(),
            index: GraphIndex::new(&split.train_graph),
            train_graph: split.train_graph,
            features: g.feature_matrix(feature_seed),
            train_pos,
            valid_pairs,
            valid_targets,
            test_pairs,
            test_targets,
            exclude,
        }))
    }

    pub fn prepare(g: &HeteroGraph, task: Task, split_seed: u64) -> Result<Self> {
        match task {
            Task::NodeClassification => Self::node(g, &SplitSpec::nodes(split_seed), split_seed),
            Task::LinkPrediction => Self::link(g, &SplitSpec::edges(split_seed), split_seed),
        }
    }

    pub fn task(&self) -> Task {
        match self {
            TaskData::Node(_) => Task::NodeClassification,
            TaskData::Link(_) => Task::LinkPrediction,
        }
    }

    pub fn index(&self) -> &GraphIndex {
        match self {
            TaskData::Node(t) => &t.index,
            TaskData::Link(t) => &t.index,
        }
    }

    pub fn features(&self) -> &Matrix {
        match self {
            TaskData::Node(t) => &t.features,
            TaskData::Link(t) => &t.features,
        }
    }

    /// The graph messages flow over during training.
    pub fn message_graph(&self) -> &HeteroGraph {
        match self {
            TaskData::Node(t) => &t.graph,
            TaskData::Link(t) => &t.train_graph,
        }
    }

    /// Same labels, features and evaluation pairs over a different
    /// message-passing graph (used by the edge-addition attack).
    pub fn with_message_graph(&self, g: HeteroGraph) -> Self {
        match self {
            TaskData::Node(t) => TaskData::Node(NodeTask {
                index: GraphIndex::new(&g),
                graph: g,
                ..t.clone()
            }),
            TaskData::Link(t) => TaskData::Link(LinkTask {
                index: GraphIndex::new(&g),
                train_graph: g,
                ..t.clone()
            }),
        }
    }

    pub fn output_dim(&self, hidden_dim: usize) -> usize {
        match self {
            TaskData::Node(t) => t.num_classes,
            TaskData::Link(_) => hidden_dim,
        }
    }

    pub fn build_model(&self, cfg: &TrainConfig) -> Model {
        Model::new(
            cfg.backbone,
            self.features().cols(),
            cfg.hidden_dim,
            self.output_dim(cfg.hidden_dim),
            cfg.layers,
            self.message_graph().relation_count(),
            cfg.seed,
        )
    }

    /// Training objective for one epoch. Link prediction draws fresh 1:1
    /// negatives from `(seed, epoch)`.
    pub fn train_objective(&self, epoch: usize, seed: u64) -> Result<Objective> {
        match self {
            TaskData::Node(t) => Ok(Objective::NodeClassification {
                labels: t.labels.clone(),
                mask: mask_of(t.labels.len(), &t.split.train),
            }),
            TaskData::Link(t) => {
                let negs = sample_excluding(
                    t.graph.num_nodes(),
                    &t.exclude,
                    t.train_pos.len(),
                    seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ epoch as u64,
                )?;
                let mut pairs = t.train_pos.clone();
                pairs.extend_from_slice(&negs);
                let mut targets = vec![1.0; t.train_pos.len()];
                targets.extend(std::iter::repeat_n(0.0, negs.len()));
                Ok(Objective::LinkPrediction { pairs, targets })
            }
        }
    }

    fn eval_objective(&self, which: EvalSplit) -> Objective {
        match self {
            TaskData::Node(t) => {
                let nodes = match which {
                    EvalSplit::Train => &t.split.train,
                    EvalSplit::Valid => &t.split.valid,
                    EvalSplit::Test => &t.split.test,
                };
                Objective::NodeClassification {
                    labels: t.labels.clone(),
                    mask: mask_of(t.labels.len(), nodes),
                }
            }
            TaskData::Link(t) => {
                let (pairs, targets) = match which {
                    EvalSplit::Valid => (&t.valid_pairs, &t.valid_targets),
                    EvalSplit::Test | EvalSplit::Train => (&t.test_pairs, &t.test_targets),
                };
                Objective::LinkPrediction {
                    pairs: pairs.clone(),
                    targets: targets.clone(),
                }
            }
        }
    }

    /// Evaluation-mode metrics (no regularizer hooks).
    pub fn evaluate(&self, model: &Model, which: EvalSplit) -> Result<Metrics> {
        let out = model.predict(self.features(), self.index())?;
        let loss = self.eval_objective(which).evaluate(&out)?;
        match self {
            TaskData::Node(t) => {
                let nodes = match which {
                    EvalSplit::Train => &t.split.train,
                    EvalSplit::Valid => &t.split.valid,
                    EvalSplit::Test => &t.split.test,
                };
                let pred_all = out.argmax_rows();
                let pred: Vec<usize> = nodes.iter().map(|&n| pred_all[n]).collect();
                let truth: Vec<usize> = nodes.iter().map(|&n| t.labels[n]).collect();
                let (micro, macro_) = f1_scores(&pred, &truth, t.num_classes)?;
                Ok(Metrics {
                    micro_f1: Some(micro),
                    macro_f1: Some(macro_),
                    auc_roc: None,
                    loss,
                })
            }
            TaskData::Link(t) => {
                let (pairs, targets) = match which {
                    EvalSplit::Valid => (&t.valid_pairs, &t.valid_targets),
                    EvalSplit::Test | EvalSplit::Train => (&t.test_pairs, &t.test_targets),
                };
                let scores = crate::backbone::link_logits(&out, pairs)?;
                let labels: Vec<bool> = targets.iter().map(|&y| y > 0.5).collect();
                Ok(Metrics {
                    micro_f1: None,
                    macro_f1: None,
                    auc_roc: Some(auc_roc(&scores, &labels)?),
                    loss,
                })
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EvalSplit {
    Train,
    Valid,
    Test,
}

/// Result of [`train`].
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: Model,
    pub trace: Vec<TraceRow>,
    pub test: Metrics,
    pub valid: Metrics,
}

/// Seed of the regularizer's random streams for a given run seed.
pub fn regularizer_seed(seed: u64) -> u64 {
    seed ^ 0x5_eed0_f9e9_u64
}

/// Runs `cfg.epochs` epochs of the configured regularizer and returns the
/// final model (or best-validation checkpoint) with its trace.
pub fn train(model: Model, data: &TaskData, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let mut reg = Regularizer::new(cfg.regularizer.clone(), regularizer_seed(cfg.seed))?;
    train_with(model, data, cfg, &mut reg)
}

/// [`train`] with a caller-owned regularizer, e.g. one with recording on.
pub fn train_with(mut model: Model, data: &TaskData, cfg: &TrainConfig, reg: &mut Regularizer) -> Result<TrainOutcome> {
    cfg.validate()?;
    let mut adam = Adam::for_model(&model, cfg.lr);
    let mut trace = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, Model)> = None;
    for epoch in 1..=cfg.epochs {
        let objective = data.train_objective(epoch, cfg.seed)?;
        let stats = reg.epoch(&mut model, data.index(), data.features(), &objective, Some(&mut adam))?;
        let (valid_loss, valid_metric) = if epoch % cfg.eval_every == 0 {
            let m = data.evaluate(&model, EvalSplit::Valid)?;
            if cfg.best_valid && best.as_ref().is_none_or(|(b, _)| m.primary() > *b) {
                best = Some((m.primary(), model.clone()));
            }
            (Some(m.loss), Some(m.primary()))
        } else {
            (None, None)
        };
        trace.push(TraceRow {
            epoch,
            train_loss: stats.loss,
            valid_loss,
            valid_metric,
            grad_l1: stats.grad_l1,
            grad_l2: stats.grad_l2,
        });
    }
    if let Some((_, m)) = best {
        model = m;
    }
    let valid = data.evaluate(&model, EvalSplit::Valid)?;
    let test = data.evaluate(&model, EvalSplit::Test)?;
    Ok(TrainOutcome {
        model,
        trace,
        test,
        valid,
    })
}

/// Micro and macro F1. A class absent from both predictions and truth
/// scores 0 in the macro average.
pub fn f1_scores(pred: &[usize], truth: &[usize], k: usize) -> Result<(f64, f64)> {
    if pred.is_empty() {
        return Err(Error::Metric("f1 of an empty prediction set".into()));
    }
    if pred.len() != truth.len() {
        return Err(Error::Metric(format!(
            "{} predictions for {} labels",
            pred.len(),
            truth.len()
        )));
    }
    let mut tp = vec![0usize; k];
    let mut fp = vec![0usize; k];
    let mut fn_ = vec![0usize; k];
    for (&p, &t) in pred.iter().zip(truth) {
        if p >= k || t >= k {
            return Err(Error::Metric(format!("class {} out of range for {k}", p.max(t))));
        }
        if p == t {
            tp[p] += 1;
        } else {
            fp[p] += 1;
            fn_[t] += 1;
        }
    }
    let f1 = |tp: usize, fp: usize, fn_: usize| {
        let denom = 2 * tp + fp + fn_;
        if denom == 0 {
            0.0
        } else {
            2.0 * tp as f64 / denom as f64
        }
    };
    let micro = f1(tp.iter().sum(), fp.iter().sum(), fn_.iter().sum());
    let macro_ = (0..k).map(|c| f1(tp[c], fp[c], fn_[c])).sum::<f64>() / k as f64;
    Ok((micro, macro_))
}

/// Rank-based (Mann-Whitney) AUC; tied scores share their average rank.
pub fn auc_roc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Metric(format!(
            "{} scores for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::Metric("auc needs both positive and negative labels".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // ranks are 1-based; the tie block i..=j shares their mean
        let avg_rank = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            if labels[idx] {
                rank_sum_pos += avg_rank;
            }
        }
        i = j + 1;
    }
    let u = rank_sum_pos - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos as f64 * n_neg as f64))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_zero_gradient_is_a_no_op() {
        let mut p = Matrix::from_rows(&[[1.5, -2.0]]);
        let before = p.clone();
        let mut adam = Adam::new(&[&p], 0.001);
        adam.step(vec![&mut p], &[Matrix::zeros(1, 2)]).unwrap();
        assert_eq!(p, before);
        assert_eq!(adam.steps(), 1);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut p = Matrix::scalar(0.0);
        let mut adam = Adam::new(&[&p], 0.001);
        adam.step(vec![&mut p], &[Matrix::scalar(1.0)]).unwrap();
        // m_hat = 1, v_hat = 1 -> -lr / (1 + eps)
        assert!((p.data()[0] + 0.001 / (1.0 + 1e-8)).abs() < 1e-15);
    }

    #[test]
    fn adam_rejects_nan_gradients() {
        let mut p = Matrix::scalar(0.0);
        let mut adam = Adam::new(&[&p], 0.001);
        let err = adam.step(vec![&mut p], &[Matrix::scalar(f64::NAN)]).unwrap_err();
        assert!(matches!(err, Error::Numeric(_)));
        assert_eq!(p.data()[0], 0.0);
        assert_eq!(adam.steps(), 0);
    }

    #[test]
    fn f1_hand_examples() {
        assert_eq!(f1_scores(&[0, 1, 2], &[0, 1, 2], 3).unwrap(), (1.0, 1.0));
        let (mi, ma) = f1_scores(&[0, 1, 1, 1], &[0, 0, 1, 1], 2).unwrap();
        assert!((mi - 0.75).abs() < 1e-15);
        assert!((ma - (2.0 / 3.0 + 0.8) / 2.0).abs() < 1e-15);
        let (mi, ma) = f1_scores(&[1, 1, 1, 1], &[0, 0, 1, 1], 2).unwrap();
        assert!((mi - 0.5).abs() < 1e-15);
        assert!((ma - 1.0 / 3.0).abs() < 1e-15);
        assert!(matches!(f1_scores(&[], &[], 2), Err(Error::Metric(_))));
    }

    #[test]
    fn macro_counts_absent_class_as_zero() {
        let (_, ma) = f1_scores(&[0, 1], &[0, 1], 3).unwrap();
        assert!((ma - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn auc_examples() {
        assert_eq!(auc_roc(&[0.9, 0.8, 0.1, 0.2], &[true, true, false, false]).unwrap(), 1.0);
        assert_eq!(auc_roc(&[0.3; 6], &[true, false, true, false, false, true]).unwrap(), 0.5);
        assert!(matches!(auc_roc(&[0.1, 0.2], &[true, true]), Err(Error::Metric(_))));
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let scores: Vec<f64> = (0..2000).map(|_| rng.random()).collect();
        let labels: Vec<bool> = (0..2000).map(|i| i % 2 == 0).collect();
        let auc = auc_roc(&scores, &labels).unwrap();
        assert!((auc - 0.5).abs() < 0.05, "auc {auc}");
    }

    #[test]
    fn objective_evaluate_matches_tape() {
        let obj = Objective::Linear {
            weights: Matrix::from_rows(&[[1.0, -1.0]]),
        };
        assert_eq!(obj.evaluate(&Matrix::from_rows(&[[3.0, 5.0]])).unwrap(), -2.0);
    }
}
