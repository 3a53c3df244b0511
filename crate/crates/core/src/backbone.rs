//! RGCN and RGAT message-passing layers that materialize the per-layer
//! message matrix so hooks can rewrite it before aggregation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::HeteroGraph;
use crate::tensor::{Aggregation, Matrix, Tape, TensorError, Var};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("index error: {0}")]
    Index(String),
    #[error("hook error: {0}")]
    Hook(String),
}

pub type Result<T> = std::result::Result<T, ModelError>;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Backbone {
    #[default]
    Rgcn,
    Rgat,
}

impl std::str::FromStr for Backbone {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "rgcn" => Ok(Self::Rgcn),
            "rgat" => Ok(Self::Rgat),
            other => Err(format!("unknown backbone {other:?} (expected rgcn or rgat)")),
        }
    }
}

pub const RGAT_SLOPE: f64 = 0.2;

/// Edge bookkeeping shared by every layer of a forward pass.
#[derive(Clone, Debug)]
pub struct GraphIndex {
    pub num_nodes: usize,
    pub relation_count: usize,
    pub src: Vec<usize>,
    pub dst: Vec<usize>,
    pub rel: Vec<usize>,
    /// `rel * p + src`, the row of the stacked per-relation projections.
    src_rows: Vec<usize>,
    dst_rows: Vec<usize>,
    /// `1 / |N_r(dst)|` per edge.
    inv_degree: Matrix,
    /// Dense id of the `(dst, rel)` group each edge belongs to.
    groups: Vec<usize>,
}

impl GraphIndex {
    pub fn new(g: &HeteroGraph) -> Self {
        let p = g.num_nodes();
        let r = g.relation_count();
        let edges = g.edges();
        let mut counts = vec![0usize; p * r.max(1)];
        for e in edges {
            counts[e.dst * r + e.rel] += 1;
        }
        let mut group_id = vec![usize::MAX; p * r.max(1)];
        let mut next = 0;
        let mut groups = Vec::with_capacity(edges.len());
        for e in edges {
            let slot = e.dst * r + e.rel;
            if group_id[slot] == usize::MAX {
                group_id[slot] = next;
                next += 1;
            }
            groups.push(group_id[slot]);
        }
        let inv: Vec<f64> = edges
            .iter()
            .map(|e| 1.0 / counts[e.dst * r + e.rel] as f64)
            .collect();
        Self {
            num_nodes: p,
            relation_count: r,
            src: edges.iter().map(|e| e.src).collect(),
            dst: edges.iter().map(|e| e.dst).collect(),
            rel: edges.iter().map(|e| e.rel).collect(),
            src_rows: edges.iter().map(|e| e.rel * p + e.src).collect(),
            dst_rows: edges.iter().map(|e| e.rel * p + e.dst).collect(),
            inv_degree: Matrix::from_vec(edges.len(), 1, inv).expect("one entry per edge"),
            groups,
        }
    }

    pub fn num_messages(&self) -> usize {
        self.src.len()
    }

    pub fn groups(&self) -> &[usize] {
        &self.groups
    }
}

fn glorot(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
    let a = (6.0 / (rows + cols) as f64).sqrt();
    let mut m = Matrix::zeros(rows, cols);
    for v in m.data_mut() {
        *v = rng.random_range(-a..a);
    }
    m
}

#[derive(Clone, Debug, PartialEq)]
pub struct RgcnLayer {
    pub relation_weights: Vec<Matrix>,
    pub self_weight: Matrix,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RgatLayer {
    pub relation_weights: Vec<Matrix>,
    pub self_weight: Matrix,
    /// One row per relation: the source-side attention vector.
    pub att_src: Matrix,
    /// One row per relation: the target-side attention vector.
    pub att_dst: Matrix,
    pub slope: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Layer {
    Rgcn(RgcnLayer),
    Rgat(RgatLayer),
}

impl Layer {
    pub fn new(kind: Backbone, d_in: usize, d_out: usize, relations: usize, rng: &mut ChaCha8Rng) -> Self {
        let relation_weights = (0..relations).map(|_| glorot(d_in, d_out, rng)).collect();
        let self_weight = glorot(d_in, d_out, rng);
        match kind {
            Backbone::Rgcn => Layer::Rgcn(RgcnLayer {
                relation_weights,
                self_weight,
            }),
            Backbone::Rgat => Layer::Rgat(RgatLayer {
                relation_weights,
                self_weight,
                att_src: Matrix::zeros(relations, d_out),
                att_dst: Matrix::zeros(relations, d_out),
                slope: RGAT_SLOPE,
            }),
        }
    }

    pub fn dims(&self) -> (usize, usize) {
        let w = match self {
            Layer::Rgcn(l) => &l.self_weight,
            Layer::Rgat(l) => &l.self_weight,
        };
        w.shape()
    }

    pub fn params(&self) -> Vec<&Matrix> {
        match self {
            Layer::Rgcn(l) => l
                .relation_weights
                .iter()
                .chain(std::iter::once(&l.self_weight))
                .collect(),
            Layer::Rgat(l) => l
                .relation_weights
                .iter()
                .chain([&l.self_weight, &l.att_src, &l.att_dst])
                .collect(),
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Matrix> {
        match self {
            Layer::Rgcn(l) => l
                .relation_weights
                .iter_mut()
                .chain(std::iter::once(&mut l.self_weight))
                .collect(),
            Layer::Rgat(l) => l
                .relation_weights
                .iter_mut()
                .chain([&mut l.self_weight, &mut l.att_src, &mut l.att_dst])
                .collect(),
        }
    }

    /// Registers the layer parameters on `tape` in [`Layer::params`] order.
    pub fn register(&self, tape: &mut Tape, requires_grad: bool) -> LayerVars {
        let vars: Vec<Var> = self
            .params()
            .into_iter()
            .map(|m| tape.leaf(m.clone(), requires_grad))
            .collect();
        match self {
            Layer::Rgcn(l) => {
                let r = l.relation_weights.len();
                LayerVars {
                    relation_weights: vars[..r].to_vec(),
                    self_weight: vars[r],
                    attention: None,
                    slope: 0.0,
                    d_out: l.self_weight.cols(),
                }
            }
            Layer::Rgat(l) => {
                let r = l.relation_weights.len();
                LayerVars {
                    relation_weights: vars[..r].to_vec(),
                    self_weight: vars[r],
                    attention: Some((vars[r + 1], vars[r + 2])),
                    slope: l.slope,
                    d_out: l.self_weight.cols(),
                }
            }
        }
    }
}

/// Tape handles for one layer's parameters.
#[derive(Clone, Debug)]
pub struct LayerVars {
    pub relation_weights: Vec<Var>,
    pub self_weight: Var,
    pub attention: Option<(Var, Var)>,
    pub slope: f64,
    pub d_out: usize,
}

/// Attention weights of an RGAT layer, recomputed outside any training tape.
pub fn attention_weights(tape: &mut Tape, h: Var, index: &GraphIndex, lv: &LayerVars) -> Result<Option<Var>> {
    let Some((a_src, a_dst)) = lv.attention else {
        return Ok(None);
    };
    if index.num_messages() == 0 {
        return Ok(None);
    }
    let proj = stacked_projection(tape, h, lv)?;
    let z_src = tape.gather_rows(proj, &index.src_rows)?;
    let z_dst = tape.gather_rows(proj, &index.dst_rows)?;
    Ok(Some(attention(tape, z_src, z_dst, index, a_src, a_dst, lv.slope)?))
}

fn stacked_projection(tape: &mut Tape, h: Var, lv: &LayerVars) -> Result<Var> {
    let projs = lv
        .relation_weights
        .iter()
        .map(|&w| tape.matmul(h, w))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    Ok(tape.concat_rows(&projs)?)
}

fn attention(
    tape: &mut Tape,
    z_src: Var,
    z_dst: Var,
    index: &GraphIndex,
    a_src: Var,
    a_dst: Var,
    slope: f64,
) -> Result<Var> {
    let a_s = tape.gather_rows(a_src, &index.rel)?;
    let a_d = tape.gather_rows(a_dst, &index.rel)?;
    let s1 = tape.mul(z_src, a_s)?;
    let s1 = tape.sum_cols(s1)?;
    let s2 = tape.mul(z_dst, a_d)?;
    let s2 = tape.sum_cols(s2)?;
    let score = tape.add(s1, s2)?;
    let score = tape.leaky_relu(score, slope)?;
    Ok(tape.segment_softmax(score, &index.groups)?)
}

/// Message matrix of one layer, rows in directed-edge order.
///
/// RGCN: `H_src · W_rel / |N_rel(dst)|`. RGAT: `alpha · (H_src · W_rel)`
/// with alpha a softmax over each `(dst, rel)` group.
pub fn build_messages(tape: &mut Tape, h: Var, index: &GraphIndex, lv: &LayerVars) -> Result<Var> {
    let (rows, _) = tape.shape(h);
    if rows != index.num_nodes {
        return Err(ModelError::Shape(format!(
            "layer input has {rows} rows for {} nodes",
            index.num_nodes
        )));
    }
    if index.num_messages() == 0 || lv.relation_weights.is_empty() {
        return Ok(tape.constant(Matrix::zeros(0, lv.d_out)));
    }
    let proj = stacked_projection(tape, h, lv)?;
    let z_src = tape.gather_rows(proj, &index.src_rows)?;
    match lv.attention {
        None => {
            let norm = tape.constant(index.inv_degree.clone());
            Ok(tape.mul(z_src, norm)?)
        }
        Some((a_src, a_dst)) => {
            let z_dst = tape.gather_rows(proj, &index.dst_rows)?;
            let alpha = attention(tape, z_src, z_dst, index, a_src, a_dst, lv.slope)?;
            Ok(tape.mul(z_src, alpha)?)
        }
    }
}

/// `act(sum_aggregate(M) + H · W_0)`. When `messages` is given it replaces
/// the layer's own message matrix and must be `k × d_out`.
pub fn layer_forward(
    tape: &mut Tape,
    h: Var,
    index: &GraphIndex,
    lv: &LayerVars,
    messages: Option<Var>,
    activate: bool,
) -> Result<Var> {
    let m = match messages {
        Some(m) => {
            let want = (index.num_messages(), lv.d_out);
            if tape.shape(m) != want {
                return Err(ModelError::Shape(format!(
                    "message override is {:?}, layer expects {want:?}",
                    tape.shape(m)
                )));
            }
            m
        }
        None => build_messages(tape, h, index, lv)?,
    };
    let agg = tape.scatter_aggregate(m, &index.dst, index.num_nodes, Aggregation::Sum)?;
    let own = tape.matmul(h, lv.self_weight)?;
    let out = tape.add(agg, own)?;
    if activate {
        Ok(tape.relu(out)?)
    } else {
        Ok(out)
    }
}

/// Interception points used by regularizers.
pub trait ForwardHooks {
    /// Called once on the layer-1 input.
    fn on_features(&mut self, _tape: &mut Tape, features: Var) -> Result<Var> {
        Ok(features)
    }

    /// Called on every layer's message matrix before aggregation.
    fn on_messages(&mut self, _tape: &mut Tape, messages: Var, _layer: usize, _index: &GraphIndex) -> Result<Var> {
        Ok(messages)
    }
}

/// Hooks that change nothing.
#[derive(Clone, Copy, Debug, Default)]
pub struct NoHooks;

impl ForwardHooks for NoHooks {}

/// Stacked message-passing layers; the last layer emits class logits or
/// embeddings and has no activation.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub layers: Vec<Layer>,
    pub hidden_dim: usize,
    pub output_dim: usize,
    pub backbone: Backbone,
}

/// Output of [`Model::forward`].
pub struct Forward {
    pub output: Var,
    /// Parameter handles in [`Model::params`] order.
    pub params: Vec<Var>,
    /// Message matrices after hooks, one per layer.
    pub messages: Vec<Var>,
}

impl Model {
    pub fn new(
        backbone: Backbone,
        in_dim: usize,
        hidden_dim: usize,
        output_dim: usize,
        num_layers: usize,
        relation_count: usize,
        seed: u64,
    ) -> Self {
        assert!(num_layers >= 1, "a model needs at least one layer");
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = (0..num_layers)
            .map(|l| {
                let d_in = if l == 0 { in_dim } else { hidden_dim };
                let d_out = if l + 1 == num_layers { output_dim } else { hidden_dim };
                Layer::new(backbone, d_in, d_out, relation_count, &mut rng)
            })
            .collect();
        Self {
            layers,
            hidden_dim,
            output_dim,
            backbone,
        }
    }

    /// Output width of every layer, i.e. the message width per layer.
    pub fn layer_widths(&self) -> Vec<usize> {
        self.layers.iter().map(|l| l.dims().1).collect()
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].dims().0
    }

    pub fn params(&self) -> Vec<&Matrix> {
        self.layers.iter().flat_map(Layer::params).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Matrix> {
        self.layers.iter_mut().flat_map(Layer::params_mut).collect()
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        features: Var,
        index: &GraphIndex,
        hooks: &mut dyn ForwardHooks,
        params_require_grad: bool,
    ) -> Result<Forward> {
        let (p, d) = tape.shape(features);
        if p != index.num_nodes || d != self.input_dim() {
            return Err(ModelError::Shape(format!(
                "features are {p}x{d}, model expects {}x{}",
                index.num_nodes,
                self.input_dim()
            )));
        }
        let mut h = hooks.on_features(tape, features)?;
        let mut params = Vec::new();
        let mut messages = Vec::with_capacity(self.layers.len());
        for (l, layer) in self.layers.iter().enumerate() {
            let lv = layer.register(tape, params_require_grad);
            params.extend(lv.relation_weights.iter().copied());
            params.push(lv.self_weight);
            if let Some((a, b)) = lv.attention {
                params.extend([a, b]);
            }
            let m = build_messages(tape, h, index, &lv)?;
            let m = hooks.on_messages(tape, m, l, index)?;
            messages.push(m);
            let last = l + 1 == self.layers.len();
            h = layer_forward(tape, h, index, &lv, Some(m), !last)?;
        }
        Ok(Forward {
            output: h,
            params,
            messages,
        })
    }

    /// Forward pass without gradients.
    pub fn predict(&self, features: &Matrix, index: &GraphIndex) -> Result<Matrix> {
        let mut tape = Tape::new();
        let f = tape.constant(features.clone());
        let out = self.forward(&mut tape, f, index, &mut NoHooks, false)?;
        Ok(tape.value(out.output).clone())
    }
}

/// Logits `emb_u · emb_v` for each pair, as a `k×1` column on the tape.
pub fn pair_logits(tape: &mut Tape, emb: Var, pairs: &[(usize, usize)]) -> Result<Var> {
    let p = tape.shape(emb).0;
    if let Some(&(u, v)) = pairs.iter().find(|&&(u, v)| u >= p || v >= p) {
        return Err(ModelError::Index(format!("pair ({u}, {v}) outside 0..{p}")));
    }
    let us: Vec<usize> = pairs.iter().map(|x| x.0).collect();
    let vs: Vec<usize> = pairs.iter().map(|x| x.1).collect();
    let a = tape.gather_rows(emb, &us)?;
    let b = tape.gather_rows(emb, &vs)?;
    let prod = tape.mul(a, b)?;
    Ok(tape.sum_cols(prod)?)
}

/// `emb_u · emb_v` for each pair.
pub fn link_logits(emb: &Matrix, pairs: &[(usize, usize)]) -> Result<Vec<f64>> {
    let p = emb.rows();
    pairs
        .iter()
        .map(|&(u, v)| {
            if u >= p || v >= p {
                return Err(ModelError::Index(format!("pair ({u}, {v}) outside 0..{p}")));
            }
            Ok(emb.row(u).iter().zip(emb.row(v)).map(|(a, b)| a * b).sum())
        })
        .collect()
}

/// `sigmoid(emb_u · emb_v)` for each pair. Saturates to exactly 1 for
/// large logits, so rank on [`link_logits`] instead.
pub fn link_score(emb: &Matrix, pairs: &[(usize, usize)]) -> Result<Vec<f64>> {
    Ok(link_logits(emb, pairs)?
        .into_iter()
        .map(|x| 1.0 / (1.0 + (-x).exp()))
        .collect())
}
