//! Heterogeneous graph model: typed nodes, typed directed edges, features
//! and labels, plus file ingestion, a synthetic generator, splitting and
//! the random edge-addition attack.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::Matrix;

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("{file}:{line}: {msg}")]
    Parse {
        file: PathBuf,
        line: usize,
        msg: String,
    },
    #[error("integrity error: {0}")]
    Integrity(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("class {class} has only {count} labeled nodes; stratified splitting needs at least 3")]
    Stratification { class: usize, count: usize },
    #[error("split error: {0}")]
    Split(String),
    #[error("sampling error: {0}")]
    Sampling(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, GraphError>;

/// One directed message-carrying edge `src -> dst` of relation `rel`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Edge {
    pub src: usize,
    pub dst: usize,
    pub rel: usize,
}

/// An input edge record. Undirected links expand to two directed edges.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Link {
    pub src: usize,
    pub dst: usize,
    pub rel: usize,
    pub directed: bool,
}

impl Link {
    pub fn undirected(src: usize, dst: usize, rel: usize) -> Self {
        Self {
            src,
            dst,
            rel,
            directed: false,
        }
    }

    pub fn directed(src: usize, dst: usize, rel: usize) -> Self {
        Self {
            src,
            dst,
            rel,
            directed: true,
        }
    }

    fn expand(&self, out: &mut Vec<Edge>) {
        out.push(Edge {
            src: self.src,
            dst: self.dst,
            rel: self.rel,
        });
        if !self.directed {
            out.push(Edge {
                src: self.dst,
                dst: self.src,
                rel: self.rel,
            });
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Features {
    Dense(Matrix),
    /// No input features; a seeded random matrix of this width is generated
    /// on demand by [`HeteroGraph::feature_matrix`].
    Featureless { dim: usize },
}

#[derive(Clone, Debug, PartialEq)]
pub struct HeteroGraph {
    node_types: Vec<usize>,
    links: Vec<Link>,
    edges: Vec<Edge>,
    relation_count: usize,
    features: Features,
    labels: Vec<(usize, usize)>,
    num_classes: usize,
}

impl HeteroGraph {
    /// Validates and builds a graph. `labels` are `(node, class)` pairs;
    /// pass an empty vector and `num_classes = 0` for unlabeled graphs.
    pub fn new(
        node_types: Vec<usize>,
        links: Vec<Link>,
        relation_count: usize,
        features: Features,
        mut labels: Vec<(usize, usize)>,
        num_classes: usize,
    ) -> Result<Self> {
        let p = node_types.len();
        for (i, l) in links.iter().enumerate() {
            if l.src >= p || l.dst >= p {
                return Err(GraphError::Integrity(format!(
                    "edge {i} ({} -> {}) references a node outside 0..{p}",
                    l.src, l.dst
                )));
            }
            if l.rel >= relation_count {
                return Err(GraphError::Integrity(format!(
                    "edge {i} has relation {} but only {relation_count} relations exist",
                    l.rel
                )));
            }
        }
        if let Features::Dense(m) = &features {
            if m.rows() != p {
                return Err(GraphError::Shape(format!(
                    "feature matrix has {} rows for {p} nodes",
                    m.rows()
                )));
            }
            if !m.is_finite() {
                return Err(GraphError::Integrity("non-finite feature value".into()));
            }
        }
        labels.sort_unstable();
        for w in labels.windows(2) {
            if w[0].0 == w[1].0 {
                return Err(GraphError::Integrity(format!(
                    "node {} labeled twice",
                    w[0].0
                )));
            }
        }
        for &(node, class) in &labels {
            if node >= p {
                return Err(GraphError::Integrity(format!(
                    "label for node {node} outside 0..{p}"
                )));
            }
            if class >= num_classes {
                return Err(GraphError::Integrity(format!(
                    "label class {class} for node {node} exceeds class count {num_classes}"
                )));
            }
        }
        let mut edges = Vec::with_capacity(links.len() * 2);
        for l in &links {
            l.expand(&mut edges);
        }
        Ok(Self {
            node_types,
            links,
            edges,
            relation_count,
            features,
            labels,
            num_classes,
        })
    }

    pub fn num_nodes(&self) -> usize {
        self.node_types.len()
    }

    /// Number of directed edges, which is also the message count `k`.
    pub fn num_messages(&self) -> usize {
        self.edges.len()
    }

    pub fn node_types(&self) -> &[usize] {
        &self.node_types
    }

    pub fn links(&self) -> &[Link] {
        &self.links
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    pub fn relation_count(&self) -> usize {
        self.relation_count
    }

    pub fn features(&self) -> &Features {
        &self.features
    }

    pub fn feature_dim(&self) -> usize {
        match &self.features {
            Features::Dense(m) => m.cols(),
            Features::Featureless { dim } => *dim,
        }
    }

    pub fn labels(&self) -> &[(usize, usize)] {
        &self.labels
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn is_labeled(&self) -> bool {
        !self.labels.is_empty()
    }

    pub fn sources(&self) -> Vec<usize> {
        self.edges.iter().map(|e| e.src).collect()
    }

    pub fn targets(&self) -> Vec<usize> {
        self.edges.iter().map(|e| e.dst).collect()
    }

    /// Node feature matrix. Featureless graphs get seeded Gaussian rows
    /// normalized to unit length.
    pub fn feature_matrix(&self, seed: u64) -> Matrix {
        match &self.features {
            Features::Dense(m) => m.clone(),
            Features::Featureless { dim } => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xfea7_0000);
                let mut m = Matrix::zeros(self.num_nodes(), *dim);
                for r in 0..m.rows() {
                    let row = m.row_mut(r);
                    for v in row.iter_mut() {
                        *v = StandardNormal.sample(&mut rng);
                    }
                    let n = row.iter().map(|x| x * x).sum::<f64>().sqrt();
                    if n > 0.0 {
                        row.iter_mut().for_each(|v| *v /= n);
                    }
                }
                m
            }
        }
    }

    /// Same graph with a different link set.
    pub fn with_links(&self, links: Vec<Link>) -> Result<Self> {
        Self::new(
            self.node_types.clone(),
            links,
            self.relation_count,
            self.features.clone(),
            self.labels.clone(),
            self.num_classes,
        )
    }

    /// Writes the graph in the tab-separated text formats read by
    /// [`load_graph`]. Returns the four paths (labels only if labeled).
    pub fn write_to_dir(&self, dir: &Path) -> Result<GraphFiles> {
        let io = |path: &Path, e| GraphError::Io {
            path: path.to_path_buf(),
            source: e,
        };
        fs::create_dir_all(dir).map_err(|e| io(dir, e))?;
        let files = GraphFiles {
            nodes: dir.join("nodes.tsv"),
            edges: dir.join("edges.tsv"),
            features: dir.join("features.txt"),
            labels: self.is_labeled().then(|| dir.join("labels.tsv")),
        };
        let mut s = String::new();
        for (i, t) in self.node_types.iter().enumerate() {
            writeln!(s, "{i}\t{t}").unwrap();
        }
        fs::write(&files.nodes, &s).map_err(|e| io(&files.nodes, e))?;

        s.clear();
        for l in &self.links {
            writeln!(s, "{}\t{}\t{}\t{}", l.src, l.dst, l.rel, u8::from(l.directed)).unwrap();
        }
        fs::write(&files.edges, &s).map_err(|e| io(&files.edges, e))?;

        s.clear();
        match &self.features {
            Features::Featureless { dim } => writeln!(s, "NONE {dim}").unwrap(),
            Features::Dense(m) => {
                writeln!(s, "{} {}", m.rows(), m.cols()).unwrap();
                for r in 0..m.rows() {
                    let row: Vec<String> = m.row(r).iter().map(|v| format!("{v:?}")).collect();
                    writeln!(s, "{}", row.join(" ")).unwrap();
                }
            }
        }
        fs::write(&files.features, &s).map_err(|e| io(&files.features, e))?;

        if let Some(path) = &files.labels {
            s.clear();
            for (n, c) in &self.labels {
                writeln!(s, "{n}\t{c}").unwrap();
            }
            fs::write(path, &s).map_err(|e| io(path, e))?;
        }
        Ok(files)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GraphFiles {
    pub nodes: PathBuf,
    pub edges: PathBuf,
    pub features: PathBuf,
    pub labels: Option<PathBuf>,
}

fn read_lines(path: &Path) -> Result<Vec<(usize, String)>> {
    let text = fs::read_to_string(path).map_err(|e| GraphError::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    Ok(text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim_end_matches('\r').to_string()))
        .filter(|(_, l)| !l.trim().is_empty() && !l.trim_start().starts_with('#'))
        .collect())
}

fn parse_field<T: std::str::FromStr>(path: &Path, line: usize, field: &str, what: &str) -> Result<T> {
    field.trim().parse().map_err(|_| GraphError::Parse {
        file: path.to_path_buf(),
        line,
        msg: format!("invalid {what} {field:?}"),
    })
}

fn split_fields<'a>(path: &Path, line: usize, text: &'a str, expect: usize) -> Result<Vec<&'a str>> {
    let fields: Vec<&str> = text.split('\t').collect();
    if fields.len() != expect {
        return Err(GraphError::Parse {
            file: path.to_path_buf(),
            line,
            msg: format!("expected {expect} tab-separated fields, found {}", fields.len()),
        });
    }
    Ok(fields)
}

/// Loads a graph from the text formats:
///
/// * nodes: `node_id<TAB>type_id`
/// * edges: `src<TAB>dst<TAB>relation_id<TAB>directed(0|1)`
/// * features: `p d` header then `p` rows of `d` reals, or `NONE d`
/// * labels: `node_id<TAB>class_id`
///
/// Node ids are arbitrary tokens remapped to `0..p` in file order. The
/// relation count is one more than the largest relation id and the class
/// count one more than the largest class id. Duplicate edges are kept.
pub fn load_graph(
    nodes_path: &Path,
    edges_path: &Path,
    features_path: &Path,
    labels_path: Option<&Path>,
) -> Result<HeteroGraph> {
    let mut ids: HashMap<String, usize> = HashMap::new();
    let mut node_types = Vec::new();
    for (line, text) in read_lines(nodes_path)? {
        let f = split_fields(nodes_path, line, &text, 2)?;
        let ty: usize = parse_field(nodes_path, line, f[1], "type id")?;
        let id = f[0].trim().to_string();
        if id.is_empty() {
            return Err(GraphError::Parse {
                file: nodes_path.to_path_buf(),
                line,
                msg: "empty node id".into(),
            });
        }
        if ids.insert(id.clone(), node_types.len()).is_some() {
            return Err(GraphError::Parse {
                file: nodes_path.to_path_buf(),
                line,
                msg: format!("duplicate node id {id:?}"),
            });
        }
        node_types.push(ty);
    }
    let p = node_types.len();
    let lookup = |id: &str, path: &Path, line: usize| -> Result<usize> {
        ids.get(id.trim()).copied().ok_or_else(|| {
            GraphError::Integrity(format!(
                "{}:{line}: unknown node id {:?}",
                path.display(),
                id.trim()
            ))
        })
    };

    let mut links = Vec::new();
    let mut relation_count = 0;
    for (line, text) in read_lines(edges_path)? {
        let f = split_fields(edges_path, line, &text, 4)?;
        let src = lookup(f[0], edges_path, line)?;
        let dst = lookup(f[1], edges_path, line)?;
        let rel: usize = parse_field(edges_path, line, f[2], "relation id")?;
        let directed = match f[3].trim() {
            "0" => false,
            "1" => true,
            other => {
                return Err(GraphError::Parse {
                    file: edges_path.to_path_buf(),
                    line,
                    msg: format!("directed flag must be 0 or 1, found {other:?}"),
                })
            }
        };
        relation_count = relation_count.max(rel + 1);
        links.push(Link {
            src,
            dst,
            rel,
            directed,
        });
    }

    let feat_lines = read_lines(features_path)?;
    let Some(((hline, header), rows)) = feat_lines.split_first() else {
        return Err(GraphError::Parse {
            file: features_path.to_path_buf(),
            line: 1,
            msg: "missing header".into(),
        });
    };
    let head: Vec<&str> = header.split_whitespace().collect();
    if head.len() != 2 {
        return Err(GraphError::Parse {
            file: features_path.to_path_buf(),
            line: *hline,
            msg: "header must be `p d` or `NONE d`".into(),
        });
    }
    let dim: usize = parse_field(features_path, *hline, head[1], "feature dimension")?;
    let features = if head[0] == "NONE" {
        if !rows.is_empty() {
            return Err(GraphError::Shape(format!(
                "featureless header followed by {} data rows",
                rows.len()
            )));
        }
        Features::Featureless { dim }
    } else {
        let declared: usize = parse_field(features_path, *hline, head[0], "row count")?;
        if declared != p || rows.len() != p {
            return Err(GraphError::Shape(format!(
                "feature file declares {declared} rows and holds {}, graph has {p} nodes",
                rows.len()
            )));
        }
        let mut data = Vec::with_capacity(p * dim);
        for (line, text) in rows {
            let vals: Vec<&str> = text.split_whitespace().collect();
            if vals.len() != dim {
                return Err(GraphError::Parse {
                    file: features_path.to_path_buf(),
                    line: *line,
                    msg: format!("expected {dim} values, found {}", vals.len()),
                });
            }
            for v in vals {
                let x: f64 = parse_field(features_path, *line, v, "real")?;
                if !x.is_finite() {
                    return Err(GraphError::Parse {
                        file: features_path.to_path_buf(),
                        line: *line,
                        msg: format!("non-finite value {v:?}"),
                    });
                }
                data.push(x);
            }
        }
        Features::Dense(Matrix::from_vec(p, dim, data).expect("sized above"))
    };

    let mut labels = Vec::new();
    let mut num_classes = 0;
    if let Some(lp) = labels_path {
        for (line, text) in read_lines(lp)? {
            let f = split_fields(lp, line, &text, 2)?;
            let node = lookup(f[0], lp, line)?;
            let class: usize = parse_field(lp, line, f[1], "class id")?;
            num_classes = num_classes.max(class + 1);
            labels.push((node, class));
        }
    }
    HeteroGraph::new(node_types, links, relation_count, features, labels, num_classes)
}

/// Configuration for [`synth_graph`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub nodes_per_type: Vec<usize>,
    pub relation_count: usize,
    pub feature_dim: usize,
    pub num_classes: usize,
    /// Probability that an edge joins two nodes of the same class.
    pub homophily: f64,
    /// Average number of undirected edges per node.
    pub avg_degree: f64,
    /// Distance scale between class feature means.
    pub class_separation: f64,
    /// Standard deviation of per-node feature noise.
    pub noise: f64,
    /// Node types whose nodes carry labels.
    pub labeled_types: Vec<usize>,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            nodes_per_type: vec![200, 200, 200],
            relation_count: 3,
            feature_dim: 16,
            num_classes: 3,
            homophily: 0.8,
            avg_degree: 4.0,
            class_separation: 1.0,
            noise: 1.0,
            labeled_types: vec![0],
            seed: 0,
        }
    }
}

/// Stochastic-block style heterogeneous graph with class-conditioned
/// Gaussian features. Each undirected edge picks a uniform source, then a
/// destination from the source's class with probability `homophily` or from
/// another class otherwise. The relation id is a function of the endpoint
/// types.
pub fn synth_graph(cfg: &SynthConfig) -> Result<HeteroGraph> {
    if cfg.nodes_per_type.is_empty() || cfg.nodes_per_type.contains(&0) {
        return Err(GraphError::Config(
            "every node type needs at least one node".into(),
        ));
    }
    if !(0.0..=1.0).contains(&cfg.homophily) {
        return Err(GraphError::Config(format!(
            "homophily {} outside [0, 1]",
            cfg.homophily
        )));
    }
    if cfg.num_classes == 0 || cfg.relation_count == 0 || cfg.feature_dim == 0 {
        return Err(GraphError::Config(
            "class count, relation count and feature dim must be positive".into(),
        ));
    }
    if cfg.num_classes == 1 && cfg.homophily < 1.0 {
        return Err(GraphError::Config(
            "cross-class edges need at least two classes".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let n_types = cfg.nodes_per_type.len();
    let p: usize = cfg.nodes_per_type.iter().sum();
    let node_types: Vec<usize> = cfg
        .nodes_per_type
        .iter()
        .enumerate()
        .flat_map(|(t, &n)| std::iter::repeat_n(t, n))
        .collect();
    let classes: Vec<usize> = (0..p).map(|i| i % cfg.num_classes).collect();

    let d = cfg.feature_dim;
    let mut means = Matrix::zeros(cfg.num_classes * n_types, d);
    for v in means.data_mut() {
        let z: f64 = StandardNormal.sample(&mut rng);
        *v = z * cfg.class_separation;
    }
    let mut feats = Matrix::zeros(p, d);
    for i in 0..p {
        let mean_row = classes[i] * n_types + node_types[i];
        for j in 0..d {
            let z: f64 = StandardNormal.sample(&mut rng);
            feats.set(i, j, means.get(mean_row, j) + cfg.noise * z);
        }
    }

    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); cfg.num_classes];
    for (i, &c) in classes.iter().enumerate() {
        by_class[c].push(i);
    }
    let n_links = (cfg.avg_degree * p as f64 / 2.0).round() as usize;
    let mut links = Vec::with_capacity(n_links);
    for _ in 0..n_links {
        let src = rng.random_range(0..p);
        let c = classes[src];
        let target_class = if rng.random::<f64>() < cfg.homophily {
            c
        } else {
            let other = rng.random_range(0..cfg.num_classes - 1);
            if other >= c {
                other + 1
            } else {
                other
            }
        };
        let pool = &by_class[target_class];
        let dst = pool[rng.random_range(0..pool.len())];
        let (ts, td) = (node_types[src], node_types[dst]);
        let rel = (ts.min(td) * n_types + ts.max(td)) % cfg.relation_count;
        links.push(Link::undirected(src, dst, rel));
    }

    let labels: Vec<(usize, usize)> = (0..p)
        .filter(|&i| cfg.labeled_types.contains(&node_types[i]))
        .map(|i| (i, classes[i]))
        .collect();
    HeteroGraph::new(
        node_types,
        links,
        cfg.relation_count,
        Features::Dense(feats),
        labels,
        cfg.num_classes,
    )
}

/// Split fractions plus the shuffling seed.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SplitSpec {
    pub train: f64,
    pub valid: f64,
    pub test: f64,
    pub seed: u64,
}

impl SplitSpec {
    /// 20% train / 10% valid / 70% test, the node-classification protocol.
    pub fn nodes(seed: u64) -> Self {
        Self {
            train: 0.2,
            valid: 0.1,
            test: 0.7,
            seed,
        }
    }

    /// 25% train / 5% valid / 60% test, the link-prediction protocol.
    pub fn edges(seed: u64) -> Self {
        Self {
            train: 0.25,
            valid: 0.05,
            test: 0.6,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = [self.train, self.valid, self.test]
            .iter()
            .all(|f| f.is_finite() && *f > 0.0);
        if !ok || self.train + self.valid + self.test > 1.0 + 1e-9 {
            return Err(GraphError::Config(format!(
                "split fractions must be positive and sum to at most 1, got ({}, {}, {})",
                self.train, self.valid, self.test
            )));
        }
        Ok(())
    }

    fn fills(&self) -> bool {
        self.train + self.valid + self.test >= 1.0 - 1e-9
    }
}

/// Indices per split (node ids for labels, link positions for edges).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelSplit {
    pub train: Vec<usize>,
    pub valid: Vec<usize>,
    pub test: Vec<usize>,
}

fn floor_eps(x: f64) -> usize {
    (x + 1e-9).floor() as usize
}

/// Distributes `total` across strata proportionally to `quota`, floors first
/// and then the largest remainders (ties to the lower stratum index).
fn largest_remainder(quota: &[f64], total: usize) -> Vec<usize> {
    let mut alloc: Vec<usize> = quota.iter().map(|&q| floor_eps(q)).collect();
    let assigned: usize = alloc.iter().sum();
    let mut order: Vec<usize> = (0..quota.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = quota[a] - quota[a].floor();
        let rb = quota[b] - quota[b].floor();
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    for &i in order.iter().take(total.saturating_sub(assigned)) {
        alloc[i] += 1;
    }
    alloc
}

/// Per-stratum (valid, test, unused) counts; train takes the rest.
fn stratified_counts(sizes: &[usize], spec: &SplitSpec) -> Vec<(usize, usize, usize)> {
    let n: usize = sizes.iter().sum();
    let unused_frac = if spec.fills() {
        0.0
    } else {
        1.0 - spec.train - spec.valid - spec.test
    };
    let alloc = |frac: f64| {
        let quota: Vec<f64> = sizes.iter().map(|&s| s as f64 * frac).collect();
        largest_remainder(&quota, floor_eps(n as f64 * frac))
    };
    let (v, t, u) = (alloc(spec.valid), alloc(spec.test), alloc(unused_frac));
    (0..sizes.len()).map(|i| (v[i], t[i], u[i])).collect()
}

/// Stratified, seeded split of the labeled nodes. Valid and test sizes are
/// rounded down; train absorbs the rounding.
pub fn split_labels(g: &HeteroGraph, spec: &SplitSpec) -> Result<LabelSplit> {
    spec.validate()?;
    if !g.is_labeled() {
        return Err(GraphError::Split("graph has no labels".into()));
    }
    let mut per_class: Vec<Vec<usize>> = vec![Vec::new(); g.num_classes()];
    for &(node, class) in g.labels() {
        per_class[class].push(node);
    }
    for (class, nodes) in per_class.iter().enumerate() {
        if !nodes.is_empty() && nodes.len() < 3 {
            return Err(GraphError::Stratification {
                class,
                count: nodes.len(),
            });
        }
    }
    let sizes: Vec<usize> = per_class.iter().map(Vec::len).collect();
    let counts = stratified_counts(&sizes, spec);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut split = LabelSplit {
        train: Vec::new(),
        valid: Vec::new(),
        test: Vec::new(),
    };
    for (nodes, &(nv, nt, nu)) in per_class.iter_mut().zip(&counts) {
        if nv + nt + nu > nodes.len() {
            return Err(GraphError::Split(format!(
                "class of {} nodes cannot host {nv} valid + {nt} test",
                nodes.len()
            )));
        }
        nodes.shuffle(&mut rng);
        split.valid.extend_from_slice(&nodes[..nv]);
        split.test.extend_from_slice(&nodes[nv..nv + nt]);
        split.train.extend_from_slice(&nodes[nv + nt + nu..]);
    }
    split.train.sort_unstable();
    split.valid.sort_unstable();
    split.test.sort_unstable();
    Ok(split)
}

/// Result of [`split_edges`]: the message-passing graph for training and
/// the positive links of each split.
#[derive(Clone, Debug, PartialEq)]
pub struct EdgeSplit {
    pub train_graph: HeteroGraph,
    pub train: Vec<Link>,
    pub valid: Vec<Link>,
    pub test: Vec<Link>,
}

/// Minimum links per relation for [`split_edges`].
pub const MIN_LINKS_PER_RELATION: usize = 20;

/// Seeded, relation-stratified split of the input links. Validation and
/// test links are removed from the training graph; train positives and the
/// unused remainder stay in it.
pub fn split_edges(g: &HeteroGraph, spec: &SplitSpec) -> Result<EdgeSplit> {
    spec.validate()?;
    let mut per_rel: Vec<Vec<usize>> = vec![Vec::new(); g.relation_count()];
    for (i, l) in g.links().iter().enumerate() {
        per_rel[l.rel].push(i);
    }
    for (rel, idx) in per_rel.iter().enumerate() {
        if !idx.is_empty() && idx.len() < MIN_LINKS_PER_RELATION {
            return Err(GraphError::Split(format!(
                "relation {rel} exhausted: {} links, need at least {MIN_LINKS_PER_RELATION}",
                idx.len()
            )));
        }
    }
    if g.links().is_empty() {
        return Err(GraphError::Split("graph has no edges".into()));
    }
    let sizes: Vec<usize> = per_rel.iter().map(Vec::len).collect();
    let counts = stratified_counts(&sizes, spec);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut held_out = vec![false; g.links().len()];
    let (mut train, mut valid, mut test) = (Vec::new(), Vec::new(), Vec::new());
    for (idx, &(nv, nt, nu)) in per_rel.iter_mut().zip(&counts) {
        if idx.is_empty() {
            continue;
        }
        if nv + nt + nu >= idx.len() {
            return Err(GraphError::Split(format!(
                "relation exhausted: {} links cannot host {nv} valid + {nt} test with training edges left",
                idx.len()
            )));
        }
        idx.shuffle(&mut rng);
        for &i in &idx[..nv] {
            held_out[i] = true;
            valid.push(i);
        }
        for &i in &idx[nv..nv + nt] {
            held_out[i] = true;
            test.push(i);
        }
        train.extend_from_slice(&idx[nv + nt + nu..]);
    }
    for v in [&mut train, &mut valid, &mut test] {
        v.sort_unstable();
    }
    let links = g.links();
    let kept: Vec<Link> = links
        .iter()
        .zip(&held_out)
        .filter(|(_, &h)| !h)
        .map(|(l, _)| *l)
        .collect();
    let pick = |ids: &[usize]| ids.iter().map(|&i| links[i]).collect::<Vec<_>>();
    Ok(EdgeSplit {
        train_graph: g.with_links(kept)?,
        train: pick(&train),
        valid: pick(&valid),
        test: pick(&test),
    })
}

/// Appends `floor(ratio * k / 2)` uniformly random undirected links (two
/// messages each) with uniformly random relations. Existing links keep
/// their order; self-loops and duplicates may occur.
pub fn add_random_edges(g: &HeteroGraph, ratio: f64, seed: u64) -> Result<HeteroGraph> {
    if !(0.0..=1.0).contains(&ratio) {
        return Err(GraphError::Config(format!(
            "attack ratio {ratio} outside [0, 1]"
        )));
    }
    let extra = floor_eps(ratio * g.num_messages() as f64 / 2.0);
    if extra == 0 {
        return Ok(g.clone());
    }
    let p = g.num_nodes();
    if p == 0 || g.relation_count() == 0 {
        return Err(GraphError::Config(
            "cannot add edges to a graph without nodes or relations".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut links = g.links().to_vec();
    for _ in 0..extra {
        let src = rng.random_range(0..p);
        let dst = rng.random_range(0..p);
        let rel = rng.random_range(0..g.relation_count());
        links.push(Link::undirected(src, dst, rel));
    }
    g.with_links(links)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(labels: Vec<(usize, usize)>, k: usize) -> HeteroGraph {
        HeteroGraph::new(
            vec![0, 1],
            vec![Link::undirected(0, 1, 0)],
            1,
            Features::Dense(Matrix::zeros(2, 3)),
            labels,
            k,
        )
        .unwrap()
    }

    #[test]
    fn undirected_links_expand_to_two_messages() {
        let g = tiny(vec![], 0);
        assert_eq!(g.num_nodes(), 2);
        assert_eq!(g.num_messages(), 2);
        assert_eq!(g.edges()[1], Edge { src: 1, dst: 0, rel: 0 });
    }

    #[test]
    fn integrity_violations_are_rejected() {
        let bad_edge = HeteroGraph::new(
            vec![0],
            vec![Link::directed(0, 1, 0)],
            1,
            Features::Featureless { dim: 2 },
            vec![],
            0,
        );
        assert!(matches!(bad_edge, Err(GraphError::Integrity(_))));
        let bad_rel = HeteroGraph::new(
            vec![0, 0],
            vec![Link::directed(0, 1, 2)],
            1,
            Features::Featureless { dim: 2 },
            vec![],
            0,
        );
        assert!(matches!(bad_rel, Err(GraphError::Integrity(_))));
        let bad_feat = HeteroGraph::new(
            vec![0, 0],
            vec![],
            1,
            Features::Dense(Matrix::zeros(3, 2)),
            vec![],
            0,
        );
        assert!(matches!(bad_feat, Err(GraphError::Shape(_))));
    }

    #[test]
    fn featureless_rows_are_unit_norm_and_seeded() {
        let g = HeteroGraph::new(
            vec![0; 5],
            vec![],
            1,
            Features::Featureless { dim: 16 },
            vec![],
            0,
        )
        .unwrap();
        let f = g.feature_matrix(3);
        assert_eq!(f.shape(), (5, 16));
        for r in 0..5 {
            let n: f64 = f.row(r).iter().map(|x| x * x).sum();
            assert!((n - 1.0).abs() < 1e-12);
        }
        assert_eq!(f, g.feature_matrix(3));
        assert_ne!(f, g.feature_matrix(4));
    }

    #[test]
    fn largest_remainder_hits_total() {
        assert_eq!(largest_remainder(&[3.4, 3.3, 3.3], 10), vec![4, 3, 3]);
        assert_eq!(largest_remainder(&[0.5, 0.5], 1), vec![1, 0]);
    }

    #[test]
    fn synth_rejects_degenerate_sizes() {
        let cfg = SynthConfig {
            nodes_per_type: vec![10, 0],
            ..SynthConfig::default()
        };
        assert!(matches!(synth_graph(&cfg), Err(GraphError::Config(_))));
        let cfg = SynthConfig {
            homophily: 1.5,
            ..SynthConfig::default()
        };
        assert!(matches!(synth_graph(&cfg), Err(GraphError::Config(_))));
    }

    #[test]
    fn stratification_needs_three_per_class() {
        let g = HeteroGraph::new(
            vec![0; 5],
            vec![],
            1,
            Features::Featureless { dim: 2 },
            vec![(0, 0), (1, 0), (2, 0), (3, 1), (4, 1)],
            2,
        )
        .unwrap();
        assert!(matches!(
            split_labels(&g, &SplitSpec::nodes(0)),
            Err(GraphError::Stratification { class: 1, count: 2 })
        ));
    }

    #[test]
    fn edge_split_requires_enough_links_per_relation() {
        let g = tiny(vec![], 0);
        assert!(matches!(
            split_edges(&g, &SplitSpec::edges(0)),
            Err(GraphError::Split(_))
        ));
    }

    #[test]
    fn attack_ratio_zero_is_identity() {
        let g = synth_graph(&SynthConfig::default()).unwrap();
        assert_eq!(add_random_edges(&g, 0.0, 1).unwrap(), g);
        assert!(add_random_edges(&g, 1.5, 1).is_err());
    }
}
