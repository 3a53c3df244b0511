use std::fs;

use grugraph::graph::{self, Features, GraphError, HeteroGraph, Link, SplitSpec, SynthConfig};
use grugraph::Matrix;
use proptest::prelude::*;

fn small() -> HeteroGraph {
    graph::synth_graph(&SynthConfig {
        nodes_per_type: vec![50, 40, 30],
        ..SynthConfig::default()
    })
    .unwrap()
}

#[test]
fn write_then_load_round_trips() {
    let g = small();
    let dir = tempfile::tempdir().unwrap();
    let f = g.write_to_dir(dir.path()).unwrap();
    let back = graph::load_graph(&f.nodes, &f.edges, &f.features, f.labels.as_deref()).unwrap();
    assert_eq!(back, g);
}

#[test]
fn loader_skips_comments_and_remaps_ids() {
    let dir = tempfile::tempdir().unwrap();
    let p = |n: &str| dir.path().join(n);
    fs::write(p("n.tsv"), "# id\ttype\nalice\t0\n\nbob\t1\ncarol\t1\n").unwrap();
    fs::write(p("e.tsv"), "alice\tbob\t0\t0\nbob\tcarol\t2\t0\n").unwrap();
    fs::write(p("f.txt"), "NONE 4\n").unwrap();
    fs::write(p("l.tsv"), "carol\t1\nalice\t0\nbob\t0\n").unwrap();
    let g = graph::load_graph(&p("n.tsv"), &p("e.tsv"), &p("f.txt"), Some(&p("l.tsv"))).unwrap();
    assert_eq!(g.num_nodes(), 3);
    assert_eq!(g.relation_count(), 3);
    assert_eq!(g.num_classes(), 2);
    assert_eq!(g.links()[1], Link::undirected(1, 2, 2));
    assert_eq!(g.labels(), &[(0, 0), (1, 0), (2, 1)]);
    assert!(matches!(g.features(), Features::Featureless { dim: 4 }));
    let f = g.feature_matrix(9);
    for r in 0..3 {
        let n: f64 = f.row(r).iter().map(|x| x * x).sum();
        assert!((n - 1.0).abs() < 1e-12);
    }
}

#[test]
fn malformed_edge_line_is_a_parse_error_with_line() {
    let dir = tempfile::tempdir().unwrap();
    let p = |n: &str| dir.path().join(n);
    fs::write(p("n.tsv"), "a\t0\nb\t0\n").unwrap();
    fs::write(p("e.tsv"), "a\tb\t0\t0\n# note\na\tb\t0\t7\n").unwrap();
    fs::write(p("f.txt"), "NONE 2\n").unwrap();
    match graph::load_graph(&p("n.tsv"), &p("e.tsv"), &p("f.txt"), None) {
        Err(GraphError::Parse { line, .. }) => assert_eq!(line, 3),
        other => panic!("expected a parse error, got {other:?}"),
    }
}

#[test]
fn unknown_edge_endpoint_reports_file_and_line() {
    let dir = tempfile::tempdir().unwrap();
    let p = |n: &str| dir.path().join(n);
    fs::write(p("n.tsv"), "a\t0\nb\t0\n").unwrap();
    fs::write(p("e.tsv"), "a\tb\t0\t0\na\tzed\t0\t0\n").unwrap();
    fs::write(p("f.txt"), "NONE 2\n").unwrap();
    match graph::load_graph(&p("n.tsv"), &p("e.tsv"), &p("f.txt"), None) {
        Err(GraphError::Integrity(msg)) => assert!(msg.contains("e.tsv:2") && msg.contains("zed"), "{msg}"),
        other => panic!("expected an integrity error, got {other:?}"),
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn loader_never_panics_on_garbage(
        nodes in "[a-c0-9\t #\n-]{0,60}",
        edges in "[a-c0-9\t #\n.-]{0,60}",
        feats in "[0-9 .eNONE\n-]{0,40}",
    ) {
        let dir = tempfile::tempdir().unwrap();
        let p = |n: &str| dir.path().join(n);
        fs::write(p("n"), nodes).unwrap();
        fs::write(p("e"), edges).unwrap();
        fs::write(p("f"), feats).unwrap();
        let _ = graph::load_graph(&p("n"), &p("e"), &p("f"), None);
    }

    #[test]
    fn label_split_sizes_and_disjointness(seed in 0u64..500, per in 10usize..60) {
        let g = graph::synth_graph(&SynthConfig {
            nodes_per_type: vec![per, 10],
            seed,
            ..SynthConfig::default()
        }).unwrap();
        let spec = SplitSpec::nodes(seed);
        let s = graph::split_labels(&g, &spec).unwrap();
        let n = g.labels().len();
        prop_assert_eq!(s.valid.len(), (n as f64 * spec.valid + 1e-9).floor() as usize);
        prop_assert_eq!(s.test.len(), (n as f64 * spec.test + 1e-9).floor() as usize);
        prop_assert_eq!(s.train.len() + s.valid.len() + s.test.len(), n);
        let mut all: Vec<usize> = s.train.iter().chain(&s.valid).chain(&s.test).copied().collect();
        all.sort_unstable();
        all.dedup();
        prop_assert_eq!(all.len(), n);
        let class_of = |i: &usize| g.labels().iter().find(|&&(n, _)| n == *i).unwrap().1;
        for c in 0..g.num_classes() {
            let size = g.labels().iter().filter(|&&(_, k)| k == c).count() as f64;
            let train = s.train.iter().filter(|i| class_of(i) == c).count() as f64;
            prop_assert!(train + 2.0 >= size * spec.train, "class {} has {} of {} in train", c, train, size);
        }
    }

    #[test]
    fn attack_preserves_the_original_links_as_a_prefix(ratio in 0.0f64..=1.0, seed in 0u64..100) {
        let g = small();
        let a = graph::add_random_edges(&g, ratio, seed).unwrap();
        let k = g.num_messages();
        prop_assert_eq!(&a.links()[..g.links().len()], g.links());
        prop_assert_eq!(a.num_messages(), k + 2 * ((ratio * k as f64 / 2.0 + 1e-9).floor() as usize));
        prop_assert_eq!(a.labels(), g.labels());
    }
}

#[test]
fn edge_split_holds_out_valid_and_test() {
    let g = small();
    let s = graph::split_edges(&g, &SplitSpec::edges(3)).unwrap();
    let n = g.links().len();
    assert_eq!(s.valid.len(), (n as f64 * 0.05 + 1e-9).floor() as usize);
    assert_eq!(s.test.len(), (n as f64 * 0.6 + 1e-9).floor() as usize);
    assert_eq!(s.train_graph.links().len(), n - s.valid.len() - s.test.len());
    assert_eq!(s.train.len() + s.valid.len() + s.test.len(), n - (n as f64 * 0.1 + 1e-9).floor() as usize);
}

#[test]
fn sparse_relation_is_a_split_error() {
    let links: Vec<Link> = (0..30).map(|i| Link::undirected(i % 10, (i + 1) % 10, usize::from(i == 0))).collect();
    let g = HeteroGraph::new(vec![0; 10], links, 2, Features::Dense(Matrix::zeros(10, 2)), vec![], 0).unwrap();
    assert!(matches!(graph::split_edges(&g, &SplitSpec::edges(0)), Err(GraphError::Split(_))));
}

#[test]
fn homophilous_features_are_linearly_separable() {
    use grugraph::training::{self, Task, TaskData, TrainConfig};
    let g = graph::synth_graph(&SynthConfig {
        homophily: 1.0,
        class_separation: 3.0,
        ..SynthConfig::default()
    })
    .unwrap();
    let data = TaskData::prepare(&g, Task::NodeClassification, 0).unwrap();
    // a one-layer RGCN with zeroed relation weights is a linear probe
    let cfg = TrainConfig {
        lr: 0.05,
        hidden_dim: 4,
        ..TrainConfig::default()
    };
    let mut model = data.build_model(&cfg);
    let r = g.relation_count();
    let mut probe = model.clone();
    for (i, p) in probe.params_mut().into_iter().enumerate() {
        if i < r {
            p.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
    }
    model = probe;
    let objective = data.train_objective(1, 0).unwrap();
    let mut adam = training::Adam::for_model(&model, cfg.lr);
    for _ in 0..300 {
        let mut tape = grugraph::Tape::new();
        let f = tape.constant(data.features().clone());
        let fwd = model.forward(&mut tape, f, data.index(), &mut grugraph::backbone::NoHooks, true).unwrap();
        let loss = objective.loss(&mut tape, fwd.output).unwrap();
        tape.backward(loss).unwrap();
        let mut grads: Vec<Matrix> = fwd.params.iter().map(|&v| tape.grad(v).unwrap().clone()).collect();
        for g in grads.iter_mut().take(r) {
            g.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        adam.step(model.params_mut(), &grads).unwrap();
    }
    let acc = data.evaluate(&model, training::EvalSplit::Train).unwrap().micro_f1.unwrap();
    assert!(acc >= 0.95, "train accuracy {acc}");
}
