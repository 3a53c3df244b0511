use grugraph::backbone::{Backbone, Model};
use grugraph::graph::{self, SplitSpec, SynthConfig};
use grugraph::regularizers::{
    apply_drop, ascend, grug_epoch, init_perturbation, AscentNorm, DropMask, GradRegConfig, Granularity, HookShapes,
    Method, PerturbationState, Regularizer,
};
use grugraph::training::{Objective, TaskData};
use grugraph::{Matrix, Tape};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn toy() -> (TaskData, Model, Objective) {
    let g = graph::synth_graph(&SynthConfig {
        nodes_per_type: vec![20, 15, 15],
        feature_dim: 5,
        seed: 3,
        ..SynthConfig::default()
    })
    .unwrap();
    let data = TaskData::node(&g, &SplitSpec::nodes(3), 3).unwrap();
    let model = Model::new(Backbone::Rgcn, 5, 6, data.output_dim(6), 2, data.index().relation_count, 4);
    let obj = data.train_objective(1, 0).unwrap();
    (data, model, obj)
}

#[test]
fn uniform_init_has_the_right_range_mean_and_variance() {
    let r = 0.3;
    let m = init_perturbation(100, 100, r, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    let n = m.data().len() as f64;
    assert!(m.data().iter().all(|v| v.abs() <= r));
    let mean = m.data().iter().sum::<f64>() / n;
    let var = m.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    let sd = r / 3f64.sqrt();
    assert!(mean.abs() < 4.0 * sd / n.sqrt(), "mean {mean}");
    assert!((var - r * r / 3.0).abs() < 0.03 * r * r / 3.0, "var {var}");
    let zero = init_perturbation(3, 4, 0.0, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    assert!(zero.data().iter().all(|&v| v == 0.0));
    assert!(init_perturbation(1, 1, -1.0, &mut ChaCha8Rng::seed_from_u64(1)).is_err());
}

#[test]
fn inverted_dropout_is_unbiased() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = Matrix::from_vec(4, 3, (0..12).map(|i| 1.0 + i as f64).collect()).unwrap();
    for gran in [Granularity::FeatureElement, Granularity::FeatureRow, Granularity::MessageElement, Granularity::MessageRow] {
        let trials = 10_000;
        let mut acc = Matrix::zeros(4, 3);
        for _ in 0..trials {
            let mask = DropMask::sample(4, 3, gran, 0.7, &mut rng).unwrap();
            let y = apply_drop(&x, &mask).unwrap();
            for (a, v) in acc.data_mut().iter_mut().zip(y.data()) {
                *a += v / trials as f64;
            }
        }
        for (a, v) in acc.data().iter().zip(x.data()) {
            assert!((a - v).abs() <= 0.02 * v, "{gran:?}: {a} vs {v}");
        }
    }
}

#[test]
fn row_masks_are_constant_along_rows() {
    let mask = DropMask::sample(50, 4, Granularity::MessageRow, 0.5, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
    for r in 0..50 {
        let row = mask.mask.row(r);
        assert!(row.iter().all(|&v| v == row[0]));
    }
    assert!(DropMask::sample(2, 2, Granularity::FeatureRow, 0.0, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
}

#[test]
fn drop_edge_keep_counts_follow_the_binomial() {
    let (data, mut model, obj) = toy();
    let mut cfg = GradRegConfig::new(Method::DropEdge);
    cfg.drop_rate = 0.5;
    let mut reg = Regularizer::new(cfg, 7).unwrap();
    reg.enable_recording();
    let trials = 1000;
    for _ in 0..trials {
        reg.epoch(&mut model, data.index(), data.features(), &obj, None).unwrap();
    }
    let masks = reg.take_recorder().unwrap().masks;
    assert_eq!(masks.len(), trials);
    let k = data.index().num_messages() as f64;
    let (mean, sd) = (0.5 * k, (k * 0.25).sqrt());
    let kept: Vec<f64> = masks
        .iter()
        .map(|m| (0..m.rows()).filter(|&r| m.row(r)[0] != 0.0).count() as f64)
        .collect();
    let inside = kept.iter().filter(|&&c| (c - mean).abs() <= 3.0 * sd).count();
    assert!(inside as f64 >= 0.99 * trials as f64, "{inside} of {trials} within 3 sigma");
    let total: f64 = kept.iter().sum();
    let total_sd = (trials as f64 * k * 0.25).sqrt();
    assert!((total - mean * trials as f64).abs() <= 3.0 * total_sd);
}

#[test]
fn one_normalized_ascent_step_increases_the_loss() {
    let (data, model, obj) = toy();
    let loss_and_grad = |x: &Matrix| {
        let mut tape = Tape::new();
        let f = tape.leaf(x.clone(), true);
        let fwd = model.forward(&mut tape, f, data.index(), &mut grugraph::backbone::NoHooks, false).unwrap();
        let l = obj.loss(&mut tape, fwd.output).unwrap();
        tape.backward(l).unwrap();
        (tape.value(l).data()[0], tape.grad(f).unwrap().clone())
    };
    for seed in 0..20 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let delta = init_perturbation(data.features().rows(), data.features().cols(), 0.05, &mut rng).unwrap();
        let mut x = data.features().clone();
        for (a, d) in x.data_mut().iter_mut().zip(delta.data()) {
            *a += d;
        }
        let (before, g) = loss_and_grad(&x);
        for norm in [AscentNorm::L2, AscentNorm::Sign] {
            let step = if norm == AscentNorm::L2 { 1e-3 } else { 1e-5 };
            let moved = ascend(&x, &g, step, norm).unwrap();
            let (after, _) = loss_and_grad(&moved);
            assert!(after > before, "seed {seed} {norm:?}: {after} <= {before}");
        }
    }
}

#[test]
fn ascent_with_a_vanishing_gradient_is_a_no_op() {
    let p = Matrix::from_vec(2, 2, vec![0.1, -0.2, 0.3, 0.0]).unwrap();
    let g = Matrix::zeros(2, 2);
    assert_eq!(ascend(&p, &g, 1.0, AscentNorm::L2).unwrap(), p);
    assert_eq!(ascend(&p, &g, 1.0, AscentNorm::Sign).unwrap(), p);
    let g = Matrix::from_vec(2, 2, vec![3.0, 0.0, 0.0, 4.0]).unwrap();
    let q = ascend(&p, &g, 0.5, AscentNorm::L2).unwrap();
    assert!((q.data()[0] - (0.1 + 0.3)).abs() < 1e-15);
    assert!((q.data()[3] - 0.4).abs() < 1e-15);
    assert!(ascend(&p, &Matrix::zeros(1, 2), 1.0, AscentNorm::L2).is_err());
}

#[test]
fn perturbations_stay_within_the_accumulated_radius() {
    let (data, mut model, obj) = toy();
    for norm in [AscentNorm::L2, AscentNorm::Sign] {
        let cfg = GradRegConfig {
            method: Method::Grug,
            alpha: 0.02,
            beta: 0.05,
            steps: 6,
            ascent: norm,
            ..GradRegConfig::default()
        };
        let mut state = PerturbationState::new(&cfg, 11).unwrap();
        for _ in 0..5 {
            grug_epoch(&mut model, data.index(), data.features(), &obj, &mut state, None, None).unwrap();
            let t = state.t as f64;
            assert_eq!(state.t, cfg.steps - 1);
            let (d, g) = state.max_abs();
            assert!(d <= (t + 1.0) * cfg.beta + 1e-15, "{norm:?}: |delta| {d}");
            assert!(g <= (t + 1.0) * cfg.alpha + 1e-15, "{norm:?}: |gamma| {g}");
            assert!(d > 0.0 && g > 0.0);
        }
    }
}

#[test]
fn each_side_draws_from_its_own_stream() {
    let (data, model, _) = toy();
    let shapes = HookShapes::of(&model, data.index(), data.features());
    let draw = |method| {
        let mut s = PerturbationState::new(&GradRegConfig { method, ..GradRegConfig::grug(0.1, 0.2) }, 5).unwrap();
        s.reinit(&shapes).unwrap();
        s
    };
    let (both, feat, msg, all) = (draw(Method::Grug), draw(Method::GrugN), draw(Method::GrugM), draw(Method::GrugT));
    assert_eq!(both.delta, feat.delta);
    assert_eq!(both.gamma, msg.gamma);
    assert_eq!(all.delta, feat.delta);
    assert_eq!(all.gamma, msg.gamma);
    assert!(feat.gamma.is_empty() && msg.delta.is_none());
    assert!(all.relation.is_some() && both.relation.is_none());
    assert_eq!(both.gamma.len(), model.layers.len());
}

#[test]
fn frozen_epochs_leave_parameters_untouched() {
    let (data, mut model, obj) = toy();
    let before: Vec<Matrix> = model.params().into_iter().cloned().collect();
    for method in Method::ALL {
        let mut reg = Regularizer::new(GradRegConfig::new(method), 1).unwrap();
        reg.epoch(&mut model, data.index(), data.features(), &obj, None).unwrap();
    }
    let after: Vec<Matrix> = model.params().into_iter().cloned().collect();
    assert_eq!(before, after);
}

#[test]
fn zero_radius_single_pass_matches_clean_training() {
    let (data, model, obj) = toy();
    let run = |cfg: GradRegConfig| {
        let mut m = model.clone();
        let mut adam = grugraph::training::Adam::for_model(&m, 0.01);
        let mut reg = Regularizer::new(cfg, 9).unwrap();
        let losses: Vec<f64> = (0..10)
            .map(|_| reg.epoch(&mut m, data.index(), data.features(), &obj, Some(&mut adam)).unwrap().loss)
            .collect();
        (losses, m.params().into_iter().cloned().collect::<Vec<_>>())
    };
    let clean = run(GradRegConfig::new(Method::Clean));
    for method in [Method::Grug, Method::GrugT, Method::GrugM, Method::GrugN, Method::Flag] {
        let cfg = GradRegConfig {
            method,
            alpha: 0.0,
            beta: 0.0,
            edge_eps: 0.0,
            steps: 1,
            ..GradRegConfig::default()
        };
        assert_eq!(run(cfg), clean, "{method:?}");
    }
}
