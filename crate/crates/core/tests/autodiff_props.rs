use grugraph::tensor::{Aggregation, Matrix, Tape};
use proptest::prelude::*;

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Matrix> {
    prop::collection::vec(-2.0f64..2.0, rows * cols).prop_map(move |d| Matrix::from_vec(rows, cols, d).unwrap())
}

fn shapes() -> impl Strategy<Value = (usize, usize, usize)> {
    (1usize..6, 1usize..6, 2usize..5)
}

/// loss = mean CE(relu(X W1) W2 + b) over all rows
fn composite(x: &Matrix, w1: &Matrix, w2: &Matrix, labels: &[usize]) -> (f64, Vec<bool>) {
    let mut t = Tape::new();
    let xv = t.constant(x.clone());
    let a = t.constant(w1.clone());
    let b = t.constant(w2.clone());
    let h = t.matmul(xv, a).unwrap();
    let h = t.relu(h).unwrap();
    let o = t.matmul(h, b).unwrap();
    let l = t.softmax_cross_entropy(o, labels, None).unwrap();
    (t.value(l).data()[0], t.activation_signature())
}

fn rel(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-6)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn composite_gradients_match_central_differences(
        (m, n, k) in shapes(),
        seed in 0u64..1000,
    ) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut gen = |r: usize, c: usize| {
            Matrix::from_vec(r, c, (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
        };
        let (x, w1, w2) = (gen(m, n), gen(n, 4), gen(4, k));
        let labels: Vec<usize> = (0..m).map(|i| i % k).collect();

        let mut t = Tape::new();
        let xv = t.constant(x.clone());
        let a = t.leaf(w1.clone(), true);
        let b = t.leaf(w2.clone(), true);
        let h = t.matmul(xv, a).unwrap();
        let h = t.relu(h).unwrap();
        let o = t.matmul(h, b).unwrap();
        let l = t.softmax_cross_entropy(o, &labels, None).unwrap();
        t.backward(l).unwrap();
        let (g1, g2) = (t.grad(a).unwrap().clone(), t.grad(b).unwrap().clone());

        let (_, sig0) = composite(&x, &w1, &w2, &labels);
        let h = 1e-6;
        for (which, g) in [(0, &g1), (1, &g2)] {
            for i in 0..g.len() {
                let (mut p1, mut p2) = (w1.clone(), w2.clone());
                let (mut m1, mut m2) = (w1.clone(), w2.clone());
                if which == 0 { p1.data_mut()[i] += h; m1.data_mut()[i] -= h; }
                else { p2.data_mut()[i] += h; m2.data_mut()[i] -= h; }
                let (lp, sp) = composite(&x, &p1, &p2, &labels);
                let (lm, sm) = composite(&x, &m1, &m2, &labels);
                if sp != sig0 || sm != sig0 {
                    continue;
                }
                let numeric = (lp - lm) / (2.0 * h);
                prop_assert!(rel(g.data()[i], numeric) < 1e-4, "block {which} entry {i}: {} vs {numeric}", g.data()[i]);
            }
        }
    }

    #[test]
    fn matmul_by_identity_is_exact(x in (1usize..7, 1usize..7).prop_flat_map(|(r, c)| matrix(r, c))) {
        let out = x.dot(&Matrix::identity(x.cols())).unwrap();
        prop_assert_eq!(out, x);
    }

    #[test]
    fn scatter_is_the_transpose_of_gather(
        (k, p, d) in (1usize..20, 1usize..8, 1usize..5),
        seed in 0u64..1000,
    ) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let targets: Vec<usize> = (0..k).map(|_| rng.random_range(0..p)).collect();
        let m = Matrix::from_vec(k, d, (0..k * d).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let y = Matrix::from_vec(p, d, (0..p * d).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let mut t = Tape::new();
        let mv = t.constant(m.clone());
        let yv = t.constant(y.clone());
        let s = t.scatter_aggregate(mv, &targets, p, Aggregation::Sum).unwrap();
        let g = t.gather_rows(yv, &targets).unwrap();
        let lhs: f64 = t.value(s).data().iter().zip(y.data()).map(|(a, b)| a * b).sum();
        let rhs: f64 = m.data().iter().zip(t.value(g).data()).map(|(a, b)| a * b).sum();
        prop_assert!((lhs - rhs).abs() <= 1e-12 * lhs.abs().max(rhs.abs()).max(1.0));
    }

    #[test]
    fn cross_entropy_ignores_row_shifts(
        logits in (1usize..6, 2usize..5).prop_flat_map(|(r, c)| matrix(r, c)),
        shift in -50.0f64..50.0,
    ) {
        let labels: Vec<usize> = (0..logits.rows()).map(|i| i % logits.cols()).collect();
        let ce = |m: &Matrix| {
            let mut t = Tape::new();
            let v = t.constant(m.clone());
            let l = t.softmax_cross_entropy(v, &labels, None).unwrap();
            t.value(l).data()[0]
        };
        let shifted = logits.map(|v| v + shift);
        prop_assert!((ce(&logits) - ce(&shifted)).abs() < 1e-12 * ce(&logits).max(1.0));
    }
}

#[test]
fn second_backward_is_an_error() {
    let mut t = Tape::new();
    let a = t.leaf(Matrix::scalar(2.0), true);
    let b = t.mul(a, a).unwrap();
    t.backward(b).unwrap();
    assert!(t.backward(b).is_err());
}

#[test]
fn non_finite_values_are_rejected() {
    let mut t = Tape::new();
    let a = t.constant(Matrix::scalar(f64::MAX));
    assert!(t.add(a, a).is_err());
}
