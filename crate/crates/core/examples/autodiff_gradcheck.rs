//! Builds a tiny expression on the tape, backpropagates, and compares the
//! result against central differences. Then runs the same comparison on a
//! one-layer RGCN for parameters, features and message matrices.

use grugraph::oracle::{self, GradTarget};
use grugraph::{Matrix, Tape};

fn loss_of(x: &Matrix, w: &Matrix) -> f64 {
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let wv = tape.leaf(w.clone(), true);
    let h = tape.matmul(xv, wv).unwrap();
    let h = tape.sigmoid(h).unwrap();
    let out = tape.sum_all(h).unwrap();
    tape.value(out).data()[0]
}

fn main() -> grugraph::Result<()> {
    let x = Matrix::from_rows(&[[0.5, -1.0, 2.0], [1.5, 0.25, -0.75]]);
    let w = Matrix::from_rows(&[[0.1, 0.2], [-0.3, 0.4], [0.05, -0.6]]);

    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let wv = tape.leaf(w.clone(), true);
    let h = tape.matmul(xv, wv)?;
    let h = tape.sigmoid(h)?;
    let out = tape.sum_all(h)?;
    tape.backward(out)?;
    let grad = tape.grad(wv).expect("w requires grad").clone();

    let step = 1e-6;
    println!("entry     autodiff        finite-diff");
    for r in 0..w.rows() {
        for c in 0..w.cols() {
            let (mut up, mut down) = (w.clone(), w.clone());
            up.set(r, c, w.get(r, c) + step);
            down.set(r, c, w.get(r, c) - step);
            let numeric = (loss_of(&x, &up) - loss_of(&x, &down)) / (2.0 * step);
            println!("w[{r},{c}]   {:+.10}  {:+.10}", grad.get(r, c), numeric);
        }
    }

    let data = oracle::verification_graph(7)?;
    let objective = data.train_objective(1, 7)?;
    for backbone in [grugraph::Backbone::Rgcn, grugraph::Backbone::Rgat] {
        let model = grugraph::Model::new(
            backbone,
            data.features().cols(),
            8,
            data.output_dim(8),
            1,
            data.message_graph().relation_count(),
            7,
        );
        for target in [GradTarget::Params, GradTarget::Features, GradTarget::Messages] {
            let check = oracle::finite_diff_check(&model, data.index(), data.features(), &objective, target, 100, 7)?;
            println!(
                "{backbone:?} {target:?}: max relative error {:.2e} over {} coordinates",
                check.max_rel_error, check.samples
            );
        }
    }
    Ok(())
}
