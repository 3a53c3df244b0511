//! Runs the verification checks and prints the variance probe and the
//! Taylor estimates they rest on.

use grugraph::analysis;
use grugraph::oracle::{self, NormKind, Side};
use grugraph::{GradRegConfig, TrainConfig};

fn main() -> grugraph::Result<()> {
    let data = oracle::verification_graph(0)?;

    let cfg = TrainConfig {
        epochs: 200,
        lr: 0.01,
        layers: 2,
        hidden_dim: 8,
        regularizer: GradRegConfig::grug(0.35, 0.01),
        ..TrainConfig::default()
    };
    let (_, recorder) = analysis::recorded_run(&data, &cfg)?;
    let v = analysis::variance_probe(&recorder)?;
    println!(
        "increment variances over {} samples: delta {:.3e} (beta^2 = {:.1e}), gamma {:.3e} (alpha^2 = {:.3e})",
        v.samples, v.v_delta, 1e-4, v.v_gamma, 0.35f64 * 0.35
    );

    let model = oracle::trained_toy_model(&data, 0)?;
    let objective = data.train_objective(1, 0)?;
    for side in [Side::Features, Side::Messages] {
        for kind in [NormKind::L2, NormKind::L1] {
            if let Some(t) = oracle::taylor_perturbation_check(&model, data.index(), data.features(), &objective, side, 1e-4, kind)? {
                println!(
                    "{side:?} {kind:?}: predicted {:.4e} observed {:.4e} (rel. error {:.1e})",
                    t.predicted_delta_loss, t.observed_delta_loss, t.rel_error
                );
            }
        }
    }

    let records = oracle::verify_suite(0)?;
    let failed = records.iter().filter(|r| !r.passed).count();
    println!("{}", oracle::records_json(&records)?);
    println!("{} checks, {failed} failed", records.len());
    Ok(())
}
