//! Depth sweep. Deep stacks of message-passing layers lose accuracy; the
//! perturbation-regularized models lose less.
//!
//! `cargo run --release --example oversmoothing`

use grugraph::analysis;
use grugraph::graph::{self, SynthConfig};
use grugraph::{GradRegConfig, Method, TrainConfig};

fn main() -> grugraph::Result<()> {
    let g = graph::synth_graph(&SynthConfig {
        feature_dim: 32,
        ..SynthConfig::default()
    })?;
    let base = TrainConfig {
        lr: 0.01,
        hidden_dim: 16,
        regularizer: GradRegConfig::grug(0.35, 0.01),
        ..TrainConfig::default()
    };
    let result = analysis::oversmoothing_sweep(&g, &[Method::Clean, Method::Grug], &[1, 2, 4, 6], 3, &base, 1)?;
    for row in &result.rows {
        println!(
            "depth {} {:<6} {:.2} ± {:.2}",
            row.value,
            row.method.name(),
            100.0 * row.mean,
            100.0 * row.std
        );
    }
    Ok(())
}
