//! Which matrices to perturb: features only, relation weights only,
//! messages only, all three, or features plus messages.

use grugraph::analysis;
use grugraph::graph::{self, SynthConfig};
use grugraph::{GradRegConfig, TrainConfig};

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
    let ab = analysis::ablation_grid(&g, 3, &base, 1)?;
    for row in &ab.sweep.rows {
        println!("{:<7} {:.2} ± {:.2}", row.method.name(), 100.0 * row.mean, 100.0 * row.std);
    }
    println!("GAP     {:+.2} ± {:.2}", 100.0 * ab.gap_mean, 100.0 * ab.gap_std);
    Ok(())
}
