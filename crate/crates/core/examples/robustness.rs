//! Random edge addition at increasing ratios, clean training vs Grug.

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
    let ratios = [0.0, 0.2, 0.4];
    let result = analysis::robustness_sweep(&g, &[Method::Clean, Method::Grug], &ratios, 3, &base, 1)?;
    for m in [Method::Clean, Method::Grug] {
        let line: Vec<String> = ratios
            .iter()
            .map(|&r| format!("{:.2}", 100.0 * result.row(r, m).map_or(f64::NAN, |x| x.mean)))
            .collect();
        println!("{:<6} {}", m.name(), line.join("  "));
    }
    Ok(())
}
