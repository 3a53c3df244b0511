//! Node classification on a synthetic graph: an unregularized RGCN next to
//! the same model trained with Grug, over a few seeds.

use grugraph::graph::{self, SynthConfig};
use grugraph::training::{self, Task, TaskData, TrainConfig};
use grugraph::{GradRegConfig, Method};

fn main() -> grugraph::Result<()> {
    let g = graph::synth_graph(&SynthConfig {
        feature_dim: 32,
        ..SynthConfig::default()
    })?;
    println!("seed  method  micro-F1  macro-F1");
    for seed in 0..3 {
        let data = TaskData::prepare(&g, Task::NodeClassification, seed)?;
        for reg in [GradRegConfig::new(Method::Clean), GradRegConfig::grug(0.35, 0.01)] {
            let cfg = TrainConfig {
                seed,
                layers: 2,
                regularizer: reg,
                ..TrainConfig::default()
            };
            let out = training::train(data.build_model(&cfg), &data, &cfg)?;
            println!(
                "{seed:>4}  {:<6}  {:>8.2}  {:>8.2}",
                cfg.regularizer.method.name(),
                100.0 * out.test.micro_f1.unwrap_or(f64::NAN),
                100.0 * out.test.macro_f1.unwrap_or(f64::NAN)
            );
        }
    }
    Ok(())
}
