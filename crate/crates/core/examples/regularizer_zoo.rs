//! Every regularizer on the same split and initialization.

use grugraph::graph::{self, SynthConfig};
use grugraph::training::{self, Task, TaskData, TrainConfig};
use grugraph::{GradRegConfig, Method};

fn main() -> grugraph::Result<()> {
    let g = graph::synth_graph(&SynthConfig {
        nodes_per_type: vec![100, 100, 100],
        noise: 1.5,
        ..SynthConfig::default()
    })?;
    let data = TaskData::prepare(&g, Task::NodeClassification, 1)?;
    println!("{:<12} {:>9} {:>10} {:>10}", "method", "micro-F1", "last loss", "grad l2");
    for method in Method::ALL {
        let cfg = TrainConfig {
            seed: 1,
            lr: 0.01,
            epochs: 100,
            layers: 2,
            hidden_dim: 16,
            regularizer: GradRegConfig {
                drop_rate: 0.2,
                alpha: 0.1,
                beta: 0.01,
                ..GradRegConfig::new(method)
            },
            ..TrainConfig::default()
        };
        let out = training::train(data.build_model(&cfg), &data, &cfg)?;
        let last = out.trace.last().expect("at least one epoch");
        println!(
            "{:<12} {:>9.2} {:>10.4} {:>10.4}",
            method.name(),
            100.0 * out.test.micro_f1.unwrap_or(f64::NAN),
            last.train_loss,
            last.grad_l2
        );
    }
    Ok(())
}
