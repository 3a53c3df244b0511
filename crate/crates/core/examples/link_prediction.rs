//! Link prediction: held-out links are scored by the dot product of the
//! two endpoint embeddings and ranked against sampled non-links.

use grugraph::graph::{self, SynthConfig};
use grugraph::training::{self, Task, TaskData, TrainConfig};
use grugraph::{GradRegConfig, Method};

fn main() -> grugraph::Result<()> {
    let g = graph::synth_graph(&SynthConfig {
        nodes_per_type: vec![150, 150, 150],
        avg_degree: 6.0,
        noise: 0.3,
        ..SynthConfig::default()
    })?;
    let data = TaskData::prepare(&g, Task::LinkPrediction, 0)?;
    for method in [Method::Clean, Method::DropEdge, Method::Grug] {
        let cfg = TrainConfig {
            task: Task::LinkPrediction,
            epochs: 100,
            lr: 0.01,
            hidden_dim: 16,
            regularizer: GradRegConfig::new(method),
            ..TrainConfig::default()
        };
        let out = training::train(data.build_model(&cfg), &data, &cfg)?;
        println!(
            "{:<10} valid AUC {:.4}  test AUC {:.4}",
            method.name(),
            out.valid.auc_roc.unwrap_or(f64::NAN),
            out.test.auc_roc.unwrap_or(f64::NAN)
        );
    }
    Ok(())
}
