//! Generates a three-type heterogeneous graph, writes it in the loader's
//! tab-separated format, reads it back and splits it for both tasks.

use grugraph::graph::{self, SplitSpec, SynthConfig};

fn main() -> grugraph::Result<()> {
    let cfg = SynthConfig {
        nodes_per_type: vec![120, 80, 100],
        homophily: 0.85,
        ..SynthConfig::default()
    };
    let g = graph::synth_graph(&cfg)?;
    println!(
        "{} nodes, {} links, {} directed messages, {} relations, {} classes, {} labelled nodes",
        g.num_nodes(),
        g.links().len(),
        g.num_messages(),
        g.relation_count(),
        g.num_classes(),
        g.labels().len()
    );

    let dir = std::env::temp_dir().join("grugraph-synthetic-example");
    std::fs::create_dir_all(&dir).map_err(|e| grugraph::Error::Config(e.to_string()))?;
    let files = g.write_to_dir(&dir)?;
    let reloaded = graph::load_graph(&files.nodes, &files.edges, &files.features, files.labels.as_deref())?;
    println!("reloaded from {}: same graph = {}", dir.display(), reloaded == g);

    let nodes = graph::split_labels(&g, &SplitSpec::nodes(0))?;
    println!(
        "node split train/valid/test = {}/{}/{}",
        nodes.train.len(),
        nodes.valid.len(),
        nodes.test.len()
    );
    let links = graph::split_edges(&g, &SplitSpec::edges(0))?;
    println!(
        "link split train/valid/test = {}/{}/{} (message graph keeps {} links)",
        links.train.len(),
        links.valid.len(),
        links.test.len(),
        links.train_graph.links().len()
    );

    let attacked = graph::add_random_edges(&g, 0.3, 1)?;
    println!("after a 0.3 random-edge attack: {} links", attacked.links().len());
    Ok(())
}
