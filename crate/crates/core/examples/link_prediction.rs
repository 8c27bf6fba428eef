//! Trains HCNet on a random relational hypergraph split into train, valid
//! and test facts, then reports filtered ranking metrics on the test facts.

use hcnet::dataset::Dataset;
use hcnet::evalrank::{self, CandidateMode, FactIndex};
use hcnet::gen;
use hcnet::train::{self, TrainConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let full = gen::random_hypergraph(40, 3, 3, 160, 11);
    let facts = full.edges().to_vec();
    let (train_facts, rest) = facts.split_at(128);
    let (valid, test) = rest.split_at(16);
    let data = Dataset {
        graph: full.with_edges(train_facts.to_vec())?,
        train: train_facts.to_vec(),
        valid: valid.to_vec(),
        test: test.to_vec(),
        inference: Vec::new(),
        entity_names: (0..40).map(|i| format!("e{i}")).collect(),
    };
    let config = TrainConfig {
        dim: 16,
        layers: 3,
        epochs: 8,
        batch_size: 16,
        dropout: 0.0,
        ..TrainConfig::default()
    };
    let fit = train::fit(&data, &config, |e| {
        println!("epoch {:>2} loss {:.4} valid MRR {:.3}", e.epoch, e.loss, e.val_mrr.unwrap_or(0.0))
    })?;
    println!("best epoch {}", fit.best_epoch);

    let known = FactIndex::new(&data.all_facts());
    let (report, passes) =
        evalrank::evaluate_model(&data.graph, &data.test, &known, &fit.params, CandidateMode::Full)?;
    println!("{}", serde_json::to_string_pretty(&report)?);
    println!("{passes} forward passes for {} queries", report.overall.count);
    Ok(())
}
