//! Library-level flows across modules: dataset files on disk through
//! training, checkpointing and evaluation.

use hcnet::dataset::{self, Dataset};
use hcnet::evalrank::{self, CandidateMode, FactIndex};
use hcnet::gen;
use hcnet::hypergraph::HyperEdge;
use hcnet::nn::{self, CheckpointMeta, ModelKind};
use hcnet::train::{self, TrainConfig};

fn split_dataset(seed: u64) -> Dataset {
    let full = gen::random_hypergraph(25, 3, 3, 90, seed);
    let mut facts: Vec<HyperEdge> = full.edges().to_vec();
    facts.sort();
    facts.dedup();
    let test = facts.split_off(facts.len() - 8);
    let valid = facts.split_off(facts.len() - 8);
    Dataset {
        graph: full.with_edges(facts.clone()).unwrap(),
        train: facts,
        valid,
        test,
        inference: Vec::new(),
        entity_names: (0..25).map(|i| format!("n{i}")).collect(),
    }
}

fn small(model: ModelKind) -> TrainConfig {
    let message = match model {
        ModelKind::Hcnet => nn::MessageMode::QueryDependent,
        ModelKind::Hrnet => nn::MessageMode::QueryIndependent,
    };
    TrainConfig {
        model,
        message,
        dim: 8,
        layers: 2,
        epochs: 2,
        batch_size: 8,
        negatives: 4,
        ..TrainConfig::default()
    }
}

#[test]
fn disk_round_trip_preserves_evaluation() {
    let data = split_dataset(1);
    let dir = tempfile::tempdir().unwrap();
    dataset::write_dataset(dir.path(), &data).unwrap();
    let loaded = dataset::load_dataset(dir.path()).unwrap();
    assert_eq!(loaded.train.len(), data.train.len());

    let config = small(ModelKind::Hcnet);
    let fit = train::fit(&loaded, &config, |_| {}).unwrap();
    let ckpt = dir.path().join("m.ckpt");
    let meta = CheckpointMeta {
        seed: config.seed,
        relations: loaded.relation_names(),
        echo: serde_json::to_value(&config).unwrap(),
    };
    nn::save_checkpoint(&ckpt, &fit.params, &meta).unwrap();
    let (params, meta) = nn::load_checkpoint(&ckpt).unwrap();
    let again = dataset::load_dataset_with_relations(dir.path(), Some(&meta.relations)).unwrap();
    let known = FactIndex::new(&again.all_facts());
    let (a, _) = evalrank::evaluate_model(&again.graph, &again.test, &known, &params, CandidateMode::Full).unwrap();
    let (b, _) = evalrank::evaluate_model(&again.graph, &again.test, &known, &params, CandidateMode::Full).unwrap();
    assert_eq!(a, b);
    let echoed: TrainConfig = serde_json::from_value(meta.echo).unwrap();
    assert_eq!(echoed, config);
}

#[test]
fn both_models_train_and_count_forward_passes() {
    let data = split_dataset(2);
    let known = FactIndex::new(&data.all_facts());
    for model in [ModelKind::Hcnet, ModelKind::Hrnet] {
        let fit = train::fit(&data, &small(model), |_| {}).unwrap();
        assert!(fit.log.iter().all(|l| l.loss.is_finite()));
        let (report, passes) =
            evalrank::evaluate_model(&data.graph, &data.test, &known, &fit.params, CandidateMode::Full).unwrap();
        let queries: usize = data.test.iter().map(|f| f.arity()).sum();
        assert_eq!(report.overall.count, queries);
        let expected = if model == ModelKind::Hcnet { queries } else { 1 };
        assert_eq!(passes, expected);
        assert!(report.overall.hits1 <= report.overall.hits3 && report.overall.hits3 <= report.overall.hits10);
    }
}

#[test]
fn sampled_evaluation_bounds_candidates() {
    let data = split_dataset(3);
    let fit = train::fit(&data, &TrainConfig { epochs: 0, ..small(ModelKind::Hcnet) }, |_| {}).unwrap();
    let known = FactIndex::new(&data.all_facts());
    let mode = CandidateMode::Sampled { negatives: 5, seed: 1 };
    let (outcomes, _) = evalrank::evaluate_with_scorer(25, &data.test, &known, mode, |q| {
        let (h, _) = nn::hcnet_forward(&data.graph, q, &fit.params, 2)?;
        Ok(nn::score_candidates(&fit.params, &h, q)?)
    })
    .unwrap();
    assert!(outcomes.iter().all(|o| o.candidates <= 6 && o.rank >= 1.0 && o.rank <= o.candidates as f64));
}
