//! Checks the hand-written backward pass against central differences, then
//! saves the parameters to a checkpoint and reloads them.

use hcnet::gen;
use hcnet::nn::{self, CheckpointMeta, ModelConfig, ModelParams};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let g = gen::random_hypergraph(8, 2, 3, 12, 3);
    let q = gen::random_query(&g, 4);
    let config = ModelConfig::hcnet(2, 3, 6, 2);
    let mut params = ModelParams::init(&config, 0)?;
    params.randomize(&mut gen::rng(1), 0.8);

    let report = nn::grad_check(&g, &q, &params, 1e-5, None, 0)?;
    println!(
        "{} entries checked, max relative error {:.2e} in {}",
        report.checked, report.max_rel_error, report.worst_tensor
    );

    let path = std::env::temp_dir().join("hcnet-example.ckpt");
    let meta = CheckpointMeta {
        seed: 0,
        relations: vec!["r0".into(), "r1".into()],
        echo: serde_json::json!({ "note": "example" }),
    };
    nn::save_checkpoint(&path, &params, &meta)?;
    let (loaded, _) = nn::load_checkpoint(&path)?;
    let (h, _) = nn::hcnet_forward(&g, &q, &params, 2)?;
    let (h2, _) = nn::hcnet_forward(&g, &q, &loaded, 2)?;
    let a = nn::score_candidates(&params, &h, &q)?;
    let b = nn::score_candidates(&loaded, &h2, &q)?;
    let drift = a.iter().zip(&b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    println!("{} parameters, score drift after f32 storage {drift:.2e}", params.num_parameters());
    std::fs::remove_file(&path)?;
    Ok(())
}
