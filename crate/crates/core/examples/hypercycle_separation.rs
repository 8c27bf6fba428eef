//! Trains HCNet and HRNet on the HyperCycle grid and prints held-out
//! pairwise accuracy. HCNet separates opposite points from 2-hop
//! neighbours; HRNet cannot and sits at one half.
//!
//! cargo run --release --example hypercycle_separation -- [epochs] [seeds]

use hcnet::nn::ModelKind;
use hcnet::synth;
use hcnet::train::TrainConfig;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let epochs: usize = args.next().map(|a| a.parse()).transpose()?.unwrap_or(100);
    let seeds: u64 = args.next().map(|a| a.parse()).transpose()?.unwrap_or(3);
    for model in [ModelKind::Hcnet, ModelKind::Hrnet] {
        let config = TrainConfig {
            epochs,
            ..TrainConfig::hypercycle(model)
        };
        let mut mean = 0.0;
        for seed in 0..seeds {
            let start = std::time::Instant::now();
            let run = synth::run_suite_experiment(&config, seed)?;
            println!(
                "{:?} seed {seed}: train {:.3} test {:.3} loss {:.4} ({:.1}s)",
                model,
                run.train_accuracy,
                run.test_accuracy,
                run.final_loss,
                start.elapsed().as_secs_f64()
            );
            mean += run.test_accuracy / seeds as f64;
        }
        println!("{model:?} mean test accuracy {mean:.3}");
    }
    Ok(())
}
