//! Trains and scores several generator/merger pairings on the same data
//! and seed, printing the comparison table.
//!
//! cargo run --release --example ablation_sweep -- [ITERATIONS]

use cbhvt::data::{split_dataset, synth_generate, SynthConfig};
use cbhvt::harness::report::ablation_markdown;
use cbhvt::harness::{ablate, TrainConfig};
use cbhvt::metrics::Criterion;

fn main() -> cbhvt::Result<()> {
    let iterations = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(150);
    let all = synth_generate(&SynthConfig {
        n_images: 12,
        image_size: 128,
        images_per_group: 2,
        seed: 9,
        ..SynthConfig::default()
    })?;
    let split = split_dataset(all, [0.5, 0.0, 0.5], 1)?;
    let base = TrainConfig {
        learning_rate: 0.005,
        max_iterations: Some(iterations),
        seed: 1,
        ..TrainConfig::default()
    };
    let combos: Vec<String> = (1..=3).map(|k| format!("Channel Generator-{k}")).collect();
    let mergers: Vec<String> = (1..=3).map(|k| format!("Channel Merger-{k}")).collect();
    let evals = vec![("train".to_string(), split.train.clone()), ("test".to_string(), split.test)];
    let table = ablate(&combos, &mergers, &base, &split.train, &evals, &Criterion::default())?;
    print!("{}", ablation_markdown(&table));
    Ok(())
}
