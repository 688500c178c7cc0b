//! Saves one backbone's weights, then builds a model that loads them and
//! keeps that member frozen during training.

use cbhvt::data::{synth_generate, SynthConfig};
use cbhvt::harness::{build_model, train, GeneratorOverride, ModelConfig, TrainConfig};

fn main() -> cbhvt::Result<()> {
    let dir = tempfile::tempdir().map_err(|e| cbhvt::Error::io(".", e))?;
    let weights = dir.path().join("pvt.ckpt");
    let donor = build_model(&ModelConfig::default(), 11)?;
    donor.generators[1].save_weights(&weights)?;

    let config = TrainConfig {
        max_iterations: Some(3),
        batch_size: 2,
        learning_rate: 0.005,
        seed: 4,
        model: ModelConfig {
            generator_overrides: vec![GeneratorOverride {
                name: "pvt".into(),
                pretrained_weights_path: Some(weights),
                freeze: None,
            }],
            ..ModelConfig::default()
        },
        ..TrainConfig::default()
    };
    let data = synth_generate(&SynthConfig {
        n_images: 4,
        image_size: 128,
        seed: 5,
        ..SynthConfig::default()
    })?;
    let (model, _) = train(&config, &data, None)?;
    for g in &model.generators {
        let params = model.store().with_prefix(g.prefix());
        let same = params
            .iter()
            .zip(donor.store().with_prefix(g.prefix()))
            .all(|(a, b)| a.value().data() == b.value().data());
        println!("{:<10} frozen {:<5} {} tensors, unchanged from donor: {same}", g.name(), g.is_frozen(), params.len());
    }
    println!("{} of {} weights trainable", model.trainable_params().iter().map(|p| p.value().len()).sum::<usize>(), model.parameter_count());
    Ok(())
}
