//! Trains the default model on a small synthetic set, evaluates it on
//! held-out groups, plots the loss curve and reloads the checkpoint for
//! inference.
//!
//! cargo run --release --example train_and_evaluate -- [ITERATIONS] [OUT_DIR]

use cbhvt::data::{split_dataset, synth_generate, SynthConfig};
use cbhvt::harness::report::{metrics_markdown, plot_loss_curve};
use cbhvt::harness::{evaluate, infer, train_with, Model, TrainConfig};
use cbhvt::metrics::Criterion;

fn main() -> cbhvt::Result<()> {
    let mut args = std::env::args().skip(1);
    let iterations = args.next().and_then(|s| s.parse().ok()).unwrap_or(200);
    let tmp = tempfile::tempdir().map_err(|e| cbhvt::Error::io(".", e))?;
    let out = args.next().map_or_else(|| tmp.path().to_path_buf(), Into::into);
    std::fs::create_dir_all(&out).map_err(|e| cbhvt::Error::io(&out, e))?;

    let all = synth_generate(&SynthConfig {
        n_images: 24,
        images_per_group: 2,
        seed: 21,
        ..SynthConfig::default()
    })?;
    let split = split_dataset(all, [2.0 / 3.0, 0.0, 1.0 / 3.0], 5)?;
    let config = TrainConfig {
        learning_rate: 0.005,
        epochs: 1000,
        max_iterations: Some(iterations),
        seed: 3,
        ..TrainConfig::default()
    };
    let (model, record) = train_with(&config, &split.train, Some(&out), |step, _| {
        if step.iteration % 20 == 0 {
            println!("iter {:>4}  loss {:.4}", step.iteration, step.loss.total);
        }
    })?;
    plot_loss_curve(&record.losses, &out.join("loss.png"))?;
    let report = evaluate(&model, &split.test, &Criterion::default())?;
    print!("{}", metrics_markdown("held-out groups", &report));

    let reloaded = Model::load(&out.join("final.ckpt"))?;
    let dets = infer(&reloaded, &split.test[..1])?;
    println!("{}: {} detections after reload", dets[0].id, dets[0].detections.len());
    println!("artifacts in {}", out.display());
    Ok(())
}
