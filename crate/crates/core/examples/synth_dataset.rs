//! Generates a small synthetic dataset, writes it in the NuClick layout and
//! reads it back.
//!
//! cargo run --example synth_dataset -- [OUT_DIR]

use cbhvt::data::{load_dataset, save_dataset, split_dataset, synth_generate, DataSource, SynthConfig};

fn main() -> cbhvt::Result<()> {
    let cfg = SynthConfig {
        n_images: 12,
        images_per_group: 2,
        seed: 7,
        ..SynthConfig::default()
    };
    let samples = synth_generate(&cfg)?;
    let tmp = tempfile::tempdir().map_err(|e| cbhvt::Error::io(".", e))?;
    let root = std::env::args().nth(1).map_or_else(|| tmp.path().to_path_buf(), Into::into);
    save_dataset(&samples, &root, DataSource::Nuclick)?;
    let back = load_dataset(&root, DataSource::Nuclick)?;
    for (a, b) in back.iter().zip(&samples) {
        assert_eq!((&a.image, &a.boxes, &a.masks), (&b.image, &b.boxes, &b.masks));
    }

    for s in samples.iter().take(4) {
        let areas: Vec<usize> = s.masks.iter().map(|m| m.area()).collect();
        println!("{} group {} {}x{}: {} cells, mask areas {areas:?}", s.id, s.group, s.width(), s.height(), s.len());
    }
    let split = split_dataset(samples, [0.5, 0.25, 0.25], 1)?;
    println!(
        "wrote {} images to {}; split {}/{}/{} by group",
        back.len(),
        root.display(),
        split.train.len(),
        split.val.len(),
        split.test.len()
    );
    Ok(())
}
