//! Builds every backbone of the generator table and prints its four-stage
//! pyramid for a 256x256 input.

use cbhvt::generators::{backbone_config, build_generator, Profile};
use cbhvt::Ctx;
use cbhvt_tensor::{Array, Builder, ParamStore, Tensor};

fn main() -> cbhvt::Result<()> {
    let image = Tensor::constant(Array::from_fn([3, 256, 256], |i| ((i * 37) % 101) as f64 / 101.0 - 0.5));
    for model in ["ResNet-50", "ResNet-CBAM", "ResNet-101", "ResNext", "PVT", "ConvAutoencoder"] {
        let store = ParamStore::new();
        let g = build_generator(&backbone_config(model, Profile::Desk)?, &Builder::new(&store, 1))?;
        let pyramid = g.forward(&image, &Ctx::eval())?;
        let stages: Vec<String> = pyramid
            .levels
            .iter()
            .map(|l| format!("{}x{}x{}/{}", l.channels(), l.size().0, l.size().1, l.stride))
            .collect();
        println!("{model:<16} {:>7} weights  {}", store.weight_count(), stages.join("  "));
    }
    Ok(())
}
