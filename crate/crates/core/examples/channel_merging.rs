//! Compresses boosted channels with each merger preset and builds the
//! feature pyramid on top.

use cbhvt::generators::FeatureMap;
use cbhvt::merging::{merger_presets, FusionBlock, Fpn};
use cbhvt::Ctx;
use cbhvt_tensor::{Array, Builder, ParamStore, Tensor};

fn main() -> cbhvt::Result<()> {
    let boosted = [48, 96, 192, 384];
    let c_fpn = 16;
    let levels: Vec<FeatureMap> = boosted
        .iter()
        .enumerate()
        .map(|(i, &c)| FeatureMap {
            tensor: Tensor::constant(Array::from_fn([c, 32 >> i, 32 >> i], |k| ((k * 7) % 11) as f64 / 11.0)),
            stride: 4 << i,
        })
        .collect();
    for (name, preset) in merger_presets() {
        let store = ParamStore::new();
        let b = Builder::new(&store, 1);
        let mut fused = Vec::new();
        for (i, level) in levels.iter().enumerate() {
            let spec = preset.spec(level.channels(), c_fpn);
            if i == 3 {
                println!("{name}: stage-4 layers (kernel, width) {:?}", spec.layers);
            }
            fused.push(FusionBlock::new(&b.sub(format!("fusion{i}")), level.channels(), &spec)?.forward(level, &Ctx::eval())?);
        }
        let fpn = Fpn::new(&b.sub("fpn"), &vec![c_fpn; 4], c_fpn)?;
        let out = fpn.forward(&fused)?;
        let shapes: Vec<String> = out.iter().map(|l| format!("{}x{}x{}", l.channels(), l.size().0, l.size().1)).collect();
        println!("  pyramid {}  ({} weights)", shapes.join(" "), store.weight_count());
    }
    Ok(())
}
