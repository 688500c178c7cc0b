//! Runs a generator combination, concatenates the pyramids into boosted
//! channels and refines them with channel and spatial attention.

use cbhvt::exploitation::{align_and_concat, Exploiter};
use cbhvt::generators::{build_combo, generator_combo, run_combo, Profile};
use cbhvt::Ctx;
use cbhvt_tensor::{Array, Builder, ParamStore, Tensor};

fn main() -> cbhvt::Result<()> {
    let name = std::env::args().nth(1).unwrap_or_else(|| "Channel Generator-2".into());
    let combo = generator_combo(&name, Profile::Desk)?;
    let store = ParamStore::new();
    let b = Builder::new(&store, 3);
    let members = build_combo(&combo, &b.sub("generators"))?;
    let image = Tensor::constant(Array::from_fn([3, 128, 128], |i| ((i * 13) % 29) as f64 / 29.0 - 0.5));
    let ctx = Ctx::eval().probed();

    let pyramids = run_combo(&members, &image, &ctx)?;
    let names: Vec<String> = members.iter().map(|g| g.name().to_string()).collect();
    let boosted = align_and_concat(&pyramids, &names)?;
    let exploiter = Exploiter::new(&b.sub("exploit"), &boosted.channels(), 4)?;
    let refined = exploiter.exploit(&boosted, &ctx)?;

    println!("{name}: boosted channels per stage {:?}", refined.channels());
    for (spans, level) in refined.source_channel_spans.iter().zip(&refined.levels) {
        let parts: Vec<String> = spans.iter().map(|(n, r)| format!("{n}[{}..{})", r.start, r.end)).collect();
        println!("  stride {:>2}: {}", level.stride, parts.join(" "));
    }
    let probe = ctx.probe().expect("probed context");
    println!(
        "{} gates in [{:.3e}, {:.6}], {} softmax rows, worst row-sum error {:.1e}",
        probe.gate_count, probe.gate_min, probe.gate_max, probe.softmax_rows, probe.softmax_max_deviation
    );
    Ok(())
}
