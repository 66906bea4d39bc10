//! Per-image GFLOPs of the standard backbones at 224 px.

use softmoe::analysis::flop_estimate;
use softmoe::model::EncoderConfig;

fn main() -> softmoe::Result<()> {
    println!("{:<18} {:>10} {:>10} {:>10}", "model", "GFLOP", "mlp/moe", "routing");
    for name in EncoderConfig::PRESETS.iter().filter(|n| **n != "desk") {
        let cfg = EncoderConfig::preset(name).expect("known preset");
        let c = flop_estimate(&cfg, 224)?;
        println!(
            "{:<18} {:>10.2} {:>10.2} {:>10.2}",
            name,
            c.gflops(),
            (c.mlp + c.moe_experts) / 1e9,
            c.routing / 1e9
        );
    }
    for size in ["b16", "l16"] {
        let dense = flop_estimate(&EncoderConfig::preset(&format!("vit-{size}")).unwrap(), 224)?;
        let moe = flop_estimate(&EncoderConfig::preset(&format!("softmoe-{size}-128e")).unwrap(), 224)?;
        println!("softmoe/vit {size}: {:.3}", moe.total() / dense.total());
    }
    Ok(())
}
