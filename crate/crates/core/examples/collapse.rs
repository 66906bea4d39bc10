//! Mean largest dispatch weight as the width grows, with and without
//! normalized logits, for both slot-parameter inits.

use softmoe::analysis::{collapse_experiment, CollapseConfig, ThetaInit};
use softmoe::Rng;

fn main() -> softmoe::Result<()> {
    for init in [ThetaInit::Glorot, ThetaInit::UnitNormal] {
        println!("theta init: {init}");
        for normalized in [false, true] {
            let cfg = CollapseConfig {
                dims: vec![64, 256, 1024],
                trials: 10,
                normalized,
                init,
                ..CollapseConfig::default()
            };
            let rep = collapse_experiment(&cfg, &Rng::new(0))?;
            for r in &rep.records {
                println!(
                    "  normalized={:<5} d={:<5} max dispatch {:.4}  max combine {:.4}",
                    normalized,
                    r.d,
                    r.mean_max_dispatch(),
                    r.mean_max_combine()
                );
            }
        }
    }
    Ok(())
}
