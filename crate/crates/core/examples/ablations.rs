//! Every fixed-routing ablation on the same layer and tokens.

use softmoe::soft_moe::{SoftMoeParams, SoftMoeShape};
use softmoe::variants::{variant_forward, VariantKind};
use softmoe::{ParamStore, Rng};

fn main() -> softmoe::Result<()> {
    let mut rng = Rng::new(11);
    let mut store = ParamStore::new();
    let shape = SoftMoeShape {
        d: 8,
        d_mlp: 32,
        experts: 4,
        slots_per_expert: 2,
        normalize: true,
    };
    let layer = SoftMoeParams::new(&mut store, "moe", shape, &mut rng)?;
    // identity routing needs as many tokens as slots
    let x = rng.normal_tensor(&[8, 8], 1.0);
    let (soft, _) = variant_forward(&store, &layer, &x, VariantKind::Soft)?;
    for kind in VariantKind::ALL {
        let (y, w) = variant_forward(&store, &layer, &x, kind)?;
        let spread = (1..y.rows())
            .flat_map(|i| (0..y.cols()).map(move |j| (i, j)))
            .map(|(i, j)| (y.at(i, j) - y.at(0, j)).abs())
            .fold(0.0, f64::max);
        println!(
            "{:<13} max|y − y_soft| {:.4}  row spread {:.2e}  max dispatch {:.3}",
            kind.name(),
            y.max_abs_diff(&soft),
            spread,
            w.dispatch.data().iter().copied().fold(0.0, f64::max)
        );
    }
    Ok(())
}
