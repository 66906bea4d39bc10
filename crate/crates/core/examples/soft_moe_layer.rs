//! One Soft MoE layer on random tokens: routing weights, their marginals,
//! and the output shape.

use softmoe::soft_moe::{forward, SoftMoeParams, SoftMoeShape};
use softmoe::{ParamStore, Rng};

fn main() -> softmoe::Result<()> {
    let mut rng = Rng::new(7);
    let mut store = ParamStore::new();
    let shape = SoftMoeShape {
        d: 16,
        d_mlp: 64,
        experts: 4,
        slots_per_expert: 2,
        normalize: true,
    };
    let layer = SoftMoeParams::new(&mut store, "moe", shape, &mut rng)?;
    let x = rng.normal_tensor(&[12, 16], 1.0);
    let (y, w) = forward(&store, &layer, &x)?;

    println!("tokens {:?} -> outputs {:?}", x.dims(), y.dims());
    println!("{} experts × {} slots each", layer.num_experts(), layer.slots_per_expert);
    for j in 0..w.dispatch.cols() {
        let col = w.dispatch.column(j);
        let max = col.iter().copied().fold(0.0, f64::max);
        println!(
            "slot {j} (expert {}): dispatch sums to {:.12}, largest weight {max:.3}",
            j / layer.slots_per_expert,
            col.iter().sum::<f64>()
        );
    }
    for i in 0..3 {
        println!("token {i}: combine row sums to {:.12}", w.combine.row(i).iter().sum::<f64>());
    }
    Ok(())
}
