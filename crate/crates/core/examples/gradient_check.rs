//! Backprop through a Soft MoE layer against central differences.

use softmoe::gradcheck::{finite_diff_grad, max_relative_error, DEFAULT_STEP};
use softmoe::soft_moe::{forward_graph, SoftMoeParams, SoftMoeShape};
use softmoe::variants::VariantKind;
use softmoe::{Graph, ParamStore, Rng, Tensor};

fn loss(store: &ParamStore, layer: &SoftMoeParams, x: &Tensor, w: &Tensor) -> softmoe::Result<f64> {
    let mut g = Graph::new();
    let b = store.bind(&mut g);
    let xv = g.leaf(x.clone());
    let wv = g.leaf(w.clone());
    let out = forward_graph(&mut g, &b, layer, xv, VariantKind::Soft)?;
    let p = g.mul(out.y, wv)?;
    let s = g.sum(p)?;
    Ok(g.value(s).item())
}

fn main() -> softmoe::Result<()> {
    let mut rng = Rng::new(5);
    for normalize in [false, true] {
        let mut store = ParamStore::new();
        let shape = SoftMoeShape {
            d: 4,
            d_mlp: 6,
            experts: 3,
            slots_per_expert: 2,
            normalize,
        };
        let layer = SoftMoeParams::new(&mut store, "moe", shape, &mut rng)?;
        let x = rng.normal_tensor(&[5, 4], 1.0);
        let w = rng.normal_tensor(&[5, 4], 1.0);

        let mut g = Graph::new();
        let b = store.bind(&mut g);
        let xv = g.leaf(x.clone());
        let wv = g.leaf(w.clone());
        let out = forward_graph(&mut g, &b, &layer, xv, VariantKind::Soft)?;
        let p = g.mul(out.y, wv)?;
        let s = g.sum(p)?;
        let grads = g.backward(s)?;

        let num = finite_diff_grad(|xp| loss(&store, &layer, xp, &w), &x, DEFAULT_STEP)?;
        let err_x = max_relative_error(&grads.get_or_zeros(&g, xv), &num, 1e-6);
        let phi = store.get(layer.phi).clone();
        let num_phi = finite_diff_grad(
            |pp| {
                let mut s2 = store.clone();
                s2.set(layer.phi, pp.clone())?;
                loss(&s2, &layer, &x, &w)
            },
            &phi,
            DEFAULT_STEP,
        )?;
        let err_phi = max_relative_error(&grads.get_or_zeros(&g, b[layer.phi]), &num_phi, 1e-6);
        println!("normalize={normalize}: max relative error dX {err_x:.2e}, dPhi {err_phi:.2e}");
    }
    Ok(())
}
