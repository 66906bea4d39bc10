//! Trains briefly, saves a checkpoint, reloads it and summarizes the
//! routing weights and slot geometry of its Soft MoE layer.

use softmoe::analysis::{cumulative_weight_curves, slot_correlation, token_contribution, Orientation};
use softmoe::model::{build_encoder, checkpoint, train, EncoderConfig, MoeConfig, SynthTask, TrainHyper, TrainState};
use softmoe::Rng;

fn main() -> softmoe::Result<()> {
    let cfg = EncoderConfig {
        image_size: 8,
        channels: 1,
        patch_size: 2,
        depth: 2,
        width: 16,
        heads: 2,
        mlp_dim: 32,
        num_classes: 4,
        moe: MoeConfig {
            layers: vec![1],
            experts: 4,
            slots_per_expert: 2,
            ..MoeConfig::default()
        },
    };
    let task = SynthTask {
        seed: 1,
        classes: 4,
        image_size: 8,
        channels: 1,
        noise: 1.0,
    };
    let (encoder, params) = build_encoder(&cfg, &mut Rng::new(1))?;
    let mut state = TrainState::new(params, Rng::new(2));
    let hyper = TrainHyper {
        steps: 100,
        batch_size: 16,
        ..TrainHyper::default()
    };
    train(&encoder, &mut state, &task.sample(256, 0), &hyper, None)?;

    let dir = tempfile::tempdir().map_err(|e| softmoe::Error::usage(e.to_string()))?;
    let path = dir.path().join("model.smoe");
    checkpoint::save(&path, &state.params)?;
    let (_, mut params) = build_encoder(&cfg, &mut Rng::new(99))?;
    checkpoint::load_into(&path, &mut params)?;
    println!("checkpoint: {} bytes", std::fs::metadata(&path).map(|m| m.len()).unwrap_or(0));

    let images = task.sample(2, 1);
    let out = encoder.forward(&params, &images.images, true)?;
    for cap in &out.routing {
        let tc = token_contribution(&cap.weights.dispatch)?;
        let q: Vec<String> = tc.quantiles.iter().map(|(l, v)| format!("q{l}={v:.3}")).collect();
        println!("layer {} image {}: token contribution {}", cap.layer, cap.sequence, q.join(" "));
        let curves = cumulative_weight_curves(&cap.weights.dispatch, Orientation::Dispatch)?;
        let top1: f64 = curves.iter().map(|c| c[0]).sum::<f64>() / curves.len() as f64;
        println!("  mean top-1 dispatch mass {top1:.3}");
    }
    for (layer, moe) in encoder.soft_layers() {
        let c = slot_correlation(params.get(moe.phi))?;
        println!("layer {layer} slot cosine similarities:");
        for row in c.to_rows() {
            let cells: Vec<String> = row.iter().map(|v| format!("{v:+.2}")).collect();
            println!("  {}", cells.join(" "));
        }
    }
    Ok(())
}
