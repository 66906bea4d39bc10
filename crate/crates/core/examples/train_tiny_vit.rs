//! Trains a small encoder with a chosen router on the synthetic task.
//!
//!     cargo run --release --example train_tiny_vit -- [router] [variant] [steps]
//!
//! `router` is dense|soft|tokens_choice|experts_choice, `variant` one of the
//! soft routing ablations.

use softmoe::model::{build_encoder, evaluate, train, EncoderConfig, MoeConfig, SynthTask, TrainHyper, TrainState};
use softmoe::Rng;

fn main() -> softmoe::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let router = args.get(1).map_or("soft", String::as_str);
    let variant = args.get(2).map_or("soft", String::as_str);
    let steps = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(300);

    let cfg = EncoderConfig {
        image_size: 8,
        channels: 1,
        patch_size: 2,
        depth: 2,
        width: 16,
        heads: 2,
        mlp_dim: 32,
        num_classes: 10,
        moe: MoeConfig {
            layers: vec![1],
            router: router.parse().map_err(|e: String| softmoe::Error::usage(e))?,
            variant: variant.parse().map_err(|e: String| softmoe::Error::usage(e))?,
            experts: 4,
            slots_per_expert: 4,
            ..MoeConfig::default()
        },
    };
    let task = SynthTask {
        seed: 0,
        classes: 10,
        image_size: 8,
        channels: 1,
        noise: 1.0,
    };
    let train_set = task.sample(1000, 0);
    let test_set = task.sample(200, 1);

    let rng = Rng::new(0);
    let (encoder, params) = build_encoder(&cfg, &mut rng.fork(1))?;
    println!("{router}/{variant}: {} parameters", params.total_values());
    let mut state = TrainState::new(params, rng.fork(2));
    let hyper = TrainHyper {
        steps,
        batch_size: 32,
        peak_lr: 3e-3,
        ..TrainHyper::default()
    };
    let start = std::time::Instant::now();
    let rows = train(&encoder, &mut state, &train_set, &hyper, None)?;
    for r in rows.iter().filter(|r| r.step % 50 == 0 || r.step == 1) {
        println!(
            "step {:>5}  loss {:.4}  acc {:.3}  drop {:.3}  aux {:.4}",
            r.step, r.loss, r.acc, r.drop_rate, r.aux_loss
        );
    }
    let m = evaluate(&encoder, &state.params, &test_set, 100)?;
    println!(
        "test accuracy {:.3} (chance 0.1), loss {:.4}, {:.1}s",
        m.accuracy,
        m.loss,
        start.elapsed().as_secs_f64()
    );
    Ok(())
}
