use softmoe::model::checkpoint;
use softmoe::model::{
    build_encoder, evaluate, train, Dataset, EncoderConfig, MoeConfig, RouterKind, Schedule, SynthTask, TrainHyper,
    TrainState,
};
use softmoe::variants::VariantKind;
use softmoe::{Graph, Rng};

fn tiny(router: RouterKind) -> EncoderConfig {
    EncoderConfig {
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
            router,
            experts: 4,
            slots_per_expert: 4,
            ..MoeConfig::default()
        },
    }
}

fn task() -> SynthTask {
    SynthTask {
        seed: 0,
        classes: 10,
        image_size: 8,
        channels: 1,
        noise: 1.0,
    }
}

fn hyper(steps: usize) -> TrainHyper {
    TrainHyper {
        steps,
        batch_size: 32,
        peak_lr: 3e-3,
        ..TrainHyper::default()
    }
}

/// Closed-form parameter count of the encoder.
fn expected_params(cfg: &EncoderConfig) -> usize {
    let (d, f, m) = (cfg.width, cfg.mlp_dim, cfg.tokens());
    let mlp = 2 * d * f + f + d;
    let mut total = cfg.patch_dim() * d + d + m * d;
    for l in 0..cfg.depth {
        total += 4 * d + 4 * d * d + 4 * d;
        total += if !cfg.is_moe_layer(l) {
            mlp
        } else if cfg.moe.router == RouterKind::Soft {
            d * cfg.moe.slots() + 1 + cfg.moe.experts * mlp
        } else {
            d * cfg.moe.experts + cfg.moe.experts * mlp
        };
    }
    total + 2 * d + d * cfg.num_classes + cfg.num_classes
}

#[test]
fn parameter_counts_match_closed_form() {
    for router in [RouterKind::Dense, RouterKind::Soft, RouterKind::TokensChoice, RouterKind::ExpertsChoice] {
        let mut cfg = tiny(router);
        if router == RouterKind::Dense {
            cfg.moe.layers.clear();
        }
        let (_, store) = build_encoder(&cfg, &mut Rng::new(0)).unwrap();
        assert_eq!(store.total_values(), expected_params(&cfg), "{router:?}");
    }
    let mut none = tiny(RouterKind::Soft);
    none.moe.layers.clear();
    let mut dense = tiny(RouterKind::Dense);
    dense.moe.layers.clear();
    let count = |c: &EncoderConfig| build_encoder(c, &mut Rng::new(0)).unwrap().1.total_values();
    assert_eq!(count(&none), count(&dense));
}

#[test]
fn every_parameter_receives_gradient() {
    for router in [RouterKind::Soft, RouterKind::TokensChoice, RouterKind::ExpertsChoice, RouterKind::Dense] {
        let mut cfg = tiny(router);
        cfg.moe.capacity_factor = 4.0;
        let (enc, store) = build_encoder(&cfg, &mut Rng::new(3)).unwrap();
        let data = task().sample(16, 0);
        let mut g = Graph::new();
        let b = store.bind(&mut g);
        let out = enc.loss_graph(&mut g, &b, &data.images, &data.labels).unwrap();
        let grads = g.backward(out.loss).unwrap();
        for (id, name, _) in store.iter() {
            let grad = grads.get(b[id]).unwrap_or_else(|| panic!("{router:?}: no gradient for {name}"));
            assert!(grad.max_abs() > 0.0, "{router:?}: zero gradient for {name}");
        }
    }
}

#[test]
fn same_seed_same_model_and_curve() {
    let cfg = tiny(RouterKind::Soft);
    let data = task().sample(128, 0);
    let run = || {
        let (enc, params) = build_encoder(&cfg, &mut Rng::new(7)).unwrap();
        let mut state = TrainState::new(params, Rng::new(8));
        let rows = train(&enc, &mut state, &data, &hyper(5), None).unwrap();
        (rows, state.params)
    };
    let (a, pa) = run();
    let (b, pb) = run();
    assert_eq!(a, b);
    for ((_, _, x), (_, _, y)) in pa.iter().zip(pb.iter()) {
        assert_eq!(x, y);
    }
}

#[test]
fn zero_steps_leave_state_untouched() {
    let cfg = tiny(RouterKind::TokensChoice);
    let (enc, params) = build_encoder(&cfg, &mut Rng::new(1)).unwrap();
    let before = params.clone();
    let mut state = TrainState::new(params, Rng::new(2));
    let rows = train(&enc, &mut state, &task().sample(8, 0), &hyper(0), None).unwrap();
    assert!(rows.is_empty());
    assert_eq!(state.step, 0);
    assert_eq!(state.rng.counter(), Rng::new(2).counter());
    for ((_, _, x), (_, _, y)) in before.iter().zip(state.params.iter()) {
        assert_eq!(x, y);
    }
}

#[test]
fn untrained_model_is_at_chance() {
    let cfg = tiny(RouterKind::Soft);
    let (enc, params) = build_encoder(&cfg, &mut Rng::new(5)).unwrap();
    let m = evaluate(&enc, &params, &task().sample(500, 1), 100).unwrap();
    assert!(m.accuracy < 0.3, "accuracy {}", m.accuracy);
    assert!((m.loss - 10f64.ln()).abs() < 0.5, "loss {}", m.loss);
}

#[test]
fn checkpoint_round_trip_preserves_evaluation() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(RouterKind::Soft);
    let (enc, params) = build_encoder(&cfg, &mut Rng::new(5)).unwrap();
    let mut state = TrainState::new(params, Rng::new(6));
    train(&enc, &mut state, &task().sample(64, 0), &hyper(3), None).unwrap();
    checkpoint::quantize_params(&mut state.params);
    let path = dir.path().join("model.smoe");
    checkpoint::save(&path, &state.params).unwrap();
    let (_, mut fresh) = build_encoder(&cfg, &mut Rng::new(99)).unwrap();
    checkpoint::load_into(&path, &mut fresh).unwrap();
    let test = task().sample(50, 1);
    assert_eq!(evaluate(&enc, &state.params, &test, 16).unwrap(), evaluate(&enc, &fresh, &test, 16).unwrap());
}

#[test]
fn checkpoint_rejects_a_different_architecture() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("soft.smoe");
    let (_, soft) = build_encoder(&tiny(RouterKind::Soft), &mut Rng::new(0)).unwrap();
    checkpoint::save(&path, &soft).unwrap();
    let (_, mut dense) = build_encoder(&tiny(RouterKind::Dense), &mut Rng::new(0)).unwrap();
    assert!(checkpoint::load_into(&path, &mut dense).is_err());
}

fn sequence_output(enc: &softmoe::model::Encoder, params: &softmoe::ParamStore, batch: &Dataset, at: usize) -> softmoe::Tensor {
    enc.forward(params, &batch.images, false).unwrap().tokens[at].clone()
}

#[test]
fn soft_outputs_do_not_depend_on_the_batch() {
    let cfg = tiny(RouterKind::Soft);
    let (enc, params) = build_encoder(&cfg, &mut Rng::new(2)).unwrap();
    let data = task().sample(12, 0);
    let alone = sequence_output(&enc, &params, &data.subset(&[0]), 0);
    let mixed = sequence_output(&enc, &params, &data.subset(&[5, 3, 0, 9, 11]), 2);
    assert_eq!(alone, mixed);
}

#[test]
fn grouped_tokens_choice_depends_on_the_batch() {
    let mut cfg = tiny(RouterKind::TokensChoice);
    cfg.moe.group_size = 2;
    cfg.moe.capacity_factor = 0.5;
    let (enc, params) = build_encoder(&cfg, &mut Rng::new(2)).unwrap();
    let data = task().sample(12, 0);
    let a = sequence_output(&enc, &params, &data.subset(&[0, 1]), 0);
    let b = sequence_output(&enc, &params, &data.subset(&[0, 0]), 0);
    assert_ne!(a, b);
}

#[test]
fn uniform_combine_makes_rows_identical() {
    for variant in [VariantKind::SoftUniform, VariantKind::Uniform] {
        let mut cfg = tiny(RouterKind::Soft);
        cfg.moe.variant = variant;
        let (enc, params) = build_encoder(&cfg, &mut Rng::new(2)).unwrap();
        let out = enc.forward(&params, &task().sample(4, 0).images, false).unwrap();
        assert!(out.stats.moe_row_spread < 1e-12, "{variant}: {}", out.stats.moe_row_spread);
    }
    let (enc, params) = build_encoder(&tiny(RouterKind::Soft), &mut Rng::new(2)).unwrap();
    let out = enc.forward(&params, &task().sample(4, 0).images, false).unwrap();
    assert!(out.stats.moe_row_spread > 1e-6);
}

#[test]
fn schedules_warm_up_then_decay() {
    let h = TrainHyper {
        steps: 100,
        warmup_frac: 0.1,
        peak_lr: 1.0,
        ..TrainHyper::default()
    };
    assert_eq!(h.warmup_steps(), 10);
    assert_eq!(h.lr_at(5), 0.5);
    assert_eq!(h.lr_at(10), 1.0);
    assert!(h.lr_at(100).abs() < 1e-12);
    assert!((1..100).all(|s| s <= 10 || h.lr_at(s + 1) <= h.lr_at(s)));
    let r = TrainHyper {
        schedule: Schedule::InverseSqrt,
        ..h
    };
    assert!((r.lr_at(40) - 0.5).abs() < 1e-12);
}

#[test]
fn dense_model_fits_its_training_set() {
    let mut cfg = tiny(RouterKind::Dense);
    cfg.moe.layers.clear();
    let data = task().sample(256, 0);
    let (enc, params) = build_encoder(&cfg, &mut Rng::new(0)).unwrap();
    let mut state = TrainState::new(params, Rng::new(1));
    train(&enc, &mut state, &data, &hyper(400), None).unwrap();
    let m = evaluate(&enc, &state.params, &data, 64).unwrap();
    assert!(m.accuracy > 0.9, "train accuracy {}", m.accuracy);
}
