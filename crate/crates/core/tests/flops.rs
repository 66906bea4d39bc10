use proptest::prelude::*;
use softmoe::analysis::flop_estimate;
use softmoe::model::{EncoderConfig, MoeConfig, RouterKind};

const TABLE: [(&str, f64); 4] = [("vit-s16", 9.2), ("vit-b16", 35.1), ("vit-l16", 122.9), ("vit-h14", 334.2)];

fn gflops(name: &str) -> f64 {
    flop_estimate(&EncoderConfig::preset(name).unwrap(), 224).unwrap().gflops()
}

#[test]
fn dense_backbones_match_reference_costs() {
    for (name, want) in TABLE {
        let got = gflops(name);
        assert!((got - want).abs() / want < 0.25, "{name}: {got} vs {want}");
    }
}

#[test]
fn soft_moe_to_dense_ratios() {
    for (moe, dense, want) in [("softmoe-b16-128e", "vit-b16", 32.0 / 35.1), ("softmoe-l16-128e", "vit-l16", 111.1 / 122.9)] {
        let got = gflops(moe) / gflops(dense);
        assert!((got - want).abs() / want < 0.10, "{moe}: {got} vs {want}");
    }
}

#[test]
fn vit_b16_by_hand() {
    let (m, d, f, depth) = (196.0, 768.0, 3072.0, 12.0);
    let block = 8.0 * m * d * d + 4.0 * m * m * d + 4.0 * m * d * f;
    let want = depth * block + 2.0 * m * 768.0 * d + 2.0 * d * 1000.0;
    let got = flop_estimate(&EncoderConfig::preset("vit-b16").unwrap(), 224).unwrap().total();
    assert_eq!(got, want);
}

#[test]
fn rejects_bad_resolutions() {
    let cfg = EncoderConfig::preset("vit-b16").unwrap();
    assert!(flop_estimate(&cfg, 0).is_err());
    assert!(flop_estimate(&cfg, 225).is_err());
}

fn soft_cfg(depth: usize, n: usize, p: usize) -> EncoderConfig {
    EncoderConfig {
        image_size: 32,
        channels: 3,
        patch_size: 4,
        depth,
        width: 64,
        heads: 4,
        mlp_dim: 256,
        num_classes: 10,
        moe: MoeConfig {
            layers: (0..depth).collect(),
            router: RouterKind::Soft,
            experts: n,
            slots_per_expert: p,
            ..MoeConfig::default()
        },
    }
}

proptest! {
    #[test]
    fn cost_depends_on_total_slots_only(np in prop::sample::select(vec![4usize, 8, 16, 32, 64])) {
        let base = flop_estimate(&soft_cfg(2, np, 1), 32).unwrap().total();
        for n in [1, 2, 4] {
            if np % n == 0 {
                let c = flop_estimate(&soft_cfg(2, n, np / n), 32).unwrap().total();
                prop_assert_eq!(c, base);
            }
        }
    }

    #[test]
    fn cost_is_affine_in_depth(depth in 1usize..12) {
        let cost = |l: usize| flop_estimate(&soft_cfg(l, 8, 2), 32).unwrap().total();
        let per_layer = cost(2) - cost(1);
        prop_assert!((cost(depth) - (cost(1) + (depth - 1) as f64 * per_layer)).abs() <= 1e-6 * cost(depth));
    }

    #[test]
    fn soft_block_equals_parity_formula(n in 1usize..64, p in 1usize..4) {
        let one = flop_estimate(&soft_cfg(1, n, p), 32).unwrap();
        let (m, d, f, s) = (64.0, 64.0, 256.0, (n * p) as f64);
        prop_assert_eq!(one.moe_experts, 4.0 * s * d * f);
        prop_assert_eq!(one.routing, 6.0 * m * s * d);
    }
}

#[test]
fn resolution_scales_token_terms() {
    let cfg = EncoderConfig::preset("vit-b16").unwrap();
    let a = flop_estimate(&cfg, 224).unwrap();
    let b = flop_estimate(&cfg, 448).unwrap();
    assert_eq!(b.attention_proj, 4.0 * a.attention_proj);
    assert_eq!(b.mlp, 4.0 * a.mlp);
    assert_eq!(b.attention_scores, 16.0 * a.attention_scores);
    assert_eq!(b.head, a.head);
}

#[test]
fn dense_layers_cost_more_than_moe_with_few_slots() {
    let cfg = soft_cfg(4, 8, 1);
    let dense = EncoderConfig {
        moe: MoeConfig {
            layers: vec![],
            router: RouterKind::Dense,
            ..MoeConfig::default()
        },
        ..cfg.clone()
    };
    assert!(flop_estimate(&cfg, 32).unwrap().total() < flop_estimate(&dense, 32).unwrap().total());
}
