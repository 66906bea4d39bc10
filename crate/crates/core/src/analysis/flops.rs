//! Analytic per-image FLOP model. One multiply-accumulate counts as 2 FLOPs.

use std::path::Path;

use crate::error::{Error, Result};
use crate::model::config::{EncoderConfig, RouterKind};
use crate::sparse::{experts_choice_capacity, tokens_choice_capacity};

pub const FLOPS_CSV_HEADER: &str = "model,resolution,component,flops";

/// FLOPs by component; `total` is always their sum.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct CostModel {
    pub patch_embed: f64,
    /// Q, K, V and output projections.
    pub attention_proj: f64,
    /// `QKᵀ` and the attention-weighted values.
    pub attention_scores: f64,
    /// Dense MLP blocks.
    pub mlp: f64,
    /// Expert MLPs of MoE blocks.
    pub moe_experts: f64,
    /// Router logits plus dispatch and combine.
    pub routing: f64,
    pub head: f64,
}

impl CostModel {
    pub fn components(&self) -> [(&'static str, f64); 7] {
        [
            ("patch_embed", self.patch_embed),
            ("attention_proj", self.attention_proj),
            ("attention_scores", self.attention_scores),
            ("mlp", self.mlp),
            ("moe_experts", self.moe_experts),
            ("routing", self.routing),
            ("head", self.head),
        ]
    }

    pub fn total(&self) -> f64 {
        self.components().iter().map(|(_, v)| v).sum()
    }

    pub fn gflops(&self) -> f64 {
        self.total() / 1e9
    }
}

/// Per-image cost of `cfg` evaluated at `resolution`.
pub fn flop_estimate(cfg: &EncoderConfig, resolution: usize) -> Result<CostModel> {
    cfg.validate()?;
    if resolution == 0 || resolution % cfg.patch_size != 0 {
        return Err(Error::config(
            "flops.resolution",
            format!("{resolution} is not a positive multiple of patch size {}", cfg.patch_size),
        ));
    }
    let m = cfg.tokens_at(resolution) as f64;
    let (d, d_mlp) = (cfg.width as f64, cfg.mlp_dim as f64);
    let mut c = CostModel {
        patch_embed: 2.0 * m * cfg.patch_dim() as f64 * d,
        head: 2.0 * d * cfg.num_classes as f64,
        ..CostModel::default()
    };
    let moe = &cfg.moe;
    let e = moe.experts as f64;
    for layer in 0..cfg.depth {
        c.attention_proj += 8.0 * m * d * d;
        c.attention_scores += 4.0 * m * m * d;
        if !cfg.is_moe_layer(layer) {
            c.mlp += 4.0 * m * d * d_mlp;
            continue;
        }
        match moe.router {
            RouterKind::Soft => {
                let slots = moe.slots() as f64;
                c.moe_experts += 4.0 * slots * d * d_mlp;
                c.routing += 6.0 * m * slots * d;
            }
            RouterKind::TokensChoice | RouterKind::ExpertsChoice => {
                // buffers are sized per routing group and padded to capacity
                let group = cfg.tokens_at(resolution) * moe.group_size;
                let cap = if moe.router == RouterKind::TokensChoice {
                    tokens_choice_capacity(group, moe.experts, moe.k, moe.capacity_factor)
                } else {
                    experts_choice_capacity(group, moe.experts, moe.capacity_factor)
                };
                let per_image = e * cap as f64 / moe.group_size as f64;
                c.moe_experts += 4.0 * per_image * d * d_mlp;
                c.routing += 2.0 * m * e * d;
            }
            RouterKind::Dense => unreachable!("dense layers are never MoE layers"),
        }
    }
    Ok(c)
}

pub fn write_flops_csv(path: &Path, model: &str, resolution: usize, cost: &CostModel) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(FLOPS_CSV_HEADER.split(','))?;
    let rows = cost.components().into_iter().chain([("total", cost.total())]);
    for (name, v) in rows {
        w.write_record([model.to_string(), resolution.to_string(), name.to_string(), v.to_string()])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Plain-text table with one line per component and the total.
pub fn format_table(model: &str, resolution: usize, cost: &CostModel) -> String {
    let mut s = format!("{model} @ {resolution}px\n");
    for (name, v) in cost.components() {
        s.push_str(&format!("  {name:<17} {:>12.4} GFLOP\n", v / 1e9));
    }
    s.push_str(&format!("  {:<17} {:>12.4} GFLOP\n", "total", cost.gflops()));
    s
}
