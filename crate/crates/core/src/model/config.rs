use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::sparse::SparseRouter;
use crate::variants::VariantKind;

/// What replaces the MLP in the blocks listed by [`MoeConfig::layers`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum RouterKind {
    /// Plain MLP, i.e. no MoE at all.
    Dense,
    #[default]
    Soft,
    TokensChoice,
    ExpertsChoice,
}

impl RouterKind {
    pub fn name(self) -> &'static str {
        match self {
            RouterKind::Dense => "dense",
            RouterKind::Soft => "soft",
            RouterKind::TokensChoice => "tokens_choice",
            RouterKind::ExpertsChoice => "experts_choice",
        }
    }
}

impl fmt::Display for RouterKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for RouterKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "dense" => Ok(RouterKind::Dense),
            "soft" => Ok(RouterKind::Soft),
            "tokens_choice" => Ok(RouterKind::TokensChoice),
            "experts_choice" => Ok(RouterKind::ExpertsChoice),
            _ => Err(format!(
                "unknown router `{s}` (dense|soft|tokens_choice|experts_choice)"
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MoeConfig {
    /// Block indices whose MLP is replaced.
    pub layers: Vec<usize>,
    pub router: RouterKind,
    /// Fixed-routing ablation; only meaningful with the soft router.
    pub variant: VariantKind,
    pub experts: usize,
    pub slots_per_expert: usize,
    /// Tokens Choice: experts per token.
    pub k: usize,
    /// Capacity multiplier `c` of the sparse routers.
    pub capacity_factor: f64,
    pub bpr: bool,
    /// Sequences routed jointly by sparse routers.
    pub group_size: usize,
    /// L2-normalize tokens and slot parameters before the soft logits.
    pub normalize: bool,
}

impl Default for MoeConfig {
    fn default() -> Self {
        Self {
            layers: vec![4, 5, 6, 7],
            router: RouterKind::Soft,
            variant: VariantKind::Soft,
            experts: 16,
            slots_per_expert: 1,
            k: 1,
            capacity_factor: 1.0,
            bpr: true,
            group_size: 1,
            normalize: true,
        }
    }
}

impl MoeConfig {
    pub fn sparse_router(&self) -> Option<SparseRouter> {
        match self.router {
            RouterKind::TokensChoice => Some(SparseRouter::TokensChoice {
                k: self.k,
                capacity_factor: self.capacity_factor,
                bpr: self.bpr,
            }),
            RouterKind::ExpertsChoice => Some(SparseRouter::ExpertsChoice {
                capacity_factor: self.capacity_factor,
            }),
            _ => None,
        }
    }

    /// The `n·p` total slot count.
    pub fn slots(&self) -> usize {
        self.experts * self.slots_per_expert
    }
}

/// Backbone description shared by the trainer and the FLOP model.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderConfig {
    pub image_size: usize,
    pub channels: usize,
    pub patch_size: usize,
    pub depth: usize,
    pub width: usize,
    pub heads: usize,
    pub mlp_dim: usize,
    pub num_classes: usize,
    pub moe: MoeConfig,
}

impl Default for EncoderConfig {
    /// Desk-scale default: 32×32 images, patch 4, depth 8, width 128.
    fn default() -> Self {
        Self {
            image_size: 32,
            channels: 3,
            patch_size: 4,
            depth: 8,
            width: 128,
            heads: 4,
            mlp_dim: 512,
            num_classes: 10,
            moe: MoeConfig::default(),
        }
    }
}

impl EncoderConfig {
    /// Tokens per image at the configured resolution.
    pub fn tokens(&self) -> usize {
        self.tokens_at(self.image_size)
    }

    pub fn tokens_at(&self, resolution: usize) -> usize {
        let side = resolution / self.patch_size;
        side * side
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }

    pub fn head_dim(&self) -> usize {
        self.width / self.heads
    }

    pub fn is_moe_layer(&self, layer: usize) -> bool {
        self.moe.router != RouterKind::Dense && self.moe.layers.contains(&layer)
    }

    /// Checks structural constraints; errors name the offending config key.
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("model.image_size", self.image_size),
            ("model.channels", self.channels),
            ("model.patch_size", self.patch_size),
            ("model.depth", self.depth),
            ("model.width", self.width),
            ("model.heads", self.heads),
            ("model.mlp_dim", self.mlp_dim),
            ("model.num_classes", self.num_classes),
            ("moe.n", self.moe.experts),
            ("moe.p", self.moe.slots_per_expert),
            ("moe.k", self.moe.k),
            ("moe.group_size", self.moe.group_size),
        ];
        for (key, v) in positive {
            if v == 0 {
                return Err(Error::config(key, "must be positive"));
            }
        }
        if self.image_size % self.patch_size != 0 {
            return Err(Error::config(
                "model.patch_size",
                format!("{} does not divide image size {}", self.patch_size, self.image_size),
            ));
        }
        if self.width % self.heads != 0 {
            return Err(Error::config(
                "model.heads",
                format!("{} does not divide width {}", self.heads, self.width),
            ));
        }
        if let Some(&bad) = self.moe.layers.iter().find(|&&l| l >= self.depth) {
            return Err(Error::config(
                "moe.layers",
                format!("layer {bad} out of range for depth {}", self.depth),
            ));
        }
        if !(self.moe.capacity_factor > 0.0) {
            return Err(Error::config("moe.c", "must be positive"));
        }
        if self.moe.router == RouterKind::TokensChoice && self.moe.k > self.moe.experts {
            return Err(Error::config("moe.k", "must not exceed moe.n"));
        }
        if self.moe.router == RouterKind::ExpertsChoice {
            let group_tokens = (self.tokens() * self.moe.group_size) as f64;
            if self.moe.experts as f64 > group_tokens * self.moe.capacity_factor {
                return Err(Error::config("moe.n", "experts choice needs n <= c·tokens per group"));
            }
        }
        if self.moe.router == RouterKind::Soft
            && self.moe.variant == VariantKind::Identity
            && self.moe.slots() != self.tokens()
        {
            return Err(Error::config(
                "routing.variant",
                format!(
                    "identity routing needs n·p ({}) equal to the token count ({})",
                    self.moe.slots(),
                    self.tokens()
                ),
            ));
        }
        Ok(())
    }

    fn vit(patch: usize, width: usize, depth: usize, heads: usize, mlp_dim: usize) -> Self {
        Self {
            image_size: 224,
            channels: 3,
            patch_size: patch,
            depth,
            width,
            heads,
            mlp_dim,
            num_classes: 1000,
            moe: MoeConfig {
                layers: Vec::new(),
                router: RouterKind::Dense,
                ..MoeConfig::default()
            },
        }
    }

    /// Standard backbones: `vit-{s16,b16,l16,h14}` and their
    /// `softmoe-*-128e` counterparts (MoE in the second half, one slot per
    /// expert), plus `desk` for the default desk-scale model.
    pub fn preset(name: &str) -> Option<Self> {
        if name == "desk" {
            return Some(Self::default());
        }
        let (base, moe) = match name.strip_prefix("softmoe-") {
            Some(rest) => (rest.strip_suffix("-128e")?, true),
            None => (name.strip_prefix("vit-")?, false),
        };
        let mut cfg = match base {
            "s16" => Self::vit(16, 384, 12, 6, 1536),
            "b16" => Self::vit(16, 768, 12, 12, 3072),
            "l16" => Self::vit(16, 1024, 24, 16, 4096),
            "h14" => Self::vit(14, 1280, 32, 16, 5120),
            _ => return None,
        };
        if moe {
            cfg.moe = MoeConfig {
                layers: (cfg.depth / 2..cfg.depth).collect(),
                router: RouterKind::Soft,
                experts: 128,
                slots_per_expert: 1,
                ..MoeConfig::default()
            };
        }
        Some(cfg)
    }

    pub const PRESETS: [&'static str; 9] = [
        "desk",
        "vit-s16",
        "vit-b16",
        "vit-l16",
        "vit-h14",
        "softmoe-s16-128e",
        "softmoe-b16-128e",
        "softmoe-l16-128e",
        "softmoe-h14-128e",
    ];
}
