//! Pre-norm ViT-style encoder with MoE blocks at configurable depths.

use std::sync::Arc;

use super::config::{EncoderConfig, RouterKind};
use super::data::patchify;
use crate::autodiff::{Bindings, Graph, ParamId, ParamStore, Var};
use crate::error::{Error, Result};
use crate::rng::{glorot_init, Rng};
use crate::soft_moe::{self, Expert, ExpertMlp, RoutingWeights, SoftMoeParams, SoftMoeShape};
use crate::sparse::{
    load_balance_loss_graph, sparse_forward_graph, RouterScores, SparseAssignment, SparseRouter,
};
use crate::tensor::Tensor;
use crate::variants::VariantKind;

pub const LN_EPS: f64 = 1e-6;

/// Weight of the load-balancing loss added for sparse routers.
pub const AUX_LOSS_WEIGHT: f64 = 0.01;

#[derive(Debug, Clone, Copy)]
struct LayerNormParams {
    gain: ParamId,
    bias: ParamId,
}

impl LayerNormParams {
    fn new(store: &mut ParamStore, prefix: &str, d: usize) -> Self {
        Self {
            gain: store.add(format!("{prefix}.gain"), Tensor::filled(&[1, d], 1.0)),
            bias: store.add(format!("{prefix}.bias"), Tensor::zeros(&[1, d])),
        }
    }

    fn apply(&self, g: &mut Graph, b: &Bindings, x: Var) -> Result<Var> {
        g.layer_norm(x, b[self.gain], b[self.bias], LN_EPS)
    }
}

#[derive(Debug, Clone, Copy)]
struct HeadParams {
    wq: ParamId,
    bq: ParamId,
    wk: ParamId,
    bk: ParamId,
    wv: ParamId,
    bv: ParamId,
    /// Rows of the output projection belonging to this head.
    wo: ParamId,
}

#[derive(Debug, Clone)]
struct Attention {
    heads: Vec<HeadParams>,
    bo: ParamId,
}

/// The feed-forward half of a block.
#[derive(Debug, Clone)]
pub enum Ffn {
    Dense(ExpertMlp),
    Soft {
        params: SoftMoeParams,
        variant: VariantKind,
    },
    Sparse {
        /// `d × n` router weights.
        router_w: ParamId,
        experts: Vec<Expert>,
        router: SparseRouter,
        group_size: usize,
    },
}

impl Ffn {
    pub fn is_moe(&self) -> bool {
        !matches!(self, Ffn::Dense(_))
    }
}

#[derive(Debug, Clone)]
struct Block {
    ln1: LayerNormParams,
    attn: Attention,
    ln2: LayerNormParams,
    ffn: Ffn,
}

/// Built encoder: parameter handles plus the config they came from.
#[derive(Debug, Clone)]
pub struct Encoder {
    cfg: EncoderConfig,
    patch_w: ParamId,
    patch_b: ParamId,
    pos: ParamId,
    blocks: Vec<Block>,
    final_ln: LayerNormParams,
    head_w: ParamId,
    head_b: ParamId,
}

/// Routing weights of one soft MoE layer for one sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct CapturedRouting {
    pub layer: usize,
    pub sequence: usize,
    pub weights: RoutingWeights,
}

/// Router diagnostics accumulated over one forward pass.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RouterStats {
    /// Mean fraction of dropped tokens over sparse routing groups.
    pub drop_rate: f64,
    /// Mean load-balancing loss over sparse routing groups.
    pub aux_loss: f64,
    /// Largest `|y_i − y_0|` within a sequence of any MoE layer output,
    /// taken before the residual.
    pub moe_row_spread: f64,
    pub sparse_groups: usize,
}

/// Graph handles of one forward pass over a batch.
#[derive(Debug, Clone)]
pub struct ForwardVars {
    /// `B × classes`.
    pub logits: Var,
    /// Final normalized tokens, `(B·m) × d`.
    pub tokens: Var,
    /// Mean load-balancing loss, present for sparse routers.
    pub aux_loss: Option<Var>,
    pub stats: RouterStats,
    pub routing: Vec<CapturedRouting>,
}

#[derive(Debug, Clone)]
pub struct LossVars {
    /// Cross-entropy plus the weighted auxiliary loss.
    pub loss: Var,
    pub cross_entropy: Var,
    pub forward: ForwardVars,
}

/// Values of a forward pass outside any training graph.
#[derive(Debug, Clone)]
pub struct EncoderOutput {
    pub logits: Tensor,
    /// Final normalized tokens of every sequence.
    pub tokens: Vec<Tensor>,
    pub stats: RouterStats,
    pub routing: Vec<CapturedRouting>,
}

/// Builds parameters for `cfg` in a fresh store.
pub fn build_encoder(cfg: &EncoderConfig, rng: &mut Rng) -> Result<(Encoder, ParamStore)> {
    cfg.validate()?;
    let mut store = ParamStore::new();
    let (d, m) = (cfg.width, cfg.tokens());
    let patch_w = store.add("embed.w", glorot_init(rng, cfg.patch_dim(), d));
    let patch_b = store.add("embed.b", Tensor::zeros(&[1, d]));
    let pos = store.add("embed.pos", rng.normal_tensor(&[m, d], 0.02));

    let dh = cfg.head_dim();
    // per-head slices of full-width d×d Glorot projections
    let limit = (6.0 / (2 * d) as f64).sqrt();
    let mut blocks = Vec::with_capacity(cfg.depth);
    for l in 0..cfg.depth {
        let p = format!("block{l}");
        let ln1 = LayerNormParams::new(&mut store, &format!("{p}.ln1"), d);
        let heads = (0..cfg.heads)
            .map(|h| {
                let hp = format!("{p}.attn.head{h}");
                HeadParams {
                    wq: store.add(format!("{hp}.wq"), rng.uniform_tensor(&[d, dh], -limit, limit)),
                    bq: store.add(format!("{hp}.bq"), Tensor::zeros(&[1, dh])),
                    wk: store.add(format!("{hp}.wk"), rng.uniform_tensor(&[d, dh], -limit, limit)),
                    bk: store.add(format!("{hp}.bk"), Tensor::zeros(&[1, dh])),
                    wv: store.add(format!("{hp}.wv"), rng.uniform_tensor(&[d, dh], -limit, limit)),
                    bv: store.add(format!("{hp}.bv"), Tensor::zeros(&[1, dh])),
                    wo: store.add(format!("{hp}.wo"), rng.uniform_tensor(&[dh, d], -limit, limit)),
                }
            })
            .collect::<Vec<_>>();
        let bo = store.add(format!("{p}.attn.bo"), Tensor::zeros(&[1, d]));
        let ln2 = LayerNormParams::new(&mut store, &format!("{p}.ln2"), d);
        let ffn = build_ffn(cfg, l, &mut store, &format!("{p}.ffn"), rng)?;
        blocks.push(Block {
            ln1,
            attn: Attention { heads, bo },
            ln2,
            ffn,
        });
    }
    let final_ln = LayerNormParams::new(&mut store, "final_ln", d);
    let head_w = store.add("head.w", glorot_init(rng, d, cfg.num_classes));
    let head_b = store.add("head.b", Tensor::zeros(&[1, cfg.num_classes]));
    Ok((
        Encoder {
            cfg: cfg.clone(),
            patch_w,
            patch_b,
            pos,
            blocks,
            final_ln,
            head_w,
            head_b,
        },
        store,
    ))
}

fn build_ffn(cfg: &EncoderConfig, layer: usize, store: &mut ParamStore, prefix: &str, rng: &mut Rng) -> Result<Ffn> {
    let (d, d_mlp) = (cfg.width, cfg.mlp_dim);
    if !cfg.is_moe_layer(layer) {
        return Ok(Ffn::Dense(ExpertMlp::new(store, prefix, d, d_mlp, rng)));
    }
    let moe = &cfg.moe;
    match moe.sparse_router() {
        None => {
            let shape = SoftMoeShape {
                d,
                d_mlp,
                experts: moe.experts,
                slots_per_expert: moe.slots_per_expert,
                normalize: moe.normalize,
            };
            Ok(Ffn::Soft {
                params: SoftMoeParams::new(store, prefix, shape, rng)?,
                variant: moe.variant,
            })
        }
        Some(router) => {
            let router_w = store.add(format!("{prefix}.router"), glorot_init(rng, d, moe.experts));
            let experts = (0..moe.experts)
                .map(|e| Expert::Mlp(ExpertMlp::new(store, &format!("{prefix}.expert{e}"), d, d_mlp, rng)))
                .collect();
            Ok(Ffn::Sparse {
                router_w,
                experts,
                router,
                group_size: moe.group_size,
            })
        }
    }
}

fn range(lo: usize, hi: usize) -> Arc<Vec<usize>> {
    Arc::new((lo..hi).collect())
}

impl Encoder {
    pub fn config(&self) -> &EncoderConfig {
        &self.cfg
    }

    pub fn ffn(&self, layer: usize) -> &Ffn {
        &self.blocks[layer].ffn
    }

    /// Parameters of every soft MoE layer, by layer index.
    pub fn soft_layers(&self) -> Vec<(usize, &SoftMoeParams)> {
        self.blocks
            .iter()
            .enumerate()
            .filter_map(|(l, b)| match &b.ffn {
                Ffn::Soft { params, .. } => Some((l, params)),
                _ => None,
            })
            .collect()
    }

    /// Patchified images stacked into one `(B·m) × patch_dim` matrix.
    pub fn patch_tokens(&self, images: &[Tensor]) -> Result<Tensor> {
        let cfg = &self.cfg;
        let want = [cfg.image_size, cfg.image_size, cfg.channels];
        let mut data = Vec::with_capacity(images.len() * cfg.tokens() * cfg.patch_dim());
        for img in images {
            if img.dims() != want {
                return Err(Error::shape(format!(
                    "encoder expects {want:?} images, got {:?}",
                    img.dims()
                )));
            }
            data.extend(patchify(img, cfg.patch_size)?.into_data());
        }
        Tensor::new(vec![images.len() * cfg.tokens(), cfg.patch_dim()], data)
    }

    /// Records the forward pass of a batch. With `capture`, soft routing
    /// weights of every MoE layer and sequence are kept.
    pub fn forward_graph(&self, g: &mut Graph, b: &Bindings, images: &[Tensor], capture: bool) -> Result<ForwardVars> {
        if images.is_empty() {
            return Err(Error::usage("forward needs at least one image"));
        }
        let (bs, m) = (images.len(), self.cfg.tokens());
        let patches = g.leaf(self.patch_tokens(images)?);
        let x = g.matmul(patches, b[self.patch_w])?;
        let x = g.add_row(x, b[self.patch_b])?;
        let pos_rows = Arc::new((0..bs).flat_map(|_| 0..m).collect());
        let pos = g.gather_rows(b[self.pos], pos_rows)?;
        let mut x = g.add(x, pos)?;

        let mut stats = RouterStats::default();
        let mut aux_terms = Vec::new();
        let mut routing = Vec::new();
        for (l, block) in self.blocks.iter().enumerate() {
            let h = block.ln1.apply(g, b, x)?;
            let a = self.attention(g, b, &block.attn, h, bs)?;
            x = g.add(x, a)?;
            let h = block.ln2.apply(g, b, x)?;
            let f = match &block.ffn {
                Ffn::Dense(mlp) => mlp.apply(g, b, h)?,
                Ffn::Soft { params, variant } => {
                    let seqs = (0..bs)
                        .map(|s| g.gather_rows(h, range(s * m, (s + 1) * m)))
                        .collect::<Result<Vec<_>>>()?;
                    let outs = soft_moe::forward_batch_graph(g, b, params, &seqs, *variant)?;
                    if capture {
                        for (s, out) in outs.iter().enumerate() {
                            routing.push(CapturedRouting {
                                layer: l,
                                sequence: s,
                                weights: soft_moe::routing_weights(g, out),
                            });
                        }
                    }
                    let ys: Vec<Var> = outs.iter().map(|o| o.y).collect();
                    g.concat_rows(&ys)?
                }
                Ffn::Sparse {
                    router_w,
                    experts,
                    router,
                    group_size,
                } => {
                    let mut outs = Vec::new();
                    for start in (0..bs).step_by(*group_size) {
                        let end = (start + group_size).min(bs);
                        let hs = g.gather_rows(h, range(start * m, end * m))?;
                        let (y, aux, drop) = sparse_group(g, b, hs, *router_w, experts, router)?;
                        aux_terms.push(aux);
                        stats.drop_rate += drop;
                        stats.sparse_groups += 1;
                        outs.push(y);
                    }
                    g.concat_rows(&outs)?
                }
            };
            if block.ffn.is_moe() {
                stats.moe_row_spread = stats.moe_row_spread.max(row_spread(g.value(f), m));
            }
            x = g.add(x, f)?;
        }
        let tokens = self.final_ln.apply(g, b, x)?;
        let mut pooled = Vec::with_capacity(bs);
        for s in 0..bs {
            let ts = g.gather_rows(tokens, range(s * m, (s + 1) * m))?;
            pooled.push(g.mean_axis(ts, 0)?);
        }
        let pooled = g.concat_rows(&pooled)?;
        let logits = g.matmul(pooled, b[self.head_w])?;
        let logits = g.add_row(logits, b[self.head_b])?;

        let aux_loss = if aux_terms.is_empty() {
            None
        } else {
            let n = aux_terms.len() as f64;
            stats.drop_rate /= n;
            let mut total = aux_terms[0];
            for &t in &aux_terms[1..] {
                total = g.add(total, t)?;
            }
            let mean = g.scale(total, 1.0 / n)?;
            stats.aux_loss = g.value(mean).item();
            Some(mean)
        };
        Ok(ForwardVars {
            logits,
            tokens,
            aux_loss,
            stats,
            routing,
        })
    }

    fn attention(&self, g: &mut Graph, b: &Bindings, attn: &Attention, x: Var, bs: usize) -> Result<Var> {
        let m = self.cfg.tokens();
        let inv_sqrt = 1.0 / (self.cfg.head_dim() as f64).sqrt();
        let mut out: Option<Var> = None;
        for head in &attn.heads {
            let q = g.matmul(x, b[head.wq])?;
            let q = g.add_row(q, b[head.bq])?;
            let k = g.matmul(x, b[head.wk])?;
            let k = g.add_row(k, b[head.bk])?;
            let v = g.matmul(x, b[head.wv])?;
            let v = g.add_row(v, b[head.bv])?;
            let mut per_seq = Vec::with_capacity(bs);
            for s in 0..bs {
                let rows = range(s * m, (s + 1) * m);
                let qs = g.gather_rows(q, Arc::clone(&rows))?;
                let ks = g.gather_rows(k, Arc::clone(&rows))?;
                let vs = g.gather_rows(v, rows)?;
                let kt = g.transpose(ks)?;
                let scores = g.matmul(qs, kt)?;
                let scores = g.scale(scores, inv_sqrt)?;
                let probs = g.softmax(scores, 1)?;
                per_seq.push(g.matmul(probs, vs)?);
            }
            let ctx = g.concat_rows(&per_seq)?;
            let proj = g.matmul(ctx, b[head.wo])?;
            out = Some(match out {
                Some(acc) => g.add(acc, proj)?,
                None => proj,
            });
        }
        let out = out.ok_or_else(|| Error::usage("attention needs at least one head"))?;
        g.add_row(out, b[attn.bo])
    }

    /// Cross-entropy of `labels` plus the weighted auxiliary loss.
    pub fn loss_graph(&self, g: &mut Graph, b: &Bindings, images: &[Tensor], labels: &[usize]) -> Result<LossVars> {
        if images.len() != labels.len() {
            return Err(Error::usage("one label per image"));
        }
        let classes = self.cfg.num_classes;
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::usage(format!("label {bad} out of range for {classes} classes")));
        }
        let forward = self.forward_graph(g, b, images, false)?;
        let logp = g.log_softmax(forward.logits, 1)?;
        let picks = Arc::new(labels.iter().enumerate().map(|(i, &l)| i * classes + l).collect());
        let picked = g.gather(logp, picks, &[labels.len(), 1])?;
        let mean = g.mean(picked)?;
        let cross_entropy = g.scale(mean, -1.0)?;
        let loss = match forward.aux_loss {
            Some(aux) => {
                let w = g.scale(aux, AUX_LOSS_WEIGHT)?;
                g.add(cross_entropy, w)?
            }
            None => cross_entropy,
        };
        Ok(LossVars {
            loss,
            cross_entropy,
            forward,
        })
    }

    /// Forward pass without keeping the graph.
    pub fn forward(&self, store: &ParamStore, images: &[Tensor], capture: bool) -> Result<EncoderOutput> {
        let mut g = Graph::new();
        let b = store.bind(&mut g);
        let out = self.forward_graph(&mut g, &b, images, capture)?;
        let m = self.cfg.tokens();
        let tokens = g.value(out.tokens);
        let tokens = (0..images.len())
            .map(|s| {
                Tensor::new(
                    vec![m, self.cfg.width],
                    tokens.data()[s * m * self.cfg.width..(s + 1) * m * self.cfg.width].to_vec(),
                )
            })
            .collect::<Result<_>>()?;
        Ok(EncoderOutput {
            logits: g.value(out.logits).clone(),
            tokens,
            stats: out.stats,
            routing: out.routing,
        })
    }
}

/// Routes one group through a sparse MoE branch. Returns the output, the
/// load-balancing loss and the drop rate.
fn sparse_group(
    g: &mut Graph,
    b: &Bindings,
    x: Var,
    router_w: ParamId,
    experts: &[Expert],
    router: &SparseRouter,
) -> Result<(Var, Var, f64)> {
    let logits = g.matmul(x, b[router_w])?;
    let gates = g.softmax(logits, 1)?;
    let scores = RouterScores::new(g.value(gates).clone())?;
    let assignment: SparseAssignment = router.route(&scores)?;
    let y = sparse_forward_graph(g, b, x, Some(gates), &assignment, experts)?;
    let aux = load_balance_loss_graph(g, gates, &assignment)?;
    Ok((y, aux, assignment.stats().drop_rate))
}

/// Largest deviation of any row from the first row of its sequence.
fn row_spread(y: &Tensor, m: usize) -> f64 {
    let mut spread: f64 = 0.0;
    for s in 0..y.rows() / m {
        let first = y.row(s * m);
        for i in s * m + 1..(s + 1) * m {
            for (a, b) in y.row(i).iter().zip(first) {
                spread = spread.max((a - b).abs());
            }
        }
    }
    spread
}

/// Whether the router kind keeps every sequence independent of its batch.
pub fn is_per_sequence(cfg: &EncoderConfig) -> bool {
    match cfg.moe.router {
        RouterKind::Dense | RouterKind::Soft => true,
        RouterKind::TokensChoice | RouterKind::ExpertsChoice => cfg.moe.group_size == 1,
    }
}
