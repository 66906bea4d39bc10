//! The Soft MoE layer.
//!
//! Every slot is a convex combination of all input tokens (dispatch weights,
//! a softmax over tokens for each slot), each expert processes its `p` slots,
//! and every output token is a convex combination of all output slots
//! (combine weights, a softmax over slots for each token). Both weight
//! matrices come from the same `m × (n·p)` logits.

use std::sync::Arc;

use crate::autodiff::{Bindings, Graph, ParamId, ParamStore, Var};
use crate::error::{Error, Result};
use crate::rng::{glorot_init, Rng};
use crate::tensor::Tensor;
use crate::variants::{self, VariantKind};

/// Epsilon of the L2 normalization applied to tokens and slot parameters.
pub const L2_EPS: f64 = 1e-6;

/// Two-layer GELU MLP applied tokenwise: `dense(d→d_mlp) → GELU → dense(d_mlp→d)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ExpertMlp {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

impl ExpertMlp {
    /// Glorot weights, zero biases.
    pub fn new(store: &mut ParamStore, prefix: &str, d: usize, d_mlp: usize, rng: &mut Rng) -> Self {
        Self {
            w1: store.add(format!("{prefix}.w1"), glorot_init(rng, d, d_mlp)),
            b1: store.add(format!("{prefix}.b1"), Tensor::zeros(&[1, d_mlp])),
            w2: store.add(format!("{prefix}.w2"), glorot_init(rng, d_mlp, d)),
            b2: store.add(format!("{prefix}.b2"), Tensor::zeros(&[1, d])),
        }
    }

    pub fn apply(&self, g: &mut Graph, b: &Bindings, x: Var) -> Result<Var> {
        let h = g.matmul(x, b[self.w1])?;
        let h = g.add_row(h, b[self.b1])?;
        let h = g.gelu(h)?;
        let y = g.matmul(h, b[self.w2])?;
        g.add_row(y, b[self.b2])
    }

    pub fn param_ids(&self) -> [ParamId; 4] {
        [self.w1, self.b1, self.w2, self.b2]
    }
}

/// A per-token expert function.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Expert {
    Mlp(ExpertMlp),
    /// `f(x) = x`; handy for checking the routing algebra in isolation.
    Identity,
}

impl Expert {
    pub fn apply(&self, g: &mut Graph, b: &Bindings, x: Var) -> Result<Var> {
        match self {
            Expert::Mlp(mlp) => mlp.apply(g, b, x),
            Expert::Identity => Ok(x),
        }
    }
}

/// Shape hyperparameters of one Soft MoE layer.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SoftMoeShape {
    pub d: usize,
    pub d_mlp: usize,
    pub experts: usize,
    pub slots_per_expert: usize,
    pub normalize: bool,
}

/// Parameters of a Soft MoE layer, stored in a [`ParamStore`].
#[derive(Debug, Clone)]
pub struct SoftMoeParams {
    /// `d × (n·p)` slot parameters.
    pub phi: ParamId,
    /// Trainable scalar multiplying the normalized slot parameters.
    pub scale: ParamId,
    pub normalize: bool,
    pub experts: Vec<Expert>,
    pub slots_per_expert: usize,
    pub d: usize,
}

impl SoftMoeParams {
    pub fn new(store: &mut ParamStore, prefix: &str, shape: SoftMoeShape, rng: &mut Rng) -> Result<Self> {
        let SoftMoeShape {
            d,
            d_mlp,
            experts,
            slots_per_expert,
            normalize,
        } = shape;
        if d == 0 || d_mlp == 0 || experts == 0 || slots_per_expert == 0 {
            return Err(Error::usage(format!(
                "soft moe needs positive sizes, got {shape:?}"
            )));
        }
        let slots = experts * slots_per_expert;
        let phi = store.add(format!("{prefix}.phi"), glorot_init(rng, d, slots));
        let scale = store.add(format!("{prefix}.scale"), Tensor::scalar(1.0));
        let experts = (0..experts)
            .map(|e| Expert::Mlp(ExpertMlp::new(store, &format!("{prefix}.expert{e}"), d, d_mlp, rng)))
            .collect();
        Ok(Self {
            phi,
            scale,
            normalize,
            experts,
            slots_per_expert,
            d,
        })
    }

    pub fn num_experts(&self) -> usize {
        self.experts.len()
    }

    pub fn num_slots(&self) -> usize {
        self.experts.len() * self.slots_per_expert
    }

    /// Every parameter owned by the layer, Φ and `scale` first.
    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = vec![self.phi, self.scale];
        for e in &self.experts {
            if let Expert::Mlp(mlp) = e {
                ids.extend(mlp.param_ids());
            }
        }
        ids
    }
}

/// Dispatch and combine weights of one sequence, with the logits they came from.
#[derive(Debug, Clone, PartialEq)]
pub struct RoutingWeights {
    /// `m × (n·p)`, every column sums to 1.
    pub dispatch: Tensor,
    /// `m × (n·p)`, every row sums to 1.
    pub combine: Tensor,
    /// `m × (n·p)`; zeros for fixed-routing variants that have no logits.
    pub logits: Tensor,
}

/// Slot `i` is processed by expert `⌊i / p⌋`.
pub fn allocate_slots(experts: usize, slots_per_expert: usize) -> Vec<usize> {
    (0..experts * slots_per_expert)
        .map(|i| i / slots_per_expert)
        .collect()
}

fn check_input(g: &Graph, params: &SoftMoeParams, x: Var) -> Result<()> {
    let dims = g.dims(x);
    if dims.len() != 2 || dims[1] != params.d {
        return Err(Error::shape(format!(
            "soft moe expects m×{} tokens, got {dims:?}",
            params.d
        )));
    }
    g.value(x).ensure_finite("soft moe input")
}

/// Token-slot logits; with normalization on, tokens are L2-normalized per
/// row and Φ per column (times `scale`).
pub fn logits_graph(g: &mut Graph, b: &Bindings, params: &SoftMoeParams, x: Var) -> Result<Var> {
    check_input(g, params, x)?;
    if params.normalize {
        let xn = g.l2_normalize(x, 1, L2_EPS)?;
        let phin = g.l2_normalize(b[params.phi], 0, L2_EPS)?;
        let phis = g.mul_scalar(phin, b[params.scale])?;
        g.matmul(xn, phis)
    } else {
        g.matmul(x, b[params.phi])
    }
}

/// Graph handles produced by one layer application.
#[derive(Debug, Clone, Copy)]
pub struct SoftMoeVars {
    pub y: Var,
    pub dispatch: Var,
    pub combine: Var,
    pub logits: Option<Var>,
    pub slots_in: Var,
    pub slots_out: Var,
}

/// Applies the layer (or one of its fixed-routing variants) to one sequence.
pub fn forward_graph(
    g: &mut Graph,
    b: &Bindings,
    params: &SoftMoeParams,
    x: Var,
    kind: VariantKind,
) -> Result<SoftMoeVars> {
    check_input(g, params, x)?;
    let weights = variants::weights_graph(g, b, params, x, kind)?;
    let dispatch_t = g.transpose(weights.dispatch)?;
    let slots_in = g.matmul(dispatch_t, x)?;
    let slots_out = apply_experts(g, b, params, slots_in)?;
    let y = g.matmul(weights.combine, slots_out)?;
    Ok(SoftMoeVars {
        y,
        dispatch: weights.dispatch,
        combine: weights.combine,
        logits: weights.logits,
        slots_in,
        slots_out,
    })
}

/// Applies the layer to several sequences at once. Routing weights are
/// per sequence; each expert processes the slots of every sequence in a
/// single call. Rows never mix across sequences, so each result equals
/// [`forward_graph`] on that sequence alone.
pub fn forward_batch_graph(
    g: &mut Graph,
    b: &Bindings,
    params: &SoftMoeParams,
    xs: &[Var],
    kind: VariantKind,
) -> Result<Vec<SoftMoeVars>> {
    if xs.is_empty() {
        return Err(Error::usage("soft moe batch needs at least one sequence"));
    }
    let slots = params.num_slots();
    let p = params.slots_per_expert;
    let mut weights = Vec::with_capacity(xs.len());
    let mut slots_in = Vec::with_capacity(xs.len());
    for &x in xs {
        check_input(g, params, x)?;
        let w = variants::weights_graph(g, b, params, x, kind)?;
        let dt = g.transpose(w.dispatch)?;
        slots_in.push(g.matmul(dt, x)?);
        weights.push(w);
    }
    let all_in = if xs.len() == 1 { slots_in[0] } else { g.concat_rows(&slots_in)? };
    let all_out = if params.experts.len() == 1 {
        params.experts[0].apply(g, b, all_in)?
    } else {
        // expert-major stacking; `position[r]` is the stacked row of slot row r
        let mut outs = Vec::with_capacity(params.experts.len());
        let mut position = vec![0; xs.len() * slots];
        let mut next = 0;
        for (e, expert) in params.experts.iter().enumerate() {
            let rows: Vec<usize> = (0..xs.len())
                .flat_map(|s| (e * p..(e + 1) * p).map(move |j| s * slots + j))
                .collect();
            for &r in &rows {
                position[r] = next;
                next += 1;
            }
            let gathered = g.gather_rows(all_in, Arc::new(rows))?;
            outs.push(expert.apply(g, b, gathered)?);
        }
        let stacked = g.concat_rows(&outs)?;
        g.gather_rows(stacked, Arc::new(position))?
    };
    let mut out = Vec::with_capacity(xs.len());
    for (s, w) in weights.into_iter().enumerate() {
        let slots_out = if xs.len() == 1 {
            all_out
        } else {
            g.gather_rows(all_out, Arc::new((s * slots..(s + 1) * slots).collect()))?
        };
        let y = g.matmul(w.combine, slots_out)?;
        out.push(SoftMoeVars {
            y,
            dispatch: w.dispatch,
            combine: w.combine,
            logits: w.logits,
            slots_in: slots_in[s],
            slots_out,
        });
    }
    Ok(out)
}

/// Runs expert `⌊i/p⌋` on slot row `i` and restacks the outputs.
pub fn apply_experts(g: &mut Graph, b: &Bindings, params: &SoftMoeParams, slots: Var) -> Result<Var> {
    let p = params.slots_per_expert;
    if params.experts.len() == 1 {
        return params.experts[0].apply(g, b, slots);
    }
    let mut outs = Vec::with_capacity(params.experts.len());
    for (e, expert) in params.experts.iter().enumerate() {
        let rows = g.gather_rows(slots, Arc::new((e * p..(e + 1) * p).collect()))?;
        outs.push(expert.apply(g, b, rows)?);
    }
    g.concat_rows(&outs)
}

/// Logits for a token matrix, outside of any training graph.
pub fn compute_logits(store: &ParamStore, params: &SoftMoeParams, x: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new();
    let b = store.bind(&mut g);
    let xv = g.leaf(x.clone());
    let l = logits_graph(&mut g, &b, params, xv)?;
    Ok(g.value(l).clone())
}

/// Softmax over tokens for every slot column.
pub fn dispatch_weights(logits: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new();
    let l = g.leaf(logits.clone());
    let d = g.softmax(l, 0)?;
    Ok(g.value(d).clone())
}

/// Softmax over all slots jointly for every token row.
pub fn combine_weights(logits: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new();
    let l = g.leaf(logits.clone());
    let c = g.softmax(l, 1)?;
    Ok(g.value(c).clone())
}

/// Full layer on one sequence, returning outputs and the routing weights used.
pub fn forward(store: &ParamStore, params: &SoftMoeParams, x: &Tensor) -> Result<(Tensor, RoutingWeights)> {
    let mut g = Graph::new();
    let b = store.bind(&mut g);
    let xv = g.leaf(x.clone());
    let out = forward_graph(&mut g, &b, params, xv, VariantKind::Soft)?;
    let weights = routing_weights(&g, &out);
    Ok((g.value(out.y).clone(), weights))
}

pub(crate) fn routing_weights(g: &Graph, out: &SoftMoeVars) -> RoutingWeights {
    let dispatch = g.value(out.dispatch).clone();
    let logits = out
        .logits
        .map(|l| g.value(l).clone())
        .unwrap_or_else(|| Tensor::zeros(dispatch.dims()));
    RoutingWeights {
        combine: g.value(out.combine).clone(),
        dispatch,
        logits,
    }
}
