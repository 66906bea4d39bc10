//! Fixed-routing ablations of the Soft MoE layer.
//!
//! Each variant keeps the slot/expert pipeline and swaps the dispatch and/or
//! combine matrix for a content-independent one.

use std::fmt;
use std::str::FromStr;

use crate::autodiff::{Bindings, Graph, ParamStore, Var};
use crate::error::{Error, Result};
use crate::soft_moe::{self, logits_graph, routing_weights, RoutingWeights, SoftMoeParams};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum VariantKind {
    /// Learned dispatch and combine weights.
    #[default]
    Soft,
    /// Token `i` goes to slot `i` and back; needs `m == n·p`.
    Identity,
    /// Every slot is the token mean, every output the slot mean.
    Uniform,
    /// Uniform dispatch, learned combine.
    UniformSoft,
    /// Learned dispatch, uniform combine.
    SoftUniform,
}

impl VariantKind {
    pub const ALL: [VariantKind; 5] = [
        VariantKind::Soft,
        VariantKind::Identity,
        VariantKind::Uniform,
        VariantKind::UniformSoft,
        VariantKind::SoftUniform,
    ];

    pub fn name(self) -> &'static str {
        match self {
            VariantKind::Soft => "soft",
            VariantKind::Identity => "identity",
            VariantKind::Uniform => "uniform",
            VariantKind::UniformSoft => "uniform_soft",
            VariantKind::SoftUniform => "soft_uniform",
        }
    }

    fn learned_dispatch(self) -> bool {
        matches!(self, VariantKind::Soft | VariantKind::SoftUniform)
    }

    fn learned_combine(self) -> bool {
        matches!(self, VariantKind::Soft | VariantKind::UniformSoft)
    }
}

impl fmt::Display for VariantKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for VariantKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        VariantKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| {
                format!("unknown routing variant `{s}` (soft|identity|uniform|uniform_soft|soft_uniform)")
            })
    }
}

#[derive(Debug, Clone, Copy)]
pub struct WeightVars {
    pub dispatch: Var,
    pub combine: Var,
    pub logits: Option<Var>,
}

/// Dispatch/combine weights of `kind` for one sequence, recorded on `g`.
pub fn weights_graph(
    g: &mut Graph,
    b: &Bindings,
    params: &SoftMoeParams,
    x: Var,
    kind: VariantKind,
) -> Result<WeightVars> {
    let m = g.dims(x)[0];
    let slots = params.num_slots();
    if kind == VariantKind::Identity {
        if m != slots {
            return Err(Error::usage(format!(
                "identity routing needs as many tokens as slots, got m={m}, n·p={slots}"
            )));
        }
        let eye = g.leaf(Tensor::identity(m));
        return Ok(WeightVars {
            dispatch: eye,
            combine: eye,
            logits: None,
        });
    }

    let logits = if kind.learned_dispatch() || kind.learned_combine() {
        Some(logits_graph(g, b, params, x)?)
    } else {
        None
    };
    let dispatch = match logits {
        Some(l) if kind.learned_dispatch() => g.softmax(l, 0)?,
        _ => g.leaf(Tensor::filled(&[m, slots], 1.0 / m as f64)),
    };
    let combine = match logits {
        Some(l) if kind.learned_combine() => g.softmax(l, 1)?,
        _ => g.leaf(Tensor::filled(&[m, slots], 1.0 / slots as f64)),
    };
    Ok(WeightVars {
        dispatch,
        combine,
        logits,
    })
}

pub fn variant_weights(
    store: &ParamStore,
    params: &SoftMoeParams,
    x: &Tensor,
    kind: VariantKind,
) -> Result<RoutingWeights> {
    let mut g = Graph::new();
    let b = store.bind(&mut g);
    let xv = g.leaf(x.clone());
    let w = weights_graph(&mut g, &b, params, xv, kind)?;
    let dispatch = g.value(w.dispatch).clone();
    let logits = w
        .logits
        .map(|l| g.value(l).clone())
        .unwrap_or_else(|| Tensor::zeros(dispatch.dims()));
    Ok(RoutingWeights {
        combine: g.value(w.combine).clone(),
        dispatch,
        logits,
    })
}

/// Layer output (before any residual) under routing variant `kind`.
pub fn variant_forward(
    store: &ParamStore,
    params: &SoftMoeParams,
    x: &Tensor,
    kind: VariantKind,
) -> Result<(Tensor, RoutingWeights)> {
    let mut g = Graph::new();
    let b = store.bind(&mut g);
    let xv = g.leaf(x.clone());
    let out = soft_moe::forward_graph(&mut g, &b, params, xv, kind)?;
    Ok((g.value(out.y).clone(), routing_weights(&g, &out)))
}
