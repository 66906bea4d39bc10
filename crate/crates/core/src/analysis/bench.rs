//! Single-layer forward+backward timing across expert counts.

use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::sync::Arc;
use std::time::Instant;

use crate::autodiff::{Graph, ParamStore};
use crate::error::{Error, Result};
use crate::rng::{glorot_init, Rng};
use crate::soft_moe::{self, Expert, ExpertMlp, SoftMoeParams, SoftMoeShape};
use crate::sparse::{sparse_forward_graph, RouterScores, SparseRouter};
use crate::variants::VariantKind;

pub const BENCH_CSV_HEADER: &str = "router,experts,slots,sequences,tokens,d,d_mlp,reps,median_ms,min_ms";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BenchRouter {
    Soft,
    TokensChoice,
    Dense,
}

impl BenchRouter {
    pub fn name(self) -> &'static str {
        match self {
            BenchRouter::Soft => "soft",
            BenchRouter::TokensChoice => "tokens_choice",
            BenchRouter::Dense => "dense",
        }
    }
}

impl fmt::Display for BenchRouter {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for BenchRouter {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "soft" => Ok(BenchRouter::Soft),
            "tokens_choice" => Ok(BenchRouter::TokensChoice),
            "dense" => Ok(BenchRouter::Dense),
            _ => Err(format!("unknown bench router `{s}` (soft|tokens_choice|dense)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchGrid {
    pub routers: Vec<BenchRouter>,
    pub experts: Vec<usize>,
    /// Soft layer `n·p`, held fixed across expert counts.
    pub total_slots: usize,
    /// Sequences per batch; soft routing is per sequence, experts run once
    /// over the slots of all of them.
    pub sequences: usize,
    /// Tokens per sequence.
    pub tokens: usize,
    pub d: usize,
    pub d_mlp: usize,
    pub warmup: usize,
    pub reps: usize,
}

impl Default for BenchGrid {
    fn default() -> Self {
        Self {
            routers: vec![BenchRouter::Soft, BenchRouter::TokensChoice, BenchRouter::Dense],
            experts: vec![8, 64, 256],
            total_slots: 256,
            sequences: 8,
            tokens: 64,
            d: 64,
            d_mlp: 128,
            warmup: 3,
            reps: 20,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    pub router: BenchRouter,
    /// Expert count; 1 for the dense layer.
    pub experts: usize,
    pub slots: usize,
    pub median_ms: f64,
    pub min_ms: f64,
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Builds one layer and returns a closure running forward+backward once.
fn layer_runner(grid: &BenchGrid, router: BenchRouter, experts: usize, rng: &mut Rng) -> Result<Box<dyn FnMut() -> Result<()>>> {
    let x = rng.normal_tensor(&[grid.sequences * grid.tokens, grid.d], 1.0);
    let m = grid.tokens;
    let seqs = grid.sequences;
    let mut store = ParamStore::new();
    match router {
        BenchRouter::Soft => {
            if grid.total_slots % experts != 0 {
                return Err(Error::usage(format!(
                    "{experts} experts do not divide {} slots",
                    grid.total_slots
                )));
            }
            let shape = SoftMoeShape {
                d: grid.d,
                d_mlp: grid.d_mlp,
                experts,
                slots_per_expert: grid.total_slots / experts,
                normalize: true,
            };
            let params = SoftMoeParams::new(&mut store, "moe", shape, rng)?;
            Ok(Box::new(move || {
                let mut g = Graph::new();
                let b = store.bind(&mut g);
                let xv = g.leaf(x.clone());
                let parts = (0..seqs)
                    .map(|s| g.gather_rows(xv, Arc::new((s * m..(s + 1) * m).collect())))
                    .collect::<Result<Vec<_>>>()?;
                let outs = soft_moe::forward_batch_graph(&mut g, &b, &params, &parts, VariantKind::Soft)?;
                let ys: Vec<_> = outs.iter().map(|o| o.y).collect();
                let y = g.concat_rows(&ys)?;
                let loss = g.sum(y)?;
                g.backward(loss).map(|_| ())
            }))
        }
        BenchRouter::TokensChoice => {
            let router_w = store.add("router", glorot_init(rng, grid.d, experts));
            let experts: Vec<Expert> = (0..experts)
                .map(|e| Expert::Mlp(ExpertMlp::new(&mut store, &format!("expert{e}"), grid.d, grid.d_mlp, rng)))
                .collect();
            let router = SparseRouter::TokensChoice {
                k: 1,
                capacity_factor: 1.0,
                bpr: true,
            };
            Ok(Box::new(move || {
                let mut g = Graph::new();
                let b = store.bind(&mut g);
                let xv = g.leaf(x.clone());
                let logits = g.matmul(xv, b[router_w])?;
                let gates = g.softmax(logits, 1)?;
                let assignment = router.route(&RouterScores::new(g.value(gates).clone())?)?;
                let y = sparse_forward_graph(&mut g, &b, xv, Some(gates), &assignment, &experts)?;
                let loss = g.sum(y)?;
                g.backward(loss).map(|_| ())
            }))
        }
        BenchRouter::Dense => {
            let mlp = ExpertMlp::new(&mut store, "mlp", grid.d, grid.d_mlp, rng);
            Ok(Box::new(move || {
                let mut g = Graph::new();
                let b = store.bind(&mut g);
                let xv = g.leaf(x.clone());
                let y = mlp.apply(&mut g, &b, xv)?;
                let loss = g.sum(y)?;
                g.backward(loss).map(|_| ())
            }))
        }
    }
}

/// Median and minimum milliseconds of `reps` timed runs after `warmup`
/// discarded ones.
pub fn time_runs(run: &mut dyn FnMut() -> Result<()>, warmup: usize, reps: usize) -> Result<(f64, f64)> {
    for _ in 0..warmup {
        run()?;
    }
    let mut times = Vec::with_capacity(reps);
    for _ in 0..reps {
        let t = Instant::now();
        run()?;
        times.push(t.elapsed().as_secs_f64() * 1e3);
    }
    let min = times.iter().copied().fold(f64::INFINITY, f64::min);
    Ok((median(&mut times), min))
}

/// Times every router at every expert count on the calling thread. The
/// dense layer is timed once.
pub fn throughput_bench(grid: &BenchGrid, rng: &Rng) -> Result<Vec<BenchRow>> {
    if grid.warmup < 3 || grid.reps < 20 {
        return Err(Error::config("bench.reps", "need at least 3 warmup and 20 timed reps"));
    }
    let mut rows = Vec::new();
    for &router in &grid.routers {
        let counts: &[usize] = if router == BenchRouter::Dense { &[1] } else { &grid.experts };
        for &e in counts {
            let mut run = layer_runner(grid, router, e, &mut rng.fork(e as u64))?;
            let (median_ms, min_ms) = time_runs(&mut *run, grid.warmup, grid.reps)?;
            rows.push(BenchRow {
                router,
                experts: e,
                slots: if router == BenchRouter::Soft { grid.total_slots } else { e },
                median_ms,
                min_ms,
            });
        }
    }
    Ok(rows)
}

pub fn write_bench_csv(path: &Path, grid: &BenchGrid, rows: &[BenchRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(BENCH_CSV_HEADER.split(','))?;
    for r in rows {
        w.write_record([
            r.router.to_string(),
            r.experts.to_string(),
            r.slots.to_string(),
            grid.sequences.to_string(),
            grid.tokens.to_string(),
            grid.d.to_string(),
            grid.d_mlp.to_string(),
            grid.reps.to_string(),
            r.median_ms.to_string(),
            r.min_ms.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Medians as `x,y,series` with `x` the expert count.
pub fn write_bench_long_csv(path: &Path, rows: &[BenchRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["x", "y", "series"])?;
    for r in rows {
        w.write_record([r.experts.to_string(), r.median_ms.to_string(), r.router.to_string()])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
