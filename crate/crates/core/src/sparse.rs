//! Discrete baseline routers: Tokens Choice (top-K with capacity, optional
//! batch priority routing) and Experts Choice (top-C tokens per expert),
//! with the dropping and load statistics used to compare them.

use std::path::Path;
use std::sync::Arc;

use rayon::prelude::*;

use crate::autodiff::{Bindings, Graph, ParamStore, Var};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::soft_moe::Expert;
use crate::tensor::Tensor;

pub const SWEEP_CSV_HEADER: &str =
    "router,E,K,c,bpr,group,drop_rate,multi_select_rate,max_load,min_load";

/// Per-(token, expert) routing probabilities, `T × E`, rows summing to 1.
#[derive(Debug, Clone, PartialEq)]
pub struct RouterScores {
    gates: Tensor,
}

impl RouterScores {
    pub fn new(gates: Tensor) -> Result<Self> {
        if !gates.is_matrix() {
            return Err(Error::shape("router scores must be a T×E matrix"));
        }
        gates.ensure_finite("router scores")?;
        for t in 0..gates.rows() {
            let row = gates.row(t);
            let total: f64 = row.iter().sum();
            if (total - 1.0).abs() > 1e-9 || row.iter().any(|&g| g < 0.0) {
                return Err(Error::numeric(format!(
                    "router score row {t} is not a distribution (sum {total})"
                )));
            }
        }
        Ok(Self { gates })
    }

    /// Row-wise softmax of router logits.
    pub fn from_logits(logits: &Tensor) -> Result<Self> {
        logits.ensure_finite("router logits")?;
        Self::new(crate::autodiff::softmax_forward(logits, 1)?)
    }

    pub fn gates(&self) -> &Tensor {
        &self.gates
    }

    pub fn tokens(&self) -> usize {
        self.gates.rows()
    }

    pub fn experts(&self) -> usize {
        self.gates.cols()
    }

    pub fn gate(&self, token: usize, expert: usize) -> f64 {
        self.gates.at(token, expert)
    }

    fn max_gate(&self, token: usize) -> f64 {
        self.gates.row(token).iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SparseRouter {
    TokensChoice { k: usize, capacity_factor: f64, bpr: bool },
    ExpertsChoice { capacity_factor: f64 },
}

impl SparseRouter {
    pub fn name(&self) -> &'static str {
        match self {
            SparseRouter::TokensChoice { .. } => "tokens_choice",
            SparseRouter::ExpertsChoice { .. } => "experts_choice",
        }
    }

    pub fn route(&self, scores: &RouterScores) -> Result<SparseAssignment> {
        match *self {
            SparseRouter::TokensChoice {
                k,
                capacity_factor,
                bpr,
            } => tokens_choice_route(scores, k, capacity_factor, bpr),
            SparseRouter::ExpertsChoice { capacity_factor } => {
                experts_choice_route(scores, capacity_factor)
            }
        }
    }
}

/// Result of a sparse router on one group.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseAssignment {
    /// Per expert, `(token, gate)` pairs in the order they were admitted.
    pub buffers: Vec<Vec<(usize, f64)>>,
    /// Tokens that no expert processes, ascending.
    pub dropped: Vec<usize>,
    pub capacity: usize,
    pub router: SparseRouter,
    pub num_tokens: usize,
}

/// Dropping and balance statistics of one assignment.
#[derive(Debug, Clone, PartialEq)]
pub struct DropStats {
    pub drop_rate: f64,
    pub per_expert_load: Vec<usize>,
    /// Fraction of tokens placed in two or more buffers.
    pub multi_select_rate: f64,
}

impl SparseAssignment {
    /// Number of buffers each token landed in.
    pub fn claims(&self) -> Vec<usize> {
        let mut claims = vec![0; self.num_tokens];
        for buf in &self.buffers {
            for &(t, _) in buf {
                claims[t] += 1;
            }
        }
        claims
    }

    pub fn stats(&self) -> DropStats {
        let claims = self.claims();
        let t = self.num_tokens as f64;
        DropStats {
            drop_rate: self.dropped.len() as f64 / t,
            per_expert_load: self.buffers.iter().map(Vec::len).collect(),
            multi_select_rate: claims.iter().filter(|&&c| c >= 2).count() as f64 / t,
        }
    }

    /// Sum over dropped tokens of their largest gate.
    pub fn dropped_gate_mass(&self, scores: &RouterScores) -> f64 {
        self.dropped.iter().map(|&t| scores.max_gate(t)).sum()
    }
}

/// `ceil(c·K·T/E)`, with a small tolerance so exact products are not bumped
/// up by float noise (e.g. `c = 2/3`, `T = 3`).
pub fn tokens_choice_capacity(tokens: usize, experts: usize, k: usize, capacity_factor: f64) -> usize {
    let raw = capacity_factor * (k * tokens) as f64 / experts as f64;
    ((raw - 1e-9).ceil() as usize).max(1)
}

/// `round(c·T/E)`, at least 1 and at most `T`.
pub fn experts_choice_capacity(tokens: usize, experts: usize, capacity_factor: f64) -> usize {
    let raw = capacity_factor * tokens as f64 / experts as f64;
    (raw.round() as usize).clamp(1, tokens)
}

/// Experts sorted by decreasing gate, ties to the lower index.
fn ranked_experts(scores: &RouterScores, token: usize) -> Vec<usize> {
    let row = scores.gates.row(token);
    let mut order: Vec<usize> = (0..row.len()).collect();
    order.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
    order
}

fn dropped_from(buffers: &[Vec<(usize, f64)>], tokens: usize) -> Vec<usize> {
    let mut seen = vec![false; tokens];
    for buf in buffers {
        for &(t, _) in buf {
            seen[t] = true;
        }
    }
    (0..tokens).filter(|&t| !seen[t]).collect()
}

/// Each token claims its top-K experts in decreasing gate order, skipping
/// experts whose buffer is full. Tokens go in index order, or with `bpr` in
/// decreasing order of their largest gate.
pub fn tokens_choice_route(
    scores: &RouterScores,
    k: usize,
    capacity_factor: f64,
    bpr: bool,
) -> Result<SparseAssignment> {
    let (tokens, experts) = (scores.tokens(), scores.experts());
    if tokens == 0 {
        return Err(Error::usage("cannot route an empty group"));
    }
    if k == 0 || k > experts {
        return Err(Error::usage(format!("need 1 <= K <= E, got K={k}, E={experts}")));
    }
    if !(capacity_factor > 0.0) {
        return Err(Error::usage(format!("capacity factor must be positive, got {capacity_factor}")));
    }
    let capacity = tokens_choice_capacity(tokens, experts, k, capacity_factor);

    let mut order: Vec<usize> = (0..tokens).collect();
    if bpr {
        // stable: equal priorities keep index order
        order.sort_by(|&a, &b| scores.max_gate(b).total_cmp(&scores.max_gate(a)));
    }

    let mut buffers: Vec<Vec<(usize, f64)>> = vec![Vec::new(); experts];
    for &t in &order {
        for &e in ranked_experts(scores, t).iter().take(k) {
            if buffers[e].len() < capacity {
                buffers[e].push((t, scores.gate(t, e)));
            }
        }
    }
    Ok(SparseAssignment {
        dropped: dropped_from(&buffers, tokens),
        buffers,
        capacity,
        router: SparseRouter::TokensChoice {
            k,
            capacity_factor,
            bpr,
        },
        num_tokens: tokens,
    })
}

/// Each expert takes its top-C tokens by gate, ties to the lower token index.
pub fn experts_choice_route(scores: &RouterScores, capacity_factor: f64) -> Result<SparseAssignment> {
    let (tokens, experts) = (scores.tokens(), scores.experts());
    if tokens == 0 {
        return Err(Error::usage("cannot route an empty group"));
    }
    if !(capacity_factor > 0.0) {
        return Err(Error::usage(format!("capacity factor must be positive, got {capacity_factor}")));
    }
    if experts as f64 > tokens as f64 * capacity_factor {
        return Err(Error::usage(format!(
            "experts choice needs E <= c·T, got E={experts}, c·T={}",
            tokens as f64 * capacity_factor
        )));
    }
    let capacity = experts_choice_capacity(tokens, experts, capacity_factor);
    let gates = scores.gates();
    let buffers: Vec<Vec<(usize, f64)>> = (0..experts)
        .map(|e| {
            let mut order: Vec<usize> = (0..tokens).collect();
            order.sort_by(|&a, &b| gates.at(b, e).total_cmp(&gates.at(a, e)).then(a.cmp(&b)));
            order
                .into_iter()
                .take(capacity)
                .map(|t| (t, gates.at(t, e)))
                .collect()
        })
        .collect();
    Ok(SparseAssignment {
        dropped: dropped_from(&buffers, tokens),
        buffers,
        capacity,
        router: SparseRouter::ExpertsChoice { capacity_factor },
        num_tokens: tokens,
    })
}

/// Records `Σ_buffers gate · f_e(x_t)` for every token of `x` (`T × d`).
///
/// Gate weights are read from `gates` (a `T × E` graph value) when given, so
/// the router receives gradients; otherwise the assignment's stored gates
/// are used as constants. Dropped tokens get a zero row.
pub fn sparse_forward_graph(
    g: &mut Graph,
    b: &Bindings,
    x: Var,
    gates: Option<Var>,
    assignment: &SparseAssignment,
    experts: &[Expert],
) -> Result<Var> {
    if experts.len() != assignment.buffers.len() {
        return Err(Error::usage(format!(
            "assignment has {} buffers but {} experts were given",
            assignment.buffers.len(),
            experts.len()
        )));
    }
    let dims = g.dims(x).to_vec();
    if dims.len() != 2 || dims[0] != assignment.num_tokens {
        return Err(Error::shape(format!(
            "assignment covers {} tokens, input is {dims:?}",
            assignment.num_tokens
        )));
    }
    let (tokens, width) = (dims[0], dims[1]);
    let num_experts = experts.len();
    let mut total: Option<Var> = None;
    for (e, (buf, expert)) in assignment.buffers.iter().zip(experts).enumerate() {
        if buf.is_empty() {
            continue;
        }
        let rows = Arc::new(buf.iter().map(|&(t, _)| t).collect::<Vec<_>>());
        let xs = g.gather_rows(x, Arc::clone(&rows))?;
        let ys = expert.apply(g, b, xs)?;
        let w = match gates {
            Some(gv) => {
                let flat = Arc::new(rows.iter().map(|&t| t * num_experts + e).collect());
                g.gather(gv, flat, &[rows.len(), 1])?
            }
            None => g.leaf(Tensor::new(
                vec![rows.len(), 1],
                buf.iter().map(|&(_, w)| w).collect(),
            )?),
        };
        let weighted = g.scale_rows(ys, w)?;
        let placed = g.scatter_add_rows(weighted, rows, tokens)?;
        total = Some(match total {
            Some(acc) => g.add(acc, placed)?,
            None => placed,
        });
    }
    Ok(match total {
        Some(v) => v,
        None => g.leaf(Tensor::zeros(&[tokens, width])),
    })
}

/// Output of the sparse MoE branch for a group of tokens.
pub fn sparse_forward(
    store: &ParamStore,
    x: &Tensor,
    assignment: &SparseAssignment,
    experts: &[Expert],
) -> Result<Tensor> {
    let mut g = Graph::new();
    let b = store.bind(&mut g);
    let xv = g.leaf(x.clone());
    let y = sparse_forward_graph(&mut g, &b, xv, None, assignment, experts)?;
    Ok(g.value(y).clone())
}

fn squared_cv(values: &[f64]) -> f64 {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if mean == 0.0 {
        return 0.0;
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    var / (mean * mean)
}

/// Mean of the squared coefficients of variation of per-expert importance
/// (summed gates) and per-expert load (assigned tokens).
pub fn load_balance_loss(scores: &RouterScores, assignment: &SparseAssignment) -> f64 {
    let gates = scores.gates();
    let importance: Vec<f64> = (0..scores.experts())
        .map(|e| (0..scores.tokens()).map(|t| gates.at(t, e)).sum())
        .collect();
    let load: Vec<f64> = assignment.buffers.iter().map(|b| b.len() as f64).collect();
    0.5 * (squared_cv(&importance) + squared_cv(&load))
}

/// Differentiable version of [`load_balance_loss`]; the load term is a
/// constant since assignments are discrete.
pub fn load_balance_loss_graph(g: &mut Graph, gates: Var, assignment: &SparseAssignment) -> Result<Var> {
    let (tokens, experts) = (g.dims(gates)[0], g.dims(gates)[1]);
    // rows sum to one, so the mean importance is exactly T/E
    let mean = tokens as f64 / experts as f64;
    let importance = g.sum_axis(gates, 0)?;
    let offset = g.leaf(Tensor::filled(&[1, experts], -mean));
    let centered = g.add(importance, offset)?;
    let sq = g.mul(centered, centered)?;
    let var = g.mean(sq)?;
    let cv_importance = g.scale(var, 1.0 / (mean * mean))?;
    let load: Vec<f64> = assignment.buffers.iter().map(|b| b.len() as f64).collect();
    let cv_load = g.leaf(Tensor::scalar(squared_cv(&load)));
    let total = g.add(cv_importance, cv_load)?;
    g.scale(total, 0.5)
}

/// Random router scores: softmax of i.i.d. Gaussian logits.
pub fn random_scores(rng: &mut Rng, tokens: usize, experts: usize, logit_std: f64) -> Result<RouterScores> {
    RouterScores::from_logits(&rng.normal_tensor(&[tokens, experts], logit_std))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RouterFamily {
    TokensChoice,
    ExpertsChoice,
}

impl RouterFamily {
    pub fn name(self) -> &'static str {
        match self {
            RouterFamily::TokensChoice => "tokens_choice",
            RouterFamily::ExpertsChoice => "experts_choice",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "tokens_choice" => Some(RouterFamily::TokensChoice),
            "experts_choice" => Some(RouterFamily::ExpertsChoice),
            _ => None,
        }
    }
}

/// Grid of a dropping sweep over synthetic score matrices.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepGrid {
    pub routers: Vec<RouterFamily>,
    pub experts: Vec<usize>,
    pub ks: Vec<usize>,
    pub capacity_factors: Vec<f64>,
    pub bpr: Vec<bool>,
    pub group_tokens: usize,
    pub samples: usize,
    pub logit_std: f64,
}

impl Default for SweepGrid {
    fn default() -> Self {
        Self {
            routers: vec![RouterFamily::TokensChoice, RouterFamily::ExpertsChoice],
            experts: vec![8, 16, 32, 64, 128],
            ks: vec![1],
            capacity_factors: vec![1.0, 1.125],
            bpr: vec![false, true],
            group_tokens: 256,
            samples: 100,
            logit_std: 1.0,
        }
    }
}

impl SweepGrid {
    pub fn cells(&self) -> Vec<SparseCell> {
        let mut cells = Vec::new();
        for &family in &self.routers {
            for &e in &self.experts {
                match family {
                    RouterFamily::TokensChoice => {
                        for &k in &self.ks {
                            for &c in &self.capacity_factors {
                                for &bpr in &self.bpr {
                                    cells.push(SparseCell {
                                        experts: e,
                                        router: SparseRouter::TokensChoice {
                                            k,
                                            capacity_factor: c,
                                            bpr,
                                        },
                                    });
                                }
                            }
                        }
                    }
                    RouterFamily::ExpertsChoice => {
                        for &c in &self.capacity_factors {
                            cells.push(SparseCell {
                                experts: e,
                                router: SparseRouter::ExpertsChoice { capacity_factor: c },
                            });
                        }
                    }
                }
            }
        }
        cells
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SparseCell {
    pub experts: usize,
    pub router: SparseRouter,
}

/// One averaged row of a dropping sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub router: &'static str,
    pub experts: usize,
    /// `None` for Experts Choice.
    pub k: Option<usize>,
    pub capacity_factor: f64,
    pub bpr: bool,
    pub group: usize,
    pub drop_rate: f64,
    pub multi_select_rate: f64,
    pub max_load: f64,
    pub min_load: f64,
}

/// Score matrix `sample` for expert count `experts`; shared by every cell
/// with the same `E`, so routers are compared on identical inputs.
pub fn sweep_scores(rng: &Rng, grid: &SweepGrid, experts: usize, sample: usize) -> Result<RouterScores> {
    let mut r = rng.fork(experts as u64).fork(sample as u64);
    random_scores(&mut r, grid.group_tokens, experts, grid.logit_std)
}

fn run_cell(rng: &Rng, grid: &SweepGrid, cell: &SparseCell) -> Result<SweepRow> {
    let mut drop = 0.0;
    let mut multi = 0.0;
    let mut max_load = 0.0;
    let mut min_load = 0.0;
    for s in 0..grid.samples {
        let scores = sweep_scores(rng, grid, cell.experts, s)?;
        let stats = cell.router.route(&scores)?.stats();
        drop += stats.drop_rate;
        multi += stats.multi_select_rate;
        max_load += *stats.per_expert_load.iter().max().unwrap_or(&0) as f64;
        min_load += *stats.per_expert_load.iter().min().unwrap_or(&0) as f64;
    }
    let n = grid.samples as f64;
    let (k, c, bpr) = match cell.router {
        SparseRouter::TokensChoice {
            k,
            capacity_factor,
            bpr,
        } => (Some(k), capacity_factor, bpr),
        SparseRouter::ExpertsChoice { capacity_factor } => (None, capacity_factor, false),
    };
    Ok(SweepRow {
        router: cell.router.name(),
        experts: cell.experts,
        k,
        capacity_factor: c,
        bpr,
        group: grid.group_tokens,
        drop_rate: drop / n,
        multi_select_rate: multi / n,
        max_load: max_load / n,
        min_load: min_load / n,
    })
}

/// Averages drop statistics over `grid.samples` random score matrices per
/// cell. `threads > 1` evaluates cells concurrently; row order and values
/// do not depend on it.
pub fn dropping_sweep(grid: &SweepGrid, rng: &Rng, threads: usize) -> Result<Vec<SweepRow>> {
    if grid.samples == 0 || grid.group_tokens == 0 {
        return Err(Error::usage("sweep needs at least one sample and one token"));
    }
    let cells = grid.cells();
    if threads <= 1 {
        return cells.iter().map(|c| run_cell(rng, grid, c)).collect();
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::usage(format!("cannot build thread pool: {e}")))?;
    pool.install(|| cells.par_iter().map(|c| run_cell(rng, grid, c)).collect())
}

pub fn write_sweep_csv(path: &Path, rows: &[SweepRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(SWEEP_CSV_HEADER.split(','))?;
    for r in rows {
        w.write_record([
            r.router.to_string(),
            r.experts.to_string(),
            r.k.map(|k| k.to_string()).unwrap_or_default(),
            r.capacity_factor.to_string(),
            r.bpr.to_string(),
            r.group.to_string(),
            r.drop_rate.to_string(),
            r.multi_select_rate.to_string(),
            r.max_load.to_string(),
            r.min_load.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scores(rows: &[Vec<f64>]) -> RouterScores {
        RouterScores::new(Tensor::from_rows(rows).unwrap()).unwrap()
    }

    #[test]
    fn tokens_choice_bpr_example() {
        let s = scores(&[vec![0.6, 0.4], vec![0.9, 0.1], vec![0.45, 0.55]]);
        let plain = tokens_choice_route(&s, 1, 2.0 / 3.0, false).unwrap();
        assert_eq!(plain.capacity, 1);
        assert_eq!(plain.buffers[0], vec![(0, 0.6)]);
        assert_eq!(plain.dropped, vec![1]);
        assert_eq!(plain.buffers[1], vec![(2, 0.55)]);

        let bpr = tokens_choice_route(&s, 1, 2.0 / 3.0, true).unwrap();
        assert_eq!(bpr.buffers[0], vec![(1, 0.9)]);
        assert_eq!(bpr.dropped, vec![0]);
        assert_eq!(bpr.buffers[1], vec![(2, 0.55)]);
    }

    #[test]
    fn single_expert_keeps_everything() {
        let s = scores(&[vec![1.0], vec![1.0], vec![1.0]]);
        let a = tokens_choice_route(&s, 1, 1.0, false).unwrap();
        assert_eq!(a.capacity, 3);
        assert!(a.dropped.is_empty());
        let a = experts_choice_route(&s, 1.0).unwrap();
        assert_eq!(a.capacity, 3);
        assert_eq!(a.claims(), vec![1, 1, 1]);
    }

    #[test]
    fn tokens_choice_rejects_bad_k() {
        let s = scores(&[vec![0.5, 0.5]]);
        assert!(matches!(tokens_choice_route(&s, 0, 1.0, false), Err(Error::Usage(_))));
        assert!(matches!(tokens_choice_route(&s, 3, 1.0, false), Err(Error::Usage(_))));
        assert!(matches!(tokens_choice_route(&s, 1, 0.0, false), Err(Error::Usage(_))));
    }

    fn two_column(col0: [f64; 4], col1: [f64; 4]) -> RouterScores {
        // columns are not normalized; pad a third expert-free column would
        // change the router, so build gates directly from the stated values
        let rows = (0..4).map(|t| vec![col0[t], col1[t]]).collect::<Vec<_>>();
        RouterScores {
            gates: Tensor::from_rows(&rows).unwrap(),
        }
    }

    #[test]
    fn experts_choice_examples() {
        let s = two_column([0.9, 0.1, 0.8, 0.2], [0.2, 0.7, 0.1, 0.6]);
        let a = experts_choice_route(&s, 1.0).unwrap();
        assert_eq!(a.capacity, 2);
        let picks = |e: usize| {
            let mut v: Vec<usize> = a.buffers[e].iter().map(|p| p.0).collect();
            v.sort();
            v
        };
        assert_eq!(picks(0), vec![0, 2]);
        assert_eq!(picks(1), vec![1, 3]);
        assert_eq!(a.stats().drop_rate, 0.0);

        let s = two_column([0.9, 0.1, 0.8, 0.2], [0.8, 0.1, 0.7, 0.05]);
        let a = experts_choice_route(&s, 1.0).unwrap();
        assert_eq!(a.dropped, vec![1, 3]);
        assert_eq!(a.stats().multi_select_rate, 0.5);
        assert_eq!(a.stats().drop_rate, 0.5);
    }

    #[test]
    fn experts_choice_breaks_ties_by_index() {
        let s = scores(&[vec![0.5, 0.5], vec![0.5, 0.5], vec![0.5, 0.5], vec![0.5, 0.5]]);
        let a = experts_choice_route(&s, 1.0).unwrap();
        assert_eq!(a.buffers[0], vec![(0, 0.5), (1, 0.5)]);
        assert_eq!(a.buffers[1], vec![(0, 0.5), (1, 0.5)]);
        assert_eq!(a.dropped, vec![2, 3]);
    }

    #[test]
    fn experts_choice_needs_enough_capacity() {
        let s = scores(&[vec![0.25; 4], vec![0.25; 4]]);
        assert!(matches!(experts_choice_route(&s, 1.0), Err(Error::Usage(_))));
    }

    #[test]
    fn load_balance_loss_cases() {
        let s = scores(&[vec![0.6, 0.4], vec![0.4, 0.6]]);
        let a = tokens_choice_route(&s, 1, 1.0, false).unwrap();
        assert_eq!(load_balance_loss(&s, &a), 0.0);

        let s = scores(&[vec![1.0, 0.0], vec![1.0, 0.0]]);
        let a = tokens_choice_route(&s, 1, 2.0, false).unwrap();
        assert_eq!(a.buffers[0].len(), 2);
        assert!((load_balance_loss(&s, &a) - 1.0).abs() < 1e-12);

        let swapped = scores(&[vec![0.0, 1.0], vec![0.0, 1.0]]);
        let b = tokens_choice_route(&swapped, 1, 2.0, false).unwrap();
        assert_eq!(load_balance_loss(&s, &a), load_balance_loss(&swapped, &b));
    }

    #[test]
    fn graph_loss_matches_plain_loss() {
        let mut rng = Rng::new(4);
        let s = random_scores(&mut rng, 12, 4, 1.0).unwrap();
        let a = tokens_choice_route(&s, 1, 1.0, true).unwrap();
        let mut g = Graph::new();
        let gv = g.leaf(s.gates().clone());
        let l = load_balance_loss_graph(&mut g, gv, &a).unwrap();
        assert!((g.value(l).item() - load_balance_loss(&s, &a)).abs() < 1e-12);
    }

    #[test]
    fn all_dropped_gives_zero_output() {
        let store = ParamStore::new();
        let a = SparseAssignment {
            buffers: vec![vec![], vec![]],
            dropped: vec![0, 1],
            capacity: 1,
            router: SparseRouter::ExpertsChoice { capacity_factor: 1.0 },
            num_tokens: 2,
        };
        let x = Tensor::new(vec![2, 3], vec![1.0; 6]).unwrap();
        let y = sparse_forward(&store, &x, &a, &[Expert::Identity, Expert::Identity]).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
        let r = sparse_forward(&store, &x, &a, &[Expert::Identity]);
        assert!(matches!(r, Err(Error::Usage(_))));
    }

    #[test]
    fn single_identity_expert_with_unit_gates_is_identity() {
        let store = ParamStore::new();
        let s = scores(&[vec![1.0], vec![1.0], vec![1.0]]);
        let a = tokens_choice_route(&s, 1, 1.0, false).unwrap();
        let x = Rng::new(1).normal_tensor(&[3, 2], 1.0);
        let y = sparse_forward(&store, &x, &a, &[Expert::Identity]).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn capacity_formulas() {
        assert_eq!(tokens_choice_capacity(3, 2, 1, 2.0 / 3.0), 1);
        assert_eq!(tokens_choice_capacity(256, 128, 1, 1.125), 3);
        assert_eq!(tokens_choice_capacity(10, 4, 2, 1.0), 5);
        assert_eq!(experts_choice_capacity(4, 2, 1.0), 2);
        assert_eq!(experts_choice_capacity(5, 8, 1.0), 1);
    }

    #[test]
    fn sweep_is_thread_count_independent() {
        let grid = SweepGrid {
            experts: vec![4, 8],
            group_tokens: 32,
            samples: 5,
            ..SweepGrid::default()
        };
        let rng = Rng::new(9);
        let a = dropping_sweep(&grid, &rng, 1).unwrap();
        let b = dropping_sweep(&grid, &rng, 3).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 2 * (2 * 2) + 2 * 2);
    }
}
