//! Straight-line loop reference implementations. Nothing here calls into the
//! library's numeric code; inputs and outputs are plain nested vectors.

#![allow(dead_code)]

use softmoe::soft_moe::{Expert, SoftMoeParams};
use softmoe::{ParamStore, Tensor};

pub type Mat = Vec<Vec<f64>>;

pub fn mat(t: &Tensor) -> Mat {
    let (r, c) = (t.dims()[0], t.dims()[1]);
    (0..r).map(|i| (0..c).map(|j| t.data()[i * c + j]).collect()).collect()
}

pub fn max_diff(a: &Mat, b: &Mat) -> f64 {
    assert_eq!(a.len(), b.len());
    let mut worst: f64 = 0.0;
    for (ra, rb) in a.iter().zip(b) {
        assert_eq!(ra.len(), rb.len());
        for (x, y) in ra.iter().zip(rb) {
            worst = worst.max((x - y).abs());
        }
    }
    worst
}

pub fn matmul(a: &Mat, b: &Mat) -> Mat {
    let (n, k, m) = (a.len(), b.len(), b[0].len());
    let mut out = vec![vec![0.0; m]; n];
    for i in 0..n {
        for j in 0..m {
            let mut s = 0.0;
            for t in 0..k {
                s += a[i][t] * b[t][j];
            }
            out[i][j] = s;
        }
    }
    out
}

pub fn gelu(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (c * (x + 0.044715 * x.powi(3))).tanh())
}

/// Weights of one MLP expert as plain matrices (`b1`, `b2` are 1×k).
#[derive(Debug, Clone)]
pub struct MlpRef {
    pub w1: Mat,
    pub b1: Vec<f64>,
    pub w2: Mat,
    pub b2: Vec<f64>,
}

impl MlpRef {
    pub fn apply_row(&self, x: &[f64]) -> Vec<f64> {
        let hidden = self.b1.len();
        let mut h = vec![0.0; hidden];
        for j in 0..hidden {
            let mut s = self.b1[j];
            for (k, xv) in x.iter().enumerate() {
                s += xv * self.w1[k][j];
            }
            h[j] = gelu(s);
        }
        let out = self.b2.len();
        let mut y = vec![0.0; out];
        for j in 0..out {
            let mut s = self.b2[j];
            for (k, hv) in h.iter().enumerate() {
                s += hv * self.w2[k][j];
            }
            y[j] = s;
        }
        y
    }
}

#[derive(Debug, Clone)]
pub enum ExpertRef {
    Mlp(MlpRef),
    Identity,
}

impl ExpertRef {
    pub fn apply_row(&self, x: &[f64]) -> Vec<f64> {
        match self {
            ExpertRef::Mlp(m) => m.apply_row(x),
            ExpertRef::Identity => x.to_vec(),
        }
    }
}

pub fn expert_refs(store: &ParamStore, experts: &[Expert]) -> Vec<ExpertRef> {
    experts
        .iter()
        .map(|e| match e {
            Expert::Mlp(m) => ExpertRef::Mlp(MlpRef {
                w1: mat(store.get(m.w1)),
                b1: store.get(m.b1).data().to_vec(),
                w2: mat(store.get(m.w2)),
                b2: store.get(m.b2).data().to_vec(),
            }),
            Expert::Identity => ExpertRef::Identity,
        })
        .collect()
}

/// Soft MoE layer parameters pulled out of a store.
#[derive(Debug, Clone)]
pub struct SoftRef {
    pub phi: Mat,
    pub scale: f64,
    pub normalize: bool,
    pub p: usize,
    pub experts: Vec<ExpertRef>,
}

impl SoftRef {
    pub fn from_store(store: &ParamStore, params: &SoftMoeParams) -> Self {
        Self {
            phi: mat(store.get(params.phi)),
            scale: store.get(params.scale).data()[0],
            normalize: params.normalize,
            p: params.slots_per_expert,
            experts: expert_refs(store, &params.experts),
        }
    }

    pub fn slots(&self) -> usize {
        self.phi[0].len()
    }

    pub fn logits(&self, x: &Mat) -> Mat {
        let (m, d, s) = (x.len(), self.phi.len(), self.slots());
        let mut out = vec![vec![0.0; s]; m];
        for i in 0..m {
            let xn = if self.normalize {
                (0..d).map(|k| x[i][k] * x[i][k]).sum::<f64>().sqrt() + 1e-6
            } else {
                1.0
            };
            for j in 0..s {
                let pn = if self.normalize {
                    (0..d).map(|k| self.phi[k][j] * self.phi[k][j]).sum::<f64>().sqrt() + 1e-6
                } else {
                    1.0
                };
                let sc = if self.normalize { self.scale } else { 1.0 };
                let mut acc = 0.0;
                for k in 0..d {
                    acc += (x[i][k] / xn) * (sc * self.phi[k][j] / pn);
                }
                out[i][j] = acc;
            }
        }
        out
    }
}

/// Softmax of every column (over rows).
pub fn softmax_columns(l: &Mat) -> Mat {
    let (m, s) = (l.len(), l[0].len());
    let mut out = vec![vec![0.0; s]; m];
    for j in 0..s {
        let mx = (0..m).map(|i| l[i][j]).fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = (0..m).map(|i| (l[i][j] - mx).exp()).sum();
        for i in 0..m {
            out[i][j] = (l[i][j] - mx).exp() / z;
        }
    }
    out
}

/// Softmax of every row (over columns).
pub fn softmax_rows(l: &Mat) -> Mat {
    l.iter()
        .map(|row| {
            let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - mx).exp()).sum();
            row.iter().map(|v| (v - mx).exp() / z).collect()
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Routing {
    Soft,
    Identity,
    Uniform,
    UniformSoft,
    SoftUniform,
}

/// `(y, dispatch, combine)` of the layer on one sequence.
pub fn soft_forward(layer: &SoftRef, x: &Mat, routing: Routing) -> (Mat, Mat, Mat) {
    let m = x.len();
    let s = layer.slots();
    let uniform_d = vec![vec![1.0 / m as f64; s]; m];
    let uniform_c = vec![vec![1.0 / s as f64; s]; m];
    let eye: Mat = (0..m)
        .map(|i| (0..s).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
        .collect();
    let (dispatch, combine) = match routing {
        Routing::Identity => (eye.clone(), eye),
        Routing::Uniform => (uniform_d, uniform_c),
        _ => {
            let l = layer.logits(x);
            let d = softmax_columns(&l);
            let c = softmax_rows(&l);
            match routing {
                Routing::Soft => (d, c),
                Routing::UniformSoft => (uniform_d, c),
                Routing::SoftUniform => (d, uniform_c),
                _ => unreachable!(),
            }
        }
    };
    let width = x[0].len();
    let mut slots_out = vec![vec![0.0; width]; s];
    for j in 0..s {
        let mut slot = vec![0.0; width];
        for i in 0..m {
            for k in 0..width {
                slot[k] += dispatch[i][j] * x[i][k];
            }
        }
        slots_out[j] = layer.experts[j / layer.p].apply_row(&slot);
    }
    let mut y = vec![vec![0.0; width]; m];
    for i in 0..m {
        for j in 0..s {
            for k in 0..width {
                y[i][k] += combine[i][j] * slots_out[j][k];
            }
        }
    }
    (y, dispatch, combine)
}

/// Experts of `token` by decreasing gate, ties to the lower index, found by
/// repeated selection.
pub fn ranked(gates: &Mat, token: usize) -> Vec<usize> {
    let e = gates[token].len();
    let mut taken = vec![false; e];
    let mut out = Vec::with_capacity(e);
    for _ in 0..e {
        let mut best: Option<usize> = None;
        for j in 0..e {
            if taken[j] {
                continue;
            }
            if best.map_or(true, |b| gates[token][j] > gates[token][b]) {
                best = Some(j);
            }
        }
        let b = best.unwrap();
        taken[b] = true;
        out.push(b);
    }
    out
}

/// Token visiting order: index order, or decreasing max gate with ties to
/// the lower index.
pub fn visit_order(gates: &Mat, bpr: bool) -> Vec<usize> {
    let t = gates.len();
    if !bpr {
        return (0..t).collect();
    }
    let max_gate = |i: usize| gates[i].iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut taken = vec![false; t];
    let mut out = Vec::with_capacity(t);
    for _ in 0..t {
        let mut best: Option<usize> = None;
        for i in 0..t {
            if !taken[i] && best.map_or(true, |b| max_gate(i) > max_gate(b)) {
                best = Some(i);
            }
        }
        let b = best.unwrap();
        taken[b] = true;
        out.push(b);
    }
    out
}

/// Buffers of `(token, gate)` and sorted dropped tokens.
pub type RouteRef = (Vec<Vec<(usize, f64)>>, Vec<usize>);

pub fn dropped(buffers: &[Vec<(usize, f64)>], tokens: usize) -> Vec<usize> {
    (0..tokens)
        .filter(|&t| !buffers.iter().any(|b| b.iter().any(|&(u, _)| u == t)))
        .collect()
}

/// Tokens Choice with an explicit per-expert capacity.
pub fn tokens_choice(gates: &Mat, k: usize, capacity: usize, bpr: bool) -> RouteRef {
    let e = gates[0].len();
    let mut buffers: Vec<Vec<(usize, f64)>> = vec![Vec::new(); e];
    for t in visit_order(gates, bpr) {
        for &x in ranked(gates, t).iter().take(k) {
            if buffers[x].len() < capacity {
                buffers[x].push((t, gates[t][x]));
            }
        }
    }
    let d = dropped(&buffers, gates.len());
    (buffers, d)
}

/// Experts Choice with an explicit capacity.
pub fn experts_choice(gates: &Mat, capacity: usize) -> RouteRef {
    let (t, e) = (gates.len(), gates[0].len());
    let mut buffers: Vec<Vec<(usize, f64)>> = vec![Vec::new(); e];
    for (x, buf) in buffers.iter_mut().enumerate() {
        let mut taken = vec![false; t];
        for _ in 0..capacity {
            let mut best: Option<usize> = None;
            for i in 0..t {
                if !taken[i] && best.map_or(true, |b| gates[i][x] > gates[b][x]) {
                    best = Some(i);
                }
            }
            let b = best.unwrap();
            taken[b] = true;
            buf.push((b, gates[b][x]));
        }
    }
    let d = dropped(&buffers, t);
    (buffers, d)
}

/// `Σ_buffers gate · f_e(x_t)`, zero rows for dropped tokens.
pub fn sparse_forward(x: &Mat, buffers: &[Vec<(usize, f64)>], experts: &[ExpertRef]) -> Mat {
    let width = x[0].len();
    let mut y = vec![vec![0.0; width]; x.len()];
    for (e, buf) in buffers.iter().enumerate() {
        for &(t, g) in buf {
            let out = experts[e].apply_row(&x[t]);
            for k in 0..width {
                y[t][k] += g * out[k];
            }
        }
    }
    y
}

/// Squared coefficient of variation with population variance.
pub fn cv2(v: &[f64]) -> f64 {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if mean == 0.0 {
        return 0.0;
    }
    v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n / (mean * mean)
}

/// Spearman rank correlation; tied values share their mean rank.
pub fn spearman(a: &[f64], b: &[f64]) -> f64 {
    fn ranks(v: &[f64]) -> Vec<f64> {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&i, &j| v[i].total_cmp(&v[j]));
        let mut r = vec![0.0; v.len()];
        let mut start = 0;
        while start < idx.len() {
            let mut end = start;
            while end + 1 < idx.len() && v[idx[end + 1]] == v[idx[start]] {
                end += 1;
            }
            let mean = (start + end) as f64 / 2.0;
            for &i in &idx[start..=end] {
                r[i] = mean;
            }
            start = end + 1;
        }
        r
    }
    let (ra, rb) = (ranks(a), ranks(b));
    let n = a.len() as f64;
    let ma = ra.iter().sum::<f64>() / n;
    let mb = rb.iter().sum::<f64>() / n;
    let cov: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = ra.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = rb.iter().map(|y| (y - mb).powi(2)).sum();
    if va == 0.0 || vb == 0.0 {
        return 0.0;
    }
    cov / (va * vb).sqrt()
}

/// A random Soft MoE layer with perturbed biases and scale, plus tokens.
pub fn random_layer(
    seed: u64,
    m: usize,
    d: usize,
    n: usize,
    p: usize,
    normalize: bool,
) -> (ParamStore, SoftMoeParams, Tensor) {
    use softmoe::soft_moe::SoftMoeShape;
    use softmoe::Rng;
    let mut rng = Rng::new(seed);
    let mut store = ParamStore::new();
    let shape = SoftMoeShape {
        d,
        d_mlp: 2 * d,
        experts: n,
        slots_per_expert: p,
        normalize,
    };
    let params = SoftMoeParams::new(&mut store, "moe", shape, &mut rng).unwrap();
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        if store.name(id).ends_with(".b1") || store.name(id).ends_with(".b2") {
            let dims = store.get(id).dims().to_vec();
            store.set(id, rng.normal_tensor(&dims, 0.1)).unwrap();
        }
    }
    store.set(params.scale, Tensor::scalar(rng.uniform(0.5, 3.0))).unwrap();
    let x = rng.normal_tensor(&[m, d], 1.0);
    (store, params, x)
}

/// Five-point central differences of `f` at every coordinate of `x`
/// (error O(h^4)).
pub fn central_diff(mut f: impl FnMut(&Tensor) -> f64, x: &Tensor, h: f64) -> Tensor {
    let mut probe = x.clone();
    let mut out = Tensor::zeros(x.dims());
    for i in 0..x.numel() {
        let v = probe.data()[i];
        let mut at = |dx: f64| {
            probe.data_mut()[i] = v + dx;
            f(&probe)
        };
        let (p1, m1, p2, m2) = (at(h), at(-h), at(2.0 * h), at(-2.0 * h));
        probe.data_mut()[i] = v;
        out.data_mut()[i] = (8.0 * (p1 - m1) - (p2 - m2)) / (12.0 * h);
    }
    out
}
