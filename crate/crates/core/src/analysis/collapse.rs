//! Softmax collapse of layer-normalized logits as width grows.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use crate::autodiff::{l2_normalize_forward, layer_norm_stats, softmax_forward};
use crate::error::{Error, Result};
use crate::rng::{glorot_init, Rng};
use crate::soft_moe::L2_EPS;
use crate::tensor::Tensor;

pub const COLLAPSE_CSV_HEADER: &str = "d,normalized,init,trial,max_dispatch,max_combine";
pub const LONG_CSV_HEADER: &str = "x,y,series";

/// How the slot parameters are drawn.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ThetaInit {
    /// `U(±sqrt(6/(d+n·p)))`; entries shrink as `d` grows.
    #[default]
    Glorot,
    /// i.i.d. `N(0, 1)`, independent of `d`.
    UnitNormal,
}

impl fmt::Display for ThetaInit {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ThetaInit::Glorot => "glorot",
            ThetaInit::UnitNormal => "unit_normal",
        })
    }
}

impl FromStr for ThetaInit {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "glorot" => Ok(ThetaInit::Glorot),
            "unit_normal" => Ok(ThetaInit::UnitNormal),
            _ => Err(format!("unknown init `{s}` (glorot|unit_normal)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CollapseConfig {
    pub dims: Vec<usize>,
    pub trials: usize,
    pub tokens: usize,
    pub slots: usize,
    pub normalized: bool,
    pub init: ThetaInit,
    /// Multiplier of the normalized slot parameters.
    pub scale: f64,
}

impl Default for CollapseConfig {
    fn default() -> Self {
        Self {
            dims: vec![64, 256, 1024, 4096],
            trials: 50,
            tokens: 256,
            slots: 64,
            normalized: false,
            init: ThetaInit::Glorot,
            scale: 1.0,
        }
    }
}

/// Statistics of one width.
#[derive(Debug, Clone, PartialEq)]
pub struct CollapseRecord {
    pub d: usize,
    pub normalized: bool,
    /// Per trial, the mean over slots of the largest dispatch weight.
    pub max_dispatch: Vec<f64>,
    /// Per trial, the mean over tokens of the largest combine weight.
    pub max_combine: Vec<f64>,
}

impl CollapseRecord {
    pub fn mean_max_dispatch(&self) -> f64 {
        mean(&self.max_dispatch)
    }

    pub fn mean_max_combine(&self) -> f64 {
        mean(&self.max_combine)
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

#[derive(Debug, Clone, PartialEq)]
pub struct CollapseReport {
    pub init: ThetaInit,
    pub records: Vec<CollapseRecord>,
}

/// Mean over columns of the column maximum.
fn mean_col_max(t: &Tensor) -> f64 {
    let mut best = vec![f64::NEG_INFINITY; t.cols()];
    for i in 0..t.rows() {
        for (b, &v) in best.iter_mut().zip(t.row(i)) {
            *b = b.max(v);
        }
    }
    mean(&best)
}

fn mean_row_max(t: &Tensor) -> f64 {
    let maxes: Vec<f64> = (0..t.rows())
        .map(|i| t.row(i).iter().copied().fold(f64::NEG_INFINITY, f64::max))
        .collect();
    mean(&maxes)
}

/// One trial: layer-normalized Gaussian tokens against a fresh Θ.
/// Returns `(mean max dispatch, mean max combine)`.
pub fn collapse_trial(cfg: &CollapseConfig, d: usize, rng: &mut Rng) -> Result<(f64, f64)> {
    let x = rng.normal_tensor(&[cfg.tokens, d], 1.0);
    let (x, _) = layer_norm_stats(&x, 1e-6);
    let theta = match cfg.init {
        ThetaInit::Glorot => glorot_init(rng, d, cfg.slots),
        ThetaInit::UnitNormal => rng.normal_tensor(&[d, cfg.slots], 1.0),
    };
    let logits = if cfg.normalized {
        let xn = l2_normalize_forward(&x, 1, L2_EPS)?;
        let tn = l2_normalize_forward(&theta, 0, L2_EPS)?.map(|v| v * cfg.scale);
        xn.matmul(&tn)?
    } else {
        x.matmul(&theta)?
    };
    let dispatch = softmax_forward(&logits, 0)?;
    let combine = softmax_forward(&logits, 1)?;
    Ok((mean_col_max(&dispatch), mean_row_max(&combine)))
}

/// Runs `cfg.trials` trials per width. Trial `t` at width `d` draws from
/// `rng.fork(d).fork(t)`, so the normalized and unnormalized runs see the
/// same tokens and parameters.
pub fn collapse_experiment(cfg: &CollapseConfig, rng: &Rng) -> Result<CollapseReport> {
    if cfg.dims.len() < 2 {
        return Err(Error::usage("collapse experiment needs at least two widths"));
    }
    if cfg.trials == 0 || cfg.tokens == 0 || cfg.slots == 0 || cfg.dims.contains(&0) {
        return Err(Error::usage("collapse experiment needs positive sizes"));
    }
    let mut records = Vec::with_capacity(cfg.dims.len());
    for &d in &cfg.dims {
        let mut rec = CollapseRecord {
            d,
            normalized: cfg.normalized,
            max_dispatch: Vec::with_capacity(cfg.trials),
            max_combine: Vec::with_capacity(cfg.trials),
        };
        for t in 0..cfg.trials {
            let (md, mc) = collapse_trial(cfg, d, &mut rng.fork(d as u64).fork(t as u64))?;
            rec.max_dispatch.push(md);
            rec.max_combine.push(mc);
        }
        records.push(rec);
    }
    Ok(CollapseReport {
        init: cfg.init,
        records,
    })
}

/// One row per trial of every report.
pub fn write_collapse_csv(path: &Path, reports: &[CollapseReport]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(COLLAPSE_CSV_HEADER.split(','))?;
    for rep in reports {
        for r in &rep.records {
            for (t, (md, mc)) in r.max_dispatch.iter().zip(&r.max_combine).enumerate() {
                w.write_record([
                    r.d.to_string(),
                    r.normalized.to_string(),
                    rep.init.to_string(),
                    t.to_string(),
                    md.to_string(),
                    mc.to_string(),
                ])?;
            }
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Per-width means as `x,y,series`.
pub fn write_collapse_long_csv(path: &Path, reports: &[CollapseReport]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(LONG_CSV_HEADER.split(','))?;
    for rep in reports {
        for r in &rep.records {
            let tag = if r.normalized { "normalized" } else { "unnormalized" };
            w.write_record([r.d.to_string(), r.mean_max_dispatch().to_string(), format!("dispatch_{tag}")])?;
            w.write_record([r.d.to_string(), r.mean_max_combine().to_string(), format!("combine_{tag}")])?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}
