//! AdamW training loop and evaluation.

use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use super::checkpoint;
use super::data::Dataset;
use super::encoder::Encoder;
use crate::autodiff::{Graph, ParamStore};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

pub const METRICS_CSV_HEADER: &str = "step,loss,acc,drop_rate,aux_loss,wall_ms";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Schedule {
    #[default]
    Cosine,
    InverseSqrt,
}

impl fmt::Display for Schedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Schedule::Cosine => "cosine",
            Schedule::InverseSqrt => "inverse_sqrt",
        })
    }
}

impl FromStr for Schedule {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "cosine" => Ok(Schedule::Cosine),
            "inverse_sqrt" | "rsqrt" => Ok(Schedule::InverseSqrt),
            _ => Err(format!("unknown schedule `{s}` (cosine|inverse_sqrt)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainHyper {
    pub steps: usize,
    pub batch_size: usize,
    pub peak_lr: f64,
    /// Fraction of `steps` spent in linear warmup.
    pub warmup_frac: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub schedule: Schedule,
    /// Save a checkpoint every this many steps; 0 disables.
    pub checkpoint_every: usize,
    /// Record real step times; off keeps metrics files reproducible.
    pub log_wall_clock: bool,
}

impl Default for TrainHyper {
    fn default() -> Self {
        Self {
            steps: 500,
            batch_size: 32,
            peak_lr: 1e-3,
            warmup_frac: 0.05,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            schedule: Schedule::Cosine,
            checkpoint_every: 0,
            log_wall_clock: false,
        }
    }
}

impl TrainHyper {
    pub fn warmup_steps(&self) -> usize {
        (self.warmup_frac * self.steps as f64).ceil() as usize
    }

    /// Learning rate used for the update of step `step` (1-based).
    pub fn lr_at(&self, step: usize) -> f64 {
        let warmup = self.warmup_steps();
        if step <= warmup {
            return self.peak_lr * step as f64 / warmup as f64;
        }
        match self.schedule {
            Schedule::Cosine => {
                let span = self.steps.saturating_sub(warmup).max(1) as f64;
                let t = ((step - warmup) as f64 / span).min(1.0);
                0.5 * self.peak_lr * (1.0 + (std::f64::consts::PI * t).cos())
            }
            Schedule::InverseSqrt => self.peak_lr * (warmup.max(1) as f64 / step as f64).sqrt(),
        }
    }
}

/// Parameters, Adam moments, step counter and data-order RNG.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub params: ParamStore,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub step: usize,
    pub rng: Rng,
}

impl TrainState {
    pub fn new(params: ParamStore, rng: Rng) -> Self {
        let zeros: Vec<Tensor> = params.iter().map(|(_, _, t)| Tensor::zeros(t.dims())).collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            params,
            step: 0,
            rng,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub step: usize,
    pub loss: f64,
    pub acc: f64,
    pub drop_rate: f64,
    pub aux_loss: f64,
    pub wall_ms: f64,
    /// Largest within-sequence spread of MoE outputs; not written to CSV.
    pub moe_row_spread: f64,
}

impl MetricsRow {
    pub fn csv_record(&self) -> [String; 6] {
        [
            self.step.to_string(),
            self.loss.to_string(),
            self.acc.to_string(),
            self.drop_rate.to_string(),
            self.aux_loss.to_string(),
            self.wall_ms.to_string(),
        ]
    }
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

fn correct(logits: &Tensor, labels: &[usize]) -> usize {
    labels
        .iter()
        .enumerate()
        .filter(|&(i, &l)| argmax(logits.row(i)) == l)
        .count()
}

fn is_matrix_weight(t: &Tensor) -> bool {
    t.rank() == 2 && t.rows() > 1 && t.cols() > 1
}

/// One optimizer step on `batch`.
pub fn train_step(encoder: &Encoder, state: &mut TrainState, batch: &Dataset, hyper: &TrainHyper) -> Result<MetricsRow> {
    let start = Instant::now();
    let step = state.step + 1;
    let diverged = |e: Error| match e {
        Error::Numeric(_) => Error::Divergence { step, loss: f64::NAN },
        other => other,
    };
    let mut g = Graph::new();
    let b = state.params.bind(&mut g);
    let out = encoder
        .loss_graph(&mut g, &b, &batch.images, &batch.labels)
        .map_err(diverged)?;
    let loss = g.value(out.loss).item();
    if !loss.is_finite() {
        return Err(Error::Divergence { step, loss });
    }
    let grads = g.backward(out.loss).map_err(diverged)?;
    let acc = correct(g.value(out.forward.logits), &batch.labels) as f64 / batch.len() as f64;

    let lr = hyper.lr_at(step);
    let bc1 = 1.0 - hyper.beta1.powi(step as i32);
    let bc2 = 1.0 - hyper.beta2.powi(step as i32);
    let ids: Vec<_> = state.params.ids().collect();
    for id in ids {
        let i = id.index();
        let Some(grad) = grads.get(b[id]) else {
            continue;
        };
        let decay = if is_matrix_weight(state.params.get(id)) {
            hyper.weight_decay
        } else {
            0.0
        };
        let (m, v) = (state.m[i].data_mut(), state.v[i].data_mut());
        let p = state.params.get_mut(id);
        for (k, (pk, &gk)) in p.data_mut().iter_mut().zip(grad.data()).enumerate() {
            m[k] = hyper.beta1 * m[k] + (1.0 - hyper.beta1) * gk;
            v[k] = hyper.beta2 * v[k] + (1.0 - hyper.beta2) * gk * gk;
            let update = (m[k] / bc1) / ((v[k] / bc2).sqrt() + hyper.adam_eps);
            *pk -= lr * (update + decay * *pk);
        }
        if !p.is_finite() {
            return Err(Error::Divergence { step, loss });
        }
    }
    state.step = step;
    let stats = &out.forward.stats;
    Ok(MetricsRow {
        step,
        loss,
        acc,
        drop_rate: stats.drop_rate,
        aux_loss: stats.aux_loss,
        wall_ms: if hyper.log_wall_clock {
            start.elapsed().as_secs_f64() * 1e3
        } else {
            0.0
        },
        moe_row_spread: stats.moe_row_spread,
    })
}

/// Draws a batch with replacement using the state's RNG.
pub fn sample_batch(state: &mut TrainState, data: &Dataset, batch_size: usize) -> Dataset {
    let idx: Vec<usize> = (0..batch_size).map(|_| state.rng.below(data.len())).collect();
    data.subset(&idx)
}

/// Runs `hyper.steps` steps. Checkpoints go to `ckpt_dir` as
/// `step_NNNNNN.smoe` when `hyper.checkpoint_every > 0`.
pub fn train(
    encoder: &Encoder,
    state: &mut TrainState,
    data: &Dataset,
    hyper: &TrainHyper,
    ckpt_dir: Option<&Path>,
) -> Result<Vec<MetricsRow>> {
    if data.is_empty() {
        return Err(Error::usage("training set is empty"));
    }
    let mut rows = Vec::with_capacity(hyper.steps);
    for _ in 0..hyper.steps {
        let batch = sample_batch(state, data, hyper.batch_size);
        rows.push(train_step(encoder, state, &batch, hyper)?);
        if let Some(dir) = ckpt_dir {
            if hyper.checkpoint_every > 0 && state.step % hyper.checkpoint_every == 0 {
                checkpoint::save(&dir.join(format!("step_{:06}.smoe", state.step)), &state.params)?;
            }
        }
    }
    Ok(rows)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalMetrics {
    pub accuracy: f64,
    /// Mean cross-entropy, without auxiliary losses.
    pub loss: f64,
}

/// Accuracy and mean loss over `data`, in fixed-size chunks.
pub fn evaluate(encoder: &Encoder, params: &ParamStore, data: &Dataset, batch_size: usize) -> Result<EvalMetrics> {
    if data.is_empty() {
        return Err(Error::usage("evaluation set is empty"));
    }
    let mut hits = 0;
    let mut loss_sum = 0.0;
    for start in (0..data.len()).step_by(batch_size.max(1)) {
        let end = (start + batch_size.max(1)).min(data.len());
        let mut g = Graph::new();
        let b = params.bind(&mut g);
        let out = encoder.loss_graph(&mut g, &b, &data.images[start..end], &data.labels[start..end])?;
        hits += correct(g.value(out.forward.logits), &data.labels[start..end]);
        loss_sum += g.value(out.cross_entropy).item() * (end - start) as f64;
    }
    Ok(EvalMetrics {
        accuracy: hits as f64 / data.len() as f64,
        loss: loss_sum / data.len() as f64,
    })
}

pub fn write_metrics_csv(path: &Path, rows: &[MetricsRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(METRICS_CSV_HEADER.split(','))?;
    for r in rows {
        w.write_record(r.csv_record())?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
