//! Distributions of routing weights and slot parameter geometry.

use std::fmt;
use std::path::Path;

use crate::error::{Error, Result};
use crate::soft_moe::L2_EPS;
use crate::tensor::Tensor;

pub const QUANTILE_LEVELS: [f64; 8] = [0.0, 0.1, 0.25, 0.5, 0.75, 0.9, 0.99, 1.0];

pub const TOKEN_CONTRIBUTION_CSV_HEADER: &str = "layer,sequence,token,summed_dispatch";
pub const CUMULATIVE_CSV_HEADER: &str = "layer,sequence,orientation,index,rank,cumulative";
pub const SLOT_CORRELATION_CSV_HEADER: &str = "layer,slot_i,slot_j,cosine";

/// Linear-interpolation quantile of unsorted data.
pub fn quantile(values: &[f64], q: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let pos = q.clamp(0.0, 1.0) * (v.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TokenContribution {
    /// `Σ_j D[i][j]` for every token `i`.
    pub sums: Vec<f64>,
    /// `(level, value)` at [`QUANTILE_LEVELS`].
    pub quantiles: Vec<(f64, f64)>,
}

/// How much every token contributes to all slots together.
pub fn token_contribution(dispatch: &Tensor) -> Result<TokenContribution> {
    if !dispatch.is_matrix() || dispatch.numel() == 0 {
        return Err(Error::shape("dispatch weights must be a non-empty matrix"));
    }
    let sums: Vec<f64> = (0..dispatch.rows()).map(|i| dispatch.row(i).iter().sum()).collect();
    let quantiles = QUANTILE_LEVELS.iter().map(|&q| (q, quantile(&sums, q))).collect();
    Ok(TokenContribution { sums, quantiles })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Orientation {
    /// Columns (slots) sum to one.
    Dispatch,
    /// Rows (tokens) sum to one.
    Combine,
}

impl fmt::Display for Orientation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Orientation::Dispatch => "dispatch",
            Orientation::Combine => "combine",
        })
    }
}

const STOCHASTIC_TOL: f64 = 1e-9;

/// Per slot (dispatch) or per token (combine): weights sorted descending,
/// then cumulatively summed.
pub fn cumulative_weight_curves(weights: &Tensor, orientation: Orientation) -> Result<Vec<Vec<f64>>> {
    if !weights.is_matrix() {
        return Err(Error::shape("routing weights must be a matrix"));
    }
    let lines: Vec<Vec<f64>> = match orientation {
        Orientation::Dispatch => (0..weights.cols()).map(|j| weights.column(j)).collect(),
        Orientation::Combine => weights.to_rows(),
    };
    let mut curves = Vec::with_capacity(lines.len());
    for (k, mut line) in lines.into_iter().enumerate() {
        let total: f64 = line.iter().sum();
        if (total - 1.0).abs() > STOCHASTIC_TOL || line.iter().any(|&v| v < 0.0) {
            return Err(Error::usage(format!(
                "weights are not {orientation} weights: line {k} sums to {total}"
            )));
        }
        line.sort_by(|a, b| b.total_cmp(a));
        let mut acc = 0.0;
        for v in &mut line {
            acc += *v;
            *v = acc;
        }
        curves.push(line);
    }
    Ok(curves)
}

/// Cosine similarity between every pair of columns of `phi`.
pub fn slot_correlation(phi: &Tensor) -> Result<Tensor> {
    if !phi.is_matrix() {
        return Err(Error::shape("slot parameters must be a d×(n·p) matrix"));
    }
    let norms: Vec<f64> = (0..phi.cols())
        .map(|j| phi.column(j).iter().map(|v| v * v).sum::<f64>().sqrt().max(L2_EPS))
        .collect();
    let mut n = phi.clone();
    let cols = phi.cols();
    for (k, v) in n.data_mut().iter_mut().enumerate() {
        *v /= norms[k % cols];
    }
    Ok(n.transpose()?.matmul(&n)?.map(|v| v.clamp(-1.0, 1.0)))
}

/// Writers for the inspection CSVs; rows are appended in call order.
pub struct InspectWriters {
    pub contribution: csv::Writer<std::fs::File>,
    pub cumulative: csv::Writer<std::fs::File>,
    pub correlation: csv::Writer<std::fs::File>,
}

impl InspectWriters {
    pub fn create(dir: &Path) -> Result<Self> {
        let open = |name: &str, header: &str| -> Result<csv::Writer<std::fs::File>> {
            let mut w = csv::Writer::from_path(dir.join(name))?;
            w.write_record(header.split(','))?;
            Ok(w)
        };
        Ok(Self {
            contribution: open("token_contribution.csv", TOKEN_CONTRIBUTION_CSV_HEADER)?,
            cumulative: open("cumulative_weights.csv", CUMULATIVE_CSV_HEADER)?,
            correlation: open("slot_correlation.csv", SLOT_CORRELATION_CSV_HEADER)?,
        })
    }

    pub fn contribution(&mut self, layer: usize, sequence: usize, tc: &TokenContribution) -> Result<()> {
        for (i, s) in tc.sums.iter().enumerate() {
            self.contribution
                .write_record([layer.to_string(), sequence.to_string(), i.to_string(), s.to_string()])?;
        }
        Ok(())
    }

    pub fn curves(&mut self, layer: usize, sequence: usize, orientation: Orientation, curves: &[Vec<f64>]) -> Result<()> {
        for (idx, curve) in curves.iter().enumerate() {
            for (rank, v) in curve.iter().enumerate() {
                self.cumulative.write_record([
                    layer.to_string(),
                    sequence.to_string(),
                    orientation.to_string(),
                    idx.to_string(),
                    (rank + 1).to_string(),
                    v.to_string(),
                ])?;
            }
        }
        Ok(())
    }

    pub fn correlation(&mut self, layer: usize, corr: &Tensor) -> Result<()> {
        for i in 0..corr.rows() {
            for j in 0..corr.cols() {
                self.correlation
                    .write_record([layer.to_string(), i.to_string(), j.to_string(), corr.at(i, j).to_string()])?;
            }
        }
        Ok(())
    }

    pub fn flush(&mut self, dir: &Path) -> Result<()> {
        for w in [&mut self.contribution, &mut self.cumulative, &mut self.correlation] {
            w.flush().map_err(|e| Error::io(dir, e))?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_dispatch_contribution() {
        let d = Tensor::filled(&[2, 4], 0.5);
        let tc = token_contribution(&d).unwrap();
        assert_eq!(tc.sums, vec![2.0, 2.0]);
        assert!(tc.quantiles.iter().all(|&(_, v)| v == 2.0));
    }

    #[test]
    fn quantile_interpolates() {
        assert_eq!(quantile(&[3.0, 1.0, 2.0, 4.0], 0.5), 2.5);
        assert_eq!(quantile(&[5.0], 0.9), 5.0);
    }

    #[test]
    fn curves() {
        let one_hot = Tensor::from_rows(&[vec![0.0], vec![1.0], vec![0.0]]).unwrap();
        let c = cumulative_weight_curves(&one_hot, Orientation::Dispatch).unwrap();
        assert_eq!(c, vec![vec![1.0, 1.0, 1.0]]);
        let uniform = Tensor::filled(&[4, 1], 0.25);
        let c = cumulative_weight_curves(&uniform, Orientation::Dispatch).unwrap();
        assert_eq!(c[0], vec![0.25, 0.5, 0.75, 1.0]);
        assert!(matches!(
            cumulative_weight_curves(&uniform, Orientation::Combine),
            Err(Error::Usage(_))
        ));
    }

    #[test]
    fn correlation_of_orthogonal_and_duplicate_columns() {
        let eye = Tensor::identity(3);
        assert_eq!(slot_correlation(&eye).unwrap(), Tensor::identity(3));
        let dup = Tensor::from_rows(&[vec![1.0, 2.0, 1.0], vec![3.0, -1.0, 3.0]]).unwrap();
        let c = slot_correlation(&dup).unwrap();
        assert!((c.at(0, 2) - 1.0).abs() < 1e-12);
        assert!((c.at(1, 1) - 1.0).abs() < 1e-12);
    }
}
