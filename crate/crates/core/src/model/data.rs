//! Synthetic image classification data and the patch front end.

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Flat source index of every token entry, in token-major order.
fn patch_indices(h: usize, w: usize, c: usize, patch: usize) -> Vec<usize> {
    let mut idx = Vec::with_capacity(h * w * c);
    for py in 0..h / patch {
        for px in 0..w / patch {
            for dy in 0..patch {
                for dx in 0..patch {
                    let (y, x) = (py * patch + dy, px * patch + dx);
                    for ch in 0..c {
                        idx.push((y * w + x) * c + ch);
                    }
                }
            }
        }
    }
    idx
}

fn image_dims(image: &Tensor, patch: usize) -> Result<(usize, usize, usize)> {
    let dims = image.dims();
    if dims.len() != 3 {
        return Err(Error::shape(format!("image must be H×W×C, got {dims:?}")));
    }
    let (h, w, c) = (dims[0], dims[1], dims[2]);
    if patch == 0 || h % patch != 0 || w % patch != 0 {
        return Err(Error::shape(format!(
            "patch {patch} does not divide image {h}×{w}"
        )));
    }
    Ok((h, w, c))
}

/// Splits an `H×W×C` image into non-overlapping raster-order patches, each
/// flattened row-major as `(dy, dx, channel)`.
pub fn patchify(image: &Tensor, patch: usize) -> Result<Tensor> {
    let (h, w, c) = image_dims(image, patch)?;
    let data = patch_indices(h, w, c, patch)
        .into_iter()
        .map(|i| image.data()[i])
        .collect();
    Tensor::new(vec![(h / patch) * (w / patch), patch * patch * c], data)
}

/// Inverse of [`patchify`].
pub fn unpatchify(tokens: &Tensor, h: usize, w: usize, c: usize, patch: usize) -> Result<Tensor> {
    if tokens.dims() != [(h / patch) * (w / patch), patch * patch * c] {
        return Err(Error::shape("token matrix does not match image geometry"));
    }
    let mut out = Tensor::zeros(&[h, w, c]);
    for (k, i) in patch_indices(h, w, c, patch).into_iter().enumerate() {
        out.data_mut()[i] = tokens.data()[k];
    }
    Ok(out)
}

/// Labelled images.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub images: Vec<Tensor>,
    pub labels: Vec<usize>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            images: indices.iter().map(|&i| self.images[i].clone()).collect(),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        }
    }
}

/// Gaussian class prototypes plus isotropic noise. Labels cycle through the
/// classes so every split is balanced.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthTask {
    pub seed: u64,
    pub classes: usize,
    pub image_size: usize,
    pub channels: usize,
    pub noise: f64,
}

impl SynthTask {
    pub fn prototypes(&self) -> Vec<Tensor> {
        let mut rng = Rng::new(self.seed).fork(0);
        let dims = [self.image_size, self.image_size, self.channels];
        (0..self.classes).map(|_| rng.normal_tensor(&dims, 1.0)).collect()
    }

    /// `n` samples of split `split`; the same `(seed, split, n)` always gives
    /// the same data.
    pub fn sample(&self, n: usize, split: u64) -> Dataset {
        let protos = self.prototypes();
        let mut rng = Rng::new(self.seed).fork(1 + split);
        let mut images = Vec::with_capacity(n);
        let mut labels = Vec::with_capacity(n);
        for i in 0..n {
            let label = i % self.classes;
            let mut img = protos[label].clone();
            for v in img.data_mut() {
                *v += self.noise * rng.normal();
            }
            images.push(img);
            labels.push(label);
        }
        Dataset { images, labels }
    }
}
