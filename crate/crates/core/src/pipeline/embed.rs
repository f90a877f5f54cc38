//! Embedding extraction and cosine similarity.

use crate::arch::{Mode, Model};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::image::{preprocess_batch, RawImage};

#[derive(Clone, Debug, PartialEq)]
pub struct Embedding {
    pub values: Vec<f32>,
    pub normalized: bool,
}

impl Embedding {
    pub fn new(values: Vec<f32>) -> Self {
        Self { values, normalized: false }
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt()
    }

    pub fn normalize(&self) -> Result<Self> {
        let n = self.norm();
        if !(n > 0.0) || !n.is_finite() {
            return Err(Error::Numeric(format!("cannot normalize embedding with norm {n}")));
        }
        Ok(Self {
            values: self.values.iter().map(|&v| (v as f64 / n) as f32).collect(),
            normalized: true,
        })
    }
}

fn check_mode(model: &Model) -> Result<()> {
    if model.mode() == Mode::Train {
        return Err(Error::InvalidArgument("embedding needs an eval or folded model".into()));
    }
    Ok(())
}

/// Splits an `N×D×1×1` network output into embeddings.
pub fn embeddings_from_output(out: &Tensor<f32>, normalize: bool) -> Result<Vec<Embedding>> {
    let [n, d, _, _] = out.dims4()?;
    (0..n)
        .map(|i| {
            let e = Embedding::new(out.data()[i * d..(i + 1) * d].to_vec());
            if !e.values.iter().all(|v| v.is_finite()) {
                return Err(Error::Numeric(format!("embedding {i} is not finite")));
            }
            if normalize {
                e.normalize()
            } else {
                Ok(e)
            }
        })
        .collect()
}

pub fn embed(model: &Model, img: &RawImage, normalize: bool) -> Result<Embedding> {
    Ok(embed_batch(model, &[img], normalize)?.remove(0))
}

pub fn embed_batch(model: &Model, imgs: &[&RawImage], normalize: bool) -> Result<Vec<Embedding>> {
    check_mode(model)?;
    let x = preprocess_batch(imgs, model.arch().input)?;
    embeddings_from_output(&model.forward(&x)?, normalize)
}

/// Embedding of an already preprocessed `1×3×H×W` tensor.
pub fn embed_tensor(model: &Model, x: &Tensor<f32>, normalize: bool) -> Result<Embedding> {
    check_mode(model)?;
    Ok(embeddings_from_output(&model.forward(x)?, normalize)?.remove(0))
}

/// `a·b / (|a||b|)`, clamped to `[−1, 1]`.
pub fn cosine_similarity(a: &Embedding, b: &Embedding) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::InvalidArgument(format!(
            "embeddings have {} and {} dims",
            a.dim(),
            b.dim()
        )));
    }
    let (na, nb) = (a.norm(), b.norm());
    if na == 0.0 || nb == 0.0 {
        return Err(Error::Numeric("cosine similarity of a zero vector".into()));
    }
    let dot: f64 = a.values.iter().zip(&b.values).map(|(&x, &y)| x as f64 * y as f64).sum();
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}
