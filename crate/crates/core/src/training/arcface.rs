//! Additive angular margin softmax.

use crate::error::{shape_err, Error, Result};
use crate::tensor::{Rng, Scalar, Tensor};

pub const DEFAULT_SCALE: f64 = 64.0;
pub const DEFAULT_MARGIN: f64 = 0.5;
/// cos θ is clamped to `[−1 + CLAMP, 1 − CLAMP]` before taking acos.
pub const COS_CLAMP: f64 = 1e-7;

#[derive(Clone, Debug, PartialEq)]
pub struct ArcFaceHead<T: Scalar = f32> {
    /// `classes × dim`; rows are normalized at use.
    pub weight: Tensor<T>,
    pub scale: f64,
    pub margin: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ArcFaceGrads<T: Scalar = f32> {
    /// Same shape as the embeddings passed in.
    pub embeddings: Tensor<T>,
    pub weight: Tensor<T>,
}

impl<T: Scalar> ArcFaceHead<T> {
    pub fn new(classes: usize, dim: usize, scale: f64, margin: f64, rng: &mut Rng) -> Result<Self> {
        if classes < 2 || dim == 0 {
            return Err(Error::InvalidArgument("ArcFace needs at least two classes".into()));
        }
        if scale <= 0.0 || !margin.is_finite() {
            return Err(Error::InvalidArgument(format!("bad ArcFace scale {scale} or margin {margin}")));
        }
        let weight = Tensor::rand_normal(&[classes, dim], T::zero(), T::of((1.0 / dim as f64).sqrt()), rng)?;
        Ok(Self { weight, scale, margin })
    }

    pub fn classes(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn cast<U: Scalar>(&self) -> ArcFaceHead<U> {
        ArcFaceHead {
            weight: self.weight.cast(),
            scale: self.scale,
            margin: self.margin,
        }
    }

    fn unit_rows(&self) -> Result<(Vec<f64>, Vec<f64>)> {
        let d = self.dim();
        let mut rows = Vec::with_capacity(self.weight.len());
        let mut norms = Vec::with_capacity(self.classes());
        for (j, r) in self.weight.data().chunks_exact(d).enumerate() {
            let n = r.iter().map(|v| v.as_f64() * v.as_f64()).sum::<f64>().sqrt();
            if !(n > 0.0) || !n.is_finite() {
                return Err(Error::Numeric(format!("class weight {j} has norm {n}")));
            }
            rows.extend(r.iter().map(|v| v.as_f64() / n));
            norms.push(n);
        }
        Ok((rows, norms))
    }

    /// Cosines between every embedding and every class, `batch × classes`.
    pub fn cosines(&self, embeddings: &Tensor<T>) -> Result<Vec<Vec<f64>>> {
        let (n, d) = flat_dims(embeddings, self.dim())?;
        let (w, _) = self.unit_rows()?;
        let mut out = Vec::with_capacity(n);
        for b in 0..n {
            let (x, _) = unit(&embeddings.data()[b * d..][..d], b)?;
            out.push(w.chunks_exact(d).map(|wj| dot(&x, wj)).collect());
        }
        Ok(out)
    }

    /// Index of the most similar class per embedding.
    pub fn predict(&self, embeddings: &Tensor<T>) -> Result<Vec<usize>> {
        Ok(self
            .cosines(embeddings)?
            .iter()
            .map(|c| {
                c.iter()
                    .enumerate()
                    .fold((0, f64::NEG_INFINITY), |best, (j, &v)| if v > best.1 { (j, v) } else { best })
                    .0
            })
            .collect())
    }
}

fn flat_dims<T: Scalar>(e: &Tensor<T>, dim: usize) -> Result<(usize, usize)> {
    let n = e.shape()[0];
    if e.len() != n * dim {
        return Err(shape_err(
            "arcface",
            format!("embeddings {:?} do not flatten to batch × {dim}", e.shape()),
        ));
    }
    Ok((n, dim))
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn unit<T: Scalar>(v: &[T], index: usize) -> Result<(Vec<f64>, f64)> {
    let n = v.iter().map(|x| x.as_f64() * x.as_f64()).sum::<f64>().sqrt();
    if !(n > 0.0) || !n.is_finite() {
        return Err(Error::Numeric(format!("embedding {index} has norm {n}")));
    }
    Ok((v.iter().map(|x| x.as_f64() / n).collect(), n))
}

/// Mean cross-entropy over logits `s·cos θ_j`, the target logit replaced by
/// `s·cos(θ_y + m)`. Gradients are with respect to the embeddings and the
/// (unnormalized) class weights.
pub fn arcface_loss<T: Scalar>(
    embeddings: &Tensor<T>,
    labels: &[usize],
    head: &ArcFaceHead<T>,
) -> Result<(T, ArcFaceGrads<T>)> {
    let (n, d) = flat_dims(embeddings, head.dim())?;
    if labels.len() != n {
        return Err(Error::InvalidArgument(format!("{} labels for a batch of {n}", labels.len())));
    }
    let classes = head.classes();
    if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
        return Err(Error::InvalidArgument(format!("label {bad} out of range for {classes} classes")));
    }
    if !embeddings.is_finite() {
        return Err(Error::Numeric("non-finite embedding".into()));
    }
    let (w, wnorm) = head.unit_rows()?;
    let (s, m) = (head.scale, head.margin);
    let (cos_m, sin_m) = (m.cos(), m.sin());
    let mut loss = 0.0;
    let mut grad_e = vec![0.0f64; n * d];
    let mut grad_w = vec![0.0f64; classes * d];
    let inv_n = 1.0 / n as f64;
    for b in 0..n {
        let y = labels[b];
        let (x, xnorm) = unit(&embeddings.data()[b * d..][..d], b)?;
        let cos: Vec<f64> = w.chunks_exact(d).map(|wj| dot(&x, wj)).collect();
        let lo = -1.0 + COS_CLAMP;
        let hi = 1.0 - COS_CLAMP;
        let c = cos[y].clamp(lo, hi);
        let sin = (1.0 - c * c).sqrt();
        let mut z: Vec<f64> = cos.iter().map(|&c| s * c).collect();
        z[y] = s * (c * cos_m - sin * sin_m);
        // d z_y / d cos_y; zero where the clamp is active.
        let dzy = if cos[y] > lo && cos[y] < hi {
            s * (cos_m + c * sin_m / sin)
        } else {
            0.0
        };
        let zmax = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = z.iter().map(|v| (v - zmax).exp()).sum();
        loss += if z[y] >= zmax {
            // Keeps tiny losses of confidently classified samples from rounding to zero.
            let rest: f64 = z.iter().enumerate().filter(|&(j, _)| j != y).map(|(_, v)| (v - z[y]).exp()).sum();
            rest.ln_1p()
        } else {
            zmax + sum.ln() - z[y]
        };
        let ge = &mut grad_e[b * d..][..d];
        for j in 0..classes {
            let p = (z[j] - zmax).exp() / sum;
            let dz = (p - if j == y { 1.0 } else { 0.0 }) * inv_n;
            let dc = dz * if j == y { dzy } else { s };
            if dc == 0.0 {
                continue;
            }
            let wj = &w[j * d..][..d];
            let gw = &mut grad_w[j * d..][..d];
            let cj = cos[j];
            for k in 0..d {
                ge[k] += dc * (wj[k] - cj * x[k]) / xnorm;
                gw[k] += dc * (x[k] - cj * wj[k]) / wnorm[j];
            }
        }
    }
    let to_t = |v: Vec<f64>| v.into_iter().map(T::of).collect::<Vec<T>>();
    Ok((
        T::of(loss * inv_n),
        ArcFaceGrads {
            embeddings: Tensor::from_vec(embeddings.shape(), to_t(grad_e))?,
            weight: Tensor::from_vec(head.weight.shape(), to_t(grad_w))?,
        },
    ))
}
