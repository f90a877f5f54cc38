//! Per-channel batch normalization.
//!
//! Train mode normalizes with the biased (population) batch variance and the
//! running statistics follow `running = momentum·running + (1 − momentum)·batch`
//! using the same estimator.

use crate::error::{shape_err, Result};
use crate::tensor::{Scalar, Tensor};

pub const DEFAULT_EPS: f64 = 1e-5;
pub const DEFAULT_MOMENTUM: f64 = 0.9;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BnMode {
    Train,
    Eval,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormParams<T: Scalar = f32> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    pub running_mean: Tensor<T>,
    pub running_var: Tensor<T>,
    pub eps: T,
    pub momentum: T,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormGrads<T: Scalar = f32> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
}

/// Values saved by the forward pass for backward and for the running-stat update.
#[derive(Clone, Debug, PartialEq)]
pub struct BnCache<T: Scalar = f32> {
    pub mode: BnMode,
    pub x_hat: Tensor<T>,
    pub inv_std: Vec<T>,
    pub batch_mean: Vec<T>,
    pub batch_var: Vec<T>,
}

impl<T: Scalar> BatchNormParams<T> {
    /// `γ = 1, β = 0, μ = 0, σ² = 1`.
    pub fn identity(channels: usize) -> Result<Self> {
        Ok(Self {
            gamma: Tensor::new(&[channels], T::one())?,
            beta: Tensor::zeros(&[channels])?,
            running_mean: Tensor::zeros(&[channels])?,
            running_var: Tensor::new(&[channels], T::one())?,
            eps: T::of(DEFAULT_EPS),
            momentum: T::of(DEFAULT_MOMENTUM),
        })
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    /// Scale `γ/√(σ²+ε)` applied per channel in eval mode.
    pub fn eval_scale(&self) -> Vec<T> {
        self.gamma
            .data()
            .iter()
            .zip(self.running_var.data())
            .map(|(&g, &v)| g / (v + self.eps).sqrt())
            .collect()
    }

    pub fn update_running(&mut self, cache: &BnCache<T>) {
        let m = self.momentum;
        let keep = T::one() - m;
        for (r, &b) in self.running_mean.data_mut().iter_mut().zip(&cache.batch_mean) {
            *r = m * *r + keep * b;
        }
        for (r, &b) in self.running_var.data_mut().iter_mut().zip(&cache.batch_var) {
            *r = m * *r + keep * b;
        }
    }

    fn check(&self, input: &Tensor<T>) -> Result<[usize; 4]> {
        let dims = input.dims4()?;
        if dims[1] != self.channels() {
            return Err(shape_err(
                "batchnorm",
                format!("input has {} channels, parameters have {}", dims[1], self.channels()),
            ));
        }
        Ok(dims)
    }
}

/// Forward pass returning the cache needed by [`batchnorm_backward`].
/// Running statistics are not touched; see [`BatchNormParams::update_running`].
pub fn batchnorm_forward_cached<T: Scalar>(
    input: &Tensor<T>,
    p: &BatchNormParams<T>,
    mode: BnMode,
) -> Result<(Tensor<T>, BnCache<T>)> {
    let [n, c, h, w] = p.check(input)?;
    let plane = h * w;
    let count = T::of((n * plane) as f64);
    let mut mean = vec![T::zero(); c];
    let mut var = vec![T::zero(); c];
    match mode {
        BnMode::Train => {
            for ch in 0..c {
                let mut s = T::zero();
                for b in 0..n {
                    s += input.data()[(b * c + ch) * plane..][..plane].iter().copied().sum::<T>();
                }
                let mu = s / count;
                let mut sq = T::zero();
                for b in 0..n {
                    for &x in &input.data()[(b * c + ch) * plane..][..plane] {
                        sq += (x - mu) * (x - mu);
                    }
                }
                mean[ch] = mu;
                var[ch] = sq / count;
            }
        }
        BnMode::Eval => {
            mean.copy_from_slice(p.running_mean.data());
            var.copy_from_slice(p.running_var.data());
        }
    }
    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + p.eps).sqrt()).collect();
    let mut x_hat = input.zeros_like();
    let mut out = input.zeros_like();
    for b in 0..n {
        for ch in 0..c {
            let at = (b * c + ch) * plane;
            let (g, be) = (p.gamma.data()[ch], p.beta.data()[ch]);
            for k in at..at + plane {
                let xh = (input.data()[k] - mean[ch]) * inv_std[ch];
                x_hat.data_mut()[k] = xh;
                out.data_mut()[k] = g * xh + be;
            }
        }
    }
    Ok((
        out,
        BnCache {
            mode,
            x_hat,
            inv_std,
            batch_mean: mean,
            batch_var: var,
        },
    ))
}

/// Forward pass; in train mode the running statistics are updated in place.
pub fn batchnorm_forward<T: Scalar>(
    input: &Tensor<T>,
    p: &mut BatchNormParams<T>,
    mode: BnMode,
) -> Result<Tensor<T>> {
    let (out, cache) = batchnorm_forward_cached(input, p, mode)?;
    if mode == BnMode::Train {
        p.update_running(&cache);
    }
    Ok(out)
}

pub fn batchnorm_backward<T: Scalar>(
    cache: &BnCache<T>,
    p: &BatchNormParams<T>,
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, BatchNormGrads<T>)> {
    if grad_out.shape() != cache.x_hat.shape() {
        return Err(shape_err("batchnorm_backward", "upstream gradient does not match output"));
    }
    let [n, c, h, w] = grad_out.dims4()?;
    let plane = h * w;
    let count = T::of((n * plane) as f64);
    let mut grad_in = grad_out.zeros_like();
    let mut d_gamma = vec![T::zero(); c];
    let mut d_beta = vec![T::zero(); c];
    for ch in 0..c {
        let (mut sg, mut sgx) = (T::zero(), T::zero());
        for b in 0..n {
            let at = (b * c + ch) * plane;
            for k in at..at + plane {
                let g = grad_out.data()[k];
                sg += g;
                sgx += g * cache.x_hat.data()[k];
            }
        }
        d_beta[ch] = sg;
        d_gamma[ch] = sgx;
        let scale = p.gamma.data()[ch] * cache.inv_std[ch];
        for b in 0..n {
            let at = (b * c + ch) * plane;
            for k in at..at + plane {
                let g = grad_out.data()[k];
                grad_in.data_mut()[k] = match cache.mode {
                    BnMode::Eval => scale * g,
                    BnMode::Train => {
                        scale * (g - sg / count - cache.x_hat.data()[k] * sgx / count)
                    }
                };
            }
        }
    }
    Ok((
        grad_in,
        BatchNormGrads {
            gamma: Tensor::from_vec(&[c], d_gamma)?,
            beta: Tensor::from_vec(&[c], d_beta)?,
        },
    ))
}
