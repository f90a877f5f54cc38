//! SGD with momentum and per-tensor weight decay.

use crate::arch::{Model, ParamInfo};
use crate::error::{shape_err, Error, Result};
use crate::tensor::{Scalar, Tensor};

/// `v ← μ·v + g + wd·p`, then `p ← p − lr·v`.
pub fn sgd_step<T: Scalar>(
    param: &mut Tensor<T>,
    grad: &Tensor<T>,
    velocity: &mut Tensor<T>,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<()> {
    if param.shape() != grad.shape() || param.shape() != velocity.shape() {
        return Err(shape_err(
            "sgd_step",
            format!("param {:?}, grad {:?}, velocity {:?}", param.shape(), grad.shape(), velocity.shape()),
        ));
    }
    let (lr, mu, wd) = (T::of(lr), T::of(momentum), T::of(weight_decay));
    for ((p, &g), v) in param.data_mut().iter_mut().zip(grad.data()).zip(velocity.data_mut()) {
        *v = mu * *v + g + wd * *p;
        *p -= lr * *v;
    }
    Ok(())
}

/// Momentum buffers for a fixed list of tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct Sgd<T: Scalar = f32> {
    pub momentum: f64,
    velocity: Vec<Tensor<T>>,
    steps: usize,
}

impl<T: Scalar> Sgd<T> {
    pub fn new<'a>(momentum: f64, params: impl IntoIterator<Item = &'a Tensor<T>>) -> Self {
        Self {
            momentum,
            velocity: params.into_iter().map(Tensor::zeros_like).collect(),
            steps: 0,
        }
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn step(&mut self, params: Vec<&mut Tensor<T>>, grads: &[Tensor<T>], lr: f64, weight_decay: &[f64]) -> Result<()> {
        let n = self.velocity.len();
        if params.len() != n || grads.len() != n || weight_decay.len() != n {
            return Err(Error::InvalidArgument(format!(
                "optimizer tracks {n} tensors, got {} params, {} grads, {} decays",
                params.len(),
                grads.len(),
                weight_decay.len()
            )));
        }
        for (((p, g), v), &wd) in params.into_iter().zip(grads).zip(&mut self.velocity).zip(weight_decay) {
            sgd_step(p, g, v, lr, self.momentum, wd)?;
        }
        self.steps += 1;
        Ok(())
    }
}

/// Which decay a parameter receives: post-global layers always take
/// `post`; the global operator takes it only when `global_as_post` is set.
pub fn decay_for(info: &ParamInfo, general: f64, post: f64, global_as_post: bool) -> f64 {
    if info.post_global || (info.is_global && global_as_post) {
        post
    } else {
        general
    }
}

/// Per-parameter decays for `model` in [`Model::params`] order.
pub fn weight_decay_groups<T: Scalar>(model: &Model<T>, general: f64, post: f64, global_as_post: bool) -> Vec<f64> {
    model
        .params()
        .iter()
        .map(|(info, _)| decay_for(info, general, post, global_as_post))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(v: f64) -> Tensor<f64> {
        Tensor::from_vec(&[1], vec![v]).unwrap()
    }

    #[test]
    fn plain_descent() {
        let mut p = Tensor::<f64>::from_vec(&[2], vec![1.0, -2.0]).unwrap();
        let g = Tensor::from_vec(&[2], vec![0.5, 0.25]).unwrap();
        let mut v = p.zeros_like();
        sgd_step(&mut p, &g, &mut v, 0.1, 0.0, 0.0).unwrap();
        assert_eq!(p.data(), &[1.0 - 0.1 * 0.5, -2.0 - 0.1 * 0.25]);
    }

    #[test]
    fn zero_grad_no_decay_is_identity() {
        let mut p = scalar(3.0);
        let mut v = scalar(0.0);
        sgd_step(&mut p, &scalar(0.0), &mut v, 0.1, 0.9, 0.0).unwrap();
        assert_eq!(p.data(), &[3.0]);
    }

    #[test]
    fn two_momentum_steps_unrolled() {
        let (lr, mu, wd) = (0.1, 0.9, 0.01);
        let (g1, g2, p0) = (0.3, -0.7, 2.0);
        let mut p = scalar(p0);
        let mut v = scalar(0.0);
        sgd_step(&mut p, &scalar(g1), &mut v, lr, mu, wd).unwrap();
        sgd_step(&mut p, &scalar(g2), &mut v, lr, mu, wd).unwrap();
        let v1 = g1 + wd * p0;
        let p1 = p0 - lr * v1;
        let v2 = mu * v1 + g2 + wd * p1;
        let p2 = p1 - lr * v2;
        assert_eq!(p.data(), &[p2]);
        assert_eq!(v.data(), &[v2]);
    }

    #[test]
    fn shape_mismatch() {
        let mut p = scalar(1.0);
        let mut v = scalar(0.0);
        let g = Tensor::<f64>::zeros(&[2]).unwrap();
        assert!(sgd_step(&mut p, &g, &mut v, 0.1, 0.9, 0.0).is_err());
    }
}
