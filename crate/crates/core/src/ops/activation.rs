//! PReLU and ReLU.
//!
//! At exactly `x = 0` both use the negative branch: PReLU passes `a·dy`, ReLU
//! passes zero.

use crate::error::{shape_err, Result};
use crate::tensor::{Scalar, Tensor};

pub const DEFAULT_PRELU_SLOPE: f64 = 0.25;

#[derive(Clone, Debug, PartialEq)]
pub struct PReLUParams<T: Scalar = f32> {
    /// One negative-half slope per channel.
    pub slope: Tensor<T>,
}

impl<T: Scalar> PReLUParams<T> {
    pub fn new(channels: usize, slope: T) -> Result<Self> {
        Ok(Self {
            slope: Tensor::new(&[channels], slope)?,
        })
    }

    pub fn channels(&self) -> usize {
        self.slope.len()
    }

    fn check(&self, input: &Tensor<T>) -> Result<[usize; 4]> {
        let dims = input.dims4()?;
        if dims[1] != self.channels() {
            return Err(shape_err(
                "prelu",
                format!("input has {} channels, {} slopes", dims[1], self.channels()),
            ));
        }
        Ok(dims)
    }
}

pub fn prelu_forward<T: Scalar>(input: &Tensor<T>, p: &PReLUParams<T>) -> Result<Tensor<T>> {
    let [n, c, h, w] = p.check(input)?;
    let plane = h * w;
    let mut out = input.clone();
    for b in 0..n {
        for ch in 0..c {
            let a = p.slope.data()[ch];
            for v in &mut out.data_mut()[(b * c + ch) * plane..][..plane] {
                if *v <= T::zero() {
                    *v = a * *v;
                }
            }
        }
    }
    Ok(out)
}

/// Returns the input gradient and the slope gradient.
pub fn prelu_backward<T: Scalar>(
    input: &Tensor<T>,
    p: &PReLUParams<T>,
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let [n, c, h, w] = p.check(input)?;
    if grad_out.shape() != input.shape() {
        return Err(shape_err("prelu_backward", "upstream gradient does not match input"));
    }
    let plane = h * w;
    let mut grad_in = grad_out.clone();
    let mut grad_slope = p.slope.zeros_like();
    for b in 0..n {
        for ch in 0..c {
            let a = p.slope.data()[ch];
            let at = (b * c + ch) * plane;
            let mut ga = T::zero();
            for k in at..at + plane {
                let x = input.data()[k];
                if x <= T::zero() {
                    ga += grad_out.data()[k] * x;
                    grad_in.data_mut()[k] = a * grad_out.data()[k];
                }
            }
            grad_slope.data_mut()[ch] += ga;
        }
    }
    Ok((grad_in, grad_slope))
}

pub fn relu_forward<T: Scalar>(input: &Tensor<T>) -> Tensor<T> {
    input.map(|v| if v > T::zero() { v } else { T::zero() })
}

pub fn relu_backward<T: Scalar>(input: &Tensor<T>, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    if grad_out.shape() != input.shape() {
        return Err(shape_err("relu_backward", "upstream gradient does not match input"));
    }
    let data = input
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&x, &g)| if x > T::zero() { g } else { T::zero() })
        .collect();
    Tensor::from_vec(input.shape(), data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Rng;

    #[test]
    fn zero_slope_is_relu() {
        let mut rng = Rng::new(1);
        let x = Tensor::<f32>::rand_normal(&[2, 3, 4, 4], 0.0, 1.0, &mut rng).unwrap();
        let p = PReLUParams::new(3, 0.0).unwrap();
        assert_eq!(prelu_forward(&x, &p).unwrap(), relu_forward(&x));
    }

    #[test]
    fn unit_slope_is_identity() {
        let mut rng = Rng::new(1);
        let x = Tensor::<f32>::rand_normal(&[1, 2, 3, 3], 0.0, 1.0, &mut rng).unwrap();
        assert_eq!(prelu_forward(&x, &PReLUParams::new(2, 1.0).unwrap()).unwrap(), x);
    }

    #[test]
    fn definition() {
        let x = Tensor::<f32>::from_vec(&[1, 1, 1, 2], vec![-2.0, 3.0]).unwrap();
        let y = prelu_forward(&x, &PReLUParams::new(1, 0.25).unwrap()).unwrap();
        assert_eq!(y.data(), &[-0.5, 3.0]);
    }

    #[test]
    fn gradient_at_zero_uses_negative_slope() {
        let x = Tensor::<f64>::from_vec(&[1, 1, 1, 1], vec![0.0]).unwrap();
        let g = Tensor::from_vec(&[1, 1, 1, 1], vec![2.0]).unwrap();
        let (gi, _) = prelu_backward(&x, &PReLUParams::new(1, 0.25).unwrap(), &g).unwrap();
        assert_eq!(gi.data(), &[0.5]);
        assert_eq!(relu_backward(&x, &g).unwrap().data(), &[0.0]);
    }

    #[test]
    fn slope_count_mismatch() {
        let x = Tensor::<f32>::zeros(&[1, 2, 1, 1]).unwrap();
        assert!(prelu_forward(&x, &PReLUParams::new(3, 0.25).unwrap()).is_err());
    }
}
