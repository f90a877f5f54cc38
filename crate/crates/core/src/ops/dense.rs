//! Fully connected and global-average-pooling heads.

use crate::error::{shape_err, Result};
use crate::ops::kernel::{axpy, dot};
use crate::tensor::{Scalar, Tensor};

/// Flatten-then-dense map, `out × in` weights.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseParams<T: Scalar = f32> {
    pub weight: Tensor<T>,
    pub bias: Option<Tensor<T>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DenseGrads<T: Scalar = f32> {
    pub weight: Tensor<T>,
    pub bias: Option<Tensor<T>>,
}

impl<T: Scalar> DenseParams<T> {
    pub fn new(weight: Tensor<T>) -> Result<Self> {
        if weight.rank() != 2 {
            return Err(shape_err("dense", "weight must be out×in"));
        }
        Ok(Self { weight, bias: None })
    }

    pub fn in_features(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn out_features(&self) -> usize {
        self.weight.shape()[0]
    }

    fn check(&self, input: &Tensor<T>) -> Result<usize> {
        let [n, c, h, w] = input.dims4()?;
        if c * h * w != self.in_features() {
            return Err(shape_err(
                "dense",
                format!("flattened input has {} features, weight expects {}", c * h * w, self.in_features()),
            ));
        }
        Ok(n)
    }

    pub fn output_shape(&self, input: [usize; 4]) -> Result<[usize; 4]> {
        let [n, c, h, w] = input;
        if c * h * w != self.in_features() {
            return Err(shape_err("dense", "feature count mismatch"));
        }
        Ok([n, self.out_features(), 1, 1])
    }
}

pub fn dense_forward<T: Scalar>(input: &Tensor<T>, p: &DenseParams<T>) -> Result<Tensor<T>> {
    let n = p.check(input)?;
    let (fin, fout) = (p.in_features(), p.out_features());
    let mut out = Tensor::zeros(&[n, fout, 1, 1])?;
    for b in 0..n {
        let x = &input.data()[b * fin..][..fin];
        for o in 0..fout {
            let bias = p.bias.as_ref().map_or(T::zero(), |t| t.data()[o]);
            out.data_mut()[b * fout + o] = bias + dot(&p.weight.data()[o * fin..][..fin], x);
        }
    }
    Ok(out)
}

pub fn dense_backward<T: Scalar>(
    input: &Tensor<T>,
    p: &DenseParams<T>,
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, DenseGrads<T>)> {
    let n = p.check(input)?;
    let (fin, fout) = (p.in_features(), p.out_features());
    if grad_out.len() != n * fout {
        return Err(shape_err("dense_backward", "upstream gradient does not match output"));
    }
    let mut grad_in = input.zeros_like();
    let mut grad_w = p.weight.zeros_like();
    let mut grad_b = p.bias.as_ref().map(Tensor::zeros_like);
    for b in 0..n {
        let x = &input.data()[b * fin..][..fin];
        for o in 0..fout {
            let g = grad_out.data()[b * fout + o];
            if let Some(gb) = grad_b.as_mut() {
                gb.data_mut()[o] += g;
            }
            axpy(g, x, &mut grad_w.data_mut()[o * fin..][..fin]);
            axpy(g, &p.weight.data()[o * fin..][..fin], &mut grad_in.data_mut()[b * fin..][..fin]);
        }
    }
    Ok((
        grad_in,
        DenseGrads {
            weight: grad_w,
            bias: grad_b,
        },
    ))
}

/// Spatial mean per channel: `N×C×H×W → N×C×1×1`.
pub fn global_avg_pool_forward<T: Scalar>(input: &Tensor<T>) -> Result<Tensor<T>> {
    let [n, c, h, w] = input.dims4()?;
    let plane = h * w;
    let inv = T::one() / T::of(plane as f64);
    let data = input
        .data()
        .chunks_exact(plane)
        .map(|p| p.iter().copied().sum::<T>() * inv)
        .collect();
    Tensor::from_vec(&[n, c, 1, 1], data)
}

pub fn global_avg_pool_backward<T: Scalar>(input_shape: [usize; 4], grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    let [n, c, h, w] = input_shape;
    if grad_out.len() != n * c {
        return Err(shape_err("global_avg_pool_backward", "upstream gradient does not match output"));
    }
    let plane = h * w;
    let inv = T::one() / T::of(plane as f64);
    let mut data = Vec::with_capacity(n * c * plane);
    for &g in grad_out.data() {
        data.extend(std::iter::repeat_n(g * inv, plane));
    }
    Tensor::from_vec(&input_shape, data)
}
