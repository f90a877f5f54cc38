//! Global depthwise convolution.
//!
//! A depthwise convolution whose kernel covers the whole input feature map
//! (pad 0, stride 1), so every channel collapses to one value:
//! `G[m] = Σ_{i,j} K[m,i,j] · F[m,i,j]`. Cost and parameter count are both
//! `W·H·M`.

use crate::error::{shape_err, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct GDConvParams<T: Scalar = f32> {
    /// `channels × 1 × H × W`, with `H × W` equal to the input spatial size.
    pub kernel: Tensor<T>,
    /// Present only after batch-norm folding.
    pub bias: Option<Tensor<T>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GDConvGrads<T: Scalar = f32> {
    pub kernel: Tensor<T>,
    pub bias: Option<Tensor<T>>,
}

#[cfg(test)]
thread_local! {
    /// Mutation hook: makes the backward pass read the kernel and feature
    /// map at transposed spatial positions.
    pub(crate) static CORRUPT_BACKWARD: std::cell::Cell<bool> = const { std::cell::Cell::new(false) };
}

#[inline]
fn backward_index(i: usize, j: usize, h: usize, w: usize) -> usize {
    #[cfg(test)]
    if CORRUPT_BACKWARD.with(|c| c.get()) && h == w {
        return j * w + i;
    }
    let _ = h;
    i * w + j
}

impl<T: Scalar> GDConvParams<T> {
    pub fn new(kernel: Tensor<T>) -> Result<Self> {
        let [_, one, _, _] = kernel.dims4()?;
        if one != 1 {
            return Err(shape_err("gdconv", "kernel must be channels×1×H×W"));
        }
        Ok(Self { kernel, bias: None })
    }

    pub fn channels(&self) -> usize {
        self.kernel.shape()[0]
    }

    /// Spatial `(H, W)` the layer accepts.
    pub fn spatial(&self) -> (usize, usize) {
        (self.kernel.shape()[2], self.kernel.shape()[3])
    }

    fn check(&self, dims: [usize; 4]) -> Result<()> {
        let [_, c, h, w] = dims;
        if c != self.channels() {
            return Err(shape_err(
                "gdconv",
                format!("input has {c} channels, kernel has {}", self.channels()),
            ));
        }
        if (h, w) != self.spatial() {
            let (kh, kw) = self.spatial();
            return Err(shape_err(
                "gdconv",
                format!("input spatial {h}x{w} differs from kernel {kh}x{kw}"),
            ));
        }
        Ok(())
    }

    pub fn output_shape(&self, input: [usize; 4]) -> Result<[usize; 4]> {
        self.check(input)?;
        Ok([input[0], input[1], 1, 1])
    }
}

pub fn gdconv_forward<T: Scalar>(input: &Tensor<T>, p: &GDConvParams<T>) -> Result<Tensor<T>> {
    let dims = input.dims4()?;
    p.check(dims)?;
    let [n, m, h, w] = dims;
    let plane = h * w;
    let mut out = Tensor::zeros(&[n, m, 1, 1])?;
    for b in 0..n {
        for ch in 0..m {
            let f = &input.data()[(b * m + ch) * plane..][..plane];
            let k = &p.kernel.data()[ch * plane..][..plane];
            let mut acc = p.bias.as_ref().map_or(T::zero(), |bias| bias.data()[ch]);
            for (&kv, &fv) in k.iter().zip(f) {
                acc += kv * fv;
            }
            out.data_mut()[b * m + ch] = acc;
        }
    }
    Ok(out)
}

/// `∂L/∂K[m,i,j] = Σ_batch F[m,i,j]·∂L/∂G[m]` and `∂L/∂F[m,i,j] = K[m,i,j]·∂L/∂G[m]`.
pub fn gdconv_backward<T: Scalar>(
    input: &Tensor<T>,
    p: &GDConvParams<T>,
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, GDConvGrads<T>)> {
    let dims = input.dims4()?;
    p.check(dims)?;
    let [n, m, h, w] = dims;
    if grad_out.shape() != [n, m, 1, 1] {
        return Err(shape_err(
            "gdconv_backward",
            format!("upstream gradient {:?} is not {n}×{m}×1×1", grad_out.shape()),
        ));
    }
    let plane = h * w;
    let mut grad_in = input.zeros_like();
    let mut grad_k = p.kernel.zeros_like();
    let mut grad_b = p.bias.as_ref().map(Tensor::zeros_like);
    for b in 0..n {
        for ch in 0..m {
            let g = grad_out.data()[b * m + ch];
            if let Some(gb) = grad_b.as_mut() {
                gb.data_mut()[ch] += g;
            }
            let base = (b * m + ch) * plane;
            for i in 0..h {
                for j in 0..w {
                    let src = backward_index(i, j, h, w);
                    let dst = i * w + j;
                    grad_k.data_mut()[ch * plane + dst] += input.data()[base + src] * g;
                    grad_in.data_mut()[base + dst] = p.kernel.data()[ch * plane + src] * g;
                }
            }
        }
    }
    Ok((
        grad_in,
        GDConvGrads {
            kernel: grad_k,
            bias: grad_b,
        },
    ))
}
