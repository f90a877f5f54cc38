//! Depthwise convolution: one spatial filter per channel.

use crate::error::{shape_err, Error, Result};
use crate::ops::kernel::{plane_backward, plane_forward, Geometry};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct DepthwiseConvParams<T: Scalar = f32> {
    /// `channels × 1 × kh × kw`.
    pub weight: Tensor<T>,
    pub bias: Option<Tensor<T>>,
    pub stride: (usize, usize),
    pub padding: (usize, usize),
}

#[derive(Clone, Debug, PartialEq)]
pub struct DepthwiseGrads<T: Scalar = f32> {
    pub weight: Tensor<T>,
    pub bias: Option<Tensor<T>>,
}

impl<T: Scalar> DepthwiseConvParams<T> {
    pub fn new(weight: Tensor<T>, stride: (usize, usize), padding: (usize, usize)) -> Result<Self> {
        let [_, one, _, _] = weight.dims4()?;
        if one != 1 {
            return Err(shape_err("depthwise_conv2d", "weights must be channels×1×kh×kw"));
        }
        if stride.0 == 0 || stride.1 == 0 {
            return Err(Error::InvalidArgument("stride must be at least 1".into()));
        }
        Ok(Self {
            weight,
            bias: None,
            stride,
            padding,
        })
    }

    pub fn channels(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn kernel(&self) -> (usize, usize) {
        (self.weight.shape()[2], self.weight.shape()[3])
    }

    fn geometry(&self, input: &Tensor<T>) -> Result<([usize; 4], Geometry)> {
        let dims = input.dims4()?;
        let [_, c, h, w] = dims;
        if c != self.channels() {
            return Err(shape_err(
                "depthwise_conv2d",
                format!("input has {c} channels, weights expect {}", self.channels()),
            ));
        }
        let g = Geometry::new("depthwise_conv2d", (h, w), self.kernel(), self.stride, self.padding)?;
        Ok((dims, g))
    }

    pub fn output_shape(&self, input: [usize; 4]) -> Result<[usize; 4]> {
        let [n, c, h, w] = input;
        if c != self.channels() {
            return Err(shape_err("depthwise_conv2d", "channel mismatch"));
        }
        let g = Geometry::new("depthwise_conv2d", (h, w), self.kernel(), self.stride, self.padding)?;
        Ok([n, c, g.out_h, g.out_w])
    }
}

pub fn depthwise_conv2d_forward<T: Scalar>(
    input: &Tensor<T>,
    p: &DepthwiseConvParams<T>,
) -> Result<Tensor<T>> {
    let ([n, c, _, _], g) = p.geometry(input)?;
    let (in_plane, out_plane, ksize) = (g.in_h * g.in_w, g.out_h * g.out_w, g.kh * g.kw);
    let mut out = Tensor::zeros(&[n, c, g.out_h, g.out_w])?;
    let (x, w, y) = (input.data(), p.weight.data(), out.data_mut());
    for b in 0..n {
        for ch in 0..c {
            let oplane = &mut y[(b * c + ch) * out_plane..][..out_plane];
            if let Some(bias) = &p.bias {
                oplane.fill(bias.data()[ch]);
            }
            plane_forward(
                oplane,
                &x[(b * c + ch) * in_plane..][..in_plane],
                &w[ch * ksize..][..ksize],
                &g,
            );
        }
    }
    Ok(out)
}

pub fn depthwise_conv2d_forward_reference<T: Scalar>(
    input: &Tensor<T>,
    p: &DepthwiseConvParams<T>,
) -> Result<Tensor<T>> {
    let ([n, c, h, w], g) = p.geometry(input)?;
    let mut out = Tensor::zeros(&[n, c, g.out_h, g.out_w])?;
    for b in 0..n {
        for ch in 0..c {
            for oh in 0..g.out_h {
                for ow in 0..g.out_w {
                    let mut acc = p.bias.as_ref().map_or(T::zero(), |bias| bias.data()[ch]);
                    for ki in 0..g.kh {
                        for kj in 0..g.kw {
                            let ih = (oh * g.sh + ki) as isize - g.ph as isize;
                            let iw = (ow * g.sw + kj) as isize - g.pw as isize;
                            if ih < 0 || iw < 0 || ih >= h as isize || iw >= w as isize {
                                continue;
                            }
                            acc += p.weight.get(&[ch, 0, ki, kj])
                                * input.get(&[b, ch, ih as usize, iw as usize]);
                        }
                    }
                    out.set(&[b, ch, oh, ow], acc);
                }
            }
        }
    }
    Ok(out)
}

pub fn depthwise_conv2d_backward<T: Scalar>(
    input: &Tensor<T>,
    p: &DepthwiseConvParams<T>,
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, DepthwiseGrads<T>)> {
    let ([n, c, _, _], g) = p.geometry(input)?;
    if grad_out.shape() != [n, c, g.out_h, g.out_w] {
        return Err(shape_err(
            "depthwise_conv2d_backward",
            format!("upstream gradient {:?} does not match output", grad_out.shape()),
        ));
    }
    let (in_plane, out_plane, ksize) = (g.in_h * g.in_w, g.out_h * g.out_w, g.kh * g.kw);
    let mut grad_in = input.zeros_like();
    let mut grad_w = p.weight.zeros_like();
    let mut grad_b = p.bias.as_ref().map(Tensor::zeros_like);
    for b in 0..n {
        for ch in 0..c {
            let gplane = &grad_out.data()[(b * c + ch) * out_plane..][..out_plane];
            if let Some(gb) = grad_b.as_mut() {
                gb.data_mut()[ch] += gplane.iter().copied().sum::<T>();
            }
            plane_backward(
                &mut grad_in.data_mut()[(b * c + ch) * in_plane..][..in_plane],
                &mut grad_w.data_mut()[ch * ksize..][..ksize],
                &input.data()[(b * c + ch) * in_plane..][..in_plane],
                &p.weight.data()[ch * ksize..][..ksize],
                gplane,
                &g,
            );
        }
    }
    Ok((
        grad_in,
        DepthwiseGrads {
            weight: grad_w,
            bias: grad_b,
        },
    ))
}
