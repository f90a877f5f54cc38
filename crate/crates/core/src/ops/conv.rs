//! Standard 2-D convolution (`conv3x3`, `conv1x1` rows).

use crate::error::{shape_err, Error, Result};
use crate::ops::kernel::{col2im, dot, gemm_acc, im2col, Geometry};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct ConvParams<T: Scalar = f32> {
    /// `out_channels × in_channels × kh × kw`.
    pub weight: Tensor<T>,
    /// One entry per output channel, if present.
    pub bias: Option<Tensor<T>>,
    pub stride: (usize, usize),
    pub padding: (usize, usize),
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvGrads<T: Scalar = f32> {
    pub weight: Tensor<T>,
    pub bias: Option<Tensor<T>>,
}

impl<T: Scalar> ConvParams<T> {
    pub fn new(weight: Tensor<T>, stride: (usize, usize), padding: (usize, usize)) -> Result<Self> {
        weight.dims4()?;
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

    pub fn with_bias(mut self, bias: Tensor<T>) -> Result<Self> {
        if bias.len() != self.out_channels() {
            return Err(shape_err("conv2d", "bias length differs from output channels"));
        }
        self.bias = Some(bias);
        Ok(self)
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn kernel(&self) -> (usize, usize) {
        (self.weight.shape()[2], self.weight.shape()[3])
    }

    fn geometry(&self, input: &Tensor<T>) -> Result<([usize; 4], Geometry)> {
        let dims = input.dims4()?;
        let [_, c, h, w] = dims;
        if c != self.in_channels() {
            return Err(shape_err(
                "conv2d",
                format!("input has {c} channels, weights expect {}", self.in_channels()),
            ));
        }
        let g = Geometry::new("conv2d", (h, w), self.kernel(), self.stride, self.padding)?;
        Ok((dims, g))
    }

    pub fn output_shape(&self, input: [usize; 4]) -> Result<[usize; 4]> {
        let [n, c, h, w] = input;
        if c != self.in_channels() {
            return Err(shape_err("conv2d", "channel mismatch"));
        }
        let g = Geometry::new("conv2d", (h, w), self.kernel(), self.stride, self.padding)?;
        Ok([n, self.out_channels(), g.out_h, g.out_w])
    }
}

pub fn conv2d_forward<T: Scalar>(input: &Tensor<T>, p: &ConvParams<T>) -> Result<Tensor<T>> {
    let ([n, cin, _, _], g) = p.geometry(input)?;
    let cout = p.out_channels();
    let (in_plane, out_plane) = (g.in_h * g.in_w, g.out_h * g.out_w);
    let ksize = g.kh * g.kw;
    let mut out = Tensor::zeros(&[n, cout, g.out_h, g.out_w])?;
    let (x, w, y) = (input.data(), p.weight.data(), out.data_mut());
    let pointwise = g.is_pointwise();
    let krows = cin * ksize;
    let mut col = if pointwise { Vec::new() } else { vec![T::zero(); krows * out_plane] };
    for b in 0..n {
        let yb = &mut y[b * cout * out_plane..][..cout * out_plane];
        if let Some(bias) = &p.bias {
            for (plane, &v) in yb.chunks_mut(out_plane).zip(bias.data()) {
                plane.fill(v);
            }
        }
        let xb = &x[b * cin * in_plane..][..cin * in_plane];
        if pointwise {
            gemm_acc(yb, w, xb, cout, cin, in_plane);
        } else {
            im2col(&mut col, xb, cin, &g);
            gemm_acc(yb, w, &col, cout, krows, out_plane);
        }
    }
    Ok(out)
}

/// Direct loop convolution: each output is the windowed dot product.
pub fn conv2d_forward_reference<T: Scalar>(input: &Tensor<T>, p: &ConvParams<T>) -> Result<Tensor<T>> {
    let ([n, cin, h, w], g) = p.geometry(input)?;
    let cout = p.out_channels();
    let mut out = Tensor::zeros(&[n, cout, g.out_h, g.out_w])?;
    for b in 0..n {
        for co in 0..cout {
            for oh in 0..g.out_h {
                for ow in 0..g.out_w {
                    let mut acc = p.bias.as_ref().map_or(T::zero(), |bias| bias.data()[co]);
                    for ci in 0..cin {
                        for ki in 0..g.kh {
                            for kj in 0..g.kw {
                                let ih = (oh * g.sh + ki) as isize - g.ph as isize;
                                let iw = (ow * g.sw + kj) as isize - g.pw as isize;
                                if ih < 0 || iw < 0 || ih >= h as isize || iw >= w as isize {
                                    continue;
                                }
                                acc += p.weight.get(&[co, ci, ki, kj])
                                    * input.get(&[b, ci, ih as usize, iw as usize]);
                            }
                        }
                    }
                    out.set(&[b, co, oh, ow], acc);
                }
            }
        }
    }
    Ok(out)
}

/// Gradients of `conv2d_forward` with respect to its input, weights and bias.
pub fn conv2d_backward<T: Scalar>(
    input: &Tensor<T>,
    p: &ConvParams<T>,
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, ConvGrads<T>)> {
    let ([n, cin, _, _], g) = p.geometry(input)?;
    let cout = p.out_channels();
    if grad_out.shape() != [n, cout, g.out_h, g.out_w] {
        return Err(shape_err(
            "conv2d_backward",
            format!("upstream gradient {:?} does not match output", grad_out.shape()),
        ));
    }
    let (in_plane, out_plane) = (g.in_h * g.in_w, g.out_h * g.out_w);
    let ksize = g.kh * g.kw;
    let mut grad_in = input.zeros_like();
    let mut grad_w = p.weight.zeros_like();
    let mut grad_b = p.bias.as_ref().map(Tensor::zeros_like);
    let (x, w, gy) = (input.data(), p.weight.data(), grad_out.data());
    let pointwise = g.is_pointwise();
    let krows = cin * ksize;
    let mut wt = vec![T::zero(); krows * cout];
    for co in 0..cout {
        for r in 0..krows {
            wt[r * cout + co] = w[co * krows + r];
        }
    }
    let mut col = if pointwise { Vec::new() } else { vec![T::zero(); krows * out_plane] };
    let mut gcol = col.clone();
    let gw = grad_w.data_mut();
    for b in 0..n {
        let gyb = &gy[b * cout * out_plane..][..cout * out_plane];
        let xb = &x[b * cin * in_plane..][..cin * in_plane];
        let gi = &mut grad_in.data_mut()[b * cin * in_plane..][..cin * in_plane];
        let cols: &[T] = if pointwise {
            gemm_acc(gi, &wt, gyb, cin, cout, in_plane);
            xb
        } else {
            im2col(&mut col, xb, cin, &g);
            gcol.fill(T::zero());
            gemm_acc(&mut gcol, &wt, gyb, krows, cout, out_plane);
            col2im(gi, &gcol, cin, &g);
            &col
        };
        for co in 0..cout {
            let gplane = &gyb[co * out_plane..][..out_plane];
            if let Some(gb) = grad_b.as_mut() {
                gb.data_mut()[co] += gplane.iter().copied().sum::<T>();
            }
            for r in 0..krows {
                gw[co * krows + r] += dot(gplane, &cols[r * out_plane..][..out_plane]);
            }
        }
    }
    Ok((
        grad_in,
        ConvGrads {
            weight: grad_w,
            bias: grad_b,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Rng;

    fn params(shape: [usize; 4], stride: usize, pad: usize, rng: &mut Rng) -> ConvParams<f64> {
        let w = Tensor::rand_normal(&shape, 0.0, 1.0, rng).unwrap();
        ConvParams::new(w, (stride, stride), (pad, pad)).unwrap()
    }

    #[test]
    fn identity_kernel() {
        let mut rng = Rng::new(1);
        let x = Tensor::<f32>::rand_normal(&[1, 1, 3, 3], 0.0, 1.0, &mut rng).unwrap();
        let p = ConvParams::new(Tensor::new(&[1, 1, 1, 1], 1.0).unwrap(), (1, 1), (0, 0)).unwrap();
        assert_eq!(conv2d_forward(&x, &p).unwrap(), x);
    }

    #[test]
    fn first_row_output_shape() {
        let x = Tensor::<f32>::zeros(&[1, 3, 112, 112]).unwrap();
        let p = ConvParams::new(Tensor::zeros(&[64, 3, 3, 3]).unwrap(), (2, 2), (1, 1)).unwrap();
        assert_eq!(conv2d_forward(&x, &p).unwrap().shape(), &[1, 64, 56, 56]);
    }

    /// Six nested loops written independently of both library paths.
    fn six_loop_oracle(x: &Tensor<f64>, w: &Tensor<f64>) -> Vec<f64> {
        let [_, cin, h, wd] = x.dims4().unwrap();
        let [cout, _, kh, kw] = w.dims4().unwrap();
        let (oh_n, ow_n) = (h - kh + 1, wd - kw + 1);
        let mut out = vec![0.0; cout * oh_n * ow_n];
        for co in 0..cout {
            for oh in 0..oh_n {
                for ow in 0..ow_n {
                    for ci in 0..cin {
                        for i in 0..kh {
                            for j in 0..kw {
                                out[(co * oh_n + oh) * ow_n + ow] +=
                                    w.data()[((co * cin + ci) * kh + i) * kw + j]
                                        * x.data()[(ci * h + oh + i) * wd + ow + j];
                            }
                        }
                    }
                }
            }
        }
        out
    }

    #[test]
    fn matches_loop_oracle() {
        let mut rng = Rng::new(5);
        let x = Tensor::rand_normal(&[1, 2, 5, 5], 0.0, 1.0, &mut rng).unwrap();
        let p = params([3, 2, 3, 3], 1, 0, &mut rng);
        let expect = six_loop_oracle(&x, &p.weight);
        for got in [conv2d_forward(&x, &p).unwrap(), conv2d_forward_reference(&x, &p).unwrap()] {
            assert_eq!(got.shape(), &[1, 3, 3, 3]);
            for (a, b) in got.data().iter().zip(&expect) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn fast_path_equals_reference_over_geometries() {
        let mut rng = Rng::new(9);
        for stride in 1..=2 {
            for pad in 0..=2 {
                for k in [1, 2, 3] {
                    let x = Tensor::<f32>::rand_normal(&[2, 3, 7, 6], 0.0, 1.0, &mut rng).unwrap();
                    let w = Tensor::rand_normal(&[4, 3, k, k], 0.0, 1.0, &mut rng).unwrap();
                    let bias = Tensor::rand_normal(&[4], 0.0, 1.0, &mut rng).unwrap();
                    let p = ConvParams::new(w, (stride, stride), (pad, pad))
                        .unwrap()
                        .with_bias(bias)
                        .unwrap();
                    let fast = conv2d_forward(&x, &p).unwrap();
                    let slow = conv2d_forward_reference(&x, &p).unwrap();
                    let expect_h = (7 + 2 * pad - k) / stride + 1;
                    let expect_w = (6 + 2 * pad - k) / stride + 1;
                    assert_eq!(fast.shape(), &[2, 4, expect_h, expect_w]);
                    assert!(fast.max_abs_diff(&slow).unwrap() < 1e-5);
                }
            }
        }
    }

    #[test]
    fn pointwise_backward_matches_sums() {
        let mut rng = Rng::new(12);
        let (n, cin, cout, hw) = (2, 5, 6, 9);
        let x = Tensor::rand_normal(&[n, cin, 3, 3], 0.0, 1.0, &mut rng).unwrap();
        let p = params([cout, cin, 1, 1], 1, 0, &mut rng)
            .with_bias(Tensor::zeros(&[cout]).unwrap())
            .unwrap();
        let gy = Tensor::rand_normal(&[n, cout, 3, 3], 0.0, 1.0, &mut rng).unwrap();
        let (gx, gw) = conv2d_backward(&x, &p, &gy).unwrap();
        let w = p.weight.data();
        for b in 0..n {
            for ci in 0..cin {
                for q in 0..hw {
                    let e: f64 = (0..cout).map(|co| w[co * cin + ci] * gy.data()[(b * cout + co) * hw + q]).sum();
                    assert!((gx.data()[(b * cin + ci) * hw + q] - e).abs() < 1e-12);
                }
            }
        }
        for co in 0..cout {
            for ci in 0..cin {
                let e: f64 = (0..n)
                    .flat_map(|b| (0..hw).map(move |q| (b, q)))
                    .map(|(b, q)| gy.data()[(b * cout + co) * hw + q] * x.data()[(b * cin + ci) * hw + q])
                    .sum();
                assert!((gw.weight.data()[co * cin + ci] - e).abs() < 1e-12);
            }
            let eb: f64 = (0..n).flat_map(|b| gy.data()[(b * cout + co) * hw..][..hw].to_vec()).sum();
            assert!((gw.bias.as_ref().unwrap().data()[co] - eb).abs() < 1e-12);
        }
    }

    #[test]
    fn channel_mismatch_and_oversized_kernel() {
        let x = Tensor::<f32>::zeros(&[1, 2, 3, 3]).unwrap();
        let p = ConvParams::new(Tensor::zeros(&[1, 3, 1, 1]).unwrap(), (1, 1), (0, 0)).unwrap();
        assert!(matches!(conv2d_forward(&x, &p), Err(Error::ShapeMismatch { .. })));
        let p = ConvParams::new(Tensor::zeros(&[1, 2, 5, 5]).unwrap(), (1, 1), (0, 0)).unwrap();
        assert!(matches!(conv2d_forward(&x, &p), Err(Error::ShapeMismatch { .. })));
    }
}
