//! Spatial heat maps: effective receptive fields and GDConv importance.

use std::fmt::Write as _;

use crate::arch::Model;
use crate::error::{Error, Result};
use crate::ops::GDConvParams;
use crate::tensor::{Rng, Scalar, Tensor};

/// Non-negative `height × width` grid, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct HeatMap {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
}

pub type ImportanceMap = HeatMap;

impl HeatMap {
    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            values: vec![0.0; height * width],
        }
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.width + j]
    }

    pub fn total(&self) -> f64 {
        self.values.iter().sum()
    }

    /// Mass centroid `(row, col)`; `None` for an all-zero map.
    pub fn centroid(&self) -> Option<(f64, f64)> {
        let total = self.total();
        if total <= 0.0 {
            return None;
        }
        let (mut r, mut c) = (0.0, 0.0);
        for i in 0..self.height {
            for j in 0..self.width {
                let v = self.get(i, j);
                r += v * i as f64;
                c += v * j as f64;
            }
        }
        Some((r / total, c / total))
    }

    /// `i,j,value` rows.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("i,j,value\n");
        for i in 0..self.height {
            for j in 0..self.width {
                let _ = writeln!(out, "{i},{j},{}", self.get(i, j));
            }
        }
        out
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for i in 0..self.height {
            let row: Vec<String> = (0..self.width).map(|j| format!("{:.4}", self.get(i, j))).collect();
            out.push_str(&row.join(" "));
            out.push('\n');
        }
        out
    }
}

/// `value(i, j) = ‖K[:, i, j]‖₂` over channels.
pub fn importance_map<T: Scalar>(gdconv: &GDConvParams<T>) -> ImportanceMap {
    let (h, w) = gdconv.spatial();
    let mut map = HeatMap::zeros(h, w);
    for plane in gdconv.kernel.data().chunks_exact(h * w) {
        for (acc, &k) in map.values.iter_mut().zip(plane) {
            *acc += k.as_f64() * k.as_f64();
        }
    }
    map.values.iter_mut().for_each(|v| *v = v.sqrt());
    map
}

/// Input-gradient magnitude, summed over input channels, of FMap-end unit
/// `(channel, i, j)` for one input image. The model is analysed up to its
/// global operator (all layers when there is none).
pub fn erf_map<T: Scalar>(model: &Model<T>, unit: (usize, usize, usize), input: &Tensor<T>) -> Result<HeatMap> {
    if model.mode() == crate::arch::Mode::Train {
        return Err(Error::InvalidArgument("erf needs an eval or folded model".into()));
    }
    let [n, _, h, w] = input.dims4()?;
    if n != 1 {
        return Err(Error::InvalidArgument("erf takes a single input image".into()));
    }
    let end = model.global_index().unwrap_or(model.nodes().len());
    let (out, tape) = model.forward_prefix_tape(input, end)?;
    let [_, c, oh, ow] = out.dims4()?;
    let (uc, ui, uj) = unit;
    if uc >= c || ui >= oh || uj >= ow {
        return Err(Error::InvalidArgument(format!(
            "unit ({uc}, {ui}, {uj}) outside FMap-end of {c}×{oh}×{ow}"
        )));
    }
    let mut grad = out.zeros_like();
    grad.set(&[0, uc, ui, uj], T::one());
    let back = model.backward(&tape, grad)?;
    let mut map = HeatMap::zeros(h, w);
    for plane in back.input.data().chunks_exact(h * w) {
        for (acc, &g) in map.values.iter_mut().zip(plane) {
            *acc += g.as_f64().abs();
        }
    }
    Ok(map)
}

/// Mean of [`erf_map`] over `samples` standard-normal inputs.
pub fn erf_map_averaged<T: Scalar>(
    model: &Model<T>,
    unit: (usize, usize, usize),
    samples: usize,
    rng: &mut Rng,
) -> Result<HeatMap> {
    if samples == 0 {
        return Err(Error::InvalidArgument("erf averaging needs at least one sample".into()));
    }
    let r = model.arch().input;
    let mut acc = HeatMap::zeros(r.height, r.width);
    for _ in 0..samples {
        let x = Tensor::rand_normal(&[1, 3, r.height, r.width], T::zero(), T::one(), rng)?;
        let m = erf_map(model, unit, &x)?;
        acc.values.iter_mut().zip(&m.values).for_each(|(a, v)| *a += v);
    }
    acc.values.iter_mut().for_each(|v| *v /= samples as f64);
    Ok(acc)
}
