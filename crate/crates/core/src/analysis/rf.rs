//! Theoretical receptive-field geometry.
//!
//! For every spatial layer the map from an output unit index `i` to its
//! receptive field in input pixels is affine: the field spans `rf` pixels and
//! is centred at `offset + i · jump`. Shortcut additions never enlarge the
//! field because the convolutional branch already covers the identity branch.

use std::fmt::Write as _;

use crate::arch::{shape_propagate, ArchSpec, LayerKind};
use crate::error::{Error, Result};

/// Geometry along one axis.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AxisRf {
    pub rf: usize,
    pub jump: usize,
    /// Input-pixel centre of unit 0.
    pub offset: f64,
}

impl AxisRf {
    pub const INPUT: AxisRf = AxisRf {
        rf: 1,
        jump: 1,
        offset: 0.0,
    };

    pub fn step(self, kernel: usize, stride: usize, pad: usize) -> AxisRf {
        AxisRf {
            rf: self.rf + (kernel - 1) * self.jump,
            jump: self.jump * stride,
            offset: self.offset + ((kernel as f64 - 1.0) / 2.0 - pad as f64) * self.jump as f64,
        }
    }

    pub fn center(&self, i: usize) -> f64 {
        self.offset + (i * self.jump) as f64
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RfLayer {
    pub name: String,
    pub kind: LayerKind,
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
    pub padding: (usize, usize),
    /// Output spatial size.
    pub out: (usize, usize),
    pub h: AxisRf,
    pub w: AxisRf,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReceptiveField {
    pub input: (usize, usize),
    /// Spatial layers in forward order; the global operator, if any, is last.
    pub layers: Vec<RfLayer>,
}

impl ReceptiveField {
    /// The last layer before the global operator (the final one if there is none).
    pub fn fmap_end(&self) -> Option<usize> {
        match self.layers.iter().position(|l| l.kind == LayerKind::GDConv) {
            Some(0) => None,
            Some(g) => Some(g - 1),
            None => self.layers.len().checked_sub(1),
        }
    }

    /// Input-pixel centre `(row, col)` of unit `(i, j)` at `layer`.
    pub fn unit_center(&self, layer: usize, i: usize, j: usize) -> (f64, f64) {
        let l = &self.layers[layer];
        (l.h.center(i), l.w.center(j))
    }

    /// Unclipped input-pixel intervals `[lo, hi]` per axis of unit `(i, j)` at
    /// `layer`, found by walking the unit back through every layer.
    pub fn unit_interval(&self, layer: usize, i: usize, j: usize) -> Result<((i64, i64), (i64, i64))> {
        let l = self
            .layers
            .get(layer)
            .ok_or_else(|| Error::InvalidArgument(format!("layer index {layer} out of range")))?;
        if i >= l.out.0 || j >= l.out.1 {
            return Err(Error::InvalidArgument(format!(
                "unit ({i}, {j}) outside {}x{} output of {}",
                l.out.0, l.out.1, l.name
            )));
        }
        let (mut hi, mut wi) = ((i as i64, i as i64), (j as i64, j as i64));
        for l in self.layers[..=layer].iter().rev() {
            let back = |(lo, hi): (i64, i64), k: usize, s: usize, p: usize| {
                let (k, s, p) = (k as i64, s as i64, p as i64);
                (lo * s - p, hi * s - p + k - 1)
            };
            hi = back(hi, l.kernel.0, l.stride.0, l.padding.0);
            wi = back(wi, l.kernel.1, l.stride.1, l.padding.1);
        }
        Ok((hi, wi))
    }

    pub fn to_text(&self) -> String {
        let width = self.layers.iter().map(|l| l.name.len()).max().unwrap_or(5).max(5);
        let mut out = format!(
            "{:<width$}  {:>7}  {:>7}  {:>9}  {:>7}  {:>13}\n",
            "layer", "kernel", "stride", "out", "rf", "jump/offset"
        );
        for l in &self.layers {
            let _ = writeln!(
                out,
                "{:<width$}  {:>7}  {:>7}  {:>9}  {:>7}  {:>13}",
                l.name,
                format!("{}x{}", l.kernel.0, l.kernel.1),
                format!("{}x{}", l.stride.0, l.stride.1),
                format!("{}x{}", l.out.0, l.out.1),
                format!("{}x{}", l.h.rf, l.w.rf),
                format!("{}/{}", l.h.jump, l.h.offset),
            );
        }
        out
    }

    /// `layer,kernel_h,kernel_w,stride_h,stride_w,out_h,out_w,rf_h,rf_w,jump_h,jump_w,offset_h,offset_w`
    pub fn to_csv(&self) -> String {
        let mut out =
            String::from("layer,kernel_h,kernel_w,stride_h,stride_w,out_h,out_w,rf_h,rf_w,jump_h,jump_w,offset_h,offset_w\n");
        for l in &self.layers {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{},{},{},{},{},{}",
                l.name,
                l.kernel.0,
                l.kernel.1,
                l.stride.0,
                l.stride.1,
                l.out.0,
                l.out.1,
                l.h.rf,
                l.w.rf,
                l.h.jump,
                l.w.jump,
                l.h.offset,
                l.w.offset
            );
        }
        out
    }
}

/// Receptive field of every conv, depthwise and GDConv layer of `arch`,
/// stopping at the global operator (GDConv counts as a full-size kernel).
pub fn receptive_field(arch: &ArchSpec) -> Result<ReceptiveField> {
    let mut h = AxisRf::INPUT;
    let mut w = AxisRf::INPUT;
    let mut layers = Vec::new();
    for d in shape_propagate(arch)? {
        if !matches!(d.kind, LayerKind::Conv | LayerKind::Depthwise | LayerKind::GDConv) {
            if d.is_global {
                break;
            }
            continue;
        }
        h = h.step(d.kernel.0, d.stride.0, d.padding.0);
        w = w.step(d.kernel.1, d.stride.1, d.padding.1);
        layers.push(RfLayer {
            name: d.name,
            kind: d.kind,
            kernel: d.kernel,
            stride: d.stride,
            padding: d.padding,
            out: (d.output[1], d.output[2]),
            h,
            w,
        });
        if d.is_global {
            break;
        }
    }
    Ok(ReceptiveField {
        input: (arch.input.height, arch.input.width),
        layers,
    })
}
