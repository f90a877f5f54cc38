//! Parameter and multiply-add accounting.
//!
//! Parameters are learnable tensors only: conv/FC weights and biases, BN γ and
//! β, PReLU slopes and GDConv kernels. MAdds count one per multiply-accumulate
//! in conv, depthwise, GDConv and FC layers; BN, activations and residual adds
//! are free.

use std::fmt::Write as _;

use crate::arch::{shape_propagate, ArchSpec, Layer, LayerDesc, LayerKind, Model, Node, Resolution};
use crate::error::Result;
use crate::tensor::Scalar;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CostRow {
    pub layer: String,
    pub kind: LayerKind,
    pub params: u64,
    pub madds: u64,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CostReport {
    pub rows: Vec<CostRow>,
    pub total_params: u64,
    pub total_madds: u64,
}

impl CostReport {
    pub fn from_rows(rows: Vec<CostRow>) -> Self {
        let total_params = rows.iter().map(|r| r.params).sum();
        let total_madds = rows.iter().map(|r| r.madds).sum();
        Self {
            rows,
            total_params,
            total_madds,
        }
    }

    /// Parameters in millions rounded to `decimals` places.
    pub fn params_millions(&self, decimals: i32) -> f64 {
        round_to(self.total_params as f64 / 1e6, decimals)
    }

    pub fn to_text(&self) -> String {
        let width = self.rows.iter().map(|r| r.layer.len()).max().unwrap_or(5).max(5);
        let mut out = format!("{:<width$}  {:<7}  {:>10}  {:>12}\n", "layer", "kind", "params", "madds");
        for r in &self.rows {
            let _ = writeln!(out, "{:<width$}  {:<7}  {:>10}  {:>12}", r.layer, r.kind.to_string(), r.params, r.madds);
        }
        let _ = writeln!(
            out,
            "total params {} ({:.2}M), madds {} ({:.1}M)",
            self.total_params,
            self.params_millions(2),
            self.total_madds,
            self.total_madds as f64 / 1e6
        );
        out
    }

    /// `layer,params,madds` rows followed by a `total` row.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("layer,params,madds\n");
        for r in &self.rows {
            let _ = writeln!(out, "{},{},{}", r.layer, r.params, r.madds);
        }
        let _ = writeln!(out, "total,{},{}", self.total_params, self.total_madds);
        out
    }
}

pub(crate) fn round_to(v: f64, decimals: i32) -> f64 {
    let p = 10f64.powi(decimals);
    (v * p).round() / p
}

fn desc_row(d: &LayerDesc) -> CostRow {
    let [cin, ..] = d.input;
    let [cout, hout, wout] = d.output;
    let (kh, kw) = d.kernel;
    let spatial = (hout * wout) as u64;
    let (weights, bias, per_pos, out_positions) = match d.kind {
        LayerKind::Conv => (cout * cin * kh * kw, cout, (cout * cin * kh * kw) as u64, spatial),
        LayerKind::Depthwise => (cin * kh * kw, cin, (cin * kh * kw) as u64, spatial),
        LayerKind::GDConv => (cin * kh * kw, cin, (cin * kh * kw) as u64, 1),
        LayerKind::Dense => {
            let fin: usize = d.input.iter().product();
            (fin * cout, cout, (fin * cout) as u64, 1)
        }
        LayerKind::BatchNorm => (2 * cin, 0, 0, 0),
        LayerKind::PRelu => (cin, 0, 0, 0),
        LayerKind::Relu | LayerKind::GlobalAvgPool => (0, 0, 0, 0),
    };
    CostRow {
        layer: d.name.clone(),
        kind: d.kind,
        params: (weights + if d.bias { bias } else { 0 }) as u64,
        madds: per_pos * out_positions,
    }
}

/// Report computed from the architecture alone, at its own input resolution.
pub fn count_params(arch: &ArchSpec) -> Result<CostReport> {
    Ok(CostReport::from_rows(shape_propagate(arch)?.iter().map(desc_row).collect()))
}

/// Report for `arch` evaluated at `input` (GDConv kernels follow the resolution).
pub fn count_madds(arch: &ArchSpec, input: Resolution) -> Result<CostReport> {
    let mut a = arch.clone();
    a.input = input;
    count_params(&a)
}

fn node_rows<T: Scalar>(nodes: &[Node<T>], mut shape: [usize; 4], rows: &mut Vec<CostRow>) -> Result<[usize; 4]> {
    for node in nodes {
        let out = node.layer.output_shape(shape)?;
        if let Layer::Block(b) = &node.layer {
            node_rows(&b.nodes, shape, rows)?;
            shape = out;
            continue;
        }
        let params: usize = node
            .layer
            .tensors()
            .iter()
            .filter(|(k, _)| k.learnable())
            .map(|(_, t)| t.len())
            .sum();
        let madds = match &node.layer {
            Layer::Conv(p) => p.weight.len() * out[2] * out[3],
            Layer::Depthwise(p) => p.weight.len() * out[2] * out[3],
            Layer::GDConv(p) => p.kernel.len(),
            Layer::Dense(p) => p.weight.len(),
            _ => 0,
        };
        rows.push(CostRow {
            layer: node.name.clone(),
            kind: node.layer.kind().expect("non-block layer"),
            params: params as u64,
            madds: madds as u64,
        });
        shape = out;
    }
    Ok(shape)
}

/// Report computed by enumerating materialized tensors of `nodes` applied to
/// a single `C, H, W` input.
pub fn nodes_cost<T: Scalar>(nodes: &[Node<T>], input: [usize; 3]) -> Result<CostReport> {
    let mut rows = Vec::new();
    node_rows(nodes, [1, input[0], input[1], input[2]], &mut rows)?;
    Ok(CostReport::from_rows(rows))
}

pub fn model_cost<T: Scalar>(model: &Model<T>) -> Result<CostReport> {
    let r = model.arch().input;
    nodes_cost(model.nodes(), [3, r.height, r.width])
}
