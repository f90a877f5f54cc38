//! Declarative MobileFaceNet architectures.
//!
//! An [`ArchSpec`] is a list of rows `(op, t, c, n, s)`: each row is a
//! sequence of `n` operators with `c` output channels, the first of which uses
//! stride `s`. Rows expand into concrete layer descriptors ([`expand`]) and
//! from there into a parameterized [`Model`].

mod build;
mod expand;
mod model;

use std::fmt;
use std::str::FromStr;

pub use build::{build_head_variant, build_mobilefacenet, build_model, expand_bottleneck, materialize};
pub use expand::{row_shapes, shape_propagate, DescNode, LayerDesc, LayerKind};
pub use model::{Backward, Block, Layer, Mode, Model, Node, ParamInfo, ParamKind, Saved, Tape};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Resolution {
    pub height: usize,
    pub width: usize,
}

impl Resolution {
    pub const R112X112: Resolution = Resolution::new(112, 112);
    pub const R112X96: Resolution = Resolution::new(112, 96);
    pub const R96X96: Resolution = Resolution::new(96, 96);
    pub const SUPPORTED: [Resolution; 3] = [Self::R112X112, Self::R112X96, Self::R96X96];

    pub const fn new(height: usize, width: usize) -> Self {
        Self { height, width }
    }
}

impl fmt::Display for Resolution {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}", self.height, self.width)
    }
}

impl FromStr for Resolution {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (h, w) = s
            .split_once(['x', 'X'])
            .ok_or_else(|| Error::Parse(format!("resolution must look like HxW, got {s:?}")))?;
        let parse = |v: &str| {
            v.trim()
                .parse::<usize>()
                .ok()
                .filter(|&v| v > 0)
                .ok_or_else(|| Error::Parse(format!("bad resolution {s:?}")))
        };
        Ok(Self::new(parse(h)?, parse(w)?))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Variant {
    Primary,
    /// Drops the final linear 1×1 conv (512-d embedding).
    M,
    /// Also drops the 1×1 conv before GDConv (128-d embedding).
    S,
    /// PReLU replaced by ReLU.
    Relu,
    /// Every bottleneck expansion factor doubled.
    Expand2,
}

impl Variant {
    pub const ALL: [Variant; 5] = [Variant::Primary, Variant::M, Variant::S, Variant::Relu, Variant::Expand2];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Primary => "primary",
            Variant::M => "m",
            Variant::S => "s",
            Variant::Relu => "relu",
            Variant::Expand2 => "expand2",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.as_str().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| Error::Parse(format!("unknown variant {s:?} (primary|m|s|relu|expand2)")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Nonlinearity {
    PRelu,
    Relu,
}

impl fmt::Display for Nonlinearity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Nonlinearity::PRelu => "prelu",
            Nonlinearity::Relu => "relu",
        })
    }
}

impl FromStr for Nonlinearity {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "prelu" => Ok(Nonlinearity::PRelu),
            "relu" => Ok(Nonlinearity::Relu),
            _ => Err(Error::Parse(format!("unknown nonlinearity {s:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum RowOp {
    Conv3x3,
    DwConv3x3,
    Bottleneck,
    Conv1x1,
    /// Linear global depthwise conv; kernel equals the incoming spatial size.
    GDConv,
    LinearConv1x1,
    /// Global average pooling head (for head comparisons).
    GAPool,
    /// Flatten + fully connected head (for head comparisons).
    Fc,
}

impl RowOp {
    const NAMES: [(RowOp, &'static str); 8] = [
        (RowOp::Conv3x3, "conv3x3"),
        (RowOp::DwConv3x3, "dwconv3x3"),
        (RowOp::Bottleneck, "bottleneck"),
        (RowOp::Conv1x1, "conv1x1"),
        (RowOp::GDConv, "gdconv"),
        (RowOp::LinearConv1x1, "linear_conv1x1"),
        (RowOp::GAPool, "gapool"),
        (RowOp::Fc, "fc"),
    ];

    pub fn as_str(self) -> &'static str {
        Self::NAMES.iter().find(|(op, _)| *op == self).map(|(_, n)| *n).unwrap()
    }

    pub fn is_global(self) -> bool {
        matches!(self, RowOp::GDConv | RowOp::GAPool | RowOp::Fc)
    }
}

impl FromStr for RowOp {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::NAMES
            .iter()
            .find(|(_, n)| *n == s.trim())
            .map(|(op, _)| *op)
            .ok_or_else(|| Error::Parse(format!("unknown row operator {s:?}")))
    }
}

/// Global operator at the end of the convolutional trunk.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Head {
    GDConv,
    GAPool,
    Fc,
}

/// One line of the architecture table.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Row {
    pub op: RowOp,
    /// Expansion factor, bottleneck rows only.
    pub t: Option<usize>,
    pub c: usize,
    pub n: usize,
    pub s: usize,
}

impl Row {
    pub const fn new(op: RowOp, c: usize, n: usize, s: usize) -> Self {
        Self { op, t: None, c, n, s }
    }

    pub const fn bottleneck(t: usize, c: usize, n: usize, s: usize) -> Self {
        Self {
            op: RowOp::Bottleneck,
            t: Some(t),
            c,
            n,
            s,
        }
    }
}

/// `t, c, n, s` of a bottleneck sequence. `t` multiplies the input channels.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct BottleneckSpec {
    pub t: usize,
    pub c: usize,
    pub n: usize,
    pub s: usize,
}

impl BottleneckSpec {
    pub fn validate(&self) -> Result<()> {
        if self.t == 0 || self.c == 0 || self.n == 0 || !(1..=2).contains(&self.s) {
            return Err(Error::InvalidArgument(format!(
                "bottleneck needs t ≥ 1, c ≥ 1, n ≥ 1 and s ∈ {{1, 2}}, got {self:?}"
            )));
        }
        Ok(())
    }
}

/// The primary network, one entry per table row.
pub const PRIMARY_ROWS: [Row; 10] = [
    Row::new(RowOp::Conv3x3, 64, 1, 2),
    Row::new(RowOp::DwConv3x3, 64, 1, 1),
    Row::bottleneck(2, 64, 5, 2),
    Row::bottleneck(4, 128, 1, 2),
    Row::bottleneck(2, 128, 6, 1),
    Row::bottleneck(4, 128, 1, 2),
    Row::bottleneck(2, 128, 2, 1),
    Row::new(RowOp::Conv1x1, 512, 1, 1),
    Row::new(RowOp::GDConv, 512, 1, 1),
    Row::new(RowOp::LinearConv1x1, 128, 1, 1),
];

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct ArchSpec {
    pub input: Resolution,
    pub variant: Variant,
    pub nonlinearity: Nonlinearity,
    /// Whether the linear GDConv and linear 1×1 output layers carry batch norm.
    pub bn_linear: bool,
    pub rows: Vec<Row>,
}

impl ArchSpec {
    /// A MobileFaceNet variant at one of the supported input resolutions.
    pub fn mobilefacenet(variant: Variant, input: Resolution) -> Result<Self> {
        if !Resolution::SUPPORTED.contains(&input) {
            return Err(Error::InvalidArgument(format!(
                "unsupported input resolution {input} (112x112, 112x96 or 96x96)"
            )));
        }
        let mut rows = PRIMARY_ROWS.to_vec();
        let mut nonlinearity = Nonlinearity::PRelu;
        match variant {
            Variant::Primary => {}
            Variant::M => {
                rows.pop();
            }
            Variant::S => {
                rows.pop();
                rows.retain(|r| r.op != RowOp::Conv1x1);
                let trunk_c = rows[rows.len() - 2].c;
                rows.last_mut().unwrap().c = trunk_c;
            }
            Variant::Relu => nonlinearity = Nonlinearity::Relu,
            Variant::Expand2 => {
                for r in &mut rows {
                    if let Some(t) = r.t.as_mut() {
                        *t *= 2;
                    }
                }
            }
        }
        Ok(Self {
            input,
            variant,
            nonlinearity,
            bn_linear: true,
            rows,
        })
    }

    pub fn with_bn_linear(mut self, bn_linear: bool) -> Self {
        self.bn_linear = bn_linear;
        self
    }

    /// Divides every row's channel count by `divisor` ("width multiplier 1/divisor").
    pub fn with_width_divisor(mut self, divisor: usize) -> Result<Self> {
        if divisor == 0 {
            return Err(Error::InvalidArgument("width divisor must be positive".into()));
        }
        for r in &mut self.rows {
            if r.c % divisor != 0 {
                return Err(Error::InvalidArgument(format!(
                    "channel count {} of {} row is not divisible by {divisor}",
                    r.c,
                    r.op.as_str()
                )));
            }
            r.c /= divisor;
        }
        Ok(self)
    }

    /// The global operator, if the rows contain one.
    pub fn head(&self) -> Option<Head> {
        self.rows.iter().find_map(|r| match r.op {
            RowOp::GDConv => Some(Head::GDConv),
            RowOp::GAPool => Some(Head::GAPool),
            RowOp::Fc => Some(Head::Fc),
            _ => None,
        })
    }

    pub fn embedding_dim(&self) -> Result<usize> {
        let shapes = row_shapes(self)?;
        Ok(shapes.last().map(|s| s[0]).unwrap_or(0))
    }

    /// Text form: header lines `key=value` followed by one `op,t,c,n,s` line per row.
    pub fn to_descriptor(&self) -> String {
        let mut out = format!(
            "input={}\nvariant={}\nnonlinearity={}\nbn_linear={}\n",
            self.input, self.variant, self.nonlinearity, self.bn_linear as u8
        );
        for r in &self.rows {
            let t = r.t.map_or_else(|| "-".to_string(), |t| t.to_string());
            out.push_str(&format!("{},{},{},{},{}\n", r.op.as_str(), t, r.c, r.n, r.s));
        }
        out
    }

    pub fn from_descriptor(text: &str) -> Result<Self> {
        let mut input = None;
        let mut variant = None;
        let mut nonlinearity = None;
        let mut bn_linear = true;
        let mut rows = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let err = |msg: String| Error::Parse(format!("descriptor line {}: {msg}", lineno + 1));
            if let Some((key, value)) = line.split_once('=') {
                match key.trim() {
                    "input" => input = Some(value.parse::<Resolution>()?),
                    "variant" => variant = Some(value.parse::<Variant>()?),
                    "nonlinearity" => nonlinearity = Some(value.parse::<Nonlinearity>()?),
                    "bn_linear" => {
                        bn_linear = match value.trim() {
                            "1" | "true" => true,
                            "0" | "false" => false,
                            v => return Err(err(format!("bn_linear must be 0 or 1, got {v:?}"))),
                        }
                    }
                    k => return Err(err(format!("unknown header {k:?}"))),
                }
                continue;
            }
            let fields: Vec<&str> = line.split(',').map(str::trim).collect();
            if fields.len() != 5 {
                return Err(err(format!("expected op,t,c,n,s, got {line:?}")));
            }
            let op: RowOp = fields[0].parse()?;
            let num = |v: &str, what: &str| {
                v.parse::<usize>()
                    .map_err(|_| err(format!("{what} must be a non-negative integer, got {v:?}")))
            };
            let t = match fields[1] {
                "-" => None,
                v => Some(num(v, "t")?),
            };
            if (op == RowOp::Bottleneck) != t.is_some() {
                return Err(err("t is required for bottleneck rows and absent otherwise".into()));
            }
            rows.push(Row {
                op,
                t,
                c: num(fields[2], "c")?,
                n: num(fields[3], "n")?,
                s: num(fields[4], "s")?,
            });
        }
        let missing = |k: &str| Error::Parse(format!("descriptor is missing `{k}=`"));
        let spec = Self {
            input: input.ok_or_else(|| missing("input"))?,
            variant: variant.ok_or_else(|| missing("variant"))?,
            nonlinearity: nonlinearity.ok_or_else(|| missing("nonlinearity"))?,
            bn_linear,
            rows,
        };
        expand::expand(&spec)?;
        Ok(spec)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn descriptor_round_trip() {
        for v in Variant::ALL {
            for r in Resolution::SUPPORTED {
                let a = ArchSpec::mobilefacenet(v, r).unwrap();
                let text = a.to_descriptor();
                assert_eq!(ArchSpec::from_descriptor(&text).unwrap(), a);
            }
        }
    }

    #[test]
    fn descriptor_text_shape() {
        let a = ArchSpec::mobilefacenet(Variant::Primary, Resolution::R112X112).unwrap();
        let text = a.to_descriptor();
        assert!(text.starts_with("input=112x112\nvariant=primary\nnonlinearity=prelu\n"));
        assert!(text.contains("\nbottleneck,2,64,5,2\n"));
        assert!(text.ends_with("gdconv,-,512,1,1\nlinear_conv1x1,-,128,1,1\n"));
    }

    #[test]
    fn variant_rows() {
        let s = ArchSpec::mobilefacenet(Variant::S, Resolution::R112X112).unwrap();
        assert_eq!(s.rows.len(), 8);
        assert_eq!(s.rows.last().unwrap(), &Row::new(RowOp::GDConv, 128, 1, 1));
        let e = ArchSpec::mobilefacenet(Variant::Expand2, Resolution::R112X112).unwrap();
        let ts: Vec<usize> = e.rows.iter().filter_map(|r| r.t).collect();
        assert_eq!(ts, vec![4, 8, 4, 8, 4]);
        assert!(ArchSpec::mobilefacenet(Variant::Primary, Resolution::new(128, 128)).is_err());
        assert!("wide".parse::<Variant>().is_err());
    }

    #[test]
    fn bad_descriptor_lines() {
        let base = "input=112x112\nvariant=primary\nnonlinearity=prelu\n";
        assert!(ArchSpec::from_descriptor(&format!("{base}bottleneck,-,64,1,1\n")).is_err());
        assert!(ArchSpec::from_descriptor(&format!("{base}conv3x3,-,64,1\n")).is_err());
        assert!(ArchSpec::from_descriptor(&format!("{base}warp,-,64,1,1\n")).is_err());
        assert!(ArchSpec::from_descriptor("variant=primary\n").is_err());
    }
}
