//! Central finite-difference checks of the analytic gradients.
//!
//! Relative error is `|a − n| / max(|a|, |n|, floor)`. Op checks use
//! [`FD_STEP`] and [`REL_FLOOR`]; whole-model checks default to the larger
//! [`MODEL_FD_STEP`] and [`MODEL_REL_FLOOR`], since a loss of order 10 puts
//! roughly 1e-9 of rounding noise into each difference. Perturbations that
//! flip the sign of any nonlinearity input cross a PReLU/ReLU kink, where the
//! central difference is not an estimate of the derivative; such samples are
//! skipped, counted and replaced.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use super::arcface::{arcface_loss, ArcFaceHead};
use crate::arch::{build_model, ArchSpec, Mode, Model, Resolution, Variant};
use crate::error::{Error, Result};
use crate::ops::{
    self, BatchNormParams, BnMode, ConvParams, DenseParams, DepthwiseConvParams, GDConvParams, Op, PReLUParams,
};
use crate::tensor::{Rng, Tensor};

pub const FD_STEP: f64 = 1e-5;
pub const REL_FLOOR: f64 = 1e-6;
pub const MODEL_FD_STEP: f64 = 1e-4;
pub const MODEL_REL_FLOOR: f64 = 1e-5;

pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

#[derive(Clone, Debug, PartialEq)]
pub struct OpCheck {
    pub op: &'static str,
    pub instances: usize,
    pub entries: usize,
    pub max_rel_error: f64,
}

fn dot(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

/// Checks the input and parameter gradients of `forward` against `analytic`
/// for the scalar loss `Σ r ⊙ forward(x, params)`.
fn check_entries(
    x: &Tensor<f64>,
    params: &[Tensor<f64>],
    r: &Tensor<f64>,
    forward: &dyn Fn(&Tensor<f64>, &[Tensor<f64>]) -> Result<Tensor<f64>>,
    analytic_input: &Tensor<f64>,
    analytic_params: &[Tensor<f64>],
) -> Result<(usize, f64)> {
    let loss = |x: &Tensor<f64>, p: &[Tensor<f64>]| -> Result<f64> { Ok(dot(r, &forward(x, p)?)) };
    let mut worst: f64 = 0.0;
    let mut entries = 0;
    for i in 0..x.len() {
        let (mut xp, mut xm) = (x.clone(), x.clone());
        xp.data_mut()[i] += FD_STEP;
        xm.data_mut()[i] -= FD_STEP;
        let num = (loss(&xp, params)? - loss(&xm, params)?) / (2.0 * FD_STEP);
        worst = worst.max(rel_error(analytic_input.data()[i], num));
        entries += 1;
    }
    for (t, grad) in analytic_params.iter().enumerate() {
        for i in 0..params[t].len() {
            let (mut pp, mut pm) = (params.to_vec(), params.to_vec());
            pp[t].data_mut()[i] += FD_STEP;
            pm[t].data_mut()[i] -= FD_STEP;
            let num = (loss(x, &pp)? - loss(x, &pm)?) / (2.0 * FD_STEP);
            worst = worst.max(rel_error(grad.data()[i], num));
            entries += 1;
        }
    }
    Ok((entries, worst))
}

fn normal(shape: &[usize], rng: &mut Rng) -> Result<Tensor<f64>> {
    Tensor::rand_normal(shape, 0.0, 1.0, rng)
}

/// Keeps every entry at least `gap` away from zero so ±FD_STEP never crosses a kink.
fn away_from_zero(mut t: Tensor<f64>, gap: f64) -> Tensor<f64> {
    for v in t.data_mut() {
        if v.abs() < gap {
            *v = if *v < 0.0 { -gap } else { gap };
        }
    }
    t
}

/// Finite-difference check of every op kind on `instances` random small shapes.
pub fn check_ops(instances: usize, rng: &mut Rng) -> Result<Vec<OpCheck>> {
    type Case = Box<dyn Fn(&mut Rng) -> Result<(usize, f64)>>;
    let cases: Vec<(&'static str, Case)> = vec![
        (
            "conv",
            Box::new(|rng: &mut Rng| {
                let (ci, co) = (1 + rng.below(3), 1 + rng.below(3));
                let k = 1 + rng.below(3);
                let s = 1 + rng.below(2);
                let p = rng.below(k.min(2));
                let (h, w) = (k + rng.below(4), k + rng.below(4));
                let x = normal(&[2, ci, h, w], rng)?;
                let params = vec![normal(&[co, ci, k, k], rng)?, normal(&[co], rng)?];
                let make = move |p_: &[Tensor<f64>]| ConvParams {
                    weight: p_[0].clone(),
                    bias: Some(p_[1].clone()),
                    stride: (s, s),
                    padding: (p, p),
                };
                let fwd = move |x: &Tensor<f64>, p_: &[Tensor<f64>]| ops::conv2d_forward(x, &make(p_));
                let y = fwd(&x, &params)?;
                let r = normal(y.shape(), rng)?;
                let g = ops::op_backward(Op::Conv(&make(&params)), &x, &r)?;
                check_entries(&x, &params, &r, &fwd, &g.input, &g.params)
            }),
        ),
        (
            "depthwise",
            Box::new(|rng: &mut Rng| {
                let c = 1 + rng.below(3);
                let s = 1 + rng.below(2);
                let (h, w) = (3 + rng.below(4), 3 + rng.below(4));
                let x = normal(&[2, c, h, w], rng)?;
                let params = vec![normal(&[c, 1, 3, 3], rng)?];
                let make = move |p_: &[Tensor<f64>]| DepthwiseConvParams {
                    weight: p_[0].clone(),
                    bias: None,
                    stride: (s, s),
                    padding: (1, 1),
                };
                let fwd = move |x: &Tensor<f64>, p_: &[Tensor<f64>]| ops::depthwise_conv2d_forward(x, &make(p_));
                let y = fwd(&x, &params)?;
                let r = normal(y.shape(), rng)?;
                let g = ops::op_backward(Op::Depthwise(&make(&params)), &x, &r)?;
                check_entries(&x, &params, &r, &fwd, &g.input, &g.params)
            }),
        ),
        (
            "gdconv",
            Box::new(|rng: &mut Rng| {
                let c = 1 + rng.below(4);
                let (h, w) = (1 + rng.below(5), 1 + rng.below(5));
                let x = normal(&[2, c, h, w], rng)?;
                let params = vec![normal(&[c, 1, h, w], rng)?];
                let make = |p_: &[Tensor<f64>]| GDConvParams {
                    kernel: p_[0].clone(),
                    bias: None,
                };
                let fwd = move |x: &Tensor<f64>, p_: &[Tensor<f64>]| ops::gdconv_forward(x, &make(p_));
                let y = fwd(&x, &params)?;
                let r = normal(y.shape(), rng)?;
                let g = ops::op_backward(Op::GDConv(&make(&params)), &x, &r)?;
                check_entries(&x, &params, &r, &fwd, &g.input, &g.params)
            }),
        ),
        (
            "batchnorm",
            Box::new(|rng: &mut Rng| {
                let c = 1 + rng.below(3);
                let x = normal(&[3, c, 1 + rng.below(3), 1 + rng.below(3)], rng)?;
                let params = vec![normal(&[c], rng)?, normal(&[c], rng)?];
                let make = |p_: &[Tensor<f64>]| -> Result<BatchNormParams<f64>> {
                    let mut bn = BatchNormParams::identity(c)?;
                    bn.gamma = p_[0].clone();
                    bn.beta = p_[1].clone();
                    Ok(bn)
                };
                let fwd = move |x: &Tensor<f64>, p_: &[Tensor<f64>]| {
                    Ok(ops::batchnorm_forward_cached(x, &make(p_)?, BnMode::Train)?.0)
                };
                let bn = make(&params)?;
                let (y, cache) = ops::batchnorm_forward_cached(&x, &bn, BnMode::Train)?;
                let r = normal(y.shape(), rng)?;
                let g = ops::op_backward(Op::BatchNorm(&bn, &cache), &x, &r)?;
                check_entries(&x, &params, &r, &fwd, &g.input, &g.params)
            }),
        ),
        (
            "prelu",
            Box::new(|rng: &mut Rng| {
                let c = 1 + rng.below(3);
                let x = away_from_zero(normal(&[2, c, 3, 2], rng)?, 1e-3);
                let params = vec![normal(&[c], rng)?];
                let make = |p_: &[Tensor<f64>]| PReLUParams { slope: p_[0].clone() };
                let fwd = move |x: &Tensor<f64>, p_: &[Tensor<f64>]| ops::prelu_forward(x, &make(p_));
                let r = normal(x.shape(), rng)?;
                let g = ops::op_backward(Op::PRelu(&make(&params)), &x, &r)?;
                check_entries(&x, &params, &r, &fwd, &g.input, &g.params)
            }),
        ),
        (
            "relu",
            Box::new(|rng: &mut Rng| {
                let x = away_from_zero(normal(&[2, 2, 3, 3], rng)?, 1e-3);
                let fwd = |x: &Tensor<f64>, _: &[Tensor<f64>]| Ok(ops::relu_forward(x));
                let r = normal(x.shape(), rng)?;
                let g = ops::op_backward(Op::Relu, &x, &r)?;
                check_entries(&x, &[], &r, &fwd, &g.input, &g.params)
            }),
        ),
        (
            "dense",
            Box::new(|rng: &mut Rng| {
                let (c, h, w) = (1 + rng.below(3), 1 + rng.below(3), 1 + rng.below(3));
                let out = 1 + rng.below(4);
                let x = normal(&[2, c, h, w], rng)?;
                let params = vec![normal(&[out, c * h * w], rng)?, normal(&[out], rng)?];
                let make = |p_: &[Tensor<f64>]| DenseParams {
                    weight: p_[0].clone(),
                    bias: Some(p_[1].clone()),
                };
                let fwd = move |x: &Tensor<f64>, p_: &[Tensor<f64>]| ops::dense_forward(x, &make(p_));
                let y = fwd(&x, &params)?;
                let r = normal(y.shape(), rng)?;
                let g = ops::op_backward(Op::Dense(&make(&params)), &x, &r)?;
                check_entries(&x, &params, &r, &fwd, &g.input, &g.params)
            }),
        ),
        (
            "gapool",
            Box::new(|rng: &mut Rng| {
                let x = normal(&[2, 1 + rng.below(3), 1 + rng.below(4), 1 + rng.below(4)], rng)?;
                let fwd = |x: &Tensor<f64>, _: &[Tensor<f64>]| ops::global_avg_pool_forward(x);
                let y = fwd(&x, &[])?;
                let r = normal(y.shape(), rng)?;
                let g = ops::op_backward(Op::GlobalAvgPool, &x, &r)?;
                check_entries(&x, &[], &r, &fwd, &g.input, &g.params)
            }),
        ),
    ];
    let mut out = Vec::with_capacity(cases.len());
    for (op, case) in cases {
        let mut check = OpCheck {
            op,
            instances,
            entries: 0,
            max_rel_error: 0.0,
        };
        for _ in 0..instances {
            let (n, e) = case(rng)?;
            check.entries += n;
            check.max_rel_error = check.max_rel_error.max(e);
        }
        out.push(check);
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamCheck {
    pub name: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub tolerance: f64,
    pub checks: Vec<ParamCheck>,
    /// Samples dropped because the perturbation crossed a nonlinearity kink.
    pub kink_skips: usize,
    /// Distinct layer kinds among the checked parameters (`arcface` for the head).
    pub layer_kinds: BTreeSet<String>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.checks.iter().map(|c| c.rel_error).fold(0.0, f64::max)
    }

    pub fn worst(&self) -> Option<&ParamCheck> {
        self.checks.iter().max_by(|a, b| a.rel_error.total_cmp(&b.rel_error))
    }

    pub fn is_finite(&self) -> bool {
        self.checks
            .iter()
            .all(|c| c.analytic.is_finite() && c.numeric.is_finite() && c.rel_error.is_finite())
    }

    pub fn passed(&self) -> bool {
        self.is_finite() && self.max_rel_error() < self.tolerance
    }

    pub fn summary(&self) -> String {
        let mut out = String::new();
        let _ = write!(
            out,
            "checked {} parameters over {} ({} kink skips), max rel error {:.3e}",
            self.checks.len(),
            self.layer_kinds.iter().cloned().collect::<Vec<_>>().join("/"),
            self.kink_skips,
            self.max_rel_error()
        );
        if let Some(w) = self.worst() {
            let _ = write!(out, " at {}[{}]", w.name, w.index);
        }
        out
    }
}

/// Loss and nonlinearity sign pattern of a train-mode forward pass.
fn loss_and_signs(model: &Model<f64>, head: &ArcFaceHead<f64>, x: &Tensor<f64>, labels: &[usize]) -> Result<(f64, Vec<bool>)> {
    let (emb, tape) = model.forward_tape(x)?;
    let (loss, _) = arcface_loss(&emb, labels, head)?;
    Ok((loss, tape.activation_signs()))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheckOptions {
    pub tolerance: f64,
    /// Number of parameter entries to check.
    pub samples: usize,
    /// Central-difference step.
    pub step: f64,
    /// Lower bound of the relative-error denominator.
    pub floor: f64,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            tolerance: 1e-4,
            samples: 200,
            step: MODEL_FD_STEP,
            floor: MODEL_REL_FLOOR,
            seed: 0,
        }
    }
}

/// Compares analytic and finite-difference gradients of the ArcFace loss for
/// `opts.samples` parameters. Every learnable tensor contributes at least one
/// sample when the budget allows it; the rest are drawn uniformly.
pub fn grad_check_model(
    model: &Model<f64>,
    head: &ArcFaceHead<f64>,
    batch: &Tensor<f64>,
    labels: &[usize],
    opts: &GradCheckOptions,
) -> Result<GradCheckReport> {
    let GradCheckOptions {
        tolerance,
        samples,
        step,
        floor,
        ..
    } = *opts;
    let rng = &mut Rng::new(opts.seed);
    let mut model = model.clone();
    if model.mode() != Mode::Folded {
        model.set_mode(Mode::Train)?;
    }
    let mut head = head.clone();
    let (emb, tape) = model.forward_tape(batch)?;
    let (_, g) = arcface_loss(&emb, labels, &head)?;
    let base_signs = tape.activation_signs();
    let mut analytic = model.backward(&tape, g.embeddings)?.params;
    analytic.push(g.weight);
    let mut infos: Vec<(String, String)> = model
        .params()
        .iter()
        .map(|(i, _)| (i.name.clone(), i.layer.to_string()))
        .collect();
    infos.push(("arcface.weight".into(), "arcface".into()));
    let sizes: Vec<usize> = analytic.iter().map(Tensor::len).collect();

    let mut queue: Vec<usize> = (0..sizes.len()).collect();
    rng.shuffle(&mut queue);
    queue.truncate(samples);
    while queue.len() < samples {
        queue.push(rng.below(sizes.len()));
    }
    let mut report = GradCheckReport {
        tolerance,
        checks: Vec::with_capacity(samples),
        kink_skips: 0,
        layer_kinds: BTreeSet::new(),
    };
    let max_skips = samples * 4 + 16;
    let mut q = 0;
    while q < queue.len() {
        let t = queue[q];
        let i = rng.below(sizes[t]);
        let eval = |model: &mut Model<f64>, head: &mut ArcFaceHead<f64>, delta: f64| -> Result<(f64, Vec<bool>)> {
            let target = if t < sizes.len() - 1 {
                model.params_mut().swap_remove(t)
            } else {
                &mut head.weight
            };
            let orig = target.data()[i];
            target.data_mut()[i] = orig + delta;
            let out = loss_and_signs(model, head, batch, labels);
            let target = if t < sizes.len() - 1 {
                model.params_mut().swap_remove(t)
            } else {
                &mut head.weight
            };
            target.data_mut()[i] = orig;
            out
        };
        let (lp, sp) = eval(&mut model, &mut head, step)?;
        let (lm, sm) = eval(&mut model, &mut head, -step)?;
        if sp != base_signs || sm != base_signs {
            report.kink_skips += 1;
            if report.kink_skips > max_skips {
                return Err(Error::Numeric("too many samples cross nonlinearity kinks".into()));
            }
            queue[q] = rng.below(sizes.len());
            continue;
        }
        let numeric = (lp - lm) / (2.0 * step);
        let a = analytic[t].data()[i];
        report.layer_kinds.insert(infos[t].1.clone());
        report.checks.push(ParamCheck {
            name: infos[t].0.clone(),
            index: i,
            analytic: a,
            numeric,
            rel_error: (a - numeric).abs() / a.abs().max(numeric.abs()).max(floor),
        });
        q += 1;
    }
    Ok(report)
}

/// A 64-bit primary network at 96×96 with widths divided by `width_divisor`,
/// an ArcFace head over `batch` classes and a standard-normal batch labelled
/// `0..batch`.
pub fn check_setup(
    width_divisor: usize,
    batch: usize,
    seed: u64,
) -> Result<(Model<f64>, ArcFaceHead<f64>, Tensor<f64>, Vec<usize>)> {
    let arch = ArchSpec::mobilefacenet(Variant::Primary, Resolution::R96X96)?.with_width_divisor(width_divisor)?;
    let mut rng = Rng::new(seed);
    let model: Model<f64> = build_model(&arch, &mut rng)?;
    let head = ArcFaceHead::new(batch.max(2), model.embedding_dim(), 64.0, 0.5, &mut rng)?;
    let x = Tensor::rand_normal(&[batch, 3, 96, 96], 0.0, 1.0, &mut rng)?;
    Ok((model, head, x, (0..batch).collect()))
}
