//! The training loop.

use std::fmt::Write as _;

use super::arcface::{arcface_loss, ArcFaceHead};
use super::config::{lr_at, TrainConfig};
use super::data::{gen_toy_dataset, ToyDataset, ToyParams};
use super::sgd::{weight_decay_groups, Sgd};
use crate::arch::{build_model, ArchSpec, Mode, Model};
use crate::error::{Error, Result};
use crate::pipeline::preprocess_batch;
use crate::tensor::{Rng, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LogRow {
    pub iter: usize,
    pub lr: f64,
    pub loss: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub rows: Vec<LogRow>,
}

impl TrainLog {
    /// `iter,lr,loss`
    pub fn to_csv(&self) -> String {
        let mut out = String::from("iter,lr,loss\n");
        for r in &self.rows {
            let _ = writeln!(out, "{},{},{}", r.iter, r.lr, r.loss);
        }
        out
    }

    /// Mean loss over the `window` rows ending at (and including) position `end`
    /// (1-based iteration count).
    pub fn smoothed(&self, end: usize, window: usize) -> Option<f64> {
        if end == 0 || end > self.rows.len() || window == 0 {
            return None;
        }
        let start = end.saturating_sub(window);
        let slice = &self.rows[start..end];
        Some(slice.iter().map(|r| r.loss).sum::<f64>() / slice.len() as f64)
    }
}

/// Seeded epoch-wise shuffled batches.
struct Batcher {
    order: Vec<usize>,
    pos: usize,
    rng: Rng,
}

impl Batcher {
    fn new(n: usize, seed: u64) -> Self {
        let mut b = Self {
            order: (0..n).collect(),
            pos: n,
            rng: Rng::new(seed),
        };
        b.reshuffle();
        b
    }

    fn reshuffle(&mut self) {
        self.rng.shuffle(&mut self.order);
        self.pos = 0;
    }

    fn next(&mut self, size: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(size);
        while out.len() < size {
            if self.pos == self.order.len() {
                self.reshuffle();
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

/// Runs `cfg.total_iters` SGD iterations of preprocess → forward → ArcFace →
/// backward → update. The model is left in eval mode.
pub fn train_loop(model: &mut Model, head: &mut ArcFaceHead, data: &ToyDataset, cfg: &TrainConfig) -> Result<TrainLog> {
    cfg.validate()?;
    if data.classes() != head.classes() {
        return Err(Error::InvalidArgument(format!(
            "dataset has {} classes, head has {}",
            data.classes(),
            head.classes()
        )));
    }
    if model.embedding_dim() != head.dim() {
        return Err(Error::InvalidArgument(format!(
            "model embeds into {} dims, head expects {}",
            model.embedding_dim(),
            head.dim()
        )));
    }
    let res = model.arch().input;
    model.set_mode(Mode::Train)?;
    let mut decay = weight_decay_groups(
        model,
        cfg.weight_decay_general,
        cfg.weight_decay_post_global,
        cfg.decay_global_as_post,
    );
    decay.push(cfg.weight_decay_post_global);
    let mut opt = {
        let params = model.params();
        Sgd::new(cfg.momentum, params.iter().map(|(_, t)| *t).chain([&head.weight]))
    };
    let mut batcher = Batcher::new(data.len(), cfg.seed);
    let mut log = TrainLog::default();
    for iter in 0..cfg.total_iters {
        let idx = batcher.next(cfg.batch_size);
        let imgs: Vec<_> = idx.iter().map(|&i| &data.images[i]).collect();
        let labels: Vec<usize> = idx.iter().map(|&i| data.labels[i]).collect();
        let x: Tensor = preprocess_batch(&imgs, res)?;
        let (emb, tape) = model.forward_tape(&x)?;
        let (loss, g) = arcface_loss(&emb, &labels, head)?;
        let loss = loss as f64;
        if !loss.is_finite() {
            return Err(Error::Diverged { iter, loss });
        }
        let lr = lr_at(iter, cfg);
        log.rows.push(LogRow { iter, lr, loss });
        let mut grads = model.backward(&tape, g.embeddings)?.params;
        grads.push(g.weight);
        model.update_running_stats(&tape);
        let mut params = model.params_mut();
        params.push(&mut head.weight);
        opt.step(params, &grads, lr, &decay)?;
    }
    model.set_mode(Mode::Eval)?;
    Ok(log)
}

/// Fraction of samples whose nearest class weight (by cosine) is their own label.
pub fn training_accuracy(model: &Model, head: &ArcFaceHead, data: &ToyDataset, batch: usize) -> Result<f64> {
    let res = model.arch().input;
    let mut correct = 0;
    for chunk in (0..data.len()).collect::<Vec<_>>().chunks(batch.max(1)) {
        let imgs: Vec<_> = chunk.iter().map(|&i| &data.images[i]).collect();
        let emb = model.forward(&preprocess_batch(&imgs, res)?)?;
        for (k, p) in head.predict(&emb)?.into_iter().enumerate() {
            if p == data.labels[chunk[k]] {
                correct += 1;
            }
        }
    }
    Ok(correct as f64 / data.len() as f64)
}

/// The network, dataset and ArcFace head described by `cfg`, all drawn from `cfg.seed`.
pub fn toy_setup(cfg: &TrainConfig) -> Result<(Model, ArcFaceHead, ToyDataset)> {
    cfg.validate()?;
    let arch = ArchSpec::mobilefacenet(cfg.variant, cfg.input)?
        .with_bn_linear(cfg.bn_linear)
        .with_width_divisor(cfg.width_divisor)?;
    let mut rng = Rng::new(cfg.seed);
    let model = build_model(&arch, &mut rng)?;
    let head = ArcFaceHead::new(
        cfg.identities,
        model.embedding_dim(),
        cfg.arcface_scale,
        cfg.arcface_margin,
        &mut rng,
    )?;
    let data = gen_toy_dataset(ToyParams {
        identities: cfg.identities,
        samples_per_identity: cfg.samples_per_identity,
        noise_sigma: cfg.noise_sigma,
        resolution: cfg.input,
        seed: cfg.seed.wrapping_add(1),
    })?;
    Ok((model, head, data))
}
