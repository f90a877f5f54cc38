//! Seeded synthetic identities for toy-scale training.
//!
//! Each identity is a per-channel sum of a few low-frequency plane waves
//! around mid-grey; samples add independent Gaussian pixel noise.

use std::f64::consts::TAU;

use crate::arch::Resolution;
use crate::error::{Error, Result};
use crate::pipeline::RawImage;
use crate::tensor::Rng;

const WAVES: usize = 4;
const AMPLITUDE: f64 = 28.0;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ToyParams {
    pub identities: usize,
    pub samples_per_identity: usize,
    pub noise_sigma: f64,
    pub resolution: Resolution,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ToyDataset {
    pub images: Vec<RawImage>,
    pub labels: Vec<usize>,
    pub params: ToyParams,
}

impl ToyDataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn classes(&self) -> usize {
        self.params.identities
    }
}

struct Wave {
    amp: f64,
    fy: f64,
    fx: f64,
    phase: f64,
}

fn template(rng: &mut Rng, res: Resolution) -> Vec<f64> {
    let (h, w) = (res.height, res.width);
    let mut img = vec![128.0; h * w * 3];
    for c in 0..3 {
        let waves: Vec<Wave> = (0..WAVES)
            .map(|_| Wave {
                amp: AMPLITUDE * rng.normal(),
                fy: rng.below(4) as f64,
                fx: rng.below(4) as f64,
                phase: TAU * rng.uniform(),
            })
            .collect();
        for i in 0..h {
            for j in 0..w {
                let (y, x) = (i as f64 / h as f64, j as f64 / w as f64);
                let v: f64 = waves
                    .iter()
                    .map(|wv| wv.amp * (TAU * (wv.fy * y + wv.fx * x) + wv.phase).cos())
                    .sum();
                img[(i * w + j) * 3 + c] += v;
            }
        }
    }
    img
}

pub fn gen_toy_dataset(params: ToyParams) -> Result<ToyDataset> {
    if params.identities < 2 {
        return Err(Error::InvalidArgument("toy dataset needs at least two identities".into()));
    }
    if params.samples_per_identity < 2 {
        return Err(Error::InvalidArgument("every identity needs at least two samples".into()));
    }
    if !(params.noise_sigma >= 0.0) {
        return Err(Error::InvalidArgument(format!("noise sigma {} must be ≥ 0", params.noise_sigma)));
    }
    let mut rng = Rng::new(params.seed);
    let res = params.resolution;
    let mut images = Vec::with_capacity(params.identities * params.samples_per_identity);
    let mut labels = Vec::with_capacity(images.capacity());
    for id in 0..params.identities {
        let t = template(&mut rng, res);
        for _ in 0..params.samples_per_identity {
            let data = t
                .iter()
                .map(|&v| {
                    let noisy = if params.noise_sigma > 0.0 {
                        v + params.noise_sigma * rng.normal()
                    } else {
                        v
                    };
                    noisy.round().clamp(0.0, 255.0) as u8
                })
                .collect();
            images.push(RawImage::new(res.height, res.width, data)?);
            labels.push(id);
        }
    }
    Ok(ToyDataset { images, labels, params })
}
