//! Training configuration and the step learning-rate schedule.

use std::fmt::Write as _;

use crate::arch::{Resolution, Variant};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub momentum: f64,
    pub base_lr: f64,
    /// The learning rate is divided by 10 at each of these iterations.
    pub lr_drop_iters: Vec<usize>,
    pub total_iters: usize,
    pub weight_decay_general: f64,
    /// Applied to every layer positioned after the global operator and to the ArcFace head.
    pub weight_decay_post_global: f64,
    /// Also give the global operator itself the post-global decay.
    pub decay_global_as_post: bool,
    pub seed: u64,
    pub arcface_scale: f64,
    pub arcface_margin: f64,
    pub variant: Variant,
    pub input: Resolution,
    pub width_divisor: usize,
    pub bn_linear: bool,
    pub identities: usize,
    pub samples_per_identity: usize,
    pub noise_sigma: f64,
}

impl Default for TrainConfig {
    /// Full-scale settings.
    fn default() -> Self {
        Self {
            batch_size: 512,
            momentum: 0.9,
            base_lr: 0.1,
            lr_drop_iters: vec![36_000, 52_000, 58_000],
            total_iters: 60_000,
            weight_decay_general: 4e-5,
            weight_decay_post_global: 4e-4,
            decay_global_as_post: false,
            seed: 0,
            arcface_scale: 64.0,
            arcface_margin: 0.5,
            variant: Variant::Primary,
            input: Resolution::R112X112,
            width_divisor: 1,
            bn_linear: true,
            identities: 50,
            samples_per_identity: 20,
            noise_sigma: 12.0,
        }
    }
}

impl TrainConfig {
    /// Desk-scale preset: the primary network at 96×96 with widths quartered,
    /// 50 synthetic identities and a 2000-iteration schedule whose drops sit at
    /// the same fractions of training as the full schedule.
    pub fn desk() -> Self {
        let total = 2000;
        let full = Self::default();
        Self {
            batch_size: 8,
            lr_drop_iters: scale_drops(&full.lr_drop_iters, full.total_iters, total),
            total_iters: total,
            input: Resolution::R96X96,
            width_divisor: 4,
            ..full
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(format!("train config: {m}")));
        if self.batch_size == 0 || self.total_iters == 0 {
            return bad("batch_size and total_iters must be positive".into());
        }
        if !self.lr_drop_iters.windows(2).all(|w| w[0] < w[1]) {
            return bad("lr_drop_iters must be strictly increasing".into());
        }
        if self.lr_drop_iters.last().is_some_and(|&l| l >= self.total_iters) {
            return bad("lr_drop_iters must lie below total_iters".into());
        }
        if self.base_lr < 0.0 || self.momentum < 0.0 || self.weight_decay_general < 0.0 || self.weight_decay_post_global < 0.0 {
            return bad("rates must be non-negative".into());
        }
        if self.identities < 2 || self.samples_per_identity < 2 {
            return bad("need at least 2 identities with 2 samples each".into());
        }
        Ok(())
    }

    /// Parses `key = value` lines (`#` starts a comment). A `preset = paper|desk`
    /// line selects the starting point; the other keys override it.
    pub fn parse(text: &str) -> Result<Self> {
        let mut pairs = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Parse(format!("config line {}: expected key=value", lineno + 1)))?;
            pairs.push((lineno + 1, k.trim().to_string(), v.trim().to_string()));
        }
        let mut cfg = match pairs.iter().find(|(_, k, _)| k == "preset").map(|(_, _, v)| v.as_str()) {
            None | Some("paper") => Self::default(),
            Some("desk") => Self::desk(),
            Some(p) => return Err(Error::Parse(format!("unknown preset {p:?} (paper|desk)"))),
        };
        for (lineno, k, v) in &pairs {
            cfg.set(k, v).map_err(|e| Error::Parse(format!("config line {lineno}: {e}")))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse().map_err(|_| Error::Parse(format!("{key}: cannot parse {v:?}")))
        }
        fn flag(key: &str, v: &str) -> Result<bool> {
            match v {
                "1" | "true" => Ok(true),
                "0" | "false" => Ok(false),
                _ => Err(Error::Parse(format!("{key}: expected 0/1, got {v:?}"))),
            }
        }
        match key {
            "preset" => {}
            "batch_size" => self.batch_size = num(key, value)?,
            "momentum" => self.momentum = num(key, value)?,
            "base_lr" => self.base_lr = num(key, value)?,
            "lr_drop_iters" => {
                self.lr_drop_iters = value
                    .split(',')
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .map(|s| num(key, s))
                    .collect::<Result<_>>()?
            }
            "total_iters" => self.total_iters = num(key, value)?,
            "weight_decay_general" => self.weight_decay_general = num(key, value)?,
            "weight_decay_post_global" => self.weight_decay_post_global = num(key, value)?,
            "decay_global_as_post" => self.decay_global_as_post = flag(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "arcface_scale" => self.arcface_scale = num(key, value)?,
            "arcface_margin" => self.arcface_margin = num(key, value)?,
            "variant" => self.variant = value.parse()?,
            "input" => self.input = value.parse()?,
            "width_divisor" => self.width_divisor = num(key, value)?,
            "bn_linear" => self.bn_linear = flag(key, value)?,
            "identities" => self.identities = num(key, value)?,
            "samples_per_identity" => self.samples_per_identity = num(key, value)?,
            "noise_sigma" => self.noise_sigma = num(key, value)?,
            _ => return Err(Error::Parse(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let drops: Vec<String> = self.lr_drop_iters.iter().map(|d| d.to_string()).collect();
        let mut out = String::new();
        let _ = writeln!(out, "batch_size = {}", self.batch_size);
        let _ = writeln!(out, "momentum = {}", self.momentum);
        let _ = writeln!(out, "base_lr = {}", self.base_lr);
        let _ = writeln!(out, "lr_drop_iters = {}", drops.join(","));
        let _ = writeln!(out, "total_iters = {}", self.total_iters);
        let _ = writeln!(out, "weight_decay_general = {}", self.weight_decay_general);
        let _ = writeln!(out, "weight_decay_post_global = {}", self.weight_decay_post_global);
        let _ = writeln!(out, "decay_global_as_post = {}", self.decay_global_as_post as u8);
        let _ = writeln!(out, "seed = {}", self.seed);
        let _ = writeln!(out, "arcface_scale = {}", self.arcface_scale);
        let _ = writeln!(out, "arcface_margin = {}", self.arcface_margin);
        let _ = writeln!(out, "variant = {}", self.variant);
        let _ = writeln!(out, "input = {}", self.input);
        let _ = writeln!(out, "width_divisor = {}", self.width_divisor);
        let _ = writeln!(out, "bn_linear = {}", self.bn_linear as u8);
        let _ = writeln!(out, "identities = {}", self.identities);
        let _ = writeln!(out, "samples_per_identity = {}", self.samples_per_identity);
        let _ = writeln!(out, "noise_sigma = {}", self.noise_sigma);
        out
    }
}

/// Maps drop points of a `from`-iteration schedule onto `to` iterations, keeping their fractions.
pub fn scale_drops(drops: &[usize], from: usize, to: usize) -> Vec<usize> {
    drops.iter().map(|&d| d * to / from).collect()
}

/// Step schedule: `base_lr / 10^k` where `k` counts the drops at or before `iter`.
pub fn lr_at(iter: usize, cfg: &TrainConfig) -> f64 {
    let k = cfg.lr_drop_iters.iter().filter(|&&d| iter >= d).count();
    cfg.base_lr / 10f64.powi(k as i32)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_schedule() {
        let cfg = TrainConfig::default();
        assert_eq!(lr_at(0, &cfg), 0.1);
        assert_eq!(lr_at(35_999, &cfg), 0.1);
        assert_eq!(lr_at(36_000, &cfg), 0.01);
        assert_eq!(lr_at(52_000, &cfg), 0.001);
        assert_eq!(lr_at(57_999, &cfg), 0.001);
        assert_eq!(lr_at(58_000, &cfg), 0.0001);
        assert_eq!(lr_at(59_999, &cfg), 0.0001);
    }

    #[test]
    fn desk_schedule_fractions() {
        let d = TrainConfig::desk();
        assert_eq!(d.lr_drop_iters, vec![1200, 1733, 1933]);
        d.validate().unwrap();
    }

    #[test]
    fn parse_and_print() {
        let cfg = TrainConfig::parse("preset = desk\n# comment\ntotal_iters = 300\nlr_drop_iters = 100, 200\nseed=9\n").unwrap();
        assert_eq!(cfg.total_iters, 300);
        assert_eq!(cfg.lr_drop_iters, vec![100, 200]);
        assert_eq!(cfg.width_divisor, 4);
        assert_eq!(TrainConfig::parse(&cfg.to_text()).unwrap(), cfg);
        assert!(TrainConfig::parse("bogus = 1").is_err());
        assert!(TrainConfig::parse("lr_drop_iters = 5,3").is_err());
        assert!(TrainConfig::parse("total_iters = 100\nlr_drop_iters = 100").is_err());
    }
}
