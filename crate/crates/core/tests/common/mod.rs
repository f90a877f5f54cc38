#![allow(dead_code)]

use mobilefacenet::arch::{Layer, Mode, Model, Node};
use mobilefacenet::{Rng, Scalar, Tensor};

/// Random BN affine terms, then running statistics taken from one train-mode
/// batch so eval activations stay normalized and folding is not a no-op.
pub fn randomize_bn<T: Scalar>(model: &mut Model<T>, rng: &mut Rng) {
    fn walk<T: Scalar>(nodes: &mut [Node<T>], rng: &mut Rng, momentum: Option<f64>) {
        for n in nodes {
            match &mut n.layer {
                Layer::BatchNorm(bn) => {
                    let c = bn.channels();
                    let mut draw = |lo: f64, hi: f64| -> Tensor<T> {
                        let v = (0..c).map(|_| T::of(rng.uniform_in(lo, hi))).collect();
                        Tensor::from_vec(&[c], v).unwrap()
                    };
                    match momentum {
                        Some(m) => bn.momentum = T::of(m),
                        None => {
                            bn.gamma = draw(0.8, 1.2);
                            bn.beta = draw(-0.1, 0.1);
                            bn.momentum = T::zero();
                        }
                    }
                }
                Layer::Block(b) => walk(&mut b.nodes, rng, momentum),
                _ => {}
            }
        }
    }
    walk(model.nodes_mut(), rng, None);
    let r = model.arch().input;
    let x = image_range_input(16, r.height, r.width, rng);
    let mode = model.mode();
    model.set_mode(Mode::Train).unwrap();
    let (_, tape) = model.forward_tape(&x).unwrap();
    model.update_running_stats(&tape);
    model.set_mode(mode).unwrap();
    walk(model.nodes_mut(), rng, Some(0.9));
}

/// Uniform values in `[-1, 1]`, the range of preprocessed images.
pub fn image_range_input<T: Scalar>(n: usize, h: usize, w: usize, rng: &mut Rng) -> Tensor<T> {
    let v = (0..n * 3 * h * w).map(|_| T::of(rng.uniform_in(-1.0, 1.0))).collect();
    Tensor::from_vec(&[n, 3, h, w], v).unwrap()
}

/// Contiguous folds of exactly `n / k` items (callers pick `k | n`).
pub fn even_folds(n: usize, k: usize) -> Vec<std::ops::Range<usize>> {
    assert_eq!(n % k, 0);
    (0..k).map(|i| i * n / k..(i + 1) * n / k).collect()
}

fn accuracy(scores: &[f64], same: &[bool], t: f64) -> f64 {
    let hits = scores.iter().zip(same).filter(|(&s, &g)| (s >= t) == g).count();
    hits as f64 / scores.len() as f64
}

/// Tries every observed score and one value above the maximum as a threshold;
/// keeps the first that reaches the best accuracy in ascending order.
pub fn brute_best_threshold(scores: &[f64], same: &[bool]) -> (f64, f64) {
    let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut cands: Vec<f64> = scores.to_vec();
    cands.push(max.next_up());
    let mut best = (f64::INFINITY, -1.0);
    for &t in &cands {
        let a = accuracy(scores, same, t);
        if a > best.1 || (a == best.1 && t < best.0) {
            best = (t, a);
        }
    }
    best
}

/// Per-fold test accuracy using the threshold chosen on the other folds.
pub fn brute_kfold(scores: &[f64], same: &[bool], k: usize) -> Vec<(f64, f64)> {
    even_folds(scores.len(), k)
        .into_iter()
        .map(|test| {
            let (mut ts, mut tl) = (Vec::new(), Vec::new());
            for i in (0..scores.len()).filter(|i| !test.contains(i)) {
                ts.push(scores[i]);
                tl.push(same[i]);
            }
            let (t, _) = brute_best_threshold(&ts, &tl);
            (t, accuracy(&scores[test.clone()], &same[test], t))
        })
        .collect()
}

/// Lowest threshold among all scores and the successors of impostor scores
/// whose impostor acceptance is at most `far`; returns `(tar, threshold)`.
pub fn brute_tar(genuine: &[f64], impostor: &[f64], far: f64) -> (f64, f64) {
    let mut cands: Vec<f64> = genuine.iter().chain(impostor).cloned().collect();
    cands.extend(impostor.iter().map(|&s| s.next_up()));
    let mut best: Option<f64> = None;
    for &t in &cands {
        let fa = impostor.iter().filter(|&&s| s >= t).count() as f64 / impostor.len() as f64;
        if fa <= far && best.is_none_or(|b| t < b) {
            best = Some(t);
        }
    }
    let t = best.unwrap();
    let tar = genuine.iter().filter(|&&s| s >= t).count() as f64 / genuine.len() as f64;
    (tar, t)
}

/// Scores on a fine grid (so ties occur) with labels loosely correlated to them.
pub fn random_scores(n: usize, rng: &mut Rng) -> (Vec<f64>, Vec<bool>) {
    let same: Vec<bool> = (0..n).map(|_| rng.coin()).collect();
    let scores = same
        .iter()
        .map(|&g| {
            let mu = if g { 0.4 } else { 0.0 };
            ((mu + 0.3 * rng.normal()).clamp(-1.0, 1.0) * 500.0).round() / 500.0
        })
        .collect();
    (scores, same)
}

pub fn split(scores: &[f64], same: &[bool]) -> (Vec<f64>, Vec<f64>) {
    let g = scores.iter().zip(same).filter(|p| *p.1).map(|p| *p.0).collect();
    let i = scores.iter().zip(same).filter(|p| !*p.1).map(|p| *p.0).collect();
    (g, i)
}
