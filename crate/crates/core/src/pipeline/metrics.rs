//! Verification metrics: pair lists, k-fold threshold accuracy and TAR at FAR.
//!
//! A pair is accepted when its score is `≥` the threshold.

use std::fmt::Write as _;
use std::ops::Range;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Pair {
    pub a: String,
    pub b: String,
    pub same: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct PairList {
    pub pairs: Vec<Pair>,
}

impl PairList {
    /// One `pathA pathB 0|1` record per line; blank lines and `#` comments skipped.
    pub fn parse(text: &str) -> Result<Self> {
        let mut pairs = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let f: Vec<&str> = line.split_whitespace().collect();
            let same = match f.as_slice() {
                [_, _, "1"] => true,
                [_, _, "0"] => false,
                _ => return Err(Error::Parse(format!("pair list line {}: expected `pathA pathB 0|1`", n + 1))),
            };
            pairs.push(Pair { a: f[0].into(), b: f[1].into(), same });
        }
        Ok(Self { pairs })
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn labels(&self) -> Vec<bool> {
        self.pairs.iter().map(|p| p.same).collect()
    }

    pub fn folds(&self, k: usize) -> Result<Vec<Range<usize>>> {
        check_folds(&self.labels(), k)
    }
}

/// Contiguous folds whose sizes differ by at most one.
pub fn fold_ranges(n: usize, k: usize) -> Result<Vec<Range<usize>>> {
    if k < 2 {
        return Err(Error::InvalidArgument(format!("need at least 2 folds, got {k}")));
    }
    if n < k {
        return Err(Error::InvalidArgument(format!("{n} pairs cannot fill {k} folds")));
    }
    let (base, extra) = (n / k, n % k);
    let mut start = 0;
    Ok((0..k)
        .map(|i| {
            let len = base + usize::from(i < extra);
            let r = start..start + len;
            start += len;
            r
        })
        .collect())
}

fn check_folds(same: &[bool], k: usize) -> Result<Vec<Range<usize>>> {
    let folds = fold_ranges(same.len(), k)?;
    for (i, r) in folds.iter().enumerate() {
        let g = same[r.clone()].iter().filter(|&&s| s).count();
        if g == 0 || g == r.len() {
            return Err(Error::InvalidArgument(format!(
                "fold {} needs both genuine and impostor pairs ({g} genuine of {})",
                i + 1,
                r.len()
            )));
        }
    }
    Ok(folds)
}

fn check_scores(scores: &[f64]) -> Result<()> {
    if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
        return Err(Error::Numeric(format!("score {i} is not finite")));
    }
    Ok(())
}

/// Fraction of pairs classified correctly at threshold `t`.
pub fn accuracy_at(scores: &[f64], same: &[bool], t: f64) -> f64 {
    let correct = scores.iter().zip(same).filter(|(&s, &g)| (s >= t) == g).count();
    correct as f64 / scores.len() as f64
}

/// Accuracy-maximizing threshold among the observed scores and one value
/// above the maximum; ties go to the lowest threshold.
pub fn best_threshold(scores: &[f64], same: &[bool]) -> (f64, f64) {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let n = scores.len();
    let mut correct = same.iter().filter(|&&g| g).count() as i64;
    let (mut best_t, mut best) = (scores[idx[0]], correct);
    let mut k = 0;
    while k < n {
        let v = scores[idx[k]];
        while k < n && scores[idx[k]] == v {
            correct += if same[idx[k]] { -1 } else { 1 };
            k += 1;
        }
        let t = if k < n { scores[idx[k]] } else { v.next_up() };
        if correct > best {
            best = correct;
            best_t = t;
        }
    }
    (best_t, best as f64 / n as f64)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FoldResult {
    pub threshold: f64,
    pub accuracy: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TarPoint {
    pub far: f64,
    pub tar: f64,
    pub threshold: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub folds: Vec<FoldResult>,
    pub mean_accuracy: f64,
    pub tar: Vec<TarPoint>,
}

impl EvalReport {
    pub fn to_text(&self) -> String {
        let mut out = format!("{:>6} {:>12} {:>9}\n", "fold", "threshold", "accuracy");
        for (i, f) in self.folds.iter().enumerate() {
            let _ = writeln!(out, "{:>6} {:>12.6} {:>9.4}", i + 1, f.threshold, f.accuracy);
        }
        let _ = writeln!(out, "mean accuracy {:.4}", self.mean_accuracy);
        for p in &self.tar {
            let _ = writeln!(out, "TAR {:.4} at FAR {:e} (threshold {:.6})", p.tar, p.far, p.threshold);
        }
        out
    }

    /// `kind,key,threshold,value` with `fold`, `mean` and `tar` rows.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("kind,key,threshold,value\n");
        for (i, f) in self.folds.iter().enumerate() {
            let _ = writeln!(out, "fold,{},{},{}", i + 1, f.threshold, f.accuracy);
        }
        let _ = writeln!(out, "mean,,,{}", self.mean_accuracy);
        for p in &self.tar {
            let _ = writeln!(out, "tar,{},{},{}", p.far, p.threshold, p.tar);
        }
        out
    }
}

/// For each fold, picks the threshold on the remaining folds and scores the
/// held-out fold with it.
pub fn kfold_accuracy(same: &[bool], scores: &[f64], k: usize) -> Result<EvalReport> {
    if same.len() != scores.len() {
        return Err(Error::InvalidArgument(format!("{} labels for {} scores", same.len(), scores.len())));
    }
    check_scores(scores)?;
    let folds = check_folds(same, k)?;
    let mut results = Vec::with_capacity(k);
    for test in &folds {
        let (mut s, mut l) = (Vec::new(), Vec::new());
        for i in (0..scores.len()).filter(|i| !test.contains(i)) {
            s.push(scores[i]);
            l.push(same[i]);
        }
        let (threshold, _) = best_threshold(&s, &l);
        let accuracy = accuracy_at(&scores[test.clone()], &same[test.clone()], threshold);
        results.push(FoldResult { threshold, accuracy });
    }
    let mean_accuracy = results.iter().map(|r| r.accuracy).sum::<f64>() / k as f64;
    Ok(EvalReport { folds: results, mean_accuracy, tar: Vec::new() })
}

pub fn evaluate_kfold(pairs: &PairList, scores: &[f64], k: usize) -> Result<EvalReport> {
    kfold_accuracy(&pairs.labels(), scores, k)
}

/// Lowest threshold whose impostor acceptance rate is at most `far`, and the
/// genuine acceptance rate there. With `far = 1` every score is accepted; when
/// `far` is below `1/|impostor|` the threshold sits just above the largest
/// impostor score.
pub fn tar_at_far(genuine: &[f64], impostor: &[f64], far: f64) -> Result<(f64, f64)> {
    if genuine.is_empty() || impostor.is_empty() {
        return Err(Error::InvalidArgument("tar_at_far needs genuine and impostor scores".into()));
    }
    if !(far > 0.0 && far <= 1.0) {
        return Err(Error::InvalidArgument(format!("far {far} must be in (0, 1]")));
    }
    check_scores(genuine)?;
    check_scores(impostor)?;
    let n = impostor.len();
    let mut allowed = (far * n as f64).floor() as usize;
    while allowed < n && (allowed + 1) as f64 / n as f64 <= far {
        allowed += 1;
    }
    while allowed > 0 && allowed as f64 / n as f64 > far {
        allowed -= 1;
    }
    let threshold = if allowed >= n {
        genuine.iter().chain(impostor).copied().fold(f64::INFINITY, f64::min)
    } else {
        let mut imp = impostor.to_vec();
        imp.sort_by(f64::total_cmp);
        imp[n - allowed - 1].next_up()
    };
    let tar = genuine.iter().filter(|&&g| g >= threshold).count() as f64 / genuine.len() as f64;
    Ok((tar, threshold))
}

/// Splits `scores` by label and evaluates [`tar_at_far`] at each rate.
pub fn tar_points(same: &[bool], scores: &[f64], fars: &[f64]) -> Result<Vec<TarPoint>> {
    let (g, i): (Vec<(f64, bool)>, Vec<(f64, bool)>) =
        scores.iter().copied().zip(same.iter().copied()).partition(|&(_, s)| s);
    let g: Vec<f64> = g.into_iter().map(|p| p.0).collect();
    let i: Vec<f64> = i.into_iter().map(|p| p.0).collect();
    fars.iter()
        .map(|&far| tar_at_far(&g, &i, far).map(|(tar, threshold)| TarPoint { far, tar, threshold }))
        .collect()
}
