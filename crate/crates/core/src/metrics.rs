//! Verification and identification metrics.
//!
//! A trial is accepted when its score is strictly greater than the threshold.
//! Operating points are evaluated at one threshold below every score, at the
//! midpoint between each pair of adjacent distinct scores, and one above every
//! score.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use crate::{Error, Result};

/// Similarity scores with their ground-truth target/non-target labels.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ScoreSet {
    pub scores: Vec<f64>,
    pub is_target: Vec<bool>,
}

impl ScoreSet {
    pub fn new(scores: Vec<f64>, is_target: Vec<bool>) -> Result<Self> {
        if scores.len() != is_target.len() {
            return Err(Error::shape("score set labels", scores.len(), is_target.len()));
        }
        if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
            return Err(Error::Metric(format!("score {i} is not finite")));
        }
        Ok(Self { scores, is_target })
    }

    pub fn push(&mut self, score: f64, is_target: bool) {
        self.scores.push(score);
        self.is_target.push(is_target);
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    fn counts(&self) -> (usize, usize) {
        let t = self.is_target.iter().filter(|&&b| b).count();
        (t, self.len() - t)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OperatingPoint {
    pub threshold: f64,
    /// False acceptance rate (non-targets scoring above threshold).
    pub far: f64,
    /// False rejection rate (targets scoring at or below threshold).
    pub frr: f64,
}

/// All operating points in increasing threshold order.
pub fn operating_points(s: &ScoreSet) -> Result<Vec<OperatingPoint>> {
    let (n_tar, n_non) = s.counts();
    if n_tar == 0 || n_non == 0 {
        return Err(Error::Metric(format!(
            "need both classes, got {n_tar} targets and {n_non} non-targets"
        )));
    }
    if s.scores.iter().any(|v| !v.is_finite()) {
        return Err(Error::Metric("non-finite score".into()));
    }
    let mut sorted: Vec<(f64, bool)> = s.scores.iter().copied().zip(s.is_target.iter().copied()).collect();
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0));

    let (nt, nn) = (n_tar as f64, n_non as f64);
    let mut points = Vec::new();
    points.push(OperatingPoint {
        threshold: sorted[0].0 - 1.0,
        far: 1.0,
        frr: 0.0,
    });
    let mut tar_below = 0usize;
    let mut non_below = 0usize;
    let mut i = 0;
    while i < sorted.len() {
        let v = sorted[i].0;
        while i < sorted.len() && sorted[i].0 == v {
            if sorted[i].1 {
                tar_below += 1;
            } else {
                non_below += 1;
            }
            i += 1;
        }
        let threshold = if i < sorted.len() {
            (v + sorted[i].0) / 2.0
        } else {
            v + 1.0
        };
        points.push(OperatingPoint {
            threshold,
            far: (n_non - non_below) as f64 / nn,
            frr: tar_below as f64 / nt,
        });
    }
    Ok(points)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EerResult {
    pub eer: f64,
    pub threshold: f64,
}

/// Equal error rate from an ordered list of operating points.
///
/// Finds the first point with `frr >= far`; an exact crossing is returned as
/// is, otherwise the crossing is linearly interpolated between that point and
/// its predecessor.
pub fn eer_from_points(points: &[OperatingPoint]) -> Result<EerResult> {
    let j = points
        .iter()
        .position(|p| p.frr - p.far >= 0.0)
        .ok_or_else(|| Error::Metric("no FAR/FRR crossing".into()))?;
    let cur = points[j];
    let d1 = cur.frr - cur.far;
    if d1 == 0.0 || j == 0 {
        return Ok(EerResult {
            eer: cur.far,
            threshold: cur.threshold,
        });
    }
    let prev = points[j - 1];
    let d0 = prev.frr - prev.far;
    let lambda = -d0 / (d1 - d0);
    Ok(EerResult {
        eer: prev.far + lambda * (cur.far - prev.far),
        threshold: prev.threshold + lambda * (cur.threshold - prev.threshold),
    })
}

pub fn eer(s: &ScoreSet) -> Result<EerResult> {
    eer_from_points(&operating_points(s)?)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DcfParams {
    pub p_target: f64,
    pub c_miss: f64,
    pub c_fa: f64,
}

impl Default for DcfParams {
    fn default() -> Self {
        Self {
            p_target: 0.05,
            c_miss: 1.0,
            c_fa: 1.0,
        }
    }
}

/// Normalised minimum detection cost.
pub fn min_dcf(s: &ScoreSet, params: DcfParams) -> Result<f64> {
    let DcfParams { p_target, c_miss, c_fa } = params;
    if !(p_target > 0.0 && p_target < 1.0) || c_miss <= 0.0 || c_fa <= 0.0 {
        return Err(Error::Metric(format!("invalid DCF parameters {params:?}")));
    }
    let norm = (c_miss * p_target).min(c_fa * (1.0 - p_target));
    let points = operating_points(s)?;
    Ok(points
        .iter()
        .map(|p| (c_miss * p.frr * p_target + c_fa * p.far * (1.0 - p_target)) / norm)
        .fold(f64::INFINITY, f64::min))
}

pub fn operating_points_csv(points: &[OperatingPoint]) -> String {
    let mut s = String::from("threshold,far,frr\n");
    for p in points {
        writeln!(s, "{},{},{}", p.threshold, p.far, p.frr).unwrap();
    }
    s
}

/// Ground truth of a scored trial.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Truth {
    /// Verification: same speaker as the enrollment.
    Target,
    /// Verification: different speaker.
    NonTarget,
    /// Identification: the test speaker is enrolled under this index.
    Speaker(usize),
    /// Open-set identification: the test speaker is not enrolled.
    Outsider,
}

/// System output for a trial.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Decision {
    Accept,
    Reject,
    Speaker(usize),
    /// Open-set identification rejected every enrolled speaker.
    Unknown,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DecidedTrial {
    pub truth: Truth,
    pub decision: Decision,
    /// The decision an attacker tried to force, for adversarial trials.
    pub attack_goal: Option<Decision>,
}

impl DecidedTrial {
    fn is_correct(&self) -> bool {
        matches!(
            (self.truth, self.decision),
            (Truth::Target, Decision::Accept)
                | (Truth::NonTarget, Decision::Reject)
                | (Truth::Outsider, Decision::Unknown)
        ) || matches!((self.truth, self.decision), (Truth::Speaker(a), Decision::Speaker(b)) if a == b)
    }
}

/// Rates are `None` when their denominator is empty.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Rates {
    pub far: Option<f64>,
    pub tasr: Option<f64>,
    pub ier: Option<f64>,
}

pub fn format_rate(r: Option<f64>) -> String {
    r.map_or_else(|| "undefined".to_string(), |v| format!("{v}"))
}

pub fn rates(trials: &[DecidedTrial]) -> Rates {
    let ratio = |num: usize, den: usize| (den > 0).then(|| num as f64 / den as f64);

    // false acceptance: a non-target accepted, or an outsider identified
    let negatives = trials
        .iter()
        .filter(|t| matches!(t.truth, Truth::NonTarget | Truth::Outsider))
        .count();
    let false_accepts = trials
        .iter()
        .filter(|t| {
            matches!(
                (t.truth, t.decision),
                (Truth::NonTarget, Decision::Accept) | (Truth::Outsider, Decision::Speaker(_))
            )
        })
        .count();

    let attacked: Vec<&DecidedTrial> = trials.iter().filter(|t| t.attack_goal.is_some()).collect();
    let hits = attacked.iter().filter(|t| t.attack_goal == Some(t.decision)).count();

    let ident: Vec<&DecidedTrial> = trials
        .iter()
        .filter(|t| matches!(t.truth, Truth::Speaker(_) | Truth::Outsider))
        .collect();
    let errors = ident.iter().filter(|t| !t.is_correct()).count();

    Rates {
        far: ratio(false_accepts, negatives),
        tasr: ratio(hits, attacked.len()),
        ier: ratio(errors, ident.len()),
    }
}

fn check_pair(x: &[f64], x_adv: &[f64]) -> Result<()> {
    if x.len() != x_adv.len() {
        return Err(Error::shape("perturbation length", x.len(), x_adv.len()));
    }
    if x.is_empty() {
        return Err(Error::Metric("empty waveform".into()));
    }
    Ok(())
}

/// `10 log10(P_x / P_delta)` with `P` the mean squared sample; `+inf` when
/// `x_adv == x`.
pub fn snr(x: &[f64], x_adv: &[f64]) -> Result<f64> {
    check_pair(x, x_adv)?;
    let n = x.len() as f64;
    let px = x.iter().map(|v| v * v).sum::<f64>() / n;
    let pd = x.iter().zip(x_adv).map(|(a, b)| (b - a).powi(2)).sum::<f64>() / n;
    if pd == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (px / pd).log10())
}

/// Per-sample RMS of the perturbation on the sample scale.
pub fn l2_raw(x: &[f64], x_adv: &[f64]) -> Result<f64> {
    check_pair(x, x_adv)?;
    let ss: f64 = x.iter().zip(x_adv).map(|(a, b)| (b - a).powi(2)).sum();
    Ok(ss.sqrt() / (x.len() as f64).sqrt())
}

/// Per-sample RMS of the perturbation on the unit scale (divided by 32768).
pub fn l2(x: &[f64], x_adv: &[f64]) -> Result<f64> {
    Ok(l2_raw(x, x_adv)? / 32768.0)
}

/// Builds `M(b)`: trial `i` is taken from `adversarial` when its adversarial
/// SNR is at least `budget` and `i` is in `group`, otherwise from `original`.
pub fn mixed_trial_set<T: Clone>(
    original: &[T],
    adversarial: &[T],
    p_adv: &[f64],
    budget: f64,
    group: &BTreeSet<usize>,
) -> Result<Vec<T>> {
    if original.len() != adversarial.len() {
        return Err(Error::shape(
            "mixed trials: adversarial set",
            original.len(),
            adversarial.len(),
        ));
    }
    if original.len() != p_adv.len() {
        return Err(Error::shape("mixed trials: SNR vector", original.len(), p_adv.len()));
    }
    if let Some(&i) = group.iter().find(|&&i| i >= original.len()) {
        return Err(Error::InvalidArgument(format!(
            "mixed trials: group index {i} outside {} trials",
            original.len()
        )));
    }
    Ok((0..original.len())
        .map(|i| {
            if p_adv[i] >= budget && group.contains(&i) {
                adversarial[i].clone()
            } else {
                original[i].clone()
            }
        })
        .collect())
}
