//! Independent oracles shared by the integration tests.

#![allow(dead_code)]

use advspeech::nets::{enroll, EmbeddingModel, SpeakerProfile};
use advspeech::objectives::AttackObjective;
use advspeech::rng::seeded;
use advspeech::training::Corpus;
use rand::Rng;

/// Operating points by direct counting at every candidate threshold:
/// below all scores and at each distinct score (accept iff `s > t`).
pub fn brute_points(scores: &[f64], is_target: &[bool]) -> Vec<(f64, f64)> {
    let mut ts: Vec<f64> = scores.to_vec();
    ts.sort_by(f64::total_cmp);
    ts.dedup();
    let lowest = ts[0] - 1.0;
    let nt = is_target.iter().filter(|&&b| b).count() as f64;
    let nn = is_target.len() as f64 - nt;
    std::iter::once(lowest)
        .chain(ts)
        .map(|t| {
            let mut fa = 0usize;
            let mut fr = 0usize;
            for (s, &tar) in scores.iter().zip(is_target) {
                if tar && *s <= t {
                    fr += 1;
                }
                if !tar && *s > t {
                    fa += 1;
                }
            }
            (fa as f64 / nn, fr as f64 / nt)
        })
        .collect()
}

/// EER from the brute-force sweep: first point with FRR >= FAR, linearly
/// interpolated against its predecessor when the crossing is not exact.
pub fn brute_eer(scores: &[f64], is_target: &[bool]) -> f64 {
    let pts = brute_points(scores, is_target);
    let j = pts.iter().position(|(fa, fr)| fr - fa >= 0.0).expect("crossing");
    let (fa1, fr1) = pts[j];
    if fr1 == fa1 || j == 0 {
        return fa1;
    }
    let (fa0, fr0) = pts[j - 1];
    let d0 = fr0 - fa0;
    let d1 = fr1 - fa1;
    let lambda = -d0 / (d1 - d0);
    fa0 + lambda * (fa1 - fa0)
}

pub fn brute_min_dcf(scores: &[f64], is_target: &[bool], p: f64, c_miss: f64, c_fa: f64) -> f64 {
    let norm = (c_miss * p).min(c_fa * (1.0 - p));
    brute_points(scores, is_target)
        .into_iter()
        .map(|(fa, fr)| (c_miss * fr * p + c_fa * fa * (1.0 - p)) / norm)
        .fold(f64::INFINITY, f64::min)
}

/// `sqrt(sum (fd - g)^2 / sum g^2)` over `coords`, central differences of `f`.
pub fn fd_relative_error(f: impl Fn(&[f64]) -> f64, x: &[f64], grad: &[f64], coords: &[usize], step: f64) -> f64 {
    let mut num = 0.0;
    let mut den = 0.0;
    for &i in coords {
        let mut xp = x.to_vec();
        xp[i] += step;
        let mut xm = x.to_vec();
        xm[i] -= step;
        let fd = (f(&xp) - f(&xm)) / (2.0 * step);
        num += (fd - grad[i]).powi(2);
        den += grad[i].powi(2);
    }
    (num / den).sqrt()
}

pub fn random_coords(seed: u64, len: usize, n: usize) -> Vec<usize> {
    let mut rng = seeded(seed);
    (0..n).map(|_| rng.random_range(0..len)).collect()
}

/// Profiles for the first `n` speakers from their first `k` utterances.
pub fn profiles(model: &EmbeddingModel, corpus: &Corpus, n: usize, k: usize) -> Vec<SpeakerProfile> {
    (0..n)
        .map(|s| {
            let utts: Vec<&[f64]> = corpus.of_speaker(s).take(k).map(|u| u.wave.as_slice()).collect();
            enroll(model, &utts, &corpus.speaker_ids[s]).unwrap()
        })
        .collect()
}

/// Relative FD error of an objective's input gradient at `x`.
pub fn objective_fd_error(obj: &AttackObjective, model: &EmbeddingModel, x: &[f64], coords: &[usize]) -> f64 {
    let (_, g) = obj.evaluate(model, x).unwrap();
    fd_relative_error(|y| obj.value(model, y).unwrap(), x, &g, coords, 1e-3)
}
