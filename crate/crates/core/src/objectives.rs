//! Attack objectives over cosine scores and their input gradients.
//!
//! Every objective is a piecewise-linear function of the scores
//! `s_r = <p_r, e(x)>`, so its input gradient is the model's input gradient
//! for the upstream vector `sum_r c_r p_r`.

use crate::nets::{EmbeddingModel, SpeakerProfile};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Task {
    AsvImpersonation,
    AsvEvasion,
    CsiTargeted,
    OsiTargeted,
}

impl Task {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "asv-imp" => Ok(Task::AsvImpersonation),
            "asv-eva" => Ok(Task::AsvEvasion),
            "csi" => Ok(Task::CsiTargeted),
            "osi" => Ok(Task::OsiTargeted),
            _ => Err(Error::InvalidArgument(format!(
                "unknown objective '{s}' (expected asv-imp, asv-eva, csi or osi)"
            ))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Task::AsvImpersonation => "asv-imp",
            Task::AsvEvasion => "asv-eva",
            Task::CsiTargeted => "csi",
            Task::OsiTargeted => "osi",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttackObjective {
    pub task: Task,
    pub profiles: Vec<SpeakerProfile>,
    /// Index into `profiles` of the attack target (identification tasks).
    pub target: usize,
    /// Decision threshold; required for OSI. `-inf` is allowed.
    pub theta: Option<f64>,
}

/// Index of the largest score among `r != skip`, lowest index on ties.
fn argmax_excluding(scores: &[f64], skip: usize) -> Option<usize> {
    (0..scores.len())
        .filter(|&r| r != skip)
        .fold(None, |best, r| match best {
            Some(b) if scores[b] >= scores[r] => Some(b),
            _ => Some(r),
        })
}

impl AttackObjective {
    pub fn asv(task: Task, profile: SpeakerProfile, theta: Option<f64>) -> Result<Self> {
        let o = Self {
            task,
            profiles: vec![profile],
            target: 0,
            theta,
        };
        o.validate()?;
        Ok(o)
    }

    pub fn csi(profiles: Vec<SpeakerProfile>, target: usize) -> Result<Self> {
        let o = Self {
            task: Task::CsiTargeted,
            profiles,
            target,
            theta: None,
        };
        o.validate()?;
        Ok(o)
    }

    pub fn osi(profiles: Vec<SpeakerProfile>, target: usize, theta: f64) -> Result<Self> {
        let o = Self {
            task: Task::OsiTargeted,
            profiles,
            target,
            theta: Some(theta),
        };
        o.validate()?;
        Ok(o)
    }

    pub fn validate(&self) -> Result<()> {
        let r = self.profiles.len();
        match self.task {
            Task::AsvImpersonation | Task::AsvEvasion if r != 1 => {
                return Err(Error::InvalidArgument(format!(
                    "ASV objective needs exactly 1 profile, got {r}"
                )))
            }
            Task::CsiTargeted if r < 2 => {
                return Err(Error::InvalidArgument(format!(
                    "CSI objective needs at least 2 profiles, got {r}"
                )))
            }
            Task::OsiTargeted if r < 1 => return Err(Error::InvalidArgument("OSI objective needs profiles".into())),
            Task::OsiTargeted if self.theta.is_none() => {
                return Err(Error::InvalidArgument("OSI objective needs a threshold".into()))
            }
            _ => {}
        }
        if self.target >= r {
            return Err(Error::InvalidArgument(format!(
                "target {} out of range for {r} profiles",
                self.target
            )));
        }
        if self.theta.is_some_and(|t| t.is_nan() || t == f64::INFINITY) {
            return Err(Error::InvalidArgument("threshold must be finite or -inf".into()));
        }
        let dim = self.profiles[0].embedding.len();
        if let Some(p) = self.profiles.iter().find(|p| p.embedding.len() != dim) {
            return Err(Error::shape("profile dimension", dim, p.embedding.len()));
        }
        Ok(())
    }

    /// Objective value and its partial derivatives w.r.t. each score.
    pub fn value_from_scores(&self, scores: &[f64]) -> (f64, Vec<f64>) {
        let mut d = vec![0.0; scores.len()];
        let t = self.target;
        let value = match self.task {
            Task::AsvImpersonation => {
                d[0] = 1.0;
                scores[0]
            }
            Task::AsvEvasion => {
                d[0] = -1.0;
                -scores[0]
            }
            Task::CsiTargeted => {
                let c = argmax_excluding(scores, t).expect("at least two profiles");
                d[t] = 1.0;
                d[c] = -1.0;
                scores[t] - scores[c]
            }
            Task::OsiTargeted => {
                let theta = self.theta.expect("validated threshold");
                d[t] = 1.0;
                match argmax_excluding(scores, t) {
                    Some(c) if scores[c] >= theta => {
                        d[c] = -1.0;
                        scores[t] - scores[c]
                    }
                    _ => scores[t] - theta,
                }
            }
        };
        (value, d)
    }

    /// Whether the victim's decision on these scores is what the attack wants.
    pub fn succeeds(&self, scores: &[f64]) -> bool {
        match self.task {
            Task::AsvImpersonation => scores[0] > self.theta.unwrap_or(f64::NEG_INFINITY),
            Task::AsvEvasion => scores[0] <= self.theta.unwrap_or(f64::NEG_INFINITY),
            Task::CsiTargeted => csi_decision(scores) == self.target,
            Task::OsiTargeted => osi_decision(scores, self.theta.expect("validated threshold")) == Some(self.target),
        }
    }

    pub fn scores(&self, embedding: &[f64]) -> Result<Vec<f64>> {
        self.profiles
            .iter()
            .map(|p| crate::nets::score(&p.embedding, embedding))
            .collect()
    }

    pub fn value(&self, model: &EmbeddingModel, x: &[f64]) -> Result<f64> {
        Ok(self.value_from_scores(&self.scores(&model.embed(x)?)?).0)
    }

    /// Objective value and exact input gradient.
    pub fn evaluate(&self, model: &EmbeddingModel, x: &[f64]) -> Result<(f64, Vec<f64>)> {
        let (e, cache) = model.forward(x)?;
        let (value, d) = self.value_from_scores(&self.scores(&e)?);
        let mut upstream = vec![0.0; e.len()];
        for (p, &c) in self.profiles.iter().zip(&d) {
            if c != 0.0 {
                for (u, v) in upstream.iter_mut().zip(&p.embedding) {
                    *u += c * v;
                }
            }
        }
        Ok((value, model.input_gradient(&cache, &upstream)?))
    }
}

/// Closed-set decision: highest score, lowest index on ties.
pub fn csi_decision(scores: &[f64]) -> usize {
    argmax_excluding(scores, usize::MAX).expect("non-empty scores")
}

/// Open-set decision: the CSI decision if its score exceeds `theta`.
pub fn osi_decision(scores: &[f64], theta: f64) -> Option<usize> {
    let r = csi_decision(scores);
    (scores[r] > theta).then_some(r)
}

fn check_task(obj: &AttackObjective, ok: bool) -> Result<()> {
    obj.validate()?;
    if ok {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!(
            "objective task {} not valid here",
            obj.task.name()
        )))
    }
}

pub fn loss_asv(obj: &AttackObjective, model: &EmbeddingModel, x_adv: &[f64]) -> Result<(f64, Vec<f64>)> {
    check_task(obj, matches!(obj.task, Task::AsvImpersonation | Task::AsvEvasion))?;
    obj.evaluate(model, x_adv)
}

pub fn loss_csi(obj: &AttackObjective, model: &EmbeddingModel, x_adv: &[f64]) -> Result<(f64, Vec<f64>)> {
    check_task(obj, obj.task == Task::CsiTargeted)?;
    obj.evaluate(model, x_adv)
}

pub fn loss_osi(obj: &AttackObjective, model: &EmbeddingModel, x_adv: &[f64]) -> Result<(f64, Vec<f64>)> {
    check_task(obj, obj.task == Task::OsiTargeted)?;
    obj.evaluate(model, x_adv)
}

/// A differentiable scalar function of the waveform that an attacker ascends.
pub trait LossSurface: Sync {
    fn loss_grad(&self, x: &[f64]) -> Result<(f64, Vec<f64>)>;

    fn loss(&self, x: &[f64]) -> Result<f64> {
        Ok(self.loss_grad(x)?.0)
    }
}

/// An objective bound to one (surrogate) model.
#[derive(Debug, Clone, Copy)]
pub struct ModelObjective<'a> {
    pub model: &'a EmbeddingModel,
    pub objective: &'a AttackObjective,
}

impl LossSurface for ModelObjective<'_> {
    fn loss_grad(&self, x: &[f64]) -> Result<(f64, Vec<f64>)> {
        self.objective.evaluate(self.model, x)
    }

    fn loss(&self, x: &[f64]) -> Result<f64> {
        self.objective.value(self.model, x)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn unit(v: &[f64]) -> SpeakerProfile {
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        SpeakerProfile {
            speaker_id: "s".into(),
            embedding: v.iter().map(|x| x / n).collect(),
        }
    }

    fn dummy(task: Task, r: usize, target: usize, theta: Option<f64>) -> AttackObjective {
        AttackObjective {
            task,
            profiles: (0..r).map(|i| unit(&[1.0, i as f64])).collect(),
            target,
            theta,
        }
    }

    #[test]
    fn asv_values_and_sign_flip() {
        let imp = dummy(Task::AsvImpersonation, 1, 0, Some(0.5));
        let eva = dummy(Task::AsvEvasion, 1, 0, Some(0.5));
        assert_eq!(imp.value_from_scores(&[0.3]).0, 0.3);
        assert_eq!(eva.value_from_scores(&[0.3]).0, -0.3);
        assert!(!imp.succeeds(&[0.3]) && eva.succeeds(&[0.3]));
        assert!(dummy(Task::AsvImpersonation, 2, 0, None).validate().is_err());
    }

    #[test]
    fn csi_two_speakers_and_ties() {
        let o = dummy(Task::CsiTargeted, 2, 1, None);
        let (v, d) = o.value_from_scores(&[0.2, 0.7]);
        assert!((v - 0.5).abs() < 1e-15);
        assert_eq!(d, vec![-1.0, 1.0]);
        // tie between competitors 0 and 2 goes to index 0
        let o3 = dummy(Task::CsiTargeted, 3, 1, None);
        assert_eq!(o3.value_from_scores(&[0.4, 0.1, 0.4]).1, vec![-1.0, 1.0, 0.0]);
        assert!(dummy(Task::CsiTargeted, 1, 0, None).validate().is_err());
        assert!(dummy(Task::CsiTargeted, 2, 2, None).validate().is_err());
    }

    #[test]
    fn osi_branches() {
        let o = dummy(Task::OsiTargeted, 3, 2, Some(0.6));
        assert!((o.value_from_scores(&[0.1, 0.2, 0.3]).0 - (0.3 - 0.6)).abs() < 1e-15);
        assert_eq!(o.value_from_scores(&[0.1, 0.2, 0.3]).1, vec![0.0, 0.0, 1.0]);
        assert!((o.value_from_scores(&[0.1, 0.9, 0.3]).0 + 0.6).abs() < 1e-15);
        let none = dummy(Task::OsiTargeted, 3, 2, None);
        assert!(none.validate().is_err());
    }

    #[test]
    fn osi_with_minus_infinity_is_csi() {
        let mut rng = crate::rng::seeded(1);
        let osi = dummy(Task::OsiTargeted, 4, 2, Some(f64::NEG_INFINITY));
        let csi = dummy(Task::CsiTargeted, 4, 2, None);
        for _ in 0..1000 {
            let s: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
            assert_eq!(osi.value_from_scores(&s), csi.value_from_scores(&s));
        }
    }

    #[test]
    fn sign_matches_decision_rule_exhaustively() {
        let mut rng = crate::rng::seeded(2);
        for r in 1..6 {
            for _ in 0..2000 {
                let s: Vec<f64> = (0..r).map(|_| rng.random_range(-1.0..1.0)).collect();
                let t = rng.random_range(0..r);
                let theta = rng.random_range(-1.0..1.0);
                let osi = dummy(Task::OsiTargeted, r, t, Some(theta));
                assert_eq!(osi.value_from_scores(&s).0 > 0.0, osi_decision(&s, theta) == Some(t));
                if r >= 2 {
                    let csi = dummy(Task::CsiTargeted, r, t, None);
                    assert_eq!(csi.value_from_scores(&s).0 > 0.0, csi_decision(&s) == t);
                }
            }
        }
    }
}
