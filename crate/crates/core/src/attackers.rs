//! Gradient-sign attackers: FGSM, I-FGSM, MI-FGSM, NI-FGSM, ACG, the
//! spectrum-transformation attack (MDCT or DCT) and its ensemble form.
//!
//! All iterative attackers ascend a [`LossSurface`] through a
//! [`GradientSource`], which fuses per-surface gradients with fixed weights
//! and optionally averages them over random spectrum transformations. Plain
//! attacks are the single-surface, no-transform case of the same source, so
//! the degenerate configurations coincide bit for bit.

use rayon::prelude::*;

use crate::audio::{SAMPLE_MAX, SAMPLE_MIN};
use crate::config::KeyValues;
use crate::objectives::LossSurface;
use crate::rng::derive;
use crate::transform::{SpectrumTransform, SpectrumTransformParams, TransformVariant};
use crate::{Error, Result};

pub const NORM_GUARD: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttackerKind {
    Fgsm,
    Ifgsm,
    Mifgsm,
    Nifgsm,
    Acg,
    StaMdct,
    StaDct,
}

impl AttackerKind {
    pub const ALL: [AttackerKind; 7] = [
        AttackerKind::Fgsm,
        AttackerKind::Ifgsm,
        AttackerKind::Mifgsm,
        AttackerKind::Nifgsm,
        AttackerKind::Acg,
        AttackerKind::StaMdct,
        AttackerKind::StaDct,
    ];

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown attacker '{s}'")))
    }

    pub fn name(self) -> &'static str {
        match self {
            AttackerKind::Fgsm => "fgsm",
            AttackerKind::Ifgsm => "i-fgsm",
            AttackerKind::Mifgsm => "mi-fgsm",
            AttackerKind::Nifgsm => "ni-fgsm",
            AttackerKind::Acg => "acg",
            AttackerKind::StaMdct => "sta-mdct",
            AttackerKind::StaDct => "sta-dct",
        }
    }
}

/// Update rule of the iterative loop.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UpdateRule {
    Ifgsm,
    Mifgsm,
    Nifgsm,
    Acg,
}

impl UpdateRule {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "i-fgsm" => Ok(UpdateRule::Ifgsm),
            "mi-fgsm" => Ok(UpdateRule::Mifgsm),
            "ni-fgsm" => Ok(UpdateRule::Nifgsm),
            "acg" => Ok(UpdateRule::Acg),
            _ => Err(Error::InvalidArgument(format!("unknown update rule '{s}'"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            UpdateRule::Ifgsm => "i-fgsm",
            UpdateRule::Mifgsm => "mi-fgsm",
            UpdateRule::Nifgsm => "ni-fgsm",
            UpdateRule::Acg => "acg",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttackConfig {
    pub kind: AttackerKind,
    pub epsilon: f64,
    pub iterations: usize,
    pub alpha: f64,
    pub mu: f64,
    pub n_transforms: usize,
    pub transform: SpectrumTransformParams,
    /// Initial ACG step; `None` means `2 epsilon / iterations`.
    pub acg_eta0: Option<f64>,
    /// Update rule inside the spectrum-transformation attack. Anything other
    /// than I-FGSM is an extrapolation beyond the published method.
    pub sta_inner: UpdateRule,
    pub seed: u64,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            kind: AttackerKind::StaMdct,
            epsilon: 40.0,
            iterations: 10,
            alpha: 4.0,
            mu: 1.0,
            n_transforms: 20,
            transform: SpectrumTransformParams::default(),
            acg_eta0: None,
            sta_inner: UpdateRule::Ifgsm,
            seed: 0,
        }
    }
}

impl AttackConfig {
    pub const KEYS: &'static [&'static str] = &[
        "attacker",
        "epsilon",
        "iterations",
        "alpha",
        "mu",
        "n_transforms",
        "sigma",
        "rho",
        "window_len",
        "kbd_beta",
        "acg_eta0",
        "sta_inner",
        "seed",
    ];

    /// Reads known keys; `alpha` defaults to `epsilon / iterations` when absent.
    pub fn from_key_values(kv: &KeyValues) -> Result<Self> {
        kv.check_known(Self::KEYS)?;
        let d = Self::default();
        let epsilon = kv.parsed("epsilon")?.unwrap_or(d.epsilon);
        let iterations = kv.parsed("iterations")?.unwrap_or(d.iterations);
        let cfg = Self {
            kind: kv
                .get("attacker")
                .map(AttackerKind::parse)
                .transpose()?
                .unwrap_or(d.kind),
            epsilon,
            iterations,
            alpha: kv.parsed("alpha")?.unwrap_or(epsilon / iterations.max(1) as f64),
            mu: kv.parsed("mu")?.unwrap_or(d.mu),
            n_transforms: kv.parsed("n_transforms")?.unwrap_or(d.n_transforms),
            transform: SpectrumTransformParams {
                sigma: kv.parsed("sigma")?.unwrap_or(d.transform.sigma),
                rho: kv.parsed("rho")?.unwrap_or(d.transform.rho),
                window_len: kv.parsed("window_len")?.unwrap_or(d.transform.window_len),
                kbd_beta: kv.parsed("kbd_beta")?.unwrap_or(d.transform.kbd_beta),
                variant: d.transform.variant,
            },
            acg_eta0: kv.parsed("acg_eta0")?,
            sta_inner: kv
                .get("sta_inner")
                .map(UpdateRule::parse)
                .transpose()?
                .unwrap_or(d.sta_inner),
            seed: kv.parsed("seed")?.unwrap_or(d.seed),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_key_values(&self) -> KeyValues {
        let mut kv = KeyValues::default();
        kv.set("attacker", self.kind.name());
        kv.set("epsilon", self.epsilon.to_string());
        kv.set("iterations", self.iterations.to_string());
        kv.set("alpha", self.alpha.to_string());
        kv.set("mu", self.mu.to_string());
        kv.set("n_transforms", self.n_transforms.to_string());
        kv.set("sigma", self.transform.sigma.to_string());
        kv.set("rho", self.transform.rho.to_string());
        kv.set("window_len", self.transform.window_len.to_string());
        kv.set("kbd_beta", self.transform.kbd_beta.to_string());
        if let Some(eta0) = self.acg_eta0 {
            kv.set("acg_eta0", eta0.to_string());
        }
        kv.set("sta_inner", self.sta_inner.name());
        kv.set("seed", self.seed.to_string());
        kv
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::InvalidArgument(format!("attack config: {what}")));
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return bad("epsilon must be > 0");
        }
        if self.iterations == 0 {
            return bad("iterations must be >= 1");
        }
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return bad("alpha must be > 0");
        }
        if self.n_transforms == 0 {
            return bad("n_transforms must be >= 1");
        }
        if !(self.mu >= 0.0 && self.mu.is_finite()) {
            return bad("mu must be >= 0");
        }
        if self.acg_eta0.is_some_and(|e| !(e > 0.0 && e.is_finite())) {
            return bad("acg_eta0 must be > 0");
        }
        self.transform.validate()
    }

    pub fn eta0(&self) -> f64 {
        self.acg_eta0.unwrap_or(2.0 * self.epsilon / self.iterations as f64)
    }

    /// ACG halving checkpoints `ceil(qT)` for q = 1/4, 1/2, 3/4.
    pub fn acg_checkpoints(&self) -> [usize; 3] {
        let t = self.iterations;
        [t.div_ceil(4), t.div_ceil(2), (3 * t).div_ceil(4)]
    }
}

/// Surrogate ensemble weights.
#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleSpec {
    pub weights: Vec<f64>,
}

impl EnsembleSpec {
    pub fn uniform(q: usize) -> Self {
        Self {
            weights: vec![1.0 / q as f64; q],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.weights.is_empty() {
            return Err(Error::InvalidArgument("empty ensemble".into()));
        }
        if self.weights.iter().any(|w| !(*w >= 0.0)) || (self.weights.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidArgument(format!(
                "ensemble weights must be non-negative and sum to 1, got {:?}",
                self.weights
            )));
        }
        Ok(())
    }
}

pub fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Projects onto the L-infinity ball around `x` and then the sample range.
pub fn clip(x_adv: &[f64], x: &[f64], eps: f64) -> Result<Vec<f64>> {
    if x_adv.len() != x.len() {
        return Err(Error::shape("clip", x.len(), x_adv.len()));
    }
    Ok(x_adv
        .iter()
        .zip(x)
        .map(|(&a, &o)| a.clamp(o - eps, o + eps).clamp(SAMPLE_MIN, SAMPLE_MAX))
        .collect())
}

/// Largest deviation from `x`, erroring when it exceeds `eps` or a sample
/// leaves the valid range.
pub fn check_ball(x_adv: &[f64], x: &[f64], eps: f64) -> Result<f64> {
    let mut worst = 0.0f64;
    for (i, (&a, &o)) in x_adv.iter().zip(x).enumerate() {
        let dev = (a - o).abs();
        let tol = 4.0 * f64::EPSILON * (o.abs() + eps);
        if !(dev <= eps + tol) || !(SAMPLE_MIN..=SAMPLE_MAX).contains(&a) {
            return Err(Error::Invariant(format!(
                "epsilon-ball violated at sample {i}: |{a} - {o}| = {dev} > {eps}"
            )));
        }
        worst = worst.max(dev);
    }
    Ok(worst)
}

fn check_finite(g: &[f64], iteration: usize) -> Result<()> {
    if g.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite {
            context: "attack gradient",
            iteration,
        })
    }
}

/// Weighted fusion of surface gradients, optionally averaged over `N`
/// spectrum transformations per iteration.
pub struct GradientSource<'a> {
    surfaces: Vec<&'a dyn LossSurface>,
    weights: Vec<f64>,
    transform: Option<(SpectrumTransform, usize)>,
    seed: u64,
}

impl<'a> GradientSource<'a> {
    pub fn plain(surface: &'a dyn LossSurface) -> Self {
        Self {
            surfaces: vec![surface],
            weights: vec![1.0],
            transform: None,
            seed: 0,
        }
    }

    pub fn transformed(
        surfaces: Vec<&'a dyn LossSurface>,
        ensemble: &EnsembleSpec,
        params: SpectrumTransformParams,
        n: usize,
        seed: u64,
    ) -> Result<Self> {
        ensemble.validate()?;
        if surfaces.len() != ensemble.weights.len() {
            return Err(Error::shape("ensemble weights", surfaces.len(), ensemble.weights.len()));
        }
        if n == 0 {
            return Err(Error::InvalidArgument("n_transforms must be >= 1".into()));
        }
        Ok(Self {
            surfaces,
            weights: ensemble.weights.clone(),
            transform: Some((SpectrumTransform::new(params)?, n)),
            seed,
        })
    }

    /// Averaged transformed gradient of one surface at iteration `t`.
    pub fn surface_grad(&self, j: usize, x: &[f64], t: usize) -> Result<(f64, Vec<f64>)> {
        let surface = self.surfaces[j];
        let Some((tr, n)) = &self.transform else {
            return surface.loss_grad(x);
        };
        if tr.params().is_identity() {
            // T is the identity map; skip the round trip and its rounding
            let (l, g) = surface.loss_grad(x)?;
            let mut k = vec![0.0; x.len()];
            for _ in 0..*n {
                k.iter_mut().zip(&g).for_each(|(a, b)| *a += b);
            }
            let inv = *n as f64;
            return Ok((l, k.into_iter().map(|v| v / inv).collect()));
        }
        let parts: Vec<Result<(f64, Vec<f64>)>> = (0..*n)
            .into_par_iter()
            .map(|i| {
                let s = tr.sample(derive(self.seed, &[t as u64, i as u64]), x.len());
                let xt = tr.apply(x, &s)?;
                let (l, g) = surface.loss_grad(&xt)?;
                Ok((l, tr.apply_adjoint(&g, &s)?))
            })
            .collect();
        let mut k = vec![0.0; x.len()];
        let mut loss = 0.0;
        for p in parts {
            let (l, g) = p?;
            loss += l;
            k.iter_mut().zip(&g).for_each(|(a, b)| *a += b);
        }
        let inv = *n as f64;
        Ok((loss / inv, k.into_iter().map(|v| v / inv).collect()))
    }

    /// Fused loss and gradient `sum_j w_j k_j` at iteration `t`.
    pub fn grad(&self, x: &[f64], t: usize) -> Result<(f64, Vec<f64>)> {
        let mut k = vec![0.0; x.len()];
        let mut loss = 0.0;
        for (j, &w) in self.weights.iter().enumerate() {
            let (l, g) = self.surface_grad(j, x, t)?;
            loss += w * l;
            k.iter_mut().zip(&g).for_each(|(a, b)| *a += w * b);
        }
        check_finite(&k, t)?;
        Ok((loss, k))
    }

    /// Fused loss without gradients (plain sources) or via [`Self::grad`].
    fn loss(&self, x: &[f64], t: usize) -> Result<f64> {
        if self.transform.is_none() {
            let mut loss = 0.0;
            for (s, &w) in self.surfaces.iter().zip(&self.weights) {
                loss += w * s.loss(x)?;
            }
            return Ok(loss);
        }
        Ok(self.grad(x, t)?.0)
    }
}

fn sign_step(x_adv: &[f64], dir: &[f64], step: f64, x: &[f64], eps: f64) -> Result<Vec<f64>> {
    let moved: Vec<f64> = x_adv.iter().zip(dir).map(|(a, d)| a + step * sign(*d)).collect();
    clip(&moved, x, eps)
}

fn l1(v: &[f64]) -> f64 {
    v.iter().map(|a| a.abs()).sum::<f64>().max(NORM_GUARD)
}

/// Runs `rule` for `cfg.iterations` steps and returns the adversarial waveform.
pub fn iterate(rule: UpdateRule, x: &[f64], src: &GradientSource<'_>, cfg: &AttackConfig) -> Result<Vec<f64>> {
    cfg.validate()?;
    let eps = cfg.epsilon;
    let out = match rule {
        UpdateRule::Ifgsm => {
            let mut x_adv = x.to_vec();
            for t in 0..cfg.iterations {
                let (_, g) = src.grad(&x_adv, t)?;
                x_adv = sign_step(&x_adv, &g, cfg.alpha, x, eps)?;
            }
            x_adv
        }
        UpdateRule::Mifgsm | UpdateRule::Nifgsm => {
            let mut x_adv = x.to_vec();
            let mut m = vec![0.0; x.len()];
            for t in 0..cfg.iterations {
                let (_, g) = if rule == UpdateRule::Nifgsm {
                    let x_nes: Vec<f64> = x_adv.iter().zip(&m).map(|(a, v)| a + cfg.alpha * cfg.mu * v).collect();
                    src.grad(&x_nes, t)?
                } else {
                    src.grad(&x_adv, t)?
                };
                let n = l1(&g);
                m.iter_mut().zip(&g).for_each(|(v, gi)| *v = cfg.mu * *v + gi / n);
                x_adv = sign_step(&x_adv, &m, cfg.alpha, x, eps)?;
            }
            x_adv
        }
        UpdateRule::Acg => acg_loop(x, src, cfg)?.x_adv,
    };
    check_ball(&out, x, eps)?;
    Ok(out)
}

/// Per-iteration record of an ACG run.
#[derive(Debug, Clone, PartialEq)]
pub struct AcgStep {
    pub beta: f64,
    pub eta: f64,
    pub loss_after: f64,
}

#[derive(Debug, Clone)]
pub struct AcgTrace {
    pub x_adv: Vec<f64>,
    pub best_loss: f64,
    pub steps: Vec<AcgStep>,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(p, q)| p * q).sum()
}

/// Hestenes-Stiefel coefficient for the ascent direction, 0 when the
/// denominator is within the guard.
pub fn beta_hs(g: &[f64], g_prev: &[f64], s_prev: &[f64]) -> f64 {
    let y: Vec<f64> = g_prev.iter().zip(g).map(|(a, b)| a - b).collect();
    let den = dot(s_prev, &y);
    if den.abs() <= NORM_GUARD {
        0.0
    } else {
        -dot(g, &y) / den
    }
}

/// Auto conjugate gradient ascent with best-iterate tracking.
pub fn acg_loop(x: &[f64], src: &GradientSource<'_>, cfg: &AttackConfig) -> Result<AcgTrace> {
    let eps = cfg.epsilon;
    let checkpoints = cfg.acg_checkpoints();
    let mut eta = cfg.eta0();
    let mut x_cur = x.to_vec();
    let (loss0, mut g) = src.grad(&x_cur, 0)?;
    let mut best = (loss0, x_cur.clone());
    let mut s_prev = vec![0.0; x.len()];
    let mut g_prev: Option<Vec<f64>> = None;
    let mut steps = Vec::with_capacity(cfg.iterations);
    for t in 0..cfg.iterations {
        let beta = g_prev.as_ref().map_or(0.0, |gp| beta_hs(&g, gp, &s_prev));
        let s: Vec<f64> = g.iter().zip(&s_prev).map(|(gi, si)| gi + beta * si).collect();
        let x_next = sign_step(&x_cur, &s, eta, x, eps)?;
        let done = t + 1;
        let (l_next, g_next) = if done == cfg.iterations {
            (src.loss(&x_next, done)?, Vec::new())
        } else {
            src.grad(&x_next, done)?
        };
        if !l_next.is_finite() {
            return Err(Error::NonFinite {
                context: "ACG loss",
                iteration: done,
            });
        }
        steps.push(AcgStep {
            beta,
            eta,
            loss_after: l_next,
        });
        let improved = l_next > best.0;
        if improved {
            best = (l_next, x_next.clone());
        }
        if !improved || checkpoints.contains(&done) {
            eta *= 0.5;
        }
        g_prev = Some(std::mem::replace(&mut g, g_next));
        s_prev = s;
        x_cur = x_next;
    }
    Ok(AcgTrace {
        x_adv: best.1,
        best_loss: best.0,
        steps,
    })
}

/// One-step attack `x + eps * sign(grad)`, range-clamped.
pub fn fgsm(x: &[f64], surface: &dyn LossSurface, eps: f64) -> Result<Vec<f64>> {
    if !(eps >= 0.0) {
        return Err(Error::InvalidArgument(format!("epsilon must be >= 0, got {eps}")));
    }
    let (_, g) = surface.loss_grad(x)?;
    check_finite(&g, 0)?;
    let out = sign_step(x, &g, eps, x, eps)?;
    check_ball(&out, x, eps)?;
    Ok(out)
}

pub fn ifgsm(x: &[f64], surface: &dyn LossSurface, cfg: &AttackConfig) -> Result<Vec<f64>> {
    iterate(UpdateRule::Ifgsm, x, &GradientSource::plain(surface), cfg)
}

pub fn mifgsm(x: &[f64], surface: &dyn LossSurface, cfg: &AttackConfig) -> Result<Vec<f64>> {
    iterate(UpdateRule::Mifgsm, x, &GradientSource::plain(surface), cfg)
}

pub fn nifgsm(x: &[f64], surface: &dyn LossSurface, cfg: &AttackConfig) -> Result<Vec<f64>> {
    iterate(UpdateRule::Nifgsm, x, &GradientSource::plain(surface), cfg)
}

pub fn acg(x: &[f64], surface: &dyn LossSurface, cfg: &AttackConfig) -> Result<Vec<f64>> {
    iterate(UpdateRule::Acg, x, &GradientSource::plain(surface), cfg)
}

fn transform_params(cfg: &AttackConfig, variant: TransformVariant) -> SpectrumTransformParams {
    SpectrumTransformParams {
        variant,
        ..cfg.transform
    }
}

/// Spectrum-transformation attack on one surrogate. The transform variant
/// comes from `cfg.transform.variant`.
pub fn sta_attack(x: &[f64], surface: &dyn LossSurface, cfg: &AttackConfig) -> Result<Vec<f64>> {
    ensemble_sta_attack(x, &[surface], &EnsembleSpec { weights: vec![1.0] }, cfg)
}

pub fn ensemble_sta_attack(
    x: &[f64],
    surfaces: &[&dyn LossSurface],
    ensemble: &EnsembleSpec,
    cfg: &AttackConfig,
) -> Result<Vec<f64>> {
    if surfaces.is_empty() {
        return Err(Error::InvalidArgument("empty ensemble".into()));
    }
    let src = GradientSource::transformed(surfaces.to_vec(), ensemble, cfg.transform, cfg.n_transforms, cfg.seed)?;
    iterate(cfg.sta_inner, x, &src, cfg)
}

/// Dispatches on `cfg.kind`. Several surfaces form a uniformly weighted
/// ensemble; plain attackers then fuse the raw gradients.
pub fn run_attack(x: &[f64], surfaces: &[&dyn LossSurface], cfg: &AttackConfig) -> Result<Vec<f64>> {
    if surfaces.is_empty() {
        return Err(Error::InvalidArgument("no surrogate models".into()));
    }
    let ens = EnsembleSpec::uniform(surfaces.len());
    let fused_plain = || -> Result<GradientSource<'_>> {
        if surfaces.len() == 1 {
            return Ok(GradientSource::plain(surfaces[0]));
        }
        Ok(GradientSource {
            surfaces: surfaces.to_vec(),
            weights: ens.weights.clone(),
            transform: None,
            seed: cfg.seed,
        })
    };
    match cfg.kind {
        AttackerKind::Fgsm => {
            if surfaces.len() == 1 {
                return fgsm(x, surfaces[0], cfg.epsilon);
            }
            let (_, g) = fused_plain()?.grad(x, 0)?;
            let out = sign_step(x, &g, cfg.epsilon, x, cfg.epsilon)?;
            check_ball(&out, x, cfg.epsilon)?;
            Ok(out)
        }
        AttackerKind::Ifgsm => iterate(UpdateRule::Ifgsm, x, &fused_plain()?, cfg),
        AttackerKind::Mifgsm => iterate(UpdateRule::Mifgsm, x, &fused_plain()?, cfg),
        AttackerKind::Nifgsm => iterate(UpdateRule::Nifgsm, x, &fused_plain()?, cfg),
        AttackerKind::Acg => iterate(UpdateRule::Acg, x, &fused_plain()?, cfg),
        AttackerKind::StaMdct | AttackerKind::StaDct => {
            let variant = if cfg.kind == AttackerKind::StaMdct {
                TransformVariant::Mdct
            } else {
                TransformVariant::Dct
            };
            let cfg = AttackConfig {
                transform: transform_params(cfg, variant),
                ..cfg.clone()
            };
            ensemble_sta_attack(x, surfaces, &ens, &cfg)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// `L(x) = <a, x> + 0.5 x^T Q x` with a symmetric `Q`.
    struct Quadratic {
        a: Vec<f64>,
        q: Vec<Vec<f64>>,
    }

    impl LossSurface for Quadratic {
        fn loss_grad(&self, x: &[f64]) -> Result<(f64, Vec<f64>)> {
            let qx: Vec<f64> = self.q.iter().map(|row| dot(row, x)).collect();
            let l = dot(&self.a, x) + 0.5 * dot(x, &qx);
            Ok((l, self.a.iter().zip(&qx).map(|(a, b)| a + b).collect()))
        }
    }

    fn linear(a: Vec<f64>) -> Quadratic {
        let n = a.len();
        Quadratic {
            a,
            q: vec![vec![0.0; n]; n],
        }
    }

    fn cfg(kind: AttackerKind) -> AttackConfig {
        AttackConfig {
            kind,
            ..Default::default()
        }
    }

    #[test]
    fn clip_contract() {
        let x = vec![0.0, 100.0, 32760.0];
        assert_eq!(
            clip(&[10.0, 90.0, 32765.0], &x, 40.0).unwrap(),
            vec![10.0, 90.0, 32765.0]
        );
        assert_eq!(
            clip(&[80.0, 180.0, 32840.0], &x, 40.0).unwrap(),
            vec![40.0, 140.0, 32767.0]
        );
        assert!(clip(&[0.0], &x, 40.0).is_err());
    }

    #[test]
    fn sign_of_zero_is_zero() {
        assert_eq!(sign(0.0), 0.0);
        assert_eq!(sign(-0.0), 0.0);
        assert_eq!(sign(-3.0), -1.0);
    }

    #[test]
    fn fgsm_on_linear_surface() {
        let s = linear(vec![1.0, -2.0, 0.0, 0.5]);
        let x = vec![10.0, 10.0, 10.0, 10.0];
        let out = fgsm(&x, &s, 40.0).unwrap();
        assert_eq!(out, vec![50.0, -30.0, 10.0, 50.0]);
        assert!(s.loss(&out).unwrap() >= s.loss(&x).unwrap());
        assert_eq!(fgsm(&x, &s, 0.0).unwrap(), x);
    }

    #[test]
    fn ifgsm_single_step_is_fgsm() {
        let s = linear(vec![1.0, -2.0, 0.0]);
        let x = vec![0.0; 3];
        let c = AttackConfig {
            iterations: 1,
            alpha: 40.0,
            ..cfg(AttackerKind::Ifgsm)
        };
        assert_eq!(ifgsm(&x, &s, &c).unwrap(), fgsm(&x, &s, 40.0).unwrap());
    }

    #[test]
    fn momentum_zero_is_ifgsm() {
        let s = Quadratic {
            a: vec![1.0, -1.0],
            q: vec![vec![-0.01, 0.002], vec![0.002, -0.03]],
        };
        let x = vec![3.0, -7.0];
        let c = AttackConfig {
            mu: 0.0,
            ..cfg(AttackerKind::Mifgsm)
        };
        assert_eq!(mifgsm(&x, &s, &c).unwrap(), ifgsm(&x, &s, &c).unwrap());
    }

    #[test]
    fn hestenes_stiefel_by_hand() {
        // g_prev = (1, 2), g = (3, -1), s_prev = (1, 1)
        // y = g_prev - g = (-2, 3); <s, y> = 1; <-g, y> = 6 + 3 = 9
        assert_eq!(beta_hs(&[3.0, -1.0], &[1.0, 2.0], &[1.0, 1.0]), 9.0);
        assert_eq!(beta_hs(&[1.0, 1.0], &[1.0, 1.0], &[1.0, 1.0]), 0.0);
    }

    #[test]
    fn acg_on_two_sample_quadratic() {
        // L = x0 - 2 x1 - 0.01 x0^2 - 0.02 x1^2 (concave)
        let s = Quadratic {
            a: vec![1.0, -2.0],
            q: vec![vec![-0.02, 0.0], vec![0.0, -0.04]],
        };
        let x = vec![0.0, 0.0];
        let c = AttackConfig {
            iterations: 4,
            ..cfg(AttackerKind::Acg)
        };
        let src = GradientSource::plain(&s);
        let trace = acg_loop(&x, &src, &c).unwrap();
        // first step: beta = 0, eta0 = 2 * 40 / 4 = 20, direction = raw gradient
        assert_eq!(trace.steps[0].beta, 0.0);
        assert_eq!(trace.steps[0].eta, 20.0);
        // x1 = (20, -20): g1 = (1 - 0.4, -2 + 0.8) = (0.6, -1.2), g0 = (1, -2), s0 = g0
        // y0 = (0.4, -0.8); beta = -<g1, y0> / <s0, y0> = -(0.24 + 0.96) / (0.4 + 1.6) = -0.6
        assert!((trace.steps[1].beta + 0.6).abs() < 1e-12);
        assert!(check_ball(&trace.x_adv, &x, 40.0).is_ok());
        let out = acg(&x, &s, &c).unwrap();
        assert_eq!(out, trace.x_adv);
    }

    #[test]
    fn acg_halving_schedule() {
        // monotone linear surface: every step improves, so only checkpoints halve
        let s = linear(vec![1.0, 1.0]);
        let c = AttackConfig {
            epsilon: 1000.0,
            iterations: 8,
            ..cfg(AttackerKind::Acg)
        };
        let trace = acg_loop(&[0.0, 0.0], &GradientSource::plain(&s), &c).unwrap();
        let etas: Vec<f64> = trace.steps.iter().map(|s| s.eta).collect();
        assert_eq!(c.acg_checkpoints(), [2, 4, 6]);
        assert_eq!(etas, vec![250.0, 250.0, 125.0, 125.0, 62.5, 62.5, 31.25, 31.25]);
        // a flat surface never improves, so eta halves every iteration
        let flat = linear(vec![0.0, 0.0]);
        let trace = acg_loop(&[0.0, 0.0], &GradientSource::plain(&flat), &c).unwrap();
        assert_eq!(trace.steps[3].eta, 250.0 / 8.0);
    }

    #[test]
    fn nan_gradient_aborts_with_iteration() {
        struct Nan;
        impl LossSurface for Nan {
            fn loss_grad(&self, x: &[f64]) -> Result<(f64, Vec<f64>)> {
                Ok((0.0, vec![f64::NAN; x.len()]))
            }
        }
        let err = ifgsm(&[0.0; 4], &Nan, &cfg(AttackerKind::Ifgsm)).unwrap_err();
        assert!(matches!(err, Error::NonFinite { iteration: 0, .. }));
    }

    #[test]
    fn config_from_key_values() {
        let kv = KeyValues::parse("attacker = acg\nepsilon = 20\niterations = 5\nseed = 9\n").unwrap();
        let c = AttackConfig::from_key_values(&kv).unwrap();
        assert_eq!(c.kind, AttackerKind::Acg);
        assert_eq!(c.alpha, 4.0);
        assert_eq!(c.eta0(), 8.0);
        assert_eq!(c.seed, 9);
        let back = AttackConfig::from_key_values(&c.to_key_values()).unwrap();
        assert_eq!(back.alpha, c.alpha);
        assert!(AttackConfig::from_key_values(&KeyValues::parse("bogus = 1").unwrap()).is_err());
        assert!(AttackConfig::from_key_values(&KeyValues::parse("epsilon = 0").unwrap()).is_err());
        let d = AttackConfig::default();
        assert_eq!(
            (d.epsilon, d.iterations, d.alpha, d.mu, d.n_transforms),
            (40.0, 10, 4.0, 1.0, 20)
        );
        assert_eq!((d.transform.sigma, d.transform.rho), (44.0, 0.75));
    }
}
