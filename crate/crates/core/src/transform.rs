//! Stochastic spectrum transformation `T(x) = inv(fwd(x + noise) * mask)`.
//!
//! `noise` is i.i.d. Gaussian with standard deviation `sigma` on the sample
//! scale and `mask` is i.i.d. uniform on `[1 - rho, 1 + rho]`, one value per
//! (frame, bin) cell. `fwd`/`inv` are the lapped MDCT pair by default or the
//! block DCT for the comparison variant. Given a fixed draw, `T` is affine in
//! `x` and its Jacobian transpose is `fwd^T (mask * inv^T g)`.

use rand_distr::{Distribution, Normal, Uniform};

use crate::dsp::{FrameDct, Mdct, Spectral, SpectrumFrames, DEFAULT_KBD_BETA, DEFAULT_WINDOW_LEN};
use crate::rng::seeded;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TransformVariant {
    Mdct,
    Dct,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpectrumTransformParams {
    pub sigma: f64,
    pub rho: f64,
    pub window_len: usize,
    pub kbd_beta: f64,
    pub variant: TransformVariant,
}

impl Default for SpectrumTransformParams {
    fn default() -> Self {
        Self {
            sigma: 44.0,
            rho: 0.75,
            window_len: DEFAULT_WINDOW_LEN,
            kbd_beta: DEFAULT_KBD_BETA,
            variant: TransformVariant::Mdct,
        }
    }
}

impl SpectrumTransformParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "sigma must be >= 0, got {}",
                self.sigma
            )));
        }
        if !(0.0..1.0).contains(&self.rho) {
            return Err(Error::InvalidArgument(format!(
                "rho must be in [0, 1), got {}",
                self.rho
            )));
        }
        Ok(())
    }

    /// With no noise and a unit mask the transform is the identity map.
    pub fn is_identity(&self) -> bool {
        self.sigma == 0.0 && self.rho == 0.0
    }
}

/// One draw of the random quantities of the transform.
#[derive(Debug, Clone, PartialEq)]
pub struct TransformSample {
    pub noise: Vec<f64>,
    pub mask: Vec<f64>,
    pub frames: usize,
    pub bins: usize,
}

#[derive(Debug, Clone)]
pub struct SpectrumTransform {
    params: SpectrumTransformParams,
    spectral: Spectral,
}

impl SpectrumTransform {
    pub fn new(params: SpectrumTransformParams) -> Result<Self> {
        params.validate()?;
        let spectral = match params.variant {
            TransformVariant::Mdct => Spectral::Mdct(Mdct::with_kbd(params.window_len, params.kbd_beta)?),
            TransformVariant::Dct => Spectral::Dct(FrameDct::new(params.window_len)?),
        };
        Ok(Self { params, spectral })
    }

    pub fn params(&self) -> &SpectrumTransformParams {
        &self.params
    }

    pub fn spectral(&self) -> &Spectral {
        &self.spectral
    }

    /// Draws noise and mask for an input of `len` samples. Same seed, same draw.
    pub fn sample(&self, seed: u64, len: usize) -> TransformSample {
        let (frames, bins) = self.spectral.grid_shape(len);
        let mut rng = seeded(seed);
        let noise = if self.params.sigma == 0.0 {
            vec![0.0; len]
        } else {
            let normal = Normal::new(0.0, self.params.sigma).expect("validated sigma");
            (0..len).map(|_| normal.sample(&mut rng)).collect()
        };
        let rho = self.params.rho;
        let mask = if rho == 0.0 {
            vec![1.0; frames * bins]
        } else {
            let uniform = Uniform::new_inclusive(1.0 - rho, 1.0 + rho).expect("validated rho");
            (0..frames * bins).map(|_| uniform.sample(&mut rng)).collect()
        };
        TransformSample {
            noise,
            mask,
            frames,
            bins,
        }
    }

    fn check(&self, len: usize, s: &TransformSample) -> Result<()> {
        if s.noise.len() != len {
            return Err(Error::shape("transform noise length", len, s.noise.len()));
        }
        let (frames, bins) = self.spectral.grid_shape(len);
        if s.frames != frames || s.bins != bins || s.mask.len() != frames * bins {
            return Err(Error::shape("transform mask grid", frames * bins, s.mask.len()));
        }
        Ok(())
    }

    fn masked(&self, spec: &mut SpectrumFrames, s: &TransformSample) {
        for (c, m) in spec.coeffs.iter_mut().zip(&s.mask) {
            *c *= m;
        }
    }

    /// `inv(fwd(x + noise) * mask)`; the result is not clamped.
    pub fn apply(&self, x: &[f64], s: &TransformSample) -> Result<Vec<f64>> {
        self.check(x.len(), s)?;
        let noisy: Vec<f64> = x.iter().zip(&s.noise).map(|(a, b)| a + b).collect();
        let mut spec = self.spectral.forward(&noisy)?;
        self.masked(&mut spec, s);
        self.spectral.inverse(&spec)
    }

    /// The linear part `inv(fwd(x) * mask)`, i.e. `apply` without the noise.
    pub fn apply_linear(&self, x: &[f64], s: &TransformSample) -> Result<Vec<f64>> {
        self.check(x.len(), s)?;
        let mut spec = self.spectral.forward(x)?;
        self.masked(&mut spec, s);
        self.spectral.inverse(&spec)
    }

    /// Pulls a gradient w.r.t. `apply(x, s)` back to `x`.
    pub fn apply_adjoint(&self, g: &[f64], s: &TransformSample) -> Result<Vec<f64>> {
        self.check(g.len(), s)?;
        let mut spec = self.spectral.inverse_adjoint(g)?;
        self.masked(&mut spec, s);
        self.spectral.forward_adjoint(&spec)
    }
}
