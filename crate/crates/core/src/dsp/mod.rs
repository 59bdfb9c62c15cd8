//! Windows, lapped and block cosine transforms, and the log-mel frontend.
//!
//! Every linear operator here exposes its exact transpose so gradients can be
//! pulled back through it.

mod dct;
mod kernel;
mod logmel;
mod mdct;
mod window;

use std::fmt::Write as _;

pub use dct::FrameDct;
pub use kernel::CosineKernel;
pub use logmel::{hz_to_mel, mel_to_hz, LogMel, LogMelCache, LogMelConfig, LOG_OFFSET, VAR_FLOOR};
pub use mdct::{imdct_scale, Mdct};
pub use window::{bessel_i0, hamming, kaiser, kbd_window, Window, WindowKind};

use crate::Result;

pub const DEFAULT_WINDOW_LEN: usize = 1024;
pub const DEFAULT_KBD_BETA: f64 = 4.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SpectrumKind {
    Mdct,
    Dct,
}

/// Frame-major coefficient grid (`frames x bins`).
#[derive(Debug, Clone, PartialEq)]
pub struct SpectrumFrames {
    pub frames: usize,
    pub bins: usize,
    pub coeffs: Vec<f64>,
    /// Length of the waveform the grid was computed from.
    pub signal_len: usize,
    pub kind: SpectrumKind,
}

impl SpectrumFrames {
    pub fn zeros_like(&self) -> Self {
        Self {
            coeffs: vec![0.0; self.coeffs.len()],
            ..self.clone()
        }
    }

    pub fn frame(&self, f: usize) -> &[f64] {
        &self.coeffs[f * self.bins..(f + 1) * self.bins]
    }

    pub fn to_csv(&self) -> String {
        grid_csv(&self.coeffs, self.bins)
    }
}

/// Frame-major feature grid (`frames x bands`).
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub frames: usize,
    pub bands: usize,
    pub data: Vec<f64>,
}

impl FeatureMap {
    pub fn get(&self, t: usize, b: usize) -> f64 {
        self.data[t * self.bands + b]
    }

    pub fn to_csv(&self) -> String {
        grid_csv(&self.data, self.bands)
    }
}

pub(crate) fn grid_csv(data: &[f64], cols: usize) -> String {
    let mut s = String::new();
    for row in data.chunks(cols.max(1)) {
        for (i, v) in row.iter().enumerate() {
            if i > 0 {
                s.push(',');
            }
            write!(s, "{v}").unwrap();
        }
        s.push('\n');
    }
    s
}

/// A linear time/frequency analysis-synthesis pair with explicit adjoints.
#[derive(Debug, Clone)]
pub enum Spectral {
    Mdct(Mdct),
    Dct(FrameDct),
}

impl Spectral {
    pub fn forward(&self, x: &[f64]) -> Result<SpectrumFrames> {
        match self {
            Spectral::Mdct(m) => m.forward(x),
            Spectral::Dct(d) => d.forward(x),
        }
    }

    pub fn inverse(&self, s: &SpectrumFrames) -> Result<Vec<f64>> {
        match self {
            Spectral::Mdct(m) => m.inverse(s),
            Spectral::Dct(d) => d.inverse(s),
        }
    }

    pub fn forward_adjoint(&self, g: &SpectrumFrames) -> Result<Vec<f64>> {
        match self {
            Spectral::Mdct(m) => m.forward_adjoint(g),
            Spectral::Dct(d) => d.forward_adjoint(g),
        }
    }

    pub fn inverse_adjoint(&self, g: &[f64]) -> Result<SpectrumFrames> {
        match self {
            Spectral::Mdct(m) => m.inverse_adjoint(g),
            Spectral::Dct(d) => d.inverse_adjoint(g),
        }
    }

    /// `(frames, bins)` of the grid produced for a signal of `len` samples.
    pub fn grid_shape(&self, len: usize) -> (usize, usize) {
        match self {
            Spectral::Mdct(m) => (m.frame_count(len), m.hop()),
            Spectral::Dct(d) => (d.frame_count(len), d.frame_len()),
        }
    }

    pub fn min_len(&self) -> usize {
        match self {
            Spectral::Mdct(m) => m.min_len(),
            Spectral::Dct(_) => 1,
        }
    }
}

#[cfg(test)]
mod tests;
