use std::f64::consts::PI;

use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WindowKind {
    KaiserBesselDerived,
    Hamming,
    Rectangular,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Window {
    pub kind: WindowKind,
    pub coeffs: Vec<f64>,
}

impl Window {
    pub fn len(&self) -> usize {
        self.coeffs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coeffs.is_empty()
    }

    /// Largest deviation from `h(n)^2 + h(n + W/2)^2 = 1` over the first half.
    pub fn princen_bradley_error(&self) -> f64 {
        let half = self.len() / 2;
        (0..half)
            .map(|n| (self.coeffs[n].powi(2) + self.coeffs[n + half].powi(2) - 1.0).abs())
            .fold(0.0, f64::max)
    }

    pub fn rectangular(len: usize) -> Self {
        Window {
            kind: WindowKind::Rectangular,
            coeffs: vec![1.0; len],
        }
    }
}

/// Zeroth-order modified Bessel function of the first kind (power series).
pub fn bessel_i0(x: f64) -> f64 {
    let q = x * x / 4.0;
    let mut term = 1.0;
    let mut sum = 1.0;
    let mut k = 1.0;
    loop {
        term *= q / (k * k);
        sum += term;
        if term < sum * 1e-17 {
            break;
        }
        k += 1.0;
    }
    sum
}

/// Symmetric Kaiser window of `len` points.
pub fn kaiser(len: usize, beta: f64) -> Vec<f64> {
    if len == 1 {
        return vec![1.0];
    }
    let m = (len - 1) as f64;
    let denom = bessel_i0(beta);
    (0..len)
        .map(|n| {
            let r = 2.0 * n as f64 / m - 1.0;
            bessel_i0(beta * (1.0 - r * r).max(0.0).sqrt()) / denom
        })
        .collect()
}

/// Kaiser-Bessel-derived window of even length `len`.
///
/// The first half is the square root of the normalised running sum of a
/// `len/2 + 1` point Kaiser window; the second half mirrors it.
pub fn kbd_window(len: usize, beta: f64) -> Result<Window> {
    if len < 4 || !len.is_multiple_of(2) {
        return Err(Error::InvalidArgument(format!(
            "KBD window length must be even and >= 4, got {len}"
        )));
    }
    if !(beta >= 0.0 && beta.is_finite()) {
        return Err(Error::InvalidArgument(format!("KBD beta must be >= 0, got {beta}")));
    }
    let half = len / 2;
    let k = kaiser(half + 1, beta);
    let total: f64 = k.iter().sum();
    let mut coeffs = vec![0.0; len];
    let mut acc = 0.0;
    for n in 0..half {
        acc += k[n];
        let v = (acc / total).sqrt();
        coeffs[n] = v;
        coeffs[len - 1 - n] = v;
    }
    Ok(Window {
        kind: WindowKind::KaiserBesselDerived,
        coeffs,
    })
}

/// Symmetric Hamming window.
pub fn hamming(len: usize) -> Window {
    let coeffs = if len == 1 {
        vec![1.0]
    } else {
        let m = (len - 1) as f64;
        (0..len)
            .map(|n| 0.54 - 0.46 * (2.0 * PI * n as f64 / m).cos())
            .collect()
    };
    Window {
        kind: WindowKind::Hamming,
        coeffs,
    }
}
