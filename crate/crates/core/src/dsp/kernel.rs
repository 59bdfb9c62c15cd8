//! FFT evaluation of cosine kernels
//! `K[k][n] = cos(pi (n + n0)(k + k0) / L)`.
//!
//! MDCT (`n0 = 1/2 + W/4`, `k0 = 1/2`, `L = W/2`) and DCT-II (`n0 = 1/2`,
//! `k0 = 0`, `L = W`) are both instances. `apply` computes `K y`, `apply_transpose`
//! computes `K^T X`; both go through one `2L`-point complex FFT.

use std::f64::consts::PI;
use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

#[derive(Clone)]
pub struct CosineKernel {
    n_in: usize,
    n_out: usize,
    fft: Arc<dyn Fft<f64>>,
    // e^{-i pi n k0 / L}
    in_twiddle: Vec<Complex<f64>>,
    // e^{-i pi n0 (k + k0) / L}
    out_twiddle: Vec<Complex<f64>>,
}

impl std::fmt::Debug for CosineKernel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("CosineKernel")
            .field("n_in", &self.n_in)
            .field("n_out", &self.n_out)
            .finish()
    }
}

impl CosineKernel {
    pub fn new(n_in: usize, n_out: usize, period: usize, n0: f64, k0: f64) -> Self {
        assert!(n_in <= 2 * period && n_out <= 2 * period);
        let l = period as f64;
        let fft = FftPlanner::new().plan_fft_forward(2 * period);
        let in_twiddle = (0..n_in.max(n_out))
            .map(|n| Complex::from_polar(1.0, -PI * n as f64 * k0 / l))
            .collect();
        let out_twiddle = (0..n_in.max(n_out))
            .map(|k| Complex::from_polar(1.0, -PI * n0 * (k as f64 + k0) / l))
            .collect();
        Self {
            n_in,
            n_out,
            fft,
            in_twiddle,
            out_twiddle,
        }
    }

    pub fn n_in(&self) -> usize {
        self.n_in
    }

    pub fn n_out(&self) -> usize {
        self.n_out
    }

    /// `out[k] = sum_n y[n] K[k][n]` for each of `frames` consecutive blocks.
    pub fn apply(&self, y: &[f64], out: &mut [f64]) {
        let frames = y.len() / self.n_in;
        debug_assert_eq!(y.len(), frames * self.n_in);
        debug_assert_eq!(out.len(), frames * self.n_out);
        let size = self.fft.len();
        let mut buf = vec![Complex::new(0.0, 0.0); size * frames];
        for f in 0..frames {
            let src = &y[f * self.n_in..(f + 1) * self.n_in];
            let dst = &mut buf[f * size..f * size + self.n_in];
            for ((d, &s), &tw) in dst.iter_mut().zip(src).zip(&self.in_twiddle) {
                *d = tw * s;
            }
        }
        if frames > 0 {
            self.fft.process(&mut buf);
        }
        for f in 0..frames {
            let spec = &buf[f * size..f * size + self.n_out];
            let dst = &mut out[f * self.n_out..(f + 1) * self.n_out];
            for ((d, s), &tw) in dst.iter_mut().zip(spec).zip(&self.out_twiddle) {
                *d = (tw * s).re;
            }
        }
    }

    /// `y[n] = sum_k x[k] K[k][n]` for each of `frames` consecutive blocks.
    pub fn apply_transpose(&self, x: &[f64], y: &mut [f64]) {
        let frames = x.len() / self.n_out;
        debug_assert_eq!(x.len(), frames * self.n_out);
        debug_assert_eq!(y.len(), frames * self.n_in);
        let size = self.fft.len();
        let mut buf = vec![Complex::new(0.0, 0.0); size * frames];
        for f in 0..frames {
            let src = &x[f * self.n_out..(f + 1) * self.n_out];
            let dst = &mut buf[f * size..f * size + self.n_out];
            for ((d, &s), &tw) in dst.iter_mut().zip(src).zip(&self.out_twiddle) {
                *d = tw * s;
            }
        }
        if frames > 0 {
            self.fft.process(&mut buf);
        }
        for f in 0..frames {
            let spec = &buf[f * size..f * size + self.n_in];
            let dst = &mut y[f * self.n_in..(f + 1) * self.n_in];
            for ((d, s), &tw) in dst.iter_mut().zip(spec).zip(&self.in_twiddle) {
                *d = (tw * s).re;
            }
        }
    }
}
