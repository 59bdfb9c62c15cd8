use super::kernel::CosineKernel;
use super::window::{kbd_window, Window};
use super::{SpectrumFrames, SpectrumKind};
use crate::{Error, Result};

/// Lapped MDCT with 50% overlap and reflect padding of `W/2` on both ends.
///
/// The padded signal is laid out in blocks of `hop = W/2` samples:
/// block 0 is the left reflection, blocks `1..=ceil(L/hop)` carry the signal
/// (the last one possibly partial, continued by the right reflection and then
/// zeros), and one trailing block completes the final frame. Frame `f` spans
/// blocks `f` and `f + 1`, so every signal sample is covered by two frames and
/// overlap-add cancels the time-domain aliasing exactly.
#[derive(Debug, Clone)]
pub struct Mdct {
    window: Window,
    kernel: CosineKernel,
}

/// Constant in front of the synthesis sum. With a Princen-Bradley window and
/// the unnormalised analysis sum, `4/W` gives exact overlap-add reconstruction.
pub fn imdct_scale(window_len: usize) -> f64 {
    4.0 / window_len as f64
}

impl Mdct {
    pub fn new(window: Window) -> Result<Self> {
        let w = window.len();
        if w < 4 || !w.is_multiple_of(2) {
            return Err(Error::InvalidArgument(format!(
                "MDCT window length must be even and >= 4, got {w}"
            )));
        }
        let n0 = 0.5 + w as f64 / 4.0;
        let kernel = CosineKernel::new(w, w / 2, w / 2, n0, 0.5);
        Ok(Self { window, kernel })
    }

    pub fn with_kbd(window_len: usize, beta: f64) -> Result<Self> {
        Self::new(kbd_window(window_len, beta)?)
    }

    pub fn window(&self) -> &Window {
        &self.window
    }

    pub fn window_len(&self) -> usize {
        self.window.len()
    }

    pub fn hop(&self) -> usize {
        self.window.len() / 2
    }

    pub fn min_len(&self) -> usize {
        self.hop() + 1
    }

    pub fn frame_count(&self, signal_len: usize) -> usize {
        signal_len.div_ceil(self.hop()) + 1
    }

    fn padded_len(&self, signal_len: usize) -> usize {
        (self.frame_count(signal_len) + 1) * self.hop()
    }

    /// Source sample for each padded position (`None` = zero fill).
    fn pad_source(&self, p: usize, signal_len: usize) -> Option<usize> {
        let hop = self.hop();
        if p < hop {
            Some(hop - p)
        } else if p < hop + signal_len {
            Some(p - hop)
        } else {
            let j = p - hop - signal_len;
            (j < hop).then(|| signal_len - 2 - j)
        }
    }

    fn check_len(&self, signal_len: usize) -> Result<()> {
        if signal_len < self.min_len() {
            return Err(Error::TooShort {
                context: "MDCT reflect padding",
                needed: self.min_len(),
                actual: signal_len,
            });
        }
        Ok(())
    }

    fn check_frames(&self, s: &SpectrumFrames) -> Result<()> {
        if s.bins != self.hop() {
            return Err(Error::shape("iMDCT bins per frame", self.hop(), s.bins));
        }
        if s.frames != self.frame_count(s.signal_len) {
            return Err(Error::shape(
                "iMDCT frame count",
                self.frame_count(s.signal_len),
                s.frames,
            ));
        }
        if s.coeffs.len() != s.frames * s.bins {
            return Err(Error::shape(
                "iMDCT coefficient grid",
                s.frames * s.bins,
                s.coeffs.len(),
            ));
        }
        Ok(())
    }

    fn windowed_frames(&self, padded: &[f64], frames: usize, scale: f64) -> Vec<f64> {
        let w = self.window_len();
        let hop = self.hop();
        let mut y = vec![0.0; frames * w];
        for f in 0..frames {
            let src = &padded[f * hop..f * hop + w];
            for ((d, &s), &h) in y[f * w..(f + 1) * w].iter_mut().zip(src).zip(&self.window.coeffs) {
                *d = scale * h * s;
            }
        }
        y
    }

    fn overlap_add(&self, frames_time: &[f64], frames: usize, scale: f64, out: &mut [f64]) {
        let w = self.window_len();
        let hop = self.hop();
        for f in 0..frames {
            let src = &frames_time[f * w..(f + 1) * w];
            for ((d, &s), &h) in out[f * hop..f * hop + w].iter_mut().zip(src).zip(&self.window.coeffs) {
                *d += scale * h * s;
            }
        }
    }

    fn frames_of(&self, coeffs: Vec<f64>, signal_len: usize) -> SpectrumFrames {
        SpectrumFrames {
            frames: self.frame_count(signal_len),
            bins: self.hop(),
            coeffs,
            signal_len,
            kind: SpectrumKind::Mdct,
        }
    }

    pub fn forward(&self, x: &[f64]) -> Result<SpectrumFrames> {
        self.check_len(x.len())?;
        let padded: Vec<f64> = (0..self.padded_len(x.len()))
            .map(|p| self.pad_source(p, x.len()).map_or(0.0, |i| x[i]))
            .collect();
        let frames = self.frame_count(x.len());
        let y = self.windowed_frames(&padded, frames, 1.0);
        let mut coeffs = vec![0.0; frames * self.hop()];
        self.kernel.apply(&y, &mut coeffs);
        Ok(self.frames_of(coeffs, x.len()))
    }

    pub fn inverse(&self, s: &SpectrumFrames) -> Result<Vec<f64>> {
        self.check_frames(s)?;
        let mut t = vec![0.0; s.frames * self.window_len()];
        self.kernel.apply_transpose(&s.coeffs, &mut t);
        let mut padded = vec![0.0; self.padded_len(s.signal_len)];
        self.overlap_add(&t, s.frames, imdct_scale(self.window_len()), &mut padded);
        let hop = self.hop();
        Ok(padded[hop..hop + s.signal_len].to_vec())
    }

    /// Transpose of [`Mdct::forward`], including the reflect padding.
    pub fn forward_adjoint(&self, g: &SpectrumFrames) -> Result<Vec<f64>> {
        self.check_frames(g)?;
        let mut t = vec![0.0; g.frames * self.window_len()];
        self.kernel.apply_transpose(&g.coeffs, &mut t);
        let mut padded = vec![0.0; self.padded_len(g.signal_len)];
        self.overlap_add(&t, g.frames, 1.0, &mut padded);
        let mut out = vec![0.0; g.signal_len];
        for (p, v) in padded.iter().enumerate() {
            if let Some(i) = self.pad_source(p, g.signal_len) {
                out[i] += v;
            }
        }
        Ok(out)
    }

    /// Transpose of [`Mdct::inverse`], including overlap-add and cropping.
    pub fn inverse_adjoint(&self, g: &[f64]) -> Result<SpectrumFrames> {
        self.check_len(g.len())?;
        let hop = self.hop();
        let mut padded = vec![0.0; self.padded_len(g.len())];
        padded[hop..hop + g.len()].copy_from_slice(g);
        let frames = self.frame_count(g.len());
        let y = self.windowed_frames(&padded, frames, imdct_scale(self.window_len()));
        let mut coeffs = vec![0.0; frames * hop];
        self.kernel.apply(&y, &mut coeffs);
        Ok(self.frames_of(coeffs, g.len()))
    }
}
