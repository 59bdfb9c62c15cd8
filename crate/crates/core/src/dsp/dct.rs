use super::kernel::CosineKernel;
use super::{SpectrumFrames, SpectrumKind};
use crate::{Error, Result};

/// Orthonormal DCT-II over non-overlapping frames of `W` samples; the tail is
/// zero padded to a whole frame. The inverse is the per-frame DCT-III followed
/// by cropping back to the signal length.
#[derive(Debug, Clone)]
pub struct FrameDct {
    frame_len: usize,
    kernel: CosineKernel,
    scale: Vec<f64>,
}

impl FrameDct {
    pub fn new(frame_len: usize) -> Result<Self> {
        if frame_len < 2 {
            return Err(Error::InvalidArgument(format!(
                "DCT frame length must be >= 2, got {frame_len}"
            )));
        }
        let kernel = CosineKernel::new(frame_len, frame_len, frame_len, 0.5, 0.0);
        let w = frame_len as f64;
        let scale = (0..frame_len)
            .map(|k| if k == 0 { (1.0 / w).sqrt() } else { (2.0 / w).sqrt() })
            .collect();
        Ok(Self {
            frame_len,
            kernel,
            scale,
        })
    }

    pub fn frame_len(&self) -> usize {
        self.frame_len
    }

    pub fn frame_count(&self, signal_len: usize) -> usize {
        signal_len.div_ceil(self.frame_len).max(1)
    }

    fn check_frames(&self, s: &SpectrumFrames) -> Result<()> {
        if s.bins != self.frame_len {
            return Err(Error::shape("DCT bins per frame", self.frame_len, s.bins));
        }
        let frames = self.frame_count(s.signal_len);
        if s.frames != frames || s.coeffs.len() != frames * s.bins {
            return Err(Error::shape("DCT frame grid", frames * s.bins, s.coeffs.len()));
        }
        Ok(())
    }

    pub fn forward(&self, x: &[f64]) -> Result<SpectrumFrames> {
        let frames = self.frame_count(x.len());
        let mut padded = vec![0.0; frames * self.frame_len];
        padded[..x.len()].copy_from_slice(x);
        let mut coeffs = vec![0.0; padded.len()];
        self.kernel.apply(&padded, &mut coeffs);
        for frame in coeffs.chunks_exact_mut(self.frame_len) {
            for (c, s) in frame.iter_mut().zip(&self.scale) {
                *c *= s;
            }
        }
        Ok(SpectrumFrames {
            frames,
            bins: self.frame_len,
            coeffs,
            signal_len: x.len(),
            kind: SpectrumKind::Dct,
        })
    }

    pub fn inverse(&self, s: &SpectrumFrames) -> Result<Vec<f64>> {
        self.check_frames(s)?;
        let mut scaled = s.coeffs.clone();
        for frame in scaled.chunks_exact_mut(self.frame_len) {
            for (c, sc) in frame.iter_mut().zip(&self.scale) {
                *c *= sc;
            }
        }
        let mut out = vec![0.0; scaled.len()];
        self.kernel.apply_transpose(&scaled, &mut out);
        out.truncate(s.signal_len);
        Ok(out)
    }

    /// The frame transform is orthonormal, so the adjoint of analysis
    /// (zero-pad then DCT-II) is synthesis (DCT-III then crop).
    pub fn forward_adjoint(&self, g: &SpectrumFrames) -> Result<Vec<f64>> {
        self.inverse(g)
    }

    pub fn inverse_adjoint(&self, g: &[f64]) -> Result<SpectrumFrames> {
        self.forward(g)
    }
}
