use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use super::window::{hamming, Window};
use super::FeatureMap;
use crate::audio::SAMPLE_RATE;
use crate::{Error, Result};

pub const LOG_OFFSET: f64 = 1e-6;
pub const VAR_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogMelConfig {
    pub frame_len: usize,
    pub hop: usize,
    pub n_mels: usize,
    pub f_min: f64,
    pub f_max: f64,
}

impl Default for LogMelConfig {
    /// 25 ms Hamming frames every 10 ms, 40 bands over 0-8 kHz.
    fn default() -> Self {
        Self {
            frame_len: 400,
            hop: 160,
            n_mels: 40,
            f_min: 0.0,
            f_max: 8000.0,
        }
    }
}

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Differentiable log-mel frontend with per-utterance CMVN.
#[derive(Clone)]
pub struct LogMel {
    cfg: LogMelConfig,
    window: Window,
    fft: Arc<dyn Fft<f64>>,
    ifft: Arc<dyn Fft<f64>>,
    n_bins: usize,
    // (first bin, weights) per band
    filters: Vec<(usize, Vec<f64>)>,
    centers_hz: Vec<f64>,
}

impl std::fmt::Debug for LogMel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("LogMel").field("cfg", &self.cfg).finish()
    }
}

/// Intermediate values kept for the backward pass.
#[derive(Debug, Clone)]
pub struct LogMelCache {
    spectra: Vec<Complex<f64>>,
    mags: Vec<f64>,
    mel: Vec<f64>,
    normalized: Vec<f64>,
    inv_std: Vec<f64>,
    floored: Vec<bool>,
    frames: usize,
    signal_len: usize,
}

impl LogMel {
    pub fn new(cfg: LogMelConfig) -> Result<Self> {
        if cfg.frame_len < 2 || cfg.hop == 0 || cfg.n_mels == 0 || cfg.f_max <= cfg.f_min {
            return Err(Error::InvalidArgument(format!("bad log-mel config {cfg:?}")));
        }
        let mut planner = FftPlanner::new();
        let fft = planner.plan_fft_forward(cfg.frame_len);
        let ifft = planner.plan_fft_inverse(cfg.frame_len);
        let n_bins = cfg.frame_len / 2 + 1;
        let bin_hz = SAMPLE_RATE as f64 / cfg.frame_len as f64;
        let (mlo, mhi) = (hz_to_mel(cfg.f_min), hz_to_mel(cfg.f_max));
        let edges: Vec<f64> = (0..cfg.n_mels + 2)
            .map(|i| mel_to_hz(mlo + (mhi - mlo) * i as f64 / (cfg.n_mels + 1) as f64))
            .collect();
        let mut filters = Vec::with_capacity(cfg.n_mels);
        for b in 0..cfg.n_mels {
            let (lo, c, hi) = (edges[b], edges[b + 1], edges[b + 2]);
            let weights: Vec<(usize, f64)> = (0..n_bins)
                .filter_map(|k| {
                    let f = k as f64 * bin_hz;
                    let w = ((f - lo) / (c - lo)).min((hi - f) / (hi - c));
                    (w > 0.0).then_some((k, w))
                })
                .collect();
            if weights.is_empty() {
                return Err(Error::InvalidArgument(format!(
                    "mel band {b} ({lo:.1}-{hi:.1} Hz) covers no DFT bin"
                )));
            }
            let first = weights[0].0;
            let dense = (first..=weights.last().unwrap().0)
                .map(|k| weights.iter().find(|(j, _)| *j == k).map_or(0.0, |w| w.1))
                .collect();
            filters.push((first, dense));
        }
        Ok(Self {
            window: hamming(cfg.frame_len),
            fft,
            ifft,
            n_bins,
            filters,
            centers_hz: edges[1..=cfg.n_mels].to_vec(),
            cfg,
        })
    }

    pub fn config(&self) -> &LogMelConfig {
        &self.cfg
    }

    pub fn n_mels(&self) -> usize {
        self.cfg.n_mels
    }

    pub fn band_centers_hz(&self) -> &[f64] {
        &self.centers_hz
    }

    /// Filter weight of band `b` at DFT bin `k`.
    pub fn filter_weight(&self, b: usize, k: usize) -> f64 {
        let (first, w) = &self.filters[b];
        if k < *first {
            0.0
        } else {
            w.get(k - first).copied().unwrap_or(0.0)
        }
    }

    pub fn frame_count(&self, signal_len: usize) -> usize {
        if signal_len < self.cfg.frame_len {
            0
        } else {
            1 + (signal_len - self.cfg.frame_len) / self.cfg.hop
        }
    }

    /// Log-mel energies before normalisation, `frames x bands`.
    pub fn log_mel(&self, x: &[f64]) -> Result<FeatureMap> {
        let (mel, frames, _, _) = self.mel_energies(x)?;
        Ok(FeatureMap {
            frames,
            bands: self.cfg.n_mels,
            data: mel.iter().map(|m| (m + LOG_OFFSET).ln()).collect(),
        })
    }

    #[allow(clippy::type_complexity)]
    fn mel_energies(&self, x: &[f64]) -> Result<(Vec<f64>, usize, Vec<Complex<f64>>, Vec<f64>)> {
        let frames = self.frame_count(x.len());
        if frames == 0 {
            return Err(Error::TooShort {
                context: "log-mel frontend",
                needed: self.cfg.frame_len,
                actual: x.len(),
            });
        }
        let n = self.cfg.frame_len;
        let mut buf = vec![Complex::new(0.0, 0.0); frames * n];
        for t in 0..frames {
            let src = &x[t * self.cfg.hop..t * self.cfg.hop + n];
            for ((d, &s), &h) in buf[t * n..(t + 1) * n].iter_mut().zip(src).zip(&self.window.coeffs) {
                *d = Complex::new(s * h, 0.0);
            }
        }
        self.fft.process(&mut buf);
        let nb = self.n_bins;
        let mut spectra = Vec::with_capacity(frames * nb);
        for t in 0..frames {
            spectra.extend_from_slice(&buf[t * n..t * n + nb]);
        }
        let mags: Vec<f64> = spectra.iter().map(|c| c.norm()).collect();
        let nm = self.cfg.n_mels;
        let mut mel = vec![0.0; frames * nm];
        for t in 0..frames {
            let row = &mags[t * nb..(t + 1) * nb];
            for (b, (first, w)) in self.filters.iter().enumerate() {
                mel[t * nm + b] = w.iter().zip(&row[*first..]).map(|(a, m)| a * m).sum();
            }
        }
        Ok((mel, frames, spectra, mags))
    }

    pub fn forward(&self, x: &[f64]) -> Result<(FeatureMap, LogMelCache)> {
        let (mel, frames, spectra, mags) = self.mel_energies(x)?;
        let nm = self.cfg.n_mels;
        let mut z: Vec<f64> = mel.iter().map(|m| (m + LOG_OFFSET).ln()).collect();
        let mut inv_std = vec![0.0; nm];
        let mut floored = vec![false; nm];
        let tf = frames as f64;
        for b in 0..nm {
            let mean = (0..frames).map(|t| z[t * nm + b]).sum::<f64>() / tf;
            let var = (0..frames).map(|t| (z[t * nm + b] - mean).powi(2)).sum::<f64>() / tf;
            floored[b] = var < VAR_FLOOR;
            inv_std[b] = 1.0 / var.max(VAR_FLOOR).sqrt();
            for t in 0..frames {
                let v = &mut z[t * nm + b];
                *v = (*v - mean) * inv_std[b];
            }
        }
        let feats = FeatureMap {
            frames,
            bands: nm,
            data: z.clone(),
        };
        Ok((
            feats,
            LogMelCache {
                spectra,
                mags,
                mel,
                normalized: z,
                inv_std,
                floored,
                frames,
                signal_len: x.len(),
            },
        ))
    }

    /// Backpropagates `d loss / d features` to the waveform samples.
    pub fn backward(&self, cache: &LogMelCache, grad: &[f64]) -> Result<Vec<f64>> {
        let frames = cache.frames;
        let nm = self.cfg.n_mels;
        if grad.len() != frames * nm {
            return Err(Error::shape("log-mel backward", frames * nm, grad.len()));
        }
        let tf = frames as f64;
        // CMVN
        let mut dz = vec![0.0; frames * nm];
        for b in 0..nm {
            let mean_dy = (0..frames).map(|t| grad[t * nm + b]).sum::<f64>() / tf;
            let mean_dy_y = if cache.floored[b] {
                0.0
            } else {
                (0..frames)
                    .map(|t| grad[t * nm + b] * cache.normalized[t * nm + b])
                    .sum::<f64>()
                    / tf
            };
            for t in 0..frames {
                let i = t * nm + b;
                dz[i] = cache.inv_std[b] * (grad[i] - mean_dy - cache.normalized[i] * mean_dy_y);
            }
        }
        // log, filterbank, magnitude
        let nb = self.n_bins;
        let n = self.cfg.frame_len;
        let mut buf = vec![Complex::new(0.0, 0.0); frames * n];
        for t in 0..frames {
            let mut dmag = vec![0.0; nb];
            for (b, (first, w)) in self.filters.iter().enumerate() {
                let dmel = dz[t * nm + b] / (cache.mel[t * nm + b] + LOG_OFFSET);
                for (d, a) in dmag[*first..].iter_mut().zip(w) {
                    *d += a * dmel;
                }
            }
            for k in 0..nb {
                let m = cache.mags[t * nb + k];
                if m > 0.0 {
                    buf[t * n + k] = cache.spectra[t * nb + k] * (dmag[k] / m);
                }
            }
        }
        // d/du_n = Re sum_k G_k e^{+2 pi i k n / N}
        self.ifft.process(&mut buf);
        let mut dx = vec![0.0; cache.signal_len];
        for t in 0..frames {
            let off = t * self.cfg.hop;
            for (j, (&h, g)) in self.window.coeffs.iter().zip(&buf[t * n..(t + 1) * n]).enumerate() {
                dx[off + j] += h * g.re;
            }
        }
        Ok(dx)
    }
}
