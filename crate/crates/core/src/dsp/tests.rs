use std::f64::consts::PI;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::*;
use crate::rng::seeded;

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn random_signal(rng: &mut crate::rng::Rng, len: usize, amp: f64) -> Vec<f64> {
    (0..len).map(|_| rng.random_range(-amp..amp)).collect()
}

/// Direct O(W^2) evaluation of one MDCT frame.
fn mdct_frame_direct(x: &[f64], h: &[f64]) -> Vec<f64> {
    let w = x.len();
    (0..w / 2)
        .map(|k| {
            (0..w)
                .map(|n| {
                    x[n] * h[n]
                        * ((2.0 * n as f64 + 1.0 + w as f64 / 2.0) * (2.0 * k as f64 + 1.0) * PI / (2.0 * w as f64))
                            .cos()
                })
                .sum()
        })
        .collect()
}

#[test]
fn mdct_rectangular_w8_matches_kernel_sum() {
    // x = ones(8) placed so that frame 1 covers signal samples 0..8 exactly
    let mdct = Mdct::new(Window::rectangular(8)).unwrap();
    let x: Vec<f64> = (0..16).map(|i| if i < 8 { 1.0 } else { (i * 7 % 5) as f64 }).collect();
    let s = mdct.forward(&x).unwrap();
    // frame f covers padded[4f..4f+8]; padded[p] = x[p-4] for 4 <= p < 20
    let expect = mdct_frame_direct(&x[0..8], &[1.0; 8]);
    for (a, b) in s.frame(1).iter().zip(&expect) {
        assert!((a - b).abs() < 1e-12, "{a} vs {b}");
    }
    // spot check k = 0 by hand: sum_n cos((2n+5) pi / 16)
    let k0: f64 = (0..8).map(|n| ((2 * n + 5) as f64 * PI / 16.0).cos()).sum();
    assert!((s.frame(1)[0] - k0).abs() < 1e-12);
}

#[test]
fn mdct_frames_match_direct_with_kbd() {
    let mdct = Mdct::with_kbd(64, 4.0).unwrap();
    let mut rng = seeded(11);
    let x = random_signal(&mut rng, 300, 1000.0);
    let s = mdct.forward(&x).unwrap();
    assert_eq!(s.bins, 32);
    assert_eq!(s.frames, mdct.frame_count(300));
    // interior frame f = 3 spans signal samples 32*3-32 .. +64
    let start = 3 * 32 - 32;
    let expect = mdct_frame_direct(&x[start..start + 64], &mdct.window().coeffs);
    for (a, b) in s.frame(3).iter().zip(&expect) {
        assert!((a - b).abs() < 1e-8 * b.abs().max(1.0));
    }
}

#[test]
fn mdct_zero_and_linearity() {
    let mdct = Mdct::with_kbd(DEFAULT_WINDOW_LEN, DEFAULT_KBD_BETA).unwrap();
    let s = mdct.forward(&[0.0; 3000]).unwrap();
    assert!(s.coeffs.iter().all(|&c| c == 0.0));
    assert!(mdct.inverse(&s).unwrap().iter().all(|&c| c == 0.0));
    let adj = mdct.forward_adjoint(&s).unwrap();
    assert!(adj.iter().all(|&c| c == 0.0));

    let mut rng = seeded(5);
    let x = random_signal(&mut rng, 3000, 3000.0);
    let y = random_signal(&mut rng, 3000, 3000.0);
    let (a, b) = (0.7, -2.3);
    let comb: Vec<f64> = x.iter().zip(&y).map(|(p, q)| a * p + b * q).collect();
    let sx = mdct.forward(&x).unwrap();
    let sy = mdct.forward(&y).unwrap();
    let sc = mdct.forward(&comb).unwrap();
    let norm = sc.coeffs.iter().map(|v| v * v).sum::<f64>().sqrt();
    let err = sc
        .coeffs
        .iter()
        .zip(sx.coeffs.iter().zip(&sy.coeffs))
        .map(|(c, (p, q))| (c - a * p - b * q).powi(2))
        .sum::<f64>()
        .sqrt();
    assert!(err < 1e-9 * norm);

    let scaled = SpectrumFrames {
        coeffs: sx.coeffs.iter().map(|v| 2.5 * v).collect(),
        ..sx.clone()
    };
    let r1 = mdct.inverse(&sx).unwrap();
    let r2 = mdct.inverse(&scaled).unwrap();
    for (p, q) in r1.iter().zip(&r2) {
        assert!((2.5 * p - q).abs() < 1e-9 * q.abs().max(1.0));
    }
}

#[test]
fn mdct_perfect_reconstruction() {
    let mut rng = seeded(17);
    for &w in &[8usize, 64, 1024] {
        let mdct = Mdct::with_kbd(w, 4.0).unwrap();
        for &len in &[w / 2 + 1, w, w + 3, 4096, 5000] {
            let x = random_signal(&mut rng, len, 32768.0);
            let r = mdct.inverse(&mdct.forward(&x).unwrap()).unwrap();
            let err = x.iter().zip(&r).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            assert!(err < 1e-6, "w={w} len={len} err={err}");
        }
    }
}

#[test]
fn mdct_adjoint_identities() {
    let mut rng = seeded(23);
    let mdct = Mdct::with_kbd(256, 4.0).unwrap();
    for &len in &[129usize, 256, 1000, 1537] {
        let x = random_signal(&mut rng, len, 1.0);
        let sx = mdct.forward(&x).unwrap();
        let ycoef = random_signal(&mut rng, sx.coeffs.len(), 1.0);
        let y = SpectrumFrames {
            coeffs: ycoef,
            ..sx.clone()
        };
        let lhs = dot(&sx.coeffs, &y.coeffs);
        let rhs = dot(&x, &mdct.forward_adjoint(&y).unwrap());
        assert!((lhs - rhs).abs() < 1e-9 * lhs.abs().max(1e-3));

        let s_rec = mdct.inverse(&y).unwrap();
        let g = random_signal(&mut rng, len, 1.0);
        let lhs = dot(&s_rec, &g);
        let rhs = dot(&y.coeffs, &mdct.inverse_adjoint(&g).unwrap().coeffs);
        assert!((lhs - rhs).abs() < 1e-9 * lhs.abs().max(1e-3));
    }
}

#[test]
fn mdct_shape_errors() {
    let mdct = Mdct::with_kbd(64, 4.0).unwrap();
    assert!(mdct.forward(&[1.0; 32]).is_err());
    assert!(mdct.forward(&[1.0; 33]).is_ok());
    let mut s = mdct.forward(&[1.0; 100]).unwrap();
    s.bins = 16;
    assert!(mdct.inverse(&s).is_err());
    assert!(Mdct::new(Window::rectangular(7)).is_err());
}

#[test]
fn imdct_scale_is_calibrated_on_an_impulse() {
    // least-squares fit of the synthesis constant on an impulse response
    let w = 128;
    let mdct = Mdct::with_kbd(w, 4.0).unwrap();
    let mut x = vec![0.0; 512];
    x[200] = 1.0;
    let r = mdct.inverse(&mdct.forward(&x).unwrap()).unwrap();
    let fitted = imdct_scale(w) * dot(&r, &x) / dot(&r, &r);
    assert!((fitted - imdct_scale(w)).abs() < 1e-12);
    assert!((fitted - 4.0 / w as f64).abs() < 1e-12);
}

#[test]
fn dct_roundtrip_parseval_dc() {
    let mut rng = seeded(29);
    let dct = FrameDct::new(64).unwrap();
    let x = random_signal(&mut rng, 64 * 5, 100.0);
    let s = dct.forward(&x).unwrap();
    let r = dct.inverse(&s).unwrap();
    for (a, b) in x.iter().zip(&r) {
        assert!((a - b).abs() < 1e-9);
    }
    let ex = dot(&x, &x).sqrt();
    let es = dot(&s.coeffs, &s.coeffs).sqrt();
    assert!((ex - es).abs() < 1e-9 * ex);

    let c = dct.forward(&[3.0; 64]).unwrap();
    assert!((c.coeffs[0] - 3.0 * 8.0).abs() < 1e-12);
    assert!(c.coeffs[1..].iter().all(|v| v.abs() < 1e-12));

    // tail padding
    let x = random_signal(&mut rng, 100, 1.0);
    let s = dct.forward(&x).unwrap();
    assert_eq!(s.frames, 2);
    let r = dct.inverse(&s).unwrap();
    assert_eq!(r.len(), 100);
    assert!(x.iter().zip(&r).all(|(a, b)| (a - b).abs() < 1e-12));
}

#[test]
fn dct_adjoint_identities() {
    let mut rng = seeded(31);
    let dct = FrameDct::new(32).unwrap();
    let x = random_signal(&mut rng, 77, 1.0);
    let sx = dct.forward(&x).unwrap();
    let y = SpectrumFrames {
        coeffs: random_signal(&mut rng, sx.coeffs.len(), 1.0),
        ..sx.clone()
    };
    let lhs = dot(&sx.coeffs, &y.coeffs);
    let rhs = dot(&x, &dct.forward_adjoint(&y).unwrap());
    assert!((lhs - rhs).abs() < 1e-9 * lhs.abs().max(1e-3));
    let g = random_signal(&mut rng, 77, 1.0);
    let lhs = dot(&dct.inverse(&y).unwrap(), &g);
    let rhs = dot(&y.coeffs, &dct.inverse_adjoint(&g).unwrap().coeffs);
    assert!((lhs - rhs).abs() < 1e-9 * lhs.abs().max(1e-3));
}

#[test]
fn logmel_cmvn_statistics_on_white_noise() {
    let lm = LogMel::new(LogMelConfig::default()).unwrap();
    let mut rng = seeded(37);
    let normal = Normal::new(0.0, 1000.0).unwrap();
    let x: Vec<f64> = (0..16000).map(|_| normal.sample(&mut rng)).collect();
    let (f, _) = lm.forward(&x).unwrap();
    assert_eq!(f.frames, 98);
    assert_eq!(f.bands, 40);
    for b in 0..40 {
        let mean = (0..f.frames).map(|t| f.get(t, b)).sum::<f64>() / f.frames as f64;
        let var = (0..f.frames).map(|t| (f.get(t, b) - mean).powi(2)).sum::<f64>() / f.frames as f64;
        assert!(mean.abs() < 1e-6);
        assert!((var - 1.0).abs() < 1e-3);
    }
}

#[test]
fn logmel_tone_lands_in_its_band() {
    let lm = LogMel::new(LogMelConfig::default()).unwrap();
    // Oracle: the band whose triangle peaks closest to 1 kHz on the mel axis.
    let mel_step = hz_to_mel(8000.0) / 41.0;
    let expect = ((hz_to_mel(1000.0) / mel_step).round() as usize) - 1;
    let x: Vec<f64> = (0..8000)
        .map(|n| 5000.0 * (2.0 * PI * 1000.0 * n as f64 / 16000.0).sin())
        .collect();
    let f = lm.log_mel(&x).unwrap();
    let avg: Vec<f64> = (0..40)
        .map(|b| (0..f.frames).map(|t| f.get(t, b)).sum::<f64>())
        .collect();
    let arg = (0..40).max_by(|&a, &b| avg[a].total_cmp(&avg[b])).unwrap();
    assert_eq!(arg, expect);
    assert!((lm.band_centers_hz()[expect] - 1000.0).abs() < 60.0);
}

#[test]
fn logmel_zero_input() {
    let lm = LogMel::new(LogMelConfig::default()).unwrap();
    let f = lm.log_mel(&[0.0; 800]).unwrap();
    assert!(f.data.iter().all(|&v| v == LOG_OFFSET.ln()));
    let (n, _) = lm.forward(&[0.0; 800]).unwrap();
    assert!(n.data.iter().all(|&v| v == 0.0));
    assert!(matches!(lm.forward(&[0.0; 399]), Err(crate::Error::TooShort { .. })));
}

#[test]
fn logmel_backward_matches_finite_differences() {
    let lm = LogMel::new(LogMelConfig::default()).unwrap();
    let mut rng = seeded(41);
    let x = random_signal(&mut rng, 1200, 2000.0);
    let (f, cache) = lm.forward(&x).unwrap();
    let up = random_signal(&mut rng, f.data.len(), 1.0);
    let g = lm.backward(&cache, &up).unwrap();
    let loss = |x: &[f64]| dot(&lm.forward(x).unwrap().0.data, &up);
    let mut fd = Vec::new();
    let mut an = Vec::new();
    for _ in 0..40 {
        let i = rng.random_range(0..x.len() - 40);
        let mut xp = x.clone();
        xp[i] += 1e-2;
        let mut xm = x.clone();
        xm[i] -= 1e-2;
        fd.push((loss(&xp) - loss(&xm)) / 2e-2);
        an.push(g[i]);
    }
    let err: f64 = fd.iter().zip(&an).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    let norm: f64 = an.iter().map(|a| a * a).sum::<f64>().sqrt();
    assert!(err < 1e-5 * norm, "rel {}", err / norm);
}

#[test]
fn csv_is_frame_major() {
    let f = FeatureMap {
        frames: 2,
        bands: 3,
        data: vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.5],
    };
    assert_eq!(f.to_csv(), "1,2,3\n4,5,6.5\n");
}
