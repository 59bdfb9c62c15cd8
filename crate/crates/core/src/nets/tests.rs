use std::f64::consts::PI;

use rand::Rng;

use super::*;
use crate::rng::seeded;

fn voice_like(seed: u64, len: usize) -> Vec<f64> {
    let mut rng = seeded(seed);
    let f: [f64; 3] = [180.0 + rng.random_range(0.0..50.0), 700.0, 2300.0];
    (0..len)
        .map(|n| {
            let t = n as f64 / 16000.0;
            f.iter().map(|fi| 1500.0 * (2.0 * PI * fi * t).sin()).sum::<f64>() + rng.random_range(-300.0..300.0)
        })
        .collect()
}

fn tiny_frame_net() -> EmbeddingModel {
    let arch = Architecture::FrameNetB {
        frame_len: 2,
        hop: 2,
        hidden: vec![2],
        embedding_dim: 2,
        input_scale: 1.0,
    };
    let params = vec![
        1.0, 1.0, 1.0, -1.0, // fc1.weight
        0.0, 2.0, // fc1.bias
        1.0, 0.0, -1.0, 0.0, 0.0, 1.0, 1.0, 0.0, // head.weight
        0.0, 1.0, // head.bias
    ];
    EmbeddingModel::from_params(arch, params).unwrap()
}

#[test]
fn pencil_forward_on_four_samples() {
    // frames [1,2], [3,4]; hidden [3,1], [7,1]; pooled [5,1 | 2,floor];
    // z = [5 - 2, 1 + 2 + 1] = [3, 4]; e = [0.6, 0.8]
    let m = tiny_frame_net();
    let (e, cache) = m.forward(&[1.0, 2.0, 3.0, 4.0]).unwrap();
    assert!((e[0] - 0.6).abs() < 1e-15 && (e[1] - 0.8).abs() < 1e-15);
    assert_eq!(cache.layer("fc1").unwrap().output, vec![3.0, 7.0, 1.0, 1.0]);
    assert_eq!(
        cache.layer("pool").unwrap().output,
        vec![5.0, 1.0, 2.0, layers::STD_FLOOR]
    );
}

#[test]
fn pencil_backward_on_four_samples() {
    // d<u,e>/dx for u = [1, 0]: de/dz = (I - e e^T)/|z| u = [0.64, -0.48] / 5
    let m = tiny_frame_net();
    let (_, cache) = m.forward(&[1.0, 2.0, 3.0, 4.0]).unwrap();
    let g = m.input_gradient(&cache, &[1.0, 0.0]).unwrap();
    let dz = [0.64 / 5.0, -0.48 / 5.0];
    // dpooled = W^T dz; only mean_0 and std_0 feed fc1 channel 0 (channel 1 std is floored)
    let dmean0 = dz[0];
    let dstd0 = -dz[0] + dz[1];
    let dmean1 = dz[1];
    // channel 0 activations [3, 7], mean 5, std 2
    let dh0 = [
        dmean0 / 2.0 + dstd0 * (3.0 - 5.0) / (2.0 * 2.0),
        dmean0 / 2.0 + dstd0 * (7.0 - 5.0) / 4.0,
    ];
    let dh1 = [dmean1 / 2.0, dmean1 / 2.0];
    let expect = [dh0[0] + dh1[0], dh0[0] - dh1[0], dh0[1] + dh1[1], dh0[1] - dh1[1]];
    for (a, b) in g.iter().zip(&expect) {
        assert!((a - b).abs() < 1e-15, "{g:?} vs {expect:?}");
    }
}

#[test]
fn embeddings_are_unit_norm_and_deterministic() {
    for arch in [Architecture::conv_net_a(), Architecture::frame_net_b()] {
        let m = EmbeddingModel::new(arch, 5).unwrap();
        let x = voice_like(1, 8000);
        let (e1, _) = m.forward(&x).unwrap();
        let e2 = m.embed(&x).unwrap();
        assert_eq!(e1, e2);
        assert_eq!(e1.len(), 64);
        assert!((dot(&e1, &e1).sqrt() - 1.0).abs() < 1e-9);
    }
}

#[test]
fn registry_covers_cache() {
    for arch in [Architecture::conv_net_a(), Architecture::frame_net_b()] {
        let m = EmbeddingModel::new(arch, 2).unwrap();
        let (_, cache) = m.forward(&voice_like(3, 4000)).unwrap();
        for info in m.layers() {
            assert!(cache.layer(&info.name).is_some(), "{}", info.name);
        }
    }
    let a = EmbeddingModel::new(Architecture::conv_net_a(), 0).unwrap();
    assert_eq!(a.last_conv().as_deref(), Some("conv2"));
    let b = EmbeddingModel::new(Architecture::frame_net_b(), 0).unwrap();
    assert_eq!(b.last_conv(), None);
}

/// Central differences of `<u, embed(x)>` on `coords`, compared as vectors.
fn fd_relative_error(m: &EmbeddingModel, x: &[f64], u: &[f64], coords: &[usize], step: f64) -> f64 {
    let (_, cache) = m.forward(x).unwrap();
    let g = m.input_gradient(&cache, u).unwrap();
    let mut num = 0.0;
    let mut den = 0.0;
    for &i in coords {
        let mut xp = x.to_vec();
        xp[i] += step;
        let mut xm = x.to_vec();
        xm[i] -= step;
        let fd = (dot(u, &m.embed(&xp).unwrap()) - dot(u, &m.embed(&xm).unwrap())) / (2.0 * step);
        num += (fd - g[i]).powi(2);
        den += g[i].powi(2);
    }
    (num / den).sqrt()
}

#[test]
fn input_gradient_matches_finite_differences() {
    let mut rng = seeded(41);
    for arch in [Architecture::conv_net_a(), Architecture::frame_net_b()] {
        let m = EmbeddingModel::new(arch, 9).unwrap();
        let x = voice_like(4, 4000);
        let u: Vec<f64> = (0..64).map(|_| rng.random_range(-1.0..1.0)).collect();
        let coords: Vec<usize> = (0..30).map(|_| rng.random_range(0..x.len())).collect();
        let err = fd_relative_error(&m, &x, &u, &coords, 1e-2);
        assert!(err < 1e-4, "{}: {err}", m.arch().name());
    }
}

#[test]
fn param_gradient_matches_finite_differences() {
    let mut rng = seeded(43);
    for arch in [Architecture::conv_net_a(), Architecture::frame_net_b()] {
        let mut m = EmbeddingModel::new(arch, 10).unwrap();
        let x = voice_like(6, 3000);
        let u: Vec<f64> = (0..64).map(|_| rng.random_range(-1.0..1.0)).collect();
        let (_, cache) = m.forward(&x).unwrap();
        let dp = m.backward(&cache, &u, true).unwrap().trunk.d_params.unwrap();
        for (name, range) in m.param_blocks() {
            let i = rng.random_range(range);
            let h = 1e-5;
            let orig = m.params()[i];
            m.params_mut()[i] = orig + h;
            let fp = dot(&u, &m.embed(&x).unwrap());
            m.params_mut()[i] = orig - h;
            let fm = dot(&u, &m.embed(&x).unwrap());
            m.params_mut()[i] = orig;
            let fd = (fp - fm) / (2.0 * h);
            assert!(
                (fd - dp[i]).abs() < 1e-6 * (1.0 + fd.abs()),
                "{name}[{i}]: {fd} vs {}",
                dp[i]
            );
        }
    }
}

#[test]
fn gradient_is_linear_in_upstream() {
    let m = EmbeddingModel::new(Architecture::frame_net_b(), 3).unwrap();
    let x = voice_like(8, 2000);
    let (_, cache) = m.forward(&x).unwrap();
    let u: Vec<f64> = (0..64).map(|i| (i as f64).sin()).collect();
    let g = m.input_gradient(&cache, &u).unwrap();
    let u3: Vec<f64> = u.iter().map(|v| 3.0 * v).collect();
    let g3 = m.input_gradient(&cache, &u3).unwrap();
    for (a, b) in g.iter().zip(&g3) {
        assert!((3.0 * a - b).abs() < 1e-12 * b.abs().max(1e-6));
    }
    let g0 = m.input_gradient(&cache, &[0.0; 64]).unwrap();
    assert!(g0.iter().all(|&v| v == 0.0));
}

#[test]
fn short_input_and_mismatch_errors() {
    let a = EmbeddingModel::new(Architecture::conv_net_a(), 0).unwrap();
    assert!(matches!(a.forward(&[0.0; 399]), Err(Error::TooShort { .. })));
    let b = EmbeddingModel::new(Architecture::frame_net_b(), 0).unwrap();
    let (_, cache) = b.forward(&voice_like(1, 1000)).unwrap();
    assert!(a.input_gradient(&cache, &[0.0; 64]).is_err());
    assert!(b.input_gradient(&cache, &[0.0; 3]).is_err());
}

#[test]
fn score_and_enroll() {
    let e = vec![0.6, 0.8];
    assert!((score(&e, &e).unwrap() - 1.0).abs() < 1e-15);
    assert!((score(&e, &[-0.6, -0.8]).unwrap() + 1.0).abs() < 1e-15);
    assert_eq!(score(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
    assert!(score(&e, &[1.0]).is_err());

    let m = EmbeddingModel::new(Architecture::frame_net_b(), 1).unwrap();
    let (x1, x2) = (voice_like(1, 3000), voice_like(2, 3000));
    let (e1, e2) = (m.embed(&x1).unwrap(), m.embed(&x2).unwrap());
    let one = enroll(&m, std::slice::from_ref(&x1), "s").unwrap();
    for (a, b) in one.embedding.iter().zip(&e1) {
        assert!((a - b).abs() < 1e-15);
    }
    let twice = enroll(&m, &[x1.clone(), x1.clone()], "s").unwrap();
    for (a, b) in twice.embedding.iter().zip(&e1) {
        assert!((a - b).abs() < 1e-12);
    }
    let both = enroll(&m, &[x1, x2], "s").unwrap();
    let mean: Vec<f64> = e1.iter().zip(&e2).map(|(a, b)| (a + b) / 2.0).collect();
    let n = dot(&mean, &mean).sqrt();
    for (a, b) in both.embedding.iter().zip(&mean) {
        assert!((a - b / n).abs() < 1e-12);
    }
    assert!(enroll::<Vec<f64>>(&m, &[], "s").is_err());
}

#[test]
fn model_and_profile_files_round_trip() {
    for arch in [Architecture::conv_net_a(), Architecture::frame_net_b()] {
        let m = EmbeddingModel::new(arch, 12).unwrap();
        let back = decode_model(&encode_model(&m)).unwrap();
        assert_eq!(back.arch(), m.arch());
        assert_eq!(back.params(), m.params());
        let mut bytes = encode_model(&m);
        bytes.pop();
        assert!(matches!(decode_model(&bytes), Err(Error::Format { .. })));
    }
    let profiles = vec![
        SpeakerProfile {
            speaker_id: "spk00".into(),
            embedding: vec![1.0, 0.0],
        },
        SpeakerProfile {
            speaker_id: "spk01".into(),
            embedding: vec![0.6, -0.8],
        },
    ];
    assert_eq!(decode_profiles(&encode_profiles(&profiles).unwrap()).unwrap(), profiles);
    assert!(decode_profiles(b"ASVQ").is_err());
}
