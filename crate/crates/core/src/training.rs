//! Synthetic multi-speaker corpus, WAV-directory corpora and the trainer.
//!
//! A synthetic speaker is three harmonic partials of a speaker-specific
//! fundamental, shaped by a two-pole formant resonator and buried in white
//! noise. Utterances differ in phase, partial amplitudes, a small frequency
//! jitter, a syllable-rate amplitude envelope, gain and noise.

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::audio::{read_wav, write_wav, Waveform, SAMPLE_RATE};
use crate::config::KeyValues;
use crate::nets::{EmbeddingModel, TrunkInput};
use crate::rng::{derive, seeded};
use crate::{Error, Result};

pub const TARGET_RMS: f64 = 2000.0;
pub const FREQ_JITTER: f64 = 0.005;

#[derive(Debug, Clone, PartialEq)]
pub struct CorpusSpec {
    pub n_speakers: usize,
    pub utterances_per_speaker: usize,
    pub duration_s: f64,
    pub snr_db: f64,
    pub seed: u64,
    /// Index of the first generated utterance per speaker; a non-zero offset
    /// yields fresh utterances of the same speakers.
    pub first_utterance: usize,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        Self {
            n_speakers: 20,
            utterances_per_speaker: 30,
            duration_s: 1.0,
            snr_db: 20.0,
            seed: 1,
            first_utterance: 0,
        }
    }
}

impl CorpusSpec {
    pub const KEYS: &'static [&'static str] = &[
        "n_speakers",
        "utterances_per_speaker",
        "duration_s",
        "snr_db",
        "seed",
        "first_utterance",
    ];

    pub fn from_key_values(kv: &KeyValues) -> Result<Self> {
        kv.check_known(Self::KEYS)?;
        let d = Self::default();
        Ok(Self {
            n_speakers: kv.parsed("n_speakers")?.unwrap_or(d.n_speakers),
            utterances_per_speaker: kv.parsed("utterances_per_speaker")?.unwrap_or(d.utterances_per_speaker),
            duration_s: kv.parsed("duration_s")?.unwrap_or(d.duration_s),
            snr_db: kv.parsed("snr_db")?.unwrap_or(d.snr_db),
            seed: kv.parsed("seed")?.unwrap_or(d.seed),
            first_utterance: kv.parsed("first_utterance")?.unwrap_or(d.first_utterance),
        })
    }

    pub fn samples(&self) -> usize {
        (self.duration_s * SAMPLE_RATE as f64).round() as usize
    }

    fn validate(&self) -> Result<()> {
        if self.n_speakers < 2 {
            return Err(Error::InvalidArgument(format!(
                "corpus needs at least 2 speakers, got {}",
                self.n_speakers
            )));
        }
        if self.utterances_per_speaker == 0 || self.samples() < 1024 || !self.snr_db.is_finite() {
            return Err(Error::InvalidArgument(format!("invalid corpus spec {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpeakerSignature {
    pub freqs: [f64; 3],
    pub formant_hz: f64,
    pub formant_bw_hz: f64,
}

/// Signature of speaker `s`. Fundamentals are stratified over 100-300 Hz so
/// distinct speakers never share a frequency set.
pub fn speaker_signature(seed: u64, n_speakers: usize, s: usize) -> SpeakerSignature {
    let mut rng = seeded(derive(seed, &[0x5e, s as u64]));
    let f0 = 100.0 + 200.0 * (s as f64 + rng.random_range(0.2..0.8)) / n_speakers as f64;
    let m2 = rng.random_range(2..=3) as f64;
    let m3 = rng.random_range(4..=7) as f64;
    SpeakerSignature {
        freqs: [f0, m2 * f0, m3 * f0],
        formant_hz: rng.random_range(400.0..3000.0),
        formant_bw_hz: rng.random_range(150.0..400.0),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Utterance {
    pub speaker: usize,
    pub speaker_id: String,
    pub index: usize,
    pub wave: Waveform,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub speaker_ids: Vec<String>,
    pub utterances: Vec<Utterance>,
}

impl Corpus {
    pub fn n_speakers(&self) -> usize {
        self.speaker_ids.len()
    }

    pub fn of_speaker(&self, s: usize) -> impl Iterator<Item = &Utterance> {
        self.utterances.iter().filter(move |u| u.speaker == s)
    }
}

pub fn speaker_name(s: usize) -> String {
    format!("spk{s:03}")
}

fn synth_utterance(spec: &CorpusSpec, sig: &SpeakerSignature, s: usize, u: usize) -> Waveform {
    let mut rng = seeded(derive(spec.seed, &[0x77, s as u64, u as u64]));
    let n = spec.samples();
    let sr = SAMPLE_RATE as f64;
    let mut x = vec![0.0; n];
    for (i, &f) in sig.freqs.iter().enumerate() {
        let f = f * (1.0 + rng.random_range(-FREQ_JITTER..FREQ_JITTER));
        let amp = rng.random_range(0.7..1.3) / (1.0 + i as f64 * 0.5);
        let phase = rng.random_range(0.0..2.0 * PI);
        for (k, v) in x.iter_mut().enumerate() {
            *v += amp * (2.0 * PI * f * k as f64 / sr + phase).sin();
        }
    }
    // two-pole resonator, unit gain at the formant, mixed with the dry signal
    let r = (-PI * sig.formant_bw_hz / sr).exp();
    let theta = 2.0 * PI * sig.formant_hz / sr;
    let (a1, a2) = (2.0 * r * theta.cos(), -r * r);
    let gain = (1.0 - r) * (1.0 - 2.0 * r * (2.0 * theta).cos() + r * r).sqrt();
    let (mut y1, mut y2) = (0.0, 0.0);
    for v in x.iter_mut() {
        let y = gain * *v + a1 * y1 + a2 * y2;
        y2 = y1;
        y1 = y;
        *v = 0.5 * *v + 2.0 * y;
    }
    // syllable-rate envelope on the voiced part only
    let env_hz = rng.random_range(2.0..5.0);
    let env_phase = rng.random_range(0.0..2.0 * PI);
    for (k, v) in x.iter_mut().enumerate() {
        *v *= 0.25 + 0.75 * (0.5 - 0.5 * (2.0 * PI * env_hz * k as f64 / sr + env_phase).cos());
    }
    let rms = (x.iter().map(|v| v * v).sum::<f64>() / n as f64).sqrt().max(1e-12);
    let level = TARGET_RMS * rng.random_range(0.9..1.1) / rms;
    let noise_std = TARGET_RMS / 10f64.powf(spec.snr_db / 20.0);
    let noise = Normal::new(0.0, noise_std).expect("finite noise std");
    Waveform::new(x.into_iter().map(|v| v * level + noise.sample(&mut rng)).collect()).quantized()
}

pub fn synth_corpus(spec: &CorpusSpec) -> Result<Corpus> {
    spec.validate()?;
    let mut utterances = Vec::new();
    for s in 0..spec.n_speakers {
        let sig = speaker_signature(spec.seed, spec.n_speakers, s);
        for u in spec.first_utterance..spec.first_utterance + spec.utterances_per_speaker {
            utterances.push(Utterance {
                speaker: s,
                speaker_id: speaker_name(s),
                index: u,
                wave: synth_utterance(spec, &sig, s, u),
            });
        }
    }
    Ok(Corpus {
        speaker_ids: (0..spec.n_speakers).map(speaker_name).collect(),
        utterances,
    })
}

/// Writes `dir/<speaker>/<utt>.wav` plus `dir/manifest.csv`.
pub fn write_corpus(corpus: &Corpus, dir: impl AsRef<Path>) -> Result<PathBuf> {
    let dir = dir.as_ref();
    let mut manifest = String::from("path,speaker_id\n");
    for u in &corpus.utterances {
        let rel = format!("{}/utt{:04}.wav", u.speaker_id, u.index);
        let path = dir.join(&rel);
        let parent = path.parent().expect("speaker directory");
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        write_wav(&path, &u.wave)?;
        writeln!(manifest, "{rel},{}", u.speaker_id).expect("string write");
    }
    let mpath = dir.join("manifest.csv");
    std::fs::write(&mpath, manifest).map_err(|e| Error::io(&mpath, e))?;
    Ok(mpath)
}

/// Reads a `path,speaker_id` manifest; relative paths resolve against the
/// manifest's directory.
pub fn read_manifest(path: impl AsRef<Path>) -> Result<Vec<(PathBuf, String)>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || (i == 0 && line == "path,speaker_id") {
            continue;
        }
        let (p, spk) = line.split_once(',').ok_or_else(|| Error::Format {
            kind: "manifest",
            reason: format!("line {} has no comma", i + 1),
        })?;
        rows.push((base.join(p.trim()), spk.trim().to_string()));
    }
    Ok(rows)
}

/// Loads a corpus from `manifest.csv` if present, else from the
/// directory-per-speaker layout. Speakers are numbered in sorted id order.
pub fn load_corpus(dir: impl AsRef<Path>) -> Result<Corpus> {
    let dir = dir.as_ref();
    let manifest = dir.join("manifest.csv");
    let mut rows = if manifest.exists() {
        read_manifest(&manifest)?
    } else {
        let mut rows = Vec::new();
        let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
        for entry in entries {
            let spk_dir = entry.map_err(|e| Error::io(dir, e))?.path();
            if !spk_dir.is_dir() {
                continue;
            }
            let spk = spk_dir.file_name().expect("dir name").to_string_lossy().to_string();
            for f in std::fs::read_dir(&spk_dir).map_err(|e| Error::io(&spk_dir, e))? {
                let p = f.map_err(|e| Error::io(&spk_dir, e))?.path();
                if p.extension().is_some_and(|e| e.eq_ignore_ascii_case("wav")) {
                    rows.push((p, spk.clone()));
                }
            }
        }
        rows
    };
    rows.sort();
    let mut speaker_ids: Vec<String> = rows.iter().map(|r| r.1.clone()).collect();
    speaker_ids.sort();
    speaker_ids.dedup();
    let mut utterances = Vec::with_capacity(rows.len());
    for (i, (p, spk)) in rows.into_iter().enumerate() {
        utterances.push(Utterance {
            speaker: speaker_ids.binary_search(&spk).expect("known speaker"),
            speaker_id: spk,
            index: i,
            wave: read_wav(&p)?,
        });
    }
    if speaker_ids.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "corpus at {} has {} speaker(s), need at least 2",
            dir.display(),
            speaker_ids.len()
        )));
    }
    Ok(Corpus {
        speaker_ids,
        utterances,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 8,
            learning_rate: 5e-3,
            batch_size: 16,
            seed: 7,
        }
    }
}

impl TrainConfig {
    fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || !(self.learning_rate >= 0.0) {
            return Err(Error::InvalidArgument(format!("invalid training config {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub loss: f64,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainLog {
    pub epochs: Vec<EpochStats>,
}

impl TrainLog {
    pub fn final_accuracy(&self) -> f64 {
        self.epochs.last().map_or(0.0, |e| e.accuracy)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,loss,accuracy\n");
        for e in &self.epochs {
            writeln!(s, "{},{:.6},{:.4}", e.epoch, e.loss, e.accuracy).expect("string write");
        }
        s
    }
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
    lr: f64,
}

impl Adam {
    const B1: f64 = 0.9;
    const B2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(n: usize, lr: f64) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
            lr,
        }
    }

    fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        self.t += 1;
        let c1 = 1.0 - Self::B1.powi(self.t);
        let c2 = 1.0 - Self::B2.powi(self.t);
        for i in 0..params.len() {
            self.m[i] = Self::B1 * self.m[i] + (1.0 - Self::B1) * grad[i];
            self.v[i] = Self::B2 * self.v[i] + (1.0 - Self::B2) * grad[i] * grad[i];
            params[i] -= self.lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + Self::EPS);
        }
    }
}

/// Softmax cross-entropy for one example; returns (loss, d logits, correct).
fn softmax_xent(logits: &[f64], label: usize) -> (f64, Vec<f64>, bool) {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    let loss = z.ln() + max - logits[label];
    let mut d: Vec<f64> = exps.iter().map(|e| e / z).collect();
    d[label] -= 1.0;
    let argmax = (0..logits.len()).fold(0, |best, i| if logits[i] > logits[best] { i } else { best });
    (loss, d, argmax == label)
}

/// Trains `model` with a temporary linear softmax head over speakers, which
/// is discarded afterwards. Mini-batch Adam on the mean cross-entropy.
pub fn train(model: &EmbeddingModel, corpus: &Corpus, cfg: &TrainConfig) -> Result<(EmbeddingModel, TrainLog)> {
    cfg.validate()?;
    let classes = corpus.n_speakers();
    if classes < 2 {
        return Err(Error::InvalidArgument("training needs at least 2 speakers".into()));
    }
    let mut model = model.clone();
    let inputs: Vec<(TrunkInput, usize)> = corpus
        .utterances
        .iter()
        .map(|u| Ok((model.frontend(u.wave.as_slice())?.0, u.speaker)))
        .collect::<Result<_>>()?;
    let dim = model.embedding_dim();
    let mut rng = seeded(cfg.seed);
    let head_init = Normal::new(0.0, (1.0 / dim as f64).sqrt()).expect("finite std");
    // classifier weights (classes x dim) followed by biases
    let mut head: Vec<f64> = (0..classes * dim).map(|_| head_init.sample(&mut rng)).collect();
    head.extend(std::iter::repeat_n(0.0, classes));
    let mut opt_model = Adam::new(model.params().len(), cfg.learning_rate);
    let mut opt_head = Adam::new(head.len(), cfg.learning_rate);
    let mut order: Vec<usize> = (0..inputs.len()).collect();
    let mut log = TrainLog { epochs: Vec::new() };

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let (mut loss_sum, mut correct) = (0.0, 0usize);
        for batch in order.chunks(cfg.batch_size) {
            let mut g_model = vec![0.0; model.params().len()];
            let mut g_head = vec![0.0; head.len()];
            for &i in batch {
                let (input, label) = &inputs[i];
                let (e, cache) = model.trunk_forward(input).map_err(|err| match err {
                    Error::NonFinite { .. } => Error::Diverged { epoch, loss: f64::NAN },
                    other => other,
                })?;
                let logits: Vec<f64> = (0..classes)
                    .map(|c| {
                        head[classes * dim + c]
                            + head[c * dim..(c + 1) * dim]
                                .iter()
                                .zip(&e)
                                .map(|(w, v)| w * v)
                                .sum::<f64>()
                    })
                    .collect();
                let (loss, dlogits, ok) = softmax_xent(&logits, *label);
                if !loss.is_finite() {
                    return Err(Error::Diverged { epoch, loss });
                }
                loss_sum += loss;
                correct += ok as usize;
                let mut de = vec![0.0; dim];
                for (c, &dl) in dlogits.iter().enumerate() {
                    g_head[classes * dim + c] += dl;
                    for k in 0..dim {
                        g_head[c * dim + k] += dl * e[k];
                        de[k] += dl * head[c * dim + k];
                    }
                }
                let grads = model.trunk_backward(&cache, &de, true)?;
                for (g, d) in g_model.iter_mut().zip(grads.d_params.expect("param grads")) {
                    *g += d;
                }
            }
            let scale = 1.0 / batch.len() as f64;
            g_model.iter_mut().for_each(|g| *g *= scale);
            g_head.iter_mut().for_each(|g| *g *= scale);
            opt_model.step(model.params_mut(), &g_model);
            opt_head.step(&mut head, &g_head);
        }
        let stats = EpochStats {
            epoch,
            loss: loss_sum / inputs.len() as f64,
            accuracy: correct as f64 / inputs.len() as f64,
        };
        if !stats.loss.is_finite() || model.params().iter().any(|p| !p.is_finite()) {
            return Err(Error::Diverged {
                epoch,
                loss: stats.loss,
            });
        }
        log::info!(
            "{} epoch {epoch}: loss {:.4} acc {:.3}",
            model.arch().name(),
            stats.loss,
            stats.accuracy
        );
        log.epochs.push(stats);
    }
    Ok((model, log))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nets::Architecture;
    use rustfft::num_complex::Complex;
    use rustfft::FftPlanner;

    fn tiny_spec() -> CorpusSpec {
        CorpusSpec {
            n_speakers: 2,
            utterances_per_speaker: 1,
            duration_s: 0.25,
            ..Default::default()
        }
    }

    #[test]
    fn corpus_is_deterministic_and_sized() {
        let a = synth_corpus(&tiny_spec()).unwrap();
        assert_eq!(a, synth_corpus(&tiny_spec()).unwrap());
        assert_eq!(a.utterances.len(), 2);
        assert_eq!(a.utterances[1].speaker_id, "spk001");
        assert!(a.utterances.iter().all(|u| u.wave.len() == 4000 && u.wave.in_range()));
        let other = synth_corpus(&CorpusSpec { seed: 2, ..tiny_spec() }).unwrap();
        assert_ne!(a, other);
        assert!(synth_corpus(&CorpusSpec {
            n_speakers: 1,
            ..tiny_spec()
        })
        .is_err());
    }

    #[test]
    fn held_out_utterances_are_fresh() {
        let a = synth_corpus(&tiny_spec()).unwrap();
        let b = synth_corpus(&CorpusSpec {
            first_utterance: 5,
            ..tiny_spec()
        })
        .unwrap();
        assert_ne!(a.utterances[0].wave, b.utterances[0].wave);
        assert_eq!(b.utterances[0].index, 5);
    }

    #[test]
    fn signatures_are_distinct() {
        let sigs: Vec<_> = (0..20).map(|s| speaker_signature(1, 20, s)).collect();
        for i in 0..20 {
            for j in i + 1..20 {
                assert!(sigs[i].freqs[0] < sigs[j].freqs[0]);
            }
        }
    }

    /// Welch-averaged Hann periodogram with 512-point segments (31.25 Hz bins).
    fn periodogram(x: &[f64]) -> Vec<f64> {
        let n = 512;
        let fft = FftPlanner::new().plan_fft_forward(n);
        let mut acc = vec![0.0; n / 2 + 1];
        for seg in x.chunks_exact(n) {
            let mut buf: Vec<Complex<f64>> = seg
                .iter()
                .enumerate()
                .map(|(i, v)| {
                    let w = 0.5 - 0.5 * (2.0 * PI * i as f64 / n as f64).cos();
                    Complex::new(v * w, 0.0)
                })
                .collect();
            fft.process(&mut buf);
            for (a, c) in acc.iter_mut().zip(&buf) {
                *a += c.norm_sqr();
            }
        }
        acc
    }

    #[test]
    fn spectral_peaks_sit_on_the_signature() {
        let spec = CorpusSpec {
            n_speakers: 5,
            utterances_per_speaker: 1,
            ..Default::default()
        };
        let corpus = synth_corpus(&spec).unwrap();
        for u in &corpus.utterances {
            let sig = speaker_signature(spec.seed, spec.n_speakers, u.speaker);
            let p = periodogram(u.wave.as_slice());
            let mut peaks: Vec<usize> = (1..p.len() - 1)
                .filter(|&k| p[k] > p[k - 1] && p[k] >= p[k + 1])
                .collect();
            peaks.sort_by(|a, b| p[*b].total_cmp(&p[*a]));
            let mut top: Vec<f64> = peaks[..3].iter().map(|&k| k as f64).collect();
            top.sort_by(f64::total_cmp);
            for (bin, f) in top.iter().zip(&sig.freqs) {
                assert!(
                    (bin - f / 31.25).abs() <= 1.0,
                    "speaker {}: bin {bin} vs {f} Hz",
                    u.speaker
                );
            }
        }
    }

    #[test]
    fn corpus_directory_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let corpus = synth_corpus(&tiny_spec()).unwrap();
        write_corpus(&corpus, dir.path()).unwrap();
        let back = load_corpus(dir.path()).unwrap();
        assert_eq!(back.speaker_ids, corpus.speaker_ids);
        assert_eq!(back.utterances[1].wave, corpus.utterances[1].wave);
        std::fs::remove_file(dir.path().join("manifest.csv")).unwrap();
        let scanned = load_corpus(dir.path()).unwrap();
        assert_eq!(scanned.utterances.len(), 2);
        assert_eq!(scanned.utterances[0].wave, corpus.utterances[0].wave);
    }

    fn small_frame_arch() -> Architecture {
        Architecture::FrameNetB {
            frame_len: 400,
            hop: 160,
            hidden: vec![16],
            embedding_dim: 8,
            input_scale: 1.0 / 2048.0,
        }
    }

    #[test]
    fn zero_learning_rate_leaves_parameters() {
        let corpus = synth_corpus(&tiny_spec()).unwrap();
        let m = EmbeddingModel::new(small_frame_arch(), 3).unwrap();
        let cfg = TrainConfig {
            epochs: 2,
            learning_rate: 0.0,
            ..Default::default()
        };
        let (trained, log) = train(&m, &corpus, &cfg).unwrap();
        assert_eq!(trained.params(), m.params());
        assert_eq!(log.epochs.len(), 2);
    }

    #[test]
    fn separable_pair_is_learned() {
        let spec = CorpusSpec {
            n_speakers: 2,
            utterances_per_speaker: 10,
            duration_s: 0.5,
            ..Default::default()
        };
        let corpus = synth_corpus(&spec).unwrap();
        let m = EmbeddingModel::new(small_frame_arch(), 4).unwrap();
        let (_, log) = train(
            &m,
            &corpus,
            &TrainConfig {
                epochs: 6,
                batch_size: 4,
                ..Default::default()
            },
        )
        .unwrap();
        assert!(log.final_accuracy() >= 0.99, "{log:?}");
    }

    #[test]
    fn divergence_is_reported_with_epoch() {
        let corpus = synth_corpus(&tiny_spec()).unwrap();
        let m = EmbeddingModel::new(small_frame_arch(), 5).unwrap();
        let cfg = TrainConfig {
            epochs: 3,
            learning_rate: 1e300,
            batch_size: 1,
            ..Default::default()
        };
        match train(&m, &corpus, &cfg) {
            Err(Error::Diverged { epoch, .. }) => assert!(epoch >= 1),
            other => panic!("expected divergence, got {:?}", other.map(|r| r.1)),
        }
    }
}
