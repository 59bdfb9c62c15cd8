//! Toy speaker-embedding networks with hand-written backward passes.
//!
//! Two architectures are provided. [`Architecture::ConvNetA`] runs two 3x3
//! convolutions over a normalised log-mel map; [`Architecture::FrameNetB`]
//! runs a position-wise MLP over raw sample frames. Both end in mean/std
//! statistics pooling over time, a linear head and L2 normalisation, and both
//! backpropagate all the way to the waveform samples.

mod io;
mod layers;

use std::ops::Range;

use rand_distr::{Distribution, Normal};

use crate::dsp::{LogMel, LogMelCache, LogMelConfig};
use crate::{Error, Result};
use layers::*;

pub use io::{
    decode_model, decode_profiles, encode_model, encode_profiles, load_model, load_profiles, save_model, save_profiles,
};

#[derive(Debug, Clone, PartialEq)]
pub enum Architecture {
    ConvNetA {
        n_mels: usize,
        channels: [usize; 2],
        embedding_dim: usize,
    },
    FrameNetB {
        frame_len: usize,
        hop: usize,
        hidden: Vec<usize>,
        embedding_dim: usize,
        input_scale: f64,
    },
}

impl Architecture {
    pub fn conv_net_a() -> Self {
        Architecture::ConvNetA {
            n_mels: 40,
            channels: [4, 8],
            embedding_dim: 64,
        }
    }

    pub fn frame_net_b() -> Self {
        Architecture::FrameNetB {
            frame_len: 400,
            hop: 160,
            hidden: vec![64, 64],
            embedding_dim: 64,
            input_scale: 1.0 / 2048.0,
        }
    }

    pub fn id(&self) -> u32 {
        match self {
            Architecture::ConvNetA { .. } => 1,
            Architecture::FrameNetB { .. } => 2,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Architecture::ConvNetA { .. } => "convnet-a",
            Architecture::FrameNetB { .. } => "framenet-b",
        }
    }

    pub fn embedding_dim(&self) -> usize {
        match self {
            Architecture::ConvNetA { embedding_dim, .. } | Architecture::FrameNetB { embedding_dim, .. } => {
                *embedding_dim
            }
        }
    }

    fn validate(&self) -> Result<()> {
        let ok = match self {
            Architecture::ConvNetA {
                n_mels,
                channels,
                embedding_dim,
            } => *n_mels > 0 && channels.iter().all(|&c| c > 0) && *embedding_dim > 0,
            Architecture::FrameNetB {
                frame_len,
                hop,
                hidden,
                embedding_dim,
                input_scale,
            } => {
                *frame_len > 0
                    && *hop > 0
                    && !hidden.is_empty()
                    && hidden.iter().all(|&h| h > 0)
                    && *embedding_dim > 0
                    && input_scale.is_finite()
                    && *input_scale > 0.0
            }
        };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!("invalid architecture {self:?}")))
        }
    }

    /// Parameter blocks in storage order: `(name, len, fan_in)`.
    fn blocks(&self) -> Vec<(String, usize, usize)> {
        let mut b = Vec::new();
        match self {
            Architecture::ConvNetA {
                n_mels,
                channels,
                embedding_dim,
            } => {
                let [c1, c2] = *channels;
                b.push(("conv1.weight".into(), c1 * 9, 9));
                b.push(("conv1.bias".into(), c1, 0));
                b.push(("conv2.weight".into(), c2 * c1 * 9, c1 * 9));
                b.push(("conv2.bias".into(), c2, 0));
                let pooled = 2 * c2 * n_mels;
                b.push(("head.weight".into(), embedding_dim * pooled, pooled));
                b.push(("head.bias".into(), *embedding_dim, 0));
            }
            Architecture::FrameNetB {
                frame_len,
                hidden,
                embedding_dim,
                ..
            } => {
                let mut cin = *frame_len;
                for (l, &h) in hidden.iter().enumerate() {
                    b.push((format!("fc{}.weight", l + 1), h * cin, cin));
                    b.push((format!("fc{}.bias", l + 1), h, 0));
                    cin = h;
                }
                let pooled = 2 * cin;
                b.push(("head.weight".into(), embedding_dim * pooled, pooled));
                b.push(("head.bias".into(), *embedding_dim, 0));
            }
        }
        b
    }

    fn ranges(&self) -> Vec<Range<usize>> {
        let mut off = 0;
        self.blocks()
            .into_iter()
            .map(|(_, len, _)| {
                off += len;
                off - len..off
            })
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.blocks().iter().map(|b| b.1).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerKind {
    Frontend,
    Conv,
    Dense,
    Pool,
    Head,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerInfo {
    pub name: String,
    pub kind: LayerKind,
    /// Output channels for conv/dense layers, 0 otherwise.
    pub channels: usize,
}

/// Trunk input laid out `[row][time]`: log-mel bands for ConvNet-A, frame
/// samples for FrameNet-B.
#[derive(Debug, Clone, PartialEq)]
pub struct TrunkInput {
    pub rows: usize,
    pub frames: usize,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct LayerActivation {
    pub name: String,
    pub input: Vec<f64>,
    pub output: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct TrunkCache {
    input: TrunkInput,
    layers: Vec<LayerActivation>,
    z_norm: f64,
}

#[derive(Debug, Clone)]
pub enum FrontendCache {
    LogMel(Box<LogMelCache>),
    Frames,
}

/// Everything one forward pass leaves behind for the backward pass.
#[derive(Debug, Clone)]
pub struct ActivationCache {
    arch_id: u32,
    signal_len: usize,
    frontend: FrontendCache,
    trunk: TrunkCache,
}

impl ActivationCache {
    pub fn signal_len(&self) -> usize {
        self.signal_len
    }

    pub fn frames(&self) -> usize {
        self.trunk.input.frames
    }

    /// Activations of a registered layer (including the frontend).
    pub fn layer(&self, name: &str) -> Option<&LayerActivation> {
        self.trunk.layers.iter().find(|l| l.name == name)
    }

    pub fn layers(&self) -> &[LayerActivation] {
        &self.trunk.layers
    }

    pub fn trunk(&self) -> &TrunkCache {
        &self.trunk
    }

    pub fn embedding(&self) -> &[f64] {
        &self.trunk.layers.last().expect("head layer").output
    }
}

#[derive(Debug, Clone)]
pub struct TrunkGrads {
    pub d_input: Vec<f64>,
    pub d_params: Option<Vec<f64>>,
    /// Gradient w.r.t. the output of every registered layer, by name.
    pub d_layer_outputs: Vec<(String, Vec<f64>)>,
}

impl TrunkGrads {
    pub fn layer(&self, name: &str) -> Option<&[f64]> {
        self.d_layer_outputs
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, g)| g.as_slice())
    }
}

#[derive(Debug, Clone)]
pub struct Backward {
    pub d_wave: Vec<f64>,
    pub trunk: TrunkGrads,
}

#[derive(Debug, Clone)]
pub struct EmbeddingModel {
    arch: Architecture,
    params: Vec<f64>,
    logmel: Option<LogMel>,
}

impl EmbeddingModel {
    /// He-initialised model; deterministic in `seed`.
    pub fn new(arch: Architecture, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = crate::rng::seeded(seed);
        let mut params = Vec::with_capacity(arch.param_count());
        for (name, len, fan_in) in arch.blocks() {
            if fan_in == 0 {
                params.extend(std::iter::repeat_n(0.0, len));
                continue;
            }
            let gain = if name.starts_with("head") { 1.0 } else { 2.0 };
            let normal = Normal::new(0.0, (gain / fan_in as f64).sqrt()).expect("finite std");
            params.extend((0..len).map(|_| normal.sample(&mut rng)));
        }
        Self::from_params(arch, params)
    }

    pub fn from_params(arch: Architecture, params: Vec<f64>) -> Result<Self> {
        arch.validate()?;
        if params.len() != arch.param_count() {
            return Err(Error::shape("model parameters", arch.param_count(), params.len()));
        }
        let logmel = match &arch {
            Architecture::ConvNetA { n_mels, .. } => Some(LogMel::new(LogMelConfig {
                n_mels: *n_mels,
                ..LogMelConfig::default()
            })?),
            Architecture::FrameNetB { .. } => None,
        };
        Ok(Self { arch, params, logmel })
    }

    pub fn arch(&self) -> &Architecture {
        &self.arch
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn embedding_dim(&self) -> usize {
        self.arch.embedding_dim()
    }

    /// Named parameter blocks and their ranges in [`EmbeddingModel::params`].
    pub fn param_blocks(&self) -> Vec<(String, Range<usize>)> {
        self.arch
            .blocks()
            .into_iter()
            .map(|b| b.0)
            .zip(self.arch.ranges())
            .collect()
    }

    pub fn layers(&self) -> Vec<LayerInfo> {
        let mut v = vec![LayerInfo {
            name: "frontend".into(),
            kind: LayerKind::Frontend,
            channels: 0,
        }];
        match &self.arch {
            Architecture::ConvNetA { channels, .. } => {
                for (i, &c) in channels.iter().enumerate() {
                    v.push(LayerInfo {
                        name: format!("conv{}", i + 1),
                        kind: LayerKind::Conv,
                        channels: c,
                    });
                }
            }
            Architecture::FrameNetB { hidden, .. } => {
                for (i, &c) in hidden.iter().enumerate() {
                    v.push(LayerInfo {
                        name: format!("fc{}", i + 1),
                        kind: LayerKind::Dense,
                        channels: c,
                    });
                }
            }
        }
        v.push(LayerInfo {
            name: "pool".into(),
            kind: LayerKind::Pool,
            channels: 0,
        });
        v.push(LayerInfo {
            name: "head".into(),
            kind: LayerKind::Head,
            channels: 0,
        });
        v
    }

    /// Name of the last convolutional layer, if the architecture has one.
    pub fn last_conv(&self) -> Option<String> {
        self.layers()
            .into_iter()
            .rfind(|l| l.kind == LayerKind::Conv)
            .map(|l| l.name)
    }

    pub fn min_input_len(&self) -> usize {
        match &self.arch {
            Architecture::ConvNetA { .. } => LogMelConfig::default().frame_len,
            Architecture::FrameNetB { frame_len, .. } => *frame_len,
        }
    }

    /// Runs the parameter-free frontend.
    pub fn frontend(&self, x: &[f64]) -> Result<(TrunkInput, FrontendCache)> {
        match &self.arch {
            Architecture::ConvNetA { .. } => {
                let lm = self.logmel.as_ref().expect("log-mel frontend");
                let (feats, cache) = lm.forward(x)?;
                let mut data = vec![0.0; feats.data.len()];
                for t in 0..feats.frames {
                    for b in 0..feats.bands {
                        data[b * feats.frames + t] = feats.data[t * feats.bands + b];
                    }
                }
                Ok((
                    TrunkInput {
                        rows: feats.bands,
                        frames: feats.frames,
                        data,
                    },
                    FrontendCache::LogMel(Box::new(cache)),
                ))
            }
            Architecture::FrameNetB {
                frame_len,
                hop,
                input_scale,
                ..
            } => {
                if x.len() < *frame_len {
                    return Err(Error::TooShort {
                        context: "frame frontend",
                        needed: *frame_len,
                        actual: x.len(),
                    });
                }
                let frames = 1 + (x.len() - frame_len) / hop;
                let mut data = vec![0.0; frame_len * frames];
                for t in 0..frames {
                    for n in 0..*frame_len {
                        data[n * frames + t] = input_scale * x[t * hop + n];
                    }
                }
                Ok((
                    TrunkInput {
                        rows: *frame_len,
                        frames,
                        data,
                    },
                    FrontendCache::Frames,
                ))
            }
        }
    }

    fn frontend_backward(&self, cache: &FrontendCache, signal_len: usize, d: &TrunkInput) -> Result<Vec<f64>> {
        match (&self.arch, cache) {
            (Architecture::ConvNetA { .. }, FrontendCache::LogMel(c)) => {
                let mut g = vec![0.0; d.data.len()];
                for b in 0..d.rows {
                    for t in 0..d.frames {
                        g[t * d.rows + b] = d.data[b * d.frames + t];
                    }
                }
                self.logmel.as_ref().expect("log-mel frontend").backward(c, &g)
            }
            (
                Architecture::FrameNetB {
                    frame_len,
                    hop,
                    input_scale,
                    ..
                },
                FrontendCache::Frames,
            ) => {
                let mut dx = vec![0.0; signal_len];
                for n in 0..*frame_len {
                    for t in 0..d.frames {
                        dx[t * hop + n] += input_scale * d.data[n * d.frames + t];
                    }
                }
                Ok(dx)
            }
            _ => Err(Error::Invariant("frontend cache does not match architecture".into())),
        }
    }

    pub fn trunk_forward(&self, input: &TrunkInput) -> Result<(Vec<f64>, TrunkCache)> {
        let r = self.arch.ranges();
        let p = &self.params;
        let t = input.frames;
        if t == 0 {
            return Err(Error::TooShort {
                context: "trunk",
                needed: 1,
                actual: 0,
            });
        }
        let mut layers = Vec::new();
        let (last, rows) = match &self.arch {
            Architecture::ConvNetA { n_mels, channels, .. } => {
                if input.rows != *n_mels {
                    return Err(Error::shape("ConvNet-A bands", *n_mels, input.rows));
                }
                let h = *n_mels;
                let [c1, c2] = *channels;
                let s1 = ConvShape {
                    cin: 1,
                    cout: c1,
                    h,
                    w: t,
                };
                let mut a1 = conv3x3_forward(&pad1(&input.data, 1, h, t), s1, &p[r[0].clone()], &p[r[1].clone()]);
                relu_in_place(&mut a1);
                let s2 = ConvShape {
                    cin: c1,
                    cout: c2,
                    h,
                    w: t,
                };
                let mut a2 = conv3x3_forward(&pad1(&a1, c1, h, t), s2, &p[r[2].clone()], &p[r[3].clone()]);
                relu_in_place(&mut a2);
                layers.push(LayerActivation {
                    name: "conv1".into(),
                    input: input.data.clone(),
                    output: a1.clone(),
                });
                layers.push(LayerActivation {
                    name: "conv2".into(),
                    input: a1,
                    output: a2.clone(),
                });
                (a2, c2 * h)
            }
            Architecture::FrameNetB { frame_len, hidden, .. } => {
                if input.rows != *frame_len {
                    return Err(Error::shape("FrameNet-B frame length", *frame_len, input.rows));
                }
                let mut cur = input.data.clone();
                let mut cin = *frame_len;
                for (l, &h) in hidden.iter().enumerate() {
                    let mut a = dense_forward(&cur, cin, t, &p[r[2 * l].clone()], &p[r[2 * l + 1].clone()]);
                    relu_in_place(&mut a);
                    layers.push(LayerActivation {
                        name: format!("fc{}", l + 1),
                        input: cur,
                        output: a.clone(),
                    });
                    cur = a;
                    cin = h;
                }
                (cur, cin)
            }
        };
        let pooled = stats_pool(&last, rows, t);
        let nb = r.len();
        let z = affine(&pooled, &p[r[nb - 2].clone()], &p[r[nb - 1].clone()]);
        let (e, z_norm) = l2_normalize(&z);
        if !z_norm.is_finite() || e.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                context: "embedding",
                iteration: 0,
            });
        }
        layers.push(LayerActivation {
            name: "pool".into(),
            input: last,
            output: pooled.clone(),
        });
        layers.push(LayerActivation {
            name: "head".into(),
            input: pooled,
            output: e.clone(),
        });
        Ok((
            e,
            TrunkCache {
                input: input.clone(),
                layers,
                z_norm,
            },
        ))
    }

    /// Backpropagates an embedding-space gradient through the trunk.
    pub fn trunk_backward(&self, cache: &TrunkCache, upstream: &[f64], want_params: bool) -> Result<TrunkGrads> {
        let dim = self.embedding_dim();
        if upstream.len() != dim {
            return Err(Error::shape("embedding gradient", dim, upstream.len()));
        }
        let r = self.arch.ranges();
        let p = &self.params;
        let t = cache.input.frames;
        let nb = r.len();
        let mut dparams = want_params.then(|| vec![0.0; p.len()]);
        let mut d_layers = Vec::new();
        let get = |name: &str| cache.layers.iter().find(|l| l.name == name).expect("cached layer");

        d_layers.push(("head".to_string(), upstream.to_vec()));
        let head = get("head");
        let dz = l2_normalize_backward(&head.output, cache.z_norm, upstream);
        let pool = get("pool");
        let dpooled = {
            let dp = dparams.as_mut().map(|d| split_wb(d, &r[nb - 2], &r[nb - 1]));
            affine_backward(&pool.output, &p[r[nb - 2].clone()], &dz, dp)
        };
        d_layers.push(("pool".to_string(), dpooled.clone()));
        let rows = pool.output.len() / 2;
        let mut dcur = stats_pool_backward(&pool.input, &pool.output, rows, t, &dpooled);

        match &self.arch {
            Architecture::ConvNetA { n_mels, channels, .. } => {
                let h = *n_mels;
                let [c1, c2] = *channels;
                let l2 = get("conv2");
                d_layers.push(("conv2".to_string(), dcur.clone()));
                relu_backward(&l2.output, &mut dcur);
                let s2 = ConvShape {
                    cin: c1,
                    cout: c2,
                    h,
                    w: t,
                };
                let dp = dparams.as_mut().map(|d| split_wb(d, &r[2], &r[3]));
                let mut da1 = conv3x3_backward(&pad1(&l2.input, c1, h, t), s2, &p[r[2].clone()], &dcur, dp);
                let l1 = get("conv1");
                d_layers.push(("conv1".to_string(), da1.clone()));
                relu_backward(&l1.output, &mut da1);
                let s1 = ConvShape {
                    cin: 1,
                    cout: c1,
                    h,
                    w: t,
                };
                let dp = dparams.as_mut().map(|d| split_wb(d, &r[0], &r[1]));
                dcur = conv3x3_backward(&pad1(&l1.input, 1, h, t), s1, &p[r[0].clone()], &da1, dp);
            }
            Architecture::FrameNetB { frame_len, hidden, .. } => {
                for l in (0..hidden.len()).rev() {
                    let name = format!("fc{}", l + 1);
                    let act = get(&name);
                    d_layers.push((name, dcur.clone()));
                    relu_backward(&act.output, &mut dcur);
                    let cin = if l == 0 { *frame_len } else { hidden[l - 1] };
                    let dp = dparams.as_mut().map(|d| split_wb(d, &r[2 * l], &r[2 * l + 1]));
                    dcur = dense_backward(&act.input, cin, t, &p[r[2 * l].clone()], &dcur, dp);
                }
            }
        }
        d_layers.reverse();
        Ok(TrunkGrads {
            d_input: dcur,
            d_params: dparams,
            d_layer_outputs: d_layers,
        })
    }

    /// Unit-norm embedding plus the cache needed for backpropagation.
    pub fn forward(&self, x: &[f64]) -> Result<(Vec<f64>, ActivationCache)> {
        let (input, frontend) = self.frontend(x)?;
        let (e, mut trunk) = self.trunk_forward(&input)?;
        trunk.layers.insert(
            0,
            LayerActivation {
                name: "frontend".into(),
                input: x.to_vec(),
                output: input.data.clone(),
            },
        );
        Ok((
            e,
            ActivationCache {
                arch_id: self.arch.id(),
                signal_len: x.len(),
                frontend,
                trunk,
            },
        ))
    }

    pub fn embed(&self, x: &[f64]) -> Result<Vec<f64>> {
        let (input, _) = self.frontend(x)?;
        Ok(self.trunk_forward(&input)?.0)
    }

    pub fn backward(&self, cache: &ActivationCache, upstream: &[f64], want_params: bool) -> Result<Backward> {
        if cache.arch_id != self.arch.id() {
            return Err(Error::Invariant(
                "activation cache belongs to another architecture".into(),
            ));
        }
        let mut trunk = self.trunk_backward(&cache.trunk, upstream, want_params)?;
        let d = TrunkInput {
            rows: cache.trunk.input.rows,
            frames: cache.trunk.input.frames,
            data: std::mem::take(&mut trunk.d_input),
        };
        let d_wave = self.frontend_backward(&cache.frontend, cache.signal_len, &d)?;
        trunk.d_input = d.data;
        trunk
            .d_layer_outputs
            .insert(0, ("frontend".into(), trunk.d_input.clone()));
        Ok(Backward { d_wave, trunk })
    }

    /// Gradient of `<upstream, embedding>` w.r.t. the waveform samples.
    pub fn input_gradient(&self, cache: &ActivationCache, upstream: &[f64]) -> Result<Vec<f64>> {
        Ok(self.backward(cache, upstream, false)?.d_wave)
    }
}

fn split_wb<'a>(d: &'a mut [f64], w: &Range<usize>, b: &Range<usize>) -> (&'a mut [f64], &'a mut [f64]) {
    debug_assert_eq!(w.end, b.start);
    let (dw, db) = d[w.start..b.end].split_at_mut(w.len());
    (dw, db)
}

/// Enrolled speaker: unit-norm mean of per-utterance embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct SpeakerProfile {
    pub speaker_id: String,
    pub embedding: Vec<f64>,
}

/// Cosine similarity of two unit vectors.
pub fn score(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::shape("score dimensions", a.len(), b.len()));
    }
    Ok(dot(a, b))
}

pub fn enroll<S: AsRef<[f64]>>(model: &EmbeddingModel, utterances: &[S], speaker_id: &str) -> Result<SpeakerProfile> {
    if utterances.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "no enrollment utterances for speaker {speaker_id}"
        )));
    }
    let embs = utterances
        .iter()
        .map(|u| model.embed(u.as_ref()))
        .collect::<Result<Vec<_>>>()?;
    Ok(profile_from_embeddings(&embs, speaker_id))
}

pub fn profile_from_embeddings(embs: &[Vec<f64>], speaker_id: &str) -> SpeakerProfile {
    let dim = embs[0].len();
    let mut mean = vec![0.0; dim];
    for e in embs {
        axpy(1.0 / embs.len() as f64, e, &mut mean);
    }
    SpeakerProfile {
        speaker_id: speaker_id.to_string(),
        embedding: l2_normalize(&mean).0,
    }
}

#[cfg(test)]
mod tests;
