//! Layer-CAM saliency over convolutional feature maps.
//!
//! Maps live on the layer's (frequency, time) grid, stored row-major with
//! frequency band 0 first. Rendering flips rows so low bands sit at the
//! bottom of the image.

use std::fmt::Write as _;
use std::path::Path;

use crate::nets::{EmbeddingModel, LayerKind, SpeakerProfile};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct SaliencyMap {
    pub layer: String,
    pub speaker_id: String,
    /// Score `y` the map explains.
    pub score: f64,
    /// Frequency rows.
    pub rows: usize,
    /// Time columns.
    pub cols: usize,
    /// Unnormalized `Z`, `[row][col]`.
    pub raw: Vec<f64>,
    /// Min-max normalized `Z`, all zero when `Z` is constant.
    pub normalized: Vec<f64>,
}

impl SaliencyMap {
    pub fn at(&self, row: usize, col: usize) -> f64 {
        self.normalized[row * self.cols + col]
    }

    /// Checks the `[0, 1]` range and the min 0 / max 1 contract.
    pub fn check_normalization(&self) -> Result<()> {
        let n = &self.normalized;
        if n.len() != self.rows * self.cols || self.raw.len() != n.len() {
            return Err(Error::Invariant("saliency grid size".into()));
        }
        if n.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Invariant("saliency value outside [0, 1]".into()));
        }
        let constant = self.raw.iter().all(|&v| v == self.raw[0]);
        let (lo, hi) = min_max(n);
        let ok = if constant { hi == 0.0 } else { lo == 0.0 && hi == 1.0 };
        if !ok {
            return Err(Error::Invariant(format!(
                "saliency normalization: min {lo}, max {hi}, constant {constant}"
            )));
        }
        Ok(())
    }

    /// CSV dump, one line per frequency row from band 0 upwards.
    pub fn to_csv(&self) -> String {
        let mut s = String::new();
        for r in 0..self.rows {
            let line: Vec<String> = (0..self.cols).map(|c| self.at(r, c).to_string()).collect();
            writeln!(s, "{}", line.join(",")).unwrap();
        }
        s
    }
}

fn min_max(v: &[f64]) -> (f64, f64) {
    v.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| {
        (lo.min(x), hi.max(x))
    })
}

/// Min-max normalization with a constant-input guard.
pub fn normalize(z: &[f64]) -> Vec<f64> {
    let (lo, hi) = min_max(z);
    if z.is_empty() || hi <= lo {
        return vec![0.0; z.len()];
    }
    z.iter().map(|v| ((v - lo) / (hi - lo)).clamp(0.0, 1.0)).collect()
}

/// `Z_ij = relu(sum_k relu(dY/dA^k_ij) A^k_ij)` from `[k][row][col]` activations
/// and gradients.
pub fn layer_cam_grid(
    activations: &[f64],
    gradients: &[f64],
    channels: usize,
    rows: usize,
    cols: usize,
) -> Result<Vec<f64>> {
    let n = channels * rows * cols;
    if activations.len() != n {
        return Err(Error::shape("layer-cam activations", n, activations.len()));
    }
    if gradients.len() != n {
        return Err(Error::shape("layer-cam gradients", n, gradients.len()));
    }
    let plane = rows * cols;
    let mut z = vec![0.0; plane];
    for k in 0..channels {
        let a = &activations[k * plane..(k + 1) * plane];
        let g = &gradients[k * plane..(k + 1) * plane];
        for ((zi, ai), gi) in z.iter_mut().zip(a).zip(g) {
            *zi += gi.max(0.0) * ai;
        }
    }
    z.iter_mut().for_each(|v| *v = v.max(0.0));
    Ok(z)
}

#[allow(clippy::too_many_arguments)]
pub fn layer_cam_from_parts(
    layer: &str,
    speaker_id: &str,
    score: f64,
    activations: &[f64],
    gradients: &[f64],
    channels: usize,
    rows: usize,
    cols: usize,
) -> Result<SaliencyMap> {
    let raw = layer_cam_grid(activations, gradients, channels, rows, cols)?;
    let normalized = normalize(&raw);
    let map = SaliencyMap {
        layer: layer.to_string(),
        speaker_id: speaker_id.to_string(),
        score,
        rows,
        cols,
        raw,
        normalized,
    };
    map.check_normalization()?;
    Ok(map)
}

/// Layer-CAM of the score `<profile, e(x)>` at a convolutional layer. `layer`
/// may be `"last-conv"`.
pub fn layer_cam(model: &EmbeddingModel, x: &[f64], profile: &SpeakerProfile, layer: &str) -> Result<SaliencyMap> {
    let name = if layer == "last-conv" {
        model
            .last_conv()
            .ok_or_else(|| Error::InvalidArgument(format!("{} has no convolutional layer", model.arch().name())))?
    } else {
        layer.to_string()
    };
    let info = model
        .layers()
        .into_iter()
        .find(|l| l.name == name)
        .ok_or_else(|| Error::InvalidArgument(format!("unknown layer '{name}'")))?;
    if info.kind != LayerKind::Conv {
        return Err(Error::InvalidArgument(format!("layer '{name}' is not convolutional")));
    }
    let (e, cache) = model.forward(x)?;
    let score = crate::nets::score(&profile.embedding, &e)?;
    let grads = model.trunk_backward(cache.trunk(), &profile.embedding, false)?;
    let act = cache
        .layer(&name)
        .ok_or_else(|| Error::Invariant(format!("layer '{name}' missing from cache")))?;
    let g = grads
        .layer(&name)
        .ok_or_else(|| Error::Invariant(format!("layer '{name}' missing from gradients")))?;
    let cols = cache.frames();
    let channels = info.channels;
    let rows = act.output.len() / (channels * cols);
    layer_cam_from_parts(&name, &profile.speaker_id, score, &act.output, g, channels, rows, cols)
}

/// `1 - cos` of the flattened normalized grids; 1 when either map is all zero.
pub fn saliency_shift(a: &SaliencyMap, b: &SaliencyMap) -> Result<f64> {
    if (a.rows, a.cols) != (b.rows, b.cols) {
        return Err(Error::InvalidArgument(format!(
            "saliency shapes differ: {}x{} vs {}x{}",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    let dot: f64 = a.normalized.iter().zip(&b.normalized).map(|(p, q)| p * q).sum();
    let na = a.normalized.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.normalized.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Ok(if na == nb { 0.0 } else { 1.0 });
    }
    Ok((1.0 - dot / (na * nb)).clamp(0.0, 1.0))
}

/// Pixel bytes of the P5 image: width = time, height = frequency, top row is
/// the highest band.
pub fn pixels(map: &SaliencyMap) -> Vec<u8> {
    let mut px = Vec::with_capacity(map.rows * map.cols);
    for r in (0..map.rows).rev() {
        for c in 0..map.cols {
            px.push((255.0 * map.at(r, c)).round() as u8);
        }
    }
    px
}

pub fn encode_pgm(map: &SaliencyMap) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", map.cols, map.rows).into_bytes();
    out.extend(pixels(map));
    out
}

pub fn render(map: &SaliencyMap, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_pgm(map)).map_err(|e| Error::io(path, e))
}

/// Grayscale image read back from a P5 file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Pgm {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

pub fn decode_pgm(bytes: &[u8]) -> Result<Pgm> {
    let bad = |reason: &str| Error::Format {
        kind: "PGM",
        reason: reason.to_string(),
    };
    let mut pos = 0;
    let mut fields = Vec::new();
    while fields.len() < 4 {
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated header"));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    if fields[0] != "P5" {
        return Err(bad("not a binary PGM"));
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| bad("bad header number"));
    let (width, height, maxval) = (num(&fields[1])?, num(&fields[2])?, num(&fields[3])?);
    if maxval != 255 {
        return Err(bad("only 8-bit images are supported"));
    }
    pos += 1;
    let data = bytes.get(pos..).ok_or_else(|| bad("missing raster"))?;
    if data.len() != width * height {
        return Err(bad("raster size mismatch"));
    }
    Ok(Pgm {
        width,
        height,
        pixels: data.to_vec(),
    })
}

pub fn read_pgm(path: impl AsRef<Path>) -> Result<Pgm> {
    let path = path.as_ref();
    decode_pgm(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
}
