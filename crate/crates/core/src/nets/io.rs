//! Binary model and profile files. All integers and floats are little-endian.
//!
//! Model: `b"ASVM"`, version `u32`, arch id `u32`, dim count `u32`, dims
//! `u32...`, input scale `f64`, parameter count `u64`, parameters `f64...`.
//!
//! Profiles: `b"ASVP"`, version `u32`, count `u32`, dim `u32`, then per
//! profile an id length `u32`, UTF-8 id bytes and `dim` `f64` values.

use std::path::Path;

use super::{Architecture, EmbeddingModel, SpeakerProfile};
use crate::{Error, Result};

const MODEL_MAGIC: &[u8; 4] = b"ASVM";
const PROFILE_MAGIC: &[u8; 4] = b"ASVP";
const VERSION: u32 = 1;

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    kind: &'static str,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Format {
                kind: self.kind,
                reason: format!("truncated at byte {}", self.pos),
            });
        }
        self.pos += n;
        Ok(&self.buf[self.pos - n..self.pos])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn fail<T>(&self, reason: impl Into<String>) -> Result<T> {
        Err(Error::Format {
            kind: self.kind,
            reason: reason.into(),
        })
    }

    fn header(&mut self, magic: &[u8; 4]) -> Result<()> {
        if self.take(4)? != magic {
            return self.fail("bad magic");
        }
        let v = self.u32()?;
        if v != VERSION {
            return self.fail(format!("unsupported version {v}"));
        }
        Ok(())
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return self.fail(format!("{} trailing bytes", self.buf.len() - self.pos));
        }
        Ok(())
    }
}

pub fn encode_model(m: &EmbeddingModel) -> Vec<u8> {
    let (dims, scale): (Vec<usize>, f64) = match m.arch() {
        Architecture::ConvNetA {
            n_mels,
            channels,
            embedding_dim,
        } => (vec![*n_mels, channels[0], channels[1], *embedding_dim], 1.0),
        Architecture::FrameNetB {
            frame_len,
            hop,
            hidden,
            embedding_dim,
            input_scale,
        } => {
            let mut d = vec![*frame_len, *hop, *embedding_dim];
            d.extend(hidden);
            (d, *input_scale)
        }
    };
    let mut out = Vec::with_capacity(32 + 8 * m.params().len());
    out.extend_from_slice(MODEL_MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&m.arch().id().to_le_bytes());
    out.extend_from_slice(&(dims.len() as u32).to_le_bytes());
    for d in dims {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    out.extend_from_slice(&scale.to_le_bytes());
    out.extend_from_slice(&(m.params().len() as u64).to_le_bytes());
    for p in m.params() {
        out.extend_from_slice(&p.to_le_bytes());
    }
    out
}

pub fn decode_model(buf: &[u8]) -> Result<EmbeddingModel> {
    let mut r = Reader {
        buf,
        pos: 0,
        kind: "model",
    };
    r.header(MODEL_MAGIC)?;
    let id = r.u32()?;
    let nd = r.u32()? as usize;
    if nd > 64 {
        return r.fail(format!("implausible dim count {nd}"));
    }
    let dims = (0..nd)
        .map(|_| r.u32().map(|d| d as usize))
        .collect::<Result<Vec<_>>>()?;
    let scale = r.f64()?;
    let arch = match (id, dims.as_slice()) {
        (1, &[n_mels, c1, c2, embedding_dim]) => Architecture::ConvNetA {
            n_mels,
            channels: [c1, c2],
            embedding_dim,
        },
        (2, &[frame_len, hop, embedding_dim, ref hidden @ ..]) => Architecture::FrameNetB {
            frame_len,
            hop,
            hidden: hidden.to_vec(),
            embedding_dim,
            input_scale: scale,
        },
        _ => return r.fail(format!("unknown architecture id {id} with {nd} dims")),
    };
    let n = r.u64()? as usize;
    if n != arch.param_count() {
        return r.fail(format!(
            "parameter count {n} does not match architecture ({})",
            arch.param_count()
        ));
    }
    if buf.len() - r.pos != 8 * n {
        return r.fail("parameter block length mismatch");
    }
    let params = (0..n).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
    r.finish()?;
    EmbeddingModel::from_params(arch, params)
}

pub fn save_model(m: &EmbeddingModel, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_model(m)).map_err(|e| Error::io(path, e))
}

pub fn load_model(path: impl AsRef<Path>) -> Result<EmbeddingModel> {
    let path = path.as_ref();
    decode_model(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
}

pub fn encode_profiles(profiles: &[SpeakerProfile]) -> Result<Vec<u8>> {
    let dim = profiles.first().map_or(0, |p| p.embedding.len());
    let mut out = Vec::new();
    out.extend_from_slice(PROFILE_MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(profiles.len() as u32).to_le_bytes());
    out.extend_from_slice(&(dim as u32).to_le_bytes());
    for p in profiles {
        if p.embedding.len() != dim {
            return Err(Error::shape("profile dimension", dim, p.embedding.len()));
        }
        out.extend_from_slice(&(p.speaker_id.len() as u32).to_le_bytes());
        out.extend_from_slice(p.speaker_id.as_bytes());
        for v in &p.embedding {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_profiles(buf: &[u8]) -> Result<Vec<SpeakerProfile>> {
    let mut r = Reader {
        buf,
        pos: 0,
        kind: "profiles",
    };
    r.header(PROFILE_MAGIC)?;
    let count = r.u32()? as usize;
    let dim = r.u32()? as usize;
    let mut out = Vec::new();
    for _ in 0..count {
        let len = r.u32()? as usize;
        let id = match std::str::from_utf8(r.take(len)?) {
            Ok(s) => s.to_string(),
            Err(_) => return r.fail("speaker id is not UTF-8"),
        };
        let embedding = (0..dim).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
        out.push(SpeakerProfile {
            speaker_id: id,
            embedding,
        });
    }
    r.finish()?;
    Ok(out)
}

pub fn save_profiles(profiles: &[SpeakerProfile], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_profiles(profiles)?).map_err(|e| Error::io(path, e))
}

pub fn load_profiles(path: impl AsRef<Path>) -> Result<Vec<SpeakerProfile>> {
    let path = path.as_ref();
    decode_profiles(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
}
