//! Canonical waveform representation and 16-bit PCM RIFF/WAVE I/O.
//!
//! Samples are kept on the 16-bit integer scale (`[-32768, 32767]`) as `f64`.
//! Nothing is normalised to `[-1, 1]`; perturbation budgets such as `eps = 40`
//! are expressed directly in integer sample units.

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use thiserror::Error;

pub const SAMPLE_RATE: u32 = 16_000;
pub const SAMPLE_MIN: f64 = -32768.0;
pub const SAMPLE_MAX: f64 = 32767.0;

#[derive(Debug, Error)]
pub enum WavError {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("malformed RIFF header: {0}")]
    Header(String),
    #[error("unsupported {field}: {value} (expected {expected})")]
    Unsupported {
        field: &'static str,
        value: u32,
        expected: u32,
    },
    #[error("sample {index} = {value} is outside the 16-bit range; clamp before writing")]
    OutOfRange { index: usize, value: f64 },
}

/// Mono PCM waveform on the 16-bit integer scale.
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>) -> Self {
        Self {
            samples,
            sample_rate: SAMPLE_RATE,
        }
    }

    pub fn zeros(len: usize) -> Self {
        Self::new(vec![0.0; len])
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.samples
    }

    /// True when every sample is finite and inside `[SAMPLE_MIN, SAMPLE_MAX]`.
    pub fn in_range(&self) -> bool {
        self.samples
            .iter()
            .all(|s| s.is_finite() && (SAMPLE_MIN..=SAMPLE_MAX).contains(s))
    }

    pub fn clamped(mut self) -> Self {
        for s in &mut self.samples {
            *s = s.clamp(SAMPLE_MIN, SAMPLE_MAX);
        }
        self
    }

    /// Rounds every sample to the nearest integer, ties away from zero.
    pub fn quantized(mut self) -> Self {
        for s in &mut self.samples {
            *s = s.round();
        }
        self
    }
}

fn read_u16(b: &[u8], at: usize) -> u16 {
    u16::from_le_bytes([b[at], b[at + 1]])
}

fn read_u32(b: &[u8], at: usize) -> u32 {
    u32::from_le_bytes([b[at], b[at + 1], b[at + 2], b[at + 3]])
}

/// Parses a RIFF/WAVE byte buffer holding 16-bit mono 16 kHz PCM.
pub fn decode_wav(bytes: &[u8]) -> Result<Waveform, WavError> {
    if bytes.len() < 12 {
        return Err(WavError::Header(format!(
            "file is {} bytes, shorter than the 12-byte RIFF preamble",
            bytes.len()
        )));
    }
    if &bytes[0..4] != b"RIFF" {
        return Err(WavError::Header("missing 'RIFF' chunk id".into()));
    }
    if &bytes[8..12] != b"WAVE" {
        return Err(WavError::Header("RIFF form type is not 'WAVE'".into()));
    }

    let mut pos = 12;
    let mut fmt_seen = false;
    let mut data: Option<&[u8]> = None;
    while pos + 8 <= bytes.len() {
        let id = &bytes[pos..pos + 4];
        let size = read_u32(bytes, pos + 4) as usize;
        let body_start = pos + 8;
        let body_end = body_start
            .checked_add(size)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| {
                WavError::Header(format!(
                    "chunk '{}' declares {} bytes past end of file",
                    String::from_utf8_lossy(id),
                    size
                ))
            })?;
        let body = &bytes[body_start..body_end];
        match id {
            b"fmt " => {
                if body.len() < 16 {
                    return Err(WavError::Header(format!("fmt chunk is {} bytes, need 16", body.len())));
                }
                let format = read_u16(body, 0) as u32;
                let channels = read_u16(body, 2) as u32;
                let rate = read_u32(body, 4);
                let bits = read_u16(body, 14) as u32;
                if format != 1 {
                    return Err(WavError::Unsupported {
                        field: "audio format",
                        value: format,
                        expected: 1,
                    });
                }
                if channels != 1 {
                    return Err(WavError::Unsupported {
                        field: "channel count",
                        value: channels,
                        expected: 1,
                    });
                }
                if rate != SAMPLE_RATE {
                    return Err(WavError::Unsupported {
                        field: "sample rate",
                        value: rate,
                        expected: SAMPLE_RATE,
                    });
                }
                if bits != 16 {
                    return Err(WavError::Unsupported {
                        field: "bits per sample",
                        value: bits,
                        expected: 16,
                    });
                }
                fmt_seen = true;
            }
            b"data" => data = Some(body),
            _ => {}
        }
        // chunks are word aligned
        pos = body_end + (size & 1);
    }

    if !fmt_seen {
        return Err(WavError::Header("no 'fmt ' chunk".into()));
    }
    let data = data.ok_or_else(|| WavError::Header("no 'data' chunk".into()))?;
    if data.len() % 2 != 0 {
        return Err(WavError::Header(format!(
            "data chunk length {} is not a multiple of the 2-byte block",
            data.len()
        )));
    }
    let samples = data
        .chunks_exact(2)
        .map(|c| i16::from_le_bytes([c[0], c[1]]) as f64)
        .collect();
    Ok(Waveform::new(samples))
}

/// Encodes a waveform as a canonical 44-byte-header PCM file.
pub fn encode_wav(w: &Waveform) -> Result<Vec<u8>, WavError> {
    let mut pcm = Vec::with_capacity(w.len() * 2);
    for (index, &value) in w.samples.iter().enumerate() {
        let r = value.round();
        if !r.is_finite() || !(SAMPLE_MIN..=SAMPLE_MAX).contains(&r) {
            return Err(WavError::OutOfRange { index, value });
        }
        pcm.extend_from_slice(&(r as i16).to_le_bytes());
    }
    let data_len = pcm.len() as u32;
    let mut out = Vec::with_capacity(44 + pcm.len());
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&(36 + data_len).to_le_bytes());
    out.extend_from_slice(b"WAVE");
    out.extend_from_slice(b"fmt ");
    out.extend_from_slice(&16u32.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes());
    out.extend_from_slice(&w.sample_rate.to_le_bytes());
    out.extend_from_slice(&(w.sample_rate * 2).to_le_bytes());
    out.extend_from_slice(&2u16.to_le_bytes());
    out.extend_from_slice(&16u16.to_le_bytes());
    out.extend_from_slice(b"data");
    out.extend_from_slice(&data_len.to_le_bytes());
    out.extend_from_slice(&pcm);
    Ok(out)
}

pub fn read_wav(path: impl AsRef<Path>) -> Result<Waveform, WavError> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|source| WavError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    decode_wav(&bytes)
}

pub fn write_wav(path: impl AsRef<Path>, w: &Waveform) -> Result<(), WavError> {
    let path = path.as_ref();
    let bytes = encode_wav(w)?;
    let io_err = |source| WavError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut f = fs::File::create(path).map_err(io_err)?;
    f.write_all(&bytes).map_err(io_err)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn roundtrip(samples: Vec<f64>) -> Vec<f64> {
        let bytes = encode_wav(&Waveform::new(samples)).unwrap();
        decode_wav(&bytes).unwrap().samples
    }

    #[test]
    fn zeros_and_extremes() {
        assert_eq!(roundtrip(vec![0.0, 0.0, 0.0]), vec![0.0, 0.0, 0.0]);
        assert_eq!(roundtrip(vec![32767.0]), vec![32767.0]);
        assert_eq!(roundtrip(vec![-32768.0]), vec![-32768.0]);
    }

    #[test]
    fn rounding_is_nearest_ties_away_from_zero() {
        // value -> stored integer
        let table = [
            (0.4, 0.0),
            (-0.4, 0.0),
            (0.5, 1.0),
            (-0.5, -1.0),
            (1.5, 2.0),
            (-1.5, -2.0),
            (2.5, 3.0),
            (-2.5, -3.0),
            (0.49999, 0.0),
            (32766.5, 32767.0),
        ];
        for (v, want) in table {
            assert_eq!(roundtrip(vec![v]), vec![want], "value {v}");
        }
    }

    #[test]
    fn rejects_out_of_range() {
        let err = encode_wav(&Waveform::new(vec![0.0, 32768.0])).unwrap_err();
        assert!(matches!(err, WavError::OutOfRange { index: 1, .. }));
        // rounds to -32769
        assert!(encode_wav(&Waveform::new(vec![-32768.5])).is_err());
        assert!(encode_wav(&Waveform::new(vec![f64::NAN])).is_err());
    }

    #[test]
    fn header_is_canonical() {
        let bytes = encode_wav(&Waveform::new(vec![1.0, -1.0])).unwrap();
        assert_eq!(bytes.len(), 48);
        assert_eq!(&bytes[0..4], b"RIFF");
        assert_eq!(read_u32(&bytes, 4), 40);
        assert_eq!(read_u32(&bytes, 24), 16_000);
        assert_eq!(read_u32(&bytes, 28), 32_000);
        assert_eq!(read_u32(&bytes, 40), 4);
        assert_eq!(&bytes[44..48], &[1, 0, 0xff, 0xff]);
    }

    fn patched(offset: usize, value: &[u8]) -> Vec<u8> {
        let mut b = encode_wav(&Waveform::new(vec![0.0; 4])).unwrap();
        b[offset..offset + value.len()].copy_from_slice(value);
        b
    }

    #[test]
    fn reports_offending_field() {
        let stereo = patched(22, &2u16.to_le_bytes());
        match decode_wav(&stereo).unwrap_err() {
            WavError::Unsupported { field, value, .. } => {
                assert_eq!(field, "channel count");
                assert_eq!(value, 2);
            }
            e => panic!("unexpected {e}"),
        }
        let rate = patched(24, &44_100u32.to_le_bytes());
        assert!(matches!(
            decode_wav(&rate).unwrap_err(),
            WavError::Unsupported {
                field: "sample rate",
                ..
            }
        ));
        let bits = patched(34, &8u16.to_le_bytes());
        assert!(matches!(
            decode_wav(&bits).unwrap_err(),
            WavError::Unsupported {
                field: "bits per sample",
                ..
            }
        ));
        let float = patched(20, &3u16.to_le_bytes());
        assert!(matches!(
            decode_wav(&float).unwrap_err(),
            WavError::Unsupported {
                field: "audio format",
                ..
            }
        ));
        assert!(matches!(
            decode_wav(&patched(0, b"RIFX")).unwrap_err(),
            WavError::Header(_)
        ));
        assert!(matches!(decode_wav(b"RIFF").unwrap_err(), WavError::Header(_)));
    }

    #[test]
    fn skips_unknown_chunks() {
        let base = encode_wav(&Waveform::new(vec![7.0, -9.0])).unwrap();
        let mut b = base[..12].to_vec();
        b.extend_from_slice(b"LIST");
        b.extend_from_slice(&3u32.to_le_bytes());
        b.extend_from_slice(&[1, 2, 3, 0]);
        b.extend_from_slice(&base[12..]);
        assert_eq!(decode_wav(&b).unwrap().samples, vec![7.0, -9.0]);
    }

    #[test]
    fn file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.wav");
        let w = Waveform::new(vec![3.0, -32768.0, 32767.0, 0.0]);
        write_wav(&p, &w).unwrap();
        assert_eq!(read_wav(&p).unwrap(), w);
        assert!(matches!(
            read_wav(dir.path().join("missing.wav")),
            Err(WavError::Io { .. })
        ));
    }
}
