//! "SHT1" binary tensor files.
//!
//! Layout, all integers little-endian:
//!
//! | offset        | size       | field                          |
//! |---------------|------------|--------------------------------|
//! | 0             | 4          | magic `b"SHT1"`                |
//! | 4             | 1          | dtype code (0 = f32, 1 = u8)   |
//! | 5             | 1          | rank `r`                       |
//! | 6             | 4 `r`      | dims as `u32`, slowest first   |
//! | 6 + 4 `r`     | rest       | C-order payload                |
//!
//! Feature and probability maps are rank 3 `f32`; label maps are rank 2 `u8`.
//! Float payloads are stored at single precision, so `read(write(x)) == x`
//! holds exactly for maps whose values are representable in `f32`.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{FeatureMap, LabelMap, ProbMap};

pub const MAGIC: &[u8; 4] = b"SHT1";
const HEADER_FIXED: usize = 6;
/// Guards against absurd headers before allocating.
const MAX_ELEMENTS: u64 = 1 << 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum Dtype {
    F32 = 0,
    U8 = 1,
}

impl Dtype {
    fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(Dtype::F32),
            1 => Ok(Dtype::U8),
            other => Err(Error::UnknownDtype(other)),
        }
    }

    fn name(self) -> &'static str {
        match self {
            Dtype::F32 => "f32",
            Dtype::U8 => "u8",
        }
    }

    fn width(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::U8 => 1,
        }
    }
}

/// Untyped decoded file contents.
#[derive(Debug, Clone, PartialEq)]
pub enum RawTensor {
    F32 { dims: Vec<usize>, values: Vec<f32> },
    U8 { dims: Vec<usize>, values: Vec<u8> },
}

impl RawTensor {
    pub fn dims(&self) -> &[usize] {
        match self {
            RawTensor::F32 { dims, .. } | RawTensor::U8 { dims, .. } => dims,
        }
    }

    pub fn dtype(&self) -> Dtype {
        match self {
            RawTensor::F32 { .. } => Dtype::F32,
            RawTensor::U8 { .. } => Dtype::U8,
        }
    }
}

/// A typed payload for [`write_tensor`].
#[derive(Debug, Clone, Copy)]
pub enum Payload<'a> {
    Features(&'a FeatureMap),
    Probs(&'a ProbMap),
    Labels(&'a LabelMap),
}

pub fn encode(raw: &RawTensor) -> Vec<u8> {
    let dims = raw.dims();
    let mut out = Vec::with_capacity(HEADER_FIXED + 4 * dims.len());
    out.extend_from_slice(MAGIC);
    out.push(raw.dtype() as u8);
    out.push(dims.len() as u8);
    for &d in dims {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    match raw {
        RawTensor::F32 { values, .. } => {
            out.reserve(values.len() * 4);
            for v in values {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        RawTensor::U8 { values, .. } => out.extend_from_slice(values),
    }
    out
}

pub fn decode(bytes: &[u8]) -> Result<RawTensor> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        let mut found = [0u8; 4];
        let n = bytes.len().min(4);
        found[..n].copy_from_slice(&bytes[..n]);
        return Err(Error::BadMagic { found });
    }
    if bytes.len() < HEADER_FIXED {
        return Err(Error::TruncatedPayload {
            expected: HEADER_FIXED,
            found: bytes.len(),
        });
    }
    let dtype = Dtype::from_code(bytes[4])?;
    let rank = bytes[5] as usize;
    let header_len = HEADER_FIXED + 4 * rank;
    if bytes.len() < header_len {
        return Err(Error::TruncatedPayload {
            expected: header_len,
            found: bytes.len(),
        });
    }
    let dims32: Vec<u32> = bytes[HEADER_FIXED..header_len]
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    let count = dims32
        .iter()
        .try_fold(1u64, |acc, &d| acc.checked_mul(d as u64))
        .filter(|&n| n <= MAX_ELEMENTS)
        .ok_or_else(|| Error::DimsOverflow {
            dims: dims32.clone(),
        })?;
    let count = usize::try_from(count).map_err(|_| Error::DimsOverflow {
        dims: dims32.clone(),
    })?;
    let payload = &bytes[header_len..];
    let expected = count * dtype.width();
    if payload.len() < expected {
        return Err(Error::TruncatedPayload {
            expected,
            found: payload.len(),
        });
    }
    if payload.len() > expected {
        return Err(Error::invalid(format!(
            "{} trailing bytes after payload",
            payload.len() - expected
        )));
    }
    let dims = dims32.iter().map(|&d| d as usize).collect();
    Ok(match dtype {
        Dtype::F32 => RawTensor::F32 {
            dims,
            values: payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect(),
        },
        Dtype::U8 => RawTensor::U8 {
            dims,
            values: payload.to_vec(),
        },
    })
}

pub fn to_raw(payload: Payload<'_>) -> Result<RawTensor> {
    Ok(match payload {
        Payload::Features(f) => {
            let (c, h, w) = f.shape();
            RawTensor::F32 {
                dims: vec![c, h, w],
                values: f.values().iter().map(|&v| v as f32).collect(),
            }
        }
        Payload::Probs(p) => {
            p.validate()?;
            let (k, h, w) = p.shape();
            RawTensor::F32 {
                dims: vec![k, h, w],
                values: p.values().iter().map(|&v| v as f32).collect(),
            }
        }
        Payload::Labels(l) => RawTensor::U8 {
            dims: vec![l.height(), l.width()],
            values: l.values().to_vec(),
        },
    })
}

pub fn write_raw(path: &Path, raw: &RawTensor) -> Result<()> {
    let bytes = encode(raw);
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&bytes).map_err(|e| Error::io(path, e))
}

pub fn read_raw(path: &Path) -> Result<RawTensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

/// Validates and writes one map.
pub fn write_tensor(path: &Path, payload: Payload<'_>) -> Result<()> {
    write_raw(path, &to_raw(payload)?)
}

fn expect_f32(raw: RawTensor, rank: usize) -> Result<(Vec<usize>, Vec<f64>)> {
    match raw {
        RawTensor::F32 { dims, values } => {
            if dims.len() != rank {
                return Err(Error::RankMismatch {
                    expected: rank,
                    found: dims.len(),
                });
            }
            Ok((dims, values.into_iter().map(f64::from).collect()))
        }
        RawTensor::U8 { .. } => Err(Error::DtypeMismatch {
            expected: Dtype::F32.name(),
            found: Dtype::U8.name(),
        }),
    }
}

pub fn features_from_raw(raw: RawTensor) -> Result<FeatureMap> {
    let (dims, values) = expect_f32(raw, 3)?;
    FeatureMap::new(dims[0], dims[1], dims[2], values)
}

pub fn probs_from_raw(raw: RawTensor) -> Result<ProbMap> {
    let (dims, values) = expect_f32(raw, 3)?;
    ProbMap::new(dims[0], dims[1], dims[2], values)
}

/// `num_classes` defaults to `max(2, largest non-ignore label + 1)`.
pub fn labels_from_raw(raw: RawTensor, num_classes: Option<usize>) -> Result<LabelMap> {
    match raw {
        RawTensor::U8 { dims, values } => {
            if dims.len() != 2 {
                return Err(Error::RankMismatch {
                    expected: 2,
                    found: dims.len(),
                });
            }
            let k = num_classes.unwrap_or_else(|| {
                values
                    .iter()
                    .filter(|&&v| v != crate::tensor::IGNORE)
                    .map(|&v| v as usize + 1)
                    .max()
                    .unwrap_or(0)
                    .max(2)
            });
            LabelMap::new(k, dims[0], dims[1], values)
        }
        RawTensor::F32 { .. } => Err(Error::DtypeMismatch {
            expected: Dtype::U8.name(),
            found: Dtype::F32.name(),
        }),
    }
}

pub fn read_features(path: &Path) -> Result<FeatureMap> {
    features_from_raw(read_raw(path)?)
}

pub fn read_probs(path: &Path) -> Result<ProbMap> {
    probs_from_raw(read_raw(path)?)
}

pub fn read_labels(path: &Path, num_classes: Option<usize>) -> Result<LabelMap> {
    labels_from_raw(read_raw(path)?, num_classes)
}

/// Rank-2 `f32` matrix, used for decoder weights in checkpoints.
pub fn write_matrix(path: &Path, rows: usize, cols: usize, values: &[f64]) -> Result<()> {
    assert_eq!(values.len(), rows * cols);
    write_raw(
        path,
        &RawTensor::F32 {
            dims: vec![rows, cols],
            values: values.iter().map(|&v| v as f32).collect(),
        },
    )
}

pub fn read_matrix(path: &Path) -> Result<(usize, usize, Vec<f64>)> {
    let (dims, values) = expect_f32(read_raw(path)?, 2)?;
    Ok((dims[0], dims[1], values))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeededRng;
    use crate::tensor::IGNORE;
    use proptest::prelude::*;

    #[test]
    fn zeros_layout() {
        let f = FeatureMap::zeros(1, 2, 2);
        let bytes = encode(&to_raw(Payload::Features(&f)).unwrap());
        assert_eq!(&bytes[..4], b"SHT1");
        assert_eq!(bytes[4], 0);
        assert_eq!(bytes[5], 3);
        assert_eq!(&bytes[6..18], &[1, 0, 0, 0, 2, 0, 0, 0, 2, 0, 0, 0]);
        assert_eq!(bytes.len(), 18 + 16);
        assert!(bytes[18..].iter().all(|&b| b == 0));
        let back = features_from_raw(decode(&bytes).unwrap()).unwrap();
        assert_eq!(back, f);
    }

    #[test]
    fn ignore_labels_payload() {
        let l = LabelMap::filled(4, 3, 3, IGNORE);
        let bytes = encode(&to_raw(Payload::Labels(&l)).unwrap());
        assert_eq!(bytes[4], 1);
        assert_eq!(&bytes[bytes.len() - 9..], &[0xFF; 9]);
        assert_eq!(bytes.len(), 6 + 8 + 9);
        assert_eq!(labels_from_raw(decode(&bytes).unwrap(), Some(4)).unwrap(), l);
    }

    #[test]
    fn invalid_prob_map_is_refused() {
        // bypasses the validating constructor
        let p = ProbMap::from_raw(2, 1, 1, vec![0.7, 0.7]);
        let dir = tempfile::tempdir().unwrap();
        let err = write_tensor(&dir.path().join("p.sht"), Payload::Probs(&p)).unwrap_err();
        assert!(matches!(err, Error::Validation(_)));
        assert!(!dir.path().join("p.sht").exists());
    }

    #[test]
    fn seeded_roundtrip_via_file() {
        let mut rng = SeededRng::new(11);
        let values: Vec<f64> = (0..8 * 5 * 7).map(|_| rng.normal() as f32 as f64).collect();
        let f = FeatureMap::new(8, 5, 7, values).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.sht");
        write_tensor(&path, Payload::Features(&f)).unwrap();
        assert_eq!(read_features(&path).unwrap(), f);
    }

    #[test]
    fn corruption_cases() {
        let f = FeatureMap::filled(2, 3, 3, 1.5);
        let bytes = encode(&to_raw(Payload::Features(&f)).unwrap());
        let cut = &bytes[..bytes.len() - 5];
        assert!(matches!(
            decode(cut),
            Err(Error::TruncatedPayload { expected: 72, found: 67 })
        ));
        let mut bad = bytes.clone();
        bad[4] = 7;
        assert!(matches!(decode(&bad), Err(Error::UnknownDtype(7))));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode(&bad), Err(Error::BadMagic { .. })));
        let mut huge = b"SHT1\x00\x03".to_vec();
        for _ in 0..3 {
            huge.extend_from_slice(&u32::MAX.to_le_bytes());
        }
        assert!(matches!(decode(&huge), Err(Error::DimsOverflow { .. })));
        assert!(matches!(
            decode(b"SHT1\x00\x03\x01\x00"),
            Err(Error::TruncatedPayload { .. })
        ));
    }

    #[test]
    fn type_mismatches() {
        let l = LabelMap::filled(2, 2, 2, 1);
        let raw = to_raw(Payload::Labels(&l)).unwrap();
        assert!(matches!(
            features_from_raw(raw),
            Err(Error::DtypeMismatch { .. })
        ));
        let f = FeatureMap::zeros(1, 2, 2);
        let raw = to_raw(Payload::Features(&f)).unwrap();
        assert!(matches!(
            labels_from_raw(raw.clone(), None),
            Err(Error::DtypeMismatch { .. })
        ));
        let RawTensor::F32 { values, .. } = raw else { unreachable!() };
        let flat = RawTensor::F32 { dims: vec![4], values };
        assert!(matches!(
            features_from_raw(flat),
            Err(Error::RankMismatch { expected: 3, found: 1 })
        ));
    }

    #[test]
    fn large_shape_roundtrip() {
        let mut rng = SeededRng::new(3);
        let (c, h, w) = (8, 512, 512);
        let values: Vec<f64> = (0..c * h * w).map(|_| rng.uniform(-4.0, 4.0) as f32 as f64).collect();
        let f = FeatureMap::new(c, h, w, values).unwrap();
        let back = features_from_raw(decode(&encode(&to_raw(Payload::Features(&f)).unwrap())).unwrap()).unwrap();
        assert_eq!(back, f);
    }

    proptest! {
        #[test]
        fn label_roundtrip(h in 1usize..40, w in 1usize..40, seed in any::<u64>()) {
            let mut rng = SeededRng::new(seed);
            let values: Vec<u8> = (0..h * w)
                .map(|_| if rng.below(10) == 0 { IGNORE } else { rng.below(6) as u8 })
                .collect();
            let l = LabelMap::new(6, h, w, values).unwrap();
            let back = labels_from_raw(decode(&encode(&to_raw(Payload::Labels(&l)).unwrap())).unwrap(), Some(6)).unwrap();
            prop_assert_eq!(back, l);
        }

        #[test]
        fn prob_roundtrip(k in 2usize..6, h in 1usize..20, w in 1usize..20, seed in any::<u64>()) {
            // dyadic probabilities are exact in f32
            let mut rng = SeededRng::new(seed);
            let n = h * w;
            let mut values = vec![0.0; k * n];
            for p in 0..n {
                let hot = rng.below(k);
                let other = (hot + 1) % k;
                values[hot * n + p] = 0.75;
                values[other * n + p] = 0.25;
            }
            let p = ProbMap::new(k, h, w, values).unwrap();
            let back = probs_from_raw(decode(&encode(&to_raw(Payload::Probs(&p)).unwrap())).unwrap()).unwrap();
            prop_assert_eq!(back, p);
        }

        #[test]
        fn decode_never_panics(bytes in prop::collection::vec(any::<u8>(), 0..64)) {
            let _ = decode(&bytes);
        }
    }
}
