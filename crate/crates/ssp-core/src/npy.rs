//! Minimal reader/writer for the NPY single-tensor container format.
//!
//! Covers exactly what the suite exchanges: C-order, little-endian `<f4`
//! or `<f8` arrays, optionally gzip-compressed (`.npy.gz`). Values are
//! surfaced as `f32`; the dataset containers and probability interchange
//! files are 32-bit on disk.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use flate2::read::GzDecoder;
use thiserror::Error;

const MAGIC: &[u8; 6] = b"\x93NUMPY";

#[derive(Debug, Error)]
pub enum NpyError {
    #[error("io error reading {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: not an NPY file (bad magic)")]
    BadMagic { path: String },
    #[error("{path}: unsupported NPY feature: {detail}")]
    Unsupported { path: String, detail: String },
    #[error("{path}: malformed NPY header: {detail}")]
    BadHeader { path: String, detail: String },
    #[error("{path}: payload holds {actual} values but shape {shape:?} needs {expected}")]
    LengthMismatch {
        path: String,
        shape: Vec<usize>,
        expected: usize,
        actual: usize,
    },
}

/// A dense C-order tensor plus its shape, as read from disk.
#[derive(Debug, Clone, PartialEq)]
pub struct NpyArray {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl NpyArray {
    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

/// Reads an `.npy` (or gzipped `.npy.gz`) array of dtype `<f4` or `<f8`.
pub fn read_npy(path: &Path) -> Result<NpyArray, NpyError> {
    let display = path.display().to_string();
    let file = File::open(path).map_err(|source| NpyError::Io {
        path: display.clone(),
        source,
    })?;
    let mut raw = Vec::new();
    let is_gz = path.extension().is_some_and(|e| e == "gz");
    if is_gz {
        GzDecoder::new(BufReader::new(file))
            .read_to_end(&mut raw)
            .map_err(|source| NpyError::Io {
                path: display.clone(),
                source,
            })?;
    } else {
        BufReader::new(file)
            .read_to_end(&mut raw)
            .map_err(|source| NpyError::Io {
                path: display.clone(),
                source,
            })?;
    }
    parse_npy(&raw, &display)
}

fn parse_npy(raw: &[u8], path: &str) -> Result<NpyArray, NpyError> {
    if raw.len() < 10 || &raw[..6] != MAGIC {
        return Err(NpyError::BadMagic { path: path.into() });
    }
    let (major, _minor) = (raw[6], raw[7]);
    let (header_len, header_start) = match major {
        1 => (u16::from_le_bytes([raw[8], raw[9]]) as usize, 10),
        2 | 3 => {
            if raw.len() < 12 {
                return Err(NpyError::BadMagic { path: path.into() });
            }
            (
                u32::from_le_bytes([raw[8], raw[9], raw[10], raw[11]]) as usize,
                12,
            )
        }
        v => {
            return Err(NpyError::Unsupported {
                path: path.into(),
                detail: format!("NPY version {v}"),
            })
        }
    };
    let body_start = header_start + header_len;
    if raw.len() < body_start {
        return Err(NpyError::BadHeader {
            path: path.into(),
            detail: "truncated header".into(),
        });
    }
    let header = std::str::from_utf8(&raw[header_start..body_start]).map_err(|_| {
        NpyError::BadHeader {
            path: path.into(),
            detail: "header is not utf-8".into(),
        }
    })?;

    let descr = extract_field(header, "descr").ok_or_else(|| NpyError::BadHeader {
        path: path.into(),
        detail: "missing descr".into(),
    })?;
    let fortran = extract_field(header, "fortran_order").ok_or_else(|| NpyError::BadHeader {
        path: path.into(),
        detail: "missing fortran_order".into(),
    })?;
    if fortran.trim() != "False" {
        return Err(NpyError::Unsupported {
            path: path.into(),
            detail: "fortran_order arrays".into(),
        });
    }
    let shape = parse_shape(header).ok_or_else(|| NpyError::BadHeader {
        path: path.into(),
        detail: "missing or malformed shape".into(),
    })?;

    let expected: usize = shape.iter().product();
    let body = &raw[body_start..];
    let data = match descr.trim_matches(['\'', '"']) {
        "<f4" | "|f4" => {
            if body.len() < expected * 4 {
                return Err(NpyError::LengthMismatch {
                    path: path.into(),
                    shape,
                    expected,
                    actual: body.len() / 4,
                });
            }
            body[..expected * 4]
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect()
        }
        "<f8" | "|f8" => {
            if body.len() < expected * 8 {
                return Err(NpyError::LengthMismatch {
                    path: path.into(),
                    shape,
                    expected,
                    actual: body.len() / 8,
                });
            }
            body[..expected * 8]
                .chunks_exact(8)
                .map(|b| {
                    f64::from_le_bytes([b[0], b[1], b[2], b[3], b[4], b[5], b[6], b[7]]) as f32
                })
                .collect()
        }
        other => {
            return Err(NpyError::Unsupported {
                path: path.into(),
                detail: format!("dtype {other}"),
            })
        }
    };
    Ok(NpyArray { shape, data })
}

fn extract_field<'a>(header: &'a str, key: &str) -> Option<&'a str> {
    let needle = format!("'{key}':");
    let start = header.find(&needle)? + needle.len();
    let rest = header[start..].trim_start();
    let end = rest.find(',')?;
    Some(rest[..end].trim())
}

fn parse_shape(header: &str) -> Option<Vec<usize>> {
    let start = header.find("'shape':")? + "'shape':".len();
    let rest = header[start..].trim_start();
    let open = rest.find('(')?;
    let close = rest.find(')')?;
    let inner = &rest[open + 1..close];
    let mut shape = Vec::new();
    for part in inner.split(',') {
        let part = part.trim();
        if part.is_empty() {
            continue;
        }
        shape.push(part.parse().ok()?);
    }
    Some(shape)
}

/// Writes a C-order `<f4` array. Gzip-compresses when `path` ends in `.gz`.
pub fn write_npy(path: &Path, shape: &[usize], data: &[f32]) -> Result<(), NpyError> {
    let display = path.display().to_string();
    let expected: usize = shape.iter().product();
    if expected != data.len() {
        return Err(NpyError::LengthMismatch {
            path: display.clone(),
            shape: shape.to_vec(),
            expected,
            actual: data.len(),
        });
    }
    let mut out = Vec::with_capacity(128 + data.len() * 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&[1, 0]);
    let shape_str = match shape.len() {
        1 => format!("({},)", shape[0]),
        _ => format!(
            "({})",
            shape
                .iter()
                .map(|d| d.to_string())
                .collect::<Vec<_>>()
                .join(", ")
        ),
    };
    let mut dict = format!("{{'descr': '<f4', 'fortran_order': False, 'shape': {shape_str}, }}");
    // Pad so that (10 + header_len) is a multiple of 64, newline-terminated.
    let unpadded = 10 + dict.len() + 1;
    let padding = (64 - unpadded % 64) % 64;
    dict.extend(std::iter::repeat(' ').take(padding));
    dict.push('\n');
    out.extend_from_slice(&(dict.len() as u16).to_le_bytes());
    out.extend_from_slice(dict.as_bytes());
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }

    let io_err = |source| NpyError::Io {
        path: display.clone(),
        source,
    };
    let file = File::create(path).map_err(io_err)?;
    if path.extension().is_some_and(|e| e == "gz") {
        let mut enc = flate2::write::GzEncoder::new(BufWriter::new(file), flate2::Compression::default());
        enc.write_all(&out).map_err(io_err)?;
        enc.finish().map_err(io_err)?;
    } else {
        let mut w = BufWriter::new(file);
        w.write_all(&out).map_err(io_err)?;
        w.flush().map_err(io_err)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn rejects_bad_magic() {
        let err = parse_npy(b"not an npy file at all", "x.npy").unwrap_err();
        assert!(matches!(err, NpyError::BadMagic { .. }));
    }

    #[test]
    fn reads_f8_as_f32() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.npy");
        // Hand-build an <f8 file.
        let mut raw: Vec<u8> = Vec::new();
        raw.extend_from_slice(MAGIC);
        raw.extend_from_slice(&[1, 0]);
        let dict = "{'descr': '<f8', 'fortran_order': False, 'shape': (2,), }          \n";
        raw.extend_from_slice(&(dict.len() as u16).to_le_bytes());
        raw.extend_from_slice(dict.as_bytes());
        raw.extend_from_slice(&1.5f64.to_le_bytes());
        raw.extend_from_slice(&(-2.0f64).to_le_bytes());
        std::fs::write(&path, &raw).unwrap();
        let arr = read_npy(&path).unwrap();
        assert_eq!(arr.shape, vec![2]);
        assert_eq!(arr.data, vec![1.5, -2.0]);
    }

    #[test]
    fn gzip_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.npy.gz");
        let data = vec![0.25f32, -1.0, 3.5, 0.0, 7.0, -0.5];
        write_npy(&path, &[2, 3], &data).unwrap();
        let back = read_npy(&path).unwrap();
        assert_eq!(back.shape, vec![2, 3]);
        assert_eq!(back.data, data);
    }

    proptest! {
        #[test]
        fn write_read_round_trip(values in proptest::collection::vec(-1e6f32..1e6, 1..200), cols in 1usize..8) {
            let rows = values.len() / cols;
            prop_assume!(rows > 0);
            let data = &values[..rows * cols];
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("rt.npy");
            write_npy(&path, &[rows, cols], data).unwrap();
            let back = read_npy(&path).unwrap();
            prop_assert_eq!(back.shape, vec![rows, cols]);
            prop_assert_eq!(back.data.as_slice(), data);
        }
    }
}
