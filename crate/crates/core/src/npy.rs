//! Reader and writer for the NPY v1.0 array format.
//!
//! Writes are always little-endian `<f4` (or `<u4` for label maps), C-order,
//! with the header padded so the payload starts on a 64-byte boundary. The
//! header text matches what numpy itself emits, so files round-trip
//! byte-for-byte through both tools.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Grid, LabelMap, Tensor, IGNORE};

const MAGIC: &[u8; 6] = b"\x93NUMPY";
const ALIGN: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Dtype {
    F32,
    F64,
    U8,
    U16,
    U32,
    I32,
    I64,
}

impl Dtype {
    fn parse(descr: &str) -> Result<Self> {
        let (order, code) = descr.split_at(1.min(descr.len()));
        let dtype = match code {
            "f4" => Dtype::F32,
            "f8" => Dtype::F64,
            "u1" => Dtype::U8,
            "u2" => Dtype::U16,
            "u4" => Dtype::U32,
            "i4" => Dtype::I32,
            "i8" => Dtype::I64,
            _ => return Err(Error::UnsupportedLayout(format!("dtype {descr:?}"))),
        };
        let single_byte = dtype == Dtype::U8;
        match order {
            "<" => Ok(dtype),
            "|" if single_byte => Ok(dtype),
            "=" if cfg!(target_endian = "little") => Ok(dtype),
            _ => Err(Error::UnsupportedLayout(format!(
                "byte order in {descr:?} (only little-endian is supported)"
            ))),
        }
    }

    fn size(self) -> usize {
        match self {
            Dtype::U8 => 1,
            Dtype::U16 => 2,
            Dtype::F32 | Dtype::U32 | Dtype::I32 => 4,
            Dtype::F64 | Dtype::I64 => 8,
        }
    }

    fn is_float(self) -> bool {
        matches!(self, Dtype::F32 | Dtype::F64)
    }
}

struct Header {
    dtype: Dtype,
    shape: Vec<usize>,
    payload_offset: usize,
}

/// Reads an NPY file as `f32`. `<f8` input is narrowed with round-to-nearest.
pub fn load_npy(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_f32(&bytes).map_err(|e| e.context(&path.display().to_string()))
}

/// Writes a finite tensor as little-endian `<f4`, C-order.
pub fn save_npy(tensor: &Tensor, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_f32(tensor)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Reads a rank-2 label map. Integer dtypes only; the dtype's maximum value
/// is the ignore sentinel.
pub fn load_labels(path: impl AsRef<Path>) -> Result<LabelMap> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_labels(&bytes).map_err(|e| e.context(&path.display().to_string()))
}

/// Writes a label map as `<u4`, ignored pixels as `u32::MAX`.
pub fn save_labels(labels: &LabelMap, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let (h, w) = labels.dims();
    let mut out = header_bytes("<u4", &[h, w]);
    out.reserve(h * w * 4);
    for &v in labels.as_slice() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn save_grid(grid: &Grid<f32>, path: impl AsRef<Path>) -> Result<()> {
    save_npy(&grid.to_tensor(), path)
}

pub fn load_grid(path: impl AsRef<Path>) -> Result<Grid<f32>> {
    let t = load_npy(path)?;
    match *t.shape() {
        [h, w] => Grid::new(h, w, t.into_data()),
        ref other => Err(Error::Validation(format!(
            "expected rank-2 array, got shape {other:?}"
        ))),
    }
}

/// Writes a finite `f64` array as `<f8`, C-order.
pub fn save_f64(shape: &[usize], data: &[f64], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    if shape.iter().product::<usize>() != data.len() || shape.contains(&0) {
        return Err(Error::Validation(format!(
            "shape {shape:?} does not fit {} values",
            data.len()
        )));
    }
    if let Some(v) = data.iter().find(|v| !v.is_finite()) {
        return Err(Error::Validation(format!("refusing to save non-finite value {v}")));
    }
    let mut out = header_bytes("<f8", shape);
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Reads a float array at full `f64` precision.
pub fn load_f64(path: impl AsRef<Path>) -> Result<(Vec<usize>, Vec<f64>)> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let inner = || -> Result<(Vec<usize>, Vec<f64>)> {
        let header = parse_header(&bytes)?;
        let n: usize = header.shape.iter().product();
        let payload = payload(&bytes, &header, n)?;
        let data = match header.dtype {
            Dtype::F32 => payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect(),
            Dtype::F64 => payload
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect(),
            other => {
                return Err(Error::UnsupportedLayout(format!(
                    "expected a float array, got {other:?}"
                )))
            }
        };
        Ok((header.shape, data))
    };
    inner().map_err(|e| e.context(&path.display().to_string()))
}

pub fn encode_f32(tensor: &Tensor) -> Result<Vec<u8>> {
    if tensor.shape().contains(&0) {
        return Err(Error::Validation(format!(
            "refusing to save degenerate shape {:?}",
            tensor.shape()
        )));
    }
    if let Some(v) = tensor.data().iter().find(|v| !v.is_finite()) {
        return Err(Error::Validation(format!(
            "refusing to save non-finite value {v}"
        )));
    }
    let mut out = header_bytes("<f4", tensor.shape());
    out.reserve(tensor.data().len() * 4);
    for v in tensor.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_f32(bytes: &[u8]) -> Result<Tensor> {
    let header = parse_header(bytes)?;
    if !header.dtype.is_float() {
        return Err(Error::UnsupportedLayout(format!(
            "expected a float array, got {:?}",
            header.dtype
        )));
    }
    let n: usize = header.shape.iter().product();
    let payload = payload(bytes, &header, n)?;
    let data = match header.dtype {
        Dtype::F32 => payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect(),
        Dtype::F64 => payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()) as f32)
            .collect(),
        _ => unreachable!(),
    };
    Tensor::new(header.shape, data)
}

fn decode_labels(bytes: &[u8]) -> Result<LabelMap> {
    let header = parse_header(bytes)?;
    let [h, w] = *header.shape.as_slice() else {
        return Err(Error::Validation(format!(
            "label map must be rank 2, got shape {:?}",
            header.shape
        )));
    };
    let payload = payload(bytes, &header, h * w)?;
    let convert = |v: i128, max: i128| -> Result<u32> {
        if v == max {
            Ok(IGNORE)
        } else if v < 0 || v >= IGNORE as i128 {
            Err(Error::Validation(format!("label value {v} out of range")))
        } else {
            Ok(v as u32)
        }
    };
    let size = header.dtype.size();
    let data = payload
        .chunks_exact(size)
        .map(|c| match header.dtype {
            Dtype::U8 => convert(c[0] as i128, u8::MAX as i128),
            Dtype::U16 => convert(
                u16::from_le_bytes(c.try_into().unwrap()) as i128,
                u16::MAX as i128,
            ),
            Dtype::U32 => convert(
                u32::from_le_bytes(c.try_into().unwrap()) as i128,
                u32::MAX as i128,
            ),
            Dtype::I32 => convert(
                i32::from_le_bytes(c.try_into().unwrap()) as i128,
                i32::MAX as i128,
            ),
            Dtype::I64 => convert(
                i64::from_le_bytes(c.try_into().unwrap()) as i128,
                i64::MAX as i128,
            ),
            Dtype::F32 | Dtype::F64 => Err(Error::UnsupportedLayout(
                "label maps must use an integer dtype".into(),
            )),
        })
        .collect::<Result<Vec<u32>>>()?;
    LabelMap::new(h, w, data)
}

fn payload<'a>(bytes: &'a [u8], header: &Header, n: usize) -> Result<&'a [u8]> {
    let expected = n * header.dtype.size();
    let body = &bytes[header.payload_offset..];
    if body.len() != expected {
        return Err(Error::Format(format!(
            "payload has {} bytes, header implies {expected}",
            body.len()
        )));
    }
    Ok(body)
}

fn header_bytes(descr: &str, shape: &[usize]) -> Vec<u8> {
    let shape_txt = match shape {
        [d] => format!("({d},)"),
        dims => format!(
            "({})",
            dims.iter()
                .map(|d| d.to_string())
                .collect::<Vec<_>>()
                .join(", ")
        ),
    };
    let mut dict = format!("{{'descr': '{descr}', 'fortran_order': False, 'shape': {shape_txt}, }}");
    // magic(6) + version(2) + header length(2) + dict + '\n'
    let unpadded = MAGIC.len() + 2 + 2 + dict.len() + 1;
    let pad = (ALIGN - unpadded % ALIGN) % ALIGN;
    dict.extend(std::iter::repeat_n(' ', pad));
    dict.push('\n');

    let mut out = Vec::with_capacity(unpadded + pad);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&[1, 0]);
    out.extend_from_slice(&(dict.len() as u16).to_le_bytes());
    out.extend_from_slice(dict.as_bytes());
    out
}

fn parse_header(bytes: &[u8]) -> Result<Header> {
    if bytes.len() < 10 || &bytes[..6] != MAGIC {
        return Err(Error::Format("bad magic string".into()));
    }
    let (len, start) = match (bytes[6], bytes[7]) {
        (1, 0) => (u16::from_le_bytes([bytes[8], bytes[9]]) as usize, 10),
        (2, 0) | (3, 0) if bytes.len() >= 12 => (
            u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize,
            12,
        ),
        (major, minor) => {
            return Err(Error::Format(format!(
                "unsupported format version {major}.{minor}"
            )))
        }
    };
    let end = start + len;
    if bytes.len() < end {
        return Err(Error::Format("truncated header".into()));
    }
    let text = std::str::from_utf8(&bytes[start..end])
        .map_err(|_| Error::Format("header is not ASCII".into()))?;
    let dict = parse_dict(text)?;

    let descr = dict
        .descr
        .ok_or_else(|| Error::Format("header lacks 'descr'".into()))?;
    let fortran = dict
        .fortran_order
        .ok_or_else(|| Error::Format("header lacks 'fortran_order'".into()))?;
    let shape = dict
        .shape
        .ok_or_else(|| Error::Format("header lacks 'shape'".into()))?;
    if fortran {
        return Err(Error::UnsupportedLayout("Fortran-order arrays".into()));
    }
    Ok(Header {
        dtype: Dtype::parse(&descr)?,
        shape,
        payload_offset: end,
    })
}

#[derive(Default)]
struct HeaderDict {
    descr: Option<String>,
    fortran_order: Option<bool>,
    shape: Option<Vec<usize>>,
}

/// Minimal parser for the Python dict literal numpy writes.
fn parse_dict(text: &str) -> Result<HeaderDict> {
    let bad = |what: &str| Error::Format(format!("malformed header dict ({what}): {text:?}"));
    let body = text
        .trim()
        .strip_prefix('{')
        .and_then(|t| t.strip_suffix('}'))
        .ok_or_else(|| bad("braces"))?;

    let mut dict = HeaderDict::default();
    let mut rest = body.trim_start();
    while !rest.is_empty() {
        let quote = rest.chars().next().ok_or_else(|| bad("key"))?;
        if quote != '\'' && quote != '"' {
            return Err(bad("key quote"));
        }
        let close = rest[1..].find(quote).ok_or_else(|| bad("key"))? + 1;
        let key = &rest[1..close];
        rest = rest[close + 1..].trim_start();
        rest = rest.strip_prefix(':').ok_or_else(|| bad("colon"))?.trim_start();

        match key {
            "descr" => {
                let q = rest.chars().next().ok_or_else(|| bad("descr"))?;
                if q != '\'' && q != '"' {
                    return Err(bad("descr quote"));
                }
                let close = rest[1..].find(q).ok_or_else(|| bad("descr"))? + 1;
                dict.descr = Some(rest[1..close].to_string());
                rest = &rest[close + 1..];
            }
            "fortran_order" => {
                if let Some(r) = rest.strip_prefix("False") {
                    dict.fortran_order = Some(false);
                    rest = r;
                } else if let Some(r) = rest.strip_prefix("True") {
                    dict.fortran_order = Some(true);
                    rest = r;
                } else {
                    return Err(bad("fortran_order"));
                }
            }
            "shape" => {
                let r = rest.strip_prefix('(').ok_or_else(|| bad("shape"))?;
                let close = r.find(')').ok_or_else(|| bad("shape"))?;
                let dims = r[..close]
                    .split(',')
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .map(|s| s.parse::<usize>().map_err(|_| bad("shape entry")))
                    .collect::<Result<Vec<_>>>()?;
                dict.shape = Some(dims);
                rest = &r[close + 1..];
            }
            _ => return Err(bad("unknown key")),
        }
        rest = rest.trim_start();
        rest = rest.strip_prefix(',').unwrap_or(rest).trim_start();
    }
    Ok(dict)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tmp() -> tempfile::TempDir {
        tempfile::tempdir().unwrap()
    }

    #[test]
    fn scalar_cube_round_trip() {
        let dir = tmp();
        let p = dir.path().join("a.npy");
        let t = Tensor::new(vec![1, 1, 1], vec![0.0]).unwrap();
        save_npy(&t, &p).unwrap();
        let back = load_npy(&p).unwrap();
        assert_eq!(back.shape(), &[1, 1, 1]);
        assert_eq!(back.get(&[0, 0, 0]), 0.0);
    }

    #[test]
    fn header_is_aligned_and_numpy_shaped() {
        let bytes = encode_f32(&Tensor::new(vec![3, 4, 5], vec![0.0; 60]).unwrap()).unwrap();
        let hlen = u16::from_le_bytes([bytes[8], bytes[9]]) as usize;
        assert_eq!((10 + hlen) % 64, 0);
        let text = std::str::from_utf8(&bytes[10..10 + hlen]).unwrap();
        assert!(text.starts_with("{'descr': '<f4', 'fortran_order': False, 'shape': (3, 4, 5), }"));
        assert!(text.ends_with('\n'));
        let one_d = encode_f32(&Tensor::new(vec![2], vec![1.0, 2.0]).unwrap()).unwrap();
        assert!(String::from_utf8_lossy(&one_d).contains("'shape': (2,)"));
    }

    #[test]
    fn resave_is_byte_identical() {
        let dir = tmp();
        let (a, b) = (dir.path().join("a.npy"), dir.path().join("b.npy"));
        let t = Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        save_npy(&t, &a).unwrap();
        save_npy(&load_npy(&a).unwrap(), &b).unwrap();
        assert_eq!(fs::read(a).unwrap(), fs::read(b).unwrap());
    }

    #[test]
    fn rejects_nan_and_degenerate() {
        let nan = Tensor::new(vec![1], vec![f32::NAN]).unwrap();
        assert!(matches!(encode_f32(&nan), Err(Error::Validation(_))));
        let empty = Tensor::new(vec![2, 0], vec![]).unwrap();
        assert!(matches!(encode_f32(&empty), Err(Error::Validation(_))));
    }

    #[test]
    fn corrupted_magic_is_format_error() {
        let mut bytes = encode_f32(&Tensor::new(vec![1], vec![1.0]).unwrap()).unwrap();
        bytes[1] = b'X';
        assert!(matches!(decode_f32(&bytes), Err(Error::Format(_))));
    }

    #[test]
    fn fortran_order_is_unsupported() {
        let mut bytes = encode_f32(&Tensor::new(vec![2, 2], vec![0.0; 4]).unwrap()).unwrap();
        let pos = bytes.windows(5).position(|w| w == b"False").unwrap();
        bytes[pos..pos + 5].copy_from_slice(b"True ");
        assert!(matches!(
            decode_f32(&bytes),
            Err(Error::UnsupportedLayout(_))
        ));
    }

    #[test]
    fn big_endian_is_unsupported() {
        let mut bytes = encode_f32(&Tensor::new(vec![1], vec![1.0]).unwrap()).unwrap();
        let text = String::from_utf8_lossy(&bytes).into_owned();
        let pos = text.find("<f4").unwrap();
        bytes[pos] = b'>';
        assert!(matches!(
            decode_f32(&bytes),
            Err(Error::UnsupportedLayout(_))
        ));
    }

    #[test]
    fn f64_is_narrowed_round_to_nearest() {
        let mut bytes = header_bytes("<f8", &[2]);
        let vals = [0.1f64, 1.0 + f64::EPSILON];
        for v in vals {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        let t = decode_f32(&bytes).unwrap();
        assert_eq!(t.data(), &[0.1f32, 1.0f32]);
    }

    #[test]
    fn truncated_payload_is_format_error() {
        let mut bytes = encode_f32(&Tensor::new(vec![4], vec![1.0; 4]).unwrap()).unwrap();
        bytes.truncate(bytes.len() - 2);
        assert!(matches!(decode_f32(&bytes), Err(Error::Format(_))));
    }

    #[test]
    fn labels_round_trip_with_sentinel() {
        let dir = tmp();
        let p = dir.path().join("l.npy");
        let labels = LabelMap::new(2, 2, vec![0, 3, IGNORE, 1]).unwrap();
        save_labels(&labels, &p).unwrap();
        assert_eq!(load_labels(&p).unwrap(), labels);
    }

    #[test]
    fn u8_labels_use_255_as_ignore() {
        let mut bytes = header_bytes("|u1", &[1, 3]);
        bytes.extend_from_slice(&[0, 255, 2]);
        let l = decode_labels(&bytes).unwrap();
        assert_eq!(l.as_slice(), &[0, IGNORE, 2]);
    }

    #[test]
    fn negative_labels_rejected() {
        let mut bytes = header_bytes("<i4", &[1, 1]);
        bytes.extend_from_slice(&(-1i32).to_le_bytes());
        assert!(decode_labels(&bytes).is_err());
    }
}
