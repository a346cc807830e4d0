//! The portable tensor file format.
//!
//! Layout: 7-byte magic "STNSR1\n", an 8-byte little-endian header
//! length, a UTF-8 JSON header (dtype, shape, order, optional spacing),
//! zero padding up to the first 64-byte-aligned offset, then raw
//! little-endian payload. Writers are deterministic, so identical
//! tensors produce byte-identical files on every platform.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use mlla_core::metrics::LabelMask;
use mlla_core::Tensor;

use crate::error::{CliError, Result};

pub const MAGIC: &[u8; 7] = b"STNSR1\n";
const ALIGN: usize = 64;

#[derive(Debug, Serialize, Deserialize)]
struct StfHeader {
    dtype: String,
    shape: Vec<usize>,
    order: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    spacing: Option<(f64, f64)>,
}

/// In-memory contents of an STF file.
#[derive(Debug, Clone, PartialEq)]
pub enum StfData {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
    U16 {
        shape: Vec<usize>,
        data: Vec<u16>,
        spacing: Option<(f64, f64)>,
    },
}

impl StfData {
    pub fn dtype_name(&self) -> &'static str {
        match self {
            StfData::F32(_) => "f32",
            StfData::F64(_) => "f64",
            StfData::U16 { .. } => "u16",
        }
    }

    pub fn shape(&self) -> Vec<usize> {
        match self {
            StfData::F32(t) => t.shape().to_vec(),
            StfData::F64(t) => t.shape().to_vec(),
            StfData::U16 { shape, .. } => shape.clone(),
        }
    }

    pub fn as_f32(&self) -> Result<&Tensor<f32>> {
        match self {
            StfData::F32(t) => Ok(t),
            other => Err(CliError::format(
                "dtype",
                format!("expected f32 payload, found {}", other.dtype_name()),
            )),
        }
    }

    pub fn into_mask(self) -> Result<LabelMask> {
        match self {
            StfData::U16 {
                shape,
                data,
                spacing,
            } => {
                if shape.len() != 2 {
                    return Err(CliError::format(
                        "shape",
                        format!("label mask must be 2-D, got {:?}", shape),
                    ));
                }
                Ok(LabelMask::new(
                    data,
                    shape[0],
                    shape[1],
                    spacing.unwrap_or((1.0, 1.0)),
                )?)
            }
            other => Err(CliError::format(
                "dtype",
                format!("expected u16 label payload, found {}", other.dtype_name()),
            )),
        }
    }
}

pub fn mask_to_stf(mask: &LabelMask) -> StfData {
    StfData::U16 {
        shape: vec![mask.height(), mask.width()],
        data: mask.labels().to_vec(),
        spacing: Some(mask.spacing()),
    }
}

fn payload_offset(header_len: usize) -> usize {
    let end = MAGIC.len() + 8 + header_len;
    end.div_ceil(ALIGN) * ALIGN
}

/// Serialize to the on-disk byte layout.
pub fn encode(data: &StfData) -> Result<Vec<u8>> {
    let header = StfHeader {
        dtype: data.dtype_name().to_string(),
        shape: data.shape(),
        order: "row-major".to_string(),
        spacing: match data {
            StfData::U16 { spacing, .. } => *spacing,
            _ => None,
        },
    };
    let header_json = serde_json::to_vec(&header)
        .map_err(|e| CliError::format("header", e.to_string()))?;
    let offset = payload_offset(header_json.len());

    let mut out = Vec::with_capacity(offset + 8 * 1024);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(header_json.len() as u64).to_le_bytes());
    out.extend_from_slice(&header_json);
    out.resize(offset, 0u8);
    match data {
        StfData::F32(t) => {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        StfData::F64(t) => {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        StfData::U16 { data, .. } => {
            for v in data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    Ok(out)
}

/// Parse the on-disk byte layout.
pub fn decode(bytes: &[u8]) -> Result<StfData> {
    if bytes.len() < MAGIC.len() + 8 {
        return Err(CliError::format("magic", "file shorter than the fixed prelude"));
    }
    if &bytes[..MAGIC.len()] != MAGIC {
        return Err(CliError::format(
            "magic",
            format!("expected {:?}", String::from_utf8_lossy(MAGIC)),
        ));
    }
    let mut len8 = [0u8; 8];
    len8.copy_from_slice(&bytes[MAGIC.len()..MAGIC.len() + 8]);
    let header_len = u64::from_le_bytes(len8) as usize;
    let header_end = MAGIC.len() + 8 + header_len;
    if bytes.len() < header_end {
        return Err(CliError::format("header-length", "header extends past end of file"));
    }
    let header: StfHeader = serde_json::from_slice(&bytes[MAGIC.len() + 8..header_end])
        .map_err(|e| CliError::format("header", e.to_string()))?;
    if header.order != "row-major" {
        return Err(CliError::format(
            "order",
            format!("unsupported element order '{}'", header.order),
        ));
    }
    let count: usize = header.shape.iter().product();
    let elem = match header.dtype.as_str() {
        "f32" => 4,
        "f64" => 8,
        "u16" => 2,
        other => {
            return Err(CliError::format(
                "dtype",
                format!("unknown dtype '{other}'"),
            ))
        }
    };
    let offset = payload_offset(header_len);
    let need = offset + count * elem;
    if bytes.len() < need {
        return Err(CliError::format(
            "payload",
            format!("expected {} bytes, file has {}", need, bytes.len()),
        ));
    }
    let payload = &bytes[offset..need];
    let data = match header.dtype.as_str() {
        "f32" => {
            let vals: Vec<f32> = payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            StfData::F32(Tensor::new(header.shape, vals)?)
        }
        "f64" => {
            let vals: Vec<f64> = payload
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes([c[0], c[1], c[2], c[3], c[4], c[5], c[6], c[7]]))
                .collect();
            StfData::F64(Tensor::new(header.shape, vals)?)
        }
        _ => {
            let vals: Vec<u16> = payload
                .chunks_exact(2)
                .map(|c| u16::from_le_bytes([c[0], c[1]]))
                .collect();
            StfData::U16 {
                shape: header.shape,
                data: vals,
                spacing: header.spacing,
            }
        }
    };
    Ok(data)
}

pub fn write_stf(path: impl AsRef<Path>, data: &StfData) -> Result<()> {
    let bytes = encode(data)?;
    let path = path.as_ref();
    let mut f = fs::File::create(path).map_err(|e| CliError::io(path.display().to_string(), e))?;
    f.write_all(&bytes)
        .map_err(|e| CliError::io(path.display().to_string(), e))?;
    Ok(())
}

pub fn read_stf(path: impl AsRef<Path>) -> Result<StfData> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| CliError::io(path.display().to_string(), e))?;
    decode(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use mlla_core::rng::{stream_rng, uniform};

    #[test]
    fn roundtrip_f32_is_bitwise() {
        let t: Tensor<f32> = uniform(&mut stream_rng(1, 0), &[3, 4, 5], -5.0, 5.0);
        let bytes = encode(&StfData::F32(t.clone())).unwrap();
        let back = decode(&bytes).unwrap();
        assert_eq!(back, StfData::F32(t));
    }

    #[test]
    fn roundtrip_u16_mask_preserves_labels_and_spacing() {
        let mask = LabelMask::new(vec![0, 1, 2, 1], 2, 2, (0.5, 2.0)).unwrap();
        let bytes = encode(&mask_to_stf(&mask)).unwrap();
        let back = decode(&bytes).unwrap().into_mask().unwrap();
        assert_eq!(back, mask);
    }

    #[test]
    fn payload_is_64_byte_aligned() {
        let t = Tensor::<f32>::zeros(&[7]);
        let bytes = encode(&StfData::F32(t)).unwrap();
        let header_len = u64::from_le_bytes(bytes[7..15].try_into().unwrap()) as usize;
        let off = payload_offset(header_len);
        assert_eq!(off % 64, 0);
        assert!(off >= 15 + header_len);
        // the padding region is zeroed
        assert!(bytes[15 + header_len..off].iter().all(|&b| b == 0));
    }

    #[test]
    fn bad_magic_names_the_field() {
        let t = Tensor::<f32>::zeros(&[2]);
        let mut bytes = encode(&StfData::F32(t)).unwrap();
        bytes[0] = b'X';
        match decode(&bytes) {
            Err(CliError::Format { field, .. }) => assert_eq!(field, "magic"),
            other => panic!("expected magic error, got {other:?}"),
        }
    }

    #[test]
    fn truncated_payload_names_the_field() {
        let t: Tensor<f32> = uniform(&mut stream_rng(2, 0), &[16], -1.0, 1.0);
        let bytes = encode(&StfData::F32(t)).unwrap();
        match decode(&bytes[..bytes.len() - 3]) {
            Err(CliError::Format { field, .. }) => assert_eq!(field, "payload"),
            other => panic!("expected payload error, got {other:?}"),
        }
    }

    #[test]
    fn unknown_dtype_rejected() {
        let header = br#"{"dtype":"i8","shape":[1],"order":"row-major"}"#;
        let mut bytes = Vec::new();
        bytes.extend_from_slice(MAGIC);
        bytes.extend_from_slice(&(header.len() as u64).to_le_bytes());
        bytes.extend_from_slice(header);
        bytes.resize(payload_offset(header.len()) + 1, 0);
        match decode(&bytes) {
            Err(CliError::Format { field, .. }) => assert_eq!(field, "dtype"),
            other => panic!("expected dtype error, got {other:?}"),
        }
    }
}
