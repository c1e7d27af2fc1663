//! Packed quantized-weight export.
//!
//! Each weight tensor is quantized with its layer's integer bias and
//! stored as `(1 + e + m)`-bit codewords, MSB-first within bytes, padded
//! with zero bits to a byte boundary per tensor. The file is a header line,
//! a TOML manifest and the concatenated payload:
//!
//! ```text
//! minifloat-qat export v1 manifest-bytes=<n>\n
//! <n bytes of TOML manifest>
//! <payload>
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::checkpoint::{split_header, write_atomic};
use crate::codec::{decode, encode};
use crate::error::{Error, Result};
use crate::format::{Codeword, MinifloatFormat};
use crate::graph::ModelGraph;
use crate::quant::quantize;

pub const EXPORT_VERSION: u32 = 1;
const MAGIC: &str = "minifloat-qat export";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExportTensor {
    pub name: String,
    pub format: String,
    pub bias: i32,
    pub shape: Vec<usize>,
    pub count: u64,
    pub offset: u64,
    pub nbytes: u64,
}

/// Integer activation bias of one layer, for the deployment datapath.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExportActivation {
    pub layer: String,
    pub format: String,
    pub bias: i32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExportManifest {
    pub version: u32,
    pub payload_bytes: u64,
    pub tensors: Vec<ExportTensor>,
    pub activations: Vec<ExportActivation>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuantExport {
    pub manifest: ExportManifest,
    pub payload: Vec<u8>,
}

/// Packs `width`-bit codewords MSB-first, zero-padding the final byte.
pub fn pack_codewords(words: &[u32], width: u32) -> Vec<u8> {
    let mut out = vec![0u8; (words.len() * width as usize).div_ceil(8)];
    let mut bit = 0usize;
    for &w in words {
        for k in (0..width).rev() {
            if (w >> k) & 1 == 1 {
                out[bit / 8] |= 0x80 >> (bit % 8);
            }
            bit += 1;
        }
    }
    out
}

/// Inverse of [`pack_codewords`].
pub fn unpack_codewords(bytes: &[u8], width: u32, count: usize) -> Result<Vec<u32>> {
    if bytes.len() * 8 < count * width as usize {
        return Err(Error::Parse(format!("{} bytes cannot hold {count} codewords of {width} bits", bytes.len())));
    }
    let mut out = Vec::with_capacity(count);
    let mut bit = 0usize;
    for _ in 0..count {
        let mut w = 0u32;
        for _ in 0..width {
            w = (w << 1) | ((bytes[bit / 8] >> (7 - bit % 8)) & 1) as u32;
            bit += 1;
        }
        out.push(w);
    }
    Ok(out)
}

/// Quantizes `values` and packs their codewords.
pub fn pack_tensor(values: &[f64], fmt: MinifloatFormat, bias: i32) -> Result<Vec<u8>> {
    let q = quantize(values, fmt, bias as f64)?;
    let words = q.iter().map(|&v| encode(v, fmt, bias).map(|c| c.0)).collect::<Result<Vec<u32>>>()?;
    Ok(pack_codewords(&words, fmt.width()))
}

pub fn export_quantized(model: &ModelGraph) -> Result<QuantExport> {
    let mut payload = Vec::new();
    let mut tensors = Vec::new();
    let mut activations = Vec::new();
    for (i, b) in model.blocks() {
        let name = &model.nodes[i].name;
        let att = b
            .quant
            .as_ref()
            .ok_or_else(|| Error::InvalidArgument(format!("layer {name} has no quantizer")))?;
        let bias = att.weight.bias().map_err(|e| Error::InvalidArgument(format!("layer {name} weight: {e}")))?;
        let fmt = att.weight.format;
        let bytes = pack_tensor(b.weight.master.data(), fmt, bias)?;
        tensors.push(ExportTensor {
            name: format!("{name}.weight"),
            format: fmt.to_string(),
            bias,
            shape: b.weight.master.shape().to_vec(),
            count: b.weight.master.len() as u64,
            offset: payload.len() as u64,
            nbytes: bytes.len() as u64,
        });
        payload.extend_from_slice(&bytes);
        if let Some(a) = &att.activation {
            let bias = a.bias().map_err(|e| Error::InvalidArgument(format!("layer {name} activation: {e}")))?;
            activations.push(ExportActivation { layer: name.clone(), format: a.format.to_string(), bias });
        }
    }
    let manifest = ExportManifest { version: EXPORT_VERSION, payload_bytes: payload.len() as u64, tensors, activations };
    Ok(QuantExport { manifest, payload })
}

impl QuantExport {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let text = toml::to_string(&self.manifest).map_err(|e| Error::Parse(format!("export manifest: {e}")))?;
        let mut out = format!("{MAGIC} v{EXPORT_VERSION} manifest-bytes={}\n", text.len()).into_bytes();
        out.extend_from_slice(text.as_bytes());
        out.extend_from_slice(&self.payload);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (text, payload) = split_header(bytes, MAGIC, EXPORT_VERSION)?;
        let manifest: ExportManifest =
            toml::from_str(text).map_err(|e| Error::Parse(format!("export manifest: {}", e.message())))?;
        if payload.len() as u64 != manifest.payload_bytes {
            return Err(Error::Parse(format!(
                "payload is {} bytes, manifest says {}",
                payload.len(),
                manifest.payload_bytes
            )));
        }
        Ok(Self { manifest, payload: payload.to_vec() })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes()?)
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }

    /// Decoded values of tensor `name`.
    pub fn decode_tensor(&self, name: &str) -> Result<Vec<f64>> {
        let t = self
            .manifest
            .tensors
            .iter()
            .find(|t| t.name == name)
            .ok_or_else(|| Error::InvalidArgument(format!("no tensor {name} in export")))?;
        let fmt: MinifloatFormat = t.format.parse()?;
        let bytes = self
            .payload
            .get(t.offset as usize..(t.offset + t.nbytes) as usize)
            .ok_or_else(|| Error::Parse(format!("tensor {name} lies outside the payload")))?;
        unpack_codewords(bytes, fmt.width(), t.count as usize)?
            .into_iter()
            .map(|w| Codeword(w).validate(fmt).map(|c| decode(c, fmt, t.bias)))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pack_msb_first() {
        assert_eq!(pack_codewords(&[0b101], 3), vec![0b1010_0000]);
        assert_eq!(pack_codewords(&[0b111111, 0b000001], 6), vec![0xFC, 0x10]);
        let words: Vec<u32> = (0..37).map(|i| (i * 7) % 64).collect();
        assert_eq!(unpack_codewords(&pack_codewords(&words, 6), 6, 37).unwrap(), words);
    }

    #[test]
    fn thousand_six_bit_codewords_take_750_bytes() {
        let fmt: MinifloatFormat = "E3M2".parse().unwrap();
        let values: Vec<f64> = (0..1000).map(|i| (i as f64 - 500.0) / 37.0).collect();
        let bytes = pack_tensor(&values, fmt, 3).unwrap();
        assert_eq!(bytes.len(), 750);
    }
}
