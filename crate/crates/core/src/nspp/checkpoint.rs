//! Binary checkpoint format.
//!
//! ```text
//! "NSP1"  u32 version (= 1)
//! u32 input_bins  u32 channels  u32 num_blocks  u32 kernel_time
//! per tensor, until end of file:
//!   u16 name length, UTF-8 name, u8 rank, rank × u32 dims, f64 payload
//! ```
//! All integers and floats are little-endian.

use std::fs;
use std::path::Path;

use crate::error::{FormatError, Result};
use crate::io::ByteReader;

use super::model::{ModelArch, ModelParams, Tensor};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"NSP1";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn encode_model(params: &ModelParams) -> Vec<u8> {
    let arch = params.arch();
    let mut out = Vec::new();
    out.extend_from_slice(&CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    for v in [arch.input_bins, arch.channels, arch.num_blocks, arch.kernel_time] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    for t in params.tensors() {
        out.extend_from_slice(&(t.name.len() as u16).to_le_bytes());
        out.extend_from_slice(t.name.as_bytes());
        out.push(t.dims.len() as u8);
        for &d in &t.dims {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in &t.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn decode_model(bytes: &[u8]) -> Result<ModelParams> {
    let mut r = ByteReader::new(bytes);
    let magic = r.array::<4>("magic")?;
    if magic != CHECKPOINT_MAGIC {
        return Err(FormatError::BadMagic {
            expected: CHECKPOINT_MAGIC,
            found: magic,
        }
        .into());
    }
    let version = r.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(FormatError::UnsupportedVersion {
            found: version,
            supported: CHECKPOINT_VERSION,
        }
        .into());
    }
    let arch = ModelArch {
        input_bins: r.u32("architecture")? as usize,
        channels: r.u32("architecture")? as usize,
        num_blocks: r.u32("architecture")? as usize,
        kernel_time: r.u32("architecture")? as usize,
    };
    let mut tensors = Vec::new();
    while !r.is_empty() {
        let name_len = r.u16("tensor name length")? as usize;
        let name = String::from_utf8(r.take(name_len, "tensor name")?.to_vec())
            .map_err(|_| FormatError::Malformed("tensor name is not UTF-8".into()))?;
        let rank = r.u8("tensor rank")? as usize;
        let dims = (0..rank)
            .map(|_| r.u32("tensor dims").map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let len = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| FormatError::Malformed("tensor size overflows".into()))?;
        let data = r.f64_vec(len, "tensor payload")?;
        tensors.push(Tensor { name, dims, data });
    }
    ModelParams::from_tensors(arch, tensors)
        .map_err(|e| FormatError::Malformed(e.to_string()).into())
}

pub fn save_model(params: &ModelParams, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode_model(params))?;
    Ok(())
}

pub fn load_model(path: impl AsRef<Path>) -> Result<ModelParams> {
    decode_model(&fs::read(path)?)
}
