//! `EXWT` tensor blobs: magic, `u32` rank, `rank` x `u32` dims, then
//! little-endian `f32` values in row-major order.

use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"EXWT";

pub fn encode<T: Scalar>(tensor: &Tensor<T>) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + 4 * tensor.rank() + 4 * tensor.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(tensor.rank() as u32).to_le_bytes());
    for &d in tensor.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in tensor.data() {
        out.extend_from_slice(&(v.widen() as f32).to_le_bytes());
    }
    out
}

pub fn decode<T: Scalar>(bytes: &[u8]) -> Result<Tensor<T>> {
    let u32_at = |at: usize| -> Result<u32> {
        bytes
            .get(at..at + 4)
            .map(|b| u32::from_le_bytes(b.try_into().unwrap()))
            .ok_or_else(|| Error::format("blob", format!("truncated header at byte {at}")))
    };
    if bytes.len() < 8 || &bytes[..4] != MAGIC {
        return Err(Error::format("blob", "missing EXWT magic"));
    }
    let rank = u32_at(4)? as usize;
    if rank == 0 || rank > 8 {
        return Err(Error::format("blob", format!("unsupported rank {rank}")));
    }
    let shape = (0..rank)
        .map(|i| u32_at(8 + 4 * i).map(|d| d as usize))
        .collect::<Result<Vec<_>>>()?;
    let offset = 8 + 4 * rank;
    let n: usize = shape.iter().product();
    let payload = &bytes[offset..];
    if payload.len() != 4 * n {
        return Err(Error::format(
            "blob",
            format!("shape {shape:?} needs {} payload bytes, found {}", 4 * n, payload.len()),
        ));
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| T::narrow(f32::from_le_bytes(c.try_into().unwrap()) as f64))
        .collect();
    Tensor::new(shape, data)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Writes `tensor` to `path` and returns the SHA-256 of the file contents.
pub fn write<T: Scalar>(path: &Path, tensor: &Tensor<T>) -> Result<String> {
    let bytes = encode(tensor);
    fs::write(path, &bytes).map_err(|e| Error::io(path, e))?;
    Ok(sha256_hex(&bytes))
}

pub fn read<T: Scalar>(path: &Path) -> Result<Tensor<T>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}


/// Manifest entry pointing at a blob file relative to the manifest.
#[derive(Clone, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct BlobRef {
    pub file: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sha256: Option<String>,
}

impl BlobRef {
    /// Writes `tensor` into `dir/file` and records its checksum.
    pub fn store<T: Scalar>(dir: &Path, file: String, tensor: &Tensor<T>) -> Result<Self> {
        let sha256 = write(&dir.join(&file), tensor)?;
        Ok(Self {
            file,
            sha256: Some(sha256),
        })
    }

    /// Reads the referenced blob, verifying the checksum when one is recorded.
    pub fn load<T: Scalar>(&self, dir: &Path, name: &str) -> Result<Tensor<T>> {
        let path = dir.join(&self.file);
        if !path.is_file() {
            return Err(Error::MissingBlob {
                name: name.to_string(),
                path,
            });
        }
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        if let Some(expected) = &self.sha256 {
            let actual = sha256_hex(&bytes);
            if !actual.eq_ignore_ascii_case(expected) {
                return Err(Error::Checksum {
                    name: name.to_string(),
                    expected: expected.clone(),
                    actual,
                });
            }
        }
        decode(&bytes).map_err(|e| match e {
            Error::Format { msg, .. } => Error::format("blob", format!("{name}: {msg}")),
            other => other,
        })
    }
}
