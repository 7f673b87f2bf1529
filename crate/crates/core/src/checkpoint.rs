//! Binary model files.
//!
//! Layout, little-endian: 8-byte magic `OTAPFLM\0`, `u32` version, `u64` d,
//! `u64` K, then the global model (d `f64`) followed by K personal models.

use std::path::Path;

use crate::error::{Error, Result};
use crate::param::ParamVector;
use crate::report::write_atomic;

pub const MAGIC: [u8; 8] = *b"OTAPFLM\0";
pub const VERSION: u32 = 1;
const HEADER_LEN: usize = 8 + 4 + 8 + 8;

#[derive(Debug, Clone, PartialEq)]
pub struct ModelSnapshot {
    pub global: ParamVector,
    pub personal: Vec<ParamVector>,
}

impl ModelSnapshot {
    pub fn encode(&self) -> Result<Vec<u8>> {
        let d = self.global.dim();
        if let Some(v) = self.personal.iter().find(|v| v.dim() != d) {
            return Err(Error::dim(d, v.dim(), "personal model"));
        }
        let mut out = Vec::with_capacity(HEADER_LEN + 8 * d * (1 + self.personal.len()));
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(d as u64).to_le_bytes());
        out.extend_from_slice(&(self.personal.len() as u64).to_le_bytes());
        for v in std::iter::once(&self.global).chain(&self.personal) {
            for x in v.iter() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HEADER_LEN {
            return Err(Error::ModelFile(format!("{} bytes is shorter than the header", bytes.len())));
        }
        if bytes[..8] != MAGIC {
            return Err(Error::ModelFile("bad magic".into()));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(Error::ModelFile(format!("unsupported version {version}")));
        }
        let d = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let k = u64::from_le_bytes(bytes[20..28].try_into().expect("8 bytes")) as usize;
        let expected = d
            .checked_mul(k + 1)
            .and_then(|n| n.checked_mul(8))
            .and_then(|n| n.checked_add(HEADER_LEN))
            .ok_or_else(|| Error::ModelFile("size overflow".into()))?;
        if bytes.len() != expected {
            return Err(Error::ModelFile(format!(
                "expected {expected} bytes for d = {d}, K = {k}, found {}",
                bytes.len()
            )));
        }
        if d == 0 {
            return Ok(ModelSnapshot {
                global: ParamVector::zeros(0),
                personal: vec![ParamVector::zeros(0); k],
            });
        }
        let mut vectors = bytes[HEADER_LEN..].chunks_exact(8 * d).map(|chunk| {
            chunk
                .chunks_exact(8)
                .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
                .collect::<Vec<f64>>()
                .into()
        });
        let global = vectors.next().expect("length checked");
        Ok(ModelSnapshot {
            global,
            personal: vectors.collect(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.encode()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::decode(&std::fs::read(path)?)
    }
}
