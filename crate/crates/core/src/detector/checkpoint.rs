//! Binary checkpoint container.
//!
//! Layout: the 8-byte magic `DRDTCKPT`, a little-endian `u32` format version,
//! a `u64` header length followed by a JSON header (stage, iteration,
//! detector config, segment table, free-form run metadata), then a `u64`
//! value count and the raw little-endian `f64` parameters. Parameters are
//! stored bit-exactly.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::params::{DetectorParams, Segment};
use super::DetectorConfig;
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"DRDTCKPT";
const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Init,
    Stage1,
    Stage2,
    Stage3,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub stage: Stage,
    pub iteration: u64,
    pub config: DetectorConfig,
    pub params: DetectorParams,
    /// Echo of whatever configuration produced the checkpoint.
    pub meta: serde_json::Value,
}

#[derive(Serialize, Deserialize)]
struct Header {
    stage: Stage,
    iteration: u64,
    config: DetectorConfig,
    segments: Vec<Segment>,
    meta: serde_json::Value,
}

impl Checkpoint {
    pub fn new(stage: Stage, iteration: u64, config: DetectorConfig, params: DetectorParams) -> Self {
        Checkpoint { stage, iteration, config, params, meta: serde_json::Value::Null }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            stage: self.stage,
            iteration: self.iteration,
            config: self.config.clone(),
            segments: self.params.segments().to_vec(),
            meta: self.meta.clone(),
        };
        let header = serde_json::to_vec(&header)?;
        let values = self.params.values();
        let mut out = Vec::with_capacity(28 + header.len() + 8 * values.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&(values.len() as u64).to_le_bytes());
        for v in values {
            out.extend_from_slice(&v.to_le_bytes());
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = bytes;
        let mut magic = [0u8; 8];
        read_exact(&mut r, &mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let mut u32b = [0u8; 4];
        read_exact(&mut r, &mut u32b)?;
        let version = u32::from_le_bytes(u32b);
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let header_len = read_u64(&mut r)? as usize;
        if header_len > r.len() {
            return Err(Error::Checkpoint("truncated header".into()));
        }
        let header: Header = serde_json::from_slice(&r[..header_len])?;
        r = &r[header_len..];
        let n = read_u64(&mut r)? as usize;
        if r.len() != n * 8 {
            return Err(Error::Checkpoint(format!(
                "expected {n} parameters ({} bytes), found {} bytes",
                n * 8,
                r.len()
            )));
        }
        let values = r
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect();
        let params = DetectorParams::new(header.segments, values)
            .map_err(|e| Error::Checkpoint(e.to_string()))?;
        header.config.validate()?;
        Ok(Checkpoint {
            stage: header.stage,
            iteration: header.iteration,
            config: header.config,
            params,
            meta: header.meta,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        Checkpoint::from_bytes(&bytes)
    }
}

fn read_exact(r: &mut &[u8], buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf).map_err(|_| Error::Checkpoint("truncated file".into()))
}

fn read_u64(r: &mut &[u8]) -> Result<u64> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b)?;
    Ok(u64::from_le_bytes(b))
}
