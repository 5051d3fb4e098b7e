//! Binary checkpoint files.
//!
//! Layout (all little-endian):
//! `b"DBCK"`, format `u32`, epoch `u32`, seed `u64`, config hash `[u8; 32]`,
//! train loss `f64`, optimiser step `u64`, shuffle-stream word position `u128`,
//! config JSON length `u32` + bytes, parameter count `u64`, then the parameter
//! blob as `f32` in declaration order followed by the first and second moment
//! blobs of the optimiser.

use super::{PolicyError, PolicyParams};
use super::train::TrainConfig;
use std::io::{Read, Write};
use std::path::Path;

const MAGIC: &[u8; 4] = b"DBCK";
const FORMAT: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub epoch: usize,
    pub params: PolicyParams<f32>,
    pub train_loss: f64,
    pub config: TrainConfig,
    /// AdamW state.
    pub adam_step: u64,
    pub adam_m: Vec<f32>,
    pub adam_v: Vec<f32>,
    /// Word position of the shuffling stream after this epoch.
    pub rng_word_pos: u128,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let cfg_json = serde_json::to_vec(&self.config).expect("config serialises");
        let mut out = Vec::with_capacity(128 + cfg_json.len() + self.params.data.len() * 12);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT.to_le_bytes());
        out.extend_from_slice(&(self.epoch as u32).to_le_bytes());
        out.extend_from_slice(&self.config.seed.to_le_bytes());
        out.extend_from_slice(&self.config.hash());
        out.extend_from_slice(&self.train_loss.to_le_bytes());
        out.extend_from_slice(&self.adam_step.to_le_bytes());
        out.extend_from_slice(&self.rng_word_pos.to_le_bytes());
        out.extend_from_slice(&(cfg_json.len() as u32).to_le_bytes());
        out.extend_from_slice(&cfg_json);
        out.extend_from_slice(&(self.params.data.len() as u64).to_le_bytes());
        for blob in [&self.params.data, &self.adam_m, &self.adam_v] {
            for v in blob.iter() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, PolicyError> {
        let mut r = bytes;
        let err = |m: &str| PolicyError::Checkpoint(m.to_string());
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(|_| err("truncated header"))?;
        if &magic != MAGIC {
            return Err(err("bad magic"));
        }
        let format = read_u32(&mut r)?;
        if format != FORMAT {
            return Err(err(&format!("unsupported format {format}")));
        }
        let epoch = read_u32(&mut r)? as usize;
        let seed = u64::from_le_bytes(read_array(&mut r)?);
        let hash: [u8; 32] = read_array(&mut r)?;
        let train_loss = f64::from_le_bytes(read_array(&mut r)?);
        let adam_step = u64::from_le_bytes(read_array(&mut r)?);
        let rng_word_pos = u128::from_le_bytes(read_array(&mut r)?);
        let cfg_len = read_u32(&mut r)? as usize;
        if r.len() < cfg_len {
            return Err(err("truncated config"));
        }
        let config: TrainConfig = serde_json::from_slice(&r[..cfg_len]).map_err(|e| err(&e.to_string()))?;
        r = &r[cfg_len..];
        if config.hash() != hash || config.seed != seed {
            return Err(err("config hash mismatch"));
        }
        let n = u64::from_le_bytes(read_array(&mut r)?) as usize;
        let expected = super::net::Layout::new(&config.policy).total;
        if n != expected {
            return Err(err(&format!("parameter count {n} does not match config ({expected})")));
        }
        if r.len() != n * 12 {
            return Err(err("parameter blob has wrong size"));
        }
        let mut blobs = r.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]));
        let data: Vec<f32> = blobs.by_ref().take(n).collect();
        let adam_m: Vec<f32> = blobs.by_ref().take(n).collect();
        let adam_v: Vec<f32> = blobs.take(n).collect();
        Ok(Checkpoint {
            epoch,
            params: PolicyParams { config: config.policy.clone(), data },
            train_loss,
            config,
            adam_step,
            adam_m,
            adam_v,
            rng_word_pos,
        })
    }

    pub fn save(&self, path: &Path) -> std::io::Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self, PolicyError> {
        let bytes = std::fs::read(path).map_err(|e| PolicyError::Checkpoint(format!("{}: {e}", path.display())))?;
        Self::from_bytes(&bytes)
    }
}

fn read_u32(r: &mut &[u8]) -> Result<u32, PolicyError> {
    Ok(u32::from_le_bytes(read_array(r)?))
}

fn read_array<const N: usize>(r: &mut &[u8]) -> Result<[u8; N], PolicyError> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf).map_err(|_| PolicyError::Checkpoint("truncated file".into()))?;
    Ok(buf)
}
