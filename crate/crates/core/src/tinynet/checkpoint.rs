//! `UNP1` parameter checkpoints.
//!
//! Layout, little-endian throughout:
//!
//! | bytes | field |
//! |-------|-------|
//! | 4 | magic `UNP1` |
//! | 4 | depth, u32 |
//! | 4 | base channels, u32 |
//! | 8 | init seed, u64 |
//! | 8 | parameter count, u64 |
//! | 4·n | parameters, f32, in layer order (weights then bias per layer) |

use std::fs;
use std::path::Path;

use super::ops::Real;
use super::unet::{UNetConfig, UNetParams};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"UNP1";
const HEADER: usize = 28;

pub fn encode<T: Real>(params: &UNetParams<T>) -> Vec<u8> {
    let cfg = params.config();
    let n = params.parameter_count();
    let mut out = Vec::with_capacity(HEADER + 4 * n);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(cfg.depth as u32).to_le_bytes());
    out.extend_from_slice(&(cfg.base_channels as u32).to_le_bytes());
    out.extend_from_slice(&cfg.seed.to_le_bytes());
    out.extend_from_slice(&(n as u64).to_le_bytes());
    for s in params.slices() {
        for v in s {
            out.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
        }
    }
    out
}

pub fn decode<T: Real>(bytes: &[u8]) -> Result<UNetParams<T>> {
    if bytes.len() < HEADER {
        return Err(Error::Truncated {
            expected: HEADER - bytes.len(),
            found: bytes.len(),
        });
    }
    if &bytes[..4] != MAGIC {
        return Err(Error::Format(format!("bad checkpoint magic {:?}", &bytes[..4])));
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().expect("4 bytes"));
    let u64_at = |o: usize| u64::from_le_bytes(bytes[o..o + 8].try_into().expect("8 bytes"));
    let config = UNetConfig {
        depth: u32_at(4) as usize,
        base_channels: u32_at(8) as usize,
        seed: u64_at(12),
    };
    config.validate()?;
    let n = u64_at(20) as usize;
    if n != config.parameter_count() {
        return Err(Error::Format(format!(
            "checkpoint holds {n} parameters, config implies {}",
            config.parameter_count()
        )));
    }
    let need = HEADER + 4 * n;
    if bytes.len() < need {
        return Err(Error::Truncated {
            expected: need - bytes.len(),
            found: bytes.len(),
        });
    }
    let mut values = bytes[HEADER..need]
        .chunks_exact(4)
        .map(|c| T::of_f64(f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64));
    let mut params = UNetParams::<T>::init(config)?;
    for s in params.slices_mut() {
        for v in s.iter_mut() {
            *v = values.next().expect("count checked");
        }
    }
    UNetParams::from_layers(config, params.layers().to_vec())
}

pub fn save<T: Real>(params: &UNetParams<T>, path: &Path) -> Result<()> {
    fs::write(path, encode(params))?;
    Ok(())
}

pub fn load<T: Real>(path: &Path) -> Result<UNetParams<T>> {
    decode(&fs::read(path)?)
}
