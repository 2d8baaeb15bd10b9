//! `ITKM` checkpoints: magic, version byte, u32 LE header length, JSON header,
//! then the parameters as little-endian f64 in [`ModelParams::to_flat`] order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Model, ModelParams, Shapes};
use crate::error::{invalid, Error, Result};
use crate::fsq::FsqConfig;
use crate::router::RouterState;

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"ITKM";
pub const CHECKPOINT_VERSION: u8 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub shapes: Shapes,
    pub fsq_levels: Vec<u8>,
    pub router: RouterState,
    pub param_count: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: ModelParams,
    pub fsq: FsqConfig,
    pub router: RouterState,
}

impl Checkpoint {
    pub fn model(&self) -> Result<Model> {
        Model::new(self.params.clone(), self.fsq.clone())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = CheckpointHeader {
            shapes: Shapes::TOY,
            fsq_levels: self.fsq.levels().to_vec(),
            router: self.router.clone(),
            param_count: ModelParams::len(),
        };
        let json = serde_json::to_vec(&header)?;
        let flat = self.params.to_flat();
        let mut out = Vec::with_capacity(9 + json.len() + 8 * flat.len());
        out.extend_from_slice(&CHECKPOINT_MAGIC);
        out.push(CHECKPOINT_VERSION);
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        for v in flat {
            out.extend_from_slice(&v.to_le_bytes());
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 9 {
            return invalid(format!("checkpoint too short: {} bytes", bytes.len()));
        }
        if bytes[..4] != CHECKPOINT_MAGIC {
            return invalid("not a model checkpoint (bad magic)");
        }
        if bytes[4] != CHECKPOINT_VERSION {
            return Err(Error::Version(format!(
                "checkpoint version {} unsupported, expected {CHECKPOINT_VERSION}",
                bytes[4]
            )));
        }
        let header_len = u32::from_le_bytes(bytes[5..9].try_into().expect("4 bytes")) as usize;
        let body = &bytes[9..];
        if body.len() < header_len {
            return invalid("checkpoint header truncated");
        }
        let header: CheckpointHeader = serde_json::from_slice(&body[..header_len])?;
        if header.shapes != Shapes::TOY {
            return Err(Error::Version(format!(
                "checkpoint shapes {:?} differ from {:?}",
                header.shapes,
                Shapes::TOY
            )));
        }
        if header.param_count != ModelParams::len() {
            return Err(Error::Version(format!(
                "checkpoint holds {} parameters, model has {}",
                header.param_count,
                ModelParams::len()
            )));
        }
        let block = &body[header_len..];
        if block.len() != 8 * header.param_count {
            return invalid(format!(
                "parameter block is {} bytes, expected {}",
                block.len(),
                8 * header.param_count
            ));
        }
        let flat: Vec<f64> = block
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        header.router.validate()?;
        Ok(Checkpoint {
            params: ModelParams::from_flat(&flat)?,
            fsq: FsqConfig::new(header.fsq_levels)?,
            router: header.router,
        })
    }
}

pub fn write_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    fs::write(path, ckpt.to_bytes()?)?;
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::from_bytes(&fs::read(path)?)
}
