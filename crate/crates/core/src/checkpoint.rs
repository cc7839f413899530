//! Binary checkpoint format.
//!
//! ```text
//! offset  size  content
//! 0       8     magic "DPRELCKP"
//! 8       4     format version, u32 LE (currently 1)
//! 12      4     header length H, u32 LE
//! 16      H     UTF-8 JSON header: arch, mode, seed lineage, tensor list
//! 16+H    ...   every tensor in header order, row-major f64 LE
//! ```
//!
//! Tensors are `embed`, then per block `weight_l`, `bias_l` and, in adapter
//! mode, `adapter_down_l`, `adapter_up_l`. Frozen weights are stored too, so
//! a checkpoint is self-contained.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::encoder::{EncoderArch, EncoderParams, TrainMode};
use crate::error::{Error, Result};
use crate::linalg::Mat;

pub const MAGIC: &[u8; 8] = b"DPRELCKP";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorInfo {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub arch: EncoderArch,
    pub mode: TrainMode,
    /// Seeds the parameters descend from, oldest first.
    pub seed_lineage: Vec<u64>,
    pub tensors: Vec<TensorInfo>,
}

fn tensors(params: &EncoderParams) -> Vec<(String, &[f64], usize, usize)> {
    let mut out = vec![(
        "embed".to_string(),
        params.embed.as_slice(),
        params.embed.rows(),
        params.embed.cols(),
    )];
    for (l, b) in params.blocks.iter().enumerate() {
        out.push((format!("weight_{l}"), b.weight.as_slice(), b.weight.rows(), b.weight.cols()));
        out.push((format!("bias_{l}"), &b.bias, 1, b.bias.len()));
        if let Some(ad) = &b.adapter {
            out.push((format!("adapter_down_{l}"), ad.down.as_slice(), ad.down.rows(), ad.down.cols()));
            out.push((format!("adapter_up_{l}"), ad.up.as_slice(), ad.up.rows(), ad.up.cols()));
        }
    }
    out
}

pub fn write_checkpoint<W: Write>(mut w: W, params: &EncoderParams, seed_lineage: &[u64]) -> Result<()> {
    let list = tensors(params);
    let header = CheckpointHeader {
        arch: params.arch.clone(),
        mode: params.mode,
        seed_lineage: seed_lineage.to_vec(),
        tensors: list
            .iter()
            .map(|(name, _, rows, cols)| TensorInfo {
                name: name.clone(),
                rows: *rows,
                cols: *cols,
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header)?;
    let len = u32::try_from(json.len()).map_err(|_| Error::Checkpoint("header too large".into()))?;
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&len.to_le_bytes())?;
    w.write_all(&json)?;
    let mut buf = Vec::new();
    for (_, data, _, _) in &list {
        buf.clear();
        for x in *data {
            buf.extend_from_slice(&x.to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    Ok(())
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<(EncoderParams, CheckpointHeader)> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let mut word = [0u8; 4];
    r.read_exact(&mut word)?;
    let version = u32::from_le_bytes(word);
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    r.read_exact(&mut word)?;
    let mut json = vec![0u8; u32::from_le_bytes(word) as usize];
    r.read_exact(&mut json)?;
    let header: CheckpointHeader = serde_json::from_slice(&json)?;
    let mut params = EncoderParams::init(header.arch.clone(), header.mode, 0)?;
    let expected: Vec<TensorInfo> = tensors(&params)
        .into_iter()
        .map(|(name, _, rows, cols)| TensorInfo { name, rows, cols })
        .collect();
    if expected != header.tensors {
        return Err(Error::Checkpoint("tensor list does not match the architecture".into()));
    }
    let mut read = |rows: usize, cols: usize| -> Result<Vec<f64>> {
        let mut bytes = vec![0u8; rows * cols * 8];
        r.read_exact(&mut bytes)?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect())
    };
    params.embed = Mat::from_vec(params.embed.rows(), params.embed.cols(), read(params.embed.rows(), params.embed.cols())?)?;
    for b in &mut params.blocks {
        let (p, d) = (b.weight.rows(), b.weight.cols());
        b.weight = Mat::from_vec(p, d, read(p, d)?)?;
        b.bias = read(1, p)?;
        if let Some(ad) = &mut b.adapter {
            let (rr, rc) = (ad.down.rows(), ad.down.cols());
            ad.down = Mat::from_vec(rr, rc, read(rr, rc)?)?;
            let (ur, uc) = (ad.up.rows(), ad.up.cols());
            ad.up = Mat::from_vec(ur, uc, read(ur, uc)?)?;
        }
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(Error::Checkpoint("trailing bytes".into()));
    }
    Ok((params, header))
}

pub fn save_checkpoint(path: &Path, params: &EncoderParams, seed_lineage: &[u64]) -> Result<()> {
    let f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_checkpoint(f, params, seed_lineage)
}

pub fn load_checkpoint(path: &Path) -> Result<(EncoderParams, CheckpointHeader)> {
    read_checkpoint(std::io::BufReader::new(std::fs::File::open(path)?))
}
