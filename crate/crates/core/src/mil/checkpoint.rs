//! MILW checkpoint format.
//!
//! Layout (little-endian): magic `MILW`, version `u32`, dims `D, H, A, classes`
//! as `u32`, every parameter block as `f32` in declaration order, CRC-32 of
//! all preceding bytes. `classes == 2` is a classifier; `classes == 1` is a
//! regressor, whose blocks are followed by its target offset and scale.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{MilClassifier, MilRegressor, ModelDims, ParamBlocks, NUM_CLASSES};
use crate::store::crc_io::{CrcReader, CrcWriter};
use crate::store::StoreError;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"MILW";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub enum MilModel {
    Classifier(MilClassifier),
    Regressor(MilRegressor),
}

impl MilModel {
    pub fn dims(&self) -> ModelDims {
        match self {
            MilModel::Classifier(m) => m.dims(),
            MilModel::Regressor(m) => m.dims(),
        }
    }

    fn classes(&self) -> u32 {
        match self {
            MilModel::Classifier(_) => NUM_CLASSES as u32,
            MilModel::Regressor(_) => 1,
        }
    }

    fn flat_blocks(&self) -> Vec<&[f32]> {
        match self {
            MilModel::Classifier(m) => m.blocks(),
            MilModel::Regressor(m) => {
                let mut b = m.blocks();
                b.push(std::slice::from_ref(&m.target_offset));
                b.push(std::slice::from_ref(&m.target_scale));
                b
            }
        }
    }
}

fn block_sizes(dims: ModelDims, classes: u32) -> Result<Vec<usize>, StoreError> {
    let (d, h, a) = (dims.input, dims.hidden, dims.attention);
    let mul = |x: usize, y: usize| x.checked_mul(y).ok_or(StoreError::Truncated);
    let branch = [mul(h, a)?, a, mul(h, a)?, a, a, 1];
    let mut sizes = vec![mul(d, h)?, h];
    match classes {
        2 => {
            for _ in 0..NUM_CLASSES {
                sizes.extend_from_slice(&branch);
            }
            for _ in 0..NUM_CLASSES {
                sizes.extend_from_slice(&[h, 1]);
            }
        }
        1 => {
            sizes.extend_from_slice(&branch);
            sizes.extend_from_slice(&[h, 1, 1, 1]);
        }
        other => {
            return Err(StoreError::Invalid(format!(
                "unsupported class count {other}"
            )))
        }
    }
    Ok(sizes)
}

pub fn write_checkpoint<W: Write>(model: &MilModel, sink: W) -> Result<u64, StoreError> {
    let blocks = model.flat_blocks();
    if blocks.iter().flat_map(|b| b.iter()).any(|v| !v.is_finite()) {
        return Err(StoreError::NonFinite);
    }
    let dims = model.dims();
    let mut w = CrcWriter::new(sink);
    w.put(CHECKPOINT_MAGIC)?;
    w.put(&CHECKPOINT_VERSION.to_le_bytes())?;
    for v in [dims.input, dims.hidden, dims.attention] {
        let v = u32::try_from(v).map_err(|_| StoreError::Invalid("dim exceeds u32".into()))?;
        w.put(&v.to_le_bytes())?;
    }
    w.put(&model.classes().to_le_bytes())?;
    let mut buf = Vec::new();
    for block in blocks {
        buf.clear();
        for v in block {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.put(&buf)?;
    }
    w.finish()
}

pub fn read_checkpoint<R: Read>(source: R) -> Result<MilModel, StoreError> {
    let mut r = CrcReader::new(source);
    let mut magic = [0u8; 4];
    r.take_exact(&mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(StoreError::BadMagic(magic));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(StoreError::UnsupportedVersion(version));
    }
    let dims = ModelDims::new(r.u32()? as usize, r.u32()? as usize, r.u32()? as usize);
    let classes = r.u32()?;
    let sizes = block_sizes(dims, classes)?;
    let mut payload = Vec::with_capacity(sizes.len());
    for &n in &sizes {
        let bytes = r.bytes(n.checked_mul(4).ok_or(StoreError::Truncated)?)?;
        let vals: Vec<f32> = bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect();
        payload.push(vals);
    }
    r.verify_trailer()?;
    if payload.iter().flatten().any(|v| !v.is_finite()) {
        return Err(StoreError::NonFinite);
    }
    if dims.input == 0 || dims.hidden == 0 || dims.attention == 0 {
        return Err(StoreError::Invalid(format!("zero dimension in {dims:?}")));
    }

    let model = match classes {
        2 => {
            let mut m = MilClassifier::from_parts(
                dims,
                zero_projection(dims),
                (0..NUM_CLASSES).map(|_| zero_branch(dims)).collect(),
                (0..NUM_CLASSES).map(|_| zero_head(dims)).collect(),
            );
            fill(m.blocks_mut(), &payload);
            MilModel::Classifier(m)
        }
        _ => {
            let n = payload.len();
            let mut m = MilRegressor::from_parts(
                dims,
                zero_projection(dims),
                zero_branch(dims),
                zero_head(dims),
                payload[n - 2][0],
                payload[n - 1][0],
            );
            fill(m.blocks_mut(), &payload[..n - 2]);
            MilModel::Regressor(m)
        }
    };
    Ok(model)
}

fn fill(dst: Vec<&mut [f32]>, src: &[Vec<f32>]) {
    debug_assert_eq!(dst.len(), src.len());
    for (d, s) in dst.into_iter().zip(src) {
        d.copy_from_slice(s);
    }
}

fn zero_projection(dims: ModelDims) -> super::layers::Projection {
    super::layers::Projection {
        weight: ndarray::Array2::zeros((dims.input, dims.hidden)),
        bias: ndarray::Array1::zeros(dims.hidden),
    }
}

fn zero_branch(dims: ModelDims) -> super::layers::GatedAttention {
    super::layers::GatedAttention {
        v: ndarray::Array2::zeros((dims.hidden, dims.attention)),
        v_bias: ndarray::Array1::zeros(dims.attention),
        u: ndarray::Array2::zeros((dims.hidden, dims.attention)),
        u_bias: ndarray::Array1::zeros(dims.attention),
        w: ndarray::Array1::zeros(dims.attention),
        w_bias: 0.0,
    }
}

fn zero_head(dims: ModelDims) -> super::layers::LinearHead {
    super::layers::LinearHead {
        weight: ndarray::Array1::zeros(dims.hidden),
        bias: 0.0,
    }
}

pub fn write_checkpoint_file(model: &MilModel, path: &Path) -> Result<u64, StoreError> {
    write_checkpoint(model, BufWriter::new(File::create(path)?))
}

pub fn read_checkpoint_file(path: &Path) -> Result<MilModel, StoreError> {
    read_checkpoint(BufReader::new(File::open(path)?))
}
