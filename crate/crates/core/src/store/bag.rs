use std::io::{Read, Write};

use super::crc_io::{CrcReader, CrcWriter};
use super::StoreError;

pub const BAG_MAGIC: &[u8; 4] = b"MILB";
pub const BAG_VERSION: u32 = 1;

const LABEL_MIR_STAGE: u8 = 1 << 0;
const LABEL_WBC: u8 = 1 << 1;
const LABEL_TMAX: u8 = 1 << 2;

/// Grid position of a patch, in tile units.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct TileCoord {
    pub col: u32,
    pub row: u32,
}

impl TileCoord {
    pub fn new(col: u32, row: u32) -> Self {
        Self { col, row }
    }
}

/// Slide-level labels. Any subset may be present.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LabelSet {
    /// MIR stage 0..=3.
    pub mir_stage: Option<u8>,
    /// Peak maternal white blood cell count, 10³ cells/µL.
    pub wbc: Option<f32>,
    /// Peak maternal temperature, °F.
    pub t_max: Option<f32>,
}

impl LabelSet {
    /// Binary MIR class: 0 for MIR0/1, 1 for MIR2/3.
    pub fn mir_binary(&self) -> Option<u8> {
        self.mir_stage.map(|s| u8::from(s >= 2))
    }

    pub fn is_empty(&self) -> bool {
        self.mir_stage.is_none() && self.wbc.is_none() && self.t_max.is_none()
    }

    fn validate(&self) -> Result<(), StoreError> {
        if let Some(stage) = self.mir_stage {
            if stage > 3 {
                return Err(StoreError::Invalid(format!(
                    "mir_stage {stage} out of range"
                )));
            }
        }
        if self.wbc.is_some_and(|v| !v.is_finite()) || self.t_max.is_some_and(|v| !v.is_finite()) {
            return Err(StoreError::NonFinite);
        }
        Ok(())
    }
}

/// One slide: `n_patches` embeddings of width `dim`, their grid coordinates and labels.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingBag {
    slide_id: String,
    dim: usize,
    coords: Vec<TileCoord>,
    features: Vec<f32>,
    labels: LabelSet,
}

impl EmbeddingBag {
    /// Builds a bag, checking every invariant of the format.
    pub fn new(
        slide_id: impl Into<String>,
        dim: usize,
        coords: Vec<TileCoord>,
        features: Vec<f32>,
        labels: LabelSet,
    ) -> Result<Self, StoreError> {
        let bag = Self {
            slide_id: slide_id.into(),
            dim,
            coords,
            features,
            labels,
        };
        bag.validate()?;
        Ok(bag)
    }

    fn validate(&self) -> Result<(), StoreError> {
        if self.coords.is_empty() {
            return Err(StoreError::Invalid("bag has no patches".into()));
        }
        if self.dim == 0 {
            return Err(StoreError::Invalid("embedding dim is zero".into()));
        }
        if self.coords.len() * self.dim != self.features.len() {
            return Err(StoreError::Invalid(format!(
                "{} patches x {} dims != {} feature values",
                self.coords.len(),
                self.dim,
                self.features.len()
            )));
        }
        if self.coords.len() > u32::MAX as usize || self.dim > u32::MAX as usize {
            return Err(StoreError::Invalid("bag too large for format".into()));
        }
        if self
            .coords
            .iter()
            .any(|c| c.col > i32::MAX as u32 || c.row > i32::MAX as u32)
        {
            return Err(StoreError::Invalid("coordinate exceeds i32 range".into()));
        }
        let mut seen = std::collections::HashSet::with_capacity(self.coords.len());
        for c in &self.coords {
            if !seen.insert(*c) {
                return Err(StoreError::Invalid(format!(
                    "duplicate coordinate ({}, {})",
                    c.col, c.row
                )));
            }
        }
        if self.features.iter().any(|v| !v.is_finite()) {
            return Err(StoreError::NonFinite);
        }
        self.labels.validate()
    }

    pub fn slide_id(&self) -> &str {
        &self.slide_id
    }

    pub fn n_patches(&self) -> usize {
        self.coords.len()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn coords(&self) -> &[TileCoord] {
        &self.coords
    }

    /// Row-major `n_patches x dim` feature matrix.
    pub fn features(&self) -> &[f32] {
        &self.features
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    pub fn labels(&self) -> &LabelSet {
        &self.labels
    }

    pub fn set_labels(&mut self, labels: LabelSet) -> Result<(), StoreError> {
        labels.validate()?;
        self.labels = labels;
        Ok(())
    }

    /// Reorders patches so that new patch `i` is old patch `order[i]`.
    pub fn permuted(&self, order: &[usize]) -> Result<Self, StoreError> {
        if order.len() != self.n_patches() {
            return Err(StoreError::Invalid("permutation length mismatch".into()));
        }
        let mut coords = Vec::with_capacity(order.len());
        let mut features = Vec::with_capacity(self.features.len());
        for &i in order {
            coords.push(self.coords[i]);
            features.extend_from_slice(self.row(i));
        }
        Self::new(
            self.slide_id.clone(),
            self.dim,
            coords,
            features,
            self.labels,
        )
    }
}

/// Serializes `bag` in the MILB v1 layout and returns the number of bytes written.
pub fn write_bag<W: Write>(bag: &EmbeddingBag, sink: W) -> Result<u64, StoreError> {
    bag.validate()?;
    let mut w = CrcWriter::new(sink);
    w.put(BAG_MAGIC)?;
    w.put(&BAG_VERSION.to_le_bytes())?;
    let id = bag.slide_id.as_bytes();
    let id_len =
        u32::try_from(id.len()).map_err(|_| StoreError::Invalid("slide id too long".into()))?;
    w.put(&id_len.to_le_bytes())?;
    w.put(id)?;
    w.put(&(bag.n_patches() as u32).to_le_bytes())?;
    w.put(&(bag.dim as u32).to_le_bytes())?;

    let labels = &bag.labels;
    let mut present = 0u8;
    if labels.mir_stage.is_some() {
        present |= LABEL_MIR_STAGE;
    }
    if labels.wbc.is_some() {
        present |= LABEL_WBC;
    }
    if labels.t_max.is_some() {
        present |= LABEL_TMAX;
    }
    w.put(&[present])?;
    if let Some(stage) = labels.mir_stage {
        w.put(&[stage])?;
    }
    if let Some(v) = labels.wbc {
        w.put(&v.to_le_bytes())?;
    }
    if let Some(v) = labels.t_max {
        w.put(&v.to_le_bytes())?;
    }

    let mut buf = Vec::with_capacity(bag.n_patches() * 8);
    for c in &bag.coords {
        buf.extend_from_slice(&(c.col as i32).to_le_bytes());
        buf.extend_from_slice(&(c.row as i32).to_le_bytes());
    }
    w.put(&buf)?;
    buf.clear();
    buf.reserve(bag.features.len() * 4);
    for v in &bag.features {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.put(&buf)?;

    w.finish()
}

/// Parses one MILB bag, verifying the checksum before any payload check.
pub fn read_bag<R: Read>(source: R) -> Result<EmbeddingBag, StoreError> {
    let mut r = CrcReader::new(source);
    let mut magic = [0u8; 4];
    r.take_exact(&mut magic)?;
    if &magic != BAG_MAGIC {
        return Err(StoreError::BadMagic(magic));
    }
    let version = r.u32()?;
    if version != BAG_VERSION {
        return Err(StoreError::UnsupportedVersion(version));
    }
    let id_len = r.u32()? as usize;
    let id_bytes = r.bytes(id_len)?;
    let n = r.u32()? as usize;
    let dim = r.u32()? as usize;
    let present = r.u8()?;
    if present & !(LABEL_MIR_STAGE | LABEL_WBC | LABEL_TMAX) != 0 {
        return Err(StoreError::Invalid(format!(
            "unknown label bits {present:#04x}"
        )));
    }
    let mut labels = LabelSet::default();
    if present & LABEL_MIR_STAGE != 0 {
        labels.mir_stage = Some(r.u8()?);
    }
    if present & LABEL_WBC != 0 {
        labels.wbc = Some(r.f32()?);
    }
    if present & LABEL_TMAX != 0 {
        labels.t_max = Some(r.f32()?);
    }

    let coord_len = n.checked_mul(8).ok_or(StoreError::Truncated)?;
    let coord_bytes = r.bytes(coord_len)?;
    let feat_len = n
        .checked_mul(dim)
        .and_then(|v| v.checked_mul(4))
        .ok_or(StoreError::Truncated)?;
    let feat_bytes = r.bytes(feat_len)?;

    r.verify_trailer()?;

    let slide_id = String::from_utf8(id_bytes)
        .map_err(|_| StoreError::Invalid("slide id is not UTF-8".into()))?;
    let mut coords = Vec::with_capacity(n);
    for pair in coord_bytes.chunks_exact(8) {
        let col = i32::from_le_bytes(pair[0..4].try_into().unwrap());
        let row = i32::from_le_bytes(pair[4..8].try_into().unwrap());
        if col < 0 || row < 0 {
            return Err(StoreError::Invalid(format!(
                "negative coordinate ({col}, {row})"
            )));
        }
        coords.push(TileCoord::new(col as u32, row as u32));
    }
    let features: Vec<f32> = feat_bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
        .collect();
    EmbeddingBag::new(slide_id, dim, coords, features, labels)
}
