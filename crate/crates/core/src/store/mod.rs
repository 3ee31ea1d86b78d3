//! Embedding bag storage: the MILB binary format, dataset manifests and splits.

mod bag;
pub(crate) mod crc_io;
mod manifest;

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

pub use bag::{read_bag, write_bag, EmbeddingBag, LabelSet, TileCoord, BAG_MAGIC, BAG_VERSION};
pub use manifest::{make_split, DatasetManifest, ManifestEntry, Split, SplitItem};

#[derive(Debug, thiserror::Error)]
pub enum StoreError {
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad magic bytes {0:?}")]
    BadMagic([u8; 4]),
    #[error("unsupported format version {0}")]
    UnsupportedVersion(u32),
    #[error("stream truncated")]
    Truncated,
    #[error("checksum mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    Checksum { stored: u32, computed: u32 },
    #[error("non-finite value in payload")]
    NonFinite,
    #[error("invalid bag: {0}")]
    Invalid(String),
    #[error("manifest: {0}")]
    Manifest(String),
    #[error("split: {0}")]
    Split(String),
}

pub fn write_bag_file(bag: &EmbeddingBag, path: &Path) -> Result<u64, StoreError> {
    let file = File::create(path)?;
    write_bag(bag, BufWriter::new(file))
}

pub fn read_bag_file(path: &Path) -> Result<EmbeddingBag, StoreError> {
    let file = File::open(path)?;
    read_bag(BufReader::new(file))
}
