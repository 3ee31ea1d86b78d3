//! Attention heatmaps, top-k patch export, and pooled-feature tables.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};

use crate::mil::{top_k_patches, MilClassifier, ModelError, NUM_CLASSES};
use crate::store::{EmbeddingBag, TileCoord};

/// Fill color for grid cells without a patch.
pub const NEUTRAL_GRAY: Rgb<u8> = Rgb([128, 128, 128]);

#[derive(Debug, thiserror::Error)]
pub enum VizError {
    #[error("{weights} weights for {coords} coordinates")]
    Length { weights: usize, coords: usize },
    #[error("coordinate ({col}, {row}) outside {cols}x{rows} grid")]
    OutOfGrid {
        col: u32,
        row: u32,
        cols: u32,
        rows: u32,
    },
    #[error("upscale must be at least 1")]
    Upscale,
    #[error("missing tile files for coords: {0}")]
    MissingTiles(String),
    #[error("malformed feature table: {0}")]
    Parse(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Blue (0) to red (1); each channel is monotone in `t`.
pub fn colormap(t: f64) -> Rgb<u8> {
    let t = t.clamp(0.0, 1.0);
    Rgb([
        (255.0 * t).round() as u8,
        0,
        (255.0 * (1.0 - t)).round() as u8,
    ])
}

#[derive(Clone, Debug, PartialEq)]
pub struct Heatmap {
    pub cols: u32,
    pub rows: u32,
    pub upscale: u32,
    pub image: RgbImage,
    /// All weights were equal and every patch was drawn at 0.5.
    pub degenerate: bool,
}

/// Colors each tile cell by its min-max normalized attention weight.
pub fn render_heatmap(
    weights: &[f64],
    coords: &[TileCoord],
    cols: u32,
    rows: u32,
    upscale: u32,
) -> Result<Heatmap, VizError> {
    if weights.len() != coords.len() {
        return Err(VizError::Length {
            weights: weights.len(),
            coords: coords.len(),
        });
    }
    if upscale == 0 {
        return Err(VizError::Upscale);
    }
    if let Some(c) = coords.iter().find(|c| c.col >= cols || c.row >= rows) {
        return Err(VizError::OutOfGrid {
            col: c.col,
            row: c.row,
            cols,
            rows,
        });
    }
    let lo = weights.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = weights.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let degenerate = !(hi > lo);
    if degenerate {
        log::warn!("all attention weights equal; heatmap drawn at mid scale");
    }
    let mut cells = vec![NEUTRAL_GRAY; cols as usize * rows as usize];
    for (&w, c) in weights.iter().zip(coords) {
        let t = if degenerate {
            0.5
        } else {
            (w - lo) / (hi - lo)
        };
        cells[(c.row * cols + c.col) as usize] = colormap(t);
    }
    let image = RgbImage::from_fn(cols * upscale, rows * upscale, |x, y| {
        cells[((y / upscale) * cols + x / upscale) as usize]
    });
    Ok(Heatmap {
        cols,
        rows,
        upscale,
        image,
        degenerate,
    })
}

/// Grid extent covering every coordinate of a bag.
pub fn grid_extent(coords: &[TileCoord]) -> (u32, u32) {
    let cols = coords.iter().map(|c| c.col + 1).max().unwrap_or(0);
    let rows = coords.iter().map(|c| c.row + 1).max().unwrap_or(0);
    (cols, rows)
}

pub fn tile_file_name(coord: TileCoord) -> String {
    format!("x{}_y{}.png", coord.col, coord.row)
}

#[derive(Clone, Debug, PartialEq)]
pub struct TopKEntry {
    /// 1-based.
    pub rank: usize,
    pub coord: TileCoord,
    pub weight: f64,
    pub path: PathBuf,
}

/// Copies the `k` most attended tiles into `out_dir` and writes `topk.csv`
/// (`rank,col,row,weight`). Order and ties follow [`top_k_patches`].
pub fn export_topk(
    bag: &EmbeddingBag,
    weights: &[f64],
    k: usize,
    tile_dir: &Path,
    out_dir: &Path,
) -> Result<Vec<TopKEntry>, VizError> {
    if weights.len() != bag.n_patches() {
        return Err(VizError::Length {
            weights: weights.len(),
            coords: bag.n_patches(),
        });
    }
    let picked = top_k_patches(weights, k)?;
    let missing: Vec<String> = picked
        .iter()
        .map(|&i| bag.coords()[i])
        .filter(|&c| !tile_dir.join(tile_file_name(c)).is_file())
        .map(|c| format!("({},{})", c.col, c.row))
        .collect();
    if !missing.is_empty() {
        return Err(VizError::MissingTiles(missing.join(" ")));
    }
    std::fs::create_dir_all(out_dir)?;
    let mut manifest = String::from("rank,col,row,weight\n");
    let mut entries = Vec::with_capacity(k);
    for (r, &i) in picked.iter().enumerate() {
        let coord = bag.coords()[i];
        let rank = r + 1;
        let dest = out_dir.join(format!("rank{rank:02}_{}", tile_file_name(coord)));
        std::fs::copy(tile_dir.join(tile_file_name(coord)), &dest)?;
        let _ = writeln!(
            manifest,
            "{rank},{},{},{}",
            coord.col, coord.row, weights[i]
        );
        entries.push(TopKEntry {
            rank,
            coord,
            weight: weights[i],
            path: dest,
        });
    }
    std::fs::write(out_dir.join("topk.csv"), manifest)?;
    Ok(entries)
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureRow {
    pub slide_id: String,
    pub label: Option<u8>,
    pub predicted: u8,
    pub features: Vec<f64>,
}

/// Pooled vector `M_branch` of every bag, ordered by slide id.
pub fn export_features(
    model: &MilClassifier,
    bags: &[EmbeddingBag],
    branch: usize,
) -> Result<Vec<FeatureRow>, VizError> {
    if branch >= NUM_CLASSES {
        return Err(ModelError::Branch {
            branch,
            branches: NUM_CLASSES,
        }
        .into());
    }
    let mut rows = bags
        .iter()
        .map(|bag| {
            let out = model.forward(bag)?;
            Ok(FeatureRow {
                slide_id: bag.slide_id().to_string(),
                label: bag.labels().mir_binary(),
                predicted: out.predicted_class(),
                features: out.pooled[branch].clone(),
            })
        })
        .collect::<Result<Vec<_>, VizError>>()?;
    rows.sort_by(|a, b| a.slide_id.cmp(&b.slide_id));
    Ok(rows)
}

/// `slide_id,label,pred,f0..f{H-1}` with shortest round-trip decimal floats.
pub fn features_csv(rows: &[FeatureRow]) -> String {
    let width = rows.first().map_or(0, |r| r.features.len());
    let mut out = String::from("slide_id,label,pred");
    for i in 0..width {
        let _ = write!(out, ",f{i}");
    }
    out.push('\n');
    for r in rows {
        let label = r.label.map(|l| l.to_string()).unwrap_or_default();
        let _ = write!(out, "{},{},{}", r.slide_id, label, r.predicted);
        for v in &r.features {
            let _ = write!(out, ",{v}");
        }
        out.push('\n');
    }
    out
}

pub fn parse_features_csv(text: &str) -> Result<Vec<FeatureRow>, VizError> {
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| VizError::Parse("empty".into()))?;
    if !header.starts_with("slide_id,label,pred") {
        return Err(VizError::Parse(format!("bad header `{header}`")));
    }
    let width = header.split(',').count() - 3;
    lines
        .filter(|l| !l.is_empty())
        .map(|line| {
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != width + 3 {
                return Err(VizError::Parse(format!("row has {} fields", fields.len())));
            }
            let num = |s: &str| s.parse::<f64>().map_err(|e| VizError::Parse(e.to_string()));
            Ok(FeatureRow {
                slide_id: fields[0].to_string(),
                label: if fields[1].is_empty() {
                    None
                } else {
                    Some(
                        fields[1]
                            .parse()
                            .map_err(|_| VizError::Parse("label".into()))?,
                    )
                },
                predicted: fields[2]
                    .parse()
                    .map_err(|_| VizError::Parse("pred".into()))?,
                features: fields[3..]
                    .iter()
                    .map(|s| num(s))
                    .collect::<Result<_, _>>()?,
            })
        })
        .collect()
}
