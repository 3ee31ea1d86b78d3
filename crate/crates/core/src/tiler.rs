//! Non-overlapping tiling of a slide raster with a saturation-based tissue mask.

use image::{Rgb, RgbImage};
use rayon::prelude::*;

use crate::store::TileCoord;

pub const DEFAULT_TILE_PX: u32 = 224;
/// 40x scan downsampled to 20x.
pub const DEFAULT_LEVEL_SCALE: f64 = 2.0;
/// Microns per pixel of the 40x base scan.
pub const DEFAULT_BASE_MPP: f64 = 0.263;
pub const DEFAULT_MIN_TISSUE: f64 = 0.10;

#[derive(Debug, thiserror::Error)]
pub enum TileError {
    #[error("image {width}x{height} at scale {scale} holds no full {tile_px}px tile")]
    TooSmall {
        width: u32,
        height: u32,
        tile_px: u32,
        scale: f64,
    },
    #[error("invalid parameter: {0}")]
    Invalid(String),
    #[error("image is {got:?} but grid expects level size {want:?}")]
    SizeMismatch { got: (u32, u32), want: (u32, u32) },
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TileGrid {
    pub tile_px: u32,
    pub cols: u32,
    pub rows: u32,
    /// Downsample factor from base resolution to the tiling level.
    pub level_scale: f64,
    pub base_mpp: f64,
    pub level_width: u32,
    pub level_height: u32,
}

impl TileGrid {
    pub fn n_tiles(&self) -> usize {
        self.cols as usize * self.rows as usize
    }

    /// Microns per pixel at the tiling level.
    pub fn level_mpp(&self) -> f64 {
        self.base_mpp * self.level_scale
    }

    /// `cols rows tile_px level_scale`, the sidecar line written next to tiles.
    pub fn sidecar(&self) -> String {
        format!(
            "{} {} {} {}\n",
            self.cols, self.rows, self.tile_px, self.level_scale
        )
    }
}

/// Lays a floor grid of `tile_px` tiles over the image after downsampling by `level_scale`.
pub fn plan_grid(
    width: u32,
    height: u32,
    tile_px: u32,
    level_scale: f64,
) -> Result<TileGrid, TileError> {
    if tile_px == 0 {
        return Err(TileError::Invalid("tile size must be positive".into()));
    }
    if !(level_scale.is_finite() && level_scale >= 1.0) {
        return Err(TileError::Invalid(format!(
            "level scale {level_scale} must be >= 1"
        )));
    }
    let level_width = (f64::from(width) / level_scale).floor() as u32;
    let level_height = (f64::from(height) / level_scale).floor() as u32;
    let cols = level_width / tile_px;
    let rows = level_height / tile_px;
    if cols == 0 || rows == 0 {
        return Err(TileError::TooSmall {
            width,
            height,
            tile_px,
            scale: level_scale,
        });
    }
    Ok(TileGrid {
        tile_px,
        cols,
        rows,
        level_scale,
        base_mpp: DEFAULT_BASE_MPP,
        level_width,
        level_height,
    })
}

/// Source pixels and weights contributing to each output pixel of a 1-D box downsample.
fn box_weights(out_len: u32, in_len: u32, scale: f64) -> Vec<Vec<(u32, f64)>> {
    (0..out_len)
        .map(|o| {
            let start = f64::from(o) * scale;
            let end = start + scale;
            let first = start.floor() as u32;
            let last = (end.ceil() as u32).min(in_len);
            (first..last)
                .filter_map(|j| {
                    let overlap = (end.min(f64::from(j + 1)) - start.max(f64::from(j))).max(0.0);
                    (overlap > 0.0).then_some((j, overlap / scale))
                })
                .collect()
        })
        .collect()
}

/// Area-averaging downsample to `floor(size / scale)`.
pub fn downsample_area(image: &RgbImage, scale: f64) -> RgbImage {
    if scale == 1.0 {
        return image.clone();
    }
    let (w, h) = image.dimensions();
    let out_w = (f64::from(w) / scale).floor() as u32;
    let out_h = (f64::from(h) / scale).floor() as u32;
    let xw = box_weights(out_w, w, scale);
    let yw = box_weights(out_h, h, scale);

    // Horizontal pass into f64, then vertical.
    let mut horiz = vec![0.0f64; out_w as usize * h as usize * 3];
    for y in 0..h {
        for (ox, taps) in xw.iter().enumerate() {
            let dst = (y as usize * out_w as usize + ox) * 3;
            for &(sx, wgt) in taps {
                let p = image.get_pixel(sx, y).0;
                for c in 0..3 {
                    horiz[dst + c] += wgt * f64::from(p[c]);
                }
            }
        }
    }
    RgbImage::from_fn(out_w, out_h, |ox, oy| {
        let mut acc = [0.0f64; 3];
        for &(sy, wgt) in &yw[oy as usize] {
            let src = (sy as usize * out_w as usize + ox as usize) * 3;
            for c in 0..3 {
                acc[c] += wgt * horiz[src + c];
            }
        }
        Rgb(acc.map(|v| v.round().clamp(0.0, 255.0) as u8))
    })
}

/// HSV saturation scaled to 0..=255.
pub fn saturation(p: &Rgb<u8>) -> u8 {
    let [r, g, b] = p.0;
    let max = r.max(g).max(b) as u32;
    let min = r.min(g).min(b) as u32;
    if max == 0 {
        0
    } else {
        (((max - min) * 255 + max / 2) / max) as u8
    }
}

/// Otsu threshold over a 256-bin histogram; values `> level` are foreground.
///
/// Returns `None` when the histogram holds a single value. Ties pick the lowest level.
pub fn otsu_level(hist: &[u64; 256]) -> Option<u8> {
    let total: u64 = hist.iter().sum();
    if total == 0 || hist.iter().filter(|&&c| c > 0).count() < 2 {
        return None;
    }
    let total_f = total as f64;
    let sum_all: f64 = hist
        .iter()
        .enumerate()
        .map(|(v, &c)| v as f64 * c as f64)
        .sum();
    let mut weight_bg = 0.0;
    let mut sum_bg = 0.0;
    let mut best = (f64::NEG_INFINITY, 0u8);
    for t in 0..255usize {
        weight_bg += hist[t] as f64;
        sum_bg += t as f64 * hist[t] as f64;
        let weight_fg = total_f - weight_bg;
        if weight_bg == 0.0 || weight_fg == 0.0 {
            continue;
        }
        let mean_bg = sum_bg / weight_bg;
        let mean_fg = (sum_all - sum_bg) / weight_fg;
        let between = weight_bg * weight_fg * (mean_bg - mean_fg).powi(2);
        if between > best.0 {
            best = (between, t as u8);
        }
    }
    Some(best.1)
}

#[derive(Clone, Debug, PartialEq)]
pub struct TissueMask {
    pub cols: u32,
    pub rows: u32,
    /// Row-major keep flags.
    pub keep: Vec<bool>,
    /// Minimum tissue fraction for a tile to be kept.
    pub threshold: f64,
    pub otsu_level: u8,
    /// Set when the saturation histogram had a single value and Otsu was undefined.
    pub degenerate: bool,
}

impl TissueMask {
    pub fn all(cols: u32, rows: u32, keep: bool) -> Self {
        Self {
            cols,
            rows,
            keep: vec![keep; cols as usize * rows as usize],
            threshold: 0.0,
            otsu_level: 0,
            degenerate: false,
        }
    }

    pub fn is_kept(&self, col: u32, row: u32) -> bool {
        self.keep[(row * self.cols + col) as usize]
    }

    pub fn kept_count(&self) -> usize {
        self.keep.iter().filter(|&&k| k).count()
    }

    /// Kept cells in row-major order.
    pub fn kept_coords(&self) -> Vec<TileCoord> {
        (0..self.rows)
            .flat_map(|row| (0..self.cols).map(move |col| TileCoord::new(col, row)))
            .filter(|c| self.is_kept(c.col, c.row))
            .collect()
    }
}

fn check_level(level: &RgbImage, grid: &TileGrid) -> Result<(), TileError> {
    let got = level.dimensions();
    let want = (grid.level_width, grid.level_height);
    if got != want {
        return Err(TileError::SizeMismatch { got, want });
    }
    Ok(())
}

/// Keeps tiles whose fraction of pixels with saturation above the image-wide
/// Otsu level is at least `min_tissue_fraction`.
///
/// For a single-valued saturation histogram the level falls back to 0 and the
/// mask is flagged `degenerate`: a uniformly colored image keeps every tile and
/// a uniformly gray or white one keeps none.
pub fn build_tissue_mask(
    level: &RgbImage,
    grid: &TileGrid,
    min_tissue_fraction: f64,
) -> Result<TissueMask, TileError> {
    check_level(level, grid)?;
    if !(0.0..=1.0).contains(&min_tissue_fraction) {
        return Err(TileError::Invalid(format!(
            "min tissue fraction {min_tissue_fraction} outside [0, 1]"
        )));
    }
    let sat: Vec<u8> = level.pixels().map(saturation).collect();
    let mut hist = [0u64; 256];
    for &s in &sat {
        hist[s as usize] += 1;
    }
    let (otsu, degenerate) = match otsu_level(&hist) {
        Some(t) => (t, false),
        None => {
            log::warn!("uniform saturation histogram; Otsu undefined, using level 0");
            (0, true)
        }
    };

    let width = level.width() as usize;
    let tile = grid.tile_px as usize;
    let area = (tile * tile) as f64;
    let mut keep = Vec::with_capacity(grid.n_tiles());
    for row in 0..grid.rows as usize {
        for col in 0..grid.cols as usize {
            let mut tissue = 0usize;
            for y in row * tile..(row + 1) * tile {
                let line = &sat[y * width + col * tile..y * width + (col + 1) * tile];
                tissue += line.iter().filter(|&&s| s > otsu).count();
            }
            keep.push(tissue as f64 / area >= min_tissue_fraction);
        }
    }
    Ok(TissueMask {
        cols: grid.cols,
        rows: grid.rows,
        keep,
        threshold: min_tissue_fraction,
        otsu_level: otsu,
        degenerate,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tile {
    pub coord: TileCoord,
    pub image: RgbImage,
}

fn crop(level: &RgbImage, tile_px: u32, coord: TileCoord) -> Tile {
    let image = image::imageops::crop_imm(
        level,
        coord.col * tile_px,
        coord.row * tile_px,
        tile_px,
        tile_px,
    )
    .to_image();
    Tile { coord, image }
}

/// Kept tiles in row-major order. Parallel over tiles; output is identical to
/// the sequential path.
pub fn extract_tiles(
    level: &RgbImage,
    grid: &TileGrid,
    mask: &TissueMask,
) -> Result<Vec<Tile>, TileError> {
    extract_tiles_with(level, grid, mask, true)
}

pub fn extract_tiles_with(
    level: &RgbImage,
    grid: &TileGrid,
    mask: &TissueMask,
    parallel: bool,
) -> Result<Vec<Tile>, TileError> {
    check_level(level, grid)?;
    if (mask.cols, mask.rows) != (grid.cols, grid.rows) {
        return Err(TileError::Invalid("mask does not match grid".into()));
    }
    let coords = mask.kept_coords();
    let tiles = if parallel {
        coords
            .par_iter()
            .map(|&c| crop(level, grid.tile_px, c))
            .collect()
    } else {
        coords
            .iter()
            .map(|&c| crop(level, grid.tile_px, c))
            .collect()
    };
    Ok(tiles)
}

/// Full tiling of a base-resolution image: downsample, mask, extract.
#[derive(Debug)]
pub struct Tiling {
    pub grid: TileGrid,
    pub mask: TissueMask,
    pub tiles: Vec<Tile>,
}

pub fn tile_image(
    base: &RgbImage,
    tile_px: u32,
    level_scale: f64,
    min_tissue_fraction: f64,
) -> Result<Tiling, TileError> {
    let grid = plan_grid(base.width(), base.height(), tile_px, level_scale)?;
    let level = downsample_area(base, level_scale);
    let mask = build_tissue_mask(&level, &grid, min_tissue_fraction)?;
    let tiles = extract_tiles(&level, &grid, &mask)?;
    Ok(Tiling { grid, mask, tiles })
}
