//! Planted-signal synthetic bags and a pixel-statistics mock embedder.
//!
//! Background instances are i.i.d. `N(0, noise_sigma^2)` in every dimension.
//! A planted instance is a background draw with `signal_shift` added to its
//! first `signal_dims` dimensions. Negative bags contain no planted instances;
//! positive bags contain `round(f * n)` of them (at least one), with `f` drawn
//! uniformly from `pos_fraction_range`. Each bag has its own PRNG stream.

use image::RgbImage;
use rayon::prelude::*;

use crate::rng::{streams, StreamRng};
use crate::store::{EmbeddingBag, LabelSet, TileCoord};

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub n_bags: usize,
    pub instances_per_bag: usize,
    pub dim: usize,
    pub pos_fraction_range: (f64, f64),
    pub signal_shift: f64,
    pub signal_dims: usize,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            n_bags: 200,
            instances_per_bag: 100,
            dim: 64,
            pos_fraction_range: (0.05, 0.15),
            signal_shift: 1.0,
            signal_dims: 8,
            noise_sigma: 1.0,
            seed: 42,
        }
    }
}

#[derive(Debug, thiserror::Error)]
#[error("invalid synthetic spec: {0}")]
pub struct SpecError(String);

impl SyntheticSpec {
    pub fn validate(&self) -> Result<(), SpecError> {
        let (lo, hi) = self.pos_fraction_range;
        if self.n_bags == 0 || self.instances_per_bag == 0 || self.dim == 0 {
            return Err(SpecError("counts must be positive".into()));
        }
        if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
            return Err(SpecError(format!(
                "fraction range [{lo}, {hi}] not within (0, 1]"
            )));
        }
        if self.signal_dims > self.dim {
            return Err(SpecError("signal dims exceed embedding dim".into()));
        }
        if !(self.noise_sigma >= 0.0 && self.signal_shift.is_finite()) {
            return Err(SpecError("noise sigma must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct SyntheticSet {
    pub bags: Vec<EmbeddingBag>,
    /// Ascending planted instance indices per bag; empty for negative bags.
    pub planted: Vec<Vec<usize>>,
}

/// Square-ish grid placement so synthetic bags render as heatmaps.
fn grid_coords(n: usize) -> Vec<TileCoord> {
    let width = (n as f64).sqrt().ceil().max(1.0) as usize;
    (0..n)
        .map(|i| TileCoord::new((i % width) as u32, (i / width) as u32))
        .collect()
}

fn synth_bag(
    spec: &SyntheticSpec,
    slide_id: String,
    planted: &[usize],
    rng: &mut StreamRng,
    labels: LabelSet,
) -> EmbeddingBag {
    let n = spec.instances_per_bag;
    let mut features = Vec::with_capacity(n * spec.dim);
    let mut is_planted = vec![false; n];
    for &i in planted {
        is_planted[i] = true;
    }
    for planted_here in is_planted {
        for d in 0..spec.dim {
            let mut v = spec.noise_sigma * rng.normal();
            if planted_here && d < spec.signal_dims {
                v += spec.signal_shift;
            }
            features.push(v as f32);
        }
    }
    EmbeddingBag::new(slide_id, spec.dim, grid_coords(n), features, labels)
        .expect("synthetic bag satisfies invariants")
}

/// Balanced planted-signal classification bags; odd-indexed bags are positive.
pub fn generate_bags(spec: &SyntheticSpec) -> Result<SyntheticSet, SpecError> {
    spec.validate()?;
    let (bags, planted) = (0..spec.n_bags)
        .into_par_iter()
        .map(|b| {
            let mut rng = StreamRng::new(spec.seed, streams::SYNTH_BAG + b as u64);
            let positive = b % 2 == 1;
            let planted = if positive {
                let (lo, hi) = spec.pos_fraction_range;
                let frac = if hi > lo {
                    rng.uniform_range(lo, hi)
                } else {
                    lo
                };
                let n = spec.instances_per_bag;
                let k = ((frac * n as f64).round() as usize).clamp(1, n);
                rng.sample_indices(n, k)
            } else {
                Vec::new()
            };
            let labels = LabelSet {
                mir_stage: Some(if positive { 2 } else { 0 }),
                ..Default::default()
            };
            let bag = synth_bag(spec, format!("syn{b:05}"), &planted, &mut rng, labels);
            (bag, planted)
        })
        .unzip();
    Ok(SyntheticSet { bags, planted })
}

/// Which slide label a regression rule writes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RegressionTarget {
    Wbc,
    TMax,
}

/// `target = intercept + slope * p + N(0, noise_sigma^2)`, with `p` the planted fraction.
#[derive(Clone, Debug, PartialEq)]
pub struct RegressionRule {
    pub intercept: f64,
    pub slope: f64,
    pub noise_sigma: f64,
    /// Range the per-bag planted fraction is drawn from.
    pub fraction_range: (f64, f64),
    pub target: RegressionTarget,
}

impl Default for RegressionRule {
    fn default() -> Self {
        Self {
            intercept: 98.6,
            slope: 4.0,
            noise_sigma: 0.2,
            fraction_range: (0.0, 1.0),
            target: RegressionTarget::TMax,
        }
    }
}

impl RegressionRule {
    pub fn noiseless(&self, fraction: f64) -> f64 {
        self.intercept + self.slope * fraction
    }
}

#[derive(Clone, Debug)]
pub struct RegressionSet {
    pub bags: Vec<EmbeddingBag>,
    pub planted: Vec<Vec<usize>>,
    /// Realized planted fraction `|planted| / n` per bag.
    pub fractions: Vec<f64>,
    /// Target before noise.
    pub noiseless: Vec<f64>,
}

/// Bags whose continuous label is an affine function of the planted fraction.
pub fn generate_regression_bags(
    spec: &SyntheticSpec,
    rule: &RegressionRule,
) -> Result<RegressionSet, SpecError> {
    spec.validate()?;
    let (lo, hi) = rule.fraction_range;
    if !(0.0..=1.0).contains(&lo) || !(lo..=1.0).contains(&hi) {
        return Err(SpecError(format!(
            "regression fraction range [{lo}, {hi}] invalid"
        )));
    }
    let n = spec.instances_per_bag;
    let rows: Vec<_> = (0..spec.n_bags)
        .into_par_iter()
        .map(|b| {
            let mut rng = StreamRng::new(spec.seed, streams::SYNTH_REGRESSION + b as u64);
            let frac = if hi > lo {
                rng.uniform_range(lo, hi)
            } else {
                lo
            };
            let k = ((frac * n as f64).round() as usize).min(n);
            let planted = rng.sample_indices(n, k);
            let p = k as f64 / n as f64;
            let clean = rule.noiseless(p);
            let noisy = clean + rule.noise_sigma * rng.normal();
            let mut labels = LabelSet {
                mir_stage: Some(if k > 0 { 2 } else { 0 }),
                ..Default::default()
            };
            match rule.target {
                RegressionTarget::Wbc => labels.wbc = Some(noisy as f32),
                RegressionTarget::TMax => labels.t_max = Some(noisy as f32),
            }
            let bag = synth_bag(spec, format!("reg{b:05}"), &planted, &mut rng, labels);
            (bag, planted, p, clean)
        })
        .collect();
    let mut set = RegressionSet {
        bags: Vec::with_capacity(rows.len()),
        planted: Vec::with_capacity(rows.len()),
        fractions: Vec::with_capacity(rows.len()),
        noiseless: Vec::with_capacity(rows.len()),
    };
    for (bag, planted, p, clean) in rows {
        set.bags.push(bag);
        set.planted.push(planted);
        set.fractions.push(p);
        set.noiseless.push(clean);
    }
    Ok(set)
}

/// Number of statistics [`mock_embed`] computes before padding or truncation.
pub const MOCK_STATS: usize = 24;

/// Deterministic stand-in for a patch encoder.
///
/// Layout on a `[0, 1]` intensity scale: per-channel mean, std, min, max
/// (R, G, B each), then per-channel means of the four quadrants in order
/// top-left, top-right, bottom-left, bottom-right. Zero-padded or truncated to `dim`.
pub fn mock_embed(tile: &RgbImage, dim: usize) -> Vec<f32> {
    let (w, h) = tile.dimensions();
    let mut sum = [0.0f64; 3];
    let mut sum_sq = [0.0f64; 3];
    let mut min = [u8::MAX; 3];
    let mut max = [u8::MIN; 3];
    let mut quad = [[0.0f64; 3]; 4];
    let mut quad_n = [0u64; 4];
    for (x, y, p) in tile.enumerate_pixels() {
        let q = usize::from(y >= h / 2) * 2 + usize::from(x >= w / 2);
        quad_n[q] += 1;
        for c in 0..3 {
            let v = f64::from(p.0[c]);
            sum[c] += v;
            sum_sq[c] += v * v;
            min[c] = min[c].min(p.0[c]);
            max[c] = max[c].max(p.0[c]);
            quad[q][c] += v;
        }
    }
    let n = f64::from(w) * f64::from(h);
    let mut stats = Vec::with_capacity(MOCK_STATS);
    let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
    stats.extend(mean.iter().map(|m| m / 255.0));
    stats.extend((0..3).map(|c| (sum_sq[c] / n - mean[c] * mean[c]).max(0.0).sqrt() / 255.0));
    stats.extend(min.iter().map(|&v| f64::from(v) / 255.0));
    stats.extend(max.iter().map(|&v| f64::from(v) / 255.0));
    for q in 0..4 {
        for c in 0..3 {
            let count = quad_n[q].max(1) as f64;
            stats.push(quad[q][c] / count / 255.0);
        }
    }
    let mut out: Vec<f32> = stats.into_iter().map(|v| v as f32).collect();
    out.resize(dim, 0.0);
    out
}
