//! Attention-based multiple instance learning networks.
//!
//! Both models share the same front end: each patch embedding `h_i` is
//! projected with `ReLU(W^T h_i + b)` and scored by gated attention. The
//! classifier runs one attention branch per class and reads each class logit
//! from that class's pooled vector; the regressor has a single branch and a
//! scalar head.

mod checkpoint;
mod classifier;
pub mod layers;
mod regressor;

use ndarray::Array2;

use crate::store::{EmbeddingBag, TileCoord};

pub use checkpoint::{
    read_checkpoint, read_checkpoint_file, write_checkpoint, write_checkpoint_file, MilModel,
    CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};
pub use classifier::{ClassifierTrace, ClassifyOutput, MilClassifier, NUM_CLASSES};
pub use regressor::{MilRegressor, RegressOutput, RegressorTrace};

/// Default projection width.
pub const DEFAULT_HIDDEN: usize = 512;
/// Default attention width.
pub const DEFAULT_ATTENTION: usize = 256;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ModelDims {
    /// Embedding width `D`.
    pub input: usize,
    /// Projection width `H`.
    pub hidden: usize,
    /// Attention width `A`.
    pub attention: usize,
}

impl ModelDims {
    pub fn new(input: usize, hidden: usize, attention: usize) -> Self {
        Self {
            input,
            hidden,
            attention,
        }
    }

    pub fn with_defaults(input: usize) -> Self {
        Self::new(input, DEFAULT_HIDDEN, DEFAULT_ATTENTION)
    }

    fn validate(&self) -> Result<(), ModelError> {
        if self.input == 0 || self.hidden == 0 || self.attention == 0 {
            return Err(ModelError::InvalidDims(*self));
        }
        Ok(())
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("bag has dim {got}, model expects {expected}")]
    DimMismatch { expected: usize, got: usize },
    #[error("non-finite model output")]
    NonFinite,
    #[error("k = {k} exceeds bag size {n}")]
    TopK { k: usize, n: usize },
    #[error("invalid model dims {0:?}")]
    InvalidDims(ModelDims),
    #[error("branch {branch} out of range (model has {branches})")]
    Branch { branch: usize, branches: usize },
}

/// Per-branch attention weights over a bag's patches, in bag order.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMap {
    pub branches: Vec<Vec<f64>>,
}

impl AttentionMap {
    pub fn branch(&self, index: usize) -> Result<&[f64], ModelError> {
        self.branches
            .get(index)
            .map(Vec::as_slice)
            .ok_or(ModelError::Branch {
                branch: index,
                branches: self.branches.len(),
            })
    }
}

/// Indices of the `k` largest weights, descending. Ties go to the lower index.
pub fn top_k_patches(weights: &[f64], k: usize) -> Result<Vec<usize>, ModelError> {
    if k > weights.len() {
        return Err(ModelError::TopK {
            k,
            n: weights.len(),
        });
    }
    let mut order: Vec<usize> = (0..weights.len()).collect();
    // Stable sort keeps index order among equal weights.
    order.sort_by(|&a, &b| weights[b].total_cmp(&weights[a]));
    order.truncate(k);
    Ok(order)
}

/// Coordinates of the `k` most attended patches of `bag`.
pub fn top_k_coords(
    bag: &EmbeddingBag,
    weights: &[f64],
    k: usize,
) -> Result<Vec<TileCoord>, ModelError> {
    Ok(top_k_patches(weights, k)?
        .into_iter()
        .map(|i| bag.coords()[i])
        .collect())
}

/// Trainable parameters exposed as flat `f32` blocks in declaration order.
pub trait ParamBlocks {
    fn block_names(&self) -> Vec<String>;
    fn blocks(&self) -> Vec<&[f32]>;
    fn blocks_mut(&mut self) -> Vec<&mut [f32]>;

    fn n_params(&self) -> usize {
        self.blocks().iter().map(|b| b.len()).sum()
    }
}

/// Gradients aligned with [`ParamBlocks::blocks`].
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub blocks: Vec<Vec<f64>>,
}

impl Gradients {
    pub fn zeros_like<M: ParamBlocks + ?Sized>(model: &M) -> Self {
        Self {
            blocks: model.blocks().iter().map(|b| vec![0.0; b.len()]).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        for (a, b) in self.blocks.iter_mut().zip(&other.blocks) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for b in &mut self.blocks {
            for x in b.iter_mut() {
                *x *= factor;
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.blocks.iter().flatten().all(|v| v.is_finite())
    }

    pub fn max_abs(&self) -> f64 {
        self.blocks
            .iter()
            .flatten()
            .fold(0.0, |m, v| m.max(v.abs()))
    }
}

pub(crate) fn flatten2(a: Array2<f64>) -> Vec<f64> {
    a.as_standard_layout().iter().copied().collect()
}

/// Bag features as an `N x D` f64 matrix.
pub(crate) fn input_matrix(
    bag: &EmbeddingBag,
    expected_dim: usize,
) -> Result<Array2<f64>, ModelError> {
    if bag.dim() != expected_dim {
        return Err(ModelError::DimMismatch {
            expected: expected_dim,
            got: bag.dim(),
        });
    }
    let data: Vec<f64> = bag.features().iter().map(|&v| f64::from(v)).collect();
    Ok(Array2::from_shape_vec((bag.n_patches(), bag.dim()), data).expect("bag shape"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn top_k_examples() {
        assert_eq!(top_k_patches(&[0.25; 4], 1).unwrap(), vec![0]);
        assert_eq!(top_k_patches(&[0.1, 0.7, 0.2], 2).unwrap(), vec![1, 2]);
        assert_eq!(
            top_k_patches(&[0.5, 0.2, 0.5, 0.3], 3).unwrap(),
            vec![0, 2, 3]
        );
        assert!(matches!(
            top_k_patches(&[0.5, 0.5], 3),
            Err(ModelError::TopK { k: 3, n: 2 })
        ));
    }

    #[test]
    fn top_k_full_is_descending_permutation() {
        let mut rng = crate::rng::StreamRng::new(11, 0);
        let w: Vec<f64> = (0..50).map(|_| rng.uniform()).collect();
        let order = top_k_patches(&w, 50).unwrap();
        let mut seen = order.clone();
        seen.sort_unstable();
        assert_eq!(seen, (0..50).collect::<Vec<_>>());
        // Oracle: full sort of (weight, index) pairs.
        let mut pairs: Vec<(f64, usize)> = w.iter().copied().zip(0..).collect();
        pairs.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
        assert_eq!(order, pairs.iter().map(|p| p.1).collect::<Vec<_>>());
    }
}
