use ndarray::Array2;

use super::layers::{BranchTrace, GatedAttention, LinearHead, Projection};
use super::{flatten2, input_matrix, AttentionMap, Gradients, ModelDims, ModelError, ParamBlocks};
use crate::rng::{streams, StreamRng};
use crate::store::EmbeddingBag;

/// Single-branch MIL regressor.
///
/// `prediction = target_offset + target_scale * (r . M + b)`. The offset and
/// scale are fixed from training targets before optimization and are not
/// trained; they keep the head near unit scale for targets like 98-104 °F.
#[derive(Clone, Debug, PartialEq)]
pub struct MilRegressor {
    dims: ModelDims,
    pub projection: Projection,
    pub branch: GatedAttention,
    pub head: LinearHead,
    pub target_offset: f32,
    pub target_scale: f32,
}

#[derive(Clone, Debug)]
pub struct RegressOutput {
    pub prediction: f64,
    pub attention: AttentionMap,
    pub pooled: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct RegressorTrace {
    pub input: Array2<f64>,
    pub pre_activation: Array2<f64>,
    pub hidden: Array2<f64>,
    pub branch: BranchTrace,
}

impl MilRegressor {
    pub fn init(dims: ModelDims, seed: u64) -> Result<Self, ModelError> {
        dims.validate()?;
        let rng = |k: u64| StreamRng::new(seed, streams::PARAM_INIT + k);
        Ok(Self {
            dims,
            projection: Projection::init(dims.input, dims.hidden, &mut rng(1)),
            branch: GatedAttention::init(
                dims.hidden,
                dims.attention,
                &mut [rng(2), rng(3), rng(4)],
            ),
            head: LinearHead::init(dims.hidden, &mut rng(5)),
            target_offset: 0.0,
            target_scale: 1.0,
        })
    }

    pub fn dims(&self) -> ModelDims {
        self.dims
    }

    /// Sets the output affine map from the mean and standard deviation of training targets.
    pub fn fit_target_scaling(&mut self, targets: &[f64]) {
        if targets.is_empty() {
            return;
        }
        let n = targets.len() as f64;
        let mean = targets.iter().sum::<f64>() / n;
        let var = targets.iter().map(|t| (t - mean).powi(2)).sum::<f64>() / n;
        let sd = var.sqrt();
        self.target_offset = mean as f32;
        self.target_scale = if sd > 0.0 && sd.is_finite() {
            sd as f32
        } else {
            1.0
        };
    }

    pub fn forward(&self, bag: &EmbeddingBag) -> Result<RegressOutput, ModelError> {
        Ok(self.forward_traced(bag)?.0)
    }

    pub fn forward_traced(
        &self,
        bag: &EmbeddingBag,
    ) -> Result<(RegressOutput, RegressorTrace), ModelError> {
        let input = input_matrix(bag, self.dims.input)?;
        let (pre_activation, hidden) = self.projection.forward(input.view());
        let branch = self.branch.forward(&hidden);
        let raw = self.head.forward(&branch.pooled);
        let prediction = f64::from(self.target_offset) + f64::from(self.target_scale) * raw;
        if !prediction.is_finite() {
            return Err(ModelError::NonFinite);
        }
        let output = RegressOutput {
            prediction,
            attention: AttentionMap {
                branches: vec![branch.attention.to_vec()],
            },
            pooled: branch.pooled.to_vec(),
        };
        let trace = RegressorTrace {
            input,
            pre_activation,
            hidden,
            branch,
        };
        Ok((output, trace))
    }

    /// Exact parameter gradients given `d_prediction`, the loss gradient with respect to the prediction.
    pub fn backward(&self, trace: &RegressorTrace, d_prediction: f64) -> Gradients {
        let d_raw = d_prediction * f64::from(self.target_scale);
        let mut d_hidden = Array2::<f64>::zeros(trace.hidden.raw_dim());
        let d_pooled = self.head.weight_f64() * d_raw;
        let head_w = (&trace.branch.pooled * d_raw).to_vec();
        let g = self
            .branch
            .backward(&trace.hidden, &trace.branch, &d_pooled, &mut d_hidden);
        let (d_w, d_b) = Projection::backward(trace.input.view(), &trace.pre_activation, d_hidden);
        Gradients {
            blocks: vec![
                flatten2(d_w),
                d_b.to_vec(),
                flatten2(g.v),
                g.v_bias.to_vec(),
                flatten2(g.u),
                g.u_bias.to_vec(),
                g.w.to_vec(),
                vec![g.w_bias],
                head_w,
                vec![d_raw],
            ],
        }
    }

    pub fn gradients(
        &self,
        bag: &EmbeddingBag,
        d_prediction: f64,
    ) -> Result<Gradients, ModelError> {
        let (_, trace) = self.forward_traced(bag)?;
        Ok(self.backward(&trace, d_prediction))
    }

    pub(crate) fn from_parts(
        dims: ModelDims,
        projection: Projection,
        branch: GatedAttention,
        head: LinearHead,
        target_offset: f32,
        target_scale: f32,
    ) -> Self {
        Self {
            dims,
            projection,
            branch,
            head,
            target_offset,
            target_scale,
        }
    }
}

impl ParamBlocks for MilRegressor {
    fn block_names(&self) -> Vec<String> {
        [
            "projection.weight",
            "projection.bias",
            "attention.v",
            "attention.v_bias",
            "attention.u",
            "attention.u_bias",
            "attention.w",
            "attention.w_bias",
            "head.weight",
            "head.bias",
        ]
        .iter()
        .map(|s| s.to_string())
        .collect()
    }

    fn blocks(&self) -> Vec<&[f32]> {
        let b = &self.branch;
        vec![
            self.projection.weight.as_slice().expect("standard layout"),
            self.projection.bias.as_slice().expect("standard layout"),
            b.v.as_slice().expect("standard layout"),
            b.v_bias.as_slice().expect("standard layout"),
            b.u.as_slice().expect("standard layout"),
            b.u_bias.as_slice().expect("standard layout"),
            b.w.as_slice().expect("standard layout"),
            std::slice::from_ref(&b.w_bias),
            self.head.weight.as_slice().expect("standard layout"),
            std::slice::from_ref(&self.head.bias),
        ]
    }

    fn blocks_mut(&mut self) -> Vec<&mut [f32]> {
        let b = &mut self.branch;
        vec![
            self.projection
                .weight
                .as_slice_mut()
                .expect("standard layout"),
            self.projection
                .bias
                .as_slice_mut()
                .expect("standard layout"),
            b.v.as_slice_mut().expect("standard layout"),
            b.v_bias.as_slice_mut().expect("standard layout"),
            b.u.as_slice_mut().expect("standard layout"),
            b.u_bias.as_slice_mut().expect("standard layout"),
            b.w.as_slice_mut().expect("standard layout"),
            std::slice::from_mut(&mut b.w_bias),
            self.head.weight.as_slice_mut().expect("standard layout"),
            std::slice::from_mut(&mut self.head.bias),
        ]
    }
}
