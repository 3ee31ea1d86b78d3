use ndarray::{Array1, Array2};

use super::layers::{softmax, BranchTrace, GatedAttention, LinearHead, Projection};
use super::{flatten2, input_matrix, AttentionMap, Gradients, ModelDims, ModelError, ParamBlocks};
use crate::rng::{streams, StreamRng};
use crate::store::EmbeddingBag;

pub const NUM_CLASSES: usize = 2;

/// Two-class MIL classifier with one gated-attention branch and one linear
/// head per class. The logit of class `c` reads only the pooled vector of branch `c`.
#[derive(Clone, Debug, PartialEq)]
pub struct MilClassifier {
    dims: ModelDims,
    pub projection: Projection,
    pub branches: Vec<GatedAttention>,
    pub heads: Vec<LinearHead>,
}

#[derive(Clone, Debug)]
pub struct ClassifyOutput {
    pub probs: [f64; NUM_CLASSES],
    pub logits: [f64; NUM_CLASSES],
    pub attention: AttentionMap,
    /// Attention-pooled projection per branch (`H` values each).
    pub pooled: Vec<Vec<f64>>,
}

impl ClassifyOutput {
    /// Argmax of the class probabilities; ties go to class 0.
    pub fn predicted_class(&self) -> u8 {
        u8::from(self.probs[1] > self.probs[0])
    }

    pub fn positive_score(&self) -> f64 {
        self.probs[1]
    }
}

/// Intermediate values of one forward pass, consumed by [`MilClassifier::backward`].
#[derive(Clone, Debug)]
pub struct ClassifierTrace {
    pub input: Array2<f64>,
    pub pre_activation: Array2<f64>,
    pub hidden: Array2<f64>,
    pub branches: Vec<BranchTrace>,
}

impl MilClassifier {
    /// Glorot-uniform weights and zero biases; each matrix draws from its own stream of `seed`.
    pub fn init(dims: ModelDims, seed: u64) -> Result<Self, ModelError> {
        dims.validate()?;
        let mut stream = 0u64;
        let mut next = || {
            stream += 1;
            StreamRng::new(seed, streams::PARAM_INIT + stream)
        };
        let projection = Projection::init(dims.input, dims.hidden, &mut next());
        let branches = (0..NUM_CLASSES)
            .map(|_| {
                GatedAttention::init(dims.hidden, dims.attention, &mut [next(), next(), next()])
            })
            .collect();
        let heads = (0..NUM_CLASSES)
            .map(|_| LinearHead::init(dims.hidden, &mut next()))
            .collect();
        Ok(Self {
            dims,
            projection,
            branches,
            heads,
        })
    }

    pub fn dims(&self) -> ModelDims {
        self.dims
    }

    pub fn forward(&self, bag: &EmbeddingBag) -> Result<ClassifyOutput, ModelError> {
        Ok(self.forward_traced(bag)?.0)
    }

    pub fn forward_traced(
        &self,
        bag: &EmbeddingBag,
    ) -> Result<(ClassifyOutput, ClassifierTrace), ModelError> {
        let input = input_matrix(bag, self.dims.input)?;
        self.forward_matrix(input)
    }

    pub fn forward_matrix(
        &self,
        input: Array2<f64>,
    ) -> Result<(ClassifyOutput, ClassifierTrace), ModelError> {
        let (pre_activation, hidden) = self.projection.forward(input.view());
        let branches: Vec<BranchTrace> = self.branches.iter().map(|b| b.forward(&hidden)).collect();
        let mut logits = [0.0; NUM_CLASSES];
        for (c, (head, trace)) in self.heads.iter().zip(&branches).enumerate() {
            logits[c] = head.forward(&trace.pooled);
        }
        if logits.iter().any(|v| !v.is_finite()) {
            return Err(ModelError::NonFinite);
        }
        let p = softmax(&Array1::from(logits.to_vec()));
        let output = ClassifyOutput {
            probs: [p[0], p[1]],
            logits,
            attention: AttentionMap {
                branches: branches.iter().map(|t| t.attention.to_vec()).collect(),
            },
            pooled: branches.iter().map(|t| t.pooled.to_vec()).collect(),
        };
        let trace = ClassifierTrace {
            input,
            pre_activation,
            hidden,
            branches,
        };
        Ok((output, trace))
    }

    /// Exact parameter gradients given `d_logits`, the loss gradient with respect to the logits.
    pub fn backward(&self, trace: &ClassifierTrace, d_logits: [f64; NUM_CLASSES]) -> Gradients {
        let mut d_hidden = Array2::<f64>::zeros(trace.hidden.raw_dim());
        let mut branch_grads = Vec::with_capacity(NUM_CLASSES);
        let mut head_grads = Vec::with_capacity(NUM_CLASSES);
        for c in 0..NUM_CLASSES {
            let bt = &trace.branches[c];
            let d_pooled = self.heads[c].weight_f64() * d_logits[c];
            head_grads.push(((&bt.pooled * d_logits[c]).to_vec(), d_logits[c]));
            branch_grads.push(self.branches[c].backward(
                &trace.hidden,
                bt,
                &d_pooled,
                &mut d_hidden,
            ));
        }
        let (d_w, d_b) = Projection::backward(trace.input.view(), &trace.pre_activation, d_hidden);

        let mut blocks = vec![flatten2(d_w), d_b.to_vec()];
        for g in branch_grads {
            blocks.push(flatten2(g.v));
            blocks.push(g.v_bias.to_vec());
            blocks.push(flatten2(g.u));
            blocks.push(g.u_bias.to_vec());
            blocks.push(g.w.to_vec());
            blocks.push(vec![g.w_bias]);
        }
        for (w, b) in head_grads {
            blocks.push(w);
            blocks.push(vec![b]);
        }
        Gradients { blocks }
    }

    /// Forward then backward on one bag.
    pub fn gradients(
        &self,
        bag: &EmbeddingBag,
        d_logits: [f64; NUM_CLASSES],
    ) -> Result<Gradients, ModelError> {
        let (_, trace) = self.forward_traced(bag)?;
        Ok(self.backward(&trace, d_logits))
    }

    pub(crate) fn from_parts(
        dims: ModelDims,
        projection: Projection,
        branches: Vec<GatedAttention>,
        heads: Vec<LinearHead>,
    ) -> Self {
        Self {
            dims,
            projection,
            branches,
            heads,
        }
    }
}

impl ParamBlocks for MilClassifier {
    fn block_names(&self) -> Vec<String> {
        let mut names = vec![
            "projection.weight".to_string(),
            "projection.bias".to_string(),
        ];
        for c in 0..NUM_CLASSES {
            for part in ["v", "v_bias", "u", "u_bias", "w", "w_bias"] {
                names.push(format!("attention{c}.{part}"));
            }
        }
        for c in 0..NUM_CLASSES {
            names.push(format!("head{c}.weight"));
            names.push(format!("head{c}.bias"));
        }
        names
    }

    fn blocks(&self) -> Vec<&[f32]> {
        let mut out: Vec<&[f32]> = vec![
            self.projection.weight.as_slice().expect("standard layout"),
            self.projection.bias.as_slice().expect("standard layout"),
        ];
        for b in &self.branches {
            out.push(b.v.as_slice().expect("standard layout"));
            out.push(b.v_bias.as_slice().expect("standard layout"));
            out.push(b.u.as_slice().expect("standard layout"));
            out.push(b.u_bias.as_slice().expect("standard layout"));
            out.push(b.w.as_slice().expect("standard layout"));
            out.push(std::slice::from_ref(&b.w_bias));
        }
        for h in &self.heads {
            out.push(h.weight.as_slice().expect("standard layout"));
            out.push(std::slice::from_ref(&h.bias));
        }
        out
    }

    fn blocks_mut(&mut self) -> Vec<&mut [f32]> {
        let mut out: Vec<&mut [f32]> = vec![
            self.projection
                .weight
                .as_slice_mut()
                .expect("standard layout"),
            self.projection
                .bias
                .as_slice_mut()
                .expect("standard layout"),
        ];
        for b in &mut self.branches {
            out.push(b.v.as_slice_mut().expect("standard layout"));
            out.push(b.v_bias.as_slice_mut().expect("standard layout"));
            out.push(b.u.as_slice_mut().expect("standard layout"));
            out.push(b.u_bias.as_slice_mut().expect("standard layout"));
            out.push(b.w.as_slice_mut().expect("standard layout"));
            out.push(std::slice::from_mut(&mut b.w_bias));
        }
        for h in &mut self.heads {
            out.push(h.weight.as_slice_mut().expect("standard layout"));
            out.push(std::slice::from_mut(&mut h.bias));
        }
        out
    }
}
