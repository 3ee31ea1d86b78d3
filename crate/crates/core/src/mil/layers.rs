//! Building blocks shared by the classifier and the regressor.
//!
//! Parameters live in `f32`; every forward and backward computation runs in
//! `f64` on widened copies.

use ndarray::{Array1, Array2, ArrayView2, Axis};

use crate::rng::StreamRng;

fn widen2(a: &Array2<f32>) -> Array2<f64> {
    a.mapv(f64::from)
}

fn widen1(a: &Array1<f32>) -> Array1<f64> {
    a.mapv(f64::from)
}

/// Glorot-uniform matrix: entries in `±sqrt(6 / (fan_in + fan_out))`.
pub(crate) fn glorot(rows: usize, cols: usize, rng: &mut StreamRng) -> Array2<f32> {
    let bound = glorot_bound(rows, cols);
    Array2::from_shape_simple_fn((rows, cols), || rng.uniform_range(-bound, bound) as f32)
}

pub fn glorot_bound(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

/// `ReLU(x W + b)`, `W` is `D x H`.
#[derive(Clone, Debug, PartialEq)]
pub struct Projection {
    pub weight: Array2<f32>,
    pub bias: Array1<f32>,
}

impl Projection {
    pub(crate) fn init(input: usize, hidden: usize, rng: &mut StreamRng) -> Self {
        Self {
            weight: glorot(input, hidden, rng),
            bias: Array1::zeros(hidden),
        }
    }

    /// Returns `(pre_activation, hidden)`.
    pub(crate) fn forward(&self, x: ArrayView2<f64>) -> (Array2<f64>, Array2<f64>) {
        let pre = x.dot(&widen2(&self.weight)) + &widen1(&self.bias);
        let hidden = pre.mapv(|v| v.max(0.0));
        (pre, hidden)
    }

    /// Gradients for `(weight, bias)` given the upstream gradient on the hidden activations.
    pub(crate) fn backward(
        x: ArrayView2<f64>,
        pre: &Array2<f64>,
        mut d_hidden: Array2<f64>,
    ) -> (Array2<f64>, Array1<f64>) {
        ndarray::Zip::from(&mut d_hidden)
            .and(pre)
            .for_each(|d, &p| {
                if p <= 0.0 {
                    *d = 0.0;
                }
            });
        (x.t().dot(&d_hidden), d_hidden.sum_axis(Axis(0)))
    }
}

/// Gated attention scorer with softmax pooling:
/// `e_i = w . (tanh(V^T h_i + b_v) * sigmoid(U^T h_i + b_u)) + b_w`, `a = softmax(e)`,
/// pooled `M = sum_i a_i h_i`.
#[derive(Clone, Debug, PartialEq)]
pub struct GatedAttention {
    pub v: Array2<f32>,
    pub v_bias: Array1<f32>,
    pub u: Array2<f32>,
    pub u_bias: Array1<f32>,
    pub w: Array1<f32>,
    pub w_bias: f32,
}

#[derive(Clone, Debug)]
pub struct BranchTrace {
    pub tanh: Array2<f64>,
    pub gate: Array2<f64>,
    /// Pre-softmax attention scores.
    pub scores: Array1<f64>,
    pub attention: Array1<f64>,
    pub pooled: Array1<f64>,
}

#[derive(Clone, Debug)]
pub struct BranchGrads {
    pub v: Array2<f64>,
    pub v_bias: Array1<f64>,
    pub u: Array2<f64>,
    pub u_bias: Array1<f64>,
    pub w: Array1<f64>,
    pub w_bias: f64,
}

/// Numerically stable softmax: shifts by the maximum before exponentiating.
pub fn softmax(scores: &Array1<f64>) -> Array1<f64> {
    let max = scores.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let exp = scores.mapv(|v| (v - max).exp());
    let total = exp.sum();
    exp / total
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

impl GatedAttention {
    pub(crate) fn init(hidden: usize, attn: usize, rng: &mut [StreamRng; 3]) -> Self {
        Self {
            v: glorot(hidden, attn, &mut rng[0]),
            v_bias: Array1::zeros(attn),
            u: glorot(hidden, attn, &mut rng[1]),
            u_bias: Array1::zeros(attn),
            w: glorot(attn, 1, &mut rng[2])
                .into_shape_with_order(attn)
                .expect("column"),
            w_bias: 0.0,
        }
    }

    pub(crate) fn forward(&self, hidden: &Array2<f64>) -> BranchTrace {
        let tanh = (hidden.dot(&widen2(&self.v)) + &widen1(&self.v_bias)).mapv(f64::tanh);
        let gate = (hidden.dot(&widen2(&self.u)) + &widen1(&self.u_bias)).mapv(sigmoid);
        let gated = &tanh * &gate;
        let scores = gated.dot(&widen1(&self.w)) + f64::from(self.w_bias);
        let attention = softmax(&scores);
        let pooled = hidden.t().dot(&attention);
        BranchTrace {
            tanh,
            gate,
            scores,
            attention,
            pooled,
        }
    }

    /// Backpropagates `d_pooled` through pooling, softmax and gating.
    /// Adds this branch's contribution to `d_hidden`.
    pub(crate) fn backward(
        &self,
        hidden: &Array2<f64>,
        trace: &BranchTrace,
        d_pooled: &Array1<f64>,
        d_hidden: &mut Array2<f64>,
    ) -> BranchGrads {
        let a = &trace.attention;
        // M = H^T a
        let d_attn = hidden.dot(d_pooled);
        for (mut row, &ai) in d_hidden.axis_iter_mut(Axis(0)).zip(a.iter()) {
            row.scaled_add(ai, d_pooled);
        }
        // softmax Jacobian: de_i = a_i (da_i - sum_j a_j da_j)
        let mean = a.dot(&d_attn);
        let d_scores = a * &(d_attn - mean);

        let gated = &trace.tanh * &trace.gate;
        let d_w = gated.t().dot(&d_scores);
        let d_w_bias = d_scores.sum();

        let w = widen1(&self.w);
        let n = d_scores.len();
        let d_gated = d_scores
            .view()
            .into_shape_with_order((n, 1))
            .expect("column")
            .dot(&w.view().into_shape_with_order((1, w.len())).expect("row"));
        let d_zv = &d_gated * &trace.gate * &trace.tanh.mapv(|t| 1.0 - t * t);
        let d_zu = &d_gated * &trace.tanh * &trace.gate.mapv(|s| s * (1.0 - s));

        let v = widen2(&self.v);
        let u = widen2(&self.u);
        *d_hidden += &d_zv.dot(&v.t());
        *d_hidden += &d_zu.dot(&u.t());

        BranchGrads {
            v: hidden.t().dot(&d_zv),
            v_bias: d_zv.sum_axis(Axis(0)),
            u: hidden.t().dot(&d_zu),
            u_bias: d_zu.sum_axis(Axis(0)),
            w: d_w,
            w_bias: d_w_bias,
        }
    }
}

/// Scalar readout `g . M + b`.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearHead {
    pub weight: Array1<f32>,
    pub bias: f32,
}

impl LinearHead {
    pub(crate) fn init(hidden: usize, rng: &mut StreamRng) -> Self {
        Self {
            weight: glorot(hidden, 1, rng)
                .into_shape_with_order(hidden)
                .expect("column"),
            bias: 0.0,
        }
    }

    pub(crate) fn forward(&self, pooled: &Array1<f64>) -> f64 {
        widen1(&self.weight).dot(pooled) + f64::from(self.bias)
    }

    pub(crate) fn weight_f64(&self) -> Array1<f64> {
        widen1(&self.weight)
    }
}
