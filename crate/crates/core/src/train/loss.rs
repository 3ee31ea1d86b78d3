//! Bag-level losses and the class / bin weightings that feed them.

use super::TrainError;

/// Binary hinge loss on the logit margin.
///
/// With `m = s[label] - s[other]`, the loss is `weight * max(0, 1 - m)`.
/// The subgradient at the kink `m = 1` is taken as zero.
pub fn hinge_loss(logits: [f64; 2], label: u8, class_weight: f64) -> (f64, [f64; 2]) {
    let l = usize::from(label == 1);
    let o = 1 - l;
    let margin = logits[l] - logits[o];
    if margin >= 1.0 {
        return (0.0, [0.0, 0.0]);
    }
    let mut grad = [0.0; 2];
    grad[l] = -class_weight;
    grad[o] = class_weight;
    (class_weight * (1.0 - margin), grad)
}

/// `w_c = N / (2 * N_c)`: balanced classes get weight 1 and the sample-mean weight is 1.
pub fn class_weights(labels: &[u8]) -> Result<[f64; 2], TrainError> {
    let mut counts = [0usize; 2];
    for &l in labels {
        if l > 1 {
            return Err(TrainError::Config(format!("class label {l} is not binary")));
        }
        counts[usize::from(l)] += 1;
    }
    if counts.contains(&0) {
        return Err(TrainError::Config(format!(
            "class weighting needs both classes, counts {counts:?}"
        )));
    }
    let total = labels.len() as f64;
    Ok(counts.map(|c| total / (2.0 * c as f64)))
}

pub fn mse_loss(prediction: f64, target: f64) -> (f64, f64) {
    let e = prediction - target;
    (e * e, 2.0 * e)
}

/// Equal-width target bins with inverse-frequency weights.
#[derive(Clone, Debug, PartialEq)]
pub struct BinWeights {
    /// `bins + 1` ascending edges; the last bin includes its right edge.
    pub edges: Vec<f64>,
    /// Weight per bin, 0 for bins with no training targets.
    pub weights: Vec<f64>,
}

impl BinWeights {
    pub fn n_bins(&self) -> usize {
        self.weights.len()
    }

    /// Bin of `target`; values outside the fitted range clamp to the end bins.
    pub fn bin_of(&self, target: f64) -> usize {
        let n = self.n_bins();
        let lo = self.edges[0];
        let hi = self.edges[n];
        let pos = (target - lo) / (hi - lo) * n as f64;
        if pos.is_nan() || pos < 0.0 {
            0
        } else {
            (pos.floor() as usize).min(n - 1)
        }
    }

    pub fn weight(&self, target: f64) -> f64 {
        self.weights[self.bin_of(target)]
    }
}

/// Fits `bins` equal-width bins over `[min, max]` of the training targets.
///
/// Non-empty bin `b` with `n_b` samples gets weight `N / (K * n_b)`, `K` being
/// the number of non-empty bins, so the count-weighted mean weight is 1.
pub fn fit_bins(targets: &[f64], bins: usize) -> Result<BinWeights, TrainError> {
    if bins < 2 {
        return Err(TrainError::Config(format!(
            "need at least 2 bins, got {bins}"
        )));
    }
    if targets.iter().any(|t| !t.is_finite()) {
        return Err(TrainError::Config("non-finite regression target".into()));
    }
    let lo = targets.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = targets.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if targets.is_empty() || !(hi > lo) {
        return Err(TrainError::Config(
            "bin fitting needs at least 2 distinct targets".into(),
        ));
    }
    let width = (hi - lo) / bins as f64;
    let mut edges: Vec<f64> = (0..bins).map(|b| lo + width * b as f64).collect();
    edges.push(hi);
    let mut fitted = BinWeights {
        edges,
        weights: vec![0.0; bins],
    };
    let mut counts = vec![0usize; bins];
    for &t in targets {
        counts[fitted.bin_of(t)] += 1;
    }
    let occupied = counts.iter().filter(|&&c| c > 0).count() as f64;
    let total = targets.len() as f64;
    for (w, &c) in fitted.weights.iter_mut().zip(&counts) {
        if c > 0 {
            *w = total / (occupied * c as f64);
        }
    }
    Ok(fitted)
}

/// `w_bin(target) * (prediction - target)^2` and its derivative in `prediction`.
pub fn wmse_loss(prediction: f64, target: f64, bins: &BinWeights) -> (f64, f64) {
    let w = bins.weight(target);
    let (loss, grad) = mse_loss(prediction, target);
    (w * loss, w * grad)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hinge_examples() {
        assert_eq!(hinge_loss([3.0, 1.0], 0, 1.0), (0.0, [0.0, 0.0]));
        let (loss, grad) = hinge_loss([0.5, 0.0], 0, 1.0);
        assert_eq!(loss, 0.5);
        assert_eq!(grad, [-1.0, 1.0]);
        let (loss, grad) = hinge_loss([0.5, 0.0], 1, 2.0);
        assert_eq!(loss, 3.0);
        assert_eq!(grad, [2.0, -2.0]);
        // Exactly at the kink.
        assert_eq!(hinge_loss([1.0, 0.0], 0, 1.0), (0.0, [0.0, 0.0]));
    }

    #[test]
    fn hinge_gradient_matches_finite_differences() {
        let mut rng = crate::rng::StreamRng::new(5, 5);
        let eps = 1e-6;
        let mut checked = 0;
        for _ in 0..200 {
            let logits = [rng.normal() * 2.0, rng.normal() * 2.0];
            let label = (rng.below(2)) as u8;
            let w = rng.uniform_range(0.5, 3.0);
            let l = usize::from(label == 1);
            let margin = logits[l] - logits[1 - l];
            if (margin - 1.0).abs() < 1e-3 {
                continue;
            }
            let (_, grad) = hinge_loss(logits, label, w);
            for k in 0..2 {
                let mut up = logits;
                let mut down = logits;
                up[k] += eps;
                down[k] -= eps;
                let fd = (hinge_loss(up, label, w).0 - hinge_loss(down, label, w).0) / (2.0 * eps);
                assert!((fd - grad[k]).abs() < 1e-6, "{fd} vs {}", grad[k]);
            }
            checked += 1;
        }
        assert!(checked > 150);
    }

    #[test]
    fn class_weight_examples() {
        let mut labels = vec![0u8; 2786];
        labels.extend(std::iter::repeat(1u8).take(599));
        let w = class_weights(&labels).unwrap();
        assert!((w[0] - 3385.0 / 5572.0).abs() < 1e-12);
        assert!((w[1] - 3385.0 / 1198.0).abs() < 1e-12);
        assert!((w[0] - 0.6075).abs() < 1e-4 && (w[1] - 2.8256).abs() < 1e-4);
        let mean = (2786.0 * w[0] + 599.0 * w[1]) / 3385.0;
        assert!((mean - 1.0).abs() < 1e-9);

        assert_eq!(class_weights(&[0, 1, 0, 1]).unwrap(), [1.0, 1.0]);

        let mut nine_one = vec![0u8; 9];
        nine_one.push(1);
        let w = class_weights(&nine_one).unwrap();
        assert!((w[0] - 10.0 / 18.0).abs() < 1e-12 && (w[1] - 5.0).abs() < 1e-12);

        assert!(class_weights(&[0, 0, 0]).is_err());
    }

    #[test]
    fn uniform_targets_weight_one() {
        let targets: Vec<f64> = (0..100).map(|i| i as f64 + 0.5).collect();
        let bins = fit_bins(&targets, 10).unwrap();
        for &w in &bins.weights {
            assert!((w - 1.0).abs() < 1e-12);
        }
        for &t in &targets {
            assert_eq!(wmse_loss(t + 0.3, t, &bins).0, mse_loss(t + 0.3, t).0);
        }
    }

    #[test]
    fn sparse_bin_gets_inverse_count_weight() {
        let mut targets = vec![0.0; 9];
        targets.push(10.0);
        let bins = fit_bins(&targets, 10).unwrap();
        assert_eq!(bins.bin_of(0.0), 0);
        assert_eq!(bins.bin_of(10.0), 9);
        let ratio = bins.weights[9] / bins.weights[0];
        assert!((ratio - 9.0).abs() < 1e-12);
        assert!(bins.weights[1..9].iter().all(|&w| w == 0.0));
        let mean: f64 = targets.iter().map(|&t| bins.weight(t)).sum::<f64>() / targets.len() as f64;
        assert!((mean - 1.0).abs() < 1e-9);
    }

    #[test]
    fn normalization_holds_for_skewed_targets() {
        let mut rng = crate::rng::StreamRng::new(8, 1);
        let targets: Vec<f64> = (0..777).map(|_| rng.normal().exp()).collect();
        let bins = fit_bins(&targets, 10).unwrap();
        let mean: f64 = targets.iter().map(|&t| bins.weight(t)).sum::<f64>() / targets.len() as f64;
        assert!((mean - 1.0).abs() < 1e-9);
    }

    #[test]
    fn out_of_range_targets_clamp() {
        let bins = fit_bins(&[0.0, 1.0, 2.0, 3.0], 3).unwrap();
        assert_eq!(bins.bin_of(-5.0), 0);
        assert_eq!(bins.bin_of(50.0), 2);
    }

    #[test]
    fn wmse_direct_formula() {
        let bins = BinWeights {
            edges: vec![0.0, 1.0, 2.0],
            weights: vec![2.0, 1.0],
        };
        let (loss, grad) = wmse_loss(2.0, 0.5, &bins);
        assert_eq!(loss, 4.5);
        assert_eq!(grad, 6.0);
        assert_eq!(wmse_loss(0.5, 0.5, &bins), (0.0, 0.0));
    }

    #[test]
    fn constant_targets_rejected() {
        assert!(fit_bins(&[3.0, 3.0, 3.0], 10).is_err());
        assert!(fit_bins(&[1.0, 2.0], 1).is_err());
    }
}
