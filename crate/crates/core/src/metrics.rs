//! Slide-level evaluation metrics.
//!
//! Classification: AUROC, balanced accuracy, Matthews correlation, Cohen's
//! kappa, sensitivity and specificity, with MIR2/3 as the positive class.
//! Regression: RMSE, MAE, R² and the OLS slope of predictions on targets.

use std::fmt::Write as _;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum MetricError {
    #[error("{0} and labels differ in length ({1} vs {2})")]
    Length(&'static str, usize, usize),
    #[error("AUROC needs both classes (positives {positives}, negatives {negatives})")]
    SingleClass { positives: usize, negatives: usize },
    #[error("need at least 2 samples, got {0}")]
    TooFew(usize),
    #[error("targets have zero variance; R² and slope are undefined")]
    ZeroVariance,
    #[error("non-finite value in input")]
    NonFinite,
}

/// Area under the ROC curve in Mann–Whitney form, ties counting one half.
///
/// Computed from mid-ranks in integer arithmetic, so it agrees exactly with
/// counting all (positive, negative) pairs.
pub fn auroc(scores: &[f64], labels: &[bool]) -> Result<f64, MetricError> {
    if scores.len() != labels.len() {
        return Err(MetricError::Length("scores", scores.len(), labels.len()));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(MetricError::NonFinite);
    }
    let positives = labels.iter().filter(|&&l| l).count();
    let negatives = labels.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(MetricError::SingleClass {
            positives,
            negatives,
        });
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));

    // Twice the positive rank sum; a tie group spanning 0-based [i, j) has
    // mid-rank (i + 1 + j) / 2.
    let mut twice_rank_sum: u128 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        let pos_in_group = order[i..j].iter().filter(|&&k| labels[k]).count() as u128;
        twice_rank_sum += pos_in_group * (i as u128 + 1 + j as u128);
        i = j;
    }
    let p = positives as u128;
    let twice_u = twice_rank_sum - p * (p + 1);
    Ok(twice_u as f64 / (2 * p * negatives as u128) as f64)
}

/// Binary confusion counts with MIR2/3 as positive.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    pub fn_: u64,
}

impl ConfusionCounts {
    pub fn from_predictions(predicted: &[bool], actual: &[bool]) -> Result<Self, MetricError> {
        if predicted.len() != actual.len() {
            return Err(MetricError::Length(
                "predictions",
                predicted.len(),
                actual.len(),
            ));
        }
        let mut c = Self::default();
        for (&p, &a) in predicted.iter().zip(actual) {
            match (p, a) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, false) => c.tn += 1,
                (false, true) => c.fn_ += 1,
            }
        }
        Ok(c)
    }

    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassificationReport {
    pub balanced_accuracy: f64,
    pub mcc: f64,
    pub kappa: f64,
    pub sensitivity: f64,
    pub specificity: f64,
    /// Metrics whose denominator was zero and were reported as 0.
    pub warnings: Vec<String>,
}

fn ratio_or_zero(num: f64, den: f64, name: &str, warnings: &mut Vec<String>) -> f64 {
    if den == 0.0 {
        warnings.push(format!("{name}: zero denominator, reported as 0"));
        0.0
    } else {
        num / den
    }
}

/// Mean of sensitivity and specificity.
pub fn balanced_accuracy(sensitivity: f64, specificity: f64) -> f64 {
    (sensitivity + specificity) / 2.0
}

pub fn classification_report(c: &ConfusionCounts) -> ClassificationReport {
    let mut warnings = Vec::new();
    let (tp, fp, tn, fn_) = (c.tp as f64, c.fp as f64, c.tn as f64, c.fn_ as f64);
    let n = tp + fp + tn + fn_;
    let sensitivity = ratio_or_zero(tp, tp + fn_, "sensitivity", &mut warnings);
    let specificity = ratio_or_zero(tn, tn + fp, "specificity", &mut warnings);
    let balanced_accuracy = balanced_accuracy(sensitivity, specificity);

    let mcc_den = ((tp + fp) * (tp + fn_) * (tn + fp) * (tn + fn_)).sqrt();
    let mcc = ratio_or_zero(tp * tn - fp * fn_, mcc_den, "mcc", &mut warnings);

    let (observed, expected) = if n > 0.0 {
        let po = (tp + tn) / n;
        let pe = ((tp + fp) * (tp + fn_) + (tn + fn_) * (tn + fp)) / (n * n);
        (po, pe)
    } else {
        (0.0, 1.0)
    };
    let kappa = ratio_or_zero(observed - expected, 1.0 - expected, "kappa", &mut warnings);
    for w in &warnings {
        log::warn!("{w}");
    }
    ClassificationReport {
        balanced_accuracy,
        mcc,
        kappa,
        sensitivity,
        specificity,
        warnings,
    }
}

/// Everything reported per model in the classification results table.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassificationSummary {
    pub auroc: f64,
    pub counts: ConfusionCounts,
    pub report: ClassificationReport,
}

impl ClassificationSummary {
    /// `scores` are positive-class probabilities, `predicted` the argmax decisions.
    pub fn compute(
        scores: &[f64],
        predicted: &[bool],
        actual: &[bool],
    ) -> Result<Self, MetricError> {
        let counts = ConfusionCounts::from_predictions(predicted, actual)?;
        Ok(Self {
            auroc: auroc(scores, actual)?,
            counts,
            report: classification_report(&counts),
        })
    }

    pub const CSV_HEADER: &'static str =
        "auroc,balanced_accuracy,mcc,kappa,specificity,sensitivity,tp,fp,tn,fn,n";

    pub fn csv_row(&self) -> String {
        let r = &self.report;
        let c = &self.counts;
        format!(
            "{},{},{},{},{},{},{},{},{},{},{}",
            self.auroc,
            r.balanced_accuracy,
            r.mcc,
            r.kappa,
            r.specificity,
            r.sensitivity,
            c.tp,
            c.fp,
            c.tn,
            c.fn_,
            c.total()
        )
    }

    pub fn text(&self) -> String {
        let r = &self.report;
        let c = &self.counts;
        let mut out = String::new();
        let _ = writeln!(out, "AUROC            {:.4}", self.auroc);
        let _ = writeln!(out, "Balanced Acc.    {:.2} %", 100.0 * r.balanced_accuracy);
        let _ = writeln!(out, "MCC              {:.4}", r.mcc);
        let _ = writeln!(out, "Cohen's kappa    {:.4}", r.kappa);
        let _ = writeln!(out, "Specificity      {:.4}", r.specificity);
        let _ = writeln!(out, "Sensitivity      {:.4}", r.sensitivity);
        let _ = writeln!(
            out,
            "Confusion        tn={} fp={} / fn={} tp={}",
            c.tn, c.fp, c.fn_, c.tp
        );
        for w in &r.warnings {
            let _ = writeln!(out, "warning: {w}");
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RegressionStats {
    pub rmse: f64,
    pub mae: f64,
    pub r2: f64,
    pub slope: f64,
    pub n: usize,
}

impl RegressionStats {
    pub const CSV_HEADER: &'static str = "rmse,mae,r2,slope,n";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{}",
            self.rmse, self.mae, self.r2, self.slope, self.n
        )
    }

    pub fn text(&self) -> String {
        format!(
            "RMSE             {:.4}\nMAE              {:.4}\nR2               {:.4}\nslope            {:.4}\nn                {}\n",
            self.rmse, self.mae, self.r2, self.slope, self.n
        )
    }
}

/// RMSE, MAE, R² and OLS slope of `predictions` regressed on `targets`.
pub fn regression_report(
    predictions: &[f64],
    targets: &[f64],
) -> Result<RegressionStats, MetricError> {
    if predictions.len() != targets.len() {
        return Err(MetricError::Length(
            "predictions",
            predictions.len(),
            targets.len(),
        ));
    }
    let n = targets.len();
    if n < 2 {
        return Err(MetricError::TooFew(n));
    }
    if predictions.iter().chain(targets).any(|v| !v.is_finite()) {
        return Err(MetricError::NonFinite);
    }
    let nf = n as f64;
    let mean_t = targets.iter().sum::<f64>() / nf;
    let mean_p = predictions.iter().sum::<f64>() / nf;
    let mut sq = 0.0;
    let mut abs = 0.0;
    let mut ss_tot = 0.0;
    let mut cov = 0.0;
    for (&p, &t) in predictions.iter().zip(targets) {
        let e = p - t;
        sq += e * e;
        abs += e.abs();
        ss_tot += (t - mean_t) * (t - mean_t);
        cov += (t - mean_t) * (p - mean_p);
    }
    if ss_tot == 0.0 {
        return Err(MetricError::ZeroVariance);
    }
    Ok(RegressionStats {
        rmse: (sq / nf).sqrt(),
        mae: abs / nf,
        r2: 1.0 - sq / ss_tot,
        slope: cov / ss_tot,
        n,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pairwise_auroc(pos: &[f64], neg: &[f64]) -> f64 {
        let mut wins = 0.0;
        for &p in pos {
            for &n in neg {
                if p > n {
                    wins += 1.0;
                } else if p == n {
                    wins += 0.5;
                }
            }
        }
        wins / (pos.len() * neg.len()) as f64
    }

    fn auroc_of(pos: &[f64], neg: &[f64]) -> f64 {
        let scores: Vec<f64> = pos.iter().chain(neg).copied().collect();
        let labels: Vec<bool> = pos
            .iter()
            .map(|_| true)
            .chain(neg.iter().map(|_| false))
            .collect();
        auroc(&scores, &labels).unwrap()
    }

    #[test]
    fn auroc_examples() {
        assert_eq!(auroc_of(&[0.9, 0.8], &[0.1, 0.7]), 1.0);
        assert_eq!(pairwise_auroc(&[0.9, 0.8], &[0.85, 0.1]), 0.75);
        assert_eq!(auroc_of(&[0.9, 0.8], &[0.85, 0.1]), 0.75);
        assert_eq!(auroc_of(&[0.5, 0.5, 0.5], &[0.5, 0.5]), 0.5);
    }

    #[test]
    fn auroc_single_class_is_error() {
        assert!(matches!(
            auroc(&[0.1, 0.2], &[true, true]),
            Err(MetricError::SingleClass { .. })
        ));
    }

    #[test]
    fn auroc_monotone_invariance() {
        let scores = [0.1, 0.4, 0.35, 0.8, 0.4, 0.05];
        let labels = [false, true, false, true, false, true];
        let base = auroc(&scores, &labels).unwrap();
        let warped: Vec<f64> = scores.iter().map(|s| (5.0 * s).exp() - 3.0).collect();
        assert_eq!(auroc(&warped, &labels).unwrap(), base);
    }

    #[test]
    fn symmetric_confusion_report() {
        let c = ConfusionCounts {
            tp: 40,
            fp: 10,
            tn: 40,
            fn_: 10,
        };
        let r = classification_report(&c);
        assert!((r.sensitivity - 0.8).abs() < 1e-12);
        assert!((r.specificity - 0.8).abs() < 1e-12);
        assert!((r.balanced_accuracy - 0.8).abs() < 1e-12);
        assert!((r.mcc - 0.6).abs() < 1e-12);
        assert!((r.kappa - 0.6).abs() < 1e-12);
        assert!(r.warnings.is_empty());
    }

    #[test]
    fn perfect_diagonal() {
        let r = classification_report(&ConfusionCounts {
            tp: 7,
            fp: 0,
            tn: 13,
            fn_: 0,
        });
        for v in [
            r.sensitivity,
            r.specificity,
            r.balanced_accuracy,
            r.mcc,
            r.kappa,
        ] {
            assert_eq!(v, 1.0);
        }
    }

    #[test]
    fn constant_positive_predictor() {
        let r = classification_report(&ConfusionCounts {
            tp: 50,
            fp: 50,
            tn: 0,
            fn_: 0,
        });
        assert_eq!(r.kappa, 0.0);
        assert_eq!(r.mcc, 0.0);
        assert_eq!(r.balanced_accuracy, 0.5);
        assert!(r.warnings.iter().any(|w| w.starts_with("mcc")));
    }

    #[test]
    fn regression_exact() {
        let s = regression_report(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]).unwrap();
        assert_eq!((s.rmse, s.mae, s.r2, s.slope), (0.0, 0.0, 1.0, 1.0));
    }

    #[test]
    fn regression_constant_mean() {
        let s = regression_report(&[2.0, 2.0, 2.0], &[1.0, 2.0, 3.0]).unwrap();
        assert_eq!(s.r2, 0.0);
        assert_eq!(s.slope, 0.0);
    }

    #[test]
    fn regression_closed_form() {
        let s = regression_report(&[0.0, 2.0, 1.0], &[0.0, 1.0, 2.0]).unwrap();
        assert!((s.rmse - (2.0f64 / 3.0).sqrt()).abs() < 1e-15);
        assert!((s.mae - 2.0 / 3.0).abs() < 1e-15);
        assert!((s.slope - 0.5).abs() < 1e-15);
        assert!(s.r2.abs() < 1e-15);
    }

    #[test]
    fn regression_errors() {
        assert_eq!(
            regression_report(&[1.0], &[1.0]),
            Err(MetricError::TooFew(1))
        );
        assert_eq!(
            regression_report(&[1.0, 2.0], &[3.0, 3.0]),
            Err(MetricError::ZeroVariance)
        );
    }
}
