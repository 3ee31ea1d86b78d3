//! Slide-level predictions and the evaluation report for a trained model.

use rayon::prelude::*;

use crate::metrics::{regression_report, ClassificationSummary, MetricError, RegressionStats};
use crate::mil::{MilModel, ModelError};
use crate::store::EmbeddingBag;
use crate::train::{Task, TrainError};

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("{task} task does not match a {kind} model")]
    TaskMismatch { task: Task, kind: &'static str },
    #[error("no bags to evaluate")]
    Empty,
    #[error(transparent)]
    Label(#[from] TrainError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Metric(#[from] MetricError),
}

#[derive(Clone, Debug, PartialEq)]
pub struct SlidePrediction {
    pub slide_id: String,
    pub actual: f64,
    /// Class index or regression output.
    pub predicted: f64,
    /// Positive-class probability (classification only).
    pub score: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum EvalReport {
    Classification(ClassificationSummary),
    Regression(RegressionStats),
}

impl EvalReport {
    pub fn csv(&self) -> String {
        match self {
            EvalReport::Classification(s) => {
                format!("{}\n{}\n", ClassificationSummary::CSV_HEADER, s.csv_row())
            }
            EvalReport::Regression(s) => {
                format!("{}\n{}\n", RegressionStats::CSV_HEADER, s.csv_row())
            }
        }
    }

    pub fn text(&self) -> String {
        match self {
            EvalReport::Classification(s) => s.text(),
            EvalReport::Regression(s) => s.text(),
        }
    }
}

pub fn predict(
    model: &MilModel,
    bags: &[EmbeddingBag],
    task: Task,
) -> Result<Vec<SlidePrediction>, EvalError> {
    match model {
        MilModel::Classifier(_) if !task.is_classification() => {
            return Err(EvalError::TaskMismatch {
                task,
                kind: "classifier",
            })
        }
        MilModel::Regressor(_) if task.is_classification() => {
            return Err(EvalError::TaskMismatch {
                task,
                kind: "regressor",
            })
        }
        _ => {}
    }
    bags.par_iter()
        .map(|bag| {
            let actual = task.target(bag)?;
            let (predicted, score) = match model {
                MilModel::Classifier(m) => {
                    let out = m.forward(bag)?;
                    (f64::from(out.predicted_class()), Some(out.positive_score()))
                }
                MilModel::Regressor(m) => (m.forward(bag)?.prediction, None),
            };
            Ok(SlidePrediction {
                slide_id: bag.slide_id().to_string(),
                actual,
                predicted,
                score,
            })
        })
        .collect()
}

pub fn evaluate(
    model: &MilModel,
    bags: &[EmbeddingBag],
    task: Task,
) -> Result<(EvalReport, Vec<SlidePrediction>), EvalError> {
    if bags.is_empty() {
        return Err(EvalError::Empty);
    }
    let preds = predict(model, bags, task)?;
    let report = if task.is_classification() {
        let scores: Vec<f64> = preds.iter().map(|p| p.score.unwrap_or(0.0)).collect();
        let predicted: Vec<bool> = preds.iter().map(|p| p.predicted == 1.0).collect();
        let actual: Vec<bool> = preds.iter().map(|p| p.actual == 1.0).collect();
        EvalReport::Classification(ClassificationSummary::compute(
            &scores, &predicted, &actual,
        )?)
    } else {
        let predicted: Vec<f64> = preds.iter().map(|p| p.predicted).collect();
        let actual: Vec<f64> = preds.iter().map(|p| p.actual).collect();
        EvalReport::Regression(regression_report(&predicted, &actual)?)
    };
    Ok((report, preds))
}

pub fn predictions_csv(preds: &[SlidePrediction]) -> String {
    let mut out = String::from("slide_id,actual,predicted,score\n");
    for p in preds {
        let score = p.score.map(|s| s.to_string()).unwrap_or_default();
        out.push_str(&format!(
            "{},{},{},{}\n",
            p.slide_id, p.actual, p.predicted, score
        ));
    }
    out
}
