//! Training: losses, AdamW, and the epoch loop with validation-based model selection.

mod adam;
pub mod loss;

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;

pub use adam::AdamW;
pub use loss::{class_weights, fit_bins, hinge_loss, mse_loss, wmse_loss, BinWeights};

use crate::metrics::{ClassificationReport, ConfusionCounts};
use crate::mil::{
    MilClassifier, MilModel, MilRegressor, ModelDims, ModelError, ParamBlocks, DEFAULT_ATTENTION,
    DEFAULT_HIDDEN,
};
use crate::rng::{streams, StreamRng};
use crate::store::{DatasetManifest, EmbeddingBag, Split, StoreError};

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("slide `{slide_id}` has no {task} label")]
    MissingLabel { slide_id: String, task: Task },
    #[error("split `{0}` is empty")]
    EmptySplit(Split),
    #[error("non-finite loss at epoch {epoch} on slide `{slide_id}` (loss {loss})")]
    NonFinite {
        epoch: usize,
        slide_id: String,
        loss: f64,
    },
    #[error("configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Store(#[from] StoreError),
}

/// Prediction target.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Task {
    /// MIR0/1 vs MIR2/3.
    Mir,
    Wbc,
    TMax,
}

impl Task {
    pub fn is_classification(self) -> bool {
        self == Task::Mir
    }

    pub fn class_label(self, bag: &EmbeddingBag) -> Result<u8, TrainError> {
        bag.labels().mir_binary().ok_or_else(|| self.missing(bag))
    }

    pub fn target(self, bag: &EmbeddingBag) -> Result<f64, TrainError> {
        let v = match self {
            Task::Mir => bag.labels().mir_binary().map(f32::from),
            Task::Wbc => bag.labels().wbc,
            Task::TMax => bag.labels().t_max,
        };
        v.map(f64::from).ok_or_else(|| self.missing(bag))
    }

    fn missing(self, bag: &EmbeddingBag) -> TrainError {
        TrainError::MissingLabel {
            slide_id: bag.slide_id().to_string(),
            task: self,
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Task::Mir => "mir",
            Task::Wbc => "wbc",
            Task::TMax => "tmax",
        })
    }
}

impl FromStr for Task {
    type Err = TrainError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "mir" => Ok(Task::Mir),
            "wbc" => Ok(Task::Wbc),
            "tmax" => Ok(Task::TMax),
            other => Err(TrainError::Config(format!("unknown task `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossKind {
    Hinge,
    Mse,
    Wmse,
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LossKind::Hinge => "hinge",
            LossKind::Mse => "mse",
            LossKind::Wmse => "wmse",
        })
    }
}

impl FromStr for LossKind {
    type Err = TrainError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "hinge" => Ok(LossKind::Hinge),
            "mse" => Ok(LossKind::Mse),
            "wmse" => Ok(LossKind::Wmse),
            other => Err(TrainError::Config(format!("unknown loss `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
    pub class_weighting: bool,
    pub loss: LossKind,
    pub bins: usize,
    pub hidden: usize,
    pub attention: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            weight_decay: 1e-5,
            max_epochs: 50,
            patience: 10,
            seed: 42,
            class_weighting: false,
            loss: LossKind::Hinge,
            bins: 10,
            hidden: DEFAULT_HIDDEN,
            attention: DEFAULT_ATTENTION,
        }
    }
}

impl TrainConfig {
    fn validate(&self, task: Task) -> Result<(), TrainError> {
        let bad = |msg: &str| Err(TrainError::Config(msg.to_string()));
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad("learning rate must be finite and non-negative");
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad("weight decay must be finite and non-negative");
        }
        if self.max_epochs == 0 || self.patience == 0 {
            return bad("epochs and patience must be positive");
        }
        if self.hidden == 0 || self.attention == 0 {
            return bad("model widths must be positive");
        }
        match (task.is_classification(), self.loss) {
            (true, LossKind::Hinge) | (false, LossKind::Mse) => Ok(()),
            (false, LossKind::Wmse) if self.bins >= 2 => Ok(()),
            (false, LossKind::Wmse) => bad("wmse needs at least 2 bins"),
            (true, l) => Err(TrainError::Config(format!(
                "loss {l} does not apply to classification"
            ))),
            (false, l) => Err(TrainError::Config(format!(
                "loss {l} does not apply to regression"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    /// Mean per-bag training loss, each measured before that bag's update.
    pub train_loss: f64,
    /// Balanced accuracy (classification) or RMSE (regression) on the validation split.
    pub val_metric: f64,
    /// Whether this epoch's weights are the returned model.
    pub selected: bool,
}

pub fn epoch_log_csv(log: &[EpochRecord]) -> String {
    let mut out = String::from("epoch,train_loss,val_metric,selected\n");
    for r in log {
        out.push_str(&format!(
            "{},{},{},{}\n",
            r.epoch,
            r.train_loss,
            r.val_metric,
            u8::from(r.selected)
        ));
    }
    out
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: MilModel,
    pub log: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub class_weights: Option<[f64; 2]>,
    pub bin_weights: Option<BinWeights>,
}

/// Loads the train and valid splits of `manifest` and trains on them.
pub fn train(
    manifest: &DatasetManifest,
    base_dir: &Path,
    task: Task,
    config: &TrainConfig,
) -> Result<TrainOutcome, TrainError> {
    let train_bags = manifest.load_bags(base_dir, Split::Train)?;
    let valid_bags = manifest.load_bags(base_dir, Split::Valid)?;
    train_bags_with(&train_bags, &valid_bags, task, config)
}

enum Objective {
    Hinge { weights: [f64; 2] },
    Mse,
    Wmse(BinWeights),
}

/// Trains on in-memory bags: one bag per AdamW step, training order shuffled
/// per epoch from `(seed, epoch)`, keeping the weights with the best
/// validation metric and stopping after `patience` epochs without strict improvement.
pub fn train_bags_with(
    train: &[EmbeddingBag],
    valid: &[EmbeddingBag],
    task: Task,
    config: &TrainConfig,
) -> Result<TrainOutcome, TrainError> {
    config.validate(task)?;
    if train.is_empty() {
        return Err(TrainError::EmptySplit(Split::Train));
    }
    if valid.is_empty() {
        return Err(TrainError::EmptySplit(Split::Valid));
    }
    let dim = train[0].dim();
    let dims = ModelDims::new(dim, config.hidden, config.attention);
    // Fail on missing labels before any work.
    let train_targets: Vec<f64> = train
        .iter()
        .map(|b| task.target(b))
        .collect::<Result<_, _>>()?;
    for b in valid {
        task.target(b)?;
    }

    let (mut model, objective) = if task.is_classification() {
        let labels: Vec<u8> = train
            .iter()
            .map(|b| task.class_label(b))
            .collect::<Result<_, _>>()?;
        let weights = if config.class_weighting {
            class_weights(&labels)?
        } else {
            [1.0, 1.0]
        };
        (
            MilModel::Classifier(MilClassifier::init(dims, config.seed)?),
            Objective::Hinge { weights },
        )
    } else {
        let mut r = MilRegressor::init(dims, config.seed)?;
        r.fit_target_scaling(&train_targets);
        let objective = match config.loss {
            LossKind::Wmse => Objective::Wmse(fit_bins(&train_targets, config.bins)?),
            _ => Objective::Mse,
        };
        (MilModel::Regressor(r), objective)
    };
    log::info!(
        "training {task} model {dims:?} on {} bags (valid {}), loss {}",
        train.len(),
        valid.len(),
        config.loss
    );

    let mut opt = AdamW::new(config.learning_rate, config.weight_decay);
    let mut best: Option<(f64, usize, MilModel)> = None;
    let mut log = Vec::new();
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 1..=config.max_epochs {
        order.sort_unstable();
        StreamRng::new(config.seed, streams::EPOCH_SHUFFLE + epoch as u64).shuffle(&mut order);
        let mut loss_sum = 0.0;
        for &i in &order {
            let bag = &train[i];
            let loss = train_step(&mut model, &mut opt, bag, task, &objective)?;
            if !loss.is_finite() {
                return Err(TrainError::NonFinite {
                    epoch,
                    slide_id: bag.slide_id().to_string(),
                    loss,
                });
            }
            loss_sum += loss;
        }
        let train_loss = loss_sum / train.len() as f64;
        let val_metric = validation_metric(&model, valid, task)?;
        let improved = match &best {
            None => true,
            Some((b, _, _)) if task.is_classification() => val_metric > *b,
            Some((b, _, _)) => val_metric < *b,
        };
        log::info!(
            "epoch {epoch}: train loss {train_loss:.6}, val {val_metric:.6}{}",
            if improved { " *" } else { "" }
        );
        log.push(EpochRecord {
            epoch,
            train_loss,
            val_metric,
            selected: false,
        });
        if improved {
            best = Some((val_metric, epoch, model.clone()));
        }
        let best_epoch = best.as_ref().map_or(epoch, |b| b.1);
        if epoch - best_epoch >= config.patience {
            log::info!("no improvement for {} epochs, stopping", config.patience);
            break;
        }
    }
    let (_, best_epoch, best_model) = best.expect("at least one epoch ran");
    log[best_epoch - 1].selected = true;
    let (class_weights, bin_weights) = match objective {
        Objective::Hinge { weights } => (Some(weights), None),
        Objective::Mse => (None, None),
        Objective::Wmse(b) => (None, Some(b)),
    };
    Ok(TrainOutcome {
        model: best_model,
        log,
        best_epoch,
        class_weights,
        bin_weights,
    })
}

/// Loss and gradient for one bag, followed by one optimizer update.
fn train_step(
    model: &mut MilModel,
    opt: &mut AdamW,
    bag: &EmbeddingBag,
    task: Task,
    objective: &Objective,
) -> Result<f64, TrainError> {
    match (model, objective) {
        (MilModel::Classifier(m), Objective::Hinge { weights }) => {
            let label = task.class_label(bag)?;
            let (out, trace) = m.forward_traced(bag)?;
            let (loss, d_logits) = hinge_loss(out.logits, label, weights[usize::from(label)]);
            if loss.is_finite() && loss > 0.0 {
                let grads = m.backward(&trace, d_logits);
                opt.step(m.blocks_mut(), &grads);
            } else {
                let grads = crate::mil::Gradients::zeros_like(m);
                opt.step(m.blocks_mut(), &grads);
            }
            Ok(loss)
        }
        (MilModel::Regressor(m), obj) => {
            let target = task.target(bag)?;
            let (out, trace) = m.forward_traced(bag)?;
            let (loss, d_pred) = match obj {
                Objective::Wmse(bins) => wmse_loss(out.prediction, target, bins),
                _ => mse_loss(out.prediction, target),
            };
            if loss.is_finite() {
                let grads = m.backward(&trace, d_pred);
                opt.step(m.blocks_mut(), &grads);
            }
            Ok(loss)
        }
        _ => Err(TrainError::Config(
            "objective does not match model kind".into(),
        )),
    }
}

fn validation_metric(
    model: &MilModel,
    valid: &[EmbeddingBag],
    task: Task,
) -> Result<f64, TrainError> {
    match model {
        MilModel::Classifier(m) => {
            let rows: Vec<(bool, bool)> = valid
                .par_iter()
                .map(|b| -> Result<(bool, bool), TrainError> {
                    let out = m.forward(b)?;
                    Ok((out.predicted_class() == 1, task.class_label(b)? == 1))
                })
                .collect::<Result<_, _>>()?;
            let (pred, actual): (Vec<bool>, Vec<bool>) = rows.into_iter().unzip();
            let counts = ConfusionCounts::from_predictions(&pred, &actual).expect("equal lengths");
            let report: ClassificationReport = crate::metrics::classification_report(&counts);
            Ok(report.balanced_accuracy)
        }
        MilModel::Regressor(m) => {
            let sq: Vec<f64> = valid
                .par_iter()
                .map(|b| -> Result<f64, TrainError> {
                    let e = m.forward(b)?.prediction - task.target(b)?;
                    Ok(e * e)
                })
                .collect::<Result<_, _>>()?;
            Ok((sq.iter().sum::<f64>() / sq.len() as f64).sqrt())
        }
    }
}
