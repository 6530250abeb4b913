use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::config::{LossKind, RunConfig};
use super::loss::{add_penalty, cross_entropy, inverse_frequency_weights, loss_focal};
use super::network::{forward, ModelShape};
use super::Model;
use crate::data::{split_with, Corpus, Split};
use crate::error::{Error, Result};
use crate::evaluation::{accuracy, weighted_f1};
use crate::numerics::{Adam, Tape};
use crate::rng::{stream, Stream};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    /// Mean per-dialogue training objective.
    pub train_loss: f64,
    pub val_weighted_f1: Option<f64>,
    pub train_accuracy: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    MaxEpochs,
    Patience,
    TargetAccuracy,
}

/// Everything a training run did, with no wall-clock data so that reruns
/// produce identical bytes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub config: RunConfig,
    pub fingerprint: String,
    pub num_parameters: usize,
    pub train_dialogues: usize,
    pub val_dialogues: usize,
    pub epochs: Vec<EpochRecord>,
    /// Epoch whose parameters were kept.
    pub best_epoch: usize,
    pub best_val_weighted_f1: Option<f64>,
    pub stop_reason: StopReason,
}

impl RunReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

pub fn train(corpus: &Corpus, config: &RunConfig) -> Result<(Model, RunReport)> {
    train_with_observer(corpus, config, |_| {})
}

/// Trains on `corpus`, calling `observer` after every epoch.
///
/// One Adam step per dialogue, dialogues reshuffled each epoch. When a
/// validation share is configured, it is held out from `corpus` and the
/// parameters of the best validation epoch are returned; otherwise the
/// final parameters are.
pub fn train_with_observer(
    corpus: &Corpus,
    config: &RunConfig,
    mut observer: impl FnMut(&EpochRecord),
) -> Result<(Model, RunReport)> {
    config.validate()?;
    corpus.validate()?;
    if corpus.dialogues.is_empty() {
        return Err(Error::InvalidArgument("training corpus has no dialogues".into()));
    }
    let shape = ModelShape::from_corpus(corpus, config);
    if corpus.max_speakers > shape.max_speakers {
        return Err(Error::Config(vec![format!(
            "max_speakers {} is below the corpus's {}",
            shape.max_speakers, corpus.max_speakers
        )]));
    }
    let (train_set, val_set) = if config.val_fraction > 0.0 {
        match split_with(corpus, 1.0 - config.val_fraction, config.seed, Split::Train, Split::Val) {
            Ok((t, v)) => (t, Some(v)),
            Err(e) => {
                log::warn!("no validation split ({e}); keeping the final epoch");
                (corpus.clone(), None)
            }
        }
    } else {
        (corpus.clone(), None)
    };

    let mut model = Model::new(config.clone(), shape)?;
    let mut adam = Adam::new(config.lr);
    let mut shuffle = stream(config.seed, Stream::Shuffle);
    let mut dropout = stream(config.seed, Stream::Dropout);
    let class_weights =
        inverse_frequency_weights(&train_set.labels(), model.shape.num_classes());

    let mut order: Vec<usize> = (0..train_set.dialogues.len()).collect();
    let mut epochs = Vec::new();
    let mut best: Option<(f64, usize, crate::numerics::ParamStore)> = None;
    let mut since_best = 0;
    let mut stop_reason = StopReason::MaxEpochs;

    for epoch in 1..=config.epochs {
        order.shuffle(&mut shuffle);
        let mut total = 0.0;
        for &i in &order {
            let dialogue = &train_set.dialogues[i];
            let labels = dialogue.labels();
            let mut tape = Tape::new();
            let bound = model.params.bind(&mut tape)?;
            let step = (|| {
                let trace = forward(
                    &mut tape,
                    &bound,
                    config,
                    &model.shape,
                    dialogue,
                    true,
                    &mut dropout,
                )?;
                let data = match config.loss {
                    LossKind::CrossEntropy => cross_entropy(&mut tape, trace.probs, &labels)?,
                    LossKind::Focal => {
                        loss_focal(&mut tape, trace.probs, &labels, &class_weights, config.focal_gamma)?
                    }
                };
                add_penalty(&mut tape, data, &bound, config.l2, config.regularizer)
            })();
            let loss = match step {
                Ok(l) => l,
                Err(Error::NonFinite { .. }) => {
                    return Err(Error::Divergence {
                        epoch,
                        dialogue: dialogue.id.clone(),
                        loss: f64::NAN,
                    })
                }
                Err(e) => return Err(e),
            };
            let value = tape.value(loss).get(0, 0);
            if !value.is_finite() {
                return Err(Error::Divergence {
                    epoch,
                    dialogue: dialogue.id.clone(),
                    loss: value,
                });
            }
            total += value;
            let grads = bound.gradients(&tape, &tape.backward(loss)?);
            adam.step(&mut model.params, &grads)?;
        }

        let val_f1 = match &val_set {
            Some(v) => Some(corpus_f1(&model, v)?),
            None => None,
        };
        let train_acc = match config.target_train_accuracy {
            Some(_) => Some(corpus_accuracy(&model, &train_set)?),
            None => None,
        };
        let record = EpochRecord {
            epoch,
            train_loss: total / order.len() as f64,
            val_weighted_f1: val_f1,
            train_accuracy: train_acc,
        };
        log::info!(
            "epoch {epoch}: loss {:.6}{}{}",
            record.train_loss,
            val_f1.map_or(String::new(), |f| format!(", val weighted F1 {f:.4}")),
            train_acc.map_or(String::new(), |a| format!(", train accuracy {a:.4}")),
        );
        observer(&record);
        epochs.push(record);

        if let Some(f1) = val_f1 {
            if best.as_ref().is_none_or(|(b, _, _)| f1 > *b) {
                best = Some((f1, epoch, model.params.clone()));
                since_best = 0;
            } else {
                since_best += 1;
            }
            if config.patience.is_some_and(|p| since_best >= p) {
                stop_reason = StopReason::Patience;
                break;
            }
        }
        if let (Some(target), Some(acc)) = (config.target_train_accuracy, train_acc) {
            if acc >= target {
                stop_reason = StopReason::TargetAccuracy;
                break;
            }
        }
    }

    let last_epoch = epochs.len();
    let (best_epoch, best_val) = match best {
        Some((f1, epoch, params)) => {
            model.params = params;
            (epoch, Some(f1))
        }
        None => (last_epoch, None),
    };
    let report = RunReport {
        config: config.clone(),
        fingerprint: config.fingerprint(),
        num_parameters: model.params.num_scalars(),
        train_dialogues: train_set.dialogues.len(),
        val_dialogues: val_set.as_ref().map_or(0, |v| v.dialogues.len()),
        epochs,
        best_epoch,
        best_val_weighted_f1: best_val,
        stop_reason,
    };
    Ok((model, report))
}

fn flat_predictions(model: &Model, corpus: &Corpus) -> Result<(Vec<usize>, Vec<usize>)> {
    let pred: Vec<usize> = model.predict(corpus)?.into_iter().flatten().collect();
    Ok((corpus.labels(), pred))
}

fn corpus_f1(model: &Model, corpus: &Corpus) -> Result<f64> {
    let (gold, pred) = flat_predictions(model, corpus)?;
    weighted_f1(&gold, &pred, model.shape.num_classes())
}

fn corpus_accuracy(model: &Model, corpus: &Corpus) -> Result<f64> {
    let (gold, pred) = flat_predictions(model, corpus)?;
    accuracy(&gold, &pred)
}
