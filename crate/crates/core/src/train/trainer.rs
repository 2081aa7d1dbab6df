use serde::{Deserialize, Serialize};

use super::{lr_at, OptimizerState, TrainingConfig};
use crate::data::{augment, batch_indices, collate, normalize, AugmentConfig, DatasetSplit, LabeledImage};
use crate::error::{Error, Result};
use crate::fusion::FusionModel;
use crate::nn::{Ctx, Mode, ParamStore};
use crate::rng::RngState;

/// One line of the training history.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Sample-weighted mean training loss over the epoch.
    pub train_loss: f64,
    /// Eval-mode accuracy on the training split, when measured.
    pub train_accuracy: Option<f64>,
    /// Eval-mode accuracy on the validation split; `None` when it is empty.
    pub val_accuracy: Option<f64>,
    /// Learning rate of the epoch's last step.
    pub lr: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub history: Vec<EpochRecord>,
    /// Selected epoch and its parameters.
    pub best: Option<(usize, ParamStore<f32>)>,
    pub optimizer: OptimizerState<f32>,
    pub steps: u64,
    /// Set when a non-finite loss or gradient stopped training; the model
    /// then holds the parameters of the last completed epoch.
    pub aborted: Option<String>,
}

/// Index of the epoch with the highest validation accuracy (training
/// accuracy when no validation was measured); ties go to the earliest.
pub fn select_best(history: &[EpochRecord]) -> Option<usize> {
    let score = |r: &EpochRecord| r.val_accuracy.or(r.train_accuracy).unwrap_or(f64::NEG_INFINITY);
    let mut best: Option<usize> = None;
    for (i, r) in history.iter().enumerate() {
        if best.map_or(true, |b| score(r) > score(&history[b])) {
            best = Some(i);
        }
    }
    best
}

fn check_resolution(model: &FusionModel<f32>, images: &[LabeledImage], indices: &[usize]) -> Result<()> {
    let res = model.resolution();
    for &i in indices {
        let img = images.get(i).ok_or_else(|| Error::validation(format!("sample index {i} out of range")))?;
        if img.pixels.shape() != [3, res, res] {
            return Err(Error::dim(format!(
                "image {} has shape {:?}, model expects [3, {res}, {res}]",
                img.source,
                img.pixels.shape()
            )));
        }
    }
    Ok(())
}

/// Eval-mode predicted class indices for the given samples (normalization
/// only, no augmentation).
pub fn evaluate(
    model: &FusionModel<f32>,
    images: &[LabeledImage],
    indices: &[usize],
    batch_size: usize,
    norm: &AugmentConfig,
) -> Result<Vec<usize>> {
    check_resolution(model, images, indices)?;
    let mut preds = Vec::with_capacity(indices.len());
    for members in batch_indices(indices, batch_size, None)? {
        let batch = collate(images, &members, |_, img| normalize(&img.pixels, norm))?;
        let p = model.predict(&batch.images)?;
        preds.extend(p.predicted.iter().map(|c| c.index()));
    }
    Ok(preds)
}

fn accuracy(preds: &[usize], images: &[LabeledImage], indices: &[usize]) -> Option<f64> {
    if indices.is_empty() {
        return None;
    }
    let hits = preds.iter().zip(indices).filter(|(&p, &i)| p == images[i].label.index()).count();
    Some(hits as f64 / indices.len() as f64)
}

/// Label mixed into the seed for the training streams.
const TRAIN_STREAM: u64 = 0x7472_6169_6e;

/// Runs the full schedule. After each epoch `on_epoch` sees the new record
/// and the current model (e.g. to write a checkpoint); an error from it
/// stops training and is returned.
pub fn train<F>(
    model: &mut FusionModel<f32>,
    images: &[LabeledImage],
    split: &DatasetSplit,
    cfg: &TrainingConfig,
    mut on_epoch: F,
) -> Result<TrainOutcome>
where
    F: FnMut(&EpochRecord, &FusionModel<f32>) -> Result<()>,
{
    cfg.validate()?;
    if split.train.is_empty() {
        return Err(Error::config("training split is empty"));
    }
    check_resolution(model, images, &split.train)?;
    check_resolution(model, images, &split.val)?;

    let adam = cfg.adam();
    let mut optimizer = OptimizerState::new(&model.store);
    let mut history = Vec::new();
    let mut best: Option<(usize, ParamStore<f32>)> = None;
    let steps_per_epoch = split.train.len().div_ceil(cfg.batch_size);
    let root = RngState::new(cfg.seed).derive(TRAIN_STREAM);
    let aug = &cfg.augmentation;

    for epoch in 0..cfg.epochs {
        let last_good = model.store.clone();
        let epoch_rng = root.derive(epoch as u64);
        let order = batch_indices(&split.train, cfg.batch_size, Some(&mut epoch_rng.stream_at(0)))?;
        let (mut loss_sum, mut lr) = (0.0, 0.0);
        let mut failure = None;
        for (bi, members) in order.iter().enumerate() {
            let base = bi * cfg.batch_size;
            let batch = collate(images, members, |pos, img| {
                augment(&img.pixels, aug, &mut epoch_rng.stream_at(1 + (base + pos) as u64))
            })?;
            let step = epoch * steps_per_epoch + bi;
            lr = lr_at(step as f64, steps_per_epoch, cfg);

            let (loss, grads, updates) = {
                let mut ctx = Ctx::new(&model.store, Mode::Train);
                let x = ctx.input(batch.images);
                let logits = model.forward(&mut ctx, x)?;
                let loss = model.loss(&mut ctx, logits, &batch.labels)?;
                let value = f64::from(ctx.tape.value(loss).item()?);
                if !value.is_finite() {
                    failure = Some(format!("non-finite loss {value} at epoch {epoch}, step {step}"));
                    break;
                }
                ctx.tape.backward(loss)?;
                (value, ctx.param_grads(), ctx.take_buffer_updates())
            };
            match adam.step(&mut model.store, &grads, &mut optimizer, lr) {
                Ok(()) => {}
                Err(Error::NonFinite(msg)) => {
                    failure = Some(format!("{msg} (epoch {epoch})"));
                    break;
                }
                Err(e) => return Err(e),
            }
            model.store.apply_buffer_updates(updates);
            loss_sum += loss * members.len() as f64;
        }
        if let Some(reason) = failure {
            log::error!("{reason}; restoring the parameters of the last completed epoch");
            model.store = last_good;
            return Ok(TrainOutcome { history, best, steps: optimizer.step, optimizer, aborted: Some(reason) });
        }

        let train_accuracy = if cfg.eval_train {
            let preds = evaluate(model, images, &split.train, cfg.batch_size, aug)?;
            accuracy(&preds, images, &split.train)
        } else {
            None
        };
        let val_preds = evaluate(model, images, &split.val, cfg.batch_size, aug)?;
        let record = EpochRecord {
            epoch,
            train_loss: loss_sum / split.train.len() as f64,
            train_accuracy,
            val_accuracy: accuracy(&val_preds, images, &split.val),
            lr,
        };
        log::info!(
            "epoch {epoch}: loss {:.5} train acc {} val acc {} lr {:.3e}",
            record.train_loss,
            record.train_accuracy.map_or("-".into(), |a| format!("{a:.4}")),
            record.val_accuracy.map_or("-".into(), |a| format!("{a:.4}")),
            record.lr
        );
        history.push(record);
        if select_best(&history) == Some(epoch) {
            best = Some((epoch, model.store.clone()));
        }
        on_epoch(history.last().expect("just pushed"), model)?;
    }
    Ok(TrainOutcome { history, best, steps: optimizer.step, optimizer, aborted: None })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(epoch: usize, val: Option<f64>) -> EpochRecord {
        EpochRecord { epoch, train_loss: 0.0, train_accuracy: Some(0.5), val_accuracy: val, lr: 0.0 }
    }

    #[test]
    fn best_epoch_ties_go_early() {
        let h: Vec<_> = [0.7, 0.9, 0.9, 0.8].iter().enumerate().map(|(i, &a)| rec(i, Some(a))).collect();
        assert_eq!(select_best(&h), Some(1));
        assert_eq!(select_best(&h[..1]), Some(0));
        let up: Vec<_> = (0..4).map(|i| rec(i, Some(i as f64 / 10.0))).collect();
        assert_eq!(select_best(&up), Some(3));
        assert_eq!(select_best(&[]), None);
    }
}
