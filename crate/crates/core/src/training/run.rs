//! The training loop.

use std::time::Instant;

use rand_chacha::ChaCha8Rng;

use super::{adam_step, clip_gradients, AdamState, EarlyStopping, EpochRecord, LossRange, Progress, RunRecord, StopReason, TrainConfig};
use crate::autodiff::Graph;
use crate::data::{Batches, DatasetConfig, SeriesTable, WindowBatch, WindowIndex, WindowRef};
use crate::distributions::nll;
use crate::error::{Error, Result};
use crate::model::checkpoint::RngState;
use crate::model::infer::FrozenModel;
use crate::model::BiTCNModel;

/// Everything the loop reads besides the model.
#[derive(Debug, Clone, Copy)]
pub struct TrainData<'a> {
    pub table: &'a SeriesTable,
    pub dataset: &'a DatasetConfig,
    pub windows: &'a WindowIndex,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub record: RunRecord,
    pub optimizer: AdamState,
    pub rng: RngState,
}

fn tag(e: Error, epoch: usize, batch: usize) -> Error {
    match e {
        Error::NumericFailure { location, detail } => Error::NumericFailure {
            location: format!("epoch {epoch} batch {batch}: {location}"),
            detail,
        },
        other => other,
    }
}

/// Eval-mode mean NLL over `refs` (dropout off).
pub fn evaluate_nll(
    model: &BiTCNModel,
    data: &TrainData<'_>,
    refs: &[WindowRef],
    batch_size: usize,
    range: LossRange,
) -> Result<f64> {
    if refs.is_empty() {
        return Err(Error::InvalidArgument("no windows to evaluate".into()));
    }
    let frozen = FrozenModel::new(model);
    let family = model.hyper.distribution;
    let (mut total, mut count) = (0.0, 0.0);
    for chunk in Batches::new(refs, batch_size) {
        let batch = WindowBatch::assemble(data.table, data.dataset, &model.hyper, chunk)?;
        let (mu, sigma) = frozen.predict(batch.inputs())?;
        let mask = batch.loss_mask(range == LossRange::HorizonOnly);
        for (i, &m) in mask.iter().enumerate() {
            if m != 0.0 {
                total += family.nll(batch.y_true.data()[i], mu[i], sigma[i]);
                count += 1.0;
            }
        }
    }
    Ok(total / count)
}

/// Trains `model` in place and leaves it at the best-validation epoch.
///
/// Each epoch draws up to `dataset.train_samples` training windows, takes
/// one Adam step per batch on the masked NLL, then scores the validation
/// windows. Training stops after `patience` epochs without strict
/// improvement or at `max_epochs`.
pub fn train(
    model: &mut BiTCNModel,
    data: &TrainData<'_>,
    cfg: &TrainConfig,
    seed: u64,
    rng: &mut ChaCha8Rng,
    config_echo: String,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.windows.train.is_empty() || data.windows.validation.is_empty() {
        return Err(Error::Data(format!(
            "need training and validation windows, have {} and {}",
            data.windows.train.len(),
            data.windows.validation.len()
        )));
    }
    let family = model.hyper.distribution;
    let clip = cfg.effective_clip(family);
    let horizon_only = cfg.loss_range == LossRange::HorizonOnly;
    let mut optimizer = AdamState::new(&model.params);
    let mut stopper = EarlyStopping::new(cfg.patience);
    let mut best_params = model.params.clone();
    let mut epochs = Vec::new();
    let mut clip_events = 0;
    let mut initial_train_nll = f64::NAN;
    let mut stop_reason = StopReason::MaxEpochs;

    for epoch in 1..=cfg.max_epochs {
        let started = Instant::now();
        let sample = data.windows.sample_train(data.dataset.train_samples, rng);
        if epoch == 1 {
            initial_train_nll = evaluate_nll(model, data, &sample, cfg.batch_size, cfg.loss_range)?;
        }
        let (mut loss_sum, mut weight) = (0.0, 0.0);
        for (bi, chunk) in Batches::new(&sample, cfg.batch_size).enumerate() {
            let batch = WindowBatch::assemble(data.table, data.dataset, &model.hyper, chunk)?;
            let mask = batch.loss_mask(horizon_only);
            let mut g = Graph::new();
            let step = (|| -> Result<f64> {
                let (mu, sigma) = model.forward(&mut g, batch.inputs(), true, rng)?;
                let loss = nll(&mut g, family, batch.y_true.data(), mu, sigma, Some(&mask))?;
                let value = g.value(loss)[0];
                if !value.is_finite() {
                    return Err(Error::numeric("training loss", format!("{value}")));
                }
                g.backward(loss)?;
                model.params.zero_grad();
                model.params.accumulate_from(&g)?;
                if let Some(max_norm) = clip {
                    if clip_gradients(&mut model.params, max_norm)? < 1.0 {
                        clip_events += 1;
                    }
                }
                adam_step(&mut model.params, &mut optimizer, cfg.learning_rate)?;
                Ok(value)
            })()
            .map_err(|e| tag(e, epoch, bi + 1))?;
            let n = chunk.len() as f64;
            loss_sum += step * n;
            weight += n;
        }
        let train_nll = loss_sum / weight;
        let val_nll = evaluate_nll(model, data, &data.windows.validation, cfg.batch_size, cfg.loss_range)?;
        if !val_nll.is_finite() {
            return Err(Error::numeric(format!("epoch {epoch} validation"), format!("loss {val_nll}")));
        }
        epochs.push(EpochRecord {
            epoch,
            train_nll,
            val_nll,
            seconds: started.elapsed().as_secs_f64(),
        });
        match stopper.update(epoch, val_nll) {
            Progress::Improved => best_params = model.params.clone(),
            Progress::Waiting => {}
            Progress::Stop => {
                stop_reason = StopReason::Patience;
                break;
            }
        }
    }
    model.params = best_params;
    model.params.zero_grad();
    Ok(TrainOutcome {
        record: RunRecord {
            version: crate::BUILD_VERSION.to_string(),
            seed,
            parameters: model.count_parameters(),
            initial_train_nll,
            epochs,
            best_epoch: stopper.best_epoch(),
            best_val_nll: stopper.best(),
            stop_reason,
            clip_events,
            checkpoint: None,
            config: config_echo,
        },
        optimizer,
        rng: RngState::capture(rng),
    })
}
