use alloc::vec::Vec;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::losses::{combined_gradient, preference_stats, reference_logps, sft_gradient};
use super::optim::{clip_grad_norm, grad_norm, AdamW};
use super::{validate_pairs, validate_sequences, PreferencePair, TrainConfig, TrainError};
use crate::float::Float;
use crate::lm::{merge_adapter, LoraAdapter, ModelParams, ParamSet, Sequence};
use crate::rng::{mix, stream, stream_rng};

/// Per-epoch training telemetry. Epoch 0 of a preference run is measured
/// before the first update.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    /// Optimizer steps taken so far.
    pub step: u64,
    /// Mean batch loss over the epoch (evaluated loss for epoch 0).
    pub loss: Float,
    /// Mean gradient norm before clipping.
    pub grad_norm: Float,
    /// Mean preference margin over the whole dataset after the epoch.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub margin: Option<Float>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub accuracy: Option<Float>,
}

fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut stream_rng(mix(seed, epoch as u64), stream::SHUFFLE));
    order
}

/// Shared loop: shuffle, batch, clip, step. `batch_grad` returns the batch
/// loss and the gradient with respect to `trainable`.
#[allow(clippy::too_many_arguments)]
fn optimize<P: ParamSet>(
    trainable: &mut P,
    cfg: &TrainConfig,
    n: usize,
    epochs: usize,
    mut batch_grad: impl FnMut(&P, &[usize]) -> Result<(Float, P), TrainError>,
    mut after_epoch: impl FnMut(&P, EpochLog) -> Result<EpochLog, TrainError>,
    on_epoch: &mut dyn FnMut(&EpochLog),
    logs: &mut Vec<EpochLog>,
) -> Result<(), TrainError> {
    let mut opt = AdamW::from_config(cfg);
    for epoch in 1..=epochs {
        let order = epoch_order(n, cfg.seed, epoch);
        let (mut loss_sum, mut norm_sum, mut batches) = (0.0, 0.0, 0);
        for batch in order.chunks(cfg.batch_size) {
            let (loss, mut grad) = batch_grad(trainable, batch)?;
            let norm = match cfg.max_grad_norm {
                Some(max) => clip_grad_norm(&mut grad, max),
                None => grad_norm(&grad),
            };
            opt.step(trainable, &grad)?;
            loss_sum += loss;
            norm_sum += norm;
            batches += 1;
        }
        let log = EpochLog {
            epoch,
            step: opt.step,
            loss: loss_sum / batches as Float,
            grad_norm: norm_sum / batches as Float,
            margin: None,
            accuracy: None,
        };
        let log = after_epoch(trainable, log)?;
        on_epoch(&log);
        logs.push(log);
    }
    Ok(())
}

fn gather<T: Clone>(data: &[T], idx: &[usize]) -> Vec<T> {
    idx.iter().map(|&i| data[i].clone()).collect()
}

/// Full-parameter language-model training on `data`.
pub fn pretrain(
    params: &mut ModelParams,
    data: &[Sequence],
    cfg: &TrainConfig,
    epochs: usize,
    on_epoch: &mut dyn FnMut(&EpochLog),
) -> Result<Vec<EpochLog>, TrainError> {
    cfg.validate()?;
    validate_sequences(data, params.config.context_length)?;
    let zero = ModelParams::zeros(params.config)?;
    let mut logs = Vec::new();
    optimize(
        params,
        cfg,
        data.len(),
        epochs,
        |p, idx| {
            let mut grad = zero.clone();
            let loss = sft_gradient(p, &gather(data, idx), &mut grad)?;
            Ok((loss, grad))
        },
        |_, log| Ok(log),
        on_epoch,
        &mut logs,
    )?;
    Ok(logs)
}

fn lora_grad(
    base: &ModelParams,
    adapter: &LoraAdapter,
    zero: &ModelParams,
    f: impl FnOnce(&ModelParams, &mut ModelParams) -> Result<Float, TrainError>,
) -> Result<(Float, LoraAdapter), TrainError> {
    let merged = merge_adapter(base, adapter)?;
    let mut full = zero.clone();
    let loss = f(&merged, &mut full)?;
    let mut grad = adapter.zeros_like();
    adapter.project_grad(&full, &mut grad);
    Ok((loss, grad))
}

/// Trains a fresh adapter on top of the frozen `base` for `cfg.sft_epochs`.
pub fn train_sft(
    base: &ModelParams,
    data: &[Sequence],
    cfg: &TrainConfig,
    on_epoch: &mut dyn FnMut(&EpochLog),
) -> Result<(LoraAdapter, Vec<EpochLog>), TrainError> {
    cfg.validate()?;
    validate_sequences(data, base.config.context_length)?;
    let mut adapter = LoraAdapter::new(base, cfg.lora_rank, cfg.lora_alpha, mix(cfg.seed, 0x5f7))?;
    let zero = ModelParams::zeros(base.config)?;
    let mut logs = Vec::new();
    optimize(
        &mut adapter,
        cfg,
        data.len(),
        cfg.sft_epochs,
        |a, idx| lora_grad(base, a, &zero, |m, g| sft_gradient(m, &gather(data, idx), g)),
        |_, log| Ok(log),
        on_epoch,
        &mut logs,
    )?;
    Ok((adapter, logs))
}

/// Trains a fresh adapter on `reference` (typically the merged SFT model)
/// with `gamma · sft(y_p) + dpo` for `cfg.dpo_epochs`. The reference itself
/// stays frozen and scores every pair once up front.
pub fn train_dpo(
    reference: &ModelParams,
    pairs: &[PreferencePair],
    cfg: &TrainConfig,
    on_epoch: &mut dyn FnMut(&EpochLog),
) -> Result<(LoraAdapter, Vec<EpochLog>), TrainError> {
    cfg.validate()?;
    validate_pairs(pairs, reference.config.context_length)?;
    let refs = reference_logps(reference, pairs)?;
    let mut adapter = LoraAdapter::new(reference, cfg.lora_rank, cfg.lora_alpha, mix(cfg.seed, 0xd70))?;
    let zero = ModelParams::zeros(reference.config)?;

    let measure = |a: &LoraAdapter, mut log: EpochLog| -> Result<EpochLog, TrainError> {
        let merged = merge_adapter(reference, a)?;
        let stats = preference_stats(&merged, pairs, &refs, cfg.beta, cfg.gamma)?;
        if log.epoch == 0 {
            log.loss = stats.loss;
        }
        log.margin = Some(stats.margin);
        log.accuracy = Some(stats.accuracy);
        Ok(log)
    };
    let start = measure(
        &adapter,
        EpochLog {
            epoch: 0,
            step: 0,
            loss: 0.0,
            grad_norm: 0.0,
            margin: None,
            accuracy: None,
        },
    )?;
    on_epoch(&start);
    let mut logs = alloc::vec![start];
    optimize(
        &mut adapter,
        cfg,
        pairs.len(),
        cfg.dpo_epochs,
        |a, idx| {
            let batch = gather(pairs, idx);
            let batch_refs = gather(&refs, idx);
            lora_grad(reference, a, &zero, |m, g| {
                Ok(combined_gradient(m, &batch, &batch_refs, cfg.beta, cfg.gamma, g)?.loss)
            })
        },
        measure,
        on_epoch,
        &mut logs,
    )?;
    Ok((adapter, logs))
}
