use alloc::vec;
use alloc::vec::Vec;

use super::{PreferencePair, TrainError};
use crate::float::{sigmoid, softplus, Float};
use crate::lm::{backward, forward_logprobs, merge_adapter, LoraAdapter, ModelParams, Sequence};

/// Summary of a preference batch. `margin` is the mean of
/// `β·(Δ_preferred − Δ_dispreferred)`, the argument of the sigmoid.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct DpoStats {
    /// `gamma · sft + dpo`.
    pub loss: Float,
    pub dpo_loss: Float,
    /// Mean negative log-likelihood of the preferred answers.
    pub sft_loss: Float,
    pub margin: Float,
    /// Fraction of pairs with a positive margin.
    pub accuracy: Float,
}

fn effective(params: &ModelParams, adapter: Option<&LoraAdapter>) -> Result<Option<ModelParams>, TrainError> {
    adapter
        .map(|a| merge_adapter(params, a))
        .transpose()
        .map_err(Into::into)
}

/// Sum of label-token log-probabilities.
pub fn sequence_logp(params: &ModelParams, seq: &Sequence) -> Result<Float, TrainError> {
    Ok(forward_logprobs(params, seq)?.0.iter().sum())
}

/// Mean over records of the negative label log-likelihood.
pub fn sft_loss(params: &ModelParams, adapter: Option<&LoraAdapter>, batch: &[Sequence]) -> Result<Float, TrainError> {
    if batch.is_empty() {
        return Err(TrainError::EmptyBatch);
    }
    let merged = effective(params, adapter)?;
    let p = merged.as_ref().unwrap_or(params);
    let mut total = 0.0;
    for s in batch {
        total -= sequence_logp(p, s)?;
    }
    Ok(total / batch.len() as Float)
}

/// Adds the gradient of [`sft_loss`] with respect to `params` into `grad`
/// and returns the loss.
pub fn sft_gradient(params: &ModelParams, batch: &[Sequence], grad: &mut ModelParams) -> Result<Float, TrainError> {
    if batch.is_empty() {
        return Err(TrainError::EmptyBatch);
    }
    let w = 1.0 / batch.len() as Float;
    let mut total = 0.0;
    for s in batch {
        let (lp, cache) = forward_logprobs(params, s)?;
        total -= lp.iter().sum::<Float>();
        backward(params, &cache, &vec![-w; lp.len()], grad)?;
    }
    Ok(total * w)
}

/// `[log π_r(y_p|x), log π_r(y_d|x)]` for every pair.
pub fn reference_logps(reference: &ModelParams, pairs: &[PreferencePair]) -> Result<Vec<[Float; 2]>, TrainError> {
    pairs
        .iter()
        .map(|p| {
            Ok([
                sequence_logp(reference, &p.preferred_seq())?,
                sequence_logp(reference, &p.dispreferred_seq())?,
            ])
        })
        .collect()
}

fn accumulate(stats: &mut DpoStats, z: Float, nll_preferred: Float) {
    stats.dpo_loss += softplus(-z);
    stats.sft_loss += nll_preferred;
    stats.margin += z;
    if z > 0.0 {
        stats.accuracy += 1.0;
    }
}

fn finish(mut stats: DpoStats, n: usize, gamma: Float) -> DpoStats {
    let n = n as Float;
    stats.dpo_loss /= n;
    stats.sft_loss /= n;
    stats.margin /= n;
    stats.accuracy /= n;
    stats.loss = gamma * stats.sft_loss + stats.dpo_loss;
    stats
}

fn check_refs(pairs: &[PreferencePair], refs: &[[Float; 2]]) -> Result<(), TrainError> {
    if pairs.is_empty() {
        return Err(TrainError::EmptyBatch);
    }
    if refs.len() != pairs.len() {
        return Err(TrainError::Config(alloc::format!(
            "{} reference entries for {} pairs",
            refs.len(),
            pairs.len()
        )));
    }
    Ok(())
}

pub(super) fn preference_stats(
    policy: &ModelParams,
    pairs: &[PreferencePair],
    refs: &[[Float; 2]],
    beta: Float,
    gamma: Float,
) -> Result<DpoStats, TrainError> {
    check_refs(pairs, refs)?;
    let mut stats = DpoStats::default();
    for (p, r) in pairs.iter().zip(refs) {
        let lp = sequence_logp(policy, &p.preferred_seq())?;
        let ld = sequence_logp(policy, &p.dispreferred_seq())?;
        let z = beta * ((lp - r[0]) - (ld - r[1]));
        accumulate(&mut stats, z, -lp);
    }
    Ok(finish(stats, pairs.len(), gamma))
}

/// DPO loss of the adapted policy against a frozen reference.
pub fn dpo_loss(
    params: &ModelParams,
    adapter: Option<&LoraAdapter>,
    reference: &ModelParams,
    pairs: &[PreferencePair],
    beta: Float,
) -> Result<DpoStats, TrainError> {
    let refs = reference_logps(reference, pairs)?;
    let merged = effective(params, adapter)?;
    preference_stats(merged.as_ref().unwrap_or(params), pairs, &refs, beta, 0.0)
}

/// `gamma · sft_loss(x, y_p) + dpo_loss`.
pub fn combined_loss(
    params: &ModelParams,
    adapter: Option<&LoraAdapter>,
    reference: &ModelParams,
    pairs: &[PreferencePair],
    beta: Float,
    gamma: Float,
) -> Result<DpoStats, TrainError> {
    let refs = reference_logps(reference, pairs)?;
    let merged = effective(params, adapter)?;
    preference_stats(merged.as_ref().unwrap_or(params), pairs, &refs, beta, gamma)
}

/// Adds the gradient of `gamma · sft(y_p) + dpo` with respect to `policy`
/// into `grad`. `refs` comes from [`reference_logps`].
pub fn combined_gradient(
    policy: &ModelParams,
    pairs: &[PreferencePair],
    refs: &[[Float; 2]],
    beta: Float,
    gamma: Float,
    grad: &mut ModelParams,
) -> Result<DpoStats, TrainError> {
    check_refs(pairs, refs)?;
    let w = 1.0 / pairs.len() as Float;
    let mut stats = DpoStats::default();
    for (p, r) in pairs.iter().zip(refs) {
        let (lp_tokens, cache_p) = forward_logprobs(policy, &p.preferred_seq())?;
        let (ld_tokens, cache_d) = forward_logprobs(policy, &p.dispreferred_seq())?;
        let lp: Float = lp_tokens.iter().sum();
        let ld: Float = ld_tokens.iter().sum();
        let z = beta * ((lp - r[0]) - (ld - r[1]));
        accumulate(&mut stats, z, -lp);
        // d softplus(-z) / dz = -(1 - σ(z))
        let s = w * beta * (1.0 - sigmoid(z));
        backward(policy, &cache_p, &vec![-s - gamma * w; lp_tokens.len()], grad)?;
        backward(policy, &cache_d, &vec![s; ld_tokens.len()], grad)?;
    }
    Ok(finish(stats, pairs.len(), gamma))
}

/// [`combined_gradient`] with `gamma = 0`.
pub fn dpo_gradient(
    policy: &ModelParams,
    pairs: &[PreferencePair],
    refs: &[[Float; 2]],
    beta: Float,
    grad: &mut ModelParams,
) -> Result<DpoStats, TrainError> {
    combined_gradient(policy, pairs, refs, beta, 0.0, grad)
}
