use super::config::Regularizer;
use crate::error::{Error, Result};
use crate::numerics::{BoundParams, Tape, Tensor, Var};

/// Probabilities below this are clamped before taking the log.
pub const LOG_FLOOR: f64 = 1e-12;

fn gold_probs(tape: &mut Tape, probs: Var, labels: &[usize]) -> Result<Var> {
    if labels.is_empty() {
        return Err(Error::InvalidArgument("no labels for the loss".into()));
    }
    tape.gather(probs, labels)
}

/// Mean negative log-likelihood of the gold labels.
pub fn cross_entropy(tape: &mut Tape, probs: Var, labels: &[usize]) -> Result<Var> {
    let p = gold_probs(tape, probs, labels)?;
    let logp = tape.log_floor(p, LOG_FLOOR)?;
    let mean = tape.mean(logp)?;
    tape.scale(mean, -1.0)
}

/// `|theta|^2` or `|theta|` over every bound parameter.
pub fn weight_penalty(tape: &mut Tape, params: &BoundParams, kind: Regularizer) -> Result<Var> {
    let vars: Vec<Var> = params.vars().map(|(_, v)| v).collect();
    let squares = vars
        .into_iter()
        .map(|v| tape.squared_norm(v))
        .collect::<Result<Vec<_>>>()?;
    let total = tape.add_all(&squares)?;
    match kind {
        Regularizer::SquaredNorm => Ok(total),
        Regularizer::Norm => tape.pow(total, 0.5),
    }
}

/// Cross-entropy plus `lambda` times the weight penalty.
pub fn loss_ce_l2(
    tape: &mut Tape,
    probs: Var,
    labels: &[usize],
    params: &BoundParams,
    lambda: f64,
    kind: Regularizer,
) -> Result<Var> {
    let ce = cross_entropy(tape, probs, labels)?;
    add_penalty(tape, ce, params, lambda, kind)
}

pub(crate) fn add_penalty(
    tape: &mut Tape,
    loss: Var,
    params: &BoundParams,
    lambda: f64,
    kind: Regularizer,
) -> Result<Var> {
    if lambda == 0.0 {
        return Ok(loss);
    }
    let r = weight_penalty(tape, params, kind)?;
    let r = tape.scale(r, lambda)?;
    tape.add(loss, r)
}

/// Mean of `-w_y (1 - p_y)^gamma log p_y`.
pub fn loss_focal(
    tape: &mut Tape,
    probs: Var,
    labels: &[usize],
    class_weights: &[f64],
    gamma: f64,
) -> Result<Var> {
    if !(gamma >= 0.0) {
        return Err(Error::InvalidArgument(format!("focal gamma must be non-negative, got {gamma}")));
    }
    if class_weights.len() != tape.value(probs).cols() {
        return Err(Error::shape(
            "loss_focal",
            format!(
                "{} class weights for {} classes",
                class_weights.len(),
                tape.value(probs).cols()
            ),
        ));
    }
    let p = gold_probs(tape, probs, labels)?;
    let logp = tape.log_floor(p, LOG_FLOOR)?;
    let w: Vec<f64> = labels.iter().map(|&y| class_weights[y]).collect();
    let w = tape.leaf(Tensor::from_vec(labels.len(), 1, w)?)?;
    let mut term = tape.mul(w, logp)?;
    if gamma != 0.0 {
        let miss = tape.affine(p, -1.0, 1.0)?;
        let modulator = tape.pow(miss, gamma)?;
        term = tape.mul(modulator, term)?;
    }
    let mean = tape.mean(term)?;
    tape.scale(mean, -1.0)
}

/// Inverse class frequencies, rescaled so present classes average 1.
/// Classes absent from `labels` get weight 0.
pub fn inverse_frequency_weights(labels: &[usize], num_classes: usize) -> Vec<f64> {
    let mut counts = vec![0usize; num_classes];
    for &y in labels {
        counts[y] += 1;
    }
    let raw: Vec<f64> = counts
        .iter()
        .map(|&c| if c == 0 { 0.0 } else { 1.0 / c as f64 })
        .collect();
    let present = counts.iter().filter(|&&c| c > 0).count();
    let mean = raw.iter().sum::<f64>() / present.max(1) as f64;
    raw.iter().map(|w| if mean > 0.0 { w / mean } else { 0.0 }).collect()
}
