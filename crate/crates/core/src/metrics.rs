//! Diagnostic signals over forward traces: token-level entropy, the
//! cross-modal differential entropy series, and audio attention mass with
//! max-head / mean-head reductions over the target layers.
//!
//! Completion token `t` (1-indexed) maps to absolute sequence position
//! `prefix_len + t - 1`; its predictive distribution lives one row earlier.

use crate::model::ForwardTrace;
use crate::{Error, Result};

/// Shannon entropy in nats of `softmax(logits_row)` over the full
/// vocabulary. Lies in `[0, ln V]`.
pub fn token_entropy(logits_row: &[f64]) -> f64 {
    let m = logits_row
        .iter()
        .cloned()
        .fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for &v in logits_row {
        z += (v - m).exp();
    }
    let mut h = 0.0;
    for &v in logits_row {
        let p = (v - m).exp() / z;
        if p > 0.0 {
            h -= p * p.ln();
        }
    }
    h
}

/// Entropy of the predictive distribution at every completion position.
pub fn completion_entropy_series(trace: &ForwardTrace) -> Vec<f64> {
    (1..=trace.completion_len)
        .map(|t| token_entropy(trace.logits.row(trace.pred_row(t))))
        .collect()
}

/// Differential entropy series: text-reference entropy minus multimodal
/// policy entropy at each completion token. Positive values mark tokens the
/// language prior cannot predict without the audio.
pub fn differential_entropy_series(
    text_ref: &ForwardTrace,
    multimodal: &ForwardTrace,
) -> Result<Vec<f64>> {
    if text_ref.completion_len != multimodal.completion_len {
        return Err(Error::LengthMismatch {
            context: "differential_entropy_series",
            left: text_ref.completion_len,
            right: multimodal.completion_len,
        });
    }
    let h_ref = completion_entropy_series(text_ref);
    let h_policy = completion_entropy_series(multimodal);
    Ok(h_ref
        .iter()
        .zip(&h_policy)
        .map(|(r, p)| r - p)
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeadMode {
    Max,
    Mean,
}

/// Attention mass routed to the audio prefix by head `h` of layer `l`
/// (0-based) at absolute query position `q`.
pub fn head_audio_mass(trace: &ForwardTrace, layer: usize, head: usize, q: usize) -> f64 {
    let a = &trace.attn[layer][head];
    (0..trace.audio_len).map(|j| a.at(q, j)).sum()
}

/// Per-token audio attention mass: per layer reduce over heads (max or
/// mean), then average over the 1-based `target_layers`. Empty audio gives
/// an all-zero series.
pub fn audio_attention_mass_series(
    trace: &ForwardTrace,
    target_layers: &[usize],
    mode: HeadMode,
) -> Result<Vec<f64>> {
    if target_layers.is_empty() {
        return Err(Error::Config("target layer set is empty".into()));
    }
    for &l in target_layers {
        if l == 0 || l > trace.attn.len() {
            return Err(Error::Config(format!(
                "target layer {l} outside 1..={}",
                trace.attn.len()
            )));
        }
    }
    let heads = trace.attn[0].len();
    let mut out = Vec::with_capacity(trace.completion_len);
    for t in 1..=trace.completion_len {
        let q = trace.query_pos(t);
        let mut acc = 0.0;
        for &l in target_layers {
            let layer = l - 1;
            let masses = (0..heads).map(|h| head_audio_mass(trace, layer, h, q));
            let reduced = match mode {
                HeadMode::Max => masses.fold(f64::NEG_INFINITY, f64::max),
                HeadMode::Mean => masses.sum::<f64>() / heads as f64,
            };
            acc += reduced;
        }
        out.push(acc / target_layers.len() as f64);
    }
    Ok(out)
}
