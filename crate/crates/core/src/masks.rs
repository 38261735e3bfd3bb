//! Token-level weight vectors derived from the differential entropy series:
//! the relevance mask (upweights modality-dependent tokens in the policy
//! gradient), the inverse relevance weight (targets substantive tokens whose
//! predictions look prior-driven), the POS gate, and the temporal ramp.
//!
//! All outputs here are plain value vectors: they enter the loss as
//! detached constants and never carry gradient.

use serde::{Deserialize, Serialize};
use std::collections::HashSet;

use crate::model::TokenId;
use crate::task::{Tag, TagMap};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MaskConfig {
    pub tau_base: f64,
    pub kappa: f64,
    pub c_mask: f64,
    pub substantive_tags: Vec<Tag>,
}

impl Default for MaskConfig {
    fn default() -> Self {
        MaskConfig {
            tau_base: 1.0,
            kappa: 1.0,
            c_mask: 5.0,
            substantive_tags: vec![Tag::Noun, Tag::Verb, Tag::Adj, Tag::Adv, Tag::Num, Tag::X],
        }
    }
}

impl MaskConfig {
    pub fn validate(&self) -> Result<()> {
        if self.tau_base <= 0.0 {
            return Err(Error::Config("tau_base must be > 0".into()));
        }
        if self.kappa < 0.0 {
            return Err(Error::Config("kappa must be >= 0".into()));
        }
        if self.c_mask <= 0.0 {
            return Err(Error::Config("c_mask must be > 0".into()));
        }
        Ok(())
    }

    pub fn substantive_set(&self) -> HashSet<Tag> {
        self.substantive_tags.iter().copied().collect()
    }
}

/// Length-scaled softmax temperature: `tau_base * ln(max(T, 2))`.
pub fn length_scaled_temperature(t_len: usize, tau_base: f64) -> f64 {
    tau_base * (t_len.max(2) as f64).ln()
}

/// Relevance mask over `|dh|`: softmax at the length-scaled temperature,
/// scaled by T, capped at `c_mask`. Entries are strictly positive; without
/// capping they average exactly 1.
pub fn modality_relevance_mask(dh: &[f64], tau_base: f64, c_mask: f64) -> Vec<f64> {
    let t_len = dh.len();
    if t_len == 0 {
        return Vec::new();
    }
    let tau = length_scaled_temperature(t_len, tau_base);
    let scores: Vec<f64> = dh.iter().map(|d| d.abs() / tau).collect();
    let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.iter()
        .map(|e| (t_len as f64 * e / z).min(c_mask))
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct PosGate {
    /// 1.0 where the token's tag is substantive, else 0.0.
    pub gate: Vec<f64>,
    /// True when an unmapped token forced the all-ones fallback.
    pub fallback: bool,
}

impl PosGate {
    pub fn t_pos(&self) -> usize {
        self.gate.iter().filter(|&&g| g == 1.0).count()
    }
}

/// Binary gate selecting tokens whose tag is in the substantive set. Any
/// token missing from the tag map switches the whole gate to the all-ones
/// fallback and raises the warning flag.
pub fn pos_gate(tokens: &[TokenId], tag_map: &TagMap, substantive: &HashSet<Tag>) -> PosGate {
    let mut gate = Vec::with_capacity(tokens.len());
    for &tok in tokens {
        match tag_map.get(tok) {
            Some(tag) => gate.push(if substantive.contains(&tag) { 1.0 } else { 0.0 }),
            None => {
                return PosGate {
                    gate: vec![1.0; tokens.len()],
                    fallback: true,
                }
            }
        }
    }
    PosGate {
        gate,
        fallback: false,
    }
}

/// Inverse relevance weight: gated softmax of `-|dh|`, normalized over the
/// active subset (T_pos tokens), capped at `c_mask`. Identically zero when
/// the gate never fires.
pub fn inverse_relevance_mask(dh: &[f64], gate: &[f64], tau_base: f64, c_mask: f64) -> Vec<f64> {
    assert_eq!(dh.len(), gate.len(), "gate length mismatch");
    let t_len = dh.len();
    if t_len == 0 {
        return Vec::new();
    }
    let t_pos: f64 = gate.iter().sum();
    if t_pos == 0.0 {
        return vec![0.0; t_len];
    }
    let tau = length_scaled_temperature(t_len, tau_base);
    let weights: Vec<f64> = dh
        .iter()
        .zip(gate)
        .map(|(d, g)| g * (-d.abs() / tau).exp())
        .collect();
    let z: f64 = weights.iter().sum();
    weights.iter().map(|w| (t_pos * w / z).min(c_mask)).collect()
}

/// Non-decreasing temporal ramp `(t/T)^kappa` for t = 1..=T; the last entry
/// is always 1.
pub fn temporal_weights(t_len: usize, kappa: f64) -> Vec<f64> {
    (1..=t_len)
        .map(|t| (t as f64 / t_len as f64).powf(kappa))
        .collect()
}

/// All per-completion mask vectors, computed once per rollout and treated
/// as constants during differentiation.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskVectors {
    pub omega: Vec<f64>,
    pub nu: Vec<f64>,
    pub gate: Vec<f64>,
    pub temporal: Vec<f64>,
    pub t_pos: usize,
    pub gate_fallback: bool,
}

impl MaskVectors {
    pub fn build(dh: &[f64], tokens: &[TokenId], tag_map: &TagMap, cfg: &MaskConfig) -> Self {
        let gate = pos_gate(tokens, tag_map, &cfg.substantive_set());
        let omega = modality_relevance_mask(dh, cfg.tau_base, cfg.c_mask);
        let nu = inverse_relevance_mask(dh, &gate.gate, cfg.tau_base, cfg.c_mask);
        let temporal = temporal_weights(dh.len(), cfg.kappa);
        MaskVectors {
            omega,
            nu,
            t_pos: gate.t_pos(),
            gate_fallback: gate.fallback,
            gate: gate.gate,
            temporal,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn default_set() -> HashSet<Tag> {
        MaskConfig::default().substantive_set()
    }

    #[test]
    fn temperature_guard_and_values() {
        assert!((length_scaled_temperature(1, 1.0) - 2.0_f64.ln()).abs() < 1e-15);
        assert!((length_scaled_temperature(2, 1.0) - 2.0_f64.ln()).abs() < 1e-15);
        assert!((length_scaled_temperature(10, 1.0) - 10.0_f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn relevance_mask_uniform_dh_gives_ones() {
        let omega = modality_relevance_mask(&[0.7; 5], 1.0, 5.0);
        for w in omega {
            assert!((w - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn relevance_mask_two_token_hand_value() {
        // T=2, dh=[0,2], tau_base=1 → tau = ln 2;
        // omega = [2/(1+e^(2/ln 2)), 2e^(2/ln 2)/(1+e^(2/ln 2))].
        let omega = modality_relevance_mask(&[0.0, 2.0], 1.0, 5.0);
        assert!((omega[0] - 0.10576105414496145).abs() < 1e-12, "omega[0] = {}", omega[0]);
        assert!((omega[1] - 1.8942389458550386).abs() < 1e-12, "omega[1] = {}", omega[1]);
        assert!((omega[0] + omega[1] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn relevance_mask_capping() {
        // T=10, dh=[20,0,...]: raw weight ≈ 9.985 caps at 5; the rest stay
        // near 0.00169.
        let mut dh = vec![0.0; 10];
        dh[0] = 20.0;
        let omega = modality_relevance_mask(&dh, 1.0, 5.0);
        assert_eq!(omega[0], 5.0);
        for &w in &omega[1..] {
            assert!((w - 0.001686965429881696).abs() < 1e-12, "w = {w}");
            assert!(w > 0.0);
        }
    }

    #[test]
    fn pos_gate_membership_and_fallback() {
        let layout = crate::task::VocabLayout::for_vocab(32).unwrap();
        let map = layout.tag_map();
        let set = default_set();
        let key = layout.keys.start;
        let det = layout.scaffold.start;
        let digit = layout.digits.start;

        let all_noun = pos_gate(&[key, key + 1], &map, &set);
        assert_eq!(all_noun.gate, vec![1.0, 1.0]);
        let all_det = pos_gate(&[det, det], &map, &set);
        assert_eq!(all_det.gate, vec![0.0, 0.0]);
        let mixed = pos_gate(&[key, det, digit], &map, &set);
        assert_eq!(mixed.gate, vec![1.0, 0.0, 1.0]);
        assert!(!mixed.fallback);

        // Token 99 is unmapped: all-ones fallback with the warning flag.
        let fb = pos_gate(&[key, 99], &map, &set);
        assert!(fb.fallback);
        assert_eq!(fb.gate, vec![1.0, 1.0]);
    }

    #[test]
    fn inverse_mask_hand_values() {
        // Equal |dh| on the gated tokens: both weights 1.
        let nu = inverse_relevance_mask(&[1.0, 1.0, 9.0], &[1.0, 1.0, 0.0], 1.0, 5.0);
        assert!((nu[0] - 1.0).abs() < 1e-12);
        assert!((nu[1] - 1.0).abs() < 1e-12);
        assert_eq!(nu[2], 0.0);

        // T=2 both gated, dh=[0,2]: mirrors the relevance mask, flipped.
        let nu = inverse_relevance_mask(&[0.0, 2.0], &[1.0, 1.0], 1.0, 5.0);
        assert!((nu[0] - 1.8942389458550386).abs() < 1e-12, "nu[0] = {}", nu[0]);
        assert!((nu[1] - 0.10576105414496145).abs() < 1e-12, "nu[1] = {}", nu[1]);

        // Nothing gated: identically zero.
        let nu = inverse_relevance_mask(&[0.0, 2.0], &[0.0, 0.0], 1.0, 5.0);
        assert_eq!(nu, vec![0.0, 0.0]);
    }

    #[test]
    fn temporal_weight_values() {
        assert_eq!(temporal_weights(3, 0.0), vec![1.0, 1.0, 1.0]);
        let w = temporal_weights(4, 1.0);
        assert_eq!(w, vec![0.25, 0.5, 0.75, 1.0]);
        let w2 = temporal_weights(2, 2.0);
        assert!((w2[0] - 0.25).abs() < 1e-15);
        assert_eq!(w2[1], 1.0);
    }

    proptest! {
        #[test]
        fn relevance_mask_laws(dh in prop::collection::vec(-8.0_f64..8.0, 1..20)) {
            let c_mask = 5.0;
            let omega = modality_relevance_mask(&dh, 1.0, c_mask);
            let t = dh.len() as f64;
            // Range law.
            for &w in &omega {
                prop_assert!(w > 0.0 && w <= c_mask);
            }
            // Uncapped mean is 1; capping can only reduce it.
            let mean = omega.iter().sum::<f64>() / t;
            if omega.iter().all(|&w| w < c_mask) {
                prop_assert!((mean - 1.0).abs() < 1e-9);
            } else {
                prop_assert!(mean <= 1.0 + 1e-9);
            }
            // Sign-flip invariance: depends on |dh| only.
            let neg: Vec<f64> = dh.iter().map(|d| -d).collect();
            let omega_neg = modality_relevance_mask(&neg, 1.0, c_mask);
            for (a, b) in omega.iter().zip(&omega_neg) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }

        #[test]
        fn inverse_mask_laws(
            dh in prop::collection::vec(-8.0_f64..8.0, 1..20),
            bits in prop::collection::vec(prop::bool::ANY, 1..20),
        ) {
            let n = dh.len().min(bits.len());
            let dh = &dh[..n];
            let gate: Vec<f64> = bits[..n].iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
            let nu = inverse_relevance_mask(dh, &gate, 1.0, 5.0);
            let t_pos: f64 = gate.iter().sum();
            // Support within the gate; sum preserved when uncapped.
            for (v, g) in nu.iter().zip(&gate) {
                prop_assert!(*v >= 0.0 && *v <= 5.0);
                if *g == 0.0 {
                    prop_assert_eq!(*v, 0.0);
                }
            }
            if t_pos > 0.0 && nu.iter().all(|&v| v < 5.0) {
                prop_assert!((nu.iter().sum::<f64>() - t_pos).abs() < 1e-9);
            }
            // Sign-flip invariance.
            let neg: Vec<f64> = dh.iter().map(|d| -d).collect();
            let nu_neg = inverse_relevance_mask(&neg, &gate, 1.0, 5.0);
            for (a, b) in nu.iter().zip(&nu_neg) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }

        #[test]
        fn temporal_weights_are_nondecreasing(t_len in 1usize..40, kappa in 0.0_f64..3.0) {
            let w = temporal_weights(t_len, kappa);
            prop_assert_eq!(w.len(), t_len);
            for pair in w.windows(2) {
                prop_assert!(pair[0] <= pair[1] + 1e-15);
            }
            prop_assert!((w[t_len - 1] - 1.0).abs() < 1e-15);
        }
    }
}
