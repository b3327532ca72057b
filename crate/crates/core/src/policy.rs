//! Decoding policies: regular greedy, visual contrast against distorted
//! visuals, contrast against low-importance visuals, contrast toward
//! high-importance visuals, and steered decoding.
//!
//! Contrastive policies run one pass per visual variant at every step over
//! the same generated prefix and combine the next-token logits. No
//! plausibility cutoff is applied.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::intervene::{vpfc_pipeline, InterventionRecord, VpfcParams};
use crate::lens::{aggregate_visual_attention, head_pool};
use crate::model::{
    forward, forward_cached, greedy_decode, softmax, step_decode, DecodedSequence, HookSet, ModelWeights, PromptInput,
    Sequence,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PolicyKind {
    Regular,
    Vcd,
    Sid,
    Enh,
    Vpfc,
}

impl PolicyKind {
    pub const ALL: [PolicyKind; 5] = [
        PolicyKind::Regular,
        PolicyKind::Vcd,
        PolicyKind::Sid,
        PolicyKind::Enh,
        PolicyKind::Vpfc,
    ];

    pub fn name(self) -> &'static str {
        match self {
            PolicyKind::Regular => "regular",
            PolicyKind::Vcd => "vcd",
            PolicyKind::Sid => "sid",
            PolicyKind::Enh => "enh",
            PolicyKind::Vpfc => "vpfc",
        }
    }
}

impl fmt::Display for PolicyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PolicyKind {
    type Err = LabError;

    fn from_str(s: &str) -> Result<Self> {
        PolicyKind::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| LabError::config(format!("unknown policy '{s}'")))
    }
}

/// Contrast strengths and visual-variant settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PolicyParams {
    pub policy: PolicyKind,
    /// Contrast strength of the low-importance and distorted contrasts.
    pub alpha_contrast: f64,
    /// Step toward the high-importance logits.
    pub beta: f64,
    /// Fraction of visual tokens kept by the low/high variants.
    pub token_fraction: f64,
    /// Standard deviation of the distortion noise.
    pub sigma: f64,
}

impl Default for PolicyParams {
    fn default() -> Self {
        Self {
            policy: PolicyKind::Regular,
            alpha_contrast: 1.0,
            beta: 1.0,
            token_fraction: 0.25,
            sigma: 1.0,
        }
    }
}

impl PolicyParams {
    pub fn of(policy: PolicyKind) -> Self {
        Self {
            policy,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha_contrast.is_finite() && self.alpha_contrast >= 0.0) {
            return Err(LabError::config("alpha_contrast must be finite and ≥ 0"));
        }
        if !(self.beta.is_finite() && self.beta >= 0.0) {
            return Err(LabError::config("beta must be finite and ≥ 0"));
        }
        if !(self.token_fraction > 0.0 && self.token_fraction < 1.0) {
            return Err(LabError::config(format!(
                "token_fraction {} outside (0,1)",
                self.token_fraction
            )));
        }
        if !(self.sigma.is_finite() && self.sigma >= 0.0) {
            return Err(LabError::config("sigma must be finite and ≥ 0"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VisualRole {
    Low,
    High,
    Distorted,
}

/// A visual variant of a prompt.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskedVisualInput {
    pub input: PromptInput,
    pub kept: Vec<bool>,
    pub role: VisualRole,
}

impl MaskedVisualInput {
    pub fn kept_indices(&self) -> Vec<usize> {
        self.kept
            .iter()
            .enumerate()
            .filter(|(_, &k)| k)
            .map(|(i, _)| i)
            .collect()
    }
}

/// Mean attention from the final prompt position to each visual token,
/// over every head past the first layer.
pub fn visual_importance(weights: &ModelWeights, input: &PromptInput) -> Result<Vec<f64>> {
    let trace = forward(weights, input, &HookSet::none())?;
    let min_layer = usize::from(trace.num_layers > 1);
    let summary = aggregate_visual_attention(&trace, &head_pool(&trace, min_layer), input.answer_position())?;
    Ok(summary.values)
}

/// Visual tokens ordered by ascending importance; ties to the lower index.
pub fn importance_order(importance: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..importance.len()).collect();
    order.sort_by(|&a, &b| importance[a].total_cmp(&importance[b]).then(a.cmp(&b)));
    order
}

/// `round(p·n)` tokens kept by the low/high variants.
pub fn kept_count(fraction: f64, n: usize) -> usize {
    ((fraction * n as f64).round() as usize).min(n)
}

fn masked(input: &PromptInput, kept: Vec<bool>, role: VisualRole) -> MaskedVisualInput {
    let mut out = input.clone();
    out.visual_mask = if kept.iter().all(|&k| k) {
        None
    } else {
        Some(kept.clone())
    };
    MaskedVisualInput { input: out, kept, role }
}

/// Keeps the `p` fraction of visual tokens at one end of the importance order.
pub fn mask_by_importance(
    input: &PromptInput,
    importance: &[f64],
    fraction: f64,
    role: VisualRole,
) -> MaskedVisualInput {
    let order = importance_order(importance);
    let k = kept_count(fraction, order.len());
    let chosen = match role {
        VisualRole::High => &order[order.len() - k..],
        _ => &order[..k],
    };
    let mut kept = vec![false; order.len()];
    for &i in chosen {
        kept[i] = true;
    }
    masked(input, kept, role)
}

pub fn make_v_low(weights: &ModelWeights, input: &PromptInput, fraction: f64) -> Result<MaskedVisualInput> {
    let imp = visual_importance(weights, input)?;
    Ok(mask_by_importance(input, &imp, fraction, VisualRole::Low))
}

pub fn make_v_high(weights: &ModelWeights, input: &PromptInput, fraction: f64) -> Result<MaskedVisualInput> {
    let imp = visual_importance(weights, input)?;
    Ok(mask_by_importance(input, &imp, fraction, VisualRole::High))
}

/// Adds seeded `N(0, σ²)` noise to every visual embedding.
pub fn make_v_distorted(input: &PromptInput, sigma: f64, seed: u64) -> Result<MaskedVisualInput> {
    let n = input.num_visual();
    if sigma == 0.0 {
        return Ok(masked(input, vec![true; n], VisualRole::Distorted));
    }
    let noise = Normal::new(0.0, sigma).map_err(|e| LabError::config(format!("distortion sigma: {e}")))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = masked(input, vec![true; n], VisualRole::Distorted);
    out.input.visual.embeddings.mapv_inplace(|v| v + noise.sample(&mut rng));
    Ok(out)
}

fn check_lengths(a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() {
        return Err(LabError::config(format!(
            "logit vectors differ in length: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    Ok(())
}

/// `softmax[z + α(z − z_low)]`.
pub fn sid_distribution(full: &[f64], low: &[f64], alpha: f64) -> Result<Vec<f64>> {
    check_lengths(full, low)?;
    let z: Vec<f64> = full.iter().zip(low).map(|(f, l)| f + alpha * (f - l)).collect();
    Ok(softmax(&z))
}

/// `softmax[z + β(z_high − z)]`.
pub fn enh_distribution(full: &[f64], high: &[f64], beta: f64) -> Result<Vec<f64>> {
    check_lengths(full, high)?;
    let z: Vec<f64> = full.iter().zip(high).map(|(f, h)| f + beta * (h - f)).collect();
    Ok(softmax(&z))
}

/// `softmax[(1+λ)z − λ z_dist]`.
pub fn vcd_distribution(full: &[f64], distorted: &[f64], lambda: f64) -> Result<Vec<f64>> {
    check_lengths(full, distorted)?;
    let z: Vec<f64> = full
        .iter()
        .zip(distorted)
        .map(|(f, d)| (1.0 + lambda) * f - lambda * d)
        .collect();
    Ok(softmax(&z))
}

/// Largest gap between the low-contrast and high-enhancement
/// distributions when the full logits are the midpoint of the two.
pub fn duality_check(high: &[f64], low: &[f64], alpha: f64) -> Result<f64> {
    check_lengths(high, low)?;
    let full: Vec<f64> = high.iter().zip(low).map(|(h, l)| (h + l) / 2.0).collect();
    duality_gap(&full, high, low, alpha)
}

/// Largest gap between the two contrastive distributions for given full logits.
pub fn duality_gap(full: &[f64], high: &[f64], low: &[f64], alpha: f64) -> Result<f64> {
    let sid = sid_distribution(full, low, alpha)?;
    let enh = enh_distribution(full, high, alpha)?;
    Ok(sid.iter().zip(&enh).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max))
}

fn next_logits(weights: &ModelWeights, input: &PromptInput, generated: &[usize]) -> Result<Vec<f64>> {
    let seq = Sequence::from_prompt(input, generated);
    let (trace, _) = forward_cached(weights, &seq, &HookSet::none())?;
    Ok(trace.next_token_logits().to_vec())
}

/// Greedy decoding from `combine(z_full, z_aux)` at every step.
pub fn contrastive_decode(
    weights: &ModelWeights,
    input: &PromptInput,
    aux: &PromptInput,
    max_new: usize,
    combine: impl Fn(&[f64], &[f64]) -> Result<Vec<f64>>,
) -> Result<DecodedSequence> {
    crate::model::check_budget(weights, input, max_new)?;
    aux.validate(weights)?;
    step_decode(max_new, |generated| {
        let full = next_logits(weights, input, generated)?;
        let other = next_logits(weights, aux, generated)?;
        combine(&full, &other)
    })
}

/// Output of one policy on one prompt.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyOutput {
    pub decoded: DecodedSequence,
    pub intervention: Option<InterventionRecord>,
}

/// Decodes `input` under `params`; `seed` drives the distortion noise.
pub fn run_policy(
    weights: &ModelWeights,
    input: &PromptInput,
    params: &PolicyParams,
    vpfc: &VpfcParams,
    seed: u64,
    max_new: usize,
) -> Result<PolicyOutput> {
    params.validate()?;
    let plain = |decoded| PolicyOutput {
        decoded,
        intervention: None,
    };
    match params.policy {
        PolicyKind::Regular => Ok(plain(greedy_decode(weights, input, &HookSet::none(), max_new)?)),
        PolicyKind::Vcd => {
            let aux = make_v_distorted(input, params.sigma, seed)?;
            let l = params.alpha_contrast;
            Ok(plain(contrastive_decode(
                weights,
                input,
                &aux.input,
                max_new,
                |f, d| vcd_distribution(f, d, l),
            )?))
        }
        PolicyKind::Sid => {
            let aux = make_v_low(weights, input, params.token_fraction)?;
            let a = params.alpha_contrast;
            Ok(plain(contrastive_decode(
                weights,
                input,
                &aux.input,
                max_new,
                |f, l| sid_distribution(f, l, a),
            )?))
        }
        PolicyKind::Enh => {
            let aux = make_v_high(weights, input, params.token_fraction)?;
            let b = params.beta;
            Ok(plain(contrastive_decode(
                weights,
                input,
                &aux.input,
                max_new,
                |f, h| enh_distribution(f, h, b),
            )?))
        }
        PolicyKind::Vpfc => {
            let (decoded, record) = vpfc_pipeline(weights, input, vpfc, max_new)?;
            Ok(PolicyOutput {
                decoded,
                intervention: Some(record),
            })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModelConfig, VisualInput};
    use ndarray::Array2;
    use proptest::prelude::*;
    use rand::Rng;

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.iter().zip(b).all(|(x, y)| (x - y).abs() < tol)
    }

    fn setup(seed: u64) -> (ModelWeights, PromptInput) {
        let cfg = ModelConfig {
            grid_side: 4,
            model_dim: 16,
            num_heads: 4,
            num_layers: 2,
            vocab_size: 12,
            max_seq_len: 24,
            seed,
        };
        let w = ModelWeights::init(&cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 7);
        let emb = Array2::from_shape_fn((16, 16), |_| rng.gen_range(-1.0..1.0));
        (w, PromptInput::new(VisualInput::new(4, emb).unwrap(), vec![0, 8, 1]))
    }

    #[test]
    fn distribution_hand_values() {
        let sid = sid_distribution(&[1.0, 0.0], &[0.0, 1.0], 1.0).unwrap();
        assert!(close(&sid, &[0.95257, 0.04743], 1e-5));
        assert_eq!(
            sid_distribution(&[1.0, 0.5], &[3.0, 0.0], 0.0).unwrap(),
            softmax(&[1.0, 0.5])
        );
        let enh = enh_distribution(&[0.0, 0.0], &[1.0, -1.0], 0.5).unwrap();
        assert!(close(&enh, &[0.73106, 0.26894], 1e-5));
        assert!(close(
            &enh_distribution(&[0.3, 0.1], &[1.0, -1.0], 1.0).unwrap(),
            &softmax(&[1.0, -1.0]),
            1e-15
        ));
        assert_eq!(
            vcd_distribution(&[1.0, 0.0], &[1.0, 0.0], 3.0).unwrap(),
            softmax(&[1.0, 0.0])
        );
        assert_eq!(
            vcd_distribution(&[1.0, 0.0], &[0.0, 1.0], 1.0).unwrap(),
            softmax(&[2.0, -1.0])
        );
        assert!(sid_distribution(&[1.0], &[1.0, 2.0], 1.0).is_err());
        assert!(enh_distribution(&[1.0], &[], 1.0).is_err());
        assert!(vcd_distribution(&[], &[1.0], 1.0).is_err());
    }

    #[test]
    fn duality_midpoint_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for alpha in [0.5, 1.0, 2.0] {
            for _ in 0..1000 {
                let n = rng.gen_range(2..40);
                let hi: Vec<f64> = (0..n).map(|_| rng.gen_range(-8.0..8.0)).collect();
                let lo: Vec<f64> = (0..n).map(|_| rng.gen_range(-8.0..8.0)).collect();
                assert!(duality_check(&hi, &lo, alpha).unwrap() < 1e-12);
            }
        }
        assert_eq!(duality_check(&[1.0, 2.0], &[0.0, 5.0], 0.0).unwrap(), 0.0);
        assert!(duality_gap(&[0.0, 0.0], &[1.0, -1.0], &[0.5, 0.5], 1.0).unwrap() > 0.0);
    }

    proptest! {
        #[test]
        fn policy_distributions_valid_and_shift_invariant(
            z in prop::collection::vec(-10.0f64..10.0, 2..12),
            shift in -50.0f64..50.0,
            a in 0.0f64..4.0,
        ) {
            let other: Vec<f64> = z.iter().rev().copied().collect();
            let zs: Vec<f64> = z.iter().map(|v| v + shift).collect();
            let os: Vec<f64> = other.iter().map(|v| v + shift).collect();
            for f in [sid_distribution, enh_distribution, vcd_distribution] {
                let p = f(&z, &other, a).unwrap();
                prop_assert!(p.iter().all(|&v| v >= 0.0));
                prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                prop_assert!(close(&p, &f(&zs, &os, a).unwrap(), 1e-9));
            }
        }
    }

    #[test]
    fn importance_masks() {
        let (_, input) = setup(1);
        let imp: Vec<f64> = (0..16).map(|i| i as f64).collect();
        let low = mask_by_importance(&input, &imp, 0.25, VisualRole::Low);
        assert_eq!(low.kept_indices(), vec![0, 1, 2, 3]);
        let high = mask_by_importance(&input, &imp, 0.25, VisualRole::High);
        assert_eq!(high.kept_indices(), vec![12, 13, 14, 15]);
        let all = mask_by_importance(&input, &imp, 0.99, VisualRole::Low);
        assert_eq!(all.input, input);

        let big: Vec<f64> = (0..64).map(|i| i as f64).collect();
        let low = mask_by_importance(&input, &big, 0.25, VisualRole::Low);
        assert_eq!(low.kept_indices(), (0..16).collect::<Vec<_>>());

        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..200 {
            let imp: Vec<f64> = (0..16).map(|_| f64::from(rng.gen_range(0u8..3))).collect();
            let p = rng.gen_range(0.05..=0.5);
            let l = mask_by_importance(&input, &imp, p, VisualRole::Low);
            let h = mask_by_importance(&input, &imp, p, VisualRole::High);
            assert_eq!(l.kept_indices().len(), kept_count(p, 16));
            assert!(l.kept.iter().zip(&h.kept).all(|(a, b)| !(a & b)));
        }
    }

    #[test]
    fn masked_tokens_leave_attention() {
        let (w, input) = setup(3);
        let low = make_v_low(&w, &input, 0.25).unwrap();
        let trace = forward(&w, &low.input, &HookSet::none()).unwrap();
        for s in trace.sites() {
            let a = trace.attention(s.layer, s.head);
            for j in (0..16).filter(|&j| !low.kept[j]) {
                for i in 16..trace.seq_len() {
                    assert_eq!(a[[i, j]], 0.0);
                }
            }
        }
    }

    #[test]
    fn distortion_properties() {
        let (_, input) = setup(5);
        assert_eq!(make_v_distorted(&input, 0.0, 1).unwrap().input, input);
        assert_eq!(
            make_v_distorted(&input, 0.7, 9).unwrap(),
            make_v_distorted(&input, 0.7, 9).unwrap()
        );
        let zero = PromptInput::new(VisualInput::new(4, Array2::zeros((16, 16))).unwrap(), vec![0]);
        let sigma = 0.8;
        let mut sum = 0.0;
        let mut sq = 0.0;
        let mut n = 0.0;
        for seed in 0..40 {
            for v in make_v_distorted(&zero, sigma, seed)
                .unwrap()
                .input
                .visual
                .embeddings
                .iter()
            {
                sum += v;
                sq += v * v;
                n += 1.0;
            }
        }
        let mean = sum / n;
        let sd = (sq / n - mean * mean).sqrt();
        assert!(n >= 1e4);
        assert!((sd - sigma).abs() < 0.05 * sigma, "{sd}");
    }

    #[test]
    fn zero_strength_contrasts_match_regular() {
        let (w, input) = setup(8);
        let regular = run_policy(&w, &input, &PolicyParams::default(), &VpfcParams::default(), 0, 3).unwrap();
        for kind in [PolicyKind::Vcd, PolicyKind::Sid] {
            let p = PolicyParams {
                alpha_contrast: 0.0,
                ..PolicyParams::of(kind)
            };
            let out = run_policy(&w, &input, &p, &VpfcParams::default(), 0, 3).unwrap();
            assert_eq!(out.decoded.tokens, regular.decoded.tokens);
        }
        let p = PolicyParams {
            beta: 0.0,
            ..PolicyParams::of(PolicyKind::Enh)
        };
        let out = run_policy(&w, &input, &p, &VpfcParams::default(), 0, 3).unwrap();
        assert_eq!(out.decoded.tokens, regular.decoded.tokens);
        let v = run_policy(
            &w,
            &input,
            &PolicyParams::of(PolicyKind::Vpfc),
            &VpfcParams::default(),
            0,
            3,
        )
        .unwrap();
        assert!(v.intervention.is_some());
        assert_eq!("sid".parse::<PolicyKind>().unwrap(), PolicyKind::Sid);
        assert!("memvr".parse::<PolicyKind>().is_err());
    }
}
