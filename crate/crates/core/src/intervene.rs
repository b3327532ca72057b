//! Attention enhancement, steering directions, saliency-based head
//! selection and the composed calibration pipeline.
//!
//! The pipeline for one prompt:
//!
//! 1. baseline pass and greedy next token
//! 2. localization heads at the query position
//! 3. their mean visual attention
//! 4. high-attention mask (top fraction of cells)
//! 5. centroid square of the same area, or the raw mask when centroid mode is off
//! 6. steering field `Δ = h⁺ − h⁻` from a mildly enhanced probe pass
//! 7. head saliency `‖A ⊙ ∂L/∂A‖₁` for the baseline token, top-γ heads
//! 8. greedy decoding with `h̃ = h + α·Δ` on the selected heads

use std::collections::BTreeSet;
use std::sync::Arc;

use ndarray::Array2;

use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::lens::{
    aggregate_visual_attention, centroid, dispersion, hcvr_mask, head_pool, select_localization_heads_from,
    square_region, AttentionSummary, DispersionStats, HcvrMask, RegionSpec,
};
use crate::model::{
    argmax, backward_attention, forward, greedy_decode, softmax, AttentionEdit, DecodedSequence, ForwardTrace,
    HeadSite, HookScope, HookSet, LossSpec, ModelWeights, PositionRange, PromptInput, StateEdit,
};
use crate::tokens::TokenId;

/// How the enhancement factor acts on a targeted attention entry.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnhanceMode {
    /// Multiply the post-softmax weight by `1+f`, then renormalize the row.
    #[default]
    PostSoftmax,
    /// Multiply the pre-softmax logit by `1+f`, then take the softmax.
    PreSoftmaxLogit,
}

/// Which query rows an enhancement touches.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnhanceRows {
    /// Every text position, in every head.
    #[default]
    Text,
    /// Only the answer position, in every head.
    Answer,
}

/// Enhancement of attention toward a set of visual cells.
#[derive(Debug, Clone, PartialEq)]
pub struct EnhancementSpec {
    /// Targeted visual token indices (row-major cells).
    pub cells: Vec<usize>,
    pub factor: f64,
    pub scope: HookScope,
    pub mode: EnhanceMode,
}

impl EnhancementSpec {
    /// Targets `cells` from every head at the given rows of `input`.
    pub fn for_prompt(input: &PromptInput, cells: Vec<usize>, factor: f64, rows: EnhanceRows) -> Self {
        let positions = match rows {
            EnhanceRows::Text => PositionRange::From(input.num_visual()),
            EnhanceRows::Answer => PositionRange::Only(BTreeSet::from([input.answer_position()])),
        };
        Self {
            cells,
            factor,
            scope: HookScope::new(None, positions),
            mode: EnhanceMode::PostSoftmax,
        }
    }

    pub fn with_mode(mut self, mode: EnhanceMode) -> Self {
        self.mode = mode;
        self
    }

    pub fn validate(&self, num_cells: usize) -> Result<()> {
        if !self.factor.is_finite() || self.factor < 0.0 {
            return Err(LabError::config(format!(
                "enhancement factor {} must be finite and ≥ 0",
                self.factor
            )));
        }
        if let Some(&c) = self.cells.iter().find(|&&c| c >= num_cells) {
            return Err(LabError::config(format!(
                "enhancement cell {c} outside grid of {num_cells}"
            )));
        }
        Ok(())
    }
}

struct Enhance {
    targeted: Vec<bool>,
    gain: f64,
    mode: EnhanceMode,
}

impl Enhance {
    fn hit(&self, j: usize) -> bool {
        self.targeted.get(j).copied().unwrap_or(false)
    }
}

impl AttentionEdit for Enhance {
    fn apply(&self, _: HeadSite, _: usize, scores: &[f64], weights: &mut [f64]) {
        match self.mode {
            EnhanceMode::PostSoftmax => {
                for (j, w) in weights.iter_mut().enumerate() {
                    if self.hit(j) {
                        *w *= self.gain;
                    }
                }
            }
            EnhanceMode::PreSoftmaxLogit => {
                let edited: Vec<f64> = scores
                    .iter()
                    .enumerate()
                    .map(|(j, &s)| if self.hit(j) && s.is_finite() { s * self.gain } else { s })
                    .collect();
                let max = edited.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for (w, &s) in weights.iter_mut().zip(&edited) {
                    *w = if s.is_finite() { (s - max).exp() } else { 0.0 };
                    total += *w;
                }
                weights.iter_mut().for_each(|w| *w /= total);
            }
        }
    }

    fn backward(
        &self,
        site: HeadSite,
        row: usize,
        scores: &[f64],
        weights: &[f64],
        grad_out: &[f64],
        grad_scores: &mut [f64],
        grad_weights: &mut [f64],
    ) {
        match self.mode {
            EnhanceMode::PostSoftmax => {
                for (j, (gw, &g)) in grad_weights.iter_mut().zip(grad_out).enumerate() {
                    *gw += if self.hit(j) { g * self.gain } else { g };
                }
            }
            EnhanceMode::PreSoftmaxLogit => {
                let mut edited = weights.to_vec();
                self.apply(site, row, scores, &mut edited);
                let dot: f64 = edited.iter().zip(grad_out).map(|(w, g)| w * g).sum();
                for (j, gs) in grad_scores.iter_mut().enumerate() {
                    let d = edited[j] * (grad_out[j] - dot);
                    *gs += if self.hit(j) { d * self.gain } else { d };
                }
            }
        }
    }
}

/// Hooks implementing `spec`; an empty target gives empty hooks.
pub fn enhance_attention(spec: &EnhancementSpec) -> HookSet {
    if spec.cells.is_empty() {
        return HookSet::none();
    }
    let n = spec.cells.iter().max().map_or(0, |m| m + 1);
    let mut targeted = vec![false; n];
    for &c in &spec.cells {
        targeted[c] = true;
    }
    HookSet::none().with_attention(
        spec.scope.clone(),
        Arc::new(Enhance {
            targeted,
            gain: 1.0 + spec.factor,
            mode: spec.mode,
        }),
    )
}

/// Per-head direction `Δ_{l,h} = h⁺ − h⁻` at the answer position.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SteeringField {
    pub num_layers: usize,
    pub num_heads: usize,
    /// Indexed `l * H + h`, each of length `d/H`.
    pub deltas: Vec<Vec<f64>>,
    pub probe_factor: f64,
    pub cells: Vec<usize>,
    pub position: usize,
}

impl SteeringField {
    pub fn delta(&self, site: HeadSite) -> &[f64] {
        &self.deltas[site.layer * self.num_heads + site.head]
    }

    pub fn norms(&self) -> Vec<f64> {
        self.deltas
            .iter()
            .map(|d| d.iter().map(|v| v * v).sum::<f64>().sqrt())
            .collect()
    }
}

/// Difference of per-head states at the answer position between a pass
/// with `enhancement` and a hook-free pass.
pub fn steering_direction(
    weights: &ModelWeights,
    input: &PromptInput,
    enhancement: &EnhancementSpec,
) -> Result<SteeringField> {
    enhancement.validate(input.num_visual())?;
    let base = forward(weights, input, &HookSet::none())?;
    steering_from_baseline(weights, input, enhancement, &base)
}

fn steering_from_baseline(
    weights: &ModelWeights,
    input: &PromptInput,
    enhancement: &EnhancementSpec,
    base: &ForwardTrace,
) -> Result<SteeringField> {
    let pos = input.answer_position();
    let probed = forward(weights, input, &enhance_attention(enhancement))?;
    let deltas = base
        .sites()
        .map(|s| {
            let hp = probed.head_state(s.layer, s.head, pos);
            let hm = base.head_state(s.layer, s.head, pos);
            hp.iter().zip(hm.iter()).map(|(a, b)| a - b).collect()
        })
        .collect();
    Ok(SteeringField {
        num_layers: base.num_layers,
        num_heads: base.num_heads,
        deltas,
        probe_factor: enhancement.factor,
        cells: enhancement.cells.clone(),
        position: pos,
    })
}

struct Steer {
    field: SteeringField,
    alpha: f64,
}

impl StateEdit for Steer {
    fn apply(&self, site: HeadSite, _: usize, state: &mut [f64]) {
        for (h, d) in state.iter_mut().zip(self.field.delta(site)) {
            *h += self.alpha * d;
        }
    }
}

/// `h̃ = h + α·Δ` on `heads` from the field's position onward.
pub fn apply_steering(field: &SteeringField, heads: &[HeadSite], alpha: f64) -> HookSet {
    if heads.is_empty() {
        return HookSet::none();
    }
    let sites: BTreeSet<HeadSite> = heads.iter().copied().collect();
    HookSet::none().with_state(
        HookScope::new(Some(sites), PositionRange::From(field.position)),
        Arc::new(Steer {
            field: field.clone(),
            alpha,
        }),
    )
}

/// Saliency `I_{l,h} = Σ |A ⊙ ∂L/∂A|` per head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadImportance {
    pub num_layers: usize,
    pub num_heads: usize,
    /// Indexed `l * H + h`.
    pub values: Vec<f64>,
    pub loss: f64,
}

impl HeadImportance {
    pub fn get(&self, site: HeadSite) -> f64 {
        self.values[site.layer * self.num_heads + site.head]
    }

    pub fn sites(&self) -> impl Iterator<Item = HeadSite> + '_ {
        (0..self.num_layers).flat_map(move |l| (0..self.num_heads).map(move |h| HeadSite::new(l, h)))
    }
}

/// `Σ |a·g|` over matching entries.
pub fn saliency(attention: &[f64], grad: &[f64]) -> f64 {
    attention.iter().zip(grad).map(|(a, g)| (a * g).abs()).sum()
}

pub fn head_importance(weights: &ModelWeights, input: &PromptInput, loss: &LossSpec) -> Result<HeadImportance> {
    let trace = forward(weights, input, &HookSet::none())?;
    let grads = backward_attention(weights, input, &HookSet::none(), loss)?;
    let values = trace
        .sites()
        .map(|s| saliency_map(trace.attention(s.layer, s.head), grads.get(s)))
        .collect();
    Ok(HeadImportance {
        num_layers: trace.num_layers,
        num_heads: trace.num_heads,
        values,
        loss: grads.loss,
    })
}

fn saliency_map(a: &Array2<f64>, g: &Array2<f64>) -> f64 {
    a.iter().zip(g.iter()).map(|(a, g)| (a * g).abs()).sum()
}

/// Number of heads a fraction `γ` selects out of `total`.
pub fn selected_count(gamma: f64, total: usize) -> usize {
    ((gamma * total as f64 + 1e-9).floor() as usize).clamp(1, total)
}

/// Top `max(1, floor(γ·L·H))` heads by importance; ties to the lower site.
pub fn select_heads(importance: &HeadImportance, gamma: f64) -> Result<Vec<HeadSite>> {
    if !(gamma > 0.0 && gamma <= 1.0) {
        return Err(LabError::config(format!("head fraction {gamma} outside (0,1]")));
    }
    let mut ranked: Vec<(HeadSite, f64)> = importance.sites().map(|s| (s, importance.get(s))).collect();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let k = selected_count(gamma, ranked.len());
    Ok(ranked.into_iter().take(k).map(|(s, _)| s).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CentroidMode {
    #[default]
    On,
    Off,
}

/// Knobs of the calibration pipeline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VpfcParams {
    pub alpha_steer: f64,
    pub gamma: f64,
    pub probe_factor: f64,
    pub hcvr_fraction: f64,
    pub centroid_mode: CentroidMode,
    /// Localization heads averaged into the attention summary.
    pub localization_heads: usize,
    /// Lowest layer eligible as a localization head.
    pub min_localization_layer: usize,
    pub enhance_mode: EnhanceMode,
    pub enhance_rows: EnhanceRows,
}

impl Default for VpfcParams {
    fn default() -> Self {
        Self {
            alpha_steer: 4.0,
            gamma: 0.25,
            probe_factor: 0.05,
            hcvr_fraction: 0.25,
            centroid_mode: CentroidMode::On,
            localization_heads: 8,
            min_localization_layer: 1,
            enhance_mode: EnhanceMode::PostSoftmax,
            enhance_rows: EnhanceRows::Text,
        }
    }
}

impl VpfcParams {
    pub fn validate(&self, total_heads: usize) -> Result<()> {
        if !self.alpha_steer.is_finite() {
            return Err(LabError::config("alpha_steer must be finite"));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(LabError::config(format!("gamma {} outside (0,1]", self.gamma)));
        }
        if self.gamma * total_heads as f64 + 1e-9 < 1.0 {
            log::warn!("gamma {} selects under one head; using one", self.gamma);
        }
        if !(self.probe_factor.is_finite() && self.probe_factor >= 0.0) {
            return Err(LabError::config("probe_factor must be finite and ≥ 0"));
        }
        if !(self.hcvr_fraction > 0.0 && self.hcvr_fraction < 1.0) {
            return Err(LabError::config(format!(
                "hcvr_fraction {} outside (0,1)",
                self.hcvr_fraction
            )));
        }
        if self.localization_heads == 0 {
            return Err(LabError::config("localization_heads must be positive"));
        }
        Ok(())
    }
}

/// Every intermediate artifact of one pipeline run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterventionRecord {
    pub params: VpfcParams,
    pub baseline_token: TokenId,
    pub query_position: usize,
    pub localization_heads: Vec<HeadSite>,
    pub summary: AttentionSummary,
    pub hcvr_cells: Vec<usize>,
    pub dispersion: DispersionStats,
    pub centroid: Option<(usize, usize)>,
    pub region: Option<RegionSpec>,
    pub target_cells: Vec<usize>,
    pub importance: Vec<f64>,
    pub selected_heads: Vec<HeadSite>,
    pub delta_norms: Vec<f64>,
    pub output_tokens: Vec<TokenId>,
}

impl InterventionRecord {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Everything up to (not including) the steered decode.
pub struct Calibration {
    pub record: InterventionRecord,
    pub field: SteeringField,
    pub hooks: HookSet,
}

/// Localization heads, their visual attention and the high-attention mask
/// read at one query position.
#[derive(Debug, Clone, PartialEq)]
pub struct Localization {
    pub heads: Vec<HeadSite>,
    pub summary: AttentionSummary,
    pub mask: HcvrMask,
    pub dispersion: DispersionStats,
}

/// Steps 2 to 4 of the pipeline on an existing trace.
pub fn localize(trace: &ForwardTrace, query: usize, params: &VpfcParams) -> Result<Localization> {
    let pool = head_pool(trace, params.min_localization_layer);
    let k = params.localization_heads.min(pool.len());
    let heads = select_localization_heads_from(trace, query, k, &pool).map_err(LabError::at_stage("localization"))?;
    let summary = aggregate_visual_attention(trace, &heads, query).map_err(LabError::at_stage("summary"))?;
    let mask = hcvr_mask(&summary, params.hcvr_fraction).map_err(LabError::at_stage("hcvr"))?;
    let dispersion = dispersion(&summary, &mask).map_err(LabError::at_stage("hcvr"))?;
    Ok(Localization {
        heads,
        summary,
        mask,
        dispersion,
    })
}

/// Answer probabilities with high- and low-attention regions enhanced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DirectionalProbe {
    pub base: f64,
    pub high: f64,
    pub low: f64,
    pub standard_distance: f64,
}

impl DirectionalProbe {
    pub fn high_delta(&self) -> f64 {
        self.high - self.base
    }

    pub fn low_delta(&self) -> f64 {
        self.low - self.base
    }
}

/// Enhances the high-attention mask and, separately, its complement by
/// `factor`, reporting the probability of `token` under each.
pub fn directional_probe(
    weights: &ModelWeights,
    input: &PromptInput,
    params: &VpfcParams,
    factor: f64,
    token: TokenId,
) -> Result<DirectionalProbe> {
    params.validate(weights.config.total_heads())?;
    input.validate(weights)?;
    let base = forward(weights, input, &HookSet::none())?;
    let loc = localize(&base, input.query_position(), params)?;
    let prob = |cells: Vec<usize>| {
        let spec =
            EnhancementSpec::for_prompt(input, cells, factor, params.enhance_rows).with_mode(params.enhance_mode);
        answer_probability(weights, input, &enhance_attention(&spec), token)
    };
    Ok(DirectionalProbe {
        base: softmax(&base.next_token_logits().to_vec())[token],
        high: prob(loc.mask.indices())?,
        low: prob(loc.mask.complement().indices())?,
        standard_distance: loc.dispersion.standard_distance,
    })
}

/// Steps 1 to 7 of the pipeline, producing the steering hooks.
pub fn calibrate(weights: &ModelWeights, input: &PromptInput, params: &VpfcParams) -> Result<Calibration> {
    params.validate(weights.config.total_heads())?;
    input.validate(weights)?;
    let base = forward(weights, input, &HookSet::none()).map_err(LabError::at_stage("baseline"))?;
    let baseline_token = argmax(&softmax(&base.next_token_logits().to_vec()));

    let query = input.query_position();
    let Localization {
        heads: loc,
        summary,
        mask,
        dispersion: spread,
    } = localize(&base, query, params)?;
    let (cent, region, target) = match params.centroid_mode {
        CentroidMode::On => {
            let c = centroid(&summary, &mask).map_err(LabError::at_stage("centroid"))?;
            let r = square_region(c, mask.count(), summary.grid_side).map_err(LabError::at_stage("region"))?;
            let cells = r.cells.clone();
            (Some(c), Some(r), cells)
        }
        CentroidMode::Off => (None, None, mask.indices()),
    };

    let probe = EnhancementSpec::for_prompt(input, target.clone(), params.probe_factor, params.enhance_rows)
        .with_mode(params.enhance_mode);
    let field = steering_from_baseline(weights, input, &probe, &base).map_err(LabError::at_stage("steering"))?;

    let loss = LossSpec::single(input.answer_position(), baseline_token);
    let importance = head_importance(weights, input, &loss).map_err(LabError::at_stage("saliency"))?;
    let selected = select_heads(&importance, params.gamma).map_err(LabError::at_stage("saliency"))?;
    let hooks = apply_steering(&field, &selected, params.alpha_steer);

    let record = InterventionRecord {
        params: params.clone(),
        baseline_token,
        query_position: query,
        localization_heads: loc,
        summary,
        hcvr_cells: mask.indices(),
        dispersion: spread,
        centroid: cent,
        region,
        target_cells: target,
        importance: importance.values,
        selected_heads: selected,
        delta_norms: field.norms(),
        output_tokens: Vec::new(),
    };
    Ok(Calibration { record, field, hooks })
}

/// The full pipeline: calibrate, then decode greedily with steering.
pub fn vpfc_pipeline(
    weights: &ModelWeights,
    input: &PromptInput,
    params: &VpfcParams,
    max_new: usize,
) -> Result<(DecodedSequence, InterventionRecord)> {
    let mut cal = calibrate(weights, input, params)?;
    let decoded = greedy_decode(weights, input, &cal.hooks, max_new).map_err(LabError::at_stage("decode"))?;
    cal.record.output_tokens = decoded.tokens.clone();
    Ok((decoded, cal.record))
}

/// Next-token probability of `token` at the answer position under `hooks`.
pub fn answer_probability(weights: &ModelWeights, input: &PromptInput, hooks: &HookSet, token: TokenId) -> Result<f64> {
    let trace = forward(weights, input, hooks)?;
    Ok(softmax(&trace.next_token_logits().to_vec())[token])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModelConfig, VisualInput};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

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
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
        let emb = Array2::from_shape_fn((16, 16), |_| rng.gen_range(-2.0..2.0));
        let input = PromptInput::new(VisualInput::new(4, emb).unwrap(), vec![0, 8, 1]).with_query_object(1);
        (w, input)
    }

    fn edit_row(spec: &EnhancementSpec, row: &[f64]) -> Vec<f64> {
        let hooks = enhance_attention(spec);
        let Some((_, edit)) = hooks.attention_edit.as_ref() else {
            return row.to_vec();
        };
        let mut w = row.to_vec();
        let scores: Vec<f64> = row.iter().map(|v| v.ln()).collect();
        edit.apply(HeadSite::new(0, 0), 0, &scores, &mut w);
        let s: f64 = w.iter().sum();
        w.iter().map(|v| v / s).collect()
    }

    fn spec(cells: Vec<usize>, factor: f64) -> EnhancementSpec {
        EnhancementSpec {
            cells,
            factor,
            scope: HookScope::everywhere(),
            mode: EnhanceMode::PostSoftmax,
        }
    }

    #[test]
    fn enhancement_hand_arithmetic() {
        let out = edit_row(&spec(vec![0], 0.05), &[0.5, 0.5]);
        assert!((out[0] - 0.51220).abs() < 1e-5);
        assert!((out[1] - 0.48780).abs() < 1e-5);
        assert_eq!(edit_row(&spec(vec![0], 0.0), &[0.3, 0.7]), vec![0.3, 0.7]);
        assert!(enhance_attention(&spec(vec![], 1.0)).is_empty());
    }

    #[test]
    fn logit_mode_multiplies_scores() {
        let s = spec(vec![1], 1.0).with_mode(EnhanceMode::PreSoftmaxLogit);
        let out = edit_row(&s, &[0.25, 0.75]);
        let expected = softmax(&[0.25f64.ln(), 2.0 * 0.75f64.ln()]);
        for (a, b) in out.iter().zip(&expected) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn enhanced_rows_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..1000 {
            let n = rng.gen_range(2..20);
            let raw: Vec<f64> = (0..n).map(|_| rng.gen_range(0.01..1.0)).collect();
            let t: f64 = raw.iter().sum();
            let row: Vec<f64> = raw.iter().map(|v| v / t).collect();
            let cells: Vec<usize> = (0..n).filter(|_| rng.gen_bool(0.4)).collect();
            let out = edit_row(&spec(cells, rng.gen_range(0.0..3.0)), &row);
            assert!((out.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn steering_direction_zero_cases_and_trace_oracle() {
        let (w, input) = setup(3);
        let zero = steering_direction(
            &w,
            &input,
            &EnhancementSpec::for_prompt(&input, vec![1, 2], 0.0, EnhanceRows::Text),
        )
        .unwrap();
        assert!(zero.deltas.iter().flatten().all(|&v| v == 0.0));
        let empty = steering_direction(
            &w,
            &input,
            &EnhancementSpec::for_prompt(&input, vec![], 0.5, EnhanceRows::Text),
        )
        .unwrap();
        assert!(empty.deltas.iter().flatten().all(|&v| v == 0.0));

        let e = EnhancementSpec::for_prompt(&input, vec![0, 5, 6], 0.5, EnhanceRows::Text);
        let field = steering_direction(&w, &input, &e).unwrap();
        let plus = forward(&w, &input, &enhance_attention(&e)).unwrap();
        let minus = forward(&w, &input, &HookSet::none()).unwrap();
        let pos = input.answer_position();
        let mut nonzero = false;
        for s in plus.sites() {
            let d = field.delta(s);
            for (k, v) in d.iter().enumerate() {
                let expect = plus.head_state(s.layer, s.head, pos)[k] - minus.head_state(s.layer, s.head, pos)[k];
                assert!((v - expect).abs() < 1e-12);
                nonzero |= *v != 0.0;
            }
        }
        assert!(nonzero);
    }

    #[test]
    fn steering_hand_arithmetic_and_identities() {
        let field = SteeringField {
            num_layers: 1,
            num_heads: 1,
            deltas: vec![vec![0.5, -0.5]],
            probe_factor: 0.05,
            cells: vec![0],
            position: 0,
        };
        let hooks = apply_steering(&field, &[HeadSite::new(0, 0)], 4.0);
        let (_, edit) = hooks.state_edit.as_ref().unwrap();
        let mut h = [1.0, 2.0];
        edit.apply(HeadSite::new(0, 0), 0, &mut h);
        assert_eq!(h, [3.0, 0.0]);
        let hooks = apply_steering(&field, &[HeadSite::new(0, 0)], 0.0);
        let mut h = [1.0, 2.0];
        hooks
            .state_edit
            .as_ref()
            .unwrap()
            .1
            .apply(HeadSite::new(0, 0), 0, &mut h);
        assert_eq!(h, [1.0, 2.0]);
        assert!(apply_steering(&field, &[], 4.0).is_empty());
    }

    #[test]
    fn saliency_examples() {
        assert_eq!(saliency(&[0.5, 0.2], &[0.0, 0.0]), 0.0);
        assert_eq!(saliency(&[0.5, 0.2, 0.3], &[-2.0, 0.0, 0.0]), 1.0);

        let (w, input) = setup(5);
        let loss = LossSpec::single(input.answer_position(), 3);
        let imp = head_importance(&w, &input, &loss).unwrap();
        let trace = forward(&w, &input, &HookSet::none()).unwrap();
        let grads = backward_attention(&w, &input, &HookSet::none(), &loss).unwrap();
        for s in imp.sites() {
            let a = trace.attention(s.layer, s.head);
            let g = grads.get(s);
            let mut naive = 0.0;
            for i in 0..a.nrows() {
                for j in 0..a.ncols() {
                    naive += (a[[i, j]] * g[[i, j]]).abs();
                }
            }
            assert!((imp.get(s) - naive).abs() < 1e-10);
        }
    }

    fn table(values: Vec<f64>, layers: usize, heads: usize) -> HeadImportance {
        HeadImportance {
            num_layers: layers,
            num_heads: heads,
            values,
            loss: 0.0,
        }
    }

    #[test]
    fn head_selection_counts_and_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..50 {
            let imp = table((0..32).map(|_| rng.gen_range(0.0..1.0)).collect(), 4, 8);
            assert_eq!(select_heads(&imp, 1.0).unwrap().len(), 32);
            let eight = select_heads(&imp, 0.25).unwrap();
            assert_eq!(eight.len(), 8);
            let mut sorted: Vec<usize> = (0..32).collect();
            sorted.sort_by(|&a, &b| imp.values[b].partial_cmp(&imp.values[a]).unwrap());
            let oracle: Vec<HeadSite> = sorted[..8].iter().map(|&i| HeadSite::new(i / 8, i % 8)).collect();
            assert_eq!(eight, oracle);
            let small: BTreeSet<_> = select_heads(&imp, 0.125).unwrap().into_iter().collect();
            assert!(small.is_subset(&eight.iter().copied().collect()));
        }
        assert_eq!(select_heads(&table(vec![1.0; 4], 2, 2), 0.01).unwrap().len(), 1);
        assert!(select_heads(&table(vec![1.0; 4], 2, 2), 0.0).is_err());
    }

    #[test]
    fn pipeline_runs_and_no_ops_match_baseline() {
        let (w, input) = setup(11);
        let baseline = greedy_decode(&w, &input, &HookSet::none(), 3).unwrap();
        let params = VpfcParams {
            localization_heads: 2,
            ..VpfcParams::default()
        };
        let (out, record) = vpfc_pipeline(&w, &input, &params, 3).unwrap();
        assert_eq!(record.hcvr_cells.len(), 4);
        assert_eq!(record.selected_heads.len(), 2);
        assert_eq!(record.target_cells.len(), 4);
        assert_eq!(record.output_tokens, out.tokens);
        assert!(record.to_json().unwrap().contains("delta_norms"));

        for p in [
            VpfcParams {
                alpha_steer: 0.0,
                ..params.clone()
            },
            VpfcParams {
                probe_factor: 0.0,
                ..params.clone()
            },
        ] {
            let (o, _) = vpfc_pipeline(&w, &input, &p, 3).unwrap();
            assert_eq!(o, baseline);
        }
        let off = VpfcParams {
            centroid_mode: CentroidMode::Off,
            ..params
        };
        let (_, rec) = vpfc_pipeline(&w, &input, &off, 1).unwrap();
        assert!(rec.region.is_none());
        assert_eq!(rec.target_cells, rec.hcvr_cells);
    }

    #[test]
    fn stage_errors_name_the_stage() {
        let (w, input) = setup(2);
        let bad = VpfcParams {
            gamma: 2.0,
            ..VpfcParams::default()
        };
        assert!(vpfc_pipeline(&w, &input, &bad, 1).is_err());
        let err = vpfc_pipeline(&w, &input, &VpfcParams::default(), 30).unwrap_err();
        assert!(err.to_string().contains("decode"), "{err}");
    }
}
