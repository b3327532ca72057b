use ndarray::{s, Array1, Array2, ArrayView1};
use serde::{Deserialize, Serialize};

use super::hooks::{HeadSite, HookSet};
use super::math::{gelu, layer_norm, softmax, NormCache};
use super::ModelWeights;
use crate::error::{LabError, Result};
use crate::tokens::TokenId;

/// `G×G` grid of `d`-dimensional visual embeddings, row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VisualInput {
    pub grid_side: usize,
    pub embeddings: Array2<f64>,
}

impl VisualInput {
    pub fn new(grid_side: usize, embeddings: Array2<f64>) -> Result<Self> {
        if embeddings.nrows() != grid_side * grid_side {
            return Err(LabError::config(format!(
                "visual grid {grid_side}x{grid_side} needs {} rows, got {}",
                grid_side * grid_side,
                embeddings.nrows()
            )));
        }
        Ok(Self { grid_side, embeddings })
    }

    pub fn num_tokens(&self) -> usize {
        self.embeddings.nrows()
    }

    pub fn dim(&self) -> usize {
        self.embeddings.ncols()
    }
}

/// Visual grid plus text prompt.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptInput {
    pub visual: VisualInput,
    pub text: Vec<TokenId>,
    /// Index into `text` of the queried object word, when there is one.
    pub query_object_pos: Option<usize>,
    /// Visual tokens marked `false` are hidden from every other position.
    pub visual_mask: Option<Vec<bool>>,
}

impl PromptInput {
    pub fn new(visual: VisualInput, text: Vec<TokenId>) -> Self {
        Self {
            visual,
            text,
            query_object_pos: None,
            visual_mask: None,
        }
    }

    pub fn with_query_object(mut self, text_index: usize) -> Self {
        self.query_object_pos = Some(text_index);
        self
    }

    pub fn num_visual(&self) -> usize {
        self.visual.num_tokens()
    }

    /// Absolute position of the final prompt token, whose next-token
    /// distribution answers the prompt.
    pub fn answer_position(&self) -> usize {
        self.num_visual() + self.text.len() - 1
    }

    /// Absolute position of the object word, falling back to the final prompt token.
    pub fn query_position(&self) -> usize {
        match self.query_object_pos {
            Some(i) => self.num_visual() + i,
            None => self.answer_position(),
        }
    }

    pub(crate) fn validate(&self, weights: &ModelWeights) -> Result<()> {
        let cfg = &weights.config;
        if self.visual.grid_side != cfg.grid_side || self.visual.dim() != cfg.model_dim {
            return Err(LabError::config(format!(
                "visual input {}x{} of dim {} does not match model grid {} dim {}",
                self.visual.grid_side,
                self.visual.grid_side,
                self.visual.dim(),
                cfg.grid_side,
                cfg.model_dim
            )));
        }
        if self.text.is_empty() {
            return Err(LabError::config("prompt text is empty"));
        }
        if let Some(&t) = self.text.iter().find(|&&t| t >= cfg.vocab_size) {
            return Err(LabError::config(format!(
                "token {t} outside vocabulary of {}",
                cfg.vocab_size
            )));
        }
        if let Some(i) = self.query_object_pos {
            if i >= self.text.len() {
                return Err(LabError::config(format!("query object index {i} outside prompt")));
            }
        }
        if let Some(mask) = &self.visual_mask {
            if mask.len() != self.num_visual() {
                return Err(LabError::config("visual mask length does not match grid"));
            }
        }
        if self.visual.embeddings.iter().any(|v| !v.is_finite()) {
            return Err(LabError::config("visual embeddings contain non-finite values"));
        }
        Ok(())
    }
}

/// Where each kind of token sits in a traced sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenLayout {
    pub num_visual: usize,
    pub prompt_len: usize,
    pub generated_len: usize,
}

impl TokenLayout {
    pub fn seq_len(&self) -> usize {
        self.num_visual + self.prompt_len + self.generated_len
    }

    pub fn answer_position(&self) -> usize {
        self.num_visual + self.prompt_len - 1
    }
}

/// Everything observable from one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    pub num_layers: usize,
    pub num_heads: usize,
    /// Post-edit attention maps `A_{l,h}` (`T×T`), indexed `l * H + h`.
    pub attention: Vec<Array2<f64>>,
    /// Per-head states `h_{l,h}` (`T×d/H`) as they enter the output projection.
    pub head_states: Vec<Array2<f64>>,
    /// Next-token logits for every text position, row `p - num_visual`.
    pub logits: Array2<f64>,
    pub layout: TokenLayout,
}

impl ForwardTrace {
    pub fn attention(&self, layer: usize, head: usize) -> &Array2<f64> {
        &self.attention[layer * self.num_heads + head]
    }

    pub fn head_state(&self, layer: usize, head: usize, pos: usize) -> ArrayView1<'_, f64> {
        self.head_states[layer * self.num_heads + head].row(pos)
    }

    pub fn seq_len(&self) -> usize {
        self.layout.seq_len()
    }

    /// Logits predicting the token after absolute position `pos`.
    pub fn logits_at(&self, pos: usize) -> Option<ArrayView1<'_, f64>> {
        pos.checked_sub(self.layout.num_visual)
            .filter(|&r| r < self.logits.nrows())
            .map(|r| self.logits.row(r))
    }

    pub fn distribution_at(&self, pos: usize) -> Option<Vec<f64>> {
        self.logits_at(pos).map(|l| softmax(&l.to_vec()))
    }

    pub fn next_token_logits(&self) -> ArrayView1<'_, f64> {
        self.logits.row(self.logits.nrows() - 1)
    }

    pub fn sites(&self) -> impl Iterator<Item = HeadSite> + '_ {
        (0..self.num_layers).flat_map(move |l| (0..self.num_heads).map(move |h| HeadSite::new(l, h)))
    }
}

/// Internal sequence description; supports several text segments sharing
/// one visual prefix (used to pack training examples).
pub(crate) struct Sequence<'a> {
    pub visual: &'a Array2<f64>,
    pub visual_mask: Option<&'a [bool]>,
    pub tokens: Vec<TokenId>,
    pub segments: Vec<u32>,
    pub positions: Vec<usize>,
    pub prompt_len: usize,
}

impl<'a> Sequence<'a> {
    pub fn from_prompt(input: &'a PromptInput, generated: &[TokenId]) -> Self {
        let n_vis = input.num_visual();
        let mut tokens = input.text.clone();
        tokens.extend_from_slice(generated);
        let positions = (0..tokens.len()).map(|i| n_vis + i).collect();
        Self {
            visual: &input.visual.embeddings,
            visual_mask: input.visual_mask.as_deref(),
            segments: vec![0; tokens.len()],
            tokens,
            positions,
            prompt_len: input.text.len(),
        }
    }

    pub fn num_visual(&self) -> usize {
        self.visual.nrows()
    }

    pub fn len(&self) -> usize {
        self.num_visual() + self.tokens.len()
    }

    /// Positions each query row may attend to, ascending.
    pub fn visibility(&self) -> Vec<Vec<usize>> {
        let n_vis = self.num_visual();
        let keep = |j: usize| self.visual_mask.is_none_or(|m| m[j]);
        (0..self.len())
            .map(|i| {
                if i < n_vis {
                    (0..=i).filter(|&j| j == i || keep(j)).collect()
                } else {
                    let seg = self.segments[i - n_vis];
                    (0..n_vis)
                        .filter(|&j| keep(j))
                        .chain((n_vis..=i).filter(|&j| self.segments[j - n_vis] == seg))
                        .collect()
                }
            })
            .collect()
    }
}

pub(crate) struct LayerCache {
    pub ln1: NormCache,
    pub y1: Array2<f64>,
    pub q: Array2<f64>,
    pub k: Array2<f64>,
    pub v: Array2<f64>,
    /// Pre-softmax scores, kept only when an attention edit is active.
    pub scores: Option<Vec<Array2<f64>>>,
    /// Softmax weights before any edit, per head.
    pub softmax: Vec<Array2<f64>>,
    /// Row sums used for renormalisation, per head.
    pub row_sums: Vec<Array1<f64>>,
    pub concat: Array2<f64>,
    pub ln2: NormCache,
    pub y2: Array2<f64>,
    pub pre_act: Array2<f64>,
    pub act: Array2<f64>,
}

pub(crate) struct ForwardCache {
    pub visibility: Vec<Vec<usize>>,
    pub layers: Vec<LayerCache>,
    pub lnf: NormCache,
}

/// Runs the decoder over `input` with the given hooks.
pub fn forward(weights: &ModelWeights, input: &PromptInput, hooks: &HookSet) -> Result<ForwardTrace> {
    input.validate(weights)?;
    let seq = Sequence::from_prompt(input, &[]);
    forward_cached(weights, &seq, hooks).map(|(t, _)| t)
}

pub(crate) fn forward_cached(
    weights: &ModelWeights,
    seq: &Sequence<'_>,
    hooks: &HookSet,
) -> Result<(ForwardTrace, ForwardCache)> {
    let cfg = &weights.config;
    let d = cfg.model_dim;
    let n_heads = cfg.num_heads;
    let dh = cfg.head_dim();
    let n_vis = seq.num_visual();
    let t_len = seq.len();
    let max_pos = seq
        .positions
        .iter()
        .copied()
        .max()
        .unwrap_or(0)
        .max(n_vis.saturating_sub(1));
    if max_pos >= cfg.max_seq_len {
        return Err(LabError::config(format!(
            "sequence reaches position {max_pos}, beyond max_seq_len {}",
            cfg.max_seq_len
        )));
    }
    hooks.check_bounds(cfg.num_layers, n_heads, t_len)?;

    let mut x = Array2::<f64>::zeros((t_len, d));
    x.slice_mut(s![..n_vis, ..])
        .assign(&seq.visual.dot(&weights.visual_proj));
    for i in 0..n_vis {
        let mut row = x.row_mut(i);
        row += &weights.pos_embed.row(i);
    }
    for (k, (&tok, &pos)) in seq.tokens.iter().zip(&seq.positions).enumerate() {
        let mut row = x.row_mut(n_vis + k);
        row.assign(&weights.token_embed.row(tok));
        row += &weights.pos_embed.row(pos);
    }

    let visibility = seq.visibility();
    let scale = 1.0 / (dh as f64).sqrt();
    let mut layer_caches = Vec::with_capacity(cfg.num_layers);
    let mut attention_out = Vec::with_capacity(cfg.total_heads());
    let mut states_out = Vec::with_capacity(cfg.total_heads());

    for (l, lw) in weights.layers.iter().enumerate() {
        let (y1, ln1) = layer_norm(&x, &lw.ln1_gain, &lw.ln1_bias);
        let q = y1.dot(&lw.wq);
        let k = y1.dot(&lw.wk);
        let v = y1.dot(&lw.wv);
        let keep_scores = hooks.attention_edit.is_some();
        let mut scores_all = keep_scores.then(Vec::new);
        let mut softmax_all = Vec::with_capacity(n_heads);
        let mut sums_all = Vec::with_capacity(n_heads);
        let mut concat = Array2::<f64>::zeros((t_len, d));

        for h in 0..n_heads {
            let site = HeadSite::new(l, h);
            let c0 = h * dh;
            let mut scores = Array2::from_elem((t_len, t_len), f64::NEG_INFINITY);
            let mut w = Array2::<f64>::zeros((t_len, t_len));
            let mut a = Array2::<f64>::zeros((t_len, t_len));
            let mut sums = Array1::<f64>::zeros(t_len);
            let qs = q.as_slice().expect("standard layout");
            let ks = k.as_slice().expect("standard layout");
            let mut row_scores = vec![f64::NEG_INFINITY; t_len];
            let mut edited = vec![0.0; t_len];
            let w_s = w.as_slice_mut().expect("standard layout");
            let a_s = a.as_slice_mut().expect("standard layout");
            for i in 0..t_len {
                let vis = &visibility[i];
                row_scores.iter_mut().for_each(|s| *s = f64::NEG_INFINITY);
                let qi = &qs[i * d + c0..i * d + c0 + dh];
                let mut max = f64::NEG_INFINITY;
                for &j in vis {
                    let kj = &ks[j * d + c0..j * d + c0 + dh];
                    let acc: f64 = qi.iter().zip(kj).map(|(a, b)| a * b).sum();
                    let sc = acc * scale;
                    row_scores[j] = sc;
                    if sc > max {
                        max = sc;
                    }
                }
                let wrow = &mut w_s[i * t_len..(i + 1) * t_len];
                let mut total = 0.0;
                for &j in vis {
                    let e = (row_scores[j] - max).exp();
                    wrow[j] = e;
                    total += e;
                }
                for &j in vis {
                    wrow[j] /= total;
                }
                edited.copy_from_slice(wrow);
                if let Some((scope, edit)) = &hooks.attention_edit {
                    if scope.covers(l, h, i) {
                        edit.apply(site, i, &row_scores, &mut edited);
                    }
                }
                let sum: f64 = vis.iter().map(|&j| edited[j]).sum();
                sums[i] = sum;
                let arow = &mut a_s[i * t_len..(i + 1) * t_len];
                if hooks.renormalize {
                    for &j in vis {
                        arow[j] = edited[j] / sum;
                    }
                } else {
                    for &j in vis {
                        arow[j] = edited[j];
                    }
                }
                if vis.iter().any(|&j| !arow[j].is_finite()) {
                    return Err(LabError::numeric(
                        l,
                        Some(h),
                        format!("non-finite attention in row {i}"),
                    ));
                }
                if keep_scores {
                    scores.row_mut(i).assign(&ArrayView1::from(&row_scores));
                }
            }

            let vh = v.slice(s![.., c0..c0 + dh]);
            let mut hs = a.dot(&vh);
            if let Some((scope, edit)) = &hooks.state_edit {
                for pos in 0..t_len {
                    if scope.covers(l, h, pos) {
                        let mut row = hs.row_mut(pos);
                        edit.apply(site, pos, row.as_slice_mut().expect("row slice"));
                    }
                }
            }
            if hs.iter().any(|v| !v.is_finite()) {
                return Err(LabError::numeric(l, Some(h), "non-finite head state"));
            }
            concat.slice_mut(s![.., c0..c0 + dh]).assign(&hs);
            states_out.push(hs);
            attention_out.push(a);
            softmax_all.push(w);
            sums_all.push(sums);
            if let Some(all) = scores_all.as_mut() {
                all.push(scores);
            }
        }

        let x_mid = &x + &concat.dot(&lw.wo);
        let (y2, ln2) = layer_norm(&x_mid, &lw.ln2_gain, &lw.ln2_bias);
        let pre_act = y2.dot(&lw.w1) + &lw.b1;
        let act = pre_act.mapv(gelu);
        x = &x_mid + &(act.dot(&lw.w2) + &lw.b2);
        if x.iter().any(|v| !v.is_finite()) {
            return Err(LabError::numeric(l, None, "non-finite residual stream"));
        }
        layer_caches.push(LayerCache {
            ln1,
            y1,
            q,
            k,
            v,
            scores: scores_all,
            softmax: softmax_all,
            row_sums: sums_all,
            concat,
            ln2,
            y2,
            pre_act,
            act,
        });
    }

    let text = x.slice(s![n_vis.., ..]).to_owned();
    let (yf, lnf) = layer_norm(&text, &weights.lnf_gain, &weights.lnf_bias);
    let logits = yf.dot(&weights.unembed);
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(LabError::numeric(cfg.num_layers, None, "non-finite logits"));
    }

    let layout = TokenLayout {
        num_visual: n_vis,
        prompt_len: seq.prompt_len,
        generated_len: seq.tokens.len() - seq.prompt_len,
    };
    let trace = ForwardTrace {
        num_layers: cfg.num_layers,
        num_heads: n_heads,
        attention: attention_out,
        head_states: states_out,
        logits,
        layout,
    };
    let cache = ForwardCache {
        visibility,
        layers: layer_caches,
        lnf,
    };
    Ok((trace, cache))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::hooks::{AttentionEdit, HookScope, PositionRange, StateEdit};
    use crate::model::ModelConfig;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::sync::Arc;

    fn cfg(g: usize) -> ModelConfig {
        ModelConfig {
            num_layers: 2,
            num_heads: 2,
            model_dim: 8,
            grid_side: g,
            vocab_size: 12,
            max_seq_len: g * g + 8,
            seed: 3,
        }
    }

    fn input(cfg: &ModelConfig, text: Vec<usize>, seed: u64) -> PromptInput {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = cfg.grid_side * cfg.grid_side;
        let emb = Array2::from_shape_fn((n, cfg.model_dim), |_| rng.gen_range(-1.0..1.0));
        PromptInput::new(VisualInput::new(cfg.grid_side, emb).unwrap(), text)
    }

    struct Identity;
    impl AttentionEdit for Identity {
        fn apply(&self, _: HeadSite, _: usize, _: &[f64], _: &mut [f64]) {}
        fn backward(&self, _: HeadSite, _: usize, _: &[f64], _: &[f64], g: &[f64], _: &mut [f64], gw: &mut [f64]) {
            gw.copy_from_slice(g);
        }
    }
    impl StateEdit for Identity {
        fn apply(&self, _: HeadSite, _: usize, _: &mut [f64]) {}
    }

    #[test]
    fn zero_weights_give_uniform_attention() {
        let c = ModelConfig {
            num_layers: 1,
            num_heads: 1,
            ..cfg(2)
        };
        let w = ModelWeights::zeros(&c).unwrap();
        let inp = input(&c, vec![1, 2, 3], 0);
        let t = forward(&w, &inp, &HookSet::none()).unwrap();
        let a = t.attention(0, 0);
        for i in 0..t.seq_len() {
            for j in 0..=i {
                assert!((a[[i, j]] - 1.0 / (i + 1) as f64).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn forward_is_deterministic() {
        let c = cfg(4);
        let w = ModelWeights::init(&c).unwrap();
        let inp = input(&c, vec![0, 7, 1], 9);
        let a = forward(&w, &inp, &HookSet::none()).unwrap();
        let b = forward(&w, &inp, &HookSet::none()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn rows_match_independent_softmax_and_are_causal() {
        let c = ModelConfig {
            model_dim: 16,
            num_heads: 4,
            ..cfg(4)
        };
        let w = ModelWeights::init(&c).unwrap();
        let inp = input(&c, vec![0, 7, 1, 4, 5], 2);
        let t = forward(&w, &inp, &HookSet::none()).unwrap();
        for a in &t.attention {
            for i in 0..t.seq_len() {
                let sum: f64 = a.row(i).iter().sum();
                assert!((sum - 1.0).abs() < 1e-9);
                for j in i + 1..t.seq_len() {
                    assert_eq!(a[[i, j]], 0.0);
                }
            }
        }
        // Layer-0 head 0 recomputed from scratch.
        let x0: Vec<Vec<f64>> = (0..t.seq_len())
            .map(|i| {
                let base: Vec<f64> = if i < 16 {
                    (0..16)
                        .map(|k| {
                            (0..16)
                                .map(|m| inp.visual.embeddings[[i, m]] * w.visual_proj[[m, k]])
                                .sum()
                        })
                        .collect()
                } else {
                    w.token_embed.row(inp.text[i - 16]).to_vec()
                };
                base.iter().zip(w.pos_embed.row(i)).map(|(a, b)| a + b).collect()
            })
            .collect();
        let lw = &w.layers[0];
        let norm = |v: &Vec<f64>| -> Vec<f64> {
            let m = v.iter().sum::<f64>() / v.len() as f64;
            let var = v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / v.len() as f64;
            v.iter()
                .enumerate()
                .map(|(k, x)| (x - m) / (var + 1e-5).sqrt() * lw.ln1_gain[k] + lw.ln1_bias[k])
                .collect()
        };
        let y: Vec<Vec<f64>> = x0.iter().map(norm).collect();
        let proj = |v: &Vec<f64>, m: &Array2<f64>, col: usize| -> f64 { (0..16).map(|k| v[k] * m[[k, col]]).sum() };
        for i in 0..t.seq_len() {
            let scores: Vec<f64> = (0..=i)
                .map(|j| {
                    (0..4)
                        .map(|c| proj(&y[i], &lw.wq, c) * proj(&y[j], &lw.wk, c))
                        .sum::<f64>()
                        / 2.0
                })
                .collect();
            let m = scores.iter().cloned().fold(f64::MIN, f64::max);
            let z: f64 = scores.iter().map(|s| (s - m).exp()).sum();
            for j in 0..=i {
                let p = (scores[j] - m).exp() / z;
                assert!((p - t.attention(0, 0)[[i, j]]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn identity_hooks_are_neutral() {
        let c = cfg(3);
        let w = ModelWeights::init(&c).unwrap();
        let inp = input(&c, vec![0, 8, 1], 4);
        let plain = forward(&w, &inp, &HookSet::none()).unwrap();
        let hooks = HookSet::none()
            .with_attention(HookScope::everywhere(), Arc::new(Identity))
            .with_state(HookScope::everywhere(), Arc::new(Identity));
        assert_eq!(plain, forward(&w, &inp, &hooks).unwrap());
    }

    #[test]
    fn shape_mismatch_is_config_error() {
        let c = cfg(3);
        let w = ModelWeights::init(&c).unwrap();
        let other = ModelConfig {
            grid_side: 2,
            ..c.clone()
        };
        let inp = input(&other, vec![0], 0);
        assert!(matches!(forward(&w, &inp, &HookSet::none()), Err(LabError::Config(_))));
        let bad_token = input(&c, vec![99], 0);
        assert!(matches!(
            forward(&w, &bad_token, &HookSet::none()),
            Err(LabError::Config(_))
        ));
    }

    #[test]
    fn out_of_range_hook_scope_rejected() {
        let c = cfg(3);
        let w = ModelWeights::init(&c).unwrap();
        let inp = input(&c, vec![0, 8, 1], 4);
        let scope = HookScope::new(Some([HeadSite::new(5, 0)].into()), PositionRange::All);
        let hooks = HookSet::none().with_state(scope, Arc::new(Identity));
        assert!(matches!(forward(&w, &inp, &hooks), Err(LabError::Config(_))));
    }

    #[test]
    fn non_finite_weights_reported_with_location() {
        let c = cfg(3);
        let mut w = ModelWeights::init(&c).unwrap();
        w.layers[1].wv[[0, 0]] = f64::INFINITY;
        let inp = input(&c, vec![0, 8, 1], 4);
        match forward(&w, &inp, &HookSet::none()) {
            Err(LabError::Numeric { layer, .. }) => assert_eq!(layer, 1),
            other => panic!("expected numeric error, got {other:?}"),
        }
    }

    #[test]
    fn masked_visual_tokens_receive_no_attention() {
        let c = cfg(3);
        let w = ModelWeights::init(&c).unwrap();
        let mut inp = input(&c, vec![0, 8, 1], 4);
        let mask: Vec<bool> = (0..9).map(|i| i % 2 == 0).collect();
        inp.visual_mask = Some(mask.clone());
        let t = forward(&w, &inp, &HookSet::none()).unwrap();
        for a in &t.attention {
            for i in 0..t.seq_len() {
                for (j, keep) in mask.iter().enumerate() {
                    if !keep && i != j {
                        assert_eq!(a[[i, j]], 0.0);
                    }
                }
            }
        }
    }

    #[test]
    fn packed_segments_match_separate_passes() {
        let c = cfg(3);
        let w = ModelWeights::init(&c).unwrap();
        let a = input(&c, vec![0, 8, 1], 4);
        let b = PromptInput {
            text: vec![4, 9, 5, 10],
            ..a.clone()
        };
        let ta = forward(&w, &a, &HookSet::none()).unwrap();
        let tb = forward(&w, &b, &HookSet::none()).unwrap();
        let mut tokens = a.text.clone();
        tokens.extend(&b.text);
        let seq = Sequence {
            visual: &a.visual.embeddings,
            visual_mask: None,
            segments: vec![0, 0, 0, 1, 1, 1, 1],
            positions: vec![9, 10, 11, 9, 10, 11, 12],
            prompt_len: 7,
            tokens,
        };
        let (tp, _) = forward_cached(&w, &seq, &HookSet::none()).unwrap();
        for r in 0..3 {
            for (x, y) in tp.logits.row(r).iter().zip(ta.logits.row(r)) {
                assert!((x - y).abs() < 1e-12);
            }
        }
        for r in 0..4 {
            for (x, y) in tp.logits.row(3 + r).iter().zip(tb.logits.row(r)) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }
}
