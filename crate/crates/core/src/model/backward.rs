//! Reverse-mode gradients of a next-token NLL loss.

use ndarray::{s, Array1, Array2, Axis};
use serde::{Deserialize, Serialize};

use super::forward::{forward_cached, ForwardCache, ForwardTrace, PromptInput, Sequence};
use super::hooks::{HeadSite, HookSet};
use super::math::{gelu_grad, layer_norm_backward, log_softmax, softmax, softmax_vjp};
use super::ModelWeights;
use crate::error::{LabError, Result};
use crate::tokens::TokenId;

/// Probabilities below this are clamped before taking the log.
pub const NLL_EPSILON: f64 = 1e-300;

/// A scalar loss value with a note on what it measures.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossValue {
    pub value: f64,
    pub target: String,
    /// Set when `p(target)` underflowed and was clamped to [`NLL_EPSILON`].
    pub clamped: bool,
}

/// One weighted `−log p(token | prefix up to position)` term.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossTarget {
    pub position: usize,
    pub token: TokenId,
    pub weight: f64,
}

/// Sum of weighted NLL terms.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossSpec {
    pub targets: Vec<LossTarget>,
}

impl LossSpec {
    pub fn single(position: usize, token: TokenId) -> Self {
        Self {
            targets: vec![LossTarget {
                position,
                token,
                weight: 1.0,
            }],
        }
    }

    pub fn scaled(mut self, factor: f64) -> Self {
        self.targets.iter_mut().for_each(|t| t.weight *= factor);
        self
    }
}

/// `−log p(target)` read from the trace's distribution at `position`.
pub fn nll_loss(trace: &ForwardTrace, target: TokenId, position: usize) -> Result<LossValue> {
    let logits = trace
        .logits_at(position)
        .ok_or_else(|| LabError::config(format!("no logits at position {position}")))?;
    if target >= logits.len() {
        return Err(LabError::config(format!(
            "target {target} outside vocabulary of {}",
            logits.len()
        )));
    }
    let lp = log_softmax(&logits.to_vec())[target];
    let (value, clamped) = if lp.exp() < NLL_EPSILON || !lp.is_finite() {
        (-NLL_EPSILON.ln(), true)
    } else {
        (-lp, false)
    };
    Ok(LossValue {
        value: value.max(0.0),
        target: format!("token {target} after position {position}"),
        clamped,
    })
}

/// `∂L/∂A_{l,h}` for every head, indexed `l * H + h`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionGrads {
    pub num_heads: usize,
    pub grads: Vec<Array2<f64>>,
    pub loss: f64,
}

impl AttentionGrads {
    pub fn get(&self, site: HeadSite) -> &Array2<f64> {
        &self.grads[site.layer * self.num_heads + site.head]
    }
}

/// Result of a full reverse pass.
pub struct Gradients {
    pub loss: f64,
    pub weights: Option<ModelWeights>,
    pub attention: Option<Vec<Array2<f64>>>,
}

/// Gradient of the loss with respect to each post-edit attention map, as it
/// enters value mixing. Entries at masked positions are zero.
pub fn backward_attention(
    weights: &ModelWeights,
    input: &PromptInput,
    hooks: &HookSet,
    loss: &LossSpec,
) -> Result<AttentionGrads> {
    input.validate(weights)?;
    let seq = Sequence::from_prompt(input, &[]);
    let (trace, cache) = forward_cached(weights, &seq, hooks)?;
    let grads = backward(weights, &seq, &trace, &cache, hooks, loss, false, true)?;
    Ok(AttentionGrads {
        num_heads: weights.config.num_heads,
        grads: grads.attention.expect("requested"),
        loss: grads.loss,
    })
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn backward(
    weights: &ModelWeights,
    seq: &Sequence<'_>,
    trace: &ForwardTrace,
    cache: &ForwardCache,
    hooks: &HookSet,
    loss: &LossSpec,
    want_weights: bool,
    want_attention: bool,
) -> Result<Gradients> {
    let cfg = &weights.config;
    let d = cfg.model_dim;
    let n_heads = cfg.num_heads;
    let dh = cfg.head_dim();
    let n_vis = seq.num_visual();
    let t_len = seq.len();
    let scale = 1.0 / (dh as f64).sqrt();

    let mut gw = if want_weights {
        Some(ModelWeights::zeros(cfg)?)
    } else {
        None
    };

    // Output head.
    let mut dlogits = Array2::<f64>::zeros(trace.logits.raw_dim());
    let mut total = 0.0;
    for t in &loss.targets {
        if t.position < n_vis || t.position >= t_len {
            return Err(LabError::config(format!(
                "loss position {} is not a text position",
                t.position
            )));
        }
        if t.token >= cfg.vocab_size {
            return Err(LabError::config(format!("loss target {} outside vocabulary", t.token)));
        }
        let r = t.position - n_vis;
        let row = trace.logits.row(r).to_vec();
        let lp = log_softmax(&row);
        total += -t.weight * lp[t.token];
        let p = softmax(&row);
        let mut drow = dlogits.row_mut(r);
        for (k, pk) in p.iter().enumerate() {
            drow[k] += t.weight * pk;
        }
        drow[t.token] -= t.weight;
    }
    let yf = &cache.lnf.normed * &weights.lnf_gain + &weights.lnf_bias;
    let dyf = dlogits.dot(&weights.unembed.t());
    let mut dx = Array2::<f64>::zeros((t_len, d));
    {
        let (mut dg, mut db) = (Array1::zeros(d), Array1::zeros(d));
        let dtext = layer_norm_backward(&dyf, &cache.lnf, &weights.lnf_gain, &mut dg, &mut db);
        dx.slice_mut(s![n_vis.., ..]).assign(&dtext);
        if let Some(g) = gw.as_mut() {
            g.unembed += &yf.t().dot(&dlogits);
            g.lnf_gain += &dg;
            g.lnf_bias += &db;
        }
    }

    let mut attn_grads: Vec<Array2<f64>> = if want_attention {
        vec![Array2::zeros((0, 0)); cfg.total_heads()]
    } else {
        Vec::new()
    };

    for l in (0..cfg.num_layers).rev() {
        let lw = &weights.layers[l];
        let lc = &cache.layers[l];

        // Feed-forward block.
        let dpre = dx.dot(&lw.w2.t()) * &lc.pre_act.mapv(gelu_grad);
        let dy2 = dpre.dot(&lw.w1.t());
        let (mut dg2, mut db2n) = (Array1::zeros(d), Array1::zeros(d));
        let dx_ln2 = layer_norm_backward(&dy2, &lc.ln2, &lw.ln2_gain, &mut dg2, &mut db2n);
        if let Some(g) = gw.as_mut() {
            let gl = &mut g.layers[l];
            gl.w2 += &lc.act.t().dot(&dx);
            gl.b2 += &dx.sum_axis(Axis(0));
            gl.w1 += &lc.y2.t().dot(&dpre);
            gl.b1 += &dpre.sum_axis(Axis(0));
            gl.ln2_gain += &dg2;
            gl.ln2_bias += &db2n;
        }
        let dx_mid = dx + &dx_ln2;

        // Attention block.
        let dconcat = dx_mid.dot(&lw.wo.t());
        if let Some(g) = gw.as_mut() {
            g.layers[l].wo += &lc.concat.t().dot(&dx_mid);
        }
        let mut dq = Array2::<f64>::zeros((t_len, d));
        let mut dk = Array2::<f64>::zeros((t_len, d));
        let mut dv = Array2::<f64>::zeros((t_len, d));
        let qs = lc.q.as_slice().expect("standard layout");
        let ks = lc.k.as_slice().expect("standard layout");
        for h in 0..n_heads {
            let site = HeadSite::new(l, h);
            let c0 = h * dh;
            let a = &trace.attention[l * n_heads + h];
            let w = &lc.softmax[h];
            let dhs = dconcat.slice(s![.., c0..c0 + dh]);
            let vh = lc.v.slice(s![.., c0..c0 + dh]);
            dv.slice_mut(s![.., c0..c0 + dh]).assign(&a.t().dot(&dhs));

            let dhs_c: Vec<f64> = dhs.iter().copied().collect();
            let vh_c: Vec<f64> = vh.iter().copied().collect();
            let a_s = a.as_slice().expect("standard layout");
            let mut da = Array2::<f64>::zeros((t_len, t_len));
            let da_s = da.as_slice_mut().expect("standard layout");
            let dq_s = dq.as_slice_mut().expect("standard layout");
            let dk_s = dk.as_slice_mut().expect("standard layout");
            let mut de = vec![0.0; t_len];
            let mut dw = vec![0.0; t_len];
            let mut dsc = vec![0.0; t_len];
            for i in 0..t_len {
                let vis = &cache.visibility[i];
                let dhi = &dhs_c[i * dh..(i + 1) * dh];
                let da_row = &mut da_s[i * t_len..(i + 1) * t_len];
                let a_row = &a_s[i * t_len..(i + 1) * t_len];
                for &j in vis {
                    let vj = &vh_c[j * dh..(j + 1) * dh];
                    da_row[j] = dhi.iter().zip(vj).map(|(x, y)| x * y).sum();
                }
                de.iter_mut().for_each(|v| *v = 0.0);
                if hooks.renormalize {
                    let dot: f64 = vis.iter().map(|&j| da_row[j] * a_row[j]).sum();
                    let sum = lc.row_sums[h][i];
                    for &j in vis {
                        de[j] = (da_row[j] - dot) / sum;
                    }
                } else {
                    for &j in vis {
                        de[j] = da_row[j];
                    }
                }
                dw.iter_mut().for_each(|v| *v = 0.0);
                dsc.iter_mut().for_each(|v| *v = 0.0);
                let wrow = w.row(i);
                let wrow = wrow.as_slice().expect("row slice");
                match &hooks.attention_edit {
                    Some((scope, edit)) if scope.covers(l, h, i) => {
                        let scores = lc.scores.as_ref().expect("scores kept when editing")[h].row(i);
                        edit.backward(
                            site,
                            i,
                            scores.as_slice().expect("row slice"),
                            wrow,
                            &de,
                            &mut dsc,
                            &mut dw,
                        );
                    }
                    _ => dw.copy_from_slice(&de),
                }
                softmax_vjp(wrow, &dw, &mut dsc);
                let qi = &qs[i * d + c0..i * d + c0 + dh];
                for &j in vis {
                    let g = dsc[j] * scale;
                    if g == 0.0 {
                        continue;
                    }
                    let kj = &ks[j * d + c0..j * d + c0 + dh];
                    let dqi = &mut dq_s[i * d + c0..i * d + c0 + dh];
                    for (o, kv) in dqi.iter_mut().zip(kj) {
                        *o += g * kv;
                    }
                    let dkj = &mut dk_s[j * d + c0..j * d + c0 + dh];
                    for (o, qv) in dkj.iter_mut().zip(qi) {
                        *o += g * qv;
                    }
                }
            }
            if da.iter().any(|v| !v.is_finite()) {
                return Err(LabError::numeric(l, Some(h), "non-finite attention gradient"));
            }
            if want_attention {
                attn_grads[l * n_heads + h] = da;
            }
        }
        let dy1 = dq.dot(&lw.wq.t()) + dk.dot(&lw.wk.t()) + dv.dot(&lw.wv.t());
        let (mut dg1, mut db1n) = (Array1::zeros(d), Array1::zeros(d));
        let dx_ln1 = layer_norm_backward(&dy1, &lc.ln1, &lw.ln1_gain, &mut dg1, &mut db1n);
        if let Some(g) = gw.as_mut() {
            let gl = &mut g.layers[l];
            gl.wq += &lc.y1.t().dot(&dq);
            gl.wk += &lc.y1.t().dot(&dk);
            gl.wv += &lc.y1.t().dot(&dv);
            gl.ln1_gain += &dg1;
            gl.ln1_bias += &db1n;
        }
        dx = dx_mid + &dx_ln1;
        if dx.iter().any(|v| !v.is_finite()) {
            return Err(LabError::numeric(l, None, "non-finite residual gradient"));
        }
    }

    if let Some(g) = gw.as_mut() {
        let dvis = dx.slice(s![..n_vis, ..]);
        g.visual_proj += &seq.visual.t().dot(&dvis);
        for i in 0..n_vis {
            let mut row = g.pos_embed.row_mut(i);
            row += &dx.row(i);
        }
        for (k, (&tok, &pos)) in seq.tokens.iter().zip(&seq.positions).enumerate() {
            let drow = dx.row(n_vis + k);
            let mut trow = g.token_embed.row_mut(tok);
            trow += &drow;
            let mut prow = g.pos_embed.row_mut(pos);
            prow += &drow;
        }
    }

    Ok(Gradients {
        loss: total,
        weights: gw,
        attention: want_attention.then_some(attn_grads),
    })
}
