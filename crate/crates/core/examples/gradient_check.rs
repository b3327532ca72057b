//! Attention gradients from the reverse pass against central differences.
//!
//! `cargo run --release --example gradient_check`

use std::sync::Arc;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vpfc_lab::model::{
    backward_attention, forward, log_softmax, AttentionEdit, HeadSite, HookScope, HookSet, LossSpec, ModelConfig,
    ModelWeights, PositionRange, PromptInput, VisualInput,
};
use vpfc_lab::tokens;

/// Adds `eps` to one post-softmax weight.
struct Nudge {
    row: usize,
    col: usize,
    eps: f64,
}

impl AttentionEdit for Nudge {
    fn apply(&self, _: HeadSite, row: usize, _: &[f64], w: &mut [f64]) {
        if row == self.row {
            w[self.col] += self.eps;
        }
    }

    fn backward(&self, _: HeadSite, _: usize, _: &[f64], _: &[f64], g: &[f64], _: &mut [f64], gw: &mut [f64]) {
        for (o, v) in gw.iter_mut().zip(g) {
            *o += v;
        }
    }
}

fn main() {
    let cfg = ModelConfig {
        num_layers: 2,
        num_heads: 2,
        model_dim: 16,
        ..ModelConfig::default()
    };
    let w = ModelWeights::init(&cfg).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let emb = Array2::from_shape_fn((cfg.num_visual(), cfg.model_dim), |_| rng.gen_range(-1.0..1.0));
    let input = PromptInput::new(
        VisualInput::new(cfg.grid_side, emb).unwrap(),
        tokens::question_prompt(3),
    );
    let last = input.answer_position();
    let loss = LossSpec::single(last, tokens::NO);
    let grads = backward_attention(&w, &input, &HookSet::none(), &loss).unwrap();

    let nll = |site: HeadSite, row: usize, col: usize, eps: f64| {
        let scope = HookScope::new(Some([site].into()), PositionRange::Only([row].into()));
        let mut hooks = HookSet::none().with_attention(scope, Arc::new(Nudge { row, col, eps }));
        hooks.renormalize = false;
        let t = forward(&w, &input, &hooks).unwrap();
        -log_softmax(&t.next_token_logits().to_vec())[tokens::NO]
    };

    println!(
        "{:>6} {:>4} {:>4} {:>14} {:>14} {:>9}",
        "site", "row", "col", "analytic", "numeric", "rel err"
    );
    let eps = 1e-6;
    let mut worst: f64 = 0.0;
    for _ in 0..12 {
        let site = HeadSite::new(rng.gen_range(0..2), rng.gen_range(0..2));
        let row = if site.layer == 1 {
            last
        } else {
            rng.gen_range(cfg.num_visual()..=last)
        };
        let col = rng.gen_range(0..=row);
        let an = grads.get(site)[[row, col]];
        let fd = (nll(site, row, col, eps) - nll(site, row, col, -eps)) / (2.0 * eps);
        let rel = (an - fd).abs() / an.abs().max(fd.abs()).max(1e-6);
        worst = worst.max(rel);
        println!(
            "{:>6} {row:>4} {col:>4} {an:>14.6e} {fd:>14.6e} {rel:>9.1e}",
            site.to_string()
        );
    }
    println!("max relative error {worst:.2e}");
}
