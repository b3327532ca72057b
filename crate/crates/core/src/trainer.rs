//! Plain-SGD training on synthetic scenes.
//!
//! Each scene becomes one packed sequence: the rendered visual grid followed
//! by several independent text segments (yes/no probes and one caption) that
//! all see the grid but not each other. Two knobs plant the failure modes
//! studied downstream:
//!
//! - `bias_knob` (κ): how often correlated pairs co-occur in training scenes,
//!   which teaches spurious "partner present" associations.
//! - `rare_fraction` (ρ): probability that a present single-cell object loses
//!   its yes-probe and its caption mention for one epoch, leaving the model
//!   under-confident about small objects.

use std::fmt::Write as _;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bench::{generate_scene, render_with_noise, scene_seed, Scene, World};
use crate::error::{LabError, Result};
use crate::model::{
    backward, forward_cached, HookSet, LossSpec, LossTarget, LossValue, ModelConfig, ModelWeights, Sequence,
};
use crate::tokens::{self, TokenId};

/// Everything that determines a training run besides the model shape.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSpec {
    pub num_scenes: usize,
    pub object_count: (usize, usize),
    pub bias_knob: f64,
    pub rare_fraction: f64,
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Present and absent probes per scene and epoch (each).
    pub questions_per_label: usize,
    /// Probability of writing a caption mention with the synonym token.
    pub synonym_rate: f64,
    /// Loss weight of caption tokens relative to probe answers.
    pub caption_weight: f64,
    pub optimizer: Optimizer,
    pub seed: u64,
}

/// Update rule applied once per batch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Optimizer {
    /// `θ ← θ − lr·g`.
    Sgd,
    /// Bias-corrected Adam.
    Adam { beta1: f64, beta2: f64, epsilon: f64 },
}

impl Optimizer {
    pub fn adam() -> Self {
        Optimizer::Adam {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

struct OptimizerState {
    rule: Optimizer,
    step: i32,
    m: Option<ModelWeights>,
    v: Option<ModelWeights>,
}

impl OptimizerState {
    fn new(rule: Optimizer, config: &ModelConfig) -> Result<Self> {
        let moments = matches!(rule, Optimizer::Adam { .. });
        Ok(Self {
            rule,
            step: 0,
            m: if moments {
                Some(ModelWeights::zeros(config)?)
            } else {
                None
            },
            v: if moments {
                Some(ModelWeights::zeros(config)?)
            } else {
                None
            },
        })
    }

    fn apply(&mut self, weights: &mut ModelWeights, grad: &ModelWeights, lr: f64) {
        self.step += 1;
        match self.rule {
            Optimizer::Sgd => weights.add_scaled(grad, -lr),
            Optimizer::Adam { beta1, beta2, epsilon } => {
                let c1 = 1.0 - beta1.powi(self.step);
                let c2 = 1.0 - beta2.powi(self.step);
                let m = self.m.as_mut().expect("adam state");
                let v = self.v.as_mut().expect("adam state");
                let g_all = grad.tensor_slices();
                for (((w, m), v), g) in weights
                    .tensors_mut()
                    .into_iter()
                    .zip(m.tensors_mut())
                    .zip(v.tensors_mut())
                    .zip(g_all)
                {
                    for i in 0..w.len() {
                        m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
                        v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
                        w[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + epsilon);
                    }
                }
            }
        }
    }
}

impl Default for TrainSpec {
    fn default() -> Self {
        Self {
            num_scenes: 300,
            object_count: (1, 3),
            bias_knob: 0.0,
            rare_fraction: 0.0,
            epochs: 30,
            learning_rate: 0.003,
            batch_size: 8,
            questions_per_label: 2,
            synonym_rate: 0.2,
            caption_weight: 0.5,
            optimizer: Optimizer::adam(),
            seed: 0,
        }
    }
}

impl TrainSpec {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("bias_knob", self.bias_knob),
            ("rare_fraction", self.rare_fraction),
            ("synonym_rate", self.synonym_rate),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(LabError::config(format!("{name} = {v} outside [0,1]")));
            }
        }
        if self.batch_size == 0 || self.num_scenes == 0 || self.questions_per_label == 0 {
            return Err(LabError::config(
                "batch_size, num_scenes and questions_per_label must be positive",
            ));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(LabError::config("learning_rate must be positive"));
        }
        if !(self.caption_weight.is_finite() && self.caption_weight >= 0.0) {
            return Err(LabError::config("caption_weight must be non-negative"));
        }
        Ok(())
    }

    /// Training scenes (ids from [`scene_seed`] under `seed`).
    pub fn scenes(&self, world: &World) -> Result<Vec<Scene>> {
        let spec = world.cooccurrence(self.bias_knob)?;
        (0..self.num_scenes)
            .map(|i| generate_scene(world, scene_seed(self.seed, i), &spec, self.object_count))
            .collect()
    }
}

/// A text segment and the index of its first supervised token.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub tokens: Vec<TokenId>,
    pub targets_from: usize,
    /// Caption segments take the caption loss weight.
    pub caption: bool,
}

impl Segment {
    /// `⟨Q⟩ obj ⟨?⟩ yes|no`, supervising the answer.
    pub fn question(object: usize, present: bool) -> Self {
        let mut tokens = tokens::question_prompt(object);
        tokens.push(if present { tokens::YES } else { tokens::NO });
        Self {
            targets_from: tokens.len() - 1,
            tokens,
            caption: false,
        }
    }

    /// `⟨DESCRIBE⟩ o₁ . o₂ . … ⟨EOS⟩`, supervising everything after the prompt.
    pub fn caption(mentions: &[TokenId]) -> Self {
        let mut tokens = tokens::caption_prompt();
        for &m in mentions {
            tokens.push(m);
            tokens.push(tokens::PERIOD);
        }
        tokens.push(tokens::EOS);
        Self {
            tokens,
            targets_from: 1,
            caption: true,
        }
    }
}

/// One packed training sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainExample {
    pub scene_id: u64,
    pub visual: Array2<f64>,
    pub segments: Vec<Segment>,
}

impl TrainExample {
    fn sequence(&self) -> Sequence<'_> {
        let n_vis = self.visual.nrows();
        let mut tokens = Vec::new();
        let mut segments = Vec::new();
        let mut positions = Vec::new();
        for (s, seg) in self.segments.iter().enumerate() {
            for (i, &t) in seg.tokens.iter().enumerate() {
                tokens.push(t);
                segments.push(s as u32);
                positions.push(n_vis + i);
            }
        }
        Sequence {
            visual: &self.visual,
            visual_mask: None,
            prompt_len: tokens.len(),
            tokens,
            segments,
            positions,
        }
    }

    /// Weighted loss terms at absolute sequence positions.
    fn targets(&self, caption_weight: f64) -> Vec<LossTarget> {
        let n_vis = self.visual.nrows();
        let mut out = Vec::new();
        let mut offset = n_vis;
        for seg in &self.segments {
            let weight = if seg.caption { caption_weight } else { 1.0 };
            for i in seg.targets_from..seg.tokens.len() {
                out.push(LossTarget {
                    position: offset + i - 1,
                    token: seg.tokens[i],
                    weight,
                });
            }
            offset += seg.tokens.len();
        }
        out
    }
}

fn mix(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Probes and caption for one scene in one epoch; noise and sampling are
/// seeded by (scene, epoch).
pub fn scene_example(world: &World, scene: &Scene, spec: &TrainSpec, epoch: usize) -> Result<TrainExample> {
    let seed = mix(scene.id, epoch as u64 + 1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let small = world.vocab.small_objects();
    let kept: Vec<usize> = scene
        .present
        .iter()
        .copied()
        .filter(|o| !(small.contains(o) && rng.gen::<f64>() < spec.rare_fraction))
        .collect();
    let absent: Vec<usize> = (0..world.num_objects()).filter(|o| !scene.contains(*o)).collect();
    let n = spec.questions_per_label;
    let mut segments = Vec::new();
    for &o in kept.choose_multiple(&mut rng, n) {
        segments.push(Segment::question(o, true));
    }
    for &o in absent.choose_multiple(&mut rng, n) {
        segments.push(Segment::question(o, false));
    }
    segments.shuffle(&mut rng);
    let mentions: Vec<TokenId> = kept
        .iter()
        .map(|&o| {
            let c = &world.vocab.categories[o];
            if rng.gen::<f64>() < spec.synonym_rate {
                c.synonyms[0]
            } else {
                c.token
            }
        })
        .collect();
    segments.push(Segment::caption(&mentions));
    let visual = render_with_noise(world, scene, world.noise, mix(seed, 0x7e57))?.embeddings;
    Ok(TrainExample {
        scene_id: scene.id,
        visual,
        segments,
    })
}

pub fn epoch_examples(world: &World, scenes: &[Scene], spec: &TrainSpec, epoch: usize) -> Result<Vec<TrainExample>> {
    scenes.iter().map(|s| scene_example(world, s, spec, epoch)).collect()
}

/// Weighted NLL sum and weight total of one example, optionally with gradients.
fn example_pass(
    weights: &ModelWeights,
    example: &TrainExample,
    caption_weight: f64,
    scale: f64,
    want_grad: bool,
) -> Result<(f64, f64, Option<ModelWeights>)> {
    let seq = example.sequence();
    let targets = example.targets(caption_weight);
    let total: f64 = targets.iter().map(|t| t.weight).sum();
    let hooks = HookSet::none();
    let (trace, cache) = forward_cached(weights, &seq, &hooks)?;
    let mut loss = 0.0;
    for t in &targets {
        let lv = crate::model::nll_loss(&trace, t.token, t.position)?;
        loss += t.weight * lv.value;
    }
    if !want_grad {
        return Ok((loss, total, None));
    }
    let spec = LossSpec { targets }.scaled(scale);
    let g = backward(weights, &seq, &trace, &cache, &hooks, &spec, true, false)?;
    Ok((loss, total, g.weights))
}

/// Weighted mean NLL per supervised token over a split.
pub fn evaluate_loss(weights: &ModelWeights, examples: &[TrainExample], caption_weight: f64) -> Result<LossValue> {
    if examples.is_empty() {
        return Err(LabError::Eval("cannot evaluate loss on an empty split".into()));
    }
    let (mut sum, mut total) = (0.0, 0.0);
    for ex in examples {
        let (l, w, _) = example_pass(weights, ex, caption_weight, 1.0, false)?;
        sum += l;
        total += w;
    }
    if total <= 0.0 {
        return Err(LabError::Eval("split has no supervised tokens".into()));
    }
    Ok(LossValue {
        value: sum / total,
        target: format!("mean NLL over {} examples", examples.len()),
        clamped: false,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
}

/// Row 0 is the initial loss on the first epoch's examples; row `e` is the
/// mean batch loss during epoch `e`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    pub records: Vec<EpochRecord>,
}

impl TrainingLog {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,loss\n");
        for r in &self.records {
            let _ = writeln!(out, "{},{}", r.epoch, r.loss);
        }
        out
    }

    pub fn initial_loss(&self) -> Option<f64> {
        self.records.first().map(|r| r.loss)
    }

    pub fn final_loss(&self) -> Option<f64> {
        self.records.last().map(|r| r.loss)
    }
}

pub struct TrainOutcome {
    pub weights: ModelWeights,
    pub log: TrainingLog,
}

/// Trains from the seeded initialization of `config`.
pub fn train(config: &ModelConfig, world: &World, spec: &TrainSpec) -> Result<TrainOutcome> {
    train_with_progress(config, world, spec, |_| {})
}

pub fn train_with_progress(
    config: &ModelConfig,
    world: &World,
    spec: &TrainSpec,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    spec.validate()?;
    if config.vocab_size != world.vocab.vocab_size() || config.grid_side != world.grid_side {
        return Err(LabError::config(
            "model config does not match the world's vocabulary or grid",
        ));
    }
    if config.model_dim != world.vocab.dim() {
        return Err(LabError::config("visual prototype dimension must equal model_dim"));
    }
    let mut weights = ModelWeights::init(config)?;
    let scenes = spec.scenes(world)?;
    let mut log = TrainingLog::default();
    if spec.epochs == 0 {
        return Ok(TrainOutcome { weights, log });
    }
    let diverged = |epoch: usize| {
        move |e: LabError| match e {
            LabError::Numeric { .. } => LabError::Diverged {
                epoch,
                what: e.to_string(),
            },
            other => other,
        }
    };

    let first = epoch_examples(world, &scenes, spec, 1)?;
    let initial = evaluate_loss(&weights, &first, spec.caption_weight).map_err(diverged(0))?;
    let rec = EpochRecord {
        epoch: 0,
        loss: initial.value,
    };
    on_epoch(&rec);
    log.records.push(rec);

    let mut opt = OptimizerState::new(spec.optimizer, config)?;
    let mut order: Vec<usize> = (0..scenes.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(mix(spec.seed, 0xba7c));
    for epoch in 1..=spec.epochs {
        let examples = if epoch == 1 {
            first.clone()
        } else {
            epoch_examples(world, &scenes, spec, epoch)?
        };
        order.shuffle(&mut rng);
        let (mut epoch_loss, mut epoch_weight) = (0.0, 0.0);
        for batch in order.chunks(spec.batch_size) {
            let total: f64 = batch
                .iter()
                .map(|&i| {
                    examples[i]
                        .targets(spec.caption_weight)
                        .iter()
                        .map(|t| t.weight)
                        .sum::<f64>()
                })
                .sum();
            if total <= 0.0 {
                continue;
            }
            let mut grad = ModelWeights::zeros(config)?;
            for &i in batch {
                let (l, w, g) = example_pass(&weights, &examples[i], spec.caption_weight, 1.0 / total, true)
                    .map_err(diverged(epoch))?;
                epoch_loss += l;
                epoch_weight += w;
                grad.add_scaled(&g.expect("gradient requested"), 1.0);
            }
            opt.apply(&mut weights, &grad, spec.learning_rate);
        }
        let loss = epoch_loss / epoch_weight;
        if !loss.is_finite() || weights.validate().is_err() {
            return Err(LabError::Diverged {
                epoch,
                what: format!("loss {loss}"),
            });
        }
        let rec = EpochRecord { epoch, loss };
        log::debug!("epoch {epoch}: loss {loss:.5}");
        on_epoch(&rec);
        log.records.push(rec);
    }
    Ok(TrainOutcome { weights, log })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_setup() -> (ModelConfig, World, TrainSpec) {
        let world = World::standard(16, 4, 0.1, 3).unwrap();
        let config = ModelConfig {
            num_layers: 2,
            num_heads: 2,
            model_dim: 16,
            grid_side: 4,
            vocab_size: world.vocab.vocab_size(),
            max_seq_len: 40,
            seed: 1,
        };
        let spec = TrainSpec {
            num_scenes: 12,
            object_count: (1, 2),
            epochs: 3,
            batch_size: 4,
            learning_rate: 0.05,
            ..TrainSpec::default()
        };
        (config, world, spec)
    }

    #[test]
    fn zero_epochs_returns_initialization() {
        let (config, world, mut spec) = small_setup();
        spec.epochs = 0;
        let out = train(&config, &world, &spec).unwrap();
        assert_eq!(out.weights, ModelWeights::init(&config).unwrap());
        assert!(out.log.records.is_empty());
    }

    #[test]
    fn training_is_reproducible_and_logs_every_epoch() {
        let (config, world, spec) = small_setup();
        let a = train(&config, &world, &spec).unwrap();
        let b = train(&config, &world, &spec).unwrap();
        assert_eq!(a.weights, b.weights);
        assert_eq!(a.log, b.log);
        assert_eq!(a.log.records.len(), spec.epochs + 1);
        let csv = a.log.to_csv();
        assert!(csv.starts_with("epoch,loss\n0,"));
        assert_eq!(csv.lines().count(), spec.epochs + 2);
    }

    #[test]
    fn loss_decreases() {
        let (config, world, mut spec) = small_setup();
        spec.epochs = 8;
        let out = train(&config, &world, &spec).unwrap();
        assert!(out.log.final_loss().unwrap() < out.log.initial_loss().unwrap());
    }

    #[test]
    fn huge_learning_rate_reports_divergence_epoch() {
        let (config, world, mut spec) = small_setup();
        spec.learning_rate = 1e6;
        spec.optimizer = Optimizer::Sgd;
        match train(&config, &world, &spec) {
            Err(LabError::Diverged { epoch, .. }) => assert!(epoch >= 1),
            Err(e) => panic!("unexpected error {e}"),
            Ok(_) => panic!("expected divergence"),
        }
    }

    #[test]
    fn evaluate_loss_is_weighted_mean() {
        let (config, world, spec) = small_setup();
        let w = ModelWeights::init(&config).unwrap();
        let scenes = spec.scenes(&world).unwrap();
        let ex = epoch_examples(&world, &scenes[..3], &spec, 1).unwrap();
        let mean = evaluate_loss(&w, &ex, 1.0).unwrap().value;
        // Manual accumulation, one segment at a time through the public forward.
        let (mut sum, mut n) = (0.0, 0.0);
        for e in &ex {
            for seg in &e.segments {
                let input = crate::model::PromptInput::new(
                    crate::model::VisualInput::new(4, e.visual.clone()).unwrap(),
                    seg.tokens.clone(),
                );
                let trace = crate::model::forward(&w, &input, &HookSet::none()).unwrap();
                for i in seg.targets_from..seg.tokens.len() {
                    sum += crate::model::nll_loss(&trace, seg.tokens[i], 16 + i - 1).unwrap().value;
                    n += 1.0;
                }
            }
        }
        assert!((mean - sum / n).abs() < 1e-10, "{mean} vs {}", sum / n);
        let mut doubled = ex.clone();
        doubled.extend(ex.iter().cloned());
        assert!((evaluate_loss(&w, &doubled, 1.0).unwrap().value - mean).abs() < 1e-12);
        assert!(evaluate_loss(&w, &[], 1.0).is_err());
    }

    #[test]
    fn rare_fraction_one_removes_small_objects_from_targets() {
        let (_, world, mut spec) = small_setup();
        spec.rare_fraction = 1.0;
        spec.num_scenes = 40;
        let small = world.vocab.small_objects();
        let scenes = spec.scenes(&world).unwrap();
        for ex in epoch_examples(&world, &scenes, &spec, 2).unwrap() {
            for seg in &ex.segments {
                if seg.caption {
                    for &t in &seg.tokens {
                        assert!(world.vocab.resolve(t).is_none_or(|o| !small.contains(&o)));
                    }
                } else if seg.tokens[3] == tokens::YES {
                    assert!(!small.contains(&world.vocab.resolve(seg.tokens[1]).unwrap()));
                }
            }
        }
    }
}
