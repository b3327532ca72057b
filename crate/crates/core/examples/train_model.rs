//! Trains a small co-occurrence-biased model, saves it and reloads it.
//!
//! `cargo run --release --example train_model`

mod common;

use vpfc_lab::bench::render_visual_tokens;
use vpfc_lab::model::{forward, load_checkpoint, save_checkpoint, HookSet, ModelConfig, PromptInput};
use vpfc_lab::tokens;
use vpfc_lab::trainer::train_with_progress;

fn main() {
    let world = common::world();
    let spec = common::quick_spec();
    let config = ModelConfig::default();
    println!(
        "{} layers, {} heads, width {}, {} parameters",
        config.num_layers,
        config.num_heads,
        config.model_dim,
        vpfc_lab::model::ModelWeights::init(&config).unwrap().num_params()
    );
    let out = train_with_progress(&config, &world, &spec, |r| {
        println!("epoch {:>2} loss {:.4}", r.epoch, r.loss)
    })
    .unwrap();

    let dir = common::out_dir();
    std::fs::create_dir_all(&dir).unwrap();
    let path = dir.join("quick.ckpt");
    save_checkpoint(&out.weights, &path).unwrap();
    std::fs::write(dir.join("training_log.csv"), out.log.to_csv()).unwrap();
    let back = load_checkpoint(&path).unwrap();

    let data = common::dataset(1);
    let scene = &data.scenes[0];
    let object = *scene.present.iter().next().unwrap();
    let input = PromptInput::new(
        render_visual_tokens(&world, scene).unwrap(),
        tokens::question_prompt(object),
    );
    let a = forward(&out.weights, &input, &HookSet::none()).unwrap();
    let b = forward(&back, &input, &HookSet::none()).unwrap();
    assert_eq!(a.logits, b.logits);
    let p = a.distribution_at(input.answer_position()).unwrap();
    println!(
        "is there a {}? P(yes) {:.3} P(no) {:.3}",
        world.vocab.categories[object].name,
        p[tokens::YES],
        p[tokens::NO]
    );
    println!("checkpoint {} reloads bit-identically", path.display());
}
