#![allow(dead_code)]

use std::path::PathBuf;

use vpfc_lab::bench::{Dataset, World};
use vpfc_lab::model::{load_checkpoint, ModelConfig, ModelWeights};
use vpfc_lab::trainer::{train_with_progress, TrainSpec};

pub const WORLD_SEED: u64 = 100;
pub const NOISE: f64 = 0.5;

pub fn world() -> World {
    World::standard(32, 8, NOISE, WORLD_SEED).expect("standard world")
}

/// Output directory: `$VPFC_LAB_OUT/examples`, else `./out/examples`.
pub fn out_dir() -> PathBuf {
    let root = std::env::var_os("VPFC_LAB_OUT").map_or_else(|| PathBuf::from("out"), PathBuf::from);
    root.join("examples")
}

/// Short co-occurrence-biased run, small enough for an example.
pub fn quick_spec() -> TrainSpec {
    TrainSpec {
        num_scenes: 200,
        epochs: 16,
        bias_knob: 0.9,
        rare_fraction: 0.3,
        ..TrainSpec::default()
    }
}

/// Loads `$VPFC_LAB_CHECKPOINT` when set, else trains a quick model.
pub fn model() -> ModelWeights {
    if let Some(p) = std::env::var_os("VPFC_LAB_CHECKPOINT") {
        return load_checkpoint(PathBuf::from(p)).expect("checkpoint");
    }
    eprintln!("training a quick model (set VPFC_LAB_CHECKPOINT to skip)");
    let out = train_with_progress(&ModelConfig::default(), &world(), &quick_spec(), |r| {
        if r.epoch % 4 == 0 {
            eprintln!("  epoch {:>2} loss {:.4}", r.epoch, r.loss)
        }
    })
    .expect("training");
    out.weights
}

/// Held-out split with moderate co-occurrence.
pub fn dataset(num_scenes: usize) -> Dataset {
    Dataset::build(world(), 0.5, num_scenes, (1, 3), 1, 9999).expect("dataset")
}
