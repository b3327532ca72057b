#![allow(dead_code)]

use std::path::PathBuf;
use std::sync::Mutex;

use sha2::{Digest, Sha256};
use vpfc_lab::bench::{Dataset, World};
use vpfc_lab::experiment::{write_atomic, DataSpec};
use vpfc_lab::model::{save_checkpoint, ModelConfig};
use vpfc_lab::trainer::{train, TrainSpec};

static TRAIN_LOCK: Mutex<()> = Mutex::new(());

pub const NOISE: f64 = 0.5;

/// Trained model of one seed family.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Family {
    pub bias_knob: f64,
    pub rare_fraction: f64,
    pub seed: u64,
}

impl Family {
    pub fn new(bias_knob: f64, rare_fraction: f64, seed: u64) -> Self {
        Self {
            bias_knob,
            rare_fraction,
            seed,
        }
    }

    pub fn model(&self) -> ModelConfig {
        ModelConfig {
            seed: self.seed,
            ..ModelConfig::default()
        }
    }

    pub fn train_spec(&self) -> TrainSpec {
        TrainSpec {
            bias_knob: self.bias_knob,
            rare_fraction: self.rare_fraction,
            seed: self.seed,
            ..TrainSpec::default()
        }
    }

    /// Held-out evaluation split sharing the training prototypes.
    pub fn data(&self) -> DataSpec {
        DataSpec {
            world_seed: 100 + self.seed,
            noise: NOISE,
            bias_knob: 0.5,
            num_scenes: 200,
            seed: 9999 + self.seed,
            ..DataSpec::default()
        }
    }

    pub fn world(&self) -> World {
        self.data().world(&self.model()).unwrap()
    }

    pub fn dataset(&self) -> Dataset {
        self.data().dataset(&self.model()).unwrap()
    }

    /// Trains once per spec and caches the checkpoint under the target dir.
    pub fn checkpoint(&self) -> PathBuf {
        let key = format!(
            "{}|{}|{}|{}|{}",
            env!("CARGO_PKG_VERSION"),
            toml::to_string(&self.model()).unwrap(),
            toml::to_string(&self.train_spec()).unwrap(),
            self.data().world_seed,
            NOISE
        );
        let digest = hex::encode(&Sha256::digest(key.as_bytes())[..8]);
        let path = PathBuf::from(env!("CARGO_TARGET_TMPDIR"))
            .join("fixtures")
            .join(format!(
                "k{}_r{}_s{}_{digest}.ckpt",
                self.bias_knob, self.rare_fraction, self.seed
            ));
        let _guard = TRAIN_LOCK.lock().unwrap_or_else(|e| e.into_inner());
        if !path.is_file() {
            let out = train(&self.model(), &self.world(), &self.train_spec()).unwrap();
            let tmp = path.with_extension("part");
            save_checkpoint(&out.weights, &tmp).unwrap();
            write_atomic(&path, &std::fs::read(&tmp).unwrap()).unwrap();
            std::fs::remove_file(&tmp).unwrap();
        }
        path
    }
}

pub const SEEDS: [u64; 3] = [0, 1, 2];

/// The biased family used by the intervention checks.
pub fn biased(seed: u64) -> Family {
    Family::new(0.9, 0.3, seed)
}
