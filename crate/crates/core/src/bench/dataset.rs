//! JSON dataset container.
//!
//! Top-level fields: `schema_version`, `world` (vocab, grid_side, noise,
//! pairs), `bias_knob`, `object_count`, `scenes` (id, grid_side, occupancy,
//! present), `questions` (id, scene_id, object, label, subset, prompt).

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{build_pope_questions, cooccurrence_matrix, generate_scene, PopeQuestion, PopeSubset, Scene, World};
use crate::error::{LabError, Result};

pub const DATASET_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub schema_version: u32,
    pub world: World,
    pub bias_knob: f64,
    pub object_count: (usize, usize),
    pub scenes: Vec<Scene>,
    pub questions: Vec<PopeQuestion>,
}

/// Scene seed for index `i` of a split seeded with `seed`.
pub fn scene_seed(seed: u64, i: usize) -> u64 {
    (seed << 32) | i as u64
}

impl Dataset {
    /// Generates `num_scenes` scenes and `per_label` present/absent probes
    /// per scene in every POPE subset.
    pub fn build(
        world: World,
        bias_knob: f64,
        num_scenes: usize,
        object_count: (usize, usize),
        per_label: usize,
        seed: u64,
    ) -> Result<Self> {
        if num_scenes == 0 {
            return Err(LabError::Dataset("dataset needs at least one scene".into()));
        }
        let spec = world.cooccurrence(bias_knob)?;
        let scenes = (0..num_scenes)
            .map(|i| generate_scene(&world, scene_seed(seed, i), &spec, object_count))
            .collect::<Result<Vec<_>>>()?;
        let k = world.num_objects();
        let co = cooccurrence_matrix(&scenes, k);
        let mut questions = Vec::new();
        for (n, subset) in PopeSubset::ALL.into_iter().enumerate() {
            questions.extend(build_pope_questions(
                &scenes,
                subset,
                per_label,
                k,
                &co,
                seed ^ (n as u64 + 1),
            )?);
        }
        Ok(Self {
            schema_version: DATASET_SCHEMA_VERSION,
            world,
            bias_knob,
            object_count,
            scenes,
            questions,
        })
    }

    pub fn scene(&self, id: u64) -> Option<&Scene> {
        self.scenes.iter().find(|s| s.id == id)
    }

    pub fn questions_in(&self, subset: PopeSubset) -> impl Iterator<Item = &PopeQuestion> {
        self.questions.iter().filter(move |q| q.subset == subset)
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != DATASET_SCHEMA_VERSION {
            return Err(LabError::Dataset(format!(
                "dataset schema version {}, this build reads {DATASET_SCHEMA_VERSION}",
                self.schema_version
            )));
        }
        self.world.vocab.validate()?;
        for s in &self.scenes {
            if s.grid_side != self.world.grid_side {
                return Err(LabError::Dataset(format!("scene {} has wrong grid size", s.id)));
            }
            s.validate()?;
        }
        for q in &self.questions {
            let s = self
                .scene(q.scene_id)
                .ok_or_else(|| LabError::Dataset(format!("question {} names unknown scene", q.id)))?;
            if !q.check_label(s) {
                return Err(LabError::Dataset(format!(
                    "question {} has an inconsistent label",
                    q.id
                )));
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let d: Dataset = serde_json::from_str(text).map_err(|e| LabError::Dataset(format!("bad dataset file: {e}")))?;
        d.validate()?;
        Ok(d)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        crate::experiment::write_atomic(path.as_ref(), self.to_json()?.as_bytes())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path.as_ref())?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bench::PopeLabel;

    fn small() -> Dataset {
        let world = World::standard(8, 8, 0.2, 1).unwrap();
        Dataset::build(world, 0.8, 60, (1, 4), 1, 9).unwrap()
    }

    #[test]
    fn json_roundtrip() {
        let d = small();
        let back = Dataset::from_json(&d.to_json().unwrap()).unwrap();
        assert_eq!(back, d);
    }

    #[test]
    fn schema_mismatch_rejected() {
        let mut d = small();
        d.schema_version = 99;
        assert!(Dataset::from_json(&d.to_json().unwrap()).is_err());
    }

    #[test]
    fn adversarial_negatives_cooccur_more_than_random() {
        let world = World::standard(8, 8, 0.2, 1).unwrap();
        let d = Dataset::build(world, 0.9, 400, (1, 3), 1, 2).unwrap();
        let co = cooccurrence_matrix(&d.scenes, d.world.num_objects());
        let mean = |subset| {
            let v: Vec<f64> = d
                .questions_in(subset)
                .filter(|q| q.label == PopeLabel::Absent)
                .map(|q| {
                    let s = d.scene(q.scene_id).unwrap();
                    s.present.iter().map(|&p| co[p][q.object] as f64).sum::<f64>()
                })
                .collect();
            v.iter().sum::<f64>() / v.len() as f64
        };
        assert!(mean(PopeSubset::Adversarial) > mean(PopeSubset::Random));
    }
}
