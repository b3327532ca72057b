use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::Scene;
use crate::error::{LabError, Result};
use crate::tokens::{self, TokenId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PopeSubset {
    Random,
    Popular,
    Adversarial,
}

impl PopeSubset {
    pub const ALL: [PopeSubset; 3] = [PopeSubset::Random, PopeSubset::Popular, PopeSubset::Adversarial];

    pub fn name(self) -> &'static str {
        match self {
            PopeSubset::Random => "random",
            PopeSubset::Popular => "popular",
            PopeSubset::Adversarial => "adversarial",
        }
    }
}

impl fmt::Display for PopeSubset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PopeSubset {
    type Err = LabError;

    fn from_str(s: &str) -> Result<Self> {
        PopeSubset::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| LabError::config(format!("unknown POPE subset '{s}'")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PopeLabel {
    Present,
    Absent,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PopeQuestion {
    pub id: String,
    pub scene_id: u64,
    pub object: usize,
    pub label: PopeLabel,
    pub subset: PopeSubset,
    pub prompt: Vec<TokenId>,
}

impl PopeQuestion {
    /// Re-derives the label from the scene.
    pub fn check_label(&self, scene: &Scene) -> bool {
        let expected = if scene.contains(self.object) {
            PopeLabel::Present
        } else {
            PopeLabel::Absent
        };
        scene.id == self.scene_id && expected == self.label
    }
}

/// Entry `(i, j)` counts scenes containing both `i` and `j`; zero diagonal.
pub fn cooccurrence_matrix(scenes: &[Scene], num_objects: usize) -> Vec<Vec<u64>> {
    let mut m = vec![vec![0u64; num_objects]; num_objects];
    for s in scenes {
        for &a in &s.present {
            for &b in &s.present {
                if a != b && a < num_objects && b < num_objects {
                    m[a][b] += 1;
                }
            }
        }
    }
    m
}

fn object_frequency(scenes: &[Scene], num_objects: usize) -> Vec<u64> {
    let mut f = vec![0u64; num_objects];
    for s in scenes {
        for &o in &s.present {
            if o < num_objects {
                f[o] += 1;
            }
        }
    }
    f
}

/// Takes the `n` highest-scoring candidates; ties go to the lower id.
fn top_by<F: Fn(usize) -> u64>(candidates: &[usize], n: usize, score: F) -> Vec<usize> {
    let mut ranked = candidates.to_vec();
    ranked.sort_by(|&a, &b| score(b).cmp(&score(a)).then(a.cmp(&b)));
    ranked.truncate(n);
    ranked
}

/// Builds `per_label` present and `per_label` absent probes per scene.
///
/// Present objects are sampled uniformly. Absent objects are sampled
/// uniformly (random), taken by global scene frequency (popular), or by
/// summed co-occurrence with the scene's present objects (adversarial).
pub fn build_pope_questions(
    scenes: &[Scene],
    subset: PopeSubset,
    per_label: usize,
    num_objects: usize,
    cooccurrence: &[Vec<u64>],
    seed: u64,
) -> Result<Vec<PopeQuestion>> {
    if per_label == 0 {
        return Err(LabError::Dataset("questions per label must be positive".into()));
    }
    if cooccurrence.len() != num_objects || cooccurrence.iter().any(|r| r.len() != num_objects) {
        return Err(LabError::Dataset(
            "co-occurrence matrix does not match vocabulary".into(),
        ));
    }
    let bad: Vec<u64> = scenes
        .iter()
        .filter(|s| s.present.len() < per_label || num_objects - s.present.len() < per_label)
        .map(|s| s.id)
        .collect();
    if !bad.is_empty() {
        return Err(LabError::Dataset(format!(
            "cannot balance {per_label} present/{per_label} absent {subset} probes for scenes {bad:?}"
        )));
    }
    let freq = object_frequency(scenes, num_objects);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(scenes.len() * per_label * 2);
    for s in scenes {
        let present: Vec<usize> = s.present.iter().copied().collect();
        let absent: Vec<usize> = (0..num_objects).filter(|o| !s.contains(*o)).collect();
        let pos: Vec<usize> = present.choose_multiple(&mut rng, per_label).copied().collect();
        let neg: Vec<usize> = match subset {
            PopeSubset::Random => absent.choose_multiple(&mut rng, per_label).copied().collect(),
            PopeSubset::Popular => top_by(&absent, per_label, |o| freq[o]),
            PopeSubset::Adversarial => top_by(&absent, per_label, |o| {
                present.iter().map(|&p| cooccurrence[p][o]).sum()
            }),
        };
        let tagged = pos
            .into_iter()
            .map(|o| (o, PopeLabel::Present))
            .chain(neg.into_iter().map(|o| (o, PopeLabel::Absent)));
        for (i, (object, label)) in tagged.enumerate() {
            out.push(PopeQuestion {
                id: format!("{subset}-{}-{i}", s.id),
                scene_id: s.id,
                object,
                label,
                subset,
                prompt: tokens::question_prompt(object),
            });
        }
    }
    Ok(out)
}
