//! Synthetic scene benchmark: object vocabulary, scene generation,
//! visual-token rendering and POPE-style yes/no probes.

mod dataset;
mod pope;
mod scene;

pub use dataset::{scene_seed, Dataset, DATASET_SCHEMA_VERSION};
pub use pope::{build_pope_questions, cooccurrence_matrix, PopeLabel, PopeQuestion, PopeSubset};
pub(crate) use scene::render_with_noise;
pub use scene::{generate_scene, render_visual_tokens, Occupant, Scene};

use std::collections::BTreeSet;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::tokens::{self, TokenId};

/// One object category.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectCategory {
    pub id: usize,
    pub name: String,
    pub token: TokenId,
    pub synonyms: Vec<TokenId>,
    pub prototype: Vec<f64>,
    /// Instance size in cells.
    pub size: usize,
}

/// The closed set of object categories and their visual prototypes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectVocab {
    pub categories: Vec<ObjectCategory>,
    pub background: Vec<f64>,
}

/// Names and instance sizes of the standard 16-category vocabulary. Pairs
/// `(2i, 2i+1)` are the correlated pairs.
pub const STANDARD_OBJECTS: [(&str, usize); 16] = [
    ("toilet", 3),
    ("sink", 2),
    ("spoon", 1),
    ("bowl", 2),
    ("fork", 1),
    ("knife", 2),
    ("cup", 1),
    ("bottle", 2),
    ("chair", 3),
    ("table", 4),
    ("cat", 3),
    ("dog", 3),
    ("car", 4),
    ("truck", 4),
    ("person", 4),
    ("bicycle", 3),
];

impl ObjectVocab {
    /// Builds a vocabulary with seeded Gaussian prototypes of dimension `dim`.
    pub fn new(objects: &[(&str, usize)], dim: usize, seed: u64) -> Result<Self> {
        if objects.is_empty() {
            return Err(LabError::Dataset("object vocabulary is empty".into()));
        }
        let k = objects.len();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut draw = || -> Vec<f64> { (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect() };
        let categories = objects
            .iter()
            .enumerate()
            .map(|(id, &(name, size))| ObjectCategory {
                id,
                name: name.to_string(),
                token: tokens::object_token(id),
                synonyms: vec![tokens::synonym_token(id, k)],
                prototype: draw(),
                size: size.clamp(1, 4),
            })
            .collect();
        let background = draw().into_iter().map(|v| 0.3 * v).collect();
        let vocab = Self { categories, background };
        vocab.validate()?;
        Ok(vocab)
    }

    pub fn standard(dim: usize, seed: u64) -> Result<Self> {
        Self::new(&STANDARD_OBJECTS, dim, seed)
    }

    pub fn len(&self) -> usize {
        self.categories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.categories.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.background.len()
    }

    pub fn vocab_size(&self) -> usize {
        tokens::vocab_size(self.len())
    }

    /// Object named by a canonical or synonym token.
    pub fn resolve(&self, token: TokenId) -> Option<usize> {
        self.categories
            .iter()
            .find(|c| c.token == token || c.synonyms.contains(&token))
            .map(|c| c.id)
    }

    /// Objects occupying a single cell.
    pub fn small_objects(&self) -> BTreeSet<usize> {
        self.categories.iter().filter(|c| c.size == 1).map(|c| c.id).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = BTreeSet::new();
        for c in &self.categories {
            if c.prototype.len() != self.dim() {
                return Err(LabError::Dataset(format!(
                    "prototype of {} has wrong dimension",
                    c.name
                )));
            }
            for &s in &c.synonyms {
                if !seen.insert(s) || s == c.token {
                    return Err(LabError::Dataset(format!("synonym token {s} is not unique")));
                }
            }
        }
        for (i, a) in self.categories.iter().enumerate() {
            for b in &self.categories[i + 1..] {
                if distance(&a.prototype, &b.prototype) <= 0.0 {
                    return Err(LabError::Dataset(format!(
                        "prototypes of {} and {} coincide",
                        a.name, b.name
                    )));
                }
            }
        }
        Ok(())
    }
}

pub(crate) fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Symmetric pairwise co-placement propensities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CooccurrenceSpec {
    pub propensity: Vec<Vec<f64>>,
    /// The bias knob the propensities were derived from, when any.
    pub bias_knob: Option<f64>,
}

impl CooccurrenceSpec {
    pub fn independent(k: usize) -> Self {
        Self {
            propensity: vec![vec![0.0; k]; k],
            bias_knob: None,
        }
    }

    /// Each listed pair co-placed with probability `strength`.
    pub fn from_pairs(k: usize, pairs: &[(usize, usize)], strength: f64) -> Result<Self> {
        let mut spec = Self::independent(k);
        for &(a, b) in pairs {
            if a >= k || b >= k || a == b {
                return Err(LabError::Dataset(format!("invalid correlated pair ({a}, {b})")));
            }
            spec.propensity[a][b] = strength;
            spec.propensity[b][a] = strength;
        }
        spec.bias_knob = Some(strength);
        spec.validate()?;
        Ok(spec)
    }

    pub fn len(&self) -> usize {
        self.propensity.len()
    }

    pub fn is_empty(&self) -> bool {
        self.propensity.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.len();
        for (i, row) in self.propensity.iter().enumerate() {
            if row.len() != k {
                return Err(LabError::Dataset("co-occurrence matrix is not square".into()));
            }
            if row[i] != 0.0 {
                return Err(LabError::Dataset("co-occurrence diagonal must be zero".into()));
            }
            for (j, &p) in row.iter().enumerate() {
                if !(0.0..=1.0).contains(&p) {
                    return Err(LabError::Dataset(format!("propensity ({i},{j}) = {p} outside [0,1]")));
                }
                if p != self.propensity[j][i] {
                    return Err(LabError::Dataset("co-occurrence matrix is not symmetric".into()));
                }
            }
        }
        Ok(())
    }
}

/// Everything needed to generate and render scenes consistently.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct World {
    pub vocab: ObjectVocab,
    pub grid_side: usize,
    /// Per-coordinate standard deviation of rendering noise.
    pub noise: f64,
    pub pairs: Vec<(usize, usize)>,
}

impl World {
    /// Standard vocabulary with correlated pairs `(0,1), (2,3), …`.
    pub fn standard(dim: usize, grid_side: usize, noise: f64, seed: u64) -> Result<Self> {
        let vocab = ObjectVocab::standard(dim, seed)?;
        let pairs = (0..vocab.len() / 2).map(|i| (2 * i, 2 * i + 1)).collect();
        Ok(Self {
            vocab,
            grid_side,
            noise,
            pairs,
        })
    }

    pub fn num_objects(&self) -> usize {
        self.vocab.len()
    }

    pub fn num_cells(&self) -> usize {
        self.grid_side * self.grid_side
    }

    /// Propensities for a given bias knob.
    pub fn cooccurrence(&self, bias_knob: f64) -> Result<CooccurrenceSpec> {
        CooccurrenceSpec::from_pairs(self.num_objects(), &self.pairs, bias_knob)
    }

    pub fn partner(&self, object: usize) -> Option<usize> {
        self.pairs.iter().find_map(|&(a, b)| {
            if a == object {
                Some(b)
            } else if b == object {
                Some(a)
            } else {
                None
            }
        })
    }
}
