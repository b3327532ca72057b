use std::collections::BTreeSet;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{CooccurrenceSpec, World};
use crate::error::{LabError, Result};
use crate::model::VisualInput;

const PLACEMENT_ATTEMPTS: usize = 200;
const RENDER_SALT: u64 = 0x005e_ed0f_9e1d;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Occupant {
    pub object: usize,
    /// Cell count of the instance.
    pub size: usize,
}

/// Ground-truth layout of one synthetic image.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Scene {
    /// Generation seed; also seeds rendering noise.
    pub id: u64,
    pub grid_side: usize,
    pub occupancy: Vec<Option<Occupant>>,
    pub present: BTreeSet<usize>,
}

impl Scene {
    pub fn empty(id: u64, grid_side: usize) -> Self {
        Self {
            id,
            grid_side,
            occupancy: vec![None; grid_side * grid_side],
            present: BTreeSet::new(),
        }
    }

    pub fn contains(&self, object: usize) -> bool {
        self.present.contains(&object)
    }

    pub fn cells_of(&self, object: usize) -> Vec<usize> {
        self.occupancy
            .iter()
            .enumerate()
            .filter(|(_, o)| o.map(|o| o.object) == Some(object))
            .map(|(i, _)| i)
            .collect()
    }

    /// Present set equals occupancy ids, and every instance is one
    /// 4-connected block of its recorded size.
    pub fn validate(&self) -> Result<()> {
        let ids: BTreeSet<usize> = self.occupancy.iter().flatten().map(|o| o.object).collect();
        if ids != self.present {
            return Err(LabError::Dataset(format!(
                "scene {}: present set disagrees with occupancy",
                self.id
            )));
        }
        for &obj in &self.present {
            let cells = self.cells_of(obj);
            let size = self.occupancy[cells[0]].expect("occupied").size;
            if cells.len() != size {
                return Err(LabError::Dataset(format!(
                    "scene {}: object {obj} covers {} cells, size says {size}",
                    self.id,
                    cells.len()
                )));
            }
            if !connected(&cells, self.grid_side) {
                return Err(LabError::Dataset(format!(
                    "scene {}: object {obj} is not 4-connected",
                    self.id
                )));
            }
        }
        Ok(())
    }
}

fn connected(cells: &[usize], g: usize) -> bool {
    let set: BTreeSet<usize> = cells.iter().copied().collect();
    let mut seen = BTreeSet::from([cells[0]]);
    let mut stack = vec![cells[0]];
    while let Some(c) = stack.pop() {
        let (r, col) = (c / g, c % g);
        let mut nbrs = Vec::with_capacity(4);
        if r > 0 {
            nbrs.push(c - g);
        }
        if r + 1 < g {
            nbrs.push(c + g);
        }
        if col > 0 {
            nbrs.push(c - 1);
        }
        if col + 1 < g {
            nbrs.push(c + 1);
        }
        for n in nbrs {
            if set.contains(&n) && seen.insert(n) {
                stack.push(n);
            }
        }
    }
    seen.len() == set.len()
}

/// Block shapes of each size as (row, col) offsets.
fn shapes(size: usize) -> &'static [&'static [(usize, usize)]] {
    match size {
        1 => &[&[(0, 0)]],
        2 => &[&[(0, 0), (0, 1)], &[(0, 0), (1, 0)]],
        3 => &[
            &[(0, 0), (0, 1), (0, 2)],
            &[(0, 0), (1, 0), (2, 0)],
            &[(0, 0), (0, 1), (1, 0)],
            &[(0, 0), (0, 1), (1, 1)],
            &[(0, 0), (1, 0), (1, 1)],
            &[(0, 1), (1, 0), (1, 1)],
        ],
        _ => &[
            &[(0, 0), (0, 1), (1, 0), (1, 1)],
            &[(0, 0), (0, 1), (0, 2), (0, 3)],
            &[(0, 0), (1, 0), (2, 0), (3, 0)],
        ],
    }
}

/// Draws a scene: a uniform number of independently chosen objects, each
/// followed by its correlated partners with the pair propensity, then
/// placed as non-overlapping blocks.
pub fn generate_scene(
    world: &World,
    seed: u64,
    spec: &CooccurrenceSpec,
    object_count: (usize, usize),
) -> Result<Scene> {
    let k = world.num_objects();
    let (lo, hi) = object_count;
    if lo > hi || hi > k {
        return Err(LabError::Dataset(format!(
            "object count range [{lo},{hi}] invalid for {k} categories"
        )));
    }
    if spec.len() != k {
        return Err(LabError::Dataset(
            "co-occurrence spec size does not match vocabulary".into(),
        ));
    }
    let g = world.grid_side;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.gen_range(lo..=hi);
    let mut ids: Vec<usize> = (0..k).collect();
    ids.shuffle(&mut rng);
    let primaries: Vec<usize> = ids[..n].to_vec();
    let mut objects = primaries.clone();
    for &a in &primaries {
        for b in 0..k {
            let p = spec.propensity[a][b];
            if p > 0.0 && rng.gen::<f64>() < p && !objects.contains(&b) {
                objects.push(b);
            }
        }
    }
    let total: usize = objects.iter().map(|&o| world.vocab.categories[o].size).sum();
    if total > g * g {
        return Err(LabError::Dataset(format!(
            "scene {seed}: {total} object cells exceed {} grid cells",
            g * g
        )));
    }

    let mut scene = Scene::empty(seed, g);
    for &obj in &objects {
        let size = world.vocab.categories[obj].size;
        let mut placed = false;
        for _ in 0..PLACEMENT_ATTEMPTS {
            let shape = shapes(size).choose(&mut rng).expect("nonempty shape list");
            let h = shape.iter().map(|c| c.0).max().unwrap_or(0) + 1;
            let w = shape.iter().map(|c| c.1).max().unwrap_or(0) + 1;
            if h > g || w > g {
                continue;
            }
            let r0 = rng.gen_range(0..=g - h);
            let c0 = rng.gen_range(0..=g - w);
            let cells: Vec<usize> = shape.iter().map(|&(dr, dc)| (r0 + dr) * g + c0 + dc).collect();
            if cells.iter().all(|&c| scene.occupancy[c].is_none()) {
                for c in cells {
                    scene.occupancy[c] = Some(Occupant { object: obj, size });
                }
                scene.present.insert(obj);
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(LabError::Dataset(format!(
                "scene {seed}: could not place object {obj} after {PLACEMENT_ATTEMPTS} attempts"
            )));
        }
    }
    Ok(scene)
}

/// Prototype (or background) plus seeded Gaussian noise for every cell.
pub fn render_visual_tokens(world: &World, scene: &Scene) -> Result<VisualInput> {
    render_with_noise(world, scene, world.noise, scene.id ^ RENDER_SALT)
}

pub(crate) fn render_with_noise(world: &World, scene: &Scene, noise: f64, seed: u64) -> Result<VisualInput> {
    if scene.grid_side != world.grid_side {
        return Err(LabError::Dataset("scene grid does not match world".into()));
    }
    let d = world.vocab.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut emb = Array2::zeros((scene.occupancy.len(), d));
    for (cell, occ) in scene.occupancy.iter().enumerate() {
        let base = match occ {
            Some(o) => &world.vocab.categories[o.object].prototype,
            None => &world.vocab.background,
        };
        for (k, &b) in base.iter().enumerate() {
            let z: f64 = StandardNormal.sample(&mut rng);
            emb[[cell, k]] = b + noise * z;
        }
    }
    VisualInput::new(world.grid_side, emb)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bench::{distance, ObjectVocab};

    fn world() -> World {
        World::standard(16, 8, 0.3, 4).unwrap()
    }

    #[test]
    fn empty_count_range_gives_empty_scene() {
        let w = world();
        let s = generate_scene(&w, 1, &w.cooccurrence(0.9).unwrap(), (0, 0)).unwrap();
        assert!(s.present.is_empty());
        assert!(s.occupancy.iter().all(Option::is_none));
    }

    #[test]
    fn forced_pair_always_co_placed() {
        let w = world();
        let spec = w.cooccurrence(1.0).unwrap();
        for seed in 0..200 {
            let s = generate_scene(&w, seed, &spec, (1, 3)).unwrap();
            s.validate().unwrap();
            for &(a, b) in &w.pairs {
                if s.contains(a) || s.contains(b) {
                    assert!(s.contains(a) && s.contains(b), "seed {seed}");
                }
            }
        }
    }

    #[test]
    fn pair_frequency_matches_propensity() {
        let vocab = ObjectVocab::new(&[("a", 2), ("b", 2), ("c", 1), ("d", 3)], 8, 0).unwrap();
        let w = World {
            vocab,
            grid_side: 8,
            noise: 0.0,
            pairs: vec![(0, 1)],
        };
        let spec = w.cooccurrence(0.8).unwrap();
        let (mut either, mut both) = (0, 0);
        for seed in 0..10_000 {
            let s = generate_scene(&w, seed, &spec, (1, 1)).unwrap();
            if s.contains(0) || s.contains(1) {
                either += 1;
                if s.contains(0) && s.contains(1) {
                    both += 1;
                }
            }
        }
        let freq = both as f64 / either as f64;
        assert!((freq - 0.8).abs() < 0.03, "freq {freq}");
    }

    #[test]
    fn generation_is_deterministic() {
        let w = world();
        let spec = w.cooccurrence(0.5).unwrap();
        assert_eq!(
            generate_scene(&w, 42, &spec, (1, 4)).unwrap(),
            generate_scene(&w, 42, &spec, (1, 4)).unwrap()
        );
    }

    #[test]
    fn overflow_is_an_error() {
        let vocab = ObjectVocab::new(&[("a", 4), ("b", 4)], 4, 0).unwrap();
        let w = World {
            vocab,
            grid_side: 2,
            noise: 0.0,
            pairs: vec![],
        };
        let spec = CooccurrenceSpec::independent(2);
        assert!(generate_scene(&w, 0, &spec, (2, 2)).is_err());
        assert!(generate_scene(&w, 0, &spec, (1, 3)).is_err());
    }

    #[test]
    fn noiseless_render_equals_prototypes_and_decodes() {
        let mut w = world();
        w.noise = 0.0;
        let s = generate_scene(&w, 9, &w.cooccurrence(0.5).unwrap(), (2, 4)).unwrap();
        let v = render_visual_tokens(&w, &s).unwrap();
        for (cell, occ) in s.occupancy.iter().enumerate() {
            let row = v.embeddings.row(cell).to_vec();
            if let Some(o) = occ {
                assert_eq!(row, w.vocab.categories[o.object].prototype);
            }
            // Nearest-prototype oracle.
            let mut best: (Option<usize>, f64) = (None, distance(&row, &w.vocab.background));
            for c in &w.vocab.categories {
                let d = distance(&row, &c.prototype);
                if d < best.1 {
                    best = (Some(c.id), d);
                }
            }
            assert_eq!(best.0, occ.map(|o| o.object));
        }
    }

    #[test]
    fn renders_are_reproducible() {
        let w = world();
        let s = generate_scene(&w, 3, &w.cooccurrence(0.5).unwrap(), (1, 4)).unwrap();
        assert_eq!(
            render_visual_tokens(&w, &s).unwrap(),
            render_visual_tokens(&w, &s).unwrap()
        );
    }
}
