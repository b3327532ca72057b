//! Synthetic grid scenes and POPE probes.
//!
//! `cargo run --release --example scene_bench`

mod common;

use vpfc_lab::bench::{cooccurrence_matrix, render_visual_tokens, PopeLabel, PopeSubset};

fn main() {
    let data = common::dataset(40);
    let world = &data.world;
    let scene = &data.scenes[0];
    let name = |o: usize| world.vocab.categories[o].name.as_str();

    println!("scene {} ({} objects):", scene.id, scene.present.len());
    for r in 0..scene.grid_side {
        let row: String = (0..scene.grid_side)
            .map(|c| match &scene.occupancy[r * scene.grid_side + c] {
                Some(o) => char::from(b'a' + o.object as u8),
                None => '.',
            })
            .collect();
        println!("  {row}");
    }
    for &o in &scene.present {
        println!(
            "  {} = {} at cells {:?}",
            char::from(b'a' + o as u8),
            name(o),
            scene.cells_of(o)
        );
    }

    let visual = render_visual_tokens(world, scene).unwrap();
    println!("visual tokens: {} x {}", visual.num_tokens(), visual.dim());

    for subset in PopeSubset::ALL {
        println!("{subset} probes for scene {}:", scene.id);
        for q in data.questions_in(subset).filter(|q| q.scene_id == scene.id) {
            let truth = if q.label == PopeLabel::Present { "yes" } else { "no" };
            println!("  is there a {}? -> {truth}", name(q.object));
        }
    }

    let counts = cooccurrence_matrix(&data.scenes, world.num_objects());
    println!("pair co-occurrence over {} scenes (both / either):", data.scenes.len());
    for a in (0..world.num_objects()).step_by(2) {
        println!(
            "  {:>8} + {:<8} {:>3} of {:>3}",
            name(a),
            name(a + 1),
            counts[a][a + 1],
            data.scenes
                .iter()
                .filter(|s| s.contains(a) || s.contains(a + 1))
                .count()
        );
    }
}
