//! Localization heads, their visual attention map and the high-attention
//! region for one probe.
//!
//! `cargo run --release --example attention_lens`

mod common;

use vpfc_lab::bench::{render_visual_tokens, PopeLabel};
use vpfc_lab::intervene::{localize, VpfcParams};
use vpfc_lab::lens::{centroid, localization_score, square_region};
use vpfc_lab::model::{forward, HookSet, PromptInput};

fn main() {
    let w = common::model();
    let data = common::dataset(10);
    let params = VpfcParams::default();
    let q = data
        .questions
        .iter()
        .filter(|q| q.label == PopeLabel::Present)
        .max_by_key(|q| {
            (
                data.world.vocab.categories[q.object].size,
                std::cmp::Reverse(q.id.clone()),
            )
        })
        .unwrap();
    let scene = data.scene(q.scene_id).unwrap();
    let input = PromptInput::new(render_visual_tokens(&data.world, scene).unwrap(), q.prompt.clone());
    let trace = forward(&w, &input, &HookSet::none()).unwrap();
    let query = input.query_position();

    println!("visual share per head at the answer position:");
    for site in trace.sites() {
        let s = localization_score(&trace, site.layer, site.head, query).unwrap();
        print!("{site}={s:.2} ");
        if site.head + 1 == trace.num_heads {
            println!();
        }
    }

    let loc = localize(&trace, query, &params).unwrap();
    let heads: Vec<String> = loc.heads.iter().map(ToString::to_string).collect();
    println!("localization heads: {}", heads.join(" "));

    let g = loc.summary.grid_side;
    let max = loc.summary.values.iter().cloned().fold(0.0, f64::max);
    let shades = [' ', '.', ':', '-', '=', '+', '*', '#'];
    let target = scene.cells_of(q.object);
    let c = centroid(&loc.summary, &loc.mask).unwrap();
    let region = square_region(c, loc.mask.count(), g).unwrap();
    println!(
        "object {} (cells marked O), attention shading, HCVR in brackets:",
        data.world.vocab.categories[q.object].name
    );
    for r in 0..g {
        let mut line = String::new();
        for col in 0..g {
            let i = r * g + col;
            let shade = shades[((loc.summary.values[i] / max) * 7.0).round() as usize];
            let mark = if target.contains(&i) { 'O' } else { shade };
            line.push_str(&if loc.mask.cells[i] {
                format!("[{mark}]")
            } else {
                format!(" {mark} ")
            });
        }
        println!("  {line}");
    }
    let hits = target.iter().filter(|&&i| loc.mask.cells[i]).count();
    println!("HCVR covers {hits} of {} object cells", target.len());
    println!(
        "centroid {:?}, square region {} cells, standard distance {:.3}",
        c,
        region.cells.len(),
        loc.dispersion.standard_distance
    );
    println!(
        "summary csv:\n{}",
        loc.summary.to_csv().lines().take(4).collect::<Vec<_>>().join("\n")
    );
}
