//! POPE and CHAIR scoring on hand-made answers and on model captions.
//!
//! `cargo run --release --example pope_chair`

mod common;

use vpfc_lab::bench::render_visual_tokens;
use vpfc_lab::bench::PopeLabel::{Absent, Present};
use vpfc_lab::eval::{chair_metrics, parse_caption_objects, pope_metrics, Answer, CaptionSample, Prediction};
use vpfc_lab::model::{greedy_decode, HookSet, PromptInput};
use vpfc_lab::tokens;

fn main() {
    let answers = [
        (Answer::Yes, Present),
        (Answer::Yes, Present),
        (Answer::Yes, Absent),
        (Answer::No, Present),
        (Answer::No, Absent),
        (Answer::No, Absent),
        (Answer::Other, Present),
    ];
    let preds: Vec<Prediction> = answers
        .iter()
        .enumerate()
        .map(|(i, &(a, t))| Prediction::new(format!("q{i}"), a, t))
        .collect();
    let r = pope_metrics(&preds).unwrap();
    println!(
        "POPE: accuracy {:.3} precision {:.3} recall {:.3} f1 {:.3} omission {} fabrication {} other {}",
        r.accuracy,
        r.precision,
        r.recall,
        r.f1,
        r.omission,
        r.fabrication,
        r.other_present + r.other_absent
    );

    let w = common::model();
    let data = common::dataset(12);
    let vocab = &data.world.vocab;
    let mut samples = Vec::new();
    for scene in &data.scenes {
        let input = PromptInput::new(
            render_visual_tokens(&data.world, scene).unwrap(),
            tokens::caption_prompt(),
        );
        let out = greedy_decode(&w, &input, &HookSet::none(), 10).unwrap();
        let parsed = parse_caption_objects(&out.tokens, vocab);
        let said: Vec<&str> = parsed
            .objects
            .iter()
            .map(|&o| vocab.categories[o].name.as_str())
            .collect();
        let truth: Vec<&str> = scene
            .present
            .iter()
            .map(|&o| vocab.categories[o].name.as_str())
            .collect();
        println!("scene {:>2}: says {:?} / shows {:?}", scene.id & 0xffff, said, truth);
        samples.push(CaptionSample {
            id: scene.id.to_string(),
            tokens: out.tokens,
            present: scene.present.clone(),
        });
    }
    let c = chair_metrics(&samples, vocab);
    println!(
        "CHAIR_i {:.3} ({}/{} objects), CHAIR_s {:.3} ({}/{} sentences)",
        c.chair_i, c.hallucinated_objects, c.mentioned_objects, c.chair_s, c.hallucinated_sentences, c.sentences
    );
}
