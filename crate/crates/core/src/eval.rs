//! Yes/no probe metrics with omission and fabrication counts, and caption
//! hallucination metrics over the synthetic vocabulary.

use std::collections::{BTreeSet, HashSet};
use std::fmt;
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::bench::{ObjectVocab, PopeLabel};
use crate::error::{LabError, Result};
use crate::tokens::{self, TokenId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Answer {
    Yes,
    No,
    Other,
}

impl Answer {
    pub fn from_token(token: Option<TokenId>) -> Self {
        match token {
            Some(tokens::YES) => Answer::Yes,
            Some(tokens::NO) => Answer::No,
            _ => Answer::Other,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Answer::Yes => "yes",
            Answer::No => "no",
            Answer::Other => "other",
        }
    }
}

impl fmt::Display for Answer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Prediction {
    pub question_id: String,
    pub answer: Answer,
    pub truth: PopeLabel,
}

impl Prediction {
    pub fn new(question_id: impl Into<String>, answer: Answer, truth: PopeLabel) -> Self {
        Self {
            question_id: question_id.into(),
            answer,
            truth,
        }
    }

    pub fn is_correct(&self) -> bool {
        matches!(
            (self.answer, self.truth),
            (Answer::Yes, PopeLabel::Present) | (Answer::No, PopeLabel::Absent)
        )
    }
}

/// Confusion counts with "yes" as the positive class.
///
/// `other` answers are wrong but belong to no confusion cell, so omission
/// and fabrication count only explicit "no" and "yes" answers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HallucinationReport {
    pub total: usize,
    pub true_positive: usize,
    pub false_positive: usize,
    pub false_negative: usize,
    pub true_negative: usize,
    pub other_present: usize,
    pub other_absent: usize,
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Questions with truth present answered "no".
    pub omission: usize,
    /// Questions with truth absent answered "yes".
    pub fabrication: usize,
    pub precision_undefined: bool,
    pub recall_undefined: bool,
}

impl HallucinationReport {
    pub const CSV_HEADER: [&'static str; 15] = [
        "total",
        "tp",
        "fp",
        "fn",
        "tn",
        "other_present",
        "other_absent",
        "accuracy",
        "precision",
        "recall",
        "f1",
        "omission",
        "fabrication",
        "precision_undefined",
        "recall_undefined",
    ];

    pub fn csv_fields(&self) -> Vec<String> {
        vec![
            self.total.to_string(),
            self.true_positive.to_string(),
            self.false_positive.to_string(),
            self.false_negative.to_string(),
            self.true_negative.to_string(),
            self.other_present.to_string(),
            self.other_absent.to_string(),
            format!("{:.6}", self.accuracy),
            format!("{:.6}", self.precision),
            format!("{:.6}", self.recall),
            format!("{:.6}", self.f1),
            self.omission.to_string(),
            self.fabrication.to_string(),
            self.precision_undefined.to_string(),
            self.recall_undefined.to_string(),
        ]
    }
}

fn ratio(num: usize, den: usize) -> (f64, bool) {
    if den == 0 {
        (0.0, true)
    } else {
        (num as f64 / den as f64, false)
    }
}

pub fn pope_metrics(predictions: &[Prediction]) -> Result<HallucinationReport> {
    if predictions.is_empty() {
        return Err(LabError::Eval("no predictions to score".into()));
    }
    let mut seen = HashSet::with_capacity(predictions.len());
    let mut dup = BTreeSet::new();
    for p in predictions {
        if !seen.insert(p.question_id.as_str()) {
            dup.insert(p.question_id.as_str());
        }
    }
    if !dup.is_empty() {
        return Err(LabError::Eval(format!("duplicate question ids: {dup:?}")));
    }
    let (mut tp, mut fp, mut fneg, mut tn, mut op, mut oa) = (0, 0, 0, 0, 0, 0);
    for p in predictions {
        match (p.answer, p.truth) {
            (Answer::Yes, PopeLabel::Present) => tp += 1,
            (Answer::Yes, PopeLabel::Absent) => fp += 1,
            (Answer::No, PopeLabel::Present) => fneg += 1,
            (Answer::No, PopeLabel::Absent) => tn += 1,
            (Answer::Other, PopeLabel::Present) => op += 1,
            (Answer::Other, PopeLabel::Absent) => oa += 1,
        }
    }
    let total = predictions.len();
    let (precision, precision_undefined) = ratio(tp, tp + fp);
    let (recall, recall_undefined) = ratio(tp, tp + fneg);
    let f1 = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };
    Ok(HallucinationReport {
        total,
        true_positive: tp,
        false_positive: fp,
        false_negative: fneg,
        true_negative: tn,
        other_present: op,
        other_absent: oa,
        accuracy: (tp + tn) as f64 / total as f64,
        precision,
        recall,
        f1,
        omission: fneg,
        fabrication: fp,
        precision_undefined,
        recall_undefined,
    })
}

/// Objects named in a caption and its sentence structure.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct CaptionParse {
    /// Distinct objects mentioned anywhere.
    pub objects: BTreeSet<usize>,
    /// Every resolved mention in order, duplicates kept.
    pub mentions: Vec<usize>,
    /// Token ranges of nonempty sentences, delimiters excluded.
    pub sentences: Vec<Range<usize>>,
    /// Distinct objects per sentence.
    pub sentence_objects: Vec<BTreeSet<usize>>,
}

/// Splits on `.` and stops at `<EOS>`; names and synonyms resolve to objects.
pub fn parse_caption_objects(caption: &[TokenId], vocab: &ObjectVocab) -> CaptionParse {
    let end = caption.iter().position(|&t| t == tokens::EOS).unwrap_or(caption.len());
    let mut out = CaptionParse::default();
    let mut start = 0;
    for i in 0..=end {
        if i < end && caption[i] != tokens::PERIOD {
            continue;
        }
        if i > start {
            let mut objs = BTreeSet::new();
            for &t in &caption[start..i] {
                if let Some(o) = vocab.resolve(t) {
                    out.mentions.push(o);
                    out.objects.insert(o);
                    objs.insert(o);
                }
            }
            out.sentences.push(start..i);
            out.sentence_objects.push(objs);
        }
        start = i + 1;
    }
    out
}

/// A generated caption and the objects actually in its scene.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaptionSample {
    pub id: String,
    pub tokens: Vec<TokenId>,
    pub present: BTreeSet<usize>,
}

/// Pooled caption hallucination rates with the counts behind them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChairReport {
    /// Distinct hallucinated objects over distinct mentioned objects, per caption, pooled.
    pub chair_i: f64,
    pub hallucinated_objects: usize,
    pub mentioned_objects: usize,
    /// Raw-mention variant of `chair_i`.
    pub chair_i_mentions: f64,
    pub hallucinated_mentions: usize,
    pub mentions: usize,
    /// Fraction of sentences with at least one hallucinated object.
    pub chair_s: f64,
    pub hallucinated_sentences: usize,
    pub sentences: usize,
    /// Fraction of captions with at least one hallucinated object.
    pub chair_s_caption: f64,
    pub hallucinated_captions: usize,
    pub captions: usize,
    pub no_mentions: bool,
}

pub fn chair_metrics(samples: &[CaptionSample], vocab: &ObjectVocab) -> ChairReport {
    let (mut ho, mut mo, mut hm, mut m, mut hs, mut s, mut hc) = (0, 0, 0, 0, 0, 0, 0);
    for sample in samples {
        let parse = parse_caption_objects(&sample.tokens, vocab);
        let bad = |o: &usize| !sample.present.contains(o);
        mo += parse.objects.len();
        ho += parse.objects.iter().filter(|o| bad(o)).count();
        m += parse.mentions.len();
        hm += parse.mentions.iter().filter(|o| bad(o)).count();
        s += parse.sentences.len();
        hs += parse.sentence_objects.iter().filter(|set| set.iter().any(bad)).count();
        hc += usize::from(parse.objects.iter().any(bad));
    }
    let (chair_i, no_mentions) = ratio(ho, mo);
    ChairReport {
        chair_i,
        hallucinated_objects: ho,
        mentioned_objects: mo,
        chair_i_mentions: ratio(hm, m).0,
        hallucinated_mentions: hm,
        mentions: m,
        chair_s: ratio(hs, s).0,
        hallucinated_sentences: hs,
        sentences: s,
        chair_s_caption: ratio(hc, samples.len()).0,
        hallucinated_captions: hc,
        captions: samples.len(),
        no_mentions,
    }
}
