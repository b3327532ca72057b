//! Config-driven evaluation runs, parameter sweeps and report bundles.
//!
//! A bundle directory holds:
//!
//! - `config.toml`: the canonical config
//! - `predictions.csv`: one row per policy, subset and question
//! - `pope_report.csv`: one row per subset and policy
//! - `delta.csv`: accuracy, omission and fabrication changes vs the regular policy
//! - `captions.csv`, `chair_report.csv`: caption runs, when enabled
//! - `interventions.jsonl`: steering records, when enabled
//! - `report.json`: every report with full counts
//! - `manifest.json`: config hash, seed, completeness and file digests (written last)

mod config;

pub use config::{CaptionSpec, DataSpec, ExperimentConfig, PolicyEntry, SweepSpec};

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::bench::{render_visual_tokens, Dataset, PopeLabel, PopeQuestion, PopeSubset, Scene, World};
use crate::error::{LabError, Result};
use crate::eval::{chair_metrics, pope_metrics, Answer, CaptionSample, ChairReport, HallucinationReport, Prediction};
use crate::intervene::{apply_steering, calibrate, select_heads, HeadImportance, InterventionRecord, VpfcParams};
use crate::model::{greedy_decode, load_checkpoint, HeadSite, ModelWeights, PromptInput};
use crate::policy::run_policy;
use crate::tokens::{self, TokenId};

pub const BUNDLE_SCHEMA_VERSION: u32 = 1;

/// Writes `bytes` to a sibling temp file, then renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    let name = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "out".into());
    let tmp = path.with_file_name(format!(".{name}.tmp"));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Seed derived from the master seed and a question id.
pub fn question_seed(master: u64, id: &str) -> u64 {
    let d = Sha256::digest(id.as_bytes());
    master ^ u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
}

/// Rendered scene plus prompt; localization reads the final prompt token.
pub fn prompt_for(world: &World, scene: &Scene, prompt: &[TokenId]) -> Result<PromptInput> {
    Ok(PromptInput::new(render_visual_tokens(world, scene)?, prompt.to_vec()))
}

pub fn question_input(dataset: &Dataset, question: &PopeQuestion) -> Result<PromptInput> {
    let scene = dataset
        .scene(question.scene_id)
        .ok_or_else(|| LabError::Dataset(format!("question {} names unknown scene", question.id)))?;
    prompt_for(&dataset.world, scene, &question.prompt)
}

/// One answered probe.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuestionRecord {
    pub policy: String,
    pub subset: PopeSubset,
    pub question_id: String,
    pub scene_id: u64,
    pub object: usize,
    pub truth: PopeLabel,
    pub answer: Answer,
    /// Probability of "yes" in the distribution the answer was chosen from.
    pub p_yes: f64,
}

impl QuestionRecord {
    pub fn prediction(&self) -> Prediction {
        Prediction::new(self.question_id.clone(), self.answer, self.truth)
    }
}

/// Answers every question of `questions` under one policy.
pub fn answer_questions<'a>(
    weights: &ModelWeights,
    dataset: &Dataset,
    questions: impl IntoIterator<Item = &'a PopeQuestion>,
    entry: &PolicyEntry,
    vpfc: &VpfcParams,
    seed: u64,
    mut on_record: impl FnMut(&PopeQuestion, Option<InterventionRecord>),
) -> Result<Vec<QuestionRecord>> {
    let vpfc = entry.vpfc.as_ref().unwrap_or(vpfc);
    let label = entry.label();
    let mut out = Vec::new();
    for q in questions {
        let input = question_input(dataset, q)?;
        let res = run_policy(weights, &input, &entry.params, vpfc, question_seed(seed, &q.id), 1)
            .map_err(|e| LabError::Eval(format!("policy {label} on question {}: {e}", q.id)))?;
        let p_yes = res.decoded.distributions.first().map_or(0.0, |d| d[tokens::YES]);
        out.push(QuestionRecord {
            policy: label.clone(),
            subset: q.subset,
            question_id: q.id.clone(),
            scene_id: q.scene_id,
            object: q.object,
            truth: q.label,
            answer: Answer::from_token(res.decoded.first_token()),
            p_yes,
        });
        on_record(q, res.intervention);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellReport {
    pub subset: PopeSubset,
    pub policy: String,
    pub report: HallucinationReport,
}

/// Change of one policy against the reference on one subset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeltaRow {
    pub subset: PopeSubset,
    pub policy: String,
    pub accuracy: f64,
    pub delta_accuracy: f64,
    pub omission: usize,
    pub delta_omission: i64,
    pub fabrication: usize,
    pub delta_fabrication: i64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaptionRecord {
    pub policy: String,
    pub scene_id: u64,
    pub tokens: Vec<TokenId>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChairCell {
    pub policy: String,
    pub report: ChairReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterventionEntry {
    pub policy: String,
    pub subset: PopeSubset,
    pub question_id: String,
    pub record: InterventionRecord,
}

/// Everything a run produces.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ReportBundle {
    pub name: String,
    pub config_sha256: String,
    pub seed: u64,
    pub records: Vec<QuestionRecord>,
    pub cells: Vec<CellReport>,
    pub deltas: Vec<DeltaRow>,
    pub captions: Vec<CaptionRecord>,
    pub chair: Vec<ChairCell>,
    pub interventions: Vec<InterventionEntry>,
    pub complete: bool,
    pub error: Option<String>,
}

impl ReportBundle {
    pub fn cell(&self, subset: PopeSubset, policy: &str) -> Option<&HallucinationReport> {
        self.cells
            .iter()
            .find(|c| c.subset == subset && c.policy == policy)
            .map(|c| &c.report)
    }

    pub fn delta(&self, subset: PopeSubset, policy: &str) -> Option<&DeltaRow> {
        self.deltas.iter().find(|d| d.subset == subset && d.policy == policy)
    }
}

/// Per-cell deltas against `reference` wherever the reference cell exists.
pub fn delta_table(cells: &[CellReport], reference: &str) -> Vec<DeltaRow> {
    cells
        .iter()
        .filter_map(|c| {
            let base = cells.iter().find(|b| b.subset == c.subset && b.policy == reference)?;
            Some(DeltaRow {
                subset: c.subset,
                policy: c.policy.clone(),
                accuracy: c.report.accuracy,
                delta_accuracy: c.report.accuracy - base.report.accuracy,
                omission: c.report.omission,
                delta_omission: c.report.omission as i64 - base.report.omission as i64,
                fabrication: c.report.fabrication,
                delta_fabrication: c.report.fabrication as i64 - base.report.fabrication as i64,
            })
        })
        .collect()
}

fn load_inputs(config: &ExperimentConfig) -> Result<(ModelWeights, Dataset)> {
    config.validate()?;
    let weights = load_checkpoint(&config.checkpoint)?;
    let dataset = config.data.dataset(&weights.config)?;
    if dataset.world.grid_side != weights.config.grid_side || dataset.world.vocab.dim() != weights.config.model_dim {
        return Err(LabError::config(
            "dataset world does not match the checkpoint's grid or width",
        ));
    }
    Ok((weights, dataset))
}

fn evaluate_into(
    config: &ExperimentConfig,
    weights: &ModelWeights,
    dataset: &Dataset,
    bundle: &mut ReportBundle,
) -> Result<()> {
    for &subset in &config.subsets {
        for entry in &config.policies {
            let label = entry.label();
            let mut interventions = Vec::new();
            let records = answer_questions(
                weights,
                dataset,
                dataset.questions_in(subset),
                entry,
                &config.vpfc,
                config.seed,
                |q, rec| {
                    if let (true, Some(record)) = (config.record_interventions, rec) {
                        interventions.push(InterventionEntry {
                            policy: label.clone(),
                            subset,
                            question_id: q.id.clone(),
                            record,
                        });
                    }
                },
            )?;
            let preds: Vec<Prediction> = records.iter().map(QuestionRecord::prediction).collect();
            let report = pope_metrics(&preds)?;
            log::info!("{subset}/{label}: accuracy {:.4}", report.accuracy);
            bundle.records.extend(records);
            bundle.interventions.extend(interventions);
            bundle.cells.push(CellReport {
                subset,
                policy: label,
                report,
            });
        }
    }
    if config.captions.count > 0 {
        for entry in &config.policies {
            let vpfc = entry.vpfc.as_ref().unwrap_or(&config.vpfc);
            let mut samples = Vec::new();
            for scene in dataset.scenes.iter().take(config.captions.count) {
                let input = prompt_for(&dataset.world, scene, &tokens::caption_prompt())?;
                let seed = question_seed(config.seed, &format!("caption-{}", scene.id));
                let out = run_policy(weights, &input, &entry.params, vpfc, seed, config.captions.max_tokens)?;
                bundle.captions.push(CaptionRecord {
                    policy: entry.label(),
                    scene_id: scene.id,
                    tokens: out.decoded.tokens.clone(),
                });
                samples.push(CaptionSample {
                    id: scene.id.to_string(),
                    tokens: out.decoded.tokens,
                    present: scene.present.clone(),
                });
            }
            bundle.chair.push(ChairCell {
                policy: entry.label(),
                report: chair_metrics(&samples, &dataset.world.vocab),
            });
        }
    }
    Ok(())
}

/// Evaluates every policy on every subset and writes the bundle.
///
/// A failure after inputs load still writes the finished cells with the
/// manifest marked incomplete, then returns [`LabError::Incomplete`].
pub fn run_experiment(config: &ExperimentConfig) -> Result<ReportBundle> {
    let (weights, dataset) = load_inputs(config)?;
    let mut bundle = ReportBundle {
        name: config.name.clone(),
        config_sha256: config.hash()?,
        seed: config.seed,
        ..ReportBundle::default()
    };
    let outcome = evaluate_into(config, &weights, &dataset, &mut bundle);
    let reference = config.reference().expect("validated").label();
    bundle.deltas = delta_table(&bundle.cells, &reference);
    bundle.complete = outcome.is_ok();
    bundle.error = outcome.as_ref().err().map(ToString::to_string);
    write_bundle(config, &bundle)?;
    match outcome {
        Ok(()) => Ok(bundle),
        Err(e) => Err(LabError::Incomplete(format!(
            "{e}; partial results in {}",
            config.output_dir.display()
        ))),
    }
}

fn csv_bytes(header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header)?;
    for r in rows {
        w.write_record(&r)?;
    }
    w.into_inner().map_err(|e| LabError::Io(e.into_error()))
}

fn pope_csv(cells: &[CellReport]) -> Result<Vec<u8>> {
    let mut header = vec!["subset", "policy"];
    header.extend(HallucinationReport::CSV_HEADER);
    csv_bytes(
        &header,
        cells.iter().map(|c| {
            let mut row = vec![c.subset.to_string(), c.policy.clone()];
            row.extend(c.report.csv_fields());
            row
        }),
    )
}

const PREDICTION_HEADER: [&str; 8] = [
    "policy",
    "subset",
    "question_id",
    "scene_id",
    "object",
    "truth",
    "answer",
    "p_yes",
];

fn label_name(label: PopeLabel) -> &'static str {
    match label {
        PopeLabel::Present => "present",
        PopeLabel::Absent => "absent",
    }
}

fn token_text(vocab: &crate::bench::ObjectVocab, t: TokenId) -> String {
    tokens::control_name(t)
        .map(str::to_string)
        .or_else(|| vocab.resolve(t).map(|o| vocab.categories[o].name.clone()))
        .unwrap_or_else(|| format!("#{t}"))
}

/// Files of a bundle, in write order, excluding the manifest.
fn bundle_files(config: &ExperimentConfig, bundle: &ReportBundle) -> Result<Vec<(&'static str, Vec<u8>)>> {
    let mut files = vec![("config.toml", config.to_toml()?.into_bytes())];
    files.push((
        "predictions.csv",
        csv_bytes(
            &PREDICTION_HEADER,
            bundle.records.iter().map(|r| {
                vec![
                    r.policy.clone(),
                    r.subset.to_string(),
                    r.question_id.clone(),
                    r.scene_id.to_string(),
                    r.object.to_string(),
                    label_name(r.truth).into(),
                    r.answer.to_string(),
                    format!("{:.9}", r.p_yes),
                ]
            }),
        )?,
    ));
    files.push(("pope_report.csv", pope_csv(&bundle.cells)?));
    files.push((
        "delta.csv",
        csv_bytes(
            &[
                "subset",
                "policy",
                "accuracy",
                "delta_accuracy",
                "omission",
                "delta_omission",
                "fabrication",
                "delta_fabrication",
            ],
            bundle.deltas.iter().map(|d| {
                vec![
                    d.subset.to_string(),
                    d.policy.clone(),
                    format!("{:.6}", d.accuracy),
                    format!("{:.6}", d.delta_accuracy),
                    d.omission.to_string(),
                    d.delta_omission.to_string(),
                    d.fabrication.to_string(),
                    d.delta_fabrication.to_string(),
                ]
            }),
        )?,
    ));
    if config.captions.count > 0 {
        let world = config.data.world(&config.model).ok();
        files.push((
            "captions.csv",
            csv_bytes(
                &["policy", "scene_id", "caption"],
                bundle.captions.iter().map(|c| {
                    let text = match &world {
                        Some(w) => c
                            .tokens
                            .iter()
                            .map(|&t| token_text(&w.vocab, t))
                            .collect::<Vec<_>>()
                            .join(" "),
                        None => c.tokens.iter().map(ToString::to_string).collect::<Vec<_>>().join(" "),
                    };
                    vec![c.policy.clone(), c.scene_id.to_string(), text]
                }),
            )?,
        ));
        files.push((
            "chair_report.csv",
            csv_bytes(
                &[
                    "policy",
                    "chair_i",
                    "hallucinated_objects",
                    "mentioned_objects",
                    "chair_i_mentions",
                    "hallucinated_mentions",
                    "mentions",
                    "chair_s",
                    "hallucinated_sentences",
                    "sentences",
                    "chair_s_caption",
                    "hallucinated_captions",
                    "captions",
                    "no_mentions",
                ],
                bundle.chair.iter().map(|c| {
                    let r = &c.report;
                    vec![
                        c.policy.clone(),
                        format!("{:.6}", r.chair_i),
                        r.hallucinated_objects.to_string(),
                        r.mentioned_objects.to_string(),
                        format!("{:.6}", r.chair_i_mentions),
                        r.hallucinated_mentions.to_string(),
                        r.mentions.to_string(),
                        format!("{:.6}", r.chair_s),
                        r.hallucinated_sentences.to_string(),
                        r.sentences.to_string(),
                        format!("{:.6}", r.chair_s_caption),
                        r.hallucinated_captions.to_string(),
                        r.captions.to_string(),
                        r.no_mentions.to_string(),
                    ]
                }),
            )?,
        ));
    }
    if config.record_interventions {
        let mut lines = Vec::new();
        for e in &bundle.interventions {
            serde_json::to_writer(&mut lines, e)?;
            lines.push(b'\n');
        }
        files.push(("interventions.jsonl", lines));
    }
    let report = serde_json::json!({
        "name": bundle.name,
        "config_sha256": bundle.config_sha256,
        "seed": bundle.seed,
        "complete": bundle.complete,
        "error": bundle.error,
        "pope": bundle.cells,
        "deltas": bundle.deltas,
        "chair": bundle.chair,
    });
    files.push(("report.json", serde_json::to_vec_pretty(&report)?));
    Ok(files)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestFile {
    pub name: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub schema_version: u32,
    pub name: String,
    pub config_sha256: String,
    pub seed: u64,
    pub complete: bool,
    pub error: Option<String>,
    pub files: Vec<ManifestFile>,
}

impl Manifest {
    pub fn load(dir: &Path) -> Result<Self> {
        let text = fs::read_to_string(dir.join("manifest.json"))?;
        Ok(serde_json::from_str(&text)?)
    }

    /// Hash of the manifest's own canonical JSON.
    pub fn digest(&self) -> Result<String> {
        Ok(sha256_hex(&serde_json::to_vec(self)?))
    }
}

fn write_bundle(config: &ExperimentConfig, bundle: &ReportBundle) -> Result<Manifest> {
    let dir = &config.output_dir;
    fs::create_dir_all(dir)?;
    let mut manifest = Manifest {
        schema_version: BUNDLE_SCHEMA_VERSION,
        name: bundle.name.clone(),
        config_sha256: bundle.config_sha256.clone(),
        seed: bundle.seed,
        complete: bundle.complete,
        error: bundle.error.clone(),
        files: Vec::new(),
    };
    for (name, bytes) in bundle_files(config, bundle)? {
        write_atomic(&dir.join(name), &bytes)?;
        manifest.files.push(ManifestFile {
            name: name.to_string(),
            sha256: sha256_hex(&bytes),
            bytes: bytes.len() as u64,
        });
    }
    write_atomic(&dir.join("manifest.json"), &serde_json::to_vec_pretty(&manifest)?)?;
    Ok(manifest)
}

/// Outcome of re-deriving a bundle's reports from its prediction log.
#[derive(Debug, Clone, PartialEq)]
pub struct Recount {
    pub manifest: Manifest,
    pub cells: Vec<CellReport>,
    /// Cells whose shipped report differs from the recount.
    pub mismatches: Vec<String>,
    /// Files whose digest differs from the manifest.
    pub corrupted: Vec<String>,
}

impl Recount {
    pub fn is_consistent(&self) -> bool {
        self.mismatches.is_empty() && self.corrupted.is_empty()
    }
}

fn parse_field<T: FromStr>(v: &str, what: &str) -> Result<T> {
    v.parse()
        .map_err(|_| LabError::Eval(format!("bad {what} '{v}' in prediction log")))
}

/// Reads `predictions.csv` back into records.
pub fn read_predictions(dir: &Path) -> Result<Vec<QuestionRecord>> {
    let mut rdr = csv::Reader::from_path(dir.join("predictions.csv"))?;
    let mut out = Vec::new();
    for row in rdr.records() {
        let row = row?;
        let f = |i: usize| row.get(i).unwrap_or_default();
        let answer = match f(6) {
            "yes" => Answer::Yes,
            "no" => Answer::No,
            _ => Answer::Other,
        };
        let truth = match f(5) {
            "present" => PopeLabel::Present,
            "absent" => PopeLabel::Absent,
            other => return Err(LabError::Eval(format!("bad truth label '{other}' in prediction log"))),
        };
        out.push(QuestionRecord {
            policy: f(0).to_string(),
            subset: f(1).parse()?,
            question_id: f(2).to_string(),
            scene_id: parse_field(f(3), "scene id")?,
            object: parse_field(f(4), "object")?,
            truth,
            answer,
            p_yes: parse_field(f(7), "p_yes")?,
        });
    }
    Ok(out)
}

/// Recomputes every POPE cell from the shipped log and checks file digests.
pub fn recount_bundle(dir: &Path) -> Result<Recount> {
    let manifest = Manifest::load(dir)?;
    let mut corrupted = Vec::new();
    for f in &manifest.files {
        match fs::read(dir.join(&f.name)) {
            Ok(bytes) if sha256_hex(&bytes) == f.sha256 => {}
            _ => corrupted.push(f.name.clone()),
        }
    }
    let mut groups: BTreeMap<(String, PopeSubset), Vec<Prediction>> = BTreeMap::new();
    let mut order = Vec::new();
    for r in read_predictions(dir)? {
        let key = (r.policy.clone(), r.subset);
        if !groups.contains_key(&key) {
            order.push(key.clone());
        }
        groups.entry(key).or_default().push(r.prediction());
    }
    let mut cells = Vec::new();
    for key in order {
        cells.push(CellReport {
            subset: key.1,
            policy: key.0.clone(),
            report: pope_metrics(&groups[&key])?,
        });
    }
    let mut mismatches = Vec::new();
    let shipped = fs::read(dir.join("pope_report.csv"))?;
    let mut rdr = csv::Reader::from_reader(shipped.as_slice());
    let mut shipped_rows = BTreeSet::new();
    for row in rdr.records() {
        shipped_rows.insert(row?.iter().map(str::to_string).collect::<Vec<_>>());
    }
    let mut recounted_rows = BTreeSet::new();
    for c in &cells {
        let mut row = vec![c.subset.to_string(), c.policy.clone()];
        row.extend(c.report.csv_fields());
        if !shipped_rows.contains(&row) {
            mismatches.push(format!("{}/{}", c.subset, c.policy));
        }
        recounted_rows.insert(row);
    }
    for row in shipped_rows.difference(&recounted_rows) {
        let name = format!("{}/{}", row[0], row[1]);
        if !mismatches.contains(&name) {
            mismatches.push(name);
        }
    }
    Ok(Recount {
        manifest,
        cells,
        mismatches,
        corrupted,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SweepParam {
    Gamma,
    Alpha,
}

impl SweepParam {
    pub fn name(self) -> &'static str {
        match self {
            SweepParam::Gamma => "gamma",
            SweepParam::Alpha => "alpha",
        }
    }
}

impl fmt::Display for SweepParam {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SweepParam {
    type Err = LabError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gamma" => Ok(SweepParam::Gamma),
            "alpha" => Ok(SweepParam::Alpha),
            _ => Err(LabError::config(format!("unknown sweep parameter '{s}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub value: f64,
    pub accuracy: f64,
    pub omission: usize,
    pub fabrication: usize,
    pub total: usize,
}

/// Steered heads of one question at one grid point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepHeads {
    pub value: f64,
    pub question_id: String,
    pub heads: Vec<HeadSite>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepTable {
    pub param: SweepParam,
    pub subset: PopeSubset,
    pub rows: Vec<SweepRow>,
    pub heads: Vec<SweepHeads>,
}

impl SweepTable {
    pub fn rows_csv(&self) -> Result<Vec<u8>> {
        csv_bytes(
            &[self.param.name(), "accuracy", "omission", "fabrication", "total"],
            self.rows.iter().map(|r| {
                vec![
                    r.value.to_string(),
                    format!("{:.6}", r.accuracy),
                    r.omission.to_string(),
                    r.fabrication.to_string(),
                    r.total.to_string(),
                ]
            }),
        )
    }

    pub fn heads_csv(&self) -> Result<Vec<u8>> {
        csv_bytes(
            &[self.param.name(), "question_id", "heads"],
            self.heads.iter().map(|h| {
                let heads = h.heads.iter().map(ToString::to_string).collect::<Vec<_>>().join(";");
                vec![h.value.to_string(), h.question_id.clone(), heads]
            }),
        )
    }

    /// Writes `sweep_<param>.csv` and `sweep_<param>_heads.csv` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        write_atomic(&dir.join(format!("sweep_{}.csv", self.param)), &self.rows_csv()?)?;
        write_atomic(&dir.join(format!("sweep_{}_heads.csv", self.param)), &self.heads_csv()?)
    }
}

/// Drops repeated grid values, keeping first occurrences in order.
pub fn dedup_grid(grid: &[f64]) -> Vec<f64> {
    let mut seen = BTreeSet::new();
    let out: Vec<f64> = grid.iter().copied().filter(|v| seen.insert(v.to_bits())).collect();
    if out.len() < grid.len() {
        log::warn!("sweep grid had {} duplicate values; dropped", grid.len() - out.len());
    }
    out
}

/// Steered accuracy per grid point on the configured subset. Calibration
/// runs once per question; each grid point only re-selects heads or rescales.
pub fn run_sweep(config: &ExperimentConfig, param: SweepParam) -> Result<SweepTable> {
    let raw = match param {
        SweepParam::Gamma => &config.sweep.gamma,
        SweepParam::Alpha => &config.sweep.alpha,
    };
    if raw.is_empty() {
        return Err(LabError::config(format!("{param} sweep grid is empty")));
    }
    let grid = dedup_grid(raw);
    let (weights, dataset) = load_inputs(config)?;
    let cfg = &weights.config;
    let subset = config.sweep.subset;
    let mut preds: Vec<Vec<Prediction>> = vec![Vec::new(); grid.len()];
    let mut heads = Vec::new();
    for q in dataset.questions_in(subset) {
        let input = question_input(&dataset, q)?;
        let cal = calibrate(&weights, &input, &config.vpfc)
            .map_err(|e| LabError::Eval(format!("calibration of question {}: {e}", q.id)))?;
        let importance = HeadImportance {
            num_layers: cfg.num_layers,
            num_heads: cfg.num_heads,
            values: cal.record.importance.clone(),
            loss: 0.0,
        };
        for (k, &v) in grid.iter().enumerate() {
            let (gamma, alpha) = match param {
                SweepParam::Gamma => (v, config.vpfc.alpha_steer),
                SweepParam::Alpha => (config.vpfc.gamma, v),
            };
            let selected = select_heads(&importance, gamma)?;
            let hooks = apply_steering(&cal.field, &selected, alpha);
            let out = greedy_decode(&weights, &input, &hooks, 1)?;
            preds[k].push(Prediction::new(
                q.id.clone(),
                Answer::from_token(out.first_token()),
                q.label,
            ));
            heads.push(SweepHeads {
                value: v,
                question_id: q.id.clone(),
                heads: selected,
            });
        }
    }
    let mut rows = Vec::new();
    for (k, &v) in grid.iter().enumerate() {
        let r = pope_metrics(&preds[k])?;
        rows.push(SweepRow {
            value: v,
            accuracy: r.accuracy,
            omission: r.omission,
            fabrication: r.fabrication,
            total: r.total,
        });
    }
    heads.sort_by_key(|a| grid_pos(&grid, a.value));
    Ok(SweepTable {
        param,
        subset,
        rows,
        heads,
    })
}

fn grid_pos(grid: &[f64], v: f64) -> usize {
    grid.iter()
        .position(|g| g.to_bits() == v.to_bits())
        .unwrap_or(usize::MAX)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{save_checkpoint, ModelConfig};
    use crate::policy::PolicyKind;

    fn tiny(dir: &Path) -> ExperimentConfig {
        let model = ModelConfig {
            num_layers: 2,
            num_heads: 4,
            model_dim: 16,
            ..ModelConfig::default()
        };
        let ckpt = dir.join("m.ckpt");
        save_checkpoint(&ModelWeights::init(&model).unwrap(), &ckpt).unwrap();
        ExperimentConfig {
            name: "tiny".into(),
            output_dir: dir.join("bundle"),
            checkpoint: ckpt,
            model,
            data: DataSpec {
                num_scenes: 4,
                ..DataSpec::default()
            },
            policies: vec![
                PolicyEntry::of(PolicyKind::Regular),
                PolicyEntry::of(PolicyKind::Vcd),
                PolicyEntry::of(PolicyKind::Vpfc),
            ],
            vpfc: VpfcParams {
                localization_heads: 2,
                ..VpfcParams::default()
            },
            captions: CaptionSpec {
                count: 2,
                max_tokens: 4,
            },
            record_interventions: true,
            ..ExperimentConfig::default()
        }
    }

    #[test]
    fn regular_only_gives_zero_deltas() {
        let dir = tempfile::tempdir().unwrap();
        let mut c = tiny(dir.path());
        c.policies.truncate(1);
        let b = run_experiment(&c).unwrap();
        assert_eq!(b.deltas.len(), 3);
        for d in &b.deltas {
            assert_eq!((d.delta_accuracy, d.delta_omission, d.delta_fabrication), (0.0, 0, 0));
        }
    }

    #[test]
    fn bundle_recounts_and_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let c = tiny(dir.path());
        let b = run_experiment(&c).unwrap();
        assert!(b.complete);
        assert_eq!(b.cells.len(), 9);
        assert_eq!(b.chair.len(), 3);
        let first = Manifest::load(&c.output_dir).unwrap();
        let bytes: Vec<Vec<u8>> = first
            .files
            .iter()
            .map(|f| fs::read(c.output_dir.join(&f.name)).unwrap())
            .collect();
        run_experiment(&c).unwrap();
        let second = Manifest::load(&c.output_dir).unwrap();
        assert_eq!(first, second);
        for (f, b) in first.files.iter().zip(&bytes) {
            assert_eq!(&fs::read(c.output_dir.join(&f.name)).unwrap(), b, "{}", f.name);
        }
        let rc = recount_bundle(&c.output_dir).unwrap();
        assert!(rc.is_consistent(), "{:?} {:?}", rc.mismatches, rc.corrupted);
        assert_eq!(rc.cells, b.cells);
    }

    #[test]
    fn tampered_bundle_detected() {
        let dir = tempfile::tempdir().unwrap();
        let c = tiny(dir.path());
        run_experiment(&c).unwrap();
        let path = c.output_dir.join("predictions.csv");
        let text = fs::read_to_string(&path).unwrap();
        let flipped = text.replacen(",present,", ",absent,", 1);
        assert_ne!(flipped, text);
        fs::write(&path, flipped).unwrap();
        let rc = recount_bundle(&c.output_dir).unwrap();
        assert!(!rc.is_consistent());
        assert!(rc.corrupted.contains(&"predictions.csv".to_string()));
        assert!(!rc.mismatches.is_empty());
    }

    #[test]
    fn stage_failure_keeps_partial_results() {
        let dir = tempfile::tempdir().unwrap();
        let mut c = tiny(dir.path());
        c.captions.max_tokens = 200;
        let err = run_experiment(&c).unwrap_err();
        assert_eq!(err.exit_code(), 4);
        let m = Manifest::load(&c.output_dir).unwrap();
        assert!(!m.complete);
        assert!(m.error.is_some());
        let rc = recount_bundle(&c.output_dir).unwrap();
        assert_eq!(rc.cells.len(), 9);
        assert!(rc.is_consistent());
    }

    #[test]
    fn sweeps() {
        let dir = tempfile::tempdir().unwrap();
        let mut c = tiny(dir.path());
        c.policies.truncate(1);
        c.subsets = vec![PopeSubset::Adversarial];
        c.sweep.alpha = vec![0.0, 0.0, 4.0];
        let regular = run_experiment(&c).unwrap();
        let t = run_sweep(&c, SweepParam::Alpha).unwrap();
        assert_eq!(t.rows.len(), 2);
        assert_eq!(
            t.rows[0].accuracy,
            regular.cell(PopeSubset::Adversarial, "regular").unwrap().accuracy
        );

        c.sweep.gamma = vec![0.125, 0.25, 0.5];
        let g = run_sweep(&c, SweepParam::Gamma).unwrap();
        g.write(&c.output_dir).unwrap();
        let text = fs::read_to_string(c.output_dir.join("sweep_gamma_heads.csv")).unwrap();
        let mut by_q: BTreeMap<String, Vec<(f64, BTreeSet<String>)>> = BTreeMap::new();
        for line in text.lines().skip(1) {
            let f: Vec<&str> = line.split(',').collect();
            by_q.entry(f[1].to_string())
                .or_default()
                .push((f[0].parse().unwrap(), f[2].split(';').map(str::to_string).collect()));
        }
        assert!(!by_q.is_empty());
        for sets in by_q.values() {
            assert_eq!(sets.len(), 3);
            for w in sets.windows(2) {
                assert!(w[0].0 < w[1].0 && w[0].1.is_subset(&w[1].1));
            }
        }
        c.sweep.gamma.clear();
        assert!(run_sweep(&c, SweepParam::Gamma).is_err());
    }
}
