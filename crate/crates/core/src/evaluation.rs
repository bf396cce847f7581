//! Perfect-repair scoring and the experiment harnesses built on it: an
//! end-to-end fit/evaluate pipeline, the 2x2 sampling/prompt ablation and
//! the sample-count sweep.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::corpus::SampleRecord;
use crate::error::{Error, Result};
use crate::generation::beam_search;
use crate::model::{CRepair, ModelConfig};
use crate::preproc::{prepare, PromptMode};
use crate::tokenizer::{train_bpe, BpeVocab};
use crate::training::{prepare_examples, train, TrainConfig, TrainReport};

/// Full-scale ablation ratios, shown next to measured tables for reference.
pub const REFERENCE_ABLATION: [(&str, f64); 4] = [("MP", 0.5189), ("NP", 0.4621), ("MN", 0.4304), ("NN", 0.3834)];

/// Full-scale sample-count sweep, shown for reference.
pub const REFERENCE_SWEEP: [(usize, f64); 5] = [(1, 0.4634), (3, 0.4716), (5, 0.5086), (7, 0.4825), (9, 0.4847)];

/// Collapses whitespace runs to one space and trims.
pub fn normalize_whitespace(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Ratio printed with four decimals.
pub fn format_ratio(ratio: f64) -> String {
    format!("{ratio:.4}")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordResult {
    pub id: String,
    /// 1-based rank of the first matching candidate; `None` is a miss.
    pub hit_rank: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub total: usize,
    pub perfect: usize,
    pub ratio: f64,
    pub records: Vec<RecordResult>,
}

impl EvalResult {
    pub fn from_records(records: Vec<RecordResult>) -> Result<Self> {
        if records.is_empty() {
            return Err(Error::invalid("no records to evaluate"));
        }
        let perfect = records.iter().filter(|r| r.hit_rank.is_some()).count();
        Ok(EvalResult {
            total: records.len(),
            perfect,
            ratio: perfect as f64 / records.len() as f64,
            records,
        })
    }
}

impl fmt::Display for EvalResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "perfect repairs {}/{} = {}", self.perfect, self.total, format_ratio(self.ratio))
    }
}

/// Record ids default to their index.
pub fn perfect_repair_ratio<S: AsRef<str>, T: AsRef<str>>(candidates: &[Vec<S>], targets: &[T]) -> Result<EvalResult> {
    let ids: Vec<String> = (0..targets.len()).map(|i| i.to_string()).collect();
    score_records(&ids, candidates, targets)
}

pub fn score_records<S: AsRef<str>, T: AsRef<str>>(ids: &[String], candidates: &[Vec<S>], targets: &[T]) -> Result<EvalResult> {
    if candidates.len() != targets.len() || ids.len() != targets.len() {
        return Err(Error::invalid(format!(
            "{} candidate lists for {} targets",
            candidates.len(),
            targets.len()
        )));
    }
    let records = ids
        .iter()
        .zip(candidates.iter().zip(targets))
        .map(|(id, (cands, target))| {
            let target = normalize_whitespace(target.as_ref());
            if target.is_empty() {
                return Err(Error::data(format!("record {id}: empty target")));
            }
            let hit_rank = cands
                .iter()
                .position(|c| normalize_whitespace(c.as_ref()) == target)
                .map(|i| i + 1);
            Ok(RecordResult { id: id.clone(), hit_rank })
        })
        .collect::<Result<Vec<_>>>()?;
    EvalResult::from_records(records)
}

/// Everything needed to fit and score one model on a record set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub preset: String,
    pub vocab_size: usize,
    pub beam_width: usize,
    /// Generated-token limit during decoding.
    pub decode_max_len: usize,
    pub train: TrainConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            preset: "toy".into(),
            vocab_size: 2000,
            beam_width: 10,
            decode_max_len: 64,
            train: TrainConfig::default(),
        }
    }
}

/// Latent treatment during training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sampling {
    pub noise: bool,
    pub count: usize,
}

impl Sampling {
    /// `Z = mu` with a single (unused) sample.
    pub const OFF: Sampling = Sampling { noise: false, count: 1 };

    pub fn multi(count: usize) -> Self {
        Sampling { noise: true, count }
    }
}

pub struct Fitted {
    pub vocab: BpeVocab,
    pub model: CRepair,
    pub report: TrainReport,
}

/// BPE vocabulary over the prompted inputs and targets, with every CWE id
/// of `records` as an atomic token.
pub fn train_tokenizer(records: &[SampleRecord], mode: PromptMode, vocab_size: usize) -> Result<BpeVocab> {
    let mut texts = Vec::with_capacity(2 * records.len());
    for r in records {
        let p = prepare(r, mode)?;
        texts.push(p.input_text);
        texts.push(p.target_text);
    }
    let mut cwes: Vec<String> = records.iter().map(|r| r.cwe_id.clone()).collect();
    cwes.sort();
    cwes.dedup();
    train_bpe(&texts, vocab_size, &cwes)
}

/// Trains a tokenizer on the prompted training set, then the model.
pub fn fit(
    cfg: &ExperimentConfig,
    mode: PromptMode,
    sampling: Sampling,
    train_records: &[SampleRecord],
    valid_records: &[SampleRecord],
) -> Result<Fitted> {
    let vocab = train_tokenizer(train_records, mode, cfg.vocab_size)?;
    fit_with_vocab(cfg, vocab, mode, sampling, train_records, valid_records)
}

pub fn fit_with_vocab(
    cfg: &ExperimentConfig,
    vocab: BpeVocab,
    mode: PromptMode,
    sampling: Sampling,
    train_records: &[SampleRecord],
    valid_records: &[SampleRecord],
) -> Result<Fitted> {
    let mut model_cfg = ModelConfig::preset(&cfg.preset, vocab.len())?;
    model_cfg.sample_count = sampling.count;
    let mut train_cfg = cfg.train.clone();
    train_cfg.latent_noise = sampling.noise;
    let train_set = prepare_examples(train_records, &vocab, mode, model_cfg.max_len)?;
    let valid_set = prepare_examples(valid_records, &vocab, mode, model_cfg.max_len)?;
    let outcome = train(&model_cfg, &train_cfg, &train_set, &valid_set)?;
    Ok(Fitted {
        vocab,
        model: outcome.model,
        report: outcome.report,
    })
}

/// Decoded candidate texts; an empty generation reads as the deletion marker.
pub fn repair_candidates(
    model: &CRepair,
    vocab: &BpeVocab,
    input_text: &str,
    beam_width: usize,
    max_len: usize,
) -> Result<Vec<String>> {
    let input = vocab.encode(input_text);
    Ok(beam_search(model, vocab, &input, beam_width, max_len)?
        .into_iter()
        .map(|c| {
            if c.text.trim().is_empty() {
                crate::preproc::EMPTY_PATCH.to_string()
            } else {
                c.text
            }
        })
        .collect())
}

/// Beam-decodes every record, splitting the work across available cores.
pub fn evaluate(
    model: &CRepair,
    vocab: &BpeVocab,
    records: &[SampleRecord],
    mode: PromptMode,
    beam_width: usize,
    max_len: usize,
) -> Result<EvalResult> {
    let prepared = records.iter().map(|r| prepare(r, mode)).collect::<Result<Vec<_>>>()?;
    let workers = std::thread::available_parallelism().map_or(1, |n| n.get()).min(prepared.len()).max(1);
    let chunk = prepared.len().div_ceil(workers).max(1);
    let candidates: Vec<Vec<String>> = std::thread::scope(|s| {
        let handles: Vec<_> = prepared
            .chunks(chunk)
            .map(|part| {
                s.spawn(move || {
                    part.iter()
                        .map(|p| repair_candidates(model, vocab, &p.input_text, beam_width, max_len))
                        .collect::<Result<Vec<_>>>()
                })
            })
            .collect();
        let mut out = Vec::with_capacity(prepared.len());
        for h in handles {
            out.extend(h.join().expect("evaluation worker panicked")?);
        }
        Ok::<_, Error>(out)
    })?;
    let ids: Vec<String> = records.iter().map(|r| r.id.clone()).collect();
    let targets: Vec<&str> = prepared.iter().map(|p| p.target_text.as_str()).collect();
    score_records(&ids, &candidates, &targets)
}

/// Fits on `train_records` and scores on `test_records`.
pub fn run_experiment(
    cfg: &ExperimentConfig,
    mode: PromptMode,
    sampling: Sampling,
    train_records: &[SampleRecord],
    valid_records: &[SampleRecord],
    test_records: &[SampleRecord],
) -> Result<(Fitted, EvalResult)> {
    let fitted = fit(cfg, mode, sampling, train_records, valid_records)?;
    let result = evaluate(
        &fitted.model,
        &fitted.vocab,
        test_records,
        mode,
        cfg.beam_width,
        cfg.decode_max_len,
    )?;
    Ok((fitted, result))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationCell {
    /// `MP`, `NP`, `MN` or `NN`.
    pub name: String,
    pub sampling: Sampling,
    pub prompt: PromptMode,
    pub result: EvalResult,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub cells: Vec<AblationCell>,
}

/// The four cells in table order.
pub fn ablation_cells(sample_count: usize) -> [(&'static str, Sampling, PromptMode); 4] {
    [
        ("MP", Sampling::multi(sample_count), PromptMode::Full),
        ("NP", Sampling::OFF, PromptMode::Full),
        ("MN", Sampling::multi(sample_count), PromptMode::Stripped),
        ("NN", Sampling::OFF, PromptMode::Stripped),
    ]
}

/// Trains and scores each cell under the same seed and data.
pub fn run_ablation(
    cfg: &ExperimentConfig,
    train_records: &[SampleRecord],
    valid_records: &[SampleRecord],
    test_records: &[SampleRecord],
) -> Result<AblationTable> {
    let sample_count = ModelConfig::preset(&cfg.preset, 1)?.sample_count;
    let mut cells = Vec::with_capacity(4);
    for (name, sampling, prompt) in ablation_cells(sample_count) {
        log::info!("ablation cell {name}");
        let (_, result) = run_experiment(cfg, prompt, sampling, train_records, valid_records, test_records)?;
        cells.push(AblationCell {
            name: name.into(),
            sampling,
            prompt,
            result,
        });
    }
    Ok(AblationTable { cells })
}

impl AblationTable {
    pub fn ratio(&self, name: &str) -> Option<f64> {
        self.cells.iter().find(|c| c.name == name).map(|c| c.result.ratio)
    }

    pub fn to_text(&self) -> String {
        let cell = |n: &str| self.ratio(n).map_or_else(|| "-".into(), format_ratio);
        let reference = REFERENCE_ABLATION
            .iter()
            .map(|(n, r)| format!("{n} {}", format_ratio(*r)))
            .collect::<Vec<_>>()
            .join("  ");
        format!(
            "{:<14}{:>10}{:>12}\n{:<14}{:>10}{:>12}\n{:<14}{:>10}{:>12}\nfull-scale reference: {reference}\n",
            "",
            "prompt",
            "no prompt",
            "multi-sample",
            cell("MP"),
            cell("MN"),
            "no sampling",
            cell("NP"),
            cell("NN"),
        )
    }

    /// One JSON object per cell.
    pub fn rows(&self) -> Vec<serde_json::Value> {
        self.cells
            .iter()
            .map(|c| {
                serde_json::json!({
                    "cell": c.name,
                    "noise": c.sampling.noise,
                    "sample_count": c.sampling.count,
                    "prompt": c.prompt,
                    "perfect": c.result.perfect,
                    "total": c.result.total,
                    "ratio": c.result.ratio,
                })
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub count: usize,
    pub result: EvalResult,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepTable {
    pub rows: Vec<SweepRow>,
    /// Index of the best row; the first one wins ties.
    pub argmax: usize,
}

impl SweepTable {
    pub fn new(rows: Vec<SweepRow>) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::invalid("a sweep needs at least one sample count"));
        }
        let mut argmax = 0;
        for (i, r) in rows.iter().enumerate() {
            if r.result.ratio > rows[argmax].result.ratio {
                argmax = i;
            }
        }
        Ok(SweepTable { rows, argmax })
    }

    pub fn ratio(&self, count: usize) -> Option<f64> {
        self.rows.iter().find(|r| r.count == count).map(|r| r.result.ratio)
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("{:>8}{:>10}{:>12}\n", "samples", "ratio", "reference");
        for (i, r) in self.rows.iter().enumerate() {
            let reference = REFERENCE_SWEEP
                .iter()
                .find(|(n, _)| *n == r.count)
                .map_or_else(|| "-".into(), |(_, v)| format_ratio(*v));
            let mark = if i == self.argmax { "  *" } else { "" };
            out.push_str(&format!(
                "{:>8}{:>10}{:>12}{mark}\n",
                r.count,
                format_ratio(r.result.ratio),
                reference
            ));
        }
        out
    }

    pub fn rows_json(&self) -> Vec<serde_json::Value> {
        self.rows
            .iter()
            .enumerate()
            .map(|(i, r)| {
                serde_json::json!({
                    "sample_count": r.count,
                    "perfect": r.result.perfect,
                    "total": r.result.total,
                    "ratio": r.result.ratio,
                    "best": i == self.argmax,
                })
            })
            .collect()
    }
}

/// One model per sample count, all with prompts and the same seed.
pub fn run_sample_sweep(
    cfg: &ExperimentConfig,
    counts: &[usize],
    train_records: &[SampleRecord],
    valid_records: &[SampleRecord],
    test_records: &[SampleRecord],
) -> Result<SweepTable> {
    if counts.iter().any(|&n| n == 0) {
        return Err(Error::invalid("sample counts must be at least 1"));
    }
    let mut rows = Vec::with_capacity(counts.len());
    for &count in counts {
        log::info!("sweep: {count} samples");
        let (_, result) = run_experiment(
            cfg,
            PromptMode::Full,
            Sampling::multi(count),
            train_records,
            valid_records,
            test_records,
        )?;
        rows.push(SweepRow { count, result });
    }
    SweepTable::new(rows)
}
