// SPDX-License-Identifier: MIT OR Apache-2.0

//! Exhaustive single-position patch labelling.

use std::collections::BTreeSet;
use std::io::{BufRead, BufWriter, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metric::answer_matches;
use crate::model::{Model, Tokenizer};
use crate::patch::{capture_source_states, run_patched_with, Baseline, LayerPair, PatchSpec};
use crate::taskgen::{LineError, QaItem};

/// One oracle execution: position `i` of one prompt patched alone.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sample {
    pub prompt_source: String,
    pub prompt_target: String,
    pub position_source: usize,
    pub position_target: usize,
    pub hop3: String,
    pub generations_patched: String,
    pub is_correct_patched: bool,
    pub hidden_rep: Vec<f32>,
    /// Patched minus unpatched log-probability of the gold answer.
    pub logprob_delta: f64,
}

pub const SAMPLE_FIELDS: [&str; 9] = [
    "prompt_source",
    "prompt_target",
    "position_source",
    "position_target",
    "hop3",
    "generations_patched",
    "is_correct_patched",
    "hidden_rep",
    "logprob_delta",
];

/// Labels every position of `qa.prompt` with a run that patches only that position.
pub fn label_prompt(model: &Model, tokenizer: &Tokenizer, qa: &QaItem, layers: LayerPair, max_new: usize) -> Result<Vec<Sample>> {
    layers.validate(model.config().n_layers)?;
    let prompt = tokenizer.tokenize(&qa.prompt)?;
    if prompt.len() > model.config().max_seq_len {
        return Err(Error::SequenceTooLong {
            len: prompt.len(),
            max: model.config().max_seq_len,
        });
    }
    let states = capture_source_states(model, &prompt, layers.source)?;
    let base = Baseline::compute(model, tokenizer, &prompt, &qa.hop3)?;
    let mut out = Vec::with_capacity(prompt.len());
    for (i, state) in states.iter().enumerate() {
        let spec = PatchSpec {
            layers,
            positions: BTreeSet::from([i]),
        };
        let run = run_patched_with(model, tokenizer, &prompt, &spec, &states, &base, max_new)?;
        out.push(Sample {
            prompt_source: qa.prompt.clone(),
            prompt_target: qa.prompt.clone(),
            position_source: i,
            position_target: i,
            hop3: qa.hop3.clone(),
            is_correct_patched: answer_matches(&run.generation, &qa.hop3),
            generations_patched: run.generation,
            hidden_rep: state.vector.clone(),
            logprob_delta: run.gold_logprob_patched - run.gold_logprob_base,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkippedPrompt {
    pub index: usize,
    pub prompt: String,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSummary {
    pub n_samples: usize,
    pub n_prompts: usize,
    pub n_positive: usize,
    pub positive_rate: f64,
    pub skipped: Vec<SkippedPrompt>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct OracleOptions {
    pub max_new: usize,
    /// Worker threads; 0 uses the rayon default.
    pub jobs: usize,
}

impl Default for OracleOptions {
    fn default() -> Self {
        Self { max_new: 8, jobs: 0 }
    }
}

/// Path of the in-progress file; it only survives a failed build.
pub fn partial_path(out_path: &Path) -> PathBuf {
    let mut s = out_path.as_os_str().to_owned();
    s.push(".partial");
    PathBuf::from(s)
}

pub(crate) fn thread_pool(jobs: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| Error::InvalidArgument(format!("thread pool: {e}")))
}

const CHUNK: usize = 32;

/// Labels every prompt and writes one JSONL row per sample, in prompt order.
/// Over-long prompts are skipped and reported. The output appears under
/// `out_path` only on success; failures leave `<out_path>.partial` behind.
pub fn build_dataset(
    model: &Model,
    tokenizer: &Tokenizer,
    items: &[QaItem],
    layers: LayerPair,
    opts: &OracleOptions,
    out_path: &Path,
) -> Result<DatasetSummary> {
    if items.is_empty() {
        return Err(Error::EmptyInput);
    }
    layers.validate(model.config().n_layers)?;
    let tmp = partial_path(out_path);
    let file = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    let mut w = BufWriter::new(file);
    let pool = thread_pool(opts.jobs)?;
    let mut summary = DatasetSummary {
        n_samples: 0,
        n_prompts: 0,
        n_positive: 0,
        positive_rate: 0.0,
        skipped: Vec::new(),
    };
    for (c, chunk) in items.chunks(CHUNK).enumerate() {
        let labelled: Vec<Result<Vec<Sample>>> =
            pool.install(|| chunk.par_iter().map(|qa| label_prompt(model, tokenizer, qa, layers, opts.max_new)).collect());
        for (k, res) in labelled.into_iter().enumerate() {
            let index = c * CHUNK + k;
            match res {
                Ok(samples) => {
                    summary.n_prompts += 1;
                    for s in &samples {
                        serde_json::to_writer(&mut w, s)?;
                        w.write_all(b"\n").map_err(|e| Error::io(&tmp, e))?;
                        summary.n_samples += 1;
                        summary.n_positive += s.is_correct_patched as usize;
                    }
                }
                Err(e @ Error::SequenceTooLong { .. }) => summary.skipped.push(SkippedPrompt {
                    index,
                    prompt: chunk[k].prompt.clone(),
                    reason: e.to_string(),
                }),
                Err(e) => return Err(e),
            }
        }
    }
    w.flush().map_err(|e| Error::io(&tmp, e))?;
    drop(w);
    std::fs::rename(&tmp, out_path).map_err(|e| Error::io(out_path, e))?;
    if summary.n_samples > 0 {
        summary.positive_rate = summary.n_positive as f64 / summary.n_samples as f64;
    }
    Ok(summary)
}

#[derive(Debug, Clone, PartialEq)]
pub struct RateReport {
    pub rate: f64,
    pub n_rows: usize,
    pub n_positive: usize,
    pub malformed: Vec<LineError>,
}

/// Per-sample fraction of `is_correct_patched = true`. Malformed lines are
/// reported and excluded; a file with no valid rows has no rate.
pub fn positive_rate(dataset_path: &Path) -> Result<RateReport> {
    let file = std::fs::File::open(dataset_path).map_err(|e| Error::io(dataset_path, e))?;
    let mut report = RateReport {
        rate: 0.0,
        n_rows: 0,
        n_positive: 0,
        malformed: Vec::new(),
    };
    for (idx, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(dataset_path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<Sample>(&line) {
            Ok(s) => {
                report.n_rows += 1;
                report.n_positive += s.is_correct_patched as usize;
            }
            Err(e) => report.malformed.push(LineError {
                line: idx + 1,
                message: e.to_string(),
            }),
        }
    }
    if report.n_rows == 0 {
        return Err(Error::InvalidArgument(format!(
            "{} has no valid samples, positive rate undefined",
            dataset_path.display()
        )));
    }
    report.rate = report.n_positive as f64 / report.n_rows as f64;
    Ok(report)
}

/// Strict loader: any malformed line is an error naming its 1-based number.
pub fn load_dataset(path: &Path) -> Result<Vec<Sample>> {
    if !path.exists() {
        return Err(Error::MissingArtifact(path.to_path_buf()));
    }
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (idx, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let s: Sample = serde_json::from_str(&line)
            .map_err(|e| Error::InvalidArgument(format!("{}:{}: {e}", path.display(), idx + 1)))?;
        out.push(s);
    }
    Ok(out)
}

pub fn save_dataset(path: &Path, samples: &[Sample]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for s in samples {
        serde_json::to_writer(&mut w, s)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(correct: bool) -> Sample {
        Sample {
            prompt_source: "p".into(),
            prompt_target: "p".into(),
            position_source: 0,
            position_target: 0,
            hop3: "a1".into(),
            generations_patched: if correct { "a1".into() } else { "a2".into() },
            is_correct_patched: correct,
            hidden_rep: vec![0.1, -2.5e-7, 3.0],
            logprob_delta: -0.123456789012345,
        }
    }

    #[test]
    fn three_of_ten() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        let rows: Vec<Sample> = (0..10).map(|i| sample(i < 3)).collect();
        save_dataset(&path, &rows).unwrap();
        let r = positive_rate(&path).unwrap();
        assert_eq!((r.rate, r.n_rows, r.n_positive), (0.3, 10, 3));
    }

    #[test]
    fn malformed_rows_are_counted_and_excluded() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        let good = serde_json::to_string(&sample(true)).unwrap();
        std::fs::write(&path, format!("{good}\n{{not json\n{good}\n{{\"hop3\":1}}\n")).unwrap();
        let r = positive_rate(&path).unwrap();
        assert_eq!(r.rate, 1.0);
        assert_eq!(r.malformed.iter().map(|e| e.line).collect::<Vec<_>>(), vec![2, 4]);
        assert!(load_dataset(&path).is_err());
    }

    #[test]
    fn empty_file_has_no_rate() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        std::fs::write(&path, "").unwrap();
        assert!(positive_rate(&path).is_err());
    }

    #[test]
    fn field_names_are_exact() {
        let v = serde_json::to_value(sample(true)).unwrap();
        let keys: BTreeSet<&str> = v.as_object().unwrap().keys().map(String::as_str).collect();
        assert_eq!(keys, SAMPLE_FIELDS.into_iter().collect());
    }
}
