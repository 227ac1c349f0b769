// SPDX-License-Identifier: MIT OR Apache-2.0

//! End-to-end runs and layer-pair sweeps.
//!
//! Every stage reads its inputs from and writes its outputs to one workdir,
//! so stages can run together (`run_full`) or one at a time from the CLI and
//! produce the same bytes.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::classifier::pipeline::{train_pipeline, PipelineOptions, SplitOptions};
use crate::classifier::report::ClassReport;
use crate::classifier::svm::FitReport;
use crate::classifier::Gate;
use crate::config::{sha256_file, Provenance, RunConfig};
use crate::error::{Error, Result};
use crate::inference::{
    solve_rate, summary_table, unpatched_token_histogram, write_answers, write_histogram_csv, EvalInputs, EvalMode,
    EvalOptions, EvalResult, OracleLabels,
};
use crate::metric::answer_matches;
use crate::model::train::{train, TrainReport};
use crate::model::{checkpoint, Model, Tokenizer};
use crate::oracle::{build_dataset, load_dataset, DatasetSummary, OracleOptions};
use crate::patch::LayerPair;
use crate::taskgen::{emit_training_corpus, generate_world, sample_eval_items, unique_by_prompt, CorpusOptions, FactWorld, QaItem};

pub const WORLD_FILE: &str = "world.json";
pub const TOKENIZER_FILE: &str = "tokenizer.json";
pub const CORPUS_FILE: &str = "corpus.txt";
pub const EVAL_ITEMS_FILE: &str = "eval_items.jsonl";
pub const LABEL_ITEMS_FILE: &str = "label_items.jsonl";
pub const TRAIN_REPORT_FILE: &str = "train_report.json";
pub const DATASET_SUMMARY_FILE: &str = "dataset_summary.json";
pub const GATE_FILE: &str = "gate.json";
pub const GATE_REPORT_FILE: &str = "gate_report.json";
pub const GATE_TABLE_FILE: &str = "gate_report.txt";
pub const EVAL_FILE: &str = "eval.json";
pub const EVAL_TABLE_FILE: &str = "eval_summary.txt";
pub const HISTOGRAM_FILE: &str = "unpatched_tokens.csv";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const SWEEP_SOURCE_FILE: &str = "sweep_source.csv";
pub const SWEEP_DISTANCE_FILE: &str = "sweep_distance.csv";

pub const STAGES: [&str; 6] = ["taskgen", "train", "oracle", "classifier", "eval", "histogram"];

/// Execution knobs that do not affect results.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct RunOptions {
    pub jobs: usize,
    pub overwrite: bool,
}

/// A config with its workdir resolved, plus execution knobs.
#[derive(Debug, Clone)]
pub struct Run {
    pub cfg: RunConfig,
    pub opts: RunOptions,
}

impl Run {
    /// Validates `cfg`; any validation failure is reported as a config error.
    pub fn new(cfg: RunConfig, opts: RunOptions) -> Result<Self> {
        cfg.validate().map_err(|e| match e {
            Error::Config(_) => e,
            other => Error::Config(other.to_string()),
        })?;
        Ok(Self { cfg, opts })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.cfg.workdir().join(name)
    }

    fn provenance(&self) -> Provenance {
        Provenance::of(&self.cfg)
    }

    fn prepare_outputs(&self, outputs: &[PathBuf]) -> Result<()> {
        std::fs::create_dir_all(self.cfg.workdir()).map_err(|e| Error::io(self.cfg.workdir(), e))?;
        if !self.opts.overwrite {
            if let Some(p) = outputs.iter().find(|p| p.exists()) {
                return Err(Error::WouldOverwrite(p.clone()));
            }
        }
        Ok(())
    }

    fn require(&self, path: PathBuf) -> Result<PathBuf> {
        if path.exists() {
            Ok(path)
        } else {
            Err(Error::MissingArtifact(path))
        }
    }

    pub fn load_world(&self) -> Result<FactWorld> {
        let p = self.require(self.path(WORLD_FILE))?;
        read_json(&p)
    }

    pub fn load_tokenizer(&self) -> Result<Tokenizer> {
        Tokenizer::load(&self.require(self.path(TOKENIZER_FILE))?)
    }

    pub fn load_model(&self) -> Result<Model> {
        checkpoint::load(&self.cfg.checkpoint_path())
    }

    pub fn load_items(&self, name: &str) -> Result<Vec<QaItem>> {
        read_jsonl(&self.require(self.path(name))?)
    }

    pub fn load_gate(&self) -> Result<Gate> {
        let gate = Gate::load(&self.path(GATE_FILE))?;
        if gate.layers != self.cfg.layers {
            return Err(Error::InvalidArgument(format!(
                "gate was trained for layers {} but the config asks for {}",
                gate.layers, self.cfg.layers
            )));
        }
        Ok(gate)
    }

    fn oracle_options(&self) -> OracleOptions {
        OracleOptions {
            max_new: self.cfg.oracle.max_new,
            jobs: self.opts.jobs,
        }
    }

    fn eval_options(&self, seed: u64) -> EvalOptions {
        EvalOptions {
            max_new: self.cfg.eval.max_new,
            jobs: self.opts.jobs,
            seed,
        }
    }
}

pub(crate) fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&s)?)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    std::fs::write(path, s).map_err(|e| Error::io(path, e))
}

fn read_jsonl<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    s.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}

fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut s = String::new();
    for r in rows {
        s.push_str(&serde_json::to_string(r)?);
        s.push('\n');
    }
    std::fs::write(path, s).map_err(|e| Error::io(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainDiagnostics {
    pub single_hop_correct: usize,
    pub single_hop_total: usize,
    pub train_two_hop_correct: usize,
    pub train_two_hop_total: usize,
    pub eval_pool_correct: usize,
    pub eval_pool_total: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainArtifact {
    pub provenance: Provenance,
    pub report: TrainReport,
    pub diagnostics: TrainDiagnostics,
}

/// World, tokenizer, training corpus, sampled eval prompts and the
/// deduplicated prompts the oracle labels.
pub fn stage_taskgen(run: &Run) -> Result<Vec<PathBuf>> {
    let cfg = &run.cfg;
    let outs: Vec<PathBuf> = [WORLD_FILE, TOKENIZER_FILE, CORPUS_FILE, EVAL_ITEMS_FILE, LABEL_ITEMS_FILE]
        .iter()
        .map(|f| run.path(f))
        .collect();
    run.prepare_outputs(&outs)?;
    let world = generate_world(cfg.seeds.world, cfg.world.n_entities, cfg.world.n_attributes)?;
    let corpus = emit_training_corpus(
        &world,
        &CorpusOptions {
            two_hop_fraction: cfg.world.two_hop_fraction,
            seed: cfg.seeds.corpus,
        },
    )?;
    let eval_items = sample_eval_items(&corpus.eval_pool, cfg.eval.n_prompts, cfg.seeds.eval_sample)?;
    let label_items = unique_by_prompt(&eval_items);
    write_json(&outs[0], &world)?;
    world.tokenizer().save(&outs[1])?;
    corpus.write_text(&outs[2])?;
    write_jsonl(&outs[3], &eval_items)?;
    write_jsonl(&outs[4], &label_items)?;
    Ok(outs)
}

fn count_correct<'a>(model: &Model, tok: &Tokenizer, items: impl Iterator<Item = (&'a str, &'a str)>) -> Result<(usize, usize)> {
    let (mut ok, mut total) = (0, 0);
    for (prompt, gold) in items {
        let ids = model.greedy_generate(&tok.tokenize(prompt)?, 8, &[])?;
        ok += answer_matches(&tok.detokenize(&ids), gold) as usize;
        total += 1;
    }
    Ok((ok, total))
}

pub fn stage_train(run: &Run) -> Result<Vec<PathBuf>> {
    let cfg = &run.cfg;
    let outs = vec![cfg.checkpoint_path(), run.path(TRAIN_REPORT_FILE)];
    run.prepare_outputs(&outs)?;
    let world = run.load_world()?;
    let tok = run.load_tokenizer()?;
    let corpus = emit_training_corpus(
        &world,
        &CorpusOptions {
            two_hop_fraction: cfg.world.two_hop_fraction,
            seed: cfg.seeds.corpus,
        },
    )?;
    let seqs = corpus.sequences(&tok)?;
    let (model, report) = train(cfg.model_config(tok.vocab_size()), &seqs, &cfg.train_hyper())?;
    let single = world.single_hop_items();
    let (s_ok, s_n) = count_correct(&model, &tok, single.iter().map(|(p, a)| (p.as_str(), a.as_str())))?;
    let (t_ok, t_n) = count_correct(&model, &tok, corpus.train_two_hop.iter().map(|q| (q.prompt.as_str(), q.hop3.as_str())))?;
    let (e_ok, e_n) = count_correct(&model, &tok, corpus.eval_pool.iter().map(|q| (q.prompt.as_str(), q.hop3.as_str())))?;
    if let Some(parent) = outs[0].parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    checkpoint::save(&model, &outs[0])?;
    write_json(
        &outs[1],
        &TrainArtifact {
            provenance: run.provenance(),
            report,
            diagnostics: TrainDiagnostics {
                single_hop_correct: s_ok,
                single_hop_total: s_n,
                train_two_hop_correct: t_ok,
                train_two_hop_total: t_n,
                eval_pool_correct: e_ok,
                eval_pool_total: e_n,
            },
        },
    )?;
    Ok(outs)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetArtifact {
    pub provenance: Provenance,
    pub layers: LayerPair,
    pub summary: DatasetSummary,
}

pub fn stage_oracle(run: &Run) -> Result<Vec<PathBuf>> {
    let cfg = &run.cfg;
    let outs = vec![cfg.dataset_path(), run.path(DATASET_SUMMARY_FILE)];
    run.prepare_outputs(&outs)?;
    let tok = run.load_tokenizer()?;
    let model = run.load_model()?;
    let items = run.load_items(LABEL_ITEMS_FILE)?;
    if let Some(parent) = outs[0].parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let summary = build_dataset(&model, &tok, &items, cfg.layers, &run.oracle_options(), &outs[0])?;
    write_json(
        &outs[1],
        &DatasetArtifact {
            provenance: run.provenance(),
            layers: cfg.layers,
            summary,
        },
    )?;
    Ok(outs)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateArtifact {
    pub provenance: Provenance,
    pub layers: LayerPair,
    pub report: ClassReport,
    pub fit: FitReport,
    pub n_train: usize,
    pub n_test: usize,
    pub n_synthetic: usize,
    pub n_tomek_removed: usize,
    pub n_fit_rows: usize,
    pub test_untouched: bool,
    pub standardizer_flagged: Vec<usize>,
}

pub fn stage_classifier(run: &Run) -> Result<Vec<PathBuf>> {
    let cfg = &run.cfg;
    let outs = vec![run.path(GATE_FILE), run.path(GATE_REPORT_FILE), run.path(GATE_TABLE_FILE)];
    run.prepare_outputs(&outs)?;
    let dataset = cfg.dataset_path();
    if !dataset.exists() {
        return Err(Error::MissingArtifact(dataset));
    }
    let out = train_pipeline(&dataset, cfg.layers, &cfg.split_options(), &cfg.pipeline_options())?;
    out.gate.save(&outs[0])?;
    write_json(
        &outs[1],
        &GateArtifact {
            provenance: run.provenance(),
            layers: cfg.layers,
            report: out.report.clone(),
            fit: out.fit.clone(),
            n_train: out.audit.train.len(),
            n_test: out.audit.test.len(),
            n_synthetic: out.audit.n_synthetic,
            n_tomek_removed: out.audit.tomek_removed.len(),
            n_fit_rows: out.audit.n_fit_rows,
            test_untouched: out.audit.test_untouched(),
            standardizer_flagged: out.gate.standardizer.flagged.clone(),
        },
    )?;
    write_text(&outs[2], &out.report.to_table())?;
    Ok(outs)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RandomGateRun {
    pub seed: u64,
    pub solve_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Margins {
    pub autopatch_minus_baseline: f64,
    pub oracle_minus_autopatch: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalArtifact {
    pub provenance: Provenance,
    pub layers: LayerPair,
    pub results: Vec<EvalResult>,
    pub random_gate_runs: Vec<RandomGateRun>,
    pub random_gate_mean: Option<f64>,
    pub margins: Option<Margins>,
}

impl EvalArtifact {
    pub fn result(&self, mode: EvalMode) -> Option<&EvalResult> {
        self.results.iter().find(|r| r.mode == mode)
    }
}

pub fn answers_file(mode: EvalMode) -> String {
    format!("answers_{}.jsonl", mode.name())
}

pub fn eval_file(mode: Option<EvalMode>) -> String {
    match mode {
        None => EVAL_FILE.to_string(),
        Some(m) => format!("eval_{}.json", m.name()),
    }
}

/// Evaluates one mode, or every mode when `only` is `None`.
pub fn stage_eval(run: &Run, only: Option<EvalMode>) -> Result<Vec<PathBuf>> {
    let cfg = &run.cfg;
    let modes: Vec<EvalMode> = match only {
        Some(m) => vec![m],
        None => EvalMode::ALL.to_vec(),
    };
    let mut outs = vec![run.path(&eval_file(only))];
    outs.extend(modes.iter().map(|m| run.path(&answers_file(*m))));
    if only.is_none() {
        outs.push(run.path(EVAL_TABLE_FILE));
    }
    run.prepare_outputs(&outs)?;
    let tok = run.load_tokenizer()?;
    let model = run.load_model()?;
    let items = run.load_items(EVAL_ITEMS_FILE)?;
    let needs_gate = modes.contains(&EvalMode::Autopatch);
    let needs_oracle = modes.contains(&EvalMode::OraclePatch);
    let gate = if needs_gate { Some(run.load_gate()?) } else { None };
    let oracle = if needs_oracle {
        let samples = load_dataset(&cfg.dataset_path())?;
        Some(OracleLabels::from_samples(&samples, cfg.classifier.label_mode))
    } else {
        None
    };
    let inputs = EvalInputs {
        gate: gate.as_ref(),
        oracle: oracle.as_ref(),
    };
    let mut results = Vec::new();
    let mut random_gate_runs = Vec::new();
    for &mode in &modes {
        let r = solve_rate(&model, &tok, &items, mode, cfg.layers, &inputs, &run.eval_options(cfg.seeds.random_gate))?;
        if mode == EvalMode::RandomGate {
            random_gate_runs.push(RandomGateRun {
                seed: cfg.seeds.random_gate,
                solve_rate: r.solve_rate,
            });
            for k in 1..cfg.eval.random_gate_runs as u64 {
                let seed = cfg.seeds.random_gate.wrapping_add(k);
                let extra = solve_rate(&model, &tok, &items, mode, cfg.layers, &inputs, &run.eval_options(seed))?;
                random_gate_runs.push(RandomGateRun {
                    seed,
                    solve_rate: extra.solve_rate,
                });
            }
        }
        results.push(r);
    }
    let random_gate_mean = (!random_gate_runs.is_empty())
        .then(|| random_gate_runs.iter().map(|r| r.solve_rate).sum::<f64>() / random_gate_runs.len() as f64);
    let rate = |m| results.iter().find(|r: &&EvalResult| r.mode == m).map(|r| r.solve_rate);
    let margins = match (rate(EvalMode::Baseline), rate(EvalMode::Autopatch), rate(EvalMode::OraclePatch)) {
        (Some(b), Some(a), Some(o)) => Some(Margins {
            autopatch_minus_baseline: a - b,
            oracle_minus_autopatch: o - a,
        }),
        _ => None,
    };
    for (r, path) in results.iter().zip(&outs[1..]) {
        write_answers(r, path)?;
    }
    let artifact = EvalArtifact {
        provenance: run.provenance(),
        layers: cfg.layers,
        results,
        random_gate_runs,
        random_gate_mean,
        margins,
    };
    write_json(&outs[0], &artifact)?;
    if only.is_none() {
        let mut table = summary_table(&artifact.results);
        if let Some(m) = artifact.random_gate_mean {
            let _ = writeln!(
                table,
                "random_gate mean over {} seeds: {:.2}%",
                artifact.random_gate_runs.len(),
                100.0 * m
            );
        }
        write_text(&outs[outs.len() - 1], &table)?;
    }
    Ok(outs)
}

/// Token counts at positions the gate left alone, from the full eval.
pub fn stage_histogram(run: &Run) -> Result<Vec<PathBuf>> {
    let out = run.path(HISTOGRAM_FILE);
    run.prepare_outputs(std::slice::from_ref(&out))?;
    let tok = run.load_tokenizer()?;
    let eval: EvalArtifact = read_json(&run.require(run.path(EVAL_FILE))?)?;
    let autopatch = eval
        .result(EvalMode::Autopatch)
        .ok_or_else(|| Error::InvalidArgument("eval.json has no autopatch results".into()))?;
    write_histogram_csv(&unpatched_token_histogram(autopatch, &tok)?, &out)?;
    Ok(vec![out])
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArtifactEntry {
    /// Relative to the workdir when inside it.
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageStatus {
    Ok,
    Failed,
    Skipped,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageEntry {
    pub name: String,
    pub status: StageStatus,
    pub error: Option<String>,
    pub artifacts: Vec<ArtifactEntry>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub provenance: Provenance,
    pub stages: Vec<StageEntry>,
}

impl Manifest {
    pub fn succeeded(&self) -> bool {
        self.stages.iter().all(|s| s.status == StageStatus::Ok)
    }

    pub fn first_error(&self) -> Option<&str> {
        self.stages.iter().find_map(|s| s.error.as_deref())
    }

    pub fn artifact(&self, rel: &str) -> Option<&ArtifactEntry> {
        self.stages.iter().flat_map(|s| &s.artifacts).find(|a| a.path == rel)
    }
}

pub fn artifact_entries(workdir: &Path, paths: &[PathBuf]) -> Result<Vec<ArtifactEntry>> {
    paths
        .iter()
        .map(|p| {
            let bytes = std::fs::metadata(p).map_err(|e| Error::io(p, e))?.len();
            let rel = p.strip_prefix(workdir).unwrap_or(p);
            Ok(ArtifactEntry {
                path: rel.to_string_lossy().replace('\\', "/"),
                sha256: sha256_file(p)?,
                bytes,
            })
        })
        .collect()
}

/// taskgen → train → oracle → classifier → eval → histogram. A failing stage
/// is recorded and the rest are skipped; the manifest is written either way.
pub fn run_full(run: &Run) -> Result<Manifest> {
    let manifest_path = run.path(MANIFEST_FILE);
    run.prepare_outputs(std::slice::from_ref(&manifest_path))?;
    type StageFn = fn(&Run) -> Result<Vec<PathBuf>>;
    let stages: [(&str, StageFn); 6] = [
        ("taskgen", stage_taskgen),
        ("train", stage_train),
        ("oracle", stage_oracle),
        ("classifier", stage_classifier),
        ("eval", |r| stage_eval(r, None)),
        ("histogram", stage_histogram),
    ];
    let mut entries = Vec::new();
    let mut failed = false;
    for (name, f) in stages {
        if failed {
            entries.push(StageEntry {
                name: name.into(),
                status: StageStatus::Skipped,
                error: None,
                artifacts: Vec::new(),
            });
            continue;
        }
        let entry = match f(run).and_then(|outs| artifact_entries(&run.cfg.workdir(), &outs)) {
            Ok(artifacts) => StageEntry {
                name: name.into(),
                status: StageStatus::Ok,
                error: None,
                artifacts,
            },
            Err(e) => {
                failed = true;
                StageEntry {
                    name: name.into(),
                    status: StageStatus::Failed,
                    error: Some(e.to_string()),
                    artifacts: Vec::new(),
                }
            }
        };
        entries.push(entry);
    }
    let manifest = Manifest {
        provenance: run.provenance(),
        stages: entries,
    };
    write_json(&manifest_path, &manifest)?;
    Ok(manifest)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub source_layer: usize,
    pub target_layer: usize,
    pub distance: usize,
    pub solve_rate: f64,
    /// Test accuracy of this pair's gate; empty when its labels had one class.
    pub gate_accuracy: Option<f64>,
    pub n_prompts: usize,
    pub seed: u64,
}

pub fn source_sweep_pairs(n_layers: usize, distance: usize, sources: std::ops::RangeInclusive<usize>) -> Result<Vec<LayerPair>> {
    if distance == 0 {
        return Err(Error::InvalidArgument("sweep distance must be positive".into()));
    }
    if sources.is_empty() {
        return Err(Error::InvalidArgument("source range is empty".into()));
    }
    sources
        .map(|s| {
            let target = s.checked_sub(distance).ok_or_else(|| {
                Error::InvalidArgument(format!("source layer {s} minus distance {distance} is below layer 0"))
            })?;
            let pair = LayerPair::new(s, target);
            pair.validate_strict(n_layers)?;
            Ok(pair)
        })
        .collect()
}

pub fn distance_sweep_pairs(n_layers: usize, start: LayerPair, steps: usize) -> Result<Vec<LayerPair>> {
    start.validate_strict(n_layers)?;
    if start.source + steps > n_layers || start.target < steps {
        return Err(Error::InvalidArgument(format!(
            "{steps} steps from {start} leave layers 0..={n_layers}"
        )));
    }
    Ok((0..=steps).map(|k| LayerPair::new(start.source + k, start.target - k)).collect())
}

/// Shared inputs for per-pair pipelines.
pub struct SweepContext<'a> {
    pub model: &'a Model,
    pub tokenizer: &'a Tokenizer,
    pub label_items: &'a [QaItem],
    pub eval_items: &'a [QaItem],
    pub split: SplitOptions,
    pub pipeline: PipelineOptions,
    pub oracle: OracleOptions,
    pub eval: EvalOptions,
    /// Each pair writes its dataset and gate under `out_dir/<src>_<tgt>/`.
    pub out_dir: PathBuf,
}

/// Fresh labels, a fresh gate, then an autopatch solve rate for one pair.
pub fn run_pair(ctx: &SweepContext<'_>, pair: LayerPair) -> Result<SweepRow> {
    let dir = ctx.out_dir.join(format!("{}_{}", pair.source, pair.target));
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let dataset = dir.join("dataset.jsonl");
    build_dataset(ctx.model, ctx.tokenizer, ctx.label_items, pair, &ctx.oracle, &dataset)?;
    let samples = load_dataset(&dataset)?;
    let labels: BTreeSet<bool> = samples.iter().map(|s| ctx.pipeline.label_mode.label(s)).collect();
    let (result, gate_accuracy) = if labels.len() == 2 {
        let out = crate::classifier::train_pipeline_on(&samples, pair, &ctx.split, &ctx.pipeline)?;
        out.gate.save(&dir.join(GATE_FILE))?;
        let inputs = EvalInputs {
            gate: Some(&out.gate),
            oracle: None,
        };
        let r = solve_rate(ctx.model, ctx.tokenizer, ctx.eval_items, EvalMode::Autopatch, pair, &inputs, &ctx.eval)?;
        (r, Some(out.report.accuracy))
    } else {
        // A single label class admits only the matching constant gate.
        let mode = if labels.contains(&true) {
            EvalMode::PatchAll
        } else {
            EvalMode::AlwaysFalse
        };
        let r = solve_rate(ctx.model, ctx.tokenizer, ctx.eval_items, mode, pair, &EvalInputs::default(), &ctx.eval)?;
        (r, None)
    };
    Ok(SweepRow {
        source_layer: pair.source,
        target_layer: pair.target,
        distance: pair.source - pair.target,
        solve_rate: result.solve_rate,
        gate_accuracy,
        n_prompts: result.n_prompts,
        seed: ctx.split.seed,
    })
}

pub fn sweep_source_layer(ctx: &SweepContext<'_>, distance: usize, sources: std::ops::RangeInclusive<usize>) -> Result<Vec<SweepRow>> {
    let pairs = source_sweep_pairs(ctx.model.config().n_layers, distance, sources)?;
    pairs.into_iter().map(|p| run_pair(ctx, p)).collect()
}

pub fn sweep_distance(ctx: &SweepContext<'_>, start: LayerPair, steps: usize) -> Result<Vec<SweepRow>> {
    let pairs = distance_sweep_pairs(ctx.model.config().n_layers, start, steps)?;
    pairs.into_iter().map(|p| run_pair(ctx, p)).collect()
}

pub const SWEEP_HEADER: [&str; 7] = [
    "source_layer",
    "target_layer",
    "distance",
    "solve_rate",
    "gate_accuracy",
    "n_prompts",
    "seed",
];

pub fn write_sweep_csv(rows: &[SweepRow], path: &Path) -> Result<()> {
    use crate::inference::csv_error;
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    w.write_record(SWEEP_HEADER).map_err(|e| csv_error(path, e))?;
    for r in rows {
        w.write_record([
            r.source_layer.to_string(),
            r.target_layer.to_string(),
            r.distance.to_string(),
            format!("{:.6}", r.solve_rate),
            r.gate_accuracy.map(|a| format!("{a:.6}")).unwrap_or_default(),
            r.n_prompts.to_string(),
            r.seed.to_string(),
        ])
        .map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepAxis {
    SourceLayer,
    Distance,
}

/// Text rendering of a sweep: a bar per row and a one-line shape summary.
pub fn curve_report(title: &str, rows: &[SweepRow], axis: SweepAxis) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "{title}");
    let label = match axis {
        SweepAxis::SourceLayer => "source",
        SweepAxis::Distance => "distance",
    };
    let _ = writeln!(s, "{:>8} {:>7} {:>10} {:>9}  solve rate", label, "pair", "solve_rate", "gate_acc");
    for r in rows {
        let x = match axis {
            SweepAxis::SourceLayer => r.source_layer,
            SweepAxis::Distance => r.distance,
        };
        let bar = "#".repeat((r.solve_rate * 40.0).round() as usize);
        let acc = r.gate_accuracy.map(|a| format!("{a:.3}")).unwrap_or_else(|| "-".into());
        let _ = writeln!(
            s,
            "{:>8} {:>7} {:>10.3} {:>9}  |{bar}",
            x,
            format!("{}:{}", r.source_layer, r.target_layer),
            r.solve_rate,
            acc
        );
    }
    let _ = writeln!(s, "{}", shape_summary(rows, axis));
    s
}

fn shape_summary(rows: &[SweepRow], axis: SweepAxis) -> String {
    if rows.is_empty() {
        return "shape: no rows".into();
    }
    let rates: Vec<f64> = rows.iter().map(|r| r.solve_rate).collect();
    let (lo, hi) = rates.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &v| (l.min(v), h.max(v)));
    if hi - lo < 1e-12 {
        return format!("shape: flat at {hi:.3}");
    }
    let peak = rates.iter().position(|&v| v == hi).expect("max exists");
    let x = |i: usize| match axis {
        SweepAxis::SourceLayer => format!("source layer {}", rows[i].source_layer),
        SweepAxis::Distance => format!("distance {}", rows[i].distance),
    };
    let kind = if peak == 0 {
        "highest at the first point"
    } else if peak == rows.len() - 1 {
        "highest at the last point"
    } else {
        "interior peak"
    };
    format!(
        "shape: {kind}; max {hi:.3} at {}, min {lo:.3}, first {:.3}, last {:.3}",
        x(peak),
        rates[0],
        rates[rates.len() - 1]
    )
}

/// Loads the trained model and prompts from a workdir for a sweep.
pub fn sweep_inputs(run: &Run) -> Result<(Model, Tokenizer, Vec<QaItem>, Vec<QaItem>)> {
    Ok((
        run.load_model()?,
        run.load_tokenizer()?,
        run.load_items(LABEL_ITEMS_FILE)?,
        run.load_items(EVAL_ITEMS_FILE)?,
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepKind {
    Source,
    Distance,
}

/// Runs one configured sweep over a trained workdir; writes the CSV and the
/// curve report, returning their paths and the rows.
pub fn stage_sweep(run: &Run, kind: SweepKind) -> Result<(Vec<PathBuf>, Vec<SweepRow>)> {
    let cfg = &run.cfg;
    let (csv_name, report_name, sub) = match kind {
        SweepKind::Source => (SWEEP_SOURCE_FILE, "sweep_source.txt", "sweep_source"),
        SweepKind::Distance => (SWEEP_DISTANCE_FILE, "sweep_distance.txt", "sweep_distance"),
    };
    let n_layers = cfg.model.n_layers;
    let sc = &cfg.sweep;
    match kind {
        SweepKind::Source => source_sweep_pairs(n_layers, sc.distance, sc.source_min..=sc.source_max).map(drop)?,
        SweepKind::Distance => {
            distance_sweep_pairs(n_layers, LayerPair::new(sc.start_source, sc.start_target), sc.steps).map(drop)?
        }
    }
    let outs = vec![run.path(csv_name), run.path(report_name)];
    run.prepare_outputs(&outs)?;
    let (model, tok, label_items, mut eval_items) = sweep_inputs(run)?;
    eval_items.truncate(sc.n_prompts);
    let ctx = SweepContext {
        model: &model,
        tokenizer: &tok,
        label_items: &label_items,
        eval_items: &eval_items,
        split: cfg.split_options(),
        pipeline: cfg.pipeline_options(),
        oracle: run.oracle_options(),
        eval: run.eval_options(cfg.seeds.random_gate),
        out_dir: run.path(sub),
    };
    let (rows, report) = match kind {
        SweepKind::Source => {
            let rows = sweep_source_layer(&ctx, sc.distance, sc.source_min..=sc.source_max)?;
            let title = format!("Source-layer sweep at fixed distance {}", sc.distance);
            let rep = curve_report(&title, &rows, SweepAxis::SourceLayer);
            (rows, rep)
        }
        SweepKind::Distance => {
            let rows = sweep_distance(&ctx, LayerPair::new(sc.start_source, sc.start_target), sc.steps)?;
            let title = format!(
                "Distance sweep from {}:{} widening by one layer each side",
                sc.start_source, sc.start_target
            );
            let rep = curve_report(&title, &rows, SweepAxis::Distance);
            (rows, rep)
        }
    };
    write_sweep_csv(&rows, &outs[0])?;
    let mut report = report;
    let _ = writeln!(report, "config {}", cfg.hash());
    write_text(&outs[1], &report)?;
    Ok((outs, rows))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pair_arithmetic() {
        let p = source_sweep_pairs(12, 3, 4..=10).unwrap();
        assert_eq!(p.len(), 7);
        assert!(p.iter().all(|q| q.source - q.target == 3));
        assert!(source_sweep_pairs(12, 3, 2..=10).is_err());
        assert!(source_sweep_pairs(12, 3, 4..=13).is_err());
        assert!(source_sweep_pairs(12, 0, 4..=10).is_err());

        let d = distance_sweep_pairs(12, LayerPair::new(7, 5), 4).unwrap();
        assert_eq!(d.len(), 5);
        let dist: Vec<isize> = d.iter().map(LayerPair::distance).collect();
        assert_eq!(dist, vec![2, 4, 6, 8, 10]);
        assert_eq!(distance_sweep_pairs(12, LayerPair::new(7, 5), 0).unwrap(), vec![LayerPair::new(7, 5)]);
        assert!(distance_sweep_pairs(12, LayerPair::new(7, 5), 6).is_err());
    }

    #[test]
    fn csv_and_report_shape() {
        let rows: Vec<SweepRow> = (0..3)
            .map(|k| SweepRow {
                source_layer: 5 + k,
                target_layer: 2 + k,
                distance: 3,
                solve_rate: [0.1, 0.3, 0.2][k],
                gate_accuracy: if k == 1 { None } else { Some(0.8) },
                n_prompts: 128,
                seed: 0,
            })
            .collect();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.csv");
        write_sweep_csv(&rows, &p).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], SWEEP_HEADER.join(","));
        assert_eq!(lines.len(), 4);
        assert_eq!(lines[2], "6,3,3,0.300000,,128,0");
        let rep = curve_report("t", &rows, SweepAxis::SourceLayer);
        assert!(rep.contains("interior peak"));
        assert!(rep.contains("source layer 6"));
    }
}
