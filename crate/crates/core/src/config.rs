// SPDX-License-Identifier: MIT OR Apache-2.0

//! Versioned run configuration with named per-stage seeds.
//!
//! Precedence is flag > config file > built-in default; the workdir
//! additionally falls back to `AUTOPATCH_WORKDIR` before the default.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::classifier::pipeline::{LabelMode, PipelineOptions, SplitOptions};
use crate::classifier::svm::SvmParams;
use crate::error::{Error, Result};
use crate::model::train::TrainHyper;
use crate::model::ModelConfig;
use crate::patch::LayerPair;

pub const SCHEMA_VERSION: u32 = 1;
pub const WORKDIR_ENV: &str = "AUTOPATCH_WORKDIR";
pub const DEFAULT_WORKDIR: &str = "autopatch-run";

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub workdir: Option<PathBuf>,
    /// Oracle dataset; relative paths resolve against the workdir.
    pub dataset: Option<PathBuf>,
    /// Model checkpoint; relative paths resolve against the workdir.
    pub checkpoint: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorldConfig {
    pub n_entities: usize,
    pub n_attributes: usize,
    pub two_hop_fraction: f64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            n_entities: 48,
            n_attributes: 8,
            two_hop_fraction: 0.25,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OracleConfig {
    pub max_new: usize,
}

impl Default for OracleConfig {
    fn default() -> Self {
        Self { max_new: 8 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClassifierConfig {
    pub c: f64,
    /// `null` selects `1 / (d · feature variance)`.
    pub gamma: Option<f64>,
    pub tol: f64,
    /// `null` selects `10 · n`.
    pub max_iter: Option<usize>,
    pub k_neighbors: usize,
    pub balance_ratio: f64,
    pub label_mode: LabelMode,
    pub append_position_feature: bool,
    pub threshold: f64,
    pub test_fraction: f64,
    pub stratified: bool,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        let p = PipelineOptions::default();
        let s = SplitOptions::default();
        Self {
            c: p.svm.c,
            gamma: p.svm.gamma,
            tol: p.svm.tol,
            max_iter: p.svm.max_iter,
            k_neighbors: p.k_neighbors,
            balance_ratio: p.balance_ratio,
            label_mode: p.label_mode,
            append_position_feature: p.append_position_feature,
            threshold: p.threshold,
            test_fraction: s.test_fraction,
            stratified: s.stratified,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Eval prompts drawn with replacement from the held-out pool.
    pub n_prompts: usize,
    pub max_new: usize,
    /// Random-gate control repeats, seeded `random_gate, random_gate + 1, …`.
    pub random_gate_runs: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            n_prompts: 1024,
            max_new: 8,
            random_gate_runs: 5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    /// Each pair is evaluated on the first `n_prompts` eval items.
    pub n_prompts: usize,
    pub distance: usize,
    pub source_min: usize,
    pub source_max: usize,
    pub start_source: usize,
    pub start_target: usize,
    pub steps: usize,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            n_prompts: 128,
            distance: 3,
            source_min: 4,
            source_max: 10,
            start_source: 7,
            start_target: 5,
            steps: 4,
        }
    }
}

/// One seed per randomized stage.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Seeds {
    pub world: u64,
    pub corpus: u64,
    pub model_init: u64,
    pub train: u64,
    pub eval_sample: u64,
    pub split: u64,
    pub resample: u64,
    pub svm: u64,
    pub random_gate: u64,
}

impl Seeds {
    pub const STAGES: [&'static str; 9] = [
        "world",
        "corpus",
        "model_init",
        "train",
        "eval_sample",
        "split",
        "resample",
        "svm",
        "random_gate",
    ];

    fn slot(&mut self, stage: &str) -> Option<&mut u64> {
        Some(match stage {
            "world" => &mut self.world,
            "corpus" => &mut self.corpus,
            "model_init" => &mut self.model_init,
            "train" => &mut self.train,
            "eval_sample" => &mut self.eval_sample,
            "split" => &mut self.split,
            "resample" => &mut self.resample,
            "svm" => &mut self.svm,
            "random_gate" => &mut self.random_gate,
            _ => return None,
        })
    }

    /// Applies `STAGE=K`.
    pub fn apply_override(&mut self, spec: &str) -> Result<()> {
        let (stage, value) = spec
            .split_once('=')
            .ok_or_else(|| Error::InvalidArgument(format!("seed override {spec:?} is not STAGE=K")))?;
        let value: u64 = value
            .trim()
            .parse()
            .map_err(|_| Error::InvalidArgument(format!("seed override {spec:?} has a non-integer value")))?;
        let slot = self.slot(stage.trim()).ok_or_else(|| {
            Error::InvalidArgument(format!(
                "unknown seed stage {stage:?}; expected one of {}",
                Self::STAGES.join(", ")
            ))
        })?;
        *slot = value;
        Ok(())
    }

    pub fn as_map(&self) -> BTreeMap<&'static str, u64> {
        let mut s = *self;
        Self::STAGES.iter().map(|&k| (k, *s.slot(k).expect("known stage"))).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    pub paths: Paths,
    pub world: WorldConfig,
    /// `vocab_size = 0` is filled in from the world's tokenizer.
    pub model: ModelConfig,
    /// `seed` is ignored; `seeds.train` is used.
    pub train: TrainHyper,
    pub layers: LayerPair,
    pub oracle: OracleConfig,
    pub classifier: ClassifierConfig,
    pub eval: EvalConfig,
    pub sweep: SweepConfig,
    pub seeds: Seeds,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            paths: Paths::default(),
            world: WorldConfig::default(),
            model: ModelConfig::default(),
            train: TrainHyper::default(),
            layers: LayerPair::new(8, 4),
            oracle: OracleConfig::default(),
            classifier: ClassifierConfig::default(),
            eval: EvalConfig::default(),
            sweep: SweepConfig::default(),
            seeds: Seeds::default(),
        }
    }
}

impl RunConfig {
    pub fn from_json(json: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(json).map_err(|e| Error::Config(e.to_string()))?;
        if cfg.schema_version != SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "schema_version {} is not supported (expected {SCHEMA_VERSION})",
                cfg.schema_version
            )));
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingArtifact(path.to_path_buf()));
        }
        Self::from_json(&std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Resolves the workdir as flag > config > `AUTOPATCH_WORKDIR` > default.
    pub fn resolve_workdir(&mut self, flag: Option<&Path>) {
        let env = std::env::var_os(WORKDIR_ENV).map(PathBuf::from);
        let chosen = flag
            .map(Path::to_path_buf)
            .or_else(|| self.paths.workdir.clone())
            .or(env)
            .unwrap_or_else(|| PathBuf::from(DEFAULT_WORKDIR));
        self.paths.workdir = Some(chosen);
    }

    pub fn workdir(&self) -> PathBuf {
        self.paths.workdir.clone().unwrap_or_else(|| PathBuf::from(DEFAULT_WORKDIR))
    }

    fn under_workdir(&self, p: &Option<PathBuf>, default: &str) -> PathBuf {
        match p {
            Some(p) if p.is_absolute() => p.clone(),
            Some(p) => self.workdir().join(p),
            None => self.workdir().join(default),
        }
    }

    pub fn dataset_path(&self) -> PathBuf {
        self.under_workdir(&self.paths.dataset, "dataset.jsonl")
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        self.under_workdir(&self.paths.checkpoint, "model.apck")
    }

    /// Checks value ranges and that every path's parent either exists or
    /// lies inside the workdir (which is created on demand).
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.world.n_entities < 4 || self.world.n_attributes < 2 {
            return bad("world needs at least 4 entities and 2 attributes".into());
        }
        if !(0.0..1.0).contains(&self.world.two_hop_fraction) {
            return bad("two_hop_fraction must lie in [0, 1) so an eval pool exists".into());
        }
        let mut model = self.model.clone();
        if model.vocab_size == 0 {
            model.vocab_size = 1;
        }
        model.validate()?;
        self.layers.validate_strict(self.model.n_layers)?;
        if self.train.batch == 0 {
            return bad("train.batch must be positive".into());
        }
        if self.oracle.max_new == 0 || self.eval.max_new == 0 {
            return bad("max_new must be positive".into());
        }
        if self.eval.n_prompts == 0 || self.sweep.n_prompts == 0 {
            return bad("eval.n_prompts and sweep.n_prompts must be positive".into());
        }
        let c = &self.classifier;
        if !(c.c > 0.0) || c.gamma.is_some_and(|g| !(g > 0.0)) || !(c.tol > 0.0) {
            return bad("classifier C, gamma and tol must be positive".into());
        }
        if c.k_neighbors == 0 || !(c.balance_ratio > 0.0) {
            return bad("classifier k_neighbors and balance_ratio must be positive".into());
        }
        if !(c.test_fraction > 0.0 && c.test_fraction < 1.0) {
            return bad("classifier.test_fraction must lie in (0, 1)".into());
        }
        crate::experiments::source_sweep_pairs(self.model.n_layers, self.sweep.distance, self.sweep.source_min..=self.sweep.source_max)?;
        crate::experiments::distance_sweep_pairs(
            self.model.n_layers,
            LayerPair::new(self.sweep.start_source, self.sweep.start_target),
            self.sweep.steps,
        )?;
        let workdir = self.workdir();
        for p in [self.dataset_path(), self.checkpoint_path()] {
            if p.starts_with(&workdir) {
                continue;
            }
            match p.parent() {
                Some(parent) if parent.as_os_str().is_empty() || parent.is_dir() => {}
                _ => return bad(format!("parent directory of {} does not exist", p.display())),
            }
        }
        Ok(())
    }

    /// The model config with the tokenizer's vocabulary size and the init seed.
    pub fn model_config(&self, vocab_size: usize) -> ModelConfig {
        let mut m = self.model.clone();
        if m.vocab_size == 0 {
            m.vocab_size = vocab_size;
        }
        m.seed = self.seeds.model_init;
        m
    }

    pub fn train_hyper(&self) -> TrainHyper {
        TrainHyper {
            seed: self.seeds.train,
            ..self.train.clone()
        }
    }

    pub fn split_options(&self) -> SplitOptions {
        SplitOptions {
            test_fraction: self.classifier.test_fraction,
            stratified: self.classifier.stratified,
            seed: self.seeds.split,
        }
    }

    pub fn pipeline_options(&self) -> PipelineOptions {
        let c = &self.classifier;
        PipelineOptions {
            svm: SvmParams {
                c: c.c,
                gamma: c.gamma,
                tol: c.tol,
                max_iter: c.max_iter,
                seed: self.seeds.svm,
            },
            k_neighbors: c.k_neighbors,
            balance_ratio: c.balance_ratio,
            label_mode: c.label_mode,
            append_position_feature: c.append_position_feature,
            threshold: c.threshold,
            resample_seed: self.seeds.resample,
        }
    }

    /// SHA-256 of the canonical JSON of everything except `paths`, so the
    /// same experiment run in another directory hashes identically.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.paths = Paths::default();
        let canonical = serde_json::to_vec(&c).expect("config serializes");
        hex::encode(Sha256::digest(&canonical))
    }
}

/// Config hash and seeds stamped into every JSON artifact.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub config_hash: String,
    pub seeds: Seeds,
}

impl Provenance {
    pub fn of(cfg: &RunConfig) -> Self {
        Self {
            config_hash: cfg.hash(),
            seeds: cfg.seeds,
        }
    }
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}
