// SPDX-License-Identifier: MIT OR Apache-2.0

//! Gated two-pass inference and solve-rate evaluation.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::classifier::pipeline::LabelMode;
use crate::classifier::Gate;
use crate::error::{Error, Result};
use crate::metric::answer_matches;
use crate::model::{Model, Tokenizer};
use crate::oracle::{thread_pool, Sample};
use crate::patch::{capture_source_states, injections_for, LayerPair};
use crate::taskgen::QaItem;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalMode {
    Baseline,
    Autopatch,
    OraclePatch,
    PatchAll,
    AlwaysFalse,
    RandomGate,
}

impl EvalMode {
    pub const ALL: [EvalMode; 6] = [
        EvalMode::Baseline,
        EvalMode::Autopatch,
        EvalMode::OraclePatch,
        EvalMode::PatchAll,
        EvalMode::AlwaysFalse,
        EvalMode::RandomGate,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            EvalMode::Baseline => "baseline",
            EvalMode::Autopatch => "autopatch",
            EvalMode::OraclePatch => "oracle_patch",
            EvalMode::PatchAll => "patch_all",
            EvalMode::AlwaysFalse => "always_false",
            EvalMode::RandomGate => "random_gate",
        }
    }
}

impl std::fmt::Display for EvalMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for EvalMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        EvalMode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown eval mode {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptOutcome {
    pub prompt: String,
    pub answer: String,
    pub correct: bool,
    pub patched_positions: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub mode: EvalMode,
    pub solve_rate: f64,
    pub n_prompts: usize,
    pub n_correct: usize,
    pub layers: LayerPair,
    /// Decision threshold of the gate, when one was used.
    pub threshold: Option<f64>,
    /// Random-gate seed, when one was used.
    pub seed: Option<u64>,
    pub per_prompt: Vec<PromptOutcome>,
}

/// Positions the exhaustive labeller marked beneficial, per prompt.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct OracleLabels {
    pub positives: BTreeMap<String, BTreeSet<usize>>,
}

impl OracleLabels {
    pub fn from_samples(samples: &[Sample], mode: LabelMode) -> Self {
        let mut positives: BTreeMap<String, BTreeSet<usize>> = BTreeMap::new();
        for s in samples {
            let entry = positives.entry(s.prompt_source.clone()).or_default();
            if mode.label(s) {
                entry.insert(s.position_source);
            }
        }
        Self { positives }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalOptions {
    pub max_new: usize,
    pub jobs: usize,
    pub seed: u64,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            max_new: 8,
            jobs: 0,
            seed: 0,
        }
    }
}

/// Inputs that only some modes need.
#[derive(Debug, Clone, Copy, Default)]
pub struct EvalInputs<'a> {
    pub gate: Option<&'a Gate>,
    pub oracle: Option<&'a OracleLabels>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AutopatchAnswer {
    pub answer: String,
    pub generated_ids: Vec<u32>,
    pub patched_positions: BTreeSet<usize>,
}

fn check_gate(model: &Model, gate: &Gate) -> Result<()> {
    if gate.hidden_dim() != model.config().d_model {
        return Err(Error::DimensionMismatch {
            expected: model.config().d_model,
            got: gate.hidden_dim(),
        });
    }
    gate.layers.validate(model.config().n_layers)
}

/// Pass 1 captures every position at the gate's source layer; positions the
/// gate accepts are injected jointly at the target layer for pass 2.
pub fn autopatch_answer(model: &Model, tokenizer: &Tokenizer, gate: &Gate, prompt: &str, max_new: usize) -> Result<AutopatchAnswer> {
    check_gate(model, gate)?;
    let tokens = tokenizer.tokenize(prompt)?;
    let states = capture_source_states(model, &tokens, gate.layers.source)?;
    let mut positions = BTreeSet::new();
    for s in &states {
        if gate.predict(&s.vector, s.position)? {
            positions.insert(s.position);
        }
    }
    let inj = injections_for(&states, gate.layers.target, &positions)?;
    let generated_ids = model.greedy_generate(&tokens, max_new, &inj)?;
    Ok(AutopatchAnswer {
        answer: tokenizer.detokenize(&generated_ids),
        generated_ids,
        patched_positions: positions,
    })
}

fn select_positions(
    mode: EvalMode,
    inputs: &EvalInputs<'_>,
    prompt: &str,
    states: &[crate::model::HiddenState],
    index: usize,
    seed: u64,
) -> Result<BTreeSet<usize>> {
    let n = states.len();
    Ok(match mode {
        EvalMode::Baseline | EvalMode::AlwaysFalse => BTreeSet::new(),
        EvalMode::PatchAll => (0..n).collect(),
        EvalMode::Autopatch => {
            let gate = inputs.gate.expect("checked by caller");
            let mut out = BTreeSet::new();
            for s in states {
                if gate.predict(&s.vector, s.position)? {
                    out.insert(s.position);
                }
            }
            out
        }
        EvalMode::OraclePatch => {
            let labels = inputs.oracle.expect("checked by caller");
            labels
                .positives
                .get(prompt)
                .ok_or_else(|| Error::InvalidArgument(format!("no oracle labels for prompt {prompt:?}")))?
                .iter()
                .copied()
                .filter(|&p| p < n)
                .collect()
        }
        EvalMode::RandomGate => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(index as u64);
            (0..n).filter(|_| rng.gen_bool(0.5)).collect()
        }
    })
}

fn eval_one(
    model: &Model,
    tokenizer: &Tokenizer,
    qa: &QaItem,
    index: usize,
    mode: EvalMode,
    layers: LayerPair,
    inputs: &EvalInputs<'_>,
    opts: &EvalOptions,
) -> Result<PromptOutcome> {
    let tokens = tokenizer.tokenize(&qa.prompt)?;
    let (generated, positions) = if mode == EvalMode::Baseline {
        (model.greedy_generate(&tokens, opts.max_new, &[])?, BTreeSet::new())
    } else {
        let states = capture_source_states(model, &tokens, layers.source)?;
        let positions = select_positions(mode, inputs, &qa.prompt, &states, index, opts.seed)?;
        let inj = injections_for(&states, layers.target, &positions)?;
        (model.greedy_generate(&tokens, opts.max_new, &inj)?, positions)
    };
    let answer = tokenizer.detokenize(&generated);
    Ok(PromptOutcome {
        correct: answer_matches(&answer, &qa.hop3),
        prompt: qa.prompt.clone(),
        answer,
        patched_positions: positions.into_iter().collect(),
    })
}

/// Evaluates every item under `mode`. Autopatch uses the gate's own layer
/// pair; other modes use `layers`.
pub fn solve_rate(
    model: &Model,
    tokenizer: &Tokenizer,
    items: &[QaItem],
    mode: EvalMode,
    layers: LayerPair,
    inputs: &EvalInputs<'_>,
    opts: &EvalOptions,
) -> Result<EvalResult> {
    if items.is_empty() {
        return Err(Error::EmptyInput);
    }
    let layers = match mode {
        EvalMode::Autopatch => {
            let gate = inputs
                .gate
                .ok_or_else(|| Error::InvalidArgument("autopatch mode needs a gate".into()))?;
            check_gate(model, gate)?;
            gate.layers
        }
        _ => layers,
    };
    layers.validate(model.config().n_layers)?;
    if mode == EvalMode::OraclePatch && inputs.oracle.is_none() {
        return Err(Error::InvalidArgument("oracle_patch mode needs oracle labels".into()));
    }
    let pool = thread_pool(opts.jobs)?;
    let per_prompt: Vec<PromptOutcome> = pool.install(|| {
        items
            .par_iter()
            .enumerate()
            .map(|(i, qa)| eval_one(model, tokenizer, qa, i, mode, layers, inputs, opts))
            .collect::<Result<_>>()
    })?;
    let n_correct = per_prompt.iter().filter(|p| p.correct).count();
    Ok(EvalResult {
        mode,
        solve_rate: n_correct as f64 / per_prompt.len() as f64,
        n_prompts: per_prompt.len(),
        n_correct,
        layers,
        threshold: match mode {
            EvalMode::Autopatch => inputs.gate.map(|g| g.threshold),
            _ => None,
        },
        seed: (mode == EvalMode::RandomGate).then_some(opts.seed),
        per_prompt,
    })
}

/// Prompt tokens at positions the gate declined to patch, over all prompts.
pub fn unpatched_token_histogram(result: &EvalResult, tokenizer: &Tokenizer) -> Result<BTreeMap<String, usize>> {
    if result.mode != EvalMode::Autopatch {
        return Err(Error::InvalidArgument(format!(
            "histogram needs autopatch results, got {}",
            result.mode
        )));
    }
    let mut hist = BTreeMap::new();
    for p in &result.per_prompt {
        let tokens = tokenizer.tokenize(&p.prompt)?;
        let patched: BTreeSet<usize> = p.patched_positions.iter().copied().collect();
        for (i, &t) in tokens.as_slice().iter().enumerate() {
            if !patched.contains(&i) {
                *hist.entry(tokenizer.symbol(t).to_string()).or_insert(0) += 1;
            }
        }
    }
    Ok(hist)
}

/// `token,count` rows, most frequent first.
pub fn write_histogram_csv(hist: &BTreeMap<String, usize>, path: &Path) -> Result<()> {
    let mut rows: Vec<(&String, &usize)> = hist.iter().collect();
    rows.sort_by(|a, b| b.1.cmp(a.1).then(a.0.cmp(b.0)));
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    w.write_record(["token", "count"]).map_err(|e| csv_error(path, e))?;
    for (t, c) in rows {
        w.write_record([t.as_str(), &c.to_string()]).map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub(crate) fn csv_error(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::InvalidArgument(format!("csv: {other:?}")),
    }
}

/// Per-prompt answers only, one JSON object per line; mode-independent so
/// that equivalent modes produce identical files.
pub fn write_answers(result: &EvalResult, path: &Path) -> Result<()> {
    #[derive(Serialize)]
    struct Row<'a> {
        prompt: &'a str,
        answer: &'a str,
        correct: bool,
    }
    let mut body = String::new();
    for p in &result.per_prompt {
        body.push_str(&serde_json::to_string(&Row {
            prompt: &p.prompt,
            answer: &p.answer,
            correct: p.correct,
        })?);
        body.push('\n');
    }
    std::fs::write(path, body).map_err(|e| Error::io(path, e))
}

/// Two-column method / solve-rate table.
pub fn summary_table(results: &[EvalResult]) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "{:<16} {:>10} {:>9}", "Method", "Solve rate", "Correct");
    for r in results {
        let _ = writeln!(
            s,
            "{:<16} {:>9.2}% {:>4}/{:<4}",
            r.mode.name(),
            100.0 * r.solve_rate,
            r.n_correct,
            r.n_prompts
        );
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mode_names_round_trip() {
        for m in EvalMode::ALL {
            assert_eq!(m.name().parse::<EvalMode>().unwrap(), m);
            assert_eq!(serde_json::to_string(&m).unwrap(), format!("\"{}\"", m.name()));
        }
        assert!("cot".parse::<EvalMode>().is_err());
    }

    #[test]
    fn oracle_labels_keep_prompts_without_positives() {
        let mk = |p: &str, i, c| Sample {
            prompt_source: p.into(),
            prompt_target: p.into(),
            position_source: i,
            position_target: i,
            hop3: "a".into(),
            generations_patched: String::new(),
            is_correct_patched: c,
            hidden_rep: vec![],
            logprob_delta: 0.0,
        };
        let l = OracleLabels::from_samples(&[mk("p", 0, true), mk("p", 1, false), mk("q", 0, false)], LabelMode::Correctness);
        assert_eq!(l.positives["p"], BTreeSet::from([0]));
        assert!(l.positives["q"].is_empty());
    }
}
