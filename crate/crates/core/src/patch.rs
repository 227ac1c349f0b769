// SPDX-License-Identifier: MIT OR Apache-2.0

//! Two-pass back-patching: capture at a later layer, inject at an earlier one.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{HiddenState, Injection, Model, TokenSequence, Tokenizer};

/// A capture layer and an injection layer. Layer 0 is the embedding output;
/// injecting at `target` replaces the stream entering block `target + 1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct LayerPair {
    pub source: usize,
    pub target: usize,
}

impl LayerPair {
    pub fn new(source: usize, target: usize) -> Self {
        Self { source, target }
    }

    pub fn distance(&self) -> isize {
        self.source as isize - self.target as isize
    }

    /// Accepts `source >= target`; equal layers give the degenerate self-patch.
    pub fn validate(&self, n_layers: usize) -> Result<()> {
        if self.source > n_layers {
            return Err(Error::LayerOutOfRange {
                layer: self.source,
                max: n_layers,
            });
        }
        if self.target >= n_layers {
            return Err(Error::LayerOutOfRange {
                layer: self.target,
                max: n_layers - 1,
            });
        }
        if self.source < self.target {
            return Err(Error::InvalidArgument(format!(
                "source layer {} is below target layer {}",
                self.source, self.target
            )));
        }
        Ok(())
    }

    /// `validate` plus strict back-patching (`source > target`).
    pub fn validate_strict(&self, n_layers: usize) -> Result<()> {
        self.validate(n_layers)?;
        if self.source == self.target {
            return Err(Error::InvalidArgument(format!(
                "source and target are both layer {}",
                self.source
            )));
        }
        Ok(())
    }
}

impl std::fmt::Display for LayerPair {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}:{}", self.source, self.target)
    }
}

impl std::str::FromStr for LayerPair {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::InvalidArgument(format!("expected SRC:TGT, got {s:?}"));
        let (a, b) = s.split_once(':').ok_or_else(bad)?;
        Ok(Self::new(a.trim().parse().map_err(|_| bad())?, b.trim().parse().map_err(|_| bad())?))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchSpec {
    pub layers: LayerPair,
    pub positions: BTreeSet<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchRun {
    pub generation: String,
    pub generated_ids: Vec<u32>,
    pub patched_positions: BTreeSet<usize>,
    pub gold_logprob_patched: f64,
    pub gold_logprob_base: f64,
}

/// One state per prompt position from a single unpatched pass.
pub fn capture_source_states(model: &Model, prompt: &TokenSequence, source_layer: usize) -> Result<Vec<HiddenState>> {
    let mut trace = model.forward(prompt, &BTreeSet::from([source_layer]))?;
    Ok(trace.captured.remove(&source_layer).unwrap_or_default())
}

/// Injections placing `states[i]` at `(target_layer, i)` for each selected `i`.
pub fn injections_for(states: &[HiddenState], target_layer: usize, positions: &BTreeSet<usize>) -> Result<Vec<Injection>> {
    positions
        .iter()
        .map(|&i| {
            let s = states.get(i).ok_or(Error::PositionOutOfRange {
                position: i,
                len: states.len(),
            })?;
            debug_assert_eq!(s.position, i);
            Ok(Injection {
                layer: target_layer,
                position: i,
                vector: s.vector.clone(),
            })
        })
        .collect()
}

fn check_states(states: &[HiddenState], prompt: &TokenSequence, source_layer: usize) -> Result<()> {
    if states.len() != prompt.len() {
        return Err(Error::DimensionMismatch {
            expected: prompt.len(),
            got: states.len(),
        });
    }
    if let Some(s) = states.iter().enumerate().find(|(i, s)| s.position != *i || s.layer != source_layer) {
        return Err(Error::InvalidArgument(format!(
            "state {} was captured at (layer {}, position {}), expected layer {source_layer}",
            s.0, s.1.layer, s.1.position
        )));
    }
    Ok(())
}

/// Gold-answer token ids; an answer with no tokens is an error.
pub fn gold_ids(tokenizer: &Tokenizer, gold: &str) -> Result<Vec<u32>> {
    let ids = tokenizer.encode(gold);
    if ids.is_empty() {
        return Err(Error::InvalidArgument("gold answer has no tokens".into()));
    }
    Ok(ids)
}

/// Reusable unpatched quantities for one prompt.
#[derive(Debug, Clone)]
pub struct Baseline {
    pub gold_ids: Vec<u32>,
    pub gold_logprob: f64,
}

impl Baseline {
    pub fn compute(model: &Model, tokenizer: &Tokenizer, prompt: &TokenSequence, gold: &str) -> Result<Self> {
        let gold_ids = gold_ids(tokenizer, gold)?;
        let gold_logprob = model.sequence_logprob(prompt, &gold_ids, &[])?;
        Ok(Self { gold_ids, gold_logprob })
    }
}

/// Second pass with `spec.positions` patched, greedy generation and gold scoring.
#[allow(clippy::too_many_arguments)]
pub fn run_patched(
    model: &Model,
    tokenizer: &Tokenizer,
    prompt: &TokenSequence,
    spec: &PatchSpec,
    source_states: &[HiddenState],
    gold: &str,
    max_new: usize,
) -> Result<PatchRun> {
    let base = Baseline::compute(model, tokenizer, prompt, gold)?;
    run_patched_with(model, tokenizer, prompt, spec, source_states, &base, max_new)
}

/// `run_patched` with the unpatched gold score supplied by the caller.
pub fn run_patched_with(
    model: &Model,
    tokenizer: &Tokenizer,
    prompt: &TokenSequence,
    spec: &PatchSpec,
    source_states: &[HiddenState],
    base: &Baseline,
    max_new: usize,
) -> Result<PatchRun> {
    spec.layers.validate(model.config().n_layers)?;
    check_states(source_states, prompt, spec.layers.source)?;
    if let Some(&p) = spec.positions.iter().find(|&&p| p >= prompt.len()) {
        return Err(Error::PositionOutOfRange {
            position: p,
            len: prompt.len(),
        });
    }
    let inj = injections_for(source_states, spec.layers.target, &spec.positions)?;
    let generated_ids = model.greedy_generate(prompt, max_new, &inj)?;
    let gold_logprob_patched = if inj.is_empty() {
        base.gold_logprob
    } else {
        model.sequence_logprob(prompt, &base.gold_ids, &inj)?
    };
    Ok(PatchRun {
        generation: tokenizer.detokenize(&generated_ids),
        generated_ids,
        patched_positions: spec.positions.clone(),
        gold_logprob_patched,
        gold_logprob_base: base.gold_logprob,
    })
}

/// States grouped by layer, for callers that capture several layers at once.
pub fn capture_layers(model: &Model, prompt: &TokenSequence, layers: &BTreeSet<usize>) -> Result<BTreeMap<usize, Vec<HiddenState>>> {
    Ok(model.forward(prompt, layers)?.captured)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn setup() -> (Model, Tokenizer) {
        let tok = Tokenizer::from_symbols(["the", "of", "is", "x", "y", "z"]);
        let cfg = ModelConfig {
            n_layers: 4,
            d_model: 16,
            n_heads: 2,
            d_ff: 32,
            vocab_size: tok.vocab_size(),
            max_seq_len: 16,
            seed: 3,
            ..Default::default()
        };
        (Model::new(cfg).unwrap(), tok)
    }

    #[test]
    fn layer_pair_parsing_and_validation() {
        let p: LayerPair = "8:4".parse().unwrap();
        assert_eq!(p, LayerPair::new(8, 4));
        assert_eq!(p.distance(), 4);
        assert_eq!(p.to_string(), "8:4");
        assert!("8-4".parse::<LayerPair>().is_err());
        assert!(LayerPair::new(4, 4).validate(12).is_ok());
        assert!(LayerPair::new(4, 4).validate_strict(12).is_err());
        assert!(LayerPair::new(3, 4).validate(12).is_err());
        assert!(LayerPair::new(13, 4).validate(12).is_err());
        assert!(LayerPair::new(12, 12).validate(12).is_err());
    }

    #[test]
    fn empty_patch_equals_baseline_generation() {
        let (m, tok) = setup();
        let prompt = tok.tokenize("the x of y is").unwrap();
        let states = capture_source_states(&m, &prompt, 3).unwrap();
        let spec = PatchSpec {
            layers: LayerPair::new(3, 1),
            positions: BTreeSet::new(),
        };
        let run = run_patched(&m, &tok, &prompt, &spec, &states, "z", 4).unwrap();
        assert_eq!(run.generated_ids, m.greedy_generate(&prompt, 4, &[]).unwrap());
        assert_eq!(run.gold_logprob_patched, run.gold_logprob_base);
    }

    #[test]
    fn state_mismatch_is_rejected() {
        let (m, tok) = setup();
        let prompt = tok.tokenize("the x of y is").unwrap();
        let states = capture_source_states(&m, &prompt, 2).unwrap();
        let spec = PatchSpec {
            layers: LayerPair::new(3, 1),
            positions: BTreeSet::from([0]),
        };
        assert!(run_patched(&m, &tok, &prompt, &spec, &states, "z", 4).is_err());
        let other = tok.tokenize("the x is").unwrap();
        let spec = PatchSpec {
            layers: LayerPair::new(2, 1),
            positions: BTreeSet::from([0]),
        };
        assert!(run_patched(&m, &tok, &other, &spec, &states, "z", 4).is_err());
        let spec = PatchSpec {
            layers: LayerPair::new(2, 1),
            positions: BTreeSet::from([40]),
        };
        assert!(matches!(
            run_patched(&m, &tok, &prompt, &spec, &states, "z", 4),
            Err(Error::PositionOutOfRange { .. })
        ));
    }
}
