// SPDX-License-Identifier: MIT OR Apache-2.0

//! Synthetic two-hop fact worlds and a MuSiQue-schema JSONL loader.
//!
//! A world has one entity→entity relation (`boss`) and one
//! entity→attribute relation (`color`). Single-hop questions ask for one of
//! them; two-hop questions ask for `color(boss(e))` without naming the
//! intermediate entity.

use std::collections::BTreeSet;
use std::io::BufRead;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::tokenizer::EOS;
use crate::model::{TokenSequence, Tokenizer};

pub const R1_NAME: &str = "boss";
pub const R2_NAME: &str = "color";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FactWorld {
    pub entities: Vec<String>,
    pub attributes: Vec<String>,
    /// `r1[e]` is the entity index `boss(e)`.
    pub r1: Vec<usize>,
    /// `r2[e]` is the attribute index `color(e)`.
    pub r2: Vec<usize>,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Eval,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QaItem {
    pub prompt: String,
    #[serde(default)]
    pub hop1_answer: String,
    pub hop3: String,
    pub split: Split,
}

pub fn r1_prompt(entity: &str) -> String {
    format!("the {R1_NAME} of {entity} is")
}

pub fn r2_prompt(entity: &str) -> String {
    format!("the {R2_NAME} of {entity} is")
}

pub fn two_hop_prompt(entity: &str) -> String {
    format!("the {R2_NAME} of the {R1_NAME} of {entity} is")
}

pub fn generate_world(seed: u64, n_entities: usize, n_attributes: usize) -> Result<FactWorld> {
    if n_entities < 4 {
        return Err(Error::InvalidArgument(format!("n_entities must be >= 4, got {n_entities}")));
    }
    if n_attributes < 2 {
        return Err(Error::InvalidArgument(format!("n_attributes must be >= 2, got {n_attributes}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r1 = (0..n_entities).map(|_| rng.gen_range(0..n_entities)).collect();
    let r2 = (0..n_entities).map(|_| rng.gen_range(0..n_attributes)).collect();
    Ok(FactWorld {
        entities: (0..n_entities).map(|i| format!("e{i}")).collect(),
        attributes: (0..n_attributes).map(|i| format!("a{i}")).collect(),
        r1,
        r2,
        seed,
    })
}

impl FactWorld {
    pub fn boss(&self, e: usize) -> usize {
        self.r1[e]
    }

    pub fn color(&self, e: usize) -> usize {
        self.r2[e]
    }

    pub fn two_hop_item(&self, e: usize, split: Split) -> QaItem {
        QaItem {
            prompt: two_hop_prompt(&self.entities[e]),
            hop1_answer: self.entities[self.boss(e)].clone(),
            hop3: self.attributes[self.color(self.boss(e))].clone(),
            split,
        }
    }

    /// Every symbol the templates can produce, in a fixed order.
    pub fn vocabulary(&self) -> Vec<String> {
        let mut v: Vec<String> = ["the", "of", "is", "?", R1_NAME, R2_NAME]
            .iter()
            .map(|s| s.to_string())
            .collect();
        v.extend(self.entities.iter().cloned());
        v.extend(self.attributes.iter().cloned());
        v
    }

    pub fn tokenizer(&self) -> Tokenizer {
        Tokenizer::from_symbols(self.vocabulary())
    }

    /// Single-hop QA pairs: all `boss` facts, then all `color` facts.
    pub fn single_hop_items(&self) -> Vec<(String, String)> {
        let mut out = Vec::with_capacity(2 * self.entities.len());
        for (e, name) in self.entities.iter().enumerate() {
            out.push((r1_prompt(name), self.entities[self.boss(e)].clone()));
        }
        for (e, name) in self.entities.iter().enumerate() {
            out.push((r2_prompt(name), self.attributes[self.color(e)].clone()));
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorpusOptions {
    /// Fraction of subjects whose two-hop question is included in training.
    pub two_hop_fraction: f64,
    pub seed: u64,
}

impl Default for CorpusOptions {
    fn default() -> Self {
        Self {
            two_hop_fraction: 0.25,
            seed: 0,
        }
    }
}

/// Training corpus plus the two-hop split bookkeeping.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Corpus {
    /// `"<prompt> <answer>"` lines, one per training sequence.
    pub lines: Vec<String>,
    pub train_two_hop: Vec<QaItem>,
    /// Held-out two-hop questions, one per remaining subject.
    pub eval_pool: Vec<QaItem>,
}

impl Corpus {
    /// Tokenized training sequences: BOS, prompt, answer, EOS.
    pub fn sequences(&self, tokenizer: &Tokenizer) -> Result<Vec<TokenSequence>> {
        self.lines
            .iter()
            .map(|l| {
                let mut s = tokenizer.tokenize(l)?;
                s.push(EOS);
                Ok(s)
            })
            .collect()
    }

    pub fn write_text(&self, path: &Path) -> Result<()> {
        let mut body = self.lines.join("\n");
        body.push('\n');
        std::fs::write(path, body).map_err(|e| Error::io(path, e))
    }
}

pub fn emit_training_corpus(world: &FactWorld, opts: &CorpusOptions) -> Result<Corpus> {
    if !(0.0..=1.0).contains(&opts.two_hop_fraction) {
        return Err(Error::InvalidArgument("two_hop_fraction must lie in [0, 1]".into()));
    }
    let n = world.entities.len();
    let mut lines: Vec<String> = world
        .single_hop_items()
        .into_iter()
        .map(|(p, a)| format!("{p} {a}"))
        .collect();
    let mut subjects: Vec<usize> = (0..n).collect();
    subjects.shuffle(&mut ChaCha8Rng::seed_from_u64(opts.seed));
    let n_train = (opts.two_hop_fraction * n as f64).floor() as usize;
    let mut train_subjects = subjects[..n_train].to_vec();
    let mut eval_subjects = subjects[n_train..].to_vec();
    train_subjects.sort_unstable();
    eval_subjects.sort_unstable();
    let train_two_hop: Vec<QaItem> = train_subjects.iter().map(|&e| world.two_hop_item(e, Split::Train)).collect();
    for qa in &train_two_hop {
        lines.push(format!("{} {}", qa.prompt, qa.hop3));
    }
    Ok(Corpus {
        lines,
        train_two_hop,
        eval_pool: eval_subjects.iter().map(|&e| world.two_hop_item(e, Split::Eval)).collect(),
    })
}

/// Draws `n` eval items uniformly with replacement from the held-out pool.
pub fn sample_eval_items(pool: &[QaItem], n: usize, seed: u64) -> Result<Vec<QaItem>> {
    if pool.is_empty() {
        return Err(Error::InvalidArgument("eval pool is empty".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..n).map(|_| pool[rng.gen_range(0..pool.len())].clone()).collect())
}

/// Distinct prompts in first-seen order.
pub fn unique_by_prompt(items: &[QaItem]) -> Vec<QaItem> {
    let mut seen = BTreeSet::new();
    items.iter().filter(|q| seen.insert(q.prompt.clone())).cloned().collect()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LineError {
    pub line: usize,
    pub message: String,
}

#[derive(Debug, Clone, Default)]
pub struct MusiqueLoad {
    pub items: Vec<QaItem>,
    pub errors: Vec<LineError>,
}

#[derive(Deserialize)]
struct MusiqueRow {
    prompt: Option<String>,
    hop3: Option<serde_json::Value>,
    #[serde(default)]
    hop1_answer: Option<String>,
}

/// Reads `{prompt, hop3}` JSONL. Bad lines are reported (1-based) and skipped;
/// blank lines are ignored.
pub fn load_musique_jsonl(path: &Path) -> Result<MusiqueLoad> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = MusiqueLoad::default();
    for (idx, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let lineno = idx + 1;
        let row: MusiqueRow = match serde_json::from_str(&line) {
            Ok(r) => r,
            Err(e) => {
                out.errors.push(LineError {
                    line: lineno,
                    message: e.to_string(),
                });
                continue;
            }
        };
        let hop3 = match row.hop3 {
            Some(serde_json::Value::String(s)) => Some(s),
            Some(serde_json::Value::Array(a)) => a.first().and_then(|v| v.as_str()).map(str::to_string),
            _ => None,
        };
        match (row.prompt, hop3) {
            (Some(prompt), Some(hop3)) if !prompt.trim().is_empty() && !hop3.trim().is_empty() => {
                out.items.push(QaItem {
                    prompt,
                    hop1_answer: row.hop1_answer.unwrap_or_default(),
                    hop3,
                    split: Split::Eval,
                })
            }
            (None, _) => out.errors.push(LineError {
                line: lineno,
                message: "missing field `prompt`".into(),
            }),
            _ => out.errors.push(LineError {
                line: lineno,
                message: "missing or empty field `hop3`".into(),
            }),
        }
    }
    Ok(out)
}
