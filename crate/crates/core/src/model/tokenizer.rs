// SPDX-License-Identifier: MIT OR Apache-2.0

//! Whitespace word-level tokenizer with reserved special ids.

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
pub const UNK: u32 = 3;

const RESERVED: [&str; 4] = ["<pad>", "<bos>", "<eos>", "<unk>"];

/// A non-empty list of token ids.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct TokenSequence(Vec<u32>);

impl TokenSequence {
    pub fn new(tokens: Vec<u32>) -> Result<Self> {
        if tokens.is_empty() {
            return Err(Error::EmptyInput);
        }
        Ok(Self(tokens))
    }

    pub fn as_slice(&self) -> &[u32] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn into_inner(self) -> Vec<u32> {
        self.0
    }

    /// Appends one token (used to terminate training sequences with EOS).
    pub fn push(&mut self, token: u32) {
        self.0.push(token);
    }
}

impl AsRef<[u32]> for TokenSequence {
    fn as_ref(&self) -> &[u32] {
        &self.0
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Tokenizer {
    to_id: BTreeMap<String, u32>,
    to_symbol: Vec<String>,
}

impl Tokenizer {
    /// Builds a vocabulary: reserved ids first, then `symbols` in first-seen order.
    pub fn from_symbols<I, S>(symbols: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut tok = Tokenizer {
            to_id: BTreeMap::new(),
            to_symbol: Vec::new(),
        };
        for s in RESERVED {
            tok.insert(s);
        }
        for s in symbols {
            tok.insert(s.as_ref());
        }
        tok
    }

    fn insert(&mut self, symbol: &str) {
        if !self.to_id.contains_key(symbol) {
            let id = self.to_symbol.len() as u32;
            self.to_id.insert(symbol.to_string(), id);
            self.to_symbol.push(symbol.to_string());
        }
    }

    pub fn vocab_size(&self) -> usize {
        self.to_symbol.len()
    }

    pub fn id(&self, symbol: &str) -> u32 {
        self.to_id.get(symbol).copied().unwrap_or(UNK)
    }

    pub fn symbol(&self, id: u32) -> &str {
        self.to_symbol
            .get(id as usize)
            .map(String::as_str)
            .unwrap_or(RESERVED[UNK as usize])
    }

    /// Encodes whitespace-separated symbols without BOS. Unknown symbols map to UNK.
    pub fn encode(&self, text: &str) -> Vec<u32> {
        text.split_whitespace().map(|w| self.id(w)).collect()
    }

    /// Encodes `text` with BOS prepended.
    pub fn tokenize(&self, text: &str) -> Result<TokenSequence> {
        let body = self.encode(text);
        if body.is_empty() {
            return Err(Error::EmptyInput);
        }
        let mut tokens = Vec::with_capacity(body.len() + 1);
        tokens.push(BOS);
        tokens.extend(body);
        TokenSequence::new(tokens)
    }

    /// Joins symbols with single spaces, dropping PAD/BOS/EOS.
    pub fn detokenize(&self, tokens: &[u32]) -> String {
        tokens
            .iter()
            .filter(|&&t| t != PAD && t != BOS && t != EOS)
            .map(|&t| self.symbol(t))
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.to_id)?)
    }

    pub fn from_json(json: &str) -> Result<Self> {
        let map: BTreeMap<String, u32> = serde_json::from_str(json)?;
        let mut to_symbol = vec![None; map.len()];
        for (sym, &id) in &map {
            let slot = to_symbol
                .get_mut(id as usize)
                .ok_or_else(|| Error::InvalidArgument(format!("vocabulary ids not dense: {sym}={id}")))?;
            if slot.is_some() {
                return Err(Error::InvalidArgument(format!("duplicate vocabulary id {id}")));
            }
            *slot = Some(sym.clone());
        }
        let to_symbol: Vec<String> = to_symbol.into_iter().map(|s| s.unwrap_or_default()).collect();
        for (i, r) in RESERVED.iter().enumerate() {
            if to_symbol.get(i).map(String::as_str) != Some(*r) {
                return Err(Error::InvalidArgument(format!("reserved id {i} must be {r}")));
            }
        }
        Ok(Tokenizer { to_id: map, to_symbol })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&s)
    }
}
