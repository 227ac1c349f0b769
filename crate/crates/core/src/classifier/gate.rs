// SPDX-License-Identifier: MIT OR Apache-2.0

//! A trained gate and its on-disk form.
//!
//! The file is one JSON object. Support vectors are stored as base64 of
//! little-endian `f64`, row-major, `n_support × dims`; everything else is
//! plain JSON numbers.

use std::path::Path;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine as _;
use serde::{Deserialize, Serialize};

use super::standardize::StandardizerParams;
use super::svm::SvmModel;
use crate::error::{Error, Result};
use crate::patch::LayerPair;

pub const GATE_FORMAT: &str = "autopatch-gate";
pub const GATE_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Gate {
    pub layers: LayerPair,
    pub standardizer: StandardizerParams,
    pub svm: SvmModel,
    /// The prompt position is appended to the hidden state before scaling.
    pub append_position_feature: bool,
    /// Patch when the decision value exceeds this.
    pub threshold: f64,
}

impl Gate {
    pub fn features(&self, hidden: &[f32], position: usize) -> Result<Vec<f64>> {
        let x = raw_features(hidden, position, self.append_position_feature);
        self.standardizer.apply_row(&x)
    }

    pub fn decision_value(&self, hidden: &[f32], position: usize) -> Result<f64> {
        self.svm.decision_value(&self.features(hidden, position)?)
    }

    pub fn predict(&self, hidden: &[f32], position: usize) -> Result<bool> {
        Ok(self.decision_value(hidden, position)? > self.threshold)
    }

    /// Hidden-state width the gate expects.
    pub fn hidden_dim(&self) -> usize {
        self.standardizer.dim() - self.append_position_feature as usize
    }

    pub fn to_json(&self) -> Result<String> {
        let dims = self.standardizer.dim();
        let mut payload = Vec::with_capacity(self.svm.support_vectors.len() * dims * 8);
        for sv in &self.svm.support_vectors {
            for v in sv {
                payload.extend_from_slice(&v.to_le_bytes());
            }
        }
        let file = GateFile {
            format: GATE_FORMAT.into(),
            version: GATE_VERSION,
            layers: self.layers,
            c: self.svm.c,
            gamma: self.svm.gamma,
            bias: self.svm.bias,
            threshold: self.threshold,
            dims,
            append_position_feature: self.append_position_feature,
            standardizer: self.standardizer.clone(),
            n_support: self.svm.support_vectors.len(),
            dual_coefs: self.svm.dual_coefs.clone(),
            support_vectors_b64: B64.encode(payload),
        };
        Ok(serde_json::to_string_pretty(&file)?)
    }

    pub fn from_json(json: &str) -> Result<Self> {
        let f: GateFile = serde_json::from_str(json)?;
        let bad = |m: String| Error::Classifier(format!("gate file: {m}"));
        if f.format != GATE_FORMAT || f.version != GATE_VERSION {
            return Err(bad(format!("unsupported format {} v{}", f.format, f.version)));
        }
        if f.standardizer.dim() != f.dims || f.standardizer.stds.len() != f.dims {
            return Err(bad("standardizer width disagrees with dims".into()));
        }
        if f.dual_coefs.len() != f.n_support {
            return Err(bad("dual coefficient count disagrees with n_support".into()));
        }
        let bytes = B64.decode(f.support_vectors_b64.as_bytes()).map_err(|e| bad(e.to_string()))?;
        if bytes.len() != f.n_support * f.dims * 8 {
            return Err(bad(format!(
                "support vector payload has {} bytes, expected {}",
                bytes.len(),
                f.n_support * f.dims * 8
            )));
        }
        let values: Vec<f64> = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect();
        let support_vectors = if f.dims == 0 {
            vec![Vec::new(); f.n_support]
        } else {
            values.chunks(f.dims).map(<[f64]>::to_vec).collect()
        };
        Ok(Gate {
            layers: f.layers,
            standardizer: f.standardizer,
            svm: SvmModel {
                support_vectors,
                dual_coefs: f.dual_coefs,
                bias: f.bias,
                gamma: f.gamma,
                c: f.c,
            },
            append_position_feature: f.append_position_feature,
            threshold: f.threshold,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingArtifact(path.to_path_buf()));
        }
        Self::from_json(&std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }
}

pub fn raw_features(hidden: &[f32], position: usize, append_position: bool) -> Vec<f64> {
    let mut x: Vec<f64> = hidden.iter().map(|&v| v as f64).collect();
    if append_position {
        x.push(position as f64);
    }
    x
}

#[derive(Serialize, Deserialize)]
struct GateFile {
    format: String,
    version: u32,
    layers: LayerPair,
    c: f64,
    gamma: f64,
    bias: f64,
    threshold: f64,
    dims: usize,
    append_position_feature: bool,
    standardizer: StandardizerParams,
    n_support: usize,
    dual_coefs: Vec<f64>,
    support_vectors_b64: String,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gate() -> Gate {
        Gate {
            layers: LayerPair::new(8, 4),
            standardizer: StandardizerParams {
                means: vec![0.5, -1.0, 2.0],
                stds: vec![1.0, 0.3, 1.0],
                flagged: vec![0],
            },
            svm: SvmModel {
                support_vectors: vec![vec![0.1, 0.2, std::f64::consts::PI], vec![-1e-300, 7.0, 1.0 / 3.0]],
                dual_coefs: vec![0.7, -0.7],
                bias: -0.012345678901234567,
                gamma: 1.0 / 3.0,
                c: 1.0,
            },
            append_position_feature: true,
            threshold: 0.0,
        }
    }

    #[test]
    fn json_round_trip_is_exact() {
        let g = gate();
        let back = Gate::from_json(&g.to_json().unwrap()).unwrap();
        assert_eq!(back, g);
        assert_eq!(back.hidden_dim(), 2);
        assert_eq!(back.decision_value(&[0.3, 0.4], 5).unwrap(), g.decision_value(&[0.3, 0.4], 5).unwrap());
    }

    #[test]
    fn corrupt_payload_is_rejected() {
        let json = gate().to_json().unwrap();
        let mut v: serde_json::Value = serde_json::from_str(&json).unwrap();
        v["n_support"] = 3.into();
        assert!(Gate::from_json(&v.to_string()).is_err());
        let mut v: serde_json::Value = serde_json::from_str(&json).unwrap();
        v["version"] = 9.into();
        assert!(Gate::from_json(&v.to_string()).is_err());
    }

    #[test]
    fn wrong_width_is_an_error() {
        assert!(gate().predict(&[0.0; 5], 0).is_err());
    }
}
