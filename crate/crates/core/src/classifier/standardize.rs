// SPDX-License-Identifier: MIT OR Apache-2.0

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Per-feature mean and population standard deviation.
///
/// Zero-variance features get `std = 1` and are listed in `flagged`, so
/// they map to a constant zero column.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StandardizerParams {
    pub means: Vec<f64>,
    pub stds: Vec<f64>,
    pub flagged: Vec<usize>,
}

impl StandardizerParams {
    pub fn dim(&self) -> usize {
        self.means.len()
    }

    pub fn apply_row(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                got: x.len(),
            });
        }
        Ok(x.iter()
            .zip(self.means.iter().zip(&self.stds))
            .map(|(v, (m, s))| (v - m) / s)
            .collect())
    }
}

pub fn fit_standardizer(x: &[Vec<f64>]) -> Result<StandardizerParams> {
    let first = x.first().ok_or(Error::EmptyInput)?;
    let d = first.len();
    let n = x.len() as f64;
    let mut means = vec![0.0; d];
    for row in x {
        if row.len() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                got: row.len(),
            });
        }
        for (m, v) in means.iter_mut().zip(row) {
            *m += v;
        }
    }
    means.iter_mut().for_each(|m| *m /= n);
    let mut vars = vec![0.0; d];
    for row in x {
        for ((s, v), m) in vars.iter_mut().zip(row).zip(&means) {
            *s += (v - m) * (v - m);
        }
    }
    let mut flagged = Vec::new();
    let stds = vars
        .into_iter()
        .enumerate()
        .map(|(j, s)| {
            let std = (s / n).sqrt();
            if std > 1e-12 {
                std
            } else {
                flagged.push(j);
                1.0
            }
        })
        .collect();
    Ok(StandardizerParams { means, stds, flagged })
}

pub fn apply_standardizer(params: &StandardizerParams, x: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    x.iter().map(|row| params.apply_row(row)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_computed_column() {
        let x = vec![vec![1.0], vec![2.0], vec![3.0]];
        let p = fit_standardizer(&x).unwrap();
        assert!((p.means[0] - 2.0).abs() < 1e-12);
        assert!((p.stds[0] - (2.0f64 / 3.0).sqrt()).abs() < 1e-12);
        let t = apply_standardizer(&p, &x).unwrap();
        for (got, want) in t.iter().zip([-1.224_744_871, 0.0, 1.224_744_871]) {
            assert!((got[0] - want).abs() < 1e-6);
        }
    }

    #[test]
    fn constant_column_is_flagged_and_zeroed() {
        let x = vec![vec![5.0, 1.0], vec![5.0, 2.0]];
        let p = fit_standardizer(&x).unwrap();
        assert_eq!(p.flagged, vec![0]);
        assert_eq!(p.stds[0], 1.0);
        let t = apply_standardizer(&p, &x).unwrap();
        assert!(t.iter().all(|r| r[0] == 0.0));
    }

    #[test]
    fn standardized_columns_have_zero_mean_unit_std() {
        let x: Vec<Vec<f64>> = (0..50)
            .map(|i| vec![(i as f64 * 0.7).sin() * 3.0 + 1.0, i as f64 * i as f64])
            .collect();
        let p = fit_standardizer(&x).unwrap();
        let t = apply_standardizer(&p, &x).unwrap();
        let again = fit_standardizer(&t).unwrap();
        for j in 0..2 {
            assert!(again.means[j].abs() < 1e-6);
            assert!((again.stds[j] - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn errors() {
        assert!(fit_standardizer(&[]).is_err());
        let p = fit_standardizer(&[vec![1.0, 2.0]]).unwrap();
        assert!(p.apply_row(&[1.0]).is_err());
    }
}
