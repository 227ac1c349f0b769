// SPDX-License-Identifier: MIT OR Apache-2.0

//! RBF-kernel support vector classifier trained with SMO.
//!
//! The solver follows the LIBSVM formulation: minimise
//! `½ αᵀQα − eᵀα` subject to `0 ≤ αᵢ ≤ C` and `yᵀα = 0`, with
//! `Qᵢⱼ = yᵢyⱼK(xᵢ, xⱼ)`. Working pairs are chosen by maximal violation for
//! `i` and second-order gain for `j`.

use std::collections::VecDeque;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::resample::squared_distance;
use crate::error::{Error, Result};

const TAU: f64 = 1e-12;
/// Above this many rows the kernel matrix is computed row-by-row with a cache.
const FULL_KERNEL_LIMIT: usize = 4096;
const ROW_CACHE_ROWS: usize = 2048;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SvmParams {
    pub c: f64,
    /// `None` selects `1 / (d · mean feature variance)`.
    pub gamma: Option<f64>,
    pub tol: f64,
    /// `None` selects `10 · n`.
    pub max_iter: Option<usize>,
    pub seed: u64,
}

impl Default for SvmParams {
    fn default() -> Self {
        Self {
            c: 1.0,
            gamma: None,
            tol: 1e-3,
            max_iter: None,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SvmModel {
    pub support_vectors: Vec<Vec<f64>>,
    /// `αᵢ yᵢ` for each support vector.
    pub dual_coefs: Vec<f64>,
    pub bias: f64,
    pub gamma: f64,
    pub c: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub iterations: usize,
    pub converged: bool,
    /// Final maximal KKT violation `m(α) − M(α)`.
    pub kkt_gap: f64,
    pub n_support: usize,
    pub n_at_bound: usize,
    /// `Σ αᵢyᵢ` over all training rows.
    pub sum_alpha_y: f64,
}

pub fn rbf(gamma: f64, a: &[f64], b: &[f64]) -> f64 {
    (-gamma * squared_distance(a, b)).exp()
}

/// `1 / (d · Var(X))` with the variance taken over all entries.
pub fn scale_gamma(x: &[Vec<f64>]) -> f64 {
    let d = x.first().map_or(1, Vec::len).max(1);
    let n = (x.len() * d) as f64;
    let mean = x.iter().flatten().sum::<f64>() / n;
    let var = x.iter().flatten().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    if var > 0.0 {
        1.0 / (d as f64 * var)
    } else {
        1.0
    }
}

impl SvmModel {
    pub fn dim(&self) -> usize {
        self.support_vectors.first().map_or(0, Vec::len)
    }

    pub fn decision_value(&self, x: &[f64]) -> Result<f64> {
        if !self.support_vectors.is_empty() && x.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                got: x.len(),
            });
        }
        let sum: f64 = self
            .support_vectors
            .iter()
            .zip(&self.dual_coefs)
            .map(|(sv, c)| c * rbf(self.gamma, sv, x))
            .sum();
        Ok(sum + self.bias)
    }

    pub fn predict(&self, x: &[f64]) -> Result<bool> {
        Ok(self.decision_value(x)? > 0.0)
    }
}

enum KernelRows<'a> {
    Full(Vec<f64>),
    Cached {
        x: &'a [Vec<f64>],
        gamma: f64,
        rows: Vec<Option<std::rc::Rc<Vec<f64>>>>,
        order: VecDeque<usize>,
    },
}

impl<'a> KernelRows<'a> {
    fn new(x: &'a [Vec<f64>], gamma: f64) -> Self {
        let n = x.len();
        if n <= FULL_KERNEL_LIMIT {
            let mut k = vec![0.0; n * n];
            for i in 0..n {
                k[i * n + i] = 1.0;
                for j in 0..i {
                    let v = rbf(gamma, &x[i], &x[j]);
                    k[i * n + j] = v;
                    k[j * n + i] = v;
                }
            }
            KernelRows::Full(k)
        } else {
            KernelRows::Cached {
                x,
                gamma,
                rows: vec![None; n],
                order: VecDeque::new(),
            }
        }
    }

    fn row(&mut self, i: usize, n: usize) -> std::borrow::Cow<'_, [f64]> {
        match self {
            KernelRows::Full(k) => std::borrow::Cow::Borrowed(&k[i * n..(i + 1) * n]),
            KernelRows::Cached { x, gamma, rows, order } => {
                if rows[i].is_none() {
                    if order.len() >= ROW_CACHE_ROWS {
                        if let Some(old) = order.pop_front() {
                            rows[old] = None;
                        }
                    }
                    let r: Vec<f64> = x.iter().map(|xj| rbf(*gamma, &x[i], xj)).collect();
                    rows[i] = Some(std::rc::Rc::new(r));
                    order.push_back(i);
                }
                std::borrow::Cow::Owned(rows[i].as_ref().expect("just filled").as_ref().clone())
            }
        }
    }
}

/// Fits an RBF SVM. Rows are visited in a seed-determined order.
pub fn fit_svm_rbf(x: &[Vec<f64>], y: &[bool], params: &SvmParams) -> Result<(SvmModel, FitReport)> {
    if x.len() != y.len() {
        return Err(Error::DimensionMismatch {
            expected: x.len(),
            got: y.len(),
        });
    }
    if !y.iter().any(|&v| v) || y.iter().all(|&v| v) {
        return Err(Error::Classifier("SVM training needs both classes".into()));
    }
    if !(params.c > 0.0) {
        return Err(Error::InvalidArgument("C must be positive".into()));
    }
    let d = x[0].len();
    for row in x {
        if row.len() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                got: row.len(),
            });
        }
        if row.iter().any(|v| !v.is_finite()) {
            return Err(Error::Classifier("non-finite feature value".into()));
        }
    }
    let gamma = params.gamma.unwrap_or_else(|| scale_gamma(x));
    if !(gamma > 0.0) || !gamma.is_finite() {
        return Err(Error::InvalidArgument("gamma must be positive".into()));
    }

    let n = x.len();
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut ChaCha8Rng::seed_from_u64(params.seed));
    let xs: Vec<Vec<f64>> = perm.iter().map(|&i| x[i].clone()).collect();
    let ys: Vec<f64> = perm.iter().map(|&i| if y[i] { 1.0 } else { -1.0 }).collect();

    let c = params.c;
    let max_iter = params.max_iter.unwrap_or(10 * n).max(1);
    let mut kernel = KernelRows::new(&xs, gamma);
    let mut alpha = vec![0.0f64; n];
    let mut grad = vec![-1.0f64; n];

    let in_up = |a: f64, yy: f64| (yy > 0.0 && a < c) || (yy < 0.0 && a > 0.0);
    let in_low = |a: f64, yy: f64| (yy > 0.0 && a > 0.0) || (yy < 0.0 && a < c);

    let mut iterations = 0usize;
    let mut converged = false;
    let mut gap = f64::INFINITY;
    while iterations < max_iter {
        // i: maximal violating index in I_up.
        let mut gmax = f64::NEG_INFINITY;
        let mut i = usize::MAX;
        for t in 0..n {
            if in_up(alpha[t], ys[t]) {
                let v = -ys[t] * grad[t];
                if v > gmax {
                    gmax = v;
                    i = t;
                }
            }
        }
        let mut gmin = f64::INFINITY;
        for t in 0..n {
            if in_low(alpha[t], ys[t]) {
                gmin = gmin.min(-ys[t] * grad[t]);
            }
        }
        gap = gmax - gmin;
        if i == usize::MAX || gap < params.tol {
            converged = true;
            break;
        }
        let ki = kernel.row(i, n).into_owned();
        // j: second-order selection in I_low.
        let mut j = usize::MAX;
        let mut best = f64::INFINITY;
        for t in 0..n {
            if in_low(alpha[t], ys[t]) {
                let b = gmax + ys[t] * grad[t];
                if b > 0.0 {
                    let mut a = 2.0 - 2.0 * ki[t];
                    if a <= 0.0 {
                        a = TAU;
                    }
                    let score = -(b * b) / a;
                    if score < best {
                        best = score;
                        j = t;
                    }
                }
            }
        }
        if j == usize::MAX {
            converged = true;
            break;
        }
        let kj = kernel.row(j, n).into_owned();
        let (old_i, old_j) = (alpha[i], alpha[j]);
        let qij = ys[i] * ys[j] * ki[j];
        if ys[i] != ys[j] {
            let quad = (2.0 + 2.0 * qij).max(TAU);
            let delta = (-grad[i] - grad[j]) / quad;
            let diff = alpha[i] - alpha[j];
            alpha[i] += delta;
            alpha[j] += delta;
            if diff > 0.0 {
                if alpha[j] < 0.0 {
                    alpha[j] = 0.0;
                    alpha[i] = diff;
                }
            } else if alpha[i] < 0.0 {
                alpha[i] = 0.0;
                alpha[j] = -diff;
            }
            if diff > 0.0 {
                if alpha[i] > c {
                    alpha[i] = c;
                    alpha[j] = c - diff;
                }
            } else if alpha[j] > c {
                alpha[j] = c;
                alpha[i] = c + diff;
            }
        } else {
            let quad = (2.0 - 2.0 * qij).max(TAU);
            let delta = (grad[i] - grad[j]) / quad;
            let sum = alpha[i] + alpha[j];
            alpha[i] -= delta;
            alpha[j] += delta;
            if sum > c {
                if alpha[i] > c {
                    alpha[i] = c;
                    alpha[j] = sum - c;
                }
            } else if alpha[j] < 0.0 {
                alpha[j] = 0.0;
                alpha[i] = sum;
            }
            if sum > c {
                if alpha[j] > c {
                    alpha[j] = c;
                    alpha[i] = sum - c;
                }
            } else if alpha[i] < 0.0 {
                alpha[i] = 0.0;
                alpha[j] = sum;
            }
        }
        let (da_i, da_j) = (alpha[i] - old_i, alpha[j] - old_j);
        for t in 0..n {
            grad[t] += ys[t] * (ys[i] * ki[t] * da_i + ys[j] * kj[t] * da_j);
        }
        iterations += 1;
    }

    // Bias: average over free vectors, else midpoint of the feasible interval.
    let (mut ub, mut lb) = (f64::INFINITY, f64::NEG_INFINITY);
    let (mut free_sum, mut n_free) = (0.0f64, 0usize);
    for t in 0..n {
        let yg = ys[t] * grad[t];
        if alpha[t] >= c {
            if ys[t] < 0.0 {
                ub = ub.min(yg);
            } else {
                lb = lb.max(yg);
            }
        } else if alpha[t] <= 0.0 {
            if ys[t] > 0.0 {
                ub = ub.min(yg);
            } else {
                lb = lb.max(yg);
            }
        } else {
            free_sum += yg;
            n_free += 1;
        }
    }
    let rho = if n_free > 0 {
        free_sum / n_free as f64
    } else {
        (ub + lb) / 2.0
    };

    let mut support_vectors = Vec::new();
    let mut dual_coefs = Vec::new();
    let mut n_at_bound = 0;
    for t in 0..n {
        if alpha[t] > 0.0 {
            support_vectors.push(xs[t].clone());
            dual_coefs.push(alpha[t] * ys[t]);
            if alpha[t] >= c {
                n_at_bound += 1;
            }
        }
    }
    let sum_alpha_y = alpha.iter().zip(&ys).map(|(a, yy)| a * yy).sum();
    let report = FitReport {
        iterations,
        converged,
        kkt_gap: gap,
        n_support: support_vectors.len(),
        n_at_bound,
        sum_alpha_y,
    };
    Ok((
        SvmModel {
            support_vectors,
            dual_coefs,
            bias: -rho,
            gamma,
            c,
        },
        report,
    ))
}
