// SPDX-License-Identifier: MIT OR Apache-2.0

//! Split → standardize → SMOTE-Tomek (train only) → SVM → report.

use std::collections::BTreeSet;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::gate::{raw_features, Gate};
use super::report::{classification_report, ClassReport};
use super::resample::{smote_oversample, tomek_filter_class};
use super::standardize::{apply_standardizer, fit_standardizer};
use super::svm::{fit_svm_rbf, FitReport, SvmParams};
use crate::error::{Error, Result};
use crate::oracle::{load_dataset, Sample};
use crate::patch::LayerPair;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelMode {
    /// The patched generation contains the gold answer.
    #[default]
    Correctness,
    /// Patching raised the gold answer's log-probability.
    LogprobDelta,
}

impl LabelMode {
    pub fn label(&self, s: &Sample) -> bool {
        match self {
            LabelMode::Correctness => s.is_correct_patched,
            LabelMode::LogprobDelta => s.logprob_delta > 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SplitOptions {
    pub test_fraction: f64,
    pub stratified: bool,
    pub seed: u64,
}

impl Default for SplitOptions {
    fn default() -> Self {
        Self {
            test_fraction: 0.2,
            stratified: true,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineOptions {
    pub svm: SvmParams,
    pub k_neighbors: usize,
    /// Target minority/majority ratio after SMOTE.
    pub balance_ratio: f64,
    pub label_mode: LabelMode,
    pub append_position_feature: bool,
    pub threshold: f64,
    pub resample_seed: u64,
}

impl Default for PipelineOptions {
    fn default() -> Self {
        Self {
            svm: SvmParams::default(),
            k_neighbors: 5,
            balance_ratio: 1.0,
            label_mode: LabelMode::Correctness,
            append_position_feature: false,
            threshold: 0.0,
            resample_seed: 0,
        }
    }
}

/// Which dataset rows fed which stage. Synthetic sources and Tomek removals
/// are dataset row indices, so disjointness from `test` is checkable.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResampleAudit {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
    pub minority_class: bool,
    pub n_synthetic: usize,
    pub synthetic_sources: BTreeSet<usize>,
    pub tomek_removed: Vec<usize>,
    pub n_fit_rows: usize,
}

impl ResampleAudit {
    /// No test row was used for resampling or fitting.
    pub fn test_untouched(&self) -> bool {
        let test: BTreeSet<usize> = self.test.iter().copied().collect();
        let train: BTreeSet<usize> = self.train.iter().copied().collect();
        test.is_disjoint(&train)
            && test.is_disjoint(&self.synthetic_sources)
            && self.tomek_removed.iter().all(|i| !test.contains(i))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineOutput {
    pub gate: Gate,
    pub report: ClassReport,
    pub fit: FitReport,
    pub audit: ResampleAudit,
}

/// Returns sorted `(train, test)` index sets. The test size is
/// `ceil(test_fraction · n)`; when stratified, each class contributes in
/// proportion (largest remainder) and keeps at least one training row.
pub fn stratified_split(y: &[bool], opts: &SplitOptions) -> Result<(Vec<usize>, Vec<usize>)> {
    let n = y.len();
    if !(opts.test_fraction > 0.0 && opts.test_fraction < 1.0) {
        return Err(Error::InvalidArgument("test_fraction must lie in (0, 1)".into()));
    }
    if n < 2 {
        return Err(Error::InvalidArgument("need at least two rows to split".into()));
    }
    let n_test = ((opts.test_fraction * n as f64).ceil() as usize).clamp(1, n - 1);
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut test = Vec::with_capacity(n_test);
    if opts.stratified {
        let groups: Vec<Vec<usize>> = [false, true]
            .iter()
            .map(|&c| (0..n).filter(|&i| y[i] == c).collect())
            .collect();
        let exact: Vec<f64> = groups.iter().map(|g| n_test as f64 * g.len() as f64 / n as f64).collect();
        let mut take: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
        let mut order = [0usize, 1];
        // Largest remainder first; ties go to the larger class.
        order.sort_by(|&a, &b| {
            (exact[b] - exact[b].floor())
                .total_cmp(&(exact[a] - exact[a].floor()))
                .then(groups[b].len().cmp(&groups[a].len()))
        });
        let mut left = n_test - take.iter().sum::<usize>();
        for &c in order.iter().cycle().take(4) {
            if left > 0 && take[c] < groups[c].len().saturating_sub(1) {
                take[c] += 1;
                left -= 1;
            }
        }
        for (c, g) in groups.into_iter().enumerate() {
            let mut g = g;
            g.shuffle(&mut rng);
            let k = take[c].min(g.len().saturating_sub(1));
            test.extend_from_slice(&g[..k]);
        }
    } else {
        let mut all: Vec<usize> = (0..n).collect();
        all.shuffle(&mut rng);
        test.extend_from_slice(&all[..n_test]);
    }
    test.sort_unstable();
    let in_test: BTreeSet<usize> = test.iter().copied().collect();
    let train = (0..n).filter(|i| !in_test.contains(i)).collect();
    Ok((train, test))
}

pub fn train_pipeline(dataset_path: &Path, layers: LayerPair, split: &SplitOptions, opts: &PipelineOptions) -> Result<PipelineOutput> {
    let samples = load_dataset(dataset_path)?;
    train_pipeline_on(&samples, layers, split, opts)
}

pub fn train_pipeline_on(samples: &[Sample], layers: LayerPair, split: &SplitOptions, opts: &PipelineOptions) -> Result<PipelineOutput> {
    if samples.is_empty() {
        return Err(Error::EmptyInput);
    }
    let x: Vec<Vec<f64>> = samples
        .iter()
        .map(|s| raw_features(&s.hidden_rep, s.position_source, opts.append_position_feature))
        .collect();
    let y: Vec<bool> = samples.iter().map(|s| opts.label_mode.label(s)).collect();
    if !y.iter().any(|&v| v) || y.iter().all(|&v| v) {
        return Err(Error::Classifier("dataset has a single label class; nothing to learn".into()));
    }
    let (train, test) = stratified_split(&y, split)?;
    let y_train: Vec<bool> = train.iter().map(|&i| y[i]).collect();
    if !y_train.iter().any(|&v| v) || y_train.iter().all(|&v| v) {
        return Err(Error::Classifier(
            "training split has a single class; choose another split seed".into(),
        ));
    }
    let raw_train: Vec<Vec<f64>> = train.iter().map(|&i| x[i].clone()).collect();
    let standardizer = fit_standardizer(&raw_train)?;
    let x_train = apply_standardizer(&standardizer, &raw_train)?;
    let x_test: Vec<Vec<f64>> = test.iter().map(|&i| standardizer.apply_row(&x[i])).collect::<Result<_>>()?;

    let n_pos = y_train.iter().filter(|&&v| v).count();
    let minority_class = n_pos * 2 < y_train.len();
    let minority_local: Vec<usize> = (0..train.len()).filter(|&j| y_train[j] == minority_class).collect();
    let n_min = minority_local.len();
    let n_maj = train.len() - n_min;
    let target = (opts.balance_ratio * n_maj as f64).ceil() as usize;
    let n_synthetic = target.saturating_sub(n_min);
    let minority_rows: Vec<Vec<f64>> = minority_local.iter().map(|&j| x_train[j].clone()).collect();
    let synthetic = smote_oversample(&minority_rows, opts.k_neighbors, n_synthetic, opts.resample_seed)?;
    let mut synthetic_sources = BTreeSet::new();
    let mut fit_x = x_train;
    let mut fit_y = y_train;
    for s in synthetic {
        synthetic_sources.insert(train[minority_local[s.base]]);
        synthetic_sources.insert(train[minority_local[s.neighbor]]);
        fit_x.push(s.values);
        fit_y.push(minority_class);
    }
    let removed_local = tomek_filter_class(&fit_x, &fit_y, !minority_class)?;
    let tomek_removed: Vec<usize> = removed_local.iter().map(|&j| train[j]).collect();
    let removed: BTreeSet<usize> = removed_local.into_iter().collect();
    let (fx, fy): (Vec<Vec<f64>>, Vec<bool>) = fit_x
        .into_iter()
        .zip(fit_y)
        .enumerate()
        .filter(|(j, _)| !removed.contains(j))
        .map(|(_, r)| r)
        .unzip();

    let (svm, fit) = fit_svm_rbf(&fx, &fy, &opts.svm)?;
    let gate = Gate {
        layers,
        standardizer,
        svm,
        append_position_feature: opts.append_position_feature,
        threshold: opts.threshold,
    };
    let y_test: Vec<bool> = test.iter().map(|&i| y[i]).collect();
    let y_pred: Vec<bool> = x_test
        .iter()
        .map(|r| Ok(gate.svm.decision_value(r)? > gate.threshold))
        .collect::<Result<_>>()?;
    let report = classification_report(&y_test, &y_pred)?;
    Ok(PipelineOutput {
        gate,
        report,
        fit,
        audit: ResampleAudit {
            train,
            test,
            minority_class,
            n_synthetic,
            synthetic_sources,
            tomek_removed,
            n_fit_rows: fx.len(),
        },
    })
}
