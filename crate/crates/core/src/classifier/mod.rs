// SPDX-License-Identifier: MIT OR Apache-2.0

//! The patch gate: standardization, SMOTE-Tomek rebalancing and an RBF SVM.

pub mod gate;
pub mod pipeline;
pub mod report;
pub mod resample;
pub mod standardize;
pub mod svm;

pub use gate::Gate;
pub use pipeline::{stratified_split, train_pipeline, train_pipeline_on, LabelMode, PipelineOptions, PipelineOutput, SplitOptions};
pub use report::{classification_report, ClassReport};
pub use resample::{smote_oversample, tomek_filter};
pub use standardize::{apply_standardizer, fit_standardizer, StandardizerParams};
pub use svm::{fit_svm_rbf, SvmModel, SvmParams};
