//! Experiment machinery: stratified repeated splits, mini-batch SGD with
//! momentum, minimum-validation-loss checkpoint selection, hyperparameter
//! grid search on the validation Custom score and mean/std reporting.

mod config;
mod experiment;
mod manifest;
mod split;
mod train;

use std::path::{Path, PathBuf};
use std::sync::Arc;

use rayon::prelude::*;

use crate::detector::{DetectorError, FeatureVector, LogisticModel};
use crate::imaging::{decode_image, standardize, ImagingError, PlaneTensor};
use crate::metrics::MetricsError;

pub use config::{Backend, ExperimentConfig, GridConfig, GridMode};
pub use experiment::{
    evaluate, evaluate_detector, grid_search, rank_grid, repeated_evaluation, repeated_experiment,
    run_experiment, run_logistic_experiment, ExperimentReport, GridCell, GridSearch,
    RepeatedOutcome, RunReport,
};
pub use manifest::{
    read_binary_manifest, read_hier_manifest, write_binary_manifest, HierRecord, BINARY_HEADER,
    HIER_HEADER,
};
pub use split::{allocate, stratified_split, SplitResult, DEFAULT_RATIOS};
pub use train::{
    confusion, momentum_step, select_checkpoint, train, EpochRecord, HyperParams, TrainConfig,
    TrainingTrace, DEFAULT_BATCH_SIZE, DEFAULT_EPOCHS,
};

#[derive(Debug, thiserror::Error)]
pub enum ProtocolError {
    #[error("class `{0}` has no samples")]
    EmptyClass(bool),
    #[error("split ratios must be positive, got {0:?}")]
    InvalidRatios([u32; 3]),
    #[error("{0} set is empty")]
    EmptySet(&'static str),
    #[error("hyperparameter grid is empty")]
    EmptyGrid,
    #[error("loss diverged in epoch {epoch}")]
    DivergedLoss { epoch: usize },
    #[error("invalid hyperparameters lr={}, momentum={}", .0.lr, .0.momentum)]
    InvalidHyperParams(HyperParams),
    #[error("invalid experiment configuration: {0}")]
    InvalidConfig(String),
    #[error("grid cell lr={}, momentum={}: {source}", .hp.lr, .hp.momentum)]
    Grid {
        hp: HyperParams,
        #[source]
        source: Box<ProtocolError>,
    },
    #[error("run {run}: {source}")]
    Run {
        run: usize,
        #[source]
        source: Box<ProtocolError>,
    },
    #[error("sample `{id}`: {source}")]
    Sample {
        id: String,
        #[source]
        source: Box<ProtocolError>,
    },
    #[error("duplicate sample id `{0}`")]
    DuplicateId(String),
    #[error("manifest {path}: {message}")]
    Manifest { path: String, message: String },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error(transparent)]
    Detector(#[from] DetectorError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Imaging(#[from] ImagingError),
}

/// Anything carrying a binary ground-truth label.
pub trait Labeled {
    fn label(&self) -> bool;
}

#[derive(Debug, Clone)]
pub enum SampleSource {
    Path(PathBuf),
    Tensor(Arc<PlaneTensor>),
}

/// One image with its tier-specific binary label.
#[derive(Debug, Clone)]
pub struct LabeledSample {
    pub id: String,
    pub source: SampleSource,
    pub label: bool,
}

impl Labeled for LabeledSample {
    fn label(&self) -> bool {
        self.label
    }
}

/// Reads, decodes and standardizes an image file.
pub fn load_image_tensor(path: &Path, target_side: u32) -> Result<PlaneTensor, ProtocolError> {
    let bytes = std::fs::read(path).map_err(|source| ProtocolError::Io {
        path: path.display().to_string(),
        source,
    })?;
    Ok(standardize(&decode_image(&bytes)?, target_side)?)
}

impl LabeledSample {
    /// Standardized tensor at `target_side`. In-memory tensors must already
    /// have that size.
    pub fn load(&self, target_side: u32) -> Result<PlaneTensor, ProtocolError> {
        match &self.source {
            SampleSource::Path(p) => load_image_tensor(p, target_side),
            SampleSource::Tensor(t) => {
                let side = target_side as usize;
                if (t.channels(), t.height(), t.width()) != (3, side, side) {
                    return Err(ProtocolError::InvalidConfig(format!(
                        "in-memory tensor is {}x{}x{}, expected 3x{side}x{side}",
                        t.channels(),
                        t.height(),
                        t.width()
                    )));
                }
                Ok(t.as_ref().clone())
            }
        }
    }
}

/// Precomputed features of one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingExample {
    pub id: String,
    pub features: FeatureVector,
    pub label: bool,
}

impl Labeled for TrainingExample {
    fn label(&self) -> bool {
        self.label
    }
}

/// Binary ground truth paired with a fixed prediction.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub id: String,
    pub label: bool,
    pub predicted: bool,
}

impl Labeled for Prediction {
    fn label(&self) -> bool {
        self.label
    }
}

pub(crate) fn check_unique_ids<'a>(
    ids: impl IntoIterator<Item = &'a str>,
) -> Result<(), ProtocolError> {
    let mut seen = std::collections::HashSet::new();
    for id in ids {
        if !seen.insert(id) {
            return Err(ProtocolError::DuplicateId(id.to_string()));
        }
    }
    Ok(())
}

/// Features of every sample under `model`'s preprocessing, in input order.
pub fn featurize(
    samples: &[LabeledSample],
    model: &LogisticModel,
) -> Result<Vec<TrainingExample>, ProtocolError> {
    check_unique_ids(samples.iter().map(|s| s.id.as_str()))?;
    let side = model.preprocess.target_side;
    samples
        .par_iter()
        .map(|s| {
            let features = s
                .load(side)
                .and_then(|t| Ok(model.features(&t)?))
                .map_err(|e| ProtocolError::Sample {
                    id: s.id.clone(),
                    source: Box::new(e),
                })?;
            Ok(TrainingExample {
                id: s.id.clone(),
                features,
                label: s.label,
            })
        })
        .collect()
}
