//! End-to-end workflow: per-axis training, prediction, fusion and evaluation.

mod config;
mod data;
mod predict;
mod pretrain;
mod report;
mod train;

use std::io;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::autodiff::AutodiffError;
use crate::fusion::FusionError;
use crate::gradcheck::{run_gradcheck, GradcheckOptions, GradcheckReport};
use crate::loss::LossError;
use crate::metrics::MetricsError;
use crate::nifti::NiftiError;
use crate::resunet::ModelError;
use crate::synth::SynthError;
use crate::volume::VolumeError;

pub use config::{PretrainConfig, RunConfig};
pub use data::{
    axis_dataset, case_dirs, load_case, load_cases, normalized_sequences, sequence_file, split_cases, write_case, AxisDataset,
    Case, MASK_FILE,
};
pub use predict::{cmd_fuse, cmd_predict, predict_axis, predict_case, CasePrediction, PREDICTION_FILES};
pub use pretrain::{cmd_pretrain, PretrainSummary};
pub use report::{cmd_evaluate, evaluate_predictions, CaseScores, MetricsReport, Section};
pub use train::{cmd_train, evaluate_axis, initial_model, train_axis, AxisSummary, EpochRecord, TrainSummary};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("{path}: {source}")]
    Nifti { path: PathBuf, source: NiftiError },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("missing data: {0}")]
    DataMissing(String),
    #[error("case mismatch: {0}")]
    CaseMismatch(String),
    #[error("gradient check failed")]
    GradcheckFailed(Box<GradcheckReport>),
    #[error(transparent)]
    Volume(#[from] VolumeError),
    #[error(transparent)]
    Fusion(#[from] FusionError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error("serialization: {0}")]
    Serialize(String),
}

pub type Result<T, E = PipelineError> = std::result::Result<T, E>;

/// Process exit codes, one per error class.
pub mod exit_code {
    pub const OTHER: i32 = 1;
    pub const CONFIG: i32 = 2;
    pub const IO: i32 = 3;
    pub const NIFTI: i32 = 4;
    pub const WEIGHTS: i32 = 5;
    pub const GRADCHECK: i32 = 6;
    pub const DATA: i32 = 7;
}

impl PipelineError {
    pub fn exit_code(&self) -> i32 {
        use PipelineError as E;
        match self {
            E::Config(_) | E::Synth(_) | E::Loss(LossError::InvalidConfig(_)) | E::Model(ModelError::InvalidConfig(_)) => {
                exit_code::CONFIG
            }
            E::Io { .. } | E::Model(ModelError::Io(_)) | E::Nifti { source: NiftiError::Io(_), .. } => exit_code::IO,
            E::Nifti { .. } => exit_code::NIFTI,
            E::Model(ModelError::ConfigMismatch(_) | ModelError::CorruptWeights(_)) => exit_code::WEIGHTS,
            E::GradcheckFailed(_) => exit_code::GRADCHECK,
            E::DataMissing(_) | E::CaseMismatch(_) | E::Fusion(_) | E::Metrics(_) | E::Volume(_) => exit_code::DATA,
            E::Model(ModelError::ShapeMismatch(_)) => exit_code::DATA,
            E::Model(ModelError::Autodiff(_)) | E::Loss(LossError::Autodiff(_)) | E::Autodiff(_) | E::Serialize(_) => {
                exit_code::OTHER
            }
        }
    }
}

pub(crate) fn io_err(path: &Path) -> impl FnOnce(io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io { path: path.to_path_buf(), source }
}

pub(crate) fn nifti_err(path: &Path) -> impl FnOnce(NiftiError) -> PipelineError + '_ {
    move |source| PipelineError::Nifti { path: path.to_path_buf(), source }
}

pub(crate) fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(io_err(path))
}

pub(crate) fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    std::fs::write(path, contents).map_err(io_err(path))
}

pub(crate) fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| PipelineError::Serialize(e.to_string()))?;
    write_file(path, text + "\n")
}

/// Runs the finite-difference suite; a failing suite is an error carrying the report.
pub fn cmd_gradcheck(opts: &GradcheckOptions) -> Result<GradcheckReport> {
    let report = run_gradcheck(opts)?;
    if report.passed {
        Ok(report)
    } else {
        Err(PipelineError::GradcheckFailed(Box::new(report)))
    }
}

/// Writes `n_cases` synthetic cases under `out` plus a spec echo and the split.
pub fn cmd_synth(spec: &crate::synth::SynthSpec, n_cases: usize, split_ratio: f64, out: &Path) -> Result<Vec<PathBuf>> {
    let (train, val) = crate::synth::generate_dataset(spec, n_cases, split_ratio)?;
    create_dir(out)?;
    let mut dirs = Vec::with_capacity(n_cases);
    let mut split = serde_json::Map::new();
    for (name, cases) in [("train", &train), ("validation", &val)] {
        let mut names = Vec::new();
        for case in cases.iter() {
            let case_name = data::synth_case_name(case.index);
            let dir = out.join(&case_name);
            write_case(&dir, &case.sequences, &case.mask)?;
            dirs.push(dir);
            names.push(serde_json::Value::String(case_name));
        }
        split.insert(name.to_string(), serde_json::Value::Array(names));
    }
    let spec_text = toml::to_string(spec).map_err(|e| PipelineError::Serialize(e.to_string()))?;
    write_file(&out.join("synth_spec.toml"), format!("# cases = {n_cases}, split_ratio = {split_ratio}\n{spec_text}"))?;
    write_json(&out.join("split.json"), &split)?;
    Ok(dirs)
}
