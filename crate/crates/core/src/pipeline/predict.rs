use std::path::{Path, PathBuf};

use super::data::{case_dirs, load_case, normalized_sequences, Case};
use super::{create_dir, nifti_err, PipelineError, Result};
use crate::autodiff::Tensor;
use crate::fusion::majority_vote;
use crate::nifti::{read_mask, write_mask, MaskVolume, Volume3D};
use crate::resunet::{load_weights, ResUNet, ResUNetConfig, WeightStore};
use crate::volume::{crop_plane, pad_to_multiple, slice_volume, stack_slices, Axis, LabelPlane};

/// File names written per case: one per axis, then the fused mask.
pub const PREDICTION_FILES: [&str; 4] = ["X.nii", "Y.nii", "Z.nii", "fused.nii"];

pub fn axis_file(axis: Axis) -> &'static str {
    PREDICTION_FILES[axis.index()]
}

const INFERENCE_BATCH: usize = 8;

/// Slices, segments and restacks one case along `axis`.
///
/// Each pixel takes the most probable class (the lowest class index on ties),
/// so in the two-class case lesion means probability strictly above 0.5.
pub fn predict_axis(model: &ResUNet<f32>, normalized: &[Volume3D], axis: Axis) -> Result<MaskVolume> {
    let extents = normalized.first().ok_or_else(|| PipelineError::DataMissing("case has no sequences".into()))?.extents();
    let slices = slice_volume(normalized, axis)?;
    let multiple = model.config().spatial_multiple();
    let classes = model.out_channels();
    let mut planes: Vec<LabelPlane> = Vec::with_capacity(slices.len());
    for chunk in slices.chunks(INFERENCE_BATCH) {
        let mut values = Vec::new();
        let mut shape = (0, 0, 0, (0, 0));
        for s in chunk {
            let (padded, original) = pad_to_multiple(s, multiple)?;
            shape = (padded.channels, padded.height, padded.width, original);
            values.extend_from_slice(&padded.values);
        }
        let (c, h, w, original) = shape;
        let x = Tensor::new(vec![chunk.len(), c, h, w], values)?;
        let probs = model.forward(&x)?;
        let p = probs.data();
        for s in 0..chunk.len() {
            let mut labels = vec![0u8; h * w];
            for (i, label) in labels.iter_mut().enumerate() {
                let mut best = 0;
                for k in 1..classes {
                    if p[(s * classes + k) * h * w + i] > p[(s * classes + best) * h * w + i] {
                        best = k;
                    }
                }
                *label = u8::from(best != 0);
            }
            planes.push(crop_plane(&LabelPlane { height: h, width: w, labels }, original)?);
        }
    }
    Ok(stack_slices(&planes, axis, extents)?.with_geometry_of(&normalized[0]))
}

#[derive(Debug, Clone, PartialEq)]
pub struct CasePrediction {
    pub per_axis: Vec<(Axis, MaskVolume)>,
    pub fused: MaskVolume,
}

pub fn predict_case(models: &[(Axis, ResUNet<f32>)], case: &Case) -> Result<CasePrediction> {
    let normalized = normalized_sequences(case);
    let mut per_axis = Vec::with_capacity(models.len());
    for (axis, model) in models {
        per_axis.push((*axis, predict_axis(model, &normalized, *axis)?));
    }
    let masks: Vec<MaskVolume> = per_axis.iter().map(|(_, m)| m.clone()).collect();
    let fused = majority_vote(&masks)?;
    Ok(CasePrediction { per_axis, fused })
}

fn load_model(path: &Path, config: Option<&ResUNetConfig>) -> Result<ResUNet<f32>> {
    Ok(match config {
        Some(cfg) => load_weights(path, cfg)?,
        None => {
            let store = WeightStore::<f32>::read(path)?;
            let cfg = store.config.clone();
            ResUNet::from_store(store, &cfg)?
        }
    })
}

/// Predicts every case under each of `cases` (case directories or roots of them).
///
/// Writes `<out>/<case>/{X,Y,Z}.nii` for each supplied axis plus `fused.nii`.
/// Without `config`, each weight file's own architecture echo is trusted.
pub fn cmd_predict(
    weights: &[(Axis, PathBuf)],
    config: Option<&ResUNetConfig>,
    cases: &[PathBuf],
    out: &Path,
) -> Result<Vec<PathBuf>> {
    if weights.is_empty() {
        return Err(PipelineError::Config("at least one weight file is required".into()));
    }
    let models = weights
        .iter()
        .map(|(axis, path)| Ok((*axis, load_model(path, config)?)))
        .collect::<Result<Vec<_>>>()?;
    let in_channels = models[0].1.config().in_channels;
    let mut written = Vec::new();
    let mut dirs = Vec::new();
    for c in cases {
        dirs.extend(case_dirs(c)?);
    }
    for dir in dirs {
        let case = load_case(&dir, in_channels, false)?;
        let pred = predict_case(&models, &case)?;
        let case_out = out.join(&case.name);
        create_dir(&case_out)?;
        for (axis, mask) in &pred.per_axis {
            let path = case_out.join(axis_file(*axis));
            write_mask(&path, mask).map_err(nifti_err(&path))?;
        }
        let path = case_out.join(PREDICTION_FILES[3]);
        write_mask(&path, &pred.fused).map_err(nifti_err(&path))?;
        log::info!("{}: {} lesion voxels after fusion", case.name, pred.fused.lesion_count());
        written.push(case_out);
    }
    Ok(written)
}

/// Majority vote over mask files, written to `out`.
pub fn cmd_fuse(masks: &[PathBuf], out: &Path) -> Result<MaskVolume> {
    let loaded = masks.iter().map(|p| read_mask(p).map_err(nifti_err(p))).collect::<Result<Vec<_>>>()?;
    let fused = majority_vote(&loaded)?;
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    write_mask(out, &fused).map_err(nifti_err(out))?;
    Ok(fused)
}
