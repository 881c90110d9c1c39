use std::path::{Path, PathBuf};

use super::{create_dir, io_err, nifti_err, PipelineError, Result, RunConfig};
use crate::nifti::{read_mask, read_volume, write_mask, write_volume, DataType, MaskVolume, Volume3D};
use crate::synth::{generate_case, sequence_name, train_count};
use crate::volume::{normalize_volume, pad_plane, pad_to_multiple, slice_mask, slice_volume, Axis};

pub const MASK_FILE: &str = "GT.nii";

pub fn sequence_file(i: usize) -> String {
    format!("{}.nii", sequence_name(i))
}

pub(crate) fn synth_case_name(index: usize) -> String {
    format!("case_{index:03}")
}

/// One subject: co-registered sequences plus an optional ground-truth mask.
#[derive(Debug, Clone, PartialEq)]
pub struct Case {
    pub name: String,
    pub sequences: Vec<Volume3D>,
    pub mask: Option<MaskVolume>,
}

impl Case {
    pub fn extents(&self) -> [usize; 3] {
        self.sequences[0].extents()
    }
}

pub fn write_case(dir: &Path, sequences: &[Volume3D], mask: &MaskVolume) -> Result<()> {
    create_dir(dir)?;
    for (i, v) in sequences.iter().enumerate() {
        let path = dir.join(sequence_file(i));
        write_volume(&path, v, DataType::Float32).map_err(nifti_err(&path))?;
    }
    let path = dir.join(MASK_FILE);
    write_mask(&path, mask).map_err(nifti_err(&path))
}

fn is_case_dir(dir: &Path) -> bool {
    dir.join(sequence_file(0)).is_file()
}

/// Case directories under `root`, sorted by name; `root` itself if it is one.
pub fn case_dirs(root: &Path) -> Result<Vec<PathBuf>> {
    if !root.is_dir() {
        return Err(PipelineError::DataMissing(format!("{} is not a directory", root.display())));
    }
    if is_case_dir(root) {
        return Ok(vec![root.to_path_buf()]);
    }
    let mut dirs: Vec<PathBuf> = std::fs::read_dir(root)
        .map_err(io_err(root))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir() && is_case_dir(p))
        .collect();
    dirs.sort();
    if dirs.is_empty() {
        return Err(PipelineError::DataMissing(format!("no case directories with {} under {}", sequence_file(0), root.display())));
    }
    Ok(dirs)
}

fn dir_name(dir: &Path) -> String {
    dir.file_name().map_or_else(|| dir.display().to_string(), |n| n.to_string_lossy().into_owned())
}

/// Reads `sequences` volumes and, when present (or required), the mask.
pub fn load_case(dir: &Path, sequences: usize, require_mask: bool) -> Result<Case> {
    let mut vols = Vec::with_capacity(sequences);
    for i in 0..sequences {
        let path = dir.join(sequence_file(i));
        if !path.is_file() {
            return Err(PipelineError::DataMissing(format!("{} is missing", path.display())));
        }
        let v = read_volume(&path).map_err(nifti_err(&path))?;
        if let Some(first) = vols.first().map(Volume3D::extents) {
            if v.extents() != first {
                return Err(PipelineError::CaseMismatch(format!("{}: extents {:?} differ from {:?}", path.display(), v.extents(), first)));
            }
        }
        vols.push(v);
    }
    let mask_path = dir.join(MASK_FILE);
    let mask = if mask_path.is_file() {
        let m = read_mask(&mask_path).map_err(nifti_err(&mask_path))?;
        if m.extents() != vols[0].extents() {
            return Err(PipelineError::CaseMismatch(format!("{}: mask extents {:?} differ from {:?}", mask_path.display(), m.extents(), vols[0].extents())));
        }
        Some(m)
    } else if require_mask {
        return Err(PipelineError::DataMissing(format!("{} is missing", mask_path.display())));
    } else {
        None
    };
    Ok(Case { name: dir_name(dir), sequences: vols, mask })
}

/// Cases from `data_root`, or generated in memory from the synth spec.
pub fn load_cases(cfg: &RunConfig) -> Result<Vec<Case>> {
    match &cfg.data_root {
        Some(root) => case_dirs(root)?.iter().map(|d| load_case(d, cfg.model.in_channels, true)).collect(),
        None => (0..cfg.synth_cases)
            .map(|i| {
                let c = generate_case(&cfg.synth, i)?;
                Ok(Case { name: synth_case_name(i), sequences: c.sequences, mask: Some(c.mask) })
            })
            .collect(),
    }
}

/// (train, validation, test): the last `test_cases` are held out, the rest split by ratio.
pub fn split_cases(mut cases: Vec<Case>, split_ratio: f64, test_cases: usize) -> Result<(Vec<Case>, Vec<Case>, Vec<Case>)> {
    if test_cases >= cases.len() {
        return Err(PipelineError::DataMissing(format!("{} cases cannot hold out {test_cases} for testing", cases.len())));
    }
    let test = cases.split_off(cases.len() - test_cases);
    let k = train_count(cases.len(), split_ratio);
    let val = cases.split_off(k);
    if val.is_empty() {
        log::warn!("no validation cases; validation metrics will be absent");
    }
    Ok((cases, val, test))
}

/// Z-scored copies of a case's sequences.
pub fn normalized_sequences(case: &Case) -> Vec<Volume3D> {
    case.sequences.iter().map(normalize_volume).collect()
}

/// All slices of a set of cases along one axis, padded and flattened for batching.
#[derive(Debug, Clone, PartialEq)]
pub struct AxisDataset {
    pub channels: usize,
    /// Padded plane extents.
    pub height: usize,
    pub width: usize,
    /// `len · channels · height · width` values.
    pub inputs: Vec<f32>,
    /// `len · height · width` labels.
    pub labels: Vec<u8>,
    pub len: usize,
}

impl AxisDataset {
    pub fn sample_size(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn plane(&self) -> usize {
        self.height * self.width
    }

    /// (background, lesion) label counts.
    pub fn class_counts(&self) -> (usize, usize) {
        let lesion = self.labels.iter().filter(|&&l| l != 0).count();
        (self.labels.len() - lesion, lesion)
    }
}

/// Normalizes, slices and pads every case; all cases must share plane extents.
pub fn axis_dataset(cases: &[Case], axis: Axis, multiple: usize) -> Result<AxisDataset> {
    let mut ds = AxisDataset { channels: 0, height: 0, width: 0, inputs: Vec::new(), labels: Vec::new(), len: 0 };
    for case in cases {
        let mask = case.mask.as_ref().ok_or_else(|| PipelineError::DataMissing(format!("case {} has no {MASK_FILE}", case.name)))?;
        let slices = slice_volume(&normalized_sequences(case), axis)?;
        for (slice, plane) in slices.iter().zip(slice_mask(mask, axis)) {
            let (padded, _) = pad_to_multiple(slice, multiple)?;
            let labels = pad_plane(&plane, multiple)?;
            if ds.len == 0 {
                (ds.channels, ds.height, ds.width) = (padded.channels, padded.height, padded.width);
            } else if (padded.channels, padded.height, padded.width) != (ds.channels, ds.height, ds.width) {
                return Err(PipelineError::CaseMismatch(format!(
                    "case {} has {}x{} {} planes with {} channels; earlier cases have {}x{} with {}",
                    case.name, padded.height, padded.width, axis.plane_name(), padded.channels, ds.height, ds.width, ds.channels
                )));
            }
            ds.inputs.extend_from_slice(&padded.values);
            ds.labels.extend(labels.labels.iter().map(|&l| u8::from(l != 0)));
            ds.len += 1;
        }
    }
    Ok(ds)
}
