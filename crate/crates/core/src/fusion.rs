//! Per-voxel majority voting across per-plane predictions.

use thiserror::Error;

use crate::nifti::MaskVolume;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum FusionError {
    #[error("cannot vote over an empty ensemble")]
    EmptyEnsemble,
    #[error("mask extents differ: {0:?} vs {1:?}")]
    ExtentMismatch([usize; 3], [usize; 3]),
}

/// Lesion votes per voxel.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VoteTally {
    pub extents: [usize; 3],
    pub voters: usize,
    pub counts: Vec<u32>,
}

impl VoteTally {
    /// Label 1 where lesion votes are a strict majority; ties go to background.
    pub fn majority(&self) -> Vec<u8> {
        self.counts.iter().map(|&c| u8::from(2 * c as usize > self.voters)).collect()
    }
}

pub fn vote_tally(masks: &[MaskVolume]) -> Result<VoteTally, FusionError> {
    let first = masks.first().ok_or(FusionError::EmptyEnsemble)?;
    let extents = first.extents();
    let mut counts = vec![0u32; first.len()];
    for m in masks {
        if m.extents() != extents {
            return Err(FusionError::ExtentMismatch(extents, m.extents()));
        }
        for (c, &l) in counts.iter_mut().zip(m.labels()) {
            *c += u32::from(l != 0);
        }
    }
    Ok(VoteTally { extents, voters: masks.len(), counts })
}

/// Fuses `k` binary masks; geometry is taken from the first mask.
pub fn majority_vote(masks: &[MaskVolume]) -> Result<MaskVolume, FusionError> {
    let tally = vote_tally(masks)?;
    let first = &masks[0];
    let mut fused = MaskVolume::with_spacing(tally.extents, first.spacing(), tally.majority())
        .expect("majority labels are binary");
    fused.orientation = first.orientation;
    Ok(fused)
}
