//! Plane slicing, restacking, intensity normalization and padding.
//!
//! Plane layout per axis (rows × cols):
//!
//! | axis | plane       | rows | cols |
//! |------|-------------|------|------|
//! | X    | sagittal    | y    | z    |
//! | Y    | coronal     | x    | z    |
//! | Z    | axial       | y    | x    |

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nifti::{MaskVolume, Volume3D};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum VolumeError {
    #[error("volume extents differ: {0:?} vs {1:?}")]
    ExtentMismatch([usize; 3], [usize; 3]),
    #[error("no volumes supplied")]
    Empty,
    #[error("expected {expected} slices along axis {axis}, got {actual}")]
    CountMismatch { axis: Axis, expected: usize, actual: usize },
    #[error("slice {index} is {actual:?}, expected {expected:?}")]
    PlaneShapeMismatch { index: usize, expected: (usize, usize), actual: (usize, usize) },
    #[error("padding multiple must be at least 1")]
    ZeroMultiple,
    #[error("crop to {target:?} exceeds slice extents {actual:?}")]
    CropTooLarge { target: (usize, usize), actual: (usize, usize) },
}

/// Slicing axis; the name is the index held fixed within a slice.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Axis {
    /// Sagittal planes.
    X,
    /// Coronal (frontal) planes.
    Y,
    /// Axial planes.
    Z,
}

impl Axis {
    pub const ALL: [Axis; 3] = [Axis::X, Axis::Y, Axis::Z];

    pub fn index(self) -> usize {
        match self {
            Axis::X => 0,
            Axis::Y => 1,
            Axis::Z => 2,
        }
    }

    pub fn plane_name(self) -> &'static str {
        match self {
            Axis::X => "sagittal",
            Axis::Y => "coronal",
            Axis::Z => "axial",
        }
    }

    /// Volume axes mapped to (rows, cols) of a slice.
    fn plane_axes(self) -> (usize, usize) {
        match self {
            Axis::X => (1, 2),
            Axis::Y => (0, 2),
            Axis::Z => (1, 0),
        }
    }

    /// (rows, cols) of a slice taken from a volume with these extents.
    pub fn plane_extents(self, extents: [usize; 3]) -> (usize, usize) {
        let (r, c) = self.plane_axes();
        (extents[r], extents[c])
    }

    /// Linear voxel index for (slice, row, col).
    #[inline]
    fn voxel_index(self, extents: [usize; 3], slice: usize, row: usize, col: usize) -> usize {
        let mut pos = [0usize; 3];
        let (r, c) = self.plane_axes();
        pos[self.index()] = slice;
        pos[r] = row;
        pos[c] = col;
        pos[0] + extents[0] * (pos[1] + extents[1] * pos[2])
    }
}

impl fmt::Display for Axis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Axis::X => "X",
            Axis::Y => "Y",
            Axis::Z => "Z",
        })
    }
}

impl FromStr for Axis {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "x" | "sagittal" => Ok(Axis::X),
            "y" | "coronal" | "frontal" => Ok(Axis::Y),
            "z" | "axial" => Ok(Axis::Z),
            other => Err(format!("unknown axis {other:?}")),
        }
    }
}

/// A multi-channel 2D slice, channel-major then row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Slice2D {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub values: Vec<f32>,
    pub source_index: usize,
}

impl Slice2D {
    #[inline]
    pub fn get(&self, channel: usize, row: usize, col: usize) -> f32 {
        self.values[(channel * self.height + row) * self.width + col]
    }
}

/// A single-channel label plane.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelPlane {
    pub height: usize,
    pub width: usize,
    pub labels: Vec<u8>,
}

impl LabelPlane {
    #[inline]
    pub fn get(&self, row: usize, col: usize) -> u8 {
        self.labels[row * self.width + col]
    }
}

/// Cuts channel-stacked slices from co-registered volumes, ordered by position.
pub fn slice_volume(volumes: &[Volume3D], axis: Axis) -> Result<Vec<Slice2D>, VolumeError> {
    let first = volumes.first().ok_or(VolumeError::Empty)?;
    let extents = first.extents();
    if let Some(v) = volumes.iter().find(|v| v.extents() != extents) {
        return Err(VolumeError::ExtentMismatch(extents, v.extents()));
    }
    let (height, width) = axis.plane_extents(extents);
    let channels = volumes.len();
    let slices = (0..extents[axis.index()])
        .map(|s| {
            let mut values = Vec::with_capacity(channels * height * width);
            for volume in volumes {
                let voxels = volume.voxels();
                for row in 0..height {
                    for col in 0..width {
                        values.push(voxels[axis.voxel_index(extents, s, row, col)]);
                    }
                }
            }
            Slice2D { height, width, channels, values, source_index: s }
        })
        .collect();
    Ok(slices)
}

pub fn slice_mask(mask: &MaskVolume, axis: Axis) -> Vec<LabelPlane> {
    let extents = mask.extents();
    let (height, width) = axis.plane_extents(extents);
    let labels = mask.labels();
    (0..extents[axis.index()])
        .map(|s| {
            let mut plane = Vec::with_capacity(height * width);
            for row in 0..height {
                for col in 0..width {
                    plane.push(labels[axis.voxel_index(extents, s, row, col)]);
                }
            }
            LabelPlane { height, width, labels: plane }
        })
        .collect()
}

/// Inverse of [`slice_mask`]: places plane `i` back at position `i` along `axis`.
pub fn stack_slices(
    planes: &[LabelPlane],
    axis: Axis,
    extents: [usize; 3],
) -> Result<MaskVolume, VolumeError> {
    let expected = extents[axis.index()];
    if planes.len() != expected {
        return Err(VolumeError::CountMismatch { axis, expected, actual: planes.len() });
    }
    let shape = axis.plane_extents(extents);
    let mut labels = vec![0u8; extents.iter().product()];
    for (s, plane) in planes.iter().enumerate() {
        if (plane.height, plane.width) != shape || plane.labels.len() != shape.0 * shape.1 {
            return Err(VolumeError::PlaneShapeMismatch {
                index: s,
                expected: shape,
                actual: (plane.height, plane.width),
            });
        }
        for row in 0..shape.0 {
            for col in 0..shape.1 {
                labels[axis.voxel_index(extents, s, row, col)] = u8::from(plane.get(row, col) != 0);
            }
        }
    }
    Ok(MaskVolume::new(extents, labels).expect("labels are binary and sized to extents"))
}

/// Z-scores the nonzero voxels (population statistics); zeros stay zero.
///
/// A constant nonzero set has no spread and is only centred.
pub fn normalize_volume(volume: &Volume3D) -> Volume3D {
    let (mut n, mut sum) = (0usize, 0f64);
    for &v in volume.voxels().iter().filter(|&&v| v != 0.0) {
        n += 1;
        sum += f64::from(v);
    }
    if n == 0 {
        return volume.clone();
    }
    let mean = sum / n as f64;
    let var = volume
        .voxels()
        .iter()
        .filter(|&&v| v != 0.0)
        .map(|&v| (f64::from(v) - mean).powi(2))
        .sum::<f64>()
        / n as f64;
    let std = var.sqrt();
    let scale = if std > 0.0 { 1.0 / std } else { 1.0 };
    let voxels = volume
        .voxels()
        .iter()
        .map(|&v| if v == 0.0 { 0.0 } else { ((f64::from(v) - mean) * scale) as f32 })
        .collect();
    volume.with_voxels(voxels).expect("normalization keeps values finite")
}

/// Zero-pads on the bottom/right so both extents are multiples of `multiple`.
pub fn pad_to_multiple(
    slice: &Slice2D,
    multiple: usize,
) -> Result<(Slice2D, (usize, usize)), VolumeError> {
    if multiple == 0 {
        return Err(VolumeError::ZeroMultiple);
    }
    let original = (slice.height, slice.width);
    let height = slice.height.div_ceil(multiple) * multiple;
    let width = slice.width.div_ceil(multiple) * multiple;
    if (height, width) == original {
        return Ok((slice.clone(), original));
    }
    let mut values = vec![0f32; slice.channels * height * width];
    for c in 0..slice.channels {
        for row in 0..slice.height {
            let src = (c * slice.height + row) * slice.width;
            let dst = (c * height + row) * width;
            values[dst..dst + slice.width].copy_from_slice(&slice.values[src..src + slice.width]);
        }
    }
    let padded = Slice2D { height, width, channels: slice.channels, values, source_index: slice.source_index };
    Ok((padded, original))
}

pub fn pad_plane(plane: &LabelPlane, multiple: usize) -> Result<LabelPlane, VolumeError> {
    if multiple == 0 {
        return Err(VolumeError::ZeroMultiple);
    }
    let height = plane.height.div_ceil(multiple) * multiple;
    let width = plane.width.div_ceil(multiple) * multiple;
    let mut labels = vec![0u8; height * width];
    for row in 0..plane.height {
        labels[row * width..row * width + plane.width]
            .copy_from_slice(&plane.labels[row * plane.width..(row + 1) * plane.width]);
    }
    Ok(LabelPlane { height, width, labels })
}

/// Keeps the top-left `original` region of a (padded) label plane.
pub fn crop_plane(plane: &LabelPlane, original: (usize, usize)) -> Result<LabelPlane, VolumeError> {
    let (height, width) = original;
    if height > plane.height || width > plane.width {
        return Err(VolumeError::CropTooLarge { target: original, actual: (plane.height, plane.width) });
    }
    let mut labels = Vec::with_capacity(height * width);
    for row in 0..height {
        labels.extend_from_slice(&plane.labels[row * plane.width..row * plane.width + width]);
    }
    Ok(LabelPlane { height, width, labels })
}

pub fn crop_slice(slice: &Slice2D, original: (usize, usize)) -> Result<Slice2D, VolumeError> {
    let (height, width) = original;
    if height > slice.height || width > slice.width {
        return Err(VolumeError::CropTooLarge { target: original, actual: (slice.height, slice.width) });
    }
    let mut values = Vec::with_capacity(slice.channels * height * width);
    for c in 0..slice.channels {
        for row in 0..height {
            let start = (c * slice.height + row) * slice.width;
            values.extend_from_slice(&slice.values[start..start + width]);
        }
    }
    Ok(Slice2D { height, width, channels: slice.channels, values, source_index: slice.source_index })
}
