//! Deterministic synthetic multi-sequence volumes with exact lesion masks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nifti::{MaskVolume, Volume3D};
use crate::volume::Slice2D;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SynthError {
    #[error("invalid synthetic spec: {0}")]
    InvalidSpec(String),
}

pub type Result<T, E = SynthError> = std::result::Result<T, E>;

/// Mean intensity of every synthetic sequence before lesions and noise.
pub const BACKGROUND_LEVEL: f64 = 100.0;

/// Distinguishes the pretraining stream from case generation under one seed.
const PRETRAIN_STREAM: u64 = 0x0005_EED0_FDEA_015E;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub seed: u64,
    pub extents: [usize; 3],
    pub sequences: usize,
    /// Inclusive range of lesions per case.
    pub lesion_count: [usize; 2],
    /// Inclusive range of per-axis ellipsoid radii, in voxels.
    pub lesion_radius: [f64; 2],
    /// Intensity offset added inside lesions, one per sequence.
    pub contrast: Vec<f64>,
    pub noise_std: f64,
    /// Peak deviation of the smooth background field from its mean.
    pub background_amplitude: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            seed: 0,
            extents: [32, 32, 32],
            sequences: 4,
            lesion_count: [1, 3],
            lesion_radius: [2.5, 4.5],
            // T1 hypointense; T2, DWI and FLAIR hyperintense with DWI brightest.
            contrast: vec![-4.0, 6.0, 10.0, 8.0],
            noise_std: 1.0,
            background_amplitude: 2.0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(SynthError::InvalidSpec(m));
        if self.extents.contains(&0) {
            return bad(format!("extents {:?} must be positive", self.extents));
        }
        if self.sequences == 0 {
            return bad("at least one sequence is required".into());
        }
        if self.contrast.len() != self.sequences {
            return bad(format!("{} contrasts for {} sequences", self.contrast.len(), self.sequences));
        }
        if self.contrast.iter().any(|c| !c.is_finite()) {
            return bad("contrasts must be finite".into());
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return bad(format!("noise_std {} must be finite and non-negative", self.noise_std));
        }
        if !(self.background_amplitude >= 0.0 && self.background_amplitude.is_finite()) {
            return bad(format!("background_amplitude {} must be finite and non-negative", self.background_amplitude));
        }
        let [cmin, cmax] = self.lesion_count;
        if cmin > cmax {
            return bad(format!("lesion_count range {cmin}..={cmax} is empty"));
        }
        let [rmin, rmax] = self.lesion_radius;
        if !(rmin >= 1.0 && rmin <= rmax && rmax.is_finite()) {
            return bad(format!("lesion_radius range {rmin}..={rmax} needs 1 <= min <= max"));
        }
        let smallest = *self.extents.iter().min().expect("three extents") as f64;
        if cmax > 0 && 2.0 * rmax + 1.0 > smallest {
            return bad(format!("radius {rmax} does not fit inside extent {smallest}"));
        }
        Ok(())
    }

    pub fn voxel_count(&self) -> usize {
        self.extents.iter().product()
    }
}

/// Conventional file stem for sequence `i`.
pub fn sequence_name(i: usize) -> String {
    const NAMES: [&str; 4] = ["T1", "T2", "DWI", "FLAIR"];
    NAMES.get(i).map_or_else(|| format!("SEQ{i}"), |s| s.to_string())
}

/// Axis-aligned ellipsoid in voxel coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Lesion {
    pub center: [f64; 3],
    pub radii: [f64; 3],
}

impl Lesion {
    pub fn contains(&self, x: usize, y: usize, z: usize) -> bool {
        let p = [x as f64, y as f64, z as f64];
        (0..3).map(|a| ((p[a] - self.center[a]) / self.radii[a]).powi(2)).sum::<f64>() <= 1.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthCase {
    pub index: usize,
    /// One volume per sequence, in [`sequence_name`] order.
    pub sequences: Vec<Volume3D>,
    pub mask: MaskVolume,
    pub lesions: Vec<Lesion>,
}

fn stream_seed(seed: u64, index: usize) -> u64 {
    // splitmix64 finalizer over the pair keeps neighbouring indices decorrelated.
    let mut z = seed ^ (index as u64).wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Low-frequency field with values in [-1, 1]: mean of a few plane waves.
struct SmoothField {
    waves: Vec<([f64; 3], f64)>,
}

impl SmoothField {
    fn random(rng: &mut ChaCha8Rng, extents: &[usize]) -> Self {
        let waves = (0..3)
            .map(|_| {
                let mut k = [0.0; 3];
                for (a, &n) in extents.iter().enumerate() {
                    k[a] = rng.random_range(0..=2) as f64 * std::f64::consts::TAU / n as f64;
                }
                (k, rng.random_range(0.0..std::f64::consts::TAU))
            })
            .collect();
        SmoothField { waves }
    }

    fn at(&self, p: [f64; 3]) -> f64 {
        let s: f64 = self.waves.iter().map(|(k, phase)| (k[0] * p[0] + k[1] * p[1] + k[2] * p[2] + phase).cos()).sum();
        s / self.waves.len() as f64
    }
}

fn draw_lesion(rng: &mut ChaCha8Rng, spec: &SynthSpec, extents: [usize; 3]) -> Lesion {
    let [rmin, rmax] = spec.lesion_radius;
    let mut radii = [0.0; 3];
    let mut center = [0.0; 3];
    for a in 0..3 {
        radii[a] = if rmin == rmax { rmin } else { rng.random_range(rmin..=rmax) };
        let hi = extents[a] as f64 - 1.0 - radii[a];
        center[a] = if hi > radii[a] { rng.random_range(radii[a]..=hi) } else { radii[a] };
    }
    Lesion { center, radii }
}

/// Case `index` under `spec`; identical inputs give bit-identical output.
pub fn generate_case(spec: &SynthSpec, index: usize) -> Result<SynthCase> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(spec.seed, index));
    let [nx, ny, nz] = spec.extents;
    let [cmin, cmax] = spec.lesion_count;
    let count = rng.random_range(cmin..=cmax);
    let lesions: Vec<Lesion> = (0..count).map(|_| draw_lesion(&mut rng, spec, spec.extents)).collect();

    let mut labels = vec![0u8; spec.voxel_count()];
    for l in &lesions {
        // Only visit the bounding box of each ellipsoid.
        let lo = |a: usize| (l.center[a] - l.radii[a]).floor().max(0.0) as usize;
        let hi = |a: usize, n: usize| ((l.center[a] + l.radii[a]).ceil() as usize).min(n - 1);
        for z in lo(2)..=hi(2, nz) {
            for y in lo(1)..=hi(1, ny) {
                for x in lo(0)..=hi(0, nx) {
                    if l.contains(x, y, z) {
                        labels[(z * ny + y) * nx + x] = 1;
                    }
                }
            }
        }
    }

    let noise = Normal::new(0.0, spec.noise_std).expect("validated noise std");
    let mut sequences = Vec::with_capacity(spec.sequences);
    for s in 0..spec.sequences {
        let field = SmoothField::random(&mut rng, &spec.extents);
        let mut voxels = Vec::with_capacity(labels.len());
        for z in 0..nz {
            for y in 0..ny {
                for x in 0..nx {
                    let i = (z * ny + y) * nx + x;
                    let mut v = BACKGROUND_LEVEL + spec.background_amplitude * field.at([x as f64, y as f64, z as f64]);
                    if labels[i] == 1 {
                        v += spec.contrast[s];
                    }
                    if spec.noise_std > 0.0 {
                        v += noise.sample(&mut rng);
                    }
                    voxels.push(v as f32);
                }
            }
        }
        sequences.push(Volume3D::new(spec.extents, [1.0; 3], voxels).expect("length matches extents"));
    }
    let mask = MaskVolume::new(spec.extents, labels).expect("labels are binary");
    Ok(SynthCase { index, sequences, mask, lesions })
}

/// Number of training cases for `n` cases at `split_ratio`: `round(n·ratio)` clamped to 1..=n.
pub fn train_count(n: usize, split_ratio: f64) -> usize {
    ((n as f64 * split_ratio).round() as usize).clamp(1, n.max(1))
}

/// Cases `0..k` train and `k..n` validate, with `k` from [`train_count`].
pub fn generate_dataset(spec: &SynthSpec, n_cases: usize, split_ratio: f64) -> Result<(Vec<SynthCase>, Vec<SynthCase>)> {
    if n_cases == 0 {
        return Err(SynthError::InvalidSpec("n_cases must be at least 1".into()));
    }
    if !(split_ratio > 0.0 && split_ratio < 1.0) {
        return Err(SynthError::InvalidSpec(format!("split_ratio {split_ratio} must lie in (0, 1)")));
    }
    let k = train_count(n_cases, split_ratio);
    if k == n_cases {
        log::warn!("{n_cases} case(s) at ratio {split_ratio} leave no validation cases");
    }
    let mut cases = (0..n_cases).map(|i| generate_case(spec, i)).collect::<Result<Vec<_>>>()?;
    let val = cases.split_off(k);
    Ok((cases, val))
}

/// `n` (noisy, clean) 2D pairs for denoising pretraining.
///
/// Clean slices are smooth textures plus a few elliptical blobs whose per-channel
/// offset follows `spec.contrast` (scaled to unit range); noisy ones add
/// Gaussian noise with `spec.noise_std`. Planes are `extents[1] × extents[0]`.
pub fn generate_pretrain_corpus(spec: &SynthSpec, n: usize) -> Result<Vec<(Slice2D, Slice2D)>> {
    spec.validate()?;
    let (h, w) = (spec.extents[1], spec.extents[0]);
    let c = spec.sequences;
    let scale = spec.contrast.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-12);
    let noise = Normal::new(0.0, spec.noise_std).expect("validated noise std");
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(spec.seed ^ PRETRAIN_STREAM, i));
        let blobs: Vec<([f64; 2], [f64; 2])> = (0..rng.random_range(1..=3usize))
            .map(|_| {
                let r = [rng.random_range(1.5..(h as f64 / 4.0).max(2.0)), rng.random_range(1.5..(w as f64 / 4.0).max(2.0))];
                ([rng.random_range(0.0..h as f64), rng.random_range(0.0..w as f64)], r)
            })
            .collect();
        let mut clean = Vec::with_capacity(c * h * w);
        for ch in 0..c {
            let field = SmoothField::random(&mut rng, &[h, w, 1]);
            let offset = spec.contrast[ch] / scale;
            for r in 0..h {
                for col in 0..w {
                    let mut v = field.at([r as f64, col as f64, 0.0]);
                    let inside = blobs.iter().any(|(ctr, rad)| {
                        ((r as f64 - ctr[0]) / rad[0]).powi(2) + ((col as f64 - ctr[1]) / rad[1]).powi(2) <= 1.0
                    });
                    if inside {
                        v += offset;
                    }
                    clean.push(v as f32);
                }
            }
        }
        let noisy: Vec<f32> = if spec.noise_std > 0.0 {
            clean.iter().map(|&v| (v as f64 + noise.sample(&mut rng)) as f32).collect()
        } else {
            clean.clone()
        };
        let mk = |values| Slice2D { height: h, width: w, channels: c, values, source_index: i };
        out.push((mk(noisy), mk(clean)));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SynthSpec {
        SynthSpec { extents: [16, 14, 12], ..Default::default() }
    }

    #[test]
    fn deterministic_per_seed_and_index() {
        let a = generate_case(&small(), 3).unwrap();
        let b = generate_case(&small(), 3).unwrap();
        assert_eq!(a, b);
        let c = generate_case(&small(), 4).unwrap();
        assert_ne!(a.sequences[0].voxels(), c.sequences[0].voxels());
        let d = generate_case(&SynthSpec { seed: 1, ..small() }, 3).unwrap();
        assert_ne!(a.sequences[0].voxels(), d.sequences[0].voxels());
    }

    #[test]
    fn noiseless_lesions_outshine_background() {
        let spec = SynthSpec { noise_std: 0.0, contrast: vec![0.0, 0.0, 10.0, 0.0], ..small() };
        for idx in 0..5 {
            let case = generate_case(&spec, idx).unwrap();
            let dwi = case.sequences[2].voxels();
            let labels = case.mask.labels();
            let min_lesion = dwi.iter().zip(labels).filter(|(_, &l)| l == 1).map(|(v, _)| *v).fold(f32::INFINITY, f32::min);
            let max_bg = dwi.iter().zip(labels).filter(|(_, &l)| l == 0).map(|(v, _)| *v).fold(f32::NEG_INFINITY, f32::max);
            assert!(min_lesion > max_bg, "case {idx}: {min_lesion} <= {max_bg}");
        }
    }

    #[test]
    fn mask_matches_brute_force_ellipsoids() {
        let spec = small();
        for idx in 0..4 {
            let case = generate_case(&spec, idx).unwrap();
            let [nx, ny, nz] = spec.extents;
            let mut expected = 0usize;
            for z in 0..nz {
                for y in 0..ny {
                    for x in 0..nx {
                        let inside = case.lesions.iter().any(|l| {
                            let d = |p: usize, a: usize| (p as f64 - l.center[a]) / l.radii[a];
                            d(x, 0).powi(2) + d(y, 1).powi(2) + d(z, 2).powi(2) <= 1.0
                        });
                        assert_eq!(case.mask.get(x, y, z), u8::from(inside));
                        expected += usize::from(inside);
                    }
                }
            }
            assert_eq!(case.mask.lesion_count(), expected);
        }
    }

    #[test]
    fn single_sphere_voxel_count() {
        // Radius-1 ball centred on a voxel: the centre plus its 6 face neighbours.
        let spec = SynthSpec { extents: [5, 5, 5], lesion_count: [1, 1], lesion_radius: [1.0, 1.0], ..Default::default() };
        let case = generate_case(&spec, 0).unwrap();
        let l = case.lesions[0];
        let on_grid = l.center.iter().all(|c| c.fract() == 0.0);
        if on_grid {
            assert_eq!(case.mask.lesion_count(), 7);
        }
        assert!(case.mask.lesion_count() <= 8);
    }

    #[test]
    fn default_lesion_fraction_is_realistic() {
        let spec = SynthSpec::default();
        for idx in 0..20 {
            let case = generate_case(&spec, idx).unwrap();
            let frac = case.mask.lesion_count() as f64 / spec.voxel_count() as f64;
            assert!((0.001..=0.05).contains(&frac), "case {idx}: lesion fraction {frac}");
        }
    }

    #[test]
    fn dataset_split() {
        assert_eq!(train_count(20, 0.8), 16);
        assert_eq!(train_count(21, 0.8), 17);
        assert_eq!(train_count(1, 0.8), 1);
        let spec = SynthSpec { extents: [12, 12, 12], lesion_radius: [1.0, 2.0], ..Default::default() };
        let (train, val) = generate_dataset(&spec, 5, 0.8).unwrap();
        assert_eq!((train.len(), val.len()), (4, 1));
        assert_eq!(train.iter().map(|c| c.index).collect::<Vec<_>>(), vec![0, 1, 2, 3]);
        assert_eq!(val[0].index, 4);
        let (train, val) = generate_dataset(&spec, 1, 0.8).unwrap();
        assert_eq!((train.len(), val.len()), (1, 0));
        assert!(generate_dataset(&spec, 4, 1.0).is_err());
        assert!(generate_dataset(&spec, 0, 0.5).is_err());
    }

    #[test]
    fn invalid_specs() {
        for bad in [
            SynthSpec { noise_std: -1.0, ..small() },
            SynthSpec { lesion_radius: [0.5, 2.0], ..small() },
            SynthSpec { lesion_radius: [3.0, 2.0], ..small() },
            SynthSpec { lesion_radius: [2.0, 7.0], ..small() },
            SynthSpec { contrast: vec![1.0, f64::NAN, 1.0, 1.0], ..small() },
            SynthSpec { contrast: vec![1.0], ..small() },
            SynthSpec { lesion_count: [3, 1], ..small() },
            SynthSpec { extents: [0, 4, 4], ..small() },
        ] {
            assert!(matches!(generate_case(&bad, 0), Err(SynthError::InvalidSpec(_))), "{bad:?}");
        }
    }

    #[test]
    fn pretrain_corpus() {
        let spec = SynthSpec { extents: [16, 8, 8], lesion_radius: [1.0, 3.0], ..Default::default() };
        let corpus = generate_pretrain_corpus(&spec, 6).unwrap();
        assert_eq!(corpus.len(), 6);
        assert_eq!((corpus[0].0.height, corpus[0].0.width, corpus[0].0.channels), (8, 16, 4));
        assert_eq!(corpus, generate_pretrain_corpus(&spec, 6).unwrap());
        assert_ne!(corpus[0].0.values, corpus[0].1.values);

        let quiet = generate_pretrain_corpus(&SynthSpec { noise_std: 0.0, ..spec }, 3).unwrap();
        assert!(quiet.iter().all(|(noisy, clean)| noisy == clean));
    }
}
