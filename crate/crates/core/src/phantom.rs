//! Deterministic two-class synthetic volumes with known discriminative
//! blobs.
//!
//! Every subject is a smoothed Gaussian random field, standardized to unit
//! variance inside an ellipsoidal brain mask, plus the binary lattice balls
//! of its class scaled by their amplitudes, plus i.i.d. Gaussian noise.
//! Amplitudes and noise are in units of the background standard deviation.

use std::collections::BTreeMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::derive_seed;
use crate::optim::{Dataset, OptimError, Subject, CLASS_NAMES};
use crate::volio::{self, AtlasVolume, BrainMask, BrainVolume, Grid, Region, VolumeError};

#[derive(Debug, Error)]
pub enum PhantomError {
    #[error("blob {index} (center {center:?}, radius {radius}) leaves the brain mask")]
    BlobOutsideMask { index: usize, center: [usize; 3], radius: f64 },
    #[error("blobs of class 0 and class 1 overlap")]
    OverlappingClassBlobs,
    #[error("invalid phantom configuration: {0}")]
    Invalid(String),
    #[error("dimension mismatch: {0}")]
    DimMismatch(String),
    #[error("heatmap mask is empty")]
    EmptyHeatmapMask,
    #[error("malformed manifest: {0}")]
    Manifest(String),
    #[error(transparent)]
    Volume(#[from] VolumeError),
    #[error(transparent)]
    Dataset(#[from] OptimError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = PhantomError> = std::result::Result<T, E>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlobSpec {
    pub class: usize,
    /// Voxel `(x, y, z)`.
    pub center: [usize; 3],
    pub radius: f64,
    /// Added intensity, in background standard deviations.
    pub amplitude: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhantomConfig {
    pub n_per_class: usize,
    /// `(nx, ny, nz)`.
    pub dims: [usize; 3],
    pub spacing_mm: f64,
    /// Semi-axes of the ellipsoidal brain mask, in voxels.
    pub mask_radii: [f64; 3],
    pub blobs: Vec<BlobSpec>,
    /// Gaussian blur sigma of the background field, in voxels.
    pub smoothness: f64,
    /// I.i.d. noise sigma, in background standard deviations.
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        Self {
            n_per_class: 40,
            dims: [60, 73, 60],
            spacing_mm: 3.0,
            mask_radii: [23.0, 28.0, 20.0],
            blobs: default_blobs(),
            smoothness: 2.0,
            noise_sigma: 1.0,
            seed: 0,
        }
    }
}

/// Six radius-4 blobs per class, stacked along z in two columns: the
/// dyslexic class in the left posterior quadrant, the typical class at the
/// mirrored positions in the right anterior quadrant. A 2D model that reads
/// axial slices as channels has a single spatial map, so columnar signal
/// keeps its relevance well defined along z.
pub fn default_blobs() -> Vec<BlobSpec> {
    let mut blobs = Vec::new();
    for (x, y, zs) in [(17, 33, [20, 29, 38]), (22, 18, [22, 30, 38])] {
        for z in zs {
            for (class, center) in [(1, [x, y, z]), (0, [59 - x, 72 - y, z])] {
                blobs.push(BlobSpec {
                    class,
                    center,
                    radius: 4.0,
                    amplitude: 3.0,
                });
            }
        }
    }
    blobs
}

impl PhantomConfig {
    pub fn grid(&self) -> Result<Grid> {
        let origin = self.dims.map(|d| -self.spacing_mm * (d as f64 - 1.0) / 2.0);
        Ok(Grid::isotropic(self.dims, self.spacing_mm, origin)?)
    }

    pub fn brain_mask(&self) -> Result<BrainMask> {
        let grid = self.grid()?;
        let c = self.dims.map(|d| (d as f64 - 1.0) / 2.0);
        let data = (0..grid.len())
            .map(|i| {
                let v = grid.coords(i);
                (0..3).map(|a| ((v[a] as f64 - c[a]) / self.mask_radii[a]).powi(2)).sum::<f64>() <= 1.0
            })
            .collect();
        Ok(BrainMask::new(grid, data)?)
    }

    fn validate(&self, mask: &BrainMask) -> Result<()> {
        if self.n_per_class == 0 {
            return Err(PhantomError::Invalid("n_per_class must be positive".into()));
        }
        if !(self.smoothness >= 0.0 && self.noise_sigma >= 0.0) {
            return Err(PhantomError::Invalid("smoothness and noise_sigma must be >= 0".into()));
        }
        for (index, b) in self.blobs.iter().enumerate() {
            if b.class > 1 || !(b.amplitude > 0.0) || !(b.radius >= 0.0) {
                return Err(PhantomError::Invalid(format!(
                    "blob {index}: class {} amplitude {} radius {}",
                    b.class, b.amplitude, b.radius
                )));
            }
            let offsets = ball_offsets(b.radius);
            let inside = offsets.iter().all(|o| match shift(self.dims, b.center, *o) {
                Some(i) => mask.contains(i),
                None => false,
            });
            if !inside {
                return Err(PhantomError::BlobOutsideMask {
                    index,
                    center: b.center,
                    radius: b.radius,
                });
            }
        }
        let truth = self.truth_masks()?;
        if truth[0].iter().zip(&truth[1]).any(|(a, b)| *a && *b) {
            return Err(PhantomError::OverlappingClassBlobs);
        }
        Ok(())
    }

    /// Per-class union of blob voxels.
    pub fn truth_masks(&self) -> Result<[Vec<bool>; 2]> {
        let n: usize = self.dims.iter().product();
        let mut out = [vec![false; n], vec![false; n]];
        for b in &self.blobs {
            for o in ball_offsets(b.radius) {
                if let Some(i) = shift(self.dims, b.center, o) {
                    out[b.class.min(1)][i] = true;
                }
            }
        }
        Ok(out)
    }

    /// Additive template of one class: the sum of its blobs' amplitudes.
    pub fn class_template(&self, class: usize) -> Vec<f32> {
        let n: usize = self.dims.iter().product();
        let mut t = vec![0.0f32; n];
        for b in self.blobs.iter().filter(|b| b.class == class) {
            for o in ball_offsets(b.radius) {
                if let Some(i) = shift(self.dims, b.center, o) {
                    t[i] += b.amplitude as f32;
                }
            }
        }
        t
    }
}

/// Integer offsets `o` with `|o| <= radius`, in scan order.
pub fn ball_offsets(radius: f64) -> Vec<[i64; 3]> {
    let r = radius.floor() as i64;
    let r2 = radius * radius;
    let mut out = Vec::new();
    for dz in -r..=r {
        for dy in -r..=r {
            for dx in -r..=r {
                if ((dx * dx + dy * dy + dz * dz) as f64) <= r2 {
                    out.push([dx, dy, dz]);
                }
            }
        }
    }
    out
}

fn shift(dims: [usize; 3], center: [usize; 3], o: [i64; 3]) -> Option<usize> {
    let mut v = [0usize; 3];
    for a in 0..3 {
        let c = center[a] as i64 + o[a];
        if c < 0 || c >= dims[a] as i64 {
            return None;
        }
        v[a] = c as usize;
    }
    Some(v[0] + dims[0] * (v[1] + dims[1] * v[2]))
}

/// Separable Gaussian blur with zero padding, kernel truncated at 3 sigma.
pub fn gaussian_blur(data: &[f64], dims: [usize; 3], sigma: f64) -> Vec<f64> {
    if sigma <= 0.0 {
        return data.to_vec();
    }
    let r = (3.0 * sigma).ceil() as i64;
    let kernel: Vec<f64> = (-r..=r).map(|d| (-(d * d) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let norm: f64 = kernel.iter().sum();
    let kernel: Vec<f64> = kernel.into_iter().map(|k| k / norm).collect();
    let strides = [1, dims[0], dims[0] * dims[1]];
    let mut cur = data.to_vec();
    for axis in 0..3 {
        let mut next = vec![0.0; cur.len()];
        let (n, s) = (dims[axis] as i64, strides[axis]);
        for (i, out) in next.iter_mut().enumerate() {
            let pos = ((i / s) % dims[axis]) as i64;
            let mut acc = 0.0;
            for (k, &w) in kernel.iter().enumerate() {
                let p = pos + k as i64 - r;
                if p >= 0 && p < n {
                    acc += w * cur[(i as i64 + (p - pos) * s as i64) as usize];
                }
            }
            *out = acc;
        }
        cur = next;
    }
    cur
}

/// Smoothed white noise standardized to zero mean and unit variance inside
/// the mask, zero outside.
pub fn background_field(cfg: &PhantomConfig, mask: &BrainMask, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = mask.data().len();
    let white: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
    let mut field = gaussian_blur(&white, cfg.dims, cfg.smoothness);
    let inside = mask.count() as f64;
    let mean = field.iter().zip(mask.data()).filter(|(_, &m)| m).map(|(v, _)| v).sum::<f64>() / inside;
    let var = field
        .iter()
        .zip(mask.data())
        .filter(|(_, &m)| m)
        .map(|(v, _)| (v - mean).powi(2))
        .sum::<f64>()
        / inside;
    let sd = var.sqrt().max(1e-12);
    for (v, &m) in field.iter_mut().zip(mask.data()) {
        *v = if m { (*v - mean) / sd } else { 0.0 };
    }
    field
}

/// One subject from explicit background and noise seeds.
pub fn render_subject(
    cfg: &PhantomConfig,
    mask: &BrainMask,
    label: usize,
    background_seed: u64,
    noise_seed: u64,
) -> BrainVolume {
    let field = background_field(cfg, mask, background_seed);
    let template = cfg.class_template(label);
    let mut rng = ChaCha8Rng::seed_from_u64(noise_seed);
    let data = field
        .iter()
        .zip(&template)
        .zip(mask.data())
        .map(|((&bg, &t), &m)| {
            let noise: f64 = if cfg.noise_sigma > 0.0 {
                let z: f64 = StandardNormal.sample(&mut rng);
                cfg.noise_sigma * z
            } else {
                0.0
            };
            if m {
                (bg + t as f64 + noise) as f32
            } else {
                0.0
            }
        })
        .collect();
    BrainVolume::new(mask.grid.clone(), data).expect("grid-sized data")
}

#[derive(Clone, Debug, PartialEq)]
pub struct PhantomTruth {
    /// Blob voxels of class 0 and class 1.
    pub class_masks: [Vec<bool>; 2],
    pub brain_mask: BrainMask,
}

pub fn subject_id(index: usize, total: usize) -> String {
    let width = total.to_string().len().max(2);
    format!("s{:0width$}", index + 1)
}

/// Subjects alternate labels: `s01` typical, `s02` dyslexic, and so on.
pub fn generate_phantom(cfg: &PhantomConfig) -> Result<(Dataset, PhantomTruth)> {
    let mask = cfg.brain_mask()?;
    cfg.validate(&mask)?;
    let total = 2 * cfg.n_per_class;
    let items = (0..total)
        .map(|i| {
            let label = i % 2;
            Subject {
                id: subject_id(i, total),
                label,
                volume: render_subject(
                    cfg,
                    &mask,
                    label,
                    derive_seed(cfg.seed, &[i as u64, 0]),
                    derive_seed(cfg.seed, &[i as u64, 1]),
                ),
                source: None,
            }
        })
        .collect();
    let truth = PhantomTruth {
        class_masks: cfg.truth_masks()?,
        brain_mask: mask.clone(),
    };
    Ok((Dataset::new(items, mask)?, truth))
}

/// Dilates a binary mask by a Euclidean ball of `radius` voxels.
pub fn dilate(mask: &[bool], dims: [usize; 3], radius: f64) -> Vec<bool> {
    let offsets = ball_offsets(radius);
    let mut out = vec![false; mask.len()];
    for (i, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
        let c = [i % dims[0], (i / dims[0]) % dims[1], i / (dims[0] * dims[1])];
        for &o in &offsets {
            if let Some(j) = shift(dims, c, o) {
                out[j] = true;
            }
        }
    }
    out
}

/// Fraction of `heatmap` voxels inside `truth` dilated by `dilation` voxels.
pub fn localization_score(heatmap: &[bool], truth: &[bool], dims: [usize; 3], dilation: f64) -> Result<f64> {
    let n: usize = dims.iter().product();
    if heatmap.len() != n || truth.len() != n {
        return Err(PhantomError::DimMismatch(format!(
            "heatmap {} and truth {} voxels for dims {dims:?}",
            heatmap.len(),
            truth.len()
        )));
    }
    let grown = dilate(truth, dims, dilation);
    let total = heatmap.iter().filter(|&&h| h).count();
    if total == 0 {
        return Err(PhantomError::EmptyHeatmapMask);
    }
    let hits = heatmap.iter().zip(&grown).filter(|(&h, &t)| h && t).count();
    Ok(hits as f64 / total as f64)
}

/// Coarse labelled atlas: hemisphere by x, three anterior-posterior bands by
/// y, and superior/inferior halves by z, restricted to the brain mask.
pub fn synthetic_atlas(mask: &BrainMask) -> AtlasVolume {
    let grid = mask.grid.clone();
    let [nx, ny, nz] = grid.dims;
    let bands = ["Posterior", "Middle", "Anterior"];
    let levels = ["Inferior", "Superior"];
    let mut table = BTreeMap::new();
    let mut label = 1u32;
    let mut ids = BTreeMap::new();
    for (h, hemi) in ["Left", "Right"].iter().enumerate() {
        for (b, band) in bands.iter().enumerate() {
            for (l, level) in levels.iter().enumerate() {
                table.insert(
                    label,
                    Region {
                        hemisphere: hemi.to_string(),
                        name: format!("{level} {band}"),
                    },
                );
                ids.insert((h, b, l), label);
                label += 1;
            }
        }
    }
    let labels = (0..grid.len())
        .map(|i| {
            if !mask.contains(i) {
                return 0;
            }
            let [x, y, z] = grid.coords(i);
            let h = usize::from(2 * x >= nx);
            let b = (3 * y / ny).min(2);
            let l = usize::from(2 * z >= nz);
            ids[&(h, b, l)]
        })
        .collect();
    AtlasVolume::new(grid, labels, table).expect("every label is in the table")
}

pub const MANIFEST: &str = "manifest.csv";
pub const MASK_FILE: &str = "mask.nii";
pub const ATLAS_FILE: &str = "atlas.nii";
pub const ATLAS_LABELS: &str = "atlas_labels.csv";
pub const CONFIG_FILE: &str = "phantom.toml";

pub fn truth_file(class: usize) -> String {
    format!("truth_{}.nii", CLASS_NAMES[class])
}

fn bool_volume(grid: &Grid, data: &[bool]) -> BrainVolume {
    BrainVolume::new(grid.clone(), data.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect()).expect("grid-sized data")
}

/// Writes subjects, mask, truth masks, atlas, manifest
/// (`subject_id,label,file`), and the generating configuration.
pub fn write_phantom(dir: &Path, cfg: &PhantomConfig, ds: &Dataset, truth: &PhantomTruth) -> Result<()> {
    std::fs::create_dir_all(dir.join("subjects"))?;
    let mut manifest = csv::Writer::from_writer(Vec::new());
    manifest
        .write_record(["subject_id", "label", "file"])
        .map_err(|e| PhantomError::Manifest(e.to_string()))?;
    for s in &ds.items {
        let file = format!("subjects/{}.nii", s.id);
        volio::save_nifti(&dir.join(&file), &s.volume)?;
        manifest
            .write_record([s.id.as_str(), &s.label.to_string(), &file])
            .map_err(|e| PhantomError::Manifest(e.to_string()))?;
    }
    let bytes = manifest.into_inner().map_err(|e| PhantomError::Manifest(e.to_string()))?;
    std::fs::write(dir.join(MANIFEST), bytes)?;
    volio::save_nifti(&dir.join(MASK_FILE), &ds.mask.to_volume())?;
    for class in 0..2 {
        volio::save_nifti(&dir.join(truth_file(class)), &bool_volume(&ds.mask.grid, &truth.class_masks[class]))?;
    }
    let atlas = synthetic_atlas(&ds.mask);
    volio::save_nifti(&dir.join(ATLAS_FILE), &atlas.to_volume())?;
    std::fs::write(dir.join(ATLAS_LABELS), volio::format_label_table(atlas.table()))?;
    std::fs::write(
        dir.join(CONFIG_FILE),
        toml::to_string(cfg).map_err(|e| PhantomError::Invalid(e.to_string()))?,
    )?;
    Ok(())
}

/// Reads a dataset directory: `manifest.csv` rows `subject_id,label,file`
/// (label `0`/`1` or `typical`/`dyslexic`) and the mask at `mask`.
pub fn load_dataset(dir: &Path, mask: &Path) -> Result<Dataset> {
    let mask = BrainMask::from_volume(&volio::load_nifti(mask)?)?;
    let mut reader = csv::Reader::from_path(dir.join(MANIFEST)).map_err(|e| PhantomError::Manifest(e.to_string()))?;
    let mut items = Vec::new();
    for (row, record) in reader.records().enumerate() {
        let record = record.map_err(|e| PhantomError::Manifest(e.to_string()))?;
        if record.len() != 3 {
            return Err(PhantomError::Manifest(format!("row {} has {} fields", row + 2, record.len())));
        }
        let label = match record[1].trim() {
            "0" | "typical" => 0,
            "1" | "dyslexic" => 1,
            other => return Err(PhantomError::Manifest(format!("row {}: label {other:?}", row + 2))),
        };
        items.push(Subject {
            id: record[0].trim().to_string(),
            label,
            volume: volio::load_nifti(&dir.join(record[2].trim()))?,
            source: None,
        });
    }
    Ok(Dataset::new(items, mask)?)
}

pub fn load_truth(dir: &Path) -> Result<[Vec<bool>; 2]> {
    let read = |class| -> Result<Vec<bool>> {
        let v = volio::load_nifti(&dir.join(truth_file(class)))?;
        Ok(v.data().iter().map(|&x| x != 0.0).collect())
    };
    Ok([read(0)?, read(1)?])
}
