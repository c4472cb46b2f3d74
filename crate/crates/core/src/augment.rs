//! In-mask intensity augmentations: additive Gaussian voxel noise and a
//! global Gaussian offset. Magnitudes are relative to the in-mask standard
//! deviation of each volume.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::derive_seed;
use crate::optim::{Split, SplitKind, Subject};
use crate::volio::{BrainMask, BrainVolume};

#[derive(Debug, Error, PartialEq)]
pub enum AugmentError {
    #[error("augmentation refused on the {0:?} split")]
    AppliedToEvalSplit(SplitKind),
    #[error("volume dims {volume:?} do not match mask dims {mask:?}")]
    DimMismatch { volume: [usize; 3], mask: [usize; 3] },
    #[error("invalid augmentation setting: {0}")]
    Invalid(String),
}

pub type Result<T, E = AugmentError> = std::result::Result<T, E>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    pub noise_sigma_rel: f64,
    pub offset_sigma_rel: f64,
    #[serde(alias = "copies")]
    pub copies_per_subject: usize,
    pub seed: u64,
    /// Apply noise and offset to every copy instead of alternating them.
    pub compose: bool,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            noise_sigma_rel: 0.05,
            offset_sigma_rel: 0.10,
            copies_per_subject: 4,
            seed: 0,
            compose: false,
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("noise_sigma_rel", self.noise_sigma_rel), ("offset_sigma_rel", self.offset_sigma_rel)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(AugmentError::Invalid(format!("{name} = {v} must be a finite value >= 0")));
            }
        }
        Ok(())
    }
}

fn check(v: &BrainVolume, mask: &BrainMask) -> Result<()> {
    if v.dims() != mask.grid.dims {
        return Err(AugmentError::DimMismatch {
            volume: v.dims(),
            mask: mask.grid.dims,
        });
    }
    Ok(())
}

/// Population standard deviation of the in-mask voxels.
pub fn in_mask_std(v: &BrainVolume, mask: &BrainMask) -> f64 {
    let vals = || v.data().iter().zip(mask.data()).filter(|(_, &m)| m).map(|(&x, _)| x as f64);
    let n = mask.count() as f64;
    let mean = vals().sum::<f64>() / n;
    (vals().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt()
}

/// Adds i.i.d. `N(0, (sigma_rel * std)^2)` noise to every in-mask voxel.
pub fn gaussian_noise(v: &BrainVolume, mask: &BrainMask, sigma_rel: f64, seed: u64) -> Result<BrainVolume> {
    check(v, mask)?;
    let sigma = sigma_rel * in_mask_std(v, mask);
    let mut out = v.clone();
    if sigma == 0.0 {
        return Ok(out);
    }
    let normal = Normal::new(0.0, sigma).map_err(|e| AugmentError::Invalid(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (x, &m) in out.data_mut().iter_mut().zip(mask.data()) {
        if m {
            *x = (*x as f64 + normal.sample(&mut rng)) as f32;
        }
    }
    Ok(out)
}

/// Draws one `c ~ N(0, (sigma_rel * std)^2)` and adds it to every in-mask
/// voxel. Returns the shifted volume and `c`.
pub fn gaussian_offset(v: &BrainVolume, mask: &BrainMask, sigma_rel: f64, seed: u64) -> Result<(BrainVolume, f64)> {
    check(v, mask)?;
    let sigma = sigma_rel * in_mask_std(v, mask);
    let mut out = v.clone();
    if sigma == 0.0 {
        return Ok((out, 0.0));
    }
    let normal = Normal::new(0.0, sigma).map_err(|e| AugmentError::Invalid(e.to_string()))?;
    let c = normal.sample(&mut ChaCha8Rng::seed_from_u64(seed));
    for (x, &m) in out.data_mut().iter_mut().zip(mask.data()) {
        if m {
            *x = (*x as f64 + c) as f32;
        }
    }
    Ok((out, c))
}

/// Appends `copies_per_subject` augmented variants of every original train
/// item. Variant ids are `{source}_aug{k}` and carry the source's label and
/// lineage.
pub fn augment_dataset(train: &Split, mask: &BrainMask, cfg: &AugmentConfig) -> Result<Split> {
    if train.kind != SplitKind::Train {
        return Err(AugmentError::AppliedToEvalSplit(train.kind));
    }
    cfg.validate()?;
    let mut items = train.items.clone();
    for (i, s) in train.items.iter().enumerate() {
        if s.source.is_some() {
            continue;
        }
        for k in 0..cfg.copies_per_subject {
            let seed = derive_seed(cfg.seed, &[i as u64, k as u64]);
            let noisy = cfg.compose || k % 2 == 0;
            let shifted = cfg.compose || k % 2 == 1;
            let mut v = s.volume.clone();
            if noisy {
                v = gaussian_noise(&v, mask, cfg.noise_sigma_rel, derive_seed(seed, &[0]))?;
            }
            if shifted {
                v = gaussian_offset(&v, mask, cfg.offset_sigma_rel, derive_seed(seed, &[1]))?.0;
            }
            items.push(Subject {
                id: format!("{}_aug{}", s.id, k + 1),
                label: s.label,
                volume: v,
                source: Some(s.id.clone()),
            });
        }
    }
    Ok(Split {
        kind: SplitKind::Train,
        items,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volio::Grid;

    fn setup() -> (BrainVolume, BrainMask) {
        let g = Grid::isotropic([8, 8, 8], 1.0, [0.0; 3]).unwrap();
        let data = (0..512).map(|i| ((i * 37 % 101) as f32) * 0.1).collect();
        let v = BrainVolume::new(g.clone(), data).unwrap();
        let mask = BrainMask::new(g, (0..512).map(|i| i % 3 != 0).collect()).unwrap();
        (v, mask)
    }

    #[test]
    fn zero_sigma_is_identity() {
        let (v, m) = setup();
        assert_eq!(gaussian_noise(&v, &m, 0.0, 1).unwrap(), v);
        assert_eq!(gaussian_offset(&v, &m, 0.0, 1).unwrap().0, v);
    }

    #[test]
    fn outside_mask_untouched() {
        let (v, m) = setup();
        let out = gaussian_noise(&v, &m, 0.5, 9).unwrap();
        for i in 0..512 {
            if !m.contains(i) {
                assert_eq!(out.data()[i].to_bits(), v.data()[i].to_bits());
            }
        }
    }

    #[test]
    fn offset_shifts_in_mask_values_by_c() {
        let (v, m) = setup();
        let (out, c) = gaussian_offset(&v, &m, 0.3, 4).unwrap();
        assert!(c != 0.0);
        for i in m.indices() {
            assert!((out.data()[i] as f64 - v.data()[i] as f64 - c).abs() < 1e-5);
        }
        assert!((in_mask_std(&out, &m) - in_mask_std(&v, &m)).abs() < 1e-4);
    }

    #[test]
    fn refuses_eval_split() {
        let (_, m) = setup();
        let val = Split {
            kind: SplitKind::Validation,
            items: vec![],
        };
        assert_eq!(
            augment_dataset(&val, &m, &AugmentConfig::default()),
            Err(AugmentError::AppliedToEvalSplit(SplitKind::Validation))
        );
    }

    #[test]
    fn copies_multiply_items_and_keep_lineage() {
        let (v, m) = setup();
        let train = Split {
            kind: SplitKind::Train,
            items: (0..3)
                .map(|i| Subject {
                    id: format!("s{i}"),
                    label: i % 2,
                    volume: v.clone(),
                    source: None,
                })
                .collect(),
        };
        let cfg = AugmentConfig {
            copies_per_subject: 2,
            ..Default::default()
        };
        let out = augment_dataset(&train, &m, &cfg).unwrap();
        assert_eq!(out.items.len(), 9);
        for s in &out.items[3..] {
            let src = s.source.as_ref().unwrap();
            let orig = train.items.iter().find(|o| &o.id == src).unwrap();
            assert_eq!(s.label, orig.label);
        }
        let none = AugmentConfig {
            copies_per_subject: 0,
            ..Default::default()
        };
        assert_eq!(augment_dataset(&train, &m, &none).unwrap(), train);
    }
}
