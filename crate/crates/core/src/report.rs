//! Thresholded relevance masks, per-region voxel counts, and peak tables.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::explain::Heatmap3D;
use crate::volio::{voxel_to_world, AtlasVolume, BrainMask, BrainVolume, Grid};

#[derive(Debug, Error, PartialEq)]
pub enum ReportError {
    #[error("heatmap has no positive relevance inside the mask")]
    EmptyHeatmap,
    #[error("top fraction {0} outside (0, 1]")]
    InvalidFraction(f64),
    #[error("dimension mismatch: {0}")]
    DimMismatch(String),
}

pub type Result<T, E = ReportError> = std::result::Result<T, E>;

pub const DEFAULT_TOPQ: f64 = 0.05;
pub const UNLABELED: &str = "unlabeled";

/// Binary selection of voxels on a grid.
#[derive(Clone, Debug, PartialEq)]
pub struct ThresholdMask {
    pub grid: Grid,
    pub data: Vec<bool>,
    pub topq: f64,
}

impl ThresholdMask {
    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn to_volume(&self) -> BrainVolume {
        let data = self.data.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
        BrainVolume::new(self.grid.clone(), data).expect("grid-sized data")
    }
}

fn dims_match(a: [usize; 3], b: [usize; 3], what: &str) -> Result<()> {
    if a != b {
        return Err(ReportError::DimMismatch(format!("{what}: {a:?} vs {b:?}")));
    }
    Ok(())
}

/// Marks the `ceil(q * in-mask count)` in-mask voxels of highest relevance;
/// ties at the cut go to the lowest linear index.
pub fn threshold_heatmap(h: &Heatmap3D, mask: &BrainMask, q: f64) -> Result<ThresholdMask> {
    if !(q > 0.0 && q <= 1.0) {
        return Err(ReportError::InvalidFraction(q));
    }
    dims_match(h.dims(), mask.grid.dims, "heatmap and mask")?;
    let mut idx = mask.indices();
    if !idx.iter().any(|&i| h.data[i] > 0.0) {
        return Err(ReportError::EmptyHeatmap);
    }
    let keep = ((q * idx.len() as f64).ceil() as usize).min(idx.len());
    idx.sort_by(|&a, &b| h.data[b].total_cmp(&h.data[a]).then(a.cmp(&b)));
    let mut data = vec![false; h.data.len()];
    for &i in &idx[..keep] {
        data[i] = true;
    }
    Ok(ThresholdMask {
        grid: h.grid.clone(),
        data,
        topq: q,
    })
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RegionRow {
    pub hemisphere: String,
    pub region: String,
    pub voxels: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RegionReport {
    /// Nonzero counts, sorted by hemisphere then region name.
    pub rows: Vec<RegionRow>,
    pub unlabeled: usize,
    pub total: usize,
    pub topq: f64,
}

impl RegionReport {
    /// `hemisphere,region,voxels`; unlabeled voxels, if any, form a last row
    /// with an empty hemisphere.
    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["hemisphere", "region", "voxels"]).expect("in-memory write");
        for r in &self.rows {
            w.write_record([r.hemisphere.as_str(), &r.region, &r.voxels.to_string()])
                .expect("in-memory write");
        }
        if self.unlabeled > 0 {
            w.write_record(["", UNLABELED, &self.unlabeled.to_string()])
                .expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8 fields")
    }

    /// One `Left | Inferior Parietal | 55` line per row.
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        for r in &self.rows {
            s.push_str(&format!("{} | {} | {}\n", r.hemisphere, r.region, r.voxels));
        }
        if self.unlabeled > 0 {
            s.push_str(&format!("- | {UNLABELED} | {}\n", self.unlabeled));
        }
        s
    }
}

pub fn region_voxel_counts(mask: &ThresholdMask, atlas: &AtlasVolume) -> Result<RegionReport> {
    dims_match(mask.grid.dims, atlas.grid.dims, "mask and atlas")?;
    let mut counts: BTreeMap<(String, String), usize> = BTreeMap::new();
    let mut unlabeled = 0;
    let mut total = 0;
    for (i, _) in mask.data.iter().enumerate().filter(|(_, &m)| m) {
        total += 1;
        match atlas.region_at(i) {
            Some(r) => *counts.entry((r.hemisphere.clone(), r.name.clone())).or_default() += 1,
            None => unlabeled += 1,
        }
    }
    Ok(RegionReport {
        rows: counts
            .into_iter()
            .map(|((hemisphere, region), voxels)| RegionRow {
                hemisphere,
                region,
                voxels,
            })
            .collect(),
        unlabeled,
        total,
        topq: mask.topq,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct PeakRow {
    pub group: String,
    pub hemisphere: String,
    pub region: String,
    pub world_mm: [f64; 3],
    pub voxel: [usize; 3],
    pub relevance: f32,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PeakTable {
    pub rows: Vec<PeakRow>,
}

impl PeakTable {
    /// `group,hemisphere,region,x_mm,y_mm,z_mm` followed by the voxel index
    /// columns `i,j,k`.
    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["group", "hemisphere", "region", "x_mm", "y_mm", "z_mm", "i", "j", "k"])
            .expect("in-memory write");
        for r in &self.rows {
            let mut rec = vec![r.group.clone(), r.hemisphere.clone(), r.region.clone()];
            rec.extend(r.world_mm.iter().map(|c| format!("{c:.1}")));
            rec.extend(r.voxel.iter().map(usize::to_string));
            w.write_record(&rec).expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8 fields")
    }
}

pub const MIN_PEAK_SEPARATION: f64 = 2.0;

/// Up to `k` local maxima (relevance >= every 26-neighbour, strictly
/// positive), highest first, each at least [`MIN_PEAK_SEPARATION`] voxels
/// from every higher accepted peak.
pub fn peak_coordinates(h: &Heatmap3D, atlas: &AtlasVolume, k: usize, group: &str) -> Result<PeakTable> {
    dims_match(h.dims(), atlas.grid.dims, "heatmap and atlas")?;
    if !h.data.iter().any(|&v| v > 0.0) {
        return Err(ReportError::EmptyHeatmap);
    }
    let [nx, ny, nz] = h.dims();
    let mut candidates: Vec<usize> = (0..h.data.len())
        .filter(|&i| {
            let v = h.data[i];
            if v <= 0.0 {
                return false;
            }
            let [x, y, z] = h.grid.coords(i);
            for dz in -1i64..=1 {
                for dy in -1i64..=1 {
                    for dx in -1i64..=1 {
                        let (a, b, c) = (x as i64 + dx, y as i64 + dy, z as i64 + dz);
                        if (dx, dy, dz) == (0, 0, 0) || a < 0 || b < 0 || c < 0 {
                            continue;
                        }
                        let (a, b, c) = (a as usize, b as usize, c as usize);
                        if a < nx && b < ny && c < nz && h.data[a + nx * (b + ny * c)] > v {
                            return false;
                        }
                    }
                }
            }
            true
        })
        .collect();
    candidates.sort_by(|&a, &b| h.data[b].total_cmp(&h.data[a]).then(a.cmp(&b)));
    let mut chosen: Vec<[usize; 3]> = Vec::new();
    let mut rows = Vec::new();
    for i in candidates {
        if rows.len() == k {
            break;
        }
        let v = h.grid.coords(i);
        let far = chosen.iter().all(|c| {
            let d2: f64 = (0..3).map(|a| (v[a] as f64 - c[a] as f64).powi(2)).sum();
            d2 >= MIN_PEAK_SEPARATION * MIN_PEAK_SEPARATION
        });
        if !far {
            continue;
        }
        chosen.push(v);
        let (hemisphere, region) = match atlas.region_at(i) {
            Some(r) => (r.hemisphere.clone(), r.name.clone()),
            None => (String::new(), UNLABELED.to_string()),
        };
        rows.push(PeakRow {
            group: group.to_string(),
            hemisphere,
            region,
            world_mm: voxel_to_world(&h.grid.affine, [v[0] as f64, v[1] as f64, v[2] as f64]),
            voxel: v,
            relevance: h.data[i],
        });
    }
    Ok(PeakTable { rows })
}
