mod common;

use std::collections::BTreeMap;

use common::brute_force_tally;
use neurocam::explain::{Heatmap3D, SourceMode};
use neurocam::report::{region_voxel_counts, threshold_heatmap, ThresholdMask};
use neurocam::volio::{read_nifti, write_nifti_as, AtlasVolume, BrainMask, BrainVolume, Datatype, Grid, Region};
use proptest::prelude::*;

fn grid_strategy() -> impl Strategy<Value = Grid> {
    (
        [1usize..7, 1usize..7, 1usize..7],
        [0.5f32..4.0, 0.5f32..4.0, 0.5f32..4.0],
        [-100.0f32..100.0, -100.0f32..100.0, -100.0f32..100.0],
        -0.3f32..0.3,
    )
        .prop_map(|(dims, sp, origin, shear)| {
            let sp = sp.map(|s| s as f64);
            let affine = [
                [sp[0], shear as f64, 0.0, origin[0] as f64],
                [0.0, sp[1], 0.0, origin[1] as f64],
                [0.0, 0.0, sp[2], origin[2] as f64],
                [0.0, 0.0, 0.0, 1.0],
            ];
            Grid::new(dims, sp, affine).unwrap()
        })
}

fn value_for(datatype: Datatype, raw: f64) -> f32 {
    match datatype {
        Datatype::Uint8 => (raw.abs() * 255.0).floor() as f32,
        Datatype::Int16 => (raw * 32767.0).round() as f32,
        Datatype::Float32 | Datatype::Float64 => (raw * 1e3) as f32,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn nifti_round_trip_every_datatype(grid in grid_strategy(), seed in any::<u64>()) {
        let mut r = common::rng(seed);
        let raw: Vec<f64> = (0..grid.len()).map(|_| rand::Rng::random_range(&mut r, -1.0..1.0)).collect();
        for datatype in Datatype::ALL {
            let data: Vec<f32> = raw.iter().map(|&v| value_for(datatype, v)).collect();
            let v = BrainVolume::new(grid.clone(), data).unwrap();
            let back = read_nifti(&write_nifti_as(&v, datatype).unwrap()).unwrap();
            prop_assert_eq!(&back.grid, &v.grid);
            let same_bits = back.data().iter().zip(v.data()).all(|(a, b)| a.to_bits() == b.to_bits());
            prop_assert!(same_bits, "{datatype:?} data changed");
        }
    }

    #[test]
    fn region_counts_match_brute_force(
        dims in [1usize..8, 1usize..8, 1usize..8],
        seed in any::<u64>(),
        n_labels in 1u32..6,
        p_select in 0.0f64..1.0,
    ) {
        let grid = Grid::isotropic(dims, 1.0, [0.0; 3]).unwrap();
        let mut r = common::rng(seed);
        let labels: Vec<u32> = (0..grid.len()).map(|_| rand::Rng::random_range(&mut r, 0..=n_labels)).collect();
        let selected: Vec<bool> = (0..grid.len()).map(|_| rand::Rng::random_bool(&mut r, p_select)).collect();
        let table: BTreeMap<u32, Region> = (1..=n_labels)
            .map(|l| (l, Region { hemisphere: if l % 2 == 0 { "Left".into() } else { "Right".into() }, name: format!("R{l}") }))
            .collect();
        let atlas = AtlasVolume::new(grid.clone(), labels.clone(), table.clone()).unwrap();
        let mask = ThresholdMask { grid, data: selected.clone(), topq: 1.0 };
        let report = region_voxel_counts(&mask, &atlas).unwrap();
        let tally = brute_force_tally(&selected, &labels);
        prop_assert_eq!(report.unlabeled, tally.get(&0).copied().unwrap_or(0));
        prop_assert_eq!(report.total, selected.iter().filter(|&&s| s).count());
        let expected: BTreeMap<(String, String), usize> = tally
            .iter()
            .filter(|(l, _)| **l != 0)
            .map(|(l, n)| ((table[l].hemisphere.clone(), table[l].name.clone()), *n))
            .collect();
        let got: BTreeMap<(String, String), usize> =
            report.rows.iter().map(|r| ((r.hemisphere.clone(), r.region.clone()), r.voxels)).collect();
        prop_assert_eq!(got, expected);
    }

    #[test]
    fn threshold_is_monotone_in_q(seed in any::<u64>(), q1 in 0.01f64..1.0, q2 in 0.01f64..1.0) {
        let grid = Grid::isotropic([5, 4, 3], 1.0, [0.0; 3]).unwrap();
        let mut r = common::rng(seed);
        let raw: Vec<f64> = (0..grid.len()).map(|_| rand::Rng::random_range(&mut r, 0.0..1.0)).collect();
        let inside: Vec<bool> = (0..grid.len()).map(|i| i % 7 != 3).collect();
        let mask = BrainMask::new(grid.clone(), inside.clone()).unwrap();
        let h = Heatmap3D::normalized(grid, &raw, 1, SourceMode::Gradcam2dReplicate).unwrap();
        let (lo, hi) = if q1 <= q2 { (q1, q2) } else { (q2, q1) };
        let a = threshold_heatmap(&h, &mask, lo).unwrap();
        let b = threshold_heatmap(&h, &mask, hi).unwrap();
        prop_assert!(a.data.iter().zip(&b.data).all(|(&x, &y)| !x || y));
        prop_assert!(a.data.iter().zip(&inside).all(|(&x, &m)| !x || m));
        let n_in = inside.iter().filter(|&&m| m).count();
        prop_assert_eq!(a.count(), ((lo * n_in as f64).ceil() as usize).min(n_in));
        let min_kept = a.data.iter().zip(&h.data).filter(|(s, _)| **s).map(|(_, v)| *v).fold(f32::INFINITY, f32::min);
        let max_dropped = a.data.iter().zip(&h.data).zip(&inside).filter(|((s, _), m)| !**s && **m).map(|((_, v), _)| *v).fold(f32::NEG_INFINITY, f32::max);
        prop_assert!(min_kept >= max_dropped);
    }
}
