mod common;

use std::collections::BTreeSet;

use neurocam::augment::{gaussian_noise, gaussian_offset, in_mask_std};
use neurocam::optim::{split_counts, split_dataset, Dataset, Subject};
use neurocam::phantom::PhantomConfig;
use neurocam::tensor::{Graph, Tensor};
use neurocam::volio::{BrainMask, BrainVolume, Grid};
use proptest::prelude::*;

#[test]
fn dropout_zero_fraction_at_a_million_units() {
    for seed in 0..5 {
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::full(&[1_000_000], 1.0));
        let y = g.dropout(x, 0.5, seed).unwrap();
        let v = g.value(y).data();
        let zeros = v.iter().filter(|&&a| a == 0.0).count() as f64 / v.len() as f64;
        assert!((zeros - 0.5).abs() <= 0.002, "seed {seed}: zero fraction {zeros}");
        assert!(v.iter().all(|&a| a == 0.0 || a == 2.0), "survivors are scaled by 1/(1-p)");
    }
}

fn phantom_like_volume(seed: u64) -> (BrainVolume, BrainMask) {
    let cfg = PhantomConfig::default();
    let mask = cfg.brain_mask().unwrap();
    let mut r = common::rng(seed);
    let data = (0..mask.grid.len())
        .map(|i| if mask.contains(i) { rand::Rng::random_range(&mut r, -2.0f32..5.0) } else { 0.0 })
        .collect();
    (BrainVolume::new(mask.grid.clone(), data).unwrap(), mask)
}

#[test]
fn augmentation_noise_std_matches_target() {
    let (v, mask) = phantom_like_volume(1);
    let base = in_mask_std(&v, &mask);
    for (k, sigma_rel) in [0.01, 0.05, 0.1, 0.5].into_iter().enumerate() {
        let noisy = gaussian_noise(&v, &mask, sigma_rel, k as u64).unwrap();
        let resid: Vec<f64> = noisy
            .data()
            .iter()
            .zip(v.data())
            .zip(mask.data())
            .filter(|(_, &m)| m)
            .map(|((&a, &b), _)| a as f64 - b as f64)
            .collect();
        let n = resid.len() as f64;
        let mean = resid.iter().sum::<f64>() / n;
        let std = (resid.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n).sqrt();
        let target = sigma_rel * base;
        assert!((std / target - 1.0).abs() <= 0.01, "sigma_rel {sigma_rel}: std {std} vs target {target}");
        let outside_same = noisy.data().iter().zip(v.data()).zip(mask.data()).all(|((a, b), &m)| m || a == b);
        assert!(outside_same);
    }
}

#[test]
fn augmentation_offset_std_matches_target() {
    let (v, mask) = phantom_like_volume(2);
    let target = 0.1 * in_mask_std(&v, &mask);
    let offsets: Vec<f64> = (0..20_000).map(|s| gaussian_offset(&v, &mask, 0.1, s).unwrap().1).collect();
    let n = offsets.len() as f64;
    let mean = offsets.iter().sum::<f64>() / n;
    let std = (offsets.iter().map(|c| (c - mean).powi(2)).sum::<f64>() / n).sqrt();
    assert!((std / target - 1.0).abs() <= 0.01, "offset std {std} vs {target}");
}

#[test]
fn batchnorm_train_output_is_standardized_per_channel() {
    let (n, c, s) = (8, 4, 250);
    let mut r = common::rng(3);
    let data: Vec<f64> = (0..n * c * s)
        .map(|i| {
            let ch = (i / s) % c;
            (ch as f64 + 1.0) * 3.0 * rand::Rng::random_range(&mut r, -1.0..1.0) + 10.0 * ch as f64
        })
        .collect();
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::new(vec![n, c, s], data).unwrap());
    let gamma = g.constant(Tensor::full(&[c], 1.0));
    let beta = g.constant(Tensor::zeros(&[c]));
    let (y, _) = g.batchnorm_train(x, gamma, beta, 1e-5).unwrap();
    let out = g.value(y).data();
    for ch in 0..c {
        let vals: Vec<f64> = (0..n).flat_map(|b| (0..s).map(move |k| (b * c + ch) * s + k)).map(|i| out[i]).collect();
        let m = vals.iter().sum::<f64>() / vals.len() as f64;
        let var = vals.iter().map(|v| (v - m).powi(2)).sum::<f64>() / vals.len() as f64;
        assert!(m.abs() <= 1e-4, "channel {ch} mean {m}");
        assert!((var - 1.0).abs() <= 1e-4, "channel {ch} var {var}");
    }
}

fn toy_dataset(sizes: [usize; 2]) -> Dataset {
    let grid = Grid::isotropic([2, 1, 1], 1.0, [0.0; 3]).unwrap();
    let mask = BrainMask::new(grid.clone(), vec![true; 2]).unwrap();
    let mut items = Vec::new();
    for (label, &n) in sizes.iter().enumerate() {
        for k in 0..n {
            items.push(Subject {
                id: format!("c{label}_{k:03}"),
                label,
                volume: BrainVolume::new(grid.clone(), vec![label as f32, k as f32]).unwrap(),
                source: None,
            });
        }
    }
    Dataset::new(items, mask).unwrap()
}

#[test]
fn reference_split_sizes() {
    assert_eq!(split_counts(&[40, 40], [0.8, 0.1, 0.1]).unwrap(), vec![(32, 4, 4); 2]);
    let c = split_counts(&[16, 16], [0.8, 0.1, 0.1]).unwrap();
    let totals = c.iter().fold((0, 0, 0), |a, b| (a.0 + b.0, a.1 + b.1, a.2 + b.2));
    assert_eq!(totals, (26, 3, 3));
    assert!(c.iter().all(|&(t, v, s)| t == 13 && (1..=2).contains(&v) && (1..=2).contains(&s)));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn split_proportions_follow_rounding_rule(
        a in 3usize..60,
        b in 3usize..60,
        val_pct in 0usize..=30,
        test_pct in 0usize..=30,
        seed in any::<u64>(),
    ) {
        let fv = val_pct as f64 / 100.0;
        let ft = test_pct as f64 / 100.0;
        let fractions = [1.0 - fv - ft, fv, ft];
        let n = a + b;
        let ds = toy_dataset([a, b]);
        let s = split_dataset(&ds, fractions, seed).unwrap();
        let n_val = (fv * n as f64).round() as usize;
        let n_test = (ft * n as f64).round() as usize;
        prop_assert_eq!(s.val.len(), n_val);
        prop_assert_eq!(s.test.len(), n_test);
        prop_assert_eq!(s.train.len(), n - n_val - n_test);
        let train_quota = (n - n_val - n_test) as f64;
        for (class, size) in [a, b].into_iter().enumerate() {
            let count = s.train.labels().iter().filter(|&&l| l == class).count() as f64;
            prop_assert!((count - train_quota * size as f64 / n as f64).abs() < 1.0);
        }
        let ids = |split: &neurocam::optim::Split| split.items.iter().map(|i| i.id.clone()).collect::<BTreeSet<_>>();
        let (tr, va, te) = (ids(&s.train), ids(&s.val), ids(&s.test));
        prop_assert!(tr.is_disjoint(&va) && tr.is_disjoint(&te) && va.is_disjoint(&te));
        prop_assert_eq!(tr.len() + va.len() + te.len(), n);
        let again = split_dataset(&ds, fractions, seed).unwrap();
        prop_assert_eq!(again, s);
    }
}
