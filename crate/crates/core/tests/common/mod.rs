//! Independent reference implementations shared by the integration tests.
#![allow(dead_code)]

use neurocam::tensor::{Graph, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut r = rng(seed);
    Tensor::from_fn(shape, |_| r.random_range(-1.0..1.0))
}

/// Direct cross-correlation on `[N, C, D, H, W]` with zero padding.
pub fn naive_conv(
    x: &[f64],
    xs: [usize; 5],
    k: &[f64],
    ks: [usize; 5],
    bias: Option<&[f64]>,
    stride: [usize; 3],
    pad: [usize; 3],
) -> (Vec<f64>, [usize; 5]) {
    let [n, c, d, h, w] = xs;
    let [o, kc, kd, kh, kw] = ks;
    assert_eq!(c, kc);
    let od = (d + 2 * pad[0] - kd) / stride[0] + 1;
    let oh = (h + 2 * pad[1] - kh) / stride[1] + 1;
    let ow = (w + 2 * pad[2] - kw) / stride[2] + 1;
    let mut out = vec![0.0; n * o * od * oh * ow];
    for b in 0..n {
        for f in 0..o {
            for z in 0..od {
                for y in 0..oh {
                    for xo in 0..ow {
                        let mut acc = bias.map_or(0.0, |bv| bv[f]);
                        for ch in 0..c {
                            for a in 0..kd {
                                for bb in 0..kh {
                                    for cc in 0..kw {
                                        let iz = (z * stride[0] + a) as isize - pad[0] as isize;
                                        let iy = (y * stride[1] + bb) as isize - pad[1] as isize;
                                        let ix = (xo * stride[2] + cc) as isize - pad[2] as isize;
                                        if iz < 0 || iy < 0 || ix < 0 || iz >= d as isize || iy >= h as isize || ix >= w as isize {
                                            continue;
                                        }
                                        let xi = (((b * c + ch) * d + iz as usize) * h + iy as usize) * w + ix as usize;
                                        let ki = (((f * c + ch) * kd + a) * kh + bb) * kw + cc;
                                        acc += x[xi] * k[ki];
                                    }
                                }
                            }
                        }
                        out[(((b * o + f) * od + z) * oh + y) * ow + xo] = acc;
                    }
                }
            }
        }
    }
    (out, [n, o, od, oh, ow])
}

/// Window maxima on `[N, C, D, H, W]` without padding.
pub fn naive_maxpool(x: &[f64], xs: [usize; 5], window: [usize; 3], stride: [usize; 3]) -> (Vec<f64>, [usize; 5]) {
    let [n, c, d, h, w] = xs;
    let od = (d - window[0]) / stride[0] + 1;
    let oh = (h - window[1]) / stride[1] + 1;
    let ow = (w - window[2]) / stride[2] + 1;
    let mut out = Vec::with_capacity(n * c * od * oh * ow);
    for b in 0..n * c {
        for z in 0..od {
            for y in 0..oh {
                for xo in 0..ow {
                    let mut m = f64::NEG_INFINITY;
                    for a in 0..window[0] {
                        for bb in 0..window[1] {
                            for cc in 0..window[2] {
                                let i = ((b * d + z * stride[0] + a) * h + y * stride[1] + bb) * w + xo * stride[2] + cc;
                                m = m.max(x[i]);
                            }
                        }
                    }
                    out.push(m);
                }
            }
        }
    }
    (out, [n, c, od, oh, ow])
}

/// Reduces a tensor output to a scalar through a fixed random projection,
/// so every output element contributes a distinct weight.
pub fn project(g: &mut Graph<f64>, out: Var, seed: u64) -> Var {
    let r = g.constant(uniform(g.shape(out), seed));
    let p = g.mul(out, r).unwrap();
    g.sum(p)
}

pub const FD_STEP: f64 = 1e-6;

fn norm_rel(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let scale = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(b.iter().map(|x| x * x).sum::<f64>().sqrt());
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}

/// Largest norm-wise relative error, over `leaves`, between the reverse-mode
/// gradient of `f` and central finite differences.
pub fn fd_check<F>(leaves: &[Tensor<f64>], f: F) -> f64
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Var,
{
    let eval = |vals: &[Tensor<f64>]| -> f64 {
        let mut g = Graph::<f64>::new();
        let vars: Vec<Var> = vals.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&mut g, &vars);
        g.value(out).item().unwrap()
    };
    let mut g = Graph::<f64>::new();
    let vars: Vec<Var> = leaves.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&mut g, &vars);
    let grads = g.backward(out).unwrap();
    let mut worst: f64 = 0.0;
    for (li, leaf) in leaves.iter().enumerate() {
        let analytic = grads.grad_or_zero(vars[li]).tensor;
        let mut numeric = vec![0.0; leaf.numel()];
        for (j, slot) in numeric.iter_mut().enumerate() {
            let mut vals = leaves.to_vec();
            vals[li].data_mut()[j] += FD_STEP;
            let up = eval(&vals);
            vals[li].data_mut()[j] -= 2.0 * FD_STEP;
            let down = eval(&vals);
            *slot = (up - down) / (2.0 * FD_STEP);
        }
        worst = worst.max(norm_rel(analytic.data(), &numeric));
    }
    worst
}

/// Same metric for an arbitrary scalar function of a flat parameter vector
/// with a known analytic gradient.
pub fn fd_compare(params: &[f64], analytic: &[f64], f: impl Fn(&[f64]) -> f64) -> f64 {
    let mut numeric = vec![0.0; params.len()];
    let mut p = params.to_vec();
    for j in 0..p.len() {
        let x = p[j];
        p[j] = x + FD_STEP;
        let up = f(&p);
        p[j] = x - FD_STEP;
        let down = f(&p);
        p[j] = x;
        numeric[j] = (up - down) / (2.0 * FD_STEP);
    }
    norm_rel(analytic, &numeric)
}

/// Per-label voxel tally by direct iteration.
pub fn brute_force_tally(selected: &[bool], labels: &[u32]) -> std::collections::BTreeMap<u32, usize> {
    let mut m = std::collections::BTreeMap::new();
    for (i, &s) in selected.iter().enumerate() {
        if s {
            *m.entry(labels[i]).or_insert(0) += 1;
        }
    }
    m
}

/// A small two-class phantom that trains in well under a second.
pub fn tiny_phantom(n_per_class: usize, seed: u64) -> neurocam::phantom::PhantomConfig {
    use neurocam::phantom::{BlobSpec, PhantomConfig};
    PhantomConfig {
        n_per_class,
        dims: [16, 18, 14],
        mask_radii: [7.0, 8.0, 6.0],
        blobs: vec![
            BlobSpec { class: 1, center: [5, 6, 6], radius: 2.0, amplitude: 3.0 },
            BlobSpec { class: 0, center: [10, 11, 7], radius: 2.0, amplitude: 3.0 },
        ],
        seed,
        ..Default::default()
    }
}
