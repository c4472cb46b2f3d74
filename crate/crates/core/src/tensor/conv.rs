//! Cross-correlation over 2 or 3 spatial axes.
//!
//! Tensors are laid out `[N, C, D, H, W]`; a rank-2 convolution is the same
//! computation with `D = 1` and a unit kernel depth. Two interchangeable
//! algorithms are provided: patch-matrix unfolding followed by a GEMM, and a
//! direct loop nest.

use super::{shape_err, Result, Scalar};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum ConvAlgo {
    #[default]
    Gemm,
    Direct,
}

/// Output extent along one axis, `None` when the kernel does not fit.
pub fn conv_output_extent(input: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    if stride == 0 || kernel == 0 || input + 2 * padding < kernel {
        return None;
    }
    Some((input + 2 * padding - kernel) / stride + 1)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub in_channels: usize,
    pub out_channels: usize,
    /// Spatial extents `[d, h, w]`.
    pub input: [usize; 3],
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub padding: [usize; 3],
    pub output: [usize; 3],
}

impl ConvGeometry {
    pub fn new(
        in_channels: usize,
        input: [usize; 3],
        out_channels: usize,
        kernel: [usize; 3],
        stride: [usize; 3],
        padding: [usize; 3],
    ) -> Result<Self> {
        let mut output = [0; 3];
        for axis in 0..3 {
            output[axis] = conv_output_extent(input[axis], kernel[axis], stride[axis], padding[axis])
                .ok_or_else(|| {
                    shape_err(
                        "conv",
                        format!(
                            "kernel {kernel:?} stride {stride:?} padding {padding:?} does not fit input {input:?}"
                        ),
                    )
                })?;
        }
        Ok(Self {
            in_channels,
            out_channels,
            input,
            kernel,
            stride,
            padding,
            output,
        })
    }

    fn patch_len(&self) -> usize {
        self.in_channels * self.kernel.iter().product::<usize>()
    }

    fn positions(&self) -> usize {
        self.output.iter().product()
    }

    fn input_len(&self) -> usize {
        self.in_channels * self.input.iter().product::<usize>()
    }

    fn output_len(&self) -> usize {
        self.out_channels * self.positions()
    }

    pub(crate) fn kernel_len(&self) -> usize {
        self.out_channels * self.patch_len()
    }
}

/// Range of output indices along one axis whose input tap `offset` lands
/// inside `[0, extent)`.
fn valid_range(out: usize, stride: usize, offset: usize, pad: usize, extent: usize) -> (usize, usize) {
    // input index = o * stride + offset - pad
    let lo = if pad > offset {
        (pad - offset).div_ceil(stride)
    } else {
        0
    };
    let hi = if extent + pad > offset {
        ((extent - 1 + pad - offset) / stride + 1).min(out)
    } else {
        0
    };
    (lo.min(hi), hi)
}

fn im2col<T: Scalar>(g: &ConvGeometry, x: &[T], cols: &mut [T]) {
    let [d, h, w] = g.input;
    let [kd, kh, kw] = g.kernel;
    let [od, oh, ow] = g.output;
    let [sd, sh, sw] = g.stride;
    let [pd, ph, pw] = g.padding;
    let positions = g.positions();
    let zero = T::zero();
    for c in 0..g.in_channels {
        for a in 0..kd {
            let (z_lo, z_hi) = valid_range(od, sd, a, pd, d);
            for b in 0..kh {
                let (y_lo, y_hi) = valid_range(oh, sh, b, ph, h);
                for e in 0..kw {
                    let (x_lo, x_hi) = valid_range(ow, sw, e, pw, w);
                    let row = ((c * kd + a) * kh + b) * kw + e;
                    let dst = &mut cols[row * positions..(row + 1) * positions];
                    for oz in 0..od {
                        let plane = &mut dst[oz * oh * ow..(oz + 1) * oh * ow];
                        if oz < z_lo || oz >= z_hi {
                            plane.fill(zero);
                            continue;
                        }
                        let iz = oz * sd + a - pd;
                        for oy in 0..oh {
                            let line = &mut plane[oy * ow..(oy + 1) * ow];
                            if oy < y_lo || oy >= y_hi {
                                line.fill(zero);
                                continue;
                            }
                            let iy = oy * sh + b - ph;
                            let src = &x[((c * d + iz) * h + iy) * w..((c * d + iz) * h + iy + 1) * w];
                            line[..x_lo].fill(zero);
                            line[x_hi..].fill(zero);
                            if sw == 1 {
                                let start = x_lo + e - pw;
                                line[x_lo..x_hi].copy_from_slice(&src[start..start + (x_hi - x_lo)]);
                            } else {
                                for ox in x_lo..x_hi {
                                    line[ox] = src[ox * sw + e - pw];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

fn col2im<T: Scalar>(g: &ConvGeometry, cols: &[T], gx: &mut [T]) {
    let [d, h, w] = g.input;
    let [kd, kh, kw] = g.kernel;
    let [od, oh, ow] = g.output;
    let [sd, sh, sw] = g.stride;
    let [pd, ph, pw] = g.padding;
    let positions = g.positions();
    for c in 0..g.in_channels {
        for a in 0..kd {
            let (z_lo, z_hi) = valid_range(od, sd, a, pd, d);
            for b in 0..kh {
                let (y_lo, y_hi) = valid_range(oh, sh, b, ph, h);
                for e in 0..kw {
                    let (x_lo, x_hi) = valid_range(ow, sw, e, pw, w);
                    let row = ((c * kd + a) * kh + b) * kw + e;
                    let src = &cols[row * positions..(row + 1) * positions];
                    for oz in z_lo..z_hi {
                        let iz = oz * sd + a - pd;
                        for oy in y_lo..y_hi {
                            let iy = oy * sh + b - ph;
                            let line = &src[(oz * oh + oy) * ow..(oz * oh + oy + 1) * ow];
                            let dst = &mut gx[((c * d + iz) * h + iy) * w..((c * d + iz) * h + iy + 1) * w];
                            for ox in x_lo..x_hi {
                                let ix = ox * sw + e - pw;
                                dst[ix] = dst[ix] + line[ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn check_operands(
    g: &ConvGeometry,
    batch: usize,
    input: usize,
    kernel: usize,
    bias: Option<usize>,
) -> Result<()> {
    if input != batch * g.input_len() {
        return Err(shape_err("conv", format!("input holds {input} values, expected {}", batch * g.input_len())));
    }
    if kernel != g.kernel_len() {
        return Err(shape_err("conv", format!("kernel holds {kernel} values, expected {}", g.kernel_len())));
    }
    if let Some(b) = bias {
        if b != g.out_channels {
            return Err(shape_err("conv", format!("bias has {b} entries for {} filters", g.out_channels)));
        }
    }
    Ok(())
}

pub(crate) fn forward<T: Scalar>(
    g: &ConvGeometry,
    algo: ConvAlgo,
    batch: usize,
    x: &[T],
    kernel: &[T],
    bias: Option<&[T]>,
) -> Vec<T> {
    let mut out = vec![T::zero(); batch * g.output_len()];
    match algo {
        ConvAlgo::Gemm => {
            let k = g.patch_len();
            let p = g.positions();
            let mut cols = vec![T::zero(); k * p];
            for n in 0..batch {
                im2col(g, &x[n * g.input_len()..(n + 1) * g.input_len()], &mut cols);
                let dst = &mut out[n * g.output_len()..(n + 1) * g.output_len()];
                T::gemm(g.out_channels, k, p, kernel, false, &cols, false, dst, false);
            }
        }
        ConvAlgo::Direct => direct_forward(g, batch, x, kernel, &mut out),
    }
    if let Some(bias) = bias {
        let p = g.positions();
        for chunk in out.chunks_mut(p).enumerate() {
            let b = bias[chunk.0 % g.out_channels];
            chunk.1.iter_mut().for_each(|v| *v = *v + b);
        }
    }
    out
}

pub(crate) struct ConvGrads<T> {
    pub input: Option<Vec<T>>,
    pub kernel: Option<Vec<T>>,
    pub bias: Option<Vec<T>>,
}

pub(crate) fn backward<T: Scalar>(
    g: &ConvGeometry,
    algo: ConvAlgo,
    batch: usize,
    x: &[T],
    kernel: &[T],
    grad_out: &[T],
    need: [bool; 3],
) -> ConvGrads<T> {
    let [need_input, need_kernel, need_bias] = need;
    let mut gx = need_input.then(|| vec![T::zero(); x.len()]);
    let mut gw = need_kernel.then(|| vec![T::zero(); kernel.len()]);
    let gb = need_bias.then(|| {
        let p = g.positions();
        let mut acc = vec![0.0f64; g.out_channels];
        for (i, chunk) in grad_out.chunks(p).enumerate() {
            acc[i % g.out_channels] += chunk.iter().map(|v| v.as_f64()).sum::<f64>();
        }
        acc.into_iter().map(T::from_f64_lossy).collect()
    });
    match algo {
        ConvAlgo::Gemm => {
            let k = g.patch_len();
            let p = g.positions();
            let mut cols = vec![T::zero(); k * p];
            for n in 0..batch {
                let go = &grad_out[n * g.output_len()..(n + 1) * g.output_len()];
                if let Some(gw) = gw.as_mut() {
                    im2col(g, &x[n * g.input_len()..(n + 1) * g.input_len()], &mut cols);
                    T::gemm(g.out_channels, p, k, go, false, &cols, true, gw, true);
                }
                if let Some(gx) = gx.as_mut() {
                    T::gemm(k, g.out_channels, p, kernel, true, go, false, &mut cols, false);
                    col2im(g, &cols, &mut gx[n * g.input_len()..(n + 1) * g.input_len()]);
                }
            }
        }
        ConvAlgo::Direct => direct_backward(g, batch, x, kernel, grad_out, gx.as_deref_mut(), gw.as_deref_mut()),
    }
    ConvGrads {
        input: gx,
        kernel: gw,
        bias: gb,
    }
}

/// Visits every (output position, kernel tap) pair whose input lands inside
/// the unpadded volume, passing flat input, kernel and output offsets.
fn for_each_tap(g: &ConvGeometry, batch: usize, mut f: impl FnMut(usize, usize, usize)) {
    let [d, h, w] = g.input;
    let [kd, kh, kw] = g.kernel;
    let [od, oh, ow] = g.output;
    let [sd, sh, sw] = g.stride;
    let [pd, ph, pw] = g.padding;
    for n in 0..batch {
        for f_idx in 0..g.out_channels {
            for oz in 0..od {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let o = (((n * g.out_channels + f_idx) * od + oz) * oh + oy) * ow + ox;
                        for c in 0..g.in_channels {
                            for a in 0..kd {
                                let iz = (oz * sd + a) as isize - pd as isize;
                                if iz < 0 || iz >= d as isize {
                                    continue;
                                }
                                for b in 0..kh {
                                    let iy = (oy * sh + b) as isize - ph as isize;
                                    if iy < 0 || iy >= h as isize {
                                        continue;
                                    }
                                    for e in 0..kw {
                                        let ix = (ox * sw + e) as isize - pw as isize;
                                        if ix < 0 || ix >= w as isize {
                                            continue;
                                        }
                                        let i = (((n * g.in_channels + c) * d + iz as usize) * h + iy as usize) * w
                                            + ix as usize;
                                        let k = (((f_idx * g.in_channels + c) * kd + a) * kh + b) * kw + e;
                                        f(i, k, o);
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

fn direct_forward<T: Scalar>(g: &ConvGeometry, batch: usize, x: &[T], kernel: &[T], out: &mut [T]) {
    let mut acc = vec![0.0f64; out.len()];
    for_each_tap(g, batch, |i, k, o| acc[o] += x[i].as_f64() * kernel[k].as_f64());
    for (dst, v) in out.iter_mut().zip(acc) {
        *dst = T::from_f64_lossy(v);
    }
}

fn direct_backward<T: Scalar>(
    g: &ConvGeometry,
    batch: usize,
    x: &[T],
    kernel: &[T],
    grad_out: &[T],
    gx: Option<&mut [T]>,
    gw: Option<&mut [T]>,
) {
    let mut acc_x = gx.as_ref().map(|v| vec![0.0f64; v.len()]);
    let mut acc_w = gw.as_ref().map(|v| vec![0.0f64; v.len()]);
    for_each_tap(g, batch, |i, k, o| {
        let go = grad_out[o].as_f64();
        if let Some(ax) = acc_x.as_mut() {
            ax[i] += kernel[k].as_f64() * go;
        }
        if let Some(aw) = acc_w.as_mut() {
            aw[k] += x[i].as_f64() * go;
        }
    });
    if let (Some(gx), Some(acc)) = (gx, acc_x) {
        gx.iter_mut().zip(acc).for_each(|(d, v)| *d = T::from_f64_lossy(v));
    }
    if let (Some(gw), Some(acc)) = (gw, acc_w) {
        gw.iter_mut().zip(acc).for_each(|(d, v)| *d = T::from_f64_lossy(v));
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn output_extent_formula() {
        assert_eq!(conv_output_extent(73, 5, 1, 0), Some(69));
        assert_eq!(conv_output_extent(7, 3, 2, 1), Some(4));
        assert_eq!(conv_output_extent(4, 5, 1, 0), None);
        assert_eq!(conv_output_extent(4, 5, 1, 1), Some(2));
        assert_eq!(conv_output_extent(4, 1, 0, 0), None);
    }

    #[test]
    fn valid_range_matches_bruteforce() {
        for out in 1..6 {
            for stride in 1..4 {
                for offset in 0..5 {
                    for pad in 0..3 {
                        for extent in 1..8 {
                            let ok: Vec<usize> = (0..out)
                                .filter(|&o| {
                                    let i = (o * stride + offset) as isize - pad as isize;
                                    i >= 0 && i < extent as isize
                                })
                                .collect();
                            let (lo, hi) = valid_range(out, stride, offset, pad, extent);
                            let got: Vec<usize> = (lo..hi).collect();
                            assert_eq!(got, ok, "out {out} stride {stride} offset {offset} pad {pad} extent {extent}");
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn gemm_and_direct_agree_with_padding_and_stride() {
        let g = ConvGeometry::new(2, [3, 5, 6], 3, [2, 3, 3], [1, 2, 1], [1, 1, 0]).unwrap();
        let x: Vec<f64> = (0..2 * g.input_len()).map(|i| ((i * 37 % 17) as f64 - 8.0) / 7.0).collect();
        let w: Vec<f64> = (0..g.kernel_len()).map(|i| ((i * 13 % 11) as f64 - 5.0) / 9.0).collect();
        let b = [0.1, -0.2, 0.3];
        let a = forward(&g, ConvAlgo::Gemm, 2, &x, &w, Some(&b));
        let d = forward(&g, ConvAlgo::Direct, 2, &x, &w, Some(&b));
        let diff = a.iter().zip(&d).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max);
        assert!(diff < 1e-12);

        let go: Vec<f64> = (0..a.len()).map(|i| ((i * 7 % 5) as f64 - 2.0) / 3.0).collect();
        let ga = backward(&g, ConvAlgo::Gemm, 2, &x, &w, &go, [true; 3]);
        let gd = backward(&g, ConvAlgo::Direct, 2, &x, &w, &go, [true; 3]);
        for (p, q) in [(ga.input, gd.input), (ga.kernel, gd.kernel), (ga.bias, gd.bias)] {
            let (p, q) = (p.unwrap(), q.unwrap());
            assert!(p.iter().zip(&q).all(|(u, v)| (u - v).abs() < 1e-12));
        }
    }
}
