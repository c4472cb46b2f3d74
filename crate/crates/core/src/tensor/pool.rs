use super::{conv_output_extent, shape_err, Result, Scalar};

/// Max-pooling window over `[d, h, w]` of a `[N, C, D, H, W]` tensor.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PoolGeometry {
    pub channels: usize,
    pub input: [usize; 3],
    pub window: [usize; 3],
    pub stride: [usize; 3],
    pub output: [usize; 3],
}

impl PoolGeometry {
    pub fn new(channels: usize, input: [usize; 3], window: [usize; 3], stride: [usize; 3]) -> Result<Self> {
        let mut output = [0; 3];
        for axis in 0..3 {
            output[axis] = conv_output_extent(input[axis], window[axis], stride[axis], 0).ok_or_else(|| {
                shape_err(
                    "maxpool",
                    format!("window {window:?} stride {stride:?} does not fit input {input:?}"),
                )
            })?;
        }
        Ok(Self {
            channels,
            input,
            window,
            stride,
            output,
        })
    }

    pub(crate) fn output_len(&self) -> usize {
        self.channels * self.output.iter().product::<usize>()
    }
}

/// Returns pooled values and, per output, the flat input index of the
/// maximum. Windows are scanned in increasing linear order and only a strictly
/// larger value replaces the incumbent, so ties resolve to the lowest index.
pub(crate) fn forward<T: Scalar>(g: &PoolGeometry, batch: usize, x: &[T]) -> (Vec<T>, Vec<usize>) {
    let [d, h, w] = g.input;
    let [od, oh, ow] = g.output;
    let [wd, wh, ww] = g.window;
    let [sd, sh, sw] = g.stride;
    let mut out = Vec::with_capacity(batch * g.output_len());
    let mut argmax = Vec::with_capacity(batch * g.output_len());
    for plane in 0..batch * g.channels {
        let base = plane * d * h * w;
        for oz in 0..od {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = base + ((oz * sd) * h + oy * sh) * w + ox * sw;
                    let mut best_val = x[best];
                    for a in 0..wd {
                        for b in 0..wh {
                            let row = base + ((oz * sd + a) * h + oy * sh + b) * w + ox * sw;
                            for (e, &v) in x[row..row + ww].iter().enumerate() {
                                if v > best_val || (best_val.is_nan() && !v.is_nan()) {
                                    best_val = v;
                                    best = row + e;
                                }
                            }
                        }
                    }
                    out.push(best_val);
                    argmax.push(best);
                }
            }
        }
    }
    (out, argmax)
}

pub(crate) fn backward<T: Scalar>(input_len: usize, argmax: &[usize], grad_out: &[T]) -> Vec<T> {
    let mut gx = vec![T::zero(); input_len];
    for (&i, &g) in argmax.iter().zip(grad_out) {
        gx[i] = gx[i] + g;
    }
    gx
}
