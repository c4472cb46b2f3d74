//! Grad-CAM, guided backpropagation, and guided Grad-CAM relevance volumes.
//!
//! All gradients are taken on the raw target logit with a one-hot upstream
//! vector, so relevance does not depend on the other classes' logits.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use image::{Rgb, RgbImage};
use thiserror::Error;

use crate::nn::{batch_from_volumes, ArchitectureSpec, LayerSpec, Mode, Model, NnError};
use crate::tensor::{Graph, ReluRule, Tensor, TensorError};
use crate::volio::{BrainMask, BrainVolume, Grid, VolumeError};

#[derive(Debug, Error)]
pub enum ExplainError {
    #[error("the model has no convolutional layer")]
    NoConvLayer,
    #[error("layer {0} is not convolutional")]
    NotConvolutional(usize),
    #[error("explanations need a model in eval mode")]
    NotEvalMode,
    #[error("mode {mode} does not apply to a model with {rank} spatial dimensions")]
    ModeRankMismatch { mode: CamMode, rank: usize },
    #[error("class {class} out of range for {classes} classes")]
    InvalidClass { class: usize, classes: usize },
    #[error("dimension mismatch: {0}")]
    DimMismatch(String),
    #[error("image output: {0}")]
    Image(String),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Volume(#[from] VolumeError),
}

pub type Result<T, E = ExplainError> = std::result::Result<T, E>;

/// How a Grad-CAM map is spread over the volume.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CamMode {
    /// 2D map copied along z.
    Replicate,
    /// 2D map scaled per axial slice by that slice's mean absolute input
    /// gradient.
    Slicegrad,
    /// Trilinear upsampling of a 3D model's map.
    ThreeD,
}

impl fmt::Display for CamMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CamMode::Replicate => "replicate",
            CamMode::Slicegrad => "slicegrad",
            CamMode::ThreeD => "3d",
        })
    }
}

impl FromStr for CamMode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "replicate" => Ok(CamMode::Replicate),
            "slicegrad" => Ok(CamMode::Slicegrad),
            "3d" => Ok(CamMode::ThreeD),
            other => Err(format!("unknown mode {other:?}; expected replicate, slicegrad or 3d")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SourceMode {
    Gradcam2dReplicate,
    Gradcam2dSlicegrad,
    Gradcam3d,
    GuidedGradcam,
}

impl SourceMode {
    pub fn name(self) -> &'static str {
        match self {
            SourceMode::Gradcam2dReplicate => "gradcam2d_replicate",
            SourceMode::Gradcam2dSlicegrad => "gradcam2d_slicegrad",
            SourceMode::Gradcam3d => "gradcam3d",
            SourceMode::GuidedGradcam => "guided_gradcam",
        }
    }
}

/// Nonnegative relevance over the input grid, max-normalized so a nonzero
/// map attains exactly 1.
#[derive(Clone, Debug, PartialEq)]
pub struct Heatmap3D {
    pub grid: Grid,
    pub data: Vec<f32>,
    pub target_class: usize,
    pub source_mode: SourceMode,
}

impl Heatmap3D {
    /// Clamps negatives to zero and divides by the maximum.
    pub fn normalized(grid: Grid, raw: &[f64], target_class: usize, source_mode: SourceMode) -> Result<Self> {
        if raw.len() != grid.len() {
            return Err(ExplainError::DimMismatch(format!("{} values for grid {:?}", raw.len(), grid.dims)));
        }
        let max = raw.iter().fold(0.0f64, |m, &v| m.max(v));
        let data = raw
            .iter()
            .map(|&v| if max > 0.0 && v > 0.0 { (v / max) as f32 } else { 0.0 })
            .collect();
        Ok(Self {
            grid,
            data,
            target_class,
            source_mode,
        })
    }

    pub fn dims(&self) -> [usize; 3] {
        self.grid.dims
    }

    pub fn max(&self) -> f32 {
        self.data.iter().fold(0.0, |m, &v| m.max(v))
    }

    /// Zeroes relevance outside `mask` and renormalizes.
    pub fn masked(&self, mask: &BrainMask) -> Result<Self> {
        if mask.grid.dims != self.grid.dims {
            return Err(ExplainError::DimMismatch(format!(
                "mask {:?} for heatmap {:?}",
                mask.grid.dims, self.grid.dims
            )));
        }
        let raw: Vec<f64> = self
            .data
            .iter()
            .zip(mask.data())
            .map(|(&v, &m)| if m { v as f64 } else { 0.0 })
            .collect();
        Self::normalized(self.grid.clone(), &raw, self.target_class, self.source_mode)
    }

    pub fn to_volume(&self) -> BrainVolume {
        BrainVolume::new(self.grid.clone(), self.data.clone()).expect("grid-sized data")
    }

    /// Sum of relevance over the voxels where `region` is set.
    pub fn mass_in(&self, region: &[bool]) -> f64 {
        self.data.iter().zip(region).filter(|(_, &r)| r).map(|(&v, _)| v as f64).sum()
    }
}

/// Grad-CAM map on the spatial grid of a convolutional layer.
#[derive(Clone, Debug, PartialEq)]
pub struct CamMap {
    pub layer: usize,
    /// Spatial extent, `(H, W)` or `(D, H, W)`.
    pub dims: Vec<usize>,
    pub data: Vec<f64>,
    /// Per-channel weights: spatial mean of the logit gradient.
    pub alphas: Vec<f64>,
}

struct Pass {
    activation: Option<(Tensor<f32>, Tensor<f32>)>,
    input_grad: Tensor<f32>,
}

fn check(model: &Model, class: usize) -> Result<()> {
    if model.mode != Mode::Eval {
        return Err(ExplainError::NotEvalMode);
    }
    let classes = model.spec().classes;
    if class >= classes {
        return Err(ExplainError::InvalidClass { class, classes });
    }
    Ok(())
}

fn target_layer(model: &Model, layer: Option<usize>) -> Result<usize> {
    match layer {
        None => model.spec().last_conv().ok_or(ExplainError::NoConvLayer),
        Some(l) if model.spec().layers.get(l).is_some_and(|s| s.is_conv()) => Ok(l),
        Some(l) => Err(ExplainError::NotConvolutional(l)),
    }
}

/// One forward and one reverse pass from the one-hot target logit. Returns
/// the rectified activation after conv layer `conv` with its gradient (when
/// requested) and the input gradient.
fn run(model: &Model, volume: &BrainVolume, class: usize, rule: ReluRule, conv: Option<usize>) -> Result<Pass> {
    let mut g = Graph::new();
    let x = g.leaf(batch_from_volumes::<f32>(model.spec(), &[volume])?, true);
    let f = model.forward(&mut g, x, false, 0)?;
    let act = conv.map(|c| f.activations[model.spec().rectified_output(c)]);
    if let Some(a) = act {
        g.retain_grad(a);
    }
    let mut seed = Tensor::zeros(g.shape(f.logits));
    seed.data_mut()[class] = 1.0;
    let grads = g.backward_from(f.logits, seed, rule)?;
    Ok(Pass {
        activation: act.map(|a| (g.value(a).clone(), grads.grad_or_zero(a).tensor)),
        input_grad: grads.grad_or_zero(x).tensor,
    })
}

fn cam_from(layer: usize, act: &Tensor<f32>, grad: &Tensor<f32>) -> CamMap {
    let shape = act.shape();
    let channels = shape[1];
    let dims = shape[2..].to_vec();
    let n: usize = dims.iter().product();
    let (a, gr) = (act.data(), grad.data());
    let alphas: Vec<f64> = (0..channels)
        .map(|k| gr[k * n..(k + 1) * n].iter().map(|&v| v as f64).sum::<f64>() / n as f64)
        .collect();
    let mut data = vec![0.0f64; n];
    for (k, &alpha) in alphas.iter().enumerate() {
        for (d, &v) in data.iter_mut().zip(&a[k * n..(k + 1) * n]) {
            *d += alpha * v as f64;
        }
    }
    for d in &mut data {
        *d = d.max(0.0);
    }
    CamMap {
        layer,
        dims,
        data,
        alphas,
    }
}

/// Grad-CAM of `class` at conv layer `layer` (default: the last one), read
/// from the rectified output of that layer. The map is on the layer's own
/// spatial grid; see [`upsample_linear`].
pub fn grad_cam(model: &Model, volume: &BrainVolume, class: usize, layer: Option<usize>) -> Result<CamMap> {
    check(model, class)?;
    let layer = target_layer(model, layer)?;
    let pass = run(model, volume, class, ReluRule::Standard, Some(layer))?;
    let (act, grad) = pass.activation.expect("activation requested");
    Ok(cam_from(layer, &act, &grad))
}

/// Separable linear resampling of a row-major array with half-pixel
/// alignment and edge clamping (bilinear in 2D, trilinear in 3D).
pub fn upsample_linear(data: &[f64], from: &[usize], to: &[usize]) -> Vec<f64> {
    assert_eq!(from.len(), to.len(), "rank mismatch");
    assert_eq!(data.len(), from.iter().product::<usize>(), "data length");
    resample(data, from, to, |axis, o| (o as f64 + 0.5) * from[axis] as f64 / to[axis] as f64 - 0.5)
}

/// Per spatial axis `(scale, offset)` such that cell `i` of layer `layer`'s
/// output is centred on input coordinate `scale * i + offset`.
pub fn receptive_field_map(spec: &ArchitectureSpec, layer: usize) -> Vec<(f64, f64)> {
    let rank = spec.spatial_rank();
    let mut map = vec![(1.0, 0.0); rank];
    for l in &spec.layers[..=layer] {
        let (kernel, stride, pad) = match l {
            LayerSpec::Conv2d { kernel, stride, padding, .. } | LayerSpec::Conv3d { kernel, stride, padding, .. } => {
                (vec![*kernel; rank], vec![*stride; rank], *padding)
            }
            LayerSpec::MaxPool { window, stride } => (window.clone(), stride.clone(), 0),
            _ => continue,
        };
        for (a, m) in map.iter_mut().enumerate() {
            let local_offset = (kernel[a] as f64 - 1.0) / 2.0 - pad as f64;
            *m = (m.0 * stride[a] as f64, m.0 * local_offset + m.1);
        }
    }
    map
}

/// Separable linear interpolation of a row-major coarse array onto a finer
/// grid, placing coarse cell `i` at `scale * i + offset` on each axis and
/// clamping beyond the outermost cells.
pub fn upsample_aligned(data: &[f64], from: &[usize], to: &[usize], map: &[(f64, f64)]) -> Vec<f64> {
    assert_eq!(from.len(), to.len(), "rank mismatch");
    assert_eq!(map.len(), to.len(), "rank mismatch");
    assert_eq!(data.len(), from.iter().product::<usize>(), "data length");
    resample(data, from, to, |axis, o| (o as f64 - map[axis].1) / map[axis].0)
}

fn resample(data: &[f64], from: &[usize], to: &[usize], source: impl Fn(usize, usize) -> f64) -> Vec<f64> {
    let mut cur = data.to_vec();
    let mut shape = from.to_vec();
    for axis in 0..from.len() {
        let (n_in, n_out) = (shape[axis], to[axis]);
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let taps: Vec<(usize, usize, f64)> = (0..n_out)
            .map(|o| {
                let src = source(axis, o).clamp(0.0, (n_in - 1) as f64);
                let lo = src.floor() as usize;
                let hi = (lo + 1).min(n_in - 1);
                (lo, hi, src - lo as f64)
            })
            .collect();
        let mut next = vec![0.0; outer * n_out * inner];
        for o in 0..outer {
            for (j, &(lo, hi, t)) in taps.iter().enumerate() {
                for i in 0..inner {
                    let a = cur[(o * n_in + lo) * inner + i];
                    let b = cur[(o * n_in + hi) * inner + i];
                    next[(o * n_out + j) * inner + i] = a + t * (b - a);
                }
            }
        }
        cur = next;
        shape[axis] = n_out;
    }
    cur
}

/// Placement of coarse Grad-CAM cells on the input grid.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Upsampling {
    /// Cell `i` at its receptive-field centre ([`receptive_field_map`]).
    #[default]
    ReceptiveField,
    /// Plain image resize: the coarse and fine grids share their outer
    /// edges.
    HalfPixel,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct CamOptions {
    pub upsampling: Upsampling,
    /// Convolutional layer to read; the last one when `None`.
    pub layer: Option<usize>,
}

/// Grad-CAM spread over the input volume according to `mode`.
pub fn relevance_volume(model: &Model, volume: &BrainVolume, class: usize, mode: CamMode) -> Result<Heatmap3D> {
    relevance_volume_with(model, volume, class, mode, CamOptions::default())
}

pub fn relevance_volume_with(
    model: &Model,
    volume: &BrainVolume,
    class: usize,
    mode: CamMode,
    opts: CamOptions,
) -> Result<Heatmap3D> {
    let (raw, source) = raw_relevance(model, volume, class, mode, opts)?;
    Heatmap3D::normalized(volume.grid.clone(), &raw, class, source)
}

fn raw_relevance(
    model: &Model,
    volume: &BrainVolume,
    class: usize,
    mode: CamMode,
    opts: CamOptions,
) -> Result<(Vec<f64>, SourceMode)> {
    check(model, class)?;
    let rank = model.spec().spatial_rank();
    let wanted = if mode == CamMode::ThreeD { 3 } else { 2 };
    if rank != wanted {
        return Err(ExplainError::ModeRankMismatch { mode, rank });
    }
    let layer = target_layer(model, opts.layer)?;
    let pass = run(model, volume, class, ReluRule::Standard, Some(layer))?;
    let (act, grad) = pass.activation.as_ref().expect("activation requested");
    let cam = cam_from(layer, act, grad);
    let [nx, ny, nz] = volume.dims();
    let plane = nx * ny;
    let up = |to: &[usize]| match opts.upsampling {
        Upsampling::HalfPixel => upsample_linear(&cam.data, &cam.dims, to),
        Upsampling::ReceptiveField => {
            upsample_aligned(&cam.data, &cam.dims, to, &receptive_field_map(model.spec(), layer))
        }
    };
    Ok(match mode {
        CamMode::ThreeD => (up(&[nz, ny, nx]), SourceMode::Gradcam3d),
        CamMode::Replicate => {
            let map = up(&[ny, nx]);
            (map.repeat(nz), SourceMode::Gradcam2dReplicate)
        }
        CamMode::Slicegrad => {
            let map = up(&[ny, nx]);
            let g = pass.input_grad.data();
            let mut out = Vec::with_capacity(nz * plane);
            for z in 0..nz {
                let w = g[z * plane..(z + 1) * plane].iter().map(|v| v.abs() as f64).sum::<f64>() / plane as f64;
                out.extend(map.iter().map(|&m| m * w));
            }
            (out, SourceMode::Gradcam2dSlicegrad)
        }
    })
}

/// Absolute input gradient of the target logit under the guided ReLU rule,
/// in the volume's voxel order.
pub fn guided_backprop(model: &Model, volume: &BrainVolume, class: usize) -> Result<BrainVolume> {
    check(model, class)?;
    let pass = run(model, volume, class, ReluRule::Guided, None)?;
    let data = pass.input_grad.data().iter().map(|v| v.abs()).collect();
    Ok(BrainVolume::new(volume.grid.clone(), data)?)
}

/// Pointwise product of the Grad-CAM relevance (spread by `mode`) and the
/// guided-backpropagation saliency, renormalized.
pub fn guided_grad_cam(model: &Model, volume: &BrainVolume, class: usize, mode: CamMode) -> Result<Heatmap3D> {
    let (cam, _) = raw_relevance(model, volume, class, mode, CamOptions::default())?;
    let saliency = guided_backprop(model, volume, class)?;
    let raw: Vec<f64> = cam.iter().zip(saliency.data()).map(|(&c, &s)| c * s as f64).collect();
    Heatmap3D::normalized(volume.grid.clone(), &raw, class, SourceMode::GuidedGradcam)
}

/// Gray below `floor`, then yellow through red as relevance rises to 1.
pub fn colormap(relevance: f32, gray: u8, floor: f32) -> Rgb<u8> {
    if relevance <= floor || floor >= 1.0 {
        return Rgb([gray, gray, gray]);
    }
    let t = ((relevance - floor) / (1.0 - floor)).clamp(0.0, 1.0);
    Rgb([255, (255.0 * (1.0 - t)).round() as u8, 0])
}

/// Renders the axial slices `slices` side by side, anterior up. Voxels
/// below `floor` show the `background` intensity in gray.
pub fn render_strip(h: &Heatmap3D, background: Option<&BrainVolume>, slices: &[usize], floor: f32) -> Result<RgbImage> {
    let [nx, ny, nz] = h.dims();
    if let Some(z) = slices.iter().find(|&&z| z >= nz) {
        return Err(ExplainError::DimMismatch(format!("slice {z} of {nz}")));
    }
    if let Some(b) = background {
        if b.dims() != h.dims() {
            return Err(ExplainError::DimMismatch(format!("background {:?} for {:?}", b.dims(), h.dims())));
        }
    }
    let (lo, hi) = background.map_or((0.0, 1.0), |b| {
        b.data().iter().fold((f32::INFINITY, f32::NEG_INFINITY), |(l, u), &v| (l.min(v), u.max(v)))
    });
    let span = if hi > lo { hi - lo } else { 1.0 };
    let mut img = RgbImage::new((nx * slices.len().max(1)) as u32, ny as u32);
    for (k, &z) in slices.iter().enumerate() {
        for y in 0..ny {
            for x in 0..nx {
                let i = x + nx * (y + ny * z);
                let gray = background.map_or(0, |b| (255.0 * (b.data()[i] - lo) / span).round() as u8);
                img.put_pixel((k * nx + x) as u32, (ny - 1 - y) as u32, colormap(h.data[i], gray, floor));
            }
        }
    }
    Ok(img)
}

pub fn save_png(img: &RgbImage, path: &Path) -> Result<()> {
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| ExplainError::Image(e.to_string()))
}
