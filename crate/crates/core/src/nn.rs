//! Declarative architecture specifications and the models built from them.
//!
//! A 2D model reads a volume as `(C, H, W) = (nz, ny, nx)`: axial slices
//! become input channels. A 3D model reads `(1, D, H, W) = (1, nz, ny, nx)`.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{conv_output_extent, io, BatchStats, Graph, Scalar, Tensor, TensorError, Var};
use crate::volio::BrainVolume;

#[derive(Debug, Error)]
pub enum NnError {
    #[error("layer {layer} ({kind}): {detail}")]
    ShapeUnderflow {
        layer: usize,
        kind: &'static str,
        detail: String,
    },
    #[error("invalid architecture: {0}")]
    InvalidSpec(String),
    #[error("input dims mismatch: {0}")]
    DimMismatch(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = NnError> = std::result::Result<T, E>;

fn default_true() -> bool {
    true
}

fn default_momentum() -> f64 {
    0.1
}

fn default_eps() -> f64 {
    1e-5
}

fn default_classes() -> usize {
    2
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum LayerSpec {
    Conv2d {
        filters: usize,
        kernel: usize,
        #[serde(default = "one")]
        stride: usize,
        #[serde(default)]
        padding: usize,
        #[serde(default = "default_true")]
        bias: bool,
    },
    Conv3d {
        filters: usize,
        kernel: usize,
        #[serde(default = "one")]
        stride: usize,
        #[serde(default)]
        padding: usize,
        #[serde(default = "default_true")]
        bias: bool,
    },
    #[serde(rename = "batchnorm")]
    BatchNorm {
        #[serde(default = "default_momentum")]
        momentum: f64,
        #[serde(default = "default_eps")]
        eps: f64,
    },
    Relu,
    /// Window and stride per spatial axis (2 entries for 2D, 3 for 3D).
    MaxPool {
        window: Vec<usize>,
        stride: Vec<usize>,
    },
    Flatten,
    Dense {
        units: usize,
        #[serde(default = "default_true")]
        bias: bool,
    },
    /// Drop probability in `[0, 1)`; 0 disables the layer.
    Dropout {
        p: f64,
    },
}

fn one() -> usize {
    1
}

impl LayerSpec {
    pub fn conv2d(filters: usize, kernel: usize, stride: usize, padding: usize) -> Self {
        LayerSpec::Conv2d {
            filters,
            kernel,
            stride,
            padding,
            bias: true,
        }
    }

    pub fn batchnorm() -> Self {
        LayerSpec::BatchNorm {
            momentum: default_momentum(),
            eps: default_eps(),
        }
    }

    pub fn maxpool2d(window: usize, stride: usize) -> Self {
        LayerSpec::MaxPool {
            window: vec![window; 2],
            stride: vec![stride; 2],
        }
    }

    pub fn dense(units: usize) -> Self {
        LayerSpec::Dense { units, bias: true }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            LayerSpec::Conv2d { .. } => "conv2d",
            LayerSpec::Conv3d { .. } => "conv3d",
            LayerSpec::BatchNorm { .. } => "batchnorm",
            LayerSpec::Relu => "relu",
            LayerSpec::MaxPool { .. } => "maxpool",
            LayerSpec::Flatten => "flatten",
            LayerSpec::Dense { .. } => "dense",
            LayerSpec::Dropout { .. } => "dropout",
        }
    }

    pub fn is_conv(&self) -> bool {
        matches!(self, LayerSpec::Conv2d { .. } | LayerSpec::Conv3d { .. })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchitectureSpec {
    /// `(C, H, W)` for 2D models, `(C, D, H, W)` for 3D models.
    pub input_shape: Vec<usize>,
    #[serde(default = "default_classes")]
    pub classes: usize,
    pub layers: Vec<LayerSpec>,
}

/// Parameter tensor slot of a layer.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSlot {
    pub name: String,
    pub shape: Vec<usize>,
}

impl ArchitectureSpec {
    /// Spatial rank (2 or 3) implied by the input shape.
    pub fn spatial_rank(&self) -> usize {
        self.input_shape.len().saturating_sub(1)
    }

    pub fn is_3d(&self) -> bool {
        self.spatial_rank() == 3
    }

    /// Output shape of every layer (without the batch axis), checked
    /// statically.
    pub fn layer_shapes(&self) -> Result<Vec<Vec<usize>>> {
        let rank = self.spatial_rank();
        if !(rank == 2 || rank == 3) || self.input_shape.contains(&0) {
            return Err(NnError::InvalidSpec(format!(
                "input shape {:?} must be (C, H, W) or (C, D, H, W) with positive extents",
                self.input_shape
            )));
        }
        let mut shape = self.input_shape.clone();
        let mut out = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            let under = |detail: String| NnError::ShapeUnderflow {
                layer: i,
                kind: layer.kind(),
                detail,
            };
            let invalid = |detail: String| NnError::InvalidSpec(format!("layer {i} ({}): {detail}", layer.kind()));
            shape = match layer {
                LayerSpec::Conv2d {
                    filters,
                    kernel,
                    stride,
                    padding,
                    ..
                }
                | LayerSpec::Conv3d {
                    filters,
                    kernel,
                    stride,
                    padding,
                    ..
                } => {
                    let want = if matches!(layer, LayerSpec::Conv2d { .. }) { 3 } else { 4 };
                    if shape.len() != want {
                        return Err(invalid(format!("expects a rank-{want} input, got {shape:?}")));
                    }
                    if *filters == 0 || *kernel == 0 || *stride == 0 {
                        return Err(invalid("filters, kernel and stride must be positive".into()));
                    }
                    let mut next = vec![*filters];
                    for &e in &shape[1..] {
                        next.push(conv_output_extent(e, *kernel, *stride, *padding).ok_or_else(|| {
                            under(format!("kernel {kernel} stride {stride} padding {padding} on input {shape:?}"))
                        })?);
                    }
                    next
                }
                LayerSpec::MaxPool { window, stride } => {
                    if shape.len() < 3 || window.len() != shape.len() - 1 || stride.len() != window.len() {
                        return Err(invalid(format!(
                            "window {window:?} stride {stride:?} do not match input {shape:?}"
                        )));
                    }
                    if window.contains(&0) || stride.contains(&0) {
                        return Err(invalid("window and stride must be positive".into()));
                    }
                    let mut next = vec![shape[0]];
                    for (a, &e) in shape[1..].iter().enumerate() {
                        next.push(conv_output_extent(e, window[a], stride[a], 0).ok_or_else(|| {
                            under(format!("window {window:?} stride {stride:?} on input {shape:?}"))
                        })?);
                    }
                    next
                }
                LayerSpec::BatchNorm { momentum, eps } => {
                    if !(0.0..=1.0).contains(momentum) || !(*eps > 0.0) {
                        return Err(invalid(format!("momentum {momentum} eps {eps}")));
                    }
                    shape
                }
                LayerSpec::Relu => shape,
                LayerSpec::Flatten => vec![shape.iter().product()],
                LayerSpec::Dense { units, .. } => {
                    if shape.len() != 1 {
                        return Err(invalid(format!("expects a flat input, got {shape:?}")));
                    }
                    if *units == 0 {
                        return Err(invalid("units must be positive".into()));
                    }
                    vec![*units]
                }
                LayerSpec::Dropout { p } => {
                    if !(0.0..1.0).contains(p) {
                        return Err(invalid(format!("drop probability {p} outside [0, 1)")));
                    }
                    shape
                }
            };
            out.push(shape.clone());
        }
        match (self.layers.last(), out.last()) {
            (Some(LayerSpec::Dense { .. }), Some(s)) if s == &vec![self.classes] => Ok(out),
            _ if self.layers.is_empty() => Ok(out),
            _ => Err(NnError::InvalidSpec(format!(
                "architecture must end with a dense layer of {} units",
                self.classes
            ))),
        }
    }

    /// Trainable parameters and running-statistic buffers per layer.
    pub fn slots(&self) -> Result<(Vec<Vec<ParamSlot>>, Vec<Vec<ParamSlot>>)> {
        let shapes = self.layer_shapes()?;
        let mut params = Vec::with_capacity(self.layers.len());
        let mut buffers = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            let input = if i == 0 { &self.input_shape } else { &shapes[i - 1] };
            let slot = |suffix: &str, shape: Vec<usize>| ParamSlot {
                name: format!("layer{i}.{suffix}"),
                shape,
            };
            let mut p = Vec::new();
            let mut b = Vec::new();
            match layer {
                LayerSpec::Conv2d {
                    filters, kernel, bias, ..
                }
                | LayerSpec::Conv3d {
                    filters, kernel, bias, ..
                } => {
                    let mut w = vec![*filters, input[0]];
                    w.extend(std::iter::repeat_n(*kernel, input.len() - 1));
                    p.push(slot("weight", w));
                    if *bias {
                        p.push(slot("bias", vec![*filters]));
                    }
                }
                LayerSpec::BatchNorm { .. } => {
                    p.push(slot("gamma", vec![input[0]]));
                    p.push(slot("beta", vec![input[0]]));
                    b.push(slot("running_mean", vec![input[0]]));
                    b.push(slot("running_var", vec![input[0]]));
                }
                LayerSpec::Dense { units, bias } => {
                    p.push(slot("weight", vec![*units, input[0]]));
                    if *bias {
                        p.push(slot("bias", vec![*units]));
                    }
                }
                _ => {}
            }
            params.push(p);
            buffers.push(b);
        }
        Ok((params, buffers))
    }

    pub fn param_count(&self) -> Result<usize> {
        let (params, _) = self.slots()?;
        Ok(params.iter().flatten().map(|s| s.shape.iter().product::<usize>()).sum())
    }

    /// Index of the activation Grad-CAM reads for conv layer `conv`: the
    /// output of the batch-norm/ReLU run that follows it.
    pub fn rectified_output(&self, conv: usize) -> usize {
        let mut idx = conv;
        while let Some(next) = self.layers.get(idx + 1) {
            if matches!(next, LayerSpec::BatchNorm { .. } | LayerSpec::Relu) {
                idx += 1;
            } else {
                break;
            }
        }
        idx
    }

    pub fn last_conv(&self) -> Option<usize> {
        self.layers.iter().rposition(LayerSpec::is_conv)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let spec: Self = toml::from_str(text).map_err(|e| NnError::InvalidSpec(e.to_string()))?;
        spec.layer_shapes()?;
        Ok(spec)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("spec serializes")
    }
}

/// Knobs of the modified LeNet-5 topology.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Lenet5Config {
    pub input_shape: [usize; 3],
    pub filters: [usize; 2],
    pub kernel: usize,
    pub fc_units: usize,
    pub dropout: f64,
}

impl Lenet5Config {
    /// Reference configuration for `(60, 73, 60)` volumes: about 173k
    /// trainable parameters.
    pub fn reference() -> Self {
        Self {
            input_shape: [60, 73, 60],
            filters: [6, 14],
            kernel: 5,
            fc_units: 64,
            dropout: 0.5,
        }
    }
}

/// Two `[Conv2d -> BatchNorm -> ReLU -> MaxPool(2, 2)]` blocks followed by
/// `[Flatten -> Dense -> ReLU -> Dropout -> Dense(2)]`.
pub fn build_lenet5_modified(cfg: &Lenet5Config) -> Result<ArchitectureSpec> {
    let mut layers = Vec::new();
    for &f in &cfg.filters {
        layers.extend([
            LayerSpec::conv2d(f, cfg.kernel, 1, 0),
            LayerSpec::batchnorm(),
            LayerSpec::Relu,
            LayerSpec::maxpool2d(2, 2),
        ]);
    }
    layers.extend([LayerSpec::Flatten, LayerSpec::dense(cfg.fc_units), LayerSpec::Relu]);
    if cfg.dropout > 0.0 {
        layers.push(LayerSpec::Dropout { p: cfg.dropout });
    }
    layers.push(LayerSpec::dense(2));
    let spec = ArchitectureSpec {
        input_shape: cfg.input_shape.to_vec(),
        classes: 2,
        layers,
    };
    spec.layer_shapes()?;
    Ok(spec)
}

/// How [`to_3d`] lifts 2D pooling windows.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum PoolDepth {
    /// Window and stride of 1 along depth: `(w, w)` becomes `(1, w, w)`.
    #[default]
    Preserve,
    /// Cubic window: `(w, w)` becomes `(w, w, w)`.
    Cubed,
}

/// Lifts a 2D spec to 3D: input `(C, H, W)` becomes `(1, C, H, W)`, every
/// square conv kernel becomes a cube, and dense layers are kept.
pub fn to_3d(spec: &ArchitectureSpec, pool: PoolDepth) -> Result<ArchitectureSpec> {
    if spec.spatial_rank() != 2 {
        return Err(NnError::InvalidSpec(format!(
            "to_3d expects a 2D spec, got input {:?}",
            spec.input_shape
        )));
    }
    let mut input_shape = vec![1];
    input_shape.extend_from_slice(&spec.input_shape);
    let layers = spec
        .layers
        .iter()
        .map(|l| match l {
            LayerSpec::Conv2d {
                filters,
                kernel,
                stride,
                padding,
                bias,
            } => LayerSpec::Conv3d {
                filters: *filters,
                kernel: *kernel,
                stride: *stride,
                padding: *padding,
                bias: *bias,
            },
            LayerSpec::MaxPool { window, stride } => {
                let (dw, ds) = match pool {
                    PoolDepth::Preserve => (1, 1),
                    PoolDepth::Cubed => (window[0], stride[0]),
                };
                LayerSpec::MaxPool {
                    window: [&[dw][..], window].concat(),
                    stride: [&[ds][..], stride].concat(),
                }
            }
            other => other.clone(),
        })
        .collect();
    let out = ArchitectureSpec {
        input_shape,
        classes: spec.classes,
        layers,
    };
    out.layer_shapes()?;
    Ok(out)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Mode {
    Train,
    #[default]
    Eval,
}

/// Parameters and batch-norm running statistics of one architecture.
#[derive(Clone, Debug, PartialEq)]
pub struct Model<T: Scalar = f32> {
    spec: ArchitectureSpec,
    params: Vec<Tensor<T>>,
    param_names: Vec<String>,
    buffers: Vec<Tensor<T>>,
    buffer_names: Vec<String>,
    layer_params: Vec<std::ops::Range<usize>>,
    layer_buffers: Vec<std::ops::Range<usize>>,
    pub mode: Mode,
}

/// Recorded forward pass.
pub struct Forward {
    pub logits: Var,
    pub input: Var,
    /// Graph handles of the model parameters, in [`Model::params`] order.
    pub params: Vec<Var>,
    /// Output of every layer.
    pub activations: Vec<Var>,
    /// Batch statistics of every train-mode batch-norm layer.
    pub batch_stats: Vec<(usize, BatchStats)>,
}

impl<T: Scalar> Model<T> {
    fn from_fill(spec: &ArchitectureSpec, mut fill: impl FnMut(&ParamSlot) -> Tensor<T>) -> Result<Self> {
        let (pslots, bslots) = spec.slots()?;
        let mut m = Model {
            spec: spec.clone(),
            params: Vec::new(),
            param_names: Vec::new(),
            buffers: Vec::new(),
            buffer_names: Vec::new(),
            layer_params: Vec::new(),
            layer_buffers: Vec::new(),
            mode: Mode::Eval,
        };
        for (ps, bs) in pslots.iter().zip(&bslots) {
            let start = m.params.len();
            for s in ps {
                m.params.push(fill(s));
                m.param_names.push(s.name.clone());
            }
            m.layer_params.push(start..m.params.len());
            let start = m.buffers.len();
            for s in bs {
                let v = if s.name.ends_with("running_var") { T::one() } else { T::zero() };
                m.buffers.push(Tensor::full(&s.shape, v));
                m.buffer_names.push(s.name.clone());
            }
            m.layer_buffers.push(start..m.buffers.len());
        }
        Ok(m)
    }

    /// Glorot-uniform weights, zero biases, unit batch-norm scale.
    pub fn new(spec: &ArchitectureSpec, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::from_fill(spec, |slot| {
            let shape = &slot.shape;
            if slot.name.ends_with("gamma") {
                Tensor::full(shape, T::one())
            } else if slot.name.ends_with("weight") {
                let receptive: usize = shape[2..].iter().product();
                let fan_in = shape[1] * receptive;
                let fan_out = shape[0] * receptive;
                let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
                let dist = Uniform::new_inclusive(-limit, limit).expect("finite limit");
                Tensor::from_fn(shape, |_| T::from_f64_lossy(dist.sample(&mut rng)))
            } else {
                Tensor::zeros(shape)
            }
        })
    }

    /// All parameters zero, including batch-norm scales.
    pub fn zeros(spec: &ArchitectureSpec) -> Result<Self> {
        Self::from_fill(spec, |slot| Tensor::zeros(&slot.shape))
    }

    pub fn spec(&self) -> &ArchitectureSpec {
        &self.spec
    }

    pub fn params(&self) -> &[Tensor<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.params
    }

    pub fn param_names(&self) -> &[String] {
        &self.param_names
    }

    pub fn buffers(&self) -> &[Tensor<T>] {
        &self.buffers
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(Tensor::numel).sum()
    }

    /// Tensor by its `layer{i}.{kind}` name, among parameters and buffers.
    pub fn named(&self, name: &str) -> Option<&Tensor<T>> {
        self.param_names
            .iter()
            .position(|n| n == name)
            .map(|i| &self.params[i])
            .or_else(|| self.buffer_names.iter().position(|n| n == name).map(|i| &self.buffers[i]))
    }

    pub fn named_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        if let Some(i) = self.param_names.iter().position(|n| n == name) {
            return Some(&mut self.params[i]);
        }
        let i = self.buffer_names.iter().position(|n| n == name)?;
        Some(&mut self.buffers[i])
    }

    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            spec: self.spec.clone(),
            params: self.params.iter().map(Tensor::cast).collect(),
            param_names: self.param_names.clone(),
            buffers: self.buffers.iter().map(Tensor::cast).collect(),
            buffer_names: self.buffer_names.clone(),
            layer_params: self.layer_params.clone(),
            layer_buffers: self.layer_buffers.clone(),
            mode: self.mode,
        }
    }

    /// Shape of a batch of `n` inputs.
    pub fn batch_shape(&self, n: usize) -> Vec<usize> {
        let mut s = vec![n];
        s.extend_from_slice(&self.spec.input_shape);
        s
    }

    /// Records the forward pass of `input` (`[N, ...input_shape]`) in `g`.
    /// Parameters enter the graph as trainable leaves when `param_grads`
    /// is set and as constants otherwise. `dropout_seed` seeds the masks of
    /// train-mode dropout layers.
    pub fn forward(&self, g: &mut Graph<T>, input: Var, param_grads: bool, dropout_seed: u64) -> Result<Forward> {
        let xs = g.shape(input);
        if xs.len() != self.spec.input_shape.len() + 1 || xs[1..] != self.spec.input_shape[..] {
            return Err(NnError::DimMismatch(format!(
                "input {:?} for spec input {:?}",
                &xs[1..],
                self.spec.input_shape
            )));
        }
        let params: Vec<Var> = self.params.iter().map(|p| g.leaf(p.clone(), param_grads)).collect();
        let mut activations = Vec::with_capacity(self.spec.layers.len());
        let mut batch_stats = Vec::new();
        let mut h = input;
        for (i, layer) in self.spec.layers.iter().enumerate() {
            let p = &params[self.layer_params[i].clone()];
            h = match layer {
                LayerSpec::Conv2d { stride, padding, .. } => g.conv2d(h, p[0], p.get(1).copied(), *stride, *padding)?,
                LayerSpec::Conv3d { stride, padding, .. } => g.conv3d(h, p[0], p.get(1).copied(), [*stride; 3], [*padding; 3])?,
                LayerSpec::BatchNorm { eps, .. } => match self.mode {
                    Mode::Train => {
                        let (y, stats) = g.batchnorm_train(h, p[0], p[1], *eps)?;
                        batch_stats.push((i, stats));
                        y
                    }
                    Mode::Eval => {
                        let b = &self.buffers[self.layer_buffers[i].clone()];
                        g.batchnorm_eval(h, p[0], p[1], &b[0], &b[1], *eps)?
                    }
                },
                LayerSpec::Relu => g.relu(h),
                LayerSpec::MaxPool { window, stride } => g.maxpool(h, window, stride)?,
                LayerSpec::Flatten => g.flatten(h)?,
                LayerSpec::Dense { .. } => g.dense(h, p[0], p.get(1).copied())?,
                LayerSpec::Dropout { p: prob } => {
                    if self.mode == Mode::Train && *prob > 0.0 {
                        g.dropout(h, *prob, dropout_seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(i as u64))?
                    } else {
                        h
                    }
                }
            };
            activations.push(h);
        }
        Ok(Forward {
            logits: h,
            input,
            params,
            activations,
            batch_stats,
        })
    }

    /// Folds train-mode batch statistics into the running estimates:
    /// `running = (1 - momentum) * running + momentum * batch`.
    pub fn update_running_stats(&mut self, stats: &[(usize, BatchStats)]) {
        for (layer, s) in stats {
            let LayerSpec::BatchNorm { momentum, .. } = self.spec.layers[*layer] else {
                continue;
            };
            let r = self.layer_buffers[*layer].clone();
            let (mean, var) = self.buffers[r].split_at_mut(1);
            for (dst, src) in [(&mut mean[0], &s.mean), (&mut var[0], &s.var)] {
                for (d, &b) in dst.data_mut().iter_mut().zip(src) {
                    *d = T::from_f64_lossy((1.0 - momentum) * d.as_f64() + momentum * b);
                }
            }
        }
    }

    /// Raw logits of a batch, `[N, classes]`, in the model's current mode.
    pub fn logits(&self, batch: Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let x = g.constant(batch);
        let f = self.forward(&mut g, x, false, 0)?;
        Ok(g.value(f.logits).clone())
    }
}

/// Stacks volumes into a `[N, ...input_shape]` batch for `spec`.
pub fn batch_from_volumes<T: Scalar>(spec: &ArchitectureSpec, volumes: &[&BrainVolume]) -> Result<Tensor<T>> {
    let mut data = Vec::new();
    for v in volumes {
        let [nx, ny, nz] = v.dims();
        let expect: Vec<usize> = if spec.is_3d() { vec![1, nz, ny, nx] } else { vec![nz, ny, nx] };
        if expect != spec.input_shape {
            return Err(NnError::DimMismatch(format!(
                "volume dims {:?} read as {expect:?}, spec expects {:?}",
                v.dims(),
                spec.input_shape
            )));
        }
        data.extend(v.data().iter().map(|&x| T::from_f64_lossy(x as f64)));
    }
    let mut shape = vec![volumes.len()];
    shape.extend_from_slice(&spec.input_shape);
    Ok(Tensor::new(shape, data)?)
}

/// Two raw logits (class 0 typical, class 1 dyslexic) for one volume.
pub fn forward_logits(model: &Model, volume: &BrainVolume) -> Result<[f32; 2]> {
    let x = batch_from_volumes(model.spec(), &[volume])?;
    let l = model.logits(x)?;
    let d = l.data();
    if d.len() != 2 {
        return Err(NnError::InvalidSpec(format!("{} logits, expected 2", d.len())));
    }
    Ok([d[0], d[1]])
}

pub const SPEC_FILE: &str = "spec.toml";
pub const PARAMS_FILE: &str = "params.bin";

/// Writes `spec.toml` and `params.bin` into `dir`.
pub fn save_checkpoint(model: &Model, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join(SPEC_FILE), model.spec.to_toml())?;
    let named: Vec<(String, Tensor)> = model
        .param_names
        .iter()
        .cloned()
        .zip(model.params.iter().cloned())
        .chain(model.buffer_names.iter().cloned().zip(model.buffers.iter().cloned()))
        .collect();
    let file = std::io::BufWriter::new(std::fs::File::create(dir.join(PARAMS_FILE))?);
    io::write_named(file, &named)?;
    Ok(())
}

pub fn load_checkpoint(dir: &Path) -> Result<Model> {
    let spec = ArchitectureSpec::from_toml(&std::fs::read_to_string(dir.join(SPEC_FILE))?)?;
    let mut model = Model::zeros(&spec)?;
    let named = io::read_named(std::fs::File::open(dir.join(PARAMS_FILE))?)?;
    let expected = model.param_names.len() + model.buffer_names.len();
    if named.len() != expected {
        return Err(NnError::Checkpoint(format!("{} tensors, expected {expected}", named.len())));
    }
    for (name, t) in named {
        let slot = model
            .named_mut(&name)
            .ok_or_else(|| NnError::Checkpoint(format!("unexpected tensor {name}")))?;
        if slot.shape() != t.shape() {
            return Err(NnError::Checkpoint(format!(
                "{name} has shape {:?}, expected {:?}",
                t.shape(),
                slot.shape()
            )));
        }
        *slot = t;
    }
    Ok(model)
}
