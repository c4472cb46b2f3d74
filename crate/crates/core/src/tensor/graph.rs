use super::conv::{self, ConvAlgo, ConvGeometry};
use super::norm::{self, BatchStats};
use super::ops;
use super::pool::{self, PoolGeometry};
use super::{shape_err, Result, Scalar, Tensor, TensorError};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// How rectified-linear units propagate gradients during backward.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum ReluRule {
    /// Pass the gradient where the forward input was positive.
    #[default]
    Standard,
    /// Additionally drop negative incoming gradients (guided backpropagation).
    Guided,
}

enum Op<T> {
    Leaf,
    Conv {
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        geom: ConvGeometry,
        algo: ConvAlgo,
    },
    MaxPool {
        input: Var,
        argmax: Vec<usize>,
    },
    BatchNormTrain {
        input: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    BatchNormEval {
        input: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<T>,
        inv_std: Vec<T>,
    },
    Relu {
        input: Var,
    },
    Dense {
        input: Var,
        weight: Var,
        bias: Option<Var>,
    },
    Dropout {
        input: Var,
        mask: Vec<T>,
    },
    Reshape {
        input: Var,
    },
    SoftmaxCrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<T>,
    },
    Add {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Sum {
        input: Var,
    },
    Scale {
        input: Var,
        factor: T,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
    retain: bool,
}

/// Append-only record of primitive applications. Node ids are assigned in
/// creation order, which is a topological order of the computation.
pub struct Graph<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
    algo: ConvAlgo,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self::with_algo(ConvAlgo::default())
    }

    pub fn with_algo(algo: ConvAlgo) -> Self {
        Self { nodes: Vec::new(), algo }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            retain: false,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Option<Var>]) -> bool {
        vars.iter().flatten().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Keep the gradient of an interior node after backward.
    pub fn retain_grad(&mut self, v: Var) {
        self.nodes[v.0].retain = true;
    }

    /// Cross-correlation over 2 (`kernel` rank 4) or 3 (`kernel` rank 5)
    /// spatial axes; `input` is `[N, C, (D,) H, W]`.
    pub fn conv(
        &mut self,
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        stride: &[usize],
        padding: &[usize],
    ) -> Result<Var> {
        let kshape = self.shape(kernel).to_vec();
        let xshape = self.shape(input).to_vec();
        let rank = kshape.len().saturating_sub(2);
        if !(rank == 2 || rank == 3) || xshape.len() != rank + 2 || stride.len() != rank || padding.len() != rank {
            return Err(shape_err(
                "conv",
                format!("input {xshape:?}, kernel {kshape:?}, stride {stride:?}, padding {padding:?}"),
            ));
        }
        if xshape[1] != kshape[1] {
            return Err(shape_err(
                "conv",
                format!("input has {} channels, kernel expects {}", xshape[1], kshape[1]),
            ));
        }
        let lift = |v: &[usize], fill: usize| -> [usize; 3] {
            if rank == 2 {
                [fill, v[0], v[1]]
            } else {
                [v[0], v[1], v[2]]
            }
        };
        let geom = ConvGeometry::new(
            xshape[1],
            lift(&xshape[2..], 1),
            kshape[0],
            lift(&kshape[2..], 1),
            lift(stride, 1),
            lift(padding, 0),
        )?;
        let batch = xshape[0];
        let bias_vals = bias.map(|b| self.value(b).data());
        conv::check_operands(
            &geom,
            batch,
            self.value(input).numel(),
            self.value(kernel).numel(),
            bias_vals.map(|b| b.len()),
        )?;
        let out = conv::forward(&geom, self.algo, batch, self.value(input).data(), self.value(kernel).data(), bias_vals);
        let mut shape = vec![batch, geom.out_channels];
        shape.extend_from_slice(if rank == 2 { &geom.output[1..] } else { &geom.output[..] });
        let rg = self.any_grad(&[Some(input), Some(kernel), bias]);
        let algo = self.algo;
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::Conv {
                input,
                kernel,
                bias,
                geom,
                algo,
            },
            rg,
        ))
    }

    pub fn conv2d(&mut self, input: Var, kernel: Var, bias: Option<Var>, stride: usize, padding: usize) -> Result<Var> {
        self.conv(input, kernel, bias, &[stride; 2], &[padding; 2])
    }

    pub fn conv3d(
        &mut self,
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        stride: [usize; 3],
        padding: [usize; 3],
    ) -> Result<Var> {
        self.conv(input, kernel, bias, &stride, &padding)
    }

    /// Max pooling over the trailing 2 or 3 axes (`window.len()`).
    pub fn maxpool(&mut self, input: Var, window: &[usize], stride: &[usize]) -> Result<Var> {
        let xshape = self.shape(input).to_vec();
        let rank = window.len();
        if !(rank == 2 || rank == 3) || stride.len() != rank || xshape.len() != rank + 2 {
            return Err(shape_err(
                "maxpool",
                format!("input {xshape:?}, window {window:?}, stride {stride:?}"),
            ));
        }
        let lift = |v: &[usize]| -> [usize; 3] {
            if rank == 2 {
                [1, v[0], v[1]]
            } else {
                [v[0], v[1], v[2]]
            }
        };
        let geom = PoolGeometry::new(xshape[1], lift(&xshape[2..]), lift(window), lift(stride))?;
        let (out, argmax) = pool::forward(&geom, xshape[0], self.value(input).data());
        let mut shape = vec![xshape[0], xshape[1]];
        shape.extend_from_slice(if rank == 2 { &geom.output[1..] } else { &geom.output[..] });
        let rg = self.requires_grad(input);
        Ok(self.push(Tensor::new(shape, out)?, Op::MaxPool { input, argmax }, rg))
    }

    fn check_channel_params(&self, input: Var, params: &[Var]) -> Result<usize> {
        let shape = self.shape(input);
        if shape.len() < 2 {
            return Err(shape_err("batchnorm", format!("input {shape:?} lacks a channel axis")));
        }
        let c = shape[1];
        for &p in params {
            if self.value(p).numel() != c {
                return Err(shape_err(
                    "batchnorm",
                    format!("parameter of length {} for {c} channels", self.value(p).numel()),
                ));
            }
        }
        Ok(c)
    }

    /// Batch normalization with batch statistics over `[N, C, ...]`.
    pub fn batchnorm_train(&mut self, input: Var, gamma: Var, beta: Var, eps: f64) -> Result<(Var, BatchStats)> {
        self.check_channel_params(input, &[gamma, beta])?;
        let shape = self.shape(input).to_vec();
        let out = norm::train_forward(
            &shape,
            self.value(input).data(),
            self.value(gamma).data(),
            self.value(beta).data(),
            eps,
        )?;
        let rg = self.any_grad(&[Some(input), Some(gamma), Some(beta)]);
        let v = self.push(
            Tensor::new(shape, out.y)?,
            Op::BatchNormTrain {
                input,
                gamma,
                beta,
                xhat: out.xhat,
                inv_std: out.inv_std,
            },
            rg,
        );
        Ok((v, out.stats))
    }

    /// Batch normalization with fixed (running) statistics.
    pub fn batchnorm_eval(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        mean: &Tensor<T>,
        var: &Tensor<T>,
        eps: f64,
    ) -> Result<Var> {
        let c = self.check_channel_params(input, &[gamma, beta])?;
        if mean.numel() != c || var.numel() != c {
            return Err(shape_err("batchnorm", "running statistics do not match channel count"));
        }
        let inv_std: Vec<T> = var
            .data()
            .iter()
            .map(|v| T::from_f64_lossy(1.0 / (v.as_f64() + eps).sqrt()))
            .collect();
        let shape = self.shape(input).to_vec();
        let y = norm::eval_forward(
            &shape,
            self.value(input).data(),
            self.value(gamma).data(),
            self.value(beta).data(),
            mean.data(),
            &inv_std,
        );
        let rg = self.any_grad(&[Some(input), Some(gamma), Some(beta)]);
        Ok(self.push(
            Tensor::new(shape, y)?,
            Op::BatchNormEval {
                input,
                gamma,
                beta,
                mean: mean.data().to_vec(),
                inv_std,
            },
            rg,
        ))
    }

    pub fn relu(&mut self, input: Var) -> Var {
        let out = self.value(input).map(|v| if v > T::zero() { v } else { T::zero() });
        let rg = self.requires_grad(input);
        self.push(out, Op::Relu { input }, rg)
    }

    /// Affine map of `[N, in]` by `weight: [out, in]` and `bias: [out]`.
    pub fn dense(&mut self, input: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let xs = self.shape(input).to_vec();
        let ws = self.shape(weight).to_vec();
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] {
            return Err(shape_err("dense", format!("input {xs:?}, weight {ws:?}")));
        }
        if let Some(b) = bias {
            if self.value(b).numel() != ws[0] {
                return Err(shape_err("dense", format!("bias length {} for {} units", self.value(b).numel(), ws[0])));
            }
        }
        let y = ops::dense_forward(
            xs[0],
            xs[1],
            ws[0],
            self.value(input).data(),
            self.value(weight).data(),
            bias.map(|b| self.value(b).data()),
        );
        let rg = self.any_grad(&[Some(input), Some(weight), bias]);
        Ok(self.push(Tensor::new(vec![xs[0], ws[0]], y)?, Op::Dense { input, weight, bias }, rg))
    }

    /// Inverted dropout; `p = 0` records an identity.
    pub fn dropout(&mut self, input: Var, p: f64, seed: u64) -> Result<Var> {
        let mask = ops::dropout_mask::<T>(self.value(input).numel(), p, seed)?;
        let x = self.value(input);
        let data = x.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let out = Tensor::new(x.shape().to_vec(), data)?;
        let rg = self.requires_grad(input);
        Ok(self.push(out, Op::Dropout { input, mask }, rg))
    }

    pub fn reshape(&mut self, input: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(input).clone().reshape(shape)?;
        let rg = self.requires_grad(input);
        Ok(self.push(out, Op::Reshape { input }, rg))
    }

    /// Collapses every axis after the first.
    pub fn flatten(&mut self, input: Var) -> Result<Var> {
        let shape = self.shape(input);
        let n = *shape.first().ok_or_else(|| shape_err("flatten", "scalar input"))?;
        let rest = shape[1..].iter().product();
        self.reshape(input, &[n, rest])
    }

    /// Mean over the batch of `-log softmax(logits)[label]`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || s[0] != labels.len() || labels.iter().any(|&l| l >= s[1]) {
            return Err(shape_err(
                "softmax_cross_entropy",
                format!("logits {s:?} with {} labels", labels.len()),
            ));
        }
        let (loss, probs) = ops::softmax_cross_entropy(s[0], s[1], self.value(logits).data(), labels);
        let rg = self.requires_grad(logits);
        Ok(self.push(
            Tensor::scalar(T::from_f64_lossy(loss)),
            Op::SoftmaxCrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            rg,
        ))
    }

    fn binary(&self, a: Var, b: Var, op: &'static str, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(op, format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::new(self.shape(a).to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, "add", |x, y| x + y)?;
        let rg = self.any_grad(&[Some(a), Some(b)]);
        Ok(self.push(out, Op::Add { a, b }, rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, "mul", |x, y| x * y)?;
        let rg = self.any_grad(&[Some(a), Some(b)]);
        Ok(self.push(out, Op::Mul { a, b }, rg))
    }

    pub fn sum(&mut self, input: Var) -> Var {
        let s = self.value(input).sum_f64();
        let rg = self.requires_grad(input);
        self.push(Tensor::scalar(T::from_f64_lossy(s)), Op::Sum { input }, rg)
    }

    pub fn scale(&mut self, input: Var, factor: T) -> Var {
        let out = self.value(input).map(|v| v * factor);
        let rg = self.requires_grad(input);
        self.push(out, Op::Scale { input, factor }, rg)
    }

    pub fn mean(&mut self, input: Var) -> Var {
        let n = self.value(input).numel().max(1);
        let s = self.sum(input);
        self.scale(s, T::one() / T::from_usize(n).expect("count fits"))
    }

    /// Gradients of a scalar output with respect to every leaf that requires
    /// them.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let value = self.value(loss);
        if value.numel() != 1 {
            return Err(TensorError::NotScalar(value.shape().to_vec()));
        }
        let seed = Tensor::full(value.shape(), T::one());
        self.backward_from(loss, seed, ReluRule::Standard)
    }

    /// Reverse pass starting at `output` with an explicit upstream gradient,
    /// e.g. a one-hot vector over logits.
    pub fn backward_from(&self, output: Var, seed: Tensor<T>, rule: ReluRule) -> Result<Gradients<T>> {
        if seed.shape() != self.shape(output) {
            return Err(shape_err(
                "backward",
                format!("seed {:?} for output {:?}", seed.shape(), self.shape(output)),
            ));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.nodes[output.0].requires_grad {
            grads[output.0] = Some(seed);
        }
        for id in (0..=output.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            self.propagate(node, &g, rule, &mut grads)?;
            let keep = matches!(node.op, Op::Leaf) || node.retain;
            if keep {
                grads[id] = Some(g);
            }
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], target: Var, g: Tensor<T>) {
        if !self.nodes[target.0].requires_grad {
            return;
        }
        match &mut grads[target.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn like(&self, v: Var, data: Vec<T>) -> Tensor<T> {
        Tensor::new(self.shape(v).to_vec(), data).expect("gradient shape matches its node")
    }

    fn propagate(&self, node: &Node<T>, g: &Tensor<T>, rule: ReluRule, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        match &node.op {
            Op::Leaf => {}
            Op::Conv {
                input,
                kernel,
                bias,
                geom,
                algo,
            } => {
                let need = [self.wants(*input), self.wants(*kernel), bias.is_some_and(|b| self.wants(b))];
                let out = conv::backward(
                    geom,
                    *algo,
                    self.shape(*input)[0],
                    self.value(*input).data(),
                    self.value(*kernel).data(),
                    g.data(),
                    need,
                );
                if let Some(gx) = out.input {
                    self.accumulate(grads, *input, self.like(*input, gx));
                }
                if let Some(gw) = out.kernel {
                    self.accumulate(grads, *kernel, self.like(*kernel, gw));
                }
                if let (Some(b), Some(gb)) = (bias, out.bias) {
                    self.accumulate(grads, *b, self.like(*b, gb));
                }
            }
            Op::MaxPool { input, argmax } => {
                let gx = pool::backward(self.value(*input).numel(), argmax, g.data());
                self.accumulate(grads, *input, self.like(*input, gx));
            }
            Op::BatchNormTrain {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let (dx, dg, db) = norm::train_backward(
                    self.shape(*input),
                    g.data(),
                    xhat,
                    inv_std,
                    self.value(*gamma).data(),
                );
                self.accumulate(grads, *input, self.like(*input, dx));
                self.accumulate(grads, *gamma, self.like(*gamma, dg));
                self.accumulate(grads, *beta, self.like(*beta, db));
            }
            Op::BatchNormEval {
                input,
                gamma,
                beta,
                mean,
                inv_std,
            } => {
                let (dx, dg, db) = norm::eval_backward(
                    self.shape(*input),
                    g.data(),
                    self.value(*input).data(),
                    self.value(*gamma).data(),
                    mean,
                    inv_std,
                );
                self.accumulate(grads, *input, self.like(*input, dx));
                self.accumulate(grads, *gamma, self.like(*gamma, dg));
                self.accumulate(grads, *beta, self.like(*beta, db));
            }
            Op::Relu { input } => {
                let x = self.value(*input).data();
                let gx = x
                    .iter()
                    .zip(g.data())
                    .map(|(&xv, &gv)| {
                        let pass = xv > T::zero() && (rule == ReluRule::Standard || gv > T::zero());
                        if pass {
                            gv
                        } else {
                            T::zero()
                        }
                    })
                    .collect();
                self.accumulate(grads, *input, self.like(*input, gx));
            }
            Op::Dense { input, weight, bias } => {
                let xs = self.shape(*input);
                let (n, fan_in) = (xs[0], xs[1]);
                let fan_out = self.shape(*weight)[0];
                if self.wants(*input) {
                    let mut gx = vec![T::zero(); n * fan_in];
                    T::gemm(n, fan_out, fan_in, g.data(), false, self.value(*weight).data(), false, &mut gx, false);
                    self.accumulate(grads, *input, self.like(*input, gx));
                }
                if self.wants(*weight) {
                    let mut gw = vec![T::zero(); fan_out * fan_in];
                    T::gemm(fan_out, n, fan_in, g.data(), true, self.value(*input).data(), false, &mut gw, false);
                    self.accumulate(grads, *weight, self.like(*weight, gw));
                }
                if let Some(b) = bias {
                    let mut gb = vec![0.0f64; fan_out];
                    for row in g.data().chunks(fan_out) {
                        gb.iter_mut().zip(row).for_each(|(a, v)| *a += v.as_f64());
                    }
                    let gb = gb.into_iter().map(T::from_f64_lossy).collect();
                    self.accumulate(grads, *b, self.like(*b, gb));
                }
            }
            Op::Dropout { input, mask } => {
                let gx = g.data().iter().zip(mask).map(|(&a, &m)| a * m).collect();
                self.accumulate(grads, *input, self.like(*input, gx));
            }
            Op::Reshape { input } => {
                self.accumulate(grads, *input, self.like(*input, g.data().to_vec()));
            }
            Op::SoftmaxCrossEntropy { logits, labels, probs } => {
                let upstream = g.item()?;
                let classes = self.shape(*logits)[1];
                let scale = upstream / T::from_usize(labels.len()).expect("batch fits");
                let mut gl: Vec<T> = probs.iter().map(|&p| p * scale).collect();
                for (n, &l) in labels.iter().enumerate() {
                    gl[n * classes + l] = gl[n * classes + l] - scale;
                }
                self.accumulate(grads, *logits, self.like(*logits, gl));
            }
            Op::Add { a, b } => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Mul { a, b } => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if self.wants(*a) {
                    let ga = g.data().iter().zip(bv).map(|(&x, &y)| x * y).collect();
                    self.accumulate(grads, *a, self.like(*a, ga));
                }
                if self.wants(*b) {
                    let gb = g.data().iter().zip(av).map(|(&x, &y)| x * y).collect();
                    self.accumulate(grads, *b, self.like(*b, gb));
                }
            }
            Op::Sum { input } => {
                let up = g.item()?;
                self.accumulate(grads, *input, Tensor::full(self.shape(*input), up));
            }
            Op::Scale { input, factor } => {
                self.accumulate(grads, *input, g.map(|v| v * *factor));
            }
        }
        Ok(())
    }
}

/// Result of a reverse pass: gradients of leaves that require them and of
/// interior nodes marked with [`Graph::retain_grad`].
pub struct Gradients<T: Scalar = f32> {
    grads: Vec<Option<Tensor<T>>>,
    shapes: Vec<Vec<usize>>,
}

/// A gradient that may be identically zero because its tensor was not
/// reachable from the differentiated output.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradient<T: Scalar = f32> {
    pub tensor: Tensor<T>,
    pub connected: bool,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Fails with [`TensorError::DisconnectedTensor`] when no gradient
    /// reached `v`.
    pub fn wrt(&self, v: Var) -> Result<&Tensor<T>> {
        self.get(v).ok_or(TensorError::DisconnectedTensor)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }

    pub fn grad_or_zero(&self, v: Var) -> Gradient<T> {
        match self.get(v) {
            Some(t) => Gradient {
                tensor: t.clone(),
                connected: true,
            },
            None => Gradient {
                tensor: Tensor::zeros(&self.shapes[v.0]),
                connected: false,
            },
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn sum_gradient_is_ones() {
        let mut g = Graph::<f64>::new();
        let x = g.param(t(&[2, 3], &[1.0, -2.0, 3.0, 0.5, 0.0, 7.0]));
        let s = g.sum(x);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.wrt(x).unwrap().data(), &[1.0; 6]);
    }

    #[test]
    fn product_rule() {
        let mut g = Graph::<f64>::new();
        let x = g.param(t(&[], &[2.0]));
        let y = g.param(t(&[], &[3.0]));
        let p = g.mul(x, y).unwrap();
        let grads = g.backward(p).unwrap();
        assert_eq!(grads.wrt(x).unwrap().item().unwrap(), 3.0);
        assert_eq!(grads.wrt(y).unwrap().item().unwrap(), 2.0);
    }

    #[test]
    fn relu_values() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::new(vec![2], vec![-1.0, 2.0]).unwrap());
        let y = g.relu(x);
        assert_eq!(g.value(y).data(), &[0.0, 2.0]);
    }

    #[test]
    fn disconnected_tensor_is_flagged_zero() {
        let mut g = Graph::<f64>::new();
        let x = g.param(t(&[2], &[1.0, 2.0]));
        let unused = g.param(t(&[3], &[1.0, 2.0, 3.0]));
        let s = g.sum(x);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.wrt(unused), Err(TensorError::DisconnectedTensor));
        let z = grads.grad_or_zero(unused);
        assert!(!z.connected);
        assert_eq!(z.tensor, Tensor::zeros(&[3]));
    }

    #[test]
    fn shared_input_accumulates() {
        // d/dx sum(x * x) = 2x
        let mut g = Graph::<f64>::new();
        let x = g.param(t(&[3], &[1.0, -2.0, 0.5]));
        let sq = g.mul(x, x).unwrap();
        let s = g.sum(sq);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.wrt(x).unwrap().data(), &[2.0, -4.0, 1.0]);
    }

    #[test]
    fn interior_gradient_requires_retain() {
        let mut g = Graph::<f64>::new();
        let x = g.param(t(&[2], &[1.0, -3.0]));
        let h = g.relu(x);
        g.retain_grad(h);
        let k = g.scale(h, 4.0);
        let s = g.sum(k);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.wrt(h).unwrap().data(), &[4.0, 4.0]);
        assert_eq!(grads.wrt(x).unwrap().data(), &[4.0, 0.0]);
    }

    #[test]
    fn guided_rule_blocks_negative_gradients() {
        let mut g = Graph::<f64>::new();
        let x = g.param(t(&[1, 2], &[1.0, 1.0]));
        let h = g.relu(x);
        let w = g.constant(t(&[1, 2], &[2.0, -3.0]));
        let y = g.dense(h, w, None).unwrap();
        let plain = g.backward_from(y, t(&[1, 1], &[1.0]), ReluRule::Standard).unwrap();
        let guided = g.backward_from(y, t(&[1, 1], &[1.0]), ReluRule::Guided).unwrap();
        assert_eq!(plain.wrt(x).unwrap().data(), &[2.0, -3.0]);
        assert_eq!(guided.wrt(x).unwrap().data(), &[2.0, 0.0]);
    }

    #[test]
    fn batchnorm_gamma_zero_outputs_beta() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[3, 2], &[1.0, 5.0, -2.0, 0.0, 4.0, 1.0]));
        let gamma = g.param(t(&[2], &[0.0, 0.0]));
        let beta = g.param(t(&[2], &[0.25, -1.5]));
        let (y, _) = g.batchnorm_train(x, gamma, beta, 1e-5).unwrap();
        assert_eq!(g.value(y).data(), &[0.25, -1.5, 0.25, -1.5, 0.25, -1.5]);
    }

    #[test]
    fn batchnorm_rejects_single_sample_batch() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[1, 2], &[1.0, 2.0]));
        let gamma = g.param(t(&[2], &[1.0, 1.0]));
        let beta = g.param(t(&[2], &[0.0, 0.0]));
        assert_eq!(
            g.batchnorm_train(x, gamma, beta, 1e-5).unwrap_err(),
            TensorError::DegenerateBatch(1)
        );
    }
}
