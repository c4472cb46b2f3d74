//! Datasets and splits, Adam training with best-validation selection,
//! hyperparameter grid search, the linear SVM baseline, and accuracy
//! reporting.

use std::collections::BTreeMap;
use std::fmt;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::augment::AugmentError;
use crate::derive_seed;
use crate::nn::{batch_from_volumes, ArchitectureSpec, LayerSpec, Mode, Model, NnError};
use crate::tensor::{Graph, Tensor, TensorError};
use crate::volio::{BrainMask, BrainVolume};

#[derive(Debug, Error)]
pub enum OptimError {
    #[error("class {class} has {subjects} subjects, at least 3 are needed")]
    ClassTooSmall { class: usize, subjects: usize },
    #[error("invalid split fractions {0:?}: need three values >= 0 summing to 1")]
    InvalidFractions([f64; 3]),
    #[error("invalid dataset: {0}")]
    InvalidDataset(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },
    #[error("cannot evaluate on an empty split")]
    EmptySplit,
    #[error("hyperparameter grid is empty")]
    EmptyGrid,
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Augment(#[from] AugmentError),
}

pub type Result<T, E = OptimError> = std::result::Result<T, E>;

/// Class 0 is the typical-reader class, class 1 the dyslexic class.
pub const CLASS_NAMES: [&str; 2] = ["typical", "dyslexic"];

#[derive(Clone, Debug, PartialEq)]
pub struct Subject {
    pub id: String,
    pub label: usize,
    pub volume: BrainVolume,
    /// Id of the subject an augmented copy was derived from.
    pub source: Option<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub items: Vec<Subject>,
    pub mask: BrainMask,
}

impl Dataset {
    pub fn new(items: Vec<Subject>, mask: BrainMask) -> Result<Self> {
        for s in &items {
            if s.volume.dims() != mask.grid.dims {
                return Err(OptimError::InvalidDataset(format!(
                    "subject {} has dims {:?}, mask has {:?}",
                    s.id,
                    s.volume.dims(),
                    mask.grid.dims
                )));
            }
            if s.label > 1 {
                return Err(OptimError::InvalidDataset(format!("subject {} has label {}", s.id, s.label)));
            }
        }
        for class in 0..2 {
            if !items.iter().any(|s| s.label == class) {
                return Err(OptimError::InvalidDataset(format!("no subject of class {class}")));
            }
        }
        Ok(Self { items, mask })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SplitKind {
    Train,
    Validation,
    Test,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Split {
    pub kind: SplitKind,
    pub items: Vec<Subject>,
}

impl Split {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.items.iter().map(|s| s.label).collect()
    }

    pub fn volumes(&self) -> Vec<&BrainVolume> {
        self.items.iter().map(|s| &s.volume).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Splits {
    pub train: Split,
    pub val: Split,
    pub test: Split,
}

/// Largest-remainder apportionment of `total` proportional to `weights`;
/// ties in the remainder go to the lower index.
pub fn apportion(total: usize, weights: &[usize]) -> Vec<usize> {
    let sum: usize = weights.iter().sum();
    if sum == 0 {
        return vec![0; weights.len()];
    }
    let mut quotas: Vec<usize> = weights.iter().map(|&w| total * w / sum).collect();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by_key(|&i| (std::cmp::Reverse(total * weights[i] % sum), i));
    let mut left = total - quotas.iter().sum::<usize>();
    for i in order {
        if left == 0 {
            break;
        }
        if quotas[i] < weights[i] {
            quotas[i] += 1;
            left -= 1;
        }
    }
    quotas
}

/// Per-class subject counts `(train, val, test)` for the given class sizes.
///
/// The split sizes are `round(f_val * N)` and `round(f_test * N)` with the
/// remainder in train. Train seats are apportioned across classes by class
/// size, validation seats by the classes' remaining subjects, and every
/// subject left over goes to test.
pub fn split_counts(class_sizes: &[usize], fractions: [f64; 3]) -> Result<Vec<(usize, usize, usize)>> {
    let ok = fractions.iter().all(|f| (0.0..=1.0).contains(f)) && (fractions.iter().sum::<f64>() - 1.0).abs() < 1e-9;
    if !ok {
        return Err(OptimError::InvalidFractions(fractions));
    }
    let n: usize = class_sizes.iter().sum();
    let n_val = (fractions[1] * n as f64).round() as usize;
    let n_test = (fractions[2] * n as f64).round() as usize;
    let n_train = n.saturating_sub(n_val + n_test);
    let train = apportion(n_train, class_sizes);
    let pools: Vec<usize> = class_sizes.iter().zip(&train).map(|(s, t)| s - t).collect();
    let val = apportion(n_val.min(pools.iter().sum()), &pools);
    Ok((0..class_sizes.len())
        .map(|c| (train[c], val[c], pools[c] - val[c]))
        .collect())
}

/// Stratified subject-level split. Items sharing a subject id always land in
/// the same split.
pub fn split_dataset(ds: &Dataset, fractions: [f64; 3], seed: u64) -> Result<Splits> {
    let mut by_subject: BTreeMap<&str, Vec<&Subject>> = BTreeMap::new();
    for s in &ds.items {
        by_subject.entry(s.id.as_str()).or_default().push(s);
    }
    let mut per_class: [Vec<&str>; 2] = [Vec::new(), Vec::new()];
    for (id, items) in &by_subject {
        let label = items[0].label;
        if items.iter().any(|s| s.label != label) {
            return Err(OptimError::InvalidDataset(format!("subject {id} carries both labels")));
        }
        per_class[label].push(id);
    }
    for (class, ids) in per_class.iter().enumerate() {
        if ids.len() < 3 {
            return Err(OptimError::ClassTooSmall {
                class,
                subjects: ids.len(),
            });
        }
    }
    let counts = split_counts(&[per_class[0].len(), per_class[1].len()], fractions)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut assign: BTreeMap<&str, SplitKind> = BTreeMap::new();
    for (class, ids) in per_class.iter_mut().enumerate() {
        ids.shuffle(&mut rng);
        let (tr, va, _) = counts[class];
        for (k, id) in ids.iter().enumerate() {
            let kind = if k < tr {
                SplitKind::Train
            } else if k < tr + va {
                SplitKind::Validation
            } else {
                SplitKind::Test
            };
            assign.insert(id, kind);
        }
    }
    let pick = |kind| Split {
        kind,
        items: ds.items.iter().filter(|s| assign[s.id.as_str()] == kind).cloned().collect(),
    };
    Ok(Splits {
        train: pick(SplitKind::Train),
        val: pick(SplitKind::Validation),
        test: pick(SplitKind::Test),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias-corrected moment estimates.
pub struct Adam {
    lr: f64,
    cfg: AdamConfig,
    t: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64, cfg: AdamConfig) -> Self {
        Self {
            lr,
            cfg,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn step<T: crate::tensor::Scalar>(&mut self, params: &mut [Tensor<T>], grads: &[Tensor<T>]) {
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![0.0; p.numel()]).collect();
            self.v = self.m.clone();
        }
        self.t += 1;
        let AdamConfig { beta1, beta2, eps } = self.cfg;
        let c1 = 1.0 - beta1.powi(self.t);
        let c2 = 1.0 - beta2.powi(self.t);
        for (k, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for (i, (w, gv)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                let gv = gv.as_f64();
                m[i] = beta1 * m[i] + (1.0 - beta1) * gv;
                v[i] = beta2 * v[i] + (1.0 - beta2) * gv * gv;
                let update = self.lr * (m[i] / c1) / ((v[i] / c2).sqrt() + eps);
                *w = T::from_f64_lossy(w.as_f64() - update);
            }
        }
    }
}

/// Hyperparameters of one training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    /// Dropout rate of the builder's dropout layer; values >= 1 disable it.
    pub drop_p: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub fc_units: usize,
    pub seed: u64,
    pub adam: AdamConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            drop_p: 0.5,
            epochs: 10,
            batch_size: 16,
            fc_units: 64,
            seed: 0,
            adam: AdamConfig::default(),
        }
    }
}

impl TrainConfig {
    /// Drop probability handed to a dropout layer: the grid value 1 means
    /// "no dropout".
    pub fn effective_drop(&self) -> f64 {
        if self.drop_p >= 1.0 {
            0.0
        } else {
            self.drop_p
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(OptimError::InvalidConfig(format!("learning_rate {}", self.learning_rate)));
        }
        if self.batch_size < 2 {
            return Err(OptimError::InvalidConfig(format!("batch_size {} < 2", self.batch_size)));
        }
        if !(self.drop_p >= 0.0) {
            return Err(OptimError::InvalidConfig(format!("drop_p {}", self.drop_p)));
        }
        Ok(())
    }
}

impl fmt::Display for TrainConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "lr={} drop={} epochs={} fc={} batch={}",
            self.learning_rate, self.drop_p, self.epochs, self.fc_units, self.batch_size
        )
    }
}

/// Applies the grid-driven knobs (`fc_units`, `drop_p`) to a spec whose tail
/// is `Dense -> ReLU -> [Dropout] -> Dense(classes)`.
pub fn apply_tail(spec: &ArchitectureSpec, cfg: &TrainConfig) -> Result<ArchitectureSpec> {
    let mut out = spec.clone();
    let n = out.layers.len();
    let hidden = out.layers[..n.saturating_sub(1)]
        .iter()
        .rposition(|l| matches!(l, LayerSpec::Dense { .. }))
        .ok_or_else(|| OptimError::InvalidConfig("architecture has no hidden dense layer".into()))?;
    if let LayerSpec::Dense { units, .. } = &mut out.layers[hidden] {
        *units = cfg.fc_units;
    }
    out.layers.retain(|l| !matches!(l, LayerSpec::Dropout { .. }));
    let p = cfg.effective_drop();
    if p > 0.0 {
        let at = out.layers.len() - 1;
        out.layers.insert(at, LayerSpec::Dropout { p });
    }
    out.layer_shapes()?;
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_acc: Option<f64>,
}

pub fn history_csv(history: &[EpochRecord]) -> String {
    let mut s = String::from("epoch,train_loss,val_acc\n");
    for r in history {
        let acc = r.val_acc.map(|a| format!("{a:.6}")).unwrap_or_default();
        s.push_str(&format!("{},{:.6},{}\n", r.epoch, r.train_loss, acc));
    }
    s
}

pub struct TrainOutcome {
    pub model: Model,
    pub history: Vec<EpochRecord>,
    /// 0 when no epoch ran and the initial model is returned.
    pub best_epoch: usize,
}

fn has_batchnorm(spec: &ArchitectureSpec) -> bool {
    spec.layers.iter().any(|l| matches!(l, LayerSpec::BatchNorm { .. }))
}

/// Adam on mean softmax cross-entropy over shuffled mini-batches. Returns
/// the parameters of the epoch with the best validation accuracy (ties go to
/// the lower training loss, then the earlier epoch). A trailing batch of one
/// item is skipped when the model has batch normalization.
pub fn train(spec: &ArchitectureSpec, train: &Split, val: &Split, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(OptimError::EmptySplit);
    }
    let mut model = Model::new(spec, derive_seed(cfg.seed, &[0]))?;
    let mut best = model.clone();
    let mut best_key: Option<(f64, f64)> = None;
    let mut best_epoch = 0;
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut adam = Adam::new(cfg.learning_rate, cfg.adam);
    let bn = has_batchnorm(spec);
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 1..=cfg.epochs {
        model.mode = Mode::Train;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[1, epoch as u64]));
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut seen = 0usize;
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            if bn && chunk.len() < 2 {
                continue;
            }
            let vols: Vec<&BrainVolume> = chunk.iter().map(|&i| &train.items[i].volume).collect();
            let labels: Vec<usize> = chunk.iter().map(|&i| train.items[i].label).collect();
            let mut g = Graph::new();
            let x = g.constant(batch_from_volumes(spec, &vols)?);
            let f = model.forward(&mut g, x, true, derive_seed(cfg.seed, &[2, epoch as u64, b as u64]))?;
            let loss = g.softmax_cross_entropy(f.logits, &labels)?;
            let lv = g.value(loss).item()? as f64;
            if !lv.is_finite() {
                return Err(OptimError::NonFiniteLoss { epoch, batch: b });
            }
            let mut grads = g.backward(loss)?;
            let grads: Vec<Tensor> = f
                .params
                .iter()
                .zip(model.params())
                .map(|(&v, p)| grads.take(v).unwrap_or_else(|| Tensor::zeros(p.shape())))
                .collect();
            adam.step(model.params_mut(), &grads);
            model.update_running_stats(&f.batch_stats);
            loss_sum += lv * chunk.len() as f64;
            seen += chunk.len();
        }
        model.mode = Mode::Eval;
        let train_loss = if seen > 0 { loss_sum / seen as f64 } else { f64::NAN };
        let val_acc = if val.is_empty() { None } else { Some(evaluate(&model, val)?) };
        history.push(EpochRecord {
            epoch,
            train_loss,
            val_acc,
        });
        let key = (val_acc.unwrap_or(0.0), -train_loss);
        let better = match best_key {
            None => true,
            Some(k) => key.0 > k.0 || (key.0 == k.0 && key.1 > k.1),
        };
        if better {
            best_key = Some(key);
            best = model.clone();
            best_epoch = epoch;
        }
    }
    best.mode = Mode::Eval;
    Ok(TrainOutcome {
        model: best,
        history,
        best_epoch,
    })
}

/// Anything that maps volumes to class indices.
pub trait Classifier {
    fn predict(&self, volumes: &[&BrainVolume]) -> Result<Vec<usize>>;
}

/// Index of the largest logit; ties go to the lower class.
pub fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

impl Classifier for Model {
    fn predict(&self, volumes: &[&BrainVolume]) -> Result<Vec<usize>> {
        let classes = self.spec().classes;
        let mut out = Vec::with_capacity(volumes.len());
        for chunk in volumes.chunks(16) {
            let logits = self.logits(batch_from_volumes(self.spec(), chunk)?)?;
            out.extend(logits.data().chunks(classes).map(argmax));
        }
        Ok(out)
    }
}

pub fn accuracy(predicted: &[usize], labels: &[usize]) -> Result<f64> {
    if labels.is_empty() {
        return Err(OptimError::EmptySplit);
    }
    let hits = predicted.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / labels.len() as f64)
}

pub fn evaluate(clf: &dyn Classifier, split: &Split) -> Result<f64> {
    if split.is_empty() {
        return Err(OptimError::EmptySplit);
    }
    accuracy(&clf.predict(&split.volumes())?, &split.labels())
}

/// `name  94.83%` rows under a `Technique  Accuracy` header, names padded
/// to a common width.
pub fn format_results(rows: &[(String, f64)]) -> String {
    let width = rows.iter().map(|(n, _)| n.len()).max().unwrap_or(0).max("Technique".len());
    let mut s = format!("{:<width$}  Accuracy\n", "Technique");
    for (name, acc) in rows {
        s.push_str(&format_result_row(name, *acc, width));
        s.push('\n');
    }
    s
}

pub fn format_result_row(name: &str, acc: f64, width: usize) -> String {
    format!("{name:<width$}  {:.2}%", acc * 100.0)
}

/// Axes of the hyperparameter grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HyperGrid {
    pub learning_rates: Vec<f64>,
    pub drop_ps: Vec<f64>,
    pub epochs: Vec<usize>,
    pub fc_units: Vec<usize>,
    pub batch_size: usize,
}

impl Default for HyperGrid {
    /// The full tuning grid: 6 learning rates, 3 dropout settings, 3 epoch
    /// budgets, 5 hidden widths, batch 16.
    fn default() -> Self {
        Self {
            learning_rates: vec![1.0, 0.1, 0.01, 0.001, 0.0001, 0.00001],
            drop_ps: vec![0.1, 0.5, 1.0],
            epochs: vec![10, 50, 100],
            fc_units: vec![32, 64, 128, 256, 512],
            batch_size: 16,
        }
    }
}

impl HyperGrid {
    pub fn configs(&self, base: &TrainConfig) -> Vec<TrainConfig> {
        let mut out = Vec::new();
        for &learning_rate in &self.learning_rates {
            for &drop_p in &self.drop_ps {
                for &epochs in &self.epochs {
                    for &fc_units in &self.fc_units {
                        out.push(TrainConfig {
                            learning_rate,
                            drop_p,
                            epochs,
                            fc_units,
                            batch_size: self.batch_size,
                            ..base.clone()
                        });
                    }
                }
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LeaderboardRow {
    pub rank: usize,
    pub config: TrainConfig,
    pub val_acc: Option<f64>,
    pub params: Option<usize>,
    pub error: Option<String>,
}

pub struct GridOutcome {
    pub best: TrainConfig,
    pub best_model: Model,
    pub leaderboard: Vec<LeaderboardRow>,
}

pub fn leaderboard_csv(rows: &[LeaderboardRow]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["rank", "config", "val_acc"]).expect("in-memory write");
    for r in rows {
        let acc = match (&r.val_acc, &r.error) {
            (Some(a), _) => format!("{a:.6}"),
            (None, Some(_)) => "failed".to_string(),
            (None, None) => String::new(),
        };
        w.write_record([r.rank.to_string(), r.config.to_string(), acc])
            .expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8")
}

/// Trains every configuration and ranks by validation accuracy; ties go to
/// the lower learning rate, then the smaller model. Failing cells are kept in
/// the leaderboard, ranked last.
pub fn grid_search(
    builder: impl Fn(&TrainConfig) -> Result<ArchitectureSpec>,
    train_split: &Split,
    val: &Split,
    configs: &[TrainConfig],
) -> Result<GridOutcome> {
    if configs.is_empty() {
        return Err(OptimError::EmptyGrid);
    }
    if val.is_empty() {
        return Err(OptimError::EmptySplit);
    }
    let mut rows = Vec::with_capacity(configs.len());
    let mut models = Vec::with_capacity(configs.len());
    for cfg in configs {
        let run = builder(cfg).and_then(|spec| {
            let out = train(&spec, train_split, val, cfg)?;
            let acc = evaluate(&out.model, val)?;
            Ok((out.model, acc))
        });
        match run {
            Ok((model, acc)) => {
                rows.push(LeaderboardRow {
                    rank: 0,
                    config: cfg.clone(),
                    val_acc: Some(acc),
                    params: Some(model.param_count()),
                    error: None,
                });
                models.push(Some(model));
            }
            Err(e) => {
                rows.push(LeaderboardRow {
                    rank: 0,
                    config: cfg.clone(),
                    val_acc: None,
                    params: None,
                    error: Some(e.to_string()),
                });
                models.push(None);
            }
        }
    }
    let mut order: Vec<usize> = (0..rows.len()).collect();
    order.sort_by(|&a, &b| {
        let (ra, rb) = (&rows[a], &rows[b]);
        match (ra.val_acc, rb.val_acc) {
            (Some(x), Some(y)) => y
                .total_cmp(&x)
                .then(ra.config.learning_rate.total_cmp(&rb.config.learning_rate))
                .then(ra.params.cmp(&rb.params)),
            (Some(_), None) => std::cmp::Ordering::Less,
            (None, Some(_)) => std::cmp::Ordering::Greater,
            (None, None) => std::cmp::Ordering::Equal,
        }
    });
    let top = order[0];
    let best_model = models[top]
        .take()
        .ok_or_else(|| OptimError::InvalidConfig(format!("every grid cell failed; first: {:?}", rows[top].error)))?;
    let best = rows[top].config.clone();
    let leaderboard = order
        .iter()
        .enumerate()
        .map(|(r, &i)| LeaderboardRow {
            rank: r + 1,
            ..rows[i].clone()
        })
        .collect();
    Ok(GridOutcome {
        best,
        best_model,
        leaderboard,
    })
}

/// Per-feature standardization fitted on training rows only.
#[derive(Clone, Debug, PartialEq)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

impl Standardizer {
    pub fn fit(rows: &[Vec<f64>]) -> Self {
        let d = rows.first().map_or(0, Vec::len);
        let n = rows.len().max(1) as f64;
        let mut mean = vec![0.0; d];
        for r in rows {
            mean.iter_mut().zip(r).for_each(|(m, x)| *m += x);
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; d];
        for r in rows {
            var.iter_mut().zip(r).zip(&mean).for_each(|((v, x), m)| *v += (x - m).powi(2));
        }
        let scale = var
            .into_iter()
            .map(|v| {
                let s = (v / n).sqrt();
                if s > 1e-12 {
                    s
                } else {
                    1.0
                }
            })
            .collect();
        Self { mean, scale }
    }

    pub fn transform(&self, row: &[f64]) -> Vec<f64> {
        row.iter()
            .zip(&self.mean)
            .zip(&self.scale)
            .map(|((x, m), s)| (x - m) / s)
            .collect()
    }
}

/// Linear SVM over in-mask voxels.
#[derive(Clone, Debug, PartialEq)]
pub struct SvmModel {
    pub weights: Vec<f64>,
    pub bias: f64,
    pub c: f64,
    pub scaler: Standardizer,
    mask_indices: Vec<usize>,
}

pub struct SvmOutcome {
    pub model: SvmModel,
    /// Primal objective of the averaged iterate after every step.
    pub objective: Vec<f64>,
}

pub fn masked_features(volume: &BrainVolume, mask_indices: &[usize]) -> Vec<f64> {
    let d = volume.data();
    mask_indices.iter().map(|&i| d[i] as f64).collect()
}

fn primal_objective(w: &[f64], rows: &[Vec<f64>], y: &[f64], lambda: f64) -> f64 {
    let norm: f64 = w.iter().map(|v| v * v).sum();
    let hinge: f64 = rows
        .iter()
        .zip(y)
        .map(|(x, &yi)| (1.0 - yi * dot(w, x)).max(0.0))
        .sum::<f64>()
        / rows.len() as f64;
    0.5 * lambda * norm + hinge
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Minimizes `lambda/2 |w|^2 + mean hinge` with `lambda = 1 / (C n)` by
/// full-batch subgradient steps of size `1 / (lambda t)`, projected onto the
/// ball of radius `1 / sqrt(lambda)`, and returns the averaged iterate. The
/// bias is the weight of a constant unit feature.
pub fn train_svm(train: &Split, mask: &BrainMask, c: f64, epochs: usize) -> Result<SvmOutcome> {
    if train.is_empty() {
        return Err(OptimError::EmptySplit);
    }
    if !(c > 0.0 && c.is_finite()) {
        return Err(OptimError::InvalidConfig(format!("C = {c}")));
    }
    let mask_indices = mask.indices();
    let raw: Vec<Vec<f64>> = train.items.iter().map(|s| masked_features(&s.volume, &mask_indices)).collect();
    let scaler = Standardizer::fit(&raw);
    let rows: Vec<Vec<f64>> = raw
        .iter()
        .map(|r| {
            let mut x = scaler.transform(r);
            x.push(1.0);
            x
        })
        .collect();
    let y: Vec<f64> = train.items.iter().map(|s| if s.label == 1 { 1.0 } else { -1.0 }).collect();
    let n = rows.len() as f64;
    let d = rows[0].len();
    let lambda = 1.0 / (c * n);
    let radius = 1.0 / lambda.sqrt();
    let mut w = vec![0.0; d];
    let mut avg = vec![0.0; d];
    let mut objective = Vec::with_capacity(epochs);
    for t in 1..=epochs {
        let eta = 1.0 / (lambda * t as f64);
        let mut sub = vec![0.0; d];
        for (x, &yi) in rows.iter().zip(&y) {
            if yi * dot(&w, x) < 1.0 {
                sub.iter_mut().zip(x).for_each(|(s, xv)| *s += yi * xv);
            }
        }
        let shrink = 1.0 - eta * lambda;
        for (wv, s) in w.iter_mut().zip(&sub) {
            *wv = shrink * *wv + eta * s / n;
        }
        let norm = dot(&w, &w).sqrt();
        if norm > radius {
            w.iter_mut().for_each(|v| *v *= radius / norm);
        }
        let k = 1.0 / t as f64;
        avg.iter_mut().zip(&w).for_each(|(a, v)| *a += (v - *a) * k);
        let obj = primal_objective(&avg, &rows, &y, lambda);
        if !obj.is_finite() {
            return Err(OptimError::NonFiniteLoss { epoch: t, batch: 0 });
        }
        objective.push(obj);
    }
    let bias = avg.pop().unwrap_or(0.0);
    Ok(SvmOutcome {
        model: SvmModel {
            weights: avg,
            bias,
            c,
            scaler,
            mask_indices,
        },
        objective,
    })
}

impl SvmModel {
    pub fn decision(&self, volume: &BrainVolume) -> f64 {
        let x = self.scaler.transform(&masked_features(volume, &self.mask_indices));
        dot(&self.weights, &x) + self.bias
    }
}

impl Classifier for SvmModel {
    fn predict(&self, volumes: &[&BrainVolume]) -> Result<Vec<usize>> {
        Ok(volumes.iter().map(|v| usize::from(self.decision(v) > 0.0)).collect())
    }
}

pub const DEFAULT_SVM_C: [f64; 5] = [0.01, 0.1, 1.0, 10.0, 100.0];

/// Fits one SVM per `C` and keeps the best validation accuracy (ties go to
/// the smaller `C`). Returns the model and `(C, val_acc)` per candidate.
pub fn svm_grid_search(
    train: &Split,
    val: &Split,
    mask: &BrainMask,
    cs: &[f64],
    epochs: usize,
) -> Result<(SvmModel, Vec<(f64, f64)>)> {
    if cs.is_empty() {
        return Err(OptimError::EmptyGrid);
    }
    let mut best: Option<(SvmModel, f64)> = None;
    let mut table = Vec::with_capacity(cs.len());
    let mut sorted = cs.to_vec();
    sorted.sort_by(f64::total_cmp);
    for c in sorted {
        let m = train_svm(train, mask, c, epochs)?.model;
        let acc = evaluate(&m, val)?;
        table.push((c, acc));
        if best.as_ref().is_none_or(|(_, a)| acc > *a) {
            best = Some((m, acc));
        }
    }
    Ok((best.expect("nonempty grid").0, table))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volio::Grid;

    #[test]
    fn apportion_largest_remainder() {
        assert_eq!(apportion(26, &[16, 16]), vec![13, 13]);
        assert_eq!(apportion(3, &[3, 3]), vec![2, 1]);
        assert_eq!(apportion(5, &[1, 9]), vec![1, 4]);
        assert_eq!(apportion(0, &[4, 4]), vec![0, 0]);
    }

    #[test]
    fn split_counts_for_sixteen_per_class() {
        let c = split_counts(&[16, 16], [0.8, 0.1, 0.1]).unwrap();
        assert_eq!(c, vec![(13, 2, 1), (13, 1, 2)]);
        let c = split_counts(&[40, 40], [0.8, 0.1, 0.1]).unwrap();
        assert_eq!(c, vec![(32, 4, 4), (32, 4, 4)]);
        let c = split_counts(&[5, 7], [1.0, 0.0, 0.0]).unwrap();
        assert_eq!(c, vec![(5, 0, 0), (7, 0, 0)]);
        assert!(split_counts(&[5, 5], [0.5, 0.5, 0.5]).is_err());
    }

    #[test]
    fn adam_zero_gradient_is_a_no_op() {
        let mut p = vec![Tensor::<f64>::new(vec![2], vec![0.3, -1.0]).unwrap()];
        let mut adam = Adam::new(0.1, AdamConfig::default());
        adam.step(&mut p, &[Tensor::zeros(&[2])]);
        assert_eq!(p[0].data(), &[0.3, -1.0]);
    }

    #[test]
    fn adam_descends_quadratic() {
        // f = theta^2 / 2, gradient theta
        let mut p = vec![Tensor::<f64>::new(vec![1], vec![1.0]).unwrap()];
        let mut adam = Adam::new(0.01, AdamConfig::default());
        let g = p[0].clone();
        adam.step(&mut p, &[g]);
        assert!(p[0].data()[0].abs() < 1.0);
    }

    #[test]
    fn results_row_layout() {
        assert_eq!(format_result_row("Best GP 2D CNN", 0.9483, 14), "Best GP 2D CNN  94.83%");
        let t = format_results(&[("Modified LeNet-5".into(), 0.8571), ("SVM".into(), 0.7)]);
        assert_eq!(t, "Technique         Accuracy\nModified LeNet-5  85.71%\nSVM               70.00%\n");
    }

    #[test]
    fn argmax_ties_go_low() {
        assert_eq!(argmax(&[0.0, 0.0]), 0);
        assert_eq!(argmax(&[0.0, 1.0]), 1);
    }

    fn one_d_split(points: &[(f32, usize)]) -> (Split, BrainMask) {
        let g = Grid::isotropic([1, 1, 1], 1.0, [0.0; 3]).unwrap();
        let items = points
            .iter()
            .enumerate()
            .map(|(i, &(x, label))| Subject {
                id: format!("p{i}"),
                label,
                volume: BrainVolume::new(g.clone(), vec![x]).unwrap(),
                source: None,
            })
            .collect();
        (
            Split {
                kind: SplitKind::Train,
                items,
            },
            BrainMask::new(g, vec![true]).unwrap(),
        )
    }

    #[test]
    fn svm_separates_two_points() {
        let (split, mask) = one_d_split(&[(-1.0, 0), (1.0, 1)]);
        let out = train_svm(&split, &mask, 1.0, 100).unwrap();
        assert_eq!(evaluate(&out.model, &split).unwrap(), 1.0);
    }

    #[test]
    fn svm_vanishing_c_gives_vanishing_weights() {
        let (split, mask) = one_d_split(&[(-1.0, 0), (1.0, 1), (0.5, 1), (-2.0, 0)]);
        let out = train_svm(&split, &mask, 1e-9, 50).unwrap();
        assert!(out.model.weights.iter().all(|w| w.abs() < 1e-4));
        for s in &split.items {
            assert!(out.model.decision(&s.volume).abs() < 1e-4);
        }
    }
}
