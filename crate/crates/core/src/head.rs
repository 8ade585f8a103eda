//! Per-position linear heads trained on frozen fused features.
//!
//! A head is a 1×1 convolution: `y = W·x + b` at every grid cell, where `x`
//! is the fused feature vector optionally followed by every scale's global
//! token. Segmentation heads emit class logits; depth heads emit one value,
//! regressed in log space when `log_depth` is set.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::fusion::FusedFeatureMap;
use crate::pyramid::{resize_bilinear, PyramidError};
use crate::tensorio::{read_tensor, write_tensor, Tensor, TensorIoError};

#[derive(Debug, Error)]
pub enum HeadError {
    #[error("head expects {expected} input channels, features provide {found}")]
    DimMismatch { expected: usize, found: usize },
    #[error("head was trained on feature layout {expected}, got {found}")]
    LayoutMismatch { expected: String, found: String },
    #[error("global tokens requested but the features carry none")]
    MissingGlobalTokens,
    #[error("non-finite loss {loss} at step {step} (learning rate {learning_rate})")]
    NonFiniteLoss { step: usize, loss: f64, learning_rate: f64 },
    #[error("invalid training setup: {0}")]
    InvalidTraining(String),
    #[error("invalid head: {0}")]
    Invalid(String),
    #[error(transparent)]
    Resize(#[from] PyramidError),
    #[error(transparent)]
    Io(#[from] TensorIoError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Task {
    Segmentation,
    Depth,
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Task::Segmentation => "segmentation",
            Task::Depth => "depth",
        })
    }
}

impl FromStr for Task {
    type Err = HeadError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "segmentation" | "seg" => Ok(Task::Segmentation),
            "depth" => Ok(Task::Depth),
            _ => Err(HeadError::Invalid(format!("unknown task {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Loss {
    CrossEntropy,
    Mse,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearHead {
    pub task: Task,
    pub in_dim: usize,
    pub out_dim: usize,
    /// `out_dim × in_dim`, row-major.
    pub weights: Vec<f32>,
    pub bias: Vec<f32>,
    pub cls_concat: bool,
    pub log_depth: bool,
    /// Fingerprint of the feature channel layout the head was trained on.
    pub layout_hash: String,
}

impl LinearHead {
    pub fn zeros(task: Task, in_dim: usize, out_dim: usize) -> Self {
        Self {
            task,
            in_dim,
            out_dim,
            weights: vec![0.0; in_dim * out_dim],
            bias: vec![0.0; out_dim],
            cls_concat: false,
            log_depth: false,
            layout_hash: String::new(),
        }
    }

    fn validate(&self) -> Result<(), HeadError> {
        if self.in_dim == 0 || self.out_dim == 0 {
            return Err(HeadError::Invalid("empty head".into()));
        }
        if self.weights.len() != self.in_dim * self.out_dim || self.bias.len() != self.out_dim {
            return Err(HeadError::Invalid("parameter shapes do not match dims".into()));
        }
        if self.weights.iter().chain(&self.bias).any(|v| !v.is_finite()) {
            return Err(HeadError::Invalid("non-finite parameter".into()));
        }
        Ok(())
    }
}

/// Fingerprint of a fused feature layout plus the global-token flag.
pub fn layout_hash(feats: &FusedFeatureMap, cls_concat: bool) -> String {
    let mut h = Sha256::new();
    h.update(feats.layout_text().as_bytes());
    if cls_concat {
        h.update(format!("cls={}\n", feats.global_dim()).as_bytes());
    }
    hex::encode(h.finalize())[..16].to_string()
}

/// Per-position head inputs, `positions × in_dim` row-major.
pub fn head_inputs(feats: &FusedFeatureMap, cls_concat: bool) -> Result<(usize, Vec<f32>), HeadError> {
    if !cls_concat {
        return Ok((feats.total_dim, feats.data.clone()));
    }
    let tokens = feats.global_tokens.as_ref().ok_or(HeadError::MissingGlobalTokens)?;
    let extra: Vec<f32> = tokens.iter().flat_map(|(_, t)| t.iter().copied()).collect();
    let in_dim = feats.total_dim + extra.len();
    let mut rows = Vec::with_capacity(feats.positions() * in_dim);
    for cell in feats.data.chunks_exact(feats.total_dim) {
        rows.extend_from_slice(cell);
        rows.extend_from_slice(&extra);
    }
    Ok((in_dim, rows))
}

/// Raw head outputs on the feature grid.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionMap {
    pub grid_h: usize,
    pub grid_w: usize,
    pub channels: usize,
    pub data: Vec<f32>,
}

pub fn head_forward(head: &LinearHead, feats: &FusedFeatureMap) -> Result<PredictionMap, HeadError> {
    let (in_dim, rows) = head_inputs(feats, head.cls_concat)?;
    if in_dim != head.in_dim {
        return Err(HeadError::DimMismatch {
            expected: head.in_dim,
            found: in_dim,
        });
    }
    if !head.layout_hash.is_empty() {
        let found = layout_hash(feats, head.cls_concat);
        if found != head.layout_hash {
            return Err(HeadError::LayoutMismatch {
                expected: head.layout_hash.clone(),
                found,
            });
        }
    }
    let mut data = Vec::with_capacity(feats.positions() * head.out_dim);
    for x in rows.chunks_exact(in_dim) {
        for o in 0..head.out_dim {
            let w = &head.weights[o * in_dim..][..in_dim];
            let mut acc = head.bias[o] as f64;
            for (wi, xi) in w.iter().zip(x) {
                acc += *wi as f64 * *xi as f64;
            }
            let v = if head.task == Task::Depth && head.log_depth {
                acc.exp()
            } else {
                acc
            };
            data.push(v as f32);
        }
    }
    Ok(PredictionMap {
        grid_h: feats.grid_h,
        grid_w: feats.grid_w,
        channels: head.out_dim,
        data,
    })
}

/// Full-resolution prediction.
#[derive(Debug, Clone, PartialEq)]
pub enum Prediction {
    Labels { height: usize, width: usize, labels: Vec<u32> },
    Depth { height: usize, width: usize, values: Vec<f32> },
}

/// Index of the largest value; the lowest index wins ties.
pub fn argmax(values: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

pub fn upsample_prediction(pred: &PredictionMap, out_h: usize, out_w: usize, task: Task) -> Result<Prediction, HeadError> {
    let up = resize_bilinear(&pred.data, pred.grid_h, pred.grid_w, pred.channels, out_h, out_w)?;
    Ok(match task {
        Task::Segmentation => Prediction::Labels {
            height: out_h,
            width: out_w,
            labels: up.chunks_exact(pred.channels).map(|c| argmax(c) as u32).collect(),
        },
        Task::Depth => {
            if pred.channels != 1 {
                return Err(HeadError::Invalid(format!("depth map with {} channels", pred.channels)));
            }
            Prediction::Depth {
                height: out_h,
                width: out_w,
                values: up,
            }
        }
    })
}

/// Nearest-neighbor resampling of a per-pixel map onto a coarser grid,
/// sampling each cell at its center.
pub fn downsample_nearest<T: Copy>(src: &[T], h: usize, w: usize, grid_h: usize, grid_w: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(grid_h * grid_w);
    for gy in 0..grid_h {
        let y = ((2 * gy + 1) * h / (2 * grid_h)).min(h - 1);
        for gx in 0..grid_w {
            let x = ((2 * gx + 1) * w / (2 * grid_w)).min(w - 1);
            out.push(src[y * w + x]);
        }
    }
    out
}

/// Per-position regression or classification targets; `None` is ignored.
#[derive(Debug, Clone, PartialEq)]
pub enum Targets {
    Labels(Vec<Option<u32>>),
    Values(Vec<Option<f64>>),
}

impl Targets {
    fn len(&self) -> usize {
        match self {
            Targets::Labels(v) => v.len(),
            Targets::Values(v) => v.len(),
        }
    }

    fn is_active(&self, i: usize) -> bool {
        match self {
            Targets::Labels(v) => v[i].is_some(),
            Targets::Values(v) => v[i].is_some(),
        }
    }
}

/// Stacked head inputs and targets across all training samples.
#[derive(Debug, Clone)]
pub struct TrainingSet {
    pub in_dim: usize,
    pub rows: Vec<f32>,
    pub targets: Targets,
    pub layout_hash: String,
}

impl TrainingSet {
    pub fn new(in_dim: usize, rows: Vec<f32>, targets: Targets) -> Result<Self, HeadError> {
        if in_dim == 0 || !rows.len().is_multiple_of(in_dim) || rows.len() / in_dim != targets.len() {
            return Err(HeadError::InvalidTraining(format!(
                "{} values, {} targets, in_dim {in_dim}",
                rows.len(),
                targets.len()
            )));
        }
        Ok(Self {
            in_dim,
            rows,
            targets,
            layout_hash: String::new(),
        })
    }

    /// Builds a set from fused grids and per-cell targets of the same grid.
    pub fn from_fused(
        samples: &[(FusedFeatureMap, Targets)],
        cls_concat: bool,
    ) -> Result<Self, HeadError> {
        let first = samples
            .first()
            .ok_or_else(|| HeadError::InvalidTraining("no samples".into()))?;
        let hash = layout_hash(&first.0, cls_concat);
        let mut in_dim = 0;
        let mut rows = Vec::new();
        let mut targets: Option<Targets> = None;
        for (feats, t) in samples {
            if t.len() != feats.positions() {
                return Err(HeadError::InvalidTraining(format!(
                    "{} targets for a {}x{} grid",
                    t.len(),
                    feats.grid_h,
                    feats.grid_w
                )));
            }
            if layout_hash(feats, cls_concat) != hash {
                return Err(HeadError::InvalidTraining("samples disagree on feature layout".into()));
            }
            let (d, r) = head_inputs(feats, cls_concat)?;
            in_dim = d;
            rows.extend(r);
            match (&mut targets, t) {
                (None, t) => targets = Some(t.clone()),
                (Some(Targets::Labels(a)), Targets::Labels(b)) => a.extend_from_slice(b),
                (Some(Targets::Values(a)), Targets::Values(b)) => a.extend_from_slice(b),
                _ => return Err(HeadError::InvalidTraining("mixed target kinds".into())),
            }
        }
        let mut set = Self::new(in_dim, rows, targets.unwrap())?;
        set.layout_hash = hash;
        Ok(set)
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    fn row(&self, i: usize) -> &[f32] {
        &self.rows[i * self.in_dim..][..self.in_dim]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub steps: usize,
    /// Positions per step; at least the set size means full-batch descent.
    pub batch: usize,
    pub seed: u64,
    pub loss: Loss,
    pub cls_concat: bool,
    pub log_depth: bool,
}

impl TrainConfig {
    pub fn segmentation() -> Self {
        Self {
            learning_rate: 1e-2,
            steps: 10_000,
            batch: 256,
            seed: 0,
            loss: Loss::CrossEntropy,
            cls_concat: false,
            log_depth: false,
        }
    }

    pub fn depth() -> Self {
        Self {
            learning_rate: 1e-3,
            steps: 10_000,
            batch: 256,
            seed: 0,
            loss: Loss::Mse,
            cls_concat: false,
            log_depth: true,
        }
    }

    fn validate(&self) -> Result<(), HeadError> {
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(HeadError::InvalidTraining(format!(
                "learning rate {} must be finite and non-negative",
                self.learning_rate
            )));
        }
        if self.steps == 0 || self.batch == 0 {
            return Err(HeadError::InvalidTraining("steps and batch must be >= 1".into()));
        }
        Ok(())
    }
}

/// Head parameters in double precision, the space gradients live in.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadParams {
    pub in_dim: usize,
    pub out_dim: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl HeadParams {
    pub fn zeros(in_dim: usize, out_dim: usize) -> Self {
        Self {
            in_dim,
            out_dim,
            weights: vec![0.0; in_dim * out_dim],
            bias: vec![0.0; out_dim],
        }
    }

    pub fn from_head(head: &LinearHead) -> Self {
        Self {
            in_dim: head.in_dim,
            out_dim: head.out_dim,
            weights: head.weights.iter().map(|&v| v as f64).collect(),
            bias: head.bias.iter().map(|&v| v as f64).collect(),
        }
    }

    fn forward(&self, x: &[f32], out: &mut [f64]) {
        for (o, slot) in out.iter_mut().enumerate() {
            let w = &self.weights[o * self.in_dim..][..self.in_dim];
            *slot = self.bias[o] + w.iter().zip(x).map(|(a, b)| a * *b as f64).sum::<f64>();
        }
    }
}

/// Mean loss over the active samples in `indices` and its gradient.
///
/// Cross-entropy averages `−log softmax(y)_t`; MSE averages `Σ_c (y_c − t)²`.
/// With `log_depth`, value targets are compared in log space.
pub fn loss_and_grad(
    params: &HeadParams,
    set: &TrainingSet,
    indices: &[usize],
    loss: Loss,
    log_depth: bool,
) -> (f64, HeadParams) {
    let mut grad = HeadParams::zeros(params.in_dim, params.out_dim);
    let active: Vec<usize> = indices.iter().copied().filter(|&i| set.targets.is_active(i)).collect();
    if active.is_empty() {
        return (0.0, grad);
    }
    let scale = 1.0 / active.len() as f64;
    let mut total = 0.0;
    let mut y = vec![0.0f64; params.out_dim];
    let mut dy = vec![0.0f64; params.out_dim];
    for &i in &active {
        let x = set.row(i);
        params.forward(x, &mut y);
        match (loss, &set.targets) {
            (Loss::CrossEntropy, Targets::Labels(labels)) => {
                let t = labels[i].unwrap() as usize;
                let peak = y.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = y.iter().map(|v| (v - peak).exp()).sum();
                let log_z = peak + z.ln();
                total += log_z - y.get(t).copied().unwrap_or(f64::NAN);
                for (c, d) in dy.iter_mut().enumerate() {
                    let p = (y[c] - log_z).exp();
                    *d = p - if c == t { 1.0 } else { 0.0 };
                }
            }
            (Loss::Mse, targets) => {
                let t = match targets {
                    Targets::Values(v) => {
                        let t = v[i].unwrap();
                        if log_depth {
                            t.ln()
                        } else {
                            t
                        }
                    }
                    Targets::Labels(l) => l[i].unwrap() as f64,
                };
                for (c, d) in dy.iter_mut().enumerate() {
                    let r = y[c] - t;
                    total += r * r;
                    *d = 2.0 * r;
                }
            }
            (Loss::CrossEntropy, Targets::Values(_)) => {
                return (f64::NAN, grad);
            }
        }
        for (o, &d) in dy.iter().enumerate() {
            if d == 0.0 {
                continue;
            }
            let g = &mut grad.weights[o * params.in_dim..][..params.in_dim];
            for (gi, &xi) in g.iter_mut().zip(x) {
                *gi += d * scale * xi as f64;
            }
            grad.bias[o] += d * scale;
        }
    }
    (total * scale, grad)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    /// Batch loss before each update.
    pub losses: Vec<f64>,
}

/// Trains a head from zero initialization.
pub fn train_head(set: &TrainingSet, task: Task, out_dim: usize, config: &TrainConfig) -> Result<(LinearHead, TrainReport), HeadError> {
    let mut init = LinearHead::zeros(task, set.in_dim, out_dim);
    init.cls_concat = config.cls_concat;
    init.log_depth = task == Task::Depth && config.log_depth;
    continue_training(init, set, config)
}

/// Runs `config.steps` SGD updates starting from `head`.
pub fn continue_training(head: LinearHead, set: &TrainingSet, config: &TrainConfig) -> Result<(LinearHead, TrainReport), HeadError> {
    config.validate()?;
    head.validate()?;
    if set.is_empty() {
        return Err(HeadError::InvalidTraining("no training positions".into()));
    }
    if set.in_dim != head.in_dim {
        return Err(HeadError::DimMismatch {
            expected: head.in_dim,
            found: set.in_dim,
        });
    }
    match (&set.targets, config.loss) {
        (Targets::Labels(labels), Loss::CrossEntropy) => {
            if let Some(l) = labels.iter().flatten().find(|&&l| l as usize >= head.out_dim) {
                return Err(HeadError::InvalidTraining(format!(
                    "label {l} out of range for {} classes",
                    head.out_dim
                )));
            }
        }
        (Targets::Values(values), Loss::Mse) => {
            if let Some(v) = values.iter().flatten().find(|v| !v.is_finite() || (head.log_depth && **v <= 0.0)) {
                return Err(HeadError::InvalidTraining(format!("invalid depth target {v}")));
            }
        }
        (Targets::Labels(_), Loss::Mse) => {}
        (Targets::Values(_), Loss::CrossEntropy) => {
            return Err(HeadError::InvalidTraining("cross-entropy needs label targets".into()));
        }
    }

    let mut params = HeadParams::from_head(&head);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let n = set.len();
    let mut order: Vec<usize> = (0..n).collect();
    let full_batch = config.batch >= n;
    let mut cursor = n;
    let mut losses = Vec::with_capacity(config.steps);

    for step in 0..config.steps {
        let batch: &[usize] = if full_batch {
            &order
        } else {
            if cursor + config.batch > n {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            cursor += config.batch;
            &order[cursor - config.batch..cursor]
        };
        let (loss, grad) = loss_and_grad(&params, set, batch, config.loss, head.log_depth);
        if !loss.is_finite() {
            return Err(HeadError::NonFiniteLoss {
                step,
                loss,
                learning_rate: config.learning_rate,
            });
        }
        losses.push(loss);
        if config.learning_rate == 0.0 {
            continue;
        }
        for (p, g) in params.weights.iter_mut().zip(&grad.weights) {
            *p -= config.learning_rate * g;
        }
        for (p, g) in params.bias.iter_mut().zip(&grad.bias) {
            *p -= config.learning_rate * g;
        }
    }

    let trained = LinearHead {
        weights: params.weights.iter().map(|&v| v as f32).collect(),
        bias: params.bias.iter().map(|&v| v as f32).collect(),
        layout_hash: if set.layout_hash.is_empty() {
            head.layout_hash
        } else {
            set.layout_hash.clone()
        },
        ..head
    };
    if trained.weights.iter().chain(&trained.bias).any(|v| !v.is_finite()) {
        return Err(HeadError::NonFiniteLoss {
            step: config.steps,
            loss: f64::NAN,
            learning_rate: config.learning_rate,
        });
    }
    Ok((trained, TrainReport { losses }))
}

/// Writes `head.weights.mrft`, `head.bias.mrft` and `head.meta.txt` into `dir`.
pub fn save_head(dir: impl AsRef<Path>, head: &LinearHead, extra: &BTreeMap<String, String>) -> Result<(), HeadError> {
    let dir = dir.as_ref();
    head.validate()?;
    write_tensor(
        dir.join("head.weights.mrft"),
        &Tensor::new(vec![head.out_dim, head.in_dim], head.weights.clone())?,
    )?;
    write_tensor(dir.join("head.bias.mrft"), &Tensor::new(vec![head.out_dim], head.bias.clone())?)?;
    let mut meta = BTreeMap::new();
    meta.insert("in_dim".to_string(), head.in_dim.to_string());
    meta.insert("out_dim".to_string(), head.out_dim.to_string());
    meta.insert("task".to_string(), head.task.to_string());
    meta.insert("cls_concat".to_string(), head.cls_concat.to_string());
    meta.insert("log_depth".to_string(), head.log_depth.to_string());
    meta.insert("layout_hash".to_string(), head.layout_hash.clone());
    for (k, v) in extra {
        meta.entry(k.clone()).or_insert_with(|| v.clone());
    }
    let text: String = meta.iter().map(|(k, v)| format!("{k}={v}\n")).collect();
    let path = dir.join("head.meta.txt");
    fs::write(&path, text).map_err(|source| TensorIoError::Io { path, source })?;
    Ok(())
}

/// Loads a head checkpoint and the full metadata map.
pub fn load_head(dir: impl AsRef<Path>) -> Result<(LinearHead, BTreeMap<String, String>), HeadError> {
    let dir = dir.as_ref();
    let path = dir.join("head.meta.txt");
    let text = fs::read_to_string(&path).map_err(|source| TensorIoError::Io { path, source })?;
    let meta: BTreeMap<String, String> = text
        .lines()
        .filter_map(|l| l.split_once('='))
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .collect();
    let get = |k: &str| {
        meta.get(k)
            .ok_or_else(|| HeadError::Invalid(format!("checkpoint metadata lacks `{k}`")))
    };
    let parse_usize = |k: &str| -> Result<usize, HeadError> {
        get(k)?.parse().map_err(|_| HeadError::Invalid(format!("bad `{k}`")))
    };
    let parse_bool = |k: &str| -> Result<bool, HeadError> {
        get(k)?.parse().map_err(|_| HeadError::Invalid(format!("bad `{k}`")))
    };
    let weights = read_tensor(dir.join("head.weights.mrft"))?;
    let bias = read_tensor(dir.join("head.bias.mrft"))?;
    let head = LinearHead {
        task: get("task")?.parse()?,
        in_dim: parse_usize("in_dim")?,
        out_dim: parse_usize("out_dim")?,
        weights: weights.data,
        bias: bias.data,
        cls_concat: parse_bool("cls_concat")?,
        log_depth: parse_bool("log_depth")?,
        layout_hash: get("layout_hash")?.clone(),
    };
    head.validate()?;
    Ok((head, meta))
}
