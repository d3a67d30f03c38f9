//! Optimization and the experiment protocol around it.
//!
//! * [`adam_step`] is plain Adam with bias correction and a constant rate.
//! * [`Checkpoint`] is the on-disk parameter container.
//! * [`pretrain`] runs the masked-token / next-sentence loop.
//! * [`fit`] trains any model with early stopping on a development loss;
//!   [`train_until`] trains until a metric reaches a target.
//! * [`grid_search`] and [`repeat_with_seeds`] drive hyper-parameter
//!   selection and seed-averaged reporting.

use std::fs::{self, File};
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AutodiffError, Graph, ParamStore, Params, Real, Tensor, Var};
use crate::bert::{self, BertConfig, BertError};
use crate::crf::CrfError;
use crate::pretrain_data::PretrainInstance;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"HLM1";

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("non-finite gradient for parameter {0}")]
    NonFiniteGradient(String),
    #[error("gradient for {name} has shape {got:?}, parameter has {expected:?}")]
    GradientShape { name: String, expected: Vec<usize>, got: Vec<usize> },
    #[error("no gradient for parameter {0}")]
    MissingGradient(String),
    #[error("no training data")]
    EmptyData,
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),
    #[error("every grid point failed: {0}")]
    AllPointsFailed(String),
    #[error("{0}")]
    Model(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl From<AutodiffError> for TrainError {
    fn from(e: AutodiffError) -> Self {
        TrainError::Model(e.to_string())
    }
}

impl From<BertError> for TrainError {
    fn from(e: BertError) -> Self {
        TrainError::Model(e.to_string())
    }
}

impl From<CrfError> for TrainError {
    fn from(e: CrfError) -> Self {
        TrainError::Model(e.to_string())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Rescale gradients whose global L2 norm exceeds this value.
    pub clip_norm: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            clip_norm: None,
        }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self { lr, ..Self::default() }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<R = f32> {
    pub m: ParamStore<R>,
    pub v: ParamStore<R>,
    pub t: u64,
}

impl<R: Real> AdamState<R> {
    pub fn new(params: &ParamStore<R>) -> Self {
        Self {
            m: params.zeros_like(),
            v: params.zeros_like(),
            t: 0,
        }
    }
}

/// One Adam update. Nothing is modified when any gradient is non-finite or
/// mis-shaped.
pub fn adam_step<R: Real>(
    params: &mut ParamStore<R>,
    grads: &ParamStore<R>,
    state: &mut AdamState<R>,
    config: &AdamConfig,
) -> Result<(), TrainError> {
    let mut sq_norm = 0.0f64;
    for (name, p) in params.iter() {
        let g = grads.get(name).ok_or_else(|| TrainError::MissingGradient(name.clone()))?;
        if g.shape() != p.shape() {
            return Err(TrainError::GradientShape {
                name: name.clone(),
                expected: p.shape().to_vec(),
                got: g.shape().to_vec(),
            });
        }
        if !g.all_finite() {
            return Err(TrainError::NonFiniteGradient(name.clone()));
        }
        sq_norm += g.data().iter().map(|x| x.f64() * x.f64()).sum::<f64>();
    }
    let clip = match config.clip_norm {
        Some(max) if sq_norm.sqrt() > max => max / sq_norm.sqrt(),
        _ => 1.0,
    };
    state.t += 1;
    let t = state.t as i32;
    let (b1, b2) = (R::c(config.beta1), R::c(config.beta2));
    let c1 = R::c(1.0 - config.beta1.powi(t));
    let c2 = R::c(1.0 - config.beta2.powi(t));
    let (lr, eps, clip) = (R::c(config.lr), R::c(config.epsilon), R::c(clip));
    for (name, p) in params.iter_mut() {
        let g = grads.get(name).expect("checked above");
        let m = state.m.get_mut(name).ok_or_else(|| TrainError::MissingGradient(name.clone()))?;
        let m = m.data_mut();
        let v = state.v.get_mut(name).expect("moments mirror parameters").data_mut();
        for (i, (x, &gi)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
            let gi = gi * clip;
            m[i] = b1 * m[i] + (R::one() - b1) * gi;
            v[i] = b2 * v[i] + (R::one() - b2) * gi * gi;
            let mhat = m[i] / c1;
            let vhat = v[i] / c2;
            *x -= lr * mhat / (vhat.sqrt() + eps);
        }
    }
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointMeta {
    config: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

/// Named `f32` tensors plus free-form JSON configuration.
///
/// Layout: `HLM1`, a little-endian `u32` metadata length, the JSON metadata
/// `{config, tensors: [{name, shape, offset}]}`, then every tensor's data as
/// little-endian `f32` in name order. Offsets are in bytes from the start of
/// the data section.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: serde_json::Value,
    pub params: ParamStore,
}

impl Checkpoint {
    pub fn new(config: serde_json::Value, params: ParamStore) -> Self {
        Self { config, params }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>, TrainError> {
        let mut tensors = Vec::with_capacity(self.params.len());
        let mut offset = 0;
        for (name, t) in self.params.iter() {
            tensors.push(TensorEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
                offset,
            });
            offset += 4 * t.numel();
        }
        let meta = serde_json::to_vec(&CheckpointMeta {
            config: self.config.clone(),
            tensors,
        })?;
        let meta_len = u32::try_from(meta.len()).map_err(|_| TrainError::Checkpoint("metadata too large".into()))?;
        let mut out = Vec::with_capacity(8 + meta.len() + offset);
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&meta_len.to_le_bytes());
        out.extend_from_slice(&meta);
        for (_, t) in self.params.iter() {
            for x in t.data() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, TrainError> {
        let bad = |m: &str| TrainError::Checkpoint(m.to_string());
        if bytes.len() < 8 || &bytes[..4] != CHECKPOINT_MAGIC {
            return Err(bad("missing HLM1 header"));
        }
        let meta_len = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
        let data_start = 8usize
            .checked_add(meta_len)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| bad("metadata runs past the end"))?;
        let meta: CheckpointMeta = serde_json::from_slice(&bytes[8..data_start])?;
        let data = &bytes[data_start..];
        let mut params = ParamStore::new();
        let mut expected_offset = 0;
        for entry in meta.tensors {
            let n: usize = entry.shape.iter().product();
            if entry.offset != expected_offset {
                return Err(bad(&format!("tensor {} is out of order", entry.name)));
            }
            let end = entry.offset + 4 * n;
            if end > data.len() {
                return Err(bad(&format!("tensor {} is truncated", entry.name)));
            }
            let values = data[entry.offset..end]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            let tensor = Tensor::new(entry.shape, values).map_err(|e| bad(&e.to_string()))?;
            params.insert(entry.name, tensor);
            expected_offset = end;
        }
        if expected_offset != data.len() {
            return Err(bad("trailing bytes after the last tensor"));
        }
        Ok(Self {
            config: meta.config,
            params,
        })
    }

    /// Writes to a sibling temporary file and renames it into place; the
    /// temporary file is removed on failure.
    pub fn save(&self, path: &Path) -> Result<(), TrainError> {
        let bytes = self.to_bytes()?;
        let mut tmp = path.as_os_str().to_owned();
        tmp.push(".tmp");
        let tmp = PathBuf::from(tmp);
        let result = (|| -> std::io::Result<()> {
            let mut f = File::create(&tmp)?;
            f.write_all(&bytes)?;
            f.sync_all()?;
            fs::rename(&tmp, path)
        })();
        if let Err(e) = result {
            let _ = fs::remove_file(&tmp);
            return Err(e.into());
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, TrainError> {
        let mut bytes = Vec::new();
        File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }

    /// The `"model"` entry of the configuration.
    pub fn bert_config(&self) -> Result<BertConfig, TrainError> {
        let model = self
            .config
            .get("model")
            .ok_or_else(|| TrainError::Checkpoint("configuration has no model entry".into()))?;
        Ok(serde_json::from_value(model.clone())?)
    }
}

/// Index batches over `n` items in a seeded random order.
pub fn shuffled_batches<R: rand::Rng>(n: usize, batch_size: usize, rng: &mut R) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    /// Write `step-{n}.hlm` every this many steps.
    pub checkpoint_every: Option<usize>,
    pub clip_norm: Option<f64>,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            batch_size: 32,
            lr: 1e-4,
            seed: 0,
            checkpoint_every: None,
            clip_norm: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct PretrainRun {
    pub checkpoint: Checkpoint,
    /// `(step, loss)` for every optimizer step, starting at 1.
    pub loss_curve: Vec<(usize, f64)>,
}

pub fn checkpoint_config(model: &BertConfig, extra: serde_json::Value) -> serde_json::Value {
    let mut cfg = serde_json::json!({ "model": model });
    if let (Some(obj), serde_json::Value::Object(more)) = (cfg.as_object_mut(), extra) {
        obj.extend(more);
    }
    cfg
}

/// Pre-trains from `init` for `config.steps` steps. Batches are drawn from a
/// seeded shuffle that is redrawn every pass over the data; dropout masks
/// come from a separate seeded stream. When `out_dir` is given, periodic
/// checkpoints, `model.hlm` and `loss.csv` are written there.
pub fn pretrain(
    data: &[PretrainInstance],
    model: &BertConfig,
    init: ParamStore,
    config: &PretrainConfig,
    out_dir: Option<&Path>,
) -> Result<PretrainRun, TrainError> {
    if data.is_empty() {
        return Err(TrainError::EmptyData);
    }
    if config.batch_size == 0 {
        return Err(TrainError::Config("batch_size must be positive".into()));
    }
    let mut params = init;
    let mut state = AdamState::new(&params);
    let adam = AdamConfig {
        lr: config.lr,
        clip_norm: config.clip_norm,
        ..AdamConfig::default()
    };
    let mut order_rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut dropout_seeds = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed_d80f);
    let mut queue: Vec<Vec<usize>> = Vec::new();
    let mut curve = Vec::with_capacity(config.steps);
    let cfg_json = checkpoint_config(model, serde_json::json!({ "pretrain": config }));
    for step in 1..=config.steps {
        if queue.is_empty() {
            queue = shuffled_batches(data.len(), config.batch_size, &mut order_rng);
            queue.reverse();
        }
        let idx = queue.pop().expect("refilled above");
        let batch: Vec<PretrainInstance> = idx.iter().map(|&i| data[i].clone()).collect();
        let mut g = Graph::training(rand::Rng::random(&mut dropout_seeds));
        let p = g.bind(&params);
        let out = bert::mlm_nsp_loss(&mut g, &p, model, &batch)?;
        let grads = g.backward(out.loss)?.params(&g, &p);
        adam_step(&mut params, &grads, &mut state, &adam)?;
        curve.push((step, g.value(out.loss).item() as f64));
        if let (Some(dir), Some(every)) = (out_dir, config.checkpoint_every) {
            if every > 0 && step % every == 0 {
                Checkpoint::new(cfg_json.clone(), params.clone()).save(&dir.join(format!("step-{step}.hlm")))?;
            }
        }
    }
    let checkpoint = Checkpoint::new(cfg_json, params);
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir)?;
        checkpoint.save(&dir.join("model.hlm"))?;
        write_loss_curve(&curve, &dir.join("loss.csv"))?;
    }
    Ok(PretrainRun {
        checkpoint,
        loss_curve: curve,
    })
}

pub fn write_loss_curve(curve: &[(usize, f64)], path: &Path) -> Result<(), TrainError> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "step,loss")?;
    for (s, l) in curve {
        writeln!(w, "{s},{l}")?;
    }
    w.flush()?;
    Ok(())
}

/// Masked-token and next-sentence accuracy of `params` on `data`, in eval
/// mode.
pub fn pretrain_accuracy(
    data: &[PretrainInstance],
    model: &BertConfig,
    params: &ParamStore,
    batch_size: usize,
) -> Result<(f64, f64), TrainError> {
    let (mut mlm_ok, mut mlm_n, mut nsp_ok) = (0, 0, 0);
    for chunk in data.chunks(batch_size.max(1)) {
        let mut g = Graph::new();
        let p = g.bind(params);
        let out = bert::mlm_nsp_loss(&mut g, &p, model, chunk)?;
        mlm_ok += out.mlm_correct;
        mlm_n += out.mlm_total;
        nsp_ok += out.nsp_correct;
    }
    Ok((mlm_ok as f64 / mlm_n.max(1) as f64, nsp_ok as f64 / data.len().max(1) as f64))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopDecision {
    Improved,
    Continue,
    Stop,
}

/// Patience-based early stopping on a loss; only strict decreases count as
/// improvements.
#[derive(Debug, Clone, PartialEq)]
pub struct EarlyStopping {
    pub patience: usize,
    pub best: Option<f64>,
    /// 1-based index of the best evaluation.
    pub best_epoch: usize,
    pub evaluations: usize,
    stale: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best: None,
            best_epoch: 0,
            evaluations: 0,
            stale: 0,
        }
    }

    pub fn observe(&mut self, loss: f64) -> StopDecision {
        self.evaluations += 1;
        if self.best.is_none_or(|b| loss < b) {
            self.best = Some(loss);
            self.best_epoch = self.evaluations;
            self.stale = 0;
            return StopDecision::Improved;
        }
        self.stale += 1;
        if self.stale >= self.patience {
            StopDecision::Stop
        } else {
            StopDecision::Continue
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub patience: usize,
    /// Optional cap; the protocol itself has none.
    pub max_epochs: Option<usize>,
    pub seed: u64,
    pub clip_norm: Option<f64>,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            lr: 5e-5,
            batch_size: 16,
            patience: 3,
            max_epochs: None,
            seed: 0,
            clip_norm: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct FitResult {
    /// Parameters from the best epoch.
    pub params: ParamStore,
    pub dev_losses: Vec<f64>,
    pub best_epoch: usize,
    pub best_dev_loss: f64,
    pub steps: usize,
}

/// Trains epoch by epoch, evaluating `dev_loss` after each epoch, and stops
/// once it has failed to improve `patience` times in a row. Returns the best
/// epoch's parameters.
pub fn fit<E, L, D>(
    init: ParamStore,
    train: &[E],
    mut batch_loss: L,
    mut dev_loss: D,
    config: &FitConfig,
) -> Result<FitResult, TrainError>
where
    L: FnMut(&mut Graph<f32>, &Params, &[&E]) -> Result<Var, TrainError>,
    D: FnMut(&ParamStore) -> Result<f64, TrainError>,
{
    if train.is_empty() {
        return Err(TrainError::EmptyData);
    }
    if config.patience == 0 || config.batch_size == 0 {
        return Err(TrainError::Config("patience and batch_size must be positive".into()));
    }
    let mut params = init;
    let mut state = AdamState::new(&params);
    let adam = AdamConfig {
        lr: config.lr,
        clip_norm: config.clip_norm,
        ..AdamConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut stopper = EarlyStopping::new(config.patience);
    let mut best = params.clone();
    let mut losses = Vec::new();
    let mut steps = 0;
    loop {
        for idx in shuffled_batches(train.len(), config.batch_size, &mut rng) {
            let batch: Vec<&E> = idx.iter().map(|&i| &train[i]).collect();
            let mut g = Graph::training(rand::Rng::random(&mut rng));
            let p = g.bind(&params);
            let loss = batch_loss(&mut g, &p, &batch)?;
            let grads = g.backward(loss)?.params(&g, &p);
            adam_step(&mut params, &grads, &mut state, &adam)?;
            steps += 1;
        }
        let dl = dev_loss(&params)?;
        losses.push(dl);
        match stopper.observe(dl) {
            StopDecision::Improved => best = params.clone(),
            StopDecision::Stop => break,
            StopDecision::Continue => {}
        }
        if config.max_epochs.is_some_and(|m| losses.len() >= m) {
            break;
        }
    }
    Ok(FitResult {
        params: best,
        best_dev_loss: stopper.best.unwrap_or(f64::INFINITY),
        best_epoch: stopper.best_epoch,
        dev_losses: losses,
        steps,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UntilConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub max_steps: usize,
    /// Evaluate the metric every this many steps.
    pub eval_every: usize,
    pub target: f64,
    pub seed: u64,
    pub clip_norm: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct UntilResult {
    pub params: ParamStore,
    /// First evaluated step at which the metric reached the target.
    pub steps_to_target: Option<usize>,
    /// `(step, metric)` at every evaluation.
    pub curve: Vec<(usize, f64)>,
}

/// Trains until `metric` reaches `config.target` or `max_steps` optimizer
/// steps have been taken, evaluating every `eval_every` steps.
pub fn train_until<E, L, M>(
    init: ParamStore,
    train: &[E],
    mut batch_loss: L,
    mut metric: M,
    config: &UntilConfig,
) -> Result<UntilResult, TrainError>
where
    L: FnMut(&mut Graph<f32>, &Params, &[&E]) -> Result<Var, TrainError>,
    M: FnMut(&ParamStore) -> Result<f64, TrainError>,
{
    if train.is_empty() {
        return Err(TrainError::EmptyData);
    }
    if config.batch_size == 0 || config.eval_every == 0 {
        return Err(TrainError::Config("batch_size and eval_every must be positive".into()));
    }
    let mut params = init;
    let mut state = AdamState::new(&params);
    let adam = AdamConfig {
        lr: config.lr,
        clip_norm: config.clip_norm,
        ..AdamConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut queue: Vec<Vec<usize>> = Vec::new();
    let mut curve = Vec::new();
    for step in 1..=config.max_steps {
        if queue.is_empty() {
            queue = shuffled_batches(train.len(), config.batch_size, &mut rng);
            queue.reverse();
        }
        let idx = queue.pop().expect("refilled above");
        let batch: Vec<&E> = idx.iter().map(|&i| &train[i]).collect();
        let mut g = Graph::training(rand::Rng::random(&mut rng));
        let p = g.bind(&params);
        let loss = batch_loss(&mut g, &p, &batch)?;
        let grads = g.backward(loss)?.params(&g, &p);
        adam_step(&mut params, &grads, &mut state, &adam)?;
        if step % config.eval_every == 0 || step == config.max_steps {
            let m = metric(&params)?;
            curve.push((step, m));
            if m >= config.target {
                return Ok(UntilResult {
                    params,
                    steps_to_target: Some(step),
                    curve,
                });
            }
        }
    }
    Ok(UntilResult {
        params,
        steps_to_target: None,
        curve,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridAxis {
    pub name: String,
    pub values: Vec<f64>,
}

/// Named axes. Points are enumerated like an odometer: the last axis varies
/// fastest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub axes: Vec<GridAxis>,
}

pub type GridPoint = Vec<(String, f64)>;

impl GridSpec {
    pub fn new(axes: &[(&str, &[f64])]) -> Self {
        Self {
            axes: axes
                .iter()
                .map(|(n, v)| GridAxis {
                    name: n.to_string(),
                    values: v.to_vec(),
                })
                .collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.axes.iter().map(|a| a.values.len()).product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn points(&self) -> Vec<GridPoint> {
        let mut out = Vec::with_capacity(self.len());
        if self.axes.is_empty() || self.is_empty() {
            return out;
        }
        let mut idx = vec![0usize; self.axes.len()];
        loop {
            out.push(
                self.axes
                    .iter()
                    .zip(&idx)
                    .map(|(a, &i)| (a.name.clone(), a.values[i]))
                    .collect(),
            );
            let mut d = self.axes.len();
            loop {
                if d == 0 {
                    return out;
                }
                d -= 1;
                idx[d] += 1;
                if idx[d] < self.axes[d].values.len() {
                    break;
                }
                idx[d] = 0;
            }
        }
    }
}

/// Value of a named coordinate.
pub fn grid_value(point: &GridPoint, name: &str) -> Option<f64> {
    point.iter().find(|(n, _)| n == name).map(|(_, v)| *v)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridRow {
    pub point: GridPoint,
    pub dev_loss: Option<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridResult {
    pub best_index: usize,
    pub best_point: GridPoint,
    pub best_dev_loss: f64,
    pub table: Vec<GridRow>,
}

/// Evaluates every point and returns the one with the lowest development
/// loss; ties go to the earlier point. Failed or non-finite points are kept
/// in the table but never win.
pub fn grid_search<F>(spec: &GridSpec, mut train_and_eval: F) -> Result<GridResult, TrainError>
where
    F: FnMut(&GridPoint) -> Result<f64, TrainError>,
{
    let points = spec.points();
    if points.is_empty() {
        return Err(TrainError::Config("grid has no points".into()));
    }
    let mut table = Vec::with_capacity(points.len());
    let mut best: Option<(usize, f64)> = None;
    for (i, point) in points.into_iter().enumerate() {
        let row = match train_and_eval(&point) {
            Ok(l) if l.is_finite() => {
                if best.is_none_or(|(_, b)| l < b) {
                    best = Some((i, l));
                }
                GridRow {
                    point,
                    dev_loss: Some(l),
                    error: None,
                }
            }
            Ok(l) => GridRow {
                point,
                dev_loss: None,
                error: Some(format!("non-finite dev loss {l}")),
            },
            Err(e) => GridRow {
                point,
                dev_loss: None,
                error: Some(e.to_string()),
            },
        };
        table.push(row);
    }
    let Some((best_index, best_dev_loss)) = best else {
        let errors: Vec<String> = table.iter().filter_map(|r| r.error.clone()).collect();
        return Err(TrainError::AllPointsFailed(errors.join("; ")));
    };
    Ok(GridResult {
        best_index,
        best_point: table[best_index].point.clone(),
        best_dev_loss,
        table,
    })
}

/// Per-seed values with their mean and sample standard deviation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub seeds: Vec<u64>,
    pub values: Vec<f64>,
    pub n: usize,
    pub mean: f64,
    /// Uses the `n - 1` denominator.
    pub std: f64,
}

impl RunReport {
    pub fn from_values(seeds: Vec<u64>, values: Vec<f64>) -> Result<Self, TrainError> {
        if values.len() < 2 {
            return Err(TrainError::Config(format!(
                "a standard deviation needs at least 2 runs, got {}",
                values.len()
            )));
        }
        // Welford's update.
        let (mut mean, mut m2) = (0.0, 0.0);
        for (k, &x) in values.iter().enumerate() {
            let d = x - mean;
            mean += d / (k + 1) as f64;
            m2 += d * (x - mean);
        }
        let n = values.len();
        Ok(Self {
            seeds,
            values,
            n,
            mean,
            std: (m2 / (n - 1) as f64).sqrt(),
        })
    }
}

/// Runs `train` once per seed and summarizes the returned metric.
pub fn repeat_with_seeds<F>(seeds: &[u64], mut train: F) -> Result<RunReport, TrainError>
where
    F: FnMut(u64) -> Result<f64, TrainError>,
{
    let values = seeds.iter().map(|&s| train(s)).collect::<Result<Vec<_>, _>>()?;
    RunReport::from_values(seeds.to_vec(), values)
}
