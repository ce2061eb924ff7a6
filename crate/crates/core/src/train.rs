//! AdamW with decoupled, selective weight decay; the training loop with early
//! stopping on validation MPJAE; and the evaluation driver.

use std::path::{Path, PathBuf};

use nalgebra::Matrix3;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Real, Tape, Tensor};
use crate::dataio::Paired;
use crate::error::{Error, Result};
use crate::metrics::{aggregate, evaluate_frame, EvalReport, FrameMetrics};
use crate::model::{total_loss, Model, ModelConfig, ParamStore, Predictor};
use crate::rig::{KinematicTree, RestBoneFrames};

/// Optimizer hyperparameters and per-parameter moments.
#[derive(Clone, Debug)]
pub struct AdamW<T> {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Real> AdamW<T> {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        AdamW { lr, weight_decay, beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, m: Vec::new(), v: Vec::new() }
    }

    /// One update. `grads[k]` belongs to the k-th parameter; `None` counts as zero.
    /// Decay multiplies by `1 − lr·wd` before the moment step, only for
    /// parameters flagged for decay.
    pub fn step(&mut self, params: &mut ParamStore<T>, grads: &[Option<&Tensor<T>>]) -> Result<()> {
        if grads.len() != params.len() {
            return Err(Error::shape("adamw_step", format!("{} gradients for {} parameters", grads.len(), params.len())));
        }
        for (p, g) in params.params().iter().zip(grads) {
            if let Some(g) = g {
                if g.shape() != p.value.shape() {
                    return Err(Error::shape("adamw_step", format!("gradient {:?} for '{}' {:?}", g.shape(), p.name, p.value.shape())));
                }
            }
        }
        if self.m.is_empty() {
            self.m = params.params().iter().map(|p| vec![T::zero(); p.value.len()]).collect();
            self.v = self.m.clone();
        }
        self.step += 1;
        let (b1, b2) = (T::c(self.beta1), T::c(self.beta2));
        let c1 = T::c(1.0 - self.beta1.powi(self.step as i32));
        let c2 = T::c(1.0 - self.beta2.powi(self.step as i32));
        let (lr, eps) = (T::c(self.lr), T::c(self.eps));
        let shrink = T::c(1.0 - self.lr * self.weight_decay);
        for (k, p) in params.params_mut().iter_mut().enumerate() {
            let decay = p.decay;
            let data = p.value.data_mut();
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for i in 0..data.len() {
                let g = grads[k].map_or(T::zero(), |g| g.data()[i]);
                if decay {
                    data[i] = data[i] * shrink;
                }
                m[i] = b1 * m[i] + (T::one() - b1) * g;
                v[i] = b2 * v[i] + (T::one() - b2) * g * g;
                let mh = m[i] / c1;
                let vh = v[i] / c2;
                data[i] = data[i] - lr * mh / (vh.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Outcome of feeding one validation score to [`EarlyStopping`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StopDecision {
    Improved,
    Continue,
    Stop,
}

/// Stops after `patience` consecutive epochs without strict improvement.
#[derive(Clone, Debug)]
pub struct EarlyStopping {
    pub patience: usize,
    pub best: f64,
    pub best_epoch: Option<usize>,
    stale: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        EarlyStopping { patience, best: f64::INFINITY, best_epoch: None, stale: 0 }
    }

    pub fn observe(&mut self, epoch: usize, metric: f64) -> StopDecision {
        if metric < self.best {
            self.best = metric;
            self.best_epoch = Some(epoch);
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

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub seed: u64,
    /// Weight of the forward-kinematics consistency term.
    pub alpha: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            model: ModelConfig::default(),
            batch_size: 64,
            max_epochs: 30,
            patience: 3,
            lr: 1e-3,
            weight_decay: 0.01,
            seed: 0,
            alpha: 0.1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.batch_size == 0 || self.patience == 0 || self.max_epochs == 0 {
            return Err(Error::Invalid("batch_size, patience and max_epochs must be positive".into()));
        }
        if !(self.alpha >= 0.0) || !(self.lr > 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::Invalid("alpha and weight_decay must be non-negative, lr positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_mpjae: f64,
}

pub struct TrainOutcome {
    /// Parameters from the epoch with the best validation MPJAE.
    pub model: Model<f32>,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
}

/// Per-epoch history as CSV with columns `epoch,train_loss,val_mpjae`.
pub fn history_csv(history: &[EpochRecord]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in history {
        w.serialize(r)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv is utf-8"))
}

/// Where the history of a checkpoint at `ckpt` is written.
pub fn history_path(ckpt: &Path) -> PathBuf {
    let mut s = ckpt.as_os_str().to_owned();
    s.push(".history.csv");
    PathBuf::from(s)
}

fn gather(data: &Paired, idx: &[usize]) -> (Vec<f32>, Vec<f32>) {
    let n = data.n;
    let mut pos = Vec::with_capacity(idx.len() * n * 3);
    let mut rot = Vec::with_capacity(idx.len() * n * 9);
    for &f in idx {
        pos.extend(data.positions[f * n * 3..(f + 1) * n * 3].iter().map(|&v| v as f32));
        rot.extend(data.bone[f * n * 9..(f + 1) * n * 9].iter().map(|&v| v as f32));
    }
    (pos, rot)
}

/// One optimizer step on a minibatch; returns the batch loss.
pub fn train_step(
    model: &mut Model<f32>,
    opt: &mut AdamW<f32>,
    positions: &[f32],
    bone: &[f32],
    batch: usize,
    alpha: f64,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    let rows = batch * model.joint_count();
    let mut tape = Tape::new();
    let p = model.params.bind(&mut tape, true);
    let x = tape.constant(Tensor::new(vec![rows, 3], positions.to_vec())?);
    let gt = tape.constant(Tensor::new(vec![rows, 9], bone.to_vec())?);
    let out = model.forward(&mut tape, &p, x, batch, true, rng)?;
    let (loss, _, _) = total_loss(&mut tape, model.consts(), out.rot, gt, x, batch, alpha)?;
    let value = tape.value(loss).item() as f64;
    if !value.is_finite() {
        return Ok(value);
    }
    tape.backward(loss)?;
    let grads: Vec<Option<&Tensor<f32>>> = p.vars.iter().map(|&v| tape.grad(v)).collect();
    opt.step(&mut model.params, &grads)?;
    Ok(value)
}

/// Trains a fresh model and returns the parameters of the best validation epoch.
pub fn train(tree: &KinematicTree, rest: &RestBoneFrames, train_set: &Paired, val_set: &Paired, cfg: &TrainConfig) -> Result<TrainOutcome> {
    train_with_progress(tree, rest, train_set, val_set, cfg, |_| {})
}

pub fn train_with_progress(
    tree: &KinematicTree,
    rest: &RestBoneFrames,
    train_set: &Paired,
    val_set: &Paired,
    cfg: &TrainConfig,
    mut progress: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.frames == 0 {
        return Err(Error::Empty("training set"));
    }
    if val_set.frames == 0 {
        return Err(Error::Empty("validation set"));
    }
    let n = tree.joint_count();
    if train_set.n != n || val_set.n != n {
        return Err(Error::RigMismatch("dataset joint count differs from the rig".into()));
    }
    let mut model = Model::<f32>::new(cfg.model.clone(), tree, cfg.seed)?;
    let mut opt = AdamW::new(cfg.lr, cfg.weight_decay);
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    shuffle_rng.set_stream(1);
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    dropout_rng.set_stream(2);
    let mut stopper = EarlyStopping::new(cfg.patience);
    let mut best = model.params.clone();
    let mut history = Vec::new();
    let mut order: Vec<usize> = (0..train_set.frames).collect();
    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut shuffle_rng);
        let mut sum = 0.0;
        for (b, idx) in order.chunks(cfg.batch_size).enumerate() {
            let (pos, rot) = gather(train_set, idx);
            let loss = train_step(&mut model, &mut opt, &pos, &rot, idx.len(), cfg.alpha, &mut dropout_rng)?;
            if !loss.is_finite() {
                return Err(Error::Divergence { epoch, batch: b + 1 });
            }
            sum += loss * idx.len() as f64;
        }
        let val = evaluate(&model, tree, rest, val_set)?.mpjae_deg;
        let rec = EpochRecord { epoch, train_loss: sum / train_set.frames as f64, val_mpjae: val };
        progress(&rec);
        history.push(rec);
        match stopper.observe(epoch, val) {
            StopDecision::Improved => best = model.params.clone(),
            StopDecision::Continue => {}
            StopDecision::Stop => break,
        }
    }
    model.params = best;
    Ok(TrainOutcome { model, history, best_epoch: stopper.best_epoch.expect("at least one epoch ran") })
}

/// Frames per inference call during evaluation.
pub const EVAL_CHUNK: usize = 256;

/// Runs `predictor` on `inputs` (`[F·N·3]`, root space) and scores against
/// the supervision in `gt`. Frames fan out in parallel; the reduction runs in
/// frame order, so results do not depend on scheduling.
pub fn evaluate_inputs(
    predictor: &dyn Predictor,
    tree: &KinematicTree,
    rest: &RestBoneFrames,
    inputs: &[f64],
    gt: &Paired,
) -> Result<EvalReport> {
    let n = tree.joint_count();
    if gt.n != n {
        return Err(Error::RigMismatch("dataset joint count differs from the rig".into()));
    }
    if inputs.len() != gt.positions.len() {
        return Err(Error::shape("evaluate", format!("{} input values for {} frames", inputs.len(), gt.frames)));
    }
    let x: Vec<f32> = inputs.iter().map(|&v| v as f32).collect();
    let chunks: Vec<Vec<FrameMetrics>> = x
        .par_chunks(EVAL_CHUNK * n * 3)
        .enumerate()
        .map(|(c, xs)| {
            let b = xs.len() / (n * 3);
            let pred = predictor.predict(xs, b)?;
            (0..b)
                .map(|k| {
                    let f = c * EVAL_CHUNK + k;
                    let pb: Vec<Matrix3<f64>> =
                        pred[k * n * 9..(k + 1) * n * 9].chunks(9).map(|r| Matrix3::from_row_slice(r).map(|v| v as f64)).collect();
                    evaluate_frame(tree, rest, &pb, &gt.frame_bone(f), &gt.frame_positions(f))
                })
                .collect()
        })
        .collect::<Result<_>>()?;
    let frames: Vec<FrameMetrics> = chunks.into_iter().flatten().collect();
    aggregate(&frames, tree.names())
}

pub fn evaluate(predictor: &dyn Predictor, tree: &KinematicTree, rest: &RestBoneFrames, data: &Paired) -> Result<EvalReport> {
    evaluate_inputs(predictor, tree, rest, &data.positions, data)
}
