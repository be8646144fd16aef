//! Deep supervision with adaptive halting.
//!
//! A pool of `batch_size` slots each holds one training sample and its
//! carry. Every optimizer step advances all slots by one supervision step;
//! slots whose sample halts are refilled from a per-epoch shuffled stream.
//! Slots are processed in fixed-size chunks, possibly in parallel, and chunk
//! gradients are summed in chunk order so results do not depend on the
//! number of worker threads.

use std::sync::Arc;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::inference::evaluate;
use crate::metrics::exact_match;
use crate::model::{Carry, GradMode, ModelParams, Trm};
use crate::puzzle::{derive_seed, PuzzleInstance};
use crate::tensor::{Graph, Real, Tensor};

/// Halt when the Q head predicts success or the step budget is spent.
pub fn act_halt(q_logit: f64, steps: usize, n_sup: usize) -> bool {
    let p = 1.0 / (1.0 + (-q_logit).exp());
    p > 0.5 || steps >= n_sup
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub clip_norm: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 0.1,
            clip_norm: Some(1.0),
        }
    }
}

/// First and second moments, one tensor per parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub step: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Real> AdamState<T> {
    pub fn new(params: &ModelParams<T>) -> Self {
        let zeros = || {
            params
                .tensors()
                .iter()
                .map(|t| Tensor::zeros(t.shape().to_vec()))
                .collect()
        };
        Self {
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct UpdateStats {
    pub grad_norm: f64,
    pub clipped: bool,
}

/// One bias-corrected Adam step with decoupled weight decay on matrices.
pub fn adam_update<T: Real>(
    params: &mut ModelParams<T>,
    grads: &[Tensor<T>],
    state: &mut AdamState<T>,
    cfg: &AdamConfig,
    lr: f64,
) -> Result<UpdateStats> {
    let n = params.tensors().len();
    if grads.len() != n || state.m.len() != n || state.v.len() != n {
        return Err(Error::shape(
            "adam_update",
            "gradient count differs from parameter count",
        ));
    }
    for (g, p) in grads.iter().zip(params.tensors()) {
        if g.shape() != p.shape() {
            return Err(Error::shape(
                "adam_update",
                format!("gradient {:?} for {:?}", g.shape(), p.shape()),
            ));
        }
        g.check_finite("adam_update")?;
    }
    let grad_norm = grads.iter().map(Tensor::sum_squares).sum::<f64>().sqrt();
    let scale = match cfg.clip_norm {
        Some(c) if grad_norm > c => c / grad_norm,
        _ => 1.0,
    };
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for i in 0..n {
        let decay = if params.tensors()[i].shape().len() >= 2 {
            cfg.weight_decay
        } else {
            0.0
        };
        let p = params.tensor_mut(i);
        let (m, v) = (state.m[i].data_mut(), state.v[i].data_mut());
        for (j, (pv, &gv)) in p.data_mut().iter_mut().zip(grads[i].data()).enumerate() {
            let g = gv.f64() * scale;
            let mj = cfg.beta1 * m[j].f64() + (1.0 - cfg.beta1) * g;
            let vj = cfg.beta2 * v[j].f64() + (1.0 - cfg.beta2) * g * g;
            m[j] = T::of(mj);
            v[j] = T::of(vj);
            let mhat = mj / bc1;
            let vhat = vj / bc2;
            let mut x = pv.f64();
            x -= lr * decay * x;
            x -= lr * mhat / (vhat.sqrt() + cfg.eps);
            *pv = T::of(x);
        }
    }
    Ok(UpdateStats {
        grad_norm,
        clipped: scale < 1.0,
    })
}

/// Result of one supervision step on a batch.
#[derive(Clone, Debug)]
pub struct StepOutput<T> {
    pub loss: f64,
    pub ce: f64,
    pub bce: f64,
    /// Detached carry to resume from.
    pub carry: Carry<T>,
    pub q_logits: Vec<f64>,
    pub exact: Vec<bool>,
    /// Parameter gradients in canonical order.
    pub grads: Vec<Tensor<T>>,
}

/// One deep recursion plus heads on `B·L` tokens, with loss
/// `mean_b [CE(f_O(y_b), y_true_b) + BCE(q_b, 1[exact_b])]`. Pad cells are
/// left out of the cross entropy and of the exact-match test.
pub fn supervision_step<T: Real>(
    model: &Trm<T>,
    x: &[u32],
    y_true: &[u32],
    carry: &Carry<T>,
    pad: u32,
) -> Result<StepOutput<T>> {
    let l = model.config().seq_len;
    if x.len() != y_true.len() || x.len() != carry.z.rows() || carry.z.shape() != carry.y.shape() {
        return Err(Error::shape(
            "supervision_step",
            format!(
                "{} inputs, {} targets, carry {:?}",
                x.len(),
                y_true.len(),
                carry.z.shape()
            ),
        ));
    }
    let mut g = Graph::new();
    g.set_grad_enabled(true);
    let bp = model.bind(&mut g);
    let xv = model.embed(&mut g, &bp, x)?;
    let z0 = g.constant(Arc::clone(&carry.z));
    let y0 = g.constant(Arc::clone(&carry.y));
    let (z, y) = model.deep_recursion(&mut g, &bp, xv, z0, y0, GradMode::Truncated)?;
    let logits = model.output_logits(&mut g, &bp, y)?;
    let q = model.q_logit(&mut g, &bp, y)?;
    let pred = crate::model::decode(g.value(logits));
    let exact: Vec<bool> = pred
        .chunks(l)
        .zip(y_true.chunks(l))
        .map(|(p, t)| exact_match(p, t, pad))
        .collect();
    let targets: Vec<usize> = y_true.iter().map(|&t| t as usize).collect();
    let ce = g.softmax_cross_entropy(logits, &targets, pad as usize, l)?;
    let flags: Vec<f64> = exact.iter().map(|&e| f64::from(u8::from(e))).collect();
    let bce = g.bce_with_logits(q, &flags)?;
    let loss = g.add(ce, bce)?;
    let loss_value = g.value(loss).item().f64();
    if !loss_value.is_finite() {
        return Err(Error::NonFinite {
            op: "supervision_step",
        });
    }
    g.backward(loss)?;
    let grads = bp
        .vars()
        .iter()
        .zip(model.params().tensors())
        .map(|(&v, p)| {
            g.grad(v)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(p.shape().to_vec()))
        })
        .collect();
    Ok(StepOutput {
        loss: loss_value,
        ce: g.value(ce).item().f64(),
        bce: g.value(bce).item().f64(),
        carry: Carry {
            z: g.value_arc(z),
            y: g.value_arc(y),
        },
        q_logits: g.value(q).to_f64_vec(),
        exact,
        grads,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EarlyStopWindow {
    pub lo: f64,
    pub hi: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub seed: u64,
    pub batch_size: usize,
    /// Slots per gradient chunk; fixes the summation order.
    pub chunk_size: usize,
    pub epochs: usize,
    pub max_steps: Option<u64>,
    pub lr: f64,
    pub warmup_steps: u64,
    /// Cosine decay from `lr` to `lr * min_lr_ratio` over this many steps
    /// after warmup; constant when `None`.
    pub decay_steps: Option<u64>,
    pub min_lr_ratio: f64,
    pub adam: AdamConfig,
    pub halting: bool,
    /// Validate every this many optimizer steps, in addition to every epoch.
    pub eval_every_steps: Option<u64>,
    /// Depth of the deterministic validation pass; defaults to `n_sup`.
    pub eval_depth: Option<usize>,
    pub checkpoint_every_epochs: Option<usize>,
    /// Stop once validation exact accuracy reaches this value.
    pub target_exact: Option<f64>,
    /// Stop at the first validation whose exact accuracy lies in the window.
    pub early_stop: Option<EarlyStopWindow>,
    /// Wall-clock budget; breaks bit-reproducibility when it triggers.
    pub time_budget_secs: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            batch_size: 64,
            chunk_size: 16,
            epochs: 10,
            max_steps: None,
            lr: 1e-3,
            warmup_steps: 100,
            decay_steps: None,
            min_lr_ratio: 0.1,
            adam: AdamConfig::default(),
            halting: true,
            eval_every_steps: None,
            eval_depth: None,
            checkpoint_every_epochs: Some(1),
            target_exact: None,
            early_stop: None,
            time_budget_secs: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.chunk_size == 0 || self.epochs == 0 {
            return Err(Error::Config(
                "batch_size, chunk_size and epochs must be positive".into(),
            ));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::Config(format!(
                "learning rate must be positive, got {}",
                self.lr
            )));
        }
        if let Some(w) = &self.early_stop {
            if !(0.0..=1.0).contains(&w.lo) || w.lo > w.hi || w.hi > 1.0 {
                return Err(Error::Config(format!(
                    "bad early-stop window [{}, {}]",
                    w.lo, w.hi
                )));
            }
        }
        Ok(())
    }

    pub fn lr_at(&self, step: u64) -> f64 {
        if step < self.warmup_steps {
            return self.lr * (step + 1) as f64 / self.warmup_steps as f64;
        }
        match self.decay_steps {
            Some(d) if d > 0 => {
                let p = ((step - self.warmup_steps) as f64 / d as f64).min(1.0);
                let floor = self.lr * self.min_lr_ratio;
                floor + (self.lr - floor) * 0.5 * (1.0 + (std::f64::consts::PI * p).cos())
            }
            _ => self.lr,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Slot<T> {
    pub sample: usize,
    pub steps: usize,
    pub carry: Carry<T>,
}

/// Everything needed to continue training bit-exactly.
#[derive(Debug)]
pub struct TrainState<T> {
    pub model: Trm<T>,
    pub adam: AdamState<T>,
    pub step: u64,
    /// Epoch of the sample stream position.
    pub epoch: usize,
    /// Position within the current epoch's permutation.
    pub cursor: usize,
    pub slots: Vec<Slot<T>>,
    pub history: Vec<EvalRecord>,
}

impl<T: Real> Clone for TrainState<T> {
    fn clone(&self) -> Self {
        Self {
            model: self.model.clone(),
            adam: self.adam.clone(),
            step: self.step,
            epoch: self.epoch,
            cursor: self.cursor,
            slots: self.slots.clone(),
            history: self.history.clone(),
        }
    }
}

impl<T: Real> TrainState<T> {
    pub fn new(model: Trm<T>) -> Self {
        let adam = AdamState::new(model.params());
        Self {
            model,
            adam,
            step: 0,
            epoch: 0,
            cursor: 0,
            slots: Vec::new(),
            history: Vec::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub epoch: usize,
    pub loss: f64,
    pub ce: f64,
    pub bce: f64,
    pub lr: f64,
    pub halted_fraction: f64,
    pub grad_norm: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub step: u64,
    pub epoch: usize,
    pub val_exact: f64,
    pub val_cell: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StopReason {
    Epochs,
    MaxSteps,
    Target,
    EarlyStopWindow,
    TimeBudget,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub steps: u64,
    pub epochs_completed: usize,
    pub stop_reason: StopReason,
    pub last_eval: Option<EvalRecord>,
    pub best_val_exact: f64,
    pub elapsed_secs: f64,
}

/// Receives training events; all methods default to no-ops.
pub trait FitObserver<T> {
    fn on_step(&mut self, _record: &StepRecord) -> Result<()> {
        Ok(())
    }
    fn on_eval(&mut self, _record: &EvalRecord) -> Result<()> {
        Ok(())
    }
    fn on_checkpoint(&mut self, _state: &TrainState<T>) -> Result<()> {
        Ok(())
    }
}

pub struct NoObserver;

impl<T> FitObserver<T> for NoObserver {}

/// Writes step and eval records as JSON lines tagged with `"event"`.
pub struct JsonlLog<W> {
    pub out: W,
}

impl<W: std::io::Write, T> FitObserver<T> for JsonlLog<W> {
    fn on_step(&mut self, r: &StepRecord) -> Result<()> {
        write_event(&mut self.out, "step", r)
    }
    fn on_eval(&mut self, r: &EvalRecord) -> Result<()> {
        write_event(&mut self.out, "eval", r)
    }
}

pub(crate) fn write_event<W: std::io::Write, R: Serialize>(
    out: &mut W,
    event: &str,
    r: &R,
) -> Result<()> {
    let mut v = serde_json::to_value(r)?;
    if let serde_json::Value::Object(map) = &mut v {
        map.insert("event".into(), event.into());
    }
    serde_json::to_writer(&mut *out, &v)?;
    out.write_all(b"\n")
        .map_err(|e| Error::io("metrics log", e))
}

fn epoch_order(seed: u64, epoch: usize, n: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(&[
        seed,
        0xE90C,
        epoch as u64,
    ])));
    order
}

struct ChunkResult<T> {
    loss: f64,
    ce: f64,
    bce: f64,
    carries: Vec<Carry<T>>,
    q: Vec<f64>,
    grads: Vec<Tensor<T>>,
}

fn run_chunk<T: Real>(
    model: &Trm<T>,
    train: &[PuzzleInstance],
    slots: &[Slot<T>],
    pad: u32,
) -> Result<ChunkResult<T>> {
    let l = model.config().seq_len;
    let x: Vec<u32> = slots
        .iter()
        .flat_map(|s| train[s.sample].x.iter().copied())
        .collect();
    let y: Vec<u32> = slots
        .iter()
        .flat_map(|s| train[s.sample].y.iter().copied())
        .collect();
    let carries: Vec<Carry<T>> = slots.iter().map(|s| s.carry.clone()).collect();
    let carry = Carry::stack(&carries)?;
    let out = supervision_step(model, &x, &y, &carry, pad)?;
    Ok(ChunkResult {
        loss: out.loss,
        ce: out.ce,
        bce: out.bce,
        carries: (0..slots.len()).map(|b| out.carry.slot(b, l)).collect(),
        q: out.q_logits,
        grads: out.grads,
    })
}

/// Trains `state` in place until a stop condition; see [`TrainConfig`].
pub fn fit<T: Real>(
    state: &mut TrainState<T>,
    train: &[PuzzleInstance],
    val: &[PuzzleInstance],
    cfg: &TrainConfig,
    pad: u32,
    observer: &mut dyn FitObserver<T>,
) -> Result<FitReport> {
    cfg.validate()?;
    let mcfg = state.model.config().clone();
    if train.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    if let Some(p) = train
        .iter()
        .chain(val)
        .find(|p| p.seq_len() != mcfg.seq_len)
    {
        return Err(Error::Config(format!(
            "{} has length {}, model expects {}",
            p.id,
            p.seq_len(),
            mcfg.seq_len
        )));
    }
    let started = Instant::now();
    let (l, h) = (mcfg.seq_len, mcfg.hidden);
    let eval_depth = cfg.eval_depth.unwrap_or(mcfg.n_sup);
    let mut order = epoch_order(cfg.seed, state.epoch, train.len());
    let mut best = state
        .history
        .iter()
        .map(|r| r.val_exact)
        .fold(0.0, f64::max);

    let validate = |state: &mut TrainState<T>,
                    observer: &mut dyn FitObserver<T>,
                    epoch: usize|
     -> Result<EvalRecord> {
        let s = evaluate(&state.model, val, eval_depth, pad)?;
        let rec = EvalRecord {
            step: state.step,
            epoch,
            val_exact: s.exact,
            val_cell: s.cell,
        };
        observer.on_eval(&rec)?;
        state.history.push(rec.clone());
        Ok(rec)
    };
    let eval_stop = |rec: &EvalRecord| -> Option<StopReason> {
        if cfg
            .early_stop
            .is_some_and(|w| rec.val_exact >= w.lo && rec.val_exact <= w.hi)
        {
            Some(StopReason::EarlyStopWindow)
        } else if cfg.target_exact.is_some_and(|t| rec.val_exact >= t) {
            Some(StopReason::Target)
        } else {
            None
        }
    };

    let mut stop = None;
    let mut last_eval = state.history.last().cloned();
    while stop.is_none() {
        // Refill the pool. Running off the end of an epoch's stream moves to
        // the next epoch, then validates and checkpoints.
        while state.slots.len() < cfg.batch_size {
            if state.cursor == train.len() {
                state.epoch += 1;
                state.cursor = 0;
                order = epoch_order(cfg.seed, state.epoch, train.len());
                let finished = state.epoch;
                if !val.is_empty() {
                    let rec = validate(state, observer, finished)?;
                    best = best.max(rec.val_exact);
                    stop = eval_stop(&rec);
                    last_eval = Some(rec);
                }
                if stop.is_none() && finished >= cfg.epochs {
                    stop = Some(StopReason::Epochs);
                }
                if stop.is_some()
                    || cfg
                        .checkpoint_every_epochs
                        .is_some_and(|k| finished % k == 0)
                {
                    observer.on_checkpoint(state)?;
                }
                if stop.is_some() {
                    break;
                }
            }
            let sample = order[state.cursor];
            state.cursor += 1;
            state.slots.push(Slot {
                sample,
                steps: 0,
                carry: Carry::zeros(1, l, h),
            });
        }
        if stop.is_some() {
            break;
        }

        let lr = cfg.lr_at(state.step);
        let chunks: Vec<ChunkResult<T>> = state
            .slots
            .par_chunks(cfg.chunk_size)
            .map(|c| run_chunk(&state.model, train, c, pad))
            .collect::<Result<_>>()
            .map_err(|e| match e {
                Error::NonFinite { op } => Error::Diverged {
                    step: state.step,
                    detail: format!("non-finite value in {op}"),
                },
                other => other,
            })?;
        let b = state.slots.len() as f64;
        let mut grads: Vec<Tensor<T>> = state
            .model
            .params()
            .tensors()
            .iter()
            .map(|t| Tensor::zeros(t.shape().to_vec()))
            .collect();
        let (mut loss, mut ce, mut bce) = (0.0, 0.0, 0.0);
        let mut carries = Vec::with_capacity(state.slots.len());
        let mut qs = Vec::with_capacity(state.slots.len());
        for (c, chunk) in chunks.into_iter().zip(state.slots.chunks(cfg.chunk_size)) {
            let w = chunk.len() as f64 / b;
            loss += w * c.loss;
            ce += w * c.ce;
            bce += w * c.bce;
            let wt = T::of(w);
            for (acc, g) in grads.iter_mut().zip(&c.grads) {
                for (a, &v) in acc.data_mut().iter_mut().zip(g.data()) {
                    *a += wt * v;
                }
            }
            carries.extend(c.carries);
            qs.extend(c.q);
        }
        let stats = adam_update(
            state.model.params_mut(),
            &grads,
            &mut state.adam,
            &cfg.adam,
            lr,
        )?;
        state.step += 1;

        let mut kept = Vec::with_capacity(state.slots.len());
        let mut halted = 0usize;
        for ((mut slot, carry), q) in std::mem::take(&mut state.slots)
            .into_iter()
            .zip(carries)
            .zip(qs)
        {
            slot.steps += 1;
            let done = if cfg.halting {
                act_halt(q, slot.steps, mcfg.n_sup)
            } else {
                slot.steps >= mcfg.n_sup
            };
            if done {
                halted += 1;
            } else {
                slot.carry = carry;
                kept.push(slot);
            }
        }
        state.slots = kept;
        observer.on_step(&StepRecord {
            step: state.step,
            epoch: state.epoch,
            loss,
            ce,
            bce,
            lr,
            halted_fraction: halted as f64 / b,
            grad_norm: stats.grad_norm,
        })?;

        if cfg.eval_every_steps.is_some_and(|k| state.step % k == 0) && !val.is_empty() {
            let rec = validate(state, observer, state.epoch)?;
            best = best.max(rec.val_exact);
            stop = eval_stop(&rec);
            last_eval = Some(rec);
            if stop.is_some() {
                observer.on_checkpoint(state)?;
            }
        }
        if stop.is_none() && cfg.max_steps.is_some_and(|m| state.step >= m) {
            stop = Some(StopReason::MaxSteps);
            observer.on_checkpoint(state)?;
        }
        if stop.is_none()
            && cfg
                .time_budget_secs
                .is_some_and(|t| started.elapsed().as_secs_f64() >= t)
        {
            stop = Some(StopReason::TimeBudget);
            observer.on_checkpoint(state)?;
        }
    }
    Ok(FitReport {
        steps: state.step,
        epochs_completed: state.epoch,
        stop_reason: stop.expect("loop exits with a reason"),
        last_eval,
        best_val_exact: best,
        elapsed_secs: started.elapsed().as_secs_f64(),
    })
}
