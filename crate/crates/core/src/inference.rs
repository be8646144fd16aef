//! Deterministic and stochastic recursion at test time.
//!
//! A stochastic rollout perturbs the reasoning latent before every deep
//! recursion. Noise for rollout `k` at deep step `t` comes from its own
//! counter-keyed stream, so results never depend on how rollouts are batched
//! or scheduled across threads.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{cell_accuracy, exact_match, select_best_q, select_mode, RolloutMatrix};
use crate::model::{decode, Carry, GradMode, QHeadKind, Trm};
use crate::puzzle::{derive_seed, PuzzleInstance};
use crate::tensor::{Graph, Real, Tensor};

const NOISE_TAG: u64 = 0x7A;
const LANGEVIN_TAG: u64 = 0x1A;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Selector {
    #[default]
    BestQ,
    Mode,
    /// Picks a correct rollout when one exists; needs the target.
    Oracle,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LangevinConfig {
    pub steps: usize,
    pub eta: f64,
    /// When false the drift term is zero but the same noise is drawn.
    pub gradient: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InferenceConfig {
    pub k: usize,
    pub sigma: f64,
    pub depth: usize,
    #[serde(default)]
    pub selector: Selector,
    pub seed: u64,
    #[serde(default)]
    pub langevin: Option<LangevinConfig>,
}

impl InferenceConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 || self.depth == 0 {
            return Err(Error::Config("k and depth must be positive".into()));
        }
        if !(self.sigma.is_finite() && self.sigma >= 0.0) {
            return Err(Error::Config(format!(
                "sigma must be finite and >= 0, got {}",
                self.sigma
            )));
        }
        if let Some(l) = &self.langevin {
            if !(l.eta.is_finite() && l.eta >= 0.0) {
                return Err(Error::Config(format!(
                    "langevin eta must be non-negative, got {}",
                    l.eta
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub tokens: Vec<u32>,
    pub q: f64,
}

/// Per-step latent snapshot of a batch of rollouts.
#[derive(Clone, Debug, PartialEq)]
pub struct TraceStep<T> {
    pub step: usize,
    pub z: Arc<Tensor<T>>,
    pub y: Arc<Tensor<T>>,
    pub q: Vec<f64>,
    pub tokens: Vec<u32>,
}

#[derive(Clone, Debug)]
struct Perturb {
    sigma: f64,
    seed: u64,
    /// Rollout index of each batch block.
    ks: Vec<usize>,
    langevin: Option<LangevinConfig>,
}

/// `z + N(0, σ²)` elementwise; `σ = 0` returns `z` unchanged and draws nothing.
pub fn inject_noise<T: Real, R: Rng>(z: &Tensor<T>, sigma: f64, rng: &mut R) -> Tensor<T> {
    if sigma == 0.0 {
        return z.clone();
    }
    let data = z
        .data()
        .iter()
        .map(|&v| v + T::of(sigma * rng.sample::<f64, _>(StandardNormal)))
        .collect();
    Tensor::new(z.shape().to_vec(), data).expect("same shape")
}

/// The noise stream of rollout `k` at deep step `t` (1-based).
pub fn noise_rng(seed: u64, k: usize, t: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(&[seed, NOISE_TAG, k as u64, t as u64]))
}

/// The Langevin noise stream of rollout `k`, deep step `t`, refinement step `s`.
pub fn langevin_rng(seed: u64, k: usize, t: usize, s: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(&[
        seed,
        LANGEVIN_TAG,
        k as u64,
        t as u64,
        s as u64,
    ]))
}

fn perturb_blocks<T: Real>(
    t: &Tensor<T>,
    seq_len: usize,
    ks: &[usize],
    mut f: impl FnMut(usize, &Tensor<T>) -> Result<Tensor<T>>,
) -> Result<Tensor<T>> {
    let parts: Vec<Tensor<T>> = ks
        .iter()
        .enumerate()
        .map(|(b, &k)| f(k, &t.slice_rows(b * seq_len, seq_len)))
        .collect::<Result<_>>()?;
    let refs: Vec<&Tensor<T>> = parts.iter().collect();
    Tensor::concat_rows(&refs)
}

/// `steps` updates `y ← y − η∇E(y) + √(2η)ξ` with `E = softplus(−q(y))`,
/// the gradient taken through the pooled Q head alone. Without the gradient
/// the update is `y ← y + √(2η)ξ` with the same `ξ`. `xi(s)` supplies the
/// noise for refinement step `s`.
pub fn langevin_refine<T: Real>(
    model: &Trm<T>,
    y: &Tensor<T>,
    cfg: &LangevinConfig,
    mut xi: impl FnMut(usize) -> Result<Tensor<T>>,
) -> Result<Tensor<T>> {
    if model.config().q_head != QHeadKind::AttentionPooled {
        return Err(Error::Config(
            "langevin refinement needs the attention-pooled Q head".into(),
        ));
    }
    let eta = T::of(cfg.eta);
    let c = T::of((2.0 * cfg.eta).sqrt());
    let mut y = y.clone();
    if cfg.eta == 0.0 {
        return Ok(y);
    }
    for s in 0..cfg.steps {
        let noise = xi(s)?;
        if noise.shape() != y.shape() {
            return Err(Error::shape(
                "langevin_refine",
                "noise shape differs from y",
            ));
        }
        let data: Vec<T> = if cfg.gradient {
            let grad = energy_grad(model, &y)?;
            y.data()
                .iter()
                .zip(grad.data())
                .zip(noise.data())
                .map(|((&v, &g), &n)| v - eta * g + c * n)
                .collect()
        } else {
            y.data()
                .iter()
                .zip(noise.data())
                .map(|(&v, &n)| v + c * n)
                .collect()
        };
        y = Tensor::new(y.shape().to_vec(), data)?;
        y.check_finite("langevin_refine")?;
    }
    Ok(y)
}

/// Gradient of `Σ_b softplus(−q_b)` with respect to `y`.
fn energy_grad<T: Real>(model: &Trm<T>, y: &Tensor<T>) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    g.set_grad_enabled(false);
    let bp = model.bind(&mut g);
    g.set_grad_enabled(true);
    let yv = g.param(y.clone());
    let q = model.q_logit(&mut g, &bp, yv)?;
    let b = g.value(q).numel();
    let mean = g.bce_with_logits(q, &vec![1.0; b])?;
    let total = g.scale(mean, T::of(b as f64))?;
    g.backward(total)?;
    Ok(g.grad(yv)
        .cloned()
        .unwrap_or_else(|| Tensor::zeros(y.shape().to_vec())))
}

/// Runs `depth` deep recursions from a zero carry on `B·L` input tokens.
fn run<T: Real>(
    model: &Trm<T>,
    tokens: &[u32],
    depth: usize,
    perturb: Option<&Perturb>,
    mut trace: Option<&mut Vec<TraceStep<T>>>,
) -> Result<Vec<Prediction>> {
    let cfg = model.config();
    let l = cfg.seq_len;
    if tokens.is_empty() || tokens.len() % l != 0 {
        return Err(Error::shape(
            "inference",
            format!("{} tokens for seq_len {l}", tokens.len()),
        ));
    }
    if depth == 0 {
        return Err(Error::Config("depth must be positive".into()));
    }
    let b = tokens.len() / l;
    let mut g = Graph::new();
    g.set_grad_enabled(false);
    let bp = model.bind(&mut g);
    let x = model.embed(&mut g, &bp, tokens)?;
    let mark = g.len();
    let mut carry = Carry::<T>::zeros(b, l, cfg.hidden);
    let read = |g: &mut Graph<T>, y: Arc<Tensor<T>>| -> Result<(Vec<u32>, Vec<f64>)> {
        let yv = g.constant(y);
        let logits = model.output_logits(g, &bp, yv)?;
        let q = model.q_logit(g, &bp, yv)?;
        Ok((decode(g.value(logits)), g.value(q).to_f64_vec()))
    };
    for t in 1..=depth {
        let mut z = Arc::clone(&carry.z);
        if let Some(p) = perturb.filter(|p| p.sigma != 0.0) {
            z = Arc::new(perturb_blocks(&z, l, &p.ks, |k, block| {
                Ok(inject_noise(block, p.sigma, &mut noise_rng(p.seed, k, t)))
            })?);
        }
        let zv = g.constant(z);
        let yv = g.constant(Arc::clone(&carry.y));
        let (zn, yn) = model.deep_recursion(&mut g, &bp, x, zv, yv, GradMode::None)?;
        carry = Carry {
            z: g.value_arc(zn),
            y: g.value_arc(yn),
        };
        g.truncate(mark);
        if let Some(lc) = perturb.and_then(|p| p.langevin.as_ref().map(|lc| (p, lc))) {
            let (p, lc) = lc;
            let y = langevin_refine(model, &carry.y, lc, |s| {
                perturb_blocks(&carry.y, l, &p.ks, |k, block| {
                    let mut rng = langevin_rng(p.seed, k, t, s);
                    let data = (0..block.numel())
                        .map(|_| T::of(rng.sample::<f64, _>(StandardNormal)))
                        .collect();
                    Tensor::new(block.shape().to_vec(), data)
                })
            })?;
            carry.y = Arc::new(y);
        }
        if let Some(tr) = trace.as_deref_mut() {
            let (tok, q) = read(&mut g, Arc::clone(&carry.y))?;
            g.truncate(mark);
            tr.push(TraceStep {
                step: t,
                z: Arc::clone(&carry.z),
                y: Arc::clone(&carry.y),
                q,
                tokens: tok,
            });
        }
    }
    let (tok, q) = read(&mut g, carry.y)?;
    Ok(tok
        .chunks(l)
        .zip(q)
        .map(|(t, q)| Prediction {
            tokens: t.to_vec(),
            q,
        })
        .collect())
}

/// Zero carry, `depth` deep recursions, argmax answer, for `B·L` tokens.
pub fn deterministic_infer<T: Real>(
    model: &Trm<T>,
    tokens: &[u32],
    depth: usize,
) -> Result<Vec<Prediction>> {
    run(model, tokens, depth, None, None)
}

/// Like [`deterministic_infer`], also returning every step's latents.
pub fn deterministic_trace<T: Real>(
    model: &Trm<T>,
    tokens: &[u32],
    depth: usize,
) -> Result<(Vec<Prediction>, Vec<TraceStep<T>>)> {
    let mut trace = Vec::new();
    let preds = run(model, tokens, depth, None, Some(&mut trace))?;
    Ok((preds, trace))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PtrmOutput {
    pub rollouts: Vec<Prediction>,
    pub selected: usize,
}

impl PtrmOutput {
    pub fn answer(&self) -> &[u32] {
        &self.rollouts[self.selected].tokens
    }
}

/// Index chosen by `selector`. The oracle falls back to best-Q when no
/// rollout is correct.
pub fn select(
    rollouts: &[Prediction],
    selector: Selector,
    target: Option<(&[u32], u32)>,
) -> Result<usize> {
    if rollouts.is_empty() {
        return Err(Error::Contract("no rollouts to select from".into()));
    }
    let q: Vec<f64> = rollouts.iter().map(|r| r.q).collect();
    Ok(match selector {
        Selector::BestQ => select_best_q(&q),
        Selector::Mode => {
            let seqs: Vec<Vec<u32>> = rollouts.iter().map(|r| r.tokens.clone()).collect();
            select_mode(&seqs)
        }
        Selector::Oracle => {
            let (y, pad) = target
                .ok_or_else(|| Error::Contract("the oracle selector needs targets".into()))?;
            rollouts
                .iter()
                .position(|r| exact_match(&r.tokens, y, pad))
                .unwrap_or_else(|| select_best_q(&q))
        }
    })
}

fn ptrm_rollouts<T: Real>(
    model: &Trm<T>,
    x: &[u32],
    cfg: &InferenceConfig,
    trace: Option<&mut Vec<TraceStep<T>>>,
) -> Result<Vec<Prediction>> {
    cfg.validate()?;
    let l = model.config().seq_len;
    if x.len() != l {
        return Err(Error::shape(
            "ptrm_infer",
            format!("{} tokens, seq_len {l}", x.len()),
        ));
    }
    let tokens: Vec<u32> = x.iter().copied().cycle().take(cfg.k * l).collect();
    let perturb = Perturb {
        sigma: cfg.sigma,
        seed: cfg.seed,
        ks: (0..cfg.k).collect(),
        langevin: cfg.langevin,
    };
    run(model, &tokens, cfg.depth, Some(&perturb), trace)
}

/// `k` noisy rollouts of one puzzle, then selection.
pub fn ptrm_infer<T: Real>(
    model: &Trm<T>,
    x: &[u32],
    cfg: &InferenceConfig,
    target: Option<(&[u32], u32)>,
) -> Result<PtrmOutput> {
    let rollouts = ptrm_rollouts(model, x, cfg, None)?;
    let selected = select(&rollouts, cfg.selector, target)?;
    Ok(PtrmOutput { rollouts, selected })
}

/// [`ptrm_infer`] plus per-step latents of every rollout.
pub fn ptrm_trace<T: Real>(
    model: &Trm<T>,
    x: &[u32],
    cfg: &InferenceConfig,
) -> Result<(Vec<Prediction>, Vec<TraceStep<T>>)> {
    let mut trace = Vec::new();
    let rollouts = ptrm_rollouts(model, x, cfg, Some(&mut trace))?;
    Ok((rollouts, trace))
}

/// Per-puzzle seed for puzzle `index` under a master seed.
pub fn puzzle_seed(master: u64, index: usize) -> u64 {
    derive_seed(&[master, 0x9A, index as u64])
}

/// Rollout outcomes for many puzzles, evaluated in parallel. Puzzle `i`
/// uses seed `puzzle_seed(cfg.seed, i)`.
pub fn rollout_matrix<T: Real>(
    model: &Trm<T>,
    puzzles: &[PuzzleInstance],
    cfg: &InferenceConfig,
    pad: u32,
) -> Result<RolloutMatrix> {
    let rows: Vec<Vec<Prediction>> = puzzles
        .par_iter()
        .enumerate()
        .map(|(i, p)| {
            let c = InferenceConfig {
                seed: puzzle_seed(cfg.seed, i),
                ..cfg.clone()
            };
            ptrm_rollouts(model, &p.x, &c, None)
        })
        .collect::<Result<_>>()?;
    let mut m = RolloutMatrix::default();
    for (p, row) in puzzles.iter().zip(rows) {
        m.correct.push(
            row.iter()
                .map(|r| exact_match(&r.tokens, &p.y, pad))
                .collect(),
        );
        m.q.push(row.iter().map(|r| r.q).collect());
        m.seqs.push(row.into_iter().map(|r| r.tokens).collect());
    }
    Ok(m)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub count: usize,
    pub exact: f64,
    pub cell: f64,
    pub correct: Vec<bool>,
    pub predictions: Vec<Prediction>,
}

const EVAL_CHUNK: usize = 32;

/// Deterministic accuracy over `puzzles`, in parallel fixed-size chunks.
pub fn evaluate<T: Real>(
    model: &Trm<T>,
    puzzles: &[PuzzleInstance],
    depth: usize,
    pad: u32,
) -> Result<EvalSummary> {
    let chunks: Vec<Vec<Prediction>> = puzzles
        .par_chunks(EVAL_CHUNK)
        .map(|chunk| {
            let tokens: Vec<u32> = chunk.iter().flat_map(|p| p.x.iter().copied()).collect();
            deterministic_infer(model, &tokens, depth)
        })
        .collect::<Result<_>>()?;
    let predictions: Vec<Prediction> = chunks.into_iter().flatten().collect();
    let correct: Vec<bool> = predictions
        .iter()
        .zip(puzzles)
        .map(|(p, t)| exact_match(&p.tokens, &t.y, pad))
        .collect();
    let n = puzzles.len().max(1) as f64;
    let cell = predictions
        .iter()
        .zip(puzzles)
        .map(|(p, t)| cell_accuracy(&p.tokens, &t.y, pad))
        .sum::<f64>()
        / n;
    Ok(EvalSummary {
        count: puzzles.len(),
        exact: correct.iter().filter(|&&c| c).count() as f64 / n,
        cell,
        correct,
        predictions,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EscapeRecord {
    pub index: usize,
    pub id: String,
    pub escape_fraction: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EscapeReport {
    pub sigma: f64,
    pub k: usize,
    pub depth: usize,
    pub evaluated: usize,
    pub failed: Vec<EscapeRecord>,
    /// Fraction of deterministic failures with a positive escape fraction.
    pub escaped_share: f64,
}

/// For each puzzle the deterministic pass gets wrong, the fraction of `k`
/// noisy rollouts that end correct.
pub fn basin_escape_experiment<T: Real>(
    model: &Trm<T>,
    puzzles: &[PuzzleInstance],
    cfg: &InferenceConfig,
    pad: u32,
) -> Result<EscapeReport> {
    cfg.validate()?;
    let det = evaluate(model, puzzles, cfg.depth, pad)?;
    let failed: Vec<(usize, PuzzleInstance)> = puzzles
        .iter()
        .enumerate()
        .filter(|(i, _)| !det.correct[*i])
        .map(|(i, p)| (i, p.clone()))
        .collect();
    let subset: Vec<PuzzleInstance> = failed.iter().map(|(_, p)| p.clone()).collect();
    let matrix = rollout_matrix(model, &subset, cfg, pad)?;
    let records: Vec<EscapeRecord> = failed
        .iter()
        .zip(&matrix.correct)
        .map(|((i, p), row)| EscapeRecord {
            index: *i,
            id: p.id.clone(),
            escape_fraction: row.iter().filter(|&&c| c).count() as f64 / cfg.k as f64,
        })
        .collect();
    let escaped = records.iter().filter(|r| r.escape_fraction > 0.0).count();
    Ok(EscapeReport {
        sigma: cfg.sigma,
        k: cfg.k,
        depth: cfg.depth,
        evaluated: puzzles.len(),
        escaped_share: if records.is_empty() {
            0.0
        } else {
            escaped as f64 / records.len() as f64
        },
        failed: records,
    })
}
