//! The recursive MLP reasoning network: embedding, the shared two-layer block,
//! latent and deep recursion, the output head and both Q-head variants.
//!
//! All activations use a batched `[B·L, H]` layout: `B` samples of `L`
//! positions stacked along the row axis. Position mixing acts within each
//! block of `L` rows, so samples never interact.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Graph, Real, Tensor, Var};

const RMS_EPS: f64 = 1e-6;
/// Standard deviation of a standard normal truncated to [-2, 2].
const TRUNC2_STD: f64 = 0.879_625_661_034_239_8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum QHeadKind {
    /// `w·y[0] + b`: a linear read of the first position.
    #[default]
    LinearToken0,
    /// Softmax-pooled positions followed by a two-layer scalar MLP.
    AttentionPooled,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub seq_len: usize,
    pub hidden: usize,
    /// Latent (`z`) updates per latent recursion.
    pub n_latent: usize,
    /// Latent recursions per deep recursion.
    pub t_recursions: usize,
    /// Supervision steps per training sample.
    pub n_sup: usize,
    pub expansion: usize,
    #[serde(default)]
    pub q_head: QHeadKind,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let checks = [
            (self.vocab_size >= 2, "vocab_size must be >= 2"),
            (self.seq_len >= 1, "seq_len must be >= 1"),
            (self.hidden >= 4, "hidden must be >= 4"),
            (self.n_latent >= 1, "n_latent must be >= 1"),
            (self.t_recursions >= 1, "t_recursions must be >= 1"),
            (self.n_sup >= 1, "n_sup must be >= 1"),
            (self.expansion >= 1, "expansion must be >= 1"),
        ];
        for (ok, msg) in checks {
            if !ok {
                return Err(Error::Config(msg.to_string()));
            }
        }
        Ok(())
    }

    /// Parameter tensor names and shapes, in canonical order.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let (v, l, h) = (self.vocab_size, self.seq_len, self.hidden);
        let e = self.expansion * h;
        let mut out = vec![("embed".to_string(), vec![v, h])];
        for i in 0..2 {
            out.push((format!("layers.{i}.mix"), vec![l, l]));
            out.push((format!("layers.{i}.mix_norm"), vec![h]));
            out.push((format!("layers.{i}.gate"), vec![h, e]));
            out.push((format!("layers.{i}.up"), vec![h, e]));
            out.push((format!("layers.{i}.down"), vec![e, h]));
            out.push((format!("layers.{i}.mlp_norm"), vec![h]));
        }
        out.push(("out_head".to_string(), vec![h, v]));
        match self.q_head {
            QHeadKind::LinearToken0 => {
                out.push(("q.w".to_string(), vec![h, 1]));
                out.push(("q.b".to_string(), vec![1]));
            }
            QHeadKind::AttentionPooled => {
                out.push(("q.score".to_string(), vec![h, 1]));
                out.push(("q.w1".to_string(), vec![h, h]));
                out.push(("q.b1".to_string(), vec![h]));
                out.push(("q.w2".to_string(), vec![h, 1]));
                out.push(("q.b2".to_string(), vec![1]));
            }
        }
        out
    }

    /// `f_theta` applications per deep recursion.
    pub fn block_calls_per_deep_recursion(&self) -> usize {
        self.t_recursions * (self.n_latent + 1)
    }
}

/// Named parameter tensors in the order given by [`ModelConfig::param_shapes`].
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T> {
    names: Vec<String>,
    tensors: Vec<Arc<Tensor<T>>>,
}

impl<T: Real> ModelParams<T> {
    /// Truncated-normal init with std `1/sqrt(fan_in)`, cut at two standard
    /// deviations and rescaled so the realized std matches. Norm gains start
    /// at one, biases at zero.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut names = Vec::new();
        let mut tensors = Vec::new();
        for (name, shape) in config.param_shapes() {
            let numel: usize = shape.iter().product();
            let t = if name.ends_with("norm") {
                Tensor::full(shape, T::one())
            } else if shape.len() == 1 {
                Tensor::zeros(shape)
            } else {
                let fan_in = if name == "embed" { shape[1] } else { shape[0] };
                let std = 1.0 / (fan_in as f64).sqrt();
                let data = (0..numel)
                    .map(|_| T::of(truncated_normal(&mut rng) * std / TRUNC2_STD))
                    .collect();
                Tensor::new(shape, data)?
            };
            names.push(name);
            tensors.push(Arc::new(t));
        }
        Ok(Self { names, tensors })
    }

    /// Builds params from named tensors, checking names and shapes against the
    /// config. Extra tensors are an error; missing ones too.
    pub fn from_named(config: &ModelConfig, mut named: Vec<(String, Tensor<T>)>) -> Result<Self> {
        let mut names = Vec::new();
        let mut tensors = Vec::new();
        for (name, shape) in config.param_shapes() {
            let pos = named
                .iter()
                .position(|(n, _)| *n == name)
                .ok_or_else(|| Error::Config(format!("missing parameter tensor {name}")))?;
            let (_, t) = named.swap_remove(pos);
            if t.shape() != shape.as_slice() {
                return Err(Error::Config(format!(
                    "parameter {name} has shape {:?}, expected {shape:?}",
                    t.shape()
                )));
            }
            if !t.is_finite() {
                return Err(Error::Config(format!("parameter {name} is not finite")));
            }
            names.push(name);
            tensors.push(Arc::new(t));
        }
        if let Some((extra, _)) = named.first() {
            return Err(Error::Config(format!(
                "unexpected parameter tensor {extra}"
            )));
        }
        Ok(Self { names, tensors })
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Arc<Tensor<T>>] {
        &self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| self.tensors[i].as_ref())
    }

    /// Mutable access; clones a tensor first if a graph still shares it.
    pub fn tensor_mut(&mut self, index: usize) -> &mut Tensor<T> {
        Arc::make_mut(&mut self.tensors[index])
    }

    pub fn num_parameters(&self) -> usize {
        self.tensors.iter().map(|t| t.numel()).sum()
    }

    pub fn cast<U: Real>(&self) -> ModelParams<U> {
        ModelParams {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(|t| Arc::new(t.cast())).collect(),
        }
    }
}

fn truncated_normal(rng: &mut ChaCha8Rng) -> f64 {
    loop {
        let s: f64 = rng.sample(StandardNormal);
        if s.abs() <= 2.0 {
            return s;
        }
    }
}

/// Reasoning latent `z` and answer latent `y`, each `[B·L, H]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Carry<T> {
    pub z: Arc<Tensor<T>>,
    pub y: Arc<Tensor<T>>,
}

impl<T: Real> Carry<T> {
    pub fn zeros(batch: usize, seq_len: usize, hidden: usize) -> Self {
        let t = Arc::new(Tensor::zeros(vec![batch * seq_len, hidden]));
        Self {
            z: Arc::clone(&t),
            y: t,
        }
    }

    pub fn batch(&self, seq_len: usize) -> usize {
        self.z.rows() / seq_len
    }

    /// Carry of sample `b` alone.
    pub fn slot(&self, b: usize, seq_len: usize) -> Carry<T> {
        Carry {
            z: Arc::new(self.z.slice_rows(b * seq_len, seq_len)),
            y: Arc::new(self.y.slice_rows(b * seq_len, seq_len)),
        }
    }

    pub fn stack(parts: &[Carry<T>]) -> Result<Carry<T>> {
        let zs: Vec<&Tensor<T>> = parts.iter().map(|c| c.z.as_ref()).collect();
        let ys: Vec<&Tensor<T>> = parts.iter().map(|c| c.y.as_ref()).collect();
        Ok(Carry {
            z: Arc::new(Tensor::concat_rows(&zs)?),
            y: Arc::new(Tensor::concat_rows(&ys)?),
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GradMode {
    /// Only the last latent recursion of a deep recursion builds a graph.
    Truncated,
    /// Nothing builds a graph.
    None,
}

#[derive(Clone, Copy, Debug)]
struct BoundLayer {
    mix: Var,
    mix_norm: Var,
    gate: Var,
    up: Var,
    down: Var,
    mlp_norm: Var,
}

#[derive(Clone, Copy, Debug)]
enum BoundQ {
    Linear {
        w: Var,
        b: Var,
    },
    Pooled {
        score: Var,
        w1: Var,
        b1: Var,
        w2: Var,
        b2: Var,
    },
}

/// Parameters inserted into one [`Graph`].
#[derive(Clone, Debug)]
pub struct BoundParams {
    all: Vec<Var>,
    embed: Var,
    layers: [BoundLayer; 2],
    out_head: Var,
    q: BoundQ,
}

impl BoundParams {
    /// Vars in canonical parameter order.
    pub fn vars(&self) -> &[Var] {
        &self.all
    }
}

/// A model: configuration plus parameters, with an `f_theta` call counter.
#[derive(Debug)]
pub struct Trm<T> {
    config: ModelConfig,
    params: ModelParams<T>,
    block_calls: AtomicU64,
}

impl<T: Real> Clone for Trm<T> {
    fn clone(&self) -> Self {
        Self {
            config: self.config.clone(),
            params: self.params.clone(),
            block_calls: AtomicU64::new(self.block_calls.load(Ordering::Relaxed)),
        }
    }
}

impl<T: Real> Trm<T> {
    pub fn new(config: ModelConfig, params: ModelParams<T>) -> Result<Self> {
        config.validate()?;
        let expected = config.param_shapes();
        if expected.len() != params.names.len()
            || expected
                .iter()
                .zip(params.names.iter().zip(&params.tensors))
                .any(|((n, s), (pn, t))| n != pn || s.as_slice() != t.shape())
        {
            return Err(Error::Config("parameters do not match model config".into()));
        }
        Ok(Self {
            config,
            params,
            block_calls: AtomicU64::new(0),
        })
    }

    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        let params = ModelParams::init(&config, seed)?;
        Self::new(config, params)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ModelParams<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ModelParams<T> {
        &mut self.params
    }

    pub fn into_params(self) -> ModelParams<T> {
        self.params
    }

    /// Number of `f_theta` applications so far.
    pub fn block_calls(&self) -> u64 {
        self.block_calls.load(Ordering::Relaxed)
    }

    pub fn reset_block_calls(&self) {
        self.block_calls.store(0, Ordering::Relaxed);
    }

    /// Inserts all parameters into `g`, as trainable leaves when the graph
    /// has gradients enabled and as constants otherwise.
    pub fn bind(&self, g: &mut Graph<T>) -> BoundParams {
        let all: Vec<Var> = self
            .params
            .tensors
            .iter()
            .map(|t| g.param(Arc::clone(t)))
            .collect();
        let layer = |i: usize| {
            let o = 1 + 6 * i;
            BoundLayer {
                mix: all[o],
                mix_norm: all[o + 1],
                gate: all[o + 2],
                up: all[o + 3],
                down: all[o + 4],
                mlp_norm: all[o + 5],
            }
        };
        let q = match self.config.q_head {
            QHeadKind::LinearToken0 => BoundQ::Linear {
                w: all[14],
                b: all[15],
            },
            QHeadKind::AttentionPooled => BoundQ::Pooled {
                score: all[14],
                w1: all[15],
                b1: all[16],
                w2: all[17],
                b2: all[18],
            },
        };
        BoundParams {
            embed: all[0],
            layers: [layer(0), layer(1)],
            out_head: all[13],
            q,
            all,
        }
    }

    /// Embeds `B·L` tokens (scaled by `sqrt(H)` so rows have unit scale).
    pub fn embed(&self, g: &mut Graph<T>, bp: &BoundParams, tokens: &[u32]) -> Result<Var> {
        if tokens.is_empty() || tokens.len() % self.config.seq_len != 0 {
            return Err(Error::shape(
                "embed",
                format!(
                    "{} tokens for seq_len {}",
                    tokens.len(),
                    self.config.seq_len
                ),
            ));
        }
        let ids: Vec<usize> = tokens.iter().map(|&t| t as usize).collect();
        let rows = g.gather_rows(bp.embed, &ids)?;
        g.scale(rows, T::of((self.config.hidden as f64).sqrt()))
    }

    /// The shared block: two layers of position mixing and a gated MLP, each
    /// sublayer residual and followed by RMS normalization.
    pub fn f_theta(&self, g: &mut Graph<T>, bp: &BoundParams, input: Var) -> Result<Var> {
        self.block_calls.fetch_add(1, Ordering::Relaxed);
        let mut h = input;
        for layer in &bp.layers {
            let mixed = g.mix_rows(layer.mix, h)?;
            let sum = g.add(h, mixed)?;
            h = g.rms_norm(sum, layer.mix_norm, RMS_EPS)?;

            let gate = g.matmul(h, layer.gate)?;
            let gate = g.silu(gate)?;
            let up = g.matmul(h, layer.up)?;
            let act = g.mul(gate, up)?;
            let down = g.matmul(act, layer.down)?;
            let sum = g.add(h, down)?;
            h = g.rms_norm(sum, layer.mlp_norm, RMS_EPS)?;
        }
        Ok(h)
    }

    /// `n` updates `z ← f(x + y + z)`, then one `y ← f(y + z)`.
    pub fn latent_recursion(
        &self,
        g: &mut Graph<T>,
        bp: &BoundParams,
        x: Var,
        z: Var,
        y: Var,
    ) -> Result<(Var, Var)> {
        let mut z = z;
        for _ in 0..self.config.n_latent {
            let xy = g.add(x, y)?;
            let s = g.add(xy, z)?;
            z = self.f_theta(g, bp, s)?;
        }
        let s = g.add(y, z)?;
        let y = self.f_theta(g, bp, s)?;
        Ok((z, y))
    }

    /// `T` latent recursions. In [`GradMode::Truncated`] (and with gradients
    /// enabled on `g`) the first `T-1` run detached and only the last records
    /// a graph; in [`GradMode::None`] all run detached. Returns `(z, y)`.
    pub fn deep_recursion(
        &self,
        g: &mut Graph<T>,
        bp: &BoundParams,
        x: Var,
        z: Var,
        y: Var,
        mode: GradMode,
    ) -> Result<(Var, Var)> {
        let t = self.config.t_recursions;
        let was_enabled = g.grad_enabled();
        let tracked_last = mode == GradMode::Truncated && was_enabled;
        let detached = if tracked_last { t - 1 } else { t };
        let (mut z, mut y) = (z, y);
        if detached > 0 {
            g.set_grad_enabled(false);
            let mark = g.len();
            let run =
                (0..detached).try_fold((z, y), |(z, y), _| self.latent_recursion(g, bp, x, z, y));
            g.set_grad_enabled(was_enabled);
            let (zd, yd) = run?;
            let (zv, yv) = (g.value_arc(zd), g.value_arc(yd));
            g.truncate(mark);
            z = g.constant(zv);
            y = g.constant(yv);
        }
        if tracked_last {
            (z, y) = self.latent_recursion(g, bp, x, z, y)?;
        }
        Ok((z, y))
    }

    /// Answer logits `y · f_O`, `[B·L, V]`.
    pub fn output_logits(&self, g: &mut Graph<T>, bp: &BoundParams, y: Var) -> Result<Var> {
        g.matmul(y, bp.out_head)
    }

    /// Q logits, `[B, 1]`.
    pub fn q_logit(&self, g: &mut Graph<T>, bp: &BoundParams, y: Var) -> Result<Var> {
        let l = self.config.seq_len;
        match bp.q {
            BoundQ::Linear { w, b } => {
                let rows = g.value(y).rows();
                let firsts: Vec<usize> = (0..rows / l).map(|i| i * l).collect();
                let tok0 = g.gather_rows(y, &firsts)?;
                let q = g.matmul(tok0, w)?;
                g.add_bias(q, b)
            }
            BoundQ::Pooled {
                score,
                w1,
                b1,
                w2,
                b2,
            } => {
                let pooled = self.pool(g, score, y)?;
                let h = g.matmul(pooled, w1)?;
                let h = g.add_bias(h, b1)?;
                let h = g.silu(h)?;
                let q = g.matmul(h, w2)?;
                g.add_bias(q, b2)
            }
        }
    }

    fn pool(&self, g: &mut Graph<T>, score: Var, y: Var) -> Result<Var> {
        let s = g.matmul(y, score)?;
        g.attention_pool(y, s, self.config.seq_len)
    }

    /// The attention-pooled summary `[B, H]` of `y` (pooled head only).
    pub fn pooled_summary(
        &self,
        g: &mut Graph<T>,
        bp: &BoundParams,
        y: Var,
    ) -> Result<Option<Var>> {
        match bp.q {
            BoundQ::Pooled { score, .. } => self.pool(g, score, y).map(Some),
            BoundQ::Linear { .. } => Ok(None),
        }
    }
}

/// Per-position argmax tokens of a `[B·L, V]` logits tensor.
pub fn decode<T: Real>(logits: &Tensor<T>) -> Vec<u32> {
    logits.argmax_rows().into_iter().map(|t| t as u32).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(q_head: QHeadKind) -> ModelConfig {
        ModelConfig {
            vocab_size: 6,
            seq_len: 4,
            hidden: 8,
            n_latent: 2,
            t_recursions: 3,
            n_sup: 2,
            expansion: 2,
            q_head,
        }
    }

    #[test]
    fn init_is_deterministic() {
        let a = ModelParams::<f32>::init(&tiny(QHeadKind::LinearToken0), 9).unwrap();
        let b = ModelParams::<f32>::init(&tiny(QHeadKind::LinearToken0), 9).unwrap();
        assert_eq!(a, b);
        let c = ModelParams::<f32>::init(&tiny(QHeadKind::LinearToken0), 10).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn init_gains_are_one_and_q_bias_zero() {
        let p = ModelParams::<f32>::init(&tiny(QHeadKind::LinearToken0), 1).unwrap();
        for (name, t) in p.names().iter().zip(p.tensors()) {
            if name.ends_with("norm") {
                assert!(t.data().iter().all(|&v| v == 1.0), "{name}");
            }
        }
        assert_eq!(p.get("q.b").unwrap().data(), &[0.0]);
    }

    #[test]
    fn embedding_std_matches_fan_in() {
        let mut cfg = tiny(QHeadKind::LinearToken0);
        cfg.hidden = 64;
        cfg.vocab_size = 16;
        let p = ModelParams::<f64>::init(&cfg, 4).unwrap();
        let e = p.get("embed").unwrap().data();
        let n = e.len() as f64;
        let mean = e.iter().sum::<f64>() / n;
        let std = (e.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
        assert!((std - 0.125).abs() < 0.0125, "std {std}");
        let bound = 2.0 * 0.125 / TRUNC2_STD;
        assert!(e.iter().all(|v| v.abs() <= bound));
    }

    #[test]
    fn invalid_config_is_rejected() {
        let mut cfg = tiny(QHeadKind::LinearToken0);
        cfg.hidden = 3;
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn from_named_rejects_missing_and_extra() {
        let cfg = tiny(QHeadKind::LinearToken0);
        let p = ModelParams::<f32>::init(&cfg, 1).unwrap();
        let mut named: Vec<(String, Tensor<f32>)> = p
            .names()
            .iter()
            .cloned()
            .zip(p.tensors().iter().map(|t| (**t).clone()))
            .collect();
        assert!(ModelParams::from_named(&cfg, named.clone()).is_ok());
        named.push(("bogus".into(), Tensor::zeros(vec![1])));
        assert!(ModelParams::from_named(&cfg, named.clone()).is_err());
        named.pop();
        named.remove(3);
        assert!(ModelParams::from_named(&cfg, named).is_err());
    }

    fn run_f_theta(model: &Trm<f64>, input: &Tensor<f64>) -> Tensor<f64> {
        let mut g = Graph::new();
        g.set_grad_enabled(false);
        let bp = model.bind(&mut g);
        let x = g.constant(input.clone());
        let out = model.f_theta(&mut g, &bp, x).unwrap();
        g.value(out).clone()
    }

    fn random_input(rows: usize, cols: usize, seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let v: Vec<f64> = (0..rows * cols)
            .map(|_| rng.random_range(-2.0..2.0))
            .collect();
        Tensor::new(vec![rows, cols], v).unwrap()
    }

    #[test]
    fn f_theta_preserves_shape_and_is_pure() {
        let model = Trm::<f64>::init(tiny(QHeadKind::LinearToken0), 2).unwrap();
        let x = random_input(8, 8, 1);
        let a = run_f_theta(&model, &x);
        let b = run_f_theta(&model, &x);
        assert_eq!(a.shape(), &[8, 8]);
        assert_eq!(a, b);
    }

    #[test]
    fn f_theta_with_zeroed_sublayers_only_normalizes() {
        let cfg = tiny(QHeadKind::LinearToken0);
        let mut model = Trm::<f64>::init(cfg, 2).unwrap();
        let names: Vec<String> = model.params().names().to_vec();
        for (i, name) in names.iter().enumerate() {
            if name.ends_with(".mix") || name.ends_with(".down") {
                model.params_mut().tensor_mut(i).data_mut().fill(0.0);
            }
        }
        let x = random_input(8, 8, 3);
        let out = run_f_theta(&model, &x);
        for r in 0..8 {
            let row = x.row(r);
            let rms = (row.iter().map(|v| v * v).sum::<f64>() / 8.0).sqrt();
            for (o, v) in out.row(r).iter().zip(row) {
                assert!((o - v / rms).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn latent_recursion_calls_block_n_plus_one_times() {
        let mut cfg = tiny(QHeadKind::LinearToken0);
        cfg.n_latent = 1;
        let model = Trm::<f32>::init(cfg, 2).unwrap();
        let mut g = Graph::new();
        let bp = model.bind(&mut g);
        let x = model.embed(&mut g, &bp, &[1, 2, 3, 4]).unwrap();
        let z = g.constant(Tensor::zeros(vec![4, 8]));
        model.latent_recursion(&mut g, &bp, x, z, z).unwrap();
        assert_eq!(model.block_calls(), 2);
    }

    #[test]
    fn deep_recursion_calls_block_t_times_n_plus_one() {
        let model = Trm::<f32>::init(tiny(QHeadKind::LinearToken0), 2).unwrap();
        for mode in [GradMode::Truncated, GradMode::None] {
            model.reset_block_calls();
            let mut g = Graph::new();
            let bp = model.bind(&mut g);
            let x = model.embed(&mut g, &bp, &[1, 2, 3, 4]).unwrap();
            let z = g.constant(Tensor::zeros(vec![4, 8]));
            model.deep_recursion(&mut g, &bp, x, z, z, mode).unwrap();
            assert_eq!(model.block_calls(), 9);
        }
    }

    fn deep(model: &Trm<f64>, mode: GradMode, grad: bool) -> (Tensor<f64>, Tensor<f64>) {
        let mut g = Graph::new();
        g.set_grad_enabled(grad);
        let bp = model.bind(&mut g);
        let x = model.embed(&mut g, &bp, &[1, 2, 3, 4, 0, 5, 5, 1]).unwrap();
        let z = g.constant(random_input(8, 8, 21));
        let y = g.constant(random_input(8, 8, 22));
        let (z, y) = model.deep_recursion(&mut g, &bp, x, z, y, mode).unwrap();
        (g.value(z).clone(), g.value(y).clone())
    }

    #[test]
    fn grad_mode_does_not_change_values() {
        let model = Trm::<f64>::init(tiny(QHeadKind::LinearToken0), 5).unwrap();
        let a = deep(&model, GradMode::Truncated, true);
        let b = deep(&model, GradMode::None, true);
        let c = deep(&model, GradMode::None, false);
        assert_eq!(a, b);
        assert_eq!(a, c);
    }

    #[test]
    fn single_recursion_truncated_matches_fully_tracked() {
        let mut cfg = tiny(QHeadKind::LinearToken0);
        cfg.t_recursions = 1;
        let model = Trm::<f64>::init(cfg, 5).unwrap();
        let mut g = Graph::new();
        let bp = model.bind(&mut g);
        let x = model.embed(&mut g, &bp, &[1, 2, 3, 4]).unwrap();
        let z0 = g.constant(Tensor::zeros(vec![4, 8]));
        let (_, y) = model
            .deep_recursion(&mut g, &bp, x, z0, z0, GradMode::Truncated)
            .unwrap();
        let (_, y_full) = model.latent_recursion(&mut g, &bp, x, z0, z0).unwrap();
        assert_eq!(g.value(y), g.value(y_full));
        assert!(g.requires_grad(y));
    }

    #[test]
    fn zero_y_with_zero_bias_gives_zero_q() {
        let model = Trm::<f64>::init(tiny(QHeadKind::LinearToken0), 5).unwrap();
        let mut g = Graph::new();
        let bp = model.bind(&mut g);
        let y = g.constant(Tensor::zeros(vec![8, 8]));
        let q = model.q_logit(&mut g, &bp, y).unwrap();
        assert_eq!(g.value(q).shape(), &[2, 1]);
        assert!(g.value(q).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn decoded_tokens_are_in_vocab() {
        let model = Trm::<f32>::init(tiny(QHeadKind::LinearToken0), 5).unwrap();
        let mut g = Graph::new();
        let bp = model.bind(&mut g);
        let y = g.constant(random_input(8, 8, 2).cast::<f32>());
        let logits = model.output_logits(&mut g, &bp, y).unwrap();
        assert!(decode(g.value(logits)).iter().all(|&t| (t as usize) < 6));
    }

    #[test]
    fn pooled_summary_saturates_on_dominant_position() {
        let model = Trm::<f64>::init(tiny(QHeadKind::AttentionPooled), 5).unwrap();
        let score = model.params().get("q.score").unwrap().clone();
        // Make position 2 dominate the score by a wide margin.
        let mut y = random_input(4, 8, 8);
        let norm2: f64 = score.data().iter().map(|v| v * v).sum();
        let others: Vec<f64> = (0..4)
            .filter(|&r| r != 2)
            .map(|r| {
                y.row(r)
                    .iter()
                    .zip(score.data())
                    .map(|(a, b)| a * b)
                    .sum::<f64>()
            })
            .collect();
        let base: f64 = y.row(2).iter().zip(score.data()).map(|(a, b)| a * b).sum();
        let target = others.iter().copied().fold(f64::MIN, f64::max) + 30.0;
        let shift = (target - base) / norm2;
        for (j, s) in score.data().iter().enumerate() {
            y.data_mut()[2 * 8 + j] += shift * s;
        }
        let mut g = Graph::new();
        let bp = model.bind(&mut g);
        let yv = g.constant(y.clone());
        let pooled = model.pooled_summary(&mut g, &bp, yv).unwrap().unwrap();
        for (p, v) in g.value(pooled).data().iter().zip(y.row(2)) {
            assert!((p - v).abs() < 1e-6);
        }
    }
}
