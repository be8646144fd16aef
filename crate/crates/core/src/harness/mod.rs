//! Run configuration and the command implementations behind the CLI.

pub mod svg;

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use base64::Engine;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::checkpoint::{load_model, load_train_state, save_train_state};
use crate::error::{Error, Result};
use crate::inference::{
    deterministic_trace, evaluate, ptrm_trace, rollout_matrix, select, InferenceConfig,
    LangevinConfig, Prediction, Selector, TraceStep,
};
use crate::metrics::{
    aggregate_trajectories, cell_accuracy, cost_estimate, exact_match, pca_project, sigma_sweep,
    summarize_sweep, sweep_csv, MeanSpread, SweepRow, SweepSummary,
};
use crate::model::{ModelConfig, QHeadKind, Trm};
use crate::puzzle::{
    build_dataset, read_dataset, write_dataset, Dataset, DatasetSpec, PuzzleInstance, TypeCounts,
};
use crate::training::{
    fit, write_event, EvalRecord, FitObserver, StepRecord, TrainConfig, TrainState,
};
use svg::Series;

/// Environment variable holding the default output directory.
pub const OUT_DIR_ENV: &str = "PTRM_OUT_DIR";

/// Package version and source revision this binary was built from.
pub const BUILD_ID: &str = concat!(env!("CARGO_PKG_VERSION"), "+", env!("PTRM_BUILD_REV"));

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    #[default]
    Val,
    Golden,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelSpec {
    pub hidden: usize,
    pub n_latent: usize,
    pub t_recursions: usize,
    pub n_sup: usize,
    pub expansion: usize,
    pub q_head: QHeadKind,
    pub seed: u64,
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self {
            hidden: 128,
            n_latent: 4,
            t_recursions: 3,
            n_sup: 6,
            expansion: 1,
            q_head: QHeadKind::LinearToken0,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalSpec {
    pub split: Split,
    pub limit: Option<usize>,
    /// Deep recursions; defaults to `n_sup`.
    pub depth: Option<usize>,
    pub k: usize,
    pub sigma: f64,
    pub selector: Selector,
    pub seed: u64,
    pub langevin: Option<LangevinConfig>,
}

impl Default for EvalSpec {
    fn default() -> Self {
        Self {
            split: Split::Val,
            limit: None,
            depth: None,
            k: 1,
            sigma: 0.0,
            selector: Selector::BestQ,
            seed: 0,
            langevin: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SweepSpec {
    pub split: Split,
    pub limit: Option<usize>,
    pub sigmas: Vec<f64>,
    pub seeds: Vec<u64>,
    pub k: usize,
    /// Deep recursions; defaults to `2 * n_sup`.
    pub depth: Option<usize>,
}

impl Default for SweepSpec {
    fn default() -> Self {
        Self {
            split: Split::Val,
            limit: None,
            sigmas: vec![0.1, 0.2, 0.3, 0.5, 1.0],
            seeds: vec![0, 1, 2],
            k: 32,
            depth: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TraceSpec {
    pub split: Split,
    pub index: usize,
    pub k: usize,
    pub sigma: f64,
    pub depth: Option<usize>,
    pub seed: u64,
}

impl Default for TraceSpec {
    fn default() -> Self {
        Self {
            split: Split::Val,
            index: 0,
            k: 8,
            sigma: 0.3,
            depth: None,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Checks {
    pub min_val_exact: Option<f64>,
    /// Required gain of seed-averaged pass@K over deterministic accuracy at
    /// some sigma.
    pub min_pass_gain: Option<f64>,
    /// Required best-Q@K gain at a sigma that meets the pass gain.
    pub min_best_q_gain: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub out_dir: Option<PathBuf>,
    pub data_dir: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub resume: Option<PathBuf>,
    /// Worker threads; 0 uses the global pool.
    pub workers: usize,
    pub cost_rate_per_hour: f64,
    pub data: DatasetSpec,
    pub model: ModelSpec,
    pub train: TrainConfig,
    pub eval: EvalSpec,
    pub sweep: SweepSpec,
    pub trace: TraceSpec,
    pub checks: Checks,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            out_dir: None,
            data_dir: None,
            checkpoint: None,
            resume: None,
            workers: 0,
            cost_rate_per_hour: 0.0,
            data: DatasetSpec {
                seed: 0,
                augmentation: 5,
                sudoku4: TypeCounts {
                    count: 2300,
                    val: 200,
                    golden: 100,
                },
                ..DatasetSpec::default()
            },
            model: ModelSpec::default(),
            train: TrainConfig::default(),
            eval: EvalSpec::default(),
            sweep: SweepSpec::default(),
            trace: TraceSpec::default(),
            checks: Checks::default(),
        }
    }
}

fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Sets `a.b.c` in `root`; the value is parsed as JSON, or taken as a
/// string when it does not parse.
fn set_path(root: &mut Value, path: &str, raw: &str) -> Result<()> {
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut cur = root;
    let parts: Vec<&str> = path.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        if cur.is_null() {
            *cur = Value::Object(Default::default());
        }
        let obj = cur.as_object_mut().ok_or_else(|| {
            Error::Config(format!(
                "setting {path}: {} is not a section",
                parts[..i].join(".")
            ))
        })?;
        if i + 1 == parts.len() {
            if !obj.contains_key(*part) {
                return Err(Error::Config(format!("unknown setting {path}")));
            }
            obj.insert(part.to_string(), value);
            return Ok(());
        }
        cur = obj
            .get_mut(*part)
            .ok_or_else(|| Error::Config(format!("unknown setting {path}")))?;
    }
    Ok(())
}

impl RunConfig {
    /// Defaults, then the JSON file, then `key.path=value` overrides.
    pub fn load(file: Option<&Path>, overrides: &[(String, String)]) -> Result<RunConfig> {
        let mut v = serde_json::to_value(RunConfig::default())?;
        if let Some(path) = file {
            let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            let over: Value = serde_json::from_str(&text)
                .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
            if !over.is_object() {
                return Err(Error::Config(format!(
                    "{}: config must be a JSON object",
                    path.display()
                )));
            }
            merge(&mut v, over);
        }
        for (k, raw) in overrides {
            set_path(&mut v, k, raw)?;
        }
        let cfg: RunConfig =
            serde_json::from_value(v).map_err(|e| Error::Config(format!("invalid config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        if self.sweep.sigmas.is_empty() || self.sweep.seeds.is_empty() || self.sweep.k == 0 {
            return Err(Error::Config("sweep needs sigmas, seeds and k >= 1".into()));
        }
        if self.eval.k == 0 || self.trace.k == 0 {
            return Err(Error::Config("k must be at least 1".into()));
        }
        if !(self.cost_rate_per_hour.is_finite() && self.cost_rate_per_hour >= 0.0) {
            return Err(Error::Config("cost_rate_per_hour must be >= 0".into()));
        }
        Ok(())
    }

    pub fn out_dir(&self) -> PathBuf {
        self.out_dir
            .clone()
            .or_else(|| std::env::var_os(OUT_DIR_ENV).map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from("runs"))
    }

    pub fn data_dir(&self) -> PathBuf {
        self.data_dir
            .clone()
            .unwrap_or_else(|| self.out_dir().join("data"))
    }

    pub fn checkpoint_dir(&self) -> PathBuf {
        self.checkpoint
            .clone()
            .unwrap_or_else(|| self.out_dir().join("checkpoint"))
    }

    pub fn model_config(&self, data: &Dataset) -> ModelConfig {
        let m = &self.model;
        ModelConfig {
            vocab_size: data.manifest.vocab.size,
            seq_len: data.manifest.seq_len,
            hidden: m.hidden,
            n_latent: m.n_latent,
            t_recursions: m.t_recursions,
            n_sup: m.n_sup,
            expansion: m.expansion,
            q_head: m.q_head,
        }
    }
}

/// What a command produced.
#[derive(Clone, Debug, Default)]
pub struct CmdOutput {
    pub files: Vec<PathBuf>,
    pub summary: String,
}

fn write_file(path: &Path, text: &str) -> Result<PathBuf> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))?;
    Ok(path.to_path_buf())
}

fn write_json<S: Serialize>(path: &Path, value: &S) -> Result<PathBuf> {
    write_file(path, &(serde_json::to_string_pretty(value)? + "\n"))
}

fn with_workers<R: Send>(workers: usize, f: impl FnOnce() -> Result<R> + Send) -> Result<R> {
    if workers == 0 {
        return f();
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::Config(format!("cannot start {workers} workers: {e}")))?;
    pool.install(f)
}

fn meta(cfg: &RunConfig, started: Instant, extra: Value) -> Value {
    let secs = started.elapsed().as_secs_f64();
    let mut v = json!({
        "elapsed_secs": secs,
        "cost": cost_estimate(secs, cfg.cost_rate_per_hour),
        "cost_rate_per_hour": cfg.cost_rate_per_hour,
        "workers": cfg.workers,
        "build": BUILD_ID,
        "config": cfg,
    });
    merge(&mut v, extra);
    v
}

/// Reads the dataset from the data directory, generating it first if absent.
pub fn load_or_generate(cfg: &RunConfig) -> Result<Dataset> {
    let dir = cfg.data_dir();
    if dir.join("manifest.json").exists() {
        read_dataset(&dir)
    } else {
        let data = build_dataset(&cfg.data)?;
        write_dataset(&dir, &data)?;
        Ok(data)
    }
}

fn split<'a>(
    data: &'a Dataset,
    which: Split,
    limit: Option<usize>,
) -> Result<&'a [PuzzleInstance]> {
    let all = match which {
        Split::Train => &data.train,
        Split::Val => &data.val,
        Split::Golden => &data.golden,
    };
    if all.is_empty() {
        return Err(Error::Config(format!("split {which:?} is empty")));
    }
    Ok(&all[..limit.unwrap_or(all.len()).min(all.len())])
}

pub fn cmd_gen_data(cfg: &RunConfig) -> Result<CmdOutput> {
    let started = Instant::now();
    let dir = cfg.data_dir();
    let data = build_dataset(&cfg.data)?;
    write_dataset(&dir, &data)?;
    let out = cfg.out_dir();
    let m = &data.manifest.splits;
    let files = vec![
        dir.join("manifest.json"),
        write_json(
            &out.join("gen-data.meta.json"),
            &meta(cfg, started, json!({})),
        )?,
    ];
    Ok(CmdOutput {
        files,
        summary: format!(
            "wrote {} train / {} val / {} golden puzzles to {}",
            m.train,
            m.val,
            m.golden,
            dir.display()
        ),
    })
}

struct TrainObserver {
    log: BufWriter<fs::File>,
    checkpoints: PathBuf,
}

impl FitObserver<f32> for TrainObserver {
    fn on_step(&mut self, r: &StepRecord) -> Result<()> {
        write_event(&mut self.log, "step", r)
    }

    fn on_eval(&mut self, r: &EvalRecord) -> Result<()> {
        write_event(&mut self.log, "eval", r)?;
        self.log.flush().map_err(|e| Error::io("metrics.jsonl", e))
    }

    fn on_checkpoint(&mut self, state: &TrainState<f32>) -> Result<()> {
        let dir = self.checkpoints.join(format!("step-{:08}", state.step));
        save_train_state(&dir, state, progress_metrics(state))
    }
}

fn progress_metrics(state: &TrainState<f32>) -> BTreeMap<String, f64> {
    let mut m = BTreeMap::new();
    if let Some(r) = state.history.last() {
        m.insert("val_exact".into(), r.val_exact);
        m.insert("val_cell".into(), r.val_cell);
    }
    if let Some(best) = state.history.iter().map(|r| r.val_exact).reduce(f64::max) {
        m.insert("best_val_exact".into(), best);
    }
    m
}

pub fn cmd_train(cfg: &RunConfig) -> Result<CmdOutput> {
    let started = Instant::now();
    let out = cfg.out_dir();
    fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    let data = load_or_generate(cfg)?;
    let mcfg = cfg.model_config(&data);
    let mut state = match &cfg.resume {
        Some(dir) => {
            let s = load_train_state(dir)?;
            if *s.model.config() != mcfg {
                return Err(Error::Config(
                    "resume checkpoint was trained with a different model config".into(),
                ));
            }
            s
        }
        None => TrainState::new(Trm::init(mcfg, cfg.model.seed)?),
    };
    let log_path = out.join("metrics.jsonl");
    let file = fs::OpenOptions::new()
        .create(true)
        .write(true)
        .append(cfg.resume.is_some())
        .truncate(cfg.resume.is_none())
        .open(&log_path)
        .map_err(|e| Error::io(&log_path, e))?;
    let mut observer = TrainObserver {
        log: BufWriter::new(file),
        checkpoints: out.join("checkpoints"),
    };
    let pad = data.manifest.vocab.pad;
    let report = with_workers(cfg.workers, || {
        fit(
            &mut state,
            &data.train,
            &data.val,
            &cfg.train,
            pad,
            &mut observer,
        )
    })?;
    observer.log.flush().map_err(|e| Error::io(&log_path, e))?;
    let ckpt = cfg.checkpoint_dir();
    save_train_state(&ckpt, &state, progress_metrics(&state))?;
    let files = vec![
        log_path,
        ckpt.clone(),
        write_json(&out.join("train.config.json"), cfg)?,
        write_json(
            &out.join("train.meta.json"),
            &meta(cfg, started, json!({ "fit": report })),
        )?,
    ];
    Ok(CmdOutput {
        files,
        summary: format!(
            "trained {} steps ({:?}); last val exact {:.4}; checkpoint {}",
            report.steps,
            report.stop_reason,
            report.last_eval.map_or(f64::NAN, |r| r.val_exact),
            ckpt.display()
        ),
    })
}

fn inference_config(cfg: &RunConfig, depth: usize) -> InferenceConfig {
    let e = &cfg.eval;
    InferenceConfig {
        k: e.k,
        sigma: e.sigma,
        depth,
        selector: e.selector,
        seed: e.seed,
        langevin: e.langevin,
    }
}

/// Rejects a checkpoint whose vocabulary or sequence length differs from
/// the dataset's.
pub fn check_compatible(model: &Trm<f32>, data: &Dataset) -> Result<()> {
    let c = model.config();
    let m = &data.manifest;
    if c.vocab_size != m.vocab.size || c.seq_len != m.seq_len {
        return Err(Error::Config(format!(
            "checkpoint expects vocab {} / length {}, dataset has vocab {} / length {}",
            c.vocab_size, c.seq_len, m.vocab.size, m.seq_len
        )));
    }
    Ok(())
}

const SELECTORS: [(&str, Selector); 3] = [
    ("best_q", Selector::BestQ),
    ("mode", Selector::Mode),
    ("oracle", Selector::Oracle),
];

fn accuracy_block(idx: &[usize], det: &[bool], chosen: &[[bool; 3]]) -> Value {
    let n = idx.len().max(1) as f64;
    let frac = |f: &dyn Fn(usize) -> bool| idx.iter().filter(|&&i| f(i)).count() as f64 / n;
    let mut v = json!({ "count": idx.len(), "deterministic": frac(&|i| det[i]) });
    for (j, (name, _)) in SELECTORS.iter().enumerate() {
        v[*name] = json!(frac(&|i| chosen[i][j]));
    }
    v
}

/// Evaluation report; the contents depend only on the model, data and
/// evaluation settings. Every selector is scored on the same rollouts.
pub fn eval_report(
    model: &Trm<f32>,
    puzzles: &[PuzzleInstance],
    cfg: &RunConfig,
    pad: u32,
) -> Result<Value> {
    let depth = cfg.eval.depth.unwrap_or(model.config().n_sup);
    let det = evaluate(model, puzzles, depth, pad)?;
    let icfg = inference_config(cfg, depth);
    let m = rollout_matrix(model, puzzles, &icfg, pad)?;
    let mut chosen = Vec::with_capacity(puzzles.len());
    let mut per_puzzle = Vec::with_capacity(puzzles.len());
    for (i, p) in puzzles.iter().enumerate() {
        let preds: Vec<Prediction> = m.seqs[i]
            .iter()
            .zip(&m.q[i])
            .map(|(t, &q)| Prediction {
                tokens: t.clone(),
                q,
            })
            .collect();
        let mut row = [false; 3];
        let mut picks = json!({});
        for (j, (name, sel)) in SELECTORS.iter().enumerate() {
            let c = select(&preds, *sel, Some((&p.y, pad)))?;
            row[j] = m.correct[i][c];
            picks[*name] = json!(c);
        }
        chosen.push(row);
        per_puzzle.push(json!({
            "id": p.id,
            "type": p.puzzle_type.name(),
            "deterministic": det.correct[i],
            "selected": picks,
            "correct": { "best_q": row[0], "mode": row[1], "oracle": row[2] },
        }));
    }
    let all: Vec<usize> = (0..puzzles.len()).collect();
    let mut by_type = BTreeMap::new();
    for (i, p) in puzzles.iter().enumerate() {
        by_type
            .entry(p.puzzle_type.name())
            .or_insert_with(Vec::new)
            .push(i);
    }
    let by_type: BTreeMap<&str, Value> = by_type
        .into_iter()
        .map(|(k, idx)| (k, accuracy_block(&idx, &det.correct, &chosen)))
        .collect();
    Ok(json!({
        "model": model.config(),
        "eval": cfg.eval,
        "k": icfg.k,
        "sigma": icfg.sigma,
        "depth": depth,
        "count": puzzles.len(),
        "deterministic": { "exact": det.exact, "cell": det.cell },
        "exact": accuracy_block(&all, &det.correct, &chosen),
        "by_type": by_type,
        "pass_at_k": m.pass_at(icfg.k)?,
        "best_q_at_k": m.best_q_at(icfg.k)?,
        "mode_at_k": m.mode_at(icfg.k)?,
        "puzzles": per_puzzle,
    }))
}

pub fn cmd_eval(cfg: &RunConfig) -> Result<CmdOutput> {
    let started = Instant::now();
    let out = cfg.out_dir();
    let model = load_model(&cfg.checkpoint_dir())?;
    let data = load_or_generate(cfg)?;
    check_compatible(&model, &data)?;
    let puzzles = split(&data, cfg.eval.split, cfg.eval.limit)?;
    let report = with_workers(cfg.workers, || {
        eval_report(&model, puzzles, cfg, data.manifest.vocab.pad)
    })?;
    let secs = started.elapsed().as_secs_f64();
    let attempts = (puzzles.len() * cfg.eval.k.max(1)) as f64;
    let per_attempt = json!({
        "attempts": attempts,
        "secs_per_attempt": secs / attempts,
        "cost_per_attempt": cost_estimate(secs / attempts, cfg.cost_rate_per_hour),
    });
    let files = vec![
        write_json(&out.join("report.json"), &report)?,
        write_json(
            &out.join("report_meta.json"),
            &meta(cfg, started, per_attempt),
        )?,
    ];
    Ok(CmdOutput {
        files,
        summary: format!(
            "deterministic exact {:.4}, best-Q {:.4}, oracle {:.4} on {} puzzles",
            report["deterministic"]["exact"]
                .as_f64()
                .unwrap_or(f64::NAN),
            report["exact"]["best_q"].as_f64().unwrap_or(f64::NAN),
            report["exact"]["oracle"].as_f64().unwrap_or(f64::NAN),
            puzzles.len()
        ),
    })
}

fn sweep_svg(rows: &[SweepRow]) -> String {
    let summary = summarize_sweep(rows);
    let line = |name: &str, f: fn(&SweepSummary) -> f64| Series {
        name: name.into(),
        points: summary.iter().map(|r| (r.sigma, f(r))).collect(),
    };
    let k = rows.first().map_or(0, |r| r.k);
    svg::line_chart(
        "Accuracy vs noise scale",
        "sigma",
        "exact accuracy",
        &[
            line(&format!("pass@{k}"), |r| r.pass_at_k.mean),
            line(&format!("best-Q@{k}"), |r| r.best_q_at_k.mean),
            line(&format!("mode@{k}"), |r| r.mode_at_k.mean),
            line("deterministic", |r| r.deterministic),
        ],
    )
}

pub fn cmd_sweep(cfg: &RunConfig) -> Result<CmdOutput> {
    let started = Instant::now();
    let out = cfg.out_dir();
    let model = load_model(&cfg.checkpoint_dir())?;
    let data = load_or_generate(cfg)?;
    check_compatible(&model, &data)?;
    let s = &cfg.sweep;
    let puzzles = split(&data, s.split, s.limit)?;
    let depth = s.depth.unwrap_or(2 * model.config().n_sup);
    let pad = data.manifest.vocab.pad;
    let rows = with_workers(cfg.workers, || {
        sigma_sweep(&model, puzzles, &s.sigmas, &s.seeds, s.k, depth, pad)
    })?;
    let files = vec![
        write_file(&out.join("sweep.csv"), &sweep_csv(&rows))?,
        write_json(
            &out.join("sweep.json"),
            &json!({ "sweep": s, "depth": depth, "rows": rows, "summary": summarize_sweep(&rows) }),
        )?,
        write_file(&out.join("sweep.svg"), &sweep_svg(&rows))?,
        write_json(&out.join("sweep_meta.json"), &meta(cfg, started, json!({})))?,
    ];
    Ok(CmdOutput {
        files,
        summary: format!("{} sweep rows over {} puzzles", rows.len(), puzzles.len()),
    })
}

fn b64(t: &crate::tensor::Tensor<f32>) -> String {
    let bytes: Vec<u8> = t.data().iter().flat_map(|v| v.to_le_bytes()).collect();
    base64::engine::general_purpose::STANDARD.encode(bytes)
}

/// Decodes a base64 little-endian f32 snapshot.
pub fn decode_snapshot(s: &str) -> Result<Vec<f32>> {
    let bytes = base64::engine::general_purpose::STANDARD
        .decode(s)
        .map_err(|e| Error::Config(format!("bad base64 snapshot: {e}")))?;
    if bytes.len() % 4 != 0 {
        return Err(Error::Config(
            "snapshot length is not a multiple of 4".into(),
        ));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect())
}

fn group_curve(out: &mut String, group: &str, q: &[f64], acc: &[f64]) {
    for (t, (q, a)) in q.iter().zip(acc).enumerate() {
        out.push_str(&format!("{},{group},{q},{a}\n", t + 1));
    }
}

pub fn cmd_trace(cfg: &RunConfig) -> Result<CmdOutput> {
    let started = Instant::now();
    let out = cfg.out_dir();
    let model = load_model(&cfg.checkpoint_dir())?;
    let data = load_or_generate(cfg)?;
    check_compatible(&model, &data)?;
    let t = &cfg.trace;
    let puzzles = split(&data, t.split, None)?;
    let puzzle = puzzles.get(t.index).ok_or_else(|| {
        Error::Config(format!(
            "trace index {} out of range ({} puzzles)",
            t.index,
            puzzles.len()
        ))
    })?;
    let depth = t.depth.unwrap_or(model.config().n_sup);
    let pad = data.manifest.vocab.pad;
    let l = model.config().seq_len;
    let (finals, steps): (Vec<Prediction>, Vec<TraceStep<f32>>) = if t.k == 1 && t.sigma == 0.0 {
        deterministic_trace(&model, &puzzle.x, depth)?
    } else {
        let icfg = InferenceConfig {
            k: t.k,
            sigma: t.sigma,
            depth,
            selector: Selector::BestQ,
            seed: t.seed,
            langevin: None,
        };
        ptrm_trace(&model, &puzzle.x, &icfg)?
    };
    let k = finals.len();
    let correct: Vec<bool> = finals
        .iter()
        .map(|p| exact_match(&p.tokens, &puzzle.y, pad))
        .collect();

    let path = out.join("trace.jsonl");
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut w = BufWriter::new(fs::File::create(&path).map_err(|e| Error::io(&path, e))?);
    let mut features = Vec::with_capacity(k * steps.len());
    let mut labels = Vec::with_capacity(k * steps.len());
    let mut acc_series = vec![Vec::with_capacity(steps.len()); k];
    for s in &steps {
        for r in 0..k {
            let z = s.z.slice_rows(r * l, l);
            let y = s.y.slice_rows(r * l, l);
            let tokens = &s.tokens[r * l..(r + 1) * l];
            let acc = cell_accuracy(tokens, &puzzle.y, pad);
            acc_series[r].push(acc);
            let line = json!({
                "puzzle": puzzle.id,
                "step": s.step,
                "rollout": r,
                "q": s.q[r],
                "cell_accuracy": acc,
                "correct": exact_match(tokens, &puzzle.y, pad),
                "final_correct": correct[r],
                "tokens": tokens,
                "shape": [l, model.config().hidden],
                "z": b64(&z),
                "y": b64(&y),
            });
            serde_json::to_writer(&mut w, &line)?;
            w.write_all(b"\n").map_err(|e| Error::io(&path, e))?;
            features.push(y.to_f64_vec());
            labels.push((s.step, r));
        }
    }
    w.flush().map_err(|e| Error::io(&path, e))?;

    let q_series: Vec<Vec<f64>> = (0..k)
        .map(|r| steps.iter().map(|s| s.q[r]).collect())
        .collect();
    let q_agg = aggregate_trajectories(&q_series, &correct)?;
    let acc_agg = aggregate_trajectories(&acc_series, &correct)?;
    let mut curves = String::from("step,group,mean_q,mean_cellacc\n");
    if q_agg.correct.count > 0 {
        group_curve(
            &mut curves,
            "correct",
            &q_agg.correct.mean,
            &acc_agg.correct.mean,
        );
    }
    if q_agg.incorrect.count > 0 {
        group_curve(
            &mut curves,
            "incorrect",
            &q_agg.incorrect.mean,
            &acc_agg.incorrect.mean,
        );
    }

    let mut pca_csv = String::from("step,rollout,pc1,pc2,final_correct\n");
    let mut ok = Series {
        name: "final correct".into(),
        points: vec![],
    };
    let mut bad = Series {
        name: "final wrong".into(),
        points: vec![],
    };
    let pca = if features.len() >= 3 {
        Some(pca_project(&features, 2)?)
    } else {
        None
    };
    if let Some(pca) = &pca {
        for (p, &(step, r)) in pca.projected.iter().zip(&labels) {
            let (x, y) = (p[0], p.get(1).copied().unwrap_or(0.0));
            pca_csv.push_str(&format!("{step},{r},{x},{y},{}\n", correct[r]));
            let target = if correct[r] { &mut ok } else { &mut bad };
            target.points.push((x, y));
        }
    }
    let files = vec![
        path,
        write_file(&out.join("trace_pca.csv"), &pca_csv)?,
        write_file(&out.join("trajectory.csv"), &curves)?,
        write_json(
            &out.join("trace_summary.json"),
            &json!({
                "puzzle": puzzle.id,
                "rollouts": k,
                "depth": depth,
                "correct": correct,
                "q_by_outcome": q_agg,
                "cell_accuracy_by_outcome": acc_agg,
                "pca_variances": pca.as_ref().map(|p| p.variances.clone()),
            }),
        )?,
        write_file(
            &out.join("trace.svg"),
            &svg::scatter("Answer latent per step, PCA", "PC1", "PC2", &[ok, bad]),
        )?,
        write_json(&out.join("trace_meta.json"), &meta(cfg, started, json!({})))?,
    ];
    let hits = correct.iter().filter(|&&c| c).count();
    Ok(CmdOutput {
        files,
        summary: format!(
            "traced {k} rollouts x {depth} steps of {}; {hits} correct",
            puzzle.id
        ),
    })
}

fn read_json(path: &Path) -> Result<Option<Value>> {
    if !path.exists() {
        return Ok(None);
    }
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(Some(serde_json::from_str(&text)?))
}

/// Summarizes whatever outputs exist in the output directory and applies
/// the configured checks.
pub fn cmd_report(cfg: &RunConfig) -> Result<CmdOutput> {
    let out = cfg.out_dir();
    let mut md = String::from("# Run summary\n\n");
    let mut files = Vec::new();
    let mut failures = Vec::new();

    let log = out.join("metrics.jsonl");
    if log.exists() {
        let file = fs::File::open(&log).map_err(|e| Error::io(&log, e))?;
        let mut evals = Vec::new();
        for line in BufReader::new(file).lines() {
            let line = line.map_err(|e| Error::io(&log, e))?;
            let v: Value = serde_json::from_str(&line)?;
            if v["event"] == "eval" {
                evals.push((
                    v["step"].as_f64().unwrap_or(0.0),
                    v["val_exact"].as_f64().unwrap_or(0.0),
                    v["val_cell"].as_f64().unwrap_or(0.0),
                ));
            }
        }
        if let Some(last) = evals.last() {
            md.push_str(&format!(
                "Training: {} validations; last at step {} with exact {:.4}, cell {:.4}.\n\n",
                evals.len(),
                last.0,
                last.1,
                last.2
            ));
        }
        let chart = svg::line_chart(
            "Validation accuracy",
            "step",
            "accuracy",
            &[
                Series {
                    name: "exact".into(),
                    points: evals.iter().map(|e| (e.0, e.1)).collect(),
                },
                Series {
                    name: "cell".into(),
                    points: evals.iter().map(|e| (e.0, e.2)).collect(),
                },
            ],
        );
        files.push(write_file(&out.join("training.svg"), &chart)?);
    }

    if let Some(r) = read_json(&out.join("report.json"))? {
        let exact = r["deterministic"]["exact"].as_f64().unwrap_or(0.0);
        md.push_str(&format!(
            "Evaluation: {} puzzles, deterministic exact {:.4}, cell {:.4}.\n\n",
            r["count"],
            exact,
            r["deterministic"]["cell"].as_f64().unwrap_or(0.0)
        ));
        if let Some(types) = r["by_type"].as_object() {
            md.push_str(&format!("K = {}, sigma = {}.\n\n", r["k"], r["sigma"]));
            md.push_str("| type | puzzles | deterministic | best-Q | mode | oracle |\n|---|---|---|---|---|---|\n");
            let f = |v: &Value| v.as_f64().unwrap_or(f64::NAN);
            for (name, b) in types {
                md.push_str(&format!(
                    "| {name} | {} | {:.4} | {:.4} | {:.4} | {:.4} |\n",
                    b["count"],
                    f(&b["deterministic"]),
                    f(&b["best_q"]),
                    f(&b["mode"]),
                    f(&b["oracle"])
                ));
            }
            md.push('\n');
        }
        if let Some(min) = cfg.checks.min_val_exact {
            if exact < min {
                failures.push(format!("deterministic exact {exact:.4} < {min}"));
            }
        }
    } else if cfg.checks.min_val_exact.is_some() {
        failures.push("min_val_exact set but report.json is missing".into());
    }

    if let Some(s) = read_json(&out.join("sweep.json"))? {
        let summary: Vec<SweepSummary> = serde_json::from_value(s["summary"].clone())?;
        md.push_str(
            "| sigma | deterministic | pass@K | best-Q@K | mode@K |\n|---|---|---|---|---|\n",
        );
        let cell = |m: &MeanSpread| format!("{:.4} ± {:.4}", m.mean, m.std);
        for r in &summary {
            md.push_str(&format!(
                "| {} | {:.4} | {} | {} | {} |\n",
                r.sigma,
                r.deterministic,
                cell(&r.pass_at_k),
                cell(&r.best_q_at_k),
                cell(&r.mode_at_k)
            ));
        }
        md.push('\n');
        if let Some(gain) = cfg.checks.min_pass_gain {
            let bq = cfg.checks.min_best_q_gain.unwrap_or(f64::NEG_INFINITY);
            let ok = summary.iter().any(|r| {
                r.pass_at_k.mean - r.deterministic >= gain - 1e-12
                    && r.best_q_at_k.mean - r.deterministic >= bq - 1e-12
            });
            if !ok {
                failures.push(format!(
                    "no sigma reaches pass gain {gain} with best-Q gain {bq}"
                ));
            }
        }
    } else if cfg.checks.min_pass_gain.is_some() {
        failures.push("min_pass_gain set but sweep.json is missing".into());
    }

    if failures.is_empty() {
        md.push_str("All configured checks passed.\n");
    } else {
        md.push_str("Failed checks:\n\n");
        for f in &failures {
            md.push_str(&format!("- {f}\n"));
        }
    }
    files.push(write_file(&out.join("summary.md"), &md)?);
    if !failures.is_empty() {
        return Err(Error::CheckFailed(failures.join("; ")));
    }
    Ok(CmdOutput {
        files,
        summary: format!("wrote {}", out.join("summary.md").display()),
    })
}
