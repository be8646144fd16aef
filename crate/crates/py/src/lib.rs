use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use ptrm_core::checkpoint::{load_model, save_model};
use ptrm_core::inference::{
    deterministic_infer, ptrm_infer, InferenceConfig, LangevinConfig, Selector,
};
use ptrm_core::metrics::{self, RolloutMatrix};
use ptrm_core::model::{ModelConfig, QHeadKind, Trm};
use ptrm_core::puzzle::{self, DatasetSpec, PuzzleInstance, VocabSpec};
use ptrm_core::training::{fit, NoObserver, TrainConfig, TrainState};
use ptrm_core::Error;

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io { .. } => PyIOError::new_err(e.to_string()),
        Error::Shape { .. } | Error::Contract(_) | Error::Puzzle(_) => {
            PyValueError::new_err(e.to_string())
        }
        e if e.is_config() => PyValueError::new_err(e.to_string()),
        e => PyRuntimeError::new_err(e.to_string()),
    }
}

fn parse<T: serde::de::DeserializeOwned>(what: &str, json: Option<&str>) -> PyResult<T>
where
    T: Default,
{
    match json {
        None => Ok(T::default()),
        Some(s) => {
            serde_json::from_str(s).map_err(|e| PyValueError::new_err(format!("bad {what}: {e}")))
        }
    }
}

fn selector(name: &str) -> PyResult<Selector> {
    serde_json::from_value(serde_json::Value::String(name.into())).map_err(|_| {
        PyValueError::new_err(format!(
            "unknown selector {name:?}; use best-q, mode or oracle"
        ))
    })
}

/// A generated puzzle: flattened input and target token ids.
#[pyclass(get_all, frozen, skip_from_py_object)]
#[derive(Clone)]
struct Puzzle {
    id: String,
    kind: String,
    rows: usize,
    cols: usize,
    x: Vec<u32>,
    y: Vec<u32>,
}

impl Puzzle {
    fn wrap(p: PuzzleInstance) -> Self {
        Self {
            id: p.id,
            kind: p.puzzle_type.name().into(),
            rows: p.rows,
            cols: p.cols,
            x: p.x,
            y: p.y,
        }
    }

    fn unwrap(&self) -> PyResult<PuzzleInstance> {
        let puzzle_type = serde_json::from_value(serde_json::Value::String(self.kind.clone()))
            .map_err(|_| PyValueError::new_err(format!("unknown puzzle kind {:?}", self.kind)))?;
        Ok(PuzzleInstance {
            id: self.id.clone(),
            puzzle_type,
            rows: self.rows,
            cols: self.cols,
            x: self.x.clone(),
            y: self.y.clone(),
        })
    }
}

#[pymethods]
impl Puzzle {
    fn __repr__(&self) -> String {
        format!(
            "Puzzle(id={:?}, kind={:?}, {}x{})",
            self.id, self.kind, self.rows, self.cols
        )
    }
}

fn unwrap_all(ps: &[PyRef<'_, Puzzle>]) -> PyResult<Vec<PuzzleInstance>> {
    ps.iter().map(|p| p.unwrap()).collect()
}

/// A recursive reasoning model with f32 parameters.
#[pyclass(frozen)]
struct Model {
    inner: Trm<f32>,
}

#[pymethods]
impl Model {
    #[staticmethod]
    #[pyo3(signature = (vocab_size, seq_len, hidden=128, n_latent=4, t_recursions=3, n_sup=6, expansion=1, q_head="linear-token0", seed=0))]
    #[allow(clippy::too_many_arguments)]
    fn init(
        vocab_size: usize,
        seq_len: usize,
        hidden: usize,
        n_latent: usize,
        t_recursions: usize,
        n_sup: usize,
        expansion: usize,
        q_head: &str,
        seed: u64,
    ) -> PyResult<Self> {
        let q_head = match q_head {
            "linear-token0" => QHeadKind::LinearToken0,
            "attention-pooled" => QHeadKind::AttentionPooled,
            other => return Err(PyValueError::new_err(format!("unknown q_head {other:?}"))),
        };
        let config = ModelConfig {
            vocab_size,
            seq_len,
            hidden,
            n_latent,
            t_recursions,
            n_sup,
            expansion,
            q_head,
        };
        Ok(Self {
            inner: Trm::init(config, seed).map_err(py_err)?,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: load_model(&path).map_err(py_err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        save_model(&path, &self.inner, 0, Default::default()).map_err(py_err)
    }

    /// Model configuration as a JSON string.
    fn config_json(&self) -> String {
        serde_json::to_string(self.inner.config()).expect("config serializes")
    }

    #[getter]
    fn seq_len(&self) -> usize {
        self.inner.config().seq_len
    }

    #[getter]
    fn n_sup(&self) -> usize {
        self.inner.config().n_sup
    }

    #[getter]
    fn num_parameters(&self) -> usize {
        self.inner.params().num_parameters()
    }

    fn parameter_names(&self) -> Vec<String> {
        self.inner.params().names().to_vec()
    }

    /// Deterministic answer and Q logit for one puzzle.
    #[pyo3(signature = (tokens, depth=None))]
    fn infer(&self, tokens: Vec<u32>, depth: Option<usize>) -> PyResult<(Vec<u32>, f64)> {
        let depth = depth.unwrap_or(self.inner.config().n_sup);
        let mut out = deterministic_infer(&self.inner, &tokens, depth).map_err(py_err)?;
        let p = out.swap_remove(0);
        Ok((p.tokens, p.q))
    }

    /// `k` noisy rollouts; returns `([(tokens, q), ...], selected_index)`.
    #[pyo3(signature = (tokens, k, sigma, depth=None, seed=0, selector="best-q", target=None, langevin_steps=0, langevin_eta=0.0, langevin_gradient=true))]
    #[allow(clippy::too_many_arguments)]
    fn ptrm_infer(
        &self,
        tokens: Vec<u32>,
        k: usize,
        sigma: f64,
        depth: Option<usize>,
        seed: u64,
        selector: &str,
        target: Option<Vec<u32>>,
        langevin_steps: usize,
        langevin_eta: f64,
        langevin_gradient: bool,
    ) -> PyResult<(Vec<(Vec<u32>, f64)>, usize)> {
        let cfg = InferenceConfig {
            k,
            sigma,
            depth: depth.unwrap_or(self.inner.config().n_sup),
            selector: self::selector(selector)?,
            seed,
            langevin: (langevin_steps > 0).then_some(LangevinConfig {
                steps: langevin_steps,
                eta: langevin_eta,
                gradient: langevin_gradient,
            }),
        };
        let pad = VocabSpec::default().pad;
        let out = ptrm_infer(
            &self.inner,
            &tokens,
            &cfg,
            target.as_deref().map(|t| (t, pad)),
        )
        .map_err(py_err)?;
        Ok((
            out.rollouts.into_iter().map(|p| (p.tokens, p.q)).collect(),
            out.selected,
        ))
    }

    /// Deterministic exact and cell accuracy over puzzles.
    #[pyo3(signature = (puzzles, depth=None))]
    fn evaluate(
        &self,
        puzzles: Vec<PyRef<'_, Puzzle>>,
        depth: Option<usize>,
    ) -> PyResult<(f64, f64)> {
        let ps = unwrap_all(&puzzles)?;
        let depth = depth.unwrap_or(self.inner.config().n_sup);
        let s = ptrm_core::inference::evaluate(&self.inner, &ps, depth, VocabSpec::default().pad)
            .map_err(py_err)?;
        Ok((s.exact, s.cell))
    }

    /// Trains a copy of this model; returns it with the fit report as JSON.
    #[pyo3(signature = (train, val, config_json=None))]
    fn fit(
        &self,
        train: Vec<PyRef<'_, Puzzle>>,
        val: Vec<PyRef<'_, Puzzle>>,
        config_json: Option<&str>,
    ) -> PyResult<(Model, String)> {
        let cfg: TrainConfig = parse("train config", config_json)?;
        let (train, val) = (unwrap_all(&train)?, unwrap_all(&val)?);
        let mut state = TrainState::new(self.inner.clone());
        let report = fit(
            &mut state,
            &train,
            &val,
            &cfg,
            VocabSpec::default().pad,
            &mut NoObserver,
        )
        .map_err(py_err)?;
        let json = serde_json::to_string(&report).expect("report serializes");
        Ok((Model { inner: state.model }, json))
    }
}

/// Builds train/val/golden splits from a JSON dataset spec.
#[pyfunction]
#[pyo3(signature = (spec_json=None))]
fn build_dataset(spec_json: Option<&str>) -> PyResult<(Vec<Puzzle>, Vec<Puzzle>, Vec<Puzzle>)> {
    let spec: DatasetSpec = parse("dataset spec", spec_json)?;
    let d = puzzle::build_dataset(&spec).map_err(py_err)?;
    let wrap = |v: Vec<PuzzleInstance>| v.into_iter().map(Puzzle::wrap).collect();
    Ok((wrap(d.train), wrap(d.val), wrap(d.golden)))
}

/// Up to `limit` completions of a Sudoku grid of digits (0 = blank).
#[pyfunction]
#[pyo3(signature = (grid, box_rows=2, box_cols=2, limit=2))]
fn solve_sudoku(
    grid: Vec<u8>,
    box_rows: usize,
    box_cols: usize,
    limit: usize,
) -> PyResult<Vec<Vec<u8>>> {
    puzzle::solve_sudoku(&grid, box_rows, box_cols, limit).map_err(py_err)
}

#[pyfunction]
fn dihedral_transform(grid: Vec<u32>, rows: usize, cols: usize, element: u8) -> PyResult<Vec<u32>> {
    puzzle::dihedral_transform(&grid, rows, cols, element).map_err(py_err)
}

fn matrix(
    correct: Vec<Vec<bool>>,
    q: Option<Vec<Vec<f64>>>,
    seqs: Option<Vec<Vec<Vec<u32>>>>,
) -> RolloutMatrix {
    let q = q.unwrap_or_else(|| correct.iter().map(|r| vec![0.0; r.len()]).collect());
    RolloutMatrix {
        correct,
        q,
        seqs: seqs.unwrap_or_default(),
    }
}

#[pyfunction]
fn pass_at_k(correct: Vec<Vec<bool>>, k: usize) -> PyResult<f64> {
    matrix(correct, None, None).pass_at(k).map_err(py_err)
}

#[pyfunction]
fn best_q_at_k(correct: Vec<Vec<bool>>, q: Vec<Vec<f64>>, k: usize) -> PyResult<f64> {
    matrix(correct, Some(q), None).best_q_at(k).map_err(py_err)
}

#[pyfunction]
fn mode_at_k(correct: Vec<Vec<bool>>, seqs: Vec<Vec<Vec<u32>>>, k: usize) -> PyResult<f64> {
    matrix(correct, None, Some(seqs)).mode_at(k).map_err(py_err)
}

#[pyfunction]
#[pyo3(signature = (pred, target, pad=0))]
fn cell_accuracy(pred: Vec<u32>, target: Vec<u32>, pad: u32) -> f64 {
    metrics::cell_accuracy(&pred, &target, pad)
}

#[pyfunction]
fn cost_estimate(seconds: f64, rate_per_hour: f64) -> f64 {
    metrics::cost_estimate(seconds, rate_per_hour)
}

/// Top principal components: `(components, variances, projected)`.
#[pyfunction]
#[pyo3(signature = (rows, k=2))]
#[allow(clippy::type_complexity)]
fn pca_project(
    rows: Vec<Vec<f64>>,
    k: usize,
) -> PyResult<(Vec<Vec<f64>>, Vec<f64>, Vec<Vec<f64>>)> {
    let p = metrics::pca_project(&rows, k).map_err(py_err)?;
    Ok((p.components, p.variances, p.projected))
}

#[pymodule]
pub fn ptrm(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Model>()?;
    m.add_class::<Puzzle>()?;
    m.add_function(wrap_pyfunction!(build_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(solve_sudoku, m)?)?;
    m.add_function(wrap_pyfunction!(dihedral_transform, m)?)?;
    m.add_function(wrap_pyfunction!(pass_at_k, m)?)?;
    m.add_function(wrap_pyfunction!(best_q_at_k, m)?)?;
    m.add_function(wrap_pyfunction!(mode_at_k, m)?)?;
    m.add_function(wrap_pyfunction!(cell_accuracy, m)?)?;
    m.add_function(wrap_pyfunction!(cost_estimate, m)?)?;
    m.add_function(wrap_pyfunction!(pca_project, m)?)?;
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    Ok(())
}
