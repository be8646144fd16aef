//! Accuracy and selection metrics, trajectory statistics, PCA and cost.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::inference::{evaluate, rollout_matrix, InferenceConfig, Selector};
use crate::model::Trm;
use crate::puzzle::PuzzleInstance;
use crate::tensor::Real;

/// Fraction of non-pad target cells predicted exactly; `1.0` when every cell
/// is pad.
pub fn cell_accuracy(pred: &[u32], target: &[u32], pad: u32) -> f64 {
    let (mut hit, mut total) = (0usize, 0usize);
    for (&p, &t) in pred.iter().zip(target) {
        if t != pad {
            total += 1;
            hit += usize::from(p == t);
        }
    }
    if total == 0 {
        1.0
    } else {
        hit as f64 / total as f64
    }
}

/// True when every non-pad target cell is predicted exactly.
pub fn exact_match(pred: &[u32], target: &[u32], pad: u32) -> bool {
    pred.len() == target.len() && pred.iter().zip(target).all(|(&p, &t)| t == pad || p == t)
}

/// Per-puzzle rollout outcomes, one row per puzzle and one column per
/// rollout, in rollout order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RolloutMatrix {
    pub correct: Vec<Vec<bool>>,
    pub q: Vec<Vec<f64>>,
    pub seqs: Vec<Vec<Vec<u32>>>,
}

impl RolloutMatrix {
    pub fn puzzles(&self) -> usize {
        self.correct.len()
    }

    /// Smallest rollout count over puzzles.
    pub fn rollouts(&self) -> usize {
        self.correct.iter().map(Vec::len).min().unwrap_or(0)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.correct.len();
        if self.q.len() != n || (!self.seqs.is_empty() && self.seqs.len() != n) {
            return Err(Error::shape("rollout_matrix", "row counts differ"));
        }
        for (i, row) in self.correct.iter().enumerate() {
            if self.q[i].len() != row.len()
                || self.seqs.get(i).is_some_and(|s| s.len() != row.len())
            {
                return Err(Error::shape(
                    "rollout_matrix",
                    format!("puzzle {i} has ragged columns"),
                ));
            }
        }
        Ok(())
    }

    fn check_k(&self, k: usize) -> Result<()> {
        self.validate()?;
        if k == 0 || k > self.rollouts() {
            return Err(Error::Contract(format!(
                "k={k} outside 1..={}",
                self.rollouts()
            )));
        }
        Ok(())
    }

    fn mean_over_puzzles(&self, hit: impl Fn(usize) -> bool) -> f64 {
        let n = self.puzzles();
        if n == 0 {
            return 0.0;
        }
        (0..n).filter(|&i| hit(i)).count() as f64 / n as f64
    }

    /// Fraction of puzzles with a correct rollout among the first `k`.
    pub fn pass_at(&self, k: usize) -> Result<f64> {
        self.check_k(k)?;
        Ok(self.mean_over_puzzles(|i| self.correct[i][..k].iter().any(|&c| c)))
    }

    /// Fraction of puzzles whose highest-Q rollout among the first `k` is
    /// correct.
    pub fn best_q_at(&self, k: usize) -> Result<f64> {
        self.check_k(k)?;
        Ok(self.mean_over_puzzles(|i| self.correct[i][select_best_q(&self.q[i][..k])]))
    }

    /// Fraction of puzzles whose most frequent answer among the first `k`
    /// rollouts is correct.
    pub fn mode_at(&self, k: usize) -> Result<f64> {
        self.check_k(k)?;
        if self.seqs.len() != self.puzzles() {
            return Err(Error::Contract("mode@k needs rollout sequences".into()));
        }
        Ok(self.mean_over_puzzles(|i| self.correct[i][select_mode(&self.seqs[i][..k])]))
    }
}

/// Index of the largest value; ties go to the smallest index. NaN never wins.
pub fn select_best_q(q: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in q.iter().enumerate().skip(1) {
        if v > q[best] || q[best].is_nan() && !v.is_nan() {
            best = i;
        }
    }
    best
}

/// Index of the first occurrence of the most frequent sequence; ties go to
/// the lexicographically smallest sequence.
pub fn select_mode(seqs: &[Vec<u32>]) -> usize {
    let mut groups: HashMap<&[u32], (usize, usize)> = HashMap::new();
    for (i, s) in seqs.iter().enumerate() {
        groups.entry(s.as_slice()).or_insert((0, i)).0 += 1;
    }
    groups
        .into_iter()
        .max_by(|(sa, (ca, _)), (sb, (cb, _))| ca.cmp(cb).then_with(|| sb.cmp(sa)))
        .map(|(_, (_, first))| first)
        .unwrap_or(0)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SeriesStats {
    pub count: usize,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryAggregate {
    pub correct: SeriesStats,
    pub incorrect: SeriesStats,
}

fn series_stats(series: &[&Vec<f64>]) -> Result<SeriesStats> {
    let Some(first) = series.first() else {
        return Ok(SeriesStats::default());
    };
    let len = first.len();
    if series.iter().any(|s| s.len() != len) {
        return Err(Error::shape(
            "aggregate_trajectories",
            "series lengths differ",
        ));
    }
    let n = series.len() as f64;
    let mean: Vec<f64> = (0..len)
        .map(|t| series.iter().map(|s| s[t]).sum::<f64>() / n)
        .collect();
    let std = (0..len)
        .map(|t| (series.iter().map(|s| (s[t] - mean[t]).powi(2)).sum::<f64>() / n).sqrt())
        .collect();
    Ok(SeriesStats {
        count: series.len(),
        mean,
        std,
    })
}

/// Per-step mean and population std of per-rollout series, split by final
/// correctness.
pub fn aggregate_trajectories(
    series: &[Vec<f64>],
    correct: &[bool],
) -> Result<TrajectoryAggregate> {
    if series.len() != correct.len() {
        return Err(Error::shape(
            "aggregate_trajectories",
            "one correctness flag per series",
        ));
    }
    let pick = |want: bool| -> Vec<&Vec<f64>> {
        series
            .iter()
            .zip(correct)
            .filter(|(_, &c)| c == want)
            .map(|(s, _)| s)
            .collect()
    };
    Ok(TrajectoryAggregate {
        correct: series_stats(&pick(true))?,
        incorrect: series_stats(&pick(false))?,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pca {
    pub mean: Vec<f64>,
    /// Unit principal directions, largest variance first.
    pub components: Vec<Vec<f64>>,
    /// Population variance along each component.
    pub variances: Vec<f64>,
    /// Coordinates of every input row in the component basis.
    pub projected: Vec<Vec<f64>>,
}

impl Pca {
    pub fn reconstruct(&self, coords: &[f64]) -> Vec<f64> {
        let mut out = self.mean.clone();
        for (c, comp) in coords.iter().zip(&self.components) {
            for (o, v) in out.iter_mut().zip(comp) {
                *o += c * v;
            }
        }
        out
    }
}

const PCA_TOL: f64 = 1e-13;
const PCA_MAX_ITERS: usize = 20_000;

/// Top principal components by power iteration with deflation. Each
/// component's first nonzero entry is made positive. Directions with no
/// variance come back as zero vectors with zero variance.
///
/// With fewer rows than dimensions the iteration runs on the `n×n` Gram
/// matrix and maps its eigenvectors back, which keeps flattened latents cheap.
pub fn pca_project(rows: &[Vec<f64>], n_components: usize) -> Result<Pca> {
    if rows.len() < 3 {
        return Err(Error::Contract(format!(
            "pca needs at least 3 rows, got {}",
            rows.len()
        )));
    }
    let d = rows[0].len();
    if d == 0 || rows.iter().any(|r| r.len() != d) {
        return Err(Error::shape(
            "pca_project",
            "rows must share a nonzero width",
        ));
    }
    if n_components > d {
        return Err(Error::Contract(format!(
            "{n_components} components requested from {d} dims"
        )));
    }
    if rows.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite { op: "pca_project" });
    }
    let n = rows.len();
    let mean: Vec<f64> = (0..d)
        .map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / n as f64)
        .collect();
    let centered: Vec<Vec<f64>> = rows
        .iter()
        .map(|r| r.iter().zip(&mean).map(|(a, m)| a - m).collect())
        .collect();

    let gram = n < d;
    let m = if gram { n } else { d };
    let mut sym = vec![0.0; m * m];
    if gram {
        for i in 0..n {
            for j in i..n {
                sym[i * n + j] = dot(&centered[i], &centered[j]);
            }
        }
    } else {
        for r in &centered {
            for i in 0..d {
                for j in i..d {
                    sym[i * d + j] += r[i] * r[j];
                }
            }
        }
    }
    for i in 0..m {
        for j in i..m {
            sym[i * m + j] /= n as f64;
            sym[j * m + i] = sym[i * m + j];
        }
    }

    let (eigvecs, eigvals) = top_eigenpairs(&sym, m, n_components.min(m));
    let mut components = Vec::with_capacity(n_components);
    let mut variances = Vec::with_capacity(n_components);
    for (u, lambda) in eigvecs.into_iter().zip(eigvals) {
        let mut v = if gram && lambda > 0.0 {
            let mut v = vec![0.0; d];
            for (r, &w) in centered.iter().zip(&u) {
                v.iter_mut().zip(r).for_each(|(a, x)| *a += w * x);
            }
            if !normalize(&mut v) {
                v = vec![0.0; d];
            }
            v
        } else if gram {
            vec![0.0; d]
        } else {
            u
        };
        if let Some(&lead) = v.iter().find(|x| x.abs() > 1e-12) {
            if lead < 0.0 {
                v.iter_mut().for_each(|x| *x = -*x);
            }
        }
        components.push(v);
        variances.push(lambda);
    }
    while components.len() < n_components {
        components.push(vec![0.0; d]);
        variances.push(0.0);
    }
    let projected = centered
        .iter()
        .map(|r| components.iter().map(|c| dot(r, c)).collect())
        .collect();
    Ok(Pca {
        mean,
        components,
        variances,
        projected,
    })
}

/// Leading eigenpairs of a symmetric `m×m` matrix by power iteration with
/// Gram-Schmidt deflation. Exhausted directions yield zero vectors.
fn top_eigenpairs(a: &[f64], m: usize, count: usize) -> (Vec<Vec<f64>>, Vec<f64>) {
    let scale = (0..m).map(|i| a[i * m + i]).fold(0.0, f64::max);
    let apply =
        |v: &[f64]| -> Vec<f64> { (0..m).map(|i| dot(&a[i * m..(i + 1) * m], v)).collect() };
    let mut vecs: Vec<Vec<f64>> = Vec::new();
    let mut vals = Vec::new();
    for c in 0..count {
        let mut v: Vec<f64> = (0..m)
            .map(|i| 1.0 + ((i * 7 + c * 13) % 11) as f64 / 11.0)
            .collect();
        orthogonalize(&mut v, &vecs);
        let mut found = normalize(&mut v);
        for _ in 0..PCA_MAX_ITERS {
            if !found {
                break;
            }
            let mut w = apply(&v);
            orthogonalize(&mut w, &vecs);
            let rayleigh = dot(&w, &v);
            if !normalize(&mut w) || rayleigh <= scale * 1e-14 {
                found = false;
                break;
            }
            let delta = w
                .iter()
                .zip(&v)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            v = w;
            if delta < PCA_TOL {
                break;
            }
        }
        if found {
            vals.push(dot(&apply(&v), &v).max(0.0));
            vecs.push(v);
        } else {
            vals.push(0.0);
            vecs.push(vec![0.0; m]);
        }
    }
    (vecs, vals)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn orthogonalize(v: &mut [f64], basis: &[Vec<f64>]) {
    for b in basis {
        let p = dot(v, b);
        v.iter_mut().zip(b).for_each(|(x, y)| *x -= p * y);
    }
}

fn normalize(v: &mut [f64]) -> bool {
    let norm = dot(v, v).sqrt();
    if norm <= 1e-300 || !norm.is_finite() {
        return false;
    }
    v.iter_mut().for_each(|x| *x /= norm);
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub sigma: f64,
    pub seed: u64,
    pub k: usize,
    pub depth: usize,
    pub puzzles: usize,
    pub deterministic: f64,
    pub pass_at_k: f64,
    pub best_q_at_k: f64,
    pub mode_at_k: f64,
}

/// One row per `(sigma, seed)`: selection accuracies of `k` rollouts
/// against the deterministic accuracy at the same depth.
pub fn sigma_sweep<T: Real>(
    model: &Trm<T>,
    puzzles: &[PuzzleInstance],
    sigmas: &[f64],
    seeds: &[u64],
    k: usize,
    depth: usize,
    pad: u32,
) -> Result<Vec<SweepRow>> {
    let det = evaluate(model, puzzles, depth, pad)?.exact;
    let mut rows = Vec::with_capacity(sigmas.len() * seeds.len());
    for &sigma in sigmas {
        for &seed in seeds {
            let cfg = InferenceConfig {
                k,
                sigma,
                depth,
                selector: Selector::BestQ,
                seed,
                langevin: None,
            };
            let m = rollout_matrix(model, puzzles, &cfg, pad)?;
            rows.push(SweepRow {
                sigma,
                seed,
                k,
                depth,
                puzzles: puzzles.len(),
                deterministic: det,
                pass_at_k: m.pass_at(k)?,
                best_q_at_k: m.best_q_at(k)?,
                mode_at_k: m.mode_at(k)?,
            });
        }
    }
    Ok(rows)
}

/// Seed mean and population spread of one sweep metric.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanSpread {
    pub mean: f64,
    pub std: f64,
}

impl MeanSpread {
    fn of(values: impl Iterator<Item = f64> + Clone) -> Self {
        let n = values.clone().count().max(1) as f64;
        let mean = values.clone().sum::<f64>() / n;
        let var = values.map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        Self {
            mean,
            std: var.sqrt(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepSummary {
    pub sigma: f64,
    pub seeds: usize,
    pub k: usize,
    pub depth: usize,
    pub puzzles: usize,
    pub deterministic: f64,
    pub pass_at_k: MeanSpread,
    pub best_q_at_k: MeanSpread,
    pub mode_at_k: MeanSpread,
}

/// One summary per sigma, in first-seen order.
pub fn summarize_sweep(rows: &[SweepRow]) -> Vec<SweepSummary> {
    let mut sigmas: Vec<f64> = Vec::new();
    for r in rows {
        if !sigmas.contains(&r.sigma) {
            sigmas.push(r.sigma);
        }
    }
    sigmas
        .into_iter()
        .map(|s| {
            let group: Vec<&SweepRow> = rows.iter().filter(|r| r.sigma == s).collect();
            let stat = |f: fn(&SweepRow) -> f64| MeanSpread::of(group.iter().map(move |r| f(r)));
            SweepSummary {
                sigma: s,
                seeds: group.len(),
                k: group[0].k,
                depth: group[0].depth,
                puzzles: group[0].puzzles,
                deterministic: stat(|r| r.deterministic).mean,
                pass_at_k: stat(|r| r.pass_at_k),
                best_q_at_k: stat(|r| r.best_q_at_k),
                mode_at_k: stat(|r| r.mode_at_k),
            }
        })
        .collect()
}

pub const SWEEP_CSV_HEADER: &str =
    "sigma,seed,k,depth,puzzles,deterministic,pass_at_k,best_q_at_k,mode_at_k";

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from(SWEEP_CSV_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{}\n",
            r.sigma,
            r.seed,
            r.k,
            r.depth,
            r.puzzles,
            r.deterministic,
            r.pass_at_k,
            r.best_q_at_k,
            r.mode_at_k
        ));
    }
    out
}

/// Compute cost of `seconds` of wall-clock at `rate_per_hour`.
pub fn cost_estimate(seconds: f64, rate_per_hour: f64) -> f64 {
    seconds / 3600.0 * rate_per_hour
}
