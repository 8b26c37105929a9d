//! Scoring predicted systems against ground truth: the R² metric, the
//! reconstruction and generalization tasks, accuracy, and corpus sweeps.

use std::io::{Read, Write};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corruption::CorruptionConfig;
use crate::expr::OdeSystem;
use crate::integrator::{solve_at, IntegrationConfig, IntegrationFailure, SolverOptions};
use crate::odebench::{generate_entry_trajectories, BenchmarkEntry};
use crate::rng::{stream, RandomSource};
use crate::trajectory::{linspace, Trajectory};

pub const ACCURACY_THRESHOLD: f64 = 0.9;
/// Points of the dense comparison grid.
pub const DENSE_GRID: usize = 512;
pub const NOISE_LEVELS: [f64; 6] = [0.0, 0.01, 0.02, 0.03, 0.04, 0.05];
pub const SUBSAMPLE_LEVELS: [f64; 2] = [0.0, 0.5];

/// Variance-weighted R² between two row-major `n × dim` matrices.
///
/// Equals `1 - Σ SSE_j / Σ SST_j`, i.e. per-dimension R² averaged with
/// weights proportional to each dimension's variance in `y_true`. Returns
/// `None` (invalid) when `y_pred` has a non-finite entry. If `y_true` is
/// constant in every dimension the score is 1 for an exact match and
/// `-inf` otherwise.
pub fn r2_score(y_true: &[f64], y_pred: &[f64], dim: usize) -> Option<f64> {
    assert_eq!(y_true.len(), y_pred.len(), "shape mismatch");
    assert!(dim > 0 && y_true.len() % dim == 0, "bad dimension");
    if y_pred.iter().any(|v| !v.is_finite()) {
        return None;
    }
    let n = y_true.len() / dim;
    let mut sse = 0.0;
    let mut sst = 0.0;
    for j in 0..dim {
        let col = (0..n).map(|i| y_true[i * dim + j]);
        let mean = col.clone().sum::<f64>() / n as f64;
        for i in 0..n {
            let t = y_true[i * dim + j];
            let p = y_pred[i * dim + j];
            sse += (t - p) * (t - p);
            sst += (t - mean) * (t - mean);
        }
    }
    if sst == 0.0 {
        return Some(if sse == 0.0 { 1.0 } else { f64::NEG_INFINITY });
    }
    Some(1.0 - sse / sst)
}

/// R² of integrating `sys` from the first observed state over the observed
/// times. Integration failures and invalid predictions give `-inf`.
pub fn fit_score(sys: &OdeSystem, observed: &Trajectory, opts: &SolverOptions) -> f64 {
    if sys.dim() != observed.dim() {
        return f64::NEG_INFINITY;
    }
    match solve_at(sys, observed.state(0), observed.times(), opts) {
        Ok(pred) => r2_score(observed.states(), pred.states(), observed.dim()).unwrap_or(f64::NEG_INFINITY),
        Err(_) => f64::NEG_INFINITY,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Reconstruction,
    Generalization,
}

impl Task {
    pub const ALL: [Task; 2] = [Task::Reconstruction, Task::Generalization];

    pub fn name(self) -> &'static str {
        match self {
            Task::Reconstruction => "reconstruction",
            Task::Generalization => "generalization",
        }
    }

    /// Index of the initial condition used by this task.
    pub fn ic_index(self) -> usize {
        match self {
            Task::Reconstruction => 0,
            Task::Generalization => 1,
        }
    }
}

impl std::str::FromStr for Task {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "reconstruction" => Ok(Task::Reconstruction),
            "generalization" => Ok(Task::Generalization),
            _ => Err(format!("unknown task `{s}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationResult {
    /// `None` marks an invalid prediction.
    pub r2: Option<f64>,
    pub accurate: bool,
    pub complexity: usize,
    pub inference_seconds: f64,
    pub task: Task,
    pub corruption: CorruptionConfig,
}

impl EvaluationResult {
    pub fn new(r2: Option<f64>, complexity: usize, task: Task) -> Self {
        Self {
            r2,
            accurate: is_accurate(r2, ACCURACY_THRESHOLD),
            complexity,
            inference_seconds: 0.0,
            task,
            corruption: CorruptionConfig::CLEAN,
        }
    }

    pub fn invalid(task: Task) -> Self {
        Self::new(None, 0, task)
    }
}

fn is_accurate(r2: Option<f64>, threshold: f64) -> bool {
    matches!(r2, Some(v) if v.is_finite() && v > threshold)
}

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("ground-truth integration failed: {0}")]
    GroundTruth(IntegrationFailure),
    #[error("initial condition has length {got}, system dimension is {dim}")]
    Dimension { got: usize, dim: usize },
}

/// Integrates `truth` and `pred` from `ic` on a dense grid over `t_span`
/// and scores the prediction. A failing prediction is invalid; a failing
/// ground truth is an error.
pub fn score_against_truth(
    pred: &OdeSystem,
    truth: &OdeSystem,
    ic: &[f64],
    t_span: (f64, f64),
    n_dense: usize,
    opts: &SolverOptions,
) -> Result<Option<f64>, EvalError> {
    if ic.len() != truth.dim() {
        return Err(EvalError::Dimension {
            got: ic.len(),
            dim: truth.dim(),
        });
    }
    let times = linspace(t_span.0, t_span.1, n_dense);
    let reference = SolverOptions {
        wall_timeout: None,
        ..*opts
    };
    let truth_traj = solve_at(truth, ic, &times, &reference).map_err(EvalError::GroundTruth)?;
    if pred.dim() != truth.dim() {
        return Ok(None);
    }
    Ok(match solve_at(pred, ic, &times, opts) {
        Ok(p) => r2_score(truth_traj.states(), p.states(), truth.dim()),
        Err(_) => None,
    })
}

pub fn reconstruction_eval(
    pred: &OdeSystem,
    truth: &OdeSystem,
    ic: &[f64],
    t_span: (f64, f64),
    n_dense: usize,
) -> Result<EvaluationResult, EvalError> {
    let r2 = score_against_truth(pred, truth, ic, t_span, n_dense, &SolverOptions::default())?;
    Ok(EvaluationResult::new(r2, pred.complexity(), Task::Reconstruction))
}

/// Same scorer as [`reconstruction_eval`], from a different initial
/// condition.
pub fn generalization_eval(
    pred: &OdeSystem,
    truth: &OdeSystem,
    new_ic: &[f64],
    t_span: (f64, f64),
    n_dense: usize,
) -> Result<EvaluationResult, EvalError> {
    let r2 = score_against_truth(pred, truth, new_ic, t_span, n_dense, &SolverOptions::default())?;
    Ok(EvaluationResult::new(r2, pred.complexity(), Task::Generalization))
}

/// Share of scores that are finite and strictly above `threshold`. Invalid
/// scores count in the denominator. Empty input gives 0.
pub fn accuracy_at_threshold<I>(scores: I, threshold: f64) -> f64
where
    I: IntoIterator<Item = Option<f64>>,
{
    let (hits, total) = scores.into_iter().fold((0usize, 0usize), |(h, t), r| {
        (h + is_accurate(r, threshold) as usize, t + 1)
    });
    if total == 0 {
        0.0
    } else {
        hits as f64 / total as f64
    }
}

/// Anything that maps an observed trajectory to a predicted system.
/// `None` means no valid prediction. `item` identifies the benchmark entry
/// (or held-out example); real models ignore it, reference predictors used
/// to check the harness look the truth up with it.
pub trait Predictor: Sync {
    fn predict(&self, item: u32, observed: &Trajectory, rng: &mut RandomSource) -> Option<OdeSystem>;
}

impl<F> Predictor for F
where
    F: Fn(u32, &Trajectory, &mut RandomSource) -> Option<OdeSystem> + Sync,
{
    fn predict(&self, item: u32, observed: &Trajectory, rng: &mut RandomSource) -> Option<OdeSystem> {
        self(item, observed, rng)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchmarkConfig {
    pub noise_levels: Vec<f64>,
    pub subsample_levels: Vec<f64>,
    pub tasks: Vec<Task>,
    /// Grid of the observed (pre-corruption) input trajectory.
    pub integration: IntegrationConfig,
    pub n_dense: usize,
    pub threshold: f64,
    pub seed: u64,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        Self {
            noise_levels: NOISE_LEVELS.to_vec(),
            subsample_levels: SUBSAMPLE_LEVELS.to_vec(),
            tasks: Task::ALL.to_vec(),
            integration: IntegrationConfig {
                grid_size: 150,
                ..IntegrationConfig::default()
            },
            n_dense: DENSE_GRID,
            threshold: ACCURACY_THRESHOLD,
            seed: 0,
        }
    }
}

impl BenchmarkConfig {
    pub fn grid(&self) -> Vec<CorruptionConfig> {
        let mut out = Vec::new();
        for &rho in &self.subsample_levels {
            for &sigma in &self.noise_levels {
                out.push(CorruptionConfig::new(sigma, rho));
            }
        }
        out
    }
}

/// One (entry, corruption, task) cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkRow {
    pub entry_id: u32,
    pub dim: usize,
    pub chaotic: bool,
    pub noise: f64,
    pub subsample: f64,
    pub task: Task,
    pub r2: Option<f64>,
    pub accurate: bool,
    pub complexity: usize,
    pub inference_seconds: f64,
    pub prediction: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub noise: f64,
    pub subsample: f64,
    pub task: Task,
    pub count: usize,
    pub invalid: usize,
    pub accuracy: f64,
    pub mean_r2: Option<f64>,
    pub median_r2: Option<f64>,
}

/// Runs `predictor` on every entry under every corruption level and scores
/// the prediction for each requested task. Failures become invalid rows.
///
/// The prediction is always made from the IC-1 observation; generalization
/// re-scores that same prediction from IC-2. Randomness for each (entry,
/// corruption) cell comes from its own stream, so results do not depend on
/// scheduling.
pub fn run_benchmark(
    predictor: &dyn Predictor,
    corpus: &[BenchmarkEntry],
    cfg: &BenchmarkConfig,
) -> Vec<BenchmarkRow> {
    let grid = cfg.grid();
    let cells: Vec<(usize, usize)> = (0..corpus.len())
        .flat_map(|e| (0..grid.len()).map(move |g| (e, g)))
        .collect();
    let nested: Vec<Vec<BenchmarkRow>> = cells
        .par_iter()
        .map(|&(e, g)| {
            let entry = &corpus[e];
            let corruption = grid[g];
            let cell_index = (entry.id as u64) << 16 | g as u64;
            let mut rng = stream(cfg.seed, cell_index);
            run_cell(predictor, entry, corruption, cfg, &mut rng)
        })
        .collect();
    nested.into_iter().flatten().collect()
}

fn run_cell(
    predictor: &dyn Predictor,
    entry: &BenchmarkEntry,
    corruption: CorruptionConfig,
    cfg: &BenchmarkConfig,
    rng: &mut RandomSource,
) -> Vec<BenchmarkRow> {
    let row = |task: Task, r2: Option<f64>, complexity: usize, secs: f64, pred: Option<String>| BenchmarkRow {
        entry_id: entry.id,
        dim: entry.dim(),
        chaotic: entry.chaotic,
        noise: corruption.noise_sigma,
        subsample: corruption.subsample_rho,
        task,
        r2,
        accurate: is_accurate(r2, cfg.threshold),
        complexity,
        inference_seconds: secs,
        prediction: pred,
    };
    let trajs = match generate_entry_trajectories(entry, &cfg.integration, &corruption, rng) {
        Ok(t) => t,
        Err(e) => {
            log::warn!("{e}");
            return cfg.tasks.iter().map(|&t| row(t, None, 0, 0.0, None)).collect();
        }
    };
    let start = Instant::now();
    let pred = predictor.predict(entry.id, trajs.reconstruction(), rng);
    let secs = start.elapsed().as_secs_f64();
    let Some(pred) = pred else {
        return cfg.tasks.iter().map(|&t| row(t, None, 0, secs, None)).collect();
    };
    let span = (cfg.integration.t_start, cfg.integration.t_end);
    let opts = cfg.integration.tolerances();
    cfg.tasks
        .iter()
        .map(|&task| {
            let ic = &entry.initial_conditions[task.ic_index()];
            let r2 = match score_against_truth(&pred, &entry.system, ic, span, cfg.n_dense, &opts) {
                Ok(r) => r,
                Err(e) => {
                    log::warn!("entry {}: {e}", entry.id);
                    None
                }
            };
            row(task, r2, pred.complexity(), secs, Some(pred.to_infix()))
        })
        .collect()
}

fn median(sorted: &[f64]) -> Option<f64> {
    let n = sorted.len();
    if n == 0 {
        return None;
    }
    Some(if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    })
}

/// Mean and median over finite scores; invalid and `-inf` scores are
/// excluded from both but counted in `accuracy`.
pub fn summarize(scores: &[Option<f64>], threshold: f64) -> (f64, Option<f64>, Option<f64>, usize) {
    let accuracy = accuracy_at_threshold(scores.iter().copied(), threshold);
    let mut finite: Vec<f64> = scores.iter().flatten().copied().filter(|v| v.is_finite()).collect();
    finite.sort_by(|a, b| a.total_cmp(b));
    let mean = (!finite.is_empty()).then(|| finite.iter().sum::<f64>() / finite.len() as f64);
    let invalid = scores.iter().filter(|s| s.is_none()).count();
    (accuracy, mean, median(&finite), invalid)
}

/// Aggregates rows per (σ, ρ, task), in first-appearance order.
pub fn aggregate(rows: &[BenchmarkRow], threshold: f64) -> Vec<Aggregate> {
    let mut keys: Vec<(f64, f64, Task)> = Vec::new();
    for r in rows {
        let k = (r.noise, r.subsample, r.task);
        if !keys.contains(&k) {
            keys.push(k);
        }
    }
    keys.into_iter()
        .map(|(noise, subsample, task)| {
            let scores: Vec<Option<f64>> = rows
                .iter()
                .filter(|r| r.noise == noise && r.subsample == subsample && r.task == task)
                .map(|r| r.r2)
                .collect();
            let (accuracy, mean_r2, median_r2, invalid) = summarize(&scores, threshold);
            Aggregate {
                noise,
                subsample,
                task,
                count: scores.len(),
                invalid,
                accuracy,
                mean_r2,
                median_r2,
            }
        })
        .collect()
}

#[derive(Debug, Error)]
pub enum ResultsIoError {
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Writes one CSV row per cell. Invalid scores are written as `invalid`.
pub fn write_results_csv<W: Write>(rows: &[BenchmarkRow], out: W) -> Result<(), ResultsIoError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "entry_id",
        "dim",
        "chaotic",
        "noise",
        "subsample",
        "task",
        "r2",
        "accurate",
        "complexity",
        "inference_seconds",
        "prediction",
    ])?;
    for r in rows {
        w.write_record([
            r.entry_id.to_string(),
            r.dim.to_string(),
            r.chaotic.to_string(),
            format!("{:?}", r.noise),
            format!("{:?}", r.subsample),
            r.task.name().to_string(),
            r.r2.map_or_else(|| "invalid".to_string(), |v| format!("{v:?}")),
            r.accurate.to_string(),
            r.complexity.to_string(),
            format!("{:?}", r.inference_seconds),
            r.prediction.clone().unwrap_or_default(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_results_csv<R: Read>(input: R) -> Result<Vec<BenchmarkRow>, ResultsIoError> {
    let mut rd = csv::Reader::from_reader(input);
    let mut rows = Vec::new();
    for (i, rec) in rd.records().enumerate() {
        let rec = rec?;
        let bad = |what: &str| {
            ResultsIoError::Io(std::io::Error::new(
                std::io::ErrorKind::InvalidData,
                format!("row {}: bad {what}", i + 2),
            ))
        };
        let field = |k: usize| rec.get(k).unwrap_or("");
        let num = |k: usize, what: &str| field(k).parse::<f64>().map_err(|_| bad(what));
        let r2 = match field(6) {
            "invalid" => None,
            s => Some(s.parse::<f64>().map_err(|_| bad("r2"))?),
        };
        let prediction = Some(field(10).to_string()).filter(|s| !s.is_empty());
        rows.push(BenchmarkRow {
            entry_id: field(0).parse().map_err(|_| bad("entry_id"))?,
            dim: field(1).parse().map_err(|_| bad("dim"))?,
            chaotic: field(2).parse().map_err(|_| bad("chaotic"))?,
            noise: num(3, "noise")?,
            subsample: num(4, "subsample")?,
            task: field(5).parse().map_err(|_| bad("task"))?,
            r2,
            accurate: field(7).parse().map_err(|_| bad("accurate"))?,
            complexity: field(8).parse().map_err(|_| bad("complexity"))?,
            inference_seconds: num(9, "inference_seconds")?,
            prediction,
        });
    }
    Ok(rows)
}

/// A synthetic held-out system: the truth, what the predictor sees, and the
/// initial conditions for the two tasks.
#[derive(Debug, Clone)]
pub struct HeldOutCase {
    pub truth: OdeSystem,
    pub observed: Trajectory,
    pub ic: Vec<f64>,
    pub new_ic: Vec<f64>,
    pub t_span: (f64, f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeldOutScore {
    pub reconstruction: Option<f64>,
    pub generalization: Option<f64>,
    pub complexity: usize,
    pub inference_seconds: f64,
    pub prediction: Option<String>,
}

/// Builds cases from dataset records. The reconstruction initial condition
/// is the first observed state; the generalization one is drawn from
/// `N(0, ic_scale)` on stream `record.index` of `seed`, redrawn (up to 20
/// times) until the truth integrates over the span.
pub fn held_out_cases(
    records: &[crate::dataset::DatasetRecord],
    integration: &IntegrationConfig,
    seed: u64,
) -> Vec<HeldOutCase> {
    let span = (integration.t_start, integration.t_end);
    let opts = integration.tolerances();
    records
        .iter()
        .filter_map(|r| {
            let truth = r.system().ok()?;
            let observed = r.trajectory().ok()?;
            let ic = observed.state(0).to_vec();
            let mut rng = stream(seed, r.index);
            let new_ic = (0..20).find_map(|_| {
                let x0 = crate::integrator::sample_initial_condition(truth.dim(), integration.ic_scale, &mut rng);
                solve_at(&truth, &x0, &linspace(span.0, span.1, 16), &opts).ok().map(|_| x0)
            })?;
            Some(HeldOutCase {
                truth,
                observed,
                ic,
                new_ic,
                t_span: span,
            })
        })
        .collect()
}

/// Runs `predictor` on every case (in parallel; case `i` uses stream `i` of
/// `seed`) and scores both tasks on a dense grid.
pub fn evaluate_held_out(predictor: &dyn Predictor, cases: &[HeldOutCase], seed: u64, n_dense: usize) -> Vec<HeldOutScore> {
    let opts = SolverOptions::default();
    cases
        .par_iter()
        .enumerate()
        .map(|(i, c)| {
            let mut rng = stream(seed, i as u64);
            let start = Instant::now();
            let pred = predictor.predict(i as u32, &c.observed, &mut rng);
            let secs = start.elapsed().as_secs_f64();
            let score = |ic: &[f64], p: &OdeSystem| {
                score_against_truth(p, &c.truth, ic, c.t_span, n_dense, &opts).ok().flatten()
            };
            match pred {
                Some(p) => HeldOutScore {
                    reconstruction: score(&c.ic, &p),
                    generalization: score(&c.new_ic, &p),
                    complexity: p.complexity(),
                    inference_seconds: secs,
                    prediction: Some(p.to_infix()),
                },
                None => HeldOutScore {
                    reconstruction: None,
                    generalization: None,
                    complexity: 0,
                    inference_seconds: secs,
                    prediction: None,
                },
            }
        })
        .collect()
}
