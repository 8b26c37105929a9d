//! Synthetic dataset factory: sample a system and an initial condition,
//! integrate, filter, corrupt, and serialize as JSON lines.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corruption::{CorruptionConfig, CorruptionRanges};
use crate::expr::{OdeSystem, ParseError};
use crate::generator::{sample_system, GeneratorConfig};
use crate::integrator::{integrate, passes_filters, sample_initial_condition, FilterDecision, IntegrationConfig};
use crate::rng::stream;
use crate::tokenizer::{encode_expression, encode_trajectory, Vocabulary};
use crate::trajectory::{Trajectory, TrajectoryError};

pub const FORMAT_VERSION: u32 = 1;
/// The acceptance-rate guard only fires after this many attempts.
pub const GUARD_ATTEMPTS: u64 = 100_000;
pub const MIN_ACCEPTANCE_RATE: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetRecord {
    /// Position in the dataset.
    pub index: u64,
    /// Attempt that produced the record; together with the base seed it
    /// reproduces the record.
    pub attempt: u64,
    pub seed: u64,
    pub prefix: Vec<String>,
    pub infix: String,
    pub dim: usize,
    pub n: usize,
    pub times: Vec<f64>,
    /// Row-major `n × dim`, after corruption.
    pub states: Vec<f64>,
    pub noise_sigma: f64,
    pub subsample_rho: f64,
    pub clean: bool,
}

#[derive(Debug, Error)]
pub enum RecordError {
    #[error("bad system: {0}")]
    System(#[from] ParseError),
    #[error("bad trajectory: {0}")]
    Trajectory(#[from] TrajectoryError),
    #[error("record declares dim {declared}, system has {actual}")]
    Dimension { declared: usize, actual: usize },
}

impl DatasetRecord {
    pub fn system(&self) -> Result<OdeSystem, RecordError> {
        let sys = OdeSystem::from_prefix_strings(&self.prefix)?;
        if sys.dim() != self.dim {
            return Err(RecordError::Dimension {
                declared: self.dim,
                actual: sys.dim(),
            });
        }
        Ok(sys)
    }

    pub fn trajectory(&self) -> Result<Trajectory, RecordError> {
        Ok(Trajectory::new(self.times.clone(), self.states.clone(), self.dim)?)
    }

    pub fn corruption(&self) -> CorruptionConfig {
        CorruptionConfig::new(self.noise_sigma, self.subsample_rho)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub attempts: u64,
    pub accepted: u64,
    pub integration_failures: u64,
    pub divergent: u64,
    pub converged: u64,
    pub other_failures: u64,
}

impl DatasetStats {
    pub fn acceptance_rate(&self) -> f64 {
        if self.attempts == 0 {
            0.0
        } else {
            self.accepted as f64 / self.attempts as f64
        }
    }
}

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("acceptance rate {rate:.2e} after {attempts} attempts is below {min:.1e}; check the filter settings")]
    Throughput { rate: f64, attempts: u64, min: f64 },
    #[error("invalid generator config: {0}")]
    Config(String),
    #[error("failed to build worker pool: {0}")]
    Pool(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetConfig {
    pub generator: GeneratorConfig,
    pub integration: IntegrationConfig,
    pub corruption: CorruptionRanges,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            generator: GeneratorConfig::default(),
            integration: IntegrationConfig::default(),
            corruption: CorruptionRanges::default(),
        }
    }
}

enum Attempt {
    Accepted(Box<DatasetRecord>),
    IntegrationFailure,
    Filtered(FilterDecision),
    Other,
}

fn run_attempt(cfg: &DatasetConfig, seed: u64, attempt: u64) -> Attempt {
    let mut rng = stream(seed, attempt);
    let sys = sample_system(&cfg.generator, &mut rng);
    let x0 = sample_initial_condition(sys.dim(), cfg.integration.ic_scale, &mut rng);
    let int_cfg = IntegrationConfig {
        grid_size: rng.random_range(cfg.integration.grid_min..=cfg.integration.grid_max),
        ..cfg.integration.clone()
    };
    let traj = match integrate(&sys, &x0, &int_cfg) {
        Ok(t) => t,
        Err(_) => return Attempt::IntegrationFailure,
    };
    let decision = passes_filters(&traj, &int_cfg, &mut rng);
    if !decision.is_keep() {
        return Attempt::Filtered(decision);
    }
    let corruption = cfg.corruption.sample(&mut rng);
    let Ok(observed) = corruption.apply(&traj, &mut rng) else {
        return Attempt::Other;
    };
    if encode_expression(&sys).is_err() || encode_trajectory(&observed).is_err() {
        return Attempt::Other;
    }
    Attempt::Accepted(Box::new(DatasetRecord {
        index: 0,
        attempt,
        seed,
        prefix: sys.to_prefix_strings(),
        infix: sys.to_infix(),
        dim: sys.dim(),
        n: observed.len(),
        times: observed.times().to_vec(),
        states: observed.states().to_vec(),
        noise_sigma: corruption.noise_sigma,
        subsample_rho: corruption.subsample_rho,
        clean: corruption.is_clean(),
    }))
}

/// Generates `count` records. Attempt `k` draws all its randomness from
/// stream `k` of `seed`, and records are emitted in attempt order, so the
/// output does not depend on `workers`.
pub fn generate_dataset(
    count: usize,
    cfg: &DatasetConfig,
    seed: u64,
    workers: usize,
) -> Result<(Vec<DatasetRecord>, DatasetStats), DatasetError> {
    cfg.generator
        .validate()
        .map_err(|e| DatasetError::Config(e.to_string()))?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| DatasetError::Pool(e.to_string()))?;
    let mut stats = DatasetStats::default();
    let mut records = Vec::with_capacity(count);
    let chunk = (workers.max(1) * 32) as u64;
    let mut next = 0u64;
    while records.len() < count {
        let batch: Vec<Attempt> = pool.install(|| {
            (next..next + chunk)
                .into_par_iter()
                .map(|k| run_attempt(cfg, seed, k))
                .collect()
        });
        for a in batch {
            if records.len() == count {
                break;
            }
            stats.attempts += 1;
            match a {
                Attempt::Accepted(mut r) => {
                    r.index = records.len() as u64;
                    records.push(*r);
                    stats.accepted += 1;
                }
                Attempt::IntegrationFailure => stats.integration_failures += 1,
                Attempt::Filtered(FilterDecision::Divergent) => stats.divergent += 1,
                Attempt::Filtered(_) => stats.converged += 1,
                Attempt::Other => stats.other_failures += 1,
            }
            if stats.attempts >= GUARD_ATTEMPTS && stats.acceptance_rate() < MIN_ACCEPTANCE_RATE {
                return Err(DatasetError::Throughput {
                    rate: stats.acceptance_rate(),
                    attempts: stats.attempts,
                    min: MIN_ACCEPTANCE_RATE,
                });
            }
        }
        next += chunk;
    }
    Ok((records, stats))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub seed: u64,
    pub workers: usize,
    pub count: usize,
    pub config: DatasetConfig,
    pub stats: DatasetStats,
    pub acceptance_rate: f64,
    pub vocabulary_sha256: String,
}

impl Manifest {
    pub fn new(cfg: &DatasetConfig, seed: u64, workers: usize, count: usize, stats: &DatasetStats) -> Self {
        Self {
            format_version: FORMAT_VERSION,
            seed,
            workers,
            count,
            config: cfg.clone(),
            stats: stats.clone(),
            acceptance_rate: stats.acceptance_rate(),
            vocabulary_sha256: Vocabulary::get().hash(),
        }
    }
}

#[derive(Debug, Error)]
pub enum IoError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("line {line}: {source}")]
    Malformed { line: usize, source: serde_json::Error },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// One JSON object per line. Floats use the shortest representation that
/// parses back to the same bits.
pub fn write_records<W: Write>(records: &[DatasetRecord], out: W) -> Result<(), IoError> {
    let mut w = BufWriter::new(out);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_records<R: std::io::Read>(input: R) -> Result<Vec<DatasetRecord>, IoError> {
    let mut out = Vec::new();
    for (i, line) in BufReader::new(input).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let r = serde_json::from_str(&line).map_err(|source| IoError::Malformed { line: i + 1, source })?;
        out.push(r);
    }
    Ok(out)
}

pub fn write_records_file(records: &[DatasetRecord], path: &Path) -> Result<(), IoError> {
    write_records(records, File::create(path)?)
}

pub fn read_records_file(path: &Path) -> Result<Vec<DatasetRecord>, IoError> {
    read_records(File::open(path)?)
}

pub fn write_manifest(manifest: &Manifest, path: &Path) -> Result<(), IoError> {
    let mut f = File::create(path)?;
    serde_json::to_writer_pretty(&mut f, manifest)?;
    f.write_all(b"\n")?;
    Ok(())
}
