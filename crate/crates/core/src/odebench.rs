//! The ODEBench corpus: 63 systems from one to four dimensions, each with
//! bound parameters and two initial conditions.
//!
//! The source lives in `data/odebench.txt` and is embedded at build time;
//! its SHA-256 is pinned so that silent edits fail loudly.

use rand::Rng;
use serde::Serialize;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::corruption::{CorruptionConfig, CorruptionError};
use crate::expr::{OdeSystem, ParseError};
use crate::infix;
use crate::integrator::{solve_at, IntegrationConfig, IntegrationFailure, SolverOptions};
use crate::trajectory::{linspace, Trajectory};

const SOURCE: &str = include_str!("../data/odebench.txt");
pub const CORPUS_SHA256: &str = "c69c617e2dc5cf9d1340dcf6cfddd664f65aa9f3a282579a06c4c4faa2c8922d";
pub const CORPUS_SIZE: usize = 63;

#[derive(Debug, Clone, PartialEq)]
pub struct BenchmarkEntry {
    pub id: u32,
    pub description: String,
    pub system: OdeSystem,
    /// Component formulas as written in the source, with `c<i>` placeholders.
    pub formulas: Vec<String>,
    pub params: Vec<f64>,
    pub initial_conditions: [Vec<f64>; 2],
    pub chaotic: bool,
}

impl BenchmarkEntry {
    pub fn dim(&self) -> usize {
        self.system.dim()
    }
}

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("corpus checksum mismatch: expected {expected}, found {found}")]
    Checksum { expected: String, found: String },
    #[error("line {line}: {msg}")]
    Format { line: usize, msg: String },
    #[error("entry {id}, component {component}: {source}")]
    Equation {
        id: u32,
        component: usize,
        source: ParseError,
    },
}

pub fn source_text() -> &'static str {
    SOURCE
}

pub fn source_sha256() -> String {
    hex::encode(Sha256::digest(SOURCE.as_bytes()))
}

/// Loads the embedded corpus after verifying its checksum.
pub fn load_corpus() -> Result<Vec<BenchmarkEntry>, CorpusError> {
    let found = source_sha256();
    if found != CORPUS_SHA256 {
        return Err(CorpusError::Checksum {
            expected: CORPUS_SHA256.into(),
            found,
        });
    }
    parse_corpus(SOURCE)
}

/// Parses corpus text in the embedded format (no checksum check).
pub fn parse_corpus(text: &str) -> Result<Vec<BenchmarkEntry>, CorpusError> {
    let mut entries = Vec::new();
    let mut block: Vec<(usize, &str, &str)> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.starts_with('#') {
            continue;
        }
        if line.is_empty() {
            if !block.is_empty() {
                entries.push(parse_block(&block)?);
                block.clear();
            }
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(CorpusError::Format {
                line: i + 1,
                msg: "expected `key = value`".into(),
            });
        };
        block.push((i + 1, k.trim(), v.trim()));
    }
    if !block.is_empty() {
        entries.push(parse_block(&block)?);
    }
    Ok(entries)
}

fn parse_block(block: &[(usize, &str, &str)]) -> Result<BenchmarkEntry, CorpusError> {
    let first_line = block[0].0;
    let get = |key: &str| -> Result<(usize, &str), CorpusError> {
        block
            .iter()
            .find(|(_, k, _)| *k == key)
            .map(|(l, _, v)| (*l, *v))
            .ok_or_else(|| CorpusError::Format {
                line: first_line,
                msg: format!("missing key `{key}`"),
            })
    };
    let fmt_err = |line: usize, msg: String| CorpusError::Format { line, msg };

    let (l, v) = get("id")?;
    let id: u32 = v.parse().map_err(|_| fmt_err(l, format!("bad id `{v}`")))?;
    let description = get("description")?.1.to_string();
    let (l, v) = get("dim")?;
    let dim: usize = v.parse().map_err(|_| fmt_err(l, format!("bad dim `{v}`")))?;
    let (l, v) = get("chaotic")?;
    let chaotic = match v {
        "true" => true,
        "false" => false,
        _ => return Err(fmt_err(l, format!("bad chaotic flag `{v}`"))),
    };
    let (l, v) = get("params")?;
    let params = parse_numbers(v).map_err(|m| fmt_err(l, m))?;

    let mut formulas = Vec::with_capacity(dim);
    let mut components = Vec::with_capacity(dim);
    for c in 0..dim {
        let text = get(&format!("f{c}"))?.1;
        let e = infix::parse(text, &params).map_err(|source| CorpusError::Equation {
            id,
            component: c,
            source,
        })?;
        formulas.push(text.to_string());
        components.push(e);
    }
    let system = OdeSystem::new(components).map_err(|e| fmt_err(first_line, e.to_string()))?;

    let mut ics: [Vec<f64>; 2] = Default::default();
    for (k, slot) in ["ic1", "ic2"].iter().zip(ics.iter_mut()) {
        let (l, v) = get(k)?;
        let ic = parse_numbers(v).map_err(|m| fmt_err(l, m))?;
        if ic.len() != dim {
            return Err(fmt_err(l, format!("{k} has {} values, dim is {dim}", ic.len())));
        }
        *slot = ic;
    }
    Ok(BenchmarkEntry {
        id,
        description,
        system,
        formulas,
        params,
        initial_conditions: ics,
        chaotic,
    })
}

/// Comma-separated reals; `p/q` ratios are evaluated at full precision.
fn parse_numbers(s: &str) -> Result<Vec<f64>, String> {
    if s.trim().is_empty() {
        return Ok(Vec::new());
    }
    s.split(',')
        .map(|tok| {
            let tok = tok.trim();
            let parse = |t: &str| t.trim().parse::<f64>().map_err(|_| format!("bad number `{tok}`"));
            match tok.split_once('/') {
                Some((p, q)) => Ok(parse(p)? / parse(q)?),
                None => parse(tok),
            }
        })
        .collect()
}

/// Solver settings for ground-truth benchmark trajectories: the dataset
/// tolerances without the wall-clock budget, so results are deterministic.
pub fn reference_solver(cfg: &IntegrationConfig) -> SolverOptions {
    SolverOptions {
        wall_timeout: None,
        ..cfg.tolerances()
    }
}

/// Clean and corrupted trajectories from both initial conditions.
#[derive(Debug, Clone)]
pub struct EntryTrajectories {
    pub clean: [Trajectory; 2],
    pub observed: [Trajectory; 2],
}

impl EntryTrajectories {
    /// The IC-1 observation, which feeds reconstruction.
    pub fn reconstruction(&self) -> &Trajectory {
        &self.observed[0]
    }

    /// The IC-2 observation, which feeds generalization.
    pub fn generalization(&self) -> &Trajectory {
        &self.observed[1]
    }
}

#[derive(Debug, Error)]
pub enum EntryError {
    #[error("entry {id}, initial condition {ic}: {source}")]
    Integration {
        id: u32,
        ic: usize,
        source: IntegrationFailure,
    },
    #[error("entry {id}: {source}")]
    Corruption { id: u32, source: CorruptionError },
}

/// Integrates both initial conditions on `linspace(t_start, t_end,
/// grid_size)` and applies `corruption` to each.
pub fn generate_entry_trajectories(
    entry: &BenchmarkEntry,
    cfg: &IntegrationConfig,
    corruption: &CorruptionConfig,
    rng: &mut impl Rng,
) -> Result<EntryTrajectories, EntryError> {
    let times = linspace(cfg.t_start, cfg.t_end, cfg.grid_size);
    let opts = reference_solver(cfg);
    let mut clean = Vec::with_capacity(2);
    let mut observed = Vec::with_capacity(2);
    for (ic, x0) in entry.initial_conditions.iter().enumerate() {
        let traj = solve_at(&entry.system, x0, &times, &opts).map_err(|source| {
            EntryError::Integration {
                id: entry.id,
                ic: ic + 1,
                source,
            }
        })?;
        let obs = corruption
            .apply(&traj, rng)
            .map_err(|source| EntryError::Corruption { id: entry.id, source })?;
        clean.push(traj);
        observed.push(obs);
    }
    let [c0, c1]: [Trajectory; 2] = clean.try_into().expect("two ICs");
    let [o0, o1]: [Trajectory; 2] = observed.try_into().expect("two ICs");
    Ok(EntryTrajectories {
        clean: [c0, c1],
        observed: [o0, o1],
    })
}

/// Pointer record for the older two-dimensional "Strogatz" collection.
/// No data is shipped for it.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LegacyCorpusNote {
    pub name: &'static str,
    pub systems: usize,
    pub dimension: usize,
    pub deprecated: bool,
    pub trajectories_shipped: bool,
    pub reason: &'static str,
}

pub fn load_strogatz_note() -> LegacyCorpusNote {
    LegacyCorpusNote {
        name: "strogatz",
        systems: 7,
        dimension: 2,
        deprecated: true,
        trajectories_shipped: false,
        reason: "only seven two-dimensional systems, and the published \
                 trajectories are integrated at low precision; use ODEBench",
    }
}
