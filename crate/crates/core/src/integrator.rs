//! Dormand–Prince 5(4) integration onto a fixed output grid, plus the
//! divergence and convergence filters applied to generated trajectories.
//!
//! The solver steps adaptively with the embedded 4th-order error estimate
//! and reports the solution at the requested times through the method's
//! continuous extension, so output times never influence step selection.

use std::time::{Duration, Instant};

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::expr::OdeSystem;
use crate::trajectory::{linspace, Trajectory};

// Butcher tableau (the nodes c_i are not needed for autonomous systems).
const A21: f64 = 1.0 / 5.0;
const A31: f64 = 3.0 / 40.0;
const A32: f64 = 9.0 / 40.0;
const A41: f64 = 44.0 / 45.0;
const A42: f64 = -56.0 / 15.0;
const A43: f64 = 32.0 / 9.0;
const A51: f64 = 19372.0 / 6561.0;
const A52: f64 = -25360.0 / 2187.0;
const A53: f64 = 64448.0 / 6561.0;
const A54: f64 = -212.0 / 729.0;
const A61: f64 = 9017.0 / 3168.0;
const A62: f64 = -355.0 / 33.0;
const A63: f64 = 46732.0 / 5247.0;
const A64: f64 = 49.0 / 176.0;
const A65: f64 = -5103.0 / 18656.0;
const A71: f64 = 35.0 / 384.0;
const A73: f64 = 500.0 / 1113.0;
const A74: f64 = 125.0 / 192.0;
const A75: f64 = -2187.0 / 6784.0;
const A76: f64 = 11.0 / 84.0;
// 5th-order minus embedded 4th-order weights.
const E1: f64 = 71.0 / 57600.0;
const E3: f64 = -71.0 / 16695.0;
const E4: f64 = 71.0 / 1920.0;
const E5: f64 = -17253.0 / 339200.0;
const E6: f64 = 22.0 / 525.0;
const E7: f64 = -1.0 / 40.0;
// Continuous extension.
const D1: f64 = -12715105075.0 / 11282082432.0;
const D3: f64 = 87487479700.0 / 32700410799.0;
const D4: f64 = -10690763975.0 / 1880347072.0;
const D5: f64 = 701980252875.0 / 199316789632.0;
const D6: f64 = -1453857185.0 / 822651844.0;
const D7: f64 = 69997945.0 / 29380423.0;

const SAFETY: f64 = 0.9;
const MIN_FACTOR: f64 = 0.2;
const MAX_FACTOR: f64 = 10.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IntegrationConfig {
    pub rtol: f64,
    pub atol: f64,
    pub t_start: f64,
    pub t_end: f64,
    /// Output grid size when integrating a single trajectory. Dataset
    /// generation samples it uniformly from `grid_min..=grid_max` instead.
    pub grid_size: usize,
    pub grid_min: usize,
    pub grid_max: usize,
    #[serde(with = "duration_secs")]
    pub wall_timeout: Duration,
    pub max_steps: usize,
    pub divergence_threshold: f64,
    pub oscillation_threshold: f64,
    pub converged_keep_probability: f64,
    pub ic_scale: f64,
}

impl Default for IntegrationConfig {
    fn default() -> Self {
        Self {
            rtol: 1e-3,
            atol: 1e-6,
            t_start: 1.0,
            t_end: 10.0,
            grid_size: 100,
            grid_min: 50,
            grid_max: 200,
            wall_timeout: Duration::from_secs(1),
            max_steps: 1_000_000,
            divergence_threshold: 1e2,
            oscillation_threshold: 1e-3,
            converged_keep_probability: 0.1,
            ic_scale: 1.0,
        }
    }
}

impl IntegrationConfig {
    pub fn tolerances(&self) -> SolverOptions {
        SolverOptions {
            rtol: self.rtol,
            atol: self.atol,
            wall_timeout: Some(self.wall_timeout),
            max_steps: self.max_steps,
        }
    }
}

mod duration_secs {
    use serde::{Deserialize, Deserializer, Serializer};
    use std::time::Duration;

    pub fn serialize<S: Serializer>(d: &Duration, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_f64(d.as_secs_f64())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Duration, D::Error> {
        let secs = f64::deserialize(d)?;
        Ok(Duration::from_secs_f64(secs.max(0.0)))
    }
}

/// Solver tolerances and budgets.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverOptions {
    pub rtol: f64,
    pub atol: f64,
    pub wall_timeout: Option<Duration>,
    pub max_steps: usize,
}

impl Default for SolverOptions {
    fn default() -> Self {
        IntegrationConfig::default().tolerances()
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum IntegrationFailure {
    #[error("state became non-finite near t = {t}")]
    NonFinite { t: f64 },
    #[error("step size underflow at t = {t}")]
    StepUnderflow { t: f64 },
    #[error("wall-clock timeout after {0:?}")]
    Timeout(Duration),
    #[error("step budget of {0} exhausted")]
    MaxSteps(usize),
    #[error("invalid input: {0}")]
    InvalidInput(String),
}

/// Integrates `sys` from `x0` at `t_start` and reports the solution on
/// `linspace(t_start, t_end, grid_size)`.
pub fn integrate(
    sys: &OdeSystem,
    x0: &[f64],
    cfg: &IntegrationConfig,
) -> Result<Trajectory, IntegrationFailure> {
    let times = linspace(cfg.t_start, cfg.t_end, cfg.grid_size);
    solve_at(sys, x0, &times, &cfg.tolerances())
}

/// Integrates from `times[0]` (where the state is `x0`) and reports the
/// solution at every entry of `times`, which must be strictly increasing.
pub fn solve_at(
    sys: &OdeSystem,
    x0: &[f64],
    times: &[f64],
    opts: &SolverOptions,
) -> Result<Trajectory, IntegrationFailure> {
    if x0.len() != sys.dim() {
        return Err(IntegrationFailure::InvalidInput(format!(
            "initial condition has length {}, system dimension is {}",
            x0.len(),
            sys.dim()
        )));
    }
    solve_with(|x, out| sys.eval_into(x, out), x0, times, opts)
}

/// Generic form of [`solve_at`] for any autonomous right-hand side.
pub fn solve_with<F>(
    mut rhs: F,
    x0: &[f64],
    times: &[f64],
    opts: &SolverOptions,
) -> Result<Trajectory, IntegrationFailure>
where
    F: FnMut(&[f64], &mut [f64]),
{
    let dim = x0.len();
    if dim == 0 || times.len() < 2 {
        return Err(IntegrationFailure::InvalidInput(
            "need a non-empty state and at least two output times".into(),
        ));
    }
    if x0.iter().any(|v| !v.is_finite()) {
        return Err(IntegrationFailure::InvalidInput("non-finite initial condition".into()));
    }
    if times.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(IntegrationFailure::InvalidInput("times must increase".into()));
    }

    let t0 = times[0];
    let t_end = *times.last().unwrap();
    let span = t_end - t0;
    let min_step = 1e-12 * span;
    let started = Instant::now();

    let mut out = Vec::with_capacity(times.len() * dim);
    out.extend_from_slice(x0);
    let mut next_out = 1;

    let mut y = x0.to_vec();
    let mut k1 = vec![0.0; dim];
    rhs(&y, &mut k1);
    if k1.iter().any(|v| !v.is_finite()) {
        return Err(IntegrationFailure::NonFinite { t: t0 });
    }
    let mut k2 = vec![0.0; dim];
    let mut k3 = vec![0.0; dim];
    let mut k4 = vec![0.0; dim];
    let mut k5 = vec![0.0; dim];
    let mut k6 = vec![0.0; dim];
    let mut k7 = vec![0.0; dim];
    let mut tmp = vec![0.0; dim];
    let mut y_new = vec![0.0; dim];
    let mut cont = vec![[0.0f64; 5]; dim];

    let mut h = initial_step(&mut rhs, &y, &k1, opts, span);
    let mut t = t0;
    let mut steps = 0usize;
    let mut last_reject_non_finite = false;
    let mut rejected = false;

    while next_out < times.len() {
        steps += 1;
        if steps > opts.max_steps {
            return Err(IntegrationFailure::MaxSteps(opts.max_steps));
        }
        if steps % 64 == 0 {
            if let Some(limit) = opts.wall_timeout {
                if started.elapsed() > limit {
                    return Err(IntegrationFailure::Timeout(limit));
                }
            }
        }

        let remaining = t_end - t;
        let last_step = h >= remaining;
        if last_step {
            h = remaining;
        }
        if h < min_step {
            return Err(if last_reject_non_finite {
                IntegrationFailure::NonFinite { t }
            } else {
                IntegrationFailure::StepUnderflow { t }
            });
        }

        for i in 0..dim {
            tmp[i] = y[i] + h * A21 * k1[i];
        }
        rhs(&tmp, &mut k2);
        for i in 0..dim {
            tmp[i] = y[i] + h * (A31 * k1[i] + A32 * k2[i]);
        }
        rhs(&tmp, &mut k3);
        for i in 0..dim {
            tmp[i] = y[i] + h * (A41 * k1[i] + A42 * k2[i] + A43 * k3[i]);
        }
        rhs(&tmp, &mut k4);
        for i in 0..dim {
            tmp[i] = y[i] + h * (A51 * k1[i] + A52 * k2[i] + A53 * k3[i] + A54 * k4[i]);
        }
        rhs(&tmp, &mut k5);
        for i in 0..dim {
            tmp[i] = y[i]
                + h * (A61 * k1[i] + A62 * k2[i] + A63 * k3[i] + A64 * k4[i] + A65 * k5[i]);
        }
        rhs(&tmp, &mut k6);
        for i in 0..dim {
            y_new[i] = y[i]
                + h * (A71 * k1[i] + A73 * k3[i] + A74 * k4[i] + A75 * k5[i] + A76 * k6[i]);
        }
        rhs(&y_new, &mut k7);

        let mut err_sq = 0.0;
        let mut finite = true;
        for i in 0..dim {
            let e = h
                * (E1 * k1[i] + E3 * k3[i] + E4 * k4[i] + E5 * k5[i] + E6 * k6[i] + E7 * k7[i]);
            let sc = opts.atol + opts.rtol * y[i].abs().max(y_new[i].abs());
            let r = e / sc;
            err_sq += r * r;
            finite &= y_new[i].is_finite() && k7[i].is_finite();
        }
        let err = (err_sq / dim as f64).sqrt();

        if !finite || !err.is_finite() {
            last_reject_non_finite = true;
            rejected = true;
            h *= MIN_FACTOR;
            continue;
        }
        if err > 1.0 {
            last_reject_non_finite = false;
            rejected = true;
            h *= (SAFETY * err.powf(-0.2)).max(MIN_FACTOR);
            continue;
        }

        let t_new = if last_step { t_end } else { t + h };
        // Continuous extension coefficients for this step.
        for i in 0..dim {
            let ydiff = y_new[i] - y[i];
            let bspl = h * k1[i] - ydiff;
            cont[i] = [
                y[i],
                ydiff,
                bspl,
                ydiff - h * k7[i] - bspl,
                h * (D1 * k1[i] + D3 * k3[i] + D4 * k4[i] + D5 * k5[i] + D6 * k6[i] + D7 * k7[i]),
            ];
        }
        while next_out < times.len() && times[next_out] <= t_new {
            let tau = times[next_out];
            if tau == t_new {
                out.extend_from_slice(&y_new);
            } else {
                let s = (tau - t) / h;
                let s1 = 1.0 - s;
                for c in &cont {
                    out.push(c[0] + s * (c[1] + s1 * (c[2] + s * (c[3] + s1 * c[4]))));
                }
            }
            next_out += 1;
        }

        let factor = if err == 0.0 {
            MAX_FACTOR
        } else {
            (SAFETY * err.powf(-0.2)).clamp(MIN_FACTOR, MAX_FACTOR)
        };
        // No growth right after a rejection.
        let factor = if rejected { factor.min(1.0) } else { factor };
        last_reject_non_finite = false;
        rejected = false;
        t = t_new;
        std::mem::swap(&mut y, &mut y_new);
        std::mem::swap(&mut k1, &mut k7);
        h *= factor;
    }

    Ok(Trajectory::from_parts_unchecked(times.to_vec(), out, dim))
}

fn rms_scaled(v: &[f64], scale: &[f64]) -> f64 {
    let s: f64 = v.iter().zip(scale).map(|(a, s)| (a / s) * (a / s)).sum();
    (s / v.len() as f64).sqrt()
}

/// Starting step size heuristic of Hairer, Nørsett & Wanner.
fn initial_step<F>(rhs: &mut F, y0: &[f64], f0: &[f64], opts: &SolverOptions, span: f64) -> f64
where
    F: FnMut(&[f64], &mut [f64]),
{
    let scale: Vec<f64> = y0.iter().map(|v| opts.atol + opts.rtol * v.abs()).collect();
    let d0 = rms_scaled(y0, &scale);
    let d1 = rms_scaled(f0, &scale);
    let h0 = if d0 < 1e-5 || d1 < 1e-5 { 1e-6 } else { 0.01 * d0 / d1 };
    let h0 = h0.min(span);
    let y1: Vec<f64> = y0.iter().zip(f0).map(|(y, f)| y + h0 * f).collect();
    let mut f1 = vec![0.0; y0.len()];
    rhs(&y1, &mut f1);
    let diff: Vec<f64> = f1.iter().zip(f0).map(|(a, b)| a - b).collect();
    let d2 = rms_scaled(&diff, &scale) / h0;
    let h1 = if !d2.is_finite() {
        h0 * 1e-3
    } else if d1.max(d2) <= 1e-15 {
        (h0 * 1e-3).max(1e-6)
    } else {
        (0.01 / d1.max(d2)).powf(0.2)
    };
    (100.0 * h0).min(h1).min(span)
}

/// Classic fixed-step Dormand–Prince propagation (5th-order solution),
/// used to measure the convergence order.
pub fn integrate_fixed_step(sys: &OdeSystem, x0: &[f64], t0: f64, t1: f64, steps: usize) -> Vec<f64> {
    let dim = x0.len();
    let h = (t1 - t0) / steps as f64;
    let mut y = x0.to_vec();
    let mut k = vec![vec![0.0; dim]; 6];
    let mut tmp = vec![0.0; dim];
    for _ in 0..steps {
        sys.eval_into(&y, &mut k[0]);
        for i in 0..dim {
            tmp[i] = y[i] + h * A21 * k[0][i];
        }
        sys.eval_into(&tmp, &mut k[1]);
        for i in 0..dim {
            tmp[i] = y[i] + h * (A31 * k[0][i] + A32 * k[1][i]);
        }
        sys.eval_into(&tmp, &mut k[2]);
        for i in 0..dim {
            tmp[i] = y[i] + h * (A41 * k[0][i] + A42 * k[1][i] + A43 * k[2][i]);
        }
        sys.eval_into(&tmp, &mut k[3]);
        for i in 0..dim {
            tmp[i] = y[i] + h * (A51 * k[0][i] + A52 * k[1][i] + A53 * k[2][i] + A54 * k[3][i]);
        }
        sys.eval_into(&tmp, &mut k[4]);
        for i in 0..dim {
            tmp[i] = y[i]
                + h * (A61 * k[0][i]
                    + A62 * k[1][i]
                    + A63 * k[2][i]
                    + A64 * k[3][i]
                    + A65 * k[4][i]);
        }
        sys.eval_into(&tmp, &mut k[5]);
        for i in 0..dim {
            y[i] += h
                * (A71 * k[0][i] + A73 * k[2][i] + A74 * k[3][i] + A75 * k[4][i] + A76 * k[5][i]);
        }
    }
    y
}

/// `D` i.i.d. normal draws with variance `gamma`.
pub fn sample_initial_condition(dim: usize, gamma: f64, rng: &mut impl Rng) -> Vec<f64> {
    let sd = gamma.sqrt();
    (0..dim)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            sd * z
        })
        .collect()
}

/// Max minus min of each dimension over the trailing `window_fraction` of
/// the grid points.
pub fn oscillation(traj: &Trajectory, window_fraction: f64) -> Vec<f64> {
    assert!(window_fraction > 0.0 && window_fraction <= 1.0);
    let n = traj.len();
    let start = (((1.0 - window_fraction) * (n - 1) as f64) + 1e-9).floor() as usize;
    let start = start.min(n - 1);
    (0..traj.dim())
        .map(|j| {
            let (lo, hi) = (start..n).fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), i| {
                let v = traj.state(i)[j];
                (lo.min(v), hi.max(v))
            });
            hi - lo
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FilterDecision {
    Keep,
    /// Some state exceeded the divergence threshold.
    Divergent,
    /// Every dimension settled over the last quarter and the example lost the
    /// keep lottery.
    Converged,
}

impl FilterDecision {
    pub fn is_keep(self) -> bool {
        self == FilterDecision::Keep
    }
}

pub fn passes_filters(
    traj: &Trajectory,
    cfg: &IntegrationConfig,
    rng: &mut impl Rng,
) -> FilterDecision {
    if traj.max_abs() > cfg.divergence_threshold {
        return FilterDecision::Divergent;
    }
    let settled = oscillation(traj, 0.25)
        .iter()
        .all(|&o| o < cfg.oscillation_threshold);
    if settled && rng.random::<f64>() >= cfg.converged_keep_probability {
        return FilterDecision::Converged;
    }
    FilterDecision::Keep
}
