//! Model-independent parts of inference: rescaling observations into the
//! training frame, mapping predictions back, choosing among candidates, and
//! refining constants.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::evaluation::fit_score;
use crate::expr::{Expr, OdeSystem};
use crate::integrator::SolverOptions;
use crate::trajectory::Trajectory;

/// Observed span after rescaling.
pub const SCALED_SPAN: (f64, f64) = (1.0, 10.0);

/// `t̃ = a t + b` and `x̃_i = x_i / anchor_i`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RescaleTransform {
    pub a: f64,
    pub b: f64,
    pub anchors: Vec<f64>,
}

impl RescaleTransform {
    pub fn identity(dim: usize) -> Self {
        Self {
            a: 1.0,
            b: 0.0,
            anchors: vec![1.0; dim],
        }
    }

    pub fn map_time(&self, t: f64) -> f64 {
        self.a * t + self.b
    }

    pub fn apply(&self, traj: &Trajectory) -> Trajectory {
        let dim = traj.dim();
        let times: Vec<f64> = traj.times().iter().map(|&t| self.map_time(t)).collect();
        let states: Vec<f64> = traj
            .states()
            .iter()
            .enumerate()
            .map(|(k, &x)| x / self.anchors[k % dim])
            .collect();
        Trajectory::from_parts_unchecked(times, states, dim)
    }

    /// Maps a system predicted in scaled coordinates back to original
    /// units: `f_i(x) = a · anchor_i · f̃_i(x_1/anchor_1, …, x_D/anchor_D)`.
    pub fn unscale_system(&self, sys: &OdeSystem) -> OdeSystem {
        unscale_system(sys, self)
    }
}

/// Rescales times onto `[1, 10]` and each dimension by its first observed
/// value. A zero anchor is replaced by the dimension's largest magnitude
/// (or 1 if the dimension is identically zero).
pub fn rescale(traj: &Trajectory) -> (Trajectory, RescaleTransform) {
    let (t1, tn) = (traj.t_start(), traj.t_end());
    let a = (SCALED_SPAN.1 - SCALED_SPAN.0) / (tn - t1);
    let b = SCALED_SPAN.0 - a * t1;
    let anchors = (0..traj.dim())
        .map(|j| {
            let x0 = traj.state(0)[j];
            if x0 != 0.0 {
                return x0;
            }
            let m = traj.rows().fold(0.0f64, |m, r| m.max(r[j].abs()));
            log::warn!("dimension {j} starts at zero; anchoring on max |x| = {m}");
            if m > 0.0 {
                m
            } else {
                1.0
            }
        })
        .collect();
    let tf = RescaleTransform { a, b, anchors };
    let mut scaled = tf.apply(traj);
    // Pin the endpoints exactly; the affine map can be off by an ulp.
    let n = scaled.len();
    let mut times = scaled.times().to_vec();
    times[0] = SCALED_SPAN.0;
    times[n - 1] = SCALED_SPAN.1;
    if times.windows(2).all(|w| w[1] > w[0]) {
        scaled = Trajectory::from_parts_unchecked(times, scaled.states().to_vec(), scaled.dim());
    }
    (scaled, tf)
}

pub fn unscale_system(sys: &OdeSystem, tf: &RescaleTransform) -> OdeSystem {
    assert_eq!(sys.dim(), tf.anchors.len(), "transform dimension mismatch");
    let substitute = |j: usize| Expr::mul(Expr::var(j), Expr::constant(1.0 / tf.anchors[j]));
    let components = sys
        .components()
        .iter()
        .enumerate()
        .map(|(i, f)| {
            Expr::mul(
                Expr::constant(tf.a * tf.anchors[i]),
                f.substitute_variables(&substitute),
            )
        })
        .collect();
    OdeSystem::new(components).expect("same variables as the input system")
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SelectError {
    #[error("no candidates")]
    Empty,
    #[error("none of the {0} candidates integrates over the observed span")]
    AllInvalid(usize),
}

/// Index and score of the candidate with the highest R² on `observed`.
/// Ties go to the earliest candidate.
pub fn select_best(
    candidates: &[OdeSystem],
    observed: &Trajectory,
    opts: &SolverOptions,
) -> Result<(usize, f64), SelectError> {
    if candidates.is_empty() {
        return Err(SelectError::Empty);
    }
    let scores: Vec<f64> = candidates
        .par_iter()
        .map(|c| fit_score(c, observed, opts))
        .collect();
    best_of(&scores).ok_or(SelectError::AllInvalid(candidates.len()))
}

/// Argmax over finite scores with ties broken by the lowest index.
pub fn best_of(scores: &[f64]) -> Option<(usize, f64)> {
    let mut best: Option<(usize, f64)> = None;
    for (i, &s) in scores.iter().enumerate() {
        if !s.is_finite() {
            continue;
        }
        if best.is_none_or(|(_, b)| s > b) {
            best = Some((i, s));
        }
    }
    best
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RefineConfig {
    pub max_iterations: usize,
    /// Relative finite-difference step for the gradient.
    pub fd_step: f64,
    pub gradient_tolerance: f64,
    pub rtol: f64,
    pub atol: f64,
    pub max_solver_steps: usize,
}

impl Default for RefineConfig {
    fn default() -> Self {
        Self {
            max_iterations: 50,
            fd_step: 1e-5,
            gradient_tolerance: 1e-9,
            rtol: 1e-8,
            atol: 1e-10,
            max_solver_steps: 100_000,
        }
    }
}

impl RefineConfig {
    pub fn solver(&self) -> SolverOptions {
        SolverOptions {
            rtol: self.rtol,
            atol: self.atol,
            wall_timeout: None,
            max_steps: self.max_solver_steps,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RefineOutcome {
    pub system: OdeSystem,
    /// Objective (negative R²) of the input system.
    pub initial_objective: f64,
    pub final_objective: f64,
    pub evaluations: usize,
    pub iterations: usize,
}

/// Minimizes `-R²` over the system's constants with BFGS, finite-difference
/// gradients and a backtracking Armijo line search. The returned system is
/// the best point evaluated, so the objective never gets worse.
pub fn refine_constants(sys: &OdeSystem, observed: &Trajectory, cfg: &RefineConfig) -> RefineOutcome {
    let opts = cfg.solver();
    let mut evaluations = 0usize;
    let mut objective = |p: &[f64]| -> f64 {
        evaluations += 1;
        -fit_score(&sys.with_constants(p), observed, &opts)
    };
    let p0 = sys.constants();
    let f0 = objective(&p0);
    let (p, f, iterations) = if p0.is_empty() || !f0.is_finite() {
        (p0, f0, 0)
    } else {
        bfgs(&mut objective, p0, f0, cfg)
    };
    RefineOutcome {
        system: sys.with_constants(&p),
        initial_objective: f0,
        final_objective: f,
        evaluations,
        iterations,
    }
}

/// Central-difference gradient. Coordinates whose perturbed objective is
/// non-finite fall back to a one-sided difference, or zero.
fn fd_gradient(f: &mut impl FnMut(&[f64]) -> f64, p: &[f64], fp: f64, rel: f64) -> Vec<f64> {
    let mut g = vec![0.0; p.len()];
    let mut q = p.to_vec();
    for i in 0..p.len() {
        let h = rel * p[i].abs().max(1e-3);
        q[i] = p[i] + h;
        let up = f(&q);
        q[i] = p[i] - h;
        let down = f(&q);
        q[i] = p[i];
        g[i] = match (up.is_finite(), down.is_finite()) {
            (true, true) => (up - down) / (2.0 * h),
            (true, false) => (up - fp) / h,
            (false, true) => (fp - down) / h,
            (false, false) => 0.0,
        };
    }
    g
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn bfgs(
    f: &mut impl FnMut(&[f64]) -> f64,
    mut p: Vec<f64>,
    mut fp: f64,
    cfg: &RefineConfig,
) -> (Vec<f64>, f64, usize) {
    let n = p.len();
    let mut g = fd_gradient(f, &p, fp, cfg.fd_step);
    // Inverse Hessian approximation, row-major. The first step is capped to
    // about 10% of the parameter scale.
    let gmax = g.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let pmax = p.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1.0);
    let h0 = if gmax > 0.0 { (0.1 * pmax / gmax).min(1.0) } else { 1.0 };
    let mut hinv = vec![0.0; n * n];
    for i in 0..n {
        hinv[i * n + i] = h0;
    }
    let mut first_update = true;
    let mut iterations = 0;
    for _ in 0..cfg.max_iterations {
        let gnorm = g.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if gnorm < cfg.gradient_tolerance {
            break;
        }
        iterations += 1;
        let mut d: Vec<f64> = (0..n).map(|i| -dot(&hinv[i * n..(i + 1) * n], &g)).collect();
        let mut slope = dot(&g, &d);
        if slope >= 0.0 {
            // Not a descent direction: reset to steepest descent.
            hinv.iter_mut().for_each(|v| *v = 0.0);
            for i in 0..n {
                hinv[i * n + i] = h0;
            }
            d = g.iter().map(|v| -h0 * v).collect();
            slope = dot(&g, &d);
        }
        let mut step = 1.0;
        let mut accepted = None;
        for _ in 0..40 {
            let q: Vec<f64> = p.iter().zip(&d).map(|(a, b)| a + step * b).collect();
            let fq = f(&q);
            if fq.is_finite() && fq <= fp + 1e-4 * step * slope {
                accepted = Some((q, fq));
                break;
            }
            step *= 0.5;
        }
        let Some((q, fq)) = accepted else { break };
        let gq = fd_gradient(f, &q, fq, cfg.fd_step);
        let s: Vec<f64> = q.iter().zip(&p).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = gq.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        let improved = fp - fq;
        p = q;
        fp = fq;
        g = gq;
        if sy > 1e-300 {
            if first_update {
                let scale = sy / dot(&y, &y);
                hinv.iter_mut().for_each(|v| *v = 0.0);
                for i in 0..n {
                    hinv[i * n + i] = scale;
                }
                first_update = false;
            }
            bfgs_update(&mut hinv, &s, &y, sy);
        }
        if improved <= 1e-15 * fp.abs().max(1e-12) {
            break;
        }
    }
    (p, fp, iterations)
}

/// `H ← (I − ρ s yᵀ) H (I − ρ y sᵀ) + ρ s sᵀ` with `ρ = 1 / (yᵀ s)`.
fn bfgs_update(h: &mut [f64], s: &[f64], y: &[f64], sy: f64) {
    let n = s.len();
    let rho = 1.0 / sy;
    let hy: Vec<f64> = (0..n).map(|i| dot(&h[i * n..(i + 1) * n], y)).collect();
    let yhy = dot(y, &hy);
    for i in 0..n {
        for j in 0..n {
            h[i * n + j] += -rho * (hy[i] * s[j] + s[i] * hy[j]) + (rho * rho * yhy + rho) * s[i] * s[j];
        }
    }
}
