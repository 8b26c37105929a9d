//! Finite-difference checks of the analytic backward pass.

use odeformer_core::rng::RandomSource;
use odeformer_core::tokenizer::{TokenId, Vocabulary};
use rand::Rng;

use crate::config::ModelConfig;
use crate::model::Model;
use crate::net::{lin_bwd, lin_fwd, EncoderInput, Net};
use crate::params::{Init, Layout, Lin};

pub const DEFAULT_STEP: f64 = 1e-4;
/// Gradients smaller than this are compared in absolute terms.
pub const REL_FLOOR: f64 = 1e-6;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// A random batch for checks: a short trajectory grid and a target sequence
/// padded with PAD.
pub fn random_example(cfg: &ModelConfig, n: usize, target_len: usize, rng: &mut RandomSource) -> (EncoderInput, Vec<TokenId>) {
    let vocab = Vocabulary::get();
    let dim = rng.random_range(1..=cfg.d_max);
    let grid: Vec<Vec<[TokenId; 3]>> = (0..n)
        .map(|_| {
            (0..=dim)
                .map(|_| {
                    let v: f64 = rng.random_range(-5.0..5.0);
                    vocab.float_tokens(odeformer_core::tokenizer::encode_float(v).expect("finite"))
                })
                .collect()
        })
        .collect();
    let input = EncoderInput::from_grid(&grid, cfg.d_max).expect("dimension within d_max");
    let body = target_len.saturating_sub(2).max(1);
    let mut target = vec![vocab.bos()];
    for _ in 0..body {
        target.push(rng.random_range(4..vocab.len() as u32));
    }
    target.push(vocab.eos());
    target.push(vocab.pad());
    (input, target)
}

fn batch_loss(net: &Net, batch: &[(EncoderInput, Vec<TokenId>)]) -> f64 {
    batch
        .iter()
        .map(|(x, y)| net.loss_and_grad(x, y, None, 1.0).expect("valid example").loss_sum)
        .sum()
}

/// Indices to probe in one tensor: a few random entries plus the entries
/// with the largest analytic gradient.
fn probe_indices(offset: usize, len: usize, grads: &[f64], per_tensor: usize, rng: &mut RandomSource) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..per_tensor.min(len)).map(|_| offset + rng.random_range(0..len)).collect();
    let mut by_mag: Vec<usize> = (offset..offset + len).collect();
    by_mag.sort_by(|&a, &b| grads[b].abs().total_cmp(&grads[a].abs()));
    idx.extend(by_mag.into_iter().take(per_tensor));
    idx.sort_unstable();
    idx.dedup();
    idx
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    /// Tensor holding the worst entry.
    pub worst_tensor: String,
    pub probes: usize,
}

/// Compares analytic gradients of the summed loss over a small random batch
/// against central differences with step `h`, probing every tensor.
pub fn gradient_check(cfg: &ModelConfig, h: f64, per_tensor: usize, rng: &mut RandomSource) -> GradCheckReport {
    let mut model = Model::new(cfg.clone()).expect("valid config");
    // Non-trivial norm parameters and biases, so their gradients are exercised.
    perturb_defaults(&model.layout.clone(), &mut model.params, rng);
    let batch: Vec<_> = (0..2).map(|_| random_example(cfg, 5, 7, rng)).collect();
    let mut grads = vec![0.0; model.params.len()];
    for (x, y) in &batch {
        model.net().loss_and_grad(x, y, Some(&mut grads), 1.0).expect("valid example");
    }
    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        worst_tensor: String::new(),
        probes: 0,
    };
    let layout = model.layout.clone();
    for t in &layout.tensors {
        for i in probe_indices(t.offset, t.numel(), &grads, per_tensor, rng) {
            let orig = model.params[i];
            model.params[i] = orig + h;
            let up = batch_loss(&model.net(), &batch);
            model.params[i] = orig - h;
            let down = batch_loss(&model.net(), &batch);
            model.params[i] = orig;
            let numeric = (up - down) / (2.0 * h);
            let err = relative_error(grads[i], numeric);
            report.probes += 1;
            if err > report.max_relative_error {
                report.max_relative_error = err;
                report.worst_tensor = t.name.clone();
            }
        }
    }
    report
}

fn perturb_defaults(layout: &Layout, params: &mut [f64], rng: &mut RandomSource) {
    for t in &layout.tensors {
        let s = &mut params[t.offset..t.offset + t.numel()];
        match t.init {
            Init::Zeros | Init::Ones => s.iter_mut().for_each(|v| *v += rng.random_range(-0.3..0.3)),
            _ => {}
        }
    }
}

/// Central-difference error of a single probe at step `h`. Used to check
/// that the error shrinks like `h^2`.
pub fn fd_error_at(cfg: &ModelConfig, h: f64, rng: &mut RandomSource) -> Vec<f64> {
    let mut model = Model::new(cfg.clone()).expect("valid config");
    perturb_defaults(&model.layout.clone(), &mut model.params, rng);
    let batch = vec![random_example(cfg, 5, 7, rng)];
    let mut grads = vec![0.0; model.params.len()];
    model
        .net()
        .loss_and_grad(&batch[0].0, &batch[0].1, Some(&mut grads), 1.0)
        .expect("valid example");
    let w = model.layout.emb1.w;
    let probes = probe_indices(w, model.layout.emb1.din * model.layout.emb1.dout, &grads, 4, rng);
    probes
        .iter()
        .map(|&i| {
            let orig = model.params[i];
            model.params[i] = orig + h;
            let up = batch_loss(&model.net(), &batch);
            model.params[i] = orig - h;
            let down = batch_loss(&model.net(), &batch);
            model.params[i] = orig;
            ((up - down) / (2.0 * h) - grads[i]).abs()
        })
        .collect()
}

/// Gradient check of a purely linear head `L = sum(c ⊙ (x W + b))`, whose
/// central differences are exact up to rounding.
pub fn linear_head_check(din: usize, dout: usize, rows: usize, rng: &mut RandomSource) -> f64 {
    let l = Lin {
        w: 0,
        b: din * dout,
        din,
        dout,
    };
    let total = din * dout + dout;
    let mut p: Vec<f64> = (0..total).map(|_| rng.random_range(-1.0..1.0)).collect();
    let x: Vec<f64> = (0..rows * din).map(|_| rng.random_range(-1.0..1.0)).collect();
    let c: Vec<f64> = (0..rows * dout).map(|_| rng.random_range(-1.0..1.0)).collect();
    let loss = |p: &[f64]| -> f64 { lin_fwd(p, l, &x, rows).iter().zip(&c).map(|(y, c)| y * c).sum() };
    let mut g = vec![0.0; total];
    lin_bwd(&p, &mut g, l, &x, &c, rows, false);
    let mut worst: f64 = 0.0;
    for i in 0..total {
        let orig = p[i];
        p[i] = orig + DEFAULT_STEP;
        let up = loss(&p);
        p[i] = orig - DEFAULT_STEP;
        let down = loss(&p);
        p[i] = orig;
        worst = worst.max(relative_error(g[i], (up - down) / (2.0 * DEFAULT_STEP)));
    }
    worst
}
