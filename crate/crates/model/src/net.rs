//! Forward and backward passes of the encoder-decoder.

use odeformer_core::tokenizer::{encode_trajectory, TokenId, Vocabulary};
use odeformer_core::Trajectory;
use thiserror::Error;

use crate::config::{ConfigError, ModelConfig};
use crate::ops::{
    add_in_place, gelu, gelu_grad, gemm, gemm_strided, layer_norm, layer_norm_backward, log_softmax_in_place, silu,
    silu_grad, softmax_prefix,
};
use crate::params::{AttnP, EncBlockP, Layout, Lin, Norm};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("trajectory has dimension {got}, model accepts at most {max}")]
    Dimension { got: usize, max: usize },
    #[error("empty trajectory")]
    EmptyInput,
    #[error("target of {got} tokens exceeds the limit of {max}")]
    TargetTooLong { got: usize, max: usize },
    #[error("token id {0} is outside the vocabulary")]
    TokenRange(TokenId),
    #[error("parameter vector has {got} entries, layout needs {want}")]
    ParamCount { got: usize, want: usize },
    #[error("tokenization failed: {0}")]
    Tokenize(#[from] odeformer_core::tokenizer::TokenizeError),
}

/// Tokenized observations: `n` rows of `3 (d_max + 1)` token ids. Slots past
/// the trajectory's dimension hold PAD.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncoderInput {
    pub tokens: Vec<TokenId>,
    pub n: usize,
    pub dim: usize,
}

impl EncoderInput {
    pub fn from_grid(grid: &[Vec<[TokenId; 3]>], d_max: usize) -> Result<Self, ModelError> {
        if grid.is_empty() {
            return Err(ModelError::EmptyInput);
        }
        let dim = grid[0].len().saturating_sub(1);
        if dim > d_max {
            return Err(ModelError::Dimension { got: dim, max: d_max });
        }
        let s = 3 * (d_max + 1);
        let pad = Vocabulary::get().pad();
        let mut tokens = vec![pad; grid.len() * s];
        for (i, point) in grid.iter().enumerate() {
            for (j, trip) in point.iter().enumerate() {
                tokens[i * s + 3 * j..i * s + 3 * j + 3].copy_from_slice(trip);
            }
        }
        Ok(Self {
            tokens,
            n: grid.len(),
            dim,
        })
    }

    pub fn from_trajectory(traj: &Trajectory, d_max: usize) -> Result<Self, ModelError> {
        if traj.dim() > d_max {
            return Err(ModelError::Dimension {
                got: traj.dim(),
                max: d_max,
            });
        }
        Self::from_grid(&encode_trajectory(traj)?, d_max)
    }
}

// ---------------------------------------------------------------------------
// Layer primitives

pub(crate) fn lin_fwd(p: &[f64], l: Lin, x: &[f64], rows: usize) -> Vec<f64> {
    let mut y = vec![0.0; rows * l.dout];
    let bias = &p[l.b..l.b + l.dout];
    for r in 0..rows {
        y[r * l.dout..(r + 1) * l.dout].copy_from_slice(bias);
    }
    gemm(rows, l.din, l.dout, 1.0, x, false, &p[l.w..l.w + l.din * l.dout], false, 1.0, &mut y);
    y
}

pub(crate) fn lin_bwd(p: &[f64], g: &mut [f64], l: Lin, x: &[f64], dy: &[f64], rows: usize, want_dx: bool) -> Vec<f64> {
    gemm(l.din, rows, l.dout, 1.0, x, true, dy, false, 1.0, &mut g[l.w..l.w + l.din * l.dout]);
    let gb = &mut g[l.b..l.b + l.dout];
    for r in 0..rows {
        add_in_place(gb, &dy[r * l.dout..(r + 1) * l.dout]);
    }
    if !want_dx {
        return Vec::new();
    }
    let mut dx = vec![0.0; rows * l.din];
    gemm(rows, l.dout, l.din, 1.0, dy, false, &p[l.w..l.w + l.din * l.dout], true, 0.0, &mut dx);
    dx
}

struct NormTape {
    xhat: Vec<f64>,
    inv: Vec<f64>,
}

pub(crate) fn norm_apply(p: &[f64], n: Norm, x: &[f64]) -> Vec<f64> {
    layer_norm(x, n.d, &p[n.g..n.g + n.d], &p[n.b..n.b + n.d]).0
}

fn norm_fwd(p: &[f64], n: Norm, x: &[f64]) -> (Vec<f64>, NormTape) {
    let (y, xhat, inv) = layer_norm(x, n.d, &p[n.g..n.g + n.d], &p[n.b..n.b + n.d]);
    (y, NormTape { xhat, inv })
}

fn norm_bwd(p: &[f64], g: &mut [f64], n: Norm, t: &NormTape, dy: &[f64]) -> Vec<f64> {
    let (gg, gb) = g[n.g..n.b + n.d].split_at_mut(n.d);
    layer_norm_backward(dy, &t.xhat, &t.inv, n.d, &p[n.g..n.g + n.d], gg, gb)
}

struct AttnTape {
    xq: Vec<f64>,
    /// `None` for self-attention.
    xkv: Option<Vec<f64>>,
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    /// `heads × m × n` attention weights.
    probs: Vec<f64>,
    o: Vec<f64>,
    m: usize,
    n: usize,
}

/// Scores for head `h`: `S = Q_h K_h^T * scale`, written to `s` (`m × n`).
#[allow(clippy::too_many_arguments)]
pub(crate) fn head_scores(q: &[f64], k: &[f64], m: usize, n: usize, d: usize, dh: usize, h: usize, s: &mut [f64]) {
    let scale = 1.0 / (dh as f64).sqrt();
    let off = h * dh;
    gemm_strided(m, dh, n, scale, &q[off..], d as isize, 1, &k[off..], 1, d as isize, 0.0, s, n as isize, 1);
}

/// `O_h = P V_h`, written into the head's columns of `o` (`m × d`).
#[allow(clippy::too_many_arguments)]
pub(crate) fn head_mix(p: &[f64], v: &[f64], m: usize, n: usize, d: usize, dh: usize, h: usize, o: &mut [f64]) {
    let off = h * dh;
    gemm_strided(m, n, dh, 1.0, p, n as isize, 1, &v[off..], d as isize, 1, 0.0, &mut o[off..], d as isize, 1);
}

#[allow(clippy::too_many_arguments)]
fn attn_fwd(
    p: &[f64],
    a: AttnP,
    xq: &[f64],
    m: usize,
    xkv: Option<&[f64]>,
    n: usize,
    heads: usize,
    causal: bool,
) -> (Vec<f64>, AttnTape) {
    let d = a.q.dout;
    let dh = d / heads;
    let src = xkv.unwrap_or(xq);
    let q = lin_fwd(p, a.q, xq, m);
    let k = lin_fwd(p, a.k, src, n);
    let v = lin_fwd(p, a.v, src, n);
    let mut probs = vec![0.0; heads * m * n];
    let mut o = vec![0.0; m * d];
    for h in 0..heads {
        let ph = &mut probs[h * m * n..(h + 1) * m * n];
        head_scores(&q, &k, m, n, d, dh, h, ph);
        for i in 0..m {
            let len = if causal { i + 1 } else { n };
            softmax_prefix(&mut ph[i * n..(i + 1) * n], len);
        }
        head_mix(ph, &v, m, n, d, dh, h, &mut o);
    }
    let out = lin_fwd(p, a.o, &o, m);
    let tape = AttnTape {
        xq: xq.to_vec(),
        xkv: xkv.map(|x| x.to_vec()),
        q,
        k,
        v,
        probs,
        o,
        m,
        n,
    };
    (out, tape)
}

/// Returns `(dxq, dxkv)`; for self-attention the two are already summed into
/// `dxq` and `dxkv` is empty.
fn attn_bwd(p: &[f64], g: &mut [f64], a: AttnP, t: &AttnTape, heads: usize, dout: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let (m, n) = (t.m, t.n);
    let d = a.q.dout;
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let d_o = lin_bwd(p, g, a.o, &t.o, dout, m, true);
    let mut dq = vec![0.0; m * d];
    let mut dk = vec![0.0; n * d];
    let mut dv = vec![0.0; n * d];
    let mut dp = vec![0.0; m * n];
    for h in 0..heads {
        let off = h * dh;
        let ph = &t.probs[h * m * n..(h + 1) * m * n];
        // dP = dO_h V_h^T
        gemm_strided(m, dh, n, 1.0, &d_o[off..], d as isize, 1, &t.v[off..], 1, d as isize, 0.0, &mut dp, n as isize, 1);
        // dV_h = P^T dO_h
        gemm_strided(n, m, dh, 1.0, ph, 1, n as isize, &d_o[off..], d as isize, 1, 0.0, &mut dv[off..], d as isize, 1);
        for i in 0..m {
            let pr = &ph[i * n..(i + 1) * n];
            let dr = &mut dp[i * n..(i + 1) * n];
            let dot: f64 = pr.iter().zip(dr.iter()).map(|(a, b)| a * b).sum();
            for (x, &pv) in dr.iter_mut().zip(pr) {
                *x = pv * (*x - dot) * scale;
            }
        }
        // dQ_h = dS K_h, dK_h = dS^T Q_h
        gemm_strided(m, n, dh, 1.0, &dp, n as isize, 1, &t.k[off..], d as isize, 1, 0.0, &mut dq[off..], d as isize, 1);
        gemm_strided(n, m, dh, 1.0, &dp, 1, n as isize, &t.q[off..], d as isize, 1, 0.0, &mut dk[off..], d as isize, 1);
    }
    let mut dxq = lin_bwd(p, g, a.q, &t.xq, &dq, m, true);
    let src = t.xkv.as_deref().unwrap_or(&t.xq);
    let mut dxkv = lin_bwd(p, g, a.k, src, &dk, n, true);
    add_in_place(&mut dxkv, &lin_bwd(p, g, a.v, src, &dv, n, true));
    if t.xkv.is_none() {
        add_in_place(&mut dxq, &dxkv);
        dxkv.clear();
    }
    (dxq, dxkv)
}

struct FfnTape {
    x: Vec<f64>,
    pre: Vec<f64>,
    act: Vec<f64>,
}

fn ffn_fwd(p: &[f64], l1: Lin, l2: Lin, x: &[f64], rows: usize) -> (Vec<f64>, FfnTape) {
    let pre = lin_fwd(p, l1, x, rows);
    let act: Vec<f64> = pre.iter().map(|&v| gelu(v)).collect();
    let out = lin_fwd(p, l2, &act, rows);
    (
        out,
        FfnTape {
            x: x.to_vec(),
            pre,
            act,
        },
    )
}

fn ffn_bwd(p: &[f64], g: &mut [f64], l1: Lin, l2: Lin, t: &FfnTape, dy: &[f64], rows: usize) -> Vec<f64> {
    let mut da = lin_bwd(p, g, l2, &t.act, dy, rows, true);
    for (x, &pre) in da.iter_mut().zip(&t.pre) {
        *x *= gelu_grad(pre);
    }
    lin_bwd(p, g, l1, &t.x, &da, rows, true)
}

// ---------------------------------------------------------------------------
// Encoder

struct EncBlockTape {
    ln1: NormTape,
    attn: AttnTape,
    ln2: NormTape,
    ffn: FfnTape,
}

pub(crate) struct EncoderTape {
    /// Input tokens in processing order.
    tokens: Vec<TokenId>,
    /// `order[r]` is the input row processed at position `r`.
    pub(crate) order: Vec<usize>,
    x0: Vec<f64>,
    pre: Vec<f64>,
    act: Vec<f64>,
    blocks: Vec<EncBlockTape>,
    ln: NormTape,
    n: usize,
}

fn enc_block_fwd(p: &[f64], b: &EncBlockP, x: &mut [f64], n: usize, heads: usize) -> EncBlockTape {
    let (a, ln1) = norm_fwd(p, b.ln1, x);
    let (att, attn) = attn_fwd(p, b.attn, &a, n, None, n, heads, false);
    add_in_place(x, &att);
    let (c, ln2) = norm_fwd(p, b.ln2, x);
    let (f, ffn) = ffn_fwd(p, b.ff1, b.ff2, &c, n);
    add_in_place(x, &f);
    EncBlockTape { ln1, attn, ln2, ffn }
}

fn enc_block_bwd(p: &[f64], g: &mut [f64], b: &EncBlockP, t: &EncBlockTape, dx: &mut [f64], n: usize, heads: usize) {
    let dc = ffn_bwd(p, g, b.ff1, b.ff2, &t.ffn, dx, n);
    add_in_place(dx, &norm_bwd(p, g, b.ln2, &t.ln2, &dc));
    let (da, _) = attn_bwd(p, g, b.attn, &t.attn, heads, dx);
    add_in_place(dx, &norm_bwd(p, g, b.ln1, &t.ln1, &da));
}

// ---------------------------------------------------------------------------
// Decoder

struct DecBlockTape {
    ln1: NormTape,
    self_attn: AttnTape,
    ln2: NormTape,
    cross: AttnTape,
    ln3: NormTape,
    ffn: FfnTape,
}

pub(crate) struct DecoderTape {
    tokens: Vec<TokenId>,
    blocks: Vec<DecBlockTape>,
    ln: NormTape,
    hidden: Vec<f64>,
    t: usize,
}

/// Borrowed view of a model: configuration, layout and parameter vector.
#[derive(Clone, Copy)]
pub struct Net<'a> {
    pub cfg: &'a ModelConfig,
    pub layout: &'a Layout,
    pub params: &'a [f64],
}

/// Sums returned by [`Net::loss_and_grad`].
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossStats {
    /// Sum of per-token cross-entropy.
    pub loss_sum: f64,
    pub tokens: usize,
    /// Targets that are also the argmax prediction.
    pub correct: usize,
}

impl LossStats {
    pub fn merge(&mut self, o: &LossStats) {
        self.loss_sum += o.loss_sum;
        self.tokens += o.tokens;
        self.correct += o.correct;
    }

    pub fn mean_loss(&self) -> f64 {
        self.loss_sum / self.tokens.max(1) as f64
    }

    pub fn accuracy(&self) -> f64 {
        self.correct as f64 / self.tokens.max(1) as f64
    }
}

impl<'a> Net<'a> {
    fn check_tokens(&self, toks: &[TokenId]) -> Result<(), ModelError> {
        match toks.iter().find(|&&t| t as usize >= self.layout.vocab) {
            Some(&t) => Err(ModelError::TokenRange(t)),
            None => Ok(()),
        }
    }

    pub(crate) fn encode_fwd(&self, input: &EncoderInput) -> Result<(Vec<f64>, EncoderTape), ModelError> {
        let p = self.params;
        let l = self.layout;
        let d = self.cfg.d_emb;
        let s = self.cfg.tokens_per_point();
        if input.n == 0 {
            return Err(ModelError::EmptyInput);
        }
        if input.tokens.len() != input.n * s {
            return Err(ModelError::Dimension {
                got: input.tokens.len() / input.n / 3 - 1,
                max: self.cfg.d_max,
            });
        }
        self.check_tokens(&input.tokens)?;
        let n = input.n;
        // Points are processed in a canonical (sorted) order so that sums over
        // the point set do not depend on the order the caller supplied.
        let rows: Vec<&[TokenId]> = input.tokens.chunks(s).collect();
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| rows[a].cmp(rows[b]));
        let tokens: Vec<TokenId> = order.iter().flat_map(|&i| rows[i].iter().copied()).collect();
        let mut x0 = vec![0.0; n * s * d];
        for (slot, &tok) in tokens.iter().enumerate() {
            let e = l.tok_emb + tok as usize * d;
            x0[slot * d..(slot + 1) * d].copy_from_slice(&p[e..e + d]);
        }
        let pre = lin_fwd(p, l.emb1, &x0, n);
        let act: Vec<f64> = pre.iter().map(|&v| silu(v)).collect();
        let mut x = lin_fwd(p, l.emb2, &act, n);
        let blocks = l
            .enc
            .iter()
            .map(|b| enc_block_fwd(p, b, &mut x, n, self.cfg.n_heads))
            .collect();
        let (out, ln) = norm_fwd(p, l.enc_ln, &x);
        Ok((
            out,
            EncoderTape {
                tokens,
                order,
                x0,
                pre,
                act,
                blocks,
                ln,
                n,
            },
        ))
    }

    pub(crate) fn encode_bwd(&self, t: &EncoderTape, d_out: &[f64], g: &mut [f64]) {
        let p = self.params;
        let l = self.layout;
        let d = self.cfg.d_emb;
        let n = t.n;
        let mut dx = norm_bwd(p, g, l.enc_ln, &t.ln, d_out);
        for (b, bt) in l.enc.iter().zip(&t.blocks).rev() {
            enc_block_bwd(p, g, b, bt, &mut dx, n, self.cfg.n_heads);
        }
        let mut da = lin_bwd(p, g, l.emb2, &t.act, &dx, n, true);
        for (x, &pre) in da.iter_mut().zip(&t.pre) {
            *x *= silu_grad(pre);
        }
        let dx0 = lin_bwd(p, g, l.emb1, &t.x0, &da, n, true);
        for (slot, &tok) in t.tokens.iter().enumerate() {
            let e = l.tok_emb + tok as usize * d;
            add_in_place(&mut g[e..e + d], &dx0[slot * d..(slot + 1) * d]);
        }
    }

    /// Encoder output, `n × d`, with row `i` belonging to input point `i`.
    pub fn encode(&self, input: &EncoderInput) -> Result<Vec<f64>, ModelError> {
        let (sorted, tape) = self.encode_fwd(input)?;
        let d = self.cfg.d_emb;
        let mut out = vec![0.0; sorted.len()];
        for (r, &i) in tape.order.iter().enumerate() {
            out[i * d..(i + 1) * d].copy_from_slice(&sorted[r * d..(r + 1) * d]);
        }
        Ok(out)
    }

    pub(crate) fn decode_fwd(
        &self,
        enc: &[f64],
        n: usize,
        tokens: &[TokenId],
    ) -> Result<(Vec<f64>, DecoderTape), ModelError> {
        let p = self.params;
        let l = self.layout;
        let d = self.cfg.d_emb;
        let t = tokens.len();
        if t > self.cfg.max_target_length {
            return Err(ModelError::TargetTooLong {
                got: t,
                max: self.cfg.max_target_length,
            });
        }
        self.check_tokens(tokens)?;
        let mut x = vec![0.0; t * d];
        for (i, &tok) in tokens.iter().enumerate() {
            let e = l.tok_emb + tok as usize * d;
            let pe = l.pos_emb + i * d;
            for j in 0..d {
                x[i * d + j] = p[e + j] + p[pe + j];
            }
        }
        let heads = self.cfg.n_heads;
        let mut blocks = Vec::with_capacity(l.dec.len());
        for b in &l.dec {
            let (a, ln1) = norm_fwd(p, b.ln1, &x);
            let (sa, self_attn) = attn_fwd(p, b.self_attn, &a, t, None, t, heads, true);
            add_in_place(&mut x, &sa);
            let (c, ln2) = norm_fwd(p, b.ln2, &x);
            let (ca, cross) = attn_fwd(p, b.cross, &c, t, Some(enc), n, heads, false);
            add_in_place(&mut x, &ca);
            let (f, ln3) = norm_fwd(p, b.ln3, &x);
            let (ff, ffn) = ffn_fwd(p, b.ff1, b.ff2, &f, t);
            add_in_place(&mut x, &ff);
            blocks.push(DecBlockTape {
                ln1,
                self_attn,
                ln2,
                cross,
                ln3,
                ffn,
            });
        }
        let (hidden, ln) = norm_fwd(p, l.dec_ln, &x);
        let logits = lin_fwd(p, l.out, &hidden, t);
        Ok((
            logits,
            DecoderTape {
                tokens: tokens.to_vec(),
                blocks,
                ln,
                hidden,
                t,
            },
        ))
    }

    /// Backward through the decoder; returns the gradient with respect to
    /// the encoder output.
    pub(crate) fn decode_bwd(&self, tape: &DecoderTape, dlogits: &[f64], n: usize, g: &mut [f64]) -> Vec<f64> {
        let p = self.params;
        let l = self.layout;
        let d = self.cfg.d_emb;
        let t = tape.t;
        let heads = self.cfg.n_heads;
        let dh = lin_bwd(p, g, l.out, &tape.hidden, dlogits, t, true);
        let mut dx = norm_bwd(p, g, l.dec_ln, &tape.ln, &dh);
        let mut d_enc = vec![0.0; n * d];
        for (b, bt) in l.dec.iter().zip(&tape.blocks).rev() {
            let df = ffn_bwd(p, g, b.ff1, b.ff2, &bt.ffn, &dx, t);
            add_in_place(&mut dx, &norm_bwd(p, g, b.ln3, &bt.ln3, &df));
            let (dc, de) = attn_bwd(p, g, b.cross, &bt.cross, heads, &dx);
            add_in_place(&mut d_enc, &de);
            add_in_place(&mut dx, &norm_bwd(p, g, b.ln2, &bt.ln2, &dc));
            let (da, _) = attn_bwd(p, g, b.self_attn, &bt.self_attn, heads, &dx);
            add_in_place(&mut dx, &norm_bwd(p, g, b.ln1, &bt.ln1, &da));
        }
        for (i, &tok) in tape.tokens.iter().enumerate() {
            let e = l.tok_emb + tok as usize * d;
            let pe = l.pos_emb + i * d;
            let row = &dx[i * d..(i + 1) * d];
            add_in_place(&mut g[e..e + d], row);
            add_in_place(&mut g[pe..pe + d], row);
        }
        d_enc
    }

    /// Teacher-forced logits (`len × vocab`) for the decoder input `tokens`.
    pub fn logits(&self, input: &EncoderInput, tokens: &[TokenId]) -> Result<Vec<f64>, ModelError> {
        let enc = self.encode_fwd(input)?.0;
        Ok(self.decode_fwd(&enc, input.n, tokens)?.0)
    }

    /// Cross-entropy of `target` (BOS ... EOS, possibly PAD-padded) given the
    /// input. The decoder reads `target[..len-1]` and predicts
    /// `target[1..]`; PAD targets are skipped. Gradients of
    /// `scale * loss_sum` are added to `grads` when given.
    pub fn loss_and_grad(
        &self,
        input: &EncoderInput,
        target: &[TokenId],
        grads: Option<&mut [f64]>,
        scale: f64,
    ) -> Result<LossStats, ModelError> {
        if target.len() < 2 {
            return Ok(LossStats::default());
        }
        self.teacher_forced_loss(input, &target[..target.len() - 1], &target[1..], grads, scale)
    }

    /// Loss with explicit decoder inputs and per-position targets of the
    /// same length.
    pub fn teacher_forced_loss(
        &self,
        input: &EncoderInput,
        dec_in: &[TokenId],
        want: &[TokenId],
        grads: Option<&mut [f64]>,
        scale: f64,
    ) -> Result<LossStats, ModelError> {
        assert_eq!(dec_in.len(), want.len(), "one target per decoder position");
        self.check_tokens(want)?;
        let (enc, etape) = self.encode_fwd(input)?;
        let (mut logits, dtape) = self.decode_fwd(&enc, input.n, dec_in)?;
        let v = self.layout.vocab;
        let pad = Vocabulary::get().pad();
        let mut stats = LossStats::default();
        for (i, &y) in want.iter().enumerate() {
            let row = &mut logits[i * v..(i + 1) * v];
            if y == pad {
                row.fill(0.0);
                continue;
            }
            let arg = row
                .iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |b, (j, &x)| if x > b.1 { (j, x) } else { b })
                .0;
            log_softmax_in_place(row);
            stats.loss_sum -= row[y as usize];
            stats.tokens += 1;
            stats.correct += usize::from(arg == y as usize);
            // row becomes dL/dlogits
            for x in row.iter_mut() {
                *x = scale * x.exp();
            }
            row[y as usize] -= scale;
        }
        if let Some(g) = grads {
            let d_enc = self.decode_bwd(&dtape, &logits, input.n, g);
            self.encode_bwd(&etape, &d_enc, g);
        }
        Ok(stats)
    }
}
