//! Incremental decoding with a key/value cache, and beam sampling.

use std::cmp::Ordering;

use odeformer_core::expr::OdeSystem;
use odeformer_core::rng::RandomSource;
use odeformer_core::tokenizer::{decode_expression, TokenId, Vocabulary};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::net::{head_mix, head_scores, lin_fwd, norm_apply, EncoderInput, ModelError, Net};
use crate::ops::{add_in_place, gelu, log_softmax_in_place, softmax_prefix};

/// Encoder output plus the cross-attention keys and values of every decoder
/// layer, computed once per input and shared by all hypotheses.
pub struct Encoded {
    pub n: usize,
    cross_k: Vec<Vec<f64>>,
    cross_v: Vec<Vec<f64>>,
}

/// Self-attention cache of one hypothesis.
#[derive(Debug, Clone, Default)]
pub struct DecoderState {
    k: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    len: usize,
}

impl DecoderState {
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }
}

impl<'a> Net<'a> {
    pub fn prepare(&self, input: &EncoderInput) -> Result<Encoded, ModelError> {
        let (enc, _) = self.encode_fwd(input)?;
        let n = input.n;
        let (cross_k, cross_v) = self
            .layout
            .dec
            .iter()
            .map(|b| (lin_fwd(self.params, b.cross.k, &enc, n), lin_fwd(self.params, b.cross.v, &enc, n)))
            .unzip();
        Ok(Encoded { n, cross_k, cross_v })
    }

    pub fn new_state(&self) -> DecoderState {
        let layers = self.layout.dec.len();
        DecoderState {
            k: vec![Vec::new(); layers],
            v: vec![Vec::new(); layers],
            len: 0,
        }
    }

    /// Feeds one token to each hypothesis and returns the next-token logits
    /// (`states.len() × vocab`).
    pub fn step(&self, enc: &Encoded, states: &mut [&mut DecoderState], tokens: &[TokenId]) -> Result<Vec<f64>, ModelError> {
        assert_eq!(states.len(), tokens.len());
        let p = self.params;
        let l = self.layout;
        let d = self.cfg.d_emb;
        let heads = self.cfg.n_heads;
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let rows = tokens.len();
        let mut x = vec![0.0; rows * d];
        for (r, (&tok, st)) in tokens.iter().zip(states.iter()).enumerate() {
            if tok as usize >= l.vocab {
                return Err(ModelError::TokenRange(tok));
            }
            if st.len >= self.cfg.max_target_length {
                return Err(ModelError::TargetTooLong {
                    got: st.len + 1,
                    max: self.cfg.max_target_length,
                });
            }
            let e = l.tok_emb + tok as usize * d;
            let pe = l.pos_emb + st.len * d;
            for j in 0..d {
                x[r * d + j] = p[e + j] + p[pe + j];
            }
        }
        let mut scores = Vec::new();
        for (li, b) in l.dec.iter().enumerate() {
            let a = norm_apply(p, b.ln1, &x);
            let q = lin_fwd(p, b.self_attn.q, &a, rows);
            let k = lin_fwd(p, b.self_attn.k, &a, rows);
            let v = lin_fwd(p, b.self_attn.v, &a, rows);
            let mut o = vec![0.0; rows * d];
            for (r, st) in states.iter_mut().enumerate() {
                st.k[li].extend_from_slice(&k[r * d..(r + 1) * d]);
                st.v[li].extend_from_slice(&v[r * d..(r + 1) * d]);
                let len = st.len + 1;
                let (kc, vc) = (&st.k[li], &st.v[li]);
                scores.resize(len, 0.0);
                for h in 0..heads {
                    let off = h * dh;
                    let qh = &q[r * d + off..r * d + off + dh];
                    for (j, s) in scores.iter_mut().enumerate() {
                        let kh = &kc[j * d + off..j * d + off + dh];
                        *s = qh.iter().zip(kh).map(|(a, b)| a * b).sum::<f64>() * scale;
                    }
                    softmax_prefix(&mut scores, len);
                    let oh = &mut o[r * d + off..r * d + off + dh];
                    for (j, &w) in scores.iter().enumerate() {
                        let vh = &vc[j * d + off..j * d + off + dh];
                        for (acc, &vv) in oh.iter_mut().zip(vh) {
                            *acc += w * vv;
                        }
                    }
                }
            }
            add_in_place(&mut x, &lin_fwd(p, b.self_attn.o, &o, rows));

            let c = norm_apply(p, b.ln2, &x);
            let q = lin_fwd(p, b.cross.q, &c, rows);
            let n = enc.n;
            let mut probs = vec![0.0; rows * n];
            let mut o = vec![0.0; rows * d];
            for h in 0..heads {
                head_scores(&q, &enc.cross_k[li], rows, n, d, dh, h, &mut probs);
                for r in 0..rows {
                    softmax_prefix(&mut probs[r * n..(r + 1) * n], n);
                }
                head_mix(&probs, &enc.cross_v[li], rows, n, d, dh, h, &mut o);
            }
            add_in_place(&mut x, &lin_fwd(p, b.cross.o, &o, rows));

            let f = norm_apply(p, b.ln3, &x);
            let mut hmid = lin_fwd(p, b.ff1, &f, rows);
            hmid.iter_mut().for_each(|v| *v = gelu(*v));
            add_in_place(&mut x, &lin_fwd(p, b.ff2, &hmid, rows));
        }
        for st in states.iter_mut() {
            st.len += 1;
        }
        let hidden = norm_apply(p, l.dec_ln, &x);
        Ok(lin_fwd(p, l.out, &hidden, rows))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DecodeConfig {
    pub beam_size: usize,
    pub temperature: f64,
    /// Cap on generated sequence length including BOS; the model's
    /// `max_target_length` applies when unset.
    pub max_length: Option<usize>,
    /// Expansions whose temperature-scaled log-probability is below this are
    /// not considered.
    pub min_log_prob: f64,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self {
            beam_size: 50,
            temperature: 0.1,
            max_length: None,
            min_log_prob: -50.0,
        }
    }
}

#[derive(Debug, Error)]
pub enum DecodeError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("beam_size must be at least 1")]
    BeamSize,
    #[error("temperature must be positive, got {0}")]
    Temperature(f64),
    #[error("no hypothesis decoded to a valid system")]
    NoCandidates,
}

#[derive(Debug, Clone)]
pub struct Candidate {
    pub tokens: Vec<TokenId>,
    pub system: OdeSystem,
    /// Sum of temperature-scaled log-probabilities.
    pub score: f64,
}

struct Hyp {
    tokens: Vec<TokenId>,
    score: f64,
    state: DecoderState,
}

fn gumbel<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    let u: f64 = rng.random_range(f64::MIN_POSITIVE..1.0);
    -(-u.ln()).ln()
}

/// Stochastic beam search. At each step every live hypothesis is expanded
/// with every token, and `k` expansions are drawn without replacement from
/// the pool with probability proportional to the exponentiated cumulative
/// score (Gumbel top-k). Hypotheses that emit EOS are set aside and shrink
/// the beam. Candidates that fail to decode are dropped. With `beam_size`
/// 1 no noise is drawn and the result is the greedy decode.
pub fn beam_sample(
    net: &Net,
    input: &EncoderInput,
    cfg: &DecodeConfig,
    rng: &mut RandomSource,
) -> Result<Vec<Candidate>, DecodeError> {
    if cfg.beam_size == 0 {
        return Err(DecodeError::BeamSize);
    }
    if cfg.temperature.is_nan() || cfg.temperature <= 0.0 {
        return Err(DecodeError::Temperature(cfg.temperature));
    }
    let vocab = Vocabulary::get();
    let max_len = cfg
        .max_length
        .unwrap_or(net.cfg.max_target_length)
        .min(net.cfg.max_target_length);
    let enc = net.prepare(input)?;
    let v = net.layout.vocab;
    let mut live = vec![Hyp {
        tokens: vec![vocab.bos()],
        score: 0.0,
        state: net.new_state(),
    }];
    let mut done: Vec<Candidate> = Vec::new();
    let mut slots = cfg.beam_size;
    while !live.is_empty() && slots > 0 {
        let last: Vec<TokenId> = live.iter().map(|h| *h.tokens.last().expect("starts with BOS")).collect();
        let mut states: Vec<&mut DecoderState> = live.iter_mut().map(|h| &mut h.state).collect();
        let mut logits = net.step(&enc, &mut states, &last)?;
        // (key, hyp, token, score)
        let mut pool: Vec<(f64, usize, TokenId, f64)> = Vec::new();
        for (hi, h) in live.iter().enumerate() {
            let row = &mut logits[hi * v..(hi + 1) * v];
            row.iter_mut().for_each(|x| *x /= cfg.temperature);
            log_softmax_in_place(row);
            for (tok, &lp) in row.iter().enumerate() {
                if lp < cfg.min_log_prob || tok as TokenId == vocab.pad() || tok as TokenId == vocab.bos() {
                    continue;
                }
                let s = h.score + lp;
                // a one-wide beam is plain greedy decoding
                let key = if cfg.beam_size == 1 { s } else { s + gumbel(rng) };
                pool.push((key, hi, tok as TokenId, s));
            }
        }
        let k = slots.min(pool.len());
        if k == 0 {
            break;
        }
        pool.select_nth_unstable_by(k - 1, |a, b| b.0.partial_cmp(&a.0).unwrap_or(Ordering::Equal));
        pool.truncate(k);
        pool.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap_or(Ordering::Equal));
        let mut next = Vec::with_capacity(k);
        for &(_, hi, tok, score) in &pool {
            let mut tokens = live[hi].tokens.clone();
            tokens.push(tok);
            if tok == vocab.eos() {
                slots -= 1;
                if let Ok(system) = decode_expression(&tokens) {
                    done.push(Candidate { tokens, system, score });
                }
            } else if tokens.len() < max_len {
                next.push(Hyp {
                    tokens,
                    score,
                    state: live[hi].state.clone(),
                });
            } else {
                // out of room before EOS
                slots -= 1;
            }
        }
        live = next;
    }
    if done.is_empty() {
        return Err(DecodeError::NoCandidates);
    }
    done.sort_by(|a, b| b.score.partial_cmp(&a.score).unwrap_or(Ordering::Equal));
    Ok(done)
}

/// Most likely token at every step; equivalent to a one-wide beam in the
/// zero-temperature limit.
pub fn greedy(net: &Net, input: &EncoderInput, max_len: usize) -> Result<Vec<TokenId>, ModelError> {
    let vocab = Vocabulary::get();
    let enc = net.prepare(input)?;
    let mut st = net.new_state();
    let mut tokens = vec![vocab.bos()];
    let max_len = max_len.min(net.cfg.max_target_length);
    while tokens.len() < max_len {
        let logits = net.step(&enc, &mut [&mut st], &[*tokens.last().expect("non-empty")])?;
        let (arg, _) = logits
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |b, (j, &x)| if x > b.1 { (j, x) } else { b });
        tokens.push(arg as TokenId);
        if arg as TokenId == vocab.eos() {
            break;
        }
    }
    Ok(tokens)
}
