//! Flat parameter layout. Every tensor lives at a fixed offset in one `Vec<f64>`
//! so the optimizer, checkpoints and gradient buffers can treat the model as
//! a single vector.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Init {
    Zeros,
    Ones,
    /// Uniform on `±1/sqrt(fan_in)`.
    FanIn(usize),
    Normal,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub init: Init,
}

impl TensorSpec {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

/// Linear map `y = x W + b` with `W` stored `din × dout`.
#[derive(Debug, Clone, Copy)]
pub struct Lin {
    pub w: usize,
    pub b: usize,
    pub din: usize,
    pub dout: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct Norm {
    pub g: usize,
    pub b: usize,
    pub d: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct AttnP {
    pub q: Lin,
    pub k: Lin,
    pub v: Lin,
    pub o: Lin,
}

#[derive(Debug, Clone, Copy)]
pub struct EncBlockP {
    pub ln1: Norm,
    pub attn: AttnP,
    pub ln2: Norm,
    pub ff1: Lin,
    pub ff2: Lin,
}

#[derive(Debug, Clone, Copy)]
pub struct DecBlockP {
    pub ln1: Norm,
    pub self_attn: AttnP,
    pub ln2: Norm,
    pub cross: AttnP,
    pub ln3: Norm,
    pub ff1: Lin,
    pub ff2: Lin,
}

#[derive(Debug, Clone)]
pub struct Layout {
    pub tensors: Vec<TensorSpec>,
    pub total: usize,
    pub vocab: usize,
    /// `vocab × d` token table shared by the embedder and the decoder input.
    pub tok_emb: usize,
    pub emb1: Lin,
    pub emb2: Lin,
    pub enc: Vec<EncBlockP>,
    pub enc_ln: Norm,
    /// `max_target_length × d`.
    pub pos_emb: usize,
    pub dec: Vec<DecBlockP>,
    pub dec_ln: Norm,
    pub out: Lin,
}

struct Builder {
    tensors: Vec<TensorSpec>,
    total: usize,
}

impl Builder {
    fn alloc(&mut self, name: String, shape: Vec<usize>, init: Init) -> usize {
        let offset = self.total;
        let spec = TensorSpec {
            name,
            shape,
            offset,
            init,
        };
        self.total += spec.numel();
        self.tensors.push(spec);
        offset
    }

    fn lin(&mut self, name: &str, din: usize, dout: usize) -> Lin {
        let w = self.alloc(format!("{name}.weight"), vec![din, dout], Init::FanIn(din));
        let b = self.alloc(format!("{name}.bias"), vec![dout], Init::Zeros);
        Lin { w, b, din, dout }
    }

    fn norm(&mut self, name: &str, d: usize) -> Norm {
        let g = self.alloc(format!("{name}.gain"), vec![d], Init::Ones);
        let b = self.alloc(format!("{name}.bias"), vec![d], Init::Zeros);
        Norm { g, b, d }
    }

    fn attn(&mut self, name: &str, d: usize) -> AttnP {
        AttnP {
            q: self.lin(&format!("{name}.q"), d, d),
            k: self.lin(&format!("{name}.k"), d, d),
            v: self.lin(&format!("{name}.v"), d, d),
            o: self.lin(&format!("{name}.o"), d, d),
        }
    }
}

impl Layout {
    pub fn new(cfg: &ModelConfig, vocab: usize) -> Self {
        let d = cfg.d_emb;
        let ff = cfg.ffn_mult * d;
        let mut b = Builder {
            tensors: Vec::new(),
            total: 0,
        };
        let tok_emb = b.alloc("tok_emb".into(), vec![vocab, d], Init::Normal);
        let emb1 = b.lin("embedder.fc1", cfg.tokens_per_point() * d, d);
        let emb2 = b.lin("embedder.fc2", d, d);
        let enc = (0..cfg.enc_layers)
            .map(|i| {
                let p = format!("encoder.{i}");
                EncBlockP {
                    ln1: b.norm(&format!("{p}.ln1"), d),
                    attn: b.attn(&format!("{p}.attn"), d),
                    ln2: b.norm(&format!("{p}.ln2"), d),
                    ff1: b.lin(&format!("{p}.ff1"), d, ff),
                    ff2: b.lin(&format!("{p}.ff2"), ff, d),
                }
            })
            .collect();
        let enc_ln = b.norm("encoder.ln", d);
        let pos_emb = b.alloc("pos_emb".into(), vec![cfg.max_target_length, d], Init::Normal);
        let dec = (0..cfg.dec_layers)
            .map(|i| {
                let p = format!("decoder.{i}");
                DecBlockP {
                    ln1: b.norm(&format!("{p}.ln1"), d),
                    self_attn: b.attn(&format!("{p}.self_attn"), d),
                    ln2: b.norm(&format!("{p}.ln2"), d),
                    cross: b.attn(&format!("{p}.cross_attn"), d),
                    ln3: b.norm(&format!("{p}.ln3"), d),
                    ff1: b.lin(&format!("{p}.ff1"), d, ff),
                    ff2: b.lin(&format!("{p}.ff2"), ff, d),
                }
            })
            .collect();
        let dec_ln = b.norm("decoder.ln", d);
        let out = b.lin("output", d, vocab);
        Layout {
            tensors: b.tensors,
            total: b.total,
            vocab,
            tok_emb,
            emb1,
            emb2,
            enc,
            enc_ln,
            pos_emb,
            dec,
            dec_ln,
            out,
        }
    }

    pub fn init<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let mut p = vec![0.0; self.total];
        let normal = Normal::new(0.0, 1.0).expect("unit normal");
        for t in &self.tensors {
            let s = &mut p[t.offset..t.offset + t.numel()];
            match t.init {
                Init::Zeros => {}
                Init::Ones => s.fill(1.0),
                Init::FanIn(fan) => {
                    let a = 1.0 / (fan as f64).sqrt();
                    s.iter_mut().for_each(|v| *v = rng.random_range(-a..a));
                }
                Init::Normal => s.iter_mut().for_each(|v| *v = normal.sample(rng)),
            }
        }
        p
    }

    pub fn tensor(&self, name: &str) -> Option<&TensorSpec> {
        self.tensors.iter().find(|t| t.name == name)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tensors_tile_the_buffer() {
        let cfg = ModelConfig::default();
        let l = Layout::new(&cfg, 100);
        let mut next = 0;
        for t in &l.tensors {
            assert_eq!(t.offset, next);
            next += t.numel();
        }
        assert_eq!(next, l.total);
        assert_eq!(l.tensor("output.weight").unwrap().shape, vec![64, 100]);
    }
}
