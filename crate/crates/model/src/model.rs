//! Owned model plus binary checkpoints.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use odeformer_core::rng::seeded;
use odeformer_core::tokenizer::Vocabulary;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::{ModelConfig, TrainConfig};
use crate::net::{ModelError, Net};
use crate::params::Layout;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"ODEFCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone)]
pub struct Model {
    pub cfg: ModelConfig,
    pub layout: Layout,
    pub params: Vec<f64>,
}

impl Model {
    /// Fresh model initialized from `cfg.seed`.
    pub fn new(cfg: ModelConfig) -> Result<Self, ModelError> {
        cfg.validate()?;
        let layout = Layout::new(&cfg, Vocabulary::get().len());
        let params = layout.init(&mut seeded(cfg.seed));
        Ok(Self { cfg, layout, params })
    }

    pub fn from_params(cfg: ModelConfig, params: Vec<f64>) -> Result<Self, ModelError> {
        cfg.validate()?;
        let layout = Layout::new(&cfg, Vocabulary::get().len());
        if params.len() != layout.total {
            return Err(ModelError::ParamCount {
                got: params.len(),
                want: layout.total,
            });
        }
        Ok(Self { cfg, layout, params })
    }

    pub fn net(&self) -> Net<'_> {
        Net {
            cfg: &self.cfg,
            layout: &self.layout,
            params: &self.params,
        }
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }
}

/// First and second moment estimates of Adam.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }
}

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint file (bad magic)")]
    Magic,
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("bad header: {0}")]
    Header(#[from] serde_json::Error),
    #[error("checkpoint was written with vocabulary {found}, this build uses {expected}")]
    Vocabulary { found: String, expected: String },
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub model: ModelConfig,
    pub train: Option<TrainConfig>,
    /// Optimizer steps taken so far.
    pub step: u64,
    pub num_params: usize,
    pub has_optimizer: bool,
    pub vocabulary_sha256: String,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: Model,
    pub train: Option<TrainConfig>,
    pub step: u64,
    pub optimizer: Option<AdamState>,
}

fn write_f64s<W: Write>(w: &mut W, xs: &[f64]) -> std::io::Result<()> {
    for x in xs {
        w.write_all(&x.to_le_bytes())?;
    }
    Ok(())
}

fn read_f64s<R: Read>(r: &mut R, n: usize) -> std::io::Result<Vec<f64>> {
    let mut buf = vec![0u8; n * 8];
    r.read_exact(&mut buf)?;
    Ok(buf
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect())
}

impl Checkpoint {
    pub fn write<W: Write>(&self, out: W) -> Result<(), CheckpointError> {
        let mut w = BufWriter::new(out);
        let header = CheckpointHeader {
            model: self.model.cfg.clone(),
            train: self.train.clone(),
            step: self.step,
            num_params: self.model.params.len(),
            has_optimizer: self.optimizer.is_some(),
            vocabulary_sha256: Vocabulary::get().hash(),
        };
        let json = serde_json::to_vec(&header)?;
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        w.write_all(&(json.len() as u64).to_le_bytes())?;
        w.write_all(&json)?;
        write_f64s(&mut w, &self.model.params)?;
        if let Some(opt) = &self.optimizer {
            write_f64s(&mut w, &opt.m)?;
            write_f64s(&mut w, &opt.v)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read<R: Read>(input: R) -> Result<Self, CheckpointError> {
        let mut r = BufReader::new(input);
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(CheckpointError::Magic);
        }
        let mut b4 = [0u8; 4];
        r.read_exact(&mut b4)?;
        let version = u32::from_le_bytes(b4);
        if version != CHECKPOINT_VERSION {
            return Err(CheckpointError::Version(version));
        }
        let mut b8 = [0u8; 8];
        r.read_exact(&mut b8)?;
        let mut json = vec![0u8; u64::from_le_bytes(b8) as usize];
        r.read_exact(&mut json)?;
        let header: CheckpointHeader = serde_json::from_slice(&json)?;
        let expected = Vocabulary::get().hash();
        if header.vocabulary_sha256 != expected {
            return Err(CheckpointError::Vocabulary {
                found: header.vocabulary_sha256,
                expected,
            });
        }
        let params = read_f64s(&mut r, header.num_params)?;
        let model = Model::from_params(header.model, params)?;
        let optimizer = if header.has_optimizer {
            let m = read_f64s(&mut r, header.num_params)?;
            let v = read_f64s(&mut r, header.num_params)?;
            Some(AdamState { m, v })
        } else {
            None
        };
        Ok(Self {
            model,
            train: header.train,
            step: header.step,
            optimizer,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        self.write(File::create(path)?)
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        Self::read(File::open(path)?)
    }
}
