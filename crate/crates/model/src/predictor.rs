//! End-to-end inference: rescale, beam-sample, unscale, select, refine.

use odeformer_core::evaluation::Predictor;
use odeformer_core::expr::OdeSystem;
use odeformer_core::inference::{refine_constants, rescale, select_best, RefineConfig, RescaleTransform};
use odeformer_core::integrator::SolverOptions;
use odeformer_core::rng::RandomSource;
use odeformer_core::Trajectory;

use crate::decode::{beam_sample, DecodeConfig, DecodeError};
use crate::model::Model;
use crate::net::EncoderInput;

pub struct ModelPredictor {
    pub model: Model,
    pub decode: DecodeConfig,
    /// Map the observed span to [1, 10] and the first state to ones before
    /// encoding.
    pub rescale: bool,
    /// Constant refinement of the selected candidate.
    pub refine: Option<RefineConfig>,
    pub solver: SolverOptions,
}

#[derive(Debug, Clone)]
pub struct Prediction {
    pub system: OdeSystem,
    /// R² of the selected candidate on the observations, before refinement.
    pub selection_score: f64,
    pub candidates: usize,
}

impl ModelPredictor {
    pub fn new(model: Model, decode: DecodeConfig) -> Self {
        Self {
            model,
            decode,
            rescale: true,
            refine: None,
            solver: SolverOptions::default(),
        }
    }

    /// Unscaled candidates in beam order.
    pub fn candidates(&self, observed: &Trajectory, rng: &mut RandomSource) -> Result<Vec<OdeSystem>, DecodeError> {
        let (input_traj, tf) = if self.rescale {
            rescale(observed)
        } else {
            (observed.clone(), RescaleTransform::identity(observed.dim()))
        };
        let input = EncoderInput::from_trajectory(&input_traj, self.model.cfg.d_max)?;
        let cands = beam_sample(&self.model.net(), &input, &self.decode, rng)?;
        Ok(cands
            .into_iter()
            .filter(|c| c.system.dim() == observed.dim())
            .map(|c| if self.rescale { tf.unscale_system(&c.system) } else { c.system })
            .collect())
    }

    pub fn predict_detailed(&self, observed: &Trajectory, rng: &mut RandomSource) -> Option<Prediction> {
        let cands = self.candidates(observed, rng).ok()?;
        let (i, score) = select_best(&cands, observed, &self.solver).ok()?;
        let mut system = cands[i].clone();
        if let Some(rc) = &self.refine {
            if system.constant_count() > 0 {
                system = refine_constants(&system, observed, rc).system;
            }
        }
        Some(Prediction {
            system,
            selection_score: score,
            candidates: cands.len(),
        })
    }
}

impl Predictor for ModelPredictor {
    fn predict(&self, _item: u32, observed: &Trajectory, rng: &mut RandomSource) -> Option<OdeSystem> {
        self.predict_detailed(observed, rng).map(|p| p.system)
    }
}
