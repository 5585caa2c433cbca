//! Scorer and importance head wired together.

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{BoundParams, Tape};
use crate::data::DatasetMode;
use crate::error::Result;
use crate::head::{calibrate_probability, run_head, HeadConfig, HeadVars, ImportanceOutput};
use crate::params::ParamStore;
use crate::scorer::{score_frames, ScorerConfig, ScorerVars};
use crate::timeline::SegmentIndexMap;

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub scorer: ScorerConfig,
    pub head: HeadConfig,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.scorer.validate()?;
        self.head.validate()
    }

    /// Freshly initialized parameters drawn from `rng`.
    pub fn init_params<R: rand::Rng + ?Sized>(&self, rng: &mut R) -> ParamStore {
        let mut store = ParamStore::new();
        self.scorer.init_params(rng, &mut store);
        self.head.init_params(rng, self.scorer.model_dim, &mut store);
        store
    }

    /// Parameter names and shapes, with unspecified values.
    pub fn layout(&self) -> ParamStore {
        self.init_params(&mut ChaCha8Rng::seed_from_u64(0))
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ForwardVars {
    pub scorer: ScorerVars,
    pub head: HeadVars,
}

/// Records one model pass; `noise` of `None` selects the posterior mean.
pub fn forward(
    tape: &mut Tape,
    p: &BoundParams<'_>,
    cfg: &ModelConfig,
    features: &Array2<f64>,
    seg: &SegmentIndexMap,
    noise: Option<&Array2<f64>>,
) -> Result<ForwardVars> {
    let x = tape.constant(features.clone());
    let scorer = score_frames(tape, p, &cfg.scorer, x, seg)?;
    let head = run_head(tape, p, scorer.refined, noise)?;
    Ok(ForwardVars { scorer, head })
}

/// Deterministic inference outputs for one video.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub importance: ImportanceOutput,
    /// `sigmoid(mu / T_s)`.
    pub probability: Vec<f64>,
}

impl Prediction {
    /// Ranking and decoding score: `mu` for TVSum, `p` for SumMe.
    pub fn scores(&self, mode: DatasetMode) -> &[f64] {
        match mode {
            DatasetMode::Tvsum => &self.importance.mu,
            DatasetMode::Summe => &self.probability,
        }
    }
}

pub fn infer(
    params: &ParamStore,
    cfg: &ModelConfig,
    features: &Array2<f64>,
    seg: &SegmentIndexMap,
) -> Result<Prediction> {
    let mut tape = Tape::new();
    let p = tape.bind(params);
    let vars = forward(&mut tape, &p, cfg, features, seg, None)?;
    let importance = ImportanceOutput::from_tape(&tape, &vars.head);
    let probability = calibrate_probability(&importance.mu, cfg.head.temperature)?;
    Ok(Prediction {
        importance,
        probability,
    })
}
