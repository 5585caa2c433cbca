//! Training loop: per-video objectives, gradient accumulation, clipping and
//! AdamW updates, with all randomness drawn from one seeded generator.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Normal, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{BoundParams, Tape, Var};
use crate::data::{Dataset, DatasetMode, VideoRecord};
use crate::decoder::budget_capacity;
use crate::error::{Error, Result};
use crate::eval::evaluate_records;
use crate::head::calibrate_var;
use crate::losses::{
    compose_total, kl_standard_normal, ranking_hinge, select_ranking_targets, stability_loss, summe_softmin_bce,
    total_loss, tvsum_nll, Lambdas, LossBreakdown, LossConfig, LossParts, LossVars, RankingScore,
};
use crate::model::{forward, infer, ModelConfig};
use crate::optim::{clip_global_norm, AdamW, AdamWConfig};
use crate::params::{GradientSet, ParamStore};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub weight_decay: f64,
    pub clip_norm: f64,
    pub epochs: usize,
    /// Videos per optimizer step; their gradients are averaged.
    pub accumulate: usize,
    pub seed: u64,
    pub mode: DatasetMode,
    /// Share of training videos held out for checkpoint selection.
    pub val_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            weight_decay: 1e-2,
            clip_norm: 1.0,
            epochs: 100,
            accumulate: 4,
            seed: 0,
            mode: DatasetMode::Tvsum,
            val_fraction: 0.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config(format!("train.lr must be positive, got {}", self.lr)));
        }
        for (name, b) in [("train.beta1", self.beta1), ("train.beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::config(format!("{name} must lie in [0, 1), got {b}")));
            }
        }
        if !(self.adam_eps > 0.0) || !(self.clip_norm > 0.0) {
            return Err(Error::config("train.adam_eps and train.clip_norm must be positive"));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::config("train.weight_decay must be non-negative"));
        }
        if self.accumulate == 0 {
            return Err(Error::config("train.accumulate must be at least 1"));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::config(format!(
                "train.val_fraction must lie in [0, 1), got {}",
                self.val_fraction
            )));
        }
        Ok(())
    }

    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.adam_eps,
            weight_decay: self.weight_decay,
        }
    }
}

/// Random inputs of one video's training step, drawn before any compute.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoDraws {
    /// `T x d_z` standard normals for the latent sample.
    pub latent: Array2<f64>,
    /// Candidate ranking pairs, drawn uniformly with replacement.
    pub pairs: Vec<(usize, usize)>,
    /// `R x M` perturbations with standard deviation `sigma_perturb`.
    pub perturbations: Array2<f64>,
}

impl VideoDraws {
    pub fn sample<R: Rng + ?Sized>(
        rng: &mut R,
        video: &VideoRecord,
        model: &ModelConfig,
        loss: &LossConfig,
    ) -> Result<Self> {
        let t_len = video.n_steps();
        let latent = Array2::from_shape_simple_fn((t_len, model.head.latent_dim), || rng.sample(StandardNormal));
        let pairs = (0..loss.n_pairs)
            .map(|_| (rng.gen_range(0..t_len), rng.gen_range(0..t_len)))
            .collect();
        let normal = Normal::new(0.0, loss.sigma_perturb).map_err(|e| Error::config(e.to_string()))?;
        let m = video.partition.n_segments();
        let perturbations = Array2::from_shape_simple_fn((loss.perturbations, m), || rng.sample(normal));
        Ok(Self {
            latent,
            pairs,
            perturbations,
        })
    }
}

/// Records the full training objective of one video.
pub fn video_objective(
    tape: &mut Tape,
    p: &BoundParams<'_>,
    model: &ModelConfig,
    loss: &LossConfig,
    mode: DatasetMode,
    video: &VideoRecord,
    draws: &VideoDraws,
    lambdas: &Lambdas,
) -> Result<(Var, LossVars)> {
    let ann = video.annotations.matrix();
    let out = forward(tape, p, model, &video.features, &video.segments, Some(&draws.latent))?;
    let (mu, log_v) = (out.head.mu, out.head.log_v);
    let prob = calibrate_var(tape, mu, model.head.temperature)?;
    let main = match mode {
        DatasetMode::Tvsum => tvsum_nll(tape, mu, log_v, ann, loss.epsilon)?,
        DatasetMode::Summe => summe_softmin_bce(tape, prob, ann, loss.tau_sm)?,
    };
    let targets = select_ranking_targets(mode, &tape.column(prob), ann)?;
    let q = match targets.score {
        RankingScore::Logit => mu,
        RankingScore::Probability => prob,
    };
    let rank = ranking_hinge(tape, q, &targets.r, &draws.pairs, loss.margin_rank)?;
    let kl = kl_standard_normal(tape, out.head.mu_z, out.head.log_var_z)?;
    let seg_scores = tape.segment_mean(q, &video.segments.index_sets)?;
    let capacity = budget_capacity(loss.budget, video.n_frames())?;
    let stab = stability_loss(
        tape,
        seg_scores,
        &video.segments.lengths,
        capacity,
        loss.margin_stab,
        &draws.perturbations,
    )?;
    let vars = LossVars { main, rank, stab, kl };
    let total = compose_total(tape, &vars, lambdas)?;
    Ok((total, vars))
}

/// Smooth part of the objective (likelihood, soft-min BCE on binarized
/// targets, KL) used for gradient checking away from hinge kinks.
pub fn smooth_objective(
    tape: &mut Tape,
    p: &BoundParams<'_>,
    model: &ModelConfig,
    loss: &LossConfig,
    video: &VideoRecord,
    latent: &Array2<f64>,
) -> Result<Var> {
    let ann = video.annotations.matrix();
    let out = forward(tape, p, model, &video.features, &video.segments, Some(latent))?;
    let nll = tvsum_nll(tape, out.head.mu, out.head.log_v, ann, loss.epsilon)?;
    let prob = calibrate_var(tape, out.head.mu, model.head.temperature)?;
    let labels = ann.mapv(|s| if s >= 0.5 { 1.0 } else { 0.0 });
    let bce = summe_softmin_bce(tape, prob, &labels, loss.tau_sm)?;
    let kl = kl_standard_normal(tape, out.head.mu_z, out.head.log_var_z)?;
    let a = tape.add(nll, bce)?;
    tape.add(a, kl)
}

/// Loss parts and parameter gradients of one video.
pub fn video_gradients(
    params: &ParamStore,
    model: &ModelConfig,
    loss: &LossConfig,
    mode: DatasetMode,
    video: &VideoRecord,
    draws: &VideoDraws,
    lambdas: &Lambdas,
) -> Result<(LossParts, GradientSet)> {
    let mut tape = Tape::new();
    let p = tape.bind(params);
    let (total, vars) = video_objective(&mut tape, &p, model, loss, mode, video, draws, lambdas)?;
    let grads = tape.gradients(total, params)?;
    Ok((vars.parts(&tape), grads))
}

/// One epoch's row of the training log.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochReport {
    /// Loss terms averaged over the epoch's videos.
    pub losses: LossBreakdown,
    /// Largest global gradient norm before clipping.
    pub max_grad_norm: f64,
    /// Largest global gradient norm after clipping.
    pub max_clipped_norm: f64,
    pub val_rho: Option<f64>,
}

impl EpochReport {
    pub const CSV_HEADER: [&'static str; 12] = [
        "epoch",
        "main",
        "rank",
        "stab",
        "kl",
        "total",
        "lambda_rank",
        "lambda_stab",
        "lambda_kl",
        "max_grad_norm",
        "max_clipped_norm",
        "val_rho",
    ];

    pub fn csv_record(&self) -> Vec<String> {
        let l = &self.losses;
        vec![
            l.epoch.to_string(),
            l.main.to_string(),
            l.rank.to_string(),
            l.stab.to_string(),
            l.kl.to_string(),
            l.total.to_string(),
            l.lambda_rank.to_string(),
            l.lambda_stab.to_string(),
            l.lambda_kl.to_string(),
            self.max_grad_norm.to_string(),
            self.max_clipped_norm.to_string(),
            self.val_rho.map_or_else(String::new, |r| r.to_string()),
        ]
    }
}

pub fn log_to_csv(log: &[EpochReport]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(EpochReport::CSV_HEADER)?;
    for r in log {
        w.write_record(r.csv_record())?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

#[derive(Debug, Clone, PartialEq)]
pub struct BestCheckpoint {
    pub epoch: usize,
    pub val_rho: f64,
    pub params: ParamStore,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: ParamStore,
    pub log: Vec<EpochReport>,
    /// Highest validation Spearman rho, when validation videos were given.
    pub best: Option<BestCheckpoint>,
}

/// Mean validation Spearman rho under the dataset's own protocol.
pub fn validation_rho(params: &ParamStore, model: &ModelConfig, data: &Dataset) -> Result<Option<f64>> {
    let preds = data
        .videos
        .iter()
        .map(|v| {
            Ok(infer(params, model, &v.features, &v.segments)?
                .scores(data.mode)
                .to_vec())
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(evaluate_records(data.mode, &data.videos, &preds)?.mean_rho)
}

pub struct Trainer<'a> {
    pub model: &'a ModelConfig,
    pub loss: &'a LossConfig,
    pub train: &'a TrainConfig,
    /// Worker threads for per-video gradients; results are reduced in order.
    pub threads: usize,
}

impl<'a> Trainer<'a> {
    pub fn new(model: &'a ModelConfig, loss: &'a LossConfig, train: &'a TrainConfig) -> Self {
        Self {
            model,
            loss,
            train,
            threads: 1,
        }
    }

    pub fn with_threads(mut self, threads: usize) -> Self {
        self.threads = threads.max(1);
        self
    }

    fn check(&self, data: &Dataset) -> Result<()> {
        self.model.validate()?;
        self.loss.validate()?;
        self.train.validate()?;
        if data.mode != self.train.mode {
            return Err(Error::config(format!(
                "training mode {} does not match {} annotations",
                self.train.mode, data.mode
            )));
        }
        if data.feature_dim() != self.model.scorer.input_dim {
            return Err(Error::config(format!(
                "features have dimension {}, model expects {}",
                data.feature_dim(),
                self.model.scorer.input_dim
            )));
        }
        Ok(())
    }

    /// Averages the window's gradients in order, clips, and steps.
    /// Returns the loss parts and the pre- and post-clip norms.
    pub fn step_window(
        &self,
        pool: &rayon::ThreadPool,
        params: &mut ParamStore,
        opt: &mut AdamW,
        window: &[(&VideoRecord, VideoDraws)],
        lambdas: &Lambdas,
    ) -> Result<(Vec<LossParts>, f64, f64)> {
        let (model, loss, mode) = (self.model, self.loss, self.train.mode);
        let snapshot: &ParamStore = params;
        let results: Vec<Result<(LossParts, GradientSet)>> = pool.install(|| {
            window
                .par_iter()
                .map(|(video, draws)| video_gradients(snapshot, model, loss, mode, video, draws, lambdas))
                .collect()
        });
        let mut parts = Vec::with_capacity(window.len());
        let mut grads = Vec::with_capacity(window.len());
        for r in results {
            let (p, g) = r?;
            parts.push(p);
            grads.push(g);
        }
        let mut mean = GradientSet::mean_of(&grads).ok_or_else(|| Error::invalid("empty accumulation window"))?;
        let before = clip_global_norm(&mut mean, self.train.clip_norm)?;
        let after = mean.global_norm();
        opt.step(params, &mean)?;
        Ok((parts, before, after))
    }

    pub fn thread_pool(&self) -> Result<rayon::ThreadPool> {
        rayon::ThreadPoolBuilder::new()
            .num_threads(self.threads)
            .build()
            .map_err(|e| Error::config(format!("cannot start worker pool: {e}")))
    }

    /// Trains from a fresh initialization; `on_epoch` sees every epoch's
    /// report and parameters (for checkpointing).
    pub fn run(
        &self,
        data: &Dataset,
        validation: Option<&Dataset>,
        mut on_epoch: impl FnMut(&EpochReport, &ParamStore) -> Result<()>,
    ) -> Result<TrainOutcome> {
        self.check(data)?;
        if let Some(v) = validation {
            if v.mode != data.mode {
                return Err(Error::config("validation videos use a different annotation mode"));
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.train.seed);
        let mut params = self.model.init_params(&mut rng);
        let mut opt = AdamW::new(self.train.adamw(), &params);
        let pool = self.thread_pool()?;
        let mut log = Vec::with_capacity(self.train.epochs);
        let mut best: Option<BestCheckpoint> = None;

        for epoch in 0..self.train.epochs {
            let lambdas = self.loss.lambdas(epoch);
            let mut order: Vec<usize> = (0..data.len()).collect();
            rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut rng);
            let mut sums = LossParts::default();
            let (mut max_norm, mut max_clipped) = (0.0f64, 0.0f64);
            for chunk in order.chunks(self.train.accumulate) {
                let window = chunk
                    .iter()
                    .map(|&i| {
                        let v = &data.videos[i];
                        Ok((v, VideoDraws::sample(&mut rng, v, self.model, self.loss)?))
                    })
                    .collect::<Result<Vec<_>>>()?;
                let (parts, before, after) = self.step_window(&pool, &mut params, &mut opt, &window, &lambdas)?;
                for p in parts {
                    sums.main += p.main;
                    sums.rank += p.rank;
                    sums.stab += p.stab;
                    sums.kl += p.kl;
                }
                max_norm = max_norm.max(before);
                max_clipped = max_clipped.max(after);
            }
            let n = data.len() as f64;
            let mean = LossParts {
                main: sums.main / n,
                rank: sums.rank / n,
                stab: sums.stab / n,
                kl: sums.kl / n,
            };
            let val_rho = match validation {
                Some(v) => validation_rho(&params, self.model, v)?,
                None => None,
            };
            if let Some(r) = val_rho {
                if best.as_ref().map_or(true, |b| r > b.val_rho) {
                    best = Some(BestCheckpoint {
                        epoch,
                        val_rho: r,
                        params: params.clone(),
                    });
                }
            }
            let report = EpochReport {
                losses: total_loss(mean, epoch, self.loss),
                max_grad_norm: max_norm,
                max_clipped_norm: max_clipped,
                val_rho,
            };
            on_epoch(&report, &params)?;
            log.push(report);
        }
        Ok(TrainOutcome { params, log, best })
    }
}
