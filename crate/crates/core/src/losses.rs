//! Training objectives.
//!
//! Differentiable terms are recorded on a [`Tape`]; selection logic that must
//! not be differentiated (ranking targets, knapsack re-solves) runs on plain
//! values.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::data::DatasetMode;
use crate::decoder::{knapsack_select, SegmentKnapsackInstance};
use crate::error::{Error, Result};

/// Probabilities are clamped to `[P_CLAMP, 1 - P_CLAMP]` before any log.
pub const P_CLAMP: f64 = 1e-7;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    /// NLL variance stabilizer.
    pub epsilon: f64,
    /// Soft-min temperature.
    pub tau_sm: f64,
    pub margin_rank: f64,
    pub margin_stab: f64,
    /// Standard deviation of stability perturbations.
    pub sigma_perturb: f64,
    /// Perturbed re-solves per video and step.
    pub perturbations: usize,
    /// Index pairs drawn per video and step for the ranking loss.
    pub n_pairs: usize,
    /// Summary budget used by the stability re-solves.
    pub budget: f64,
    pub lambda_rank: f64,
    pub lambda_stab: f64,
    pub lambda_kl: f64,
    pub warmup_rank: usize,
    pub warmup_stab: usize,
    pub warmup_kl: usize,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            epsilon: 1e-6,
            tau_sm: 0.1,
            margin_rank: 0.05,
            margin_stab: 0.05,
            sigma_perturb: 0.05,
            perturbations: 8,
            n_pairs: 256,
            budget: crate::decoder::DEFAULT_BUDGET,
            lambda_rank: 0.5,
            lambda_stab: 0.5,
            lambda_kl: 0.01,
            warmup_rank: 10,
            warmup_stab: 10,
            warmup_kl: 10,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("loss.epsilon", self.epsilon),
            ("loss.tau_sm", self.tau_sm),
            ("loss.budget", self.budget),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::config(format!("{name} must be positive, got {v}")));
            }
        }
        let non_negative = [
            ("loss.margin_rank", self.margin_rank),
            ("loss.margin_stab", self.margin_stab),
            ("loss.sigma_perturb", self.sigma_perturb),
            ("loss.lambda_rank", self.lambda_rank),
            ("loss.lambda_stab", self.lambda_stab),
            ("loss.lambda_kl", self.lambda_kl),
        ];
        for (name, v) in non_negative {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::config(format!("{name} must be non-negative, got {v}")));
            }
        }
        if self.budget > 1.0 {
            return Err(Error::config(format!(
                "loss.budget must be at most 1, got {}",
                self.budget
            )));
        }
        if self.perturbations == 0 || self.n_pairs == 0 {
            return Err(Error::config("loss.perturbations and loss.n_pairs must be at least 1"));
        }
        Ok(())
    }

    pub fn lambdas(&self, epoch: usize) -> Lambdas {
        Lambdas {
            rank: warmup_lambda(self.lambda_rank, self.warmup_rank, epoch),
            stab: warmup_lambda(self.lambda_stab, self.warmup_stab, epoch),
            kl: warmup_lambda(self.lambda_kl, self.warmup_kl, epoch),
        }
    }
}

/// `target * min(1, (epoch + 1) / warmup)`; a zero warm-up gives `target`.
pub fn warmup_lambda(target: f64, warmup: usize, epoch: usize) -> f64 {
    if warmup == 0 || epoch + 1 >= warmup {
        target
    } else {
        target * ((epoch + 1) as f64 / warmup as f64)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Lambdas {
    pub rank: f64,
    pub stab: f64,
    pub kl: f64,
}

/// Unweighted loss terms of one step.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossParts {
    pub main: f64,
    pub rank: f64,
    pub stab: f64,
    pub kl: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub epoch: usize,
    pub main: f64,
    pub rank: f64,
    pub stab: f64,
    pub kl: f64,
    pub total: f64,
    pub lambda_rank: f64,
    pub lambda_stab: f64,
    pub lambda_kl: f64,
}

fn weighted_total(parts: &LossParts, l: &Lambdas) -> f64 {
    parts.main + l.rank * parts.rank + l.stab * parts.stab + l.kl * parts.kl
}

pub fn total_loss(parts: LossParts, epoch: usize, cfg: &LossConfig) -> LossBreakdown {
    let l = cfg.lambdas(epoch);
    LossBreakdown {
        epoch,
        main: parts.main,
        rank: parts.rank,
        stab: parts.stab,
        kl: parts.kl,
        total: weighted_total(&parts, &l),
        lambda_rank: l.rank,
        lambda_stab: l.stab,
        lambda_kl: l.kl,
    }
}

/// Tape handles of the four loss terms.
#[derive(Debug, Clone, Copy)]
pub struct LossVars {
    pub main: Var,
    pub rank: Var,
    pub stab: Var,
    pub kl: Var,
}

impl LossVars {
    pub fn parts(&self, tape: &Tape) -> LossParts {
        LossParts {
            main: tape.scalar(self.main),
            rank: tape.scalar(self.rank),
            stab: tape.scalar(self.stab),
            kl: tape.scalar(self.kl),
        }
    }
}

/// Records `main + l_rank rank + l_stab stab + l_kl kl`, in that order.
pub fn compose_total(tape: &mut Tape, vars: &LossVars, l: &Lambdas) -> Result<Var> {
    let mut total = vars.main;
    for (var, w) in [(vars.rank, l.rank), (vars.stab, l.stab), (vars.kl, l.kl)] {
        let term = tape.scale(var, w);
        total = tape.add(total, term)?;
    }
    Ok(total)
}

fn check_annotations(op: &'static str, annotations: &Array2<f64>, t_len: usize) -> Result<()> {
    if annotations.nrows() == 0 {
        return Err(Error::invalid(format!("{op}: at least one annotator is required")));
    }
    if annotations.ncols() != t_len {
        return Err(Error::shape(
            op,
            format!("annotations have {} columns for {t_len} timesteps", annotations.ncols()),
        ));
    }
    Ok(())
}

/// Multi-annotator Gaussian NLL
/// `1/(U T) sum_a sum_t 0.5 (log v_t + (s_t^a - mu_t)^2 / (v_t + eps))`.
///
/// `mu` and `log_v` are `T x 1`; `annotations` is `U x T`.
pub fn tvsum_nll(tape: &mut Tape, mu: Var, log_v: Var, annotations: &Array2<f64>, epsilon: f64) -> Result<Var> {
    let t_len = tape.value(mu).nrows();
    check_annotations("tvsum_nll", annotations, t_len)?;
    let u = annotations.nrows();
    let targets = tape.constant(annotations.t().to_owned());
    let resid = tape.sub(targets, mu)?;
    let sq = tape.square(resid);
    let var = tape.exp(log_v);
    let denom = tape.shift(var, epsilon);
    let scaled = tape.div(sq, denom)?;
    let summed = tape.sum(scaled);
    let log_sum = tape.sum(log_v);
    let log_total = tape.scale(log_sum, u as f64);
    let inner = tape.add(summed, log_total)?;
    Ok(tape.scale(inner, 0.5 / (u * t_len) as f64))
}

/// Mean binary cross-entropy of clamped probabilities `p` against each label row.
pub fn bce_per_annotator(p: &[f64], labels: &Array2<f64>) -> Result<Vec<f64>> {
    check_annotations("bce", labels, p.len())?;
    let t_len = p.len() as f64;
    Ok(labels
        .rows()
        .into_iter()
        .map(|row| {
            let s: f64 = row
                .iter()
                .zip(p)
                .map(|(&y, &pt)| {
                    let pc = pt.clamp(P_CLAMP, 1.0 - P_CLAMP);
                    y * pc.ln() + (1.0 - y) * (1.0 - pc).ln()
                })
                .sum();
            -s / t_len
        })
        .collect())
}

/// `-tau log sum_a exp(-x_a / tau)`, shifted by `min_a x_a` for stability.
pub fn soft_min(values: &[f64], tau: f64) -> Result<f64> {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    if values.is_empty() || !lo.is_finite() || !(tau > 0.0) {
        return Err(Error::invalid(
            "soft_min needs finite values and a positive temperature",
        ));
    }
    let s: f64 = values.iter().map(|&x| (-(x - lo) / tau).exp()).sum();
    Ok(lo - tau * s.ln())
}

/// Soft-min over annotators of the per-annotator BCE.
///
/// `p` is `T x 1`; `annotations` is `U x T` with binary entries.
pub fn summe_softmin_bce(tape: &mut Tape, p: Var, annotations: &Array2<f64>, tau_sm: f64) -> Result<Var> {
    let t_len = tape.value(p).nrows();
    check_annotations("summe_softmin_bce", annotations, t_len)?;
    if !(tau_sm > 0.0) {
        return Err(Error::config(format!("tau_sm must be positive, got {tau_sm}")));
    }
    let pc = tape.clip(p, P_CLAMP, 1.0 - P_CLAMP)?;
    let log_p = tape.log(pc);
    let neg = tape.scale(pc, -1.0);
    let one_minus = tape.shift(neg, 1.0);
    let log_q = tape.log(one_minus);
    let pos = tape.constant(annotations.clone());
    let negl = tape.constant(annotations.mapv(|y| 1.0 - y));
    let a = tape.matmul(pos, log_p)?;
    let b = tape.matmul(negl, log_q)?;
    let ll = tape.add(a, b)?;
    let bce = tape.scale(ll, -1.0 / t_len as f64);

    // The shift is a constant: the soft-min is exactly invariant to it.
    let lo = tape.value(bce).iter().copied().fold(f64::INFINITY, f64::min);
    let shifted = tape.shift(bce, -lo);
    let scaled = tape.scale(shifted, -1.0 / tau_sm);
    let e = tape.exp(scaled);
    let s = tape.sum(e);
    let log_s = tape.log(s);
    let out = tape.scale(log_s, -tau_sm);
    Ok(tape.shift(out, lo))
}

/// Hinge `mean max(0, m - (q_i - q_j))` over pairs with `r_i > r_j`.
///
/// `q` is `T x 1`; pairs failing the strict filter are dropped, and no
/// surviving pair gives 0.
pub fn ranking_hinge(tape: &mut Tape, q: Var, r: &[f64], pairs: &[(usize, usize)], margin: f64) -> Result<Var> {
    let t_len = tape.value(q).nrows();
    if r.len() != t_len {
        return Err(Error::shape(
            "ranking_hinge",
            format!("{} targets for {t_len} scores", r.len()),
        ));
    }
    let (hi, lo): (Vec<usize>, Vec<usize>) = pairs
        .iter()
        .filter(|&&(i, j)| i < t_len && j < t_len && r[i] > r[j])
        .copied()
        .unzip();
    if hi.is_empty() {
        return Ok(tape.scalar_constant(0.0));
    }
    let qi = tape.gather_rows(q, &hi)?;
    let qj = tape.gather_rows(q, &lo)?;
    let diff = tape.sub(qi, qj)?;
    let neg = tape.scale(diff, -1.0);
    let gap = tape.shift(neg, margin);
    let hinge = tape.relu(gap);
    Ok(tape.mean(hinge))
}

/// Which model output the ranking loss compares.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RankingScore {
    /// Importance logits `mu`.
    Logit,
    /// Calibrated probabilities `p`.
    Probability,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RankingTargets {
    pub score: RankingScore,
    pub r: Vec<f64>,
    /// Annotator whose labels were chosen (SumMe only).
    pub annotator: Option<usize>,
}

/// TVSum ranks `mu` against the annotator mean; SumMe ranks `p` against the
/// labels of the annotator with the smallest BCE (lowest index on ties).
pub fn select_ranking_targets(mode: DatasetMode, p: &[f64], annotations: &Array2<f64>) -> Result<RankingTargets> {
    check_annotations("select_ranking_targets", annotations, p.len())?;
    match mode {
        DatasetMode::Tvsum => {
            let r = annotations
                .mean_axis(ndarray::Axis(0))
                .expect("at least one annotator")
                .to_vec();
            Ok(RankingTargets {
                score: RankingScore::Logit,
                r,
                annotator: None,
            })
        }
        DatasetMode::Summe => {
            let bce = bce_per_annotator(p, annotations)?;
            let mut best = 0;
            for (a, &b) in bce.iter().enumerate() {
                if b < bce[best] {
                    best = a;
                }
            }
            Ok(RankingTargets {
                score: RankingScore::Probability,
                r: annotations.row(best).to_vec(),
                annotator: Some(best),
            })
        }
    }
}

/// `1/T sum_t sum_d 0.5 (mu^2 + sigma^2 - 1 - log sigma^2)`.
pub fn kl_standard_normal(tape: &mut Tape, mu_z: Var, log_var_z: Var) -> Result<Var> {
    let t_len = tape.value(mu_z).nrows();
    let mu_sq = tape.square(mu_z);
    let var = tape.exp(log_var_z);
    let a = tape.add(mu_sq, var)?;
    let b = tape.sub(a, log_var_z)?;
    let c = tape.shift(b, -1.0);
    let s = tape.sum(c);
    Ok(tape.scale(s, 0.5 / t_len.max(1) as f64))
}

/// Knapsack membership diagnostics behind the stability loss.
#[derive(Debug, Clone, PartialEq)]
pub struct InstabilitySets {
    pub base: Vec<bool>,
    /// Segments whose perturbed membership frequency lies strictly inside (0, 1).
    pub unstable: Vec<usize>,
}

pub fn instability_sets(
    scores: &[f64],
    weights: &[usize],
    capacity: usize,
    noise: &Array2<f64>,
) -> Result<InstabilitySets> {
    let m = scores.len();
    if noise.ncols() != m {
        return Err(Error::shape(
            "stability",
            format!("noise has {} columns for {m} segments", noise.ncols()),
        ));
    }
    if noise.nrows() == 0 {
        return Err(Error::invalid("stability: at least one perturbation is required"));
    }
    let base_inst = SegmentKnapsackInstance::new(scores.to_vec(), weights.to_vec(), capacity)?;
    let base = knapsack_select(&base_inst);
    let mut counts = vec![0usize; m];
    for row in noise.rows() {
        let perturbed: Vec<f64> = scores.iter().zip(row).map(|(s, e)| s + e).collect();
        let inst = SegmentKnapsackInstance::new(perturbed, weights.to_vec(), capacity)?;
        for (k, &u) in knapsack_select(&inst).iter().enumerate() {
            counts[k] += usize::from(u);
        }
    }
    let r = noise.nrows();
    let unstable = (0..m).filter(|&k| counts[k] > 0 && counts[k] < r).collect();
    Ok(InstabilitySets { base, unstable })
}

/// Margin loss pushing unstable segments away from the selection boundary.
///
/// `scores` is the `M x 1` segment-score node; `noise` holds `R x M`
/// perturbations. Selections are re-solved on plain values and gradients
/// reach only the gathered scores.
pub fn stability_loss(
    tape: &mut Tape,
    scores: Var,
    weights: &[usize],
    capacity: usize,
    margin: f64,
    noise: &Array2<f64>,
) -> Result<Var> {
    let s = tape.column(scores);
    let sets = instability_sets(&s, weights, capacity, noise)?;
    let selected: Vec<usize> = (0..s.len()).filter(|&k| sets.base[k]).collect();
    let rejected: Vec<usize> = (0..s.len()).filter(|&k| !sets.base[k]).collect();
    let mut total = tape.scalar_constant(0.0);
    if selected.is_empty() || rejected.is_empty() {
        return Ok(total);
    }
    let best_rejected = argmax(&s, &rejected);
    let worst_selected = argmin(&s, &selected);
    let unstable_in: Vec<usize> = sets.unstable.iter().copied().filter(|&k| sets.base[k]).collect();
    let unstable_out: Vec<usize> = sets.unstable.iter().copied().filter(|&k| !sets.base[k]).collect();

    if !unstable_in.is_empty() {
        let sk = tape.gather_rows(scores, &unstable_in)?;
        let sj = tape.gather_rows(scores, &[best_rejected])?;
        let gap = tape.sub(sk, sj)?;
        let term = margin_hinge(tape, gap, margin);
        total = tape.add(total, term)?;
    }
    if !unstable_out.is_empty() {
        let sk = tape.gather_rows(scores, &unstable_out)?;
        let si = tape.gather_rows(scores, &[worst_selected])?;
        let gap = tape.sub(si, sk)?;
        let term = margin_hinge(tape, gap, margin);
        total = tape.add(total, term)?;
    }
    Ok(total)
}

fn margin_hinge(tape: &mut Tape, gap: Var, margin: f64) -> Var {
    let neg = tape.scale(gap, -1.0);
    let shifted = tape.shift(neg, margin);
    let h = tape.relu(shifted);
    tape.mean(h)
}

fn argmax(s: &[f64], idx: &[usize]) -> usize {
    idx.iter().copied().fold(idx[0], |b, k| if s[k] > s[b] { k } else { b })
}

fn argmin(s: &[f64], idx: &[usize]) -> usize {
    idx.iter().copied().fold(idx[0], |b, k| if s[k] < s[b] { k } else { b })
}
