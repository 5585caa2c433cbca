//! Variational frame-importance head.
//!
//! Parameters: `head.posterior.mean.{weight,bias}` and
//! `head.posterior.log_var.{weight,bias}` (d x d_z / 1 x d_z),
//! `head.hidden.{weight,bias}` ((d + d_z) x hidden / 1 x hidden),
//! `head.mean.{weight,bias}` and `head.log_var.{weight,bias}` (hidden x 1 / 1 x 1).

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{sigmoid, BoundParams, Tape, Var};
use crate::error::{Error, Result};
use crate::params::{fan_in_uniform, ParamStore};

/// Clamp range applied to both latent and observation log-variances.
pub const LOG_VAR_MIN: f64 = -10.0;
pub const LOG_VAR_MAX: f64 = 5.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HeadConfig {
    pub latent_dim: usize,
    pub hidden_dim: usize,
    /// Calibration temperature `T_s` of the probability sigmoid.
    pub temperature: f64,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self {
            latent_dim: 16,
            hidden_dim: 128,
            temperature: 1.0,
        }
    }
}

impl HeadConfig {
    pub fn validate(&self) -> Result<()> {
        if self.latent_dim == 0 || self.hidden_dim == 0 {
            return Err(Error::config("head.latent_dim and head.hidden_dim must be at least 1"));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::config(format!(
                "head.temperature must be positive, got {}",
                self.temperature
            )));
        }
        Ok(())
    }

    pub fn init_params<R: Rng + ?Sized>(&self, rng: &mut R, model_dim: usize, store: &mut ParamStore) {
        let (d, dz, hidden) = (model_dim, self.latent_dim, self.hidden_dim);
        store.insert("head.posterior.mean.weight", fan_in_uniform(rng, (d, dz), d));
        store.insert("head.posterior.mean.bias", Array2::zeros((1, dz)));
        store.insert("head.posterior.log_var.weight", fan_in_uniform(rng, (d, dz), d));
        store.insert("head.posterior.log_var.bias", Array2::zeros((1, dz)));
        store.insert("head.hidden.weight", fan_in_uniform(rng, (d + dz, hidden), d + dz));
        store.insert("head.hidden.bias", Array2::zeros((1, hidden)));
        store.insert("head.mean.weight", fan_in_uniform(rng, (hidden, 1), hidden));
        store.insert("head.mean.bias", Array2::zeros((1, 1)));
        store.insert("head.log_var.weight", fan_in_uniform(rng, (hidden, 1), hidden));
        store.insert("head.log_var.bias", Array2::zeros((1, 1)));
    }
}

fn linear(tape: &mut Tape, p: &BoundParams<'_>, prefix: &str, x: Var) -> Result<Var> {
    let y = tape.matmul(x, p.get(&format!("{prefix}.weight")))?;
    tape.add(y, p.get(&format!("{prefix}.bias")))
}

/// Posterior mean and clamped log-variance of the latent, each `T x d_z`.
pub fn posterior_params(tape: &mut Tape, p: &BoundParams<'_>, refined: Var) -> Result<(Var, Var)> {
    let mu_z = linear(tape, p, "head.posterior.mean", refined)?;
    let raw = linear(tape, p, "head.posterior.log_var", refined)?;
    let log_var_z = tape.clip(raw, LOG_VAR_MIN, LOG_VAR_MAX)?;
    Ok((mu_z, log_var_z))
}

/// `z = mu + exp(0.5 log_var) * noise`; `None` noise returns the posterior mean.
pub fn sample_latent(tape: &mut Tape, mu_z: Var, log_var_z: Var, noise: Option<&Array2<f64>>) -> Result<Var> {
    let Some(noise) = noise else {
        return Ok(mu_z);
    };
    if noise.dim() != tape.value(mu_z).dim() {
        return Err(Error::shape(
            "sample_latent",
            format!("noise {:?} vs posterior {:?}", noise.dim(), tape.value(mu_z).dim()),
        ));
    }
    let half = tape.scale(log_var_z, 0.5);
    let sigma = tape.exp(half);
    let eps = tape.constant(noise.clone());
    let jitter = tape.mul(sigma, eps)?;
    tape.add(mu_z, jitter)
}

/// Importance logit `mu` and clamped observation log-variance, each `T x 1`.
pub fn importance_params(tape: &mut Tape, p: &BoundParams<'_>, refined: Var, z: Var) -> Result<(Var, Var)> {
    let joint = tape.concat_cols(refined, z)?;
    let hidden = linear(tape, p, "head.hidden", joint)?;
    let hidden = tape.gelu(hidden);
    let mu = linear(tape, p, "head.mean", hidden)?;
    let raw = linear(tape, p, "head.log_var", hidden)?;
    let log_v = tape.clip(raw, LOG_VAR_MIN, LOG_VAR_MAX)?;
    Ok((mu, log_v))
}

/// `sigmoid(mu / T_s)` on the tape.
pub fn calibrate_var(tape: &mut Tape, mu: Var, temperature: f64) -> Result<Var> {
    check_temperature(temperature)?;
    let scaled = tape.scale(mu, 1.0 / temperature);
    Ok(tape.sigmoid(scaled))
}

/// `p_t = sigmoid(mu_t / T_s)`.
pub fn calibrate_probability(mu: &[f64], temperature: f64) -> Result<Vec<f64>> {
    check_temperature(temperature)?;
    Ok(mu.iter().map(|&m| sigmoid(m * (1.0 / temperature))).collect())
}

fn check_temperature(temperature: f64) -> Result<()> {
    if temperature > 0.0 && temperature.is_finite() {
        Ok(())
    } else {
        Err(Error::config(format!(
            "temperature must be positive, got {temperature}"
        )))
    }
}

/// Tape handles of one head pass.
#[derive(Debug, Clone, Copy)]
pub struct HeadVars {
    pub mu: Var,
    pub log_v: Var,
    pub mu_z: Var,
    pub log_var_z: Var,
    pub z: Var,
}

pub fn run_head(tape: &mut Tape, p: &BoundParams<'_>, refined: Var, noise: Option<&Array2<f64>>) -> Result<HeadVars> {
    let (mu_z, log_var_z) = posterior_params(tape, p, refined)?;
    let z = sample_latent(tape, mu_z, log_var_z, noise)?;
    let (mu, log_v) = importance_params(tape, p, refined, z)?;
    Ok(HeadVars {
        mu,
        log_v,
        mu_z,
        log_var_z,
        z,
    })
}

/// Plain values of a head pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ImportanceOutput {
    pub mu: Vec<f64>,
    pub log_v: Vec<f64>,
    pub mu_z: Array2<f64>,
    pub log_var_z: Array2<f64>,
    pub z: Array2<f64>,
}

impl ImportanceOutput {
    pub fn from_tape(tape: &Tape, vars: &HeadVars) -> Self {
        Self {
            mu: tape.column(vars.mu),
            log_v: tape.column(vars.log_v),
            mu_z: tape.value(vars.mu_z).clone(),
            log_var_z: tape.value(vars.log_var_z).clone(),
            z: tape.value(vars.z).clone(),
        }
    }
}
