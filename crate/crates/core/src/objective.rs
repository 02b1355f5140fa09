//! Losses, the Adam optimizer and the cosine warm-restart schedule.
//!
//! Scalar functions here evaluate finished predictions; the `*_var` variants
//! build the same quantities on a [`Tape`] for training.

use std::f64::consts::PI;

use bat_autodiff::{Tape, Var};
use indexmap::IndexMap;

use crate::geometry::{CartPoint, PolarPoint};
use crate::model::{GaussianParams, ManeuverClass, MultimodalPrediction};
use crate::nn::ParamStore;
use crate::{CoreError, Result};

pub const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub alpha_rmse: f64,
    pub beta_ce: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha_rmse: 1.0,
            beta_ce: 1.0,
        }
    }
}

/// Negative log density of a correlated bivariate normal over `(rho, theta)`.
pub fn bivariate_nll(params: &GaussianParams, truth: PolarPoint) -> Result<f64> {
    let values = [
        params.mu_rho,
        params.mu_theta,
        params.sigma_rho,
        params.sigma_theta,
        params.corr,
        truth.rho,
        truth.theta,
    ];
    if values.iter().any(|v| !v.is_finite()) {
        return Err(CoreError::NonFinite("bivariate_nll input".into()));
    }
    let zr = (truth.rho - params.mu_rho) / params.sigma_rho;
    let zt = (truth.theta - params.mu_theta) / params.sigma_theta;
    let one_minus = 1.0 - params.corr * params.corr;
    let q = (zr * zr + zt * zt - 2.0 * params.corr * zr * zt) / one_minus;
    Ok(LN_2PI + params.sigma_rho.ln() + params.sigma_theta.ln() + 0.5 * one_minus.ln() + 0.5 * q)
}

/// Mean step NLL of the labeled maneuver's component minus the log
/// probability of that maneuver.
pub fn sequence_nll(pred: &MultimodalPrediction, truth: &[PolarPoint], label: usize) -> Result<f64> {
    if label >= ManeuverClass::COUNT {
        return Err(CoreError::InvalidInput(format!("maneuver label {label} outside 0..9")));
    }
    let mode = &pred.modes[label];
    if mode.len() != truth.len() || truth.is_empty() {
        return Err(CoreError::InvalidInput(format!(
            "{} predicted steps for {} truth steps",
            mode.len(),
            truth.len()
        )));
    }
    let mut total = 0.0;
    for (g, &t) in mode.iter().zip(truth) {
        total += bivariate_nll(g, t)?;
    }
    Ok(total / truth.len() as f64 - pred.maneuver_probs[label].max(f64::MIN_POSITIVE).ln())
}

/// Root mean squared Euclidean error across scenes at one horizon.
pub fn rmse(pred: &[CartPoint], truth: &[CartPoint]) -> Result<f64> {
    if pred.len() != truth.len() {
        return Err(CoreError::InvalidInput(format!(
            "{} predictions for {} truths",
            pred.len(),
            truth.len()
        )));
    }
    if pred.is_empty() {
        return Err(CoreError::Empty("rmse over zero scenes".into()));
    }
    let sq: f64 = pred
        .iter()
        .zip(truth)
        .map(|(p, t)| (p.x - t.x).powi(2) + (p.y - t.y).powi(2))
        .sum();
    Ok((sq / pred.len() as f64).sqrt())
}

/// Factorised cross-entropy: lateral CE plus longitudinal CE.
pub fn maneuver_ce(lateral: &[f64; 3], longitudinal: &[f64; 3], label: ManeuverClass) -> Result<f64> {
    for probs in [lateral, longitudinal] {
        let total: f64 = probs.iter().sum();
        if probs.iter().any(|p| !(p.is_finite() && *p >= 0.0)) || (total - 1.0).abs() > 1e-6 {
            return Err(CoreError::InvalidInput(format!("{probs:?} is not a probability vector")));
        }
    }
    let lat = lateral[label.lateral as usize].max(f64::MIN_POSITIVE);
    let lon = longitudinal[label.longitudinal as usize].max(f64::MIN_POSITIVE);
    Ok(-lat.ln() - lon.ln())
}

/// Tape handles of per-row Gaussian parameters; every var is `[n x 1]`.
#[derive(Debug, Clone, Copy)]
pub struct GaussianVars {
    pub mu_rho: Var,
    pub mu_theta: Var,
    pub sigma_rho: Var,
    pub sigma_theta: Var,
    pub corr: Var,
}

/// Elementwise bivariate NLL, `[n x 1]`.
pub fn bivariate_nll_var(tape: &mut Tape, g: &GaussianVars, rho: Var, theta: Var) -> Result<Var> {
    let dr = tape.sub(rho, g.mu_rho)?;
    let zr = tape.div(dr, g.sigma_rho)?;
    let dt = tape.sub(theta, g.mu_theta)?;
    let zt = tape.div(dt, g.sigma_theta)?;
    let zr2 = tape.square(zr);
    let zt2 = tape.square(zt);
    let cross = tape.mul(zr, zt)?;
    let cross = tape.mul(cross, g.corr)?;
    let cross = tape.scale(cross, -2.0);
    let q = tape.add(zr2, zt2)?;
    let q = tape.add(q, cross)?;
    let c2 = tape.square(g.corr);
    let one_minus = tape.neg(c2);
    let one_minus = tape.add_scalar(one_minus, 1.0);
    let q = tape.div(q, one_minus)?;
    let half_q = tape.scale(q, 0.5);
    let log_sr = tape.log(g.sigma_rho);
    let log_st = tape.log(g.sigma_theta);
    let log_om = tape.log(one_minus);
    let half_log_om = tape.scale(log_om, 0.5);
    let s = tape.add(log_sr, log_st)?;
    let s = tape.add(s, half_log_om)?;
    let s = tape.add(s, half_q)?;
    Ok(tape.add_scalar(s, LN_2PI))
}

/// Squared Cartesian distance between the polar means and a target, `[n x 1]`.
pub fn squared_displacement_var(tape: &mut Tape, g: &GaussianVars, x: Var, y: Var) -> Result<Var> {
    let c = tape.cos(g.mu_theta);
    let s = tape.sin(g.mu_theta);
    let px = tape.mul(g.mu_rho, c)?;
    let py = tape.mul(g.mu_rho, s)?;
    let dx = tape.sub(px, x)?;
    let dy = tape.sub(py, y)?;
    let dx2 = tape.square(dx);
    let dy2 = tape.square(dy);
    Ok(tape.add(dx2, dy2)?)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam moments keyed by parameter name.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub config: AdamConfig,
    pub step: u64,
    pub m: IndexMap<String, Vec<f64>>,
    pub v: IndexMap<String, Vec<f64>>,
}

impl OptimizerState {
    pub fn new(store: &ParamStore, config: AdamConfig) -> Self {
        let zeros: IndexMap<String, Vec<f64>> = store
            .iter()
            .map(|(k, t)| (k.to_string(), vec![0.0; t.len()]))
            .collect();
        Self {
            config,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// One bias-corrected Adam update. Parameters without a gradient entry are
    /// treated as having zero gradient. Nothing is modified if any gradient is
    /// non-finite.
    pub fn adam_step(&mut self, store: &mut ParamStore, grads: &IndexMap<String, Vec<f64>>, lr: f64) -> Result<()> {
        for (name, g) in grads {
            let expected = store
                .get(name)
                .ok_or_else(|| CoreError::UnknownParameter(name.clone()))?
                .len();
            if g.len() != expected {
                return Err(CoreError::InvalidInput(format!(
                    "gradient for {name} has {} values, parameter has {expected}",
                    g.len()
                )));
            }
            if let Some(bad) = g.iter().position(|v| !v.is_finite()) {
                return Err(CoreError::NonFinite(format!("gradient of {name}[{bad}]")));
            }
        }
        self.step += 1;
        let AdamConfig { beta1, beta2, eps } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for (name, param) in store.iter_mut() {
            let Some(g) = grads.get(name) else {
                // Moments still decay so a later gradient sees consistent state.
                if let (Some(m), Some(v)) = (self.m.get_mut(name), self.v.get_mut(name)) {
                    m.iter_mut().for_each(|x| *x *= beta1);
                    v.iter_mut().for_each(|x| *x *= beta2);
                }
                continue;
            };
            let m = self.m.entry(name.to_string()).or_insert_with(|| vec![0.0; g.len()]);
            let v = self.v.entry(name.to_string()).or_insert_with(|| vec![0.0; g.len()]);
            for (((p, &gi), mi), vi) in param.data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = beta1 * *mi + (1.0 - beta1) * gi;
                *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
                let m_hat = *mi / bc1;
                let v_hat = *vi / bc2;
                *p -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Cosine annealing with warm restarts to a zero floor. `epoch` may be
/// fractional; cycle lengths are `t0, t0*t_mult, ...`.
pub fn cosine_warm_restart_lr(base_lr: f64, epoch: f64, t0: f64, t_mult: f64) -> f64 {
    assert!(t0 >= 1.0 && t_mult >= 1.0, "t0 >= 1 and t_mult >= 1 required");
    let mut t_cur = epoch.max(0.0);
    let mut t_i = t0;
    while t_cur >= t_i {
        t_cur -= t_i;
        t_i *= t_mult;
    }
    base_lr * 0.5 * (1.0 + (PI * t_cur / t_i).cos())
}
