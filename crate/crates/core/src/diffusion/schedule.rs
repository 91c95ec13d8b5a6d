//! Linear-beta noise schedule with forward noising, Tweedie and DDIM updates.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    pub t_train: usize,
    pub beta_lo: f64,
    pub beta_hi: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            t_train: 1000,
            beta_lo: 1e-4,
            beta_hi: 2e-2,
        }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<NoiseSchedule> {
        make_schedule(self.t_train, self.beta_lo, self.beta_hi)
    }
}

/// Cumulative signal coefficients `alphabar[0..=T]` with `alphabar[0] = 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    alphabar: Vec<f64>,
    betas: Vec<f64>,
}

pub fn make_schedule(t_train: usize, beta_lo: f64, beta_hi: f64) -> Result<NoiseSchedule> {
    if t_train == 0 {
        return Err(Error::InvalidArgument("t_train must be >= 1".into()));
    }
    if !(0.0 < beta_lo && beta_lo <= beta_hi && beta_hi < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "need 0 < beta_lo <= beta_hi < 1, got {beta_lo}, {beta_hi}"
        )));
    }
    let mut betas = Vec::with_capacity(t_train + 1);
    betas.push(0.0);
    let mut alphabar = Vec::with_capacity(t_train + 1);
    alphabar.push(1.0);
    for s in 1..=t_train {
        let frac = if t_train == 1 {
            0.0
        } else {
            (s - 1) as f64 / (t_train - 1) as f64
        };
        let beta = beta_lo + (beta_hi - beta_lo) * frac;
        betas.push(beta);
        alphabar.push(alphabar[s - 1] * (1.0 - beta));
    }
    Ok(NoiseSchedule { alphabar, betas })
}

impl NoiseSchedule {
    pub fn t_train(&self) -> usize {
        self.alphabar.len() - 1
    }

    pub fn alphabar(&self, t: usize) -> f64 {
        self.alphabar[t]
    }

    pub fn alphabars(&self) -> &[f64] {
        &self.alphabar
    }

    /// `betas()[0]` is a placeholder 0; `betas()[s]` for `s >= 1` is the schedule.
    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t > self.t_train() {
            return Err(Error::InvalidArgument(format!(
                "timestep {t} outside 0..={}",
                self.t_train()
            )));
        }
        Ok(())
    }

    /// Uniform reverse grid of `n_steps` timesteps from `T` down to `T / n_steps`;
    /// the step after the last one lands on 0.
    pub fn ddim_timesteps(&self, n_steps: usize) -> Result<Vec<usize>> {
        let t = self.t_train();
        if n_steps == 0 || n_steps > t {
            return Err(Error::InvalidArgument(format!(
                "n_steps must be in 1..={t}, got {n_steps}"
            )));
        }
        Ok((0..n_steps)
            .map(|k| ((t * (n_steps - k)) as f64 / n_steps as f64).round() as usize)
            .collect())
    }
}

fn same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!("{what}: {:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

/// `z_t = sqrt(abar_t) z0 + sqrt(1 - abar_t) eps`.
pub fn forward_noise(z0: &Tensor, t: usize, eps: &Tensor, s: &NoiseSchedule) -> Result<Tensor> {
    s.check_t(t)?;
    same_shape(z0, eps, "forward_noise")?;
    if t == 0 {
        return Ok(z0.clone());
    }
    let (a, b) = (s.alphabar(t).sqrt(), (1.0 - s.alphabar(t)).sqrt());
    Ok(z0.zip_map(eps, |z, e| a * z + b * e))
}

/// Clean-sample estimate `(z_t - sqrt(1 - abar_t) eps_hat) / sqrt(abar_t)`.
pub fn tweedie(z_t: &Tensor, t: usize, eps_hat: &Tensor, s: &NoiseSchedule) -> Result<Tensor> {
    s.check_t(t)?;
    if t == 0 {
        return Err(Error::InvalidArgument("tweedie is undefined at t = 0".into()));
    }
    same_shape(z_t, eps_hat, "tweedie")?;
    let (inv_a, b) = (1.0 / s.alphabar(t).sqrt(), (1.0 - s.alphabar(t)).sqrt());
    Ok(z_t.zip_map(eps_hat, |z, e| (z - b * e) * inv_a))
}

/// Graph form of [`tweedie`] with identical arithmetic; `t` must be at least 1.
pub fn tweedie_graph(g: &mut Graph, z_t: Var, t: usize, eps_hat: Var, s: &NoiseSchedule) -> Var {
    assert!(t >= 1 && t <= s.t_train(), "tweedie_graph: t out of range");
    let (a, b) = (s.alphabar(t).sqrt(), (1.0 - s.alphabar(t)).sqrt());
    let scaled = g.scale(eps_hat, b);
    let diff = g.sub(z_t, scaled);
    g.scale(diff, 1.0 / a)
}

/// Deterministic DDIM update to `t_prev`, re-noising the Tweedie estimate with `eps_hat`.
pub fn ddim_step(z_t: &Tensor, t: usize, t_prev: usize, eps_hat: &Tensor, s: &NoiseSchedule) -> Result<Tensor> {
    if t_prev >= t {
        return Err(Error::InvalidArgument(format!(
            "ddim_step needs t_prev < t, got {t_prev} >= {t}"
        )));
    }
    let z0_hat = tweedie(z_t, t, eps_hat, s)?;
    forward_noise(&z0_hat, t_prev, eps_hat, s)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_is_uniform_and_descending() {
        let s = make_schedule(1000, 1e-4, 2e-2).unwrap();
        let grid = s.ddim_timesteps(50).unwrap();
        assert_eq!(grid.len(), 50);
        assert_eq!(grid[0], 1000);
        assert_eq!(grid[1], 980);
        assert_eq!(grid[49], 20);
        assert!(s.ddim_timesteps(0).is_err());
        assert!(s.ddim_timesteps(1001).is_err());
    }

    #[test]
    fn rejects_bad_schedule_and_ordering() {
        assert!(make_schedule(0, 1e-4, 2e-2).is_err());
        assert!(make_schedule(10, 0.0, 2e-2).is_err());
        assert!(make_schedule(10, 0.5, 0.1).is_err());
        assert!(make_schedule(10, 0.1, 1.0).is_err());
        let s = make_schedule(10, 0.01, 0.02).unwrap();
        let z = Tensor::zeros(&[2]);
        assert!(ddim_step(&z, 3, 3, &z, &s).is_err());
        assert!(tweedie(&z, 0, &z, &s).is_err());
        assert!(forward_noise(&z, 11, &z, &s).is_err());
    }
}
