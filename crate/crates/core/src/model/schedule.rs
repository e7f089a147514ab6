//! Forward-noising schedule: per-step variances and their cumulative
//! products, plus the closed-form noising operator.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Linear variance schedule over `t ∈ [1, t_train]`, with `ᾱ_0 = 1`.
/// Tables are computed and stored in f64; consumers cast at the point of use.
#[derive(Debug, Clone)]
pub struct NoiseSchedule {
    t_train: usize,
    betas: Vec<f64>,
    alpha_bars: Vec<f64>, // alpha_bars[t] = ∏_{s≤t} (1−β_s), index 0 is 1
}

pub const DEFAULT_T_TRAIN: usize = 1000;
pub const DEFAULT_BETA_MIN: f64 = 1e-4;
pub const DEFAULT_BETA_MAX: f64 = 0.02;

/// Builds the schedule; β interpolates linearly from `beta_min` at t=1 to
/// `beta_max` at t=t_train.
pub fn build_noise_schedule(t_train: usize, beta_min: f64, beta_max: f64) -> Result<NoiseSchedule> {
    if t_train == 0 {
        return Err(Error::Range("schedule needs at least one step".into()));
    }
    if !(beta_min > 0.0 && beta_min <= beta_max && beta_max < 1.0) {
        return Err(Error::Range(format!(
            "schedule bounds must satisfy 0 < beta_min <= beta_max < 1, got {beta_min}..{beta_max}"
        )));
    }
    let mut betas = Vec::with_capacity(t_train);
    for i in 0..t_train {
        let frac = if t_train == 1 {
            0.0
        } else {
            i as f64 / (t_train - 1) as f64
        };
        betas.push(beta_min + (beta_max - beta_min) * frac);
    }
    let mut alpha_bars = Vec::with_capacity(t_train + 1);
    alpha_bars.push(1.0);
    let mut prod = 1.0f64;
    for &b in &betas {
        prod *= 1.0 - b;
        alpha_bars.push(prod);
    }
    Ok(NoiseSchedule {
        t_train,
        betas,
        alpha_bars,
    })
}

impl NoiseSchedule {
    pub fn default_schedule() -> NoiseSchedule {
        build_noise_schedule(DEFAULT_T_TRAIN, DEFAULT_BETA_MIN, DEFAULT_BETA_MAX)
            .expect("default schedule bounds are valid")
    }

    pub fn t_train(&self) -> usize {
        self.t_train
    }

    /// β_t for `t ∈ [1, t_train]`.
    pub fn beta(&self, t: usize) -> Result<f64> {
        if t == 0 || t > self.t_train {
            return Err(Error::Range(format!(
                "beta: t={t} outside [1, {}]",
                self.t_train
            )));
        }
        Ok(self.betas[t - 1])
    }

    /// ᾱ_t for `t ∈ [0, t_train]`; ᾱ_0 = 1.
    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        self.alpha_bars
            .get(t)
            .copied()
            .ok_or_else(|| Error::Range(format!("alpha_bar: t={t} outside [0, {}]", self.t_train)))
    }

    /// Draws a timestep uniformly from [1, t_train].
    pub fn sample_t<R: Rng>(&self, rng: &mut R) -> usize {
        rng.gen_range(1..=self.t_train)
    }
}

/// Forward noising: `z_t = √ᾱ_t · z_0 + √(1−ᾱ_t) · ε`.
pub fn q_sample(z0: &Tensor, t: usize, eps: &Tensor, schedule: &NoiseSchedule) -> Result<Tensor> {
    if z0.shape() != eps.shape() {
        return Err(Error::Shape(format!(
            "q_sample: z0 {:?} vs eps {:?}",
            z0.shape(),
            eps.shape()
        )));
    }
    let ab = schedule.alpha_bar(t)?;
    if t == 0 {
        // ᾱ_0 = 1: the affine combination is the identity; return it exactly.
        return Ok(z0.clone());
    }
    let a = ab.sqrt() as f32;
    let b = (1.0 - ab).sqrt() as f32;
    z0.scale(a)?.add_scaled(eps, b)
}
