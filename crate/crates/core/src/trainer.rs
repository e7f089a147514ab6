//! Noise-prediction training for the U-Net.
//!
//! Standard denoising objective: draw a timestep and unit-gaussian noise
//! per sample, noise the image with the closed-form forward process, and
//! regress the network output onto the noise with mean-squared error.
//! Updates use adaptive moments (β₁=0.9, β₂=0.999) and an exponential
//! moving average of the weights is kept for inference. Everything is
//! sequential and seeded, so a fixed seed reproduces the run bit for bit.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::imageio::to_model_range;
use crate::model::{q_sample, unet_forward, NoiseSchedule, UNetWeights};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub ema_decay: f64,
    pub seed: u64,
    /// Interval (in steps) between validation evaluations.
    pub val_every: usize,
    /// Interval (in steps) between loss-curve records.
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 3000,
            batch_size: 16,
            lr: 1e-4,
            ema_decay: 0.999,
            seed: 0,
            val_every: 250,
            log_every: 25,
        }
    }
}

/// Progress callback payloads emitted by `train`.
#[derive(Debug, Clone, Copy)]
pub enum TrainEvent {
    /// Mean training loss over the last logging window.
    Step {
        step: usize,
        loss: f64,
    },
    Val {
        step: usize,
        loss: f64,
    },
}

#[derive(Debug, Clone, Serialize)]
pub struct TrainReport {
    pub steps_run: usize,
    pub initial_val_loss: f64,
    pub final_val_loss: f64,
    /// (step, mean train loss over the preceding window).
    pub train_curve: Vec<(usize, f64)>,
    pub val_curve: Vec<(usize, f64)>,
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;
/// A validation loss above this multiple of the initial one counts as a
/// divergence strike; three consecutive strikes abort the run.
const DIVERGENCE_FACTOR: f64 = 10.0;
const DIVERGENCE_STRIKES: usize = 3;

pub struct Trainer {
    weights: UNetWeights,
    ema: UNetWeights,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    step: usize,
    config: TrainConfig,
    schedule: NoiseSchedule,
    rng: ChaCha12Rng,
}

impl Trainer {
    pub fn new(weights: UNetWeights, schedule: NoiseSchedule, config: TrainConfig) -> Result<Self> {
        if config.batch_size == 0 || config.steps == 0 {
            return Err(Error::Config(
                "batch size and step count must be positive".into(),
            ));
        }
        if !(0.0..1.0).contains(&config.ema_decay) {
            return Err(Error::Config(format!(
                "ema decay must lie in [0,1), got {}",
                config.ema_decay
            )));
        }
        let zeros: Vec<Tensor> = weights
            .params()
            .tensors()
            .iter()
            .map(|t| Tensor::zeros(t.shape()))
            .collect();
        let rng = ChaCha12Rng::seed_from_u64(config.seed);
        Ok(Trainer {
            ema: weights.clone(),
            m: zeros.clone(),
            v: zeros,
            step: 0,
            weights,
            schedule,
            config,
            rng,
        })
    }

    /// Smoothed weights used for inference and validation.
    pub fn ema_weights(&self) -> &UNetWeights {
        &self.ema
    }

    pub fn weights(&self) -> &UNetWeights {
        &self.weights
    }

    fn draw_noise(&mut self) -> (usize, Tensor) {
        let t = self.schedule.sample_t(&mut self.rng);
        let shape = [3, crate::model::IMAGE_SIZE, crate::model::IMAGE_SIZE];
        (t, Tensor::randn(&shape, &mut self.rng))
    }

    /// One optimizer step over a batch of model-range images. Returns the
    /// mean per-sample loss.
    pub fn training_step(&mut self, batch: &[&Tensor]) -> Result<f64> {
        if batch.is_empty() {
            return Err(Error::Config("empty batch".into()));
        }
        let n_params = self.weights.params().len();
        let mut acc: Vec<Tensor> = self
            .weights
            .params()
            .tensors()
            .iter()
            .map(|t| Tensor::zeros(t.shape()))
            .collect();
        let inv_b = 1.0 / batch.len() as f32;
        let mut loss_sum = 0.0f64;
        for image in batch {
            let (t, eps) = self.draw_noise();
            let z_t = q_sample(image, t, &eps, &self.schedule)?;
            let mut tape = Tape::recording();
            let bound = self.weights.params().bind(&mut tape);
            let z = tape.leaf(z_t);
            let eps_hat = unet_forward(&mut tape, &self.weights, &bound, z, t, &mut None)?;
            let eps_leaf = tape.leaf(eps);
            let diff = tape.add_scaled(eps_hat, eps_leaf, -1.0)?;
            let sq = tape.mul(diff, diff)?;
            let loss = tape.mean_all(sq)?;
            loss_sum += tape.value(loss).data()[0] as f64;
            let grads = tape.backward(loss)?;
            for i in 0..n_params {
                let g = grads.get(bound.id_at(i))?;
                acc[i] = acc[i].add_scaled(g, inv_b)?;
            }
        }
        let mean_loss = loss_sum / batch.len() as f64;
        if !mean_loss.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite training loss {mean_loss} at step {}",
                self.step + 1
            )));
        }
        self.apply_update(&acc);
        Ok(mean_loss)
    }

    fn apply_update(&mut self, grads: &[Tensor]) {
        self.step += 1;
        let bc1 = 1.0 - ADAM_BETA1.powi(self.step as i32);
        let bc2 = 1.0 - ADAM_BETA2.powi(self.step as i32);
        let lr = self.config.lr;
        let decay = self.config.ema_decay;
        for (i, g) in grads.iter().enumerate() {
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            let w = self.weights.params_mut().tensors_mut()[i].data_mut();
            let e = self.ema.params_mut().tensors_mut()[i].data_mut();
            for j in 0..g.data().len() {
                let gj = g.data()[j] as f64;
                let mj = ADAM_BETA1 * m[j] as f64 + (1.0 - ADAM_BETA1) * gj;
                let vj = ADAM_BETA2 * v[j] as f64 + (1.0 - ADAM_BETA2) * gj * gj;
                m[j] = mj as f32;
                v[j] = vj as f32;
                let wj = w[j] as f64 - lr * (mj / bc1) / ((vj / bc2).sqrt() + ADAM_EPS);
                w[j] = wj as f32;
                e[j] = (decay * e[j] as f64 + (1.0 - decay) * wj) as f32;
            }
        }
    }

    /// Mean validation loss of the EMA weights. Draws are derived from the
    /// image index, not the trainer state, so successive evaluations are
    /// directly comparable.
    pub fn validation_loss(&self, val_images: &[Tensor]) -> Result<f64> {
        if val_images.is_empty() {
            return Err(Error::Config("empty validation set".into()));
        }
        let mut total = 0.0f64;
        for (idx, image) in val_images.iter().enumerate() {
            let mut r = ChaCha12Rng::seed_from_u64(
                self.config.seed ^ 0x76616c5f_u64 ^ ((idx as u64) << 32),
            );
            let t = self.schedule.sample_t(&mut r);
            let eps = Tensor::randn(image.shape(), &mut r);
            let z_t = q_sample(image, t, &eps, &self.schedule)?;
            let mut tape = Tape::inference();
            let bound = self.ema.params().bind(&mut tape);
            let z = tape.leaf(z_t);
            let eps_hat = unet_forward(&mut tape, &self.ema, &bound, z, t, &mut None)?;
            total += mse_f64(tape.value(eps_hat), &eps);
        }
        Ok(total / val_images.len() as f64)
    }

    /// Full loop: shuffled passes over the training images, periodic
    /// validation with divergence detection, loss curves in the report.
    /// Images arrive in storage range [0,1] and are mapped to [−1,1] here.
    pub fn train(
        &mut self,
        train_images: &[Tensor],
        val_images: &[Tensor],
        mut on_event: impl FnMut(TrainEvent),
    ) -> Result<TrainReport> {
        if train_images.is_empty() {
            return Err(Error::Config("empty training set".into()));
        }
        let train: Vec<Tensor> = train_images
            .iter()
            .map(to_model_range)
            .collect::<Result<_>>()?;
        let val: Vec<Tensor> = val_images
            .iter()
            .map(to_model_range)
            .collect::<Result<_>>()?;

        let initial_val_loss = self.validation_loss(&val)?;
        let mut report = TrainReport {
            steps_run: 0,
            initial_val_loss,
            final_val_loss: initial_val_loss,
            train_curve: Vec::new(),
            val_curve: Vec::new(),
        };
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut self.rng);
        let mut cursor = 0usize;
        let mut window_sum = 0.0f64;
        let mut window_n = 0usize;
        let mut strikes = 0usize;
        for step in 1..=self.config.steps {
            let mut batch = Vec::with_capacity(self.config.batch_size);
            for _ in 0..self.config.batch_size {
                if cursor == order.len() {
                    order.shuffle(&mut self.rng);
                    cursor = 0;
                }
                batch.push(&train[order[cursor]]);
                cursor += 1;
            }
            let loss = self.training_step(&batch)?;
            report.steps_run = step;
            window_sum += loss;
            window_n += 1;
            if step % self.config.log_every == 0 || step == self.config.steps {
                let mean = window_sum / window_n as f64;
                report.train_curve.push((step, mean));
                on_event(TrainEvent::Step { step, loss: mean });
                window_sum = 0.0;
                window_n = 0;
            }
            if step % self.config.val_every == 0 || step == self.config.steps {
                let vl = self.validation_loss(&val)?;
                report.val_curve.push((step, vl));
                report.final_val_loss = vl;
                on_event(TrainEvent::Val { step, loss: vl });
                if vl > DIVERGENCE_FACTOR * initial_val_loss {
                    strikes += 1;
                    if strikes >= DIVERGENCE_STRIKES {
                        return Err(Error::Divergence(format!(
                            "validation loss {vl:.4} exceeded {DIVERGENCE_FACTOR}x the initial \
                             {initial_val_loss:.4} for {DIVERGENCE_STRIKES} consecutive checks"
                        )));
                    }
                } else {
                    strikes = 0;
                }
            }
        }
        Ok(report)
    }
}

/// Direct f64 mean-squared error between two equal-shape tensors.
pub fn mse_f64(a: &Tensor, b: &Tensor) -> f64 {
    debug_assert_eq!(a.shape(), b.shape());
    let sum: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum();
    sum / a.data().len() as f64
}
