//! Deterministic sampling and inversion over a strided timestep schedule.
//!
//! Both directions share one affine update (η = 0, no stochastic term) and
//! one schedule, so a feature captured during inversion at `(t, layer)` is
//! keyed exactly like the sampling step that will consume it. Inversion uses
//! the standard first-order approximation: ε̂ is evaluated at the current
//! lower-noise latent, with the target timestep as the network's time input.

use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::model::{unet_forward, HookSet, NoiseSchedule, UNetWeights};
use crate::tensor::Tensor;

/// Strictly increasing timesteps `t_1 < … < t_S` within `[1, t_train]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StepSchedule {
    steps: Vec<usize>,
}

impl StepSchedule {
    /// Uniformly strided sub-schedule: `t_i = ⌊i · t_train / s⌋`, ending
    /// exactly at `t_train`.
    pub fn strided(t_train: usize, s: usize) -> Result<StepSchedule> {
        if s == 0 || s > t_train {
            return Err(Error::Range(format!(
                "step count must lie in [1, {t_train}], got {s}"
            )));
        }
        let steps = (1..=s).map(|i| i * t_train / s).collect();
        Ok(StepSchedule { steps })
    }

    pub fn from_steps(steps: Vec<usize>, t_train: usize) -> Result<StepSchedule> {
        if steps.is_empty() {
            return Err(Error::Range("empty step schedule".into()));
        }
        for w in steps.windows(2) {
            if w[1] <= w[0] {
                return Err(Error::Range(format!(
                    "step schedule must be strictly increasing, got {} then {}",
                    w[0], w[1]
                )));
            }
        }
        if steps[0] == 0 || *steps.last().unwrap() > t_train {
            return Err(Error::Range(format!(
                "step schedule must lie within [1, {t_train}]"
            )));
        }
        Ok(StepSchedule { steps })
    }

    /// Ascending timesteps.
    pub fn steps(&self) -> &[usize] {
        &self.steps
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }
}

/// Anything that predicts ε̂(z_t, t). The U-Net is the real implementation;
/// tests substitute closed-form stubs to pin down the recurrence algebra.
pub trait NoisePredictor {
    fn predict(&self, z: &Tensor, t: usize, hooks: &mut Option<HookSet<'_>>) -> Result<Tensor>;
}

/// [`NoisePredictor`] backed by U-Net weights; each prediction runs on a
/// fresh inference tape, so memory stays bounded over long trajectories.
pub struct UNetPredictor<'a> {
    weights: &'a UNetWeights,
}

impl<'a> UNetPredictor<'a> {
    pub fn new(weights: &'a UNetWeights) -> Self {
        UNetPredictor { weights }
    }

    pub fn weights(&self) -> &UNetWeights {
        self.weights
    }
}

impl NoisePredictor for UNetPredictor<'_> {
    fn predict(&self, z: &Tensor, t: usize, hooks: &mut Option<HookSet<'_>>) -> Result<Tensor> {
        let mut tape = Tape::inference();
        let bound = self.weights.params().bind(&mut tape);
        let zi = tape.leaf(z.clone());
        let out = unet_forward(&mut tape, self.weights, &bound, zi, t, hooks)?;
        Ok(tape.detach(out))
    }
}

/// Shared affine update between two noise levels:
/// `√ᾱ_to · (z − √(1−ᾱ_from)·ε̂) / √ᾱ_from + √(1−ᾱ_to)·ε̂`.
/// Evaluated per element in f64 with a single quantization back to f32 —
/// the √ᾱ ratios amplify rounding error badly over long trajectories, and
/// this step is negligible next to the network evaluation it follows.
fn ddim_affine(z: &Tensor, eps: &Tensor, ab_from: f64, ab_to: f64) -> Result<Tensor> {
    let scale = (ab_to / ab_from).sqrt();
    let eps_coef = (1.0 - ab_to).sqrt() - scale * (1.0 - ab_from).sqrt();
    let data: Vec<f32> = z
        .data()
        .iter()
        .zip(eps.data())
        .map(|(&zv, &ev)| (scale * zv as f64 + eps_coef * ev as f64) as f32)
        .collect();
    let out = Tensor::from_raw(z.shape().to_vec(), data);
    out.validate_finite("ddim_step")?;
    Ok(out)
}

/// One deterministic reverse step from `t` to `t_prev` (`t_prev ≤ t`;
/// equal timesteps are the identity map).
pub fn ddim_step(
    z_t: &Tensor,
    eps_hat: &Tensor,
    t: usize,
    t_prev: usize,
    schedule: &NoiseSchedule,
) -> Result<Tensor> {
    if z_t.shape() != eps_hat.shape() {
        return Err(Error::Shape(format!(
            "ddim_step: latent {:?} vs prediction {:?}",
            z_t.shape(),
            eps_hat.shape()
        )));
    }
    if t_prev > t {
        return Err(Error::Range(format!(
            "ddim_step runs backward in time: t_prev={t_prev} must not exceed t={t}"
        )));
    }
    let ab_t = schedule.alpha_bar(t)?;
    let ab_prev = schedule.alpha_bar(t_prev)?;
    if t_prev == t {
        return Ok(z_t.clone());
    }
    ddim_affine(z_t, eps_hat, ab_t, ab_prev)
}

/// Full reverse trajectory `z_{t_S} → … → z_{t_1} → z_0`, consulting hooks
/// at every step and attention layer.
pub fn ddim_sample(
    z_terminal: &Tensor,
    model: &impl NoisePredictor,
    steps: &StepSchedule,
    schedule: &NoiseSchedule,
    mut hooks: Option<HookSet<'_>>,
) -> Result<Tensor> {
    let mut z = z_terminal.clone();
    let ts = steps.steps();
    for i in (0..ts.len()).rev() {
        let t = ts[i];
        let t_prev = if i == 0 { 0 } else { ts[i - 1] };
        let eps = model.predict(&z, t, &mut hooks)?;
        z = ddim_step(&z, &eps, t, t_prev, schedule)?;
    }
    Ok(z)
}

/// Inversion `z_0 → z_{t_1} → … → z_{t_S}`: the reversed recurrence, with
/// ε̂ evaluated at the current latent and the target timestep `t_i` as the
/// network input — so captures key by the same `(t, layer)` pairs sampling
/// will query.
pub fn ddim_invert(
    z_0: &Tensor,
    model: &impl NoisePredictor,
    steps: &StepSchedule,
    schedule: &NoiseSchedule,
    mut hooks: Option<HookSet<'_>>,
) -> Result<Tensor> {
    let mut z = z_0.clone();
    let ts = steps.steps();
    for i in 0..ts.len() {
        let t_from = if i == 0 { 0 } else { ts[i - 1] };
        let t_to = ts[i];
        let eps = model.predict(&z, t_to, &mut hooks)?;
        let ab_from = schedule.alpha_bar(t_from)?;
        let ab_to = schedule.alpha_bar(t_to)?;
        z = ddim_affine(&z, &eps, ab_from, ab_to)?;
    }
    Ok(z)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{AttentionHook, HookAction, LayerId, UNetConfig, UNetWeights};
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    /// ε̂ is a fixed tensor, ignoring z and t.
    struct ConstPredictor(Tensor);
    impl NoisePredictor for ConstPredictor {
        fn predict(
            &self,
            _z: &Tensor,
            _t: usize,
            _hooks: &mut Option<HookSet<'_>>,
        ) -> Result<Tensor> {
            Ok(self.0.clone())
        }
    }

    #[test]
    fn strided_schedule_properties() {
        let s = StepSchedule::strided(1000, 50).unwrap();
        assert_eq!(s.len(), 50);
        assert_eq!(s.steps()[0], 20);
        assert_eq!(*s.steps().last().unwrap(), 1000);
        for w in s.steps().windows(2) {
            assert_eq!(w[1] - w[0], 20);
        }
        // Non-divisible still strictly increasing, ends at t_train.
        let s = StepSchedule::strided(1000, 300).unwrap();
        assert_eq!(*s.steps().last().unwrap(), 1000);
        for w in s.steps().windows(2) {
            assert!(w[1] > w[0]);
        }
        assert!(StepSchedule::strided(1000, 0).is_err());
        assert!(StepSchedule::strided(10, 11).is_err());
    }

    #[test]
    fn step_with_zero_eps_is_pure_rescale() {
        let mut r = ChaCha12Rng::seed_from_u64(1);
        let sched = NoiseSchedule::default_schedule();
        let z = Tensor::randn(&[3, 4, 4], &mut r);
        let eps = Tensor::zeros(&[3, 4, 4]);
        let out = ddim_step(&z, &eps, 600, 400, &sched).unwrap();
        let want = (sched.alpha_bar(400).unwrap() / sched.alpha_bar(600).unwrap()).sqrt() as f32;
        for (o, zi) in out.data().iter().zip(z.data()) {
            assert!((o - zi * want).abs() < 1e-6);
        }
    }

    #[test]
    fn step_at_equal_timesteps_is_identity() {
        let mut r = ChaCha12Rng::seed_from_u64(2);
        let sched = NoiseSchedule::default_schedule();
        let z = Tensor::randn(&[3, 4, 4], &mut r);
        let eps = Tensor::randn(&[3, 4, 4], &mut r);
        let out = ddim_step(&z, &eps, 500, 500, &sched).unwrap();
        assert_eq!(out.data(), z.data());
    }

    #[test]
    fn step_ordering_enforced() {
        let sched = NoiseSchedule::default_schedule();
        let z = Tensor::zeros(&[1, 2, 2]);
        assert!(matches!(
            ddim_step(&z, &z, 100, 200, &sched),
            Err(Error::Range(_))
        ));
    }

    #[test]
    fn step_matches_f64_oracle() {
        let mut r = ChaCha12Rng::seed_from_u64(3);
        let sched = NoiseSchedule::default_schedule();
        let z = Tensor::randn(&[2, 5, 5], &mut r);
        let eps = Tensor::randn(&[2, 5, 5], &mut r);
        for (t, tp) in [(1000, 980), (500, 250), (40, 0), (3, 1)] {
            let got = ddim_step(&z, &eps, t, tp, &sched).unwrap();
            let ab_t = sched.alpha_bar(t).unwrap();
            let ab_p = sched.alpha_bar(tp).unwrap();
            for ((g, zi), ei) in got.data().iter().zip(z.data()).zip(eps.data()) {
                let x0 = (*zi as f64 - (1.0 - ab_t).sqrt() * *ei as f64) / ab_t.sqrt();
                let want = ab_p.sqrt() * x0 + (1.0 - ab_p).sqrt() * *ei as f64;
                assert!(
                    (*g as f64 - want).abs() < 1e-6,
                    "t={t}->{tp}: {g} vs {want}"
                );
            }
        }
    }

    #[test]
    fn one_step_sample_closed_form() {
        let mut r = ChaCha12Rng::seed_from_u64(4);
        let sched = NoiseSchedule::default_schedule();
        let steps = StepSchedule::from_steps(vec![1000], 1000).unwrap();
        let z_t = Tensor::randn(&[3, 4, 4], &mut r);
        let eps = Tensor::randn(&[3, 4, 4], &mut r);
        let out = ddim_sample(&z_t, &ConstPredictor(eps.clone()), &steps, &sched, None).unwrap();
        let ab = sched.alpha_bar(1000).unwrap();
        for ((o, zi), ei) in out.data().iter().zip(z_t.data()).zip(eps.data()) {
            // ᾱ_0 = 1: z_0 = (z_T − √(1−ᾱ_T)·ε̂)/√ᾱ_T; values reach ~1/√ᾱ_T
            // (hundreds), so the bound scales with one f32 quantization.
            let want = (*zi as f64 - (1.0 - ab).sqrt() * *ei as f64) / ab.sqrt();
            assert!(
                (*o as f64 - want).abs() < 1e-6 * want.abs().max(1.0),
                "{o} vs {want}"
            );
        }
    }

    #[test]
    fn sample_is_deterministic() {
        let mut r = ChaCha12Rng::seed_from_u64(5);
        let sched = NoiseSchedule::default_schedule();
        let steps = StepSchedule::strided(1000, 10).unwrap();
        let z = Tensor::randn(&[3, 4, 4], &mut r);
        let eps = Tensor::randn(&[3, 4, 4], &mut r).scale(0.3).unwrap();
        let a = ddim_sample(&z, &ConstPredictor(eps.clone()), &steps, &sched, None).unwrap();
        let b = ddim_sample(&z, &ConstPredictor(eps), &steps, &sched, None).unwrap();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn stub_round_trip_inverts_exactly() {
        // With any fixed ε̂ the two recurrences are mutually inverse affine
        // maps. Composing sample-then-invert keeps f32 quantization error
        // contained: errors sampling introduces get scaled back down on the
        // way up.
        let mut r = ChaCha12Rng::seed_from_u64(6);
        let sched = NoiseSchedule::default_schedule();
        let steps = StepSchedule::strided(1000, 25).unwrap();
        let eps = Tensor::randn(&[3, 8, 8], &mut r).scale(0.5).unwrap();
        let stub = ConstPredictor(eps);

        let z_t = Tensor::randn(&[3, 8, 8], &mut r);
        let z0 = ddim_sample(&z_t, &stub, &steps, &sched, None).unwrap();
        let back = ddim_invert(&z0, &stub, &steps, &sched, None).unwrap();
        for (b, z) in back.data().iter().zip(z_t.data()) {
            assert!((b - z).abs() < 1e-5, "{b} vs {z}");
        }
    }

    #[test]
    fn zero_eps_round_trip_is_pure_rescaling() {
        // ε̂ ≡ 0 collapses both recurrences to scalings, which invert to a
        // relative rounding error regardless of direction.
        let mut r = ChaCha12Rng::seed_from_u64(8);
        let sched = NoiseSchedule::default_schedule();
        let steps = StepSchedule::strided(1000, 50).unwrap();
        let stub = ConstPredictor(Tensor::zeros(&[3, 8, 8]));
        let z0 = Tensor::randn(&[3, 8, 8], &mut r);
        let z_t = ddim_invert(&z0, &stub, &steps, &sched, None).unwrap();
        let back = ddim_sample(&z_t, &stub, &steps, &sched, None).unwrap();
        for (b, z) in back.data().iter().zip(z0.data()) {
            assert!((b - z).abs() < 1e-6 * z.abs().max(1.0), "{b} vs {z}");
        }
    }

    struct CountingHook {
        calls: usize,
    }
    impl AttentionHook for CountingHook {
        fn on_attention(
            &mut self,
            _layer: LayerId,
            _t: usize,
            _q: &Tensor,
            _k: &Tensor,
            _v: &Tensor,
        ) -> Result<HookAction> {
            self.calls += 1;
            Ok(HookAction::Pass)
        }
    }

    #[test]
    fn hooks_fire_once_per_step_and_layer() {
        let mut r = ChaCha12Rng::seed_from_u64(7);
        let cfg = UNetConfig {
            base_width: 8,
            groups: 4,
        };
        let weights = UNetWeights::init(cfg, &mut r).unwrap();
        let model = UNetPredictor::new(&weights);
        let sched = NoiseSchedule::default_schedule();
        let steps = StepSchedule::strided(1000, 3).unwrap();
        let z = Tensor::randn(&[3, 64, 64], &mut r);

        let mut hook = CountingHook { calls: 0 };
        let hooks = HookSet::all(&mut hook);
        ddim_sample(&z, &model, &steps, &sched, Some(hooks)).unwrap();
        assert_eq!(hook.calls, 3 * 5);

        let mut hook = CountingHook { calls: 0 };
        let hooks = HookSet::all(&mut hook);
        ddim_invert(&z, &model, &steps, &sched, Some(hooks)).unwrap();
        assert_eq!(hook.calls, 3 * 5);
    }
}
