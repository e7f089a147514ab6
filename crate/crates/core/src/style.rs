//! Training-free stylization by attention feature injection.
//!
//! The pipeline inverts the content and style images over the shared step
//! schedule while recording attention projections (queries from the content
//! pass, keys and values from the style pass), matches the initial latent's
//! channel statistics to the style latent, then runs the reverse process
//! injecting the recorded features: at every scheduled step and injected
//! layer the live query is blended toward the recorded content query, the
//! key/value pair is replaced by the style's, and the softmax is sharpened
//! by a temperature. Everything is keyed by `(timestep, layer)`, so a
//! capture and its consumption refer to the same point of the trajectory.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::ddim::{ddim_invert, ddim_sample, StepSchedule, UNetPredictor};
use crate::error::{Error, Result};
use crate::model::{
    AttentionHook, HookAction, HookSet, LayerId, NoiseSchedule, UNetWeights, IMAGE_CHANNELS,
    IMAGE_SIZE,
};
use crate::tensor::Tensor;

/// Which side of the transfer a cache belongs to, and therefore what it
/// stores: queries for content, key/value pairs for style.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CacheRole {
    Content,
    Style,
}

enum CacheEntry {
    Query(Tensor),
    KeyValue(Tensor, Tensor),
}

/// Attention features recorded during one inversion pass, keyed by
/// `(timestep, layer)`. Frozen once the pass finishes.
pub struct AttentionCache {
    role: CacheRole,
    entries: BTreeMap<(usize, LayerId), CacheEntry>,
}

impl AttentionCache {
    fn new(role: CacheRole) -> Self {
        AttentionCache {
            role,
            entries: BTreeMap::new(),
        }
    }

    pub fn role(&self) -> CacheRole {
        self.role
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn query(&self, t: usize, layer: LayerId) -> Result<&Tensor> {
        match self.entries.get(&(t, layer)) {
            Some(CacheEntry::Query(q)) => Ok(q),
            _ => Err(Error::CacheMiss(format!(
                "no recorded query for t={t}, layer {layer}"
            ))),
        }
    }

    pub fn key_value(&self, t: usize, layer: LayerId) -> Result<(&Tensor, &Tensor)> {
        match self.entries.get(&(t, layer)) {
            Some(CacheEntry::KeyValue(k, v)) => Ok((k, v)),
            _ => Err(Error::CacheMiss(format!(
                "no recorded key/value for t={t}, layer {layer}"
            ))),
        }
    }
}

/// Stylization parameters. Defaults follow the reference operating point:
/// γ = 0.75, τ = 1.5, injection into the decoder attention layers over a
/// 50-step schedule.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct StylizeConfig {
    /// Query blend: 1 keeps the content query, 0 keeps the live stylized
    /// query.
    pub gamma: f32,
    /// Softmax temperature applied at injected layers (≥ 1).
    pub tau: f32,
    /// Attention layers that receive injected features.
    pub injected_layers: Vec<LayerId>,
    /// Number of scheduled timesteps.
    pub steps: usize,
    /// Ablation switches: feature injection, initial-latent statistics
    /// matching, temperature scaling.
    pub enable_injection: bool,
    pub enable_adain: bool,
    pub enable_temperature: bool,
}

impl Default for StylizeConfig {
    fn default() -> Self {
        StylizeConfig {
            gamma: 0.75,
            tau: 1.5,
            injected_layers: LayerId::DECODER.to_vec(),
            steps: 50,
            enable_injection: true,
            enable_adain: true,
            enable_temperature: true,
        }
    }
}

impl StylizeConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(Error::Range(format!(
                "gamma must lie in [0,1], got {}",
                self.gamma
            )));
        }
        if !(self.tau >= 1.0 && self.tau.is_finite()) {
            return Err(Error::Range(format!("tau must be >= 1, got {}", self.tau)));
        }
        if self.steps == 0 {
            return Err(Error::Range("steps must be positive".into()));
        }
        let mut seen = Vec::new();
        for &l in &self.injected_layers {
            if seen.contains(&l) {
                return Err(Error::Config(format!("duplicate injected layer: {l}")));
            }
            seen.push(l);
        }
        Ok(())
    }

    /// Temperature actually applied at injected layers.
    fn effective_tau(&self) -> f32 {
        if self.enable_temperature {
            self.tau
        } else {
            1.0
        }
    }
}

/// Matches the initial latent's per-channel statistics to the style's:
/// `σ(z^s) · (z^c − μ(z^c)) / σ(z^c) + μ(z^s)`, per channel over spatial
/// positions. Near-constant content channels (σ < 1e-6) are clamped to
/// keep the division finite; a warning notes the degenerate channel.
pub fn initial_latent_adain(z_c: &Tensor, z_s: &Tensor) -> Result<Tensor> {
    if z_c.shape() != z_s.shape() {
        return Err(Error::Shape(format!(
            "latent statistics transfer: {:?} vs {:?}",
            z_c.shape(),
            z_s.shape()
        )));
    }
    if z_c.shape().len() != 3 {
        return Err(Error::Shape(format!(
            "expected [c,h,w] latents, got {:?}",
            z_c.shape()
        )));
    }
    // Identical inputs: normalization followed by re-modulation is the
    // mathematical identity; return it exactly rather than through the
    // arithmetic.
    if z_c.data() == z_s.data() {
        return Ok(z_c.clone());
    }
    const SIGMA_FLOOR: f64 = 1e-6;
    let (c, h, w) = (z_c.shape()[0], z_c.shape()[1], z_c.shape()[2]);
    let plane = h * w;
    let mut out = vec![0.0f32; c * plane];
    for ch in 0..c {
        let cd = &z_c.data()[ch * plane..(ch + 1) * plane];
        let sd = &z_s.data()[ch * plane..(ch + 1) * plane];
        let (mu_c, mut sig_c) = channel_stats(cd);
        let (mu_s, sig_s) = channel_stats(sd);
        if sig_c < SIGMA_FLOOR {
            eprintln!(
                "warning: latent channel {ch} is nearly constant (sigma {sig_c:.2e}); clamping"
            );
            sig_c = SIGMA_FLOOR;
        }
        let gain = sig_s / sig_c;
        for (o, &v) in out[ch * plane..(ch + 1) * plane].iter_mut().zip(cd) {
            *o = ((v as f64 - mu_c) * gain + mu_s) as f32;
        }
    }
    let t = Tensor::from_raw(z_c.shape().to_vec(), out);
    t.validate_finite("initial_latent_adain")?;
    Ok(t)
}

/// Population mean and standard deviation in f64.
fn channel_stats(v: &[f32]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().map(|&x| x as f64).sum::<f64>() / n;
    let var = v.iter().map(|&x| (x as f64 - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Convex query blend `γ·q_content + (1−γ)·q_live`; exact at the endpoints.
pub fn blend_query(q_content: &Tensor, q_live: &Tensor, gamma: f32) -> Result<Tensor> {
    if !(0.0..=1.0).contains(&gamma) {
        return Err(Error::Range(format!(
            "gamma must lie in [0,1], got {gamma}"
        )));
    }
    if q_content.shape() != q_live.shape() {
        return Err(Error::Shape(format!(
            "query blend: {:?} vs {:?}",
            q_content.shape(),
            q_live.shape()
        )));
    }
    if gamma == 1.0 {
        return Ok(q_content.clone());
    }
    if gamma == 0.0 {
        return Ok(q_live.clone());
    }
    q_content.scale(gamma)?.add_scaled(q_live, 1.0 - gamma)
}

/// Attention core with temperature: `softmax(τ·q̃kᵀ/√d)·v`. Standalone form
/// of what an injected block computes between its projections; exposed for
/// direct testing and diagnostics.
pub fn injected_attention(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    tau: f32,
    d: usize,
) -> Result<Tensor> {
    if q.shape().len() != 2 || k.shape().len() != 2 || v.shape().len() != 2 {
        return Err(Error::Shape(
            "attention expects 2-d [tokens, dim] inputs".into(),
        ));
    }
    if q.shape()[1] != d || k.shape()[1] != d {
        return Err(Error::Shape(format!(
            "token dims disagree: q {:?}, k {:?}, d={d}",
            q.shape(),
            k.shape()
        )));
    }
    if v.shape()[0] != k.shape()[0] {
        return Err(Error::Shape(format!(
            "key/value token counts disagree: {:?} vs {:?}",
            k.shape(),
            v.shape()
        )));
    }
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::Range(format!(
            "temperature must be positive, got {tau}"
        )));
    }
    let kt = k.transpose2d()?;
    let base = q.matmul(&kt)?.scale(1.0 / (d as f32).sqrt())?;
    let scaled = if tau != 1.0 { base.scale(tau)? } else { base };
    scaled.softmax_rows()?.matmul(v)
}

/// Records attention projections during an inversion pass.
struct CaptureHook<'a> {
    cache: &'a mut AttentionCache,
}

impl AttentionHook for CaptureHook<'_> {
    fn on_attention(
        &mut self,
        layer: LayerId,
        t: usize,
        q: &Tensor,
        k: &Tensor,
        v: &Tensor,
    ) -> Result<HookAction> {
        let entry = match self.cache.role {
            CacheRole::Content => CacheEntry::Query(q.clone()),
            CacheRole::Style => CacheEntry::KeyValue(k.clone(), v.clone()),
        };
        if self.cache.entries.insert((t, layer), entry).is_some() {
            return Err(Error::Config(format!(
                "duplicate capture at t={t}, layer {layer}; caches are write-once"
            )));
        }
        Ok(HookAction::Pass)
    }
}

/// Applies the recorded features during the stylized reverse pass.
struct InjectHook<'a> {
    content: &'a AttentionCache,
    style: &'a AttentionCache,
    gamma: f32,
    tau: f32,
    /// When set, the std of the injected τ=1 logits is recorded per
    /// (timestep, layer).
    record_stds: Option<&'a mut BTreeMap<(usize, LayerId), f64>>,
}

impl AttentionHook for InjectHook<'_> {
    fn on_attention(
        &mut self,
        layer: LayerId,
        t: usize,
        q_live: &Tensor,
        _k: &Tensor,
        _v: &Tensor,
    ) -> Result<HookAction> {
        let q_content = self.content.query(t, layer)?;
        let (k_s, v_s) = self.style.key_value(t, layer)?;
        let blended = blend_query(q_content, q_live, self.gamma)?;
        Ok(HookAction::Override {
            q: Some(blended),
            k: k_s.clone(),
            v: v_s.clone(),
            tau: self.tau,
        })
    }

    fn wants_logit_std(&self, _layer: LayerId) -> bool {
        self.record_stds.is_some()
    }

    fn observe_logit_std(&mut self, layer: LayerId, t: usize, base_std: f64, _scaled_std: f64) {
        if let Some(m) = self.record_stds.as_deref_mut() {
            m.insert((t, layer), base_std);
        }
    }
}

/// Pass-through hook that only records logit stds.
struct StdProbe {
    stds: BTreeMap<(usize, LayerId), f64>,
}

impl AttentionHook for StdProbe {
    fn on_attention(
        &mut self,
        _layer: LayerId,
        _t: usize,
        _q: &Tensor,
        _k: &Tensor,
        _v: &Tensor,
    ) -> Result<HookAction> {
        Ok(HookAction::Pass)
    }

    fn wants_logit_std(&self, _layer: LayerId) -> bool {
        true
    }

    fn observe_logit_std(&mut self, layer: LayerId, t: usize, base_std: f64, _scaled: f64) {
        self.stds.insert((t, layer), base_std);
    }
}

/// Result of inverting one image with capture hooks: the terminal latent
/// and the features recorded along the way. Reusable across stylizations.
pub struct InversionArtifacts {
    pub z_terminal: Tensor,
    pub cache: AttentionCache,
}

fn check_image_shape(t: &Tensor, what: &str) -> Result<()> {
    let want = [IMAGE_CHANNELS, IMAGE_SIZE, IMAGE_SIZE];
    if t.shape() != want {
        return Err(Error::Config(format!(
            "{what} must be {want:?} after preprocessing, got {:?}",
            t.shape()
        )));
    }
    Ok(())
}

/// Inverts `image` over the config's schedule, capturing the features the
/// given role needs at the injected layers.
pub fn invert_with_capture(
    image: &Tensor,
    weights: &UNetWeights,
    schedule: &NoiseSchedule,
    config: &StylizeConfig,
    role: CacheRole,
) -> Result<InversionArtifacts> {
    config.validate()?;
    check_image_shape(image, "input image")?;
    let steps = StepSchedule::strided(schedule.t_train(), config.steps)?;
    let model = UNetPredictor::new(weights);
    let mut cache = AttentionCache::new(role);
    let mut hook = CaptureHook { cache: &mut cache };
    let hooks = HookSet::new(&config.injected_layers, &mut hook)?;
    let z_terminal = ddim_invert(image, &model, &steps, schedule, Some(hooks))?;
    let expected = config.steps * config.injected_layers.len();
    if cache.len() != expected {
        return Err(Error::CacheMiss(format!(
            "capture recorded {} entries, expected {expected}",
            cache.len()
        )));
    }
    Ok(InversionArtifacts { z_terminal, cache })
}

/// Stylized reverse pass from previously computed inversion artifacts.
pub fn stylize_from_artifacts(
    content: &InversionArtifacts,
    style: &InversionArtifacts,
    weights: &UNetWeights,
    schedule: &NoiseSchedule,
    config: &StylizeConfig,
) -> Result<Tensor> {
    config.validate()?;
    if content.cache.role != CacheRole::Content || style.cache.role != CacheRole::Style {
        return Err(Error::Config(
            "artifact roles are swapped or duplicated".into(),
        ));
    }
    let steps = StepSchedule::strided(schedule.t_train(), config.steps)?;
    let model = UNetPredictor::new(weights);
    let z_init = if config.enable_adain {
        initial_latent_adain(&content.z_terminal, &style.z_terminal)?
    } else {
        content.z_terminal.clone()
    };
    if config.enable_injection {
        let mut hook = InjectHook {
            content: &content.cache,
            style: &style.cache,
            gamma: config.gamma,
            tau: config.effective_tau(),
            record_stds: None,
        };
        let hooks = HookSet::new(&config.injected_layers, &mut hook)?;
        ddim_sample(&z_init, &model, &steps, schedule, Some(hooks))
    } else {
        ddim_sample(&z_init, &model, &steps, schedule, None)
    }
}

/// Full pipeline: invert both images with capture, match initial latent
/// statistics, and run the injected reverse process. Returns the stylized
/// latent at t=0 in the model's [−1, 1] image space.
pub fn stylize(
    content_image: &Tensor,
    style_image: &Tensor,
    weights: &UNetWeights,
    schedule: &NoiseSchedule,
    config: &StylizeConfig,
) -> Result<Tensor> {
    let content =
        invert_with_capture(content_image, weights, schedule, config, CacheRole::Content)?;
    let style = invert_with_capture(style_image, weights, schedule, config, CacheRole::Style)?;
    stylize_from_artifacts(&content, &style, weights, schedule, config)
}

/// One row of the temperature diagnostic: logit standard deviations at a
/// scheduled timestep, averaged over the injected layers.
#[derive(Debug, Clone, Serialize)]
pub struct StdReportRow {
    pub t: usize,
    /// Mean std during plain reconstruction, averaged over the content and
    /// style passes.
    pub no_injection: f64,
    /// Mean std of injected-attention logits before temperature.
    pub injected_tau1: f64,
    /// The same logits after temperature: exactly τ × `injected_tau1`.
    pub injected_scaled: f64,
}

/// Per-timestep comparison of attention logit spread with and without
/// feature injection. The no-injection baseline averages the content and
/// style reconstruction passes; the injected pass runs the configured
/// temperature while recording its pre-temperature logit std.
pub fn attention_std_report(
    content_image: &Tensor,
    style_image: &Tensor,
    weights: &UNetWeights,
    schedule: &NoiseSchedule,
    config: &StylizeConfig,
) -> Result<Vec<StdReportRow>> {
    config.validate()?;
    check_image_shape(content_image, "content image")?;
    check_image_shape(style_image, "style image")?;
    let steps = StepSchedule::strided(schedule.t_train(), config.steps)?;
    let model = UNetPredictor::new(weights);

    let content =
        invert_with_capture(content_image, weights, schedule, config, CacheRole::Content)?;
    let style = invert_with_capture(style_image, weights, schedule, config, CacheRole::Style)?;

    // Plain reconstructions of both inputs give the uninjected baseline.
    let mut content_probe = StdProbe {
        stds: BTreeMap::new(),
    };
    let hooks = HookSet::new(&config.injected_layers, &mut content_probe)?;
    ddim_sample(&content.z_terminal, &model, &steps, schedule, Some(hooks))?;
    let mut style_probe = StdProbe {
        stds: BTreeMap::new(),
    };
    let hooks = HookSet::new(&config.injected_layers, &mut style_probe)?;
    ddim_sample(&style.z_terminal, &model, &steps, schedule, Some(hooks))?;

    // Injected pass, recording the τ=1 logit std at every (t, layer).
    let z_init = if config.enable_adain {
        initial_latent_adain(&content.z_terminal, &style.z_terminal)?
    } else {
        content.z_terminal.clone()
    };
    let mut injected_stds = BTreeMap::new();
    let mut hook = InjectHook {
        content: &content.cache,
        style: &style.cache,
        gamma: config.gamma,
        tau: config.effective_tau(),
        record_stds: Some(&mut injected_stds),
    };
    let hooks = HookSet::new(&config.injected_layers, &mut hook)?;
    ddim_sample(&z_init, &model, &steps, schedule, Some(hooks))?;

    let tau = config.effective_tau() as f64;
    let mut rows = Vec::with_capacity(steps.len());
    for &t in steps.steps() {
        let mut base = 0.0f64;
        let mut injected = 0.0f64;
        for &layer in &config.injected_layers {
            let c = content_probe
                .stds
                .get(&(t, layer))
                .copied()
                .ok_or_else(|| {
                    Error::CacheMiss(format!("missing content-pass std at t={t}, layer {layer}"))
                })?;
            let s = style_probe.stds.get(&(t, layer)).copied().ok_or_else(|| {
                Error::CacheMiss(format!("missing style-pass std at t={t}, layer {layer}"))
            })?;
            let i = injected_stds.get(&(t, layer)).copied().ok_or_else(|| {
                Error::CacheMiss(format!("missing injected-pass std at t={t}, layer {layer}"))
            })?;
            base += 0.5 * (c + s);
            injected += i;
        }
        let n = config.injected_layers.len() as f64;
        let (no_injection, injected_tau1) = (base / n, injected / n);
        rows.push(StdReportRow {
            t,
            no_injection,
            injected_tau1,
            injected_scaled: tau * injected_tau1,
        });
    }
    Ok(rows)
}

/// Shannon entropy (nats) of each row of a row-stochastic matrix, f64.
pub fn row_entropies(rows: &Tensor) -> Vec<f64> {
    let cols = rows.shape()[1];
    rows.data()
        .chunks(cols)
        .map(|row| {
            row.iter()
                .filter(|&&p| p > 0.0)
                .map(|&p| {
                    let p = p as f64;
                    -p * p.ln()
                })
                .sum()
        })
        .collect()
}
