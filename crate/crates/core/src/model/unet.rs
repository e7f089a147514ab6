//! The toy noise-prediction U-Net.
//!
//! Pixel-space 3×64×64, three resolution levels (64 → 32 → 16) with channel
//! widths b/2b/4b, one residual block per level per side, and single-head
//! self-attention at the 32² and 16² levels on both sides plus the
//! bottleneck — five attention blocks total, each with a stable [`LayerId`].
//! Skip connections are additive, which keeps the op set to the frozen
//! kernel list. The forward pass is written once over tape ops and serves
//! both training (recording tape) and sampling (inference tape with
//! optional attention hooks).

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Vid};
use crate::error::{Error, Result};
use crate::model::hooks::{AttentionHook, HookAction, LayerId, LayerInfo, LayerPosition};
use crate::model::params::{BoundParams, ParamStore};
use crate::tensor::Tensor;

pub const IMAGE_SIZE: usize = 64;
pub const IMAGE_CHANNELS: usize = 3;
/// Dimension of the raw sinusoidal timestep embedding.
const TIME_SINUSOID_DIM: usize = 128;

/// Architecture hyperparameters. The spatial layout is fixed; width and
/// normalization granularity scale the model up or down.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct UNetConfig {
    /// Channel count at full resolution; doubles per level.
    pub base_width: usize,
    /// Group count for every group-norm layer.
    pub groups: usize,
}

impl Default for UNetConfig {
    fn default() -> Self {
        UNetConfig {
            base_width: 64,
            groups: 8,
        }
    }
}

impl UNetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.groups == 0 || self.base_width == 0 {
            return Err(Error::Config(
                "base_width and groups must be positive".into(),
            ));
        }
        if self.base_width % self.groups != 0 {
            return Err(Error::Config(format!(
                "base_width {} must be divisible by groups {}",
                self.base_width, self.groups
            )));
        }
        Ok(())
    }

    fn time_dim(&self) -> usize {
        4 * self.base_width
    }

    /// The five attention blocks with their positions, resolutions, and
    /// token dimensions, in forward-pass order.
    pub fn layer_registry(&self) -> Vec<LayerInfo> {
        let b = self.base_width;
        vec![
            LayerInfo {
                id: LayerId::Enc32,
                position: LayerPosition::Encoder,
                resolution: 32,
                dim: 2 * b,
            },
            LayerInfo {
                id: LayerId::Enc16,
                position: LayerPosition::Encoder,
                resolution: 16,
                dim: 4 * b,
            },
            LayerInfo {
                id: LayerId::Bottleneck16,
                position: LayerPosition::Bottleneck,
                resolution: 16,
                dim: 4 * b,
            },
            LayerInfo {
                id: LayerId::Dec16,
                position: LayerPosition::Decoder,
                resolution: 16,
                dim: 4 * b,
            },
            LayerInfo {
                id: LayerId::Dec32,
                position: LayerPosition::Decoder,
                resolution: 32,
                dim: 2 * b,
            },
        ]
    }

    pub fn layer_info(&self, id: LayerId) -> LayerInfo {
        self.layer_registry()
            .into_iter()
            .find(|l| l.id == id)
            .expect("registry covers all layer ids")
    }
}

/// All parameters of the U-Net plus the config that shapes them.
#[derive(Debug, Clone)]
pub struct UNetWeights {
    config: UNetConfig,
    params: ParamStore,
}

impl UNetWeights {
    /// Fresh random initialization. Output-side convolutions and attention
    /// output projections start at zero, so a new model predicts ε̂ = 0.
    pub fn init<R: Rng>(config: UNetConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut p = ParamStore::new();
        let b = config.base_width;
        let tdim = config.time_dim();

        let conv = |rng: &mut R, co: usize, ci: usize, k: usize| -> Tensor {
            let std = (2.0 / (ci * k * k) as f32).sqrt();
            Tensor::randn(&[co, ci, k, k], rng)
                .scale(std)
                .expect("finite init")
        };
        let lin = |rng: &mut R, o: usize, i: usize| -> Tensor {
            let std = (2.0 / i as f32).sqrt();
            Tensor::randn(&[o, i], rng).scale(std).expect("finite init")
        };

        p.add("stem.w", conv(rng, b, IMAGE_CHANNELS, 3))?;
        p.add("stem.b", Tensor::zeros(&[b]))?;
        p.add("temb.l1.w", lin(rng, tdim, TIME_SINUSOID_DIM))?;
        p.add("temb.l1.b", Tensor::zeros(&[tdim]))?;
        p.add("temb.l2.w", lin(rng, tdim, tdim))?;
        p.add("temb.l2.b", Tensor::zeros(&[tdim]))?;

        let res_block = |p: &mut ParamStore,
                         rng: &mut R,
                         prefix: &str,
                         cin: usize,
                         cout: usize|
         -> Result<()> {
            p.add(&format!("{prefix}.gn1.s"), Tensor::full(&[cin], 1.0))?;
            p.add(&format!("{prefix}.gn1.b"), Tensor::zeros(&[cin]))?;
            p.add(&format!("{prefix}.conv1.w"), conv(rng, cout, cin, 3))?;
            p.add(&format!("{prefix}.conv1.b"), Tensor::zeros(&[cout]))?;
            p.add(&format!("{prefix}.temb.w"), lin(rng, cout, tdim))?;
            p.add(&format!("{prefix}.temb.b"), Tensor::zeros(&[cout]))?;
            p.add(&format!("{prefix}.gn2.s"), Tensor::full(&[cout], 1.0))?;
            p.add(&format!("{prefix}.gn2.b"), Tensor::zeros(&[cout]))?;
            p.add(
                &format!("{prefix}.conv2.w"),
                Tensor::zeros(&[cout, cout, 3, 3]),
            )?;
            p.add(&format!("{prefix}.conv2.b"), Tensor::zeros(&[cout]))?;
            if cin != cout {
                p.add(&format!("{prefix}.skip.w"), conv(rng, cout, cin, 1))?;
                p.add(&format!("{prefix}.skip.b"), Tensor::zeros(&[cout]))?;
            }
            Ok(())
        };
        let attn_block = |p: &mut ParamStore, rng: &mut R, id: LayerId, c: usize| -> Result<()> {
            let pre = format!("attn.{}", id.name());
            p.add(&format!("{pre}.gn.s"), Tensor::full(&[c], 1.0))?;
            p.add(&format!("{pre}.gn.b"), Tensor::zeros(&[c]))?;
            for proj in ["q", "k", "v"] {
                p.add(&format!("{pre}.{proj}.w"), lin(rng, c, c))?;
                p.add(&format!("{pre}.{proj}.b"), Tensor::zeros(&[c]))?;
            }
            p.add(&format!("{pre}.o.w"), Tensor::zeros(&[c, c]))?;
            p.add(&format!("{pre}.o.b"), Tensor::zeros(&[c]))?;
            Ok(())
        };

        res_block(&mut p, rng, "enc0", b, b)?;
        p.add("down0.w", conv(rng, b, b, 2))?;
        p.add("down0.b", Tensor::zeros(&[b]))?;
        res_block(&mut p, rng, "enc1", b, 2 * b)?;
        attn_block(&mut p, rng, LayerId::Enc32, 2 * b)?;
        p.add("down1.w", conv(rng, 2 * b, 2 * b, 2))?;
        p.add("down1.b", Tensor::zeros(&[2 * b]))?;
        res_block(&mut p, rng, "enc2", 2 * b, 4 * b)?;
        attn_block(&mut p, rng, LayerId::Enc16, 4 * b)?;
        res_block(&mut p, rng, "mid0", 4 * b, 4 * b)?;
        attn_block(&mut p, rng, LayerId::Bottleneck16, 4 * b)?;
        res_block(&mut p, rng, "mid1", 4 * b, 4 * b)?;
        res_block(&mut p, rng, "dec2", 4 * b, 4 * b)?;
        attn_block(&mut p, rng, LayerId::Dec16, 4 * b)?;
        p.add("up1.w", conv(rng, 2 * b, 4 * b, 3))?;
        p.add("up1.b", Tensor::zeros(&[2 * b]))?;
        res_block(&mut p, rng, "dec1", 2 * b, 2 * b)?;
        attn_block(&mut p, rng, LayerId::Dec32, 2 * b)?;
        p.add("up0.w", conv(rng, b, 2 * b, 3))?;
        p.add("up0.b", Tensor::zeros(&[b]))?;
        res_block(&mut p, rng, "dec0", b, b)?;
        p.add("head.gn.s", Tensor::full(&[b], 1.0))?;
        p.add("head.gn.b", Tensor::zeros(&[b]))?;
        p.add("head.w", Tensor::zeros(&[IMAGE_CHANNELS, b, 3, 3]))?;
        p.add("head.b", Tensor::zeros(&[IMAGE_CHANNELS]))?;

        Ok(UNetWeights { config, params: p })
    }

    pub fn from_parts(config: UNetConfig, params: ParamStore) -> Result<Self> {
        config.validate()?;
        Ok(UNetWeights { config, params })
    }

    pub fn config(&self) -> &UNetConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }
}

/// Attention hooks for one forward pass: a set of layers to consult plus
/// the hook object that serves them. Layers not listed behave as PASS.
pub struct HookSet<'a> {
    layers: Vec<LayerId>,
    hook: &'a mut dyn AttentionHook,
}

impl<'a> HookSet<'a> {
    pub fn new(layers: &[LayerId], hook: &'a mut dyn AttentionHook) -> Result<Self> {
        let mut seen = Vec::new();
        for &l in layers {
            if seen.contains(&l) {
                return Err(Error::Config(format!("duplicate hook layer: {l}")));
            }
            seen.push(l);
        }
        Ok(HookSet { layers: seen, hook })
    }

    /// Hooks on every attention layer.
    pub fn all(hook: &'a mut dyn AttentionHook) -> Self {
        HookSet {
            layers: LayerId::ALL.to_vec(),
            hook,
        }
    }

    fn covers(&self, id: LayerId) -> bool {
        self.layers.contains(&id)
    }
}

struct Ctx<'a> {
    tape: &'a mut Tape,
    weights: &'a UNetWeights,
    bound: &'a BoundParams,
}

impl Ctx<'_> {
    fn p(&mut self, name: &str) -> Result<Vid> {
        Ok(self.bound.id_at(self.weights.params.position(name)?))
    }

    fn res_block(
        &mut self,
        prefix: &str,
        x: Vid,
        temb_act: Vid,
        cin: usize,
        cout: usize,
    ) -> Result<Vid> {
        let groups = self.weights.config.groups;
        let (s1, b1) = (
            self.p(&format!("{prefix}.gn1.s"))?,
            self.p(&format!("{prefix}.gn1.b"))?,
        );
        let h = self.tape.group_norm(x, groups, s1, b1, 1e-5)?;
        let h = self.tape.silu(h)?;
        let (w1, c1b) = (
            self.p(&format!("{prefix}.conv1.w"))?,
            self.p(&format!("{prefix}.conv1.b"))?,
        );
        let h = self.tape.conv2d(h, w1, Some(c1b), 1, 1)?;
        let (tw, tb) = (
            self.p(&format!("{prefix}.temb.w"))?,
            self.p(&format!("{prefix}.temb.b"))?,
        );
        let tproj = self.tape.linear(temb_act, tw, tb)?; // [1, cout]
        let h = self.tape.bias_add_chw(h, tproj)?;
        let (s2, b2) = (
            self.p(&format!("{prefix}.gn2.s"))?,
            self.p(&format!("{prefix}.gn2.b"))?,
        );
        let h = self.tape.group_norm(h, groups, s2, b2, 1e-5)?;
        let h = self.tape.silu(h)?;
        let (w2, c2b) = (
            self.p(&format!("{prefix}.conv2.w"))?,
            self.p(&format!("{prefix}.conv2.b"))?,
        );
        let h = self.tape.conv2d(h, w2, Some(c2b), 1, 1)?;
        let skip = if cin != cout {
            let (sw, sb) = (
                self.p(&format!("{prefix}.skip.w"))?,
                self.p(&format!("{prefix}.skip.b"))?,
            );
            self.tape.conv2d(x, sw, Some(sb), 1, 0)?
        } else {
            x
        };
        self.tape.add(h, skip)
    }

    fn attention_block(
        &mut self,
        info: LayerInfo,
        x: Vid,
        t: usize,
        hooks: &mut Option<HookSet<'_>>,
    ) -> Result<Vid> {
        let pre = format!("attn.{}", info.id.name());
        let c = info.dim;
        let n = info.resolution * info.resolution;
        let groups = self.weights.config.groups;

        let (gs, gb) = (
            self.p(&format!("{pre}.gn.s"))?,
            self.p(&format!("{pre}.gn.b"))?,
        );
        let h = self.tape.group_norm(x, groups, gs, gb, 1e-5)?;
        let flat = self.tape.reshape(h, &[c, n])?;
        let tokens = self.tape.transpose2d(flat)?; // [n, c]
        let mut q = {
            let (w, b) = (
                self.p(&format!("{pre}.q.w"))?,
                self.p(&format!("{pre}.q.b"))?,
            );
            self.tape.linear(tokens, w, b)?
        };
        let mut k = {
            let (w, b) = (
                self.p(&format!("{pre}.k.w"))?,
                self.p(&format!("{pre}.k.b"))?,
            );
            self.tape.linear(tokens, w, b)?
        };
        let mut v = {
            let (w, b) = (
                self.p(&format!("{pre}.v.w"))?,
                self.p(&format!("{pre}.v.b"))?,
            );
            self.tape.linear(tokens, w, b)?
        };

        let mut tau = 1.0f32;
        let hooked = hooks.as_mut().filter(|h| h.covers(info.id));
        let mut observe = false;
        if let Some(hs) = hooked {
            let action = hs.hook.on_attention(
                info.id,
                t,
                self.tape.value(q),
                self.tape.value(k),
                self.tape.value(v),
            )?;
            if let HookAction::Override {
                q: oq,
                k: ok,
                v: ov,
                tau: otau,
            } = action
            {
                if ok.shape().len() != 2 || ok.shape()[1] != c {
                    return Err(Error::Shape(format!(
                        "{}: override key dim {:?} does not match token dim {c}",
                        info.id,
                        ok.shape()
                    )));
                }
                if ov.shape() != ok.shape() {
                    return Err(Error::Shape(format!(
                        "{}: override value shape {:?} differs from key shape {:?}",
                        info.id,
                        ov.shape(),
                        ok.shape()
                    )));
                }
                if !(otau > 0.0 && otau.is_finite()) {
                    return Err(Error::Range(format!(
                        "{}: attention temperature must be positive, got {otau}",
                        info.id
                    )));
                }
                if let Some(oq) = oq {
                    if oq.shape() != [n, c] {
                        return Err(Error::Shape(format!(
                            "{}: override query must be [{n}, {c}], got {:?}",
                            info.id,
                            oq.shape()
                        )));
                    }
                    q = self.tape.leaf(oq);
                }
                k = self.tape.leaf(ok);
                v = self.tape.leaf(ov);
                tau = otau;
            }
            observe = hs.hook.wants_logit_std(info.id);
        }

        let kt = self.tape.transpose2d(k)?;
        let logits = self.tape.matmul(q, kt)?;
        let base = self.tape.scale(logits, 1.0 / (c as f32).sqrt())?;
        if observe {
            let base_std = population_std(self.tape.value(base));
            if let Some(hs) = hooks.as_mut() {
                hs.hook
                    .observe_logit_std(info.id, t, base_std, tau as f64 * base_std);
            }
        }
        let scaled = if tau != 1.0 {
            self.tape.scale(base, tau)?
        } else {
            base
        };
        let a = self.tape.softmax_rows(scaled)?;
        let o = self.tape.matmul(a, v)?;
        let (ow, ob) = (
            self.p(&format!("{pre}.o.w"))?,
            self.p(&format!("{pre}.o.b"))?,
        );
        let o = self.tape.linear(o, ow, ob)?;
        let ot = self.tape.transpose2d(o)?;
        let ochw = self
            .tape
            .reshape(ot, &[c, info.resolution, info.resolution])?;
        self.tape.add(x, ochw)
    }
}

/// Population standard deviation over all elements, accumulated in f64.
pub(crate) fn population_std(t: &Tensor) -> f64 {
    let n = t.numel() as f64;
    let mean = t.data().iter().map(|&v| v as f64).sum::<f64>() / n;
    let var = t
        .data()
        .iter()
        .map(|&v| (v as f64 - mean).powi(2))
        .sum::<f64>()
        / n;
    var.sqrt()
}

/// Sinusoidal embedding of an integer timestep, `[1, 128]`.
fn time_sinusoid(t: usize) -> Tensor {
    let half = TIME_SINUSOID_DIM / 2;
    let mut data = vec![0.0f32; TIME_SINUSOID_DIM];
    for i in 0..half {
        let freq = (-(10_000.0f64.ln()) * i as f64 / (half - 1) as f64).exp();
        let angle = t as f64 * freq;
        data[i] = angle.sin() as f32;
        data[half + i] = angle.cos() as f32;
    }
    Tensor::from_raw(vec![1, TIME_SINUSOID_DIM], data)
}

/// Noise prediction ε̂(z_t, t). Pure in all arguments; bit-deterministic.
///
/// Hooks are an inference-time facility: passing them with a recording tape
/// is a configuration error (training never overrides attention).
pub fn unet_forward(
    tape: &mut Tape,
    weights: &UNetWeights,
    bound: &BoundParams,
    z: Vid,
    t: usize,
    hooks: &mut Option<HookSet<'_>>,
) -> Result<Vid> {
    let b = weights.config.base_width;
    let expect = [IMAGE_CHANNELS, IMAGE_SIZE, IMAGE_SIZE];
    if tape.value(z).shape() != expect {
        return Err(Error::Shape(format!(
            "unet_forward expects {:?}, got {:?}",
            expect,
            tape.value(z).shape()
        )));
    }
    if t == 0 {
        return Err(Error::Range("unet_forward: timestep must be >= 1".into()));
    }
    if hooks.is_some() && tape.is_recording() {
        return Err(Error::Config(
            "attention hooks require an inference tape".into(),
        ));
    }

    let registry = weights.config.layer_registry();
    let info = |id: LayerId| -> LayerInfo {
        *registry
            .iter()
            .find(|l| l.id == id)
            .expect("registry is total")
    };

    let mut ctx = Ctx {
        tape,
        weights,
        bound,
    };

    // Timestep embedding: sinusoid → linear → silu → linear → silu.
    let sin = ctx.tape.leaf(time_sinusoid(t));
    let (l1w, l1b) = (ctx.p("temb.l1.w")?, ctx.p("temb.l1.b")?);
    let e = ctx.tape.linear(sin, l1w, l1b)?;
    let e = ctx.tape.silu(e)?;
    let (l2w, l2b) = (ctx.p("temb.l2.w")?, ctx.p("temb.l2.b")?);
    let e = ctx.tape.linear(e, l2w, l2b)?;
    let temb = ctx.tape.silu(e)?;

    // Encoder.
    let (sw, sb) = (ctx.p("stem.w")?, ctx.p("stem.b")?);
    let x0 = ctx.tape.conv2d(z, sw, Some(sb), 1, 1)?;
    let skip0 = ctx.res_block("enc0", x0, temb, b, b)?;
    let (dw, db) = (ctx.p("down0.w")?, ctx.p("down0.b")?);
    let d0 = ctx.tape.conv2d(skip0, dw, Some(db), 2, 0)?;
    let e1 = ctx.res_block("enc1", d0, temb, b, 2 * b)?;
    let skip1 = ctx.attention_block(info(LayerId::Enc32), e1, t, hooks)?;
    let (dw, db) = (ctx.p("down1.w")?, ctx.p("down1.b")?);
    let d1 = ctx.tape.conv2d(skip1, dw, Some(db), 2, 0)?;
    let e2 = ctx.res_block("enc2", d1, temb, 2 * b, 4 * b)?;
    let skip2 = ctx.attention_block(info(LayerId::Enc16), e2, t, hooks)?;

    // Bottleneck.
    let m = ctx.res_block("mid0", skip2, temb, 4 * b, 4 * b)?;
    let m = ctx.attention_block(info(LayerId::Bottleneck16), m, t, hooks)?;
    let m = ctx.res_block("mid1", m, temb, 4 * b, 4 * b)?;

    // Decoder with additive skips.
    let h = ctx.tape.add(m, skip2)?;
    let h = ctx.res_block("dec2", h, temb, 4 * b, 4 * b)?;
    let h = ctx.attention_block(info(LayerId::Dec16), h, t, hooks)?;
    let h = ctx.tape.upsample2x(h)?;
    let (uw, ub) = (ctx.p("up1.w")?, ctx.p("up1.b")?);
    let h = ctx.tape.conv2d(h, uw, Some(ub), 1, 1)?;
    let h = ctx.tape.add(h, skip1)?;
    let h = ctx.res_block("dec1", h, temb, 2 * b, 2 * b)?;
    let h = ctx.attention_block(info(LayerId::Dec32), h, t, hooks)?;
    let h = ctx.tape.upsample2x(h)?;
    let (uw, ub) = (ctx.p("up0.w")?, ctx.p("up0.b")?);
    let h = ctx.tape.conv2d(h, uw, Some(ub), 1, 1)?;
    let h = ctx.tape.add(h, skip0)?;
    let h = ctx.res_block("dec0", h, temb, b, b)?;

    // Head.
    let (gs, gb) = (ctx.p("head.gn.s")?, ctx.p("head.gn.b")?);
    let h = ctx
        .tape
        .group_norm(h, weights.config.groups, gs, gb, 1e-5)?;
    let h = ctx.tape.silu(h)?;
    let (hw, hb) = (ctx.p("head.w")?, ctx.p("head.b")?);
    ctx.tape.conv2d(h, hw, Some(hb), 1, 1)
}
