//! Multi-scale velocity network: a residual U-Net whose encoder levels take
//! the conditioned wavelet scales through per-scale stems and whose decoder
//! emits one velocity head per scale.

mod gradcheck;
mod layers;
mod params;

use std::path::Path;

use rayon::prelude::*;

pub use gradcheck::{grad_check, GradCheckConfig, GradCheckEntry, GradCheckReport};
pub use layers::{silu, silu_grad, Conv2d, GroupNorm, Linear, ResBlock, Tensor, GN_EPS};
pub use params::{Init, ParamId, ParamSpec, ParamStore};

use crate::error::{Error, Result};
use crate::field::Field;
use crate::flow::{Conditioning, VelocityField};
use crate::manifest::Manifest;
use crate::wavelet::WaveletPyramid;
use layers::{silu_backward, silu_vec, upsample2, upsample2_backward, GroupNormCache, ResBlockCache};

/// Lowest and highest angular frequency of the sinusoidal τ features.
pub const EMBED_FREQ_MIN: f64 = 1.0;
pub const EMBED_FREQ_MAX: f64 = 1e4;

#[derive(Debug, Clone, PartialEq)]
pub struct NetConfig {
    /// Physical channels `C`.
    pub channels: usize,
    /// Wavelet scales `J` fed to the network.
    pub n_scales: usize,
    /// Encoder depth; at least `n_scales`.
    pub n_levels: usize,
    /// Channel width of the first level (multiple of `groups`).
    pub init_dim: usize,
    pub blocks_per_level: usize,
    pub bottleneck_blocks: usize,
    /// Conditioning width `d`.
    pub embed_dim: usize,
    /// Widths stop doubling at `channel_cap * init_dim`.
    pub channel_cap: usize,
    pub groups: usize,
    pub kappa_dim: usize,
    /// Number of past frames `L`.
    pub context_len: usize,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            channels: 1,
            n_scales: 3,
            n_levels: 3,
            init_dim: 64,
            blocks_per_level: 3,
            bottleneck_blocks: 2,
            embed_dim: 256,
            channel_cap: 8,
            groups: 8,
            kappa_dim: 0,
            context_len: 3,
        }
    }
}

impl NetConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::invalid(msg));
        if self.channels == 0 {
            return bad("network needs at least one channel".into());
        }
        if self.n_scales == 0 {
            return bad("network needs at least one wavelet scale".into());
        }
        if self.n_levels < self.n_scales {
            return bad(format!(
                "n_levels ({}) must be at least n_scales ({})",
                self.n_levels, self.n_scales
            ));
        }
        if self.groups == 0 || self.init_dim == 0 || self.init_dim % self.groups != 0 {
            return bad(format!(
                "init_dim ({}) must be a positive multiple of the group count ({})",
                self.init_dim, self.groups
            ));
        }
        if self.embed_dim < 2 || self.embed_dim % 2 != 0 {
            return bad(format!("embed_dim ({}) must be even and positive", self.embed_dim));
        }
        if self.blocks_per_level == 0 || self.channel_cap == 0 {
            return bad("blocks_per_level and channel_cap must be positive".into());
        }
        Ok(())
    }

    /// Channel width of encoder level `l`.
    pub fn width(&self, l: usize) -> usize {
        let cap = self.channel_cap * self.init_dim;
        (self.init_dim << l.min(40)).min(cap)
    }

    /// Checks that an `h x w` grid supports every encoder level.
    pub fn check_grid(&self, h: usize, w: usize) -> Result<()> {
        for dim in [h, w] {
            if dim == 0 || dim % (1usize << self.n_levels) != 0 {
                return Err(Error::Divisibility {
                    dim,
                    levels: self.n_levels,
                });
            }
        }
        Ok(())
    }

    pub fn to_manifest(&self, m: &mut Manifest) {
        m.set("net.channels", self.channels);
        m.set("net.n_scales", self.n_scales);
        m.set("net.n_levels", self.n_levels);
        m.set("net.init_dim", self.init_dim);
        m.set("net.blocks_per_level", self.blocks_per_level);
        m.set("net.bottleneck_blocks", self.bottleneck_blocks);
        m.set("net.embed_dim", self.embed_dim);
        m.set("net.channel_cap", self.channel_cap);
        m.set("net.groups", self.groups);
        m.set("net.kappa_dim", self.kappa_dim);
        m.set("net.context_len", self.context_len);
    }

    pub fn from_manifest(m: &Manifest) -> Result<Self> {
        let cfg = Self {
            channels: m.require("net.channels")?,
            n_scales: m.require("net.n_scales")?,
            n_levels: m.require("net.n_levels")?,
            init_dim: m.require("net.init_dim")?,
            blocks_per_level: m.require("net.blocks_per_level")?,
            bottleneck_blocks: m.require("net.bottleneck_blocks")?,
            embed_dim: m.require("net.embed_dim")?,
            channel_cap: m.require("net.channel_cap")?,
            groups: m.require("net.groups")?,
            kappa_dim: m.require("net.kappa_dim")?,
            context_len: m.require("net.context_len")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Raw sinusoidal features `(sin ω_0 τ, cos ω_0 τ, sin ω_1 τ, ...)`.
pub fn sinusoidal_features(tau: f64, d: usize) -> Result<Vec<f64>> {
    if d == 0 || d % 2 != 0 {
        return Err(Error::invalid(format!("embedding width must be even, got {d}")));
    }
    let half = d / 2;
    let mut out = Vec::with_capacity(d);
    for k in 0..half {
        let frac = if half == 1 { 0.0 } else { k as f64 / (half - 1) as f64 };
        let omega = EMBED_FREQ_MIN * (EMBED_FREQ_MAX / EMBED_FREQ_MIN).powf(frac);
        out.push((omega * tau).sin());
        out.push((omega * tau).cos());
    }
    Ok(out)
}

#[derive(Debug, Clone)]
struct Embedding {
    tau1: Linear,
    tau2: Linear,
    kappa: Option<Linear>,
    context: Vec<Linear>,
}

#[derive(Debug, Clone)]
struct EncoderLevel {
    down: Option<Conv2d>,
    stem: Option<Conv2d>,
    fuse: Option<Conv2d>,
    blocks: Vec<ResBlock>,
}

#[derive(Debug, Clone)]
struct Head {
    norm: GroupNorm,
    conv: Conv2d,
}

#[derive(Debug, Clone)]
struct DecoderLevel {
    up: Option<Conv2d>,
    blocks: Vec<ResBlock>,
    head: Option<Head>,
}

#[derive(Debug, Clone)]
struct Architecture {
    embedding: Embedding,
    encoder: Vec<EncoderLevel>,
    bottleneck: Vec<ResBlock>,
    /// Indexed by level, run from the deepest level upwards.
    decoder: Vec<DecoderLevel>,
}

impl Architecture {
    fn build(cfg: &NetConfig, store: &mut ParamStore) -> Self {
        let d = cfg.embed_dim;
        let embedding = Embedding {
            tau1: Linear::new(store, "embed.tau1", d, d, true),
            tau2: Linear::new(store, "embed.tau2", d, d, true),
            kappa: (cfg.kappa_dim > 0).then(|| Linear::new(store, "embed.kappa", cfg.kappa_dim, d, false)),
            context: (0..cfg.context_len)
                .map(|l| Linear::new(store, &format!("embed.context{l}"), cfg.channels, d, false))
                .collect(),
        };
        let zin = 8 * cfg.channels;
        let g = cfg.groups;
        let mut encoder = Vec::with_capacity(cfg.n_levels);
        for l in 0..cfg.n_levels {
            let ch = cfg.width(l);
            let down = (l > 0).then(|| Conv2d::new(store, &format!("enc{l}.down"), cfg.width(l - 1), ch, 3, 2));
            let stem = (l < cfg.n_scales).then(|| Conv2d::new(store, &format!("enc{l}.stem"), zin, ch, 3, 1));
            let fuse = (l > 0 && l < cfg.n_scales).then(|| Conv2d::new(store, &format!("enc{l}.fuse"), 2 * ch, ch, 1, 1));
            let blocks = (0..cfg.blocks_per_level)
                .map(|b| ResBlock::new(store, &format!("enc{l}.block{b}"), ch, ch, d, g))
                .collect();
            encoder.push(EncoderLevel {
                down,
                stem,
                fuse,
                blocks,
            });
        }
        let top = cfg.width(cfg.n_levels - 1);
        let bottleneck = (0..cfg.bottleneck_blocks)
            .map(|b| ResBlock::new(store, &format!("mid.block{b}"), top, top, d, g))
            .collect();
        let mut decoder = Vec::with_capacity(cfg.n_levels);
        for l in 0..cfg.n_levels {
            let ch = cfg.width(l);
            let up = (l + 1 < cfg.n_levels).then(|| Conv2d::new(store, &format!("dec{l}.up"), cfg.width(l + 1), ch, 3, 1));
            let blocks = (0..cfg.blocks_per_level)
                .map(|b| {
                    let cin = if b == 0 { 2 * ch } else { ch };
                    ResBlock::new(store, &format!("dec{l}.block{b}"), cin, ch, d, g)
                })
                .collect();
            let head = (l < cfg.n_scales).then(|| Head {
                norm: GroupNorm::new(store, &format!("head{l}.norm"), ch, g),
                conv: Conv2d::with_init(store, &format!("head{l}.conv"), ch, 4 * cfg.channels, 3, 1, Init::Zeros),
            });
            decoder.push(DecoderLevel { up, blocks, head });
        }
        Self {
            embedding,
            encoder,
            bottleneck,
            decoder,
        }
    }
}

/// One sample's inputs.
#[derive(Debug, Clone, Copy)]
pub struct NetInput<'a> {
    pub current: &'a WaveletPyramid,
    pub state: &'a WaveletPyramid,
    pub tau: f64,
    pub kappa: &'a [f64],
    pub context: &'a [Field],
}

#[derive(Debug, Clone)]
struct EmbedCache {
    features: Vec<f64>,
    t1: Vec<f64>,
    s1: Vec<f64>,
    kappa: Vec<f64>,
    pooled: Vec<Vec<f64>>,
    c: Vec<f64>,
    cond_act: Vec<f64>,
}

#[derive(Debug, Clone)]
struct EncCache {
    down_in: Option<Tensor>,
    stem_in: Option<Tensor>,
    fuse_in: Option<Tensor>,
    blocks: Vec<ResBlockCache>,
}

#[derive(Debug, Clone)]
struct HeadCache {
    norm: GroupNormCache,
    pre: Tensor,
    act: Tensor,
}

#[derive(Debug, Clone)]
struct DecCache {
    up_small: Option<Tensor>,
    up_in: Option<Tensor>,
    blocks: Vec<ResBlockCache>,
    head: Option<HeadCache>,
}

/// Activations kept for the backward pass.
#[derive(Debug, Clone)]
pub struct NetCache {
    embed: EmbedCache,
    enc: Vec<EncCache>,
    mid: Vec<ResBlockCache>,
    dec: Vec<DecCache>,
}

/// Result of a forward evaluation.
#[derive(Debug, Clone)]
pub struct ForwardPass {
    /// `û_j` per scale, laid out `(C, 4, H_j, W_j)`.
    pub outputs: Vec<Vec<f64>>,
    cache: Option<NetCache>,
}

impl ForwardPass {
    pub fn has_cache(&self) -> bool {
        self.cache.is_some()
    }
}

/// Gradients of a scalar loss.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    /// Flat, laid out like the parameter store.
    pub params: Vec<f64>,
    /// Per scale, `(2C, 4, H_j, W_j)`: current-state coefficients then noisy state.
    pub inputs: Vec<Vec<f64>>,
}

#[derive(Debug, Clone)]
pub struct VelocityNet {
    config: NetConfig,
    arch: Architecture,
    params: ParamStore,
}

impl VelocityNet {
    /// Parameter layout for `config` with every value zero.
    pub fn zeros(config: NetConfig) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let arch = Architecture::build(&config, &mut params);
        Ok(Self { config, arch, params })
    }

    /// Fan-in uniform kernels, unit norm gains, zero biases, FiLM shifts and heads.
    pub fn init(config: NetConfig, seed: u64) -> Result<Self> {
        let mut net = Self::zeros(config)?;
        net.params.initialize(seed);
        Ok(net)
    }

    pub fn config(&self) -> &NetConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    /// The conditioning vector `c`.
    pub fn embed_condition(&self, tau: f64, kappa: &[f64], context: &[Field]) -> Result<Vec<f64>> {
        Ok(self.embed(tau, kappa, context)?.c)
    }

    fn embed(&self, tau: f64, kappa: &[f64], context: &[Field]) -> Result<EmbedCache> {
        let cfg = &self.config;
        let p = &self.params;
        if kappa.len() != cfg.kappa_dim {
            return Err(Error::shape(format!(
                "expected {} physical parameters, got {}",
                cfg.kappa_dim,
                kappa.len()
            )));
        }
        if context.len() != cfg.context_len {
            return Err(Error::shape(format!(
                "expected {} context frames, got {}",
                cfg.context_len,
                context.len()
            )));
        }
        let e = &self.arch.embedding;
        let features = sinusoidal_features(tau, cfg.embed_dim)?;
        let t1 = e.tau1.forward(p, &features);
        let s1 = silu_vec(&t1);
        let mut c = e.tau2.forward(p, &s1);
        if let Some(k) = &e.kappa {
            c.iter_mut().zip(k.forward(p, kappa)).for_each(|(a, b)| *a += b);
        }
        let mut pooled = Vec::with_capacity(context.len());
        let inv_l = 1.0 / context.len().max(1) as f64;
        for (frame, proj) in context.iter().zip(&e.context) {
            if frame.channels() != cfg.channels {
                return Err(Error::shape(format!(
                    "context frame has {} channels, expected {}",
                    frame.channels(),
                    cfg.channels
                )));
            }
            let n = frame.plane_len() as f64;
            let pool: Vec<f64> = (0..frame.channels())
                .map(|ch| frame.channel(ch).iter().sum::<f64>() / n)
                .collect();
            c.iter_mut()
                .zip(proj.forward(p, &pool))
                .for_each(|(a, b)| *a += inv_l * b);
            pooled.push(pool);
        }
        let cond_act = silu_vec(&c);
        Ok(EmbedCache {
            features,
            t1,
            s1,
            kappa: kappa.to_vec(),
            pooled,
            c,
            cond_act,
        })
    }

    fn check_input(&self, input: &NetInput<'_>) -> Result<()> {
        input.current.check_compatible(input.state)?;
        let shape = input.current.shape();
        if shape.levels != self.config.n_scales {
            return Err(Error::shape(format!(
                "pyramid has {} scales, network expects {}",
                shape.levels, self.config.n_scales
            )));
        }
        if shape.channels != self.config.channels {
            return Err(Error::shape(format!(
                "pyramid has {} channels, network expects {}",
                shape.channels, self.config.channels
            )));
        }
        self.config.check_grid(shape.height, shape.width)?;
        if !(0.0..=1.0).contains(&input.tau) {
            return Err(Error::invalid(format!("flow time {} outside [0, 1]", input.tau)));
        }
        Ok(())
    }

    fn z(&self, input: &NetInput<'_>, j: usize) -> Tensor {
        let (h, w) = input.current.shape().dims(j);
        let mut data = Vec::with_capacity(2 * input.current.scale(j).len());
        data.extend_from_slice(input.current.scale(j));
        data.extend_from_slice(input.state.scale(j));
        Tensor::from_vec(8 * self.config.channels, h, w, data)
    }

    /// Forward pass keeping activations for [`VelocityNet::backward`].
    pub fn forward(&self, input: &NetInput<'_>) -> Result<ForwardPass> {
        self.check_input(input)?;
        let p = &self.params;
        let cfg = &self.config;
        let embed = self.embed(input.tau, input.kappa, input.context)?;
        let cond = &embed.cond_act;

        let mut enc = Vec::with_capacity(cfg.n_levels);
        let mut skips: Vec<Tensor> = Vec::with_capacity(cfg.n_levels);
        let mut h: Option<Tensor> = None;
        for (l, level) in self.arch.encoder.iter().enumerate() {
            let mut cache = EncCache {
                down_in: None,
                stem_in: None,
                fuse_in: None,
                blocks: Vec::new(),
            };
            let mut x = match (&level.down, h.take()) {
                (Some(down), Some(prev)) => {
                    let y = down.forward(p, &prev);
                    cache.down_in = Some(prev);
                    Some(y)
                }
                _ => None,
            };
            if let Some(stem) = &level.stem {
                let z = self.z(input, l + 1);
                let s = stem.forward(p, &z);
                cache.stem_in = Some(z);
                x = Some(match (&level.fuse, x) {
                    (Some(fuse), Some(prev)) => {
                        let cat = Tensor::concat(&prev, &s);
                        let y = fuse.forward(p, &cat);
                        cache.fuse_in = Some(cat);
                        y
                    }
                    _ => s,
                });
            }
            let mut x = x.expect("level input");
            for block in &level.blocks {
                let (y, bc) = block.forward(p, &x, cond);
                cache.blocks.push(bc);
                x = y;
            }
            skips.push(x.clone());
            enc.push(cache);
            h = Some(x);
        }

        let mut x = h.expect("encoder output");
        let mut mid = Vec::with_capacity(self.arch.bottleneck.len());
        for block in &self.arch.bottleneck {
            let (y, bc) = block.forward(p, &x, cond);
            mid.push(bc);
            x = y;
        }

        let mut dec: Vec<Option<DecCache>> = vec![None; cfg.n_levels];
        let mut outputs = vec![Vec::new(); cfg.n_scales];
        for l in (0..cfg.n_levels).rev() {
            let level = &self.arch.decoder[l];
            let mut cache = DecCache {
                up_small: None,
                up_in: None,
                blocks: Vec::new(),
                head: None,
            };
            if let Some(up) = &level.up {
                let big = upsample2(&x);
                let y = up.forward(p, &big);
                cache.up_small = Some(x);
                cache.up_in = Some(big);
                x = y;
            }
            x = Tensor::concat(&x, &skips[l]);
            for block in &level.blocks {
                let (y, bc) = block.forward(p, &x, cond);
                cache.blocks.push(bc);
                x = y;
            }
            if let Some(head) = &level.head {
                let (pre, norm) = head.norm.forward(p, &x);
                let act = Tensor::from_vec(pre.c, pre.h, pre.w, silu_vec(&pre.data));
                let out = head.conv.forward(p, &act);
                if !out.is_finite() {
                    return Err(Error::NonFinite(format!("velocity head for scale {}", l + 1)));
                }
                outputs[l] = out.data;
                cache.head = Some(HeadCache { norm, pre, act });
            }
            dec[l] = Some(cache);
        }
        Ok(ForwardPass {
            outputs,
            cache: Some(NetCache {
                embed,
                enc,
                mid,
                dec: dec.into_iter().map(|c| c.expect("decoder cache")).collect(),
            }),
        })
    }

    /// Forward pass without retaining activations.
    pub fn predict(&self, input: &NetInput<'_>) -> Result<Vec<Vec<f64>>> {
        self.forward(input).map(|p| p.outputs)
    }

    /// Per-sample forward passes; element `b` equals `forward(&inputs[b])`.
    pub fn forward_batch(&self, inputs: &[NetInput<'_>]) -> Result<Vec<ForwardPass>> {
        inputs.par_iter().map(|i| self.forward(i)).collect()
    }

    /// Reverse-mode gradients given `∂L/∂û_j` for every scale.
    pub fn backward(&self, pass: &ForwardPass, grad_out: &[Vec<f64>]) -> Result<Gradients> {
        let cache = pass
            .cache
            .as_ref()
            .ok_or_else(|| Error::invalid("backward needs a forward pass with cached activations"))?;
        let cfg = &self.config;
        if grad_out.len() != cfg.n_scales || grad_out.iter().zip(&pass.outputs).any(|(g, o)| g.len() != o.len()) {
            return Err(Error::shape("output gradient does not match the forward outputs"));
        }
        let p = &self.params;
        let cond = &cache.embed.cond_act;
        let mut grads = vec![0.0; p.len()];
        let mut gcond = vec![0.0; cfg.embed_dim];
        let mut add_cond = |g: Vec<f64>| gcond.iter_mut().zip(g).for_each(|(a, b)| *a += b);

        // Decoder, shallowest level first.
        let mut g_skips: Vec<Option<Tensor>> = vec![None; cfg.n_levels];
        let mut g_from_below: Option<Tensor> = None;
        for l in 0..cfg.n_levels {
            let level = &self.arch.decoder[l];
            let dc = &cache.dec[l];
            let mut g = g_from_below.take();
            if let (Some(head), Some(hc)) = (&level.head, &dc.head) {
                let go = Tensor::from_vec(4 * cfg.channels, hc.act.h, hc.act.w, grad_out[l].clone());
                let gact = head.conv.backward(p, &hc.act, &go, &mut grads);
                let gpre = Tensor::from_vec(gact.c, gact.h, gact.w, silu_backward(&hc.pre.data, &gact.data));
                let gx = head.norm.backward(p, &hc.norm, &gpre, &mut grads);
                match g.as_mut() {
                    Some(t) => t.add_assign(&gx),
                    None => g = Some(gx),
                }
            }
            let mut g = g.expect("decoder level gradient");
            for (block, bc) in level.blocks.iter().zip(&dc.blocks).rev() {
                let (gx, gc) = block.backward(p, bc, cond, &g, &mut grads);
                add_cond(gc);
                g = gx;
            }
            let (g_in, g_skip) = g.split(cfg.width(l));
            g_skips[l] = Some(g_skip);
            match (&level.up, &dc.up_in) {
                (Some(up), Some(up_in)) => {
                    let gbig = up.backward(p, up_in, &g_in, &mut grads);
                    g_from_below = Some(upsample2_backward(&gbig));
                }
                _ => g_from_below = Some(g_in),
            }
        }

        let mut g = g_from_below.expect("bottleneck gradient");
        for (block, bc) in self.arch.bottleneck.iter().zip(&cache.mid).rev() {
            let (gx, gc) = block.backward(p, bc, cond, &g, &mut grads);
            add_cond(gc);
            g = gx;
        }

        // Encoder, deepest level first.
        let mut inputs = vec![Vec::new(); cfg.n_scales];
        let mut g_next = Some(g);
        for l in (0..cfg.n_levels).rev() {
            let level = &self.arch.encoder[l];
            let ec = &cache.enc[l];
            let mut g = g_skips[l].take().expect("skip gradient");
            if let Some(extra) = g_next.take() {
                g.add_assign(&extra);
            }
            for (block, bc) in level.blocks.iter().zip(&ec.blocks).rev() {
                let (gx, gc) = block.backward(p, bc, cond, &g, &mut grads);
                add_cond(gc);
                g = gx;
            }
            let (g_down, g_stem) = match (&level.fuse, &ec.fuse_in) {
                (Some(fuse), Some(fuse_in)) => {
                    let gcat = fuse.backward(p, fuse_in, &g, &mut grads);
                    let (a, b) = gcat.split(cfg.width(l));
                    (Some(a), Some(b))
                }
                _ if level.stem.is_some() => (None, Some(g)),
                _ => (Some(g), None),
            };
            if let (Some(stem), Some(z), Some(gs)) = (&level.stem, &ec.stem_in, g_stem) {
                inputs[l] = stem.backward(p, z, &gs, &mut grads).data;
            }
            if let (Some(down), Some(din), Some(gd)) = (&level.down, &ec.down_in, g_down) {
                g_next = Some(down.backward(p, din, &gd, &mut grads));
            }
        }

        // Conditioning branches.
        let e = &self.arch.embedding;
        let ec = &cache.embed;
        let gc: Vec<f64> = silu_backward(&ec.c, &gcond);
        let gs1 = e.tau2.backward(p, &ec.s1, &gc, &mut grads);
        let gt1 = silu_backward(&ec.t1, &gs1);
        e.tau1.backward(p, &ec.features, &gt1, &mut grads);
        if let Some(k) = &e.kappa {
            k.backward(p, &ec.kappa, &gc, &mut grads);
        }
        let inv_l = 1.0 / ec.pooled.len().max(1) as f64;
        let gslot: Vec<f64> = gc.iter().map(|v| v * inv_l).collect();
        for (proj, pool) in e.context.iter().zip(&ec.pooled) {
            proj.backward(p, pool, &gslot, &mut grads);
        }
        Ok(Gradients { params: grads, inputs })
    }

    /// Writes `checkpoint.txt` (config plus `extra`) and one tensor file per parameter.
    pub fn save_checkpoint(&self, dir: &Path, extra: &Manifest) -> Result<()> {
        let mut m = Manifest::new();
        self.config.to_manifest(&mut m);
        m.set("net.param_count", self.param_count());
        for (k, v) in extra.entries() {
            m.set(k.clone(), v);
        }
        self.params.save(&dir.join("params"))?;
        m.write(&dir.join("checkpoint.txt"))
    }

    pub fn load_checkpoint(dir: &Path) -> Result<(Self, Manifest)> {
        let m = Manifest::read(&dir.join("checkpoint.txt"))?;
        let config = NetConfig::from_manifest(&m)?;
        let mut net = Self::zeros(config)?;
        net.params.load_values(&dir.join("params"))?;
        Ok((net, m))
    }
}

impl VelocityField for VelocityNet {
    fn velocity(
        &self,
        current: &WaveletPyramid,
        state: &WaveletPyramid,
        tau: f64,
        cond: &Conditioning,
    ) -> Result<WaveletPyramid> {
        let outputs = self.predict(&NetInput {
            current,
            state,
            tau,
            kappa: &cond.kappa,
            context: &cond.context,
        })?;
        WaveletPyramid::from_scales(state.wavelet(), *state.shape(), outputs)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::sample_noise;
    use crate::rng::StreamRng;
    use crate::wavelet::{PyramidShape, Wavelet};

    pub(crate) fn small_config(n_scales: usize) -> NetConfig {
        NetConfig {
            channels: 1,
            n_scales,
            n_levels: n_scales.max(2),
            init_dim: 8,
            blocks_per_level: 1,
            bottleneck_blocks: 1,
            embed_dim: 16,
            channel_cap: 2,
            groups: 8,
            kappa_dim: 2,
            context_len: 2,
        }
    }

    fn inputs(seed: u64, j: usize) -> (WaveletPyramid, WaveletPyramid, Vec<Field>) {
        let shape = PyramidShape::new(1, 16, 16, j).unwrap();
        let cur = sample_noise(Wavelet::Haar, &shape, &StreamRng::new(seed));
        let st = sample_noise(Wavelet::Haar, &shape, &StreamRng::new(seed + 1));
        let mut rng = StreamRng::new(seed + 2);
        let ctx = (0..2)
            .map(|_| Field::new(1, 16, 16, (0..256).map(|_| rng.normal()).collect()).unwrap())
            .collect();
        (cur, st, ctx)
    }

    fn randomized(cfg: NetConfig, seed: u64) -> VelocityNet {
        let mut net = VelocityNet::init(cfg, seed).unwrap();
        let mut rng = StreamRng::new(seed ^ 77);
        net.params_mut().values_mut().iter_mut().for_each(|v| *v += 0.1 * rng.normal());
        net
    }

    #[test]
    fn sinusoidal_features_at_zero() {
        let f = sinusoidal_features(0.0, 8).unwrap();
        assert_eq!(f, vec![0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
        assert!(sinusoidal_features(0.1, 7).is_err());
    }

    #[test]
    fn output_shapes_and_zero_init() {
        for j in [1, 2, 3] {
            let net = VelocityNet::init(small_config(j), 3).unwrap();
            let (cur, st, ctx) = inputs(1, j);
            let out = net
                .predict(&NetInput { current: &cur, state: &st, tau: 0.3, kappa: &[0.1, 0.2], context: &ctx })
                .unwrap();
            for (jj, o) in out.iter().enumerate() {
                assert_eq!(o.len(), cur.scale(jj + 1).len());
                assert!(o.iter().all(|v| *v == 0.0));
            }
        }
    }

    #[test]
    fn rejects_bad_inputs() {
        let net = VelocityNet::init(small_config(2), 3).unwrap();
        let (cur, st, ctx) = inputs(1, 2);
        let ok = NetInput { current: &cur, state: &st, tau: 0.3, kappa: &[0.1, 0.2], context: &ctx };
        assert!(net.predict(&NetInput { kappa: &[0.1], ..ok }).is_err());
        assert!(net.predict(&NetInput { context: &ctx[..1], ..ok }).is_err());
        let (cur3, st3, _) = inputs(1, 3);
        assert!(net.predict(&NetInput { current: &cur3, state: &st3, ..ok }).is_err());
        let cfg = NetConfig { n_scales: 3, n_levels: 2, ..small_config(2) };
        assert!(VelocityNet::init(cfg, 0).is_err());
    }

    #[test]
    fn zero_gradient_gives_zero_gradients_and_linearity() {
        let net = randomized(small_config(2), 5);
        let (cur, st, ctx) = inputs(2, 2);
        let pass = net
            .forward(&NetInput { current: &cur, state: &st, tau: 0.6, kappa: &[0.3, -0.2], context: &ctx })
            .unwrap();
        let zeros: Vec<Vec<f64>> = pass.outputs.iter().map(|o| vec![0.0; o.len()]).collect();
        let g0 = net.backward(&pass, &zeros).unwrap();
        assert!(g0.params.iter().all(|v| *v == 0.0));

        let mut rng = StreamRng::new(4);
        let g: Vec<Vec<f64>> = pass.outputs.iter().map(|o| o.iter().map(|_| rng.normal()).collect()).collect();
        let g2: Vec<Vec<f64>> = g.iter().map(|v| v.iter().map(|x| 2.0 * x).collect()).collect();
        let a = net.backward(&pass, &g).unwrap();
        let b = net.backward(&pass, &g2).unwrap();
        for (x, y) in a.params.iter().zip(&b.params) {
            assert!((2.0 * x - y).abs() <= 1e-12 * y.abs().max(1.0));
        }
    }

    #[test]
    fn conditioning_branches() {
        let net = randomized(small_config(2), 6);
        let zero_ctx = vec![Field::zeros(1, 16, 16); 2];
        let tau_only = net.embed_condition(0.4, &[0.0, 0.0], &zero_ctx).unwrap();
        let feats = sinusoidal_features(0.4, 16).unwrap();
        let e = &net.arch.embedding;
        let expected = e.tau2.forward(net.params(), &silu_vec(&e.tau1.forward(net.params(), &feats)));
        assert_eq!(tau_only, expected);

        let k1 = net.embed_condition(0.4, &[0.5, -1.0], &zero_ctx).unwrap();
        let k2 = net.embed_condition(0.4, &[1.0, -2.0], &zero_ctx).unwrap();
        for ((a, b), t) in k1.iter().zip(&k2).zip(&tau_only) {
            assert!(((b - t) - 2.0 * (a - t)).abs() < 1e-12);
        }

        let (_, _, ctx) = inputs(3, 2);
        let swapped = vec![ctx[1].clone(), ctx[0].clone()];
        let c1 = net.embed_condition(0.4, &[0.0, 0.0], &ctx).unwrap();
        let c2 = net.embed_condition(0.4, &[0.0, 0.0], &swapped).unwrap();
        assert_ne!(c1, c2);
    }

    #[test]
    fn film_path_is_live() {
        let net = randomized(small_config(2), 7);
        let (cur, st, ctx) = inputs(4, 2);
        let a = net.predict(&NetInput { current: &cur, state: &st, tau: 0.1, kappa: &[0.0, 0.0], context: &ctx }).unwrap();
        let b = net.predict(&NetInput { current: &cur, state: &st, tau: 0.9, kappa: &[0.0, 0.0], context: &ctx }).unwrap();
        assert_ne!(a, b);
    }

    #[test]
    fn single_scale_ignores_coarser_scales() {
        let net = randomized(small_config(1), 8);
        assert_eq!(net.config().n_scales, 1);
        assert!(net.params().specs().iter().all(|s| !s.name.starts_with("enc1.stem")));
    }

    #[test]
    fn batch_matches_single() {
        let net = randomized(small_config(2), 9);
        let data: Vec<_> = (0..3).map(|s| inputs(10 * s, 2)).collect();
        let ins: Vec<NetInput> = data
            .iter()
            .map(|(c, s, x)| NetInput { current: c, state: s, tau: 0.5, kappa: &[0.1, 0.1], context: x })
            .collect();
        let batch = net.forward_batch(&ins).unwrap();
        for (b, i) in batch.iter().zip(&ins) {
            assert_eq!(b.outputs, net.predict(i).unwrap());
        }
    }

    #[test]
    fn backward_requires_cache() {
        let net = randomized(small_config(1), 1);
        let pass = ForwardPass { outputs: vec![vec![0.0; 256]], cache: None };
        assert!(net.backward(&pass, &[vec![0.0; 256]]).is_err());
    }

    #[test]
    fn parameter_count_follows_width_squared() {
        let three = VelocityNet::zeros(NetConfig { n_scales: 3, n_levels: 3, init_dim: 64, ..NetConfig::default() }).unwrap();
        let one = VelocityNet::zeros(NetConfig { n_scales: 1, n_levels: 3, init_dim: 40, ..NetConfig::default() }).unwrap();
        assert!(three.param_count() > one.param_count());
    }

    #[test]
    fn checkpoint_round_trip() {
        let net = randomized(small_config(2), 11);
        let dir = tempfile::tempdir().unwrap();
        let mut extra = Manifest::new();
        extra.set("step", 7);
        net.save_checkpoint(dir.path(), &extra).unwrap();
        let (back, m) = VelocityNet::load_checkpoint(dir.path()).unwrap();
        assert_eq!(back.params(), net.params());
        assert_eq!(m.get("step"), Some("7"));
    }

    #[test]
    fn same_seed_same_store() {
        let a = VelocityNet::init(small_config(2), 42).unwrap();
        let b = VelocityNet::init(small_config(2), 42).unwrap();
        assert_eq!(a.params(), b.params());
        let c = VelocityNet::init(small_config(2), 43).unwrap();
        assert_ne!(a.params(), c.params());
    }
}
