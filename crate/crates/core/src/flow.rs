//! Conditional flow matching in wavelet space.
//!
//! One straight-line flow per scale carries standard Gaussian noise `ε_j` to
//! the target coefficients `w_j^{t+1}`: `w_j^τ = τ w_j^{t+1} + (1-τ) ε_j`, with
//! the constant velocity `u_j = w_j^{t+1} - ε_j`. Sampling integrates a
//! learned velocity with forward Euler from `τ = 0` to `τ = 1`.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::field::{Field, Standardizer};
use crate::metrics::{EnsembleForecast, ForecastMeta};
use crate::rng::StreamRng;
use crate::wavelet::{dwt_multiscale, idwt_multiscale, FilterBank, PyramidShape, Wavelet, WaveletPyramid};

/// Stabiliser added to the target-velocity variance in the per-scale loss.
pub const LOSS_EPS: f64 = 1e-4;

/// Default number of Euler steps.
pub const DEFAULT_EULER_STEPS: usize = 50;

/// Default ensemble size.
pub const DEFAULT_MEMBERS: usize = 8;

/// Everything the velocity model sees besides the two pyramids.
#[derive(Debug, Clone, Default)]
pub struct Conditioning {
    /// Static physical parameters κ.
    pub kappa: Vec<f64>,
    /// The `L` frames preceding the current state, oldest first.
    pub context: Vec<Field>,
}

/// A velocity model `u(z, τ, κ, context)` over wavelet pyramids.
pub trait VelocityField: Sync {
    /// Predicted velocity for the noisy `state` at flow time `tau`, given the
    /// conditioning pyramid `current` of the present physical state.
    fn velocity(
        &self,
        current: &WaveletPyramid,
        state: &WaveletPyramid,
        tau: f64,
        cond: &Conditioning,
    ) -> Result<WaveletPyramid>;
}

/// One training draw: target, noise, interpolant and regression target.
#[derive(Debug, Clone)]
pub struct FlowSample {
    pub tau: f64,
    pub noise: WaveletPyramid,
    pub target: WaveletPyramid,
    pub interpolant: WaveletPyramid,
    pub velocity: WaveletPyramid,
}

impl FlowSample {
    /// Builds the sample from a single noise draw shared by the interpolant and the velocity.
    pub fn new(target: WaveletPyramid, noise: WaveletPyramid, tau: f64) -> Result<Self> {
        let interpolant = interpolate(&target, &noise, tau)?;
        let velocity = target_velocity(&target, &noise)?;
        Ok(Self {
            tau,
            noise,
            target,
            interpolant,
            velocity,
        })
    }
}

/// I.i.d. standard normal coefficients in every sub-band; scale `j` uses stream `rng.fork(j)`.
pub fn sample_noise(wavelet: Wavelet, shape: &PyramidShape, rng: &StreamRng) -> WaveletPyramid {
    let mut out = WaveletPyramid::zeros(wavelet, *shape);
    for j in 1..=shape.levels {
        rng.fork(j as u64).fill_normal(out.scale_mut(j));
    }
    out
}

/// `τ · target + (1 - τ) · noise` at every scale.
pub fn interpolate(target: &WaveletPyramid, noise: &WaveletPyramid, tau: f64) -> Result<WaveletPyramid> {
    if !(0.0..=1.0).contains(&tau) {
        return Err(Error::invalid(format!("flow time must lie in [0, 1], got {tau}")));
    }
    target.zip_map(noise, |t, n| tau * t + (1.0 - tau) * n)
}

/// `target - noise` at every scale.
pub fn target_velocity(target: &WaveletPyramid, noise: &WaveletPyramid) -> Result<WaveletPyramid> {
    target.zip_map(noise, |t, n| t - n)
}

/// Which axes the `⟨·⟩` averages of the per-scale loss run over.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LossAveraging {
    /// One ratio per `(b, c)` over the joint `4 × H_j × W_j` block.
    #[default]
    Joint,
    /// One ratio per `(b, c, sub-band)` over `H_j × W_j`, averaged over the four sub-bands.
    PerSubband,
}

impl std::str::FromStr for LossAveraging {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "joint" => Ok(Self::Joint),
            "per-subband" | "per_subband" => Ok(Self::PerSubband),
            other => Err(Error::invalid(format!("unknown loss averaging `{other}`"))),
        }
    }
}

impl std::fmt::Display for LossAveraging {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Joint => "joint",
            Self::PerSubband => "per-subband",
        })
    }
}

/// Variance-normalised squared error of one scale across a batch.
///
/// `preds[b]` and `targets[b]` are `(C, 4, H_j, W_j)` tensors of sample `b`.
/// Returns the loss and, per sample, its gradient with respect to the prediction.
pub fn scale_loss_with_grad(
    preds: &[&[f64]],
    targets: &[&[f64]],
    channels: usize,
    averaging: LossAveraging,
) -> Result<(f64, Vec<Vec<f64>>)> {
    if preds.len() != targets.len() || preds.is_empty() {
        return Err(Error::shape(format!(
            "{} predictions for {} targets",
            preds.len(),
            targets.len()
        )));
    }
    if channels == 0 {
        return Err(Error::shape("zero channels"));
    }
    let len = targets[0].len();
    if len % (4 * channels) != 0 {
        return Err(Error::shape(format!("scale tensor of {len} values is not C x 4 x H x W")));
    }
    let groups = match averaging {
        LossAveraging::Joint => channels,
        LossAveraging::PerSubband => 4 * channels,
    };
    let group_len = len / groups;
    let norm = 1.0 / (preds.len() * groups) as f64;
    let mut total = 0.0;
    let mut grads = Vec::with_capacity(preds.len());
    for (p, u) in preds.iter().zip(targets) {
        if p.len() != len || u.len() != len {
            return Err(Error::shape(format!(
                "scale tensors of {} and {} values, expected {len}",
                p.len(),
                u.len()
            )));
        }
        let mut g = vec![0.0; len];
        for k in 0..groups {
            let range = k * group_len..(k + 1) * group_len;
            let (ps, us) = (&p[range.clone()], &u[range.clone()]);
            let n = group_len as f64;
            let mean = us.iter().sum::<f64>() / n;
            let var = us.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let denom = var + LOSS_EPS;
            let mse = ps.iter().zip(us).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / n;
            total += norm * mse / denom;
            let scale = norm * 2.0 / (n * denom);
            for ((gi, a), b) in g[range].iter_mut().zip(ps).zip(us) {
                *gi = scale * (a - b);
            }
        }
        grads.push(g);
    }
    if !total.is_finite() {
        return Err(Error::NonFinite("per-scale loss".into()));
    }
    Ok((total, grads))
}

/// Loss value only; see [`scale_loss_with_grad`].
pub fn scale_loss(preds: &[&[f64]], targets: &[&[f64]], channels: usize, averaging: LossAveraging) -> Result<f64> {
    scale_loss_with_grad(preds, targets, channels, averaging).map(|(l, _)| l)
}

/// Per-scale losses with their weighted mean.
#[derive(Debug, Clone, PartialEq)]
pub struct LossBreakdown {
    pub per_scale: Vec<f64>,
    pub weights: Vec<f64>,
    pub total: f64,
}

/// `Σ λ_j ℓ_j / Σ λ_j`.
pub fn total_loss(per_scale: &[f64], weights: &[f64]) -> Result<LossBreakdown> {
    if per_scale.is_empty() || per_scale.len() != weights.len() {
        return Err(Error::shape(format!(
            "{} per-scale losses for {} weights",
            per_scale.len(),
            weights.len()
        )));
    }
    if weights.iter().any(|w| !(*w >= 0.0 && w.is_finite())) {
        return Err(Error::invalid("scale weights must be finite and non-negative"));
    }
    let sum: f64 = weights.iter().sum();
    if sum <= 0.0 {
        return Err(Error::invalid("scale weights must not all be zero"));
    }
    let total = per_scale.iter().zip(weights).map(|(l, w)| w / sum * l).sum();
    Ok(LossBreakdown {
        per_scale: per_scale.to_vec(),
        weights: weights.to_vec(),
        total,
    })
}

/// Sampler settings.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplerConfig {
    /// Euler steps `N`; `Δτ = 1/N`.
    pub n_steps: usize,
    /// Ensemble size `M`.
    pub members: usize,
    /// Root seed; member `m` uses `seed + m` unless `member_seeds` is set.
    pub seed: u64,
    pub member_seeds: Option<Vec<u64>>,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            n_steps: DEFAULT_EULER_STEPS,
            members: DEFAULT_MEMBERS,
            seed: 0,
            member_seeds: None,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_steps == 0 {
            return Err(Error::invalid("sampler needs at least one Euler step"));
        }
        if self.members == 0 {
            return Err(Error::invalid("ensemble needs at least one member"));
        }
        if let Some(s) = &self.member_seeds {
            if s.len() != self.members {
                return Err(Error::invalid(format!(
                    "{} member seeds for {} members",
                    s.len(),
                    self.members
                )));
            }
        }
        Ok(())
    }

    pub fn seeds(&self) -> Vec<u64> {
        match &self.member_seeds {
            Some(s) => s.clone(),
            None => (0..self.members as u64).map(|m| self.seed.wrapping_add(m)).collect(),
        }
    }
}

/// Integrates the velocity field from `τ = 0` (noise drawn from `rng`) to `τ = 1`
/// with `n_steps` uniform Euler steps.
pub fn euler_sample(
    net: &dyn VelocityField,
    current: &WaveletPyramid,
    cond: &Conditioning,
    n_steps: usize,
    rng: &StreamRng,
) -> Result<WaveletPyramid> {
    let noise = sample_noise(current.wavelet(), current.shape(), rng);
    euler_integrate(net, current, cond, n_steps, noise)
}

/// Euler integration from a given initial state.
pub fn euler_integrate(
    net: &dyn VelocityField,
    current: &WaveletPyramid,
    cond: &Conditioning,
    n_steps: usize,
    initial: WaveletPyramid,
) -> Result<WaveletPyramid> {
    if n_steps == 0 {
        return Err(Error::invalid("sampler needs at least one Euler step"));
    }
    current.check_compatible(&initial)?;
    let dt = 1.0 / n_steps as f64;
    let mut state = initial;
    for n in 0..n_steps {
        let tau = n as f64 / n_steps as f64;
        let v = net.velocity(current, &state, tau, cond)?;
        if !v.is_finite() {
            return Err(Error::NonFinite(format!(
                "velocity at Euler step {n} (tau = {tau})"
            )));
        }
        state.add_scaled(dt, &v)?;
    }
    Ok(state)
}

/// Autoregressive ensemble rollout.
///
/// `initial` holds `L + 1` standardized frames (context oldest first, current
/// state last). Each member repeatedly transforms the current state, samples
/// the next pyramid with fresh noise from stream `seed_m / step`, inverts the
/// transform and shifts the context window. Outputs are destandardized when a
/// standardizer is supplied. A member whose state turns non-finite stops; its
/// failure step is recorded and its remaining frames are NaN.
#[allow(clippy::too_many_arguments)]
pub fn rollout(
    net: &dyn VelocityField,
    initial: &[Field],
    kappa: &[f64],
    steps: usize,
    cfg: &SamplerConfig,
    bank: &FilterBank,
    levels: usize,
    standardizer: Option<&Standardizer>,
) -> Result<EnsembleForecast> {
    cfg.validate()?;
    let current = initial
        .last()
        .ok_or_else(|| Error::invalid("rollout needs at least the current frame"))?;
    let (c, h, w) = current.shape();
    PyramidShape::new(c, h, w, levels)?;
    if initial.iter().any(|f| f.shape() != (c, h, w)) {
        return Err(Error::shape("initial frames differ in shape"));
    }
    let seeds = cfg.seeds();
    let results: Vec<(Vec<Field>, Option<usize>)> = seeds
        .par_iter()
        .map(|&seed| rollout_member(net, initial, kappa, steps, cfg.n_steps, bank, levels, seed))
        .collect::<Result<Vec<_>>>()?;

    let mut members = Vec::with_capacity(results.len());
    let mut failures = Vec::with_capacity(results.len());
    for (frames, failure) in results {
        let frames = match standardizer {
            Some(s) => frames.iter().map(|f| s.destandardize(f)).collect::<Result<Vec<_>>>()?,
            None => frames,
        };
        members.push(frames);
        failures.push(failure);
    }
    let meta = ForecastMeta {
        seeds,
        euler_steps: cfg.n_steps,
        wavelet: bank.wavelet(),
        levels,
        failures,
        model: String::new(),
    };
    EnsembleForecast::new(members, None, meta, (c, h, w), steps)
}

#[allow(clippy::too_many_arguments)]
fn rollout_member(
    net: &dyn VelocityField,
    initial: &[Field],
    kappa: &[f64],
    steps: usize,
    n_steps: usize,
    bank: &FilterBank,
    levels: usize,
    seed: u64,
) -> Result<(Vec<Field>, Option<usize>)> {
    let root = StreamRng::new(seed);
    let mut window: Vec<Field> = initial.to_vec();
    let (c, h, w) = window[0].shape();
    let mut frames = Vec::with_capacity(steps);
    for step in 0..steps {
        let current = window.last().expect("non-empty window");
        let pyramid = dwt_multiscale(current, bank, levels)?;
        let cond = Conditioning {
            kappa: kappa.to_vec(),
            context: window[..window.len() - 1].to_vec(),
        };
        let next = euler_sample(net, &pyramid, &cond, n_steps, &root.fork(step as u64))
            .and_then(|p| idwt_multiscale(&p, bank));
        match next {
            Ok(field) if field.is_finite() => {
                frames.push(field.clone());
                window.remove(0);
                window.push(field);
            }
            Ok(_) | Err(Error::NonFinite(_)) => {
                frames.extend((step..steps).map(|_| Field::filled(c, h, w, f64::NAN)));
                return Ok((frames, Some(step + 1)));
            }
            Err(e) => return Err(e),
        }
    }
    Ok((frames, None))
}
