//! Mini-batch flow-matching training with AdamW and a warmup + cosine schedule.

use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::field::{Field, Trajectory};
use crate::flow::{sample_noise, scale_loss_with_grad, total_loss, FlowSample, LossAveraging, LossBreakdown};
use crate::manifest::{join, Manifest};
use crate::pdegen::Dataset;
use crate::rng::StreamRng;
use crate::velocitynet::{NetConfig, NetInput, VelocityNet};
use crate::wavelet::{dwt_multiscale, FilterBank, PyramidShape, Wavelet, WaveletPyramid};

/// AdamW hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 3e-4,
            weight_decay: 1e-2,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
    pub hp: AdamConfig,
}

impl OptState {
    pub fn new(n: usize, hp: AdamConfig) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            step: 0,
            hp,
        }
    }
}

/// One decoupled-weight-decay Adam update with learning rate `lr`.
pub fn adamw_step(params: &mut [f64], grads: &[f64], state: &mut OptState, lr: f64) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::shape(format!(
            "{} parameters, {} gradients, {} optimizer slots",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
        return Err(Error::NonFinite(format!("gradient entry {i}")));
    }
    let hp = state.hp;
    state.step += 1;
    let t = state.step as i32;
    let (c1, c2) = (1.0 - hp.beta1.powi(t), 1.0 - hp.beta2.powi(t));
    for (((p, &g), m), v) in params.iter_mut().zip(grads).zip(&mut state.m).zip(&mut state.v) {
        *m = hp.beta1 * *m + (1.0 - hp.beta1) * g;
        *v = hp.beta2 * *v + (1.0 - hp.beta2) * g * g;
        let (mh, vh) = (*m / c1, *v / c2);
        *p -= lr * (mh / (vh.sqrt() + hp.eps) + hp.weight_decay * *p);
    }
    Ok(())
}

/// Rescales `grads` in place so its global L2 norm is at most `max_norm`; returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut [f64], max_norm: f64) -> f64 {
    let norm = grads.iter().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm && norm.is_finite() {
        let s = max_norm / norm;
        grads.iter_mut().for_each(|g| *g *= s);
    }
    norm
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub warmup: usize,
    pub batch: usize,
    pub clip: f64,
    pub eta_min: f64,
    pub seed: u64,
    /// Per-scale weights `λ_j`; empty means all ones.
    pub lambdas: Vec<f64>,
    pub wavelet: Wavelet,
    pub averaging: LossAveraging,
    pub adam: AdamConfig,
    /// Caps the number of optimizer steps per epoch.
    pub steps_per_epoch: Option<usize>,
    /// Caps the number of validation windows (evenly spaced).
    pub max_val_windows: Option<usize>,
    /// Training windows re-scored with frozen draws before and after training.
    pub probe_windows: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            warmup: 20,
            batch: 32,
            clip: 1.0,
            eta_min: 1e-7,
            seed: 0,
            lambdas: Vec::new(),
            wavelet: Wavelet::Haar,
            averaging: LossAveraging::Joint,
            adam: AdamConfig::default(),
            steps_per_epoch: None,
            max_val_windows: None,
            probe_windows: 64,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.warmup >= self.epochs {
            return Err(Error::invalid(format!(
                "need warmup < epochs, got warmup {} and epochs {}",
                self.warmup, self.epochs
            )));
        }
        if self.batch == 0 {
            return Err(Error::invalid("batch size must be at least 1"));
        }
        if !(self.clip > 0.0) {
            return Err(Error::invalid("gradient clip norm must be positive"));
        }
        if self.steps_per_epoch == Some(0) {
            return Err(Error::invalid("steps per epoch must be at least 1"));
        }
        Ok(())
    }

    /// `λ` for `n_scales` scales.
    pub fn weights(&self, n_scales: usize) -> Result<Vec<f64>> {
        if self.lambdas.is_empty() {
            return Ok(vec![1.0; n_scales]);
        }
        if self.lambdas.len() != n_scales {
            return Err(Error::invalid(format!(
                "{} scale weights for {n_scales} scales",
                self.lambdas.len()
            )));
        }
        Ok(self.lambdas.clone())
    }

    pub fn to_manifest(&self, m: &mut Manifest) {
        m.set("train.epochs", self.epochs);
        m.set("train.warmup", self.warmup);
        m.set("train.batch", self.batch);
        m.set("train.clip", self.clip);
        m.set("train.eta_min", self.eta_min);
        m.set("train.seed", self.seed);
        m.set("train.lambdas", join(&self.lambdas));
        m.set("train.wavelet", self.wavelet);
        m.set("train.averaging", self.averaging);
        m.set("train.lr", self.adam.lr);
        m.set("train.weight_decay", self.adam.weight_decay);
        m.set("train.beta1", self.adam.beta1);
        m.set("train.beta2", self.adam.beta2);
        m.set("train.adam_eps", self.adam.eps);
    }
}

/// Linear warmup from 0 to `lr`, then cosine decay towards `eta_min`.
pub fn cosine_lr(epoch: usize, cfg: &TrainConfig) -> Result<f64> {
    if epoch >= cfg.epochs {
        return Err(Error::invalid(format!("epoch {epoch} outside 0..{}", cfg.epochs)));
    }
    cfg.validate()?;
    let lr = cfg.adam.lr;
    if epoch < cfg.warmup {
        return Ok(lr * epoch as f64 / cfg.warmup as f64);
    }
    let progress = (epoch - cfg.warmup) as f64 / (cfg.epochs - cfg.warmup) as f64;
    Ok(cfg.eta_min + 0.5 * (lr - cfg.eta_min) * (1.0 + (std::f64::consts::PI * progress).cos()))
}

/// One training pair: `context` frames (oldest first), the current state, the next state.
#[derive(Debug, Clone, Copy)]
pub struct TrainExample<'a> {
    pub context: &'a [Field],
    pub current: &'a Field,
    pub target: &'a Field,
    pub kappa: &'a [f64],
}

/// `(τ, ε)` for one example, drawn from `rng`.
pub fn flow_draw(wavelet: Wavelet, shape: &PyramidShape, rng: &StreamRng) -> (f64, WaveletPyramid) {
    let tau = rng.fork(0).uniform();
    (tau, sample_noise(wavelet, shape, &rng.fork(1)))
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepReport {
    pub loss: LossBreakdown,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
}

struct Prepared {
    current: WaveletPyramid,
    sample: FlowSample,
}

fn prepare(ex: &TrainExample<'_>, net: &NetConfig, bank: &FilterBank, rng: &StreamRng) -> Result<Prepared> {
    let current = dwt_multiscale(ex.current, bank, net.n_scales)?;
    let target = dwt_multiscale(ex.target, bank, net.n_scales)?;
    let (tau, noise) = flow_draw(bank.wavelet(), target.shape(), rng);
    Ok(Prepared {
        current,
        sample: FlowSample::new(target, noise, tau)?,
    })
}

fn input<'a>(p: &'a Prepared, ex: &TrainExample<'a>) -> NetInput<'a> {
    NetInput {
        current: &p.current,
        state: &p.sample.interpolant,
        tau: p.sample.tau,
        kappa: ex.kappa,
        context: ex.context,
    }
}

fn check_losses(per_scale: &[f64]) -> Result<()> {
    match per_scale.iter().position(|l| !l.is_finite()) {
        Some(j) => Err(Error::NonFinite(format!("loss at scale {}", j + 1))),
        None => Ok(()),
    }
}

/// Per-sample `(per-scale loss / B, parameter gradient)` for samples `b` with stream `rng.fork(b)`.
fn sample_losses(
    net: &VelocityNet,
    batch: &[TrainExample<'_>],
    bank: &FilterBank,
    weights: &[f64],
    averaging: LossAveraging,
    rng: &StreamRng,
    with_grad: bool,
) -> Result<Vec<(Vec<f64>, Option<Vec<f64>>)>> {
    let cfg = net.config();
    let b_inv = 1.0 / batch.len() as f64;
    let wsum: f64 = weights.iter().sum();
    batch
        .par_iter()
        .enumerate()
        .map(|(b, ex)| {
            let prep = prepare(ex, cfg, bank, &rng.fork(b as u64))?;
            let inp = input(&prep, ex);
            let (outputs, pass) = if with_grad {
                let pass = net.forward(&inp)?;
                (None, Some(pass))
            } else {
                (Some(net.predict(&inp)?), None)
            };
            let outputs = match (&outputs, &pass) {
                (Some(o), _) => o,
                (None, Some(p)) => &p.outputs,
                _ => unreachable!(),
            };
            let mut losses = Vec::with_capacity(cfg.n_scales);
            let mut grad_out = Vec::with_capacity(cfg.n_scales);
            for j in 1..=cfg.n_scales {
                let (l, mut g) = scale_loss_with_grad(
                    &[&outputs[j - 1]],
                    &[prep.sample.velocity.scale(j)],
                    cfg.channels,
                    averaging,
                )
                .map_err(|e| match e {
                    Error::NonFinite(_) => Error::NonFinite(format!("loss at scale {j}")),
                    e => e,
                })?;
                losses.push(l * b_inv);
                let s = weights[j - 1] / wsum * b_inv;
                g.pop().into_iter().for_each(|gj| grad_out.push(gj.into_iter().map(|v| v * s).collect()));
            }
            let grads = match &pass {
                Some(p) => Some(net.backward(p, &grad_out)?.params),
                None => None,
            };
            Ok((losses, grads))
        })
        .collect()
}

fn reduce_losses(per_sample: &[(Vec<f64>, Option<Vec<f64>>)], n_scales: usize) -> Vec<f64> {
    let mut per_scale = vec![0.0; n_scales];
    for (l, _) in per_sample {
        per_scale.iter_mut().zip(l).for_each(|(a, b)| *a += b);
    }
    per_scale
}

/// One optimizer step on `batch`. Sample `b` draws its `(τ, ε)` from `rng.fork(b)`;
/// gradients are reduced in ascending sample order.
#[allow(clippy::too_many_arguments)]
pub fn train_step(
    net: &mut VelocityNet,
    opt: &mut OptState,
    batch: &[TrainExample<'_>],
    bank: &FilterBank,
    cfg: &TrainConfig,
    lr: f64,
    rng: &StreamRng,
) -> Result<StepReport> {
    if batch.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    let n_scales = net.config().n_scales;
    let weights = cfg.weights(n_scales)?;
    let per_sample = sample_losses(net, batch, bank, &weights, cfg.averaging, rng, true)?;
    let per_scale = reduce_losses(&per_sample, n_scales);
    check_losses(&per_scale)?;
    let loss = total_loss(&per_scale, &weights)?;

    let mut grads = vec![0.0; net.param_count()];
    for (_, g) in &per_sample {
        let g = g.as_ref().expect("computed with gradients");
        grads.iter_mut().zip(g).for_each(|(a, b)| *a += b);
    }
    let grad_norm = clip_grad_norm(&mut grads, cfg.clip);
    adamw_step(net.params_mut().values_mut(), &grads, opt, lr)?;
    Ok(StepReport { loss, grad_norm })
}

/// Loss of `examples` without updating; example `i` uses stream `rng.fork(i)`.
pub fn evaluate_loss(
    net: &VelocityNet,
    examples: &[TrainExample<'_>],
    bank: &FilterBank,
    cfg: &TrainConfig,
    rng: &StreamRng,
) -> Result<LossBreakdown> {
    if examples.is_empty() {
        return Err(Error::invalid("no examples to evaluate"));
    }
    let n_scales = net.config().n_scales;
    let weights = cfg.weights(n_scales)?;
    let per_sample = sample_losses(net, examples, bank, &weights, cfg.averaging, rng, false)?;
    let per_scale = reduce_losses(&per_sample, n_scales);
    check_losses(&per_scale)?;
    total_loss(&per_scale, &weights)
}

/// `(trajectory, t)` pairs with `context_len` frames before `t` and a successor after it.
pub fn windows(trajectories: &[usize], lens: &[usize], context_len: usize) -> Vec<(usize, usize)> {
    trajectories
        .iter()
        .flat_map(|&i| (context_len..lens[i].saturating_sub(1)).map(move |t| (i, t)))
        .collect()
}

fn example<'a>(trajs: &'a [Trajectory], (i, t): (usize, usize), context_len: usize) -> TrainExample<'a> {
    let frames = trajs[i].frames();
    TrainExample {
        context: &frames[t - context_len..t],
        current: &frames[t],
        target: &frames[t + 1],
        kappa: trajs[i].params().values(),
    }
}

fn evenly_spaced<T: Copy>(items: &[T], cap: Option<usize>) -> Vec<T> {
    match cap {
        Some(k) if k < items.len() => (0..k).map(|i| items[i * items.len() / k]).collect(),
        _ => items.to_vec(),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train: LossBreakdown,
    pub val: LossBreakdown,
    pub steps: usize,
}

#[derive(Debug, Clone)]
pub struct FitResult {
    pub best: VelocityNet,
    pub last: VelocityNet,
    pub best_epoch: usize,
    pub curve: Vec<EpochRecord>,
    /// Frozen-draw loss on the probe windows before the first step.
    pub probe_initial: LossBreakdown,
    /// The same after the last step.
    pub probe_final: LossBreakdown,
    pub steps: usize,
}

/// Loss curve as CSV: `epoch,lr,train_total,val_total,l1..lJ,val_l1..val_lJ`.
pub fn curve_csv(curve: &[EpochRecord]) -> String {
    let j = curve.first().map_or(0, |r| r.train.per_scale.len());
    let mut s = String::from("epoch,lr,train_total,val_total");
    (1..=j).for_each(|k| write!(s, ",l{k}").unwrap());
    (1..=j).for_each(|k| write!(s, ",val_l{k}").unwrap());
    s.push('\n');
    for r in curve {
        write!(s, "{},{},{},{}", r.epoch, r.lr, r.train.total, r.val.total).unwrap();
        r.train.per_scale.iter().chain(&r.val.per_scale).for_each(|v| write!(s, ",{v}").unwrap());
        s.push('\n');
    }
    s
}

/// Trains a fresh network initialised from `cfg.seed`. With `out`, writes the
/// best-validation checkpoint to `out/checkpoint` and the curve to `out/loss.csv`.
pub fn fit(dataset: &Dataset, net_cfg: &NetConfig, cfg: &TrainConfig, out: Option<&Path>) -> Result<FitResult> {
    cfg.validate()?;
    net_cfg.validate()?;
    let (c, h, w) = dataset.frame_shape();
    if net_cfg.channels != c || net_cfg.kappa_dim != dataset.kappa_dim() {
        return Err(Error::invalid(format!(
            "network expects {} channels and {} parameters, dataset has {c} and {}",
            net_cfg.channels,
            net_cfg.kappa_dim,
            dataset.kappa_dim()
        )));
    }
    net_cfg.check_grid(h, w)?;
    PyramidShape::new(c, h, w, net_cfg.n_scales)?;
    let weights = cfg.weights(net_cfg.n_scales)?;

    let trajs: Vec<Trajectory> = (0..dataset.trajectories.len())
        .map(|i| dataset.standardized(i))
        .collect::<Result<_>>()?;
    let lens: Vec<usize> = trajs.iter().map(Trajectory::len).collect();
    let l = net_cfg.context_len;
    let train_w = windows(&dataset.train, &lens, l);
    let val_w = evenly_spaced(&windows(&dataset.val, &lens, l), cfg.max_val_windows);
    if train_w.is_empty() || val_w.is_empty() {
        return Err(Error::invalid(format!(
            "empty dataset: {} training and {} validation windows with context {l}",
            train_w.len(),
            val_w.len()
        )));
    }
    let probe_w: Vec<_> = train_w.iter().copied().take(cfg.probe_windows.max(1)).collect();
    let val_ex: Vec<TrainExample> = val_w.iter().map(|&p| example(&trajs, p, l)).collect();
    let probe_ex: Vec<TrainExample> = probe_w.iter().map(|&p| example(&trajs, p, l)).collect();

    let bank = FilterBank::new(cfg.wavelet)?;
    let root = StreamRng::new(cfg.seed);
    let (shuffle, draws, val_rng, probe_rng) = (root.fork(1), root.fork(2), root.fork(3), root.fork(4));
    let mut net = VelocityNet::init(net_cfg.clone(), cfg.seed)?;
    let mut opt = OptState::new(net.param_count(), cfg.adam);
    let probe_initial = evaluate_loss(&net, &probe_ex, &bank, cfg, &probe_rng)?;

    let mut best: Option<(f64, usize, VelocityNet)> = None;
    let mut curve = Vec::with_capacity(cfg.epochs);
    let mut steps = 0usize;
    for epoch in 0..cfg.epochs {
        let lr = cosine_lr(epoch, cfg)?;
        let order = shuffle.fork(epoch as u64).permutation(train_w.len());
        let mut batches: Vec<&[usize]> = order.chunks(cfg.batch).collect();
        if let Some(cap) = cfg.steps_per_epoch {
            batches.truncate(cap);
        }
        let mut per_scale = vec![0.0; net_cfg.n_scales];
        for idx in &batches {
            let batch: Vec<TrainExample> = idx.iter().map(|&k| example(&trajs, train_w[k], l)).collect();
            let report = train_step(&mut net, &mut opt, &batch, &bank, cfg, lr, &draws.fork(steps as u64))?;
            per_scale.iter_mut().zip(&report.loss.per_scale).for_each(|(a, b)| *a += b);
            steps += 1;
        }
        per_scale.iter_mut().for_each(|v| *v /= batches.len() as f64);
        let train = total_loss(&per_scale, &weights)?;
        let val = evaluate_loss(&net, &val_ex, &bank, cfg, &val_rng)?;
        if best.as_ref().is_none_or(|(v, _, _)| val.total < *v) {
            best = Some((val.total, epoch, net.clone()));
        }
        curve.push(EpochRecord { epoch, lr, train, val, steps });
    }
    let probe_final = evaluate_loss(&net, &probe_ex, &bank, cfg, &probe_rng)?;
    let (_, best_epoch, best_net) = best.expect("at least one epoch");

    if let Some(dir) = out {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut extra = Manifest::new();
        cfg.to_manifest(&mut extra);
        extra.set("train.best_epoch", best_epoch);
        extra.set("train.steps", steps);
        best_net.save_checkpoint(&dir.join("checkpoint"), &extra)?;
        let path = dir.join("loss.csv");
        std::fs::write(&path, curve_csv(&curve)).map_err(|e| Error::io(&path, e))?;
    }
    Ok(FitResult {
        best: best_net,
        last: net,
        best_epoch,
        curve,
        probe_initial,
        probe_final,
        steps,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::LOSS_EPS;
    use crate::pdegen::{HeatSpec, SystemSpec};

    fn reference_adam(theta: &[f64], grads: &[Vec<f64>], lr: f64, b1: f64, b2: f64, eps: f64) -> Vec<f64> {
        let mut out = theta.to_vec();
        for i in 0..theta.len() {
            let (mut m, mut v) = (0.0, 0.0);
            for (t, g) in grads.iter().enumerate() {
                m = b1 * m + (1.0 - b1) * g[i];
                v = b2 * v + (1.0 - b2) * g[i] * g[i];
                let step = (t + 1) as f64;
                let mhat = m / (1.0 - b1.powf(step));
                let vhat = v / (1.0 - b2.powf(step));
                out[i] -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        out
    }

    #[test]
    fn adamw_hand_examples() {
        let hp = AdamConfig { weight_decay: 0.0, ..Default::default() };
        let mut st = OptState::new(1, hp);
        let mut p = [0.0];
        adamw_step(&mut p, &[1.0], &mut st, 0.1).unwrap();
        assert!((p[0] + 0.1).abs() < 1e-9);

        let mut st = OptState::new(1, hp);
        let mut p = [0.7];
        adamw_step(&mut p, &[0.0], &mut st, 0.1).unwrap();
        assert_eq!(p[0], 0.7);

        let mut st = OptState::new(1, AdamConfig { weight_decay: 0.01, ..Default::default() });
        let mut p = [1.0];
        adamw_step(&mut p, &[0.0], &mut st, 0.1).unwrap();
        assert!((p[0] - 0.999).abs() < 1e-15);

        assert!(adamw_step(&mut p, &[f64::NAN], &mut st, 0.1).is_err());
        assert!(adamw_step(&mut p, &[0.0, 1.0], &mut st, 0.1).is_err());
    }

    #[test]
    fn adamw_matches_reference() {
        let mut rng = StreamRng::new(5);
        let theta: Vec<f64> = (0..50).map(|_| rng.normal()).collect();
        let grads: Vec<Vec<f64>> = (0..7).map(|_| (0..50).map(|_| rng.normal()).collect()).collect();
        let hp = AdamConfig { weight_decay: 0.0, ..Default::default() };
        let mut st = OptState::new(50, hp);
        let mut p = theta.clone();
        for g in &grads {
            adamw_step(&mut p, g, &mut st, 1e-2).unwrap();
        }
        let r = reference_adam(&theta, &grads, 1e-2, 0.9, 0.999, 1e-8);
        let err = p.iter().zip(&r).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(err < 1e-12, "{err}");
        assert_eq!(st.step, 7);
    }

    #[test]
    fn clipping_bounds_norm_and_keeps_direction() {
        let mut rng = StreamRng::new(1);
        let g: Vec<f64> = (0..100).map(|_| 3.0 * rng.normal()).collect();
        let mut c = g.clone();
        let before = clip_grad_norm(&mut c, 1.0);
        assert!(before > 1.0);
        let norm = c.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!(norm <= 1.0 + 1e-12);
        let dot: f64 = g.iter().zip(&c).map(|(a, b)| a * b).sum();
        assert!((dot / (before * norm) - 1.0).abs() < 1e-12);
        let mut small = vec![0.1, 0.2];
        clip_grad_norm(&mut small, 1.0);
        assert_eq!(small, vec![0.1, 0.2]);
    }

    #[test]
    fn schedule_examples() {
        let cfg = TrainConfig::default();
        assert_eq!(cosine_lr(0, &cfg).unwrap(), 0.0);
        assert_eq!(cosine_lr(cfg.warmup, &cfg).unwrap(), cfg.adam.lr);
        let (e, w) = (cfg.epochs as f64, cfg.warmup as f64);
        let bound = (cfg.adam.lr - cfg.eta_min) * (1.0 - (std::f64::consts::PI * (e - 1.0 - w) / (e - w)).cos()) / 2.0;
        let last = cosine_lr(cfg.epochs - 1, &cfg).unwrap();
        assert!((last - cfg.eta_min).abs() <= bound + 1e-18);
        assert!(cosine_lr(cfg.epochs, &cfg).is_err());
        let bad = TrainConfig { warmup: 200, ..Default::default() };
        assert!(cosine_lr(0, &bad).is_err());
        let lrs: Vec<f64> = (cfg.warmup..cfg.epochs).map(|e| cosine_lr(e, &cfg).unwrap()).collect();
        assert!(lrs.windows(2).all(|p| p[1] <= p[0]));
    }

    fn tiny_net(kappa: usize, l: usize) -> NetConfig {
        NetConfig {
            channels: 1,
            n_scales: 2,
            n_levels: 2,
            init_dim: 8,
            blocks_per_level: 1,
            bottleneck_blocks: 1,
            embed_dim: 16,
            channel_cap: 2,
            groups: 8,
            kappa_dim: kappa,
            context_len: l,
        }
    }

    fn frames(n: usize, seed: u64) -> Vec<Field> {
        let mut rng = StreamRng::new(seed);
        (0..n)
            .map(|_| Field::new(1, 8, 8, (0..64).map(|_| rng.normal()).collect()).unwrap())
            .collect()
    }

    #[test]
    fn zero_network_loss_matches_direct_oracle() {
        let fs = frames(6, 2);
        let kappa = [0.5];
        let batch: Vec<TrainExample> = (0..3)
            .map(|b| TrainExample { context: &fs[b..b + 1], current: &fs[b + 1], target: &fs[b + 2], kappa: &kappa })
            .collect();
        let mut net = VelocityNet::zeros(tiny_net(1, 1)).unwrap();
        let mut opt = OptState::new(net.param_count(), AdamConfig::default());
        let bank = FilterBank::new(Wavelet::Haar).unwrap();
        let cfg = TrainConfig::default();
        let rng = StreamRng::new(9);
        let report = train_step(&mut net, &mut opt, &batch, &bank, &cfg, 1e-3, &rng).unwrap();

        for j in 1..=2 {
            let mut expect = 0.0;
            for (b, ex) in batch.iter().enumerate() {
                let target = dwt_multiscale(ex.target, &bank, 2).unwrap();
                let (_, noise) = flow_draw(Wavelet::Haar, target.shape(), &rng.fork(b as u64));
                let u: Vec<f64> = target.scale(j).iter().zip(noise.scale(j)).map(|(a, b)| a - b).collect();
                let n = u.len() as f64;
                let mean = u.iter().sum::<f64>() / n;
                let var = u.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
                expect += u.iter().map(|v| v * v).sum::<f64>() / n / (var + LOSS_EPS) / 3.0;
            }
            assert!((report.loss.per_scale[j - 1] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn train_step_is_deterministic() {
        let fs = frames(5, 3);
        let batch: Vec<TrainExample> = (0..2)
            .map(|b| TrainExample { context: &fs[b..b + 2], current: &fs[b + 2], target: &fs[b + 3], kappa: &[] })
            .collect();
        let bank = FilterBank::new(Wavelet::Haar).unwrap();
        let cfg = TrainConfig::default();
        let run = || {
            let mut net = VelocityNet::init(tiny_net(0, 2), 4).unwrap();
            let mut opt = OptState::new(net.param_count(), cfg.adam);
            let r = train_step(&mut net, &mut opt, &batch, &bank, &cfg, 1e-3, &StreamRng::new(1)).unwrap();
            (r, net.params().values().to_vec())
        };
        let (a, pa) = run();
        let (b, pb) = run();
        assert_eq!(a, b);
        assert_eq!(pa, pb);
    }

    #[test]
    fn scale_balance_under_rescaling() {
        let mut rng = StreamRng::new(11);
        let n = 4 * 64;
        let w: Vec<f64> = (0..n).map(|_| rng.normal()).collect();
        let eps: Vec<f64> = (0..n).map(|_| rng.normal()).collect();
        let zero = vec![0.0; n];
        let loss = |k: f64| {
            let u: Vec<f64> = w.iter().zip(&eps).map(|(a, e)| k * a - e).collect();
            crate::flow::scale_loss(&[&zero], &[&u], 1, LossAveraging::Joint).unwrap()
        };
        let (l1, l10) = (loss(1.0), loss(10.0));
        assert!((l10 / l1 - 1.0).abs() < 0.05, "{l1} {l10}");
    }

    fn small_dataset() -> Dataset {
        let trajs = (0..4)
            .map(|i| {
                SystemSpec::Heat(HeatSpec { height: 8, width: 8, n_steps: 7, seed: i, ..Default::default() })
                    .generate()
                    .unwrap()
            })
            .collect();
        Dataset::from_trajectories("heat", trajs, 0.75).unwrap()
    }

    #[test]
    fn fit_curve_selection_and_determinism() {
        let ds = small_dataset();
        let cfg = TrainConfig { epochs: 3, warmup: 1, batch: 4, steps_per_epoch: Some(2), ..Default::default() };
        let net = tiny_net(1, 3);
        let dir = tempfile::tempdir().unwrap();
        let a = fit(&ds, &net, &cfg, Some(dir.path())).unwrap();
        assert_eq!(a.curve.len(), 3);
        assert_eq!(a.steps, 6);
        let best = a.curve[a.best_epoch].val.total;
        assert!(best <= a.curve.last().unwrap().val.total);
        let b = fit(&ds, &net, &cfg, None).unwrap();
        assert_eq!(a.best.params().values(), b.best.params().values());
        assert_eq!(curve_csv(&a.curve), curve_csv(&b.curve));
        let csv = std::fs::read_to_string(dir.path().join("loss.csv")).unwrap();
        assert!(csv.starts_with("epoch,lr,train_total,val_total,l1,l2,"));
        assert_eq!(csv.lines().count(), 4);
        let (loaded, m) = VelocityNet::load_checkpoint(&dir.path().join("checkpoint")).unwrap();
        assert_eq!(loaded.params().values(), a.best.params().values());
        assert_eq!(m.get("train.wavelet"), Some("haar"));
    }

    #[test]
    fn one_epoch_one_batch_is_one_step() {
        let ds = small_dataset();
        let cfg = TrainConfig { epochs: 1, warmup: 0, batch: 2, steps_per_epoch: Some(1), ..Default::default() };
        let net_cfg = tiny_net(1, 3);
        let fitted = fit(&ds, &net_cfg, &cfg, None).unwrap();

        let trajs: Vec<Trajectory> = (0..4).map(|i| ds.standardized(i).unwrap()).collect();
        let lens: Vec<usize> = trajs.iter().map(Trajectory::len).collect();
        let train_w = windows(&ds.train, &lens, 3);
        let order = StreamRng::new(0).fork(1).fork(0).permutation(train_w.len());
        let batch: Vec<TrainExample> = order[..2].iter().map(|&k| example(&trajs, train_w[k], 3)).collect();
        let mut net = VelocityNet::init(net_cfg, 0).unwrap();
        let mut opt = OptState::new(net.param_count(), cfg.adam);
        let bank = FilterBank::new(Wavelet::Haar).unwrap();
        let lr = cosine_lr(0, &cfg).unwrap();
        let r = train_step(&mut net, &mut opt, &batch, &bank, &cfg, lr, &StreamRng::new(0).fork(2).fork(0)).unwrap();
        assert_eq!(r.loss, fitted.curve[0].train);
        assert_eq!(net.params().values(), fitted.last.params().values());
    }

    #[test]
    fn fit_rejects_mismatches() {
        let ds = small_dataset();
        let cfg = TrainConfig { epochs: 2, warmup: 1, ..Default::default() };
        assert!(fit(&ds, &tiny_net(0, 3), &cfg, None).is_err());
        assert!(fit(&ds, &tiny_net(1, 7), &cfg, None).is_err());
        assert!(TrainConfig { batch: 0, ..cfg.clone() }.validate().is_err());
        assert!(cfg.weights(3).unwrap() == vec![1.0; 3]);
        assert!(TrainConfig { lambdas: vec![1.0], ..cfg }.weights(2).is_err());
    }
}
