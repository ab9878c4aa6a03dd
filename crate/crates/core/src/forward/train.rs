//! End-to-end pre-training of the PLN through the signal loss.
//!
//! Optional coarse-to-fine stages fit a Gaussian-smoothed energy envelope of
//! each received signal before the plain superposition loss takes over; the
//! envelope is insensitive to carrier phase, so it has a wide basin when the
//! untrained network is hundreds of metres off.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::checkpoint::{Checkpoint, TrainMeta};
use super::gauss_newton::{levenberg_marquardt, LmOutcome};
use super::kernels::{envelope_mismatch, smoothed_energy, EnvelopeTarget, OrderPenalty};
use super::{batch_inputs, record_train_loss, three_ray_signs, ModelParams};
use crate::diff::{grad, Tape, Var};
use crate::error::{Error, Result};
use crate::optim::{lbfgs, LbfgsConfig, LbfgsOutcome};
use crate::oracle::{Dataset, SourceLocation, THREE_RAY};
use crate::pln::{pln_init, InputNormalization, PlnArchitecture, PlnParams};
use crate::signal::{derive_seed, energy, smooth_samples, SampledSignal};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageKind {
    /// Fit the smoothed received energy (phase-blind, label-blind).
    Envelope,
    /// Signal loss with data and pulse low-passed by a Gaussian.
    Lowpass,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Optimizer {
    /// Mini-batch adaptive moments.
    #[default]
    Adam,
    /// Full-batch limited-memory BFGS; `epochs` counts iterations and the
    /// learning rate is unused.
    Lbfgs,
    /// Full-batch Levenberg-Marquardt on the network weights; `epochs`
    /// counts iterations. Not available for envelope stages.
    GaussNewton,
}

/// One continuation stage run before the plain signal loss.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ContinuationStage {
    pub kind: StageKind,
    #[serde(default)]
    pub optimizer: Optimizer,
    /// Smoothing width in seconds.
    pub width: f64,
    pub epochs: usize,
    pub learning_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Learning rate at the last epoch (cosine decay from `learning_rate`).
    pub final_learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
    pub log_every: usize,
    /// Output scale of the network in metres.
    pub length_scale: f64,
    /// Number of initializations screened for the ray ordering.
    pub init_candidates: usize,
    pub stages: Vec<ContinuationStage>,
    /// Optimizer of the plain signal-loss phase.
    pub optimizer: Optimizer,
    /// Weight of the direct-path-first penalty during envelope stages.
    pub order_weight: f64,
    /// Softness of that penalty, metres.
    pub order_softness: f64,
}

/// Envelope widths 40 ms down to 5 ms (Adam, rate proportional to the
/// width), then low-pass widths 4 ms down to 0.5 ms (Gauss-Newton).
pub fn default_stages() -> Vec<ContinuationStage> {
    let envelope = [40.0, 28.0, 20.0, 14.0, 10.0, 7.0, 5.0].map(|ms: f64| ContinuationStage {
        kind: StageKind::Envelope,
        optimizer: Optimizer::Adam,
        width: ms * 1e-3,
        epochs: 100,
        learning_rate: 1e-3 * ms / 40.0,
    });
    let lowpass = [4.0, 2.0, 1.0, 0.5].map(|ms: f64| ContinuationStage {
        kind: StageKind::Lowpass,
        optimizer: Optimizer::GaussNewton,
        width: ms * 1e-3,
        epochs: 15,
        learning_rate: 0.0,
    });
    envelope.into_iter().chain(lowpass).collect()
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 60,
            batch_size: 32,
            learning_rate: 1e-3,
            final_learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            seed: 0,
            log_every: 10,
            length_scale: 1000.0,
            init_candidates: 8,
            stages: default_stages(),
            optimizer: Optimizer::GaussNewton,
            order_weight: 1e-3,
            order_softness: 0.25,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if !(self.learning_rate >= 0.0) || !(self.final_learning_rate >= 0.0) {
            return bad("learning rates must be non-negative");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.eps > 0.0) {
            return bad("moment parameters out of range");
        }
        if self.log_every == 0 || self.init_candidates == 0 {
            return bad("log_every and init_candidates must be positive");
        }
        if !(self.order_weight >= 0.0) || !(self.order_softness > 0.0) {
            return bad("order penalty needs weight >= 0 and positive softness");
        }
        if !(self.length_scale > 0.0) {
            return bad("length_scale must be positive");
        }
        for s in &self.stages {
            if s.kind == StageKind::Envelope && s.optimizer == Optimizer::GaussNewton {
                return bad("envelope stages cannot use the gauss_newton optimizer");
            }
            if !(s.width > 0.0) || !(s.learning_rate >= 0.0) {
                return bad("continuation stages need positive width and non-negative rate");
            }
        }
        Ok(())
    }

    fn lr_at(&self, epoch: usize) -> f64 {
        if self.epochs <= 1 {
            return self.learning_rate;
        }
        let u = epoch as f64 / (self.epochs - 1) as f64;
        self.final_learning_rate + 0.5 * (self.learning_rate - self.final_learning_rate) * (1.0 + (std::f64::consts::PI * u).cos())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    /// `(phase, epoch, loss)`; phase is the stage index, or `stages.len()`
    /// for the superposition-loss phase. Envelope losses are normalized.
    pub curve: Vec<(usize, usize, f64)>,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub warnings: Vec<String>,
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    fn step(&mut self, x: &mut [f64], g: &[f64], lr: f64, cfg: &TrainConfig) {
        self.t += 1;
        let c1 = 1.0 - cfg.beta1.powi(self.t);
        let c2 = 1.0 - cfg.beta2.powi(self.t);
        for i in 0..x.len() {
            self.m[i] = cfg.beta1 * self.m[i] + (1.0 - cfg.beta1) * g[i];
            self.v[i] = cfg.beta2 * self.v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
            x[i] -= lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + cfg.eps);
        }
    }
}

/// Fraction of region grid points where the untrained outputs already follow
/// direct < surface < bottom.
fn ordering_score(model: &ModelParams, dataset: &Dataset) -> f64 {
    let pts = dataset.region.grid_points(7, 7);
    let ok = pts
        .iter()
        .filter(|p| {
            let l = model.lengths(p);
            l[0] < l[1] && l[1] < l[2]
        })
        .count();
    ok as f64 / pts.len() as f64
}

fn initial_model(dataset: &Dataset, arch: &PlnArchitecture, cfg: &TrainConfig) -> Result<ModelParams> {
    let norm = InputNormalization::from_region(&dataset.region, dataset.env.receiver_depth);
    let build = |pln: PlnParams| ModelParams {
        pln,
        sound_speed: dataset.env.sound_speed,
        adapt_sound_speed: false,
        receiver_depth: dataset.env.receiver_depth,
        pulse: dataset.pulse,
    };
    let mut best: Option<(f64, ModelParams)> = None;
    for k in 0..cfg.init_candidates {
        let seed = if k == 0 { cfg.seed } else { derive_seed(cfg.seed, &[0x1417, k as u64]) };
        let m = build(pln_init(arch, norm, cfg.length_scale, seed)?);
        let s = ordering_score(&m, dataset);
        if best.as_ref().is_none_or(|(b, _)| s > *b) {
            best = Some((s, m));
        }
        if s >= 1.0 {
            break;
        }
    }
    Ok(best.expect("at least one candidate").1)
}

fn record_envelope_loss(
    tape: &mut Tape,
    w: &ModelParams,
    adapt: &[Var],
    locs: &[SourceLocation],
    targets: &[&EnvelopeTarget],
    norm: f64,
    order: Option<OrderPenalty>,
) -> Var {
    let (weights, c) = w.record_params(tape, Some(adapt));
    let inp = w.pln.constant_inputs(tape, &batch_inputs(locs, w.receiver_depth));
    let lengths = w.pln.record(tape, &weights, inp);
    let n = tape.value(lengths).len();
    let signs = three_ray_signs();
    let rho: Vec<f64> = (0..n).map(|j| signs[j % THREE_RAY.len()]).collect();
    let alpha = tape.const_over(lengths, rho);
    let tau = tape.div(lengths, c);
    envelope_mismatch(tape, alpha, tau, targets, &w.pulse, norm, order)
}

/// Exchanges the surface and bottom count inputs inside the first layer.
fn swap_reflection_codes(model: &ModelParams) -> ModelParams {
    let mut out = model.clone();
    let (off, _) = out.pln.weights.layout.find("pln.layer0.weight").expect("first layer");
    let rows = out.pln.arch.hidden[0];
    let cols = crate::pln::INPUT_DIM;
    debug_assert_eq!(out.pln.norm.shift[3], out.pln.norm.shift[4]);
    debug_assert_eq!(out.pln.norm.scale[3], out.pln.norm.scale[4]);
    for r in 0..rows {
        out.pln.weights.values.swap(off + r * cols + 3, off + r * cols + 4);
    }
    out
}

fn mean_or_one(values: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    let m = sum / n.max(1) as f64;
    if m > 0.0 {
        m
    } else {
        1.0
    }
}

/// Runs one stage with the chosen optimizer.
#[allow(clippy::too_many_arguments)]
fn run_stage(
    model: &mut ModelParams,
    log: &mut TrainLog,
    phase: usize,
    optimizer: Optimizer,
    epochs: usize,
    lr_at: &dyn Fn(usize) -> f64,
    batch_loss: &(dyn Fn(&ModelParams, &mut Tape, &[Var], &[usize]) -> Var + Sync),
    order: &mut [usize],
    rng: &mut ChaCha8Rng,
    cfg: &TrainConfig,
    grad_scale: f64,
) -> Result<()> {
    let n = order.len();
    if optimizer == Optimizer::GaussNewton {
        unreachable!("Gauss-Newton stages are dispatched before run_stage");
    }
    if optimizer == Optimizer::Lbfgs {
        let everyone: Vec<usize> = (0..n).collect();
        let mut evals = 0usize;
        let base = model.clone();
        let f = |x: &[f64]| -> Result<(f64, Vec<f64>)> {
            let m = base.with_adapt_values(x);
            let (l, g) = grad(|t: &mut Tape, v: &[Var]| Ok(batch_loss(&m, t, v, &everyone)), &m.adapt_vector())
                .or_else(|e| match e {
                    Error::NumericOverflow { .. } => Ok((f64::INFINITY, m.adapt_vector())),
                    other => Err(other),
                })?;
            if evals.is_multiple_of(cfg.log_every) {
                log.curve.push((phase, evals, l));
            }
            evals += 1;
            Ok((l * grad_scale, g.values.iter().map(|v| v * grad_scale).collect()))
        };
        let out = lbfgs(
            f,
            model.adapt_vector().values,
            &LbfgsConfig {
                max_iter: epochs,
                ..LbfgsConfig::default()
            },
        )?;
        let out = LbfgsOutcome {
            value: out.value / grad_scale,
            ..out
        };
        check_finite(out.value, out.iterations)?;
        log.warnings.push(format!(
            "phase {phase}: lbfgs {} iterations, {} evaluations, loss {:.4e}, |g| {:.3e}{}",
            out.iterations,
            out.evaluations,
            out.value,
            out.grad_norm_inf,
            if out.stalled { ", stalled" } else { "" }
        ));
        *model = model.with_adapt_values(&out.x);
        return Ok(());
    }
    let mut adam = Adam::new(model.adapt_vector().len());
    let mut prev_epoch_loss: Option<f64> = None;
    for epoch in 0..epochs {
        order.shuffle(rng);
        let lr = lr_at(epoch);
        let mut total = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let at = model.adapt_vector();
            let m: &ModelParams = model;
            let (l, g) = grad(|t: &mut Tape, v: &[Var]| Ok(batch_loss(m, t, v, chunk)), &at)?;
            check_finite(l, epoch)?;
            total += l * chunk.len() as f64;
            let g: Vec<f64> = g.values.iter().map(|v| v * grad_scale).collect();
            let mut x = at.values;
            adam.step(&mut x, &g, lr, cfg);
            *model = model.with_adapt_values(&x);
        }
        let epoch_loss = total / n as f64;
        if let Some(prev) = prev_epoch_loss {
            if epoch > 5 && epoch_loss > 1.1 * prev {
                log.warnings.push(format!("phase {phase} epoch {epoch}: loss rose from {prev:.4e} to {epoch_loss:.4e}"));
            }
        }
        prev_epoch_loss = Some(epoch_loss);
        if epoch % cfg.log_every == 0 || epoch + 1 == epochs {
            log.curve.push((phase, epoch, epoch_loss));
        }
    }
    Ok(())
}

fn log_lm(log: &mut TrainLog, phase: usize, out: &LmOutcome, norm: f64) {
    log.curve.push((phase, 0, out.initial / norm));
    log.curve.push((phase, out.iterations, out.value / norm));
    log.warnings.push(format!(
        "phase {phase}: gauss-newton {} iterations, loss {:.4e} -> {:.4e}, damping {:.2e}",
        out.iterations,
        out.initial / norm,
        out.value / norm,
        out.damping
    ));
}

fn check_finite(loss: f64, epoch: usize) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(Error::Divergence { epoch, loss })
    }
}

/// Trains the network on `dataset` and returns the checkpoint with its loss
/// curve. Deterministic for a given dataset and config.
pub fn pretrain(dataset: &Dataset, arch: &PlnArchitecture, cfg: &TrainConfig) -> Result<(Checkpoint, TrainLog)> {
    pretrain_observed(dataset, arch, cfg, &mut |_, _| {})
}

/// As [`pretrain`], calling `observer(phase, model)` at the end of every phase.
pub fn pretrain_observed(
    dataset: &Dataset,
    arch: &PlnArchitecture,
    cfg: &TrainConfig,
    observer: &mut dyn FnMut(usize, &ModelParams),
) -> Result<(Checkpoint, TrainLog)> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::InvalidArgument("dataset is empty".into()));
    }
    let mut model = initial_model(dataset, arch, cfg)?;
    let n = dataset.len();
    let all: Vec<&(SourceLocation, SampledSignal)> = dataset.samples.iter().collect();
    let energy_scale = all
        .iter()
        .map(|(_, r)| r.values.iter().map(|v| v * v).sum::<f64>() * r.grid.dt())
        .sum::<f64>()
        / n as f64;
    let energy_scale = if energy_scale > 0.0 { energy_scale } else { 1.0 };
    let full_loss = |m: &ModelParams| -> Result<f64> {
        let at = m.adapt_vector();
        crate::diff::value(&|t: &mut Tape, v: &[Var]| Ok(record_train_loss(t, m, v, &all)), &at)
    };
    let mut log = TrainLog {
        initial_loss: full_loss(&model)?,
        ..TrainLog::default()
    };
    check_finite(log.initial_loss, 0)?;
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[0x5eed]));

    let mut prev_kind: Option<StageKind> = None;
    for (si, stage) in cfg.stages.iter().enumerate() {
        let lr_at = |epoch: usize| {
            let frac = epoch as f64 / stage.epochs.max(1) as f64;
            stage.learning_rate * (0.1 + 0.45 * (1.0 + (std::f64::consts::PI * frac).cos()))
        };
        match stage.kind {
            StageKind::Envelope => {
                let step = (stage.width / 4.0).max(dataset.grid.dt());
                let targets: Vec<EnvelopeTarget> = all.iter().map(|(_, r)| smoothed_energy(r, stage.width, step)).collect();
                let norm = mean_or_one(targets.iter().map(|t| t.values.iter().map(|v| v * v).sum::<f64>() * t.step));
                let penalty = (cfg.order_weight > 0.0).then(|| OrderPenalty {
                    weight: cfg.order_weight,
                    softness: cfg.order_softness / model.sound_speed,
                });
                let batch_loss = |m: &ModelParams, t: &mut Tape, v: &[Var], idx: &[usize]| {
                    let locs: Vec<SourceLocation> = idx.iter().map(|&k| all[k].0).collect();
                    let tg: Vec<&EnvelopeTarget> = idx.iter().map(|&k| &targets[k]).collect();
                    record_envelope_loss(t, m, v, &locs, &tg, norm, penalty)
                };
                run_stage(&mut model, &mut log, si, stage.optimizer, stage.epochs, &lr_at, &batch_loss, &mut order, &mut rng, cfg, 1.0)?;
            }
            StageKind::Lowpass => {
                let smoothed: Vec<(SourceLocation, SampledSignal)> =
                    all.iter().map(|(p, r)| (*p, smooth_samples(r, stage.width))).collect();
                let norm = mean_or_one(smoothed.iter().map(|(_, r)| energy(r)));
                let pulse = model.pulse.smoothed(stage.width);
                let batch_loss = |m: &ModelParams, t: &mut Tape, v: &[Var], idx: &[usize]| {
                    let mut shifted = m.clone();
                    shifted.pulse = pulse;
                    let batch: Vec<&(SourceLocation, SampledSignal)> = idx.iter().map(|&k| &smoothed[k]).collect();
                    let l = record_train_loss(t, &shifted, v, &batch);
                    t.scale(l, 1.0 / norm)
                };
                if prev_kind == Some(StageKind::Envelope) {
                    // The envelope cannot tell the two reflected rays apart;
                    // the signed loss picks which labeling to continue from.
                    let everyone: Vec<usize> = (0..n).collect();
                    let eval = |m: &ModelParams| {
                        crate::diff::value(&|t: &mut Tape, v: &[Var]| Ok(batch_loss(m, t, v, &everyone)), &m.adapt_vector())
                    };
                    let swapped = swap_reflection_codes(&model);
                    let (keep, swap) = (eval(&model)?, eval(&swapped)?);
                    if swap < keep {
                        log.warnings.push(format!("reflected-ray labels swapped ({keep:.4e} -> {swap:.4e})"));
                        model = swapped;
                    }
                }
                if stage.optimizer == Optimizer::GaussNewton {
                    let refs: Vec<_> = smoothed.iter().collect();
                    let out = levenberg_marquardt(&mut model, &refs, &pulse, stage.epochs)?;
                    log_lm(&mut log, si, &out, norm);
                } else {
                    run_stage(&mut model, &mut log, si, stage.optimizer, stage.epochs, &lr_at, &batch_loss, &mut order, &mut rng, cfg, 1.0)?;
                }
            }
        }
        prev_kind = Some(stage.kind);
        observer(si, &model);
    }

    let phase = cfg.stages.len();
    let main_loss = |m: &ModelParams, t: &mut Tape, v: &[Var], idx: &[usize]| {
        let batch: Vec<&(SourceLocation, SampledSignal)> = idx.iter().map(|&k| all[k]).collect();
        record_train_loss(t, m, v, &batch)
    };
    if cfg.optimizer == Optimizer::GaussNewton {
        let pulse = model.pulse;
        let out = levenberg_marquardt(&mut model, &all, &pulse, cfg.epochs)?;
        log_lm(&mut log, phase, &out, 1.0);
    } else {
        run_stage(&mut model, &mut log, phase, cfg.optimizer, cfg.epochs, &|e| cfg.lr_at(e), &main_loss, &mut order, &mut rng, cfg, 1.0 / energy_scale)?;
    }
    observer(phase, &model);
    log.final_loss = full_loss(&model)?;
    check_finite(log.final_loss, cfg.epochs)?;
    let ckpt = Checkpoint {
        model,
        meta: TrainMeta {
            env: dataset.env,
            region: dataset.region,
            n_train: n,
            epochs: cfg.epochs + cfg.stages.iter().map(|s| s.epochs).sum::<usize>(),
            initial_loss: log.initial_loss,
            final_loss: log.final_loss,
            seed: cfg.seed,
        },
    };
    Ok((ckpt, log))
}

/// Largest relative path-length error of `model` against the image method
/// over an `nx × nz` grid of the training region.
pub fn max_relative_length_error(model: &ModelParams, dataset: &Dataset, nx: usize, nz: usize) -> f64 {
    dataset
        .region
        .grid_points(nx, nz)
        .iter()
        .flat_map(|p| {
            let l = model.lengths(p);
            THREE_RAY
                .iter()
                .zip(l)
                .map(|(&path, got)| {
                    let want = crate::oracle::path_length(&dataset.env, p, path).unwrap_or(f64::NAN);
                    ((got - want) / want).abs()
                })
                .collect::<Vec<_>>()
        })
        .fold(0.0, f64::max)
}
