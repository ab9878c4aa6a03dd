//! Modular forward model: path lengths (network or analytic) go through the
//! physics converter `α = ρ/ℓ`, `τ = ℓ/c` and are superposed with the known
//! pulse into `f_w(t, p)`.

mod checkpoint;
mod gauss_newton;
mod kernels;
mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, TrainMeta, CHECKPOINT_VERSION};
pub use kernels::{envelope_mismatch, signal_mismatch, smoothed_energy, EnvelopeTarget, OrderPenalty};
pub use train::{default_stages, max_relative_length_error, pretrain, pretrain_observed, ContinuationStage, Optimizer, StageKind, TrainConfig, TrainLog};

use serde::{Deserialize, Serialize};

use crate::diff::{Layout, ParamVector, Segment, Tape, Var};
use crate::error::{Error, Result};
use crate::oracle::{reflection_coeff, Dataset, Environment, PathSpec, SourceLocation, THREE_RAY};
use crate::pln::{path_input, PlnParams, INPUT_DIM};
use crate::signal::{superpose, AnalyticPulse, SampledSignal, TimeGrid};

/// Converts a path length into amplitude and delay.
pub fn alpha_tau(length: f64, rho: f64, sound_speed: f64) -> Result<(f64, f64)> {
    if !(length > 0.0) {
        return Err(Error::InvalidArgument(format!("path length must be positive, got {length}")));
    }
    if !(sound_speed > 0.0) {
        return Err(Error::InvalidArgument(format!("sound speed must be positive, got {sound_speed}")));
    }
    Ok((rho / length, length / sound_speed))
}

/// Reflection signs of the three-ray set.
pub fn three_ray_signs() -> [f64; 3] {
    THREE_RAY.map(reflection_coeff)
}

/// Learned model parameters `w` plus the fixed parts of the model.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub pln: PlnParams,
    pub sound_speed: f64,
    /// Whether the sound speed joins the adaptable vector.
    pub adapt_sound_speed: bool,
    /// Receiver depth fed to the network.
    pub receiver_depth: f64,
    pub pulse: AnalyticPulse,
}

pub const SOUND_SPEED_SEGMENT: &str = "sound_speed";

impl ModelParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.sound_speed > 0.0) {
            return Err(Error::InvalidArgument("sound speed must be positive".into()));
        }
        Ok(())
    }

    pub fn lengths(&self, p: &SourceLocation) -> [f64; 3] {
        THREE_RAY.map(|path| self.pln.path_length(p, self.receiver_depth, path))
    }

    /// Layout of the adaptable vector (PLN weights, then `c` if unfrozen).
    pub fn adapt_layout(&self) -> Layout {
        let mut layout = self.pln.weights.layout.clone();
        if self.adapt_sound_speed {
            layout.segments.push(Segment::new(SOUND_SPEED_SEGMENT, 1, 1));
        }
        layout
    }

    pub fn adapt_vector(&self) -> ParamVector {
        let mut values = self.pln.weights.values.clone();
        if self.adapt_sound_speed {
            values.push(self.sound_speed);
        }
        ParamVector {
            layout: self.adapt_layout(),
            values,
        }
    }

    /// Copy with the adaptable entries replaced.
    pub fn with_adapt_values(&self, values: &[f64]) -> Self {
        let mut out = self.clone();
        let n = out.pln.weights.len();
        out.pln.weights.values.copy_from_slice(&values[..n]);
        if self.adapt_sound_speed {
            out.sound_speed = values[n];
        }
        out
    }

    /// Records the network weights (as leaves `adapt` if given, constants
    /// otherwise) and the sound-speed node.
    pub fn record_params(&self, tape: &mut Tape, adapt: Option<&[Var]>) -> (Vec<Var>, Var) {
        let n_seg = self.pln.weights.layout.segments.len();
        match adapt {
            Some(vars) => {
                let c = if self.adapt_sound_speed {
                    vars[n_seg]
                } else {
                    tape.constant(vec![self.sound_speed], 1, 1)
                };
                (vars[..n_seg].to_vec(), c)
            }
            None => {
                let w = &self.pln.weights;
                let mut off = 0;
                let vars = w
                    .layout
                    .segments
                    .iter()
                    .map(|s| {
                        let v = tape.constant(w.values[off..off + s.len()].to_vec(), s.rows, s.cols);
                        off += s.len();
                        v
                    })
                    .collect();
                (vars, tape.constant(vec![self.sound_speed], 1, 1))
            }
        }
    }
}

/// Where path lengths come from.
#[derive(Debug, Clone, PartialEq)]
pub enum Propagator {
    /// Exact image-method lengths for a known environment.
    Analytic { env: Environment, pulse: AnalyticPulse },
    /// Learned lengths from the PLN.
    Network(ModelParams),
}

impl Propagator {
    pub fn pulse(&self) -> &AnalyticPulse {
        match self {
            Propagator::Analytic { pulse, .. } => pulse,
            Propagator::Network(m) => &m.pulse,
        }
    }

    /// `(α_i, τ_i)` for the three rays.
    pub fn arrivals(&self, p: &SourceLocation) -> Result<Vec<(f64, f64)>> {
        let (lengths, c) = match self {
            Propagator::Analytic { env, .. } => (
                THREE_RAY
                    .iter()
                    .map(|&path| crate::oracle::path_length(env, p, path))
                    .collect::<Result<Vec<_>>>()?,
                env.sound_speed,
            ),
            Propagator::Network(m) => (m.lengths(p).to_vec(), m.sound_speed),
        };
        lengths
            .iter()
            .zip(three_ray_signs())
            .map(|(&l, rho)| alpha_tau(l, rho, c))
            .collect()
    }

    /// Records `∫(r - f(t, p))² dt` with `p = (x, z)` in metres as tape
    /// nodes. `adapt` carries the adaptable-vector leaves for a network
    /// propagator; `None` freezes the model.
    pub fn record_data_term(
        &self,
        tape: &mut Tape,
        adapt: Option<&[Var]>,
        x: Var,
        z: Var,
        r: &SampledSignal,
    ) -> Var {
        let (lengths, speed) = match self {
            Propagator::Analytic { env, .. } => {
                let x2 = tape.square(x);
                let x2 = tape.broadcast(x2, 1, 3);
                let zr = env.receiver_depth;
                // vertical separations: z - zr, z + zr, 2D - z - zr
                let zb = tape.broadcast(z, 1, 3);
                let signs = tape.constant(vec![1.0, 1.0, -1.0], 1, 3);
                let zs = tape.mul(zb, signs);
                let offs = tape.constant(vec![-zr, zr, 2.0 * env.depth - zr], 1, 3);
                let dz = tape.add(zs, offs);
                let dz2 = tape.square(dz);
                let s = tape.add(x2, dz2);
                let l = tape.sqrt(s);
                (l, tape.constant(vec![env.sound_speed], 1, 1))
            }
            Propagator::Network(m) => {
                let (w, c) = m.record_params(tape, adapt);
                let inp = m.pln.source_inputs(tape, x, z, m.receiver_depth, &THREE_RAY);
                (m.pln.record(tape, &w, inp), c)
            }
        };
        record_signal_loss(tape, lengths, speed, &three_ray_signs(), &[r], self.pulse())
    }
}

/// Physics converter plus superposition loss for a batch of signals; the
/// `lengths` row holds three rays per signal. Returns the batch-mean loss.
pub fn record_signal_loss(
    tape: &mut Tape,
    lengths: Var,
    speed: Var,
    signs: &[f64; 3],
    signals: &[&SampledSignal],
    pulse: &AnalyticPulse,
) -> Var {
    let n = tape.value(lengths).len();
    let rho: Vec<f64> = (0..n).map(|j| signs[j % 3]).collect();
    let alpha = tape.const_over(lengths, rho);
    let tau = tape.div(lengths, speed);
    signal_mismatch(tape, alpha, tau, signals, pulse)
}

/// `f_w(t, p) = Σ α_i s(t - τ_i)` on the grid.
pub fn model_output(w: &ModelParams, p: &SourceLocation, grid: &TimeGrid) -> Result<SampledSignal> {
    let prop = Propagator::Network(w.clone());
    propagator_output(&prop, p, grid)
}

pub fn propagator_output(prop: &Propagator, p: &SourceLocation, grid: &TimeGrid) -> Result<SampledSignal> {
    let arr = prop.arrivals(p)?;
    Ok(SampledSignal {
        grid: *grid,
        values: superpose(grid, prop.pulse(), &arr),
    })
}

/// Raw network inputs for every (sample, ray) pair, ray-major within a sample.
pub(crate) fn batch_inputs(locations: &[SourceLocation], receiver_depth: f64) -> Vec<[f64; INPUT_DIM]> {
    locations
        .iter()
        .flat_map(|p| THREE_RAY.map(|path: PathSpec| path_input(p, receiver_depth, path)))
        .collect()
}

/// Records the training loss over the given samples with the adaptable
/// vector as leaves.
pub(crate) fn record_train_loss(
    tape: &mut Tape,
    w: &ModelParams,
    adapt: &[Var],
    samples: &[&(SourceLocation, SampledSignal)],
) -> Var {
    let locs: Vec<SourceLocation> = samples.iter().map(|(p, _)| *p).collect();
    let sigs: Vec<&SampledSignal> = samples.iter().map(|(_, r)| r).collect();
    let (weights, c) = w.record_params(tape, Some(adapt));
    let inp = w.pln.constant_inputs(tape, &batch_inputs(&locs, w.receiver_depth));
    let lengths = w.pln.record(tape, &weights, inp);
    record_signal_loss(tape, lengths, c, &three_ray_signs(), &sigs, &w.pulse)
}

/// `(1/N) Σ_k Δt Σ_n (r_k - f_w)²`.
pub fn train_loss(w: &ModelParams, dataset: &Dataset) -> Result<f64> {
    if dataset.is_empty() {
        return Err(Error::InvalidArgument("dataset is empty".into()));
    }
    if dataset.samples.iter().any(|(_, r)| r.grid != dataset.grid) {
        return Err(Error::GridMismatch("dataset signals do not share one grid".into()));
    }
    let samples: Vec<_> = dataset.samples.iter().collect();
    let adapt = w.adapt_vector();
    crate::diff::value(&|tape: &mut Tape, v: &[Var]| Ok(record_train_loss(tape, w, v, &samples)), &adapt)
}

/// Gradient of the training loss with respect to the adaptable vector.
pub fn train_loss_grad(w: &ModelParams, samples: &[&(SourceLocation, SampledSignal)]) -> Result<(f64, ParamVector)> {
    let adapt = w.adapt_vector();
    crate::diff::grad(|tape: &mut Tape, v: &[Var]| Ok(record_train_loss(tape, w, v, samples)), &adapt)
}

/// Default source/receiver settings shared by the experiments.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReferenceSetup {
    pub env: Environment,
    pub source: SourceLocation,
}

#[cfg(test)]
mod tests;
