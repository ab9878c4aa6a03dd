//! Levenberg-Marquardt on the network weights for the signal loss.
//!
//! The Gauss-Newton matrix of the batch loss is `Jᵀ H J`, with `J` the
//! Jacobian of all path lengths with respect to the weights and `H` block
//! diagonal (one 3×3 block per signal). The damped step is solved in the
//! dual space of path lengths, `δ = -Jᵀ (H J Jᵀ + μI)⁻¹ g`, so the linear
//! system has one row per (signal, ray) regardless of the network size.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use super::kernels::length_gauss_newton;
use super::{batch_inputs, three_ray_signs, ModelParams};
use crate::error::{Error, Result};
use crate::oracle::SourceLocation;
use crate::signal::{AnalyticPulse, SampledSignal};

pub(crate) struct LmOutcome {
    pub iterations: usize,
    pub initial: f64,
    pub value: f64,
    pub damping: f64,
}

struct Linearization {
    loss: f64,
    /// Per-length gradient of the mean loss.
    grad: Vec<f64>,
    /// Per-signal 3×3 blocks, row-major.
    blocks: Vec<Vec<f64>>,
}

fn linearize(model: &ModelParams, samples: &[&(SourceLocation, SampledSignal)], pulse: &AnalyticPulse, lengths: &[f64]) -> Linearization {
    let signs = three_ray_signs();
    let n = samples.len() as f64;
    let terms: Vec<_> = samples
        .par_iter()
        .enumerate()
        .map(|(k, (_, r))| length_gauss_newton(&r.grid, pulse, &r.values, &lengths[3 * k..3 * k + 3], &signs, model.sound_speed))
        .collect();
    let mut out = Linearization {
        loss: 0.0,
        grad: Vec::with_capacity(lengths.len()),
        blocks: Vec::with_capacity(samples.len()),
    };
    for (l, g, h) in terms {
        out.loss += l / n;
        out.grad.extend(g.iter().map(|v| v / n));
        out.blocks.push(h.iter().map(|v| v / n).collect());
    }
    out
}

fn mean_loss(model: &ModelParams, samples: &[&(SourceLocation, SampledSignal)], pulse: &AnalyticPulse) -> f64 {
    let inputs = batch_inputs(&samples.iter().map(|(p, _)| *p).collect::<Vec<_>>(), model.receiver_depth);
    let lengths: Vec<f64> = inputs.par_iter().map(|x| model.pln.forward_raw(*x)).collect();
    if lengths.iter().any(|l| !(*l > 0.0)) {
        return f64::INFINITY;
    }
    linearize(model, samples, pulse, &lengths).loss
}

/// Runs up to `iterations` damped Gauss-Newton steps on the mean signal loss
/// of `samples` under `pulse`. The sound speed stays fixed.
pub(crate) fn levenberg_marquardt(
    model: &mut ModelParams,
    samples: &[&(SourceLocation, SampledSignal)],
    pulse: &AnalyticPulse,
    iterations: usize,
) -> Result<LmOutcome> {
    let locs: Vec<SourceLocation> = samples.iter().map(|(p, _)| *p).collect();
    let inputs = batch_inputs(&locs, model.receiver_depth);
    let rows = inputs.len();
    let p = model.pln.n_params();
    let mut damping = f64::NAN;
    let mut initial = f64::NAN;
    let mut value = f64::NAN;
    let mut done = 0;
    for it in 0..iterations {
        let rows_grad: Vec<(f64, Vec<f64>)> = inputs.par_iter().map(|x| model.pln.length_with_grad(*x)).collect();
        let lengths: Vec<f64> = rows_grad.iter().map(|(l, _)| *l).collect();
        let jac = DMatrix::from_fn(rows, p, |i, j| rows_grad[i].1[j]);
        drop(rows_grad);
        let lin = linearize(model, samples, pulse, &lengths);
        if !lin.loss.is_finite() {
            return Err(Error::Divergence { epoch: it, loss: lin.loss });
        }
        if it == 0 {
            initial = lin.loss;
        }
        value = lin.loss;
        let gram = &jac * jac.transpose();
        let mut hg = DMatrix::zeros(rows, rows);
        for (k, b) in lin.blocks.iter().enumerate() {
            for a in 0..3 {
                for c in 0..rows {
                    hg[(3 * k + a, c)] = (0..3).map(|e| b[a * 3 + e] * gram[(3 * k + e, c)]).sum();
                }
            }
        }
        if damping.is_nan() {
            damping = 1e-3 * hg.trace() / rows as f64;
        }
        let g = DVector::from_vec(lin.grad);
        let mut accepted = false;
        for _ in 0..12 {
            let mut sys = hg.clone();
            for i in 0..rows {
                sys[(i, i)] += damping;
            }
            let Some(u) = sys.lu().solve(&g) else {
                damping *= 4.0;
                continue;
            };
            let step = jac.transpose() * u;
            let mut trial = model.clone();
            trial.pln.weights.values.iter_mut().zip(step.iter()).for_each(|(w, d)| *w -= d);
            let v = mean_loss(&trial, samples, pulse);
            if v < lin.loss {
                *model = trial;
                value = v;
                damping = (damping / 3.0).max(1e-300);
                accepted = true;
                break;
            }
            damping *= 4.0;
        }
        done = it + 1;
        if !accepted {
            break;
        }
    }
    Ok(LmOutcome {
        iterations: done,
        initial,
        value,
        damping,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::{gen_dataset, Environment, NoisePolicy, Region, SamplingPolicy};
    use crate::pln::{pln_init, InputNormalization, PlnArchitecture};

    #[test]
    fn steps_reduce_the_loss_near_a_fit() {
        let env = Environment::reference();
        let region = Region::default_training();
        let pulse = crate::signal::make_pulse(750.0, 500.0, 0.05).unwrap();
        let grid = crate::signal::TimeGrid::new(4000.0, 2.0).unwrap();
        let data = gen_dataset(&env, &region, 6, &pulse, &grid, NoisePolicy::Noiseless, SamplingPolicy::Stratified, 3).unwrap();
        let pln = pln_init(&PlnArchitecture::reduced(), InputNormalization::from_region(&region, 120.0), 1000.0, 1).unwrap();
        let mut model = ModelParams {
            pln,
            sound_speed: env.sound_speed,
            adapt_sound_speed: false,
            receiver_depth: env.receiver_depth,
            pulse,
        };
        let wide = pulse.smoothed(0.004);
        let smooth: Vec<(SourceLocation, SampledSignal)> =
            data.samples.iter().map(|(p, r)| (*p, crate::signal::smooth_samples(r, 0.004))).collect();
        let refs: Vec<_> = smooth.iter().collect();
        let before = mean_loss(&model, &refs, &wide);
        let out = levenberg_marquardt(&mut model, &refs, &wide, 5).unwrap();
        assert!((out.initial - before).abs() <= 1e-12 * before);
        assert!(out.value < before, "{} vs {before}", out.value);
        assert!((mean_loss(&model, &refs, &wide) - out.value).abs() <= 1e-12 * before);
    }
}
