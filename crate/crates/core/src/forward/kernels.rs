//! Loss kernels with hand-written adjoints. Both kernels compute their
//! partials during the forward pass so the recorded op owns no borrowed data.

use rayon::prelude::*;

use crate::diff::{CustomOp, Tape, Var};
use crate::signal::{AnalyticPulse, SampledSignal, TimeGrid};

/// Stores `∂L/∂input` per input; backward scales by the incoming adjoint.
struct Precomputed {
    name: &'static str,
    partials: Vec<Vec<f64>>,
}

impl CustomOp for Precomputed {
    fn name(&self) -> &'static str {
        self.name
    }

    fn backward(&self, out_grad: &[f64], input_grads: &mut [Vec<f64>]) {
        let g = out_grad[0];
        for (dst, src) in input_grads.iter_mut().zip(&self.partials) {
            for (d, s) in dst.iter_mut().zip(src) {
                *d += g * s;
            }
        }
    }
}

/// Per-signal value and partials of `Δt Σ_n (r_n - Σ_i α_i s(t_n - τ_i))²`.
fn mismatch_terms(grid: &TimeGrid, pulse: &AnalyticPulse, r: &[f64], arr: &[(f64, f64)]) -> (f64, Vec<f64>, Vec<f64>) {
    let dt = grid.dt();
    let m = arr.len();
    if arr.iter().any(|(a, t)| !a.is_finite() || !t.is_finite()) {
        return (f64::NAN, vec![f64::NAN; m], vec![f64::NAN; m]);
    }
    let half = pulse.support();
    let windows: Vec<Option<(usize, usize)>> = arr
        .iter()
        .map(|&(_, tau)| grid.index_range(tau + pulse.center_time - half, tau + pulse.center_time + half))
        .collect();
    let lo = windows.iter().flatten().map(|w| w.0).min();
    let hi = windows.iter().flatten().map(|w| w.1).max();
    let (lo, hi) = match (lo, hi) {
        (Some(lo), Some(hi)) => (lo, hi),
        _ => {
            let e: f64 = r.iter().map(|v| v * v).sum();
            return (dt * e, vec![0.0; m], vec![0.0; m]);
        }
    };
    let mut resid = r[lo..=hi].to_vec();
    for (&(alpha, tau), w) in arr.iter().zip(&windows) {
        if let Some((a, b)) = *w {
            for k in a..=b {
                resid[k - lo] -= alpha * pulse.eval(grid.time(k) - tau);
            }
        }
    }
    let outside: f64 = r[..lo].iter().chain(&r[hi + 1..]).map(|v| v * v).sum();
    let inside: f64 = resid.iter().map(|v| v * v).sum();
    let mut d_alpha = vec![0.0; m];
    let mut d_tau = vec![0.0; m];
    for (i, (&(alpha, tau), w)) in arr.iter().zip(&windows).enumerate() {
        if let Some((a, b)) = *w {
            let (mut sa, mut st) = (0.0, 0.0);
            for k in a..=b {
                let (s, ds) = pulse.eval_with_dt(grid.time(k) - tau);
                let e = resid[k - lo];
                sa += e * s;
                st += e * ds;
            }
            d_alpha[i] = -2.0 * dt * sa;
            d_tau[i] = 2.0 * dt * alpha * st;
        }
    }
    (dt * (outside + inside), d_alpha, d_tau)
}

/// Mismatch of one signal with its gradient and Gauss-Newton matrix taken
/// with respect to the path lengths.
pub(crate) fn length_gauss_newton(
    grid: &TimeGrid,
    pulse: &AnalyticPulse,
    r: &[f64],
    lengths: &[f64],
    signs: &[f64],
    speed: f64,
) -> (f64, Vec<f64>, Vec<f64>) {
    let m = lengths.len();
    let arr: Vec<(f64, f64)> = lengths.iter().zip(signs).map(|(&l, &rho)| (rho / l, l / speed)).collect();
    let (loss, d_alpha, d_tau) = mismatch_terms(grid, pulse, r, &arr);
    let g: Vec<f64> = (0..m)
        .map(|i| -d_alpha[i] * signs[i] / (lengths[i] * lengths[i]) + d_tau[i] / speed)
        .collect();
    let half = pulse.support();
    let partials: Vec<Option<(usize, Vec<f64>)>> = (0..m)
        .map(|i| {
            let (alpha, tau) = arr[i];
            let (a, b) = grid.index_range(tau + pulse.center_time - half, tau + pulse.center_time + half)?;
            let da = -signs[i] / (lengths[i] * lengths[i]);
            let v = (a..=b)
                .map(|k| {
                    let (s, ds) = pulse.eval_with_dt(grid.time(k) - tau);
                    da * s - alpha / speed * ds
                })
                .collect();
            Some((a, v))
        })
        .collect();
    let mut h = vec![0.0; m * m];
    for i in 0..m {
        for j in i..m {
            let (Some((ai, vi)), Some((aj, vj))) = (&partials[i], &partials[j]) else {
                continue;
            };
            let lo = (*ai).max(*aj);
            let hi = (ai + vi.len()).min(aj + vj.len());
            let dot: f64 = (lo..hi).map(|k| vi[k - ai] * vj[k - aj]).sum();
            h[i * m + j] = 2.0 * grid.dt() * dot;
            h[j * m + i] = h[i * m + j];
        }
    }
    (loss, g, h)
}

/// Batch-mean superposition mismatch. `alpha` and `tau` are `1 × (m·K)` rows
/// holding `m` arrivals per signal for `K` signals.
pub fn signal_mismatch(tape: &mut Tape, alpha: Var, tau: Var, signals: &[&SampledSignal], pulse: &AnalyticPulse) -> Var {
    let a = tape.value(alpha).to_vec();
    let t = tape.value(tau).to_vec();
    let k = signals.len().max(1);
    let m = a.len() / k;
    let terms: Vec<_> = signals
        .par_iter()
        .enumerate()
        .map(|(j, sig)| {
            let arr: Vec<(f64, f64)> = (0..m).map(|i| (a[j * m + i], t[j * m + i])).collect();
            mismatch_terms(&sig.grid, pulse, &sig.values, &arr)
        })
        .collect();
    let inv = 1.0 / k as f64;
    let mut loss = 0.0;
    let mut da = Vec::with_capacity(a.len());
    let mut dtau = Vec::with_capacity(a.len());
    for (l, ga, gt) in terms {
        loss += l * inv;
        da.extend(ga.iter().map(|v| v * inv));
        dtau.extend(gt.iter().map(|v| v * inv));
    }
    let op = Precomputed {
        name: "signal_mismatch",
        partials: vec![da, dtau],
    };
    tape.custom(&[alpha, tau], Box::new(op), vec![loss], 1, 1)
}

/// Received energy smoothed with a Gaussian of standard deviation `width`,
/// sampled every `step` seconds from `t = 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct EnvelopeTarget {
    pub grid: TimeGrid,
    pub width: f64,
    pub step: f64,
    pub values: Vec<f64>,
}

const ENVELOPE_SPAN: f64 = 6.0;

fn gauss(u: f64, var: f64) -> f64 {
    (-0.5 * u * u / var).exp() / (2.0 * std::f64::consts::PI * var).sqrt()
}

/// Output indices `j` with `|j·step - t| ≤ span`.
fn reach(t: f64, span: f64, step: f64, n_out: usize) -> Option<(usize, usize)> {
    let a = ((t - span) / step).ceil().max(0.0);
    let b = ((t + span) / step).floor().min(n_out as f64 - 1.0);
    (a <= b).then_some((a as usize, b as usize))
}

/// Scatters `Δt·v_n²` for samples `lo..=hi` through the smoothing kernel.
/// Data and model go through this same routine so they agree exactly.
fn scatter(grid: &TimeGrid, vals: &[f64], lo: usize, width: f64, step: f64, out: &mut [f64]) {
    let var = width * width;
    let dt = grid.dt();
    for (i, v) in vals.iter().enumerate() {
        if *v == 0.0 {
            continue;
        }
        let t = grid.time(lo + i);
        if let Some((a, b)) = reach(t, ENVELOPE_SPAN * width, step, out.len()) {
            let w = dt * v * v;
            for (j, o) in out.iter_mut().enumerate().take(b + 1).skip(a) {
                *o += w * gauss(j as f64 * step - t, var);
            }
        }
    }
}

pub fn smoothed_energy(sig: &SampledSignal, width: f64, step: f64) -> EnvelopeTarget {
    let n_out = (sig.grid.duration / step).floor() as usize + 1;
    let mut values = vec![0.0; n_out];
    scatter(&sig.grid, &sig.values, 0, width, step, &mut values);
    EnvelopeTarget {
        grid: sig.grid,
        width,
        step,
        values,
    }
}

/// Keeps the first arrival of each signal earliest: `μ·softplus((τ_0 - τ_i)/κ)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OrderPenalty {
    pub weight: f64,
    pub softness: f64,
}

/// Value and `τ` partials of `h Σ_j (E_r(t_j) - Σ_i α_i² E_s φ(t_j - τ_i - t_c))²`
/// with `φ` a Gaussian of variance `σ²/2 + W²`: the incoherent energy of the
/// arrivals, smoothed like the data. Amplitudes get no gradient here, which
/// removes the escape where a misplaced arrival fades out by growing `ℓ`.
fn envelope_terms(target: &EnvelopeTarget, pulse: &AnalyticPulse, arr: &[(f64, f64)]) -> (f64, Vec<f64>, Vec<f64>) {
    let m = arr.len();
    if arr.iter().any(|(a, t)| !a.is_finite() || !t.is_finite()) {
        return (f64::NAN, vec![f64::NAN; m], vec![f64::NAN; m]);
    }
    let var = 0.5 * pulse.envelope_sigma * pulse.envelope_sigma + target.width * target.width;
    let span = ENVELOPE_SPAN * var.sqrt();
    let es = pulse.energy();
    let h = target.step;
    let n_out = target.values.len();
    let windows: Vec<_> = arr
        .iter()
        .map(|&(_, tau)| reach(tau + pulse.center_time, span, h, n_out))
        .collect();
    let mut resid = target.values.clone();
    for (&(alpha, tau), w) in arr.iter().zip(&windows) {
        if let Some((a, b)) = *w {
            for (j, r) in resid.iter_mut().enumerate().take(b + 1).skip(a) {
                *r -= alpha * alpha * es * gauss(j as f64 * h - tau - pulse.center_time, var);
            }
        }
    }
    let loss = h * resid.iter().map(|v| v * v).sum::<f64>();
    let mut d_tau = vec![0.0; m];
    for (i, (&(alpha, tau), w)) in arr.iter().zip(&windows).enumerate() {
        if let Some((a, b)) = *w {
            let st: f64 = (a..=b)
                .map(|j| {
                    let u = j as f64 * h - tau - pulse.center_time;
                    resid[j] * gauss(u, var) * u / var
                })
                .sum();
            d_tau[i] = -2.0 * h * st * alpha * alpha * es;
        }
    }
    (loss, vec![0.0; m], d_tau)
}

/// Batch-mean smoothed-energy mismatch divided by `norm`, plus an optional
/// ordering penalty on the first arrival of each signal.
pub fn envelope_mismatch(
    tape: &mut Tape,
    alpha: Var,
    tau: Var,
    targets: &[&EnvelopeTarget],
    pulse: &AnalyticPulse,
    norm: f64,
    order: Option<OrderPenalty>,
) -> Var {
    let a = tape.value(alpha).to_vec();
    let t = tape.value(tau).to_vec();
    let k = targets.len().max(1);
    let m = a.len() / k;
    let terms: Vec<_> = targets
        .par_iter()
        .enumerate()
        .map(|(j, tgt)| {
            let arr: Vec<(f64, f64)> = (0..m).map(|i| (a[j * m + i], t[j * m + i])).collect();
            let (mut l, mut ga, mut gt) = envelope_terms(tgt, pulse, &arr);
            l /= norm;
            ga.iter_mut().for_each(|v| *v /= norm);
            gt.iter_mut().for_each(|v| *v /= norm);
            if let Some(p) = order {
                for i in 1..m {
                    let u = (arr[0].1 - arr[i].1) / p.softness;
                    l += p.weight * crate::diff::softplus(u);
                    let d = p.weight * crate::diff::sigmoid(u) / p.softness;
                    gt[0] += d;
                    gt[i] -= d;
                }
            }
            (l, ga, gt)
        })
        .collect();
    let inv = 1.0 / k as f64;
    let mut loss = 0.0;
    let mut da = Vec::with_capacity(a.len());
    let mut dtau = Vec::with_capacity(a.len());
    for (l, ga, gt) in terms {
        loss += l * inv;
        da.extend(ga.iter().map(|v| v * inv));
        dtau.extend(gt.iter().map(|v| v * inv));
    }
    let op = Precomputed {
        name: "envelope_mismatch",
        partials: vec![da, dtau],
    };
    tape.custom(&[alpha, tau], Box::new(op), vec![loss], 1, 1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diff::{fd_check, Layout, ParamVector, Segment};
    use crate::signal::{make_pulse, superpose};

    fn setup() -> (TimeGrid, AnalyticPulse, SampledSignal) {
        let grid = TimeGrid::new(4000.0, 0.6).unwrap();
        let pulse = make_pulse(750.0, 500.0, 0.05).unwrap();
        let vals = superpose(&grid, &pulse, &[(1.0, 0.2), (-0.8, 0.2012), (0.6, 0.23)]);
        (grid, pulse, SampledSignal::new(grid, vals).unwrap())
    }

    fn at(values: Vec<f64>) -> ParamVector {
        let layout = Layout::new(vec![Segment::new("alpha", 1, 3), Segment::new("tau", 1, 3)]);
        ParamVector::new(layout, values).unwrap()
    }

    #[test]
    fn zero_at_truth_and_full_energy_when_model_silent() {
        let (grid, pulse, sig) = setup();
        let mut tape = Tape::new();
        let a = tape.input(&[1.0, -0.8, 0.6], 1, 3);
        let t = tape.input(&[0.2, 0.2012, 0.23], 1, 3);
        let l = signal_mismatch(&mut tape, a, t, &[&sig], &pulse);
        assert!(tape.scalar(l).abs() < 1e-24);

        let mut tape = Tape::new();
        let a = tape.input(&[0.0; 3], 1, 3);
        let t = tape.input(&[0.2; 3], 1, 3);
        let l = signal_mismatch(&mut tape, a, t, &[&sig], &pulse);
        let e: f64 = sig.values.iter().map(|v| v * v).sum::<f64>() * grid.dt();
        assert!((tape.scalar(l) - e).abs() < 1e-12 * e);
    }

    #[test]
    fn mismatch_gradient_matches_differences() {
        let (_, pulse, sig) = setup();
        let f = |tape: &mut Tape, v: &[Var]| Ok(signal_mismatch(tape, v[0], v[1], &[&sig], &pulse));
        let rep = fd_check(f, &at(vec![0.9, -0.7, 0.5, 0.20021, 0.20105, 0.2303]), 1e-6, 0, 0).unwrap();
        assert!(rep.max_rel_error < 1e-5, "{rep:?}");
    }

    #[test]
    fn envelope_gradient_matches_differences() {
        let (_, pulse, sig) = setup();
        let tgt = smoothed_energy(&sig, 0.004, 0.001);
        let order = Some(OrderPenalty { weight: 0.1, softness: 1e-3 });
        let f = |tape: &mut Tape, v: &[Var]| Ok(envelope_mismatch(tape, v[0], v[1], &[&tgt], &pulse, 1e-3, order));
        let rep = fd_check(f, &at(vec![0.9, -0.7, 0.5, 0.203, 0.198, 0.236]), 1e-6, 0, 0).unwrap();
        for i in 3..6 {
            assert!(crate::diff::rel_error(rep.analytic.values[i], rep.fd.values[i]) < 1e-5, "{rep:?}");
        }
        assert!(rep.analytic.values[..3].iter().all(|&g| g == 0.0));
    }

    #[test]
    fn envelope_model_matches_smoothed_data_for_separated_arrivals() {
        let grid = TimeGrid::new(4000.0, 0.6).unwrap();
        let pulse = make_pulse(750.0, 500.0, 0.05).unwrap();
        let arr = [(1.0, 0.1), (0.5, 0.3)];
        let sig = SampledSignal::new(grid, superpose(&grid, &pulse, &arr)).unwrap();
        let tgt = smoothed_energy(&sig, 0.005, 0.001);
        let (loss, _, gt) = envelope_terms(&tgt, &pulse, &arr);
        let scale: f64 = tgt.values.iter().map(|v| v * v).sum::<f64>() * tgt.step;
        assert!(loss < 1e-8 * scale, "{loss} vs {scale}");
        let (off, _, _) = envelope_terms(&tgt, &pulse, &[(1.0, 0.104), (0.5, 0.3)]);
        assert!(off > 1e3 * loss);
        assert!(gt.iter().all(|g| g.is_finite()));
    }

    #[test]
    fn length_gauss_newton_is_consistent() {
        let grid = TimeGrid::new(4000.0, 0.7).unwrap();
        let pulse = make_pulse(750.0, 500.0, 0.05).unwrap();
        let (signs, c) = ([1.0, -1.0, 1.0], 1500.0);
        let truth = [300.0, 301.5, 340.0];
        let arr: Vec<(f64, f64)> = truth.iter().zip(&signs).map(|(l, r)| (r / l, l / c)).collect();
        let r = superpose(&grid, &pulse, &arr);
        let eval = |l: &[f64]| length_gauss_newton(&grid, &pulse, &r, l, &signs, c);
        let (loss, g, h) = eval(&truth);
        assert!(loss < 1e-28 && g.iter().all(|v| v.abs() < 1e-14));
        // at a zero-residual point the Gauss-Newton matrix is the Hessian
        let step = 1e-5;
        for j in 0..3 {
            let mut up = truth;
            let mut dn = truth;
            up[j] += step;
            dn[j] -= step;
            let (_, gu, _) = eval(&up);
            let (_, gd, _) = eval(&dn);
            for i in 0..3 {
                let fd = (gu[i] - gd[i]) / (2.0 * step);
                assert!((fd - h[i * 3 + j]).abs() <= 1e-5 * h[i * 3 + i].abs(), "{i}{j}: {fd} vs {}", h[i * 3 + j]);
            }
        }
        let off = [300.3, 301.2, 340.4];
        let (l0, g, _) = eval(&off);
        for i in 0..3 {
            let mut up = off;
            let mut dn = off;
            up[i] += 1e-6;
            dn[i] -= 1e-6;
            let fd = (eval(&up).0 - eval(&dn).0) / 2e-6;
            assert!((fd - g[i]).abs() <= 1e-5 * g[i].abs().max(l0), "{fd} vs {}", g[i]);
        }
    }
}
