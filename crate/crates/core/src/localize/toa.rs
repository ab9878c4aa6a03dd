//! Arrival-time initialization: matched filter, peak picking, and a damped
//! Gauss-Newton fit of the image-method delays under an assumed environment.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::oracle::{path_lengths_with_jacobian, Environment, SourceLocation};
use crate::signal::{AnalyticPulse, SampledSignal};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToaEstimate {
    /// Arrival delays in seconds, strictly increasing.
    pub times: Vec<f64>,
    /// Matched-filter values at the picked peaks (signed).
    pub peaks: Vec<f64>,
    /// Ray index (0 direct, 1 surface, 2 bottom) assigned to each time.
    pub rays: Vec<usize>,
    pub initial: SourceLocation,
}

/// `c(τ_k) = Δt Σ_n r(t_n) s(t_n − τ_k)` for every lag on the grid.
pub fn matched_filter(r: &SampledSignal, pulse: &AnalyticPulse) -> Vec<f64> {
    let grid = r.grid;
    let dt = grid.dt();
    let half = pulse.support();
    let reach = (half / dt).ceil() as isize;
    let centre = (pulse.center_time / dt).round() as isize;
    let taps: Vec<f64> = (-reach..=reach).map(|j| pulse.eval(((centre + j) as f64) * dt)).collect();
    let n = r.values.len() as isize;
    (0..n)
        .map(|k| {
            let mut acc = 0.0;
            for (i, tap) in taps.iter().enumerate() {
                let m = k + centre + i as isize - reach;
                if (0..n).contains(&m) {
                    acc += r.values[m as usize] * tap;
                }
            }
            acc * dt
        })
        .collect()
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n == 0 {
        0.0
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Up to `count` peaks of `|c|` above `3 × MAD(c)` that are at least
/// `min_sep` samples apart, strongest first. Returns sample indices.
pub fn pick_peaks(c: &[f64], count: usize, min_sep: usize) -> Vec<usize> {
    let med = median(c.to_vec());
    let mad = median(c.iter().map(|v| (v - med).abs()).collect());
    let threshold = 3.0 * mad;
    let mut cand: Vec<usize> = (1..c.len().saturating_sub(1))
        .filter(|&k| {
            let a = c[k].abs();
            a > threshold && a > 0.0 && a >= c[k - 1].abs() && a >= c[k + 1].abs()
        })
        .collect();
    cand.sort_by(|&a, &b| c[b].abs().total_cmp(&c[a].abs()).then(a.cmp(&b)));
    let mut picked: Vec<usize> = Vec::new();
    for k in cand {
        if picked.iter().all(|&q| q.abs_diff(k) >= min_sep) {
            picked.push(k);
            if picked.len() == count {
                break;
            }
        }
    }
    picked
}

/// Sub-sample lag from a parabola through the peak and its neighbours.
fn refine(c: &[f64], k: usize, dt: f64) -> f64 {
    if k == 0 || k + 1 >= c.len() {
        return k as f64 * dt;
    }
    let (a, b, d) = (c[k - 1], c[k], c[k + 1]);
    let den = a - 2.0 * b + d;
    let shift = if den.abs() > 0.0 { (0.5 * (a - d) / den).clamp(-0.5, 0.5) } else { 0.0 };
    (k as f64 + shift) * dt
}

/// Damped Gauss-Newton on `ℓ_i(p) = c·τ_i` for the rays present.
fn fit_location(env: &Environment, targets: &[(usize, f64)], start: [f64; 2]) -> ([f64; 2], f64) {
    let clamp = |p: [f64; 2]| [p[0].max(1.0), p[1].clamp(0.5, env.depth - 0.5)];
    let cost = |p: [f64; 2]| {
        let rays = path_lengths_with_jacobian(env, &SourceLocation::new(p[0], p[1]));
        targets.iter().map(|&(i, l)| (rays[i].0 - l).powi(2)).sum::<f64>()
    };
    let mut p = clamp(start);
    let mut f = cost(p);
    let mut mu = 1e-3;
    for _ in 0..100 {
        let rays = path_lengths_with_jacobian(env, &SourceLocation::new(p[0], p[1]));
        let (mut a, mut g) = ([[0.0; 2]; 2], [0.0; 2]);
        for &(i, l) in targets {
            let (li, j) = rays[i];
            let e = li - l;
            for r in 0..2 {
                g[r] += j[r] * e;
                for c in 0..2 {
                    a[r][c] += j[r] * j[c];
                }
            }
        }
        let mut improved = false;
        for _ in 0..30 {
            let m = [[a[0][0] * (1.0 + mu), a[0][1]], [a[1][0], a[1][1] * (1.0 + mu)]];
            let det = m[0][0] * m[1][1] - m[0][1] * m[1][0];
            if det.abs() > 0.0 {
                let step = [(m[1][1] * g[0] - m[0][1] * g[1]) / det, (m[0][0] * g[1] - m[1][0] * g[0]) / det];
                let trial = clamp([p[0] - step[0], p[1] - step[1]]);
                let ft = cost(trial);
                if ft < f {
                    let moved = (trial[0] - p[0]).hypot(trial[1] - p[1]);
                    p = trial;
                    f = ft;
                    mu = (mu / 4.0).max(1e-12);
                    improved = moved > 1e-9;
                    break;
                }
            }
            mu *= 8.0;
        }
        if !improved {
            break;
        }
    }
    (p, f)
}

/// Initial location from arrival times. The first peak is the direct ray;
/// later peaks are labelled by matched-filter sign (surface reflections
/// flip polarity), falling back to arrival order.
pub fn toa_init(r: &SampledSignal, pulse: &AnalyticPulse, env: &Environment) -> Result<ToaEstimate> {
    env.validate()?;
    let dt = r.grid.dt();
    let c = matched_filter(r, pulse);
    let min_sep = ((2.0 / pulse.bandwidth) / dt).ceil() as usize;
    let mut idx = pick_peaks(&c, 3, min_sep.max(1));
    if idx.len() < 2 {
        return Err(Error::InitFailure(format!("found {} matched-filter peak(s), need 2", idx.len())));
    }
    idx.sort_unstable();
    let times: Vec<f64> = idx.iter().map(|&k| refine(&c, k, dt)).collect();
    let peaks: Vec<f64> = idx.iter().map(|&k| c[k]).collect();
    let sign = pulse.amplitude.signum();
    let mut rays = vec![0];
    let later: Vec<usize> = (1..idx.len()).collect();
    match later.as_slice() {
        [a] => rays.push(if peaks[*a] * sign < 0.0 { 1 } else { 2 }),
        [a, b] => {
            let (na, nb) = (peaks[*a] * sign < 0.0, peaks[*b] * sign < 0.0);
            if na && !nb {
                rays.extend([1, 2]);
            } else if nb && !na {
                rays.extend([2, 1]);
            } else {
                rays.extend([1, 2]);
            }
        }
        _ => unreachable!("at most three peaks"),
    }
    let targets: Vec<(usize, f64)> = rays.iter().zip(&times).map(|(&i, &t)| (i, t * env.sound_speed)).collect();
    // start on the direct-path range circle, best of a coarse angle scan
    let range = targets[0].1;
    let best = (1..64)
        .map(|k| {
            let angle = -std::f64::consts::FRAC_PI_2 + std::f64::consts::PI * k as f64 / 64.0;
            [range * angle.cos(), env.receiver_depth + range * angle.sin()]
        })
        .filter(|p| p[0] > 0.0 && p[1] > 0.0 && p[1] < env.depth)
        .map(|p| fit_location(env, &targets, p))
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .ok_or_else(|| Error::InitFailure("direct-path range circle misses the waveguide".into()))?;
    Ok(ToaEstimate {
        times,
        peaks,
        rays,
        initial: SourceLocation::new(best.0[0], best.0[1]),
    })
}
