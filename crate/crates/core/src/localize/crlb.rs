//! Cramér-Rao bound for the source location under white Gaussian noise.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::forward::{three_ray_signs, Propagator};
use crate::oracle::{path_lengths_with_jacobian, Environment, SourceLocation, THREE_RAY};
use crate::signal::{AnalyticPulse, TimeGrid};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CrlbResult {
    pub fim: [[f64; 2]; 2],
    /// `√trace(FIM⁻¹)` in metres.
    pub rmse_bound: f64,
}

/// Adds `Σ_i ∂f/∂ℓ_i · J_i` into the two sensitivity signals.
fn accumulate(grid: &TimeGrid, pulse: &AnalyticPulse, speed: f64, rays: &[(f64, [f64; 2])], out: &mut [Vec<f64>; 2]) {
    let half = pulse.support();
    for (&(l, jac), rho) in rays.iter().zip(three_ray_signs()) {
        let (alpha, tau) = (rho / l, l / speed);
        let Some((lo, hi)) = grid.index_range(tau + pulse.center_time - half, tau + pulse.center_time + half) else {
            continue;
        };
        for k in lo..=hi {
            let (s, ds) = pulse.eval_with_dt(grid.time(k) - tau);
            let d_len = -rho / (l * l) * s - alpha / speed * ds;
            out[0][k] += d_len * jac[0];
            out[1][k] += d_len * jac[1];
        }
    }
}

/// `∂f/∂x_s` and `∂f/∂z_s` sampled on `grid`. Analytic for the image-method
/// propagator; for a network the length derivatives are central differences
/// with a 1 mm step.
pub fn location_sensitivities(prop: &Propagator, p: &SourceLocation, grid: &TimeGrid) -> Result<[Vec<f64>; 2]> {
    let mut out = [vec![0.0; grid.n_samples], vec![0.0; grid.n_samples]];
    let (rays, speed): (Vec<(f64, [f64; 2])>, f64) = match prop {
        Propagator::Analytic { env, .. } => {
            env.validate()?;
            (path_lengths_with_jacobian(env, p).to_vec(), env.sound_speed)
        }
        Propagator::Network(m) => {
            let h = 1e-3;
            let at = |dx: f64, dz: f64| m.lengths(&SourceLocation::new(p.x + dx, p.z + dz));
            let (xp, xm, zp, zm) = (at(h, 0.0), at(-h, 0.0), at(0.0, h), at(0.0, -h));
            let l = m.lengths(p);
            let rays = (0..THREE_RAY.len())
                .map(|i| (l[i], [(xp[i] - xm[i]) / (2.0 * h), (zp[i] - zm[i]) / (2.0 * h)]))
                .collect();
            (rays, m.sound_speed)
        }
    };
    if rays.iter().any(|(l, _)| !(*l > 0.0)) {
        return Err(Error::InvalidArgument("non-positive path length".into()));
    }
    accumulate(grid, prop.pulse(), speed, &rays, &mut out);
    Ok(out)
}

/// Fisher information `(2/N0) ∫ ∂f/∂p_i ∂f/∂p_j dt` of the noiseless
/// image-method signal and the resulting RMSE bound.
pub fn crlb(env: &Environment, p: &SourceLocation, pulse: &AnalyticPulse, n0: f64, grid: &TimeGrid) -> Result<CrlbResult> {
    if !(n0 > 0.0) {
        return Err(Error::InvalidArgument(format!("noise density must be positive, got {n0}")));
    }
    let prop = Propagator::Analytic { env: *env, pulse: *pulse };
    let s = location_sensitivities(&prop, p, grid)?;
    let fim = fisher(&s, grid.dt(), n0);
    let det = fim[0][0] * fim[1][1] - fim[0][1] * fim[1][0];
    if !(det > 1e-12 * fim[0][0] * fim[1][1]) || !det.is_finite() {
        return Err(Error::UnidentifiableGeometry);
    }
    let trace_inv = (fim[0][0] + fim[1][1]) / det;
    Ok(CrlbResult {
        fim,
        rmse_bound: trace_inv.sqrt(),
    })
}

pub(crate) fn fisher(s: &[Vec<f64>; 2], dt: f64, n0: f64) -> [[f64; 2]; 2] {
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(u, v)| u * v).sum::<f64>() * dt * 2.0 / n0;
    let off = dot(&s[0], &s[1]);
    [[dot(&s[0], &s[0]), off], [off, dot(&s[1], &s[1])]]
}
