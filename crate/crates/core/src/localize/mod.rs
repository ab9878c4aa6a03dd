//! Source localization by descent on the signal mismatch: plain GBL with a
//! frozen model, and domain-adaptive GBL that also moves the network weights
//! under a proximity penalty toward the pre-trained ones.

mod crlb;
mod toa;

pub use crlb::{crlb, location_sensitivities, CrlbResult};
pub use toa::{matched_filter, pick_peaks, toa_init, ToaEstimate};

use serde::{Deserialize, Serialize};

use crate::diff::{ParamVector, Tape, Var};
use crate::error::{Error, Result};
use nalgebra::{DMatrix, DVector};

use crate::forward::{three_ray_signs, ModelParams, Propagator};
use crate::oracle::{path_lengths_with_jacobian, Region, SourceLocation, THREE_RAY};
use crate::signal::{AnalyticPulse, SampledSignal, TimeGrid};

/// How the source coordinates are scaled before the descent step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum Preconditioner {
    /// Fixed per-axis scales in metres; the step is `-rate · diag(s²) · g`.
    Scaled { x: f64, z: f64 },
    /// Damped Gauss-Newton matrix of the whole objective, rebuilt at every
    /// iterate; the weight rate only acts as an on/off switch.
    GaussNewton,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GblConfig {
    pub max_iter: usize,
    /// Base step for the (preconditioned) source coordinates.
    pub location_rate: f64,
    /// Base step for the network weights (adaptive runs only).
    pub weight_rate: f64,
    pub backtrack: f64,
    pub max_backtracks: usize,
    pub armijo: f64,
    /// Stop when `‖grad‖ ≤ grad_rel_tol · ‖grad₀‖`.
    pub grad_rel_tol: f64,
    /// Stop when the accepted location step is shorter than this (m).
    pub step_tol: f64,
    pub bounds: Region,
    pub preconditioner: Preconditioner,
}

impl Default for GblConfig {
    fn default() -> Self {
        Self {
            max_iter: 500,
            location_rate: 1.0,
            weight_rate: 1e-3,
            backtrack: 0.5,
            max_backtracks: 40,
            armijo: 1e-4,
            grad_rel_tol: 1e-8,
            step_tol: 1e-4,
            bounds: Region {
                x_min: 50.0,
                x_max: 2000.0,
                z_min: 0.5,
                z_max: 199.5,
            },
            preconditioner: Preconditioner::GaussNewton,
        }
    }
}

impl GblConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if !(self.grad_rel_tol > 0.0) || !(self.step_tol > 0.0) {
            return bad("tolerances must be positive");
        }
        if !(self.location_rate >= 0.0) || !(self.weight_rate >= 0.0) {
            return bad("rates must be non-negative");
        }
        if !(self.backtrack > 0.0 && self.backtrack < 1.0) || !(self.armijo > 0.0 && self.armijo < 1.0) {
            return bad("backtrack and armijo factors must lie in (0, 1)");
        }
        if !(self.bounds.x_max > self.bounds.x_min && self.bounds.z_max > self.bounds.z_min) {
            return bad("search bounds are empty");
        }
        if let Preconditioner::Scaled { x, z } = self.preconditioner {
            if !(x > 0.0 && z > 0.0) {
                return bad("coordinate scales must be positive");
            }
        }
        Ok(())
    }

    fn clamp(&self, p: [f64; 2]) -> [f64; 2] {
        [
            p[0].clamp(self.bounds.x_min, self.bounds.x_max),
            p[1].clamp(self.bounds.z_min, self.bounds.z_max),
        ]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DaConfig {
    pub gamma: f64,
    /// Adds the sound speed to the adapted vector.
    pub adapt_sound_speed: bool,
    pub gbl: GblConfig,
}

impl Default for DaConfig {
    fn default() -> Self {
        Self {
            gamma: 1.0,
            adapt_sound_speed: false,
            gbl: GblConfig::default(),
        }
    }
}

impl DaConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma >= 0.0) {
            return Err(Error::Config("gamma must be non-negative".into()));
        }
        self.gbl.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExitReason {
    GradientTolerance,
    StepTolerance,
    MaxIterations,
    /// No backtracking step decreased the loss.
    LineSearchFailed,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LocalizationResult {
    pub location: SourceLocation,
    /// Adapted vector (adaptive runs only).
    pub weights: Option<ParamVector>,
    pub loss: f64,
    pub iterations: usize,
    /// Exit on the gradient or the step tolerance.
    pub converged: bool,
    /// Euclidean norm of the gradient over the free coordinates at exit.
    pub grad_norm: f64,
    pub exit: ExitReason,
}

/// Records `∫(r − f)² dt` for a source whose coordinates are tape nodes.
fn record_data(tape: &mut Tape, prop: &Propagator, adapt: Option<&[Var]>, p: [f64; 2], r: &SampledSignal) -> (Var, Var, Var) {
    let x = tape.input_scalar(p[0]);
    let z = tape.input_scalar(p[1]);
    let l = prop.record_data_term(tape, adapt, x, z, r);
    (l, x, z)
}

/// Value and location gradient of the GBL loss.
pub fn gbl_loss_grad(prop: &Propagator, p: &SourceLocation, r: &SampledSignal) -> Result<(f64, [f64; 2])> {
    let mut tape = Tape::new();
    let (l, x, z) = record_data(&mut tape, prop, None, [p.x, p.z], r);
    tape.check_finite()?;
    let g = tape.backward(l);
    Ok((tape.scalar(l), [g.get(x)[0], g.get(z)[0]]))
}

pub fn gbl_loss(prop: &Propagator, p: &SourceLocation, r: &SampledSignal) -> Result<f64> {
    Ok(gbl_loss_grad(prop, p, r)?.0)
}

/// `L_DA = ∫(r − f_w)² dt + (γ/2)‖w − w_tr‖²` where `w` is the adaptable
/// vector of `model` (network weights, plus `c` when unfrozen).
pub fn da_loss(model: &ModelParams, p: &SourceLocation, r: &SampledSignal, w_tr: &ParamVector, gamma: f64) -> Result<f64> {
    Ok(da_loss_grad(model, p, r, w_tr, gamma)?.0)
}

/// `L_DA` with its gradient: `(value, ∂/∂w, ∂/∂p)`.
pub fn da_loss_grad(
    model: &ModelParams,
    p: &SourceLocation,
    r: &SampledSignal,
    w_tr: &ParamVector,
    gamma: f64,
) -> Result<(f64, ParamVector, [f64; 2])> {
    let w = model.adapt_vector();
    if w.layout != w_tr.layout {
        return Err(Error::InvalidArgument("adapted and reference layouts differ".into()));
    }
    let prop = Propagator::Network(model.clone());
    let mut tape = Tape::new();
    let leaves = w.record(&mut tape);
    let (l, x, z) = record_data(&mut tape, &prop, Some(&leaves), [p.x, p.z], r);
    tape.check_finite()?;
    let grads = tape.backward(l);
    let mut gw: Vec<f64> = leaves.iter().flat_map(|&v| grads.get(v)).collect();
    let mut reg = 0.0;
    for ((g, a), b) in gw.iter_mut().zip(&w.values).zip(&w_tr.values) {
        reg += (a - b) * (a - b);
        *g += gamma * (a - b);
    }
    Ok((
        tape.scalar(l) + 0.5 * gamma * reg,
        w.with_values(gw),
        [grads.get(x)[0], grads.get(z)[0]],
    ))
}

/// Path lengths at `(w, p)` with their Jacobian. Rows are the three ray
/// lengths, then `c` when it is adapted; columns are the free adaptable
/// entries (none for frozen runs), then `x`, `z`.
struct Linearization {
    lengths: [f64; 3],
    speed: f64,
    rows: Vec<Vec<f64>>,
}

fn linearize(prop: &Propagator, w: &[f64], p: [f64; 2]) -> Result<Linearization> {
    match prop {
        Propagator::Analytic { env, .. } => {
            env.validate()?;
            let rays = path_lengths_with_jacobian(env, &SourceLocation::new(p[0], p[1]));
            Ok(Linearization {
                lengths: rays.map(|r| r.0),
                speed: env.sound_speed,
                rows: rays.iter().map(|r| r.1.to_vec()).collect(),
            })
        }
        Propagator::Network(base) => {
            let free = !w.is_empty();
            let m = if free { base.with_adapt_values(w) } else { base.clone() };
            let mut tape = Tape::new();
            let leaves = free.then(|| m.adapt_vector().record(&mut tape));
            let x = tape.input_scalar(p[0]);
            let z = tape.input_scalar(p[1]);
            let (weights, _) = m.record_params(&mut tape, leaves.as_deref());
            let inp = m.pln.source_inputs(&mut tape, x, z, m.receiver_depth, &THREE_RAY);
            let l = m.pln.record(&mut tape, &weights, inp);
            tape.check_finite()?;
            let values = tape.value(l).to_vec();
            let mut rows = Vec::with_capacity(4);
            for i in 0..3 {
                let mut pick = vec![0.0; 3];
                pick[i] = 1.0;
                let pick = tape.constant(pick, 1, 3);
                let li = tape.mul(l, pick);
                let li = tape.sum(li);
                let g = tape.backward(li);
                let mut row: Vec<f64> = leaves.iter().flatten().flat_map(|&v| g.get(v)).collect();
                row.extend([g.get(x)[0], g.get(z)[0]]);
                rows.push(row);
            }
            if free && m.adapt_sound_speed {
                let mut row = vec![0.0; w.len() + 2];
                row[w.len() - 1] = 1.0;
                rows.push(row);
            }
            Ok(Linearization {
                lengths: [values[0], values[1], values[2]],
                speed: m.sound_speed,
                rows,
            })
        }
    }
}

/// `2Δt Σ_t ∂f/∂q ∂f/∂qᵀ` for `q` = the three lengths (and `c` if its row
/// is present): the data-term Gauss-Newton matrix in that small space.
fn intermediate_gauss_newton(lin: &Linearization, grid: &TimeGrid, pulse: &AnalyticPulse) -> Result<DMatrix<f64>> {
    let m = lin.rows.len();
    let with_speed = m == 4;
    let c = lin.speed;
    let half = pulse.support();
    let mut partials = vec![vec![0.0; grid.n_samples]; m];
    for (i, (&l, rho)) in lin.lengths.iter().zip(three_ray_signs()).enumerate() {
        if !(l > 0.0) {
            return Err(Error::InvalidArgument("non-positive path length".into()));
        }
        let (alpha, tau) = (rho / l, l / c);
        let Some((lo, hi)) = grid.index_range(tau + pulse.center_time - half, tau + pulse.center_time + half) else {
            continue;
        };
        for k in lo..=hi {
            let (s, ds) = pulse.eval_with_dt(grid.time(k) - tau);
            partials[i][k] = -rho / (l * l) * s - alpha / c * ds;
            if with_speed {
                partials[3][k] += alpha * ds * l / (c * c);
            }
        }
    }
    let dt = grid.dt();
    Ok(DMatrix::from_fn(m, m, |a, b| {
        2.0 * dt * partials[a].iter().zip(&partials[b]).map(|(u, v)| u * v).sum::<f64>()
    }))
}

/// `-(Γ + μ·diag(A) + A)⁻¹ g` with `A = JᵀHJ`, where `Γ` is `γ` on the
/// adaptable entries. Solved through the small `q` space (Woodbury).
fn gauss_newton_direction(lin: &Linearization, h: &DMatrix<f64>, gamma: f64, n_w: usize, g: &[f64]) -> Option<Vec<f64>> {
    let m = lin.rows.len();
    let n = g.len();
    let jac = DMatrix::from_fn(m, n, |a, j| lin.rows[a][j]);
    let hj = h * &jac;
    let diag: Vec<f64> = (0..n).map(|j| jac.column(j).dot(&hj.column(j))).collect();
    let floor = 1e-12 * diag.iter().cloned().fold(0.0, f64::max);
    let inv_b: Vec<f64> = (0..n)
        .map(|j| {
            let b = if j < n_w { gamma } else { 0.0 } + 1e-8 * diag[j] + floor;
            1.0 / b
        })
        .collect();
    if inv_b.iter().any(|v| !v.is_finite()) {
        return None;
    }
    let u = DVector::from_fn(n, |j, _| inv_b[j] * g[j]);
    let jb = DMatrix::from_fn(m, n, |a, j| jac[(a, j)] * inv_b[j]);
    let k = &jb * jac.transpose();
    let lhs = DMatrix::identity(m, m) + h * k;
    let y = lhs.lu().solve(&(h * (&jac * &u)))?;
    let corr = jb.transpose() * y;
    let d: Vec<f64> = (0..n).map(|j| -(u[j] - corr[j])).collect();
    d.iter().all(|v| v.is_finite()).then_some(d)
}

/// One problem instance for the shared descent loop.
trait Objective {
    /// Loss and gradient at `(w, p)`; `w` is empty for frozen runs.
    fn eval(&self, w: &[f64], p: [f64; 2]) -> Result<(f64, Vec<f64>, [f64; 2])>;
    fn propagator(&self) -> &Propagator;
    fn signal(&self) -> &SampledSignal;
    fn gamma(&self) -> f64;
}

struct Frozen<'a> {
    prop: &'a Propagator,
    r: &'a SampledSignal,
}

impl Objective for Frozen<'_> {
    fn eval(&self, _: &[f64], p: [f64; 2]) -> Result<(f64, Vec<f64>, [f64; 2])> {
        let (l, g) = gbl_loss_grad(self.prop, &SourceLocation::new(p[0], p[1]), self.r)?;
        Ok((l, Vec::new(), g))
    }
    fn propagator(&self) -> &Propagator {
        self.prop
    }
    fn signal(&self) -> &SampledSignal {
        self.r
    }
    fn gamma(&self) -> f64 {
        0.0
    }
}

struct Adaptive<'a> {
    prop: Propagator,
    r: &'a SampledSignal,
    w_tr: &'a ParamVector,
    gamma: f64,
}

impl Adaptive<'_> {
    fn model(&self) -> &ModelParams {
        match &self.prop {
            Propagator::Network(m) => m,
            Propagator::Analytic { .. } => unreachable!("adaptive runs use a network"),
        }
    }
}

impl Objective for Adaptive<'_> {
    fn eval(&self, w: &[f64], p: [f64; 2]) -> Result<(f64, Vec<f64>, [f64; 2])> {
        let m = self.model().with_adapt_values(w);
        let (l, gw, gp) = da_loss_grad(&m, &SourceLocation::new(p[0], p[1]), self.r, self.w_tr, self.gamma)?;
        Ok((l, gw.values, gp))
    }
    fn propagator(&self) -> &Propagator {
        &self.prop
    }
    fn signal(&self) -> &SampledSignal {
        self.r
    }
    fn gamma(&self) -> f64 {
        self.gamma
    }
}

fn finite_or_inf<T>(r: Result<(f64, T, [f64; 2])>) -> Result<Option<(f64, T, [f64; 2])>> {
    match r {
        Ok(v) if v.0.is_finite() => Ok(Some(v)),
        Ok(_) | Err(Error::NumericOverflow { .. }) => Ok(None),
        Err(Error::InvalidArgument(_)) => Ok(None),
        Err(e) => Err(e),
    }
}

struct Trace {
    w: Vec<f64>,
    p: [f64; 2],
    loss: f64,
    iterations: usize,
    grad_norm: f64,
    exit: ExitReason,
}

/// Search direction `(dw, dp)` at the current iterate.
fn direction(obj: &dyn Objective, cfg: &GblConfig, w: &[f64], p: [f64; 2], gw: &[f64], gp: [f64; 2]) -> Result<(Vec<f64>, [f64; 2])> {
    let scaled = |x: f64, z: f64| {
        // proximal treatment of the penalty keeps large γ from stalling the step
        let rate = cfg.weight_rate / (1.0 + cfg.weight_rate * obj.gamma());
        (
            gw.iter().map(|g| -rate * g).collect(),
            [-cfg.location_rate * x * x * gp[0], -cfg.location_rate * z * z * gp[1]],
        )
    };
    Ok(match cfg.preconditioner {
        Preconditioner::Scaled { x, z } => scaled(x, z),
        Preconditioner::GaussNewton => {
            let lin = linearize(obj.propagator(), w, p)?;
            let h = intermediate_gauss_newton(&lin, &obj.signal().grid, obj.propagator().pulse())?;
            let mut g = gw.to_vec();
            g.extend(gp);
            match gauss_newton_direction(&lin, &h, obj.gamma(), w.len(), &g) {
                Some(d) => {
                    let n = w.len();
                    let rate = cfg.location_rate;
                    (d[..n].iter().map(|v| rate * v).collect(), [rate * d[n], rate * d[n + 1]])
                }
                None => scaled(100.0, 10.0),
            }
        }
    })
}

/// Descent with Armijo backtracking on `(w, p)`; `p` is projected onto the
/// search box.
fn descend(obj: &dyn Objective, w0: Vec<f64>, p0: [f64; 2], cfg: &GblConfig) -> Result<Trace> {
    let norm = |gw: &[f64], gp: [f64; 2]| (gw.iter().map(|v| v * v).sum::<f64>() + gp[0] * gp[0] + gp[1] * gp[1]).sqrt();
    let mut p = cfg.clamp(p0);
    let mut w = w0;
    let (mut loss, mut gw, mut gp) = finite_or_inf(obj.eval(&w, p))?
        .ok_or_else(|| Error::InitFailure("loss is not finite at the start point".into()))?;
    let g0 = norm(&gw, gp);
    let mut grad_norm = g0;
    let mut it = 0;
    let exit = loop {
        if grad_norm <= cfg.grad_rel_tol * g0 || grad_norm == 0.0 {
            break ExitReason::GradientTolerance;
        }
        if it >= cfg.max_iter {
            break ExitReason::MaxIterations;
        }
        let (dw, dp) = direction(obj, cfg, &w, p, &gw, gp)?;
        let mut t = 1.0;
        let mut accepted = None;
        for _ in 0..=cfg.max_backtracks {
            let pt = cfg.clamp([p[0] + t * dp[0], p[1] + t * dp[1]]);
            let wt: Vec<f64> = w.iter().zip(&dw).map(|(a, d)| a + t * d).collect();
            // decrease predicted by the projected step
            let pred = gp[0] * (pt[0] - p[0])
                + gp[1] * (pt[1] - p[1])
                + gw.iter().zip(wt.iter().zip(&w)).map(|(g, (a, b))| g * (a - b)).sum::<f64>();
            if pred < 0.0 {
                if let Some(next) = finite_or_inf(obj.eval(&wt, pt))? {
                    if next.0 <= loss + cfg.armijo * pred {
                        accepted = Some((wt, pt, next));
                        break;
                    }
                }
            }
            t *= cfg.backtrack;
        }
        let Some((wt, pt, (l, ngw, ngp))) = accepted else {
            break ExitReason::LineSearchFailed;
        };
        let moved = ((pt[0] - p[0]).powi(2)
            + (pt[1] - p[1]).powi(2)
            + wt.iter().zip(&w).map(|(a, b)| (a - b).powi(2)).sum::<f64>())
        .sqrt();
        w = wt;
        p = pt;
        loss = l;
        gw = ngw;
        gp = ngp;
        grad_norm = norm(&gw, gp);
        it += 1;
        if moved < cfg.step_tol {
            break ExitReason::StepTolerance;
        }
    };
    Ok(Trace {
        w,
        p,
        loss,
        iterations: it,
        grad_norm,
        exit,
    })
}

fn converged(exit: ExitReason) -> bool {
    matches!(exit, ExitReason::GradientTolerance | ExitReason::StepTolerance)
}

/// Gradient-based localization with the model frozen.
pub fn gbl(prop: &Propagator, r: &SampledSignal, p0: &SourceLocation, cfg: &GblConfig) -> Result<LocalizationResult> {
    cfg.validate()?;
    let trace = descend(&Frozen { prop, r }, Vec::new(), [p0.x, p0.z], cfg)?;
    Ok(LocalizationResult {
        location: SourceLocation::new(trace.p[0], trace.p[1]),
        weights: None,
        loss: trace.loss,
        iterations: trace.iterations,
        converged: converged(trace.exit),
        grad_norm: trace.grad_norm,
        exit: trace.exit,
    })
}

/// Joint descent over `[w; p]` from `[w_tr; p0]` on `L_DA`. A zero weight
/// rate freezes the adaptable vector, which reduces to [`gbl`].
pub fn da_gbl(w_tr: &ModelParams, r: &SampledSignal, p0: &SourceLocation, cfg: &DaConfig) -> Result<LocalizationResult> {
    cfg.validate()?;
    let model = ModelParams {
        adapt_sound_speed: cfg.adapt_sound_speed,
        ..w_tr.clone()
    };
    let reference = model.adapt_vector();
    let trace = if cfg.gbl.weight_rate == 0.0 {
        let prop = Propagator::Network(model.clone());
        let mut t = descend(&Frozen { prop: &prop, r }, Vec::new(), [p0.x, p0.z], &cfg.gbl)?;
        t.w = reference.values.clone();
        t
    } else {
        let obj = Adaptive {
            prop: Propagator::Network(model),
            r,
            w_tr: &reference,
            gamma: cfg.gamma,
        };
        descend(&obj, reference.values.clone(), [p0.x, p0.z], &cfg.gbl)?
    };
    Ok(LocalizationResult {
        location: SourceLocation::new(trace.p[0], trace.p[1]),
        weights: Some(reference.with_values(trace.w)),
        loss: trace.loss,
        iterations: trace.iterations,
        converged: converged(trace.exit),
        grad_norm: trace.grad_norm,
        exit: trace.exit,
    })
}
