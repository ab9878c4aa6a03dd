//! Source pulse, time grids, noise injection and energy bookkeeping.
//!
//! The source waveform is a Gaussian-windowed cosine
//!
//! ```text
//! s(t) = A · exp(-(t - t_c)² / (2σ²)) · cos(2π f0 (t - t_c)),   σ = 1 / (π B)
//! ```
//!
//! kept in closed form so that `s'(t)` is available analytically and the
//! delay `t - τ` can be differentiated without interpolation kernels.
//! Integrals are plain Riemann sums with `Δt = 1 / fs`.

use std::f64::consts::PI;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Half-width of the pulse support in envelope standard deviations. Beyond
/// this the envelope is below `e^-84`, i.e. far under `f64` resolution of
/// the peak.
pub const PULSE_SUPPORT_SIGMAS: f64 = 13.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnalyticPulse {
    /// Carrier frequency in Hz.
    pub center_freq: f64,
    /// Bandwidth in Hz; tied to the envelope through `σ = 1/(π B)`.
    pub bandwidth: f64,
    /// Time of the envelope peak in seconds.
    pub center_time: f64,
    /// Envelope standard deviation in seconds.
    pub envelope_sigma: f64,
    /// Peak value of the pulse.
    pub amplitude: f64,
}

/// Builds the unit-amplitude pulse.
pub fn make_pulse(center_freq: f64, bandwidth: f64, center_time: f64) -> Result<AnalyticPulse> {
    AnalyticPulse::new(center_freq, bandwidth, center_time)
}

impl AnalyticPulse {
    pub fn new(center_freq: f64, bandwidth: f64, center_time: f64) -> Result<Self> {
        if !(center_freq > 0.0 && center_freq.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "center frequency must be positive, got {center_freq}"
            )));
        }
        if !(bandwidth > 0.0 && bandwidth.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "bandwidth must be positive, got {bandwidth}"
            )));
        }
        if !(center_time >= 0.0 && center_time.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "center time must be non-negative, got {center_time}"
            )));
        }
        Ok(Self {
            center_freq,
            bandwidth,
            center_time,
            envelope_sigma: 1.0 / (PI * bandwidth),
            amplitude: 1.0,
        })
    }

    /// Same waveform scaled to a different peak value (source level).
    pub fn with_amplitude(mut self, amplitude: f64) -> Self {
        self.amplitude = amplitude;
        self
    }

    #[inline]
    pub fn eval(&self, t: f64) -> f64 {
        let u = t - self.center_time;
        let env = (-u * u / (2.0 * self.envelope_sigma * self.envelope_sigma)).exp();
        self.amplitude * env * (2.0 * PI * self.center_freq * u).cos()
    }

    #[inline]
    pub fn eval_dt(&self, t: f64) -> f64 {
        self.eval_with_dt(t).1
    }

    /// Value and time derivative in one pass.
    #[inline]
    pub fn eval_with_dt(&self, t: f64) -> (f64, f64) {
        let u = t - self.center_time;
        let s2 = self.envelope_sigma * self.envelope_sigma;
        let env = self.amplitude * (-u * u / (2.0 * s2)).exp();
        let w = 2.0 * PI * self.center_freq;
        let (sin, cos) = (w * u).sin_cos();
        (env * cos, -env * (u / s2 * cos + w * sin))
    }

    /// Half-width of the interval around `center_time` outside which the
    /// pulse is treated as zero.
    pub fn support(&self) -> f64 {
        PULSE_SUPPORT_SIGMAS * self.envelope_sigma
    }

    /// The pulse convolved with a unit-area Gaussian of standard deviation
    /// `width`: again a Gaussian-windowed cosine, with a wider envelope and a
    /// lower carrier.
    pub fn smoothed(&self, width: f64) -> Self {
        if width == 0.0 {
            return *self;
        }
        let s2 = self.envelope_sigma * self.envelope_sigma;
        let v = s2 + width * width;
        let w = 2.0 * PI * self.center_freq;
        let sigma = v.sqrt();
        Self {
            center_freq: self.center_freq * s2 / v,
            bandwidth: 1.0 / (PI * sigma),
            center_time: self.center_time,
            envelope_sigma: sigma,
            amplitude: self.amplitude * (s2 / v).sqrt() * (-0.5 * w * w * s2 * width * width / v).exp(),
        }
    }

    /// Closed-form `∫ s(t)² dt` over the real line.
    pub fn energy(&self) -> f64 {
        let s = self.envelope_sigma;
        let w = 2.0 * PI * self.center_freq;
        0.5 * self.amplitude * self.amplitude * s * PI.sqrt() * (1.0 + (-w * w * s * s).exp())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    pub sample_rate: f64,
    pub duration: f64,
    pub n_samples: usize,
}

impl TimeGrid {
    pub fn new(sample_rate: f64, duration: f64) -> Result<Self> {
        if !(sample_rate > 0.0 && sample_rate.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "sample rate must be positive, got {sample_rate}"
            )));
        }
        if !(duration > 0.0 && duration.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "duration must be positive, got {duration}"
            )));
        }
        let n_samples = (sample_rate * duration).round() as usize;
        if n_samples == 0 {
            return Err(Error::InvalidArgument(
                "grid must contain at least one sample".into(),
            ));
        }
        Ok(Self {
            sample_rate,
            duration,
            n_samples,
        })
    }

    #[inline]
    pub fn dt(&self) -> f64 {
        1.0 / self.sample_rate
    }

    #[inline]
    pub fn time(&self, k: usize) -> f64 {
        k as f64 / self.sample_rate
    }

    /// Inclusive sample-index range covering `[t0, t1]`, clipped to the grid.
    pub fn index_range(&self, t0: f64, t1: f64) -> Option<(usize, usize)> {
        let lo = (t0 * self.sample_rate).ceil().max(0.0);
        let hi = (t1 * self.sample_rate)
            .floor()
            .min(self.n_samples as f64 - 1.0);
        if hi < lo {
            None
        } else {
            Some((lo as usize, hi as usize))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampledSignal {
    pub grid: TimeGrid,
    pub values: Vec<f64>,
}

impl SampledSignal {
    pub fn new(grid: TimeGrid, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.n_samples {
            return Err(Error::GridMismatch(format!(
                "{} values for a grid of {} samples",
                values.len(),
                grid.n_samples
            )));
        }
        if let Some(k) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument(format!("sample {k} is not finite")));
        }
        Ok(Self { grid, values })
    }

    pub fn zeros(grid: TimeGrid) -> Self {
        Self {
            grid,
            values: vec![0.0; grid.n_samples],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    /// One-sided noise power spectral density.
    pub n0: f64,
    pub seed: u64,
}

impl NoiseSpec {
    pub fn noiseless() -> Self {
        Self { n0: 0.0, seed: 0 }
    }
}

/// `Δt · Σ v²`.
pub fn energy(sig: &SampledSignal) -> f64 {
    sig.grid.dt() * sig.values.iter().map(|v| v * v).sum::<f64>()
}

/// Noise PSD that realizes `snr = E / (B N0)` for the given clean signal.
pub fn snr_to_n0(sig: &SampledSignal, snr_linear: f64, bandwidth: f64) -> Result<f64> {
    if !(snr_linear > 0.0) || !(bandwidth > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "snr ({snr_linear}) and bandwidth ({bandwidth}) must be positive"
        )));
    }
    let e = energy(sig);
    if e <= 0.0 {
        return Err(Error::InvalidArgument("signal has zero energy".into()));
    }
    Ok(e / (bandwidth * snr_linear))
}

pub fn db_to_linear(db: f64) -> f64 {
    10f64.powf(db / 10.0)
}

/// Adds white Gaussian noise with per-sample variance `N0·fs/2`.
pub fn add_awgn(sig: &SampledSignal, spec: NoiseSpec) -> SampledSignal {
    let mut out = sig.clone();
    if spec.n0 == 0.0 {
        return out;
    }
    let std = (spec.n0 * sig.grid.sample_rate / 2.0).sqrt();
    let normal = Normal::new(0.0, std).expect("noise std is finite and non-negative");
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    for v in out.values.iter_mut() {
        *v += normal.sample(&mut rng);
    }
    out
}

/// Sums `α_i · s(t - τ_i)` over the grid, evaluating each arrival only inside
/// its pulse support. This is the single superposition routine shared by the
/// propagation oracle and the learned forward model.
pub fn superpose(grid: &TimeGrid, pulse: &AnalyticPulse, arrivals: &[(f64, f64)]) -> Vec<f64> {
    let mut values = vec![0.0; grid.n_samples];
    let half = pulse.support();
    for &(alpha, tau) in arrivals {
        let centre = tau + pulse.center_time;
        if let Some((lo, hi)) = grid.index_range(centre - half, centre + half) {
            for (k, v) in values.iter_mut().enumerate().take(hi + 1).skip(lo) {
                *v += alpha * pulse.eval(grid.time(k) - tau);
            }
        }
    }
    values
}

/// Discrete convolution with a unit-area Gaussian of standard deviation
/// `width` seconds (truncated at eight deviations).
pub fn smooth_samples(sig: &SampledSignal, width: f64) -> SampledSignal {
    if width == 0.0 {
        return sig.clone();
    }
    let dt = sig.grid.dt();
    let reach = (8.0 * width / dt).ceil() as isize;
    let kernel: Vec<f64> = (-reach..=reach)
        .map(|k| {
            let u = k as f64 * dt;
            dt * (-0.5 * u * u / (width * width)).exp() / (width * (2.0 * PI).sqrt())
        })
        .collect();
    let n = sig.values.len() as isize;
    let values = (0..n)
        .map(|i| {
            (-reach..=reach)
                .filter(|k| (0..n).contains(&(i - k)))
                .map(|k| kernel[(k + reach) as usize] * sig.values[(i - k) as usize])
                .sum()
        })
        .collect();
    SampledSignal { grid: sig.grid, values }
}

/// Deterministic seed derivation (splitmix64 over the parts).
pub fn derive_seed(master: u64, parts: &[u64]) -> u64 {
    let mut h = splitmix(master ^ 0x5151_7a6c_6f63_0001);
    for &p in parts {
        h = splitmix(h ^ p.wrapping_mul(0x9e37_79b9_7f4a_7c15));
    }
    h
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn paper_pulse() -> AnalyticPulse {
        make_pulse(750.0, 500.0, 0.05).unwrap()
    }

    #[test]
    fn pulse_peak_and_decay() {
        let p = paper_pulse();
        assert_eq!(p.eval(p.center_time), 1.0);
        assert!(p.eval(p.center_time + 10.0 * p.envelope_sigma).abs() < 1e-20);
        assert_eq!(p.eval_dt(p.center_time), 0.0);
    }

    #[test]
    fn pulse_rejects_bad_arguments() {
        assert!(make_pulse(0.0, 500.0, 0.05).is_err());
        assert!(make_pulse(750.0, -1.0, 0.05).is_err());
        assert!(make_pulse(750.0, 500.0, -0.1).is_err());
    }

    #[test]
    fn pulse_is_even_about_center() {
        let p = paper_pulse();
        for &d in &[1e-4, 3.3e-4, 1e-3, 2.5e-3] {
            assert_eq!(p.eval(p.center_time + d), p.eval(p.center_time - d));
        }
    }

    #[test]
    fn derivative_matches_central_difference() {
        let p = paper_pulse();
        let t = p.center_time + 1e-3;
        let h = 1e-7;
        let fd = (p.eval(t + h) - p.eval(t - h)) / (2.0 * h);
        let an = p.eval_dt(t);
        assert!(((an - fd) / an).abs() <= 1e-6, "an={an} fd={fd}");
    }

    #[test]
    fn pulse_energy_matches_oversampled_riemann_sum() {
        let p = paper_pulse();
        // 4 kHz grid vs a 40 kHz oracle grid.
        let riemann = |fs: f64| {
            let dt = 1.0 / fs;
            let n = (0.1 * fs) as usize;
            dt * (0..n).map(|k| p.eval(k as f64 * dt).powi(2)).sum::<f64>()
        };
        let coarse = riemann(4000.0);
        let oracle = riemann(40_000.0);
        assert!(((coarse - oracle) / oracle).abs() < 1e-3);
        assert!(((p.energy() - oracle) / oracle).abs() < 1e-6);
    }

    #[test]
    fn energy_of_constant_and_zero() {
        let g = TimeGrid::new(1000.0, 2.0).unwrap();
        assert_eq!(energy(&SampledSignal::zeros(g)), 0.0);
        let ones = SampledSignal::new(g, vec![1.0; g.n_samples]).unwrap();
        assert!((energy(&ones) - 2.0).abs() <= g.dt());
    }

    #[test]
    fn snr_to_n0_arithmetic() {
        let g = TimeGrid::new(1.0, 1.0).unwrap();
        let sig = SampledSignal::new(g, vec![1.0]).unwrap();
        assert_eq!(snr_to_n0(&sig, 1.0, 1.0).unwrap(), 1.0);
        let a = snr_to_n0(&sig, 5.0, 1.0).unwrap();
        let b = snr_to_n0(&sig, 10.0, 1.0).unwrap();
        assert!((a / b - 2.0).abs() < 1e-15);
        assert!(snr_to_n0(&SampledSignal::zeros(g), 1.0, 1.0).is_err());
    }

    #[test]
    fn awgn_variance_and_determinism() {
        let g = TimeGrid::new(1000.0, 1000.0).unwrap();
        let clean = SampledSignal::zeros(g);
        let spec = NoiseSpec { n0: 2.0, seed: 7 };
        let noisy = add_awgn(&clean, spec);
        let n = noisy.values.len() as f64;
        let mean = noisy.values.iter().sum::<f64>() / n;
        let var = noisy.values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        assert!((var - 1000.0).abs() < 10.0, "var={var}");
        assert_eq!(add_awgn(&clean, spec), noisy);
        assert_eq!(add_awgn(&clean, NoiseSpec::noiseless()), clean);
    }

    #[test]
    fn independent_noise_is_uncorrelated() {
        let g = TimeGrid::new(1000.0, 100.0).unwrap();
        let clean = SampledSignal::new(
            g,
            (0..g.n_samples).map(|k| (k as f64 * 0.37).sin()).collect(),
        )
        .unwrap();
        let a = add_awgn(&clean, NoiseSpec { n0: 1.0, seed: 1 });
        let b = add_awgn(&clean, NoiseSpec { n0: 1.0, seed: 2 });
        let da: Vec<f64> = a.values.iter().zip(&clean.values).map(|(x, c)| x - c).collect();
        let db: Vec<f64> = b.values.iter().zip(&clean.values).map(|(x, c)| x - c).collect();
        let corr = |u: &[f64], v: &[f64]| {
            let n = u.len() as f64;
            let (mu, mv) = (u.iter().sum::<f64>() / n, v.iter().sum::<f64>() / n);
            let cov: f64 = u.iter().zip(v).map(|(x, y)| (x - mu) * (y - mv)).sum();
            let su: f64 = u.iter().map(|x| (x - mu).powi(2)).sum::<f64>().sqrt();
            let sv: f64 = v.iter().map(|y| (y - mv).powi(2)).sum::<f64>().sqrt();
            cov / (su * sv)
        };
        assert!(corr(&da, &db).abs() < 0.01);
        assert!(corr(&da, &clean.values).abs() < 0.01);
    }

    #[test]
    fn grid_shape() {
        let g = TimeGrid::new(4000.0, 2.0).unwrap();
        assert_eq!(g.n_samples, 8000);
        assert_eq!(g.time(4000), 1.0);
        assert!(TimeGrid::new(0.0, 1.0).is_err());
        assert!(TimeGrid::new(10.0, 0.01).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn pulse_bounded_by_amplitude(t in -1.0f64..1.0) {
                let p = paper_pulse();
                prop_assert!(p.eval(t).abs() <= 1.0);
            }

            #[test]
            fn derivative_agrees_with_fd(d in -4e-3f64..4e-3) {
                let p = paper_pulse();
                let t = p.center_time + d;
                let h = 1e-8;
                let fd = (p.eval(t + h) - p.eval(t - h)) / (2.0 * h);
                let an = p.eval_dt(t);
                let denom = an.abs().max(fd.abs()).max(1.0);
                prop_assert!((an - fd).abs() / denom <= 1e-6);
            }

            #[test]
            fn energy_additive_over_disjoint_support(a in 1usize..500, b in 1usize..500) {
                let g = TimeGrid::new(1000.0, 1.0).unwrap();
                let mut va = vec![0.0; g.n_samples];
                let mut vb = vec![0.0; g.n_samples];
                for k in 0..a { va[k] = (k as f64).cos(); }
                for k in 0..b { vb[500 + k] = (k as f64).sin(); }
                let sum: Vec<f64> = va.iter().zip(&vb).map(|(x, y)| x + y).collect();
                let ea = energy(&SampledSignal::new(g, va).unwrap());
                let eb = energy(&SampledSignal::new(g, vb).unwrap());
                let es = energy(&SampledSignal::new(g, sum).unwrap());
                prop_assert!(ea >= 0.0 && eb >= 0.0);
                prop_assert!((es - ea - eb).abs() <= 1e-12 * es.max(1.0));
            }
        }
    }

    #[test]
    fn smoothed_pulse_matches_numerical_convolution() {
        let p = paper_pulse();
        let grid = TimeGrid::new(4000.0, 0.2).unwrap();
        let sig = SampledSignal::new(grid, superpose(&grid, &p, &[(1.0, 0.03)])).unwrap();
        for width in [0.0005, 0.002, 0.01] {
            let num = smooth_samples(&sig, width);
            let q = p.smoothed(width);
            let ana = superpose(&grid, &q, &[(1.0, 0.03)]);
            let peak = ana.iter().fold(0.0f64, |a, v| a.max(v.abs()));
            let err = num.values.iter().zip(&ana).fold(0.0f64, |a, (x, y)| a.max((x - y).abs()));
            assert!(err < 1e-4 * peak.max(1e-3), "width {width}: {err} vs peak {peak}");
        }
        assert_eq!(p.smoothed(0.0), p);
    }
}
