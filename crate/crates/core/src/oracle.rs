//! Three-ray image-method propagation in an isovelocity waveguide.
//!
//! This is the "nature" operator that produces received signals for a given
//! environment and source location, plus the training-set generator built on
//! top of it. The receiver sits at range 0.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::signal::{
    add_awgn, db_to_linear, derive_seed, energy, snr_to_n0, superpose, AnalyticPulse, NoiseSpec,
    SampledSignal, TimeGrid,
};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Environment {
    /// Water depth in metres.
    pub depth: f64,
    /// Sound speed in m/s.
    pub sound_speed: f64,
    /// Receiver depth in metres.
    pub receiver_depth: f64,
}

impl Environment {
    pub fn new(depth: f64, sound_speed: f64, receiver_depth: f64) -> Result<Self> {
        let env = Self {
            depth,
            sound_speed,
            receiver_depth,
        };
        env.validate()?;
        Ok(env)
    }

    /// 200 m deep, 1500 m/s, receiver at 120 m.
    pub fn reference() -> Self {
        Self {
            depth: 200.0,
            sound_speed: 1500.0,
            receiver_depth: 120.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.depth > 0.0 && self.depth.is_finite()) {
            return Err(Error::InvalidArgument(format!("depth must be positive, got {}", self.depth)));
        }
        if !(self.sound_speed > 0.0 && self.sound_speed.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "sound speed must be positive, got {}",
                self.sound_speed
            )));
        }
        if !(self.receiver_depth > 0.0 && self.receiver_depth < self.depth) {
            return Err(Error::InvalidArgument(format!(
                "receiver depth {} outside (0, {})",
                self.receiver_depth, self.depth
            )));
        }
        Ok(())
    }

    pub fn with_depth(mut self, depth: f64) -> Self {
        self.depth = depth;
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SourceLocation {
    /// Horizontal range from the receiver, metres.
    pub x: f64,
    /// Depth, metres.
    pub z: f64,
}

impl SourceLocation {
    pub fn new(x: f64, z: f64) -> Self {
        Self { x, z }
    }

    /// 610 m range, 20 m depth.
    pub fn reference() -> Self {
        Self { x: 610.0, z: 20.0 }
    }

    pub fn distance(&self, other: &SourceLocation) -> f64 {
        (self.x - other.x).hypot(self.z - other.z)
    }
}

/// A ray identified by its surface and bottom reflection counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PathSpec {
    pub surface: u8,
    pub bottom: u8,
}

impl PathSpec {
    pub const DIRECT: PathSpec = PathSpec { surface: 0, bottom: 0 };
    pub const SURFACE: PathSpec = PathSpec { surface: 1, bottom: 0 };
    pub const BOTTOM: PathSpec = PathSpec { surface: 0, bottom: 1 };

    fn check(self) -> Result<Self> {
        if THREE_RAY.contains(&self) {
            Ok(self)
        } else {
            Err(Error::UnsupportedPath {
                surface: self.surface,
                bottom: self.bottom,
            })
        }
    }
}

/// Direct, surface-reflected and bottom-reflected paths, in that order.
pub const THREE_RAY: [PathSpec; 3] = [PathSpec::DIRECT, PathSpec::SURFACE, PathSpec::BOTTOM];

/// Vertical separation between the receiver and the (image) source.
pub fn vertical_separation(env: &Environment, z_s: f64, path: PathSpec) -> Result<f64> {
    let z_r = env.receiver_depth;
    Ok(match path.check()? {
        PathSpec::DIRECT => z_s - z_r,
        PathSpec::SURFACE => z_s + z_r,
        _ => 2.0 * env.depth - z_s - z_r,
    })
}

pub fn path_length(env: &Environment, p: &SourceLocation, path: PathSpec) -> Result<f64> {
    Ok(p.x.hypot(vertical_separation(env, p.z, path)?))
}

/// All three path lengths plus their derivatives with respect to `(x_s, z_s)`.
pub fn path_lengths_with_jacobian(env: &Environment, p: &SourceLocation) -> [(f64, [f64; 2]); 3] {
    THREE_RAY.map(|path| {
        let dz = vertical_separation(env, p.z, path).expect("three-ray path");
        let l = p.x.hypot(dz);
        // d(dz)/dz_s is +1 for direct/surface images and -1 for the bottom image.
        let sign = if path == PathSpec::BOTTOM { -1.0 } else { 1.0 };
        (l, [p.x / l, sign * dz / l])
    })
}

/// Pressure-release surface flips sign, rigid bottom does not.
pub fn reflection_coeff(path: PathSpec) -> f64 {
    if path.surface % 2 == 1 {
        -1.0
    } else {
        1.0
    }
}

/// `(α_i, τ_i)` for the three rays with spherical spreading `α = ρ/ℓ`.
pub fn arrivals(env: &Environment, p: &SourceLocation) -> Result<Vec<(f64, f64)>> {
    THREE_RAY
        .iter()
        .map(|&path| {
            let l = path_length(env, p, path)?;
            Ok((reflection_coeff(path) / l, l / env.sound_speed))
        })
        .collect()
}

/// Noise-free received signal, checking that every arrival fits the window.
pub fn noiseless_received(
    env: &Environment,
    p: &SourceLocation,
    pulse: &AnalyticPulse,
    grid: &TimeGrid,
) -> Result<SampledSignal> {
    env.validate()?;
    let arr = arrivals(env, p)?;
    for &(_, tau) in &arr {
        let end = tau + pulse.center_time + pulse.support();
        if end > grid.duration {
            return Err(Error::ObservationWindowExceeded {
                arrival_s: tau,
                window_s: grid.duration,
            });
        }
    }
    Ok(SampledSignal {
        grid: *grid,
        values: superpose(grid, pulse, &arr),
    })
}

/// Copy of `pulse` whose amplitude gives unit received energy `∫r² dt = 1`
/// for a source at `p`, so data terms are O(1).
pub fn calibrate_pulse(env: &Environment, p: &SourceLocation, pulse: &AnalyticPulse, grid: &TimeGrid) -> Result<AnalyticPulse> {
    let unit = pulse.with_amplitude(1.0);
    let e = energy(&noiseless_received(env, p, &unit, grid)?);
    if !(e > 0.0) {
        return Err(Error::InvalidArgument("reference signal has zero energy".into()));
    }
    Ok(unit.with_amplitude(1.0 / e.sqrt()))
}

pub fn synthesize_received(
    env: &Environment,
    p: &SourceLocation,
    pulse: &AnalyticPulse,
    grid: &TimeGrid,
    noise: NoiseSpec,
) -> Result<SampledSignal> {
    let clean = noiseless_received(env, p, pulse, grid)?;
    Ok(add_awgn(&clean, noise))
}

/// Axis-aligned rectangle in `(x_s, z_s)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Region {
    pub x_min: f64,
    pub x_max: f64,
    pub z_min: f64,
    pub z_max: f64,
}

impl Region {
    /// Training basin around the reference source.
    pub fn default_training() -> Self {
        Self {
            x_min: 300.0,
            x_max: 900.0,
            z_min: 5.0,
            z_max: 100.0,
        }
    }

    pub fn contains(&self, p: &SourceLocation) -> bool {
        (self.x_min..=self.x_max).contains(&p.x) && (self.z_min..=self.z_max).contains(&p.z)
    }

    fn check(&self, env: &Environment) -> Result<()> {
        if !(self.x_max > self.x_min && self.z_max > self.z_min) {
            return Err(Error::EmptyRegion);
        }
        if self.x_min < 0.0 || self.z_min <= 0.0 || self.z_max >= env.depth {
            return Err(Error::InvalidArgument(format!(
                "region {self:?} is not inside the waveguide"
            )));
        }
        Ok(())
    }

    /// Evenly spaced `nx × nz` grid including the edges.
    pub fn grid_points(&self, nx: usize, nz: usize) -> Vec<SourceLocation> {
        let lerp = |a: f64, b: f64, i: usize, n: usize| {
            if n <= 1 {
                0.5 * (a + b)
            } else {
                a + (b - a) * i as f64 / (n - 1) as f64
            }
        };
        (0..nx)
            .flat_map(|i| {
                (0..nz).map(move |j| {
                    SourceLocation::new(
                        lerp(self.x_min, self.x_max, i, nx),
                        lerp(self.z_min, self.z_max, j, nz),
                    )
                })
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum SamplingPolicy {
    /// Jittered stratified grid.
    #[default]
    Stratified,
    Uniform,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum NoisePolicy {
    #[default]
    Noiseless,
    Snr { db: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub env: Environment,
    pub pulse: AnalyticPulse,
    pub grid: TimeGrid,
    pub region: Region,
    pub seed: u64,
    pub samples: Vec<(SourceLocation, SampledSignal)>,
}

#[allow(clippy::too_many_arguments)]
pub fn gen_dataset(
    env: &Environment,
    region: &Region,
    n: usize,
    pulse: &AnalyticPulse,
    grid: &TimeGrid,
    noise: NoisePolicy,
    sampling: SamplingPolicy,
    seed: u64,
) -> Result<Dataset> {
    env.validate()?;
    region.check(env)?;
    let locations = sample_locations(region, n, sampling, seed);
    let samples = locations
        .into_iter()
        .enumerate()
        .map(|(k, p)| {
            let clean = noiseless_received(env, &p, pulse, grid)?;
            let sig = match noise {
                NoisePolicy::Noiseless => clean,
                NoisePolicy::Snr { db } => {
                    let n0 = snr_to_n0(&clean, db_to_linear(db), pulse.bandwidth)?;
                    let noise_seed = derive_seed(seed, &[1, k as u64]);
                    add_awgn(&clean, NoiseSpec { n0, seed: noise_seed })
                }
            };
            Ok((p, sig))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        env: *env,
        pulse: *pulse,
        grid: *grid,
        region: *region,
        seed,
        samples,
    })
}

fn sample_locations(region: &Region, n: usize, policy: SamplingPolicy, seed: u64) -> Vec<SourceLocation> {
    let (w, h) = (region.x_max - region.x_min, region.z_max - region.z_min);
    match policy {
        SamplingPolicy::Uniform => {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[0]));
            (0..n)
                .map(|_| {
                    SourceLocation::new(
                        region.x_min + w * rng.random::<f64>(),
                        region.z_min + h * rng.random::<f64>(),
                    )
                })
                .collect()
        }
        SamplingPolicy::Stratified => {
            if n == 0 {
                return Vec::new();
            }
            let nz = ((n as f64).sqrt().round() as usize).max(1);
            let nx = n.div_ceil(nz);
            (0..n)
                .map(|k| {
                    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[0, k as u64]));
                    let (i, j) = (k % nx, k / nx);
                    let u = (i as f64 + rng.random::<f64>()) / nx as f64;
                    let v = (j as f64 + rng.random::<f64>()) / nz as f64;
                    SourceLocation::new(region.x_min + w * u, region.z_min + h * v)
                })
                .collect()
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct DatasetManifest {
    format: String,
    environment: Environment,
    grid: TimeGrid,
    pulse: AnalyticPulse,
    region: Region,
    seed: u64,
    count: usize,
}

const DATASET_FORMAT: &str = "aqualoc-dataset-v1";

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Writes `manifest.json`, `locations.csv` and `signals/<k>.bin`
    /// (little-endian binary64).
    pub fn save(&self, dir: &Path) -> Result<()> {
        let sig_dir = dir.join("signals");
        fs::create_dir_all(&sig_dir).map_err(|e| Error::io(&sig_dir, e))?;
        let manifest = DatasetManifest {
            format: DATASET_FORMAT.into(),
            environment: self.env,
            grid: self.grid,
            pulse: self.pulse,
            region: self.region,
            seed: self.seed,
            count: self.len(),
        };
        let mpath = dir.join("manifest.json");
        fs::write(&mpath, serde_json::to_string_pretty(&manifest)?).map_err(|e| Error::io(&mpath, e))?;

        let lpath = dir.join("locations.csv");
        let mut csv = String::from("index,x_s,z_s\n");
        for (k, (p, _)) in self.samples.iter().enumerate() {
            csv.push_str(&format!("{k},{:?},{:?}\n", p.x, p.z));
        }
        fs::write(&lpath, csv).map_err(|e| Error::io(&lpath, e))?;

        for (k, (_, sig)) in self.samples.iter().enumerate() {
            let path = sig_dir.join(format!("{k}.bin"));
            let mut f = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
            let bytes: Vec<u8> = sig.values.iter().flat_map(|v| v.to_le_bytes()).collect();
            f.write_all(&bytes).map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let mpath = dir.join("manifest.json");
        let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
        let m: DatasetManifest = serde_json::from_str(&text)?;
        if m.format != DATASET_FORMAT {
            return Err(Error::CorruptPayload(format!("unknown dataset format {}", m.format)));
        }
        let lpath = dir.join("locations.csv");
        let table = fs::read_to_string(&lpath).map_err(|e| Error::io(&lpath, e))?;
        let mut locs = Vec::with_capacity(m.count);
        for (line_no, line) in table.lines().enumerate().skip(1) {
            let cols: Vec<&str> = line.split(',').collect();
            let parse = |s: &str| {
                s.trim()
                    .parse::<f64>()
                    .map_err(|e| Error::CorruptPayload(format!("locations.csv line {}: {e}", line_no + 1)))
            };
            if cols.len() != 3 {
                return Err(Error::CorruptPayload(format!("locations.csv line {}", line_no + 1)));
            }
            locs.push(SourceLocation::new(parse(cols[1])?, parse(cols[2])?));
        }
        if locs.len() != m.count {
            return Err(Error::CorruptPayload(format!(
                "{} locations for {} signals",
                locs.len(),
                m.count
            )));
        }
        let mut samples = Vec::with_capacity(m.count);
        for (k, p) in locs.into_iter().enumerate() {
            let path = dir.join("signals").join(format!("{k}.bin"));
            let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
            if bytes.len() != 8 * m.grid.n_samples {
                return Err(Error::CorruptPayload(format!("{} has {} bytes", path.display(), bytes.len())));
            }
            let values = bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            samples.push((p, SampledSignal::new(m.grid, values)?));
        }
        Ok(Self {
            env: m.environment,
            pulse: m.pulse,
            grid: m.grid,
            region: m.region,
            seed: m.seed,
            samples,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::signal::make_pulse;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn vertical_direct_path() {
        let env = Environment::reference();
        let l = path_length(&env, &SourceLocation::new(0.0, 20.0), PathSpec::DIRECT).unwrap();
        assert_eq!(l, 100.0);
    }

    #[test]
    fn reference_geometry_lengths() {
        let env = Environment::reference();
        let p = SourceLocation::reference();
        let d = path_length(&env, &p, PathSpec::DIRECT).unwrap();
        let s = path_length(&env, &p, PathSpec::SURFACE).unwrap();
        let b = path_length(&env, &p, PathSpec::BOTTOM).unwrap();
        assert!(close(d, 618.142, 5e-4), "{d}");
        assert!(close(s, 625.859, 5e-4), "{s}");
        assert!(close(b, 663.099, 5e-4), "{b}");
        let b198 = path_length(&env.with_depth(198.0), &p, PathSpec::BOTTOM).unwrap();
        assert!(close(b198, 661.541, 5e-4), "{b198}");
    }

    #[test]
    fn unsupported_path_rejected() {
        let env = Environment::reference();
        let err = path_length(&env, &SourceLocation::reference(), PathSpec { surface: 1, bottom: 1 });
        assert!(matches!(err, Err(Error::UnsupportedPath { .. })));
    }

    #[test]
    fn reflection_signs() {
        assert_eq!(reflection_coeff(PathSpec::DIRECT), 1.0);
        assert_eq!(reflection_coeff(PathSpec::SURFACE), -1.0);
        assert_eq!(reflection_coeff(PathSpec::BOTTOM), 1.0);
    }

    #[test]
    fn jacobian_matches_finite_differences() {
        let env = Environment::reference();
        let p = SourceLocation::new(523.0, 41.0);
        let h = 1e-6;
        for (i, (l, g)) in path_lengths_with_jacobian(&env, &p).iter().enumerate() {
            let path = THREE_RAY[i];
            assert!(close(*l, path_length(&env, &p, path).unwrap(), 1e-12));
            let fx = (path_length(&env, &SourceLocation::new(p.x + h, p.z), path).unwrap()
                - path_length(&env, &SourceLocation::new(p.x - h, p.z), path).unwrap())
                / (2.0 * h);
            let fz = (path_length(&env, &SourceLocation::new(p.x, p.z + h), path).unwrap()
                - path_length(&env, &SourceLocation::new(p.x, p.z - h), path).unwrap())
                / (2.0 * h);
            assert!(close(g[0], fx, 1e-7) && close(g[1], fz, 1e-7));
        }
    }

    #[test]
    fn received_signal_hand_evaluation() {
        let env = Environment::reference();
        let p = SourceLocation::reference();
        let pulse = make_pulse(750.0, 500.0, 0.05).unwrap();
        let grid = TimeGrid::new(4000.0, 2.0).unwrap();
        let r = synthesize_received(&env, &p, &pulse, &grid, NoiseSpec::noiseless()).unwrap();
        let arr = arrivals(&env, &p).unwrap();
        let tau_d = arr[0].1;
        let k = ((tau_d + pulse.center_time) * grid.sample_rate).round() as usize;
        let t = grid.time(k);
        let hand: f64 = arr.iter().map(|(a, tau)| a * pulse.eval(t - tau)).sum();
        assert!(close(r.values[k], hand, 1e-18));
        let quiet_end = tau_d + pulse.center_time - 10.0 * pulse.envelope_sigma;
        for (k, v) in r.values.iter().enumerate() {
            if grid.time(k) < quiet_end {
                assert!(v.abs() < 1e-15);
            }
        }
    }

    #[test]
    fn isolated_peak_ratio() {
        // Direct and surface arrivals are ~5 ms apart, well outside each
        // other's envelope, so their peak values are ±1/ℓ.
        let env = Environment::reference();
        let p = SourceLocation::reference();
        let pulse = make_pulse(750.0, 500.0, 0.05).unwrap();
        let fine = TimeGrid::new(400_000.0, 1.0).unwrap();
        let r = noiseless_received(&env, &p, &pulse, &fine).unwrap();
        let arr = arrivals(&env, &p).unwrap();
        let at = |tau: f64| r.values[((tau + pulse.center_time) * fine.sample_rate).round() as usize];
        let ratio = at(arr[0].1) / at(arr[1].1);
        let expected = -625.859 / 618.142;
        assert!((ratio - expected).abs() / expected.abs() < 1e-3, "{ratio}");
    }

    #[test]
    fn window_exceeded() {
        let env = Environment::reference();
        let pulse = make_pulse(750.0, 500.0, 0.05).unwrap();
        let grid = TimeGrid::new(4000.0, 0.3).unwrap();
        let err = noiseless_received(&env, &SourceLocation::reference(), &pulse, &grid);
        assert!(matches!(err, Err(Error::ObservationWindowExceeded { .. })));
    }

    #[test]
    fn dataset_basics() {
        let env = Environment::reference();
        let pulse = make_pulse(750.0, 500.0, 0.05).unwrap();
        let grid = TimeGrid::new(4000.0, 2.0).unwrap();
        let region = Region::default_training();
        let gen = |n| gen_dataset(&env, &region, n, &pulse, &grid, NoisePolicy::Noiseless, SamplingPolicy::Stratified, 3);
        assert!(gen(0).unwrap().is_empty());
        let a = gen(64).unwrap();
        assert_eq!(a, gen(64).unwrap());
        // Path lengths are bracketed by the region corners.
        for path in THREE_RAY {
            let zs = [region.z_min, region.z_max];
            // Lengths are monotone in x and |dz|, so the region edges bracket them.
            let dz_range: Vec<f64> = zs.iter().map(|&z| vertical_separation(&env, z, path).unwrap().abs()).collect();
            let dz_min = if path == PathSpec::DIRECT && (region.z_min..=region.z_max).contains(&env.receiver_depth) {
                0.0
            } else {
                dz_range.iter().cloned().fold(f64::INFINITY, f64::min)
            };
            let dz_max = dz_range.iter().cloned().fold(0.0, f64::max);
            let lo = region.x_min.hypot(dz_min);
            let hi = region.x_max.hypot(dz_max);
            for (p, _) in &a.samples {
                assert!(region.contains(p));
                let l = path_length(&env, p, path).unwrap();
                assert!(l >= lo && l <= hi);
            }
        }
        let bad = Region { x_min: 10.0, x_max: 10.0, z_min: 5.0, z_max: 6.0 };
        assert!(matches!(
            gen_dataset(&env, &bad, 4, &pulse, &grid, NoisePolicy::Noiseless, SamplingPolicy::Uniform, 1),
            Err(Error::EmptyRegion)
        ));
    }

    #[test]
    fn dataset_round_trip_on_disk() {
        let env = Environment::reference();
        let pulse = make_pulse(750.0, 500.0, 0.05).unwrap();
        let grid = TimeGrid::new(4000.0, 2.0).unwrap();
        let ds = gen_dataset(
            &env,
            &Region::default_training(),
            5,
            &pulse,
            &grid,
            NoisePolicy::Snr { db: 20.0 },
            SamplingPolicy::Uniform,
            9,
        )
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        ds.save(dir.path()).unwrap();
        assert_eq!(Dataset::load(dir.path()).unwrap(), ds);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn lengths_monotone_in_range(x in 1.0f64..2000.0, dx in 0.1f64..50.0, z in 1.0f64..199.0) {
                let env = Environment::reference();
                for path in THREE_RAY {
                    let a = path_length(&env, &SourceLocation::new(x, z), path).unwrap();
                    let b = path_length(&env, &SourceLocation::new(x + dx, z), path).unwrap();
                    prop_assert!(b > a);
                }
                let d = path_length(&env, &SourceLocation::new(x, z), PathSpec::DIRECT).unwrap();
                prop_assert!(path_length(&env, &SourceLocation::new(x, z), PathSpec::SURFACE).unwrap() > d);
                prop_assert!(path_length(&env, &SourceLocation::new(x, z), PathSpec::BOTTOM).unwrap() > d);
            }

            #[test]
            fn reciprocity(x in 0.0f64..2000.0, z in 1.0f64..199.0, zr in 1.0f64..199.0) {
                let a = Environment::new(200.0, 1500.0, zr).unwrap();
                let b = Environment::new(200.0, 1500.0, z).unwrap();
                for path in THREE_RAY {
                    let la = path_length(&a, &SourceLocation::new(x, z), path).unwrap();
                    let lb = path_length(&b, &SourceLocation::new(x, zr), path).unwrap();
                    prop_assert!((la - lb).abs() <= 1e-9 * la);
                }
            }

            #[test]
            fn linear_in_pulse_amplitude(a in -5.0f64..5.0) {
                let env = Environment::reference();
                let p = SourceLocation::reference();
                let pulse = make_pulse(750.0, 500.0, 0.05).unwrap();
                let grid = TimeGrid::new(4000.0, 2.0).unwrap();
                let r1 = noiseless_received(&env, &p, &pulse, &grid).unwrap();
                let ra = noiseless_received(&env, &p, &pulse.with_amplitude(a), &grid).unwrap();
                for (x, y) in r1.values.iter().zip(&ra.values) {
                    prop_assert!((a * x - y).abs() <= 1e-15 * a.abs().max(1.0));
                }
            }
        }
    }
}
