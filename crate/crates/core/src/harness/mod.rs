//! Experiment orchestration: configuration, Monte Carlo cells, SNR and
//! mismatch sweeps, CSV rows and the run manifest.

pub mod cli;

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::forward::{load_checkpoint, ModelParams, Propagator, TrainConfig};
use crate::localize::{crlb, da_gbl, gbl, toa_init, DaConfig, GblConfig};
use crate::oracle::{
    calibrate_pulse, noiseless_received, Environment, NoisePolicy, Region, SamplingPolicy, SourceLocation,
};
use crate::pln::PlnArchitecture;
use crate::signal::{add_awgn, db_to_linear, derive_seed, make_pulse, snr_to_n0, AnalyticPulse, NoiseSpec, SampledSignal, TimeGrid};
use crate::theory::{local_region, TheoremConfig};

/// Environment variable naming the default directory for datasets and
/// checkpoints.
pub const DATA_DIR_VAR: &str = "AQUALOC_DATA_DIR";

pub const CSV_HEADER: &str = "method,snr_db,mismatch_m,gamma,trials,rmse_m,mean_err_m,ci_m,conv_rate,wall_s";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    /// GBL with the exact image-method model of the test environment.
    GblMatched,
    /// GBL with the frozen pre-trained network.
    GblNn,
    /// Domain-adaptive GBL from the pre-trained network.
    DaGbl,
    /// Cramér-Rao bound of the test environment.
    Crlb,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::GblMatched => "gbl-matched",
            Method::GblNn => "gbl-nn",
            Method::DaGbl => "da-gbl",
            Method::Crlb => "crlb",
        }
    }

    fn tag(self) -> u64 {
        self as u64 + 1
    }

    fn needs_model(self) -> bool {
        matches!(self, Method::GblNn | Method::DaGbl)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PulseConfig {
    pub center_freq: f64,
    pub bandwidth: f64,
    pub center_time: f64,
}

impl Default for PulseConfig {
    fn default() -> Self {
        Self {
            center_freq: 750.0,
            bandwidth: 500.0,
            center_time: 0.05,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridConfig {
    pub sample_rate: f64,
    pub duration: f64,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self {
            sample_rate: 4000.0,
            duration: 2.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub samples: usize,
    pub region: Region,
    pub sampling: SamplingPolicy,
    pub noise: NoisePolicy,
    pub seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            samples: 256,
            region: Region::default_training(),
            sampling: SamplingPolicy::Stratified,
            noise: NoisePolicy::Noiseless,
            seed: 7,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TheoremSettings {
    pub gamma: f64,
    /// Depth perturbation of the test environment (m).
    pub epsilon_depth: f64,
    /// Start point offset from the true source (m).
    pub init_offset: [f64; 2],
    /// Reduced-network checkpoint; trained on the fly when absent.
    pub checkpoint: Option<PathBuf>,
    pub train_samples: usize,
    pub train_region: Region,
    pub lab: TheoremConfig,
}

impl Default for TheoremSettings {
    fn default() -> Self {
        Self {
            gamma: 10.0,
            epsilon_depth: -0.05,
            init_offset: [0.1, -0.05],
            checkpoint: None,
            train_samples: 128,
            train_region: local_region(),
            lab: TheoremConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Training environment; test environments differ by a depth offset.
    pub environment: Environment,
    pub source: SourceLocation,
    pub pulse: PulseConfig,
    pub grid: GridConfig,
    pub snr_db: Vec<f64>,
    /// Depth offset of the test environment in the SNR sweep (m).
    pub snr_mismatch_m: f64,
    pub mismatch_m: Vec<f64>,
    /// SNR of the mismatch sweep (dB).
    pub mismatch_snr_db: f64,
    pub gamma: Vec<f64>,
    pub methods: Vec<Method>,
    pub trials: usize,
    pub seed: u64,
    pub out_dir: PathBuf,
    pub checkpoint: Option<PathBuf>,
    pub dataset_dir: Option<PathBuf>,
    pub dataset: DatasetConfig,
    pub architecture: PlnArchitecture,
    pub train: TrainConfig,
    pub gbl: GblConfig,
    pub adapt_sound_speed: bool,
    pub theorem: TheoremSettings,
    /// Record wall time per row; off by default so outputs are
    /// byte-reproducible.
    pub timing: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            environment: Environment::reference(),
            source: SourceLocation::reference(),
            pulse: PulseConfig::default(),
            grid: GridConfig::default(),
            snr_db: vec![0.0, 5.0, 10.0, 15.0, 20.0, 25.0, 30.0],
            snr_mismatch_m: 0.0,
            mismatch_m: vec![
                -20.0, -10.0, -5.0, -2.0, -1.0, -0.5, -0.25, 0.25, 0.5, 1.0, 2.0, 5.0, 10.0, 20.0,
            ],
            mismatch_snr_db: 20.0,
            gamma: vec![0.0, 0.1, 1.0, 10.0],
            methods: vec![Method::GblMatched, Method::GblNn, Method::DaGbl, Method::Crlb],
            trials: 100,
            seed: 0,
            out_dir: PathBuf::from("out"),
            checkpoint: None,
            dataset_dir: None,
            dataset: DatasetConfig::default(),
            architecture: PlnArchitecture::default(),
            train: TrainConfig::default(),
            gbl: GblConfig::default(),
            adapt_sound_speed: false,
            theorem: TheoremSettings::default(),
            timing: false,
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.trials < 1 {
            return bad("trials must be at least 1".into());
        }
        for (name, empty) in [
            ("snr_db", self.snr_db.is_empty()),
            ("mismatch_m", self.mismatch_m.is_empty()),
            ("gamma", self.gamma.is_empty()),
            ("methods", self.methods.is_empty()),
        ] {
            if empty {
                return bad(format!("{name} must not be empty"));
            }
        }
        if let Some(g) = self.gamma.iter().find(|g| !(**g >= 0.0)) {
            return bad(format!("gamma must be non-negative, got {g}"));
        }
        if self.snr_db.iter().chain(&self.mismatch_m).any(|v| !v.is_finite()) || !self.mismatch_snr_db.is_finite() {
            return bad("SNR and mismatch values must be finite".into());
        }
        if self.dataset.samples == 0 {
            return bad("dataset needs at least one sample".into());
        }
        self.environment.validate().map_err(|e| Error::Config(e.to_string()))?;
        self.gbl.validate()?;
        self.train.validate()?;
        self.theorem.lab.validate()?;
        Ok(())
    }

    pub fn time_grid(&self) -> Result<TimeGrid> {
        TimeGrid::new(self.grid.sample_rate, self.grid.duration)
    }

    /// Pulse scaled to unit received energy at the reference source.
    pub fn calibrated_pulse(&self) -> Result<AnalyticPulse> {
        let raw = make_pulse(self.pulse.center_freq, self.pulse.bandwidth, self.pulse.center_time)?;
        calibrate_pulse(&self.environment, &self.source, &raw, &self.time_grid()?)
    }

    /// SHA-256 of the canonical JSON form.
    pub fn digest(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect()
    }

    fn data_path(&self, explicit: Option<&PathBuf>, name: &str) -> PathBuf {
        if let Some(p) = explicit {
            return p.clone();
        }
        match std::env::var_os(DATA_DIR_VAR) {
            Some(dir) if !dir.is_empty() => PathBuf::from(dir).join(name),
            _ => self.out_dir.join(name),
        }
    }

    /// Checkpoint path: explicit, else `$AQUALOC_DATA_DIR/checkpoint.json`,
    /// else inside the output directory.
    pub fn checkpoint_path(&self) -> PathBuf {
        self.data_path(self.checkpoint.as_ref(), "checkpoint.json")
    }

    pub fn dataset_path(&self) -> PathBuf {
        self.data_path(self.dataset_dir.as_ref(), "dataset")
    }

    pub fn da_config(&self, gamma: f64) -> DaConfig {
        DaConfig {
            gamma,
            adapt_sound_speed: self.adapt_sound_speed,
            gbl: self.gbl,
        }
    }
}

/// `√(mean ‖p̂ − p‖²)`.
pub fn rmse(estimates: &[SourceLocation], truth: &SourceLocation) -> Result<f64> {
    if estimates.is_empty() {
        return Err(Error::InvalidArgument("rmse of an empty set".into()));
    }
    let ms = estimates.iter().map(|e| e.distance(truth).powi(2)).sum::<f64>() / estimates.len() as f64;
    Ok(ms.sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub method: Method,
    pub snr_db: f64,
    pub mismatch_m: f64,
    /// Only for adaptive rows.
    pub gamma: Option<f64>,
    /// Monte Carlo trials (0 for the analytic bound).
    pub trials: usize,
    /// Over converged trials.
    pub rmse_m: f64,
    pub mean_err_m: f64,
    /// 95% half-width of the RMSE.
    pub ci_m: f64,
    pub conv_rate: f64,
    pub wall_s: f64,
}

impl SweepRow {
    /// Convergence below 90%: the RMSE covers a biased subset.
    pub fn flagged(&self) -> bool {
        self.conv_rate < 0.9
    }

    pub fn csv_line(&self) -> String {
        let gamma = self.gamma.map(|g| g.to_string()).unwrap_or_default();
        format!(
            "{},{},{},{},{},{},{},{},{},{}",
            self.method.name(),
            self.snr_db,
            self.mismatch_m,
            gamma,
            self.trials,
            self.rmse_m,
            self.mean_err_m,
            self.ci_m,
            self.conv_rate,
            self.wall_s
        )
    }
}

pub fn to_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in rows {
        let _ = writeln!(out, "{}", r.csv_line());
    }
    out
}

pub fn write_csv(rows: &[SweepRow], path: &Path) -> Result<()> {
    write_file(path, to_csv(rows).as_bytes())
}

pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Per-trial outcome: the error in metres, or `None` when the run failed or
/// did not converge.
fn summarize(method: Method, snr_db: f64, mismatch_m: f64, gamma: Option<f64>, errors: &[Option<f64>], wall_s: f64) -> SweepRow {
    let ok: Vec<f64> = errors.iter().flatten().copied().collect();
    let n = ok.len() as f64;
    let (rmse_m, mean_err_m, ci_m) = if ok.is_empty() {
        (f64::NAN, f64::NAN, f64::NAN)
    } else {
        let sq: Vec<f64> = ok.iter().map(|e| e * e).collect();
        let ms = sq.iter().sum::<f64>() / n;
        let rmse = ms.sqrt();
        let var = if ok.len() > 1 { sq.iter().map(|s| (s - ms).powi(2)).sum::<f64>() / (n - 1.0) } else { 0.0 };
        // delta method: se(√m) = se(m) / (2√m)
        let ci = if rmse > 0.0 { 1.96 * var.sqrt() / n.sqrt() / (2.0 * rmse) } else { 0.0 };
        (rmse, ok.iter().sum::<f64>() / n, ci)
    };
    SweepRow {
        method,
        snr_db,
        mismatch_m,
        gamma,
        trials: errors.len(),
        rmse_m,
        mean_err_m,
        ci_m,
        conv_rate: n / errors.len().max(1) as f64,
        wall_s,
    }
}

/// Shared state of a sweep: configuration, calibrated pulse, grid and the
/// pre-trained model when a method needs it.
#[derive(Debug, Clone)]
pub struct Runner {
    pub cfg: ExperimentConfig,
    pub pulse: AnalyticPulse,
    pub grid: TimeGrid,
    pub model: Option<ModelParams>,
}

impl Runner {
    /// Loads the checkpoint if any configured method needs it.
    pub fn new(cfg: ExperimentConfig) -> Result<Self> {
        let model = if cfg.methods.iter().any(|m| m.needs_model()) {
            let path = cfg.checkpoint_path();
            if !path.exists() {
                return Err(Error::MissingCheckpoint(path));
            }
            Some(load_checkpoint(&path)?.model)
        } else {
            None
        };
        Self::with_model(cfg, model)
    }

    pub fn with_model(cfg: ExperimentConfig, model: Option<ModelParams>) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            pulse: cfg.calibrated_pulse()?,
            grid: cfg.time_grid()?,
            model,
            cfg,
        })
    }

    fn test_env(&self, mismatch_m: f64) -> Environment {
        let e = self.cfg.environment;
        e.with_depth(e.depth + mismatch_m)
    }

    fn network(&self) -> Result<&ModelParams> {
        self.model.as_ref().ok_or_else(|| Error::MissingCheckpoint(self.cfg.checkpoint_path()))
    }

    /// Localization error of one noisy trial, `None` if it failed.
    fn trial(&self, method: Method, test_env: &Environment, clean: &SampledSignal, n0: f64, gamma: f64, seed: u64) -> Result<Option<f64>> {
        let r = add_awgn(clean, NoiseSpec { n0, seed });
        let truth = self.cfg.source;
        let outcome = match method {
            Method::GblMatched => toa_init(&r, &self.pulse, test_env).and_then(|t| {
                gbl(&Propagator::Analytic { env: *test_env, pulse: self.pulse }, &r, &t.initial, &self.cfg.gbl)
            }),
            Method::GblNn => {
                let model = self.network()?;
                toa_init(&r, &self.pulse, &self.cfg.environment)
                    .and_then(|t| gbl(&Propagator::Network(model.clone()), &r, &t.initial, &self.cfg.gbl))
            }
            Method::DaGbl => {
                let model = self.network()?;
                toa_init(&r, &self.pulse, &self.cfg.environment).and_then(|t| da_gbl(model, &r, &t.initial, &self.cfg.da_config(gamma)))
            }
            Method::Crlb => unreachable!("the bound has no trials"),
        };
        match outcome {
            Ok(res) if res.converged => Ok(Some(res.location.distance(&truth))),
            Ok(_) => Ok(None),
            Err(Error::MissingCheckpoint(p)) => Err(Error::MissingCheckpoint(p)),
            Err(_) => Ok(None),
        }
    }

    /// One `(method, SNR, mismatch, γ)` cell of `trials` Monte Carlo runs.
    /// Trial seeds depend on the master seed, SNR, mismatch, method and
    /// trial index only, so rows sharing those reuse the same noise.
    pub fn cell(&self, method: Method, snr_db: f64, mismatch_m: f64, gamma: Option<f64>) -> Result<SweepRow> {
        let start = Instant::now();
        let env = self.test_env(mismatch_m);
        let clean = noiseless_received(&env, &self.cfg.source, &self.pulse, &self.grid)?;
        let n0 = snr_to_n0(&clean, db_to_linear(snr_db), self.pulse.bandwidth)?;
        let wall = |t: Instant| if self.cfg.timing { t.elapsed().as_secs_f64() } else { 0.0 };
        if method == Method::Crlb {
            let bound = match crlb(&env, &self.cfg.source, &self.pulse, n0, &self.grid) {
                Ok(b) => b.rmse_bound,
                Err(Error::UnidentifiableGeometry) => f64::INFINITY,
                Err(e) => return Err(e),
            };
            return Ok(SweepRow {
                method,
                snr_db,
                mismatch_m,
                gamma: None,
                trials: 0,
                rmse_m: bound,
                mean_err_m: bound,
                ci_m: 0.0,
                conv_rate: 1.0,
                wall_s: wall(start),
            });
        }
        let g = gamma.unwrap_or(0.0);
        let errors: Vec<Option<f64>> = (0..self.cfg.trials as u64)
            .into_par_iter()
            .map(|k| {
                let seed = derive_seed(self.cfg.seed, &[snr_db.to_bits(), mismatch_m.to_bits(), method.tag(), k]);
                self.trial(method, &env, &clean, n0, g, seed)
            })
            .collect::<Result<_>>()?;
        Ok(summarize(method, snr_db, mismatch_m, gamma, &errors, wall(start)))
    }

    fn cells_at(&self, snr_db: f64, mismatch_m: f64) -> Result<Vec<SweepRow>> {
        let mut rows = Vec::new();
        for &method in &self.cfg.methods {
            if method == Method::DaGbl {
                for &g in &self.cfg.gamma {
                    rows.push(self.cell(method, snr_db, mismatch_m, Some(g))?);
                }
            } else {
                rows.push(self.cell(method, snr_db, mismatch_m, None)?);
            }
        }
        Ok(rows)
    }

    /// Every method at every SNR of the grid, test depth offset by
    /// `snr_mismatch_m`.
    pub fn snr_sweep(&self) -> Result<Vec<SweepRow>> {
        let mut rows = Vec::new();
        for &snr in &self.cfg.snr_db {
            rows.extend(self.cells_at(snr, self.cfg.snr_mismatch_m)?);
        }
        Ok(rows)
    }

    /// Every method at every depth offset, at `mismatch_snr_db`.
    pub fn mismatch_sweep(&self) -> Result<Vec<SweepRow>> {
        let mut rows = Vec::new();
        for &offset in &self.cfg.mismatch_m {
            rows.extend(self.cells_at(self.cfg.mismatch_snr_db, offset)?);
        }
        Ok(rows)
    }
}

pub fn run_snr_sweep(cfg: &ExperimentConfig) -> Result<Vec<SweepRow>> {
    Runner::new(cfg.clone())?.snr_sweep()
}

pub fn run_mismatch_sweep(cfg: &ExperimentConfig) -> Result<Vec<SweepRow>> {
    Runner::new(cfg.clone())?.mismatch_sweep()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub version: String,
    pub config_sha256: String,
    pub seed: u64,
    pub trials: usize,
    pub outputs: Vec<PathBuf>,
    /// Rows whose convergence rate is below 0.9.
    pub flagged: Vec<String>,
    pub config: ExperimentConfig,
}

impl Manifest {
    pub fn new(command: &str, cfg: &ExperimentConfig, outputs: Vec<PathBuf>, rows: &[SweepRow]) -> Self {
        Self {
            command: command.into(),
            version: env!("CARGO_PKG_VERSION").into(),
            config_sha256: cfg.digest(),
            seed: cfg.seed,
            trials: cfg.trials,
            outputs,
            flagged: rows.iter().filter(|r| r.flagged()).map(SweepRow::csv_line).collect(),
            config: cfg.clone(),
        }
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_file(path, &serde_json::to_vec_pretty(self)?)
    }
}
