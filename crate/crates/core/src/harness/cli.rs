//! Command-line front end. Exit codes: 0 success, 2 usage or configuration
//! error, 3 runtime failure.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use super::{write_csv, write_file, ExperimentConfig, Manifest, Method, Runner, SweepRow, DATA_DIR_VAR};
use crate::error::{Error, Result};
use crate::forward::{load_checkpoint, max_relative_length_error, pretrain, propagator_output, save_checkpoint, Propagator};
use crate::localize::{da_gbl, gbl, gbl_loss, gbl_loss_grad, toa_init};
use crate::oracle::{gen_dataset, noiseless_received, Dataset, NoisePolicy, SourceLocation};
use crate::pln::PlnArchitecture;
use crate::signal::{add_awgn, db_to_linear, derive_seed, snr_to_n0, NoiseSpec, SampledSignal};
use crate::theory::{verify_theorem, EnvPerturbation, TheoremProblem};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_RUNTIME: i32 = 3;

#[derive(Parser, Debug)]
#[command(name = "aqualoc", version, about = "Acoustic source localization with an adaptable learned forward model")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone, Default)]
struct Common {
    /// JSON experiment configuration; defaults apply to missing fields.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    trials: Option<usize>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Checkpoint file (overrides the config and $AQUALOC_DATA_DIR).
    #[arg(long, global = true)]
    checkpoint: Option<PathBuf>,
    /// Dataset directory (overrides the config and $AQUALOC_DATA_DIR).
    #[arg(long, global = true)]
    data_dir: Option<PathBuf>,
    /// Record wall time in the CSV (breaks byte reproducibility).
    #[arg(long, global = true)]
    timing: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate and save the training dataset.
    GenData {
        #[command(flatten)]
        common: Common,
    },
    /// Pre-train the forward model and save a checkpoint.
    Train {
        #[command(flatten)]
        common: Common,
        /// Use the single-layer reduced architecture.
        #[arg(long)]
        reduced: bool,
    },
    /// Localize one received signal.
    Localize {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum, default_value = "da-gbl")]
        method: Method,
        /// JSON signal file; synthesized at the configured source when absent.
        #[arg(long)]
        signal: Option<PathBuf>,
        #[arg(long, default_value_t = 20.0)]
        snr_db: f64,
        /// Test-environment depth offset (m) for synthesized signals.
        #[arg(long, default_value_t = 0.0, allow_hyphen_values = true)]
        mismatch_m: f64,
        #[arg(long, default_value_t = 1.0)]
        gamma: f64,
    },
    /// RMSE versus SNR for every configured method.
    SweepSnr {
        #[command(flatten)]
        common: Common,
    },
    /// RMSE versus test-depth offset for every configured method.
    SweepMismatch {
        #[command(flatten)]
        common: Common,
    },
    /// Cramér-Rao bound over the SNR grid.
    Crlb {
        #[command(flatten)]
        common: Common,
    },
    /// Numerical check of the adaptation robustness bound.
    VerifyTheorem {
        #[command(flatten)]
        common: Common,
    },
    /// Quick invariant suite.
    Selftest {
        #[command(flatten)]
        common: Common,
    },
}

fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::Json(_) => EXIT_CONFIG,
        _ => EXIT_RUNTIME,
    }
}

/// Parses `args` (program name first), runs the subcommand and returns the
/// process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
    };
    match dispatch(cli.command) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn load_config(common: &Common) -> Result<ExperimentConfig> {
    let mut cfg = match &common.config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
            let cfg: ExperimentConfig = serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
            cfg
        }
        None => ExperimentConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(t) = common.trials {
        cfg.trials = t;
    }
    if let Some(o) = &common.out {
        cfg.out_dir = o.clone();
    }
    if let Some(c) = &common.checkpoint {
        cfg.checkpoint = Some(c.clone());
    }
    if let Some(d) = &common.data_dir {
        cfg.dataset_dir = Some(d.clone());
    }
    cfg.timing |= common.timing;
    cfg.validate()?;
    Ok(cfg)
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::GenData { common } => gen_data(&load_config(&common)?),
        Command::Train { common, reduced } => train(&load_config(&common)?, reduced),
        Command::Localize {
            common,
            method,
            signal,
            snr_db,
            mismatch_m,
            gamma,
        } => localize(&load_config(&common)?, method, signal.as_deref(), snr_db, mismatch_m, gamma),
        Command::SweepSnr { common } => sweep(&load_config(&common)?, "sweep-snr"),
        Command::SweepMismatch { common } => sweep(&load_config(&common)?, "sweep-mismatch"),
        Command::Crlb { common } => crlb_table(&load_config(&common)?),
        Command::VerifyTheorem { common } => theorem(&load_config(&common)?),
        Command::Selftest { common } => selftest(&load_config(&common)?),
    }
}

fn build_dataset(cfg: &ExperimentConfig) -> Result<Dataset> {
    let d = &cfg.dataset;
    gen_dataset(
        &cfg.environment,
        &d.region,
        d.samples,
        &cfg.calibrated_pulse()?,
        &cfg.time_grid()?,
        d.noise,
        d.sampling,
        d.seed,
    )
}

fn gen_data(cfg: &ExperimentConfig) -> Result<()> {
    let ds = build_dataset(cfg)?;
    let dir = cfg.dataset_path();
    ds.save(&dir)?;
    println!("wrote {} samples to {}", ds.len(), dir.display());
    Ok(())
}

fn train(cfg: &ExperimentConfig, reduced: bool) -> Result<()> {
    let dir = cfg.dataset_path();
    let ds = if dir.join("manifest.json").exists() {
        Dataset::load(&dir)?
    } else {
        eprintln!("no dataset at {}; generating one", dir.display());
        let ds = build_dataset(cfg)?;
        ds.save(&dir)?;
        ds
    };
    let arch = if reduced { PlnArchitecture::reduced() } else { cfg.architecture.clone() };
    let (ck, log) = pretrain(&ds, &arch, &cfg.train)?;
    for w in &log.warnings {
        eprintln!("warning: {w}");
    }
    let path = cfg.checkpoint_path();
    save_checkpoint(&ck, &path)?;
    let err = max_relative_length_error(&ck.model, &ds, 20, 20);
    let log_path = cfg.out_dir.join("train_log.json");
    write_file(
        &log_path,
        &serde_json::to_vec_pretty(&json!({
            "initial_loss": log.initial_loss,
            "final_loss": log.final_loss,
            "max_relative_length_error": err,
            "curve": log.curve,
            "warnings": log.warnings,
        }))?,
    )?;
    println!(
        "loss {:.4e} -> {:.4e}; max relative length error {:.3e}; checkpoint {}",
        log.initial_loss,
        log.final_loss,
        err,
        path.display()
    );
    Ok(())
}

fn read_signal(path: &Path) -> Result<SampledSignal> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

fn localize(cfg: &ExperimentConfig, method: Method, signal: Option<&Path>, snr_db: f64, mismatch_m: f64, gamma: f64) -> Result<()> {
    if method == Method::Crlb {
        return Err(Error::Config("crlb is not an estimator; use the crlb subcommand".into()));
    }
    let pulse = cfg.calibrated_pulse()?;
    let grid = cfg.time_grid()?;
    let test_env = cfg.environment.with_depth(cfg.environment.depth + mismatch_m);
    let r = match signal {
        Some(p) => read_signal(p)?,
        None => {
            let clean = noiseless_received(&test_env, &cfg.source, &pulse, &grid)?;
            let n0 = snr_to_n0(&clean, db_to_linear(snr_db), pulse.bandwidth)?;
            add_awgn(&clean, NoiseSpec { n0, seed: derive_seed(cfg.seed, &[snr_db.to_bits(), mismatch_m.to_bits()]) })
        }
    };
    let assumed = if method == Method::GblMatched { test_env } else { cfg.environment };
    let init = toa_init(&r, &pulse, &assumed)?;
    let res = match method {
        Method::GblMatched => gbl(&Propagator::Analytic { env: test_env, pulse }, &r, &init.initial, &cfg.gbl)?,
        Method::GblNn => gbl(&Propagator::Network(load_checkpoint(&cfg.checkpoint_path())?.model), &r, &init.initial, &cfg.gbl)?,
        Method::DaGbl => da_gbl(&load_checkpoint(&cfg.checkpoint_path())?.model, &r, &init.initial, &cfg.da_config(gamma))?,
        Method::Crlb => unreachable!(),
    };
    let out = json!({
        "method": method,
        "initial": init.initial,
        "estimate": res.location,
        "error_m": signal.is_none().then(|| res.location.distance(&cfg.source)),
        "loss": res.loss,
        "iterations": res.iterations,
        "converged": res.converged,
        "grad_norm": res.grad_norm,
        "exit": res.exit,
    });
    println!("{}", serde_json::to_string_pretty(&out)?);
    Ok(())
}

fn emit(cfg: &ExperimentConfig, command: &str, stem: &str, rows: &[SweepRow]) -> Result<PathBuf> {
    let csv = cfg.out_dir.join(format!("{stem}.csv"));
    write_csv(rows, &csv)?;
    Manifest::new(command, cfg, vec![csv.clone()], rows).write(&cfg.out_dir.join(format!("{stem}_manifest.json")))?;
    for r in rows.iter().filter(|r| r.flagged()) {
        eprintln!("flagged (convergence {:.2}): {}", r.conv_rate, r.csv_line());
    }
    Ok(csv)
}

fn sweep(cfg: &ExperimentConfig, command: &str) -> Result<()> {
    let runner = Runner::new(cfg.clone())?;
    let (rows, stem) = if command == "sweep-snr" {
        (runner.snr_sweep()?, "snr_sweep")
    } else {
        (runner.mismatch_sweep()?, "mismatch_sweep")
    };
    let csv = emit(cfg, command, stem, &rows)?;
    println!("wrote {} rows to {}", rows.len(), csv.display());
    Ok(())
}

fn crlb_table(cfg: &ExperimentConfig) -> Result<()> {
    let mut c = cfg.clone();
    c.methods = vec![Method::Crlb];
    let rows = Runner::with_model(c, None)?.snr_sweep()?;
    println!("{:>8}  {:>12}", "snr_db", "rmse_bound_m");
    for r in &rows {
        println!("{:>8}  {:>12.6}", r.snr_db, r.rmse_m);
    }
    emit(cfg, "crlb", "crlb", &rows)?;
    Ok(())
}

fn theorem(cfg: &ExperimentConfig) -> Result<()> {
    let t = &cfg.theorem;
    let grid = cfg.time_grid()?;
    let model = match &t.checkpoint {
        Some(p) => load_checkpoint(p)?.model,
        None => {
            eprintln!("training the reduced model on {} samples", t.train_samples);
            let pulse = cfg.calibrated_pulse()?;
            let ds = gen_dataset(
                &cfg.environment,
                &t.train_region,
                t.train_samples,
                &pulse,
                &grid,
                NoisePolicy::Noiseless,
                cfg.dataset.sampling,
                cfg.dataset.seed,
            )?;
            let (ck, _) = pretrain(&ds, &PlnArchitecture::reduced(), &cfg.train)?;
            ck.model
        }
    };
    let problem = TheoremProblem {
        w_tr: model,
        gamma: t.gamma,
        env: cfg.environment,
        source: cfg.source,
        init: SourceLocation::new(cfg.source.x + t.init_offset[0], cfg.source.z + t.init_offset[1]),
        grid,
    };
    let eps = EnvPerturbation {
        depth: t.epsilon_depth,
        sound_speed: 0.0,
    };
    let report = verify_theorem(&problem, eps, &t.lab)?;
    let path = cfg.out_dir.join("theorem_report.json");
    write_file(&path, &serde_json::to_vec_pretty(&report)?)?;
    println!("verdict: {:?}", report.verdict);
    println!("{}", serde_json::to_string_pretty(&report.checks)?);
    println!("report: {}", path.display());
    Ok(())
}

/// Cheap invariants that need no checkpoint. Returns `(name, passed, detail)`.
pub fn selftest_checks(cfg: &ExperimentConfig) -> Result<Vec<(String, bool, String)>> {
    let mut out = Vec::new();
    let pulse = cfg.calibrated_pulse()?;
    let grid = cfg.time_grid()?;
    let env = cfg.environment;
    let p = cfg.source;

    let oracle = noiseless_received(&env, &p, &pulse, &grid)?;
    let model = propagator_output(&Propagator::Analytic { env, pulse }, &p, &grid)?;
    let diff = oracle.values.iter().zip(&model.values).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    out.push(("analytic propagator equals oracle".into(), diff <= 1e-12, format!("max |diff| {diff:.2e}")));

    let prop = Propagator::Analytic { env, pulse };
    let at = SourceLocation::new(p.x - 3.0, p.z + 2.0);
    let (_, g) = gbl_loss_grad(&prop, &at, &oracle)?;
    let h = 1e-4;
    let fd = [
        (gbl_loss(&prop, &SourceLocation::new(at.x + h, at.z), &oracle)? - gbl_loss(&prop, &SourceLocation::new(at.x - h, at.z), &oracle)?) / (2.0 * h),
        (gbl_loss(&prop, &SourceLocation::new(at.x, at.z + h), &oracle)? - gbl_loss(&prop, &SourceLocation::new(at.x, at.z - h), &oracle)?) / (2.0 * h),
    ];
    let rel = (0..2).map(|i| (g[i] - fd[i]).abs() / g[i].abs().max(1e-12)).fold(0.0, f64::max);
    out.push(("localization gradient matches differences".into(), rel <= 1e-5, format!("max rel err {rel:.2e}")));

    let r = super::rmse(&[SourceLocation::new(p.x + 3.0, p.z), SourceLocation::new(p.x - 3.0, p.z)], &p)?;
    out.push(("rmse of symmetric pair".into(), (r - 3.0).abs() < 1e-12, format!("{r}")));

    let mut c = cfg.clone();
    c.methods = vec![Method::Crlb];
    let runner = Runner::with_model(c, None)?;
    let rows = runner.snr_sweep()?;
    let mut by_snr: Vec<(f64, f64)> = rows.iter().map(|r| (r.snr_db, r.rmse_m)).collect();
    by_snr.sort_by(|a, b| a.0.total_cmp(&b.0));
    let monotone = by_snr.windows(2).all(|w| w[1].1 < w[0].1);
    out.push(("bound decreases with SNR".into(), monotone, format!("{by_snr:?}")));

    let again = runner.snr_sweep()?;
    let same = super::to_csv(&rows) == super::to_csv(&again);
    out.push(("repeat sweep is byte-identical".into(), same, String::new()));
    Ok(out)
}

fn selftest(cfg: &ExperimentConfig) -> Result<()> {
    let checks = selftest_checks(cfg)?;
    let mut failed = 0;
    for (name, ok, detail) in &checks {
        println!("{} {name} {detail}", if *ok { "PASS" } else { "FAIL" });
        failed += usize::from(!ok);
    }
    if failed > 0 {
        return Err(Error::InvalidArgument(format!("{failed} selftest check(s) failed")));
    }
    if std::env::var_os(DATA_DIR_VAR).is_some() {
        println!("data directory from ${DATA_DIR_VAR}");
    }
    Ok(())
}
