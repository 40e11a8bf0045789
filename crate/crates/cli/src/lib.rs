//! Command-line front end: `sweep`, `selftest` and `list-detectors`.

use std::ffi::OsString;
use std::io::Write;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use vbmimo::harness::{run_sweep, write_convergence_csv, write_csv, write_csv_to, SweepOptions};
use vbmimo::selftest::run_selftest;
use vbmimo::{DetectorKind, Error};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "vbmimo", version, about = "Multiuser MIMO detector SER sweeps")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Monte-Carlo SER sweep over SNR points, written as CSV.
    Sweep(SweepArgs),
    /// Run the randomized invariant suite.
    Selftest {
        #[arg(long, default_value_t = 100)]
        instances: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Print the detector names accepted by `--detectors`.
    ListDetectors,
}

#[derive(Debug, Args)]
struct SweepArgs {
    /// Plain-text key=value file; explicit flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Receive antennas.
    #[arg(long)]
    m: Option<String>,
    /// Users.
    #[arg(long)]
    k: Option<String>,
    /// qpsk, 16qam or 64qam.
    #[arg(long = "mod")]
    modulation: Option<String>,
    /// iid, exp_corr or exp_corr(a+bj).
    #[arg(long)]
    channel: Option<String>,
    /// Correlation coefficient for exp_corr.
    #[arg(long, allow_hyphen_values = true)]
    alpha: Option<String>,
    /// perfect or pilot.
    #[arg(long)]
    csir: Option<String>,
    /// Pilot power.
    #[arg(long)]
    pp: Option<String>,
    /// Pilot length in slots.
    #[arg(long)]
    tp: Option<String>,
    /// Comma-separated SNR points in dB.
    #[arg(long = "snr-db", allow_hyphen_values = true)]
    snr_db: Option<String>,
    /// Comma-separated detector names.
    #[arg(long)]
    detectors: Option<String>,
    #[arg(long)]
    trials: Option<String>,
    #[arg(long)]
    seed: Option<String>,
    #[arg(long = "max-iters")]
    max_iters: Option<String>,
    #[arg(long)]
    tol: Option<String>,
    /// Result CSV path; stdout when absent.
    #[arg(long)]
    out: Option<String>,
    /// Per-iteration SER CSV path.
    #[arg(long = "trace-out")]
    trace_out: Option<String>,
}

impl SweepArgs {
    fn options(&self) -> Result<SweepOptions, Error> {
        let mut opts = match &self.config {
            Some(path) => {
                let text = std::fs::read_to_string(path)
                    .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
                SweepOptions::from_config_text(&text)?
            }
            None => SweepOptions::default(),
        };
        let flags = [
            ("m", &self.m),
            ("k", &self.k),
            ("mod", &self.modulation),
            ("channel", &self.channel),
            ("alpha", &self.alpha),
            ("csir", &self.csir),
            ("pp", &self.pp),
            ("tp", &self.tp),
            ("snr-db", &self.snr_db),
            ("detectors", &self.detectors),
            ("trials", &self.trials),
            ("seed", &self.seed),
            ("max-iters", &self.max_iters),
            ("tol", &self.tol),
            ("out", &self.out),
            ("trace-out", &self.trace_out),
        ];
        for (key, value) in flags {
            if let Some(v) = value {
                opts.set(key, v.clone())?;
            }
        }
        Ok(opts)
    }
}

fn sweep(args: &SweepArgs, out: &mut dyn Write) -> Result<(), Error> {
    let opts = args.options()?;
    let spec = opts.into_spec()?;
    let result = run_sweep(&spec)?;
    match opts.out() {
        Some(path) => write_csv(&result.records, path)?,
        None => write_csv_to(&result.records, &mut *out)?,
    }
    if let (Some(path), Some(conv)) = (opts.trace_out(), &result.convergence) {
        write_convergence_csv(conv, path)?;
    }
    Ok(())
}

fn selftest(instances: usize, seed: u64, out: &mut dyn Write) -> Result<bool, Error> {
    let started = std::time::Instant::now();
    let report = run_selftest(instances, seed)?;
    let io = |source| Error::Io { path: "<stdout>".into(), source };
    for c in &report.checks {
        let status = if c.passed() { "PASS" } else { "FAIL" };
        writeln!(out, "{status} {} ({} evaluations, {} failures)", c.name, c.evaluations, c.failures).map_err(io)?;
        if let Some(detail) = &c.first_failure {
            writeln!(out, "    first failure: {detail}").map_err(io)?;
        }
    }
    writeln!(out, "{} instances in {:.2} s", report.instances, started.elapsed().as_secs_f64()).map_err(io)?;
    Ok(report.passed())
}

/// Run the CLI on `argv` (program name first) and return the exit code.
pub fn run<I, S>(argv: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
            let rendered = e.render().to_string();
            let _ = if e.use_stderr() { err.write_all(rendered.as_bytes()) } else { out.write_all(rendered.as_bytes()) };
            return code;
        }
    };
    let outcome = match cli.command {
        Command::Sweep(args) => sweep(&args, out).map(|_| true),
        Command::Selftest { instances, seed } => selftest(instances, seed, out),
        Command::ListDetectors => {
            let mut res = Ok(true);
            for kind in DetectorKind::ALL {
                let csir = if kind.needs_estimation_context() { "pilot" } else { "perfect,pilot" };
                if let Err(source) = writeln!(out, "{kind}\t{csir}") {
                    res = Err(Error::Io { path: "<stdout>".into(), source });
                    break;
                }
            }
            res
        }
    };
    match outcome {
        Ok(true) => EXIT_OK,
        Ok(false) => {
            let _ = writeln!(err, "selftest failed");
            EXIT_RUNTIME
        }
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            if e.is_config() {
                EXIT_CONFIG
            } else {
                EXIT_RUNTIME
            }
        }
    }
}
