//! Monte-Carlo experiment engine.
//!
//! A sweep runs every requested detector on the same random realization for
//! each `(SNR, trial)` cell and accumulates symbol errors, iteration counts and
//! detector wall time per `(detector, SNR)`.

use std::fmt;
use std::time::Instant;

use num_complex::Complex;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::channels::{
    exp_corr_covariance, gaussian_vector, make_orthogonal_pilots, mmse_channel_estimate, noise_variance_for_snr_db,
    simulate_pilot_phase, CorrelatedChannel, Covariance, EstimationContext, PilotMatrix,
};
use crate::constellation::{Constellation, Modulation};
use crate::detectors::{detect, Csi, DetectorConfig, DetectorKind};
use crate::error::{Error, Result};
use crate::scalar::{CMatrix, CVector};

mod config;
mod csv_io;

pub use config::{parse_config_text, SweepOptions, CONFIG_KEYS};
pub use csv_io::{read_convergence_csv, read_csv, write_convergence_csv, write_csv, write_csv_to, CSV_HEADER};

/// Environment variable holding the worker count for [`run_sweep`].
pub const WORKERS_ENV: &str = "VBMIMO_WORKERS";

/// Spatial channel model.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ChannelModel {
    Iid,
    /// Exponential correlation with complex coefficient `alpha`, `|alpha| < 1`.
    ExpCorr(Complex<f64>),
}

impl fmt::Display for ChannelModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ChannelModel::Iid => f.write_str("iid"),
            ChannelModel::ExpCorr(a) => write!(f, "exp_corr({}{:+}j)", a.re, a.im),
        }
    }
}

/// Channel knowledge available at the receiver.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum CsirMode {
    Perfect,
    /// Orthogonal pilots of power `pp` over `tp` slots, then MMSE estimation.
    Pilot { pp: f64, tp: usize },
}

impl fmt::Display for CsirMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CsirMode::Perfect => f.write_str("perfect"),
            CsirMode::Pilot { pp, tp } => write!(f, "pilot:pp={pp}:tp={tp}"),
        }
    }
}

/// Full description of a Monte-Carlo sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentSpec {
    pub m: usize,
    pub k: usize,
    pub modulation: Modulation,
    pub channel: ChannelModel,
    pub csir: CsirMode,
    pub snr_db: Vec<f64>,
    pub detectors: Vec<DetectorKind>,
    pub trials: usize,
    pub base_seed: u64,
    pub max_iters: usize,
    pub tol: f64,
    /// Record per-iteration SER for every detector.
    pub record_convergence: bool,
}

impl ExperimentSpec {
    /// i.i.d. Rayleigh, perfect CSIR, default iteration settings.
    pub fn new(m: usize, k: usize, modulation: Modulation, snr_db: Vec<f64>, detectors: Vec<DetectorKind>, trials: usize) -> Self {
        Self {
            m,
            k,
            modulation,
            channel: ChannelModel::Iid,
            csir: CsirMode::Perfect,
            snr_db,
            detectors,
            trials,
            base_seed: 0,
            max_iters: 50,
            tol: 1e-6,
            record_convergence: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let cfg = |msg: String| Err(Error::Config(msg));
        if self.m == 0 || self.k == 0 {
            return cfg("M and K must be positive".into());
        }
        if self.trials == 0 || self.trials > u32::MAX as usize {
            return cfg(format!("trials must be in 1..=2^32-1, got {}", self.trials));
        }
        if self.snr_db.is_empty() || self.snr_db.iter().any(|s| !s.is_finite()) {
            return cfg("SNR grid must be a non-empty list of finite values".into());
        }
        if self.detectors.is_empty() {
            return cfg("no detectors requested".into());
        }
        if self.max_iters == 0 {
            return cfg("max_iters must be at least 1".into());
        }
        if !(self.tol >= 0.0) {
            return cfg(format!("tolerance must be nonnegative, got {}", self.tol));
        }
        self.modulation.build::<f64>()?;
        if let ChannelModel::ExpCorr(a) = self.channel {
            exp_corr_covariance(1, a)?;
        }
        match self.csir {
            CsirMode::Perfect => {
                if let Some(d) = self.detectors.iter().find(|d| d.needs_estimation_context()) {
                    return cfg(format!("{d} requires pilot CSIR"));
                }
            }
            CsirMode::Pilot { pp, tp } => {
                if !(pp > 0.0) || !pp.is_finite() {
                    return cfg(format!("pilot power must be positive, got {pp}"));
                }
                if tp < self.k {
                    return cfg(format!("pilot length {tp} is shorter than K = {}", self.k));
                }
            }
        }
        Ok(())
    }

    fn detector_config(&self) -> DetectorConfig {
        DetectorConfig {
            max_iters: self.max_iters,
            early_stop_tol: self.tol,
            record_trace: self.record_convergence,
            update_order: None,
        }
    }
}

/// One `(detector, SNR)` row of sweep results.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepRecord {
    pub detector: String,
    pub m: usize,
    pub k: usize,
    pub modulation: String,
    pub channel: String,
    pub csir: String,
    pub snr_db: f64,
    pub trials: u64,
    pub symbols_sent: u64,
    pub symbol_errors: u64,
    pub ser: f64,
    pub mean_iters: f64,
    /// Total detector wall time over all trials, in milliseconds.
    pub wall_ms: f64,
}

/// Per-iteration SER of one detector at one SNR.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvergenceRecord {
    pub detector: String,
    pub snr_db: f64,
    /// 1-based.
    pub iteration: usize,
    pub ser: f64,
}

/// Everything a sweep produced.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepResult {
    pub records: Vec<SweepRecord>,
    pub convergence: Option<Vec<ConvergenceRecord>>,
}

/// Outcome of one detector on one realization.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectorTrial {
    pub kind: DetectorKind,
    pub symbol_errors: usize,
    pub iters_used: usize,
    pub diverged: bool,
    pub wall_ns: u64,
    /// Errors of the hard decisions after each iteration, padded to
    /// `max_iters` with the final value, when convergence is recorded.
    pub per_iter_errors: Option<Vec<usize>>,
}

/// One random draw of the system shared by every detector in a trial.
#[derive(Debug, Clone, PartialEq)]
pub struct Realization {
    pub x_idx: Vec<usize>,
    pub h: CMatrix<f64>,
    pub y: CVector<f64>,
    pub n0: f64,
    pub estimate: Option<EstimationContext<f64>>,
}

/// Per-run state that is identical across trials.
pub struct TrialContext {
    spec: ExperimentSpec,
    constellation: Constellation<f64>,
    channel: Option<CorrelatedChannel<f64>>,
    covariances: Vec<Covariance<f64>>,
    pilots: Option<PilotMatrix<f64>>,
    cfg: DetectorConfig,
}

impl TrialContext {
    pub fn new(spec: &ExperimentSpec) -> Result<Self> {
        spec.validate()?;
        let constellation = spec.modulation.build()?;
        let (channel, covariances) = match spec.channel {
            ChannelModel::Iid => (None, vec![Covariance::Scaled(1.0 / spec.m as f64); spec.k]),
            ChannelModel::ExpCorr(a) => {
                let r = Covariance::Dense(exp_corr_covariance(spec.m, a)?);
                let gen = CorrelatedChannel::new(spec.m, vec![r; spec.k])?;
                let cov = gen.covariances().to_vec();
                (Some(gen), cov)
            }
        };
        let pilots = match spec.csir {
            CsirMode::Perfect => None,
            CsirMode::Pilot { pp, tp } => Some(make_orthogonal_pilots(spec.k, tp, pp)?),
        };
        Ok(Self { spec: spec.clone(), constellation, channel, covariances, pilots, cfg: spec.detector_config() })
    }

    pub fn spec(&self) -> &ExperimentSpec {
        &self.spec
    }

    pub fn constellation(&self) -> &Constellation<f64> {
        &self.constellation
    }

    /// Generator for cell `(snr_idx, trial_idx)`: the ChaCha stream number is
    /// `(snr_idx << 32) | trial_idx`, so distinct cells never share a stream.
    pub fn rng_for(&self, snr_idx: usize, trial_idx: usize) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.spec.base_seed);
        rng.set_stream(((snr_idx as u64) << 32) | trial_idx as u64);
        rng
    }

    /// Draw the realization of cell `(snr_idx, trial_idx)`.
    pub fn realization(&self, snr_idx: usize, trial_idx: usize) -> Result<Realization> {
        let spec = &self.spec;
        let snr = *spec
            .snr_db
            .get(snr_idx)
            .ok_or_else(|| Error::Config(format!("SNR index {snr_idx} out of range")))?;
        let n0: f64 = noise_variance_for_snr_db(spec.m, spec.k, snr);
        let mut rng = self.rng_for(snr_idx, trial_idx);
        let c = &self.constellation;
        let x_idx: Vec<usize> = (0..spec.k).map(|_| draw_index(c.priors(), &mut rng)).collect();
        let scenario = match &self.channel {
            None => crate::channels::gen_iid_channel(spec.m, spec.k, n0, &mut rng),
            Some(gen) => gen.draw(n0, &mut rng),
        };
        let x = CVector::from_iterator(spec.k, x_idx.iter().map(|&i| c.point(i)));
        let y = &scenario.h * x + gaussian_vector(spec.m, n0, &mut rng);
        let estimate = match &self.pilots {
            None => None,
            Some(p) => {
                let yp = simulate_pilot_phase(&scenario, p, &mut rng)?;
                Some(mmse_channel_estimate(&yp, p, &self.covariances, n0)?)
            }
        };
        Ok(Realization { x_idx, h: scenario.h, y, n0, estimate })
    }

    /// Run `detectors` on one realization.
    pub fn run_detectors(&self, real: &Realization, detectors: &[DetectorKind]) -> Result<Vec<DetectorTrial>> {
        let csi = match &real.estimate {
            None => Csi::Perfect { h: &real.h, n0: real.n0 },
            Some(ctx) => Csi::Estimated { ctx, n0: real.n0 },
        };
        detectors
            .iter()
            .map(|&kind| {
                let start = Instant::now();
                let out = detect(kind, &real.y, csi, &self.constellation, &self.cfg)?;
                let wall_ns = start.elapsed().as_nanos() as u64;
                let per_iter_errors = out.trace.as_ref().map(|t| {
                    let mut errs: Vec<usize> = t.iter().map(|e| count_errors(&e.hard_symbols, &real.x_idx)).collect();
                    let last = count_errors(&out.hard_symbols, &real.x_idx);
                    errs.resize(self.spec.max_iters, last);
                    errs
                });
                Ok(DetectorTrial {
                    kind,
                    symbol_errors: out.symbol_errors(&real.x_idx),
                    iters_used: out.iters_used,
                    diverged: out.diverged,
                    wall_ns,
                    per_iter_errors,
                })
            })
            .collect()
    }

    pub fn run_trial(&self, snr_idx: usize, trial_idx: usize) -> Result<Vec<DetectorTrial>> {
        let real = self.realization(snr_idx, trial_idx)?;
        self.run_detectors(&real, &self.spec.detectors)
    }
}

fn count_errors(a: &[usize], b: &[usize]) -> usize {
    a.iter().zip(b).filter(|(x, y)| x != y).count()
}

/// Inverse-CDF draw from a probability vector.
fn draw_index<R: Rng + ?Sized>(p: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, &pi) in p.iter().enumerate() {
        acc += pi;
        if u < acc {
            return i;
        }
    }
    p.iter().rposition(|&pi| pi > 0.0).unwrap_or(0)
}

/// Run a single trial of `spec`.
pub fn run_trial(spec: &ExperimentSpec, snr_idx: usize, trial_idx: usize) -> Result<Vec<DetectorTrial>> {
    TrialContext::new(spec)?.run_trial(snr_idx, trial_idx)
}

/// Worker count from [`WORKERS_ENV`], else the number of processors.
pub fn worker_count() -> usize {
    std::env::var(WORKERS_ENV)
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1))
}

#[derive(Clone, Default)]
struct Accum {
    errors: u64,
    iters: u64,
    wall_ns: u128,
    per_iter: Vec<u64>,
}

const CHUNK: usize = 1024;

/// Run every `(SNR, trial)` cell of `spec` on a worker pool of
/// [`worker_count`] threads. Counts are summed in trial order, so the result
/// does not depend on scheduling.
pub fn run_sweep(spec: &ExperimentSpec) -> Result<SweepResult> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(worker_count())
        .build()
        .map_err(|e| Error::Config(format!("cannot build worker pool: {e}")))?;
    pool.install(|| run_sweep_in_current_pool(spec))
}

fn run_sweep_in_current_pool(spec: &ExperimentSpec) -> Result<SweepResult> {
    let ctx = TrialContext::new(spec)?;
    let nd = spec.detectors.len();
    let mut records = Vec::new();
    let mut convergence = spec.record_convergence.then(Vec::new);
    for (si, &snr) in spec.snr_db.iter().enumerate() {
        let mut acc = vec![Accum { per_iter: vec![0; spec.max_iters], ..Default::default() }; nd];
        let mut start = 0;
        while start < spec.trials {
            let end = (start + CHUNK).min(spec.trials);
            let chunk: Vec<Vec<DetectorTrial>> =
                (start..end).into_par_iter().map(|t| ctx.run_trial(si, t)).collect::<Result<_>>()?;
            for trial in &chunk {
                for (a, d) in acc.iter_mut().zip(trial) {
                    a.errors += d.symbol_errors as u64;
                    a.iters += d.iters_used as u64;
                    a.wall_ns += d.wall_ns as u128;
                    if let Some(p) = &d.per_iter_errors {
                        for (s, &e) in a.per_iter.iter_mut().zip(p) {
                            *s += e as u64;
                        }
                    }
                }
            }
            start = end;
        }
        let trials = spec.trials as u64;
        let sent = trials * spec.k as u64;
        for (kind, a) in spec.detectors.iter().zip(&acc) {
            records.push(SweepRecord {
                detector: kind.name().to_string(),
                m: spec.m,
                k: spec.k,
                modulation: spec.modulation.to_string(),
                channel: spec.channel.to_string(),
                csir: spec.csir.to_string(),
                snr_db: snr,
                trials,
                symbols_sent: sent,
                symbol_errors: a.errors,
                ser: a.errors as f64 / sent as f64,
                mean_iters: a.iters as f64 / trials as f64,
                wall_ms: a.wall_ns as f64 / 1e6,
            });
            if let Some(conv) = &mut convergence {
                for (it, &e) in a.per_iter.iter().enumerate() {
                    conv.push(ConvergenceRecord {
                        detector: kind.name().to_string(),
                        snr_db: snr,
                        iteration: it + 1,
                        ser: e as f64 / sent as f64,
                    });
                }
            }
        }
    }
    Ok(SweepResult { records, convergence })
}
