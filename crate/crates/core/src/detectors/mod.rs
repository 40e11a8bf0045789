//! MIMO detectors.
//!
//! Every detector maps an observation `y = Hx + n` to per-user soft means,
//! soft variances and hard decisions. Iterative detectors share
//! [`DetectorConfig`] and may record a per-iteration [`TraceEntry`].

use std::fmt;
use std::str::FromStr;

use crate::channels::EstimationContext;
use crate::constellation::Constellation;
use crate::error::{Error, Result};
use crate::scalar::{cabs, CMatrix, CVector, Real};

pub mod baseline;
pub mod sic;
pub mod vb;
pub mod vbm;

pub use baseline::{amp_detect, lmmse_detect, oamp_detect, oamp_linear_filter};
pub use sic::{lmmse_sic_detect, mf_sic_detect};
pub use vb::{
    conv_vb_detect, expected_residual_sq, lmmse_vb_detect, lmmse_vb_precision, mf_vb_detect, ColumnCovariance,
    GammaPrior, WishartPrior,
};
pub use vbm::{mf_vb_m_detect, VbmOutput};

/// Settings shared by the iterative detectors.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectorConfig {
    /// Hard cap on the number of iterations (sweeps).
    pub max_iters: usize,
    /// Stop once the largest soft-mean change in an iteration falls below this.
    /// Zero disables early stopping.
    pub early_stop_tol: f64,
    pub record_trace: bool,
    /// User visiting order for the sequential detectors; `None` is `0..K`.
    pub update_order: Option<Vec<usize>>,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self { max_iters: 50, early_stop_tol: 1e-6, record_trace: false, update_order: None }
    }
}

impl DetectorConfig {
    pub fn with_max_iters(mut self, n: usize) -> Self {
        self.max_iters = n;
        self
    }

    pub fn with_tol(mut self, tol: f64) -> Self {
        self.early_stop_tol = tol;
        self
    }

    pub fn with_trace(mut self) -> Self {
        self.record_trace = true;
        self
    }

    pub fn with_order(mut self, order: Vec<usize>) -> Self {
        self.update_order = Some(order);
        self
    }

    pub fn validate(&self, k: usize) -> Result<()> {
        if self.max_iters == 0 {
            return Err(Error::Config("max_iters must be at least 1".into()));
        }
        if !(self.early_stop_tol >= 0.0) {
            return Err(Error::Config(format!("early_stop_tol must be nonnegative, got {}", self.early_stop_tol)));
        }
        if let Some(order) = &self.update_order {
            let mut seen = vec![false; k];
            if order.len() != k || order.iter().any(|&i| i >= k || std::mem::replace(&mut seen[i], true)) {
                return Err(Error::Config(format!("update_order is not a permutation of 0..{k}")));
            }
        }
        Ok(())
    }

    pub(crate) fn order(&self, k: usize) -> Vec<usize> {
        self.update_order.clone().unwrap_or_else(|| (0..k).collect())
    }

    pub(crate) fn converged<T: Real>(&self, change: T) -> bool {
        change.as_f64() < self.early_stop_tol
    }
}

/// Snapshot of a detector after one iteration.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceEntry<T: Real> {
    pub soft_means: CVector<T>,
    pub soft_vars: Vec<T>,
    /// Hard decisions the detector would emit if it stopped here.
    pub hard_symbols: Vec<usize>,
    /// Per-user linear estimates `z_i` computed in this iteration.
    pub z: CVector<T>,
    /// Per-user effective noise level paired with `z_i`.
    pub z_noise: Vec<T>,
    /// Scalar summary of the postulated noise: `σ_t²` for AMP/OAMP, `1/⟨γ⟩`
    /// for MF-VB and MF-VB-M, `‖r‖²/M` for LMMSE-VB, `N0` for conv-VB, the
    /// mean per-user noise level for SIC and LMMSE.
    pub noise_level: T,
    /// Maintained residual `r` at the end of the iteration, for detectors
    /// that keep one.
    pub residual: Option<CVector<T>>,
}

/// Result of one detector invocation.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectorOutput<T: Real> {
    pub soft_means: CVector<T>,
    pub soft_vars: Vec<T>,
    pub hard_symbols: Vec<usize>,
    pub iters_used: usize,
    /// Set when the iteration produced non-finite state and was halted.
    pub diverged: bool,
    pub trace: Option<Vec<TraceEntry<T>>>,
}

impl<T: Real> DetectorOutput<T> {
    pub fn symbol_errors(&self, truth: &[usize]) -> usize {
        self.hard_symbols.iter().zip(truth).filter(|(a, b)| a != b).count()
    }
}

/// The detectors available to the harness.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum DetectorKind {
    Lmmse,
    Amp,
    OampVamp,
    MfSic,
    LmmseSic,
    ConvVb,
    MfVb,
    LmmseVb,
    MfVbM,
}

impl DetectorKind {
    pub const ALL: [DetectorKind; 9] = [
        DetectorKind::Lmmse,
        DetectorKind::Amp,
        DetectorKind::OampVamp,
        DetectorKind::MfSic,
        DetectorKind::LmmseSic,
        DetectorKind::ConvVb,
        DetectorKind::MfVb,
        DetectorKind::LmmseVb,
        DetectorKind::MfVbM,
    ];

    pub fn name(self) -> &'static str {
        match self {
            DetectorKind::Lmmse => "lmmse",
            DetectorKind::Amp => "amp",
            DetectorKind::OampVamp => "oamp-vamp",
            DetectorKind::MfSic => "mf-sic",
            DetectorKind::LmmseSic => "lmmse-sic",
            DetectorKind::ConvVb => "conv-vb",
            DetectorKind::MfVb => "mf-vb",
            DetectorKind::LmmseVb => "lmmse-vb",
            DetectorKind::MfVbM => "mf-vb-m",
        }
    }

    /// Needs pilot-based CSIR (channel estimate plus error covariances).
    pub fn needs_estimation_context(self) -> bool {
        self == DetectorKind::MfVbM
    }

    /// Visits users one at a time, so the output depends on the update order.
    pub fn is_sequential(self) -> bool {
        matches!(
            self,
            DetectorKind::MfSic
                | DetectorKind::LmmseSic
                | DetectorKind::ConvVb
                | DetectorKind::MfVb
                | DetectorKind::LmmseVb
                | DetectorKind::MfVbM
        )
    }
}

impl fmt::Display for DetectorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for DetectorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key = s.trim().to_ascii_lowercase();
        DetectorKind::ALL
            .into_iter()
            .find(|d| d.name() == key)
            .ok_or_else(|| Error::Config(format!("unknown detector '{s}'")))
    }
}

/// Channel knowledge handed to a detector.
#[derive(Debug, Clone, Copy)]
pub enum Csi<'a, T: Real> {
    Perfect { h: &'a CMatrix<T>, n0: T },
    /// Pilot-based estimate. Detectors other than MF-VB-M treat `ctx.h_hat`
    /// as the true channel.
    Estimated { ctx: &'a EstimationContext<T>, n0: T },
}

impl<T: Real> Csi<'_, T> {
    pub fn channel(&self) -> &CMatrix<T> {
        match self {
            Csi::Perfect { h, .. } => h,
            Csi::Estimated { ctx, .. } => &ctx.h_hat,
        }
    }

    pub fn n0(&self) -> T {
        match self {
            Csi::Perfect { n0, .. } | Csi::Estimated { n0, .. } => *n0,
        }
    }
}

/// Run `kind` with its default priors.
pub fn detect<T: Real>(
    kind: DetectorKind,
    y: &CVector<T>,
    csi: Csi<'_, T>,
    c: &Constellation<T>,
    cfg: &DetectorConfig,
) -> Result<DetectorOutput<T>> {
    let h = csi.channel();
    let n0 = csi.n0();
    match kind {
        DetectorKind::Lmmse => lmmse_detect(y, h, n0, c, cfg),
        DetectorKind::Amp => amp_detect(y, h, n0, c, cfg),
        DetectorKind::OampVamp => oamp_detect(y, h, n0, c, cfg),
        DetectorKind::MfSic => mf_sic_detect(y, h, n0, c, cfg),
        DetectorKind::LmmseSic => lmmse_sic_detect(y, h, n0, c, cfg),
        DetectorKind::ConvVb => conv_vb_detect(y, h, n0, c, cfg),
        DetectorKind::MfVb => mf_vb_detect(y, h, c, cfg, &GammaPrior::default()),
        DetectorKind::LmmseVb => lmmse_vb_detect(y, h, c, cfg, &WishartPrior::Improper),
        DetectorKind::MfVbM => match csi {
            Csi::Estimated { ctx, .. } => Ok(mf_vb_m_detect(y, ctx, c, cfg, &GammaPrior::default())?.detection),
            Csi::Perfect { .. } => Err(Error::Config("mf-vb-m requires pilot-based CSIR".into())),
        },
    }
}

/// Dimension and finiteness checks shared by every detector.
pub(crate) fn check_inputs<T: Real>(y: &CVector<T>, h: &CMatrix<T>, n0: Option<T>, cfg: &DetectorConfig) -> Result<()> {
    if h.nrows() != y.len() {
        return Err(Error::Config(format!("y has length {} but H has {} rows", y.len(), h.nrows())));
    }
    if h.ncols() == 0 || h.nrows() == 0 {
        return Err(Error::Config("H must have at least one row and one column".into()));
    }
    cfg.validate(h.ncols())?;
    if !y.iter().chain(h.iter()).all(|z| z.re.is_finite() && z.im.is_finite()) {
        return Err(Error::NumericInput("non-finite entry in y or H".into()));
    }
    if let Some(n0) = n0 {
        if !(n0 > T::zero()) || !n0.is_finite() {
            return Err(Error::NumericInput(format!("noise variance must be positive and finite, got {n0}")));
        }
    }
    Ok(())
}

pub(crate) fn max_abs_change<T: Real>(a: &CVector<T>, b: &CVector<T>) -> T {
    a.iter().zip(b.iter()).fold(T::zero(), |m, (x, y)| m.max(cabs(x - y)))
}

pub(crate) fn mean_of<T: Real>(v: &[T]) -> T {
    v.iter().fold(T::zero(), |a, &b| a + b) / T::lit(v.len() as f64)
}

/// Per-user MAP decisions `argmax_a ln p_a − |z_i − a|²/σ_i²`.
pub(crate) fn map_decisions<T: Real>(z: &CVector<T>, noise: &[T], c: &Constellation<T>) -> Vec<usize> {
    z.iter().zip(noise).map(|(&zi, &s)| c.map_index(zi, s)).collect()
}

/// Optional trace buffer that is a no-op when tracing is off.
pub(crate) struct Tracer<T: Real> {
    entries: Option<Vec<TraceEntry<T>>>,
}

impl<T: Real> Tracer<T> {
    pub(crate) fn new(cfg: &DetectorConfig) -> Self {
        Self { entries: cfg.record_trace.then(Vec::new) }
    }

    pub(crate) fn push(&mut self, make: impl FnOnce() -> TraceEntry<T>) {
        if let Some(e) = &mut self.entries {
            e.push(make());
        }
    }

    pub(crate) fn finish(self) -> Option<Vec<TraceEntry<T>>> {
        self.entries
    }
}
