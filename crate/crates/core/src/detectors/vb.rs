//! Variational-Bayes detectors with known noise variance (conv-VB), a
//! postulated scalar noise precision (MF-VB) and a postulated noise precision
//! matrix (LMMSE-VB).
//!
//! All three share one Gauss-Seidel sweep over the users with a maintained
//! residual `r = y − H⟨x⟩`; they differ only in how the per-user linear
//! estimate `z_i` and its noise level are formed at the start of each sweep.

use crate::constellation::{Constellation, SIGMA2_FLOOR};
use crate::detectors::{check_inputs, map_decisions, DetectorConfig, DetectorOutput, TraceEntry, Tracer};
use crate::error::{Error, Result};
use crate::linalg::{add_scaled_identity, cholesky, cholesky_inverse, cholesky_solve, column_norms_sq, hermitianize, weighted_gram};
use crate::scalar::{cabs, creal, CMatrix, CVector, Real};

/// Gamma prior on the noise precision, shape `a0` and rate `b0`. `(0, 0)` is
/// the improper prior and the default.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GammaPrior<T: Real> {
    pub a0: T,
    pub b0: T,
}

impl<T: Real> Default for GammaPrior<T> {
    fn default() -> Self {
        Self { a0: T::zero(), b0: T::zero() }
    }
}

impl<T: Real> GammaPrior<T> {
    pub fn new(a0: T, b0: T) -> Result<Self> {
        if !(a0 >= T::zero() && b0 >= T::zero()) || !a0.is_finite() || !b0.is_finite() {
            return Err(Error::Config(format!("gamma prior needs finite a0, b0 >= 0, got ({a0}, {b0})")));
        }
        Ok(Self { a0, b0 })
    }

    /// Posterior mean `(a0 + M)/(b0 + E‖y − Hx‖²)`, denominator floored at
    /// `1e-30`.
    pub fn posterior_mean(&self, m: usize, expected_sq: T) -> T {
        (self.a0 + T::lit(m as f64)) / (self.b0 + expected_sq).max(T::lit(SIGMA2_FLOOR))
    }
}

/// Complex Wishart prior on the noise precision matrix.
#[derive(Debug, Clone, PartialEq)]
pub enum WishartPrior<T: Real> {
    /// Degenerate limit giving `W = ((‖r‖²/M) I + HΣ_xHᴴ)⁻¹`.
    Improper,
    /// Scale matrix `W0` (stored as its inverse) with `dof ≥ M` degrees of
    /// freedom, giving `⟨W⟩ = (dof + 1)(W0⁻¹ + rrᴴ + HΣ_xHᴴ)⁻¹`.
    Proper { w0_inv: CMatrix<T>, dof: usize },
}

impl<T: Real> WishartPrior<T> {
    /// Proper prior from `W0`, which must be Hermitian positive definite.
    pub fn proper(w0: &CMatrix<T>, dof: usize) -> Result<Self> {
        let m = w0.nrows();
        if w0.ncols() != m || dof < m {
            return Err(Error::Config(format!("Wishart prior needs a square W0 and dof >= {m}, got dof {dof}")));
        }
        let w0_inv = cholesky(hermitianize(w0), "W0")?.inverse();
        Ok(WishartPrior::Proper { w0_inv: hermitianize(&w0_inv), dof })
    }
}

/// Uncertainty of one column of a random matrix in [`expected_residual_sq`].
#[derive(Debug, Clone, PartialEq)]
pub enum ColumnCovariance<T: Real> {
    Trace(T),
    Matrix(CMatrix<T>),
}

impl<T: Real> ColumnCovariance<T> {
    pub fn trace(&self) -> T {
        match self {
            ColumnCovariance::Trace(t) => *t,
            ColumnCovariance::Matrix(s) => s.trace().re,
        }
    }
}

/// `E‖y − Ax‖²` under independent `q(A)q(x)` with column-wise independent `A`
/// and diagonal `Σ_x`:
/// `‖y − ⟨A⟩⟨x⟩‖² + Σ_i ‖⟨a_i⟩‖²σ_i² + Σ_i (|⟨x_i⟩|² + σ_i²) Tr{Σ_{a_i}}`.
///
/// An empty `col_covs` means a deterministic `A`.
pub fn expected_residual_sq<T: Real>(
    y: &CVector<T>,
    a_mean: &CMatrix<T>,
    col_covs: &[ColumnCovariance<T>],
    x_mean: &CVector<T>,
    x_vars: &[T],
) -> Result<T> {
    let k = a_mean.ncols();
    if a_mean.nrows() != y.len() || x_mean.len() != k || x_vars.len() != k || !(col_covs.is_empty() || col_covs.len() == k) {
        return Err(Error::Precondition("dimension mismatch in expected_residual_sq".into()));
    }
    if let Some(v) = x_vars.iter().find(|v| !(**v >= T::zero())) {
        return Err(Error::Precondition(format!("negative variance {v}")));
    }
    let r = y - a_mean * x_mean;
    let traces: Vec<T> = col_covs.iter().map(ColumnCovariance::trace).collect();
    Ok(residual_energy(r.norm_squared(), &column_norms_sq(a_mean), x_mean, x_vars, &traces))
}

/// [`expected_residual_sq`] from precomputed parts; `traces` may be empty.
pub(crate) fn residual_energy<T: Real>(r_sq: T, col_norms: &[T], x_mean: &CVector<T>, x_vars: &[T], traces: &[T]) -> T {
    let mut acc = r_sq;
    for i in 0..col_norms.len() {
        acc += col_norms[i] * x_vars[i];
        if let Some(&t) = traces.get(i) {
            acc += (x_mean[i].norm_sqr() + x_vars[i]) * t;
        }
    }
    acc
}

/// `W` for LMMSE-VB from the residual and soft variances at the start of a
/// sweep, as an explicit Hermitian matrix.
pub fn lmmse_vb_precision<T: Real>(
    h: &CMatrix<T>,
    residual: &CVector<T>,
    soft_vars: &[T],
    prior: &WishartPrior<T>,
) -> Result<CMatrix<T>> {
    let (cov, scale) = postulated_covariance(h, residual, soft_vars, prior)?;
    let inv = cholesky_inverse(&cholesky(cov, "postulated noise covariance")?);
    Ok(hermitianize(&inv.map(|z| z.scale(scale))))
}

/// `(C, s)` with `W = s·C⁻¹`.
fn postulated_covariance<T: Real>(
    h: &CMatrix<T>,
    r: &CVector<T>,
    vars: &[T],
    prior: &WishartPrior<T>,
) -> Result<(CMatrix<T>, T)> {
    let m = h.nrows();
    let mut cov = weighted_gram(h, vars);
    match prior {
        WishartPrior::Improper => {
            add_scaled_identity(&mut cov, (r.norm_squared() / T::lit(m as f64)).max(T::lit(SIGMA2_FLOOR)));
            Ok((cov, T::one()))
        }
        WishartPrior::Proper { w0_inv, dof } => {
            if w0_inv.nrows() != m {
                return Err(Error::Config(format!("Wishart scale matrix is not {m}x{m}")));
            }
            cov += w0_inv;
            cov.ger(creal(T::one()), r, &r.conjugate(), creal(T::one()));
            Ok((hermitianize(&cov), T::lit(*dof as f64 + 1.0)))
        }
    }
}

/// How the noise seen by the per-user linear estimates is modelled.
#[derive(Debug, Clone, Copy)]
pub enum NoiseModel<'a, T: Real> {
    /// Known `N0` (conv-VB).
    Known(T),
    /// Postulated scalar precision `⟨γ⟩` (MF-VB).
    Gamma(&'a GammaPrior<T>),
    /// Postulated precision matrix `W` (LMMSE-VB).
    Wishart(&'a WishartPrior<T>),
}

/// Variational state carried between sweeps.
#[derive(Debug, Clone, PartialEq)]
pub struct VbState<T: Real> {
    pub soft_means: CVector<T>,
    pub soft_vars: Vec<T>,
    /// Maintained `y − H⟨x⟩`.
    pub residual: CVector<T>,
}

impl<T: Real> VbState<T> {
    /// Prior means and variances.
    pub fn from_prior(y: &CVector<T>, h: &CMatrix<T>, c: &Constellation<T>) -> Self {
        let k = h.ncols();
        Self::from_moments(y, h, CVector::from_element(k, c.mean()), vec![c.variance(); k])
    }

    pub fn from_moments(y: &CVector<T>, h: &CMatrix<T>, soft_means: CVector<T>, soft_vars: Vec<T>) -> Self {
        let residual = y - h * &soft_means;
        Self { soft_means, soft_vars, residual }
    }
}

/// What one sweep produced.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepReport<T: Real> {
    pub z: CVector<T>,
    pub z_noise: Vec<T>,
    pub noise_level: T,
    pub max_change: T,
}

/// One Gauss-Seidel sweep over `order`, updating `state` in place.
pub fn vb_sweep<T: Real>(
    model: NoiseModel<'_, T>,
    state: &mut VbState<T>,
    h: &CMatrix<T>,
    c: &Constellation<T>,
    order: &[usize],
) -> Result<SweepReport<T>> {
    let (m, k) = h.shape();
    let norms = column_norms_sq(h);
    let noise_cap = T::one() / T::lit(SIGMA2_FLOOR);

    // Combining vectors g_i with z_i = x̂_i + g_iᴴr/d_i and noise 1/(s·d_i).
    let (combiners, denoms, noise_scale, noise_level): (Option<CMatrix<T>>, Vec<T>, T, T) = match model {
        NoiseModel::Known(n0) => (None, norms.clone(), T::one() / n0, n0),
        NoiseModel::Gamma(prior) => {
            let e = residual_energy(state.residual.norm_squared(), &norms, &state.soft_means, &state.soft_vars, &[]);
            let gamma = prior.posterior_mean(m, e);
            (None, norms.clone(), gamma, T::one() / gamma)
        }
        NoiseModel::Wishart(prior) => {
            let (cov, scale) = postulated_covariance(h, &state.residual, &state.soft_vars, prior)?;
            let g = cholesky_solve(&cholesky(cov, "postulated noise covariance")?, h).map(|z| z.scale(scale));
            let d: Vec<T> = (0..k).map(|i| h.column(i).dotc(&g.column(i)).re).collect();
            let level = state.residual.norm_squared() / T::lit(m as f64);
            (Some(g), d, T::one(), level)
        }
    };

    let mut z = state.soft_means.clone();
    let mut z_noise = vec![noise_cap; k];
    let mut max_change = T::zero();
    for &i in order {
        let d = denoms[i];
        let old = state.soft_means[i];
        let (zi, noise) = if d > T::zero() && norms[i] > T::zero() {
            let proj = match &combiners {
                None => h.column(i).dotc(&state.residual),
                Some(g) => g.column(i).dotc(&state.residual),
            };
            (old + proj.unscale(d), T::one() / (noise_scale * d))
        } else {
            (old, noise_cap)
        };
        let (mu, v) = c.posterior_moments(zi, noise);
        state.residual.axpy(old - mu, &h.column(i), creal(T::one()));
        state.soft_means[i] = mu;
        state.soft_vars[i] = v;
        z[i] = zi;
        z_noise[i] = noise;
        max_change = max_change.max(cabs(mu - old));
    }
    Ok(SweepReport { z, z_noise, noise_level, max_change })
}

fn run_vb<T: Real>(
    model: NoiseModel<'_, T>,
    y: &CVector<T>,
    h: &CMatrix<T>,
    c: &Constellation<T>,
    cfg: &DetectorConfig,
) -> Result<DetectorOutput<T>> {
    let order = cfg.order(h.ncols());
    let mut state = VbState::from_prior(y, h, c);
    let mut tracer = Tracer::new(cfg);
    let mut last = None;
    let mut iters = 0;
    for _ in 0..cfg.max_iters {
        let rep = vb_sweep(model, &mut state, h, c, &order)?;
        iters += 1;
        tracer.push(|| TraceEntry {
            soft_means: state.soft_means.clone(),
            soft_vars: state.soft_vars.clone(),
            hard_symbols: map_decisions(&rep.z, &rep.z_noise, c),
            z: rep.z.clone(),
            z_noise: rep.z_noise.clone(),
            noise_level: rep.noise_level,
            residual: Some(state.residual.clone()),
        });
        let done = cfg.converged(rep.max_change);
        last = Some(rep);
        if done {
            break;
        }
    }
    let rep = last.expect("at least one sweep");
    let hard_symbols = map_decisions(&rep.z, &rep.z_noise, c);
    Ok(DetectorOutput {
        soft_means: state.soft_means,
        soft_vars: state.soft_vars,
        hard_symbols,
        iters_used: iters,
        diverged: false,
        trace: tracer.finish(),
    })
}

/// Conventional VB with known `N0`: `z_i = ⟨x_i⟩ + h_iᴴr/‖h_i‖²` at noise
/// level `N0/‖h_i‖²`.
pub fn conv_vb_detect<T: Real>(
    y: &CVector<T>,
    h: &CMatrix<T>,
    n0: T,
    c: &Constellation<T>,
    cfg: &DetectorConfig,
) -> Result<DetectorOutput<T>> {
    check_inputs(y, h, Some(n0), cfg)?;
    run_vb(NoiseModel::Known(n0), y, h, c, cfg)
}

/// MF-VB: as conv-VB but with noise level `1/(⟨γ⟩‖h_i‖²)`, where `⟨γ⟩` is
/// re-estimated once per sweep from the expected residual energy.
pub fn mf_vb_detect<T: Real>(
    y: &CVector<T>,
    h: &CMatrix<T>,
    c: &Constellation<T>,
    cfg: &DetectorConfig,
    prior: &GammaPrior<T>,
) -> Result<DetectorOutput<T>> {
    check_inputs(y, h, None, cfg)?;
    run_vb(NoiseModel::Gamma(prior), y, h, c, cfg)
}

/// LMMSE-VB: `z_i = ⟨x_i⟩ + h_iᴴW r/(h_iᴴW h_i)` at noise level
/// `1/(h_iᴴW h_i)`, with `W` re-estimated once per sweep.
pub fn lmmse_vb_detect<T: Real>(
    y: &CVector<T>,
    h: &CMatrix<T>,
    c: &Constellation<T>,
    cfg: &DetectorConfig,
    prior: &WishartPrior<T>,
) -> Result<DetectorOutput<T>> {
    check_inputs(y, h, None, cfg)?;
    run_vb(NoiseModel::Wishart(prior), y, h, c, cfg)
}
