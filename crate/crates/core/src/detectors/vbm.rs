//! MF-VB-M: joint variational inference of symbols, channel and noise
//! precision from a pilot-based channel estimate.
//!
//! The prior on each channel column is `CN(ĥ_i, K_i)` from the MMSE
//! estimator. Every iteration runs a channel sweep, a symbol sweep and one
//! precision update. When `K_i = k·I` the channel update needs no matrix
//! algebra beyond vector operations; otherwise `K_i` is eigendecomposed once
//! per call and every `Σ_i` is applied in that basis.

use crate::channels::{Covariance, EstimationContext};
use crate::constellation::{Constellation, SIGMA2_FLOOR};
use crate::detectors::vb::{residual_energy, GammaPrior};
use crate::detectors::{check_inputs, map_decisions, DetectorConfig, DetectorOutput, TraceEntry, Tracer};
use crate::error::{Error, Result};
use crate::linalg::column_norms_sq;
use crate::scalar::{creal, CMatrix, CVector, Real};

/// Detection result plus the refined channel belief.
#[derive(Debug, Clone, PartialEq)]
pub struct VbmOutput<T: Real> {
    pub detection: DetectorOutput<T>,
    /// Variational channel means `⟨h_i⟩` as columns.
    pub channel_means: CMatrix<T>,
    /// Variational channel covariances `Σ_i`.
    pub channel_covs: Vec<Covariance<T>>,
    /// Final `⟨γ⟩`.
    pub gamma: T,
}

/// Error covariance prepared for repeated `(γa I + K⁻¹)⁻¹` applications.
enum Prepared<T: Real> {
    /// `K = k·I`, stored as the precision `1/k`.
    Scaled(T),
    /// `K = U diag(λ) Uᴴ`.
    Eigen { u: CMatrix<T>, lambda: Vec<T> },
}

const SINGULAR_RATIO: f64 = 1e-14;

impl<T: Real> Prepared<T> {
    fn new(i: usize, k: &Covariance<T>, m: usize) -> Result<Self> {
        match k {
            Covariance::Scaled(s) => {
                if !(*s > T::zero()) || !s.is_finite() {
                    return Err(Error::Precondition(format!("error covariance K_{i} is singular")));
                }
                Ok(Prepared::Scaled(T::one() / *s))
            }
            Covariance::Dense(d) => {
                if d.nrows() != m || d.ncols() != m {
                    return Err(Error::Config(format!("K_{i} is not {m}x{m}")));
                }
                let eig = crate::linalg::hermitianize(d).symmetric_eigen();
                let lambda: Vec<T> = eig.eigenvalues.iter().cloned().collect();
                let lmax = lambda.iter().fold(T::zero(), |a, &b| a.max(b));
                let lmin = lambda.iter().fold(lmax, |a, &b| a.min(b));
                if !(lmax > T::zero()) || lmin <= T::lit(SINGULAR_RATIO) * lmax {
                    return Err(Error::Precondition(format!("error covariance K_{i} is singular")));
                }
                Ok(Prepared::Eigen { u: eig.eigenvectors, lambda })
            }
        }
    }

    fn trace(&self, m: usize) -> T {
        match self {
            Prepared::Scaled(p) => T::lit(m as f64) / *p,
            Prepared::Eigen { lambda, .. } => lambda.iter().fold(T::zero(), |a, &b| a + b),
        }
    }

    /// Posterior `(⟨h⟩, Tr Σ)` for data weight `w = γ⟨|x|²⟩` and data term
    /// `b = γ v x̂*`: `Σ = (wI + K⁻¹)⁻¹`, `⟨h⟩ = Σ(b + K⁻¹ĥ)`.
    fn update(&self, w: T, b: &CVector<T>, h_hat: &CVector<T>) -> (CVector<T>, T) {
        match self {
            Prepared::Scaled(p) => {
                let s = T::one() / (w + *p);
                let mean = (b + h_hat.map(|z| z.scale(*p))).map(|z| z.scale(s));
                (mean, s * T::lit(b.len() as f64))
            }
            Prepared::Eigen { u, lambda } => {
                let mut cb = u.ad_mul(b);
                let ch = u.ad_mul(h_hat);
                let mut tr = T::zero();
                for (j, &l) in lambda.iter().enumerate() {
                    let denom = T::one() + w * l;
                    cb[j] = (cb[j].scale(l) + ch[j]).unscale(denom);
                    tr += l / denom;
                }
                (u * cb, tr)
            }
        }
    }

    fn covariance(&self, w: T) -> Covariance<T> {
        match self {
            Prepared::Scaled(p) => Covariance::Scaled(T::one() / (w + *p)),
            Prepared::Eigen { u, lambda } => {
                let mut scaled = u.clone();
                for (j, &l) in lambda.iter().enumerate() {
                    scaled.column_mut(j).scale_mut(l / (T::one() + w * l));
                }
                Covariance::Dense(crate::linalg::hermitianize(&(scaled * u.adjoint())))
            }
        }
    }
}

/// MF-VB-M detection. Trace entries record the denoiser inputs `z̃_i` and
/// `ζ̃_i²` and `noise_level = 1/⟨γ⟩` as used in that iteration's sweeps.
///
/// The precision is initialized from the expected residual energy of the
/// initial state, since the first channel sweep already needs it.
pub fn mf_vb_m_detect<T: Real>(
    y: &CVector<T>,
    ctx: &EstimationContext<T>,
    c: &Constellation<T>,
    cfg: &DetectorConfig,
    prior: &GammaPrior<T>,
) -> Result<VbmOutput<T>> {
    let h_hat = &ctx.h_hat;
    check_inputs(y, h_hat, None, cfg)?;
    let (m, k) = h_hat.shape();
    if ctx.k_err.len() != k {
        return Err(Error::Config(format!("{} error covariances for {k} users", ctx.k_err.len())));
    }
    let prepared = ctx.k_err.iter().enumerate().map(|(i, kc)| Prepared::new(i, kc, m)).collect::<Result<Vec<_>>>()?;
    let order = cfg.order(k);
    let hat_cols: Vec<CVector<T>> = (0..k).map(|i| h_hat.column(i).into_owned()).collect();

    let mut hm = h_hat.clone();
    let mut x_hat = CVector::from_element(k, c.mean());
    let mut vars = vec![c.variance(); k];
    let mut tr_sigma: Vec<T> = prepared.iter().map(|p| p.trace(m)).collect();
    let mut r = y - &hm * &x_hat;
    let mut gamma = prior.posterior_mean(m, residual_energy(r.norm_squared(), &column_norms_sq(&hm), &x_hat, &vars, &tr_sigma));

    let mut z = x_hat.clone();
    let mut z_noise = vec![T::one() / T::lit(SIGMA2_FLOOR); k];
    let mut tracer = Tracer::new(cfg);
    let mut iters = 0;
    let mut diverged = false;

    for _ in 0..cfg.max_iters {
        let x_prev = x_hat.clone();
        let gamma_used = gamma;
        for &i in &order {
            let xi = x_hat[i];
            let v = &r + hm.column(i) * xi;
            let b = v.map(|e| (e * xi.conj()).scale(gamma));
            let w = gamma * (xi.norm_sqr() + vars[i]);
            let (mean, tr) = prepared[i].update(w, &b, &hat_cols[i]);
            r = v - &mean * xi;
            hm.set_column(i, &mean);
            tr_sigma[i] = tr;
        }
        for &i in &order {
            let hi = hm.column(i);
            let n = hi.norm_squared();
            let total = n + tr_sigma[i];
            let old = x_hat[i];
            let (zt, noise) = if total > T::zero() {
                ((hi.dotc(&r) + creal(n) * old).unscale(total), T::one() / (gamma * total))
            } else {
                (old, T::one() / T::lit(SIGMA2_FLOOR))
            };
            let (mu, var) = c.posterior_moments(zt, noise);
            r.axpy(old - mu, &hi, creal(T::one()));
            x_hat[i] = mu;
            vars[i] = var;
            z[i] = zt;
            z_noise[i] = noise;
        }
        let e = residual_energy(r.norm_squared(), &column_norms_sq(&hm), &x_hat, &vars, &tr_sigma);
        let gamma_new = prior.posterior_mean(m, e);
        if !(gamma_new.is_finite() && crate::linalg::all_finite(&x_hat) && crate::linalg::all_finite(&r)) {
            diverged = true;
            iters += 1;
            break;
        }
        gamma = gamma_new;
        iters += 1;
        let change = crate::detectors::max_abs_change(&x_hat, &x_prev);
        tracer.push(|| TraceEntry {
            soft_means: x_hat.clone(),
            soft_vars: vars.clone(),
            hard_symbols: map_decisions(&z, &z_noise, c),
            z: z.clone(),
            z_noise: z_noise.clone(),
            noise_level: T::one() / gamma_used,
            residual: Some(r.clone()),
        });
        if cfg.converged(change) {
            break;
        }
    }

    let hard_symbols = map_decisions(&z, &z_noise, c);
    let channel_covs = (0..k).map(|i| prepared[i].covariance(gamma * (x_hat[i].norm_sqr() + vars[i]))).collect();
    Ok(VbmOutput {
        detection: DetectorOutput {
            soft_means: x_hat,
            soft_vars: vars,
            hard_symbols,
            iters_used: iters,
            diverged,
            trace: tracer.finish(),
        },
        channel_means: hm,
        channel_covs,
        gamma,
    })
}
