//! Channel realizations, spatial covariances, pilot transmission and MMSE
//! channel estimation.
//!
//! Covariances are normalized so that `Tr R_i = 1` (diagonal entries `1/M`),
//! which makes `E‖h_i‖² = 1` and the SNR relation `N0 = K / (M · SNR)`.

use nalgebra::DMatrix;
use num_complex::Complex;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::linalg::{add_scaled_identity, cholesky, cholesky_solve, hermitian_sqrt, hermitianize, matmul, Op};
use crate::scalar::{cabs, cplx, creal, CMatrix, CVector, Real};

/// Hermitian PSD covariance, either `s·I` or a dense matrix.
#[derive(Debug, Clone, PartialEq)]
pub enum Covariance<T: Real> {
    Scaled(T),
    Dense(CMatrix<T>),
}

impl<T: Real> Covariance<T> {
    pub fn to_dense(&self, m: usize) -> CMatrix<T> {
        match self {
            Covariance::Scaled(s) => CMatrix::from_diagonal_element(m, m, creal(*s)),
            Covariance::Dense(r) => r.clone(),
        }
    }

    pub fn trace(&self, m: usize) -> T {
        match self {
            Covariance::Scaled(s) => *s * T::lit(m as f64),
            Covariance::Dense(r) => r.diagonal().iter().fold(T::zero(), |a, z| a + z.re),
        }
    }

    /// Force the general dense representation.
    pub fn densified(&self, m: usize) -> Self {
        Covariance::Dense(self.to_dense(m))
    }
}

/// True channel together with the statistics it was drawn from.
#[derive(Debug, Clone)]
pub struct ChannelScenario<T: Real> {
    /// `M × K` channel, column `i` is user `i`.
    pub h: CMatrix<T>,
    /// Per-user covariance `R_i`.
    pub r: Vec<Covariance<T>>,
    /// Noise variance (linear).
    pub n0: T,
}

impl<T: Real> ChannelScenario<T> {
    pub fn m(&self) -> usize {
        self.h.nrows()
    }

    pub fn k(&self) -> usize {
        self.h.ncols()
    }

    /// System load `K / M`.
    pub fn beta(&self) -> T {
        T::lit(self.k() as f64 / self.m() as f64)
    }
}

/// One draw from `CN(0, var)`.
pub fn complex_gaussian<T: Real, R: Rng + ?Sized>(rng: &mut R, var: T) -> Complex<T> {
    let s = (var * T::lit(0.5)).sqrt();
    let re: f64 = rng.sample(StandardNormal);
    let im: f64 = rng.sample(StandardNormal);
    cplx(T::lit(re) * s, T::lit(im) * s)
}

/// `rows × cols` matrix of i.i.d. `CN(0, var)` entries, filled column-major.
pub fn gaussian_matrix<T: Real, R: Rng + ?Sized>(
    rows: usize,
    cols: usize,
    var: T,
    rng: &mut R,
) -> CMatrix<T> {
    let mut out = CMatrix::zeros(rows, cols);
    for j in 0..cols {
        for i in 0..rows {
            out[(i, j)] = complex_gaussian(rng, var);
        }
    }
    out
}

/// Length-`n` vector of i.i.d. `CN(0, var)` entries.
pub fn gaussian_vector<T: Real, R: Rng + ?Sized>(n: usize, var: T, rng: &mut R) -> CVector<T> {
    CVector::from_fn(n, |_, _| complex_gaussian(rng, var))
}

/// Noise variance for an SNR in dB under the trace normalization.
pub fn noise_variance_for_snr_db<T: Real>(m: usize, k: usize, snr_db: f64) -> T {
    T::lit(k as f64 / (m as f64 * 10f64.powf(snr_db / 10.0)))
}

/// I.i.d. Rayleigh channel: entries `CN(0, 1/M)`, `R_i = (1/M)·I`.
pub fn gen_iid_channel<T: Real, R: Rng + ?Sized>(
    m: usize,
    k: usize,
    n0: T,
    rng: &mut R,
) -> ChannelScenario<T> {
    let var = T::one() / T::lit(m as f64);
    ChannelScenario { h: gaussian_matrix(m, k, var, rng), r: vec![Covariance::Scaled(var); k], n0 }
}

/// Exponential correlation model `[R]_{kl} = α^{k-l}/M` for `k ≥ l`, Hermitian
/// above the diagonal.
pub fn exp_corr_covariance<T: Real>(m: usize, alpha: Complex<T>) -> Result<CMatrix<T>> {
    if !(cabs(alpha) < T::one()) {
        return Err(Error::Config(format!("correlation coefficient must satisfy |alpha| < 1, got {alpha}")));
    }
    let inv_m = T::one() / T::lit(m as f64);
    let mut r = CMatrix::zeros(m, m);
    for k in 0..m {
        for l in 0..=k {
            let v = alpha.powu((k - l) as u32).scale(inv_m);
            r[(k, l)] = v;
            r[(l, k)] = v.conj();
        }
    }
    Ok(r)
}

/// Correlated Rayleigh generator with precomputed square-root factors.
#[derive(Debug, Clone)]
pub struct CorrelatedChannel<T: Real> {
    m: usize,
    r: Vec<Covariance<T>>,
    factors: Vec<Option<CMatrix<T>>>,
    shared: Option<CMatrix<T>>,
}

impl<T: Real> CorrelatedChannel<T> {
    pub fn new(m: usize, r: Vec<Covariance<T>>) -> Result<Self> {
        if r.is_empty() {
            return Err(Error::Config("no users".into()));
        }
        let mut factors = Vec::with_capacity(r.len());
        for (i, cov) in r.iter().enumerate() {
            match cov {
                Covariance::Scaled(s) => {
                    if !(*s >= T::zero()) {
                        return Err(Error::Decomposition(format!("R_{i} has negative scale")));
                    }
                    factors.push(None);
                }
                Covariance::Dense(d) => {
                    if d.nrows() != m || d.ncols() != m {
                        return Err(Error::Config(format!("R_{i} is not {m}x{m}")));
                    }
                    factors.push(Some(hermitian_sqrt(d)?));
                }
            }
        }
        let shared = match (&r[0], &factors[0]) {
            (Covariance::Dense(first), Some(f)) if r.iter().all(|c| matches!(c, Covariance::Dense(d) if d == first)) => {
                Some(f.clone())
            }
            _ => None,
        };
        Ok(Self { m, r, factors, shared })
    }

    pub fn covariances(&self) -> &[Covariance<T>] {
        &self.r
    }

    pub fn draw<R: Rng + ?Sized>(&self, n0: T, rng: &mut R) -> ChannelScenario<T> {
        let k = self.r.len();
        let g = gaussian_matrix(self.m, k, T::one(), rng);
        let h = if let Some(f) = &self.shared {
            matmul(f, Op::N, &g, Op::N)
        } else {
            let mut h = CMatrix::zeros(self.m, k);
            for i in 0..k {
                let col = match (&self.r[i], &self.factors[i]) {
                    (Covariance::Scaled(s), _) => g.column(i) * creal(s.sqrt()),
                    (_, Some(f)) => f * g.column(i),
                    _ => unreachable!(),
                };
                h.set_column(i, &col);
            }
            h
        };
        ChannelScenario { h, r: self.r.clone(), n0 }
    }
}

/// `h_i = R_i^{1/2} g_i` with independent standard complex Gaussian `g_i`.
pub fn gen_correlated_channel<T: Real, R: Rng + ?Sized>(
    m: usize,
    r: Vec<Covariance<T>>,
    n0: T,
    rng: &mut R,
) -> Result<ChannelScenario<T>> {
    Ok(CorrelatedChannel::new(m, r)?.draw(n0, rng))
}

/// Orthogonal pilot block with `X·Xᴴ = P·T·I`.
#[derive(Debug, Clone)]
pub struct PilotMatrix<T: Real> {
    /// `K × Tp`; row `i` is the pilot of user `i`.
    pub x: CMatrix<T>,
    /// Pilot transmit power `Pp`.
    pub power: T,
    /// Pilot length `Tp`.
    pub slots: usize,
}

impl<T: Real> PilotMatrix<T> {
    /// `Pp · Tp`, the pilot energy per user.
    pub fn energy(&self) -> T {
        self.power * T::lit(self.slots as f64)
    }
}

/// First `K` rows of a `Tp`-point DFT matrix scaled by `√Pp`.
pub fn make_orthogonal_pilots<T: Real>(k: usize, tp: usize, pp: T) -> Result<PilotMatrix<T>> {
    if tp < k {
        return Err(Error::Config(format!("pilot length {tp} is shorter than the number of users {k}")));
    }
    if !(pp > T::zero()) || !pp.is_finite() {
        return Err(Error::Config(format!("pilot power must be positive, got {pp}")));
    }
    let amp = pp.sqrt();
    let x = DMatrix::from_fn(k, tp, |row, col| {
        // Reduce the phase index exactly before converting to an angle.
        let idx = (row * col) % tp;
        let phi = -2.0 * std::f64::consts::PI * idx as f64 / tp as f64;
        cplx(T::lit(phi.cos()) * amp, T::lit(phi.sin()) * amp)
    });
    Ok(PilotMatrix { x, power: pp, slots: tp })
}

/// Received pilot block `Y_p = H·X_p + N_p`.
pub fn simulate_pilot_phase<T: Real, R: Rng + ?Sized>(
    scenario: &ChannelScenario<T>,
    pilots: &PilotMatrix<T>,
    rng: &mut R,
) -> Result<CMatrix<T>> {
    if pilots.x.nrows() != scenario.k() {
        return Err(Error::Config(format!(
            "pilot matrix has {} rows but there are {} users",
            pilots.x.nrows(),
            scenario.k()
        )));
    }
    let mut yp = &scenario.h * &pilots.x;
    if scenario.n0 > T::zero() {
        yp += gaussian_matrix(scenario.m(), pilots.slots, scenario.n0, rng);
    }
    Ok(yp)
}

/// MMSE channel estimate `Ĥ` plus per-user error covariances `K_i`.
#[derive(Debug, Clone, PartialEq)]
pub struct EstimationContext<T: Real> {
    pub h_hat: CMatrix<T>,
    pub k_err: Vec<Covariance<T>>,
    pub pp: T,
    pub tp: usize,
}

impl<T: Real> EstimationContext<T> {
    pub fn m(&self) -> usize {
        self.h_hat.nrows()
    }

    pub fn k(&self) -> usize {
        self.h_hat.ncols()
    }
}

/// Per-user MMSE estimate from the pilot correlation `Y_p x_{p,i}*`.
///
/// Scaled-identity covariances use the closed forms
/// `ĥ_i = Y_p x* / (PpTp + N0/s)` and `K_i = (PpTp/N0 + 1/s)⁻¹ I`.
/// Dense covariances use the inversion-free forms
/// `ĥ_i = R_i (PpTp R_i + N0 I)⁻¹ Y_p x*` and `K_i = N0 R_i (PpTp R_i + N0 I)⁻¹`,
/// which stay valid for singular `R_i`.
pub fn mmse_channel_estimate<T: Real>(
    yp: &CMatrix<T>,
    pilots: &PilotMatrix<T>,
    r: &[Covariance<T>],
    n0: T,
) -> Result<EstimationContext<T>> {
    let m = yp.nrows();
    let k = pilots.x.nrows();
    if yp.ncols() != pilots.slots || r.len() != k {
        return Err(Error::Config("pilot, observation and covariance dimensions disagree".into()));
    }
    if !(n0 > T::zero()) || !n0.is_finite() {
        return Err(Error::NumericInput(format!("noise variance must be positive, got {n0}")));
    }
    let ep = pilots.energy();
    let corr = matmul(yp, Op::N, &pilots.x, Op::H);
    let mut h_hat = CMatrix::zeros(m, k);
    let mut k_err = Vec::with_capacity(k);
    for (i, cov) in r.iter().enumerate() {
        let v = corr.column(i);
        match cov {
            Covariance::Scaled(s) => {
                if *s > T::zero() {
                    let gain = T::one() / (ep + n0 / *s);
                    h_hat.set_column(i, &(v * creal(gain)));
                    k_err.push(Covariance::Scaled(T::one() / (ep / n0 + T::one() / *s)));
                } else {
                    k_err.push(Covariance::Scaled(T::zero()));
                }
            }
            Covariance::Dense(rd) => {
                if rd.nrows() != m {
                    return Err(Error::Config(format!("R_{i} is not {m}x{m}")));
                }
                let mut s = rd.map(|z| z.scale(ep));
                add_scaled_identity(&mut s, n0);
                let chol = cholesky(hermitianize(&s), "PpTp·R + N0·I")?;
                let u = chol.solve(&v.into_owned());
                h_hat.set_column(i, &(rd * u));
                let sr = cholesky_solve(&chol, rd);
                let kd = sr.adjoint().map(|z| z.scale(n0));
                k_err.push(Covariance::Dense(hermitianize(&kd)));
            }
        }
    }
    Ok(EstimationContext { h_hat, k_err, pp: pilots.power, tp: pilots.slots })
}
