//! Symbol alphabets with priors, the scalar posterior-mean denoiser and the
//! MAP slicer used by every detector.
//!
//! The denoiser evaluates the discrete posterior
//! `p(a | z; σ²) ∝ p_a · exp(-|z - a|² / σ²)` in the log domain, shifting by
//! the running maximum exponent so that nothing overflows even for dense
//! constellations at very small σ².

use std::fmt;
use std::str::FromStr;

use num_complex::Complex;

use crate::error::{Error, Result};
use crate::scalar::{cplx, czero, Real};

/// Smallest postulated noise variance the denoiser divides by.
pub const SIGMA2_FLOOR: f64 = 1e-30;

/// Constellation family.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Scheme {
    Qpsk,
    Qam,
    Psk,
}

/// A concrete modulation: family plus order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Modulation {
    pub scheme: Scheme,
    pub order: u32,
}

impl Modulation {
    pub const QPSK: Modulation = Modulation { scheme: Scheme::Qpsk, order: 4 };
    pub const QAM16: Modulation = Modulation { scheme: Scheme::Qam, order: 16 };

    pub fn build<T: Real>(self) -> Result<Constellation<T>> {
        make_constellation(self.scheme, self.order)
    }
}

impl fmt::Display for Modulation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.scheme {
            Scheme::Qpsk => write!(f, "qpsk"),
            Scheme::Qam => write!(f, "{}qam", self.order),
            Scheme::Psk => write!(f, "{}psk", self.order),
        }
    }
}

impl FromStr for Modulation {
    type Err = Error;

    /// Accepts `qpsk`, `16qam`, `qam16`, `8psk`, `psk8` (case-insensitive).
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim().to_ascii_lowercase();
        if s == "qpsk" {
            return Ok(Modulation::QPSK);
        }
        let parse = |digits: &str, scheme| {
            digits
                .parse::<u32>()
                .map(|order| Modulation { scheme, order })
                .map_err(|_| Error::Config(format!("unknown modulation '{s}'")))
        };
        let m = if let Some(d) = s.strip_suffix("qam") {
            parse(d, Scheme::Qam)?
        } else if let Some(d) = s.strip_prefix("qam") {
            parse(d, Scheme::Qam)?
        } else if let Some(d) = s.strip_suffix("psk") {
            parse(d, Scheme::Psk)?
        } else if let Some(d) = s.strip_prefix("psk") {
            parse(d, Scheme::Psk)?
        } else {
            return Err(Error::Config(format!("unknown modulation '{s}'")));
        };
        // Validate the order eagerly.
        make_constellation::<f64>(m.scheme, m.order)?;
        Ok(m)
    }
}

/// Discrete symbol alphabet with prior probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct Constellation<T: Real> {
    points: Vec<Complex<T>>,
    priors: Vec<T>,
    log_priors: Vec<T>,
    labels: Vec<u32>,
    label: String,
}

impl<T: Real> Constellation<T> {
    /// Builds an alphabet from explicit points and priors.
    ///
    /// Priors must be nonnegative and sum to one; points must be distinct.
    /// Bit labels default to the point index.
    pub fn new(points: Vec<Complex<T>>, priors: Vec<T>, label: impl Into<String>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::Config("empty constellation".into()));
        }
        if points.len() != priors.len() {
            return Err(Error::Config(format!(
                "{} points but {} priors",
                points.len(),
                priors.len()
            )));
        }
        let mut total = T::zero();
        for &p in &priors {
            if !p.is_finite() || p < T::zero() {
                return Err(Error::Config("priors must be finite and nonnegative".into()));
            }
            total += p;
        }
        if (total - T::one()).abs() > T::lit(1e-12).max(T::default_epsilon() * T::lit(16.0)) {
            return Err(Error::Config(format!("priors sum to {total}, not 1")));
        }
        for (i, a) in points.iter().enumerate() {
            if !(a.re.is_finite() && a.im.is_finite()) {
                return Err(Error::Config("non-finite constellation point".into()));
            }
            if points[..i].iter().any(|b| b == a) {
                return Err(Error::Config("constellation points must be distinct".into()));
            }
        }
        let log_priors = priors.iter().map(|&p| p.ln()).collect();
        let labels = (0..points.len() as u32).collect();
        Ok(Self { points, priors, log_priors, labels, label: label.into() })
    }

    /// Same points and labels, different priors.
    pub fn with_priors(&self, priors: Vec<T>) -> Result<Self> {
        let mut c = Self::new(self.points.clone(), priors, self.label.clone())?;
        c.labels = self.labels.clone();
        Ok(c)
    }

    fn with_labels(mut self, labels: Vec<u32>) -> Self {
        debug_assert_eq!(labels.len(), self.points.len());
        self.labels = labels;
        self
    }

    pub fn points(&self) -> &[Complex<T>] {
        &self.points
    }

    pub fn priors(&self) -> &[T] {
        &self.priors
    }

    /// Gray bit labels (index order matches `points`).
    pub fn bit_labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn point(&self, index: usize) -> Complex<T> {
        self.points[index]
    }

    /// Prior mean `Σ p_a a`.
    pub fn mean(&self) -> Complex<T> {
        self.points
            .iter()
            .zip(&self.priors)
            .fold(czero(), |acc, (a, &p)| acc + a.scale(p))
    }

    /// Prior second moment `Σ p_a |a|²`.
    pub fn energy(&self) -> T {
        self.points
            .iter()
            .zip(&self.priors)
            .fold(T::zero(), |acc, (a, &p)| acc + p * a.norm_sqr())
    }

    /// Prior variance `E|x|² - |E x|²`.
    pub fn variance(&self) -> T {
        (self.energy() - self.mean().norm_sqr()).max(T::zero())
    }

    pub fn max_energy(&self) -> T {
        self.points.iter().fold(T::zero(), |m, a| m.max(a.norm_sqr()))
    }

    /// Posterior mean and variance of `x` given `z = x + CN(0, σ²)`.
    ///
    /// Allocation-free streaming log-sum-exp; this is the hot path of every
    /// iterative detector. Inputs are assumed finite.
    #[inline]
    pub fn posterior_moments(&self, z: Complex<T>, sigma2: T) -> (Complex<T>, T) {
        let inv = T::one() / sigma2.max(T::lit(SIGMA2_FLOOR));
        let mut best = T::neg_inf();
        let mut wsum = T::zero();
        let mut msum = czero::<T>();
        let mut esum = T::zero();
        for (a, &lp) in self.points.iter().zip(&self.log_priors) {
            let e = lp - (z - a).norm_sqr() * inv;
            if !(e > T::neg_inf()) {
                continue;
            }
            if e > best {
                let rescale = (best - e).exp();
                wsum *= rescale;
                msum = msum.scale(rescale);
                esum *= rescale;
                best = e;
            }
            let w = (e - best).exp();
            wsum += w;
            msum += a.scale(w);
            esum += w * a.norm_sqr();
        }
        if !(wsum > T::zero()) {
            // Every exponent underflowed to -inf: fall back to the MAP point.
            let idx = self.nearest_index(z);
            return (self.points[idx], T::zero());
        }
        let mean = msum.unscale(wsum);
        let var = (esum / wsum - mean.norm_sqr()).max(T::zero());
        (mean, var)
    }

    /// Nearest point by Euclidean distance, ties to the lowest index.
    pub fn nearest_index(&self, z: Complex<T>) -> usize {
        let mut best = 0;
        let mut best_d = T::max_value().unwrap_or_else(T::one);
        for (i, a) in self.points.iter().enumerate() {
            let d = (z - a).norm_sqr();
            if d < best_d {
                best_d = d;
                best = i;
            }
        }
        best
    }

    /// MAP decision `argmax_a (ln p_a − |z − a|²/σ²)`, ties to the lowest
    /// index. Inputs are assumed finite.
    #[inline]
    pub fn map_index(&self, z: Complex<T>, sigma2: T) -> usize {
        let inv = T::one() / sigma2.max(T::lit(SIGMA2_FLOOR));
        let mut best = 0;
        let mut best_e = T::neg_inf();
        for (i, (a, &lp)) in self.points.iter().zip(&self.log_priors).enumerate() {
            let e = lp - (z - a).norm_sqr() * inv;
            if e > best_e {
                best_e = e;
                best = i;
            }
        }
        if best_e == T::neg_inf() {
            return self.nearest_index(z);
        }
        best
    }
}

/// Posterior over the alphabet for one scalar observation.
#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserResult<T: Real> {
    pub pmf: Vec<T>,
    pub mean: Complex<T>,
    pub variance: T,
}

impl<T: Real> DenoiserResult<T> {
    /// Most probable point, ties to the lowest index.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &p) in self.pmf.iter().enumerate() {
            if p > self.pmf[best] {
                best = i;
            }
        }
        best
    }
}

/// Standard Gray-labelled constellation with unit average energy and uniform
/// priors.
pub fn make_constellation<T: Real>(scheme: Scheme, order: u32) -> Result<Constellation<T>> {
    let uniform = |n: usize| vec![T::one() / T::lit(n as f64); n];
    match scheme {
        Scheme::Qpsk => {
            if order != 4 {
                return Err(Error::Config(format!("QPSK has order 4, got {order}")));
            }
            let s = T::lit(std::f64::consts::FRAC_1_SQRT_2);
            let points = vec![cplx(s, s), cplx(-s, s), cplx(-s, -s), cplx(s, -s)];
            Ok(Constellation::new(points, uniform(4), "qpsk")?.with_labels(vec![0, 1, 3, 2]))
        }
        Scheme::Qam => {
            let side = match order {
                4 => 2u32,
                16 => 4,
                64 => 8,
                _ => {
                    return Err(Error::Config(format!(
                        "unsupported QAM order {order} (supported: 4, 16, 64)"
                    )))
                }
            };
            let bits = side.trailing_zeros();
            let scale = T::one() / T::lit(2.0 * (order as f64 - 1.0) / 3.0).sqrt();
            let offset = side as f64 - 1.0;
            let mut points = Vec::with_capacity(order as usize);
            let mut labels = Vec::with_capacity(order as usize);
            for i in 0..side {
                for q in 0..side {
                    let re = T::lit(2.0 * i as f64 - offset) * scale;
                    let im = T::lit(2.0 * q as f64 - offset) * scale;
                    points.push(cplx(re, im));
                    labels.push((gray(i) << bits) | gray(q));
                }
            }
            Ok(Constellation::new(points, uniform(order as usize), format!("{order}qam"))?
                .with_labels(labels))
        }
        Scheme::Psk => {
            if order < 2 {
                return Err(Error::Config(format!("PSK order must be >= 2, got {order}")));
            }
            let points = (0..order)
                .map(|k| {
                    let phi = 2.0 * std::f64::consts::PI * k as f64 / order as f64;
                    cplx(T::lit(phi.cos()), T::lit(phi.sin()))
                })
                .collect();
            let labels = (0..order).map(gray).collect();
            Ok(Constellation::new(points, uniform(order as usize), format!("{order}psk"))?
                .with_labels(labels))
        }
    }
}

fn gray(k: u32) -> u32 {
    k ^ (k >> 1)
}

fn check_inputs<T: Real>(z: Complex<T>, sigma2: T) -> Result<()> {
    if !(z.re.is_finite() && z.im.is_finite()) {
        return Err(Error::NumericInput(format!("non-finite observation {z}")));
    }
    if !sigma2.is_finite() {
        return Err(Error::NumericInput(format!("non-finite noise variance {sigma2}")));
    }
    if sigma2 < T::zero() {
        return Err(Error::NumericInput(format!("negative noise variance {sigma2}")));
    }
    Ok(())
}

/// Posterior pmf, mean `F(z, σ²)` and variance `G(z, σ²)` of a symbol
/// observed as `z = x + CN(0, σ²)`.
pub fn denoise<T: Real>(z: Complex<T>, sigma2: T, c: &Constellation<T>) -> Result<DenoiserResult<T>> {
    check_inputs(z, sigma2)?;
    let inv = T::one() / sigma2.max(T::lit(SIGMA2_FLOOR));
    let exponents: Vec<T> = c
        .points
        .iter()
        .zip(&c.log_priors)
        .map(|(a, &lp)| lp - (z - a).norm_sqr() * inv)
        .collect();
    let top = exponents.iter().fold(T::neg_inf(), |m, &e| m.max(e));
    let mut pmf: Vec<T> = if top == T::neg_inf() {
        let mut one_hot = vec![T::zero(); c.len()];
        one_hot[c.nearest_index(z)] = T::one();
        one_hot
    } else {
        exponents.iter().map(|&e| (e - top).exp()).collect()
    };
    let total = pmf.iter().fold(T::zero(), |s, &w| s + w);
    for w in &mut pmf {
        *w /= total;
    }
    let mean = c
        .points
        .iter()
        .zip(&pmf)
        .fold(czero(), |acc, (a, &w)| acc + a.scale(w));
    let second = c
        .points
        .iter()
        .zip(&pmf)
        .fold(T::zero(), |acc, (a, &w)| acc + w * a.norm_sqr());
    let variance = (second - mean.norm_sqr()).max(T::zero());
    Ok(DenoiserResult { pmf, mean, variance })
}

/// MAP symbol index for a scalar observation.
pub fn map_slice<T: Real>(z: Complex<T>, sigma2: T, c: &Constellation<T>) -> Result<usize> {
    check_inputs(z, sigma2)?;
    Ok(c.map_index(z, sigma2))
}
