//! LMMSE, AMP and OAMP/VAMP detectors.

use crate::constellation::Constellation;
use crate::detectors::{
    check_inputs, map_decisions, max_abs_change, mean_of, DetectorConfig, DetectorOutput, TraceEntry, Tracer,
};
use crate::error::{Error, Result};
use crate::linalg::{add_scaled_identity, cholesky, cholesky_inverse, cholesky_solve, hermitianize, matmul, Op};
use crate::scalar::{creal, CMatrix, CVector, Real};

const NU2_FLOOR: f64 = 1e-12;
const ETA_DENOM_FLOOR: f64 = 1e-6;

fn clamp_nu2<T: Real>(nu2: T, prior_var: T) -> T {
    let lo = T::lit(NU2_FLOOR);
    let hi = (prior_var * T::lit(10.0)).max(lo);
    if nu2.is_finite() {
        nu2.max(lo).min(hi)
    } else {
        hi
    }
}

/// One-shot LMMSE estimate `(HᴴH + N0 I)⁻¹Hᴴy` followed by nearest-point
/// slicing. `soft_vars` holds the diagonal of the error covariance
/// `N0 (HᴴH + N0 I)⁻¹`.
pub fn lmmse_detect<T: Real>(
    y: &CVector<T>,
    h: &CMatrix<T>,
    n0: T,
    c: &Constellation<T>,
    cfg: &DetectorConfig,
) -> Result<DetectorOutput<T>> {
    check_inputs(y, h, Some(n0), cfg)?;
    let mut gram = matmul(h, Op::H, h, Op::N);
    add_scaled_identity(&mut gram, n0);
    let chol = cholesky(hermitianize(&gram), "HᴴH + N0·I")?;
    let x_hat = chol.solve(&(h.adjoint() * y));
    let inv = cholesky_inverse(&chol);
    let soft_vars: Vec<T> = inv.diagonal().iter().map(|d| (d.re * n0).max(T::zero())).collect();
    let hard_symbols: Vec<usize> = x_hat.iter().map(|&z| c.nearest_index(z)).collect();
    let mut tracer = Tracer::new(cfg);
    tracer.push(|| TraceEntry {
        soft_means: x_hat.clone(),
        soft_vars: soft_vars.clone(),
        hard_symbols: hard_symbols.clone(),
        z: x_hat.clone(),
        z_noise: soft_vars.clone(),
        noise_level: mean_of(&soft_vars),
        residual: None,
    });
    Ok(DetectorOutput { soft_means: x_hat, soft_vars, hard_symbols, iters_used: 1, diverged: false, trace: tracer.finish() })
}

/// Approximate message passing with the MMSE denoiser and Onsager-corrected
/// residual. Non-finite state halts the loop and sets `diverged`; the output
/// then reflects the last finite iterate.
pub fn amp_detect<T: Real>(
    y: &CVector<T>,
    h: &CMatrix<T>,
    n0: T,
    c: &Constellation<T>,
    cfg: &DetectorConfig,
) -> Result<DetectorOutput<T>> {
    check_inputs(y, h, Some(n0), cfg)?;
    let (m, k) = h.shape();
    let beta = T::lit(k as f64 / m as f64);
    let prior_var = c.variance();
    let hh = h.adjoint();

    let mut x_hat = CVector::from_element(k, c.mean());
    let mut vars = vec![prior_var; k];
    let mut r = y.clone();
    let mut nu2 = prior_var;
    let mut z = x_hat.clone();
    let mut sigma2 = n0 + beta * nu2;
    let mut tracer = Tracer::new(cfg);
    let mut iters = 0;
    let mut diverged = false;

    for _ in 0..cfg.max_iters {
        let z_new = &x_hat + &hh * &r;
        let s2 = n0 + beta * nu2;
        let mut x_new = CVector::zeros(k);
        let mut v_new = vec![T::zero(); k];
        for i in 0..k {
            let (mu, g) = c.posterior_moments(z_new[i], s2);
            x_new[i] = mu;
            v_new[i] = g;
        }
        let nu2_new = clamp_nu2(mean_of(&v_new), prior_var);
        let onsager = creal(beta * nu2_new / s2);
        let r_new = y - h * &x_new + &r * onsager;
        if !(s2.is_finite() && crate::linalg::all_finite(&z_new) && crate::linalg::all_finite(&r_new)) {
            diverged = true;
            break;
        }
        iters += 1;
        let change = max_abs_change(&x_new, &x_hat);
        z = z_new;
        sigma2 = s2;
        x_hat = x_new;
        vars = v_new;
        nu2 = nu2_new;
        r = r_new;
        tracer.push(|| TraceEntry {
            soft_means: x_hat.clone(),
            soft_vars: vars.clone(),
            hard_symbols: z.iter().map(|&zi| c.map_index(zi, sigma2)).collect(),
            z: z.clone(),
            z_noise: vec![sigma2; k],
            noise_level: sigma2,
            residual: Some(r.clone()),
        });
        if cfg.converged(change) {
            break;
        }
    }
    let hard_symbols = z.iter().map(|&zi| c.map_index(zi, sigma2)).collect();
    Ok(DetectorOutput { soft_means: x_hat, soft_vars: vars, hard_symbols, iters_used: iters, diverged, trace: tracer.finish() })
}

/// Normalized LMMSE filter `A = (K / Tr{ÂH})·Â` with
/// `Â = ν²(ν²HᴴH + N0 I)⁻¹Hᴴ`, so that `Tr{AH} = K`.
pub fn oamp_linear_filter<T: Real>(h: &CMatrix<T>, n0: T, nu2: T) -> Result<CMatrix<T>> {
    let k = h.ncols();
    let mut s = matmul(h, Op::H, h, Op::N).map(|z| z.scale(nu2));
    add_scaled_identity(&mut s, n0);
    let chol = cholesky(hermitianize(&s), "ν²HᴴH + N0·I")?;
    let a_hat = cholesky_solve(&chol, &h.adjoint()).map(|z| z.scale(nu2));
    let tr = (&a_hat * h).trace().re;
    if !(tr > T::zero()) {
        return Err(Error::Decomposition("Tr{ÂH} is not positive".into()));
    }
    Ok(a_hat.map(|z| z.scale(T::lit(k as f64) / tr)))
}

/// OAMP/VAMP with the LMMSE filter and divergence-free MMSE denoiser.
///
/// Each iteration works in the `K`-dimensional domain: with
/// `S = ν²G + N0 I` and `G = HᴴH`, the filter is `A = c·ν²S⁻¹Hᴴ`, so
/// `AH = c·ν²S⁻¹G` and `‖A‖_F² = c²ν⁴ Tr{S⁻¹GS⁻¹}`.
///
/// `soft_means`/`soft_vars` are the posterior moments `F`, `G` of the last
/// linear estimate; the divergence-free iterate drives the recursion only.
pub fn oamp_detect<T: Real>(
    y: &CVector<T>,
    h: &CMatrix<T>,
    n0: T,
    c: &Constellation<T>,
    cfg: &DetectorConfig,
) -> Result<DetectorOutput<T>> {
    check_inputs(y, h, Some(n0), cfg)?;
    let (m, k) = h.shape();
    let kf = T::lit(k as f64);
    let mf = T::lit(m as f64);
    let prior_var = c.variance();
    let gram = hermitianize(&matmul(h, Op::H, h, Op::N));
    let hy = h.adjoint() * y;
    let tr_g = gram.trace().re;
    if !(tr_g > T::zero()) {
        return Err(Error::NumericInput("channel matrix is zero".into()));
    }

    let mut x_it = CVector::from_element(k, c.mean());
    let mut nu2 = clamp_nu2((y.norm_squared() - mf * n0) / tr_g, prior_var);
    let mut post_mean = x_it.clone();
    let mut post_var = vec![prior_var; k];
    let mut z = x_it.clone();
    let mut sigma2 = prior_var;
    let mut tracer = Tracer::new(cfg);
    let mut iters = 0;
    let mut diverged = false;

    for _ in 0..cfg.max_iters {
        let mut s = gram.map(|v| v.scale(nu2));
        add_scaled_identity(&mut s, n0);
        let chol = match cholesky(hermitianize(&s), "ν²HᴴH + N0·I") {
            Ok(ch) => ch,
            Err(_) => {
                diverged = true;
                break;
            }
        };
        // P = ν²S⁻¹G = ÂH, Tr{P} normalizes the filter.
        let sg = cholesky_solve(&chol, &gram);
        let p = sg.map(|v| v.scale(nu2));
        let scale = kf / p.trace().re;
        let ah = p.map(|v| v.scale(scale));
        let z_new = &x_it + chol.solve(&(&hy - &gram * &x_it)).map(|v| v.scale(nu2 * scale));
        // ‖A‖_F² = c²ν⁴ Tr{S⁻¹ G S⁻¹}
        let a_fro = cholesky_solve(&chol, &sg.adjoint()).trace().re * scale * scale * nu2 * nu2;
        let mut i_ah = -ah;
        add_scaled_identity(&mut i_ah, T::one());
        let s2 = (n0 * a_fro + nu2 * i_ah.norm_squared()) / kf;

        let mut f = CVector::zeros(k);
        let mut g = vec![T::zero(); k];
        for i in 0..k {
            let (mu, v) = c.posterior_moments(z_new[i], s2);
            f[i] = mu;
            g[i] = v;
        }
        let eta = g.iter().fold(T::zero(), |a, &b| a + b) / (kf * s2.max(T::lit(crate::constellation::SIGMA2_FLOOR)));
        let mut denom = T::one() - eta;
        if denom.abs() < T::lit(ETA_DENOM_FLOOR) {
            denom = if denom < T::zero() { -T::lit(ETA_DENOM_FLOOR) } else { T::lit(ETA_DENOM_FLOOR) };
        }
        let x_new = (&f - &z_new * creal(eta)).map(|v| v.unscale(denom));
        let resid = y - h * &x_new;
        let nu2_new = clamp_nu2((resid.norm_squared() - mf * n0) / tr_g, prior_var);
        if !(s2.is_finite() && crate::linalg::all_finite(&z_new) && crate::linalg::all_finite(&x_new)) {
            diverged = true;
            break;
        }
        iters += 1;
        let change = max_abs_change(&x_new, &x_it);
        x_it = x_new;
        nu2 = nu2_new;
        z = z_new;
        sigma2 = s2;
        post_mean = f;
        post_var = g;
        tracer.push(|| TraceEntry {
            soft_means: post_mean.clone(),
            soft_vars: post_var.clone(),
            hard_symbols: z.iter().map(|&zi| c.map_index(zi, sigma2)).collect(),
            z: z.clone(),
            z_noise: vec![sigma2; k],
            noise_level: sigma2,
            residual: None,
        });
        if cfg.converged(change) {
            break;
        }
    }
    let hard_symbols = map_decisions(&z, &vec![sigma2; k], c);
    Ok(DetectorOutput {
        soft_means: post_mean,
        soft_vars: post_var,
        hard_symbols,
        iters_used: iters,
        diverged,
        trace: tracer.finish(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channels::{gaussian_vector, gen_iid_channel, noise_variance_for_snr_db};
    use crate::constellation::{make_constellation, Scheme};
    use num_complex::Complex;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    type Cx = Complex<f64>;

    fn qpsk() -> Constellation<f64> {
        make_constellation(Scheme::Qpsk, 4).unwrap()
    }

    fn instance(m: usize, k: usize, snr_db: f64, seed: u64) -> (CMatrix<f64>, CVector<f64>, Vec<usize>, f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = qpsk();
        let n0 = noise_variance_for_snr_db(m, k, snr_db);
        let s = gen_iid_channel(m, k, n0, &mut rng);
        let idx: Vec<usize> = (0..k).map(|_| rng.random_range(0..c.len())).collect();
        let x = CVector::from_iterator(k, idx.iter().map(|&i| c.point(i)));
        let y = &s.h * x + gaussian_vector(m, n0, &mut rng);
        (s.h, y, idx, n0)
    }

    #[test]
    fn lmmse_identity_channel() {
        let c = qpsk();
        let x = CVector::from_vec(vec![c.point(0), c.point(3), c.point(2)]);
        let h = CMatrix::identity(3, 3);
        let out = lmmse_detect(&x, &h, 1e-12, &c, &DetectorConfig::default()).unwrap();
        assert!((out.soft_means - &x).norm() < 1e-10);
        assert_eq!(out.hard_symbols, vec![0, 3, 2]);
    }

    #[test]
    fn lmmse_single_user() {
        let c = qpsk();
        let h = CMatrix::from_column_slice(2, 1, &[Cx::new(0.6, 0.0), Cx::new(0.0, 0.8)]);
        let y = CVector::from_vec(vec![Cx::new(0.3, -0.2), Cx::new(0.1, 0.5)]);
        let n0 = 0.25;
        let out = lmmse_detect(&y, &h, n0, &c, &DetectorConfig::default()).unwrap();
        let expect = h.column(0).dotc(&y) / (1.0 + n0);
        assert!((out.soft_means[0] - expect).norm() < 1e-14);
    }

    #[test]
    fn lmmse_normal_equations() {
        let (h, y, _, n0) = instance(4, 4, 5.0, 1);
        let out = lmmse_detect(&y, &h, n0, &qpsk(), &DetectorConfig::default()).unwrap();
        let mut g = h.adjoint() * &h;
        add_scaled_identity(&mut g, n0);
        let res = g * &out.soft_means - h.adjoint() * &y;
        assert!(res.norm() < 1e-10);
    }

    #[test]
    fn lmmse_rejects_bad_input() {
        let c = qpsk();
        let h = CMatrix::<f64>::identity(2, 2);
        let y = CVector::from_vec(vec![Cx::new(f64::NAN, 0.0), Cx::new(0.0, 0.0)]);
        assert!(matches!(lmmse_detect(&y, &h, 0.1, &c, &DetectorConfig::default()), Err(Error::NumericInput(_))));
        let y = CVector::zeros(2);
        assert!(matches!(lmmse_detect(&y, &h, 0.0, &c, &DetectorConfig::default()), Err(Error::NumericInput(_))));
    }

    #[test]
    fn amp_single_user_recovers() {
        let (h, y, idx, n0) = instance(64, 1, 10.0, 2);
        let out = amp_detect(&y, &h, n0, &qpsk(), &DetectorConfig::default()).unwrap();
        assert_eq!(out.hard_symbols, idx);
    }

    #[test]
    fn zero_observation_is_a_fixed_point() {
        let (h, _, _, n0) = instance(8, 8, 10.0, 3);
        let y = CVector::zeros(8);
        let cfg = DetectorConfig::default().with_max_iters(10).with_tol(0.0).with_trace();
        for out in [amp_detect(&y, &h, n0, &qpsk(), &cfg).unwrap(), oamp_detect(&y, &h, n0, &qpsk(), &cfg).unwrap()] {
            for t in out.trace.unwrap() {
                assert!(t.soft_means.norm() < 1e-12);
            }
        }
    }

    /// Independent transcription of the five AMP update lines.
    fn amp_reference(y: &CVector<f64>, h: &CMatrix<f64>, n0: f64, iters: usize) -> CVector<f64> {
        let c = qpsk();
        let (m, k) = (h.nrows(), h.ncols());
        let beta = k as f64 / m as f64;
        let mut x = vec![Cx::new(0.0, 0.0); k];
        let mut r: Vec<Cx> = y.iter().cloned().collect();
        let mut nu2 = 1.0;
        for _ in 0..iters {
            let sigma2 = n0 + beta * nu2;
            let mut z = vec![Cx::new(0.0, 0.0); k];
            for i in 0..k {
                let mut acc = x[i];
                for a in 0..m {
                    acc += h[(a, i)].conj() * r[a];
                }
                z[i] = acc;
            }
            let mut gsum = 0.0;
            for i in 0..k {
                let w: Vec<f64> = c.points().iter().map(|p| (-(z[i] - p).norm_sqr() / sigma2).exp()).collect();
                let zsum: f64 = w.iter().sum();
                let mean: Cx = c.points().iter().zip(&w).map(|(p, wi)| p * wi).sum::<Cx>() / zsum;
                let e2: f64 = c.points().iter().zip(&w).map(|(p, wi)| p.norm_sqr() * wi).sum::<f64>() / zsum;
                x[i] = mean;
                gsum += e2 - mean.norm_sqr();
            }
            let nu2_new = (gsum / k as f64).clamp(1e-12, 10.0);
            let mut r_new = vec![Cx::new(0.0, 0.0); m];
            for a in 0..m {
                let mut hx = Cx::new(0.0, 0.0);
                for i in 0..k {
                    hx += h[(a, i)] * x[i];
                }
                r_new[a] = y[a] - hx + r[a] * (beta * nu2_new / sigma2);
            }
            r = r_new;
            nu2 = nu2_new;
        }
        CVector::from_vec(x)
    }

    #[test]
    fn amp_matches_reference_loop() {
        let (h, y, _, n0) = instance(8, 8, 12.0, 4);
        let cfg = DetectorConfig::default().with_max_iters(12).with_tol(0.0);
        let out = amp_detect(&y, &h, n0, &qpsk(), &cfg).unwrap();
        assert_eq!(out.iters_used, 12);
        let reference = amp_reference(&y, &h, n0, 12);
        assert!((out.soft_means - reference).norm() < 1e-9);
    }

    #[test]
    fn amp_noise_level_never_below_n0() {
        let (h, y, _, n0) = instance(16, 16, 20.0, 5);
        let out = amp_detect(&y, &h, n0, &qpsk(), &DetectorConfig::default().with_trace()).unwrap();
        for t in out.trace.unwrap() {
            assert!(t.noise_level >= n0);
        }
    }

    #[test]
    fn amp_flags_divergence() {
        let c = qpsk();
        let mut h = CMatrix::<f64>::from_element(4, 4, Cx::new(1e160, 0.0));
        h[(0, 0)] = Cx::new(2e160, 0.0);
        let y = CVector::from_element(4, Cx::new(1e160, 1e160));
        let out = amp_detect(&y, &h, 1.0, &c, &DetectorConfig::default()).unwrap();
        assert!(out.diverged);
        assert!(out.hard_symbols.iter().all(|&i| i < c.len()));
    }

    #[test]
    fn oamp_single_user_recovers() {
        let (h, y, idx, n0) = instance(16, 1, 15.0, 6);
        let out = oamp_detect(&y, &h, n0, &qpsk(), &DetectorConfig::default()).unwrap();
        assert_eq!(out.hard_symbols, idx);
    }

    #[test]
    fn oamp_filter_trace_normalization() {
        let (h, _, _, n0) = instance(8, 8, 12.0, 7);
        for nu2 in [1e-12, 1e-3, 0.3, 1.0, 10.0] {
            let a = oamp_linear_filter(&h, n0, nu2).unwrap();
            assert!(((&a * &h).trace().re - 8.0).abs() < 1e-8);
        }
    }

    #[test]
    fn oamp_first_iteration_matches_direct_filter() {
        let (h, y, _, n0) = instance(8, 8, 12.0, 8);
        let tr = (h.adjoint() * &h).trace().re;
        let nu2 = ((y.norm_squared() - 8.0 * n0) / tr).clamp(1e-12, 10.0);
        let mut s = h.adjoint() * &h * Cx::new(nu2, 0.0);
        add_scaled_identity(&mut s, n0);
        let a_hat = s.try_inverse().unwrap() * h.adjoint() * Cx::new(nu2, 0.0);
        let a = &a_hat * Cx::new(8.0 / (&a_hat * &h).trace().re, 0.0);
        assert!(((&a * &h).trace().re - 8.0).abs() < 1e-10);
        let z = &a * &y;
        let i_ah = CMatrix::identity(8, 8) - &a * &h;
        let sigma2 = (n0 * a.norm_squared() + nu2 * i_ah.norm_squared()) / 8.0;

        let cfg = DetectorConfig::default().with_max_iters(1).with_trace();
        let out = oamp_detect(&y, &h, n0, &qpsk(), &cfg).unwrap();
        let t = &out.trace.unwrap()[0];
        assert!((&t.z - z).norm() < 1e-10);
        assert!((t.noise_level - sigma2).abs() < 1e-10);
        let via_api = oamp_linear_filter(&h, n0, nu2).unwrap();
        assert!((via_api - a).norm() < 1e-10);
    }

    #[test]
    fn oamp_beats_lmmse_on_average() {
        let c = qpsk();
        let mut e_lmmse = 0;
        let mut e_oamp = 0;
        for seed in 0..200 {
            let (h, y, idx, n0) = instance(16, 16, 12.0, 100 + seed);
            e_lmmse += lmmse_detect(&y, &h, n0, &c, &DetectorConfig::default()).unwrap().symbol_errors(&idx);
            e_oamp += oamp_detect(&y, &h, n0, &c, &DetectorConfig::default()).unwrap().symbol_errors(&idx);
        }
        assert!(e_oamp <= e_lmmse, "oamp {e_oamp} vs lmmse {e_lmmse}");
    }

    #[test]
    fn lmmse_permutation_equivariance() {
        let (h, y, _, n0) = instance(6, 4, 8.0, 9);
        let perm = [2, 0, 3, 1];
        let hp = CMatrix::from_fn(6, 4, |r, j| h[(r, perm[j])]);
        let c = qpsk();
        let a = lmmse_detect(&y, &h, n0, &c, &DetectorConfig::default()).unwrap();
        let b = lmmse_detect(&y, &hp, n0, &c, &DetectorConfig::default()).unwrap();
        for j in 0..4 {
            assert!((b.soft_means[j] - a.soft_means[perm[j]]).norm() < 1e-12);
            assert_eq!(b.hard_symbols[j], a.hard_symbols[perm[j]]);
        }
    }

    #[test]
    fn f32_agrees_with_f64() {
        let (h, y, _, n0) = instance(8, 8, 10.0, 10);
        let c32 = make_constellation::<f32>(Scheme::Qpsk, 4).unwrap();
        let h32 = h.map(|z| Complex::new(z.re as f32, z.im as f32));
        let y32 = y.map(|z| Complex::new(z.re as f32, z.im as f32));
        let cfg = DetectorConfig::default().with_max_iters(5).with_tol(0.0);
        let a = lmmse_detect(&y, &h, n0, &qpsk(), &cfg).unwrap();
        let b = lmmse_detect(&y32, &h32, n0 as f32, &c32, &cfg).unwrap();
        for (u, v) in a.soft_means.iter().zip(b.soft_means.iter()) {
            assert!((u.re - v.re as f64).abs() < 1e-4 && (u.im - v.im as f64).abs() < 1e-4);
        }
    }
}
