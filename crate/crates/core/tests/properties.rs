//! Property tests over randomly drawn inputs.

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use vbmimo::channels::{
    exp_corr_covariance, gaussian_vector, gen_iid_channel, make_orthogonal_pilots, mmse_channel_estimate,
    simulate_pilot_phase, Covariance,
};
use vbmimo::detectors::{
    conv_vb_detect, detect, expected_residual_sq, lmmse_vb_detect, mf_vb_detect, ColumnCovariance, Csi, GammaPrior,
    WishartPrior,
};
use vbmimo::harness::{read_csv, write_csv, SweepRecord};
use vbmimo::linalg::{hermitian_defect, min_eigenvalue};
use vbmimo::{
    denoise, make_constellation, map_slice, CMatrix64, CVector64, Complex64, Constellation64, DetectorConfig,
    DetectorKind, Scheme,
};

fn alphabet(sel: u8) -> Constellation64 {
    match sel % 4 {
        0 => make_constellation(Scheme::Qpsk, 4).unwrap(),
        1 => make_constellation(Scheme::Qam, 16).unwrap(),
        2 => make_constellation(Scheme::Psk, 8).unwrap(),
        _ => make_constellation(Scheme::Qam, 64).unwrap(),
    }
}

struct System {
    h: CMatrix64,
    y: CVector64,
    n0: f64,
    c: Constellation64,
}

fn system(m: usize, k: usize, snr_db: f64, sel: u8, seed: u64) -> System {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let c = alphabet(sel);
    let n0 = vbmimo::channels::noise_variance_for_snr_db(m, k, snr_db);
    let s = gen_iid_channel(m, k, n0, &mut rng);
    let x = CVector64::from_iterator(k, (0..k).map(|_| c.point(rng.random_range(0..c.len()))));
    let y = &s.h * x + gaussian_vector(m, n0, &mut rng);
    System { h: s.h, y, n0, c }
}

fn complex() -> impl Strategy<Value = Complex64> {
    (-3.0..3.0f64, -3.0..3.0f64).prop_map(|(a, b)| Complex64::new(a, b))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn denoiser_output_is_a_valid_posterior(z in complex(), log_s2 in -8.0..4.0f64, sel in 0u8..4) {
        let c = alphabet(sel);
        let d = denoise(z, 10f64.powf(log_s2), &c).unwrap();
        let total: f64 = d.pmf.iter().sum();
        prop_assert!((total - 1.0).abs() < 1e-12);
        prop_assert!(d.variance >= 0.0 && d.variance <= c.max_energy() + 1e-12);
        prop_assert!(d.mean.norm() <= c.max_energy().sqrt() + 1e-12);
        let second: f64 = d.pmf.iter().zip(c.points()).map(|(p, a)| p * a.norm_sqr()).sum();
        prop_assert!((second - d.mean.norm_sqr() - d.variance).abs() < 1e-10);
    }

    #[test]
    fn small_noise_map_agrees_with_pmf_argmax(z in complex(), sel in 0u8..4) {
        let c = alphabet(sel);
        let s2 = 1e-6;
        prop_assert_eq!(map_slice(z, s2, &c).unwrap(), denoise(z, s2, &c).unwrap().argmax());
    }

    #[test]
    fn expected_residual_decomposes(seed in 0u64..1000, m in 1usize..6, k in 1usize..5) {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = CMatrix64::from_fn(m, k, |_, _| Complex64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)));
        let y = CVector64::from_fn(m, |_, _| Complex64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)));
        let xm = CVector64::from_fn(k, |_, _| Complex64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)));
        let xv: Vec<f64> = (0..k).map(|_| rng.random_range(0.0..1.0)).collect();
        let traces: Vec<f64> = (0..k).map(|_| rng.random_range(0.0..0.5)).collect();
        let det = expected_residual_sq(&y, &a, &[], &xm, &xv).unwrap();
        let cols: Vec<ColumnCovariance<f64>> = traces.iter().map(|&t| ColumnCovariance::Trace(t)).collect();
        let rnd = expected_residual_sq(&y, &a, &cols, &xm, &xv).unwrap();
        let extra: f64 = (0..k).map(|i| (xm[i].norm_sqr() + xv[i]) * traces[i]).sum();
        prop_assert!(det >= 0.0);
        prop_assert!((rnd - det - extra).abs() <= 1e-12 * (1.0 + rnd));
        let direct = (&y - &a * &xm).norm_squared()
            + (0..k).map(|i| a.column(i).norm_squared() * xv[i]).sum::<f64>();
        prop_assert!((det - direct).abs() <= 1e-12 * (1.0 + det));
    }

    #[test]
    fn vb_residuals_stay_consistent(seed in 0u64..1000, m in 2usize..10, kk in 1usize..10, snr in 0.0..25.0f64, sel in 0u8..2) {
        let k = kk.min(m);
        let s = system(m, k, snr, sel, seed);
        let cfg = DetectorConfig::default().with_trace();
        let outs = [
            conv_vb_detect(&s.y, &s.h, s.n0, &s.c, &cfg).unwrap(),
            mf_vb_detect(&s.y, &s.h, &s.c, &cfg, &GammaPrior::default()).unwrap(),
            lmmse_vb_detect(&s.y, &s.h, &s.c, &cfg, &WishartPrior::Improper).unwrap(),
        ];
        for out in &outs {
            for e in out.trace.as_ref().unwrap() {
                let exact = &s.y - &s.h * &e.soft_means;
                let r = e.residual.as_ref().unwrap();
                prop_assert!((r - exact).norm() <= 1e-8 * (s.y.norm() + 1.0));
                prop_assert!(e.noise_level > 0.0);
            }
            prop_assert!(out.soft_vars.iter().all(|&v| v >= 0.0));
            prop_assert!(out.iters_used >= 1 && out.iters_used <= cfg.max_iters);
        }
    }

    #[test]
    fn outputs_follow_a_user_permutation(seed in 0u64..1000, m in 2usize..9, kk in 2usize..9, snr in 5.0..20.0f64) {
        use rand::seq::SliceRandom;
        let k = kk.min(m);
        let s = system(m, k, snr, 0, seed);
        let mut perm: Vec<usize> = (0..k).collect();
        perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 0xabc));
        let mut inverse = vec![0; k];
        for (j, &p) in perm.iter().enumerate() {
            inverse[p] = j;
        }
        let hp = CMatrix64::from_fn(m, k, |r, j| s.h[(r, perm[j])]);
        for kind in [DetectorKind::Lmmse, DetectorKind::ConvVb, DetectorKind::MfVb, DetectorKind::LmmseVb, DetectorKind::MfSic, DetectorKind::LmmseSic] {
            let base = DetectorConfig::default();
            let a = detect(kind, &s.y, Csi::Perfect { h: &s.h, n0: s.n0 }, &s.c, &base).unwrap();
            let cfg = if kind.is_sequential() { base.clone().with_order(inverse.clone()) } else { base.clone() };
            let b = detect(kind, &s.y, Csi::Perfect { h: &hp, n0: s.n0 }, &s.c, &cfg).unwrap();
            for (j, &p) in perm.iter().enumerate() {
                prop_assert!((b.soft_means[j] - a.soft_means[p]).norm() <= 1e-6 * (1.0 + a.soft_means[p].norm()), "{}", kind);
                prop_assert_eq!(b.hard_symbols[j], a.hard_symbols[p]);
            }
        }
    }

    #[test]
    fn detectors_are_deterministic(seed in 0u64..1000, snr in 0.0..20.0f64) {
        let s = system(6, 4, snr, 1, seed);
        for kind in &DetectorKind::ALL[..8] {
            let csi = Csi::Perfect { h: &s.h, n0: s.n0 };
            let cfg = DetectorConfig::default().with_trace();
            prop_assert_eq!(detect(*kind, &s.y, csi, &s.c, &cfg).unwrap(), detect(*kind, &s.y, csi, &s.c, &cfg).unwrap());
        }
    }

    #[test]
    fn exp_corr_is_hermitian_psd(m in 1usize..16, mag in 0.0..0.99f64, phase in 0.0..6.3f64) {
        let r = exp_corr_covariance(m, Complex64::from_polar(mag, phase)).unwrap();
        prop_assert!(hermitian_defect(&r) <= 1e-15);
        prop_assert!(min_eigenvalue(&r) >= -1e-10);
        prop_assert!((r.trace().re - 1.0).abs() < 1e-12);
    }

    #[test]
    fn estimation_error_covariances_are_psd(seed in 0u64..1000, m in 1usize..8, k in 1usize..5, extra in 0usize..4, log_n0 in -3.0..1.0f64, mag in 0.0..0.95f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n0 = 10f64.powf(log_n0);
        let r = Covariance::Dense(exp_corr_covariance(m, Complex64::from_polar(mag, 1.0)).unwrap());
        let gen = vbmimo::channels::CorrelatedChannel::new(m, vec![r; k]).unwrap();
        let s = gen.draw(n0, &mut rng);
        let pilots = make_orthogonal_pilots(k, k + extra, 1.0).unwrap();
        let yp = simulate_pilot_phase(&s, &pilots, &mut rng).unwrap();
        let est = mmse_channel_estimate(&yp, &pilots, gen.covariances(), n0).unwrap();
        for ke in &est.k_err {
            let d = ke.to_dense(m);
            prop_assert!(hermitian_defect(&d) <= 1e-12);
            prop_assert!(min_eigenvalue(&d) >= -1e-10);
            prop_assert!(d.trace().re <= 1.0 + 1e-12);
        }
    }

    #[test]
    fn csv_round_trip_is_exact(rows in prop::collection::vec((0u64..1000, 1u64..1000, -20.0..40.0f64, 0.0..1e5f64), 0..6)) {
        let records: Vec<SweepRecord> = rows
            .iter()
            .enumerate()
            .map(|(i, &(err, trials, snr, wall))| SweepRecord {
                detector: DetectorKind::ALL[i % 9].name().to_string(),
                m: 8,
                k: 4,
                modulation: "qpsk".into(),
                channel: "exp_corr(0.5+0.5j)".into(),
                csir: "pilot:pp=1:tp=4".into(),
                snr_db: snr,
                trials,
                symbols_sent: 4 * trials,
                symbol_errors: err.min(4 * trials),
                ser: err.min(4 * trials) as f64 / (4 * trials) as f64,
                mean_iters: snr.abs() / 3.0,
                wall_ms: wall,
            })
            .collect();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.csv");
        write_csv(&records, &path).unwrap();
        prop_assert_eq!(read_csv(&path).unwrap(), records);
    }
}
