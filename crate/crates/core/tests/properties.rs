use num_complex::Complex64;
use proptest::prelude::*;

use kam_core::config::RunConfig;
use kam_core::diophantine::{estimate_gamma, verify_diophantine};
use kam_core::driver::IterationSchedule;
use kam_core::embedding::Embedding;
use kam_core::fourier::{l1, lex_nonneg, FourierMap};
use kam_core::report;
use kam_core::smoothing::{self, BernsteinCaps, ScalarFn};

const GOLDEN: f64 = 1.618_033_988_749_895;

/// A real map with `m` components on `T^n`, coefficients drawn from `coeffs` in mode order.
fn map_from(n: usize, m: usize, kmax: usize, coeffs: &[(f64, f64)], zero_average: bool) -> FourierMap {
    let mut f = FourierMap::zeros(n, m, kmax);
    let mut it = coeffs.iter().cycle();
    for k in f.modes() {
        if !lex_nonneg(&k) {
            continue;
        }
        let cs: Vec<Complex64> = (0..m)
            .map(|_| {
                let &(re, im) = it.next().unwrap();
                if l1(&k) == 0 {
                    Complex64::new(if zero_average { 0.0 } else { re }, 0.0)
                } else {
                    Complex64::new(re, im) * 0.8f64.powi(l1(&k) as i32)
                }
            })
            .collect();
        f.set_mode(&k, &cs);
    }
    f
}

fn coeffs() -> impl Strategy<Value = Vec<(f64, f64)>> {
    prop::collection::vec((-1.0f64..1.0, -1.0f64..1.0), 1..40)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn torus_text_round_trip_is_exact(c in coeffs(), kmax in 1usize..8) {
        let f = map_from(1, 2, kmax, &c, false);
        let back = FourierMap::from_text(&f.to_text()).unwrap();
        prop_assert_eq!(&back, &f);
        let k = Embedding::new(f).unwrap();
        prop_assert_eq!(Embedding::from_text(&k.to_text()).unwrap(), k);
    }

    #[test]
    fn maps_are_real_on_the_real_torus(c in coeffs(), theta in 0.0f64..1.0) {
        let f = map_from(2, 1, 4, &c, false);
        let z = f.eval(&[Complex64::new(theta, 0.0), Complex64::new(0.3 * theta, 0.0)]);
        prop_assert!(z[0].im.abs() < 1e-13);
        prop_assert!(f.reality_defect() == 0.0);
    }

    #[test]
    fn strip_norm_is_monotone_and_subadditive(a in coeffs(), b in coeffs(), rho in 0.0f64..0.3, d in 0.0f64..0.2) {
        let f = map_from(1, 2, 6, &a, false);
        let g = map_from(1, 2, 6, &b, false);
        prop_assert!(f.norm(rho) <= f.norm(rho + d));
        prop_assert!(f.add(&g).norm(rho) <= (f.norm(rho) + g.norm(rho)) * (1.0 + 1e-14));
        let sup = (0..64).map(|j| f.eval_real(&[j as f64 / 64.0])).flatten().fold(0.0f64, |m, x| m.max(x.abs()));
        prop_assert!(sup <= f.norm(0.0) * (1.0 + 1e-14));
    }

    #[test]
    fn small_divisor_solve_inverts_the_derivative(c in coeffs(), two_d in any::<bool>()) {
        let (n, omega) = if two_d { (2, vec![1.0, GOLDEN]) } else { (1, vec![GOLDEN]) };
        let v = map_from(n, 1, 8, &c, true);
        let u = v.solve_small_divisor(&omega, Default::default()).unwrap();
        prop_assert!(u.average()[0].abs() == 0.0);
        prop_assert!(u.directional_derivative(&omega).sub(&v).norm(0.0) < 1e-12);
    }

    #[test]
    fn gamma_estimate_scales_and_is_consistent(c in 0.1f64..10.0, kmax in 2usize..200) {
        let w = [1.0, GOLDEN];
        let (g, _) = estimate_gamma(&w, 1.2, kmax).unwrap();
        let (gc, _) = estimate_gamma(&[c, c * GOLDEN], 1.2, kmax).unwrap();
        prop_assert!((gc - c * g).abs() <= 1e-12 * c * g);
        prop_assert!(verify_diophantine(&w, g * (1.0 - 1e-12), 1.2, kmax).unwrap().pass);
        let (g2, _) = estimate_gamma(&w, 1.2, 2 * kmax).unwrap();
        prop_assert!(g2 <= g);
    }

    #[test]
    fn smooth_step_is_a_monotone_unit_profile(a in -0.5f64..1.5, b in -0.5f64..1.5) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        let (s_lo, s_hi) = (smoothing::smooth_step(lo), smoothing::smooth_step(hi));
        prop_assert!((0.0..=1.0).contains(&s_lo) && (0.0..=1.0).contains(&s_hi));
        prop_assert!(s_lo <= s_hi);
    }

    #[test]
    fn bernstein_reproduces_affine_functions(a in -3.0f64..3.0, b in -3.0f64..3.0, c in -3.0f64..3.0, m in 1usize..12) {
        let f: ScalarFn = std::sync::Arc::new(move |z: &[f64]| a + b * z[0] + c * z[1]);
        let (lo, hi) = ([-1.0, 0.5], [2.0, 1.5]);
        let p = smoothing::bernstein_approximant(&f, &lo, &hi, &[m, m + 1], BernsteinCaps::default(), Default::default()).unwrap();
        for (x, y) in [(-1.0, 0.5), (0.3, 0.9), (2.0, 1.5), (1.1, 0.7)] {
            prop_assert!((p.eval(&[x, y]) - f(&[x, y])).abs() < 1e-12);
        }
    }

    #[test]
    fn schedule_respects_its_envelopes(rho in 0.01f64..1.0, r in 1e-4f64..0.1, l in 4.0f64..8.0, sigma in 0.1f64..3.0) {
        let s = IterationSchedule::new(rho, r, l, sigma);
        let q = s.ratio();
        for k in 1..15 {
            prop_assert!(s.r_k(k) <= s.lemma2_envelope(k) * (1.0 + 1e-12));
            prop_assert!(s.drift_bound(k) <= r / (1.0 - q) * (1.0 + 1e-12));
            prop_assert!(s.rho_k(k + 1) < s.rho_k(k) && s.increment_strip(k) <= s.rho_k(k));
        }
    }

    #[test]
    fn cutoff_stays_in_the_unit_interval(q in -0.2f64..1.2, dp in -0.1f64..0.1, amp in 0.0f64..0.004) {
        let mut p = Embedding::flat(1, 4, &[GOLDEN]).periodic().clone();
        p.set_mode(&[1], &[Complex64::new(0.0, -amp), Complex64::new(amp, 0.0)]);
        let k0 = Embedding::new(p).unwrap();
        let psi = smoothing::build_cutoff(&k0, 0.01).unwrap();
        let v = psi.value(&[q, GOLDEN + dp]);
        prop_assert!((0.0..=1.0).contains(&v));
        let on = k0.eval_real(&[q]);
        prop_assert_eq!(psi.value(&on), 1.0);
    }

    #[test]
    fn overrides_land_in_the_config(rho in 0.01f64..1.0, seed in 0..=i64::MAX as u64) {
        let o = vec![("solver.rho".to_string(), format!("{rho:?}")), ("orbit.seed".to_string(), seed.to_string())];
        let cfg = RunConfig::parse_with_overrides("", &o).unwrap();
        prop_assert_eq!(cfg.solver.rho, rho);
        prop_assert_eq!(cfg.orbit.seed, seed);
        prop_assert_eq!(RunConfig::parse(&cfg.to_toml()).unwrap(), cfg);
    }

    #[test]
    fn reports_reemit_to_a_fixed_point(xs in prop::collection::vec(-1e300f64..1e300, 0..20), tag in "[a-z]{1,8}") {
        let doc = report::document(&tag, None, serde_json::json!({ "values": xs, tag.clone(): xs.len() })).unwrap();
        let text = report::render(&doc);
        prop_assert_eq!(report::reemit(&text).unwrap(), text);
    }
}
