#![allow(clippy::field_reassign_with_default)]

use proptest::prelude::*;
use sideband_core::analysis::fit_sidebands;
use sideband_core::physics::*;
use sideband_core::spectra::SpectrumModel;
use sideband_core::synth::{noiseless_spectrum, SynthConfig};
use sideband_core::ExperimentConfig;

/// Devices with κ/ω_m between 0.01 and 10. Closer to the unresolved limit s
/// approaches 1 and s/(1 − s) itself stops being accurate to 1e-12.
fn device() -> impl Strategy<Value = SystemParams> {
    (1e5f64..1e8, -2.0f64..1.0, 1e-2f64..10.0, 0.01f64..1.0)
        .prop_map(|(w, k, g, e)| SystemParams::from_hz(w * 10f64.powf(k), w, g, e).unwrap())
}

fn log_uniform(lo: f64, hi: f64) -> impl Strategy<Value = f64> {
    (lo.ln()..hi.ln()).prop_map(f64::exp)
}

proptest! {
    #[test]
    fn ratio_inversion_round_trips(n in log_uniform(1e-3, 1e6), s in 0.01f64..0.99) {
        let r = s * (1.0 + 1.0 / n);
        let back = occupation_from_ratio(r, s).unwrap().value().unwrap();
        prop_assert!((back / n - 1.0).abs() < 1e-9, "n={n} back={back}");
    }

    #[test]
    fn backaction_limit_matches_ratio_identity(p in device(), frac in 0.2f64..5.0) {
        let delta = -frac * p.omega_m;
        let s = sideband_ratio(delta, &p).unwrap();
        let n_ba = backaction_limit(delta, &p).unwrap();
        prop_assert!((n_ba - s / (1.0 - s)).abs() <= 1e-12 * n_ba.max(1.0), "n_ba={n_ba} s={s}");
    }

    #[test]
    fn rate_equation_is_bounded_and_monotone(
        n0 in log_uniform(1.0, 1e6),
        n_ba in log_uniform(1e-3, 1e2),
        g0 in log_uniform(1e-2, 1e2),
        g1 in log_uniform(1e-3, 1e6),
        g2 in log_uniform(1e-3, 1e6),
    ) {
        let (lo, hi) = (n0.min(n_ba), n0.max(n_ba));
        let a = steady_state_occupation(n0, g0, n_ba, g1.min(g2));
        let b = steady_state_occupation(n0, g0, n_ba, g1.max(g2));
        let tol = 1e-12 * hi;
        prop_assert!(a >= lo - tol && a <= hi + tol);
        prop_assert!(b >= lo - tol && b <= hi + tol);
        // Stronger drive always moves the mode toward n_ba.
        if n0 > n_ba {
            prop_assert!(b <= a + tol);
        } else {
            prop_assert!(b >= a - tol);
        }
    }

    #[test]
    fn net_damping_equals_optical_rate(p in device(), frac in 0.1f64..3.0, g in log_uniform(1e-2, 1e5), n in log_uniform(1e-3, 1e5)) {
        let gamma = hz_to_angular(g);
        let point = CoolingPoint::new(&p, -frac * p.omega_m, gamma).unwrap();
        let r = raman_rates(&point, n).unwrap();
        // Γ₋n̄ − Γ₊(n̄+1) = Γ_opt (n̄ − n_ba)
        let lhs = r.antistokes - r.stokes;
        let rhs = gamma * (n - point.n_ba);
        prop_assert!((lhs - rhs).abs() <= 1e-9 * (r.antistokes + r.stokes + gamma));
    }

    #[test]
    fn temperature_round_trips(t in log_uniform(1e-3, 1e3), w in log_uniform(1e3, 1e9)) {
        let omega = hz_to_angular(w);
        let n0 = thermal_occupation(t, omega).unwrap();
        let back = temperature_from_occupation(n0, omega).unwrap();
        prop_assert!((back / t - 1.0).abs() < 1e-13);
    }

    #[test]
    fn config_round_trips(seed in any::<u64>(), d in -5e6f64..-1e3, lo in 0.1f64..10.0, count in 1usize..40) {
        let mut c = ExperimentConfig::default();
        c.seed = seed;
        c.detunings_hz = vec![d, d * 1.1];
        c.gamma_opt_grid_hz = sideband_core::config::log_grid(lo, 3e4, count);
        let back: ExperimentConfig = serde_json::from_str(&c.to_json()).unwrap();
        prop_assert_eq!(back.hash(), c.hash());
        prop_assert_eq!(back, c);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    /// Multiplying a spectrum by a constant (floor included) leaves the
    /// inferred occupation unchanged.
    #[test]
    fn inferred_occupation_is_scale_invariant(k in log_uniform(1e-3, 1e3), g in log_uniform(10.0, 3e4)) {
        let p = SystemParams::membrane_device();
        let point = CoolingPoint::new(&p, hz_to_angular(-1.62e6), hz_to_angular(g)).unwrap();
        let n0 = thermal_occupation(0.36, p.omega_m).unwrap();
        let n = steady_state_occupation(n0, p.gamma_0, point.n_ba, point.gamma_opt);
        let model = SpectrumModel::from_physics(&p, &point, n, 0.0).unwrap();
        let spec = noiseless_spectrum(&model, &SynthConfig { n_avg: 1e4, ..SynthConfig::default() }).unwrap();
        let base = fit_sidebands(&spec, None).unwrap();
        let scaled = fit_sidebands(&spec.scaled(k), None).unwrap();
        let s = point.s_ratio;
        let n1 = occupation_from_ratio(base.ratio(), s).unwrap().value().unwrap();
        let n2 = occupation_from_ratio(scaled.ratio(), s).unwrap().value().unwrap();
        prop_assert!((n2 / n1 - 1.0).abs() < 1e-6, "k={k} n1={n1} n2={n2}");
    }
}
