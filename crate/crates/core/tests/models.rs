use permex::fitting::{fit, FitBounds, FitOptions, ModelKind};
use permex::models::{
    add_rician_noise, ball_sphere_shells, cexi_shells, neuman_adc, BallSphereParams, CexiParams, DEFAULT_M_MAX,
};
use permex::sequence::{PgseProtocol, SignalSet};
use permex::Execution;
use proptest::prelude::*;

#[test]
fn long_pulse_limit_of_the_sphere_series() {
    // δ ≫ R²/D: ln E = −(16/175) γ²g² R⁴ δ / D, so ADC = 16 R⁴ / (175 D δ (Δ − δ/3))
    let (r, d, small, big): (f64, f64, f64, f64) = (1.0, 2.0, 20.0, 40.0);
    let expect = 16.0 * r.powi(4) / (175.0 * d * small * (big - small / 3.0));
    let adc = neuman_adc(big, small, r, d, DEFAULT_M_MAX).unwrap();
    assert!((adc / expect - 1.0).abs() < 0.02, "{adc} vs {expect}");
}

#[test]
fn rician_mean_at_zero_signal() {
    let proto = PgseProtocol::new(vec![10.0, 20.0], 4.0, vec![1.0, 2.0, 3.0], 24).unwrap();
    let zero = SignalSet::isotropic(&proto, |_, _| 0.0);
    let sigma = 1.0 / 20.0;
    let mut sum = 0.0;
    let mut n = 0usize;
    for seed in 0..700 {
        let noisy = add_rician_noise(&zero, 20.0, seed).unwrap();
        sum += noisy.values.iter().sum::<f64>();
        n += noisy.values.len();
    }
    let mean = sum / n as f64;
    let expect = sigma * (std::f64::consts::PI / 2.0).sqrt();
    assert!(n >= 100_000);
    assert!((mean / expect - 1.0).abs() < 0.01, "{mean} vs {expect}");
}

fn fit_clean(model: ModelKind, truth: &[f64]) -> Vec<f64> {
    let proto = PgseProtocol::standard();
    let shells = model.shells(truth, &proto).unwrap();
    let nd = proto.deltas.len();
    let set = SignalSet::isotropic(&proto, |bi, di| shells[bi * nd + di]);
    let opts = FitOptions {
        n_starts: 10,
        sigma: 0.0,
        seed: 3,
        max_iterations: 500,
    };
    fit(&set, &proto, model, &FitBounds::default(), &opts, Execution::Parallel)
        .unwrap()
        .best_params
}

#[test]
fn ball_sphere_recovers_its_own_signal() {
    let truth = [4.0, 0.6, 2.0, 1.3];
    let got = fit_clean(ModelKind::BallSphere, &truth);
    for (g, t) in got.iter().zip(&truth) {
        assert!((g / t - 1.0).abs() < 1e-3, "{got:?} vs {truth:?}");
    }
}

#[test]
fn cexi_recovers_its_own_signal() {
    let truth = [4.0, 0.6, 2.0, 1.3, 25.0];
    let got = fit_clean(ModelKind::Cexi, &truth);
    for (g, t) in got.iter().zip(&truth) {
        assert!((g / t - 1.0).abs() < 1e-2, "{got:?} vs {truth:?}");
    }
}

fn small_protocol() -> PgseProtocol {
    PgseProtocol::new(vec![12.0, 20.0, 30.0, 40.0], 4.5, vec![0.0, 1.0, 2.5, 4.0, 7.0], 1).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn cexi_signal_is_a_decaying_fraction(r in 1.0f64..10.0, f_i in 0.1f64..0.9, d_i_s in 0.2f64..3.0,
                                          d_e in 0.2f64..3.0, kappa in 0.0f64..200.0) {
        let proto = small_protocol();
        let s = cexi_shells(&CexiParams { r, f_i, d_i_s, d_e, kappa }, &proto).unwrap();
        let nd = proto.deltas.len();
        for di in 0..nd {
            prop_assert!((s[di] - 1.0).abs() < 1e-12, "b = 0 must give 1");
            for bi in 1..proto.b_values.len() {
                let (prev, cur) = (s[(bi - 1) * nd + di], s[bi * nd + di]);
                prop_assert!(cur > 0.0 && cur <= prev + 1e-12);
            }
        }
    }

    #[test]
    fn exchange_lies_between_its_limits_at_one_time(r in 1.0f64..10.0, f_i in 0.1f64..0.9,
                                                    d_i_s in 0.2f64..3.0, d_e in 0.2f64..3.0, kappa in 1.0f64..200.0) {
        // exchange mixes the two decays, so the signal cannot leave the range
        // of the slower and faster compartment alone
        let proto = small_protocol();
        let s = cexi_shells(&CexiParams { r, f_i, d_i_s, d_e, kappa }, &proto).unwrap();
        let nd = proto.deltas.len();
        for (di, &big) in proto.deltas.iter().enumerate() {
            let d_i = neuman_adc(big, proto.little_delta, r, d_i_s, DEFAULT_M_MAX).unwrap();
            for (bi, &b) in proto.b_values.iter().enumerate() {
                let (lo, hi) = ((-b * d_i.max(d_e)).exp(), (-b * d_i.min(d_e)).exp());
                let v = s[bi * nd + di];
                prop_assert!(v >= lo - 1e-12 && v <= hi + 1e-12);
            }
        }
    }

    #[test]
    fn restricted_adc_is_below_free_and_falls_with_time(r in 0.5f64..15.0, d in 0.2f64..3.0) {
        let a = neuman_adc(12.0, 4.5, r, d, DEFAULT_M_MAX).unwrap();
        let b = neuman_adc(40.0, 4.5, r, d, DEFAULT_M_MAX).unwrap();
        prop_assert!(a > 0.0 && a < d);
        prop_assert!(b <= a * (1.0 + 1e-9));
    }

    #[test]
    fn ball_sphere_is_the_impermeable_case(r in 1.0f64..10.0, f_i in 0.1f64..0.9, d_i_s in 0.2f64..3.0, d_e in 0.2f64..3.0) {
        let proto = small_protocol();
        let a = ball_sphere_shells(&BallSphereParams { r, f_i, d_i_s, d_e }, &proto).unwrap();
        let b = cexi_shells(&CexiParams { r, f_i, d_i_s, d_e, kappa: 0.0 }, &proto).unwrap();
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x - y).abs() < 1e-12);
        }
    }
}
