//! Statistical checks of the LO noise synthesis.

use clockforge::noise::{allan_deviation, generate_trace, linear_fit, NoiseSpec};
use clockforge::prior::NoiseExponent;

const T_C: f64 = 0.1;

fn octaves(k: u32) -> Vec<f64> {
    (0..=k).map(|i| T_C * (1u32 << i) as f64).collect()
}

fn slope(taus: &[f64], sig: &[f64]) -> f64 {
    let x: Vec<f64> = taus.iter().map(|t| t.ln()).collect();
    let y: Vec<f64> = sig.iter().map(|s| s.ln()).collect();
    linear_fit(&x, &y).1
}

#[test]
fn white_fm_follows_inverse_square_root() {
    let spec = NoiseSpec::for_coherence_time(NoiseExponent::WhiteFm, 1.0, 1.0).unwrap();
    let trace = generate_trace(&spec, T_C, 1_000_000, 1).unwrap();
    let taus = octaves(10);
    let c = allan_deviation(&trace, T_C, &taus).unwrap();
    for (t, s) in c.taus.iter().zip(&c.sigmas) {
        let r = s / spec.adev(*t);
        assert!((r - 1.0).abs() < 0.05, "tau {t}: ratio {r}");
    }
    let k = slope(&c.taus, &c.sigmas);
    assert!((k + 0.5).abs() < 0.03, "slope {k}");
}

#[test]
fn flicker_fm_is_flat() {
    let spec = NoiseSpec::for_coherence_time(NoiseExponent::Flicker, 2.0, 1.0).unwrap();
    let trace = generate_trace(&spec, T_C, 500_000, 2).unwrap();
    let c = allan_deviation(&trace, T_C, &octaves(7)).unwrap();
    for (t, s) in c.taus.iter().zip(&c.sigmas) {
        let r = s / spec.adev(*t);
        assert!((r - 1.0).abs() < 0.10, "tau {t}: ratio {r}");
    }
    assert!(slope(&c.taus, &c.sigmas).abs() < 0.03);
}

#[test]
fn random_walk_fm_rises_with_square_root() {
    let spec = NoiseSpec::for_coherence_time(NoiseExponent::RandomWalk, 1.0, 1.0).unwrap();
    let trace = generate_trace(&spec, T_C, 400_000, 3).unwrap();
    let c = allan_deviation(&trace, T_C, &octaves(6)).unwrap();
    let k = slope(&c.taus, &c.sigmas);
    assert!((k - 0.5).abs() < 0.05, "slope {k}");
    for (t, s) in c.taus.iter().zip(&c.sigmas) {
        assert!((s / spec.adev(*t) - 1.0).abs() < 0.15, "tau {t}");
    }
}

#[test]
fn mixed_components_add_in_quadrature() {
    let spec = NoiseSpec::new(1e-2, 4e-3, 0.0, 1.0).unwrap();
    let trace = generate_trace(&spec, T_C, 400_000, 4).unwrap();
    let c = allan_deviation(&trace, T_C, &octaves(8)).unwrap();
    for (t, s) in c.taus.iter().zip(&c.sigmas) {
        let model = (1e-2 / t + 4e-3).sqrt();
        assert!((spec.adev(*t) - model).abs() < 1e-12 * model);
        assert!((s / model - 1.0).abs() < 0.08, "tau {t}");
    }
}

#[test]
fn seeds_reproduce_and_differ() {
    let spec = NoiseSpec::for_coherence_time(NoiseExponent::Flicker, 1.0, 1.0).unwrap();
    let a = generate_trace(&spec, T_C, 2000, 9).unwrap();
    let b = generate_trace(&spec, T_C, 2000, 9).unwrap();
    let c = generate_trace(&spec, T_C, 2000, 10).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, c);
}
