//! Quadrature BMSE against independent routes: a dense-grid binomial model for
//! CSS and an exact Fourier-moment evaluation for arbitrary protocols.

use std::f64::consts::PI;

use clockforge::estimation::{
    bcrb, bcrb_with, efm_transform, estimate, mean_fisher, DerivativeRoute, EstimatorKind,
};
use clockforge::prior::PriorModel;
use clockforge::protocol::{measurement_in, prepare_state, statistical_model, ProtocolSpec, VariationalParams};
use clockforge::spin::{DickeBasis, C64};
use proptest::prelude::*;

/// CSS Ramsey with `P(k up | phi) = Binom(N, (1 + sin phi) / 2)` on a dense grid.
fn css_grid_bmse(n: usize, d: f64) -> f64 {
    let pts = 40_001;
    let (lo, hi) = (-12.0 * d, 12.0 * d);
    let h = (hi - lo) / (pts - 1) as f64;
    let mut m0 = vec![0.0; n + 1];
    let mut m1 = vec![0.0; n + 1];
    let mut m2 = 0.0;
    for i in 0..pts {
        let phi = lo + h * i as f64;
        let w = h * (-phi * phi / (2.0 * d * d)).exp() / (2.0 * PI * d * d).sqrt();
        let w = if i == 0 || i == pts - 1 { 0.5 * w } else { w };
        let p = 0.5 * (1.0 + phi.sin());
        m2 += w * phi * phi;
        let mut binom = 1.0;
        for k in 0..=n {
            if k > 0 {
                binom *= (n - k + 1) as f64 / k as f64;
            }
            let pk = binom * p.powi(k as i32) * (1.0 - p).powi((n - k) as i32);
            m0[k] += w * pk;
            m1[k] += w * pk * phi;
        }
    }
    m2 - (0..=n).filter(|&k| m0[k] > 0.0).map(|k| m1[k] * m1[k] / m0[k]).sum::<f64>()
}

/// Exact Bayes and linear BMSE for an untruncated Gaussian prior from the
/// Fourier decomposition `a_r(phi) = sum_M B_rM e^{-i phi M}`.
fn fourier_bmse(spec: &ProtocolSpec, d: f64) -> (f64, f64) {
    let basis = DickeBasis::new(spec.n_atoms).unwrap();
    let psi = prepare_state(spec).unwrap();
    let meas = measurement_in(spec, &basis).unwrap();
    let m = basis.m_values();
    let var = d * d;
    let mut lin_num = 0.0;
    let mut lin_den = 0.0;
    let mut bayes = 0.0;
    for (g, &x) in meas.groups.iter().zip(&meas.values) {
        let mut z0 = C64::new(0.0, 0.0);
        let mut z1 = C64::new(0.0, 0.0);
        for &r in g {
            let b: Vec<C64> = (0..m.len()).map(|k| meas.vectors[r][k].conj() * psi.amplitudes()[k]).collect();
            for j in 0..m.len() {
                for k in 0..m.len() {
                    let w = m[j] - m[k];
                    let env = (-0.5 * w * w * var).exp();
                    let bb = b[j] * b[k].conj();
                    z0 += bb * env;
                    // E[phi e^{-i w phi}] = -i w var e^{-w^2 var / 2}
                    z1 += bb * C64::new(0.0, -w * var * env);
                }
            }
        }
        let (m0, m1) = (z0.re, z1.re);
        if m0 > 1e-300 {
            bayes += m1 * m1 / m0;
        }
        lin_num += x * m1;
        lin_den += x * x * m0;
    }
    (var - bayes, var - lin_num * lin_num / lin_den)
}

#[test]
fn css_matches_binomial_grid() {
    for n in [1usize, 2, 5, 10, 20] {
        for d in [0.1, 0.3, 0.7] {
            let prior = PriorModel::for_atoms(d, n).unwrap();
            let q = estimate(&statistical_model(&ProtocolSpec::css(n), &prior).unwrap(), EstimatorKind::OptimalBayes)
                .unwrap()
                .1
                .bmse;
            let g = css_grid_bmse(n, d);
            assert!((q - g).abs() / g < 1e-7, "N={n} d={d}: {q} vs {g}");
        }
    }
}

#[test]
fn standard_protocols_match_fourier_moments() {
    for n in [2usize, 3, 6, 9] {
        for d in [0.05, 0.3, 0.9] {
            let prior = PriorModel::for_atoms(d, n).unwrap();
            for spec in [
                ProtocolSpec::css(n),
                ProtocolSpec::sss(n, 0.4 / n as f64),
                ProtocolSpec::ghz_parity(n),
                ProtocolSpec::ghz_projective(n),
            ] {
                let cm = statistical_model(&spec, &prior).unwrap();
                let (fb, fl) = fourier_bmse(&spec, d);
                let qb = estimate(&cm, EstimatorKind::OptimalBayes).unwrap().1.bmse;
                let ql = estimate(&cm, EstimatorKind::Linear).unwrap().1.bmse;
                assert!((qb - fb).abs() < 1e-9 * d * d, "{:?} N={n} d={d}: {qb} vs {fb}", spec.kind);
                assert!((ql - fl).abs() < 1e-9 * d * d, "{:?} N={n} d={d}: {ql} vs {fl}", spec.kind);
            }
        }
    }
}

#[test]
fn efm_transform_removes_prior_information() {
    let d2 = 0.09;
    let e = 0.02;
    let bmse = 1.0 / (1.0 / e + 1.0 / d2);
    assert!((efm_transform(bmse, d2).unwrap() - e).abs() < 1e-15);
    assert_eq!(efm_transform(d2, d2).unwrap(), f64::INFINITY);
    assert!(efm_transform(0.0, d2).is_err());
}

fn arb_params() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-PI..PI, VariationalParams::parameter_count(1, 1))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn variational_matches_fourier_and_orders_estimators(v in arb_params(), n in 2usize..7, d in 0.05f64..1.0) {
        let spec = ProtocolSpec::variational(n, VariationalParams::from_vec(1, 1, &v).unwrap());
        let prior = PriorModel::for_atoms(d, n).unwrap();
        let cm = statistical_model(&spec, &prior).unwrap();
        let qb = estimate(&cm, EstimatorKind::OptimalBayes).unwrap().1.bmse;
        let ql = estimate(&cm, EstimatorKind::Linear).unwrap().1.bmse;
        let (fb, fl) = fourier_bmse(&spec, d);
        prop_assert!((qb - fb).abs() < 1e-9 * d * d);
        prop_assert!((ql - fl).abs() < 1e-9 * d * d);
        prop_assert!(qb <= ql + 1e-12);
        prop_assert!(ql <= d * d * (1.0 + 1e-9));
        prop_assert!(bcrb(&cm) <= qb + 1e-9);
    }

    #[test]
    fn fisher_routes_agree(v in arb_params(), n in 2usize..6, d in 0.05f64..0.8) {
        let spec = ProtocolSpec::variational(n, VariationalParams::from_vec(1, 1, &v).unwrap());
        let prior = PriorModel::for_atoms(d, n).unwrap();
        let cm = statistical_model(&spec, &prior).unwrap();
        let a = mean_fisher(&cm, DerivativeRoute::Analytic);
        let b = mean_fisher(&cm, DerivativeRoute::FiniteDifference);
        prop_assert!((a - b).abs() <= 1e-6 * (1.0 + a));
        prop_assert!((bcrb(&cm) - bcrb_with(&cm, DerivativeRoute::FiniteDifference)).abs() <= 1e-6 * d * d);
    }
}
