//! Gaussian phase priors on a Gauss-Legendre grid, and the noise-driven prior widths.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::spin::C64;

pub const DEFAULT_NODES: usize = 201;
pub const DEFAULT_TRUNCATION: f64 = 8.0;

/// Gauss-Legendre nodes and weights on `[-1, 1]`.
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut x = vec![0.0; n];
    let mut w = vec![0.0; n];
    let half = n.div_ceil(2);
    for i in 0..half {
        let mut z = (PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (p, d) = legendre(n, z);
            dp = d;
            let dz = p / d;
            z -= dz;
            if dz.abs() < 1e-16 {
                break;
            }
        }
        let (_, d) = legendre(n, z);
        if d != 0.0 {
            dp = d;
        }
        let wi = 2.0 / ((1.0 - z * z) * dp * dp);
        x[i] = -z;
        x[n - 1 - i] = z;
        w[i] = wi;
        w[n - 1 - i] = wi;
    }
    if n % 2 == 1 {
        x[n / 2] = 0.0;
    }
    (x, w)
}

fn legendre(n: usize, z: f64) -> (f64, f64) {
    let mut p0 = 1.0;
    let mut p1 = z;
    if n == 0 {
        return (1.0, 0.0);
    }
    for k in 2..=n {
        let kf = k as f64;
        let p2 = ((2.0 * kf - 1.0) * z * p1 - (kf - 1.0) * p0) / kf;
        p0 = p1;
        p1 = p2;
    }
    let d = n as f64 * (z * p1 - p0) / (z * z - 1.0);
    (p1, d)
}

/// Zero-mean Gaussian prior of width `delta_phi` discretized on a fixed grid.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PriorModel {
    pub delta_phi: f64,
    pub n_nodes: usize,
    pub truncation: f64,
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

impl PriorModel {
    pub fn gaussian(delta_phi: f64) -> Result<Self> {
        Self::gaussian_with(delta_phi, DEFAULT_NODES, DEFAULT_TRUNCATION)
    }

    /// Grid sized so that phase signals with frequencies up to `n_atoms` are resolved.
    pub fn for_atoms(delta_phi: f64, n_atoms: usize) -> Result<Self> {
        let half_width = half_width(delta_phi, DEFAULT_TRUNCATION);
        let needed = (0.6 * n_atoms as f64 * half_width + 40.0).ceil() as usize;
        let n = DEFAULT_NODES.max(needed | 1);
        Self::gaussian_with(delta_phi, n, DEFAULT_TRUNCATION)
    }

    pub fn gaussian_with(delta_phi: f64, n_nodes: usize, truncation: f64) -> Result<Self> {
        if !(delta_phi > 0.0 && delta_phi.is_finite()) {
            return invalid(format!("prior width must be positive, got {delta_phi}"));
        }
        if n_nodes < 3 {
            return invalid("at least 3 quadrature nodes are required");
        }
        if !(truncation > 0.0) {
            return invalid("truncation must be positive");
        }
        let l = half_width(delta_phi, truncation);
        let (x, w) = gauss_legendre(n_nodes);
        let nodes: Vec<f64> = x.iter().map(|&xi| xi * l).collect();
        let mut weights: Vec<f64> = nodes
            .iter()
            .zip(&w)
            .map(|(&phi, &wi)| wi * (-0.5 * (phi / delta_phi).powi(2)).exp())
            .collect();
        let total: f64 = weights.iter().sum();
        if !(total > 0.0) {
            return Err(Error::NumericalConsistency("prior weights vanish".into()));
        }
        for wi in &mut weights {
            *wi /= total;
        }
        Ok(PriorModel {
            delta_phi,
            n_nodes,
            truncation,
            nodes,
            weights,
        })
    }

    /// Second moment of the discretized prior.
    pub fn variance(&self) -> f64 {
        self.nodes
            .iter()
            .zip(&self.weights)
            .map(|(p, w)| w * p * p)
            .sum()
    }

    /// Fisher information of the Gaussian prior, `1 / delta_phi^2`.
    pub fn information(&self) -> f64 {
        1.0 / (self.delta_phi * self.delta_phi)
    }

    pub fn half_width(&self) -> f64 {
        half_width(self.delta_phi, self.truncation)
    }

    /// `sum_q w_q exp(i k phi_q)` and `sum_q w_q phi_q exp(i k phi_q)`.
    pub fn characteristic(&self, k: f64) -> (C64, C64) {
        let mut c0 = C64::new(0.0, 0.0);
        let mut c1 = C64::new(0.0, 0.0);
        for (&p, &w) in self.nodes.iter().zip(&self.weights) {
            let e = C64::from_polar(w, k * p);
            c0 += e;
            c1 += e * p;
        }
        (c0, c1)
    }
}

fn half_width(delta_phi: f64, truncation: f64) -> f64 {
    let l = truncation * delta_phi;
    if delta_phi > PI / 3.0 {
        l.max(3.0 * PI)
    } else {
        l
    }
}

/// Power-law exponent `alpha` of the LO frequency noise, `sigma^2(tau) ~ tau^alpha`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseExponent {
    WhiteFm,
    Flicker,
    RandomWalk,
}

impl NoiseExponent {
    pub fn alpha(self) -> i32 {
        match self {
            NoiseExponent::WhiteFm => -1,
            NoiseExponent::Flicker => 0,
            NoiseExponent::RandomWalk => 1,
        }
    }

    pub fn from_alpha(alpha: i32) -> Result<Self> {
        match alpha {
            -1 => Ok(NoiseExponent::WhiteFm),
            0 => Ok(NoiseExponent::Flicker),
            1 => Ok(NoiseExponent::RandomWalk),
            _ => invalid(format!("unsupported noise exponent {alpha}")),
        }
    }

    /// Empirical prefactor of the locked-loop prior width.
    pub fn chi(self) -> f64 {
        match self {
            NoiseExponent::WhiteFm => 1.0,
            NoiseExponent::Flicker => 1.7,
            NoiseExponent::RandomWalk => 2.0,
        }
    }
}

/// `delta_phi = sqrt(chi (T/Z)^(2+alpha))`.
pub fn width_from_interrogation(t_over_z: f64, alpha: NoiseExponent) -> Result<f64> {
    if !(t_over_z > 0.0 && t_over_z.is_finite()) {
        return invalid(format!("T/Z must be positive, got {t_over_z}"));
    }
    Ok((alpha.chi() * t_over_z.powi(2 + alpha.alpha())).sqrt())
}

/// `delta_phi_D = sqrt(2 (T_D/Z)^(2+alpha))`.
pub fn deadtime_width(td_over_z: f64, alpha: NoiseExponent) -> Result<f64> {
    if !(td_over_z >= 0.0 && td_over_z.is_finite()) {
        return invalid(format!("T_D/Z must be non-negative, got {td_over_z}"));
    }
    if td_over_z == 0.0 {
        return Ok(0.0);
    }
    Ok((2.0 * td_over_z.powi(2 + alpha.alpha())).sqrt())
}

pub fn combine_widths(delta_t: f64, delta_d: f64) -> f64 {
    delta_t.hypot(delta_d)
}

/// Solves `sigma(Z + T_D) omega0 Z = 1` for `Z` by bisection in log space.
pub fn coherence_time(adev: impl Fn(f64) -> f64, omega0: f64, t_dead: f64) -> Result<f64> {
    if !(omega0 > 0.0) || !(t_dead >= 0.0) {
        return invalid("omega0 must be positive and T_D non-negative");
    }
    let g = |z: f64| adev(z + t_dead) * omega0 * z - 1.0;
    let (mut lo, mut hi) = (1e-30_f64, 1e30_f64);
    if !(g(lo) < 0.0 && g(hi) > 0.0) {
        return Err(Error::Domain(
            "coherence time equation has no root in [1e-30, 1e30] s".into(),
        ));
    }
    for _ in 0..400 {
        let mid = (lo * hi).sqrt();
        if g(mid) < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi / lo - 1.0 < 1e-14 {
            break;
        }
    }
    Ok((lo * hi).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn legendre_rule_integrates_polynomials() {
        let (x, w) = gauss_legendre(7);
        let total: f64 = w.iter().sum();
        assert!((total - 2.0).abs() < 1e-14);
        let m12: f64 = x.iter().zip(&w).map(|(x, w)| w * x.powi(12)).sum();
        assert!((m12 - 2.0 / 13.0).abs() < 1e-14);
    }

    #[test]
    fn default_prior_moments() {
        for d in [0.05, 0.3, 1.0, 2.0] {
            let p = PriorModel::gaussian(d).unwrap();
            assert_eq!(p.nodes.len(), 201);
            let total: f64 = p.weights.iter().sum();
            assert!((total - 1.0).abs() < 1e-12);
            assert!((p.variance() / (d * d) - 1.0).abs() < 1e-8, "d={d}");
        }
    }

    #[test]
    fn wide_prior_covers_three_pi() {
        let p = PriorModel::gaussian(1.2).unwrap();
        assert!(p.half_width() >= 3.0 * PI);
    }

    #[test]
    fn invalid_widths_are_rejected() {
        assert!(PriorModel::gaussian(0.0).is_err());
        assert!(PriorModel::gaussian(-1.0).is_err());
        assert!(width_from_interrogation(0.0, NoiseExponent::Flicker).is_err());
    }

    #[test]
    fn power_law_widths() {
        let d = width_from_interrogation(0.1, NoiseExponent::Flicker).unwrap();
        assert!((d * d - 0.017).abs() < 1e-15);
        let d = width_from_interrogation(1.0, NoiseExponent::WhiteFm).unwrap();
        assert!((d - 1.0).abs() < 1e-15);
        let d = deadtime_width(0.1, NoiseExponent::Flicker).unwrap();
        assert!((d * d - 0.02).abs() < 1e-15);
        assert_eq!(deadtime_width(0.0, NoiseExponent::WhiteFm).unwrap(), 0.0);
        assert!((combine_widths(3.0, 4.0) - 5.0).abs() < 1e-15);
    }

    #[test]
    fn flicker_coherence_time_is_one_second() {
        let sigma = 1.59155e-16;
        let omega0 = 2.0 * PI * 1e15;
        let z = coherence_time(|_| sigma, omega0, 0.0).unwrap();
        assert!((z - 1.0 / (omega0 * sigma)).abs() < 1e-12);
        assert!((z - 1.0).abs() < 1e-5);
    }
}
