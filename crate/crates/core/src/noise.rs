//! Local-oscillator noise: power-law frequency traces, Allan deviation, Dick effect.

use std::f64::consts::{LN_2, PI};
use std::fmt::Write as _;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::prior::{self, NoiseExponent};

/// Flicker components per decade of simulated timescale.
pub const FLICKER_PER_DECADE: f64 = 2.0;
/// Upper limit on flicker relaxation rates; beyond this the band is rejected.
pub const MAX_FLICKER_COMPONENTS: usize = 64;
pub const DEFAULT_DICK_KMAX: usize = 1_000_000;

/// Power-law LO noise with `sigma^2(tau) = sum_alpha h~_alpha tau^alpha`.
///
/// Coefficients are given in the two-sample (Allan) representation; the
/// spectral coefficients `h_alpha` follow from [`h_from_h_tilde`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseSpec {
    #[serde(default)]
    pub white_fm: f64,
    #[serde(default)]
    pub flicker: f64,
    #[serde(default)]
    pub random_walk: f64,
    /// Transition angular frequency in rad/s.
    pub omega0: f64,
}

impl NoiseSpec {
    pub fn new(white_fm: f64, flicker: f64, random_walk: f64, omega0: f64) -> Result<Self> {
        let s = NoiseSpec {
            white_fm,
            flicker,
            random_walk,
            omega0,
        };
        s.validate()?;
        Ok(s)
    }

    /// Single power-law component scaled so that the coherence time equals `z`.
    pub fn for_coherence_time(exponent: NoiseExponent, z: f64, omega0: f64) -> Result<Self> {
        if !(z > 0.0 && omega0 > 0.0) {
            return invalid("coherence time and omega0 must be positive");
        }
        let h = 1.0 / (omega0 * omega0 * z.powi(2 + exponent.alpha()));
        let mut s = NoiseSpec {
            white_fm: 0.0,
            flicker: 0.0,
            random_walk: 0.0,
            omega0,
        };
        s.set_component(exponent, h);
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        let comps = [self.white_fm, self.flicker, self.random_walk];
        if comps.iter().any(|c| !(c.is_finite() && *c >= 0.0)) {
            return invalid("noise coefficients must be finite and non-negative");
        }
        if comps.iter().all(|&c| c == 0.0) {
            return invalid("noise spec needs at least one positive component");
        }
        if !(self.omega0 > 0.0 && self.omega0.is_finite()) {
            return invalid("omega0 must be positive");
        }
        Ok(())
    }

    pub fn component(&self, e: NoiseExponent) -> f64 {
        match e {
            NoiseExponent::WhiteFm => self.white_fm,
            NoiseExponent::Flicker => self.flicker,
            NoiseExponent::RandomWalk => self.random_walk,
        }
    }

    pub fn set_component(&mut self, e: NoiseExponent, h_tilde: f64) {
        match e {
            NoiseExponent::WhiteFm => self.white_fm = h_tilde,
            NoiseExponent::Flicker => self.flicker = h_tilde,
            NoiseExponent::RandomWalk => self.random_walk = h_tilde,
        }
    }

    /// Nonzero components as `(exponent, h~)`.
    pub fn components(&self) -> Vec<(NoiseExponent, f64)> {
        [
            NoiseExponent::WhiteFm,
            NoiseExponent::Flicker,
            NoiseExponent::RandomWalk,
        ]
        .into_iter()
        .map(|e| (e, self.component(e)))
        .filter(|&(_, h)| h > 0.0)
        .collect()
    }

    /// Free-running Allan deviation.
    pub fn adev(&self, tau: f64) -> f64 {
        self.components()
            .iter()
            .map(|&(e, h)| h * tau.powi(e.alpha()))
            .sum::<f64>()
            .sqrt()
    }

    /// One-sided spectral density `S_y(f)`.
    pub fn spectral_density(&self, f: f64) -> f64 {
        self.components()
            .iter()
            .map(|&(e, h)| h_from_h_tilde(e, h) * f.powi(-(1 + e.alpha())))
            .sum()
    }

    /// Coherence time `Z` for dead time `t_dead`.
    pub fn coherence_time(&self, t_dead: f64) -> Result<f64> {
        self.validate()?;
        prior::coherence_time(|t| self.adev(t), self.omega0, t_dead)
    }

    /// The component that dominates the Allan variance at `tau`.
    pub fn dominant_exponent(&self, tau: f64) -> NoiseExponent {
        self.components()
            .into_iter()
            .map(|(e, h)| (e, h * tau.powi(e.alpha())))
            .max_by(|a, b| a.1.total_cmp(&b.1))
            .map(|(e, _)| e)
            .unwrap_or(NoiseExponent::Flicker)
    }
}

/// Spectral coefficient `h_alpha` of `S_y(f) = h_alpha f^-(1+alpha)` for a two-sample coefficient.
///
/// White FM: `sigma^2 = h / (2 tau)`. Flicker FM: `sigma^2 = 2 ln2 h`.
/// Random-walk FM: `sigma^2 = (2 pi^2 / 3) h tau`.
pub fn h_from_h_tilde(e: NoiseExponent, h_tilde: f64) -> f64 {
    h_tilde / allan_factor(e)
}

pub fn h_tilde_from_h(e: NoiseExponent, h: f64) -> f64 {
    h * allan_factor(e)
}

fn allan_factor(e: NoiseExponent) -> f64 {
    match e {
        NoiseExponent::WhiteFm => 0.5,
        NoiseExponent::Flicker => 2.0 * LN_2,
        NoiseExponent::RandomWalk => 2.0 * PI * PI / 3.0,
    }
}

/// Two-sample variance of interval averages of a unit-variance AR(1) process with rate `gamma`.
pub fn ar1_allan_variance(gamma: f64, tau: f64) -> f64 {
    2.0 * ar1_mean_variance(gamma, tau) - 2.0 * ar1_mean_variance(gamma, 2.0 * tau)
}

/// Variance of the mean of a stationary unit-variance AR(1) process over `tau`.
fn ar1_mean_variance(gamma: f64, tau: f64) -> f64 {
    let x = gamma * tau;
    if x < 1e-3 {
        1.0 - x / 3.0 + x * x / 12.0 - x * x * x / 60.0
    } else {
        2.0 / (x * x) * (x - 1.0 + (-x).exp())
    }
}

/// `x - e1 - e1^2/2` with `e1 = 1 - exp(-x)`, summed as a series for small `x`.
fn integral_bracket(x: f64) -> f64 {
    if x > 0.5 {
        let e1 = -(-x).exp_m1();
        return x - e1 - 0.5 * e1 * e1;
    }
    let mut term = x * x / 2.0;
    let mut total = 0.0;
    for k in 3..30 {
        term *= -x / k as f64;
        let c = 2.0 - 2f64.powi(k - 1);
        total += term * c;
        if term.abs() < 1e-18 * total.abs() {
            break;
        }
    }
    total
}

#[derive(Debug, Clone)]
struct OuComponent {
    gamma: f64,
    var: f64,
    y: f64,
}

#[derive(Debug, Clone, Copy)]
struct OuStep {
    decay: f64,
    mean_gain: f64,
    a: f64,
    b: f64,
    c: f64,
}

/// Stateful generator of interval-averaged fractional frequency deviations.
///
/// Every component is a continuous-time process advanced exactly, so the
/// interval length may change from call to call (dead time and dark time).
#[derive(Debug, Clone)]
pub struct LoProcess {
    white: f64,
    rw_diffusion: f64,
    rw_y: f64,
    ou: Vec<OuComponent>,
    cache: Vec<(u64, Vec<OuStep>)>,
    rng: ChaCha8Rng,
}

impl LoProcess {
    /// `shortest` and `total` bound the simulated timescales in seconds.
    pub fn new(spec: &NoiseSpec, shortest: f64, total: f64, seed: u64) -> Result<Self> {
        spec.validate()?;
        if !(shortest > 0.0 && total >= 2.0 * shortest) {
            return invalid("simulated band needs at least two steps");
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ou = Vec::new();
        if spec.flicker > 0.0 {
            let (rates, weights) = flicker_calibration(shortest, total)?;
            for (g, w) in rates.into_iter().zip(weights) {
                let var = w * spec.flicker;
                let z: f64 = rng.sample(StandardNormal);
                ou.push(OuComponent {
                    gamma: g,
                    var,
                    y: var.sqrt() * z,
                });
            }
        }
        Ok(LoProcess {
            white: spec.white_fm,
            rw_diffusion: 3.0 * spec.random_walk,
            rw_y: 0.0,
            ou,
            cache: Vec::new(),
            rng,
        })
    }

    fn steps(&mut self, dt: f64) -> usize {
        let key = dt.to_bits();
        if let Some(i) = self.cache.iter().position(|(k, _)| *k == key) {
            return i;
        }
        let steps = self
            .ou
            .iter()
            .map(|o| {
                let x = o.gamma * dt;
                let e1 = -(-x).exp_m1();
                let a = o.var * e1 * (2.0 - e1);
                let c = 2.0 * o.var / (o.gamma * o.gamma) * integral_bracket(x);
                let b = o.var * e1 * e1 / o.gamma;
                OuStep {
                    decay: 1.0 - e1,
                    mean_gain: e1 / o.gamma,
                    a,
                    b,
                    c,
                }
            })
            .collect();
        if self.cache.len() >= 4 {
            self.cache.remove(0);
        }
        self.cache.push((key, steps));
        self.cache.len() - 1
    }

    fn normal(&mut self) -> f64 {
        self.rng.sample(StandardNormal)
    }

    /// Mean fractional frequency over the next `dt` seconds.
    pub fn advance(&mut self, dt: f64) -> f64 {
        let mut y = 0.0;
        if self.white > 0.0 {
            y += (self.white / dt).sqrt() * self.normal();
        }
        if self.rw_diffusion > 0.0 {
            let d = self.rw_diffusion;
            let (a, b, c) = (d * dt, d * dt * dt / 2.0, d * dt * dt * dt / 3.0);
            let (z1, z2) = (self.normal(), self.normal());
            let (dy, integral) = correlated_pair(a, b, c, z1, z2);
            y += self.rw_y + integral / dt;
            self.rw_y += dy;
        }
        if !self.ou.is_empty() {
            let idx = self.steps(dt);
            for j in 0..self.ou.len() {
                let (z1, z2) = (self.normal(), self.normal());
                let s = self.cache[idx].1[j];
                let o = &mut self.ou[j];
                let (e1, e2) = correlated_pair(s.a, s.b, s.c, z1, z2);
                y += (o.y * s.mean_gain + e2) / dt;
                o.y = o.y * s.decay + e1;
            }
        }
        y
    }
}

fn correlated_pair(a: f64, b: f64, c: f64, z1: f64, z2: f64) -> (f64, f64) {
    let sa = a.sqrt();
    if sa == 0.0 {
        return (0.0, c.max(0.0).sqrt() * z2);
    }
    let l21 = b / sa;
    let l22 = (c - l21 * l21).max(0.0).sqrt();
    (sa * z1, l21 * z1 + l22 * z2)
}

/// Relaxation rates and unit-flicker weights of the AR(1) sum for a simulated band.
///
/// Weights solve a non-negative least-squares fit of the summed two-sample
/// variance to a constant over `tau` in `[shortest, total/4]`.
pub fn flicker_calibration(shortest: f64, total: f64) -> Result<(Vec<f64>, Vec<f64>)> {
    let g_min = 1.0 / (2.0 * total);
    let g_max = 2.0 / shortest;
    let decades = (g_max / g_min).log10();
    let k = (FLICKER_PER_DECADE * decades).ceil() as usize + 1;
    if k > MAX_FLICKER_COMPONENTS {
        return Err(Error::Config(format!(
            "flicker band spans {decades:.1} decades, more than the generator supports"
        )));
    }
    let rates: Vec<f64> = (0..k)
        .map(|i| g_min * (g_max / g_min).powf(i as f64 / (k - 1) as f64))
        .collect();
    let hi = (total / 4.0).max(2.0 * shortest);
    let n_tau = 12 * k;
    let taus: Vec<f64> = (0..n_tau)
        .map(|i| shortest * (hi / shortest).powf(i as f64 / (n_tau - 1) as f64))
        .collect();
    let a: Vec<Vec<f64>> = taus
        .iter()
        .map(|&t| rates.iter().map(|&g| ar1_allan_variance(g, t)).collect())
        .collect();
    Ok((rates, nnls_to_ones(&a, k)))
}

/// Multiplicative-update non-negative least squares for `A w ~ 1`.
fn nnls_to_ones(a: &[Vec<f64>], k: usize) -> Vec<f64> {
    let mut gram = vec![vec![0.0; k]; k];
    let mut rhs = vec![0.0; k];
    for row in a {
        for i in 0..k {
            rhs[i] += row[i];
            for j in 0..k {
                gram[i][j] += row[i] * row[j];
            }
        }
    }
    let mut w = vec![1.0; k];
    let mut gw = vec![0.0; k];
    for _ in 0..20_000 {
        for i in 0..k {
            gw[i] = (0..k).map(|j| gram[i][j] * w[j]).sum();
        }
        let mut change = 0.0f64;
        for i in 0..k {
            if gw[i] > 0.0 {
                let f = rhs[i] / gw[i];
                change = change.max((f - 1.0).abs());
                w[i] *= f;
            }
        }
        if change < 1e-12 {
            break;
        }
    }
    w
}

/// Cycle-averaged fractional frequency deviations of a free-running LO.
pub fn generate_trace(spec: &NoiseSpec, t_c: f64, n_cycles: usize, seed: u64) -> Result<Vec<f64>> {
    if n_cycles < 2 {
        return invalid("a trace needs at least two cycles");
    }
    if !(t_c > 0.0) {
        return invalid("cycle duration must be positive");
    }
    let mut lo = LoProcess::new(spec, t_c, t_c * n_cycles as f64, seed)?;
    Ok((0..n_cycles).map(|_| lo.advance(t_c)).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdevCurve {
    pub taus: Vec<f64>,
    pub sigmas: Vec<f64>,
    /// Standard error `sigma / sqrt(2 (M - 1))` with `M` segments.
    pub uncertainties: Vec<f64>,
}

impl AdevCurve {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("tau_s,sigma,stderr\n");
        for i in 0..self.taus.len() {
            let _ = writeln!(
                s,
                "{:e},{:e},{:e}",
                self.taus[i], self.sigmas[i], self.uncertainties[i]
            );
        }
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }
}

/// Averaging times `m T_C` for `m = 1, 2, 4, ...` that leave at least `min_segments` segments.
pub fn octave_taus(t_c: f64, n_cycles: usize, min_segments: usize) -> Vec<f64> {
    let mut m = 1usize;
    let mut out = Vec::new();
    while n_cycles / m >= min_segments.max(3) {
        out.push(m as f64 * t_c);
        m *= 2;
    }
    out
}

/// Overlapping Allan deviation of a cycle-averaged trace.
///
/// The quoted uncertainty is the conservative non-overlapping estimate
/// `sigma / sqrt(2 (M - 1))` with `M` disjoint segments.
pub fn allan_deviation(trace: &[f64], t_c: f64, taus: &[f64]) -> Result<AdevCurve> {
    if !(t_c > 0.0) {
        return invalid("cycle duration must be positive");
    }
    // Phase in units of T_C, after removing the mean frequency.
    let mean = trace.iter().sum::<f64>() / trace.len().max(1) as f64;
    let mut phase = Vec::with_capacity(trace.len() + 1);
    phase.push(0.0);
    let mut acc = 0.0;
    for &y in trace {
        acc += y - mean;
        phase.push(acc);
    }
    let mut curve = AdevCurve {
        taus: Vec::with_capacity(taus.len()),
        sigmas: Vec::with_capacity(taus.len()),
        uncertainties: Vec::with_capacity(taus.len()),
    };
    for &tau in taus {
        let ratio = tau / t_c;
        let m = ratio.round();
        if !(m >= 1.0) || (ratio - m).abs() > 1e-9 * m {
            return invalid(format!("tau = {tau} s is not a multiple of T_C = {t_c} s"));
        }
        let m = m as usize;
        let segments = trace.len() / m;
        if segments < 3 {
            return Err(Error::InsufficientData(format!(
                "tau = {tau} s leaves {segments} segments, at least 3 are needed"
            )));
        }
        if let Some(&last) = curve.taus.last() {
            if tau <= last {
                return invalid("taus must be strictly increasing");
            }
        }
        let n = trace.len();
        let terms = n + 1 - 2 * m;
        let ss: f64 = (0..terms)
            .map(|i| (phase[i + 2 * m] - 2.0 * phase[i + m] + phase[i]).powi(2))
            .sum();
        let sigma = (ss / (2.0 * (m * m) as f64 * terms as f64)).sqrt();
        curve.taus.push(tau);
        curve.sigmas.push(sigma);
        curve
            .uncertainties
            .push(sigma / (2.0 * (segments - 1) as f64).sqrt());
    }
    Ok(curve)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DickReport {
    /// Allan variance contribution, including the tail estimate.
    pub variance: f64,
    /// Estimated contribution of the harmonics above `k_max`.
    pub tail: f64,
    /// The tail exceeds 1% of the total.
    pub precision_warning: bool,
}

impl DickReport {
    pub fn sigma(&self) -> f64 {
        self.variance.sqrt()
    }
}

/// Dick-effect Allan variance from the LO spectral density sampled at cycle harmonics.
pub fn dick_effect(spec: &NoiseSpec, t: f64, t_dead: f64, tau: f64, k_max: usize) -> Result<DickReport> {
    spec.validate()?;
    if !(t > 0.0 && t_dead >= 0.0 && tau > 0.0) || k_max == 0 {
        return invalid("Dick effect needs T > 0, T_D >= 0, tau > 0 and k_max >= 1");
    }
    if t_dead == 0.0 {
        return Ok(DickReport {
            variance: 0.0,
            tail: 0.0,
            precision_warning: false,
        });
    }
    let t_c = t + t_dead;
    let eta = t / t_c;
    let pref = t_c * t_c / (t * t * tau);
    let mut variance = 0.0;
    let mut tail = 0.0;
    for (e, h_tilde) in spec.components() {
        let h = h_from_h_tilde(e, h_tilde);
        let p = -(1 + e.alpha());
        let mut sum = 0.0;
        for k in 1..=k_max {
            let kf = k as f64;
            let s = (PI * (kf * eta).fract()).sin();
            sum += (kf / t_c).powi(p) * s * s / (kf * kf);
        }
        // sin^2 averages to 1/2 over the harmonics beyond k_max
        let q = (2 + e.alpha()) as f64;
        let t_sum = 0.5 * t_c.powi(-p) * (k_max as f64 + 0.5).powf(-q) / q;
        variance += pref * h * sum / (PI * PI);
        tail += pref * h * t_sum / (PI * PI);
    }
    let total = variance + tail;
    Ok(DickReport {
        variance: total,
        tail,
        precision_warning: tail > 0.01 * total,
    })
}

/// `sqrt(sigma^2_QPN+CTL + sigma^2_Dick)`.
pub fn total_adev(qpn_ctl: f64, dick: f64) -> Result<f64> {
    if !(qpn_ctl >= 0.0 && dick >= 0.0) {
        return invalid("variances must be non-negative");
    }
    Ok((qpn_ctl + dick).sqrt())
}

/// Clock Allan deviation from the effective measurement uncertainty squared.
pub fn adev_from_efm(efm: f64, t: f64, t_dead: f64, tau: f64, omega0: f64) -> f64 {
    efm.sqrt() / (omega0 * t) * ((t + t_dead) / tau).sqrt()
}

/// Local limit with `Delta phi_M = xi / sqrt(N)`.
pub fn adev_local(n_atoms: usize, xi: f64, t: f64, t_dead: f64, tau: f64, omega0: f64) -> f64 {
    xi / (omega0 * (n_atoms as f64).sqrt() * t) * ((t + t_dead) / tau).sqrt()
}

/// `sigma omega0 sqrt(tau Z)` as a function of `T/Z` and `T_D/Z`.
pub fn scaled_adev(efm: f64, t_over_z: f64, td_over_z: f64) -> f64 {
    efm.sqrt() * (t_over_z + td_over_z).sqrt() / t_over_z
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Extrapolation {
    /// Long-term `sigma sqrt(tau)` with tau in the curve's time unit.
    pub sigma_unit: f64,
    /// Weighted mean of `sigma sqrt(tau)` over the fit range, without the transient term.
    pub plain: f64,
    /// Log-log slope over the fit range.
    pub slope: f64,
    /// Slope differs from -1/2 by more than 0.1, or the transient fit was rejected.
    pub flagged: bool,
    pub n_points: usize,
}

/// Long-term white-frequency level of an ADEV curve.
///
/// Fits `sigma^2 tau = A + B / tau` by weighted least squares over `fit_range`
/// and returns `sqrt(A)`. For any stationary residual with a finite correlation
/// time the Allan variance approaches `S(0) / tau` with a `1 / tau^2` correction,
/// so `A` is the asymptote and `B` absorbs the servo transient. When `A` comes
/// out non-positive or the data support fewer than three points, the plain
/// weighted mean is used and the result is flagged.
pub fn extrapolate_unit_time(curve: &AdevCurve, fit_range: (f64, f64)) -> Result<Extrapolation> {
    let (lo, hi) = fit_range;
    if !(lo > 0.0 && hi > lo) {
        return invalid("fit range must be a positive interval");
    }
    let idx: Vec<usize> = (0..curve.taus.len())
        .filter(|&i| curve.taus[i] >= lo * (1.0 - 1e-12) && curve.taus[i] <= hi * (1.0 + 1e-12))
        .collect();
    if idx.len() < 3 {
        return Err(Error::InsufficientData(format!(
            "fit range holds {} points, at least 3 are needed",
            idx.len()
        )));
    }
    if idx.iter().any(|&i| !(curve.sigmas[i] > 0.0)) {
        return Err(Error::Domain("non-positive sigma in fit range".into()));
    }
    let weighted = idx.iter().all(|&i| curve.uncertainties[i] > 0.0);
    // Weights are inverse variances of sigma sqrt(tau) and of sigma^2 tau.
    let (mut num, mut den) = (0.0, 0.0);
    let (mut s00, mut s01, mut s11, mut r0, mut r1) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for &i in &idx {
        let (t, sg) = (curve.taus[i], curve.sigmas[i]);
        let (w1, w2) = if weighted {
            let u = curve.uncertainties[i];
            (1.0 / (u * u * t), 1.0 / (2.0 * sg * u * t).powi(2))
        } else {
            (1.0, 1.0 / (sg * sg * t).powi(2))
        };
        num += w1 * sg * t.sqrt();
        den += w1;
        let (v, g) = (sg * sg * t, 1.0 / t);
        s00 += w2;
        s01 += w2 * g;
        s11 += w2 * g * g;
        r0 += w2 * v;
        r1 += w2 * v * g;
    }
    let plain = num / den;
    let det = s00 * s11 - s01 * s01;
    let a = (r0 * s11 - r1 * s01) / det;
    let xs: Vec<f64> = idx.iter().map(|&i| curve.taus[i].ln()).collect();
    let ys: Vec<f64> = idx.iter().map(|&i| curve.sigmas[i].ln()).collect();
    let ws: Vec<f64> = idx.iter().map(|&i| log_weight(curve, i)).collect();
    let slope = weighted_linear_fit(&xs, &ys, &ws).1;
    let ok = det > 0.0 && a > 0.0 && a.is_finite();
    Ok(Extrapolation {
        sigma_unit: if ok { a.sqrt() } else { plain },
        plain,
        slope,
        flagged: !ok || (slope + 0.5).abs() > 0.1,
        n_points: idx.len(),
    })
}

/// Ordinary least squares `y = a + b x`, returns `(a, b)`.
pub fn linear_fit(x: &[f64], y: &[f64]) -> (f64, f64) {
    weighted_linear_fit(x, y, &vec![1.0; x.len()])
}

/// Weighted least squares `y = a + b x`, returns `(a, b)`.
pub fn weighted_linear_fit(x: &[f64], y: &[f64], w: &[f64]) -> (f64, f64) {
    let sw: f64 = w.iter().sum();
    let mx = x.iter().zip(w).map(|(a, w)| w * a).sum::<f64>() / sw;
    let my = y.iter().zip(w).map(|(b, w)| w * b).sum::<f64>() / sw;
    let sxy: f64 = (0..x.len()).map(|i| w[i] * (x[i] - mx) * (y[i] - my)).sum();
    let sxx: f64 = (0..x.len()).map(|i| w[i] * (x[i] - mx).powi(2)).sum();
    let b = sxy / sxx;
    (my - b * mx, b)
}

/// Inverse variance of `ln sigma` at point `i`; unit weight without uncertainties.
pub fn log_weight(curve: &AdevCurve, i: usize) -> f64 {
    let u = curve.uncertainties[i];
    if u > 0.0 && curve.sigmas[i] > 0.0 {
        (curve.sigmas[i] / u).powi(2)
    } else {
        1.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceMeta {
    pub t_c: f64,
    pub spec: NoiseSpec,
    pub seed: u64,
    pub n_cycles: usize,
}

fn sidecar(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

/// Writes little-endian f64 samples to `path` and the metadata to `path.json`.
pub fn write_trace(path: &Path, trace: &[f64], meta: &TraceMeta) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for v in trace {
        f.write_all(&v.to_le_bytes())?;
    }
    f.flush()?;
    let json = serde_json::to_string_pretty(meta)
        .map_err(|e| Error::Io(std::io::Error::other(e)))?;
    std::fs::write(sidecar(path), json)?;
    Ok(())
}

pub fn read_trace(path: &Path) -> Result<(Vec<f64>, TraceMeta)> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() % 8 != 0 {
        return invalid("trace file length is not a multiple of 8 bytes");
    }
    let trace = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    let meta: TraceMeta = serde_json::from_str(&std::fs::read_to_string(sidecar(path))?)
        .map_err(|e| Error::Config(format!("trace sidecar: {e}")))?;
    Ok((trace, meta))
}

#[cfg(test)]
mod tests {
    use super::*;

    const OMEGA0: f64 = 2.0 * PI * 429e12;

    #[test]
    fn conversion_table() {
        assert_eq!(h_from_h_tilde(NoiseExponent::WhiteFm, 1.0), 2.0);
        assert!((h_tilde_from_h(NoiseExponent::Flicker, 1.0) - 1.3862943611198906).abs() < 1e-15);
        assert!((h_tilde_from_h(NoiseExponent::RandomWalk, 1.0) - 6.579736267392906).abs() < 1e-14);
    }

    #[test]
    fn zero_spec_is_rejected() {
        assert!(NoiseSpec::new(0.0, 0.0, 0.0, OMEGA0).is_err());
        assert!(NoiseSpec::new(-1.0, 1.0, 0.0, OMEGA0).is_err());
    }

    #[test]
    fn coherence_time_round_trip() {
        for e in [NoiseExponent::WhiteFm, NoiseExponent::Flicker, NoiseExponent::RandomWalk] {
            let s = NoiseSpec::for_coherence_time(e, 2.5, OMEGA0).unwrap();
            assert!((s.coherence_time(0.0).unwrap() / 2.5 - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn ar1_series_matches_direct_form() {
        for x in [0.01f64, 0.1, 0.3, 0.5] {
            let e1 = -(-x).exp_m1();
            let direct = x - e1 - 0.5 * e1 * e1;
            assert!((integral_bracket(x) / direct - 1.0).abs() < 1e-9, "x={x}");
        }
        assert!((integral_bracket(1e-4) / (1e-12 / 3.0 - 1e-16 / 4.0 + 7e-20 / 60.0) - 1.0).abs() < 1e-10);
    }

    #[test]
    fn alternating_trace() {
        let trace: Vec<f64> = (0..100).map(|k| if k % 2 == 0 { 1.0 } else { -1.0 }).collect();
        let c = allan_deviation(&trace, 1.0, &[1.0]).unwrap();
        assert!((c.sigmas[0] - 2f64.sqrt()).abs() < 1e-15);
        let c = allan_deviation(&[3.0; 10], 1.0, &[1.0, 2.0, 3.0]).unwrap();
        assert!(c.sigmas.iter().all(|&s| s == 0.0));
    }

    #[test]
    fn adev_argument_errors() {
        let trace = vec![0.0; 10];
        assert!(matches!(allan_deviation(&trace, 1.0, &[1.5]), Err(Error::InvalidInput(_))));
        assert!(matches!(allan_deviation(&trace, 1.0, &[4.0]), Err(Error::InsufficientData(_))));
    }

    #[test]
    fn dick_white_half_duty() {
        let s = NoiseSpec::new(1e-30, 0.0, 0.0, OMEGA0).unwrap();
        let d = dick_effect(&s, 1.0, 1.0, 10.0, DEFAULT_DICK_KMAX).unwrap();
        let sy = h_from_h_tilde(NoiseExponent::WhiteFm, 1e-30);
        assert!((d.variance / (sy / 20.0) - 1.0).abs() < 1e-9);
        assert_eq!(dick_effect(&s, 1.0, 0.0, 10.0, 10).unwrap().variance, 0.0);
    }

    #[test]
    fn dick_is_additive() {
        let all = NoiseSpec::new(1e-31, 2e-32, 3e-33, OMEGA0).unwrap();
        let parts = [
            NoiseSpec::new(1e-31, 0.0, 0.0, OMEGA0).unwrap(),
            NoiseSpec::new(0.0, 2e-32, 0.0, OMEGA0).unwrap(),
            NoiseSpec::new(0.0, 0.0, 3e-33, OMEGA0).unwrap(),
        ];
        let whole = dick_effect(&all, 0.7, 0.3, 1.0, 100_000).unwrap().variance;
        let sum: f64 = parts
            .iter()
            .map(|p| dick_effect(p, 0.7, 0.3, 1.0, 100_000).unwrap().variance)
            .sum();
        assert!((whole / sum - 1.0).abs() < 1e-12);
    }

    #[test]
    fn dick_decreases_with_interrogation_time() {
        let s = NoiseSpec::new(0.0, 1e-32, 0.0, OMEGA0).unwrap();
        let t_c = 1.0;
        let mut last = f64::INFINITY;
        for i in 1..20 {
            let t = i as f64 * 0.05;
            let v = dick_effect(&s, t, t_c - t, 1.0, 100_000).unwrap().variance;
            assert!(v < last, "T={t}");
            last = v;
        }
    }

    #[test]
    fn total_adev_is_pythagorean() {
        assert!((total_adev(9e-32, 16e-32).unwrap() - 5e-16).abs() < 1e-30);
        assert_eq!(total_adev(4.0, 0.0).unwrap(), 2.0);
        assert!(total_adev(-1.0, 0.0).is_err());
    }

    #[test]
    fn adev_forms_agree() {
        let (t, td, tau, z) = (0.3, 0.1, 100.0, 2.0);
        let n = 16;
        let s = adev_from_efm(1.0 / n as f64, t, td, tau, OMEGA0);
        assert!((s / adev_local(n, 1.0, t, td, tau, OMEGA0) - 1.0).abs() < 1e-14);
        assert!((adev_from_efm(0.01, t, td, 2.0 * tau, OMEGA0) * 2f64.sqrt() / adev_from_efm(0.01, t, td, tau, OMEGA0) - 1.0).abs() < 1e-14);
        let scaled = adev_from_efm(0.02, t, td, tau, OMEGA0) * OMEGA0 * (tau * z).sqrt();
        assert!((scaled / scaled_adev(0.02, t / z, td / z) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn extrapolation_of_constructed_curve() {
        let taus: Vec<f64> = (0..16).map(|i| 2f64.powi(i)).collect();
        let sigmas: Vec<f64> = taus
            .iter()
            .map(|t| 2e-16 / t.sqrt() + 5e-16 * (-t / 4.0).exp())
            .collect();
        let curve = AdevCurve {
            uncertainties: vec![0.0; taus.len()],
            taus,
            sigmas,
        };
        let e = extrapolate_unit_time(&curve, (256.0, 32768.0)).unwrap();
        assert!((e.sigma_unit / 2e-16 - 1.0).abs() < 0.01);
        assert!(!e.flagged);
        let early = extrapolate_unit_time(&curve, (1.0, 16.0)).unwrap();
        assert!(early.flagged);
    }

    #[test]
    fn extrapolation_removes_transient_term() {
        let taus: Vec<f64> = (4..12).map(|i| 2f64.powi(i)).collect();
        let sigmas: Vec<f64> = taus.iter().map(|t| (4e-32 * (1.0 + 50.0 / t) / t).sqrt()).collect();
        let uncertainties = sigmas.iter().map(|s| 0.1 * s).collect();
        let curve = AdevCurve {
            taus,
            sigmas,
            uncertainties,
        };
        let e = extrapolate_unit_time(&curve, (16.0, 2048.0)).unwrap();
        assert!((e.sigma_unit / 2e-16 - 1.0).abs() < 1e-9);
        assert!(e.plain > 2.05e-16);
    }

    #[test]
    fn trace_round_trip() {
        let spec = NoiseSpec::new(1e-30, 0.0, 0.0, OMEGA0).unwrap();
        let trace = generate_trace(&spec, 1.0, 64, 3).unwrap();
        let dir = std::env::temp_dir().join(format!("clockforge-trace-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("trace.bin");
        let meta = TraceMeta {
            t_c: 1.0,
            spec,
            seed: 3,
            n_cycles: 64,
        };
        write_trace(&path, &trace, &meta).unwrap();
        let (back, m) = read_trace(&path).unwrap();
        assert_eq!(back, trace);
        assert_eq!(m, meta);
        std::fs::remove_dir_all(dir).unwrap();
    }

    #[test]
    fn flicker_calibration_is_flat() {
        let (rates, w) = flicker_calibration(1.0, 1e5).unwrap();
        for i in 0..40 {
            let tau = 10f64.powf(i as f64 * 4.0 / 39.0);
            let v: f64 = rates.iter().zip(&w).map(|(&g, &wi)| wi * ar1_allan_variance(g, tau)).sum();
            assert!((v - 1.0).abs() < 0.03, "tau={tau} v={v}");
        }
    }
}
