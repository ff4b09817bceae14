//! Bounds optimized over measurements and probe states.

use std::f64::consts::PI;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

use crate::error::{invalid, Error, Result};
use crate::estimation::optimal_bayes_estimate;
use crate::prior::PriorModel;
use crate::protocol::{phase_operator, sine_state, ConditionalModel, Measurement, PhaseModel};
use crate::spin::{CMatrix, CVector, DickeBasis, Spectral, StateVector, C64};

/// Largest ensemble for which dense state optimizations are run.
pub const N_CAP: usize = 64;
/// Relative eigenvalue floor of the averaged state.
pub const EIGEN_FLOOR: f64 = 1e-12;

/// Prior sums `c_k = sum_q w_q e^{i k phi_q}` and `d_k = sum_q w_q phi_q e^{i k phi_q}`
/// for `k = -N..N`.
struct PhaseMoments {
    n: usize,
    c: Vec<C64>,
    d: Vec<C64>,
}

impl PhaseMoments {
    fn new(n: usize, prior: &PriorModel) -> Self {
        let mut c = Vec::with_capacity(2 * n + 1);
        let mut d = Vec::with_capacity(2 * n + 1);
        for k in -(n as i64)..=(n as i64) {
            let (c0, c1) = prior.characteristic(k as f64);
            c.push(c0);
            d.push(c1);
        }
        PhaseMoments { n, c, d }
    }

    /// Index for `k = i - j` in basis indices.
    fn idx(&self, i: usize, j: usize) -> usize {
        (i as i64 - j as i64 + self.n as i64) as usize
    }
}

/// Prior-averaged state and its first phase moment.
#[derive(Debug, Clone)]
pub struct AveragedState {
    pub rho_bar: CMatrix,
    pub rho_bar_prime: CMatrix,
}

impl AveragedState {
    pub fn new(state: &StateVector, prior: &PriorModel) -> Self {
        let pm = PhaseMoments::new(state.basis().n_atoms(), prior);
        Self::with_moments(state.amplitudes(), &pm)
    }

    fn with_moments(psi: &CVector, pm: &PhaseMoments) -> Self {
        let dim = psi.len();
        let mut rho_bar = CMatrix::zeros(dim, dim);
        let mut rho_bar_prime = CMatrix::zeros(dim, dim);
        for i in 0..dim {
            for j in 0..dim {
                let r = psi[i] * psi[j].conj();
                // exp(-i phi (M_i - M_j)) averages to c_{j-i}.
                let k = pm.idx(j, i);
                rho_bar[(i, j)] = r * pm.c[k];
                rho_bar_prime[(i, j)] = r * pm.d[k];
            }
        }
        AveragedState {
            rho_bar,
            rho_bar_prime,
        }
    }
}

/// Symmetric logarithmic derivative solution for an averaged state.
#[derive(Debug, Clone)]
pub struct SldSolution {
    pub l: CMatrix,
    /// `Tr(rho_bar L^2)`.
    pub gain: f64,
    /// Fraction of the spectrum of `rho_bar` below the eigenvalue floor.
    pub truncated_weight: f64,
    spectral: Spectral,
}

pub fn solve_sld(avg: &AveragedState) -> SldSolution {
    let spectral = Spectral::of(&avg.rho_bar);
    let lam = &spectral.values;
    let v = &spectral.vectors;
    let max = lam.iter().cloned().fold(0.0, f64::max);
    let eps = EIGEN_FLOOR * max;
    let dim = lam.len();
    let rp = v.adjoint() * &avg.rho_bar_prime * v;
    let mut le = CMatrix::zeros(dim, dim);
    let mut gain = 0.0;
    for i in 0..dim {
        for j in 0..dim {
            let s = lam[i] + lam[j];
            if (lam[i] > eps || lam[j] > eps)
                && s > eps {
                    le[(i, j)] = rp[(i, j)] * (2.0 / s);
                    gain += lam[i].max(0.0) * le[(i, j)].norm_sqr();
                }
        }
    }
    let truncated_weight = lam.iter().filter(|&&l| l <= eps).map(|l| l.abs()).sum::<f64>();
    SldSolution {
        l: v * le * v.adjoint(),
        gain,
        truncated_weight,
        spectral,
    }
}

/// Detailed bound with both evaluation routes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BqcrbReport {
    /// `delta_phi^2 - Tr(rho_bar L^2)`.
    pub bound: f64,
    /// `delta_phi^2 (1 - delta_phi^2 F_Q(rho_bar))`.
    pub qfi_bound: f64,
    pub qfi: f64,
    pub conditioning_warning: bool,
}

/// Quantum Fisher information of `rho_bar` for the generator `S_z`.
pub fn averaged_qfi(avg: &AveragedState, basis: &DickeBasis) -> f64 {
    let spectral = Spectral::of(&avg.rho_bar);
    qfi_from_spectral(&spectral, basis)
}

fn qfi_from_spectral(spectral: &Spectral, basis: &DickeBasis) -> f64 {
    let lam = &spectral.values;
    let v = &spectral.vectors;
    let max = lam.iter().cloned().fold(0.0, f64::max);
    let eps = EIGEN_FLOOR * max;
    let sz = v.adjoint() * basis.operator(crate::spin::SpinOperator::Sz) * v;
    let mut f = 0.0;
    for i in 0..lam.len() {
        for j in 0..lam.len() {
            let s = lam[i] + lam[j];
            if s > eps && (lam[i] > eps || lam[j] > eps) {
                f += 2.0 * (lam[i] - lam[j]).powi(2) / s * sz[(i, j)].norm_sqr();
            }
        }
    }
    f
}

pub fn bqcrb_report(state: &StateVector, prior: &PriorModel) -> BqcrbReport {
    let avg = AveragedState::new(state, prior);
    let sld = solve_sld(&avg);
    let d2 = prior.delta_phi * prior.delta_phi;
    let qfi = qfi_from_spectral(&sld.spectral, state.basis());
    BqcrbReport {
        bound: prior.variance() - sld.gain,
        qfi_bound: d2 * (1.0 - d2 * qfi),
        qfi,
        conditioning_warning: sld.truncated_weight > 0.5,
    }
}

/// Bayesian quantum Cramer-Rao bound of a probe state.
pub fn bqcrb(state: &StateVector, prior: &PriorModel) -> f64 {
    bqcrb_report(state, prior).bound
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OqiResult {
    pub bound: f64,
    pub optimal_state: Vec<[f64; 2]>,
    pub l_operator: Vec<Vec<[f64; 2]>>,
    pub iterations: usize,
    pub converged: bool,
    pub history: Vec<f64>,
}

impl OqiResult {
    pub fn state(&self, basis: &DickeBasis) -> Result<StateVector> {
        StateVector::new(basis, crate::protocol::from_amplitudes(&self.optimal_state))
    }

    pub fn l_matrix(&self) -> CMatrix {
        let dim = self.l_operator.len();
        CMatrix::from_fn(dim, dim, |i, j| {
            let p = self.l_operator[i][j];
            C64::new(p[0], p[1])
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OqiStart {
    Sine,
    Random { seed: u64 },
    State { amplitudes: Vec<[f64; 2]> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OqiOptions {
    pub tol: f64,
    pub max_iter: usize,
    pub stagnation: usize,
    pub start: OqiStart,
}

impl Default for OqiOptions {
    fn default() -> Self {
        OqiOptions {
            tol: 1e-9,
            max_iter: 500,
            stagnation: 20,
            start: OqiStart::Sine,
        }
    }
}

/// `sum_q w_q R_z^dag(phi_q) [L^2 - 2 phi_q L] R_z(phi_q)`.
fn update_operator(l: &CMatrix, pm: &PhaseMoments) -> CMatrix {
    let l2 = l * l;
    let dim = l.nrows();
    CMatrix::from_fn(dim, dim, |i, j| {
        let k = pm.idx(i, j);
        l2[(i, j)] * pm.c[k] - l[(i, j)] * pm.d[k] * 2.0
    })
}

fn lowest_eigenvector(a: &CMatrix) -> CVector {
    let herm = (a + a.adjoint()) * C64::new(0.5, 0.0);
    let s = Spectral::of(&herm);
    let (imin, _) = s
        .values
        .iter()
        .enumerate()
        .fold((0, f64::INFINITY), |acc, (i, &v)| if v < acc.1 { (i, v) } else { acc });
    s.vectors.column(imin).into_owned()
}

fn check_cap(n: usize) -> Result<()> {
    if n == 0 {
        return invalid("N must be at least 1");
    }
    if n > N_CAP {
        return Err(Error::InvalidInput(format!(
            "N = {n} exceeds the dense optimization cap {N_CAP}; use the asymptotic forms"
        )));
    }
    Ok(())
}

fn initial_state(basis: &DickeBasis, start: &OqiStart) -> Result<StateVector> {
    match start {
        OqiStart::Sine => Ok(sine_state(basis)),
        OqiStart::Random { seed } => {
            let mut rng = ChaCha8Rng::seed_from_u64(*seed);
            let v = CVector::from_fn(basis.dim(), |_, _| {
                C64::new(StandardNormal.sample(&mut rng), StandardNormal.sample(&mut rng))
            });
            StateVector::normalized(basis, v)
        }
        OqiStart::State { amplitudes } => {
            StateVector::normalized(basis, crate::protocol::from_amplitudes(amplitudes))
        }
    }
}

fn matrix_to_pairs(m: &CMatrix) -> Vec<Vec<[f64; 2]>> {
    (0..m.nrows())
        .map(|i| (0..m.ncols()).map(|j| [m[(i, j)].re, m[(i, j)].im]).collect())
        .collect()
}

struct Tracker {
    history: Vec<f64>,
    best: f64,
    since_best: usize,
}

impl Tracker {
    /// Returns true when the iteration should stop.
    fn push(&mut self, value: f64, opts: &OqiOptions) -> (bool, bool) {
        let prev = self.history.last().copied();
        self.history.push(value);
        if value < self.best * (1.0 - 1e-15) {
            self.best = value;
            self.since_best = 0;
        } else {
            self.since_best += 1;
        }
        if let Some(p) = prev {
            if (p - value).abs() < opts.tol * value.abs() {
                return (true, true);
            }
        }
        if self.since_best >= opts.stagnation {
            return (true, true);
        }
        (false, false)
    }
}

/// Optimal quantum interferometer bound by alternating SLD solves and state updates.
pub fn oqi(n_atoms: usize, prior: &PriorModel, opts: &OqiOptions) -> Result<OqiResult> {
    check_cap(n_atoms)?;
    if !(opts.tol > 0.0) || opts.max_iter == 0 {
        return invalid("tol must be positive and max_iter non-zero");
    }
    let basis = DickeBasis::new(n_atoms)?;
    let pm = PhaseMoments::new(n_atoms, prior);
    let pv = prior.variance();
    let mut psi = initial_state(&basis, &opts.start)?.amplitudes().clone();
    let mut tracker = Tracker {
        history: Vec::new(),
        best: f64::INFINITY,
        since_best: 0,
    };
    let mut best: Option<(f64, CVector, CMatrix)> = None;
    let mut converged = false;
    for _ in 0..opts.max_iter {
        let avg = AveragedState::with_moments(&psi, &pm);
        let sld = solve_sld(&avg);
        let bound = pv - sld.gain;
        if best.as_ref().is_none_or(|b| bound < b.0) {
            best = Some((bound, psi.clone(), sld.l.clone()));
        }
        let (stop, conv) = tracker.push(bound, opts);
        if stop {
            converged = conv;
            break;
        }
        psi = lowest_eigenvector(&update_operator(&sld.l, &pm));
    }
    let (bound, psi, l) = best.expect("at least one iteration");
    Ok(OqiResult {
        bound,
        optimal_state: crate::protocol::to_amplitudes(&psi),
        l_operator: matrix_to_pairs(&l),
        iterations: tracker.history.len(),
        converged,
        history: tracker.history,
    })
}

/// Optimal probe state for the fixed phase-operator measurement.
pub fn poi_optimal(n_atoms: usize, prior: &PriorModel, opts: &OqiOptions) -> Result<OqiResult> {
    check_cap(n_atoms)?;
    let basis = DickeBasis::new(n_atoms)?;
    let pm = PhaseMoments::new(n_atoms, prior);
    let (vectors, values) = phase_operator(&basis);
    let dim = basis.dim();
    let meas = Measurement {
        vectors: vectors.clone(),
        groups: (0..dim).map(|x| vec![x]).collect(),
        values,
    };
    let start = match &opts.start {
        OqiStart::Sine => {
            let zero = basis
                .m_values()
                .iter()
                .position(|&m| m.abs() < 0.25)
                .unwrap_or(0);
            vectors[zero].clone()
        }
        other => initial_state(&basis, other)?.amplitudes().clone(),
    };
    poi_iterate(&basis, prior, &pm, &meas, start, opts)
}

/// POI optimization from an explicit starting state.
pub fn poi_optimal_from(
    n_atoms: usize,
    prior: &PriorModel,
    start: &StateVector,
    opts: &OqiOptions,
) -> Result<OqiResult> {
    check_cap(n_atoms)?;
    let basis = DickeBasis::new(n_atoms)?;
    let pm = PhaseMoments::new(n_atoms, prior);
    let (vectors, values) = phase_operator(&basis);
    let dim = basis.dim();
    let meas = Measurement {
        vectors,
        groups: (0..dim).map(|x| vec![x]).collect(),
        values,
    };
    poi_iterate(&basis, prior, &pm, &meas, start.amplitudes().clone(), opts)
}

fn poi_iterate(
    basis: &DickeBasis,
    prior: &PriorModel,
    pm: &PhaseMoments,
    meas: &Measurement,
    mut psi: CVector,
    opts: &OqiOptions,
) -> Result<OqiResult> {
    let mut tracker = Tracker {
        history: Vec::new(),
        best: f64::INFINITY,
        since_best: 0,
    };
    let mut best: Option<(f64, CVector, CMatrix)> = None;
    let mut converged = false;
    for _ in 0..opts.max_iter {
        let model = ConditionalModel::from_phase_model(PhaseModel::from_parts(basis, &psi, meas), prior)?;
        let (table, report) = optimal_bayes_estimate(&model)?;
        let mut l = CMatrix::zeros(basis.dim(), basis.dim());
        for (v, &e) in meas.vectors.iter().zip(&table.estimates) {
            l += v * v.adjoint() * C64::new(e, 0.0);
        }
        if best.as_ref().is_none_or(|b| report.bmse < b.0) {
            best = Some((report.bmse, psi.clone(), l.clone()));
        }
        let (stop, conv) = tracker.push(report.bmse, opts);
        if stop {
            converged = conv;
            break;
        }
        psi = lowest_eigenvector(&update_operator(&l, pm));
    }
    let (bound, psi, l) = best.expect("at least one iteration");
    Ok(OqiResult {
        bound,
        optimal_state: crate::protocol::to_amplitudes(&psi),
        l_operator: matrix_to_pairs(&l),
        iterations: tracker.history.len(),
        converged,
        history: tracker.history,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CtlMode {
    MainFringe,
    FullSum { k_max: usize },
}

/// Error contribution of phase slips beyond the main fringe.
pub fn ctl_oqi(delta_phi: f64, mode: CtlMode) -> Result<f64> {
    if !(delta_phi > 0.0) {
        return invalid("prior width must be positive");
    }
    let s = std::f64::consts::SQRT_2 * delta_phi;
    Ok(match mode {
        CtlMode::MainFringe => 4.0 * PI * PI * erfc(PI / s),
        CtlMode::FullSum { k_max } => (1..=k_max)
            .map(|k| {
                let kf = k as f64;
                let pk = erfc((2.0 * kf - 1.0) * PI / s) - erfc((2.0 * kf + 1.0) * PI / s);
                (2.0 * PI * kf).powi(2) * pk
            })
            .sum(),
    })
}

/// `pi^2 / N^2`.
pub fn pi_heisenberg_limit(n_atoms: usize) -> f64 {
    PI * PI / (n_atoms * n_atoms) as f64
}

pub fn oqi_asymptotic(n_atoms: usize, delta_phi: f64) -> Result<f64> {
    if n_atoms == 0 {
        return invalid("N must be at least 1");
    }
    Ok(pi_heisenberg_limit(n_atoms) + ctl_oqi(delta_phi, CtlMode::MainFringe)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::protocol::{prepare_state, ProtocolSpec};

    #[test]
    fn ghz_two_atoms_bqcrb() {
        let prior = PriorModel::gaussian(0.1).unwrap();
        let psi = prepare_state(&ProtocolSpec::ghz_parity(2)).unwrap();
        let r = bqcrb_report(&psi, &prior);
        assert!((r.bound - 0.00961568).abs() < 5e-9, "{}", r.bound);
        assert!((r.bound / r.qfi_bound - 1.0).abs() < 1e-8);
    }

    #[test]
    fn ctl_values() {
        let v = ctl_oqi(PI, CtlMode::MainFringe).unwrap();
        assert!((v - 12.527).abs() < 5e-4, "{v}");
        assert!(ctl_oqi(0.05, CtlMode::MainFringe).unwrap() < 1e-300);
        for d in [0.4, 0.8, 1.2] {
            let a = ctl_oqi(d, CtlMode::MainFringe).unwrap();
            let b = ctl_oqi(d, CtlMode::FullSum { k_max: 1 }).unwrap();
            assert!((a - b).abs() <= 1e-9 * a.max(1e-300), "{d} {a} {b}");
        }
    }

    #[test]
    fn asymptotic_values() {
        let v = oqi_asymptotic(10, 1e-3).unwrap();
        assert!((v - 0.0986960).abs() < 5e-8);
        // The erfc tail at delta_phi = 0.5 is 1.30952e-8, not negligible at 1e-9.
        let v = oqi_asymptotic(100, 0.5).unwrap();
        assert!((v / (PI * PI / 1e4 + 1.3095199591822813e-08) - 1.0).abs() < 1e-9);
    }

    #[test]
    fn single_atom_oqi_is_equatorial_bound() {
        // For one qubit F_Q(rho_bar) <= exp(-delta_phi^2), reached by equatorial states.
        for d in [0.3, 1.0] {
            let prior = PriorModel::gaussian(d).unwrap();
            let r = oqi(1, &prior, &OqiOptions::default()).unwrap();
            let expected = d * d * (1.0 - d * d * (-d * d).exp());
            assert!((r.bound / expected - 1.0).abs() < 1e-8, "{} {}", r.bound, expected);
        }
    }

    #[test]
    fn oqi_history_is_monotone() {
        let prior = PriorModel::gaussian(0.5).unwrap();
        let r = oqi(6, &prior, &OqiOptions::default()).unwrap();
        for w in r.history.windows(2) {
            assert!(w[1] <= w[0] * (1.0 + 1e-12));
        }
        assert!(r.converged);
    }

    #[test]
    fn oqi_cap_is_enforced() {
        let prior = PriorModel::gaussian(0.5).unwrap();
        assert!(oqi(65, &prior, &OqiOptions::default()).is_err());
    }
}
