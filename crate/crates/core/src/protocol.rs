//! Ramsey protocols: state preparation, measurement, and the conditional outcome
//! distribution `P(x|phi)` tabulated on a prior grid.

use std::f64::consts::{FRAC_PI_2, PI};

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::prior::PriorModel;
use crate::spin::{CMatrix, CVector, DickeBasis, StateVector, C64};

const PROB_SUM_TOL: f64 = 1e-10;

/// Equatorial pulse `exp(-i theta (cos(phase) S_x + sin(phase) S_y))`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Pulse {
    pub theta: f64,
    pub phase: f64,
}

impl Pulse {
    pub fn new(theta: f64, phase: f64) -> Self {
        Pulse { theta, phase }
    }

    pub fn matrix(&self, basis: &DickeBasis) -> CMatrix {
        basis.pulse(self.theta, self.phase)
    }

    /// Pulse mirrored under complex conjugation of the whole circuit.
    pub fn mirrored(&self) -> Self {
        Pulse::new(-self.theta, -self.phase)
    }
}

/// One-axis twist of strength `mu`; `axis` is the pulse orienting `S_z` onto the twisting axis.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Twist {
    pub mu: f64,
    pub axis: Pulse,
}

/// Parameters of the `[n, m]` variational class. The first preparation twist is about `z`,
/// so its `axis` is ignored.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariationalParams {
    pub encode: Pulse,
    pub measure: Pulse,
    pub prep_twists: Vec<Twist>,
    pub meas_twists: Vec<Twist>,
}

impl VariationalParams {
    pub fn n_prep(&self) -> usize {
        self.prep_twists.len()
    }

    pub fn m_meas(&self) -> usize {
        self.meas_twists.len()
    }

    /// Number of free parameters of the `[n, m]` class.
    pub fn parameter_count(n: usize, m: usize) -> usize {
        if n == 0 {
            4 + 3 * m
        } else {
            4 + 3 * (n + m) - 2
        }
    }

    /// Parameters reproducing the coherent spin state protocol.
    pub fn css_equivalent(n: usize, m: usize) -> Self {
        VariationalParams {
            encode: Pulse::default(),
            measure: Pulse::new(FRAC_PI_2, 0.0),
            prep_twists: vec![Twist::default(); n],
            meas_twists: vec![Twist::default(); m],
        }
    }

    /// Parameters reproducing `Sss { mu, theta }` inside the `[1, 0]` class.
    pub fn sss_equivalent(mu: f64, theta: f64) -> Self {
        VariationalParams {
            encode: Pulse::new(theta, 0.0),
            measure: Pulse::new(FRAC_PI_2 + theta, 0.0),
            prep_twists: vec![Twist {
                mu,
                axis: Pulse::default(),
            }],
            meas_twists: vec![],
        }
    }

    /// Flat vector layout: encode (2), measure (2), prep twists, meas twists.
    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = vec![
            self.encode.theta,
            self.encode.phase,
            self.measure.theta,
            self.measure.phase,
        ];
        for (j, t) in self.prep_twists.iter().enumerate() {
            v.push(t.mu);
            if j > 0 {
                v.push(t.axis.theta);
                v.push(t.axis.phase);
            }
        }
        for t in &self.meas_twists {
            v.extend([t.mu, t.axis.theta, t.axis.phase]);
        }
        v
    }

    pub fn from_vec(n: usize, m: usize, v: &[f64]) -> Result<Self> {
        let count = Self::parameter_count(n, m);
        if v.len() != count {
            return Err(Error::DimensionMismatch {
                expected: count,
                got: v.len(),
            });
        }
        let mut it = v.iter().copied();
        let mut next = || it.next().unwrap();
        let encode = Pulse::new(next(), next());
        let measure = Pulse::new(next(), next());
        let mut prep_twists = Vec::with_capacity(n);
        for j in 0..n {
            let mu = next();
            let axis = if j == 0 {
                Pulse::default()
            } else {
                Pulse::new(next(), next())
            };
            prep_twists.push(Twist { mu, axis });
        }
        let mut meas_twists = Vec::with_capacity(m);
        for _ in 0..m {
            let mu = next();
            let axis = Pulse::new(next(), next());
            meas_twists.push(Twist { mu, axis });
        }
        Ok(VariationalParams {
            encode,
            measure,
            prep_twists,
            meas_twists,
        })
    }

    /// Parameters of the complex-conjugated circuit, whose model is `P(x|-phi)`.
    pub fn mirrored(&self) -> Self {
        let mirror = |t: &Twist| Twist {
            mu: -t.mu,
            axis: t.axis.mirrored(),
        };
        VariationalParams {
            encode: self.encode.mirrored(),
            measure: self.measure.mirrored(),
            prep_twists: self.prep_twists.iter().map(mirror).collect(),
            meas_twists: self.meas_twists.iter().map(mirror).collect(),
        }
    }
}

/// Complex amplitudes stored as `[re, im]` pairs for serialization.
pub type Amplitudes = Vec<[f64; 2]>;

pub fn to_amplitudes(v: &CVector) -> Amplitudes {
    v.iter().map(|c| [c.re, c.im]).collect()
}

pub fn from_amplitudes(a: &[[f64; 2]]) -> CVector {
    CVector::from_iterator(a.len(), a.iter().map(|p| C64::new(p[0], p[1])))
}

/// An explicit state with a projective measurement given by orthonormal vectors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CustomProtocol {
    pub state: Amplitudes,
    pub vectors: Vec<Amplitudes>,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ProtocolKind {
    Css,
    Sss { mu: f64, theta: f64 },
    GhzParity,
    GhzProjective,
    Variational(VariationalParams),
    Poi { state: Amplitudes },
    Custom(CustomProtocol),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProtocolSpec {
    pub n_atoms: usize,
    #[serde(flatten)]
    pub kind: ProtocolKind,
}

impl ProtocolSpec {
    pub fn new(n_atoms: usize, kind: ProtocolKind) -> Self {
        ProtocolSpec { n_atoms, kind }
    }

    pub fn css(n_atoms: usize) -> Self {
        Self::new(n_atoms, ProtocolKind::Css)
    }

    /// Spin squeezed state with the variance-minimizing rotation for `mu`.
    pub fn sss(n_atoms: usize, mu: f64) -> Self {
        let theta = sss_optimal_theta(n_atoms, mu);
        Self::new(n_atoms, ProtocolKind::Sss { mu, theta })
    }

    pub fn ghz_parity(n_atoms: usize) -> Self {
        Self::new(n_atoms, ProtocolKind::GhzParity)
    }

    pub fn ghz_projective(n_atoms: usize) -> Self {
        Self::new(n_atoms, ProtocolKind::GhzProjective)
    }

    pub fn variational(n_atoms: usize, params: VariationalParams) -> Self {
        Self::new(n_atoms, ProtocolKind::Variational(params))
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_atoms < 1 {
            return invalid("n_atoms must be at least 1");
        }
        let dim = self.n_atoms + 1;
        match &self.kind {
            ProtocolKind::Variational(p) => {
                if p.n_prep() > 2 || p.m_meas() > 3 {
                    return invalid("variational classes are limited to n <= 2, m <= 3");
                }
                let v = p.to_vec();
                if v.iter().any(|x| !x.is_finite()) {
                    return invalid("variational parameters must be finite");
                }
                for t in p.prep_twists.iter().chain(&p.meas_twists) {
                    if t.mu.abs() > 2.0 * PI + 1e-12 {
                        return invalid(format!("twist strength {} outside [-2pi, 2pi]", t.mu));
                    }
                }
            }
            ProtocolKind::Poi { state } => {
                if state.len() != dim {
                    return Err(Error::DimensionMismatch {
                        expected: dim,
                        got: state.len(),
                    });
                }
            }
            ProtocolKind::Custom(c) => {
                if c.state.len() != dim || c.vectors.len() != c.values.len() {
                    return invalid("custom protocol has inconsistent dimensions");
                }
                if c.vectors.iter().any(|v| v.len() != dim) {
                    return invalid("custom measurement vectors have the wrong dimension");
                }
            }
            ProtocolKind::Sss { mu, theta }
                if (!mu.is_finite() || !theta.is_finite()) => {
                    return invalid("SSS parameters must be finite");
                }
            _ => {}
        }
        Ok(())
    }
}

fn apply_twists(basis: &DickeBasis, mut u: CMatrix, twists: &[Twist], first_is_z: bool) -> CMatrix {
    for (j, t) in twists.iter().enumerate() {
        let gate = if j == 0 && first_is_z {
            CMatrix::from_diagonal(&CVector::from_vec(basis.oat_z_diagonal(t.mu)))
        } else {
            basis.oat_pulse(t.axis.theta, t.axis.phase, t.mu)
        };
        u = gate * u;
    }
    u
}

/// GHZ state `(|down..> + |up..>)/sqrt(2)` shifted to the working point by `R_z(-pi/(2N))`.
pub fn ghz_state(basis: &DickeBasis) -> StateVector {
    let dim = basis.dim();
    let mut v = CVector::zeros(dim);
    let s = std::f64::consts::FRAC_1_SQRT_2;
    v[0] = C64::new(s, 0.0);
    v[dim - 1] = C64::new(s, 0.0);
    let shift = basis.rz_diagonal(-PI / (2.0 * basis.n_atoms() as f64));
    for i in 0..dim {
        v[i] *= shift[i];
    }
    StateVector::new(basis, v).expect("GHZ state is normalized")
}

/// Sine state `sqrt(2/(N+1)) sin(pi (k + 1/2)/(N+1))` with `k = M + N/2`.
pub fn sine_state(basis: &DickeBasis) -> StateVector {
    let dim = basis.dim();
    let d = dim as f64;
    let v = CVector::from_iterator(
        dim,
        (0..dim).map(|k| C64::new((2.0 / d).sqrt() * (PI * (k as f64 + 0.5) / d).sin(), 0.0)),
    );
    StateVector::normalized(basis, v).expect("sine state is normalizable")
}

/// Phase-state basis `|s> = sum_M exp(-i phi_s M)|M>/sqrt(N+1)` with
/// `phi_s = 2 pi s/(N+1)`, `s = -N/2, ..., N/2`.
pub fn phase_operator(basis: &DickeBasis) -> (Vec<CVector>, Vec<f64>) {
    let dim = basis.dim();
    let norm = (dim as f64).sqrt();
    let mut vectors = Vec::with_capacity(dim);
    let mut values = Vec::with_capacity(dim);
    for &s in basis.m_values() {
        let phi = 2.0 * PI * s / dim as f64;
        let v = CVector::from_iterator(
            dim,
            basis
                .m_values()
                .iter()
                .map(|&m| C64::from_polar(1.0 / norm, -phi * m)),
        );
        vectors.push(v);
        values.push(phi);
    }
    (vectors, values)
}

/// Prepared probe state `U_prep |down>`.
pub fn prepare_state(spec: &ProtocolSpec) -> Result<StateVector> {
    spec.validate()?;
    let basis = DickeBasis::new(spec.n_atoms)?;
    prepare_state_in(spec, &basis)
}

pub fn prepare_state_in(spec: &ProtocolSpec, basis: &DickeBasis) -> Result<StateVector> {
    match &spec.kind {
        ProtocolKind::Css => Ok(basis.css_x()),
        ProtocolKind::Sss { mu, theta } => {
            let t = CMatrix::from_diagonal(&CVector::from_vec(basis.oat_z_diagonal(*mu)));
            Ok(basis.css_x().evolve(&t).evolve(&basis.rx(*theta)))
        }
        ProtocolKind::GhzParity | ProtocolKind::GhzProjective => Ok(ghz_state(basis)),
        ProtocolKind::Variational(p) => {
            let u = apply_twists(basis, basis.ry(-FRAC_PI_2), &p.prep_twists, true);
            let u = p.encode.matrix(basis) * u;
            Ok(basis.spin_down().evolve(&u))
        }
        ProtocolKind::Poi { state } => StateVector::new(basis, from_amplitudes(state)),
        ProtocolKind::Custom(c) => StateVector::new(basis, from_amplitudes(&c.state)),
    }
}

/// Projective measurement of a protocol: the state after phase encoding is projected
/// onto `vectors`; rows sharing an outcome value are grouped into one outcome.
#[derive(Debug, Clone)]
pub struct Measurement {
    pub vectors: Vec<CVector>,
    pub groups: Vec<Vec<usize>>,
    pub values: Vec<f64>,
}

impl Measurement {
    fn from_unitary(basis: &DickeBasis, u: &CMatrix) -> Self {
        let dim = basis.dim();
        let vectors: Vec<CVector> = (0..dim).map(|x| u.row(x).adjoint()).collect();
        Measurement {
            vectors,
            groups: (0..dim).map(|x| vec![x]).collect(),
            values: basis.m_values().to_vec(),
        }
    }
}

fn parity_measurement(basis: &DickeBasis) -> Measurement {
    let dim = basis.dim();
    let n = basis.n_atoms();
    let sign = if n.is_multiple_of(2) { 1.0 } else { -1.0 };
    let s = std::f64::consts::FRAC_1_SQRT_2;
    let mut plus = Vec::new();
    let mut minus = Vec::new();
    for i in 0..dim {
        let j = dim - 1 - i;
        if i > j {
            continue;
        }
        if i == j {
            let mut v = CVector::zeros(dim);
            v[i] = C64::new(1.0, 0.0);
            plus.push(v);
            continue;
        }
        let mut sym = CVector::zeros(dim);
        sym[i] = C64::new(s, 0.0);
        sym[j] = C64::new(s, 0.0);
        let mut anti = CVector::zeros(dim);
        anti[i] = C64::new(s, 0.0);
        anti[j] = C64::new(-s, 0.0);
        plus.push(sym);
        minus.push(anti);
    }
    // Flip eigenvalue +1 maps to parity (-1)^N.
    let (even, odd) = if sign > 0.0 { (plus, minus) } else { (minus, plus) };
    let n_even = even.len();
    let mut vectors = even;
    vectors.extend(odd);
    let total = vectors.len();
    Measurement {
        vectors,
        groups: vec![(0..n_even).collect(), (n_even..total).collect()],
        values: vec![1.0, -1.0],
    }
}

pub fn measurement_in(spec: &ProtocolSpec, basis: &DickeBasis) -> Result<Measurement> {
    let m = match &spec.kind {
        ProtocolKind::Css | ProtocolKind::Sss { .. } => {
            Measurement::from_unitary(basis, &basis.rx(FRAC_PI_2))
        }
        ProtocolKind::GhzProjective => {
            let u = if spec.n_atoms.is_multiple_of(2) {
                basis.rx(FRAC_PI_2)
            } else {
                basis.ry(FRAC_PI_2)
            };
            Measurement::from_unitary(basis, &u)
        }
        ProtocolKind::GhzParity => parity_measurement(basis),
        ProtocolKind::Variational(p) => {
            let u = apply_twists(basis, p.encode.matrix(basis).adjoint(), &p.meas_twists, false);
            Measurement::from_unitary(basis, &(p.measure.matrix(basis) * u))
        }
        ProtocolKind::Poi { .. } => {
            let (vectors, values) = phase_operator(basis);
            let dim = vectors.len();
            Measurement {
                vectors,
                groups: (0..dim).map(|x| vec![x]).collect(),
                values,
            }
        }
        ProtocolKind::Custom(c) => {
            let vectors: Vec<CVector> = c.vectors.iter().map(|v| from_amplitudes(v)).collect();
            let dim = vectors.len();
            Measurement {
                vectors,
                groups: (0..dim).map(|x| vec![x]).collect(),
                values: c.values.clone(),
            }
        }
    };
    Ok(m)
}

/// Exact outcome distribution of a compiled protocol as a function of the phase.
///
/// Row `r` carries coefficients `B_rM = conj(v_r[M]) psi_M`, so the amplitude after
/// encoding is `a_r(phi) = sum_M B_rM exp(-i phi M)`.
#[derive(Debug, Clone)]
pub struct PhaseModel {
    m_values: Vec<f64>,
    coeffs: Vec<C64>,
    n_rows: usize,
    groups: Vec<Vec<usize>>,
    values: Vec<f64>,
}

impl PhaseModel {
    pub fn compile(spec: &ProtocolSpec) -> Result<Self> {
        spec.validate()?;
        let basis = DickeBasis::new(spec.n_atoms)?;
        Self::compile_in(spec, &basis)
    }

    pub fn compile_in(spec: &ProtocolSpec, basis: &DickeBasis) -> Result<Self> {
        let psi = prepare_state_in(spec, basis)?;
        let meas = measurement_in(spec, basis)?;
        Ok(Self::from_parts(basis, psi.amplitudes(), &meas))
    }

    pub fn from_parts(basis: &DickeBasis, psi: &CVector, meas: &Measurement) -> Self {
        let dim = basis.dim();
        let n_rows = meas.vectors.len();
        let mut coeffs = Vec::with_capacity(n_rows * dim);
        for v in &meas.vectors {
            for k in 0..dim {
                coeffs.push(v[k].conj() * psi[k]);
            }
        }
        PhaseModel {
            m_values: basis.m_values().to_vec(),
            coeffs,
            n_rows,
            groups: meas.groups.clone(),
            values: meas.values.clone(),
        }
    }

    pub fn n_outcomes(&self) -> usize {
        self.groups.len()
    }

    pub fn outcome_values(&self) -> &[f64] {
        &self.values
    }

    fn phases(&self, phi: f64) -> Vec<C64> {
        self.m_values
            .iter()
            .map(|&m| C64::from_polar(1.0, -phi * m))
            .collect()
    }

    /// `P(x|phi)` for every outcome.
    pub fn probabilities(&self, phi: f64, out: &mut [f64]) {
        let mut scratch = PhaseScratch::default();
        self.probabilities_with(phi, out, &mut scratch);
    }

    /// As [`PhaseModel::probabilities`], reusing caller-owned buffers.
    pub fn probabilities_with(&self, phi: f64, out: &mut [f64], scratch: &mut PhaseScratch) {
        let dim = self.m_values.len();
        scratch.phases.clear();
        scratch
            .phases
            .extend(self.m_values.iter().map(|&m| C64::from_polar(1.0, -phi * m)));
        scratch.rows.resize(self.n_rows, 0.0);
        for r in 0..self.n_rows {
            let c = &self.coeffs[r * dim..(r + 1) * dim];
            let a: C64 = c.iter().zip(&scratch.phases).map(|(c, e)| c * e).sum();
            scratch.rows[r] = a.norm_sqr();
        }
        for (x, g) in self.groups.iter().enumerate() {
            out[x] = g.iter().map(|&r| scratch.rows[r]).sum();
        }
    }

    /// `P(x|phi)` and `dP(x|phi)/dphi`.
    pub fn probabilities_and_derivatives(&self, phi: f64, p: &mut [f64], dp: &mut [f64]) {
        let e = self.phases(phi);
        let dim = e.len();
        let mut row_p = vec![0.0; self.n_rows];
        let mut row_d = vec![0.0; self.n_rows];
        for r in 0..self.n_rows {
            let c = &self.coeffs[r * dim..(r + 1) * dim];
            let mut a = C64::new(0.0, 0.0);
            let mut da = C64::new(0.0, 0.0);
            for k in 0..dim {
                let t = c[k] * e[k];
                a += t;
                da += t * C64::new(0.0, -self.m_values[k]);
            }
            row_p[r] = a.norm_sqr();
            row_d[r] = 2.0 * (a.conj() * da).re;
        }
        for (x, g) in self.groups.iter().enumerate() {
            p[x] = g.iter().map(|&r| row_p[r]).sum();
            dp[x] = g.iter().map(|&r| row_d[r]).sum();
        }
    }
}

/// Reusable buffers for [`PhaseModel::probabilities_with`].
#[derive(Debug, Clone, Default)]
pub struct PhaseScratch {
    phases: Vec<C64>,
    rows: Vec<f64>,
}

/// `P(x|phi_q)` tabulated on the prior grid.
#[derive(Debug, Clone)]
pub struct ConditionalModel {
    pub outcomes: Vec<f64>,
    pub prior: PriorModel,
    /// Row-major `[outcome][node]`.
    pub probs: Vec<f64>,
    pub phase_model: PhaseModel,
}

impl ConditionalModel {
    pub fn from_phase_model(phase_model: PhaseModel, prior: &PriorModel) -> Result<Self> {
        let nx = phase_model.n_outcomes();
        let nq = prior.nodes.len();
        let mut probs = vec![0.0; nx * nq];
        let mut col = vec![0.0; nx];
        for (q, &phi) in prior.nodes.iter().enumerate() {
            phase_model.probabilities(phi, &mut col);
            let sum: f64 = col.iter().sum();
            if (sum - 1.0).abs() > PROB_SUM_TOL {
                return Err(Error::NumericalConsistency(format!(
                    "outcome probabilities sum to {sum} at phi = {phi}"
                )));
            }
            for x in 0..nx {
                probs[x * nq + q] = col[x];
            }
        }
        Ok(ConditionalModel {
            outcomes: phase_model.outcome_values().to_vec(),
            prior: prior.clone(),
            probs,
            phase_model,
        })
    }

    pub fn n_outcomes(&self) -> usize {
        self.outcomes.len()
    }

    pub fn n_nodes(&self) -> usize {
        self.prior.nodes.len()
    }

    pub fn row(&self, x: usize) -> &[f64] {
        let nq = self.n_nodes();
        &self.probs[x * nq..(x + 1) * nq]
    }
}

pub fn statistical_model(spec: &ProtocolSpec, prior: &PriorModel) -> Result<ConditionalModel> {
    ConditionalModel::from_phase_model(PhaseModel::compile(spec)?, prior)
}

pub fn statistical_model_in(
    spec: &ProtocolSpec,
    basis: &DickeBasis,
    prior: &PriorModel,
) -> Result<ConditionalModel> {
    ConditionalModel::from_phase_model(PhaseModel::compile_in(spec, basis)?, prior)
}

/// First and second moments entering the linear-estimator closed forms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpinMoments {
    pub sx: f64,
    pub sx2: f64,
    pub sy2: f64,
}

impl SpinMoments {
    pub fn css(n_atoms: usize) -> Self {
        let n = n_atoms as f64;
        SpinMoments {
            sx: n / 2.0,
            sx2: n * n / 4.0,
            sy2: n / 4.0,
        }
    }
}

fn oat_coefficients(n_atoms: usize, mu: f64) -> (f64, f64) {
    let n = n_atoms as i32;
    let a = 1.0 - mu.cos().powi(n - 2);
    let b = 4.0 * (mu / 2.0).sin() * (mu / 2.0).cos().powi(n - 2);
    (a, b)
}

/// Rotation angle of `R_x` that aligns the anti-squeezed ellipse so that `S_y` carries the
/// minimal variance.
pub fn sss_optimal_theta(n_atoms: usize, mu: f64) -> f64 {
    let (a, b) = oat_coefficients(n_atoms, mu);
    0.5 * f64::atan2(b, -a)
}

/// `<S_y^2>` of `R_x(theta) T_z(mu)|CSS>`.
pub fn sss_sy2(n_atoms: usize, mu: f64, theta: f64) -> f64 {
    let n = n_atoms as f64;
    let (a, b) = oat_coefficients(n_atoms, mu);
    n / 4.0 + n * (n - 1.0) / 16.0 * (a * (1.0 + (2.0 * theta).cos()) - b * (2.0 * theta).sin())
}

/// Moments of the squeezed state with the variance-minimizing rotation.
pub fn sss_moments(n_atoms: usize, mu: f64) -> Result<SpinMoments> {
    if n_atoms < 2 {
        return invalid("twisting needs at least two atoms");
    }
    let n = n_atoms as f64;
    let (a, b) = oat_coefficients(n_atoms, mu);
    let sx = n / 2.0 * (mu / 2.0).cos().powi(n_atoms as i32 - 1);
    let sx2 = n / 4.0 * (n - 0.5 * (n - 1.0) * a);
    let sy2 = n / 4.0 * (1.0 + 0.25 * (n - 1.0) * (a - (a * a + b * b).sqrt()));
    Ok(SpinMoments { sx, sx2, sy2 })
}

fn moments_of(spec: &ProtocolSpec) -> Option<SpinMoments> {
    match spec.kind {
        ProtocolKind::Css => Some(SpinMoments::css(spec.n_atoms)),
        ProtocolKind::Sss { mu, theta } if spec.n_atoms >= 2 => {
            let m = sss_moments(spec.n_atoms, mu).ok()?;
            Some(SpinMoments {
                sy2: sss_sy2(spec.n_atoms, mu, theta),
                ..m
            })
        }
        _ => None,
    }
}

/// Slope and BMSE of the linear estimator for a state with the given moments.
pub fn linear_closed_form(m: &SpinMoments, delta_phi: f64) -> (f64, f64) {
    let d = delta_phi * delta_phi;
    let den = m.sy2 * d.cosh() + m.sx2 * d.sinh();
    let a = m.sx * d * (0.5 * d).exp() / den;
    let bmse = d * (1.0 - d * m.sx * m.sx / den);
    (a, bmse)
}

/// Closed-form effective measurement uncertainty of the protocol with its matched
/// estimator.
pub fn analytic_efm(spec: &ProtocolSpec, delta_phi: f64) -> Result<f64> {
    if !(delta_phi > 0.0) {
        return invalid("prior width must be positive");
    }
    let d = delta_phi * delta_phi;
    let n = spec.n_atoms as f64;
    let value = match spec.kind {
        ProtocolKind::Css => d.cosh() / n + d.sinh() - d,
        ProtocolKind::Sss { .. } => {
            let m = moments_of(spec)
                .ok_or_else(|| Error::Domain("SSS needs at least two atoms".into()))?;
            let s2 = m.sx * m.sx;
            (m.sy2 / s2) * d.cosh() + (m.sx2 / s2) * d.sinh() - d
        }
        ProtocolKind::GhzParity | ProtocolKind::GhzProjective => (n * n * d).exp() / (n * n) - d,
        _ => {
            return Err(Error::Domain(
                "no closed-form efm for this protocol kind".into(),
            ))
        }
    };
    if !value.is_finite() || value <= 0.0 {
        return Err(Error::Domain(format!(
            "closed-form efm is not representable ({value})"
        )));
    }
    Ok(value)
}

/// Closed-form BMSE of the protocol with its matched estimator.
pub fn analytic_bmse(spec: &ProtocolSpec, delta_phi: f64) -> Result<f64> {
    let d = delta_phi * delta_phi;
    match spec.kind {
        ProtocolKind::GhzParity | ProtocolKind::GhzProjective => {
            let n2 = (spec.n_atoms * spec.n_atoms) as f64;
            Ok(d * (1.0 - n2 * d * (-n2 * d).exp()))
        }
        _ => {
            let m = moments_of(spec)
                .ok_or_else(|| Error::Domain("no closed-form BMSE for this kind".into()))?;
            Ok(linear_closed_form(&m, delta_phi).1)
        }
    }
}

/// Twist strength minimizing the closed-form SSS efm at `delta_phi`.
pub fn sss_linear_optimal_mu(n_atoms: usize, delta_phi: f64) -> f64 {
    let f = |mu: f64| {
        analytic_efm(&ProtocolSpec::sss(n_atoms, mu), delta_phi).unwrap_or(f64::INFINITY)
    };
    let grid = 400;
    let mut best = (f64::INFINITY, 0.0);
    for i in 0..=grid {
        let mu = PI * i as f64 / grid as f64;
        let v = f(mu);
        if v < best.0 {
            best = (v, mu);
        }
    }
    let step = PI / grid as f64;
    crate::optimizer::golden_section(f, (best.1 - step).max(0.0), (best.1 + step).min(PI), 1e-12).0
}
