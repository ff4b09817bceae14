//! Collective spin algebra in the symmetric (Dicke) subspace of N spin-1/2 particles.
//!
//! Basis states are ordered by ascending `M = -N/2, ..., N/2`. Rotations and
//! twisting gates are built from exact eigendecompositions of the Hermitian
//! generators, never from truncated series.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;

use crate::error::{invalid, Error, Result};

pub type C64 = Complex64;
pub type CMatrix = DMatrix<C64>;
pub type CVector = DVector<C64>;

const NORM_TOL: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SpinOperator {
    Sx,
    Sy,
    Sz,
    Splus,
    Sminus,
}

/// Spectral data `H = V diag(lambda) V^dagger` of a Hermitian generator.
#[derive(Debug, Clone)]
pub struct Spectral {
    pub vectors: CMatrix,
    pub values: Vec<f64>,
}

impl Spectral {
    pub fn of(h: &CMatrix) -> Spectral {
        let eig = h.clone().symmetric_eigen();
        Spectral {
            vectors: eig.eigenvectors,
            values: eig.eigenvalues.iter().copied().collect(),
        }
    }

    /// `V diag(f(lambda)) V^dagger`.
    pub fn apply_fn(&self, f: impl Fn(f64) -> C64) -> CMatrix {
        let v = &self.vectors;
        let mut scaled = v.clone();
        for (j, &lam) in self.values.iter().enumerate() {
            let c = f(lam);
            for i in 0..v.nrows() {
                scaled[(i, j)] *= c;
            }
        }
        scaled * v.adjoint()
    }
}

#[derive(Debug)]
struct BasisData {
    n_atoms: usize,
    m_values: Vec<f64>,
    sx: CMatrix,
    sy: CMatrix,
    sz: CMatrix,
    splus: CMatrix,
    sminus: CMatrix,
    sx_spectral: Spectral,
}

/// Dicke basis for `n_atoms` spins. Cheap to clone; operator matrices are shared.
#[derive(Debug, Clone)]
pub struct DickeBasis {
    data: Arc<BasisData>,
}

impl PartialEq for DickeBasis {
    fn eq(&self, other: &Self) -> bool {
        self.data.n_atoms == other.data.n_atoms
    }
}

impl DickeBasis {
    pub fn new(n_atoms: usize) -> Result<Self> {
        if n_atoms < 1 {
            return invalid("n_atoms must be at least 1");
        }
        let dim = n_atoms + 1;
        let s = n_atoms as f64 / 2.0;
        let m_values: Vec<f64> = (0..dim).map(|i| i as f64 - s).collect();
        let mut splus = CMatrix::zeros(dim, dim);
        for i in 0..n_atoms {
            let m = m_values[i];
            splus[(i + 1, i)] = C64::new((s * (s + 1.0) - m * (m + 1.0)).sqrt(), 0.0);
        }
        let sminus = splus.adjoint();
        let half = C64::new(0.5, 0.0);
        let sx = (&splus + &sminus) * half;
        let sy = (&splus - &sminus) * C64::new(0.0, -0.5);
        let sz = CMatrix::from_diagonal(&CVector::from_iterator(
            dim,
            m_values.iter().map(|&m| C64::new(m, 0.0)),
        ));
        let sx_spectral = Spectral::of(&sx);
        Ok(DickeBasis {
            data: Arc::new(BasisData {
                n_atoms,
                m_values,
                sx,
                sy,
                sz,
                splus,
                sminus,
                sx_spectral,
            }),
        })
    }

    pub fn n_atoms(&self) -> usize {
        self.data.n_atoms
    }

    pub fn dim(&self) -> usize {
        self.data.n_atoms + 1
    }

    /// Magnetic quantum numbers in basis order.
    pub fn m_values(&self) -> &[f64] {
        &self.data.m_values
    }

    pub fn operator(&self, op: SpinOperator) -> &CMatrix {
        match op {
            SpinOperator::Sx => &self.data.sx,
            SpinOperator::Sy => &self.data.sy,
            SpinOperator::Sz => &self.data.sz,
            SpinOperator::Splus => &self.data.splus,
            SpinOperator::Sminus => &self.data.sminus,
        }
    }

    /// `n . S` for a unit vector `n`.
    pub fn axis_operator(&self, axis: [f64; 3]) -> Result<CMatrix> {
        let n = unit_axis(axis)?;
        let d = &self.data;
        Ok(&d.sx * C64::new(n[0], 0.0) + &d.sy * C64::new(n[1], 0.0) + &d.sz * C64::new(n[2], 0.0))
    }

    /// Diagonal of `R_z(phi) = exp(-i phi S_z)`.
    pub fn rz_diagonal(&self, phi: f64) -> Vec<C64> {
        self.data
            .m_values
            .iter()
            .map(|&m| C64::from_polar(1.0, -phi * m))
            .collect()
    }

    pub fn rz(&self, phi: f64) -> CMatrix {
        CMatrix::from_diagonal(&CVector::from_vec(self.rz_diagonal(phi)))
    }

    pub fn rx(&self, angle: f64) -> CMatrix {
        self.data
            .sx_spectral
            .apply_fn(|lam| C64::from_polar(1.0, -angle * lam))
    }

    pub fn ry(&self, angle: f64) -> CMatrix {
        // exp(-i a S_y) = R_z(pi/2) exp(-i a S_x) R_z(-pi/2)
        self.pulse(angle, std::f64::consts::FRAC_PI_2)
    }

    /// Equatorial pulse `exp(-i theta (cos(phase) S_x + sin(phase) S_y))`.
    pub fn pulse(&self, theta: f64, phase: f64) -> CMatrix {
        let mut u = self.rx(theta);
        let d = self.rz_diagonal(phase);
        for i in 0..u.nrows() {
            for j in 0..u.ncols() {
                u[(i, j)] *= d[i] * d[j].conj();
            }
        }
        u
    }

    /// `exp(-i angle n.S)` from the eigendecomposition of `n.S`.
    pub fn rotation(&self, axis: [f64; 3], angle: f64) -> Result<CMatrix> {
        let h = self.axis_operator(axis)?;
        Ok(Spectral::of(&h).apply_fn(|lam| C64::from_polar(1.0, -angle * lam)))
    }

    /// Diagonal of `T_z(mu) = exp(-i mu/2 S_z^2)`.
    pub fn oat_z_diagonal(&self, mu: f64) -> Vec<C64> {
        self.data
            .m_values
            .iter()
            .map(|&m| C64::from_polar(1.0, -0.5 * mu * m * m))
            .collect()
    }

    /// `T_k(mu) = R_k^dagger T_z(mu) R_k` where `R_k^dagger S_z R_k = k.S`.
    pub fn oat(&self, axis: [f64; 3], mu: f64) -> Result<CMatrix> {
        let (theta, phase) = orienting_pulse(axis)?;
        Ok(self.oat_pulse(theta, phase, mu))
    }

    /// Twisting gate about the axis defined by the orienting pulse `(theta, phase)`.
    pub fn oat_pulse(&self, theta: f64, phase: f64, mu: f64) -> CMatrix {
        let r = self.pulse(theta, phase);
        let d = self.oat_z_diagonal(mu);
        let mut tr = r.clone();
        for i in 0..tr.nrows() {
            for j in 0..tr.ncols() {
                tr[(i, j)] *= d[i];
            }
        }
        r.adjoint() * tr
    }

    /// `|M = -N/2>`.
    pub fn spin_down(&self) -> StateVector {
        let mut v = CVector::zeros(self.dim());
        v[0] = C64::new(1.0, 0.0);
        StateVector {
            basis: self.clone(),
            amps: v,
        }
    }

    /// Coherent spin state along +x, `R_y(-pi/2) |down>`.
    pub fn css_x(&self) -> StateVector {
        let u = self.ry(-std::f64::consts::FRAC_PI_2);
        self.spin_down().evolve(&u)
    }
}

/// Normalizes an axis; zero or non-finite vectors are rejected.
pub fn unit_axis(axis: [f64; 3]) -> Result<[f64; 3]> {
    let norm = (axis[0] * axis[0] + axis[1] * axis[1] + axis[2] * axis[2]).sqrt();
    if !norm.is_finite() || norm < 1e-12 {
        return Err(Error::InvalidAxis(format!("{axis:?}")));
    }
    Ok([axis[0] / norm, axis[1] / norm, axis[2] / norm])
}

/// Pulse `(theta, phase)` such that `R^dagger S_z R = k.S` for `R = pulse(theta, phase)`.
pub fn orienting_pulse(axis: [f64; 3]) -> Result<(f64, f64)> {
    let k = unit_axis(axis)?;
    let theta = k[2].clamp(-1.0, 1.0).acos();
    let phase = if theta.sin().abs() < 1e-15 {
        0.0
    } else {
        f64::atan2(-k[0], k[1])
    };
    Ok((theta, phase))
}

/// Unit vector `k` whose spin component `k.S` equals `R^dagger S_z R` for the pulse.
pub fn pulse_axis(theta: f64, phase: f64) -> [f64; 3] {
    [
        -theta.sin() * phase.sin(),
        theta.sin() * phase.cos(),
        theta.cos(),
    ]
}

#[derive(Debug, Clone)]
pub struct StateVector {
    basis: DickeBasis,
    amps: CVector,
}

impl StateVector {
    pub fn new(basis: &DickeBasis, amps: CVector) -> Result<Self> {
        if amps.len() != basis.dim() {
            return Err(Error::DimensionMismatch {
                expected: basis.dim(),
                got: amps.len(),
            });
        }
        let norm2 = amps.norm_squared();
        if (norm2 - 1.0).abs() > NORM_TOL {
            return Err(Error::NotNormalized(norm2));
        }
        Ok(StateVector {
            basis: basis.clone(),
            amps,
        })
    }

    /// Builds a state and rescales it to unit norm.
    pub fn normalized(basis: &DickeBasis, amps: CVector) -> Result<Self> {
        let n = amps.norm();
        if !(n > 0.0 && n.is_finite()) {
            return Err(Error::NotNormalized(n * n));
        }
        StateVector::new(basis, amps / C64::new(n, 0.0))
    }

    pub fn basis(&self) -> &DickeBasis {
        &self.basis
    }

    pub fn amplitudes(&self) -> &CVector {
        &self.amps
    }

    pub fn evolve(&self, u: &CMatrix) -> StateVector {
        StateVector {
            basis: self.basis.clone(),
            amps: u * &self.amps,
        }
    }

    pub fn density(&self) -> DensityOp {
        DensityOp {
            basis: self.basis.clone(),
            rho: &self.amps * self.amps.adjoint(),
        }
    }

    pub fn inner(&self, other: &StateVector) -> C64 {
        self.amps.dotc(&other.amps)
    }
}

#[derive(Debug, Clone)]
pub struct DensityOp {
    basis: DickeBasis,
    rho: CMatrix,
}

impl DensityOp {
    pub fn new(basis: &DickeBasis, rho: CMatrix) -> Result<Self> {
        if rho.nrows() != basis.dim() || rho.ncols() != basis.dim() {
            return Err(Error::DimensionMismatch {
                expected: basis.dim(),
                got: rho.nrows(),
            });
        }
        let tr = rho.trace();
        if (tr.re - 1.0).abs() > 1e-8 || tr.im.abs() > 1e-8 {
            return Err(Error::NotNormalized(tr.re));
        }
        Ok(DensityOp {
            basis: basis.clone(),
            rho,
        })
    }

    pub fn basis(&self) -> &DickeBasis {
        &self.basis
    }

    pub fn matrix(&self) -> &CMatrix {
        &self.rho
    }
}

/// The five collective operators for `n_atoms` spins.
#[derive(Debug, Clone)]
pub struct CollectiveOps {
    pub sx: CMatrix,
    pub sy: CMatrix,
    pub sz: CMatrix,
    pub splus: CMatrix,
    pub sminus: CMatrix,
}

pub fn collective_ops(n_atoms: usize) -> Result<CollectiveOps> {
    let b = DickeBasis::new(n_atoms)?;
    Ok(CollectiveOps {
        sx: b.operator(SpinOperator::Sx).clone(),
        sy: b.operator(SpinOperator::Sy).clone(),
        sz: b.operator(SpinOperator::Sz).clone(),
        splus: b.operator(SpinOperator::Splus).clone(),
        sminus: b.operator(SpinOperator::Sminus).clone(),
    })
}

/// `exp(-i angle axis.S) |psi>`.
pub fn rotate(state: &StateVector, axis: [f64; 3], angle: f64) -> Result<StateVector> {
    let u = state.basis.rotation(axis, angle)?;
    Ok(state.evolve(&u))
}

/// One-axis twisting `exp(-i mu/2 (axis.S)^2) |psi>`.
pub fn oat(state: &StateVector, axis: [f64; 3], mu: f64) -> Result<StateVector> {
    let u = state.basis.oat(axis, mu)?;
    Ok(state.evolve(&u))
}

/// `<psi| O |psi>` for a Hermitian `O`; the imaginary residue is dropped.
pub fn expect(state: &StateVector, op: &CMatrix) -> Result<f64> {
    if op.nrows() != state.amps.len() {
        return Err(Error::DimensionMismatch {
            expected: state.amps.len(),
            got: op.nrows(),
        });
    }
    Ok(state.amps.dotc(&(op * &state.amps)).re)
}

/// `Tr(rho O)`.
pub fn expect_density(rho: &DensityOp, op: &CMatrix) -> Result<f64> {
    if op.nrows() != rho.rho.nrows() {
        return Err(Error::DimensionMismatch {
            expected: rho.rho.nrows(),
            got: op.nrows(),
        });
    }
    Ok((&rho.rho * op).trace().re)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    #[test]
    fn commutator_sx_sy_is_i_sz() {
        for n in 1..=6 {
            let ops = collective_ops(n).unwrap();
            let c = &ops.sx * &ops.sy - &ops.sy * &ops.sx;
            let d = c - &ops.sz * C64::new(0.0, 1.0);
            assert!(d.norm() < 1e-12, "n={n}");
        }
    }

    #[test]
    fn casimir_is_s_s_plus_one() {
        for n in 1..=9 {
            let ops = collective_ops(n).unwrap();
            let s = n as f64 / 2.0;
            let cas = &ops.sx * &ops.sx + &ops.sy * &ops.sy + &ops.sz * &ops.sz;
            let target = CMatrix::identity(n + 1, n + 1) * C64::new(s * (s + 1.0), 0.0);
            assert!((cas - target).norm() < 1e-11);
        }
    }

    #[test]
    fn css_has_binomial_amplitudes() {
        for n in [1usize, 2, 5, 10] {
            let b = DickeBasis::new(n).unwrap();
            let css = b.css_x();
            let norm = 2f64.powi(n as i32);
            let mut binom = 1.0;
            for k in 0..=n {
                let expected = (binom / norm).sqrt();
                assert!((css.amplitudes()[k].norm() - expected).abs() < 1e-12);
                binom = binom * (n - k) as f64 / (k + 1) as f64;
            }
            let sx = expect(&css, b.operator(SpinOperator::Sx)).unwrap();
            assert!((sx - n as f64 / 2.0).abs() < 1e-12);
        }
    }

    #[test]
    fn rz_by_two_pi_is_identity_up_to_phase() {
        for n in [3usize, 4] {
            let b = DickeBasis::new(n).unwrap();
            let d = b.rz_diagonal(2.0 * PI);
            let ph = d[0];
            assert!(d.iter().all(|x| (x - ph).norm() < 1e-12));
        }
    }

    #[test]
    fn orienting_pulse_maps_z_to_axis() {
        let b = DickeBasis::new(4).unwrap();
        for axis in [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.3, -0.4, 0.5], [0.0, 0.0, -1.0]] {
            let (t, p) = orienting_pulse(axis).unwrap();
            let r = b.pulse(t, p);
            let lhs = r.adjoint() * b.operator(SpinOperator::Sz) * &r;
            let rhs = b.axis_operator(axis).unwrap();
            assert!((lhs - rhs).norm() < 1e-12, "{axis:?}");
        }
    }

    #[test]
    fn zero_axis_is_rejected() {
        let b = DickeBasis::new(2).unwrap();
        assert!(matches!(b.rotation([0.0; 3], 1.0), Err(Error::InvalidAxis(_))));
    }

    #[test]
    fn unnormalized_state_is_rejected() {
        let b = DickeBasis::new(2).unwrap();
        let v = CVector::from_element(3, C64::new(1.0, 0.0));
        assert!(matches!(StateVector::new(&b, v), Err(Error::NotNormalized(_))));
    }
}
