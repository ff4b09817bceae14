//! Symmetric-subspace operators against explicit 2^N tensor products.

use clockforge::spin::{expect, oat, rotate, CMatrix, DickeBasis, SpinOperator, C64};
use nalgebra::DMatrix;
use proptest::prelude::*;

fn c(re: f64, im: f64) -> C64 {
    C64::new(re, im)
}

fn pauli() -> [CMatrix; 3] {
    // basis order |down>, |up>
    let x = DMatrix::from_row_slice(2, 2, &[c(0.0, 0.0), c(1.0, 0.0), c(1.0, 0.0), c(0.0, 0.0)]);
    let y = DMatrix::from_row_slice(2, 2, &[c(0.0, 0.0), c(0.0, 1.0), c(0.0, -1.0), c(0.0, 0.0)]);
    let z = DMatrix::from_row_slice(2, 2, &[c(-1.0, 0.0), c(0.0, 0.0), c(0.0, 0.0), c(1.0, 0.0)]);
    [x, y, z]
}

/// Site `i` carries bit `i` of the computational index; bit set means spin up.
fn embed_site(op: &CMatrix, site: usize, n: usize) -> CMatrix {
    let mut out = DMatrix::from_element(1, 1, c(1.0, 0.0));
    for k in (0..n).rev() {
        let f = if k == site { op.clone() } else { CMatrix::identity(2, 2) };
        out = out.kronecker(&f);
    }
    out
}

fn collective(n: usize, a: usize) -> CMatrix {
    let p = &pauli()[a];
    let dim = 1 << n;
    (0..n).fold(CMatrix::zeros(dim, dim), |acc, i| acc + embed_site(p, i, n) * c(0.5, 0.0))
}

fn product(u: &CMatrix, n: usize) -> CMatrix {
    (0..n).fold(DMatrix::from_element(1, 1, c(1.0, 0.0)), |acc, _| u.kronecker(&acc))
}

fn binom(n: usize, k: usize) -> f64 {
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

/// Columns are the Dicke states ordered by up-spin count.
fn dicke_embedding(n: usize) -> CMatrix {
    let mut d = CMatrix::zeros(1 << n, n + 1);
    for b in 0..(1usize << n) {
        let k = b.count_ones() as usize;
        d[(b, k)] = c(1.0 / binom(n, k).sqrt(), 0.0);
    }
    d
}

fn restrict(op: &CMatrix, n: usize) -> CMatrix {
    let d = dicke_embedding(n);
    d.adjoint() * op * d
}

fn max_diff(a: &CMatrix, b: &CMatrix) -> f64 {
    (a - b).iter().map(|z| z.norm()).fold(0.0, f64::max)
}

fn qubit_rotation(axis: [f64; 3], angle: f64) -> CMatrix {
    let p = pauli();
    let nn = (axis[0] * axis[0] + axis[1] * axis[1] + axis[2] * axis[2]).sqrt();
    let ns = &p[0] * c(axis[0] / nn, 0.0) + &p[1] * c(axis[1] / nn, 0.0) + &p[2] * c(axis[2] / nn, 0.0);
    CMatrix::identity(2, 2) * c((angle / 2.0).cos(), 0.0) - ns * c(0.0, (angle / 2.0).sin())
}

#[test]
fn collective_operators_match_tensor_products() {
    for n in 1..=5 {
        let basis = DickeBasis::new(n).unwrap();
        for (a, op) in [SpinOperator::Sx, SpinOperator::Sy, SpinOperator::Sz].into_iter().enumerate() {
            let brute = restrict(&collective(n, a), n);
            assert!(max_diff(&brute, basis.operator(op)) < 1e-12, "N={n} axis {a}");
        }
    }
}

#[test]
fn symmetric_subspace_is_invariant() {
    // J_a D = D (D^dag J_a D) since the collective operators preserve symmetry
    let n = 4;
    let d = dicke_embedding(n);
    for a in 0..3 {
        let j = collective(n, a);
        let lhs = &j * &d;
        let rhs = &d * (d.adjoint() * &j * &d);
        assert!(max_diff(&lhs, &rhs) < 1e-12);
    }
}

#[test]
fn css_is_product_of_x_eigenstates() {
    for n in 1..=5 {
        let basis = DickeBasis::new(n).unwrap();
        let plus = nalgebra::DVector::from_element(2, c(std::f64::consts::FRAC_1_SQRT_2, 0.0));
        let full = (0..n).fold(nalgebra::DVector::from_element(1, c(1.0, 0.0)), |acc, _| plus.kronecker(&acc));
        let sym = dicke_embedding(n).adjoint() * full;
        let overlap = sym.dotc(basis.css_x().amplitudes()).norm();
        assert!((overlap - 1.0).abs() < 1e-12, "N={n}: {overlap}");
    }
}

#[test]
fn rotations_match_product_unitaries() {
    let n = 4;
    let basis = DickeBasis::new(n).unwrap();
    for (axis, angle) in [([1.0, 0.0, 0.0], 0.7), ([0.3, -0.4, 0.8], 2.1), ([0.0, 1.0, 1.0], -1.3)] {
        let brute = restrict(&product(&qubit_rotation(axis, angle), n), n);
        assert!(max_diff(&brute, &basis.rotation(axis, angle).unwrap()) < 1e-11);
    }
}

#[test]
fn twisting_matches_conjugated_diagonal() {
    let n = 5;
    let basis = DickeBasis::new(n).unwrap();
    let jz = collective(n, 2);
    for (axis, mu) in [([0.0f64, 0.0, 1.0], 0.4), ([1.0, 0.0, 0.0], -0.9), ([0.2, 0.5, -0.6], 1.7)] {
        let nn = (axis[0] * axis[0] + axis[1] * axis[1] + axis[2] * axis[2]).sqrt();
        let (th, ph) = ((axis[2] / nn).acos(), axis[1].atan2(axis[0]));
        // u maps sigma_z to n.sigma: u = R_z(ph) R_y(th)
        let u1 = qubit_rotation([0.0, 0.0, 1.0], ph) * qubit_rotation([0.0, 1.0, 0.0], th);
        let u = product(&u1, n);
        let diag = CMatrix::from_diagonal(&jz.diagonal().map(|m| C64::from_polar(1.0, -0.5 * mu * (m.re * m.re))));
        let brute = restrict(&(&u * diag * u.adjoint()), n);
        assert!(max_diff(&brute, &basis.oat(axis, mu).unwrap()) < 1e-11, "axis {axis:?}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn evolution_preserves_norm_and_casimir(
        n in 1usize..12,
        ax in -1.0f64..1.0, ay in -1.0f64..1.0, az in 0.1f64..1.0,
        angle in -6.3f64..6.3,
        mu in -3.0f64..3.0,
    ) {
        let basis = DickeBasis::new(n).unwrap();
        let s = n as f64 / 2.0;
        let psi = oat(&rotate(&basis.css_x(), [ax, ay, az], angle).unwrap(), [az, ax, ay], mu).unwrap();
        let norm = psi.amplitudes().norm();
        prop_assert!((norm - 1.0).abs() < 1e-12);
        let casimir: f64 = [SpinOperator::Sx, SpinOperator::Sy, SpinOperator::Sz]
            .iter()
            .map(|&o| {
                let m = basis.operator(o);
                expect(&psi, &(m * m)).unwrap()
            })
            .sum();
        prop_assert!((casimir - s * (s + 1.0)).abs() < 1e-9 * (1.0 + s * s));
    }

    #[test]
    fn rotation_inverse_is_reverse_angle(n in 1usize..10, ax in -1.0f64..1.0, az in 0.1f64..1.0, angle in -3.2f64..3.2) {
        let basis = DickeBasis::new(n).unwrap();
        let u = basis.rotation([ax, 0.3, az], angle).unwrap();
        let v = basis.rotation([ax, 0.3, az], -angle).unwrap();
        prop_assert!(max_diff(&(u * v), &CMatrix::identity(n + 1, n + 1)) < 1e-11);
    }
}
