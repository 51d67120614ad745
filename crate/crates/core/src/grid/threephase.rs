use std::f64::consts::PI;

use nalgebra::{DMatrix, Matrix3};
use num_complex::Complex64;

use super::{Impedance, Line};

/// `alpha = [1, a, a^2]` with `a = exp(-j 2 pi / 3)`.
pub(crate) fn alpha() -> [Complex64; 3] {
    let a = Complex64::from_polar(1.0, -2.0 * PI / 3.0);
    [Complex64::new(1.0, 0.0), a, a * a]
}

/// `Zhat = diag(alpha^H) Z diag(alpha)`, i.e. `Zhat[m][n] = conj(alpha_m) Z[m][n] alpha_n`.
pub fn hat_impedance(z: &Matrix3<Complex64>) -> Matrix3<Complex64> {
    let al = alpha();
    Matrix3::from_fn(|m, n| al[m].conj() * z[(m, n)] * al[n])
}

/// Strict row diagonal dominance (with positive diagonal) of the per-line
/// reactance matrix
///
/// ```text
/// 1/2 [[ 2x_aa, -x_ab,  x_ac],
///      [-x_ab,  2x_bb,  x_bc],
///      [-x_ac, -x_bc,  2x_cc]]
/// ```
///
/// taken verbatim, including its uneven sign pattern. Signs do not affect the
/// test since only magnitudes of off-diagonal entries enter. Single-phase
/// lines trivially pass when `x > 0`.
pub fn check_diagonal_dominance(line: &Line) -> bool {
    let z = match &line.impedance {
        Impedance::Three(z) => z,
        Impedance::Single { x, .. } => return *x > 0.0,
    };
    let x = |i: usize, j: usize| z[(i, j)].im;
    let tilde = Matrix3::new(
        2.0 * x(0, 0),
        -x(0, 1),
        x(0, 2),
        -x(0, 1),
        2.0 * x(1, 1),
        x(1, 2),
        -x(0, 2),
        -x(1, 2),
        2.0 * x(2, 2),
    ) * 0.5;
    (0..3).all(|i| {
        let off: f64 = (0..3).filter(|&j| j != i).map(|j| tilde[(i, j)].abs()).sum();
        tilde[(i, i)] > 0.0 && tilde[(i, i)].abs() > off
    })
}

/// Permutation `T` with `v = T v_check`, mapping the phase-major arrangement
/// `[v_a(1..n), v_b(1..n), v_c(1..n)]` onto the bus-major state ordering.
pub fn phase_major_permutation(n_buses: usize) -> DMatrix<f64> {
    let m = 3 * n_buses;
    let mut t = DMatrix::zeros(m, m);
    for bus in 0..n_buses {
        for ph in 0..3 {
            t[(3 * bus + ph, ph * n_buses + bus)] = 1.0;
        }
    }
    t
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{build_rx_matrices, sym_eigenvalues, BusLimits, RadialNetwork};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn c(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    #[test]
    fn identity_is_fixed() {
        let zh = hat_impedance(&Matrix3::identity());
        assert!((zh - Matrix3::identity()).iter().all(|e| e.norm() < 1e-15));
    }

    #[test]
    fn single_mutual_entry_picks_up_a() {
        let mut z = Matrix3::zeros();
        z[(0, 1)] = c(1.0, 0.0);
        let zh = hat_impedance(&z);
        let a = Complex64::from_polar(1.0, -2.0 * PI / 3.0);
        assert!((zh[(0, 1)] - a).norm() < 1e-15);
        assert!((zh[(0, 1)] - c(-0.5, -(3f64.sqrt()) / 2.0)).norm() < 1e-15);
    }

    #[test]
    fn real_symmetric_input_gives_hermitian_pattern() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..100 {
            let mut z = Matrix3::zeros();
            for i in 0..3 {
                for j in i..3 {
                    let v = rng.random_range(-1.0..1.0);
                    z[(i, j)] = c(v, 0.0);
                    z[(j, i)] = c(v, 0.0);
                }
            }
            let zh = hat_impedance(&z);
            for m in 0..3 {
                for n in 0..3 {
                    assert!((zh[(m, n)] - zh[(n, m)].conj()).norm() < 1e-14);
                    let expect = alpha()[m].conj() * z[(m, n)] * alpha()[n];
                    assert!((zh[(m, n)] - expect).norm() < 1e-15);
                }
            }
        }
    }

    fn coupled(self_x: f64, mutual_x: f64) -> Line {
        let z = Matrix3::from_fn(|i, j| {
            if i == j {
                c(0.5, self_x)
            } else {
                c(0.1, mutual_x)
            }
        });
        Line::three(0, 1, z)
    }

    #[test]
    fn dominance_examples() {
        let diag = Line::three(0, 1, Matrix3::from_diagonal_element(c(0.3, 0.8)));
        assert!(check_diagonal_dominance(&diag));
        assert!(check_diagonal_dominance(&coupled(1.0, 0.3)));
        // Row a of the halved matrix: 1 > 0.3 + 0.3.
        assert!(check_diagonal_dominance(&coupled(1.0, 0.6)));
        // 1 < 0.55 + 0.55.
        assert!(!check_diagonal_dominance(&coupled(1.0, 1.1)));
    }

    #[test]
    fn permutation_is_similarity() {
        let n = 3;
        let lines = vec![
            coupled(0.9, 0.3),
            Line {
                from: crate::grid::BusId(1),
                to: crate::grid::BusId(2),
                ..coupled(0.7, 0.2)
            },
            Line {
                from: crate::grid::BusId(1),
                to: crate::grid::BusId(3),
                ..coupled(1.1, 0.4)
            },
        ];
        let net = RadialNetwork::new(
            n + 1,
            lines,
            1.0,
            vec![BusLimits::new(0.95, 1.05); n + 1],
            vec![],
        )
        .unwrap();
        let gm = build_rx_matrices(&net).unwrap();
        let t = phase_major_permutation(n);
        assert!((&t * t.transpose() - DMatrix::identity(3 * n, 3 * n)).amax() < 1e-15);
        let phase_major = t.transpose() * gm.x_sym() * &t;
        let a = sym_eigenvalues(&gm.x_sym());
        let b = sym_eigenvalues(&phase_major);
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
        // Entry (bus 2, phase b) in bus-major sits at phase-major (phase b, bus 2).
        assert_eq!(gm.x[(3 + 1, 3 + 1)], phase_major[(n + 1, n + 1)]);
    }
}
