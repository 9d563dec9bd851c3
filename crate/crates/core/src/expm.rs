//! Dense matrix exponential by scaling and squaring with a degree-13
//! Padé approximant (Higham 2005).

use nalgebra::DMatrix;

const THETA_13: f64 = 5.371920351148152;

const B13: [f64; 14] = [
    64764752532480000.0,
    32382376266240000.0,
    7771770303897600.0,
    1187353796428800.0,
    129060195264000.0,
    10559470521600.0,
    670442572800.0,
    33522128640.0,
    1323241920.0,
    40840800.0,
    960960.0,
    16380.0,
    182.0,
    1.0,
];

/// exp(A) for a square matrix.
pub fn expm(a: &DMatrix<f64>) -> DMatrix<f64> {
    let n = a.nrows();
    assert_eq!(n, a.ncols(), "expm requires a square matrix");

    // 1-norm (max column sum) determines the scaling.
    let norm1 = (0..n)
        .map(|j| a.column(j).iter().map(|x| x.abs()).sum::<f64>())
        .fold(0.0_f64, f64::max);
    let s = if norm1 > THETA_13 {
        (norm1 / THETA_13).log2().ceil() as i32
    } else {
        0
    };
    let a_scaled = a * 2.0_f64.powi(-s);

    let a2 = &a_scaled * &a_scaled;
    let a4 = &a2 * &a2;
    let a6 = &a2 * &a4;
    let eye = DMatrix::<f64>::identity(n, n);

    let w1 = &a6 * B13[13] + &a4 * B13[11] + &a2 * B13[9];
    let w2 = &a6 * B13[7] + &a4 * B13[5] + &a2 * B13[3] + &eye * B13[1];
    let u = &a_scaled * (&a6 * w1 + w2);
    let z1 = &a6 * B13[12] + &a4 * B13[10] + &a2 * B13[8];
    let v = &a6 * z1 + &a6 * B13[6] + &a4 * B13[4] + &a2 * B13[2] + &eye * B13[0];

    // Pade approximant: solve (V - U) X = (V + U).
    let mut x = (&v - &u)
        .lu()
        .solve(&(&v + &u))
        .expect("Pade denominator is singular");

    for _ in 0..s {
        x = &x * &x;
    }
    x
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn expm_series(a: &DMatrix<f64>, terms: usize) -> DMatrix<f64> {
        let n = a.nrows();
        let mut acc = DMatrix::<f64>::identity(n, n);
        let mut term = DMatrix::<f64>::identity(n, n);
        for k in 1..=terms {
            term = &term * a / k as f64;
            acc += &term;
        }
        acc
    }

    #[test]
    fn exp_zero_is_identity() {
        let z = DMatrix::<f64>::zeros(4, 4);
        assert_eq!(expm(&z), DMatrix::<f64>::identity(4, 4));
    }

    #[test]
    fn exp_of_rotation_generator() {
        // exp([[0,-t],[t,0]]) = [[cos t, -sin t],[sin t, cos t]]
        let t = 1.3_f64;
        let a = DMatrix::from_row_slice(2, 2, &[0.0, -t, t, 0.0]);
        let e = expm(&a);
        assert_relative_eq!(e[(0, 0)], t.cos(), epsilon = 1e-14);
        assert_relative_eq!(e[(1, 0)], t.sin(), epsilon = 1e-14);
    }

    #[test]
    fn exp_matches_series_for_random_matrices() {
        let mut rng = StdRng::seed_from_u64(21);
        for n in [3usize, 6, 12] {
            for _ in 0..20 {
                let a = DMatrix::from_fn(n, n, |_, _| rng.random_range(-0.8..0.8));
                let pade = expm(&a);
                let series = expm_series(&a, 40);
                assert_relative_eq!(pade, series, epsilon = 1e-11);
            }
        }
    }

    #[test]
    fn exp_sum_property_for_commuting_matrices() {
        // exp(A) exp(A) = exp(2A)
        let mut rng = StdRng::seed_from_u64(22);
        let a = DMatrix::from_fn(5, 5, |_, _| rng.random_range(-1.0..1.0));
        let lhs = expm(&a) * expm(&a);
        let rhs = expm(&(&a * 2.0));
        assert_relative_eq!(lhs, rhs, epsilon = 1e-10);
    }
}
