//! Reference integrators: fine-step RK4 solutions of the pose kinematics and
//! the covariance Lyapunov ODE, and Euler-Maruyama sampling of the prior.
//!
//! These are deliberately independent of the Magnus discretization; the
//! simulator generates ground truth through them and the test suites use
//! them as oracles.

use nalgebra::{Matrix4, Matrix6, SMatrix, Vector6};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::prior::{
    propagate_nominal, state_boxminus, state_boxplus, Mat18, ProcessNoise, State, StateGaussian,
    Vec18,
};
use crate::se3::{curly_wedge, hat4, se3_exp, Pose, Twist};

fn project_rotation(m: &mut Matrix4<f64>) {
    let r = Pose::new(
        m.fixed_view::<3, 3>(0, 0).into_owned(),
        nalgebra::Vector3::zeros(),
    )
    .orthonormalized()
    .rotation;
    m.fixed_view_mut::<3, 3>(0, 0).copy_from(&r);
}

/// RK4 integration of `Tdot = w(t)^ T` with `w(t) = w0 + t wd0`, projecting
/// the rotation back onto SO(3) after every substep.
pub fn rk4_propagate(x: &State, dt: f64, substeps: usize) -> State {
    assert!(substeps >= 1);
    let h = dt / substeps as f64;
    let w0 = x.velocity.0;
    let wd = x.acceleration.0;
    let vel_hat = |t: f64| hat4(&Twist::from_vector(w0 + wd * t));

    let mut tmat = x.pose.matrix();
    for i in 0..substeps {
        let t = i as f64 * h;
        let k1 = vel_hat(t) * tmat;
        let k2 = vel_hat(t + 0.5 * h) * (tmat + k1 * (0.5 * h));
        let k3 = vel_hat(t + 0.5 * h) * (tmat + k2 * (0.5 * h));
        let k4 = vel_hat(t + h) * (tmat + k3 * h);
        tmat += (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);
        project_rotation(&mut tmat);
    }
    State {
        pose: Pose::from_matrix(&tmat),
        velocity: Twist::from_vector(w0 + wd * dt),
        acceleration: x.acceleration,
        stamp: x.stamp + dt,
    }
}

/// Derivative of the Lyapunov ODE `Pdot = A(t) P + P A(t)^T + L Q L^T`,
/// exploiting the sparsity of `A = [[W, I, 0], [0, 0, I], [0, 0, 0]]`.
fn lyapunov_derivative(w_adj: &Matrix6<f64>, p: &Mat18, lql_block: &Matrix6<f64>) -> Mat18 {
    // AP: block row 0 = W P[0..6,:] + P[6..12,:]; row 1 = P[12..18,:]; row 2 = 0
    let mut ap = Mat18::zeros();
    let p0: SMatrix<f64, 6, 18> = p.fixed_rows::<6>(0).into_owned();
    let p1: SMatrix<f64, 6, 18> = p.fixed_rows::<6>(6).into_owned();
    let p2: SMatrix<f64, 6, 18> = p.fixed_rows::<6>(12).into_owned();
    ap.fixed_rows_mut::<6>(0).copy_from(&(w_adj * p0 + p1));
    ap.fixed_rows_mut::<6>(6).copy_from(&p2);
    let mut deriv = ap + ap.transpose();
    let view = deriv.fixed_view::<6, 6>(12, 12) + lql_block;
    deriv.fixed_view_mut::<6, 6>(12, 12).copy_from(&view);
    deriv
}

/// RK4 integration of the covariance ODE from `P = 0` over `[0, dt]` with
/// the time-varying `A(t)` evaluated along the nominal velocity.
pub fn rk4_covariance(x: &State, q: &ProcessNoise, dt: f64, substeps: usize) -> Mat18 {
    assert!(substeps >= 1);
    let h = dt / substeps as f64;
    let w0 = x.velocity.0;
    let wd = x.acceleration.0;
    let adj = |t: f64| curly_wedge(&Twist::from_vector(w0 + wd * t)).0;

    let mut p = Mat18::zeros();
    for i in 0..substeps {
        let t = i as f64 * h;
        let a0 = adj(t);
        let ah = adj(t + 0.5 * h);
        let a1 = adj(t + h);
        let k1 = lyapunov_derivative(&a0, &p, &q.q);
        let k2 = lyapunov_derivative(&ah, &(p + k1 * (0.5 * h)), &q.q);
        let k3 = lyapunov_derivative(&ah, &(p + k2 * (0.5 * h)), &q.q);
        let k4 = lyapunov_derivative(&a1, &(p + k3 * h), &q.q);
        p += (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);
    }
    (p + p.transpose()) * 0.5
}

/// Fine-step reference solutions of the mean and covariance transitions.
pub fn rk4_oracles(x: &State, q: &ProcessNoise, dt: f64, substeps: usize) -> (State, Mat18) {
    (
        rk4_propagate(x, dt, substeps),
        rk4_covariance(x, q, dt, substeps),
    )
}

/// Factor `S` with `S S^T = M` for a symmetric PSD matrix, by eigenvalue
/// decomposition with negative eigenvalues clamped to zero.
fn psd_sqrt<const N: usize>(m: &SMatrix<f64, N, N>) -> SMatrix<f64, N, N> {
    let dyn_m = nalgebra::DMatrix::from_fn(N, N, |i, j| m[(i, j)]);
    let eig = dyn_m.symmetric_eigen();
    let mut sqrt = eig.eigenvectors;
    for j in 0..N {
        let s = eig.eigenvalues[j].max(0.0).sqrt();
        for i in 0..N {
            sqrt[(i, j)] *= s;
        }
    }
    SMatrix::<f64, N, N>::from_fn(|i, j| sqrt[(i, j)])
}

fn standard_normal_vector<const N: usize, R: Rng>(rng: &mut R) -> SMatrix<f64, N, 1> {
    SMatrix::<f64, N, 1>::from_fn(|_, _| StandardNormal.sample(rng))
}

/// Euler-Maruyama sample paths of the prior SDE.
///
/// Draws `n_samples` initial perturbations from `N(0, P0)`, integrates each
/// through the kinematics with white jerk noise of PSD `q`, and returns the
/// empirical mean state and covariance of the propagated distribution
/// expressed around the nominal propagation of the mean. Reproducible for a
/// fixed seed.
pub fn monte_carlo_prior(
    x0: &StateGaussian,
    q: &ProcessNoise,
    dt: f64,
    n_samples: usize,
    substeps: usize,
    seed: u64,
) -> (State, Mat18) {
    assert!(n_samples >= 100);
    assert!(substeps >= 1);
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let sqrt_p0 = psd_sqrt(&x0.cov);
    let sqrt_q: Matrix6<f64> = psd_sqrt(&q.q);
    let h = dt / substeps as f64;
    let sqrt_h = h.sqrt();

    let nominal_end = propagate_nominal(&x0.mean, dt);
    let mut gammas: Vec<Vec18> = Vec::with_capacity(n_samples);
    for _ in 0..n_samples {
        let gamma0 = sqrt_p0 * standard_normal_vector::<18, _>(&mut rng);
        let mut state = state_boxplus(&gamma0, &x0.mean);
        for _ in 0..substeps {
            // Midpoint velocity for the drift; the diffusion enters the
            // acceleration as a plain Euler-Maruyama kick.
            let w_mid = state.velocity.0 + state.acceleration.0 * (0.5 * h);
            let step = Twist::from_vector(w_mid * h);
            let noise: Vector6<f64> = sqrt_q * standard_normal_vector::<6, _>(&mut rng) * sqrt_h;
            state = State {
                pose: se3_exp(&step).compose(&state.pose),
                velocity: Twist::from_vector(state.velocity.0 + state.acceleration.0 * h),
                acceleration: Twist::from_vector(state.acceleration.0 + noise),
                stamp: state.stamp + h,
            };
        }
        let gamma = state_boxminus(&state, &nominal_end)
            .expect("sample drifted to the log branch cut");
        gammas.push(gamma);
    }

    let n = n_samples as f64;
    let mean_gamma = gammas.iter().fold(Vec18::zeros(), |acc, g| acc + g) / n;
    let mut cov = Mat18::zeros();
    for g in &gammas {
        let d = g - mean_gamma;
        cov += d * d.transpose();
    }
    cov /= n - 1.0;
    (state_boxplus(&mean_gamma, &nominal_end), cov)
}
