//! SO(3)/SE(3) primitives and the matrix functions needed by the
//! closed-form state transition.
//!
//! Twists are stacked as `[linear; angular]`: a pose increment is
//! `xi = [rho; phi]`, a body velocity is `w = [nu; omega]`. The 4x4
//! algebra representation is `xi^ = [[phi^, rho], [0, 0]]` and the 6x6
//! adjoint representation is `w^⋏ = [[omega^, nu^], [0, omega^]]`.

use nalgebra::{Matrix3, Matrix4, Matrix6, Vector3, Vector4, Vector6};
use thiserror::Error;

/// Angle below which trigonometric coefficient formulas switch to their
/// series expansions. The closed-form `alpha` coefficients cancel like
/// eps/phi^4 and eps/phi^6, so they are only trustworthy well above the
/// round-off floor; the 8-term series branch is accurate to ~1e-13 here.
pub const SMALL_ANGLE: f64 = 0.05;

/// Rotations closer than this to the pi branch cut are rejected by `se3_log`.
pub const LOG_BRANCH_MARGIN: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum Se3Error {
    #[error("rotation angle {angle} is within {margin} of pi; log branch is ambiguous")]
    LogBranch { angle: f64, margin: f64 },
    #[error("matrix violates the adjoint block structure (deviation {deviation:.3e})")]
    Structure { deviation: f64 },
}

/// A 6-vector twist `[linear; angular]`.
///
/// The same layout stores pose increments `xi = [rho; phi]`, body
/// velocities `w = [nu; omega]` and body accelerations.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Twist(pub Vector6<f64>);

impl Twist {
    pub fn zero() -> Self {
        Twist(Vector6::zeros())
    }

    pub fn new(linear: Vector3<f64>, angular: Vector3<f64>) -> Self {
        Twist(Vector6::new(
            linear.x, linear.y, linear.z, angular.x, angular.y, angular.z,
        ))
    }

    pub fn from_vector(v: Vector6<f64>) -> Self {
        Twist(v)
    }

    pub fn as_vector(&self) -> &Vector6<f64> {
        &self.0
    }

    /// Linear component (`rho` or `nu`).
    pub fn linear(&self) -> Vector3<f64> {
        self.0.fixed_rows::<3>(0).into_owned()
    }

    /// Angular component (`phi` or `omega`).
    pub fn angular(&self) -> Vector3<f64> {
        self.0.fixed_rows::<3>(3).into_owned()
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|x| x.is_finite())
    }
}

impl std::ops::Add for Twist {
    type Output = Twist;
    fn add(self, rhs: Twist) -> Twist {
        Twist(self.0 + rhs.0)
    }
}

impl std::ops::Sub for Twist {
    type Output = Twist;
    fn sub(self, rhs: Twist) -> Twist {
        Twist(self.0 - rhs.0)
    }
}

impl std::ops::Neg for Twist {
    type Output = Twist;
    fn neg(self) -> Twist {
        Twist(-self.0)
    }
}

impl std::ops::Mul<f64> for Twist {
    type Output = Twist;
    fn mul(self, s: f64) -> Twist {
        Twist(self.0 * s)
    }
}

/// Rigid transform on SE(3), stored as a rotation matrix and translation.
///
/// All paper-side formulas are matrix valued, so the rotation is kept as a
/// 3x3 orthonormal matrix; quaternions appear only in trajectory I/O.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

/// Orthonormality drift above which `compose`/`inverse` re-orthonormalize.
const ORTHO_RENORM_TOL: f64 = 1e-12;

impl Pose {
    pub fn identity() -> Self {
        Pose {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Self {
        Pose {
            rotation,
            translation,
        }
    }

    pub fn from_matrix(m: &Matrix4<f64>) -> Self {
        Pose {
            rotation: m.fixed_view::<3, 3>(0, 0).into_owned(),
            translation: m.fixed_view::<3, 1>(0, 3).into_owned(),
        }
    }

    pub fn matrix(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    /// Frobenius norm of `R^T R - I`.
    pub fn orthonormality_error(&self) -> f64 {
        (self.rotation.transpose() * self.rotation - Matrix3::identity()).norm()
    }

    /// Project the rotation back onto SO(3) by modified Gram-Schmidt.
    pub fn orthonormalized(&self) -> Pose {
        Pose {
            rotation: orthonormalize(&self.rotation),
            translation: self.translation,
        }
    }

    pub fn compose(&self, other: &Pose) -> Pose {
        let mut out = Pose {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        };
        if out.orthonormality_error() > ORTHO_RENORM_TOL {
            out = out.orthonormalized();
        }
        out
    }

    pub fn inverse(&self) -> Pose {
        let rt = self.rotation.transpose();
        Pose {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    pub fn transform_homogeneous(&self, p: &Vector4<f64>) -> Vector4<f64> {
        let q = self.rotation * p.fixed_rows::<3>(0) + self.translation * p[3];
        Vector4::new(q.x, q.y, q.z, p[3])
    }

    /// The 6x6 adjoint `Ad(T) = [[R, t^ R], [0, R]]`.
    pub fn adjoint(&self) -> Matrix6<f64> {
        let mut ad = Matrix6::zeros();
        ad.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation);
        ad.fixed_view_mut::<3, 3>(0, 3)
            .copy_from(&(hat3(&self.translation) * self.rotation));
        ad.fixed_view_mut::<3, 3>(3, 3).copy_from(&self.rotation);
        ad
    }
}

fn orthonormalize(m: &Matrix3<f64>) -> Matrix3<f64> {
    let mut a = m.column(0).into_owned();
    a /= a.norm();
    let mut b = m.column(1).into_owned();
    b -= a * a.dot(&b);
    b /= b.norm();
    let c = a.cross(&b);
    Matrix3::from_columns(&[a, b, c])
}

/// The 6x6 adjoint representation of a twist, `[[omega^, nu^], [0, omega^]]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdjointMatrix(pub Matrix6<f64>);

impl AdjointMatrix {
    pub fn zero() -> Self {
        AdjointMatrix(Matrix6::zeros())
    }

    pub fn as_matrix(&self) -> &Matrix6<f64> {
        &self.0
    }

    /// Norm of the angular part, the `phi` in the quintic identity
    /// `X^5 + 2 phi^2 X^3 + phi^4 X = 0`.
    pub fn angular_norm(&self) -> f64 {
        vee3(&self.0.fixed_view::<3, 3>(3, 3).into_owned()).norm()
    }
}

/// `hat3(v) w = v x w`; maps a 3-vector to its skew-symmetric matrix.
pub fn hat3(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Inverse of `hat3`; extracts the vector from a skew-symmetric matrix.
pub fn vee3(m: &Matrix3<f64>) -> Vector3<f64> {
    Vector3::new(m[(2, 1)], m[(0, 2)], m[(1, 0)])
}

/// 4x4 algebra representation `[[phi^, rho], [0, 0]]` of a twist.
pub fn hat4(xi: &Twist) -> Matrix4<f64> {
    let mut m = Matrix4::zeros();
    m.fixed_view_mut::<3, 3>(0, 0)
        .copy_from(&hat3(&xi.angular()));
    m.fixed_view_mut::<3, 1>(0, 3).copy_from(&xi.linear());
    m
}

/// Inverse of `hat4`.
pub fn vee4(m: &Matrix4<f64>) -> Twist {
    Twist::new(
        m.fixed_view::<3, 1>(0, 3).into_owned(),
        vee3(&m.fixed_view::<3, 3>(0, 0).into_owned()),
    )
}

/// Adjoint representation of a twist; the Lie-algebra map `w -> w^⋏`.
pub fn curly_wedge(w: &Twist) -> AdjointMatrix {
    let oh = hat3(&w.angular());
    let nh = hat3(&w.linear());
    let mut m = Matrix6::zeros();
    m.fixed_view_mut::<3, 3>(0, 0).copy_from(&oh);
    m.fixed_view_mut::<3, 3>(0, 3).copy_from(&nh);
    m.fixed_view_mut::<3, 3>(3, 3).copy_from(&oh);
    AdjointMatrix(m)
}

/// Deviation of a 6x6 matrix from the adjoint block structure.
pub fn adjoint_structure_error(m: &Matrix6<f64>) -> f64 {
    let a = m.fixed_view::<3, 3>(0, 0).into_owned();
    let b = m.fixed_view::<3, 3>(0, 3).into_owned();
    let c = m.fixed_view::<3, 3>(3, 0).into_owned();
    let d = m.fixed_view::<3, 3>(3, 3).into_owned();
    let skew = |x: &Matrix3<f64>| (x + x.transpose()).norm();
    c.norm() + (a - d).norm() + skew(&a) + skew(&b)
}

/// Inverse of `curly_wedge`; errors if the block structure is violated.
pub fn curly_vee(a: &AdjointMatrix) -> Result<Twist, Se3Error> {
    let m = &a.0;
    let deviation = adjoint_structure_error(m);
    let scale = 1.0 + m.norm();
    if deviation > 1e-9 * scale {
        return Err(Se3Error::Structure { deviation });
    }
    Ok(Twist::new(
        vee3(&m.fixed_view::<3, 3>(0, 3).into_owned()),
        vee3(&m.fixed_view::<3, 3>(0, 0).into_owned()),
    ))
}

/// SO(3) exponential by the Rodrigues formula.
pub fn so3_exp(phi: &Vector3<f64>) -> Matrix3<f64> {
    let theta = phi.norm();
    let ph = hat3(phi);
    let (a, b) = if theta < SMALL_ANGLE {
        let t2 = theta * theta;
        (
            1.0 - t2 / 6.0 + t2 * t2 / 120.0,
            0.5 - t2 / 24.0 + t2 * t2 / 720.0,
        )
    } else {
        (theta.sin() / theta, (1.0 - theta.cos()) / (theta * theta))
    };
    Matrix3::identity() + ph * a + ph * ph * b
}

/// SO(3) left Jacobian `J = I + b phi^ + c (phi^)^2`.
pub fn so3_left_jacobian(phi: &Vector3<f64>) -> Matrix3<f64> {
    let theta = phi.norm();
    let ph = hat3(phi);
    let (b, c) = if theta < SMALL_ANGLE {
        let t2 = theta * theta;
        (
            0.5 - t2 / 24.0 + t2 * t2 / 720.0,
            1.0 / 6.0 - t2 / 120.0 + t2 * t2 / 5040.0,
        )
    } else {
        (
            (1.0 - theta.cos()) / (theta * theta),
            (theta - theta.sin()) / (theta * theta * theta),
        )
    };
    Matrix3::identity() + ph * b + ph * ph * c
}

/// Inverse of the SO(3) left Jacobian.
pub fn so3_left_jacobian_inv(phi: &Vector3<f64>) -> Matrix3<f64> {
    let theta = phi.norm();
    let ph = hat3(phi);
    let c = if theta < SMALL_ANGLE {
        let t2 = theta * theta;
        1.0 / 12.0 + t2 / 720.0 + t2 * t2 / 30240.0
    } else {
        1.0 / (theta * theta)
            - (1.0 + theta.cos()) / (2.0 * theta * theta.sin())
    };
    Matrix3::identity() - ph * 0.5 + ph * ph * c
}

/// SE(3) exponential map.
pub fn se3_exp(xi: &Twist) -> Pose {
    let phi = xi.angular();
    Pose {
        rotation: so3_exp(&phi),
        translation: so3_left_jacobian(&phi) * xi.linear(),
    }
}

/// SE(3) logarithm on the principal branch.
///
/// Errors when the rotation angle is within `LOG_BRANCH_MARGIN` of pi.
pub fn se3_log(t: &Pose) -> Result<Twist, Se3Error> {
    let phi = so3_log(&t.rotation)?;
    let rho = so3_left_jacobian_inv(&phi) * t.translation;
    Ok(Twist::new(rho, phi))
}

/// SO(3) logarithm on the principal branch.
pub fn so3_log(r: &Matrix3<f64>) -> Result<Vector3<f64>, Se3Error> {
    let cos_theta = ((r.trace() - 1.0) * 0.5).clamp(-1.0, 1.0);
    let theta = cos_theta.acos();
    if theta > std::f64::consts::PI - LOG_BRANCH_MARGIN {
        return Err(Se3Error::LogBranch {
            angle: theta,
            margin: LOG_BRANCH_MARGIN,
        });
    }
    let w = vee3(&(r - r.transpose())) * 0.5; // = sin(theta) * axis
    if theta < SMALL_ANGLE {
        // w = sin(theta) a, phi = theta a: scale by theta/sin(theta).
        let t2 = theta * theta;
        Ok(w * (1.0 + t2 / 6.0 + 7.0 * t2 * t2 / 360.0))
    } else {
        Ok(w * (theta / theta.sin()))
    }
}

/// Polynomial in an adjoint matrix: `k0 I + k1 X + k2 X^2 + k3 X^3 + k4 X^4`.
fn adjoint_poly(x: &Matrix6<f64>, k: [f64; 5]) -> Matrix6<f64> {
    let x2 = x * x;
    let x3 = x2 * x;
    let x4 = x3 * x;
    Matrix6::identity() * k[0] + x * k[1] + x2 * k[2] + x3 * k[3] + x4 * k[4]
}

/// Truncated series `sum_{n=0..7} X^n / (n+shift)!`.
fn adjoint_series(x: &Matrix6<f64>, shift: usize) -> Matrix6<f64> {
    let mut fact = 1.0;
    for i in 1..=shift {
        fact *= i as f64;
    }
    let mut acc = Matrix6::identity() / fact;
    let mut term = Matrix6::identity() / fact;
    for n in 1..=7 {
        term = term * x / (n + shift) as f64;
        acc += term;
    }
    acc
}

fn matfun_j_closed(x: &Matrix6<f64>, phi: f64) -> Matrix6<f64> {
    let (s, c) = phi.sin_cos();
    let p2 = phi * phi;
    let p3 = p2 * phi;
    let p4 = p3 * phi;
    let p5 = p4 * phi;
    adjoint_poly(
        x,
        [
            1.0,
            (4.0 - phi * s - 4.0 * c) / (2.0 * p2),
            (4.0 * phi - 5.0 * s + phi * c) / (2.0 * p3),
            (2.0 - phi * s - 2.0 * c) / (2.0 * p4),
            (2.0 * phi - 3.0 * s + phi * c) / (2.0 * p5),
        ],
    )
}

/// Left Jacobian of SE(3) as a matrix function of the adjoint:
/// `J(X) = sum_n X^n / (n+1)!`.
pub fn matfun_j(x: &AdjointMatrix) -> Matrix6<f64> {
    let phi = x.angular_norm();
    if phi < SMALL_ANGLE {
        adjoint_series(&x.0, 1)
    } else {
        matfun_j_closed(&x.0, phi)
    }
}

/// Second-order matrix function `H(X) = sum_n X^n / (n+2)!`, the
/// double-integral companion of the left Jacobian. Satisfies
/// `J(X) = I + X H(X)`.
fn matfun_h_closed(x: &Matrix6<f64>, phi: f64) -> Matrix6<f64> {
    let (s, c) = phi.sin_cos();
    let p2 = phi * phi;
    let p3 = p2 * phi;
    let p4 = p3 * phi;
    let p5 = p4 * phi;
    let p6 = p5 * phi;
    adjoint_poly(
        x,
        [
            0.5,
            (4.0 * phi + phi * c - 5.0 * s) / (2.0 * p3),
            (2.0 * p2 + phi * s + 6.0 * c - 6.0) / (2.0 * p4),
            (2.0 * phi + phi * c - 3.0 * s) / (2.0 * p5),
            (p2 + phi * s + 4.0 * c - 4.0) / (2.0 * p6),
        ],
    )
}

pub fn matfun_h(x: &AdjointMatrix) -> Matrix6<f64> {
    let phi = x.angular_norm();
    if phi < SMALL_ANGLE {
        adjoint_series(&x.0, 2)
    } else {
        matfun_h_closed(&x.0, phi)
    }
}

/// Exponential of an adjoint matrix via `exp(X) = I + X J(X)`.
///
/// Equals `Ad(exp(w^))` for `X = w^⋏`.
pub fn adjoint_exp(x: &AdjointMatrix) -> Matrix6<f64> {
    Matrix6::identity() + x.0 * matfun_j(x)
}

/// Inverse of the SE(3) left Jacobian, solved from the closed form of `J`.
pub fn matfun_j_inv(x: &AdjointMatrix) -> Matrix6<f64> {
    matfun_j(x)
        .lu()
        .try_inverse()
        .expect("left Jacobian is invertible away from the pi branch")
}
