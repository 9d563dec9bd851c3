//! Polar radar measurement model (range, azimuth, elevation, radial
//! velocity) with its linearization, plus the Cartesian position model kept
//! as the constant-velocity baseline.

use nalgebra::{Matrix3, Matrix4, SMatrix, Vector3, Vector4, Vector6};
use thiserror::Error;

use crate::prior::State;
use crate::se3::{hat3, Pose};

pub type MeasJacobian = SMatrix<f64, 4, 18>;

#[derive(Debug, Error)]
pub enum MeasurementError {
    #[error("point collapses onto the sensor origin (|r_s| = {norm:.3e})")]
    BehindSensor { norm: f64 },
    #[error("degenerate point at the sensor origin")]
    DegeneratePoint,
    #[error("elevation within 1e-9 of +-pi/2; azimuth undefined")]
    Gimbal,
}

/// One radar detection in polar coordinates plus radial velocity, with its
/// measurement noise covariance over `[r, theta, phi, v]`.
#[derive(Debug, Clone, PartialEq)]
pub struct RadarDetection {
    pub range: f64,
    pub azimuth: f64,
    pub elevation: f64,
    pub radial_velocity: f64,
    pub noise_cov: Matrix4<f64>,
}

impl RadarDetection {
    pub fn new(
        range: f64,
        azimuth: f64,
        elevation: f64,
        radial_velocity: f64,
        noise_cov: Matrix4<f64>,
    ) -> Self {
        debug_assert!(range > 0.0);
        debug_assert!(azimuth > -std::f64::consts::PI && azimuth <= std::f64::consts::PI);
        debug_assert!(elevation.abs() < std::f64::consts::FRAC_PI_2);
        RadarDetection {
            range,
            azimuth,
            elevation,
            radial_velocity,
            noise_cov,
        }
    }

    /// The measurement as a stacked 4-vector `[r, theta, phi, v]`.
    pub fn vector(&self) -> Vector4<f64> {
        Vector4::new(self.range, self.azimuth, self.elevation, self.radial_velocity)
    }

    /// Spatial part `[r, theta, phi]`.
    pub fn polar(&self) -> Vector3<f64> {
        Vector3::new(self.range, self.azimuth, self.elevation)
    }
}

/// One timestamped frame of detections.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RadarScan {
    pub stamp: f64,
    pub detections: Vec<RadarDetection>,
}

/// Homogeneous world-frame landmark with association bookkeeping.
#[derive(Debug, Clone, PartialEq)]
pub struct MapPoint {
    /// Homogeneous world position, last component exactly 1.
    pub position: Vector4<f64>,
    pub id: u64,
    pub hits: u32,
    pub last_seen: u64,
}

impl MapPoint {
    pub fn new(world_position: Vector3<f64>, id: u64, frame: u64) -> Self {
        MapPoint {
            position: Vector4::new(world_position.x, world_position.y, world_position.z, 1.0),
            id,
            hits: 1,
            last_seen: frame,
        }
    }

    pub fn xyz(&self) -> Vector3<f64> {
        self.position.fixed_rows::<3>(0).into_owned()
    }
}

/// Radar sensor description: extrinsic calibration, field of view, range
/// limits, polar noise magnitudes and frame rate.
#[derive(Debug, Clone, PartialEq)]
pub struct SensorModel {
    /// Vehicle-to-sensor transform `T_sv`.
    pub t_sv: Pose,
    /// Azimuth half-angle of the field of view (rad).
    pub fov_azimuth: f64,
    /// Elevation half-angle of the field of view (rad).
    pub fov_elevation: f64,
    pub r_min: f64,
    pub r_max: f64,
    /// 1-sigma noise: range (m), azimuth (rad), elevation (rad),
    /// radial velocity (m/s).
    pub sigma_range: f64,
    pub sigma_azimuth: f64,
    pub sigma_elevation: f64,
    pub sigma_doppler: f64,
    pub frame_rate: f64,
}

impl Default for SensorModel {
    /// Front-mounted imaging radar: 0.02 m range, 0.15 deg azimuth,
    /// 0.3 deg elevation, 0.01 m/s radial velocity, 13 Hz.
    fn default() -> Self {
        let sensor_in_vehicle = Pose::new(Matrix3::identity(), Vector3::new(2.5, 0.0, 0.5));
        SensorModel {
            t_sv: sensor_in_vehicle.inverse(),
            fov_azimuth: 60.0_f64.to_radians(),
            fov_elevation: 15.0_f64.to_radians(),
            r_min: 1.0,
            r_max: 100.0,
            sigma_range: 0.02,
            sigma_azimuth: 0.15_f64.to_radians(),
            sigma_elevation: 0.3_f64.to_radians(),
            sigma_doppler: 0.01,
            frame_rate: 13.0,
        }
    }
}

impl SensorModel {
    /// Default per-detection noise covariance `diag(sr^2, st^2, sp^2, sv^2)`.
    pub fn noise_cov(&self) -> Matrix4<f64> {
        Matrix4::from_diagonal(&Vector4::new(
            self.sigma_range * self.sigma_range,
            self.sigma_azimuth * self.sigma_azimuth,
            self.sigma_elevation * self.sigma_elevation,
            self.sigma_doppler * self.sigma_doppler,
        ))
    }

    /// Fixed Cartesian position covariance for the baseline model: the polar
    /// sigmas mapped at a single reference range, which is exactly the
    /// mismodeling the polar model removes.
    pub fn cartesian_noise_cov(&self, reference_range: f64) -> Matrix3<f64> {
        let st = reference_range * self.sigma_azimuth;
        let sp = reference_range * self.sigma_elevation;
        Matrix3::from_diagonal(&Vector3::new(
            self.sigma_range * self.sigma_range,
            st * st,
            sp * sp,
        ))
    }

    /// Whether a sensor-frame polar point lies inside the field of view and
    /// range limits.
    pub fn in_fov(&self, polar: &Vector3<f64>) -> bool {
        polar.x >= self.r_min
            && polar.x <= self.r_max
            && polar.y.abs() <= self.fov_azimuth
            && polar.z.abs() <= self.fov_elevation
    }
}

/// Sensor-frame coordinates of a map point: `r_s = dehom(T_sv T_vi p)`.
pub fn point_in_sensor(
    x: &State,
    sensor: &SensorModel,
    p: &MapPoint,
) -> Result<Vector3<f64>, MeasurementError> {
    let q = sensor
        .t_sv
        .transform_homogeneous(&x.pose.transform_homogeneous(&p.position));
    let r_s = q.fixed_rows::<3>(0).into_owned();
    let norm = r_s.norm();
    if norm < 1e-6 {
        return Err(MeasurementError::BehindSensor { norm });
    }
    Ok(r_s)
}

/// Cartesian-to-polar conversion `[|r|, atan2(y, x), asin(z/|r|)]`.
pub fn polar_from_cart(r_s: &Vector3<f64>) -> Result<Vector3<f64>, MeasurementError> {
    let rho = r_s.norm();
    if rho <= 1e-6 {
        return Err(MeasurementError::DegeneratePoint);
    }
    let elevation = (r_s.z / rho).clamp(-1.0, 1.0).asin();
    if (elevation.abs() - std::f64::consts::FRAC_PI_2).abs() < 1e-9 {
        return Err(MeasurementError::Gimbal);
    }
    Ok(Vector3::new(rho, r_s.y.atan2(r_s.x), elevation))
}

/// Inverse conversion from `[r, theta, phi]` to sensor-frame Cartesian.
pub fn cart_from_polar(polar: &Vector3<f64>) -> Vector3<f64> {
    let (r, theta, phi) = (polar.x, polar.y, polar.z);
    let (st, ct) = theta.sin_cos();
    let (sp, cp) = phi.sin_cos();
    Vector3::new(r * cp * ct, r * cp * st, r * sp)
}

/// Sensor-frame twist `[nu_s; omega_s] = Ad(T_sv) w` of the state.
fn sensor_frame_twist(x: &State, sensor: &SensorModel) -> (Vector3<f64>, Vector3<f64>) {
    let w_s: Vector6<f64> = sensor.t_sv.adjoint() * x.velocity.0;
    (
        w_s.fixed_rows::<3>(0).into_owned(),
        w_s.fixed_rows::<3>(3).into_owned(),
    )
}

/// Predicted radial velocity of a static world point.
///
/// Equals the range rate `d|r_s(t)|/dt` of the point under the nominal
/// flow: a vehicle closing on a static target measures a negative value.
pub fn radial_velocity_pred(
    x: &State,
    sensor: &SensorModel,
    p: &MapPoint,
) -> Result<f64, MeasurementError> {
    let r_s = point_in_sensor(x, sensor, p)?;
    Ok(radial_velocity_from_sensor_point(x, sensor, &r_s))
}

/// Radial velocity given an already-computed sensor-frame point.
pub fn radial_velocity_from_sensor_point(
    x: &State,
    sensor: &SensorModel,
    r_s: &Vector3<f64>,
) -> f64 {
    let (nu_s, omega_s) = sensor_frame_twist(x, sensor);
    let r_dot = omega_s.cross(r_s) + nu_s;
    r_s.dot(&r_dot) / r_s.norm()
}

/// Noise-free prediction `g(x, p) = [r, theta, phi, v]`.
pub fn predict_detection(
    x: &State,
    sensor: &SensorModel,
    p: &MapPoint,
) -> Result<Vector4<f64>, MeasurementError> {
    let r_s = point_in_sensor(x, sensor, p)?;
    let polar = polar_from_cart(&r_s)?;
    let v = radial_velocity_from_sensor_point(x, sensor, &r_s);
    Ok(Vector4::new(polar.x, polar.y, polar.z, v))
}

/// Jacobian of the Cartesian-to-polar conversion at `r_s`.
pub fn polar_conversion_jacobian(r_s: &Vector3<f64>) -> Matrix3<f64> {
    let (x, y, z) = (r_s.x, r_s.y, r_s.z);
    let rho2 = r_s.norm_squared();
    let rho = rho2.sqrt();
    let rxy2 = x * x + y * y;
    let rxy = rxy2.sqrt();
    Matrix3::new(
        x / rho,
        y / rho,
        z / rho,
        -y / rxy2,
        x / rxy2,
        0.0,
        -z * x / (rho2 * rxy),
        -z * y / (rho2 * rxy),
        rxy / rho2,
    )
}

/// Jacobian of the sensor-frame point w.r.t. the left pose perturbation:
/// `d r_s / d xi = C_sv [I, -(T_vi p)^]`.
fn point_jacobian_wrt_pose(x: &State, sensor: &SensorModel, p: &MapPoint) -> SMatrix<f64, 3, 6> {
    let q_v = x
        .pose
        .transform_homogeneous(&p.position)
        .fixed_rows::<3>(0)
        .into_owned();
    let c_sv = sensor.t_sv.rotation;
    let mut g = SMatrix::<f64, 3, 6>::zeros();
    g.fixed_view_mut::<3, 3>(0, 0).copy_from(&c_sv);
    g.fixed_view_mut::<3, 3>(0, 3)
        .copy_from(&(-c_sv * hat3(&q_v)));
    g
}

/// Measurement Jacobian `G = dg/d[xi; eta; zeta]` (4x18). The acceleration
/// columns are zero; rows 1-3 factor as `S_polar * d r_s / d xi`.
pub fn measurement_jacobian(
    x: &State,
    sensor: &SensorModel,
    p: &MapPoint,
) -> Result<MeasJacobian, MeasurementError> {
    let r_s = point_in_sensor(x, sensor, p)?;
    let rho = r_s.norm();
    polar_from_cart(&r_s)?; // reject gimbal/degenerate configurations
    let g_pose = point_jacobian_wrt_pose(x, sensor, p);
    let s_polar = polar_conversion_jacobian(&r_s);
    let (nu_s, _) = sensor_frame_twist(x, sensor);
    let r_hat = r_s / rho;
    let v = radial_velocity_from_sensor_point(x, sensor, &r_s);

    let mut g = MeasJacobian::zeros();
    g.fixed_view_mut::<3, 6>(0, 0).copy_from(&(s_polar * g_pose));
    // dv/d r_s = (nu_s - v r_hat)^T / rho, chained through d r_s / d xi
    let dv_drs = ((nu_s - r_hat * v) / rho).transpose();
    g.fixed_view_mut::<1, 6>(3, 0).copy_from(&(dv_drs * g_pose));
    // dv/d eta = r_hat^T [I, -r_s^] Ad(T_sv)
    let mut sel = SMatrix::<f64, 3, 6>::zeros();
    sel.fixed_view_mut::<3, 3>(0, 0)
        .copy_from(&Matrix3::identity());
    sel.fixed_view_mut::<3, 3>(0, 3).copy_from(&(-hat3(&r_s)));
    let dv_deta = r_hat.transpose() * sel * sensor.t_sv.adjoint();
    g.fixed_view_mut::<1, 6>(3, 6).copy_from(&dv_deta);
    Ok(g)
}

/// Cartesian baseline model: sensor-frame position prediction and its 3x18
/// Jacobian.
pub fn cartesian_model(
    x: &State,
    sensor: &SensorModel,
    p: &MapPoint,
) -> Result<(Vector3<f64>, SMatrix<f64, 3, 18>), MeasurementError> {
    let r_s = point_in_sensor(x, sensor, p)?;
    let mut g = SMatrix::<f64, 3, 18>::zeros();
    g.fixed_view_mut::<3, 6>(0, 0)
        .copy_from(&point_jacobian_wrt_pose(x, sensor, p));
    Ok((r_s, g))
}
