//! Maximum-likelihood detection-to-map association with chi-squared gating,
//! and the covariance-inflation diagnostic for unmodeled acceleration.

use std::collections::HashMap;

use nalgebra::{Matrix4, Vector3, Vector4};
use statrs::distribution::{ChiSquared, ContinuousCDF};
use thiserror::Error;

use crate::measurement::{
    cart_from_polar, measurement_jacobian, predict_detection, MapPoint, RadarDetection,
    RadarScan, SensorModel,
};
use crate::prior::{
    cv, discretize, propagate_nominal, Mat18, ProcessNoise, State, StateGaussian,
};

#[derive(Debug, Error)]
pub enum AssociationError {
    #[error("marginal covariance is numerically singular (cond {cond:.3e})")]
    SingularCovariance { cond: f64 },
}

/// Gate threshold and map capacity.
#[derive(Debug, Clone, PartialEq)]
pub struct AssociationConfig {
    /// Mahalanobis-squared acceptance threshold.
    pub gate: f64,
    pub max_map_size: usize,
}

impl Default for AssociationConfig {
    fn default() -> Self {
        AssociationConfig {
            gate: chi2_gate(0.95, 4),
            max_map_size: 1500,
        }
    }
}

/// One accepted association.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Assignment {
    pub map_id: u64,
    pub detection: usize,
    pub d2: f64,
}

/// One-to-one assignment of detections to map points.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AssignmentSet {
    pub pairs: Vec<Assignment>,
    pub unmatched_detections: Vec<usize>,
    pub unmatched_map_points: Vec<u64>,
}

/// Capped landmark collection with deterministic eviction.
#[derive(Debug, Clone)]
pub struct LandmarkMap {
    points: Vec<MapPoint>,
    next_id: u64,
    capacity: usize,
}

impl LandmarkMap {
    pub fn new(capacity: usize) -> Self {
        LandmarkMap {
            points: Vec::new(),
            next_id: 0,
            capacity,
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn points(&self) -> &[MapPoint] {
        &self.points
    }

    /// Insert a world point, evicting the lowest-hits / oldest-seen / lowest-id
    /// point when at capacity.
    pub fn insert(&mut self, world_position: Vector3<f64>, frame: u64) -> u64 {
        if self.points.len() >= self.capacity {
            let victim = self
                .points
                .iter()
                .enumerate()
                .min_by_key(|(_, p)| (p.hits, p.last_seen, p.id))
                .map(|(i, _)| i)
                .expect("capacity > 0");
            self.points.swap_remove(victim);
        }
        let id = self.next_id;
        self.next_id += 1;
        self.points.push(MapPoint::new(world_position, id, frame));
        id
    }

    pub fn record_hit(&mut self, id: u64, frame: u64) {
        if let Some(p) = self.points.iter_mut().find(|p| p.id == id) {
            p.hits += 1;
            p.last_seen = frame;
        }
    }
}

/// Marginal likelihood covariance `S = G P G^T + R`.
pub fn marginal_covariance(
    g: &nalgebra::SMatrix<f64, 4, 18>,
    p_pred: &Mat18,
    r: &Matrix4<f64>,
) -> Result<Matrix4<f64>, AssociationError> {
    let s = g * p_pred * g.transpose() + r;
    check_conditioning(&s)?;
    Ok(s)
}

fn check_conditioning(s: &Matrix4<f64>) -> Result<(), AssociationError> {
    let eigs = s.symmetric_eigenvalues();
    let max = eigs.max();
    let min = eigs.min();
    if min <= 0.0 || max / min > 1e12 {
        return Err(AssociationError::SingularCovariance {
            cond: if min > 0.0 { max / min } else { f64::INFINITY },
        });
    }
    Ok(())
}

/// Squared Mahalanobis distance `e^T S^-1 e` via Cholesky factorization.
pub fn mahalanobis_sq(e: &Vector4<f64>, s: &Matrix4<f64>) -> Result<f64, AssociationError> {
    let chol = s
        .cholesky()
        .ok_or(AssociationError::SingularCovariance { cond: f64::INFINITY })?;
    let y = chol.l().solve_lower_triangular(e).ok_or(
        AssociationError::SingularCovariance { cond: f64::INFINITY },
    )?;
    Ok(y.norm_squared())
}

/// Chi-squared quantile: the gate threshold at a confidence level for the
/// given degrees of freedom.
pub fn chi2_gate(confidence: f64, dof: usize) -> f64 {
    assert!(confidence > 0.0 && confidence < 1.0);
    ChiSquared::new(dof as f64)
        .expect("dof > 0")
        .inverse_cdf(confidence)
}

fn wrap_angle(a: f64) -> f64 {
    (a + std::f64::consts::PI).rem_euclid(2.0 * std::f64::consts::PI) - std::f64::consts::PI
}

/// Residual in polar measurement space with azimuth wrapping.
pub fn polar_residual(z: &Vector4<f64>, pred: &Vector4<f64>) -> Vector4<f64> {
    Vector4::new(
        z[0] - pred[0],
        wrap_angle(z[1] - pred[1]),
        z[2] - pred[2],
        z[3] - pred[3],
    )
}

/// Uniform hash grid over detection positions in sensor-frame Cartesian.
struct DetectionGrid {
    cell: f64,
    cells: HashMap<(i64, i64, i64), Vec<usize>>,
}

impl DetectionGrid {
    fn build(positions: &[Option<Vector3<f64>>], cell: f64) -> Self {
        let mut cells: HashMap<(i64, i64, i64), Vec<usize>> = HashMap::new();
        for (i, p) in positions.iter().enumerate() {
            if let Some(p) = p {
                cells.entry(Self::key(p, cell)).or_default().push(i);
            }
        }
        DetectionGrid { cell, cells }
    }

    fn key(p: &Vector3<f64>, cell: f64) -> (i64, i64, i64) {
        (
            (p.x / cell).floor() as i64,
            (p.y / cell).floor() as i64,
            (p.z / cell).floor() as i64,
        )
    }

    /// All indices whose cell intersects the sphere's bounding box; a
    /// superset of the detections within `radius` of `center`.
    fn query(&self, center: &Vector3<f64>, radius: f64, out: &mut Vec<usize>) {
        out.clear();
        let lo = Self::key(&(center - Vector3::repeat(radius)), self.cell);
        let hi = Self::key(&(center + Vector3::repeat(radius)), self.cell);
        for ix in lo.0..=hi.0 {
            for iy in lo.1..=hi.1 {
                for iz in lo.2..=hi.2 {
                    if let Some(v) = self.cells.get(&(ix, iy, iz)) {
                        out.extend_from_slice(v);
                    }
                }
            }
        }
        out.sort_unstable();
    }
}

/// Everything association needs to know about one map point under some
/// prediction model.
pub(crate) struct CandidateModel {
    pub z_pred: Vector4<f64>,
    pub s: Matrix4<f64>,
    /// Predicted detection position in sensor-frame Cartesian.
    pub cart_pred: Vector3<f64>,
    /// Conservative Cartesian search radius: no detection passing the gate
    /// can lie farther from `cart_pred`.
    pub radius: f64,
}

/// Core of the association: per-map-point candidate pruning through the
/// grid, gating, then greedy one-to-one resolution in ascending d2 order
/// (ties broken by detection index, then map id).
pub(crate) fn associate_candidates(
    scan: &RadarScan,
    map_entries: &[(u64, Option<CandidateModel>)],
    residual: impl Fn(&RadarDetection, &Vector4<f64>) -> Vector4<f64>,
    gate: f64,
) -> AssignmentSet {
    let positions: Vec<Option<Vector3<f64>>> = scan
        .detections
        .iter()
        .map(|d| Some(cart_from_polar(&d.polar())))
        .collect();
    let grid = DetectionGrid::build(&positions, 2.0);

    let mut gated: Vec<(f64, usize, u64)> = Vec::new();
    let mut candidates = Vec::new();
    for (map_id, model) in map_entries {
        let Some(model) = model else { continue };
        let chol = match model.s.cholesky() {
            Some(c) => c,
            None => continue,
        };
        grid.query(&model.cart_pred, model.radius, &mut candidates);
        for &i in &candidates {
            let e = residual(&scan.detections[i], &model.z_pred);
            if let Some(y) = chol.l().solve_lower_triangular(&e) {
                let d2 = y.norm_squared();
                if d2 <= gate {
                    gated.push((d2, i, *map_id));
                }
            }
        }
    }

    gated.sort_by(|a, b| {
        a.0.partial_cmp(&b.0)
            .unwrap()
            .then(a.1.cmp(&b.1))
            .then(a.2.cmp(&b.2))
    });

    let mut det_used = vec![false; scan.detections.len()];
    let mut map_used: HashMap<u64, bool> = HashMap::new();
    let mut pairs = Vec::new();
    for (d2, det, map_id) in gated {
        if det_used[det] || map_used.get(&map_id).copied().unwrap_or(false) {
            continue;
        }
        det_used[det] = true;
        map_used.insert(map_id, true);
        pairs.push(Assignment {
            map_id,
            detection: det,
            d2,
        });
    }

    let unmatched_detections = (0..scan.detections.len())
        .filter(|&i| !det_used[i])
        .collect();
    let unmatched_map_points = map_entries
        .iter()
        .map(|(id, _)| *id)
        .filter(|id| !map_used.get(id).copied().unwrap_or(false))
        .collect();
    AssignmentSet {
        pairs,
        unmatched_detections,
        unmatched_map_points,
    }
}

/// Conservative Cartesian search radius for a polar-space gate: every
/// residual component is bounded by `delta = sqrt(gate * lambda_max(S))`,
/// and a chord subtending `|dtheta| + |dphi|` at range `r` is at most
/// `r (|dtheta| + |dphi|)`.
fn polar_search_radius(s: &Matrix4<f64>, gate: f64, pred_range: f64) -> f64 {
    let lam_max = s.symmetric_eigenvalues().max().max(0.0);
    let delta = (gate * lam_max).sqrt();
    delta * (1.0 + 2.0 * pred_range)
}

pub(crate) fn polar_candidate_model(
    predicted: &StateGaussian,
    sensor: &SensorModel,
    p: &MapPoint,
    r: &Matrix4<f64>,
    gate: f64,
) -> Option<CandidateModel> {
    let z_pred = predict_detection(&predicted.mean, sensor, p).ok()?;
    let g = measurement_jacobian(&predicted.mean, sensor, p).ok()?;
    let s = g * predicted.cov * g.transpose() + r;
    let cart_pred = cart_from_polar(&z_pred.fixed_rows::<3>(0).into_owned());
    let radius = polar_search_radius(&s, gate, z_pred[0]);
    Some(CandidateModel {
        z_pred,
        s,
        cart_pred,
        radius,
    })
}

/// Maximum-likelihood association of a scan against the map under the polar
/// measurement model.
///
/// Deterministic given inputs; every accepted pair satisfies `d2 <= gate`;
/// detections and map points are used at most once.
pub fn associate(
    scan: &RadarScan,
    map: &LandmarkMap,
    predicted: &StateGaussian,
    sensor: &SensorModel,
    cfg: &AssociationConfig,
) -> AssignmentSet {
    let entries: Vec<(u64, Option<CandidateModel>)> = map
        .points()
        .iter()
        .map(|p| {
            (
                p.id,
                polar_candidate_model(predicted, sensor, p, &sensor.noise_cov(), cfg.gate),
            )
        })
        .collect();
    associate_candidates(
        scan,
        &entries,
        |det, pred| polar_residual(&det.vector(), pred),
        cfg.gate,
    )
}

/// Per-row output of the inflation diagnostic, mirroring the CSV columns.
#[derive(Debug, Clone)]
pub struct InflationRow {
    pub frame: usize,
    pub predictor: &'static str,
    pub n_matched: usize,
    pub n_wrong: usize,
    pub mean_d2: f64,
    pub det_s_mean: f64,
}

/// Aggregated inflation diagnostic.
#[derive(Debug, Clone)]
pub struct InflationReport {
    pub rows: Vec<InflationRow>,
    /// Mean over trials of det(S_tilde)/det(S): the inflation of the
    /// acceleration-ignoring marginal covariance relative to the full one.
    pub mean_det_ratio: f64,
    pub cv_wrong_rate: f64,
    pub ca_wrong_rate: f64,
    pub mean_residual_cv: f64,
    pub mean_residual_ca: f64,
}

impl InflationReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("frame,predictor,n_matched,n_wrong,mean_d2,det_S_mean\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{:.9e},{:.9e}\n",
                r.frame, r.predictor, r.n_matched, r.n_wrong, r.mean_d2, r.det_s_mean
            ));
        }
        out
    }
}

/// Covariance-inflation diagnostic on a two-target scene.
///
/// For each consecutive pair of ground-truth states, both predictors start
/// from the true state at `k-1`; the constant-velocity predictor drops the
/// acceleration. A correct target is observed from the true state at `k`
/// and a decoy target is placed where the CV prediction expects the correct
/// one, which is the mis-association geometry caused by the biased and
/// inflated marginal likelihood.
#[allow(clippy::too_many_arguments)]
pub fn inflation_diagnostic(
    true_traj: &[State],
    sensor: &SensorModel,
    q_ca: &ProcessNoise,
    q_cv: &ProcessNoise,
    p0: &Mat18,
    n_trials: usize,
    seed: u64,
) -> InflationReport {
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(seed);

    let r = sensor.noise_cov();
    let mut rows = Vec::new();
    let mut det_ratios = Vec::new();
    let mut cv_wrong = 0usize;
    let mut ca_wrong = 0usize;
    let mut n_scenes = 0usize;
    let mut res_cv = 0.0;
    let mut res_ca = 0.0;

    for trial in 0..n_trials {
        let k = 1 + trial % (true_traj.len() - 1);
        let x_prev = &true_traj[k - 1];
        let x_true = &true_traj[k];
        let dt = x_true.stamp - x_prev.stamp;

        // CA prediction keeps the acceleration, CV drops it.
        let x_ca = propagate_nominal(x_prev, dt);
        let x_cv = cv::propagate_nominal(x_prev, dt);

        let d_ca = match discretize(&x_prev.velocity, &x_prev.acceleration, q_ca, dt) {
            Ok(d) => d,
            Err(_) => continue,
        };
        let p_ca = d_ca.f * p0 * d_ca.f.transpose() + d_ca.qk;
        let (f_cv, qk_cv) = match cv::discretize(&x_prev.velocity, q_cv, dt) {
            Ok(v) => v,
            Err(_) => continue,
        };
        let p0_cv = p0.fixed_view::<12, 12>(0, 0).into_owned();
        let p_cv12 = f_cv * p0_cv * f_cv.transpose() + qk_cv;
        // Embed the 12-dim CV covariance in the 18-dim layout (zero
        // acceleration block) so the shared Jacobian machinery applies.
        let mut p_cv = Mat18::zeros();
        p_cv.fixed_view_mut::<12, 12>(0, 0).copy_from(&p_cv12);

        // Correct target: a point seen mid-FOV from the true state.
        let look = cart_from_polar(&Vector3::new(
            rng.random_range(10.0..30.0),
            rng.random_range(-0.5..0.5),
            rng.random_range(-0.1..0.1),
        ));
        let world = x_true
            .pose
            .inverse()
            .transform_point(&sensor.t_sv.inverse().transform_point(&look));
        let p_correct = MapPoint::new(world, 0, 0);

        let z_true = match predict_detection(x_true, sensor, &p_correct) {
            Ok(z) => z,
            Err(_) => continue,
        };
        // Decoy physically located where the CV prediction expects the
        // correct target.
        let z_cv_pred = match predict_detection(&x_cv, sensor, &p_correct) {
            Ok(z) => z,
            Err(_) => continue,
        };
        let decoy_world = x_true.pose.inverse().transform_point(
            &sensor
                .t_sv
                .inverse()
                .transform_point(&cart_from_polar(&z_cv_pred.fixed_rows::<3>(0).into_owned())),
        );
        let p_decoy = MapPoint::new(decoy_world, 1, 0);
        let z_decoy = match predict_detection(x_true, sensor, &p_decoy) {
            Ok(z) => z,
            Err(_) => continue,
        };

        let noise = |rng: &mut rand_chacha::ChaCha12Rng| {
            Vector4::new(
                rng.random_range(-1.0..1.0) * sensor.sigma_range,
                rng.random_range(-1.0..1.0) * sensor.sigma_azimuth,
                rng.random_range(-1.0..1.0) * sensor.sigma_elevation,
                rng.random_range(-1.0..1.0) * sensor.sigma_doppler,
            )
        };
        let z_correct_meas = z_true + noise(&mut rng);
        let z_decoy_meas = z_decoy + noise(&mut rng);

        n_scenes += 1;
        let per_predictor = |name: &'static str,
                                 x_pred: &State,
                                 p_pred: &Mat18,
                                 wrong_count: &mut usize,
                                 res_acc: &mut f64|
         -> Option<InflationRow> {
            let g = measurement_jacobian(x_pred, sensor, &p_correct).ok()?;
            let s = g * p_pred * g.transpose() + r;
            let z_pred = predict_detection(x_pred, sensor, &p_correct).ok()?;
            let e_correct = polar_residual(&z_correct_meas, &z_pred);
            let e_decoy = polar_residual(&z_decoy_meas, &z_pred);
            let d2_correct = mahalanobis_sq(&e_correct, &s).ok()?;
            let d2_decoy = mahalanobis_sq(&e_decoy, &s).ok()?;
            *res_acc += e_correct.norm();
            let wrong = d2_decoy < d2_correct;
            if wrong {
                *wrong_count += 1;
            }
            let det_s = s.determinant();
            Some(InflationRow {
                frame: trial,
                predictor: name,
                n_matched: 1,
                n_wrong: usize::from(wrong),
                mean_d2: d2_correct.min(d2_decoy),
                det_s_mean: det_s,
            })
        };

        // CA row uses the plain marginal covariance; its prediction is
        // unbiased on constant-acceleration truth.
        if let Some(row) = per_predictor("ca", &x_ca, &p_ca, &mut ca_wrong, &mut res_ca) {
            let det_s_ca = row.det_s_mean;
            rows.push(row);
            // CV row: effective residual covariance is inflated by the outer
            // product of the prediction bias.
            if let (Ok(g_cv), Ok(z_pred_cv)) = (
                measurement_jacobian(&x_cv, sensor, &p_correct),
                predict_detection(&x_cv, sensor, &p_correct),
            ) {
                let bias = polar_residual(&z_true, &z_pred_cv);
                let s_tilde =
                    g_cv * p_cv * g_cv.transpose() + r + bias * bias.transpose();
                if let Some(mut row) =
                    per_predictor("cv", &x_cv, &p_cv, &mut cv_wrong, &mut res_cv)
                {
                    row.det_s_mean = s_tilde.determinant();
                    det_ratios.push(row.det_s_mean / det_s_ca);
                    rows.push(row);
                }
            }
        }
    }

    let n = n_scenes.max(1) as f64;
    InflationReport {
        rows,
        mean_det_ratio: det_ratios.iter().sum::<f64>() / det_ratios.len().max(1) as f64,
        cv_wrong_rate: cv_wrong as f64 / n,
        ca_wrong_rate: ca_wrong as f64 / n,
        mean_residual_cv: res_cv / n,
        mean_residual_ca: res_ca / n,
    }
}

/// World position of a detection given a solved state: the inverse of the
/// sensor chain applied to its Cartesian coordinates.
pub fn detection_world_position(
    det: &RadarDetection,
    state: &State,
    sensor: &SensorModel,
) -> Vector3<f64> {
    let cart = cart_from_polar(&det.polar());
    state
        .pose
        .inverse()
        .transform_point(&sensor.t_sv.inverse().transform_point(&cart))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::integrators::rk4_propagate;
    use crate::se3::{se3_exp, Pose, Twist};
    use approx::assert_relative_eq;
    use nalgebra::SMatrix;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    #[test]
    fn marginal_covariance_degenerate_cases() {
        let r = Matrix4::from_diagonal(&Vector4::new(0.1, 0.2, 0.3, 0.4));
        let g = SMatrix::<f64, 4, 18>::from_fn(|i, j| ((i + j) as f64 * 0.1).sin());
        let s = marginal_covariance(&g, &Mat18::zeros(), &r).unwrap();
        assert_relative_eq!(s, r, epsilon = 1e-15);
        let s = marginal_covariance(&SMatrix::zeros(), &Mat18::identity(), &r).unwrap();
        assert_relative_eq!(s, r, epsilon = 1e-15);
    }

    #[test]
    fn marginal_covariance_monotone_min_eigenvalue() {
        let mut rng = StdRng::seed_from_u64(70);
        for _ in 0..50 {
            let r = Matrix4::from_diagonal(&Vector4::new(
                rng.random_range(0.01..1.0),
                rng.random_range(0.01..1.0),
                rng.random_range(0.01..1.0),
                rng.random_range(0.01..1.0),
            ));
            let g = SMatrix::<f64, 4, 18>::from_fn(|_, _| rng.random_range(-1.0..1.0));
            let half = Mat18::from_fn(|_, _| rng.random_range(-0.3..0.3));
            let p = half * half.transpose();
            let s = marginal_covariance(&g, &p, &r).unwrap();
            let min_s = s.symmetric_eigenvalues().min();
            let min_r = r.symmetric_eigenvalues().min();
            assert!(min_s >= min_r - 1e-12);
        }
    }

    #[test]
    fn marginal_covariance_rejects_singular() {
        let r = Matrix4::from_diagonal(&Vector4::new(1.0, 1.0, 1.0, 0.0));
        let err = marginal_covariance(&SMatrix::zeros(), &Mat18::zeros(), &r);
        assert!(matches!(
            err,
            Err(AssociationError::SingularCovariance { .. })
        ));
    }

    #[test]
    fn mahalanobis_basics() {
        let s = Matrix4::identity();
        assert_eq!(mahalanobis_sq(&Vector4::zeros(), &s).unwrap(), 0.0);
        let e = Vector4::new(1.0, 1.0, 1.0, 1.0);
        assert_relative_eq!(mahalanobis_sq(&e, &s).unwrap(), 4.0, epsilon = 1e-14);
    }

    #[test]
    fn mahalanobis_matches_explicit_inverse() {
        let mut rng = StdRng::seed_from_u64(71);
        for _ in 0..100 {
            let half = Matrix4::from_fn(|_, _| rng.random_range(-1.0..1.0));
            let s = half * half.transpose() + Matrix4::identity() * 0.1;
            let e = Vector4::from_fn(|_, _| rng.random_range(-2.0..2.0));
            let d2 = mahalanobis_sq(&e, &s).unwrap();
            let explicit = (e.transpose() * s.try_inverse().unwrap() * e)[(0, 0)];
            assert_relative_eq!(d2, explicit, epsilon = 1e-9);
        }
    }

    #[test]
    fn chi2_gate_reference_values() {
        assert!((chi2_gate(0.95, 4) - 9.4877).abs() < 1e-3);
        assert!((chi2_gate(0.5, 2) - 2.0_f64.ln() * 2.0).abs() < 1e-3);
        assert!(chi2_gate(1e-9, 4) < 1e-3);
    }

    fn static_state() -> StateGaussian {
        StateGaussian::new(
            State::identity_at(0.0),
            Mat18::identity() * 1e-4,
        )
    }

    fn scan_from_points(points: &[Vector3<f64>], sensor: &SensorModel) -> RadarScan {
        let x = State::identity_at(0.0);
        let detections = points
            .iter()
            .map(|p| {
                let z = predict_detection(&x, sensor, &MapPoint::new(*p, 0, 0)).unwrap();
                RadarDetection::new(z[0], z[1], z[2], z[3], sensor.noise_cov())
            })
            .collect();
        RadarScan {
            stamp: 0.0,
            detections,
        }
    }

    #[test]
    fn exact_detection_matches_with_zero_distance() {
        let sensor = SensorModel::default();
        let mut map = LandmarkMap::new(100);
        map.insert(Vector3::new(20.0, 3.0, 1.0), 0);
        let scan = scan_from_points(&[Vector3::new(20.0, 3.0, 1.0)], &sensor);
        let out = associate(&scan, &map, &static_state(), &sensor, &AssociationConfig::default());
        assert_eq!(out.pairs.len(), 1);
        assert!(out.pairs[0].d2 < 1e-9);
        assert!(out.unmatched_detections.is_empty());
        assert!(out.unmatched_map_points.is_empty());
    }

    #[test]
    fn detection_beyond_gate_stays_unmatched() {
        let sensor = SensorModel::default();
        let cfg = AssociationConfig::default();
        let mut map = LandmarkMap::new(100);
        map.insert(Vector3::new(20.0, 3.0, 1.0), 0);
        // displace the detection in range so that d2 just exceeds the gate
        let x = State::identity_at(0.0);
        let p = MapPoint::new(Vector3::new(20.0, 3.0, 1.0), 0, 0);
        let g = measurement_jacobian(&x, &sensor, &p).unwrap();
        let s = marginal_covariance(&g, &static_state().cov, &sensor.noise_cov()).unwrap();
        let sigma_r_eff = s[(0, 0)].sqrt();
        let offset = (cfg.gate * 1.01_f64).sqrt() * sigma_r_eff;
        let z = predict_detection(&x, &sensor, &p).unwrap();
        let scan = RadarScan {
            stamp: 0.0,
            detections: vec![RadarDetection::new(
                z[0] + offset,
                z[1],
                z[2],
                z[3],
                sensor.noise_cov(),
            )],
        };
        let out = associate(&scan, &map, &static_state(), &sensor, &cfg);
        assert!(out.pairs.is_empty());
        assert_eq!(out.unmatched_detections, vec![0]);
        assert_eq!(out.unmatched_map_points.len(), 1);
    }

    /// Exhaustive all-pairs oracle built from the public API only.
    fn brute_force(
        scan: &RadarScan,
        map: &LandmarkMap,
        predicted: &StateGaussian,
        sensor: &SensorModel,
        cfg: &AssociationConfig,
    ) -> AssignmentSet {
        let mut gated: Vec<(f64, usize, u64)> = Vec::new();
        for p in map.points() {
            let (Ok(z_pred), Ok(g)) = (
                predict_detection(&predicted.mean, sensor, p),
                measurement_jacobian(&predicted.mean, sensor, p),
            ) else {
                continue;
            };
            let Ok(s) = marginal_covariance(&g, &predicted.cov, &sensor.noise_cov()) else {
                continue;
            };
            for (i, det) in scan.detections.iter().enumerate() {
                let e = polar_residual(&det.vector(), &z_pred);
                if let Ok(d2) = mahalanobis_sq(&e, &s) {
                    if d2 <= cfg.gate {
                        gated.push((d2, i, p.id));
                    }
                }
            }
        }
        gated.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        let mut det_used = vec![false; scan.detections.len()];
        let mut map_used: std::collections::HashSet<u64> = Default::default();
        let mut pairs = Vec::new();
        for (d2, det, map_id) in gated {
            if det_used[det] || map_used.contains(&map_id) {
                continue;
            }
            det_used[det] = true;
            map_used.insert(map_id);
            pairs.push(Assignment {
                map_id,
                detection: det,
                d2,
            });
        }
        AssignmentSet {
            pairs,
            unmatched_detections: (0..scan.detections.len()).filter(|&i| !det_used[i]).collect(),
            unmatched_map_points: map
                .points()
                .iter()
                .map(|p| p.id)
                .filter(|id| !map_used.contains(id))
                .collect(),
        }
    }

    #[test]
    fn indexed_association_equals_brute_force() {
        let mut rng = StdRng::seed_from_u64(72);
        let sensor = SensorModel::default();
        let cfg = AssociationConfig::default();
        for trial in 0..20 {
            let n = 50;
            let mut map = LandmarkMap::new(500);
            let mut world_points = Vec::new();
            for _ in 0..n {
                let p = Vector3::new(
                    rng.random_range(5.0..60.0),
                    rng.random_range(-25.0..25.0),
                    rng.random_range(-2.0..6.0),
                );
                world_points.push(p);
                map.insert(p, 0);
            }
            // noisy detections of a subset, plus clutter
            let x = State {
                pose: se3_exp(&Twist::new(
                    Vector3::new(
                        rng.random_range(-0.5..0.5),
                        rng.random_range(-0.5..0.5),
                        0.0,
                    ),
                    Vector3::new(0.0, 0.0, rng.random_range(-0.05..0.05)),
                )),
                velocity: Twist::new(
                    Vector3::new(rng.random_range(-10.0..10.0), 0.0, 0.0),
                    Vector3::zeros(),
                ),
                acceleration: Twist::zero(),
                stamp: 0.0,
            };
            let mut detections = Vec::new();
            for p in world_points.iter().take(40) {
                if let Ok(z) = predict_detection(&x, &sensor, &MapPoint::new(*p, 0, 0)) {
                    if sensor.in_fov(&Vector3::new(z[0], z[1], z[2])) {
                        detections.push(RadarDetection::new(
                            (z[0] + rng.random_range(-0.05..0.05)).max(0.1),
                            z[1] + rng.random_range(-0.005..0.005),
                            z[2] + rng.random_range(-0.01..0.01),
                            z[3] + rng.random_range(-0.03..0.03),
                            sensor.noise_cov(),
                        ));
                    }
                }
            }
            for _ in 0..10 {
                detections.push(RadarDetection::new(
                    rng.random_range(2.0..80.0),
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-0.25..0.25),
                    rng.random_range(-5.0..5.0),
                    sensor.noise_cov(),
                ));
            }
            let scan = RadarScan {
                stamp: 0.0,
                detections,
            };
            let predicted = StateGaussian::new(x, Mat18::identity() * 1e-3);
            let fast = associate(&scan, &map, &predicted, &sensor, &cfg);
            let slow = brute_force(&scan, &map, &predicted, &sensor, &cfg);
            assert_eq!(fast, slow, "trial {trial} diverged from brute force");
        }
    }

    #[test]
    fn association_is_deterministic_and_one_to_one() {
        let sensor = SensorModel::default();
        let cfg = AssociationConfig::default();
        let mut map = LandmarkMap::new(100);
        // two map points close together competing for the same detections
        map.insert(Vector3::new(20.0, 0.0, 0.0), 0);
        map.insert(Vector3::new(20.05, 0.0, 0.0), 0);
        let scan = scan_from_points(
            &[Vector3::new(20.0, 0.0, 0.0), Vector3::new(20.05, 0.0, 0.0)],
            &sensor,
        );
        let a = associate(&scan, &map, &static_state(), &sensor, &cfg);
        let b = associate(&scan, &map, &static_state(), &sensor, &cfg);
        assert_eq!(a, b);
        assert_eq!(a.pairs.len(), 2);
        let mut dets: Vec<usize> = a.pairs.iter().map(|p| p.detection).collect();
        dets.sort_unstable();
        dets.dedup();
        assert_eq!(dets.len(), 2);
        for pair in &a.pairs {
            assert!(pair.d2 <= cfg.gate);
        }
    }

    #[test]
    fn landmark_map_eviction_policy() {
        let mut map = LandmarkMap::new(3);
        let a = map.insert(Vector3::new(1.0, 0.0, 0.0), 0);
        let b = map.insert(Vector3::new(2.0, 0.0, 0.0), 1);
        let c = map.insert(Vector3::new(3.0, 0.0, 0.0), 2);
        map.record_hit(a, 3);
        map.record_hit(b, 3);
        // c has lowest hits: inserting evicts exactly c
        let d = map.insert(Vector3::new(4.0, 0.0, 0.0), 4);
        assert_eq!(map.len(), 3);
        let ids: Vec<u64> = map.points().iter().map(|p| p.id).collect();
        assert!(ids.contains(&a) && ids.contains(&b) && ids.contains(&d));
        assert!(!ids.contains(&c));
    }

    fn constant_accel_truth(wd: Twist, n: usize, dt: f64) -> Vec<State> {
        let x0 = State {
            pose: Pose::identity(),
            velocity: Twist::new(Vector3::new(-12.0, 0.0, 0.0), Vector3::zeros()),
            acceleration: wd,
            stamp: 0.0,
        };
        let mut out = vec![x0];
        for i in 0..n {
            out.push(rk4_propagate(&out[i], dt, 200));
        }
        out
    }

    fn diag_p0() -> Mat18 {
        let mut p0 = Mat18::zeros();
        for i in 0..6 {
            p0[(i, i)] = 1e-6;
            p0[(i + 6, i + 6)] = 1e-4;
            p0[(i + 12, i + 12)] = 1e-6;
        }
        p0
    }

    #[test]
    fn inflation_vanishes_without_acceleration() {
        let truth = constant_accel_truth(Twist::zero(), 3, 0.077);
        let report = inflation_diagnostic(
            &truth,
            &SensorModel::default(),
            &ProcessNoise::isotropic(0.1, 0.05),
            &ProcessNoise::isotropic(0.1 * 0.077, 0.05 * 0.077),
            &diag_p0(),
            40,
            5,
        );
        assert!(
            (0.7..1.4).contains(&report.mean_det_ratio),
            "det ratio {} should be near 1 without acceleration",
            report.mean_det_ratio
        );
    }

    #[test]
    fn yaw_acceleration_inflates_cv_covariance() {
        let wd = Twist::new(Vector3::new(1.0, 0.0, 0.0), Vector3::new(0.0, 0.0, -0.8));
        let truth = constant_accel_truth(wd, 3, 0.077);
        let report = inflation_diagnostic(
            &truth,
            &SensorModel::default(),
            &ProcessNoise::default(),
            &ProcessNoise::isotropic(2.0 * 0.077, 1.0 * 0.077),
            &diag_p0(),
            60,
            6,
        );
        assert!(
            report.mean_det_ratio > 1.5,
            "expected inflation, det ratio {}",
            report.mean_det_ratio
        );
        assert!(
            report.cv_wrong_rate >= 2.0 * report.ca_wrong_rate,
            "cv wrong {} vs ca wrong {}",
            report.cv_wrong_rate,
            report.ca_wrong_rate
        );
        let csv = report.to_csv();
        assert!(csv.starts_with("frame,predictor,n_matched,n_wrong,mean_d2,det_S_mean"));
        assert!(csv.lines().count() > 1);
    }
}
