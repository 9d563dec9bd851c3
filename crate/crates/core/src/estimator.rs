//! Sliding-window MAP odometry: prior, motion-prior and measurement cost
//! terms minimized by Gauss-Newton on the manifold, with landmark map
//! management. Configurable as the constant-acceleration/polar estimator or
//! the constant-velocity/Cartesian baseline.

use std::collections::VecDeque;
use std::time::Instant;

use nalgebra::{DMatrix, DVector, Matrix3, Matrix4, Matrix6, Vector3, Vector4};
use thiserror::Error;

use crate::association::{
    associate_candidates, polar_candidate_model, polar_residual, Assignment, AssignmentSet,
    AssociationConfig, CandidateModel, LandmarkMap,
};
use crate::measurement::{
    cart_from_polar, cartesian_model, measurement_jacobian, point_in_sensor, predict_detection,
    MapPoint, RadarScan, SensorModel,
};
use crate::prior::{
    cv, discretize, propagate_nominal, state_boxminus, state_boxplus, Mat18, PriorError,
    ProcessNoise, State, StateGaussian, Vec18,
};
use crate::se3::{curly_wedge, hat3, matfun_j_inv, AdjointMatrix, Se3Error, Twist};

#[derive(Debug, Error)]
pub enum EstimatorError {
    #[error("Gauss-Newton diverged at frame {frame}: cost {cost_before:.6e} -> {cost_after:.6e} after step halving")]
    Divergence {
        frame: u64,
        cost_before: f64,
        cost_after: f64,
    },
    #[error("normal equations are rank deficient")]
    SingularSystem,
    #[error(transparent)]
    Prior(#[from] PriorError),
    #[error(transparent)]
    Se3(#[from] Se3Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MotionModelKind {
    ConstantAcceleration,
    ConstantVelocity,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MeasurementModelKind {
    Polar,
    Cartesian,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RobustLoss {
    None,
    Huber(f64),
}

#[derive(Debug, Clone)]
pub struct EstimatorConfig {
    /// Number of states retained after sliding.
    pub window_size: usize,
    pub max_gn_iters: usize,
    /// Convergence threshold on the Gauss-Newton step norm.
    pub gn_tol: f64,
    pub motion_model: MotionModelKind,
    pub measurement_model: MeasurementModelKind,
    /// Jerk PSD for the constant-acceleration prior.
    pub process_noise: ProcessNoise,
    /// Acceleration PSD for the constant-velocity baseline.
    pub cv_process_noise: ProcessNoise,
    pub association: AssociationConfig,
    pub robust_loss: RobustLoss,
    pub init_pose_var: f64,
    pub init_vel_var: f64,
    pub init_acc_var: f64,
    /// Reference range at which the baseline's fixed Cartesian covariance is
    /// taken from the polar sigmas.
    pub cartesian_reference_range: f64,
    /// Estimate the initial velocity from the first scan's radial
    /// velocities instead of assuming rest.
    pub doppler_bootstrap: bool,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        EstimatorConfig {
            window_size: 4,
            max_gn_iters: 10,
            gn_tol: 1e-6,
            motion_model: MotionModelKind::ConstantAcceleration,
            measurement_model: MeasurementModelKind::Polar,
            process_noise: ProcessNoise::default(),
            cv_process_noise: ProcessNoise::isotropic(1.5, 0.8),
            association: AssociationConfig::default(),
            robust_loss: RobustLoss::Huber(3.0),
            init_pose_var: 1e-4,
            init_vel_var: 1.0,
            init_acc_var: 1.0,
            cartesian_reference_range: 30.0,
            doppler_bootstrap: true,
        }
    }
}

/// Switch a configuration to the constant-velocity / Cartesian baseline.
pub fn configure_baseline_cv_c(mut cfg: EstimatorConfig) -> EstimatorConfig {
    cfg.motion_model = MotionModelKind::ConstantVelocity;
    cfg.measurement_model = MeasurementModelKind::Cartesian;
    cfg
}

/// Per-frame pipeline diagnostics.
#[derive(Debug, Clone)]
pub struct FrameDiagnostics {
    pub frame: u64,
    pub stamp: f64,
    pub n_detections: usize,
    pub n_matched: usize,
    pub gn_iters: usize,
    pub cost: f64,
    pub runtime_ms: f64,
    /// True when a frame had zero associations and the estimate fell back to
    /// the prior prediction.
    pub fallback: bool,
    /// Accepted (before, after) cost pairs per Gauss-Newton iteration.
    pub gn_cost_trace: Vec<(f64, f64)>,
}

/// Motion-prior residual between consecutive states:
/// `e_v = f(x_prev) ⊖ x_curr` with Jacobians `Psi(e) F` and `-Psi'(e)`.
pub fn motion_error(
    x_prev: &State,
    x_curr: &State,
    f: &Mat18,
) -> Result<(Vec18, Mat18, Mat18), Se3Error> {
    let dt = x_curr.stamp - x_prev.stamp;
    let propagated = propagate_nominal(x_prev, dt);
    let e = state_boxminus(&propagated, x_curr)?;
    let e_xi = Twist::from_vector(e.fixed_rows::<6>(0).into_owned());
    let mut lift_prev = Mat18::identity();
    lift_prev
        .fixed_view_mut::<6, 6>(0, 0)
        .copy_from(&matfun_j_inv(&curly_wedge(&e_xi)));
    let mut lift_curr = Mat18::identity();
    lift_curr
        .fixed_view_mut::<6, 6>(0, 0)
        .copy_from(&matfun_j_inv(&AdjointMatrix(-curly_wedge(&e_xi).0)));
    Ok((e, lift_prev * f, -lift_curr))
}

/// Least-squares ego linear velocity from one scan's radial velocities,
/// assuming a static world and zero angular rate. Returns the state twist.
pub fn doppler_velocity_bootstrap(scan: &RadarScan, sensor: &SensorModel) -> Option<Twist> {
    let directions: Vec<Vector3<f64>> = scan
        .detections
        .iter()
        .map(|d| cart_from_polar(&d.polar()).normalize())
        .collect();
    if directions.len() < 8 {
        return None;
    }
    let fit = |keep: &dyn Fn(usize) -> bool| -> Option<Vector3<f64>> {
        let mut ata = Matrix3::zeros();
        let mut atb = Vector3::zeros();
        let mut n = 0usize;
        for (i, dir) in directions.iter().enumerate() {
            if !keep(i) {
                continue;
            }
            ata += dir * dir.transpose();
            atb += dir * scan.detections[i].radial_velocity;
            n += 1;
        }
        if n < 6 {
            return None;
        }
        ata.cholesky().map(|c| c.solve(&atb))
    };
    let first = fit(&|_| true)?;
    // trim dynamic targets and clutter, then refit
    let residual =
        |i: usize, v: &Vector3<f64>| (scan.detections[i].radial_velocity - directions[i].dot(v)).abs();
    let second = fit(&|i| residual(i, &first) < 0.5)?;
    let nu_s = fit(&|i| residual(i, &second) < 0.2).unwrap_or(second);
    // invert the extrinsic with zero angular rate: nu = C_sv^T nu_s
    Some(Twist::new(
        sensor.t_sv.rotation.transpose() * nu_s,
        Vector3::zeros(),
    ))
}

/// Insert gated-static unmatched detections into the map and update hit
/// counts of matched points. The static gate is 3 sigma of the Doppler
/// residual including the predicted velocity uncertainty.
pub fn update_map(
    map: &mut LandmarkMap,
    scan: &RadarScan,
    state: &State,
    velocity_cov: &Matrix6<f64>,
    assignments: &AssignmentSet,
    sensor: &SensorModel,
    frame: u64,
) {
    for pair in &assignments.pairs {
        map.record_hit(pair.map_id, frame);
    }
    let adj = sensor.t_sv.adjoint();
    for &i in &assignments.unmatched_detections {
        let det = &scan.detections[i];
        if det.range < sensor.r_min || det.range > sensor.r_max {
            continue;
        }
        let r_s = cart_from_polar(&det.polar());
        let rho = r_s.norm();
        if rho < 1e-6 {
            continue;
        }
        let w_s = adj * state.velocity.0;
        let nu_s = w_s.fixed_rows::<3>(0).into_owned();
        let omega_s = w_s.fixed_rows::<3>(3).into_owned();
        let pred = r_s.dot(&(omega_s.cross(&r_s) + nu_s)) / rho;
        // 1x6 sensitivity of the prediction to the velocity estimate
        let r_hat = r_s / rho;
        let mut sel = nalgebra::SMatrix::<f64, 3, 6>::zeros();
        sel.fixed_view_mut::<3, 3>(0, 0)
            .copy_from(&Matrix3::identity());
        sel.fixed_view_mut::<3, 3>(0, 3).copy_from(&(-hat3(&r_s)));
        let row = r_hat.transpose() * sel * adj;
        let var = sensor.sigma_doppler * sensor.sigma_doppler
            + (row * velocity_cov * row.transpose())[(0, 0)];
        if (det.radial_velocity - pred).abs() < 3.0 * var.sqrt() {
            let world = state
                .pose
                .inverse()
                .transform_point(&sensor.t_sv.inverse().transform_point(&r_s));
            map.insert(world, frame);
        }
    }
}

struct WindowEntry {
    state: State,
    /// Matched detections: (detection index, map point world position).
    matches: Vec<(usize, Vector4<f64>)>,
    scan: RadarScan,
}

struct MarginalPrior {
    lin: State,
    info: DMatrix<f64>,
    grad: DVector<f64>,
}

/// Sliding-window odometry estimator. Single-owner, strictly sequential.
pub struct Estimator {
    cfg: EstimatorConfig,
    sensor: SensorModel,
    map: LandmarkMap,
    window: VecDeque<WindowEntry>,
    prior: Option<MarginalPrior>,
    /// Posterior covariance of the newest state from the last solve.
    newest_cov: DMatrix<f64>,
    frame: u64,
}

impl Estimator {
    pub fn new(cfg: EstimatorConfig, sensor: SensorModel) -> Self {
        let d = dim_of(cfg.motion_model);
        let map = LandmarkMap::new(cfg.association.max_map_size);
        Estimator {
            cfg,
            sensor,
            map,
            window: VecDeque::new(),
            prior: None,
            newest_cov: DMatrix::zeros(d, d),
            frame: 0,
        }
    }

    pub fn map(&self) -> &LandmarkMap {
        &self.map
    }

    pub fn config(&self) -> &EstimatorConfig {
        &self.cfg
    }

    pub fn newest_state(&self) -> Option<&State> {
        self.window.back().map(|e| &e.state)
    }

    pub fn newest_covariance(&self) -> &DMatrix<f64> {
        &self.newest_cov
    }

    fn dim(&self) -> usize {
        dim_of(self.cfg.motion_model)
    }

    /// Process one scan: predict, associate, solve the window, slide, and
    /// update the map.
    pub fn step_frame(
        &mut self,
        scan: &RadarScan,
    ) -> Result<(State, FrameDiagnostics), EstimatorError> {
        let t0 = Instant::now();
        let d = self.dim();

        if self.window.is_empty() {
            return self.bootstrap(scan, t0);
        }

        // 1. predict
        let prev = self.window.back().expect("window non-empty").state;
        let dt = scan.stamp - prev.stamp;
        let (predicted, f_pred, qk_pred) = self.predict(&prev, dt)?;
        let p_pred = &f_pred * &self.newest_cov * f_pred.transpose() + &qk_pred;

        // 2. associate
        let assignments = self.associate_frame(scan, &predicted, &p_pred);
        let n_matched = assignments.pairs.len();
        let fallback = n_matched == 0;

        // 3. append and solve
        let matches = assignments
            .pairs
            .iter()
            .filter_map(|a| {
                self.map
                    .points()
                    .iter()
                    .find(|p| p.id == a.map_id)
                    .map(|p| (a.detection, p.position))
            })
            .collect();
        self.window.push_back(WindowEntry {
            state: predicted,
            matches,
            scan: scan.clone(),
        });
        let (iters, cost, trace) = self.solve_window()?;

        // 4. slide
        if self.window.len() > self.cfg.window_size {
            self.marginalize_oldest()?;
        }

        // 5. update map
        let solved = self.window.back().expect("window non-empty").state;
        let vel_cov = velocity_cov_block(&self.newest_cov, d);
        update_map(
            &mut self.map,
            scan,
            &solved,
            &vel_cov,
            &assignments,
            &self.sensor,
            self.frame,
        );

        let diag = FrameDiagnostics {
            frame: self.frame,
            stamp: scan.stamp,
            n_detections: scan.detections.len(),
            n_matched,
            gn_iters: iters,
            cost,
            runtime_ms: t0.elapsed().as_secs_f64() * 1e3,
            fallback,
            gn_cost_trace: trace,
        };
        self.frame += 1;
        Ok((solved, diag))
    }

    fn bootstrap(
        &mut self,
        scan: &RadarScan,
        t0: Instant,
    ) -> Result<(State, FrameDiagnostics), EstimatorError> {
        let d = self.dim();
        let mut x0 = State::identity_at(scan.stamp);
        if self.cfg.doppler_bootstrap {
            if let Some(v) = doppler_velocity_bootstrap(scan, &self.sensor) {
                x0.velocity = v;
            }
        }
        let mut info = DMatrix::zeros(d, d);
        for i in 0..6 {
            info[(i, i)] = 1.0 / self.cfg.init_pose_var;
            info[(i + 6, i + 6)] = 1.0 / self.cfg.init_vel_var;
            if d == 18 {
                info[(i + 12, i + 12)] = 1.0 / self.cfg.init_acc_var;
            }
        }
        let mut cov = DMatrix::zeros(d, d);
        for i in 0..d {
            cov[(i, i)] = 1.0 / info[(i, i)];
        }
        self.newest_cov = cov;
        self.prior = Some(MarginalPrior {
            lin: x0,
            info,
            grad: DVector::zeros(d),
        });
        self.window.push_back(WindowEntry {
            state: x0,
            matches: Vec::new(),
            scan: scan.clone(),
        });

        // bootstrap the map from gated-static detections
        let all_unmatched = AssignmentSet {
            pairs: Vec::new(),
            unmatched_detections: (0..scan.detections.len()).collect(),
            unmatched_map_points: Vec::new(),
        };
        let vel_cov = velocity_cov_block(&self.newest_cov, d);
        update_map(
            &mut self.map,
            scan,
            &x0,
            &vel_cov,
            &all_unmatched,
            &self.sensor,
            self.frame,
        );

        let diag = FrameDiagnostics {
            frame: self.frame,
            stamp: scan.stamp,
            n_detections: scan.detections.len(),
            n_matched: 0,
            gn_iters: 0,
            cost: 0.0,
            runtime_ms: t0.elapsed().as_secs_f64() * 1e3,
            fallback: false,
            gn_cost_trace: Vec::new(),
        };
        self.frame += 1;
        Ok((x0, diag))
    }

    /// Nominal prediction plus discrete transition for the active model.
    fn predict(
        &self,
        prev: &State,
        dt: f64,
    ) -> Result<(State, DMatrix<f64>, DMatrix<f64>), EstimatorError> {
        match self.cfg.motion_model {
            MotionModelKind::ConstantAcceleration => {
                let predicted = propagate_nominal(prev, dt);
                let trans = discretize(&prev.velocity, &prev.acceleration, &self.cfg.process_noise, dt)?;
                Ok((
                    predicted,
                    to_dyn_18(&trans.f),
                    to_dyn_18(&trans.qk),
                ))
            }
            MotionModelKind::ConstantVelocity => {
                let predicted = cv::propagate_nominal(prev, dt);
                let (f, qk) = cv::discretize(&prev.velocity, &self.cfg.cv_process_noise, dt)?;
                Ok((
                    predicted,
                    DMatrix::from_fn(12, 12, |i, j| f[(i, j)]),
                    DMatrix::from_fn(12, 12, |i, j| qk[(i, j)]),
                ))
            }
        }
    }

    fn associate_frame(
        &self,
        scan: &RadarScan,
        predicted: &State,
        p_pred: &DMatrix<f64>,
    ) -> AssignmentSet {
        let gate = self.cfg.association.gate;
        match self.cfg.measurement_model {
            MeasurementModelKind::Polar => {
                let mut p18 = Mat18::zeros();
                let d = p_pred.nrows();
                for i in 0..d {
                    for j in 0..d {
                        p18[(i, j)] = p_pred[(i, j)];
                    }
                }
                let gaussian = StateGaussian::new(*predicted, p18);
                let r = self.sensor.noise_cov();
                let entries: Vec<(u64, Option<CandidateModel>)> = self
                    .map
                    .points()
                    .iter()
                    .map(|p| {
                        (
                            p.id,
                            polar_candidate_model(&gaussian, &self.sensor, p, &r, gate),
                        )
                    })
                    .collect();
                associate_candidates(
                    scan,
                    &entries,
                    |det, pred| polar_residual(&det.vector(), pred),
                    gate,
                )
            }
            MeasurementModelKind::Cartesian => {
                let d = p_pred.nrows();
                let r = self.cartesian_noise();
                let entries: Vec<(u64, Option<CandidateModel>)> = self
                    .map
                    .points()
                    .iter()
                    .map(|p| {
                        (
                            p.id,
                            self.cartesian_candidate_model(predicted, p_pred, p, &r, gate, d),
                        )
                    })
                    .collect();
                associate_candidates(
                    scan,
                    &entries,
                    |det, pred| {
                        let c = cart_from_polar(&det.polar());
                        Vector4::new(
                            c.x - pred[0],
                            c.y - pred[1],
                            c.z - pred[2],
                            det.radial_velocity - pred[3],
                        )
                    },
                    gate,
                )
            }
        }
    }

    fn cartesian_noise(&self) -> Matrix4<f64> {
        let pos = self
            .sensor
            .cartesian_noise_cov(self.cfg.cartesian_reference_range);
        let mut r = Matrix4::zeros();
        r.fixed_view_mut::<3, 3>(0, 0).copy_from(&pos);
        r[(3, 3)] = self.sensor.sigma_doppler * self.sensor.sigma_doppler;
        r
    }

    fn cartesian_candidate_model(
        &self,
        predicted: &State,
        p_pred: &DMatrix<f64>,
        p: &MapPoint,
        r: &Matrix4<f64>,
        gate: f64,
        d: usize,
    ) -> Option<CandidateModel> {
        let (cart, g_cart) = cartesian_model(predicted, &self.sensor, p).ok()?;
        let g_full = measurement_jacobian(predicted, &self.sensor, p).ok()?;
        let z = predict_detection(predicted, &self.sensor, p).ok()?;
        let mut g = DMatrix::zeros(4, d);
        for j in 0..d {
            for i in 0..3 {
                g[(i, j)] = g_cart[(i, j)];
            }
            g[(3, j)] = g_full[(3, j)];
        }
        let s_dyn = &g * p_pred * g.transpose();
        let mut s = *r;
        for i in 0..4 {
            for j in 0..4 {
                s[(i, j)] += s_dyn[(i, j)];
            }
        }
        let lam_max = s.symmetric_eigenvalues().max().max(0.0);
        let radius = (gate * lam_max).sqrt();
        Some(CandidateModel {
            z_pred: Vector4::new(cart.x, cart.y, cart.z, z[3]),
            s,
            cart_pred: cart,
            radius,
        })
    }

    /// Gauss-Newton over the window. Returns (iterations, final cost,
    /// accepted cost trace).
    fn solve_window(&mut self) -> Result<(usize, f64, Vec<(f64, f64)>), EstimatorError> {
        let d = self.dim();
        let n = self.window.len();
        let mut states: Vec<State> = self.window.iter().map(|e| e.state).collect();
        let mut trace = Vec::new();
        let mut iters = 0usize;
        let mut final_cost = 0.0;

        for _iter in 0..self.cfg.max_gn_iters {
            iters += 1;
            // transitions at the current linearization
            let mut transitions = Vec::with_capacity(n.saturating_sub(1));
            for k in 1..n {
                let dt = states[k].stamp - states[k - 1].stamp;
                transitions.push(self.transition(&states[k - 1], dt)?);
            }
            let (diag, lower, mut rhs, cost0) =
                self.assemble(&states, &transitions)?;
            final_cost = cost0;

            for r in rhs.iter_mut() {
                *r = -r.clone();
            }
            let Some((delta, last_info)) = solve_block_tridiagonal(&diag, &lower, &rhs) else {
                return Err(EstimatorError::SingularSystem);
            };
            self.newest_cov = symmetrize(
                &last_info
                    .clone()
                    .try_inverse()
                    .ok_or(EstimatorError::SingularSystem)?,
            );

            let step_norm: f64 = delta.iter().map(|b| b.norm_squared()).sum::<f64>().sqrt();

            // step halving on cost increase, weights held fixed
            let mut alpha = 1.0;
            let mut accepted = false;
            for _ in 0..=5 {
                let candidate: Vec<State> = states
                    .iter()
                    .zip(&delta)
                    .map(|(x, dx)| boxplus_dim(x, &(dx * alpha), d))
                    .collect();
                let cost1 = self.evaluate_cost(&candidate, &transitions)?;
                if cost1 <= cost0 * (1.0 + 1e-12) + 1e-15 {
                    states = candidate;
                    trace.push((cost0, cost1));
                    final_cost = cost1;
                    accepted = true;
                    break;
                }
                alpha *= 0.5;
            }
            if !accepted {
                let cost_after = self.evaluate_cost(
                    &states
                        .iter()
                        .zip(&delta)
                        .map(|(x, dx)| boxplus_dim(x, &(dx * (alpha * 2.0)), d))
                        .collect::<Vec<_>>(),
                    &transitions,
                )?;
                return Err(EstimatorError::Divergence {
                    frame: self.frame,
                    cost_before: cost0,
                    cost_after,
                });
            }

            if step_norm < self.cfg.gn_tol {
                break;
            }
        }

        for (entry, state) in self.window.iter_mut().zip(&states) {
            entry.state = *state;
        }
        Ok((iters, final_cost, trace))
    }

    fn transition(
        &self,
        from: &State,
        dt: f64,
    ) -> Result<(DMatrix<f64>, DMatrix<f64>), EstimatorError> {
        let (_, f, qk) = self.predict(from, dt)?;
        let w = qk
            .clone()
            .cholesky()
            .ok_or(EstimatorError::SingularSystem)?
            .inverse();
        Ok((f, w))
    }

    /// Build the block-tridiagonal normal equations and the current cost.
    #[allow(clippy::type_complexity)]
    fn assemble(
        &self,
        states: &[State],
        transitions: &[(DMatrix<f64>, DMatrix<f64>)],
    ) -> Result<(Vec<DMatrix<f64>>, Vec<DMatrix<f64>>, Vec<DVector<f64>>, f64), EstimatorError>
    {
        let d = self.dim();
        let n = states.len();
        let mut diag = vec![DMatrix::<f64>::zeros(d, d); n];
        let mut lower = vec![DMatrix::<f64>::zeros(d, d); n.saturating_sub(1)];
        let mut rhs = vec![DVector::<f64>::zeros(d); n];
        let mut cost = 0.0;

        // prior on the oldest state
        if let Some(prior) = &self.prior {
            let (r, jac) = prior_residual(&prior.lin, &states[0], d)?;
            cost += (r.transpose() * &prior.info * &r)[(0, 0)]
                + 2.0 * (prior.grad.transpose() * &r)[(0, 0)];
            let jt_info = jac.transpose() * &prior.info;
            diag[0] += &jt_info * &jac;
            rhs[0] += jac.transpose() * (&prior.info * &r + &prior.grad);
        }

        // motion terms
        for k in 1..n {
            let (f, w) = &transitions[k - 1];
            let (e, j_prev, j_curr) = motion_error_dim(&states[k - 1], &states[k], f, d)?;
            cost += (e.transpose() * w * &e)[(0, 0)];
            let jp_w = j_prev.transpose() * w;
            let jc_w = j_curr.transpose() * w;
            diag[k - 1] += &jp_w * &j_prev;
            diag[k] += &jc_w * &j_curr;
            lower[k - 1] += &jc_w * &j_prev; // block (k, k-1)
            rhs[k - 1] += &jp_w * &e;
            rhs[k] += &jc_w * &e;
        }

        // measurement terms
        for (k, entry) in self.window.iter().enumerate() {
            let (meas_cost, h_k, b_k) = self.measurement_terms(&states[k], entry, d)?;
            cost += meas_cost;
            diag[k] += h_k;
            rhs[k] += b_k;
        }

        Ok((diag, lower, rhs, cost))
    }

    /// Measurement contribution (cost, H, b) of one frame at a state.
    fn measurement_terms(
        &self,
        state: &State,
        entry: &WindowEntry,
        d: usize,
    ) -> Result<(f64, DMatrix<f64>, DVector<f64>), EstimatorError> {
        let mut h = DMatrix::<f64>::zeros(d, d);
        let mut b = DVector::<f64>::zeros(d);
        let mut cost = 0.0;
        for (det_idx, position) in &entry.matches {
            let det = &entry.scan.detections[*det_idx];
            let p = MapPoint {
                position: *position,
                id: 0,
                hits: 0,
                last_seen: 0,
            };
            let Some((e, jac, w)) = self.residual_and_jacobian(state, &p, det, d) else {
                continue;
            };
            let s = (e.transpose() * &w * &e)[(0, 0)];
            let (rho_cost, weight) = robust_weight(s, self.cfg.robust_loss);
            cost += rho_cost;
            let jt_w = jac.transpose() * (&w * weight);
            h += &jt_w * &jac;
            b += jt_w * e;
        }
        Ok((cost, h, b))
    }

    /// Residual `e = z - g`, Jacobian of `e` w.r.t. the perturbation, and
    /// the inverse measurement covariance.
    fn residual_and_jacobian(
        &self,
        state: &State,
        p: &MapPoint,
        det: &crate::measurement::RadarDetection,
        d: usize,
    ) -> Option<(DVector<f64>, DMatrix<f64>, DMatrix<f64>)> {
        match self.cfg.measurement_model {
            MeasurementModelKind::Polar => {
                let z_pred = predict_detection(state, &self.sensor, p).ok()?;
                let g = measurement_jacobian(state, &self.sensor, p).ok()?;
                let e4 = polar_residual(&det.vector(), &z_pred);
                let w4 = det.noise_cov.try_inverse()?;
                let mut jac = DMatrix::zeros(4, d);
                for i in 0..4 {
                    for j in 0..d {
                        jac[(i, j)] = -g[(i, j)];
                    }
                }
                Some((
                    DVector::from_iterator(4, e4.iter().copied()),
                    jac,
                    DMatrix::from_fn(4, 4, |i, j| w4[(i, j)]),
                ))
            }
            MeasurementModelKind::Cartesian => {
                let (cart, g_cart) = cartesian_model(state, &self.sensor, p).ok()?;
                let z_pred = predict_detection(state, &self.sensor, p).ok()?;
                let g_full = measurement_jacobian(state, &self.sensor, p).ok()?;
                let z_cart = cart_from_polar(&det.polar());
                let e = Vector4::new(
                    z_cart.x - cart.x,
                    z_cart.y - cart.y,
                    z_cart.z - cart.z,
                    det.radial_velocity - z_pred[3],
                );
                let r = self.cartesian_noise();
                let w4 = r.try_inverse()?;
                let mut jac = DMatrix::zeros(4, d);
                for j in 0..d {
                    for i in 0..3 {
                        jac[(i, j)] = -g_cart[(i, j)];
                    }
                    jac[(3, j)] = -g_full[(3, j)];
                }
                Some((
                    DVector::from_iterator(4, e.iter().copied()),
                    jac,
                    DMatrix::from_fn(4, 4, |i, j| w4[(i, j)]),
                ))
            }
        }
    }

    /// Total cost at candidate states with transition weights held fixed.
    fn evaluate_cost(
        &self,
        states: &[State],
        transitions: &[(DMatrix<f64>, DMatrix<f64>)],
    ) -> Result<f64, EstimatorError> {
        let d = self.dim();
        let mut cost = 0.0;
        if let Some(prior) = &self.prior {
            let (r, _) = prior_residual(&prior.lin, &states[0], d)?;
            cost += (r.transpose() * &prior.info * &r)[(0, 0)]
                + 2.0 * (prior.grad.transpose() * &r)[(0, 0)];
        }
        for k in 1..states.len() {
            let (_, w) = &transitions[k - 1];
            let dt = states[k].stamp - states[k - 1].stamp;
            let propagated = match self.cfg.motion_model {
                MotionModelKind::ConstantAcceleration => propagate_nominal(&states[k - 1], dt),
                MotionModelKind::ConstantVelocity => cv::propagate_nominal(&states[k - 1], dt),
            };
            let e18 = state_boxminus(&propagated, &states[k])?;
            let e = DVector::from_iterator(d, e18.iter().take(d).copied());
            cost += (e.transpose() * w * &e)[(0, 0)];
        }
        for (k, entry) in self.window.iter().enumerate() {
            for (det_idx, position) in &entry.matches {
                let det = &entry.scan.detections[*det_idx];
                let p = MapPoint {
                    position: *position,
                    id: 0,
                    hits: 0,
                    last_seen: 0,
                };
                if let Some((e, _, w)) = self.residual_and_jacobian(&states[k], &p, det, d) {
                    let s = (e.transpose() * &w * &e)[(0, 0)];
                    cost += robust_weight(s, self.cfg.robust_loss).0;
                }
            }
        }
        Ok(cost)
    }

    /// Schur-complement the departing oldest state onto its successor.
    fn marginalize_oldest(&mut self) -> Result<(), EstimatorError> {
        let d = self.dim();
        let x0 = self.window[0].state;
        let x1 = self.window[1].state;
        let dt = x1.stamp - x0.stamp;
        let (f, w) = self.transition(&x0, dt)?;

        let mut h00 = DMatrix::<f64>::zeros(d, d);
        let mut h01 = DMatrix::<f64>::zeros(d, d);
        let mut h11 = DMatrix::<f64>::zeros(d, d);
        let mut b0 = DVector::<f64>::zeros(d);
        let mut b1 = DVector::<f64>::zeros(d);

        if let Some(prior) = &self.prior {
            let (r, jac) = prior_residual(&prior.lin, &x0, d)?;
            let jt_info = jac.transpose() * &prior.info;
            h00 += &jt_info * &jac;
            b0 += jac.transpose() * (&prior.info * &r + &prior.grad);
        }
        {
            let (e, j_prev, j_curr) = motion_error_dim(&x0, &x1, &f, d)?;
            let jp_w = j_prev.transpose() * &w;
            let jc_w = j_curr.transpose() * &w;
            h00 += &jp_w * &j_prev;
            h11 += &jc_w * &j_curr;
            h01 += &jp_w * &j_curr;
            b0 += &jp_w * &e;
            b1 += &jc_w * &e;
        }
        {
            let entry = &self.window[0];
            let (_, h_meas, b_meas) = self.measurement_terms(&x0, entry, d)?;
            h00 += h_meas;
            b0 += b_meas;
        }

        let h00_inv = h00
            .clone()
            .cholesky()
            .ok_or(EstimatorError::SingularSystem)?
            .inverse();
        let h10 = h01.transpose();
        let info = symmetrize(&(&h11 - &h10 * &h00_inv * &h01));
        let grad = &b1 - &h10 * &h00_inv * &b0;

        self.prior = Some(MarginalPrior {
            lin: x1,
            info,
            grad,
        });
        self.window.pop_front();
        Ok(())
    }
}

fn dim_of(model: MotionModelKind) -> usize {
    match model {
        MotionModelKind::ConstantAcceleration => 18,
        MotionModelKind::ConstantVelocity => 12,
    }
}

fn to_dyn_18(m: &Mat18) -> DMatrix<f64> {
    DMatrix::from_fn(18, 18, |i, j| m[(i, j)])
}

fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

fn velocity_cov_block(cov: &DMatrix<f64>, d: usize) -> Matrix6<f64> {
    let mut out = Matrix6::zeros();
    if d >= 12 && cov.nrows() >= 12 {
        for i in 0..6 {
            for j in 0..6 {
                out[(i, j)] = cov[(i + 6, j + 6)];
            }
        }
    }
    out
}

/// Apply a d-dimensional perturbation, padding with zeros to 18.
fn boxplus_dim(x: &State, delta: &DVector<f64>, d: usize) -> State {
    let mut gamma = Vec18::zeros();
    for i in 0..d {
        gamma[i] = delta[i];
    }
    state_boxplus(&gamma, x)
}

/// Residual of a state against a prior linearization point, with the
/// lift Jacobian of the ⊖ map.
fn prior_residual(
    lin: &State,
    x: &State,
    d: usize,
) -> Result<(DVector<f64>, DMatrix<f64>), Se3Error> {
    let e18 = state_boxminus(x, lin)?;
    let e = DVector::from_iterator(d, e18.iter().take(d).copied());
    let e_xi = Twist::from_vector(e18.fixed_rows::<6>(0).into_owned());
    let lift6 = matfun_j_inv(&curly_wedge(&e_xi));
    let mut jac = DMatrix::identity(d, d);
    for i in 0..6 {
        for j in 0..6 {
            jac[(i, j)] = lift6[(i, j)];
        }
    }
    Ok((e, jac))
}

/// Dimension-generic motion error with the model transition `f` (d x d).
fn motion_error_dim(
    x_prev: &State,
    x_curr: &State,
    f: &DMatrix<f64>,
    d: usize,
) -> Result<(DVector<f64>, DMatrix<f64>, DMatrix<f64>), Se3Error> {
    let dt = x_curr.stamp - x_prev.stamp;
    let propagated = if d == 18 {
        propagate_nominal(x_prev, dt)
    } else {
        cv::propagate_nominal(x_prev, dt)
    };
    let e18 = state_boxminus(&propagated, x_curr)?;
    let e = DVector::from_iterator(d, e18.iter().take(d).copied());
    let e_xi = Twist::from_vector(e18.fixed_rows::<6>(0).into_owned());
    let lift_p6 = matfun_j_inv(&curly_wedge(&e_xi));
    let lift_c6 = matfun_j_inv(&AdjointMatrix(-curly_wedge(&e_xi).0));
    let mut lift_prev = DMatrix::identity(d, d);
    let mut lift_curr = DMatrix::identity(d, d);
    for i in 0..6 {
        for j in 0..6 {
            lift_prev[(i, j)] = lift_p6[(i, j)];
            lift_curr[(i, j)] = lift_c6[(i, j)];
        }
    }
    Ok((&lift_prev * f, -lift_curr))
        .map(|(jp, jc): (DMatrix<f64>, DMatrix<f64>)| (e, jp, jc))
}

/// Huber cost and IRLS weight for a squared whitened residual `s`.
fn robust_weight(s: f64, loss: RobustLoss) -> (f64, f64) {
    match loss {
        RobustLoss::None => (s, 1.0),
        RobustLoss::Huber(delta) => {
            let r = s.sqrt();
            if r <= delta {
                (s, 1.0)
            } else {
                (2.0 * delta * r - delta * delta, delta / r)
            }
        }
    }
}

/// Block-tridiagonal symmetric solve. `diag[i]` are the diagonal blocks,
/// `lower[i]` the block at (i+1, i), and the upper blocks are their
/// transposes. Returns the solution blocks and the final Schur complement
/// (the marginal information of the last state).
fn solve_block_tridiagonal(
    diag: &[DMatrix<f64>],
    lower: &[DMatrix<f64>],
    rhs: &[DVector<f64>],
) -> Option<(Vec<DVector<f64>>, DMatrix<f64>)> {
    let n = diag.len();
    let mut d_mod: Vec<DMatrix<f64>> = Vec::with_capacity(n);
    let mut r_mod: Vec<DVector<f64>> = Vec::with_capacity(n);
    d_mod.push(diag[0].clone());
    r_mod.push(rhs[0].clone());
    for i in 1..n {
        let prev_inv = d_mod[i - 1].clone().cholesky()?.inverse();
        let m = &lower[i - 1] * prev_inv;
        d_mod.push(&diag[i] - &m * lower[i - 1].transpose());
        let r = &rhs[i] - &m * &r_mod[i - 1];
        r_mod.push(r);
    }
    let last_info = d_mod[n - 1].clone();
    let mut x = vec![DVector::zeros(0); n];
    x[n - 1] = d_mod[n - 1].clone().cholesky()?.solve(&r_mod[n - 1]);
    for i in (0..n.saturating_sub(1)).rev() {
        let r = &r_mod[i] - lower[i].transpose() * &x[i + 1];
        x[i] = d_mod[i].clone().cholesky()?.solve(&r);
    }
    Some((x, last_info))
}
