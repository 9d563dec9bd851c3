//! Synthetic radar world: ground-truth trajectories from piecewise-constant
//! body accelerations, landmark worlds scattered along the path, and noisy
//! scan rendering matched to the measurement model.
//!
//! Trajectory generation integrates with the fine-step RK4 reference and
//! never touches the Magnus discretization, so pipeline tests compare two
//! independent code paths.

use nalgebra::{Vector3, Vector4};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, Normal, Poisson};

use crate::integrators::rk4_propagate;
use crate::measurement::{
    polar_from_cart, point_in_sensor, MapPoint, RadarDetection, RadarScan, SensorModel,
};
use crate::prior::State;
use crate::se3::{Pose, Twist};

/// One piecewise-constant-acceleration segment, in physical body-frame
/// quantities (forward positive).
#[derive(Debug, Clone, Copy)]
pub struct ProfileSegment {
    pub duration: f64,
    pub body_acceleration: Twist,
}

/// Ground-truth motion description in physical conventions.
#[derive(Debug, Clone)]
pub struct MotionProfile {
    pub initial_pose_in_world: Pose,
    /// Forward-positive body velocity at t = 0.
    pub initial_body_velocity: Twist,
    pub segments: Vec<ProfileSegment>,
}

impl MotionProfile {
    pub fn duration(&self) -> f64 {
        self.segments.iter().map(|s| s.duration).sum()
    }
}

/// RK4 substeps per rendered frame for ground-truth integration.
const GT_SUBSTEPS_PER_FRAME: usize = 1000;

/// Integrate the profile into ground-truth states at `1/frame_rate` spacing.
///
/// Each constant-acceleration piece runs through the RK4 reference
/// integrator; segment boundaries are honored exactly within frames.
pub fn gen_trajectory(profile: &MotionProfile, frame_rate: f64) -> Vec<State> {
    assert!(frame_rate > 0.0);
    let frame_dt = 1.0 / frame_rate;
    let total = profile.duration();
    let n_frames = (total * frame_rate).floor() as usize;

    // internal state twist is minus the physical body twist
    let mut x = State::from_physical(
        &profile.initial_pose_in_world,
        &profile.initial_body_velocity,
        &profile
            .segments
            .first()
            .map(|s| s.body_acceleration)
            .unwrap_or(Twist::zero()),
        0.0,
    );

    let mut states = Vec::with_capacity(n_frames + 1);
    states.push(x);

    let mut seg_idx = 0usize;
    let mut seg_end = profile.segments.first().map(|s| s.duration).unwrap_or(0.0);
    for frame in 1..=n_frames {
        let frame_end = frame as f64 * frame_dt;
        let mut t = x.stamp;
        while t < frame_end - 1e-12 {
            while t >= seg_end - 1e-12 && seg_idx + 1 < profile.segments.len() {
                seg_idx += 1;
                seg_end += profile.segments[seg_idx].duration;
            }
            x.acceleration = -profile.segments[seg_idx].body_acceleration;
            let piece_end = frame_end.min(seg_end).max(t + 1e-12);
            let piece = piece_end - t;
            let substeps =
                ((GT_SUBSTEPS_PER_FRAME as f64) * piece / frame_dt).ceil().max(1.0) as usize;
            x = rk4_propagate(&x, piece, substeps);
            t = x.stamp;
        }
        x.stamp = frame_end; // suppress accumulation of float drift
        states.push(x);
    }
    states
}

/// One rigid rendered cluster with a precomputed world trace.
#[derive(Debug, Clone)]
pub struct DynamicObject {
    /// Per frame: cluster point world positions and velocities.
    pub points_per_frame: Vec<Vec<(Vector3<f64>, Vector3<f64>)>>,
    /// Representative center per frame (for occlusion checks).
    pub center_per_frame: Vec<Vector3<f64>>,
    /// Effective occlusion radius (m): the body silhouette, larger than the
    /// point cluster spread.
    pub occlusion_radius: f64,
    pub occludes: bool,
}

/// Static landmarks plus optional dynamic objects and clutter parameters.
#[derive(Debug, Clone)]
pub struct WorldModel {
    pub landmarks: Vec<Vector3<f64>>,
    pub dynamic_objects: Vec<DynamicObject>,
    /// Expected false detections per frame.
    pub clutter_rate: f64,
    pub detection_probability: f64,
}

/// Derive a per-frame seed from the sequence seed; scans rendered with the
/// same pair are bit-identical.
pub fn frame_seed(seed: u64, frame: usize) -> u64 {
    // splitmix64 step
    let mut z = seed ^ (frame as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn sensor_frame_of(x: &State, sensor: &SensorModel, world: &Vector3<f64>) -> Vector3<f64> {
    sensor
        .t_sv
        .transform_point(&x.pose.transform_point(world))
}

/// Angular separation between two sensor-frame directions.
fn angular_distance(a: &Vector3<f64>, b: &Vector3<f64>) -> f64 {
    let ca = (a.dot(b) / (a.norm() * b.norm())).clamp(-1.0, 1.0);
    ca.acos()
}

/// Radial velocity of a point with world-frame velocity `vel` seen from the
/// moving sensor: the static-world term plus the point's own motion mapped
/// into the sensor frame.
fn radial_velocity_moving(
    x: &State,
    sensor: &SensorModel,
    r_s: &Vector3<f64>,
    world_vel: &Vector3<f64>,
) -> f64 {
    let w_s = sensor.t_sv.adjoint() * x.velocity.0;
    let nu_s = w_s.fixed_rows::<3>(0).into_owned();
    let omega_s = w_s.fixed_rows::<3>(3).into_owned();
    let own = sensor.t_sv.rotation * (x.pose.rotation * world_vel);
    let r_dot = omega_s.cross(r_s) + nu_s + own;
    r_s.dot(&r_dot) / r_s.norm()
}

/// Render one noisy radar scan of the world from a ground-truth state.
///
/// `frame` indexes the dynamic objects' traces; pass the position of
/// `x_true` in the generated trajectory. Bit-reproducible for a fixed seed.
pub fn render_scan(
    x_true: &State,
    world: &WorldModel,
    sensor: &SensorModel,
    frame: usize,
    seed: u64,
) -> RadarScan {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let noise_cov = sensor.noise_cov();
    let mut detections = Vec::new();

    let occluders: Vec<(Vector3<f64>, f64, f64)> = world
        .dynamic_objects
        .iter()
        .filter(|o| o.occludes && frame < o.center_per_frame.len())
        .map(|o| {
            let c = sensor_frame_of(x_true, sensor, &o.center_per_frame[frame]);
            let dist = c.norm();
            let halfwidth = (o.occlusion_radius / dist.max(0.5)).atan();
            (c, dist, halfwidth)
        })
        .collect();

    let render_point = |rng: &mut ChaCha12Rng,
                            detections: &mut Vec<RadarDetection>,
                            world_pos: &Vector3<f64>,
                            world_vel: Option<&Vector3<f64>>,
                            check_occlusion: bool| {
        let r_s = sensor_frame_of(x_true, sensor, world_pos);
        let polar = match polar_from_cart(&r_s) {
            Ok(p) => p,
            Err(_) => return,
        };
        if !sensor.in_fov(&polar) {
            return;
        }
        if check_occlusion {
            for (c, dist, halfwidth) in &occluders {
                if polar.x > *dist && angular_distance(&r_s, c) < *halfwidth {
                    return;
                }
            }
        }
        if rng.random_range(0.0..1.0) >= world.detection_probability {
            return;
        }
        let v = match world_vel {
            Some(vel) => radial_velocity_moving(x_true, sensor, &r_s, vel),
            None => radial_velocity_moving(x_true, sensor, &r_s, &Vector3::zeros()),
        };
        let draw = |rng: &mut ChaCha12Rng, sigma: f64| -> f64 {
            if sigma > 0.0 {
                Normal::new(0.0, sigma).unwrap().sample(rng)
            } else {
                0.0
            }
        };
        let z = Vector4::new(
            (polar.x + draw(rng, sensor.sigma_range)).max(1e-3),
            polar.y + draw(rng, sensor.sigma_azimuth),
            polar.z + draw(rng, sensor.sigma_elevation),
            v + draw(rng, sensor.sigma_doppler),
        );
        detections.push(RadarDetection::new(z[0], z[1], z[2], z[3], noise_cov));
    };

    for lm in &world.landmarks {
        render_point(&mut rng, &mut detections, lm, None, true);
    }
    for obj in &world.dynamic_objects {
        if frame < obj.points_per_frame.len() {
            for (pos, vel) in &obj.points_per_frame[frame] {
                render_point(&mut rng, &mut detections, pos, Some(vel), false);
            }
        }
    }

    if world.clutter_rate > 0.0 {
        let n_clutter = Poisson::new(world.clutter_rate).unwrap().sample(&mut rng) as usize;
        for _ in 0..n_clutter {
            let u: f64 = rng.random_range(0.0..1.0);
            let r3_min = sensor.r_min.powi(3);
            let r3_max = sensor.r_max.powi(3);
            let r = (r3_min + u * (r3_max - r3_min)).cbrt();
            detections.push(RadarDetection::new(
                r,
                rng.random_range(-sensor.fov_azimuth..sensor.fov_azimuth),
                rng.random_range(-sensor.fov_elevation..sensor.fov_elevation),
                rng.random_range(-5.0..5.0),
                noise_cov,
            ));
        }
    }

    RadarScan {
        stamp: x_true.stamp,
        detections,
    }
}

/// A named simulation setup.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub name: &'static str,
    pub profile: MotionProfile,
    pub frame_rate: f64,
    pub landmark_density: f64,
    pub corridor_halfwidth: f64,
    pub clutter_rate: f64,
    pub detection_probability: f64,
    /// Follow-distance window of a leading occluder vehicle:
    /// (start_s, end_s, follow_distance_m).
    pub occluder_window: Option<(f64, f64, f64)>,
}

fn constant(duration: f64) -> ProfileSegment {
    ProfileSegment {
        duration,
        body_acceleration: Twist::zero(),
    }
}

fn accel(duration: f64, ax: f64) -> ProfileSegment {
    ProfileSegment {
        duration,
        body_acceleration: Twist::new(Vector3::new(ax, 0.0, 0.0), Vector3::zeros()),
    }
}

fn accel_yaw(duration: f64, ax: f64, yaw_dd: f64) -> ProfileSegment {
    ProfileSegment {
        duration,
        body_acceleration: Twist::new(
            Vector3::new(ax, 0.0, 0.0),
            Vector3::new(0.0, 0.0, yaw_dd),
        ),
    }
}

fn accel_pitch(duration: f64, ax: f64, pitch_dd: f64) -> ProfileSegment {
    ProfileSegment {
        duration,
        body_acceleration: Twist::new(
            Vector3::new(ax, 0.0, 0.0),
            Vector3::new(0.0, pitch_dd, 0.0),
        ),
    }
}

fn straight_profile(speed: f64, duration: f64) -> MotionProfile {
    MotionProfile {
        initial_pose_in_world: Pose::identity(),
        initial_body_velocity: Twist::new(Vector3::new(speed, 0.0, 0.0), Vector3::zeros()),
        segments: vec![constant(duration)],
    }
}

/// The built-in scenario set.
pub fn scenario_presets() -> Vec<Scenario> {
    let base = |name, profile| Scenario {
        name,
        profile,
        frame_rate: 13.0,
        landmark_density: 0.05,
        corridor_halfwidth: 40.0,
        clutter_rate: 5.0,
        detection_probability: 0.95,
        occluder_window: None,
    };

    let urban_segments = vec![
        accel(5.0, 2.4),          // 0 -> 12 m/s
        constant(12.0),           // cruise
        accel(4.0, -2.2),         // brake to ~3.2
        accel_yaw(2.0, 0.3, 0.35), // enter right turn
        accel_yaw(2.0, 0.3, -0.35), // straighten
        accel(6.0, 1.5),          // 4.4 -> 13.4
        constant(14.0),
        accel_yaw(2.0, -0.5, -0.3), // left turn while braking
        accel_yaw(2.0, -0.5, 0.3),
        constant(12.0),
        accel(4.0, -1.8),
        accel(5.0, 1.6),
        constant(20.0),
    ];

    let highway_segments = vec![
        constant(6.0),
        // lane change: lateral jolt left then right
        ProfileSegment {
            duration: 1.0,
            body_acceleration: Twist::new(Vector3::new(0.0, 1.5, 0.0), Vector3::zeros()),
        },
        ProfileSegment {
            duration: 2.0,
            body_acceleration: Twist::new(Vector3::new(0.0, -1.5, 0.0), Vector3::zeros()),
        },
        ProfileSegment {
            duration: 1.0,
            body_acceleration: Twist::new(Vector3::new(0.0, 1.5, 0.0), Vector3::zeros()),
        },
        accel(6.0, 0.5),
        constant(8.0),
        accel(4.0, -0.7),
        ProfileSegment {
            duration: 1.0,
            body_acceleration: Twist::new(Vector3::new(0.0, -1.2, 0.0), Vector3::zeros()),
        },
        ProfileSegment {
            duration: 2.0,
            body_acceleration: Twist::new(Vector3::new(0.0, 1.2, 0.0), Vector3::zeros()),
        },
        ProfileSegment {
            duration: 1.0,
            body_acceleration: Twist::new(Vector3::new(0.0, -1.2, 0.0), Vector3::zeros()),
        },
        constant(12.0),
    ];

    let hilly_segments = vec![
        accel(4.0, 1.5), // 10 -> 16
        accel_pitch(2.5, 0.0, 0.06),  // nose up onto a climb
        accel_pitch(2.5, 0.0, -0.06), // hold grade
        constant(8.0),
        accel_pitch(2.5, -0.3, -0.07), // crest, nose down
        accel_pitch(2.5, 0.3, 0.07),
        accel_yaw(3.0, 0.0, 0.2), // winding section with roll coupling
        ProfileSegment {
            duration: 3.0,
            body_acceleration: Twist::new(
                Vector3::new(0.0, 0.0, 0.0),
                Vector3::new(0.08, 0.0, -0.2),
            ),
        },
        ProfileSegment {
            duration: 3.0,
            body_acceleration: Twist::new(
                Vector3::new(0.0, 0.0, 0.0),
                Vector3::new(-0.08, 0.0, 0.0),
            ),
        },
        constant(8.0),
        accel_pitch(2.0, 0.0, 0.05),
        accel_pitch(2.0, 0.0, -0.05),
        constant(22.0),
    ];

    let blockage_profile = MotionProfile {
        initial_pose_in_world: Pose::identity(),
        initial_body_velocity: Twist::new(Vector3::new(8.0, 0.0, 0.0), Vector3::zeros()),
        segments: vec![
            constant(8.0),
            accel(4.0, -1.5), // slow to 2 m/s behind traffic
            constant(6.0),    // crawl with the occluder close ahead
            accel(4.0, 1.8),  // traffic clears
            accel(3.0, 2.0),
            constant(45.0),
        ],
    };

    vec![
        base("straight_cruise", straight_profile(25.0, 40.0)),
        Scenario {
            ..base("urban_stop_go", MotionProfile {
                initial_pose_in_world: Pose::identity(),
                initial_body_velocity: Twist::zero(),
                segments: urban_segments,
            })
        },
        Scenario {
            ..base("highway", MotionProfile {
                initial_pose_in_world: Pose::identity(),
                initial_body_velocity: Twist::new(
                    Vector3::new(25.0, 0.0, 0.0),
                    Vector3::zeros(),
                ),
                segments: highway_segments,
            })
        },
        Scenario {
            landmark_density: 0.2,
            corridor_halfwidth: 25.0,
            clutter_rate: 0.0,
            ..base("yaw_accel_fig1", MotionProfile {
                initial_pose_in_world: Pose::identity(),
                initial_body_velocity: Twist::new(
                    Vector3::new(5.0, 0.0, 0.0),
                    Vector3::zeros(),
                ),
                segments: vec![ProfileSegment {
                    duration: 3.0,
                    body_acceleration: Twist::new(
                        Vector3::zeros(),
                        Vector3::new(0.0, 0.0, 0.5),
                    ),
                }],
            })
        },
        Scenario {
            occluder_window: Some((8.0, 18.5, 4.0)),
            ..base("blockage", blockage_profile)
        },
        Scenario {
            ..base("hilly_loop", MotionProfile {
                initial_pose_in_world: Pose::identity(),
                initial_body_velocity: Twist::new(
                    Vector3::new(10.0, 0.0, 0.0),
                    Vector3::zeros(),
                ),
                segments: hilly_segments,
            })
        },
    ]
}

pub fn preset_by_name(name: &str) -> Option<Scenario> {
    scenario_presets().into_iter().find(|s| s.name == name)
}

pub fn preset_names() -> Vec<&'static str> {
    scenario_presets().iter().map(|s| s.name).collect()
}

/// Path length of a ground-truth trajectory.
pub fn path_length(gt: &[State]) -> f64 {
    gt.windows(2)
        .map(|w| {
            (w[1].vehicle_pose_in_world().translation - w[0].vehicle_pose_in_world().translation)
                .norm()
        })
        .sum()
}

/// Scatter landmarks in a corridor around the trajectory with some vertical
/// structure (ground returns and elevated targets).
pub fn build_world(scenario: &Scenario, gt: &[State], seed: u64) -> WorldModel {
    let mut rng = ChaCha12Rng::seed_from_u64(frame_seed(seed, 0x77));
    let length = path_length(gt).max(1.0);
    let area = length * 2.0 * scenario.corridor_halfwidth;
    let n = (scenario.landmark_density * area).round() as usize;

    let mut landmarks = Vec::with_capacity(n);
    for _ in 0..n {
        let along = rng.random_range(0.0..gt.len() as f64 - 1.0);
        let idx = along.floor() as usize;
        let frac = along - idx as f64;
        let a = gt[idx].vehicle_pose_in_world();
        let b = gt[(idx + 1).min(gt.len() - 1)].vehicle_pose_in_world();
        let center = a.translation * (1.0 - frac) + b.translation * frac;
        let lateral = rng.random_range(-scenario.corridor_halfwidth..scenario.corridor_halfwidth);
        let forward = rng.random_range(-10.0..30.0);
        // mixture of ground-level and elevated structure
        let height = if rng.random_range(0.0..1.0) < 0.55 {
            rng.random_range(-1.0..1.0)
        } else {
            rng.random_range(1.0..9.0)
        };
        let heading = a.rotation;
        let offset = heading * Vector3::new(forward, lateral, height);
        landmarks.push(center + offset);
    }

    let mut dynamic_objects = Vec::new();
    if let Some((t0, t1, follow)) = scenario.occluder_window {
        dynamic_objects.push(build_occluder(gt, scenario.frame_rate, t0, t1, follow, &mut rng));
    }

    WorldModel {
        landmarks,
        dynamic_objects,
        clutter_rate: scenario.clutter_rate,
        detection_probability: scenario.detection_probability,
    }
}

/// A leading vehicle that sits `follow` meters ahead of the ego vehicle
/// inside the window and far outside the field of view otherwise.
fn build_occluder(
    gt: &[State],
    frame_rate: f64,
    t0: f64,
    t1: f64,
    follow: f64,
    rng: &mut ChaCha12Rng,
) -> DynamicObject {
    let n_points = 6;
    let offsets: Vec<Vector3<f64>> = (0..n_points)
        .map(|_| {
            Vector3::new(
                rng.random_range(-0.4..0.4),
                rng.random_range(-0.9..0.9),
                rng.random_range(-0.3..0.6),
            )
        })
        .collect();

    let dt = 1.0 / frame_rate;
    let mut centers = Vec::with_capacity(gt.len());
    for x in gt {
        let t = x.stamp;
        let pose = x.vehicle_pose_in_world();
        let center = if t >= t0 && t <= t1 {
            pose.translation + pose.rotation * Vector3::new(follow, 0.0, 0.2)
        } else {
            // parked far off to the side, outside any useful FOV
            pose.translation + pose.rotation * Vector3::new(-50.0, 120.0, 0.0)
        };
        centers.push(center);
    }
    let mut points_per_frame = Vec::with_capacity(gt.len());
    for (i, x) in gt.iter().enumerate() {
        let heading = x.vehicle_pose_in_world().rotation;
        let prev = centers[i.saturating_sub(1)];
        let next = centers[(i + 1).min(centers.len() - 1)];
        let span = ((i + 1).min(centers.len() - 1) - i.saturating_sub(1)).max(1) as f64;
        let vel = (next - prev) / (span * dt);
        // suppress the teleport frames at the window edges
        let vel = if vel.norm() > 60.0 {
            Vector3::zeros()
        } else {
            vel
        };
        let pts = offsets
            .iter()
            .map(|o| (centers[i] + heading * *o, vel))
            .collect();
        points_per_frame.push(pts);
    }
    DynamicObject {
        points_per_frame,
        center_per_frame: centers,
        occlusion_radius: 3.2,
        occludes: true,
    }
}

/// Full simulation: trajectory, world and rendered scans.
pub fn simulate(scenario: &Scenario, seed: u64) -> (Vec<State>, WorldModel, Vec<RadarScan>) {
    let gt = gen_trajectory(&scenario.profile, scenario.frame_rate);
    let world = build_world(scenario, &gt, seed);
    let sensor = SensorModel::default();
    let scans = gt
        .iter()
        .enumerate()
        .map(|(i, x)| render_scan(x, &world, &sensor, i, frame_seed(seed, i)))
        .collect();
    (gt, world, scans)
}

/// Count of static landmarks inside the field of view from a state,
/// ignoring dropout and occlusion. Used by constructed-property tests.
pub fn static_points_in_fov(x: &State, world: &WorldModel, sensor: &SensorModel) -> usize {
    world
        .landmarks
        .iter()
        .filter(|lm| {
            point_in_sensor(x, sensor, &MapPoint::new(**lm, 0, 0))
                .ok()
                .and_then(|r| polar_from_cart(&r).ok())
                .map(|p| sensor.in_fov(&p))
                .unwrap_or(false)
        })
        .count()
}
