use magnus_odom_core::prior::*;
use magnus_odom_core::integrators::*;
use magnus_odom_core::se3::*;
use nalgebra::Vector3;
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

fn random_unit(rng: &mut StdRng) -> Vector3<f64> {
    loop {
        let v = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
        let n = v.norm();
        if n > 1e-3 && n <= 1.0 { return v / n; }
    }
}

fn main() {
    let mut rng = StdRng::seed_from_u64(37);
    let mut worst: (f64, Option<State>) = (0.0, None);
    for _ in 0..200 {
        let x = State {
            pose: se3_exp(&Twist::new(random_unit(&mut rng)*3.0, random_unit(&mut rng)*1.0)),
            velocity: Twist::new(random_unit(&mut rng)*rng.random_range(0.0..30.0), random_unit(&mut rng)*rng.random_range(0.0..1.0)),
            acceleration: Twist::new(random_unit(&mut rng)*rng.random_range(0.0..5.0), random_unit(&mut rng)*rng.random_range(0.0..1.0)),
            stamp: 0.0,
        };
        let err = |dt: f64, n: usize| {
            let m = propagate_nominal(&x, dt);
            let r = rk4_propagate(&x, dt, n);
            se3_log(&m.pose.compose(&r.pose.inverse())).unwrap().0.norm()
        };
        let e1 = err(0.077, 1000);
        if e1 > worst.0 { worst = (e1, Some(x)); }
    }
    let x = worst.1.unwrap();
    println!("worst err at dt=0.077: {:.3e}", worst.0);
    println!("v = {:?} |v|={:.2}", x.velocity.0.as_slice(), x.velocity.linear().norm());
    println!("w = {:.3} wd_ang = {:.3} wd_lin = {:.2}", x.velocity.angular().norm(), x.acceleration.angular().norm(), x.acceleration.linear().norm());
    for (dt, n) in [(0.077, 1000), (0.077, 4000), (0.0385, 1000), (0.01925, 1000)] {
        let m = propagate_nominal(&x, dt);
        let r = rk4_propagate(&x, dt, n);
        let e = se3_log(&m.pose.compose(&r.pose.inverse())).unwrap().0.norm();
        println!("dt={:.5} substeps={}: err={:.4e}", dt, n, e);
    }
    // rk4 self-convergence on worst state
    let a = rk4_propagate(&x, 0.077, 1000);
    let b = rk4_propagate(&x, 0.077, 2000);
    let d = se3_log(&a.pose.compose(&b.pose.inverse())).unwrap().0.norm();
    println!("rk4 1000 vs 2000: {:.3e}", d);
    // exact commuting case: omega(t) = (a + b t) z
    let xc = State {
        pose: Pose::identity(),
        velocity: Twist::new(Vector3::zeros(), Vector3::new(0.0,0.0,0.5)),
        acceleration: Twist::new(Vector3::zeros(), Vector3::new(0.0,0.0,1.0)),
        stamp: 0.0,
    };
    let exact = se3_exp(&Twist::new(Vector3::zeros(), Vector3::new(0.0,0.0,0.5*0.077 + 1.0*0.077f64.powi(2)/2.0)));
    let r = rk4_propagate(&xc, 0.077, 1000);
    let e = se3_log(&exact.compose(&r.pose.inverse())).unwrap().0.norm();
    println!("rk4 vs exact commuting: {:.3e}", e);
}
