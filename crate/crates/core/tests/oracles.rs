use attctl_core::attitude::{AxisAngle, Quaternion, Vec3};
use attctl_core::dynamics::{clamp_torque, step_dynamics, FailureMode, SatelliteParams, SatelliteState};
use attctl_core::env::{sample_state_in_range, sample_unit_axis};
use attctl_core::eval::{aggregate_envelope, first_crossing_time, settled_time, EpisodeTrace};
use attctl_core::ppo::{gae, mean_and_variance, select_best};
use attctl_core::rng::seeded;
use proptest::prelude::*;
use rand::Rng;

fn trace(error: Vec<f64>) -> EpisodeTrace {
    EpisodeTrace { time: (0..error.len()).map(|k| k as f64 * 0.5).collect(), error, ..EpisodeTrace::default() }
}

/// Scan backwards from the end: the settled time is the start of the final
/// run of in-band samples.
fn settled_reverse_scan(time: &[f64], error: &[f64], acc: f64) -> Option<f64> {
    let mut k = error.len();
    while k > 0 && error[k - 1] < acc {
        k -= 1;
    }
    (k < error.len()).then(|| time[k])
}

#[test]
fn settled_time_matches_reverse_scan() {
    let mut rng = seeded(11, &[]);
    for _ in 0..1000 {
        let n = rng.random_range(1..60);
        let err: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..0.02)).collect();
        let t = trace(err);
        assert_eq!(settled_time(&t.time, &t.error, 0.01), settled_reverse_scan(&t.time, &t.error, 0.01));
    }
}

#[test]
fn envelope_matches_columnwise_brute_force() {
    let mut rng = seeded(12, &[]);
    let traces: Vec<EpisodeTrace> = (0..100).map(|_| trace((0..80).map(|_| rng.random_range(0.0..3.0)).collect())).collect();
    let env = aggregate_envelope(&traces).unwrap();
    for k in 0..80 {
        let col: Vec<f64> = traces.iter().map(|t| t.error[k]).collect();
        let (mean, var) = mean_and_variance(&col);
        assert!((env.mean[k] - mean).abs() < 1e-12);
        assert!((env.std[k] - var.sqrt()).abs() < 1e-12);
        assert_eq!(env.max[k], col.iter().cloned().fold(0.0, f64::max));
    }
}

#[test]
fn gae_with_unit_lambda_is_discounted_return_minus_value() {
    let r = [0.5, -0.2, 1.0, 0.3, 0.0, 0.7];
    let v = [0.1, 0.4, -0.3, 0.2, 0.9, -0.1];
    let done = [false, false, true, false, false, false];
    let last = 0.25;
    let g = 0.9;
    let (adv, ret) = gae(&r, &v, &done, last, g, 1.0);
    let mc = [
        0.5 + g * (-0.2 + g * 1.0),
        -0.2 + g * 1.0,
        1.0,
        0.3 + g * (0.0 + g * (0.7 + g * last)),
        0.0 + g * (0.7 + g * last),
        0.7 + g * last,
    ];
    for k in 0..6 {
        assert!((ret[k] - mc[k]).abs() < 1e-12);
        assert!((adv[k] - (mc[k] - v[k])).abs() < 1e-12);
    }
}

#[test]
fn sampled_start_angles_and_axes_are_uniform() {
    let mut rng = seeded(13, &[]);
    let n = 20_000;
    let mut mean_axis = Vec3::ZERO;
    let mut mean_angle = 0.0;
    for _ in 0..n {
        mean_axis += sample_unit_axis(&mut rng) * (1.0 / n as f64);
        let lo: f64 = 30.0;
        let deg = rng.random_range(lo..=180.0);
        let s = sample_state_in_range(&mut rng, deg);
        let angle = s.attitude.angular_distance(&Quaternion::IDENTITY).to_degrees();
        assert!((angle - deg).abs() < 1e-9);
        assert_eq!(s.omega, Vec3::ZERO);
        mean_angle += angle / n as f64;
    }
    // four standard errors of a uniform coordinate on the sphere
    assert!(mean_axis.max_abs() < 4.0 * (1.0f64 / 3.0 / n as f64).sqrt());
    assert!((mean_angle - 105.0).abs() < 1.0);
}

#[test]
fn torque_free_spin_about_major_axis_is_steady() {
    let p = SatelliteParams::default();
    let mut s = SatelliteState { omega: Vec3::new(0.0, 0.05, 0.0), ..Default::default() };
    for _ in 0..200 {
        s = step_dynamics(&s, clamp_torque(Vec3::ZERO), 0.5, &p, FailureMode::Nominal, 20).unwrap();
    }
    assert!((s.omega - Vec3::new(0.0, 0.05, 0.0)).max_abs() < 1e-15);
    let expected = Quaternion::from_axis_angle(&AxisAngle::new(Vec3::new(0.0, 1.0, 0.0), (100.0 * 0.05) % (2.0 * std::f64::consts::PI)).unwrap());
    assert!(s.attitude.angular_distance(&expected) < 1e-10);
}

proptest! {
    #[test]
    fn envelope_is_permutation_invariant(
        rows in prop::collection::vec(prop::collection::vec(0.0f64..3.2, 12), 2..10),
        rot in 0usize..10,
    ) {
        let traces: Vec<EpisodeTrace> = rows.iter().cloned().map(trace).collect();
        let mut shuffled = traces.clone();
        let len = shuffled.len();
        shuffled.rotate_left(rot % len);
        shuffled.reverse();
        let a = aggregate_envelope(&traces).unwrap();
        let b = aggregate_envelope(&shuffled).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn settling_never_precedes_first_crossing(err in prop::collection::vec(0.0f64..0.1, 1..50), acc in 0.001f64..0.1) {
        let t = trace(err);
        let first = first_crossing_time(&t.time, &t.error, acc);
        match settled_time(&t.time, &t.error, acc) {
            Some(s) => prop_assert!(first.is_some_and(|f| f <= s)),
            None => prop_assert!(t.error.last().is_some_and(|&e| e >= acc)),
        }
    }

    #[test]
    fn selection_picks_a_maximum(rewards in prop::collection::vec(-100.0f64..100.0, 1..12)) {
        let candidates: Vec<(u64, f64)> = rewards.iter().enumerate().map(|(i, &r)| (i as u64, r)).collect();
        let i = select_best(&candidates).unwrap();
        prop_assert!(rewards.iter().all(|&r| r <= rewards[i]));
        prop_assert!(rewards[..i].iter().all(|&r| r < rewards[i]));
    }

    #[test]
    fn advantages_plus_values_are_returns(
        steps in prop::collection::vec((-1.0f64..1.0, -3.0f64..3.0, any::<bool>()), 1..30),
        last in -3.0f64..3.0,
        lambda in 0.0f64..=1.0,
    ) {
        let r: Vec<f64> = steps.iter().map(|s| s.0).collect();
        let v: Vec<f64> = steps.iter().map(|s| s.1).collect();
        let d: Vec<bool> = steps.iter().map(|s| s.2).collect();
        let (adv, ret) = gae(&r, &v, &d, last, 0.99, lambda);
        for k in 0..r.len() {
            prop_assert!((adv[k] + v[k] - ret[k]).abs() < 1e-12);
        }
    }
}
