mod common;

use proptest::prelude::*;
use racesim::dynamics::*;
use racesim::geometry::wrap_angle;
use std::f64::consts::PI;

fn state(v_x: f64, v_y: f64, psi_dot: f64) -> VehicleState {
    VehicleState {
        v_x,
        v_y,
        psi_dot,
        ..Default::default()
    }
}

fn rollout(
    s0: VehicleState,
    u: ControlInput,
    dt: f64,
    n: usize,
    f: impl Fn(&VehicleState, &ControlInput) -> StateDerivative,
) -> VehicleState {
    (0..n).fold(s0, |s, _| rk4_step(&s, dt, |x| f(x, &u)))
}

#[test]
fn blend_is_continuous_across_the_band() {
    for p in [VehicleParams::f1tenth(), VehicleParams::gokart()] {
        let u = ControlInput::new(0.8, 0.15);
        let (lo, hi) = (p.v_blend_lo, p.v_blend_hi);
        let mut worst = 0.0f64;
        let n = 4000;
        let sweep = (0..=n)
            .map(|i| lo - 0.2 + (hi - lo + 0.4) * i as f64 / n as f64)
            .chain([lo, hi]);
        for v in sweep {
            let eps = 1e-12;
            let a = blended_derivative(&state(v - eps, 0.05, 0.3), &u, &p).to_array();
            let b = blended_derivative(&state(v + eps, 0.05, 0.3), &u, &p).to_array();
            for k in 0..6 {
                worst = worst.max((a[k] - b[k]).abs());
            }
        }
        assert!(worst < 1e-9, "jump {worst}");
    }
}

#[test]
fn rk4_converges_at_fourth_order() {
    let p = VehicleParams::f1tenth();
    let u = ControlInput::new(0.5, 0.1);
    let s0 = state(4.0, 0.0, 0.0);
    let run = |dt: f64| {
        rollout(s0, u, dt, (1.0 / dt).round() as usize, |s, u| {
            blended_derivative(s, u, &p)
        })
    };
    let err = |a: VehicleState, b: VehicleState| {
        let (a, b) = (a.to_array(), b.to_array());
        (0..6).map(|i| (a[i] - b[i]).powi(2)).sum::<f64>().sqrt()
    };
    let (y1, y2, y3) = (run(0.02), run(0.01), run(0.005));
    let order = (err(y1, y2) / err(y2, y3)).log2();
    assert!((3.5..=4.5).contains(&order), "order {order}");
}

#[test]
fn low_slip_dynamic_matches_kinematic() {
    for p in [VehicleParams::f1tenth(), VehicleParams::gokart()] {
        for delta in [-0.02, -0.01, 0.005, 0.02] {
            for v in [p.v_blend_hi, p.v_blend_hi + 1.0] {
                let u = ControlInput::new(0.0, delta);
                let beta = (p.l_r * delta.tan() / p.wheelbase()).atan();
                let on_turn = state(v, v * beta.tan(), v * beta.sin() / p.l_r);
                for s0 in [state(v, 0.0, 0.0), on_turn] {
                    let n = 1000;
                    let d = rollout(s0, u, 1e-3, n, |s, u| dynamic_derivative(s, u, &p));
                    let k = rollout(s0, u, 1e-3, n, |s, u| kinematic_derivative(s, u, &p));
                    let gap = ((d.x - k.x).powi(2) + (d.y - k.y).powi(2)).sqrt();
                    let travelled = (k.x.powi(2) + k.y.powi(2)).sqrt();
                    assert!(
                        gap < 0.01 * travelled,
                        "delta {delta} v {v}: {gap} vs {travelled}"
                    );
                }
            }
        }
    }
}

#[test]
fn steady_cornering_matches_nested_bisection() {
    let p = VehicleParams::f1tenth();
    let (v_x, delta) = (3.0, 0.08);
    let (vy, r) = common::steady_state_circle(v_x, delta, &p);
    let d = dynamic_derivative(&state(v_x, vy, r), &ControlInput::new(0.0, delta), &p);
    assert!(d.v_y_dot.abs() < 1e-9 && d.psi_ddot.abs() < 1e-9);
    // Starting at the equilibrium, holding the speed, stays there.
    let mut s = state(v_x, vy, r);
    let hold = -d.v_x_dot;
    for _ in 0..500 {
        s = step(&s, &ControlInput::new(hold, delta), 0.01, &p).unwrap();
    }
    assert!((s.v_y - vy).abs() < 1e-6 && (s.psi_dot - r).abs() < 1e-6);
    let radius = (v_x * v_x + vy * vy).sqrt() / r;
    // Understeer: the turn is wider than the kinematic geometry gives.
    let l = p.wheelbase();
    assert!(radius > l / delta.tan() * 0.9, "radius {radius}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn trajectories_are_frame_invariant(
        theta in -PI..PI,
        x in -20.0f64..20.0, y in -20.0f64..20.0, psi in -PI..PI,
        v_x in 0.0f64..8.0, v_y in -0.3f64..0.3, r in -1.0f64..1.0,
        a in -3.0f64..3.0, delta in -0.4f64..0.4,
    ) {
        let p = VehicleParams::f1tenth();
        let s0 = VehicleState { x, y, psi, v_x, v_y, psi_dot: r };
        let (st, ct) = theta.sin_cos();
        let rotated = VehicleState {
            x: ct * x - st * y,
            y: st * x + ct * y,
            psi: wrap_angle(psi + theta),
            ..s0
        };
        let u = ControlInput::new(a, delta);
        let (mut s, mut q) = (s0, rotated);
        for _ in 0..100 {
            s = step(&s, &u, 0.01, &p).unwrap();
            q = step(&q, &u, 0.01, &p).unwrap();
            let back_x = ct * q.x + st * q.y;
            let back_y = -st * q.x + ct * q.y;
            let scale = 1.0 + s.x.abs().max(s.y.abs());
            prop_assert!((back_x - s.x).abs() < 1e-9 * scale);
            prop_assert!((back_y - s.y).abs() < 1e-9 * scale);
            prop_assert!(wrap_angle(q.psi - theta - s.psi).abs() < 1e-9);
            prop_assert!((q.v_x - s.v_x).abs() < 1e-9);
            prop_assert!((q.v_y - s.v_y).abs() < 1e-9);
            prop_assert!((q.psi_dot - s.psi_dot).abs() < 1e-9);
        }
    }

    #[test]
    fn heading_stays_wrapped(v_x in 0.0f64..10.0, delta in -0.4f64..0.4, r in -5.0f64..5.0) {
        let p = VehicleParams::f1tenth();
        let mut s = state(v_x, 0.0, r);
        for _ in 0..300 {
            s = step(&s, &ControlInput::new(0.0, delta), 0.01, &p).unwrap();
            prop_assert!(s.psi > -PI && s.psi <= PI);
        }
    }
}
