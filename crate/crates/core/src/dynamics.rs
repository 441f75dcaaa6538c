//! Dynamic single-track vehicle model with Pacejka lateral tire forces.
//!
//! The state is the planar pose plus body-frame velocities. Above
//! `v_blend_hi` the dynamic model drives the state; below `v_blend_lo` the
//! slip-free kinematic model takes over (slip angles are singular at
//! `v_x = 0`). In between, the two derivatives are blended linearly in `v_x`.
//!
//! Integration is classical fixed-step RK4 on the blended derivative.

use crate::geometry::{wrap_angle, Pose2};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Rate (1/s) at which the kinematic model pulls `v_y` and `psi_dot` toward
/// the values implied by the steering geometry.
pub const KINEMATIC_RELAXATION: f64 = 10.0;

#[derive(Debug, Error)]
pub enum DynamicsError {
    #[error("invalid vehicle parameters: {0}")]
    InvalidParams(String),
    #[error("time step must be positive, got {0}")]
    InvalidTimestep(f64),
    #[error(
        "non-finite state after step (dt = {dt}): state = {state:?}, previous = {previous:?}, input = {input:?}"
    )]
    NonFinite {
        state: VehicleState,
        previous: VehicleState,
        input: ControlInput,
        dt: f64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct VehicleState {
    pub x: f64,
    pub y: f64,
    pub psi: f64,
    pub v_x: f64,
    pub v_y: f64,
    pub psi_dot: f64,
}

impl VehicleState {
    pub fn at_rest(pose: Pose2) -> Self {
        Self {
            x: pose.x,
            y: pose.y,
            psi: wrap_angle(pose.psi),
            ..Self::default()
        }
    }

    pub fn pose(&self) -> Pose2 {
        Pose2::new(self.x, self.y, self.psi)
    }

    pub fn is_finite(&self) -> bool {
        self.to_array().iter().all(|v| v.is_finite())
    }

    pub fn to_array(&self) -> [f64; 6] {
        [self.x, self.y, self.psi, self.v_x, self.v_y, self.psi_dot]
    }

    pub fn from_array(a: [f64; 6]) -> Self {
        Self {
            x: a[0],
            y: a[1],
            psi: a[2],
            v_x: a[3],
            v_y: a[4],
            psi_dot: a[5],
        }
    }
}

/// Commanded longitudinal acceleration (m/s²) and steering angle (rad).
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ControlInput {
    pub a: f64,
    pub delta: f64,
}

impl ControlInput {
    pub const fn new(a: f64, delta: f64) -> Self {
        Self { a, delta }
    }

    /// Saturates the input at the actuator limits.
    pub fn clamped(&self, params: &VehicleParams) -> Self {
        Self {
            a: self.a.clamp(-params.a_max, params.a_max),
            delta: self.delta.clamp(-params.delta_max, params.delta_max),
        }
    }
}

/// Simplified Magic Formula coefficients for one axle.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PacejkaCoeffs {
    /// Stiffness factor, 1/rad.
    #[serde(rename = "B")]
    pub b: f64,
    /// Shape factor.
    #[serde(rename = "C")]
    pub c: f64,
    /// Peak friction coefficient.
    pub mu: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VehicleParams {
    /// Mass, kg.
    pub m: f64,
    /// Yaw inertia, kg·m².
    pub i_z: f64,
    /// CoG to front axle, m.
    pub l_f: f64,
    /// CoG to rear axle, m.
    pub l_r: f64,
    /// CoG height, m. Carried for completeness; axle loads are static.
    pub h_cg: f64,
    pub g: f64,
    pub pacejka_front: PacejkaCoeffs,
    pub pacejka_rear: PacejkaCoeffs,
    pub delta_max: f64,
    pub a_max: f64,
    pub v_blend_lo: f64,
    pub v_blend_hi: f64,
}

impl VehicleParams {
    /// 1:10 scale racecar.
    pub fn f1tenth() -> Self {
        Self {
            m: 3.74,
            i_z: 0.04712,
            l_f: 0.15875,
            l_r: 0.17145,
            h_cg: 0.074,
            g: 9.81,
            pacejka_front: PacejkaCoeffs {
                b: 5.0,
                c: 1.5,
                mu: 1.0,
            },
            pacejka_rear: PacejkaCoeffs {
                b: 5.5,
                c: 1.5,
                mu: 1.0,
            },
            delta_max: 0.4189,
            a_max: 9.51,
            v_blend_lo: 0.5,
            v_blend_hi: 1.5,
        }
    }

    /// 1:2 scale gokart.
    pub fn gokart() -> Self {
        Self {
            m: 190.0,
            i_z: 35.0,
            l_f: 0.58,
            l_r: 0.47,
            h_cg: 0.28,
            g: 9.81,
            pacejka_front: PacejkaCoeffs {
                b: 8.0,
                c: 1.4,
                mu: 0.9,
            },
            pacejka_rear: PacejkaCoeffs {
                b: 9.0,
                c: 1.4,
                mu: 0.9,
            },
            delta_max: 0.5,
            a_max: 4.0,
            v_blend_lo: 1.0,
            v_blend_hi: 3.0,
        }
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "f1tenth" => Some(Self::f1tenth()),
            "gokart" => Some(Self::gokart()),
            _ => None,
        }
    }

    pub fn wheelbase(&self) -> f64 {
        self.l_f + self.l_r
    }

    pub fn validate(&self) -> Result<(), DynamicsError> {
        let positive = [
            ("m", self.m),
            ("i_z", self.i_z),
            ("l_f", self.l_f),
            ("l_r", self.l_r),
            ("g", self.g),
            ("delta_max", self.delta_max),
            ("a_max", self.a_max),
        ];
        for (name, value) in positive {
            if !(value > 0.0 && value.is_finite()) {
                return Err(DynamicsError::InvalidParams(format!(
                    "{name} must be positive and finite, got {value}"
                )));
            }
        }
        for (axle, p) in [("front", self.pacejka_front), ("rear", self.pacejka_rear)] {
            if !(p.b > 0.0 && p.c > 0.0 && p.mu > 0.0) {
                return Err(DynamicsError::InvalidParams(format!(
                    "{axle} Pacejka coefficients must be positive, got {p:?}"
                )));
            }
        }
        if !(self.v_blend_lo >= 0.0 && self.v_blend_lo < self.v_blend_hi) {
            return Err(DynamicsError::InvalidParams(format!(
                "need 0 <= v_blend_lo < v_blend_hi, got {} / {}",
                self.v_blend_lo, self.v_blend_hi
            )));
        }
        Ok(())
    }
}

/// Time derivative of [`VehicleState`], one component per state field.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct StateDerivative {
    pub x_dot: f64,
    pub y_dot: f64,
    pub psi_dot: f64,
    pub v_x_dot: f64,
    pub v_y_dot: f64,
    pub psi_ddot: f64,
}

impl StateDerivative {
    pub fn to_array(&self) -> [f64; 6] {
        [
            self.x_dot,
            self.y_dot,
            self.psi_dot,
            self.v_x_dot,
            self.v_y_dot,
            self.psi_ddot,
        ]
    }

    pub fn from_array(a: [f64; 6]) -> Self {
        Self {
            x_dot: a[0],
            y_dot: a[1],
            psi_dot: a[2],
            v_x_dot: a[3],
            v_y_dot: a[4],
            psi_ddot: a[5],
        }
    }

    fn lerp(&self, other: &Self, w: f64) -> Self {
        let a = self.to_array();
        let b = other.to_array();
        Self::from_array(std::array::from_fn(|i| (1.0 - w) * a[i] + w * b[i]))
    }
}

/// Static vertical loads on the front and rear axle, N.
pub fn axle_loads(params: &VehicleParams) -> (f64, f64) {
    let weight = params.m * params.g;
    let l = params.wheelbase();
    (weight * params.l_r / l, weight * params.l_f / l)
}

/// Front and rear slip angles. Only meaningful for `v_x >= v_blend_lo > 0`.
pub fn slip_angles(state: &VehicleState, delta: f64, params: &VehicleParams) -> (f64, f64) {
    let alpha_f = ((state.v_y + params.l_f * state.psi_dot) / state.v_x).atan() - delta;
    let alpha_r = ((state.v_y - params.l_r * state.psi_dot) / state.v_x).atan();
    (alpha_f, alpha_r)
}

/// Lateral force `-mu * F_z * sin(C * atan(B * alpha))`.
///
/// Evaluated on `|alpha|` and re-signed so that the result is odd in `alpha`
/// bit for bit.
pub fn tire_force(alpha: f64, f_z: f64, coeffs: &PacejkaCoeffs) -> f64 {
    let magnitude = coeffs.mu * f_z * (coeffs.c * (coeffs.b * alpha.abs()).atan()).sin();
    if alpha < 0.0 {
        magnitude
    } else {
        -magnitude
    }
}

/// Dynamic single-track derivative. Requires `v_x >= v_blend_lo`.
pub fn dynamic_derivative(
    state: &VehicleState,
    input: &ControlInput,
    params: &VehicleParams,
) -> StateDerivative {
    let (alpha_f, alpha_r) = slip_angles(state, input.delta, params);
    let (fz_f, fz_r) = axle_loads(params);
    let f_f = tire_force(alpha_f, fz_f, &params.pacejka_front);
    let f_r = tire_force(alpha_r, fz_r, &params.pacejka_rear);
    let (sin_psi, cos_psi) = state.psi.sin_cos();
    let (sin_d, cos_d) = input.delta.sin_cos();
    StateDerivative {
        x_dot: state.v_x * cos_psi - state.v_y * sin_psi,
        y_dot: state.v_x * sin_psi + state.v_y * cos_psi,
        psi_dot: state.psi_dot,
        v_x_dot: input.a - f_f * sin_d / params.m + state.psi_dot * state.v_y,
        v_y_dot: (f_f * cos_d + f_r) / params.m - state.psi_dot * state.v_x,
        psi_ddot: (f_f * params.l_f * cos_d - f_r * params.l_r) / params.i_z,
    }
}

/// Kinematic single-track derivative, valid down to and including rest.
///
/// Heading rate comes from the steering geometry; the `v_y` and `psi_dot`
/// states track the geometric values (exactly so under constant steering,
/// with first-order relaxation when they disagree).
pub fn kinematic_derivative(
    state: &VehicleState,
    input: &ControlInput,
    params: &VehicleParams,
) -> StateDerivative {
    let l = params.wheelbase();
    let beta = (params.l_r * input.delta.tan() / l).atan();
    let v = state.v_x;
    let yaw_rate = v * beta.sin() / params.l_r;
    let v_y_target = v * beta.tan();
    StateDerivative {
        x_dot: v * (state.psi + beta).cos(),
        y_dot: v * (state.psi + beta).sin(),
        psi_dot: yaw_rate,
        v_x_dot: input.a,
        v_y_dot: input.a * beta.tan() + KINEMATIC_RELAXATION * (v_y_target - state.v_y),
        psi_ddot: input.a * beta.sin() / params.l_r
            + KINEMATIC_RELAXATION * (yaw_rate - state.psi_dot),
    }
}

/// Weight of the dynamic model: 0 below `v_blend_lo`, 1 above `v_blend_hi`.
pub fn blend_weight(v_x: f64, params: &VehicleParams) -> f64 {
    ((v_x - params.v_blend_lo) / (params.v_blend_hi - params.v_blend_lo)).clamp(0.0, 1.0)
}

pub fn blended_derivative(
    state: &VehicleState,
    input: &ControlInput,
    params: &VehicleParams,
) -> StateDerivative {
    let w = blend_weight(state.v_x, params);
    if w == 0.0 {
        kinematic_derivative(state, input, params)
    } else if w == 1.0 {
        dynamic_derivative(state, input, params)
    } else {
        let kin = kinematic_derivative(state, input, params);
        let dyn_ = dynamic_derivative(state, input, params);
        kin.lerp(&dyn_, w)
    }
}

/// Integrates an arbitrary derivative field with one classical RK4 step.
pub fn rk4_step<F>(state: &VehicleState, dt: f64, f: F) -> VehicleState
where
    F: Fn(&VehicleState) -> StateDerivative,
{
    let y = state.to_array();
    let at =
        |k: [f64; 6], h: f64| VehicleState::from_array(std::array::from_fn(|i| y[i] + h * k[i]));
    let k1 = f(state).to_array();
    let k2 = f(&at(k1, dt / 2.0)).to_array();
    let k3 = f(&at(k2, dt / 2.0)).to_array();
    let k4 = f(&at(k3, dt)).to_array();
    VehicleState::from_array(std::array::from_fn(|i| {
        y[i] + dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i])
    }))
}

/// Advances the vehicle by `dt` seconds under a (clamped) constant input.
pub fn step(
    state: &VehicleState,
    input: &ControlInput,
    dt: f64,
    params: &VehicleParams,
) -> Result<VehicleState, DynamicsError> {
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(DynamicsError::InvalidTimestep(dt));
    }
    let u = input.clamped(params);
    let mut next = rk4_step(state, dt, |s| blended_derivative(s, &u, params));
    next.psi = wrap_angle(next.psi);
    if !next.is_finite() {
        return Err(DynamicsError::NonFinite {
            state: next,
            previous: *state,
            input: u,
            dt,
        });
    }
    Ok(next)
}
