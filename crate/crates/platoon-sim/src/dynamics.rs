//! Vehicle state and input types, the pluggable dynamics interface
//! `x' = f(x, u, t)`, the kinematic bicycle reference model, and fixed-step
//! 4th-order Runge-Kutta integration.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::normalize_angle;

#[derive(Debug, Error, Clone, Copy, PartialEq, Eq)]
pub enum DynamicsError {
    /// A state component became NaN or infinite during integration. The
    /// engine treats this as a crashed vehicle, never as a halt.
    #[error("vehicle state became non-finite during integration")]
    NonFiniteState,
}

/// Continuous state of one vehicle: planar pose plus forward speed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VehicleState {
    pub x: f64,
    pub y: f64,
    pub theta: f64,
    pub v: f64,
}

impl VehicleState {
    pub fn new(x: f64, y: f64, theta: f64, v: f64) -> Self {
        VehicleState {
            x,
            y,
            theta: normalize_angle(theta),
            v,
        }
    }

    pub fn pose(&self) -> crate::geometry::Pose2D {
        crate::geometry::Pose2D::new(self.x, self.y, self.theta)
    }

    pub fn position(&self) -> crate::geometry::Vec2 {
        crate::geometry::Vec2::new(self.x, self.y)
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.theta.is_finite() && self.v.is_finite()
    }
}

/// Control input: longitudinal acceleration and front steering angle.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ControlInput {
    pub accel: f64,
    pub steer: f64,
}

impl ControlInput {
    pub fn new(accel: f64, steer: f64) -> Self {
        ControlInput { accel, steer }
    }
}

/// Time derivative of a [`VehicleState`].
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct StateDerivative {
    pub dx: f64,
    pub dy: f64,
    pub dtheta: f64,
    pub dv: f64,
}

/// Parameters of the kinematic bicycle model (rear-axle reference point).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BicycleParams {
    /// Wheelbase in meters, > 0.
    pub wheelbase: f64,
    /// Steering limit in radians, 0 < max_steer < pi/2.
    pub max_steer: f64,
    /// Speed ceiling; v is clamped to [0, max_speed] after each step.
    pub max_speed: f64,
    pub min_accel: f64,
    pub max_accel: f64,
}

impl Default for BicycleParams {
    fn default() -> Self {
        BicycleParams {
            wheelbase: 2.5,
            max_steer: 0.6,
            max_speed: 30.0,
            min_accel: -6.0,
            max_accel: 3.0,
        }
    }
}

/// Deterministic, side-effect-free vehicle dynamics `x' = f(x, u, t)`.
pub trait DynamicsModel: Send {
    fn derivative(&self, state: &VehicleState, input: &ControlInput, t: f64) -> StateDerivative;

    /// Saturates an input to the model's actuation bounds.
    fn clamp_input(&self, input: ControlInput) -> ControlInput;

    /// Projects a state back onto the model's admissible set (speed bounds,
    /// heading normalization). Applied once per integration step.
    fn clamp_state(&self, state: VehicleState) -> VehicleState;
}

/// Kinematic bicycle: x' = v cos(theta), y' = v sin(theta),
/// theta' = v tan(delta) / L, v' = a. Inputs are saturated internally.
#[derive(Debug, Clone, Copy)]
pub struct BicycleModel {
    pub params: BicycleParams,
}

impl BicycleModel {
    pub fn new(params: BicycleParams) -> Self {
        BicycleModel { params }
    }
}

impl DynamicsModel for BicycleModel {
    fn derivative(&self, state: &VehicleState, input: &ControlInput, _t: f64) -> StateDerivative {
        let u = self.clamp_input(*input);
        let (s, c) = state.theta.sin_cos();
        StateDerivative {
            dx: state.v * c,
            dy: state.v * s,
            dtheta: state.v * u.steer.tan() / self.params.wheelbase,
            dv: u.accel,
        }
    }

    fn clamp_input(&self, input: ControlInput) -> ControlInput {
        ControlInput {
            accel: input.accel.clamp(self.params.min_accel, self.params.max_accel),
            steer: input.steer.clamp(-self.params.max_steer, self.params.max_steer),
        }
    }

    fn clamp_state(&self, state: VehicleState) -> VehicleState {
        VehicleState::new(
            state.x,
            state.y,
            state.theta,
            state.v.clamp(0.0, self.params.max_speed),
        )
    }
}

/// Free-function form of the bicycle derivative.
pub fn bicycle_derivative(
    state: &VehicleState,
    input: &ControlInput,
    t: f64,
    params: &BicycleParams,
) -> StateDerivative {
    BicycleModel::new(*params).derivative(state, input, t)
}

fn add_scaled(s: &VehicleState, d: &StateDerivative, h: f64) -> VehicleState {
    // Intermediate RK4 states keep theta unnormalized; trig is periodic and
    // normalizing mid-step would kink the integrand at the wrap.
    VehicleState {
        x: s.x + h * d.dx,
        y: s.y + h * d.dy,
        theta: s.theta + h * d.dtheta,
        v: s.v + h * d.dv,
    }
}

/// One classical RK4 step of `model` over `dt` with the input held constant
/// (zero-order hold). The result is re-normalized and clamped via
/// [`DynamicsModel::clamp_state`].
pub fn integrate_step(
    model: &dyn DynamicsModel,
    state: &VehicleState,
    input: &ControlInput,
    t: f64,
    dt: f64,
) -> Result<VehicleState, DynamicsError> {
    assert!(dt > 0.0, "dt must be positive");
    let raw = VehicleState {
        x: state.x,
        y: state.y,
        theta: state.theta,
        v: state.v,
    };
    let k1 = model.derivative(&raw, input, t);
    let k2 = model.derivative(&add_scaled(&raw, &k1, dt / 2.0), input, t + dt / 2.0);
    let k3 = model.derivative(&add_scaled(&raw, &k2, dt / 2.0), input, t + dt / 2.0);
    let k4 = model.derivative(&add_scaled(&raw, &k3, dt), input, t + dt);
    let next = VehicleState {
        x: raw.x + dt / 6.0 * (k1.dx + 2.0 * k2.dx + 2.0 * k3.dx + k4.dx),
        y: raw.y + dt / 6.0 * (k1.dy + 2.0 * k2.dy + 2.0 * k3.dy + k4.dy),
        theta: raw.theta + dt / 6.0 * (k1.dtheta + 2.0 * k2.dtheta + 2.0 * k3.dtheta + k4.dtheta),
        v: raw.v + dt / 6.0 * (k1.dv + 2.0 * k2.dv + 2.0 * k3.dv + k4.dv),
    };
    if !next.is_finite() {
        return Err(DynamicsError::NonFiniteState);
    }
    Ok(model.clamp_state(VehicleState::new(next.x, next.y, next.theta, next.v)))
}
