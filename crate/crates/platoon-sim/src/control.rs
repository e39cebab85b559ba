//! Controller interfaces and reference implementations: pure-pursuit lane
//! tracking, constant time-headway adaptive cruise control, lane-change
//! gating, and platoon merge/split supervision.
//!
//! Controllers are evaluated against a frozen world snapshot; each instance
//! is exclusively owned by its vehicle.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dynamics::{ControlInput, VehicleState};
use crate::guidance::{RouteState, Trajectory};
use crate::perception::PerceptionData;
use crate::VehicleId;

#[derive(Debug, Error, Clone, Copy, PartialEq, Eq)]
pub enum ControlError {
    #[error("reference trajectory is empty")]
    EmptyTrajectory,
    #[error("platoon directives form a leadership cycle through vehicle {0}")]
    CyclicLeadership(VehicleId),
}

/// A controller computing the full input vector at once.
pub trait CombinedController: Send {
    fn control(
        &mut self,
        state: &VehicleState,
        perception: &PerceptionData,
        trajectory: &Trajectory,
        t: f64,
    ) -> ControlInput;

    /// Hook for platoon supervision; default is to ignore overrides.
    fn apply_platoon_override(&mut self, _override_: &PlatoonOverride) {}
}

/// Steering-only controller half.
pub trait LateralController: Send {
    fn steer(
        &mut self,
        state: &VehicleState,
        perception: &PerceptionData,
        trajectory: &Trajectory,
        t: f64,
    ) -> f64;
}

/// Acceleration-only controller half.
pub trait LongitudinalController: Send {
    fn accel(
        &mut self,
        state: &VehicleState,
        perception: &PerceptionData,
        trajectory: &Trajectory,
        t: f64,
    ) -> f64;
}

/// Emits a constant input; useful for tests and open-loop experiments.
#[derive(Debug, Clone, Copy, Default)]
pub struct ConstantController {
    pub input: ControlInput,
}

impl CombinedController for ConstantController {
    fn control(&mut self, _: &VehicleState, _: &PerceptionData, _: &Trajectory, _: f64) -> ControlInput {
        self.input
    }
}

/// Pure-pursuit gains: the lookahead distance is
/// `lookahead_base + lookahead_gain * v`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PurePursuitParams {
    pub lookahead_base: f64,
    pub lookahead_gain: f64,
    pub wheelbase: f64,
}

impl Default for PurePursuitParams {
    fn default() -> Self {
        PurePursuitParams {
            lookahead_base: 5.0,
            lookahead_gain: 0.4,
            wheelbase: 2.5,
        }
    }
}

/// Pure-pursuit steering toward the first trajectory point at or beyond the
/// speed-scaled lookahead arc length (the last point when the trajectory is
/// shorter). The trajectory must already be preprocessed to points ahead.
pub fn pure_pursuit_steer(
    state: &VehicleState,
    trajectory: &Trajectory,
    params: &PurePursuitParams,
    max_steer: f64,
) -> Result<f64, ControlError> {
    let lookahead = params.lookahead_base + params.lookahead_gain * state.v;
    let target = trajectory
        .points
        .iter()
        .find(|p| p.arc_length >= lookahead)
        .or(trajectory.points.last())
        .ok_or(ControlError::EmptyTrajectory)?;
    let body = state.pose().to_body_frame(target.position);
    let dist = body.norm();
    if dist < 1e-9 {
        return Ok(0.0);
    }
    let alpha = body.y.atan2(body.x);
    let steer = (2.0 * params.wheelbase * alpha.sin() / dist).atan();
    Ok(steer.clamp(-max_steer, max_steer))
}

/// Constant time-headway spacing policy gains. The desired gap to the
/// leader is `standstill_gap + time_headway * v`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AccParams {
    pub standstill_gap: f64,
    pub time_headway: f64,
    pub gain_gap: f64,
    pub gain_speed: f64,
    pub cruise_speed: f64,
}

impl Default for AccParams {
    fn default() -> Self {
        AccParams {
            standstill_gap: 6.0,
            time_headway: 0.8,
            gain_gap: 0.5,
            gain_speed: 1.5,
            cruise_speed: 12.0,
        }
    }
}

/// Nearest same-lane neighbor strictly ahead: positive longitudinal body
/// coordinate and lateral body offset within half a lane width.
pub fn same_lane_leader<'a>(
    perception: &'a PerceptionData,
    lane_width: f64,
) -> Option<&'a crate::perception::NeighborMeasurement> {
    perception
        .neighbors
        .iter()
        .filter(|n| n.rel_position.x > 0.0 && n.rel_position.y.abs() < lane_width / 2.0)
        .min_by(|a, b| {
            a.distance
                .total_cmp(&b.distance)
                .then(a.vehicle_id.cmp(&b.vehicle_id))
        })
}

/// Adaptive cruise acceleration: gap tracking against the same-lane leader,
/// speed tracking toward `cruise_speed` otherwise. Output is clamped to
/// `accel_bounds`.
pub fn acc_accel(
    state: &VehicleState,
    perception: &PerceptionData,
    params: &AccParams,
    lane_width: f64,
    accel_bounds: (f64, f64),
) -> f64 {
    let a = match same_lane_leader(perception, lane_width) {
        Some(leader) => {
            let gap = leader.rel_position.x;
            let desired = params.standstill_gap + params.time_headway * state.v;
            params.gain_gap * (gap - desired) + params.gain_speed * leader.rel_velocity.x
        }
        None => params.gain_speed * (params.cruise_speed - state.v),
    };
    a.clamp(accel_bounds.0, accel_bounds.1)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LaneChangeDecision {
    Proceed,
    Hold,
}

/// Longitudinal clearance window for lane changes, in meters around the ego
/// position.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LaneChangeWindow {
    pub lead_clear: f64,
    pub lag_clear: f64,
}

impl Default for LaneChangeWindow {
    fn default() -> Self {
        LaneChangeWindow {
            lead_clear: 15.0,
            lag_clear: 10.0,
        }
    }
}

/// Gate for an active Left/Right primitive: proceed iff no perceived vehicle
/// occupies the target lane within the clearance window. While the decision
/// is Hold the reference stays on the current lane.
pub fn lane_change_supervisor(
    perception: &PerceptionData,
    route: &RouteState,
    window: &LaneChangeWindow,
) -> LaneChangeDecision {
    let Some(target) = route.requested_lane else {
        return LaneChangeDecision::Proceed;
    };
    let blocked = perception.neighbors.iter().any(|n| {
        n.lane == Some(target)
            && n.rel_position.x <= window.lead_clear
            && n.rel_position.x >= -window.lag_clear
    });
    if blocked {
        LaneChangeDecision::Hold
    } else {
        LaneChangeDecision::Proceed
    }
}

/// Platoon coordination directive for one vehicle.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum PlatoonDirective {
    /// Track the named leader at the platoon spacing.
    Follow { leader: VehicleId },
    /// Keep the current leader but open the gap to `gap_target`.
    Split { gap_target: f64 },
    /// Retarget onto `behind` (the tail of the platoon being joined) and
    /// ramp the gap back down to the platoon spacing.
    Merge { behind: VehicleId },
}

/// Per-vehicle spacing override emitted by the supervisor.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct PlatoonOverride {
    pub leader: Option<VehicleId>,
    /// Replacement for the controller's standstill gap; `None` means the
    /// controller's own parameter.
    pub standstill_gap: Option<f64>,
}

#[derive(Debug, Clone, Copy)]
struct GapRamp {
    from_gap: f64,
    start_t: f64,
}

#[derive(Debug, Clone, Copy, Default)]
struct MemberState {
    leader: Option<VehicleId>,
    gap_override: Option<f64>,
    ramp: Option<GapRamp>,
}

/// Tracks platoon directives and turns them into per-vehicle spacing
/// overrides. Leadership must stay a forest.
#[derive(Debug, Clone)]
pub struct PlatoonSupervisor {
    base_gap: f64,
    ramp_time: f64,
    members: BTreeMap<VehicleId, MemberState>,
}

impl PlatoonSupervisor {
    pub fn new(base_gap: f64, ramp_time: f64) -> Self {
        PlatoonSupervisor {
            base_gap,
            ramp_time: ramp_time.max(1e-9),
            members: BTreeMap::new(),
        }
    }

    pub fn leader_of(&self, vehicle: VehicleId) -> Option<VehicleId> {
        self.members.get(&vehicle).and_then(|m| m.leader)
    }

    fn would_cycle(&self, vehicle: VehicleId, leader: VehicleId) -> bool {
        let mut cur = Some(leader);
        while let Some(v) = cur {
            if v == vehicle {
                return true;
            }
            cur = self.leader_of(v);
        }
        false
    }

    /// Applies one directive at simulation time `t`.
    pub fn apply(
        &mut self,
        vehicle: VehicleId,
        directive: PlatoonDirective,
        t: f64,
    ) -> Result<(), ControlError> {
        match directive {
            PlatoonDirective::Follow { leader } => {
                if self.would_cycle(vehicle, leader) {
                    return Err(ControlError::CyclicLeadership(vehicle));
                }
                let m = self.members.entry(vehicle).or_default();
                m.leader = Some(leader);
                m.gap_override = None;
                m.ramp = None;
            }
            PlatoonDirective::Split { gap_target } => {
                let m = self.members.entry(vehicle).or_default();
                m.gap_override = Some(gap_target);
                m.ramp = None;
            }
            PlatoonDirective::Merge { behind } => {
                if self.would_cycle(vehicle, behind) {
                    return Err(ControlError::CyclicLeadership(vehicle));
                }
                let from_gap = self
                    .members
                    .get(&vehicle)
                    .and_then(|m| m.gap_override)
                    .unwrap_or(self.base_gap);
                let m = self.members.entry(vehicle).or_default();
                m.leader = Some(behind);
                m.gap_override = None;
                m.ramp = if from_gap != self.base_gap {
                    Some(GapRamp {
                        from_gap,
                        start_t: t,
                    })
                } else {
                    None
                };
            }
        }
        Ok(())
    }

    /// Current per-vehicle overrides; expires finished gap ramps.
    pub fn step(&mut self, t: f64) -> BTreeMap<VehicleId, PlatoonOverride> {
        let mut out = BTreeMap::new();
        for (id, m) in self.members.iter_mut() {
            let mut gap = m.gap_override;
            if let Some(ramp) = m.ramp {
                let frac = ((t - ramp.start_t) / self.ramp_time).clamp(0.0, 1.0);
                if frac >= 1.0 {
                    m.ramp = None;
                } else {
                    gap = Some(ramp.from_gap + (self.base_gap - ramp.from_gap) * frac);
                }
            }
            out.insert(
                *id,
                PlatoonOverride {
                    leader: m.leader,
                    standstill_gap: gap,
                },
            );
        }
        out
    }
}

/// Pure-pursuit lateral controller with a steering limit.
#[derive(Debug, Clone, Copy)]
pub struct PurePursuit {
    pub params: PurePursuitParams,
    pub max_steer: f64,
}

impl PurePursuit {
    pub fn new(params: PurePursuitParams, max_steer: f64) -> Self {
        PurePursuit { params, max_steer }
    }
}

impl LateralController for PurePursuit {
    fn steer(&mut self, state: &VehicleState, _: &PerceptionData, traj: &Trajectory, _: f64) -> f64 {
        pure_pursuit_steer(state, traj, &self.params, self.max_steer).unwrap_or(0.0)
    }
}

/// Adaptive cruise longitudinal controller. Tracks an assigned platoon
/// leader when one is set (falling back to cruise if it is not perceived),
/// or the nearest same-lane leader otherwise, and never exceeds the
/// reference speed within the braking window ahead.
#[derive(Debug, Clone, Copy)]
pub struct AccController {
    pub params: AccParams,
    pub lane_width: f64,
    pub accel_bounds: (f64, f64),
    assigned_leader: Option<VehicleId>,
    gap_override: Option<f64>,
}

impl AccController {
    pub fn new(params: AccParams, lane_width: f64, accel_bounds: (f64, f64)) -> Self {
        AccController {
            params,
            lane_width,
            accel_bounds,
            assigned_leader: None,
            gap_override: None,
        }
    }

    fn effective_params(&self, speed_cap: f64) -> AccParams {
        AccParams {
            standstill_gap: self.gap_override.unwrap_or(self.params.standstill_gap),
            cruise_speed: self.params.cruise_speed.min(speed_cap),
            ..self.params
        }
    }

    pub fn set_override(&mut self, o: &PlatoonOverride) {
        self.assigned_leader = o.leader;
        self.gap_override = o.standstill_gap;
    }
}

/// Minimum speed reference within the braking window ahead, so segment
/// speed limits are anticipated.
fn speed_cap(trajectory: &Trajectory, v: f64) -> f64 {
    let window = v * v / 4.0 + 5.0;
    trajectory
        .points
        .iter()
        .take_while(|p| p.arc_length <= window)
        .map(|p| p.speed_ref)
        .fold(f64::INFINITY, f64::min)
}

impl LongitudinalController for AccController {
    fn accel(&mut self, state: &VehicleState, percep: &PerceptionData, traj: &Trajectory, _: f64) -> f64 {
        let cap = speed_cap(traj, state.v);
        let p = self.effective_params(cap);
        // When following, the gap law may exceed cruise speed while closing
        // in, but never the road speed limit ahead.
        let limit_accel = p.gain_speed * (cap - state.v);
        let a = if let Some(leader_id) = self.assigned_leader {
            match percep
                .neighbors
                .iter()
                .find(|n| n.vehicle_id == leader_id && n.rel_position.x > 0.0)
            {
                Some(leader) => {
                    let desired = p.standstill_gap + p.time_headway * state.v;
                    let follow = p.gain_gap * (leader.rel_position.x - desired)
                        + p.gain_speed * leader.rel_velocity.x;
                    follow.min(limit_accel)
                }
                None => p.gain_speed * (p.cruise_speed - state.v),
            }
        } else {
            let follow = acc_accel(state, percep, &p, self.lane_width, (f64::MIN, f64::MAX));
            match same_lane_leader(percep, self.lane_width) {
                Some(_) => follow.min(limit_accel),
                None => follow,
            }
        };
        a.clamp(self.accel_bounds.0, self.accel_bounds.1)
    }
}

/// The bundled platooning controller: pure pursuit for steering, adaptive
/// cruise control for spacing, with platoon override support.
#[derive(Debug, Clone, Copy)]
pub struct PlatoonController {
    pub pursuit: PurePursuit,
    pub acc: AccController,
}

impl PlatoonController {
    pub fn new(pursuit: PurePursuit, acc: AccController) -> Self {
        PlatoonController { pursuit, acc }
    }
}

impl CombinedController for PlatoonController {
    fn control(
        &mut self,
        state: &VehicleState,
        percep: &PerceptionData,
        traj: &Trajectory,
        t: f64,
    ) -> ControlInput {
        ControlInput {
            accel: self.acc.accel(state, percep, traj, t),
            steer: self.pursuit.steer(state, percep, traj, t),
        }
    }

    fn apply_platoon_override(&mut self, o: &PlatoonOverride) {
        self.acc.set_override(o);
    }
}
