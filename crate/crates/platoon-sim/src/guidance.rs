//! Route-primitive interpretation, reference-trajectory generation spanning
//! multiple road segments, and the ahead-of-vehicle trajectory preprocessor.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{Pose2D, Vec2};
use crate::road::{RoadNetwork, SegmentId, SegmentKind};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GuidanceError {
    #[error("lane change off the road edge: segment {segment} has no lane {lane}")]
    NoSuchLane { segment: SegmentId, lane: i64 },
    #[error("turn primitive outside an intersection (segment {segment})")]
    InvalidPrimitive { segment: SegmentId },
    #[error("the vehicle has passed the last trajectory point")]
    EmptyAhead,
}

/// High-level route instructions, consumed one per road segment entered.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RoutePrimitive {
    /// Follow the current lane.
    Straight,
    /// Turn left at an intersection.
    LeftTurn,
    /// Turn right at an intersection.
    RightTurn,
    /// Move to the lane to the left of the current lane in driving direction.
    Left,
    /// Move to the lane to the right.
    Right,
}

impl RoutePrimitive {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "straight" => Some(RoutePrimitive::Straight),
            "left_turn" => Some(RoutePrimitive::LeftTurn),
            "right_turn" => Some(RoutePrimitive::RightTurn),
            "left" => Some(RoutePrimitive::Left),
            "right" => Some(RoutePrimitive::Right),
            _ => None,
        }
    }
}

/// One point of a reference trajectory, in global coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrajectoryPoint {
    pub position: Vec2,
    pub heading: f64,
    pub speed_ref: f64,
    /// Cumulative arc length from the first point; strictly increasing.
    pub arc_length: f64,
}

/// An ordered global-frame polyline with per-point speed reference.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Trajectory {
    pub points: Vec<TrajectoryPoint>,
    /// Set when the trajectory was truncated at an open end before the
    /// requested horizon.
    pub dead_end: bool,
}

impl Trajectory {
    pub fn empty() -> Self {
        Trajectory::default()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn total_length(&self) -> f64 {
        self.points.last().map_or(0.0, |p| p.arc_length)
    }
}

/// Where a vehicle is in its route: the directed traversal of the current
/// segment plus the queue of upcoming primitives. Exactly one primitive is
/// consumed per segment entered.
#[derive(Debug, Clone, PartialEq)]
pub struct RouteState {
    pub pending: VecDeque<RoutePrimitive>,
    pub current_segment: SegmentId,
    pub entry_port: String,
    pub exit_port: String,
    pub current_lane: u32,
    /// Target lane of an active Left/Right primitive, not yet committed by
    /// the lane-change supervisor.
    pub requested_lane: Option<u32>,
    pub last_consumed_segment: Option<SegmentId>,
}

impl RouteState {
    pub fn new(
        segment: SegmentId,
        entry_port: impl Into<String>,
        exit_port: impl Into<String>,
        lane: u32,
        pending: impl IntoIterator<Item = RoutePrimitive>,
    ) -> Self {
        RouteState {
            pending: pending.into_iter().collect(),
            current_segment: segment,
            entry_port: entry_port.into(),
            exit_port: exit_port.into(),
            current_lane: lane,
            requested_lane: None,
            last_consumed_segment: None,
        }
    }

    /// Commits a pending lane-change request (supervisor said proceed).
    pub fn commit_lane_change(&mut self) {
        if let Some(target) = self.requested_lane.take() {
            self.current_lane = target;
        }
    }
}

/// Resolution of one primitive against one segment traversal. Returns the
/// exit port and, for lane changes, the target lane.
fn resolve_primitive(
    network: &RoadNetwork,
    segment: SegmentId,
    entry: &str,
    lane: u32,
    primitive: RoutePrimitive,
) -> Result<(String, u32), GuidanceError> {
    let seg = network
        .segment(segment)
        .expect("traversal references a known segment");
    let opposite = |n: &RoadNetwork| {
        n.segment(segment)
            .unwrap()
            .opposite_port(entry)
            .map(str::to_string)
            .unwrap_or_else(|_| "end".to_string())
    };
    match primitive {
        RoutePrimitive::Straight => Ok((opposite(network), lane)),
        RoutePrimitive::LeftTurn | RoutePrimitive::RightTurn => {
            if seg.spec.kind != SegmentKind::Intersection {
                return Err(GuidanceError::InvalidPrimitive { segment });
            }
            let left = primitive == RoutePrimitive::LeftTurn;
            let exit = seg
                .turn_exit(entry, left)
                .map_err(|_| GuidanceError::InvalidPrimitive { segment })?;
            Ok((exit.to_string(), lane))
        }
        RoutePrimitive::Left | RoutePrimitive::Right => {
            let delta: i64 = if primitive == RoutePrimitive::Left { 1 } else { -1 };
            let target = lane as i64 + delta;
            if target < 1 || target > seg.spec.lanes as i64 {
                return Err(GuidanceError::NoSuchLane {
                    segment,
                    lane: target,
                });
            }
            Ok((opposite(network), target as u32))
        }
    }
}

/// Consumes one primitive (Straight if the queue is empty) as the vehicle
/// enters `new_segment`, and derives the new traversal. Total: an
/// infeasible primitive falls back to Straight semantics here; the same
/// conditions surface as errors from [`build_reference`], which runs before
/// any movement.
pub fn advance_route(
    route: &RouteState,
    network: &RoadNetwork,
    new_segment: SegmentId,
) -> RouteState {
    debug_assert!(
        route.last_consumed_segment != Some(new_segment),
        "one primitive per distinct segment entry"
    );
    let entry = network
        .connection_point(route.current_segment, &route.exit_port)
        .ok()
        .and_then(|cp| cp.peer.clone())
        .filter(|(seg, _)| *seg == new_segment)
        .map(|(_, port)| port)
        .unwrap_or_else(|| "start".to_string());

    let mut pending = route.pending.clone();
    let primitive = pending.pop_front().unwrap_or(RoutePrimitive::Straight);

    let (exit, lane, requested) =
        match resolve_primitive(network, new_segment, &entry, route.current_lane, primitive) {
            Ok((exit, lane)) if lane != route.current_lane => {
                // Lane change: the reference stays on the current lane until
                // the supervisor commits the switch.
                (exit, route.current_lane, Some(lane))
            }
            Ok((exit, lane)) => (exit, lane, None),
            Err(_) => {
                let (exit, lane) = resolve_primitive(
                    network,
                    new_segment,
                    &entry,
                    route.current_lane,
                    RoutePrimitive::Straight,
                )
                .expect("straight resolution is total");
                (exit, lane, None)
            }
        };

    RouteState {
        pending,
        current_segment: new_segment,
        entry_port: entry,
        exit_port: exit,
        current_lane: lane,
        requested_lane: requested,
        last_consumed_segment: Some(new_segment),
    }
}

/// Joint points closer than this are merged when concatenating lane centers.
const JOINT_MERGE_EPS: f64 = 1e-9;

/// Builds the reference trajectory for a route: the current traversal's lane
/// center concatenated with up to `horizon_segments - 1` upcoming segments,
/// each resolved from the corresponding pending primitive (Straight when the
/// queue runs out). Truncation at an open end sets the `dead_end` flag.
pub fn build_reference(
    route: &RouteState,
    network: &RoadNetwork,
    horizon_segments: u32,
    spacing: f64,
) -> Result<Trajectory, GuidanceError> {
    let mut traversals: Vec<(SegmentId, String, String, u32)> = vec![(
        route.current_segment,
        route.entry_port.clone(),
        route.exit_port.clone(),
        route.current_lane,
    )];
    let mut lane = route.current_lane;
    let mut dead_end = false;
    for k in 1..horizon_segments {
        let (seg, _, exit, _) = traversals.last().unwrap().clone();
        let Some((next_seg, next_entry)) = network
            .connection_point(seg, &exit)
            .ok()
            .and_then(|cp| cp.peer.clone())
        else {
            dead_end = true;
            break;
        };
        let primitive = route
            .pending
            .get((k - 1) as usize)
            .copied()
            .unwrap_or(RoutePrimitive::Straight);
        let (next_exit, next_lane) =
            resolve_primitive(network, next_seg, &next_entry, lane, primitive)?;
        lane = next_lane;
        traversals.push((next_seg, next_entry, next_exit, next_lane));
    }

    let mut points: Vec<TrajectoryPoint> = Vec::new();
    let mut base = 0.0;
    for (seg, entry, exit, lane) in &traversals {
        let part = network
            .lane_center_through(*seg, entry, exit, *lane, spacing)
            .map_err(|_| GuidanceError::NoSuchLane {
                segment: *seg,
                lane: *lane as i64,
            })?;
        for p in &part.points {
            if let Some(last) = points.last() {
                let gap = last.position.distance(p.position);
                if p.arc_length == 0.0 {
                    // Joint point: merge coincident, otherwise keep the jump
                    // (lane-change discontinuities are intentional).
                    if gap <= JOINT_MERGE_EPS {
                        base = last.arc_length;
                        continue;
                    }
                    base = last.arc_length + gap;
                    points.push(TrajectoryPoint {
                        arc_length: base,
                        ..*p
                    });
                    continue;
                }
            }
            points.push(TrajectoryPoint {
                arc_length: base + p.arc_length,
                ..*p
            });
        }
        base = points.last().map_or(0.0, |p| p.arc_length);
    }

    Ok(Trajectory { points, dead_end })
}

/// Returns the maximal suffix of `traj` whose every point lies strictly
/// ahead of the vehicle (positive longitudinal body coordinate), with arc
/// length re-based to start at zero.
pub fn preprocess(traj: &Trajectory, vehicle_pose: &Pose2D) -> Result<Trajectory, GuidanceError> {
    let n = traj.points.len();
    let mut kept = 0;
    for p in traj.points.iter().rev() {
        if vehicle_pose.to_body_frame(p.position).x > 0.0 {
            kept += 1;
        } else {
            break;
        }
    }
    if kept == 0 {
        return Err(GuidanceError::EmptyAhead);
    }
    let first = n - kept;
    let base = traj.points[first].arc_length;
    let points = traj.points[first..]
        .iter()
        .map(|p| TrajectoryPoint {
            arc_length: p.arc_length - base,
            ..*p
        })
        .collect();
    Ok(Trajectory {
        points,
        dead_end: traj.dead_end,
    })
}
