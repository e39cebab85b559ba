//! A deterministic, headless 2D multi-vehicle platooning simulator.
//!
//! The crate is organized around composable building blocks:
//!
//! - [`geometry`] — poses, frame transforms and the curve-straight-curve
//!   planner behind automatic road generation.
//! - [`road`] — road segments, connection points, lane centerlines, the
//!   network multigraph and the virtual parking lot configuration.
//! - [`dynamics`] — the `x' = f(x, u, t)` dynamics interface, the kinematic
//!   bicycle model and fixed-step RK4 integration.
//! - [`perception`] — field-of-view/range neighbor sensing in the body frame
//!   with optional Gaussian measurement noise.
//! - [`guidance`] — route primitives and reference-trajectory generation
//!   across segments, plus the ahead-of-vehicle preprocessor.
//! - [`control`] — controller interfaces with pure-pursuit lane tracking,
//!   constant time-headway adaptive cruise control, lane-change gating and
//!   platoon merge/split supervision.
//! - [`engine`] — the traffic environment: vehicle lifecycle, the four-phase
//!   step loop, status classification, parking-lot runtime and data logging.
//! - [`scenario`] — declarative TOML scenario files and the run entry point.
//! - [`render`] — frame rendering for video assembly and road-graph plots.
//!
//! Start with the runnable examples (`cargo run --example <name>`); each one
//! demonstrates a single capability end to end. The thin `sim` binary wraps
//! [`scenario`] for batch runs.

pub mod control;
pub mod dynamics;
pub mod engine;
pub mod geometry;
pub mod guidance;
pub mod perception;
pub mod render;
pub mod road;
pub mod scenario;

use std::fmt;

use serde::{Deserialize, Serialize};

/// Identifier of a vehicle, unique within one environment.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize, Default,
)]
pub struct VehicleId(pub u64);

impl fmt::Display for VehicleId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

pub use engine::{TrafficEnvironment, VehicleStatus};
pub use geometry::{Pose2D, Vec2};
pub use road::{RoadNetwork, SegmentId, SegmentKind, SegmentSpec};
