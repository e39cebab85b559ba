//! Road segments, connection-point algebra with automatic alignment,
//! compatibility checking, lane-center trajectories, open-end
//! auto-connection, the virtual parking lot configuration, and the directed
//! multigraph view of the network.
//!
//! The network is a single mutable aggregate: mutation is single-writer,
//! read-only queries may run concurrently between mutations.

use std::collections::BTreeMap;
use std::f64::consts::{FRAC_PI_2, PI};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{
    dubins_csc, normalize_angle, ArcComponent, GeometryError, PathSpan, Pose2D,
    StraightComponent, Vec2,
};
use crate::guidance::{Trajectory, TrajectoryPoint};

/// Longitudinal containment tolerance so that boundary points (joint
/// endpoints, port positions) do not fall out of their segment.
const CONTAIN_TOL: f64 = 1e-9;

#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize, Default,
)]
pub struct SegmentId(pub u32);

impl fmt::Display for SegmentId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NetworkError {
    #[error("invalid segment spec: {0}")]
    InvalidSpec(String),
    #[error("unknown segment {0}")]
    UnknownSegment(SegmentId),
    #[error("segment {segment} has no connection point named \"{port}\"")]
    UnknownPort { segment: SegmentId, port: String },
    #[error("segment {segment} has no lane {lane}")]
    UnknownLane { segment: SegmentId, lane: u32 },
    #[error("segments {a} and {b} are incompatible (lanes or lane_width differ)")]
    Incompatible { a: SegmentId, b: SegmentId },
    #[error("connection point {segment}:\"{port}\" is already connected")]
    AlreadyConnected { segment: SegmentId, port: String },
    #[error("moving segment {segment} is already joined at \"{port}\"; a rigid move would tear the joint")]
    WouldTearJoint { segment: SegmentId, port: String },
    #[error("no curve-straight-curve connection exists for the given open ends")]
    NoCscSolution,
    #[error("segment {0} is an intersection; the route through it must be named (entry and exit ports)")]
    RouteRequired(SegmentId),
    #[error("segment {segment} has no route from \"{entry}\" to \"{exit}\"")]
    InvalidRoute {
        segment: SegmentId,
        entry: String,
        exit: String,
    },
    #[error("invalid parking lot configuration: {0}")]
    InvalidParkingLot(String),
}

impl From<GeometryError> for NetworkError {
    fn from(_: GeometryError) -> Self {
        NetworkError::NoCscSolution
    }
}

/// The three block types road networks are composed of. The numeric codes
/// match the scenario file encoding (1 = straight, 2 = curved,
/// 3 = intersection).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SegmentKind {
    Straight,
    Curved,
    Intersection,
}

impl SegmentKind {
    pub fn code(self) -> u8 {
        match self {
            SegmentKind::Straight => 1,
            SegmentKind::Curved => 2,
            SegmentKind::Intersection => 3,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            1 => Some(SegmentKind::Straight),
            2 => Some(SegmentKind::Curved),
            3 => Some(SegmentKind::Intersection),
            _ => None,
        }
    }
}

/// Geometric description of one road block.
///
/// `length` is the straight length or, for intersections, the length of each
/// of the four arms. `radius`/`sweep` apply to curved segments only; a
/// positive sweep bends left. The segment frame sits at `local_origin` with
/// heading `orientation`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SegmentSpec {
    pub kind: SegmentKind,
    pub length: f64,
    pub radius: f64,
    pub sweep: f64,
    pub orientation: f64,
    pub lanes: u32,
    pub lane_width: f64,
    pub speed_limit: f64,
    pub local_origin: Vec2,
}

impl SegmentSpec {
    pub fn straight(length: f64) -> Self {
        SegmentSpec {
            kind: SegmentKind::Straight,
            length,
            radius: 0.0,
            sweep: 0.0,
            orientation: 0.0,
            lanes: 1,
            lane_width: 4.0,
            speed_limit: 15.0,
            local_origin: Vec2::ZERO,
        }
    }

    pub fn curved(radius: f64, sweep: f64) -> Self {
        SegmentSpec {
            kind: SegmentKind::Curved,
            length: 0.0,
            radius,
            sweep,
            ..SegmentSpec::straight(0.0)
        }
    }

    pub fn intersection(arm_length: f64) -> Self {
        SegmentSpec {
            kind: SegmentKind::Intersection,
            ..SegmentSpec::straight(arm_length)
        }
    }

    pub fn lanes(mut self, lanes: u32) -> Self {
        self.lanes = lanes;
        self
    }

    pub fn lane_width(mut self, w: f64) -> Self {
        self.lane_width = w;
        self
    }

    pub fn speed_limit(mut self, v: f64) -> Self {
        self.speed_limit = v;
        self
    }

    pub fn at(mut self, origin: Vec2, orientation: f64) -> Self {
        self.local_origin = origin;
        self.orientation = normalize_angle(orientation);
        self
    }

    /// The segment's local frame expressed in the world frame.
    pub fn frame(&self) -> Pose2D {
        Pose2D::new(self.local_origin.x, self.local_origin.y, self.orientation)
    }

    /// Half of the drivable band width.
    pub fn half_band(&self) -> f64 {
        self.lanes as f64 * self.lane_width / 2.0
    }

    /// Leftward offset of a lane center from the segment axis, in the
    /// forward (start -> end) direction. Lane 1 is the rightmost lane.
    pub fn lane_offset(&self, lane: u32) -> f64 {
        (lane as f64 - (self.lanes as f64 + 1.0) / 2.0) * self.lane_width
    }

    pub fn validate(&self) -> Result<(), NetworkError> {
        if self.lanes < 1 {
            return Err(NetworkError::InvalidSpec("lanes must be >= 1".into()));
        }
        if !(self.lane_width > 0.0) {
            return Err(NetworkError::InvalidSpec("lane_width must be > 0".into()));
        }
        if !(self.speed_limit > 0.0) {
            return Err(NetworkError::InvalidSpec("speed_limit must be > 0".into()));
        }
        match self.kind {
            SegmentKind::Straight | SegmentKind::Intersection => {
                if !(self.length > 0.0) {
                    return Err(NetworkError::InvalidSpec("length must be > 0".into()));
                }
            }
            SegmentKind::Curved => {
                if !(self.radius > self.half_band()) {
                    return Err(NetworkError::InvalidSpec(
                        "curved radius must exceed lanes*lane_width/2 (inner lane radius must stay positive)"
                            .into(),
                    ));
                }
                if self.sweep == 0.0 || self.sweep.abs() > 2.0 * PI {
                    return Err(NetworkError::InvalidSpec(
                        "curved sweep must be nonzero and at most a full turn".into(),
                    ));
                }
            }
        }
        Ok(())
    }

    /// Connection points in the segment's local frame: headings are the
    /// outward normals.
    fn local_ports(&self) -> Vec<(&'static str, Pose2D)> {
        match self.kind {
            SegmentKind::Straight => vec![
                ("start", Pose2D::new(0.0, 0.0, PI)),
                ("end", Pose2D::new(self.length, 0.0, 0.0)),
            ],
            SegmentKind::Curved => {
                let end = self.axis_arc().end_pose();
                vec![("start", Pose2D::new(0.0, 0.0, PI)), ("end", end)]
            }
            SegmentKind::Intersection => {
                let a = self.half_band() + self.length;
                vec![
                    ("east", Pose2D::new(a, 0.0, 0.0)),
                    ("north", Pose2D::new(0.0, a, FRAC_PI_2)),
                    ("south", Pose2D::new(0.0, -a, -FRAC_PI_2)),
                    ("west", Pose2D::new(-a, 0.0, PI)),
                ]
            }
        }
    }

    /// Axis arc of a curved segment in local coordinates.
    fn axis_arc(&self) -> ArcComponent {
        let sign = if self.sweep >= 0.0 { 1.0 } else { -1.0 };
        ArcComponent {
            center: Vec2::new(0.0, sign * self.radius),
            radius: self.radius,
            start_angle: -sign * FRAC_PI_2,
            sweep: self.sweep,
        }
    }
}

/// A typed attachment port on a segment boundary. The pose heading is the
/// outward-facing normal; a point can be joined to at most one peer.
#[derive(Debug, Clone, PartialEq)]
pub struct ConnectionPoint {
    pub owner: SegmentId,
    pub name: String,
    pub pose: Pose2D,
    pub peer: Option<(SegmentId, String)>,
}

#[derive(Debug, Clone)]
pub struct RoadSegment {
    pub id: SegmentId,
    pub spec: SegmentSpec,
    pub connection_points: BTreeMap<String, ConnectionPoint>,
}

impl RoadSegment {
    fn new(id: SegmentId, spec: SegmentSpec) -> Self {
        let mut seg = RoadSegment {
            id,
            spec,
            connection_points: BTreeMap::new(),
        };
        seg.recompute_ports();
        seg
    }

    /// Recomputes global port poses from the spec, preserving peers.
    fn recompute_ports(&mut self) {
        let frame = self.spec.frame();
        let mut ports = BTreeMap::new();
        for (name, local) in self.spec.local_ports() {
            let peer = self
                .connection_points
                .get(name)
                .and_then(|cp| cp.peer.clone());
            ports.insert(
                name.to_string(),
                ConnectionPoint {
                    owner: self.id,
                    name: name.to_string(),
                    pose: frame.compose(&local),
                    peer,
                },
            );
        }
        self.connection_points = ports;
    }

    pub fn port(&self, name: &str) -> Result<&ConnectionPoint, NetworkError> {
        self.connection_points
            .get(name)
            .ok_or_else(|| NetworkError::UnknownPort {
                segment: self.id,
                port: name.to_string(),
            })
    }

    /// The port reached by continuing straight through the segment from
    /// `entry`.
    pub fn opposite_port(&self, entry: &str) -> Result<&'static str, NetworkError> {
        let out = match (self.spec.kind, entry) {
            (SegmentKind::Straight | SegmentKind::Curved, "start") => "end",
            (SegmentKind::Straight | SegmentKind::Curved, "end") => "start",
            (SegmentKind::Intersection, "north") => "south",
            (SegmentKind::Intersection, "south") => "north",
            (SegmentKind::Intersection, "east") => "west",
            (SegmentKind::Intersection, "west") => "east",
            _ => {
                return Err(NetworkError::UnknownPort {
                    segment: self.id,
                    port: entry.to_string(),
                })
            }
        };
        Ok(out)
    }

    /// For an intersection, the exit port a left/right turn from `entry`
    /// leads to (left = +pi/2 net heading change).
    pub fn turn_exit(&self, entry: &str, left: bool) -> Result<&'static str, NetworkError> {
        if self.spec.kind != SegmentKind::Intersection {
            return Err(NetworkError::InvalidRoute {
                segment: self.id,
                entry: entry.to_string(),
                exit: if left { "<left>" } else { "<right>" }.to_string(),
            });
        }
        let entry_cp = self.port(entry)?;
        let inbound = normalize_angle(entry_cp.pose.theta + PI);
        let target = normalize_angle(inbound + if left { FRAC_PI_2 } else { -FRAC_PI_2 });
        for (name, cp) in &self.connection_points {
            if name != entry && normalize_angle(cp.pose.theta - target).abs() < 1e-9 {
                return Ok(match name.as_str() {
                    "north" => "north",
                    "south" => "south",
                    "east" => "east",
                    _ => "west",
                });
            }
        }
        Err(NetworkError::InvalidRoute {
            segment: self.id,
            entry: entry.to_string(),
            exit: if left { "<left>" } else { "<right>" }.to_string(),
        })
    }

    /// All directed port-to-port routes through this segment: 2 for straight
    /// and curved segments, 12 for intersections.
    pub fn routes(&self) -> Vec<(String, String)> {
        match self.spec.kind {
            SegmentKind::Straight | SegmentKind::Curved => vec![
                ("start".into(), "end".into()),
                ("end".into(), "start".into()),
            ],
            SegmentKind::Intersection => {
                let names = ["east", "north", "south", "west"];
                let mut out = Vec::with_capacity(12);
                for a in names {
                    for b in names {
                        if a != b {
                            out.push((a.to_string(), b.to_string()));
                        }
                    }
                }
                out
            }
        }
    }

    /// Lane centerline spans for traversing this segment from `entry` to
    /// `exit` on `lane`, in the world frame.
    pub fn lane_spans(
        &self,
        entry: &str,
        exit: &str,
        lane: u32,
    ) -> Result<Vec<PathSpan>, NetworkError> {
        if lane < 1 || lane > self.spec.lanes {
            return Err(NetworkError::UnknownLane {
                segment: self.id,
                lane,
            });
        }
        let o = self.spec.lane_offset(lane);
        let spec = &self.spec;
        let local: Vec<PathSpan> = match spec.kind {
            SegmentKind::Straight => match (entry, exit) {
                ("start", "end") => vec![PathSpan::Line(StraightComponent {
                    from: Vec2::new(0.0, o),
                    to: Vec2::new(spec.length, o),
                })],
                ("end", "start") => vec![PathSpan::Line(StraightComponent {
                    from: Vec2::new(spec.length, -o),
                    to: Vec2::new(0.0, -o),
                })],
                _ => return Err(self.invalid_route(entry, exit)),
            },
            SegmentKind::Curved => {
                let axis = spec.axis_arc();
                let sign = if spec.sweep >= 0.0 { 1.0 } else { -1.0 };
                match (entry, exit) {
                    ("start", "end") => vec![PathSpan::Arc(ArcComponent {
                        center: axis.center,
                        radius: spec.radius - sign * o,
                        start_angle: axis.start_angle,
                        sweep: spec.sweep,
                    })],
                    ("end", "start") => vec![PathSpan::Arc(ArcComponent {
                        center: axis.center,
                        radius: spec.radius + sign * o,
                        start_angle: axis.start_angle + spec.sweep,
                        sweep: -spec.sweep,
                    })],
                    _ => return Err(self.invalid_route(entry, exit)),
                }
            }
            SegmentKind::Intersection => self.intersection_lane_spans(entry, exit, o)?,
        };
        let frame = spec.frame();
        Ok(local.iter().map(|s| s.transformed(&frame)).collect())
    }

    /// Canonical intersection route construction: the entry arm is rotated
    /// onto the +x axis, the route built there, then rotated back.
    fn intersection_lane_spans(
        &self,
        entry: &str,
        exit: &str,
        o: f64,
    ) -> Result<Vec<PathSpan>, NetworkError> {
        let ports: BTreeMap<&str, f64> = [
            ("east", 0.0),
            ("north", FRAC_PI_2),
            ("west", PI),
            ("south", -FRAC_PI_2),
        ]
        .into();
        let (Some(&out_entry), Some(&out_exit)) = (ports.get(entry), ports.get(exit)) else {
            return Err(self.invalid_route(entry, exit));
        };
        if entry == exit {
            return Err(self.invalid_route(entry, exit));
        }
        let s2 = self.spec.half_band();
        let a = s2 + self.spec.length;
        let inbound = normalize_angle(out_entry + PI);
        let rel = normalize_angle(out_exit - inbound);

        let spans = if rel.abs() < 1e-9 {
            // Straight through.
            vec![PathSpan::Line(StraightComponent {
                from: Vec2::new(-a, o),
                to: Vec2::new(a, o),
            })]
        } else if (rel - FRAC_PI_2).abs() < 1e-9 {
            // Left turn around the inner corner.
            let r = s2 - o;
            vec![
                PathSpan::Line(StraightComponent {
                    from: Vec2::new(-a, o),
                    to: Vec2::new(-s2, o),
                }),
                PathSpan::Arc(ArcComponent {
                    center: Vec2::new(-s2, s2),
                    radius: r,
                    start_angle: -FRAC_PI_2,
                    sweep: FRAC_PI_2,
                }),
                PathSpan::Line(StraightComponent {
                    from: Vec2::new(-o, s2),
                    to: Vec2::new(-o, a),
                }),
            ]
        } else if (rel + FRAC_PI_2).abs() < 1e-9 {
            // Right turn.
            let r = s2 + o;
            vec![
                PathSpan::Line(StraightComponent {
                    from: Vec2::new(-a, o),
                    to: Vec2::new(-s2, o),
                }),
                PathSpan::Arc(ArcComponent {
                    center: Vec2::new(-s2, -s2),
                    radius: r,
                    start_angle: FRAC_PI_2,
                    sweep: -FRAC_PI_2,
                }),
                PathSpan::Line(StraightComponent {
                    from: Vec2::new(o, -s2),
                    to: Vec2::new(o, -a),
                }),
            ]
        } else {
            // U-turns are not routes.
            return Err(self.invalid_route(entry, exit));
        };

        let arm = Pose2D::new(0.0, 0.0, inbound);
        Ok(spans.iter().map(|s| s.transformed(&arm)).collect())
    }

    fn invalid_route(&self, entry: &str, exit: &str) -> NetworkError {
        NetworkError::InvalidRoute {
            segment: self.id,
            entry: entry.to_string(),
            exit: exit.to_string(),
        }
    }

    /// Axis spans used for drawing the road band (per-kind centerline of the
    /// full band), in the world frame.
    pub fn axis_spans(&self) -> Vec<PathSpan> {
        let spec = &self.spec;
        let local: Vec<PathSpan> = match spec.kind {
            SegmentKind::Straight => vec![PathSpan::Line(StraightComponent {
                from: Vec2::ZERO,
                to: Vec2::new(spec.length, 0.0),
            })],
            SegmentKind::Curved => vec![PathSpan::Arc(spec.axis_arc())],
            SegmentKind::Intersection => {
                let a = spec.half_band() + spec.length;
                vec![
                    PathSpan::Line(StraightComponent {
                        from: Vec2::new(-a, 0.0),
                        to: Vec2::new(a, 0.0),
                    }),
                    PathSpan::Line(StraightComponent {
                        from: Vec2::new(0.0, -a),
                        to: Vec2::new(0.0, a),
                    }),
                ]
            }
        };
        let frame = spec.frame();
        local.iter().map(|s| s.transformed(&frame)).collect()
    }

    /// Point-to-segment association in this segment's band, with the band
    /// widened by `margin` on the outside. Returns (lane, lateral offset to
    /// that lane's center, measured leftward of the forward direction).
    fn associate(&self, p: Vec2, margin: f64) -> Option<(u32, f64)> {
        let spec = &self.spec;
        let local = spec.frame().to_body_frame(p);
        let half = spec.half_band();
        match spec.kind {
            SegmentKind::Straight => {
                if local.x < -CONTAIN_TOL || local.x > spec.length + CONTAIN_TOL {
                    return None;
                }
                if local.y.abs() > half + margin {
                    return None;
                }
                Some(self.nearest_lane(local.y))
            }
            SegmentKind::Curved => {
                let axis = spec.axis_arc();
                let sign = if spec.sweep >= 0.0 { 1.0 } else { -1.0 };
                let radial = local - axis.center;
                let d = radial.norm();
                let lat = sign * (spec.radius - d);
                if lat.abs() > half + margin {
                    return None;
                }
                let ang_tol = CONTAIN_TOL / spec.radius.max(1.0);
                let prog = {
                    let raw = normalize_angle(radial.angle() - axis.start_angle) * sign;
                    if raw < 0.0 {
                        raw + 2.0 * PI
                    } else {
                        raw
                    }
                };
                let within =
                    prog <= spec.sweep.abs() + ang_tol || prog >= 2.0 * PI - ang_tol;
                if !within {
                    return None;
                }
                Some(self.nearest_lane(lat))
            }
            SegmentKind::Intersection => {
                let s2 = half;
                let a = s2 + spec.length;
                let mut best: Option<(u32, f64)> = None;
                // Four arms, each tested in its inbound-aligned frame.
                for outward in [0.0, FRAC_PI_2, PI, -FRAC_PI_2] {
                    let q = local.rotated(-(outward + PI));
                    if q.x >= -a - CONTAIN_TOL
                        && q.x <= -s2 + CONTAIN_TOL
                        && q.y.abs() <= half + margin
                    {
                        let cand = self.nearest_lane(q.y);
                        if best.map_or(true, |(_, lat)| cand.1.abs() < lat.abs()) {
                            best = Some(cand);
                        }
                    }
                }
                // Core square: lanes judged against both crossing axes.
                if local.x.abs() <= s2 + margin && local.y.abs() <= s2 + margin {
                    for lat in [local.y, -local.x] {
                        let cand = self.nearest_lane(lat);
                        if best.map_or(true, |(_, l)| cand.1.abs() < l.abs()) {
                            best = Some(cand);
                        }
                    }
                }
                best
            }
        }
    }

    /// Lane with the minimal |lateral offset to its center|; lower index
    /// wins ties.
    fn nearest_lane(&self, lat_axis: f64) -> (u32, f64) {
        let mut best = (1, lat_axis - self.spec.lane_offset(1));
        for lane in 2..=self.spec.lanes {
            let lat = lat_axis - self.spec.lane_offset(lane);
            if lat.abs() < best.1.abs() {
                best = (lane, lat);
            }
        }
        best
    }
}

/// Result of a position-to-road query.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RoadQuery {
    pub segment: SegmentId,
    pub lane: u32,
    pub lateral_offset: f64,
    pub speed_limit: f64,
    pub lane_width: f64,
}

/// Virtual parking lot configuration. Exit points must reference
/// unconnected connection points at configuration time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParkingLotConfig {
    pub platoon_size: u32,
    pub exit_points: Vec<(SegmentId, String)>,
    pub time_sequence_interval: f64,
    pub time_mean: f64,
    pub time_variance: f64,
}

/// Directed multigraph view: connected connection points collapse into one
/// node; every segment contributes its internal port-to-port routes as
/// labeled edges.
#[derive(Debug, Clone, Default)]
pub struct NetworkGraph {
    pub nodes: Vec<GraphNode>,
    pub edges: Vec<GraphEdge>,
    index: BTreeMap<(SegmentId, String), usize>,
}

#[derive(Debug, Clone)]
pub struct GraphNode {
    pub position: Vec2,
    /// Connection points merged into this node.
    pub points: Vec<(SegmentId, String)>,
}

#[derive(Debug, Clone)]
pub struct GraphEdge {
    pub from: usize,
    pub to: usize,
    pub segment: SegmentId,
    pub from_port: String,
    pub to_port: String,
}

impl NetworkGraph {
    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    pub fn node_of(&self, segment: SegmentId, port: &str) -> Option<usize> {
        self.index.get(&(segment, port.to_string())).copied()
    }

    pub fn out_edges(&self, node: usize) -> impl Iterator<Item = &GraphEdge> {
        self.edges.iter().filter(move |e| e.from == node)
    }

    pub fn is_strongly_connected(&self) -> bool {
        if self.nodes.is_empty() {
            return true;
        }
        let n = self.nodes.len();
        let reach = |forward: bool| {
            let mut seen = vec![false; n];
            let mut stack = vec![0usize];
            seen[0] = true;
            while let Some(u) = stack.pop() {
                for e in &self.edges {
                    let (a, b) = if forward { (e.from, e.to) } else { (e.to, e.from) };
                    if a == u && !seen[b] {
                        seen[b] = true;
                        stack.push(b);
                    }
                }
            }
            seen.into_iter().all(|s| s)
        };
        reach(true) && reach(false)
    }
}

/// The mutable road-network aggregate.
#[derive(Debug, Clone, Default)]
pub struct RoadNetwork {
    segments: BTreeMap<SegmentId, RoadSegment>,
    next_id: u32,
    parking_lot: Option<ParkingLotConfig>,
}

impl RoadNetwork {
    pub fn new() -> Self {
        RoadNetwork::default()
    }

    pub fn segment_ids(&self) -> impl Iterator<Item = SegmentId> + '_ {
        self.segments.keys().copied()
    }

    pub fn segments(&self) -> impl Iterator<Item = &RoadSegment> {
        self.segments.values()
    }

    pub fn segment(&self, id: SegmentId) -> Result<&RoadSegment, NetworkError> {
        self.segments
            .get(&id)
            .ok_or(NetworkError::UnknownSegment(id))
    }

    pub fn connection_point(
        &self,
        id: SegmentId,
        port: &str,
    ) -> Result<&ConnectionPoint, NetworkError> {
        self.segment(id)?.port(port)
    }

    /// Registers a new segment; connection-point poses are computed from the
    /// spec in the global frame, with no peers.
    pub fn create_road_segment(&mut self, spec: SegmentSpec) -> Result<SegmentId, NetworkError> {
        spec.validate()?;
        self.next_id += 1;
        let id = SegmentId(self.next_id);
        self.segments.insert(id, RoadSegment::new(id, spec));
        Ok(id)
    }

    /// Two segments are compatible iff their lane count and lane width
    /// coincide.
    pub fn is_compatible(&self, a: SegmentId, b: SegmentId) -> Result<bool, NetworkError> {
        let sa = self.segment(a)?.spec;
        let sb = self.segment(b)?.spec;
        Ok(sa.lanes == sb.lanes && sa.lane_width == sb.lane_width)
    }

    fn ensure_unconnected(&self, id: SegmentId, port: &str) -> Result<(), NetworkError> {
        if self.connection_point(id, port)?.peer.is_some() {
            return Err(NetworkError::AlreadyConnected {
                segment: id,
                port: port.to_string(),
            });
        }
        Ok(())
    }

    /// Joins `moving`'s port to `fixed`'s port, rigidly re-posing the moving
    /// segment so the two points coincide with anti-parallel outward
    /// headings. The fixed segment never moves.
    pub fn connect_road_segments(
        &mut self,
        fixed: SegmentId,
        cp_fixed: &str,
        moving: SegmentId,
        cp_moving: &str,
    ) -> Result<(), NetworkError> {
        if !self.is_compatible(fixed, moving)? {
            return Err(NetworkError::Incompatible { a: fixed, b: moving });
        }
        self.ensure_unconnected(fixed, cp_fixed)?;
        self.ensure_unconnected(moving, cp_moving)?;
        // A rigid move must not tear existing joints on the moving segment.
        for (name, cp) in &self.segment(moving)?.connection_points {
            if name != cp_moving && cp.peer.is_some() {
                return Err(NetworkError::WouldTearJoint {
                    segment: moving,
                    port: name.clone(),
                });
            }
        }

        let target = self.connection_point(fixed, cp_fixed)?.pose.reversed();
        {
            let seg = self.segments.get_mut(&moving).unwrap();
            let local_port = seg
                .spec
                .local_ports()
                .into_iter()
                .find(|(n, _)| *n == cp_moving)
                .map(|(_, p)| p)
                .ok_or_else(|| NetworkError::UnknownPort {
                    segment: moving,
                    port: cp_moving.to_string(),
                })?;
            let new_frame = target.compose(&local_port.inverse());
            seg.spec.local_origin = new_frame.position();
            seg.spec.orientation = new_frame.theta;
            seg.recompute_ports();
        }
        self.set_peers(fixed, cp_fixed, moving, cp_moving);
        Ok(())
    }

    fn set_peers(&mut self, a: SegmentId, pa: &str, b: SegmentId, pb: &str) {
        if let Some(cp) = self
            .segments
            .get_mut(&a)
            .and_then(|s| s.connection_points.get_mut(pa))
        {
            cp.peer = Some((b, pb.to_string()));
        }
        if let Some(cp) = self
            .segments
            .get_mut(&b)
            .and_then(|s| s.connection_points.get_mut(pb))
        {
            cp.peer = Some((a, pa.to_string()));
        }
    }

    /// Auto-connects two open ends with a curve-straight-curve chain of new
    /// segments inheriting lanes, lane width and speed limit from `a`.
    /// Degenerate components instantiate nothing; if every component is
    /// degenerate the two points are peered directly.
    pub fn create_connection(
        &mut self,
        a: SegmentId,
        cp_a: &str,
        b: SegmentId,
        cp_b: &str,
        r_min: f64,
    ) -> Result<Vec<SegmentId>, NetworkError> {
        if !self.is_compatible(a, b)? {
            return Err(NetworkError::Incompatible { a, b });
        }
        self.ensure_unconnected(a, cp_a)?;
        self.ensure_unconnected(b, cp_b)?;

        let template = self.segment(a)?.spec;
        let start = self.connection_point(a, cp_a)?.pose;
        // Roads meet head-on: the goal heading is the peer port's inward
        // normal.
        let goal = self.connection_point(b, cp_b)?.pose.reversed();
        let plan = dubins_csc(&start, &goal, r_min)?;

        let comps = plan.components();
        let degen = [
            plan.degenerate.first_arc,
            plan.degenerate.straight,
            plan.degenerate.second_arc,
        ];
        if comps
            .iter()
            .zip(degen)
            .any(|(c, d)| !d && matches!(c, PathSpan::Arc(_)))
            && r_min <= template.half_band()
        {
            return Err(NetworkError::InvalidSpec(
                "r_min must exceed lanes*lane_width/2 for auto-connection arcs".into(),
            ));
        }

        let mut created = Vec::new();
        let mut prev: (SegmentId, String) = (a, cp_a.to_string());
        for (comp, is_degen) in comps.iter().zip(degen) {
            if is_degen {
                continue;
            }
            let pose = comp.start_pose();
            let spec = match comp {
                PathSpan::Arc(arc) => SegmentSpec {
                    kind: SegmentKind::Curved,
                    length: 0.0,
                    radius: arc.radius,
                    sweep: arc.sweep,
                    orientation: pose.theta,
                    lanes: template.lanes,
                    lane_width: template.lane_width,
                    speed_limit: template.speed_limit,
                    local_origin: pose.position(),
                },
                PathSpan::Line(line) => SegmentSpec {
                    kind: SegmentKind::Straight,
                    length: line.length(),
                    radius: 0.0,
                    sweep: 0.0,
                    orientation: pose.theta,
                    lanes: template.lanes,
                    lane_width: template.lane_width,
                    speed_limit: template.speed_limit,
                    local_origin: pose.position(),
                },
            };
            let id = self.create_road_segment(spec)?;
            self.set_peers(prev.0, &prev.1, id, "start");
            prev = (id, "end".to_string());
            created.push(id);
        }
        self.set_peers(prev.0, &prev.1, b, cp_b);
        Ok(created)
    }

    /// Forward (start -> end) lane centerline. Intersections need a named
    /// route; use [`RoadNetwork::lane_center_through`].
    pub fn lane_center(
        &self,
        id: SegmentId,
        lane: u32,
        spacing: f64,
    ) -> Result<Trajectory, NetworkError> {
        let seg = self.segment(id)?;
        if seg.spec.kind == SegmentKind::Intersection {
            return Err(NetworkError::RouteRequired(id));
        }
        self.lane_center_through(id, "start", "end", lane, spacing)
    }

    /// Lane centerline for a directed traversal of the segment, annotated
    /// with the segment speed limit. Reverse traversal of straight/curved
    /// segments mirrors the lane indexing (lane 1 stays the rightmost lane
    /// relative to the travel direction).
    pub fn lane_center_through(
        &self,
        id: SegmentId,
        entry: &str,
        exit: &str,
        lane: u32,
        spacing: f64,
    ) -> Result<Trajectory, NetworkError> {
        assert!(spacing > 0.0, "spacing must be positive");
        let seg = self.segment(id)?;
        let spans = seg.lane_spans(entry, exit, lane)?;
        Ok(spans_to_trajectory(&spans, spacing, seg.spec.speed_limit))
    }

    /// Total lane-path length of a directed traversal.
    pub fn traversal_length(
        &self,
        id: SegmentId,
        entry: &str,
        exit: &str,
        lane: u32,
    ) -> Result<f64, NetworkError> {
        let seg = self.segment(id)?;
        Ok(seg
            .lane_spans(entry, exit, lane)?
            .iter()
            .map(|s| s.length())
            .sum())
    }

    /// Pose on a directed lane traversal at the given arc length from the
    /// entry.
    pub fn pose_on_lane(
        &self,
        id: SegmentId,
        entry: &str,
        exit: &str,
        lane: u32,
        arc_offset: f64,
    ) -> Result<Pose2D, NetworkError> {
        let seg = self.segment(id)?;
        let spans = seg.lane_spans(entry, exit, lane)?;
        let mut remaining = arc_offset;
        for (i, span) in spans.iter().enumerate() {
            let len = span.length();
            if remaining <= len + CONTAIN_TOL || i == spans.len() - 1 {
                return Ok(span.pose_at(remaining.min(len)));
            }
            remaining -= len;
        }
        unreachable!("lane_spans is never empty");
    }

    /// Associates a position with the nearest lane of the nearest segment,
    /// or `None` if it is outside every segment's drivable band.
    pub fn query_road(&self, position: Vec2) -> Option<RoadQuery> {
        self.query_road_with_margin(position, 0.0)
    }

    /// Like [`RoadNetwork::query_road`] with every band widened by `margin`.
    /// Used for crash classification, where a half-vehicle-width grace zone
    /// applies outside the band.
    pub fn query_road_with_margin(&self, position: Vec2, margin: f64) -> Option<RoadQuery> {
        let mut best: Option<RoadQuery> = None;
        for seg in self.segments.values() {
            if let Some((lane, lat)) = seg.associate(position, margin) {
                let better = best
                    .as_ref()
                    .map_or(true, |b| lat.abs() < b.lateral_offset.abs());
                if better {
                    best = Some(RoadQuery {
                        segment: seg.id,
                        lane,
                        lateral_offset: lat,
                        speed_limit: seg.spec.speed_limit,
                        lane_width: seg.spec.lane_width,
                    });
                }
            }
        }
        best
    }

    /// All connection points with no peer, in (segment, port) order.
    pub fn open_ends(&self) -> Vec<(SegmentId, String)> {
        let mut out = Vec::new();
        for seg in self.segments.values() {
            for (name, cp) in &seg.connection_points {
                if cp.peer.is_none() {
                    out.push((seg.id, name.clone()));
                }
            }
        }
        out
    }

    /// Builds the directed multigraph representation.
    pub fn as_graph(&self) -> NetworkGraph {
        let mut graph = NetworkGraph::default();
        for seg in self.segments.values() {
            for (name, cp) in &seg.connection_points {
                let key = (seg.id, name.clone());
                if graph.index.contains_key(&key) {
                    continue;
                }
                // Merge with an already-indexed peer if present.
                if let Some((peer_seg, peer_port)) = &cp.peer {
                    if let Some(&node) = graph.index.get(&(*peer_seg, peer_port.clone())) {
                        graph.index.insert(key.clone(), node);
                        graph.nodes[node].points.push(key);
                        continue;
                    }
                }
                let node = graph.nodes.len();
                graph.nodes.push(GraphNode {
                    position: cp.pose.position(),
                    points: vec![key.clone()],
                });
                graph.index.insert(key, node);
            }
        }
        for seg in self.segments.values() {
            for (from_port, to_port) in seg.routes() {
                let from = graph.index[&(seg.id, from_port.clone())];
                let to = graph.index[&(seg.id, to_port.clone())];
                graph.edges.push(GraphEdge {
                    from,
                    to,
                    segment: seg.id,
                    from_port,
                    to_port,
                });
            }
        }
        graph
    }

    /// Configures the virtual parking lot. All exit points must reference
    /// currently unconnected connection points.
    pub fn set_parking_lot(&mut self, config: ParkingLotConfig) -> Result<(), NetworkError> {
        if config.platoon_size < 1 {
            return Err(NetworkError::InvalidParkingLot(
                "platoon_size must be >= 1".into(),
            ));
        }
        if config.exit_points.is_empty() {
            return Err(NetworkError::InvalidParkingLot(
                "exit_points must be nonempty".into(),
            ));
        }
        if config.time_variance < 0.0 {
            return Err(NetworkError::InvalidParkingLot(
                "time_variance must be >= 0".into(),
            ));
        }
        for (seg, port) in &config.exit_points {
            let cp = self.connection_point(*seg, port).map_err(|e| {
                NetworkError::InvalidParkingLot(format!("exit point {seg}:\"{port}\": {e}"))
            })?;
            if cp.peer.is_some() {
                return Err(NetworkError::InvalidParkingLot(format!(
                    "exit point {seg}:\"{port}\" is connected"
                )));
            }
        }
        self.parking_lot = Some(config);
        Ok(())
    }

    pub fn parking_lot(&self) -> Option<&ParkingLotConfig> {
        self.parking_lot.as_ref()
    }
}

fn spans_to_trajectory(spans: &[PathSpan], spacing: f64, speed: f64) -> Trajectory {
    let mut points: Vec<TrajectoryPoint> = Vec::new();
    let mut base = 0.0;
    for span in spans {
        let len = span.length();
        if points.is_empty() {
            let p = span.pose_at(0.0);
            points.push(TrajectoryPoint {
                position: p.position(),
                heading: p.theta,
                speed_ref: speed,
                arc_length: 0.0,
            });
        }
        if len <= 0.0 {
            continue;
        }
        let n = (len / spacing).ceil().max(1.0) as usize;
        for k in 1..=n {
            let s = len * k as f64 / n as f64;
            let p = span.pose_at(s);
            points.push(TrajectoryPoint {
                position: p.position(),
                heading: p.theta,
                speed_ref: speed,
                arc_length: base + s,
            });
        }
        base += len;
    }
    Trajectory {
        points,
        dead_end: false,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn two_lane(spec: SegmentSpec) -> SegmentSpec {
        spec.lanes(2).lane_width(4.0).speed_limit(15.0)
    }

    #[test]
    fn straight_segment_from_guide_listing() {
        let mut net = RoadNetwork::new();
        let id = net
            .create_road_segment(
                SegmentSpec::straight(100.0)
                    .lanes(2)
                    .lane_width(50.0)
                    .speed_limit(50.0)
                    .at(Vec2::ZERO, 0.0),
            )
            .unwrap();
        let start = net.connection_point(id, "start").unwrap().pose;
        let end = net.connection_point(id, "end").unwrap().pose;
        assert_abs_diff_eq!(start.position().distance(end.position()), 100.0, epsilon = 1e-12);
        assert_abs_diff_eq!(end.x, 100.0, epsilon = 1e-12);
        assert_eq!(end.theta, 0.0);
        assert_eq!(start.theta, PI);
    }

    #[test]
    fn straight_rotated_end_displaced_along_y() {
        let mut net = RoadNetwork::new();
        let id = net
            .create_road_segment(two_lane(SegmentSpec::straight(100.0)).at(Vec2::ZERO, FRAC_PI_2))
            .unwrap();
        let end = net.connection_point(id, "end").unwrap().pose;
        assert_abs_diff_eq!(end.x, 0.0, epsilon = 1e-9);
        assert_abs_diff_eq!(end.y, 100.0, epsilon = 1e-9);
    }

    #[test]
    fn curved_end_pose_matches_arc_endpoint_and_lane_center() {
        let mut net = RoadNetwork::new();
        let id = net
            .create_road_segment(two_lane(SegmentSpec::curved(30.0, FRAC_PI_2)))
            .unwrap();
        let start = net.connection_point(id, "start").unwrap().pose;
        let end = net.connection_point(id, "end").unwrap().pose;
        // Net heading change between outward normals is the sweep.
        assert_abs_diff_eq!(
            normalize_angle(end.theta - (start.theta + PI)),
            FRAC_PI_2,
            epsilon = 1e-12
        );
        // Closed-form arc endpoint for a left turn of radius 30.
        assert_abs_diff_eq!(end.x, 30.0, epsilon = 1e-12);
        assert_abs_diff_eq!(end.y, 30.0, epsilon = 1e-12);
        // Sampled lane center ends at the lane's own arc endpoint.
        let traj = net.lane_center(id, 1, 0.1).unwrap();
        let last = traj.points.last().unwrap();
        // Lane 1 offset is -2 m (rightmost), so its radius is 32.
        let center = Vec2::new(0.0, 30.0);
        assert_abs_diff_eq!(last.position.distance(center), 32.0, epsilon = 1e-9);
    }

    #[test]
    fn compatibility_rules() {
        let mut net = RoadNetwork::new();
        let a = net
            .create_road_segment(two_lane(SegmentSpec::straight(10.0)))
            .unwrap();
        let b = net
            .create_road_segment(two_lane(SegmentSpec::straight(20.0)))
            .unwrap();
        let c = net
            .create_road_segment(SegmentSpec::straight(10.0).lanes(3).lane_width(4.0))
            .unwrap();
        let d = net
            .create_road_segment(SegmentSpec::straight(10.0).lanes(2).lane_width(3.5))
            .unwrap();
        assert!(net.is_compatible(a, b).unwrap());
        assert!(!net.is_compatible(a, c).unwrap());
        assert!(!net.is_compatible(a, d).unwrap());
    }

    #[test]
    fn connect_aligns_moving_segment() {
        let mut net = RoadNetwork::new();
        let s1 = net
            .create_road_segment(two_lane(SegmentSpec::straight(100.0)))
            .unwrap();
        let s2 = net
            .create_road_segment(
                two_lane(SegmentSpec::straight(50.0)).at(Vec2::new(500.0, 300.0), 1.0),
            )
            .unwrap();
        net.connect_road_segments(s1, "end", s2, "start").unwrap();
        let f = net.connection_point(s1, "end").unwrap().pose;
        let m = net.connection_point(s2, "start").unwrap().pose;
        assert!(f.position().distance(m.position()) <= 1e-9);
        assert!(normalize_angle(m.theta - f.theta - PI).abs() <= 1e-9);
        // Fixed segment never moved.
        assert_eq!(net.segment(s1).unwrap().spec.local_origin, Vec2::ZERO);
        // Peers are symmetric.
        assert_eq!(
            net.connection_point(s1, "end").unwrap().peer,
            Some((s2, "start".to_string()))
        );
        assert_eq!(
            net.connection_point(s2, "start").unwrap().peer,
            Some((s1, "end".to_string()))
        );
        // Second connect on the same fixed point is rejected.
        let s3 = net
            .create_road_segment(two_lane(SegmentSpec::straight(10.0)))
            .unwrap();
        let err = net.connect_road_segments(s1, "end", s3, "start");
        assert!(matches!(err, Err(NetworkError::AlreadyConnected { .. })));
    }

    #[test]
    fn connect_refuses_to_tear_joints() {
        let mut net = RoadNetwork::new();
        let s1 = net
            .create_road_segment(two_lane(SegmentSpec::straight(10.0)))
            .unwrap();
        let s2 = net
            .create_road_segment(two_lane(SegmentSpec::straight(10.0)))
            .unwrap();
        let s3 = net
            .create_road_segment(two_lane(SegmentSpec::straight(10.0)))
            .unwrap();
        net.connect_road_segments(s1, "end", s2, "start").unwrap();
        let err = net.connect_road_segments(s3, "end", s2, "end");
        assert!(matches!(err, Err(NetworkError::WouldTearJoint { .. })));
    }

    #[test]
    fn auto_connection_collinear_gap_is_one_straight() {
        let mut net = RoadNetwork::new();
        let s1 = net
            .create_road_segment(two_lane(SegmentSpec::straight(20.0)))
            .unwrap();
        let s2 = net
            .create_road_segment(two_lane(SegmentSpec::straight(20.0)).at(Vec2::new(70.0, 0.0), 0.0))
            .unwrap();
        let created = net.create_connection(s1, "end", s2, "start", 10.0).unwrap();
        assert_eq!(created.len(), 1);
        let seg = net.segment(created[0]).unwrap();
        assert_eq!(seg.spec.kind, SegmentKind::Straight);
        assert_abs_diff_eq!(seg.spec.length, 50.0, epsilon = 1e-9);
        // Chained peers close the gap.
        assert_eq!(
            net.connection_point(s1, "end").unwrap().peer,
            Some((created[0], "start".to_string()))
        );
        assert_eq!(
            net.connection_point(s2, "start").unwrap().peer,
            Some((created[0], "end".to_string()))
        );
    }

    #[test]
    fn auto_connection_semicircle_is_one_curve() {
        let mut net = RoadNetwork::new();
        let s1 = net
            .create_road_segment(two_lane(SegmentSpec::straight(20.0)))
            .unwrap();
        // Open end facing back along -x at (20, 20): a pure semicircle of
        // radius 10 connects them.
        let s2 = net
            .create_road_segment(two_lane(SegmentSpec::straight(20.0)).at(Vec2::new(20.0, 20.0), PI))
            .unwrap();
        let created = net.create_connection(s1, "end", s2, "start", 10.0).unwrap();
        assert_eq!(created.len(), 1);
        let seg = net.segment(created[0]).unwrap();
        assert_eq!(seg.spec.kind, SegmentKind::Curved);
        assert_abs_diff_eq!(seg.spec.sweep.abs(), PI, epsilon = 1e-9);
    }

    #[test]
    fn auto_connection_exactly_closed_gap_creates_nothing() {
        let mut net = RoadNetwork::new();
        let s1 = net
            .create_road_segment(two_lane(SegmentSpec::straight(20.0)))
            .unwrap();
        let s2 = net
            .create_road_segment(two_lane(SegmentSpec::straight(20.0)).at(Vec2::new(20.0, 0.0), 0.0))
            .unwrap();
        let created = net.create_connection(s1, "end", s2, "start", 10.0).unwrap();
        assert!(created.is_empty());
        assert!(net.connection_point(s1, "end").unwrap().peer.is_some());
    }

    fn lane_endpoints_at_joint(
        net: &RoadNetwork,
        seg: SegmentId,
        port: &str,
        lane: u32,
    ) -> (Pose2D, Pose2D) {
        // Exit-side endpoint: a traversal of `seg` ending at `port`.
        let s = net.segment(seg).unwrap();
        let (entry_exit, exit_entry) = match s.spec.kind {
            SegmentKind::Intersection => {
                let opp = s.opposite_port(port).unwrap();
                ((opp.to_string(), port.to_string()), (port.to_string(), opp.to_string()))
            }
            _ => {
                let opp = s.opposite_port(port).unwrap();
                ((opp.to_string(), port.to_string()), (port.to_string(), opp.to_string()))
            }
        };
        let exit_traj = net
            .lane_center_through(seg, &entry_exit.0, &entry_exit.1, lane, 0.5)
            .unwrap();
        let entry_traj = net
            .lane_center_through(seg, &exit_entry.0, &exit_entry.1, lane, 0.5)
            .unwrap();
        let end = exit_traj.points.last().unwrap();
        let start = entry_traj.points.first().unwrap();
        (
            Pose2D::new(end.position.x, end.position.y, end.heading),
            Pose2D::new(start.position.x, start.position.y, start.heading),
        )
    }

    /// Continuity across a joint: the exiting lane center of one side meets
    /// the entering lane center of the other.
    fn assert_joint_continuity(net: &RoadNetwork, tol_pos: f64, tol_ang: f64) {
        for seg in net.segments() {
            for (port, cp) in &seg.connection_points {
                let Some((peer_seg, peer_port)) = &cp.peer else {
                    continue;
                };
                for lane in 1..=seg.spec.lanes {
                    let (exit_end, _) = lane_endpoints_at_joint(net, seg.id, port, lane);
                    let (_, entry_start) =
                        lane_endpoints_at_joint(net, *peer_seg, peer_port, lane);
                    let gap = exit_end.position().distance(entry_start.position());
                    assert!(
                        gap <= tol_pos,
                        "lane {lane} gap {gap} at {}:{port} -> {peer_seg}:{peer_port}",
                        seg.id
                    );
                    let ang = normalize_angle(exit_end.theta - entry_start.theta).abs();
                    assert!(ang <= tol_ang, "tangent mismatch {ang}");
                }
            }
        }
    }

    #[test]
    fn random_auto_connections_keep_lane_centers_continuous() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for _ in 0..100 {
            let mut net = RoadNetwork::new();
            let s1 = net
                .create_road_segment(two_lane(SegmentSpec::straight(20.0)).at(
                    Vec2::new(rng.random_range(-50.0..50.0), rng.random_range(-50.0..50.0)),
                    rng.random_range(-PI..PI),
                ))
                .unwrap();
            let s2 = net
                .create_road_segment(two_lane(SegmentSpec::straight(20.0)).at(
                    Vec2::new(rng.random_range(60.0..150.0), rng.random_range(60.0..150.0)),
                    rng.random_range(-PI..PI),
                ))
                .unwrap();
            net.create_connection(s1, "end", s2, "start", 10.0).unwrap();
            assert_joint_continuity(&net, 1e-6, 1e-6);
        }
    }

    #[test]
    fn explicit_joints_are_continuous_to_tight_tolerance() {
        let mut net = RoadNetwork::new();
        let s1 = net
            .create_road_segment(two_lane(SegmentSpec::straight(100.0)))
            .unwrap();
        let c1 = net
            .create_road_segment(two_lane(SegmentSpec::curved(30.0, PI)))
            .unwrap();
        net.connect_road_segments(s1, "end", c1, "start").unwrap();
        assert_joint_continuity(&net, 1e-9, 1e-9);
    }

    #[test]
    fn lane_center_offsets_on_straight() {
        let mut net = RoadNetwork::new();
        let id = net
            .create_road_segment(two_lane(SegmentSpec::straight(10.0)))
            .unwrap();
        let lane1 = net.lane_center(id, 1, 1.0).unwrap();
        let lane2 = net.lane_center(id, 2, 1.0).unwrap();
        for p in &lane1.points {
            assert_abs_diff_eq!(p.position.y, -2.0, epsilon = 1e-12);
            assert_eq!(p.speed_ref, 15.0);
        }
        for p in &lane2.points {
            assert_abs_diff_eq!(p.position.y, 2.0, epsilon = 1e-12);
        }
        assert!(net.lane_center(id, 3, 1.0).is_err());
    }

    #[test]
    fn curved_lane_center_radial_oracle() {
        let mut net = RoadNetwork::new();
        let id = net
            .create_road_segment(two_lane(SegmentSpec::curved(30.0, FRAC_PI_2)))
            .unwrap();
        let traj = net.lane_center(id, 1, 0.2).unwrap();
        let center = Vec2::new(0.0, 30.0);
        for p in &traj.points {
            assert_abs_diff_eq!(p.position.distance(center), 32.0, epsilon = 1e-9);
        }
    }

    #[test]
    fn query_road_trivials() {
        let mut net = RoadNetwork::new();
        let id = net
            .create_road_segment(two_lane(SegmentSpec::straight(50.0)))
            .unwrap();
        // On lane 1 center.
        let q = net.query_road(Vec2::new(25.0, -2.0)).unwrap();
        assert_eq!(q.segment, id);
        assert_eq!(q.lane, 1);
        assert_abs_diff_eq!(q.lateral_offset, 0.0, epsilon = 1e-12);
        assert_eq!(q.lane_width, 4.0);
        assert_eq!(q.speed_limit, 15.0);
        // Boundary between lanes 1 and 2: lower index wins.
        let q = net.query_road(Vec2::new(25.0, 0.0)).unwrap();
        assert_eq!(q.lane, 1);
        // 1 m outside the outer boundary; just inside is still on-road.
        assert!(net.query_road(Vec2::new(25.0, 5.0)).is_none());
        assert!(net.query_road(Vec2::new(25.0, 3.9)).is_some());
        // Beyond the ends.
        assert!(net.query_road(Vec2::new(51.0, 0.0)).is_none());
    }

    #[test]
    fn query_road_finds_sampled_lane_center_points() {
        let mut net = RoadNetwork::new();
        let s1 = net
            .create_road_segment(two_lane(SegmentSpec::straight(40.0)))
            .unwrap();
        let c1 = net
            .create_road_segment(two_lane(SegmentSpec::curved(25.0, -FRAC_PI_2)))
            .unwrap();
        net.connect_road_segments(s1, "end", c1, "start").unwrap();
        for id in [s1, c1] {
            for lane in 1..=2 {
                let traj = net.lane_center(id, lane, 0.7).unwrap();
                // Interior samples only: joint endpoints legitimately belong
                // to both segments.
                for p in &traj.points[1..traj.points.len() - 1] {
                    let q = net.query_road(p.position).unwrap();
                    assert_eq!(q.segment, id);
                    assert_eq!(q.lane, lane);
                    assert!(q.lateral_offset.abs() <= 1e-9);
                }
            }
        }
    }

    #[test]
    fn graph_counts_for_basic_networks() {
        // Two straights connected end <-> start.
        let mut net = RoadNetwork::new();
        let s1 = net
            .create_road_segment(two_lane(SegmentSpec::straight(10.0)))
            .unwrap();
        let s2 = net
            .create_road_segment(two_lane(SegmentSpec::straight(10.0)))
            .unwrap();
        net.connect_road_segments(s1, "end", s2, "start").unwrap();
        let g = net.as_graph();
        assert_eq!(g.node_count(), 3);
        assert_eq!(g.edge_count(), 4);
        // Merged node is shared.
        assert_eq!(g.node_of(s1, "end"), g.node_of(s2, "start"));

        // A lone intersection.
        let mut net = RoadNetwork::new();
        net.create_road_segment(two_lane(SegmentSpec::intersection(20.0)))
            .unwrap();
        let g = net.as_graph();
        assert_eq!(g.node_count(), 4);
        assert_eq!(g.edge_count(), 12);
    }

    #[test]
    fn ring_of_four_curves_is_strongly_connected() {
        let mut net = RoadNetwork::new();
        let mut ids = Vec::new();
        for i in 0..4 {
            let spec = two_lane(SegmentSpec::curved(30.0, FRAC_PI_2));
            let id = net.create_road_segment(spec).unwrap();
            if let Some(&prev) = ids.last() {
                net.connect_road_segments(prev, "end", id, "start").unwrap();
            }
            ids.push(id);
            let _ = i;
        }
        // Close the ring; geometry is exact, so nothing is instantiated.
        let created = net
            .create_connection(ids[3], "end", ids[0], "start", 10.0)
            .unwrap();
        assert!(created.is_empty());
        let g = net.as_graph();
        assert_eq!(g.node_count(), 4);
        assert_eq!(g.edge_count(), 8);
        assert!(g.is_strongly_connected());
        assert!(net.open_ends().is_empty());
    }

    #[test]
    fn open_ends_listing() {
        let mut net = RoadNetwork::new();
        let s1 = net
            .create_road_segment(two_lane(SegmentSpec::straight(10.0)))
            .unwrap();
        assert_eq!(
            net.open_ends(),
            vec![(s1, "end".to_string()), (s1, "start".to_string())]
        );
        let s2 = net
            .create_road_segment(two_lane(SegmentSpec::straight(10.0)).at(Vec2::new(30.0, 0.0), 0.0))
            .unwrap();
        net.create_connection(s1, "end", s2, "start", 5.0).unwrap();
        let ends = net.open_ends();
        assert!(!ends.contains(&(s1, "end".to_string())));
        assert!(!ends.contains(&(s2, "start".to_string())));
    }

    #[test]
    fn peer_symmetry_model_based() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut net = RoadNetwork::new();
        let mut reference: BTreeMap<(SegmentId, String), (SegmentId, String)> = BTreeMap::new();
        let mut ids = Vec::new();
        for _ in 0..30 {
            let id = net
                .create_road_segment(two_lane(SegmentSpec::straight(10.0)).at(
                    Vec2::new(rng.random_range(-500.0..500.0), rng.random_range(-500.0..500.0)),
                    rng.random_range(-PI..PI),
                ))
                .unwrap();
            ids.push(id);
        }
        for _ in 0..200 {
            let a = ids[rng.random_range(0..ids.len())];
            let b = ids[rng.random_range(0..ids.len())];
            let pa = if rng.random_bool(0.5) { "start" } else { "end" };
            let pb = if rng.random_bool(0.5) { "start" } else { "end" };
            if a == b {
                continue;
            }
            if net.connect_road_segments(a, pa, b, pb).is_ok() {
                reference.insert((a, pa.to_string()), (b, pb.to_string()));
                reference.insert((b, pb.to_string()), (a, pa.to_string()));
            }
        }
        for (key, val) in &reference {
            let cp = net.connection_point(key.0, &key.1).unwrap();
            assert_eq!(cp.peer.as_ref(), Some(val));
        }
        // Uniqueness: every peer link appears exactly twice (once per side).
        for seg in net.segments() {
            for (name, cp) in &seg.connection_points {
                if let Some(peer) = &cp.peer {
                    let other = net.connection_point(peer.0, &peer.1).unwrap();
                    assert_eq!(other.peer, Some((seg.id, name.clone())));
                }
            }
        }
    }

    #[test]
    fn intersection_routes_and_turn_geometry() {
        let mut net = RoadNetwork::new();
        let id = net
            .create_road_segment(two_lane(SegmentSpec::intersection(20.0)))
            .unwrap();
        let seg = net.segment(id).unwrap();
        assert_eq!(seg.turn_exit("west", true).unwrap(), "north");
        assert_eq!(seg.turn_exit("west", false).unwrap(), "south");
        assert_eq!(seg.opposite_port("west").unwrap(), "east");

        // Left-turn route accumulates +pi/2 of heading.
        let traj = net.lane_center_through(id, "west", "north", 1, 0.1).unwrap();
        let first = traj.points.first().unwrap();
        let last = traj.points.last().unwrap();
        assert_abs_diff_eq!(
            normalize_angle(last.heading - first.heading),
            FRAC_PI_2,
            epsilon = 1e-9
        );
        // Route endpoints are at the ports, on the lane.
        let west = net.connection_point(id, "west").unwrap().pose;
        assert!(first.position.distance(west.position()) <= 2.1);
    }
}
