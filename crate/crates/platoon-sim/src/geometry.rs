//! Planar poses, frame transforms, arc/line path primitives and the
//! curve-straight-curve planner used by automatic road generation.
//!
//! All types are immutable values and every operation is pure, so the module
//! is safe to use from any number of threads.

use std::f64::consts::{FRAC_PI_2, PI, TAU};
use std::ops::{Add, Mul, Neg, Sub};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Length in meters below which a planned path component counts as degenerate.
pub const EPSILON_LEN: f64 = 1e-6;

/// Turning-circle centers closer than this are treated as coincident.
const CENTER_EPS: f64 = 1e-9;

/// Allowed shortfall of the center distance for inner-tangent (LSR/RSL) words;
/// a graze within this band is accepted with a zero-length straight.
const GRAZE_EPS: f64 = 1e-7;

#[derive(Debug, Error, Clone, Copy, PartialEq, Eq)]
pub enum GeometryError {
    /// No curve-straight-curve word connects the two poses at the given radius.
    #[error("no curve-straight-curve solution for the given poses")]
    NoCscSolution,
}

/// Normalizes an angle to the half-open interval `(-pi, pi]`.
///
/// Ties at the boundary map to `+pi`.
pub fn normalize_angle(angle: f64) -> f64 {
    let mut a = angle % TAU;
    if a <= -PI {
        a += TAU;
    } else if a > PI {
        a -= TAU;
    }
    a
}

/// Wraps an angle into `[0, 2*pi)`. Never returns -0.0: the sign bit of a
/// zero sweep is meaningful to [`ArcComponent`].
fn mod_tau(angle: f64) -> f64 {
    let a = angle % TAU;
    if a < 0.0 {
        a + TAU
    } else if a == 0.0 {
        0.0
    } else {
        a
    }
}

/// A point or displacement in the plane, in meters.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Vec2 {
    pub x: f64,
    pub y: f64,
}

impl Vec2 {
    pub const ZERO: Vec2 = Vec2 { x: 0.0, y: 0.0 };

    pub fn new(x: f64, y: f64) -> Self {
        debug_assert!(x.is_finite() && y.is_finite(), "non-finite Vec2 component");
        Vec2 { x, y }
    }

    /// Unit vector for a heading angle.
    pub fn from_angle(theta: f64) -> Self {
        Vec2::new(theta.cos(), theta.sin())
    }

    pub fn dot(self, other: Vec2) -> f64 {
        self.x * other.x + self.y * other.y
    }

    /// 2D cross product (z component of the 3D cross product).
    pub fn cross(self, other: Vec2) -> f64 {
        self.x * other.y - self.y * other.x
    }

    pub fn norm(self) -> f64 {
        self.x.hypot(self.y)
    }

    pub fn distance(self, other: Vec2) -> f64 {
        (other - self).norm()
    }

    pub fn angle(self) -> f64 {
        self.y.atan2(self.x)
    }

    /// Rotates the vector counter-clockwise by `theta`.
    pub fn rotated(self, theta: f64) -> Vec2 {
        let (s, c) = theta.sin_cos();
        Vec2::new(c * self.x - s * self.y, s * self.x + c * self.y)
    }

    /// The vector rotated a quarter turn counter-clockwise.
    pub fn perp_left(self) -> Vec2 {
        Vec2::new(-self.y, self.x)
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }
}

impl Add for Vec2 {
    type Output = Vec2;
    fn add(self, rhs: Vec2) -> Vec2 {
        Vec2::new(self.x + rhs.x, self.y + rhs.y)
    }
}

impl Sub for Vec2 {
    type Output = Vec2;
    fn sub(self, rhs: Vec2) -> Vec2 {
        Vec2::new(self.x - rhs.x, self.y - rhs.y)
    }
}

impl Mul<f64> for Vec2 {
    type Output = Vec2;
    fn mul(self, rhs: f64) -> Vec2 {
        Vec2::new(self.x * rhs, self.y * rhs)
    }
}

impl Neg for Vec2 {
    type Output = Vec2;
    fn neg(self) -> Vec2 {
        Vec2::new(-self.x, -self.y)
    }
}

/// A planar pose: position in meters plus heading in radians, measured
/// counter-clockwise from the global +x axis.
///
/// The heading is kept normalized to `(-pi, pi]` by every constructor and
/// operation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose2D {
    pub x: f64,
    pub y: f64,
    pub theta: f64,
}

impl Pose2D {
    pub fn new(x: f64, y: f64, theta: f64) -> Self {
        debug_assert!(
            x.is_finite() && y.is_finite() && theta.is_finite(),
            "non-finite Pose2D component"
        );
        Pose2D {
            x,
            y,
            theta: normalize_angle(theta),
        }
    }

    pub fn identity() -> Self {
        Pose2D::new(0.0, 0.0, 0.0)
    }

    pub fn from_parts(position: Vec2, theta: f64) -> Self {
        Pose2D::new(position.x, position.y, theta)
    }

    pub fn position(&self) -> Vec2 {
        Vec2::new(self.x, self.y)
    }

    /// Unit vector along the heading.
    pub fn heading_vec(&self) -> Vec2 {
        Vec2::from_angle(self.theta)
    }

    /// Expresses `child_in_self` (a pose given in this pose's frame) in the
    /// frame this pose itself lives in.
    pub fn compose(&self, child_in_self: &Pose2D) -> Pose2D {
        let p = self.position() + child_in_self.position().rotated(self.theta);
        Pose2D::from_parts(p, self.theta + child_in_self.theta)
    }

    /// The pose `q` with `q.compose(self) == identity`.
    pub fn inverse(&self) -> Pose2D {
        let p = (-self.position()).rotated(-self.theta);
        Pose2D::from_parts(p, -self.theta)
    }

    /// Transforms a global-frame point into this pose's body frame
    /// (+x along the heading).
    pub fn to_body_frame(&self, point_global: Vec2) -> Vec2 {
        (point_global - self.position()).rotated(-self.theta)
    }

    /// Inverse of [`Pose2D::to_body_frame`].
    pub fn to_global_frame(&self, point_body: Vec2) -> Vec2 {
        self.position() + point_body.rotated(self.theta)
    }

    /// Heading flipped by pi, position unchanged.
    pub fn reversed(&self) -> Pose2D {
        Pose2D::new(self.x, self.y, self.theta + PI)
    }
}

/// Composes two poses; free-function form of [`Pose2D::compose`].
pub fn compose(parent: &Pose2D, child_in_parent: &Pose2D) -> Pose2D {
    parent.compose(child_in_parent)
}

/// A circular arc traversed at constant radius.
///
/// `sweep` is signed: positive sweeps counter-clockwise. `start_angle` is the
/// position angle of the arc's first point on its circle.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ArcComponent {
    pub center: Vec2,
    pub radius: f64,
    pub start_angle: f64,
    pub sweep: f64,
}

impl ArcComponent {
    pub fn length(&self) -> f64 {
        self.radius * self.sweep.abs()
    }

    // A right-turn arc of zero length carries sweep -0.0 so the clockwise
    // heading convention survives degeneracy.
    fn turn_sign(&self) -> f64 {
        if self.sweep.is_sign_negative() {
            -1.0
        } else {
            1.0
        }
    }

    /// Pose after traversing arc length `s` from the start (0 <= s <= length).
    pub fn pose_at(&self, s: f64) -> Pose2D {
        let sign = self.turn_sign();
        let a = if self.radius > 0.0 {
            self.start_angle + sign * s / self.radius
        } else {
            self.start_angle
        };
        let p = self.center + Vec2::from_angle(a) * self.radius;
        Pose2D::from_parts(p, a + sign * FRAC_PI_2)
    }

    pub fn start_pose(&self) -> Pose2D {
        self.pose_at(0.0)
    }

    pub fn end_pose(&self) -> Pose2D {
        self.pose_at(self.length())
    }
}

/// A straight path component between two points.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StraightComponent {
    pub from: Vec2,
    pub to: Vec2,
}

impl StraightComponent {
    pub fn length(&self) -> f64 {
        self.from.distance(self.to)
    }

    fn heading(&self) -> f64 {
        (self.to - self.from).angle()
    }

    pub fn pose_at(&self, s: f64) -> Pose2D {
        let len = self.length();
        let t = if len > 0.0 { s / len } else { 0.0 };
        let p = self.from + (self.to - self.from) * t;
        Pose2D::from_parts(p, self.heading())
    }
}

/// One span of a piecewise arc/line path.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PathSpan {
    Arc(ArcComponent),
    Line(StraightComponent),
}

impl PathSpan {
    pub fn length(&self) -> f64 {
        match self {
            PathSpan::Arc(a) => a.length(),
            PathSpan::Line(l) => l.length(),
        }
    }

    pub fn pose_at(&self, s: f64) -> Pose2D {
        match self {
            PathSpan::Arc(a) => a.pose_at(s),
            PathSpan::Line(l) => l.pose_at(s),
        }
    }

    pub fn start_pose(&self) -> Pose2D {
        self.pose_at(0.0)
    }

    pub fn end_pose(&self) -> Pose2D {
        self.pose_at(self.length())
    }

    /// The span re-expressed in the frame given by `frame` (local -> global).
    pub fn transformed(&self, frame: &Pose2D) -> PathSpan {
        match self {
            PathSpan::Arc(a) => PathSpan::Arc(ArcComponent {
                center: frame.to_global_frame(a.center),
                radius: a.radius,
                start_angle: normalize_angle(a.start_angle + frame.theta),
                sweep: a.sweep,
            }),
            PathSpan::Line(l) => PathSpan::Line(StraightComponent {
                from: frame.to_global_frame(l.from),
                to: frame.to_global_frame(l.to),
            }),
        }
    }
}

/// The four curve-straight-curve words, in tie-break order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CscWord {
    Lsl,
    Rsr,
    Lsr,
    Rsl,
}

impl CscWord {
    pub const ALL: [CscWord; 4] = [CscWord::Lsl, CscWord::Rsr, CscWord::Lsr, CscWord::Rsl];

    /// Turn directions of the two arcs: +1 left (CCW), -1 right (CW).
    fn turns(self) -> (f64, f64) {
        match self {
            CscWord::Lsl => (1.0, 1.0),
            CscWord::Rsr => (-1.0, -1.0),
            CscWord::Lsr => (1.0, -1.0),
            CscWord::Rsl => (-1.0, 1.0),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            CscWord::Lsl => "LSL",
            CscWord::Rsr => "RSR",
            CscWord::Lsr => "LSR",
            CscWord::Rsl => "RSL",
        }
    }
}

/// Which components of a [`CscPlan`] fall below [`EPSILON_LEN`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct DegenerateFlags {
    pub first_arc: bool,
    pub straight: bool,
    pub second_arc: bool,
}

/// A planned curve-straight-curve path: minimum-radius arc, straight,
/// minimum-radius arc. Components shorter than [`EPSILON_LEN`] are flagged
/// degenerate and are skipped when sampling.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CscPlan {
    pub word: CscWord,
    pub first_arc: ArcComponent,
    pub straight: StraightComponent,
    pub second_arc: ArcComponent,
    pub degenerate: DegenerateFlags,
}

impl CscPlan {
    pub fn length(&self) -> f64 {
        self.first_arc.length() + self.straight.length() + self.second_arc.length()
    }

    pub fn start_pose(&self) -> Pose2D {
        self.first_arc.start_pose()
    }

    pub fn end_pose(&self) -> Pose2D {
        self.second_arc.end_pose()
    }

    pub fn components(&self) -> [PathSpan; 3] {
        [
            PathSpan::Arc(self.first_arc),
            PathSpan::Line(self.straight),
            PathSpan::Arc(self.second_arc),
        ]
    }

    fn component_degenerate(&self, idx: usize) -> bool {
        match idx {
            0 => self.degenerate.first_arc,
            1 => self.degenerate.straight,
            _ => self.degenerate.second_arc,
        }
    }

    /// Pose after traversing arc length `s` along the plan.
    pub fn pose_at(&self, s: f64) -> Pose2D {
        let comps = self.components();
        let mut remaining = s.max(0.0);
        for (i, comp) in comps.iter().enumerate() {
            let len = comp.length();
            if remaining <= len || i == comps.len() - 1 {
                return comp.pose_at(remaining.min(len));
            }
            remaining -= len;
        }
        self.end_pose()
    }
}

/// Center of the turning circle touching `pose` for the given turn sign.
fn turn_center(pose: &Pose2D, turn: f64, radius: f64) -> Vec2 {
    pose.position() + pose.heading_vec().perp_left() * (turn * radius)
}

/// Position angle of `pose`'s location on its own turning circle. Derived
/// from the heading directly so it is exact.
fn pose_angle_on_circle(pose: &Pose2D, turn: f64) -> f64 {
    pose.theta - turn * FRAC_PI_2
}

/// Sweeps within this of a full turn collapse to zero: they arise from
/// roundoff in angle differences of coincident poses, not from an intended
/// full circle.
const ANGLE_SNAP: f64 = 1e-9;

/// Signed sweep from position angle `from` to `to` in the direction `turn`.
fn sweep_towards(from: f64, to: f64, turn: f64) -> f64 {
    let mag = mod_tau(if turn > 0.0 { to - from } else { from - to });
    let mag = if mag > TAU - ANGLE_SNAP { 0.0 } else { mag };
    turn * mag
}

fn flag(len: f64) -> bool {
    len < EPSILON_LEN
}

/// Builds one specific CSC word, if feasible for the given poses and radius.
pub fn dubins_csc_word(
    start: &Pose2D,
    goal: &Pose2D,
    r_min: f64,
    word: CscWord,
) -> Option<CscPlan> {
    assert!(r_min > 0.0, "r_min must be positive");
    let (t1, t2) = word.turns();
    let c1 = turn_center(start, t1, r_min);
    let c2 = turn_center(goal, t2, r_min);
    let delta = c2 - c1;
    let d = delta.norm();

    let a_start = pose_angle_on_circle(start, t1);
    let a_goal = pose_angle_on_circle(goal, t2);

    // Tangent position angles on the two circles.
    let (a_t1, a_t2) = if t1 == t2 {
        if d < CENTER_EPS {
            // Coincident circles: the whole word collapses to one arc.
            let sweep = sweep_towards(a_start, a_goal, t1);
            let first_arc = ArcComponent {
                center: c1,
                radius: r_min,
                start_angle: a_start,
                sweep,
            };
            let joint = first_arc.end_pose().position();
            let straight = StraightComponent {
                from: joint,
                to: goal.position(),
            };
            let second_arc = ArcComponent {
                center: c2,
                radius: r_min,
                start_angle: a_goal,
                sweep: t2 * 0.0,
            };
            let degenerate = DegenerateFlags {
                first_arc: flag(first_arc.length()),
                straight: flag(straight.length()),
                second_arc: true,
            };
            return Some(CscPlan {
                word,
                first_arc,
                straight,
                second_arc,
                degenerate,
            });
        }
        // Outer tangent, parallel to the center line: the tangent point sits a
        // quarter turn off the center-line direction on both circles.
        let a = delta.angle() - t1 * FRAC_PI_2;
        (a, a)
    } else {
        // Inner tangent: feasible only when the circles do not overlap.
        let d_sq = d * d - 4.0 * r_min * r_min;
        let tangent_len_sq = if d_sq < 0.0 {
            if d >= 2.0 * r_min - GRAZE_EPS {
                0.0
            } else {
                return None;
            }
        } else {
            d_sq
        };
        let tangent_len = tangent_len_sq.sqrt();
        let psi = delta.angle() + t1 * (2.0 * r_min).atan2(tangent_len);
        (psi - t1 * FRAC_PI_2, psi - t2 * FRAC_PI_2)
    };

    let sweep1 = sweep_towards(a_start, a_t1, t1);
    let sweep2 = sweep_towards(a_t2, a_goal, t2);
    let first_arc = ArcComponent {
        center: c1,
        radius: r_min,
        start_angle: a_start,
        sweep: sweep1,
    };
    let second_arc = ArcComponent {
        center: c2,
        radius: r_min,
        start_angle: a_t2,
        sweep: sweep2,
    };
    let straight = StraightComponent {
        from: first_arc.end_pose().position(),
        to: second_arc.start_pose().position(),
    };
    let degenerate = DegenerateFlags {
        first_arc: flag(first_arc.length()),
        straight: flag(straight.length()),
        second_arc: flag(second_arc.length()),
    };
    Some(CscPlan {
        word,
        first_arc,
        straight,
        second_arc,
        degenerate,
    })
}

/// Shortest curve-straight-curve path from `start` to `goal` with minimum
/// turning radius `r_min`, chosen among the words LSL, RSR, LSR, RSL.
/// Length ties keep the earlier word in that order.
pub fn dubins_csc(start: &Pose2D, goal: &Pose2D, r_min: f64) -> Result<CscPlan, GeometryError> {
    let mut best: Option<CscPlan> = None;
    for word in CscWord::ALL {
        if let Some(plan) = dubins_csc_word(start, goal, r_min, word) {
            let better = match &best {
                Some(b) => plan.length() < b.length(),
                None => true,
            };
            if better {
                best = Some(plan);
            }
        }
    }
    best.ok_or(GeometryError::NoCscSolution)
}

/// Samples a plan into poses no farther than `spacing` apart along arc
/// length. The first and last samples equal the plan endpoints; degenerate
/// components contribute no interior samples.
pub fn sample_polyline(plan: &CscPlan, spacing: f64) -> Vec<Pose2D> {
    assert!(spacing > 0.0, "spacing must be positive");
    let mut out = vec![plan.start_pose()];
    for (i, comp) in plan.components().iter().enumerate() {
        if plan.component_degenerate(i) {
            continue;
        }
        let len = comp.length();
        let n = (len / spacing).ceil().max(1.0) as usize;
        for k in 1..=n {
            out.push(comp.pose_at(len * k as f64 / n as f64));
        }
    }
    let end = plan.end_pose();
    match out.last_mut() {
        Some(last) if last.position().distance(end.position()) <= 1e-12 => *last = end,
        _ => out.push(end),
    }
    out
}

/// Samples a span chain into poses no farther than `spacing` apart,
/// including both endpoints of every span exactly once.
pub fn sample_spans(spans: &[PathSpan], spacing: f64) -> Vec<Pose2D> {
    assert!(spacing > 0.0, "spacing must be positive");
    let mut out: Vec<Pose2D> = Vec::new();
    for span in spans {
        let len = span.length();
        if out.is_empty() {
            out.push(span.start_pose());
        }
        if len <= 0.0 {
            continue;
        }
        let n = (len / spacing).ceil().max(1.0) as usize;
        for k in 1..=n {
            out.push(span.pose_at(len * k as f64 / n as f64));
        }
    }
    out
}
