//! Simulated on-board sensing: neighbor detection within a field-of-view
//! cone and range, body-frame relative quantities, lane association, and
//! optional Gaussian measurement noise.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::dynamics::VehicleState;
use crate::geometry::{normalize_angle, Vec2};
use crate::VehicleId;

/// Sensor parameters. `fov` is the full cone angle centered on the heading.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SensorConfig {
    pub fov: f64,
    pub range: f64,
    pub noise_sigma_pos: f64,
    pub noise_sigma_vel: f64,
}

impl Default for SensorConfig {
    fn default() -> Self {
        SensorConfig {
            fov: std::f64::consts::TAU,
            range: 100.0,
            noise_sigma_pos: 0.0,
            noise_sigma_vel: 0.0,
        }
    }
}

impl SensorConfig {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.fov > 0.0 && self.fov <= std::f64::consts::TAU) {
            return Err("fov must be in (0, 2*pi]".into());
        }
        if !(self.range > 0.0) {
            return Err("range must be > 0".into());
        }
        if self.noise_sigma_pos < 0.0 || self.noise_sigma_vel < 0.0 {
            return Err("noise sigmas must be >= 0".into());
        }
        Ok(())
    }
}

/// One detected neighbor, in the ego body frame (+x along the ego heading).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NeighborMeasurement {
    pub vehicle_id: VehicleId,
    pub rel_position: Vec2,
    pub rel_velocity: Vec2,
    pub distance: f64,
    /// Lane association of the neighbor (road-truth), if it is on a road.
    pub lane: Option<u32>,
}

/// Sensor output for one ego vehicle at one instant, neighbors sorted by
/// ascending distance (ties by vehicle id).
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PerceptionData {
    pub ego_id: VehicleId,
    pub timestamp: f64,
    pub neighbors: Vec<NeighborMeasurement>,
}

impl PerceptionData {
    pub fn empty(ego_id: VehicleId, timestamp: f64) -> Self {
        PerceptionData {
            ego_id,
            timestamp,
            neighbors: Vec::new(),
        }
    }
}

/// A candidate vehicle visible to the sensor.
#[derive(Debug, Clone, Copy)]
pub struct SensedVehicle {
    pub id: VehicleId,
    pub state: VehicleState,
    pub lane: Option<u32>,
}

/// Detects all `others` within range and inside the field-of-view cone and
/// expresses them in the ego body frame. Parked vehicles must already be
/// excluded from `others` by the caller.
pub fn sense(
    ego_id: VehicleId,
    ego: &VehicleState,
    others: &[SensedVehicle],
    cfg: &SensorConfig,
    timestamp: f64,
) -> PerceptionData {
    let ego_vel = Vec2::from_angle(ego.theta) * ego.v;
    let mut neighbors = Vec::new();
    for other in others {
        if other.id == ego_id {
            continue;
        }
        let disp = other.state.position() - ego.position();
        let rel_position = disp.rotated(-ego.theta);
        // The stored distance must equal the relative-position norm exactly.
        let distance = rel_position.norm();
        if distance > cfg.range {
            continue;
        }
        let bearing = normalize_angle(disp.angle() - ego.theta);
        if bearing.abs() > cfg.fov / 2.0 {
            continue;
        }
        let other_vel = Vec2::from_angle(other.state.theta) * other.state.v;
        let rel_velocity = (other_vel - ego_vel).rotated(-ego.theta);
        neighbors.push(NeighborMeasurement {
            vehicle_id: other.id,
            rel_position,
            rel_velocity,
            distance,
            lane: other.lane,
        });
    }
    neighbors.sort_by(|a, b| {
        a.distance
            .total_cmp(&b.distance)
            .then(a.vehicle_id.cmp(&b.vehicle_id))
    });
    PerceptionData {
        ego_id,
        timestamp,
        neighbors,
    }
}

/// Adds i.i.d. zero-mean Gaussian noise per body-frame component and
/// recomputes the distance from the noisy relative position, keeping the
/// triple self-consistent. Four standard normals are drawn per neighbor
/// regardless of the sigmas, so the stream position never depends on the
/// configuration; sigma zero is the identity.
pub fn add_noise<R: Rng>(data: &PerceptionData, rng: &mut R, cfg: &SensorConfig) -> PerceptionData {
    let mut out = data.clone();
    for n in &mut out.neighbors {
        let zp1: f64 = rng.sample(StandardNormal);
        let zp2: f64 = rng.sample(StandardNormal);
        let zv1: f64 = rng.sample(StandardNormal);
        let zv2: f64 = rng.sample(StandardNormal);
        n.rel_position = n.rel_position + Vec2::new(zp1, zp2) * cfg.noise_sigma_pos;
        n.rel_velocity = n.rel_velocity + Vec2::new(zv1, zv2) * cfg.noise_sigma_vel;
        n.distance = n.rel_position.norm();
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    fn v(id: u64, x: f64, y: f64, theta: f64, speed: f64) -> SensedVehicle {
        SensedVehicle {
            id: VehicleId(id),
            state: VehicleState::new(x, y, theta, speed),
            lane: Some(1),
        }
    }

    #[test]
    fn same_velocity_neighbor_ahead() {
        let ego = VehicleState::new(0.0, 0.0, 0.0, 10.0);
        let cfg = SensorConfig {
            fov: PI,
            range: 50.0,
            ..Default::default()
        };
        let out = sense(VehicleId(0), &ego, &[v(1, 10.0, 0.0, 0.0, 10.0)], &cfg, 0.0);
        assert_eq!(out.neighbors.len(), 1);
        let n = &out.neighbors[0];
        assert_abs_diff_eq!(n.rel_position.x, 10.0, epsilon = 1e-12);
        assert_abs_diff_eq!(n.rel_position.y, 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(n.rel_velocity.norm(), 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(n.distance, 10.0, epsilon = 1e-12);
    }

    #[test]
    fn behind_the_cone_is_excluded() {
        let ego = VehicleState::new(0.0, 0.0, 0.0, 10.0);
        let cfg = SensorConfig {
            fov: PI,
            range: 50.0,
            ..Default::default()
        };
        let out = sense(VehicleId(0), &ego, &[v(1, -10.0, 0.0, 0.0, 10.0)], &cfg, 0.0);
        assert!(out.neighbors.is_empty());
    }

    #[test]
    fn out_of_range_is_excluded_and_self_is_skipped() {
        let ego = VehicleState::new(0.0, 0.0, 0.0, 10.0);
        let cfg = SensorConfig {
            fov: 2.0 * PI,
            range: 50.0,
            ..Default::default()
        };
        let out = sense(
            VehicleId(7),
            &ego,
            &[v(1, 51.0, 0.0, 0.0, 0.0), v(7, 0.0, 0.0, 0.0, 10.0)],
            &cfg,
            0.0,
        );
        assert!(out.neighbors.is_empty());
    }

    #[test]
    fn ordering_is_by_distance_then_id() {
        let ego = VehicleState::new(0.0, 0.0, 0.0, 0.0);
        let cfg = SensorConfig::default();
        let out = sense(
            VehicleId(0),
            &ego,
            &[
                v(5, 0.0, 10.0, 0.0, 0.0),
                v(2, 10.0, 0.0, 0.0, 0.0),
                v(9, 5.0, 0.0, 0.0, 0.0),
            ],
            &cfg,
            0.0,
        );
        let ids: Vec<u64> = out.neighbors.iter().map(|n| n.vehicle_id.0).collect();
        assert_eq!(ids, [9, 2, 5]);
    }

    #[test]
    fn random_scenes_match_brute_force_filter() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..500 {
            let ego = VehicleState::new(
                rng.random_range(-50.0..50.0),
                rng.random_range(-50.0..50.0),
                rng.random_range(-PI..PI),
                rng.random_range(0.0..20.0),
            );
            let cfg = SensorConfig {
                fov: rng.random_range(0.3..2.0 * PI),
                range: rng.random_range(5.0..80.0),
                ..Default::default()
            };
            let others: Vec<SensedVehicle> = (1..=12)
                .map(|id| {
                    v(
                        id,
                        rng.random_range(-100.0..100.0),
                        rng.random_range(-100.0..100.0),
                        rng.random_range(-PI..PI),
                        rng.random_range(0.0..20.0),
                    )
                })
                .collect();
            let out = sense(VehicleId(0), &ego, &others, &cfg, 0.0);
            let got: Vec<u64> = out.neighbors.iter().map(|n| n.vehicle_id.0).collect();

            // Independent predicate evaluation.
            let mut expected: Vec<u64> = others
                .iter()
                .filter(|o| {
                    let dx = o.state.x - ego.x;
                    let dy = o.state.y - ego.y;
                    let dist = (dx * dx + dy * dy).sqrt();
                    let bearing = normalize_angle(dy.atan2(dx) - ego.theta);
                    dist <= cfg.range && bearing.abs() <= cfg.fov / 2.0
                })
                .map(|o| o.id.0)
                .collect();
            let mut got_sorted = got.clone();
            got_sorted.sort_unstable();
            expected.sort_unstable();
            assert_eq!(got_sorted, expected);

            // Body-frame round trip recovers global positions.
            for n in &out.neighbors {
                let global = ego.pose().to_global_frame(n.rel_position);
                let truth = others
                    .iter()
                    .find(|o| o.id == n.vehicle_id)
                    .unwrap()
                    .state
                    .position();
                assert!(global.distance(truth) <= 1e-9);
                assert!(n.distance <= cfg.range);
            }
        }
    }

    #[test]
    fn zero_sigma_noise_is_identity() {
        let ego = VehicleState::new(0.0, 0.0, 0.3, 5.0);
        let cfg = SensorConfig::default();
        let data = sense(VehicleId(0), &ego, &[v(1, 4.0, 2.0, 0.1, 6.0)], &cfg, 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let noisy = add_noise(&data, &mut rng, &cfg);
        assert_eq!(noisy, data);
    }

    #[test]
    fn fixed_seed_noise_is_reproducible() {
        let ego = VehicleState::new(0.0, 0.0, 0.0, 5.0);
        let cfg = SensorConfig {
            noise_sigma_pos: 0.1,
            noise_sigma_vel: 0.05,
            ..Default::default()
        };
        let data = sense(
            VehicleId(0),
            &ego,
            &[v(1, 4.0, 2.0, 0.1, 6.0), v(2, -3.0, 1.0, 0.9, 2.0)],
            &cfg,
            1.0,
        );
        let a = add_noise(&data, &mut ChaCha8Rng::seed_from_u64(9), &cfg);
        let b = add_noise(&data, &mut ChaCha8Rng::seed_from_u64(9), &cfg);
        assert_eq!(a, b);
        assert_ne!(a, data);
    }

    #[test]
    fn noise_statistics_match_configured_sigma() {
        let ego = VehicleState::new(0.0, 0.0, 0.0, 0.0);
        let cfg = SensorConfig {
            noise_sigma_pos: 0.1,
            ..Default::default()
        };
        let data = sense(VehicleId(0), &ego, &[v(1, 10.0, 0.0, 0.0, 0.0)], &cfg, 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let n = 100_000;
        let mut sum = 0.0;
        let mut sum_sq = 0.0;
        for _ in 0..n {
            let noisy = add_noise(&data, &mut rng, &cfg);
            let e = noisy.neighbors[0].rel_position.x - 10.0;
            sum += e;
            sum_sq += e * e;
        }
        let mean = sum / n as f64;
        let std = (sum_sq / n as f64 - mean * mean).sqrt();
        assert!(mean.abs() < 3.0 * 0.1 / (n as f64).sqrt(), "mean {mean}");
        assert!((std - 0.1).abs() < 0.005, "std {std}");
    }
}
