//! Maneuver templates and trajectory rollouts.
//!
//! Each participant gets a fixed-size set of hypotheses by cycling through
//! the maneuvers its approach arm permits, in canonical order. When more
//! hypotheses are requested than maneuvers exist, the cycle restarts with a
//! milder variant: variant k scales turn rate (turns), speed (straight), or
//! deceleration (braking) relative to the base template. Rollouts are
//! closed-form unicycle arcs, so they carry no integration error.

use serde::{Deserialize, Serialize};

use super::layout::{Maneuver, RoadLayout};
use super::{ParticipantKind, TimedPose, TrafficParticipant, TrajectoryHypothesis};
use crate::error::{Error, Result};

pub const TAU: f64 = 2.0 * std::f64::consts::PI;

/// Wrap an angle to [0, 2π).
pub fn wrap_angle_tau(psi: f64) -> f64 {
    let r = psi.rem_euclid(TAU);
    if r >= TAU { 0.0 } else { r }
}

/// Wrap an angle difference to (-π, π].
pub fn wrap_angle_pi(d: f64) -> f64 {
    let r = (d + std::f64::consts::PI).rem_euclid(TAU) - std::f64::consts::PI;
    if r <= -std::f64::consts::PI { r + TAU } else { r }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HypothesisConfig {
    /// Number of hypotheses per participant.
    pub count: usize,
    /// Rollout horizon, seconds.
    pub horizon: f64,
    /// Pose sampling step; must divide the horizon.
    pub dt: f64,
    /// Base turn radius for turn templates, meters.
    pub turn_radius: f64,
    /// Base deceleration for the braking template, m/s².
    pub brake_decel: f64,
    /// Hypothesis probabilities; uniform when absent. Length must equal
    /// `count` and the values must sum to 1.
    pub priors: Option<Vec<f64>>,
}

impl Default for HypothesisConfig {
    fn default() -> Self {
        HypothesisConfig {
            count: 3,
            horizon: 1.0,
            dt: 0.1,
            turn_radius: 6.0,
            brake_decel: 3.0,
            priors: None,
        }
    }
}

impl HypothesisConfig {
    pub fn validate(&self) -> Result<()> {
        if self.count == 0 {
            return Err(Error::InvalidConfig("hypothesis count must be at least 1".into()));
        }
        if !(self.horizon > 0.0) || !(self.dt > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "horizon and dt must be positive, got {} and {}",
                self.horizon, self.dt
            )));
        }
        let steps = (self.horizon / self.dt).round();
        if steps < 1.0 || (steps * self.dt - self.horizon).abs() > 1e-9 {
            return Err(Error::InvalidConfig(format!(
                "dt {} does not divide horizon {}",
                self.dt, self.horizon
            )));
        }
        if !(self.turn_radius > 0.0) || !(self.brake_decel > 0.0) {
            return Err(Error::InvalidConfig(
                "turn radius and brake deceleration must be positive".into(),
            ));
        }
        if let Some(priors) = &self.priors {
            if priors.len() != self.count {
                return Err(Error::InvalidConfig(format!(
                    "{} priors for {} hypotheses",
                    priors.len(),
                    self.count
                )));
            }
            let mut total = 0.0;
            for &p in priors {
                if !(0.0..=1.0).contains(&p) {
                    return Err(Error::InvalidProbability(p));
                }
                total += p;
            }
            if (total - 1.0).abs() > 1e-9 {
                return Err(Error::InvalidConfig(format!("priors sum to {total}, expected 1")));
            }
        }
        Ok(())
    }

    pub fn steps(&self) -> usize {
        (self.horizon / self.dt).round() as usize
    }
}

/// Generate the hypothesis set for one participant.
///
/// The s-th hypothesis uses maneuver `permitted[s % permitted.len()]` at
/// variant `s / permitted.len()`; callers may rely on that ordering.
/// Off-road participants only get constant-velocity straight templates, and
/// static obstacles stay put in every hypothesis.
pub fn generate_hypotheses(
    participant: &TrafficParticipant,
    road: &RoadLayout,
    config: &HypothesisConfig,
) -> Result<Vec<TrajectoryHypothesis>> {
    config.validate()?;
    participant.validate()?;
    let pose = participant.pose;
    let maneuvers: Vec<Maneuver> = if participant.kind == ParticipantKind::Static {
        vec![Maneuver::BrakeToStop]
    } else if !road.on_road(pose.x, pose.y) {
        vec![Maneuver::Straight]
    } else {
        road.permitted_maneuvers(road.arm_of_heading(pose.psi))
    };
    debug_assert!(!maneuvers.is_empty());

    let uniform = 1.0 / config.count as f64;
    let mut out = Vec::with_capacity(config.count);
    for s in 0..config.count {
        let maneuver = maneuvers[s % maneuvers.len()];
        let variant = s / maneuvers.len();
        let speed = if participant.kind == ParticipantKind::Static {
            0.0
        } else {
            participant.velocity
        };
        let poses = rollout(pose.x, pose.y, pose.psi, speed, maneuver, variant, config);
        let probability = match &config.priors {
            Some(priors) => priors[s],
            None => uniform,
        };
        out.push(TrajectoryHypothesis { participant: participant.id, poses, probability });
    }
    Ok(out)
}

/// Closed-form rollout of one maneuver template at a given variant level.
fn rollout(
    x0: f64,
    y0: f64,
    psi0: f64,
    speed: f64,
    maneuver: Maneuver,
    variant: usize,
    config: &HypothesisConfig,
) -> Vec<TimedPose> {
    let scale = 1.0 / (1.0 + variant as f64);
    let steps = config.steps();
    let mut poses = Vec::with_capacity(steps + 1);
    for i in 0..=steps {
        let t = i as f64 * config.dt;
        let pose = match maneuver {
            Maneuver::Straight => {
                let v = speed * scale;
                TimedPose { t, x: x0 + v * t * psi0.cos(), y: y0 + v * t * psi0.sin(), psi: psi0 }
            }
            Maneuver::LeftTurn | Maneuver::RightTurn => {
                let sign = if maneuver == Maneuver::LeftTurn { 1.0 } else { -1.0 };
                let omega = sign * speed / config.turn_radius * scale;
                if omega.abs() < 1e-12 {
                    TimedPose { t, x: x0, y: y0, psi: psi0 }
                } else {
                    let psi = psi0 + omega * t;
                    // Circular arc: radius speed/|omega| around the turn center.
                    let r = speed / omega;
                    TimedPose {
                        t,
                        x: x0 + r * (psi.sin() - psi0.sin()),
                        y: y0 - r * (psi.cos() - psi0.cos()),
                        psi,
                    }
                }
            }
            Maneuver::BrakeToStop => {
                let decel = config.brake_decel * (1.0 + variant as f64);
                let t_stop = speed / decel;
                let s = if t <= t_stop {
                    speed * t - 0.5 * decel * t * t
                } else {
                    speed * speed / (2.0 * decel)
                };
                TimedPose { t, x: x0 + s * psi0.cos(), y: y0 + s * psi0.sin(), psi: psi0 }
            }
        };
        poses.push(pose);
    }
    poses
}

/// Pose on a hypothesis at time `t`, linearly interpolated between samples.
/// Heading interpolates along the shortest arc. `t` may overshoot the
/// sampled span by at most 1e-9; anything further is an error.
pub fn pose_at(hypothesis: &TrajectoryHypothesis, t: f64) -> Result<TimedPose> {
    let poses = &hypothesis.poses;
    debug_assert!(!poses.is_empty());
    let (t_min, t_max) = hypothesis.t_span();
    if t < t_min - 1e-9 || t > t_max + 1e-9 {
        return Err(Error::TimeOutOfRange { t_pred: t, t_min, t_max });
    }
    let t = t.clamp(t_min, t_max);
    // Index of the first sample with time >= t; poses are strictly increasing.
    let hi = poses.partition_point(|p| p.t < t);
    if hi == 0 {
        return Ok(poses[0]);
    }
    if hi == poses.len() {
        return Ok(poses[poses.len() - 1]);
    }
    let (a, b) = (poses[hi - 1], poses[hi]);
    let alpha = (t - a.t) / (b.t - a.t);
    Ok(TimedPose {
        t,
        x: a.x + alpha * (b.x - a.x),
        y: a.y + alpha * (b.y - a.y),
        psi: a.psi + alpha * wrap_angle_pi(b.psi - a.psi),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenario::Pose;

    fn car(x: f64, y: f64, psi: f64, v: f64) -> TrafficParticipant {
        TrafficParticipant {
            id: 7,
            kind: ParticipantKind::Car,
            pose: Pose::new(x, y, psi),
            velocity: v,
            accel: (0.0, 0.0),
            footprint: (4.0, 1.8),
        }
    }

    #[test]
    fn straight_advances_speed_times_horizon() {
        let road = RoadLayout::four_way_open();
        let cfg = HypothesisConfig { count: 1, ..Default::default() };
        let p = car(-8.0, -1.75, 0.0, 10.0);
        let hyps = generate_hypotheses(&p, &road, &cfg).unwrap();
        assert_eq!(hyps.len(), 1);
        let last = *hyps[0].poses.last().unwrap();
        assert!((last.x - 2.0).abs() < 1e-9, "x was {}", last.x);
        assert!((last.y - -1.75).abs() < 1e-9);
        assert_eq!(last.psi, 0.0);
        assert_eq!(hyps[0].poses.len(), 11);
        assert_eq!(hyps[0].probability, 1.0);
    }

    #[test]
    fn straight_respects_arbitrary_heading() {
        let road = RoadLayout::four_way_open();
        let cfg = HypothesisConfig { count: 1, ..Default::default() };
        // Off-road start so the template set is straight-only.
        let p = car(15.0, 15.0, 0.7, 8.0);
        let hyps = generate_hypotheses(&p, &road, &cfg).unwrap();
        let last = *hyps[0].poses.last().unwrap();
        assert!((last.x - (15.0 + 8.0 * 0.7f64.cos())).abs() < 1e-9);
        assert!((last.y - (15.0 + 8.0 * 0.7f64.sin())).abs() < 1e-9);
    }

    #[test]
    fn turns_stay_on_the_template_circle() {
        let road = RoadLayout::four_way_open();
        let cfg = HypothesisConfig { count: 3, ..Default::default() };
        let p = car(-8.0, -1.75, 0.0, 6.0);
        let hyps = generate_hypotheses(&p, &road, &cfg).unwrap();
        // Hypothesis 1 is the left turn: omega = v / R > 0.
        let left = &hyps[1];
        let omega = 6.0 / cfg.turn_radius;
        let center = (-8.0, -1.75 + cfg.turn_radius);
        for p in &left.poses {
            let r = ((p.x - center.0).powi(2) + (p.y - center.1).powi(2)).sqrt();
            assert!((r - cfg.turn_radius).abs() < 1e-9);
            assert!((p.psi - omega * p.t).abs() < 1e-12);
        }
        // Hypothesis 2 turns the other way.
        let right = &hyps[2];
        assert!(right.poses.last().unwrap().psi < 0.0);
        assert!((right.poses.last().unwrap().psi + omega).abs() < 1e-12);
    }

    #[test]
    fn braking_covers_the_stopping_distance() {
        let road = RoadLayout::four_way_open();
        let cfg =
            HypothesisConfig { count: 4, horizon: 4.0, dt: 0.25, ..Default::default() };
        let p = car(-8.0, -1.75, 0.0, 6.0);
        let hyps = generate_hypotheses(&p, &road, &cfg).unwrap();
        let brake = &hyps[3];
        // Stops after v^2 / (2a) = 6 m and never moves again.
        let stop_dist = 6.0 * 6.0 / (2.0 * cfg.brake_decel);
        let last = brake.poses.last().unwrap();
        assert!((last.x - (-8.0 + stop_dist)).abs() < 1e-9);
        let mut prev = f64::NEG_INFINITY;
        for p in &brake.poses {
            assert!(p.x >= prev - 1e-12);
            prev = p.x;
        }
        // Displacement while still rolling matches v t - a t^2 / 2.
        let at = brake.poses[2]; // t = 0.5 < t_stop = 2
        assert!((at.x - (-8.0 + 6.0 * 0.5 - 0.5 * 3.0 * 0.25)).abs() < 1e-9);
    }

    #[test]
    fn extra_hypotheses_are_milder_variants() {
        let road = RoadLayout::four_way_open();
        let cfg = HypothesisConfig { count: 8, ..Default::default() };
        let p = car(-8.0, -1.75, 0.0, 6.0);
        let hyps = generate_hypotheses(&p, &road, &cfg).unwrap();
        // s = 5 is the left turn at variant 1: half the turn rate of s = 1.
        let base = hyps[1].poses.last().unwrap().psi;
        let mild = hyps[5].poses.last().unwrap().psi;
        assert!((mild - base / 2.0).abs() < 1e-12);
        // s = 4 is the straight at half speed.
        let full = hyps[0].poses.last().unwrap().x;
        let half = hyps[4].poses.last().unwrap().x;
        assert!((half - (-8.0 + (full - -8.0) / 2.0)).abs() < 1e-9);
        let total: f64 = hyps.iter().map(|h| h.probability).sum();
        assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn priors_are_honored_and_checked() {
        let road = RoadLayout::four_way_open();
        let cfg = HypothesisConfig {
            count: 2,
            priors: Some(vec![0.8, 0.2]),
            ..Default::default()
        };
        let p = car(-8.0, -1.75, 0.0, 6.0);
        let hyps = generate_hypotheses(&p, &road, &cfg).unwrap();
        assert_eq!(hyps[0].probability, 0.8);
        assert_eq!(hyps[1].probability, 0.2);

        let bad = HypothesisConfig { count: 2, priors: Some(vec![0.8, 0.3]), ..Default::default() };
        assert!(generate_hypotheses(&p, &road, &bad).is_err());
        let short = HypothesisConfig { count: 3, priors: Some(vec![1.0]), ..Default::default() };
        assert!(generate_hypotheses(&p, &road, &short).is_err());
    }

    #[test]
    fn static_participants_stay_put() {
        let road = RoadLayout::four_way_open();
        let cfg = HypothesisConfig { count: 3, ..Default::default() };
        let mut p = car(1.0, 1.0, 0.3, 5.0);
        p.kind = ParticipantKind::Static;
        for h in generate_hypotheses(&p, &road, &cfg).unwrap() {
            for tp in &h.poses {
                assert_eq!((tp.x, tp.y, tp.psi), (1.0, 1.0, 0.3));
            }
        }
    }

    #[test]
    fn zero_speed_turns_degenerate_to_rest() {
        let road = RoadLayout::four_way_open();
        let cfg = HypothesisConfig { count: 4, ..Default::default() };
        let p = car(-8.0, -1.75, 0.0, 0.0);
        for h in generate_hypotheses(&p, &road, &cfg).unwrap() {
            for tp in &h.poses {
                assert_eq!((tp.x, tp.y), (-8.0, -1.75));
            }
        }
    }

    #[test]
    fn dt_must_divide_horizon() {
        let cfg = HypothesisConfig { horizon: 1.0, dt: 0.3, ..Default::default() };
        assert!(cfg.validate().is_err());
        let ok = HypothesisConfig { horizon: 1.2, dt: 0.3, ..Default::default() };
        assert!(ok.validate().is_ok());
        assert_eq!(ok.steps(), 4);
    }

    #[test]
    fn pose_interpolation_is_linear() {
        let h = TrajectoryHypothesis {
            participant: 1,
            poses: vec![
                TimedPose { t: 0.0, x: 0.0, y: 0.0, psi: 0.0 },
                TimedPose { t: 1.0, x: 4.0, y: -2.0, psi: 0.5 },
            ],
            probability: 1.0,
        };
        let mid = pose_at(&h, 0.25).unwrap();
        assert_eq!((mid.x, mid.y), (1.0, -0.5));
        assert!((mid.psi - 0.125).abs() < 1e-12);
        assert_eq!(pose_at(&h, 0.0).unwrap().x, 0.0);
        assert_eq!(pose_at(&h, 1.0).unwrap().x, 4.0);
        assert!(matches!(pose_at(&h, 1.5), Err(Error::TimeOutOfRange { .. })));
        assert!(matches!(pose_at(&h, -0.5), Err(Error::TimeOutOfRange { .. })));
    }

    #[test]
    fn heading_interpolates_the_shortest_arc() {
        let h = TrajectoryHypothesis {
            participant: 1,
            poses: vec![
                TimedPose { t: 0.0, x: 0.0, y: 0.0, psi: 6.2 },
                TimedPose { t: 1.0, x: 0.0, y: 0.0, psi: 2.0 * std::f64::consts::PI + 0.1 },
            ],
            probability: 1.0,
        };
        // 6.2 to tau + 0.1 is a short hop across the wrap point, not a loop.
        let mid = pose_at(&h, 0.5).unwrap();
        let want = 6.2 + 0.5 * wrap_angle_pi(2.0 * std::f64::consts::PI + 0.1 - 6.2);
        assert!((mid.psi - want).abs() < 1e-12);
        assert!(wrap_angle_pi(2.0 * std::f64::consts::PI + 0.1 - 6.2) < 1.0);
    }

    #[test]
    fn angle_wrappers_cover_the_edges() {
        assert_eq!(wrap_angle_tau(0.0), 0.0);
        assert_eq!(wrap_angle_tau(TAU), 0.0);
        assert!((wrap_angle_tau(-0.1) - (TAU - 0.1)).abs() < 1e-12);
        assert!((wrap_angle_tau(TAU + 0.25) - 0.25).abs() < 1e-12);
        assert_eq!(wrap_angle_tau(-1e-300), 0.0);
        assert!((wrap_angle_pi(std::f64::consts::PI) - std::f64::consts::PI).abs() < 1e-15);
        assert!((wrap_angle_pi(-std::f64::consts::PI) - std::f64::consts::PI).abs() < 1e-15);
        assert!((wrap_angle_pi(3.0) - 3.0).abs() < 1e-15);
        assert!((wrap_angle_pi(TAU - 0.1) - -0.1).abs() < 1e-12);
    }
}
