//! Randomized scenario generation around a fixed base constellation.
//!
//! The ego approaches the intersection from the west; an oncoming car comes
//! from the east, a second car from the north, and a bicycle from the south,
//! each on its own right-hand lane. Speeds and longitudinal accelerations
//! are drawn for every participant. Non-ego participants are additionally
//! jittered along their approach direction and in heading; the ego pose
//! itself stays fixed so every grid shares the same viewpoint.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use super::hypothesis::{generate_hypotheses, HypothesisConfig};
use super::layout::RoadLayout;
use super::{ParticipantKind, Pose, Scenario, TrafficParticipant};

pub const KMH_TO_MS: f64 = 1.0 / 3.6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    /// Speed range, km/h, uniform.
    pub speed_kmh: (f64, f64),
    /// Longitudinal acceleration range, m/s², uniform.
    pub longitudinal_accel: (f64, f64),
    /// Total width of the along-lane position jitter, meters.
    pub position_jitter: f64,
    /// Total width of the heading jitter, radians.
    pub orientation_jitter: f64,
    /// (length, width) footprints, meters.
    pub car_footprint: (f64, f64),
    pub bicycle_footprint: (f64, f64),
    pub hypothesis: HypothesisConfig,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            speed_kmh: (10.0, 35.0),
            longitudinal_accel: (0.0, 4.0),
            position_jitter: 10.0,
            orientation_jitter: 60f64.to_radians(),
            car_footprint: (4.0, 1.8),
            bicycle_footprint: (1.8, 0.6),
            hypothesis: HypothesisConfig::default(),
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> crate::Result<()> {
        for (name, (lo, hi)) in
            [("speed_kmh", self.speed_kmh), ("longitudinal_accel", self.longitudinal_accel)]
        {
            if !(lo.is_finite() && hi.is_finite() && lo <= hi && lo >= 0.0) {
                return Err(crate::Error::InvalidConfig(format!(
                    "{name} range ({lo}, {hi}) must be finite, ordered, non-negative"
                )));
            }
        }
        if !(self.position_jitter >= 0.0) || !(self.orientation_jitter >= 0.0) {
            return Err(crate::Error::InvalidConfig("jitter widths must be non-negative".into()));
        }
        self.hypothesis.validate()
    }
}

/// Base pose of one constellation slot, before jitter.
struct Slot {
    kind: ParticipantKind,
    base: Pose,
}

/// Fixed slots: ego from the west, car from the east, car from the north,
/// bicycle from the south. Lane centers sit half a lane width to the right
/// of each travel direction; the bicycle keeps further right within its
/// lane, as bicycles do.
fn constellation(road: &RoadLayout) -> [Slot; 4] {
    use std::f64::consts::{FRAC_PI_2, PI};
    let off = road.lane_offset();
    [
        Slot { kind: ParticipantKind::Ego, base: Pose::new(-8.0, -off, 0.0) },
        Slot { kind: ParticipantKind::Car, base: Pose::new(7.0, off, PI) },
        Slot { kind: ParticipantKind::Car, base: Pose::new(-off, 7.0, 1.5 * PI) },
        Slot { kind: ParticipantKind::Bicycle, base: Pose::new(off + 0.35, -7.0, FRAC_PI_2) },
    ]
}

pub fn sample_scenario(template: &RoadLayout, rng_seed: u64) -> crate::Result<Scenario> {
    sample_scenario_with(template, rng_seed, &SamplerConfig::default())
}

/// Draw one scenario. The draw order per participant is fixed (speed,
/// acceleration, then for non-ego slots position offset and heading offset),
/// so a seed pins the scenario bytes regardless of environment.
pub fn sample_scenario_with(
    template: &RoadLayout,
    rng_seed: u64,
    config: &SamplerConfig,
) -> crate::Result<Scenario> {
    config.validate()?;
    let mut rng = ChaCha12Rng::seed_from_u64(rng_seed);
    let (speed_lo, speed_hi) = config.speed_kmh;
    let (acc_lo, acc_hi) = config.longitudinal_accel;

    let mut participants = Vec::with_capacity(4);
    for (slot_index, slot) in constellation(template).into_iter().enumerate() {
        let speed = rng.random_range(speed_lo..=speed_hi) * KMH_TO_MS;
        let a_x = rng.random_range(acc_lo..=acc_hi);
        let pose = if slot.kind == ParticipantKind::Ego {
            slot.base
        } else {
            let half_pos = config.position_jitter / 2.0;
            let half_ang = config.orientation_jitter / 2.0;
            let along = rng.random_range(-half_pos..=half_pos);
            let dpsi = rng.random_range(-half_ang..=half_ang);
            Pose::new(
                slot.base.x + along * slot.base.psi.cos(),
                slot.base.y + along * slot.base.psi.sin(),
                slot.base.psi + dpsi,
            )
        };
        let footprint = match slot.kind {
            ParticipantKind::Bicycle => config.bicycle_footprint,
            _ => config.car_footprint,
        };
        participants.push(TrafficParticipant {
            id: slot_index + 1,
            kind: slot.kind,
            pose,
            velocity: speed,
            accel: (a_x, 0.0),
            footprint,
        });
    }

    let mut hypotheses = Vec::with_capacity(participants.len());
    for p in &participants {
        hypotheses.push(generate_hypotheses(p, template, &config.hypothesis)?);
    }
    let scenario =
        Scenario { road: template.clone(), participants, hypotheses, rng_seed };
    scenario.validate()?;
    Ok(scenario)
}
