//! Traffic scenarios: participants, multi-hypothesis trajectories,
//! rasterization into augmented grids, and ground-truth probability grids.
//!
//! Two frames are in play. Scenario state (participant poses, hypothesis
//! rollouts, lane markings) lives in a WORLD frame whose origin is the
//! intersection center. Grids live in the EGO frame: the ego heading is +x,
//! and the ego center of gravity sits at (2.5 m, 0 m). [`raster::EgoFrame`]
//! maps between the two; everything else is frame-agnostic geometry.

pub mod dataset;
pub mod hypothesis;
pub mod layout;
pub mod raster;
pub mod sampler;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
pub use layout::{Arm, LayoutKind, Maneuver, RoadLayout};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParticipantKind {
    Ego,
    Car,
    Bicycle,
    Static,
}

/// Planar pose. `psi` is the heading in radians, counterclockwise from +x.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub x: f64,
    pub y: f64,
    pub psi: f64,
}

impl Pose {
    pub fn new(x: f64, y: f64, psi: f64) -> Self {
        Pose { x, y, psi }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrafficParticipant {
    pub id: usize,
    pub kind: ParticipantKind,
    /// World-frame pose of the footprint center.
    pub pose: Pose,
    /// Speed along the heading, m/s.
    pub velocity: f64,
    /// Body-frame (longitudinal, lateral) acceleration, m/s².
    pub accel: (f64, f64),
    /// (length, width) of the oriented rectangle footprint, meters.
    pub footprint: (f64, f64),
}

impl TrafficParticipant {
    pub fn validate(&self) -> Result<()> {
        if !(self.footprint.0 > 0.0) || !(self.footprint.1 > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "participant {}: footprint must be positive, got {:?}",
                self.id, self.footprint
            )));
        }
        if !(self.velocity >= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "participant {}: velocity must be ≥ 0, got {}",
                self.id, self.velocity
            )));
        }
        Ok(())
    }
}

/// A pose sample on a hypothesis rollout.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimedPose {
    pub t: f64,
    pub x: f64,
    pub y: f64,
    pub psi: f64,
}

/// One candidate future motion of a participant, with its probability.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryHypothesis {
    /// Id of the participant this hypothesis belongs to.
    pub participant: usize,
    /// World-frame poses, strictly increasing in t.
    pub poses: Vec<TimedPose>,
    pub probability: f64,
}

impl TrajectoryHypothesis {
    pub fn validate(&self) -> Result<()> {
        if self.poses.is_empty() {
            return Err(Error::InvalidArgument("hypothesis with no poses".into()));
        }
        for w in self.poses.windows(2) {
            if !(w[1].t > w[0].t) {
                return Err(Error::InvalidArgument(format!(
                    "hypothesis poses not strictly increasing in t: {} then {}",
                    w[0].t, w[1].t
                )));
            }
        }
        if !(0.0..=1.0).contains(&self.probability) {
            return Err(Error::InvalidProbability(self.probability));
        }
        Ok(())
    }

    pub fn t_span(&self) -> (f64, f64) {
        (self.poses[0].t, self.poses[self.poses.len() - 1].t)
    }
}

/// A complete traffic scene: road, participants, and per-participant
/// hypothesis sets whose probabilities each sum to 1.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub road: RoadLayout,
    pub participants: Vec<TrafficParticipant>,
    /// Parallel to `participants`.
    pub hypotheses: Vec<Vec<TrajectoryHypothesis>>,
    pub rng_seed: u64,
}

impl Scenario {
    pub fn validate(&self) -> Result<()> {
        let egos = self
            .participants
            .iter()
            .filter(|p| p.kind == ParticipantKind::Ego)
            .count();
        if egos != 1 {
            return Err(Error::InvalidArgument(format!(
                "scenario must contain exactly one ego, found {egos}"
            )));
        }
        if self.hypotheses.len() != self.participants.len() {
            return Err(Error::InvalidArgument(format!(
                "{} hypothesis sets for {} participants",
                self.hypotheses.len(),
                self.participants.len()
            )));
        }
        let mut ids = std::collections::HashSet::new();
        for p in &self.participants {
            p.validate()?;
            if !ids.insert(p.id) {
                return Err(Error::InvalidArgument(format!("duplicate participant id {}", p.id)));
            }
        }
        for (p, hyps) in self.participants.iter().zip(&self.hypotheses) {
            if hyps.is_empty() {
                return Err(Error::InvalidArgument(format!(
                    "participant {} has no hypotheses",
                    p.id
                )));
            }
            let mut total = 0.0;
            for h in hyps {
                h.validate()?;
                if h.participant != p.id {
                    return Err(Error::InvalidArgument(format!(
                        "hypothesis for participant {} filed under {}",
                        h.participant, p.id
                    )));
                }
                total += h.probability;
            }
            if (total - 1.0).abs() > 1e-9 {
                return Err(Error::InvalidArgument(format!(
                    "participant {} hypothesis probabilities sum to {total}, expected 1",
                    p.id
                )));
            }
        }
        Ok(())
    }

    pub fn ego(&self) -> Result<&TrafficParticipant> {
        self.participants
            .iter()
            .find(|p| p.kind == ParticipantKind::Ego)
            .ok_or_else(|| Error::InvalidArgument("scenario has no ego".into()))
    }
}

/// Externally authored scenario document: participants plus the hypothesis
/// configuration; hypotheses are generated on load.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ScenarioFile {
    pub road: RoadLayout,
    pub participants: Vec<TrafficParticipant>,
    pub hypothesis: hypothesis::HypothesisConfig,
    pub seed: u64,
}

impl ScenarioFile {
    pub fn build(&self) -> Result<Scenario> {
        let mut hyps = Vec::with_capacity(self.participants.len());
        for p in &self.participants {
            hyps.push(hypothesis::generate_hypotheses(p, &self.road, &self.hypothesis)?);
        }
        let scenario = Scenario {
            road: self.road.clone(),
            participants: self.participants.clone(),
            hypotheses: hyps,
            rng_seed: self.seed,
        };
        scenario.validate()?;
        Ok(scenario)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Json { path: "<scenario>".into(), source: e })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("scenario serialization cannot fail")
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        serde_json::from_str(&text)
            .map_err(|e| Error::Json { path: path.display().to_string(), source: e })
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, self.to_json())
            .map_err(|e| Error::io(path.display().to_string(), e))
    }
}
