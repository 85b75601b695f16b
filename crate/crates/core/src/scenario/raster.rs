//! Rasterization of scenarios into grids.
//!
//! A cell counts as occupied by a footprint exactly when its CENTER lies
//! inside the oriented rectangle, boundaries included. Lane markings are
//! traced as sampled polylines one cell wide. All grid-facing geometry here
//! works in the ego frame; [`EgoFrame`] performs the world-to-ego mapping.

use crate::error::{Error, Result};
use crate::grid::{AugmentedOccupancyGrid, GridConfig, PredictedOccupancyGrid, EGO_COG};

use super::hypothesis::{self, wrap_angle_tau};
use super::{ParticipantKind, Pose, Scenario, TimedPose, TrajectoryHypothesis};

/// Rigid transform from the world frame into the ego grid frame: the ego
/// heading becomes +x and the ego center of gravity lands on [`EGO_COG`].
#[derive(Clone, Copy, Debug)]
pub struct EgoFrame {
    ex: f64,
    ey: f64,
    cos: f64,
    sin: f64,
    psi: f64,
}

impl EgoFrame {
    pub fn new(ego_pose: &Pose) -> Self {
        EgoFrame {
            ex: ego_pose.x,
            ey: ego_pose.y,
            cos: ego_pose.psi.cos(),
            sin: ego_pose.psi.sin(),
            psi: ego_pose.psi,
        }
    }

    pub fn of(scenario: &Scenario) -> Result<Self> {
        Ok(Self::new(&scenario.ego()?.pose))
    }

    pub fn to_ego(&self, x: f64, y: f64) -> (f64, f64) {
        let dx = x - self.ex;
        let dy = y - self.ey;
        (self.cos * dx + self.sin * dy + EGO_COG.0, -self.sin * dx + self.cos * dy + EGO_COG.1)
    }

    /// Heading relative to the ego heading, unwrapped.
    pub fn heading_to_ego(&self, psi: f64) -> f64 {
        psi - self.psi
    }

    pub fn pose_to_ego(&self, pose: &Pose) -> Pose {
        let (x, y) = self.to_ego(pose.x, pose.y);
        Pose::new(x, y, self.heading_to_ego(pose.psi))
    }

    pub fn timed_pose_to_ego(&self, p: &TimedPose) -> TimedPose {
        let (x, y) = self.to_ego(p.x, p.y);
        TimedPose { t: p.t, x, y, psi: self.heading_to_ego(p.psi) }
    }
}

/// Map a hypothesis rollout into the ego frame.
pub fn transform_hypothesis(h: &TrajectoryHypothesis, frame: &EgoFrame) -> TrajectoryHypothesis {
    TrajectoryHypothesis {
        participant: h.participant,
        poses: h.poses.iter().map(|p| frame.timed_pose_to_ego(p)).collect(),
        probability: h.probability,
    }
}

/// Binary cell mask over a grid.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CellMask {
    pub rows: usize,
    pub cols: usize,
    bits: Vec<bool>,
}

impl CellMask {
    pub fn zeros(config: &GridConfig) -> Self {
        CellMask { rows: config.rows, cols: config.cols, bits: vec![false; config.rows * config.cols] }
    }

    pub fn set(&mut self, i: usize, j: usize) {
        self.bits[i * self.cols + j] = true;
    }

    pub fn is_set(&self, i: usize, j: usize) -> bool {
        self.bits[i * self.cols + j]
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn iter_set(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        let cols = self.cols;
        self.bits
            .iter()
            .enumerate()
            .filter(|(_, &b)| b)
            .map(move |(k, _)| (k / cols, k % cols))
    }
}

/// Mark every cell whose center lies in the closed oriented rectangle.
/// `center` and `psi` are in the grid frame; `footprint` is (length, width).
fn mark_rect(mask: &mut CellMask, config: &GridConfig, center: (f64, f64), psi: f64, footprint: (f64, f64)) {
    let (hl, hw) = (footprint.0 / 2.0, footprint.1 / 2.0);
    let (c, s) = (psi.cos(), psi.sin());
    // Candidate window: the rect's bounding box, padded one cell for safety.
    let reach_x = c.abs() * hl + s.abs() * hw;
    let reach_y = s.abs() * hl + c.abs() * hw;
    let lo_i = ((center.0 - reach_x - config.origin.0) / config.cell_length).floor() as i64 - 1;
    let hi_i = ((center.0 + reach_x - config.origin.0) / config.cell_length).floor() as i64 + 1;
    let lo_j = ((center.1 - reach_y - config.origin.1) / config.cell_width).floor() as i64 - 1;
    let hi_j = ((center.1 + reach_y - config.origin.1) / config.cell_width).floor() as i64 + 1;
    for i in lo_i.max(0)..=hi_i.min(config.rows as i64 - 1) {
        for j in lo_j.max(0)..=hi_j.min(config.cols as i64 - 1) {
            let (cx, cy) = config.cell_center(i as usize, j as usize);
            let dx = cx - center.0;
            let dy = cy - center.1;
            let local_x = c * dx + s * dy;
            let local_y = -s * dx + c * dy;
            if local_x.abs() <= hl && local_y.abs() <= hw {
                mask.set(i as usize, j as usize);
            }
        }
    }
}

/// Whether the rect's four corners all fall inside the grid bounds.
fn rect_inside(config: &GridConfig, center: (f64, f64), psi: f64, footprint: (f64, f64)) -> bool {
    let (hl, hw) = (footprint.0 / 2.0, footprint.1 / 2.0);
    let (c, s) = (psi.cos(), psi.sin());
    let x_max = config.origin.0 + config.rows as f64 * config.cell_length;
    let y_max = config.origin.1 + config.cols as f64 * config.cell_width;
    for (dx, dy) in [(hl, hw), (hl, -hw), (-hl, hw), (-hl, -hw)] {
        let x = center.0 + c * dx - s * dy;
        let y = center.1 + s * dx + c * dy;
        if x < config.origin.0 || x > x_max || y < config.origin.1 || y > y_max {
            return false;
        }
    }
    true
}

/// Where a participant's footprint sits on the grid at time `t_pred` under
/// one hypothesis. Poses are interpreted in the grid frame; transform
/// world-frame hypotheses with [`transform_hypothesis`] first.
pub fn rasterize_hypothesis(
    hypothesis: &TrajectoryHypothesis,
    footprint: (f64, f64),
    config: &GridConfig,
    t_pred: f64,
) -> Result<CellMask> {
    config.validate()?;
    if !(footprint.0 > 0.0) || !(footprint.1 > 0.0) {
        return Err(Error::InvalidArgument(format!("footprint must be positive, got {footprint:?}")));
    }
    let pose = hypothesis::pose_at(hypothesis, t_pred)?;
    let mut mask = CellMask::zeros(config);
    mark_rect(&mut mask, config, (pose.x, pose.y), pose.psi, footprint);
    Ok(mask)
}

/// What was dropped or drawn while building a grid.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct BuildReport {
    /// Ids of participants whose footprint did not fit the grid entirely.
    pub clipped: Vec<usize>,
    /// Distinct cells carrying lane markings.
    pub marking_cells: usize,
    /// Cells with the occupancy attribute set, markings included.
    pub occupied_cells: usize,
}

/// Rasterize the scene at observation time into an augmented grid.
///
/// Markings and static obstacles become occupied cells with zeroed motion
/// attributes. Moving participants (the ego included) write occupancy plus
/// speed, ego-relative heading in [0, 2π), and body-frame acceleration.
/// Participants overwrite markings; later participants overwrite earlier
/// ones where footprints overlap.
pub fn build_aog(
    scenario: &Scenario,
    config: &GridConfig,
) -> Result<(AugmentedOccupancyGrid, BuildReport)> {
    scenario.validate()?;
    let mut aog = AugmentedOccupancyGrid::zeros(config)?;
    let frame = EgoFrame::of(scenario)?;
    let mut report = BuildReport::default();

    let mut marking_mask = CellMask::zeros(config);
    let step = config.cell_length.min(config.cell_width) / 4.0;
    for line in scenario.road.markings() {
        for seg in line.windows(2) {
            let (ax, ay) = frame.to_ego(seg[0].0, seg[0].1);
            let (bx, by) = frame.to_ego(seg[1].0, seg[1].1);
            let len = ((bx - ax).powi(2) + (by - ay).powi(2)).sqrt();
            let n = (len / step).ceil().max(1.0) as usize;
            for k in 0..=n {
                let a = k as f64 / n as f64;
                if let Some((i, j)) = config.cell_at(ax + a * (bx - ax), ay + a * (by - ay)) {
                    marking_mask.set(i, j);
                }
            }
        }
    }
    for (i, j) in marking_mask.iter_set() {
        aog.cell_mut(i, j)[0] = 1.0;
    }
    report.marking_cells = marking_mask.count();

    for p in &scenario.participants {
        let pose = frame.pose_to_ego(&p.pose);
        let mut mask = CellMask::zeros(config);
        mark_rect(&mut mask, config, (pose.x, pose.y), pose.psi, p.footprint);
        if !rect_inside(config, (pose.x, pose.y), pose.psi, p.footprint) {
            report.clipped.push(p.id);
        }
        let attrs = match p.kind {
            ParticipantKind::Static => [1.0, 0.0, 0.0, 0.0, 0.0],
            _ => [1.0, p.velocity, wrap_angle_tau(pose.psi), p.accel.0, p.accel.1],
        };
        for (i, j) in mask.iter_set() {
            aog.cell_mut(i, j).copy_from_slice(&attrs);
        }
    }

    report.occupied_cells = (0..config.rows)
        .flat_map(|i| (0..config.cols).map(move |j| (i, j)))
        .filter(|&(i, j)| aog.cell(i, j)[0] == 1.0)
        .count();
    Ok((aog, report))
}

/// Ground-truth occupancy probabilities at `t_pred`: each hypothesis sends
/// its probability mass to the cells its footprint covers, summed per cell
/// and capped at 1.
pub fn compute_ground_truth_pog(
    scenario: &Scenario,
    config: &GridConfig,
    t_pred: f64,
) -> Result<PredictedOccupancyGrid> {
    scenario.validate()?;
    config.validate()?;
    let frame = EgoFrame::of(scenario)?;
    let mut acc = vec![0.0f64; config.rows * config.cols];
    for (p, hyps) in scenario.participants.iter().zip(&scenario.hypotheses) {
        for h in hyps {
            let local = transform_hypothesis(h, &frame);
            let mask = rasterize_hypothesis(&local, p.footprint, config, t_pred)?;
            for (i, j) in mask.iter_set() {
                acc[i * config.cols + j] += h.probability;
            }
        }
    }
    for v in &mut acc {
        *v = v.min(1.0);
    }
    PredictedOccupancyGrid::from_probs(config.clone(), t_pred, acc)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::AOG_ATTRIBUTES;
    use crate::scenario::hypothesis::{generate_hypotheses, HypothesisConfig};
    use crate::scenario::{RoadLayout, TrafficParticipant};

    fn desk_config() -> GridConfig {
        GridConfig::ego_centered(20, 20, 2.0, AOG_ATTRIBUTES)
    }

    fn participant(
        id: usize,
        kind: ParticipantKind,
        pose: Pose,
        v: f64,
        footprint: (f64, f64),
    ) -> TrafficParticipant {
        TrafficParticipant { id, kind, pose, velocity: v, accel: (0.0, 0.0), footprint }
    }

    fn two_car_scenario(ego_v: f64, car_v: f64) -> Scenario {
        let road = RoadLayout::four_way_open();
        let cfg = HypothesisConfig { count: 1, ..Default::default() };
        let ego = participant(
            1,
            ParticipantKind::Ego,
            Pose::new(-8.0, -1.75, 0.0),
            ego_v,
            (4.0, 1.8),
        );
        let car = participant(
            2,
            ParticipantKind::Car,
            Pose::new(7.0, 1.75, std::f64::consts::PI),
            car_v,
            (4.0, 1.8),
        );
        let hyps = vec![
            generate_hypotheses(&ego, &road, &cfg).unwrap(),
            generate_hypotheses(&car, &road, &cfg).unwrap(),
        ];
        Scenario { road, participants: vec![ego, car], hypotheses: hyps, rng_seed: 0 }
    }

    #[test]
    fn ego_frame_maps_ego_onto_the_anchor() {
        let frame = EgoFrame::new(&Pose::new(-8.0, -1.75, 0.0));
        assert_eq!(frame.to_ego(-8.0, -1.75), EGO_COG);
        // Intersection center: 8 m ahead, 1.75 m to the left.
        assert_eq!(frame.to_ego(0.0, 0.0), (10.5, 1.75));
    }

    #[test]
    fn ego_frame_rotates_into_heading() {
        let frame = EgoFrame::new(&Pose::new(0.0, 0.0, std::f64::consts::FRAC_PI_2));
        // A point 5 m ahead of a north-facing ego.
        let (x, y) = frame.to_ego(0.0, 5.0);
        assert!((x - 7.5).abs() < 1e-12);
        assert!(y.abs() < 1e-12);
        // A point to the ego's left.
        let (x, y) = frame.to_ego(-3.0, 0.0);
        assert!((x - 2.5).abs() < 1e-12);
        assert!((y - 3.0).abs() < 1e-12);
        assert!((frame.heading_to_ego(std::f64::consts::PI) - std::f64::consts::FRAC_PI_2).abs() < 1e-12);
    }

    #[test]
    fn axis_aligned_rect_hits_exactly_the_covered_centers() {
        // Footprint 4.0 x 1.8 centered on the ego anchor: x in [0.5, 4.5]
        // covers centers 0.5, 2.5, 4.5 (boundaries closed), y only 0.
        let config = desk_config();
        let mut mask = CellMask::zeros(&config);
        mark_rect(&mut mask, &config, EGO_COG, 0.0, (4.0, 1.8));
        let cells: Vec<_> = mask.iter_set().collect();
        assert_eq!(cells, vec![(9, 10), (10, 10), (11, 10)]);
    }

    #[test]
    fn rotating_the_rect_changes_the_cells() {
        let config = desk_config();
        let mut mask = CellMask::zeros(&config);
        // Long axis along y instead of x.
        mark_rect(&mut mask, &config, EGO_COG, std::f64::consts::FRAC_PI_2, (4.0, 1.8));
        let cells: Vec<_> = mask.iter_set().collect();
        assert_eq!(cells, vec![(10, 9), (10, 10), (10, 11)]);
    }

    #[test]
    fn aog_carries_participant_attributes() {
        let scenario = two_car_scenario(1.0, 3.0);
        let config = desk_config();
        let (aog, report) = build_aog(&scenario, &config).unwrap();
        assert!(report.clipped.is_empty());
        assert!(report.marking_cells > 0);
        assert!(report.occupied_cells >= report.marking_cells);

        // The oncoming car sits 15 m ahead, 3.5 m left: ego frame (17.5, 3.5).
        let (i, j) = config.cell_at(17.5, 3.5).unwrap();
        let cell = aog.cell(i, j);
        assert_eq!(cell[0], 1.0);
        assert_eq!(cell[1], 3.0);
        assert!((cell[2] - std::f64::consts::PI).abs() < 1e-12);
        // Ego cell: speed 1, heading 0.
        let (i, j) = config.cell_at(2.5, 0.0).unwrap();
        assert_eq!(aog.cell(i, j)[1], 1.0);
        assert_eq!(aog.cell(i, j)[2], 0.0);
        // A marking cell far from everyone: straight west road edge,
        // world (-15, -3.5) -> ego (-4.5, -1.75).
        let (i, j) = config.cell_at(-4.5, -1.75).unwrap();
        let cell = aog.cell(i, j);
        assert_eq!(cell[0], 1.0);
        assert_eq!(&cell[1..], &[0.0; AOG_ATTRIBUTES - 1]);
    }

    #[test]
    fn stationary_hypothesis_matches_the_aog_footprint() {
        // Both cars at rest: hypothesis masks at any t must equal the cells
        // the AOG marks for the same participant.
        let scenario = two_car_scenario(0.0, 0.0);
        let config = desk_config();
        let (aog, _) = build_aog(&scenario, &config).unwrap();
        let frame = EgoFrame::of(&scenario).unwrap();
        let car = &scenario.participants[1];
        let local = transform_hypothesis(&scenario.hypotheses[1][0], &frame);
        let mask = rasterize_hypothesis(&local, car.footprint, &config, 0.5).unwrap();
        assert!(mask.count() > 0);
        let pose = frame.pose_to_ego(&car.pose);
        for (i, j) in mask.iter_set() {
            let cell = aog.cell(i, j);
            assert_eq!(cell[0], 1.0);
            assert_eq!(cell[2], wrap_angle_tau(pose.psi));
        }
        // And nothing outside the mask carries that heading.
        let heading = wrap_angle_tau(pose.psi);
        for i in 0..config.rows {
            for j in 0..config.cols {
                if aog.cell(i, j)[2] == heading && aog.cell(i, j)[0] == 1.0 && heading != 0.0 {
                    assert!(mask.is_set(i, j));
                }
            }
        }
    }

    #[test]
    fn clipped_participants_are_reported() {
        let mut scenario = two_car_scenario(1.0, 1.0);
        // Push the second car to the far corner of the mapped area.
        scenario.participants[1].pose = Pose::new(19.0, 19.0, 0.0);
        scenario.hypotheses[1] = generate_hypotheses(
            &scenario.participants[1],
            &scenario.road,
            &HypothesisConfig { count: 1, ..Default::default() },
        )
        .unwrap();
        let config = desk_config();
        let (_, report) = build_aog(&scenario, &config).unwrap();
        assert_eq!(report.clipped, vec![2]);
    }

    #[test]
    fn pog_mass_follows_the_moving_car() {
        let scenario = two_car_scenario(0.0, 7.0);
        let config = desk_config();
        let pog = compute_ground_truth_pog(&scenario, &config, 1.0).unwrap();
        // Car drives west at 7 m/s from world (7, 1.75): at t = 1 its center
        // is at world (0, 1.75), ego frame (10.5, 3.5).
        let (i, j) = config.cell_at(10.5, 3.5).unwrap();
        assert_eq!(pog.prob(i, j), 1.0);
        // Its observation-time cell is vacated.
        let (i0, j0) = config.cell_at(17.5, 3.5).unwrap();
        assert_eq!(pog.prob(i0, j0), 0.0);
        // The resting ego still occupies its own cell.
        let (ie, je) = config.cell_at(2.5, 0.0).unwrap();
        assert_eq!(pog.prob(ie, je), 1.0);
    }

    #[test]
    fn pog_caps_accumulated_mass_at_one() {
        // Two overlapping participants each contribute certain occupancy to
        // the same cells; without the cap the total of 2 would be rejected
        // as an out-of-range probability.
        let road = RoadLayout::four_way_open();
        let ego = participant(1, ParticipantKind::Ego, Pose::new(-8.0, -1.75, 0.0), 0.0, (4.0, 1.8));
        let car = participant(2, ParticipantKind::Car, Pose::new(-8.0, -1.75, 0.0), 0.0, (4.0, 1.8));
        let stay = |id: usize| TrajectoryHypothesis {
            participant: id,
            poses: vec![
                TimedPose { t: 0.0, x: -8.0, y: -1.75, psi: 0.0 },
                TimedPose { t: 1.0, x: -8.0, y: -1.75, psi: 0.0 },
            ],
            probability: 1.0,
        };
        let scenario = Scenario {
            road,
            participants: vec![ego, car],
            hypotheses: vec![vec![stay(1)], vec![stay(2)]],
            rng_seed: 0,
        };
        let config = desk_config();
        let pog = compute_ground_truth_pog(&scenario, &config, 0.5).unwrap();
        let (i, j) = config.cell_at(2.5, 0.0).unwrap();
        assert_eq!(pog.prob(i, j), 1.0);
    }

    #[test]
    fn pog_rejects_times_outside_the_rollout() {
        let scenario = two_car_scenario(1.0, 1.0);
        let config = desk_config();
        assert!(matches!(
            compute_ground_truth_pog(&scenario, &config, 2.0),
            Err(Error::TimeOutOfRange { .. })
        ));
        assert!(compute_ground_truth_pog(&scenario, &config, 1.0).is_ok());
        assert!(compute_ground_truth_pog(&scenario, &config, 0.0).is_ok());
    }

    #[test]
    fn masks_clip_silently_at_the_grid_edge() {
        let config = desk_config();
        let h = TrajectoryHypothesis {
            participant: 1,
            poses: vec![
                TimedPose { t: 0.0, x: 21.0, y: 0.0, psi: 0.0 },
                TimedPose { t: 1.0, x: 21.0, y: 0.0, psi: 0.0 },
            ],
            probability: 1.0,
        };
        // Grid x spans [-18.5, 21.5]: only the cell row at x = 20.5 remains.
        let mask = rasterize_hypothesis(&h, (4.0, 1.8), &config, 0.0).unwrap();
        let cells: Vec<_> = mask.iter_set().collect();
        assert_eq!(cells, vec![(19, 10)]);
    }
}
