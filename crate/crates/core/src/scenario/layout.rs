//! Four-way intersection layouts: lane geometry, markings, and which
//! maneuvers each approach arm permits.
//!
//! Both roads run along the world axes and cross at the origin. Traffic
//! keeps right, so a vehicle approaching the center drives on the lane
//! whose center is offset half a lane width to its right.

use serde::{Deserialize, Serialize};

use super::{Arm::*, Maneuver::*};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayoutKind {
    /// All four arms open, all turns permitted.
    FourWayOpen,
    /// The north arm is posted no-entry: no maneuver may end there.
    /// Traffic still approaches from it.
    FourWayLeftNoEntry,
}

/// Approach arms, named by compass direction from the intersection center.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arm {
    North,
    East,
    South,
    West,
}

impl Arm {
    /// Heading of travel toward the intersection center, in [0, 2π).
    pub fn approach_heading(self) -> f64 {
        match self {
            West => 0.0,
            South => std::f64::consts::FRAC_PI_2,
            East => std::f64::consts::PI,
            North => 1.5 * std::f64::consts::PI,
        }
    }

    /// Arm a vehicle ends up in after a maneuver started from this arm.
    /// Braking keeps the vehicle in its own arm.
    pub fn destination(self, maneuver: Maneuver) -> Arm {
        let opposite = match self {
            North => South,
            South => North,
            East => West,
            West => East,
        };
        // Turning left from the heading of travel.
        let left = match self {
            West => North,
            North => East,
            East => South,
            South => West,
        };
        let right = match self {
            West => South,
            South => East,
            East => North,
            North => West,
        };
        match maneuver {
            Straight => opposite,
            LeftTurn => left,
            RightTurn => right,
            BrakeToStop => self,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Maneuver {
    Straight,
    LeftTurn,
    RightTurn,
    BrakeToStop,
}

/// Canonical maneuver order used when listing or cycling templates.
pub const MANEUVER_ORDER: [Maneuver; 4] = [Straight, LeftTurn, RightTurn, BrakeToStop];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoadLayout {
    pub kind: LayoutKind,
    /// Total (x, y) extent of the mapped area, meters, centered on origin.
    pub extent: (f64, f64),
    pub lane_width: f64,
}

impl RoadLayout {
    pub fn four_way_open() -> Self {
        RoadLayout { kind: LayoutKind::FourWayOpen, extent: (40.0, 40.0), lane_width: 3.5 }
    }

    pub fn four_way_left_no_entry() -> Self {
        RoadLayout { kind: LayoutKind::FourWayLeftNoEntry, ..Self::four_way_open() }
    }

    pub fn from_kind(kind: LayoutKind) -> Self {
        match kind {
            LayoutKind::FourWayOpen => Self::four_way_open(),
            LayoutKind::FourWayLeftNoEntry => Self::four_way_left_no_entry(),
        }
    }

    /// Offset of a lane center from the road axis.
    pub fn lane_offset(&self) -> f64 {
        self.lane_width / 2.0
    }

    /// Maneuvers permitted from `arm`, in canonical order.
    pub fn permitted_maneuvers(&self, arm: Arm) -> Vec<Maneuver> {
        MANEUVER_ORDER
            .iter()
            .copied()
            .filter(|&m| self.permits(arm, m))
            .collect()
    }

    pub fn permits(&self, arm: Arm, maneuver: Maneuver) -> bool {
        match self.kind {
            LayoutKind::FourWayOpen => true,
            LayoutKind::FourWayLeftNoEntry => {
                maneuver == BrakeToStop || arm.destination(maneuver) != North
            }
        }
    }

    /// Whether a world-frame point lies on the paved area.
    pub fn on_road(&self, x: f64, y: f64) -> bool {
        let (ex, ey) = (self.extent.0 / 2.0, self.extent.1 / 2.0);
        if x.abs() > ex || y.abs() > ey {
            return false;
        }
        y.abs() <= self.lane_width || x.abs() <= self.lane_width
    }

    /// Approach arm of a vehicle from its heading: the arm behind it.
    /// Headings are snapped to the nearest road axis direction.
    pub fn arm_of_heading(&self, psi: f64) -> Arm {
        let tau = 2.0 * std::f64::consts::PI;
        let wrapped = psi.rem_euclid(tau);
        // Quadrant index: 0 = +x, 1 = +y, 2 = -x, 3 = -y.
        let q = ((wrapped / (tau / 4.0)).round() as i64).rem_euclid(4);
        match q {
            0 => West,
            1 => South,
            2 => East,
            _ => North,
        }
    }

    /// Lane markings as world-frame polylines: for each road, both edge
    /// lines and the center line, interrupted across the intersection box.
    pub fn markings(&self) -> Vec<Vec<(f64, f64)>> {
        let (ex, ey) = (self.extent.0 / 2.0, self.extent.1 / 2.0);
        let w = self.lane_width;
        let mut lines = Vec::new();
        for offset in [-w, 0.0, w] {
            // Road along x: lines at constant y, broken for |x| <= w.
            lines.push(vec![(-ex, offset), (-w, offset)]);
            lines.push(vec![(w, offset), (ex, offset)]);
            // Road along y: lines at constant x.
            lines.push(vec![(offset, -ey), (offset, -w)]);
            lines.push(vec![(offset, w), (offset, ey)]);
        }
        lines
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn open_layout_permits_everything() {
        let road = RoadLayout::four_way_open();
        for arm in [North, East, South, West] {
            assert_eq!(road.permitted_maneuvers(arm), MANEUVER_ORDER.to_vec());
        }
    }

    #[test]
    fn no_entry_arm_blocks_maneuvers_ending_north() {
        let road = RoadLayout::four_way_left_no_entry();
        // From west, a left turn would end in the north arm.
        assert_eq!(road.permitted_maneuvers(West), vec![Straight, RightTurn, BrakeToStop]);
        // From east, a right turn would.
        assert_eq!(road.permitted_maneuvers(East), vec![Straight, LeftTurn, BrakeToStop]);
        // From south, going straight would.
        assert_eq!(road.permitted_maneuvers(South), vec![LeftTurn, RightTurn, BrakeToStop]);
        // Leaving the north arm is unrestricted.
        assert_eq!(road.permitted_maneuvers(North), MANEUVER_ORDER.to_vec());
    }

    #[test]
    fn destinations_follow_compass_geometry() {
        assert_eq!(West.destination(Straight), East);
        assert_eq!(West.destination(LeftTurn), North);
        assert_eq!(West.destination(RightTurn), South);
        assert_eq!(West.destination(BrakeToStop), West);
        assert_eq!(North.destination(LeftTurn), East);
        assert_eq!(South.destination(RightTurn), East);
    }

    #[test]
    fn arm_follows_heading() {
        let road = RoadLayout::four_way_open();
        assert_eq!(road.arm_of_heading(0.0), West);
        assert_eq!(road.arm_of_heading(std::f64::consts::PI), East);
        assert_eq!(road.arm_of_heading(std::f64::consts::FRAC_PI_2), South);
        assert_eq!(road.arm_of_heading(-std::f64::consts::FRAC_PI_2), North);
        assert_eq!(road.arm_of_heading(1.5 * std::f64::consts::PI), North);
        // Jittered headings snap to the nearest axis.
        assert_eq!(road.arm_of_heading(0.3), West);
        assert_eq!(road.arm_of_heading(std::f64::consts::PI - 0.4), East);
    }

    #[test]
    fn on_road_covers_both_corridors() {
        let road = RoadLayout::four_way_open();
        assert!(road.on_road(-8.0, -1.75));
        assert!(road.on_road(1.75, 12.0));
        assert!(road.on_road(0.0, 0.0));
        assert!(!road.on_road(-8.0, -8.0));
        assert!(!road.on_road(25.0, 1.75));
    }

    #[test]
    fn markings_stop_at_the_intersection_box() {
        let road = RoadLayout::four_way_open();
        for line in road.markings() {
            for &(x, y) in &line {
                // No marking point strictly inside the open box.
                assert!(x.abs() >= road.lane_width - 1e-12 || y.abs() >= road.lane_width - 1e-12);
            }
        }
        assert_eq!(road.markings().len(), 12);
    }
}
