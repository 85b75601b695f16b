//! Reconstruction and prediction-error metrics.
//!
//! The prediction error ε sums squared probability differences over ALL
//! cells but normalizes by the cardinality K of the symmetric difference of
//! the occupied-cell sets; cells occupied in both grids contribute error
//! mass without enlarging the normalizer. That asymmetry is intentional and
//! kept literal.

use std::collections::BTreeSet;

use crate::error::{Error, Result};
use crate::grid::{BandedError, GridConfig, PredictedOccupancyGrid};

/// Per-component RMSE between a reconstruction and its original:
/// `sqrt((1/N)·Σ(r_k − p_k)²)`. This is the primary reconstruction measure
/// so that comparisons against mean absolute cell values are dimensionless.
pub fn reconstruction_rmse(reconstruction: &[f64], original: &[f64]) -> Result<f64> {
    let ss = reconstruction_sum_sq(reconstruction, original)?;
    Ok((ss / reconstruction.len() as f64).sqrt())
}

/// Plain Euclidean norm ‖r − p‖, exposed as a secondary output.
pub fn reconstruction_error_norm(reconstruction: &[f64], original: &[f64]) -> Result<f64> {
    Ok(reconstruction_sum_sq(reconstruction, original)?.sqrt())
}

fn reconstruction_sum_sq(reconstruction: &[f64], original: &[f64]) -> Result<f64> {
    if reconstruction.is_empty() || reconstruction.len() != original.len() {
        return Err(Error::DimensionMismatch {
            context: "reconstruction error",
            expected: original.len(),
            got: reconstruction.len(),
        });
    }
    Ok(reconstruction
        .iter()
        .zip(original)
        .map(|(r, p)| (r - p) * (r - p))
        .sum())
}

/// Occupied-cell sets of a ground-truth/estimate pair: `gt` holds cells with
/// ground-truth probability > 0, `est` those with estimated probability > 0.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct OccupiedCells {
    pub gt: BTreeSet<(usize, usize)>,
    pub est: BTreeSet<(usize, usize)>,
}

impl OccupiedCells {
    /// K: cardinality of the symmetric difference (B ∪ D) \ (B ∩ D).
    pub fn sym_diff_count(&self) -> usize {
        self.gt.symmetric_difference(&self.est).count()
    }
}

fn check_pair(gt: &PredictedOccupancyGrid, est: &PredictedOccupancyGrid) -> Result<()> {
    gt.config().check_shape(est.config())
}

/// B (ground-truth occupied), D (estimate occupied) and K = |B Δ D|.
pub fn occupied_cell_sets(
    gt: &PredictedOccupancyGrid,
    est: &PredictedOccupancyGrid,
) -> Result<(OccupiedCells, usize)> {
    check_pair(gt, est)?;
    let cfg = gt.config();
    let mut sets = OccupiedCells { gt: BTreeSet::new(), est: BTreeSet::new() };
    for i in 0..cfg.rows {
        for j in 0..cfg.cols {
            if gt.prob(i, j) > 0.0 {
                sets.gt.insert((i, j));
            }
            if est.prob(i, j) > 0.0 {
                sets.est.insert((i, j));
            }
        }
    }
    let k = sets.sym_diff_count();
    Ok((sets, k))
}

/// Prediction error ε = sqrt((1/K)·Σ_all cells (p̂ − p)²).
///
/// Degenerate K = 0 (identical support): 0 when every cell agrees exactly,
/// otherwise normalized by |B|; when B is also empty, 0.
pub fn pog_error(gt: &PredictedOccupancyGrid, est: &PredictedOccupancyGrid) -> Result<f64> {
    check_pair(gt, est)?;
    let (sets, k) = occupied_cell_sets(gt, est)?;
    let ss: f64 = gt
        .as_slice()
        .iter()
        .zip(est.as_slice())
        .map(|(p, q)| (q - p) * (q - p))
        .sum();
    if k > 0 {
        return Ok((ss / k as f64).sqrt());
    }
    if ss == 0.0 || sets.gt.is_empty() {
        return Ok(0.0);
    }
    Ok((ss / sets.gt.len() as f64).sqrt())
}

/// Band of a ground-truth probability: 0 = [0, 0.2], 1 = (0.2, 0.7],
/// 2 = (0.7, 1.0].
pub(crate) fn band_of(p: f64) -> usize {
    if p <= 0.2 {
        0
    } else if p <= 0.7 {
        1
    } else {
        2
    }
}

/// Banded prediction error. Cells are partitioned by the GROUND-TRUTH band;
/// each band's error is Eq.-13-style restricted to the band with
/// `K_band = |band ∩ (B ∪ D)|`. Doubly-zero cells (free space predicted
/// free) never contribute, which only affects the low band.
pub fn banded_pog_error(
    gt: &PredictedOccupancyGrid,
    est: &PredictedOccupancyGrid,
) -> Result<BandedError> {
    check_pair(gt, est)?;
    let cfg: &GridConfig = gt.config();
    let mut ss = [0.0f64; 3];
    let mut count = [0usize; 3];
    for i in 0..cfg.rows {
        for j in 0..cfg.cols {
            let (p, q) = (gt.prob(i, j), est.prob(i, j));
            if p == 0.0 && q == 0.0 {
                continue;
            }
            let b = band_of(p);
            ss[b] += (q - p) * (q - p);
            count[b] += 1;
        }
    }
    let eps = |b: usize| (count[b] > 0).then(|| (ss[b] / count[b] as f64).sqrt());
    Ok(BandedError {
        eps_low: eps(0),
        eps_mid: eps(1),
        eps_high: eps(2),
        low_cells: count[0],
        mid_cells: count[1],
        high_cells: count[2],
    })
}
