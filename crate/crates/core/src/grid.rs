//! Occupancy-grid containers and the error metrics computed on them.
//!
//! Three grid kinds share one indexing convention: `(i, j) = (row, col)`,
//! row-major, `i ∈ [0, rows)`, `j ∈ [0, cols)`. Row `i` advances along the
//! ego frame's forward (x) axis, column `j` along the left (y) axis. All
//! containers are immutable after construction and safe to share across
//! threads.

pub mod io;
pub mod metrics;
pub mod quant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Attribute count of an augmented grid cell:
/// `[occupied, velocity m/s, orientation rad, accel_x m/s², accel_y m/s²]`.
pub const AOG_ATTRIBUTES: usize = 5;

/// Geometry and shape of a grid. `origin` is the ego-frame position of the
/// low corner of cell (0, 0); cell (i, j) spans
/// `[origin.x + i·cell_length, origin.x + (i+1)·cell_length)` ×
/// `[origin.y + j·cell_width, origin.y + (j+1)·cell_width)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridConfig {
    pub rows: usize,
    pub cols: usize,
    /// Cell extent along x, meters.
    pub cell_length: f64,
    /// Cell extent along y, meters.
    pub cell_width: f64,
    /// Ego-frame coordinates of the low corner of cell (0, 0).
    pub origin: (f64, f64),
    /// Attributes per cell: `AOG_ATTRIBUTES` for augmented grids, 1 for
    /// probability grids.
    pub attributes: usize,
}

/// Ego center of gravity in the ego frame, meters.
pub const EGO_COG: (f64, f64) = (2.5, 0.0);

impl GridConfig {
    /// Grid whose cell-center lattice contains the ego CoG (2.5, 0), with the
    /// ego sitting on the center cell. This keeps the ego footprint stable
    /// under coarse resolutions.
    pub fn ego_centered(rows: usize, cols: usize, cell: f64, attributes: usize) -> Self {
        let ox = EGO_COG.0 - (rows as f64 / 2.0).floor().mul_add(cell, 0.5 * cell);
        let oy = EGO_COG.1 - (cols as f64 / 2.0).floor().mul_add(cell, 0.5 * cell);
        GridConfig {
            rows,
            cols,
            cell_length: cell,
            cell_width: cell,
            origin: (ox, oy),
            attributes,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.rows == 0 || self.cols == 0 {
            return Err(Error::InvalidConfig(format!(
                "rows and cols must be ≥ 1, got {}×{}",
                self.rows, self.cols
            )));
        }
        if !(self.cell_length > 0.0) || !(self.cell_width > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "cell dimensions must be positive, got {}×{}",
                self.cell_length, self.cell_width
            )));
        }
        if self.attributes == 0 {
            return Err(Error::InvalidConfig("attributes must be ≥ 1".into()));
        }
        if !self.origin.0.is_finite() || !self.origin.1.is_finite() {
            return Err(Error::InvalidConfig("origin must be finite".into()));
        }
        Ok(())
    }

    pub fn cell_count(&self) -> usize {
        self.rows * self.cols
    }

    /// Shape equality: what the metric preconditions compare. Geometry
    /// (cell size, origin) is irrelevant to cell-wise math.
    pub fn same_shape(&self, other: &GridConfig) -> bool {
        self.rows == other.rows && self.cols == other.cols && self.attributes == other.attributes
    }

    pub fn shape_string(&self) -> String {
        format!("{}×{}×{}", self.rows, self.cols, self.attributes)
    }

    /// Ego-frame coordinates of the center of cell (i, j).
    pub fn cell_center(&self, i: usize, j: usize) -> (f64, f64) {
        (
            self.origin.0 + (i as f64 + 0.5) * self.cell_length,
            self.origin.1 + (j as f64 + 0.5) * self.cell_width,
        )
    }

    /// Cell containing the point, or None outside the grid.
    pub fn cell_at(&self, x: f64, y: f64) -> Option<(usize, usize)> {
        let fi = (x - self.origin.0) / self.cell_length;
        let fj = (y - self.origin.1) / self.cell_width;
        if fi < 0.0 || fj < 0.0 {
            return None;
        }
        let (i, j) = (fi as usize, fj as usize);
        (i < self.rows && j < self.cols).then_some((i, j))
    }

    pub(crate) fn check_shape(&self, other: &GridConfig) -> Result<()> {
        if !self.same_shape(other) {
            return Err(Error::ShapeMismatch {
                expected: self.shape_string(),
                got: other.shape_string(),
            });
        }
        Ok(())
    }
}

/// Snapshot of the current traffic state: one attribute vector per cell.
/// Cells under a participant footprint carry
/// `[1, v, ψ, a_x, a_y]` (ψ in the ego frame, wrapped to [0, 2π)); cells on
/// lane markings or static obstacles carry `[1, 0, 0, 0, 0]`; free cells are
/// all-zero.
#[derive(Clone, Debug, PartialEq)]
pub struct AugmentedOccupancyGrid {
    config: GridConfig,
    /// Row-major, attribute-minor: index = (i·cols + j)·attributes + a.
    data: Vec<f64>,
}

impl AugmentedOccupancyGrid {
    pub fn zeros(config: &GridConfig) -> Result<Self> {
        let mut config = config.clone();
        config.attributes = AOG_ATTRIBUTES;
        config.validate()?;
        let n = config.cell_count() * config.attributes;
        Ok(AugmentedOccupancyGrid { config, data: vec![0.0; n] })
    }

    pub fn from_data(config: GridConfig, data: Vec<f64>) -> Result<Self> {
        config.validate()?;
        let expected = config.cell_count() * config.attributes;
        if data.len() != expected {
            return Err(Error::DimensionMismatch {
                context: "augmented grid payload",
                expected,
                got: data.len(),
            });
        }
        Ok(AugmentedOccupancyGrid { config, data })
    }

    pub fn config(&self) -> &GridConfig {
        &self.config
    }

    pub fn cell(&self, i: usize, j: usize) -> &[f64] {
        let a = self.config.attributes;
        let base = (i * self.config.cols + j) * a;
        &self.data[base..base + a]
    }

    pub(crate) fn cell_mut(&mut self, i: usize, j: usize) -> &mut [f64] {
        let a = self.config.attributes;
        let base = (i * self.config.cols + j) * a;
        &mut self.data[base..base + a]
    }

    pub fn occupied(&self, i: usize, j: usize) -> bool {
        self.cell(i, j)[0] != 0.0
    }

    /// Flat row-major attribute-minor view; the layout every model consumes.
    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }
}

/// Per-cell occupancy probabilities at a prediction instant `t_pred`.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictedOccupancyGrid {
    config: GridConfig,
    t_pred: f64,
    /// Row-major, one probability per cell.
    probs: Vec<f64>,
}

impl PredictedOccupancyGrid {
    pub fn zeros(config: &GridConfig, t_pred: f64) -> Result<Self> {
        let mut config = config.clone();
        config.attributes = 1;
        config.validate()?;
        let n = config.cell_count();
        Ok(PredictedOccupancyGrid { config, t_pred, probs: vec![0.0; n] })
    }

    pub fn from_probs(config: GridConfig, t_pred: f64, probs: Vec<f64>) -> Result<Self> {
        let mut config = config;
        config.attributes = 1;
        config.validate()?;
        if probs.len() != config.cell_count() {
            return Err(Error::DimensionMismatch {
                context: "probability grid payload",
                expected: config.cell_count(),
                got: probs.len(),
            });
        }
        for &p in &probs {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::InvalidProbability(p));
            }
        }
        Ok(PredictedOccupancyGrid { config, t_pred, probs })
    }

    pub fn config(&self) -> &GridConfig {
        &self.config
    }

    pub fn t_pred(&self) -> f64 {
        self.t_pred
    }

    pub fn prob(&self, i: usize, j: usize) -> f64 {
        self.probs[i * self.config.cols + j]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.probs
    }
}

/// Probability grid restricted to the six quantized levels. Stored as level
/// indices so file round-trips and class targets are exact.
#[derive(Clone, Debug, PartialEq)]
pub struct QuantizedPog {
    config: GridConfig,
    t_pred: f64,
    /// Level index per cell, row-major; value = index·0.2.
    classes: Vec<u8>,
}

impl QuantizedPog {
    pub fn from_classes(config: GridConfig, t_pred: f64, classes: Vec<u8>) -> Result<Self> {
        let mut config = config;
        config.attributes = 1;
        config.validate()?;
        if classes.len() != config.cell_count() {
            return Err(Error::DimensionMismatch {
                context: "quantized grid payload",
                expected: config.cell_count(),
                got: classes.len(),
            });
        }
        if let Some(&c) = classes.iter().find(|&&c| c as usize >= quant::LEVELS.len()) {
            return Err(Error::InvalidArgument(format!(
                "quantized class {c} outside the {}-level set",
                quant::LEVELS.len()
            )));
        }
        Ok(QuantizedPog { config, t_pred, classes })
    }

    pub fn config(&self) -> &GridConfig {
        &self.config
    }

    pub fn t_pred(&self) -> f64 {
        self.t_pred
    }

    pub fn class(&self, i: usize, j: usize) -> u8 {
        self.classes[i * self.config.cols + j]
    }

    pub fn classes(&self) -> &[u8] {
        &self.classes
    }

    pub fn value(&self, i: usize, j: usize) -> f64 {
        quant::LEVELS[self.class(i, j) as usize]
    }

    /// Expand back to a probability grid of level values.
    pub fn to_pog(&self) -> PredictedOccupancyGrid {
        let probs = self.classes.iter().map(|&c| quant::LEVELS[c as usize]).collect();
        PredictedOccupancyGrid {
            config: self.config.clone(),
            t_pred: self.t_pred,
            probs,
        }
    }
}

/// Eq.-13-style errors split by the ground-truth probability band
/// ([0, 0.2], (0.2, 0.7], (0.7, 1.0]). A band with no contributing cells is
/// `None`, never a number; `*_cells` counts the contributing cells.
#[derive(Clone, Debug, PartialEq)]
pub struct BandedError {
    pub eps_low: Option<f64>,
    pub eps_mid: Option<f64>,
    pub eps_high: Option<f64>,
    pub low_cells: usize,
    pub mid_cells: usize,
    pub high_cells: usize,
}
