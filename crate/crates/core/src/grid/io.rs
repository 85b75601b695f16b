//! The shared on-disk grid format.
//!
//! Layout: magic `POGG`, format version u16, rows u32, cols u32,
//! attributes u32, t_pred f32 (0 for augmented grids), then
//! rows·cols·attributes little-endian f32 values, row-major,
//! attribute-minor. The file carries no cell geometry; geometry travels in
//! dataset manifests and is supplied by the caller on load.

use std::path::Path;

use crate::binio::{Reader, Writer};
use crate::error::{Error, Result};
use crate::grid::{
    quant, AugmentedOccupancyGrid, GridConfig, PredictedOccupancyGrid, QuantizedPog,
    AOG_ATTRIBUTES,
};

pub const GRID_MAGIC: &[u8; 4] = b"POGG";
pub const GRID_VERSION: u16 = 1;

/// Cell geometry for re-typing a loaded grid file.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GridGeometry {
    pub cell_length: f64,
    pub cell_width: f64,
    pub origin: (f64, f64),
}

impl Default for GridGeometry {
    fn default() -> Self {
        GridGeometry { cell_length: 1.0, cell_width: 1.0, origin: (0.0, 0.0) }
    }
}

impl GridGeometry {
    pub fn of(config: &GridConfig) -> Self {
        GridGeometry {
            cell_length: config.cell_length,
            cell_width: config.cell_width,
            origin: config.origin,
        }
    }

    fn config(&self, rows: usize, cols: usize, attributes: usize) -> GridConfig {
        GridConfig {
            rows,
            cols,
            cell_length: self.cell_length,
            cell_width: self.cell_width,
            origin: self.origin,
            attributes,
        }
    }
}

/// A grid file as stored: shape, prediction instant, f32 payload.
#[derive(Clone, Debug, PartialEq)]
pub struct RawGrid {
    pub rows: usize,
    pub cols: usize,
    pub attributes: usize,
    pub t_pred: f32,
    pub values: Vec<f32>,
}

impl RawGrid {
    pub fn to_aog(&self, geometry: &GridGeometry) -> Result<AugmentedOccupancyGrid> {
        if self.attributes != AOG_ATTRIBUTES {
            return Err(Error::InvalidArgument(format!(
                "augmented grid needs {AOG_ATTRIBUTES} attributes, file has {}",
                self.attributes
            )));
        }
        let cfg = geometry.config(self.rows, self.cols, self.attributes);
        AugmentedOccupancyGrid::from_data(cfg, self.values.iter().map(|&v| v as f64).collect())
    }

    pub fn to_pog(&self, geometry: &GridGeometry) -> Result<PredictedOccupancyGrid> {
        if self.attributes != 1 {
            return Err(Error::InvalidArgument(format!(
                "probability grid needs 1 attribute, file has {}",
                self.attributes
            )));
        }
        let cfg = geometry.config(self.rows, self.cols, 1);
        PredictedOccupancyGrid::from_probs(
            cfg,
            self.t_pred as f64,
            self.values.iter().map(|&v| v as f64).collect(),
        )
    }

    /// Re-type as a quantized grid. Values must sit exactly on the f32
    /// images of the six levels.
    pub fn to_quantized(&self, geometry: &GridGeometry) -> Result<QuantizedPog> {
        if self.attributes != 1 {
            return Err(Error::InvalidArgument(format!(
                "quantized grid needs 1 attribute, file has {}",
                self.attributes
            )));
        }
        let mut classes = Vec::with_capacity(self.values.len());
        for &v in &self.values {
            let class = quant::LEVELS.iter().position(|&l| l as f32 == v).ok_or_else(|| {
                Error::InvalidArgument(format!("value {v} is not a quantized level"))
            })?;
            classes.push(class as u8);
        }
        let cfg = geometry.config(self.rows, self.cols, 1);
        QuantizedPog::from_classes(cfg, self.t_pred as f64, classes)
    }
}

fn grid_to_bytes(rows: usize, cols: usize, attributes: usize, t_pred: f32, values: &[f64]) -> Vec<u8> {
    let mut w = Writer::new();
    w.bytes(GRID_MAGIC);
    w.u16(GRID_VERSION);
    w.u32(rows as u32);
    w.u32(cols as u32);
    w.u32(attributes as u32);
    w.f32(t_pred);
    for &v in values {
        w.f32(v as f32);
    }
    w.into_bytes()
}

pub fn aog_to_bytes(aog: &AugmentedOccupancyGrid) -> Vec<u8> {
    let c = aog.config();
    grid_to_bytes(c.rows, c.cols, c.attributes, 0.0, aog.as_slice())
}

pub fn pog_to_bytes(pog: &PredictedOccupancyGrid) -> Vec<u8> {
    let c = pog.config();
    grid_to_bytes(c.rows, c.cols, 1, pog.t_pred() as f32, pog.as_slice())
}

pub fn quantized_to_bytes(q: &QuantizedPog) -> Vec<u8> {
    let c = q.config();
    let values: Vec<f64> = q.classes().iter().map(|&k| quant::LEVELS[k as usize]).collect();
    grid_to_bytes(c.rows, c.cols, 1, q.t_pred() as f32, &values)
}

pub fn read_grid_bytes(data: &[u8]) -> Result<RawGrid> {
    let mut r = Reader::new(data, "grid file");
    r.magic(GRID_MAGIC)?;
    let version = r.u16()?;
    if version != GRID_VERSION {
        return Err(r.error(format!("unsupported version {version}")));
    }
    let rows = r.count(1 << 20, "rows")?;
    let cols = r.count(1 << 20, "cols")?;
    let attributes = r.count(64, "attributes")?;
    let t_pred = r.f32()?;
    let n = rows
        .checked_mul(cols)
        .and_then(|v| v.checked_mul(attributes))
        .ok_or_else(|| r.error("grid dimensions overflow"))?;
    let mut values = Vec::with_capacity(n);
    for _ in 0..n {
        values.push(r.f32()?);
    }
    r.finish()?;
    Ok(RawGrid { rows, cols, attributes, t_pred, values })
}

pub fn save_grid(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn load_grid(path: &Path) -> Result<RawGrid> {
    let data =
        std::fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    read_grid_bytes(&data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn aog_round_trip_is_byte_stable() {
        let cfg = GridConfig::ego_centered(3, 4, 0.5, AOG_ATTRIBUTES);
        let mut data = vec![0.0; cfg.cell_count() * AOG_ATTRIBUTES];
        for (k, v) in data.iter_mut().enumerate() {
            *v = (k as f64 * 0.37).sin();
        }
        let aog = AugmentedOccupancyGrid::from_data(cfg.clone(), data).unwrap();
        let bytes = aog_to_bytes(&aog);
        let raw = read_grid_bytes(&bytes).unwrap();
        assert_eq!(raw.rows, 3);
        assert_eq!(raw.cols, 4);
        assert_eq!(raw.attributes, AOG_ATTRIBUTES);
        assert_eq!(raw.t_pred, 0.0);
        // Re-serializing the loaded grid reproduces the bytes exactly.
        let aog2 = raw.to_aog(&GridGeometry::of(&cfg)).unwrap();
        assert_eq!(aog_to_bytes(&aog2), bytes);
    }

    #[test]
    fn pog_round_trip_preserves_t_pred() {
        let cfg = GridConfig::ego_centered(2, 2, 1.0, 1);
        let pog = PredictedOccupancyGrid::from_probs(cfg, 1.0, vec![0.0, 0.25, 0.5, 1.0]).unwrap();
        let bytes = pog_to_bytes(&pog);
        let raw = read_grid_bytes(&bytes).unwrap();
        assert_eq!(raw.t_pred, 1.0);
        let back = raw.to_pog(&GridGeometry::default()).unwrap();
        assert_eq!(back.prob(0, 1), 0.25);
        assert_eq!(pog_to_bytes(&back), bytes);
    }

    #[test]
    fn quantized_round_trip_recovers_classes() {
        let cfg = GridConfig::ego_centered(2, 3, 1.0, 1);
        let q = QuantizedPog::from_classes(cfg.clone(), 1.0, vec![0, 1, 2, 3, 4, 5]).unwrap();
        let bytes = quantized_to_bytes(&q);
        let raw = read_grid_bytes(&bytes).unwrap();
        let q2 = raw.to_quantized(&GridGeometry::of(&cfg)).unwrap();
        assert_eq!(q.classes(), q2.classes());
    }

    #[test]
    fn malformed_files_rejected_with_offset() {
        let err = read_grid_bytes(b"NOPE").unwrap_err();
        let msg = format!("{err}");
        assert!(msg.contains("offset 0"), "got: {msg}");

        let cfg = GridConfig::ego_centered(2, 2, 1.0, 1);
        let pog = PredictedOccupancyGrid::zeros(&cfg, 1.0).unwrap();
        let mut bytes = pog_to_bytes(&pog);
        bytes.truncate(bytes.len() - 2);
        assert!(read_grid_bytes(&bytes).is_err());

        // Trailing garbage is rejected too.
        let mut bytes = pog_to_bytes(&pog);
        bytes.push(0);
        assert!(read_grid_bytes(&bytes).is_err());
    }
}
