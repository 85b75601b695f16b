//! Dataset generation: sampled scenarios rasterized to grid files plus a
//! JSON manifest describing how they were made.
//!
//! Every record stores three files: the augmented grid at observation time,
//! the ground-truth probability grid at `t_pred`, and its quantized version.
//! Grid files carry shape but no geometry, so the manifest is the single
//! source of truth for cell size and origin, and for the config hash that
//! ties trained predictors to compatible datasets.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::grid::io::{aog_to_bytes, load_grid, pog_to_bytes, quantized_to_bytes, save_grid, GridGeometry};
use crate::grid::quant::quantize_pog;
use crate::grid::{AugmentedOccupancyGrid, GridConfig, PredictedOccupancyGrid, QuantizedPog};

use super::layout::RoadLayout;
use super::raster::{build_aog, compute_ground_truth_pog};
use super::sampler::{sample_scenario_with, SamplerConfig};

/// Per-record seed derivation. Fixed for all time: record i of a dataset is
/// reproducible from the dataset seed alone, in any order, on any machine.
pub fn scenario_seed(dataset_seed: u64, index: usize) -> u64 {
    crate::seed::derive(dataset_seed, index as u64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetRecord {
    pub index: usize,
    /// Paths relative to the dataset root.
    pub aog: String,
    pub pog: String,
    pub qpog: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: u32,
    pub seed: u64,
    pub n_total: usize,
    pub n_train: usize,
    pub n_val: usize,
    pub train_fraction: f64,
    pub t_pred: f64,
    pub road: RoadLayout,
    pub grid: GridConfig,
    pub sampler: SamplerConfig,
    /// Hash over road, grid, t_pred and sampler; predictors trained on a
    /// dataset refuse to run against one with a different hash.
    pub config_hash: String,
    pub train: Vec<DatasetRecord>,
    pub val: Vec<DatasetRecord>,
}

pub const MANIFEST_NAME: &str = "manifest.json";

/// Hash of everything that defines the data distribution and grid geometry.
pub fn dataset_config_hash(
    road: &RoadLayout,
    grid: &GridConfig,
    t_pred: f64,
    sampler: &SamplerConfig,
) -> String {
    #[derive(Serialize)]
    struct Hashed<'a> {
        road: &'a RoadLayout,
        grid: &'a GridConfig,
        t_pred: f64,
        sampler: &'a SamplerConfig,
    }
    let text = serde_json::to_string(&Hashed { road, grid, t_pred, sampler })
        .expect("config serialization cannot fail");
    let digest = Sha256::digest(text.as_bytes());
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

impl DatasetManifest {
    pub fn save(&self, root: &Path) -> Result<()> {
        let path = root.join(MANIFEST_NAME);
        let text = serde_json::to_string_pretty(self)
            .map_err(|e| Error::Json { path: path.display().to_string(), source: e })?;
        std::fs::write(&path, text).map_err(|e| Error::io(path.display().to_string(), e))
    }

    pub fn load(root: &Path) -> Result<Self> {
        let path = root.join(MANIFEST_NAME);
        let text = std::fs::read_to_string(&path)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        let manifest: DatasetManifest = serde_json::from_str(&text)
            .map_err(|e| Error::Json { path: path.display().to_string(), source: e })?;
        manifest.grid.validate()?;
        Ok(manifest)
    }

    pub fn geometry(&self) -> GridGeometry {
        GridGeometry::of(&self.grid)
    }

    /// Load one record's three grids, checking shape and prediction instant
    /// against the manifest.
    pub fn load_record(
        &self,
        root: &Path,
        record: &DatasetRecord,
    ) -> Result<(AugmentedOccupancyGrid, PredictedOccupancyGrid, QuantizedPog)> {
        let geom = self.geometry();
        let aog_raw = load_grid(&root.join(&record.aog))?;
        let pog_raw = load_grid(&root.join(&record.pog))?;
        let qpog_raw = load_grid(&root.join(&record.qpog))?;
        for raw in [&aog_raw, &pog_raw, &qpog_raw] {
            if raw.rows != self.grid.rows || raw.cols != self.grid.cols {
                return Err(Error::ShapeMismatch {
                    expected: format!("{}x{}", self.grid.rows, self.grid.cols),
                    got: format!("{}x{}", raw.rows, raw.cols),
                });
            }
        }
        for raw in [&pog_raw, &qpog_raw] {
            if raw.t_pred != self.t_pred as f32 {
                return Err(Error::InvalidArgument(format!(
                    "record {} stores t_pred {}, manifest says {}",
                    record.index, raw.t_pred, self.t_pred
                )));
            }
        }
        Ok((aog_raw.to_aog(&geom)?, pog_raw.to_pog(&geom)?, qpog_raw.to_quantized(&geom)?))
    }

    pub fn load_split(
        &self,
        root: &Path,
        records: &[DatasetRecord],
    ) -> Result<Vec<(AugmentedOccupancyGrid, PredictedOccupancyGrid, QuantizedPog)>> {
        records.iter().map(|r| self.load_record(root, r)).collect()
    }
}

/// Generate `n_total` scenarios, rasterize them, and split them at random
/// into training and validation sets. Writes grid files plus the manifest
/// under `out_dir` and returns the manifest.
pub fn generate_dataset(
    template: &RoadLayout,
    n_total: usize,
    train_fraction: f64,
    seed: u64,
    grid: &GridConfig,
    t_pred: f64,
    out_dir: &Path,
) -> Result<DatasetManifest> {
    generate_dataset_with(
        template,
        n_total,
        train_fraction,
        seed,
        grid,
        t_pred,
        out_dir,
        &SamplerConfig::default(),
    )
}

#[allow(clippy::too_many_arguments)]
pub fn generate_dataset_with(
    template: &RoadLayout,
    n_total: usize,
    train_fraction: f64,
    seed: u64,
    grid: &GridConfig,
    t_pred: f64,
    out_dir: &Path,
    sampler: &SamplerConfig,
) -> Result<DatasetManifest> {
    grid.validate()?;
    sampler.validate()?;
    if n_total < 2 {
        return Err(Error::InvalidConfig(format!(
            "need at least 2 scenarios to split, got {n_total}"
        )));
    }
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::InvalidConfig(format!(
            "train fraction must be strictly between 0 and 1, got {train_fraction}"
        )));
    }
    let horizon = sampler.hypothesis.horizon;
    if !(0.0..=horizon).contains(&t_pred) {
        return Err(Error::TimeOutOfRange { t_pred, t_min: 0.0, t_max: horizon });
    }

    let n_train = ((n_total as f64 * train_fraction).round() as usize).clamp(1, n_total - 1);
    let in_train = {
        use rand::seq::SliceRandom;
        use rand::SeedableRng;
        // The split has its own derived stream so adding draws to the
        // sampler never reshuffles it.
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(crate::seed::splitmix64(!seed));
        let mut idx: Vec<usize> = (0..n_total).collect();
        idx.shuffle(&mut rng);
        let mut mask = vec![false; n_total];
        for &i in &idx[..n_train] {
            mask[i] = true;
        }
        mask
    };

    let train_dir = out_dir.join("train");
    let val_dir = out_dir.join("val");
    std::fs::create_dir_all(&train_dir).map_err(|e| Error::io(train_dir.display().to_string(), e))?;
    std::fs::create_dir_all(&val_dir).map_err(|e| Error::io(val_dir.display().to_string(), e))?;

    let mut train = Vec::with_capacity(n_train);
    let mut val = Vec::with_capacity(n_total - n_train);
    for index in 0..n_total {
        let scenario = sample_scenario_with(template, scenario_seed(seed, index), sampler)?;
        let (aog, _report) = build_aog(&scenario, grid)?;
        let pog = compute_ground_truth_pog(&scenario, grid, t_pred)?;
        let qpog = quantize_pog(&pog);

        let sub = if in_train[index] { "train" } else { "val" };
        let rec = DatasetRecord {
            index,
            aog: format!("{sub}/s{index:05}.aog.pogg"),
            pog: format!("{sub}/s{index:05}.pog.pogg"),
            qpog: format!("{sub}/s{index:05}.qpog.pogg"),
        };
        save_grid(&out_dir.join(&rec.aog), &aog_to_bytes(&aog))?;
        save_grid(&out_dir.join(&rec.pog), &pog_to_bytes(&pog))?;
        save_grid(&out_dir.join(&rec.qpog), &quantized_to_bytes(&qpog))?;
        if in_train[index] {
            train.push(rec);
        } else {
            val.push(rec);
        }
    }

    let manifest = DatasetManifest {
        version: 1,
        seed,
        n_total,
        n_train,
        n_val: n_total - n_train,
        train_fraction,
        t_pred,
        road: template.clone(),
        grid: grid.clone(),
        sampler: sampler.clone(),
        config_hash: dataset_config_hash(template, grid, t_pred, sampler),
        train,
        val,
    };
    manifest.save(out_dir)?;
    Ok(manifest)
}
