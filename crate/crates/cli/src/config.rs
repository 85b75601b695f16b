//! Run configuration: one JSON file per run, strict about unknown fields,
//! with a desk-scale default. Individual fields can be overridden from the
//! command line; the resolved config is written into every output directory
//! so each artifact records how to reproduce it.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use pogrid_core::deconvnet::ConvTrainSpec;
use pogrid_core::grid::{GridConfig, AOG_ATTRIBUTES};
use pogrid_core::pipelines::{Arch1Params, Arch2Params, Arch3Params};
use pogrid_core::scenario::sampler::SamplerConfig;
use pogrid_core::scenario::{LayoutKind, RoadLayout};
use pogrid_core::{autoencoder, forest, Error, Result};

pub const RUN_CONFIG_NAME: &str = "run_config.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub grid: GridConfig,
    pub road: RoadLayout,
    pub sampler: SamplerConfig,
    /// Prediction instant evaluated by the ground truth and all predictors.
    pub t_pred: f64,
    pub n_total: usize,
    pub train_fraction: f64,
    pub seed: u64,
    pub dataset_dir: PathBuf,
    /// Bundles land in `<bundle_dir>/<architecture>/`.
    pub bundle_dir: PathBuf,
    pub report_dir: PathBuf,
    pub arch1: Arch1Params,
    pub arch2: Arch2Params,
    pub arch3: Arch3Params,
}

impl Default for RunConfig {
    /// Desk scale: a 20×20 grid over the same 40 m extent the full-scale
    /// setup covers at 80×80, 2500 scenarios split 2000/500.
    fn default() -> Self {
        let sda = autoencoder::TrainSpec {
            epochs: 150,
            corruption: autoencoder::CorruptionSpec::gaussian(0.05),
            ..autoencoder::TrainSpec::default()
        };
        let forest = forest::ForestParams {
            n_trees: 12,
            max_depth: Some(12),
            min_samples_leaf: 5,
            ..forest::ForestParams::default()
        };
        RunConfig {
            grid: GridConfig::ego_centered(20, 20, 2.0, AOG_ATTRIBUTES),
            road: RoadLayout::four_way_open(),
            sampler: SamplerConfig::default(),
            t_pred: 1.0,
            n_total: 2500,
            train_fraction: 0.8,
            seed: 0,
            dataset_dir: PathBuf::from("out/dataset"),
            bundle_dir: PathBuf::from("out/bundles"),
            report_dir: PathBuf::from("out/report"),
            arch1: Arch1Params {
                hidden_sizes: vec![120, 60, 30],
                sda: sda.clone(),
                forest: forest.clone(),
            },
            arch2: Arch2Params {
                hidden_sizes_in: vec![120, 60, 30],
                hidden_sizes_out: vec![120, 60, 30],
                sda_in: sda.clone(),
                sda_out: autoencoder::TrainSpec { rng_seed: 1, ..sda },
                forest: forest::ForestParams { rng_seed: 1, ..forest },
            },
            arch3: Arch3Params {
                features: 12,
                kernel: 3,
                rng_seed: 0,
                train: ConvTrainSpec { epochs: 100, ..ConvTrainSpec::default() },
            },
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        let config: RunConfig = serde_json::from_str(&text)
            .map_err(|e| Error::Json { path: path.display().to_string(), source: e })?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        self.grid.validate()?;
        self.sampler.validate()?;
        self.arch1.sda.validate()?;
        self.arch2.sda_in.validate()?;
        self.arch2.sda_out.validate()?;
        self.arch3.train.validate()?;
        for (name, sizes) in [
            ("arch1.hidden_sizes", &self.arch1.hidden_sizes),
            ("arch2.hidden_sizes_in", &self.arch2.hidden_sizes_in),
            ("arch2.hidden_sizes_out", &self.arch2.hidden_sizes_out),
        ] {
            if sizes.is_empty() || sizes.contains(&0) {
                return Err(Error::InvalidConfig(format!(
                    "{name} must list at least one non-zero layer size"
                )));
            }
        }
        if self.arch3.features == 0 || self.arch3.kernel == 0 {
            return Err(Error::InvalidConfig(
                "arch3 needs non-zero feature count and kernel size".into(),
            ));
        }
        Ok(())
    }

    /// Write the resolved config into an output directory.
    pub fn write_into(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
        let path = dir.join(RUN_CONFIG_NAME);
        let text = serde_json::to_string_pretty(self)
            .map_err(|e| Error::Json { path: path.display().to_string(), source: e })?;
        std::fs::write(&path, text).map_err(|e| Error::io(path.display().to_string(), e))
    }
}

/// Field-level command-line overrides, applied on top of the loaded file.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub n_total: Option<usize>,
    pub train_fraction: Option<f64>,
    pub t_pred: Option<f64>,
    pub rows: Option<usize>,
    pub cols: Option<usize>,
    pub cell: Option<f64>,
    pub road: Option<LayoutKind>,
    pub hypotheses: Option<usize>,
    pub dataset_dir: Option<PathBuf>,
    pub bundle_dir: Option<PathBuf>,
    pub report_dir: Option<PathBuf>,
}

impl Overrides {
    pub fn apply(&self, config: &mut RunConfig) {
        if let Some(v) = self.seed {
            config.seed = v;
        }
        if let Some(v) = self.n_total {
            config.n_total = v;
        }
        if let Some(v) = self.train_fraction {
            config.train_fraction = v;
        }
        if let Some(v) = self.t_pred {
            config.t_pred = v;
        }
        if self.rows.is_some() || self.cols.is_some() || self.cell.is_some() {
            // Shape overrides rebuild the ego-centered geometry; a custom
            // origin from the file survives only when none of them is given.
            config.grid = GridConfig::ego_centered(
                self.rows.unwrap_or(config.grid.rows),
                self.cols.unwrap_or(config.grid.cols),
                self.cell.unwrap_or(config.grid.cell_length),
                config.grid.attributes,
            );
        }
        if let Some(kind) = self.road {
            config.road = RoadLayout::from_kind(kind);
        }
        if let Some(s) = self.hypotheses {
            config.sampler.hypothesis.count = s;
        }
        if let Some(ref v) = self.dataset_dir {
            config.dataset_dir = v.clone();
        }
        if let Some(ref v) = self.bundle_dir {
            config.bundle_dir = v.clone();
        }
        if let Some(ref v) = self.report_dir {
            config.report_dir = v.clone();
        }
    }
}

/// Resolve the effective config: file (or desk default), then overrides,
/// then validation.
pub fn resolve(config_path: Option<&Path>, overrides: &Overrides) -> Result<RunConfig> {
    let mut config = match config_path {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    overrides.apply(&mut config);
    config.validate()?;
    Ok(config)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_is_valid_and_round_trips_through_json() {
        let config = RunConfig::default();
        config.validate().unwrap();
        assert_eq!(config.grid.rows * config.grid.cols, 400);
        assert_eq!(config.sampler.hypothesis.count, 3);
        let n_train = (config.n_total as f64 * config.train_fraction).round() as usize;
        assert_eq!(n_train, 2000);

        let text = serde_json::to_string_pretty(&config).unwrap();
        let back: RunConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(config, back);
    }

    #[test]
    fn unknown_fields_are_rejected() {
        let mut v: serde_json::Value =
            serde_json::to_value(RunConfig::default()).unwrap();
        v.as_object_mut().unwrap().insert("not_a_field".into(), 1.into());
        let err = serde_json::from_value::<RunConfig>(v).unwrap_err();
        assert!(err.to_string().contains("not_a_field"));
    }

    #[test]
    fn overrides_replace_individual_fields() {
        let mut config = RunConfig::default();
        let overrides = Overrides {
            seed: Some(7),
            rows: Some(12),
            cell: Some(1.0),
            road: Some(LayoutKind::FourWayLeftNoEntry),
            hypotheses: Some(2),
            ..Overrides::default()
        };
        overrides.apply(&mut config);
        assert_eq!(config.seed, 7);
        assert_eq!(config.grid.rows, 12);
        assert_eq!(config.grid.cols, 20);
        assert_eq!(config.grid.cell_length, 1.0);
        assert_eq!(config.road.kind, LayoutKind::FourWayLeftNoEntry);
        assert_eq!(config.sampler.hypothesis.count, 2);
        // Geometry stays ego-centered after a shape override.
        assert_eq!(
            config.grid,
            GridConfig::ego_centered(12, 20, 1.0, AOG_ATTRIBUTES)
        );
    }

    #[test]
    fn bad_values_fail_validation() {
        let mut config = RunConfig::default();
        config.arch1.hidden_sizes.clear();
        assert!(config.validate().is_err());

        let mut config = RunConfig::default();
        config.arch3.features = 0;
        assert!(config.validate().is_err());
    }
}
