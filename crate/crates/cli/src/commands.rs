//! The five subcommands as library functions: structured results out,
//! printing left to the binary. Each command is deterministic given its
//! config and seed, never mutates its inputs, and stamps its output
//! directory with the resolved run config.

use std::path::{Path, PathBuf};

use pogrid_core::grid::io::{load_grid, pog_to_bytes, save_grid, GridGeometry};
use pogrid_core::pipelines::{
    self, evaluate, load_predictor, save_predictor, ArchitectureId, DatasetContext, Scenario,
    TrainedPredictor,
};
use pogrid_core::scenario::dataset::{generate_dataset_with, DatasetManifest, MANIFEST_NAME};
use pogrid_core::{Error, Result};

use crate::config::RunConfig;
use crate::render;

#[derive(Debug)]
pub struct GenerateOutcome {
    pub manifest_path: PathBuf,
    pub manifest: DatasetManifest,
}

pub fn cmd_generate(config: &RunConfig) -> Result<GenerateOutcome> {
    let manifest = generate_dataset_with(
        &config.road,
        config.n_total,
        config.train_fraction,
        config.seed,
        &config.grid,
        config.t_pred,
        &config.dataset_dir,
        &config.sampler,
    )?;
    config.write_into(&config.dataset_dir)?;
    Ok(GenerateOutcome { manifest_path: config.dataset_dir.join(MANIFEST_NAME), manifest })
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub bundle_dir: PathBuf,
    /// Human-readable loss report: per-epoch losses for the network,
    /// reconstruction quality for autoencoder stacks.
    pub log_lines: Vec<String>,
}

fn load_train_split(config: &RunConfig) -> Result<(DatasetManifest, Vec<Scenario>)> {
    let manifest = DatasetManifest::load(&config.dataset_dir)?;
    let data = manifest.load_split(&config.dataset_dir, &manifest.train)?;
    Ok((manifest, data))
}

fn recon_line(name: &str, sda: &pogrid_core::autoencoder::SdaModel, rows: &[Vec<f64>]) -> Result<String> {
    let rmse = pipelines::stack_reconstruction_rmse(sda, rows)?;
    let scale = pipelines::mean_abs_cell_value(rows);
    Ok(format!("{name}: reconstruction rmse {rmse:.6} (mean abs cell value {scale:.6})"))
}

pub fn cmd_train(config: &RunConfig, arch: ArchitectureId) -> Result<TrainOutcome> {
    let (manifest, data) = load_train_split(config)?;
    let ctx = DatasetContext::from_manifest(&manifest);
    let mut log_lines = Vec::new();
    let predictor = match arch {
        ArchitectureId::Arch1 => {
            let p = pipelines::train_arch1(&data, &ctx, &config.arch1)?;
            if let pipelines::PredictorComponents::CellClassifiers { ref sda, .. } = p.components {
                let rows: Vec<Vec<f64>> =
                    data.iter().map(|(a, _, _)| a.as_slice().to_vec()).collect();
                log_lines.push(recon_line("input stack", sda, &rows)?);
            }
            p
        }
        ArchitectureId::Arch2 => {
            let p = pipelines::train_arch2(&data, &ctx, &config.arch2)?;
            if let pipelines::PredictorComponents::LatentRegressors {
                ref sda_in, ref sda_out, ..
            } = p.components
            {
                let in_rows: Vec<Vec<f64>> =
                    data.iter().map(|(a, _, _)| a.as_slice().to_vec()).collect();
                let out_rows: Vec<Vec<f64>> =
                    data.iter().map(|(_, p, _)| p.as_slice().to_vec()).collect();
                log_lines.push(recon_line("input stack", sda_in, &in_rows)?);
                log_lines.push(recon_line("output stack", sda_out, &out_rows)?);
            }
            p
        }
        ArchitectureId::Arch3 => {
            let (p, losses) = pipelines::train_arch3(&data, &ctx, &config.arch3)?;
            for (epoch, loss) in losses.iter().enumerate() {
                log_lines.push(format!("epoch {epoch}: loss {loss:.6}"));
            }
            p
        }
    };
    let bundle_dir = config.bundle_dir.join(arch.as_str());
    save_predictor(&bundle_dir, &predictor)?;
    config.write_into(&bundle_dir)?;
    Ok(TrainOutcome { bundle_dir, log_lines })
}

#[derive(Debug)]
pub struct EvalOutcome {
    pub report_dir: PathBuf,
    pub per_scenario_path: PathBuf,
    pub summary_path: PathBuf,
    pub histogram_path: PathBuf,
    pub summary_lines: Vec<String>,
}

pub const PER_SCENARIO_CSV: &str = "per_scenario.csv";
pub const SUMMARY_CSV: &str = "summary.csv";
pub const HISTOGRAM_CSV: &str = "histogram.csv";

/// Architectures whose bundles exist under the configured bundle root.
pub fn available_bundles(config: &RunConfig) -> Vec<ArchitectureId> {
    ArchitectureId::ALL
        .into_iter()
        .filter(|a| {
            config
                .bundle_dir
                .join(a.as_str())
                .join(pipelines::PREDICTOR_MANIFEST_NAME)
                .is_file()
        })
        .collect()
}

pub fn cmd_eval(config: &RunConfig, archs: &[ArchitectureId]) -> Result<EvalOutcome> {
    if archs.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "no predictor bundles under {}",
            config.bundle_dir.display()
        )));
    }
    let manifest = DatasetManifest::load(&config.dataset_dir)?;
    let mut predictors = Vec::with_capacity(archs.len());
    for arch in archs {
        let p = load_predictor(&config.bundle_dir.join(arch.as_str()))?;
        if p.id() != *arch {
            return Err(Error::InvalidArgument(format!(
                "bundle under {} holds {}, expected {arch}",
                config.bundle_dir.join(arch.as_str()).display(),
                p.id()
            )));
        }
        p.check_dataset(&manifest)?;
        predictors.push(p);
    }
    let data = manifest.load_split(&config.dataset_dir, &manifest.val)?;
    let ids: Vec<usize> = manifest.val.iter().map(|r| r.index).collect();
    let refs: Vec<&TrainedPredictor> = predictors.iter().collect();
    let report = evaluate(&refs, &data, Some(&ids))?;

    std::fs::create_dir_all(&config.report_dir)
        .map_err(|e| Error::io(config.report_dir.display().to_string(), e))?;
    let write = |name: &str, text: String| -> Result<PathBuf> {
        let path = config.report_dir.join(name);
        std::fs::write(&path, text).map_err(|e| Error::io(path.display().to_string(), e))?;
        Ok(path)
    };
    let per_scenario_path = write(PER_SCENARIO_CSV, report.per_scenario_csv())?;
    let summary_path = write(SUMMARY_CSV, report.summary_csv())?;
    let histogram_path = write(HISTOGRAM_CSV, report.histogram_csv())?;
    config.write_into(&config.report_dir)?;

    let fmt_band = |v: Option<f64>, n: usize| match v {
        Some(v) => format!("{v:.4} ({n} scenarios)"),
        None => "n/a".to_string(),
    };
    let summary_lines = report
        .summaries
        .iter()
        .map(|s| {
            format!(
                "{}: eps_all {:.4}, eps_low {}, eps_mid {}, eps_high {}, mean latency {:.0} us",
                s.architecture,
                s.mean_eps_all,
                fmt_band(s.mean_eps_low, s.scored_low),
                fmt_band(s.mean_eps_mid, s.scored_mid),
                fmt_band(s.mean_eps_high, s.scored_high),
                s.mean_latency_us,
            )
        })
        .collect();
    Ok(EvalOutcome {
        report_dir: config.report_dir.clone(),
        per_scenario_path,
        summary_path,
        histogram_path,
        summary_lines,
    })
}

/// Run one bundle on one augmented grid file; write the predicted grid.
pub fn cmd_predict(bundle: &Path, input: &Path, output: &Path) -> Result<()> {
    let predictor = load_predictor(bundle)?;
    let raw = load_grid(input)?;
    let aog = raw.to_aog(&GridGeometry::of(&predictor.grid))?;
    let pog = predictor.predict(&aog)?;
    save_grid(output, &pog_to_bytes(&pog))
}

pub fn cmd_render(input: &Path, output: &Path) -> Result<()> {
    render::render_file(input, output)
}

#[cfg(test)]
mod tests {
    use super::*;
    use pogrid_core::deconvnet::ConvTrainSpec;
    use pogrid_core::grid::io::read_grid_bytes;
    use pogrid_core::grid::{GridConfig, AOG_ATTRIBUTES};
    use pogrid_core::pipelines::{Arch1Params, Arch3Params};

    /// A config small enough that every command finishes in well under a
    /// second, rooted inside a scratch directory.
    fn tiny_config(root: &Path) -> RunConfig {
        let mut config = RunConfig::default();
        config.grid = GridConfig::ego_centered(8, 8, 5.0, AOG_ATTRIBUTES);
        config.n_total = 8;
        config.train_fraction = 0.75;
        config.dataset_dir = root.join("dataset");
        config.bundle_dir = root.join("bundles");
        config.report_dir = root.join("report");
        config.arch1 = Arch1Params {
            hidden_sizes: vec![16, 8],
            sda: pogrid_core::autoencoder::TrainSpec {
                epochs: 10,
                ..pogrid_core::autoencoder::TrainSpec::default()
            },
            forest: pogrid_core::forest::ForestParams {
                n_trees: 3,
                ..pogrid_core::forest::ForestParams::default()
            },
        };
        config.arch3 = Arch3Params {
            features: 3,
            kernel: 3,
            rng_seed: 0,
            train: ConvTrainSpec { epochs: 3, batch_size: 4, ..ConvTrainSpec::default() },
        };
        config
    }

    #[test]
    fn generate_train_eval_predict_render_chain_works() {
        let dir = tempfile::tempdir().unwrap();
        let config = tiny_config(dir.path());

        let generated = cmd_generate(&config).unwrap();
        assert!(generated.manifest_path.is_file());
        assert!(config.dataset_dir.join(crate::config::RUN_CONFIG_NAME).is_file());
        assert_eq!(generated.manifest.n_train, 6);
        assert_eq!(generated.manifest.n_val, 2);

        let trained = cmd_train(&config, ArchitectureId::Arch1).unwrap();
        assert!(trained.bundle_dir.join("predictor.json").is_file());
        assert!(!trained.log_lines.is_empty());
        let trained3 = cmd_train(&config, ArchitectureId::Arch3).unwrap();
        assert_eq!(trained3.log_lines.len(), 3);

        assert_eq!(
            available_bundles(&config),
            vec![ArchitectureId::Arch1, ArchitectureId::Arch3]
        );
        let evaluated = cmd_eval(&config, &available_bundles(&config)).unwrap();
        assert!(evaluated.per_scenario_path.is_file());
        assert!(evaluated.summary_path.is_file());
        assert!(evaluated.histogram_path.is_file());
        assert_eq!(evaluated.summary_lines.len(), 2);
        let per = std::fs::read_to_string(&evaluated.per_scenario_path).unwrap();
        // Two architectures over the validation split.
        assert_eq!(per.lines().count(), 1 + 2 * 2);

        // Predict on one validation grid, then render both grids.
        let rec = &generated.manifest.val[0];
        let aog_path = config.dataset_dir.join(&rec.aog);
        let pog_path = dir.path().join("predicted.pogg");
        cmd_predict(&trained.bundle_dir, &aog_path, &pog_path).unwrap();
        let raw = read_grid_bytes(&std::fs::read(&pog_path).unwrap()).unwrap();
        assert_eq!((raw.rows, raw.cols, raw.attributes), (8, 8, 1));
        assert_eq!(raw.t_pred, 1.0);

        let pgm_path = dir.path().join("predicted.pgm");
        cmd_render(&pog_path, &pgm_path).unwrap();
        let pgm = std::fs::read(&pgm_path).unwrap();
        assert!(pgm.starts_with(b"P5\n8 8\n255\n"));
        assert_eq!(pgm.len(), 11 + 64);
    }

    #[test]
    fn eval_refuses_a_dataset_with_a_different_config_hash() {
        let dir = tempfile::tempdir().unwrap();
        let config = tiny_config(dir.path());
        cmd_generate(&config).unwrap();
        cmd_train(&config, ArchitectureId::Arch1).unwrap();

        // Regenerate the dataset with different geometry: new config hash.
        let mut other = config.clone();
        other.grid = GridConfig::ego_centered(8, 8, 4.0, AOG_ATTRIBUTES);
        cmd_generate(&other).unwrap();

        let err = cmd_eval(&other, &[ArchitectureId::Arch1]).unwrap_err();
        assert!(matches!(err, Error::ConfigHashMismatch { .. }), "got: {err}");
    }

    #[test]
    fn train_without_a_dataset_reports_the_missing_path() {
        let dir = tempfile::tempdir().unwrap();
        let config = tiny_config(dir.path());
        let err = cmd_train(&config, ArchitectureId::Arch1).unwrap_err();
        assert!(format!("{err}").contains("manifest.json"), "got: {err}");
    }

    #[test]
    fn rerunning_generate_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let config = tiny_config(dir.path());
        let first = cmd_generate(&config).unwrap();
        let bytes_a = std::fs::read(&first.manifest_path).unwrap();
        let grid_a =
            std::fs::read(config.dataset_dir.join(&first.manifest.train[0].aog)).unwrap();
        let second = cmd_generate(&config).unwrap();
        assert_eq!(bytes_a, std::fs::read(&second.manifest_path).unwrap());
        assert_eq!(
            grid_a,
            std::fs::read(config.dataset_dir.join(&second.manifest.train[0].aog)).unwrap()
        );
    }
}
