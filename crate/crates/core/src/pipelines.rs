//! The three prediction architectures wired end to end, plus the
//! validation-set evaluation that compares them.
//!
//! All three map an augmented occupancy grid to a predicted occupancy grid
//! for one prediction instant:
//!
//! 1. encode the AOG with a stacked autoencoder, then classify every output
//!    cell's quantized level with its own random forest;
//! 2. encode the AOG, regress the POG-side latent code with one forest per
//!    latent dimension, then decode with the POG-side autoencoder;
//! 3. run the convolution/deconvolution network directly.
//!
//! Trained predictors serialize to a bundle directory: one file per
//! component model plus a JSON manifest carrying the grid geometry, the
//! dataset config hash they were trained against, dims and seeds.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autoencoder::{self, SdaModel, TrainSpec};
use crate::deconvnet::{self, ConvNetConfig, ConvNetModel, ConvTrainSpec};
use crate::error::{Error, Result};
use crate::forest::{
    self, ForestGrid, ForestParams, ForestTask, RandomForest,
};
use crate::grid::metrics::{banded_pog_error, pog_error};
use crate::grid::quant::{LEVELS, N_LEVELS};
use crate::grid::{
    AugmentedOccupancyGrid, BandedError, GridConfig, PredictedOccupancyGrid, QuantizedPog,
    AOG_ATTRIBUTES,
};
use crate::scenario::dataset::DatasetManifest;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArchitectureId {
    Arch1,
    Arch2,
    Arch3,
}

impl ArchitectureId {
    pub const ALL: [ArchitectureId; 3] =
        [ArchitectureId::Arch1, ArchitectureId::Arch2, ArchitectureId::Arch3];

    pub fn as_str(self) -> &'static str {
        match self {
            ArchitectureId::Arch1 => "arch1",
            ArchitectureId::Arch2 => "arch2",
            ArchitectureId::Arch3 => "arch3",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "arch1" => Ok(ArchitectureId::Arch1),
            "arch2" => Ok(ArchitectureId::Arch2),
            "arch3" => Ok(ArchitectureId::Arch3),
            other => Err(Error::InvalidArgument(format!(
                "unknown architecture {other:?}, expected arch1|arch2|arch3"
            ))),
        }
    }
}

impl fmt::Display for ArchitectureId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One dataset record: observed state, ground-truth probabilities at the
/// prediction instant, and their quantization.
pub type Scenario = (AugmentedOccupancyGrid, PredictedOccupancyGrid, QuantizedPog);

/// What a predictor needs to know about the dataset it is trained on.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetContext {
    pub grid: GridConfig,
    pub t_pred: f64,
    pub config_hash: String,
}

impl DatasetContext {
    pub fn from_manifest(manifest: &DatasetManifest) -> Self {
        DatasetContext {
            grid: manifest.grid.clone(),
            t_pred: manifest.t_pred,
            config_hash: manifest.config_hash.clone(),
        }
    }
}

/// Architecture I hyperparameters. `hidden_sizes` excludes the input layer,
/// which is fixed by the grid (rows·cols·attributes).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Arch1Params {
    pub hidden_sizes: Vec<usize>,
    pub sda: TrainSpec,
    pub forest: ForestParams,
}

/// Architecture II hyperparameters: AOG-side stack, POG-side stack, and the
/// latent-to-latent regression forests.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Arch2Params {
    pub hidden_sizes_in: Vec<usize>,
    pub hidden_sizes_out: Vec<usize>,
    pub sda_in: TrainSpec,
    pub sda_out: TrainSpec,
    pub forest: ForestParams,
}

/// Architecture III hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Arch3Params {
    pub features: usize,
    pub kernel: usize,
    pub rng_seed: u64,
    pub train: ConvTrainSpec,
}

#[derive(Clone, Debug, PartialEq)]
pub enum PredictorComponents {
    /// Architecture I: shared encoder, one classification forest per cell.
    CellClassifiers { sda: SdaModel, forests: ForestGrid },
    /// Architecture II: encoder, per-latent regression forests, decoder.
    LatentRegressors { sda_in: SdaModel, forests: Vec<RandomForest>, sda_out: SdaModel },
    /// Architecture III.
    ConvNet { model: ConvNetModel },
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainedPredictor {
    /// Grid the predictor consumes (rows, cols, geometry, AOG attributes).
    pub grid: GridConfig,
    pub t_pred: f64,
    /// Hash of the dataset configuration this predictor was trained on.
    pub config_hash: String,
    /// Seeds used during training, by component name.
    pub seeds: BTreeMap<String, u64>,
    pub components: PredictorComponents,
}

impl TrainedPredictor {
    pub fn id(&self) -> ArchitectureId {
        match self.components {
            PredictorComponents::CellClassifiers { .. } => ArchitectureId::Arch1,
            PredictorComponents::LatentRegressors { .. } => ArchitectureId::Arch2,
            PredictorComponents::ConvNet { .. } => ArchitectureId::Arch3,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.grid.validate()?;
        if !(self.t_pred.is_finite() && self.t_pred >= 0.0) {
            return Err(Error::InvalidConfig(format!(
                "prediction instant must be finite and non-negative, got {}",
                self.t_pred
            )));
        }
        let cells = self.grid.rows * self.grid.cols;
        let aog_dim = cells * AOG_ATTRIBUTES;
        match &self.components {
            PredictorComponents::CellClassifiers { sda, forests } => {
                sda.validate()?;
                forests.validate()?;
                expect_dim("encoder input", aog_dim, sda.input_dim())?;
                if (forests.rows, forests.cols) != (self.grid.rows, self.grid.cols) {
                    return Err(Error::ShapeMismatch {
                        expected: format!("{}x{}", self.grid.rows, self.grid.cols),
                        got: format!("{}x{}", forests.rows, forests.cols),
                    });
                }
                for f in &forests.forests {
                    expect_dim("cell forest features", sda.code_dim(), f.n_features)?;
                    match f.task {
                        ForestTask::Classification { n_classes } if n_classes <= N_LEVELS => {}
                        _ => {
                            return Err(Error::InvalidConfig(
                                "cell forests must classify quantized levels".into(),
                            ))
                        }
                    }
                }
            }
            PredictorComponents::LatentRegressors { sda_in, forests, sda_out } => {
                sda_in.validate()?;
                sda_out.validate()?;
                expect_dim("encoder input", aog_dim, sda_in.input_dim())?;
                expect_dim("decoder output", cells, sda_out.input_dim())?;
                expect_dim("latent forests", sda_out.code_dim(), forests.len())?;
                for f in forests {
                    f.validate()?;
                    expect_dim("latent forest features", sda_in.code_dim(), f.n_features)?;
                    if f.task != ForestTask::Regression {
                        return Err(Error::InvalidConfig(
                            "latent forests must be regressors".into(),
                        ));
                    }
                }
            }
            PredictorComponents::ConvNet { model } => {
                model.validate()?;
                let cfg = &model.config;
                if (cfg.rows, cfg.cols) != (self.grid.rows, self.grid.cols) {
                    return Err(Error::ShapeMismatch {
                        expected: format!("{}x{}", self.grid.rows, self.grid.cols),
                        got: format!("{}x{}", cfg.rows, cfg.cols),
                    });
                }
                expect_dim("network input channels", AOG_ATTRIBUTES, cfg.in_channels)?;
                expect_dim("network classes", N_LEVELS, cfg.n_classes)?;
            }
        }
        Ok(())
    }

    /// Predicted occupancy probabilities for one observed grid.
    /// Architectures I and III emit quantized level values; II emits
    /// continuous values clamped to [0, 1].
    pub fn predict(&self, aog: &AugmentedOccupancyGrid) -> Result<PredictedOccupancyGrid> {
        self.grid.check_shape(aog.config())?;
        match &self.components {
            PredictorComponents::CellClassifiers { sda, forests } => {
                let code = sda.encode(aog.as_slice())?;
                let classes = forests.predict_classes(&code)?;
                let probs = classes.iter().map(|&c| LEVELS[c as usize]).collect();
                PredictedOccupancyGrid::from_probs(self.grid.clone(), self.t_pred, probs)
            }
            PredictorComponents::LatentRegressors { sda_in, forests, sda_out } => {
                let code = sda_in.encode(aog.as_slice())?;
                let latent: Vec<f64> =
                    forests.iter().map(|f| f.predict_regression(&code)).collect::<Result<_>>()?;
                let decoded = sda_out.decode(&latent)?;
                let probs = decoded.iter().map(|v| v.clamp(0.0, 1.0)).collect();
                PredictedOccupancyGrid::from_probs(self.grid.clone(), self.t_pred, probs)
            }
            PredictorComponents::ConvNet { model } => {
                Ok(deconvnet::predict_pog(model, aog, self.t_pred)?.to_pog())
            }
        }
    }

    /// A predictor only runs against the dataset configuration it was
    /// trained on.
    pub fn check_dataset(&self, manifest: &DatasetManifest) -> Result<()> {
        if self.config_hash != manifest.config_hash {
            return Err(Error::ConfigHashMismatch {
                bundle: self.config_hash.clone(),
                dataset: manifest.config_hash.clone(),
            });
        }
        Ok(())
    }
}

/// Mean over samples of the per-component reconstruction RMSE through a
/// full encode/decode round trip. The quality gauge for trained stacks.
pub fn stack_reconstruction_rmse(sda: &SdaModel, rows: &[Vec<f64>]) -> Result<f64> {
    if rows.is_empty() {
        return Err(Error::InvalidArgument("no rows to reconstruct".into()));
    }
    let per_sample: Vec<f64> = rows
        .par_iter()
        .map(|r| {
            let recon = sda.decode(&sda.encode(r)?)?;
            crate::grid::metrics::reconstruction_rmse(&recon, r)
        })
        .collect::<Result<_>>()?;
    Ok(per_sample.iter().sum::<f64>() / per_sample.len() as f64)
}

/// Mean absolute component value across all samples; the scale that
/// reconstruction RMSE is judged against.
pub fn mean_abs_cell_value(rows: &[Vec<f64>]) -> f64 {
    let mut sum = 0.0;
    let mut n = 0usize;
    for r in rows {
        for &v in r {
            sum += v.abs();
            n += 1;
        }
    }
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

fn expect_dim(context: &'static str, expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(Error::DimensionMismatch { context, expected, got });
    }
    Ok(())
}

fn check_training_set(data: &[Scenario], ctx: &DatasetContext) -> Result<()> {
    ctx.grid.validate()?;
    if data.is_empty() {
        return Err(Error::InvalidArgument("training set is empty".into()));
    }
    for (aog, pog, qpog) in data {
        ctx.grid.check_shape(aog.config())?;
        if pog.config().rows != ctx.grid.rows
            || pog.config().cols != ctx.grid.cols
            || qpog.config().rows != ctx.grid.rows
            || qpog.config().cols != ctx.grid.cols
        {
            return Err(Error::ShapeMismatch {
                expected: format!("{}x{}", ctx.grid.rows, ctx.grid.cols),
                got: format!("{}x{}", pog.config().rows, pog.config().cols),
            });
        }
    }
    Ok(())
}

fn aog_rows(data: &[Scenario]) -> Vec<Vec<f64>> {
    data.iter().map(|(a, _, _)| a.as_slice().to_vec()).collect()
}

fn pog_rows(data: &[Scenario]) -> Vec<Vec<f64>> {
    data.iter().map(|(_, p, _)| p.as_slice().to_vec()).collect()
}

fn encode_rows(sda: &SdaModel, rows: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    rows.par_iter().map(|r| sda.encode(r)).collect()
}

fn stack_sizes(input_dim: usize, hidden: &[usize]) -> Result<Vec<usize>> {
    if hidden.is_empty() {
        return Err(Error::InvalidConfig("need at least one hidden layer size".into()));
    }
    let mut sizes = Vec::with_capacity(hidden.len() + 1);
    sizes.push(input_dim);
    sizes.extend_from_slice(hidden);
    Ok(sizes)
}

/// Architecture I: stacked autoencoder over flattened AOGs, then one
/// classification forest per grid cell on (code, quantized level).
pub fn train_arch1(
    data: &[Scenario],
    ctx: &DatasetContext,
    params: &Arch1Params,
) -> Result<TrainedPredictor> {
    check_training_set(data, ctx)?;
    let input_dim = ctx.grid.rows * ctx.grid.cols * AOG_ATTRIBUTES;
    let sizes = stack_sizes(input_dim, &params.hidden_sizes)?;
    let rows = aog_rows(data);
    let sda = autoencoder::train_stack(&rows, &sizes, &params.sda)?;
    let codes = encode_rows(&sda, &rows)?;
    let qpogs: Vec<QuantizedPog> = data.iter().map(|(_, _, q)| q.clone()).collect();
    let forests = forest::train_percell_forests(&codes, &qpogs, &params.forest)?;
    let predictor = TrainedPredictor {
        grid: ctx.grid.clone(),
        t_pred: ctx.t_pred,
        config_hash: ctx.config_hash.clone(),
        seeds: BTreeMap::from([
            ("sda".to_string(), params.sda.rng_seed),
            ("forests".to_string(), params.forest.rng_seed),
        ]),
        components: PredictorComponents::CellClassifiers { sda, forests },
    };
    predictor.validate()?;
    Ok(predictor)
}

/// Architecture II: AOG-side and POG-side stacks, plus one regression
/// forest per POG-side latent dimension.
pub fn train_arch2(
    data: &[Scenario],
    ctx: &DatasetContext,
    params: &Arch2Params,
) -> Result<TrainedPredictor> {
    check_training_set(data, ctx)?;
    let cells = ctx.grid.rows * ctx.grid.cols;
    let sizes_in = stack_sizes(cells * AOG_ATTRIBUTES, &params.hidden_sizes_in)?;
    let sizes_out = stack_sizes(cells, &params.hidden_sizes_out)?;

    let in_rows = aog_rows(data);
    let sda_in = autoencoder::train_stack(&in_rows, &sizes_in, &params.sda_in)?;
    let codes_in = encode_rows(&sda_in, &in_rows)?;

    let out_rows = pog_rows(data);
    let sda_out = autoencoder::train_stack(&out_rows, &sizes_out, &params.sda_out)?;
    let codes_out = encode_rows(&sda_out, &out_rows)?;

    let forests = forest::train_perlatent_forests(&codes_in, &codes_out, &params.forest)?;
    let predictor = TrainedPredictor {
        grid: ctx.grid.clone(),
        t_pred: ctx.t_pred,
        config_hash: ctx.config_hash.clone(),
        seeds: BTreeMap::from([
            ("sda_in".to_string(), params.sda_in.rng_seed),
            ("sda_out".to_string(), params.sda_out.rng_seed),
            ("forests".to_string(), params.forest.rng_seed),
        ]),
        components: PredictorComponents::LatentRegressors { sda_in, forests, sda_out },
    };
    predictor.validate()?;
    Ok(predictor)
}

/// Architecture III: the conv/deconv network on (AOG, quantized POG)
/// pairs. Also returns the per-epoch training-loss curve.
pub fn train_arch3(
    data: &[Scenario],
    ctx: &DatasetContext,
    params: &Arch3Params,
) -> Result<(TrainedPredictor, Vec<f64>)> {
    check_training_set(data, ctx)?;
    let config = ConvNetConfig {
        rows: ctx.grid.rows,
        cols: ctx.grid.cols,
        in_channels: AOG_ATTRIBUTES,
        features: params.features,
        kernel: params.kernel,
        n_classes: N_LEVELS,
        rng_seed: params.rng_seed,
    };
    let aogs: Vec<AugmentedOccupancyGrid> = data.iter().map(|(a, _, _)| a.clone()).collect();
    let qpogs: Vec<QuantizedPog> = data.iter().map(|(_, _, q)| q.clone()).collect();
    let (model, losses) = deconvnet::train_convnet(&aogs, &qpogs, &config, &params.train)?;
    let predictor = TrainedPredictor {
        grid: ctx.grid.clone(),
        t_pred: ctx.t_pred,
        config_hash: ctx.config_hash.clone(),
        seeds: BTreeMap::from([
            ("init".to_string(), params.rng_seed),
            ("train".to_string(), params.train.rng_seed),
        ]),
        components: PredictorComponents::ConvNet { model },
    };
    predictor.validate()?;
    Ok((predictor, losses))
}

/// One evaluated scenario for one architecture.
#[derive(Clone, Debug, PartialEq)]
pub struct ScenarioEval {
    pub scenario: usize,
    pub architecture: ArchitectureId,
    /// Unbanded prediction error against the continuous ground truth.
    pub eps_all: f64,
    pub banded: BandedError,
    pub latency_us: f64,
}

/// Per-architecture aggregate. Band means average the scenarios whose band
/// had contributing cells; `scored_*` counts them.
#[derive(Clone, Debug, PartialEq)]
pub struct ArchSummary {
    pub architecture: ArchitectureId,
    pub n_scenarios: usize,
    pub mean_eps_all: f64,
    pub mean_eps_low: Option<f64>,
    pub mean_eps_mid: Option<f64>,
    pub mean_eps_high: Option<f64>,
    pub scored_low: usize,
    pub scored_mid: usize,
    pub scored_high: usize,
    pub mean_latency_us: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct HistogramBin {
    pub architecture: ArchitectureId,
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
}

pub const HISTOGRAM_BINS: usize = 20;

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    /// Architecture-major, scenarios in input order.
    pub records: Vec<ScenarioEval>,
    pub summaries: Vec<ArchSummary>,
    pub histogram: Vec<HistogramBin>,
}

/// Evaluate predictors on a validation set against the continuous ground
/// truth. `ids` labels the scenarios in the report (defaults to position).
/// Everything except the measured latencies is deterministic.
pub fn evaluate(
    predictors: &[&TrainedPredictor],
    data: &[Scenario],
    ids: Option<&[usize]>,
) -> Result<EvalReport> {
    if predictors.is_empty() || data.is_empty() {
        return Err(Error::InvalidArgument(
            "evaluation needs at least one predictor and one scenario".into(),
        ));
    }
    if let Some(ids) = ids {
        if ids.len() != data.len() {
            return Err(Error::DimensionMismatch {
                context: "scenario ids",
                expected: data.len(),
                got: ids.len(),
            });
        }
    }
    for p in predictors {
        p.validate()?;
    }

    let mut records = Vec::with_capacity(predictors.len() * data.len());
    for p in predictors {
        let arch = p.id();
        let evals: Vec<Result<ScenarioEval>> = data
            .par_iter()
            .enumerate()
            .map(|(k, (aog, gt, _))| {
                let start = Instant::now();
                let est = p.predict(aog)?;
                let latency_us = start.elapsed().as_secs_f64() * 1e6;
                Ok(ScenarioEval {
                    scenario: ids.map_or(k, |ids| ids[k]),
                    architecture: arch,
                    eps_all: pog_error(gt, &est)?,
                    banded: banded_pog_error(gt, &est)?,
                    latency_us,
                })
            })
            .collect();
        for e in evals {
            records.push(e?);
        }
    }

    let mut summaries = Vec::with_capacity(predictors.len());
    let mut histogram = Vec::with_capacity(predictors.len() * HISTOGRAM_BINS);
    for chunk in records.chunks(data.len()) {
        summaries.push(summarize(chunk));
        histogram.extend(histogram_of(chunk));
    }
    Ok(EvalReport { records, summaries, histogram })
}

fn summarize(records: &[ScenarioEval]) -> ArchSummary {
    let n = records.len();
    let mean_eps_all = records.iter().map(|r| r.eps_all).sum::<f64>() / n as f64;
    let band = |get: fn(&BandedError) -> Option<f64>| {
        let mut sum = 0.0;
        let mut count = 0usize;
        for r in records {
            if let Some(v) = get(&r.banded) {
                sum += v;
                count += 1;
            }
        }
        ((count > 0).then(|| sum / count as f64), count)
    };
    let (mean_eps_low, scored_low) = band(|b| b.eps_low);
    let (mean_eps_mid, scored_mid) = band(|b| b.eps_mid);
    let (mean_eps_high, scored_high) = band(|b| b.eps_high);
    ArchSummary {
        architecture: records[0].architecture,
        n_scenarios: n,
        mean_eps_all,
        mean_eps_low,
        mean_eps_mid,
        mean_eps_high,
        scored_low,
        scored_mid,
        scored_high,
        mean_latency_us: records.iter().map(|r| r.latency_us).sum::<f64>() / n as f64,
    }
}

/// Histogram of per-scenario unbanded errors over [0, 1] in uniform bins;
/// errors at or above 1 land in the last bin, so counts always sum to the
/// scenario count.
fn histogram_of(records: &[ScenarioEval]) -> Vec<HistogramBin> {
    let mut counts = vec![0usize; HISTOGRAM_BINS];
    for r in records {
        let bin = ((r.eps_all * HISTOGRAM_BINS as f64) as usize).min(HISTOGRAM_BINS - 1);
        counts[bin] += 1;
    }
    counts
        .into_iter()
        .enumerate()
        .map(|(k, count)| HistogramBin {
            architecture: records[0].architecture,
            lo: k as f64 / HISTOGRAM_BINS as f64,
            hi: (k + 1) as f64 / HISTOGRAM_BINS as f64,
            count,
        })
        .collect()
}

fn opt_field(v: Option<f64>) -> String {
    v.map_or(String::new(), |x| x.to_string())
}

impl EvalReport {
    /// One row per (architecture, scenario). The latency column is a
    /// wall-clock measurement and is the only nondeterministic field.
    pub fn per_scenario_csv(&self) -> String {
        let mut out = String::from("scenario,architecture,eps_all,eps_low,eps_mid,eps_high,latency_us\n");
        for r in &self.records {
            out.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                r.scenario,
                r.architecture,
                r.eps_all,
                opt_field(r.banded.eps_low),
                opt_field(r.banded.eps_mid),
                opt_field(r.banded.eps_high),
                r.latency_us,
            ));
        }
        out
    }

    pub fn summary_csv(&self) -> String {
        let mut out = String::from(
            "architecture,n_scenarios,mean_eps_all,mean_eps_low,scored_low,mean_eps_mid,scored_mid,mean_eps_high,scored_high,mean_latency_us\n",
        );
        for s in &self.summaries {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{}\n",
                s.architecture,
                s.n_scenarios,
                s.mean_eps_all,
                opt_field(s.mean_eps_low),
                s.scored_low,
                opt_field(s.mean_eps_mid),
                s.scored_mid,
                opt_field(s.mean_eps_high),
                s.scored_high,
                s.mean_latency_us,
            ));
        }
        out
    }

    pub fn histogram_csv(&self) -> String {
        let mut out = String::from("architecture,bin_lo,bin_hi,count\n");
        for b in &self.histogram {
            out.push_str(&format!("{},{},{},{}\n", b.architecture, b.lo, b.hi, b.count));
        }
        out
    }
}

pub const PREDICTOR_MANIFEST_NAME: &str = "predictor.json";
pub const PREDICTOR_BUNDLE_VERSION: u32 = 1;

const SDA1_FILE: &str = "sda1.sdam";
const SDA2_FILE: &str = "sda2.sdam";
const FOREST_GRID_FILE: &str = "forests.fgrd";
const FOREST_LIST_FILE: &str = "forests.flst";
const CONVNET_FILE: &str = "convnet.cnvm";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct PredictorManifest {
    version: u32,
    architecture: ArchitectureId,
    grid: GridConfig,
    t_pred: f64,
    config_hash: String,
    dims: BTreeMap<String, Vec<usize>>,
    seeds: BTreeMap<String, u64>,
    files: Vec<String>,
}

/// Write a predictor bundle: component model files plus `predictor.json`.
pub fn save_predictor(dir: &Path, predictor: &TrainedPredictor) -> Result<()> {
    predictor.validate()?;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    let mut dims = BTreeMap::new();
    let files: Vec<String> = match &predictor.components {
        PredictorComponents::CellClassifiers { sda, forests } => {
            autoencoder::save_sda(&dir.join(SDA1_FILE), sda)?;
            forest::save_forest_grid(&dir.join(FOREST_GRID_FILE), forests)?;
            dims.insert("sda".to_string(), sda.layer_sizes());
            dims.insert("forest_grid".to_string(), vec![forests.rows, forests.cols]);
            vec![SDA1_FILE.into(), FOREST_GRID_FILE.into()]
        }
        PredictorComponents::LatentRegressors { sda_in, forests, sda_out } => {
            autoencoder::save_sda(&dir.join(SDA1_FILE), sda_in)?;
            autoencoder::save_sda(&dir.join(SDA2_FILE), sda_out)?;
            forest::save_forest_list(&dir.join(FOREST_LIST_FILE), forests)?;
            dims.insert("sda_in".to_string(), sda_in.layer_sizes());
            dims.insert("sda_out".to_string(), sda_out.layer_sizes());
            dims.insert("forests".to_string(), vec![forests.len()]);
            vec![SDA1_FILE.into(), SDA2_FILE.into(), FOREST_LIST_FILE.into()]
        }
        PredictorComponents::ConvNet { model } => {
            deconvnet::save_convnet(&dir.join(CONVNET_FILE), model)?;
            let c = &model.config;
            dims.insert(
                "convnet".to_string(),
                vec![c.rows, c.cols, c.in_channels, c.features, c.kernel, c.n_classes],
            );
            vec![CONVNET_FILE.into()]
        }
    };
    let manifest = PredictorManifest {
        version: PREDICTOR_BUNDLE_VERSION,
        architecture: predictor.id(),
        grid: predictor.grid.clone(),
        t_pred: predictor.t_pred,
        config_hash: predictor.config_hash.clone(),
        dims,
        seeds: predictor.seeds.clone(),
        files,
    };
    let path = dir.join(PREDICTOR_MANIFEST_NAME);
    let text = serde_json::to_string_pretty(&manifest)
        .map_err(|e| Error::Json { path: path.display().to_string(), source: e })?;
    std::fs::write(&path, text).map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn load_predictor(dir: &Path) -> Result<TrainedPredictor> {
    let path = dir.join(PREDICTOR_MANIFEST_NAME);
    let text =
        std::fs::read_to_string(&path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let manifest: PredictorManifest = serde_json::from_str(&text)
        .map_err(|e| Error::Json { path: path.display().to_string(), source: e })?;
    if manifest.version != PREDICTOR_BUNDLE_VERSION {
        return Err(Error::InvalidConfig(format!(
            "unsupported predictor bundle version {}",
            manifest.version
        )));
    }
    let components = match manifest.architecture {
        ArchitectureId::Arch1 => PredictorComponents::CellClassifiers {
            sda: autoencoder::load_sda(&dir.join(SDA1_FILE))?,
            forests: forest::load_forest_grid(&dir.join(FOREST_GRID_FILE))?,
        },
        ArchitectureId::Arch2 => PredictorComponents::LatentRegressors {
            sda_in: autoencoder::load_sda(&dir.join(SDA1_FILE))?,
            forests: forest::load_forest_list(&dir.join(FOREST_LIST_FILE))?,
            sda_out: autoencoder::load_sda(&dir.join(SDA2_FILE))?,
        },
        ArchitectureId::Arch3 => PredictorComponents::ConvNet {
            model: deconvnet::load_convnet(&dir.join(CONVNET_FILE))?,
        },
    };
    let predictor = TrainedPredictor {
        grid: manifest.grid,
        t_pred: manifest.t_pred,
        config_hash: manifest.config_hash,
        seeds: manifest.seeds,
        components,
    };
    predictor.validate()?;
    Ok(predictor)
}
