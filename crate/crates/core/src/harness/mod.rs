//! Config-driven experiments: data preparation, method dispatch,
//! validation-based selection, and report/curve/checkpoint output.

mod config;
mod heatmap;
mod sweep;

pub use config::{
    DatasetSpec, ExperimentConfig, Method, Mode, Seeds, SynthesisSpec, MNIST_DIR_ENV, OUTPUT_DIR_ENV,
    THREADS_ENV,
};
pub use heatmap::{export_heatmap_grid, write_heatmap_csv, GridSpec, HeatmapModel, HeatmapQuantity};
pub use sweep::{run_sweep, thread_count, SweepAxis, SweepCell, SweepTable};

use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::annotators::{
    corruption_rate, load_external_labels, synthesize_euclidean, synthesize_hammer_spammer, AnnotatorLabels,
};
use crate::backbone::{save_checkpoint, ModelDims, ModelParams};
use crate::baselines::{
    train_global_confusion_tracereg, train_global_weights, train_majority_vote, train_mbem, MbemSettings,
};
use crate::data::{generate_two_moon, load_mnist_idx, split, Dataset, Standardizer, TwoMoonConfig};
use crate::error::{Error, Result};
use crate::fusion::FusionObjective;
use crate::linalg::{random_permutation_basis, PermutationBasis};
use crate::train::{predict_chunked, train_fusion, train_supervised, TrainData, TrainOutcome, TrainSettings};

pub use crate::train::accuracy;

pub const REPORT_SCHEMA_VERSION: u32 = 1;

/// Train (with annotator labels), validation and test splits.
#[derive(Debug, Clone)]
pub struct PreparedData {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
}

impl PreparedData {
    pub fn labels(&self) -> Result<&AnnotatorLabels> {
        self.train.annotator_labels()
    }

    pub fn corruption_rates(&self) -> Result<Vec<f64>> {
        corruption_rate(self.labels()?, self.train.golden()?)
    }
}

const MNIST_FILES: [&str; 4] = [
    "train-images-idx3-ubyte",
    "train-labels-idx1-ubyte",
    "t10k-images-idx3-ubyte",
    "t10k-labels-idx1-ubyte",
];

/// Loads or generates the splits and attaches annotator labels to the
/// training split. Depends only on the dataset/synthesis specs, R and the
/// data and synthesis seeds, so every method sees the same labels.
pub fn prepare_data(cfg: &ExperimentConfig) -> Result<PreparedData> {
    cfg.validate()?;
    let (mut train, val, test) = match &cfg.dataset {
        DatasetSpec::TwoMoon {
            n,
            noise_sigma,
            center,
            upper_label,
            y_threshold,
            test_fraction,
            val_size,
        } => {
            let all = generate_two_moon(&TwoMoonConfig {
                n: *n,
                noise_sigma: *noise_sigma,
                center: *center,
                upper_label: *upper_label,
                y_threshold: *y_threshold,
                seed: cfg.seeds.data,
            })?;
            let n_test = (*n as f64 * test_fraction).round() as usize;
            let n_train = n - n_test - val_size;
            split(&all, (n_train, *val_size, n_test), cfg.seeds.data)?
        }
        DatasetSpec::Mnist {
            dir,
            train_size,
            val_size,
            test_size,
        } => {
            let dir = DatasetSpec::mnist_dir(dir.as_deref());
            let path = |i: usize| dir.join(MNIST_FILES[i]);
            let full = load_mnist_idx(&path(0), &path(1))?;
            let (train, val, _) = split(&full, (*train_size, *val_size, 0), cfg.seeds.data)?;
            drop(full);
            let test_all = load_mnist_idx(&path(2), &path(3))?;
            let test = match test_size {
                Some(t) if *t < test_all.len() => test_all.head(*t),
                _ => test_all,
            };
            (train, val, test)
        }
    };

    let r = cfg.effective_annotators();
    let k = train.classes;
    let golden = train.golden()?.to_vec();
    let labels = match &cfg.synthesis {
        SynthesisSpec::Geometric => train.annotator_labels()?.clone(),
        SynthesisSpec::Euclidean { epsilon, standardize } => {
            if *standardize {
                let z = Standardizer::fit(&train.features)?.apply(&train.features)?;
                synthesize_euclidean(z.view(), &golden, k, r, *epsilon, cfg.seeds.synthesis)?
            } else {
                synthesize_euclidean(train.features.view(), &golden, k, r, *epsilon, cfg.seeds.synthesis)?
            }
        }
        SynthesisSpec::HammerSpammer { n_correct } => {
            synthesize_hammer_spammer(&golden, k, r, *n_correct, cfg.seeds.synthesis)?
        }
        SynthesisSpec::External { path } => load_external_labels(path, train.len(), r, k)?,
    };
    train.annotators = Some(labels);
    train.validate()?;
    Ok(PreparedData {
        train,
        val: Dataset { annotators: None, ..val },
        test: Dataset { annotators: None, ..test },
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub schema_version: u32,
    pub method: String,
    pub mode: Mode,
    pub selected_epoch: usize,
    pub test_accuracy: f64,
    pub selected_val_accuracy: Option<f64>,
    pub train_loss: Vec<f64>,
    pub val_accuracy: Vec<Option<f64>>,
    pub corruption_rates: Vec<f64>,
    /// WDN-lite only.
    pub global_weights: Option<Vec<f64>>,
    /// TraceReg-lite and MBEM-lite only.
    pub global_confusion_traces: Option<Vec<f64>>,
    pub config: ExperimentConfig,
    pub wall_clock_seconds: f64,
}

impl ExperimentReport {
    /// The report with timing removed, for reproducibility comparisons.
    pub fn without_timing(&self) -> Self {
        ExperimentReport {
            wall_clock_seconds: 0.0,
            ..self.clone()
        }
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn read_json(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    /// `epoch,train_loss,val_accuracy`; the last column is empty without validation.
    pub fn write_curves(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["epoch", "train_loss", "val_accuracy"])?;
        for (i, (loss, acc)) in self.train_loss.iter().zip(&self.val_accuracy).enumerate() {
            w.write_record([
                (i + 1).to_string(),
                loss.to_string(),
                acc.map(|a| a.to_string()).unwrap_or_default(),
            ])?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }
}

/// Everything a run produces in memory.
#[derive(Debug, Clone)]
pub struct ExperimentOutcome {
    pub report: ExperimentReport,
    /// Parameters of the selected epoch.
    pub params: ModelParams,
    /// The permutation basis (method ours only).
    pub basis: Option<PermutationBasis>,
}

impl ExperimentOutcome {
    pub fn heatmap_model(&self) -> HeatmapModel<'_> {
        HeatmapModel {
            params: &self.params,
            basis: self.basis.as_ref(),
            frozen: self.report.config.mode.frozen(),
        }
    }
}

pub fn model_dims(cfg: &ExperimentConfig) -> ModelDims {
    ModelDims {
        input_dim: cfg.dataset.input_dim(),
        hidden: cfg.hidden(),
        classes: cfg.dataset.classes(),
        annotators: cfg.effective_annotators(),
        basis_size: cfg.basis_size,
    }
}

pub fn train_settings(cfg: &ExperimentConfig) -> TrainSettings {
    TrainSettings {
        learning_rate: cfg.learning_rate,
        momentum: cfg.momentum,
        batch_size: cfg.batch_size,
        epochs: cfg.epochs,
        seed: cfg.seeds.model,
    }
}

/// Builds the data, trains, selects and evaluates; writes artifacts when the
/// config names an output directory.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentOutcome> {
    let data = prepare_data(cfg)?;
    run_prepared(cfg, &data)
}

/// [`run_experiment`] on already prepared data.
pub fn run_prepared(cfg: &ExperimentConfig, data: &PreparedData) -> Result<ExperimentOutcome> {
    cfg.validate()?;
    let start = Instant::now();
    let dims = model_dims(cfg);
    let settings = train_settings(cfg);
    let labels = data.labels()?;
    let val = if data.val.is_empty() {
        None
    } else {
        Some((data.val.features.view(), data.val.golden()?))
    };
    let td = TrainData {
        train_x: data.train.features.view(),
        labels,
        val,
    };

    let mut basis = None;
    let mut global_weights = None;
    let mut global_confusion_traces = None;
    let outcome: TrainOutcome = match cfg.method {
        Method::Ours => {
            let b = random_permutation_basis(dims.classes, cfg.basis_size, cfg.seeds.model, cfg.include_identity)?;
            let objective = FusionObjective::new(cfg.lambda)
                .with_direction(cfg.kl_direction)
                .with_frozen(cfg.mode.frozen());
            let out = train_fusion(&settings, &dims, td, objective, &b)?;
            basis = Some(b);
            out
        }
        Method::Mjv => train_majority_vote(&settings, &dims, td)?,
        Method::Wdn => {
            let (out, w) = train_global_weights(&settings, &dims, td)?;
            global_weights = Some(w.0.as_slice().to_vec());
            out
        }
        Method::TraceReg => {
            let (out, p) = train_global_confusion_tracereg(&settings, &dims, td, cfg.trace_lambda)?;
            global_confusion_traces = Some(p.traces());
            out
        }
        Method::Mbem => {
            let em = MbemSettings {
                rounds: cfg.em_rounds,
                smoothing: cfg.em_smoothing,
            };
            let (out, p) = train_mbem(&settings, &dims, td, em)?;
            global_confusion_traces = Some(p.traces());
            out
        }
        Method::Single(r) => train_supervised(&settings, &dims, td, &labels.annotator_row(r - 1))?,
        Method::Golden => train_supervised(&settings, &dims, td, data.train.golden()?)?,
    };

    let predictions = predict_chunked(&outcome.params, data.test.features.view())?;
    let test_accuracy = accuracy(&predictions, data.test.golden()?)?;
    let selected_val_accuracy = outcome.history[outcome.selected_epoch - 1].val_accuracy;
    let report = ExperimentReport {
        schema_version: REPORT_SCHEMA_VERSION,
        method: cfg.method.to_string(),
        mode: cfg.mode,
        selected_epoch: outcome.selected_epoch,
        test_accuracy,
        selected_val_accuracy,
        train_loss: outcome.history.iter().map(|h| h.train_loss).collect(),
        val_accuracy: outcome.history.iter().map(|h| h.val_accuracy).collect(),
        corruption_rates: data.corruption_rates()?,
        global_weights,
        global_confusion_traces,
        config: cfg.clone(),
        wall_clock_seconds: start.elapsed().as_secs_f64(),
    };

    if let Some(dir) = &cfg.output_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        report.write_json(&dir.join("report.json"))?;
        report.write_curves(&dir.join("curves.csv"))?;
        save_checkpoint(&dir.join("model.ckpt"), &outcome.params, basis.as_ref())?;
    }

    Ok(ExperimentOutcome {
        report,
        params: outcome.params,
        basis,
    })
}
