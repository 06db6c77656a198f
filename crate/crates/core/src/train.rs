//! Shared minibatch trainer. Every method (the fusion objective and all
//! baselines) goes through [`Trainer`]; only the [`BatchObjective`] differs.

use ndarray::{Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::annotators::AnnotatorLabels;
use crate::backbone::{init_params, HeadOutputs, LogitGradients, ModelDims, ModelParams, SgdMomentum};
use crate::error::{Error, Result};
use crate::fusion::{FrozenHead, FusionObjective};
use crate::linalg::{log_softmax, PermutationBasis};

const SHUFFLE_SALT: u64 = 0x5eed_5eed_0000_0001;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSettings {
    pub learning_rate: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Seeds parameter init, the permutation basis and batch shuffling.
    pub seed: u64,
}

impl TrainSettings {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::Config(format!("lr must be positive, got {}", self.learning_rate)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum must be in [0, 1), got {}", self.momentum)));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::Config("batch_size and epochs must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub train_loss: f64,
    pub val_accuracy: Option<f64>,
}

/// Loss and head-logit gradients for one minibatch.
pub trait BatchObjective {
    /// Head whose gradient must be exactly zero.
    fn frozen(&self) -> FrozenHead {
        FrozenHead::None
    }

    /// Mean loss over `rows` (indices into the training set). Writes the
    /// gradient of that mean into `grads`, which arrives zeroed.
    fn batch(&mut self, out: &HeadOutputs, rows: &[usize], grads: &mut LogitGradients) -> Result<f64>;

    /// Updates parameters that live outside the network, using gradients
    /// gathered during the last [`batch`](Self::batch) call.
    fn step_globals(&mut self, _lr: f64, _momentum: f64) {}

    fn globals(&self) -> Vec<f64> {
        Vec::new()
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters at the selected epoch.
    pub params: ModelParams,
    pub selected_epoch: usize,
    pub history: Vec<EpochRecord>,
    /// Objective globals captured at the selected epoch.
    pub globals: Vec<f64>,
}

pub fn accuracy(predictions: &[usize], golden: &[usize]) -> Result<f64> {
    if predictions.len() != golden.len() {
        return Err(Error::dim(format!(
            "{} predictions but {} golden labels",
            predictions.len(),
            golden.len()
        )));
    }
    if golden.is_empty() {
        return Err(Error::InvalidArgument("accuracy of an empty set".into()));
    }
    let hits = predictions.iter().zip(golden).filter(|(a, b)| a == b).count();
    Ok(hits as f64 / golden.len() as f64)
}

pub struct Trainer<'a> {
    settings: TrainSettings,
    train_x: ArrayView2<'a, f64>,
    val: Option<(ArrayView2<'a, f64>, &'a [usize])>,
    params: ModelParams,
    opt: SgdMomentum,
    rng: ChaCha8Rng,
    history: Vec<EpochRecord>,
    best: Option<(f64, usize, ModelParams, Vec<f64>)>,
}

impl<'a> Trainer<'a> {
    /// An empty validation set selects the last epoch.
    pub fn new(
        settings: TrainSettings,
        dims: &ModelDims,
        identity_first: bool,
        train_x: ArrayView2<'a, f64>,
        val: Option<(ArrayView2<'a, f64>, &'a [usize])>,
    ) -> Result<Self> {
        settings.validate()?;
        if train_x.nrows() == 0 {
            return Err(Error::InvalidArgument("empty training set".into()));
        }
        if let Some((x, y)) = val {
            if x.nrows() != y.len() {
                return Err(Error::dim("validation features and labels disagree"));
            }
        }
        let val = val.filter(|(x, _)| x.nrows() > 0);
        let params = init_params(dims, settings.seed, identity_first)?;
        let opt = SgdMomentum::new(&params, settings.learning_rate, settings.momentum);
        let rng = ChaCha8Rng::seed_from_u64(settings.seed ^ SHUFFLE_SALT);
        Ok(Trainer {
            settings,
            train_x,
            val,
            params,
            opt,
            rng,
            history: Vec::new(),
            best: None,
        })
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    pub fn epochs_run(&self) -> usize {
        self.history.len()
    }

    /// Class probabilities of the current model on the training set.
    pub fn train_class_probs(&self) -> Result<Array2<f64>> {
        class_probs_chunked(&self.params, self.train_x)
    }

    pub fn run_epochs(&mut self, epochs: usize, objective: &mut dyn BatchObjective) -> Result<()> {
        let n = self.train_x.nrows();
        let bs = self.settings.batch_size;
        let frozen = objective.frozen();
        let mut order: Vec<usize> = (0..n).collect();
        for _ in 0..epochs {
            let epoch = self.history.len() + 1;
            order.shuffle(&mut self.rng);
            let mut loss_sum = 0.0;
            for (b, rows) in order.chunks(bs).enumerate() {
                let diverged = |message: String| Error::Diverged {
                    epoch,
                    batch: b + 1,
                    message,
                };
                let x = self.train_x.select(Axis(0), rows);
                let out = self.params.forward_batch(x.view()).map_err(|e| diverged(e.to_string()))?;
                let mut up = LogitGradients::zeros(rows.len(), &self.params.dims);
                let loss = objective.batch(&out, rows, &mut up).map_err(|e| match e {
                    Error::Numeric(m) => diverged(m),
                    other => other,
                })?;
                if !loss.is_finite() {
                    return Err(diverged(format!("non-finite loss {loss}")));
                }
                let grads = self.params.backward(&out, &up)?;
                assert_frozen_zero(frozen, &grads);
                if !grads.is_finite() {
                    return Err(diverged("non-finite gradient".into()));
                }
                self.opt.step(&mut self.params, &grads)?;
                objective.step_globals(self.settings.learning_rate, self.settings.momentum);
                loss_sum += loss * rows.len() as f64;
            }
            let val_accuracy = match self.val {
                Some((x, y)) => Some(accuracy(&predict_chunked(&self.params, x)?, y)?),
                None => None,
            };
            self.history.push(EpochRecord {
                epoch,
                train_loss: loss_sum / n as f64,
                val_accuracy,
            });
            // Strict improvement keeps the earliest epoch on ties; without a
            // validation set every epoch replaces the last.
            let score = val_accuracy.unwrap_or(f64::INFINITY);
            let better = match &self.best {
                None => true,
                Some((best, ..)) => score > *best || val_accuracy.is_none(),
            };
            if better {
                self.best = Some((score, epoch, self.params.clone(), objective.globals()));
            }
        }
        Ok(())
    }

    pub fn finish(self) -> Result<TrainOutcome> {
        let (_, selected_epoch, params, globals) = self
            .best
            .ok_or_else(|| Error::InvalidArgument("no epochs were run".into()))?;
        Ok(TrainOutcome {
            params,
            selected_epoch,
            history: self.history,
            globals,
        })
    }
}

fn assert_frozen_zero(frozen: FrozenHead, grads: &ModelParams) {
    let head = match frozen {
        FrozenHead::None => return,
        FrozenHead::Confusions => &grads.head_coeffs,
        FrozenHead::Weights => &grads.head_weights,
    };
    assert!(
        head.weight.iter().chain(head.bias.iter()).all(|&g| g == 0.0),
        "frozen head {frozen:?} received a nonzero gradient"
    );
}

const EVAL_CHUNK: usize = 2048;

pub fn class_probs_chunked(params: &ModelParams, x: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
    let mut out = Array2::zeros((x.nrows(), params.dims.classes));
    for (i, chunk) in x.axis_chunks_iter(Axis(0), EVAL_CHUNK).enumerate() {
        let p = params.class_probs(chunk)?;
        let start = i * EVAL_CHUNK;
        out.slice_mut(ndarray::s![start..start + chunk.nrows(), ..]).assign(&p);
    }
    Ok(out)
}

pub fn predict_chunked(params: &ModelParams, x: ArrayView2<'_, f64>) -> Result<Vec<usize>> {
    let mut out = Vec::with_capacity(x.nrows());
    for chunk in x.axis_chunks_iter(Axis(0), EVAL_CHUNK) {
        out.extend(params.predict(chunk)?);
    }
    Ok(out)
}

/// `KL(t || softmax(z))` against fixed soft targets, one row per training sample.
/// Serves golden, single-annotator, majority-vote and EM-posterior training.
pub struct SoftTargetObjective {
    pub targets: Array2<f64>,
}

impl SoftTargetObjective {
    pub fn new(targets: Array2<f64>) -> Self {
        SoftTargetObjective { targets }
    }

    pub fn one_hot(labels: &[usize], classes: usize) -> Result<Self> {
        if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
            return Err(Error::InvalidLabel { label: bad, classes });
        }
        let mut t = Array2::zeros((labels.len(), classes));
        for (i, &y) in labels.iter().enumerate() {
            t[[i, y]] = 1.0;
        }
        Ok(Self::new(t))
    }
}

impl BatchObjective for SoftTargetObjective {
    fn batch(&mut self, out: &HeadOutputs, rows: &[usize], grads: &mut LogitGradients) -> Result<f64> {
        let b = rows.len() as f64;
        let k = out.class_logits.ncols();
        let mut logp = vec![0.0; k];
        let mut total = 0.0;
        for (i, &n) in rows.iter().enumerate() {
            let t = self.targets.row(n);
            let z = out.class_logits.row(i);
            log_softmax(z.as_slice().expect("standard layout"), &mut logp);
            for j in 0..k {
                if t[j] > 0.0 {
                    total += t[j] * (t[j].ln() - logp[j]);
                }
                grads.d_class[[i, j]] = (out.class_probs[[i, j]] - t[j]) / b;
            }
        }
        Ok(total / b)
    }
}

/// The regularized sample-wise fusion loss over the three heads.
pub struct FusionBatchObjective<'a> {
    pub objective: FusionObjective,
    pub basis: &'a PermutationBasis,
    pub labels: &'a AnnotatorLabels,
}

impl BatchObjective for FusionBatchObjective<'_> {
    fn frozen(&self) -> FrozenHead {
        self.objective.frozen
    }

    fn batch(&mut self, out: &HeadOutputs, rows: &[usize], grads: &mut LogitGradients) -> Result<f64> {
        let b = rows.len() as f64;
        let r = self.labels.annotators();
        let mut sample_labels = vec![0; r];
        let mut total = 0.0;
        for (i, &n) in rows.iter().enumerate() {
            for (a, y) in sample_labels.iter_mut().enumerate() {
                *y = self.labels.get(a, n);
            }
            let f = out.class_logits.row(i);
            let w = out.weight_logits.row(i);
            let c = out.coeff_logits.row(i);
            let mut df = grads.d_class.row_mut(i);
            let mut dw = grads.d_weights.row_mut(i);
            let mut dc = grads.d_coeffs.row_mut(i);
            total += self.objective.eval_flat(
                self.basis,
                f.as_slice().expect("standard layout"),
                w.as_slice().expect("standard layout"),
                c.as_slice().expect("standard layout"),
                &sample_labels,
                Some((
                    df.as_slice_mut().expect("standard layout"),
                    dw.as_slice_mut().expect("standard layout"),
                    dc.as_slice_mut().expect("standard layout"),
                )),
            )?;
        }
        grads.d_class /= b;
        grads.d_weights /= b;
        grads.d_coeffs /= b;
        Ok(total / b)
    }
}

/// Everything a training run reads.
#[derive(Debug, Clone, Copy)]
pub struct TrainData<'a> {
    pub train_x: ArrayView2<'a, f64>,
    pub labels: &'a AnnotatorLabels,
    pub val: Option<(ArrayView2<'a, f64>, &'a [usize])>,
}

impl<'a> TrainData<'a> {
    pub fn check(&self, dims: &ModelDims) -> Result<()> {
        if self.labels.samples() != self.train_x.nrows() {
            return Err(Error::dim(format!(
                "{} training rows but labels for {}",
                self.train_x.nrows(),
                self.labels.samples()
            )));
        }
        if self.labels.annotators() != dims.annotators || self.labels.classes() != dims.classes {
            return Err(Error::dim(format!(
                "labels are R={} K={}, model expects R={} K={}",
                self.labels.annotators(),
                self.labels.classes(),
                dims.annotators,
                dims.classes
            )));
        }
        if self.train_x.ncols() != dims.input_dim {
            return Err(Error::dim(format!(
                "features have {} columns, model expects {}",
                self.train_x.ncols(),
                dims.input_dim
            )));
        }
        Ok(())
    }

    pub fn trainer(&self, settings: &TrainSettings, dims: &ModelDims, identity_first: bool) -> Result<Trainer<'a>> {
        self.check(dims)?;
        Trainer::new(settings.clone(), dims, identity_first, self.train_x, self.val)
    }
}

/// Trains the three-head model on the fusion objective.
pub fn train_fusion(
    settings: &TrainSettings,
    dims: &ModelDims,
    data: TrainData<'_>,
    objective: FusionObjective,
    basis: &PermutationBasis,
) -> Result<TrainOutcome> {
    if basis.classes() != dims.classes || basis.len() != dims.basis_size {
        return Err(Error::dim(format!(
            "basis is K={} M={}, model expects K={} M={}",
            basis.classes(),
            basis.len(),
            dims.classes,
            dims.basis_size
        )));
    }
    let mut t = data.trainer(settings, dims, basis.has_identity_first())?;
    let mut obj = FusionBatchObjective {
        objective,
        basis,
        labels: data.labels,
    };
    t.run_epochs(settings.epochs, &mut obj)?;
    t.finish()
}

/// Trains the class head on fixed one-hot labels (golden or a single annotator).
pub fn train_supervised(
    settings: &TrainSettings,
    dims: &ModelDims,
    data: TrainData<'_>,
    labels: &[usize],
) -> Result<TrainOutcome> {
    if labels.len() != data.train_x.nrows() {
        return Err(Error::dim(format!(
            "{} training rows but {} labels",
            data.train_x.nrows(),
            labels.len()
        )));
    }
    let mut t = data.trainer(settings, dims, false)?;
    let mut obj = SoftTargetObjective::one_hot(labels, dims.classes)?;
    t.run_epochs(settings.epochs, &mut obj)?;
    t.finish()
}
