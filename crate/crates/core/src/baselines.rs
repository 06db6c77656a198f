//! Reference methods: soft majority voting, one global weight vector
//! (WDN-lite), global confusion matrices with a trace penalty (TraceReg-lite)
//! and an EM alternation (MBEM-lite).
//!
//! The global confusion matrices here use the classical direction:
//! `P[i][j] = Pr(annotator says i | true class j)`, so the predicted annotator
//! distribution is `P f`.

use ndarray::{Array2, ArrayView2};

use crate::annotators::AnnotatorLabels;
use crate::backbone::{momentum_update, HeadOutputs, LogitGradients, ModelDims};
use crate::error::{Error, Result};
use crate::fusion::{softmax_backward, PROB_FLOOR};
use crate::linalg::{log_softmax, softmax_in_place, ConfusionMatrix, OneHotLabel, ProbVector};
use crate::train::{BatchObjective, SoftTargetObjective, TrainData, TrainOutcome, TrainSettings};

pub const DEFAULT_TRACE_LAMBDA: f64 = 0.01;
pub const DEFAULT_EM_SMOOTHING: f64 = 1e-2;
pub const DEFAULT_EM_ROUNDS: usize = 3;
/// Initial diagonal of the TraceReg matrices.
pub const TRACEREG_INIT_DIAG: f64 = 0.9;

/// Mean of the one-hot encodings of `labels`.
pub fn majority_vote_target(labels: &[OneHotLabel]) -> Result<ProbVector> {
    let first = labels
        .first()
        .ok_or_else(|| Error::InvalidArgument("majority vote over zero annotators".into()))?;
    let k = first.classes();
    let mut t = vec![0.0; k];
    for y in labels {
        if y.classes() != k {
            return Err(Error::dim("annotator labels disagree on K"));
        }
        t[y.class_index()] += 1.0 / labels.len() as f64;
    }
    ProbVector::from_vec(t)
}

/// Soft majority-vote targets for every sample, `N x K`.
pub fn majority_vote_targets(labels: &AnnotatorLabels) -> Array2<f64> {
    let r = labels.annotators();
    let mut t = Array2::zeros((labels.samples(), labels.classes()));
    for n in 0..labels.samples() {
        for a in 0..r {
            t[[n, labels.get(a, n)]] += 1.0 / r as f64;
        }
    }
    t
}

#[derive(Debug, Clone, PartialEq)]
pub struct GlobalWeights(pub ProbVector);

#[derive(Debug, Clone, PartialEq)]
pub struct GlobalConfusions(pub Vec<ConfusionMatrix>);

impl GlobalConfusions {
    pub fn traces(&self) -> Vec<f64> {
        self.0.iter().map(|p| p.as_array().diag().sum()).collect()
    }
}

pub fn train_majority_vote(
    settings: &TrainSettings,
    dims: &ModelDims,
    data: TrainData<'_>,
) -> Result<TrainOutcome> {
    let mut t = data.trainer(settings, dims, false)?;
    let mut obj = SoftTargetObjective::new(majority_vote_targets(data.labels));
    t.run_epochs(settings.epochs, &mut obj)?;
    t.finish()
}

/// One shared softmaxed weight vector; targets are weighted one-hot mixtures.
pub struct GlobalWeightObjective<'a> {
    labels: &'a AnnotatorLabels,
    logits: Vec<f64>,
    velocity: Vec<f64>,
    grad: Vec<f64>,
}

impl<'a> GlobalWeightObjective<'a> {
    /// Starts at uniform weights.
    pub fn new(labels: &'a AnnotatorLabels) -> Self {
        let r = labels.annotators();
        GlobalWeightObjective {
            labels,
            logits: vec![0.0; r],
            velocity: vec![0.0; r],
            grad: vec![0.0; r],
        }
    }

    pub fn weights(&self) -> ProbVector {
        let mut w = self.logits.clone();
        softmax_in_place(&mut w);
        ProbVector::from_vec(w).expect("softmax output")
    }

    /// Fused target of training sample `n` under the current weights.
    pub fn target(&self, n: usize) -> Vec<f64> {
        let w = self.weights();
        let mut t = vec![0.0; self.labels.classes()];
        for (a, &wa) in w.as_slice().iter().enumerate() {
            t[self.labels.get(a, n)] += wa;
        }
        t
    }
}

impl BatchObjective for GlobalWeightObjective<'_> {
    fn batch(&mut self, out: &HeadOutputs, rows: &[usize], grads: &mut LogitGradients) -> Result<f64> {
        let b = rows.len() as f64;
        let k = self.labels.classes();
        let w = self.weights();
        let ln_floor = PROB_FLOOR.ln();
        let mut logp = vec![0.0; k];
        let mut d_w = vec![0.0; w.len()];
        let mut total = 0.0;
        for (i, &n) in rows.iter().enumerate() {
            let t = self.target(n);
            log_softmax(out.class_logits.row(i).as_slice().expect("standard layout"), &mut logp);
            // dL/dt_j = ln t_j - ln f_j (+1, which cancels through the softmax).
            let mut d_t = vec![0.0; k];
            for j in 0..k {
                if t[j] > 0.0 {
                    let lf = logp[j].max(ln_floor);
                    total += t[j] * (t[j].ln() - lf);
                    d_t[j] = t[j].ln() - lf;
                }
                grads.d_class[[i, j]] = (out.class_probs[[i, j]] - t[j]) / b;
            }
            for (a, d) in d_w.iter_mut().enumerate() {
                *d += d_t[self.labels.get(a, n)] / b;
            }
        }
        softmax_backward(w.as_slice(), &d_w, &mut self.grad);
        Ok(total / b)
    }

    fn step_globals(&mut self, lr: f64, momentum: f64) {
        momentum_update(&mut self.logits, &self.grad, &mut self.velocity, lr, momentum);
    }

    fn globals(&self) -> Vec<f64> {
        self.logits.clone()
    }
}

pub fn train_global_weights(
    settings: &TrainSettings,
    dims: &ModelDims,
    data: TrainData<'_>,
) -> Result<(TrainOutcome, GlobalWeights)> {
    let mut t = data.trainer(settings, dims, false)?;
    let mut obj = GlobalWeightObjective::new(data.labels);
    t.run_epochs(settings.epochs, &mut obj)?;
    let out = t.finish()?;
    let mut w = out.globals.clone();
    softmax_in_place(&mut w);
    Ok((out, GlobalWeights(ProbVector::from_vec(w)?)))
}

/// Per-annotator column-softmax matrices, cross-entropy on `P f`, plus
/// `lambda * sum_r tr(P_r)`.
pub struct TraceRegObjective<'a> {
    labels: &'a AnnotatorLabels,
    lambda: f64,
    /// `R` blocks of `K x K` logits, row-major.
    logits: Vec<f64>,
    velocity: Vec<f64>,
    grad: Vec<f64>,
}

impl<'a> TraceRegObjective<'a> {
    /// Starts every matrix with diagonal [`TRACEREG_INIT_DIAG`] and uniform
    /// off-diagonal mass.
    pub fn new(labels: &'a AnnotatorLabels, lambda: f64) -> Self {
        let (r, k) = (labels.annotators(), labels.classes());
        let off = (1.0 - TRACEREG_INIT_DIAG) / (k - 1) as f64;
        let diag_logit = (TRACEREG_INIT_DIAG / off).ln();
        let mut logits = vec![0.0; r * k * k];
        for a in 0..r {
            for i in 0..k {
                logits[a * k * k + i * k + i] = diag_logit;
            }
        }
        TraceRegObjective {
            labels,
            lambda,
            velocity: vec![0.0; logits.len()],
            grad: vec![0.0; logits.len()],
            logits,
        }
    }

    fn matrices_from(logits: &[f64], k: usize) -> Vec<Array2<f64>> {
        logits
            .chunks(k * k)
            .map(|block| {
                let mut p = Array2::from_shape_vec((k, k), block.to_vec()).expect("k*k block");
                for mut col in p.columns_mut() {
                    let mut v = col.to_vec();
                    softmax_in_place(&mut v);
                    col.assign(&ndarray::Array1::from(v));
                }
                p
            })
            .collect()
    }

    pub fn matrices(&self) -> Vec<Array2<f64>> {
        Self::matrices_from(&self.logits, self.labels.classes())
    }

    pub fn confusions(&self) -> Result<GlobalConfusions> {
        Ok(GlobalConfusions(
            self.matrices()
                .into_iter()
                .map(ConfusionMatrix::new)
                .collect::<Result<_>>()?,
        ))
    }
}

/// Predicted distribution of an annotator's label: `P f`.
pub fn annotator_distribution(p: &Array2<f64>, f: &[f64]) -> Vec<f64> {
    p.dot(&ndarray::ArrayView1::from(f)).to_vec()
}

impl BatchObjective for TraceRegObjective<'_> {
    fn batch(&mut self, out: &HeadOutputs, rows: &[usize], grads: &mut LogitGradients) -> Result<f64> {
        let b = rows.len() as f64;
        let (r, k) = (self.labels.annotators(), self.labels.classes());
        let ps = self.matrices();
        let mut d_p: Vec<Array2<f64>> = (0..r).map(|_| Array2::zeros((k, k))).collect();
        let mut d_f = vec![0.0; k];
        let mut d_z = vec![0.0; k];
        let mut total = 0.0;
        for (i, &n) in rows.iter().enumerate() {
            let f = out.class_probs.row(i);
            d_f.fill(0.0);
            for a in 0..r {
                let y = self.labels.get(a, n);
                let q_y: f64 = (0..k).map(|j| ps[a][[y, j]] * f[j]).sum::<f64>().max(PROB_FLOOR);
                total -= q_y.ln();
                for j in 0..k {
                    d_f[j] -= ps[a][[y, j]] / q_y;
                    d_p[a][[y, j]] -= f[j] / q_y / b;
                }
            }
            softmax_backward(f.as_slice().expect("standard layout"), &d_f, &mut d_z);
            for j in 0..k {
                grads.d_class[[i, j]] = d_z[j] / b;
            }
        }
        let mut trace = 0.0;
        for a in 0..r {
            for i in 0..k {
                trace += ps[a][[i, i]];
                d_p[a][[i, i]] += self.lambda;
            }
            let mut col_grad = vec![0.0; k];
            for j in 0..k {
                let p_col = ps[a].column(j).to_vec();
                let g_col = d_p[a].column(j).to_vec();
                softmax_backward(&p_col, &g_col, &mut col_grad);
                for i in 0..k {
                    self.grad[a * k * k + i * k + j] = col_grad[i];
                }
            }
        }
        Ok(total / b + self.lambda * trace)
    }

    fn step_globals(&mut self, lr: f64, momentum: f64) {
        momentum_update(&mut self.logits, &self.grad, &mut self.velocity, lr, momentum);
    }

    fn globals(&self) -> Vec<f64> {
        self.logits.clone()
    }
}

pub fn train_global_confusion_tracereg(
    settings: &TrainSettings,
    dims: &ModelDims,
    data: TrainData<'_>,
    lambda: f64,
) -> Result<(TrainOutcome, GlobalConfusions)> {
    if !(lambda >= 0.0) {
        return Err(Error::Config(format!("trace lambda must be >= 0, got {lambda}")));
    }
    let mut t = data.trainer(settings, dims, false)?;
    let mut obj = TraceRegObjective::new(data.labels, lambda);
    t.run_epochs(settings.epochs, &mut obj)?;
    let out = t.finish()?;
    let confusions = TraceRegObjective::matrices_from(&out.globals, dims.classes)
        .into_iter()
        .map(ConfusionMatrix::new)
        .collect::<Result<_>>()?;
    Ok((out, GlobalConfusions(confusions)))
}

/// M-step for the confusion matrices: posterior-weighted label counts,
/// smoothed and column-normalized.
pub fn estimate_confusions(
    labels: &AnnotatorLabels,
    posteriors: ArrayView2<'_, f64>,
    smoothing: f64,
) -> Result<GlobalConfusions> {
    let k = labels.classes();
    if posteriors.dim() != (labels.samples(), k) {
        return Err(Error::dim("posterior matrix must be N x K"));
    }
    if !(smoothing > 0.0) {
        return Err(Error::Config(format!("smoothing must be > 0, got {smoothing}")));
    }
    let mut out = Vec::with_capacity(labels.annotators());
    for a in 0..labels.annotators() {
        let mut counts = Array2::from_elem((k, k), smoothing);
        for n in 0..labels.samples() {
            let y = labels.get(a, n);
            for j in 0..k {
                counts[[y, j]] += posteriors[[n, j]];
            }
        }
        for mut col in counts.columns_mut() {
            let s = col.sum();
            col /= s;
        }
        out.push(ConfusionMatrix::new(counts)?);
    }
    Ok(GlobalConfusions(out))
}

/// E-step: `q_n(j) ∝ f_j(x_n) prod_r P_r[y_rn, j]`, computed in log space.
pub fn em_posteriors(
    class_probs: ArrayView2<'_, f64>,
    labels: &AnnotatorLabels,
    confusions: &GlobalConfusions,
) -> Result<Array2<f64>> {
    let k = labels.classes();
    if class_probs.dim() != (labels.samples(), k) || confusions.0.len() != labels.annotators() {
        return Err(Error::dim("E-step inputs disagree on N, K or R"));
    }
    let ln_floor = PROB_FLOOR.ln();
    let mut q = Array2::zeros((labels.samples(), k));
    let mut row = vec![0.0; k];
    for n in 0..labels.samples() {
        for j in 0..k {
            row[j] = class_probs[[n, j]].ln().max(ln_floor);
        }
        for (a, p) in confusions.0.iter().enumerate() {
            let y = labels.get(a, n);
            for j in 0..k {
                row[j] += p.as_array()[[y, j]].ln().max(ln_floor);
            }
        }
        softmax_in_place(&mut row);
        q.row_mut(n).assign(&ndarray::ArrayView1::from(&row[..]));
    }
    Ok(q)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MbemSettings {
    pub rounds: usize,
    pub smoothing: f64,
}

impl Default for MbemSettings {
    fn default() -> Self {
        MbemSettings {
            rounds: DEFAULT_EM_ROUNDS,
            smoothing: DEFAULT_EM_SMOOTHING,
        }
    }
}

/// Splits `epochs` into `rounds` contiguous segments, the remainder going to the last.
pub fn em_segments(epochs: usize, rounds: usize) -> Result<Vec<usize>> {
    if rounds == 0 || epochs < rounds {
        return Err(Error::Config(format!(
            "MBEM needs 1 <= T_em <= epochs, got T_em={rounds}, epochs={epochs}"
        )));
    }
    let base = epochs / rounds;
    let mut seg = vec![base; rounds];
    seg[rounds - 1] += epochs - base * rounds;
    Ok(seg)
}

/// EM alternation with a warm-started classifier. The epoch budget is shared
/// across rounds; posteriors start at the majority vote.
pub fn train_mbem(
    settings: &TrainSettings,
    dims: &ModelDims,
    data: TrainData<'_>,
    em: MbemSettings,
) -> Result<(TrainOutcome, GlobalConfusions)> {
    let segments = em_segments(settings.epochs, em.rounds)?;
    let mut t = data.trainer(settings, dims, false)?;
    let mut posteriors = majority_vote_targets(data.labels);
    let mut confusions = estimate_confusions(data.labels, posteriors.view(), em.smoothing)?;
    for (round, &epochs) in segments.iter().enumerate() {
        let mut obj = SoftTargetObjective::new(posteriors);
        t.run_epochs(epochs, &mut obj)?;
        posteriors = obj.targets;
        if round + 1 < segments.len() {
            let f = t.train_class_probs()?;
            posteriors = em_posteriors(f.view(), data.labels, &confusions)?;
            confusions = estimate_confusions(data.labels, posteriors.view(), em.smoothing)?;
        }
    }
    Ok((t.finish()?, confusions))
}
