//! Sample-wise label fusion.
//!
//! For one sample with annotator labels `y_r`, per-sample annotator weights
//! `w` and per-annotator basis coefficients `c_r`:
//!
//! ```text
//! P_r     = sum_m c_rm B_m                      (doubly stochastic)
//! clean_r = P_r onehot(y_r)                     (column y_r of P_r)
//! target  = sum_r w_r clean_r
//! loss    = KL(target || f) + (lambda / R) sum_r sum_k (1 - P_r[k,k])^2
//! ```
//!
//! `f`, `w` and every `c_r` are softmax outputs of network heads; the loss is
//! differentiated with respect to the pre-softmax logits of all three, so the
//! target itself is trained.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{
    log_softmax, softmax_in_place, ConfusionMatrix, OneHotLabel, PermutationBasis, ProbVector,
};

/// Floor applied inside every logarithm.
pub const PROB_FLOOR: f64 = 1e-12;

/// Which way the KL term is taken.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KlDirection {
    /// `KL(target || prediction)`; reduces to cross-entropy for one-hot targets.
    #[default]
    TargetToPrediction,
    /// `KL(prediction || target)`.
    PredictionToTarget,
}

/// Head held fixed during training (ablation modes).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FrozenHead {
    #[default]
    None,
    /// Every confusion matrix is the identity; the coefficient head is unused.
    Confusions,
    /// The weight vector is uniform; the weight head is unused.
    Weights,
}

/// Column `y` of `p`: the clean soft label for annotator label `y`.
pub fn clean_label(p: &ConfusionMatrix, y: OneHotLabel) -> Result<ProbVector> {
    if p.classes() != y.classes() {
        return Err(Error::dim(format!(
            "{}x{} confusion matrix with a {}-class label",
            p.classes(),
            p.classes(),
            y.classes()
        )));
    }
    Ok(ProbVector::from_trusted(
        p.as_array().column(y.class_index()).to_owned(),
    ))
}

/// Convex combination of clean labels under weights `w`.
pub fn fuse_target(cleans: &[ProbVector], w: &ProbVector) -> Result<ProbVector> {
    if cleans.len() != w.len() {
        return Err(Error::dim(format!(
            "{} clean labels but {} weights",
            cleans.len(),
            w.len()
        )));
    }
    let k = cleans[0].len();
    if cleans.iter().any(|c| c.len() != k) {
        return Err(Error::dim("clean labels of differing lengths"));
    }
    let mut target = ndarray::Array1::zeros(k);
    for (clean, &wr) in cleans.iter().zip(w.as_slice()) {
        target.scaled_add(wr, clean.as_array());
    }
    Ok(ProbVector::from_trusted(target))
}

/// `sum_k (1 - P[k,k])^2`, i.e. `u^T Diag[I - P]^2 u`.
pub fn diag_penalty(p: &ConfusionMatrix) -> f64 {
    p.as_array().diag().iter().map(|&d| (1.0 - d).powi(2)).sum()
}

/// `sum_k target_k ln(target_k / pred_k)` with `0 ln 0 = 0` and prediction
/// entries floored at [`PROB_FLOOR`].
pub fn kl_divergence(target: &ProbVector, pred: &ProbVector) -> Result<f64> {
    if target.len() != pred.len() {
        return Err(Error::dim(format!(
            "KL between vectors of length {} and {}",
            target.len(),
            pred.len()
        )));
    }
    let kl: f64 = target
        .as_slice()
        .iter()
        .zip(pred.as_slice())
        .filter(|(&t, _)| t > 0.0)
        .map(|(&t, &q)| t * (t.max(PROB_FLOOR).ln() - q.max(PROB_FLOOR).ln()))
        .sum();
    if !kl.is_finite() {
        return Err(Error::Numeric(format!("KL divergence is {kl}")));
    }
    Ok(kl.max(0.0))
}

/// Per-sample network outputs and annotator labels, before any softmax.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionInputs {
    pub f_logits: Vec<f64>,
    pub w_logits: Vec<f64>,
    /// One coefficient-logit vector of length `M` per annotator.
    pub c_logits: Vec<Vec<f64>>,
    pub annotator_labels: Vec<OneHotLabel>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FusionGradients {
    pub d_f_logits: Vec<f64>,
    pub d_w_logits: Vec<f64>,
    pub d_c_logits: Vec<Vec<f64>>,
}

/// Regularized fusion loss with its knobs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FusionObjective {
    pub lambda: f64,
    #[serde(default)]
    pub direction: KlDirection,
    #[serde(default)]
    pub frozen: FrozenHead,
}

impl FusionObjective {
    pub fn new(lambda: f64) -> Self {
        FusionObjective {
            lambda,
            direction: KlDirection::default(),
            frozen: FrozenHead::None,
        }
    }

    pub fn with_direction(mut self, direction: KlDirection) -> Self {
        self.direction = direction;
        self
    }

    pub fn with_frozen(mut self, frozen: FrozenHead) -> Self {
        self.frozen = frozen;
        self
    }

    pub fn loss(&self, inputs: &FusionInputs, basis: &PermutationBasis) -> Result<f64> {
        let (flat_c, labels) = self.flatten(inputs, basis)?;
        self.eval_flat(
            basis,
            &inputs.f_logits,
            &inputs.w_logits,
            &flat_c,
            &labels,
            None,
        )
    }

    pub fn loss_grad(
        &self,
        inputs: &FusionInputs,
        basis: &PermutationBasis,
    ) -> Result<(f64, FusionGradients)> {
        let (flat_c, labels) = self.flatten(inputs, basis)?;
        let m = basis.len();
        let mut df = vec![0.0; inputs.f_logits.len()];
        let mut dw = vec![0.0; inputs.w_logits.len()];
        let mut dc = vec![0.0; flat_c.len()];
        let loss = self.eval_flat(
            basis,
            &inputs.f_logits,
            &inputs.w_logits,
            &flat_c,
            &labels,
            Some((&mut df, &mut dw, &mut dc)),
        )?;
        Ok((
            loss,
            FusionGradients {
                d_f_logits: df,
                d_w_logits: dw,
                d_c_logits: dc.chunks(m).map(<[f64]>::to_vec).collect(),
            },
        ))
    }

    fn flatten(
        &self,
        inputs: &FusionInputs,
        basis: &PermutationBasis,
    ) -> Result<(Vec<f64>, Vec<usize>)> {
        let r = inputs.annotator_labels.len();
        if inputs.w_logits.len() != r || inputs.c_logits.len() != r {
            return Err(Error::dim(format!(
                "{r} annotator labels, {} weight logits, {} coefficient blocks",
                inputs.w_logits.len(),
                inputs.c_logits.len()
            )));
        }
        if inputs.c_logits.iter().any(|c| c.len() != basis.len()) {
            return Err(Error::dim(format!(
                "coefficient logits must have length M={}",
                basis.len()
            )));
        }
        let k = inputs.f_logits.len();
        let mut labels = Vec::with_capacity(r);
        for y in &inputs.annotator_labels {
            if y.classes() != k {
                return Err(Error::dim(format!(
                    "{}-class annotator label with {k} class logits",
                    y.classes()
                )));
            }
            labels.push(y.class_index());
        }
        Ok((inputs.c_logits.concat(), labels))
    }

    /// Evaluates the loss on flat buffers: `c_logits` is `R*M` row-major.
    ///
    /// When `grads` is given, the gradients with respect to the three logit
    /// blocks are written (not accumulated) into it.
    pub(crate) fn eval_flat(
        &self,
        basis: &PermutationBasis,
        f_logits: &[f64],
        w_logits: &[f64],
        c_logits: &[f64],
        labels: &[usize],
        grads: Option<(&mut [f64], &mut [f64], &mut [f64])>,
    ) -> Result<f64> {
        let k = f_logits.len();
        let r = labels.len();
        let m = basis.len();
        if basis.classes() != k {
            return Err(Error::dim(format!(
                "K={} basis with {k} class logits",
                basis.classes()
            )));
        }
        if w_logits.len() != r || c_logits.len() != r * m {
            return Err(Error::dim("logit block sizes disagree with (K, R, M)"));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= k) {
            return Err(Error::InvalidLabel {
                label: bad,
                classes: k,
            });
        }
        if f_logits
            .iter()
            .chain(w_logits)
            .chain(c_logits)
            .any(|v| !v.is_finite())
        {
            return Err(Error::Numeric("non-finite logits".into()));
        }

        let ln_floor = PROB_FLOOR.ln();
        let mut log_pred = vec![0.0; k];
        log_softmax(f_logits, &mut log_pred);
        let pred: Vec<f64> = log_pred.iter().map(|v| v.exp()).collect();
        let unclamped: Vec<bool> = log_pred.iter().map(|&v| v >= ln_floor).collect();
        for v in log_pred.iter_mut() {
            *v = v.max(ln_floor);
        }

        let weights: Vec<f64> = match self.frozen {
            FrozenHead::Weights => vec![1.0 / r as f64; r],
            _ => {
                let mut w = w_logits.to_vec();
                softmax_in_place(&mut w);
                w
            }
        };

        let confusions_frozen = self.frozen == FrozenHead::Confusions;
        let mut coeffs = c_logits.to_vec();
        if !confusions_frozen {
            for block in coeffs.chunks_mut(m) {
                softmax_in_place(block);
            }
        }

        // clean[r*k + i] and the diagonals of each P_r.
        let mut clean = vec![0.0; r * k];
        let mut diag = vec![1.0; r * k];
        for (ri, &y) in labels.iter().enumerate() {
            let row = &mut clean[ri * k..(ri + 1) * k];
            if confusions_frozen {
                row[y] = 1.0;
                continue;
            }
            let c = &coeffs[ri * m..(ri + 1) * m];
            let d = &mut diag[ri * k..(ri + 1) * k];
            d.fill(0.0);
            for (mi, &cm) in c.iter().enumerate() {
                row[basis.image(mi, y)] += cm;
                for (kk, dk) in d.iter_mut().enumerate() {
                    if basis.fixes(mi, kk) {
                        *dk += cm;
                    }
                }
            }
        }

        let mut target = vec![0.0; k];
        for (ri, &wr) in weights.iter().enumerate() {
            for (t, &c) in target.iter_mut().zip(&clean[ri * k..(ri + 1) * k]) {
                *t += wr * c;
            }
        }

        let penalty_scale = self.lambda / r as f64;
        let penalty: f64 = if confusions_frozen {
            0.0
        } else {
            penalty_scale * diag.iter().map(|&d| (1.0 - d).powi(2)).sum::<f64>()
        };

        let log_target: Vec<f64> = target.iter().map(|&t| t.max(PROB_FLOOR).ln()).collect();
        let kl = match self.direction {
            KlDirection::TargetToPrediction => target
                .iter()
                .zip(&log_target)
                .zip(&log_pred)
                .filter(|((&t, _), _)| t > 0.0)
                .map(|((&t, &lt), &lp)| t * (lt - lp))
                .sum::<f64>(),
            KlDirection::PredictionToTarget => pred
                .iter()
                .zip(&log_pred)
                .zip(&log_target)
                .map(|((&p, &lp), &lt)| p * (lp - lt))
                .sum::<f64>(),
        };
        let loss = kl.max(0.0) + penalty;
        if !loss.is_finite() {
            return Err(Error::Numeric(format!("fusion loss is {loss}")));
        }

        let Some((df, dw, dc)) = grads else {
            return Ok(loss);
        };

        // dL/dtarget and dL/df_logits.
        let mut d_target = vec![0.0; k];
        match self.direction {
            KlDirection::TargetToPrediction => {
                let mut mass = 0.0;
                for i in 0..k {
                    if unclamped[i] {
                        mass += target[i];
                    }
                }
                for i in 0..k {
                    let u = if unclamped[i] { target[i] } else { 0.0 };
                    df[i] = pred[i] * mass - u;
                    d_target[i] = if target[i] >= PROB_FLOOR {
                        log_target[i] + 1.0 - log_pred[i]
                    } else {
                        log_target[i] - log_pred[i]
                    };
                }
            }
            KlDirection::PredictionToTarget => {
                let a: Vec<f64> = (0..k).map(|i| log_pred[i] - log_target[i]).collect();
                let pa: f64 = (0..k).map(|i| pred[i] * a[i]).sum();
                let pu: f64 = (0..k).filter(|&i| unclamped[i]).map(|i| pred[i]).sum();
                for i in 0..k {
                    let u = if unclamped[i] { 1.0 } else { 0.0 };
                    df[i] = pred[i] * (a[i] - pa) + pred[i] * (u - pu);
                    d_target[i] = if target[i] > PROB_FLOOR {
                        -pred[i] / target[i]
                    } else {
                        0.0
                    };
                }
            }
        }

        // Weights.
        if self.frozen == FrozenHead::Weights {
            dw.fill(0.0);
        } else {
            let dl_dw: Vec<f64> = (0..r)
                .map(|ri| {
                    clean[ri * k..(ri + 1) * k]
                        .iter()
                        .zip(&d_target)
                        .map(|(c, g)| c * g)
                        .sum()
                })
                .collect();
            softmax_backward(&weights, &dl_dw, dw);
        }

        // Coefficients.
        if confusions_frozen {
            dc.fill(0.0);
        } else {
            let mut dl_dc = vec![0.0; m];
            for (ri, &y) in labels.iter().enumerate() {
                let d = &diag[ri * k..(ri + 1) * k];
                for (mi, g) in dl_dc.iter_mut().enumerate() {
                    let mut pen = 0.0;
                    for (kk, &dk) in d.iter().enumerate() {
                        if basis.fixes(mi, kk) {
                            pen += 1.0 - dk;
                        }
                    }
                    *g = weights[ri] * d_target[basis.image(mi, y)] - 2.0 * penalty_scale * pen;
                }
                softmax_backward(
                    &coeffs[ri * m..(ri + 1) * m],
                    &dl_dc,
                    &mut dc[ri * m..(ri + 1) * m],
                );
            }
        }
        Ok(loss)
    }
}

/// Pulls `dL/dprobs` back through a softmax: `p_j (g_j - sum_i p_i g_i)`.
pub(crate) fn softmax_backward(probs: &[f64], grad_probs: &[f64], out: &mut [f64]) {
    let dot: f64 = probs.iter().zip(grad_probs).map(|(p, g)| p * g).sum();
    for ((o, &p), &g) in out.iter_mut().zip(probs).zip(grad_probs) {
        *o = p * (g - dot);
    }
}

/// Loss with the default KL direction and no frozen head.
pub fn fusion_loss(inputs: &FusionInputs, basis: &PermutationBasis, lambda: f64) -> Result<f64> {
    if !(lambda >= 0.0) {
        return Err(Error::InvalidArgument(format!("lambda must be >= 0, got {lambda}")));
    }
    FusionObjective::new(lambda).loss(inputs, basis)
}

pub fn fusion_loss_grad(
    inputs: &FusionInputs,
    basis: &PermutationBasis,
    lambda: f64,
) -> Result<(f64, FusionGradients)> {
    if !(lambda >= 0.0) {
        return Err(Error::InvalidArgument(format!("lambda must be >= 0, got {lambda}")));
    }
    FusionObjective::new(lambda).loss_grad(inputs, basis)
}
