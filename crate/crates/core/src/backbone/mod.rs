//! Multilayer perceptron trunk shared by three dense heads: class logits,
//! annotator-weight logits and per-annotator basis-coefficient logits.
//!
//! Everything is batched: rows of the input matrix are samples.

mod checkpoint;
mod optim;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CHECKPOINT_VERSION};
pub use optim::{momentum_update, SgdMomentum};

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::FusionGradients;
use crate::linalg::{argmax, softmax_in_place};

/// Logit added to the identity coefficient of every annotator block at init.
pub const IDENTITY_BIAS: f64 = 1.0;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub classes: usize,
    pub annotators: usize,
    pub basis_size: usize,
}

impl ModelDims {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.hidden.contains(&0) {
            return Err(Error::InvalidArgument(format!(
                "layer widths must be positive: input {} hidden {:?}",
                self.input_dim, self.hidden
            )));
        }
        if self.classes < 2 || self.annotators == 0 || self.basis_size == 0 {
            return Err(Error::InvalidArgument(format!(
                "need K >= 2, R >= 1, M >= 1; got K={} R={} M={}",
                self.classes, self.annotators, self.basis_size
            )));
        }
        Ok(())
    }

    /// Width of the representation the heads read.
    pub fn representation_dim(&self) -> usize {
        self.hidden.last().copied().unwrap_or(self.input_dim)
    }

    pub fn coeff_outputs(&self) -> usize {
        self.annotators * self.basis_size
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Identity,
}

/// `y = x W + b` with `W` stored `in x out`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
    pub activation: Activation,
}

impl Dense {
    fn zeros(inputs: usize, outputs: usize, activation: Activation) -> Self {
        Dense {
            weight: Array2::zeros((inputs, outputs)),
            bias: Array1::zeros(outputs),
            activation,
        }
    }

    fn uniform(inputs: usize, outputs: usize, limit: f64, activation: Activation, rng: &mut ChaCha8Rng) -> Self {
        let weight = Array2::from_shape_simple_fn((inputs, outputs), || rng.random_range(-limit..limit));
        Dense {
            weight,
            bias: Array1::zeros(outputs),
            activation,
        }
    }

    fn apply(&self, x: ArrayView2<'_, f64>) -> Array2<f64> {
        let mut z = x.dot(&self.weight);
        z += &self.bias;
        if self.activation == Activation::Relu {
            z.mapv_inplace(|v| v.max(0.0));
        }
        z
    }

    fn inputs(&self) -> usize {
        self.weight.nrows()
    }

    fn outputs(&self) -> usize {
        self.weight.ncols()
    }
}

/// All trainable parameters. Gradients and optimizer velocities use the same type.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub dims: ModelDims,
    pub trunk: Vec<Dense>,
    pub head_class: Dense,
    pub head_weights: Dense,
    pub head_coeffs: Dense,
}

/// Batched head outputs plus the trunk activations needed for backprop.
#[derive(Debug, Clone)]
pub struct HeadOutputs {
    pub class_logits: Array2<f64>,
    pub weight_logits: Array2<f64>,
    /// `B x (R*M)`, annotator-major.
    pub coeff_logits: Array2<f64>,
    pub class_probs: Array2<f64>,
    pub weights: Array2<f64>,
    pub coeffs: Array2<f64>,
    /// Input followed by each hidden layer's post-activation output.
    activations: Vec<Array2<f64>>,
}

impl HeadOutputs {
    pub fn batch_size(&self) -> usize {
        self.class_logits.nrows()
    }

    /// Representation read by the heads.
    pub fn representation(&self) -> ArrayView2<'_, f64> {
        self.activations.last().expect("input is always cached").view()
    }
}

/// Upstream gradients of the loss with respect to every head's logits.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitGradients {
    pub d_class: Array2<f64>,
    pub d_weights: Array2<f64>,
    pub d_coeffs: Array2<f64>,
}

impl LogitGradients {
    pub fn zeros(batch: usize, dims: &ModelDims) -> Self {
        LogitGradients {
            d_class: Array2::zeros((batch, dims.classes)),
            d_weights: Array2::zeros((batch, dims.annotators)),
            d_coeffs: Array2::zeros((batch, dims.coeff_outputs())),
        }
    }

    /// Stacks per-sample fusion gradients into batch form.
    pub fn from_fusion(grads: &[FusionGradients], dims: &ModelDims) -> Result<Self> {
        let mut out = Self::zeros(grads.len(), dims);
        for (i, g) in grads.iter().enumerate() {
            if g.d_f_logits.len() != dims.classes
                || g.d_w_logits.len() != dims.annotators
                || g.d_c_logits.len() != dims.annotators
                || g.d_c_logits.iter().any(|c| c.len() != dims.basis_size)
            {
                return Err(Error::dim(format!("fusion gradient {i} does not match model dims")));
            }
            out.d_class.row_mut(i).assign(&ArrayView1::from(&g.d_f_logits));
            out.d_weights.row_mut(i).assign(&ArrayView1::from(&g.d_w_logits));
            for (r, c) in g.d_c_logits.iter().enumerate() {
                let m = dims.basis_size;
                out.d_coeffs
                    .slice_mut(s![i, r * m..(r + 1) * m])
                    .assign(&ArrayView1::from(c));
            }
        }
        Ok(out)
    }
}

fn softmax_rows(logits: &Array2<f64>, block: usize) -> Array2<f64> {
    let mut out = logits.clone();
    for mut row in out.rows_mut() {
        let row = row.as_slice_mut().expect("standard layout");
        for chunk in row.chunks_mut(block) {
            softmax_in_place(chunk);
        }
    }
    out
}

/// Fan-in scaled uniform weights, zero biases, and an identity-favouring
/// coefficient bias when `identity_first` is set.
pub fn init_params(dims: &ModelDims, seed: u64, identity_first: bool) -> Result<ModelParams> {
    dims.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut trunk = Vec::with_capacity(dims.hidden.len());
    let mut width = dims.input_dim;
    for &h in &dims.hidden {
        let limit = (6.0 / width as f64).sqrt();
        trunk.push(Dense::uniform(width, h, limit, Activation::Relu, &mut rng));
        width = h;
    }
    let limit = (3.0 / width as f64).sqrt();
    let head_class = Dense::uniform(width, dims.classes, limit, Activation::Identity, &mut rng);
    let head_weights = Dense::uniform(width, dims.annotators, limit, Activation::Identity, &mut rng);
    let mut head_coeffs =
        Dense::uniform(width, dims.coeff_outputs(), limit, Activation::Identity, &mut rng);
    if identity_first {
        for r in 0..dims.annotators {
            head_coeffs.bias[r * dims.basis_size] = IDENTITY_BIAS;
        }
    }
    Ok(ModelParams {
        dims: dims.clone(),
        trunk,
        head_class,
        head_weights,
        head_coeffs,
    })
}

impl ModelParams {
    /// All-zero parameters with the layer shapes of `dims`.
    pub fn zeros(dims: &ModelDims) -> Self {
        let mut trunk = Vec::new();
        let mut width = dims.input_dim;
        for &h in &dims.hidden {
            trunk.push(Dense::zeros(width, h, Activation::Relu));
            width = h;
        }
        ModelParams {
            dims: dims.clone(),
            trunk,
            head_class: Dense::zeros(width, dims.classes, Activation::Identity),
            head_weights: Dense::zeros(width, dims.annotators, Activation::Identity),
            head_coeffs: Dense::zeros(width, dims.coeff_outputs(), Activation::Identity),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(&self.dims)
    }

    fn layers(&self) -> impl Iterator<Item = &Dense> {
        self.trunk
            .iter()
            .chain([&self.head_class, &self.head_weights, &self.head_coeffs])
    }

    fn layers_mut(&mut self) -> impl Iterator<Item = &mut Dense> {
        self.trunk.iter_mut().chain([
            &mut self.head_class,
            &mut self.head_weights,
            &mut self.head_coeffs,
        ])
    }

    /// Every parameter tensor as a flat slice, in checkpoint order.
    pub fn tensors(&self) -> Vec<&[f64]> {
        self.layers()
            .flat_map(|l| {
                [
                    l.weight.as_slice().expect("standard layout"),
                    l.bias.as_slice().expect("standard layout"),
                ]
            })
            .collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        self.layers_mut()
            .flat_map(|l| {
                [
                    l.weight.as_slice_mut().expect("standard layout"),
                    l.bias.as_slice_mut().expect("standard layout"),
                ]
            })
            .collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|v| v.is_finite()))
    }

    /// True when shapes (and dims) agree with `other`.
    pub fn same_shape(&self, other: &ModelParams) -> bool {
        self.dims == other.dims
            && self
                .tensors()
                .iter()
                .zip(other.tensors())
                .all(|(a, b)| a.len() == b.len())
    }

    fn check_input(&self, x: ArrayView2<'_, f64>) -> Result<()> {
        if x.ncols() != self.dims.input_dim {
            return Err(Error::dim(format!(
                "input has {} features, model expects {}",
                x.ncols(),
                self.dims.input_dim
            )));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite input features".into()));
        }
        Ok(())
    }

    fn representation(&self, x: ArrayView2<'_, f64>) -> Vec<Array2<f64>> {
        let mut acts = Vec::with_capacity(self.trunk.len() + 1);
        acts.push(x.to_owned());
        for layer in &self.trunk {
            let next = layer.apply(acts.last().expect("non-empty").view());
            acts.push(next);
        }
        acts
    }

    /// Runs the trunk once and all three heads on its output.
    pub fn forward_batch(&self, x: ArrayView2<'_, f64>) -> Result<HeadOutputs> {
        self.check_input(x)?;
        let activations = self.representation(x);
        let rep = activations.last().expect("non-empty").view();
        let class_logits = self.head_class.apply(rep);
        let weight_logits = self.head_weights.apply(rep);
        let coeff_logits = self.head_coeffs.apply(rep);
        if class_logits
            .iter()
            .chain(weight_logits.iter())
            .chain(coeff_logits.iter())
            .any(|v| !v.is_finite())
        {
            return Err(Error::Numeric("non-finite activation in forward pass".into()));
        }
        let class_probs = softmax_rows(&class_logits, self.dims.classes);
        let weights = softmax_rows(&weight_logits, self.dims.annotators);
        let coeffs = softmax_rows(&coeff_logits, self.dims.basis_size);
        Ok(HeadOutputs {
            class_logits,
            weight_logits,
            coeff_logits,
            class_probs,
            weights,
            coeffs,
            activations,
        })
    }

    /// Single-sample forward pass (a batch of one).
    pub fn forward(&self, x: ArrayView1<'_, f64>) -> Result<HeadOutputs> {
        self.forward_batch(x.insert_axis(Axis(0)))
    }

    /// Class probabilities only; the weight and coefficient heads are not evaluated.
    pub fn class_probs(&self, x: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        self.check_input(x)?;
        let acts = self.representation(x);
        let logits = self.head_class.apply(acts.last().expect("non-empty").view());
        if logits.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite class logits".into()));
        }
        Ok(softmax_rows(&logits, self.dims.classes))
    }

    /// Argmax class per row, ties toward the smallest index.
    pub fn predict(&self, x: ArrayView2<'_, f64>) -> Result<Vec<usize>> {
        let probs = self.class_probs(x)?;
        Ok(probs
            .rows()
            .into_iter()
            .map(|r| argmax(r.as_slice().expect("standard layout")))
            .collect())
    }

    pub fn predict_class(&self, x: ArrayView1<'_, f64>) -> Result<usize> {
        Ok(self.predict(x.insert_axis(Axis(0)))?[0])
    }

    /// Gradients of a scalar loss with respect to every parameter, given the
    /// loss gradients at the three heads' logits.
    pub fn backward(&self, cache: &HeadOutputs, upstream: &LogitGradients) -> Result<ModelParams> {
        let b = cache.batch_size();
        let d = &self.dims;
        if cache.activations.len() != self.trunk.len() + 1
            || cache
                .activations
                .iter()
                .skip(1)
                .zip(&self.trunk)
                .any(|(a, l)| a.ncols() != l.outputs())
        {
            return Err(Error::dim("forward cache does not match these parameters"));
        }
        if upstream.d_class.dim() != (b, d.classes)
            || upstream.d_weights.dim() != (b, d.annotators)
            || upstream.d_coeffs.dim() != (b, d.coeff_outputs())
        {
            return Err(Error::dim("upstream gradient shapes do not match the batch"));
        }

        let mut grads = self.zeros_like();
        let rep = cache.representation();
        let heads = [
            (&self.head_class, &mut grads.head_class, &upstream.d_class),
            (&self.head_weights, &mut grads.head_weights, &upstream.d_weights),
            (&self.head_coeffs, &mut grads.head_coeffs, &upstream.d_coeffs),
        ];
        let mut d_rep: Option<Array2<f64>> = None;
        for (layer, grad, up) in heads {
            grad.weight = rep.t().dot(up);
            grad.bias = up.sum_axis(Axis(0));
            if !self.trunk.is_empty() {
                let contrib = up.dot(&layer.weight.t());
                match d_rep.as_mut() {
                    Some(acc) => *acc += &contrib,
                    None => d_rep = Some(contrib),
                }
            }
        }

        let mut delta = match d_rep {
            Some(v) => v,
            None => return Ok(grads),
        };
        for l in (0..self.trunk.len()).rev() {
            let out = &cache.activations[l + 1];
            if self.trunk[l].activation == Activation::Relu {
                ndarray::Zip::from(&mut delta).and(out).for_each(|g, &a| {
                    if a <= 0.0 {
                        *g = 0.0;
                    }
                });
            }
            let input = &cache.activations[l];
            grads.trunk[l].weight = input.t().dot(&delta);
            grads.trunk[l].bias = delta.sum_axis(Axis(0));
            if l > 0 {
                delta = delta.dot(&self.trunk[l].weight.t());
            }
        }
        debug_assert_eq!(grads.trunk.first().map(Dense::inputs).unwrap_or(d.input_dim), d.input_dim);
        Ok(grads)
    }

    /// In-place `self += scale * other`.
    pub fn scaled_add(&mut self, scale: f64, other: &ModelParams) {
        for (a, b) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += scale * y;
            }
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.tensors()
            .iter()
            .flat_map(|t| t.iter())
            .fold(0.0, |m, v| m.max(v.abs()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fusion::{fusion_loss_grad, FusionInputs, FusionObjective};
    use crate::linalg::{random_permutation_basis, OneHotLabel, PermutationBasis};
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    fn dims(input: usize, hidden: &[usize], k: usize, r: usize, m: usize) -> ModelDims {
        ModelDims {
            input_dim: input,
            hidden: hidden.to_vec(),
            classes: k,
            annotators: r,
            basis_size: m,
        }
    }

    fn simplex_rows(a: &Array2<f64>, block: usize) -> bool {
        a.rows().into_iter().all(|r| {
            r.as_slice()
                .unwrap()
                .chunks(block)
                .all(|c| (c.iter().sum::<f64>() - 1.0).abs() < 1e-12 && c.iter().all(|&v| v >= 0.0))
        })
    }

    #[test]
    fn init_is_deterministic() {
        let d = dims(4, &[8, 6], 3, 2, 5);
        assert_eq!(init_params(&d, 7, true).unwrap(), init_params(&d, 7, true).unwrap());
        assert_ne!(init_params(&d, 7, true).unwrap(), init_params(&d, 8, true).unwrap());
    }

    #[test]
    fn init_without_hidden_layers() {
        let d = dims(5, &[], 3, 2, 4);
        let p = init_params(&d, 0, true).unwrap();
        assert!(p.trunk.is_empty());
        assert_eq!(p.head_class.weight.dim(), (5, 3));
        let out = p.forward(array![1.0, 2.0, 3.0, 4.0, 5.0].view()).unwrap();
        assert_eq!(out.representation().ncols(), 5);
    }

    #[test]
    fn twomoon_shape() {
        let d = dims(2, &[32, 32], 2, 2, 2);
        let p = init_params(&d, 0, true).unwrap();
        assert_eq!(p.head_coeffs.outputs(), 4);
        assert_eq!(p.head_coeffs.bias[0], IDENTITY_BIAS);
        assert_eq!(p.head_coeffs.bias[2], IDENTITY_BIAS);
        assert_eq!(p.head_coeffs.bias[1], 0.0);
    }

    #[test]
    fn invalid_dims() {
        assert!(init_params(&dims(0, &[], 2, 1, 1), 0, true).is_err());
        assert!(init_params(&dims(2, &[0], 2, 1, 1), 0, true).is_err());
        assert!(init_params(&dims(2, &[3], 1, 1, 1), 0, true).is_err());
    }

    #[test]
    fn outputs_are_simplex_valued() {
        let d = dims(3, &[5], 4, 3, 6);
        let p = init_params(&d, 1, true).unwrap();
        let x = array![[0.5, -1.0, 2.0], [3.0, 0.0, -0.2]];
        let out = p.forward_batch(x.view()).unwrap();
        assert!(simplex_rows(&out.class_probs, 4));
        assert!(simplex_rows(&out.weights, 3));
        assert!(simplex_rows(&out.coeffs, 6));
        let again = p.forward_batch(x.view()).unwrap();
        assert_eq!(out.class_probs, again.class_probs);
        assert_eq!(out.coeffs, again.coeffs);
    }

    #[test]
    fn zero_params_give_uniform_outputs() {
        let d = dims(3, &[4], 3, 2, 5);
        let p = ModelParams::zeros(&d);
        let out = p.forward(array![1.0, 2.0, 3.0].view()).unwrap();
        assert!(out.class_probs.iter().all(|&v| (v - 1.0 / 3.0).abs() < 1e-15));
        assert!(out.weights.iter().all(|&v| (v - 0.5).abs() < 1e-15));
        assert!(out.coeffs.iter().all(|&v| (v - 0.2).abs() < 1e-15));
    }

    #[test]
    fn forward_rejects_bad_input() {
        let p = init_params(&dims(3, &[4], 2, 1, 1), 0, false).unwrap();
        assert!(matches!(p.forward(array![1.0, 2.0].view()), Err(Error::Dimension(_))));
        assert!(matches!(
            p.forward(array![1.0, f64::NAN, 0.0].view()),
            Err(Error::Numeric(_))
        ));
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let d = dims(3, &[4, 4], 2, 2, 2);
        let p = init_params(&d, 3, true).unwrap();
        let x = array![[0.1, 0.2, 0.3]];
        let out = p.forward_batch(x.view()).unwrap();
        let g = p.backward(&out, &LogitGradients::zeros(1, &d)).unwrap();
        assert_eq!(g.max_abs(), 0.0);
    }

    #[test]
    fn predict_tie_and_argmax() {
        let d = dims(2, &[], 3, 1, 1);
        let mut p = ModelParams::zeros(&d);
        p.head_class.bias = array![(0.1f64).ln(), (0.7f64).ln(), (0.2f64).ln()];
        assert_eq!(p.predict_class(array![0.0, 0.0].view()).unwrap(), 1);
        let d = dims(2, &[], 2, 1, 1);
        let p = ModelParams::zeros(&d);
        assert_eq!(p.predict_class(array![0.3, -0.2].view()).unwrap(), 0);
    }

    #[test]
    fn prediction_ignores_auxiliary_heads() {
        let d = dims(2, &[6], 3, 2, 3);
        let p = init_params(&d, 5, true).unwrap();
        let mut q = p.clone();
        q.head_weights.weight.mapv_inplace(|v| v * 10.0 + 1.0);
        q.head_coeffs.bias.fill(-3.0);
        let x = array![[0.3, -0.4], [1.0, 2.0], [-2.0, 0.1]];
        assert_eq!(p.predict(x.view()).unwrap(), q.predict(x.view()).unwrap());
        assert_eq!(p.class_probs(x.view()).unwrap(), q.class_probs(x.view()).unwrap());
    }

    #[test]
    fn class_head_perturbation_leaves_other_heads() {
        let d = dims(2, &[6], 3, 2, 3);
        let p = init_params(&d, 5, true).unwrap();
        let mut q = p.clone();
        q.head_class.weight.mapv_inplace(|v| v - 0.5);
        q.head_class.bias.fill(2.0);
        let x = array![[0.3, -0.4], [1.0, 2.0]];
        let a = p.forward_batch(x.view()).unwrap();
        let b = q.forward_batch(x.view()).unwrap();
        assert_eq!(a.weights, b.weights);
        assert_eq!(a.coeffs, b.coeffs);
        assert_ne!(a.class_probs, b.class_probs);
    }

    fn pipeline_loss(
        p: &ModelParams,
        x: &Array2<f64>,
        labels: &[Vec<OneHotLabel>],
        basis: &PermutationBasis,
        obj: &FusionObjective,
    ) -> f64 {
        let out = p.forward_batch(x.view()).unwrap();
        let m = basis.len();
        let mut total = 0.0;
        for i in 0..x.nrows() {
            let inputs = sample_inputs(&out, i, &labels[i], m);
            total += obj.loss(&inputs, basis).unwrap();
        }
        total / x.nrows() as f64
    }

    fn sample_inputs(out: &HeadOutputs, i: usize, labels: &[OneHotLabel], m: usize) -> FusionInputs {
        FusionInputs {
            f_logits: out.class_logits.row(i).to_vec(),
            w_logits: out.weight_logits.row(i).to_vec(),
            c_logits: out.coeff_logits.row(i).as_slice().unwrap().chunks(m).map(<[f64]>::to_vec).collect(),
            annotator_labels: labels.to_vec(),
        }
    }

    #[test]
    fn end_to_end_gradient_matches_finite_differences() {
        // 2 inputs, one hidden layer of 4, K = R = M = 2.
        let d = dims(2, &[4], 2, 2, 2);
        let basis = random_permutation_basis(2, 2, 0, true).unwrap();
        let obj = FusionObjective::new(1.0);
        let x = array![[0.4, -1.2], [1.5, 0.3], [-0.7, 0.9]];
        let labels: Vec<Vec<OneHotLabel>> = [[0, 1], [1, 1], [0, 0]]
            .iter()
            .map(|ls| ls.iter().map(|&y| OneHotLabel::new(y, 2).unwrap()).collect())
            .collect();

        for seed in 0..20u64 {
            let p = init_params(&d, seed, true).unwrap();
            let out = p.forward_batch(x.view()).unwrap();
            let per_sample: Vec<_> = (0..3)
                .map(|i| {
                    let (_, mut g) = fusion_loss_grad(&sample_inputs(&out, i, &labels[i], 2), &basis, 1.0).unwrap();
                    for v in g.d_f_logits.iter_mut().chain(g.d_w_logits.iter_mut()).chain(g.d_c_logits.iter_mut().flatten()) {
                        *v /= 3.0;
                    }
                    g
                })
                .collect();
            let up = LogitGradients::from_fusion(&per_sample, &d).unwrap();
            let analytic = p.backward(&out, &up).unwrap();

            let h = 1e-5;
            let mut worst: f64 = 0.0;
            let n_tensors = p.tensors().len();
            for t in 0..n_tensors {
                let len = p.tensors()[t].len();
                for j in 0..len {
                    let mut a = p.clone();
                    a.tensors_mut()[t][j] += h;
                    let mut b = p.clone();
                    b.tensors_mut()[t][j] -= h;
                    let num = (pipeline_loss(&a, &x, &labels, &basis, &obj)
                        - pipeline_loss(&b, &x, &labels, &basis, &obj))
                        / (2.0 * h);
                    let ana = analytic.tensors()[t][j];
                    let rel = (num - ana).abs() / num.abs().max(ana.abs()).max(1e-8);
                    worst = worst.max(rel);
                }
            }
            assert!(worst < 1e-4, "seed {seed}: max relative error {worst}");
        }
    }

    #[test]
    fn descent_on_single_sample() {
        let d = dims(3, &[8], 3, 1, 1);
        let mut p = init_params(&d, 2, false).unwrap();
        let x = array![[0.5, -0.3, 1.2]];
        let target = 2usize;
        let mut opt = SgdMomentum::new(&p, 0.05, 0.0);
        let mut prev = f64::INFINITY;
        for _ in 0..50 {
            let out = p.forward_batch(x.view()).unwrap();
            let probs = out.class_probs.row(0);
            let loss = -probs[target].ln();
            assert!(loss <= prev + 1e-12, "loss rose from {prev} to {loss}");
            prev = loss;
            let mut up = LogitGradients::zeros(1, &d);
            for k in 0..3 {
                up.d_class[[0, k]] = probs[k] - if k == target { 1.0 } else { 0.0 };
            }
            let g = p.backward(&out, &up).unwrap();
            opt.step(&mut p, &g).unwrap();
        }
        assert!(prev < 0.1);
    }

    #[test]
    fn backward_rejects_foreign_cache() {
        let p = init_params(&dims(2, &[3], 2, 1, 1), 0, false).unwrap();
        let q = init_params(&dims(2, &[5], 2, 1, 1), 0, false).unwrap();
        let out = q.forward_batch(array![[0.0, 1.0]].view()).unwrap();
        assert!(p.backward(&out, &LogitGradients::zeros(1, &p.dims)).is_err());
    }

    #[test]
    fn scaled_add_and_count() {
        let d = dims(2, &[3], 2, 1, 1);
        let mut p = ModelParams::zeros(&d);
        let mut ones = ModelParams::zeros(&d);
        for t in ones.tensors_mut() {
            t.fill(1.0);
        }
        p.scaled_add(-0.5, &ones);
        assert_eq!(p.parameter_count(), 2 * 3 + 3 + (3 * 2 + 2) + (3 + 1) + (3 + 1));
        assert_abs_diff_eq!(p.max_abs(), 0.5);
    }
}
