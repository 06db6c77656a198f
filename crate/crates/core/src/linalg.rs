//! Probability-simplex primitives and the permutation-basis parameterization
//! of doubly stochastic confusion matrices.
//!
//! A confusion matrix here is column-stochastic: column `j` is the
//! distribution of the de-biased label given that the annotator said `j`.
//! Matrices built by [`reconstruct_confusion`] are convex combinations of
//! permutation matrices and therefore doubly stochastic.

use std::collections::HashSet;

use ndarray::{Array1, Array2, ArrayView2};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default tolerance for simplex and stochasticity checks.
pub const DEFAULT_TOL: f64 = 1e-9;

/// A point on the probability simplex.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbVector(Array1<f64>);

impl ProbVector {
    /// Validates that `entries` lie in [0, 1] and sum to 1 within `DEFAULT_TOL`.
    pub fn new(entries: Array1<f64>) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::dim("probability vector must be non-empty"));
        }
        if entries.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("probability vector has non-finite entries".into()));
        }
        if entries
            .iter()
            .any(|&v| !(-DEFAULT_TOL..=1.0 + DEFAULT_TOL).contains(&v))
        {
            return Err(Error::InvalidArgument(format!(
                "probability entries must lie in [0, 1]: {entries}"
            )));
        }
        let total = entries.sum();
        if (total - 1.0).abs() > DEFAULT_TOL {
            return Err(Error::InvalidArgument(format!(
                "probability vector sums to {total}, not 1"
            )));
        }
        Ok(ProbVector(entries))
    }

    pub fn from_vec(entries: Vec<f64>) -> Result<Self> {
        Self::new(Array1::from(entries))
    }

    /// Wraps entries that are simplex-valued by construction (softmax output,
    /// convex combinations).
    pub(crate) fn from_trusted(entries: Array1<f64>) -> Self {
        debug_assert!((entries.sum() - 1.0).abs() < 1e-6);
        ProbVector(entries)
    }

    pub fn uniform(len: usize) -> Self {
        ProbVector(Array1::from_elem(len, 1.0 / len as f64))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_array(&self) -> &Array1<f64> {
        &self.0
    }

    pub fn as_slice(&self) -> &[f64] {
        self.0.as_slice().expect("ProbVector is contiguous")
    }

    pub fn into_inner(self) -> Array1<f64> {
        self.0
    }

    pub fn get(&self, index: usize) -> f64 {
        self.0[index]
    }

    /// Index of the largest entry, ties broken toward the smallest index.
    pub fn argmax(&self) -> usize {
        argmax(self.as_slice())
    }
}

/// Argmax with ties broken toward the smallest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// A class label together with the number of classes it lives in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct OneHotLabel {
    class_index: usize,
    classes: usize,
}

impl OneHotLabel {
    pub fn new(class_index: usize, classes: usize) -> Result<Self> {
        if classes < 2 || class_index >= classes {
            return Err(Error::InvalidLabel {
                label: class_index,
                classes,
            });
        }
        Ok(OneHotLabel {
            class_index,
            classes,
        })
    }

    pub fn class_index(&self) -> usize {
        self.class_index
    }

    pub fn classes(&self) -> usize {
        self.classes
    }
}

/// Materializes a label as a one-hot probability vector.
pub fn one_hot(label: OneHotLabel) -> ProbVector {
    let mut v = Array1::zeros(label.classes);
    v[label.class_index] = 1.0;
    ProbVector(v)
}

/// Max-shifted softmax.
pub fn softmax(logits: &[f64]) -> Result<ProbVector> {
    if logits.is_empty() {
        return Err(Error::dim("softmax of an empty vector"));
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("softmax input has non-finite entries".into()));
    }
    let mut out = Array1::from(logits.to_vec());
    softmax_in_place(out.as_slice_mut().expect("contiguous"));
    Ok(ProbVector(out))
}

/// In-place max-shifted softmax. Callers guarantee finite input.
pub(crate) fn softmax_in_place(values: &mut [f64]) {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in values.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in values.iter_mut() {
        *v /= total;
    }
}

/// Log-softmax computed through the log-sum-exp of the shifted logits.
pub(crate) fn log_softmax(logits: &[f64], out: &mut [f64]) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = logits.iter().map(|&v| (v - max).exp()).sum::<f64>().ln() + max;
    for (o, &v) in out.iter_mut().zip(logits) {
        *o = v - lse;
    }
}

/// `n!`, or `None` if it does not fit in a `u128`.
pub fn factorial(n: usize) -> Option<u128> {
    (1..=n as u128).try_fold(1u128, |acc, k| acc.checked_mul(k))
}

/// A fixed set of distinct `K x K` permutation matrices.
///
/// Each permutation is stored as the map `column -> row` of its single 1,
/// so `B_m e_j = e_{perm[j]}`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PermutationBasis {
    classes: usize,
    perms: Vec<Vec<usize>>,
    seed: u64,
    include_identity: bool,
}

impl PermutationBasis {
    /// Builds a basis from explicit permutations; used for hand-made bases
    /// and checkpoint restore.
    pub fn from_permutations(classes: usize, perms: Vec<Vec<usize>>) -> Result<Self> {
        if classes < 2 {
            return Err(Error::InvalidArgument(format!(
                "permutation basis needs K >= 2, got {classes}"
            )));
        }
        if perms.is_empty() {
            return Err(Error::InvalidArgument("permutation basis needs M >= 1".into()));
        }
        let mut seen = HashSet::new();
        for p in &perms {
            if p.len() != classes {
                return Err(Error::dim(format!(
                    "permutation of length {} in a K={classes} basis",
                    p.len()
                )));
            }
            let mut hit = vec![false; classes];
            for &row in p {
                if row >= classes || hit[row] {
                    return Err(Error::InvalidArgument(format!("{p:?} is not a permutation")));
                }
                hit[row] = true;
            }
            if !seen.insert(p.clone()) {
                return Err(Error::InvalidArgument(format!("duplicate permutation {p:?}")));
            }
        }
        let include_identity = perms[0].iter().enumerate().all(|(j, &i)| i == j);
        Ok(PermutationBasis {
            classes,
            perms,
            seed: 0,
            include_identity,
        })
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn len(&self) -> usize {
        self.perms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.perms.is_empty()
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// True when the first basis element is the identity.
    pub fn has_identity_first(&self) -> bool {
        self.include_identity
    }

    pub fn permutations(&self) -> &[Vec<usize>] {
        &self.perms
    }

    /// Row of the 1 in column `column` of basis element `m`.
    #[inline]
    pub fn image(&self, m: usize, column: usize) -> usize {
        self.perms[m][column]
    }

    /// Whether basis element `m` has a 1 at diagonal position `k`.
    #[inline]
    pub fn fixes(&self, m: usize, k: usize) -> bool {
        self.perms[m][k] == k
    }

    pub fn matrix(&self, m: usize) -> Array2<f64> {
        let mut b = Array2::zeros((self.classes, self.classes));
        for (col, &row) in self.perms[m].iter().enumerate() {
            b[[row, col]] = 1.0;
        }
        b
    }

    pub fn matrices(&self) -> Vec<Array2<f64>> {
        (0..self.len()).map(|m| self.matrix(m)).collect()
    }
}

/// Draws `m` distinct uniformly random permutations of `k` elements.
///
/// With `include_identity` the identity is placed first and the remaining
/// `m - 1` elements are drawn from the non-identity permutations.
pub fn random_permutation_basis(
    k: usize,
    m: usize,
    seed: u64,
    include_identity: bool,
) -> Result<PermutationBasis> {
    if k < 2 {
        return Err(Error::InvalidArgument(format!(
            "permutation basis needs K >= 2, got {k}"
        )));
    }
    if m == 0 {
        return Err(Error::InvalidArgument("permutation basis needs M >= 1".into()));
    }
    if let Some(available) = factorial(k) {
        if m as u128 > available {
            return Err(Error::InfeasibleBasis {
                requested: m,
                available,
                classes: k,
            });
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let identity: Vec<usize> = (0..k).collect();
    let mut perms = Vec::with_capacity(m);
    let mut seen = HashSet::with_capacity(m);
    if include_identity {
        seen.insert(identity.clone());
        perms.push(identity.clone());
    }
    while perms.len() < m {
        let mut p = identity.clone();
        p.shuffle(&mut rng);
        if seen.insert(p.clone()) {
            perms.push(p);
        }
    }
    Ok(PermutationBasis {
        classes: k,
        perms,
        seed,
        include_identity,
    })
}

/// A `K x K` column-stochastic matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfusionMatrix(Array2<f64>);

impl ConfusionMatrix {
    /// Validates column stochasticity at `DEFAULT_TOL`.
    pub fn new(entries: Array2<f64>) -> Result<Self> {
        match stochasticity_class(entries.view(), DEFAULT_TOL)? {
            Stochasticity::NotStochastic => Err(Error::InvalidArgument(
                "confusion matrix columns must be probability vectors".into(),
            )),
            _ => Ok(ConfusionMatrix(entries)),
        }
    }

    pub fn identity(k: usize) -> Self {
        ConfusionMatrix(Array2::eye(k))
    }

    pub fn classes(&self) -> usize {
        self.0.nrows()
    }

    pub fn as_array(&self) -> &Array2<f64> {
        &self.0
    }

    pub fn into_inner(self) -> Array2<f64> {
        self.0
    }
}

/// Sum over `m` of `coeffs[m] * B_m`.
pub fn reconstruct_confusion(coeffs: &ProbVector, basis: &PermutationBasis) -> Result<ConfusionMatrix> {
    if coeffs.len() != basis.len() {
        return Err(Error::dim(format!(
            "{} coefficients for a basis of {} permutations",
            coeffs.len(),
            basis.len()
        )));
    }
    let k = basis.classes();
    let mut p = Array2::zeros((k, k));
    for (m, &c) in coeffs.as_slice().iter().enumerate() {
        for (col, &row) in basis.perms[m].iter().enumerate() {
            p[[row, col]] += c;
        }
    }
    Ok(ConfusionMatrix(p))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stochasticity {
    NotStochastic,
    Singly,
    Doubly,
}

/// Classifies a square matrix as column-stochastic, doubly stochastic, or neither.
pub fn stochasticity_class(matrix: ArrayView2<'_, f64>, tol: f64) -> Result<Stochasticity> {
    if !matrix.is_square() {
        return Err(Error::dim(format!(
            "stochasticity check needs a square matrix, got {:?}",
            matrix.dim()
        )));
    }
    let in_range = matrix
        .iter()
        .all(|&v| v.is_finite() && v >= -tol && v <= 1.0 + tol);
    let columns_ok = matrix
        .columns()
        .into_iter()
        .all(|c| (c.sum() - 1.0).abs() <= tol);
    if !in_range || !columns_ok {
        return Ok(Stochasticity::NotStochastic);
    }
    let rows_ok = matrix.rows().into_iter().all(|r| (r.sum() - 1.0).abs() <= tol);
    Ok(if rows_ok {
        Stochasticity::Doubly
    } else {
        Stochasticity::Singly
    })
}
