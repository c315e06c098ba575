//! Dense vector and matrix primitives plus the scalar functions shared by
//! every routing and loss path.
//!
//! All arithmetic is `f64`. The checked functions here validate their
//! inputs; the differentiable versions on [`Tape`] mirror them without the
//! checks and are tested against them.

mod gradcheck;
mod rng;
mod tape;

use std::ops::{Deref, DerefMut};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use gradcheck::{finite_difference_gradient, relative_error, GradCheckReport, DEFAULT_STEP};
pub use rng::{seeded_rng, SeededRng};
pub use tape::{Gradients, Tape, Var};

/// Lower clamp applied to every probability that enters a logarithm.
pub const PROB_FLOOR: f64 = 1e-12;

/// A non-empty vector of finite reals.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct Vector(Vec<f64>);

/// Embeddings are plain vectors in the model dimension.
pub type Embedding = Vector;

impl Vector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::InvalidInput("vector must have dim >= 1".into()));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "vector entry {i} is not finite ({})",
                values[i]
            )));
        }
        Ok(Vector(values))
    }

    pub fn zeros(dim: usize) -> Self {
        assert!(dim > 0, "vector dim must be positive");
        Vector(vec![0.0; dim])
    }

    /// Wraps values already known to be finite (outputs of checked ops).
    pub(crate) fn from_finite(values: Vec<f64>) -> Self {
        debug_assert!(!values.is_empty() && values.iter().all(|v| v.is_finite()));
        Vector(values)
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn norm(&self) -> f64 {
        norm(&self.0)
    }

    pub fn sub(&self, other: &Vector) -> Result<Vector> {
        check_dims("vector subtraction", self.dim(), other.dim())?;
        Ok(Vector(
            self.0.iter().zip(&other.0).map(|(a, b)| a - b).collect(),
        ))
    }
}

impl TryFrom<Vec<f64>> for Vector {
    type Error = Error;

    fn try_from(values: Vec<f64>) -> Result<Self> {
        Vector::new(values)
    }
}

impl From<Vector> for Vec<f64> {
    fn from(v: Vector) -> Self {
        v.0
    }
}

impl Deref for Vector {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl DerefMut for Vector {
    fn deref_mut(&mut self) -> &mut [f64] {
        &mut self.0
    }
}

/// Row-major dense matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawMatrix", into = "RawMatrix")]
pub struct Matrix {
    rows: usize,
    cols: usize,
    values: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct RawMatrix {
    rows: usize,
    cols: usize,
    values: Vec<f64>,
}

impl TryFrom<RawMatrix> for Matrix {
    type Error = Error;

    fn try_from(raw: RawMatrix) -> Result<Self> {
        Matrix::new(raw.rows, raw.cols, raw.values)
    }
}

impl From<Matrix> for RawMatrix {
    fn from(m: Matrix) -> Self {
        RawMatrix {
            rows: m.rows,
            cols: m.cols,
            values: m.values,
        }
    }
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::InvalidInput("matrix dims must be positive".into()));
        }
        check_dims("matrix values", rows * cols, values.len())?;
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("matrix has non-finite entries".into()));
        }
        Ok(Matrix { rows, cols, values })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        assert!(rows > 0 && cols > 0, "matrix dims must be positive");
        Matrix {
            rows,
            cols,
            values: vec![0.0; rows * cols],
        }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut values = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                values.push(f(r, c));
            }
        }
        Matrix { rows, cols, values }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.cols + col]
    }

    pub fn row(&self, row: usize) -> &[f64] {
        &self.values[row * self.cols..(row + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.values
    }

    /// `xᵀ · self`: contracts `x` (length `rows`) against the rows.
    pub fn vecmat(&self, x: &[f64]) -> Result<Vector> {
        check_dims("vector-matrix product", self.rows, x.len())?;
        Ok(Vector::from_finite(vecmat(x, &self.values, self.cols)))
    }
}

pub(crate) fn check_dims(context: &'static str, expected: usize, actual: usize) -> Result<()> {
    if expected != actual {
        return Err(Error::Shape {
            context,
            expected,
            actual,
        });
    }
    Ok(())
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// `out[j] = Σ_i x[i] · w[i, j]` for a row-major `w` with `cols` columns.
pub(crate) fn vecmat(x: &[f64], w: &[f64], cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; cols];
    for (xi, row) in x.iter().zip(w.chunks_exact(cols)) {
        for (o, wij) in out.iter_mut().zip(row) {
            *o += xi * wij;
        }
    }
    out
}

pub(crate) fn softmax_unchecked(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let total: f64 = out.iter().sum();
    for o in &mut out {
        *o /= total;
    }
    out
}

/// Numerically stable softmax (max-subtracted).
pub fn softmax(logits: &[f64]) -> Result<Vector> {
    if logits.is_empty() {
        return Err(Error::InvalidInput("softmax of an empty vector".into()));
    }
    if logits.iter().any(|z| !z.is_finite()) {
        return Err(Error::InvalidInput("softmax logits must be finite".into()));
    }
    Ok(Vector::from_finite(softmax_unchecked(logits)))
}

pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    check_dims("cosine", a.len(), b.len())?;
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 {
        return Err(Error::DegenerateVector("first cosine operand"));
    }
    if nb == 0.0 {
        return Err(Error::DegenerateVector("second cosine operand"));
    }
    Ok((dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

fn check_distribution(p: &[f64]) -> Result<()> {
    let sum: f64 = p.iter().sum();
    if !sum.is_finite() || (sum - 1.0).abs() > 1e-6 || p.iter().any(|v| *v < 0.0) {
        return Err(Error::InvalidDistribution { sum });
    }
    Ok(())
}

/// `KL(p ‖ q)`, with `0 · log(0 / q)` terms contributing zero.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> Result<f64> {
    check_dims("kl divergence", p.len(), q.len())?;
    check_distribution(p)?;
    check_distribution(q)?;
    if q.iter().any(|v| *v <= 0.0) {
        return Err(Error::InvalidInput("kl divergence needs q > 0".into()));
    }
    Ok(kl_unchecked(p, q).max(0.0))
}

pub(crate) fn kl_unchecked(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .filter(|(pi, _)| **pi > 0.0)
        .map(|(pi, qi)| pi * (pi.max(PROB_FLOOR).ln() - qi.max(PROB_FLOOR).ln()))
        .sum()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Binary cross-entropy of `sigmoid(temperature · score)` against a 0/1
/// label, with the probability clamped to `[1e-12, 1 - 1e-12]`.
pub fn binary_cross_entropy(score: f64, label: bool, temperature: f64) -> Result<f64> {
    if !score.is_finite() || !temperature.is_finite() {
        return Err(Error::InvalidInput("bce inputs must be finite".into()));
    }
    if temperature <= 0.0 {
        return Err(Error::InvalidInput("bce temperature must be positive".into()));
    }
    Ok(bce_unchecked(score, label, temperature))
}

/// `softplus(−z)` for a positive label and `softplus(z)` otherwise, with
/// `z = temperature · score`, clamped to the range the probability clamp
/// allows.
pub(crate) fn bce_unchecked(score: f64, label: bool, temperature: f64) -> f64 {
    let z = temperature * score;
    let margin = if label { z } else { -z };
    let loss = if margin >= 0.0 {
        (-margin).exp().ln_1p()
    } else {
        -margin + margin.exp().ln_1p()
    };
    loss.clamp(-(-PROB_FLOOR).ln_1p(), -PROB_FLOOR.ln())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let out = softmax(&[0.0; 4]).unwrap();
        assert!(out.iter().all(|v| (v - 0.25).abs() < 1e-15));
    }

    #[test]
    fn softmax_reference_values() {
        // exp(k) / (e + e^2 + e^3), evaluated at high precision
        let out = softmax(&[1.0, 2.0, 3.0]).unwrap();
        let expected = [0.090_030_573_170_380_46, 0.244_728_471_054_797_6, 0.665_240_955_774_821_9];
        for (o, e) in out.iter().zip(expected) {
            assert!((o - e).abs() < 1e-12, "{o} vs {e}");
        }
    }

    #[test]
    fn softmax_rejects_non_finite() {
        assert!(matches!(softmax(&[1.0, f64::NAN]), Err(Error::InvalidInput(_))));
        assert!(softmax(&[]).is_err());
    }

    #[test]
    fn softmax_survives_huge_logits() {
        let out = softmax(&[1000.0, 1000.0]).unwrap();
        assert_eq!(out.as_slice(), &[0.5, 0.5]);
    }

    #[test]
    fn cosine_cases() {
        let v = [0.3, -1.2, 2.0];
        let neg: Vec<f64> = v.iter().map(|x| -x).collect();
        assert!((cosine(&v, &v).unwrap() - 1.0).abs() < 1e-15);
        assert!((cosine(&v, &neg).unwrap() + 1.0).abs() < 1e-15);
        assert!((cosine(&[1.0, 0.0], &[1.0, 1.0]).unwrap() - 0.707_106_781_186_547_5).abs() < 1e-12);
        assert!(matches!(
            cosine(&[0.0, 0.0], &[1.0, 1.0]),
            Err(Error::DegenerateVector(_))
        ));
        assert!(matches!(cosine(&[1.0], &[1.0, 1.0]), Err(Error::Shape { .. })));
    }

    #[test]
    fn kl_cases() {
        let p = [0.2, 0.3, 0.5];
        assert_eq!(kl_divergence(&p, &p).unwrap(), 0.0);
        let v = kl_divergence(&[1.0, 0.0], &[0.5, 0.5]).unwrap();
        assert!((v - std::f64::consts::LN_2).abs() < 1e-12);
        assert!(matches!(
            kl_divergence(&[0.5, 0.6], &[0.5, 0.5]),
            Err(Error::InvalidDistribution { .. })
        ));
    }

    #[test]
    fn kl_is_nonnegative_on_random_pairs() {
        let mut rng = seeded_rng(11);
        for _ in 0..1000 {
            let n = 2 + rng.index(6);
            let p = softmax(&rng.normal_vec(n, 2.0)).unwrap();
            let q = softmax(&rng.normal_vec(n, 2.0)).unwrap();
            assert!(kl_divergence(&p, &q).unwrap() >= 0.0);
        }
    }

    #[test]
    fn bce_cases() {
        for tau in [0.5, 1.0, 5.0] {
            let v = binary_cross_entropy(0.0, true, tau).unwrap();
            assert!((v - std::f64::consts::LN_2).abs() < 1e-15);
        }
        // -ln sigmoid(5) = ln(1 + e^-5)
        let v = binary_cross_entropy(1.0, true, 5.0).unwrap();
        assert!((v - 0.006_715_348_489_118_068).abs() < 1e-12);
        assert!(binary_cross_entropy(1.0, true, 0.0).is_err());
        assert!(binary_cross_entropy(f64::INFINITY, true, 1.0).is_err());
    }

    #[test]
    fn bce_saturates_at_clamp() {
        let v = binary_cross_entropy(-1e6, true, 5.0).unwrap();
        assert!((v - (-PROB_FLOOR.ln())).abs() < 1e-9);
    }

    #[test]
    fn vecmat_matches_brute_force() {
        let mut rng = seeded_rng(3);
        let w = Matrix::from_fn(5, 3, |_, _| rng.normal());
        let x = rng.normal_vec(5, 1.0);
        let out = w.vecmat(&x).unwrap();
        for j in 0..3 {
            let mut expected = 0.0;
            for i in 0..5 {
                expected += x[i] * w.get(i, j);
            }
            assert!((out[j] - expected).abs() < 1e-12);
        }
        assert!(w.vecmat(&[1.0]).is_err());
    }

    #[test]
    fn vector_rejects_non_finite() {
        assert!(Vector::new(vec![1.0, f64::INFINITY]).is_err());
        assert!(Vector::new(vec![]).is_err());
        assert!(serde_json::from_str::<Vector>("[]").is_err());
    }

    proptest! {
        #[test]
        fn softmax_sums_to_one_and_is_shift_invariant(
            z in prop::collection::vec(-30.0f64..30.0, 1..12),
            c in -50.0f64..50.0,
        ) {
            let a = softmax(&z).unwrap();
            let shifted: Vec<f64> = z.iter().map(|v| v + c).collect();
            let b = softmax(&shifted).unwrap();
            prop_assert!((a.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(a.iter().all(|v| *v > 0.0));
            for (x, y) in a.iter().zip(b.iter()) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }

        #[test]
        fn softmax_perturbation_is_bounded(
            z in prop::collection::vec(-10.0f64..10.0, 2..10),
            seed in any::<u64>(),
            lambda in 0.0f64..=1.0,
        ) {
            let mut rng = seeded_rng(seed);
            let b = rng.normal_vec(z.len(), 3.0);
            let moved: Vec<f64> = z.iter().zip(&b).map(|(zi, bi)| zi + lambda * bi).collect();
            let p = softmax(&z).unwrap();
            let q = softmax(&moved).unwrap();
            let l1: f64 = p.iter().zip(q.iter()).map(|(x, y)| (x - y).abs()).sum();
            let sup = b.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            prop_assert!(l1 <= 2.0 * lambda * sup + 1e-12);
        }

        #[test]
        fn bce_is_symmetric_under_label_flip(score in -3.0f64..3.0, tau in 0.1f64..10.0) {
            let a = binary_cross_entropy(score, true, tau).unwrap();
            let b = binary_cross_entropy(-score, false, tau).unwrap();
            prop_assert!((a - b).abs() < 1e-12);
        }
    }
}
