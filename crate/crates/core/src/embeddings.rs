//! The shared vision-language embedding space.
//!
//! Scoring functions accept [`UnitEmbedding`] only, so every similarity is a
//! cosine similarity by construction.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dimension of the joint embedding space.
pub const EMBED_DIM: usize = 512;

/// Tolerance on the Euclidean norm of a unit embedding.
pub const UNIT_NORM_TOLERANCE: f64 = 1e-6;

/// Raw encoder output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Embedding(Vec<f64>);

impl Embedding {
    pub fn new(components: Vec<f64>) -> Result<Self> {
        if let Some(i) = components.iter().position(|c| !c.is_finite()) {
            return Err(Error::DegenerateEmbedding(format!(
                "component {i} is not finite"
            )));
        }
        Ok(Self(components))
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn norm(&self) -> f64 {
        norm(&self.0)
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

/// An embedding with Euclidean norm 1 (within [`UNIT_NORM_TOLERANCE`]).
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(transparent)]
pub struct UnitEmbedding(Vec<f64>);

impl UnitEmbedding {
    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn dot(&self, other: &UnitEmbedding) -> f64 {
        dot(&self.0, &other.0)
    }

    pub fn into_embedding(self) -> Embedding {
        Embedding(self.0)
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn norm(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

/// Scale `v` to unit Euclidean norm.
pub fn l2_normalize(v: &Embedding) -> Result<UnitEmbedding> {
    let n = v.norm();
    if n == 0.0 || !n.is_finite() {
        return Err(Error::DegenerateEmbedding(format!(
            "cannot normalize a vector with norm {n}"
        )));
    }
    Ok(UnitEmbedding(v.0.iter().map(|c| c / n).collect()))
}

/// Learned softmax temperature; strictly positive.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct Temperature(f64);

impl Temperature {
    pub const INIT: f64 = 0.07;

    pub fn new(value: f64) -> Result<Self> {
        if !(value.is_finite() && value > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "temperature must be positive and finite, got {value}"
            )));
        }
        Ok(Self(value))
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

impl Default for Temperature {
    fn default() -> Self {
        Self(Self::INIT)
    }
}

impl TryFrom<f64> for Temperature {
    type Error = Error;

    fn try_from(v: f64) -> Result<Self> {
        Self::new(v)
    }
}

impl From<Temperature> for f64 {
    fn from(t: Temperature) -> f64 {
        t.0
    }
}

/// M x K region-to-class similarities, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMatrix {
    rows: usize,
    cols: usize,
    values: Vec<f64>,
}

impl SimilarityMatrix {
    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        let cols = rows.first().map(Vec::len).ok_or(Error::EmptyInput("rows"))?;
        if cols == 0 {
            return Err(Error::EmptyInput("columns"));
        }
        let n = rows.len();
        let mut values = Vec::with_capacity(n * cols);
        for r in rows {
            if r.len() != cols {
                return Err(Error::DimensionMismatch {
                    expected: cols,
                    actual: r.len(),
                });
            }
            values.extend(r);
        }
        Ok(Self {
            rows: n,
            cols,
            values,
        })
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
}

fn check_dims(expected: usize, vectors: &[UnitEmbedding]) -> Result<()> {
    match vectors.iter().find(|v| v.dim() != expected) {
        Some(v) => Err(Error::DimensionMismatch {
            expected,
            actual: v.dim(),
        }),
        None => Ok(()),
    }
}

/// `S[i][k] = <visual[i], textual[k]>`.
pub fn similarity_matrix(
    visual: &[UnitEmbedding],
    textual: &[UnitEmbedding],
) -> Result<SimilarityMatrix> {
    let first = visual.first().ok_or(Error::EmptyInput("visual embeddings"))?;
    if textual.is_empty() {
        return Err(Error::EmptyInput("text embeddings"));
    }
    check_dims(first.dim(), visual)?;
    check_dims(first.dim(), textual)?;
    let values = visual
        .iter()
        .flat_map(|v| textual.iter().map(move |t| v.dot(t)))
        .collect();
    Ok(SimilarityMatrix {
        rows: visual.len(),
        cols: textual.len(),
        values,
    })
}

/// Index and value of the maximum; the lowest index wins ties.
pub(crate) fn argmax(values: &[f64]) -> (usize, f64) {
    let mut best = (0, values[0]);
    for (k, &v) in values.iter().enumerate().skip(1) {
        if v > best.1 {
            best = (k, v);
        }
    }
    best
}

/// Per-row `(argmax class, max similarity)`.
pub fn classify_rows(s: &SimilarityMatrix) -> Vec<(usize, f64)> {
    (0..s.rows).map(|i| argmax(s.row(i))).collect()
}

/// Numerically stable softmax of `logits`.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Temperature-scaled softmax over `<v_global, t_k> / tau`.
pub fn softmax_classify(
    v_global: &UnitEmbedding,
    textual: &[UnitEmbedding],
    tau: Temperature,
) -> Result<Vec<f64>> {
    if textual.is_empty() {
        return Err(Error::EmptyInput("text embeddings"));
    }
    check_dims(v_global.dim(), textual)?;
    let logits: Vec<f64> = textual
        .iter()
        .map(|t| v_global.dot(t) / tau.value())
        .collect();
    Ok(softmax(&logits))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn unit(v: &[f64]) -> UnitEmbedding {
        l2_normalize(&Embedding::new(v.to_vec()).unwrap()).unwrap()
    }

    fn basis(dim: usize, i: usize) -> UnitEmbedding {
        let mut v = vec![0.0; dim];
        v[i] = 1.0;
        unit(&v)
    }

    #[test]
    fn normalize_examples() {
        let mut v = vec![0.0; EMBED_DIM];
        v[0] = 3.0;
        v[1] = 4.0;
        let u = unit(&v);
        assert!((u.as_slice()[0] - 0.6).abs() < 1e-15);
        assert!((u.as_slice()[1] - 0.8).abs() < 1e-15);

        let again = l2_normalize(&u.clone().into_embedding()).unwrap();
        for (a, b) in again.as_slice().iter().zip(u.as_slice()) {
            assert!((a - b).abs() < 1e-6);
        }

        let zero = Embedding::new(vec![0.0; EMBED_DIM]).unwrap();
        assert!(matches!(
            l2_normalize(&zero),
            Err(Error::DegenerateEmbedding(_))
        ));
    }

    #[test]
    fn embedding_rejects_nan() {
        assert!(Embedding::new(vec![1.0, f64::NAN]).is_err());
    }

    #[test]
    fn temperature_must_be_positive() {
        assert!(Temperature::new(0.0).is_err());
        assert!(Temperature::new(-1.0).is_err());
        assert_eq!(Temperature::default().value(), 0.07);
    }

    #[test]
    fn similarity_examples() {
        let a = basis(4, 0);
        let b = basis(4, 1);
        let s = similarity_matrix(std::slice::from_ref(&a), &[a.clone(), b]).unwrap();
        assert_eq!(s.get(0, 0), 1.0);
        assert_eq!(s.get(0, 1), 0.0);
    }

    #[test]
    fn similarity_errors() {
        let a = basis(4, 0);
        let c = basis(3, 0);
        assert!(matches!(
            similarity_matrix(std::slice::from_ref(&a), &[c]),
            Err(Error::DimensionMismatch { .. })
        ));
        assert!(similarity_matrix(&[], std::slice::from_ref(&a)).is_err());
        assert!(similarity_matrix(&[a], &[]).is_err());
    }

    #[test]
    fn classify_rows_examples() {
        let s = SimilarityMatrix::from_rows(vec![vec![0.2, 0.9, 0.1], vec![0.5, 0.5, 0.5]]).unwrap();
        assert_eq!(classify_rows(&s), vec![(1, 0.9), (0, 0.5)]);
    }

    #[test]
    fn softmax_examples() {
        let t = basis(4, 1);
        let v = unit(&[1.0, 1.0, 0.0, 0.0]);
        let p = softmax_classify(&v, &[t.clone(), t.clone()], Temperature::default()).unwrap();
        assert_eq!(p, vec![0.5, 0.5]);
        assert_eq!(
            softmax_classify(&v, &[t], Temperature::default()).unwrap(),
            vec![1.0]
        );

        // similarities (1, 0) at tau = 0.07; reference computed at 50 digits
        let v = basis(4, 0);
        let p = softmax_classify(&v, &[basis(4, 0), basis(4, 1)], Temperature::default()).unwrap();
        assert!((p[0] - 0.999_999_375_125_439_5).abs() < 1e-15);
    }

    #[test]
    fn softmax_survives_huge_logits() {
        let p = softmax(&[2000.0, -2000.0, 1999.0]);
        assert!(p.iter().all(|x| x.is_finite()));
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn row_shift_moves_score_not_class(
            row in prop::collection::vec(-1.0..1.0f64, 1..8),
            shift in -5.0..5.0f64,
        ) {
            let base = SimilarityMatrix::from_rows(vec![row.clone()]).unwrap();
            let shifted = SimilarityMatrix::from_rows(vec![row.iter().map(|v| v + shift).collect()]).unwrap();
            let (k0, s0) = classify_rows(&base)[0];
            let (k1, s1) = classify_rows(&shifted)[0];
            // fp addition is monotone but can collapse near-ties
            if shifted.row(0).iter().filter(|&&v| v == s1).count() == 1 {
                prop_assert_eq!(k0, k1);
            }
            prop_assert!((s1 - (s0 + shift)).abs() < 1e-12);
        }
    }
}
