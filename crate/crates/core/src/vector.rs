//! Dense vector helpers. Storage is `f32`; every reduction accumulates in `f64`.

use crate::error::{CfError, Result};

/// Norms below this are treated as the zero vector.
pub const ZERO_NORM: f64 = 1e-12;

/// Tolerance on `|‖v‖ − 1|` for a vector to count as unit-norm.
pub const UNIT_TOLERANCE: f64 = 1e-5;

#[inline]
pub fn dot(a: &[f32], b: &[f32]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(&x, &y)| f64::from(x) * f64::from(y))
        .sum()
}

#[inline]
pub fn norm(v: &[f32]) -> f64 {
    dot(v, v).sqrt()
}

pub fn norm_f64(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn is_unit(v: &[f32]) -> bool {
    (norm(v) - 1.0).abs() <= UNIT_TOLERANCE
}

pub fn check_finite(what: &'static str, v: &[f32]) -> Result<()> {
    match v.iter().position(|x| !x.is_finite()) {
        Some(index) => Err(CfError::NonFinite { what, index }),
        None => Ok(()),
    }
}

pub fn check_dim(expected: usize, found: usize) -> Result<()> {
    if expected == found {
        Ok(())
    } else {
        Err(CfError::DimensionMismatch { expected, found })
    }
}

/// Scales `v` to unit length.
pub fn l2_normalize(v: &[f32]) -> Result<Vec<f32>> {
    let n = norm(v);
    if !(n >= ZERO_NORM) {
        return Err(CfError::ZeroVector { norm: n });
    }
    Ok(v.iter().map(|&x| (f64::from(x) / n) as f32).collect())
}

/// Normalizes an `f64` accumulator into `f32` storage.
pub fn l2_normalize_f64(v: &[f64]) -> Result<Vec<f32>> {
    let n = norm_f64(v);
    if !(n >= ZERO_NORM) {
        return Err(CfError::ZeroVector { norm: n });
    }
    Ok(v.iter().map(|&x| (x / n) as f32).collect())
}

/// `scale · ⟨a, b⟩` for unit vectors; a logit in `[-scale, scale]`.
pub fn clip_score(a: &[f32], b: &[f32], scale: f64) -> Result<f64> {
    check_dim(a.len(), b.len())?;
    Ok(scale * dot(a, b))
}

pub fn cosine(a: &[f32], b: &[f32]) -> Result<f64> {
    check_dim(a.len(), b.len())?;
    let denom = norm(a) * norm(b);
    if !(denom >= ZERO_NORM) {
        return Err(CfError::ZeroVector { norm: denom });
    }
    Ok(dot(a, b) / denom)
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// A finite, dense embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingVector {
    values: Vec<f32>,
}

impl EmbeddingVector {
    pub fn new(values: Vec<f32>) -> Result<Self> {
        check_finite("embedding", &values)?;
        Ok(Self { values })
    }

    /// Like [`EmbeddingVector::new`] but also requires unit norm.
    pub fn unit(values: Vec<f32>) -> Result<Self> {
        let v = Self::new(values)?;
        if !v.is_unit() {
            return Err(CfError::NotUnit {
                what: "embedding",
                row: 0,
                norm: v.norm(),
            });
        }
        Ok(v)
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.values
    }

    pub fn into_inner(self) -> Vec<f32> {
        self.values
    }

    pub fn norm(&self) -> f64 {
        norm(&self.values)
    }

    pub fn is_unit(&self) -> bool {
        is_unit(&self.values)
    }

    pub fn l2_normalize(&self) -> Result<EmbeddingVector> {
        Ok(Self {
            values: l2_normalize(&self.values)?,
        })
    }
}

impl AsRef<[f32]> for EmbeddingVector {
    fn as_ref(&self) -> &[f32] {
        &self.values
    }
}

/// Row-major `f32` matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        check_dim(rows * cols, data.len())?;
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_rows<R: AsRef<[f32]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            check_dim(cols, r.as_ref().len())?;
            data.extend_from_slice(r.as_ref());
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f32] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn iter_rows(&self) -> impl ExactSizeIterator<Item = &[f32]> + '_ {
        (0..self.rows).map(move |i| self.row(i))
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    /// Index of the first row whose norm is off unit by more than `tol`.
    pub fn first_non_unit_row(&self, tol: f64) -> Option<(usize, f64)> {
        self.iter_rows()
            .map(norm)
            .enumerate()
            .find(|(_, n)| (n - 1.0).abs() > tol)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalize_three_four() {
        let u = l2_normalize(&[3.0, 4.0]).unwrap();
        assert!((u[0] - 0.6).abs() < 1e-7);
        assert!((u[1] - 0.8).abs() < 1e-7);
    }

    #[test]
    fn normalize_unit_is_identity() {
        let u = [0.6f32, 0.8];
        let v = l2_normalize(&u).unwrap();
        for (a, b) in u.iter().zip(&v) {
            assert!((a - b).abs() < 1e-7);
        }
    }

    #[test]
    fn normalize_zero_fails() {
        assert!(matches!(
            l2_normalize(&[0.0, 0.0]),
            Err(CfError::ZeroVector { .. })
        ));
    }

    #[test]
    fn clip_score_examples() {
        let a = [1.0f32, 0.0];
        assert_eq!(clip_score(&a, &a, 1.0).unwrap(), 1.0);
        assert_eq!(clip_score(&a, &[0.0, 1.0], 37.0).unwrap(), 0.0);
        // ⟨a,b⟩ = 0.25 exactly in binary32
        let b = [0.25f32, (1.0f64 - 0.0625).sqrt() as f32];
        assert!((clip_score(&a, &b, 100.0).unwrap() - 25.0).abs() < 1e-12);
        assert!(matches!(
            clip_score(&a, &[1.0, 0.0, 0.0], 1.0),
            Err(CfError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn sigmoid_is_stable() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert!(sigmoid(1000.0) == 1.0);
        assert!(sigmoid(-1000.0) >= 0.0);
        assert!((sigmoid(1.10) - 0.750_260_1).abs() < 1e-6);
    }

    #[test]
    fn embedding_rejects_nan() {
        assert!(EmbeddingVector::new(vec![1.0, f32::NAN]).is_err());
        assert!(EmbeddingVector::unit(vec![1.0, 1.0]).is_err());
        assert!(EmbeddingVector::unit(vec![0.0, 1.0]).is_ok());
    }
}

#[cfg(test)]
mod props {
    use super::*;
    use proptest::prelude::*;

    fn vec_strategy() -> impl Strategy<Value = Vec<f32>> {
        prop::collection::vec(-100.0f32..100.0, 1..64)
            .prop_filter("non-zero", |v| norm(v) > 1e-3)
    }

    proptest! {
        #[test]
        fn normalize_is_idempotent(v in vec_strategy()) {
            let once = l2_normalize(&v).unwrap();
            let twice = l2_normalize(&once).unwrap();
            for (a, b) in once.iter().zip(&twice) {
                prop_assert!((a - b).abs() <= 1e-7);
            }
            prop_assert!((norm(&once) - 1.0).abs() <= UNIT_TOLERANCE);
        }

        #[test]
        fn clip_score_symmetric_and_linear(
            a in vec_strategy(), seed in vec_strategy(), s in 0.01f64..500.0
        ) {
            let b: Vec<f32> = (0..a.len()).map(|i| seed[i % seed.len()] + i as f32).collect();
            prop_assume!(norm(&b) > 1e-3);
            let a = l2_normalize(&a).unwrap();
            let b = l2_normalize(&b).unwrap();
            let ab = clip_score(&a, &b, s).unwrap();
            prop_assert_eq!(ab, clip_score(&b, &a, s).unwrap());
            let unit = clip_score(&a, &b, 1.0).unwrap();
            prop_assert!((ab - s * unit).abs() <= 1e-12 * s.max(1.0));
            prop_assert!(ab.abs() <= s * (1.0 + 1e-6));
        }
    }
}
