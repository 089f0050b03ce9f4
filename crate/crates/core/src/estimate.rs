//! Token class probabilities, token weights, and first-order counterfactual
//! embeddings (background-only and object-only).

use std::cmp::Ordering;

use crate::error::{CfError, Result};
use crate::types::{ClassDictionary, TokenEffectRecord};
use crate::vector::{check_dim, dot, l2_normalize_f64, norm, sigmoid, Matrix, ZERO_NORM};

/// Maps a token probability to a weight in `[0, 1]`.
pub trait TokenWeighting: Send + Sync {
    fn name(&self) -> &str;
    fn weight(&self, prob: f64, tau: f64) -> f64;
}

/// Indicator weights: 1 when the probability exceeds `tau`.
#[derive(Debug, Clone, Copy, Default)]
pub struct HardThreshold;

impl TokenWeighting for HardThreshold {
    fn name(&self) -> &str {
        "hard"
    }

    fn weight(&self, prob: f64, tau: f64) -> f64 {
        if prob > tau {
            1.0
        } else {
            0.0
        }
    }
}

/// The probability itself is the weight.
#[derive(Debug, Clone, Copy, Default)]
pub struct SoftProbability;

impl TokenWeighting for SoftProbability {
    fn name(&self) -> &str {
        "soft"
    }

    fn weight(&self, prob: f64, _tau: f64) -> f64 {
        prob
    }
}

/// `N × C` sigmoid probabilities of every token against every class.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenProbs {
    n_tokens: usize,
    n_classes: usize,
    probs: Vec<f64>,
    /// Tokens whose effect vector had zero norm; they get weight 0 everywhere.
    pub zero_tokens: Vec<usize>,
}

impl TokenProbs {
    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        let n_classes = rows.first().map_or(0, Vec::len);
        let n_tokens = rows.len();
        let mut probs = Vec::with_capacity(n_tokens * n_classes);
        for r in &rows {
            check_dim(n_classes, r.len())?;
            probs.extend_from_slice(r);
        }
        Ok(Self {
            n_tokens,
            n_classes,
            probs,
            zero_tokens: Vec::new(),
        })
    }

    pub fn n_tokens(&self) -> usize {
        self.n_tokens
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn get(&self, token: usize, class: usize) -> f64 {
        self.probs[token * self.n_classes + class]
    }

    pub fn row(&self, token: usize) -> &[f64] {
        &self.probs[token * self.n_classes..(token + 1) * self.n_classes]
    }

    /// `1 − max_c p(j, c)`.
    pub fn background_prob(&self, token: usize) -> f64 {
        1.0 - self.row(token).iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    fn is_zero(&self, token: usize) -> bool {
        self.zero_tokens.binary_search(&token).is_ok()
    }
}

/// `σ(scale · ⟨normalize(v_j), t_c⟩)` for all tokens and classes.
pub fn token_class_probs(
    record: &TokenEffectRecord,
    classes: &ClassDictionary,
    scale: f64,
) -> Result<TokenProbs> {
    check_dim(classes.dim(), record.dim())?;
    let (n, c) = (record.n_tokens(), classes.len());
    let mut probs = Vec::with_capacity(n * c);
    let mut zero_tokens = Vec::new();
    for (j, v) in record.token_effects.iter_rows().enumerate() {
        let len = norm(v);
        if !(len >= ZERO_NORM) {
            zero_tokens.push(j);
            probs.extend(std::iter::repeat_n(0.0, c));
            continue;
        }
        for k in 0..c {
            let cos = dot(v, classes.embedding(k)) / len;
            probs.push(sigmoid(scale * cos));
        }
    }
    Ok(TokenProbs {
        n_tokens: n,
        n_classes: c,
        probs,
        zero_tokens,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WeightKind {
    Background,
    Object(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct TokenWeightVector {
    pub weights: Vec<f64>,
    pub kind: WeightKind,
    pub mode: String,
}

impl TokenWeightVector {
    pub fn uniform(n: usize, kind: WeightKind) -> Self {
        Self {
            weights: vec![1.0; n],
            kind,
            mode: "uniform".into(),
        }
    }

    pub fn total(&self) -> f64 {
        self.weights.iter().sum()
    }
}

pub fn background_weights(probs: &TokenProbs, mode: &dyn TokenWeighting, tau: f64) -> TokenWeightVector {
    let weights = (0..probs.n_tokens())
        .map(|j| {
            if probs.is_zero(j) {
                0.0
            } else {
                mode.weight(probs.background_prob(j), tau)
            }
        })
        .collect();
    TokenWeightVector {
        weights,
        kind: WeightKind::Background,
        mode: mode.name().to_string(),
    }
}

pub fn object_weights(
    probs: &TokenProbs,
    class: usize,
    mode: &dyn TokenWeighting,
    tau: f64,
) -> Result<TokenWeightVector> {
    if class >= probs.n_classes() {
        return Err(CfError::InvalidIndex {
            index: class,
            size: probs.n_classes(),
        });
    }
    let weights = (0..probs.n_tokens())
        .map(|j| {
            if probs.is_zero(j) {
                0.0
            } else {
                mode.weight(probs.get(j, class), tau)
            }
        })
        .collect();
    Ok(TokenWeightVector {
        weights,
        kind: WeightKind::Object(class),
        mode: mode.name().to_string(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct CounterfactualEstimate {
    pub embedding: Vec<f32>,
    pub kind: WeightKind,
    pub support_size: usize,
}

/// `Σ_j w_j v_j / Σ_j w_j` in f64.
///
/// Terms are summed in a canonical order (by weight, then by the token
/// vector's values) so that permuting tokens with their weights gives a
/// bit-identical result.
pub fn weighted_mean(tokens: &Matrix, weights: &[f64]) -> Result<Vec<f64>> {
    check_dim(tokens.rows(), weights.len())?;
    if let Some(index) = weights.iter().position(|w| !w.is_finite() || *w < 0.0) {
        return Err(CfError::NonFinite { what: "token weights", index });
    }
    let mut order: Vec<usize> = (0..weights.len()).filter(|&j| weights[j] > 0.0).collect();
    let total: f64 = {
        let mut ws: Vec<f64> = order.iter().map(|&j| weights[j]).collect();
        ws.sort_by(f64::total_cmp);
        ws.iter().sum()
    };
    if !(total > ZERO_NORM) {
        return Err(CfError::EmptySupport { total });
    }
    order.sort_by(|&a, &b| {
        weights[a].total_cmp(&weights[b]).then_with(|| {
            tokens
                .row(a)
                .iter()
                .zip(tokens.row(b))
                .map(|(x, y)| x.total_cmp(y))
                .find(|o| *o != Ordering::Equal)
                .unwrap_or(Ordering::Equal)
        })
    });
    let mut acc = vec![0.0f64; tokens.cols()];
    for j in order {
        let w = weights[j];
        for (a, &v) in acc.iter_mut().zip(tokens.row(j)) {
            *a += w * f64::from(v);
        }
    }
    for a in &mut acc {
        *a /= total;
    }
    Ok(acc)
}

/// Normalized weighted mean of token effects.
pub fn estimate_counterfactual(
    record: &TokenEffectRecord,
    weights: &TokenWeightVector,
) -> Result<CounterfactualEstimate> {
    let mean = weighted_mean(&record.token_effects, &weights.weights)?;
    Ok(CounterfactualEstimate {
        embedding: l2_normalize_f64(&mean)?,
        kind: weights.kind,
        support_size: weights.weights.iter().filter(|&&w| w > 0.0).count(),
    })
}

/// Background estimate; falls back to uniform weights on empty support.
pub fn estimate_background(
    record: &TokenEffectRecord,
    probs: &TokenProbs,
    mode: &dyn TokenWeighting,
    tau: f64,
) -> Result<CounterfactualEstimate> {
    let w = background_weights(probs, mode, tau);
    match estimate_counterfactual(record, &w) {
        Err(CfError::EmptySupport { .. }) => {
            log::debug!("{}: empty background support, using uniform weights", record.image_id);
            estimate_counterfactual(record, &TokenWeightVector::uniform(record.n_tokens(), WeightKind::Background))
        }
        other => other,
    }
}

/// Object estimate for `class`; retries with soft weights on empty support.
pub fn estimate_object(
    record: &TokenEffectRecord,
    probs: &TokenProbs,
    class: usize,
    mode: &dyn TokenWeighting,
    tau: f64,
) -> Result<CounterfactualEstimate> {
    let w = object_weights(probs, class, mode, tau)?;
    match estimate_counterfactual(record, &w) {
        Err(CfError::EmptySupport { .. }) => {
            log::debug!("{}: empty support for class {class}, retrying soft", record.image_id);
            estimate_counterfactual(record, &object_weights(probs, class, &SoftProbability, tau)?)
        }
        other => other,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vector::l2_normalize;

    fn classes() -> ClassDictionary {
        ClassDictionary::new(
            vec!["a".into(), "b".into()],
            Matrix::from_rows(&[vec![1.0f32, 0.0, 0.0], vec![0.0, 1.0, 0.0]]).unwrap(),
        )
        .unwrap()
    }

    fn record(rows: &[Vec<f32>]) -> TokenEffectRecord {
        let d = rows[0].len();
        TokenEffectRecord::new("t", Matrix::from_rows(rows).unwrap(), vec![0.0; d], vec![1.0; d]).unwrap()
    }

    #[test]
    fn aligned_token_saturates() {
        let p = token_class_probs(&record(&[vec![2.0, 0.0, 0.0]]), &classes(), 100.0).unwrap();
        assert!(p.get(0, 0) >= 1.0 - 1e-9);
    }

    #[test]
    fn orthogonal_token_is_one_half() {
        let p = token_class_probs(&record(&[vec![0.0, 0.0, 3.0]]), &classes(), 100.0).unwrap();
        assert_eq!(p.row(0), &[0.5, 0.5]);
    }

    #[test]
    fn small_cosine_arithmetic() {
        // cos = 0.0110 against class a
        let c = 0.0110f64;
        let v = vec![c as f32, 0.0, (1.0 - c * c).sqrt() as f32];
        let p = token_class_probs(&record(&[v]), &classes(), 100.0).unwrap();
        assert!((p.get(0, 0) - 0.7503).abs() < 1e-4);
    }

    #[test]
    fn zero_token_is_flagged_and_unweighted() {
        let rec = record(&[vec![0.0, 0.0, 0.0], vec![0.0, 0.0, 1.0]]);
        let p = token_class_probs(&rec, &classes(), 100.0).unwrap();
        assert_eq!(p.zero_tokens, vec![0]);
        let w = background_weights(&p, &SoftProbability, 0.3);
        assert_eq!(w.weights, vec![0.0, 0.5]);
    }

    #[test]
    fn background_weight_examples() {
        let p = TokenProbs::from_rows(vec![vec![0.0, 0.0], vec![0.9, 0.2], vec![0.75, 0.1]]).unwrap();
        assert_eq!(background_weights(&p, &HardThreshold, 0.3).weights[0], 1.0);
        assert_eq!(background_weights(&p, &SoftProbability, 0.3).weights[0], 1.0);
        assert!((background_weights(&p, &SoftProbability, 0.3).weights[1] - 0.1).abs() < 1e-12);
        // p_bg = 0.25 is not above τ = 0.3
        assert_eq!(background_weights(&p, &HardThreshold, 0.3).weights[2], 0.0);
    }

    #[test]
    fn object_weight_examples() {
        let p = TokenProbs::from_rows(vec![vec![1.0, 0.2], vec![1.0, 0.6]]).unwrap();
        assert_eq!(object_weights(&p, 0, &HardThreshold, 0.3).unwrap().weights, vec![1.0, 1.0]);
        assert_eq!(object_weights(&p, 1, &HardThreshold, 0.3).unwrap().weights, vec![0.0, 1.0]);
        assert_eq!(object_weights(&p, 1, &SoftProbability, 0.3).unwrap().weights, vec![0.2, 0.6]);
        assert!(matches!(
            object_weights(&p, 2, &HardThreshold, 0.3),
            Err(CfError::InvalidIndex { .. })
        ));
    }

    #[test]
    fn uniform_weights_give_normalized_mean() {
        let rows = vec![vec![1.0f32, 2.0, 0.0], vec![3.0, 0.0, 1.0], vec![-1.0, 1.0, 1.0]];
        let rec = record(&rows);
        let est = estimate_counterfactual(&rec, &TokenWeightVector::uniform(3, WeightKind::Background)).unwrap();
        let want = l2_normalize(&[1.0, 1.0, 2.0 / 3.0]).unwrap();
        for (a, b) in est.embedding.iter().zip(&want) {
            assert!((a - b).abs() < 1e-7);
        }
        assert_eq!(est.support_size, 3);
    }

    #[test]
    fn one_hot_weight_selects_token() {
        let rows = vec![vec![1.0f32, 2.0, 0.0], vec![3.0, 0.0, 4.0]];
        let rec = record(&rows);
        let w = TokenWeightVector {
            weights: vec![0.0, 1.0],
            kind: WeightKind::Object(0),
            mode: "hard".into(),
        };
        let est = estimate_counterfactual(&rec, &w).unwrap();
        assert_eq!(est.embedding, vec![0.6, 0.0, 0.8]);
        assert_eq!(est.support_size, 1);
    }

    #[test]
    fn empty_support_and_fallbacks() {
        let rec = record(&[vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0]]);
        let w = TokenWeightVector {
            weights: vec![0.0, 0.0],
            kind: WeightKind::Background,
            mode: "hard".into(),
        };
        assert!(matches!(estimate_counterfactual(&rec, &w), Err(CfError::EmptySupport { .. })));

        // both tokens are confidently class tokens: no background under hard weights
        let p = token_class_probs(&rec, &classes(), 100.0).unwrap();
        let bg = estimate_background(&rec, &p, &HardThreshold, 0.3).unwrap();
        assert_eq!(bg.support_size, 2);

        // hard object weights for a class nobody exceeds τ on: soft retry
        let p = TokenProbs::from_rows(vec![vec![0.1], vec![0.2]]).unwrap();
        let obj = estimate_object(&rec, &p, 0, &HardThreshold, 0.3).unwrap();
        assert_eq!(obj.support_size, 2);
    }
}

#[cfg(test)]
mod props {
    use super::*;
    use proptest::prelude::*;

    fn tokens_and_weights() -> impl Strategy<Value = (Vec<Vec<f32>>, Vec<f64>)> {
        (1usize..12, 1usize..10).prop_flat_map(|(n, d)| {
            (
                prop::collection::vec(prop::collection::vec(-2.0f32..2.0, d), n),
                prop::collection::vec(0.0f64..1.0, n),
            )
        })
    }

    proptest! {
        #[test]
        fn weighted_mean_is_scale_invariant((rows, w) in tokens_and_weights(), k in 0.01f64..100.0) {
            prop_assume!(w.iter().sum::<f64>() > 1e-6);
            let m = Matrix::from_rows(&rows).unwrap();
            let a = weighted_mean(&m, &w);
            let scaled: Vec<f64> = w.iter().map(|x| x * k).collect();
            let b = weighted_mean(&m, &scaled);
            if let (Ok(a), Ok(b)) = (a, b) {
                if let (Ok(ua), Ok(ub)) = (l2_normalize_f64(&a), l2_normalize_f64(&b)) {
                    for (x, y) in ua.iter().zip(&ub) {
                        prop_assert!((x - y).abs() <= 1e-7);
                    }
                }
            }
        }

        #[test]
        fn weighted_mean_is_permutation_invariant(
            (rows, w) in tokens_and_weights(), shift in 0usize..12
        ) {
            prop_assume!(w.iter().sum::<f64>() > 1e-6);
            let n = rows.len();
            let perm: Vec<usize> = (0..n).map(|i| (i * 7 + shift) % n).collect();
            prop_assume!({ let mut p = perm.clone(); p.sort(); p.dedup(); p.len() == n });
            let m = Matrix::from_rows(&rows).unwrap();
            let pm = Matrix::from_rows(&perm.iter().map(|&i| rows[i].clone()).collect::<Vec<_>>()).unwrap();
            let pw: Vec<f64> = perm.iter().map(|&i| w[i]).collect();
            let a = weighted_mean(&m, &w).unwrap();
            let b = weighted_mean(&pm, &pw).unwrap();
            prop_assert_eq!(a, b);
        }
    }
}
