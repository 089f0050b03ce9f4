//! Per-token semantic effects from per-head attention contributions.
//!
//! The image embedding of a ViT splits into the class-token direct term, the
//! MLP direct terms, and the attention-head terms; the last ones further split
//! over tokens. A token's semantic effect is the sum of its head terms over
//! all layers and heads, plus an even share of a batch-constant bias that
//! stands in for the mean-ablated class-token and MLP terms.

use rayon::prelude::*;

use crate::error::{CfError, Result};
use crate::types::TokenEffectRecord;
use crate::vector::{check_dim, check_finite, norm_f64, Matrix};

/// Default relative tolerance for strict reconstruction checks.
pub const DEFAULT_RECONSTRUCTION_TOLERANCE: f64 = 1e-3;

/// Projected per-layer, per-head, per-token contributions of one image.
///
/// `contributions` is laid out `[layer][head][token][dim]`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct RawContributionTensor {
    pub image_id: String,
    pub group_tag: Option<String>,
    n_layers: usize,
    n_heads: usize,
    n_tokens: usize,
    dim: usize,
    contributions: Vec<f32>,
    cls_direct: Vec<f32>,
    mlp_direct: Vec<f32>,
}

impl RawContributionTensor {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        image_id: impl Into<String>,
        n_layers: usize,
        n_heads: usize,
        n_tokens: usize,
        dim: usize,
        contributions: Vec<f32>,
        cls_direct: Vec<f32>,
        mlp_direct: Vec<f32>,
    ) -> Result<Self> {
        if n_layers == 0 || n_heads == 0 || n_tokens == 0 || dim == 0 {
            return Err(CfError::EmptyInput("raw contribution tensor"));
        }
        check_dim(n_layers * n_heads * n_tokens * dim, contributions.len())?;
        check_dim(dim, cls_direct.len())?;
        check_dim(dim, mlp_direct.len())?;
        check_finite("contributions", &contributions)?;
        check_finite("cls_direct", &cls_direct)?;
        check_finite("mlp_direct", &mlp_direct)?;
        Ok(Self {
            image_id: image_id.into(),
            group_tag: None,
            n_layers,
            n_heads,
            n_tokens,
            dim,
            contributions,
            cls_direct,
            mlp_direct,
        })
    }

    pub fn n_layers(&self) -> usize {
        self.n_layers
    }

    pub fn n_heads(&self) -> usize {
        self.n_heads
    }

    pub fn n_tokens(&self) -> usize {
        self.n_tokens
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn contributions(&self) -> &[f32] {
        &self.contributions
    }

    pub fn cls_direct(&self) -> &[f32] {
        &self.cls_direct
    }

    pub fn mlp_direct(&self) -> &[f32] {
        &self.mlp_direct
    }

    /// The `d`-vector for `(layer, head, token)`.
    pub fn contribution(&self, layer: usize, head: usize, token: usize) -> &[f32] {
        let start = ((layer * self.n_heads + head) * self.n_tokens + token) * self.dim;
        &self.contributions[start..start + self.dim]
    }

    /// `cls_direct + mlp_direct`, accumulated in f64.
    pub fn direct_terms(&self) -> Vec<f64> {
        self.cls_direct
            .iter()
            .zip(&self.mlp_direct)
            .map(|(&a, &b)| f64::from(a) + f64::from(b))
            .collect()
    }

    /// Replaces the class-token and MLP direct terms.
    pub fn with_direct_terms(mut self, cls_direct: Vec<f32>, mlp_direct: Vec<f32>) -> Result<Self> {
        check_dim(self.dim, cls_direct.len())?;
        check_dim(self.dim, mlp_direct.len())?;
        self.cls_direct = cls_direct;
        self.mlp_direct = mlp_direct;
        Ok(self)
    }
}

/// Sums head contributions per token and spreads `ablation_bias` evenly.
pub fn aggregate_token_effects(
    raw: &RawContributionTensor,
    ablation_bias: &[f32],
) -> Result<TokenEffectRecord> {
    let (n, d) = (raw.n_tokens, raw.dim);
    check_dim(d, ablation_bias.len())?;
    check_finite("ablation_bias", ablation_bias)?;

    let share: Vec<f64> = ablation_bias.iter().map(|&e| f64::from(e) / n as f64).collect();
    let mut tokens = Matrix::zeros(n, d);
    let mut head_total = vec![0.0f64; d];
    for j in 0..n {
        let mut acc = vec![0.0f64; d];
        for l in 0..raw.n_layers {
            for h in 0..raw.n_heads {
                for (a, &u) in acc.iter_mut().zip(raw.contribution(l, h, j)) {
                    *a += f64::from(u);
                }
            }
        }
        for ((out, (a, s)), t) in tokens
            .row_mut(j)
            .iter_mut()
            .zip(acc.iter().zip(&share))
            .zip(head_total.iter_mut())
        {
            *t += a;
            *out = (a + s) as f32;
        }
    }

    let direct = raw.direct_terms();
    let global: Vec<f32> = direct
        .iter()
        .zip(&head_total)
        .map(|(dt, ht)| (dt + ht) as f32)
        .collect();
    let residual: Vec<f32> = direct
        .iter()
        .zip(ablation_bias)
        .map(|(dt, &e)| (dt - f64::from(e)) as f32)
        .collect();

    let mut record = TokenEffectRecord::new(raw.image_id.clone(), tokens, ablation_bias.to_vec(), global)?
        .with_residual(residual)?;
    record.group_tag = raw.group_tag.clone();
    Ok(record)
}

/// Batch mean of the class-token plus MLP direct terms: the constant that
/// replaces them under mean ablation.
pub fn compute_ablation_bias(batch: &[RawContributionTensor]) -> Result<Vec<f32>> {
    let first = batch.first().ok_or(CfError::EmptyBatch)?;
    let d = first.dim;
    let mut acc = vec![0.0f64; d];
    for raw in batch {
        check_dim(d, raw.dim)?;
        for ((a, &c), &m) in acc.iter_mut().zip(&raw.cls_direct).zip(&raw.mlp_direct) {
            *a += f64::from(c) + f64::from(m);
        }
    }
    let n = batch.len() as f64;
    Ok(acc.into_iter().map(|a| (a / n) as f32).collect())
}

/// Replaces each record's class-token and MLP terms by their batch means.
pub fn mean_ablate(batch: &[RawContributionTensor]) -> Result<Vec<RawContributionTensor>> {
    let first = batch.first().ok_or(CfError::EmptyBatch)?;
    let d = first.dim;
    let mut cls = vec![0.0f64; d];
    let mut mlp = vec![0.0f64; d];
    for raw in batch {
        check_dim(d, raw.dim)?;
        for (a, &x) in cls.iter_mut().zip(&raw.cls_direct) {
            *a += f64::from(x);
        }
        for (a, &x) in mlp.iter_mut().zip(&raw.mlp_direct) {
            *a += f64::from(x);
        }
    }
    let n = batch.len() as f64;
    let cls: Vec<f32> = cls.into_iter().map(|a| (a / n) as f32).collect();
    let mlp: Vec<f32> = mlp.into_iter().map(|a| (a / n) as f32).collect();
    batch
        .iter()
        .map(|raw| raw.clone().with_direct_terms(cls.clone(), mlp.clone()))
        .collect()
}

/// Aggregates a whole batch in parallel with a shared ablation bias.
pub fn aggregate_batch(
    batch: &[RawContributionTensor],
    ablation_bias: &[f32],
) -> Result<Vec<TokenEffectRecord>> {
    batch
        .par_iter()
        .map(|raw| aggregate_token_effects(raw, ablation_bias))
        .collect()
}

/// Relative L2 error `‖Σ_j v_j + residual − global‖ / ‖global‖`.
///
/// Records without a stored residual are compared on the token sum alone.
pub fn reconstruction_error(record: &TokenEffectRecord) -> f64 {
    let d = record.dim();
    let mut sum = vec![0.0f64; d];
    for row in record.token_effects.iter_rows() {
        for (s, &v) in sum.iter_mut().zip(row) {
            *s += f64::from(v);
        }
    }
    if let Some(r) = &record.direct_residual {
        for (s, &v) in sum.iter_mut().zip(r) {
            *s += f64::from(v);
        }
    }
    let diff: Vec<f64> = sum
        .iter()
        .zip(&record.global_embedding)
        .map(|(s, &g)| s - f64::from(g))
        .collect();
    let g: Vec<f64> = record.global_embedding.iter().map(|&x| f64::from(x)).collect();
    let denom = norm_f64(&g);
    let num = norm_f64(&diff);
    if denom > 0.0 {
        num / denom
    } else if num == 0.0 {
        0.0
    } else {
        f64::INFINITY
    }
}

/// Rejects a record whose reconstruction error exceeds `tolerance`.
pub fn check_reconstruction(record: &TokenEffectRecord, tolerance: f64) -> Result<f64> {
    let error = reconstruction_error(record);
    if error <= tolerance {
        Ok(error)
    } else {
        Err(CfError::Reconstruction {
            image_id: record.image_id.clone(),
            error,
            tolerance,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_raw(rng: &mut ChaCha8Rng, l: usize, h: usize, n: usize, d: usize) -> RawContributionTensor {
        let mut gen = |len: usize| (0..len).map(|_| rng.gen_range(-1.0f32..1.0)).collect::<Vec<_>>();
        let contributions = gen(l * h * n * d);
        let cls = gen(d);
        let mlp = gen(d);
        RawContributionTensor::new("r", l, h, n, d, contributions, cls, mlp).unwrap()
    }

    #[test]
    fn basis_contributions_give_basis_tokens() {
        let (n, d) = (3, 3);
        let mut c = vec![0.0f32; n * d];
        for j in 0..n {
            c[j * d + j] = 1.0;
        }
        let raw = RawContributionTensor::new("e", 1, 1, n, d, c, vec![0.0; d], vec![0.0; d]).unwrap();
        let rec = aggregate_token_effects(&raw, &[0.0; 3]).unwrap();
        for j in 0..n {
            let row = rec.token_effects.row(j);
            for k in 0..d {
                assert_eq!(row[k], if j == k { 1.0 } else { 0.0 });
            }
        }
    }

    #[test]
    fn zero_contributions_spread_bias() {
        let (n, d) = (4, 2);
        let raw = RawContributionTensor::new("z", 2, 2, n, d, vec![0.0; 2 * 2 * n * d], vec![0.0; d], vec![0.0; d])
            .unwrap();
        let rec = aggregate_token_effects(&raw, &[2.0, -4.0]).unwrap();
        for row in rec.token_effects.iter_rows() {
            assert_eq!(row, &[0.5, -1.0]);
        }
    }

    #[test]
    fn random_tensor_matches_summation_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let raw = random_raw(&mut rng, 2, 3, 4, 8);
        let bias: Vec<f32> = (0..8).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
        let rec = aggregate_token_effects(&raw, &bias).unwrap();
        // oracle: plain triple loop over the raw tensor
        let mut oracle = vec![0.0f64; 8];
        for l in 0..2 {
            for h in 0..3 {
                for j in 0..4 {
                    for k in 0..8 {
                        oracle[k] += f64::from(raw.contributions()[((l * 3 + h) * 4 + j) * 8 + k]);
                    }
                }
            }
        }
        let mut got = vec![0.0f64; 8];
        for row in rec.token_effects.iter_rows() {
            for k in 0..8 {
                got[k] += f64::from(row[k]);
            }
        }
        let diff: Vec<f64> = (0..8).map(|k| got[k] - f64::from(bias[k]) - oracle[k]).collect();
        assert!(norm_f64(&diff) <= 1e-5 * norm_f64(&oracle));
    }

    #[test]
    fn ablation_bias_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let raw = random_raw(&mut rng, 1, 1, 2, 4);
        let same = vec![raw.clone(), raw.clone(), raw.clone()];
        let bias = compute_ablation_bias(&same).unwrap();
        let expect: Vec<f32> = raw.direct_terms().iter().map(|&x| x as f32).collect();
        assert_eq!(bias, expect);

        let b = vec![0.5f32, -1.0, 2.0, 0.25];
        let neg: Vec<f32> = b.iter().map(|x| -x).collect();
        let r1 = raw.clone().with_direct_terms(b.clone(), vec![0.0; 4]).unwrap();
        let r2 = raw.clone().with_direct_terms(neg, vec![0.0; 4]).unwrap();
        assert_eq!(compute_ablation_bias(&[r1, r2]).unwrap(), vec![0.0; 4]);

        assert!(matches!(compute_ablation_bias(&[]), Err(CfError::EmptyBatch)));
    }

    #[test]
    fn ablation_bias_matches_mean_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let batch: Vec<_> = (0..5).map(|_| random_raw(&mut rng, 1, 2, 3, 6)).collect();
        let bias = compute_ablation_bias(&batch).unwrap();
        for k in 0..6 {
            let mut s = 0.0f64;
            for r in &batch {
                s += f64::from(r.cls_direct()[k]);
                s += f64::from(r.mlp_direct()[k]);
            }
            assert!((f64::from(bias[k]) - s / 5.0).abs() <= 1e-6);
        }
    }

    #[test]
    fn mean_ablation_preserves_batch_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let batch: Vec<_> = (0..6).map(|_| random_raw(&mut rng, 1, 1, 2, 5)).collect();
        let ablated = mean_ablate(&batch).unwrap();
        let mean = |rs: &[RawContributionTensor], f: fn(&RawContributionTensor) -> &[f32], k: usize| {
            rs.iter().map(|r| f64::from(f(r)[k])).sum::<f64>() / rs.len() as f64
        };
        for k in 0..5 {
            for f in [RawContributionTensor::cls_direct as fn(&_) -> &[f32], RawContributionTensor::mlp_direct] {
                assert!((mean(&batch, f, k) - mean(&ablated, f, k)).abs() <= 1e-7);
            }
        }
        assert_eq!(ablated[0].cls_direct(), ablated[5].cls_direct());
    }

    #[test]
    fn reconstruction_of_own_aggregate_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let batch: Vec<_> = (0..4).map(|_| random_raw(&mut rng, 2, 2, 5, 16)).collect();
        let bias = compute_ablation_bias(&batch).unwrap();
        for rec in aggregate_batch(&batch, &bias).unwrap() {
            assert!(reconstruction_error(&rec) <= 1e-5);
            check_reconstruction(&rec, DEFAULT_RECONSTRUCTION_TOLERANCE).unwrap();
        }
    }

    #[test]
    fn zeroing_a_token_breaks_reconstruction() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let raw = random_raw(&mut rng, 1, 2, 3, 4);
        let mut rec = aggregate_token_effects(&raw, &[0.0; 4]).unwrap();
        rec.token_effects.row_mut(1).fill(0.0);
        assert!(reconstruction_error(&rec) > 0.0);
        assert!(matches!(
            check_reconstruction(&rec, 0.0),
            Err(CfError::Reconstruction { .. })
        ));
    }

    #[test]
    fn shape_errors() {
        assert!(RawContributionTensor::new("x", 1, 1, 2, 2, vec![0.0; 3], vec![0.0; 2], vec![0.0; 2]).is_err());
        let raw = RawContributionTensor::new("x", 1, 1, 2, 2, vec![0.0; 4], vec![0.0; 2], vec![0.0; 2]).unwrap();
        assert!(matches!(
            aggregate_token_effects(&raw, &[0.0; 3]),
            Err(CfError::DimensionMismatch { .. })
        ));
    }
}

#[cfg(test)]
mod props {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn aggregation_is_linear(
            a in -3.0f32..3.0, b in -3.0f32..3.0,
            x in prop::collection::vec(-1.0f32..1.0, 2 * 2 * 3 * 4),
            y in prop::collection::vec(-1.0f32..1.0, 2 * 2 * 3 * 4),
        ) {
            let mk = |c: Vec<f32>| RawContributionTensor::new("p", 2, 2, 3, 4, c, vec![0.0; 4], vec![0.0; 4]).unwrap();
            let mix: Vec<f32> = x.iter().zip(&y).map(|(p, q)| a * p + b * q).collect();
            let zero = [0.0f32; 4];
            let lhs = aggregate_token_effects(&mk(mix), &zero).unwrap();
            let rx = aggregate_token_effects(&mk(x), &zero).unwrap();
            let ry = aggregate_token_effects(&mk(y), &zero).unwrap();
            for j in 0..3 {
                for k in 0..4 {
                    let want = f64::from(a) * f64::from(rx.token_effects.row(j)[k])
                        + f64::from(b) * f64::from(ry.token_effects.row(j)[k]);
                    // magnitude bound of a four-term head sum
                    let scale = 1.0 + 4.0 * (f64::from(a.abs()) + f64::from(b.abs()));
                    prop_assert!((f64::from(lhs.token_effects.row(j)[k]) - want).abs() <= 1e-6 * scale);
                }
            }
        }
    }
}
