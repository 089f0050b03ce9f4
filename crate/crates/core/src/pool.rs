//! Context pools and the diversity filter sampler.

use std::collections::BTreeMap;
use std::path::Path;

use serde::Serialize;

use crate::cfe::decode_pool_relaxed;
use crate::error::{CfError, Result};
use crate::estimate::{estimate_background, token_class_probs, TokenWeighting};
use crate::types::{CalibrationConfig, ClassDictionary, ContextPool, SourceKind, TokenEffectRecord};
use crate::vector::{check_dim, dot, l2_normalize, norm, Matrix};

/// Rows whose norm drifts further than this from 1 are re-normalized on load.
pub const RENORMALIZE_TOLERANCE: f64 = 1e-4;

/// Folds the two similarities of a candidate into the score the sampler
/// minimizes.
pub trait ScoreCombiner: Send + Sync {
    fn name(&self) -> &str;
    fn combine(&self, cos_object: f64, cos_background: f64) -> f64;
}

#[derive(Debug, Clone, Copy, Default)]
pub struct SumCombiner;

impl ScoreCombiner for SumCombiner {
    fn name(&self) -> &str {
        "sum"
    }

    fn combine(&self, cos_object: f64, cos_background: f64) -> f64 {
        cos_object + cos_background
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct MaxCombiner;

impl ScoreCombiner for MaxCombiner {
    fn name(&self) -> &str {
        "max"
    }

    fn combine(&self, cos_object: f64, cos_background: f64) -> f64 {
        cos_object.max(cos_background)
    }
}

/// Sampler output, sorted by ascending combined score (ties by index).
#[derive(Debug, Clone, PartialEq)]
pub struct SampleSelection {
    pub indices: Vec<usize>,
    pub combined_scores: Vec<f64>,
    pub seed_used: u64,
}

/// A pool with at most one row hidden (the image's own entry in an
/// internal pool).
#[derive(Debug, Clone, Copy)]
pub struct PoolView<'a> {
    pub pool: &'a ContextPool,
    pub exclude: Option<usize>,
}

impl<'a> PoolView<'a> {
    pub fn all(pool: &'a ContextPool) -> Self {
        Self { pool, exclude: None }
    }

    pub fn excluding(pool: &'a ContextPool, row: usize) -> Self {
        Self {
            pool,
            exclude: Some(row),
        }
    }

    pub fn available(&self) -> usize {
        self.pool.len() - usize::from(self.exclude.is_some_and(|e| e < self.pool.len()))
    }

    fn candidates(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.pool.len()).filter(move |&b| Some(b) != self.exclude)
    }
}

/// Picks the `m` candidates least similar to both the object estimate `c_x`
/// and the background estimate `c_z`.
///
/// With category tags, picks go round-robin over categories in ascending tag
/// order, each category contributing its lowest-scoring unused entry.
/// `seed` is recorded for provenance; ties are broken by pool index.
pub fn filter_sample(
    pool: &ContextPool,
    c_x: &[f32],
    c_z: &[f32],
    m: usize,
    seed: u64,
    combiner: &dyn ScoreCombiner,
) -> Result<SampleSelection> {
    filter_sample_view(PoolView::all(pool), c_x, c_z, m, seed, combiner)
}

pub fn filter_sample_view(
    view: PoolView<'_>,
    c_x: &[f32],
    c_z: &[f32],
    m: usize,
    seed: u64,
    combiner: &dyn ScoreCombiner,
) -> Result<SampleSelection> {
    let pool = view.pool;
    check_dim(pool.dim(), c_x.len())?;
    check_dim(pool.dim(), c_z.len())?;
    let available = view.available();
    if m == 0 || m > available {
        return Err(CfError::MTooLarge { m, available });
    }

    let mut scored: Vec<(f64, usize)> = view
        .candidates()
        .map(|b| {
            let z = pool.embedding(b);
            (combiner.combine(dot(z, c_x), dot(z, c_z)), b)
        })
        .collect();
    let by_score = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));

    let mut chosen: Vec<(f64, usize)> = match pool.category_tags() {
        None => {
            scored.sort_by(by_score);
            scored.truncate(m);
            scored
        }
        Some(tags) => {
            let mut groups: BTreeMap<&str, Vec<(f64, usize)>> = BTreeMap::new();
            for s in scored {
                groups.entry(tags[s.1].as_str()).or_default().push(s);
            }
            let mut queues: Vec<std::vec::IntoIter<(f64, usize)>> = groups
                .into_values()
                .map(|mut g| {
                    g.sort_by(by_score);
                    g.into_iter()
                })
                .collect();
            let mut out = Vec::with_capacity(m);
            while out.len() < m {
                for q in queues.iter_mut() {
                    if out.len() == m {
                        break;
                    }
                    if let Some(s) = q.next() {
                        out.push(s);
                    }
                }
            }
            out.sort_by(by_score);
            out
        }
    };
    chosen.shrink_to_fit();
    Ok(SampleSelection {
        indices: chosen.iter().map(|s| s.1).collect(),
        combined_scores: chosen.iter().map(|s| s.0).collect(),
        seed_used: seed,
    })
}

/// Background estimates of every record except `exclude`, as an internal pool.
pub fn build_internal_pool(
    batch: &[TokenEffectRecord],
    classes: &ClassDictionary,
    config: &CalibrationConfig,
    weighting: &dyn TokenWeighting,
    exclude: &str,
) -> Result<ContextPool> {
    let others: Vec<&TokenEffectRecord> = batch.iter().filter(|r| r.image_id != exclude).collect();
    if others.is_empty() {
        return Err(CfError::InsufficientBatch {
            image_id: exclude.to_string(),
        });
    }
    let mut rows = Vec::with_capacity(others.len());
    for r in &others {
        let probs = token_class_probs(r, classes, config.logit_scale)?;
        rows.push(estimate_background(r, &probs, weighting, config.tau_bg)?.embedding);
    }
    ContextPool::new(
        Matrix::from_rows(&rows)?,
        SourceKind::Internal,
        None,
        Some(others.iter().map(|r| r.image_id.clone()).collect()),
    )
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PoolDiagnostics {
    pub rows: usize,
    pub dim: usize,
    pub source_kind: SourceKind,
    /// Rows per category tag, empty when the pool is untagged.
    pub categories: BTreeMap<String, usize>,
    pub renormalized_rows: Vec<usize>,
}

pub fn validate_pool(pool: &ContextPool) -> PoolDiagnostics {
    let mut categories = BTreeMap::new();
    if let Some(tags) = pool.category_tags() {
        for t in tags {
            *categories.entry(t.clone()).or_insert(0) += 1;
        }
    }
    PoolDiagnostics {
        rows: pool.len(),
        dim: pool.dim(),
        source_kind: pool.source_kind(),
        categories,
        renormalized_rows: Vec::new(),
    }
}

/// Reads a `pool` CFE file, re-normalizing rows that drifted off the unit
/// sphere.
pub fn load_pool(path: impl AsRef<Path>) -> Result<(ContextPool, PoolDiagnostics)> {
    let path = path.as_ref();
    let raw = decode_pool_relaxed(&std::fs::read(path)?)?;
    let drifted = drifted_rows(raw.embeddings());
    let pool = if drifted.is_empty() { raw } else { renormalize(&raw, &drifted)? };
    for &row in &drifted {
        log::warn!("{}: pool row {row} was not unit-norm and has been re-normalized", path.display());
    }
    let mut diag = validate_pool(&pool);
    diag.renormalized_rows = drifted;
    Ok((pool, diag))
}

fn drifted_rows(m: &Matrix) -> Vec<usize> {
    m.iter_rows()
        .enumerate()
        .filter(|(_, r)| (norm(r) - 1.0).abs() > RENORMALIZE_TOLERANCE)
        .map(|(i, _)| i)
        .collect()
}

fn renormalize(pool: &ContextPool, drifted: &[usize]) -> Result<ContextPool> {
    let mut m = pool.embeddings().clone();
    for &i in drifted {
        let fixed = l2_normalize(m.row(i))?;
        m.row_mut(i).copy_from_slice(&fixed);
    }
    ContextPool::new(
        m,
        pool.source_kind(),
        pool.category_tags().map(<[String]>::to_vec),
        pool.origin_ids().map(<[String]>::to_vec),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cfe::write_cfe;

    fn unit(v: &[f32]) -> Vec<f32> {
        l2_normalize(v).unwrap()
    }

    fn e(i: usize, d: usize) -> Vec<f32> {
        let mut v = vec![0.0; d];
        v[i] = 1.0;
        v
    }

    #[test]
    fn full_pool_when_m_equals_b() {
        let rows: Vec<Vec<f32>> = (0..4).map(|i| e(i, 4)).collect();
        let pool = ContextPool::new(Matrix::from_rows(&rows).unwrap(), SourceKind::Virtual, None, None).unwrap();
        let sel = filter_sample(&pool, &e(0, 4), &e(1, 4), 4, 0, &SumCombiner).unwrap();
        let mut idx = sel.indices.clone();
        idx.sort();
        assert_eq!(idx, vec![0, 1, 2, 3]);
        assert!(matches!(
            filter_sample(&pool, &e(0, 4), &e(1, 4), 5, 0, &SumCombiner),
            Err(CfError::MTooLarge { m: 5, available: 4 })
        ));
    }

    #[test]
    fn three_entry_example() {
        // c_x = c_z = e0 so the combined score is 2·cos(z, e0): {0.9, 0.1, 0.5}
        let d = 2;
        let rows: Vec<Vec<f32>> = [0.45f32, 0.05, 0.25]
            .iter()
            .map(|&c| vec![c, (1.0 - c * c).sqrt()])
            .collect();
        let pool = ContextPool::new(Matrix::from_rows(&rows).unwrap(), SourceKind::Virtual, None, None).unwrap();
        let sel = filter_sample(&pool, &e(0, d), &e(0, d), 2, 0, &SumCombiner).unwrap();
        assert_eq!(sel.indices, vec![1, 2]);
        assert!((sel.combined_scores[0] - 0.1).abs() < 1e-6);
    }

    #[test]
    fn round_robin_over_two_categories() {
        let rows = vec![unit(&[1.0, 0.1]), unit(&[1.0, 0.3]), unit(&[0.2, 1.0]), unit(&[0.5, 1.0])];
        let tags = vec!["a".into(), "a".into(), "b".into(), "b".into()];
        let pool = ContextPool::new(Matrix::from_rows(&rows).unwrap(), SourceKind::External, Some(tags), None).unwrap();
        // scores favour category a overall, yet one pick per category is required
        let c = unit(&[-1.0, 0.0]);
        let sel = filter_sample(&pool, &c, &c, 2, 0, &SumCombiner).unwrap();
        let mut idx = sel.indices.clone();
        idx.sort();
        assert_eq!(idx, vec![0, 3]);
    }

    #[test]
    fn exclusion_hides_a_row() {
        let rows: Vec<Vec<f32>> = (0..3).map(|i| e(i, 3)).collect();
        let pool = ContextPool::new(Matrix::from_rows(&rows).unwrap(), SourceKind::Internal, None, None).unwrap();
        let view = PoolView::excluding(&pool, 1);
        assert_eq!(view.available(), 2);
        let sel = filter_sample_view(view, &e(0, 3), &e(0, 3), 2, 9, &SumCombiner).unwrap();
        assert!(!sel.indices.contains(&1));
        assert_eq!(sel.seed_used, 9);
    }

    #[test]
    fn max_combiner() {
        assert_eq!(MaxCombiner.combine(0.2, -0.4), 0.2);
        assert_eq!(SumCombiner.combine(0.2, -0.4), 0.2 + -0.4);
    }

    #[test]
    fn internal_pool_examples() {
        let classes = ClassDictionary::new(
            vec!["a".into()],
            Matrix::from_rows(&[e(0, 3)]).unwrap(),
        )
        .unwrap();
        let rec = |id: &str, bg: Vec<f32>| {
            TokenEffectRecord::new(id, Matrix::from_rows(&[e(0, 3), bg]).unwrap(), vec![0.0; 3], vec![1.0, 1.0, 0.0])
                .unwrap()
        };
        let cfg = CalibrationConfig::default();
        let hard = crate::estimate::HardThreshold;
        let batch = vec![rec("one", e(1, 3)), rec("two", e(2, 3))];
        let pool = build_internal_pool(&batch, &classes, &cfg, &hard, "one").unwrap();
        assert_eq!(pool.len(), 1);
        assert_eq!(pool.embedding(0), &e(2, 3)[..]);
        assert_eq!(pool.origin_ids().unwrap(), &["two".to_string()]);
        assert!(matches!(
            build_internal_pool(&batch[..1], &classes, &cfg, &hard, "one"),
            Err(CfError::InsufficientBatch { .. })
        ));
    }

    #[test]
    fn load_renormalizes_drifted_rows() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.cfe");
        let pool = ContextPool::new(
            Matrix::from_rows(&[e(0, 2), e(1, 2)]).unwrap(),
            SourceKind::Virtual,
            None,
            None,
        )
        .unwrap();
        let mut bytes = crate::cfe::encode(&pool);
        // scale row 1 to norm 0.999
        let (_, payload) = crate::cfe::decode_header(&bytes).unwrap();
        let start = bytes.len() - payload.len();
        bytes[start + 12..start + 16].copy_from_slice(&0.999f32.to_le_bytes());
        std::fs::write(&path, &bytes).unwrap();
        let (loaded, diag) = load_pool(&path).unwrap();
        assert_eq!(diag.renormalized_rows, vec![1]);
        assert!((norm(loaded.embedding(1)) - 1.0).abs() < 1e-6);

        write_cfe(&path, &pool).unwrap();
        let (again, diag) = load_pool(&path).unwrap();
        assert_eq!(again, pool);
        assert!(diag.renormalized_rows.is_empty());
    }

    #[test]
    fn diagnostics_count_categories() {
        let d = 4;
        let mut rows = Vec::new();
        let mut tags = Vec::new();
        for c in 0..16 {
            for k in 0..50 {
                rows.push(e((c + k) % d, d));
                tags.push(format!("scene{c:02}"));
            }
        }
        let pool = ContextPool::new(Matrix::from_rows(&rows).unwrap(), SourceKind::External, Some(tags), None).unwrap();
        let diag = validate_pool(&pool);
        assert_eq!(diag.rows, 800);
        assert_eq!(diag.categories.len(), 16);
        assert!(diag.categories.values().all(|&n| n == 50));
    }
}
