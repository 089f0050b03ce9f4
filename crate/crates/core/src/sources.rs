//! Context-source variants: where an image's candidate contexts come from.

use std::collections::HashMap;

use rayon::prelude::*;

use crate::error::{CfError, Result};
use crate::estimate::{estimate_background, token_class_probs, TokenWeighting};
use crate::pool::PoolView;
use crate::types::{CalibrationConfig, ClassDictionary, ContextPool, SourceKind, TokenEffectRecord};
use crate::vector::{check_dim, Matrix};

/// Supplies the candidate contexts for one image.
pub trait ContextSource: Send + Sync {
    fn name(&self) -> &str;

    /// `Ok(None)` means no intervention is performed for this image.
    fn pool_for(&self, image_id: &str) -> Result<Option<PoolView<'_>>>;
}

/// Everything a source factory may draw on.
pub struct SourceInputs<'a> {
    pub pools: Vec<ContextPool>,
    pub batch: &'a [TokenEffectRecord],
    pub classes: &'a ClassDictionary,
    pub config: &'a CalibrationConfig,
    pub weighting: &'a dyn TokenWeighting,
    /// Partition size for batch-derived pools; `None` uses the whole batch.
    pub batch_size: Option<usize>,
}

pub trait ContextSourceFactory: Send + Sync {
    fn build(&self, inputs: SourceInputs<'_>) -> Result<Box<dyn ContextSource>>;
}

/// No intervention; predictions use the TDE-corrected base scores only.
pub struct NoContext;

struct Empty;

impl ContextSource for Empty {
    fn name(&self) -> &str {
        "none"
    }

    fn pool_for(&self, _image_id: &str) -> Result<Option<PoolView<'_>>> {
        Ok(None)
    }
}

impl ContextSourceFactory for NoContext {
    fn build(&self, _inputs: SourceInputs<'_>) -> Result<Box<dyn ContextSource>> {
        Ok(Box::new(Empty))
    }
}

/// A fixed pool shared by every image.
pub struct StaticPool {
    name: &'static str,
    pool: ContextPool,
}

impl StaticPool {
    pub fn new(name: &'static str, pool: ContextPool) -> Self {
        Self { name, pool }
    }

    pub fn pool(&self) -> &ContextPool {
        &self.pool
    }
}

impl ContextSource for StaticPool {
    fn name(&self) -> &str {
        self.name
    }

    fn pool_for(&self, _image_id: &str) -> Result<Option<PoolView<'_>>> {
        Ok(Some(PoolView::all(&self.pool)))
    }
}

fn static_pool(name: &'static str, kind: SourceKind, inputs: SourceInputs<'_>) -> Result<Box<dyn ContextSource>> {
    if inputs.pools.is_empty() {
        return Err(CfError::config("pool", format!("variant `{name}` requires at least one --pool")));
    }
    for p in &inputs.pools {
        check_dim(inputs.classes.dim(), p.dim())?;
        if p.source_kind() != kind {
            log::warn!("using a `{}` pool for the `{name}` variant", p.source_kind());
        }
    }
    let pool = ContextPool::merge(&inputs.pools, kind)?;
    Ok(Box::new(StaticPool::new(name, pool)))
}

/// Pre-encoded scene images.
pub struct ExternalScenes;

impl ContextSourceFactory for ExternalScenes {
    fn build(&self, inputs: SourceInputs<'_>) -> Result<Box<dyn ContextSource>> {
        static_pool("external", SourceKind::External, inputs)
    }
}

/// Encoded scene descriptions.
pub struct VirtualScenes;

impl ContextSourceFactory for VirtualScenes {
    fn build(&self, inputs: SourceInputs<'_>) -> Result<Box<dyn ContextSource>> {
        static_pool("virtual", SourceKind::Virtual, inputs)
    }
}

/// Background estimates of the other images in the same batch.
pub struct InternalBatch;

/// One internal pool per batch partition; each image sees its own
/// partition with its own row hidden.
pub struct BatchPools {
    pools: Vec<ContextPool>,
    lookup: HashMap<String, (usize, usize)>,
}

impl BatchPools {
    pub fn build(
        batch: &[TokenEffectRecord],
        classes: &ClassDictionary,
        config: &CalibrationConfig,
        weighting: &dyn TokenWeighting,
        batch_size: Option<usize>,
    ) -> Result<Self> {
        if batch.is_empty() {
            return Err(CfError::EmptyBatch);
        }
        let size = batch_size.unwrap_or(batch.len()).max(1);
        let backgrounds: Vec<Vec<f32>> = batch
            .par_iter()
            .map(|r| {
                let probs = token_class_probs(r, classes, config.logit_scale)?;
                Ok(estimate_background(r, &probs, weighting, config.tau_bg)?.embedding)
            })
            .collect::<Result<_>>()?;
        let mut pools = Vec::new();
        let mut lookup = HashMap::with_capacity(batch.len());
        for (p, (records, rows)) in batch.chunks(size).zip(backgrounds.chunks(size)).enumerate() {
            for (row, r) in records.iter().enumerate() {
                if lookup.insert(r.image_id.clone(), (p, row)).is_some() {
                    return Err(CfError::DuplicateName(r.image_id.clone()));
                }
            }
            pools.push(ContextPool::new(
                Matrix::from_rows(rows)?,
                SourceKind::Internal,
                None,
                Some(records.iter().map(|r| r.image_id.clone()).collect()),
            )?);
        }
        Ok(Self { pools, lookup })
    }

    pub fn partitions(&self) -> &[ContextPool] {
        &self.pools
    }
}

impl ContextSource for BatchPools {
    fn name(&self) -> &str {
        "internal"
    }

    fn pool_for(&self, image_id: &str) -> Result<Option<PoolView<'_>>> {
        let &(p, row) = self.lookup.get(image_id).ok_or_else(|| CfError::InsufficientBatch {
            image_id: image_id.to_string(),
        })?;
        let view = PoolView::excluding(&self.pools[p], row);
        if view.available() == 0 {
            return Err(CfError::InsufficientBatch {
                image_id: image_id.to_string(),
            });
        }
        Ok(Some(view))
    }
}

impl ContextSourceFactory for InternalBatch {
    fn build(&self, inputs: SourceInputs<'_>) -> Result<Box<dyn ContextSource>> {
        if !inputs.pools.is_empty() {
            log::warn!("internal variant ignores --pool inputs");
        }
        Ok(Box::new(BatchPools::build(
            inputs.batch,
            inputs.classes,
            inputs.config,
            inputs.weighting,
            inputs.batch_size,
        )?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::estimate::HardThreshold;
    use crate::pool::build_internal_pool;

    fn e(i: usize, d: usize) -> Vec<f32> {
        let mut v = vec![0.0; d];
        v[i] = 1.0;
        v
    }

    fn setup() -> (ClassDictionary, Vec<TokenEffectRecord>) {
        let classes = ClassDictionary::new(vec!["a".into()], Matrix::from_rows(&[e(0, 4)]).unwrap()).unwrap();
        let batch = (1..4)
            .map(|k| {
                TokenEffectRecord::new(
                    format!("img{k}"),
                    Matrix::from_rows(&[e(0, 4), e(k, 4)]).unwrap(),
                    vec![0.0; 4],
                    vec![1.0; 4],
                )
                .unwrap()
            })
            .collect();
        (classes, batch)
    }

    #[test]
    fn batch_pools_match_per_image_construction() {
        let (classes, batch) = setup();
        let cfg = CalibrationConfig::default();
        let pools = BatchPools::build(&batch, &classes, &cfg, &HardThreshold, None).unwrap();
        for r in &batch {
            let view = pools.pool_for(&r.image_id).unwrap().unwrap();
            let direct = build_internal_pool(&batch, &classes, &cfg, &HardThreshold, &r.image_id).unwrap();
            let rows: Vec<&[f32]> = (0..view.pool.len())
                .filter(|&b| Some(b) != view.exclude)
                .map(|b| view.pool.embedding(b))
                .collect();
            assert_eq!(rows.len(), direct.len());
            for (b, row) in rows.iter().enumerate() {
                assert_eq!(*row, direct.embedding(b));
            }
        }
    }

    #[test]
    fn singleton_partition_is_insufficient() {
        let (classes, batch) = setup();
        let cfg = CalibrationConfig::default();
        let pools = BatchPools::build(&batch, &classes, &cfg, &HardThreshold, Some(2)).unwrap();
        assert_eq!(pools.partitions().len(), 2);
        assert!(pools.pool_for("img1").unwrap().is_some());
        assert!(matches!(pools.pool_for("img3"), Err(CfError::InsufficientBatch { .. })));
    }

    #[test]
    fn static_variant_without_pool_is_a_config_error() {
        let (classes, batch) = setup();
        let cfg = CalibrationConfig::default();
        let inputs = SourceInputs {
            pools: vec![],
            batch: &batch,
            classes: &classes,
            config: &cfg,
            weighting: &HardThreshold,
            batch_size: None,
        };
        let err = ExternalScenes.build(inputs).err().unwrap();
        assert!(err.is_config_error());
        assert!(err.to_string().contains("--pool"));
    }
}
