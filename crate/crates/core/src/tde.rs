//! Total-direct-effect scoring, counterfactual synthesis, intervention and
//! fusion: the per-image calibration pipeline.

use std::collections::BTreeMap;
use std::sync::Arc;

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{CfError, Result};
use crate::estimate::{estimate_background, estimate_object, token_class_probs, TokenWeighting};
use crate::metrics::decision_margin;
use crate::pool::{filter_sample_view, PoolView, ScoreCombiner};
use crate::registry::Strategies;
use crate::sources::{ContextSource, SourceInputs};
use crate::types::{CalibrationConfig, ClassDictionary, ContextPool, TokenEffectRecord, TopKSource};
use crate::vector::{check_dim, dot, l2_normalize, norm_f64, sigmoid, ZERO_NORM};

/// `base − λ̂ · bg`, elementwise.
pub fn tde_base(base_scores: &[f64], bg_scores: &[f64], lambda_hat: f64) -> Result<Vec<f64>> {
    check_dim(base_scores.len(), bg_scores.len())?;
    Ok(base_scores
        .iter()
        .zip(bg_scores)
        .map(|(b, g)| b - lambda_hat * g)
        .collect())
}

/// `α·c_x + (1−α)·z` before normalization, in f64. Returns the mix and its norm.
fn mix(c_x: &[f32], z: &[f32], alpha: f64, out: &mut Vec<f64>) -> Result<f64> {
    check_dim(c_x.len(), z.len())?;
    out.clear();
    out.extend(
        c_x.iter()
            .zip(z)
            .map(|(&x, &b)| alpha * f64::from(x) + (1.0 - alpha) * f64::from(b)),
    );
    let n = norm_f64(out);
    if !(n >= ZERO_NORM) {
        return Err(CfError::ZeroVector { norm: n });
    }
    Ok(n)
}

/// Synthesized counterfactual `normalize(α·c_x + (1−α)·z)`.
pub fn synthesize_cf(c_x: &[f32], z: &[f32], alpha: f64) -> Result<Vec<f32>> {
    let mut buf = Vec::with_capacity(c_x.len());
    let n = mix(c_x, z, alpha, &mut buf)?;
    Ok(buf.iter().map(|x| (x / n) as f32).collect())
}

fn dot_f64(a: &[f64], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| x * f64::from(y)).sum()
}

/// Reusable scratch for scoring synthesized counterfactuals.
#[derive(Debug, Default)]
pub struct Synthesizer {
    buf: Vec<f64>,
}

impl Synthesizer {
    /// `TDE(C(x, z); c) = S(normalize(α c_x + (1−α) z), t_c) − λ̂ S(z, t_c)`.
    pub fn tde(&mut self, c_x: &[f32], z: &[f32], text: &[f32], config: &CalibrationConfig) -> Result<f64> {
        let n = mix(c_x, z, config.alpha, &mut self.buf)?;
        let s = config.logit_scale;
        Ok(s * dot_f64(&self.buf, text) / n - config.lambda_hat * s * dot(z, text))
    }
}

/// Mean TDE of the synthesized counterfactuals over `contexts`, for each
/// class in `class_subset`.
pub fn intervention_score<Z: AsRef<[f32]>>(
    c_x: &[f32],
    contexts: &[Z],
    classes: &ClassDictionary,
    class_subset: &[usize],
    config: &CalibrationConfig,
) -> Result<BTreeMap<usize, f64>> {
    if contexts.is_empty() {
        return Err(CfError::EmptyContexts);
    }
    check_dim(classes.dim(), c_x.len())?;
    let mut synth = Synthesizer::default();
    let mut out = BTreeMap::new();
    for &c in class_subset {
        if c >= classes.len() {
            return Err(CfError::InvalidIndex {
                index: c,
                size: classes.len(),
            });
        }
        let text = classes.embedding(c);
        let mut total = 0.0;
        for z in contexts {
            total += synth.tde(c_x, z.as_ref(), text, config)?;
        }
        out.insert(c, total / contexts.len() as f64);
    }
    Ok(out)
}

/// Fused scores and the predicted class (ties go to the lowest index).
pub fn fuse_predict(
    tde_base: &[f64],
    intervention: &BTreeMap<usize, f64>,
    lambda_fuse: f64,
    top_k_set: &[usize],
) -> Result<(Vec<f64>, usize)> {
    if tde_base.is_empty() {
        return Err(CfError::EmptyInput("score vector"));
    }
    let mut fused = tde_base.to_vec();
    for (&c, &score) in intervention {
        if !top_k_set.contains(&c) || c >= fused.len() {
            return Err(CfError::InvalidIndex {
                index: c,
                size: fused.len(),
            });
        }
        fused[c] = (1.0 - lambda_fuse) * tde_base[c] + lambda_fuse * score;
    }
    let predicted = argmax(&fused);
    Ok((fused, predicted))
}

/// Index of the largest entry, lowest index on ties.
pub fn argmax(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate().skip(1) {
        if s > scores[best] {
            best = i;
        }
    }
    best
}

/// The `k` highest-scoring classes, descending, ties to the lowest index.
pub fn top_k_classes(scores: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx.truncate(k.min(scores.len()));
    idx
}

/// Plain zero-shot logits `S(f_i(i), t_c)` of the normalized global embedding.
pub fn vanilla_scores(record: &TokenEffectRecord, classes: &ClassDictionary, scale: f64) -> Result<Vec<f64>> {
    check_dim(classes.dim(), record.dim())?;
    let g = l2_normalize(&record.global_embedding)?;
    Ok((0..classes.len()).map(|c| scale * dot(&g, classes.embedding(c))).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PredictionRecord {
    pub image_id: String,
    pub predicted_class: usize,
    pub predicted_label: String,
    /// Fused score of the prediction minus the best other class.
    pub margin_delta: Option<f64>,
    pub group_tag: Option<String>,
    pub top_k: Vec<usize>,
    pub fused_scores: Vec<f64>,
    pub base_scores: Vec<f64>,
    pub bg_scores: Vec<f64>,
    pub tde_base: Vec<f64>,
    /// Probability-space TDE `σ(base) − σ(bg)`; diagnostic only.
    pub tde_sigmoid: Vec<f64>,
    pub intervention_scores: BTreeMap<usize, f64>,
    /// Pool rows used per intervened class.
    pub contexts: BTreeMap<usize, Vec<usize>>,
    pub bg_support: usize,
    /// Another class shared the winning fused score.
    pub tie: bool,
}

#[derive(Serialize)]
struct PredictionLine<'a> {
    image_id: &'a str,
    predicted_class: usize,
    predicted_label: &'a str,
    margin_delta: Option<f64>,
    group_tag: Option<&'a str>,
    top_k: &'a [usize],
    fused_scores: &'a [f64],
    #[serde(flatten, skip_serializing_if = "Option::is_none")]
    components: Option<Components<'a>>,
}

#[derive(Serialize)]
struct Components<'a> {
    base_scores: &'a [f64],
    bg_scores: &'a [f64],
    tde_base: &'a [f64],
    tde_sigmoid: &'a [f64],
    intervention_scores: &'a BTreeMap<usize, f64>,
    contexts: &'a BTreeMap<usize, Vec<usize>>,
    bg_support: usize,
    tie: bool,
}

impl PredictionRecord {
    /// One JSON object with a fixed field order, no trailing newline.
    pub fn to_json_line(&self, emit_components: bool) -> String {
        let line = PredictionLine {
            image_id: &self.image_id,
            predicted_class: self.predicted_class,
            predicted_label: &self.predicted_label,
            margin_delta: self.margin_delta,
            group_tag: self.group_tag.as_deref(),
            top_k: &self.top_k,
            fused_scores: &self.fused_scores,
            components: emit_components.then(|| Components {
                base_scores: &self.base_scores,
                bg_scores: &self.bg_scores,
                tde_base: &self.tde_base,
                tde_sigmoid: &self.tde_sigmoid,
                intervention_scores: &self.intervention_scores,
                contexts: &self.contexts,
                bg_support: self.bg_support,
                tie: self.tie,
            }),
        };
        serde_json::to_string(&line).expect("prediction serializes")
    }
}

/// Runs the full calibration for one image with explicit strategies.
pub fn calibrate_image(
    record: &TokenEffectRecord,
    classes: &ClassDictionary,
    pool: Option<PoolView<'_>>,
    config: &CalibrationConfig,
    weighting: &dyn TokenWeighting,
    combiner: &dyn ScoreCombiner,
) -> Result<PredictionRecord> {
    let s = config.logit_scale;
    let tau = config.tau_bg;

    // token probabilities and the background estimate
    let probs = token_class_probs(record, classes, s)?;
    let background = estimate_background(record, &probs, weighting, tau)?;

    // base TDE
    let base_scores = vanilla_scores(record, classes, s)?;
    let bg_scores: Vec<f64> = (0..classes.len())
        .map(|c| s * dot(&background.embedding, classes.embedding(c)))
        .collect();
    let tde = tde_base(&base_scores, &bg_scores, config.lambda_hat)?;
    let tde_sigmoid = base_scores
        .iter()
        .zip(&bg_scores)
        .map(|(&b, &g)| sigmoid(b) - sigmoid(g))
        .collect();

    let ranking = match config.topk_source {
        TopKSource::Base => &base_scores,
        TopKSource::Tde => &tde,
    };
    let top_k = top_k_classes(ranking, config.top_k);

    // per-class object estimates, sampled contexts and intervention
    let mut intervention = BTreeMap::new();
    let mut contexts = BTreeMap::new();
    if let Some(view) = pool {
        check_dim(classes.dim(), view.pool.dim())?;
        let m = config.num_contexts.min(view.available());
        for &k in &top_k {
            let object = estimate_object(record, &probs, k, weighting, tau)?;
            let seed = config.seed.wrapping_add(k as u64);
            let selection = filter_sample_view(view, &object.embedding, &background.embedding, m, seed, combiner)?;
            let rows: Vec<&[f32]> = selection.indices.iter().map(|&b| view.pool.embedding(b)).collect();
            let score = intervention_score(&object.embedding, &rows, classes, &[k], config)?;
            intervention.extend(score);
            contexts.insert(k, selection.indices);
        }
    }

    let (fused_scores, predicted_class) = fuse_predict(&tde, &intervention, config.lambda_fuse, &top_k)?;
    let tie = fused_scores
        .iter()
        .enumerate()
        .any(|(c, &v)| c != predicted_class && v == fused_scores[predicted_class]);
    let margin_delta = if classes.len() > 1 {
        Some(decision_margin(&fused_scores, predicted_class, None)?)
    } else {
        None
    };

    Ok(PredictionRecord {
        image_id: record.image_id.clone(),
        predicted_class,
        predicted_label: classes.name(predicted_class).to_string(),
        margin_delta,
        group_tag: record.group_tag.clone(),
        top_k,
        fused_scores,
        base_scores,
        bg_scores,
        tde_base: tde,
        tde_sigmoid,
        intervention_scores: intervention,
        contexts,
        bg_support: background.support_size,
        tie,
    })
}

/// Runs the calibration for one image with the built-in strategies named in
/// `config`.
pub fn run_image(
    record: &TokenEffectRecord,
    classes: &ClassDictionary,
    pool: Option<&ContextPool>,
    config: &CalibrationConfig,
) -> Result<PredictionRecord> {
    config.validate()?;
    let strategies = Strategies::builtin();
    let weighting = strategies.weighting.get(&config.weight_mode)?;
    let combiner = strategies.combiners.get(&config.pool_combiner)?;
    calibrate_image(
        record,
        classes,
        pool.map(PoolView::all),
        config,
        weighting.as_ref(),
        combiner.as_ref(),
    )
}

/// A configured pipeline: classes, config, resolved strategies and a
/// context source.
pub struct Calibrator {
    classes: ClassDictionary,
    config: CalibrationConfig,
    weighting: Arc<dyn TokenWeighting>,
    combiner: Arc<dyn ScoreCombiner>,
    source: Box<dyn ContextSource>,
}

pub struct CalibratorBuilder<'a> {
    classes: ClassDictionary,
    config: CalibrationConfig,
    variant: String,
    pools: Vec<ContextPool>,
    batch: &'a [TokenEffectRecord],
    batch_size: Option<usize>,
}

impl<'a> CalibratorBuilder<'a> {
    pub fn variant(mut self, name: impl Into<String>) -> Self {
        self.variant = name.into();
        self
    }

    pub fn pools(mut self, pools: Vec<ContextPool>) -> Self {
        self.pools = pools;
        self
    }

    /// Records available to batch-derived context sources.
    pub fn batch(mut self, batch: &'a [TokenEffectRecord]) -> Self {
        self.batch = batch;
        self
    }

    pub fn batch_size(mut self, size: Option<usize>) -> Self {
        self.batch_size = size;
        self
    }

    pub fn build(self, strategies: &Strategies) -> Result<Calibrator> {
        self.config.validate()?;
        let weighting = strategies.weighting.get(&self.config.weight_mode)?;
        let combiner = strategies.combiners.get(&self.config.pool_combiner)?;
        let factory = strategies.sources.get(&self.variant)?;
        let source = factory.build(SourceInputs {
            pools: self.pools,
            batch: self.batch,
            classes: &self.classes,
            config: &self.config,
            weighting: weighting.as_ref(),
            batch_size: self.batch_size,
        })?;
        Ok(Calibrator {
            classes: self.classes,
            config: self.config,
            weighting,
            combiner,
            source,
        })
    }
}

impl Calibrator {
    pub fn builder<'a>(classes: ClassDictionary, config: CalibrationConfig) -> CalibratorBuilder<'a> {
        CalibratorBuilder {
            classes,
            config,
            variant: "none".into(),
            pools: Vec::new(),
            batch: &[],
            batch_size: None,
        }
    }

    pub fn classes(&self) -> &ClassDictionary {
        &self.classes
    }

    pub fn config(&self) -> &CalibrationConfig {
        &self.config
    }

    pub fn variant(&self) -> &str {
        self.source.name()
    }

    pub fn run_image(&self, record: &TokenEffectRecord) -> Result<PredictionRecord> {
        let pool = self.source.pool_for(&record.image_id)?;
        calibrate_image(
            record,
            &self.classes,
            pool,
            &self.config,
            self.weighting.as_ref(),
            self.combiner.as_ref(),
        )
    }

    /// Calibrates every record on the current rayon pool; output is sorted
    /// by image id.
    pub fn run_batch(&self, records: &[TokenEffectRecord]) -> Result<Vec<PredictionRecord>> {
        let mut out: Vec<PredictionRecord> = records
            .par_iter()
            .map(|r| self.run_image(r))
            .collect::<Result<_>>()?;
        out.sort_by(|a, b| a.image_id.cmp(&b.image_id));
        Ok(out)
    }
}
