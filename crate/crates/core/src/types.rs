//! Interchange data model shared by every stage of the pipeline.

use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{CfError, Result};
use crate::vector::{check_dim, check_finite, Matrix, UNIT_TOLERANCE};

/// Per-image token semantic effects.
///
/// `token_effects` holds one row per patch token. `global_embedding` is the
/// encoder's own image embedding before normalization. `direct_residual`,
/// when present, is the part of the class-token and MLP direct effects that
/// the constant ablation bias did not account for; adding it to the token sum
/// reproduces the global embedding exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenEffectRecord {
    pub image_id: String,
    pub group_tag: Option<String>,
    pub token_effects: Matrix,
    pub ablation_bias: Vec<f32>,
    pub global_embedding: Vec<f32>,
    pub direct_residual: Option<Vec<f32>>,
}

impl TokenEffectRecord {
    pub fn new(
        image_id: impl Into<String>,
        token_effects: Matrix,
        ablation_bias: Vec<f32>,
        global_embedding: Vec<f32>,
    ) -> Result<Self> {
        let record = Self {
            image_id: image_id.into(),
            group_tag: None,
            token_effects,
            ablation_bias,
            global_embedding,
            direct_residual: None,
        };
        record.validate()?;
        Ok(record)
    }

    pub fn with_group(mut self, tag: impl Into<String>) -> Self {
        self.group_tag = Some(tag.into());
        self
    }

    pub fn with_residual(mut self, residual: Vec<f32>) -> Result<Self> {
        check_dim(self.dim(), residual.len())?;
        check_finite("direct_residual", &residual)?;
        self.direct_residual = Some(residual);
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        if self.token_effects.rows() == 0 {
            return Err(CfError::EmptyInput("token effects"));
        }
        let d = self.dim();
        check_dim(d, self.ablation_bias.len())?;
        check_dim(d, self.global_embedding.len())?;
        if let Some(r) = &self.direct_residual {
            check_dim(d, r.len())?;
            check_finite("direct_residual", r)?;
        }
        check_finite("token_effects", self.token_effects.as_slice())?;
        check_finite("ablation_bias", &self.ablation_bias)?;
        check_finite("global_embedding", &self.global_embedding)
    }

    pub fn n_tokens(&self) -> usize {
        self.token_effects.rows()
    }

    pub fn dim(&self) -> usize {
        self.token_effects.cols()
    }
}

/// Per-class unit text embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassDictionary {
    names: Vec<String>,
    embeddings: Matrix,
}

impl ClassDictionary {
    pub fn new(names: Vec<String>, embeddings: Matrix) -> Result<Self> {
        if names.is_empty() {
            return Err(CfError::EmptyInput("class dictionary"));
        }
        check_dim(names.len(), embeddings.rows())?;
        check_finite("class embeddings", embeddings.as_slice())?;
        let mut seen = HashSet::new();
        for n in &names {
            if !seen.insert(n.as_str()) {
                return Err(CfError::DuplicateName(n.clone()));
            }
        }
        if let Some((row, norm)) = embeddings.first_non_unit_row(UNIT_TOLERANCE) {
            return Err(CfError::NotUnit {
                what: "class embeddings",
                row,
                norm,
            });
        }
        Ok(Self { names, embeddings })
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.embeddings.cols()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn name(&self, c: usize) -> &str {
        &self.names[c]
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn embedding(&self, c: usize) -> &[f32] {
        self.embeddings.row(c)
    }

    pub fn embeddings(&self) -> &Matrix {
        &self.embeddings
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SourceKind {
    External,
    Internal,
    Virtual,
}

impl SourceKind {
    pub fn as_str(self) -> &'static str {
        match self {
            SourceKind::External => "external",
            SourceKind::Internal => "internal",
            SourceKind::Virtual => "virtual",
        }
    }
}

impl fmt::Display for SourceKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SourceKind {
    type Err = CfError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "external" => Ok(SourceKind::External),
            "internal" => Ok(SourceKind::Internal),
            "virtual" => Ok(SourceKind::Virtual),
            other => Err(CfError::config("source_kind", format!("unknown kind `{other}`"))),
        }
    }
}

/// Candidate context embeddings for intervention.
#[derive(Debug, Clone, PartialEq)]
pub struct ContextPool {
    embeddings: Matrix,
    source_kind: SourceKind,
    category_tags: Option<Vec<String>>,
    origin_ids: Option<Vec<String>>,
}

impl ContextPool {
    pub fn new(
        embeddings: Matrix,
        source_kind: SourceKind,
        category_tags: Option<Vec<String>>,
        origin_ids: Option<Vec<String>>,
    ) -> Result<Self> {
        if let Some((row, norm)) = embeddings.first_non_unit_row(UNIT_TOLERANCE) {
            return Err(CfError::NotUnit {
                what: "pool embeddings",
                row,
                norm,
            });
        }
        Self::new_relaxed(embeddings, source_kind, category_tags, origin_ids)
    }

    /// Same checks as [`ContextPool::new`] except the unit-norm one.
    pub(crate) fn new_relaxed(
        embeddings: Matrix,
        source_kind: SourceKind,
        category_tags: Option<Vec<String>>,
        origin_ids: Option<Vec<String>>,
    ) -> Result<Self> {
        if embeddings.rows() == 0 {
            return Err(CfError::EmptyInput("context pool"));
        }
        check_finite("pool embeddings", embeddings.as_slice())?;
        if let Some(tags) = &category_tags {
            check_dim(embeddings.rows(), tags.len())?;
        }
        if let Some(ids) = &origin_ids {
            check_dim(embeddings.rows(), ids.len())?;
        }
        Ok(Self {
            embeddings,
            source_kind,
            category_tags,
            origin_ids,
        })
    }

    /// Concatenates pools. Entries from untagged pools get the tag `untagged`
    /// when any input carries tags.
    pub fn merge(pools: &[ContextPool], source_kind: SourceKind) -> Result<Self> {
        let first = pools.first().ok_or(CfError::EmptyInput("context pools"))?;
        let d = first.dim();
        let any_tags = pools.iter().any(|p| p.category_tags.is_some());
        let any_ids = pools.iter().any(|p| p.origin_ids.is_some());
        let mut data = Vec::new();
        let mut tags = Vec::new();
        let mut ids = Vec::new();
        for p in pools {
            check_dim(d, p.dim())?;
            data.extend_from_slice(p.embeddings.as_slice());
            for i in 0..p.len() {
                if any_tags {
                    tags.push(
                        p.category_tags
                            .as_ref()
                            .map_or_else(|| "untagged".to_string(), |t| t[i].clone()),
                    );
                }
                if any_ids {
                    ids.push(p.origin_ids.as_ref().map_or_else(String::new, |t| t[i].clone()));
                }
            }
        }
        let rows = data.len() / d.max(1);
        Self::new(
            Matrix::new(rows, d, data)?,
            source_kind,
            any_tags.then_some(tags),
            any_ids.then_some(ids),
        )
    }

    pub fn len(&self) -> usize {
        self.embeddings.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.embeddings.cols()
    }

    pub fn embedding(&self, b: usize) -> &[f32] {
        self.embeddings.row(b)
    }

    pub fn embeddings(&self) -> &Matrix {
        &self.embeddings
    }

    pub fn source_kind(&self) -> SourceKind {
        self.source_kind
    }

    pub fn category_tags(&self) -> Option<&[String]> {
        self.category_tags.as_deref()
    }

    pub fn origin_ids(&self) -> Option<&[String]> {
        self.origin_ids.as_deref()
    }
}

/// Which score vector ranks the classes that receive counterfactual
/// intervention.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TopKSource {
    Base,
    #[default]
    Tde,
}

impl FromStr for TopKSource {
    type Err = CfError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "base" => Ok(TopKSource::Base),
            "tde" => Ok(TopKSource::Tde),
            other => Err(CfError::config("topk_source", format!("expected base|tde, got `{other}`"))),
        }
    }
}

/// Calibration hyperparameters. Field names double as the JSON config keys.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CalibrationConfig {
    /// Object weight when mixing an object estimate with a context.
    pub alpha: f64,
    /// Share of the intervention score in the fused prediction.
    pub lambda_fuse: f64,
    /// Background suppression coefficient.
    pub lambda_hat: f64,
    /// Token probability threshold for hard weights.
    pub tau_bg: f64,
    /// Multiplier applied to every cosine before it is used as a logit.
    pub logit_scale: f64,
    pub num_contexts: usize,
    pub top_k: usize,
    /// Registered token weighting name (`hard` or `soft` built in).
    pub weight_mode: String,
    /// Registered sampler score combiner name (`sum` or `max` built in).
    pub pool_combiner: String,
    pub topk_source: TopKSource,
    pub seed: u64,
}

impl Default for CalibrationConfig {
    fn default() -> Self {
        Self {
            alpha: 0.6,
            lambda_fuse: 0.7,
            lambda_hat: 1.0,
            tau_bg: 0.3,
            logit_scale: 100.0,
            num_contexts: 100,
            top_k: 5,
            weight_mode: "hard".into(),
            pool_combiner: "sum".into(),
            topk_source: TopKSource::Tde,
            seed: 0,
        }
    }
}

impl CalibrationConfig {
    /// Checks numeric bounds. Strategy names are checked when they are
    /// resolved against a registry.
    pub fn validate(&self) -> Result<()> {
        let open01 = |x: f64| x > 0.0 && x < 1.0;
        if !open01(self.alpha) {
            return Err(CfError::config("alpha", format!("{} not in (0,1)", self.alpha)));
        }
        if !(0.0..=1.0).contains(&self.lambda_fuse) {
            return Err(CfError::config(
                "lambda_fuse",
                format!("{} not in [0,1]", self.lambda_fuse),
            ));
        }
        if !(self.lambda_hat >= 0.0 && self.lambda_hat.is_finite()) {
            return Err(CfError::config("lambda_hat", format!("{} is not >= 0", self.lambda_hat)));
        }
        if !open01(self.tau_bg) {
            return Err(CfError::config("tau_bg", format!("{} not in (0,1)", self.tau_bg)));
        }
        if !(self.logit_scale > 0.0 && self.logit_scale.is_finite()) {
            return Err(CfError::config(
                "logit_scale",
                format!("{} is not > 0", self.logit_scale),
            ));
        }
        if self.num_contexts == 0 {
            return Err(CfError::config("num_contexts", "must be positive"));
        }
        if self.top_k == 0 {
            return Err(CfError::config("top_k", "must be positive"));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }
}
