//! Two-factor synthetic scenes with known object, background and
//! interaction components.

use std::fmt;
use std::str::FromStr;

use rand::distributions::{Distribution, WeightedIndex};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::Normal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{CfError, Result};
use crate::types::{ClassDictionary, ContextPool, SourceKind, TokenEffectRecord};
use crate::vector::{check_dim, l2_normalize, norm, Matrix, UNIT_TOLERANCE};

fn default_tokens() -> (usize, usize) {
    (16, 33)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FactorSpec {
    pub object_means: Vec<Vec<f32>>,
    pub background_means: Vec<Vec<f32>>,
    /// `[x][z]` interaction vectors; zero when absent.
    #[serde(default)]
    pub interaction: Option<Vec<Vec<Vec<f32>>>>,
    pub residual_sigma: f64,
    /// Joint probability of (object, context); rows are objects.
    pub cooccurrence: Vec<Vec<f64>>,
    /// (object tokens, background tokens) per scene.
    #[serde(default = "default_tokens")]
    pub tokens_per_part: (usize, usize),
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub class_names: Option<Vec<String>>,
    #[serde(default)]
    pub context_names: Option<Vec<String>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TokenRole {
    Object,
    Background,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub x: usize,
    pub z: usize,
    pub object_mean: Vec<f32>,
    pub background_mean: Vec<f32>,
    pub interaction: Vec<f32>,
    pub roles: Vec<TokenRole>,
}

/// `(x, z)` group label, written `x0_z1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct GroupTag {
    pub x: usize,
    pub z: usize,
}

impl fmt::Display for GroupTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "x{}_z{}", self.x, self.z)
    }
}

impl FromStr for GroupTag {
    type Err = CfError;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || CfError::WrongGroupSchema(format!("`{s}` is not of the form x<i>_z<j>"));
        let (a, b) = s.split_once('_').ok_or_else(bad)?;
        let x = a.strip_prefix('x').and_then(|v| v.parse().ok()).ok_or_else(bad)?;
        let z = b.strip_prefix('z').and_then(|v| v.parse().ok()).ok_or_else(bad)?;
        Ok(GroupTag { x, z })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum GroupSchema {
    /// `x0_z1`
    #[default]
    Indexed,
    /// `<class name>_<context name>`
    Named,
}

#[derive(Debug, Clone)]
pub struct SyntheticSample {
    pub record: TokenEffectRecord,
    pub label: usize,
    pub group: GroupTag,
    pub truth: GroundTruth,
}

fn check_unit(what: &'static str, rows: &[Vec<f32>]) -> Result<usize> {
    let d = rows.first().map(Vec::len).ok_or(CfError::EmptyInput(what))?;
    for (row, v) in rows.iter().enumerate() {
        check_dim(d, v.len())?;
        let n = norm(v);
        if (n - 1.0).abs() > UNIT_TOLERANCE {
            return Err(CfError::NotUnit { what, row, norm: n });
        }
    }
    Ok(d)
}

impl FactorSpec {
    pub fn validate(&self) -> Result<()> {
        let d = check_unit("object means", &self.object_means)?;
        check_dim(d, check_unit("background means", &self.background_means)?)?;
        let (nx, nz) = (self.object_means.len(), self.background_means.len());
        if let Some(r) = &self.interaction {
            check_dim(nx, r.len())?;
            for row in r {
                check_dim(nz, row.len())?;
                for v in row {
                    check_dim(d, v.len())?;
                }
            }
        }
        if !(self.residual_sigma >= 0.0 && self.residual_sigma.is_finite()) {
            return Err(CfError::config("residual_sigma", "must be a finite value >= 0"));
        }
        check_dim(nx, self.cooccurrence.len())?;
        let mut total = 0.0;
        for row in &self.cooccurrence {
            check_dim(nz, row.len())?;
            for &p in row {
                if !(p >= 0.0 && p.is_finite()) {
                    return Err(CfError::config("cooccurrence", "entries must be finite and >= 0"));
                }
                total += p;
            }
        }
        if (total - 1.0).abs() > 1e-6 {
            return Err(CfError::config("cooccurrence", format!("entries sum to {total}, not 1")));
        }
        if self.tokens_per_part.0 + self.tokens_per_part.1 == 0 {
            return Err(CfError::config("tokens_per_part", "at least one token is required"));
        }
        for (field, names, n) in [
            ("class_names", &self.class_names, nx),
            ("context_names", &self.context_names, nz),
        ] {
            if let Some(names) = names {
                if names.len() != n {
                    return Err(CfError::config(field, format!("expected {n} names, found {}", names.len())));
                }
            }
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let spec: Self = serde_json::from_str(text)?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn dim(&self) -> usize {
        self.object_means[0].len()
    }

    pub fn class_name(&self, x: usize) -> String {
        match &self.class_names {
            Some(n) => n[x].clone(),
            None => format!("class{x}"),
        }
    }

    pub fn context_name(&self, z: usize) -> String {
        match &self.context_names {
            Some(n) => n[z].clone(),
            None => format!("context{z}"),
        }
    }

    fn interaction_for(&self, x: usize, z: usize) -> Vec<f32> {
        match &self.interaction {
            Some(r) => r[x][z].clone(),
            None => vec![0.0; self.dim()],
        }
    }
}

/// Scene randomness: one ChaCha stream per scene index, so scenes are
/// independent of generation order.
fn scene_rng(seed: u64, scene: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(scene);
    rng
}

fn emit_scene(spec: &FactorSpec, x: usize, z: usize, id: String, rng: &mut ChaCha8Rng) -> Result<(TokenEffectRecord, GroundTruth)> {
    let (nx, nz) = (spec.object_means.len(), spec.background_means.len());
    if x >= nx {
        return Err(CfError::InvalidIndex { index: x, size: nx });
    }
    if z >= nz {
        return Err(CfError::InvalidIndex { index: z, size: nz });
    }
    let d = spec.dim();
    let r = spec.interaction_for(x, z);
    let noise = if spec.residual_sigma > 0.0 {
        Some(Normal::new(0.0, spec.residual_sigma).map_err(|e| CfError::config("residual_sigma", e.to_string()))?)
    } else {
        None
    };
    let (n_obj, n_bg) = spec.tokens_per_part;
    let mut roles = Vec::with_capacity(n_obj + n_bg);
    roles.extend(std::iter::repeat_n(TokenRole::Object, n_obj));
    roles.extend(std::iter::repeat_n(TokenRole::Background, n_bg));

    let mut tokens = Matrix::zeros(roles.len(), d);
    let mut global = vec![0.0f64; d];
    for (j, role) in roles.iter().enumerate() {
        let mean = match role {
            TokenRole::Object => &spec.object_means[x],
            TokenRole::Background => &spec.background_means[z],
        };
        let row = tokens.row_mut(j);
        for k in 0..d {
            let eta = noise.as_ref().map_or(0.0, |n| n.sample(rng));
            row[k] = (f64::from(mean[k]) + f64::from(r[k]) + eta) as f32;
            global[k] += f64::from(row[k]);
        }
    }
    let record = TokenEffectRecord::new(
        id,
        tokens,
        vec![0.0; d],
        global.iter().map(|&v| v as f32).collect(),
    )?
    .with_residual(vec![0.0; d])?;
    let truth = GroundTruth {
        x,
        z,
        object_mean: spec.object_means[x].clone(),
        background_mean: spec.background_means[z].clone(),
        interaction: r,
        roles,
    };
    Ok((record, truth))
}

/// One scene of object `x` in context `z`; `scene` selects the noise stream.
pub fn generate_scene(spec: &FactorSpec, x: usize, z: usize, scene: u64) -> Result<(TokenEffectRecord, GroundTruth)> {
    spec.validate()?;
    let mut rng = scene_rng(spec.seed, scene);
    emit_scene(spec, x, z, format!("scene_{scene:06}"), &mut rng)
}

/// `n` scenes with `(x, z)` drawn from the co-occurrence table.
pub fn generate_dataset(spec: &FactorSpec, n: usize, schema: GroupSchema) -> Result<Vec<SyntheticSample>> {
    spec.validate()?;
    if n == 0 {
        return Err(CfError::EmptyInput("scene count"));
    }
    let nz = spec.background_means.len();
    let flat: Vec<f64> = spec.cooccurrence.iter().flatten().copied().collect();
    let picker = WeightedIndex::new(&flat).map_err(|e| CfError::config("cooccurrence", e.to_string()))?;
    (0..n)
        .into_par_iter()
        .map(|i| {
            let mut rng = scene_rng(spec.seed, i as u64);
            let cell = picker.sample(&mut rng);
            let group = GroupTag { x: cell / nz, z: cell % nz };
            let (record, truth) = emit_scene(spec, group.x, group.z, format!("img_{i:06}"), &mut rng)?;
            let tag = match schema {
                GroupSchema::Indexed => group.to_string(),
                GroupSchema::Named => format!("{}_{}", spec.class_name(group.x), spec.context_name(group.z)),
            };
            Ok(SyntheticSample {
                record: record.with_group(tag),
                label: group.x,
                group,
                truth,
            })
        })
        .collect()
}

/// Class dictionary whose text embeddings are the normalized object means.
pub fn class_dictionary(spec: &FactorSpec) -> Result<ClassDictionary> {
    let rows: Vec<Vec<f32>> = spec.object_means.iter().map(|v| l2_normalize(v)).collect::<Result<_>>()?;
    let names = (0..rows.len()).map(|x| spec.class_name(x)).collect();
    ClassDictionary::new(names, Matrix::from_rows(&rows)?)
}

/// A pool of noisy, normalized copies of each background mean, tagged by
/// context name.
pub fn planted_pool(spec: &FactorSpec, per_context: usize, sigma: f64, seed: u64, kind: SourceKind) -> Result<ContextPool> {
    spec.validate()?;
    if per_context == 0 {
        return Err(CfError::EmptyInput("pool size"));
    }
    let noise = Normal::new(0.0, sigma.max(0.0)).map_err(|e| CfError::config("sigma", e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows = Vec::new();
    let mut tags = Vec::new();
    for (z, mean) in spec.background_means.iter().enumerate() {
        for _ in 0..per_context {
            let v: Vec<f32> = mean
                .iter()
                .map(|&m| (f64::from(m) + if sigma > 0.0 { noise.sample(&mut rng) } else { 0.0 }) as f32)
                .collect();
            rows.push(l2_normalize(&v)?);
            tags.push(spec.context_name(z));
        }
    }
    ContextPool::new(Matrix::from_rows(&rows)?, kind, Some(tags), None)
}

/// Counts of each `(x, z)` cell in a generated dataset.
pub fn joint_counts(samples: &[SyntheticSample], nx: usize, nz: usize) -> Vec<Vec<f64>> {
    let mut counts = vec![vec![0.0; nz]; nx];
    for s in samples {
        counts[s.group.x][s.group.z] += 1.0;
    }
    counts
}

fn basis(d: usize, i: usize) -> Vec<f32> {
    let mut v = vec![0.0; d];
    v[i] = 1.0;
    v
}

fn combo(d: usize, terms: &[(usize, f32)]) -> Vec<f32> {
    let mut v = vec![0.0; d];
    for &(i, w) in terms {
        v[i] += w;
    }
    l2_normalize(&v).expect("non-zero combination")
}

/// Two classes, two contexts, 95% of scenes on the matching context. Each
/// context points away from the rival of its usual class, so minority
/// scenes fool the plain zero-shot score.
pub fn planted_bias(d: usize, seed: u64) -> FactorSpec {
    assert!(d >= 4, "planted_bias needs d >= 4");
    FactorSpec {
        object_means: vec![basis(d, 0), basis(d, 1)],
        background_means: vec![combo(d, &[(1, -0.6), (2, 0.8)]), combo(d, &[(0, -0.6), (3, 0.8)])],
        interaction: None,
        residual_sigma: 0.02,
        cooccurrence: vec![vec![0.475, 0.025], vec![0.025, 0.475]],
        tokens_per_part: default_tokens(),
        seed,
        class_names: Some(vec!["landbird".into(), "waterbird".into()]),
        context_names: Some(vec!["land".into(), "water".into()]),
    }
}

/// Backgrounds orthogonal to every class direction and to each other.
pub fn orthogonal(d: usize, n_classes: usize, n_contexts: usize, sigma: f64, seed: u64) -> FactorSpec {
    assert!(d >= n_classes + n_contexts, "dimension too small");
    let cell = 1.0 / (n_classes * n_contexts) as f64;
    FactorSpec {
        object_means: (0..n_classes).map(|i| basis(d, i)).collect(),
        background_means: (0..n_contexts).map(|i| basis(d, n_classes + i)).collect(),
        interaction: None,
        residual_sigma: sigma,
        cooccurrence: vec![vec![cell; n_contexts]; n_classes],
        tokens_per_part: default_tokens(),
        seed,
        class_names: None,
        context_names: None,
    }
}

/// Scenes with no object tokens; each context leans away from one class.
pub fn background_only(d: usize, seed: u64) -> FactorSpec {
    let mut spec = planted_bias(d, seed);
    spec.tokens_per_part = (0, 49);
    spec.cooccurrence = vec![vec![0.25, 0.25], vec![0.25, 0.25]];
    spec
}
