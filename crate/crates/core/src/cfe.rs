//! CFE binary interchange format.
//!
//! Layout: the ASCII magic `CFE1`, a little-endian `u32` header length, a
//! UTF-8 JSON header `{"kind", "n", "d", "fields", "meta"}`, then one
//! row-major little-endian `f32` array per entry of `fields`, in that order.
//! Strings (ids, class names, tags) live in `meta`.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use crate::error::{CfError, Result};
use crate::token_effects::RawContributionTensor;
use crate::types::{ClassDictionary, ContextPool, SourceKind, TokenEffectRecord};
use crate::vector::Matrix;

pub const MAGIC: &[u8; 4] = b"CFE1";
const PREFIX_LEN: u64 = 8;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CfeHeader {
    pub kind: String,
    pub n: usize,
    pub d: usize,
    pub fields: Vec<String>,
    #[serde(default)]
    pub meta: Map<String, Value>,
}

/// A decoded CFE file.
#[derive(Debug, Clone, PartialEq)]
pub enum CfePayload {
    Tokens(TokenEffectRecord),
    Classes(ClassDictionary),
    Pool(ContextPool),
    Raw(RawContributionTensor),
}

impl CfePayload {
    pub fn kind(&self) -> &'static str {
        match self {
            CfePayload::Tokens(_) => "tokens",
            CfePayload::Classes(_) => "classes",
            CfePayload::Pool(_) => "pool",
            CfePayload::Raw(_) => "raw",
        }
    }
}

/// Anything that can be written as a CFE file.
pub trait CfeRecord {
    fn header(&self) -> CfeHeader;
    /// Arrays in the order of `header().fields`.
    fn arrays(&self) -> Vec<&[f32]>;
}

impl CfeRecord for TokenEffectRecord {
    fn header(&self) -> CfeHeader {
        let mut fields = vec![
            "token_effects".to_string(),
            "ablation_bias".to_string(),
            "global_embedding".to_string(),
        ];
        if self.direct_residual.is_some() {
            fields.push("direct_residual".into());
        }
        let mut meta = Map::new();
        meta.insert("image_id".into(), json!(self.image_id));
        if let Some(g) = &self.group_tag {
            meta.insert("group_tag".into(), json!(g));
        }
        CfeHeader {
            kind: "tokens".into(),
            n: self.n_tokens(),
            d: self.dim(),
            fields,
            meta,
        }
    }

    fn arrays(&self) -> Vec<&[f32]> {
        let mut out = vec![
            self.token_effects.as_slice(),
            &self.ablation_bias[..],
            &self.global_embedding[..],
        ];
        if let Some(r) = &self.direct_residual {
            out.push(r);
        }
        out
    }
}

impl CfeRecord for ClassDictionary {
    fn header(&self) -> CfeHeader {
        let mut meta = Map::new();
        meta.insert("class_names".into(), json!(self.names()));
        CfeHeader {
            kind: "classes".into(),
            n: self.len(),
            d: self.dim(),
            fields: vec!["embeddings".into()],
            meta,
        }
    }

    fn arrays(&self) -> Vec<&[f32]> {
        vec![self.embeddings().as_slice()]
    }
}

impl CfeRecord for ContextPool {
    fn header(&self) -> CfeHeader {
        let mut meta = Map::new();
        meta.insert("source_kind".into(), json!(self.source_kind().as_str()));
        if let Some(t) = self.category_tags() {
            meta.insert("category_tags".into(), json!(t));
        }
        if let Some(o) = self.origin_ids() {
            meta.insert("origin_ids".into(), json!(o));
        }
        CfeHeader {
            kind: "pool".into(),
            n: self.len(),
            d: self.dim(),
            fields: vec!["embeddings".into()],
            meta,
        }
    }

    fn arrays(&self) -> Vec<&[f32]> {
        vec![self.embeddings().as_slice()]
    }
}

impl CfeRecord for RawContributionTensor {
    fn header(&self) -> CfeHeader {
        let mut meta = Map::new();
        meta.insert("L".into(), json!(self.n_layers()));
        meta.insert("H".into(), json!(self.n_heads()));
        meta.insert("image_id".into(), json!(self.image_id));
        if let Some(g) = &self.group_tag {
            meta.insert("group_tag".into(), json!(g));
        }
        CfeHeader {
            kind: "raw".into(),
            n: self.n_tokens(),
            d: self.dim(),
            fields: vec!["contributions".into(), "cls_direct".into(), "mlp_direct".into()],
            meta,
        }
    }

    fn arrays(&self) -> Vec<&[f32]> {
        vec![self.contributions(), self.cls_direct(), self.mlp_direct()]
    }
}

impl CfeRecord for CfePayload {
    fn header(&self) -> CfeHeader {
        match self {
            CfePayload::Tokens(r) => r.header(),
            CfePayload::Classes(r) => r.header(),
            CfePayload::Pool(r) => r.header(),
            CfePayload::Raw(r) => r.header(),
        }
    }

    fn arrays(&self) -> Vec<&[f32]> {
        match self {
            CfePayload::Tokens(r) => r.arrays(),
            CfePayload::Classes(r) => r.arrays(),
            CfePayload::Pool(r) => r.arrays(),
            CfePayload::Raw(r) => r.arrays(),
        }
    }
}

pub fn encode<R: CfeRecord + ?Sized>(record: &R) -> Vec<u8> {
    let header = serde_json::to_vec(&record.header()).expect("header serializes");
    let arrays = record.arrays();
    let floats: usize = arrays.iter().map(|a| a.len()).sum();
    let mut out = Vec::with_capacity(8 + header.len() + 4 * floats);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    for a in arrays {
        for x in a {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    out
}

pub fn write_cfe<R: CfeRecord + ?Sized>(path: impl AsRef<Path>, record: &R) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(&encode(record))?;
    f.flush()?;
    Ok(())
}

pub fn read_cfe(path: impl AsRef<Path>) -> Result<CfePayload> {
    decode(&fs::read(path)?)
}

pub fn read_tokens(path: impl AsRef<Path>) -> Result<TokenEffectRecord> {
    match read_cfe(path)? {
        CfePayload::Tokens(r) => Ok(r),
        other => Err(CfError::UnexpectedKind {
            wanted: "tokens",
            found: other.kind().into(),
        }),
    }
}

pub fn read_classes(path: impl AsRef<Path>) -> Result<ClassDictionary> {
    match read_cfe(path)? {
        CfePayload::Classes(r) => Ok(r),
        other => Err(CfError::UnexpectedKind {
            wanted: "classes",
            found: other.kind().into(),
        }),
    }
}

pub fn read_raw(path: impl AsRef<Path>) -> Result<RawContributionTensor> {
    match read_cfe(path)? {
        CfePayload::Raw(r) => Ok(r),
        other => Err(CfError::UnexpectedKind {
            wanted: "raw",
            found: other.kind().into(),
        }),
    }
}

/// Splits the file into header and payload without interpreting the payload.
pub fn decode_header(bytes: &[u8]) -> Result<(CfeHeader, &[u8])> {
    if let Some(offset) = (0..4).find(|&i| bytes.get(i) != Some(&MAGIC[i])) {
        return Err(CfError::BadMagic { offset: offset as u64 });
    }
    if bytes.len() < PREFIX_LEN as usize {
        return Err(CfError::TruncatedPayload {
            offset: bytes.len() as u64,
            needed: PREFIX_LEN - bytes.len() as u64,
        });
    }
    let hlen = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as u64;
    let end = PREFIX_LEN + hlen;
    if (bytes.len() as u64) < end {
        return Err(CfError::TruncatedPayload {
            offset: bytes.len() as u64,
            needed: end - bytes.len() as u64,
        });
    }
    let raw = &bytes[PREFIX_LEN as usize..end as usize];
    let header: CfeHeader = serde_json::from_slice(raw).map_err(|e| CfError::HeaderSchemaMismatch {
        offset: PREFIX_LEN + json_error_offset(raw, &e),
        reason: e.to_string(),
    })?;
    Ok((header, &bytes[end as usize..]))
}

fn json_error_offset(raw: &[u8], e: &serde_json::Error) -> u64 {
    let line_start: usize = raw
        .split(|&b| b == b'\n')
        .take(e.line().saturating_sub(1))
        .map(|l| l.len() + 1)
        .sum();
    (line_start + e.column().saturating_sub(1)).min(raw.len()) as u64
}

pub fn decode(bytes: &[u8]) -> Result<CfePayload> {
    decode_inner(bytes, false)
}

/// Decodes a `pool` file without requiring unit-norm rows.
pub(crate) fn decode_pool_relaxed(bytes: &[u8]) -> Result<ContextPool> {
    match decode_inner(bytes, true)? {
        CfePayload::Pool(p) => Ok(p),
        other => Err(CfError::UnexpectedKind {
            wanted: "pool",
            found: other.kind().into(),
        }),
    }
}

fn decode_inner(bytes: &[u8], relax_units: bool) -> Result<CfePayload> {
    let (header, payload) = decode_header(bytes)?;
    let payload_start = bytes.len() as u64 - payload.len() as u64;
    let schema = |reason: String| CfError::HeaderSchemaMismatch {
        offset: PREFIX_LEN,
        reason,
    };
    let (n, d) = (header.n, header.d);
    if d == 0 {
        return Err(schema("d must be positive".into()));
    }

    let raw_shape = if header.kind == "raw" {
        Some((meta_usize(&header.meta, "L").map_err(schema)?, meta_usize(&header.meta, "H").map_err(schema)?))
    } else {
        None
    };
    let (required, optional): (&[&str], &[&str]) = match header.kind.as_str() {
        "tokens" => (&["token_effects", "ablation_bias", "global_embedding"], &["direct_residual"]),
        "classes" | "pool" => (&["embeddings"], &[]),
        "raw" => (&["contributions", "cls_direct", "mlp_direct"], &[]),
        other => return Err(schema(format!("unknown kind `{other}`"))),
    };
    for f in &header.fields {
        if !required.contains(&f.as_str()) && !optional.contains(&f.as_str()) {
            return Err(schema(format!("unexpected field `{f}` for kind `{}`", header.kind)));
        }
        if header.fields.iter().filter(|g| *g == f).count() > 1 {
            return Err(schema(format!("field `{f}` listed twice")));
        }
    }
    for r in required {
        if !header.fields.iter().any(|f| f == r) {
            return Err(schema(format!("missing field `{r}`")));
        }
    }
    let field_len = |name: &str| -> usize {
        match name {
            "token_effects" | "embeddings" => n * d,
            "contributions" => {
                let (l, h) = raw_shape.unwrap();
                l * h * n * d
            }
            _ => d,
        }
    };

    let needed: u64 = header.fields.iter().map(|f| 4 * field_len(f) as u64).sum();
    let have = payload.len() as u64;
    if have < needed {
        return Err(CfError::TruncatedPayload {
            offset: bytes.len() as u64,
            needed: needed - have,
        });
    }
    if have > needed {
        return Err(CfError::HeaderSchemaMismatch {
            offset: payload_start + needed,
            reason: format!("{} trailing bytes after declared payload", have - needed),
        });
    }

    let mut arrays: Vec<(String, Vec<f32>)> = Vec::with_capacity(header.fields.len());
    let mut cursor = 0usize;
    for f in &header.fields {
        let len = field_len(f);
        let mut values = Vec::with_capacity(len);
        for chunk in payload[cursor..cursor + 4 * len].chunks_exact(4) {
            let x = f32::from_le_bytes(chunk.try_into().unwrap());
            if !x.is_finite() {
                return Err(CfError::CorruptFloat {
                    field: f.clone(),
                    offset: payload_start + (cursor + 4 * values.len()) as u64,
                });
            }
            values.push(x);
        }
        cursor += 4 * len;
        arrays.push((f.clone(), values));
    }
    let mut take = |name: &str| -> Option<Vec<f32>> {
        arrays
            .iter()
            .position(|(f, _)| f == name)
            .map(|i| std::mem::take(&mut arrays[i].1))
    };

    let meta = &header.meta;
    match header.kind.as_str() {
        "tokens" => {
            let tokens = Matrix::new(n, d, take("token_effects").unwrap())?;
            let mut rec = TokenEffectRecord::new(
                meta_string(meta, "image_id").map_err(schema)?,
                tokens,
                take("ablation_bias").unwrap(),
                take("global_embedding").unwrap(),
            )?;
            rec.group_tag = meta_opt_string(meta, "group_tag").map_err(schema)?;
            if let Some(r) = take("direct_residual") {
                rec = rec.with_residual(r)?;
            }
            Ok(CfePayload::Tokens(rec))
        }
        "classes" => {
            let names = meta_strings(meta, "class_names").map_err(schema)?.ok_or_else(|| schema("missing meta `class_names`".into()))?;
            if names.len() != n {
                return Err(CfError::DimensionMismatch {
                    expected: n,
                    found: names.len(),
                });
            }
            Ok(CfePayload::Classes(ClassDictionary::new(
                names,
                Matrix::new(n, d, take("embeddings").unwrap())?,
            )?))
        }
        "pool" => {
            let kind: SourceKind = meta_string(meta, "source_kind")
                .map_err(schema)?
                .parse()
                .map_err(|e: CfError| schema(e.to_string()))?;
            let build = if relax_units { ContextPool::new_relaxed } else { ContextPool::new };
            Ok(CfePayload::Pool(build(
                Matrix::new(n, d, take("embeddings").unwrap())?,
                kind,
                meta_strings(meta, "category_tags").map_err(schema)?,
                meta_strings(meta, "origin_ids").map_err(schema)?,
            )?))
        }
        "raw" => {
            let (l, h) = raw_shape.unwrap();
            let mut raw = RawContributionTensor::new(
                meta_string(meta, "image_id").map_err(schema)?,
                l,
                h,
                n,
                d,
                take("contributions").unwrap(),
                take("cls_direct").unwrap(),
                take("mlp_direct").unwrap(),
            )?;
            raw.group_tag = meta_opt_string(meta, "group_tag").map_err(schema)?;
            Ok(CfePayload::Raw(raw))
        }
        _ => unreachable!(),
    }
}

fn meta_usize(meta: &Map<String, Value>, key: &str) -> std::result::Result<usize, String> {
    meta.get(key)
        .and_then(Value::as_u64)
        .map(|v| v as usize)
        .ok_or_else(|| format!("meta `{key}` must be a non-negative integer"))
}

fn meta_string(meta: &Map<String, Value>, key: &str) -> std::result::Result<String, String> {
    meta.get(key)
        .and_then(Value::as_str)
        .map(str::to_owned)
        .ok_or_else(|| format!("meta `{key}` must be a string"))
}

fn meta_opt_string(meta: &Map<String, Value>, key: &str) -> std::result::Result<Option<String>, String> {
    match meta.get(key) {
        None | Some(Value::Null) => Ok(None),
        Some(Value::String(s)) => Ok(Some(s.clone())),
        Some(_) => Err(format!("meta `{key}` must be a string")),
    }
}

fn meta_strings(meta: &Map<String, Value>, key: &str) -> std::result::Result<Option<Vec<String>>, String> {
    match meta.get(key) {
        None | Some(Value::Null) => Ok(None),
        Some(Value::Array(items)) => items
            .iter()
            .map(|v| v.as_str().map(str::to_owned))
            .collect::<Option<Vec<_>>>()
            .map(Some)
            .ok_or_else(|| format!("meta `{key}` must be an array of strings")),
        Some(_) => Err(format!("meta `{key}` must be an array of strings")),
    }
}
