//! Loading CFE inputs and the effective configuration.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use cfcal_core::cfe::{read_cfe, CfePayload};
use cfcal_core::token_effects::{aggregate_batch, compute_ablation_bias, RawContributionTensor};
use cfcal_core::{CalibrationConfig, CfError, ClassDictionary, TokenEffectRecord};

use crate::{CliError, CliResult, ConfigOverrides};

/// Files as given; directories expand to their `*.cfe` entries, sorted.
pub fn expand_paths(paths: &[PathBuf]) -> CliResult<Vec<PathBuf>> {
    let mut out = Vec::new();
    for p in paths {
        if p.is_dir() {
            let mut entries: Vec<PathBuf> = fs::read_dir(p)
                .map_err(|e| CliError::from(e).at(p))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|e| e.extension().is_some_and(|x| x == "cfe"))
                .collect();
            entries.sort();
            if entries.is_empty() {
                log::warn!("{}: no .cfe files", p.display());
            }
            out.extend(entries);
        } else {
            out.push(p.clone());
        }
    }
    Ok(out)
}

pub fn read_payload(path: &Path) -> CliResult<CfePayload> {
    read_cfe(path).map_err(|e| CliError::from(e).at(path))
}

/// Token records from `tokens` files, plus `raw` files aggregated with
/// the ablation bias of the raw batch.
pub fn load_records(paths: &[PathBuf]) -> CliResult<Vec<TokenEffectRecord>> {
    let files = expand_paths(paths)?;
    if files.is_empty() {
        return Err(CliError::data("no token inputs"));
    }
    let mut records = Vec::new();
    let mut raws: Vec<RawContributionTensor> = Vec::new();
    for f in &files {
        match read_payload(f)? {
            CfePayload::Tokens(r) => records.push(r),
            CfePayload::Raw(r) => raws.push(r),
            other => {
                return Err(CliError::from(CfError::UnexpectedKind {
                    wanted: "tokens",
                    found: other.kind().to_string(),
                })
                .at(f))
            }
        }
    }
    if !raws.is_empty() {
        let bias = compute_ablation_bias(&raws)?;
        records.extend(aggregate_batch(&raws, &bias)?);
    }
    let mut seen = HashSet::new();
    for r in &records {
        if !seen.insert(r.image_id.as_str()) {
            return Err(CliError::data(format!("duplicate image id `{}`", r.image_id)));
        }
    }
    Ok(records)
}

pub fn load_classes(path: &Path) -> CliResult<ClassDictionary> {
    match read_payload(path)? {
        CfePayload::Classes(c) => Ok(c),
        other => Err(CliError::from(CfError::UnexpectedKind {
            wanted: "classes",
            found: other.kind().to_string(),
        })
        .at(path)),
    }
}

/// Reads a config file; any problem with it is a config error.
pub fn read_config(path: &Path) -> CliResult<CalibrationConfig> {
    let text = fs::read_to_string(path).map_err(|e| CliError::from(e).at(path))?;
    CalibrationConfig::from_json(&text).map_err(|e| CliError::config(e.to_string()).at(path))
}

/// Config file values with flag overrides applied, validated.
pub fn effective_config(o: &ConfigOverrides) -> CliResult<CalibrationConfig> {
    let mut cfg = match &o.config {
        Some(p) => read_config(p)?,
        None => CalibrationConfig::default(),
    };
    macro_rules! set {
        ($($field:ident),*) => {
            $(if let Some(v) = &o.$field { cfg.$field = v.clone(); })*
        };
    }
    set!(alpha, lambda_fuse, lambda_hat, tau_bg, logit_scale, num_contexts, top_k, weight_mode, pool_combiner, seed);
    if let Some(s) = &o.topk_source {
        cfg.topk_source = s.parse()?;
    }
    cfg.validate()?;
    Ok(cfg)
}
