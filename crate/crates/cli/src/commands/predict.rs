use std::path::{Path, PathBuf};
use std::time::Instant;

use cfcal_core::estimate::{background_weights, object_weights, token_class_probs};
use cfcal_core::pool::{load_pool, PoolDiagnostics};
use cfcal_core::token_effects::{check_reconstruction, reconstruction_error, DEFAULT_RECONSTRUCTION_TOLERANCE};
use cfcal_core::{CalibrationConfig, Calibrator, ClassDictionary, Strategies, TokenEffectRecord};
use serde::Serialize;

use crate::inputs::{effective_config, expand_paths, load_classes, load_records};
use crate::output::write_atomic;
use crate::{CliError, CliResult, PredictArgs, EXIT_OK};

#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub config: CalibrationConfig,
    pub variant: String,
    pub tokens: Vec<PathBuf>,
    pub classes: PathBuf,
    pub pools: Vec<PathBuf>,
    pub pool_diagnostics: Vec<PoolDiagnostics>,
    pub batch_size: Option<usize>,
    pub strict_reconstruction: bool,
    pub records: usize,
    pub out: PathBuf,
    pub weights_csv: Option<PathBuf>,
}

fn manifest_path(args: &PredictArgs) -> PathBuf {
    args.manifest.clone().unwrap_or_else(|| {
        let mut name = args.out.file_name().unwrap_or_default().to_os_string();
        name.push(".manifest.json");
        args.out.with_file_name(name)
    })
}

fn check_records(records: &[TokenEffectRecord], strict: bool) -> CliResult<()> {
    for r in records {
        if strict {
            check_reconstruction(r, DEFAULT_RECONSTRUCTION_TOLERANCE)?;
        } else {
            let err = reconstruction_error(r);
            if err > DEFAULT_RECONSTRUCTION_TOLERANCE {
                log::warn!("{}: reconstruction error {err:.3e}", r.image_id);
            }
        }
    }
    Ok(())
}

fn weights_csv(
    path: &Path,
    records: &[TokenEffectRecord],
    classes: &ClassDictionary,
    config: &CalibrationConfig,
    strategies: &Strategies,
) -> CliResult<()> {
    let mode = strategies.weighting.get(&config.weight_mode)?;
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["image_id".to_string(), "token_index".into(), "p_bg".into(), "w_z".into()];
    header.extend(classes.names().iter().map(|n| format!("w_x_{n}")));
    w.write_record(&header)?;

    let mut sorted: Vec<&TokenEffectRecord> = records.iter().collect();
    sorted.sort_by(|a, b| a.image_id.cmp(&b.image_id));
    for r in sorted {
        let probs = token_class_probs(r, classes, config.logit_scale)?;
        let bg = background_weights(&probs, mode.as_ref(), config.tau_bg);
        let obj = (0..classes.len())
            .map(|c| object_weights(&probs, c, mode.as_ref(), config.tau_bg))
            .collect::<Result<Vec<_>, _>>()?;
        for j in 0..r.n_tokens() {
            let mut row = vec![
                r.image_id.clone(),
                j.to_string(),
                probs.background_prob(j).to_string(),
                bg.weights[j].to_string(),
            ];
            row.extend(obj.iter().map(|o| o.weights[j].to_string()));
            w.write_record(&row)?;
        }
    }
    let bytes = w.into_inner().map_err(|e| CliError::data(e.to_string()))?;
    write_atomic(path, &bytes)
}

pub fn run(args: &PredictArgs) -> CliResult<i32> {
    let start = Instant::now();
    let config = effective_config(&args.overrides)?;
    let strategies = Strategies::builtin();
    // fail on a bad variant before touching any data
    strategies.sources.get(&args.variant)?;
    if args.variant == "none" && !args.pools.is_empty() {
        log::warn!("variant `none` ignores --pool inputs");
    }
    if args.batch_size == Some(0) {
        return Err(CliError::config("--batch-size must be at least 1"));
    }

    let classes = load_classes(&args.classes)?;
    let records = load_records(&args.tokens)?;
    check_records(&records, args.strict)?;

    let mut pools = Vec::new();
    let mut pool_diagnostics = Vec::new();
    for p in &args.pools {
        let (pool, diag) = load_pool(p).map_err(|e| CliError::from(e).at(p))?;
        pools.push(pool);
        pool_diagnostics.push(diag);
    }

    let calibrator = Calibrator::builder(classes.clone(), config.clone())
        .variant(args.variant.as_str())
        .pools(pools)
        .batch(&records)
        .batch_size(args.batch_size)
        .build(&strategies)?;
    let predictions = calibrator.run_batch(&records)?;

    let mut body = String::new();
    for p in &predictions {
        body.push_str(&p.to_json_line(args.emit_components));
        body.push('\n');
    }
    write_atomic(&args.out, body.as_bytes())?;
    if let Some(path) = &args.weights_csv {
        weights_csv(path, &records, &classes, &config, &strategies)?;
    }

    let manifest = RunManifest {
        config,
        variant: args.variant.clone(),
        tokens: expand_paths(&args.tokens)?,
        classes: args.classes.clone(),
        pools: args.pools.clone(),
        pool_diagnostics,
        batch_size: args.batch_size,
        strict_reconstruction: args.strict,
        records: predictions.len(),
        out: args.out.clone(),
        weights_csv: args.weights_csv.clone(),
    };
    let mut text = serde_json::to_string_pretty(&manifest)?;
    text.push('\n');
    write_atomic(&manifest_path(args), text.as_bytes())?;

    eprintln!(
        "predicted {} images, {} classes, variant {} in {:.1} ms",
        predictions.len(),
        classes.len(),
        args.variant,
        start.elapsed().as_secs_f64() * 1e3
    );
    Ok(EXIT_OK)
}
