use std::fs;

use cfcal_core::cfe::{encode, write_cfe};
use cfcal_core::synth::{self, generate_dataset, FactorSpec, GroupSchema};
use cfcal_core::SourceKind;
use rayon::prelude::*;

use crate::output::write_atomic;
use crate::{CliError, CliResult, SynthArgs, EXIT_OK};

pub fn preset(name: &str, dim: usize, seed: u64) -> CliResult<FactorSpec> {
    let min = 4;
    if dim < min {
        return Err(CliError::config(format!("--dim must be at least {min} for presets")));
    }
    match name {
        "planted-bias" => Ok(synth::planted_bias(dim, seed)),
        "background-only" => Ok(synth::background_only(dim, seed)),
        "orthogonal" => Ok(synth::orthogonal(dim, 2, 2, 0.05, seed)),
        other => Err(CliError::config(format!(
            "--preset: unknown `{other}` (planted-bias, background-only, orthogonal)"
        ))),
    }
}

pub fn run(args: &SynthArgs) -> CliResult<i32> {
    let mut spec = match (&args.spec, &args.preset) {
        (Some(p), _) => {
            let text = fs::read_to_string(p).map_err(|e| CliError::from(e).at(p))?;
            FactorSpec::from_json(&text).map_err(|e| CliError::config(e.to_string()).at(p))?
        }
        (None, Some(name)) => preset(name, args.dim, args.seed.unwrap_or(0))?,
        (None, None) => return Err(CliError::config("one of --spec or --preset is required")),
    };
    if let Some(seed) = args.seed {
        spec.seed = seed;
    }
    if args.n == 0 {
        return Err(CliError::config("--n must be at least 1"));
    }
    let schema = if args.named_groups { GroupSchema::Named } else { GroupSchema::Indexed };
    let data = generate_dataset(&spec, args.n, schema)?;

    let tokens_dir = args.out.join("tokens");
    fs::create_dir_all(&tokens_dir)?;
    data.par_iter().try_for_each(|s| -> CliResult<()> {
        let path = tokens_dir.join(format!("{}.cfe", s.record.image_id));
        write_atomic(&path, &encode(&s.record))
    })?;
    write_cfe(args.out.join("classes.cfe"), &synth::class_dictionary(&spec)?)?;
    if args.pool_size > 0 {
        let pool = synth::planted_pool(&spec, args.pool_size, args.pool_sigma, spec.seed, SourceKind::Virtual)?;
        write_cfe(args.out.join("pool.cfe"), &pool)?;
    }

    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["image_id", "label", "group"])?;
    for s in &data {
        let group = s.record.group_tag.clone().unwrap_or_default();
        w.write_record([s.record.image_id.clone(), s.label.to_string(), group])?;
    }
    let bytes = w.into_inner().map_err(|e| CliError::data(e.to_string()))?;
    write_atomic(&args.out.join("labels.csv"), &bytes)?;
    write_atomic(&args.out.join("spec.json"), serde_json::to_string_pretty(&spec)?.as_bytes())?;

    eprintln!("wrote {} scenes to {}", data.len(), args.out.display());
    Ok(EXIT_OK)
}
