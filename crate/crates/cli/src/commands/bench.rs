use cfcal_core::bench::{run_bench, BenchParams};

use crate::{BenchArgs, CliResult, EXIT_OK};

pub fn run(args: &BenchArgs) -> CliResult<i32> {
    let report = run_bench(BenchParams {
        dim: args.dim,
        n_images: args.n,
        m_contexts: args.m,
        classes: args.classes,
        seed: args.seed,
    })?;
    println!("{}", serde_json::to_string_pretty(&report)?);
    eprintln!(
        "{} ops in {:.3} s ({:.1} ns/op)",
        report.ops, report.wall_seconds, report.ns_per_op
    );
    Ok(EXIT_OK)
}
