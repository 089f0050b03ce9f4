use std::path::Path;

use cfcal_core::metrics::pmi_matrix;

use crate::output::write_or_stdout;
use crate::{CliError, CliResult, PmiArgs, EXIT_OK};

/// Row names, column names and counts of a labelled count table.
pub fn read_counts(path: &Path) -> CliResult<(Vec<String>, Vec<String>, Vec<Vec<f64>>)> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| CliError::from(e).at(path))?;
    let columns: Vec<String> = reader.headers()?.iter().skip(1).map(str::to_string).collect();
    let mut rows = Vec::new();
    let mut counts = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| CliError::from(e).at(path))?;
        let mut fields = rec.iter();
        rows.push(fields.next().unwrap_or_default().to_string());
        let values = fields
            .map(|v| {
                v.trim()
                    .parse::<f64>()
                    .map_err(|_| CliError::data(format!("{}: row {}: `{v}` is not a count", path.display(), i + 1)))
            })
            .collect::<CliResult<Vec<f64>>>()?;
        counts.push(values);
    }
    Ok((rows, columns, counts))
}

pub fn run(args: &PmiArgs) -> CliResult<i32> {
    if !(args.smoothing >= 0.0) {
        return Err(CliError::config("--smoothing must be >= 0"));
    }
    let (rows, columns, counts) = read_counts(&args.counts)?;
    let pmi = pmi_matrix(&counts, args.smoothing)?;

    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec![String::new()];
    header.extend(columns);
    w.write_record(&header)?;
    for (name, values) in rows.iter().zip(&pmi) {
        let mut rec = vec![name.clone()];
        rec.extend(values.iter().map(|v| if v.is_nan() { "NaN".to_string() } else { v.to_string() }));
        w.write_record(&rec)?;
    }
    let bytes = w.into_inner().map_err(|e| CliError::data(e.to_string()))?;
    write_or_stdout(args.out.as_deref(), &bytes)?;
    Ok(EXIT_OK)
}
