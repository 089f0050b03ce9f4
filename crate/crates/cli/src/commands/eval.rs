use std::collections::HashMap;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use cfcal_core::metrics::{gender_gap, group_accuracy, GroupReport, Outcome};
use cfcal_core::CfError;
use serde::{Deserialize, Serialize};

use crate::output::write_or_stdout;
use crate::{CliError, CliResult, EvalArgs, EXIT_OK};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum GroupScheme {
    Waterbirds,
    Gender,
    UrbanCars,
    Custom,
}

impl GroupScheme {
    pub fn allowed(self) -> Option<&'static [&'static str]> {
        match self {
            GroupScheme::Waterbirds => Some(&["landbird_land", "landbird_water", "waterbird_land", "waterbird_water"]),
            GroupScheme::Gender => Some(&["female", "male"]),
            GroupScheme::UrbanCars => Some(&["id", "bg", "co_obj"]),
            GroupScheme::Custom => None,
        }
    }
}

impl FromStr for GroupScheme {
    type Err = CliError;

    fn from_str(s: &str) -> CliResult<Self> {
        match s {
            "waterbirds" => Ok(Self::Waterbirds),
            "gender" => Ok(Self::Gender),
            "urbancars" => Ok(Self::UrbanCars),
            "custom" => Ok(Self::Custom),
            other => Err(CliError::config(format!(
                "--groups: unknown scheme `{other}` (waterbirds, gender, urbancars, custom)"
            ))),
        }
    }
}

#[derive(Debug, Deserialize)]
struct PredLine {
    image_id: String,
    predicted_class: usize,
    predicted_label: String,
    #[serde(default)]
    group_tag: Option<String>,
}

#[derive(Debug, Deserialize)]
struct LabelRow {
    image_id: String,
    label: String,
    #[serde(default)]
    group: Option<String>,
}

#[derive(Debug, Serialize)]
pub struct EvalSummary {
    pub scheme: GroupScheme,
    pub records: usize,
    #[serde(flatten)]
    pub report: GroupReport,
}

fn read_predictions(path: &Path) -> CliResult<Vec<PredLine>> {
    let text = fs::read_to_string(path).map_err(|e| CliError::from(e).at(path))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l)
                .map_err(|e| CliError::data(format!("{}:{}: {e}", path.display(), i + 1)))
        })
        .collect()
}

fn read_labels(path: &Path) -> CliResult<HashMap<String, LabelRow>> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| CliError::from(e).at(path))?;
    let mut out = HashMap::new();
    for row in reader.deserialize() {
        let row: LabelRow = row.map_err(|e| CliError::from(e).at(path))?;
        if out.contains_key(&row.image_id) {
            return Err(CliError::data(format!("{}: duplicate image id `{}`", path.display(), row.image_id)));
        }
        out.insert(row.image_id.clone(), row);
    }
    Ok(out)
}

/// Joins predictions with labels; a label matches the class index or name.
pub fn outcomes(preds_path: &Path, labels_path: &Path) -> CliResult<Vec<Outcome>> {
    let preds = read_predictions(preds_path)?;
    let mut labels = read_labels(labels_path)?;
    let mut out = Vec::with_capacity(preds.len());
    for p in preds {
        let row = labels
            .remove(&p.image_id)
            .ok_or_else(|| CliError::data(format!("no label for `{}`", p.image_id)))?;
        let group = row
            .group
            .filter(|g| !g.is_empty())
            .or(p.group_tag)
            .ok_or_else(|| CliError::data(format!("no group for `{}`", p.image_id)))?;
        let correct = row.label == p.predicted_label || row.label.parse::<usize>() == Ok(p.predicted_class);
        out.push(Outcome { group, correct });
    }
    if !labels.is_empty() {
        log::warn!("{} labels have no prediction", labels.len());
    }
    Ok(out)
}

pub fn evaluate(outcomes: &[Outcome], scheme: GroupScheme) -> CliResult<GroupReport> {
    if let Some(allowed) = scheme.allowed() {
        if let Some(o) = outcomes.iter().find(|o| !allowed.contains(&o.group.as_str())) {
            return Err(CfError::WrongGroupSchema(format!(
                "group `{}` is not one of {allowed:?}",
                o.group
            ))
            .into());
        }
    }
    let mut report = group_accuracy(outcomes)?;
    if scheme == GroupScheme::Gender {
        report.gap = Some(gender_gap(&report)?);
    }
    Ok(report)
}

pub fn run(args: &EvalArgs) -> CliResult<i32> {
    let scheme: GroupScheme = args.groups.parse()?;
    let outcomes = outcomes(&args.pred, &args.labels)?;
    let report = evaluate(&outcomes, scheme)?;

    if let Some(path) = &args.groups_csv {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["group", "correct", "total", "accuracy"])?;
        for (g, c) in &report.per_group_counts {
            w.write_record([g.clone(), c.correct.to_string(), c.total.to_string(), c.accuracy().to_string()])?;
        }
        let bytes = w.into_inner().map_err(|e| CliError::data(e.to_string()))?;
        crate::output::write_atomic(path, &bytes)?;
    }

    let summary = EvalSummary {
        scheme,
        records: outcomes.len(),
        report,
    };
    let mut text = serde_json::to_string_pretty(&summary)?;
    text.push('\n');
    write_or_stdout(args.out.as_deref(), text.as_bytes())?;
    Ok(EXIT_OK)
}
