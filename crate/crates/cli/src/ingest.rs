//! CSV ingestion: one file per group, or a long-format file with a group
//! column. Headers are required, numbers are parsed in the C locale, and
//! missing values are rejected rather than imputed (silent imputation would
//! invalidate the exchangeability assumptions downstream).

use std::path::Path;

use batch_conformal::scores::{Observation, SampleGroup};
use batch_conformal::testing::TwoArmGroup;

/// I/O or parse failure (exit code 2); messages carry line numbers.
pub struct IngestError(pub String);

type Result<T> = std::result::Result<T, IngestError>;

pub struct ColumnSpec {
    pub value_column: String,
    pub feature_columns: Vec<String>,
    pub group_column: String,
    pub arm_column: String,
}

struct Columns {
    value: usize,
    features: Vec<usize>,
    group: Option<usize>,
    arm: Option<usize>,
}

fn open(path: &Path) -> Result<csv::Reader<std::fs::File>> {
    csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| IngestError(format!("{}: {e}", path.display())))
}

fn locate_columns(
    path: &Path,
    reader: &mut csv::Reader<std::fs::File>,
    spec: &ColumnSpec,
    need_group: bool,
    need_arm: bool,
) -> Result<Columns> {
    let headers = reader
        .headers()
        .map_err(|e| IngestError(format!("{}: {e}", path.display())))?
        .clone();
    let find = |name: &str| headers.iter().position(|h| h == name);
    let value = find(&spec.value_column).ok_or_else(|| {
        IngestError(format!(
            "{}: missing value column '{}' (headers: {})",
            path.display(),
            spec.value_column,
            headers.iter().collect::<Vec<_>>().join(", ")
        ))
    })?;
    let mut features = Vec::new();
    for name in &spec.feature_columns {
        features.push(find(name).ok_or_else(|| {
            IngestError(format!("{}: missing feature column '{name}'", path.display()))
        })?);
    }
    let group = if need_group {
        Some(find(&spec.group_column).ok_or_else(|| {
            IngestError(format!(
                "{}: missing group column '{}'",
                path.display(),
                spec.group_column
            ))
        })?)
    } else {
        None
    };
    let arm = if need_arm {
        Some(find(&spec.arm_column).ok_or_else(|| {
            IngestError(format!("{}: missing arm column '{}'", path.display(), spec.arm_column))
        })?)
    } else {
        None
    };
    Ok(Columns {
        value,
        features,
        group,
        arm,
    })
}

fn parse_f64(path: &Path, line: u64, column: &str, raw: &str) -> Result<f64> {
    if raw.is_empty() {
        return Err(IngestError(format!(
            "{}:{line}: missing value in column '{column}'",
            path.display()
        )));
    }
    let value = raw.parse::<f64>().map_err(|_| {
        IngestError(format!(
            "{}:{line}: cannot parse '{raw}' in column '{column}' as a number",
            path.display()
        ))
    })?;
    if !value.is_finite() {
        return Err(IngestError(format!(
            "{}:{line}: non-finite value '{raw}' in column '{column}'",
            path.display()
        )));
    }
    Ok(value)
}

fn record_line(record: &csv::StringRecord) -> u64 {
    record.position().map(|p| p.line()).unwrap_or(0)
}

fn observation(
    path: &Path,
    record: &csv::StringRecord,
    columns: &Columns,
    spec: &ColumnSpec,
) -> Result<Observation> {
    let line = record_line(record);
    let field = |idx: usize, name: &str| -> Result<f64> {
        let raw = record.get(idx).ok_or_else(|| {
            IngestError(format!("{}:{line}: short record", path.display()))
        })?;
        parse_f64(path, line, name, raw)
    };
    let outcome = vec![field(columns.value, &spec.value_column)?];
    let mut features = Vec::with_capacity(columns.features.len());
    for (idx, name) in columns.features.iter().zip(&spec.feature_columns) {
        features.push(field(*idx, name)?);
    }
    Ok(Observation::new(features, outcome))
}

/// Reads one CSV file as a single group; the id is the file stem.
pub fn read_group_file(path: &Path, spec: &ColumnSpec) -> Result<SampleGroup> {
    let mut reader = open(path)?;
    let columns = locate_columns(path, &mut reader, spec, false, false)?;
    let mut observations = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| IngestError(format!("{}: {e}", path.display())))?;
        observations.push(observation(path, &record, &columns, spec)?);
    }
    if observations.is_empty() {
        return Err(IngestError(format!("{}: no data rows", path.display())));
    }
    let id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.display().to_string());
    Ok(SampleGroup::new(id, observations))
}

/// Reads a long-format CSV into groups ordered by first appearance.
pub fn read_long_format(path: &Path, spec: &ColumnSpec) -> Result<Vec<SampleGroup>> {
    let mut reader = open(path)?;
    let columns = locate_columns(path, &mut reader, spec, true, false)?;
    let group_idx = columns.group.expect("group column located");
    let mut order: Vec<String> = Vec::new();
    let mut by_id: std::collections::HashMap<String, Vec<Observation>> =
        std::collections::HashMap::new();
    for record in reader.records() {
        let record = record.map_err(|e| IngestError(format!("{}: {e}", path.display())))?;
        let line = record_line(&record);
        let id = record
            .get(group_idx)
            .ok_or_else(|| IngestError(format!("{}:{line}: short record", path.display())))?
            .to_string();
        if id.is_empty() {
            return Err(IngestError(format!(
                "{}:{line}: empty group identifier",
                path.display()
            )));
        }
        let obs = observation(path, &record, &columns, spec)?;
        if !by_id.contains_key(&id) {
            order.push(id.clone());
        }
        by_id.entry(id).or_default().push(obs);
    }
    if order.is_empty() {
        return Err(IngestError(format!("{}: no data rows", path.display())));
    }
    Ok(order
        .into_iter()
        .map(|id| {
            let observations = by_id.remove(&id).expect("collected");
            SampleGroup::new(id, observations)
        })
        .collect())
}

fn split_arms(path: &Path, group: SampleGroup, arm_rows: &[String]) -> Result<TwoArmGroup> {
    let mut control = Vec::new();
    let mut treated = Vec::new();
    for (obs, arm) in group.observations.iter().zip(arm_rows) {
        match arm.to_ascii_lowercase().as_str() {
            "control" => control.push(obs.outcome[0]),
            "treated" => treated.push(obs.outcome[0]),
            other => {
                return Err(IngestError(format!(
                    "{}: arm value '{other}' is neither 'control' nor 'treated'",
                    path.display()
                )))
            }
        }
    }
    Ok(TwoArmGroup {
        id: group.id,
        control,
        treated,
    })
}

/// Reads one CSV file as a two-arm group (control/treated arm column).
pub fn read_two_arm_file(path: &Path, spec: &ColumnSpec) -> Result<TwoArmGroup> {
    let mut reader = open(path)?;
    let columns = locate_columns(path, &mut reader, spec, false, true)?;
    let arm_idx = columns.arm.expect("arm column located");
    let mut observations = Vec::new();
    let mut arms = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| IngestError(format!("{}: {e}", path.display())))?;
        arms.push(
            record
                .get(arm_idx)
                .ok_or_else(|| {
                    IngestError(format!(
                        "{}:{}: short record",
                        path.display(),
                        record_line(&record)
                    ))
                })?
                .to_string(),
        );
        observations.push(observation(path, &record, &columns, spec)?);
    }
    if observations.is_empty() {
        return Err(IngestError(format!("{}: no data rows", path.display())));
    }
    let id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.display().to_string());
    split_arms(path, SampleGroup::new(id, observations), &arms)
}

/// Reads a long-format CSV with group and arm columns into two-arm groups.
pub fn read_two_arm_long(path: &Path, spec: &ColumnSpec) -> Result<Vec<TwoArmGroup>> {
    let mut reader = open(path)?;
    let columns = locate_columns(path, &mut reader, spec, true, true)?;
    let group_idx = columns.group.expect("group column located");
    let arm_idx = columns.arm.expect("arm column located");
    let mut order: Vec<String> = Vec::new();
    let mut by_id: std::collections::HashMap<String, (Vec<Observation>, Vec<String>)> =
        std::collections::HashMap::new();
    for record in reader.records() {
        let record = record.map_err(|e| IngestError(format!("{}: {e}", path.display())))?;
        let line = record_line(&record);
        let id = record
            .get(group_idx)
            .ok_or_else(|| IngestError(format!("{}:{line}: short record", path.display())))?
            .to_string();
        let arm = record
            .get(arm_idx)
            .ok_or_else(|| IngestError(format!("{}:{line}: short record", path.display())))?
            .to_string();
        let obs = observation(path, &record, &columns, spec)?;
        if !by_id.contains_key(&id) {
            order.push(id.clone());
        }
        let entry = by_id.entry(id).or_default();
        entry.0.push(obs);
        entry.1.push(arm);
    }
    if order.is_empty() {
        return Err(IngestError(format!("{}: no data rows", path.display())));
    }
    order
        .into_iter()
        .map(|id| {
            let (observations, arms) = by_id.remove(&id).expect("collected");
            split_arms(path, SampleGroup::new(id, observations), &arms)
        })
        .collect()
}

/// Reads a single numeric sample (value column only).
pub fn read_values(path: &Path, value_column: &str) -> Result<Vec<f64>> {
    let spec = ColumnSpec {
        value_column: value_column.to_string(),
        feature_columns: Vec::new(),
        group_column: String::new(),
        arm_column: String::new(),
    };
    let group = read_group_file(path, &spec)?;
    Ok(group.observations.iter().map(|o| o.outcome[0]).collect())
}
