//! Paired survival / longitudinal tables: ingestion, validation, transforms,
//! landmarking and the Kaplan–Meier estimator.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::fmt;
use std::io::{Read, Write};
use std::path::Path;

use log::warn;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::stepfn::StepFunction;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{table} table: missing mandatory column `{column}`")]
    MissingColumn { table: &'static str, column: String },
    #[error("{table} table, line {line}: column `{column}` has non-numeric value `{value}`")]
    NonNumeric {
        table: &'static str,
        line: u64,
        column: String,
        value: String,
    },
    #[error("{table} table, line {line}: column `{column}` is empty")]
    MissingValue {
        table: &'static str,
        line: u64,
        column: String,
    },
    #[error("survival table, line {line}: event value `{value}` is not 0 or 1")]
    InvalidEvent { line: u64, value: String },
    #[error("{table} table, line {line}: `{column}` = {value} is negative")]
    NegativeTime {
        table: &'static str,
        line: u64,
        column: String,
        value: f64,
    },
    #[error("survival table, line {line}: duplicate id `{id}`")]
    DuplicateId { line: u64, id: String },
    #[error("longitudinal table, line {line}: id `{id}` is absent from the survival table")]
    UnknownId { line: u64, id: String },
    #[error("unknown longitudinal covariate `{0}`")]
    UnknownCovariate(String),
    #[error("variable `{variable}`, longitudinal row {row}: value {value} is not positive")]
    NonPositive {
        variable: String,
        row: usize,
        value: f64,
    },
    #[error("landmark time must be positive, got {0}")]
    InvalidLandmark(f64),
    #[error("dataset is already landmarked at {existing}, cannot landmark at {requested}")]
    AlreadyLandmarked { existing: f64, requested: f64 },
    #[error("landmark {0} is not below any survival time: empty risk set")]
    EmptyRiskSet(f64),
    #[error("kaplan-meier input is empty")]
    EmptyInput,
    #[error("length mismatch: {0} times vs {1} event indicators")]
    LengthMismatch(usize, usize),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

/// Opaque subject identifier.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SubjectId(pub String);

impl fmt::Display for SubjectId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for SubjectId {
    fn from(s: &str) -> Self {
        SubjectId(s.to_string())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum BaselineValue {
    Numeric(f64),
    Level(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum BaselineKind {
    Numeric,
    /// Levels sorted alphabetically; the first is the reference level.
    Categorical { levels: Vec<String> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineColumn {
    pub name: String,
    pub kind: BaselineKind,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SurvivalRecord {
    pub id: SubjectId,
    pub time: f64,
    pub event: bool,
    /// Aligned with [`Dataset::baseline_columns`].
    pub baseline: Vec<BaselineValue>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LongitudinalRecord {
    pub id: SubjectId,
    pub fuptime: f64,
    /// Aligned with [`Dataset::covariate_names`]; `None` is a missing cell.
    pub values: Vec<Option<f64>>,
    /// Aligned with [`Dataset::regressor_names`].
    pub regressors: Vec<f64>,
}

/// Column-role mapping for the two input tables.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Schema {
    pub id: String,
    pub time: String,
    pub event: String,
    pub fuptime: String,
    /// Baseline covariates; `None` means every remaining survival column.
    pub baseline: Option<Vec<String>>,
    /// Longitudinal covariates; `None` means every remaining longitudinal
    /// column that is not a regressor.
    pub longitudinal: Option<Vec<String>>,
    /// Longitudinal columns used to build mixed-model design rows.
    pub regressors: Vec<String>,
    /// Baseline columns forced to be categorical even if they look numeric.
    pub categorical: Vec<String>,
}

impl Default for Schema {
    fn default() -> Self {
        Self {
            id: "id".into(),
            time: "time".into(),
            event: "event".into(),
            fuptime: "fuptime".into(),
            baseline: None,
            longitudinal: None,
            regressors: Vec::new(),
            categorical: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub survival: Vec<SurvivalRecord>,
    pub longitudinal: Vec<LongitudinalRecord>,
    pub baseline_columns: Vec<BaselineColumn>,
    pub covariate_names: Vec<String>,
    pub regressor_names: Vec<String>,
    pub schema: Schema,
    pub landmark: Option<f64>,
}

fn header_index(
    headers: &csv::StringRecord,
    name: &str,
    table: &'static str,
) -> Result<usize, DataError> {
    headers
        .iter()
        .position(|h| h == name)
        .ok_or_else(|| DataError::MissingColumn {
            table,
            column: name.to_string(),
        })
}

fn parse_f64(
    raw: &str,
    table: &'static str,
    line: u64,
    column: &str,
) -> Result<Option<f64>, DataError> {
    let s = raw.trim();
    if s.is_empty() || s == "NA" {
        return Ok(None);
    }
    match s.parse::<f64>() {
        Ok(v) if v.is_finite() => Ok(Some(v)),
        _ => Err(DataError::NonNumeric {
            table,
            line,
            column: column.to_string(),
            value: s.to_string(),
        }),
    }
}

fn required_f64(
    raw: &str,
    table: &'static str,
    line: u64,
    column: &str,
) -> Result<f64, DataError> {
    parse_f64(raw, table, line, column)?.ok_or_else(|| DataError::MissingValue {
        table,
        line,
        column: column.to_string(),
    })
}

fn line_of(record: &csv::StringRecord) -> u64 {
    record.position().map(|p| p.line()).unwrap_or(0)
}

fn reader<R: Read>(source: R) -> csv::Reader<R> {
    csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(source)
}

/// Raw baseline cells of a table, before numeric/categorical typing.
struct RawBaseline {
    columns: Vec<String>,
    rows: Vec<(u64, Vec<String>)>,
}

fn type_baseline(
    raw: &RawBaseline,
    schema: &Schema,
    table: &'static str,
) -> Result<(Vec<BaselineColumn>, Vec<Vec<BaselineValue>>), DataError> {
    let mut columns = Vec::with_capacity(raw.columns.len());
    for (c, name) in raw.columns.iter().enumerate() {
        let forced = schema.categorical.iter().any(|n| n == name);
        let numeric = !forced
            && raw
                .rows
                .iter()
                .all(|(_, cells)| cells[c].is_empty() || cells[c].parse::<f64>().is_ok());
        let kind = if numeric {
            BaselineKind::Numeric
        } else {
            let levels: BTreeSet<String> = raw
                .rows
                .iter()
                .filter(|(_, cells)| !cells[c].is_empty())
                .map(|(_, cells)| cells[c].clone())
                .collect();
            BaselineKind::Categorical {
                levels: levels.into_iter().collect(),
            }
        };
        columns.push(BaselineColumn {
            name: name.clone(),
            kind,
        });
    }
    let mut values = Vec::with_capacity(raw.rows.len());
    for (line, cells) in &raw.rows {
        let mut row = Vec::with_capacity(columns.len());
        for (col, cell) in columns.iter().zip(cells) {
            if cell.is_empty() {
                return Err(DataError::MissingValue {
                    table,
                    line: *line,
                    column: col.name.clone(),
                });
            }
            row.push(match col.kind {
                BaselineKind::Numeric => {
                    BaselineValue::Numeric(required_f64(cell, table, *line, &col.name)?)
                }
                BaselineKind::Categorical { .. } => BaselineValue::Level(cell.clone()),
            });
        }
        values.push(row);
    }
    Ok((columns, values))
}

/// Parses and validates the survival and longitudinal tables.
pub fn load_dataset<S: Read, L: Read>(
    survival_source: S,
    longitudinal_source: L,
    schema: &Schema,
) -> Result<Dataset, DataError> {
    const ST: &str = "survival";
    const LT: &str = "longitudinal";

    let mut rdr = reader(survival_source);
    let headers = rdr.headers()?.clone();
    let id_i = header_index(&headers, &schema.id, ST)?;
    let time_i = header_index(&headers, &schema.time, ST)?;
    let event_i = header_index(&headers, &schema.event, ST)?;
    let baseline_names: Vec<String> = match &schema.baseline {
        Some(names) => names.clone(),
        None => headers
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != id_i && *i != time_i && *i != event_i)
            .map(|(_, h)| h.to_string())
            .collect(),
    };
    let baseline_idx = baseline_names
        .iter()
        .map(|n| header_index(&headers, n, ST))
        .collect::<Result<Vec<_>, _>>()?;

    let mut core = Vec::new();
    let mut raw = RawBaseline {
        columns: baseline_names,
        rows: Vec::new(),
    };
    let mut seen = HashSet::new();
    for rec in rdr.records() {
        let rec = rec?;
        let line = line_of(&rec);
        let id = rec.get(id_i).unwrap_or("").to_string();
        if id.is_empty() {
            return Err(DataError::MissingValue {
                table: ST,
                line,
                column: schema.id.clone(),
            });
        }
        if !seen.insert(id.clone()) {
            return Err(DataError::DuplicateId { line, id });
        }
        let time = required_f64(rec.get(time_i).unwrap_or(""), ST, line, &schema.time)?;
        if time < 0.0 {
            return Err(DataError::NegativeTime {
                table: ST,
                line,
                column: schema.time.clone(),
                value: time,
            });
        }
        let ev_raw = rec.get(event_i).unwrap_or("").trim();
        let event = match ev_raw.parse::<f64>() {
            Ok(v) if v == 0.0 => false,
            Ok(v) if v == 1.0 => true,
            _ => {
                return Err(DataError::InvalidEvent {
                    line,
                    value: ev_raw.to_string(),
                })
            }
        };
        core.push((SubjectId(id), time, event));
        raw.rows.push((
            line,
            baseline_idx
                .iter()
                .map(|&i| rec.get(i).unwrap_or("").trim().to_string())
                .collect(),
        ));
    }
    let (baseline_columns, baseline_values) = type_baseline(&raw, schema, ST)?;
    let survival: Vec<SurvivalRecord> = core
        .into_iter()
        .zip(baseline_values)
        .map(|((id, time, event), baseline)| SurvivalRecord {
            id,
            time,
            event,
            baseline,
        })
        .collect();

    let mut rdr = reader(longitudinal_source);
    let headers = rdr.headers()?.clone();
    let lid_i = header_index(&headers, &schema.id, LT)?;
    let fup_i = header_index(&headers, &schema.fuptime, LT)?;
    let regressor_names: Vec<String> = schema
        .regressors
        .iter()
        .filter(|r| **r != schema.fuptime)
        .cloned()
        .collect();
    let reg_idx = regressor_names
        .iter()
        .map(|n| header_index(&headers, n, LT))
        .collect::<Result<Vec<_>, _>>()?;
    let covariate_names: Vec<String> = match &schema.longitudinal {
        Some(names) => names.clone(),
        None => headers
            .iter()
            .enumerate()
            .filter(|(i, h)| *i != lid_i && *i != fup_i && !regressor_names.iter().any(|r| r == h))
            .map(|(_, h)| h.to_string())
            .collect(),
    };
    let cov_idx = covariate_names
        .iter()
        .map(|n| header_index(&headers, n, LT))
        .collect::<Result<Vec<_>, _>>()?;

    let mut longitudinal = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let line = line_of(&rec);
        let id = rec.get(lid_i).unwrap_or("").to_string();
        if !seen.contains(&id) {
            return Err(DataError::UnknownId { line, id });
        }
        let fuptime = required_f64(rec.get(fup_i).unwrap_or(""), LT, line, &schema.fuptime)?;
        if fuptime < 0.0 {
            return Err(DataError::NegativeTime {
                table: LT,
                line,
                column: schema.fuptime.clone(),
                value: fuptime,
            });
        }
        let values = cov_idx
            .iter()
            .zip(&covariate_names)
            .map(|(&i, n)| parse_f64(rec.get(i).unwrap_or(""), LT, line, n))
            .collect::<Result<Vec<_>, _>>()?;
        let regressors = reg_idx
            .iter()
            .zip(&regressor_names)
            .map(|(&i, n)| required_f64(rec.get(i).unwrap_or(""), LT, line, n))
            .collect::<Result<Vec<_>, _>>()?;
        longitudinal.push(LongitudinalRecord {
            id: SubjectId(id),
            fuptime,
            values,
            regressors,
        });
    }

    Ok(Dataset {
        survival,
        longitudinal,
        baseline_columns,
        covariate_names,
        regressor_names,
        schema: schema.clone(),
        landmark: None,
    })
}

pub fn load_dataset_from_paths(
    survival: &Path,
    longitudinal: &Path,
    schema: &Schema,
) -> Result<Dataset, DataError> {
    load_dataset(
        std::fs::File::open(survival)?,
        std::fs::File::open(longitudinal)?,
        schema,
    )
}

/// Baseline rows for subjects without survival information (prediction input).
#[derive(Debug, Clone, PartialEq)]
pub struct BaselineRow {
    pub id: SubjectId,
    pub values: Vec<BaselineValue>,
}

/// Reads a baseline-only table typed against the training columns.
pub fn load_baseline_rows<R: Read>(
    source: R,
    schema: &Schema,
    columns: &[BaselineColumn],
) -> Result<Vec<BaselineRow>, DataError> {
    const T: &str = "baseline";
    let mut rdr = reader(source);
    let headers = rdr.headers()?.clone();
    let id_i = header_index(&headers, &schema.id, T)?;
    let idx = columns
        .iter()
        .map(|c| header_index(&headers, &c.name, T))
        .collect::<Result<Vec<_>, _>>()?;
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let line = line_of(&rec);
        let mut values = Vec::with_capacity(columns.len());
        for (col, &i) in columns.iter().zip(&idx) {
            let cell = rec.get(i).unwrap_or("").trim();
            values.push(match col.kind {
                BaselineKind::Numeric => BaselineValue::Numeric(required_f64(cell, T, line, &col.name)?),
                BaselineKind::Categorical { .. } => {
                    if cell.is_empty() {
                        return Err(DataError::MissingValue {
                            table: T,
                            line,
                            column: col.name.clone(),
                        });
                    }
                    BaselineValue::Level(cell.to_string())
                }
            });
        }
        out.push(BaselineRow {
            id: SubjectId(rec.get(id_i).unwrap_or("").to_string()),
            values,
        });
    }
    Ok(out)
}

/// Reads longitudinal rows aligned with an existing dataset's covariate and
/// regressor layout. No referential check against a survival table is made.
pub fn load_longitudinal_rows<R: Read>(
    source: R,
    template: &Dataset,
) -> Result<Vec<LongitudinalRecord>, DataError> {
    const T: &str = "longitudinal";
    let schema = &template.schema;
    let mut rdr = reader(source);
    let headers = rdr.headers()?.clone();
    let id_i = header_index(&headers, &schema.id, T)?;
    let fup_i = header_index(&headers, &schema.fuptime, T)?;
    let reg_idx = template
        .regressor_names
        .iter()
        .map(|n| header_index(&headers, n, T))
        .collect::<Result<Vec<_>, _>>()?;
    let cov_idx = template
        .covariate_names
        .iter()
        .map(|n| header_index(&headers, n, T))
        .collect::<Result<Vec<_>, _>>()?;
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let line = line_of(&rec);
        out.push(LongitudinalRecord {
            id: SubjectId(rec.get(id_i).unwrap_or("").to_string()),
            fuptime: required_f64(rec.get(fup_i).unwrap_or(""), T, line, &schema.fuptime)?,
            values: cov_idx
                .iter()
                .zip(&template.covariate_names)
                .map(|(&i, n)| parse_f64(rec.get(i).unwrap_or(""), T, line, n))
                .collect::<Result<_, _>>()?,
            regressors: reg_idx
                .iter()
                .zip(&template.regressor_names)
                .map(|(&i, n)| required_f64(rec.get(i).unwrap_or(""), T, line, n))
                .collect::<Result<_, _>>()?,
        });
    }
    Ok(out)
}

fn fmt_f64(v: f64) -> String {
    format!("{v}")
}

impl Dataset {
    pub fn n_subjects(&self) -> usize {
        self.survival.len()
    }

    pub fn n_events(&self) -> usize {
        self.survival.iter().filter(|r| r.event).count()
    }

    pub fn covariate_index(&self, name: &str) -> Option<usize> {
        self.covariate_names.iter().position(|n| n == name)
    }

    pub fn regressor_index(&self, name: &str) -> Option<usize> {
        self.regressor_names.iter().position(|n| n == name)
    }

    /// Longitudinal row indices grouped by subject, following the order of
    /// the survival table.
    pub fn rows_by_subject(&self) -> Vec<Vec<usize>> {
        let pos: HashMap<&SubjectId, usize> = self
            .survival
            .iter()
            .enumerate()
            .map(|(i, r)| (&r.id, i))
            .collect();
        let mut groups = vec![Vec::new(); self.survival.len()];
        for (j, row) in self.longitudinal.iter().enumerate() {
            if let Some(&i) = pos.get(&row.id) {
                groups[i].push(j);
            }
        }
        groups
    }

    pub fn write_survival_csv<W: Write>(&self, sink: W) -> Result<(), DataError> {
        let mut w = csv::Writer::from_writer(sink);
        let mut header = vec![
            self.schema.id.clone(),
            self.schema.time.clone(),
            self.schema.event.clone(),
        ];
        header.extend(self.baseline_columns.iter().map(|c| c.name.clone()));
        w.write_record(&header)?;
        for r in &self.survival {
            let mut row = vec![
                r.id.0.clone(),
                fmt_f64(r.time),
                if r.event { "1".into() } else { "0".into() },
            ];
            row.extend(r.baseline.iter().map(|v| match v {
                BaselineValue::Numeric(x) => fmt_f64(*x),
                BaselineValue::Level(s) => s.clone(),
            }));
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_longitudinal_csv<W: Write>(&self, sink: W) -> Result<(), DataError> {
        let mut w = csv::Writer::from_writer(sink);
        let mut header = vec![self.schema.id.clone(), self.schema.fuptime.clone()];
        header.extend(self.regressor_names.iter().cloned());
        header.extend(self.covariate_names.iter().cloned());
        w.write_record(&header)?;
        for r in &self.longitudinal {
            let mut row = vec![r.id.0.clone(), fmt_f64(r.fuptime)];
            row.extend(r.regressors.iter().map(|v| fmt_f64(*v)));
            row.extend(
                r.values
                    .iter()
                    .map(|v| v.map(fmt_f64).unwrap_or_default()),
            );
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Schema that reloads the serialized tables into an identical dataset.
    pub fn roundtrip_schema(&self) -> Schema {
        let mut schema = self.schema.clone();
        schema.baseline = Some(self.baseline_columns.iter().map(|c| c.name.clone()).collect());
        schema.longitudinal = Some(self.covariate_names.clone());
        schema.regressors = self.regressor_names.clone();
        schema.categorical = self
            .baseline_columns
            .iter()
            .filter(|c| matches!(c.kind, BaselineKind::Categorical { .. }))
            .map(|c| c.name.clone())
            .collect();
        schema
    }

    /// Replaces each named covariate by its natural logarithm, renaming
    /// `serBilir` to `logSerBilir`.
    pub fn log_transform(&self, variables: &[&str]) -> Result<Dataset, DataError> {
        let mut out = self.clone();
        for &var in variables {
            let c = out
                .covariate_index(var)
                .ok_or_else(|| DataError::UnknownCovariate(var.to_string()))?;
            for (row, rec) in out.longitudinal.iter_mut().enumerate() {
                if let Some(v) = rec.values[c] {
                    if v <= 0.0 {
                        return Err(DataError::NonPositive {
                            variable: var.to_string(),
                            row: row + 1,
                            value: v,
                        });
                    }
                    rec.values[c] = Some(v.ln());
                }
            }
            out.covariate_names[c] = log_name(var);
        }
        if let Some(names) = out.schema.longitudinal.as_mut() {
            *names = out.covariate_names.clone();
        }
        Ok(out)
    }

    /// Keeps subjects with `time > t_l` and their measurements with
    /// `fuptime <= t_l`. Subjects left without any measurement are dropped.
    pub fn apply_landmark(&self, t_l: f64) -> Result<Dataset, DataError> {
        if !(t_l > 0.0) || !t_l.is_finite() {
            return Err(DataError::InvalidLandmark(t_l));
        }
        if let Some(existing) = self.landmark {
            if existing != t_l {
                return Err(DataError::AlreadyLandmarked {
                    existing,
                    requested: t_l,
                });
            }
        }
        let kept: HashSet<&SubjectId> = self
            .survival
            .iter()
            .filter(|r| r.time > t_l)
            .map(|r| &r.id)
            .collect();
        if kept.is_empty() {
            return Err(DataError::EmptyRiskSet(t_l));
        }
        let longitudinal: Vec<LongitudinalRecord> = self
            .longitudinal
            .iter()
            .filter(|r| kept.contains(&r.id) && r.fuptime <= t_l)
            .cloned()
            .collect();
        let measured: HashSet<&SubjectId> = longitudinal.iter().map(|r| &r.id).collect();
        let mut dropped = Vec::new();
        let survival: Vec<SurvivalRecord> = self
            .survival
            .iter()
            .filter(|r| kept.contains(&r.id))
            .filter(|r| {
                let ok = measured.contains(&r.id);
                if !ok {
                    dropped.push(r.id.0.clone());
                }
                ok
            })
            .cloned()
            .collect();
        if !dropped.is_empty() {
            warn!(
                "landmark {t_l}: dropping {} subject(s) with no measurements up to the landmark: {}",
                dropped.len(),
                dropped.join(", ")
            );
        }
        if survival.is_empty() {
            return Err(DataError::EmptyRiskSet(t_l));
        }
        Ok(Dataset {
            survival,
            longitudinal,
            landmark: Some(t_l),
            ..self.clone()
        })
    }

    /// Restricts the dataset to the given subjects (in the given order).
    pub fn subset(&self, ids: &[SubjectId]) -> Dataset {
        let pos: HashMap<&SubjectId, usize> =
            self.survival.iter().enumerate().map(|(i, r)| (&r.id, i)).collect();
        let wanted: HashSet<&SubjectId> = ids.iter().collect();
        Dataset {
            survival: ids
                .iter()
                .filter_map(|id| pos.get(id).map(|&i| self.survival[i].clone()))
                .collect(),
            longitudinal: self
                .longitudinal
                .iter()
                .filter(|r| wanted.contains(&r.id))
                .cloned()
                .collect(),
            ..self.clone()
        }
    }
}

pub fn log_name(var: &str) -> String {
    let mut chars = var.chars();
    match chars.next() {
        Some(first) => format!("log{}{}", first.to_uppercase(), chars.as_str()),
        None => "log".to_string(),
    }
}

/// Product-limit estimate of the survival function. Events at a tied time
/// are removed before censorings, so censored subjects at `t` stay in the
/// risk set for the events at `t`.
pub fn kaplan_meier(times: &[f64], events: &[bool]) -> Result<StepFunction, DataError> {
    if times.len() != events.len() {
        return Err(DataError::LengthMismatch(times.len(), events.len()));
    }
    if times.is_empty() {
        return Err(DataError::EmptyInput);
    }
    let mut order: Vec<usize> = (0..times.len()).collect();
    order.sort_by(|&a, &b| times[a].total_cmp(&times[b]));
    let mut at_risk = times.len();
    let mut surv = 1.0;
    let mut knots = Vec::new();
    let mut values = Vec::new();
    let mut k = 0;
    while k < order.len() {
        let t = times[order[k]];
        let mut deaths = 0usize;
        let mut leaving = 0usize;
        while k < order.len() && times[order[k]] == t {
            if events[order[k]] {
                deaths += 1;
            }
            leaving += 1;
            k += 1;
        }
        if deaths > 0 {
            surv *= 1.0 - deaths as f64 / at_risk as f64;
            knots.push(t);
            values.push(surv);
        }
        at_risk -= leaving;
    }
    Ok(StepFunction::new(knots, values, 1.0))
}
