//! Patient tables with per-cell missingness, and their CSV form.
//!
//! CSV layout: header `id,time,event,<covariates...>`; a missing cell is an
//! empty field or the literal `NA`. Column kinds are inferred from observed
//! cells: all values in {0, 1} is binary, other numbers numeric, anything
//! else categorical with levels in lexicographic order (first level is the
//! reference when dummy-coded).

use crate::error::{CoxError, Result};
use crate::survival::SurvivalData;
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use std::io::{Read, Write};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum ColumnKind {
    Numeric,
    Binary,
    /// Values are level indices; dummy columns are named after levels `1..`.
    Categorical(Vec<String>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct RawColumn {
    pub name: String,
    pub kind: ColumnKind,
    pub values: Vec<Option<f64>>,
}

impl RawColumn {
    pub fn observed(&self) -> impl Iterator<Item = f64> + '_ {
        self.values.iter().flatten().copied()
    }

    pub fn n_missing(&self) -> usize {
        self.values.iter().filter(|v| v.is_none()).count()
    }
}

/// Covariates may be missing; outcomes never are.
#[derive(Debug, Clone, PartialEq)]
pub struct RawDataset {
    pub ids: Vec<String>,
    pub times: Vec<f64>,
    pub events: Vec<bool>,
    pub columns: Vec<RawColumn>,
}

impl RawDataset {
    pub fn new(ids: Vec<String>, times: Vec<f64>, events: Vec<bool>, columns: Vec<RawColumn>) -> Result<Self> {
        let n = times.len();
        if ids.len() != n || events.len() != n {
            return Err(CoxError::DimensionMismatch { expected: n, found: ids.len().min(events.len()) });
        }
        if let Some(t) = times.iter().find(|t| !(t.is_finite() && **t > 0.0)) {
            return Err(CoxError::InvalidData(format!("survival time {t} is not strictly positive")));
        }
        for col in &columns {
            if col.values.len() != n {
                return Err(CoxError::InvalidData(format!(
                    "column {} has {} values for {n} patients",
                    col.name,
                    col.values.len()
                )));
            }
            match &col.kind {
                ColumnKind::Binary => {
                    if col.observed().any(|v| v != 0.0 && v != 1.0) {
                        return Err(CoxError::InvalidData(format!("binary column {} holds non 0/1 values", col.name)));
                    }
                }
                ColumnKind::Categorical(levels) => {
                    let mut seen = vec![false; levels.len()];
                    for v in col.observed() {
                        let k = v as usize;
                        if v < 0.0 || v.fract() != 0.0 || k >= levels.len() {
                            return Err(CoxError::InvalidData(format!("bad level index {v} in {}", col.name)));
                        }
                        seen[k] = true;
                    }
                    if let Some(k) = seen.iter().position(|s| !s) {
                        return Err(CoxError::InvalidData(format!(
                            "level {} of {} is never observed",
                            levels[k], col.name
                        )));
                    }
                }
                ColumnKind::Numeric => {
                    if col.observed().any(|v| !v.is_finite()) {
                        return Err(CoxError::InvalidData(format!("non-finite value in {}", col.name)));
                    }
                }
            }
        }
        Ok(Self { ids, times, events, columns })
    }

    pub fn n(&self) -> usize {
        self.times.len()
    }

    pub fn column(&self, name: &str) -> Option<&RawColumn> {
        self.columns.iter().find(|c| c.name == name)
    }

    pub fn n_missing(&self) -> usize {
        self.columns.iter().map(RawColumn::n_missing).sum()
    }

    pub fn missing_per_patient(&self) -> Vec<usize> {
        (0..self.n()).map(|i| self.columns.iter().filter(|c| c.values[i].is_none()).count()).collect()
    }

    /// `(column, row)` of every missing cell, column-major.
    pub fn missing_cells(&self) -> Vec<(usize, usize)> {
        let mut cells = Vec::new();
        for (c, col) in self.columns.iter().enumerate() {
            for (i, v) in col.values.iter().enumerate() {
                if v.is_none() {
                    cells.push((c, i));
                }
            }
        }
        cells
    }

    pub fn select_rows(&self, rows: &[usize]) -> Result<Self> {
        let columns = self
            .columns
            .iter()
            .map(|c| RawColumn {
                name: c.name.clone(),
                kind: c.kind.clone(),
                values: rows.iter().map(|&i| c.values[i]).collect(),
            })
            .collect();
        Self::new(
            rows.iter().map(|&i| self.ids[i].clone()).collect(),
            rows.iter().map(|&i| self.times[i]).collect(),
            rows.iter().map(|&i| self.events[i]).collect(),
            columns,
        )
    }

    /// Fills the missing cells, in [`missing_cells`](Self::missing_cells) order.
    pub fn complete_with(&self, imputed: &[f64]) -> Result<CompletedTable> {
        let mut it = imputed.iter();
        let mut columns = Vec::with_capacity(self.columns.len());
        for col in &self.columns {
            let mut values = Vec::with_capacity(self.n());
            for v in &col.values {
                match v {
                    Some(x) => values.push(*x),
                    None => {
                        values.push(*it.next().ok_or_else(|| CoxError::InvalidData("too few imputed values".into()))?)
                    }
                }
            }
            columns.push(CompletedColumn { name: col.name.clone(), kind: col.kind.clone(), values });
        }
        if it.next().is_some() {
            return Err(CoxError::InvalidData("too many imputed values".into()));
        }
        Ok(CompletedTable { ids: self.ids.clone(), times: self.times.clone(), events: self.events.clone(), columns })
    }

    pub fn read_csv<R: Read>(reader: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
        let header: Vec<String> =
            rdr.headers().map_err(|e| CoxError::Parse(e.to_string()))?.iter().map(str::to_owned).collect();
        if header.len() < 3 || header[0] != "id" || header[1] != "time" || header[2] != "event" {
            return Err(CoxError::Parse("header must start with id,time,event".into()));
        }
        let mut ids = Vec::new();
        let mut times = Vec::new();
        let mut events = Vec::new();
        let mut cells: Vec<Vec<Option<String>>> = vec![Vec::new(); header.len() - 3];
        for (line, record) in rdr.records().enumerate() {
            let record = record.map_err(|e| CoxError::Parse(e.to_string()))?;
            if record.len() != header.len() {
                return Err(CoxError::Parse(format!("row {} has {} fields", line + 2, record.len())));
            }
            ids.push(record[0].to_owned());
            times.push(
                record[1]
                    .parse::<f64>()
                    .map_err(|_| CoxError::Parse(format!("row {}: bad time {:?}", line + 2, &record[1])))?,
            );
            events.push(match &record[2] {
                "1" => true,
                "0" => false,
                other => return Err(CoxError::Parse(format!("row {}: bad event {other:?}", line + 2))),
            });
            for (c, field) in record.iter().skip(3).enumerate() {
                cells[c].push(if field.is_empty() || field == "NA" { None } else { Some(field.to_owned()) });
            }
        }
        let columns =
            header[3..].iter().zip(cells).map(|(name, col)| infer_column(name, col)).collect::<Result<Vec<_>>>()?;
        Self::new(ids, times, events, columns)
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let io = |e: csv::Error| CoxError::Parse(e.to_string());
        let mut header = vec!["id".to_owned(), "time".into(), "event".into()];
        header.extend(self.columns.iter().map(|c| c.name.clone()));
        w.write_record(&header).map_err(io)?;
        for i in 0..self.n() {
            let mut row = vec![self.ids[i].clone(), format_number(self.times[i]), u8::from(self.events[i]).to_string()];
            for col in &self.columns {
                row.push(match (col.values[i], &col.kind) {
                    (None, _) => String::new(),
                    (Some(v), ColumnKind::Categorical(levels)) => levels[v as usize].clone(),
                    (Some(v), _) => format_number(v),
                });
            }
            w.write_record(&row).map_err(io)?;
        }
        w.flush().map_err(|e| CoxError::Parse(e.to_string()))
    }
}

/// Shortest decimal that parses back to the same `f64`.
fn format_number(v: f64) -> String {
    format!("{v}")
}

fn infer_column(name: &str, cells: Vec<Option<String>>) -> Result<RawColumn> {
    let numeric: Option<Vec<Option<f64>>> = cells
        .iter()
        .map(|c| match c {
            None => Some(None),
            Some(s) => s.parse::<f64>().ok().filter(|v| v.is_finite()).map(Some),
        })
        .collect();
    if let Some(values) = numeric {
        let binary = values.iter().flatten().all(|v| *v == 0.0 || *v == 1.0);
        let kind = if binary && values.iter().any(Option::is_some) { ColumnKind::Binary } else { ColumnKind::Numeric };
        return Ok(RawColumn { name: name.to_owned(), kind, values });
    }
    let levels: Vec<String> = cells.iter().flatten().cloned().collect::<BTreeSet<_>>().into_iter().collect();
    let values = cells.iter().map(|c| c.as_ref().map(|s| levels.iter().position(|l| l == s).unwrap() as f64)).collect();
    Ok(RawColumn { name: name.to_owned(), kind: ColumnKind::Categorical(levels), values })
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompletedColumn {
    pub name: String,
    pub kind: ColumnKind,
    pub values: Vec<f64>,
}

/// A patient table without missing cells.
#[derive(Debug, Clone, PartialEq)]
pub struct CompletedTable {
    pub ids: Vec<String>,
    pub times: Vec<f64>,
    pub events: Vec<bool>,
    pub columns: Vec<CompletedColumn>,
}

impl CompletedTable {
    pub fn n(&self) -> usize {
        self.times.len()
    }

    /// Names of the dummy-expanded design columns.
    pub fn design_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        for col in &self.columns {
            match &col.kind {
                ColumnKind::Categorical(levels) => names.extend(levels.iter().skip(1).cloned()),
                _ => names.push(col.name.clone()),
            }
        }
        names
    }

    /// Row-major dummy-expanded design matrix over all columns.
    pub fn design_matrix(&self) -> Vec<f64> {
        let width = self.design_names().len();
        let mut out = vec![0.0; self.n() * width];
        let mut offset = 0;
        for col in &self.columns {
            match &col.kind {
                ColumnKind::Categorical(levels) => {
                    for (i, v) in col.values.iter().enumerate() {
                        let k = *v as usize;
                        if k > 0 {
                            out[i * width + offset + k - 1] = 1.0;
                        }
                    }
                    offset += levels.len() - 1;
                }
                _ => {
                    for (i, v) in col.values.iter().enumerate() {
                        out[i * width + offset] = *v;
                    }
                    offset += 1;
                }
            }
        }
        out
    }

    pub fn survival_data(&self, features: &[String]) -> Result<SurvivalData> {
        let names = self.design_names();
        let cols = features
            .iter()
            .map(|f| {
                names.iter().position(|n| n == f).ok_or_else(|| CoxError::InvalidData(format!("unknown feature {f}")))
            })
            .collect::<Result<Vec<_>>>()?;
        let full = SurvivalData::new(self.times.clone(), self.events.clone(), self.design_matrix(), names)?;
        full.select_columns(&cols)
    }
}
