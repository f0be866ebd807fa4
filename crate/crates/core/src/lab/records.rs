use std::collections::{BTreeMap, BTreeSet};
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const PARAM_PREFIX: &str = "param.";
const METRIC_PREFIX: &str = "metric.";
const FIXED_COLUMNS: [&str; 4] = ["experiment", "variant", "trial", "seed"];

/// One row of experiment output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrialRecord {
    pub experiment: String,
    pub variant: String,
    pub trial: usize,
    pub seed: u64,
    pub params: BTreeMap<String, f64>,
    pub metrics: BTreeMap<String, f64>,
}

impl TrialRecord {
    pub fn new(experiment: &str, variant: impl Into<String>, trial: usize, seed: u64) -> Self {
        Self {
            experiment: experiment.to_string(),
            variant: variant.into(),
            trial,
            seed,
            params: BTreeMap::new(),
            metrics: BTreeMap::new(),
        }
    }

    pub fn param(mut self, name: &str, value: f64) -> Self {
        self.params.insert(name.to_string(), value);
        self
    }

    pub fn metric(mut self, name: &str, value: f64) -> Self {
        self.metrics.insert(name.to_string(), value);
        self
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in self.params.iter().chain(&self.metrics) {
            if !v.is_finite() {
                return Err(Error::invalid(format!(
                    "{} record {} trial {}: '{name}' is not finite ({v})",
                    self.experiment, self.variant, self.trial
                )));
            }
        }
        Ok(())
    }
}

/// Writes records as CSV with one `param.*` / `metric.*` column per name
/// seen in any record. Absent values are empty cells.
pub fn write_records_csv<W: Write>(records: &[TrialRecord], writer: W) -> Result<()> {
    let params: BTreeSet<&str> = records.iter().flat_map(|r| r.params.keys().map(String::as_str)).collect();
    let metrics: BTreeSet<&str> = records.iter().flat_map(|r| r.metrics.keys().map(String::as_str)).collect();
    let mut out = csv::Writer::from_writer(writer);
    let mut header: Vec<String> = FIXED_COLUMNS.iter().map(|s| s.to_string()).collect();
    header.extend(params.iter().map(|p| format!("{PARAM_PREFIX}{p}")));
    header.extend(metrics.iter().map(|m| format!("{METRIC_PREFIX}{m}")));
    out.write_record(&header)?;
    let cell = |v: Option<&f64>| v.map_or_else(String::new, |v| v.to_string());
    for r in records {
        r.validate()?;
        let mut row = vec![
            r.experiment.clone(),
            r.variant.clone(),
            r.trial.to_string(),
            r.seed.to_string(),
        ];
        row.extend(params.iter().map(|p| cell(r.params.get(*p))));
        row.extend(metrics.iter().map(|m| cell(r.metrics.get(*m))));
        out.write_record(&row)?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_records_csv<R: Read>(reader: R) -> Result<Vec<TrialRecord>> {
    let mut input = csv::Reader::from_reader(reader);
    let header: Vec<String> = input.headers()?.iter().map(str::to_string).collect();
    if header.len() < FIXED_COLUMNS.len() || header[..FIXED_COLUMNS.len()] != FIXED_COLUMNS {
        return Err(Error::invalid(format!(
            "records CSV must start with columns {FIXED_COLUMNS:?}"
        )));
    }
    let mut records = Vec::new();
    for row in input.records() {
        let row = row?;
        let parse_int = |i: usize| -> Result<u64> {
            row[i]
                .parse()
                .map_err(|_| Error::invalid(format!("bad integer '{}' in column {}", &row[i], header[i])))
        };
        let mut rec = TrialRecord::new(&row[0], &row[1], parse_int(2)? as usize, parse_int(3)?);
        for (i, name) in header.iter().enumerate().skip(FIXED_COLUMNS.len()) {
            if row[i].is_empty() {
                continue;
            }
            let v: f64 = row[i]
                .parse()
                .map_err(|_| Error::invalid(format!("bad number '{}' in column {name}", &row[i])))?;
            if let Some(p) = name.strip_prefix(PARAM_PREFIX) {
                rec.params.insert(p.to_string(), v);
            } else if let Some(m) = name.strip_prefix(METRIC_PREFIX) {
                rec.metrics.insert(m.to_string(), v);
            } else {
                return Err(Error::invalid(format!("unexpected column '{name}'")));
            }
        }
        records.push(rec);
    }
    Ok(records)
}

pub fn records_to_json(records: &[TrialRecord]) -> Result<String> {
    for r in records {
        r.validate()?;
    }
    Ok(serde_json::to_string_pretty(records)?)
}

pub fn records_from_json(text: &str) -> Result<Vec<TrialRecord>> {
    Ok(serde_json::from_str(text)?)
}

/// Mean of every metric over records sharing `variant` and the listed params.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub variant: String,
    pub params: BTreeMap<String, f64>,
    pub count: usize,
    pub means: BTreeMap<String, f64>,
}

pub fn summarize(records: &[TrialRecord], group_params: &[&str]) -> Vec<SummaryRow> {
    // keyed on the bit patterns so grouping is exact
    let mut groups: BTreeMap<(String, Vec<u64>), (BTreeMap<String, f64>, usize, BTreeMap<String, (f64, usize)>)> =
        BTreeMap::new();
    let mut order = Vec::new();
    for r in records {
        let key_params: BTreeMap<String, f64> = group_params
            .iter()
            .filter_map(|p| r.params.get(*p).map(|v| (p.to_string(), *v)))
            .collect();
        let key = (
            r.variant.clone(),
            group_params
                .iter()
                .map(|p| r.params.get(*p).map_or(u64::MAX, |v| v.to_bits()))
                .collect(),
        );
        let entry = groups.entry(key.clone()).or_insert_with(|| {
            order.push(key.clone());
            (key_params, 0, BTreeMap::new())
        });
        entry.1 += 1;
        for (name, v) in &r.metrics {
            let acc = entry.2.entry(name.clone()).or_insert((0.0, 0));
            acc.0 += v;
            acc.1 += 1;
        }
    }
    order
        .into_iter()
        .map(|key| {
            let (params, count, sums) = groups.remove(&key).expect("group recorded");
            SummaryRow {
                variant: key.0,
                params,
                count,
                means: sums.into_iter().map(|(k, (s, n))| (k, s / n as f64)).collect(),
            }
        })
        .collect()
}
