//! CSV ingestion and export.
//!
//! Columns: `series_id`, `timestamp`, `target`, then the configured numeric
//! and categorical columns. Rows at the end of a series may leave `target`
//! empty to supply covariates for steps not yet observed.

use std::collections::BTreeMap;
use std::path::Path;

use chrono::{NaiveDate, NaiveDateTime};

use super::{DatasetConfig, Series, SeriesTable, Vocabulary};
use crate::error::{Error, Result};

const TIME_FORMAT: &str = "%Y-%m-%dT%H:%M:%S";

/// Parses ISO-8601 date-times (`T` or space separated) and plain dates.
pub fn parse_timestamp(s: &str) -> Option<NaiveDateTime> {
    let s = s.trim();
    NaiveDateTime::parse_from_str(s, TIME_FORMAT)
        .or_else(|_| NaiveDateTime::parse_from_str(s, "%Y-%m-%d %H:%M:%S"))
        .or_else(|_| NaiveDateTime::parse_from_str(s, "%Y-%m-%dT%H:%M"))
        .ok()
        .or_else(|| NaiveDate::parse_from_str(s, "%Y-%m-%d").ok()?.and_hms_opt(0, 0, 0))
}

struct Row {
    line: usize,
    ts: NaiveDateTime,
    target: Option<f64>,
    numeric: Vec<f64>,
    labels: Vec<String>,
}

fn parse_err(line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        line,
        message: message.into(),
    }
}

fn parse_float(field: &str, line: usize, column: &str) -> Result<f64> {
    let v: f64 = field
        .trim()
        .parse()
        .map_err(|_| parse_err(line, format!("column `{column}`: `{field}` is not a number")))?;
    if !v.is_finite() {
        return Err(parse_err(line, format!("column `{column}`: non-finite value")));
    }
    Ok(v)
}

/// Reads, sorts and validates a table. Categorical vocabularies are built
/// from rows inside the training range only; later rows holding unseen
/// labels are rejected.
pub fn ingest_csv(path: &Path, cfg: &DatasetConfig) -> Result<SeriesTable> {
    cfg.validate()?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    let headers = reader.headers().map_err(|e| parse_err(1, e.to_string()))?.clone();
    let column = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| parse_err(1, format!("missing column `{name}`")))
    };
    let (c_id, c_ts, c_y) = (column("series_id")?, column("timestamp")?, column("target")?);
    let c_num = cfg.numeric_columns.iter().map(|c| column(c)).collect::<Result<Vec<_>>>()?;
    let c_cat = cfg.categorical_columns.iter().map(|c| column(c)).collect::<Result<Vec<_>>>()?;

    let mut groups: BTreeMap<String, Vec<Row>> = BTreeMap::new();
    for (i, record) in reader.records().enumerate() {
        let line = i + 2;
        let record = record.map_err(|e| parse_err(line, e.to_string()))?;
        let field = |c: usize| record.get(c).unwrap_or("");
        let id = field(c_id);
        if id.is_empty() {
            return Err(parse_err(line, "empty series_id"));
        }
        let ts = parse_timestamp(field(c_ts))
            .ok_or_else(|| parse_err(line, format!("bad timestamp `{}`", field(c_ts))))?;
        let target = match field(c_y) {
            "" => None,
            v => Some(parse_float(v, line, "target")?),
        };
        let numeric = c_num
            .iter()
            .zip(&cfg.numeric_columns)
            .map(|(&c, name)| parse_float(field(c), line, name))
            .collect::<Result<Vec<_>>>()?;
        let labels = c_cat.iter().map(|&c| field(c).to_string()).collect();
        groups.entry(id.to_string()).or_default().push(Row {
            line,
            ts,
            target,
            numeric,
            labels,
        });
    }
    if groups.is_empty() {
        return Err(Error::Data(format!("{}: no rows", path.display())));
    }

    let step = cfg.frequency.step();
    for rows in groups.values_mut() {
        rows.sort_by_key(|r| r.ts);
        for pair in rows.windows(2) {
            let (a, b) = (&pair[0], &pair[1]);
            if a.ts == b.ts {
                let line = a.line.max(b.line);
                return Err(parse_err(line, format!("duplicate timestamp {}", b.ts)));
            }
            if b.ts - a.ts != step {
                return Err(parse_err(b.line, format!("gap between {} and {}", a.ts, b.ts)));
            }
            if a.target.is_none() && b.target.is_some() {
                return Err(parse_err(a.line, "missing target before later observations"));
            }
        }
        if rows[0].target.is_none() {
            return Err(parse_err(rows[0].line, "series starts without a target"));
        }
    }

    // Training range on the global grid, as the window splitter computes it.
    let origin = groups.values().map(|r| r[0].ts).min().expect("non-empty");
    let steps_of = |ts: NaiveDateTime| ((ts - origin).num_seconds() / step.num_seconds()) as usize;
    let total = groups
        .values()
        .map(|rows| steps_of(rows[0].ts) + rows.iter().filter(|r| r.target.is_some()).count())
        .max()
        .unwrap_or(0);
    let train_end = (cfg.train_fraction * total as f64).round() as usize;

    let n_cat = cfg.categorical_columns.len();
    let mut seen: Vec<Vec<String>> = vec![Vec::new(); n_cat];
    for (id, rows) in &groups {
        if steps_of(rows[0].ts) >= train_end {
            return Err(parse_err(rows[0].line, format!("series `{id}` out of vocabulary: no training rows")));
        }
        for r in rows.iter().filter(|r| steps_of(r.ts) < train_end) {
            for (k, l) in r.labels.iter().enumerate() {
                seen[k].push(l.clone());
            }
        }
    }
    let vocabularies: Vec<Vocabulary> = seen.into_iter().map(Vocabulary::from_labels).collect();

    let mut series = Vec::with_capacity(groups.len());
    for (id, rows) in groups {
        let covariates = !cfg.numeric_columns.is_empty() || n_cat > 0;
        let mut s = Series {
            id,
            start: rows[0].ts,
            target: Vec::new(),
            numeric: Vec::new(),
            categorical: Vec::new(),
        };
        for r in &rows {
            if let Some(y) = r.target {
                s.target.push(y);
            } else if !covariates {
                break;
            }
            s.numeric.extend_from_slice(&r.numeric);
            for (k, l) in r.labels.iter().enumerate() {
                let id = vocabularies[k].id(l).ok_or_else(|| {
                    parse_err(
                        r.line,
                        format!("`{l}` in column `{}` out of vocabulary", cfg.categorical_columns[k]),
                    )
                })?;
                s.categorical.push(id);
            }
        }
        series.push(s);
    }
    let table = SeriesTable {
        frequency: cfg.frequency,
        numeric_names: cfg.numeric_columns.clone(),
        categorical_names: cfg.categorical_columns.clone(),
        vocabularies,
        series,
    };
    table.validate()?;
    Ok(table)
}

/// Writes `table` in the format [`ingest_csv`] reads. Floats use the
/// shortest representation that parses back to the same value.
pub fn write_csv(table: &SeriesTable, path: &Path) -> Result<()> {
    table.validate()?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Data(e.to_string()))?;
    let mut header = vec!["series_id".to_string(), "timestamp".into(), "target".into()];
    header.extend(table.numeric_names.iter().cloned());
    header.extend(table.categorical_names.iter().cloned());
    w.write_record(&header).map_err(|e| Error::Data(e.to_string()))?;
    let (nn, nc) = (table.numeric_names.len(), table.categorical_names.len());
    for s in &table.series {
        let steps = table.covariate_len(s).unwrap_or(s.target.len());
        for t in 0..steps {
            let mut rec = vec![
                s.id.clone(),
                s.timestamp(table.frequency, t).format(TIME_FORMAT).to_string(),
                s.target.get(t).map(|y| y.to_string()).unwrap_or_default(),
            ];
            rec.extend(s.numeric[t * nn..(t + 1) * nn].iter().map(|v| v.to_string()));
            rec.extend(
                s.categorical[t * nc..(t + 1) * nc]
                    .iter()
                    .enumerate()
                    .map(|(k, &id)| table.vocabularies[k].label(id).to_string()),
            );
            w.write_record(&rec).map_err(|e| Error::Data(e.to_string()))?;
        }
    }
    w.flush()?;
    Ok(())
}
