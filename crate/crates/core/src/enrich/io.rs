//! Measurement CSV and transformer-map files.
//!
//! Measurement files have the header `timestamp,transformer_id,p_kw,q_kvar`
//! with integer-second timestamps. A transformer map places each transformer
//! on a bus phase: `{"transformers":[{"id","bus","phase","kind"}]}`.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::series::{HighResSeries, HourlySeries};
use crate::error::{Error, Result};
use crate::phase::Phase;

pub const SECONDS_PER_HOUR: i64 = 3600;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Record {
    pub timestamp: i64,
    pub transformer_id: String,
    pub p_kw: f64,
    pub q_kvar: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TransformerKind {
    Load,
    Pv,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransformerInfo {
    pub id: String,
    pub bus: String,
    pub phase: Phase,
    pub kind: TransformerKind,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransformerMap {
    pub transformers: Vec<TransformerInfo>,
}

impl TransformerMap {
    pub fn get(&self, id: &str) -> Option<&TransformerInfo> {
        self.transformers.iter().find(|t| t.id == id)
    }

    pub fn from_json_str(s: &str) -> Result<Self> {
        let map: TransformerMap = serde_json::from_str(s)?;
        let mut seen = std::collections::HashSet::new();
        for t in &map.transformers {
            if !seen.insert(t.id.as_str()) {
                return Err(Error::Data(format!("transformer {} listed twice", t.id)));
            }
        }
        Ok(map)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json_str(&fs::read_to_string(path)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}

pub fn read_records(path: impl AsRef<Path>) -> Result<Vec<Record>> {
    let path = path.as_ref();
    let mut reader = csv::Reader::from_path(path)?;
    let mut out = Vec::new();
    for (i, row) in reader.deserialize().enumerate() {
        let rec: Record = row.map_err(|e| {
            let line = e.position().map_or(i as u64 + 2, |p| p.line());
            Error::Data(format!("{}: line {line}: {e}", path.display()))
        })?;
        if !rec.p_kw.is_finite() || !rec.q_kvar.is_finite() {
            // header is line 1
            return Err(Error::Data(format!(
                "{}: line {}: non-finite power",
                path.display(),
                i + 2
            )));
        }
        out.push(rec);
    }
    Ok(out)
}

/// Reads a file, or every `*.csv` file of a directory in name order.
pub fn read_records_from(path: impl AsRef<Path>) -> Result<Vec<Record>> {
    let path = path.as_ref();
    if !path.is_dir() {
        return read_records(path);
    }
    let mut files: Vec<PathBuf> = fs::read_dir(path)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "csv"))
        .collect();
    files.sort();
    let mut out = Vec::new();
    for f in files {
        out.extend(read_records(&f)?);
    }
    Ok(out)
}

pub fn write_records(path: impl AsRef<Path>, records: &[Record]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in records {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// Active and reactive series of one transformer.
#[derive(Debug, Clone, PartialEq)]
pub struct HighResPair {
    pub p: HighResSeries,
    pub q: HighResSeries,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HourlyPair {
    pub p: HourlySeries,
    pub q: HourlySeries,
}

fn group_by_transformer(records: &[Record]) -> BTreeMap<&str, Vec<&Record>> {
    let mut by_id: BTreeMap<&str, Vec<&Record>> = BTreeMap::new();
    for r in records {
        by_id.entry(r.transformer_id.as_str()).or_default().push(r);
    }
    for rows in by_id.values_mut() {
        rows.sort_by_key(|r| r.timestamp);
    }
    by_id
}

/// Groups high-resolution records into per-transformer series. Every hour
/// must be present and carry the same number of samples.
pub fn high_res_series(records: &[Record]) -> Result<Vec<HighResPair>> {
    let mut out = Vec::new();
    for (id, rows) in group_by_transformer(records) {
        let mut hours: BTreeMap<i64, usize> = BTreeMap::new();
        for r in &rows {
            *hours.entry(r.timestamp.div_euclid(SECONDS_PER_HOUR)).or_default() += 1;
        }
        let start = *hours.keys().next().expect("non-empty group");
        let per_hour = hours[&start];
        for (k, (h, c)) in hours.iter().enumerate() {
            if *h != start + k as i64 {
                return Err(Error::Data(format!("{id}: missing hour {}", start + k as i64)));
            }
            if *c != per_hour {
                return Err(Error::Data(format!(
                    "{id}: hour {h} has {c} samples, expected {per_hour}"
                )));
            }
        }
        if rows.windows(2).any(|w| w[0].timestamp == w[1].timestamp) {
            return Err(Error::Data(format!("{id}: duplicate timestamp")));
        }
        let p = rows.iter().map(|r| r.p_kw).collect();
        let q = rows.iter().map(|r| r.q_kvar).collect();
        out.push(HighResPair {
            p: HighResSeries::new(id, start, per_hour, p)?,
            q: HighResSeries::new(id, start, per_hour, q)?,
        });
    }
    Ok(out)
}

/// Groups hourly records into per-transformer series keyed by elapsed hour.
pub fn hourly_series(records: &[Record]) -> Result<Vec<HourlyPair>> {
    let mut out = Vec::new();
    for (id, rows) in group_by_transformer(records) {
        let hours: Vec<i64> = rows.iter().map(|r| r.timestamp.div_euclid(SECONDS_PER_HOUR)).collect();
        let p = rows.iter().map(|r| r.p_kw).collect();
        let q = rows.iter().map(|r| r.q_kvar).collect();
        out.push(HourlyPair {
            p: HourlySeries::new(id, hours.clone(), p)?,
            q: HourlySeries::new(id, hours, q)?,
        });
    }
    Ok(out)
}

/// Flattens a high-resolution pair back into records, spreading each hour's
/// samples evenly over its 3600 seconds.
pub fn records_from_pair(pair: &HighResPair) -> Vec<Record> {
    let n = pair.p.samples_per_hour as i64;
    pair.p
        .hours()
        .zip(pair.q.hours())
        .flat_map(|((h, ps), (_, qs))| {
            ps.iter().zip(qs).enumerate().map(move |(k, (p, q))| Record {
                timestamp: h * SECONDS_PER_HOUR + k as i64 * SECONDS_PER_HOUR / n,
                transformer_id: pair.p.transformer.clone(),
                p_kw: *p,
                q_kvar: *q,
            })
        })
        .collect()
}

pub fn records_from_hourly(pair: &HourlyPair) -> Vec<Record> {
    pair.p
        .hours
        .iter()
        .zip(pair.p.values.iter().zip(&pair.q.values))
        .map(|(h, (p, q))| Record {
            timestamp: h * SECONDS_PER_HOUR,
            transformer_id: pair.p.transformer.clone(),
            p_kw: *p,
            q_kvar: *q,
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(t: i64, id: &str, p: f64) -> Record {
        Record {
            timestamp: t,
            transformer_id: id.into(),
            p_kw: p,
            q_kvar: -p,
        }
    }

    #[test]
    fn csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.csv");
        let rows = vec![rec(0, "t1", 1.5), rec(1800, "t1", 2.5)];
        write_records(&path, &rows).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("timestamp,transformer_id,p_kw,q_kvar"));
        assert_eq!(read_records_from(dir.path()).unwrap(), rows);
    }

    #[test]
    fn grouping_high_res() {
        let rows: Vec<Record> = (0..8).map(|k| rec(3600 + k * 900, "x", k as f64)).collect();
        let pairs = high_res_series(&rows).unwrap();
        assert_eq!(pairs.len(), 1);
        assert_eq!(pairs[0].p.start_hour, 1);
        assert_eq!(pairs[0].p.samples_per_hour, 4);
        assert_eq!(records_from_pair(&pairs[0]), rows);
    }

    #[test]
    fn uneven_hours_rejected() {
        let mut rows: Vec<Record> = (0..8).map(|k| rec(k * 900, "x", 0.0)).collect();
        rows.pop();
        assert!(high_res_series(&rows).is_err());
        let gap = vec![rec(0, "x", 0.0), rec(7200, "x", 0.0)];
        assert!(high_res_series(&gap).is_err());
    }

    #[test]
    fn bad_csv_reports_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("b.csv");
        fs::write(&path, "timestamp,transformer_id,p_kw,q_kvar\n0,t,1,1\nx,t,1,1\n").unwrap();
        let err = read_records(&path).unwrap_err().to_string();
        assert!(err.contains("line 3"), "{err}");
    }

    #[test]
    fn map_rejects_duplicates() {
        let s = r#"{"transformers":[{"id":"a","bus":"1","phase":"a","kind":"load"},
                                   {"id":"a","bus":"2","phase":"b","kind":"pv"}]}"#;
        assert!(TransformerMap::from_json_str(s).is_err());
    }
}
