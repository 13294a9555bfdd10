//! CSV ingestion driven by a JSON manifest.
//!
//! ```json
//! { "format_version": 1,
//!   "datasets": [ { "dataset_id": "etth1", "domain": "energy", "frequency": "h",
//!                   "files": ["etth1.csv"], "value_columns": ["OT", "HUFL"] } ] }
//! ```
//!
//! Every value column becomes one channel-independent [`Series`]. A dataset
//! split across several files is concatenated in file order. Empty cells and
//! `NaN`/`NA` are treated as missing and linearly interpolated.

use std::fs;
use std::path::{Path, PathBuf};

use rafcast_core::tsdata::{fill_missing, Series};
use serde::{Deserialize, Serialize};

use crate::artifact::Envelope;
use crate::error::{Error, Result};

pub const MANIFEST_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetEntry {
    pub dataset_id: String,
    pub domain: String,
    pub frequency: String,
    pub files: Vec<String>,
    pub value_columns: Vec<String>,
    /// Reserved for zero-shot evaluation: never enters a knowledge base or
    /// any training set.
    #[serde(default)]
    pub heldout: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub datasets: Vec<DatasetEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub artifact: Option<Envelope>,
}

impl Manifest {
    pub fn new(datasets: Vec<DatasetEntry>) -> Self {
        Self {
            format_version: MANIFEST_VERSION,
            datasets,
            artifact: None,
        }
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let m: Manifest =
            serde_json::from_str(&text).map_err(|e| Error::Data(format!("{}: invalid manifest: {e}", path.display())))?;
        if m.format_version != MANIFEST_VERSION {
            return Err(Error::Data(format!(
                "{}: manifest version {} is not supported (expected {MANIFEST_VERSION})",
                path.display(),
                m.format_version
            )));
        }
        let mut seen = std::collections::BTreeSet::new();
        for d in &m.datasets {
            if !seen.insert(&d.dataset_id) {
                return Err(Error::Data(format!("duplicate dataset id {:?}", d.dataset_id)));
            }
            if d.files.is_empty() || d.value_columns.is_empty() {
                return Err(Error::Data(format!(
                    "dataset {:?} needs at least one file and one value column",
                    d.dataset_id
                )));
            }
        }
        Ok(m)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }
}

fn parse_cell(raw: &str) -> Option<f64> {
    let t = raw.trim();
    if t.is_empty() || t.eq_ignore_ascii_case("nan") || t.eq_ignore_ascii_case("na") {
        return Some(f64::NAN);
    }
    t.parse().ok()
}

/// Reads the named columns of one CSV file (with header row).
pub fn read_columns(path: &Path, columns: &[String]) -> Result<Vec<Vec<f64>>> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Data(format!("{}: {other:?}", path.display())),
    })?;
    let headers = rdr
        .headers()
        .map_err(|e| Error::Data(format!("{}: unreadable header: {e}", path.display())))?
        .clone();
    let idx: Vec<usize> = columns
        .iter()
        .map(|c| {
            headers
                .iter()
                .position(|h| h.trim() == c)
                .ok_or_else(|| Error::Data(format!("{}: no column named {c:?}", path.display())))
        })
        .collect::<Result<_>>()?;
    let mut out = vec![Vec::new(); columns.len()];
    for (row, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| Error::Data(format!("{}: row {}: {e}", path.display(), row + 2)))?;
        for (col, &i) in idx.iter().enumerate() {
            let raw = rec.get(i).unwrap_or("");
            let v = parse_cell(raw).ok_or_else(|| {
                Error::Data(format!(
                    "{}: row {}, column {:?}: cannot parse {raw:?} as a number",
                    path.display(),
                    row + 2,
                    columns[col]
                ))
            })?;
            out[col].push(v);
        }
    }
    Ok(out)
}

/// Loads every channel of every dataset listed in the manifest at `path`.
/// Relative file names resolve against the manifest's directory.
pub fn load(path: &Path) -> Result<(Manifest, Vec<Series>)> {
    let manifest = Manifest::read(path)?;
    let base: PathBuf = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let mut series = Vec::new();
    for d in &manifest.datasets {
        let mut cols = vec![Vec::new(); d.value_columns.len()];
        for f in &d.files {
            for (acc, part) in cols.iter_mut().zip(read_columns(&base.join(f), &d.value_columns)?) {
                acc.extend(part);
            }
        }
        for (name, mut values) in d.value_columns.iter().zip(cols) {
            fill_missing(&mut values).map_err(|e| {
                Error::Data(format!("dataset {:?}, column {name:?}: {e}", d.dataset_id))
            })?;
            series.push(Series {
                values,
                channel_id: name.clone(),
                dataset_id: d.dataset_id.clone(),
                domain: d.domain.clone(),
                frequency: d.frequency.clone(),
            });
        }
    }
    Ok((manifest, series))
}

/// Loaded series split into (knowledge/training pool, held-out evaluation).
pub fn partition_heldout(manifest: &Manifest, series: Vec<Series>) -> (Vec<Series>, Vec<Series>) {
    let held: std::collections::BTreeSet<&str> = manifest
        .datasets
        .iter()
        .filter(|d| d.heldout)
        .map(|d| d.dataset_id.as_str())
        .collect();
    series.into_iter().partition(|s| !held.contains(s.dataset_id.as_str()))
}

/// Writes one single-column CSV.
pub fn write_series_csv(path: &Path, column: &str, values: &[f64]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    let io_err = |e: csv::Error| Error::Data(format!("{}: {e}", path.display()));
    w.write_record(["t", column]).map_err(io_err)?;
    for (t, v) in values.iter().enumerate() {
        w.write_record([t.to_string(), format!("{v:?}")]).map_err(io_err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn entry(id: &str, files: &[&str], cols: &[&str]) -> DatasetEntry {
        DatasetEntry {
            dataset_id: id.into(),
            domain: "energy".into(),
            frequency: "h".into(),
            files: files.iter().map(|s| s.to_string()).collect(),
            value_columns: cols.iter().map(|s| s.to_string()).collect(),
            heldout: false,
        }
    }

    #[test]
    fn loads_and_interpolates() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("a.csv"), "date,x,y\n1,1.0,10\n2,,20\n3,3.0,NaN\n").unwrap();
        fs::write(dir.path().join("b.csv"), "date,y,x\n4,40,4\n").unwrap();
        Manifest::new(vec![entry("ds", &["a.csv", "b.csv"], &["x", "y"])])
            .write(&dir.path().join(MANIFEST_FILE))
            .unwrap();
        let (_, s) = load(&dir.path().join(MANIFEST_FILE)).unwrap();
        assert_eq!(s.len(), 2);
        assert_eq!(s[0].values, vec![1.0, 2.0, 3.0, 4.0]);
        assert_eq!(s[1].values, vec![10.0, 20.0, 30.0, 40.0]);
        assert_eq!((s[1].channel_id.as_str(), s[1].dataset_id.as_str()), ("y", "ds"));
    }

    #[test]
    fn descriptive_errors() {
        let dir = tempfile::tempdir().unwrap();
        let m = dir.path().join(MANIFEST_FILE);
        fs::write(dir.path().join("a.csv"), "x\n1\nabc\n").unwrap();
        Manifest::new(vec![entry("ds", &["a.csv"], &["x"])]).write(&m).unwrap();
        let e = load(&m).unwrap_err().to_string();
        assert!(e.contains("row 3") && e.contains("abc"), "{e}");

        Manifest::new(vec![entry("ds", &["a.csv"], &["nope"])]).write(&m).unwrap();
        assert!(load(&m).unwrap_err().to_string().contains("no column named \"nope\""));

        Manifest::new(vec![entry("ds", &["missing.csv"], &["x"])]).write(&m).unwrap();
        assert!(matches!(load(&m), Err(Error::Io { .. })));

        Manifest::new(vec![entry("d", &["a.csv"], &["x"]), entry("d", &["a.csv"], &["x"])])
            .write(&m)
            .unwrap();
        assert!(load(&m).unwrap_err().to_string().contains("duplicate"));

        fs::write(&m, r#"{"format_version": 9, "datasets": []}"#).unwrap();
        assert!(load(&m).unwrap_err().to_string().contains("version 9"));

        fs::write(dir.path().join("a.csv"), "x\n\nNA\n").unwrap();
        Manifest::new(vec![entry("ds", &["a.csv"], &["x"])]).write(&m).unwrap();
        assert!(matches!(load(&m), Err(Error::Data(_))));
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.csv");
        let v = vec![0.1, -1e-300, 1.0 / 3.0, 12345.678];
        write_series_csv(&p, "value", &v).unwrap();
        assert_eq!(read_columns(&p, &["value".into()]).unwrap()[0], v);
    }
}
