//! Append-only time-series persistence: one JSON line per stored packet,
//! with an in-memory index rebuilt on open.
//!
//! Each line is exactly the canonical wire rendering of a [`DataPacket`], so
//! the store file is diffable against delivery logs and byte-stable across
//! reruns. Appends flush before returning; a crash mid-append loses at most
//! the final partial line, which `open` tolerates.

pub mod analysis;

pub use analysis::{align, export_pairs_csv, export_rows_csv, max_abs_diff, PairPoint, SeriesPoint};

use crate::node::{parse_packet, serialize_packet, DataPacket};
use crate::Millis;
use std::collections::HashSet;
use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Read, Seek, Write};
use std::path::{Path, PathBuf};
use thiserror::Error;

/// Rows carry exactly the data-packet fields.
pub type StoreRow = DataPacket;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("duplicate key ({node_id}, {name}, {captured_at}); the gateway should have deduplicated")]
    DuplicateKey { node_id: String, name: String, captured_at: Millis },
    #[error("store corrupt at line {line}: {message}")]
    Corrupt { line: usize, message: String },
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("empty pair list")]
    EmptyPair,
    #[error("invalid query: from {from} is after to {to}")]
    InvalidRange { from: Millis, to: Millis },
}

/// Row filter: node, variable name, inclusive time range.
#[derive(Debug, Clone)]
pub struct SeriesQuery {
    pub node_id: Option<String>,
    pub name: Option<String>,
    pub from: Millis,
    pub to: Millis,
}

impl Default for SeriesQuery {
    fn default() -> Self {
        SeriesQuery { node_id: None, name: None, from: Millis::MIN, to: Millis::MAX }
    }
}

impl SeriesQuery {
    pub fn validate(&self) -> Result<(), StoreError> {
        if self.from > self.to {
            return Err(StoreError::InvalidRange { from: self.from, to: self.to });
        }
        Ok(())
    }

    fn matches(&self, row: &StoreRow) -> bool {
        self.node_id.as_ref().is_none_or(|n| *n == row.node_id)
            && self.name.as_ref().is_none_or(|n| *n == row.name)
            && (self.from..=self.to).contains(&row.captured_at)
    }
}

pub struct TelemetryStore {
    path: PathBuf,
    writer: Option<BufWriter<File>>,
    rows: Vec<StoreRow>,
    keys: HashSet<(String, String, Millis)>,
}

impl TelemetryStore {
    /// Creates or truncates the store file.
    pub fn create(path: &Path) -> Result<TelemetryStore, StoreError> {
        if let Some(parent) = path.parent() {
            if !parent.as_os_str().is_empty() {
                std::fs::create_dir_all(parent)?;
            }
        }
        let file = OpenOptions::new().create(true).write(true).truncate(true).open(path)?;
        Ok(TelemetryStore {
            path: path.to_path_buf(),
            writer: Some(BufWriter::new(file)),
            rows: Vec::new(),
            keys: HashSet::new(),
        })
    }

    /// Opens an existing store for reading and appending, rebuilding the
    /// index. A trailing partial line (crash during the final append) is
    /// discarded; corruption anywhere else is an error.
    pub fn open(path: &Path) -> Result<TelemetryStore, StoreError> {
        let mut file = OpenOptions::new().read(true).append(true).open(path)?;
        let mut text = String::new();
        file.read_to_string(&mut text)?;

        let mut rows = Vec::new();
        let mut keys = HashSet::new();
        let mut valid_len = 0usize;
        let mut offset = 0usize;
        for (i, line) in text.split_inclusive('\n').enumerate() {
            let terminated = line.ends_with('\n');
            let body = line.trim_end_matches('\n');
            if body.is_empty() {
                offset += line.len();
                if terminated {
                    valid_len = offset;
                }
                continue;
            }
            match parse_packet(body.as_bytes()) {
                Ok(row) => {
                    if !keys.insert(row.key()) {
                        return Err(StoreError::Corrupt {
                            line: i + 1,
                            message: format!("duplicate key ({}, {}, {})", row.node_id, row.name, row.captured_at),
                        });
                    }
                    rows.push(row);
                    offset += line.len();
                    valid_len = offset;
                }
                Err(e) if !terminated => {
                    // Partial final line from an interrupted append: drop it.
                    let _ = e;
                    break;
                }
                Err(e) => {
                    return Err(StoreError::Corrupt { line: i + 1, message: e.to_string() });
                }
            }
        }
        if valid_len < text.len() {
            file.set_len(valid_len as u64)?;
        }
        file.seek(std::io::SeekFrom::End(0))?;
        Ok(TelemetryStore {
            path: path.to_path_buf(),
            writer: Some(BufWriter::new(file)),
            rows,
            keys,
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn rows(&self) -> &[StoreRow] {
        &self.rows
    }

    pub fn contains_key(&self, row: &StoreRow) -> bool {
        self.keys.contains(&row.key())
    }

    /// Appends one row; flushed to the OS before returning.
    pub fn append(&mut self, row: StoreRow) -> Result<(), StoreError> {
        if self.keys.contains(&row.key()) {
            return Err(StoreError::DuplicateKey {
                node_id: row.node_id,
                name: row.name,
                captured_at: row.captured_at,
            });
        }
        let writer = self.writer.as_mut().expect("store opened writable");
        let mut line = serialize_packet(&row)
            .map_err(|e| StoreError::Corrupt { line: self.rows.len() + 1, message: e.to_string() })?;
        line.push(b'\n');
        writer.write_all(&line)?;
        writer.flush()?;
        self.keys.insert(row.key());
        self.rows.push(row);
        Ok(())
    }

    /// Rows matching the query, sorted by capture time (ties keep append order).
    pub fn query(&self, q: &SeriesQuery) -> Result<Vec<StoreRow>, StoreError> {
        q.validate()?;
        let mut rows: Vec<StoreRow> = self.rows.iter().filter(|r| q.matches(r)).cloned().collect();
        rows.sort_by_key(|r| r.captured_at);
        Ok(rows)
    }

    /// fsyncs the underlying file.
    pub fn sync(&mut self) -> Result<(), StoreError> {
        if let Some(writer) = self.writer.as_mut() {
            writer.flush()?;
            writer.get_ref().sync_data()?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::Protocol;

    fn row(node: &str, name: &str, t: Millis, value: f64) -> StoreRow {
        StoreRow {
            name: name.into(),
            units: crate::sensor::VariableKind::from_name(name).map_or("C", |k| k.unit()).into(),
            value,
            captured_at: t,
            protocol: Protocol::Wifi,
            node_id: node.into(),
        }
    }

    #[test]
    fn append_then_query_returns_the_row() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("store.jsonl");
        let mut store = TelemetryStore::create(&path).unwrap();
        store.append(row("n1", "temperature", 1000, 20.5)).unwrap();
        let q = SeriesQuery { node_id: Some("n1".into()), name: Some("temperature".into()), ..Default::default() };
        let rows = store.query(&q).unwrap();
        assert_eq!(rows.len(), 1);
        assert_eq!(rows[0].value, 20.5);
    }

    #[test]
    fn empty_point_range_is_empty() {
        let dir = tempfile::tempdir().unwrap();
        let mut store = TelemetryStore::create(&dir.path().join("s.jsonl")).unwrap();
        store.append(row("n1", "temperature", 1000, 20.5)).unwrap();
        let q = SeriesQuery { from: 500, to: 500, ..Default::default() };
        assert!(store.query(&q).unwrap().is_empty());
        let bad = SeriesQuery { from: 2, to: 1, ..Default::default() };
        assert!(store.query(&bad).is_err());
    }

    #[test]
    fn duplicate_key_rejected_defensively() {
        let dir = tempfile::tempdir().unwrap();
        let mut store = TelemetryStore::create(&dir.path().join("s.jsonl")).unwrap();
        store.append(row("n1", "temperature", 1000, 20.5)).unwrap();
        let err = store.append(row("n1", "temperature", 1000, 21.0)).unwrap_err();
        assert!(matches!(err, StoreError::DuplicateKey { .. }));
        assert_eq!(store.len(), 1);
    }

    #[test]
    fn reopen_returns_appended_rows() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.jsonl");
        {
            let mut store = TelemetryStore::create(&path).unwrap();
            for i in 0..10 {
                store.append(row("n1", "humidity", i * 1000, 50.0 + i as f64)).unwrap();
            }
            // No explicit sync or close: drop simulates an abrupt exit after
            // the flush in append.
        }
        let store = TelemetryStore::open(&path).unwrap();
        assert_eq!(store.len(), 10);
        assert_eq!(store.rows()[9].value, 59.0);
    }

    #[test]
    fn trailing_partial_line_is_discarded_and_store_remains_usable() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.jsonl");
        {
            let mut store = TelemetryStore::create(&path).unwrap();
            store.append(row("n1", "humidity", 0, 50.0)).unwrap();
            store.append(row("n1", "humidity", 1000, 51.0)).unwrap();
        }
        // Simulate a kill mid-append.
        {
            use std::io::Write;
            let mut f = OpenOptions::new().append(true).open(&path).unwrap();
            f.write_all(b"{\"name\":\"humidity\",\"uni").unwrap();
        }
        let mut store = TelemetryStore::open(&path).unwrap();
        assert_eq!(store.len(), 2);
        store.append(row("n1", "humidity", 2000, 52.0)).unwrap();
        drop(store);
        let store = TelemetryStore::open(&path).unwrap();
        assert_eq!(store.len(), 3);
    }

    #[test]
    fn corruption_in_the_middle_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.jsonl");
        std::fs::write(&path, b"not json\n{\"also\":\"bad\"}\n").unwrap();
        assert!(matches!(TelemetryStore::open(&path), Err(StoreError::Corrupt { line: 1, .. })));
    }

    #[test]
    fn query_equals_brute_force_filter() {
        let dir = tempfile::tempdir().unwrap();
        let mut store = TelemetryStore::create(&dir.path().join("s.jsonl")).unwrap();
        let mut state = 0xABCDu64;
        let mut rand = move || {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            (state >> 33) as i64
        };
        let mut all = Vec::new();
        for i in 0..300 {
            let node = format!("n{}", rand().rem_euclid(4));
            let name = ["temperature", "humidity", "wind_speed"][(rand().rem_euclid(3)) as usize];
            let t = rand().rem_euclid(100) * 500 + i; // unique-ish; i breaks collisions
            let r = row(&node, name, t, rand() as f64 / 1e6);
            if store.append(r.clone()).is_ok() {
                all.push(r);
            }
        }
        let q = SeriesQuery {
            node_id: Some("n2".into()),
            name: Some("humidity".into()),
            from: 5_000,
            to: 40_000,
        };
        let got = store.query(&q).unwrap();
        let mut expected: Vec<StoreRow> = all
            .iter()
            .filter(|r| {
                r.node_id == "n2"
                    && r.name == "humidity"
                    && (5_000..=40_000).contains(&r.captured_at)
            })
            .cloned()
            .collect();
        expected.sort_by_key(|r| r.captured_at);
        assert_eq!(got, expected);
    }
}
