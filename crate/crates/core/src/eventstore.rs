//! Event-sequence data model, JSONL ingestion, seeded 3:1:1 splitting and the
//! empirical connection matrix used as the graph prior.

use std::fmt::Write as _;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("sequence {sequence}: {message}")]
    Invalid { sequence: usize, message: String },
    #[error("need at least {needed} sequences to split, got {got}")]
    TooFewSequences { needed: usize, got: usize },
    #[error("matrix file: {0}")]
    Matrix(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub t: f64,
    pub node: usize,
}

impl Event {
    pub fn new(t: f64, node: usize) -> Self {
        Self { t, node }
    }
}

/// Strictly time-ordered events observed on `[0, horizon]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EventSequence {
    pub events: Vec<Event>,
    pub horizon: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seq_id: Option<String>,
}

impl EventSequence {
    pub fn new(events: Vec<Event>, horizon: f64) -> Self {
        Self {
            events,
            horizon,
            seq_id: None,
        }
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    /// Checks ordering, range and horizon constraints against `k` nodes.
    pub fn validate(&self, k: usize) -> Result<(), String> {
        if !(self.horizon.is_finite() && self.horizon > 0.0) {
            return Err(format!("horizon must be positive and finite, got {}", self.horizon));
        }
        let mut prev: Option<f64> = None;
        for (i, e) in self.events.iter().enumerate() {
            if !(e.t.is_finite() && e.t >= 0.0) {
                return Err(format!("event {i}: invalid timestamp {}", e.t));
            }
            if e.node >= k {
                return Err(format!("event {i}: node {} out of range for K={k}", e.node));
            }
            if e.t > self.horizon {
                return Err(format!(
                    "event {i}: timestamp {} beyond horizon {}",
                    e.t, self.horizon
                ));
            }
            if let Some(p) = prev {
                if e.t <= p {
                    return Err(format!(
                        "event {i}: non-increasing timestamps ({p} then {})",
                        e.t
                    ));
                }
            }
            prev = Some(e.t);
        }
        Ok(())
    }

    pub fn display_id(&self, index: usize) -> String {
        self.seq_id.clone().unwrap_or_else(|| index.to_string())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub k: usize,
    pub sequences: Vec<EventSequence>,
}

impl Dataset {
    pub fn new(k: usize, sequences: Vec<EventSequence>) -> Result<Self, DataError> {
        for (i, s) in sequences.iter().enumerate() {
            s.validate(k).map_err(|message| DataError::Invalid {
                sequence: i,
                message,
            })?;
        }
        Ok(Self { k, sequences })
    }

    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }

    pub fn event_count(&self) -> usize {
        self.sequences.iter().map(|s| s.len()).sum()
    }

    /// Sequences that carry at least one scorable event (two or more events).
    pub fn scorable(&self) -> Dataset {
        Dataset {
            k: self.k,
            sequences: self
                .sequences
                .iter()
                .filter(|s| s.len() >= 2)
                .cloned()
                .collect(),
        }
    }

    /// Mean gap between consecutive events, pooled over all sequences.
    pub fn mean_inter_event_time(&self) -> Option<f64> {
        let (mut total, mut count) = (0.0, 0usize);
        for s in &self.sequences {
            for w in s.events.windows(2) {
                total += w[1].t - w[0].t;
                count += 1;
            }
        }
        (count > 0).then(|| total / count as f64)
    }

    /// Event counts per node.
    pub fn node_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.k];
        for s in &self.sequences {
            for e in &s.events {
                counts[e.node] += 1;
            }
        }
        counts
    }
}

/// Reads one sequence per line. Blank lines are skipped.
pub fn load_sequences(path: &Path, k: usize) -> Result<Dataset, DataError> {
    let file = std::fs::File::open(path).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })?;
    read_sequences(file, k)
}

pub fn read_sequences<R: Read>(reader: R, k: usize) -> Result<Dataset, DataError> {
    let mut sequences = Vec::new();
    for (i, line) in BufReader::new(reader).lines().enumerate() {
        let line = line.map_err(|e| DataError::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let seq: EventSequence = serde_json::from_str(&line).map_err(|e| DataError::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        seq.validate(k).map_err(|message| DataError::Invalid {
            sequence: sequences.len(),
            message,
        })?;
        sequences.push(seq);
    }
    Ok(Dataset { k, sequences })
}

pub fn write_sequences<W: Write>(mut out: W, sequences: &[EventSequence]) -> std::io::Result<()> {
    for s in sequences {
        serde_json::to_writer(&mut out, s)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

/// Largest node index + 1 across a JSONL file, for inputs whose node count is
/// not recorded elsewhere.
pub fn infer_node_count(path: &Path) -> Result<usize, DataError> {
    let d = load_sequences(path, usize::MAX)?;
    Ok(d
        .sequences
        .iter()
        .flat_map(|s| s.events.iter().map(|e| e.node + 1))
        .max()
        .unwrap_or(1))
}

/// Shuffles sequence indices with `seed` and cuts them into parts of sizes
/// `floor(3n/5)`, `floor(n/5)` and the remainder.
pub fn split(d: &Dataset, seed: u64) -> Result<(Dataset, Dataset, Dataset), DataError> {
    let n = d.sequences.len();
    if n < 5 {
        return Err(DataError::TooFewSequences { needed: 5, got: n });
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = 3 * n / 5;
    let n_valid = n / 5;
    let take = |range: &[usize]| Dataset {
        k: d.k,
        sequences: range.iter().map(|&i| d.sequences[i].clone()).collect(),
    };
    Ok((
        take(&idx[..n_train]),
        take(&idx[n_train..n_train + n_valid]),
        take(&idx[n_train + n_valid..]),
    ))
}

/// Dense row-major `K x K` matrix. Row `i` is the source node, column `j` the
/// target.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConnectionMatrix {
    pub k: usize,
    pub entries: Vec<f64>,
}

impl ConnectionMatrix {
    pub fn zeros(k: usize) -> Self {
        Self {
            k,
            entries: vec![0.0; k * k],
        }
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.entries[i * self.k + j]
    }

    pub fn max_entry(&self) -> f64 {
        self.entries.iter().copied().fold(0.0, f64::max)
    }
}

/// Counts consecutive transitions `i -> j` within each sequence and divides
/// by the largest pair count, so the strongest link maps to 1.
pub fn estimate_connection_matrix(train: &Dataset) -> ConnectionMatrix {
    let k = train.k;
    let mut counts = vec![0u64; k * k];
    for s in &train.sequences {
        for w in s.events.windows(2) {
            counts[w[0].node * k + w[1].node] += 1;
        }
    }
    let max = counts.iter().copied().max().unwrap_or(0);
    let entries = if max == 0 {
        vec![0.0; k * k]
    } else {
        counts.iter().map(|&c| c as f64 / max as f64).collect()
    };
    ConnectionMatrix { k, entries }
}

/// In-neighbour sets `N_u = { z : e_zu > tau } ∪ { u }`, sorted ascending.
pub fn neighborhoods(e: &ConnectionMatrix, tau: f64) -> Vec<Vec<usize>> {
    (0..e.k)
        .map(|u| {
            (0..e.k)
                .filter(|&z| z == u || e.get(z, u) > tau)
                .collect()
        })
        .collect()
}

/// `%g`-style rendering with six significant digits.
pub fn format_sig6(x: f64) -> String {
    if x == 0.0 {
        return "0".to_string();
    }
    if !x.is_finite() {
        return x.to_string();
    }
    let exp = x.abs().log10().floor() as i32;
    let sci = format!("{:.5e}", x);
    // rounding can bump the exponent (9.999996 -> 1.00000e1)
    let exp = sci
        .rsplit_once('e')
        .and_then(|(_, e)| e.parse::<i32>().ok())
        .unwrap_or(exp);
    if !(-4..6).contains(&exp) {
        let (mant, e) = sci.split_once('e').unwrap();
        let mant = trim_zeros(mant);
        let e: i32 = e.parse().unwrap();
        format!("{mant}e{}{:02}", if e < 0 { '-' } else { '+' }, e.abs())
    } else {
        let decimals = (5 - exp).max(0) as usize;
        trim_zeros(&format!("{:.*}", decimals, x)).to_string()
    }
}

fn trim_zeros(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}

/// Writes a square matrix as CSV, one row per line.
pub fn write_matrix_csv<W: Write>(mut out: W, k: usize, entries: &[f64]) -> std::io::Result<()> {
    assert_eq!(entries.len(), k * k);
    let mut line = String::new();
    for row in entries.chunks(k) {
        line.clear();
        for (j, v) in row.iter().enumerate() {
            if j > 0 {
                line.push(',');
            }
            let _ = write!(line, "{}", format_sig6(*v));
        }
        line.push('\n');
        out.write_all(line.as_bytes())?;
    }
    Ok(())
}

/// Writes a vector as a single-column CSV.
pub fn write_vector_csv<W: Write>(mut out: W, values: &[f64]) -> std::io::Result<()> {
    for v in values {
        writeln!(out, "{}", format_sig6(*v))?;
    }
    Ok(())
}

/// Parses a square numeric CSV; returns `(K, row-major entries)`.
pub fn read_matrix_csv<R: Read>(reader: R) -> Result<(usize, Vec<f64>), DataError> {
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (i, line) in BufReader::new(reader).lines().enumerate() {
        let line = line.map_err(|e| DataError::Matrix(e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        let row = line
            .split(',')
            .map(|c| c.trim().parse::<f64>())
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| DataError::Matrix(format!("line {}: {e}", i + 1)))?;
        rows.push(row);
    }
    let k = rows.len();
    if rows.iter().any(|r| r.len() != k) {
        return Err(DataError::Matrix(format!("expected {k} columns on every row")));
    }
    Ok((k, rows.into_iter().flatten().collect()))
}
