//! File formats: trace CSVs, JSON artifacts, corpus manifests, content hashes.

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::preprocess::TraceSet;
use crate::synth::PhantomConfig;

pub const MANIFEST_FILE: &str = "manifest.json";

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    if !path.exists() {
        return Err(Error::MissingInput(path.to_path_buf()));
    }
    fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

/// Pretty JSON with a trailing newline.
pub fn to_json_bytes<T: Serialize>(value: &T) -> Result<Vec<u8>> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    Ok(bytes)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write_bytes(path, &to_json_bytes(value)?)
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    Ok(serde_json::from_slice(&read_bytes(path)?)?)
}

/// Trace CSV: header `t,s1,...,sS`, time in seconds, values in volts.
pub fn trace_to_csv(trace: &TraceSet) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["t".to_string()];
    header.extend((1..=trace.sensors()).map(|s| format!("s{s}")));
    w.write_record(&header)?;
    for k in 0..trace.len() {
        let mut rec = vec![(k as f64 / trace.sample_rate_hz).to_string()];
        rec.extend(trace.channels.iter().map(|c| c[k].to_string()));
        w.write_record(&rec)?;
    }
    w.into_inner()
        .map_err(|e| Error::io("flushing csv", e.into_error()))
}

/// Parse a trace CSV. The sample rate is taken from the first time step.
pub fn trace_from_csv(bytes: &[u8]) -> Result<TraceSet> {
    let mut r = csv::Reader::from_reader(bytes);
    let header = r.headers()?.clone();
    if header.get(0) != Some("t") || header.len() < 2 {
        return Err(Error::InvalidTrace(format!(
            "expected header t,s1,...; got {}",
            header.iter().collect::<Vec<_>>().join(",")
        )));
    }
    for (i, name) in header.iter().skip(1).enumerate() {
        if name != format!("s{}", i + 1) {
            return Err(Error::InvalidTrace(format!("unexpected column {name}")));
        }
    }
    let sensors = header.len() - 1;
    let mut times = Vec::new();
    let mut channels = vec![Vec::new(); sensors];
    for (line, rec) in r.records().enumerate() {
        let rec = rec?;
        let parse = |i: usize| -> Result<f64> {
            rec.get(i)
                .and_then(|v| v.trim().parse::<f64>().ok())
                .filter(|v| v.is_finite())
                .ok_or_else(|| Error::InvalidTrace(format!("bad value in row {} column {}", line + 2, i + 1)))
        };
        times.push(parse(0)?);
        for (s, ch) in channels.iter_mut().enumerate() {
            ch.push(parse(s + 1)?);
        }
    }
    if times.len() < 2 {
        return Err(Error::InvalidTrace("need at least 2 samples".into()));
    }
    let dt = times[1] - times[0];
    if !(dt > 0.0) {
        return Err(Error::InvalidTrace(format!("non-increasing time column (dt = {dt})")));
    }
    TraceSet::new(channels, 1.0 / dt)
}

pub fn read_trace(path: &Path) -> Result<TraceSet> {
    trace_from_csv(&read_bytes(path)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub file: String,
    pub label: u8,
    pub seed: u64,
    pub sha256: String,
}

/// Index of a generated corpus directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub phantom: PhantomConfig,
    pub master_seed: u64,
    pub traces: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn load(dir: &Path) -> Result<Manifest> {
        read_json(&dir.join(MANIFEST_FILE))
    }

    pub fn label_of(&self, file: &str) -> Option<u8> {
        self.traces.iter().find(|e| e.file == file).map(|e| e.label)
    }

    /// Add or replace entries, keeping them sorted by file name.
    pub fn merge(&mut self, entries: Vec<ManifestEntry>) {
        for e in entries {
            self.traces.retain(|t| t.file != e.file);
            self.traces.push(e);
        }
        self.traces.sort_by(|a, b| a.file.cmp(&b.file));
    }
}

pub fn trace_file_name(b: u8, index: usize) -> String {
    format!("b{b}_q{index:03}.csv")
}
