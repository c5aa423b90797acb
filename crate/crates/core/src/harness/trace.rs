//! Recorded per-position head outputs, as newline-delimited JSON or a compact
//! binary file.
//!
//! Binary layout (little-endian): magic `EXTR`, then u32 `version`,
//! u32 `records`, u32 `L_total`, u32 `N_c`. Each record is a u64 sample id,
//! a u32 label, `L_total` u64 cumulative op counts and `L_total * N_c` f32
//! head outputs.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const TRACE_MAGIC: &[u8; 4] = b"EXTR";
pub const TRACE_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct TraceRecord<T> {
    pub sample_id: u64,
    pub true_label: usize,
    /// One output per exit position; the last is the classifier's softmax.
    pub head_outputs: Vec<Vec<T>>,
    /// Backbone MACs needed to reach each position.
    pub cumulative_ops: Vec<u64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RecordJson {
    sample_id: u64,
    true_label: usize,
    head_outputs: Vec<Vec<f64>>,
    cumulative_ops: Vec<u64>,
}

impl<T: Scalar> TraceRecord<T> {
    pub fn l_total(&self) -> usize {
        self.head_outputs.len()
    }

    pub fn num_classes(&self) -> usize {
        self.head_outputs.first().map_or(0, Vec::len)
    }

    pub fn validate(&self, l_total: usize, num_classes: usize) -> Result<()> {
        let bad = |msg: String| Error::format("trace record", format!("sample {}: {msg}", self.sample_id));
        if self.head_outputs.len() != l_total {
            return Err(bad(format!(
                "{} head outputs, expected {l_total}",
                self.head_outputs.len()
            )));
        }
        if self.cumulative_ops.len() != l_total {
            return Err(bad(format!(
                "{} op counts, expected {l_total}",
                self.cumulative_ops.len()
            )));
        }
        if let Some(i) = self.head_outputs.iter().position(|g| g.len() != num_classes) {
            return Err(bad(format!(
                "output {i} has length {}, expected {num_classes}",
                self.head_outputs[i].len()
            )));
        }
        if self.head_outputs.iter().flatten().any(|v| !v.is_finite()) {
            return Err(bad("non-finite head output".into()));
        }
        if self.cumulative_ops.windows(2).any(|w| w[1] < w[0]) {
            return Err(bad("cumulative ops decrease".into()));
        }
        if self.true_label >= num_classes {
            return Err(bad(format!("label {} out of range", self.true_label)));
        }
        Ok(())
    }

    fn to_json(&self) -> RecordJson {
        RecordJson {
            sample_id: self.sample_id,
            true_label: self.true_label,
            head_outputs: self
                .head_outputs
                .iter()
                .map(|g| g.iter().map(|v| v.widen()).collect())
                .collect(),
            cumulative_ops: self.cumulative_ops.clone(),
        }
    }

    fn from_json(r: RecordJson) -> Self {
        Self {
            sample_id: r.sample_id,
            true_label: r.true_label,
            head_outputs: r
                .head_outputs
                .into_iter()
                .map(|g| g.into_iter().map(T::narrow).collect())
                .collect(),
            cumulative_ops: r.cumulative_ops,
        }
    }
}

/// Checks every record against the first one's dimensions.
pub fn validate_traces<T: Scalar>(records: &[TraceRecord<T>]) -> Result<(usize, usize)> {
    let first = records.first().ok_or_else(|| Error::format("trace", "no records"))?;
    let dims = (first.l_total(), first.num_classes());
    for r in records {
        r.validate(dims.0, dims.1)?;
    }
    Ok(dims)
}

pub fn write_ndjson<T: Scalar, W: Write>(mut out: W, records: &[TraceRecord<T>]) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut out, &r.to_json())?;
        out.write_all(b"\n").map_err(|e| Error::io("<trace>", e))?;
    }
    out.flush().map_err(|e| Error::io("<trace>", e))
}

pub fn read_ndjson<T: Scalar, R: BufRead>(input: R) -> Result<Vec<TraceRecord<T>>> {
    let mut records = Vec::new();
    for (n, line) in input.lines().enumerate() {
        let line = line.map_err(|e| Error::io("<trace>", e))?;
        if line.trim().is_empty() {
            continue;
        }
        let r: RecordJson =
            serde_json::from_str(&line).map_err(|e| Error::format("trace", format!("line {}: {e}", n + 1)))?;
        records.push(TraceRecord::from_json(r));
    }
    validate_traces(&records)?;
    Ok(records)
}

pub fn write_binary<T: Scalar, W: Write>(mut out: W, records: &[TraceRecord<T>]) -> Result<()> {
    let (l_total, n_c) = validate_traces(records)?;
    let io = |e| Error::io("<trace>", e);
    let mut buf = Vec::with_capacity(20 + records.len() * (12 + l_total * (8 + 4 * n_c)));
    buf.extend_from_slice(TRACE_MAGIC);
    for v in [TRACE_VERSION, records.len() as u32, l_total as u32, n_c as u32] {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    for r in records {
        buf.extend_from_slice(&r.sample_id.to_le_bytes());
        buf.extend_from_slice(&(r.true_label as u32).to_le_bytes());
        for &ops in &r.cumulative_ops {
            buf.extend_from_slice(&ops.to_le_bytes());
        }
        for v in r.head_outputs.iter().flatten() {
            buf.extend_from_slice(&(v.widen() as f32).to_le_bytes());
        }
    }
    out.write_all(&buf).map_err(io)?;
    out.flush().map_err(io)
}

pub fn read_binary<T: Scalar, R: Read>(mut input: R) -> Result<Vec<TraceRecord<T>>> {
    let mut bytes = Vec::new();
    input.read_to_end(&mut bytes).map_err(|e| Error::io("<trace>", e))?;
    let mut cur = Cursor { bytes: &bytes, at: 0 };
    if cur.take(4)? != TRACE_MAGIC {
        return Err(Error::format("binary trace", "bad magic"));
    }
    let version = cur.u32()?;
    if version != TRACE_VERSION {
        return Err(Error::format("binary trace", format!("unsupported version {version}")));
    }
    let (count, l_total, n_c) = (cur.u32()? as usize, cur.u32()? as usize, cur.u32()? as usize);
    let mut records = Vec::with_capacity(count.min(1 << 20));
    for _ in 0..count {
        let sample_id = cur.u64()?;
        let true_label = cur.u32()? as usize;
        let cumulative_ops = (0..l_total).map(|_| cur.u64()).collect::<Result<Vec<_>>>()?;
        let head_outputs = (0..l_total)
            .map(|_| (0..n_c).map(|_| cur.f32().map(|v| T::narrow(v as f64))).collect())
            .collect::<Result<Vec<Vec<T>>>>()?;
        records.push(TraceRecord {
            sample_id,
            true_label,
            head_outputs,
            cumulative_ops,
        });
    }
    if cur.at != bytes.len() {
        return Err(Error::format(
            "binary trace",
            format!("{} trailing bytes", bytes.len() - cur.at),
        ));
    }
    validate_traces(&records)?;
    Ok(records)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.at + n;
        let s = self
            .bytes
            .get(self.at..end)
            .ok_or_else(|| Error::format("binary trace", "truncated"))?;
        self.at = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

/// Picks the format from the extension: `.bin`/`.extr` is binary, anything else NDJSON.
pub fn save_traces<T: Scalar>(path: &Path, records: &[TraceRecord<T>]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let out = BufWriter::new(file);
    if is_binary(path) {
        write_binary(out, records)
    } else {
        write_ndjson(out, records)
    }
}

pub fn load_traces<T: Scalar>(path: &Path) -> Result<Vec<TraceRecord<T>>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    if is_binary(path) {
        read_binary(BufReader::new(file))
    } else {
        read_ndjson(BufReader::new(file))
    }
}

fn is_binary(path: &Path) -> bool {
    matches!(path.extension().and_then(|e| e.to_str()), Some("bin" | "extr"))
}
