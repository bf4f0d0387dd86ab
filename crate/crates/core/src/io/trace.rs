//! Search traces: per-step losses as CSV, per-epoch decision snapshots as
//! JSON lines.

use std::path::Path;

use super::{parse_error, read_text, write_atomic};
use crate::search::{EpochSnapshot, LossBreakdown};
use crate::Result;

const HEADER: &str = "step,ce,runtime_ms,total";

pub fn trace_to_csv(records: &[LossBreakdown]) -> String {
    let mut s = format!("{HEADER}\n");
    for r in records {
        s.push_str(&format!("{},{},{},{}\n", r.step, r.ce, r.runtime_ms, r.total));
    }
    s
}

pub fn trace_from_csv(text: &str, path: &Path) -> Result<Vec<LossBreakdown>> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h == HEADER => {}
        _ => return Err(parse_error(path, 1, format!("expected header '{HEADER}'"))),
    }
    lines
        .map(|(i, l)| {
            let line = i + 1;
            let f: Vec<&str> = l.split(',').collect();
            if f.len() != 4 {
                return Err(parse_error(path, line, format!("expected 4 fields, got {}", f.len())));
            }
            let num = |s: &str| s.parse::<f64>().map_err(|_| parse_error(path, line, format!("'{s}' is not a number")));
            Ok(LossBreakdown {
                step: f[0].parse().map_err(|_| parse_error(path, line, format!("bad step '{}'", f[0])))?,
                ce: num(f[1])?,
                runtime_ms: num(f[2])?,
                total: num(f[3])?,
            })
        })
        .collect()
}

pub fn snapshots_to_jsonl(snaps: &[EpochSnapshot]) -> String {
    snaps
        .iter()
        .map(|s| serde_json::to_string(s).expect("snapshot serializes") + "\n")
        .collect()
}

pub fn snapshots_from_jsonl(text: &str, path: &Path) -> Result<Vec<EpochSnapshot>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| parse_error(path, i + 1, e.to_string())))
        .collect()
}

pub fn save_trace(records: &[LossBreakdown], path: &Path) -> Result<()> {
    write_atomic(path, trace_to_csv(records).as_bytes())
}

pub fn load_trace(path: &Path) -> Result<Vec<LossBreakdown>> {
    trace_from_csv(&read_text(path)?, path)
}
