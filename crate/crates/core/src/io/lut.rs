//! Latency tables and runtime samples as CSV.
//!
//! Table layout: a `layer,r33_3,r33_6,r55_3,r55_6` header, one row per
//! searchable layer in order, and one `overhead,<ms>,,,` row.

use std::path::Path;

use super::{parse_error, read_text, write_atomic};
use crate::latency::{LatencyTable, LayerLatency};
use crate::superkernel::Decision;
use crate::supernet::{DerivedArchitecture, MacroConfig};
use crate::{Error, Result};

const LUT_HEADER: [&str; 5] = ["layer", "r33_3", "r33_6", "r55_3", "r55_6"];
const SAMPLE_HEADER: [&str; 2] = ["decisions", "measured_ms"];

pub fn lut_to_csv(lut: &LatencyTable) -> String {
    let mut s = LUT_HEADER.join(",");
    s.push('\n');
    for (i, l) in lut.layers.iter().enumerate() {
        s.push_str(&format!("{i},{},{},{},{}\n", l.r33_3, l.r33_6, l.r55_3, l.r55_6));
    }
    s.push_str(&format!("overhead,{},,,\n", lut.overhead_ms));
    s
}

fn records(text: &str) -> csv::StringRecordsIntoIter<&[u8]> {
    csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_reader(text.as_bytes())
        .into_records()
}

fn number(path: &Path, line: usize, field: &str, what: &str) -> Result<f64> {
    let v: f64 = field
        .trim()
        .parse()
        .map_err(|_| parse_error(path, line, format!("{what}: '{field}' is not a number")))?;
    if !v.is_finite() {
        return Err(parse_error(path, line, format!("{what} must be finite")));
    }
    Ok(v)
}

fn check_header(path: &Path, rec: Option<csv::Result<csv::StringRecord>>, want: &[&str]) -> Result<()> {
    let rec = rec
        .ok_or_else(|| parse_error(path, 1, "empty file"))?
        .map_err(|e| parse_error(path, 1, e.to_string()))?;
    if rec.iter().ne(want.iter().copied()) {
        return Err(parse_error(path, 1, format!("expected header '{}'", want.join(","))));
    }
    Ok(())
}

pub fn lut_from_csv(text: &str, path: &Path) -> Result<LatencyTable> {
    let mut rows = records(text);
    check_header(path, rows.next(), &LUT_HEADER)?;
    let mut layers = Vec::new();
    let mut overhead = None;
    for rec in rows {
        let rec = rec.map_err(|e| parse_error(path, e.position().map_or(0, |p| p.line() as usize), e.to_string()))?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        if rec.len() != 5 {
            return Err(parse_error(path, line, format!("expected 5 fields, got {}", rec.len())));
        }
        if overhead.is_some() {
            return Err(parse_error(path, line, "rows after the overhead row"));
        }
        if &rec[0] == "overhead" {
            if rec.iter().skip(2).any(|f| !f.is_empty()) {
                return Err(parse_error(path, line, "overhead row takes a single value"));
            }
            let v = number(path, line, &rec[1], "overhead")?;
            if v < 0.0 {
                return Err(parse_error(path, line, "overhead must be >= 0"));
            }
            overhead = Some(v);
            continue;
        }
        let idx: usize = rec[0]
            .parse()
            .map_err(|_| parse_error(path, line, format!("bad layer index '{}'", &rec[0])))?;
        if idx != layers.len() {
            return Err(parse_error(path, line, format!("expected layer {}, got {idx}", layers.len())));
        }
        let mut v = [0.0; 4];
        for (j, slot) in v.iter_mut().enumerate() {
            *slot = number(path, line, &rec[j + 1], LUT_HEADER[j + 1])?;
            if *slot <= 0.0 {
                return Err(parse_error(path, line, format!("{} must be > 0, got {}", LUT_HEADER[j + 1], *slot)));
            }
        }
        layers.push(LayerLatency {
            r33_3: v[0],
            r33_6: v[1],
            r55_3: v[2],
            r55_6: v[3],
        });
    }
    let overhead_ms = overhead.ok_or_else(|| parse_error(path, 0, "missing overhead row"))?;
    Ok(LatencyTable { layers, overhead_ms })
}

pub fn save_lut(lut: &LatencyTable, path: &Path) -> Result<()> {
    write_atomic(path, lut_to_csv(lut).as_bytes())
}

pub fn load_lut(path: &Path) -> Result<LatencyTable> {
    lut_from_csv(&read_text(path)?, path)
}

/// Decisions joined with `-`, e.g. `k5e6-skip-k3e3`.
pub fn decision_string(decisions: &[Decision]) -> String {
    decisions.iter().map(|d| d.code()).collect::<Vec<_>>().join("-")
}

pub fn parse_decision_string(s: &str) -> Result<Vec<Decision>> {
    s.split('-').map(Decision::from_code).collect()
}

pub fn samples_to_csv(samples: &[(DerivedArchitecture, f64)]) -> String {
    let mut s = SAMPLE_HEADER.join(",");
    s.push('\n');
    for (a, ms) in samples {
        s.push_str(&format!("{},{ms}\n", decision_string(&a.decisions)));
    }
    s
}

/// Measured runtimes of architectures over `cfg`.
pub fn samples_from_csv(text: &str, path: &Path, cfg: &MacroConfig) -> Result<Vec<(DerivedArchitecture, f64)>> {
    let mut rows = records(text);
    check_header(path, rows.next(), &SAMPLE_HEADER)?;
    let mut out = Vec::new();
    for rec in rows {
        let rec = rec.map_err(|e| parse_error(path, e.position().map_or(0, |p| p.line() as usize), e.to_string()))?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        if rec.len() != 2 {
            return Err(parse_error(path, line, format!("expected 2 fields, got {}", rec.len())));
        }
        let decisions = parse_decision_string(&rec[0]).map_err(|e| parse_error(path, line, e.to_string()))?;
        let arch = DerivedArchitecture::new(cfg.clone(), decisions).map_err(|e| parse_error(path, line, e.to_string()))?;
        let ms = number(path, line, &rec[1], "measured_ms")?;
        if ms <= 0.0 {
            return Err(parse_error(path, line, "measured_ms must be > 0"));
        }
        out.push((arch, ms));
    }
    if out.is_empty() {
        return Err(Error::invalid("samples_from_csv", format!("{} has no samples", path.display())));
    }
    Ok(out)
}

pub fn load_samples(path: &Path, cfg: &MacroConfig) -> Result<Vec<(DerivedArchitecture, f64)>> {
    samples_from_csv(&read_text(path)?, path, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::latency::{sample_measurements, synth_lut, CostModel};
    use crate::seeded_rng;

    fn p() -> &'static Path {
        Path::new("t.csv")
    }

    #[test]
    fn lut_round_trip_is_exact() {
        let cfg = MacroConfig::desk();
        let lut = synth_lut(&cfg, &CostModel { noise: 0.05, ..CostModel::default() }).unwrap();
        let text = lut_to_csv(&lut);
        let back = lut_from_csv(&text, p()).unwrap();
        assert_eq!(lut, back);
        assert_eq!(text, lut_to_csv(&back));
    }

    #[test]
    fn zero_runtime_names_the_line() {
        let text = "layer,r33_3,r33_6,r55_3,r55_6\n0,1,2,3,4\n1,1,0,3,4\noverhead,0.5,,,\n";
        match lut_from_csv(text, p()) {
            Err(Error::Parse { line, reason, .. }) => {
                assert_eq!(line, 3);
                assert!(reason.contains("r33_6"), "{reason}");
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn malformed_tables_are_rejected() {
        let bad = [
            "",
            "layer,a,b,c,d\noverhead,1,,,\n",
            "layer,r33_3,r33_6,r55_3,r55_6\n0,1,2,3,4\n",
            "layer,r33_3,r33_6,r55_3,r55_6\n1,1,2,3,4\noverhead,1,,,\n",
            "layer,r33_3,r33_6,r55_3,r55_6\n0,1,2,3\noverhead,1,,,\n",
            "layer,r33_3,r33_6,r55_3,r55_6\n0,1,2,x,4\noverhead,1,,,\n",
            "layer,r33_3,r33_6,r55_3,r55_6\noverhead,1,,,\n0,1,2,3,4\n",
            "layer,r33_3,r33_6,r55_3,r55_6\noverhead,1,2,,\n",
            "layer,r33_3,r33_6,r55_3,r55_6\n0,1,2,inf,4\noverhead,1,,,\n",
        ];
        for t in bad {
            assert!(lut_from_csv(t, p()).is_err(), "accepted {t:?}");
        }
    }

    #[test]
    fn samples_round_trip() {
        let cfg = MacroConfig::desk();
        let lut = synth_lut(&cfg, &CostModel::default()).unwrap();
        let s = sample_measurements(&cfg, &lut, 12, 0.01, &mut seeded_rng(3)).unwrap();
        let back = samples_from_csv(&samples_to_csv(&s), p(), &cfg).unwrap();
        assert_eq!(s.len(), back.len());
        for ((a, x), (b, y)) in s.iter().zip(&back) {
            assert_eq!(a, b);
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn samples_with_illegal_skip_are_rejected() {
        let cfg = MacroConfig::desk();
        let codes = vec!["skip"; cfg.num_layers()].join("-");
        let text = format!("decisions,measured_ms\n{codes},1.0\n");
        assert!(matches!(samples_from_csv(&text, p(), &cfg), Err(Error::Parse { line: 2, .. })));
    }
}
