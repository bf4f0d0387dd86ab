//! Browser bindings for the demo page in `www/`.
//!
//! Each export returns a JSON string; the plain functions underneath are
//! ordinary Rust and tested natively.

use serde::Serialize;
use spnas::io::dataset::DataSource;
use spnas::io::lut::decision_string;
use spnas::latency::{layer_runtime_relaxed, predict_discrete_runtime, synth_lut, CostModel, LayerLatency};
use spnas::search::{run_search, LossBreakdown, LrSchedule, SearchConfig};
use spnas::superkernel::{GateKind, Gates, IndicatorConfig, SuperKernel};
use spnas::supernet::{build_supernet, MacroConfig};
use spnas::tensor::{ParamStore, Tape};
use spnas::{seeded_rng, Result};
use wasm_bindgen::prelude::*;

const HEATMAP_CHANNELS: usize = 8;

#[derive(Debug, Serialize)]
pub struct Heatmap {
    pub channels: usize,
    pub k: usize,
    /// `|w_eff|`, channel-major, row-major inside a channel.
    pub values: Vec<f64>,
    pub decision: String,
    /// Squared norms of the shell, first half and second half.
    pub norms: [f64; 3],
    pub thresholds: [f64; 3],
}

/// Effective kernel of one random superkernel after placing each threshold
/// at the given multiple of its subset's squared norm (order k5, e3, e6).
pub fn heatmap(seed: u64, fractions: [f64; 3]) -> Result<Heatmap> {
    let mut store = ParamStore::new();
    let sk = SuperKernel::new(&mut store, "demo", HEATMAP_CHANNELS, 0, true, &mut seeded_rng(seed))?;
    for (g, f) in GateKind::ALL.into_iter().zip(fractions) {
        let n = sk.norm_scale(&store, g);
        sk.set_threshold(&mut store, g, f * n);
    }
    let eff = sk.effective_kernel(&store, IndicatorConfig::default())?;
    let snap = sk.derive_decision(&store);
    Ok(Heatmap {
        channels: HEATMAP_CHANNELS,
        k: 5,
        values: eff.data().iter().map(|v| v.abs()).collect(),
        decision: snap.derived.code(),
        norms: [snap.norm_sq_shell, snap.norm_sq_half3, snap.norm_sq_half6],
        thresholds: snap.thresholds,
    })
}

#[derive(Debug, Serialize)]
pub struct LatencyCurve {
    pub gate: String,
    pub x: Vec<f64>,
    pub runtime_ms: Vec<f64>,
    pub table: LayerLatency,
}

/// Relaxed runtime of one desk layer while `gate` sweeps [0, 1] and the
/// other two gates stay at `others`.
pub fn latency_curve(layer: usize, gate: &str, others: f64, points: usize) -> Result<LatencyCurve> {
    let cfg = MacroConfig::desk();
    let lut = synth_lut(&cfg, &CostModel::default())?;
    let entry = *lut.layer(layer)?;
    let points = points.max(2);
    let x: Vec<f64> = (0..points).map(|i| i as f64 / (points - 1) as f64).collect();
    let mut runtime_ms = Vec::with_capacity(points);
    for &v in &x {
        let (e3, e6, k5) = match gate {
            "e3" => (v, others, others),
            "e6" => (others, v, others),
            "k5" => (others, others, v),
            _ => return Err(spnas::Error::Config(format!("unknown gate {gate:?}; use e3, e6 or k5"))),
        };
        let mut tape = Tape::new();
        let g = Gates {
            e3: tape.scalar(e3),
            e6: tape.scalar(e6),
            k5: tape.scalar(k5),
        };
        let r = layer_runtime_relaxed(&mut tape, g, &entry)?;
        runtime_ms.push(tape.value(r).item());
    }
    Ok(LatencyCurve {
        gate: gate.to_string(),
        x,
        runtime_ms,
        table: entry,
    })
}

#[derive(Debug, Serialize)]
pub struct DemoSearch {
    pub architecture: String,
    pub runtime_ms: f64,
    pub largest_runtime_ms: f64,
    pub records: Vec<LossBreakdown>,
    /// Decision code of every layer at the end of each epoch.
    pub epochs: Vec<Vec<String>>,
}

/// A short search on the two-layer preset with synthetic data.
pub fn tiny_search(lambda: f64, seed: u64, epochs: usize) -> Result<DemoSearch> {
    let cfg = MacroConfig::tiny();
    let data = DataSource::parse("synth:classes=4,n=256,res=8")?.load(spnas::io::dataset::Split::Train)?;
    let lut = synth_lut(&cfg, &CostModel::default())?;
    let scfg = SearchConfig {
        lambda,
        seed,
        epochs: epochs.clamp(1, 50),
        batch_size: 32,
        lr: LrSchedule::cosine(0.02),
        ..SearchConfig::default()
    };
    let mut sn = build_supernet(&cfg, scfg.indicator, &mut seeded_rng(seed))?;
    let out = run_search(&mut sn, &data, &lut, &scfg)?;
    let largest = spnas::supernet::DerivedArchitecture::largest(&cfg);
    Ok(DemoSearch {
        architecture: decision_string(&out.arch.decisions),
        runtime_ms: predict_discrete_runtime(&out.arch, &lut)?.total_ms,
        largest_runtime_ms: predict_discrete_runtime(&largest, &lut)?.total_ms,
        records: out.trace.records,
        epochs: out
            .trace
            .snapshots
            .iter()
            .map(|s| s.layers.iter().map(|l| l.derived.code()).collect())
            .collect(),
    })
}

fn to_js<T: Serialize>(r: Result<T>) -> std::result::Result<String, JsError> {
    let v = r.map_err(|e| JsError::new(&e.to_string()))?;
    serde_json::to_string(&v).map_err(|e| JsError::new(&e.to_string()))
}

#[wasm_bindgen(js_name = kernelHeatmap)]
pub fn kernel_heatmap_js(seed: u32, k5: f64, e3: f64, e6: f64) -> std::result::Result<String, JsError> {
    to_js(heatmap(seed.into(), [k5, e3, e6]))
}

#[wasm_bindgen(js_name = latencyCurve)]
pub fn latency_curve_js(layer: usize, gate: &str, others: f64, points: usize) -> std::result::Result<String, JsError> {
    to_js(latency_curve(layer, gate, others, points))
}

#[wasm_bindgen(js_name = tinySearch)]
pub fn tiny_search_js(lambda: f64, seed: u32, epochs: usize) -> std::result::Result<String, JsError> {
    to_js(tiny_search(lambda, seed.into(), epochs))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn low_thresholds_keep_the_full_kernel() {
        let h = heatmap(1, [0.1, 0.1, 0.1]).unwrap();
        assert_eq!(h.decision, "k5e6");
        assert_eq!(h.values.len(), 8 * 25);
        assert!(h.values.iter().all(|v| *v > 0.0));
    }

    #[test]
    fn closing_k5_zeroes_the_shell() {
        let h = heatmap(1, [2.0, 0.1, 0.1]).unwrap();
        assert_eq!(h.decision, "k3e6");
        for c in 0..8 {
            for y in 0..5 {
                for x in 0..5 {
                    let shell = y == 0 || y == 4 || x == 0 || x == 4;
                    assert_eq!(h.values[c * 25 + y * 5 + x] == 0.0, shell);
                }
            }
        }
        assert_eq!(heatmap(1, [0.1, 2.0, 0.1]).unwrap().decision, "skip");
    }

    #[test]
    fn curve_hits_table_corners() {
        let c = latency_curve(0, "k5", 1.0, 11).unwrap();
        assert_eq!(c.x.len(), 11);
        assert_eq!(c.runtime_ms[10], c.table.r55_6);
        assert_eq!(c.runtime_ms[0], c.table.r33_6);
        assert!(c.runtime_ms.windows(2).all(|w| w[1] >= w[0]));
        assert!(latency_curve(0, "x", 1.0, 5).is_err());
        assert!(latency_curve(99, "e3", 1.0, 5).is_err());
    }

    #[test]
    fn demo_search_reports_each_epoch() {
        let s = tiny_search(0.1, 0, 2).unwrap();
        assert_eq!(s.epochs.len(), 2);
        assert_eq!(s.records.len(), 2 * 8);
        assert!(s.runtime_ms <= s.largest_runtime_ms);
    }
}
