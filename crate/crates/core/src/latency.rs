//! Per-layer runtime lookup tables and the differentiable runtime model.
//!
//! A layer's relaxed runtime first scales the 5×5 entries by the expansion
//! gates, `R_e = e3 · (R55_3 + e6 · (R55_6 − R55_3))`, then interpolates
//! towards the 3×3 cost with the ratio `ρ = R33_6 / R55_6`:
//! `R = ρ · R_e + (1 − ρ) · R_e · k5`.
//!
//! The same function is evaluated here in multilinear corner form,
//! `e3 · Σ corner · weight(e6, k5)`, whose four corners are
//! `R55_3 · ρ`, `R55_3`, `R33_6`, `R55_6`. Both forms agree for all gate
//! values; the corner form returns the table entries bit-exactly at hard
//! gates. Note the `(e3, e6, k5) = (1, 0, 0)` corner is `R55_3 · ρ`, not the
//! measured `R33_3`.

use rand::SeedableRng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::superkernel::{Decision, Gates, IndicatorConfig};
use crate::supernet::{DerivedArchitecture, LayerSpec, MacroConfig, Supernet};
use crate::tensor::{Tape, Var};
use crate::Rng;

/// On-device figures published for a phone-measured table, shown for scale.
pub const REFERENCE_RMSE_MS: f64 = 1.32;
pub const REFERENCE_MAPE_PCT: f64 = 1.76;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerLatency {
    pub r33_3: f64,
    pub r33_6: f64,
    pub r55_3: f64,
    pub r55_6: f64,
}

impl LayerLatency {
    pub fn get(&self, d: Decision) -> f64 {
        match d {
            Decision::Skip => 0.0,
            Decision::MbConv { k: 3, e: 3 } => self.r33_3,
            Decision::MbConv { k: 3, .. } => self.r33_6,
            Decision::MbConv { e: 3, .. } => self.r55_3,
            Decision::MbConv { .. } => self.r55_6,
        }
    }

    /// `[(e6=0,k5=0), (e6=0,k5=1), (e6=1,k5=0), (e6=1,k5=1)]` of the relaxed model.
    pub fn corners(&self) -> [f64; 4] {
        [self.r55_3 * self.r33_6 / self.r55_6, self.r55_3, self.r33_6, self.r55_6]
    }

    fn entries(&self) -> [f64; 4] {
        [self.r33_3, self.r33_6, self.r55_3, self.r55_6]
    }

    /// Cost-ordering violations; noisy measurements may legitimately have some.
    pub fn monotonicity_warnings(&self, layer: usize) -> Vec<String> {
        let mut w = Vec::new();
        let mut check = |hi: f64, lo: f64, what: &str| {
            if hi < lo {
                w.push(format!("layer {layer}: {what} ({hi} < {lo})"));
            }
        };
        check(self.r55_3, self.r33_3, "r55_3 below r33_3");
        check(self.r55_6, self.r33_6, "r55_6 below r33_6");
        check(self.r33_6, self.r33_3, "r33_6 below r33_3");
        check(self.r55_6, self.r55_3, "r55_6 below r55_3");
        w
    }
}

/// Runtimes in milliseconds for every searchable layer plus a fixed overhead.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatencyTable {
    pub layers: Vec<LayerLatency>,
    pub overhead_ms: f64,
}

impl LatencyTable {
    pub fn validate(&self) -> Result<()> {
        if !(self.overhead_ms >= 0.0) || !self.overhead_ms.is_finite() {
            return Err(Error::Config(format!("overhead must be finite and >= 0, got {}", self.overhead_ms)));
        }
        for (i, l) in self.layers.iter().enumerate() {
            if l.entries().iter().any(|v| !(*v > 0.0) || !v.is_finite()) {
                return Err(Error::Config(format!("layer {i}: runtimes must be finite and > 0")));
            }
        }
        Ok(())
    }

    pub fn monotonicity_warnings(&self) -> Vec<String> {
        self.layers.iter().enumerate().flat_map(|(i, l)| l.monotonicity_warnings(i)).collect()
    }

    pub fn layer(&self, i: usize) -> Result<&LayerLatency> {
        self.layers.get(i).ok_or(Error::MissingLayer { layer: i })
    }

    fn covers(&self, n: usize) -> Result<()> {
        if self.layers.len() < n {
            return Err(Error::MissingLayer { layer: self.layers.len() });
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RuntimeEstimate {
    pub total_ms: f64,
    pub per_layer_ms: Vec<f64>,
    pub differentiable: bool,
}

/// `overhead + l0 + l1 + ...`, always in this order.
pub fn sum_runtime(overhead_ms: f64, per_layer: &[f64]) -> f64 {
    per_layer.iter().fold(overhead_ms, |acc, r| acc + r)
}

/// Relaxed runtime of one layer from its gate nodes.
pub fn layer_runtime_relaxed(tape: &mut Tape, gates: Gates, entry: &LayerLatency) -> Result<Var> {
    tape.gate_runtime(gates.e3, gates.e6, gates.k5, entry.corners())
}

/// Relaxed network runtime from already-recorded gates, plus per-layer nodes.
pub fn network_runtime_from_gates(tape: &mut Tape, gates: &[Gates], lut: &LatencyTable) -> Result<(Var, Vec<Var>)> {
    lut.covers(gates.len())?;
    let mut total = tape.scalar(lut.overhead_ms);
    let mut per_layer = Vec::with_capacity(gates.len());
    for (i, g) in gates.iter().enumerate() {
        let r = layer_runtime_relaxed(tape, *g, lut.layer(i)?)?;
        total = tape.add(total, r)?;
        per_layer.push(r);
    }
    Ok((total, per_layer))
}

/// Records only the gates of every layer and returns the relaxed runtime.
pub fn network_runtime_relaxed(
    tape: &mut Tape,
    supernet: &Supernet,
    lut: &LatencyTable,
    cfg: IndicatorConfig,
) -> Result<(Var, RuntimeEstimate)> {
    lut.covers(supernet.num_layers())?;
    let mut gates = Vec::with_capacity(supernet.num_layers());
    for k in supernet.kernels() {
        gates.push(k.gates(tape, &supernet.store, crate::superkernel::GateSource::Indicators(cfg))?);
    }
    let (total, per) = network_runtime_from_gates(tape, &gates, lut)?;
    let est = RuntimeEstimate {
        total_ms: tape.value(total).item(),
        per_layer_ms: per.iter().map(|v| tape.value(*v).item()).collect(),
        differentiable: true,
    };
    Ok((total, est))
}

/// Exact table lookup per decision; skipped layers cost nothing.
pub fn predict_discrete_runtime(arch: &DerivedArchitecture, lut: &LatencyTable) -> Result<RuntimeEstimate> {
    let per_layer_ms = arch
        .decisions
        .iter()
        .enumerate()
        .map(|(i, d)| Ok(lut.layer(i)?.get(*d)))
        .collect::<Result<Vec<_>>>()?;
    Ok(RuntimeEstimate {
        total_ms: sum_runtime(lut.overhead_ms, &per_layer_ms),
        per_layer_ms,
        differentiable: false,
    })
}

/// Parameters of the synthetic device.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostModel {
    /// Milliseconds per million multiply-accumulates.
    pub ms_per_mmac: f64,
    /// Standard deviation of the multiplicative Gaussian noise (0 disables it).
    pub noise: f64,
    pub seed: u64,
}

impl Default for CostModel {
    fn default() -> Self {
        CostModel {
            ms_per_mmac: 1.0,
            noise: 0.0,
            seed: 0,
        }
    }
}

/// Multiply-accumulates of one MBConv candidate.
pub fn mbconv_macs(spec: &LayerSpec, d: Decision) -> u64 {
    let Decision::MbConv { k, e } = d else { return 0 };
    let ce = (spec.in_channels * e) as u64;
    let (hi, ho) = (spec.in_resolution as u64, spec.out_resolution() as u64);
    let (ci, co, k) = (spec.in_channels as u64, spec.out_channels as u64, k as u64);
    ci * ce * hi * hi + ce * k * k * ho * ho + ce * co * ho * ho
}

/// Multiply-accumulates outside the searchable layers (stem, head, classifier).
pub fn fixed_macs(cfg: &MacroConfig) -> u64 {
    let layers = cfg.layers();
    let rs = cfg.stem_resolution() as u64;
    let stem = (cfg.input_channels * cfg.stem_out() * 9) as u64 * rs * rs;
    let (last_c, last_r) = layers
        .last()
        .map(|l| (l.out_channels, l.out_resolution()))
        .unwrap_or((cfg.stem_out(), cfg.stem_resolution()));
    let head = (last_c * cfg.head_out() * last_r * last_r) as u64;
    let fc = (cfg.head_out() * cfg.num_classes) as u64;
    stem + head + fc
}

/// Runtimes proportional to MAC counts, with optional seeded noise.
pub fn synth_lut(cfg: &MacroConfig, model: &CostModel) -> Result<LatencyTable> {
    cfg.validate()?;
    if !(model.ms_per_mmac > 0.0) || !(model.noise >= 0.0) {
        return Err(Error::Config("cost model needs ms_per_mmac > 0 and noise >= 0".into()));
    }
    let mut rng = Rng::seed_from_u64(model.seed);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mut jitter = |ms: f64| {
        let z: f64 = normal.sample(&mut rng);
        if model.noise > 0.0 {
            ms * (1.0 + model.noise * z).max(0.05)
        } else {
            ms
        }
    };
    let to_ms = |macs: u64| macs as f64 * 1e-6 * model.ms_per_mmac;
    let mut layers = Vec::new();
    for spec in cfg.layers() {
        let r = |k, e| to_ms(mbconv_macs(&spec, Decision::MbConv { k, e }));
        layers.push(LayerLatency {
            r33_3: jitter(r(3, 3)),
            r33_6: jitter(r(3, 6)),
            r55_3: jitter(r(5, 3)),
            r55_6: jitter(r(5, 6)),
        });
    }
    let overhead_ms = jitter(to_ms(fixed_macs(cfg)));
    Ok(LatencyTable { layers, overhead_ms })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LutReport {
    pub samples: usize,
    pub rmse_ms: f64,
    pub mean_abs_pct_error: f64,
}

/// Prediction error of the table against measured runtimes.
pub fn validate_lut(lut: &LatencyTable, samples: &[(DerivedArchitecture, f64)]) -> Result<LutReport> {
    if samples.is_empty() {
        return Err(Error::invalid("validate_lut", "no samples"));
    }
    let (mut se, mut ape) = (0.0, 0.0);
    for (arch, measured) in samples {
        if !(*measured > 0.0) {
            return Err(Error::invalid("validate_lut", format!("measured runtime {measured} is not positive")));
        }
        let pred = predict_discrete_runtime(arch, lut)?.total_ms;
        se += (pred - measured).powi(2);
        ape += ((pred - measured) / measured).abs();
    }
    let n = samples.len() as f64;
    Ok(LutReport {
        samples: samples.len(),
        rmse_ms: (se / n).sqrt(),
        mean_abs_pct_error: 100.0 * ape / n,
    })
}

/// Uniformly random legal architectures with runtimes from `lut`, each
/// perturbed by multiplicative Gaussian noise of relative scale `noise`.
pub fn sample_measurements(
    cfg: &MacroConfig,
    lut: &LatencyTable,
    n: usize,
    noise: f64,
    rng: &mut Rng,
) -> Result<Vec<(DerivedArchitecture, f64)>> {
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    (0..n)
        .map(|_| {
            let arch = crate::search::random_architecture(cfg, rng);
            let pred = predict_discrete_runtime(&arch, lut)?.total_ms;
            let z: f64 = normal.sample(rng);
            Ok((arch, pred * (1.0 + noise * z)))
        })
        .collect()
}
