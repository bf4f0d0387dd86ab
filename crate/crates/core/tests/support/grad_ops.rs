//! Autodiff versus central differences for every tape op, a relaxed
//! superkernel layer and the relaxed network runtime. Shared by the
//! gradient test and the acceptance runner.

#![allow(dead_code)]

use rand::Rng as _;
use spnas::latency::{network_runtime_relaxed, synth_lut, CostModel};
use spnas::superkernel::{DropMask, GateKind, GateSource, IndicatorConfig, SuperKernel, HALF3, HALF6, SHELL};
use spnas::supernet::{build_supernet, MacroConfig};
use spnas::tensor::{finite_difference_check, ChannelHalf, GateMode, ParamId, ParamKind, ParamStore, Region, Subset, Tape, Tensor, Var};
use spnas::{seeded_rng, Result, Rng};

pub const STEP: f64 = 1e-6;

fn uniform(rng: &mut Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

/// `sum(out ⊙ c)` with a fixed pseudo-random `c`, so every output element
/// contributes with its own weight.
fn weighted_sum(tape: &mut Tape, out: Var) -> Result<Var> {
    let shape = tape.value(out).shape().to_vec();
    let mut rng = seeded_rng(99);
    let c = tape.constant(uniform(&mut rng, &shape, -1.0, 1.0));
    let m = tape.mul(out, c)?;
    Ok(tape.sum(m))
}

/// Worst relative error over every input of `op`.
fn check<F>(inputs: Vec<Tensor>, op: F) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut store = ParamStore::new();
    let ids: Vec<ParamId> = inputs
        .into_iter()
        .enumerate()
        .map(|(i, t)| store.add(format!("in{i}"), ParamKind::Weight, t))
        .collect();
    let f = |st: &ParamStore, tape: &mut Tape| -> Result<Var> {
        let vars: Vec<Var> = ids.iter().map(|&id| tape.param(st, id)).collect();
        let out = op(tape, &vars)?;
        weighted_sum(tape, out)
    };
    let mut worst = 0.0f64;
    for &id in &ids {
        worst = worst.max(finite_difference_check(&mut store, id, STEP, f)?);
    }
    Ok(worst)
}

/// One entry per op (and per interesting variant), with its worst error.
pub fn op_errors() -> Result<Vec<(&'static str, f64)>> {
    let mut rng = seeded_rng(5);
    let r = &mut rng;
    let x4 = |r: &mut Rng| uniform(r, &[2, 4, 5, 5], -1.0, 1.0);
    let scalar = |r: &mut Rng, lo: f64, hi: f64| Tensor::scalar(r.random_range(lo..hi));
    let mut out = Vec::new();

    out.push(("add", check(vec![x4(r), x4(r)], |t, v| t.add(v[0], v[1]))?));
    out.push(("sub", check(vec![x4(r), x4(r)], |t, v| t.sub(v[0], v[1]))?));
    out.push(("mul", check(vec![x4(r), x4(r)], |t, v| t.mul(v[0], v[1]))?));
    out.push(("scale", check(vec![x4(r), scalar(r, 0.5, 2.0)], |t, v| t.scale(v[0], v[1]))?));
    out.push(("mul_const", check(vec![x4(r)], |t, v| Ok(t.mul_const(v[0], -1.7)))?));
    out.push(("add_const", check(vec![x4(r)], |t, v| Ok(t.add_const(v[0], 0.3)))?));
    out.push(("sum", check(vec![x4(r)], |t, v| Ok(t.sum(v[0])))?));
    out.push((
        "channel_affine",
        check(vec![x4(r), uniform(r, &[4], 0.5, 1.5), uniform(r, &[4], -0.5, 0.5)], |t, v| {
            t.channel_affine(v[0], v[1], v[2])
        })?,
    ));
    out.push(("channel_mul", check(vec![x4(r), uniform(r, &[4], -1.0, 1.0)], |t, v| t.channel_mul(v[0], v[1]))?));
    // Values kept away from the kinks at 0 and 6.
    let relu_in = Tensor::from_fn(&[3, 7], |i| [-1.3, -0.4, 0.6, 2.2, 4.9, 6.8, 9.0][i % 7] + 0.01 * (i / 7) as f64);
    out.push(("relu6", check(vec![relu_in], |t, v| Ok(t.relu6(v[0])))?));
    for (name, k, stride) in [
        ("conv2d_depthwise k3 s1", 3, 1),
        ("conv2d_depthwise k5 s1", 5, 1),
        ("conv2d_depthwise k3 s2", 3, 2),
        ("conv2d_depthwise k5 s2", 5, 2),
    ] {
        let e = check(vec![x4(r), uniform(r, &[4, k, k], -1.0, 1.0)], move |t, v| {
            t.conv2d_depthwise(v[0], v[1], stride)
        })?;
        out.push((name, e));
    }
    out.push(("conv2d_pointwise", check(vec![x4(r), uniform(r, &[3, 4], -1.0, 1.0)], |t, v| t.conv2d_pointwise(v[0], v[1]))?));
    for (name, stride) in [("conv2d s1", 1), ("conv2d s2", 2)] {
        let e = check(vec![x4(r), uniform(r, &[3, 4, 3, 3], -1.0, 1.0)], move |t, v| t.conv2d(v[0], v[1], stride))?;
        out.push((name, e));
    }
    out.push(("global_avg_pool", check(vec![x4(r)], |t, v| t.global_avg_pool(v[0]))?));
    out.push((
        "dense",
        check(vec![uniform(r, &[2, 4], -1.0, 1.0), uniform(r, &[3, 4], -1.0, 1.0), uniform(r, &[3], -1.0, 1.0)], |t, v| {
            t.dense(v[0], v[1], v[2])
        })?,
    ));
    out.push((
        "softmax_cross_entropy",
        check(vec![uniform(r, &[3, 4], -2.0, 2.0)], |t, v| t.softmax_cross_entropy(v[0], &[0, 3, 1]))?,
    ));
    let subsets = [
        ("subset_sum_sq shell", SHELL),
        ("subset_sum_sq half3", HALF3),
        ("subset_sum_sq half6", HALF6),
        ("subset_sum_sq half6 inner", Subset::new(ChannelHalf::Second, Region::Inner)),
        ("subset_sum_sq all", Subset::new(ChannelHalf::All, Region::Full)),
    ];
    for (name, s) in subsets {
        out.push((name, check(vec![uniform(r, &[4, 5, 5], -1.0, 1.0)], move |t, v| t.subset_sum_sq(v[0], s))?));
    }
    out.push((
        "indicator relaxed",
        check(vec![scalar(r, 0.5, 1.5), scalar(r, 0.5, 1.5)], |t, v| t.indicator(v[0], v[1], 0.7, GateMode::FullyRelaxed))?,
    ));
    out.push((
        "compose_kernel",
        check(
            vec![uniform(r, &[4, 5, 5], -1.0, 1.0), scalar(r, 0.2, 0.9), scalar(r, 0.2, 0.9), scalar(r, 0.2, 0.9)],
            |t, v| t.compose_kernel(v[0], v[1], v[2], v[3]),
        )?,
    ));
    out.push(("half_mask", check(vec![scalar(r, 0.2, 0.9)], |t, v| t.half_mask(v[0], 6))?));
    out.push(("ln_floor", check(vec![scalar(r, 0.5, 3.0)], |t, v| t.ln_floor(v[0], 1e-3))?));
    out.push(("ln_floor clamped", check(vec![Tensor::scalar(1e-5)], |t, v| t.ln_floor(v[0], 1e-3))?));
    out.push((
        "gate_runtime",
        check(vec![scalar(r, 0.1, 0.9), scalar(r, 0.1, 0.9), scalar(r, 0.1, 0.9)], |t, v| {
            t.gate_runtime(v[0], v[1], v[2], [0.9, 1.3, 0.7, 2.1])
        })?,
    ));
    Ok(out)
}

/// A 6-channel skippable superkernel layer in relaxed mode, thresholds near
/// the current norms so every gate has a live slope. Returns the worst error
/// over the weights and each of the three thresholds.
pub fn superkernel_layer_errors() -> Result<Vec<(&'static str, f64)>> {
    let mut rng = seeded_rng(17);
    let mut store = ParamStore::new();
    let sk = SuperKernel::new(&mut store, "sk", 6, 1, true, &mut rng)?;
    for (g, frac) in [(GateKind::K5, 0.8), (GateKind::E3, 0.9), (GateKind::E6, 1.1)] {
        let n = sk.norm_scale(&store, g);
        sk.set_threshold(&mut store, g, frac * n);
    }
    let x = uniform(&mut rng, &[2, 6, 6, 6], -1.0, 1.0);
    let cfg = IndicatorConfig::relaxed(0.5);
    let f = |st: &ParamStore, tape: &mut Tape| -> Result<Var> {
        let xv = tape.constant(x.clone());
        let (y, _) = sk.forward(tape, st, xv, 1, GateSource::Indicators(cfg), DropMask::default())?;
        weighted_sum(tape, y)
    };
    let [t_k5, t_e3, t_e6] = sk.thresholds();
    let mut out = Vec::new();
    for (name, id) in [("weights", sk.weights), ("threshold k5", t_k5), ("threshold e3", t_e3), ("threshold e6", t_e6)] {
        out.push((name, finite_difference_check(&mut store, id, STEP, f)?));
    }
    Ok(out)
}

/// Relaxed runtime of a two-layer supernet w.r.t. every kernel and threshold.
pub fn network_runtime_errors() -> Result<f64> {
    let cfg = MacroConfig::tiny();
    let icfg = IndicatorConfig::relaxed(0.5);
    let mut sn = build_supernet(&cfg, icfg, &mut seeded_rng(3))?;
    let lut = synth_lut(&cfg, &CostModel::default())?;
    let ids: Vec<ParamId> = sn
        .kernels()
        .flat_map(|k| std::iter::once(k.weights).chain(k.thresholds()))
        .collect();
    let mut worst = 0.0f64;
    for id in ids {
        let snap = sn.clone();
        let e = finite_difference_check(&mut sn.store, id, STEP, |st, tape| {
            let mut view = snap.clone();
            view.store = st.clone();
            let (total, _) = network_runtime_relaxed(tape, &view, &lut, icfg)?;
            Ok(total)
        })?;
        worst = worst.max(e);
    }
    Ok(worst)
}
