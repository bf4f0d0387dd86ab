//! Latency-aware architecture search and plain training loops.
//!
//! Search minimizes `CE + λ · ln(max(R, floor))` where `R` is the relaxed
//! network runtime. Weights and thresholds sit in one parameter store and
//! are updated by one optimizer in one step; there is no separate
//! architecture phase.

use rand::Rng as _;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::dataset::{augment_batch, epoch_order, Dataset};
use crate::latency::{network_runtime_from_gates, predict_discrete_runtime, LatencyTable};
use crate::superkernel::{subset_dropout, DecisionSnapshot, DropMask, IndicatorConfig};
use crate::supernet::{
    build_discrete, layer_options, DerivedArchitecture, GatePlan, KernelView, MacroConfig, Model, Network, Supernet,
    WeightSource,
};
use crate::tensor::{ParamKind, ParamStore, Tape, Var};
use crate::Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Decay {
    Constant,
    Cosine,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub initial: f64,
    pub decay: Decay,
    /// Final learning rate of the cosine schedule.
    pub min: f64,
}

impl LrSchedule {
    pub fn constant(lr: f64) -> Self {
        LrSchedule {
            initial: lr,
            decay: Decay::Constant,
            min: lr,
        }
    }

    pub fn cosine(lr: f64) -> Self {
        LrSchedule {
            initial: lr,
            decay: Decay::Cosine,
            min: 0.0,
        }
    }

    /// Learning rate at `step` of `total` steps.
    pub fn at(&self, step: usize, total: usize) -> f64 {
        match self.decay {
            Decay::Constant => self.initial,
            Decay::Cosine => {
                let f = if total == 0 { 0.0 } else { step as f64 / total as f64 };
                self.min + 0.5 * (self.initial - self.min) * (1.0 + (std::f64::consts::PI * f).cos())
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DropoutSchedule {
    pub p_start: f64,
    pub p_end: f64,
    /// Fraction of the run, from the start, during which dropout is active.
    pub active_epoch_fraction: f64,
}

impl Default for DropoutSchedule {
    fn default() -> Self {
        DropoutSchedule {
            p_start: 0.5,
            p_end: 0.0,
            active_epoch_fraction: 0.75,
        }
    }
}

impl DropoutSchedule {
    pub fn none() -> Self {
        DropoutSchedule {
            p_start: 0.0,
            p_end: 0.0,
            active_epoch_fraction: 0.0,
        }
    }

    /// Drop probability at `step` of `total`; linear inside the active window.
    pub fn at(&self, step: usize, total: usize) -> f64 {
        let f = if total == 0 { 1.0 } else { step as f64 / total as f64 };
        if f >= self.active_epoch_fraction {
            return 0.0;
        }
        let t = f / self.active_epoch_fraction;
        self.p_start + (self.p_end - self.p_start) * t
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchConfig {
    pub lambda: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: LrSchedule,
    pub momentum: f64,
    pub weight_decay: f64,
    pub dropout: DropoutSchedule,
    pub seed: u64,
    pub indicator: IndicatorConfig,
    pub runtime_floor_ms: f64,
    /// Global gradient-norm limit; 0 disables clipping.
    pub grad_clip: f64,
}

impl Default for SearchConfig {
    fn default() -> Self {
        SearchConfig {
            lambda: 0.1,
            epochs: 8,
            batch_size: 128,
            lr: LrSchedule::cosine(0.01),
            momentum: 0.9,
            weight_decay: 4e-5,
            dropout: DropoutSchedule::default(),
            seed: 0,
            indicator: IndicatorConfig::default(),
            runtime_floor_ms: 1e-3,
            grad_clip: 5.0,
        }
    }
}

impl SearchConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.epochs == 0 {
            return bad("epochs must be >= 1");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1");
        }
        if !(self.grad_clip >= 0.0) {
            return bad("grad_clip must be >= 0");
        }
        if !(self.runtime_floor_ms > 0.0) {
            return bad("runtime_floor_ms must be > 0");
        }
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return bad("lambda must be finite and >= 0");
        }
        if !(self.lr.initial > 0.0) || !(0.0..1.0).contains(&self.momentum) || !(self.weight_decay >= 0.0) {
            return bad("need lr > 0, momentum in [0, 1) and weight_decay >= 0");
        }
        let d = &self.dropout;
        if ![d.p_start, d.p_end, d.active_epoch_fraction].iter().all(|p| (0.0..=1.0).contains(p)) {
            return bad("dropout probabilities and fraction must lie in [0, 1]");
        }
        self.indicator.validate()
    }

    pub fn steps_per_epoch(&self, n: usize) -> usize {
        n.div_ceil(self.batch_size)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub step: usize,
    pub ce: f64,
    pub runtime_ms: f64,
    pub total: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochSnapshot {
    pub epoch: usize,
    pub step: usize,
    pub layers: Vec<DecisionSnapshot>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SearchTrace {
    pub records: Vec<LossBreakdown>,
    pub snapshots: Vec<EpochSnapshot>,
}

#[derive(Clone, Debug)]
pub struct SearchOutcome {
    pub arch: DerivedArchitecture,
    pub trace: SearchTrace,
}

/// `ce + λ · ln(max(runtime, floor))`.
pub fn nas_loss(tape: &mut Tape, ce: Var, runtime: Var, lambda: f64, floor_ms: f64) -> Result<Var> {
    let lr = tape.ln_floor(runtime, floor_ms)?;
    let scaled = tape.mul_const(lr, lambda);
    tape.add(ce, scaled)
}

/// SGD with momentum over every tensor of a parameter store.
///
/// Weight decay applies to [`ParamKind::Weight`] only.
#[derive(Clone, Debug)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    /// Rescale gradients whose global L2 norm exceeds this value.
    pub clip_norm: Option<f64>,
    velocity: Vec<Vec<f64>>,
}

impl Sgd {
    pub fn new(store: &ParamStore, momentum: f64, weight_decay: f64) -> Self {
        Sgd {
            momentum,
            weight_decay,
            clip_norm: None,
            velocity: store.ids().map(|id| vec![0.0; store.get(id).len()]).collect(),
        }
    }

    /// Apply one update to every parameter from its accumulated gradient.
    pub fn step(&mut self, store: &mut ParamStore, lr: f64) {
        if let Some(c) = self.clip_norm {
            let n = store.grad_norm();
            if n > c {
                store.scale_grads(c / n);
            }
        }
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            if !store.kind(id).is_trainable() {
                continue;
            }
            let decay = if store.kind(id) == ParamKind::Weight { self.weight_decay } else { 0.0 };
            let v = &mut self.velocity[id.index()];
            let t = store.get_mut(id);
            let Some(g) = t.grad().map(<[f64]>::to_vec) else { continue };
            for ((w, g), v) in t.data_mut().iter_mut().zip(&g).zip(v.iter_mut()) {
                *v = self.momentum * *v + g + decay * *w;
                *w -= lr * *v;
            }
        }
    }
}

fn check_finite(step: usize, value: f64, last: Option<f64>) -> Result<()> {
    if value.is_finite() {
        Ok(())
    } else {
        Err(Error::Diverged { step, last_finite: last })
    }
}

fn grads_finite(store: &ParamStore) -> bool {
    store.ids().all(|id| store.get(id).grad().is_none_or(|g| g.iter().all(|v| v.is_finite())))
}

fn check_data(model_classes: usize, data: &Dataset) -> Result<()> {
    if data.is_empty() {
        return Err(Error::invalid("training", "dataset is empty"));
    }
    if data.num_classes != model_classes {
        return Err(Error::Config(format!(
            "dataset has {} classes, model expects {}",
            data.num_classes, model_classes
        )));
    }
    Ok(())
}

/// Joint search over weights and thresholds, then hard-mode derivation.
pub fn run_search(
    supernet: &mut Supernet,
    data: &Dataset,
    lut: &LatencyTable,
    cfg: &SearchConfig,
) -> Result<SearchOutcome> {
    cfg.validate()?;
    check_data(supernet.macro_cfg.num_classes, data)?;
    if data.resolution != supernet.macro_cfg.input_resolution || data.channels != supernet.macro_cfg.input_channels {
        return Err(Error::Config("dataset geometry does not match the macro config".into()));
    }
    if lut.layers.len() != supernet.num_layers() {
        return Err(Error::Config(format!(
            "latency table has {} layers, supernet has {}",
            lut.layers.len(),
            supernet.num_layers()
        )));
    }
    let mut rng = Rng::seed_from_u64(cfg.seed);
    let mut opt = Sgd::new(&supernet.store, cfg.momentum, cfg.weight_decay);
    opt.clip_norm = (cfg.grad_clip > 0.0).then_some(cfg.grad_clip);
    let per_epoch = cfg.steps_per_epoch(data.len());
    let total = cfg.epochs * per_epoch;
    let mut trace = SearchTrace::default();
    let mut last = None;
    let mut tape = Tape::new();
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        let order = epoch_order(data.len(), &mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let p = cfg.dropout.at(step, total);
            let drops = (0..supernet.num_layers())
                .map(|_| if p > 0.0 { subset_dropout(p, p, &mut rng) } else { Ok(DropMask::default()) })
                .collect::<Result<Vec<_>>>()?;
            let (x, labels) = data.batch(chunk);
            tape.clear();
            let xv = tape.constant(x);
            let pass = supernet.forward(&mut tape, xv, GatePlan::Indicators(cfg.indicator), &drops)?;
            let ce = tape.softmax_cross_entropy(pass.logits, &labels)?;
            let (runtime, _) = network_runtime_from_gates(&mut tape, &pass.gates, lut)?;
            let loss = nas_loss(&mut tape, ce, runtime, cfg.lambda, cfg.runtime_floor_ms)?;
            let rec = LossBreakdown {
                step,
                ce: tape.value(ce).item(),
                runtime_ms: tape.value(runtime).item(),
                total: tape.value(loss).item(),
            };
            check_finite(step, rec.total, last)?;
            supernet.store.zero_grads();
            tape.backward(loss, &mut supernet.store)?;
            if !grads_finite(&supernet.store) {
                return Err(Error::Diverged { step, last_finite: last });
            }
            opt.step(&mut supernet.store, cfg.lr.at(step, total));
            last = Some(rec.total);
            trace.records.push(rec);
            step += 1;
        }
        trace.snapshots.push(EpochSnapshot {
            epoch,
            step,
            layers: supernet.kernels().map(|k| k.derive_decision(&supernet.store)).collect(),
        });
    }
    supernet.store.zero_grads();
    Ok(SearchOutcome {
        arch: supernet.derive()?,
        trace,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSchedule {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: LrSchedule,
    pub momentum: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub augment: bool,
}

impl Default for TrainSchedule {
    fn default() -> Self {
        TrainSchedule {
            epochs: 10,
            batch_size: 64,
            lr: LrSchedule::cosine(0.01),
            momentum: 0.9,
            weight_decay: 4e-5,
            seed: 0,
            augment: false,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub top1: f64,
    pub loss: f64,
}

fn count_correct(tape: &Tape, logits: Var, labels: &[usize]) -> usize {
    let l = tape.value(logits);
    let k = l.shape()[1];
    labels
        .iter()
        .enumerate()
        .filter(|&(i, &y)| {
            let row = &l.data()[i * k..(i + 1) * k];
            (0..k).fold(0, |b, j| if row[j] > row[b] { j } else { b }) == y
        })
        .count()
}

/// Top-1 accuracy and mean cross-entropy over a dataset.
pub fn evaluate_view<M: Model>(model: &M, data: &Dataset, batch: usize, view: KernelView) -> Result<Metrics> {
    check_data(model.num_classes(), data)?;
    let idx: Vec<usize> = (0..data.len()).collect();
    let (mut correct, mut ce_sum) = (0usize, 0.0);
    let mut tape = Tape::new();
    for chunk in idx.chunks(batch.max(1)) {
        let (x, labels) = data.batch(chunk);
        tape.clear();
        let xv = tape.constant(x);
        let out = model.logits_view(&mut tape, xv, view)?;
        let ce = tape.softmax_cross_entropy(out, &labels)?;
        ce_sum += tape.value(ce).item() * chunk.len() as f64;
        correct += count_correct(&tape, out, &labels);
    }
    Ok(Metrics {
        top1: correct as f64 / data.len() as f64,
        loss: ce_sum / data.len() as f64,
    })
}

pub fn evaluate<M: Model>(model: &M, data: &Dataset, batch: usize) -> Result<Metrics> {
    evaluate_view(model, data, batch, KernelView::Full)
}

/// SGD loop shared by plain training and the subset-training ablation.
/// Gradients of every view in `passes` are summed before each update.
fn train_loop<M: Model>(model: &mut M, passes: &[KernelView], train: &Dataset, schedule: &TrainSchedule) -> Result<()> {
    check_data(model.num_classes(), train)?;
    if schedule.batch_size == 0 {
        return Err(Error::Config("batch_size must be >= 1".into()));
    }
    let mut rng = Rng::seed_from_u64(schedule.seed);
    let mut opt = Sgd::new(model.params(), schedule.momentum, schedule.weight_decay);
    let total = schedule.epochs * train.len().div_ceil(schedule.batch_size);
    let (mut step, mut last) = (0, None);
    let mut tape = Tape::new();
    for _ in 0..schedule.epochs {
        let order = epoch_order(train.len(), &mut rng);
        for chunk in order.chunks(schedule.batch_size) {
            let (mut x, labels) = train.batch(chunk);
            if schedule.augment {
                augment_batch(&mut x, 2, &mut rng);
            }
            model.params_mut().zero_grads();
            let mut loss_sum = 0.0;
            for &view in passes {
                tape.clear();
                let xv = tape.constant(x.clone());
                let logits = model.logits_view(&mut tape, xv, view)?;
                let ce = tape.softmax_cross_entropy(logits, &labels)?;
                let v = tape.value(ce).item();
                check_finite(step, v, last)?;
                loss_sum += v;
                tape.backward(ce, model.params_mut())?;
            }
            if !grads_finite(model.params()) {
                return Err(Error::Diverged { step, last_finite: last });
            }
            opt.step(model.params_mut(), schedule.lr.at(step, total));
            last = Some(loss_sum);
            step += 1;
        }
    }
    model.params_mut().zero_grads();
    Ok(())
}

/// Plain SGD training followed by evaluation on `eval`.
pub fn train_discrete<M: Model>(model: &mut M, train: &Dataset, eval: &Dataset, schedule: &TrainSchedule) -> Result<Metrics> {
    train_loop(model, &[KernelView::Full], train, schedule)?;
    evaluate(model, eval, schedule.batch_size.max(1))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationResult {
    /// Accuracy using only the center 3×3 of every kernel.
    pub inner_top1: f64,
    /// Accuracy using the full 5×5 kernels.
    pub full_top1: f64,
}

/// Train a 5×5 network on the summed gradients of an inner-only pass and a
/// full pass, then evaluate under both views.
pub fn ablation_subset_training(
    network: &mut Network,
    train: &Dataset,
    eval: &Dataset,
    schedule: &TrainSchedule,
) -> Result<AblationResult> {
    if network.present_decisions().iter().any(|d| !matches!(d, crate::superkernel::Decision::MbConv { k: 5, .. })) {
        return Err(Error::InconsistentArchitecture("ablation needs 5×5 kernels in every layer".into()));
    }
    train_loop(network, &[KernelView::InnerOnly, KernelView::Full], train, schedule)?;
    let b = schedule.batch_size.max(1);
    Ok(AblationResult {
        inner_top1: evaluate_view(network, eval, b, KernelView::InnerOnly)?.top1,
        full_top1: evaluate_view(network, eval, b, KernelView::Full)?.top1,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub subset_inner_top1: f64,
    pub subset_full_top1: f64,
    pub individual_3x3_top1: f64,
    pub individual_5x5_top1: f64,
}

/// Subset-trained 5×5 network next to individually trained 3×3 and 5×5
/// networks of the same expansion, all from the same seed and schedule.
pub fn ablation_table(
    cfg: &MacroConfig,
    expansion: usize,
    train: &Dataset,
    eval: &Dataset,
    schedule: &TrainSchedule,
) -> Result<AblationTable> {
    let arch = |k| -> Result<DerivedArchitecture> {
        let d = crate::superkernel::Decision::mbconv(k, expansion)?;
        DerivedArchitecture::new(cfg.clone(), vec![d; cfg.num_layers()])
    };
    let fresh = |k| -> Result<Network> {
        let mut rng = Rng::seed_from_u64(schedule.seed);
        build_discrete(&arch(k)?, WeightSource::Fresh(&mut rng))
    };
    let mut shared = fresh(5)?;
    let sub = ablation_subset_training(&mut shared, train, eval, schedule)?;
    let i3 = train_discrete(&mut fresh(3)?, train, eval, schedule)?;
    let i5 = train_discrete(&mut fresh(5)?, train, eval, schedule)?;
    Ok(AblationTable {
        subset_inner_top1: sub.inner_top1,
        subset_full_top1: sub.full_top1,
        individual_3x3_top1: i3.top1,
        individual_5x5_top1: i5.top1,
    })
}

/// Uniformly random legal decision per layer.
pub fn random_architecture(cfg: &MacroConfig, rng: &mut Rng) -> DerivedArchitecture {
    let decisions = cfg
        .skip_mask()
        .into_iter()
        .map(|s| {
            let opts = layer_options(s);
            opts[rng.random_range(0..opts.len())]
        })
        .collect();
    DerivedArchitecture {
        macro_cfg: cfg.clone(),
        decisions,
    }
}

#[derive(Clone, Debug)]
pub struct RandomSearchResult {
    pub archs: Vec<DerivedArchitecture>,
    pub draws: usize,
    pub acceptance_rate: f64,
}

/// Draws checked before the acceptance rate is judged.
pub const RANDOM_SEARCH_DRAW_CAP: usize = 100_000;
const MIN_ACCEPTANCE: f64 = 1e-4;

/// Rejection sampling of uniformly random architectures whose predicted
/// runtime falls inside `[lo, hi]`.
pub fn random_search_baseline(
    cfg: &MacroConfig,
    lut: &LatencyTable,
    window: (f64, f64),
    n: usize,
    rng: &mut Rng,
) -> Result<RandomSearchResult> {
    let (lo, hi) = window;
    if lo.is_nan() || hi.is_nan() || lo > hi {
        return Err(Error::Config(format!("bad runtime window [{lo}, {hi}]")));
    }
    let mut archs = Vec::with_capacity(n);
    let mut draws = 0usize;
    while archs.len() < n {
        if draws >= RANDOM_SEARCH_DRAW_CAP {
            let rate = archs.len() as f64 / draws as f64;
            if rate < MIN_ACCEPTANCE || draws >= 100 * RANDOM_SEARCH_DRAW_CAP {
                return Err(Error::InfeasibleWindow { rate, draws });
            }
        }
        let a = random_architecture(cfg, rng);
        draws += 1;
        let r = predict_discrete_runtime(&a, lut)?.total_ms;
        if (lo..=hi).contains(&r) {
            archs.push(a);
        }
    }
    Ok(RandomSearchResult {
        archs,
        acceptance_rate: if draws == 0 { 1.0 } else { n as f64 / draws as f64 },
        draws,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seeded_rng;
    use crate::tensor::Tensor;

    fn loss_value(ce: f64, runtime: f64, lambda: f64) -> (f64, f64) {
        let mut store = ParamStore::new();
        let r = store.add("r", ParamKind::Threshold, Tensor::scalar(runtime));
        let mut tape = Tape::new();
        let c = tape.scalar(ce);
        let rv = tape.param(&store, r);
        let l = nas_loss(&mut tape, c, rv, lambda, 1e-3).unwrap();
        let value = tape.value(l).item();
        tape.backward(l, &mut store).unwrap();
        (value, store.get(r).grad().map_or(0.0, |g| g[0]))
    }

    #[test]
    fn zero_lambda_loss_is_cross_entropy() {
        assert_eq!(loss_value(1.25, 40.0, 0.0).0, 1.25);
    }

    #[test]
    fn loss_adds_scaled_log_runtime() {
        let (v, g) = loss_value(2.0, 80.0, 0.1);
        assert!((v - (2.0 + 0.1 * 80f64.ln())).abs() < 1e-12);
        assert!((v - 2.4382).abs() < 1e-4);
        assert!((g - 0.1 / 80.0).abs() < 1e-15);
    }

    #[test]
    fn runtime_below_floor_has_no_gradient() {
        let (v, g) = loss_value(1.0, 1e-6, 1.0);
        assert!((v - (1.0 + 1e-3f64.ln())).abs() < 1e-12);
        assert_eq!(g, 0.0);
    }

    #[test]
    fn sgd_decays_weights_only_and_leaves_buffers() {
        let mut store = ParamStore::new();
        let w = store.add("w", ParamKind::Weight, Tensor::scalar(2.0));
        let t = store.add("t", ParamKind::Threshold, Tensor::scalar(2.0));
        let b = store.add("b", ParamKind::Buffer, Tensor::scalar(2.0));
        for id in [w, t, b] {
            store.get_mut(id).accumulate_grad(&[0.5]);
        }
        let mut opt = Sgd::new(&store, 0.9, 0.1);
        opt.step(&mut store, 0.1);
        assert!((store.get(w).item() - (2.0 - 0.1 * (0.5 + 0.1 * 2.0))).abs() < 1e-15);
        assert!((store.get(t).item() - (2.0 - 0.1 * 0.5)).abs() < 1e-15);
        assert_eq!(store.get(b).item(), 2.0);
    }

    #[test]
    fn sgd_momentum_accumulates() {
        let mut store = ParamStore::new();
        let w = store.add("w", ParamKind::Threshold, Tensor::scalar(0.0));
        let mut opt = Sgd::new(&store, 0.5, 0.0);
        for _ in 0..2 {
            store.zero_grads();
            store.get_mut(w).accumulate_grad(&[1.0]);
            opt.step(&mut store, 1.0);
        }
        // v1 = 1, v2 = 0.5 + 1
        assert!((store.get(w).item() + 2.5).abs() < 1e-15);
    }

    #[test]
    fn clipping_bounds_the_global_norm() {
        let mut store = ParamStore::new();
        let w = store.add("w", ParamKind::Threshold, Tensor::new(&[2], vec![0.0, 0.0]).unwrap());
        store.get_mut(w).accumulate_grad(&[30.0, 40.0]);
        let mut opt = Sgd::new(&store, 0.0, 0.0);
        opt.clip_norm = Some(5.0);
        opt.step(&mut store, 1.0);
        assert_eq!(store.get(w).data(), &[-3.0, -4.0]);
    }

    #[test]
    fn cosine_schedule_endpoints() {
        let s = LrSchedule::cosine(0.01);
        assert!((s.at(0, 100) - 0.01).abs() < 1e-15);
        assert!((s.at(50, 100) - 0.005).abs() < 1e-15);
        assert!(s.at(100, 100).abs() < 1e-15);
        assert_eq!(LrSchedule::constant(0.3).at(77, 100), 0.3);
    }

    #[test]
    fn dropout_schedule_is_linear_then_off() {
        let d = DropoutSchedule::default();
        assert_eq!(d.at(0, 100), 0.5);
        assert!((d.at(30, 100) - 0.3).abs() < 1e-12);
        assert_eq!(d.at(75, 100), 0.0);
        assert_eq!(d.at(99, 100), 0.0);
        assert_eq!(DropoutSchedule::none().at(0, 10), 0.0);
    }

    #[test]
    fn validation_rejects_bad_settings() {
        assert!(SearchConfig::default().validate().is_ok());
        for bad in [
            SearchConfig { epochs: 0, ..SearchConfig::default() },
            SearchConfig { lambda: -1.0, ..SearchConfig::default() },
            SearchConfig { momentum: 1.0, ..SearchConfig::default() },
            SearchConfig { runtime_floor_ms: 0.0, ..SearchConfig::default() },
        ] {
            assert!(bad.validate().is_err());
        }
    }

    #[test]
    fn random_architectures_respect_skip_mask() {
        let cfg = MacroConfig::desk();
        let mask = cfg.skip_mask();
        let mut rng = seeded_rng(1);
        for _ in 0..200 {
            let a = random_architecture(&cfg, &mut rng);
            assert!(a.decisions.iter().zip(&mask).all(|(d, &s)| s || !d.is_skip()));
        }
    }

    #[test]
    fn random_baseline_samples_inside_window() {
        let cfg = MacroConfig::desk();
        let lut = crate::latency::synth_lut(&cfg, &crate::latency::CostModel::default()).unwrap();
        let hi = predict_discrete_runtime(&DerivedArchitecture::largest(&cfg), &lut).unwrap().total_ms;
        let res = random_search_baseline(&cfg, &lut, (0.5 * hi, 0.8 * hi), 20, &mut seeded_rng(2)).unwrap();
        assert_eq!(res.archs.len(), 20);
        for a in &res.archs {
            let r = predict_discrete_runtime(a, &lut).unwrap().total_ms;
            assert!((0.5 * hi..=0.8 * hi).contains(&r));
        }
        assert!(res.acceptance_rate > 0.0 && res.acceptance_rate <= 1.0);
    }

    #[test]
    fn random_baseline_rejects_empty_window() {
        let cfg = MacroConfig::desk();
        let lut = crate::latency::synth_lut(&cfg, &crate::latency::CostModel::default()).unwrap();
        assert!(random_search_baseline(&cfg, &lut, (2.0, 1.0), 1, &mut seeded_rng(0)).is_err());
        let err = random_search_baseline(&cfg, &lut, (-2.0, -1.0), 1, &mut seeded_rng(0)).unwrap_err();
        assert!(matches!(err, Error::InfeasibleWindow { .. }));
    }
}
