//! MobileNetV2-style macro-architecture as a single-path supernet, plus the
//! plain networks built from derived decisions.
//!
//! Every searchable layer is an MBConv block:
//!
//! ```text
//! x ─ expand 1×1 (in → 6·in) ─ affine ─ relu6 ─ superkernel depthwise ─ affine
//!   ─ relu6 ─ channel mask [1.., e6..] ─ project 1×1 (6·in → out) ─ affine ─ ×e3 ─(+x)─
//! ```
//!
//! The residual is added when the stride is 1 and the channel count is
//! unchanged. Those are also the only layers where the skip-op is allowed;
//! elsewhere `e3` is fixed at 1.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::superkernel::{Decision, DropMask, GateSource, Gates, IndicatorConfig, SuperKernel, E_MAX, K_MAX};
use crate::tensor::{ParamId, ParamKind, ParamStore, Tape, Tensor, Var};
use crate::Rng;

const STEM_KERNEL: usize = 3;
const STEM_STRIDE: usize = 2;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlockSpec {
    pub num_layers: usize,
    pub out_channels: usize,
    pub first_stride: usize,
}

impl BlockSpec {
    pub fn new(num_layers: usize, out_channels: usize, first_stride: usize) -> Self {
        BlockSpec {
            num_layers,
            out_channels,
            first_stride,
        }
    }
}

fn default_input_channels() -> usize {
    3
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MacroConfig {
    #[serde(default = "default_input_channels")]
    pub input_channels: usize,
    pub input_resolution: usize,
    pub stem_channels: usize,
    pub blocks: Vec<BlockSpec>,
    pub head_channels: usize,
    pub num_classes: usize,
    pub width_multiplier: f64,
}

/// Geometry of one searchable layer after width scaling.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LayerSpec {
    pub index: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub stride: usize,
    /// Spatial size of the layer input (square).
    pub in_resolution: usize,
    pub skip_allowed: bool,
}

impl LayerSpec {
    pub fn expanded_channels(&self) -> usize {
        self.in_channels * E_MAX
    }

    pub fn out_resolution(&self) -> usize {
        self.in_resolution.div_ceil(self.stride)
    }

    pub fn has_residual(&self) -> bool {
        self.stride == 1 && self.in_channels == self.out_channels
    }
}

impl Default for MacroConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl MacroConfig {
    /// 32×32 inputs, stem 8, three blocks of two layers (16, 24, 32), head 64.
    pub fn desk() -> Self {
        MacroConfig {
            input_channels: 3,
            input_resolution: 32,
            stem_channels: 8,
            blocks: vec![BlockSpec::new(2, 16, 2), BlockSpec::new(2, 24, 2), BlockSpec::new(2, 32, 2)],
            head_channels: 64,
            num_classes: 10,
            width_multiplier: 1.0,
        }
    }

    /// Seven blocks, 22 searchable layers, 224×224 inputs. Block widths are
    /// an approximation of common mobile search spaces, not a measured design.
    pub fn mobile() -> Self {
        let widths = [16, 24, 32, 64, 112, 184, 352];
        let layers = [1, 4, 4, 4, 4, 4, 1];
        let strides = [1, 2, 2, 2, 1, 2, 1];
        MacroConfig {
            input_channels: 3,
            input_resolution: 224,
            stem_channels: 16,
            blocks: (0..7).map(|i| BlockSpec::new(layers[i], widths[i], strides[i])).collect(),
            head_channels: 1504,
            num_classes: 1000,
            width_multiplier: 1.0,
        }
    }

    /// Two skippable layers on 8×8 inputs; its 25-architecture space is small
    /// enough to train exhaustively.
    pub fn tiny() -> Self {
        MacroConfig {
            input_channels: 3,
            input_resolution: 8,
            stem_channels: 8,
            blocks: vec![BlockSpec::new(2, 8, 1)],
            head_channels: 32,
            num_classes: 4,
            width_multiplier: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.blocks.is_empty() {
            return bad("at least one block is required".into());
        }
        if !(self.width_multiplier > 0.0) || !self.width_multiplier.is_finite() {
            return bad(format!("width_multiplier must be positive, got {}", self.width_multiplier));
        }
        if self.input_channels == 0 || self.input_resolution == 0 || self.num_classes == 0 {
            return bad("input_channels, input_resolution and num_classes must be positive".into());
        }
        if self.stem_channels == 0 || self.head_channels == 0 {
            return bad("stem_channels and head_channels must be positive".into());
        }
        for (i, b) in self.blocks.iter().enumerate() {
            if !(1..=4).contains(&b.num_layers) {
                return bad(format!("block {i}: num_layers must be in 1..=4, got {}", b.num_layers));
            }
            if !matches!(b.first_stride, 1 | 2) {
                return bad(format!("block {i}: first_stride must be 1 or 2, got {}", b.first_stride));
            }
            if b.out_channels == 0 {
                return bad(format!("block {i}: out_channels must be positive"));
            }
        }
        Ok(())
    }

    /// Channel count after width scaling, rounded to a positive even integer.
    pub fn scaled(&self, channels: usize) -> usize {
        let v = channels as f64 * self.width_multiplier;
        ((v / 2.0).round() as usize).max(1) * 2
    }

    pub fn stem_out(&self) -> usize {
        self.scaled(self.stem_channels)
    }

    pub fn head_out(&self) -> usize {
        self.scaled(self.head_channels)
    }

    pub fn stem_resolution(&self) -> usize {
        self.input_resolution.div_ceil(STEM_STRIDE)
    }

    pub fn layers(&self) -> Vec<LayerSpec> {
        let mut out = Vec::new();
        let mut c = self.stem_out();
        let mut r = self.stem_resolution();
        for b in &self.blocks {
            let oc = self.scaled(b.out_channels);
            for j in 0..b.num_layers {
                let stride = if j == 0 { b.first_stride } else { 1 };
                let spec = LayerSpec {
                    index: out.len(),
                    in_channels: c,
                    out_channels: oc,
                    stride,
                    in_resolution: r,
                    skip_allowed: stride == 1 && c == oc,
                };
                r = spec.out_resolution();
                c = oc;
                out.push(spec);
            }
        }
        out
    }

    pub fn num_layers(&self) -> usize {
        self.blocks.iter().map(|b| b.num_layers).sum()
    }

    pub fn skip_mask(&self) -> Vec<bool> {
        self.layers().iter().map(|l| l.skip_allowed).collect()
    }

    /// The same config with a different width multiplier.
    pub fn with_width(&self, width_multiplier: f64) -> Self {
        MacroConfig {
            width_multiplier,
            ..self.clone()
        }
    }
}

/// Decisions for every searchable layer of a macro config.
#[derive(Clone, Debug, PartialEq)]
pub struct DerivedArchitecture {
    pub macro_cfg: MacroConfig,
    pub decisions: Vec<Decision>,
}

impl DerivedArchitecture {
    pub fn new(macro_cfg: MacroConfig, decisions: Vec<Decision>) -> Result<Self> {
        let a = DerivedArchitecture { macro_cfg, decisions };
        a.validate()?;
        Ok(a)
    }

    pub fn largest(macro_cfg: &MacroConfig) -> Self {
        DerivedArchitecture {
            decisions: vec![Decision::LARGEST; macro_cfg.num_layers()],
            macro_cfg: macro_cfg.clone(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.macro_cfg.validate()?;
        let layers = self.macro_cfg.layers();
        if layers.len() != self.decisions.len() {
            return Err(Error::InconsistentArchitecture(format!(
                "{} decisions for {} searchable layers",
                self.decisions.len(),
                layers.len()
            )));
        }
        for (l, d) in layers.iter().zip(&self.decisions) {
            if d.is_skip() && !l.skip_allowed {
                return Err(Error::InconsistentArchitecture(format!(
                    "layer {} (stride {}, {} -> {} channels) cannot be skipped",
                    l.index, l.stride, l.in_channels, l.out_channels
                )));
            }
        }
        Ok(())
    }
}

/// Candidates for one layer in canonical order.
pub fn layer_options(skip_allowed: bool) -> &'static [Decision] {
    if skip_allowed {
        &Decision::ALL
    } else {
        &Decision::ALL[1..]
    }
}

/// Number of architectures, as a closed-form product. `None` on overflow.
pub fn space_size(skip_allowed: &[bool]) -> Option<u128> {
    skip_allowed
        .iter()
        .try_fold(1u128, |acc, &s| acc.checked_mul(layer_options(s).len() as u128))
}

/// Iterator over every decision vector; the last layer varies fastest.
#[derive(Clone, Debug)]
pub struct SpaceIter {
    skip_allowed: Vec<bool>,
    digits: Vec<usize>,
    done: bool,
}

impl Iterator for SpaceIter {
    type Item = Vec<Decision>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.done {
            return None;
        }
        let item: Vec<Decision> = self
            .digits
            .iter()
            .zip(&self.skip_allowed)
            .map(|(&d, &s)| layer_options(s)[d])
            .collect();
        self.done = true;
        for i in (0..self.digits.len()).rev() {
            self.digits[i] += 1;
            if self.digits[i] < layer_options(self.skip_allowed[i]).len() {
                self.done = false;
                break;
            }
            self.digits[i] = 0;
        }
        Some(item)
    }
}

/// Count and iterate the full space, refusing when it exceeds `cap`.
pub fn enumerate_space(cfg: &MacroConfig, cap: u128) -> Result<(u128, SpaceIter)> {
    cfg.validate()?;
    let mask = cfg.skip_mask();
    let size = space_size(&mask).unwrap_or(u128::MAX);
    if size > cap {
        return Err(Error::SpaceTooLarge { size, cap });
    }
    let iter = SpaceIter {
        digits: vec![0; mask.len()],
        skip_allowed: mask,
        done: false,
    };
    Ok((size, iter))
}

/// He-uniform: variance `2 / fan_in`, which keeps relu activations from
/// shrinking layer over layer in the absence of batch statistics.
pub(crate) fn uniform(rng: &mut Rng, shape: &[usize], fan_in: usize) -> Tensor {
    let b = (6.0 / fan_in as f64).sqrt();
    Tensor::from_fn(shape, |_| rng.random_range(-b..b))
}

#[derive(Clone, Copy, Debug)]
struct Affine {
    scale: ParamId,
    bias: ParamId,
}

impl Affine {
    fn new(store: &mut ParamStore, prefix: &str, c: usize) -> Self {
        Affine {
            scale: store.add(format!("{prefix}.scale"), ParamKind::Affine, Tensor::filled(&[c], 1.0)),
            bias: store.add(format!("{prefix}.bias"), ParamKind::Affine, Tensor::zeros(&[c])),
        }
    }

    fn from(store: &mut ParamStore, prefix: &str, scale: Tensor, bias: Tensor) -> Self {
        Affine {
            scale: store.add(format!("{prefix}.scale"), ParamKind::Affine, scale),
            bias: store.add(format!("{prefix}.bias"), ParamKind::Affine, bias),
        }
    }

    fn apply(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let s = tape.param(store, self.scale);
        let b = tape.param(store, self.bias);
        tape.channel_affine(x, s, b)
    }
}

#[derive(Clone, Debug)]
struct Stem {
    conv: ParamId,
    affine: Affine,
}

impl Stem {
    fn new(store: &mut ParamStore, cfg: &MacroConfig, rng: &mut Rng) -> Self {
        let (ci, co) = (cfg.input_channels, cfg.stem_out());
        let w = uniform(rng, &[co, ci, STEM_KERNEL, STEM_KERNEL], ci * STEM_KERNEL * STEM_KERNEL);
        Stem {
            conv: store.add("stem.conv", ParamKind::Weight, w),
            affine: Affine::new(store, "stem.affine", co),
        }
    }

    fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let w = tape.param(store, self.conv);
        let y = tape.conv2d(x, w, STEM_STRIDE)?;
        let y = self.affine.apply(tape, store, y)?;
        Ok(tape.relu6(y))
    }
}

#[derive(Clone, Debug)]
struct Head {
    conv: ParamId,
    affine: Affine,
    fc_w: ParamId,
    fc_b: ParamId,
}

impl Head {
    fn new(store: &mut ParamStore, cfg: &MacroConfig, in_channels: usize, rng: &mut Rng) -> Self {
        let h = cfg.head_out();
        let conv = store.add("head.conv", ParamKind::Weight, uniform(rng, &[h, in_channels], in_channels));
        let affine = Affine::new(store, "head.affine", h);
        let fc_w = store.add("head.fc.weight", ParamKind::Weight, uniform(rng, &[cfg.num_classes, h], h));
        let fc_b = store.add("head.fc.bias", ParamKind::Affine, Tensor::zeros(&[cfg.num_classes]));
        Head { conv, affine, fc_w, fc_b }
    }

    fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let w = tape.param(store, self.conv);
        let y = tape.conv2d_pointwise(x, w)?;
        let y = self.affine.apply(tape, store, y)?;
        let y = tape.relu6(y);
        let y = tape.global_avg_pool(y)?;
        let fw = tape.param(store, self.fc_w);
        let fb = tape.param(store, self.fc_b);
        tape.dense(y, fw, fb)
    }
}

/// Parameters of one MBConv block other than the depthwise kernel.
#[derive(Clone, Debug)]
struct Pointwise {
    expand: ParamId,
    expand_affine: Affine,
    dw_affine: Affine,
    project: ParamId,
    project_affine: Affine,
}

/// Gating hooks applied inside an MBConv block.
#[derive(Clone, Copy, Default)]
struct BlockGates {
    channel_mask: Option<Var>,
    e3: Option<Var>,
}

fn mbconv(
    tape: &mut Tape,
    store: &ParamStore,
    x: Var,
    p: &Pointwise,
    dw: Var,
    spec: &LayerSpec,
    gates: BlockGates,
) -> Result<Var> {
    let we = tape.param(store, p.expand);
    let h = tape.conv2d_pointwise(x, we)?;
    let h = p.expand_affine.apply(tape, store, h)?;
    let h = tape.relu6(h);
    let h = tape.conv2d_depthwise(h, dw, spec.stride)?;
    let h = p.dw_affine.apply(tape, store, h)?;
    let mut h = tape.relu6(h);
    if let Some(m) = gates.channel_mask {
        h = tape.channel_mul(h, m)?;
    }
    let wp = tape.param(store, p.project);
    let h = tape.conv2d_pointwise(h, wp)?;
    let mut h = p.project_affine.apply(tape, store, h)?;
    if let Some(g) = gates.e3 {
        h = tape.scale(h, g)?;
    }
    if spec.has_residual() {
        tape.add(x, h)
    } else {
        Ok(h)
    }
}

#[derive(Clone, Debug)]
struct SuperLayer {
    spec: LayerSpec,
    pw: Pointwise,
    kernel: SuperKernel,
}

/// Something that maps an input batch to class logits.
pub trait Model {
    fn params(&self) -> &ParamStore;
    fn params_mut(&mut self) -> &mut ParamStore;
    fn logits(&self, tape: &mut Tape, x: Var) -> Result<Var>;
    fn num_classes(&self) -> usize;

    /// Logits under a kernel view; models without 5×5 kernels ignore it.
    fn logits_view(&self, tape: &mut Tape, x: Var, _view: KernelView) -> Result<Var> {
        self.logits(tape, x)
    }
}

/// How the gates of every layer are produced for one forward pass.
#[derive(Clone, Copy, Debug)]
pub enum GatePlan<'a> {
    Indicators(IndicatorConfig),
    Pinned(&'a [Decision]),
}

/// Result of one supernet forward pass.
#[derive(Clone, Debug)]
pub struct SupernetPass {
    pub logits: Var,
    /// Gates as decided by the indicators, before any dropout mask.
    pub gates: Vec<Gates>,
}

#[derive(Clone, Debug)]
pub struct Supernet {
    pub macro_cfg: MacroConfig,
    pub indicator: IndicatorConfig,
    pub store: ParamStore,
    stem: Stem,
    layers: Vec<SuperLayer>,
    head: Head,
}

/// Stem, one superkernel MBConv layer per searchable layer, and the head.
pub fn build_supernet(cfg: &MacroConfig, icfg: IndicatorConfig, rng: &mut Rng) -> Result<Supernet> {
    cfg.validate()?;
    icfg.validate()?;
    let mut store = ParamStore::new();
    let stem = Stem::new(&mut store, cfg, rng);
    let mut layers = Vec::new();
    for spec in cfg.layers() {
        let (ci, ce, co) = (spec.in_channels, spec.expanded_channels(), spec.out_channels);
        let p = format!("layer{}", spec.index);
        let expand = store.add(format!("{p}.expand"), ParamKind::Weight, uniform(rng, &[ce, ci], ci));
        let expand_affine = Affine::new(&mut store, &format!("{p}.expand_affine"), ce);
        let kernel = SuperKernel::new(&mut store, &format!("{p}.dw"), ce, spec.index, spec.skip_allowed, rng)?;
        let dw_affine = Affine::new(&mut store, &format!("{p}.dw_affine"), ce);
        let project = store.add(format!("{p}.project"), ParamKind::Weight, uniform(rng, &[co, ce], ce));
        let project_affine = Affine::new(&mut store, &format!("{p}.project_affine"), co);
        layers.push(SuperLayer {
            spec,
            pw: Pointwise {
                expand,
                expand_affine,
                dw_affine,
                project,
                project_affine,
            },
            kernel,
        });
    }
    let last = layers.last().map(|l| l.spec.out_channels).unwrap_or(cfg.stem_out());
    let head = Head::new(&mut store, cfg, last, rng);
    Ok(Supernet {
        macro_cfg: cfg.clone(),
        indicator: icfg,
        store,
        stem,
        layers,
        head,
    })
}

impl Supernet {
    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn layer_specs(&self) -> Vec<LayerSpec> {
        self.layers.iter().map(|l| l.spec).collect()
    }

    pub fn kernels(&self) -> impl Iterator<Item = &SuperKernel> {
        self.layers.iter().map(|l| &l.kernel)
    }

    pub fn kernel(&self, layer: usize) -> &SuperKernel {
        &self.layers[layer].kernel
    }

    pub fn threshold_ids(&self) -> Vec<ParamId> {
        self.kernels().flat_map(|k| k.thresholds()).collect()
    }

    /// Full forward pass. `drops` is either empty or one mask per layer.
    pub fn forward(&self, tape: &mut Tape, x: Var, plan: GatePlan<'_>, drops: &[DropMask]) -> Result<SupernetPass> {
        if let GatePlan::Pinned(d) = plan {
            if d.len() != self.layers.len() {
                return Err(Error::InconsistentArchitecture(format!(
                    "{} pinned decisions for {} layers",
                    d.len(),
                    self.layers.len()
                )));
            }
        }
        if !drops.is_empty() && drops.len() != self.layers.len() {
            return Err(Error::invalid(
                "Supernet::forward",
                format!("{} dropout masks for {} layers", drops.len(), self.layers.len()),
            ));
        }
        let s = &self.store;
        let mut h = self.stem.forward(tape, s, x)?;
        let mut all_gates = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            let source = match plan {
                GatePlan::Indicators(cfg) => GateSource::Indicators(cfg),
                GatePlan::Pinned(d) => GateSource::Pinned(d[i]),
            };
            let drop = drops.get(i).copied().unwrap_or_default();
            let decided = layer.kernel.gates(tape, s, source)?;
            let (dw, g) = layer.kernel.effective_kernel_on(tape, s, decided, drop)?;
            let mask = tape.half_mask(g.e6, layer.spec.expanded_channels())?;
            let gates = BlockGates {
                channel_mask: Some(mask),
                e3: Some(g.e3),
            };
            h = mbconv(tape, s, h, &layer.pw, dw, &layer.spec, gates)?;
            all_gates.push(decided);
        }
        let logits = self.head.forward(tape, s, h)?;
        Ok(SupernetPass { logits, gates: all_gates })
    }

    pub fn derive(&self) -> Result<DerivedArchitecture> {
        let decisions = self.kernels().map(|k| k.derive_decision(&self.store).derived).collect();
        DerivedArchitecture::new(self.macro_cfg.clone(), decisions)
    }
}

impl Model for Supernet {
    fn params(&self) -> &ParamStore {
        &self.store
    }

    fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    fn logits(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        Ok(self.forward(tape, x, GatePlan::Indicators(self.indicator), &[])?.logits)
    }

    fn num_classes(&self) -> usize {
        self.macro_cfg.num_classes
    }
}

/// Which part of 5×5 depthwise kernels a discrete network uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum KernelView {
    #[default]
    Full,
    /// Shell of every 5×5 kernel zeroed; the center 3×3 only.
    InnerOnly,
}

#[derive(Clone, Debug)]
struct DiscreteLayer {
    spec: LayerSpec,
    decision: Decision,
    pw: Pointwise,
    dw: ParamId,
}

/// A plain MBConv network; skipped layers are absent.
#[derive(Clone, Debug)]
pub struct Network {
    pub arch: DerivedArchitecture,
    pub store: ParamStore,
    pub view: KernelView,
    stem: Stem,
    layers: Vec<DiscreteLayer>,
    head: Head,
}

/// Where a discrete network gets its initial weights.
pub enum WeightSource<'a> {
    Supernet(&'a Supernet),
    Fresh(&'a mut Rng),
}

fn rows(t: &Tensor, n: usize) -> Tensor {
    let cols = t.len() / t.shape()[0];
    let mut shape = t.shape().to_vec();
    shape[0] = n;
    Tensor::new(&shape, t.data()[..n * cols].to_vec()).expect("row slice")
}

fn cols(t: &Tensor, n: usize) -> Tensor {
    let (r, c) = (t.shape()[0], t.shape()[1]);
    let mut out = Vec::with_capacity(r * n);
    for i in 0..r {
        out.extend_from_slice(&t.data()[i * c..i * c + n]);
    }
    Tensor::new(&[r, n], out).expect("column slice")
}

/// The leading `ch` filters of a `[C, 5, 5]` kernel, center-cropped to `k`.
fn crop_kernel(t: &Tensor, ch: usize, k: usize) -> Tensor {
    let off = (K_MAX - k) / 2;
    Tensor::from_fn(&[ch, k, k], |i| {
        let (c, y, x) = (i / (k * k), (i / k) % k, i % k);
        t.data()[(c * K_MAX + y + off) * K_MAX + x + off]
    })
}

/// Plain network of the given decisions, initialized fresh or by copying
/// the matching superkernel subsets.
pub fn build_discrete(arch: &DerivedArchitecture, source: WeightSource<'_>) -> Result<Network> {
    arch.validate()?;
    let cfg = &arch.macro_cfg;
    let mut store = ParamStore::new();
    let net = match source {
        WeightSource::Fresh(rng) => {
            let stem = Stem::new(&mut store, cfg, rng);
            let mut layers = Vec::new();
            for (spec, &decision) in cfg.layers().iter().zip(&arch.decisions) {
                let Decision::MbConv { k, e } = decision else { continue };
                let (ci, ce, co) = (spec.in_channels, spec.in_channels * e, spec.out_channels);
                let p = format!("layer{}", spec.index);
                let expand = store.add(format!("{p}.expand"), ParamKind::Weight, uniform(rng, &[ce, ci], ci));
                let expand_affine = Affine::new(&mut store, &format!("{p}.expand_affine"), ce);
                let dw = store.add(format!("{p}.dw.weights"), ParamKind::Weight, uniform(rng, &[ce, k, k], k * k));
                let dw_affine = Affine::new(&mut store, &format!("{p}.dw_affine"), ce);
                let project = store.add(format!("{p}.project"), ParamKind::Weight, uniform(rng, &[co, ce], ce));
                let project_affine = Affine::new(&mut store, &format!("{p}.project_affine"), co);
                layers.push(DiscreteLayer {
                    spec: *spec,
                    decision,
                    pw: Pointwise {
                        expand,
                        expand_affine,
                        dw_affine,
                        project,
                        project_affine,
                    },
                    dw,
                });
            }
            let last = cfg.layers().last().map(|l| l.out_channels).unwrap_or(cfg.stem_out());
            let head = Head::new(&mut store, cfg, last, rng);
            (stem, layers, head)
        }
        WeightSource::Supernet(sn) => {
            if sn.macro_cfg != *cfg {
                return Err(Error::InconsistentArchitecture(
                    "architecture and supernet use different macro configs".into(),
                ));
            }
            let src = &sn.store;
            let copy = |store: &mut ParamStore, id: ParamId, t: Tensor| {
                store.add(src.name(id), src.kind(id), t)
            };
            let copy_affine = |store: &mut ParamStore, a: &Affine, n: usize| {
                Affine::from_named(store, src, a, n)
            };
            let stem = Stem {
                conv: copy(&mut store, sn.stem.conv, src.get(sn.stem.conv).detached()),
                affine: copy_affine(&mut store, &sn.stem.affine, cfg.stem_out()),
            };
            let mut layers = Vec::new();
            for (layer, &decision) in sn.layers.iter().zip(&arch.decisions) {
                let Decision::MbConv { k, e } = decision else { continue };
                let ce = layer.spec.in_channels * e;
                let pw = &layer.pw;
                let expand = copy(&mut store, pw.expand, rows(src.get(pw.expand), ce));
                let expand_affine = copy_affine(&mut store, &pw.expand_affine, ce);
                let dw = copy(&mut store, layer.kernel.weights, crop_kernel(src.get(layer.kernel.weights), ce, k));
                let dw_affine = copy_affine(&mut store, &pw.dw_affine, ce);
                let project = copy(&mut store, pw.project, cols(src.get(pw.project), ce));
                let project_affine = copy_affine(&mut store, &pw.project_affine, layer.spec.out_channels);
                layers.push(DiscreteLayer {
                    spec: layer.spec,
                    decision,
                    pw: Pointwise {
                        expand,
                        expand_affine,
                        dw_affine,
                        project,
                        project_affine,
                    },
                    dw,
                });
            }
            let h = &sn.head;
            let head = Head {
                conv: copy(&mut store, h.conv, src.get(h.conv).detached()),
                affine: copy_affine(&mut store, &h.affine, cfg.head_out()),
                fc_w: copy(&mut store, h.fc_w, src.get(h.fc_w).detached()),
                fc_b: copy(&mut store, h.fc_b, src.get(h.fc_b).detached()),
            };
            (stem, layers, head)
        }
    };
    let (stem, layers, head) = net;
    Ok(Network {
        arch: arch.clone(),
        store,
        view: KernelView::Full,
        stem,
        layers,
        head,
    })
}

impl Affine {
    fn from_named(store: &mut ParamStore, src: &ParamStore, a: &Affine, n: usize) -> Self {
        let scale = rows(src.get(a.scale), n);
        let bias = rows(src.get(a.bias), n);
        let prefix = src.name(a.scale).trim_end_matches(".scale").to_string();
        Affine::from(store, &prefix, scale, bias)
    }
}

impl Network {
    /// Decisions of the layers that are present, in order.
    pub fn present_decisions(&self) -> Vec<Decision> {
        self.layers.iter().map(|l| l.decision).collect()
    }

    pub fn forward(&self, tape: &mut Tape, x: Var, view: KernelView) -> Result<Var> {
        let s = &self.store;
        let mut h = self.stem.forward(tape, s, x)?;
        for layer in &self.layers {
            let mut dw = tape.param(s, layer.dw);
            if view == KernelView::InnerOnly && matches!(layer.decision, Decision::MbConv { k: 5, .. }) {
                let shape = s.get(layer.dw).shape().to_vec();
                let mask = Tensor::from_fn(&shape, |i| {
                    let (y, x) = ((i / K_MAX) % K_MAX, i % K_MAX);
                    if (1..K_MAX - 1).contains(&y) && (1..K_MAX - 1).contains(&x) {
                        1.0
                    } else {
                        0.0
                    }
                });
                let m = tape.constant(mask);
                dw = tape.mul(dw, m)?;
            }
            h = mbconv(tape, s, h, &layer.pw, dw, &layer.spec, BlockGates::default())?;
        }
        self.head.forward(tape, s, h)
    }
}

impl Model for Network {
    fn params(&self) -> &ParamStore {
        &self.store
    }

    fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    fn logits(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        self.forward(tape, x, self.view)
    }

    fn logits_view(&self, tape: &mut Tape, x: Var, view: KernelView) -> Result<Var> {
        self.forward(tape, x, view)
    }

    fn num_classes(&self) -> usize {
        self.arch.macro_cfg.num_classes
    }
}

/// Trainable parameters per searchable layer for one candidate, computed
/// from shapes alone (expand, depthwise, project and their affines).
pub fn candidate_params(spec: &LayerSpec, d: Decision) -> usize {
    match d {
        Decision::Skip => 0,
        Decision::MbConv { k, e } => {
            let ce = spec.in_channels * e;
            ce * spec.in_channels + 2 * ce + ce * k * k + 2 * ce + spec.out_channels * ce + 2 * spec.out_channels
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seeded_rng;

    #[test]
    fn one_layer_config_has_one_superkernel() {
        let cfg = MacroConfig {
            blocks: vec![BlockSpec::new(1, 8, 1)],
            ..MacroConfig::tiny()
        };
        let sn = build_supernet(&cfg, IndicatorConfig::default(), &mut seeded_rng(0)).unwrap();
        assert_eq!(sn.kernels().count(), 1);
    }

    #[test]
    fn mobile_preset_has_22_layers() {
        let cfg = MacroConfig::mobile();
        assert_eq!(cfg.num_layers(), 22);
        assert_eq!(cfg.layers().len(), 22);
    }

    #[test]
    fn half_width_halves_block_channels() {
        let cfg = MacroConfig::desk();
        let half = cfg.with_width(0.5);
        for b in &cfg.blocks {
            assert_eq!(half.scaled(b.out_channels), b.out_channels / 2);
        }
        assert_eq!(half.scaled(6), 4); // 3 rounds to an even 4
        assert_eq!(half.scaled(1), 2);
    }

    #[test]
    fn config_validation() {
        let mut c = MacroConfig::desk();
        c.blocks.clear();
        assert!(c.validate().is_err());
        let mut c = MacroConfig::desk();
        c.width_multiplier = 0.0;
        assert!(c.validate().is_err());
        let mut c = MacroConfig::desk();
        c.blocks[0].num_layers = 5;
        assert!(c.validate().is_err());
        let mut c = MacroConfig::desk();
        c.blocks[0].first_stride = 3;
        assert!(c.validate().is_err());
    }

    #[test]
    fn space_counts() {
        assert_eq!(space_size(&[true, true]), Some(25));
        assert_eq!(space_size(&[false, true, true]), Some(100));
        assert_eq!(space_size(&[true; 22]), Some(5u128.pow(22)));
        let (n, it) = enumerate_space(&MacroConfig::tiny(), 256).unwrap();
        let all: Vec<_> = it.collect();
        assert_eq!(n, 25);
        assert_eq!(all.len(), 25);
        let mut dedup = all.clone();
        dedup.sort();
        dedup.dedup();
        assert_eq!(dedup.len(), 25);
        assert!(matches!(
            enumerate_space(&MacroConfig::desk(), 256),
            Err(Error::SpaceTooLarge { .. })
        ));
    }

    #[test]
    fn skip_rejected_where_not_allowed() {
        let cfg = MacroConfig::desk();
        let mut d = vec![Decision::LARGEST; cfg.num_layers()];
        d[0] = Decision::Skip;
        assert!(DerivedArchitecture::new(cfg.clone(), d).is_err());
        assert!(DerivedArchitecture::new(cfg, vec![Decision::Skip]).is_err());
    }

    #[test]
    fn skipping_every_skippable_layer_keeps_only_the_rest() {
        let cfg = MacroConfig::desk();
        let decisions: Vec<_> = cfg
            .layers()
            .iter()
            .map(|l| if l.skip_allowed { Decision::Skip } else { Decision::mbconv(3, 3).unwrap() })
            .collect();
        let arch = DerivedArchitecture::new(cfg.clone(), decisions).unwrap();
        let net = build_discrete(&arch, WeightSource::Fresh(&mut seeded_rng(1))).unwrap();
        assert_eq!(net.present_decisions().len(), 3);
    }
}
