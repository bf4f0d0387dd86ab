//! The searchable depthwise superkernel.
//!
//! One `[C, 5, 5]` weight block, where `C = 6 * input_channels`, encodes every
//! MBConv candidate of a layer as a weight subset:
//!
//! ```text
//!   inner    center 3×3 of every filter          (3×3 kernel)
//!   shell    5×5 minus the center 3×3            (extra weights of 5×5)
//!   half3    first C/2 channels                  (expansion 3)
//!   half6    last C/2 channels                   (extra channels of expansion 6)
//! ```
//!
//! Three trainable thresholds gate the subsets by their squared L2 norm:
//! `t_k5` gates the shell, `t_e6` the second half, `t_e3` the whole kernel
//! (closing it turns the layer into a skip). The half norms are taken over
//! the kernel after the kernel-size decision, so the shell only counts
//! towards them when `t_k5` is passed.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{ChannelHalf, GateMode, Region, ParamId, ParamKind, ParamStore, Subset, Tape, Tensor, Var};
use crate::Rng;

pub const K_MAX: usize = 5;
pub const K_INNER: usize = 3;
pub const E_MAX: usize = 6;
pub const E_MIN: usize = 3;
/// Initial thresholds as a fraction of each subset's initial normalized norm.
pub const THRESHOLD_INIT: f64 = 0.5;

pub const SHELL: Subset = Subset::new(ChannelHalf::All, Region::Shell);
pub const HALF3: Subset = Subset::new(ChannelHalf::First, Region::Full);
pub const HALF6: Subset = Subset::new(ChannelHalf::Second, Region::Full);
const HALF3_INNER: Subset = Subset::new(ChannelHalf::First, Region::Inner);
const HALF3_SHELL: Subset = Subset::new(ChannelHalf::First, Region::Shell);
const HALF6_INNER: Subset = Subset::new(ChannelHalf::Second, Region::Inner);
const HALF6_SHELL: Subset = Subset::new(ChannelHalf::Second, Region::Shell);

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct IndicatorConfig {
    /// Sigmoid temperature τ in `σ((x - t) / τ)`.
    pub temperature: f64,
    pub mode: GateMode,
}

impl Default for IndicatorConfig {
    fn default() -> Self {
        IndicatorConfig {
            temperature: 1.0,
            mode: GateMode::HardForwardSoftBackward,
        }
    }
}

impl IndicatorConfig {
    pub fn relaxed(temperature: f64) -> Self {
        IndicatorConfig {
            temperature,
            mode: GateMode::FullyRelaxed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0) || !self.temperature.is_finite() {
            return Err(Error::Config(format!(
                "indicator temperature must be positive, got {}",
                self.temperature
            )));
        }
        Ok(())
    }
}

/// One MBConv candidate, or the skip-op.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Decision {
    Skip,
    MbConv { k: usize, e: usize },
}

impl Decision {
    /// Every candidate in canonical order.
    pub const ALL: [Decision; 5] = [
        Decision::Skip,
        Decision::MbConv { k: 3, e: 3 },
        Decision::MbConv { k: 3, e: 6 },
        Decision::MbConv { k: 5, e: 3 },
        Decision::MbConv { k: 5, e: 6 },
    ];

    pub const LARGEST: Decision = Decision::MbConv { k: 5, e: 6 };

    pub fn mbconv(k: usize, e: usize) -> Result<Self> {
        if !matches!(k, 3 | 5) || !matches!(e, 3 | 6) {
            return Err(Error::Config(format!("no MBConv candidate with k={k}, e={e}")));
        }
        Ok(Decision::MbConv { k, e })
    }

    pub fn is_skip(self) -> bool {
        self == Decision::Skip
    }

    /// Hard gate values `(k5, e6, e3)` that select this candidate.
    pub fn gates(self) -> (f64, f64, f64) {
        match self {
            Decision::Skip => (0.0, 0.0, 0.0),
            Decision::MbConv { k, e } => (
                if k == 5 { 1.0 } else { 0.0 },
                if e == 6 { 1.0 } else { 0.0 },
                1.0,
            ),
        }
    }

    /// Compact code used in CSV files: `skip`, `k3e6`, ...
    pub fn code(self) -> String {
        match self {
            Decision::Skip => "skip".into(),
            Decision::MbConv { k, e } => format!("k{k}e{e}"),
        }
    }

    pub fn from_code(s: &str) -> Result<Self> {
        if s == "skip" {
            return Ok(Decision::Skip);
        }
        let bad = || Error::Config(format!("bad decision code {s:?}"));
        let rest = s.strip_prefix('k').ok_or_else(bad)?;
        let (k, e) = rest.split_once('e').ok_or_else(bad)?;
        Decision::mbconv(k.parse().map_err(|_| bad())?, e.parse().map_err(|_| bad())?)
    }
}

impl Serialize for Decision {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        use serde::ser::SerializeStruct;
        match *self {
            Decision::Skip => s.serialize_str("skip"),
            Decision::MbConv { k, e } => {
                let mut st = s.serialize_struct("MbConv", 2)?;
                st.serialize_field("k", &k)?;
                st.serialize_field("e", &e)?;
                st.end()
            }
        }
    }
}

impl<'de> Deserialize<'de> for Decision {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Tag(String),
            Op {
                k: usize,
                e: usize,
            },
        }
        #[derive(Deserialize)]
        #[serde(deny_unknown_fields)]
        struct Strict {
            k: usize,
            e: usize,
        }
        let v = serde_json::Value::deserialize(d)?;
        let raw = match &v {
            serde_json::Value::Object(_) => {
                let s: Strict = serde_json::from_value(v).map_err(serde::de::Error::custom)?;
                Raw::Op { k: s.k, e: s.e }
            }
            _ => serde_json::from_value(v).map_err(serde::de::Error::custom)?,
        };
        match raw {
            Raw::Tag(t) if t == "skip" => Ok(Decision::Skip),
            Raw::Tag(t) => Err(serde::de::Error::custom(format!("unknown decision {t:?}"))),
            Raw::Op { k, e } => Decision::mbconv(k, e).map_err(serde::de::Error::custom),
        }
    }
}

/// Read-only view of one weight subset; iterates the shared storage in place.
#[derive(Clone, Copy, Debug)]
pub struct SubsetView<'a> {
    data: &'a [f64],
    channels: usize,
    subset: Subset,
}

impl<'a> SubsetView<'a> {
    pub fn iter(&self) -> impl Iterator<Item = f64> + 'a {
        let (data, c, subset) = (self.data, self.channels, self.subset);
        (0..c).flat_map(move |ch| {
            (0..K_MAX * K_MAX).filter_map(move |i| {
                let (y, x) = (i / K_MAX, i % K_MAX);
                subset
                    .contains(ch, c, y, x, K_MAX)
                    .then(|| data[(ch * K_MAX + y) * K_MAX + x])
            })
        })
    }

    pub fn len(&self) -> usize {
        self.iter().count()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Unnormalized squared L2 norm of a subset.
pub fn group_norm_sq(view: SubsetView<'_>) -> f64 {
    view.iter().map(|v| v * v).sum()
}

/// Forward value of a gate.
pub fn indicator(norm_sq: f64, t: f64, cfg: &IndicatorConfig) -> f64 {
    match cfg.mode {
        GateMode::HardForwardSoftBackward => {
            if norm_sq > t {
                1.0
            } else {
                0.0
            }
        }
        GateMode::FullyRelaxed => crate::tensor::kernels::sigmoid((norm_sq - t) / cfg.temperature),
    }
}

/// Per-step multiplicative masks on the shell and half6 subsets.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DropMask {
    /// The shell was dropped for this step.
    pub shell: bool,
    /// The second channel half was dropped for this step.
    pub half6: bool,
}

/// Independently drop the shell with probability `p_shell` and the second
/// channel half with probability `p_half6`.
pub fn subset_dropout(p_shell: f64, p_half6: f64, rng: &mut Rng) -> Result<DropMask> {
    for p in [p_shell, p_half6] {
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::Config(format!("dropout probability {p} outside [0, 1]")));
        }
    }
    // Draw both unconditionally so the stream does not depend on the outcome.
    let a: f64 = rng.random();
    let b: f64 = rng.random();
    Ok(DropMask {
        shell: a < p_shell,
        half6: b < p_half6,
    })
}

/// Where a layer's gate values come from during a forward pass.
#[derive(Clone, Copy, Debug)]
pub enum GateSource {
    Indicators(IndicatorConfig),
    Pinned(Decision),
}

/// Gate nodes of one layer on a tape.
#[derive(Clone, Copy, Debug)]
pub struct Gates {
    pub k5: Var,
    pub e6: Var,
    pub e3: Var,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecisionSnapshot {
    pub layer: usize,
    pub norm_sq_shell: f64,
    pub norm_sq_half3: f64,
    pub norm_sq_half6: f64,
    /// Thresholds in raw squared-norm units, order k5, e3, e6.
    pub thresholds: [f64; 3],
    pub ind_k5: f64,
    pub ind_e3: f64,
    pub ind_e6: f64,
    pub derived: Decision,
}

/// Discrete decision from the three hard gate bits.
pub fn decide(k5: bool, e6: bool, e3: bool) -> Decision {
    if !e3 {
        Decision::Skip
    } else {
        Decision::MbConv {
            k: if k5 { 5 } else { 3 },
            e: if e6 { 6 } else { 3 },
        }
    }
}

/// The three gates of a superkernel.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GateKind {
    K5,
    E3,
    E6,
}

impl GateKind {
    pub const ALL: [GateKind; 3] = [GateKind::K5, GateKind::E3, GateKind::E6];

    fn slot(self) -> usize {
        self as usize
    }
}

/// Shared depthwise weights plus the three thresholds of one searchable layer.
///
/// Each threshold is stored relative to a fixed per-gate scale `s` (the
/// subset's norm at construction): the gate compares `‖w‖² / s` against the
/// stored value, which is the same decision as `‖w‖² > s · t`. Keeping the
/// trainable value at order one lets a single temperature and learning rate
/// serve layers whose norms differ by orders of magnitude.
#[derive(Clone, Debug)]
pub struct SuperKernel {
    pub weights: ParamId,
    pub t_k5: ParamId,
    pub t_e3: ParamId,
    pub t_e6: ParamId,
    /// Non-trainable `[s_k5, s_e3, s_e6]`.
    pub scales: ParamId,
    pub channels: usize,
    pub layer_index: usize,
    /// Whether the skip-op is a legal outcome; when false `e3` is pinned open.
    pub skip_allowed: bool,
}

impl SuperKernel {
    /// Allocate He-uniform weights and thresholds at half of their subset's
    /// initial norm.
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        channels: usize,
        layer_index: usize,
        skip_allowed: bool,
        rng: &mut Rng,
    ) -> Result<Self> {
        if channels == 0 || channels % 2 != 0 {
            return Err(Error::Config(format!(
                "superkernel channel count must be positive and even, got {channels}"
            )));
        }
        let w = crate::supernet::uniform(rng, &[channels, K_MAX, K_MAX], K_MAX * K_MAX);
        Self::with_weights(store, prefix, w, layer_index, skip_allowed)
    }

    /// Wrap explicit weights; thresholds start at half the initial subset norms.
    pub fn with_weights(
        store: &mut ParamStore,
        prefix: &str,
        weights: Tensor,
        layer_index: usize,
        skip_allowed: bool,
    ) -> Result<Self> {
        let channels = match *weights.shape() {
            [c, K_MAX, K_MAX] if c > 0 && c % 2 == 0 => c,
            ref s => {
                return Err(Error::shape(
                    "SuperKernel",
                    "weights",
                    "[C (even), 5, 5]",
                    format!("{s:?}"),
                ))
            }
        };
        let view = |subset| SubsetView {
            data: weights.data(),
            channels,
            subset,
        };
        let norms = [
            group_norm_sq(view(SHELL)),
            group_norm_sq(view(HALF3)),
            group_norm_sq(view(HALF6)),
        ];
        let scales = norms.map(|n| if n > 0.0 { n } else { 1.0 });
        let weights = store.add(format!("{prefix}.weights"), ParamKind::Weight, weights);
        let mut t = [weights; 3];
        for (i, name) in ["t_k5", "t_e3", "t_e6"].iter().enumerate() {
            t[i] = store.add(format!("{prefix}.{name}"), ParamKind::Threshold, Tensor::scalar(THRESHOLD_INIT * norms[i] / scales[i]));
        }
        let scales = store.add(
            format!("{prefix}.norm_scale"),
            ParamKind::Buffer,
            Tensor::new(&[3], scales.to_vec())?,
        );
        Ok(SuperKernel {
            weights,
            t_k5: t[0],
            t_e3: t[1],
            t_e6: t[2],
            scales,
            channels,
            layer_index,
            skip_allowed,
        })
    }

    pub fn view<'a>(&self, store: &'a ParamStore, subset: Subset) -> SubsetView<'a> {
        SubsetView {
            data: store.get(self.weights).data(),
            channels: self.channels,
            subset,
        }
    }

    pub fn thresholds(&self) -> [ParamId; 3] {
        [self.t_k5, self.t_e3, self.t_e6]
    }

    fn threshold_id(&self, g: GateKind) -> ParamId {
        self.thresholds()[g.slot()]
    }

    pub fn norm_scale(&self, store: &ParamStore, g: GateKind) -> f64 {
        store.get(self.scales).data()[g.slot()]
    }

    /// Threshold in raw squared-norm units.
    pub fn threshold(&self, store: &ParamStore, g: GateKind) -> f64 {
        self.norm_scale(store, g) * store.get(self.threshold_id(g)).item()
    }

    /// Set a threshold given in raw squared-norm units.
    pub fn set_threshold(&self, store: &mut ParamStore, g: GateKind, raw: f64) {
        let s = self.norm_scale(store, g);
        store.get_mut(self.threshold_id(g)).data_mut()[0] = raw / s;
    }

    fn gate(&self, tape: &mut Tape, store: &ParamStore, norm: Var, g: GateKind, cfg: IndicatorConfig) -> Result<Var> {
        let rel = tape.mul_const(norm, 1.0 / self.norm_scale(store, g));
        let t = tape.param(store, self.threshold_id(g));
        tape.indicator(rel, t, cfg.temperature, cfg.mode)
    }

    fn hard_gate(&self, store: &ParamStore, norm: f64, g: GateKind) -> bool {
        norm * (1.0 / self.norm_scale(store, g)) > store.get(self.threshold_id(g)).item()
    }

    /// Record the three gates. Half norms use the kernel after the k5 decision.
    pub fn gates(&self, tape: &mut Tape, store: &ParamStore, source: GateSource) -> Result<Gates> {
        let cfg = match source {
            GateSource::Pinned(d) => {
                if d.is_skip() && !self.skip_allowed {
                    return Err(Error::InconsistentArchitecture(format!(
                        "layer {} cannot be skipped",
                        self.layer_index
                    )));
                }
                let (k5, e6, e3) = d.gates();
                return Ok(Gates {
                    k5: tape.scalar(k5),
                    e6: tape.scalar(e6),
                    e3: tape.scalar(e3),
                });
            }
            GateSource::Indicators(cfg) => cfg,
        };
        let w = tape.param(store, self.weights);
        let n_shell = tape.subset_sum_sq(w, SHELL)?;
        let k5 = self.gate(tape, store, n_shell, GateKind::K5, cfg)?;

        let half_norm = |tape: &mut Tape, inner: Subset, shell: Subset| -> Result<Var> {
            let a = tape.subset_sum_sq(w, inner)?;
            let b = tape.subset_sum_sq(w, shell)?;
            let b = tape.mul(b, k5)?;
            tape.add(a, b)
        };
        let n6 = half_norm(tape, HALF6_INNER, HALF6_SHELL)?;
        let e6 = self.gate(tape, store, n6, GateKind::E6, cfg)?;
        let e3 = if self.skip_allowed {
            let n3 = half_norm(tape, HALF3_INNER, HALF3_SHELL)?;
            self.gate(tape, store, n3, GateKind::E3, cfg)?
        } else {
            tape.scalar(1.0)
        };
        Ok(Gates { k5, e6, e3 })
    }

    /// Effective kernel `e3 · [half3 | e6 · half6]` with the shell scaled by
    /// `k5`; dropout masks are applied on top of the gates.
    pub fn effective_kernel_on(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        gates: Gates,
        drop: DropMask,
    ) -> Result<(Var, Gates)> {
        let gates = apply_drop(tape, gates, drop)?;
        let w = tape.param(store, self.weights);
        let eff = tape.compose_kernel(w, gates.k5, gates.e6, gates.e3)?;
        Ok((eff, gates))
    }

    /// The effective kernel as a plain tensor.
    pub fn effective_kernel(&self, store: &ParamStore, cfg: IndicatorConfig) -> Result<Tensor> {
        let mut tape = Tape::new();
        let g = self.gates(&mut tape, store, GateSource::Indicators(cfg))?;
        let (eff, _) = self.effective_kernel_on(&mut tape, store, g, DropMask::default())?;
        Ok(tape.value(eff).clone())
    }

    /// `conv2d_depthwise(x, effective_kernel, stride)`.
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: Var,
        stride: usize,
        source: GateSource,
        drop: DropMask,
    ) -> Result<(Var, Gates)> {
        let c = tape.value(x).shape().get(1).copied().unwrap_or(0);
        if c != self.channels {
            return Err(Error::shape("superkernel_forward", "channels", self.channels, c));
        }
        let g = self.gates(tape, store, source)?;
        let (eff, g) = self.effective_kernel_on(tape, store, g, drop)?;
        Ok((tape.conv2d_depthwise(x, eff, stride)?, g))
    }

    /// Norms, hard gates and the discrete decision.
    pub fn derive_decision(&self, store: &ParamStore) -> DecisionSnapshot {
        let norm = |s| group_norm_sq(self.view(store, s));
        let n_shell = norm(SHELL);
        let k5 = self.hard_gate(store, n_shell, GateKind::K5);
        let shell_factor = if k5 { 1.0 } else { 0.0 };
        let n3 = norm(HALF3_INNER) + shell_factor * norm(HALF3_SHELL);
        let n6 = norm(HALF6_INNER) + shell_factor * norm(HALF6_SHELL);
        let e3 = !self.skip_allowed || self.hard_gate(store, n3, GateKind::E3);
        let e6 = self.hard_gate(store, n6, GateKind::E6);
        let bit = |b: bool| if b { 1.0 } else { 0.0 };
        DecisionSnapshot {
            layer: self.layer_index,
            norm_sq_shell: n_shell,
            norm_sq_half3: n3,
            norm_sq_half6: n6,
            thresholds: GateKind::ALL.map(|g| self.threshold(store, g)),
            ind_k5: bit(k5),
            ind_e3: bit(e3),
            ind_e6: bit(e6),
            derived: decide(k5, e6, e3),
        }
    }
}

fn apply_drop(tape: &mut Tape, g: Gates, drop: DropMask) -> Result<Gates> {
    let k5 = if drop.shell {
        let z = tape.scalar(0.0);
        tape.mul(g.k5, z)?
    } else {
        g.k5
    };
    let e6 = if drop.half6 {
        let z = tape.scalar(0.0);
        tape.mul(g.e6, z)?
    } else {
        g.e6
    };
    Ok(Gates { k5, e6, e3: g.e3 })
}
