use super::kernels::{self, ConvGeom};
use super::{ParamId, ParamStore, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

/// Forward behaviour of a thresholded gate.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GateMode {
    /// Forward `1(x > t)`, backward through `σ((x - t) / τ)` (straight-through).
    HardForwardSoftBackward,
    /// Forward and backward through `σ((x - t) / τ)`.
    FullyRelaxed,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ChannelHalf {
    All,
    First,
    Second,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Region {
    Full,
    /// Center `(k-2)×(k-2)` window.
    Inner,
    /// Outer ring of width one.
    Shell,
}

/// A structured subset of a `[C, K, K]` depthwise kernel.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Subset {
    pub channels: ChannelHalf,
    pub region: Region,
}

impl Subset {
    pub const fn new(channels: ChannelHalf, region: Region) -> Self {
        Subset { channels, region }
    }

    #[inline]
    pub fn contains(&self, c: usize, channels: usize, y: usize, x: usize, k: usize) -> bool {
        let ch = match self.channels {
            ChannelHalf::All => true,
            ChannelHalf::First => c < channels / 2,
            ChannelHalf::Second => c >= channels / 2,
        };
        let inner = y >= 1 && y + 1 < k && x >= 1 && x + 1 < k;
        let sp = match self.region {
            Region::Full => true,
            Region::Inner => inner,
            Region::Shell => !inner,
        };
        ch && sp
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, Var),
    MulConst(Var, f64),
    AddConst(Var),
    ChannelAffine { x: Var, scale: Var, bias: Var },
    ChannelMul { x: Var, m: Var },
    Relu6(Var),
    Depthwise { x: Var, w: Var, stride: usize },
    Pointwise { x: Var, w: Var },
    Conv2d { x: Var, w: Var, stride: usize },
    GlobalAvgPool(Var),
    Dense { x: Var, w: Var, b: Var },
    SoftmaxCe { logits: Var, labels: Vec<usize>, probs: Vec<f64> },
    Sum(Var),
    SubsetSumSq { w: Var, subset: Subset },
    Indicator { norm: Var, t: Var, tau: f64 },
    ComposeKernel { w: Var, k5: Var, e6: Var, e3: Var },
    HalfMask { e6: Var },
    LnFloor { x: Var, floor: f64 },
    GateRuntime { e3: Var, e6: Var, k5: Var, corners: [f64; 4] },
}

#[derive(Clone, Debug)]
struct Node {
    value: Tensor,
    op: Op,
    param: Option<ParamId>,
    needs_grad: bool,
}

/// Records a forward computation for one backward pass.
///
/// Parameters enter the tape by value via [`Tape::param`]; [`Tape::backward`]
/// accumulates their gradients back into the [`ParamStore`]. Gradients of
/// any other `requires_grad` leaf stay on the tape and are read with
/// [`Tape::grad`]. The tape is only cleared explicitly.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

fn dims4(op: &'static str, t: &Tensor) -> Result<(usize, usize, usize, usize)> {
    match *t.shape() {
        [n, c, h, w] => Ok((n, c, h, w)),
        ref s => Err(Error::shape(op, "rank", "4 ([N, C, H, W])", format!("{s:?}"))),
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn clear(&mut self) {
        self.nodes.clear();
        self.grads.clear();
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Gradient of a node from the most recent backward pass.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            param: None,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, vs: &[Var]) -> bool {
        vs.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let t = store.get(id);
        let needs = t.requires_grad();
        let v = self.push(t.detached(), Op::Leaf, needs);
        self.nodes[v.0].param = Some(id);
        v
    }

    /// A leaf whose gradient is tracked when `t.requires_grad()`.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let needs = t.requires_grad();
        self.push(t.detached(), Op::Leaf, needs)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t.detached(), Op::Leaf, false)
    }

    pub fn scalar(&mut self, v: f64) -> Var {
        self.constant(Tensor::scalar(v))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::shape(op, "operand shape", format!("{sa:?}"), format!("{sb:?}")));
        }
        Ok(())
    }

    fn expect_scalar(&self, op: &'static str, v: Var) -> Result<f64> {
        let t = self.value(v);
        if !t.is_scalar() {
            return Err(Error::shape(op, "scalar operand", "1 element", format!("{:?}", t.shape())));
        }
        Ok(t.item())
    }

    fn zip_map(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| f(*x, *y)).collect();
        Tensor::new(ta.shape(), data).expect("same shape")
    }

    fn map(&self, a: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let ta = self.value(a);
        Tensor::new(ta.shape(), ta.data().iter().map(|x| f(*x)).collect()).expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.zip_map(a, b, |x, y| x + y);
        let ng = self.ng(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = self.zip_map(a, b, |x, y| x - y);
        let ng = self.ng(&[a, b]);
        Ok(self.push(out, Op::Sub(a, b), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.zip_map(a, b, |x, y| x * y);
        let ng = self.ng(&[a, b]);
        Ok(self.push(out, Op::Mul(a, b), ng))
    }

    /// Multiply every element of `x` by the scalar node `s`.
    pub fn scale(&mut self, x: Var, s: Var) -> Result<Var> {
        let sv = self.expect_scalar("scale", s)?;
        let out = self.map(x, |v| v * sv);
        let ng = self.ng(&[x, s]);
        Ok(self.push(out, Op::Scale(x, s), ng))
    }

    pub fn mul_const(&mut self, x: Var, c: f64) -> Var {
        let out = self.map(x, |v| v * c);
        let ng = self.ng(&[x]);
        self.push(out, Op::MulConst(x, c), ng)
    }

    pub fn add_const(&mut self, x: Var, c: f64) -> Var {
        let out = self.map(x, |v| v + c);
        let ng = self.ng(&[x]);
        self.push(out, Op::AddConst(x), ng)
    }

    fn channel_layout(&self, op: &'static str, x: Var, per_channel: &[Var]) -> Result<(usize, usize, usize)> {
        let shape = self.value(x).shape();
        if shape.len() < 2 {
            return Err(Error::shape(op, "rank", ">= 2", shape.len()));
        }
        let (n, c) = (shape[0], shape[1]);
        for v in per_channel {
            let s = self.value(*v).shape();
            if s != [c] {
                return Err(Error::shape(op, "channels", format!("[{c}]"), format!("{s:?}")));
            }
        }
        let rest = shape[2..].iter().product();
        Ok((n, c, rest))
    }

    /// `y[n, c, ...] = x[n, c, ...] * scale[c] + bias[c]`.
    pub fn channel_affine(&mut self, x: Var, scale: Var, bias: Var) -> Result<Var> {
        let (n, c, s) = self.channel_layout("channel_affine", x, &[scale, bias])?;
        let (tx, ts, tb) = (self.value(x), self.value(scale), self.value(bias));
        let mut out = tx.data().to_vec();
        for b in 0..n {
            for ch in 0..c {
                let (sc, bi) = (ts.data()[ch], tb.data()[ch]);
                for v in &mut out[(b * c + ch) * s..(b * c + ch + 1) * s] {
                    *v = *v * sc + bi;
                }
            }
        }
        let out = Tensor::new(tx.shape(), out)?;
        let ng = self.ng(&[x, scale, bias]);
        Ok(self.push(out, Op::ChannelAffine { x, scale, bias }, ng))
    }

    /// `y[n, c, ...] = x[n, c, ...] * m[c]`.
    pub fn channel_mul(&mut self, x: Var, m: Var) -> Result<Var> {
        let (n, c, s) = self.channel_layout("channel_mul", x, &[m])?;
        let (tx, tm) = (self.value(x), self.value(m));
        let mut out = tx.data().to_vec();
        for b in 0..n {
            for ch in 0..c {
                let mv = tm.data()[ch];
                for v in &mut out[(b * c + ch) * s..(b * c + ch + 1) * s] {
                    *v *= mv;
                }
            }
        }
        let out = Tensor::new(tx.shape(), out)?;
        let ng = self.ng(&[x, m]);
        Ok(self.push(out, Op::ChannelMul { x, m }, ng))
    }

    pub fn relu6(&mut self, x: Var) -> Var {
        let out = self.map(x, |v| v.clamp(0.0, 6.0));
        let ng = self.ng(&[x]);
        self.push(out, Op::Relu6(x), ng)
    }

    /// Depthwise convolution, `x: [N, C, H, W]`, `w: [C, K, K]`, same padding `K / 2`.
    pub fn conv2d_depthwise(&mut self, x: Var, w: Var, stride: usize) -> Result<Var> {
        const OP: &str = "conv2d_depthwise";
        let (n, c, h, wd) = dims4(OP, self.value(x))?;
        let (wc, k) = match *self.value(w).shape() {
            [wc, k1, k2] if k1 == k2 => (wc, k1),
            ref s => return Err(Error::shape(OP, "kernel", "[C, K, K]", format!("{s:?}"))),
        };
        if wc != c {
            return Err(Error::shape(OP, "channels", c, wc));
        }
        if k % 2 == 0 {
            return Err(Error::shape(OP, "kernel size", "odd", k));
        }
        if stride != 1 && stride != 2 {
            return Err(Error::invalid(OP, format!("stride must be 1 or 2, got {stride}")));
        }
        let g = ConvGeom { n, c, h, w: wd, k, stride };
        let out = kernels::depthwise_forward(self.value(x).data(), self.value(w).data(), &g);
        let out = Tensor::new(&[n, c, g.ho(), g.wo()], out)?;
        let ng = self.ng(&[x, w]);
        Ok(self.push(out, Op::Depthwise { x, w, stride }, ng))
    }

    /// Pointwise (1×1) convolution, `x: [N, Cin, H, W]`, `w: [Cout, Cin]`.
    pub fn conv2d_pointwise(&mut self, x: Var, w: Var) -> Result<Var> {
        const OP: &str = "conv2d_pointwise";
        let (n, cin, h, wd) = dims4(OP, self.value(x))?;
        let (cout, wcin) = match *self.value(w).shape() {
            [a, b] => (a, b),
            ref s => return Err(Error::shape(OP, "weight", "[Cout, Cin]", format!("{s:?}"))),
        };
        if wcin != cin {
            return Err(Error::shape(OP, "input channels", cin, wcin));
        }
        let out = kernels::pointwise_forward(self.value(x).data(), self.value(w).data(), n, cin, cout, h * wd);
        let out = Tensor::new(&[n, cout, h, wd], out)?;
        let ng = self.ng(&[x, w]);
        Ok(self.push(out, Op::Pointwise { x, w }, ng))
    }

    /// Dense convolution, `w: [Cout, Cin, K, K]`, same padding `K / 2`.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize) -> Result<Var> {
        const OP: &str = "conv2d";
        let (n, cin, h, wd) = dims4(OP, self.value(x))?;
        let (cout, k) = match *self.value(w).shape() {
            [co, ci, k1, k2] if k1 == k2 => {
                if ci != cin {
                    return Err(Error::shape(OP, "input channels", cin, ci));
                }
                (co, k1)
            }
            ref s => return Err(Error::shape(OP, "kernel", "[Cout, Cin, K, K]", format!("{s:?}"))),
        };
        if k % 2 == 0 {
            return Err(Error::shape(OP, "kernel size", "odd", k));
        }
        if stride != 1 && stride != 2 {
            return Err(Error::invalid(OP, format!("stride must be 1 or 2, got {stride}")));
        }
        let g = ConvGeom { n, c: cin, h, w: wd, k, stride };
        let out = kernels::conv2d_forward(self.value(x).data(), self.value(w).data(), cout, &g);
        let out = Tensor::new(&[n, cout, g.ho(), g.wo()], out)?;
        let ng = self.ng(&[x, w]);
        Ok(self.push(out, Op::Conv2d { x, w, stride }, ng))
    }

    /// `[N, C, H, W] -> [N, C]` spatial mean.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = dims4("global_avg_pool", self.value(x))?;
        let s = h * w;
        let d = self.value(x).data();
        let out: Vec<f64> = (0..n * c)
            .map(|i| d[i * s..(i + 1) * s].iter().sum::<f64>() / s as f64)
            .collect();
        let out = Tensor::new(&[n, c], out)?;
        let ng = self.ng(&[x]);
        Ok(self.push(out, Op::GlobalAvgPool(x), ng))
    }

    /// `y[n, o] = sum_f w[o, f] x[n, f] + b[o]`.
    pub fn dense(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        const OP: &str = "dense";
        let (n, f) = match *self.value(x).shape() {
            [n, f] => (n, f),
            ref s => return Err(Error::shape(OP, "input", "[N, F]", format!("{s:?}"))),
        };
        let o = match *self.value(w).shape() {
            [o, wf] if wf == f => o,
            [_, wf] => return Err(Error::shape(OP, "features", f, wf)),
            ref s => return Err(Error::shape(OP, "weight", "[Out, F]", format!("{s:?}"))),
        };
        if self.value(b).shape() != [o] {
            return Err(Error::shape(OP, "bias", format!("[{o}]"), format!("{:?}", self.value(b).shape())));
        }
        let (tx, tw, tb) = (self.value(x).data(), self.value(w).data(), self.value(b).data());
        let mut out = vec![0.0; n * o];
        for i in 0..n {
            for j in 0..o {
                let acc: f64 = tw[j * f..(j + 1) * f].iter().zip(&tx[i * f..(i + 1) * f]).map(|(a, b)| a * b).sum();
                out[i * o + j] = acc + tb[j];
            }
        }
        let out = Tensor::new(&[n, o], out)?;
        let ng = self.ng(&[x, w, b]);
        Ok(self.push(out, Op::Dense { x, w, b }, ng))
    }

    /// Mean softmax cross-entropy over the batch.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        const OP: &str = "softmax_cross_entropy";
        let (n, k) = match *self.value(logits).shape() {
            [n, k] => (n, k),
            ref s => return Err(Error::shape(OP, "logits", "[N, K]", format!("{s:?}"))),
        };
        if labels.len() != n {
            return Err(Error::shape(OP, "batch", n, labels.len()));
        }
        if let Some((index, &label)) = labels.iter().enumerate().find(|(_, &l)| l >= k) {
            return Err(Error::LabelOutOfRange { label, classes: k, index });
        }
        let (loss, probs) = kernels::softmax_ce(self.value(logits).data(), labels, k);
        let ng = self.ng(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SoftmaxCe { logits, labels: labels.to_vec(), probs },
            ng,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let ng = self.ng(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), ng)
    }

    /// Sum of squares over a structured subset of a `[C, K, K]` kernel.
    pub fn subset_sum_sq(&mut self, w: Var, subset: Subset) -> Result<Var> {
        let (c, k) = match *self.value(w).shape() {
            [c, k1, k2] if k1 == k2 => (c, k1),
            ref s => return Err(Error::shape("subset_sum_sq", "kernel", "[C, K, K]", format!("{s:?}"))),
        };
        let d = self.value(w).data();
        let mut acc = 0.0;
        for ch in 0..c {
            for y in 0..k {
                for x in 0..k {
                    if subset.contains(ch, c, y, x, k) {
                        let v = d[(ch * k + y) * k + x];
                        acc += v * v;
                    }
                }
            }
        }
        let ng = self.ng(&[w]);
        Ok(self.push(Tensor::scalar(acc), Op::SubsetSumSq { w, subset }, ng))
    }

    /// Thresholded gate `g(norm, t)`; see [`GateMode`].
    pub fn indicator(&mut self, norm: Var, t: Var, tau: f64, mode: GateMode) -> Result<Var> {
        let nv = self.expect_scalar("indicator", norm)?;
        let tv = self.expect_scalar("indicator", t)?;
        if !(tau > 0.0) {
            return Err(Error::invalid("indicator", format!("temperature must be > 0, got {tau}")));
        }
        let g = match mode {
            GateMode::HardForwardSoftBackward => {
                if nv > tv {
                    1.0
                } else {
                    0.0
                }
            }
            GateMode::FullyRelaxed => kernels::sigmoid((nv - tv) / tau),
        };
        let ng = self.ng(&[norm, t]);
        Ok(self.push(Tensor::scalar(g), Op::Indicator { norm, t, tau }, ng))
    }

    /// Effective superkernel: shell scaled by `k5`, second channel half by `e6`, all by `e3`.
    pub fn compose_kernel(&mut self, w: Var, k5: Var, e6: Var, e3: Var) -> Result<Var> {
        const OP: &str = "compose_kernel";
        let (c, k) = match *self.value(w).shape() {
            [c, k1, k2] if k1 == k2 && k1 >= 3 => (c, k1),
            ref s => return Err(Error::shape(OP, "kernel", "[C, K, K] with K >= 3", format!("{s:?}"))),
        };
        let (gk, ge6, ge3) = (
            self.expect_scalar(OP, k5)?,
            self.expect_scalar(OP, e6)?,
            self.expect_scalar(OP, e3)?,
        );
        let shell = Subset::new(ChannelHalf::All, Region::Shell);
        let d = self.value(w).data();
        let mut out = vec![0.0; d.len()];
        for ch in 0..c {
            let fh = if ch >= c / 2 { ge6 } else { 1.0 };
            for y in 0..k {
                for x in 0..k {
                    let fk = if shell.contains(ch, c, y, x, k) { gk } else { 1.0 };
                    let i = (ch * k + y) * k + x;
                    out[i] = ge3 * (fh * (fk * d[i]));
                }
            }
        }
        let out = Tensor::new(&[c, k, k], out)?;
        let ng = self.ng(&[w, k5, e6, e3]);
        Ok(self.push(out, Op::ComposeKernel { w, k5, e6, e3 }, ng))
    }

    /// Per-channel mask `[1, .., 1, e6, .., e6]` of length `channels` (first half ones).
    pub fn half_mask(&mut self, e6: Var, channels: usize) -> Result<Var> {
        let g = self.expect_scalar("half_mask", e6)?;
        if channels == 0 || channels % 2 != 0 {
            return Err(Error::shape("half_mask", "channels", "positive even", channels));
        }
        let out = Tensor::from_fn(&[channels], |i| if i < channels / 2 { 1.0 } else { g });
        let ng = self.ng(&[e6]);
        Ok(self.push(out, Op::HalfMask { e6 }, ng))
    }

    /// `ln(max(x, floor))`, with zero gradient on the clamped branch.
    pub fn ln_floor(&mut self, x: Var, floor: f64) -> Result<Var> {
        let v = self.expect_scalar("ln_floor", x)?;
        if !(floor > 0.0) {
            return Err(Error::invalid("ln_floor", format!("floor must be > 0, got {floor}")));
        }
        let ng = self.ng(&[x]);
        Ok(self.push(Tensor::scalar(v.max(floor).ln()), Op::LnFloor { x, floor }, ng))
    }

    /// Multilinear per-layer runtime over the gates `(e3, e6, k5)`.
    ///
    /// `corners = [r(e6=0,k5=0), r(e6=0,k5=1), r(e6=1,k5=0), r(e6=1,k5=1)]`,
    /// all multiplied by `e3`. With gates in {0, 1} the result is exactly
    /// the selected corner.
    pub fn gate_runtime(&mut self, e3: Var, e6: Var, k5: Var, corners: [f64; 4]) -> Result<Var> {
        const OP: &str = "gate_runtime";
        let (a, b, c) = (
            self.expect_scalar(OP, e3)?,
            self.expect_scalar(OP, e6)?,
            self.expect_scalar(OP, k5)?,
        );
        let r = gate_runtime_value(a, b, c, &corners);
        let ng = self.ng(&[e3, e6, k5]);
        Ok(self.push(Tensor::scalar(r), Op::GateRuntime { e3, e6, k5, corners }, ng))
    }

    /// Backpropagate from a scalar `loss`, accumulating into parameter grads.
    ///
    /// Calling this twice without zeroing the store accumulates twice.
    pub fn backward(&mut self, loss: Var, store: &mut ParamStore) -> Result<()> {
        let lt = self.value(loss);
        if !lt.is_scalar() || !lt.shape().is_empty() && lt.shape() != [1] {
            return Err(Error::NonScalarLoss(lt.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        for (node, g) in self.nodes.iter().zip(&grads) {
            if let (Some(id), Some(g)) = (node.param, g) {
                if store.get(id).requires_grad() {
                    store.get_mut(id).accumulate_grad(g);
                }
            }
        }
        self.grads = grads;
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let val = |v: Var| nodes[v.0].value.data();
        // Borrow the gradient buffer of `v`, allocating zeros on first use.
        fn buf<'a>(nodes: &[Node], grads: &'a mut [Option<Vec<f64>>], v: Var) -> Option<&'a mut Vec<f64>> {
            if !nodes[v.0].needs_grad {
                return None;
            }
            let n = nodes[v.0].value.len();
            Some(grads[v.0].get_or_insert_with(|| vec![0.0; n]))
        }
        match &nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for (v, sign) in [(*a, 1.0), (*b, 1.0)] {
                    if let Some(d) = buf(nodes, grads, v) {
                        d.iter_mut().zip(g).for_each(|(d, g)| *d += sign * g);
                    }
                }
            }
            Op::Sub(a, b) => {
                for (v, sign) in [(*a, 1.0), (*b, -1.0)] {
                    if let Some(d) = buf(nodes, grads, v) {
                        d.iter_mut().zip(g).for_each(|(d, g)| *d += sign * g);
                    }
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (val(*a).to_vec(), val(*b).to_vec());
                if let Some(d) = buf(nodes, grads, *a) {
                    for ((d, g), y) in d.iter_mut().zip(g).zip(&vb) {
                        *d += g * y;
                    }
                }
                if let Some(d) = buf(nodes, grads, *b) {
                    for ((d, g), x) in d.iter_mut().zip(g).zip(&va) {
                        *d += g * x;
                    }
                }
            }
            Op::Scale(x, s) => {
                let sv = val(*s)[0];
                let dot: f64 = g.iter().zip(val(*x)).map(|(g, x)| g * x).sum();
                if let Some(d) = buf(nodes, grads, *x) {
                    d.iter_mut().zip(g).for_each(|(d, g)| *d += g * sv);
                }
                if let Some(d) = buf(nodes, grads, *s) {
                    d[0] += dot;
                }
            }
            Op::MulConst(x, c) => {
                if let Some(d) = buf(nodes, grads, *x) {
                    d.iter_mut().zip(g).for_each(|(d, g)| *d += g * c);
                }
            }
            Op::AddConst(x) => {
                if let Some(d) = buf(nodes, grads, *x) {
                    d.iter_mut().zip(g).for_each(|(d, g)| *d += g);
                }
            }
            Op::ChannelAffine { x, scale, bias } => {
                let shape = nodes[x.0].value.shape();
                let (n, c) = (shape[0], shape[1]);
                let s: usize = shape[2..].iter().product();
                let (xv, sv) = (val(*x), val(*scale));
                let mut dscale = vec![0.0; c];
                let mut dbias = vec![0.0; c];
                for b in 0..n {
                    for ch in 0..c {
                        let r = (b * c + ch) * s..(b * c + ch + 1) * s;
                        dscale[ch] += g[r.clone()].iter().zip(&xv[r.clone()]).map(|(g, x)| g * x).sum::<f64>();
                        dbias[ch] += g[r].iter().sum::<f64>();
                    }
                }
                if let Some(d) = buf(nodes, grads, *x) {
                    for b in 0..n {
                        for ch in 0..c {
                            let r = (b * c + ch) * s..(b * c + ch + 1) * s;
                            d[r.clone()].iter_mut().zip(&g[r]).for_each(|(d, g)| *d += g * sv[ch]);
                        }
                    }
                }
                if let Some(d) = buf(nodes, grads, *scale) {
                    d.iter_mut().zip(&dscale).for_each(|(d, v)| *d += v);
                }
                if let Some(d) = buf(nodes, grads, *bias) {
                    d.iter_mut().zip(&dbias).for_each(|(d, v)| *d += v);
                }
            }
            Op::ChannelMul { x, m } => {
                let shape = nodes[x.0].value.shape();
                let (n, c) = (shape[0], shape[1]);
                let s: usize = shape[2..].iter().product();
                let (xv, mv) = (val(*x), val(*m));
                if let Some(d) = buf(nodes, grads, *m) {
                    for b in 0..n {
                        for ch in 0..c {
                            let r = (b * c + ch) * s..(b * c + ch + 1) * s;
                            d[ch] += g[r.clone()].iter().zip(&xv[r]).map(|(g, x)| g * x).sum::<f64>();
                        }
                    }
                }
                if let Some(d) = buf(nodes, grads, *x) {
                    for b in 0..n {
                        for ch in 0..c {
                            let r = (b * c + ch) * s..(b * c + ch + 1) * s;
                            d[r.clone()].iter_mut().zip(&g[r]).for_each(|(d, g)| *d += g * mv[ch]);
                        }
                    }
                }
            }
            Op::Relu6(x) => {
                let xv = val(*x);
                if let Some(d) = buf(nodes, grads, *x) {
                    for ((d, g), x) in d.iter_mut().zip(g).zip(xv) {
                        if *x > 0.0 && *x < 6.0 {
                            *d += g;
                        }
                    }
                }
            }
            Op::Depthwise { x, w, stride } => {
                let s = nodes[x.0].value.shape();
                let geom = ConvGeom { n: s[0], c: s[1], h: s[2], w: s[3], k: nodes[w.0].value.shape()[1], stride: *stride };
                let (xv, wv) = (val(*x), val(*w));
                let mut dw = nodes[w.0].needs_grad.then(|| vec![0.0; wv.len()]);
                let mut dx = nodes[x.0].needs_grad.then(|| vec![0.0; xv.len()]);
                kernels::depthwise_backward(xv, wv, &geom, g, dx.as_deref_mut(), dw.as_deref_mut());
                add_into(nodes, grads, *x, dx);
                add_into(nodes, grads, *w, dw);
            }
            Op::Pointwise { x, w } => {
                let s = nodes[x.0].value.shape();
                let cout = nodes[w.0].value.shape()[0];
                let (xv, wv) = (val(*x), val(*w));
                let mut dw = nodes[w.0].needs_grad.then(|| vec![0.0; wv.len()]);
                let mut dx = nodes[x.0].needs_grad.then(|| vec![0.0; xv.len()]);
                kernels::pointwise_backward(xv, wv, s[0], s[1], cout, s[2] * s[3], g, dx.as_deref_mut(), dw.as_deref_mut());
                add_into(nodes, grads, *x, dx);
                add_into(nodes, grads, *w, dw);
            }
            Op::Conv2d { x, w, stride } => {
                let s = nodes[x.0].value.shape();
                let ws = nodes[w.0].value.shape();
                let geom = ConvGeom { n: s[0], c: s[1], h: s[2], w: s[3], k: ws[2], stride: *stride };
                let (xv, wv) = (val(*x), val(*w));
                let mut dw = nodes[w.0].needs_grad.then(|| vec![0.0; wv.len()]);
                let mut dx = nodes[x.0].needs_grad.then(|| vec![0.0; xv.len()]);
                kernels::conv2d_backward(xv, wv, ws[0], &geom, g, dx.as_deref_mut(), dw.as_deref_mut());
                add_into(nodes, grads, *x, dx);
                add_into(nodes, grads, *w, dw);
            }
            Op::GlobalAvgPool(x) => {
                let s = nodes[x.0].value.shape();
                let plane = s[2] * s[3];
                if let Some(d) = buf(nodes, grads, *x) {
                    for (i, gi) in g.iter().enumerate() {
                        let v = gi / plane as f64;
                        d[i * plane..(i + 1) * plane].iter_mut().for_each(|d| *d += v);
                    }
                }
            }
            Op::Dense { x, w, b } => {
                let (n, f) = (nodes[x.0].value.shape()[0], nodes[x.0].value.shape()[1]);
                let o = nodes[w.0].value.shape()[0];
                let (xv, wv) = (val(*x), val(*w));
                if let Some(d) = buf(nodes, grads, *x) {
                    for i in 0..n {
                        for j in 0..o {
                            let gij = g[i * o + j];
                            d[i * f..(i + 1) * f].iter_mut().zip(&wv[j * f..(j + 1) * f]).for_each(|(d, w)| *d += gij * w);
                        }
                    }
                }
                if let Some(d) = buf(nodes, grads, *w) {
                    for j in 0..o {
                        for i in 0..n {
                            let gij = g[i * o + j];
                            d[j * f..(j + 1) * f].iter_mut().zip(&xv[i * f..(i + 1) * f]).for_each(|(d, x)| *d += gij * x);
                        }
                    }
                }
                if let Some(d) = buf(nodes, grads, *b) {
                    for i in 0..n {
                        d.iter_mut().zip(&g[i * o..(i + 1) * o]).for_each(|(d, g)| *d += g);
                    }
                }
            }
            Op::SoftmaxCe { logits, labels, probs } => {
                let n = labels.len();
                let k = probs.len() / n;
                let scale = g[0] / n as f64;
                if let Some(d) = buf(nodes, grads, *logits) {
                    for (i, &y) in labels.iter().enumerate() {
                        for j in 0..k {
                            let onehot = if j == y { 1.0 } else { 0.0 };
                            d[i * k + j] += scale * (probs[i * k + j] - onehot);
                        }
                    }
                }
            }
            Op::Sum(x) => {
                if let Some(d) = buf(nodes, grads, *x) {
                    d.iter_mut().for_each(|d| *d += g[0]);
                }
            }
            Op::SubsetSumSq { w, subset } => {
                let s = nodes[w.0].value.shape();
                let (c, k) = (s[0], s[1]);
                let wv = val(*w);
                if let Some(d) = buf(nodes, grads, *w) {
                    for ch in 0..c {
                        for y in 0..k {
                            for x in 0..k {
                                if subset.contains(ch, c, y, x, k) {
                                    let i = (ch * k + y) * k + x;
                                    d[i] += 2.0 * wv[i] * g[0];
                                }
                            }
                        }
                    }
                }
            }
            Op::Indicator { norm, t, tau } => {
                let s = kernels::sigmoid((val(*norm)[0] - val(*t)[0]) / tau);
                let slope = s * (1.0 - s) / tau;
                if let Some(d) = buf(nodes, grads, *norm) {
                    d[0] += g[0] * slope;
                }
                if let Some(d) = buf(nodes, grads, *t) {
                    d[0] -= g[0] * slope;
                }
            }
            Op::ComposeKernel { w, k5, e6, e3 } => {
                let s = nodes[w.0].value.shape();
                let (c, k) = (s[0], s[1]);
                let wv = val(*w);
                let (gk, ge6, ge3) = (val(*k5)[0], val(*e6)[0], val(*e3)[0]);
                let shell = Subset::new(ChannelHalf::All, Region::Shell);
                let (mut dk, mut de6, mut de3) = (0.0, 0.0, 0.0);
                let mut dw = nodes[w.0].needs_grad.then(|| vec![0.0; wv.len()]);
                for ch in 0..c {
                    let second = ch >= c / 2;
                    let fh = if second { ge6 } else { 1.0 };
                    for y in 0..k {
                        for x in 0..k {
                            let in_shell = shell.contains(ch, c, y, x, k);
                            let fk = if in_shell { gk } else { 1.0 };
                            let i = (ch * k + y) * k + x;
                            let gi = g[i];
                            if let Some(dw) = dw.as_mut() {
                                dw[i] += gi * ge3 * fh * fk;
                            }
                            let gw = gi * wv[i];
                            de3 += gw * fh * fk;
                            if second {
                                de6 += gw * ge3 * fk;
                            }
                            if in_shell {
                                dk += gw * ge3 * fh;
                            }
                        }
                    }
                }
                add_into(nodes, grads, *w, dw);
                for (v, dv) in [(*k5, dk), (*e6, de6), (*e3, de3)] {
                    if let Some(d) = buf(nodes, grads, v) {
                        d[0] += dv;
                    }
                }
            }
            Op::HalfMask { e6 } => {
                let half = g.len() / 2;
                let s: f64 = g[half..].iter().sum();
                if let Some(d) = buf(nodes, grads, *e6) {
                    d[0] += s;
                }
            }
            Op::LnFloor { x, floor } => {
                let xv = val(*x)[0];
                if xv > *floor {
                    if let Some(d) = buf(nodes, grads, *x) {
                        d[0] += g[0] / xv;
                    }
                }
            }
            Op::GateRuntime { e3, e6, k5, corners } => {
                let (a, b, c) = (val(*e3)[0], val(*e6)[0], val(*k5)[0]);
                let [c00, c01, c10, c11] = *corners;
                let inner = (1.0 - b) * (1.0 - c) * c00 + (1.0 - b) * c * c01 + b * (1.0 - c) * c10 + b * c * c11;
                let d_e6 = a * (-(1.0 - c) * c00 - c * c01 + (1.0 - c) * c10 + c * c11);
                let d_k5 = a * ((1.0 - b) * (c01 - c00) + b * (c11 - c10));
                for (v, dv) in [(*e3, inner), (*e6, d_e6), (*k5, d_k5)] {
                    if let Some(d) = buf(nodes, grads, v) {
                        d[0] += g[0] * dv;
                    }
                }
            }
        }

        fn add_into(nodes: &[Node], grads: &mut [Option<Vec<f64>>], v: Var, src: Option<Vec<f64>>) {
            if let Some(src) = src {
                if let Some(d) = buf(nodes, grads, v) {
                    d.iter_mut().zip(&src).for_each(|(d, s)| *d += s);
                }
            }
        }
    }
}

/// Forward value of [`Tape::gate_runtime`].
pub(crate) fn gate_runtime_value(e3: f64, e6: f64, k5: f64, corners: &[f64; 4]) -> f64 {
    let [c00, c01, c10, c11] = *corners;
    e3 * ((1.0 - e6) * (1.0 - k5) * c00 + (1.0 - e6) * k5 * c01 + e6 * (1.0 - k5) * c10 + e6 * k5 * c11)
}
