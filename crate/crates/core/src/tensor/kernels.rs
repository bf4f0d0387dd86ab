//! Raw numeric kernels on row-major slices.
//!
//! Every output element is reduced in a fixed loop order, so results are
//! bit-reproducible. Convolutions use zero "same" padding of `k / 2`, which
//! makes the output geometry independent of the kernel size for odd kernels.

#[inline]
pub(crate) fn out_size(len: usize, k: usize, stride: usize) -> usize {
    let pad = k / 2;
    (len + 2 * pad - k) / stride + 1
}

/// Range of output indices `o` such that `o * stride + tap - pad` is a valid input index.
#[inline]
fn valid_range(in_len: usize, out_len: usize, tap: usize, pad: usize, stride: usize) -> (usize, usize) {
    // o * stride + tap >= pad
    let lo = if tap >= pad { 0 } else { (pad - tap).div_ceil(stride) };
    // o * stride + tap - pad <= in_len - 1
    let hi_num = in_len - 1 + pad;
    if hi_num < tap {
        return (0, 0);
    }
    let hi = ((hi_num - tap) / stride + 1).min(out_len);
    (lo.min(hi), hi)
}

/// Correlate one input plane with one k×k filter, accumulating into `out`.
#[allow(clippy::too_many_arguments)]
#[inline]
fn plane_conv_acc(
    x: &[f64],
    h: usize,
    w: usize,
    filt: &[f64],
    k: usize,
    stride: usize,
    out: &mut [f64],
    ho: usize,
    wo: usize,
) {
    let pad = k / 2;
    for ky in 0..k {
        let (oy0, oy1) = valid_range(h, ho, ky, pad, stride);
        for kx in 0..k {
            let wv = filt[ky * k + kx];
            let (ox0, ox1) = valid_range(w, wo, kx, pad, stride);
            if ox0 == ox1 {
                continue;
            }
            for oy in oy0..oy1 {
                let iy = oy * stride + ky - pad;
                let xrow = &x[iy * w..(iy + 1) * w];
                let orow = &mut out[oy * wo..(oy + 1) * wo];
                if stride == 1 {
                    let ix0 = ox0 + kx - pad;
                    let n = ox1 - ox0;
                    for (o, xv) in orow[ox0..ox1].iter_mut().zip(&xrow[ix0..ix0 + n]) {
                        *o += wv * xv;
                    }
                } else {
                    for ox in ox0..ox1 {
                        orow[ox] += wv * xrow[ox * stride + kx - pad];
                    }
                }
            }
        }
    }
}

/// Backward of [`plane_conv_acc`]: accumulates into `dx` and `dfilt`.
#[allow(clippy::too_many_arguments)]
#[inline]
fn plane_conv_back(
    x: &[f64],
    h: usize,
    w: usize,
    filt: &[f64],
    k: usize,
    stride: usize,
    dout: &[f64],
    ho: usize,
    wo: usize,
    dx: Option<&mut [f64]>,
    dfilt: Option<&mut [f64]>,
) {
    let pad = k / 2;
    if let Some(dx) = dx {
        for ky in 0..k {
            let (oy0, oy1) = valid_range(h, ho, ky, pad, stride);
            for kx in 0..k {
                let wv = filt[ky * k + kx];
                let (ox0, ox1) = valid_range(w, wo, kx, pad, stride);
                for oy in oy0..oy1 {
                    let iy = oy * stride + ky - pad;
                    for ox in ox0..ox1 {
                        dx[iy * w + ox * stride + kx - pad] += wv * dout[oy * wo + ox];
                    }
                }
            }
        }
    }
    if let Some(dfilt) = dfilt {
        for ky in 0..k {
            let (oy0, oy1) = valid_range(h, ho, ky, pad, stride);
            for kx in 0..k {
                let (ox0, ox1) = valid_range(w, wo, kx, pad, stride);
                let mut acc = 0.0;
                for oy in oy0..oy1 {
                    let iy = oy * stride + ky - pad;
                    for ox in ox0..ox1 {
                        acc += x[iy * w + ox * stride + kx - pad] * dout[oy * wo + ox];
                    }
                }
                dfilt[ky * k + kx] += acc;
            }
        }
    }
}

pub(crate) struct ConvGeom {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
}

impl ConvGeom {
    pub fn ho(&self) -> usize {
        out_size(self.h, self.k, self.stride)
    }
    pub fn wo(&self) -> usize {
        out_size(self.w, self.k, self.stride)
    }
}

pub(crate) fn depthwise_forward(x: &[f64], filt: &[f64], g: &ConvGeom) -> Vec<f64> {
    let (ho, wo) = (g.ho(), g.wo());
    let plane_in = g.h * g.w;
    let plane_out = ho * wo;
    let mut out = vec![0.0; g.n * g.c * plane_out];
    for n in 0..g.n {
        for c in 0..g.c {
            let idx = n * g.c + c;
            plane_conv_acc(
                &x[idx * plane_in..(idx + 1) * plane_in],
                g.h,
                g.w,
                &filt[c * g.k * g.k..(c + 1) * g.k * g.k],
                g.k,
                g.stride,
                &mut out[idx * plane_out..(idx + 1) * plane_out],
                ho,
                wo,
            );
        }
    }
    out
}

pub(crate) fn depthwise_backward(
    x: &[f64],
    filt: &[f64],
    g: &ConvGeom,
    dout: &[f64],
    mut dx: Option<&mut [f64]>,
    mut dfilt: Option<&mut [f64]>,
) {
    let (ho, wo) = (g.ho(), g.wo());
    let plane_in = g.h * g.w;
    let plane_out = ho * wo;
    let kk = g.k * g.k;
    for n in 0..g.n {
        for c in 0..g.c {
            let idx = n * g.c + c;
            plane_conv_back(
                &x[idx * plane_in..(idx + 1) * plane_in],
                g.h,
                g.w,
                &filt[c * kk..(c + 1) * kk],
                g.k,
                g.stride,
                &dout[idx * plane_out..(idx + 1) * plane_out],
                ho,
                wo,
                dx.as_deref_mut().map(|d| &mut d[idx * plane_in..(idx + 1) * plane_in]),
                dfilt.as_deref_mut().map(|d| &mut d[c * kk..(c + 1) * kk]),
            );
        }
    }
}

/// Dense convolution: `filt` is `[cout, cin, k, k]`.
pub(crate) fn conv2d_forward(x: &[f64], filt: &[f64], cout: usize, g: &ConvGeom) -> Vec<f64> {
    let (ho, wo) = (g.ho(), g.wo());
    let plane_in = g.h * g.w;
    let plane_out = ho * wo;
    let kk = g.k * g.k;
    let mut out = vec![0.0; g.n * cout * plane_out];
    for n in 0..g.n {
        for o in 0..cout {
            let dst = &mut out[(n * cout + o) * plane_out..(n * cout + o + 1) * plane_out];
            for c in 0..g.c {
                let src = &x[(n * g.c + c) * plane_in..(n * g.c + c + 1) * plane_in];
                let f = &filt[(o * g.c + c) * kk..(o * g.c + c + 1) * kk];
                plane_conv_acc(src, g.h, g.w, f, g.k, g.stride, dst, ho, wo);
            }
        }
    }
    out
}

pub(crate) fn conv2d_backward(
    x: &[f64],
    filt: &[f64],
    cout: usize,
    g: &ConvGeom,
    dout: &[f64],
    mut dx: Option<&mut [f64]>,
    mut dfilt: Option<&mut [f64]>,
) {
    let (ho, wo) = (g.ho(), g.wo());
    let plane_in = g.h * g.w;
    let plane_out = ho * wo;
    let kk = g.k * g.k;
    for n in 0..g.n {
        for o in 0..cout {
            let d = &dout[(n * cout + o) * plane_out..(n * cout + o + 1) * plane_out];
            for c in 0..g.c {
                let fi = (o * g.c + c) * kk;
                let xi = (n * g.c + c) * plane_in;
                plane_conv_back(
                    &x[xi..xi + plane_in],
                    g.h,
                    g.w,
                    &filt[fi..fi + kk],
                    g.k,
                    g.stride,
                    d,
                    ho,
                    wo,
                    dx.as_deref_mut().map(|v| &mut v[xi..xi + plane_in]),
                    dfilt.as_deref_mut().map(|v| &mut v[fi..fi + kk]),
                );
            }
        }
    }
}

/// `out[n, o, p] = sum_c w[o, c] * x[n, c, p]`, reduced over `c` ascending.
pub(crate) fn pointwise_forward(x: &[f64], w: &[f64], n: usize, cin: usize, cout: usize, p: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * cout * p];
    for b in 0..n {
        for o in 0..cout {
            let dst = &mut out[(b * cout + o) * p..(b * cout + o + 1) * p];
            for c in 0..cin {
                let wv = w[o * cin + c];
                let src = &x[(b * cin + c) * p..(b * cin + c + 1) * p];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += wv * s;
                }
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn pointwise_backward(
    x: &[f64],
    w: &[f64],
    n: usize,
    cin: usize,
    cout: usize,
    p: usize,
    dout: &[f64],
    dx: Option<&mut [f64]>,
    dw: Option<&mut [f64]>,
) {
    if let Some(dx) = dx {
        for b in 0..n {
            for c in 0..cin {
                let dst = &mut dx[(b * cin + c) * p..(b * cin + c + 1) * p];
                for o in 0..cout {
                    let wv = w[o * cin + c];
                    let src = &dout[(b * cout + o) * p..(b * cout + o + 1) * p];
                    for (d, s) in dst.iter_mut().zip(src) {
                        *d += wv * s;
                    }
                }
            }
        }
    }
    if let Some(dw) = dw {
        for o in 0..cout {
            for c in 0..cin {
                let mut acc = 0.0;
                for b in 0..n {
                    let g = &dout[(b * cout + o) * p..(b * cout + o + 1) * p];
                    let xv = &x[(b * cin + c) * p..(b * cin + c + 1) * p];
                    acc += g.iter().zip(xv).map(|(a, b)| a * b).sum::<f64>();
                }
                dw[o * cin + c] += acc;
            }
        }
    }
}

#[inline]
pub(crate) fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Row-wise log-softmax probabilities and mean cross-entropy.
pub(crate) fn softmax_ce(logits: &[f64], labels: &[usize], k: usize) -> (f64, Vec<f64>) {
    let n = labels.len();
    let mut probs = vec![0.0; n * k];
    let mut total = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        let row = &logits[i * k..(i + 1) * k];
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|v| (v - m).exp()).sum();
        let lse = m + z.ln();
        for (p, v) in probs[i * k..(i + 1) * k].iter_mut().zip(row) {
            *p = (v - lse).exp();
        }
        total += lse - row[y];
    }
    (total / n as f64, probs)
}
