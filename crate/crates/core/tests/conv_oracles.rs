//! Convolutions against naive loops with explicit zero padding.

use proptest::prelude::*;
use spnas::seeded_rng;
use spnas::tensor::{Tape, Tensor};
use rand::Rng as _;

fn rand_tensor(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = seeded_rng(seed);
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// Input value at (n, c, y, x) with coordinates possibly outside the image.
fn at(x: &Tensor, n: usize, c: usize, y: isize, xx: isize) -> f64 {
    let s = x.shape();
    if y < 0 || xx < 0 || y >= s[2] as isize || xx >= s[3] as isize {
        return 0.0;
    }
    x.data()[((n * s[1] + c) * s[2] + y as usize) * s[3] + xx as usize]
}

fn out_len(h: usize, k: usize, stride: usize) -> usize {
    (h + 2 * (k / 2) - k) / stride + 1
}

fn naive_conv(x: &Tensor, w: &Tensor, stride: usize) -> Vec<f64> {
    let (n, cin, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (cout, k) = (w.shape()[0], w.shape()[2]);
    let (ho, wo) = (out_len(h, k, stride), out_len(wd, k, stride));
    let pad = (k / 2) as isize;
    let mut out = Vec::new();
    for b in 0..n {
        for o in 0..cout {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = 0.0;
                    for i in 0..cin {
                        for ky in 0..k {
                            for kx in 0..k {
                                let y = (oy * stride + ky) as isize - pad;
                                let xx = (ox * stride + kx) as isize - pad;
                                acc += at(x, b, i, y, xx) * w.data()[((o * cin + i) * k + ky) * k + kx];
                            }
                        }
                    }
                    out.push(acc);
                }
            }
        }
    }
    out
}

fn naive_depthwise(x: &Tensor, w: &Tensor, stride: usize) -> Vec<f64> {
    let (n, c, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let k = w.shape()[1];
    let (ho, wo) = (out_len(h, k, stride), out_len(wd, k, stride));
    let pad = (k / 2) as isize;
    let mut out = Vec::new();
    for b in 0..n {
        for ch in 0..c {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = 0.0;
                    for ky in 0..k {
                        for kx in 0..k {
                            let y = (oy * stride + ky) as isize - pad;
                            let xx = (ox * stride + kx) as isize - pad;
                            acc += at(x, b, ch, y, xx) * w.data()[(ch * k + ky) * k + kx];
                        }
                    }
                    out.push(acc);
                }
            }
        }
    }
    out
}

fn assert_close(got: &[f64], want: &[f64]) {
    assert_eq!(got.len(), want.len());
    for (g, w) in got.iter().zip(want) {
        assert!((g - w).abs() < 1e-12, "{g} vs {w}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn depthwise_matches_naive(h in 1usize..9, w in 1usize..9, c in 1usize..4, k in prop::sample::select(vec![1usize, 3, 5]), stride in 1usize..3, seed in 0u64..1000) {
        let x = rand_tensor(&[2, c, h, w], seed);
        let f = rand_tensor(&[c, k, k], seed + 1);
        let mut tape = Tape::new();
        let (xv, fv) = (tape.constant(x.clone()), tape.constant(f.clone()));
        let y = tape.conv2d_depthwise(xv, fv, stride).unwrap();
        prop_assert_eq!(tape.value(y).shape(), &[2, c, out_len(h, k, stride), out_len(w, k, stride)][..]);
        assert_close(tape.value(y).data(), &naive_depthwise(&x, &f, stride));
    }

    #[test]
    fn full_conv_matches_naive(h in 1usize..8, cin in 1usize..4, cout in 1usize..4, k in prop::sample::select(vec![1usize, 3]), stride in 1usize..3, seed in 0u64..1000) {
        let x = rand_tensor(&[1, cin, h, h + 1], seed);
        let f = rand_tensor(&[cout, cin, k, k], seed + 7);
        let mut tape = Tape::new();
        let (xv, fv) = (tape.constant(x.clone()), tape.constant(f.clone()));
        let y = tape.conv2d(xv, fv, stride).unwrap();
        assert_close(tape.value(y).data(), &naive_conv(&x, &f, stride));
    }
}

#[test]
fn pointwise_is_a_1x1_convolution() {
    let x = rand_tensor(&[2, 3, 4, 5], 1);
    let w = rand_tensor(&[4, 3], 2);
    let w4 = Tensor::new(&[4, 3, 1, 1], w.data().to_vec()).unwrap();
    let mut tape = Tape::new();
    let (xv, wv) = (tape.constant(x.clone()), tape.constant(w));
    let y = tape.conv2d_pointwise(xv, wv).unwrap();
    assert_close(tape.value(y).data(), &naive_conv(&x, &w4, 1));
}

#[test]
fn dense_and_pool_by_hand() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::new(&[1, 2, 1, 2], vec![1.0, 3.0, -2.0, 6.0]).unwrap());
    let p = tape.global_avg_pool(x).unwrap();
    assert_eq!(tape.value(p).data(), &[2.0, 2.0]);
    let w = tape.constant(Tensor::new(&[2, 2], vec![1.0, -1.0, 0.5, 0.25]).unwrap());
    let b = tape.constant(Tensor::new(&[2], vec![0.1, 0.0]).unwrap());
    let y = tape.dense(p, w, b).unwrap();
    assert_eq!(tape.value(y).data(), &[0.1, 1.5]);
}

#[test]
fn kernel_larger_than_image_only_sees_the_centre_tap() {
    let x = rand_tensor(&[1, 2, 1, 1], 3);
    let f = rand_tensor(&[2, 5, 5], 4);
    let mut tape = Tape::new();
    let (xv, fv) = (tape.constant(x.clone()), tape.constant(f.clone()));
    let y = tape.conv2d_depthwise(xv, fv, 1).unwrap();
    let want = [x.data()[0] * f.data()[12], x.data()[1] * f.data()[25 + 12]];
    assert_close(tape.value(y).data(), &want);
    assert_close(tape.value(y).data(), &naive_depthwise(&x, &f, 1));
}
