use hseg_tensor::{NormMode, Padding, RunningStats, Tape, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

/// Nested-loop cross-correlation with explicit zero padding.
fn conv_oracle(
    x: &Tensor,
    k: &Tensor,
    stride: usize,
    dilation: usize,
    pad: (usize, usize),
    out: (usize, usize),
) -> Tensor {
    let (n, cin, h, w) = x.dims4().unwrap();
    let (cout, _, kh, kw) = k.dims4().unwrap();
    let mut y = Tensor::zeros(&[n, cout, out.0, out.1]);
    for b in 0..n {
        for co in 0..cout {
            for oy in 0..out.0 {
                for ox in 0..out.1 {
                    let mut acc = 0.0;
                    for ci in 0..cin {
                        for i in 0..kh {
                            for j in 0..kw {
                                let sy = (oy * stride + i * dilation) as isize - pad.0 as isize;
                                let sx = (ox * stride + j * dilation) as isize - pad.1 as isize;
                                if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                                    continue;
                                }
                                acc += x.data()[((b * cin + ci) * h + sy as usize) * w + sx as usize]
                                    * k.data()[((co * cin + ci) * kh + i) * kw + j];
                            }
                        }
                    }
                    y.data_mut()[((b * cout + co) * out.0 + oy) * out.1 + ox] = acc;
                }
            }
        }
    }
    y
}

/// Scatter each input pixel times the kernel into the strided output grid.
fn transpose_oracle(x: &Tensor, k: &Tensor, stride: usize) -> Tensor {
    let (n, cin, h, w) = x.dims4().unwrap();
    let (_, cout, kh, kw) = k.dims4().unwrap();
    let (oh, ow) = ((h - 1) * stride + kh, (w - 1) * stride + kw);
    let mut y = Tensor::zeros(&[n, cout, oh, ow]);
    for b in 0..n {
        for ci in 0..cin {
            for iy in 0..h {
                for ix in 0..w {
                    let v = x.data()[((b * cin + ci) * h + iy) * w + ix];
                    for co in 0..cout {
                        for i in 0..kh {
                            for j in 0..kw {
                                let kv = k.data()[((ci * cout + co) * kh + i) * kw + j];
                                y.data_mut()[((b * cout + co) * oh + iy * stride + i) * ow + ix * stride + j] += v * kv;
                            }
                        }
                    }
                }
            }
        }
    }
    y
}

fn run_conv(x: &Tensor, k: &Tensor, stride: usize, dilation: usize, padding: Padding) -> Tensor {
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let kv = tape.constant(k.clone());
    let y = tape.conv2d(xv, kv, stride, dilation, padding).unwrap();
    tape.value(y).clone()
}

fn run_transpose(x: &Tensor, k: &Tensor, stride: usize) -> Tensor {
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let kv = tape.constant(k.clone());
    let y = tape.conv2d_transpose(xv, kv, stride).unwrap();
    tape.value(y).clone()
}

#[test]
fn conv_identity_kernel() {
    let x = Tensor::from_fn(&[1, 1, 3, 3], |i| i as f64 * 0.5);
    let y = run_conv(&x, &Tensor::ones(&[1, 1, 1, 1]), 1, 1, Padding::Same);
    assert_eq!(y, x);
}

#[test]
fn conv_dilated_constant_field() {
    let y = run_conv(&Tensor::ones(&[1, 1, 5, 5]), &Tensor::ones(&[1, 1, 3, 3]), 1, 2, Padding::Valid);
    assert_eq!(y.shape(), &[1, 1, 1, 1]);
    assert_eq!(y.item(), 9.0);
}

#[test]
fn conv_matches_nested_loop_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let x = random(&[1, 2, 6, 6], &mut rng);
    let k = random(&[3, 2, 3, 3], &mut rng);
    let y = run_conv(&x, &k, 1, 1, Padding::Valid);
    let expected = conv_oracle(&x, &k, 1, 1, (0, 0), (4, 4));
    assert!(y.max_abs_diff(&expected) < 1e-10);
}

#[test]
fn conv_rejects_channel_mismatch() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::zeros(&[1, 2, 4, 4]));
    let k = tape.constant(Tensor::zeros(&[1, 3, 3, 3]));
    let err = tape.conv2d(x, k, 1, 1, Padding::Same).unwrap_err().to_string();
    assert!(err.contains("[1, 2, 4, 4]") && err.contains("[1, 3, 3, 3]"), "{err}");
}

#[test]
fn transpose_single_pixel_expansion() {
    let k = Tensor::new(&[1, 1, 2, 2], vec![1.0, -2.0, 3.0, 0.5]).unwrap();
    let y = run_transpose(&Tensor::full(&[1, 1, 1, 1], 2.0), &k, 2);
    assert_eq!(y.shape(), &[1, 1, 2, 2]);
    assert_eq!(y.data(), &[2.0, -4.0, 6.0, 1.0]);
}

#[test]
fn transpose_ones_tile_the_output() {
    let y = run_transpose(&Tensor::ones(&[1, 1, 2, 2]), &Tensor::ones(&[1, 1, 2, 2]), 2);
    let expected = transpose_oracle(&Tensor::ones(&[1, 1, 2, 2]), &Tensor::ones(&[1, 1, 2, 2]), 2);
    assert_eq!(y, expected);
    assert_eq!(y, Tensor::ones(&[1, 1, 4, 4]));
}

#[test]
fn transpose_rejects_channel_mismatch() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::zeros(&[1, 2, 3, 3]));
    let k = tape.constant(Tensor::zeros(&[3, 1, 2, 2]));
    assert!(tape.conv2d_transpose(x, k, 2).is_err());
}

#[test]
fn transpose_matches_scatter_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for stride in [1, 2, 3] {
        let x = random(&[2, 3, 3, 4], &mut rng);
        let k = random(&[3, 2, 2, 3], &mut rng);
        let y = run_transpose(&x, &k, stride);
        assert!(y.max_abs_diff(&transpose_oracle(&x, &k, stride)) < 1e-12);
    }
}

/// Triangle-kernel interpolation: weight of source `i` is `max(0, 1 - |s - i|)`
/// with the sample position clamped into the source extent.
fn bilinear_oracle(x: &Tensor, oh: usize, ow: usize) -> Tensor {
    let (n, c, h, w) = x.dims4().unwrap();
    let pos = |o: usize, out: usize, inp: usize| {
        ((o as f64 + 0.5) * inp as f64 / out as f64 - 0.5).clamp(0.0, (inp - 1) as f64)
    };
    let mut y = Tensor::zeros(&[n, c, oh, ow]);
    for p in 0..n * c {
        for oy in 0..oh {
            for ox in 0..ow {
                let (sy, sx) = (pos(oy, oh, h), pos(ox, ow, w));
                let mut acc = 0.0;
                for iy in 0..h {
                    for ix in 0..w {
                        let wy = (1.0 - (sy - iy as f64).abs()).max(0.0);
                        let wx = (1.0 - (sx - ix as f64).abs()).max(0.0);
                        acc += wy * wx * x.data()[(p * h + iy) * w + ix];
                    }
                }
                y.data_mut()[(p * oh + oy) * ow + ox] = acc;
            }
        }
    }
    y
}

fn run_bilinear(x: &Tensor, h: usize, w: usize) -> Tensor {
    let mut tape = Tape::new();
    let v = tape.constant(x.clone());
    let y = tape.bilinear_upsample(v, h, w).unwrap();
    tape.value(y).clone()
}

#[test]
fn bilinear_preserves_constants() {
    let y = run_bilinear(&Tensor::full(&[1, 2, 3, 5], 7.0), 11, 13);
    assert!(y.data().iter().all(|v| (v - 7.0).abs() < 1e-12));
}

#[test]
fn bilinear_two_pixel_row() {
    let x = Tensor::new(&[1, 1, 1, 2], vec![0.0, 1.0]).unwrap();
    let y = run_bilinear(&x, 1, 4);
    let expected = bilinear_oracle(&x, 1, 4);
    assert!(y.max_abs_diff(&expected) < 1e-15);
    assert_eq!(y.data(), &[0.0, 0.25, 0.75, 1.0]);
}

#[test]
fn bilinear_identity_and_random_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let x = random(&[2, 2, 3, 4], &mut rng);
    assert_eq!(run_bilinear(&x, 3, 4), x);
    for (h, w) in [(6, 8), (7, 9), (12, 16)] {
        assert!(run_bilinear(&x, h, w).max_abs_diff(&bilinear_oracle(&x, h, w)) < 1e-12);
    }
}

#[test]
fn bilinear_rejects_shrinking() {
    let mut tape = Tape::new();
    let v = tape.constant(Tensor::zeros(&[1, 1, 4, 4]));
    assert!(tape.bilinear_upsample(v, 2, 4).is_err());
}

#[test]
fn batch_norm_train_statistics() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (n, c, hw) = (16, 3, 16 * 16);
    let x = Tensor::from_fn(&[n, c, 16, 16], |i| {
        let ch = (i / hw) % c;
        3.0 * ch as f64 - 2.0 + rng.gen_range(-2.0..2.0) * (ch + 1) as f64
    });
    let gamma = Tensor::new(&[c], vec![0.5, -2.0, 1.5]).unwrap();
    let beta = Tensor::new(&[c], vec![0.1, 1.0, -0.7]).unwrap();
    let mut tape = Tape::new();
    let (xv, gv, bv) = (tape.constant(x), tape.constant(gamma.clone()), tape.constant(beta.clone()));
    let (y, _) = tape.batch_norm_train(xv, gv, bv).unwrap();
    let y = tape.value(y);
    for ch in 0..c {
        let vals: Vec<f64> = (0..n).flat_map(|b| y.data()[(b * c + ch) * hw..(b * c + ch + 1) * hw].to_vec()).collect();
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        let std = (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64).sqrt();
        assert!((mean - beta.data()[ch]).abs() < 1e-2);
        assert!((std - gamma.data()[ch].abs()).abs() < 1e-2);
    }
}

#[test]
fn batch_norm_relu_clamps_negative() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::full(&[1, 2, 2, 2], -3.0));
    let g = tape.constant(Tensor::ones(&[2]));
    let b = tape.constant(Tensor::zeros(&[2]));
    let mut stats = RunningStats::new(2);
    let y = tape.batch_norm_relu(x, g, b, &mut stats, NormMode::Eval).unwrap();
    assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
}

#[test]
fn batch_norm_eval_identity_stats() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let xt = random(&[2, 3, 4, 4], &mut rng);
    let mut tape = Tape::new();
    let x = tape.constant(xt.clone());
    let g = tape.constant(Tensor::ones(&[3]));
    let b = tape.constant(Tensor::zeros(&[3]));
    let mut stats = RunningStats::new(3);
    let y = tape.batch_norm_relu(x, g, b, &mut stats, NormMode::Eval).unwrap();
    let expected = xt.map(|v| v.max(0.0) / (1.0 + hseg_tensor::BN_EPSILON).sqrt());
    assert!(tape.value(y).max_abs_diff(&expected) < 1e-12);
}

#[test]
fn batch_norm_train_updates_running_stats() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::from_fn(&[2, 1, 1, 2], |i| i as f64));
    let g = tape.constant(Tensor::ones(&[1]));
    let b = tape.constant(Tensor::zeros(&[1]));
    let mut stats = RunningStats::new(1);
    tape.batch_norm_relu(x, g, b, &mut stats, NormMode::train()).unwrap();
    // batch mean 1.5, unbiased variance 5/3
    assert!((stats.mean[0] - 0.15).abs() < 1e-12);
    assert!((stats.var[0] - (0.9 + 0.1 * 5.0 / 3.0)).abs() < 1e-12);
}

fn run_softmax(x: &Tensor) -> Tensor {
    let mut tape = Tape::new();
    let v = tape.constant(x.clone());
    let y = tape.softmax(v).unwrap();
    tape.value(y).clone()
}

#[test]
fn softmax_uniform_and_stable() {
    let y = run_softmax(&Tensor::zeros(&[1, 3, 1, 1]));
    assert!(y.data().iter().all(|v| (v - 1.0 / 3.0).abs() < 1e-15));
    let y = run_softmax(&Tensor::new(&[1, 2, 1, 1], vec![1000.0, 0.0]).unwrap());
    assert_eq!(y.data()[0], 1.0);
    assert!(y.data()[1] >= 0.0 && y.data()[1] < 1e-300);
}

#[test]
fn softmax_matches_direct_formula() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x = Tensor::from_fn(&[2, 4, 3, 3], |_| rng.gen_range(-5.0..5.0));
    let y = run_softmax(&x);
    let area = 9;
    for b in 0..2 {
        for p in 0..area {
            let z: f64 = (0..4).map(|k| x.data()[(b * 4 + k) * area + p].exp()).sum();
            for k in 0..4 {
                let i = (b * 4 + k) * area + p;
                assert!((y.data()[i] - x.data()[i].exp() / z).abs() < 1e-12);
            }
        }
    }
}

fn inner(a: &Tensor, b: &Tensor) -> f64 {
    a.dot(b)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn conv_agrees_with_oracle(
        seed in any::<u64>(),
        h in 3usize..=8, w in 3usize..=8,
        cin in 1usize..=3, cout in 1usize..=3,
        k in prop::sample::select(vec![1usize, 2, 3]),
        stride in 1usize..=2, dilation in 1usize..=2,
        same in any::<bool>(),
    ) {
        let span = dilation * (k - 1) + 1;
        prop_assume!(same || (h >= span && w >= span));
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random(&[2, cin, h, w], &mut rng);
        let kt = random(&[cout, cin, k, k], &mut rng);
        let padding = if same { Padding::Same } else { Padding::Valid };
        let geom = hseg_tensor::ConvGeometry::new(h, w, k, k, stride, dilation, padding).unwrap();
        let y = run_conv(&x, &kt, stride, dilation, padding);
        let expected = conv_oracle(&x, &kt, stride, dilation, (geom.pad_top, geom.pad_left), (geom.out_h, geom.out_w));
        prop_assert!(y.max_abs_diff(&expected) < 1e-10);
    }

    #[test]
    fn conv_transpose_is_adjoint(
        seed in any::<u64>(),
        h in 1usize..=4, w in 1usize..=4,
        cin in 1usize..=3, cout in 1usize..=3,
        k in 1usize..=3, stride in 1usize..=2,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // x lives on the large grid, y on the small one.
        let (bh, bw) = ((h - 1) * stride + k, (w - 1) * stride + k);
        let x = random(&[1, cin, bh, bw], &mut rng);
        let kt = random(&[cout, cin, k, k], &mut rng);
        let y = random(&[1, cout, h, w], &mut rng);
        let lhs = inner(&run_conv(&x, &kt, stride, 1, Padding::Valid), &y);
        let rhs = inner(&x, &run_transpose(&y, &kt, stride));
        prop_assert!((lhs - rhs).abs() < 1e-10);
    }

    #[test]
    fn softmax_sums_to_one(seed in any::<u64>(), c in 1usize..=6, scale in 0.1f64..500.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Tensor::from_fn(&[2, c, 3, 2], |_| rng.gen_range(-1.0..1.0) * scale);
        let y = run_softmax(&x);
        for b in 0..2 {
            for p in 0..6 {
                let s: f64 = (0..c).map(|k| y.data()[(b * c + k) * 6 + p]).sum();
                prop_assert!((s - 1.0).abs() < 1e-9);
                prop_assert!((0..c).all(|k| y.data()[(b * c + k) * 6 + p] >= 0.0));
            }
        }
    }
}
