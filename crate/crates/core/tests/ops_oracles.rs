use ctxmat::graph::{Feeds, Graph, Op};
use ctxmat::ops::{self, ConvParams, UNLABELED_F64};
use ctxmat::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn at(t: &Tensor, n: usize, c: usize, y: usize, x: usize) -> f64 {
    let s = t.shape();
    t.data()[((n * s[1] + c) * s[2] + y) * s[3] + x]
}

/// Direct summation with explicit zero padding.
fn naive_conv(x: &Tensor, w: &Tensor, b: &Tensor, p: ConvParams) -> Tensor {
    let (n, c, h, wd) = x.dims4().unwrap();
    let (k, _, kh, kw) = w.dims4().unwrap();
    let oh = (h + 2 * p.padding - p.dilation * (kh - 1) - 1) / p.stride + 1;
    let ow = (wd + 2 * p.padding - p.dilation * (kw - 1) - 1) / p.stride + 1;
    let mut out = Tensor::zeros(&[n, k, oh, ow]);
    for ni in 0..n {
        for ki in 0..k {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = b.data()[ki];
                    for ci in 0..c {
                        for dy in 0..kh {
                            for dx in 0..kw {
                                let iy = (oy * p.stride + dy * p.dilation) as isize - p.padding as isize;
                                let ix = (ox * p.stride + dx * p.dilation) as isize - p.padding as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                acc += at(w, ki, ci, dy, dx) * at(x, ni, ci, iy as usize, ix as usize);
                            }
                        }
                    }
                    out.data_mut()[((ni * k + ki) * oh + oy) * ow + ox] = acc;
                }
            }
        }
    }
    out
}

#[test]
fn dilated_conv_matches_direct_summation() {
    let mut r = rng(1);
    let x = Tensor::uniform(&[1, 2, 6, 6], -1.0, 1.0, &mut r);
    let w = Tensor::uniform(&[3, 2, 3, 3], -1.0, 1.0, &mut r);
    let b = Tensor::uniform(&[3], -1.0, 1.0, &mut r);
    for p in [
        ConvParams::dilated(2),
        ConvParams::dilated(1),
        ConvParams { stride: 2, dilation: 1, padding: 1 },
        ConvParams::default(),
    ] {
        let got = ops::conv2d(&x, &w, &b, p).unwrap();
        let want = naive_conv(&x, &w, &b, p);
        assert_eq!(got.shape(), want.shape());
        for (a, e) in got.data().iter().zip(want.data()) {
            assert!((a - e).abs() < 1e-12, "{p:?}: {a} vs {e}");
        }
    }
}

#[test]
fn conv_shape_and_ones() {
    let p = ConvParams::dilated(2);
    assert_eq!(p.output_extent(48, 3), Some(48));
    let y = ops::conv2d(
        &Tensor::full(&[1, 1, 3, 3], 1.0),
        &Tensor::full(&[1, 1, 3, 3], 1.0),
        &Tensor::zeros(&[1]),
        ConvParams::default(),
    )
    .unwrap();
    assert_eq!(y.shape(), &[1, 1, 1, 1]);
    assert_eq!(y.data()[0], 9.0);
}

#[test]
fn transposed_conv_is_matrix_transpose() {
    let mut r = rng(2);
    let w = Tensor::uniform(&[1, 1, 2, 2], -1.0, 1.0, &mut r);
    let stride = 2;
    let p = ConvParams { stride, dilation: 1, padding: 0 };
    // Columns of the dense conv2d matrix are responses to basis inputs.
    let (h, oh) = (4, 2);
    let mut m = vec![vec![0.0; h * h]; oh * oh];
    for j in 0..h * h {
        let mut e = Tensor::zeros(&[1, 1, h, h]);
        e.data_mut()[j] = 1.0;
        let col = ops::conv2d(&e, &w, &Tensor::zeros(&[1]), p).unwrap();
        for (i, v) in col.data().iter().enumerate() {
            m[i][j] = *v;
        }
    }
    let y = Tensor::uniform(&[1, 1, oh, oh], -1.0, 1.0, &mut r);
    let got = ops::conv_transpose2d(&y, &w, stride).unwrap();
    assert_eq!(got.shape(), &[1, 1, h, h]);
    for j in 0..h * h {
        let want: f64 = (0..oh * oh).map(|i| m[i][j] * y.data()[i]).sum();
        assert!((got.data()[j] - want).abs() < 1e-10);
    }
}

#[test]
fn transposed_conv_shapes() {
    let y = ops::conv_transpose2d(&Tensor::zeros(&[1, 2, 12, 12]), &Tensor::full(&[2, 3, 2, 2], 1.0), 2).unwrap();
    assert_eq!(y.shape(), &[1, 3, 24, 24]);
    assert!(y.data().iter().all(|&v| v == 0.0));
}

#[test]
fn maxpool_matches_window_scan() {
    let mut r = rng(3);
    let x = Tensor::uniform(&[1, 3, 8, 8], -1.0, 1.0, &mut r);
    let (y, _) = ops::maxpool2(&x).unwrap();
    for c in 0..3 {
        for oy in 0..4 {
            for ox in 0..4 {
                let mut best = f64::NEG_INFINITY;
                for dy in 0..2 {
                    for dx in 0..2 {
                        best = best.max(at(&x, 0, c, 2 * oy + dy, 2 * ox + dx));
                    }
                }
                assert_eq!(at(&y, 0, c, oy, ox), best);
            }
        }
    }
    let (small, _) = ops::maxpool2(&Tensor::new(vec![1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap()).unwrap();
    assert_eq!(small.data(), &[4.0]);
}

#[test]
fn concat_layout_and_rejection() {
    let a = Tensor::full(&[1, 2, 2, 2], 1.0);
    let b = Tensor::full(&[1, 3, 2, 2], 2.0);
    let y = ops::concat_channels(&a, &b).unwrap();
    assert_eq!(y.shape(), &[1, 5, 2, 2]);
    assert!(y.data()[..8].iter().all(|&v| v == 1.0));
    // zero-channel tensors cannot be built, so they never reach the op
    assert!(Tensor::new(vec![1, 0, 2, 2], vec![]).is_err());
}

#[test]
fn softmax_stability_and_normalization() {
    let y = ops::softmax_channel(&Tensor::new(vec![1, 2, 1, 1], vec![1000.0, 0.0]).unwrap()).unwrap();
    assert_eq!(y.data()[0], 1.0);
    assert!(y.data()[1] >= 0.0 && y.data()[1] < 1e-300);
    let half = ops::softmax_channel(&Tensor::zeros(&[1, 2, 1, 1])).unwrap();
    assert_eq!(half.data(), &[0.5, 0.5]);
    let mut r = rng(4);
    let z = ops::softmax_channel(&Tensor::uniform(&[2, 5, 3, 3], -20.0, 20.0, &mut r)).unwrap();
    for n in 0..2 {
        for px in 0..9 {
            let s: f64 = (0..5).map(|c| z.data()[(n * 5 + c) * 9 + px]).sum();
            assert!((s - 1.0).abs() < 1e-9);
        }
    }
}

#[test]
fn masked_loss_ignores_unlabeled_logits_bitwise() {
    let mut r = rng(5);
    let logits = Tensor::uniform(&[1, 4, 5, 5], -3.0, 3.0, &mut r);
    let labels = Tensor::from_fn(&[1, 1, 5, 5], |i| if i % 3 == 0 { UNLABELED_F64 } else { (i % 4) as f64 });
    let (loss, grad) = ops::masked_cross_entropy(&logits, &labels).unwrap();
    let mut mutated = logits.clone();
    for c in 0..4 {
        for px in (0..25).filter(|p| p % 3 == 0) {
            mutated.data_mut()[c * 25 + px] = r.gen_range(-50.0..50.0);
        }
    }
    let (loss2, grad2) = ops::masked_cross_entropy(&mutated, &labels).unwrap();
    assert_eq!(loss.to_bits(), loss2.to_bits());
    assert!(grad.bit_eq(&grad2));
    for c in 0..4 {
        for px in (0..25).filter(|p| p % 3 == 0) {
            assert_eq!(grad.data()[c * 25 + px], 0.0);
        }
    }
}

#[test]
fn masked_loss_analytic_cases() {
    let labels = Tensor::from_fn(&[1, 1, 2, 2], |i| if i == 0 { 3.0 } else { UNLABELED_F64 });
    let (loss, _) = ops::masked_cross_entropy(&Tensor::zeros(&[1, 16, 2, 2]), &labels).unwrap();
    assert!((loss - 16f64.ln()).abs() < 1e-12);
    let mut logits = Tensor::zeros(&[1, 16, 2, 2]);
    logits.data_mut()[3 * 4] = 60.0;
    let (loss, _) = ops::masked_cross_entropy(&logits, &labels).unwrap();
    assert!(loss <= 1e-9);
}

#[test]
fn linear_graph_gradient_is_input() {
    let mut g = Graph::new();
    let x = g.input("x");
    let w = g.parameter("w", Tensor::full(&[2, 3], 0.5), true).unwrap();
    let loss = g.binary(Op::WeightedSum, x, w, "loss").unwrap();
    let xv = Tensor::from_fn(&[2, 3], |i| i as f64 - 2.0);
    let feeds = Feeds::from([("x".to_string(), xv.clone())]);
    let grads = g.backward(&g.forward(&feeds).unwrap(), loss).unwrap();
    assert!(grads.param("w").unwrap().bit_eq(&xv));
}

#[test]
fn constant_graph_has_zero_gradient() {
    let mut g = Graph::new();
    let x = g.input("x");
    let w = g.parameter("w", Tensor::full(&[4], 1.0), true).unwrap();
    let z = g.parameter("z", Tensor::zeros(&[4]), false).unwrap();
    let loss = g.binary(Op::WeightedSum, x, z, "loss").unwrap();
    let _unused = w;
    let feeds = Feeds::from([("x".to_string(), Tensor::full(&[4], 3.0))]);
    let grads = g.backward(&g.forward(&feeds).unwrap(), loss).unwrap();
    assert!(grads.param("w").map_or(true, |t| t.data().iter().all(|&v| v == 0.0)));
}
