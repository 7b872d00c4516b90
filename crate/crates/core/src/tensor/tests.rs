use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::gradcheck::{self, weighted_sum, Expr, OpCase};

fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
    Tensor::from_f64(shape, data).unwrap()
}

fn rand_t(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::uniform(shape, 1.0, &mut rng)
}

fn close(a: &[f64], b: &[f64], tol: f64) {
    assert_eq!(a.len(), b.len());
    for (i, (x, y)) in a.iter().zip(b).enumerate() {
        assert!((x - y).abs() <= tol, "index {i}: {x} vs {y}");
    }
}

fn eval1(f: impl FnOnce(&mut Graph<f64>) -> Result<Var>) -> Tensor<f64> {
    let mut g = Graph::new();
    let v = f(&mut g).unwrap();
    g.value(v).clone()
}

#[test]
fn mul_with_zero_and_identity_factors() {
    let out = eval1(|g| {
        let a = g.constant(t(&[2], &[2.0, 3.0]))?;
        let b = g.constant(t(&[2], &[0.0, 1.0]))?;
        g.mul(a, b)
    });
    assert_eq!(out.data(), &[0.0, 3.0]);
}

#[test]
fn sigmoid_symmetry_point() {
    let out = eval1(|g| {
        let a = g.constant(t(&[1], &[0.0]))?;
        g.sigmoid(a)
    });
    assert_eq!(out.data(), &[0.5]);
}

#[test]
fn broadcast_mul_is_outer_product() {
    let a = rand_t(&[2, 3, 1], 1);
    let b = rand_t(&[1, 1, 4], 2);
    let out = eval1(|g| {
        let (x, y) = (g.constant(a.clone())?, g.constant(b.clone())?);
        g.mul(x, y)
    });
    assert_eq!(out.shape(), &[2, 3, 4]);
    for i in 0..2 {
        for j in 0..3 {
            for k in 0..4 {
                assert_eq!(out.at(&[i, j, k]), a.at(&[i, j, 0]) * b.at(&[0, 0, k]));
            }
        }
    }
}

#[test]
fn unbroadcastable_shapes_error() {
    let mut g = Graph::<f64>::new();
    let a = g.constant(Tensor::zeros(&[2, 3])).unwrap();
    let b = g.constant(Tensor::zeros(&[3, 2])).unwrap();
    assert!(matches!(g.add(a, b), Err(Error::ShapeMismatch { .. })));
}

#[test]
fn matmul_examples() {
    let x = t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
    let out = eval1(|g| {
        let i = g.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]))?;
        let x = g.constant(x.clone())?;
        g.matmul(i, x)
    });
    assert_eq!(out, x);
    let out = eval1(|g| {
        let a = g.constant(t(&[1, 2], &[1.0, 2.0]))?;
        let b = g.constant(t(&[2, 1], &[3.0, 4.0]))?;
        g.matmul(a, b)
    });
    assert_eq!(out.data(), &[11.0]);
    let out = eval1(|g| {
        let z = g.constant(Tensor::zeros(&[3, 2]))?;
        let x = g.constant(x.clone())?;
        g.matmul(z, x)
    });
    assert!(out.data().iter().all(|&v| v == 0.0));
}

#[test]
fn matmul_batched_and_transposed_match_loops() {
    let a = rand_t(&[3, 4, 5], 3);
    let b = rand_t(&[6, 5], 4);
    let out = eval1(|g| {
        let (x, y) = (g.constant(a.clone())?, g.constant(b.clone())?);
        g.matmul_t(x, y, false, true)
    });
    assert_eq!(out.shape(), &[3, 4, 6]);
    for bi in 0..3 {
        for i in 0..4 {
            for j in 0..6 {
                let want: f64 = (0..5).map(|k| a.at(&[bi, i, k]) * b.at(&[j, k])).sum();
                assert!((out.at(&[bi, i, j]) - want).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn matmul_inner_mismatch_errors() {
    let mut g = Graph::<f64>::new();
    let a = g.constant(Tensor::zeros(&[2, 3])).unwrap();
    let b = g.constant(Tensor::zeros(&[2, 3])).unwrap();
    assert!(g.matmul(a, b).is_err());
}

#[test]
fn softmax_examples() {
    let sm = |d: &[f64]| {
        eval1(|g| {
            let x = g.constant(t(&[d.len()], d))?;
            g.softmax(x)
        })
    };
    assert_eq!(sm(&[1.0, 1.0]).data(), &[0.5, 0.5]);
    assert_eq!(sm(&[0.0]).data(), &[1.0]);
    // exp oracle: e^0 / (e^0 + 3) and 3 / (1 + 3)
    close(sm(&[0.0, 3f64.ln()]).data(), &[0.25, 0.75], 1e-12);
}

#[test]
fn layer_norm_examples() {
    let ln = |x: Tensor<f64>, gamma: f64, beta: f64, eps: f64| {
        let c = x.shape()[1];
        eval1(|g| {
            let x = g.constant(x)?;
            let gm = g.constant(Tensor::full(&[c], gamma))?;
            let bt = g.constant(Tensor::full(&[c], beta))?;
            g.layer_norm(x, gm, bt, 1, eps)
        })
    };
    let constant = ln(Tensor::full(&[2, 3, 4], 7.5), 1.0, 0.0, 1e-5);
    assert!(constant.data().iter().all(|v| v.abs() < 1e-9));
    let pair = ln(t(&[1, 2], &[1.0, -1.0]), 1.0, 0.0, 1e-12);
    close(pair.data(), &[1.0, -1.0], 1e-9);
    let gamma_zero = ln(rand_t(&[2, 5, 3], 9), 0.0, 0.25, 1e-5);
    assert!(gamma_zero.data().iter().all(|&v| v == 0.25));
}

/// Brute-force SAME-padded convolution; the oracle for both conv paths.
fn conv_oracle(x: &Tensor<f64>, w: &Tensor<f64>, b: Option<&Tensor<f64>>, stride: [usize; 3], depthwise: bool) -> Tensor<f64> {
    let (bn, cin, ti, hi, wi) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3], x.shape()[4]);
    let (cout, kt, kh, kw) = (w.shape()[0], w.shape()[2], w.shape()[3], w.shape()[4]);
    let out_ext = |n: usize, k: usize, s: usize| (n + 2 * (k / 2) - k) / s + 1;
    let (to, ho, wo) = (out_ext(ti, kt, stride[0]), out_ext(hi, kh, stride[1]), out_ext(wi, kw, stride[2]));
    let mut out = Tensor::zeros(&[bn, cout, to, ho, wo]);
    for n in 0..bn {
        for co in 0..cout {
            for a in 0..to {
                for bb in 0..ho {
                    for c in 0..wo {
                        let mut acc = b.map_or(0.0, |b| b.data()[co]);
                        let chans: Vec<usize> = if depthwise { vec![co] } else { (0..cin).collect() };
                        for (wc, &ci) in chans.iter().enumerate() {
                            for dt in 0..kt {
                                for dh in 0..kh {
                                    for dw in 0..kw {
                                        let it = (a * stride[0] + dt) as isize - (kt / 2) as isize;
                                        let ih = (bb * stride[1] + dh) as isize - (kh / 2) as isize;
                                        let iw = (c * stride[2] + dw) as isize - (kw / 2) as isize;
                                        if it < 0 || ih < 0 || iw < 0 || it >= ti as isize || ih >= hi as isize || iw >= wi as isize {
                                            continue;
                                        }
                                        let xv = x.at(&[n, ci, it as usize, ih as usize, iw as usize]);
                                        acc += xv * w.at(&[co, wc, dt, dh, dw]);
                                    }
                                }
                            }
                        }
                        let idx = (((n * cout + co) * to + a) * ho + bb) * wo + c;
                        out.data_mut()[idx] = acc;
                    }
                }
            }
        }
    }
    out
}

fn conv(x: &Tensor<f64>, w: &Tensor<f64>, b: Option<&Tensor<f64>>, spec: ConvSpec) -> Tensor<f64> {
    eval1(|g| {
        let xv = g.constant(x.clone())?;
        let wv = g.constant(w.clone())?;
        let bv = b.map(|b| g.constant(b.clone())).transpose()?;
        g.conv3d(xv, wv, bv, spec)
    })
}

#[test]
fn conv3d_zero_kernel_gives_zero() {
    let x = rand_t(&[1, 2, 3, 4, 4], 5);
    let out = conv(&x, &Tensor::zeros(&[3, 2, 3, 3, 3]), None, ConvSpec::DENSE);
    assert_eq!(out.shape(), &[1, 3, 3, 4, 4]);
    assert!(out.data().iter().all(|&v| v == 0.0));
}

#[test]
fn conv3d_depthwise_delta_is_identity() {
    let x = rand_t(&[2, 3, 3, 4, 5], 6);
    let mut w = Tensor::zeros(&[3, 1, 3, 3, 3]);
    for c in 0..3 {
        w.data_mut()[c * 27 + 13] = 1.0;
    }
    let out = conv(&x, &w, Some(&Tensor::zeros(&[3])), ConvSpec::DEPTHWISE);
    assert_eq!(out, x);
}

#[test]
fn conv3d_averaging_kernel_along_w() {
    let x = t(&[1, 1, 1, 1, 3], &[1.0, 2.0, 3.0]);
    let w = Tensor::full(&[1, 1, 1, 1, 3], 1.0 / 3.0);
    let out = conv(&x, &w, None, ConvSpec::DENSE);
    close(out.data(), &[1.0, 2.0, 5.0 / 3.0], 1e-12);
}

#[test]
fn conv3d_matches_brute_force() {
    let cases: [(usize, usize, [usize; 3], [usize; 3], bool); 5] = [
        (3, 4, [3, 3, 3], [1, 1, 1], false),
        (3, 2, [1, 3, 3], [1, 2, 2], false),
        (2, 5, [1, 1, 1], [1, 1, 1], false),
        (4, 4, [3, 3, 3], [1, 1, 1], true),
        (4, 4, [1, 3, 3], [1, 2, 2], true),
    ];
    for (i, (cin, cout, k, stride, dw)) in cases.into_iter().enumerate() {
        let x = rand_t(&[2, cin, 3, 5, 6], 10 + i as u64);
        let w = rand_t(&[cout, if dw { 1 } else { cin }, k[0], k[1], k[2]], 20 + i as u64);
        let b = rand_t(&[cout], 30 + i as u64);
        let spec = ConvSpec { stride, depthwise: dw };
        let got = conv(&x, &w, Some(&b), spec);
        let want = conv_oracle(&x, &w, Some(&b), stride, dw);
        assert_eq!(got.shape(), want.shape(), "case {i}");
        close(got.data(), want.data(), 1e-12);
    }
}

#[test]
fn conv3d_rejects_even_kernels_and_channel_mismatch() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::zeros(&[1, 2, 2, 4, 4])).unwrap();
    let even = g.constant(Tensor::zeros(&[2, 2, 1, 2, 2])).unwrap();
    assert!(g.conv3d(x, even, None, ConvSpec::DENSE).is_err());
    let wrong = g.constant(Tensor::zeros(&[3, 1, 1, 3, 3])).unwrap();
    assert!(g.conv3d(x, wrong, None, ConvSpec::DEPTHWISE).is_err());
    let wrong_cin = g.constant(Tensor::zeros(&[2, 3, 1, 3, 3])).unwrap();
    assert!(g.conv3d(x, wrong_cin, None, ConvSpec::DENSE).is_err());
}

fn conv2d(x: &Tensor<f64>, w: &Tensor<f64>, stride: usize) -> Tensor<f64> {
    eval1(|g| {
        let xv = g.constant(x.clone())?;
        let wv = g.constant(w.clone())?;
        g.conv2d(xv, wv, None, stride)
    })
}

#[test]
fn conv2d_zero_and_delta_kernels() {
    let x = rand_t(&[2, 3, 5, 5], 40);
    assert!(conv2d(&x, &Tensor::zeros(&[4, 3, 3, 3]), 1).data().iter().all(|&v| v == 0.0));
    let mut delta = Tensor::zeros(&[3, 3, 3, 3]);
    for c in 0..3 {
        delta.data_mut()[(c * 3 + c) * 9 + 4] = 1.0;
    }
    assert_eq!(conv2d(&x, &delta, 1), x);
}

#[test]
fn conv2d_box_filter_on_checkerboard() {
    // A 2x2 box embedded in the lower-right of a 3x3 kernel (SAME padding needs odd extents).
    let n = 6;
    let board: Vec<f64> = (0..n * n).map(|i| ((i / n + i % n) % 2) as f64).collect();
    let x = t(&[1, 1, n, n], &board);
    let mut w = Tensor::zeros(&[1, 1, 3, 3]);
    for idx in [4, 5, 7, 8] {
        w.data_mut()[idx] = 0.25;
    }
    let out = conv2d(&x, &w, 1);
    // loop oracle over the interior, where the window never touches padding
    for i in 0..n - 1 {
        for j in 0..n - 1 {
            let want = (board[i * n + j] + board[i * n + j + 1] + board[(i + 1) * n + j] + board[(i + 1) * n + j + 1]) / 4.0;
            assert_eq!(want, 0.5);
            assert_eq!(out.at(&[0, 0, i, j]), 0.5);
        }
    }
}

#[test]
fn global_avg_pool_examples() {
    let gap = |x: Tensor<f64>| {
        eval1(|g| {
            let x = g.constant(x)?;
            g.global_avg_pool(x)
        })
    };
    let c = gap(Tensor::full(&[1, 2, 3, 4, 4], 2.5));
    assert_eq!(c.shape(), &[1, 2, 3, 1, 1]);
    assert!(c.data().iter().all(|&v| v == 2.5));
    assert_eq!(gap(t(&[1, 1, 1, 2, 2], &[1.0, 3.0, 5.0, 7.0])).data(), &[4.0]);
    let x = rand_t(&[2, 3, 2, 1, 1], 41);
    assert_eq!(gap(x.clone()), x);
}

fn upsample(x: &Tensor<f64>, h: usize, w: usize) -> Tensor<f64> {
    eval1(|g| {
        let xv = g.constant(x.clone())?;
        g.upsample_bilinear(xv, h, w)
    })
}

#[test]
fn upsample_examples() {
    let x = rand_t(&[2, 3, 4, 5], 42);
    assert_eq!(upsample(&x, 4, 5), x);
    let c = upsample(&Tensor::full(&[1, 2, 3], 0.3), 7, 11);
    assert!(c.data().iter().all(|&v| v == 0.3));
    assert_eq!(upsample(&t(&[1, 2], &[0.0, 2.0]), 1, 4).data(), &[0.0, 0.5, 1.5, 2.0]);
}

#[test]
fn upsample_matches_half_pixel_formula() {
    let x = rand_t(&[3, 5], 43);
    let out = upsample(&x, 7, 12);
    let coord = |o: usize, n_in: usize, n_out: usize| {
        let s = ((o as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).clamp(0.0, (n_in - 1) as f64);
        let i0 = s.floor() as usize;
        (i0, (i0 + 1).min(n_in - 1), s - i0 as f64)
    };
    for i in 0..7 {
        for j in 0..12 {
            let (y0, y1, fy) = coord(i, 3, 7);
            let (x0, x1, fx) = coord(j, 5, 12);
            let want = (1.0 - fy) * ((1.0 - fx) * x.at(&[y0, x0]) + fx * x.at(&[y0, x1]))
                + fy * ((1.0 - fx) * x.at(&[y1, x0]) + fx * x.at(&[y1, x1]));
            assert!((out.at(&[i, j]) - want).abs() < 1e-12);
        }
    }
}

#[test]
fn linear_and_mlp_examples() {
    let x = rand_t(&[3, 2], 44);
    let ident = eval1(|g| {
        let xv = g.constant(x.clone())?;
        let w = g.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]))?;
        let b = g.constant(Tensor::zeros(&[2]))?;
        g.linear(xv, w, Some(b))
    });
    assert_eq!(ident, x);
    let bias_only = eval1(|g| {
        let xv = g.constant(x.clone())?;
        let w = g.constant(Tensor::zeros(&[2, 2]))?;
        let b = g.constant(t(&[2], &[0.5, -1.5]))?;
        g.linear(xv, w, Some(b))
    });
    for r in 0..3 {
        assert_eq!(&bias_only.data()[r * 2..r * 2 + 2], &[0.5, -1.5]);
    }
    let w = rand_t(&[2, 2], 45);
    let b = rand_t(&[2], 46);
    let got = eval1(|g| {
        let xv = g.constant(x.clone())?;
        let wv = g.constant(w.clone())?;
        let bv = g.constant(b.clone())?;
        g.linear(xv, wv, Some(bv))
    });
    for r in 0..3 {
        for o in 0..2 {
            let want = b.data()[o] + (0..2).map(|i| x.at(&[r, i]) * w.at(&[o, i])).sum::<f64>();
            assert!((got.at(&[r, o]) - want).abs() < 1e-12);
        }
    }
    let w2 = rand_t(&[1, 2], 47);
    let deep = eval1(|g| {
        let xv = g.constant(x.clone())?;
        let l1 = (g.constant(w.clone())?, Some(g.constant(b.clone())?));
        let l2 = (g.constant(w2.clone())?, None);
        g.mlp(xv, &[l1, l2])
    });
    for r in 0..3 {
        let hidden: Vec<f64> = (0..2).map(|o| got.at(&[r, o]).max(0.0)).collect();
        let want = hidden[0] * w2.data()[0] + hidden[1] * w2.data()[1];
        assert!((deep.at(&[r, 0]) - want).abs() < 1e-12);
    }
}

#[test]
fn backward_product_rule() {
    let mut g = Graph::<f64>::new();
    let x = g.param(Tensor::scalar(2.0)).unwrap();
    let y = g.param(Tensor::scalar(3.0)).unwrap();
    let l = g.mul(x, y).unwrap();
    let grads = g.backward(l).unwrap();
    assert_eq!(grads.get(x).unwrap().item(), 3.0);
    assert_eq!(grads.get(y).unwrap().item(), 2.0);
}

#[test]
fn backward_sigmoid_at_zero() {
    let mut g = Graph::<f64>::new();
    let x = g.param(Tensor::scalar(0.0)).unwrap();
    let l = g.sigmoid(x).unwrap();
    let grads = g.backward(l).unwrap();
    // sigma'(0) = sigma(0)(1 - sigma(0))
    assert_eq!(grads.get(x).unwrap().item(), 0.25);
}

#[test]
fn backward_rejects_non_scalar_loss() {
    let mut g = Graph::<f64>::new();
    let x = g.param(Tensor::zeros(&[2])).unwrap();
    assert!(matches!(g.backward(x), Err(Error::NonScalarLoss(_))));
}

#[test]
fn fan_out_gradients_accumulate() {
    let mut g = Graph::<f64>::new();
    let x = g.param(t(&[2], &[1.5, -2.0])).unwrap();
    let a = g.mul(x, x).unwrap();
    let b = g.scale(x, 3.0).unwrap();
    let s = g.add(a, b).unwrap();
    let l = g.sum(s).unwrap();
    let grads = g.backward(l).unwrap();
    // d/dx (x^2 + 3x) = 2x + 3
    assert_eq!(grads.get(x).unwrap().data(), &[6.0, -1.0]);
}

#[test]
fn non_finite_outputs_are_errors() {
    let mut g = Graph::<f64>::new();
    let a = g.constant(t(&[1], &[1.0])).unwrap();
    let z = g.constant(t(&[1], &[0.0])).unwrap();
    assert!(matches!(g.div(a, z), Err(Error::NonFinite { op: "div", .. })));
}

struct SumLayerNorm;
impl Expr for SumLayerNorm {
    fn eval<T: Scalar>(&self, g: &mut Graph<T>, v: &[Var]) -> Result<Var> {
        let y = g.layer_norm(v[0], v[1], v[2], 1, 1e-5)?;
        g.sum(y)
    }
}

#[test]
fn layer_norm_sum_matches_finite_differences() {
    let inputs = [rand_t(&[2, 4, 3], 50), rand_t(&[4], 51), rand_t(&[4], 52)];
    let report = gradcheck::check::<f64, _>(&SumLayerNorm, &inputs, 1e-3, None).unwrap();
    assert!(report.max_rel_err() < 1e-3, "{report:?}");
}

#[test]
fn every_op_passes_gradient_check_f64() {
    for case in OpCase::ALL {
        let report = gradcheck::check::<f64, _>(&case, &case.inputs(1), 1e-4, None).unwrap();
        assert!(report.max_rel_err() < 1e-5, "{case:?}: {report:?}");
    }
}

#[test]
fn every_op_passes_gradient_check_f32() {
    for case in OpCase::ALL {
        let report = gradcheck::check::<f32, _>(&case, &case.inputs(2), 1e-4, None).unwrap();
        assert!(report.max_rel_err() < 1e-3, "{case:?}: {report:?}");
    }
}

#[test]
fn ops_are_deterministic() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let x = Tensor::<f32>::uniform(&[2, 4, 3, 6, 6], 1.0, &mut rng);
        let w = Tensor::<f32>::uniform(&[4, 4, 3, 3, 3], 1.0, &mut rng);
        let mut g = Graph::new();
        let xv = g.param(x).unwrap();
        let wv = g.param(w).unwrap();
        let y = g.conv3d(xv, wv, None, ConvSpec::DENSE).unwrap();
        let s = g.softmax(y).unwrap();
        let l = weighted_sum(&mut g, s, 3).unwrap();
        let grads = g.backward(l).unwrap();
        (g.value(s).clone(), grads.get(wv).unwrap().clone())
    };
    assert_eq!(run(), run());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_rows_sum_to_one(rows in 1usize..5, cols in 1usize..9, seed in 0u64..1000) {
        let x = rand_t(&[rows, cols], seed).map(|v| 20.0 * v);
        let y = eval1(|g| { let x = g.constant(x.cast::<f64>())?; g.softmax(x) });
        for r in y.data().chunks(cols) {
            prop_assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            prop_assert!(r.iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn upsample_preserves_constants(h in 1usize..6, w in 1usize..6, oh in 1usize..13, ow in 1usize..13, c in -5.0f64..5.0) {
        let y = upsample(&Tensor::full(&[2, h, w], c), oh, ow);
        prop_assert!(y.data().iter().all(|&v| v == c));
    }

    #[test]
    fn same_conv_preserves_extents(t in 1usize..4, h in 1usize..7, w in 1usize..7, kt in 0usize..2, kh in 0usize..2) {
        let x = Tensor::<f64>::ones(&[1, 2, t, h, w]);
        let wt = Tensor::<f64>::ones(&[3, 2, 2 * kt + 1, 2 * kh + 1, 3]);
        let y = conv(&x, &wt, None, ConvSpec::DENSE);
        prop_assert_eq!(y.shape(), &[1, 3, t, h, w]);
    }
}
