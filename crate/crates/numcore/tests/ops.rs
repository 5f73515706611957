use numcore::nn::{gru_cell_step, GruWeights};
use numcore::{bilinear_resize, Graph, RngStream, Tensor};
use proptest::prelude::*;

fn t64(shape: &[usize], data: &[f64]) -> Tensor<f64> {
    Tensor::new(shape, data.to_vec()).unwrap()
}

fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = RngStream::new(seed);
    Tensor::from_fn(shape, |_| rng.uniform_range(-1.0, 1.0))
}

/// Direct sliding-window convolution, no im2col.
fn conv_oracle(x: &Tensor<f64>, w: &Tensor<f64>, b: &[f64], stride: usize, pad: usize) -> Vec<f64> {
    let [n, c, h, wd] = [x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]];
    let [co, _, kh, kw] = [w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]];
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (wd + 2 * pad - kw) / stride + 1;
    let mut out = Vec::new();
    for bn in 0..n {
        for o in 0..co {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut s = b[o];
                    for ci in 0..c {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                let xv = x.data()[((bn * c + ci) * h + iy as usize) * wd + ix as usize];
                                let wv = w.data()[((o * c + ci) * kh + ky) * kw + kx];
                                s += xv * wv;
                            }
                        }
                    }
                    out.push(s);
                }
            }
        }
    }
    out
}

#[test]
fn conv_identity_kernel_copies_input() {
    let x = random(&[2, 3, 4, 5], 1);
    let mut w = Tensor::<f64>::zeros(&[3, 3, 1, 1]);
    for c in 0..3 {
        w.data_mut()[c * 3 + c] = 1.0;
    }
    let mut g = Graph::new();
    let (xv, wv, bv) = (g.constant(x.clone()), g.constant(w), g.constant(Tensor::zeros(&[3])));
    let y = g.conv2d(xv, wv, Some(bv), 1, 0).unwrap();
    assert_eq!(g.value(y), &x);
}

#[test]
fn conv_sliding_window_hand_case() {
    let x = t64(&[1, 1, 3, 3], &[1., 2., 3., 4., 5., 6., 7., 8., 9.]);
    let w = Tensor::<f64>::ones(&[1, 1, 2, 2]);
    let want = conv_oracle(&x, &w, &[0.0], 1, 0);
    assert_eq!(want, vec![12., 16., 24., 28.]);
    let mut g = Graph::new();
    let (xv, wv) = (g.constant(x), g.constant(w));
    let y = g.conv2d(xv, wv, None, 1, 0).unwrap();
    assert_eq!(g.shape(y), &[1, 1, 2, 2]);
    assert_eq!(g.value(y).data(), want.as_slice());
}

#[test]
fn conv_zero_input_zero_bias() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::<f64>::zeros(&[1, 2, 4, 4]));
    let w = g.constant(random(&[3, 2, 3, 3], 5));
    let b = g.constant(Tensor::zeros(&[3]));
    let y = g.conv2d(x, w, Some(b), 2, 1).unwrap();
    assert_eq!(g.shape(y), &[1, 3, 2, 2]);
    assert!(g.value(y).data().iter().all(|&v| v == 0.0));
}

#[test]
fn conv_matches_direct_oracle_on_random_geometries() {
    for seed in 0..10u64 {
        let stride = 1 + (seed % 2) as usize;
        let pad = (seed % 3) as usize / 2;
        let x = random(&[2, 3, 6, 5], seed);
        let w = random(&[4, 3, 3, 3], seed + 100);
        let b: Vec<f64> = random(&[4], seed + 200).into_data();
        let want = conv_oracle(&x, &w, &b, stride, pad);
        let mut g = Graph::new();
        let (xv, wv, bv) = (g.constant(x), g.constant(w), g.constant(t64(&[4], &b)));
        let y = g.conv2d(xv, wv, Some(bv), stride, pad).unwrap();
        for (a, e) in g.value(y).data().iter().zip(&want) {
            assert!((a - e).abs() < 1e-12);
        }
    }
}

#[test]
fn conv_shape_mismatch_names_axes() {
    let mut g = Graph::<f32>::new();
    let x = g.constant(Tensor::zeros(&[1, 3, 4, 4]));
    let w = g.constant(Tensor::zeros(&[2, 2, 3, 3]));
    let err = g.conv2d(x, w, None, 1, 0).unwrap_err();
    assert!(err.to_string().contains("channels"), "{err}");
}

#[test]
fn batchnorm_train_matches_direct_formula() {
    let x = random(&[2, 1, 2, 2], 11);
    let (scale, shift, eps) = (1.3, -0.4, 1e-5);
    let n = x.numel() as f64;
    let mu = x.data().iter().sum::<f64>() / n;
    let var = x.data().iter().map(|v| (v - mu).powi(2)).sum::<f64>() / n;
    let want: Vec<f64> = x.data().iter().map(|v| (v - mu) / (var + eps).sqrt() * scale + shift).collect();

    let mut g = Graph::new();
    let xv = g.constant(x);
    let sc = g.constant(t64(&[1], &[scale]));
    let sh = g.constant(t64(&[1], &[shift]));
    let (y, stats) = g.batch_norm_train(xv, sc, sh, eps).unwrap();
    assert_eq!(stats.count, 8);
    for (a, e) in g.value(y).data().iter().zip(&want) {
        assert!((a - e).abs() < 1e-6);
    }
}

#[test]
fn batchnorm_eval_identity_stats() {
    let x = random(&[3, 2, 2, 2], 12);
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let sc = g.constant(Tensor::ones(&[2]));
    let sh = g.constant(Tensor::zeros(&[2]));
    let eps = 1e-5;
    let y = g.batch_norm_eval(xv, sc, sh, &[0.0, 0.0], &[1.0, 1.0], eps).unwrap();
    let k = 1.0 / (1.0f64 + eps).sqrt();
    for (a, e) in g.value(y).data().iter().zip(x.data()) {
        assert!((a - e * k).abs() < 1e-15);
        assert!((a - e).abs() < eps);
    }
}

#[test]
fn batchnorm_single_sample_is_guarded_by_eps() {
    let mut g = Graph::<f32>::new();
    let x = g.constant(Tensor::full(&[1, 2], 3.0));
    let sc = g.constant(Tensor::ones(&[2]));
    let sh = g.constant(Tensor::full(&[2], 0.5));
    let (y, _) = g.batch_norm_train(x, sc, sh, 1e-5).unwrap();
    assert_eq!(g.value(y).data(), &[0.5, 0.5]);
}

#[test]
fn gmp_examples() {
    let mut g = Graph::<f64>::new();
    let c = g.constant(Tensor::full(&[1, 3, 2, 2], 0.7));
    let p = g.global_max_pool(c).unwrap();
    assert_eq!(g.value(p).data(), &[0.7; 3]);
    let m = g.constant(t64(&[1, 1, 2, 2], &[1., 5., 3., 2.]));
    let p = g.global_max_pool(m).unwrap();
    assert_eq!(g.value(p).data(), &[5.0]);
    // post-ReLU map zeroed by a mask
    let x = g.constant(random(&[1, 2, 3, 3], 3));
    let r = g.relu(x);
    let masked = g.mask_channels(r, &Tensor::zeros(&[1, 3, 3])).unwrap();
    let p = g.global_max_pool(masked).unwrap();
    assert_eq!(g.value(p).data(), &[0.0, 0.0]);
}

/// Independent scalar bilinear sampler (half-pixel centers, edge clamp).
fn bilinear_oracle(src: &[f64], h: usize, w: usize, oh: usize, ow: usize) -> Vec<f64> {
    let coord = |o: usize, n_in: usize, n_out: usize| -> f64 {
        let s = (o as f64 + 0.5) * (n_in as f64 / n_out as f64) - 0.5;
        s.max(0.0).min((n_in - 1) as f64)
    };
    let mut out = Vec::new();
    for oy in 0..oh {
        for ox in 0..ow {
            let (sy, sx) = (coord(oy, h, oh), coord(ox, w, ow));
            let (y0, x0) = (sy.floor() as usize, sx.floor() as usize);
            let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
            let (fy, fx) = (sy - y0 as f64, sx - x0 as f64);
            let p = |y: usize, x: usize| src[y * w + x];
            out.push(
                p(y0, x0) * (1.0 - fy) * (1.0 - fx)
                    + p(y0, x1) * (1.0 - fy) * fx
                    + p(y1, x0) * fy * (1.0 - fx)
                    + p(y1, x1) * fy * fx,
            );
        }
    }
    out
}

#[test]
fn bilinear_examples() {
    let x = random(&[2, 3, 5], 4);
    assert_eq!(bilinear_resize(&x, 3, 5).unwrap(), x);

    let c = Tensor::<f64>::full(&[4, 4], 0.3);
    for (h, w) in [(1, 1), (7, 3), (9, 12)] {
        let r = bilinear_resize(&c, h, w).unwrap();
        assert!(r.data().iter().all(|&v| (v - 0.3).abs() < 1e-15));
    }

    let x = t64(&[2, 2], &[0., 1., 0., 1.]);
    let r = bilinear_resize(&x, 2, 4).unwrap();
    let want = bilinear_oracle(x.data(), 2, 2, 2, 4);
    assert_eq!(r.data(), want.as_slice());
}

#[test]
fn bilinear_matches_oracle_on_random_sizes() {
    for seed in 0..20u64 {
        let mut rng = RngStream::new(seed);
        let (h, w) = (1 + rng.below(8), 1 + rng.below(8));
        let (oh, ow) = (1 + rng.below(10), 1 + rng.below(10));
        let x = random(&[h, w], seed);
        let r = bilinear_resize(&x, oh, ow).unwrap();
        let want = bilinear_oracle(x.data(), h, w, oh, ow);
        for (a, e) in r.data().iter().zip(&want) {
            assert!((a - e).abs() < 1e-12, "{h}x{w} -> {oh}x{ow}");
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[test]
fn gru_step_matches_scalar_gate_equations() {
    let (i_dim, h_dim) = (2, 3);
    let mut rng = RngStream::new(77);
    let mut draw = |shape: &[usize]| Tensor::<f64>::from_fn(shape, |_| rng.uniform_range(-1.0, 1.0));
    let x = draw(&[1, i_dim]);
    let h = draw(&[1, h_dim]);
    let ws: Vec<Tensor<f64>> = (0..3)
        .flat_map(|_| [draw(&[h_dim, i_dim]), draw(&[h_dim, h_dim]), draw(&[h_dim])])
        .collect();

    // scalar oracle
    let mv = |m: &Tensor<f64>, v: &[f64]| -> Vec<f64> {
        let cols = v.len();
        (0..m.shape()[0])
            .map(|r| (0..cols).map(|c| m.data()[r * cols + c] * v[c]).sum())
            .collect()
    };
    let (xd, hd) = (x.data(), h.data());
    let gate = |k: usize, hh: &[f64]| -> Vec<f64> {
        let a = mv(&ws[3 * k], xd);
        let b = mv(&ws[3 * k + 1], hh);
        (0..h_dim).map(|j| a[j] + b[j] + ws[3 * k + 2].data()[j]).collect()
    };
    let z: Vec<f64> = gate(0, hd).into_iter().map(sigmoid).collect();
    let r: Vec<f64> = gate(1, hd).into_iter().map(sigmoid).collect();
    let rh: Vec<f64> = (0..h_dim).map(|j| r[j] * hd[j]).collect();
    let cand: Vec<f64> = gate(2, &rh).into_iter().map(f64::tanh).collect();
    let want: Vec<f64> = (0..h_dim).map(|j| (1.0 - z[j]) * hd[j] + z[j] * cand[j]).collect();

    let mut g = Graph::new();
    let xv = g.constant(x);
    let hv = g.constant(h);
    let v: Vec<_> = ws.into_iter().map(|t| g.constant(t)).collect();
    let w = GruWeights {
        w_z: v[0],
        u_z: v[1],
        b_z: v[2],
        w_r: v[3],
        u_r: v[4],
        b_r: v[5],
        w_h: v[6],
        u_h: v[7],
        b_h: v[8],
    };
    let out = gru_cell_step(&mut g, xv, hv, &w).unwrap();
    for (a, e) in g.value(out).data().iter().zip(&want) {
        assert!((a - e).abs() < 1e-6);
    }
}

#[test]
fn cross_entropy_examples() {
    let mut g = Graph::<f64>::new();
    let u = g.constant(Tensor::zeros(&[1, 4]));
    let l = g.softmax_cross_entropy(u, &[2]).unwrap();
    assert!((g.value(l).item() - 4f64.ln()).abs() < 1e-12);
    assert!((g.value(l).item() - 1.386294).abs() < 1e-6);

    let s = g.constant(t64(&[1, 3], &[10., 0., 0.]));
    let l = g.softmax_cross_entropy(s, &[0]).unwrap();
    // scalar log-sum-exp oracle
    let want = (10f64.exp() + 2.0).ln() - 10.0;
    assert!((g.value(l).item() - want).abs() < 1e-15);
    assert!((g.value(l).item() - 9.079e-5).abs() < 1e-8);

    let row = [0.3, -1.2, 2.0];
    let one = g.constant(t64(&[1, 3], &row));
    let two = g.constant(t64(&[2, 3], &[row, row].concat()));
    let l1 = g.softmax_cross_entropy(one, &[1]).unwrap();
    let l2 = g.softmax_cross_entropy(two, &[1, 1]).unwrap();
    assert!((g.value(l1).item() - g.value(l2).item()).abs() < 1e-15);
}

#[test]
fn forward_ops_are_pure() {
    let run = || {
        let mut g = Graph::<f32>::new();
        let mut rng = RngStream::new(5);
        let x = g.constant(Tensor::from_fn(&[2, 3, 6, 4], |_| rng.uniform() as f32));
        let w = g.constant(Tensor::from_fn(&[4, 3, 3, 3], |_| rng.normal() as f32));
        let y = g.conv2d(x, w, None, 1, 1).unwrap();
        let sc = g.constant(Tensor::ones(&[4]));
        let sh = g.constant(Tensor::zeros(&[4]));
        let (y, _) = g.batch_norm_train(y, sc, sh, 1e-5).unwrap();
        let y = g.relu(y);
        let p = g.global_max_pool(y).unwrap();
        g.value(p).clone()
    };
    let (a, b) = (run(), run());
    assert_eq!(
        a.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
        b.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
    );
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn gmp_gradient_is_one_hot_per_channel(n in 1usize..4, c in 1usize..5, h in 1usize..5, w in 1usize..5, seed in any::<u64>()) {
        let mut g = Graph::<f64>::new();
        let x = g.input(random(&[n, c, h, w], seed));
        let p = g.global_max_pool(x).unwrap();
        let s = g.sum(p);
        let grads = g.backward(s).unwrap();
        let gx = grads.get(x).unwrap();
        let total: f64 = gx.iter().map(|v| v.abs()).sum();
        prop_assert_eq!(total, (n * c) as f64);
        prop_assert!(gx.iter().all(|&v| v == 0.0 || v == 1.0));
    }

    #[test]
    fn batchnorm_train_output_has_shift_mean_and_scale_std(
        batch in 8usize..20, ch in 1usize..4, seed in any::<u64>(),
        scale in 0.2f64..3.0, shift in -2.0f64..2.0, offset in -5.0f64..5.0, spread in 0.5f64..4.0,
    ) {
        let mut rng = RngStream::new(seed);
        let x = Tensor::from_fn(&[batch, ch, 2, 2], |_| offset + spread * rng.normal());
        let mut g = Graph::<f64>::new();
        let xv = g.constant(x);
        let sc = g.constant(Tensor::full(&[ch], scale));
        let sh = g.constant(Tensor::full(&[ch], shift));
        let (y, _) = g.batch_norm_train(xv, sc, sh, 1e-5).unwrap();
        let y = g.value(y);
        for c in 0..ch {
            let vals: Vec<f64> = (0..batch)
                .flat_map(|b| y.data()[(b * ch + c) * 4..][..4].to_vec())
                .collect();
            let m = vals.iter().sum::<f64>() / vals.len() as f64;
            let sd = (vals.iter().map(|v| (v - m).powi(2)).sum::<f64>() / vals.len() as f64).sqrt();
            prop_assert!((m - shift).abs() < 1e-4);
            prop_assert!((sd - scale).abs() < 1e-3);
        }
    }
}
