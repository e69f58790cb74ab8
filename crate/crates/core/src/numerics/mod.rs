//! Dense tensors and a reverse-mode gradient tape.

mod graph;
mod scalar;
mod tensor;

pub use graph::{ConvGeom, Gradients, Graph, Var};
pub use scalar::{DType, Scalar};
pub use tensor::Tensor;

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, data).unwrap()
    }

    fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
        Tensor::from_fn(shape, |_| rng.gen_range(-2.0..2.0))
    }

    /// Checks analytic gradients of `sum(f(inputs) ⊙ probe)` against central
    /// differences for every coordinate of every input.
    fn grad_check(
        inputs: &[Tensor<f64>],
        f: impl Fn(&mut Graph<f64>, &[Var]) -> Var,
    ) {
        let eval = |values: &[Tensor<f64>]| -> (f64, Option<Vec<Vec<f64>>>) {
            let mut g = Graph::new();
            let vars: Vec<Var> = values.iter().map(|v| g.leaf(v.clone())).collect();
            let out = f(&mut g, &vars);
            let shape = g.shape(out).to_vec();
            let probe = g.constant(Tensor::from_fn(&shape, |i| ((i * 7 + 3) % 11) as f64 / 5.0 - 1.0));
            let prod = g.mul(out, probe).unwrap();
            let loss = g.sum_all(prod).unwrap();
            let value = g.value(loss).data()[0];
            let grads = g.backward(loss).unwrap();
            let per_input = vars
                .iter()
                .map(|&v| grads.get(v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; g.value(v).numel()]))
                .collect();
            (value, Some(per_input))
        };
        let (_, analytic) = eval(inputs);
        let analytic = analytic.unwrap();
        let h = 1e-4;
        for (i, input) in inputs.iter().enumerate() {
            for j in 0..input.numel() {
                let mut plus = inputs.to_vec();
                plus[i].data_mut()[j] += h;
                let mut minus = inputs.to_vec();
                minus[i].data_mut()[j] -= h;
                let numeric = (eval(&plus).0 - eval(&minus).0) / (2.0 * h);
                let a = analytic[i][j];
                let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
                assert!(rel < 1e-4, "input {i} coord {j}: analytic {a} numeric {numeric}");
            }
        }
    }

    fn naive_conv(x: &Tensor<f64>, k: &Tensor<f64>, b: &[f64], stride: usize, pad: usize) -> Tensor<f64> {
        let [h, w, cin] = [x.shape()[0], x.shape()[1], x.shape()[2]];
        let [kh, kw, _, cout] = [k.shape()[0], k.shape()[1], k.shape()[2], k.shape()[3]];
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (w + 2 * pad - kw) / stride + 1;
        let mut out = Tensor::zeros(&[ho, wo, cout]);
        for oy in 0..ho {
            for ox in 0..wo {
                for co in 0..cout {
                    let mut s = b[co];
                    for ky in 0..kh {
                        for kx in 0..kw {
                            let iy = (oy * stride + ky) as isize - pad as isize;
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                continue;
                            }
                            for ci in 0..cin {
                                s += x.data()[(iy as usize * w + ix as usize) * cin + ci]
                                    * k.data()[((ky * kw + kx) * cin + ci) * cout + co];
                            }
                        }
                    }
                    out.data_mut()[(oy * wo + ox) * cout + co] = s;
                }
            }
        }
        out
    }

    #[test]
    fn matmul_identity_and_dot() {
        let mut g = Graph::new();
        let i = g.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let b = g.constant(t(&[2, 2], &[3.0, 4.0, 5.0, 6.0]));
        let y = g.matmul(i, b).unwrap();
        assert_eq!(g.value(y).data(), &[3.0, 4.0, 5.0, 6.0]);
        let r = g.constant(t(&[1, 2], &[1.0, 2.0]));
        let c = g.constant(t(&[2, 1], &[3.0, 4.0]));
        let y = g.matmul(r, c).unwrap();
        assert_eq!(g.value(y).data(), &[11.0]);
    }

    #[test]
    fn matmul_rejects_mismatched_inner_dims() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 3]));
        let err = g.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]"), "{err}");
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = random(&mut rng, &[3, 4]);
        let b = random(&mut rng, &[4, 2]);
        let mut g = Graph::new();
        let (va, vb) = (g.constant(a.clone()), g.constant(b.clone()));
        let y = g.matmul(va, vb).unwrap();
        for i in 0..3 {
            for j in 0..2 {
                let want: f64 = (0..4).map(|p| a.data()[i * 4 + p] * b.data()[p * 2 + j]).sum();
                assert!((g.value(y).data()[i * 2 + j] - want).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn identity_pointwise_conv_is_noop() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = random(&mut rng, &[4, 4, 1]);
        let mut g = Graph::new();
        let vx = g.constant(x.clone());
        let k = g.constant(t(&[1, 1, 1, 1], &[1.0]));
        let b = g.constant(t(&[1], &[0.0]));
        let y = g.conv2d(vx, k, b, 1, 0).unwrap();
        assert_eq!(g.value(y), &x);
    }

    #[test]
    fn box_blur_of_impulse() {
        let mut img = vec![0.0; 9];
        img[4] = 1.0;
        let mut g = Graph::new();
        let x = g.constant(t(&[3, 3, 1], &img));
        let k = g.constant(Tensor::full(&[3, 3, 1, 1], 1.0));
        let b = g.constant(t(&[1], &[0.0]));
        let y = g.conv2d(x, k, b, 1, 1).unwrap();
        assert_eq!(g.value(y).data(), &[1.0; 9]);

        // A corner impulse only reaches its 2x2 neighbourhood.
        let mut img = vec![0.0; 9];
        img[0] = 1.0;
        let x = g.constant(t(&[3, 3, 1], &img));
        let y = g.conv2d(x, k, b, 1, 1).unwrap();
        assert_eq!(g.value(y).data(), &[1.0, 1.0, 0.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn conv_matches_sliding_window() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for (stride, pad) in [(1, 1), (2, 1), (1, 0)] {
            let x = random(&mut rng, &[8, 8, 2]);
            let k = random(&mut rng, &[3, 3, 2, 3]);
            let b = random(&mut rng, &[3]);
            let want = naive_conv(&x, &k, b.data(), stride, pad);
            let mut g = Graph::new();
            let (vx, vk, vb) = (g.constant(x), g.constant(k), g.constant(b));
            let y = g.conv2d(vx, vk, vb, stride, pad).unwrap();
            assert_eq!(g.shape(y), want.shape());
            for (a, b) in g.value(y).data().iter().zip(want.data()) {
                assert!((a - b).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn conv_rejects_fractional_output() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::zeros(&[4, 4, 1]));
        let k = g.constant(Tensor::zeros(&[3, 3, 1, 1]));
        let b = g.constant(Tensor::zeros(&[1]));
        assert!(matches!(g.conv2d(x, k, b, 2, 0), Err(crate::Error::Config(_))));
    }

    #[test]
    fn softmax_cases() {
        let mut g = Graph::new();
        let x = g.constant(t(&[3], &[0.0, 0.0, 0.0]));
        let y = g.softmax(x, None).unwrap();
        for &p in g.value(y).data() {
            assert!((p - 1.0 / 3.0).abs() < 1e-15);
        }
        let x = g.constant(t(&[2], &[1000.0, 0.0]));
        let y = g.softmax(x, None).unwrap();
        assert!(g.value(y).is_finite());
        assert!((g.value(y).data()[0] - 1.0).abs() < 1e-12);

        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let v = random(&mut rng, &[5]);
        let x = g.constant(v.clone());
        let y = g.softmax(x, None).unwrap();
        let denom: f64 = v.data().iter().map(|x| x.exp()).sum();
        for (p, x) in g.value(y).data().iter().zip(v.data()) {
            assert!((p - x.exp() / denom).abs() < 1e-7);
        }
    }

    #[test]
    fn masked_softmax_puts_no_mass_on_masked_entries() {
        let mut g = Graph::new();
        let x = g.constant(t(&[2, 3], &[1.0, 5.0, 2.0, 0.5, 0.5, 9.0]));
        let mask = [true, false, true, true, true, false];
        let y = g.softmax(x, Some(&mask)).unwrap();
        let d = g.value(y).data();
        assert_eq!(d[1], 0.0);
        assert_eq!(d[5], 0.0);
        assert!((d[0] + d[2] - 1.0).abs() < 1e-12);
        assert!((d[3] - 0.5).abs() < 1e-12);

        let x = g.constant(t(&[1, 2], &[1.0, 2.0]));
        assert!(matches!(g.softmax(x, Some(&[false, false])), Err(crate::Error::Input(_))));
    }

    #[test]
    fn layer_norm_cases() {
        let mut g = Graph::new();
        let ones = g.constant(Tensor::full(&[4], 1.0));
        let zeros = g.constant(Tensor::zeros(&[4]));
        let x = g.constant(Tensor::full(&[1, 4], 3.5));
        let y = g.layer_norm(x, ones, zeros, 1e-5).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));

        let bias = g.constant(t(&[4], &[0.5, -1.0, 2.0, 0.0]));
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = g.constant(random(&mut rng, &[1, 4]));
        let y = g.layer_norm(x, zeros, bias, 1e-5).unwrap();
        assert_eq!(g.value(y).data(), &[0.5, -1.0, 2.0, 0.0]);

        let ones8 = g.constant(Tensor::full(&[8], 1.0));
        let zeros8 = g.constant(Tensor::zeros(&[8]));
        let x = g.constant(random(&mut rng, &[4, 8]));
        let y = g.layer_norm(x, ones8, zeros8, 1e-5).unwrap();
        for row in g.value(y).data().chunks(8) {
            let mean = row.iter().sum::<f64>() / 8.0;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 8.0;
            assert!(mean.abs() < 1e-6);
            // eps shrinks the variance slightly below one.
            assert!((var - 1.0).abs() < 1e-4, "var {var}");
        }
    }

    #[test]
    fn pointwise_and_resampling() {
        let mut g = Graph::new();
        let x = g.constant(t(&[2], &[-1.0, 2.0]));
        let y = g.relu(x).unwrap();
        assert_eq!(g.value(y).data(), &[0.0, 2.0]);
        let y = g.sigmoid(x).unwrap();
        assert!((g.value(y).data()[0] - 1.0 / (1.0 + 1f64.exp())).abs() < 1e-15);

        let c = g.constant(Tensor::full(&[4, 4, 2], 0.7));
        let p = g.avgpool2x2(c).unwrap();
        assert_eq!(g.shape(p), &[2, 2, 2]);
        assert!(g.value(p).data().iter().all(|&v| (v - 0.7).abs() < 1e-15));

        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let m = random(&mut rng, &[3, 5, 2]);
        let x = g.constant(m.clone());
        let up = g.upsample2x(x).unwrap();
        let back = g.avgpool2x2(up).unwrap();
        assert_eq!(g.value(back), &m);

        let odd = g.constant(Tensor::zeros(&[3, 4, 1]));
        assert!(g.avgpool2x2(odd).is_err());
    }

    #[test]
    fn backward_contracts() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::full(&[2], 1.0));
        assert!(matches!(g.backward(x), Err(crate::Error::Contract(_))));

        let mut g = Graph::<f64>::new();
        let w = g.leaf(t(&[1, 2], &[0.3, -0.2]));
        let unused = g.leaf(t(&[2], &[1.0, 2.0]));
        let x = g.constant(t(&[2, 1], &[1.5, -2.0]));
        let y = g.matmul(w, x).unwrap();
        let loss = g.sum_all(y).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(w).unwrap(), &[1.5, -2.0]);
        assert!(grads.get(unused).is_none());
        assert!(matches!(g.backward(loss), Err(crate::Error::Contract(_))));
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = random(&mut rng, &[3, 4]);
        let b = random(&mut rng, &[4, 2]);
        let bt = random(&mut rng, &[2, 4]);
        grad_check(&[a.clone(), b], |g, v| g.matmul(v[0], v[1]).unwrap());
        grad_check(&[a.clone(), bt], |g, v| g.matmul_nt(v[0], v[1]).unwrap());
        grad_check(&[a.clone()], |g, v| g.transpose(v[0]).unwrap());
        let c = random(&mut rng, &[3, 4]);
        let row = random(&mut rng, &[4]);
        grad_check(&[a.clone(), c.clone()], |g, v| g.mul(v[0], v[1]).unwrap());
        grad_check(&[a.clone(), c.clone()], |g, v| g.add(v[0], v[1]).unwrap());
        grad_check(&[a.clone(), row.clone()], |g, v| g.add_bias(v[0], v[1]).unwrap());
        grad_check(&[a.clone(), row.clone()], |g, v| g.mul_bcast(v[0], v[1]).unwrap());
        grad_check(&[a.clone()], |g, v| g.scale(v[0], 1.7).unwrap());
        grad_check(&[a.clone()], |g, v| g.sigmoid(v[0]).unwrap());
        grad_check(&[a.clone()], |g, v| g.softmax(v[0], None).unwrap());
        let mask: Vec<bool> = (0..12).map(|i| i % 3 != 1).collect();
        grad_check(&[a.clone()], move |g, v| g.softmax(v[0], Some(&mask)).unwrap());
        let gamma = random(&mut rng, &[4]);
        grad_check(&[a.clone(), gamma, row.clone()], |g, v| g.layer_norm(v[0], v[1], v[2], 1e-5).unwrap());
        grad_check(&[a.clone()], |g, v| g.slice_cols(v[0], 1, 3).unwrap());
        grad_check(&[a.clone()], |g, v| g.slice_rows(v[0], 1, 3).unwrap());
        grad_check(&[a.clone()], |g, v| g.mean_rows(v[0]).unwrap());
        grad_check(&[a.clone()], |g, v| g.gather_rows(v[0], &[2, 0, 2]).unwrap());
        grad_check(&[a.clone(), c.clone()], |g, v| g.concat_last(&[v[0], v[1], v[0]]).unwrap());
        grad_check(&[a.clone(), c.clone()], |g, v| g.concat_rows(&[v[1], v[0]]).unwrap());
        grad_check(&[a.clone()], |g, v| g.reshape(v[0], &[2, 6]).unwrap());

        let z: Vec<f64> = (0..12).map(|i| (i % 2) as f64).collect();
        grad_check(&[a.clone()], move |g, v| g.bce_with_logits(v[0], &z).unwrap());
        let p = Tensor::from_fn(&[3, 4], |_| rng.gen_range(0.1..0.9));
        let z: Vec<f64> = (0..12).map(|i| (i % 3 == 0) as u8 as f64).collect();
        grad_check(&[p], move |g, v| g.bce_with_probs(v[0], &z, 1e-6).unwrap());

        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = random(&mut rng, &[6, 4, 2]);
        let k = random(&mut rng, &[3, 3, 2, 3]);
        let b = random(&mut rng, &[3]);
        grad_check(&[x.clone(), k, b], |g, v| g.conv2d(v[0], v[1], v[2], 2, 1).unwrap());
        grad_check(&[x.clone()], |g, v| g.upsample2x(v[0]).unwrap());
        grad_check(&[x], |g, v| g.avgpool2x2(v[0]).unwrap());
    }

    #[test]
    fn relu_gradient_away_from_kink() {
        let x = t(&[4], &[-1.5, -0.3, 0.4, 1.9]);
        grad_check(&[x], |g, v| g.relu(v[0]).unwrap());
    }
}
