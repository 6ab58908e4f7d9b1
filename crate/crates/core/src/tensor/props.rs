use proptest::prelude::*;

use super::*;

fn tensor(dims: &[usize], seed: u64) -> Tensor<f64> {
    let mut s = seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) | 1;
    Tensor::from_fn(dims, |_| {
        s ^= s << 13;
        s ^= s >> 7;
        s ^= s << 17;
        (s >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0
    })
}

fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol * (1.0 + x.abs().max(y.abs())))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn delta_kernel_conv_is_identity(c in 1usize..4, h in 1usize..8, w in 1usize..8, seed in any::<u64>()) {
        let x = tensor(&[c, h, w], seed);
        let mut k = Tensor::zeros(&[c, c, 3, 3]);
        for i in 0..c {
            k.data_mut()[(i * c + i) * 9 + 4] = 1.0;
        }
        let y = ops::conv2d(&x, &k, &Tensor::zeros(&[c]), 1, 1).unwrap();
        prop_assert_eq!(y.data(), x.data());
    }

    #[test]
    fn conv_is_linear_in_its_input(c in 1usize..3, o in 1usize..4, h in 2usize..7, a in -2.0f64..2.0, seed in any::<u64>()) {
        let (x1, x2) = (tensor(&[c, h, h], seed), tensor(&[c, h, h], seed ^ 1));
        let k = tensor(&[o, c, 3, 3], seed ^ 2);
        let zero = Tensor::zeros(&[o]);
        let mixed = Tensor::from_fn(&[c, h, h], |i| a * x1.data()[i] + x2.data()[i]);
        let lhs = ops::conv2d(&mixed, &k, &zero, 1, 1).unwrap();
        let (y1, y2) = (ops::conv2d(&x1, &k, &zero, 1, 1).unwrap(), ops::conv2d(&x2, &k, &zero, 1, 1).unwrap());
        let rhs: Vec<f64> = y1.data().iter().zip(y2.data()).map(|(p, q)| a * p + q).collect();
        prop_assert!(close(lhs.data(), &rhs, 1e-12));
    }

    #[test]
    fn gap_is_the_plane_mean_and_linear(c in 1usize..5, h in 1usize..9, w in 1usize..9, a in -3.0f64..3.0, seed in any::<u64>()) {
        let x = tensor(&[c, h, w], seed);
        let y = ops::gap(&x).unwrap();
        for i in 0..c {
            let mean = x.data()[i * h * w..(i + 1) * h * w].iter().sum::<f64>() / (h * w) as f64;
            prop_assert!((y.data()[i] - mean).abs() < 1e-12);
        }
        let scaled = ops::gap(&x.map(|v| a * v)).unwrap();
        let expect: Vec<f64> = y.data().iter().map(|v| a * v).collect();
        prop_assert!(close(scaled.data(), &expect, 1e-12));
    }

    #[test]
    fn group_linear_blocks_are_independent(g in 1usize..6, d in 1usize..6, hit in 0usize..36, seed in any::<u64>()) {
        let x = tensor(&[g * d], seed);
        let w = tensor(&[g, d], seed ^ 3);
        let base = ops::group_linear(&x, &w, g).unwrap();
        let mut poked = x.clone();
        let at = hit % (g * d);
        poked.data_mut()[at] += 1.0;
        let after = ops::group_linear(&poked, &w, g).unwrap();
        for j in 0..g {
            if j == at / d {
                prop_assert!((after.data()[j] - base.data()[j] - w.data()[at]).abs() < 1e-12);
            } else {
                prop_assert_eq!(after.data()[j], base.data()[j]);
            }
        }
    }

    #[test]
    fn upsampled_constant_stays_constant(h in 1usize..6, th in 6usize..20, v in -5.0f64..5.0) {
        let x = Tensor::full(&[2, h, h], v);
        let y = ops::bilinear_upsample(&x, (th, th + 1)).unwrap();
        prop_assert!(y.data().iter().all(|&u| (u - v).abs() < 1e-12));
    }

    #[test]
    fn plain_sgd_is_vanilla_descent(n in 1usize..20, lr in 1e-4f64..1.0, steps in 1usize..5, seed in any::<u64>()) {
        let mut p = ParamSet::new();
        p.push("w", tensor(&[n], seed)).unwrap();
        let mut opt = SgdState::new(lr, 0.0, 0.0).unwrap();
        let mut expect = p.get("w").unwrap().data().to_vec();
        for s in 0..steps {
            let g = tensor(&[n], seed ^ (s as u64 + 7));
            for (e, gi) in expect.iter_mut().zip(g.data()) {
                *e -= lr * gi;
            }
            p.get_mut("w").unwrap().set_grad(g.into_data()).unwrap();
            opt.step(&mut p).unwrap();
        }
        let got = p.get("w").unwrap().data();
        prop_assert!(got.iter().zip(&expect).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn conv_pool_gap_stack_gradients(c in 1usize..3, h in 4usize..7, stride in 1usize..3, seed in any::<u64>()) {
        let inputs = [tensor(&[2, c, h, h], seed), tensor(&[3, c, 3, 3], seed ^ 5), tensor(&[3], seed ^ 6)];
        let opts = GradCheckOptions { seed, ..Default::default() };
        let r = grad_check(&inputs, &opts, |g, v| {
            let a = g.conv2d(v[0], v[1], v[2], stride, 1)?;
            let a = g.relu(a);
            let a = g.maxpool2d(a, 2, 2)?;
            let z = g.gap(a)?;
            g.sigmoid_bce(z, &[1.0, 0.0, 1.0, 1.0, 0.0, 0.0])
        }).unwrap();
        prop_assert!(r.max_rel_err < 1e-5, "{:?}", r);
    }

    #[test]
    fn group_linear_and_hint_gradients(g in 1usize..4, d in 1usize..5, squared in any::<bool>(), seed in any::<u64>()) {
        let inputs = [tensor(&[2, g * d], seed), tensor(&[g, d], seed ^ 8)];
        let teacher = tensor(&[2, g], seed ^ 9);
        let opts = GradCheckOptions { seed, ..Default::default() };
        let r = grad_check(&inputs, &opts, |gr, v| {
            let z = gr.group_linear(v[0], v[1])?;
            let t = gr.constant(teacher.clone());
            gr.hint_loss(t, z, squared)
        }).unwrap();
        prop_assert!(r.max_rel_err < 1e-5, "{:?}", r);
    }
}

#[test]
fn forward_is_bit_deterministic_in_f32() {
    let x: Tensor<f32> = tensor(&[3, 12, 12], 11).cast();
    let k: Tensor<f32> = tensor(&[5, 3, 3, 3], 12).cast();
    let b: Tensor<f32> = tensor(&[5], 13).cast();
    let runs: Vec<Vec<u32>> = (0..3)
        .map(|_| {
            let y = ops::conv2d(&x, &k, &b, 1, 1).unwrap();
            ops::maxpool2d(&y, 2, 2).unwrap().data().iter().map(|v| v.to_bits()).collect()
        })
        .collect();
    assert_eq!(runs[0], runs[1]);
    assert_eq!(runs[1], runs[2]);
}
