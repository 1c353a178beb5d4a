//! Finite-difference verification of every operator's backward pass, plus
//! the graph-level contracts (purity, consumption, subgraph independence).

use ccm_core::network::{self, UNetConfig};
use ccm_core::tensor::{grad_check, Graph, Op, Padding, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const TOL: f64 = 1e-4;
const STEP: f64 = 1e-5;

fn randn(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::<f64>::randn(shape, rng)
}

/// Scalar readout with distinct per-coordinate weights so flat directions
/// cannot hide sign errors.
fn weighted_sum(
    g: &mut Graph<f64>,
    out: &Tensor<f64>,
    seed: u64,
) -> ccm_core::Result<Tensor<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = randn(out.shape(), &mut rng);
    let wc = g.constant(&w);
    let prod = g.mul(out, &wc)?;
    g.sum(&prod)
}

#[test]
fn conv2d_same_gradients() {
    for seed in 0..10u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let cin = rng.gen_range(1..4usize);
        let cout = rng.gen_range(1..4usize);
        let hw = rng.gen_range(3..7usize);
        let x = randn(&[cin, hw, hw], &mut rng);
        let w = randn(&[cout, cin, 3, 3], &mut rng);
        let b = randn(&[cout], &mut rng);

        let err_x = grad_check(
            |g, leaf| {
                let wc = g.constant(&w);
                let bc = g.constant(&b);
                let y = g.conv2d(leaf, &wc, Some(&bc), Padding::Same)?;
                weighted_sum(g, &y, seed)
            },
            &x,
            STEP,
        )
        .unwrap();
        assert!(err_x < TOL, "seed {seed}: conv2d dx error {err_x}");

        let err_w = grad_check(
            |g, leaf| {
                let xc = g.constant(&x);
                let bc = g.constant(&b);
                let y = g.conv2d(&xc, leaf, Some(&bc), Padding::Same)?;
                weighted_sum(g, &y, seed)
            },
            &w,
            STEP,
        )
        .unwrap();
        assert!(err_w < TOL, "seed {seed}: conv2d dw error {err_w}");

        let err_b = grad_check(
            |g, leaf| {
                let xc = g.constant(&x);
                let wc = g.constant(&w);
                let y = g.conv2d(&xc, &wc, Some(leaf), Padding::Same)?;
                weighted_sum(g, &y, seed)
            },
            &b,
            STEP,
        )
        .unwrap();
        assert!(err_b < TOL, "seed {seed}: conv2d db error {err_b}");
    }
}

#[test]
fn conv2d_valid_gradients() {
    for seed in 0..10u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(200 + seed);
        let cin = rng.gen_range(1..3usize);
        let cout = rng.gen_range(1..3usize);
        let k = if seed % 2 == 0 { 2 } else { 3 };
        let hw = rng.gen_range(k + 1..8usize);
        let x = randn(&[cin, hw, hw], &mut rng);
        let w = randn(&[cout, cin, k, k], &mut rng);

        let err_x = grad_check(
            |g, leaf| {
                let wc = g.constant(&w);
                let y = g.conv2d(leaf, &wc, None, Padding::Valid)?;
                weighted_sum(g, &y, seed)
            },
            &x,
            STEP,
        )
        .unwrap();
        assert!(err_x < TOL, "seed {seed}: valid conv dx error {err_x}");

        let err_w = grad_check(
            |g, leaf| {
                let xc = g.constant(&x);
                let y = g.conv2d(&xc, leaf, None, Padding::Valid)?;
                weighted_sum(g, &y, seed)
            },
            &w,
            STEP,
        )
        .unwrap();
        assert!(err_w < TOL, "seed {seed}: valid conv dw error {err_w}");
    }
}

#[test]
fn linear_gradients() {
    for seed in 0..10u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(300 + seed);
        let (inp, out) = (rng.gen_range(1..7usize), rng.gen_range(1..7usize));
        let x = randn(&[inp], &mut rng);
        let w = randn(&[out, inp], &mut rng);
        let b = randn(&[out], &mut rng);
        for role in 0..3 {
            let target = [&x, &w, &b][role].clone();
            let err = grad_check(
                |g, leaf| {
                    let xc = g.constant(&x);
                    let wc = g.constant(&w);
                    let bc = g.constant(&b);
                    let (xi, wi, bi) = match role {
                        0 => (leaf, &wc, &bc),
                        1 => (&xc, leaf, &bc),
                        _ => (&xc, &wc, leaf),
                    };
                    let y = g.linear(xi, wi, Some(bi))?;
                    weighted_sum(g, &y, seed)
                },
                &target,
                STEP,
            )
            .unwrap();
            assert!(err < TOL, "seed {seed} role {role}: linear error {err}");
        }
    }
}

#[test]
fn elementwise_and_shape_op_gradients() {
    for seed in 0..10u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(400 + seed);
        let c = rng.gen_range(1..4usize);
        let hw = 2 * rng.gen_range(1..4usize);
        let shape = [c, hw, hw];
        let a = randn(&shape, &mut rng);
        let b = randn(&shape, &mut rng);
        let bias = randn(&[c], &mut rng);

        // add / sub / mul, both sides.
        for (op_name, op) in [("add", Op::Add), ("sub", Op::Sub), ("mul", Op::Mul)] {
            for side in 0..2 {
                let target = if side == 0 { a.clone() } else { b.clone() };
                let op = op.clone();
                let err = grad_check(
                    |g, leaf| {
                        let ac = g.constant(&a);
                        let bc = g.constant(&b);
                        let y = if side == 0 {
                            g.apply(op.clone(), &[leaf, &bc])?
                        } else {
                            g.apply(op.clone(), &[&ac, leaf])?
                        };
                        weighted_sum(g, &y, seed)
                    },
                    &target,
                    STEP,
                )
                .unwrap();
                assert!(err < TOL, "seed {seed}: {op_name} side {side} error {err}");
            }
        }

        // bias_add, both inputs.
        let err = grad_check(
            |g, leaf| {
                let bc = g.constant(&bias);
                let y = g.bias_add(leaf, &bc)?;
                weighted_sum(g, &y, seed)
            },
            &a,
            STEP,
        )
        .unwrap();
        assert!(err < TOL, "seed {seed}: bias_add dx error {err}");
        let err = grad_check(
            |g, leaf| {
                let ac = g.constant(&a);
                let y = g.bias_add(&ac, leaf)?;
                weighted_sum(g, &y, seed)
            },
            &bias,
            STEP,
        )
        .unwrap();
        assert!(err < TOL, "seed {seed}: bias_add db error {err}");

        // concat, both sides.
        for side in 0..2 {
            let target = if side == 0 { a.clone() } else { b.clone() };
            let err = grad_check(
                |g, leaf| {
                    let ac = g.constant(&a);
                    let bc = g.constant(&b);
                    let y = if side == 0 {
                        g.concat_channels(leaf, &bc)?
                    } else {
                        g.concat_channels(&ac, leaf)?
                    };
                    weighted_sum(g, &y, seed)
                },
                &target,
                STEP,
            )
            .unwrap();
            assert!(err < TOL, "seed {seed}: concat side {side} error {err}");
        }

        // upsample / avgpool.
        let err = grad_check(
            |g, leaf| {
                let y = g.upsample2x(leaf)?;
                weighted_sum(g, &y, seed)
            },
            &a,
            STEP,
        )
        .unwrap();
        assert!(err < TOL, "seed {seed}: upsample error {err}");
        let err = grad_check(
            |g, leaf| {
                let y = g.avg_pool2x(leaf)?;
                weighted_sum(g, &y, seed)
            },
            &a,
            STEP,
        )
        .unwrap();
        assert!(err < TOL, "seed {seed}: avgpool error {err}");
    }
}

#[test]
fn unary_and_reduction_gradients() {
    for seed in 0..10u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(500 + seed);
        let n = rng.gen_range(2..24usize);
        let x = randn(&[n], &mut rng);
        let positive = x.map(|v| v * v + 0.5);

        let cases: Vec<(&str, Box<dyn Fn(&mut Graph<f64>, &Tensor<f64>) -> ccm_core::Result<Tensor<f64>>>)> = vec![
            ("silu", Box::new(|g, leaf| g.silu(leaf))),
            ("scale", Box::new(|g, leaf| g.scale(leaf, -1.7))),
            ("shift", Box::new(|g, leaf| g.shift(leaf, 0.31))),
        ];
        for (name, build) in cases {
            let err = grad_check(
                |g, leaf| {
                    let y = build(g, leaf)?;
                    weighted_sum(g, &y, seed)
                },
                &x,
                STEP,
            )
            .unwrap();
            assert!(err < TOL, "seed {seed}: {name} error {err}");
        }

        let err = grad_check(|g, leaf| g.sum(leaf), &x, STEP).unwrap();
        assert!(err < TOL, "seed {seed}: sum error {err}");
        let err = grad_check(|g, leaf| g.mean(leaf), &x, STEP).unwrap();
        assert!(err < TOL, "seed {seed}: mean error {err}");

        let err = grad_check(
            |g, leaf| {
                let y = g.sqrt(leaf)?;
                weighted_sum(g, &y, seed)
            },
            &positive,
            STEP,
        )
        .unwrap();
        assert!(err < TOL, "seed {seed}: sqrt error {err}");
    }
}

#[test]
fn group_norm_gradients() {
    for seed in 0..10u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(600 + seed);
        let groups = rng.gen_range(1..4usize);
        let c = groups * rng.gen_range(1..3usize);
        let hw = rng.gen_range(2..5usize);
        let x = randn(&[c, hw, hw], &mut rng);
        let gamma = randn(&[c], &mut rng).map(|v| v * 0.5 + 1.0);
        let beta = randn(&[c], &mut rng);
        for role in 0..3 {
            let target = [&x, &gamma, &beta][role].clone();
            let err = grad_check(
                |g, leaf| {
                    let xc = g.constant(&x);
                    let gc = g.constant(&gamma);
                    let bc = g.constant(&beta);
                    let (xi, gi, bi) = match role {
                        0 => (leaf, &gc, &bc),
                        1 => (&xc, leaf, &bc),
                        _ => (&xc, &gc, leaf),
                    };
                    let y = g.group_norm(xi, gi, bi, groups, 1e-5)?;
                    weighted_sum(g, &y, seed)
                },
                &target,
                STEP,
            )
            .unwrap();
            assert!(err < TOL, "seed {seed} role {role}: group_norm error {err}");
        }
    }
}

#[test]
fn time_embed_composes_into_graphs() {
    for seed in 0..10u64 {
        let t = 0.01 + seed as f64 * 3.3;
        let mut rng = ChaCha8Rng::seed_from_u64(700 + seed);
        let x = randn(&[8], &mut rng);
        // Gradient w.r.t. x of sum(embed(t) * x) is the embedding itself.
        let err = grad_check(
            |g, leaf| {
                let e = g.time_embed(t, 8)?;
                let prod = g.mul(&e, leaf)?;
                g.sum(&prod)
            },
            &x,
            STEP,
        )
        .unwrap();
        assert!(err < TOL, "seed {seed}: time_embed composition error {err}");
    }
}

#[test]
fn backward_trivial_closed_forms() {
    // loss = sum(x * x) at x = [3] -> grad [6].
    let x = Tensor::<f64>::from_vec(vec![1], vec![3.0])
        .unwrap()
        .with_requires_grad(true);
    let mut g = Graph::new();
    let leaf = g.leaf(&x);
    let sq = g.mul(&leaf, &leaf).unwrap();
    let loss = g.sum(&sq).unwrap();
    let grads = g.backward(&loss).unwrap();
    assert_eq!(grads.get(&leaf).unwrap(), &[6.0]);

    // loss = mean(x) over 4 elements -> grad all 0.25.
    let x = Tensor::<f64>::from_vec(vec![4], vec![1.0, 2.0, 3.0, 4.0])
        .unwrap()
        .with_requires_grad(true);
    let mut g = Graph::new();
    let leaf = g.leaf(&x);
    let loss = g.mean(&leaf).unwrap();
    let grads = g.backward(&loss).unwrap();
    assert_eq!(grads.get(&leaf).unwrap(), &[0.25; 4]);
}

#[test]
fn two_layer_network_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let x = Tensor::<f64>::randn(&[6], &mut rng);
    let w1 = Tensor::<f64>::randn(&[5, 6], &mut rng);
    let b1 = Tensor::<f64>::randn(&[5], &mut rng);
    let w2 = Tensor::<f64>::randn(&[1, 5], &mut rng);
    for (name, target) in [("w1", &w1), ("b1", &b1), ("w2", &w2), ("x", &x)] {
        let err = grad_check(
            |g, leaf| {
                let xc = g.constant(&x);
                let w1c = g.constant(&w1);
                let b1c = g.constant(&b1);
                let w2c = g.constant(&w2);
                let (xi, w1i, b1i, w2i) = match name {
                    "x" => (leaf, &w1c, &b1c, &w2c),
                    "w1" => (&xc, leaf, &b1c, &w2c),
                    "b1" => (&xc, &w1c, leaf, &w2c),
                    _ => (&xc, &w1c, &b1c, leaf),
                };
                let h = g.linear(xi, w1i, Some(b1i))?;
                let h = g.silu(&h)?;
                let y = g.linear(&h, w2i, None)?;
                g.sum(&y)
            },
            target,
            STEP,
        )
        .unwrap();
        assert!(err < TOL, "{name}: two-layer net error {err}");
    }
}

#[test]
fn grad_check_harness_contracts() {
    let mut rng = ChaCha8Rng::seed_from_u64(88);
    let x = Tensor::<f64>::randn(&[8], &mut rng);
    // Sum of squares has a closed-form gradient; the harness must agree to
    // much better than 1e-6.
    let err = grad_check(
        |g, leaf| {
            let sq = g.mul(leaf, leaf)?;
            g.sum(&sq)
        },
        &x,
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-6, "sum-of-squares harness error {err}");

    // Constant function: analytic and numeric both zero.
    let c = Tensor::<f64>::scalar(3.0);
    let err = grad_check(
        |g, _leaf| {
            let cc = g.constant(&c);
            g.sum(&cc)
        },
        &x,
        1e-5,
    )
    .unwrap();
    assert_eq!(err, 0.0);

    // Non-scalar outputs are rejected.
    assert!(grad_check(|g, leaf| g.silu(leaf), &x, 1e-5).is_err());
}

#[test]
fn im2col_conv_matches_direct_reference() {
    use ccm_core::tensor::ops;
    for seed in 0..12u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(900 + seed);
        let cin = rng.gen_range(1..5usize);
        let cout = rng.gen_range(1..5usize);
        let same = seed % 2 == 0;
        let k = if same { 2 * rng.gen_range(0..2usize) + 1 } else { rng.gen_range(1..4usize) };
        let hw = rng.gen_range(k.max(2)..9usize);
        let x = randn(&[cin, hw, hw], &mut rng);
        let w = randn(&[cout, cin, k, k], &mut rng);
        let b = randn(&[cout], &mut rng);
        let Some((hout, wout, ph, pw)) = ops::conv2d_out_shape(hw, hw, k, k, same) else {
            continue;
        };
        let fast = ops::conv2d_fwd(
            x.data(), w.data(), Some(b.data()), cin, hw, hw, cout, k, k, hout, wout, ph, pw,
        );
        let direct = ops::conv2d_fwd_direct(
            x.data(), w.data(), Some(b.data()), cin, hw, hw, cout, k, k, hout, wout, ph, pw,
        );
        for (f, d) in fast.iter().zip(&direct) {
            assert!((f - d).abs() < 1e-12, "seed {seed}: {f} vs {d}");
        }
    }
}

#[test]
fn identity_kernel_conv_preserves_input() {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let c = 2;
    let x = Tensor::<f64>::randn(&[c, 5, 5], &mut rng);
    let mut w = vec![0.0; c * c * 9];
    for ch in 0..c {
        w[(ch * c + ch) * 9 + 4] = 1.0;
    }
    let w = Tensor::<f64>::from_vec(vec![c, c, 3, 3], w).unwrap();
    let mut g = Graph::new();
    let xc = g.constant(&x);
    let wc = g.constant(&w);
    let y = g.conv2d(&xc, &wc, None, Padding::Same).unwrap();
    assert_eq!(y.data(), x.data());
}

#[test]
fn concat_and_linear_value_examples() {
    let mut g = Graph::<f64>::new();
    let a = g.constant(&Tensor::zeros(&[2, 4, 4]));
    let b = g.constant(&Tensor::zeros(&[2, 4, 4]));
    let y = g.concat_channels(&a, &b).unwrap();
    assert_eq!(y.shape(), &[4, 4, 4]);

    // Weight [[1,2],[3,4]] applied to [1,1] -> [3, 7].
    let x = g.constant(&Tensor::from_vec(vec![2], vec![1.0, 1.0]).unwrap());
    let w = g.constant(&Tensor::from_vec(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
    let y = g.linear(&x, &w, None).unwrap();
    assert_eq!(y.data(), &[3.0, 7.0]);
}

#[test]
fn op_apply_is_pure() {
    let mut rng = ChaCha8Rng::seed_from_u64(111);
    let x = Tensor::<f64>::randn(&[3, 6, 6], &mut rng);
    let w = Tensor::<f64>::randn(&[2, 3, 3, 3], &mut rng);
    let run = || {
        let mut g = Graph::new();
        let xc = g.constant(&x);
        let wc = g.constant(&w);
        let y = g.conv2d(&xc, &wc, None, Padding::Same).unwrap();
        let s = g.silu(&y).unwrap();
        s.to_vec()
    };
    assert_eq!(run(), run());
}

#[test]
fn backward_on_consumed_graph_and_non_scalar_loss_error() {
    let x = Tensor::<f64>::from_vec(vec![2], vec![1.0, 2.0])
        .unwrap()
        .with_requires_grad(true);
    let mut g = Graph::new();
    let leaf = g.leaf(&x);
    let y = g.silu(&leaf).unwrap();
    assert!(g.backward(&y).is_err(), "non-scalar loss must be rejected");
    let loss = g.sum(&y).unwrap();
    assert!(g.backward(&loss).is_ok());
    assert!(g.backward(&loss).is_err(), "second backward must fail");
}

#[test]
fn unreachable_leaves_get_zero_gradients() {
    let x = Tensor::<f64>::from_vec(vec![3], vec![1.0, 2.0, 3.0])
        .unwrap()
        .with_requires_grad(true);
    let unused = Tensor::<f64>::from_vec(vec![2], vec![5.0, 6.0])
        .unwrap()
        .with_requires_grad(true);
    let mut g = Graph::new();
    let leaf = g.leaf(&x);
    let orphan = g.leaf(&unused);
    let loss = g.sum(&leaf).unwrap();
    let grads = g.backward(&loss).unwrap();
    assert_eq!(grads.get(&leaf).unwrap(), &[1.0; 3]);
    assert_eq!(grads.get(&orphan).unwrap(), &[0.0; 2]);
}

#[test]
fn independent_subgraphs_backward_like_their_concatenation() {
    let mut rng = ChaCha8Rng::seed_from_u64(123);
    let x = Tensor::<f64>::randn(&[5], &mut rng).with_requires_grad(true);
    let y = Tensor::<f64>::randn(&[7], &mut rng).with_requires_grad(true);

    let grad_f = {
        let mut g = Graph::new();
        let leaf = g.leaf(&x);
        let sq = g.mul(&leaf, &leaf).unwrap();
        let loss = g.sum(&sq).unwrap();
        g.backward(&loss).unwrap().get(&leaf).unwrap().to_vec()
    };
    let grad_h = {
        let mut g = Graph::new();
        let leaf = g.leaf(&y);
        let s = g.silu(&leaf).unwrap();
        let loss = g.mean(&s).unwrap();
        g.backward(&loss).unwrap().get(&leaf).unwrap().to_vec()
    };

    // Same two computations as independent subgraphs of one graph.
    let mut g = Graph::new();
    let lx = g.leaf(&x);
    let ly = g.leaf(&y);
    let sq = g.mul(&lx, &lx).unwrap();
    let loss_f = g.sum(&sq).unwrap();
    let s = g.silu(&ly).unwrap();
    let loss_h = g.mean(&s).unwrap();
    let loss = g.add(&loss_f, &loss_h).unwrap();
    let grads = g.backward(&loss).unwrap();
    assert_eq!(grads.get(&lx).unwrap(), grad_f.as_slice());
    assert_eq!(grads.get(&ly).unwrap(), grad_h.as_slice());
}

#[test]
fn requires_grad_tensor_must_be_registered() {
    let x = Tensor::<f64>::from_vec(vec![2], vec![1.0, 2.0])
        .unwrap()
        .with_requires_grad(true);
    let mut g = Graph::new();
    // Passing a requires-grad tensor without Graph::leaf is an error, not a
    // silent constant.
    assert!(g.silu(&x).is_err());
}

#[test]
fn shape_errors_name_the_operator() {
    let mut g = Graph::<f64>::new();
    let a = g.constant(&Tensor::zeros(&[2, 3, 3]));
    let b = g.constant(&Tensor::zeros(&[2, 4, 4]));
    let err = g.add(&a, &b).unwrap_err().to_string();
    assert!(err.contains("add"), "{err}");
    assert!(err.contains('3') && err.contains('4'), "{err}");

    let w = g.constant(&Tensor::zeros(&[4, 3, 2, 2]));
    let err = g
        .conv2d(&a, &w, None, Padding::Same)
        .unwrap_err()
        .to_string();
    assert!(err.contains("conv2d"), "{err}");
}

#[test]
fn small_unet_parameter_groups_match_finite_differences() {
    let cfg = UNetConfig {
        out_channels: 2,
        base_width: 4,
        channel_mults: vec![1, 2],
        depth: 1,
        time_embed_dim: 8,
    };
    let mut params = network::init::<f64>(&cfg, 21).unwrap();
    // Nonzero head so the output actually depends on the trunk.
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    for name in ["head.conv.weight", "head.conv.bias"] {
        let t = params.get_mut(name).unwrap();
        let data: Vec<f64> = Tensor::<f64>::randn(&[t.numel()], &mut rng)
            .data()
            .iter()
            .map(|v| v * 0.05)
            .collect();
        t.replace_data(data).unwrap();
    }
    let r = Tensor::<f64>::randn(&[2, 8, 8], &mut rng);
    let v = Tensor::<f64>::randn(&[2, 8, 8], &mut rng);

    for group in ["stem.weight", "enc1.res0.norm1.weight", "mid.res0.temb.bias"] {
        let target = params.get(group).unwrap().clone();
        let err = grad_check(
            |g, leaf| {
                let mut bound = std::collections::HashMap::new();
                for (name, tensor) in params.iter() {
                    let handle = if name == group {
                        leaf.clone()
                    } else {
                        g.constant(tensor)
                    };
                    bound.insert(name.to_string(), handle);
                }
                let rc = g.constant(&r);
                let vc = g.constant(&v);
                let bp = network::BoundParams::from_map(bound);
                let out = network::forward_bound(g, &cfg, &bp, &rc, &vc, 1.7)?;
                let sq = g.mul(&out, &out)?;
                g.sum(&sq)
            },
            &target,
            STEP,
        )
        .unwrap();
        assert!(err < TOL, "unet group {group}: error {err}");
    }
}
