use super::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

/// Checks every entry of every input against central differences of `f`,
/// which builds a scalar loss from leaves holding `inputs`.
fn check_fd(inputs: &[Tensor], f: impl Fn(&mut Graph, &[NodeId]) -> NodeId) {
    let mut g = Graph::new();
    let leaves: Vec<NodeId> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let loss = f(&mut g, &leaves);
    let grads = g.backward(loss, &leaves).unwrap();
    let eval = |vals: &[Tensor]| {
        let mut g = Graph::new();
        let leaves: Vec<NodeId> = vals.iter().map(|t| g.constant(t.clone())).collect();
        let loss = f(&mut g, &leaves);
        g.value(loss).unwrap().item()
    };
    let h = 1e-6;
    for (which, t) in inputs.iter().enumerate() {
        let an = grads.get(leaves[which]).unwrap();
        for k in 0..t.len() {
            let mut plus = inputs.to_vec();
            plus[which].data_mut()[k] += h;
            let mut minus = inputs.to_vec();
            minus[which].data_mut()[k] -= h;
            let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
            let a = an.data()[k];
            let scale = a.abs().max(fd.abs()).max(1.0);
            assert!(
                (a - fd).abs() / scale < 1e-5,
                "input {which} entry {k}: analytic {a} vs fd {fd}"
            );
        }
    }
}

#[test]
fn dense_identity_and_zero() {
    let mut g = Graph::new();
    let eye = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
    let x = g.constant(eye.clone());
    let w = g.constant(eye.clone());
    let b = g.constant(Tensor::zeros(&[2]));
    let y = g.dense(x, w, b).unwrap();
    assert_eq!(g.value(y).unwrap(), &eye);

    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = g.constant(rand_tensor(&mut rng, &[3, 4]));
    let w = g.constant(Tensor::zeros(&[4, 2]));
    let b = g.constant(Tensor::zeros(&[2]));
    let y = g.dense(x, w, b).unwrap();
    assert_eq!(g.value(y).unwrap().max_abs(), 0.0);
}

#[test]
fn dense_matches_dot_product_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let xs = rand_tensor(&mut rng, &[2, 3]);
    let ws = rand_tensor(&mut rng, &[3, 2]);
    let bs = rand_tensor(&mut rng, &[2]);
    let mut g = Graph::new();
    let (x, w, b) = (
        g.constant(xs.clone()),
        g.constant(ws.clone()),
        g.constant(bs.clone()),
    );
    let y = g.dense(x, w, b).unwrap();
    let y = g.value(y).unwrap();
    for i in 0..2 {
        for j in 0..2 {
            let mut s = bs.data()[j];
            for p in 0..3 {
                s += xs.data()[i * 3 + p] * ws.data()[p * 2 + j];
            }
            assert!((y.data()[i * 2 + j] - s).abs() < 1e-14);
        }
    }
}

#[test]
fn dense_shape_mismatch() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::zeros(&[2, 3]));
    let w = g.constant(Tensor::zeros(&[4, 2]));
    let b = g.constant(Tensor::zeros(&[2]));
    assert!(matches!(g.dense(x, w, b), Err(Error::ShapeMismatch { .. })));
}

/// Six nested loops, straight from the definition.
fn conv_oracle(x: &Tensor, k: &Tensor, stride: usize, pad: usize) -> Tensor {
    let (n, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (co, kh, kw) = (k.shape()[0], k.shape()[2], k.shape()[3]);
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (w + 2 * pad - kw) / stride + 1;
    let mut out = Tensor::zeros(&[n, co, oh, ow]);
    for s in 0..n {
        for o in 0..co {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = 0.0;
                    for ci in 0..c {
                        for i in 0..kh {
                            for j in 0..kw {
                                let y = (oy * stride + i) as isize - pad as isize;
                                let xx = (ox * stride + j) as isize - pad as isize;
                                if y >= 0 && xx >= 0 && (y as usize) < h && (xx as usize) < w {
                                    acc += x.data()
                                        [((s * c + ci) * h + y as usize) * w + xx as usize]
                                        * k.data()[((o * c + ci) * kh + i) * kw + j];
                                }
                            }
                        }
                    }
                    out.data_mut()[((s * co + o) * oh + oy) * ow + ox] = acc;
                }
            }
        }
    }
    out
}

#[test]
fn conv_identity_kernel() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let xs = rand_tensor(&mut rng, &[2, 1, 4, 5]);
    let mut g = Graph::new();
    let x = g.constant(xs.clone());
    let k = g.constant(Tensor::ones(&[1, 1, 1, 1]));
    let y = g.conv2d(x, k, 1, 0).unwrap();
    assert_eq!(g.value(y).unwrap(), &xs);

    let z = g.constant(Tensor::zeros(&[1, 2, 5, 5]));
    let k = g.constant(rand_tensor(&mut rng, &[3, 2, 3, 3]));
    let y = g.conv2d(z, k, 1, 1).unwrap();
    assert_eq!(g.value(y).unwrap().max_abs(), 0.0);
}

#[test]
fn conv_matches_nested_loop_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for &(stride, pad) in &[(1, 0), (1, 1), (2, 1), (2, 0)] {
        let xs = rand_tensor(&mut rng, &[1, 2, 5, 5]);
        let ks = rand_tensor(&mut rng, &[3, 2, 3, 3]);
        let mut g = Graph::new();
        let (x, k) = (g.constant(xs.clone()), g.constant(ks.clone()));
        let y = g.conv2d(x, k, stride, pad).unwrap();
        let want = conv_oracle(&xs, &ks, stride, pad);
        assert_eq!(g.value(y).unwrap().shape(), want.shape());
        assert!(g.value(y).unwrap().max_abs_diff(&want) < 1e-13);
    }
}

#[test]
fn conv_rejects_oversized_kernel() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::zeros(&[1, 1, 2, 2]));
    let k = g.constant(Tensor::zeros(&[1, 1, 5, 5]));
    assert!(g.conv2d(x, k, 1, 1).is_err());
    assert!(g.conv2d(x, k, 1, 2).is_ok());
}

#[test]
fn relu_and_pool_values() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::new(vec![3], vec![-1.0, 0.0, 2.0]).unwrap());
    let y = g.relu(x).unwrap();
    assert_eq!(g.value(y).unwrap().data(), &[0.0, 0.0, 2.0]);
    let x = g.constant(Tensor::new(vec![1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
    let y = g.maxpool2d(x, 2, 2).unwrap();
    assert_eq!(g.value(y).unwrap().data(), &[4.0]);
    let f = g.flatten(x).unwrap();
    assert_eq!(g.value(f).unwrap().shape(), &[1, 4]);
}

#[test]
fn maxpool_routes_gradient_to_argmax() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let xs = rand_tensor(&mut rng, &[2, 2, 4, 4]);
    let ws = rand_tensor(&mut rng, &[2, 2, 2, 2]);
    let mut g = Graph::new();
    let x = g.leaf(xs.clone());
    let w = g.constant(ws.clone());
    let y = g.maxpool2d(x, 2, 2).unwrap();
    let l = g.dot(y, w).unwrap();
    let grads = g.backward(l, &[x]).unwrap();
    let gx = grads.get(x).unwrap();
    let nonzero = gx.data().iter().filter(|v| **v != 0.0).count();
    assert_eq!(nonzero, 16);
    check_fd(&[xs], |g, l| {
        let w = g.constant(ws.clone());
        let y = g.maxpool2d(l[0], 2, 2).unwrap();
        g.dot(y, w).unwrap()
    });
}

#[test]
fn cross_entropy_values() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::zeros(&[2, 10]));
    let l = g
        .softmax_cross_entropy(x, &[3, 7], Reduction::Mean)
        .unwrap();
    assert!((g.value(l).unwrap().item() - 10f64.ln()).abs() < 1e-12);

    let mut logits = Tensor::zeros(&[1, 4]);
    logits.data_mut()[2] = 1000.0;
    let x = g.constant(logits);
    let l = g.softmax_cross_entropy(x, &[2], Reduction::Mean).unwrap();
    assert!(g.value(l).unwrap().item() < 1e-6);

    assert!(g.softmax_cross_entropy(x, &[4], Reduction::Mean).is_err());
}

#[test]
fn cross_entropy_matches_direct_formula() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let xs = rand_tensor(&mut rng, &[4, 3]).map(|v| 3.0 * v);
    let labels = [0, 2, 1, 1];
    let mut g = Graph::new();
    let x = g.constant(xs.clone());
    let l = g.softmax_cross_entropy(x, &labels, Reduction::Sum).unwrap();
    let rows = g.row_losses(l).unwrap().to_vec();
    let mut total = 0.0;
    for i in 0..4 {
        let r = &xs.data()[i * 3..(i + 1) * 3];
        let z: f64 = r.iter().map(|v| v.exp()).sum();
        let want = -(r[labels[i]].exp() / z).ln();
        assert!((rows[i] - want).abs() < 1e-13);
        total += want;
    }
    assert!((g.value(l).unwrap().item() - total).abs() < 1e-12);
}

#[test]
fn elementary_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let xs = rand_tensor(&mut rng, &[3, 2]);
    let mut g = Graph::new();
    let x = g.leaf(xs.clone());
    let s = g.sum(x).unwrap();
    assert_eq!(
        g.backward(s, &[x]).unwrap().get(x).unwrap(),
        &Tensor::ones(&[3, 2])
    );

    let mut g = Graph::new();
    let x = g.leaf(xs.clone());
    let d = g.dot(x, x).unwrap();
    let gx = g.backward(d, &[x]).unwrap();
    assert!(gx.get(x).unwrap().max_abs_diff(&xs.map(|v| 2.0 * v)) < 1e-15);

    let mut g = Graph::new();
    let x = g.leaf(xs.clone());
    let y = g.add(x, x).unwrap();
    let s = g.sum(y).unwrap();
    let gx = g.backward(s, &[x]).unwrap();
    assert_eq!(gx.get(x).unwrap(), &Tensor::full(&[3, 2], 2.0));
}

#[test]
fn backward_rejects_foreign_and_non_leaf_nodes() {
    let mut g = Graph::new();
    let x = g.leaf(Tensor::ones(&[2]));
    let s = g.sum(x).unwrap();
    let mut other = Graph::new();
    let y = other.leaf(Tensor::ones(&[2]));
    assert!(matches!(g.backward(s, &[y]), Err(Error::UnknownNode(_))));
    assert!(g.backward(s, &[s]).is_err());
    let c = g.constant(Tensor::ones(&[2]));
    assert!(g.backward(s, &[c]).is_err());
    // non-scalar loss
    assert!(g.backward(x, &[x]).is_err());
}

#[test]
fn unused_leaf_gets_zero_gradient() {
    let mut g = Graph::new();
    let x = g.leaf(Tensor::ones(&[2]));
    let y = g.leaf(Tensor::ones(&[3]));
    let s = g.sum(x).unwrap();
    let grads = g.backward(s, &[y]).unwrap();
    assert_eq!(grads.get(y).unwrap(), &Tensor::zeros(&[3]));
}

#[test]
fn op_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let x = rand_tensor(&mut rng, &[2, 3]);
    let w = rand_tensor(&mut rng, &[3, 4]);
    let b = rand_tensor(&mut rng, &[4]);
    check_fd(&[x, w, b], |g, l| {
        let y = g.dense(l[0], l[1], l[2]).unwrap();
        let y2 = g.mul(y, y).unwrap();
        g.sum(y2).unwrap()
    });

    let x = rand_tensor(&mut rng, &[2, 2, 5, 5]);
    let k = rand_tensor(&mut rng, &[3, 2, 3, 3]);
    let b = rand_tensor(&mut rng, &[3]);
    let probe = rand_tensor(&mut rng, &[2, 3, 3, 3]);
    check_fd(&[x, k, b], |g, l| {
        let y = g.conv2d(l[0], l[1], 2, 1).unwrap();
        let y = g.channel_bias(y, l[2]).unwrap();
        let p = g.constant(probe.clone());
        g.dot(y, p).unwrap()
    });

    let logits = rand_tensor(&mut rng, &[3, 4]);
    check_fd(&[logits], |g, l| {
        let s = g.scale(l[0], 2.5).unwrap();
        g.softmax_cross_entropy(s, &[1, 0, 3], Reduction::Mean)
            .unwrap()
    });
}

#[test]
fn style_mix_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let z = rand_tensor(&mut rng, &[2, 3, 3, 3]);
    let alpha = Tensor::new(vec![2, 3], vec![0.2, 0.5, 0.3, 0.4, 0.4, 0.2]).unwrap();
    let pm = rand_tensor(&mut rng, &[2, 2, 3]);
    let ps = rand_tensor(&mut rng, &[2, 2, 3]).map(|v| 0.5 + v.abs());
    let probe = rand_tensor(&mut rng, &[2, 3, 3, 3]);
    for gamma in [1.0, 0.6] {
        check_fd(&[z.clone(), alpha.clone()], |g, l| {
            let y = g.style_mix(l[0], l[1], &pm, &ps, gamma).unwrap();
            let p = g.constant(probe.clone());
            let y2 = g.mul(y, y).unwrap();
            let a = g.dot(y, p).unwrap();
            let b = g.sum(y2).unwrap();
            g.add(a, b).unwrap()
        });
    }
}

#[test]
fn composite_network_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let x = rand_tensor(&mut rng, &[2, 2, 6, 6]);
    let k = rand_tensor(&mut rng, &[3, 2, 3, 3]);
    let kb = rand_tensor(&mut rng, &[3]);
    let w = rand_tensor(&mut rng, &[27, 4]);
    let b = rand_tensor(&mut rng, &[4]);
    check_fd(&[x, k, kb, w, b], |g, l| {
        let y = g.conv2d(l[0], l[1], 1, 1).unwrap();
        let y = g.channel_bias(y, l[2]).unwrap();
        let y = g.relu(y).unwrap();
        let y = g.maxpool2d(y, 2, 2).unwrap();
        let y = g.flatten(y).unwrap();
        let y = g.dense(y, l[3], l[4]).unwrap();
        g.softmax_cross_entropy(y, &[3, 1], Reduction::Mean)
            .unwrap()
    });
}

#[test]
fn non_finite_outputs_rejected() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::full(&[2], f64::MAX));
    assert!(matches!(g.scale(x, 10.0), Err(Error::NonFinite(_))));
}

#[test]
fn repeated_evaluation_is_bitwise_stable() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let x = rand_tensor(&mut rng, &[3, 2, 6, 6]);
    let k = rand_tensor(&mut rng, &[4, 2, 3, 3]);
    let run = || {
        let mut g = Graph::new();
        let xi = g.leaf(x.clone());
        let ki = g.leaf(k.clone());
        let y = g.conv2d(xi, ki, 1, 1).unwrap();
        let y = g.relu(y).unwrap();
        let s = g.dot(y, y).unwrap();
        let gr = g.backward(s, &[xi, ki]).unwrap();
        (gr.get(xi).unwrap().clone(), gr.get(ki).unwrap().clone())
    };
    let (a1, b1) = run();
    let (a2, b2) = run();
    assert!(a1.bit_eq(&a2) && b1.bit_eq(&b2));
}
