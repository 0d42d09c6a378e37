use approx::assert_relative_eq;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::gradcheck;

fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
    Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    t(shape, &(0..n).map(|_| rng.gen_range(-1.0..1.0)).collect::<Vec<_>>())
}

#[test]
fn softmax_of_zeros_is_uniform() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(t(&[3], &[0.0, 0.0, 0.0]));
    let y = g.softmax(x, 0).unwrap();
    for &p in g.value(y).unwrap().data() {
        assert_relative_eq!(p, 1.0 / 3.0, epsilon = 1e-15);
    }
}

#[test]
fn relu_clamps_negatives() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(t(&[2], &[-1.0, 2.0]));
    let y = g.relu(x).unwrap();
    assert_eq!(g.value(y).unwrap().data(), &[0.0, 2.0]);
}

#[test]
fn matmul_of_ones() {
    let mut g = Graph::<f64>::new();
    let a = g.constant(Tensor::full(vec![2, 3], 1.0));
    let b = g.constant(Tensor::full(vec![3, 1], 1.0));
    let c = g.matmul(a, b).unwrap();
    assert_eq!(g.value(c).unwrap(), &t(&[2, 1], &[3.0, 3.0]));
}

#[test]
fn shape_errors_name_op_and_shapes() {
    let mut g = Graph::<f64>::new();
    let a = g.constant(Tensor::zeros(vec![2, 3]));
    let b = g.constant(Tensor::zeros(vec![2, 3]));
    let msg = g.matmul(a, b).unwrap_err().to_string();
    assert!(msg.contains("matmul") && msg.contains("[2, 3]"), "{msg}");
    let c = g.constant(Tensor::zeros(vec![3, 2]));
    let msg = g.add(a, c).unwrap_err().to_string();
    assert!(msg.contains("add") && msg.contains("[3, 2]"), "{msg}");
}

#[test]
fn square_derivative() {
    let mut g = Graph::<f64>::new();
    let x = g.param(Tensor::scalar(3.0));
    let y = g.mul(x, x).unwrap();
    g.backward(y).unwrap();
    assert_eq!(g.grad(x).unwrap().unwrap(), &[6.0]);
}

#[test]
fn cross_entropy_gradient_at_uniform_logits() {
    let c = 4;
    let target = 2;
    let mut g = Graph::<f64>::new();
    let z = g.param(Tensor::zeros(vec![1, c]));
    let ls = g.log_softmax(z, 1).unwrap();
    let picked = g.gather(ls, &[target]).unwrap();
    let nll = g.neg(picked).unwrap();
    let loss = g.mean_all(nll).unwrap();
    g.backward(loss).unwrap();
    let grad = g.grad(z).unwrap().unwrap();
    for (k, &v) in grad.iter().enumerate() {
        let expected = if k == target { 1.0 / c as f64 - 1.0 } else { 1.0 / c as f64 };
        assert_relative_eq!(v, expected, epsilon = 1e-15);
    }
}

#[test]
fn backward_twice_is_an_error() {
    let mut g = Graph::<f64>::new();
    let x = g.param(Tensor::scalar(1.0));
    let y = g.mul(x, x).unwrap();
    g.backward(y).unwrap();
    assert!(matches!(g.backward(y), Err(Error::BackwardTwice)));
}

#[test]
fn non_scalar_loss_rejected() {
    let mut g = Graph::<f64>::new();
    let x = g.param(Tensor::zeros(vec![2]));
    assert!(matches!(g.backward(x), Err(Error::NonScalarLoss(s)) if s == vec![2]));
}

#[test]
fn stale_var_rejected() {
    let mut g1 = Graph::<f64>::new();
    let x = g1.param(Tensor::scalar(1.0));
    let mut g2 = Graph::<f64>::new();
    assert!(matches!(g2.relu(x), Err(Error::StaleVar { .. })));
}

#[test]
fn untracked_inputs_record_no_rule() {
    let mut g = Graph::<f64>::new();
    let a = g.constant(Tensor::scalar(2.0));
    let b = g.mul(a, a).unwrap();
    assert!(!g.requires_grad(b).unwrap());
    g.backward(b).unwrap();
    assert!(g.grad(a).unwrap().is_none());
}

#[test]
fn every_tracked_leaf_reached_gets_grad() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut g = Graph::<f64>::new();
    let x = g.param(random(&mut rng, &[4, 3]));
    let w = g.param(random(&mut rng, &[3, 2]));
    let unused = g.param(random(&mut rng, &[5]));
    let h = g.matmul(x, w).unwrap();
    let l = g.sum_all(h).unwrap();
    g.backward(l).unwrap();
    assert_eq!(g.grad(x).unwrap().unwrap().len(), 12);
    assert_eq!(g.grad(w).unwrap().unwrap().len(), 6);
    assert!(g.grad(unused).unwrap().is_none());
}

#[test]
fn linear_matches_matmul_plus_row() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (x, w, b) = (random(&mut rng, &[5, 3]), random(&mut rng, &[3, 4]), random(&mut rng, &[4]));
    let run = |fused: bool| {
        let mut g = Graph::<f64>::new();
        let v = [g.param(x.clone()), g.param(w.clone()), g.param(b.clone())];
        let y = if fused {
            g.linear(v[0], v[1], v[2]).unwrap()
        } else {
            let h = g.matmul(v[0], v[1]).unwrap();
            g.add_row(h, v[2]).unwrap()
        };
        let y2 = g.mul(y, y).unwrap();
        let l = g.sum_all(y2).unwrap();
        let out = g.value(y).unwrap().data().to_vec();
        g.backward(l).unwrap();
        let grads: Vec<Vec<f64>> = v.iter().map(|&p| g.grad(p).unwrap().unwrap().to_vec()).collect();
        (out, grads)
    };
    let (a, b) = (run(true), run(false));
    for (p, q) in a.0.iter().zip(&b.0) {
        assert_relative_eq!(p, q, epsilon = 1e-14);
    }
    for (ga, gb) in a.1.iter().zip(&b.1) {
        for (p, q) in ga.iter().zip(gb) {
            assert_relative_eq!(p, q, epsilon = 1e-13);
        }
    }
}

#[test]
fn intermediate_grads_are_freed() {
    let mut g = Graph::<f64>::new();
    let x = g.param(t(&[2], &[1.0, 2.0]));
    let h = g.scale(x, 3.0).unwrap();
    let l = g.sum_all(h).unwrap();
    g.backward(l).unwrap();
    assert_eq!(g.grad(x).unwrap().unwrap(), &[3.0, 3.0]);
    assert!(g.grad(h).unwrap().is_none());
}

#[test]
fn mask_all_ones_is_bit_exact_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let v = random(&mut rng, &[7, 5]);
    let mut g = Graph::<f64>::new();
    let x = g.constant(v.clone());
    let y = g.mask_apply(x, &Tensor::full(vec![7, 5], 1.0)).unwrap();
    assert_eq!(g.value(y).unwrap(), &v);
    let bad = Tensor::full(vec![7, 5], 0.5);
    assert!(g.mask_apply(x, &bad).is_err());
}

#[test]
fn embedding_out_of_vocab() {
    let mut g = Graph::<f64>::new();
    let table = g.param(Tensor::zeros(vec![4, 2]));
    assert!(matches!(
        g.embedding_lookup(table, &[1, 4]),
        Err(Error::OutOfVocab { id: 4, vocab: 4 })
    ));
}

#[test]
fn segments_must_tile_rows() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::zeros(vec![5, 2]));
    let gap = [Segment { start: 0, len: 2 }, Segment { start: 3, len: 2 }];
    assert!(g.segment_mean(x, &gap).is_err());
    let ok = [Segment { start: 0, len: 2 }, Segment { start: 2, len: 3 }];
    assert!(g.segment_mean(x, &ok).is_ok());
}

#[test]
fn masked_log_softmax_ignores_excluded() {
    let mut g = Graph::<f64>::new();
    let x = g.param(t(&[2, 3], &[1.0, 50.0, 2.0, 0.0, 0.0, 0.0]));
    let keep = [true, false, true, false, false, false];
    let y = g.log_softmax_masked(x, &keep).unwrap();
    let v = g.value(y).unwrap().data().to_vec();
    let lse = (1f64.exp() + 2f64.exp()).ln();
    assert_relative_eq!(v[0], 1.0 - lse, epsilon = 1e-14);
    assert_eq!(v[1], 0.0);
    assert_eq!(&v[3..], &[0.0, 0.0, 0.0]);
}

// Finite-difference checks per op family. Values are kept away from relu
// kinks and log's pole by construction.

fn fd_ok(params: &[Tensor<f64>], f: impl Fn(&mut Graph<f64>, &[Var]) -> Result<Var>) {
    let r = gradcheck::check(params, 1e-5, f).unwrap();
    assert!(r.max_rel_err < 1e-6, "max rel err {} at {:?}", r.max_rel_err, r.worst);
}

#[test]
fn fd_matmul_transpose_addrow() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let ps = [random(&mut rng, &[3, 4]), random(&mut rng, &[4, 2]), random(&mut rng, &[2])];
    fd_ok(&ps, |g, v| {
        let h = g.matmul(v[0], v[1])?;
        let h = g.add_row(h, v[2])?;
        let ht = g.transpose(h)?;
        let hh = g.matmul(h, ht)?;
        g.sum_all(hh)
    });
}

#[test]
fn fd_softmax_axes_and_log() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let ps = [random(&mut rng, &[3, 4]), random(&mut rng, &[3, 4])];
    for axis in [0, 1] {
        fd_ok(&ps, |g, v| {
            let s = g.softmax(v[0], axis)?;
            let l = g.log(s)?;
            let w = g.mul(l, v[1])?;
            let m = g.mean(w, 1 - axis)?;
            g.sum_all(m)
        });
        fd_ok(&ps, |g, v| {
            let s = g.log_softmax(v[0], axis)?;
            let w = g.mul(s, v[1])?;
            let m = g.sum(w, axis)?;
            g.mean_all(m)
        });
    }
}

#[test]
fn fd_layernorm_embedding_attention_pool() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let ps = [
        random(&mut rng, &[6, 4]),
        random(&mut rng, &[4]),
        random(&mut rng, &[4]),
        random(&mut rng, &[4, 4]),
        random(&mut rng, &[4, 4]),
        random(&mut rng, &[4, 4]),
    ];
    let segs = [Segment { start: 0, len: 2 }, Segment { start: 2, len: 3 }];
    fd_ok(&ps, |g, v| {
        let x = g.embedding_lookup(v[0], &[1, 3, 0, 5, 3])?;
        let x = g.layernorm(x, v[1], v[2], 1e-5)?;
        let q = g.matmul(x, v[3])?;
        let k = g.matmul(x, v[4])?;
        let val = g.matmul(x, v[5])?;
        let a = g.attention(q, k, val, &segs, 2)?;
        let p = g.segment_mean(a, &segs)?;
        let e = g.exp(p)?;
        g.sum_all(e)
    });
}

#[test]
fn fd_gather_mask_concat_slice_pow() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let ps = [random(&mut rng, &[3, 3]), random(&mut rng, &[2, 3])];
    let mask = t(&[5, 3], &[1., 0., 1., 1., 1., 0., 0., 1., 1., 1., 1., 1., 0., 0., 1.]);
    fd_ok(&ps, |g, v| {
        let c = g.concat_rows(&[v[0], v[1]])?;
        let m = g.mask_apply(c, &mask)?;
        let s = g.softmax(m, 1)?;
        let top = g.slice_rows(s, 1, 3)?;
        let picked = g.gather(top, &[0, 2, 1])?;
        let om = g.scale(picked, -1.0)?;
        let one = g.constant(Tensor::full(vec![3], 1.0));
        let q = g.add(one, om)?;
        let p = g.powf(q, 2.5)?;
        g.sum_all(p)
    });
}

#[test]
fn fd_masked_log_softmax_and_sub() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let ps = [random(&mut rng, &[4, 3]), random(&mut rng, &[4, 3])];
    fd_ok(&ps, |g, v| {
        let zt = g.transpose(v[0])?;
        let sim = g.matmul(v[0], zt)?;
        let keep: Vec<bool> = (0..16).map(|i| i % 5 != 0).collect();
        let l = g.log_softmax_masked(sim, &keep)?;
        let d = g.sub(v[0], v[1])?;
        let dd = g.mul(d, d)?;
        let a = g.sum_all(l)?;
        let b = g.sum_all(dd)?;
        let s = g.add(a, b)?;
        g.neg(s)
    });
}

#[test]
fn two_layer_mlp_matches_finite_differences() {
    // h = 1e-4 as in the textbook check; relu pre-activations are pushed away
    // from zero by the bias so no kink sits inside the stencil.
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let ps = [
        random(&mut rng, &[5, 4]),
        random(&mut rng, &[4, 6]),
        t(&[6], &[0.5; 6]),
        random(&mut rng, &[6, 3]),
        random(&mut rng, &[3]),
    ];
    let r = gradcheck::check(&ps, 1e-4, |g, v| {
        let h = g.matmul(v[0], v[1])?;
        let h = g.add_row(h, v[2])?;
        let h = g.relu(h)?;
        let z = g.matmul(h, v[3])?;
        let z = g.add_row(z, v[4])?;
        let ls = g.log_softmax(z, 1)?;
        let p = g.gather(ls, &[0, 1, 2, 1, 0])?;
        let m = g.mean_all(p)?;
        g.neg(m)
    })
    .unwrap();
    assert!(r.max_rel_err < 1e-6, "{r:?}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn softmax_rows_sum_to_one(vals in proptest::collection::vec(-30.0f64..30.0, 12)) {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[3, 4], &vals));
        let s = g.softmax(x, 1).unwrap();
        for row in g.value(s).unwrap().data().chunks(4) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            prop_assert!(row.iter().all(|&p| p > 0.0));
        }
    }

    #[test]
    fn random_composed_graph_gradients(seed in 0u64..10_000, depth in 1usize..5) {
        // A random chain of shape-preserving ops on a 3x4 input, finished with
        // a smooth scalar reduction.
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ps = [random(&mut rng, &[3, 4]), random(&mut rng, &[4, 4]), random(&mut rng, &[4])];
        let ops: Vec<u8> = (0..depth).map(|_| rng.gen_range(0..8)).collect();
        let r = gradcheck::check(&ps, 1e-5, |g, v| {
            let mut x = v[0];
            for &op in &ops {
                x = match op {
                    0 => g.matmul(x, v[1])?,
                    1 => g.add_row(x, v[2])?,
                    2 => g.softmax(x, 1)?,
                    3 => g.layernorm(x, v[2], v[2], 1e-5)?,
                    4 => { let e = g.scale(x, 0.3)?; g.exp(e)? }
                    5 => g.mul(x, x)?,
                    6 => g.linear(x, v[1], v[2])?,
                    _ => g.log_softmax(x, 0)?,
                };
            }
            let s = g.softmax(x, 1)?;
            let l = g.log(s)?;
            g.mean_all(l)
        }).unwrap();
        prop_assert!(r.max_rel_err < 1e-6, "ops {:?} err {} at {:?}", ops, r.max_rel_err, r.worst);
    }
}
