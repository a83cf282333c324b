mod common;

use common::gradcheck;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use terragen::numerics::{Graph, ParamId, ParamStore, Tensor, Var};

const TOL: f64 = 1e-4;

fn store_with(shapes: &[&[usize]], seed: u64) -> ParamStore {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut s = ParamStore::new();
    for (i, sh) in shapes.iter().enumerate() {
        s.add_normal(format!("p{i}"), sh, 1.0, &mut rng).unwrap();
    }
    s
}

/// Projects an arbitrary-shaped output onto a fixed pseudo-random direction.
fn probe(g: &mut Graph<'_>, y: Var) -> Var {
    let n = g.value(y).numel();
    let w: Vec<f64> = (0..n).map(|i| ((i as f64 + 1.0) * 0.7311).sin()).collect();
    let w = g.constant(Tensor::new(g.shape(y).to_vec(), w).unwrap());
    let p = g.mul(y, w).unwrap();
    g.sum(p).unwrap()
}

fn check(shapes: &[&[usize]], f: impl Fn(&mut Graph<'_>, &[Var]) -> Var) {
    let mut store = store_with(shapes, 11);
    let n = shapes.len();
    let err = gradcheck(
        &mut store,
        |g| {
            let vars: Vec<Var> = (0..n).map(|i| g.param(ParamId(i))).collect();
            let y = f(g, &vars);
            probe(g, y)
        },
        50,
        3,
    );
    assert!(err < TOL, "relative error {err}");
}

#[test]
fn sum_gives_all_ones() {
    let mut store = store_with(&[&[2, 3]], 1);
    {
        let mut g = Graph::new(&store);
        let p = g.param(ParamId(0));
        let l = g.sum(p).unwrap();
        g.backward(l).unwrap().accumulate_into(&mut store);
    }
    assert_eq!(store.get(ParamId(0)).grad.data(), &[1.0; 6]);
}

#[test]
fn square_gives_twice_x_and_accumulates() {
    let mut store = ParamStore::new();
    store.add("p", Tensor::from_vec(vec![3.0])).unwrap();
    for expected in [6.0, 12.0] {
        let grads = {
            let mut g = Graph::new(&store);
            let p = g.param(ParamId(0));
            let sq = g.mul(p, p).unwrap();
            let l = g.sum(sq).unwrap();
            g.backward(l).unwrap()
        };
        grads.accumulate_into(&mut store);
        assert_eq!(store.get(ParamId(0)).grad.data(), &[expected]);
    }
    store.zero_grad();
    assert_eq!(store.get(ParamId(0)).grad.data(), &[0.0]);
}

#[test]
fn non_scalar_loss_is_rejected() {
    let store = store_with(&[&[2]], 1);
    let mut g = Graph::new(&store);
    let p = g.param(ParamId(0));
    assert!(g.backward(p).is_err());
}

#[test]
fn matmul_all_transpose_variants() {
    for (ta, tb) in [(false, false), (true, false), (false, true), (true, true)] {
        let sa: &[usize] = if ta { &[4, 3] } else { &[3, 4] };
        let sb: &[usize] = if tb { &[5, 4] } else { &[4, 5] };
        check(&[sa, sb], |g, v| g.matmul_t(v[0], v[1], ta, tb).unwrap());
    }
}

#[test]
fn conv2d_stride_one_and_two() {
    for stride in [1, 2] {
        check(&[&[2, 6, 6], &[3, 2, 3, 3], &[3]], |g, v| g.conv2d(v[0], v[1], Some(v[2]), stride, 1).unwrap());
    }
    check(&[&[2, 5, 5], &[2, 2, 1, 1]], |g, v| g.conv2d(v[0], v[1], None, 1, 0).unwrap());
}

#[test]
fn upsample_and_pool() {
    check(&[&[2, 3, 3]], |g, v| g.upsample2x(v[0]).unwrap());
    check(&[&[3, 4, 2]], |g, v| g.avg_pool(v[0]).unwrap());
}

#[test]
fn softmax_each_axis() {
    for axis in 0..3 {
        check(&[&[2, 3, 4]], |g, v| g.softmax(v[0], axis).unwrap());
    }
}

#[test]
fn nonlinearities() {
    check(&[&[3, 4]], |g, v| g.silu(v[0]).unwrap());
    check(&[&[3, 4]], |g, v| g.relu(v[0]).unwrap());
}

#[test]
fn group_and_instance_norm() {
    for groups in [1, 2, 4] {
        check(&[&[4, 3, 3], &[4], &[4]], |g, v| g.group_norm(v[0], v[1], v[2], groups).unwrap());
    }
}

#[test]
fn embedding_lookup_with_repeats() {
    check(&[&[5, 3]], |g, v| g.embedding(v[0], &[4, 0, 4, 2]).unwrap());
}

#[test]
fn broadcast_binary_ops() {
    check(&[&[2, 3, 4], &[3, 1]], |g, v| g.add(v[0], v[1]).unwrap());
    check(&[&[2, 3, 4], &[4]], |g, v| g.sub(v[0], v[1]).unwrap());
    check(&[&[2, 3, 4], &[2, 1, 4]], |g, v| g.mul(v[0], v[1]).unwrap());
    check(&[&[3, 4], &[3, 4]], |g, v| g.mul(v[0], v[1]).unwrap());
}

#[test]
fn shape_ops() {
    check(&[&[2, 3], &[2, 2]], |g, v| g.concat(&[v[0], v[1]], 1).unwrap());
    check(&[&[2, 3], &[1, 3]], |g, v| g.concat(&[v[0], v[1]], 0).unwrap());
    check(&[&[4, 5]], |g, v| g.narrow(v[0], 1, 1, 3).unwrap());
    check(&[&[4, 5]], |g, v| g.transpose(v[0]).unwrap());
    check(&[&[4, 5]], |g, v| {
        let r = g.reshape(v[0], &[2, 10]).unwrap();
        g.scale(r, -1.5).unwrap()
    });
    check(&[&[4, 5]], |g, v| g.mean(v[0]).unwrap());
}

#[test]
fn composite_attention_block() {
    check(&[&[6, 4], &[3, 4], &[4, 4], &[4, 4]], |g, v| {
        let q = g.matmul(v[0], v[2]).unwrap();
        let k = g.matmul(v[1], v[3]).unwrap();
        let logits = g.matmul_t(q, k, false, true).unwrap();
        let logits = g.scale(logits, 0.5).unwrap();
        let a = g.softmax(logits, 1).unwrap();
        let o = g.matmul(a, v[1]).unwrap();
        let o = g.silu(o).unwrap();
        let sq = g.mul(o, o).unwrap();
        g.mean(sq).unwrap()
    });
}

#[test]
fn detached_branch_gets_no_gradient() {
    let store = store_with(&[&[3]], 5);
    let mut g = Graph::new(&store);
    let p = g.param(ParamId(0));
    let d = g.detach(p);
    let y = g.mul(p, d).unwrap();
    let l = g.sum(y).unwrap();
    let grads = g.backward(l).unwrap();
    assert!(grads.wrt(d).is_none());
    let pv = store.get(ParamId(0)).value.data().to_vec();
    assert_eq!(grads.param(ParamId(0)).unwrap(), pv.as_slice());
}

#[test]
fn inference_graph_records_no_gradients() {
    let store = store_with(&[&[3]], 5);
    let mut g = Graph::inference(&store);
    let p = g.param(ParamId(0));
    let l = g.sum(p).unwrap();
    let grads = g.backward(l).unwrap();
    assert!(grads.param(ParamId(0)).is_none());
}
