use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

/// Central finite differences over every parameter entry.
fn check_params(mut store: ParamStore<f64>, build: impl Fn(&mut Graph<f64>) -> Var) {
    let analytic = {
        let mut g = Graph::new(&store);
        let loss = build(&mut g);
        g.backward(loss)
    };
    let h = 1e-5;
    let ids: Vec<ParamId> = store.ids().collect();
    for id in ids {
        if !store.get(id).trainable {
            assert!(analytic.param(id).is_none());
            continue;
        }
        let n = store.get(id).numel();
        for j in 0..n {
            let orig = store.get(id).value[j];
            store.get_mut(id).value[j] = orig + h;
            let up = {
                let mut g = Graph::inference(&store);
                let l = build(&mut g);
                g.value(l)[0]
            };
            store.get_mut(id).value[j] = orig - h;
            let down = {
                let mut g = Graph::inference(&store);
                let l = build(&mut g);
                g.value(l)[0]
            };
            store.get_mut(id).value[j] = orig;
            let numeric = (up - down) / (2.0 * h);
            let a = analytic.param(id).map_or(0.0, |g| g[j]);
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-4);
            assert!(err < 1e-5, "{} [{j}]: analytic {a} numeric {numeric}", store.get(id).name);
        }
    }
}

fn rand_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

fn store_with(shapes: &[(&str, Vec<usize>)], seed: u64) -> (ParamStore<f64>, Vec<ParamId>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let ids = shapes
        .iter()
        .map(|(name, shape)| {
            let n = shape.iter().product();
            store.add(name.to_string(), shape.clone(), rand_vec(&mut rng, n), true)
        })
        .collect();
    (store, ids)
}

/// Scalar readout with fixed random weights, so every output entry matters.
fn readout(g: &mut Graph<f64>, y: Var, seed: u64) -> Var {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = g.shape(y).to_vec();
    let w = rand_vec(&mut rng, g.value(y).len());
    let w = g.input(w, &shape);
    let p = g.mul(y, w);
    g.sum_all(p)
}

#[test]
fn conv2d_gradients() {
    for &(stride, pad, k) in &[(1, 1, 3), (2, 1, 3), (1, 0, 1), (2, 0, 2)] {
        let (store, ids) = store_with(&[("x", vec![2, 3, 5, 6]), ("w", vec![4, 3, k, k]), ("b", vec![4])], 7);
        check_params(store, |g| {
            let (x, w, b) = (g.param(ids[0]), g.param(ids[1]), g.param(ids[2]));
            let y = g.conv2d(x, w, Some(b), stride, pad);
            readout(g, y, 1)
        });
    }
}

#[test]
fn linear_bmm_softmax_gradients() {
    let (store, ids) = store_with(
        &[("x", vec![2, 3, 4]), ("w", vec![4, 5]), ("b", vec![5]), ("k", vec![2, 6, 5]), ("v", vec![6, 3])],
        11,
    );
    check_params(store, |g| {
        let x = g.param(ids[0]);
        let (w, b) = (g.param(ids[1]), g.param(ids[2]));
        let q = g.linear(x, w, Some(b));
        let k = g.param(ids[3]);
        let s = g.bmm(q, k, true);
        let s = g.scale(s, 0.5);
        let a = g.softmax(s);
        let v = g.param(ids[4]);
        let o = g.bmm(a, v, false);
        readout(g, o, 2)
    });
}

#[test]
fn normalisation_gradients() {
    let (store, ids) = store_with(
        &[("x", vec![2, 4, 3, 3]), ("g", vec![4]), ("b", vec![4]), ("lg", vec![9]), ("lb", vec![9])],
        3,
    );
    check_params(store, |g| {
        let x = g.param(ids[0]);
        let (gg, gb) = (g.param(ids[1]), g.param(ids[2]));
        let y = g.group_norm(x, gg, gb, 2, 1e-5);
        let t = g.reshape(y, &[8, 9]);
        let (lg, lb) = (g.param(ids[3]), g.param(ids[4]));
        let z = g.layer_norm(t, lg, lb, 1e-5);
        let z = g.gelu(z);
        readout(g, z, 3)
    });
}

#[test]
fn shape_op_gradients() {
    let (store, ids) = store_with(&[("x", vec![2, 3, 4, 5]), ("y", vec![2, 2, 4, 5]), ("c", vec![3])], 5);
    check_params(store, |g| {
        let x = g.param(ids[0]);
        let y = g.param(ids[1]);
        let cat = g.concat(x, y, 1);
        let c = g.param(ids[2]);
        let n = g.narrow(cat, 1, 1, 3);
        let n = g.add_bias(n, c, 1);
        let p = g.permute(n, &[0, 2, 3, 1]);
        let r = g.reshape(p, &[2, 20, 3]);
        let rb = g.narrow(r, 0, 1, 1);
        let rb = g.reshape(rb, &[20, 3]);
        let bc = g.broadcast(rb, 2);
        let s = g.add(r, bc);
        let up = g.reshape(s, &[2, 4, 5, 3]);
        let up = g.permute(up, &[0, 3, 1, 2]);
        let up = g.resize_bilinear(up, 9, 7);
        let down = g.resize_bilinear(up, 2, 3);
        let gp = g.global_avg_pool(up);
        let gp = g.sigmoid(gp);
        let sc = g.scale_channels(down, gp);
        let sc = g.relu(sc);
        readout(g, sc, 4)
    });
}

#[test]
fn loss_op_gradients() {
    let (store, ids) = store_with(&[("l", vec![3, 8]), ("c", vec![5, 2])], 9);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let targets: Vec<f64> = (0..16).map(|_| if rng.gen_bool(0.5) { 1.0 } else { 0.0 }).collect();
    check_params(store, |g| {
        let l = g.param(ids[0]);
        let rows = g.gather_rows(l, &[2, 0]);
        let bce = g.sigmoid_bce(rows, targets.clone());
        let dice = g.dice_loss(rows, targets.clone());
        let c = g.param(ids[1]);
        let ce = g.weighted_cross_entropy(c, vec![0, 1, 1, 0, 1], &[1.0, 0.1]);
        let a = g.add(bce, dice);
        let a = g.scale(a, 5.0);
        let ce = g.scale(ce, 2.0);
        let t = g.add(a, ce);
        let m = g.mean_all(l);
        g.add(t, m)
    });
}

#[test]
fn frozen_params_get_no_gradient() {
    let mut store = ParamStore::<f64>::new();
    let a = store.add("a".into(), vec![2], vec![1.0, 2.0], true);
    let b = store.add("b".into(), vec![2], vec![3.0, 4.0], false);
    let mut g = Graph::new(&store);
    let (va, vb) = (g.param(a), g.param(b));
    let p = g.mul(va, vb);
    let s = g.sum_all(p);
    let grads = g.backward(s);
    assert_eq!(grads.param(a).unwrap(), &[3.0, 4.0]);
    assert!(grads.param(b).is_none());
}

#[test]
fn inference_graph_records_no_gradient() {
    let mut store = ParamStore::<f32>::new();
    let a = store.add("a".into(), vec![1], vec![1.0], true);
    let mut g = Graph::inference(&store);
    let va = g.param(a);
    let s = g.sum_all(va);
    assert!(!g.requires_grad(s));
    assert!(g.backward(s).param(a).is_none());
}

#[test]
fn dice_and_bce_values() {
    let store = ParamStore::<f64>::new();
    let mut g = Graph::inference(&store);
    // saturated logits reproduce the probabilities 1 / 0 exactly enough
    let l = g.input(vec![40.0; 16], &[1, 16]);
    let d = g.dice_loss(l, vec![1.0; 16]);
    assert!(g.value(d)[0].abs() < 1e-12);
    let l = g.input(vec![-40.0; 16], &[1, 16]);
    let d = g.dice_loss(l, vec![1.0; 16]);
    assert!((g.value(d)[0] - (1.0 - 1.0 / 17.0)).abs() < 1e-12);
    let b = g.sigmoid_bce(l, vec![0.0; 16]);
    assert!(g.value(b)[0] < 1e-12);
}

#[test]
fn permute_map_roundtrip() {
    let shape = [2, 3, 4];
    let m = permute_map(&shape, &[2, 0, 1]);
    // output [4, 2, 3]: element (k, i, j) reads input (i, j, k)
    assert_eq!(m[0], 0);
    assert_eq!(m[1], 4);
    assert_eq!(m[6], 1);
    let mut sorted = m.clone();
    sorted.sort_unstable();
    assert_eq!(sorted, (0..24).collect::<Vec<_>>());
}
