mod common;

use common::*;
use rand::seq::IteratorRandom;
use rand::Rng;
use tuckerfuse::autodiff::{Array, Graph, PoolKind, Var};
use tuckerfuse::degradation::{even_ranges, simulate, srf_from_ranges, SpatialDegradation};
use tuckerfuse::network::CtfnConfig;
use tuckerfuse::train::{TrainConfig, Trainer};

fn rand_array(seed: u64, shape: &[usize]) -> Array<f64> {
    let mut r = rng(seed);
    let n = shape.iter().product();
    Array::new(shape.to_vec(), (0..n).map(|_| r.random_range(-1.0..1.0)).collect())
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[test]
fn deconv_is_adjoint_of_strided_conv() {
    // conv: [C,H,W] -> [O,H/2,W/2] with w [O,C,2,2]; deconv with the same
    // array read as [in=O, out=C, 2, 2] maps back.
    let (c, o) = (3, 4);
    let x = rand_array(1, &[c, 6, 8]);
    let y = rand_array(2, &[o, 3, 4]);
    let w = rand_array(3, &[o, c, 2, 2]);
    let mut g = Graph::<f64>::new();
    let (xv, yv, wv) = (g.input(x.clone()), g.input(y.clone()), g.input(w));
    let cx = g.conv2d(xv, wv, None, 2, 0);
    let dy = g.conv_transpose2d(yv, wv, None);
    assert_eq!(g.shape(dy), &[c, 6, 8]);
    let lhs = dot(g.value(cx).data(), y.data());
    let rhs = dot(x.data(), g.value(dy).data());
    assert!((lhs - rhs).abs() < 1e-10, "{lhs} vs {rhs}");
}

#[test]
fn deconv_stamps_kernel_at_delta() {
    let mut x = Array::<f64>::zeros(&[1, 3, 3]);
    x.data_mut()[4] = 1.0; // (1, 1)
    let k = Array::new(vec![1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]);
    let mut g = Graph::new();
    let (xv, kv) = (g.input(x), g.input(k));
    let out = g.conv_transpose2d(xv, kv, None);
    let v = g.value(out);
    assert_eq!(v.shape(), &[1, 6, 6]);
    for r in 0..6 {
        for c in 0..6 {
            let want = if (2..4).contains(&r) && (2..4).contains(&c) {
                [1.0, 2.0, 3.0, 4.0][(r - 2) * 2 + (c - 2)]
            } else {
                0.0
            };
            assert_eq!(v.data()[r * 6 + c], want);
        }
    }
}

#[test]
fn activation_and_pool_examples() {
    let mut g = Graph::<f64>::new();
    let a = g.input(Array::new(vec![3], vec![-1.0, 0.0, 2.0]));
    let r = g.relu(a);
    let s = g.sigmoid(a);
    assert_eq!(g.value(r).data(), &[0.0, 0.0, 2.0]);
    assert_eq!(g.value(s).data()[1], 0.5);

    let x = g.input(Array::new(vec![1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]));
    let avg = g.global_pool(x, PoolKind::Avg);
    let max = g.global_pool(x, PoolKind::Max);
    assert_eq!(g.value(avg).data(), &[2.5]);
    assert_eq!(g.value(max).data(), &[4.0]);

    let two = g.input(Array::new(vec![2, 1, 2], vec![0.2, 0.2, 0.8, 0.8]));
    let ca = g.channel_pool(two, PoolKind::Avg);
    let cm = g.channel_pool(two, PoolKind::Max);
    assert_eq!(g.shape(ca), &[1, 1, 2]);
    assert!(g.value(ca).data().iter().all(|v| (v - 0.5).abs() < 1e-15));
    assert_eq!(g.value(cm).data(), &[0.8, 0.8]);
    let one = g.input(Array::new(vec![1, 1, 3], vec![0.1, -0.4, 0.9]));
    let oa = g.channel_pool(one, PoolKind::Avg);
    let om = g.channel_pool(one, PoolKind::Max);
    assert_eq!(g.value(oa).data(), &[0.1, -0.4, 0.9]);
    assert_eq!(g.value(om).data(), &[0.1, -0.4, 0.9]);
}

#[test]
fn normalize_of_constant_channel_is_shift() {
    let mut g = Graph::<f64>::new();
    let x = g.input(Array::filled(&[2, 3, 3], 4.2));
    let sc = g.input(Array::new(vec![2], vec![1.5, -2.0]));
    let sh = g.input(Array::new(vec![2], vec![0.3, 0.7]));
    let y = g.normalize(x, sc, sh, 1e-5);
    let v = g.value(y).data();
    assert!(v[..9].iter().all(|&a| a == 0.3));
    assert!(v[9..].iter().all(|&a| a == 0.7));
}

#[test]
fn backward_is_linear_in_the_loss() {
    let x0 = rand_array(5, &[2, 5, 5]);
    let w0 = rand_array(6, &[3, 2, 3, 3]);
    let t0 = rand_array(7, &[3, 5, 5]);
    let build = |g: &mut Graph<f64>, parts: u8| -> (Var, Var, Var) {
        let x = g.variable(x0.clone());
        let w = g.variable(w0.clone());
        let t = g.input(t0.clone());
        let y = g.conv2d(x, w, None, 1, 1);
        let y = g.sigmoid(y);
        let a = g.mean_sq_diff(y, t);
        let p = g.global_pool(y, PoolKind::Max);
        let ones = g.input(Array::filled(&[3], 1.0));
        let b = g.mean_abs_diff(p, ones);
        let l = match parts {
            0 => a,
            1 => b,
            _ => g.add(a, b),
        };
        (x, w, l)
    };
    let grads = |parts| {
        let mut g = Graph::new();
        let (x, w, l) = build(&mut g, parts);
        let gr = g.backward(l);
        (gr.wrt(x).unwrap().to_f64(), gr.wrt(w).unwrap().to_f64())
    };
    let (xa, wa) = grads(0);
    let (xb, wb) = grads(1);
    let (xs, ws) = grads(2);
    let sum = |a: &[f64], b: &[f64]| -> Vec<f64> { a.iter().zip(b).map(|(p, q)| p + q).collect() };
    assert!(max_abs(&xs, &sum(&xa, &xb)) < 1e-14);
    assert!(max_abs(&ws, &sum(&wa, &wb)) < 1e-14);
}

/// 16 random scalars of the full network, joint loss with every term on,
/// 64-bit central differences.
#[test]
fn joint_loss_probe_matches_finite_differences() {
    let z = positive_cube((8, 8, 6), 3);
    let sp = SpatialDegradation::gaussian(8, 8, 2, 1.0).unwrap();
    let sr = srf_from_ranges(&even_ranges(6, 3).unwrap(), 6).unwrap();
    let pair = simulate(&z, &sp, &sr, None, 0).unwrap();
    let mut nc = CtfnConfig::from_inputs(pair.lr_hsi.dims(), pair.hr_msi.dims()).unwrap();
    nc.channels = 8;
    nc.core_dims = (6, 6, 4);
    let mut cfg = TrainConfig::with_epochs(10);
    cfg.knn_k = 2;
    cfg.seed = 12;
    let mut t = Trainer::<f64>::new(&pair.lr_hsi, &pair.hr_msi, nc, cfg).unwrap();
    // zero-initialized biases put dead pixels exactly on ReLU kinks; a few
    // optimizer steps move the point off them
    for _ in 0..3 {
        t.step().unwrap();
    }
    let (g, _, l) = t.forward();
    let grads = g.backward(l.total).for_store(t.network().store());

    let ids: Vec<_> = t.network().store().ids().collect();
    let mut r = rng(77);
    let mut picks = Vec::new();
    // one scalar from 16 distinct tensors
    for &id in ids.iter().choose_multiple(&mut r, 16) {
        let n = t.network().store().value(id).len();
        picks.push((id, r.random_range(0..n)));
    }
    let loss = |t: &Trainer<f64>| {
        let (g, _, l) = t.forward();
        g.scalar(l.total)
    };
    let h = 1e-5;
    for (id, k) in picks {
        let orig = t.network().store().value(id).data()[k];
        t.network_mut().store_mut().value_mut(id).data_mut()[k] = orig + h;
        let up = loss(&t);
        t.network_mut().store_mut().value_mut(id).data_mut()[k] = orig - h;
        let down = loss(&t);
        t.network_mut().store_mut().value_mut(id).data_mut()[k] = orig;
        let num = (up - down) / (2.0 * h);
        let ana = grads[id.index()].data()[k];
        let scale = ana.abs().max(num.abs()).max(1e-6);
        let rel = (ana - num).abs() / scale;
        let name = t.network().store().name(id).to_string();
        assert!(rel < 1e-4, "{name}[{k}]: analytic {ana:e} numeric {num:e} rel {rel:e}");
    }
}
