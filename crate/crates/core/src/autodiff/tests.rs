use super::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rand_array(rng: &mut ChaCha8Rng, shape: &[usize]) -> Array<f64> {
    let n = shape.iter().product();
    Array::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
}

/// Compares analytic gradients of `build` (reduced to a scalar through a
/// squared distance to a fixed random target) with central differences.
fn check<F>(inputs: Vec<Array<f64>>, build: F, tol: f64)
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Var,
{
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let probe = {
        let mut g = Graph::new();
        let vs: Vec<Var> = inputs.iter().map(|a| g.input(a.clone())).collect();
        let out = build(&mut g, &vs);
        g.value(out).shape().to_vec()
    };
    let target = rand_array(&mut rng, &probe);
    let eval = |ins: &[Array<f64>]| -> f64 {
        let mut g = Graph::new();
        let vs: Vec<Var> = ins.iter().map(|a| g.input(a.clone())).collect();
        let out = build(&mut g, &vs);
        let t = g.input(target.clone());
        let l = g.mean_sq_diff(out, t);
        g.scalar(l)
    };
    let mut g = Graph::new();
    let vs: Vec<Var> = inputs.iter().map(|a| g.variable(a.clone())).collect();
    let out = build(&mut g, &vs);
    let t = g.input(target.clone());
    let l = g.mean_sq_diff(out, t);
    let grads = g.backward(l);
    let h = 1e-4;
    for (k, v) in vs.iter().enumerate() {
        let analytic = grads
            .wrt(*v)
            .cloned()
            .unwrap_or_else(|| Array::zeros(inputs[k].shape()));
        for i in 0..inputs[k].len() {
            let mut plus = inputs.clone();
            plus[k].data_mut()[i] += h;
            let mut minus = inputs.clone();
            minus[k].data_mut()[i] -= h;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
            let a = analytic.data()[i];
            let err = (a - numeric).abs() / 1f64.max(a.abs()).max(numeric.abs());
            assert!(
                err < tol,
                "input {k} elem {i}: analytic {a} numeric {numeric} (err {err})"
            );
        }
    }
}

fn rng() -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(7)
}

#[test]
fn grad_conv_padded() {
    let mut r = rng();
    let ins = vec![
        rand_array(&mut r, &[2, 5, 4]),
        rand_array(&mut r, &[3, 2, 3, 3]),
        rand_array(&mut r, &[3]),
    ];
    check(ins, |g, v| g.conv2d(v[0], v[1], Some(v[2]), 1, 1), 1e-6);
}

#[test]
fn grad_conv_strided() {
    let mut r = rng();
    let ins = vec![rand_array(&mut r, &[2, 6, 6]), rand_array(&mut r, &[2, 2, 2, 2])];
    check(ins, |g, v| g.conv2d(v[0], v[1], None, 2, 0), 1e-6);
}

#[test]
fn grad_conv_transpose() {
    let mut r = rng();
    let ins = vec![
        rand_array(&mut r, &[3, 2, 3]),
        rand_array(&mut r, &[3, 2, 2, 2]),
        rand_array(&mut r, &[2]),
    ];
    check(ins, |g, v| g.conv_transpose2d(v[0], v[1], Some(v[2])), 1e-6);
}

#[test]
fn grad_linear_relu_sigmoid() {
    let mut r = rng();
    let ins = vec![
        rand_array(&mut r, &[5]),
        rand_array(&mut r, &[3, 5]),
        rand_array(&mut r, &[3]),
    ];
    check(
        ins,
        |g, v| {
            let y = g.linear(v[0], v[1], Some(v[2]));
            let y = g.relu(y);
            g.sigmoid(y)
        },
        1e-6,
    );
}

#[test]
fn grad_elementwise_and_broadcast() {
    let mut r = rng();
    let ins = vec![
        rand_array(&mut r, &[3, 2, 2]),
        rand_array(&mut r, &[3, 2, 2]),
        rand_array(&mut r, &[3]),
        rand_array(&mut r, &[1, 2, 2]),
    ];
    check(
        ins,
        |g, v| {
            let a = g.mul(v[0], v[1]);
            let a = g.add(a, v[0]);
            let a = g.mul_channel(a, v[2]);
            let o = g.outer(v[2], v[3]);
            let a = g.mul(a, o);
            g.scale(a, 0.7)
        },
        1e-6,
    );
}

#[test]
fn grad_pools_and_concat() {
    let mut r = rng();
    let ins = vec![rand_array(&mut r, &[3, 3, 2])];
    check(
        ins,
        |g, v| {
            let a = g.channel_pool(v[0], PoolKind::Avg);
            let m = g.channel_pool(v[0], PoolKind::Max);
            let cat = g.concat(a, m);
            let ga = g.global_pool(v[0], PoolKind::Avg);
            let gm = g.global_pool(v[0], PoolKind::Max);
            let s = g.add(ga, gm);
            let o = g.outer(s, a);
            let cat2 = g.concat(cat, o);
            g.relu(cat2)
        },
        1e-6,
    );
}

#[test]
fn grad_normalize() {
    let mut r = rng();
    let ins = vec![
        rand_array(&mut r, &[2, 3, 3]),
        rand_array(&mut r, &[2]),
        rand_array(&mut r, &[2]),
    ];
    check(ins, |g, v| g.normalize(v[0], v[1], v[2], 1e-5), 1e-5);
}

#[test]
fn grad_mode_apply_all_axes() {
    let mut r = rng();
    let ins = vec![
        rand_array(&mut r, &[3, 4, 2]),
        rand_array(&mut r, &[2, 3]),
        rand_array(&mut r, &[5, 4]),
        rand_array(&mut r, &[3, 2]),
    ];
    check(
        ins,
        |g, v| {
            let a = g.mode_apply(v[0], v[1], Axis::Channel);
            let a = g.mode_apply(a, v[2], Axis::Row);
            g.mode_apply(a, v[3], Axis::Col)
        },
        1e-6,
    );
}

#[test]
fn grad_matmul_trace_quad() {
    let mut r = rng();
    let ins = vec![
        rand_array(&mut r, &[4, 3]),
        rand_array(&mut r, &[3, 2]),
        rand_array(&mut r, &[4, 4]),
    ];
    check(
        ins,
        |g, v| {
            let f = g.matmul(v[0], v[1]);
            let t = g.trace_quad(f, v[2]);
            let s = g.scale(t, 0.1);
            let fs = g.mean_abs_diff(v[0], v[0]);
            g.add(s, fs)
        },
        1e-6,
    );
}

#[test]
fn grad_psf_and_row_normalize() {
    let mut r = rng();
    let ins = vec![
        rand_array(&mut r, &[3]),
        Array::from_f64(vec![2, 3], &[0.4, 0.9, 0.2, 0.3, 0.1, 0.8]),
        rand_array(&mut r, &[6, 2]),
    ];
    check(
        ins,
        |g, v| {
            let p = g.psf_matrix(v[0], 6, 2, 1);
            let s = g.row_normalize_nonneg(v[1]);
            let a = g.matmul(p, v[2]);
            let st = g.matmul(a, s);
            g.sigmoid(st)
        },
        1e-6,
    );
}

#[test]
fn shared_parameter_accumulates() {
    let mut store = ParamStore::new();
    let w = store.add("w", Array::from_f64(vec![1], &[3.0]));
    let mut g = Graph::<f64>::new();
    let a = g.param(&store, w);
    let b = g.param(&store, w);
    assert_eq!(a, b);
    let y = g.mul(a, b);
    let z = g.input(Array::scalar(0.0));
    let l = g.mean_sq_diff(y, z);
    let grads = g.backward(l);
    // l = w^4, dl/dw = 4 w^3
    assert!((grads.param(w).unwrap().data()[0] - 108.0).abs() < 1e-9);
}

#[test]
fn sigmoid_stays_open_interval() {
    let mut g = Graph::<f32>::new();
    let x = g.input(Array::new(vec![4], vec![-200.0, -30.0, 30.0, 200.0]));
    let y = g.sigmoid(x);
    for &v in g.value(y).data() {
        assert!(v > 0.0 && v < 1.0, "{v}");
    }
}

#[test]
fn max_pool_ties_pick_first() {
    let mut g = Graph::<f64>::new();
    let x = g.variable(Array::from_f64(vec![2, 1, 2], &[1.0, 5.0, 5.0, 2.0]));
    let m = g.channel_pool(x, PoolKind::Max);
    let z = g.input(Array::zeros(&[1, 1, 2]));
    let l = g.mean_sq_diff(m, z);
    let gr = g.backward(l);
    // pixel 1 ties (5 vs 2 no tie); pixel 0: 1 vs 5 picks channel 1.
    let d = gr.wrt(x).unwrap().data().to_vec();
    assert_eq!(d[0], 0.0);
    assert!(d[2] != 0.0);
    let mut g = Graph::<f64>::new();
    let x = g.variable(Array::from_f64(vec![1, 1, 3], &[4.0, 4.0, 1.0]));
    let m = g.global_pool(x, PoolKind::Max);
    let z = g.input(Array::zeros(&[1]));
    let l = g.mean_sq_diff(m, z);
    let gr = g.backward(l);
    assert_eq!(gr.wrt(x).unwrap().data(), &[8.0, 0.0, 0.0]);
}

#[test]
fn non_finite_is_located() {
    let mut g = Graph::<f32>::new();
    let a = g.input(Array::new(vec![2], vec![1.0, 2.0]));
    let b = g.scale(a, f64::INFINITY);
    g.set_label(b, "boom");
    let report = g.first_non_finite().unwrap();
    assert!(report.starts_with("boom"), "{report}");
}

#[test]
fn conv_banded_matches_single_pass() {
    // A tall image forces the im2col path to run in several row bands.
    let mut r = rng();
    let x = rand_array(&mut r, &[4, 600, 300]);
    let w = rand_array(&mut r, &[2, 4, 3, 3]);
    let geom = kernels::ConvGeom::new(4, 600, 300, 2, 3, 3, 1, 1);
    let banded = kernels::conv_forward(x.data(), w.data(), None, &geom);
    let idx = |c: usize, y: usize, xx: usize| (c * 600 + y) * 300 + xx;
    for &(o, y, xx) in &[(0usize, 0usize, 0usize), (1, 599, 299), (0, 300, 17), (1, 433, 150)] {
        let mut s = 0.0;
        for c in 0..4 {
            for ky in 0..3 {
                for kx in 0..3 {
                    let (yy, xs) = (y as isize + ky as isize - 1, xx as isize + kx as isize - 1);
                    if yy >= 0 && xs >= 0 && yy < 600 && xs < 300 {
                        s += w.data()[((o * 4 + c) * 3 + ky) * 3 + kx] * x.data()[idx(c, yy as usize, xs as usize)];
                    }
                }
            }
        }
        let got = banded[(o * 600 + y) * 300 + xx];
        assert!((got - s).abs() < 1e-10, "{got} vs {s}");
    }
}
