#![allow(clippy::needless_range_loop)]

mod common;

use common::*;
use proptest::prelude::*;
use tuckerfuse::autodiff::{Array, Graph};
use tuckerfuse::manifold::*;
use tuckerfuse::tensor::{unfold, DenseMatrix, HyperCube, Mode};

fn check_laplacian(g: &LaplacianGraph) {
    let (a, l) = (g.adjacency(), g.laplacian());
    let n = g.size();
    for i in 0..n {
        assert_eq!(a.get(i, i), 0.0);
        let mut row = 0.0;
        for j in 0..n {
            assert_eq!(a.get(i, j), a.get(j, i));
            assert_eq!(l.get(i, j), l.get(j, i));
            assert!((0.0..=1.0).contains(&a.get(i, j)));
            row += l.get(i, j);
        }
        assert!(row.abs() < 1e-10, "row {i} sums to {row}");
    }
    let ev = jacobi_eigenvalues(l);
    assert!(*ev.last().unwrap() >= -1e-10, "min eigenvalue {}", ev.last().unwrap());
}

fn half_pair_sum(a: &DenseMatrix, f: &DenseMatrix) -> f64 {
    let n = a.rows();
    let mut s = 0.0;
    for i in 0..n {
        for j in 0..n {
            let d: f64 = f.row(i).iter().zip(f.row(j)).map(|(x, y)| (x - y).powi(2)).sum();
            s += a.get(i, j) * d;
        }
    }
    0.5 * s
}

/// Independent all-pairs construction of the same graph.
fn all_pairs_oracle(x: &DenseMatrix, k: usize, sigma: f64) -> DenseMatrix {
    let n = x.rows();
    let d = |i: usize, j: usize| -> f64 { x.row(i).iter().zip(x.row(j)).map(|(a, b)| (a - b).powi(2)).sum() };
    let mut nn = vec![vec![false; n]; n];
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            // j is a neighbor of i iff fewer than k others beat it
            let better = (0..n)
                .filter(|&m| m != i && m != j)
                .filter(|&m| d(i, m) < d(i, j) || (d(i, m) == d(i, j) && m < j))
                .count();
            nn[i][j] = better < k;
        }
    }
    DenseMatrix::from_fn(n, n, |i, j| {
        if nn[i][j] || nn[j][i] {
            (-d(i, j) / (sigma * sigma)).exp()
        } else {
            0.0
        }
    })
}

#[test]
fn matches_all_pairs_oracle() {
    let x = random_matrix(6, 4, 3);
    let g = knn_adjacency(&x, 2, Sigma::Fixed(0.9)).unwrap();
    let o = all_pairs_oracle(&x, 2, 0.9);
    assert_eq!(g.adjacency(), &o);
    for i in 0..6 {
        let deg: f64 = o.row(i).iter().sum();
        assert_eq!(g.degree()[i], deg);
        for j in 0..6 {
            let want = if i == j { deg - o.get(i, j) } else { -o.get(i, j) };
            assert_eq!(g.laplacian().get(i, j), want);
        }
    }
}

#[test]
fn trace_identity_on_random_factors() {
    let x = random_matrix(5, 3, 8);
    let g = knn_adjacency(&x, 2, Sigma::Auto).unwrap();
    let f = random_matrix(5, 3, 9);
    let t = g.trace_quad(&f).unwrap();
    assert!((t - half_pair_sum(g.adjacency(), &f)).abs() < 1e-10);
    let constant = DenseMatrix::from_fn(5, 3, |_, j| j as f64 + 0.5);
    assert!(g.trace_quad(&constant).unwrap().abs() < 1e-12);
    assert!(g.trace_quad(&random_matrix(4, 3, 1)).is_err());
}

#[test]
fn trace_gradient_is_two_lf() {
    let x = random_matrix(6, 2, 1);
    let gr = knn_adjacency(&x, 3, Sigma::Auto).unwrap();
    let f = random_matrix(6, 3, 2);
    let mut g = Graph::<f64>::new();
    let fv = g.variable(Array::new(vec![6, 3], f.data().to_vec()));
    let lv = g.input(gr.laplacian_array());
    let t = g.trace_quad(fv, lv);
    let grad = g.backward(t).wrt(fv).unwrap().to_f64();
    let lf = gr.laplacian().matmul(&f).unwrap();
    let two_lf: Vec<f64> = lf.data().iter().map(|v| 2.0 * v).collect();
    assert!(max_abs(&grad, &two_lf) < 1e-12);
    // and finite differences
    let h = 1e-4;
    for idx in 0..18 {
        let bump = |d: f64| {
            let mut m = f.clone();
            m.set(idx / 3, idx % 3, f.get(idx / 3, idx % 3) + d);
            gr.trace_quad(&m).unwrap()
        };
        let num = (bump(h) - bump(-h)) / (2.0 * h);
        let rel = (num - grad[idx]).abs() / grad[idx].abs().max(num.abs()).max(1.0);
        assert!(rel < 1e-6, "entry {idx}: {num} vs {}", grad[idx]);
    }
}

#[test]
fn graphs_match_explicit_unfoldings() {
    let x = random_cube((4, 3, 7), 5);
    let gs = spectral_graph_from_lr_hsi(&x, 3, Sigma::Auto, 1).unwrap();
    assert_eq!(gs, knn_adjacency(&unfold(&x, Mode::Band), 3, Sigma::Auto).unwrap());
    let y = random_cube((9, 6, 3), 6);
    let (lw, lh) = spatial_graphs_from_hr_msi(&y, 2, Sigma::Auto).unwrap();
    assert_eq!(lw, knn_adjacency(&unfold(&y, Mode::Width), 2, Sigma::Auto).unwrap());
    assert_eq!(lh, knn_adjacency(&unfold(&y, Mode::Height), 2, Sigma::Auto).unwrap());
    assert_eq!((lw.size(), lh.size()), (9, 6));
}

#[test]
fn identical_bands_and_rows_get_unit_edges() {
    let x = HyperCube::from_fn(
        (3, 3, 4),
        |i, j, b| if b == 3 { (i + 2 * j) as f64 } else { (i * j + b) as f64 },
    );
    let x = HyperCube::from_fn(
        (3, 3, 4),
        |i, j, b| if b == 1 { x.get(i, j, 3) } else { x.get(i, j, b) },
    );
    let g = spectral_graph_from_lr_hsi(&x, 1, Sigma::Fixed(1.0), 1).unwrap();
    assert_eq!(g.adjacency().get(1, 3), 1.0);
    let y = HyperCube::from_fn((4, 5, 2), |i, j, b| {
        if i == 2 {
            (j + b) as f64
        } else {
            (i * 7 + j * j + b) as f64
        }
    });
    let y = HyperCube::from_fn(
        (4, 5, 2),
        |i, j, b| if i == 0 { y.get(2, j, b) } else { y.get(i, j, b) },
    );
    let (lw, _) = spatial_graphs_from_hr_msi(&y, 1, Sigma::Fixed(1.0)).unwrap();
    assert_eq!(lw.adjacency().get(0, 2), 1.0);
}

#[test]
fn combined_loss_weights_terms() {
    let x = random_cube((4, 4, 6), 1);
    let y = random_cube((8, 8, 2), 2);
    let gr = ManifoldGraphs::build(&x, &y, 2, Sigma::Auto, 1).unwrap();
    let (s, w, h) = (random_matrix(6, 3, 3), random_matrix(8, 5, 4), random_matrix(8, 5, 5));
    let l = gr.loss(&s, &w, &h, 1e-3, 1e-2).unwrap();
    let want = 1e-3 * gr.spectral.trace_quad(&s).unwrap()
        + 1e-2 * (gr.width.trace_quad(&w).unwrap() + gr.height.trace_quad(&h).unwrap());
    assert!((l - want).abs() < 1e-14);
    assert!(l >= 0.0);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn laplacian_invariants(n in 3usize..12, d in 1usize..5, k in 1usize..6, fixed in prop::option::of(0.2f64..3.0), seed in any::<u64>()) {
        let k = k.min(n - 1);
        let x = random_matrix(n, d, seed);
        let sigma = fixed.map_or(Sigma::Auto, Sigma::Fixed);
        let g = knn_adjacency(&x, k, sigma).unwrap();
        check_laplacian(&g);
        let f = random_matrix(n, 3, seed ^ 1);
        let t = g.trace_quad(&f).unwrap();
        prop_assert!((t - half_pair_sum(g.adjacency(), &f)).abs() < 1e-10);
        prop_assert!(t >= -1e-12);
        // deterministic
        prop_assert_eq!(knn_adjacency(&x, k, sigma).unwrap(), g);
    }
}
