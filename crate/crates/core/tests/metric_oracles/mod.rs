//! Loop-level reference implementations of the quality indices.

#![allow(dead_code, clippy::needless_range_loop)]

use crate::common::*;
use rand::Rng;
use tuckerfuse::tensor::HyperCube;

pub fn noisy_pair(seed: u64) -> (HyperCube, HyperCube) {
    let r = positive_cube((16, 16, 8), seed);
    let mut g = rng(seed + 100);
    // uniform noise with std 0.02
    let a = 0.02 * 3f64.sqrt();
    let f = HyperCube::new(r.dims(), r.data().iter().map(|v| v + g.random_range(-a..a)).collect()).unwrap();
    (r, f)
}

pub fn o_rmse(r: &HyperCube, f: &HyperCube) -> f64 {
    let (w, h, s) = r.dims();
    let mut acc = 0.0;
    for i in 0..w {
        for j in 0..h {
            for b in 0..s {
                acc += (r.get(i, j, b) - f.get(i, j, b)).powi(2);
            }
        }
    }
    (acc / (w * h * s) as f64).sqrt()
}

pub fn o_band_rmse(r: &HyperCube, f: &HyperCube, b: usize) -> f64 {
    let (w, h, _) = r.dims();
    let mut acc = 0.0;
    for i in 0..w {
        for j in 0..h {
            acc += (r.get(i, j, b) - f.get(i, j, b)).powi(2);
        }
    }
    (acc / (w * h) as f64).sqrt()
}

pub fn o_psnr(r: &HyperCube, f: &HyperCube) -> f64 {
    let (w, h, s) = r.dims();
    let mut total = 0.0;
    for b in 0..s {
        let mut peak = f64::MIN;
        for i in 0..w {
            for j in 0..h {
                peak = peak.max(r.get(i, j, b));
            }
        }
        total += 10.0 * (peak * peak / o_band_rmse(r, f, b).powi(2)).log10();
    }
    total / s as f64
}

pub fn o_sam(r: &HyperCube, f: &HyperCube) -> f64 {
    let (w, h, s) = r.dims();
    let mut total = 0.0;
    for i in 0..w {
        for j in 0..h {
            let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
            for b in 0..s {
                let (x, y) = (r.get(i, j, b), f.get(i, j, b));
                dot += x * y;
                na += x * x;
                nb += y * y;
            }
            total += (dot / (na.sqrt() * nb.sqrt())).clamp(-1.0, 1.0).acos().to_degrees();
        }
    }
    total / (w * h) as f64
}

pub fn o_ergas(r: &HyperCube, f: &HyperCube, ratio: usize) -> f64 {
    let (w, h, s) = r.dims();
    let mut acc = 0.0;
    for b in 0..s {
        let mut mu = 0.0;
        for i in 0..w {
            for j in 0..h {
                mu += r.get(i, j, b);
            }
        }
        mu /= (w * h) as f64;
        acc += (o_band_rmse(r, f, b) / mu).powi(2);
    }
    100.0 / ratio as f64 * (acc / s as f64).sqrt()
}

/// Weighted window moments computed directly, two-pass.
pub fn window_moments(r: &HyperCube, f: &HyperCube, b: usize, i0: usize, j0: usize, wts: &[Vec<f64>]) -> [f64; 5] {
    let (n, m) = (wts.len(), wts[0].len());
    let (mut mx, mut my) = (0.0, 0.0);
    for u in 0..n {
        for v in 0..m {
            mx += wts[u][v] * r.get(i0 + u, j0 + v, b);
            my += wts[u][v] * f.get(i0 + u, j0 + v, b);
        }
    }
    let (mut vx, mut vy, mut cxy) = (0.0, 0.0, 0.0);
    for u in 0..n {
        for v in 0..m {
            let (dx, dy) = (r.get(i0 + u, j0 + v, b) - mx, f.get(i0 + u, j0 + v, b) - my);
            vx += wts[u][v] * dx * dx;
            vy += wts[u][v] * dy * dy;
            cxy += wts[u][v] * dx * dy;
        }
    }
    [mx, my, vx, vy, cxy]
}

pub fn o_windowed(
    r: &HyperCube,
    f: &HyperCube,
    wts: &[Vec<f64>],
    q: impl Fn(&HyperCube, &HyperCube, usize, [f64; 5]) -> f64,
) -> f64 {
    let (w, h, s) = r.dims();
    let (n, m) = (wts.len(), wts[0].len());
    let mut total = 0.0;
    for b in 0..s {
        let mut band = 0.0;
        let mut count = 0;
        for i0 in 0..=w - n {
            for j0 in 0..=h - m {
                band += q(r, f, b, window_moments(r, f, b, i0, j0, wts));
                count += 1;
            }
        }
        total += band / count as f64;
    }
    total / s as f64
}

pub fn o_ssim(r: &HyperCube, f: &HyperCube) -> f64 {
    let g: Vec<f64> = (0..11)
        .map(|i| (-((i as f64 - 5.0).powi(2)) / (2.0 * 1.5 * 1.5)).exp())
        .collect();
    let gs: f64 = g.iter().sum();
    let wts: Vec<Vec<f64>> = (0..11)
        .map(|u| (0..11).map(|v| g[u] * g[v] / (gs * gs)).collect())
        .collect();
    o_windowed(r, f, &wts, |r, f, b, [mx, my, vx, vy, cxy]| {
        let (w, h, _) = r.dims();
        let mut lo = f64::MAX;
        let mut hi = f64::MIN;
        for i in 0..w {
            for j in 0..h {
                for v in [r.get(i, j, b), f.get(i, j, b)] {
                    lo = lo.min(v);
                    hi = hi.max(v);
                }
            }
        }
        let l = hi - lo;
        let (c1, c2) = ((0.01 * l).powi(2), (0.03 * l).powi(2));
        ((2.0 * mx * my + c1) * (2.0 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2))
    })
}

pub fn o_uiqi(r: &HyperCube, f: &HyperCube) -> f64 {
    let wts = vec![vec![1.0 / 64.0; 8]; 8];
    o_windowed(r, f, &wts, |_, _, _, [mx, my, vx, vy, cxy]| {
        4.0 * cxy * mx * my / ((vx + vy) * (mx * mx + my * my))
    })
}
