//! Deterministic toy scene: a linear mixture of four smooth endmember
//! spectra with spatially varying abundances.

use crate::error::{Error, Result};
use crate::tensor::HyperCube;

pub const TOY_DIMS: (usize, usize, usize) = (32, 32, 16);
pub const ENDMEMBERS: usize = 4;

/// Reflectance-like spectrum of endmember `e` at band `b` of `bands`.
pub fn endmember(e: usize, b: usize, bands: usize) -> f64 {
    let t = if bands > 1 { b as f64 / (bands - 1) as f64 } else { 0.0 };
    let bump = |c: f64, w: f64| (-((t - c) / w).powi(2)).exp();
    match e % ENDMEMBERS {
        // vegetation-like red edge
        0 => 0.05 + 0.5 / (1.0 + (-(t - 0.55) * 18.0).exp()) + 0.08 * bump(0.3, 0.08),
        // soil: slow ramp
        1 => 0.15 + 0.45 * t,
        // water: decays with wavelength
        2 => 0.3 * (-3.0 * t).exp() + 0.02,
        // bright material with an absorption dip
        _ => 0.7 - 0.35 * bump(0.65, 0.12),
    }
}

/// Abundance of endmember `e` at pixel `(i, j)`; the four sum to one.
pub fn abundance(e: usize, i: usize, j: usize, w: usize, h: usize) -> f64 {
    let logits = logits(i, j, w, h);
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let ex: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
    ex[e % ENDMEMBERS] / ex.iter().sum::<f64>()
}

fn logits(i: usize, j: usize, w: usize, h: usize) -> [f64; ENDMEMBERS] {
    let x = (i as f64 + 0.5) / w as f64;
    let y = (j as f64 + 0.5) / h as f64;
    let pi = std::f64::consts::PI;
    // coarse regions plus stripes finer than a 4x4 low-resolution pixel
    [
        4.0 * (1.0 - ((x - 0.25).powi(2) + (y - 0.3).powi(2)).sqrt() * 3.0),
        3.0 * (x - y) + 1.5 * (2.0 * pi * 5.3 * y).sin(),
        4.0 * (1.0 - ((x - 0.75).powi(2) + (y - 0.7).powi(2)).sqrt() * 3.5) + 1.2 * (2.0 * pi * 6.1 * x).cos(),
        2.0 * (2.0 * pi * (3.7 * x + 2.9 * y)).sin() + 1.0 * (2.0 * pi * 7.7 * x * y).cos(),
    ]
}

/// Mixture cube of the given size.
pub fn mixture(dims: (usize, usize, usize)) -> Result<HyperCube> {
    let (w, h, s) = dims;
    if w == 0 || h == 0 || s == 0 {
        return Err(Error::arg(format!("empty scene dims {w}x{h}x{s}")));
    }
    let spectra: Vec<Vec<f64>> = (0..ENDMEMBERS)
        .map(|e| (0..s).map(|b| endmember(e, b, s)).collect())
        .collect();
    let ab: Vec<[f64; ENDMEMBERS]> = (0..w * h)
        .map(|p| {
            let (i, j) = (p / h, p % h);
            std::array::from_fn(|e| abundance(e, i, j, w, h))
        })
        .collect();
    Ok(HyperCube::from_fn(dims, |i, j, b| {
        let a = &ab[i * h + j];
        (0..ENDMEMBERS).map(|e| a[e] * spectra[e][b]).sum()
    }))
}

/// The 32x32x16 toy reference scene.
pub fn toy_scene() -> HyperCube {
    mixture(TOY_DIMS).expect("toy dims are valid")
}
