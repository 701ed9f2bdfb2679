//! Full-reference quality indices for a fused cube against its ground truth.
//!
//! Conventions:
//! - RMSE over all elements.
//! - PSNR per band with the band's reference maximum as peak, averaged over
//!   bands; a perfect band reports [`PSNR_CAP`].
//! - SAM: mean per-pixel spectral angle in degrees. A zero spectrum has angle
//!   0 against another zero spectrum and 90° against anything else.
//! - ERGAS: `100 / ratio * sqrt(mean_b (RMSE_b / mean_b)²)`.
//! - SSIM per band: 11×11 Gaussian window (σ = 1.5), valid positions only,
//!   `C1 = (0.01 L)²`, `C2 = (0.03 L)²` with `L` the joint value range of the
//!   two bands (1 if both are constant and equal).
//! - UIQI per band: 8×8 sliding window, valid positions only.
//!
//! Windows shrink to the image size for images smaller than the window.

use crate::error::{Error, Result};
use crate::exec;
use crate::tensor::{DenseMatrix, HyperCube};

pub const PSNR_CAP: f64 = 300.0;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const UIQI_WINDOW: usize = 8;

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub rmse: f64,
    pub psnr: f64,
    pub sam: f64,
    pub ergas: f64,
    pub ssim: f64,
    pub uiqi: f64,
    pub psnr_per_band: Vec<f64>,
}

impl MetricsReport {
    pub const CSV_HEADER: &'static str = "rmse,psnr,sam,ergas,ssim,uiqi";

    pub fn csv(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.rmse, self.psnr, self.sam, self.ergas, self.ssim, self.uiqi
        )
    }
}

fn check_dims(reference: &HyperCube, fused: &HyperCube) -> Result<()> {
    if reference.dims() != fused.dims() {
        return Err(Error::shape(format!(
            "reference is {:?}, fused is {:?}",
            reference.dims(),
            fused.dims()
        )));
    }
    Ok(())
}

pub fn evaluate(reference: &HyperCube, fused: &HyperCube, ratio: usize) -> Result<MetricsReport> {
    check_dims(reference, fused)?;
    if ratio == 0 {
        return Err(Error::arg("ratio must be positive"));
    }
    let psnr_per_band = psnr_per_band(reference, fused);
    Ok(MetricsReport {
        rmse: rmse(reference, fused)?,
        psnr: psnr_per_band.iter().sum::<f64>() / psnr_per_band.len() as f64,
        sam: sam(reference, fused)?,
        ergas: ergas(reference, fused, ratio)?,
        ssim: ssim(reference, fused)?,
        uiqi: uiqi(reference, fused)?,
        psnr_per_band,
    })
}

pub fn rmse(reference: &HyperCube, fused: &HyperCube) -> Result<f64> {
    check_dims(reference, fused)?;
    Ok(band_mse(reference.data(), fused.data()).sqrt())
}

fn band_mse(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64
}

fn band_rmse(reference: &HyperCube, fused: &HyperCube) -> Vec<f64> {
    (0..reference.bands())
        .map(|b| band_mse(reference.band(b), fused.band(b)).sqrt())
        .collect()
}

fn psnr_per_band(reference: &HyperCube, fused: &HyperCube) -> Vec<f64> {
    band_rmse(reference, fused)
        .into_iter()
        .enumerate()
        .map(|(b, e)| {
            let peak = reference.band(b).iter().copied().fold(f64::NEG_INFINITY, f64::max);
            if e == 0.0 {
                PSNR_CAP
            } else {
                (20.0 * (peak / e).log10()).min(PSNR_CAP)
            }
        })
        .collect()
}

/// Mean PSNR over bands, in dB.
pub fn psnr(reference: &HyperCube, fused: &HyperCube) -> Result<f64> {
    check_dims(reference, fused)?;
    let p = psnr_per_band(reference, fused);
    Ok(p.iter().sum::<f64>() / p.len() as f64)
}

/// Per-band PSNR, in dB.
pub fn band_psnr(reference: &HyperCube, fused: &HyperCube) -> Result<Vec<f64>> {
    check_dims(reference, fused)?;
    Ok(psnr_per_band(reference, fused))
}

/// Spectral angle between two spectra, in degrees.
pub fn spectral_angle(a: &[f64], b: &[f64]) -> f64 {
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return if na == nb { 0.0 } else { 90.0 };
    }
    // 2·atan2(|u − v|, |u + v|) for unit u, v: stable near 0° and 180°
    let (mut d, mut s) = (0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (u, v) = (x / na, y / nb);
        d += (u - v) * (u - v);
        s += (u + v) * (u + v);
    }
    (2.0 * d.sqrt().atan2(s.sqrt())).to_degrees()
}

/// Per-pixel spectral angle map in degrees, `W x H`.
pub fn sam_map(reference: &HyperCube, fused: &HyperCube) -> Result<DenseMatrix> {
    check_dims(reference, fused)?;
    let (w, h, _) = reference.dims();
    Ok(DenseMatrix::from_fn(w, h, |i, j| {
        spectral_angle(&reference.spectrum(i, j), &fused.spectrum(i, j))
    }))
}

/// Per-pixel RMSE across bands, `W x H`.
pub fn rmse_map(reference: &HyperCube, fused: &HyperCube) -> Result<DenseMatrix> {
    check_dims(reference, fused)?;
    let (w, h, s) = reference.dims();
    Ok(DenseMatrix::from_fn(w, h, |i, j| {
        ((0..s)
            .map(|b| (reference.get(i, j, b) - fused.get(i, j, b)).powi(2))
            .sum::<f64>()
            / s as f64)
            .sqrt()
    }))
}

pub fn sam(reference: &HyperCube, fused: &HyperCube) -> Result<f64> {
    let m = sam_map(reference, fused)?;
    Ok(m.data().iter().sum::<f64>() / m.data().len() as f64)
}

pub fn ergas(reference: &HyperCube, fused: &HyperCube, ratio: usize) -> Result<f64> {
    check_dims(reference, fused)?;
    if ratio == 0 {
        return Err(Error::arg("ratio must be positive"));
    }
    let errs = band_rmse(reference, fused);
    let s = errs.len() as f64;
    let acc: f64 = errs
        .iter()
        .enumerate()
        .map(|(b, e)| {
            let band = reference.band(b);
            let mu = band.iter().sum::<f64>() / band.len() as f64;
            if *e == 0.0 {
                0.0
            } else {
                (e / mu).powi(2)
            }
        })
        .sum();
    Ok(100.0 / ratio as f64 * (acc / s).sqrt())
}

/// Normalized 1-D Gaussian taps.
fn gaussian_taps(n: usize, sigma: f64) -> Vec<f64> {
    let c = (n as f64 - 1.0) / 2.0;
    let t: Vec<f64> = (0..n)
        .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = t.iter().sum();
    t.into_iter().map(|v| v / s).collect()
}

/// Valid separable filtering of a `w x h` image (row-major, `h` fastest) with
/// `kw` taps along width and `kh` along height.
fn filter_valid(img: &[f64], w: usize, h: usize, kw: &[f64], kh: &[f64]) -> (Vec<f64>, usize, usize) {
    let ow = w - kw.len() + 1;
    let oh = h - kh.len() + 1;
    let mut tmp = vec![0.0; w * oh];
    for i in 0..w {
        for j in 0..oh {
            tmp[i * oh + j] = kh.iter().enumerate().map(|(t, k)| k * img[i * h + j + t]).sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for i in 0..ow {
        for j in 0..oh {
            out[i * oh + j] = kw.iter().enumerate().map(|(t, k)| k * tmp[(i + t) * oh + j]).sum();
        }
    }
    (out, ow, oh)
}

struct WindowStats {
    mx: Vec<f64>,
    my: Vec<f64>,
    vx: Vec<f64>,
    vy: Vec<f64>,
    cxy: Vec<f64>,
}

fn window_stats(x: &[f64], y: &[f64], w: usize, h: usize, kw: &[f64], kh: &[f64]) -> WindowStats {
    let f = |v: &[f64]| filter_valid(v, w, h, kw, kh).0;
    let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
    let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
    let xy: Vec<f64> = x.iter().zip(y).map(|(a, b)| a * b).collect();
    let (mx, my) = (f(x), f(y));
    let (sxx, syy, sxy) = (f(&xx), f(&yy), f(&xy));
    let n = mx.len();
    WindowStats {
        vx: (0..n).map(|i| sxx[i] - mx[i] * mx[i]).collect(),
        vy: (0..n).map(|i| syy[i] - my[i] * my[i]).collect(),
        cxy: (0..n).map(|i| sxy[i] - mx[i] * my[i]).collect(),
        mx,
        my,
    }
}

fn band_ssim(x: &[f64], y: &[f64], w: usize, h: usize) -> f64 {
    let kw = gaussian_taps(SSIM_WINDOW.min(w), SSIM_SIGMA);
    let kh = gaussian_taps(SSIM_WINDOW.min(h), SSIM_SIGMA);
    let lo = x.iter().chain(y).copied().fold(f64::INFINITY, f64::min);
    let hi = x.iter().chain(y).copied().fold(f64::NEG_INFINITY, f64::max);
    let l = if hi > lo { hi - lo } else { 1.0 };
    let (c1, c2) = ((0.01 * l).powi(2), (0.03 * l).powi(2));
    let st = window_stats(x, y, w, h, &kw, &kh);
    let n = st.mx.len();
    (0..n)
        .map(|i| {
            let (mx, my) = (st.mx[i], st.my[i]);
            ((2.0 * mx * my + c1) * (2.0 * st.cxy[i] + c2)) / ((mx * mx + my * my + c1) * (st.vx[i] + st.vy[i] + c2))
        })
        .sum::<f64>()
        / n as f64
}

/// Universal quality index of one window from its moments.
pub(crate) fn uiqi_window(mx: f64, my: f64, vx: f64, vy: f64, cxy: f64) -> f64 {
    let var_sum = vx + vy;
    let mean_sq = mx * mx + my * my;
    if var_sum == 0.0 && mean_sq != 0.0 {
        2.0 * mx * my / mean_sq
    } else if var_sum * mean_sq != 0.0 {
        (2.0 * cxy / var_sum) * (2.0 * mx * my / mean_sq)
    } else {
        1.0
    }
}

fn band_uiqi(x: &[f64], y: &[f64], w: usize, h: usize) -> f64 {
    let (bw, bh) = (UIQI_WINDOW.min(w), UIQI_WINDOW.min(h));
    let kw = vec![1.0 / bw as f64; bw];
    let kh = vec![1.0 / bh as f64; bh];
    let st = window_stats(x, y, w, h, &kw, &kh);
    let n = st.mx.len();
    (0..n)
        .map(|i| uiqi_window(st.mx[i], st.my[i], st.vx[i], st.vy[i], st.cxy[i]))
        .sum::<f64>()
        / n as f64
}

fn per_band_mean(
    reference: &HyperCube,
    fused: &HyperCube,
    f: impl Fn(&[f64], &[f64], usize, usize) -> f64 + Send + Sync,
) -> Result<f64> {
    check_dims(reference, fused)?;
    let (w, h, s) = reference.dims();
    let vals = exec::map_range(s, |b| f(reference.band(b), fused.band(b), w, h));
    Ok(vals.iter().sum::<f64>() / s as f64)
}

pub fn ssim(reference: &HyperCube, fused: &HyperCube) -> Result<f64> {
    per_band_mean(reference, fused, band_ssim)
}

pub fn uiqi(reference: &HyperCube, fused: &HyperCube) -> Result<f64> {
    per_band_mean(reference, fused, band_uiqi)
}
