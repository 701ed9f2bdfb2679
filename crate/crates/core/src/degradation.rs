//! Fixed degradation operators for simulating an observation pair from a
//! reference cube.
//!
//! Spatial degradation is `Z ×₁ P1 ×₂ P2` with `P1, P2` blur-then-decimate
//! matrices; spectral degradation is `Z ×₃ P3` with `P3` a row-stochastic
//! band aggregation. The defaults (blur sigma `0.5 * ratio`, noise off) are
//! assumptions: the protocol being reproduced states neither.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::{mode_product, DenseMatrix, HyperCube, Mode};

const ROW_SUM_TOL: f64 = 1e-9;

/// Default blur width for a given ratio.
pub fn default_blur_sigma(ratio: usize) -> f64 {
    0.5 * ratio as f64
}

/// `(full_dim / ratio) x full_dim` matrix: 1-D Gaussian blur (truncated at
/// `±3σ`, zero-padded) followed by keeping sample `ratio * r + ratio / 2` for
/// output `r`. Each row is renormalized to sum to 1, which keeps constants
/// fixed at the borders.
pub fn gaussian_decimation_matrix(full_dim: usize, ratio: usize, sigma: f64) -> Result<DenseMatrix> {
    check_ratio(full_dim, ratio)?;
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::arg(format!("blur sigma must be positive, got {sigma}")));
    }
    let radius = (3.0 * sigma).floor() as isize;
    let rows = full_dim / ratio;
    let mut m = DenseMatrix::zeros(rows, full_dim);
    for r in 0..rows {
        let center = (r * ratio + ratio / 2) as isize;
        let lo = (center - radius).max(0);
        let hi = (center + radius).min(full_dim as isize - 1);
        let weights: Vec<f64> = (lo..=hi)
            .map(|c| {
                let d = (c - center) as f64;
                (-d * d / (2.0 * sigma * sigma)).exp()
            })
            .collect();
        let total: f64 = weights.iter().sum();
        for (c, w) in (lo..=hi).zip(weights) {
            m.set(r, c as usize, w / total);
        }
    }
    Ok(m)
}

/// Non-overlapping block average: the PSF a `ratio`-tap stride-`ratio`
/// kernel with uniform weights realizes.
pub fn block_average_matrix(full_dim: usize, ratio: usize) -> Result<DenseMatrix> {
    check_ratio(full_dim, ratio)?;
    let inv = 1.0 / ratio as f64;
    Ok(DenseMatrix::from_fn(full_dim / ratio, full_dim, |r, c| {
        if c / ratio == r {
            inv
        } else {
            0.0
        }
    }))
}

fn check_ratio(full_dim: usize, ratio: usize) -> Result<()> {
    if ratio == 0 {
        return Err(Error::arg("ratio must be positive"));
    }
    if full_dim == 0 || !full_dim.is_multiple_of(ratio) {
        return Err(Error::arg(format!(
            "dimension {full_dim} is not divisible by ratio {ratio}"
        )));
    }
    Ok(())
}

fn check_row_stochastic(name: &str, m: &DenseMatrix) -> Result<()> {
    if m.data().iter().any(|&v| v < 0.0) {
        return Err(Error::arg(format!("{name} has negative entries")));
    }
    for (i, s) in m.row_sums().into_iter().enumerate() {
        if (s - 1.0).abs() > ROW_SUM_TOL {
            return Err(Error::arg(format!("{name} row {i} sums to {s}, expected 1")));
        }
    }
    Ok(())
}

/// Spatial PSF-and-decimation pair.
#[derive(Debug, Clone, PartialEq)]
pub struct SpatialDegradation {
    p1: DenseMatrix,
    p2: DenseMatrix,
    ratio: usize,
    blur_sigma: f64,
}

impl SpatialDegradation {
    pub fn gaussian(width: usize, height: usize, ratio: usize, sigma: f64) -> Result<Self> {
        Ok(Self {
            p1: gaussian_decimation_matrix(width, ratio, sigma)?,
            p2: gaussian_decimation_matrix(height, ratio, sigma)?,
            ratio,
            blur_sigma: sigma,
        })
    }

    /// Uniform block averaging; `blur_sigma` is reported as 0.
    pub fn block_average(width: usize, height: usize, ratio: usize) -> Result<Self> {
        Ok(Self {
            p1: block_average_matrix(width, ratio)?,
            p2: block_average_matrix(height, ratio)?,
            ratio,
            blur_sigma: 0.0,
        })
    }

    pub fn from_matrices(p1: DenseMatrix, p2: DenseMatrix, blur_sigma: f64) -> Result<Self> {
        check_row_stochastic("P1", &p1)?;
        check_row_stochastic("P2", &p2)?;
        if !p1.cols().is_multiple_of(p1.rows()) || !p2.cols().is_multiple_of(p2.rows()) {
            return Err(Error::arg("PSF matrices must decimate by an integer ratio"));
        }
        let ratio = p1.cols() / p1.rows();
        if p2.cols() / p2.rows() != ratio {
            return Err(Error::arg("P1 and P2 use different ratios"));
        }
        Ok(Self {
            p1,
            p2,
            ratio,
            blur_sigma,
        })
    }

    pub fn p1(&self) -> &DenseMatrix {
        &self.p1
    }

    pub fn p2(&self) -> &DenseMatrix {
        &self.p2
    }

    pub fn ratio(&self) -> usize {
        self.ratio
    }

    pub fn blur_sigma(&self) -> f64 {
        self.blur_sigma
    }

    /// `(W, H)` this operator accepts.
    pub fn full_dims(&self) -> (usize, usize) {
        (self.p1.cols(), self.p2.cols())
    }
}

/// Band ranges are inclusive `(start, end)` pairs, one per output band.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralResponse {
    p3: DenseMatrix,
    band_ranges: Vec<(usize, usize)>,
}

impl SpectralResponse {
    /// Accepts any nonnegative matrix with `s < S`; rows are renormalized.
    pub fn from_matrix(p3: DenseMatrix) -> Result<Self> {
        if p3.rows() >= p3.cols() {
            return Err(Error::arg(format!(
                "SRF must reduce band count, got {}x{}",
                p3.rows(),
                p3.cols()
            )));
        }
        if p3.data().iter().any(|&v| v < 0.0) {
            return Err(Error::arg("SRF has negative weights"));
        }
        let mut m = p3;
        let mut ranges = Vec::with_capacity(m.rows());
        for i in 0..m.rows() {
            let sum: f64 = m.row(i).iter().sum();
            if sum <= 0.0 {
                return Err(Error::arg(format!("SRF row {i} has no positive weight")));
            }
            for j in 0..m.cols() {
                let v = m.get(i, j) / sum;
                m.set(i, j, v);
            }
            let nz: Vec<usize> = (0..m.cols()).filter(|&j| m.get(i, j) > 0.0).collect();
            ranges.push((nz[0], *nz.last().expect("nonempty")));
        }
        Ok(Self {
            p3: m,
            band_ranges: ranges,
        })
    }

    pub fn p3(&self) -> &DenseMatrix {
        &self.p3
    }

    pub fn band_ranges(&self) -> &[(usize, usize)] {
        &self.band_ranges
    }

    pub fn output_bands(&self) -> usize {
        self.p3.rows()
    }

    pub fn input_bands(&self) -> usize {
        self.p3.cols()
    }
}

/// Boxcar SRF: output band `i` averages bands `start..=end` of range `i`.
///
/// A single range may cover all bands (`s = 1 < S` is still a reduction),
/// except when there is only one input band.
pub fn srf_from_ranges(band_ranges: &[(usize, usize)], total_bands: usize) -> Result<SpectralResponse> {
    if band_ranges.is_empty() {
        return Err(Error::arg("SRF needs at least one band range"));
    }
    let mut p3 = DenseMatrix::zeros(band_ranges.len(), total_bands);
    for (i, &(start, end)) in band_ranges.iter().enumerate() {
        if start > end || end >= total_bands {
            return Err(Error::arg(format!(
                "band range ({start}, {end}) is empty or exceeds {total_bands} bands"
            )));
        }
        let w = 1.0 / (end - start + 1) as f64;
        for j in start..=end {
            p3.set(i, j, w);
        }
    }
    if band_ranges.len() >= total_bands {
        return Err(Error::arg(format!(
            "{} ranges over {total_bands} bands is not a spectral reduction",
            band_ranges.len()
        )));
    }
    Ok(SpectralResponse {
        p3,
        band_ranges: band_ranges.to_vec(),
    })
}

/// `count` contiguous, near-equal boxcar ranges over `total_bands`.
pub fn even_ranges(total_bands: usize, count: usize) -> Result<Vec<(usize, usize)>> {
    if count == 0 || count > total_bands {
        return Err(Error::arg(format!(
            "cannot split {total_bands} bands into {count} ranges"
        )));
    }
    Ok((0..count)
        .map(|i| {
            let start = i * total_bands / count;
            let end = (i + 1) * total_bands / count - 1;
            (start, end)
        })
        .collect())
}

/// Landsat-8 OLI reflective bands 1-7 as boxcars in nanometres.
pub const LANDSAT8_OLI_NM: [(f64, f64); 7] = [
    (435.0, 451.0),
    (452.0, 512.0),
    (533.0, 590.0),
    (636.0, 673.0),
    (851.0, 879.0),
    (1566.0, 1651.0),
    (2107.0, 2294.0),
];

/// Boxcar ranges for instrument bands, given a sensor whose `total_bands`
/// are evenly spaced from `first_nm` to `last_nm`. Instrument bands that
/// cover no sensor band are dropped.
pub fn ranges_from_wavelengths(
    instrument_nm: &[(f64, f64)],
    first_nm: f64,
    last_nm: f64,
    total_bands: usize,
) -> Result<Vec<(usize, usize)>> {
    if total_bands < 2 || last_nm <= first_nm {
        return Err(Error::arg("sensor wavelength grid needs >= 2 bands and last > first"));
    }
    let step = (last_nm - first_nm) / (total_bands - 1) as f64;
    let ranges: Vec<(usize, usize)> = instrument_nm
        .iter()
        .filter_map(|&(lo, hi)| {
            let inside: Vec<usize> = (0..total_bands)
                .filter(|&b| {
                    let nm = first_nm + step * b as f64;
                    nm >= lo && nm <= hi
                })
                .collect();
            inside.first().map(|&s| (s, *inside.last().expect("nonempty")))
        })
        .collect();
    if ranges.is_empty() {
        return Err(Error::arg("no instrument band overlaps the sensor range"));
    }
    Ok(ranges)
}

/// Additive white Gaussian noise.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseSpec {
    pub enabled: bool,
    pub std: f64,
    pub seed: u64,
}

impl NoiseSpec {
    pub fn off() -> Self {
        Self {
            enabled: false,
            std: 0.0,
            seed: 0,
        }
    }

    pub fn gaussian(std: f64, seed: u64) -> Result<Self> {
        if !(std >= 0.0 && std.is_finite()) {
            return Err(Error::arg(format!("noise std must be >= 0, got {std}")));
        }
        Ok(Self {
            enabled: true,
            std,
            seed,
        })
    }

    fn apply(&self, cube: HyperCube) -> HyperCube {
        if !self.enabled || self.std == 0.0 {
            return cube;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let normal = Normal::new(0.0, self.std).expect("std checked");
        let dims = cube.dims();
        let data = cube
            .into_data()
            .into_iter()
            .map(|v| v + normal.sample(&mut rng))
            .collect();
        HyperCube::new(dims, data).expect("finite")
    }
}

impl Default for NoiseSpec {
    fn default() -> Self {
        Self::off()
    }
}

/// `z ×₁ P1 ×₂ P2 (+ noise)`.
pub fn degrade_spatial(z: &HyperCube, d: &SpatialDegradation, n: &NoiseSpec) -> Result<HyperCube> {
    if (z.width(), z.height()) != d.full_dims() {
        return Err(Error::shape(format!(
            "spatial operator expects {:?}, cube is {}x{}",
            d.full_dims(),
            z.width(),
            z.height()
        )));
    }
    let t = mode_product(z, &d.p1, Mode::Width)?;
    let t = mode_product(&t, &d.p2, Mode::Height)?;
    Ok(n.apply(t))
}

/// `z ×₃ P3 (+ noise)`.
pub fn degrade_spectral(z: &HyperCube, r: &SpectralResponse, n: &NoiseSpec) -> Result<HyperCube> {
    if z.bands() != r.input_bands() {
        return Err(Error::shape(format!(
            "SRF expects {} bands, cube has {}",
            r.input_bands(),
            z.bands()
        )));
    }
    Ok(n.apply(mode_product(z, &r.p3, Mode::Band)?))
}

/// The two routes to the low-resolution multispectral image:
/// `(SRF(x), PSF(y))`.
pub fn make_lr_msi(
    x: &HyperCube,
    y: &HyperCube,
    d: &SpatialDegradation,
    r: &SpectralResponse,
) -> Result<(HyperCube, HyperCube)> {
    let off = NoiseSpec::off();
    let from_x = degrade_spectral(x, r, &off)?;
    let from_y = degrade_spatial(y, d, &off)?;
    if from_x.dims() != from_y.dims() {
        return Err(Error::shape(format!(
            "LR-MSI routes disagree on dims: {:?} vs {:?}",
            from_x.dims(),
            from_y.dims()
        )));
    }
    Ok((from_x, from_y))
}

/// Nearest-neighbor upsampling of each band by `ratio`; the usual naive
/// baseline for fusion quality.
pub fn upsample_nearest(x: &HyperCube, ratio: usize) -> Result<HyperCube> {
    if ratio == 0 {
        return Err(Error::arg("ratio must be positive"));
    }
    let (w, h, s) = x.dims();
    Ok(HyperCube::from_fn((w * ratio, h * ratio, s), |i, j, b| {
        x.get(i / ratio, j / ratio, b)
    }))
}

/// A simulated observation pair.
#[derive(Debug, Clone)]
pub struct SimulatedPair {
    pub lr_hsi: HyperCube,
    pub hr_msi: HyperCube,
}

/// Degrades `reference` into an LR-HSI (spatial) and an HR-MSI (spectral).
/// The two noise streams use `seed` and `seed + 1`.
pub fn simulate(
    reference: &HyperCube,
    spatial: &SpatialDegradation,
    spectral: &SpectralResponse,
    noise_std: Option<f64>,
    seed: u64,
) -> Result<SimulatedPair> {
    let (nx, ny) = match noise_std {
        Some(std) => (
            NoiseSpec::gaussian(std, seed)?,
            NoiseSpec::gaussian(std, seed.wrapping_add(1))?,
        ),
        None => (NoiseSpec::off(), NoiseSpec::off()),
    };
    Ok(SimulatedPair {
        lr_hsi: degrade_spatial(reference, spatial, &nx)?,
        hr_msi: degrade_spectral(reference, spectral, &ny)?,
    })
}
