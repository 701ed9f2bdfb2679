//! Dense order-3 tensor algebra.
//!
//! A [`HyperCube`] has dims `(n_w, n_h, n_b)` (width, height, bands) and is
//! stored band-major, row-major within a band:
//!
//! ```text
//! index(i, j, b) = b * n_w * n_h + i * n_h + j
//! ```
//!
//! Unfoldings follow the ascending-mode convention: the mode-`n` matrix has
//! one row per index of mode `n`; its columns enumerate the two remaining
//! modes in ascending order with the lower mode varying fastest.
//!
//! | mode | rows  | column index      |
//! |------|-------|-------------------|
//! | 1    | `n_w` | `j + n_h * b`     |
//! | 2    | `n_h` | `i + n_w * b`     |
//! | 3    | `n_b` | `i + n_w * j`     |
//!
//! With this convention `Z(1) = W C(1) (S ⊗ H)ᵀ` for a Tucker model.

use crate::error::{Error, Result};
use crate::exec;
use crate::real::{gemm, Operand};

/// Tensor mode, 1-based to match the usual notation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Mode {
    Width = 1,
    Height = 2,
    Band = 3,
}

impl Mode {
    pub const ALL: [Mode; 3] = [Mode::Width, Mode::Height, Mode::Band];

    pub fn from_index(mode: usize) -> Result<Self> {
        match mode {
            1 => Ok(Mode::Width),
            2 => Ok(Mode::Height),
            3 => Ok(Mode::Band),
            _ => Err(Error::arg(format!("mode must be 1, 2 or 3, got {mode}"))),
        }
    }

    fn axis(self) -> usize {
        self as usize - 1
    }
}

/// Row-major real matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl DenseMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::arg(format!("matrix dims must be positive, got {rows}x{cols}")));
        }
        if data.len() != rows * cols {
            return Err(Error::shape(format!(
                "matrix {rows}x{cols} needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::arg("matrix contains non-finite values"));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        Self::from_fn(n, n, |i, j| if i == j { 1.0 } else { 0.0 })
    }

    pub fn from_fn(rows: usize, cols: usize, f: impl Fn(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn transpose(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |i, j| self.get(j, i))
    }

    pub fn matmul(&self, rhs: &DenseMatrix) -> Result<DenseMatrix> {
        if self.cols != rhs.rows {
            return Err(Error::shape(format!(
                "matmul {}x{} by {}x{}",
                self.rows, self.cols, rhs.rows, rhs.cols
            )));
        }
        let mut out = vec![0.0; self.rows * rhs.cols];
        gemm(
            self.rows,
            self.cols,
            rhs.cols,
            Operand::plain(&self.data),
            Operand::plain(&rhs.data),
            &mut out,
            false,
        );
        Ok(DenseMatrix {
            rows: self.rows,
            cols: rhs.cols,
            data: out,
        })
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn row_sums(&self) -> Vec<f64> {
        (0..self.rows).map(|i| self.row(i).iter().sum()).collect()
    }
}

/// Dense `(n_w, n_h, n_b)` reflectance cube.
#[derive(Debug, Clone, PartialEq)]
pub struct HyperCube {
    dims: (usize, usize, usize),
    data: Vec<f64>,
}

impl HyperCube {
    pub fn new(dims: (usize, usize, usize), data: Vec<f64>) -> Result<Self> {
        let (w, h, b) = dims;
        if w == 0 || h == 0 || b == 0 {
            return Err(Error::arg(format!("cube dims must be positive, got {dims:?}")));
        }
        if data.len() != w * h * b {
            return Err(Error::shape(format!(
                "cube {dims:?} needs {} values, got {}",
                w * h * b,
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::arg("cube contains non-finite values"));
        }
        Ok(Self { dims, data })
    }

    pub fn zeros(dims: (usize, usize, usize)) -> Self {
        Self {
            dims,
            data: vec![0.0; dims.0 * dims.1 * dims.2],
        }
    }

    pub fn filled(dims: (usize, usize, usize), value: f64) -> Self {
        Self {
            dims,
            data: vec![value; dims.0 * dims.1 * dims.2],
        }
    }

    pub fn from_fn(dims: (usize, usize, usize), f: impl Fn(usize, usize, usize) -> f64) -> Self {
        let (w, h, b) = dims;
        let mut data = Vec::with_capacity(w * h * b);
        for k in 0..b {
            for i in 0..w {
                for j in 0..h {
                    data.push(f(i, j, k));
                }
            }
        }
        Self { dims, data }
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        self.dims
    }

    pub fn dim(&self, mode: Mode) -> usize {
        [self.dims.0, self.dims.1, self.dims.2][mode.axis()]
    }

    pub fn width(&self) -> usize {
        self.dims.0
    }

    pub fn height(&self) -> usize {
        self.dims.1
    }

    pub fn bands(&self) -> usize {
        self.dims.2
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize, b: usize) -> usize {
        b * self.dims.0 * self.dims.1 + i * self.dims.1 + j
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, b: usize) -> f64 {
        self.data[self.index(i, j, b)]
    }

    pub fn set(&mut self, i: usize, j: usize, b: usize, v: f64) {
        let idx = self.index(i, j, b);
        self.data[idx] = v;
    }

    /// Contiguous `n_w * n_h` slice of one band.
    pub fn band(&self, b: usize) -> &[f64] {
        let n = self.dims.0 * self.dims.1;
        &self.data[b * n..(b + 1) * n]
    }

    /// Spectrum of pixel `(i, j)`.
    pub fn spectrum(&self, i: usize, j: usize) -> Vec<f64> {
        (0..self.dims.2).map(|b| self.get(i, j, b)).collect()
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// `‖self − other‖_F / ‖other‖_F`, or the absolute error when `other` is zero.
    pub fn relative_error(&self, other: &HyperCube) -> f64 {
        let diff: f64 = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        let norm = other.frobenius_norm();
        if norm > 0.0 {
            diff / norm
        } else {
            diff
        }
    }

    pub fn max_abs_diff(&self, other: &HyperCube) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> HyperCube {
        HyperCube {
            dims: self.dims,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }
}

fn dims_array(d: (usize, usize, usize)) -> [usize; 3] {
    [d.0, d.1, d.2]
}

/// Mode-`n` unfolding (see the module docs for the column order).
pub fn unfold(t: &HyperCube, mode: Mode) -> DenseMatrix {
    let (w, h, b) = t.dims;
    match mode {
        Mode::Width => DenseMatrix::from_fn(w, h * b, |i, col| t.get(i, col % h, col / h)),
        Mode::Height => DenseMatrix::from_fn(h, w * b, |j, col| t.get(col % w, j, col / w)),
        Mode::Band => DenseMatrix::from_fn(b, w * h, |k, col| t.get(col % w, col / w, k)),
    }
}

/// Inverse of [`unfold`] for a cube of the given dims.
pub fn fold(m: &DenseMatrix, mode: Mode, dims: (usize, usize, usize)) -> Result<HyperCube> {
    let d = dims_array(dims);
    let rows = d[mode.axis()];
    let cols: usize = d.iter().product::<usize>() / rows.max(1);
    if m.rows() != rows || m.cols() != cols {
        return Err(Error::shape(format!(
            "cannot fold {}x{} matrix along mode {} into {dims:?}",
            m.rows(),
            m.cols(),
            mode as usize
        )));
    }
    let (w, h, _) = dims;
    let cube = match mode {
        Mode::Width => HyperCube::from_fn(dims, |i, j, k| m.get(i, j + h * k)),
        Mode::Height => HyperCube::from_fn(dims, |i, j, k| m.get(j, i + w * k)),
        Mode::Band => HyperCube::from_fn(dims, |i, j, k| m.get(k, i + w * j)),
    };
    Ok(cube)
}

/// `t ×_mode m`: replaces dimension `mode` of `t` by `m.rows()`.
pub fn mode_product(t: &HyperCube, m: &DenseMatrix, mode: Mode) -> Result<HyperCube> {
    let (w, h, b) = t.dims;
    if m.cols() != t.dim(mode) {
        return Err(Error::shape(format!(
            "mode-{} product: matrix has {} cols, tensor dim is {}",
            mode as usize,
            m.cols(),
            t.dim(mode)
        )));
    }
    let p = m.rows();
    let cube = match mode {
        Mode::Band => {
            let mut out = vec![0.0; p * w * h];
            gemm(
                p,
                b,
                w * h,
                Operand::plain(m.data()),
                Operand::plain(&t.data),
                &mut out,
                false,
            );
            HyperCube {
                dims: (w, h, p),
                data: out,
            }
        }
        Mode::Width => {
            let mut out = vec![0.0; p * h * b];
            exec::for_each_chunk(&mut out, p * h, |k, block| {
                gemm(
                    p,
                    w,
                    h,
                    Operand::plain(m.data()),
                    Operand::plain(t.band(k)),
                    block,
                    false,
                );
            });
            HyperCube {
                dims: (p, h, b),
                data: out,
            }
        }
        Mode::Height => {
            let mut out = vec![0.0; w * p * b];
            exec::for_each_chunk(&mut out, w * p, |k, block| {
                gemm(w, h, p, Operand::plain(t.band(k)), Operand::t(m.data()), block, false);
            });
            HyperCube {
                dims: (w, p, b),
                data: out,
            }
        }
    };
    Ok(cube)
}

/// Core tensor plus one factor matrix per mode.
#[derive(Debug, Clone, PartialEq)]
pub struct TuckerFactors {
    core: HyperCube,
    w_factor: DenseMatrix,
    h_factor: DenseMatrix,
    s_factor: DenseMatrix,
}

impl TuckerFactors {
    pub fn new(core: HyperCube, w_factor: DenseMatrix, h_factor: DenseMatrix, s_factor: DenseMatrix) -> Result<Self> {
        let (n1, n2, n3) = core.dims();
        for (name, f, n) in [("W", &w_factor, n1), ("H", &h_factor, n2), ("S", &s_factor, n3)] {
            if f.cols() != n {
                return Err(Error::shape(format!(
                    "{name} factor has {} cols, core dim is {n}",
                    f.cols()
                )));
            }
            if n > f.rows() {
                return Err(Error::arg(format!(
                    "{name} factor {}x{} expands instead of compressing",
                    f.rows(),
                    f.cols()
                )));
            }
        }
        Ok(Self {
            core,
            w_factor,
            h_factor,
            s_factor,
        })
    }

    pub fn core(&self) -> &HyperCube {
        &self.core
    }

    pub fn w_factor(&self) -> &DenseMatrix {
        &self.w_factor
    }

    pub fn h_factor(&self) -> &DenseMatrix {
        &self.h_factor
    }

    pub fn s_factor(&self) -> &DenseMatrix {
        &self.s_factor
    }

    pub fn factor(&self, mode: Mode) -> &DenseMatrix {
        match mode {
            Mode::Width => &self.w_factor,
            Mode::Height => &self.h_factor,
            Mode::Band => &self.s_factor,
        }
    }

    /// Dims of the reconstructed cube.
    pub fn full_dims(&self) -> (usize, usize, usize) {
        (self.w_factor.rows(), self.h_factor.rows(), self.s_factor.rows())
    }
}

/// `C ×₁ W ×₂ H ×₃ S`.
pub fn tucker_reconstruct(f: &TuckerFactors) -> HyperCube {
    // Shapes are validated by TuckerFactors::new.
    let t = mode_product(&f.core, &f.s_factor, Mode::Band).expect("validated");
    let t = mode_product(&t, &f.w_factor, Mode::Width).expect("validated");
    mode_product(&t, &f.h_factor, Mode::Height).expect("validated")
}

/// Leading left singular vectors of `m`, sorted by decreasing singular value,
/// with each vector's largest-magnitude entry made positive.
fn leading_left_singular_vectors(m: &DenseMatrix, rank: usize) -> DenseMatrix {
    let a = nalgebra::DMatrix::from_row_slice(m.rows(), m.cols(), m.data());
    let svd = a.svd(true, false);
    let u = svd.u.expect("requested U");
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&x, &y| {
        svd.singular_values[y]
            .partial_cmp(&svd.singular_values[x])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(x.cmp(&y))
    });
    let mut out = DenseMatrix::zeros(m.rows(), rank);
    for (c, &src) in order.iter().take(rank).enumerate() {
        let col = u.column(src);
        let pivot = col
            .iter()
            .copied()
            .fold(0.0f64, |acc, v| if v.abs() > acc.abs() { v } else { acc });
        let sign = if pivot < 0.0 { -1.0 } else { 1.0 };
        for r in 0..m.rows() {
            out.set(r, c, sign * col[r]);
        }
    }
    out
}

/// Truncated higher-order SVD.
pub fn hosvd(t: &HyperCube, ranks: (usize, usize, usize)) -> Result<TuckerFactors> {
    let r = dims_array(ranks);
    for mode in Mode::ALL {
        let (rank, dim) = (r[mode.axis()], t.dim(mode));
        if rank == 0 || rank > dim {
            return Err(Error::arg(format!(
                "mode-{} rank {rank} must be in 1..={dim}",
                mode as usize
            )));
        }
    }
    // The unfolding can have fewer columns than rows; SVD then yields at most
    // `cols` vectors, so pad with the Gram route by working on m mᵀ when needed.
    let factors: Vec<DenseMatrix> = Mode::ALL
        .iter()
        .map(|&mode| {
            let m = unfold(t, mode);
            let rank = r[mode.axis()];
            if m.cols() >= m.rows() {
                leading_left_singular_vectors(&m, rank)
            } else {
                let gram = m.matmul(&m.transpose()).expect("square");
                leading_left_singular_vectors(&gram, rank)
            }
        })
        .collect();
    let mut core = t.clone();
    for (mode, f) in Mode::ALL.iter().zip(&factors) {
        core = mode_product(&core, &f.transpose(), *mode)?;
    }
    let mut it = factors.into_iter();
    TuckerFactors::new(
        core,
        it.next().expect("3"),
        it.next().expect("3"),
        it.next().expect("3"),
    )
}
