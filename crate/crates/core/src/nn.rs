//! Layers, initialization, the ADAM optimizer, the learning-rate schedule and
//! the binary checkpoint container.

use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{Array, Graph, ParamId, ParamStore, Var};
use crate::error::{Error, Result};
use crate::real::Real;

pub const NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerKind {
    /// 3×3, stride 1, same padding.
    Conv3x3,
    Conv1x1,
    /// 2×2, stride 2: halves both spatial dims.
    Conv2x2S2,
    /// Transposed 2×2, stride 2: doubles both spatial dims.
    Deconv2x2S2,
    Fc,
    /// Per-channel standardization with learnable scale (weight) and shift (bias).
    Norm,
}

#[derive(Debug, Clone)]
pub struct Layer {
    pub kind: LayerKind,
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_c: usize,
    pub out_c: usize,
}

impl LayerKind {
    fn weight_shape(self, in_c: usize, out_c: usize) -> Vec<usize> {
        match self {
            LayerKind::Conv3x3 => vec![out_c, in_c, 3, 3],
            LayerKind::Conv1x1 => vec![out_c, in_c, 1, 1],
            LayerKind::Conv2x2S2 => vec![out_c, in_c, 2, 2],
            LayerKind::Deconv2x2S2 => vec![in_c, out_c, 2, 2],
            LayerKind::Fc => vec![out_c, in_c],
            LayerKind::Norm => vec![in_c],
        }
    }

    /// Number of inputs feeding each output value.
    fn fan_in(self, in_c: usize) -> usize {
        match self {
            LayerKind::Conv3x3 => in_c * 9,
            LayerKind::Conv2x2S2 => in_c * 4,
            // kernel == stride, so each output pixel sees exactly one tap per input channel
            LayerKind::Conv1x1 | LayerKind::Deconv2x2S2 | LayerKind::Fc => in_c,
            LayerKind::Norm => 1,
        }
    }
}

/// `N(0, 2 / fan_in)` samples.
pub fn kaiming_normal<T: Real, R: Rng>(rng: &mut R, shape: &[usize], fan_in: usize) -> Array<T> {
    let std = (2.0 / fan_in.max(1) as f64).sqrt();
    let normal = Normal::new(0.0, std).expect("positive std");
    let n = shape.iter().product();
    Array::new(
        shape.to_vec(),
        (0..n).map(|_| T::from_f64_lossy(normal.sample(rng))).collect(),
    )
}

impl Layer {
    /// Registers the layer's parameters: Kaiming weights and zero biases, or
    /// scale 1 / shift 0 for [`LayerKind::Norm`].
    pub fn new<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        kind: LayerKind,
        in_c: usize,
        out_c: usize,
        bias: bool,
    ) -> Self {
        if kind == LayerKind::Norm {
            assert_eq!(in_c, out_c, "norm layer keeps the channel count");
            let weight = store.add(format!("{name}.scale"), Array::filled(&[in_c], T::one()));
            let shift = store.add(format!("{name}.shift"), Array::zeros(&[in_c]));
            return Self {
                kind,
                weight,
                bias: Some(shift),
                in_c,
                out_c,
            };
        }
        let shape = kind.weight_shape(in_c, out_c);
        let weight = store.add(format!("{name}.weight"), kaiming_normal(rng, &shape, kind.fan_in(in_c)));
        let bias = bias.then(|| store.add(format!("{name}.bias"), Array::zeros(&[out_c])));
        Self {
            kind,
            weight,
            bias,
            in_c,
            out_c,
        }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Var {
        let c = g.shape(x)[0];
        assert_eq!(
            c, self.in_c,
            "{:?} layer expects {} input channels, got {c}",
            self.kind, self.in_c
        );
        let w = g.param(store, self.weight);
        let b = self.bias.map(|b| g.param(store, b));
        match self.kind {
            LayerKind::Conv3x3 => g.conv2d(x, w, b, 1, 1),
            LayerKind::Conv1x1 => g.conv2d(x, w, b, 1, 0),
            LayerKind::Conv2x2S2 => g.conv2d(x, w, b, 2, 0),
            LayerKind::Deconv2x2S2 => g.conv_transpose2d(x, w, b),
            LayerKind::Fc => g.linear(x, w, b),
            LayerKind::Norm => g.normalize(x, w, b.expect("norm shift"), NORM_EPS),
        }
    }
}

/// ADAM moments for every parameter in a store.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub m: Vec<Array<T>>,
    pub v: Vec<Array<T>>,
    pub t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl<T: Real> AdamState<T> {
    pub fn new(store: &ParamStore<T>) -> Self {
        let zeros: Vec<Array<T>> = store.ids().map(|id| Array::zeros(store.value(id).shape())).collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            t: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    /// One bias-corrected ADAM update. Parameters whose `frozen` flag is set
    /// keep both their value and their moments.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &[Array<T>], lr: f64, frozen: &[bool]) -> Result<()> {
        if grads.len() != store.len() || self.m.len() != store.len() {
            return Err(Error::shape(format!(
                "adam: {} gradients for {} parameters",
                grads.len(),
                store.len()
            )));
        }
        for (id, g) in store.ids().zip(grads) {
            if g.shape() != store.value(id).shape() {
                return Err(Error::shape(format!(
                    "adam: gradient of `{}` has shape {:?}, parameter has {:?}",
                    store.name(id),
                    g.shape(),
                    store.value(id).shape()
                )));
            }
        }
        self.t += 1;
        let (b1, b2) = (T::from_f64_lossy(self.beta1), T::from_f64_lossy(self.beta2));
        let one = T::one();
        let c1 = T::from_f64_lossy(1.0 - self.beta1.powi(self.t as i32));
        let c2 = T::from_f64_lossy(1.0 - self.beta2.powi(self.t as i32));
        let lr = T::from_f64_lossy(lr);
        let eps = T::from_f64_lossy(self.eps);
        for (k, id) in store.ids().collect::<Vec<_>>().into_iter().enumerate() {
            if frozen.get(k).copied().unwrap_or(false) {
                continue;
            }
            let p = store.value_mut(id).data_mut();
            let m = self.m[k].data_mut();
            let v = self.v[k].data_mut();
            for (((p, m), v), &g) in p.iter_mut().zip(m).zip(v).zip(grads[k].data()) {
                *m = b1 * *m + (one - b1) * g;
                *v = b2 * *v + (one - b2) * g * g;
                let mh = *m / c1;
                let vh = *v / c2;
                *p -= lr * mh / (vh.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Constant learning rate, then linear decay to zero at `total_epochs`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LrSchedule {
    pub base_lr: f64,
    pub total_epochs: usize,
    pub decay_start: usize,
}

impl Default for LrSchedule {
    fn default() -> Self {
        Self {
            base_lr: 5e-3,
            total_epochs: 10_000,
            decay_start: 3_000,
        }
    }
}

impl LrSchedule {
    pub fn new(base_lr: f64, total_epochs: usize, decay_start: usize) -> Result<Self> {
        if decay_start > total_epochs {
            return Err(Error::arg(format!(
                "decay start {decay_start} is past the last epoch {total_epochs}"
            )));
        }
        if !(base_lr.is_finite() && base_lr >= 0.0) {
            return Err(Error::arg(format!("learning rate must be >= 0, got {base_lr}")));
        }
        Ok(Self {
            base_lr,
            total_epochs,
            decay_start,
        })
    }

    /// Learning rate for zero-based `epoch`.
    pub fn lr_at(&self, epoch: usize) -> Result<f64> {
        if epoch >= self.total_epochs {
            return Err(Error::arg(format!(
                "epoch {epoch} outside schedule of {} epochs",
                self.total_epochs
            )));
        }
        if epoch < self.decay_start {
            return Ok(self.base_lr);
        }
        Ok(self.base_lr * (self.total_epochs - epoch) as f64 / (self.total_epochs - self.decay_start) as f64)
    }
}

/// Ordered named `f32` arrays.
///
/// On-disk layout (all integers little-endian `u32`):
///
/// ```text
/// b"TKDNCKPT" | version | entry count
/// per entry: name length | name (UTF-8) | ndim | dims... | f32 LE values
/// ```
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Checkpoint {
    entries: Vec<(String, Vec<usize>, Vec<f32>)>,
}

const CKPT_MAGIC: &[u8; 8] = b"TKDNCKPT";
const CKPT_VERSION: u32 = 1;

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push<T: Real>(&mut self, name: impl Into<String>, a: &Array<T>) {
        let data = a.data().iter().map(|v| v.as_f64() as f32).collect();
        self.entries.push((name.into(), a.shape().to_vec(), data));
    }

    pub fn get<T: Real>(&self, name: &str) -> Option<Array<T>> {
        self.entries
            .iter()
            .find(|(n, _, _)| n == name)
            .map(|(_, s, d)| Array::new(s.clone(), d.iter().map(|&v| T::from_f64_lossy(v as f64)).collect()))
    }

    /// Like [`Checkpoint::get`] but reports a missing entry.
    pub fn require<T: Real>(&self, name: &str) -> Result<Array<T>> {
        self.get(name)
            .ok_or_else(|| Error::arg(format!("checkpoint has no entry `{name}`")))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _, _)| n.as_str())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CKPT_MAGIC);
        out.extend_from_slice(&CKPT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (name, shape, data) in &self.entries {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
            for &d in shape {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    /// Parses a checkpoint; `path` only labels errors.
    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0, path };
        if r.take(8)? != CKPT_MAGIC {
            return Err(r.fail("not a checkpoint (bad magic)"));
        }
        let version = r.u32()?;
        if version != CKPT_VERSION {
            return Err(r.fail(&format!("unsupported checkpoint version {version}")));
        }
        let count = r.u32()? as usize;
        let mut entries = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| r.fail("entry name is not UTF-8"))?
                .to_string();
            let ndim = r.u32()? as usize;
            if ndim > 8 {
                return Err(r.fail(&format!("entry `{name}` has {ndim} dims")));
            }
            let shape: Vec<usize> = (0..ndim).map(|_| r.u32().map(|d| d as usize)).collect::<Result<_>>()?;
            let n: usize = shape.iter().product();
            let raw = r.take(n.checked_mul(4).ok_or_else(|| r.fail("entry too large"))?)?;
            let data: Vec<f32> = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            entries.push((name, shape, data));
        }
        if r.pos != bytes.len() {
            return Err(r.fail("trailing bytes after last entry"));
        }
        Ok(Self { entries })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn fail(&self, msg: &str) -> Error {
        Error::format(self.path, 0, format!("byte {}: {msg}", self.pos))
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(self.fail("unexpected end of file"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}
