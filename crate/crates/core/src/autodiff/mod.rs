//! Tape-based reverse-mode automatic differentiation over dense arrays.
//!
//! A [`Graph`] records every operation as a node in creation order, which is
//! a topological order by construction. [`Graph::backward`] walks the tape
//! once in reverse and accumulates gradients into the parents of each node.
//!
//! Trainable values live in a [`ParamStore`] outside the graph; inserting
//! the same [`ParamId`] twice yields the same node, so a parameter used by
//! several branches receives the sum of their gradients.
//!
//! Feature maps are `[channels, rows, cols]` (batch size is always 1).

mod array;
mod kernels;

pub use array::{Array, ParamId, ParamStore};

use crate::real::{gemm, Operand, Real};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PoolKind {
    Avg,
    Max,
}

/// Axis of a `[c, r, q]` feature map a matrix is applied along.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    Channel,
    Row,
    Col,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Conv {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    },
    ConvTranspose {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Relu(Var),
    Sigmoid(Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    MulChannel {
        x: Var,
        v: Var,
    },
    Outer {
        v: Var,
        m: Var,
    },
    GlobalPool {
        x: Var,
        kind: PoolKind,
        argmax: Vec<usize>,
    },
    ChannelPool {
        x: Var,
        kind: PoolKind,
        argmax: Vec<usize>,
    },
    Concat(Var, Var),
    Normalize {
        x: Var,
        scale: Var,
        shift: Var,
        mean: Vec<f64>,
        inv_std: Vec<f64>,
    },
    ModeApply {
        x: Var,
        m: Var,
        axis: Axis,
    },
    MatMul(Var, Var),
    PsfMatrix {
        kernel: Var,
        stride: usize,
        offset: usize,
    },
    RowNormNonneg {
        m: Var,
        sums: Vec<f64>,
    },
    MeanAbsDiff(Var, Var),
    MeanSqDiff(Var, Var),
    TraceQuad {
        f: Var,
        l: Var,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Conv { .. } => "conv",
            Op::ConvTranspose { .. } => "conv_transpose",
            Op::Linear { .. } => "linear",
            Op::Relu(_) => "relu",
            Op::Sigmoid(_) => "sigmoid",
            Op::Add(..) => "add",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::MulChannel { .. } => "mul_channel",
            Op::Outer { .. } => "outer",
            Op::GlobalPool { .. } => "global_pool",
            Op::ChannelPool { .. } => "channel_pool",
            Op::Concat(..) => "concat",
            Op::Normalize { .. } => "normalize",
            Op::ModeApply { .. } => "mode_apply",
            Op::MatMul(..) => "matmul",
            Op::PsfMatrix { .. } => "psf_matrix",
            Op::RowNormNonneg { .. } => "row_norm_nonneg",
            Op::MeanAbsDiff(..) => "mean_abs_diff",
            Op::MeanSqDiff(..) => "mean_sq_diff",
            Op::TraceQuad { .. } => "trace_quad",
        }
    }
}

struct Node<T> {
    value: Array<T>,
    op: Op,
    requires_grad: bool,
    param: Option<ParamId>,
    label: Option<String>,
}

pub struct Graph<T: Real> {
    nodes: Vec<Node<T>>,
    param_nodes: Vec<Option<Var>>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Graph::backward`], one slot per node.
pub struct Gradients<T> {
    per_node: Vec<Option<Array<T>>>,
    params: Vec<Option<Var>>,
}

impl<T: Real> Gradients<T> {
    pub fn wrt(&self, v: Var) -> Option<&Array<T>> {
        self.per_node[v.0].as_ref()
    }

    /// Gradient of a parameter, or `None` if it was not used (or unreachable).
    pub fn param(&self, id: ParamId) -> Option<&Array<T>> {
        self.params
            .get(id.index())
            .copied()
            .flatten()
            .and_then(|v| self.per_node[v.0].as_ref())
    }

    /// Gradients indexed like the store; unused parameters get zeros.
    pub fn for_store(&self, store: &ParamStore<T>) -> Vec<Array<T>> {
        store
            .ids()
            .map(|id| {
                self.param(id)
                    .cloned()
                    .unwrap_or_else(|| Array::zeros(store.value(id).shape()))
            })
            .collect()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            param_nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Array<T>, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            param: None,
            label: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn req(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Array<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Scalar value of a `[1]` node.
    pub fn scalar(&self, v: Var) -> T {
        self.nodes[v.0].value.data()[0]
    }

    pub fn set_label(&mut self, v: Var, label: impl Into<String>) {
        self.nodes[v.0].label = Some(label.into());
    }

    /// Name of the first node (in creation order) holding a non-finite value.
    pub fn first_non_finite(&self) -> Option<String> {
        self.nodes.iter().enumerate().find_map(|(i, n)| {
            if n.value.data().iter().all(|v| v.is_finite()) {
                None
            } else {
                Some(match &n.label {
                    Some(l) => format!("{l} (node {i}, {})", n.op.name()),
                    None => format!("node {i} ({})", n.op.name()),
                })
            }
        })
    }

    /// Constant input; receives no gradient.
    pub fn input(&mut self, value: Array<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Differentiable leaf not tied to a parameter store.
    pub fn variable(&mut self, value: Array<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(Some(v)) = self.param_nodes.get(id.index()) {
            return *v;
        }
        let v = self.push(store.value(id).clone(), Op::Leaf, true);
        self.nodes[v.0].param = Some(id);
        self.nodes[v.0].label = Some(store.name(id).to_string());
        if self.param_nodes.len() <= id.index() {
            self.param_nodes.resize(id.index() + 1, None);
        }
        self.param_nodes[id.index()] = Some(v);
        v
    }

    /// Node holding parameter `id`, if it has been inserted.
    pub fn param_var(&self, id: ParamId) -> Option<Var> {
        self.param_nodes.get(id.index()).copied().flatten()
    }

    // ---- operations -------------------------------------------------------

    /// Cross-correlation of `x [C,H,W]` with `w [O,C,kh,kw]`, optional bias `[O]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Var {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        assert_eq!(xs.len(), 3, "conv2d input must be [C,H,W]");
        assert_eq!(ws.len(), 4, "conv2d weight must be [O,C,kh,kw]");
        assert_eq!(xs[0], ws[1], "conv2d channel mismatch");
        let geom = kernels::ConvGeom::new(xs[0], xs[1], xs[2], ws[0], ws[2], ws[3], stride, pad);
        let bias = b.map(|b| self.value(b).data().to_vec());
        let out = kernels::conv_forward(self.value(x).data(), self.value(w).data(), bias.as_deref(), &geom);
        let rg = self.needs(&[x, w]) || b.is_some_and(|b| self.req(b));
        self.push(
            Array::new(vec![geom.out_c, geom.out_h, geom.out_w], out),
            Op::Conv { x, w, b, stride, pad },
            rg,
        )
    }

    /// Transposed convolution with kernel size equal to stride:
    /// `x [C,H,W]`, `w [C,O,k,k]` gives `[O, kH, kW]`.
    pub fn conv_transpose2d(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        assert_eq!(xs.len(), 3, "conv_transpose2d input must be [C,H,W]");
        assert_eq!(ws.len(), 4, "conv_transpose2d weight must be [C,O,k,k]");
        assert_eq!(xs[0], ws[0], "conv_transpose2d channel mismatch");
        assert_eq!(ws[2], ws[3], "conv_transpose2d kernel must be square");
        let (c, h, wd, o, k) = (xs[0], xs[1], xs[2], ws[1], ws[2]);
        let bias = b.map(|b| self.value(b).data().to_vec());
        let out = kernels::conv_transpose_forward(
            self.value(x).data(),
            self.value(w).data(),
            bias.as_deref(),
            c,
            h,
            wd,
            o,
            k,
        );
        let rg = self.needs(&[x, w]) || b.is_some_and(|b| self.req(b));
        self.push(
            Array::new(vec![o, h * k, wd * k], out),
            Op::ConvTranspose { x, w, b },
            rg,
        )
    }

    /// `w [m,n] · x (n values) + b [m]`, giving `[m]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let ws = self.shape(w).to_vec();
        assert_eq!(ws.len(), 2, "linear weight must be [m,n]");
        let (m, n) = (ws[0], ws[1]);
        assert_eq!(self.value(x).len(), n, "linear input size mismatch");
        let mut out = vec![T::zero(); m];
        gemm(
            m,
            n,
            1,
            Operand::plain(self.value(w).data()),
            Operand::plain(self.value(x).data()),
            &mut out,
            false,
        );
        if let Some(b) = b {
            for (o, bv) in out.iter_mut().zip(self.value(b).data()) {
                *o += *bv;
            }
        }
        let rg = self.needs(&[x, w]) || b.is_some_and(|b| self.req(b));
        self.push(Array::new(vec![m], out), Op::Linear { x, w, b }, rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| if v > T::zero() { v } else { T::zero() });
        let rg = self.req(x);
        self.push(out, Op::Relu(x), rg)
    }

    /// Logistic sigmoid, clamped so outputs stay strictly inside `(0, 1)`.
    pub fn sigmoid(&mut self, x: Var) -> Var {
        let lo = T::min_positive_value();
        let hi = T::one() - T::epsilon();
        let out = self.value(x).map(|v| {
            let s = if v >= T::zero() {
                T::one() / (T::one() + (-v).exp())
            } else {
                let e = v.exp();
                e / (T::one() + e)
            };
            s.max(lo).min(hi)
        });
        let rg = self.req(x);
        self.push(out, Op::Sigmoid(x), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "add shape mismatch");
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y);
        let rg = self.needs(&[a, b]);
        self.push(out, Op::Add(a, b), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "mul shape mismatch");
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y);
        let rg = self.needs(&[a, b]);
        self.push(out, Op::Mul(a, b), rg)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let k = T::from_f64_lossy(s);
        let out = self.value(a).map(|v| v * k);
        let rg = self.req(a);
        self.push(out, Op::Scale(a, s), rg)
    }

    /// `x [C,H,W] ⊙ v [C]` broadcast over space.
    pub fn mul_channel(&mut self, x: Var, v: Var) -> Var {
        let xs = self.shape(x).to_vec();
        assert_eq!(xs.len(), 3);
        assert_eq!(self.value(v).len(), xs[0], "mul_channel size mismatch");
        let plane = xs[1] * xs[2];
        let vv = self.value(v).data().to_vec();
        let mut out = self.value(x).clone();
        for (c, chunk) in out.data_mut().chunks_mut(plane).enumerate() {
            for o in chunk {
                *o *= vv[c];
            }
        }
        let rg = self.needs(&[x, v]);
        self.push(out, Op::MulChannel { x, v }, rg)
    }

    /// Broadcast product `out[c,i,j] = v[c] * m[i,j]` for `v [C]`, `m [1,H,W]`.
    pub fn outer(&mut self, v: Var, m: Var) -> Var {
        let ms = self.shape(m).to_vec();
        assert!(ms.len() == 3 && ms[0] == 1, "outer map must be [1,H,W]");
        let c = self.value(v).len();
        let plane = ms[1] * ms[2];
        let mut out = Vec::with_capacity(c * plane);
        for &vc in self.value(v).data() {
            out.extend(self.value(m).data().iter().map(|&mv| vc * mv));
        }
        let rg = self.needs(&[v, m]);
        self.push(Array::new(vec![c, ms[1], ms[2]], out), Op::Outer { v, m }, rg)
    }

    /// Per-channel pooling over space, giving `[C]`. Max picks the first
    /// maximal element in scan order.
    pub fn global_pool(&mut self, x: Var, kind: PoolKind) -> Var {
        let xs = self.shape(x).to_vec();
        assert_eq!(xs.len(), 3);
        let plane = xs[1] * xs[2];
        let mut out = Vec::with_capacity(xs[0]);
        let mut argmax = Vec::new();
        for chunk in self.value(x).data().chunks(plane) {
            match kind {
                PoolKind::Avg => out.push(chunk.iter().copied().sum::<T>() / T::from_usize(plane).unwrap()),
                PoolKind::Max => {
                    let (idx, v) = first_max(chunk.iter().copied());
                    out.push(v);
                    argmax.push(idx);
                }
            }
        }
        let rg = self.req(x);
        self.push(Array::new(vec![xs[0]], out), Op::GlobalPool { x, kind, argmax }, rg)
    }

    /// Pooling across channels at each pixel, giving `[1,H,W]`.
    pub fn channel_pool(&mut self, x: Var, kind: PoolKind) -> Var {
        let xs = self.shape(x).to_vec();
        assert_eq!(xs.len(), 3);
        let (c, plane) = (xs[0], xs[1] * xs[2]);
        let data = self.value(x).data();
        let mut out = Vec::with_capacity(plane);
        let mut argmax = Vec::new();
        for p in 0..plane {
            let it = (0..c).map(|ch| data[ch * plane + p]);
            match kind {
                PoolKind::Avg => out.push(it.sum::<T>() / T::from_usize(c).unwrap()),
                PoolKind::Max => {
                    let (idx, v) = first_max(it);
                    out.push(v);
                    argmax.push(idx);
                }
            }
        }
        let rg = self.req(x);
        self.push(
            Array::new(vec![1, xs[1], xs[2]], out),
            Op::ChannelPool { x, kind, argmax },
            rg,
        )
    }

    /// Channel concatenation `[a; b]`.
    pub fn concat(&mut self, a: Var, b: Var) -> Var {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        assert!(
            sa.len() == 3 && sb.len() == 3 && sa[1..] == sb[1..],
            "concat spatial mismatch"
        );
        let mut out = self.value(a).data().to_vec();
        out.extend_from_slice(self.value(b).data());
        let rg = self.needs(&[a, b]);
        self.push(Array::new(vec![sa[0] + sb[0], sa[1], sa[2]], out), Op::Concat(a, b), rg)
    }

    /// Per-channel standardization with learnable `scale [C]` and `shift [C]`.
    pub fn normalize(&mut self, x: Var, scale: Var, shift: Var, eps: f64) -> Var {
        let xs = self.shape(x).to_vec();
        assert_eq!(xs.len(), 3);
        let plane = xs[1] * xs[2];
        let mut mean = Vec::with_capacity(xs[0]);
        let mut inv_std = Vec::with_capacity(xs[0]);
        let mut out = Vec::with_capacity(xs[0] * plane);
        let (g, bt) = (self.value(scale).data(), self.value(shift).data());
        for (c, chunk) in self.value(x).data().chunks(plane).enumerate() {
            let mu = chunk.iter().map(|v| v.as_f64()).sum::<f64>() / plane as f64;
            let var = chunk.iter().map(|v| (v.as_f64() - mu).powi(2)).sum::<f64>() / plane as f64;
            let inv = 1.0 / (var + eps).sqrt();
            let (mu_t, inv_t) = (T::from_f64_lossy(mu), T::from_f64_lossy(inv));
            out.extend(chunk.iter().map(|&v| g[c] * (v - mu_t) * inv_t + bt[c]));
            mean.push(mu);
            inv_std.push(inv);
        }
        let rg = self.needs(&[x, scale, shift]);
        self.push(
            Array::new(xs, out),
            Op::Normalize {
                x,
                scale,
                shift,
                mean,
                inv_std,
            },
            rg,
        )
    }

    /// Applies `m [P, D]` along one axis of `x [C,R,Q]` (the axis must have size `D`).
    pub fn mode_apply(&mut self, x: Var, m: Var, axis: Axis) -> Var {
        let xs = self.shape(x).to_vec();
        let ms = self.shape(m).to_vec();
        assert_eq!(xs.len(), 3, "mode_apply input must be [C,R,Q]");
        assert_eq!(ms.len(), 2, "mode_apply matrix must be 2-D");
        let out = kernels::mode_apply_forward(self.value(x).data(), &xs, self.value(m).data(), &ms, axis);
        let mut shape = xs.clone();
        shape[axis as usize] = ms[0];
        let rg = self.needs(&[x, m]);
        self.push(Array::new(shape, out), Op::ModeApply { x, m, axis }, rg)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        assert!(
            sa.len() == 2 && sb.len() == 2 && sa[1] == sb[0],
            "matmul shape mismatch"
        );
        let mut out = vec![T::zero(); sa[0] * sb[1]];
        gemm(
            sa[0],
            sa[1],
            sb[1],
            Operand::plain(self.value(a).data()),
            Operand::plain(self.value(b).data()),
            &mut out,
            false,
        );
        let rg = self.needs(&[a, b]);
        self.push(Array::new(vec![sa[0], sb[1]], out), Op::MatMul(a, b), rg)
    }

    /// Strided 1-D convolution as a `(full / stride) x full` matrix:
    /// `P[r, stride * r + t - offset] = kernel[t]` where in range.
    pub fn psf_matrix(&mut self, kernel: Var, full: usize, stride: usize, offset: usize) -> Var {
        assert!(
            stride > 0 && full.is_multiple_of(stride),
            "psf_matrix: full dim not divisible"
        );
        let k = self.value(kernel).data().to_vec();
        let rows = full / stride;
        let mut out = vec![T::zero(); rows * full];
        for r in 0..rows {
            for (t, &kv) in k.iter().enumerate() {
                let c = (stride * r + t) as isize - offset as isize;
                if c >= 0 && (c as usize) < full {
                    out[r * full + c as usize] += kv;
                }
            }
        }
        let rg = self.req(kernel);
        self.push(
            Array::new(vec![rows, full], out),
            Op::PsfMatrix { kernel, stride, offset },
            rg,
        )
    }

    /// `max(m, 0)` rows rescaled to sum to 1. A row with no positive entry
    /// becomes uniform and passes no gradient.
    pub fn row_normalize_nonneg(&mut self, m: Var) -> Var {
        let s = self.shape(m).to_vec();
        assert_eq!(s.len(), 2);
        let (r, c) = (s[0], s[1]);
        let mut out = vec![T::zero(); r * c];
        let mut sums = Vec::with_capacity(r);
        for (i, row) in self.value(m).data().chunks(c).enumerate() {
            let total: f64 = row.iter().map(|v| v.as_f64().max(0.0)).sum();
            sums.push(total);
            for (j, &v) in row.iter().enumerate() {
                out[i * c + j] = if total > 0.0 {
                    T::from_f64_lossy(v.as_f64().max(0.0) / total)
                } else {
                    T::from_f64_lossy(1.0 / c as f64)
                };
            }
        }
        let rg = self.req(m);
        self.push(Array::new(s, out), Op::RowNormNonneg { m, sums }, rg)
    }

    /// `mean |a - b|`.
    pub fn mean_abs_diff(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "mean_abs_diff shape mismatch");
        let n = self.value(a).len() as f64;
        let s: f64 = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| (x.as_f64() - y.as_f64()).abs())
            .sum();
        let rg = self.needs(&[a, b]);
        self.push(Array::scalar(T::from_f64_lossy(s / n)), Op::MeanAbsDiff(a, b), rg)
    }

    /// `mean (a - b)²`.
    pub fn mean_sq_diff(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "mean_sq_diff shape mismatch");
        let n = self.value(a).len() as f64;
        let s: f64 = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| (x.as_f64() - y.as_f64()).powi(2))
            .sum();
        let rg = self.needs(&[a, b]);
        self.push(Array::scalar(T::from_f64_lossy(s / n)), Op::MeanSqDiff(a, b), rg)
    }

    /// `tr(fᵀ l f)` for `f [n,k]` and symmetric `l [n,n]`.
    pub fn trace_quad(&mut self, f: Var, l: Var) -> Var {
        let (sf, sl) = (self.shape(f).to_vec(), self.shape(l).to_vec());
        assert!(sf.len() == 2 && sl == [sf[0], sf[0]], "trace_quad shape mismatch");
        let (n, k) = (sf[0], sf[1]);
        let mut lf = vec![T::zero(); n * k];
        gemm(
            n,
            n,
            k,
            Operand::plain(self.value(l).data()),
            Operand::plain(self.value(f).data()),
            &mut lf,
            false,
        );
        let v: f64 = lf
            .iter()
            .zip(self.value(f).data())
            .map(|(a, b)| a.as_f64() * b.as_f64())
            .sum();
        let rg = self.needs(&[f, l]);
        self.push(Array::scalar(T::from_f64_lossy(v)), Op::TraceQuad { f, l }, rg)
    }

    // ---- backward ---------------------------------------------------------

    /// Reverse pass from the scalar `loss`, seeded with gradient 1.
    pub fn backward(&self, loss: Var) -> Gradients<T> {
        assert_eq!(self.value(loss).len(), 1, "backward needs a scalar loss");
        let mut grads: Vec<Option<Array<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Array::scalar(T::one()));
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            if !self.nodes[idx].requires_grad {
                continue;
            }
            self.backprop_node(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Gradients {
            per_node: grads,
            params: self.param_nodes.clone(),
        }
    }

    fn accumulate(&self, grads: &mut [Option<Array<T>>], v: Var, g: Array<T>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn backprop_node(&self, idx: usize, g: &Array<T>, grads: &mut [Option<Array<T>>]) {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf => {}
            Op::Conv { x, w, b, stride, pad } => {
                let xs = self.shape(*x);
                let ws = self.shape(*w);
                let geom = kernels::ConvGeom::new(xs[0], xs[1], xs[2], ws[0], ws[2], ws[3], *stride, *pad);
                let (dx, dw) = kernels::conv_backward(
                    self.value(*x).data(),
                    self.value(*w).data(),
                    g.data(),
                    &geom,
                    self.req(*x),
                    self.req(*w),
                );
                if let Some(dx) = dx {
                    self.accumulate(grads, *x, Array::new(xs.to_vec(), dx));
                }
                if let Some(dw) = dw {
                    self.accumulate(grads, *w, Array::new(ws.to_vec(), dw));
                }
                if let Some(b) = b {
                    let db = channel_sums(g);
                    self.accumulate(grads, *b, Array::new(vec![db.len()], db));
                }
            }
            Op::ConvTranspose { x, w, b } => {
                let xs = self.shape(*x);
                let ws = self.shape(*w);
                let (dx, dw) = kernels::conv_transpose_backward(
                    self.value(*x).data(),
                    self.value(*w).data(),
                    g.data(),
                    xs[0],
                    xs[1],
                    xs[2],
                    ws[1],
                    ws[2],
                    self.req(*x),
                    self.req(*w),
                );
                if let Some(dx) = dx {
                    self.accumulate(grads, *x, Array::new(xs.to_vec(), dx));
                }
                if let Some(dw) = dw {
                    self.accumulate(grads, *w, Array::new(ws.to_vec(), dw));
                }
                if let Some(b) = b {
                    let db = channel_sums(g);
                    self.accumulate(grads, *b, Array::new(vec![db.len()], db));
                }
            }
            Op::Linear { x, w, b } => {
                let ws = self.shape(*w).to_vec();
                let (m, n) = (ws[0], ws[1]);
                if self.req(*x) {
                    let mut dx = vec![T::zero(); n];
                    gemm(
                        n,
                        m,
                        1,
                        Operand::t(self.value(*w).data()),
                        Operand::plain(g.data()),
                        &mut dx,
                        false,
                    );
                    let xs = self.shape(*x).to_vec();
                    self.accumulate(grads, *x, Array::new(xs, dx));
                }
                if self.req(*w) {
                    let mut dw = vec![T::zero(); m * n];
                    gemm(
                        m,
                        1,
                        n,
                        Operand::plain(g.data()),
                        Operand::plain(self.value(*x).data()),
                        &mut dw,
                        false,
                    );
                    self.accumulate(grads, *w, Array::new(ws, dw));
                }
                if let Some(b) = b {
                    self.accumulate(grads, *b, g.clone());
                }
            }
            Op::Relu(x) => {
                let d = self
                    .value(*x)
                    .zip_map(g, |v, gv| if v > T::zero() { gv } else { T::zero() });
                self.accumulate(grads, *x, d);
            }
            Op::Sigmoid(x) => {
                let d = node.value.zip_map(g, |y, gv| gv * y * (T::one() - y));
                self.accumulate(grads, *x, d);
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Mul(a, b) => {
                if self.req(*a) {
                    self.accumulate(grads, *a, g.zip_map(self.value(*b), |gv, bv| gv * bv));
                }
                if self.req(*b) {
                    self.accumulate(grads, *b, g.zip_map(self.value(*a), |gv, av| gv * av));
                }
            }
            Op::Scale(a, s) => {
                let k = T::from_f64_lossy(*s);
                self.accumulate(grads, *a, g.map(|v| v * k));
            }
            Op::MulChannel { x, v } => {
                let xs = self.shape(*x);
                let plane = xs[1] * xs[2];
                let vv = self.value(*v).data();
                if self.req(*x) {
                    let mut dx = g.clone();
                    for (c, chunk) in dx.data_mut().chunks_mut(plane).enumerate() {
                        for o in chunk {
                            *o *= vv[c];
                        }
                    }
                    self.accumulate(grads, *x, dx);
                }
                if self.req(*v) {
                    let dv: Vec<T> = g
                        .data()
                        .chunks(plane)
                        .zip(self.value(*x).data().chunks(plane))
                        .map(|(gc, xc)| gc.iter().zip(xc).map(|(a, b)| *a * *b).sum())
                        .collect();
                    self.accumulate(grads, *v, Array::new(vec![vv.len()], dv));
                }
            }
            Op::Outer { v, m } => {
                let ms = self.shape(*m).to_vec();
                let plane = ms[1] * ms[2];
                let vv = self.value(*v).data();
                let mv = self.value(*m).data();
                if self.req(*v) {
                    let dv: Vec<T> = g
                        .data()
                        .chunks(plane)
                        .map(|gc| gc.iter().zip(mv).map(|(a, b)| *a * *b).sum())
                        .collect();
                    self.accumulate(grads, *v, Array::new(vec![vv.len()], dv));
                }
                if self.req(*m) {
                    let mut dm = vec![T::zero(); plane];
                    for (c, gc) in g.data().chunks(plane).enumerate() {
                        for (o, gv) in dm.iter_mut().zip(gc) {
                            *o += *gv * vv[c];
                        }
                    }
                    self.accumulate(grads, *m, Array::new(ms, dm));
                }
            }
            Op::GlobalPool { x, kind, argmax } => {
                let xs = self.shape(*x).to_vec();
                let plane = xs[1] * xs[2];
                let mut dx = vec![T::zero(); xs[0] * plane];
                for c in 0..xs[0] {
                    match kind {
                        PoolKind::Avg => {
                            let share = g.data()[c] / T::from_usize(plane).unwrap();
                            dx[c * plane..(c + 1) * plane].fill(share);
                        }
                        PoolKind::Max => dx[c * plane + argmax[c]] = g.data()[c],
                    }
                }
                self.accumulate(grads, *x, Array::new(xs, dx));
            }
            Op::ChannelPool { x, kind, argmax } => {
                let xs = self.shape(*x).to_vec();
                let (c, plane) = (xs[0], xs[1] * xs[2]);
                let mut dx = vec![T::zero(); c * plane];
                for p in 0..plane {
                    match kind {
                        PoolKind::Avg => {
                            let share = g.data()[p] / T::from_usize(c).unwrap();
                            for ch in 0..c {
                                dx[ch * plane + p] = share;
                            }
                        }
                        PoolKind::Max => dx[argmax[p] * plane + p] = g.data()[p],
                    }
                }
                self.accumulate(grads, *x, Array::new(xs, dx));
            }
            Op::Concat(a, b) => {
                let na = self.value(*a).len();
                let (ga, gb) = g.data().split_at(na);
                self.accumulate(grads, *a, Array::new(self.shape(*a).to_vec(), ga.to_vec()));
                self.accumulate(grads, *b, Array::new(self.shape(*b).to_vec(), gb.to_vec()));
            }
            Op::Normalize {
                x,
                scale,
                shift,
                mean,
                inv_std,
            } => {
                let xs = self.shape(*x).to_vec();
                let plane = xs[1] * xs[2];
                let gamma = self.value(*scale).data();
                let n = plane as f64;
                let mut dx = vec![T::zero(); xs[0] * plane];
                let mut dgamma = vec![T::zero(); xs[0]];
                let mut dbeta = vec![T::zero(); xs[0]];
                for c in 0..xs[0] {
                    let xc = &self.value(*x).data()[c * plane..(c + 1) * plane];
                    let gc = &g.data()[c * plane..(c + 1) * plane];
                    let xhat: Vec<f64> = xc.iter().map(|v| (v.as_f64() - mean[c]) * inv_std[c]).collect();
                    let gsum: f64 = gc.iter().map(|v| v.as_f64()).sum();
                    let gx: f64 = gc.iter().zip(&xhat).map(|(a, b)| a.as_f64() * b).sum();
                    dbeta[c] = T::from_f64_lossy(gsum);
                    dgamma[c] = T::from_f64_lossy(gx);
                    let gm = gamma[c].as_f64();
                    for p in 0..plane {
                        let dxhat = gc[p].as_f64() * gm;
                        let v = inv_std[c] / n * (n * dxhat - gm * gsum - xhat[p] * gm * gx);
                        dx[c * plane + p] = T::from_f64_lossy(v);
                    }
                }
                if self.req(*x) {
                    self.accumulate(grads, *x, Array::new(xs, dx));
                }
                self.accumulate(grads, *scale, Array::new(vec![dgamma.len()], dgamma));
                self.accumulate(grads, *shift, Array::new(vec![dbeta.len()], dbeta));
            }
            Op::ModeApply { x, m, axis } => {
                let xs = self.shape(*x).to_vec();
                let ms = self.shape(*m).to_vec();
                let (dx, dm) = kernels::mode_apply_backward(
                    self.value(*x).data(),
                    &xs,
                    self.value(*m).data(),
                    &ms,
                    *axis,
                    g.data(),
                    self.req(*x),
                    self.req(*m),
                );
                if let Some(dx) = dx {
                    self.accumulate(grads, *x, Array::new(xs, dx));
                }
                if let Some(dm) = dm {
                    self.accumulate(grads, *m, Array::new(ms, dm));
                }
            }
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a).to_vec(), self.shape(*b).to_vec());
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if self.req(*a) {
                    let mut da = vec![T::zero(); m * k];
                    gemm(
                        m,
                        n,
                        k,
                        Operand::plain(g.data()),
                        Operand::t(self.value(*b).data()),
                        &mut da,
                        false,
                    );
                    self.accumulate(grads, *a, Array::new(sa, da));
                }
                if self.req(*b) {
                    let mut db = vec![T::zero(); k * n];
                    gemm(
                        k,
                        m,
                        n,
                        Operand::t(self.value(*a).data()),
                        Operand::plain(g.data()),
                        &mut db,
                        false,
                    );
                    self.accumulate(grads, *b, Array::new(sb, db));
                }
            }
            Op::PsfMatrix { kernel, stride, offset } => {
                let s = node.value.shape();
                let (rows, full) = (s[0], s[1]);
                let taps = self.value(*kernel).len();
                let mut dk = vec![T::zero(); taps];
                for r in 0..rows {
                    for (t, d) in dk.iter_mut().enumerate() {
                        let c = (stride * r + t) as isize - *offset as isize;
                        if c >= 0 && (c as usize) < full {
                            *d += g.data()[r * full + c as usize];
                        }
                    }
                }
                let ks = self.shape(*kernel).to_vec();
                self.accumulate(grads, *kernel, Array::new(ks, dk));
            }
            Op::RowNormNonneg { m, sums } => {
                let s = node.value.shape().to_vec();
                let c = s[1];
                let mut dm = vec![T::zero(); s[0] * c];
                let mv = self.value(*m).data();
                for (i, &total) in sums.iter().enumerate() {
                    if total <= 0.0 {
                        continue;
                    }
                    let row_out = &node.value.data()[i * c..(i + 1) * c];
                    let row_g = &g.data()[i * c..(i + 1) * c];
                    let dot: f64 = row_out.iter().zip(row_g).map(|(o, gv)| o.as_f64() * gv.as_f64()).sum();
                    for j in 0..c {
                        if mv[i * c + j] > T::zero() {
                            dm[i * c + j] = T::from_f64_lossy((row_g[j].as_f64() - dot) / total);
                        }
                    }
                }
                self.accumulate(grads, *m, Array::new(s, dm));
            }
            Op::MeanAbsDiff(a, b) => {
                let n = T::from_usize(self.value(*a).len()).unwrap();
                let scale = g.data()[0] / n;
                let d = self.value(*a).zip_map(self.value(*b), |x, y| {
                    let diff = x - y;
                    if diff > T::zero() {
                        scale
                    } else if diff < T::zero() {
                        -scale
                    } else {
                        T::zero()
                    }
                });
                if self.req(*b) {
                    self.accumulate(grads, *b, d.map(|v| -v));
                }
                self.accumulate(grads, *a, d);
            }
            Op::MeanSqDiff(a, b) => {
                let n = T::from_usize(self.value(*a).len()).unwrap();
                let scale = (T::one() + T::one()) * g.data()[0] / n;
                let d = self.value(*a).zip_map(self.value(*b), |x, y| scale * (x - y));
                if self.req(*b) {
                    self.accumulate(grads, *b, d.map(|v| -v));
                }
                self.accumulate(grads, *a, d);
            }
            Op::TraceQuad { f, l } => {
                let sf = self.shape(*f).to_vec();
                let (n, k) = (sf[0], sf[1]);
                let gs = g.data()[0];
                if self.req(*f) {
                    // (L + Lᵀ) F
                    let mut df = vec![T::zero(); n * k];
                    gemm(
                        n,
                        n,
                        k,
                        Operand::plain(self.value(*l).data()),
                        Operand::plain(self.value(*f).data()),
                        &mut df,
                        false,
                    );
                    gemm(
                        n,
                        n,
                        k,
                        Operand::t(self.value(*l).data()),
                        Operand::plain(self.value(*f).data()),
                        &mut df,
                        true,
                    );
                    for v in &mut df {
                        *v *= gs;
                    }
                    self.accumulate(grads, *f, Array::new(sf.clone(), df));
                }
                if self.req(*l) {
                    let mut dl = vec![T::zero(); n * n];
                    gemm(
                        n,
                        k,
                        n,
                        Operand::plain(self.value(*f).data()),
                        Operand::t(self.value(*f).data()),
                        &mut dl,
                        false,
                    );
                    for v in &mut dl {
                        *v *= gs;
                    }
                    self.accumulate(grads, *l, Array::new(vec![n, n], dl));
                }
            }
        }
    }
}

fn first_max<T: Real>(it: impl Iterator<Item = T>) -> (usize, T) {
    let mut best = (0, T::neg_infinity());
    for (i, v) in it.enumerate() {
        if v > best.1 {
            best = (i, v);
        }
    }
    best
}

fn channel_sums<T: Real>(g: &Array<T>) -> Vec<T> {
    let s = g.shape();
    let plane = s[1] * s[2];
    g.data().chunks(plane).map(|c| c.iter().copied().sum()).collect()
}

#[cfg(test)]
mod tests;
