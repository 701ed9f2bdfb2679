//! The core tensor fusion network and its three Tucker decoders.
//!
//! Feature maps follow the cube layout `[bands, width, height]`, so a
//! [`HyperCube`]'s data is already a valid network input.
//!
//! ```text
//! X (S,w,h) ── enc ── SSAB ×s ──────────────┐
//!                      │ spectral attention │
//! Y (s,W,H) ── enc ── SDAB ×s ── fusion ── [f1, SFB] ⊙ F_A ── SUAB ×s ── f_trans ── core
//! ```
//!
//! Decoders share factor parameters: the HR-HSI uses `(S, W, H)`, the LR-HSI
//! uses `(S, P1·W, P2·H)` and the HR-MSI uses `(P3·S, W, H)`, where `P1`, `P2`
//! are the learned PSF matrices and `P3` the learned, row-normalized SRF.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Array, Axis, Graph, ParamId, ParamStore, PoolKind, Var};
use crate::error::{Error, Result};
use crate::nn::{kaiming_normal, Layer, LayerKind};
use crate::real::Real;
use crate::tensor::{DenseMatrix, HyperCube, TuckerFactors};

/// Which parts of the spatial-spectral attention module are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttentionMode {
    Full,
    SpectralOnly,
    SpatialOnly,
    Off,
}

impl AttentionMode {
    fn spectral(self) -> bool {
        matches!(self, AttentionMode::Full | AttentionMode::SpectralOnly)
    }

    fn spatial(self) -> bool {
        matches!(self, AttentionMode::Full | AttentionMode::SpatialOnly)
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(AttentionMode::Full),
            "spectral" => Ok(AttentionMode::SpectralOnly),
            "spatial" => Ok(AttentionMode::SpatialOnly),
            "off" => Ok(AttentionMode::Off),
            _ => Err(Error::arg(format!(
                "attention must be full|spectral|spatial|off, got `{s}`"
            ))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            AttentionMode::Full => "full",
            AttentionMode::SpectralOnly => "spectral",
            AttentionMode::SpatialOnly => "spatial",
            AttentionMode::Off => "off",
        }
    }
}

pub const DEFAULT_SPATIAL_CORE_RATIO: f64 = 0.85;
pub const DEFAULT_MAX_SPECTRAL_CORE: usize = 40;
pub const DEFAULT_CHANNELS: usize = 64;
pub const DEFAULT_REDUCTION: usize = 4;

/// `(n1, n2, n3)` for an HR-HSI of `(width, height, bands)`.
pub fn default_core_dims(width: usize, height: usize, bands: usize) -> (usize, usize, usize) {
    let r = |d: usize| ((d as f64 * DEFAULT_SPATIAL_CORE_RATIO).round() as usize).max(1);
    (r(width), r(height), bands.min(DEFAULT_MAX_SPECTRAL_CORE))
}

#[derive(Debug, Clone, PartialEq)]
pub struct CtfnConfig {
    /// HR-HSI `(W, H, S)`.
    pub hr_dims: (usize, usize, usize),
    /// Number of HR-MSI bands.
    pub msi_bands: usize,
    pub ratio: usize,
    /// Feature channels `n_s` at every stage.
    pub channels: usize,
    /// Core `(n1, n2, n3)`.
    pub core_dims: (usize, usize, usize),
    /// Hidden size of the shared attention MLP is `channels / reduction`.
    pub reduction: usize,
    pub attention: AttentionMode,
    /// Taps of each learnable 1-D PSF kernel.
    pub psf_taps: usize,
}

impl CtfnConfig {
    /// Defaults for an LR-HSI of `lr_dims` and an HR-MSI of `msi_dims`.
    pub fn from_inputs(lr_dims: (usize, usize, usize), msi_dims: (usize, usize, usize)) -> Result<Self> {
        let (w, h, s_big) = lr_dims;
        let (wd, ht, s_small) = msi_dims;
        if w == 0 || h == 0 || wd % w != 0 || ht % h != 0 {
            return Err(Error::arg(format!(
                "HR-MSI {wd}x{ht} is not an integer multiple of LR-HSI {w}x{h}"
            )));
        }
        let ratio = wd / w;
        if ht / h != ratio {
            return Err(Error::arg(format!(
                "anisotropic ratio: {} along width, {} along height",
                ratio,
                ht / h
            )));
        }
        let cfg = Self {
            hr_dims: (wd, ht, s_big),
            msi_bands: s_small,
            ratio,
            channels: DEFAULT_CHANNELS,
            core_dims: default_core_dims(wd, ht, s_big),
            reduction: DEFAULT_REDUCTION,
            attention: AttentionMode::Full,
            psf_taps: ratio,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn stages(&self) -> usize {
        self.ratio.trailing_zeros() as usize
    }

    pub fn lr_dims(&self) -> (usize, usize, usize) {
        let (w, h, s) = self.hr_dims;
        (w / self.ratio, h / self.ratio, s)
    }

    pub fn msi_dims(&self) -> (usize, usize, usize) {
        (self.hr_dims.0, self.hr_dims.1, self.msi_bands)
    }

    pub fn validate(&self) -> Result<()> {
        let (wd, ht, s) = self.hr_dims;
        if self.ratio < 2 || !self.ratio.is_power_of_two() {
            return Err(Error::arg(format!(
                "spatial ratio must be a power of two >= 2, got {}",
                self.ratio
            )));
        }
        if wd % self.ratio != 0 || ht % self.ratio != 0 {
            return Err(Error::arg(format!(
                "{wd}x{ht} is not divisible by ratio {}",
                self.ratio
            )));
        }
        if self.msi_bands == 0 || self.msi_bands >= s {
            return Err(Error::arg(format!(
                "HR-MSI needs between 1 and {} bands, got {}",
                s.saturating_sub(1),
                self.msi_bands
            )));
        }
        let (n1, n2, n3) = self.core_dims;
        if n1 == 0 || n2 == 0 || n3 == 0 || n1 > wd || n2 > ht || n3 > s {
            return Err(Error::arg(format!(
                "core dims {:?} must be positive and at most {:?}",
                self.core_dims, self.hr_dims
            )));
        }
        if self.channels == 0 || self.reduction == 0 || self.channels < self.reduction {
            return Err(Error::arg(format!(
                "channels ({}) must be >= reduction ({}) > 0",
                self.channels, self.reduction
            )));
        }
        if self.psf_taps == 0 {
            return Err(Error::arg("psf_taps must be positive"));
        }
        Ok(())
    }

    fn psf_offset(&self) -> usize {
        self.psf_taps.saturating_sub(self.ratio) / 2
    }
}

/// Linear-interpolation resampling `[out, inp]` (half-pixel centers, clamped
/// at the borders); rows sum to 1.
pub fn linear_resample_matrix(out: usize, inp: usize) -> Vec<f64> {
    let mut m = vec![0.0; out * inp];
    let scale = inp as f64 / out as f64;
    for p in 0..out {
        let x = ((p as f64 + 0.5) * scale - 0.5).clamp(0.0, (inp - 1) as f64);
        let lo = x.floor() as usize;
        let hi = (lo + 1).min(inp - 1);
        let t = x - lo as f64;
        m[p * inp + lo] += 1.0 - t;
        m[p * inp + hi] += t;
    }
    m
}

#[derive(Debug, Clone)]
struct Stage {
    ssab: Layer,
    res_a: Layer,
    res_b: Layer,
    down: Layer,
    spa_conv: Layer,
    spa_norm: Layer,
    f1: Layer,
    sfb: Layer,
    f2: Layer,
    suab: Layer,
}

/// Handles into the parameter store for the decoder factors and the
/// degradation layers.
#[derive(Debug, Clone, Copy)]
pub struct FactorIds {
    /// `[S, n3]`
    pub s: ParamId,
    /// `[W, n1]`
    pub w: ParamId,
    /// `[H, n2]`
    pub h: ParamId,
    /// PSF kernel along width, `[taps]`.
    pub psf_w: ParamId,
    /// PSF kernel along height, `[taps]`.
    pub psf_h: ParamId,
    /// Unnormalized SRF, `[s, S]`.
    pub srf: ParamId,
}

#[derive(Debug, Clone)]
pub struct Network<T> {
    config: CtfnConfig,
    store: ParamStore<T>,
    enc_x: (Layer, Layer),
    enc_y: (Layer, Layer),
    stages: Vec<Stage>,
    fc1: Layer,
    fc2: Layer,
    fusion: Layer,
    trans: Layer,
    resample_w: ParamId,
    resample_h: ParamId,
    factors: FactorIds,
}

/// Nodes produced by one forward pass.
#[derive(Debug, Clone)]
pub struct Forward {
    /// `[n3, n1, n2]`
    pub core: Var,
    /// HR-HSI `[S, W, H]`.
    pub z: Var,
    /// LR-HSI `[S, w, h]`.
    pub x_hat: Var,
    /// HR-MSI `[s, W, H]`.
    pub y_hat: Var,
    pub theta_s: Var,
    pub theta_w: Var,
    pub theta_h: Var,
    /// `[w, W]`
    pub p1: Var,
    /// `[h, H]`
    pub p2: Var,
    /// Normalized SRF `[s, S]`.
    pub p3: Var,
    /// Attention maps `F_A,i` for i = s..1 (empty when attention is off).
    pub attention: Vec<Var>,
}

impl<T: Real> Network<T> {
    pub fn new(config: CtfnConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let (wd, ht, s_big) = config.hr_dims;
        let (n1, n2, n3) = config.core_dims;
        let ns = config.channels;
        let st = &mut store;
        let r = &mut rng;

        let enc_x = (
            Layer::new(st, r, "enc_x.0", LayerKind::Conv3x3, s_big, ns, true),
            Layer::new(st, r, "enc_x.1", LayerKind::Conv3x3, ns, ns, true),
        );
        let enc_y = (
            Layer::new(st, r, "enc_y.0", LayerKind::Conv3x3, config.msi_bands, ns, true),
            Layer::new(st, r, "enc_y.1", LayerKind::Conv3x3, ns, ns, true),
        );
        let hidden = ns / config.reduction;
        let fc1 = Layer::new(st, r, "attn.fc1", LayerKind::Fc, ns, hidden, true);
        let fc2 = Layer::new(st, r, "attn.fc2", LayerKind::Fc, hidden, ns, true);
        let mut stages = Vec::with_capacity(config.stages());
        for i in 1..=config.stages() {
            let n = |part: &str| format!("stage{i}.{part}");
            stages.push(Stage {
                ssab: Layer::new(st, r, &n("ssab"), LayerKind::Conv1x1, ns, ns, true),
                res_a: Layer::new(st, r, &n("sdab.res_a"), LayerKind::Conv3x3, ns, ns, true),
                res_b: Layer::new(st, r, &n("sdab.res_b"), LayerKind::Conv3x3, ns, ns, true),
                down: Layer::new(st, r, &n("sdab.down"), LayerKind::Conv2x2S2, ns, ns, true),
                spa_conv: Layer::new(st, r, &n("spa.conv"), LayerKind::Conv3x3, 2, 1, false),
                spa_norm: Layer::new(st, r, &n("spa.norm"), LayerKind::Norm, 1, 1, true),
                f1: Layer::new(st, r, &n("up.f1"), LayerKind::Conv3x3, ns, ns, true),
                sfb: Layer::new(st, r, &n("sfb"), LayerKind::Conv3x3, ns, ns, true),
                f2: Layer::new(st, r, &n("up.f2"), LayerKind::Conv3x3, 2 * ns, ns, true),
                suab: Layer::new(st, r, &n("suab"), LayerKind::Deconv2x2S2, ns, ns, true),
            });
        }
        let fusion = Layer::new(st, r, "fusion", LayerKind::Conv3x3, 2 * ns, ns, true);
        let trans = Layer::new(st, r, "trans.channel", LayerKind::Conv1x1, ns, n3, true);
        let resample_w = st.add(
            "trans.resample_w",
            Array::from_f64(vec![n1, wd], &linear_resample_matrix(n1, wd)),
        );
        let resample_h = st.add(
            "trans.resample_h",
            Array::from_f64(vec![n2, ht], &linear_resample_matrix(n2, ht)),
        );

        let s = st.add("factor.s", kaiming_normal(r, &[s_big, n3], n3));
        let w = st.add("factor.w", kaiming_normal(r, &[wd, n1], n1));
        let h = st.add("factor.h", kaiming_normal(r, &[ht, n2], n2));
        let taps = config.psf_taps;
        let psf = Array::filled(&[taps], T::from_f64_lossy(1.0 / taps as f64));
        let psf_w = st.add("psf.w", psf.clone());
        let psf_h = st.add("psf.h", psf);
        let srf_init: Vec<f64> = (0..config.msi_bands * s_big)
            .map(|_| 1.0 + 0.1 * r.random_range(-1.0..1.0))
            .collect();
        let srf = st.add("srf", Array::from_f64(vec![config.msi_bands, s_big], &srf_init));

        Ok(Self {
            config,
            store,
            enc_x,
            enc_y,
            stages,
            fc1,
            fc2,
            fusion,
            trans,
            resample_w,
            resample_h,
            factors: FactorIds {
                s,
                w,
                h,
                psf_w,
                psf_h,
                srf,
            },
        })
    }

    pub fn config(&self) -> &CtfnConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore<T> {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    pub fn factor_ids(&self) -> FactorIds {
        self.factors
    }

    /// Same architecture and parameter values in another precision.
    pub fn cast<U: Real>(&self) -> Network<U> {
        Network {
            config: self.config.clone(),
            store: self.store.cast(),
            enc_x: self.enc_x.clone(),
            enc_y: self.enc_y.clone(),
            stages: self.stages.clone(),
            fc1: self.fc1.clone(),
            fc2: self.fc2.clone(),
            fusion: self.fusion.clone(),
            trans: self.trans.clone(),
            resample_w: self.resample_w,
            resample_h: self.resample_h,
            factors: self.factors,
        }
    }

    fn layer(&self, g: &mut Graph<T>, l: &Layer, x: Var) -> Var {
        l.forward(g, &self.store, x)
    }

    fn conv_relu(&self, g: &mut Graph<T>, l: &Layer, x: Var) -> Var {
        let y = self.layer(g, l, x);
        g.relu(y)
    }

    /// `sigmoid(fc(AP(f)) + fc(MP(f)))` with the shared two-layer MLP.
    pub fn spectral_attention(&self, g: &mut Graph<T>, f: Var) -> Var {
        let ap = g.global_pool(f, PoolKind::Avg);
        let mp = g.global_pool(f, PoolKind::Max);
        let mut branch = |v| {
            let h = self.layer(g, &self.fc1, v);
            let h = g.relu(h);
            self.layer(g, &self.fc2, h)
        };
        let a = branch(ap);
        let b = branch(mp);
        let s = g.add(a, b);
        g.sigmoid(s)
    }

    /// `sigmoid(norm(conv3x3([AP_c(f); MP_c(f)])))`, one map `[1, r, q]`.
    pub fn spatial_attention(&self, g: &mut Graph<T>, stage: usize, f: Var) -> Var {
        let st = &self.stages[stage - 1];
        let ap = g.channel_pool(f, PoolKind::Avg);
        let mp = g.channel_pool(f, PoolKind::Max);
        let cat = g.concat(ap, mp);
        let c = self.layer(g, &st.spa_conv, cat);
        let n = self.layer(g, &st.spa_norm, c);
        g.sigmoid(n)
    }

    /// `F_A,i = sigmoid(spa ⊙ spe)`; a disabled half is replaced by ones.
    /// Returns `None` when attention is off.
    pub fn ssam(&self, g: &mut Graph<T>, stage: usize, fx: Var, fy: Var) -> Option<Var> {
        let mode = self.config.attention;
        if mode == AttentionMode::Off {
            return None;
        }
        let ns = self.config.channels;
        let s = g.shape(fy).to_vec();
        let spe = if mode.spectral() {
            self.spectral_attention(g, fx)
        } else {
            g.input(Array::filled(&[ns], T::one()))
        };
        let spa = if mode.spatial() {
            self.spatial_attention(g, stage, fy)
        } else {
            g.input(Array::filled(&[1, s[1], s[2]], T::one()))
        };
        let o = g.outer(spe, spa);
        Some(g.sigmoid(o))
    }

    /// Full CTFN pass from LR-HSI `x [S,w,h]` and HR-MSI `y [s,W,H]` to the
    /// core feature `[n3, n1, n2]`. Also returns the attention maps.
    pub fn core(&self, g: &mut Graph<T>, x: Var, y: Var) -> (Var, Vec<Var>) {
        let cfg = &self.config;
        let (w, h, s_big) = cfg.lr_dims();
        assert_eq!(g.shape(x), &[s_big, w, h], "LR-HSI input shape");
        assert_eq!(
            g.shape(y),
            &[cfg.msi_bands, cfg.hr_dims.0, cfg.hr_dims.1],
            "HR-MSI input shape"
        );
        let fx0 = self.conv_relu(g, &self.enc_x.0, x);
        let fx0 = self.conv_relu(g, &self.enc_x.1, fx0);
        let fy0 = self.conv_relu(g, &self.enc_y.0, y);
        let fy0 = self.conv_relu(g, &self.enc_y.1, fy0);
        g.set_label(fx0, "F_X,0");
        g.set_label(fy0, "F_Y,0");

        let mut fxs = vec![fx0];
        let mut fys = vec![fy0];
        for (i, st) in self.stages.iter().enumerate() {
            let (fx, fy) = (fxs[i], fys[i]);
            let spe = cfg.attention.spectral().then(|| self.spectral_attention(g, fx));
            let mut nx = self.conv_relu(g, &st.ssab, fx);
            let r = self.conv_relu(g, &st.res_a, fy);
            let r = self.layer(g, &st.res_b, r);
            let res = g.add(fy, r);
            let mut ny = self.conv_relu(g, &st.down, res);
            if let Some(spe) = spe {
                nx = g.mul_channel(nx, spe);
                ny = g.mul_channel(ny, spe);
            }
            g.set_label(nx, format!("F_X,{}", i + 1));
            g.set_label(ny, format!("F_Y,{}", i + 1));
            fxs.push(nx);
            fys.push(ny);
        }

        let s = self.stages.len();
        let cat = g.concat(fys[s], fxs[s]);
        let mut up = self.conv_relu(g, &self.fusion, cat);
        g.set_label(up, "F_B");
        let mut attention = Vec::new();
        for i in (1..=s).rev() {
            let st = &self.stages[i - 1];
            let a = self.conv_relu(g, &st.f1, up);
            let k = self.conv_relu(g, &st.sfb, fys[i]);
            let cat = g.concat(a, k);
            let mut fused = self.conv_relu(g, &st.f2, cat);
            if let Some(fa) = self.ssam(g, i, fxs[i], fys[i]) {
                g.set_label(fa, format!("F_A,{i}"));
                attention.push(fa);
                fused = g.mul(fa, fused);
            }
            up = self.conv_relu(g, &st.suab, fused);
            g.set_label(up, format!("F_up,{i}"));
        }

        let c = self.layer(g, &self.trans, up);
        let rw = g.param(&self.store, self.resample_w);
        let rh = g.param(&self.store, self.resample_h);
        let c = g.mode_apply(c, rw, Axis::Row);
        let core = g.mode_apply(c, rh, Axis::Col);
        g.set_label(core, "F_C");
        (core, attention)
    }

    /// `core ×₃ s ×₁ w ×₂ h` for factor nodes `s [S,n3]`, `w [W,n1]`, `h [H,n2]`.
    pub fn decode_with(g: &mut Graph<T>, core: Var, s: Var, w: Var, h: Var) -> Var {
        let z = g.mode_apply(core, s, Axis::Channel);
        let z = g.mode_apply(z, w, Axis::Row);
        g.mode_apply(z, h, Axis::Col)
    }

    pub fn psf_nodes(&self, g: &mut Graph<T>) -> (Var, Var) {
        let (wd, ht, _) = self.config.hr_dims;
        let (r, off) = (self.config.ratio, self.config.psf_offset());
        let kw = g.param(&self.store, self.factors.psf_w);
        let kh = g.param(&self.store, self.factors.psf_h);
        let p1 = g.psf_matrix(kw, wd, r, off);
        let p2 = g.psf_matrix(kh, ht, r, off);
        (p1, p2)
    }

    pub fn srf_node(&self, g: &mut Graph<T>) -> Var {
        let raw = g.param(&self.store, self.factors.srf);
        g.row_normalize_nonneg(raw)
    }

    /// `PSF(t)` for `t [c, W, H]`.
    pub fn apply_psf(g: &mut Graph<T>, t: Var, p1: Var, p2: Var) -> Var {
        let a = g.mode_apply(t, p1, Axis::Row);
        g.mode_apply(a, p2, Axis::Col)
    }

    /// `SRF(t)` for `t [S, r, q]`.
    pub fn apply_srf(g: &mut Graph<T>, t: Var, p3: Var) -> Var {
        g.mode_apply(t, p3, Axis::Channel)
    }

    pub fn forward(&self, g: &mut Graph<T>, x: Var, y: Var) -> Forward {
        let (core, attention) = self.core(g, x, y);
        let theta_s = g.param(&self.store, self.factors.s);
        let theta_w = g.param(&self.store, self.factors.w);
        let theta_h = g.param(&self.store, self.factors.h);
        let (p1, p2) = self.psf_nodes(g);
        let p3 = self.srf_node(g);

        let z = Self::decode_with(g, core, theta_s, theta_w, theta_h);
        g.set_label(z, "Z_hat");
        let w_lr = g.matmul(p1, theta_w);
        let h_lr = g.matmul(p2, theta_h);
        let x_hat = Self::decode_with(g, core, theta_s, w_lr, h_lr);
        g.set_label(x_hat, "X_hat");
        let s_msi = g.matmul(p3, theta_s);
        let y_hat = Self::decode_with(g, core, s_msi, theta_w, theta_h);
        g.set_label(y_hat, "Y_hat");
        Forward {
            core,
            z,
            x_hat,
            y_hat,
            theta_s,
            theta_w,
            theta_h,
            p1,
            p2,
            p3,
            attention,
        }
    }

    /// Forward pass on cubes; returns the graph with the inputs recorded.
    pub fn forward_cubes(&self, x: &HyperCube, y: &HyperCube) -> Result<(Graph<T>, Forward)> {
        let cfg = &self.config;
        if x.dims() != cfg.lr_dims() {
            return Err(Error::shape(format!(
                "LR-HSI is {:?}, network expects {:?}",
                x.dims(),
                cfg.lr_dims()
            )));
        }
        if y.dims() != cfg.msi_dims() {
            return Err(Error::shape(format!(
                "HR-MSI is {:?}, network expects {:?}",
                y.dims(),
                cfg.msi_dims()
            )));
        }
        let mut g = Graph::new();
        let xv = g.input(cube_to_array(x));
        let yv = g.input(cube_to_array(y));
        let f = self.forward(&mut g, xv, yv);
        Ok((g, f))
    }

    fn param_matrix(&self, id: ParamId) -> DenseMatrix {
        let a = self.store.value(id);
        DenseMatrix::from_fn(a.shape()[0], a.shape()[1], |i, j| {
            a.data()[i * a.shape()[1] + j].as_f64()
        })
    }

    /// Current factor matrices `(W, H, S)`.
    pub fn factor_matrices(&self) -> (DenseMatrix, DenseMatrix, DenseMatrix) {
        (
            self.param_matrix(self.factors.w),
            self.param_matrix(self.factors.h),
            self.param_matrix(self.factors.s),
        )
    }

    /// The learned degradation operators `(P1, P2, P3)`, P3 normalized.
    pub fn degradation_matrices(&self) -> (DenseMatrix, DenseMatrix, DenseMatrix) {
        let mut g = Graph::new();
        let (p1, p2) = self.psf_nodes(&mut g);
        let p3 = self.srf_node(&mut g);
        let m = |v: Var| {
            let a = g.value(v);
            DenseMatrix::from_fn(a.shape()[0], a.shape()[1], |i, j| {
                a.data()[i * a.shape()[1] + j].as_f64()
            })
        };
        (m(p1), m(p2), m(p3))
    }

    /// Tucker factors of the current model for inputs `x`, `y`.
    pub fn tucker_factors(&self, x: &HyperCube, y: &HyperCube) -> Result<TuckerFactors> {
        let (g, f) = self.forward_cubes(x, y)?;
        let core = array_to_cube(g.value(f.core))?;
        let (w, h, s) = self.factor_matrices();
        TuckerFactors::new(core, w, h, s)
    }

    /// Overwrites a parameter, checking its shape.
    pub fn set_param(&mut self, id: ParamId, value: Array<T>) -> Result<()> {
        let cur = self.store.value(id);
        if cur.shape() != value.shape() {
            return Err(Error::shape(format!(
                "`{}` has shape {:?}, got {:?}",
                self.store.name(id),
                cur.shape(),
                value.shape()
            )));
        }
        *self.store.value_mut(id) = value;
        Ok(())
    }
}

/// A cube as a `[bands, width, height]` array.
pub fn cube_to_array<T: Real>(c: &HyperCube) -> Array<T> {
    let (w, h, s) = c.dims();
    Array::from_f64(vec![s, w, h], c.data())
}

/// Inverse of [`cube_to_array`].
pub fn array_to_cube<T: Real>(a: &Array<T>) -> Result<HyperCube> {
    let s = a.shape();
    if s.len() != 3 {
        return Err(Error::shape(format!("expected a 3-D array, got {s:?}")));
    }
    HyperCube::new((s[1], s[2], s[0]), a.to_f64())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_config() -> CtfnConfig {
        let mut c = CtfnConfig::from_inputs((4, 4, 6), (16, 16, 3)).unwrap();
        c.channels = 8;
        c.core_dims = (14, 13, 5);
        c
    }

    #[test]
    fn config_rejects_bad_ratios() {
        assert!(CtfnConfig::from_inputs((4, 4, 6), (12, 12, 3)).is_err());
        assert!(CtfnConfig::from_inputs((4, 4, 6), (16, 8, 3)).is_err());
        assert!(CtfnConfig::from_inputs((4, 4, 6), (4, 4, 3)).is_err());
        assert!(CtfnConfig::from_inputs((4, 4, 6), (17, 16, 3)).is_err());
        assert!(CtfnConfig::from_inputs((4, 4, 6), (16, 16, 6)).is_err());
        let c = CtfnConfig::from_inputs((4, 4, 6), (32, 32, 3)).unwrap();
        assert_eq!(c.stages(), 3);
    }

    #[test]
    fn default_core_dims_for_pavia_like_scene() {
        assert_eq!(default_core_dims(256, 256, 103), (218, 218, 40));
        let c = CtfnConfig::from_inputs((32, 32, 103), (256, 256, 4)).unwrap();
        assert_eq!(c.core_dims, (218, 218, 40));
    }

    #[test]
    fn resample_rows_sum_to_one() {
        let m = linear_resample_matrix(27, 32);
        for r in m.chunks(32) {
            assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        let id = linear_resample_matrix(5, 5);
        for i in 0..5 {
            assert_eq!(id[i * 5 + i], 1.0);
        }
    }

    #[test]
    fn forward_shapes() {
        let net = Network::<f32>::new(toy_config(), 1).unwrap();
        let x = HyperCube::filled((4, 4, 6), 0.5);
        let y = HyperCube::filled((16, 16, 3), 0.5);
        let (g, f) = net.forward_cubes(&x, &y).unwrap();
        assert_eq!(g.shape(f.core), &[5, 14, 13]);
        assert_eq!(g.shape(f.z), &[6, 16, 16]);
        assert_eq!(g.shape(f.x_hat), &[6, 4, 4]);
        assert_eq!(g.shape(f.y_hat), &[3, 16, 16]);
        assert_eq!(f.attention.len(), 2);
        assert_eq!(g.shape(f.attention[0]), &[8, 4, 4]);
        assert_eq!(g.shape(f.attention[1]), &[8, 8, 8]);
        assert!(net.forward_cubes(&y, &x).is_err());
    }
}
