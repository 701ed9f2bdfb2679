//! Loss terms, the joint objective and the unsupervised training loop.
//!
//! Every distance is mean-normalized (mean absolute error for L1, mean
//! squared error for L2) so the weights do not depend on image size.

use crate::autodiff::{Array, Graph, Var};
use crate::error::{Error, Result};
use crate::manifold::{ManifoldGraphs, ManifoldNodes, Sigma, DEFAULT_K};
use crate::network::{array_to_cube, cube_to_array, CtfnConfig, Forward, Network};
use crate::nn::{AdamState, Checkpoint, LrSchedule};
use crate::real::Real;
use crate::tensor::{mode_product, DenseMatrix, HyperCube, Mode};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    L1,
    L2,
}

impl LossKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "l1" | "L1" => Ok(LossKind::L1),
            "l2" | "L2" => Ok(LossKind::L2),
            _ => Err(Error::arg(format!("loss must be l1 or l2, got `{s}`"))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            LossKind::L1 => "l1",
            LossKind::L2 => "l2",
        }
    }

    fn distance(self, a: &[f64], b: &[f64]) -> f64 {
        let n = a.len() as f64;
        match self {
            LossKind::L1 => a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>() / n,
            LossKind::L2 => a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / n,
        }
    }

    fn node<T: Real>(self, g: &mut Graph<T>, a: Var, b: Var) -> Var {
        match self {
            LossKind::L1 => g.mean_abs_diff(a, b),
            LossKind::L2 => g.mean_sq_diff(a, b),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub gamma: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha: 1e-1,
            beta1: 1e-3,
            beta2: 1e-2,
            gamma: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("alpha", self.alpha),
            ("beta1", self.beta1),
            ("beta2", self.beta2),
            ("gamma", self.gamma),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::arg(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

/// Which terms enter the joint loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LossSwitches {
    pub rec: bool,
    pub psf_srf: bool,
    pub manifold: bool,
}

impl Default for LossSwitches {
    fn default() -> Self {
        Self {
            rec: true,
            psf_srf: true,
            manifold: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub schedule: LrSchedule,
    pub seed: u64,
    pub weights: LossWeights,
    pub switches: LossSwitches,
    pub loss: LossKind,
    pub knn_k: usize,
    pub sigma: Sigma,
    /// Pixel stride when building the band graph.
    pub spectral_stride: usize,
    pub freeze_psf: bool,
    pub freeze_srf: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let schedule = LrSchedule::default();
        Self {
            epochs: schedule.total_epochs,
            schedule,
            seed: 0,
            weights: LossWeights::default(),
            switches: LossSwitches::default(),
            loss: LossKind::L1,
            knn_k: DEFAULT_K,
            sigma: Sigma::Auto,
            spectral_stride: 1,
            freeze_psf: false,
            freeze_srf: false,
        }
    }
}

impl TrainConfig {
    /// Default settings on a shortened schedule: decay starts at the same
    /// fraction (30%) of the run.
    pub fn with_epochs(epochs: usize) -> Self {
        let base = Self::default();
        Self {
            epochs,
            schedule: LrSchedule {
                base_lr: base.schedule.base_lr,
                total_epochs: epochs,
                decay_start: epochs * 3 / 10,
            },
            ..base
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::arg("epochs must be positive"));
        }
        if self.schedule.total_epochs < self.epochs {
            return Err(Error::arg(format!(
                "schedule covers {} epochs but training runs {}",
                self.schedule.total_epochs, self.epochs
            )));
        }
        LrSchedule::new(
            self.schedule.base_lr,
            self.schedule.total_epochs,
            self.schedule.decay_start,
        )?;
        self.weights.validate()?;
        if !(self.switches.rec || self.switches.psf_srf || self.switches.manifold) {
            return Err(Error::arg("at least one loss term must be enabled"));
        }
        if self.spectral_stride == 0 {
            return Err(Error::arg("spectral_stride must be positive"));
        }
        Ok(())
    }
}

/// One row of the loss trace. Term values are unweighted; disabled terms are 0.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceRow {
    /// One-based.
    pub epoch: usize,
    pub lr: f64,
    pub rec: f64,
    /// `d(X, PSF(Ẑ)) + d(Y, SRF(Ẑ))`
    pub degraded: f64,
    /// `d(SRF(X), PSF(Y))`
    pub lr_msi: f64,
    pub spe_manifold: f64,
    pub spa_manifold: f64,
    pub total: f64,
}

impl TraceRow {
    pub const CSV_HEADER: &'static str = "epoch,lr,L_rec,L_degraded,L_LR-MSI,L_spe-manifold,L_spa-manifold,L_total";

    pub fn csv(&self) -> String {
        format!(
            "{},{:e},{:e},{:e},{:e},{:e},{:e},{:e}",
            self.epoch, self.lr, self.rec, self.degraded, self.lr_msi, self.spe_manifold, self.spa_manifold, self.total
        )
    }
}

// ---- cube-level reference losses -----------------------------------------

fn check_same(a: &HyperCube, b: &HyperCube, what: &str) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::shape(format!("{what}: {:?} vs {:?}", a.dims(), b.dims())));
    }
    Ok(())
}

/// `d(X, X̂) + d(Y, Ŷ)`.
pub fn rec_loss(x: &HyperCube, x_hat: &HyperCube, y: &HyperCube, y_hat: &HyperCube, kind: LossKind) -> Result<f64> {
    check_same(x, x_hat, "rec_loss LR-HSI")?;
    check_same(y, y_hat, "rec_loss HR-MSI")?;
    Ok(kind.distance(x.data(), x_hat.data()) + kind.distance(y.data(), y_hat.data()))
}

/// Spatial/spectral operators as plain matrices.
#[derive(Debug, Clone)]
pub struct Operators {
    pub p1: DenseMatrix,
    pub p2: DenseMatrix,
    pub p3: DenseMatrix,
}

impl Operators {
    pub fn psf(&self, t: &HyperCube) -> Result<HyperCube> {
        mode_product(&mode_product(t, &self.p1, Mode::Width)?, &self.p2, Mode::Height)
    }

    pub fn srf(&self, t: &HyperCube) -> Result<HyperCube> {
        mode_product(t, &self.p3, Mode::Band)
    }
}

/// `(d(X, PSF(Ẑ)) + d(Y, SRF(Ẑ)), d(SRF(X), PSF(Y)))`.
pub fn degradation_terms(
    x: &HyperCube,
    y: &HyperCube,
    z_hat: &HyperCube,
    ops: &Operators,
    kind: LossKind,
) -> Result<(f64, f64)> {
    let pz = ops.psf(z_hat)?;
    let sz = ops.srf(z_hat)?;
    check_same(x, &pz, "PSF(Z)")?;
    check_same(y, &sz, "SRF(Z)")?;
    let sx = ops.srf(x)?;
    let py = ops.psf(y)?;
    check_same(&sx, &py, "LR-MSI")?;
    Ok((
        kind.distance(x.data(), pz.data()) + kind.distance(y.data(), sz.data()),
        kind.distance(sx.data(), py.data()),
    ))
}

/// `d(X, PSF(Ẑ)) + d(Y, SRF(Ẑ)) + γ d(SRF(X), PSF(Y))`.
pub fn psf_srf_loss(
    x: &HyperCube,
    y: &HyperCube,
    z_hat: &HyperCube,
    ops: &Operators,
    gamma: f64,
    kind: LossKind,
) -> Result<f64> {
    let (deg, lr) = degradation_terms(x, y, z_hat, ops, kind)?;
    Ok(deg + gamma * lr)
}

/// `rec + α psf_srf + manifold`, where `manifold` is already β-weighted.
pub fn joint_loss(rec: f64, psf_srf: f64, manifold: f64, alpha: f64) -> f64 {
    rec + alpha * psf_srf + manifold
}

// ---- graph-level objective ------------------------------------------------

/// Loss nodes of one forward pass. Disabled terms are `None`.
#[derive(Debug, Clone)]
pub struct LossNodes {
    pub rec: Option<Var>,
    pub degraded: Option<Var>,
    pub lr_msi: Option<Var>,
    pub spe: Option<Var>,
    pub spa: Option<Var>,
    pub total: Var,
}

/// Builds the joint objective on top of a network forward pass.
pub fn build_loss<T: Real>(
    g: &mut Graph<T>,
    f: &Forward,
    x: Var,
    y: Var,
    manifold: Option<&ManifoldNodes>,
    cfg: &TrainConfig,
) -> LossNodes {
    let k = cfg.loss;
    let w = cfg.weights;
    let mut parts: Vec<Var> = Vec::new();
    let rec = cfg.switches.rec.then(|| {
        let a = k.node(g, x, f.x_hat);
        let b = k.node(g, y, f.y_hat);
        g.add(a, b)
    });
    if let Some(r) = rec {
        g.set_label(r, "L_rec");
        parts.push(r);
    }
    let (mut degraded, mut lr_msi) = (None, None);
    if cfg.switches.psf_srf {
        let pz = Network::apply_psf(g, f.z, f.p1, f.p2);
        let sz = Network::apply_srf(g, f.z, f.p3);
        let a = k.node(g, x, pz);
        let b = k.node(g, y, sz);
        let deg = g.add(a, b);
        let sx = Network::apply_srf(g, x, f.p3);
        let py = Network::apply_psf(g, y, f.p1, f.p2);
        let lm = k.node(g, sx, py);
        let weighted_lm = g.scale(lm, w.gamma);
        let sum = g.add(deg, weighted_lm);
        parts.push(g.scale(sum, w.alpha));
        degraded = Some(deg);
        lr_msi = Some(lm);
    }
    let (mut spe, mut spa) = (None, None);
    if cfg.switches.manifold {
        let m = manifold.expect("manifold graphs required when the manifold term is enabled");
        let (a, b) = m.terms(g, f.theta_s, f.theta_w, f.theta_h);
        let wa = g.scale(a, w.beta1);
        let wb = g.scale(b, w.beta2);
        parts.push(g.add(wa, wb));
        spe = Some(a);
        spa = Some(b);
    }
    let mut total = parts[0];
    for &p in &parts[1..] {
        total = g.add(total, p);
    }
    g.set_label(total, "L_total");
    LossNodes {
        rec,
        degraded,
        lr_msi,
        spe,
        spa,
        total,
    }
}

/// Training session: network, optimizer state, inputs and the loss trace.
pub struct Trainer<T: Real> {
    net: Network<T>,
    adam: AdamState<T>,
    cfg: TrainConfig,
    x: Array<T>,
    y: Array<T>,
    graphs: Option<ManifoldGraphs>,
    frozen: Vec<bool>,
    epoch: usize,
    trace: Vec<TraceRow>,
}

/// Result of [`train`].
pub struct TrainOutcome<T: Real> {
    pub network: Network<T>,
    pub fused: HyperCube,
    pub trace: Vec<TraceRow>,
}

impl<T: Real> Trainer<T> {
    /// Builds graphs and initializes a network with `cfg.seed`.
    pub fn new(x: &HyperCube, y: &HyperCube, net_cfg: CtfnConfig, cfg: TrainConfig) -> Result<Self> {
        let net = Network::new(net_cfg, cfg.seed)?;
        Self::with_network(net, x, y, cfg)
    }

    pub fn with_network(net: Network<T>, x: &HyperCube, y: &HyperCube, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let nc = net.config();
        if x.dims() != nc.lr_dims() || y.dims() != nc.msi_dims() {
            return Err(Error::shape(format!(
                "inputs {:?} / {:?} do not match network {:?} / {:?}",
                x.dims(),
                y.dims(),
                nc.lr_dims(),
                nc.msi_dims()
            )));
        }
        let graphs = if cfg.switches.manifold {
            Some(ManifoldGraphs::build(x, y, cfg.knn_k, cfg.sigma, cfg.spectral_stride)?)
        } else {
            None
        };
        let ids = net.factor_ids();
        let frozen = net
            .store()
            .ids()
            .map(|id| (cfg.freeze_psf && (id == ids.psf_w || id == ids.psf_h)) || (cfg.freeze_srf && id == ids.srf))
            .collect();
        Ok(Self {
            adam: AdamState::new(net.store()),
            net,
            cfg,
            x: cube_to_array(x),
            y: cube_to_array(y),
            graphs,
            frozen,
            epoch: 0,
            trace: Vec::new(),
        })
    }

    pub fn network(&self) -> &Network<T> {
        &self.net
    }

    pub fn network_mut(&mut self) -> &mut Network<T> {
        &mut self.net
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn graphs(&self) -> Option<&ManifoldGraphs> {
        self.graphs.as_ref()
    }

    /// Epochs completed so far.
    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn trace(&self) -> &[TraceRow] {
        &self.trace
    }

    pub fn is_done(&self) -> bool {
        self.epoch >= self.cfg.epochs
    }

    /// Records a full forward pass and the loss on a fresh graph.
    pub fn forward(&self) -> (Graph<T>, Forward, LossNodes) {
        let mut g = Graph::new();
        let xv = g.input(self.x.clone());
        let yv = g.input(self.y.clone());
        let f = self.net.forward(&mut g, xv, yv);
        let m = self.graphs.as_ref().map(|gr| ManifoldNodes::insert(&mut g, gr));
        let l = build_loss(&mut g, &f, xv, yv, m.as_ref(), &self.cfg);
        (g, f, l)
    }

    fn row(&self, g: &Graph<T>, l: &LossNodes, lr: f64) -> TraceRow {
        let v = |n: Option<Var>| n.map_or(0.0, |n| g.scalar(n).as_f64());
        TraceRow {
            epoch: self.epoch + 1,
            lr,
            rec: v(l.rec),
            degraded: v(l.degraded),
            lr_msi: v(l.lr_msi),
            spe_manifold: v(l.spe),
            spa_manifold: v(l.spa),
            total: g.scalar(l.total).as_f64(),
        }
    }

    /// One epoch: forward, backward, ADAM update. Returns the epoch's trace row
    /// (losses measured before the update).
    pub fn step(&mut self) -> Result<TraceRow> {
        if self.is_done() {
            return Err(Error::arg(format!(
                "training already finished {} epochs",
                self.cfg.epochs
            )));
        }
        let lr = self.cfg.schedule.lr_at(self.epoch)?;
        let (g, _, l) = self.forward();
        let row = self.row(&g, &l, lr);
        if !row.total.is_finite() {
            return Err(Error::NonFinite {
                epoch: row.epoch,
                tensor: g.first_non_finite().unwrap_or_else(|| "L_total".into()),
            });
        }
        let grads = g.backward(l.total).for_store(self.net.store());
        if let Some((id, _)) = self.net.store().ids().zip(&grads).find(|(_, gr)| !gr.is_finite()) {
            return Err(Error::NonFinite {
                epoch: row.epoch,
                tensor: format!("gradient of {}", self.net.store().name(id)),
            });
        }
        self.adam.step(self.net.store_mut(), &grads, lr, &self.frozen)?;
        self.epoch += 1;
        self.trace.push(row);
        Ok(row)
    }

    /// Trains to the configured epoch count, calling `on_epoch` after each step.
    pub fn run_with(&mut self, mut on_epoch: impl FnMut(&TraceRow)) -> Result<()> {
        while !self.is_done() {
            let row = self.step()?;
            on_epoch(&row);
        }
        Ok(())
    }

    pub fn run(&mut self) -> Result<()> {
        self.run_with(|_| {})
    }

    /// Current HR-HSI estimate.
    pub fn fused(&self) -> Result<HyperCube> {
        let (g, f, _) = self.forward();
        array_to_cube(g.value(f.z))
    }

    /// Current core tensor as a cube of dims `(n1, n2, n3)`.
    pub fn core(&self) -> Result<HyperCube> {
        let (g, f, _) = self.forward();
        array_to_cube(g.value(f.core))
    }

    /// Parameters, optimizer moments, step counters and the current core.
    pub fn checkpoint(&self) -> Result<Checkpoint> {
        let mut c = Checkpoint::new();
        let store = self.net.store();
        for (k, id) in store.ids().enumerate() {
            let name = store.name(id);
            c.push(format!("param/{name}"), store.value(id));
            c.push(format!("adam.m/{name}"), &self.adam.m[k]);
            c.push(format!("adam.v/{name}"), &self.adam.v[k]);
        }
        c.push("adam.t", &Array::<f64>::scalar(self.adam.t as f64));
        c.push("train.epoch", &Array::<f64>::scalar(self.epoch as f64));
        let core = self.core()?;
        let (n1, n2, n3) = core.dims();
        c.push("core", &Array::<f64>::from_f64(vec![n3, n1, n2], core.data()));
        Ok(c)
    }

    /// Restores state saved by [`Trainer::checkpoint`] from a trainer built
    /// with the same configuration.
    pub fn restore(&mut self, c: &Checkpoint) -> Result<()> {
        let ids: Vec<_> = self.net.store().ids().collect();
        for (k, id) in ids.into_iter().enumerate() {
            let name = self.net.store().name(id).to_string();
            let p: Array<T> = c.require(&format!("param/{name}"))?;
            let m: Array<T> = c.require(&format!("adam.m/{name}"))?;
            let v: Array<T> = c.require(&format!("adam.v/{name}"))?;
            if m.shape() != p.shape() || v.shape() != p.shape() {
                return Err(Error::shape(format!("optimizer state of `{name}` has the wrong shape")));
            }
            self.net.set_param(id, p)?;
            self.adam.m[k] = m;
            self.adam.v[k] = v;
        }
        let scalar = |name: &str| -> Result<usize> {
            let a: Array<f64> = c.require(name)?;
            let v = a.data()[0];
            if v < 0.0 || v.fract() != 0.0 {
                return Err(Error::arg(format!("checkpoint `{name}` is not a count: {v}")));
            }
            Ok(v as usize)
        };
        self.adam.t = scalar("adam.t")? as u64;
        let epoch = scalar("train.epoch")?;
        if epoch > self.cfg.epochs {
            return Err(Error::arg(format!(
                "checkpoint is at epoch {epoch}, past the configured {}",
                self.cfg.epochs
            )));
        }
        self.epoch = epoch;
        self.trace.clear();
        Ok(())
    }
}

/// Trains from scratch and returns the network, the fused cube and the trace.
pub fn train(x: &HyperCube, y: &HyperCube, net_cfg: CtfnConfig, cfg: TrainConfig) -> Result<TrainOutcome<f32>> {
    let mut t = Trainer::<f32>::new(x, y, net_cfg, cfg)?;
    t.run()?;
    let fused = t.fused()?;
    Ok(TrainOutcome {
        fused,
        trace: t.trace,
        network: t.net,
    })
}
