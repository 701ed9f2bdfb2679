//! File formats and experiment configuration.
//!
//! Cube files:
//!
//! ```text
//! HSICUBE1\n
//! <W> <H> <S>\n
//! W*H*S little-endian f32, band-major; within a band the width index is
//! the slow axis (value (i, j, b) at offset b*W*H + i*H + j)
//! ```
//!
//! Values are stored as `f32`, so a roundtrip is exact for cubes whose
//! values are `f32`-representable.

use std::fmt::Write as _;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::{Path, PathBuf};

use crate::degradation::{even_ranges, ranges_from_wavelengths, srf_from_ranges, SpectralResponse, LANDSAT8_OLI_NM};
use crate::error::{Error, Result};
use crate::manifold::{Sigma, DEFAULT_K};
use crate::network::{default_core_dims, AttentionMode, CtfnConfig, DEFAULT_CHANNELS, DEFAULT_REDUCTION};
use crate::nn::LrSchedule;
use crate::tensor::{DenseMatrix, HyperCube};
use crate::train::{LossKind, LossSwitches, LossWeights, TraceRow, TrainConfig};

const CUBE_MAGIC: &str = "HSICUBE1";

fn create(path: &Path) -> Result<std::io::BufWriter<std::fs::File>> {
    std::fs::File::create(path)
        .map(std::io::BufWriter::new)
        .map_err(|e| Error::io(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

pub fn cube_to_bytes(c: &HyperCube) -> Vec<u8> {
    let (w, h, s) = c.dims();
    let mut out = format!("{CUBE_MAGIC}\n{w} {h} {s}\n").into_bytes();
    out.reserve(c.data().len() * 4);
    for &v in c.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

pub fn write_cube(path: &Path, c: &HyperCube) -> Result<()> {
    let mut f = create(path)?;
    f.write_all(&cube_to_bytes(c)).map_err(|e| Error::io(path, e))?;
    f.flush().map_err(|e| Error::io(path, e))
}

/// Parses a cube file; `path` only labels errors.
pub fn cube_from_bytes(bytes: &[u8], path: &Path) -> Result<HyperCube> {
    let mut lines = bytes.splitn(3, |&b| b == b'\n');
    let magic = lines.next().unwrap_or_default();
    if magic != CUBE_MAGIC.as_bytes() {
        return Err(Error::format(path, 1, format!("expected `{CUBE_MAGIC}` header")));
    }
    let header = lines
        .next()
        .and_then(|l| std::str::from_utf8(l).ok())
        .ok_or_else(|| Error::format(path, 2, "missing dimension line"))?;
    let dims: Vec<usize> = header
        .split_whitespace()
        .map(|t| t.parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| Error::format(path, 2, format!("bad dimension line `{header}`")))?;
    if dims.len() != 3 || dims.contains(&0) {
        return Err(Error::format(
            path,
            2,
            format!("dimension line must hold three positive integers, got `{header}`"),
        ));
    }
    let payload = lines.next().unwrap_or_default();
    let n = dims[0] * dims[1] * dims[2];
    if payload.len() != n * 4 {
        return Err(Error::format(
            path,
            3,
            format!("payload has {} bytes, header needs {}", payload.len(), n * 4),
        ));
    }
    let data: Vec<f64> = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
        return Err(Error::format(path, 3, format!("non-finite value at element {pos}")));
    }
    HyperCube::new((dims[0], dims[1], dims[2]), data)
}

pub fn read_cube(path: &Path) -> Result<HyperCube> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    cube_from_bytes(&bytes, path)
}

/// Comma-separated rows.
pub fn write_matrix_csv(path: &Path, m: &DenseMatrix) -> Result<()> {
    let mut s = String::new();
    for i in 0..m.rows() {
        let row: Vec<String> = m.row(i).iter().map(|v| v.to_string()).collect();
        s.push_str(&row.join(","));
        s.push('\n');
    }
    write_text(path, &s)
}

pub fn parse_matrix_csv(text: &str, path: &Path) -> Result<DenseMatrix> {
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let row = line
            .split(',')
            .map(|t| t.trim().parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::format(path, ln + 1, format!("bad number: {e}")))?;
        if let Some(first) = rows.first() {
            if first.len() != row.len() {
                return Err(Error::format(
                    path,
                    ln + 1,
                    format!("row has {} values, expected {}", row.len(), first.len()),
                ));
            }
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(Error::format(path, 1, "empty matrix"));
    }
    let (r, c) = (rows.len(), rows[0].len());
    DenseMatrix::new(r, c, rows.into_iter().flatten().collect()).map_err(|e| Error::format(path, 1, e.to_string()))
}

pub fn read_matrix_csv(path: &Path) -> Result<DenseMatrix> {
    parse_matrix_csv(&read_text(path)?, path)
}

/// Writes `m` as an 8-bit PGM (image width = rows of `m`, height = columns),
/// min-max scaled, plus `<path>.range.txt` holding the value range.
pub fn write_heatmap(path: &Path, m: &DenseMatrix) -> Result<(f64, f64)> {
    let lo = m.data().iter().copied().fold(f64::INFINITY, f64::min);
    let hi = m.data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let (w, h) = (m.rows(), m.cols());
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    for j in 0..h {
        for i in 0..w {
            let v = if hi > lo {
                ((m.get(i, j) - lo) / (hi - lo) * 255.0).round()
            } else {
                0.0
            };
            out.push(v as u8);
        }
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))?;
    let side = sidecar_path(path);
    write_text(&side, &format!("min {lo}\nmax {hi}\n"))?;
    Ok((lo, hi))
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".range.txt");
    PathBuf::from(s)
}

/// Reads an 8-bit binary PGM as `(width, height, pixels row by row)`.
pub fn read_pgm(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::format(path, 1, "truncated PGM header"));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    pos += 1;
    if fields[0] != "P5" || fields[3] != "255" {
        return Err(Error::format(path, 1, "expected an 8-bit P5 image"));
    }
    let parse = |s: &str| s.parse::<usize>().map_err(|_| Error::format(path, 1, "bad PGM size"));
    let (w, h) = (parse(&fields[1])?, parse(&fields[2])?);
    let px = bytes.get(pos..).unwrap_or_default().to_vec();
    if px.len() != w * h {
        return Err(Error::format(path, 1, "PGM payload size mismatch"));
    }
    Ok((w, h, px))
}

pub fn write_trace_csv(path: &Path, rows: &[TraceRow]) -> Result<()> {
    let mut s = String::from(TraceRow::CSV_HEADER);
    s.push('\n');
    for r in rows {
        s.push_str(&r.csv());
        s.push('\n');
    }
    write_text(path, &s)
}

/// Reads the `L_total` column of a trace CSV.
pub fn read_trace_totals(path: &Path) -> Result<Vec<f64>> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (ln, line) in BufReader::new(f).lines().enumerate().skip(1) {
        let line = line.map_err(|e| Error::io(path, e))?;
        let last = line.rsplit(',').next().unwrap_or_default();
        out.push(
            last.parse::<f64>()
                .map_err(|_| Error::format(path, ln + 1, format!("bad total `{last}`")))?,
        );
    }
    Ok(out)
}

/// Source of the spectral response used by `simulate`.
#[derive(Debug, Clone, PartialEq)]
pub enum SrfSource {
    /// `msi_bands` contiguous boxcars of (nearly) equal width.
    Even,
    /// Landsat-8 OLI bands over the given wavelength span of the HSI (nm).
    Landsat { first_nm: f64, last_nm: f64 },
    /// Inclusive 0-based band ranges.
    Ranges(Vec<(usize, usize)>),
    /// CSV matrix, one row per MSI band.
    File(PathBuf),
}

impl SrfSource {
    pub fn parse(s: &str) -> Result<Self> {
        if s == "even" {
            return Ok(SrfSource::Even);
        }
        if let Some(rest) = s.strip_prefix("landsat:") {
            let parts: Vec<&str> = rest.split(':').collect();
            let nums: Option<Vec<f64>> = parts.iter().map(|p| p.parse().ok()).collect();
            return match nums.as_deref() {
                Some([a, b]) if a < b => Ok(SrfSource::Landsat {
                    first_nm: *a,
                    last_nm: *b,
                }),
                _ => Err(Error::arg(format!("expected landsat:<first_nm>:<last_nm>, got `{s}`"))),
            };
        }
        if let Some(rest) = s.strip_prefix("ranges:") {
            let ranges = rest
                .split(',')
                .map(|r| {
                    let (a, b) = r.split_once('-')?;
                    Some((a.trim().parse().ok()?, b.trim().parse().ok()?))
                })
                .collect::<Option<Vec<(usize, usize)>>>()
                .ok_or_else(|| Error::arg(format!("expected ranges:a-b,c-d,..., got `{s}`")))?;
            return Ok(SrfSource::Ranges(ranges));
        }
        if let Some(p) = s.strip_prefix("file:") {
            return Ok(SrfSource::File(PathBuf::from(p)));
        }
        Err(Error::arg(format!(
            "srf must be even | landsat:<first>:<last> | ranges:<a-b,...> | file:<path>, got `{s}`"
        )))
    }

    pub fn resolve(&self, total_bands: usize, msi_bands: usize) -> Result<SpectralResponse> {
        match self {
            SrfSource::Even => srf_from_ranges(&even_ranges(total_bands, msi_bands)?, total_bands),
            SrfSource::Landsat { first_nm, last_nm } => srf_from_ranges(
                &ranges_from_wavelengths(&LANDSAT8_OLI_NM, *first_nm, *last_nm, total_bands)?,
                total_bands,
            ),
            SrfSource::Ranges(r) => srf_from_ranges(r, total_bands),
            SrfSource::File(p) => SpectralResponse::from_matrix(read_matrix_csv(p)?),
        }
    }
}

impl std::fmt::Display for SrfSource {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            SrfSource::Even => f.write_str("even"),
            SrfSource::Landsat { first_nm, last_nm } => write!(f, "landsat:{first_nm}:{last_nm}"),
            SrfSource::Ranges(r) => {
                let parts: Vec<String> = r.iter().map(|(a, b)| format!("{a}-{b}")).collect();
                write!(f, "ranges:{}", parts.join(","))
            }
            SrfSource::File(p) => write!(f, "file:{}", p.display()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PsfKind {
    Gaussian,
    Block,
}

/// `auto` or an explicit value.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Auto<T> {
    Auto,
    Value(T),
}

impl<T: std::fmt::Display> std::fmt::Display for Auto<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Auto::Auto => f.write_str("auto"),
            Auto::Value(v) => write!(f, "{v}"),
        }
    }
}

/// Everything a run needs, read from `key = value` lines.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub reference: Option<PathBuf>,
    pub lr_hsi: Option<PathBuf>,
    pub hr_msi: Option<PathBuf>,
    pub fused: Option<PathBuf>,
    pub output_dir: PathBuf,

    pub ratio: usize,
    pub psf: PsfKind,
    pub blur_sigma: Auto<f64>,
    pub srf: SrfSource,
    pub msi_bands: usize,
    pub noise_std: f64,

    pub core_dims: Auto<(usize, usize, usize)>,
    pub channels: usize,
    pub reduction: usize,
    pub attention: AttentionMode,
    pub psf_taps: Auto<usize>,

    pub k: usize,
    pub sigma: Sigma,
    pub spectral_stride: usize,

    pub alpha: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub gamma: f64,
    pub loss: LossKind,
    pub use_rec: bool,
    pub use_psf_srf: bool,
    pub use_manifold: bool,
    pub freeze_psf: bool,
    pub freeze_srf: bool,

    pub epochs: usize,
    pub lr: f64,
    pub decay_start: Auto<usize>,
    pub seed: u64,
    pub log_interval: usize,
    pub checkpoint_every: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let sched = LrSchedule::default();
        let w = LossWeights::default();
        Self {
            reference: None,
            lr_hsi: None,
            hr_msi: None,
            fused: None,
            output_dir: PathBuf::from("out"),
            ratio: 4,
            psf: PsfKind::Gaussian,
            blur_sigma: Auto::Auto,
            srf: SrfSource::Even,
            msi_bands: 4,
            noise_std: 0.0,
            core_dims: Auto::Auto,
            channels: DEFAULT_CHANNELS,
            reduction: DEFAULT_REDUCTION,
            attention: AttentionMode::Full,
            psf_taps: Auto::Auto,
            k: DEFAULT_K,
            sigma: Sigma::Auto,
            spectral_stride: 1,
            alpha: w.alpha,
            beta1: w.beta1,
            beta2: w.beta2,
            gamma: w.gamma,
            loss: LossKind::L1,
            use_rec: true,
            use_psf_srf: true,
            use_manifold: true,
            freeze_psf: false,
            freeze_srf: false,
            epochs: sched.total_epochs,
            lr: sched.base_lr,
            decay_start: Auto::Auto,
            seed: 0,
            log_interval: 100,
            checkpoint_every: 0,
        }
    }
}

pub const CONFIG_KEYS: &[&str] = &[
    "reference",
    "lr_hsi",
    "hr_msi",
    "fused",
    "output_dir",
    "ratio",
    "psf",
    "blur_sigma",
    "srf",
    "msi_bands",
    "noise_std",
    "core_dims",
    "channels",
    "reduction",
    "attention",
    "psf_taps",
    "k",
    "sigma",
    "spectral_stride",
    "alpha",
    "beta1",
    "beta2",
    "gamma",
    "loss",
    "use_rec",
    "use_psf_srf",
    "use_manifold",
    "freeze_psf",
    "freeze_srf",
    "epochs",
    "lr",
    "decay_start",
    "seed",
    "log_interval",
    "checkpoint_every",
];

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::arg(format!("`{key}` expects a number, got `{v}`")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(Error::arg(format!("`{key}` expects true/false, got `{v}`"))),
    }
}

fn parse_auto<T: std::str::FromStr>(key: &str, v: &str) -> Result<Auto<T>> {
    if v == "auto" {
        Ok(Auto::Auto)
    } else {
        parse_num(key, v).map(Auto::Value)
    }
}

fn opt_path(v: &str) -> Option<PathBuf> {
    (!v.is_empty()).then(|| PathBuf::from(v))
}

impl ExperimentConfig {
    /// Sets one key. Unknown keys and malformed values are errors.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "reference" => self.reference = opt_path(v),
            "lr_hsi" => self.lr_hsi = opt_path(v),
            "hr_msi" => self.hr_msi = opt_path(v),
            "fused" => self.fused = opt_path(v),
            "output_dir" => self.output_dir = PathBuf::from(v),
            "ratio" => self.ratio = parse_num(key, v)?,
            "psf" => {
                self.psf = match v {
                    "gaussian" => PsfKind::Gaussian,
                    "block" => PsfKind::Block,
                    _ => return Err(Error::arg(format!("psf must be gaussian|block, got `{v}`"))),
                }
            }
            "blur_sigma" => self.blur_sigma = parse_auto(key, v)?,
            "srf" => self.srf = SrfSource::parse(v)?,
            "msi_bands" => self.msi_bands = parse_num(key, v)?,
            "noise_std" => self.noise_std = parse_num(key, v)?,
            "core_dims" => {
                self.core_dims = if v == "auto" {
                    Auto::Auto
                } else {
                    let p: Vec<usize> = v.split(',').map(|t| parse_num(key, t.trim())).collect::<Result<_>>()?;
                    match p.as_slice() {
                        [a, b, c] => Auto::Value((*a, *b, *c)),
                        _ => return Err(Error::arg("core_dims expects auto or n1,n2,n3")),
                    }
                }
            }
            "channels" => self.channels = parse_num(key, v)?,
            "reduction" => self.reduction = parse_num(key, v)?,
            "attention" => self.attention = AttentionMode::parse(v)?,
            "psf_taps" => self.psf_taps = parse_auto(key, v)?,
            "k" => self.k = parse_num(key, v)?,
            "sigma" => self.sigma = Sigma::parse(v)?,
            "spectral_stride" => self.spectral_stride = parse_num(key, v)?,
            "alpha" => self.alpha = parse_num(key, v)?,
            "beta1" => self.beta1 = parse_num(key, v)?,
            "beta2" => self.beta2 = parse_num(key, v)?,
            "gamma" => self.gamma = parse_num(key, v)?,
            "loss" => self.loss = LossKind::parse(v)?,
            "use_rec" => self.use_rec = parse_bool(key, v)?,
            "use_psf_srf" => self.use_psf_srf = parse_bool(key, v)?,
            "use_manifold" => self.use_manifold = parse_bool(key, v)?,
            "freeze_psf" => self.freeze_psf = parse_bool(key, v)?,
            "freeze_srf" => self.freeze_srf = parse_bool(key, v)?,
            "epochs" => self.epochs = parse_num(key, v)?,
            "lr" => self.lr = parse_num(key, v)?,
            "decay_start" => self.decay_start = parse_auto(key, v)?,
            "seed" => self.seed = parse_num(key, v)?,
            "log_interval" => self.log_interval = parse_num(key, v)?,
            "checkpoint_every" => self.checkpoint_every = parse_num(key, v)?,
            _ => return Err(Error::arg(format!("unknown config key `{key}`"))),
        }
        Ok(())
    }

    /// Parses `key = value` lines; `#` starts a comment. Relative paths stay
    /// relative to the working directory.
    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let mut cfg = Self::default();
        for (ln, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or_default().trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::format(path, ln + 1, "expected `key = value`"))?;
            cfg.set(k.trim(), v)
                .map_err(|e| Error::format(path, ln + 1, e.to_string()))?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&read_text(path)?, path)
    }

    /// Applies `key=value` overrides.
    pub fn apply_overrides<S: AsRef<str>>(&mut self, overrides: &[S]) -> Result<()> {
        for o in overrides {
            let o = o.as_ref();
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| Error::arg(format!("override `{o}` is not key=value")))?;
            self.set(k.trim(), v)?;
        }
        Ok(())
    }

    /// Every key with its current value, in [`CONFIG_KEYS`] order.
    pub fn pairs(&self) -> Vec<(&'static str, String)> {
        let p = |o: &Option<PathBuf>| o.as_ref().map(|p| p.display().to_string()).unwrap_or_default();
        let core = match self.core_dims {
            Auto::Auto => "auto".to_string(),
            Auto::Value((a, b, c)) => format!("{a},{b},{c}"),
        };
        let vals: Vec<String> = vec![
            p(&self.reference),
            p(&self.lr_hsi),
            p(&self.hr_msi),
            p(&self.fused),
            self.output_dir.display().to_string(),
            self.ratio.to_string(),
            match self.psf {
                PsfKind::Gaussian => "gaussian".into(),
                PsfKind::Block => "block".into(),
            },
            self.blur_sigma.to_string(),
            self.srf.to_string(),
            self.msi_bands.to_string(),
            self.noise_std.to_string(),
            core,
            self.channels.to_string(),
            self.reduction.to_string(),
            self.attention.as_str().into(),
            self.psf_taps.to_string(),
            self.k.to_string(),
            self.sigma.to_string(),
            self.spectral_stride.to_string(),
            self.alpha.to_string(),
            self.beta1.to_string(),
            self.beta2.to_string(),
            self.gamma.to_string(),
            self.loss.as_str().into(),
            self.use_rec.to_string(),
            self.use_psf_srf.to_string(),
            self.use_manifold.to_string(),
            self.freeze_psf.to_string(),
            self.freeze_srf.to_string(),
            self.epochs.to_string(),
            self.lr.to_string(),
            self.decay_start.to_string(),
            self.seed.to_string(),
            self.log_interval.to_string(),
            self.checkpoint_every.to_string(),
        ];
        CONFIG_KEYS.iter().copied().zip(vals).collect()
    }

    /// `key = value` text that [`ExperimentConfig::parse`] reads back to the same config.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.pairs() {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }

    pub fn resolved_decay_start(&self) -> usize {
        match self.decay_start {
            Auto::Auto => self.epochs * 3 / 10,
            Auto::Value(v) => v,
        }
    }

    pub fn blur_sigma_value(&self) -> f64 {
        match self.blur_sigma {
            Auto::Auto => crate::degradation::default_blur_sigma(self.ratio),
            Auto::Value(v) => v,
        }
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        let schedule = LrSchedule::new(self.lr, self.epochs, self.resolved_decay_start())?;
        let cfg = TrainConfig {
            epochs: self.epochs,
            schedule,
            seed: self.seed,
            weights: LossWeights {
                alpha: self.alpha,
                beta1: self.beta1,
                beta2: self.beta2,
                gamma: self.gamma,
            },
            switches: LossSwitches {
                rec: self.use_rec,
                psf_srf: self.use_psf_srf,
                manifold: self.use_manifold,
            },
            loss: self.loss,
            knn_k: self.k,
            sigma: self.sigma,
            spectral_stride: self.spectral_stride,
            freeze_psf: self.freeze_psf,
            freeze_srf: self.freeze_srf,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Network configuration for inputs of the given dims.
    pub fn net_config(&self, lr_dims: (usize, usize, usize), msi_dims: (usize, usize, usize)) -> Result<CtfnConfig> {
        let mut c = CtfnConfig::from_inputs(lr_dims, msi_dims)?;
        c.channels = self.channels;
        c.reduction = self.reduction;
        c.attention = self.attention;
        c.core_dims = match self.core_dims {
            Auto::Auto => default_core_dims(msi_dims.0, msi_dims.1, lr_dims.2),
            Auto::Value(v) => v,
        };
        if let Auto::Value(t) = self.psf_taps {
            c.psf_taps = t;
        }
        c.validate()?;
        Ok(c)
    }
}

/// Run manifest: the full config echo, the seed and tool versions.
pub fn manifest_text(cfg: &ExperimentConfig, command: &str) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "# tuckerfuse run manifest");
    let _ = writeln!(s, "# command: {command}");
    let _ = writeln!(s, "# tuckerfuse {}", env!("CARGO_PKG_VERSION"));
    let _ = writeln!(s, "# parallel feature: {}", cfg!(feature = "parallel"));
    let _ = writeln!(s, "# threads: {}", crate::exec::threads());
    let _ = writeln!(s, "# resolved decay_start: {}", cfg.resolved_decay_start());
    s.push_str(&cfg.to_text());
    s
}

pub fn write_manifest(dir: &Path, cfg: &ExperimentConfig, command: &str) -> Result<PathBuf> {
    let path = dir.join("manifest.txt");
    write_text(&path, &manifest_text(cfg, command))?;
    Ok(path)
}

pub fn write_text_file(path: &Path, text: &str) -> Result<()> {
    write_text(path, text)
}

pub fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}
