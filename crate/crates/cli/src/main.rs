//! `tuckerfuse` command-line harness.
//!
//! Exit codes: 0 on success, 1 when training diverges, 2 for usage, IO and
//! format errors.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use tuckerfuse::degradation::{simulate, SpatialDegradation};
use tuckerfuse::error::{Error, Result};
use tuckerfuse::exec;
use tuckerfuse::io::*;
use tuckerfuse::metrics::{evaluate, rmse_map, sam_map};
use tuckerfuse::nn::Checkpoint;
use tuckerfuse::tensor::DenseMatrix;
use tuckerfuse::train::Trainer;

#[derive(Parser)]
#[command(
    name = "tuckerfuse",
    version,
    about = "Blind HSI/MSI fusion with a deep Tucker decomposition network"
)]
struct Cli {
    /// Worker threads for the data-parallel kernels (0 = all cores). Overrides
    /// TUCKERFUSE_THREADS; the default is 1, which keeps runs bit-reproducible.
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// `key = value` experiment config; defaults apply to missing keys.
    #[arg(long, short)]
    config: Option<PathBuf>,

    /// Override one key, e.g. `--set epochs=2000`. Repeatable; applied after
    /// the config file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Degrade a reference HR-HSI into an LR-HSI / HR-MSI pair.
    Simulate(ConfigArgs),
    /// Train the network on an LR-HSI / HR-MSI pair and write the fused cube.
    Fuse {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Continue from a checkpoint written by an earlier `fuse` run with
        /// the same config. The loss trace then holds the remaining epochs.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Score a fused cube against the reference.
    Evaluate(ConfigArgs),
    /// Dump core slices and factor matrices from a checkpoint.
    Inspect {
        checkpoint: PathBuf,
        /// Output directory.
        #[arg(long, short, default_value = "inspect")]
        out: PathBuf,
        /// 1-based indices along the third core mode.
        #[arg(long, value_delimiter = ',', default_value = "1,20,40")]
        slices: Vec<usize>,
    },
    /// Print the default config.
    Config,
}

fn load_config(a: &ConfigArgs) -> Result<ExperimentConfig> {
    let mut cfg = match &a.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    cfg.apply_overrides(&a.set)?;
    Ok(cfg)
}

fn or_output(p: &Option<PathBuf>, cfg: &ExperimentConfig, name: &str) -> PathBuf {
    p.clone().unwrap_or_else(|| cfg.output_dir.join(name))
}

fn command_line() -> String {
    std::env::args().collect::<Vec<_>>().join(" ")
}

fn write_operators(dir: &Path, p1: &DenseMatrix, p2: &DenseMatrix, p3: &DenseMatrix) -> Result<()> {
    write_matrix_csv(&dir.join("p1.csv"), p1)?;
    write_matrix_csv(&dir.join("p2.csv"), p2)?;
    write_matrix_csv(&dir.join("p3.csv"), p3)
}

fn cmd_simulate(a: &ConfigArgs) -> Result<()> {
    let cfg = load_config(a)?;
    let reference = cfg
        .reference
        .as_ref()
        .ok_or_else(|| Error::InvalidArgument("simulate needs `reference`".into()))?;
    let z = read_cube(reference)?;
    let (w, h, s) = z.dims();
    let spatial = match cfg.psf {
        PsfKind::Gaussian => SpatialDegradation::gaussian(w, h, cfg.ratio, cfg.blur_sigma_value())?,
        PsfKind::Block => SpatialDegradation::block_average(w, h, cfg.ratio)?,
    };
    let spectral = cfg.srf.resolve(s, cfg.msi_bands)?;
    let noise = (cfg.noise_std > 0.0).then_some(cfg.noise_std);
    let pair = simulate(&z, &spatial, &spectral, noise, cfg.seed)?;
    let dir = &cfg.output_dir;
    create_dir(dir)?;
    write_cube(&dir.join("lr_hsi.cube"), &pair.lr_hsi)?;
    write_cube(&dir.join("hr_msi.cube"), &pair.hr_msi)?;
    write_operators(dir, spatial.p1(), spatial.p2(), spectral.p3())?;
    write_manifest(dir, &cfg, &command_line())?;
    println!(
        "lr_hsi {:?}, hr_msi {:?} -> {}",
        pair.lr_hsi.dims(),
        pair.hr_msi.dims(),
        dir.display()
    );
    Ok(())
}

fn cmd_fuse(a: &ConfigArgs, resume: Option<&Path>) -> Result<()> {
    let cfg = load_config(a)?;
    let x = read_cube(&or_output(&cfg.lr_hsi, &cfg, "lr_hsi.cube"))?;
    let y = read_cube(&or_output(&cfg.hr_msi, &cfg, "hr_msi.cube"))?;
    let net_cfg = cfg.net_config(x.dims(), y.dims())?;
    let train_cfg = cfg.train_config()?;
    let dir = cfg.output_dir.clone();
    create_dir(&dir)?;
    write_manifest(&dir, &cfg, &command_line())?;
    let ckpt_path = dir.join("checkpoint.ckpt");

    let mut t = Trainer::<f32>::new(&x, &y, net_cfg, train_cfg)?;
    if let Some(p) = resume {
        t.restore(&Checkpoint::load(p)?)?;
        eprintln!("resumed at epoch {}", t.epoch());
    }
    let (log, every) = (cfg.log_interval, cfg.checkpoint_every);
    while !t.is_done() {
        let r = t.step()?;
        if log > 0 && (r.epoch % log == 0 || r.epoch == 1) {
            eprintln!(
                "epoch {:>6}  lr {:.2e}  total {:.6}  rec {:.6}  lr_msi {:.6}",
                r.epoch, r.lr, r.total, r.rec, r.lr_msi
            );
        }
        if every > 0 && r.epoch % every == 0 {
            t.checkpoint()?.save(&ckpt_path)?;
        }
    }
    t.checkpoint()?.save(&ckpt_path)?;
    write_trace_csv(&dir.join("loss_trace.csv"), t.trace())?;
    let (p1, p2, p3) = t.network().degradation_matrices();
    write_operators(&dir, &p1, &p2, &p3)?;
    let fused = t.fused()?;
    let out = or_output(&cfg.fused, &cfg, "fused.cube");
    write_cube(&out, &fused)?;
    println!("fused {:?} -> {}", fused.dims(), out.display());
    Ok(())
}

fn cmd_evaluate(a: &ConfigArgs) -> Result<()> {
    let cfg = load_config(a)?;
    let reference = cfg
        .reference
        .as_ref()
        .ok_or_else(|| Error::InvalidArgument("evaluate needs `reference`".into()))?;
    let z = read_cube(reference)?;
    let f = read_cube(&or_output(&cfg.fused, &cfg, "fused.cube"))?;
    let m = evaluate(&z, &f, cfg.ratio)?;
    let dir = &cfg.output_dir;
    create_dir(dir)?;
    write_text_file(
        &dir.join("metrics.csv"),
        &format!("{}\n{}\n", tuckerfuse::metrics::MetricsReport::CSV_HEADER, m.csv()),
    )?;
    let mut bands = String::from("band,psnr\n");
    for (b, p) in m.psnr_per_band.iter().enumerate() {
        bands.push_str(&format!("{},{p}\n", b + 1));
    }
    write_text_file(&dir.join("psnr_per_band.csv"), &bands)?;
    write_heatmap(&dir.join("rmse_map.pgm"), &rmse_map(&z, &f)?)?;
    write_heatmap(&dir.join("sam_map.pgm"), &sam_map(&z, &f)?)?;
    println!(
        "RMSE {:.5}  PSNR {:.3}  SAM {:.3}  ERGAS {:.3}  SSIM {:.4}  UIQI {:.4}",
        m.rmse, m.psnr, m.sam, m.ergas, m.ssim, m.uiqi
    );
    Ok(())
}

fn matrix_entry(c: &Checkpoint, name: &str, path: &Path) -> Result<DenseMatrix> {
    let a = c.get::<f64>(name).ok_or_else(|| Error::Format {
        path: path.to_path_buf(),
        line: 0,
        msg: format!("missing entry `{name}`"),
    })?;
    match a.shape() {
        &[r, k] => DenseMatrix::new(r, k, a.data().to_vec()),
        s => Err(Error::Shape(format!("`{name}` has shape {s:?}, expected a matrix"))),
    }
}

fn cmd_inspect(checkpoint: &Path, out: &Path, slices: &[usize]) -> Result<()> {
    let c = Checkpoint::load(checkpoint)?;
    let core = c.get::<f64>("core").ok_or_else(|| Error::Format {
        path: checkpoint.to_path_buf(),
        line: 0,
        msg: "missing entry `core`".into(),
    })?;
    let &[n3, n1, n2] = core.shape() else {
        return Err(Error::Shape(format!("core has shape {:?}", core.shape())));
    };
    if let Some(&k) = slices.iter().find(|&&k| k == 0 || k > n3) {
        return Err(Error::InvalidArgument(format!("slice {k} is outside 1..={n3}")));
    }
    create_dir(out)?;
    for &k in slices {
        let off = (k - 1) * n1 * n2;
        let m = DenseMatrix::new(n1, n2, core.data()[off..off + n1 * n2].to_vec())?;
        write_heatmap(&out.join(format!("core_slice_{k}.pgm")), &m)?;
    }
    for (name, file) in [
        ("param/factor.w", "w_factor.csv"),
        ("param/factor.h", "h_factor.csv"),
        ("param/factor.s", "s_factor.csv"),
    ] {
        write_matrix_csv(&out.join(file), &matrix_entry(&c, name, checkpoint)?)?;
    }
    println!("core {n1}x{n2}x{n3}, {} slices -> {}", slices.len(), out.display());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::Simulate(a) => cmd_simulate(a),
        Command::Fuse { cfg, resume } => cmd_fuse(cfg, resume.as_deref()),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::Inspect {
            checkpoint,
            out,
            slices,
        } => cmd_inspect(checkpoint, out, slices),
        Command::Config => {
            print!("{}", ExperimentConfig::default().to_text());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    exec::init_from_env();
    if let Some(n) = cli.threads {
        exec::set_threads(n);
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_numeric() { 1 } else { 2 })
        }
    }
}
