//! Blind fusion on the synthetic toy scene.
//!
//! ```text
//! cargo run --release --example toy_fusion -- [epochs] [attention] [seed]
//! ```

use std::time::Instant;

use tuckerfuse::degradation::{even_ranges, simulate, srf_from_ranges, upsample_nearest, SpatialDegradation};
use tuckerfuse::metrics::evaluate;
use tuckerfuse::network::{AttentionMode, CtfnConfig};
use tuckerfuse::synthetic::toy_scene;
use tuckerfuse::train::{TrainConfig, Trainer};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let epochs: usize = args.next().map_or(Ok(2000), |s| s.parse())?;
    let attention = AttentionMode::parse(&args.next().unwrap_or_else(|| "full".into()))?;
    let seed: u64 = args.next().map_or(Ok(0), |s| s.parse())?;

    let z = toy_scene();
    let sp = SpatialDegradation::block_average(32, 32, 4)?;
    let sr = srf_from_ranges(&even_ranges(16, 4)?, 16)?;
    let pair = simulate(&z, &sp, &sr, None, seed)?;

    let mut net = CtfnConfig::from_inputs(pair.lr_hsi.dims(), pair.hr_msi.dims())?;
    net.attention = attention;
    let mut cfg = TrainConfig::with_epochs(epochs);
    cfg.seed = seed;

    let base = evaluate(&z, &upsample_nearest(&pair.lr_hsi, 4)?, 4)?;
    println!("nearest upsampling: PSNR {:.3} SAM {:.3}", base.psnr, base.sam);
    let t0 = Instant::now();
    let mut t = Trainer::<f32>::new(&pair.lr_hsi, &pair.hr_msi, net, cfg)?;
    t.run_with(|r| {
        if r.epoch == 1 || r.epoch % 200 == 0 {
            println!(
                "epoch {:>5}  total {:.5}  rec {:.5}  lr_msi {:.5}",
                r.epoch, r.total, r.rec, r.lr_msi
            );
        }
    })?;
    let m = evaluate(&z, &t.fused()?, 4)?;
    println!(
        "fused: PSNR {:.3} SAM {:.3} ERGAS {:.3} SSIM {:.4} ({:.1}s)",
        m.psnr,
        m.sam,
        m.ergas,
        m.ssim,
        t0.elapsed().as_secs_f64()
    );
    Ok(())
}
