//! Overfit the small network on one synthetic face blurred by one fixed
//! kernel, then compare blurry and restored PSNR on that pair.
//!
//!     cargo run --release --example toy_training -- [steps] [out_dir]
//!
//! The full 2000 steps take a few minutes on one core.

use std::path::PathBuf;
use std::time::Instant;

use deepdeblur::config::PipelineConfig;
use deepdeblur::imaging::{psnr, save_png, synthetic_face};
use deepdeblur::model::{DeepDeblurNet, Restorer};
use deepdeblur::training::{train, PairSource};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let mut cfg = PipelineConfig::toy();
    if let Some(steps) = args.next() {
        cfg.train.max_steps = steps.parse()?;
    }
    let out = args
        .next()
        .map(PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("deepdeblur-toy"));
    let data = out.join("data");
    std::fs::create_dir_all(&data)?;
    let (h, w) = cfg.train.image_size;
    save_png(&synthetic_face(h, w, 0)?, data.join("face.png"))?;
    print!("{}", cfg.to_text());

    let net = DeepDeblurNet::new(cfg.net.clone(), cfg.train.seed)?;
    println!("parameters: {}", net.param_count());
    let t0 = Instant::now();
    let outcome = train(net, &data, &cfg.train, out.join("run"))?;
    let elapsed = t0.elapsed();

    let log = &outcome.log;
    let every = (log.len() / 10).max(1);
    for r in log.iter().step_by(every) {
        println!(
            "step {:5}  lr {:.2e}  l2 {:.3e}  tv {:8.3}  face {:.3e}  total {:.3e}",
            r.step, r.lr, r.l2, r.tv, r.face, r.total
        );
    }
    if log.len() >= 10 {
        let start = log[..10].iter().map(|r| r.total).sum::<f64>() / 10.0;
        let end = log.last().map_or(start, |r| r.total);
        println!("loss drop from initial 10-step mean: {:.1}%", 100.0 * (1.0 - end / start));
    }

    // The training image is re-read from PNG, as the trainer saw it.
    let sharp = deepdeblur::imaging::load_png(data.join("face.png"))?;
    let pair = PairSource::new(&cfg.train)?.pair(&sharp, 0, 0)?;
    let restored = outcome.net.restore(&pair.blurry)?;
    let (pb, pr) = (psnr(&pair.blurry, &sharp)?, psnr(&restored, &sharp)?);
    println!("blurry {pb:.2} dB, restored {pr:.2} dB, gain {:+.2} dB", pr - pb);
    save_png(&pair.blurry, out.join("blurry.png"))?;
    save_png(&restored, out.join("restored.png"))?;
    println!("trained in {:.1} s; outputs in {}", elapsed.as_secs_f64(), out.display());
    Ok(())
}
