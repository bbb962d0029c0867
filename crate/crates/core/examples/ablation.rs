//! Train the small network with and without the 1x1 reduction in front of
//! each branch, on the same data and seeds, and sweep both.
//!
//!     cargo run --release --example ablation -- [steps] [out_dir]

use std::path::PathBuf;

use deepdeblur::config::PipelineConfig;
use deepdeblur::evalbench::ablation_compare;
use deepdeblur::imaging::{save_png, synthetic_face};
use deepdeblur::kernels::{save_kernel, synth_kernel};
use deepdeblur::model::NetworkConfig;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let steps: u64 = args.next().map(|s| s.parse()).transpose()?.unwrap_or(200);
    let out = args
        .next()
        .map(PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("deepdeblur-ablation"));
    let (data, kdir) = (out.join("data"), out.join("kernels"));
    std::fs::create_dir_all(&data)?;
    std::fs::create_dir_all(&kdir)?;

    let mut cfg = PipelineConfig::toy();
    cfg.train.max_steps = steps;
    let (h, w) = cfg.train.image_size;
    for s in 0..2 {
        save_png(&synthetic_face(h, w, s)?, data.join(format!("face{s}.png")))?;
    }
    let mut rng = cfg.train.gp.rng();
    let mut kernel_files = Vec::new();
    for i in 0..3 {
        let p = kdir.join(format!("k{i}.mkern"));
        save_kernel(&synth_kernel(&cfg.train.gp, &mut rng)?, &p)?;
        kernel_files.push(p);
    }

    let with = cfg.net.clone();
    let without = NetworkConfig {
        pointwise_reduction: false,
        ..with.clone()
    };
    let report = ablation_compare(&data, &kernel_files, &with, &without, &cfg.train, out.join("runs"))?;
    print!("{}", report.to_table());
    Ok(())
}
