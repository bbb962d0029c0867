//! PSNR sweep: an identity restorer and an untrained network over a few GP
//! kernels plus the L = 15, 45° linear kernel. Writes both reports as CSV.
//!
//!     cargo run --release --example eval_sweep -- [out_dir]

use std::path::PathBuf;

use deepdeblur::config::PipelineConfig;
use deepdeblur::evalbench::sweep;
use deepdeblur::imaging::synthetic_face;
use deepdeblur::kernels::{linear_kernel, GpConfig, KernelSynth, MotionKernel};
use deepdeblur::model::{DeepDeblurNet, IdentityRestorer};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let out = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("deepdeblur-eval"));
    std::fs::create_dir_all(&out)?;

    let images: Vec<_> = (0..4).map(|s| synthetic_face(112, 96, s)).collect::<Result<_, _>>()?;
    let gp = GpConfig::default();
    let synth = KernelSynth::new(&gp)?;
    let mut rng = gp.rng();
    let mut kernels: Vec<(String, MotionKernel)> = (0..3)
        .map(|i| Ok((format!("gp{i}"), synth.synth(&mut rng)?)))
        .collect::<deepdeblur::Result<_>>()?;
    kernels.push(("linear_L15_45".into(), linear_kernel(15.0, 45.0, 27)?));
    kernels.push(("delta".into(), MotionKernel::delta(27)));

    let identity = sweep(&IdentityRestorer, &images, &kernels, 0.0, 0, 1)?;
    println!("identity restorer");
    print!("{}", identity.to_table());
    identity.write_csv(out.join("identity.csv"))?;

    let net = DeepDeblurNet::new(PipelineConfig::toy().net, 0)?;
    let untrained = sweep(&net, &images, &kernels, 0.0, 0, 1)?;
    println!("\nuntrained small network");
    print!("{}", untrained.to_table());
    untrained.write_csv(out.join("untrained.csv"))?;
    Ok(())
}
