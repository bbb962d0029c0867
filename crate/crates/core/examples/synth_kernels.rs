//! Synthesize a batch of motion kernels, check their invariants, and write
//! them as MKERN files plus a contact sheet.
//!
//!     cargo run --release --example synth_kernels -- [out_dir] [count]

use std::path::PathBuf;

use deepdeblur::imaging::{kernel_contact_sheet, save_png};
use deepdeblur::kernels::{save_kernel, GpConfig, KernelSynth};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let out = args
        .next()
        .map(PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("deepdeblur-kernels"));
    let count: usize = args.next().and_then(|s| s.parse().ok()).unwrap_or(16);

    let gp = GpConfig::default();
    let synth = KernelSynth::new(&gp)?;
    let mut rng = gp.rng();
    std::fs::create_dir_all(&out)?;

    let mut kernels = Vec::with_capacity(count);
    for i in 0..count {
        let k = synth.synth(&mut rng)?;
        let (cy, cx) = k.center_of_mass();
        let c = (k.canvas() / 2) as f64;
        println!(
            "kernel {i:2}: valid {:2}  sum {:.12}  center offset ({:+.3}, {:+.3})  min {:.1e}",
            k.valid_size(),
            k.sum(),
            cy - c,
            cx - c,
            k.weights().iter().copied().fold(f64::INFINITY, f64::min)
        );
        save_kernel(&k, out.join(format!("kernel_{i:04}.mkern")))?;
        kernels.push(k);
    }
    save_png(&kernel_contact_sheet(&kernels)?, out.join("preview.png"))?;
    println!("wrote {count} kernels and preview.png to {}", out.display());
    Ok(())
}

