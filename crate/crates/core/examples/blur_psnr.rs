//! Degrade a synthetic face with a GP kernel and a linear kernel, compare
//! the FFT and direct convolution paths, and report PSNR.
//!
//!     cargo run --release --example blur_psnr -- [out_dir]

use std::path::PathBuf;

use deepdeblur::imaging::{blur, convolve_direct, convolve_fft, psnr, save_png, synthetic_face};
use deepdeblur::kernels::{linear_kernel, synth_kernel, GpConfig, MotionKernel};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let out = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("deepdeblur-blur"));
    std::fs::create_dir_all(&out)?;

    let sharp = synthetic_face(112, 96, 7)?;
    save_png(&sharp, out.join("sharp.png"))?;

    let gp = GpConfig {
        seed: 3,
        ..GpConfig::default()
    };
    let kernels: Vec<(&str, MotionKernel)> = vec![
        ("gp", synth_kernel(&gp, &mut gp.rng())?),
        ("linear_L15_45deg", linear_kernel(15.0, 45.0, 27)?),
        ("delta", MotionKernel::delta(27)),
    ];

    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for (name, k) in &kernels {
        let plane = sharp.plane(0);
        let direct = convolve_direct(&plane, 112, 96, k);
        let fft = convolve_fft(&plane, 112, 96, k);
        let gap = direct.iter().zip(&fft).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);

        let clean = blur(&sharp, k, 0.0, &mut rng)?;
        let noisy = blur(&sharp, k, 0.01, &mut rng)?;
        save_png(&noisy, out.join(format!("blurred_{name}.png")))?;
        println!(
            "{name:>18}: valid {:2}  fft-vs-direct {gap:.1e}  PSNR clean {:7.2} dB  noisy(σ=0.01) {:6.2} dB",
            k.valid_size(),
            psnr(&clean, &sharp)?,
            psnr(&noisy, &sharp)?
        );
    }
    println!("images in {}", out.display());
    Ok(())
}
