//! PSNR sweeps, ablation comparison and inference timing.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::imaging::{blur, load_png, psnr, Image};
use crate::kernels::{load_kernel, MotionKernel};
use crate::model::{DeepDeblurNet, NetworkConfig, Restorer};
use crate::training::{stream_seed, train, TrainConfig};

/// Per-kernel PSNR summary.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalRow {
    pub kernel_id: String,
    /// Pairs evaluated, including excluded ones.
    pub images: usize,
    /// Pairs left out of the means because a PSNR was infinite.
    pub excluded: usize,
    /// `None` when every pair was excluded.
    pub blurry_psnr: Option<f64>,
    pub restored_psnr: Option<f64>,
}

/// Wall-clock statistics in seconds. `std` is the sample standard deviation,
/// 0 for a single repetition.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TimingStats {
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
    /// Means over every included pair of every kernel.
    pub overall_blurry: Option<f64>,
    pub overall_restored: Option<f64>,
    pub excluded: usize,
    pub timing: Option<TimingStats>,
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |v| format!("{v:.6}"))
}

impl EvalReport {
    pub const CSV_HEADER: &'static str = "kernel,images,excluded,blurry_psnr,restored_psnr";

    /// One row per kernel and a final `overall` row. Empty cells mark means
    /// with no included pairs.
    pub fn to_csv(&self) -> String {
        let mut s = format!("{}\n", Self::CSV_HEADER);
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{},{},{}",
                r.kernel_id,
                r.images,
                r.excluded,
                fmt_opt(r.blurry_psnr),
                fmt_opt(r.restored_psnr)
            );
        }
        let images: usize = self.rows.iter().map(|r| r.images).sum();
        let _ = writeln!(
            s,
            "overall,{images},{},{},{}",
            self.excluded,
            fmt_opt(self.overall_blurry),
            fmt_opt(self.overall_restored)
        );
        s
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }

    /// Aligned table for terminals.
    pub fn to_table(&self) -> String {
        let cell = |v: Option<f64>| v.map_or_else(|| "n/a".to_string(), |v| format!("{v:.2}"));
        let mut lines = vec![[
            "kernel".to_string(),
            "images".into(),
            "excluded".into(),
            "blurry dB".into(),
            "restored dB".into(),
        ]];
        for r in &self.rows {
            lines.push([
                r.kernel_id.clone(),
                r.images.to_string(),
                r.excluded.to_string(),
                cell(r.blurry_psnr),
                cell(r.restored_psnr),
            ]);
        }
        lines.push([
            "overall".into(),
            self.rows.iter().map(|r| r.images).sum::<usize>().to_string(),
            self.excluded.to_string(),
            cell(self.overall_blurry),
            cell(self.overall_restored),
        ]);
        let mut widths = [0usize; 5];
        for l in &lines {
            for (w, c) in widths.iter_mut().zip(l) {
                *w = (*w).max(c.len());
            }
        }
        let mut s = String::new();
        for l in &lines {
            let _ = write!(s, "{:<w$}", l[0], w = widths[0]);
            for (c, w) in l.iter().zip(widths).skip(1) {
                let _ = write!(s, "  {c:>w$}");
            }
            s.push('\n');
        }
        if let Some(t) = self.timing {
            let _ = writeln!(s, "forward latency: {:.6} s ± {:.6} s (n = {})", t.mean, t.std, t.n);
        }
        s
    }
}

/// All PNGs in `dir` sorted by name, converted to RGB.
pub fn load_images(dir: impl AsRef<Path>) -> Result<Vec<Image>> {
    let dir = dir.as_ref();
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
        .collect();
    paths.sort();
    paths.iter().map(|p| load_png(p).map(|i| i.to_rgb())).collect()
}

/// Kernels from MKERN files, identified by file stem.
pub fn load_kernels(files: &[PathBuf]) -> Result<Vec<(String, MotionKernel)>> {
    files
        .iter()
        .map(|p| {
            let id = p
                .file_stem()
                .map_or_else(|| p.display().to_string(), |s| s.to_string_lossy().into_owned());
            Ok((id, load_kernel(p)?))
        })
        .collect()
}

/// `*.mkern` files in `dir`, sorted.
pub fn kernel_files_in(dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    let mut v: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "mkern"))
        .collect();
    v.sort();
    Ok(v)
}

/// PSNR sweep over images and kernels given as files.
pub fn psnr_sweep(
    restorer: &dyn Restorer,
    image_dir: impl AsRef<Path>,
    kernel_files: &[PathBuf],
    noise_sigma: f64,
    seed: u64,
) -> Result<EvalReport> {
    let images = load_images(image_dir)?;
    let kernels = load_kernels(kernel_files)?;
    sweep(restorer, &images, &kernels, noise_sigma, seed, 1)
}

/// Blur every image with every kernel, restore, and record both PSNRs
/// against the sharp image. Noise for pair `(kernel k, image i)` is drawn
/// from a stream derived from `(seed, k, i)`, so the report does not depend
/// on `threads`.
pub fn sweep(
    restorer: &dyn Restorer,
    images: &[Image],
    kernels: &[(String, MotionKernel)],
    noise_sigma: f64,
    seed: u64,
    threads: usize,
) -> Result<EvalReport> {
    if images.is_empty() {
        return Err(Error::Eval("no images to evaluate".into()));
    }
    if kernels.is_empty() {
        return Err(Error::Eval("no kernels to evaluate".into()));
    }
    let jobs: Vec<(usize, usize)> = (0..kernels.len())
        .flat_map(|k| (0..images.len()).map(move |i| (k, i)))
        .collect();
    let eval = |&(k, i): &(usize, usize)| -> Result<(f64, f64)> {
        let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(seed, &[k as u64, i as u64]));
        let blurry = blur(&images[i], &kernels[k].1, noise_sigma, &mut rng)?;
        let restored = restorer.restore(&blurry)?;
        Ok((psnr(&blurry, &images[i])?, psnr(&restored, &images[i])?))
    };
    let threads = threads.clamp(1, jobs.len());
    let results: Vec<Result<(f64, f64)>> = if threads == 1 {
        jobs.iter().map(eval).collect()
    } else {
        let chunk = jobs.len().div_ceil(threads);
        std::thread::scope(|s| {
            let handles: Vec<_> = jobs
                .chunks(chunk)
                .map(|c| s.spawn(move || c.iter().map(eval).collect::<Vec<_>>()))
                .collect();
            handles
                .into_iter()
                .flat_map(|h| h.join().expect("evaluation worker panicked"))
                .collect()
        })
    };
    let results = results.into_iter().collect::<Result<Vec<_>>>()?;

    let mean = |v: &[f64]| (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64);
    let (mut all_b, mut all_r, mut excluded) = (Vec::new(), Vec::new(), 0);
    let mut rows = Vec::with_capacity(kernels.len());
    for (k, (id, _)) in kernels.iter().enumerate() {
        let (mut b, mut r, mut ex) = (Vec::new(), Vec::new(), 0);
        for &(pb, pr) in &results[k * images.len()..(k + 1) * images.len()] {
            if pb.is_finite() && pr.is_finite() {
                b.push(pb);
                r.push(pr);
            } else {
                ex += 1;
            }
        }
        rows.push(EvalRow {
            kernel_id: id.clone(),
            images: images.len(),
            excluded: ex,
            blurry_psnr: mean(&b),
            restored_psnr: mean(&r),
        });
        all_b.extend(b);
        all_r.extend(r);
        excluded += ex;
    }
    Ok(EvalReport {
        rows,
        overall_blurry: mean(&all_b),
        overall_restored: mean(&all_r),
        excluded,
        timing: None,
    })
}

/// Mean and sample standard deviation of `values`.
pub fn timing_stats(values: &[f64]) -> Result<TimingStats> {
    let n = values.len();
    if n == 0 {
        return Err(Error::Eval("no timing samples".into()));
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let std = if n > 1 {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
    } else {
        0.0
    };
    Ok(TimingStats { mean, std, n })
}

/// Forward-pass latency of `restorer` on `img`: `warmup` untimed runs, then
/// `reps` timed ones.
pub fn time_inference(restorer: &dyn Restorer, img: &Image, warmup: usize, reps: usize) -> Result<TimingStats> {
    if reps == 0 {
        return Err(Error::Eval("reps must be at least 1".into()));
    }
    for _ in 0..warmup {
        restorer.restore(img)?;
    }
    let mut samples = Vec::with_capacity(reps);
    for _ in 0..reps {
        let t0 = Instant::now();
        std::hint::black_box(restorer.restore(std::hint::black_box(img))?);
        samples.push(t0.elapsed().as_secs_f64());
    }
    timing_stats(&samples)
}

/// One side of an ablation.
#[derive(Clone, Debug)]
pub struct AblationArm {
    pub config: NetworkConfig,
    pub param_count: usize,
    pub report: EvalReport,
}

#[derive(Clone, Debug)]
pub struct AblationReport {
    pub a: AblationArm,
    pub b: AblationArm,
}

impl AblationReport {
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        for (name, arm) in [("A", &self.a), ("B", &self.b)] {
            let _ = writeln!(
                s,
                "[{name}] pointwise_reduction={} params={}",
                arm.config.pointwise_reduction, arm.param_count
            );
            s.push_str(&arm.report.to_table());
        }
        s
    }
}

/// Train two networks that differ only in `pointwise_reduction` on the same
/// data and seeds, then sweep both over the same kernels. Checkpoints go to
/// `work_dir/a` and `work_dir/b`.
pub fn ablation_compare(
    image_dir: impl AsRef<Path>,
    kernel_files: &[PathBuf],
    cfg_a: &NetworkConfig,
    cfg_b: &NetworkConfig,
    train_cfg: &TrainConfig,
    work_dir: impl AsRef<Path>,
) -> Result<AblationReport> {
    let normalized = NetworkConfig {
        pointwise_reduction: cfg_a.pointwise_reduction,
        ..cfg_b.clone()
    };
    if &normalized != cfg_a {
        return Err(Error::Config(
            "ablation configs may differ only in pointwise_reduction".into(),
        ));
    }
    let image_dir = image_dir.as_ref();
    let work_dir = work_dir.as_ref();
    let arm = |cfg: &NetworkConfig, sub: &str| -> Result<AblationArm> {
        let net = DeepDeblurNet::new(cfg.clone(), train_cfg.seed)?;
        let trained = train(net, image_dir, train_cfg, work_dir.join(sub))?.net;
        let report = psnr_sweep(&trained, image_dir, kernel_files, train_cfg.noise_sigma, train_cfg.seed)?;
        Ok(AblationArm {
            config: cfg.clone(),
            param_count: trained.param_count(),
            report,
        })
    };
    Ok(AblationReport {
        a: arm(cfg_a, "a")?,
        b: arm(cfg_b, "b")?,
    })
}
