//! The `deepdeblur` command line.
//!
//! Exit codes: 0 on success, 1 for usage errors, 2 for runtime failures.
//! Every subcommand prints its resolved settings as `key = value` lines
//! before doing any work.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{parse_weight_schedule, PipelineConfig};
use crate::error::{Error, Result};
use crate::evalbench::{kernel_files_in, load_images, load_kernels, sweep, time_inference};
use crate::imaging::{blur, kernel_contact_sheet, load_png, save_png, Image};
use crate::kernels::{load_kernel, save_kernel, GpConfig, KernelSynth, MotionKernel};
use crate::model::{dump_feature_maps, DeepDeblurNet, NetworkConfig, Restorer};
use crate::training::{load_checkpoint, resume, stream_seed, train};

#[derive(Parser, Debug)]
#[command(name = "deepdeblur", version, about = "One-step blind face deblurring")]
struct Cli {
    /// Worker threads for synthesis and evaluation (default: available
    /// parallelism). Timing always runs on one thread.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Synthesize Gaussian-process motion kernels as MKERN files.
    SynthKernels(SynthArgs),
    /// Blur a PNG with an MKERN kernel plus optional Gaussian noise.
    Blur(BlurArgs),
    /// Train a restoration network on a directory of PNGs.
    Train(TrainArgs),
    /// Restore one image with a checkpoint.
    Deblur(DeblurArgs),
    /// PSNR sweep of a checkpoint over images and kernels.
    Eval(EvalArgs),
    /// Time the forward pass on one image.
    Bench(BenchArgs),
    /// Write per-scale feature responses of one inception module as PNGs.
    DumpFeatures(DumpArgs),
}

#[derive(Args, Debug)]
struct SynthArgs {
    /// Number of kernels to write.
    #[arg(long)]
    count: usize,
    /// Output directory; created if missing.
    #[arg(long)]
    out: PathBuf,
    /// Base seed; kernel i uses a stream derived from (seed, i) [gp.seed].
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Canvas side, odd [gp.canvas].
    #[arg(long, default_value_t = 27)]
    canvas: usize,
    /// Smallest valid size [gp.valid_size, first value].
    #[arg(long, default_value_t = 8)]
    valid_min: usize,
    /// Largest valid size [gp.valid_size, second value].
    #[arg(long, default_value_t = 20)]
    valid_max: usize,
    /// Also write preview.png, a tiled contact sheet of all kernels.
    #[arg(long)]
    preview: bool,
}

#[derive(Args, Debug)]
struct BlurArgs {
    /// Sharp input PNG.
    #[arg(long = "in")]
    input: PathBuf,
    /// MKERN kernel file.
    #[arg(long)]
    kernel: PathBuf,
    /// Blurred output PNG.
    #[arg(long)]
    out: PathBuf,
    /// Noise standard deviation on the [0,1] scale [train.noise_sigma].
    #[arg(long, default_value_t = 0.0)]
    noise: f64,
    /// Noise seed.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Directory of equally sized training PNGs [train.image_size].
    #[arg(long)]
    data: PathBuf,
    /// key = value configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Checkpoint and loss-log directory.
    #[arg(long)]
    out: PathBuf,
    /// [train.max_steps]
    #[arg(long)]
    max_steps: Option<u64>,
    /// Seed for initialization, batches and noise [train.seed].
    #[arg(long)]
    seed: Option<u64>,
    /// Config override `section.field=value`; repeatable, applied after --config.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// File of `step:alpha:beta` lines [train.weight_schedule].
    #[arg(long)]
    weight_schedule: Option<PathBuf>,
    /// Continue from this checkpoint instead of starting fresh.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct DeblurArgs {
    /// Checkpoint (deblur-net or identity-stub).
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// Directory of sharp PNGs.
    #[arg(long)]
    data: PathBuf,
    /// Directory of MKERN kernels.
    #[arg(long)]
    kernels: PathBuf,
    /// CSV report path.
    #[arg(long)]
    report: PathBuf,
    /// Noise added after blurring [train.noise_sigma].
    #[arg(long, default_value_t = 0.0)]
    noise: f64,
    /// Noise seed.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Debug)]
struct BenchArgs {
    /// Checkpoint to time; without it, a freshly initialized default network.
    #[arg(long)]
    ckpt: Option<PathBuf>,
    #[arg(long = "in")]
    input: PathBuf,
    /// Timed repetitions.
    #[arg(long, default_value_t = 10)]
    reps: usize,
    /// Untimed runs before measuring.
    #[arg(long, default_value_t = 1)]
    warmup: usize,
    /// Initialization seed when no checkpoint is given.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Debug)]
struct DumpArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long = "in")]
    input: PathBuf,
    /// Zero-based inception module index.
    #[arg(long)]
    module: usize,
    #[arg(long)]
    out: PathBuf,
}

/// Parse `args` (including the program name) and run. Returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            2
        }
    }
}

fn print_settings(pairs: &[(&str, String)]) {
    for (k, v) in pairs {
        println!("{k} = {v}");
    }
}

fn threads(cli_threads: Option<usize>) -> Result<usize> {
    match cli_threads {
        Some(0) => Err(Error::Config("--threads must be at least 1".into())),
        Some(n) => Ok(n),
        None => Ok(std::thread::available_parallelism().map_or(1, |n| n.get())),
    }
}

fn dispatch(cli: Cli) -> Result<()> {
    let threads = threads(cli.threads)?;
    match cli.command {
        Command::SynthKernels(a) => synth_kernels(a, threads),
        Command::Blur(a) => blur_cmd(a),
        Command::Train(a) => train_cmd(a),
        Command::Deblur(a) => deblur_cmd(a),
        Command::Eval(a) => eval_cmd(a, threads),
        Command::Bench(a) => bench_cmd(a),
        Command::DumpFeatures(a) => dump_cmd(a),
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Kernel `i` of a synthesis run with base seed `seed`.
pub fn nth_kernel(synth: &KernelSynth, seed: u64, i: usize) -> Result<MotionKernel> {
    synth.synth(&mut ChaCha8Rng::seed_from_u64(stream_seed(seed, &[i as u64])))
}

fn synth_kernels(a: SynthArgs, threads: usize) -> Result<()> {
    let gp = GpConfig {
        canvas: a.canvas,
        valid_size_range: (a.valid_min, a.valid_max),
        seed: a.seed,
        ..GpConfig::default()
    };
    print_settings(&[
        ("count", a.count.to_string()),
        ("out", a.out.display().to_string()),
        ("gp.seed", gp.seed.to_string()),
        ("gp.canvas", gp.canvas.to_string()),
        ("gp.valid_size", format!("{},{}", a.valid_min, a.valid_max)),
        ("gp.sigma_f2", format!("{:?}", gp.sigma_f2)),
        ("gp.length_scale", format!("{:?}", gp.length_scale)),
        ("gp.step", format!("{:?}", gp.step)),
        ("gp.traj_len", format!("{},{}", gp.traj_len_range.0, gp.traj_len_range.1)),
        ("preview", a.preview.to_string()),
        ("threads", threads.to_string()),
    ]);
    let synth = KernelSynth::new(&gp)?;
    create_dir(&a.out)?;
    let ids: Vec<usize> = (0..a.count).collect();
    let chunk = a.count.div_ceil(threads).max(1);
    let kernels: Vec<MotionKernel> = std::thread::scope(|s| {
        let handles: Vec<_> = ids
            .chunks(chunk)
            .map(|c| {
                let synth = &synth;
                s.spawn(move || c.iter().map(|&i| nth_kernel(synth, a.seed, i)).collect::<Vec<_>>())
            })
            .collect();
        handles
            .into_iter()
            .flat_map(|h| h.join().expect("synthesis worker panicked"))
            .collect::<Result<Vec<_>>>()
    })?;
    for (i, k) in kernels.iter().enumerate() {
        save_kernel(k, a.out.join(format!("kernel_{i:04}.mkern")))?;
    }
    if a.preview && !kernels.is_empty() {
        save_png(&kernel_contact_sheet(&kernels)?, a.out.join("preview.png"))?;
    }
    println!("wrote {} kernels to {}", kernels.len(), a.out.display());
    Ok(())
}

fn blur_cmd(a: BlurArgs) -> Result<()> {
    print_settings(&[
        ("in", a.input.display().to_string()),
        ("kernel", a.kernel.display().to_string()),
        ("out", a.out.display().to_string()),
        ("noise", format!("{:?}", a.noise)),
        ("seed", a.seed.to_string()),
    ]);
    let img = load_png(&a.input)?;
    let k = load_kernel(&a.kernel)?;
    let out = blur(&img, &k, a.noise, &mut ChaCha8Rng::seed_from_u64(a.seed))?;
    save_png(&out, &a.out)
}

/// Weight-schedule file: one `step:alpha:beta` entry per line, `#` comments.
pub fn read_weight_schedule(path: &Path) -> Result<String> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let entries: Vec<&str> = text
        .lines()
        .map(|l| l.split('#').next().unwrap_or("").trim())
        .filter(|l| !l.is_empty())
        .collect();
    let joined = entries.join(";");
    parse_weight_schedule(&joined)?;
    Ok(joined)
}

fn train_cmd(a: TrainArgs) -> Result<()> {
    let mut cfg = match &a.config {
        Some(p) => PipelineConfig::from_file(p)?,
        None => PipelineConfig::default(),
    };
    for kv in &a.overrides {
        cfg.apply_override(kv)?;
    }
    if let Some(p) = &a.weight_schedule {
        cfg.set("train.weight_schedule", &read_weight_schedule(p)?)?;
    }
    if let Some(n) = a.max_steps {
        cfg.train.max_steps = n;
    }
    if let Some(s) = a.seed {
        cfg.train.seed = s;
    }
    cfg.validate()?;
    print!("{}", cfg.to_text());
    println!("data = {}", a.data.display());
    println!("out = {}", a.out.display());

    let outcome = match &a.resume {
        Some(p) => {
            let ckpt = load_checkpoint(p)?;
            if ckpt.net_config.as_ref() != Some(&cfg.net) {
                return Err(Error::Checkpoint("resume checkpoint has a different network config".into()));
            }
            println!("resume = {} (step {})", p.display(), ckpt.step);
            resume(&ckpt, &a.data, &cfg.train, &a.out)?
        }
        None => {
            let net = DeepDeblurNet::new(cfg.net.clone(), cfg.train.seed)?;
            train(net, &a.data, &cfg.train, &a.out)?
        }
    };
    if let Some(last) = outcome.log.last() {
        println!(
            "step {} lr {:.3e} l2 {:.6e} tv {:.6e} face {:.6e} total {:.6e}",
            last.step, last.lr, last.l2, last.tv, last.face, last.total
        );
    }
    println!("checkpoint step {}", outcome.checkpoint.step);
    Ok(())
}

fn deblur_cmd(a: DeblurArgs) -> Result<()> {
    print_settings(&[
        ("ckpt", a.ckpt.display().to_string()),
        ("in", a.input.display().to_string()),
        ("out", a.out.display().to_string()),
    ]);
    let restorer = load_checkpoint(&a.ckpt)?.restorer()?;
    let img = load_png(&a.input)?;
    let mut out = restorer.restore(&img)?;
    if img.channels() == 1 {
        out = out.to_gray();
    }
    save_png(&out, &a.out)
}

fn eval_cmd(a: EvalArgs, threads: usize) -> Result<()> {
    print_settings(&[
        ("ckpt", a.ckpt.display().to_string()),
        ("data", a.data.display().to_string()),
        ("kernels", a.kernels.display().to_string()),
        ("report", a.report.display().to_string()),
        ("noise", format!("{:?}", a.noise)),
        ("seed", a.seed.to_string()),
        ("threads", threads.to_string()),
    ]);
    let restorer = load_checkpoint(&a.ckpt)?.restorer()?;
    let images = load_images(&a.data)?;
    let kernels = load_kernels(&kernel_files_in(&a.kernels)?)?;
    let report = sweep(restorer.as_ref(), &images, &kernels, a.noise, a.seed, threads)?;
    print!("{}", report.to_table());
    report.write_csv(&a.report)
}

fn bench_cmd(a: BenchArgs) -> Result<()> {
    let restorer: Box<dyn Restorer> = match &a.ckpt {
        Some(p) => load_checkpoint(p)?.restorer()?,
        None => Box::new(DeepDeblurNet::new(NetworkConfig::default(), a.seed)?),
    };
    print_settings(&[
        ("ckpt", a.ckpt.as_ref().map_or("(default network)".into(), |p| p.display().to_string())),
        ("in", a.input.display().to_string()),
        ("reps", a.reps.to_string()),
        ("warmup", a.warmup.to_string()),
        ("threads", "1".into()),
    ]);
    let img: Image = load_png(&a.input)?;
    let t = time_inference(restorer.as_ref(), &img, a.warmup, a.reps)?;
    println!(
        "forward latency {}x{}: mean {:.6} s, std {:.6} s, n {}",
        img.height(),
        img.width(),
        t.mean,
        t.std,
        t.n
    );
    Ok(())
}

fn dump_cmd(a: DumpArgs) -> Result<()> {
    print_settings(&[
        ("ckpt", a.ckpt.display().to_string()),
        ("in", a.input.display().to_string()),
        ("module", a.module.to_string()),
        ("out", a.out.display().to_string()),
    ]);
    let net = load_checkpoint(&a.ckpt)?.to_net()?;
    let img = load_png(&a.input)?;
    for p in dump_feature_maps(&net, &img, a.module, &a.out)? {
        println!("wrote {}", p.display());
    }
    Ok(())
}
