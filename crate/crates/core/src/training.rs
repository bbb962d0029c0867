//! RMSProp training with online blurry-pair synthesis and checkpointing.

use std::collections::VecDeque;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::config::PipelineConfig;
use crate::error::{Error, Result};
use crate::imaging::{blur, images_to_batch, load_png, Image};
use crate::kernels::{GpConfig, KernelSynth, MotionKernel};
use crate::losses::{total_loss, FeatureExtractor, LossWeights, ProxyExtractor};
use crate::model::{DeepDeblurNet, IdentityRestorer, NetworkConfig, Restorer};
use crate::tensor::{Tape, Tensor};

/// How training pairs pick their blur kernel.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum KernelMode {
    /// A fresh GP kernel for every pair.
    Online,
    /// Every pair reuses the single kernel synthesized from `gp.seed`.
    Fixed,
}

/// Optimization and data-synthesis settings.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr0: f64,
    /// Exponential decay `lr0 · decay_rate^(step / decay_steps)`.
    pub decay_rate: f64,
    pub decay_steps: u64,
    /// Steps averaged by the plateau detector.
    pub plateau_window: usize,
    /// Steps without a new best windowed mean before the rate is halved.
    pub plateau_patience: u64,
    pub rms_decay: f64,
    pub rms_eps: f64,
    pub batch_size: usize,
    pub max_steps: u64,
    pub seed: u64,
    pub loss_weights: LossWeights,
    /// Piecewise-constant `(first step, weights)` overrides of `loss_weights`.
    pub weight_schedule: Vec<(u64, LossWeights)>,
    pub gp: GpConfig,
    pub kernel_mode: KernelMode,
    pub noise_sigma: f64,
    /// `(height, width)` every training image must have.
    pub image_size: (usize, usize),
    /// Save a checkpoint every this many steps; 0 saves only at the end.
    pub checkpoint_every: u64,
    pub feature_dim: usize,
    pub extractor_seed: u64,
    /// Extractor checkpoint to use instead of the seeded proxy.
    pub extractor_path: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr0: 0.001,
            decay_rate: 0.96,
            decay_steps: 10_000,
            plateau_window: 100,
            plateau_patience: 500,
            rms_decay: 0.9,
            rms_eps: 1e-8,
            batch_size: 4,
            max_steps: 1000,
            seed: 0,
            loss_weights: LossWeights::default(),
            weight_schedule: Vec::new(),
            gp: GpConfig::default(),
            kernel_mode: KernelMode::Online,
            noise_sigma: 0.0,
            image_size: (112, 96),
            checkpoint_every: 0,
            feature_dim: 128,
            extractor_seed: 0,
            extractor_path: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return bad(format!("train.lr0 must be positive, got {}", self.lr0));
        }
        if !(self.decay_rate > 0.0 && self.decay_rate <= 1.0) {
            return bad(format!("train.decay_rate must lie in (0,1], got {}", self.decay_rate));
        }
        if self.decay_steps == 0 || self.plateau_window == 0 || self.plateau_patience == 0 {
            return bad("train.decay_steps, plateau_window and plateau_patience must be positive".into());
        }
        if !(self.rms_decay > 0.0 && self.rms_decay < 1.0) {
            return bad(format!("train.rms_decay must lie in (0,1), got {}", self.rms_decay));
        }
        if !(self.rms_eps > 0.0) {
            return bad(format!("train.rms_eps must be positive, got {}", self.rms_eps));
        }
        if self.batch_size == 0 {
            return bad("train.batch_size must be at least 1".into());
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return bad(format!("train.noise_sigma must be >= 0, got {}", self.noise_sigma));
        }
        if self.image_size.0 == 0 || self.image_size.1 == 0 || self.feature_dim == 0 {
            return bad("train.image_size and loss.feature_dim must be positive".into());
        }
        self.loss_weights.validate()?;
        for (_, w) in &self.weight_schedule {
            w.validate()?;
        }
        self.gp.validate()
    }

    /// Loss weights in effect at `step`.
    pub fn weights_at(&self, step: u64) -> LossWeights {
        self.weight_schedule
            .iter()
            .filter(|(s, _)| *s <= step)
            .max_by_key(|(s, _)| *s)
            .map_or(self.loss_weights, |(_, w)| *w)
    }
}

/// Squared-gradient accumulators, one per parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct RmsState {
    pub accumulators: Vec<Tensor>,
    pub step: u64,
}

impl RmsState {
    pub fn new(params: &[Tensor]) -> Self {
        Self {
            accumulators: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            step: 0,
        }
    }
}

/// One RMSProp update:
/// `acc ← ρ·acc + (1−ρ)·g²`, `p ← p − lr·g / √(acc + ε)`.
pub fn rmsprop_step(
    params: &mut [Tensor],
    grads: &[Option<Tensor>],
    state: &mut RmsState,
    lr: f64,
    rho: f64,
    eps: f64,
) -> Result<()> {
    if grads.len() != params.len() || state.accumulators.len() != params.len() {
        return Err(Error::Optimizer(format!(
            "{} parameters, {} gradients, {} accumulators",
            params.len(),
            grads.len(),
            state.accumulators.len()
        )));
    }
    for (i, ((p, g), acc)) in params.iter_mut().zip(grads).zip(&mut state.accumulators).enumerate() {
        let g = g
            .as_ref()
            .ok_or_else(|| Error::Optimizer(format!("missing gradient for parameter {i}")))?;
        if g.shape() != p.shape() || acc.shape() != p.shape() {
            return Err(Error::Optimizer(format!(
                "parameter {i}: shape {:?}, gradient {:?}, accumulator {:?}",
                p.shape(),
                g.shape(),
                acc.shape()
            )));
        }
        for ((pv, &gv), av) in p.data_mut().iter_mut().zip(g.data()).zip(acc.data_mut()) {
            *av = rho * *av + (1.0 - rho) * gv * gv;
            *pv -= lr * gv / (*av + eps).sqrt();
        }
    }
    state.step += 1;
    Ok(())
}

/// Counts learning-rate halvings: whenever the windowed mean loss has not
/// reached a new minimum for `patience` consecutive steps.
#[derive(Clone, Debug, PartialEq)]
pub struct PlateauTracker {
    window: usize,
    patience: u64,
    recent: VecDeque<f64>,
    best: f64,
    since_improve: u64,
    halvings: u32,
}

impl PlateauTracker {
    pub fn new(window: usize, patience: u64) -> Self {
        Self {
            window,
            patience,
            recent: VecDeque::with_capacity(window),
            best: f64::INFINITY,
            since_improve: 0,
            halvings: 0,
        }
    }

    pub fn observe(&mut self, loss: f64) {
        if self.recent.len() == self.window {
            self.recent.pop_front();
        }
        self.recent.push_back(loss);
        if self.recent.len() < self.window {
            return;
        }
        let mean = self.recent.iter().sum::<f64>() / self.window as f64;
        if mean < self.best {
            self.best = mean;
            self.since_improve = 0;
        } else {
            self.since_improve += 1;
            if self.since_improve >= self.patience {
                self.halvings += 1;
                self.since_improve = 0;
            }
        }
    }

    pub fn halvings(&self) -> u32 {
        self.halvings
    }
}

fn decayed_lr(step: u64, halvings: u32, cfg: &TrainConfig) -> f64 {
    cfg.lr0 * cfg.decay_rate.powf(step as f64 / cfg.decay_steps as f64) * 0.5f64.powi(halvings as i32)
}

/// `lr0 · decay_rate^(step/decay_steps) · 0.5^halvings`, with halvings counted
/// by replaying `recent_losses` through a [`PlateauTracker`].
pub fn lr_schedule(step: u64, recent_losses: &[f64], cfg: &TrainConfig) -> f64 {
    let mut tracker = PlateauTracker::new(cfg.plateau_window, cfg.plateau_patience);
    for &l in recent_losses {
        tracker.observe(l);
    }
    decayed_lr(step, tracker.halvings(), cfg)
}

/// A synthesized training example.
#[derive(Clone, Debug)]
pub struct TrainingPair {
    pub blurry: Image,
    pub sharp: Image,
    pub kernel: MotionKernel,
}

/// Blur `sharp` with a freshly synthesized kernel.
pub fn make_pair<R: Rng + ?Sized>(sharp: &Image, gp: &GpConfig, noise_sigma: f64, rng: &mut R) -> Result<TrainingPair> {
    let kernel = crate::kernels::synth_kernel(gp, rng)?;
    let blurry = blur(sharp, &kernel, noise_sigma, rng)?;
    Ok(TrainingPair {
        blurry,
        sharp: sharp.clone(),
        kernel,
    })
}

/// Mix a base seed with stream coordinates (splitmix64 finalizer per part).
pub fn stream_seed(base: u64, parts: &[u64]) -> u64 {
    let mut z = base;
    for &p in parts {
        z = z.wrapping_add(p.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^= z >> 31;
    }
    z
}

/// Deterministic pair generator: the pair for `(step, item)` depends only on
/// the seeds and those coordinates.
pub struct PairSource {
    synth: KernelSynth,
    fixed: Option<MotionKernel>,
    noise_sigma: f64,
    seed: u64,
}

impl PairSource {
    pub fn new(cfg: &TrainConfig) -> Result<Self> {
        let synth = KernelSynth::new(&cfg.gp)?;
        let fixed = match cfg.kernel_mode {
            KernelMode::Fixed => Some(synth.synth(&mut cfg.gp.rng())?),
            KernelMode::Online => None,
        };
        Ok(Self {
            synth,
            fixed,
            noise_sigma: cfg.noise_sigma,
            seed: cfg.seed,
        })
    }

    pub fn kernel(&self, step: u64, item: u64) -> Result<MotionKernel> {
        match &self.fixed {
            Some(k) => Ok(k.clone()),
            None => {
                let seed = stream_seed(self.synth.config().seed, &[step, item]);
                self.synth.synth(&mut ChaCha8Rng::seed_from_u64(seed))
            }
        }
    }

    pub fn pair(&self, sharp: &Image, step: u64, item: u64) -> Result<TrainingPair> {
        let kernel = self.kernel(step, item)?;
        let mut noise_rng = ChaCha8Rng::seed_from_u64(stream_seed(self.seed, &[step, item, 1]));
        let blurry = blur(sharp, &kernel, self.noise_sigma, &mut noise_rng)?;
        Ok(TrainingPair {
            blurry,
            sharp: sharp.clone(),
            kernel,
        })
    }
}

/// All PNGs in `dir`, sorted by file name, each required to be `size`.
pub fn load_dataset(dir: impl AsRef<Path>, size: (usize, usize)) -> Result<Vec<Image>> {
    let dir = dir.as_ref();
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::Training(format!("no PNG images in {}", dir.display())));
    }
    paths
        .iter()
        .map(|p| {
            let img = load_png(p)?.to_rgb();
            if (img.height(), img.width()) != size {
                return Err(Error::Training(format!(
                    "{} is {}x{}, expected {}x{}",
                    p.display(),
                    img.height(),
                    img.width(),
                    size.0,
                    size.1
                )));
            }
            Ok(img)
        })
        .collect()
}

/// One loss-log row.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LogRow {
    pub step: u64,
    pub lr: f64,
    pub l2: f64,
    pub tv: f64,
    pub face: f64,
    pub total: f64,
}

pub const LOG_HEADER: &str = "step,lr,l2,tv,face,total";

pub fn format_log(rows: &[LogRow]) -> String {
    let mut s = format!("{LOG_HEADER}\n");
    for r in rows {
        let _ = writeln!(s, "{},{:?},{:?},{:?},{:?},{:?}", r.step, r.lr, r.l2, r.tv, r.face, r.total);
    }
    s
}

pub fn parse_log(text: &str) -> Result<Vec<LogRow>> {
    let mut lines = text.lines();
    if lines.next() != Some(LOG_HEADER) {
        return Err(Error::parse("loss log", "missing header"));
    }
    lines
        .filter(|l| !l.trim().is_empty())
        .map(|line| {
            let f: Vec<&str> = line.split(',').collect();
            let bad = || Error::parse("loss log", format!("bad row {line:?}"));
            if f.len() != 6 {
                return Err(bad());
            }
            let num = |i: usize| f[i].parse::<f64>().map_err(|_| bad());
            Ok(LogRow {
                step: f[0].parse().map_err(|_| bad())?,
                lr: num(1)?,
                l2: num(2)?,
                tv: num(3)?,
                face: num(4)?,
                total: num(5)?,
            })
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Checkpoint container

const MAGIC: &[u8; 5] = b"DDBLR";
const VERSION: u8 = b'1';

/// What a checkpoint holds.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CheckpointKind {
    DeblurNet,
    /// Restorer that returns its input; carries no parameters.
    IdentityStub,
    FeatureExtractor,
}

impl CheckpointKind {
    pub fn tag(self) -> &'static str {
        match self {
            Self::DeblurNet => "deblur-net",
            Self::IdentityStub => "identity-stub",
            Self::FeatureExtractor => "feature-extractor",
        }
    }

    fn from_tag(tag: &str) -> Result<Self> {
        match tag {
            "deblur-net" => Ok(Self::DeblurNet),
            "identity-stub" => Ok(Self::IdentityStub),
            "feature-extractor" => Ok(Self::FeatureExtractor),
            other => Err(Error::Checkpoint(format!("unknown kind {other:?}"))),
        }
    }
}

/// Serialized training state.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub kind: CheckpointKind,
    pub net_config: Option<NetworkConfig>,
    /// Named tensors in declaration order.
    pub params: Vec<(String, Tensor)>,
    pub rms: Option<RmsState>,
    pub step: u64,
    /// SHA-256 of the canonical training configuration, hex encoded.
    pub digest: String,
    pub plateau: Option<PlateauTracker>,
}

impl Checkpoint {
    pub fn identity_stub() -> Self {
        Self {
            kind: CheckpointKind::IdentityStub,
            net_config: None,
            params: Vec::new(),
            rms: None,
            step: 0,
            digest: String::new(),
            plateau: None,
        }
    }

    /// Snapshot of an untrained or trained network without optimizer state.
    pub fn from_net(net: &DeepDeblurNet) -> Self {
        Self {
            kind: CheckpointKind::DeblurNet,
            net_config: Some(net.config().clone()),
            params: net.named_params().map(|(n, t)| (n.to_string(), t.clone())).collect(),
            rms: None,
            step: 0,
            digest: String::new(),
            plateau: None,
        }
    }

    pub fn from_extractor(phi: &ProxyExtractor) -> Self {
        Self {
            kind: CheckpointKind::FeatureExtractor,
            net_config: None,
            params: ProxyExtractor::PARAM_NAMES
                .iter()
                .zip(phi.weights())
                .map(|(n, t)| (n.to_string(), t.clone()))
                .collect(),
            rms: None,
            step: 0,
            digest: String::new(),
            plateau: None,
        }
    }

    /// Rebuild the network, auditing every parameter shape.
    pub fn to_net(&self) -> Result<DeepDeblurNet> {
        if self.kind != CheckpointKind::DeblurNet {
            return Err(Error::Checkpoint(format!("{} checkpoint holds no network", self.kind.tag())));
        }
        let cfg = self.net_config.clone().ok_or_else(|| Error::Checkpoint("missing network config".into()))?;
        DeepDeblurNet::from_params(cfg, self.params.clone())
    }

    /// Copy the parameters into an existing network of the same topology.
    pub fn load_into(&self, net: &mut DeepDeblurNet) -> Result<()> {
        let loaded = self.to_net()?;
        if loaded.config() != net.config() {
            return Err(Error::Checkpoint(format!(
                "checkpoint network config {:?} differs from target {:?}",
                loaded.config(),
                net.config()
            )));
        }
        *net = loaded;
        Ok(())
    }

    pub fn to_extractor(&self) -> Result<ProxyExtractor> {
        if self.kind != CheckpointKind::FeatureExtractor {
            return Err(Error::Checkpoint(format!("{} checkpoint is not an extractor", self.kind.tag())));
        }
        let get = |name: &str| {
            self.params
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, t)| t.clone())
                .ok_or_else(|| Error::Checkpoint(format!("extractor checkpoint lacks {name}")))
        };
        ProxyExtractor::from_weights(get("conv1")?, get("conv2")?, get("projection")?)
    }

    /// Restorer described by this checkpoint.
    pub fn restorer(&self) -> Result<Box<dyn Restorer>> {
        match self.kind {
            CheckpointKind::DeblurNet => Ok(Box::new(self.to_net()?)),
            CheckpointKind::IdentityStub => Ok(Box::new(IdentityRestorer)),
            CheckpointKind::FeatureExtractor => {
                Err(Error::Checkpoint("a feature-extractor checkpoint cannot restore images".into()))
            }
        }
    }

    fn header(&self) -> String {
        let mut h = String::new();
        let _ = writeln!(h, "kind={}", self.kind.tag());
        if let Some(cfg) = &self.net_config {
            for (k, v) in PipelineConfig::net_entries(cfg) {
                let _ = writeln!(h, "{k}={v}");
            }
        }
        let _ = writeln!(h, "step={}", self.step);
        let _ = writeln!(h, "digest={}", self.digest);
        if let Some(rms) = &self.rms {
            let _ = writeln!(h, "rms.step={}", rms.step);
        }
        if let Some(p) = &self.plateau {
            let window: Vec<String> = p.recent.iter().map(|v| format!("{v:?}")).collect();
            let _ = writeln!(h, "plateau.window={}", p.window);
            let _ = writeln!(h, "plateau.patience={}", p.patience);
            let _ = writeln!(h, "plateau.best={:?}", p.best);
            let _ = writeln!(h, "plateau.since_improve={}", p.since_improve);
            let _ = writeln!(h, "plateau.halvings={}", p.halvings);
            let _ = writeln!(h, "plateau.recent={}", window.join(","));
        }
        h
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.push(VERSION);
        let header = self.header();
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(header.as_bytes());
        let rms_tensors = self.rms.iter().flat_map(|r| {
            self.params
                .iter()
                .zip(&r.accumulators)
                .map(|((n, _), a)| (format!("rms/{n}"), a))
        });
        let tensors: Vec<(String, &Tensor)> = self
            .params
            .iter()
            .map(|(n, t)| (n.clone(), t))
            .chain(rms_tensors)
            .collect();
        out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
        for (name, t) in tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader { bytes, pos: 0 };
        let magic = r.take(MAGIC.len())?;
        if magic != MAGIC {
            return Err(Error::Checkpoint("bad magic bytes; not a DDBLR checkpoint".into()));
        }
        let version = r.take(1)?[0];
        if version != VERSION {
            return Err(Error::Checkpoint(format!(
                "version mismatch: file is DDBLR{}, expected DDBLR{}",
                version as char, VERSION as char
            )));
        }
        let header_len = r.u32()? as usize;
        let header = std::str::from_utf8(r.take(header_len)?)
            .map_err(|_| Error::Checkpoint("header is not UTF-8".into()))?;
        let entries = crate::config::parse_key_values(header)?;
        let get = |k: &str| entries.iter().find(|(key, _)| key == k).map(|(_, v)| v.as_str());
        let need = |k: &str| get(k).ok_or_else(|| Error::Checkpoint(format!("header lacks {k}")));
        let num = |k: &str| -> Result<u64> {
            need(k)?
                .parse()
                .map_err(|_| Error::Checkpoint(format!("header field {k} is not an integer")))
        };

        let kind = CheckpointKind::from_tag(need("kind")?)?;
        let net_config = if kind == CheckpointKind::DeblurNet {
            let mut cfg = PipelineConfig::default();
            for (k, v) in entries.iter().filter(|(k, _)| k.starts_with("net.")) {
                cfg.set(k, v)?;
            }
            Some(cfg.net)
        } else {
            None
        };
        let step = num("step")?;
        let digest = need("digest")?.to_string();
        let plateau = match get("plateau.window") {
            Some(_) => {
                let recent = need("plateau.recent")?;
                let recent = if recent.is_empty() {
                    VecDeque::new()
                } else {
                    recent
                        .split(',')
                        .map(|v| v.parse::<f64>().map_err(|_| Error::Checkpoint(format!("bad plateau value {v:?}"))))
                        .collect::<Result<_>>()?
                };
                Some(PlateauTracker {
                    window: num("plateau.window")? as usize,
                    patience: num("plateau.patience")?,
                    recent,
                    best: need("plateau.best")?
                        .parse()
                        .map_err(|_| Error::Checkpoint("bad plateau.best".into()))?,
                    since_improve: num("plateau.since_improve")?,
                    halvings: num("plateau.halvings")? as u32,
                })
            }
            None => None,
        };

        let count = r.u32()? as usize;
        let mut params = Vec::new();
        let mut accumulators = Vec::new();
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?
                .to_string();
            let ndim = r.u32()? as usize;
            let shape = (0..ndim).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let raw = r.take(n.checked_mul(8).ok_or_else(|| Error::Checkpoint("tensor too large".into()))?)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            let t = Tensor::new(shape, data).map_err(|e| Error::Checkpoint(format!("tensor {name}: {e}")))?;
            match name.strip_prefix("rms/") {
                Some(pname) => accumulators.push((pname.to_string(), t)),
                None => params.push((name, t)),
            }
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        let rms = match get("rms.step") {
            Some(_) => {
                if accumulators.len() != params.len()
                    || accumulators.iter().zip(&params).any(|((a, at), (p, pt))| a != p || at.shape() != pt.shape())
                {
                    return Err(Error::Checkpoint("optimizer state does not match parameters".into()));
                }
                Some(RmsState {
                    accumulators: accumulators.into_iter().map(|(_, t)| t).collect(),
                    step: num("rms.step")?,
                })
            }
            None if accumulators.is_empty() => None,
            None => return Err(Error::Checkpoint("optimizer tensors without rms.step".into())),
        };
        Ok(Self {
            kind,
            net_config,
            params,
            rms,
            step,
            digest,
            plateau,
        })
    }
}

struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::Checkpoint(format!("truncated: needed {n} bytes at offset {}", self.pos))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, ckpt.to_bytes()).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes)
}

/// SHA-256 over the canonical text of the training configuration.
pub fn config_digest(cfg: &TrainConfig) -> String {
    let text = PipelineConfig::train_text(cfg);
    Sha256::digest(text.as_bytes())
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

/// Feature extractor selected by the configuration.
pub fn extractor_for(cfg: &TrainConfig, in_channels: usize) -> Result<ProxyExtractor> {
    match &cfg.extractor_path {
        Some(p) => load_checkpoint(p)?.to_extractor(),
        None => ProxyExtractor::new(cfg.extractor_seed, cfg.feature_dim, in_channels),
    }
}

/// Result of a training run.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub net: DeepDeblurNet,
    pub checkpoint: Checkpoint,
    /// Every row from step 0, including rows restored on resume.
    pub log: Vec<LogRow>,
}

pub const LOG_FILE: &str = "loss_log.csv";
pub const FINAL_CHECKPOINT: &str = "final.ddblr";

pub fn step_checkpoint_name(step: u64) -> String {
    format!("step-{step:08}.ddblr")
}

/// Train `net` from scratch on the PNGs in `dataset_dir`.
///
/// Each step samples `batch_size` images, blurs each with a synthesized
/// kernel, runs the forward pass and the total loss, backpropagates and
/// applies one RMSProp update. Checkpoints and `loss_log.csv` are written to
/// `checkpoint_dir`.
pub fn train(
    net: DeepDeblurNet,
    dataset_dir: impl AsRef<Path>,
    cfg: &TrainConfig,
    checkpoint_dir: impl AsRef<Path>,
) -> Result<TrainOutcome> {
    let rms = RmsState::new(net.params());
    let tracker = PlateauTracker::new(cfg.plateau_window, cfg.plateau_patience);
    run(net, rms, tracker, 0, Vec::new(), dataset_dir.as_ref(), cfg, checkpoint_dir.as_ref())
}

/// Continue a run from a checkpoint written by [`train`] with the same
/// configuration. Log rows before the checkpoint step are taken from the
/// existing `loss_log.csv` in `checkpoint_dir`, when present.
pub fn resume(
    ckpt: &Checkpoint,
    dataset_dir: impl AsRef<Path>,
    cfg: &TrainConfig,
    checkpoint_dir: impl AsRef<Path>,
) -> Result<TrainOutcome> {
    let digest = config_digest(cfg);
    if ckpt.digest != digest {
        return Err(Error::Checkpoint(format!(
            "config digest mismatch: checkpoint {} vs current {digest}",
            ckpt.digest
        )));
    }
    let net = ckpt.to_net()?;
    let rms = ckpt
        .rms
        .clone()
        .ok_or_else(|| Error::Checkpoint("checkpoint has no optimizer state".into()))?;
    let tracker = ckpt
        .plateau
        .clone()
        .ok_or_else(|| Error::Checkpoint("checkpoint has no schedule state".into()))?;
    let dir = checkpoint_dir.as_ref();
    let log_path = dir.join(LOG_FILE);
    let prior = match fs::read_to_string(&log_path) {
        Ok(text) => parse_log(&text)?.into_iter().filter(|r| r.step < ckpt.step).collect(),
        Err(_) => Vec::new(),
    };
    run(net, rms, tracker, ckpt.step, prior, dataset_dir.as_ref(), cfg, dir)
}

#[allow(clippy::too_many_arguments)]
fn run(
    mut net: DeepDeblurNet,
    mut rms: RmsState,
    mut tracker: PlateauTracker,
    start: u64,
    mut log: Vec<LogRow>,
    dataset_dir: &Path,
    cfg: &TrainConfig,
    checkpoint_dir: &Path,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let images = load_dataset(dataset_dir, cfg.image_size)?;
    fs::create_dir_all(checkpoint_dir).map_err(|e| Error::io(checkpoint_dir, e))?;
    let phi = extractor_for(cfg, net.config().out_channels)?;
    let source = PairSource::new(cfg)?;
    let digest = config_digest(cfg);

    let snapshot = |net: &DeepDeblurNet, rms: &RmsState, tracker: &PlateauTracker, step: u64| Checkpoint {
        rms: Some(rms.clone()),
        step,
        digest: digest.clone(),
        plateau: Some(tracker.clone()),
        ..Checkpoint::from_net(net)
    };
    let write_log = |log: &[LogRow]| {
        let path = checkpoint_dir.join(LOG_FILE);
        fs::write(&path, format_log(log)).map_err(|e| Error::io(&path, e))
    };

    for step in start..cfg.max_steps {
        let mut batch_rng = ChaCha8Rng::seed_from_u64(stream_seed(cfg.seed, &[step]));
        let mut blurry = Vec::with_capacity(cfg.batch_size);
        let mut sharp = Vec::with_capacity(cfg.batch_size);
        for item in 0..cfg.batch_size as u64 {
            let idx = batch_rng.random_range(0..images.len());
            let pair = source.pair(&images[idx], step, item)?;
            blurry.push(pair.blurry);
            sharp.push(pair.sharp);
        }

        let tape = Tape::new();
        let params = net.bind(&tape);
        let x = tape.constant(images_to_batch(&blurry)?);
        let target = tape.constant(images_to_batch(&sharp)?);
        let pred = net.forward_with(&params, x)?;
        let terms = total_loss(pred, target, cfg.weights_at(step), &phi as &dyn FeatureExtractor)?;
        let (l2, tv, face, total) = terms.values()?;
        if !total.is_finite() {
            let diag = checkpoint_dir.join(format!("diagnostics-step-{step}.txt"));
            let text = format!(
                "non-finite loss at step {step}\nbatch seed {}\nl2={l2:?} tv={tv:?} face={face:?} total={total:?}\n",
                stream_seed(cfg.seed, &[step])
            );
            let _ = fs::write(&diag, text);
            return Err(Error::Training(format!(
                "non-finite loss {total} at step {step}; diagnostics in {}",
                diag.display()
            )));
        }
        let mut grads = terms.total.backward()?;
        let grads: Vec<Option<Tensor>> = params.iter().map(|&p| grads.take(p)).collect();

        tracker.observe(total);
        let lr = decayed_lr(step, tracker.halvings(), cfg);
        rmsprop_step(net.params_mut(), &grads, &mut rms, lr, cfg.rms_decay, cfg.rms_eps)?;
        log.push(LogRow {
            step,
            lr,
            l2,
            tv,
            face,
            total,
        });

        let done = step + 1;
        if cfg.checkpoint_every > 0 && done % cfg.checkpoint_every == 0 {
            save_checkpoint(&snapshot(&net, &rms, &tracker, done), checkpoint_dir.join(step_checkpoint_name(done)))?;
            write_log(&log)?;
        }
    }

    let end = start.max(cfg.max_steps);
    let checkpoint = snapshot(&net, &rms, &tracker, end);
    save_checkpoint(&checkpoint, checkpoint_dir.join(FINAL_CHECKPOINT))?;
    write_log(&log)?;
    Ok(TrainOutcome { net, checkpoint, log })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_decays_accumulator_only() {
        let mut params = vec![Tensor::from_vec(vec![1.0, -2.0]).unwrap()];
        let mut state = RmsState {
            accumulators: vec![Tensor::from_vec(vec![0.5, 2.0]).unwrap()],
            step: 0,
        };
        let grads = vec![Some(Tensor::zeros(&[2]))];
        rmsprop_step(&mut params, &grads, &mut state, 0.1, 0.9, 1e-8).unwrap();
        assert_eq!(params[0].data(), &[1.0, -2.0]);
        assert_eq!(state.accumulators[0].data(), &[0.9 * 0.5, 0.9 * 2.0]);
    }

    #[test]
    fn one_step_by_hand() {
        let mut params = vec![Tensor::scalar(0.0)];
        let mut state = RmsState::new(&params);
        rmsprop_step(&mut params, &[Some(Tensor::scalar(1.0))], &mut state, 0.001, 0.9, 1e-8).unwrap();
        assert!((state.accumulators[0].data()[0] - 0.1).abs() < 1e-15);
        let expected = -0.001 / ((1.0 - 0.9f64) + 1e-8).sqrt();
        assert!((params[0].data()[0] - expected).abs() < 1e-18);
        assert_eq!(state.step, 1);
    }

    #[test]
    fn missing_gradient_is_an_error() {
        let mut params = vec![Tensor::scalar(0.0), Tensor::scalar(1.0)];
        let mut state = RmsState::new(&params);
        let r = rmsprop_step(&mut params, &[Some(Tensor::scalar(1.0)), None], &mut state, 0.1, 0.9, 1e-8);
        assert!(matches!(r, Err(Error::Optimizer(_))));
    }

    #[test]
    fn schedule_closed_form() {
        let cfg = TrainConfig {
            decay_rate: 0.5,
            decay_steps: 1000,
            ..TrainConfig::default()
        };
        assert_eq!(lr_schedule(0, &[], &cfg), cfg.lr0);
        assert!((lr_schedule(2000, &[], &cfg) - cfg.lr0 / 4.0).abs() < 1e-18);
    }

    #[test]
    fn plateau_halves_after_patience() {
        let cfg = TrainConfig {
            plateau_window: 2,
            plateau_patience: 3,
            ..TrainConfig::default()
        };
        let flat = vec![1.0; 20];
        // first full window sets the best; each 3 non-improving steps halve
        let mut t = PlateauTracker::new(2, 3);
        for l in &flat {
            t.observe(*l);
        }
        assert_eq!(t.halvings(), 6);
        let lr = lr_schedule(0, &flat, &cfg);
        assert!((lr - cfg.lr0 / 64.0).abs() < 1e-18);
    }

    #[test]
    fn weight_schedule_lookup() {
        let w = |a| LossWeights { alpha: a, beta: 1.0 };
        let cfg = TrainConfig {
            loss_weights: w(1.0),
            weight_schedule: vec![(100, w(2.0)), (50, w(3.0))],
            ..TrainConfig::default()
        };
        assert_eq!(cfg.weights_at(0).alpha, 1.0);
        assert_eq!(cfg.weights_at(50).alpha, 3.0);
        assert_eq!(cfg.weights_at(99).alpha, 3.0);
        assert_eq!(cfg.weights_at(1000).alpha, 2.0);
    }

    #[test]
    fn stream_seeds_differ() {
        let a = stream_seed(1, &[0, 0]);
        assert_ne!(a, stream_seed(1, &[0, 1]));
        assert_ne!(a, stream_seed(1, &[1, 0]));
        assert_ne!(a, stream_seed(2, &[0, 0]));
        assert_eq!(a, stream_seed(1, &[0, 0]));
    }

    #[test]
    fn log_round_trip() {
        let rows = vec![LogRow {
            step: 3,
            lr: 1e-3,
            l2: 0.1,
            tv: 2.5,
            face: 0.0,
            total: 0.10025,
        }];
        let text = format_log(&rows);
        assert!(text.starts_with("step,lr,l2,tv,face,total\n"));
        assert_eq!(parse_log(&text).unwrap(), rows);
    }

    #[test]
    fn checkpoint_rejects_corruption() {
        let net = DeepDeblurNet::new(
            NetworkConfig {
                num_modules: 1,
                base_channels: 2,
                scales: vec![1, 3],
                ..NetworkConfig::default()
            },
            0,
        )
        .unwrap();
        let bytes = Checkpoint::from_net(&net).to_bytes();
        assert_eq!(&bytes[..6], b"DDBLR1");
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::Checkpoint(_))));
        let mut v2 = bytes.clone();
        v2[5] = b'2';
        let err = Checkpoint::from_bytes(&v2).unwrap_err().to_string();
        assert!(err.contains("version"), "{err}");
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]).is_err());
        assert_eq!(Checkpoint::from_bytes(&bytes).unwrap().to_net().unwrap(), net);
    }
}
