//! Flat `key = value` configuration files.
//!
//! Keys live in four sections: `net.*`, `train.*`, `loss.*` and `gp.*`.
//! Ranges and lists are comma separated; `#` starts a comment.
//!
//! ```
//! use deepdeblur::config::PipelineConfig;
//! let cfg = PipelineConfig::from_text("net.num_modules = 2\ngp.valid_size = 8,12\n").unwrap();
//! assert_eq!(cfg.net.num_modules, 2);
//! assert_eq!(cfg.train.gp.valid_size_range, (8, 12));
//! ```

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::model::NetworkConfig;
use crate::training::{KernelMode, TrainConfig};

/// Network plus training configuration.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PipelineConfig {
    pub net: NetworkConfig,
    pub train: TrainConfig,
}

/// Split text into `(key, value)` pairs, dropping comments and blank lines.
pub fn parse_key_values(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::parse("config", format!("line {}: expected key = value, got {raw:?}", n + 1)))?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

fn num<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {v:?}")))
}

fn pair<T: FromStr>(key: &str, v: &str) -> Result<(T, T)> {
    let (a, b) = v
        .split_once(',')
        .ok_or_else(|| Error::Config(format!("{key}: expected two comma-separated values, got {v:?}")))?;
    Ok((num(key, a.trim())?, num(key, b.trim())?))
}

fn boolean(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected true or false, got {v:?}"))),
    }
}

/// Parse `step:alpha:beta` entries separated by `;`.
pub fn parse_weight_schedule(v: &str) -> Result<Vec<(u64, LossWeights)>> {
    let key = "train.weight_schedule";
    v.split(';')
        .map(str::trim)
        .filter(|e| !e.is_empty())
        .map(|e| {
            let f: Vec<&str> = e.split(':').map(str::trim).collect();
            if f.len() != 3 {
                return Err(Error::Config(format!("{key}: expected step:alpha:beta, got {e:?}")));
            }
            let w = LossWeights {
                alpha: num(key, f[1])?,
                beta: num(key, f[2])?,
            };
            w.validate()?;
            Ok((num(key, f[0])?, w))
        })
        .collect()
}

fn format_weight_schedule(s: &[(u64, LossWeights)]) -> String {
    s.iter()
        .map(|(step, w)| format!("{step}:{:?}:{:?}", w.alpha, w.beta))
        .collect::<Vec<_>>()
        .join(";")
}

impl PipelineConfig {
    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (k, v) in parse_key_values(text)? {
            cfg.set(&k, &v)?;
        }
        Ok(cfg)
    }

    /// Small single-image overfit setup: 2 modules of 16 channels with scales
    /// 1..7, one 112x96 image, the fixed kernel from `gp.seed`, 2000 steps.
    /// The TV weight is divided by the pixel count so it acts per pixel like
    /// the mean-squared L2 term.
    pub fn toy() -> Self {
        let (h, w) = (112, 96);
        let mut cfg = Self::default();
        cfg.net.num_modules = 2;
        cfg.net.base_channels = 16;
        cfg.net.scales = vec![1, 3, 5, 7];
        cfg.train.image_size = (h, w);
        cfg.train.batch_size = 1;
        cfg.train.max_steps = 2000;
        cfg.train.kernel_mode = KernelMode::Fixed;
        cfg.train.loss_weights.alpha = 1e-4 / (h * w * 3) as f64;
        cfg
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }

    /// Apply one override. Unknown keys are an error.
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let n = &mut self.net;
        let t = &mut self.train;
        match key {
            "net.num_modules" => n.num_modules = num(key, v)?,
            "net.base_channels" => n.base_channels = num(key, v)?,
            "net.scales" => {
                n.scales = v
                    .split(',')
                    .map(|s| num(key, s.trim()))
                    .collect::<Result<_>>()?
            }
            "net.leaky_slope" => n.leaky_slope = num(key, v)?,
            "net.pointwise_reduction" => n.pointwise_reduction = boolean(key, v)?,
            "net.in_channels" => n.in_channels = num(key, v)?,
            "net.out_channels" => n.out_channels = num(key, v)?,

            "train.lr0" => t.lr0 = num(key, v)?,
            "train.decay_rate" => t.decay_rate = num(key, v)?,
            "train.decay_steps" => t.decay_steps = num(key, v)?,
            "train.plateau_window" => t.plateau_window = num(key, v)?,
            "train.plateau_patience" => t.plateau_patience = num(key, v)?,
            "train.rms_decay" => t.rms_decay = num(key, v)?,
            "train.rms_eps" => t.rms_eps = num(key, v)?,
            "train.batch_size" => t.batch_size = num(key, v)?,
            "train.max_steps" => t.max_steps = num(key, v)?,
            "train.seed" => t.seed = num(key, v)?,
            "train.noise_sigma" => t.noise_sigma = num(key, v)?,
            "train.image_size" => t.image_size = pair(key, v)?,
            "train.checkpoint_every" => t.checkpoint_every = num(key, v)?,
            "train.kernel_mode" => {
                t.kernel_mode = match v {
                    "online" => KernelMode::Online,
                    "fixed" => KernelMode::Fixed,
                    _ => return Err(Error::Config(format!("{key}: expected online or fixed, got {v:?}"))),
                }
            }
            "train.weight_schedule" => t.weight_schedule = parse_weight_schedule(v)?,

            "loss.alpha" => t.loss_weights.alpha = num(key, v)?,
            "loss.beta" => t.loss_weights.beta = num(key, v)?,
            "loss.feature_dim" => t.feature_dim = num(key, v)?,
            "loss.extractor_seed" => t.extractor_seed = num(key, v)?,
            "loss.extractor_path" => t.extractor_path = (!v.is_empty()).then(|| PathBuf::from(v)),

            "gp.sigma_f2" => t.gp.sigma_f2 = num(key, v)?,
            "gp.length_scale" => t.gp.length_scale = num(key, v)?,
            "gp.step" => t.gp.step = num(key, v)?,
            "gp.traj_len" => t.gp.traj_len_range = pair(key, v)?,
            "gp.valid_size" => t.gp.valid_size_range = pair(key, v)?,
            "gp.canvas" => t.gp.canvas = num(key, v)?,
            "gp.seed" => t.gp.seed = num(key, v)?,
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    /// Parse and apply a `key=value` override.
    pub fn apply_override(&mut self, kv: &str) -> Result<()> {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override {kv:?} is not key=value")))?;
        self.set(k.trim(), v.trim())
    }

    pub fn validate(&self) -> Result<()> {
        self.net.validate()?;
        self.train.validate()
    }

    pub fn net_entries(n: &NetworkConfig) -> Vec<(String, String)> {
        let scales: Vec<String> = n.scales.iter().map(|s| s.to_string()).collect();
        vec![
            ("net.num_modules".into(), n.num_modules.to_string()),
            ("net.base_channels".into(), n.base_channels.to_string()),
            ("net.scales".into(), scales.join(",")),
            ("net.leaky_slope".into(), format!("{:?}", n.leaky_slope)),
            ("net.pointwise_reduction".into(), n.pointwise_reduction.to_string()),
            ("net.in_channels".into(), n.in_channels.to_string()),
            ("net.out_channels".into(), n.out_channels.to_string()),
        ]
    }

    /// Every setting that changes what a training step computes. Run length
    /// and checkpoint cadence are left out so a run can be extended.
    fn train_entries(t: &TrainConfig) -> Vec<(String, String)> {
        let g = &t.gp;
        let mut e: Vec<(String, String)> = vec![
            ("train.lr0".into(), format!("{:?}", t.lr0)),
            ("train.decay_rate".into(), format!("{:?}", t.decay_rate)),
            ("train.decay_steps".into(), t.decay_steps.to_string()),
            ("train.plateau_window".into(), t.plateau_window.to_string()),
            ("train.plateau_patience".into(), t.plateau_patience.to_string()),
            ("train.rms_decay".into(), format!("{:?}", t.rms_decay)),
            ("train.rms_eps".into(), format!("{:?}", t.rms_eps)),
            ("train.batch_size".into(), t.batch_size.to_string()),
            ("train.seed".into(), t.seed.to_string()),
            ("train.noise_sigma".into(), format!("{:?}", t.noise_sigma)),
            ("train.image_size".into(), format!("{},{}", t.image_size.0, t.image_size.1)),
            (
                "train.kernel_mode".into(),
                match t.kernel_mode {
                    KernelMode::Online => "online",
                    KernelMode::Fixed => "fixed",
                }
                .into(),
            ),
            ("train.weight_schedule".into(), format_weight_schedule(&t.weight_schedule)),
            ("loss.alpha".into(), format!("{:?}", t.loss_weights.alpha)),
            ("loss.beta".into(), format!("{:?}", t.loss_weights.beta)),
            ("loss.feature_dim".into(), t.feature_dim.to_string()),
            ("loss.extractor_seed".into(), t.extractor_seed.to_string()),
            ("gp.sigma_f2".into(), format!("{:?}", g.sigma_f2)),
            ("gp.length_scale".into(), format!("{:?}", g.length_scale)),
            ("gp.step".into(), format!("{:?}", g.step)),
            ("gp.traj_len".into(), format!("{},{}", g.traj_len_range.0, g.traj_len_range.1)),
            ("gp.valid_size".into(), format!("{},{}", g.valid_size_range.0, g.valid_size_range.1)),
            ("gp.canvas".into(), g.canvas.to_string()),
            ("gp.seed".into(), g.seed.to_string()),
        ];
        if let Some(p) = &t.extractor_path {
            e.push(("loss.extractor_path".into(), p.display().to_string()));
        }
        e
    }

    /// Canonical text of the training settings, used for the checkpoint digest.
    pub fn train_text(t: &TrainConfig) -> String {
        let mut s = String::new();
        for (k, v) in Self::train_entries(t) {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }

    /// Canonical text of every setting; parses back to an equal config.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut entries = Self::net_entries(&self.net);
        entries.extend(Self::train_entries(&self.train));
        entries.push(("train.max_steps".into(), self.train.max_steps.to_string()));
        entries.push(("train.checkpoint_every".into(), self.train.checkpoint_every.to_string()));
        for (k, v) in entries {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let cfg = PipelineConfig::default();
        assert_eq!(PipelineConfig::from_text(&cfg.to_text()).unwrap(), cfg);
    }

    #[test]
    fn overrides_round_trip() {
        let text = "\
# toy run
net.num_modules = 2
net.base_channels = 16
net.scales = 1,3,5,7
net.pointwise_reduction = false
train.kernel_mode = fixed
train.weight_schedule = 0:0.001:0.0; 500:0.0001:0.0001
train.image_size = 64, 48
loss.extractor_path = phi.ddblr
gp.traj_len = 100,300   # shorter
";
        let cfg = PipelineConfig::from_text(text).unwrap();
        assert_eq!(cfg.net.scales, vec![1, 3, 5, 7]);
        assert!(!cfg.net.pointwise_reduction);
        assert_eq!(cfg.train.kernel_mode, KernelMode::Fixed);
        assert_eq!(cfg.train.weight_schedule.len(), 2);
        assert_eq!(cfg.train.weight_schedule[1].0, 500);
        assert_eq!(cfg.train.image_size, (64, 48));
        assert_eq!(cfg.train.gp.traj_len_range, (100, 300));
        assert_eq!(PipelineConfig::from_text(&cfg.to_text()).unwrap(), cfg);
    }

    #[test]
    fn bad_input() {
        assert!(matches!(PipelineConfig::from_text("net.bogus = 1"), Err(Error::Config(_))));
        assert!(PipelineConfig::from_text("net.num_modules").is_err());
        assert!(PipelineConfig::from_text("net.num_modules = x").is_err());
        assert!(PipelineConfig::from_text("gp.traj_len = 5").is_err());
        assert!(PipelineConfig::from_text("train.weight_schedule = 0:1").is_err());
        assert!(PipelineConfig::from_text("train.kernel_mode = sometimes").is_err());
    }

    #[test]
    fn run_length_not_in_train_text() {
        let mut a = TrainConfig::default();
        let b = a.clone();
        a.max_steps += 10;
        a.checkpoint_every = 3;
        assert_eq!(PipelineConfig::train_text(&a), PipelineConfig::train_text(&b));
        a.seed += 1;
        assert_ne!(PipelineConfig::train_text(&a), PipelineConfig::train_text(&b));
    }
}
