//! Residual multi-scale inception restoration network.
//!
//! ```text
//! x ─ conv3x3 ─ lrelu ─┬─ inception ─ (+) ─ … ─ inception ─ (+) ─ conv1x1 ─ y
//!                      └──────────────┘
//! ```
//!
//! Every inception module runs one branch per kernel scale. A branch is an
//! optional 1x1 reduction to half width with a leaky ReLU, then a `k × k`
//! convolution to half width with a leaky ReLU. Branch outputs are
//! concatenated on channels, merged back to full width by a 1x1 convolution,
//! and added to the module input. No layer carries a bias.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::imaging::{save_png, Image};
use crate::tensor::{Tape, Tensor, Var};

/// Topology of a [`DeepDeblurNet`].
#[derive(Clone, Debug, PartialEq)]
pub struct NetworkConfig {
    pub num_modules: usize,
    /// Stem output width, kept through every module.
    pub base_channels: usize,
    /// Square kernel size of each branch.
    pub scales: Vec<usize>,
    pub leaky_slope: f64,
    /// 1x1 halving reduction in front of each branch convolution.
    pub pointwise_reduction: bool,
    pub in_channels: usize,
    pub out_channels: usize,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            num_modules: 6,
            base_channels: 64,
            scales: vec![1, 3, 5, 7, 14],
            leaky_slope: 0.01,
            pointwise_reduction: true,
            in_channels: 3,
            out_channels: 3,
        }
    }
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.num_modules == 0 {
            return bad("net.num_modules must be at least 1".into());
        }
        if self.base_channels < 2 || self.base_channels % 2 != 0 {
            return bad(format!(
                "net.base_channels must be even and at least 2, got {}",
                self.base_channels
            ));
        }
        if self.scales.is_empty() || self.scales.contains(&0) {
            return bad(format!("net.scales must be non-empty with sizes >= 1, got {:?}", self.scales));
        }
        if !(self.leaky_slope > 0.0 && self.leaky_slope < 1.0) {
            return bad(format!("net.leaky_slope must lie in (0,1), got {}", self.leaky_slope));
        }
        if self.in_channels == 0 || self.out_channels == 0 {
            return bad("net.in_channels and net.out_channels must be positive".into());
        }
        Ok(())
    }

    pub fn branch_width(&self) -> usize {
        self.base_channels / 2
    }

    pub fn max_scale(&self) -> usize {
        self.scales.iter().copied().max().unwrap_or(1)
    }

    /// Parameters of one branch at kernel size `k`.
    pub fn branch_param_count(&self, k: usize) -> usize {
        let (b, half) = (self.base_channels, self.branch_width());
        if self.pointwise_reduction {
            half * b + half * half * k * k
        } else {
            half * b * k * k
        }
    }

    /// Closed-form parameter count.
    pub fn param_count(&self) -> usize {
        let b = self.base_channels;
        let stem = b * self.in_channels * 9;
        let branches: usize = self.scales.iter().map(|&k| self.branch_param_count(k)).sum();
        let merge = b * self.scales.len() * self.branch_width();
        let output = self.out_channels * b;
        stem + self.num_modules * (branches + merge) + output
    }
}

#[derive(Clone, Debug, PartialEq)]
struct BranchLayout {
    scale: usize,
    reduce: Option<usize>,
    conv: usize,
}

#[derive(Clone, Debug, PartialEq)]
struct ModuleLayout {
    branches: Vec<BranchLayout>,
    merge: usize,
}

/// Parameter specs in declaration order, plus the index layout.
fn layout(cfg: &NetworkConfig) -> (Vec<(String, Vec<usize>)>, usize, Vec<ModuleLayout>, usize) {
    let b = cfg.base_channels;
    let half = cfg.branch_width();
    let mut specs = vec![("stem".to_string(), vec![b, cfg.in_channels, 3, 3])];
    let mut modules = Vec::with_capacity(cfg.num_modules);
    for m in 0..cfg.num_modules {
        let mut branches = Vec::with_capacity(cfg.scales.len());
        for (i, &k) in cfg.scales.iter().enumerate() {
            let reduce = cfg.pointwise_reduction.then(|| {
                specs.push((format!("inception{m}.branch{i}.reduce"), vec![half, b, 1, 1]));
                specs.len() - 1
            });
            let conv_in = if cfg.pointwise_reduction { half } else { b };
            specs.push((format!("inception{m}.branch{i}.conv{k}x{k}"), vec![half, conv_in, k, k]));
            branches.push(BranchLayout {
                scale: k,
                reduce,
                conv: specs.len() - 1,
            });
        }
        specs.push((format!("inception{m}.merge"), vec![b, half * cfg.scales.len(), 1, 1]));
        modules.push(ModuleLayout {
            branches,
            merge: specs.len() - 1,
        });
    }
    specs.push(("output".to_string(), vec![cfg.out_channels, b, 1, 1]));
    let output = specs.len() - 1;
    (specs, 0, modules, output)
}

/// Tape handles for one inception module's weights.
#[derive(Clone, Debug)]
pub struct ModuleVars<'t> {
    /// `(reduction, convolution)` per branch.
    pub branches: Vec<(Option<Var<'t>>, Var<'t>)>,
    pub merge: Var<'t>,
}

/// Result of one inception module.
#[derive(Clone, Debug)]
pub struct ModuleOutput<'t> {
    pub output: Var<'t>,
    /// Activated branch outputs, one per scale, before concatenation.
    pub branches: Vec<Var<'t>>,
}

/// One residual inception module: per-scale branches, channel concatenation,
/// 1x1 merge, and the residual addition of `x`.
pub fn inception_module_forward<'t>(
    cfg: &NetworkConfig,
    module: &ModuleVars<'t>,
    x: Var<'t>,
) -> Result<ModuleOutput<'t>> {
    let shape = x.shape();
    if shape.len() != 4 || shape[1] != cfg.base_channels {
        return Err(Error::shape(
            "inception_module",
            format!("expected {} input channels, got shape {shape:?}", cfg.base_channels),
        ));
    }
    let slope = cfg.leaky_slope;
    let mut branches = Vec::with_capacity(module.branches.len());
    for &(reduce, conv) in &module.branches {
        let input = match reduce {
            Some(r) => x.conv2d(r)?.leaky_relu(slope),
            None => x,
        };
        branches.push(input.conv2d(conv)?.leaky_relu(slope));
    }
    let merged = Var::concat_channels(&branches)?.conv2d(module.merge)?;
    Ok(ModuleOutput {
        output: x.add(merged)?,
        branches,
    })
}

/// Branch activations of every module from a traced forward pass.
pub type ModuleTrace<'t> = Vec<Vec<Var<'t>>>;

/// Parameters and topology of the restoration network.
#[derive(Clone, Debug, PartialEq)]
pub struct DeepDeblurNet {
    config: NetworkConfig,
    names: Vec<String>,
    params: Vec<Tensor>,
    stem: usize,
    modules: Vec<ModuleLayout>,
    output: usize,
}

impl DeepDeblurNet {
    /// Fan-in uniform initialization: each weight drawn from
    /// `U(-1/√fan_in, 1/√fan_in)`, deterministic per seed.
    pub fn new(config: NetworkConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let (specs, stem, modules, output) = layout(&config);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut names = Vec::with_capacity(specs.len());
        let mut params = Vec::with_capacity(specs.len());
        for (name, shape) in specs {
            let fan_in = (shape[1] * shape[2] * shape[3]) as f64;
            let bound = 1.0 / fan_in.sqrt();
            params.push(Tensor::from_fn(&shape, |_| rng.random_range(-bound..bound)));
            names.push(name);
        }
        let net = Self {
            config,
            names,
            params,
            stem,
            modules,
            output,
        };
        debug_assert_eq!(net.param_count(), net.config.param_count());
        Ok(net)
    }

    /// Network with the given parameters, checked against the shapes the
    /// config implies.
    pub fn from_params(config: NetworkConfig, named: Vec<(String, Tensor)>) -> Result<Self> {
        config.validate()?;
        let (specs, stem, modules, output) = layout(&config);
        if specs.len() != named.len() {
            return Err(Error::Checkpoint(format!(
                "config expects {} parameter tensors, found {}",
                specs.len(),
                named.len()
            )));
        }
        let mut names = Vec::with_capacity(specs.len());
        let mut params = Vec::with_capacity(specs.len());
        for ((name, shape), (got_name, t)) in specs.into_iter().zip(named) {
            if name != got_name || shape != t.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter {got_name} {:?} does not match expected {name} {shape:?}",
                    t.shape()
                )));
            }
            names.push(name);
            params.push(t);
        }
        Ok(Self {
            config,
            names,
            params,
            stem,
            modules,
            output,
        })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn param_names(&self) -> &[String] {
        &self.names
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn named_params(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.params)
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    /// Parameter indices belonging to inception modules (reductions, branch
    /// convolutions and merges).
    pub fn module_param_indices(&self) -> Vec<usize> {
        self.modules
            .iter()
            .flat_map(|m| {
                m.branches
                    .iter()
                    .flat_map(|b| b.reduce.into_iter().chain([b.conv]))
                    .chain([m.merge])
            })
            .collect()
    }

    /// Register every parameter as a trainable leaf on `tape`.
    pub fn bind<'t>(&self, tape: &'t Tape) -> Vec<Var<'t>> {
        self.params.iter().map(|p| tape.leaf(p.clone())).collect()
    }

    pub fn module_vars<'t>(&self, index: usize, params: &[Var<'t>]) -> Result<ModuleVars<'t>> {
        let m = self.modules.get(index).ok_or_else(|| {
            Error::Config(format!("module index {index} out of {}", self.modules.len()))
        })?;
        Ok(ModuleVars {
            branches: m
                .branches
                .iter()
                .map(|b| (b.reduce.map(|r| params[r]), params[b.conv]))
                .collect(),
            merge: params[m.merge],
        })
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        let min = self.config.max_scale();
        match shape {
            &[_, c, h, w] if c == self.config.in_channels && h >= min && w >= min => Ok(()),
            &[_, c, h, w] if c == self.config.in_channels => Err(Error::shape(
                "forward",
                format!("spatial size {h}x{w} is below the largest kernel scale {min}"),
            )),
            _ => Err(Error::shape(
                "forward",
                format!("expected [N,{},H,W], got {shape:?}", self.config.in_channels),
            )),
        }
    }

    /// Forward pass that also returns every module's branch activations,
    /// stopping after module `upto` when given.
    pub fn forward_traced<'t>(
        &self,
        params: &[Var<'t>],
        x: Var<'t>,
        upto: Option<usize>,
    ) -> Result<(Var<'t>, ModuleTrace<'t>)> {
        self.check_input(&x.shape())?;
        let slope = self.config.leaky_slope;
        let mut h = x.conv2d(params[self.stem])?.leaky_relu(slope);
        let last = upto.map_or(self.modules.len(), |u| (u + 1).min(self.modules.len()));
        let mut trace = Vec::with_capacity(last);
        for m in 0..last {
            let vars = self.module_vars(m, params)?;
            let out = inception_module_forward(&self.config, &vars, h)?;
            trace.push(out.branches);
            h = out.output;
        }
        if upto.is_some() {
            return Ok((h, trace));
        }
        Ok((h.conv2d(params[self.output])?, trace))
    }

    /// Differentiable forward pass over bound parameters.
    pub fn forward_with<'t>(&self, params: &[Var<'t>], x: Var<'t>) -> Result<Var<'t>> {
        Ok(self.forward_traced(params, x, None)?.0)
    }

    /// Inference on an `[N, C, H, W]` batch.
    pub fn forward(&self, batch: &Tensor) -> Result<Tensor> {
        let tape = Tape::inference();
        let params: Vec<Var<'_>> = self.params.iter().map(|p| tape.constant(p.clone())).collect();
        let y = self.forward_with(&params, tape.constant(batch.clone()))?;
        Ok((*y.value()).clone())
    }
}

/// Anything that maps a blurry image to a restored one.
pub trait Restorer: Sync {
    fn restore(&self, img: &Image) -> Result<Image>;
}

impl Restorer for DeepDeblurNet {
    fn restore(&self, img: &Image) -> Result<Image> {
        let input = if self.config.in_channels == 3 { img.to_rgb() } else { img.clone() };
        Image::from_tensor(&self.forward(&input.to_tensor())?, 0)
    }
}

/// Restorer that returns its input unchanged.
#[derive(Clone, Copy, Debug, Default)]
pub struct IdentityRestorer;

impl Restorer for IdentityRestorer {
    fn restore(&self, img: &Image) -> Result<Image> {
        Ok(img.clone())
    }
}

fn tile_maps(maps: &Tensor) -> Result<Image> {
    let [_, c, h, w] = maps.dims4()?;
    let cols = (c as f64).sqrt().ceil() as usize;
    let rows = c.div_ceil(cols);
    let (th, tw) = (rows * (h + 1) - 1, cols * (w + 1) - 1);
    let mut data = vec![0.0; th * tw];
    for (i, map) in maps.data().chunks_exact(h * w).take(c).enumerate() {
        let lo = map.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = map.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let (r0, c0) = ((i / cols) * (h + 1), (i % cols) * (w + 1));
        for y in 0..h {
            for x in 0..w {
                let v = map[y * w + x];
                let norm = if hi - lo > 1e-12 { (v - lo) / (hi - lo) } else { 0.5 };
                data[(r0 + y) * tw + c0 + x] = norm;
            }
        }
    }
    Image::new(th, tw, 1, data)
}

/// Per-scale branch responses of module `module_index` for `img`, each map
/// min-max normalized and tiled into one grayscale image. Constant maps are
/// drawn mid-gray.
pub fn feature_map_grids(net: &DeepDeblurNet, img: &Image, module_index: usize) -> Result<Vec<Image>> {
    if module_index >= net.config.num_modules {
        return Err(Error::Config(format!(
            "module index {module_index} out of range for {} modules",
            net.config.num_modules
        )));
    }
    let input = if net.config.in_channels == 3 { img.to_rgb() } else { img.clone() };
    let tape = Tape::inference();
    let params: Vec<Var<'_>> = net.params.iter().map(|p| tape.constant(p.clone())).collect();
    let (_, trace) = net.forward_traced(&params, tape.constant(input.to_tensor()), Some(module_index))?;
    trace[module_index].iter().map(|b| tile_maps(&b.value())).collect()
}

/// Write one PNG per scale for module `module_index` into `out_dir`.
pub fn dump_feature_maps(
    net: &DeepDeblurNet,
    img: &Image,
    module_index: usize,
    out_dir: impl AsRef<Path>,
) -> Result<Vec<PathBuf>> {
    let out_dir = out_dir.as_ref();
    let grids = feature_map_grids(net, img, module_index)?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    grids
        .iter()
        .zip(&net.config.scales)
        .enumerate()
        .map(|(i, (grid, k))| {
            let path = out_dir.join(format!("module{module_index}_branch{i}_{k}x{k}.png"));
            save_png(grid, &path)?;
            Ok(path)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> NetworkConfig {
        NetworkConfig {
            num_modules: 2,
            base_channels: 4,
            scales: vec![1, 3],
            ..NetworkConfig::default()
        }
    }

    #[test]
    fn default_param_count_closed_form() {
        let cfg = NetworkConfig::default();
        // 64·3·9 + 6·(Σ_k (32·64 + 32²·k²) + 64·160) + 3·64, Σk² = 280
        let expected = 1728 + 6 * (5 * 2048 + 1024 * 280 + 10240) + 192;
        assert_eq!(cfg.param_count(), expected);
        assert_eq!(DeepDeblurNet::new(cfg, 0).unwrap().param_count(), expected);
    }

    #[test]
    fn init_is_deterministic() {
        let a = DeepDeblurNet::new(tiny(), 7).unwrap();
        let b = DeepDeblurNet::new(tiny(), 7).unwrap();
        let c = DeepDeblurNet::new(tiny(), 8).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.params(), c.params());
    }

    #[test]
    fn invalid_configs_are_rejected() {
        for cfg in [
            NetworkConfig { num_modules: 0, ..tiny() },
            NetworkConfig { base_channels: 5, ..tiny() },
            NetworkConfig { scales: vec![], ..tiny() },
            NetworkConfig { scales: vec![0, 3], ..tiny() },
            NetworkConfig { leaky_slope: 1.5, ..tiny() },
        ] {
            assert!(DeepDeblurNet::new(cfg, 0).is_err());
        }
    }

    #[test]
    fn branch_widths() {
        let cfg = NetworkConfig::default();
        let net = DeepDeblurNet::new(cfg.clone(), 0).unwrap();
        for (name, t) in net.named_params() {
            if name.starts_with("inception0.branch") && name.contains(".conv") {
                assert_eq!(t.shape()[..2], [32, 32], "{name}");
            }
        }
        let off = NetworkConfig {
            pointwise_reduction: false,
            ..cfg
        };
        let net = DeepDeblurNet::new(off, 0).unwrap();
        for (name, t) in net.named_params() {
            if name.starts_with("inception0.branch") {
                assert!(name.contains(".conv"));
                assert_eq!(t.shape()[..2], [32, 64], "{name}");
            }
        }
    }

    #[test]
    fn forward_rejects_small_input() {
        let net = DeepDeblurNet::new(NetworkConfig::default(), 0).unwrap();
        let r = net.forward(&Tensor::zeros(&[1, 3, 13, 20]));
        assert!(matches!(r, Err(Error::Shape { .. })));
        assert!(net.forward(&Tensor::zeros(&[1, 2, 20, 20])).is_err());
    }

    #[test]
    fn module_rejects_channel_mismatch() {
        let net = DeepDeblurNet::new(tiny(), 0).unwrap();
        let tape = Tape::inference();
        let params = net.bind(&tape);
        let vars = net.module_vars(0, &params).unwrap();
        let x = tape.constant(Tensor::zeros(&[1, 3, 8, 8]));
        assert!(inception_module_forward(net.config(), &vars, x).is_err());
        assert!(net.module_vars(2, &params).is_err());
    }

    #[test]
    fn concatenated_width_is_scales_times_branch() {
        let net = DeepDeblurNet::new(tiny(), 0).unwrap();
        let merge = &net.params()[net.modules[0].merge];
        assert_eq!(merge.shape()[1], 2 * 2);
    }

    #[test]
    fn from_params_audits_shapes() {
        let net = DeepDeblurNet::new(tiny(), 1).unwrap();
        let named: Vec<(String, Tensor)> = net.named_params().map(|(n, t)| (n.to_string(), t.clone())).collect();
        assert_eq!(DeepDeblurNet::from_params(tiny(), named.clone()).unwrap(), net);
        let other = NetworkConfig { base_channels: 6, ..tiny() };
        assert!(DeepDeblurNet::from_params(other, named).is_err());
    }
}
