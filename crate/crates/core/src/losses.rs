//! Training objective: `L = ℓ_L2 + α·ℓ_TV + β·ℓ_face`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{Tensor, Var};

/// Weights of the regularizers; the L2 term always has weight one.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    /// Total-variation weight.
    pub alpha: f64,
    /// Facial-feature weight.
    pub beta: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha: 1e-4,
            beta: 1e-4,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if self.alpha >= 0.0 && self.beta >= 0.0 && self.alpha.is_finite() && self.beta.is_finite() {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "loss weights must be finite and >= 0, got alpha={} beta={}",
                self.alpha, self.beta
            )))
        }
    }
}

fn check_same(op: &'static str, a: Var<'_>, b: Var<'_>) -> Result<usize> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa != sb || sa.len() != 4 {
        return Err(Error::shape(op, format!("pred {sa:?} vs target {sb:?}")));
    }
    Ok(sa[0])
}

/// Mean squared error over `C·H·W`, averaged over the batch.
pub fn l2_loss<'t>(pred: Var<'t>, target: Var<'t>) -> Result<Var<'t>> {
    check_same("l2_loss", pred, target)?;
    Ok(pred.sub(target)?.square().mean_all())
}

/// Sum of squared horizontal and vertical forward differences over every
/// channel, averaged over the batch. Not normalized by image size.
pub fn tv_loss(pred: Var<'_>) -> Result<Var<'_>> {
    let shape = pred.shape();
    let &[n, _, h, w] = &shape[..] else {
        return Err(Error::shape("tv_loss", format!("expected [N,C,H,W], got {shape:?}")));
    };
    if h < 2 || w < 2 {
        return Err(Error::shape("tv_loss", format!("spatial size {h}x{w} has no neighbors on some axis")));
    }
    let horizontal = pred.diff_last()?.square().sum_all();
    let vertical = pred.diff_rows()?.square().sum_all();
    Ok(horizontal.add(vertical)?.scale(1.0 / n as f64))
}

/// Differentiable image-to-feature map `Φ`: `[N, C, H, W] -> [N, D]`.
pub trait FeatureExtractor {
    fn features<'t>(&self, images: Var<'t>) -> Result<Var<'t>>;
    fn feature_dim(&self) -> usize;
}

/// `‖Φ(pred) − Φ(target)‖²`, averaged over the batch.
pub fn facial_loss<'t>(pred: Var<'t>, target: Var<'t>, phi: &dyn FeatureExtractor) -> Result<Var<'t>> {
    let n = check_same("facial_loss", pred, target)?;
    let fp = phi.features(pred)?;
    let ft = phi.features(target)?;
    Ok(fp.sub(ft)?.square().sum_all().scale(1.0 / n as f64))
}

/// The three loss terms and their weighted sum.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms<'t> {
    pub l2: Var<'t>,
    pub tv: Var<'t>,
    pub face: Var<'t>,
    pub total: Var<'t>,
}

impl LossTerms<'_> {
    /// `(l2, tv, face, total)` as numbers.
    pub fn values(&self) -> Result<(f64, f64, f64, f64)> {
        Ok((self.l2.item()?, self.tv.item()?, self.face.item()?, self.total.item()?))
    }
}

/// `ℓ_L2 + α·ℓ_TV(pred) + β·ℓ_face`.
pub fn total_loss<'t>(
    pred: Var<'t>,
    target: Var<'t>,
    weights: LossWeights,
    phi: &dyn FeatureExtractor,
) -> Result<LossTerms<'t>> {
    weights.validate()?;
    let l2 = l2_loss(pred, target)?;
    let tv = tv_loss(pred)?;
    let face = facial_loss(pred, target, phi)?;
    let total = l2.add(tv.scale(weights.alpha))?.add(face.scale(weights.beta))?;
    Ok(LossTerms { l2, tv, face, total })
}

/// Fixed, never-trained convolutional encoder standing in for a face
/// recognition model: two stride-2 3x3 convolutions with leaky ReLU, global
/// average pooling, then a linear map to `feature_dim`.
#[derive(Clone, Debug, PartialEq)]
pub struct ProxyExtractor {
    conv1: Tensor,
    conv2: Tensor,
    projection: Tensor,
}

impl ProxyExtractor {
    pub const MIN_SIZE: usize = 8;
    const SLOPE: f64 = 0.01;
    const WIDTHS: (usize, usize) = (8, 16);
    pub const PARAM_NAMES: [&'static str; 3] = ["conv1", "conv2", "projection"];

    pub fn new(seed: u64, feature_dim: usize, in_channels: usize) -> Result<Self> {
        if feature_dim == 0 || in_channels == 0 {
            return Err(Error::Config("extractor dimensions must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (c1, c2) = Self::WIDTHS;
        let mut init = |shape: &[usize], fan_in: usize| {
            let b = (3.0 / fan_in as f64).sqrt();
            Tensor::from_fn(shape, |_| rng.random_range(-b..b))
        };
        let conv1 = init(&[c1, in_channels, 3, 3], in_channels * 9);
        let conv2 = init(&[c2, c1, 3, 3], c1 * 9);
        let projection = init(&[c2, feature_dim], c2);
        Ok(Self {
            conv1,
            conv2,
            projection,
        })
    }

    /// Rebuild from weights, e.g. loaded from an extractor checkpoint.
    pub fn from_weights(conv1: Tensor, conv2: Tensor, projection: Tensor) -> Result<Self> {
        let [c1, _, 3, 3] = conv1.dims4()? else {
            return Err(Error::shape("proxy_extractor", "conv1 must be 3x3"));
        };
        let [c2, c1b, 3, 3] = conv2.dims4()? else {
            return Err(Error::shape("proxy_extractor", "conv2 must be 3x3"));
        };
        if c1 != c1b || projection.shape().len() != 2 || projection.shape()[0] != c2 {
            return Err(Error::shape(
                "proxy_extractor",
                format!(
                    "inconsistent widths {:?} {:?} {:?}",
                    conv1.shape(),
                    conv2.shape(),
                    projection.shape()
                ),
            ));
        }
        Ok(Self {
            conv1,
            conv2,
            projection,
        })
    }

    pub fn in_channels(&self) -> usize {
        self.conv1.shape()[1]
    }

    pub fn weights(&self) -> [&Tensor; 3] {
        [&self.conv1, &self.conv2, &self.projection]
    }
}

/// Proxy extractor for RGB input.
pub fn proxy_extractor(seed: u64, feature_dim: usize) -> Result<ProxyExtractor> {
    ProxyExtractor::new(seed, feature_dim, 3)
}

impl FeatureExtractor for ProxyExtractor {
    fn features<'t>(&self, images: Var<'t>) -> Result<Var<'t>> {
        let shape = images.shape();
        match shape[..] {
            [_, c, h, w] if c == self.in_channels() && h >= Self::MIN_SIZE && w >= Self::MIN_SIZE => {}
            _ => {
                return Err(Error::shape(
                    "proxy_extractor",
                    format!(
                        "expected [N,{},H>={m},W>={m}], got {shape:?}",
                        self.in_channels(),
                        m = Self::MIN_SIZE
                    ),
                ))
            }
        }
        let tape = images.tape();
        let c1 = tape.constant(self.conv1.clone());
        let c2 = tape.constant(self.conv2.clone());
        let proj = tape.constant(self.projection.clone());
        images
            .conv2d(c1)?
            .downsample2()?
            .leaky_relu(Self::SLOPE)
            .conv2d(c2)?
            .downsample2()?
            .leaky_relu(Self::SLOPE)
            .mean_spatial()?
            .matmul(proj)
    }

    fn feature_dim(&self) -> usize {
        self.projection.shape()[1]
    }
}
