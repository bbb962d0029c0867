//! Motion-blur kernel synthesis.
//!
//! Both coordinates of a camera trajectory are drawn from a zero-mean
//! Gaussian process with Matérn-5/2 covariance, sampled on an evenly spaced
//! time grid. The trajectory is rescaled into a `valid_size` box, splatted
//! bilinearly onto a fixed canvas, shifted so its mass center sits on the
//! canvas center, and normalized to unit sum.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

const BASE_JITTER: f64 = 1e-10;
const MAX_JITTER: f64 = 1e-6;
const MAX_FIT_ATTEMPTS: usize = 64;

/// Gaussian-process trajectory and rasterization settings.
#[derive(Clone, Debug, PartialEq)]
pub struct GpConfig {
    /// Signal variance σ_f².
    pub sigma_f2: f64,
    /// Length scale `l`, in trajectory time units.
    pub length_scale: f64,
    /// Spacing between consecutive time samples.
    pub step: f64,
    /// Inclusive range for the number of trajectory samples.
    pub traj_len_range: (usize, usize),
    /// Inclusive range for the kernel's active extent in pixels.
    pub valid_size_range: (usize, usize),
    /// Side length of the (square, odd) output canvas.
    pub canvas: usize,
    pub seed: u64,
}

impl Default for GpConfig {
    fn default() -> Self {
        Self {
            sigma_f2: 1.0,
            length_scale: 0.3,
            step: 0.01,
            traj_len_range: (200, 1200),
            valid_size_range: (8, 20),
            canvas: 27,
            seed: 0,
        }
    }
}

impl GpConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if !(self.sigma_f2 > 0.0 && self.sigma_f2.is_finite()) {
            return bad(format!("gp.sigma_f2 must be positive, got {}", self.sigma_f2));
        }
        if !(self.length_scale > 0.0 && self.length_scale.is_finite()) {
            return bad(format!("gp.length_scale must be positive, got {}", self.length_scale));
        }
        if !(self.step > 0.0 && self.step.is_finite()) {
            return bad(format!("gp.step must be positive, got {}", self.step));
        }
        let (lo, hi) = self.traj_len_range;
        if lo == 0 || lo > hi {
            return bad(format!("gp.traj_len_range [{lo},{hi}] must be non-empty and start at 1 or more"));
        }
        if self.canvas % 2 == 0 || self.canvas < 3 {
            return bad(format!("gp.canvas must be odd and at least 3, got {}", self.canvas));
        }
        let (vlo, vhi) = self.valid_size_range;
        if vlo < 3 || vlo > vhi || vhi > self.canvas {
            return bad(format!(
                "gp.valid_size_range [{vlo},{vhi}] must lie within [3,{}]",
                self.canvas
            ));
        }
        Ok(())
    }

    /// RNG seeded from `self.seed`.
    pub fn rng(&self) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.seed)
    }
}

/// Matérn-5/2 covariance between two trajectory times.
pub fn matern_cov(t1: f64, t2: f64, cfg: &GpConfig) -> f64 {
    let r = 5f64.sqrt() * (t1 - t2).abs() / cfg.length_scale;
    cfg.sigma_f2 * (1.0 + r + r * r / 3.0) * (-r).exp()
}

/// Row-major `n × n` covariance of the time grid `{0, step, …, (n-1)·step}`.
pub fn covariance_matrix(n: usize, cfg: &GpConfig) -> Vec<f64> {
    let mut k = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..=i {
            let v = matern_cov(i as f64 * cfg.step, j as f64 * cfg.step, cfg);
            k[i * n + j] = v;
            k[j * n + i] = v;
        }
    }
    k
}

/// Lower Cholesky factor of `a + jitter·I`, or `None` if a pivot is not
/// strictly positive.
fn cholesky(a: &[f64], n: usize, jitter: f64) -> Option<Vec<f64>> {
    let mut l = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..=i {
            let dot: f64 = l[i * n..i * n + j]
                .iter()
                .zip(&l[j * n..j * n + j])
                .map(|(x, y)| x * y)
                .sum();
            if i == j {
                let d = a[i * n + i] + jitter - dot;
                if !(d > 0.0) {
                    return None;
                }
                l[i * n + i] = d.sqrt();
            } else {
                l[i * n + j] = (a[i * n + j] - dot) / l[j * n + j];
            }
        }
    }
    Some(l)
}

/// Cholesky factorization with diagonal jitter starting at 1e-10 and growing
/// tenfold up to 1e-6. Returns the factor and the jitter that succeeded.
pub fn cholesky_with_jitter(a: &[f64], n: usize) -> Result<(Vec<f64>, f64)> {
    let mut jitter = BASE_JITTER;
    while jitter <= MAX_JITTER * (1.0 + 1e-9) {
        if let Some(l) = cholesky(a, n, jitter) {
            return Ok((l, jitter));
        }
        jitter *= 10.0;
    }
    Err(Error::Synthesis(format!(
        "{n}x{n} covariance is not positive definite even with jitter {MAX_JITTER:e}"
    )))
}

/// 2D camera trajectory, one `(x, y)` per time sample.
pub type Trajectory = Vec<(f64, f64)>;

fn draw_with_factor<R: Rng + ?Sized>(l: &[f64], stride: usize, n: usize, rng: &mut R) -> Trajectory {
    let zx: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
    let zy: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
    (0..n)
        .map(|i| {
            let row = &l[i * stride..i * stride + i + 1];
            let x = row.iter().zip(&zx).map(|(a, b)| a * b).sum();
            let y = row.iter().zip(&zy).map(|(a, b)| a * b).sum();
            (x, y)
        })
        .collect()
}

/// Draw a trajectory: the sample count `N` uniformly from
/// `cfg.traj_len_range`, then two independent GP draws through the Cholesky
/// factor of the `N × N` Matérn covariance.
///
/// This factors a fresh matrix per call; [`TrajectorySampler`] amortizes the
/// factorization over many draws.
pub fn sample_trajectory<R: Rng + ?Sized>(cfg: &GpConfig, rng: &mut R) -> Result<Trajectory> {
    cfg.validate()?;
    let n = rng.random_range(cfg.traj_len_range.0..=cfg.traj_len_range.1);
    let cov = covariance_matrix(n, cfg);
    let (l, _) = cholesky_with_jitter(&cov, n)?;
    Ok(draw_with_factor(&l, n, n, rng))
}

/// Trajectory sampler holding one Cholesky factor for the longest allowed
/// trajectory.
///
/// The factor of a leading principal block is the leading block of the
/// factor, so every shorter draw reuses the same matrix. Draws consume the
/// RNG exactly like [`sample_trajectory`].
#[derive(Clone, Debug)]
pub struct TrajectorySampler {
    cfg: GpConfig,
    factor: Vec<f64>,
    n_max: usize,
    jitter: f64,
}

impl TrajectorySampler {
    pub fn new(cfg: &GpConfig) -> Result<Self> {
        cfg.validate()?;
        let n_max = cfg.traj_len_range.1;
        let cov = covariance_matrix(n_max, cfg);
        let (factor, jitter) = cholesky_with_jitter(&cov, n_max)?;
        Ok(Self {
            cfg: cfg.clone(),
            factor,
            n_max,
            jitter,
        })
    }

    pub fn config(&self) -> &GpConfig {
        &self.cfg
    }

    /// Diagonal jitter the factorization needed.
    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Trajectory {
        let n = rng.random_range(self.cfg.traj_len_range.0..=self.cfg.traj_len_range.1);
        draw_with_factor(&self.factor, self.n_max, n, rng)
    }
}

/// Square weight grid before normalization.
#[derive(Clone, Debug, PartialEq)]
pub struct Grid {
    pub canvas: usize,
    /// Active extent the weights were rasterized into.
    pub valid_size: usize,
    /// Row-major `canvas × canvas` weights.
    pub weights: Vec<f64>,
}

impl Grid {
    pub fn zeros(canvas: usize, valid_size: usize) -> Self {
        Self {
            canvas,
            valid_size,
            weights: vec![0.0; canvas * canvas],
        }
    }

    pub fn mass(&self) -> f64 {
        self.weights.iter().sum()
    }

    /// Mass center as `(row, col)`.
    pub fn center_of_mass(&self) -> (f64, f64) {
        center_of_mass(&self.weights, self.canvas)
    }

    fn splat(&mut self, row: f64, col: f64, mass: f64) {
        let (r0, c0) = (row.floor(), col.floor());
        let (fr, fc) = (row - r0, col - c0);
        let taps = [
            (r0, c0, (1.0 - fr) * (1.0 - fc)),
            (r0, c0 + 1.0, (1.0 - fr) * fc),
            (r0 + 1.0, c0, fr * (1.0 - fc)),
            (r0 + 1.0, c0 + 1.0, fr * fc),
        ];
        let max = (self.canvas - 1) as f64;
        for (r, c, w) in taps {
            if w == 0.0 {
                continue;
            }
            debug_assert!((0.0..=max).contains(&r) && (0.0..=max).contains(&c));
            let (r, c) = (r.clamp(0.0, max) as usize, c.clamp(0.0, max) as usize);
            self.weights[r * self.canvas + c] += mass * w;
        }
    }
}

fn center_of_mass(weights: &[f64], canvas: usize) -> (f64, f64) {
    let mut total = 0.0;
    let (mut sr, mut sc) = (0.0, 0.0);
    for (i, &w) in weights.iter().enumerate() {
        total += w;
        sr += w * (i / canvas) as f64;
        sc += w * (i % canvas) as f64;
    }
    (sr / total, sc / total)
}

/// Rescale a trajectory so its bounding box fits a `valid_size × valid_size`
/// box near the canvas center, then splat each point bilinearly with unit
/// mass. Single-point or zero-extent trajectories deposit a centered delta.
pub fn rasterize(traj: &[(f64, f64)], valid_size: usize, canvas: usize) -> Grid {
    assert!(!traj.is_empty(), "rasterize needs at least one trajectory point");
    assert!(valid_size >= 1 && valid_size <= canvas);
    let mut grid = Grid::zeros(canvas, valid_size);
    let center = (canvas / 2) as f64;

    let (mut min_x, mut max_x) = (f64::INFINITY, f64::NEG_INFINITY);
    let (mut min_y, mut max_y) = (f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in traj {
        min_x = min_x.min(x);
        max_x = max_x.max(x);
        min_y = min_y.min(y);
        max_y = max_y.max(y);
    }
    let extent = (max_x - min_x).max(max_y - min_y);
    if traj.len() == 1 || !(extent > 1e-12) {
        grid.weights[canvas / 2 * canvas + canvas / 2] = traj.len() as f64;
        return grid;
    }

    let scale = (valid_size - 1) as f64 / extent;
    let span_x = (max_x - min_x) * scale;
    let span_y = (max_y - min_y) * scale;
    // Integer box origins keep the long axis on exactly `valid_size` pixels.
    let origin_x = (center - span_x / 2.0).floor();
    let origin_y = (center - span_y / 2.0).floor();
    for &(x, y) in traj {
        let col = (origin_x + (x - min_x) * scale).clamp(origin_x, origin_x + span_x);
        let row = (origin_y + (y - min_y) * scale).clamp(origin_y, origin_y + span_y);
        grid.splat(row, col, 1.0);
    }
    grid
}

/// Normalized motion kernel on a square canvas.
///
/// Weights are nonnegative, sum to one, and their mass center lies within
/// half a pixel of the canvas center on each axis.
#[derive(Clone, Debug, PartialEq)]
pub struct MotionKernel {
    canvas: usize,
    valid_size: usize,
    weights: Vec<f64>,
}

impl MotionKernel {
    pub fn canvas(&self) -> usize {
        self.canvas
    }

    pub fn valid_size(&self) -> usize {
        self.valid_size
    }

    /// Row-major weights.
    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn weight(&self, row: usize, col: usize) -> f64 {
        self.weights[row * self.canvas + col]
    }

    pub fn sum(&self) -> f64 {
        self.weights.iter().sum()
    }

    /// `(row, col)` mass center.
    pub fn center_of_mass(&self) -> (f64, f64) {
        center_of_mass(&self.weights, self.canvas)
    }

    /// `(row_min, row_max, col_min, col_max)` of the nonzero weights.
    pub fn support_bbox(&self) -> (usize, usize, usize, usize) {
        let mut b = (usize::MAX, 0, usize::MAX, 0);
        for (i, _) in self.weights.iter().enumerate().filter(|(_, &w)| w > 0.0) {
            let (r, c) = (i / self.canvas, i % self.canvas);
            b = (b.0.min(r), b.1.max(r), b.2.min(c), b.3.max(c));
        }
        b
    }

    /// Single unit weight at the canvas center.
    pub fn delta(canvas: usize) -> Self {
        let mut weights = vec![0.0; canvas * canvas];
        weights[canvas / 2 * canvas + canvas / 2] = 1.0;
        Self {
            canvas,
            valid_size: 1,
            weights,
        }
    }

    /// Build from raw weights, checking every invariant.
    pub fn from_weights(canvas: usize, valid_size: usize, weights: Vec<f64>) -> Result<Self> {
        if weights.len() != canvas * canvas {
            return Err(Error::Normalization(format!(
                "{} weights for a {canvas}x{canvas} canvas",
                weights.len()
            )));
        }
        if let Some(w) = weights.iter().find(|w| !(**w >= 0.0 && w.is_finite())) {
            return Err(Error::Normalization(format!("invalid weight {w}")));
        }
        let sum: f64 = weights.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Normalization(format!("weights sum to {sum}, not 1")));
        }
        Ok(Self {
            canvas,
            valid_size,
            weights,
        })
    }
}

/// Translate a grid by the integer-rounded offset between its mass center and
/// the canvas center, then divide by its total mass.
///
/// Fails on an empty grid, or when the translation would push mass off the
/// canvas.
pub fn center_and_normalize(grid: &Grid) -> Result<MotionKernel> {
    let n = grid.canvas;
    let mass = grid.mass();
    if !(mass > 0.0 && mass.is_finite()) {
        return Err(Error::Normalization(format!("grid mass is {mass}")));
    }
    if grid.weights.iter().any(|&w| w < 0.0) {
        return Err(Error::Normalization("grid has negative weights".into()));
    }
    let (cr, cc) = grid.center_of_mass();
    let mid = (n / 2) as f64;
    let dr = (mid - cr).round() as isize;
    let dc = (mid - cc).round() as isize;
    let mut weights = vec![0.0; n * n];
    for (i, &w) in grid.weights.iter().enumerate() {
        if w == 0.0 {
            continue;
        }
        let r = (i / n) as isize + dr;
        let c = (i % n) as isize + dc;
        if r < 0 || c < 0 || r >= n as isize || c >= n as isize {
            return Err(Error::Normalization(format!(
                "support does not fit the {n}x{n} canvas once centered"
            )));
        }
        weights[r as usize * n + c as usize] = w / mass;
    }
    Ok(MotionKernel {
        canvas: n,
        valid_size: grid.valid_size,
        weights,
    })
}

/// GP kernel synthesizer that factors the covariance once.
#[derive(Clone, Debug)]
pub struct KernelSynth {
    sampler: TrajectorySampler,
}

impl KernelSynth {
    pub fn new(cfg: &GpConfig) -> Result<Self> {
        Ok(Self {
            sampler: TrajectorySampler::new(cfg)?,
        })
    }

    pub fn config(&self) -> &GpConfig {
        self.sampler.config()
    }

    /// Draw one kernel. Trajectories whose centered support would leave the
    /// canvas are redrawn.
    pub fn synth<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<MotionKernel> {
        let cfg = self.sampler.config();
        synth_with(cfg, rng, |r| Ok(self.sampler.sample(r)))
    }
}

fn synth_with<R: Rng + ?Sized>(
    cfg: &GpConfig,
    rng: &mut R,
    mut draw: impl FnMut(&mut R) -> Result<Trajectory>,
) -> Result<MotionKernel> {
    let mut last_err = None;
    for _ in 0..MAX_FIT_ATTEMPTS {
        let traj = draw(rng)?;
        let valid = rng.random_range(cfg.valid_size_range.0..=cfg.valid_size_range.1);
        let grid = rasterize(&traj, valid, cfg.canvas);
        match center_and_normalize(&grid) {
            Ok(k) => return Ok(k),
            Err(e) => last_err = Some(e),
        }
    }
    Err(last_err.expect("at least one attempt"))
}

/// Sample a trajectory, rasterize it at a valid size drawn uniformly from
/// `cfg.valid_size_range`, then center and normalize.
pub fn synth_kernel<R: Rng + ?Sized>(cfg: &GpConfig, rng: &mut R) -> Result<MotionKernel> {
    cfg.validate()?;
    synth_with(cfg, rng, |r| sample_trajectory(cfg, r))
}

/// Straight-line motion of `length_px` pixels at `angle_deg` (counted from the
/// column axis toward increasing rows) through the canvas center.
pub fn linear_kernel(length_px: f64, angle_deg: f64, canvas: usize) -> Result<MotionKernel> {
    if !(length_px > 0.0 && length_px <= canvas as f64) {
        return Err(Error::Config(format!(
            "linear kernel length must lie in (0, {canvas}], got {length_px}"
        )));
    }
    if canvas % 2 == 0 {
        return Err(Error::Config(format!("canvas must be odd, got {canvas}")));
    }
    let theta = angle_deg.to_radians();
    let snap = |v: f64| if v.abs() < 1e-12 { 0.0 } else { v };
    let (dc, dr) = (snap(theta.cos()), snap(theta.sin()));
    let center = (canvas / 2) as f64;
    let half = (length_px - 1.0).max(0.0) / 2.0;
    let mut grid = Grid::zeros(canvas, length_px.ceil() as usize);
    if half < 1e-9 {
        grid.splat(center, center, 1.0);
    } else {
        let n = (2.0 * half / 0.02).ceil() as usize + 1;
        for i in 0..n {
            let s = -half + 2.0 * half * i as f64 / (n - 1) as f64;
            grid.splat(center + s * dr, center + s * dc, 1.0);
        }
    }
    center_and_normalize(&grid)
}

/// Render a kernel as MKERN text.
pub fn format_kernel(k: &MotionKernel) -> String {
    let mut s = format!("MKERN 1 {} {}\n", k.canvas, k.valid_size);
    for row in k.weights.chunks(k.canvas) {
        let line: Vec<String> = row.iter().map(|v| format!("{v:?}")).collect();
        let _ = writeln!(s, "{}", line.join(" "));
    }
    s
}

/// Parse MKERN text. A payload summing to within 1e-3 of one is renormalized
/// with a warning on stderr; anything further off is rejected.
pub fn parse_kernel(text: &str) -> Result<MotionKernel> {
    let what = "MKERN kernel";
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| Error::parse(what, "empty file"))?;
    let fields: Vec<&str> = header.split_whitespace().collect();
    let (canvas, valid_size) = match fields[..] {
        ["MKERN", "1", c, v] => {
            let c: usize = c.parse().map_err(|_| Error::parse(what, format!("bad canvas {c:?}")))?;
            let v: usize = v
                .parse()
                .map_err(|_| Error::parse(what, format!("bad valid size {v:?}")))?;
            (c, v)
        }
        ["MKERN", version, ..] if fields.len() == 4 => {
            return Err(Error::parse(what, format!("unsupported version {version}")));
        }
        _ => return Err(Error::parse(what, format!("malformed header {header:?}"))),
    };
    if canvas == 0 {
        return Err(Error::parse(what, "canvas must be positive"));
    }
    let mut weights = Vec::with_capacity(canvas * canvas);
    for r in 0..canvas {
        let line = lines
            .next()
            .ok_or_else(|| Error::parse(what, format!("truncated: expected {canvas} rows, got {r}")))?;
        let row: Vec<f64> = line
            .split_whitespace()
            .map(|t| t.parse::<f64>().map_err(|_| Error::parse(what, format!("bad value {t:?} in row {r}"))))
            .collect::<Result<_>>()?;
        if row.len() != canvas {
            return Err(Error::parse(what, format!("row {r} has {} values, expected {canvas}", row.len())));
        }
        weights.extend(row);
    }
    if lines.any(|l| !l.trim().is_empty()) {
        return Err(Error::parse(what, "trailing data after the last row"));
    }
    if weights.iter().any(|w| !(*w >= 0.0 && w.is_finite())) {
        return Err(Error::Normalization("kernel has negative or non-finite weights".into()));
    }
    let sum: f64 = weights.iter().sum();
    if (sum - 1.0).abs() > 1e-3 {
        return Err(Error::Normalization(format!("kernel weights sum to {sum}")));
    }
    if (sum - 1.0).abs() > 1e-12 {
        eprintln!("warning: kernel weights sum to {sum}; renormalizing");
        for w in &mut weights {
            *w /= sum;
        }
    }
    Ok(MotionKernel {
        canvas,
        valid_size,
        weights,
    })
}

pub fn save_kernel(k: &MotionKernel, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, format_kernel(k)).map_err(|e| Error::io(path, e))
}

pub fn load_kernel(path: impl AsRef<Path>) -> Result<MotionKernel> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_kernel(&text).map_err(|e| match e {
        Error::Parse { detail, .. } => Error::parse(path.display().to_string(), detail),
        other => other,
    })
}
