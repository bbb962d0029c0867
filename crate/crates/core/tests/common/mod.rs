//! Independent reference implementations and fixtures shared by the
//! integration tests. Nothing here calls the code under test except to build
//! inputs.

#![allow(dead_code)]

use std::cell::RefCell;
use std::collections::HashSet;
use std::path::Path;

use deepdeblur::config::PipelineConfig;
use deepdeblur::imaging::{save_png, synthetic_face, Image};
use deepdeblur::kernels::MotionKernel;
use deepdeblur::losses::{proxy_extractor, total_loss, FeatureExtractor, LossWeights};
use deepdeblur::model::{DeepDeblurNet, NetworkConfig};
use deepdeblur::tensor::{finite_diff_check, finite_diff_check_coords, Tensor, Var};
use deepdeblur::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-5;
pub const FD_TOL: f64 = 1e-4;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

/// Same-size cross-correlation with replicated borders, written as the plain
/// seven-deep loop nest. Kernels of size k reach `k/2` pixels before the
/// output position and `k - 1 - k/2` after it.
pub fn conv2d_loops(input: &Tensor, weight: &Tensor) -> Tensor {
    let s = input.shape();
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    let ws = weight.shape();
    let (o, kh, kw) = (ws[0], ws[2], ws[3]);
    assert_eq!(ws[1], c);
    let (bh, bw) = ((kh / 2) as isize, (kw / 2) as isize);
    let x = input.data();
    let k = weight.data();
    let mut out = vec![0.0; n * o * h * w];
    for b in 0..n {
        for oc in 0..o {
            for y in 0..h {
                for xx in 0..w {
                    let mut acc = 0.0;
                    for ic in 0..c {
                        for i in 0..kh {
                            for j in 0..kw {
                                let sy = (y as isize + i as isize - bh).clamp(0, h as isize - 1) as usize;
                                let sx = (xx as isize + j as isize - bw).clamp(0, w as isize - 1) as usize;
                                acc += k[((oc * c + ic) * kh + i) * kw + j] * x[((b * c + ic) * h + sy) * w + sx];
                            }
                        }
                    }
                    out[((b * o + oc) * h + y) * w + xx] = acc;
                }
            }
        }
    }
    Tensor::new(vec![n, o, h, w], out).unwrap()
}

/// Edge-replicated true convolution of one plane: the kernel is flipped
/// relative to [`conv2d_loops`] and centered on `canvas / 2`.
pub fn blur_loops(plane: &[f64], h: usize, w: usize, k: &MotionKernel) -> Vec<f64> {
    let n = k.canvas();
    let c = (n / 2) as isize;
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for i in 0..n {
                for j in 0..n {
                    let sy = (y as isize - i as isize + c).clamp(0, h as isize - 1) as usize;
                    let sx = (x as isize - j as isize + c).clamp(0, w as isize - 1) as usize;
                    acc += k.weight(i, j) * plane[sy * w + sx];
                }
            }
            out[y * w + x] = acc;
        }
    }
    out
}

/// Random nonnegative kernel with unit sum on an odd canvas.
pub fn random_kernel(canvas: usize, rng: &mut ChaCha8Rng) -> MotionKernel {
    let mut wts: Vec<f64> = (0..canvas * canvas)
        .map(|_| if rng.random::<f64>() < 0.3 { rng.random::<f64>() } else { 0.0 })
        .collect();
    wts[canvas * canvas / 2] += 0.1;
    let s: f64 = wts.iter().sum();
    wts.iter_mut().for_each(|v| *v /= s);
    MotionKernel::from_weights(canvas, canvas, wts).unwrap()
}

pub fn random_image(h: usize, w: usize, c: usize, rng: &mut ChaCha8Rng) -> Image {
    Image::new(h, w, c, (0..h * w * c).map(|_| rng.random()).collect()).unwrap()
}

pub fn l2_loops(a: &Tensor, b: &Tensor) -> f64 {
    let s: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum();
    s / a.len() as f64
}

pub fn tv_loops(x: &Tensor) -> f64 {
    let s = x.shape();
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    let d = x.data();
    let at = |b: usize, ch: usize, y: usize, xx: usize| d[((b * c + ch) * h + y) * w + xx];
    let mut total = 0.0;
    for b in 0..n {
        for ch in 0..c {
            for y in 0..h {
                for xx in 0..w {
                    if xx + 1 < w {
                        total += (at(b, ch, y, xx + 1) - at(b, ch, y, xx)).powi(2);
                    }
                    if y + 1 < h {
                        total += (at(b, ch, y + 1, xx) - at(b, ch, y, xx)).powi(2);
                    }
                }
            }
        }
    }
    total / n as f64
}

/// Reduce any tensor-valued op to a scalar by a fixed random projection.
fn project<'t>(y: Var<'t>, r: &Tensor) -> Result<Var<'t>> {
    Ok(y.mul(y.tape().constant(r.clone()))?.sum_all())
}

pub type GradCase = fn(u64) -> Result<f64>;

fn unary(seed: u64, shape: &[usize], op: fn(Var<'_>) -> Result<Var<'_>>) -> Result<f64> {
    let mut r = rng(seed);
    let x = uniform(shape, -1.0, 1.0, &mut r);
    let out_shape = {
        let tape = deepdeblur::Tape::inference();
        op(tape.constant(x.clone()))?.shape()
    };
    let proj = uniform(&out_shape, -1.0, 1.0, &mut r);
    finite_diff_check(|v| project(op(v)?, &proj), &x, FD_STEP)
}

fn binary(seed: u64, shape_a: &[usize], shape_b: &[usize], op: for<'t> fn(Var<'t>, Var<'t>) -> Result<Var<'t>>) -> Result<f64> {
    let mut r = rng(seed);
    let a = uniform(shape_a, -1.0, 1.0, &mut r);
    let b = uniform(shape_b, -1.0, 1.0, &mut r);
    let out_shape = {
        let tape = deepdeblur::Tape::inference();
        op(tape.constant(a.clone()), tape.constant(b.clone()))?.shape()
    };
    let proj = uniform(&out_shape, -1.0, 1.0, &mut r);
    let ea = finite_diff_check(|v| project(op(v, v.tape().constant(b.clone()))?, &proj), &a, FD_STEP)?;
    let eb = finite_diff_check(|v| project(op(v.tape().constant(a.clone()), v)?, &proj), &b, FD_STEP)?;
    Ok(ea.max(eb))
}

fn conv_case(seed: u64, k: usize) -> Result<f64> {
    binary(seed, &[2, 3, 6, 7], &[4, 3, k, k], |x, w| x.conv2d(w))
}

fn leaky_case(seed: u64) -> Result<f64> {
    // The derivative is undefined at 0, so keep samples a step-width away.
    let mut r = rng(seed);
    let x = Tensor::from_fn(&[3, 17], |_| {
        let m = r.random_range(0.01..1.0);
        if r.random::<bool>() {
            m
        } else {
            -m
        }
    });
    let proj = uniform(&[3, 17], -1.0, 1.0, &mut r);
    finite_diff_check(|v| project(v.leaky_relu(0.01), &proj), &x, FD_STEP)
}

fn concat_case(seed: u64) -> Result<f64> {
    let mut r = rng(seed);
    let a = uniform(&[2, 2, 3, 4], -1.0, 1.0, &mut r);
    let b = uniform(&[2, 3, 3, 4], -1.0, 1.0, &mut r);
    let proj = uniform(&[2, 5, 3, 4], -1.0, 1.0, &mut r);
    let ea = finite_diff_check(
        |v| project(Var::concat_channels(&[v, v.tape().constant(b.clone())])?, &proj),
        &a,
        FD_STEP,
    )?;
    let eb = finite_diff_check(
        |v| project(Var::concat_channels(&[v.tape().constant(a.clone()), v])?, &proj),
        &b,
        FD_STEP,
    )?;
    Ok(ea.max(eb))
}

fn loss_inputs(seed: u64) -> (Tensor, Tensor) {
    let mut r = rng(seed);
    (uniform(&[2, 3, 9, 10], 0.0, 1.0, &mut r), uniform(&[2, 3, 9, 10], 0.0, 1.0, &mut r))
}

fn l2_case(seed: u64) -> Result<f64> {
    let (p, t) = loss_inputs(seed);
    finite_diff_check(|v| deepdeblur::losses::l2_loss(v, v.tape().constant(t.clone())), &p, FD_STEP)
}

fn tv_case(seed: u64) -> Result<f64> {
    let (p, _) = loss_inputs(seed);
    finite_diff_check(deepdeblur::losses::tv_loss, &p, FD_STEP)
}

fn face_case(seed: u64) -> Result<f64> {
    let (p, t) = loss_inputs(seed);
    let phi = proxy_extractor(seed, 6)?;
    finite_diff_check(
        |v| deepdeblur::losses::facial_loss(v, v.tape().constant(t.clone()), &phi),
        &p,
        FD_STEP,
    )
}

fn total_case(seed: u64) -> Result<f64> {
    let (p, t) = loss_inputs(seed);
    let phi = proxy_extractor(seed, 6)?;
    let w = LossWeights { alpha: 0.3, beta: 0.7 };
    finite_diff_check(|v| Ok(total_loss(v, v.tape().constant(t.clone()), w, &phi)?.total), &p, FD_STEP)
}

pub fn tiny_net_config(seed: u64) -> NetworkConfig {
    // Alternate topologies across seeds so both reduction modes and an even
    // kernel size are exercised.
    NetworkConfig {
        num_modules: 2,
        base_channels: 4,
        scales: if seed % 2 == 0 { vec![1, 3, 4] } else { vec![2, 3] },
        pointwise_reduction: seed % 3 != 1,
        ..NetworkConfig::default()
    }
}

/// End-to-end: total loss of the network output, differentiated with respect
/// to the input pixels and to a sample of every parameter tensor.
///
/// Leaky ReLUs make the loss piecewise smooth. A draw where any difference
/// stencil crosses an activation kink is redrawn, detected by the tape's
/// activation pattern differing from the base point's.
pub fn network_case(seed: u64) -> Result<f64> {
    let net = DeepDeblurNet::new(tiny_net_config(seed), seed)?;
    let phi = proxy_extractor(seed, 4)?;
    for attempt in 0..16u64 {
        let mut r = rng(seed ^ 0xABCD ^ (attempt << 32));
        let x = uniform(&[1, 3, 8, 9], 0.0, 1.0, &mut r);
        let target = uniform(&[1, 3, 8, 9], 0.0, 1.0, &mut r);
        if let Some(e) = network_check(&net, &phi, &x, &target, &mut r)? {
            return Ok(e);
        }
    }
    Err(deepdeblur::Error::GradCheck(format!("seed {seed}: no kink-free draw in 16 attempts")))
}

fn network_check(
    net: &DeepDeblurNet,
    phi: &dyn FeatureExtractor,
    x: &Tensor,
    target: &Tensor,
    r: &mut ChaCha8Rng,
) -> Result<Option<f64>> {
    let w = LossWeights { alpha: 0.05, beta: 0.05 };
    let patterns = RefCell::new(HashSet::new());

    let mut worst = finite_diff_check(
        |v| {
            let t = v.tape();
            let params: Vec<_> = net.params().iter().map(|p| t.constant(p.clone())).collect();
            let y = net.forward_with(&params, v)?;
            let total = total_loss(y, t.constant(target.clone()), w, phi)?.total;
            patterns.borrow_mut().insert(t.activation_pattern());
            Ok(total)
        },
        x,
        FD_STEP,
    )?;
    for idx in 0..net.params().len() {
        let p = net.params()[idx].clone();
        let coords: Vec<usize> = (0..p.len()).filter(|_| r.random::<f64>() < 0.25).take(12).collect();
        let coords = if coords.is_empty() { vec![0] } else { coords };
        let e = finite_diff_check_coords(
            |v| {
                let t = v.tape();
                let mut params: Vec<_> = net.params().iter().map(|q| t.constant(q.clone())).collect();
                params[idx] = v;
                let y = net.forward_with(&params, t.constant(x.clone()))?;
                let total = total_loss(y, t.constant(target.clone()), w, phi)?.total;
                patterns.borrow_mut().insert(t.activation_pattern());
                Ok(total)
            },
            &p,
            FD_STEP,
            &coords,
        )?;
        worst = worst.max(e);
    }
    Ok((patterns.into_inner().len() == 1).then_some(worst))
}

/// Every differentiable operation, plus the end-to-end network.
pub fn gradient_cases() -> Vec<(&'static str, GradCase)> {
    vec![
        ("add", |s| binary(s, &[2, 3, 4], &[2, 3, 4], |a, b| a.add(b))),
        ("sub", |s| binary(s, &[5, 4], &[5, 4], |a, b| a.sub(b))),
        ("mul", |s| binary(s, &[3, 7], &[3, 7], |a, b| a.mul(b))),
        ("scale", |s| unary(s, &[4, 5], |v| Ok(v.scale(-2.5)))),
        ("square", |s| unary(s, &[4, 5], |v| Ok(v.square()))),
        ("leaky_relu", leaky_case),
        ("sum_all", |s| unary(s, &[3, 4, 2], |v| Ok(v.sum_all()))),
        ("mean_all", |s| unary(s, &[3, 4, 2], |v| Ok(v.mean_all()))),
        ("concat_channels", concat_case),
        ("conv2d 1x1", |s| conv_case(s, 1)),
        ("conv2d 3x3", |s| conv_case(s, 3)),
        ("conv2d 4x4", |s| conv_case(s, 4)),
        ("conv2d 5x5", |s| conv_case(s, 5)),
        ("downsample2", |s| unary(s, &[2, 3, 7, 6], |v| v.downsample2())),
        ("mean_spatial", |s| unary(s, &[2, 3, 4, 5], |v| v.mean_spatial())),
        ("matmul", |s| binary(s, &[3, 5], &[5, 4], |a, b| a.matmul(b))),
        ("diff_last", |s| unary(s, &[2, 2, 4, 5], |v| v.diff_last())),
        ("diff_rows", |s| unary(s, &[2, 2, 4, 5], |v| v.diff_rows())),
        ("l2_loss", l2_case),
        ("tv_loss", tv_case),
        ("facial_loss", face_case),
        ("total_loss", total_case),
        ("network end-to-end", network_case),
    ]
}

/// Write the toy training image; returns the data directory.
pub fn write_toy_dataset(root: &Path, cfg: &PipelineConfig) -> std::path::PathBuf {
    let data = root.join("data");
    std::fs::create_dir_all(&data).unwrap();
    let (h, w) = cfg.train.image_size;
    save_png(&synthetic_face(h, w, 0).unwrap(), data.join("face.png")).unwrap();
    data
}

pub fn features_differ(phi: &dyn FeatureExtractor, a: &Tensor, b: &Tensor) -> f64 {
    let tape = deepdeblur::Tape::inference();
    let fa = phi.features(tape.constant(a.clone())).unwrap().value();
    let fb = phi.features(tape.constant(b.clone())).unwrap().value();
    fa.max_abs_diff(&fb)
}
