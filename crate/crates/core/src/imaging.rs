//! Images, the blur degradation model and PSNR.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::error::{Error, Result};
use crate::kernels::MotionKernel;
use crate::tensor::Tensor;

/// `H × W × C` raster with values in `[0, 1]`, interleaved row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
}

impl Image {
    /// Build an image, clamping every value into `[0, 1]`.
    pub fn new(height: usize, width: usize, channels: usize, mut data: Vec<f64>) -> Result<Self> {
        if channels != 1 && channels != 3 {
            return Err(Error::shape("image", format!("channels must be 1 or 3, got {channels}")));
        }
        if height == 0 || width == 0 || data.len() != height * width * channels {
            return Err(Error::shape(
                "image",
                format!("{height}x{width}x{channels} does not match {} values", data.len()),
            ));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::shape("image", "non-finite pixel value"));
        }
        for v in &mut data {
            *v = v.clamp(0.0, 1.0);
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f64) -> Result<Self> {
        Self::new(height, width, channels, vec![value; height * width * channels])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    /// Three-channel copy; grayscale is replicated.
    pub fn to_rgb(&self) -> Image {
        if self.channels == 3 {
            return self.clone();
        }
        let data = self.data.iter().flat_map(|&v| [v, v, v]).collect();
        Image {
            channels: 3,
            data,
            ..*self
        }
    }

    /// Single-channel copy; RGB is averaged.
    pub fn to_gray(&self) -> Image {
        if self.channels == 1 {
            return self.clone();
        }
        let data = self.data.chunks_exact(3).map(|p| (p[0] + p[1] + p[2]) / 3.0).collect();
        Image {
            channels: 1,
            data,
            ..*self
        }
    }

    /// One channel as a row-major plane.
    pub fn plane(&self, c: usize) -> Vec<f64> {
        self.data.iter().skip(c).step_by(self.channels).copied().collect()
    }

    fn from_planes(height: usize, width: usize, planes: &[Vec<f64>]) -> Result<Self> {
        let channels = planes.len();
        let mut data = vec![0.0; height * width * channels];
        for (c, p) in planes.iter().enumerate() {
            for (i, &v) in p.iter().enumerate() {
                data[i * channels + c] = v;
            }
        }
        Self::new(height, width, channels, data)
    }

    /// `[1, C, H, W]` tensor.
    pub fn to_tensor(&self) -> Tensor {
        images_to_batch(std::slice::from_ref(self)).expect("single image batch")
    }

    /// Batch item `index` of an `[N, C, H, W]` tensor, clamped into `[0, 1]`.
    pub fn from_tensor(t: &Tensor, index: usize) -> Result<Self> {
        let [n, c, h, w] = t.dims4()?;
        if index >= n {
            return Err(Error::shape("from_tensor", format!("batch index {index} out of {n}")));
        }
        let item = &t.data()[index * c * h * w..(index + 1) * c * h * w];
        let planes: Vec<Vec<f64>> = item.chunks_exact(h * w).map(<[f64]>::to_vec).collect();
        Self::from_planes(h, w, &planes)
    }
}

/// Stack equally sized images into an `[N, C, H, W]` tensor.
pub fn images_to_batch(images: &[Image]) -> Result<Tensor> {
    let first = images
        .first()
        .ok_or_else(|| Error::shape("images_to_batch", "empty batch"))?;
    let (h, w, c) = (first.height, first.width, first.channels);
    let mut data = Vec::with_capacity(images.len() * c * h * w);
    for img in images {
        if (img.height, img.width, img.channels) != (h, w, c) {
            return Err(Error::shape(
                "images_to_batch",
                format!(
                    "{}x{}x{} differs from {h}x{w}x{c}",
                    img.height, img.width, img.channels
                ),
            ));
        }
        for ch in 0..c {
            data.extend(img.plane(ch));
        }
    }
    Tensor::new(vec![images.len(), c, h, w], data)
}

/// Read an 8-bit grayscale or RGB PNG, mapping each sample to `v / 255`.
pub fn load_png(path: impl AsRef<Path>) -> Result<Image> {
    let path = path.as_ref();
    let unsupported = |detail: String| Error::Image {
        path: path.to_path_buf(),
        detail,
    };
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut decoder = png::Decoder::new(BufReader::new(file));
    decoder.set_transformations(png::Transformations::IDENTITY);
    let mut reader = decoder
        .read_info()
        .map_err(|e| unsupported(format!("decode failed: {e}")))?;
    let info = reader.info();
    if info.bit_depth != png::BitDepth::Eight {
        return Err(unsupported(format!("bit depth {:?} (only 8-bit is supported)", info.bit_depth)));
    }
    let channels = match info.color_type {
        png::ColorType::Grayscale => 1,
        png::ColorType::Rgb => 3,
        other => return Err(unsupported(format!("color type {other:?} (only grayscale or RGB)"))),
    };
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| unsupported("image too large".into()))?;
    let mut buf = vec![0u8; size];
    let frame = reader
        .next_frame(&mut buf)
        .map_err(|e| unsupported(format!("decode failed: {e}")))?;
    let (w, h) = (frame.width as usize, frame.height as usize);
    let mut data = Vec::with_capacity(w * h * channels);
    for row in buf.chunks(frame.line_size).take(h) {
        data.extend(row[..w * channels].iter().map(|&b| f64::from(b) / 255.0));
    }
    Image::new(h, w, channels, data)
}

/// Write an 8-bit PNG, storing `round(v · 255)`.
pub fn save_png(img: &Image, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut encoder = png::Encoder::new(BufWriter::new(file), img.width as u32, img.height as u32);
    encoder.set_color(if img.channels == 3 {
        png::ColorType::Rgb
    } else {
        png::ColorType::Grayscale
    });
    encoder.set_depth(png::BitDepth::Eight);
    let bytes: Vec<u8> = img
        .data
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    let failed = |e: png::EncodingError| Error::Image {
        path: path.to_path_buf(),
        detail: format!("encode failed: {e}"),
    };
    let mut writer = encoder.write_header().map_err(failed)?;
    writer.write_image_data(&bytes).map_err(failed)?;
    writer.finish().map_err(failed)
}

/// Direct loop-nest convolution of one plane with edge replication:
/// `out[y,x] = Σ k[i,j] · img[y - i + c, x - j + c]`, `c = canvas / 2`.
pub fn convolve_direct(plane: &[f64], height: usize, width: usize, k: &MotionKernel) -> Vec<f64> {
    let n = k.canvas();
    let c = (n / 2) as isize;
    let (hi, wi) = (height as isize - 1, width as isize - 1);
    let mut out = vec![0.0; height * width];
    for y in 0..height as isize {
        for x in 0..width as isize {
            let mut acc = 0.0;
            for i in 0..n as isize {
                let sy = (y - i + c).clamp(0, hi) as usize;
                for j in 0..n as isize {
                    let w = k.weights()[(i * n as isize + j) as usize];
                    if w != 0.0 {
                        let sx = (x - j + c).clamp(0, wi) as usize;
                        acc += w * plane[sy * width + sx];
                    }
                }
            }
            out[(y as usize) * width + x as usize] = acc;
        }
    }
    out
}

fn fft2(data: &mut [Complex<f64>], rows: usize, cols: usize, planner: &mut FftPlanner<f64>, inverse: bool) {
    let (row_fft, col_fft) = if inverse {
        (planner.plan_fft_inverse(cols), planner.plan_fft_inverse(rows))
    } else {
        (planner.plan_fft_forward(cols), planner.plan_fft_forward(rows))
    };
    for row in data.chunks_exact_mut(cols) {
        row_fft.process(row);
    }
    let mut column = vec![Complex::new(0.0, 0.0); rows];
    for c in 0..cols {
        for r in 0..rows {
            column[r] = data[r * cols + c];
        }
        col_fft.process(&mut column);
        for r in 0..rows {
            data[r * cols + c] = column[r];
        }
    }
}

/// FFT convolution of one plane, matching [`convolve_direct`].
///
/// The plane is edge-padded by the kernel radius; every output sample then
/// reads only non-wrapping indices of the circular product, so the padded
/// size is also the transform size.
pub fn convolve_fft(plane: &[f64], height: usize, width: usize, k: &MotionKernel) -> Vec<f64> {
    let n = k.canvas();
    let c = n / 2;
    let (rows, cols) = (height + 2 * c, width + 2 * c);
    let mut padded = vec![Complex::new(0.0, 0.0); rows * cols];
    for r in 0..rows {
        let sy = r.saturating_sub(c).min(height - 1);
        for q in 0..cols {
            let sx = q.saturating_sub(c).min(width - 1);
            padded[r * cols + q].re = plane[sy * width + sx];
        }
    }
    let mut kernel = vec![Complex::new(0.0, 0.0); rows * cols];
    for i in 0..n.min(rows) {
        for j in 0..n.min(cols) {
            kernel[i * cols + j].re = k.weight(i, j);
        }
    }
    let mut planner = FftPlanner::new();
    fft2(&mut padded, rows, cols, &mut planner, false);
    fft2(&mut kernel, rows, cols, &mut planner, false);
    for (a, b) in padded.iter_mut().zip(&kernel) {
        *a *= b;
    }
    fft2(&mut padded, rows, cols, &mut planner, true);
    let norm = 1.0 / (rows * cols) as f64;
    let mut out = Vec::with_capacity(height * width);
    for y in 0..height {
        for x in 0..width {
            out.push(padded[(y + 2 * c) * cols + x + 2 * c].re * norm);
        }
    }
    out
}

/// Kernels with at most this many nonzero taps are applied directly.
const SPARSE_TAPS: usize = 64;

/// Convolution as in [`convolve_direct`], through whichever path is cheaper.
/// Sparse kernels go through a tap list, which keeps the delta kernel exact.
pub fn convolve(plane: &[f64], height: usize, width: usize, k: &MotionKernel) -> Vec<f64> {
    let n = k.canvas();
    let taps: Vec<(isize, isize, f64)> = k
        .weights()
        .iter()
        .enumerate()
        .filter(|(_, &w)| w != 0.0)
        .map(|(idx, &w)| ((idx / n) as isize, (idx % n) as isize, w))
        .collect();
    if taps.len() > SPARSE_TAPS {
        return convolve_fft(plane, height, width, k);
    }
    let c = (n / 2) as isize;
    let (hi, wi) = (height as isize - 1, width as isize - 1);
    let mut out = vec![0.0; height * width];
    for y in 0..height as isize {
        for x in 0..width as isize {
            let mut acc = 0.0;
            for &(i, j, w) in &taps {
                let sy = (y - i + c).clamp(0, hi) as usize;
                let sx = (x - j + c).clamp(0, wi) as usize;
                acc += w * plane[sy * width + sx];
            }
            out[y as usize * width + x as usize] = acc;
        }
    }
    out
}

fn check_kernel_fits(img: &Image, k: &MotionKernel) -> Result<()> {
    if k.canvas() > img.height || k.canvas() > img.width {
        return Err(Error::Degradation(format!(
            "{0}x{0} kernel is larger than the {1}x{2} image",
            k.canvas(),
            img.height,
            img.width
        )));
    }
    Ok(())
}

/// Noise-free, unclamped `x * k`, one row-major plane per channel.
pub fn blur_planes(img: &Image, k: &MotionKernel) -> Result<Vec<Vec<f64>>> {
    check_kernel_fits(img, k)?;
    Ok((0..img.channels)
        .map(|c| convolve(&img.plane(c), img.height, img.width, k))
        .collect())
}

/// `y = x * k + n`: per-channel convolution with edge replication, i.i.d.
/// Gaussian noise of standard deviation `noise_sigma`, then clamping.
pub fn blur<R: Rng + ?Sized>(img: &Image, k: &MotionKernel, noise_sigma: f64, rng: &mut R) -> Result<Image> {
    if !(noise_sigma >= 0.0 && noise_sigma.is_finite()) {
        return Err(Error::Degradation(format!("noise sigma must be >= 0, got {noise_sigma}")));
    }
    let mut planes = blur_planes(img, k)?;
    if noise_sigma > 0.0 {
        let normal = Normal::new(0.0, noise_sigma).expect("validated sigma");
        for p in &mut planes {
            for v in p.iter_mut() {
                *v += normal.sample(rng);
            }
        }
    }
    Image::from_planes(img.height, img.width, &planes)
}

/// Peak signal-to-noise ratio for unit peak: `10 log10(1 / MSE)`.
/// Identical images give `f64::INFINITY`.
pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    if (a.height, a.width, a.channels) != (b.height, b.width, b.channels) {
        return Err(Error::shape(
            "psnr",
            format!(
                "{}x{}x{} vs {}x{}x{}",
                a.height, a.width, a.channels, b.height, b.width, b.channels
            ),
        ));
    }
    let mse = a
        .data
        .iter()
        .zip(&b.data)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / a.data.len() as f64;
    Ok(if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (1.0 / mse).log10()
    })
}

/// Tile kernels into one grayscale sheet, each scaled by its own maximum,
/// separated by one-pixel gaps.
pub fn kernel_contact_sheet(kernels: &[MotionKernel]) -> Result<Image> {
    let n = kernels
        .first()
        .ok_or_else(|| Error::shape("contact sheet", "no kernels"))?
        .canvas();
    if kernels.iter().any(|k| k.canvas() != n) {
        return Err(Error::shape("contact sheet", "kernels have different canvas sizes"));
    }
    let cols = (kernels.len() as f64).sqrt().ceil() as usize;
    let rows = kernels.len().div_ceil(cols);
    let (h, w) = (rows * (n + 1) + 1, cols * (n + 1) + 1);
    let mut data = vec![0.0; h * w];
    for (idx, k) in kernels.iter().enumerate() {
        let peak = k.weights().iter().copied().fold(0.0, f64::max);
        let (r0, c0) = (1 + (idx / cols) * (n + 1), 1 + (idx % cols) * (n + 1));
        for i in 0..n {
            for j in 0..n {
                data[(r0 + i) * w + c0 + j] = if peak > 0.0 { k.weight(i, j) / peak } else { 0.0 };
            }
        }
    }
    Image::new(h, w, 1, data)
}

/// Procedural stand-in for an aligned face crop: background gradient, hair,
/// a shaded head ellipse, eyes, brows, nose and mouth, with skin texture.
/// `seed` varies proportions, tones and texture.
pub fn synthetic_face(height: usize, width: usize, seed: u64) -> Result<Image> {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut jit = |s: f64| (rng.random::<f64>() - 0.5) * 2.0 * s;
    let (h, w) = (height as f64, width as f64);
    let skin = [0.82 + jit(0.1), 0.62 + jit(0.1), 0.5 + jit(0.08)];
    let hair = [0.2 + jit(0.1), 0.13 + jit(0.08), 0.08 + jit(0.05)];
    let bg = [0.35 + jit(0.2), 0.45 + jit(0.2), 0.55 + jit(0.2)];
    let (cy, cx) = (0.52 * h + jit(0.02 * h), 0.5 * w + jit(0.02 * w));
    let (ry, rx) = (0.36 * h * (1.0 + jit(0.05)), 0.33 * w * (1.0 + jit(0.05)));
    let eye_y = cy - 0.12 * h + jit(0.01 * h);
    let eye_dx = 0.13 * w * (1.0 + jit(0.08));
    let mouth_y = cy + 0.2 * h + jit(0.01 * h);
    let mouth_w = 0.11 * w * (1.0 + jit(0.1));
    let phase = [jit(3.0), jit(3.0)];

    let ell = |y: f64, x: f64, cy: f64, cx: f64, ry: f64, rx: f64| ((y - cy) / ry).powi(2) + ((x - cx) / rx).powi(2);
    let mut data = Vec::with_capacity(height * width * 3);
    for yi in 0..height {
        for xi in 0..width {
            let (y, x) = (yi as f64 + 0.5, xi as f64 + 0.5);
            let shade = 0.85 + 0.3 * (y / h);
            let mut px = [bg[0] * shade, bg[1] * shade, bg[2] * shade];
            let head = ell(y, x, cy, cx, ry, rx);
            if ell(y, x, cy - 0.08 * h, cx, ry * 1.08, rx * 1.12) < 1.0 && y < cy - 0.05 * h {
                px = hair;
            }
            if head < 1.0 && !(y < cy - 0.22 * h && head > 0.45) {
                let light = 1.0 - 0.25 * head - 0.1 * ((x - cx) / rx);
                let tex = 0.03 * ((x * 0.9 + phase[0]).sin() * (y * 1.1 + phase[1]).cos());
                px = [skin[0] * light + tex, skin[1] * light + tex, skin[2] * light + tex];
                for side in [-1.0, 1.0] {
                    let ex = cx + side * eye_dx;
                    let e = ell(y, x, eye_y, ex, 0.035 * h, 0.07 * w);
                    if e < 1.0 {
                        px = [0.95, 0.95, 0.92];
                        if ell(y, x, eye_y, ex, 0.03 * h, 0.03 * w) < 1.0 {
                            px = [0.15, 0.1, 0.08];
                        }
                    }
                    let brow = ell(y, x, eye_y - 0.07 * h, ex, 0.012 * h, 0.08 * w);
                    if brow < 1.0 {
                        px = hair;
                    }
                }
                let nose_t = (y - (eye_y + 0.04 * h)) / (0.16 * h);
                if (0.0..1.0).contains(&nose_t) && (x - (cx + 0.02 * w * nose_t)).abs() < 0.012 * w + 0.02 * w * nose_t {
                    px = px.map(|v| v * 0.82);
                }
                if ell(y, x, mouth_y, cx, 0.028 * h, mouth_w) < 1.0 {
                    px = [0.7, 0.25, 0.25];
                    if (y - mouth_y).abs() < 0.006 * h + 0.5 {
                        px = [0.35, 0.08, 0.1];
                    }
                }
            }
            data.extend(px);
        }
    }
    Image::new(height, width, 3, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::{linear_kernel, MotionKernel};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_image(h: usize, w: usize, c: usize, seed: u64) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Image::new(h, w, c, (0..h * w * c).map(|_| rng.random::<f64>()).collect()).unwrap()
    }

    #[test]
    fn new_clamps_and_validates() {
        let img = Image::new(1, 2, 1, vec![-0.5, 1.5]).unwrap();
        assert_eq!(img.data(), &[0.0, 1.0]);
        assert!(Image::new(1, 1, 2, vec![0.0, 0.0]).is_err());
        assert!(Image::new(2, 2, 1, vec![0.0; 3]).is_err());
        assert!(Image::new(1, 1, 1, vec![f64::NAN]).is_err());
    }

    #[test]
    fn tensor_round_trip() {
        let img = random_image(4, 5, 3, 1);
        let t = img.to_tensor();
        assert_eq!(t.shape(), &[1, 3, 4, 5]);
        assert_eq!(Image::from_tensor(&t, 0).unwrap(), img);
    }

    #[test]
    fn delta_blur_is_identity() {
        let img = random_image(30, 28, 3, 2);
        let out = blur(&img, &MotionKernel::delta(27), 0.0, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert!(out.data().iter().zip(img.data()).all(|(a, b)| (a - b).abs() < 1e-12));
    }

    #[test]
    fn constant_image_is_unchanged() {
        let img = Image::filled(32, 32, 1, 0.42).unwrap();
        let k = linear_kernel(11.0, 30.0, 27).unwrap();
        let out = blur(&img, &k, 0.0, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert!(out.data().iter().all(|v| (v - 0.42).abs() < 1e-12));
    }

    #[test]
    fn fft_matches_direct() {
        let img = random_image(40, 33, 1, 3);
        let k = linear_kernel(13.0, 70.0, 27).unwrap();
        let a = convolve_direct(&img.plane(0), 40, 33, &k);
        let b = convolve_fft(&img.plane(0), 40, 33, &k);
        let err = a.iter().zip(&b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        assert!(err < 1e-12, "{err}");
    }

    #[test]
    fn dispatcher_matches_direct_on_both_paths() {
        let img = random_image(31, 29, 1, 5);
        let plane = img.plane(0);
        let short = linear_kernel(3.0, 10.0, 9).unwrap();
        let long = MotionKernel::from_weights(9, 9, vec![1.0 / 81.0; 81]).unwrap();
        assert!(short.weights().iter().filter(|&&w| w != 0.0).count() <= SPARSE_TAPS);
        assert!(long.weights().iter().filter(|&&w| w != 0.0).count() > SPARSE_TAPS);
        for k in [&short, &long] {
            let a = convolve_direct(&plane, 31, 29, k);
            let b = convolve(&plane, 31, 29, k);
            let err = a.iter().zip(&b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
            assert!(err < 1e-12, "{err}");
        }
        assert_eq!(convolve(&plane, 31, 29, &MotionKernel::delta(9)), plane);
    }

    #[test]
    fn kernel_larger_than_image_is_rejected() {
        let img = Image::filled(10, 40, 1, 0.5).unwrap();
        let r = blur(&img, &MotionKernel::delta(27), 0.0, &mut ChaCha8Rng::seed_from_u64(0));
        assert!(matches!(r, Err(Error::Degradation(_))));
    }

    #[test]
    fn noise_is_seeded() {
        let img = Image::filled(30, 30, 3, 0.5).unwrap();
        let k = MotionKernel::delta(27);
        let a = blur(&img, &k, 0.01, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = blur(&img, &k, 0.01, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, img);
        assert!(blur(&img, &k, -1.0, &mut ChaCha8Rng::seed_from_u64(9)).is_err());
    }

    #[test]
    fn psnr_cases() {
        let a = random_image(8, 8, 3, 4);
        assert_eq!(psnr(&a, &a).unwrap(), f64::INFINITY);
        let x = Image::filled(8, 8, 1, 0.3).unwrap();
        let y = Image::filled(8, 8, 1, 0.4).unwrap();
        assert!((psnr(&x, &y).unwrap() - 20.0).abs() < 1e-9);
        let b = random_image(8, 8, 3, 5);
        assert_eq!(psnr(&a, &b).unwrap(), psnr(&b, &a).unwrap());
        assert!(psnr(&a, &x).is_err());
    }

    #[test]
    fn png_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        for (i, c) in [1usize, 3].into_iter().enumerate() {
            let img = random_image(7, 9, c, 10 + i as u64);
            let path = dir.path().join(format!("img{c}.png"));
            save_png(&img, &path).unwrap();
            let back = load_png(&path).unwrap();
            assert_eq!(back.channels(), c);
            let err = back.data().iter().zip(img.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            assert!(err <= 1.0 / 510.0 + 1e-15);
        }
        let black = Image::filled(4, 4, 3, 0.0).unwrap();
        let path = dir.path().join("black.png");
        save_png(&black, &path).unwrap();
        assert_eq!(load_png(&path).unwrap(), black);
    }

    #[test]
    fn sixteen_bit_png_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("deep.png");
        let file = File::create(&path).unwrap();
        let mut enc = png::Encoder::new(BufWriter::new(file), 2, 2);
        enc.set_color(png::ColorType::Grayscale);
        enc.set_depth(png::BitDepth::Sixteen);
        let mut w = enc.write_header().unwrap();
        w.write_image_data(&[0u8; 8]).unwrap();
        w.finish().unwrap();
        assert!(matches!(load_png(&path), Err(Error::Image { .. })));
    }
}
