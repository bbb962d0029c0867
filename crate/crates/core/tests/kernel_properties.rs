mod common;

use deepdeblur::kernels::{
    cholesky_with_jitter, covariance_matrix, format_kernel, linear_kernel, parse_kernel, GpConfig, KernelSynth,
    MotionKernel,
};
use nalgebra::DMatrix;

/// Nonnegative, unit sum, mass center within half a pixel of the canvas
/// center on each axis, recorded valid size in range, and support no wider
/// than the valid size plus the one pixel bilinear splatting can add.
pub fn check_kernel(k: &MotionKernel, range: (usize, usize)) -> Result<(), String> {
    if let Some(w) = k.weights().iter().find(|&&w| !(w >= 0.0)) {
        return Err(format!("negative or NaN weight {w}"));
    }
    let sum: f64 = k.weights().iter().sum();
    if (sum - 1.0).abs() > 1e-9 {
        return Err(format!("sum {sum}"));
    }
    let n = k.canvas();
    let (mut mr, mut mc) = (0.0, 0.0);
    for i in 0..n {
        for j in 0..n {
            mr += i as f64 * k.weight(i, j);
            mc += j as f64 * k.weight(i, j);
        }
    }
    let c = (n / 2) as f64;
    if (mr - c).abs() > 0.5 || (mc - c).abs() > 0.5 {
        return Err(format!("mass center ({mr}, {mc}) vs {c}"));
    }
    let v = k.valid_size();
    if v < range.0 || v > range.1 {
        return Err(format!("valid size {v} outside {range:?}"));
    }
    let (r0, r1, c0, c1) = k.support_bbox();
    let extent = (r1 - r0 + 1).max(c1 - c0 + 1);
    if extent > v + 1 {
        return Err(format!("support extent {extent} for valid size {v}"));
    }
    Ok(())
}

#[test]
fn synthesized_kernels_hold_invariants() {
    let gp = GpConfig::default();
    let synth = KernelSynth::new(&gp).unwrap();
    let mut rng = gp.rng();
    for i in 0..150 {
        let k = synth.synth(&mut rng).unwrap();
        check_kernel(&k, gp.valid_size_range).unwrap_or_else(|e| panic!("kernel {i}: {e}"));
    }
}

#[test]
fn small_canvas_kernels_hold_invariants() {
    let gp = GpConfig {
        canvas: 9,
        valid_size_range: (3, 7),
        traj_len_range: (20, 200),
        seed: 5,
        ..GpConfig::default()
    };
    let synth = KernelSynth::new(&gp).unwrap();
    let mut rng = gp.rng();
    for i in 0..200 {
        let k = synth.synth(&mut rng).unwrap();
        check_kernel(&k, gp.valid_size_range).unwrap_or_else(|e| panic!("kernel {i}: {e}"));
    }
}

#[test]
fn gram_matrices_are_positive_semidefinite() {
    let gp = GpConfig::default();
    for n in [2, 10, 50, 120] {
        let k = DMatrix::from_row_slice(n, n, &covariance_matrix(n, &gp));
        let min = k.symmetric_eigenvalues().min();
        assert!(min >= -1e-8, "n = {n}: min eigenvalue {min:e}");
    }
}

#[test]
fn cholesky_reconstructs() {
    let gp = GpConfig::default();
    let n = 300;
    let a = covariance_matrix(n, &gp);
    let (l, jitter) = cholesky_with_jitter(&a, n).unwrap();
    let l = DMatrix::from_row_slice(n, n, &l);
    let rebuilt = &l * l.transpose();
    let a = DMatrix::from_row_slice(n, n, &a) + DMatrix::identity(n, n) * jitter;
    assert!((rebuilt - a).amax() < 1e-10);
}

#[test]
fn linear_kernels_hold_invariants() {
    for (len, angle) in [(15.0, 45.0), (1.0, 0.0), (9.0, 90.0), (20.0, 135.0), (27.0, 0.0), (6.0, 17.0)] {
        let k = linear_kernel(len, angle, 27).unwrap();
        check_kernel(&k, (1, 27)).unwrap_or_else(|e| panic!("L={len} angle={angle}: {e}"));
    }
}

#[test]
fn diagonal_line_lies_on_the_diagonal() {
    // Length is Euclidean: endpoints 14 px apart span 14/sqrt(2) per axis.
    let k = linear_kernel(15.0, 45.0, 27).unwrap();
    let (r0, r1, c0, c1) = k.support_bbox();
    assert_eq!((r1 - r0, c1 - c0), (10, 10));
    let h = linear_kernel(15.0, 0.0, 27).unwrap();
    assert_eq!(h.support_bbox(), (13, 13, 6, 20));
    for i in 0..27 {
        for j in 0..27 {
            if k.weight(i, j) > 1e-12 {
                assert!((i as isize - j as isize).abs() <= 1, "off-diagonal mass at ({i},{j})");
            }
        }
    }
}

#[test]
fn mkern_round_trip_is_exact() {
    let gp = GpConfig::default();
    let synth = KernelSynth::new(&gp).unwrap();
    let mut rng = gp.rng();
    for _ in 0..10 {
        let k = synth.synth(&mut rng).unwrap();
        assert_eq!(parse_kernel(&format_kernel(&k)).unwrap(), k);
    }
}
