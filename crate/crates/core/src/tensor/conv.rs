//! "Same" 2D cross-correlation with edge replication, lowered to one GEMM per
//! kernel tap.
//!
//! The input is padded once by replicating its border. The output is then
//! computed on a "wide" grid that shares the padded row stride, so every tap
//! becomes a plain strided matrix product over the padded buffer. The extra
//! `kW - 1` columns per row are discarded on the way out, and zero-filled on
//! the way back so they contribute nothing to the gradients.

use super::Tensor;
use crate::error::{Error, Result};

/// Padding `(before, after)` that keeps a length-`k` correlation "same"-sized.
/// Even kernels pad one more element before than after.
pub fn pad_extent(k: usize) -> (usize, usize) {
    let before = k / 2;
    (before, k - 1 - before)
}

struct Geometry {
    n: usize,
    cin: usize,
    cout: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    hp: usize,
    wp: usize,
}

impl Geometry {
    fn new(input: &Tensor, weight: &Tensor) -> Result<Self> {
        let [n, cin, h, w] = input
            .dims4()
            .map_err(|_| Error::shape("conv2d", format!("input must be [N,C,H,W], got {:?}", input.shape())))?;
        let [cout, wcin, kh, kw] = weight
            .dims4()
            .map_err(|_| Error::shape("conv2d", format!("weight must be [O,I,kH,kW], got {:?}", weight.shape())))?;
        if wcin != cin {
            return Err(Error::shape(
                "conv2d",
                format!("input has {cin} channels but weight expects {wcin}"),
            ));
        }
        Ok(Self {
            n,
            cin,
            cout,
            h,
            w,
            kh,
            kw,
            hp: h + kh - 1,
            wp: w + kw - 1,
        })
    }

    fn plane(&self) -> usize {
        self.hp * self.wp
    }

    fn wide(&self) -> usize {
        self.h * self.wp
    }

    /// Edge-replicated copy of one batch item, with `kw` slack elements so the
    /// last wide row of the last channel stays in bounds.
    fn pad(&self, item: &[f64]) -> Vec<f64> {
        let (pt, _) = pad_extent(self.kh);
        let (pl, _) = pad_extent(self.kw);
        let (h, w, wp) = (self.h, self.w, self.wp);
        let mut out = vec![0.0; self.cin * self.plane() + self.kw];
        for c in 0..self.cin {
            let src = &item[c * h * w..(c + 1) * h * w];
            let dst = &mut out[c * self.plane()..(c + 1) * self.plane()];
            for py in 0..self.hp {
                let sy = py.saturating_sub(pt).min(h - 1);
                let row = &src[sy * w..(sy + 1) * w];
                let drow = &mut dst[py * wp..(py + 1) * wp];
                drow[..pl].fill(row[0]);
                drow[pl..pl + w].copy_from_slice(row);
                drow[pl + w..].fill(row[w - 1]);
            }
        }
        out
    }
}

/// `c[m×n] += a[m×k] · b[k×n]` over arbitrary positive strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    (m, k, n): (usize, usize, usize),
    a: &[f64],
    a_off: usize,
    (rsa, csa): (usize, usize),
    b: &[f64],
    b_off: usize,
    (rsb, csb): (usize, usize),
    c: &mut [f64],
    c_off: usize,
    (rsc, csc): (usize, usize),
) {
    if m == 0 || k == 0 || n == 0 {
        return;
    }
    assert!(a_off + (m - 1) * rsa + (k - 1) * csa < a.len());
    assert!(b_off + (k - 1) * rsb + (n - 1) * csb < b.len());
    assert!(c_off + (m - 1) * rsc + (n - 1) * csc < c.len());
    // SAFETY: the asserts above bound every element the kernel touches, and
    // `c` is borrowed mutably so it cannot alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr().add(a_off),
            rsa as isize,
            csa as isize,
            b.as_ptr().add(b_off),
            rsb as isize,
            csb as isize,
            1.0,
            c.as_mut_ptr().add(c_off),
            rsc as isize,
            csc as isize,
        );
    }
}

/// Forward pass of the edge-replicated "same" cross-correlation.
///
/// `input` is `[N, C_in, H, W]`, `weight` is `[C_out, C_in, kH, kW]`; the
/// result is `[N, C_out, H, W]`.
pub fn conv2d_forward(input: &Tensor, weight: &Tensor) -> Result<Tensor> {
    let g = Geometry::new(input, weight)?;
    let in_item = g.cin * g.h * g.w;
    let out_item = g.cout * g.h * g.w;
    let taps = g.kh * g.kw;
    let mut out = vec![0.0; g.n * out_item];
    let mut wide = vec![0.0; g.cout * g.wide()];
    for b in 0..g.n {
        let padded = g.pad(&input.data()[b * in_item..(b + 1) * in_item]);
        wide.fill(0.0);
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                gemm(
                    (g.cout, g.cin, g.wide()),
                    weight.data(),
                    ky * g.kw + kx,
                    (g.cin * taps, taps),
                    &padded,
                    ky * g.wp + kx,
                    (g.plane(), 1),
                    &mut wide,
                    0,
                    (g.wide(), 1),
                );
            }
        }
        let dst = &mut out[b * out_item..(b + 1) * out_item];
        for co in 0..g.cout {
            for y in 0..g.h {
                let src = &wide[co * g.wide() + y * g.wp..][..g.w];
                dst[(co * g.h + y) * g.w..][..g.w].copy_from_slice(src);
            }
        }
    }
    Tensor::new(vec![g.n, g.cout, g.h, g.w], out)
}

/// Gradients of the convolution with respect to its input and weight, each
/// computed only when requested.
pub(crate) fn conv2d_backward(
    input: &Tensor,
    weight: &Tensor,
    grad_out: &Tensor,
    need_input: bool,
    need_weight: bool,
) -> (Option<Tensor>, Option<Tensor>) {
    let g = Geometry::new(input, weight).expect("shapes validated in forward");
    let (pt, _) = pad_extent(g.kh);
    let (pl, _) = pad_extent(g.kw);
    let in_item = g.cin * g.h * g.w;
    let out_item = g.cout * g.h * g.w;
    let taps = g.kh * g.kw;

    let mut grad_in = need_input.then(|| vec![0.0; g.n * in_item]);
    let mut grad_w = need_weight.then(|| vec![0.0; weight.len()]);
    let mut gwide = vec![0.0; g.cout * g.wide()];
    let mut gpad = vec![0.0; g.cin * g.plane() + g.kw];

    for b in 0..g.n {
        let gsrc = &grad_out.data()[b * out_item..(b + 1) * out_item];
        gwide.fill(0.0);
        for co in 0..g.cout {
            for y in 0..g.h {
                gwide[co * g.wide() + y * g.wp..][..g.w]
                    .copy_from_slice(&gsrc[(co * g.h + y) * g.w..][..g.w]);
            }
        }

        if let Some(gw) = grad_w.as_mut() {
            let padded = g.pad(&input.data()[b * in_item..(b + 1) * in_item]);
            for ky in 0..g.kh {
                for kx in 0..g.kw {
                    gemm(
                        (g.cout, g.wide(), g.cin),
                        &gwide,
                        0,
                        (g.wide(), 1),
                        &padded,
                        ky * g.wp + kx,
                        (1, g.plane()),
                        gw,
                        ky * g.kw + kx,
                        (g.cin * taps, taps),
                    );
                }
            }
        }

        if let Some(gi) = grad_in.as_mut() {
            gpad.fill(0.0);
            for ky in 0..g.kh {
                for kx in 0..g.kw {
                    gemm(
                        (g.cin, g.cout, g.wide()),
                        weight.data(),
                        ky * g.kw + kx,
                        (taps, g.cin * taps),
                        &gwide,
                        0,
                        (g.wide(), 1),
                        &mut gpad,
                        ky * g.wp + kx,
                        (g.plane(), 1),
                    );
                }
            }
            // Fold the replicated border back onto the edge pixels it copied.
            let dst = &mut gi[b * in_item..(b + 1) * in_item];
            for c in 0..g.cin {
                let plane = &gpad[c * g.plane()..(c + 1) * g.plane()];
                let out = &mut dst[c * g.h * g.w..(c + 1) * g.h * g.w];
                for py in 0..g.hp {
                    let sy = py.saturating_sub(pt).min(g.h - 1);
                    let row = &plane[py * g.wp..(py + 1) * g.wp];
                    let orow = &mut out[sy * g.w..(sy + 1) * g.w];
                    for (px, &v) in row.iter().enumerate() {
                        orow[px.saturating_sub(pl).min(g.w - 1)] += v;
                    }
                }
            }
        }
    }

    let gi = grad_in.map(|d| Tensor::new(input.shape().to_vec(), d).expect("input shape"));
    let gw = grad_w.map(|d| Tensor::new(weight.shape().to_vec(), d).expect("weight shape"));
    (gi, gw)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pad_extent_is_symmetric_for_odd_kernels() {
        assert_eq!(pad_extent(1), (0, 0));
        assert_eq!(pad_extent(3), (1, 1));
        assert_eq!(pad_extent(7), (3, 3));
        assert_eq!(pad_extent(14), (7, 6));
    }

    #[test]
    fn scaling_weight_doubles_output() {
        let x = Tensor::new(vec![1, 1, 3, 3], (0..9).map(f64::from).collect()).unwrap();
        let w = Tensor::new(vec![1, 1, 1, 1], vec![2.0]).unwrap();
        let y = conv2d_forward(&x, &w).unwrap();
        let expected: Vec<f64> = x.data().iter().map(|v| 2.0 * v).collect();
        assert_eq!(y.data(), &expected[..]);
    }

    #[test]
    fn delta_weight_is_identity() {
        let x = Tensor::from_fn(&[2, 1, 4, 5], |i| (i as f64 * 0.37).sin());
        let mut wd = vec![0.0; 9];
        wd[4] = 1.0;
        let w = Tensor::new(vec![1, 1, 3, 3], wd).unwrap();
        let y = conv2d_forward(&x, &w).unwrap();
        assert!(y.max_abs_diff(&x) <= 1e-12);
    }

    #[test]
    fn even_kernel_keeps_shape() {
        let x = Tensor::from_fn(&[1, 2, 15, 14], |i| i as f64);
        let w = Tensor::full(&[3, 2, 14, 14], 0.01);
        let y = conv2d_forward(&x, &w).unwrap();
        assert_eq!(y.shape(), &[1, 3, 15, 14]);
    }

    #[test]
    fn rejects_channel_mismatch() {
        let x = Tensor::zeros(&[1, 2, 5, 5]);
        let w = Tensor::zeros(&[1, 3, 3, 3]);
        assert!(matches!(conv2d_forward(&x, &w), Err(Error::Shape { .. })));
        assert!(conv2d_forward(&Tensor::zeros(&[2, 5, 5]), &w).is_err());
    }
}
