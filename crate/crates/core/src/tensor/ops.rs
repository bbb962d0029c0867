//! Differentiable operations on [`Var`].

use std::rc::Rc;

use super::conv::{conv2d_backward, conv2d_forward};
use super::{Tensor, Var};
use crate::error::{Error, Result};

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() == b.shape() {
        Ok(())
    } else {
        Err(Error::shape(op, format!("{:?} vs {:?}", a.shape(), b.shape())))
    }
}

fn dims4(op: &'static str, t: &Tensor) -> Result<[usize; 4]> {
    t.dims4()
        .map_err(|_| Error::shape(op, format!("expected [N,C,H,W], got {:?}", t.shape())))
}

impl<'t> Var<'t> {
    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.value(), other.value());
        same_shape("add", &a, &b)?;
        let out = a.zip_map(&b, |x, y| x + y);
        Ok(self.tape().record(out, &[self, other], |g, _| {
            vec![Some(g.clone()), Some(g.clone())]
        }))
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.value(), other.value());
        same_shape("sub", &a, &b)?;
        let out = a.zip_map(&b, |x, y| x - y);
        Ok(self.tape().record(out, &[self, other], |g, needs| {
            vec![Some(g.clone()), needs[1].then(|| g.map(|v| -v))]
        }))
    }

    /// Elementwise product.
    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.value(), other.value());
        same_shape("mul", &a, &b)?;
        let out = a.zip_map(&b, |x, y| x * y);
        Ok(self.tape().record(out, &[self, other], move |g, needs| {
            vec![
                needs[0].then(|| g.zip_map(&b, |gv, bv| gv * bv)),
                needs[1].then(|| g.zip_map(&a, |gv, av| gv * av)),
            ]
        }))
    }

    pub fn scale(self, c: f64) -> Var<'t> {
        let out = self.value().map(|v| c * v);
        self.tape()
            .record(out, &[self], move |g, _| vec![Some(g.map(|v| c * v))])
    }

    pub fn square(self) -> Var<'t> {
        let x = self.value();
        let out = x.map(|v| v * v);
        self.tape().record(out, &[self], move |g, _| {
            vec![Some(g.zip_map(&x, |gv, xv| 2.0 * xv * gv))]
        })
    }

    /// `x` where `x >= 0`, `slope * x` elsewhere.
    pub fn leaky_relu(self, slope: f64) -> Var<'t> {
        let x = self.value();
        self.tape().mix_pattern(x.data().iter().map(|&v| v < 0.0));
        let out = x.map(|v| if v >= 0.0 { v } else { slope * v });
        self.tape().record(out, &[self], move |g, _| {
            vec![Some(g.zip_map(&x, |gv, xv| if xv >= 0.0 { gv } else { slope * gv }))]
        })
    }

    pub fn sum_all(self) -> Var<'t> {
        let x = self.value();
        let shape = x.shape().to_vec();
        let out = Tensor::scalar(x.data().iter().sum());
        self.tape().record(out, &[self], move |g, _| {
            vec![Some(Tensor::full(&shape, g.data()[0]))]
        })
    }

    pub fn mean_all(self) -> Var<'t> {
        let n = self.value().len() as f64;
        self.sum_all().scale(1.0 / n)
    }

    /// Concatenate `[N, C_i, H, W]` blocks along the channel axis.
    pub fn concat_channels(parts: &[Var<'t>]) -> Result<Var<'t>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::shape("concat_channels", "no parts"))?;
        let values: Vec<Rc<Tensor>> = parts.iter().map(Var::value).collect();
        let [n, _, h, w] = dims4("concat_channels", &values[0])?;
        let mut widths = Vec::with_capacity(parts.len());
        for v in &values {
            let [vn, vc, vh, vw] = dims4("concat_channels", v)?;
            if (vn, vh, vw) != (n, h, w) {
                return Err(Error::shape(
                    "concat_channels",
                    format!("{:?} does not match batch/spatial size of {:?}", v.shape(), values[0].shape()),
                ));
            }
            widths.push(vc);
        }
        let total: usize = widths.iter().sum();
        let hw = h * w;
        let mut out = Vec::with_capacity(n * total * hw);
        for b in 0..n {
            for (v, &c) in values.iter().zip(&widths) {
                out.extend_from_slice(&v.data()[b * c * hw..(b + 1) * c * hw]);
            }
        }
        let out = Tensor::new(vec![n, total, h, w], out)?;
        Ok(first.tape().record(out, parts, move |g, needs| {
            let mut grads: Vec<Option<Tensor>> = Vec::with_capacity(widths.len());
            let mut offset = 0;
            for (i, &c) in widths.iter().enumerate() {
                if needs[i] {
                    let mut d = Vec::with_capacity(n * c * hw);
                    for b in 0..n {
                        let start = (b * total + offset) * hw;
                        d.extend_from_slice(&g.data()[start..start + c * hw]);
                    }
                    grads.push(Some(Tensor::new(vec![n, c, h, w], d).expect("split shape")));
                } else {
                    grads.push(None);
                }
                offset += c;
            }
            grads
        }))
    }

    /// Edge-replicated "same" cross-correlation; see [`super::conv2d_forward`].
    pub fn conv2d(self, weight: Var<'t>) -> Result<Var<'t>> {
        let (x, w) = (self.value(), weight.value());
        let out = conv2d_forward(&x, &w)?;
        Ok(self.tape().record(out, &[self, weight], move |g, needs| {
            let (gi, gw) = conv2d_backward(&x, &w, g, needs[0], needs[1]);
            vec![gi, gw]
        }))
    }

    /// Keep every second row and column, starting at the first:
    /// `[N,C,H,W] -> [N,C,ceil(H/2),ceil(W/2)]`. Composed after a "same"
    /// convolution this is a stride-2 convolution.
    pub fn downsample2(self) -> Result<Var<'t>> {
        let x = self.value();
        let [n, c, h, w] = dims4("downsample2", &x)?;
        let (ho, wo) = (h.div_ceil(2), w.div_ceil(2));
        let mut out = Vec::with_capacity(n * c * ho * wo);
        for plane in x.data().chunks_exact(h * w) {
            for y in 0..ho {
                for xo in 0..wo {
                    out.push(plane[2 * y * w + 2 * xo]);
                }
            }
        }
        let out = Tensor::new(vec![n, c, ho, wo], out)?;
        Ok(self.tape().record(out, &[self], move |g, _| {
            let mut d = vec![0.0; n * c * h * w];
            for (gplane, dplane) in g.data().chunks_exact(ho * wo).zip(d.chunks_exact_mut(h * w)) {
                for y in 0..ho {
                    for xo in 0..wo {
                        dplane[2 * y * w + 2 * xo] = gplane[y * wo + xo];
                    }
                }
            }
            vec![Some(Tensor::new(vec![n, c, h, w], d).expect("input shape"))]
        }))
    }

    /// Global average over the spatial axes: `[N,C,H,W] -> [N,C]`.
    pub fn mean_spatial(self) -> Result<Var<'t>> {
        let x = self.value();
        let [n, c, h, w] = dims4("mean_spatial", &x)?;
        let hw = (h * w) as f64;
        let out: Vec<f64> = x
            .data()
            .chunks_exact(h * w)
            .map(|p| p.iter().sum::<f64>() / hw)
            .collect();
        let out = Tensor::new(vec![n, c], out)?;
        Ok(self.tape().record(out, &[self], move |g, _| {
            let mut d = Vec::with_capacity(n * c * h * w);
            for &gv in g.data() {
                d.extend(std::iter::repeat_n(gv / hw, h * w));
            }
            vec![Some(Tensor::new(vec![n, c, h, w], d).expect("input shape"))]
        }))
    }

    /// Matrix product `[N,K] x [K,D] -> [N,D]`.
    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.value(), other.value());
        let (&[n, k], &[k2, d]) = (a.shape(), b.shape()) else {
            return Err(Error::shape(
                "matmul",
                format!("expected rank-2 operands, got {:?} and {:?}", a.shape(), b.shape()),
            ));
        };
        if k != k2 {
            return Err(Error::shape("matmul", format!("inner dimensions {k} and {k2} differ")));
        }
        let mut out = vec![0.0; n * d];
        for i in 0..n {
            for j in 0..d {
                out[i * d + j] = (0..k).map(|p| a.data()[i * k + p] * b.data()[p * d + j]).sum();
            }
        }
        let out = Tensor::new(vec![n, d], out)?;
        Ok(self.tape().record(out, &[self, other], move |g, needs| {
            let ga = needs[0].then(|| {
                Tensor::from_fn(&[n, k], |idx| {
                    let (i, p) = (idx / k, idx % k);
                    (0..d).map(|j| g.data()[i * d + j] * b.data()[p * d + j]).sum()
                })
            });
            let gb = needs[1].then(|| {
                Tensor::from_fn(&[k, d], |idx| {
                    let (p, j) = (idx / d, idx % d);
                    (0..n).map(|i| a.data()[i * k + p] * g.data()[i * d + j]).sum()
                })
            });
            vec![ga, gb]
        }))
    }

    /// Forward difference along the last axis: `x[..., j+1] - x[..., j]`.
    pub fn diff_last(self) -> Result<Var<'t>> {
        let x = self.value();
        let shape = x.shape().to_vec();
        let w = *shape.last().expect("tensors have rank >= 1");
        if w < 2 {
            return Err(Error::shape("diff_last", format!("last axis of {shape:?} is shorter than 2")));
        }
        let mut out_shape = shape.clone();
        *out_shape.last_mut().unwrap() = w - 1;
        let out: Vec<f64> = x
            .data()
            .chunks_exact(w)
            .flat_map(|row| row.windows(2).map(|p| p[1] - p[0]))
            .collect();
        let out = Tensor::new(out_shape, out)?;
        Ok(self.tape().record(out, &[self], move |g, _| {
            let mut d = vec![0.0; g.len() / (w - 1) * w];
            for (grow, drow) in g.data().chunks_exact(w - 1).zip(d.chunks_exact_mut(w)) {
                for (j, &gv) in grow.iter().enumerate() {
                    drow[j + 1] += gv;
                    drow[j] -= gv;
                }
            }
            vec![Some(Tensor::new(shape.clone(), d).expect("input shape"))]
        }))
    }

    /// Forward difference along the second-to-last axis:
    /// `x[..., i+1, :] - x[..., i, :]`.
    pub fn diff_rows(self) -> Result<Var<'t>> {
        let x = self.value();
        let shape = x.shape().to_vec();
        if shape.len() < 2 || shape[shape.len() - 2] < 2 {
            return Err(Error::shape("diff_rows", format!("row axis of {shape:?} is shorter than 2")));
        }
        let (h, w) = (shape[shape.len() - 2], shape[shape.len() - 1]);
        let mut out_shape = shape.clone();
        out_shape[shape.len() - 2] = h - 1;
        let mut out = Vec::with_capacity(x.len() / h * (h - 1));
        for plane in x.data().chunks_exact(h * w) {
            for i in 0..h - 1 {
                out.extend((0..w).map(|j| plane[(i + 1) * w + j] - plane[i * w + j]));
            }
        }
        let out = Tensor::new(out_shape, out)?;
        Ok(self.tape().record(out, &[self], move |g, _| {
            let mut d = vec![0.0; g.len() / (h - 1) * h];
            for (gplane, dplane) in g.data().chunks_exact((h - 1) * w).zip(d.chunks_exact_mut(h * w)) {
                for i in 0..h - 1 {
                    for j in 0..w {
                        let gv = gplane[i * w + j];
                        dplane[(i + 1) * w + j] += gv;
                        dplane[i * w + j] -= gv;
                    }
                }
            }
            vec![Some(Tensor::new(shape.clone(), d).expect("input shape"))]
        }))
    }
}
