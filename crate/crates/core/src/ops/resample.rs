//! Spatial resampling on the trailing two axes: 2x bilinear upsampling and
//! max pooling.

use crate::error::{Error, Result};
use crate::tape::{Op, Tape, Var};
use crate::tensor::Tensor;

/// Source taps for a 2x half-pixel-center upsample along one axis.
///
/// Output `o` samples source coordinate `(o + 0.5) / 2 - 0.5`, clamped at 0,
/// and interpolates between its floor and the next sample (clamped at the
/// last index). This is the align-corners-off convention.
pub fn upsample_taps(size: usize) -> Vec<(usize, usize, f64)> {
    (0..2 * size)
        .map(|o| {
            let src = ((o as f64 + 0.5) / 2.0 - 0.5).max(0.0);
            let i0 = src.floor() as usize;
            let i1 = (i0 + 1).min(size - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

fn planes(shape: &[usize], op: &'static str) -> Result<(usize, usize, usize)> {
    if shape.len() < 2 {
        return Err(Error::shape(
            op,
            format!("rank {} has no spatial axes", shape.len()),
        ));
    }
    let r = shape.len();
    Ok((shape[..r - 2].iter().product(), shape[r - 2], shape[r - 1]))
}

fn upsample2x_forward(x: &Tensor) -> Tensor {
    let (planes, h, w) = planes(x.shape(), "upsample").unwrap();
    let ty = upsample_taps(h);
    let tx = upsample_taps(w);
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = Vec::with_capacity(planes * oh * ow);
    for p in 0..planes {
        let src = &x.data()[p * h * w..(p + 1) * h * w];
        for &(y0, y1, ly) in &ty {
            for &(x0, x1, lx) in &tx {
                let top = src[y0 * w + x0] * (1.0 - lx) + src[y0 * w + x1] * lx;
                let bot = src[y1 * w + x0] * (1.0 - lx) + src[y1 * w + x1] * lx;
                out.push(top * (1.0 - ly) + bot * ly);
            }
        }
    }
    let mut shape = x.shape().to_vec();
    let r = shape.len();
    shape[r - 2] = oh;
    shape[r - 1] = ow;
    Tensor::from_parts(shape, out)
}

pub(crate) fn upsample2x_backward(in_shape: &[usize], g: &Tensor) -> Tensor {
    let (planes, h, w) = planes(in_shape, "upsample").unwrap();
    let ty = upsample_taps(h);
    let tx = upsample_taps(w);
    let (oh, ow) = (2 * h, 2 * w);
    let mut gx = Tensor::zeros(in_shape);
    let d = gx.data_mut();
    for p in 0..planes {
        let dst = &mut d[p * h * w..(p + 1) * h * w];
        let src = &g.data()[p * oh * ow..(p + 1) * oh * ow];
        for (oy, &(y0, y1, ly)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, lx)) in tx.iter().enumerate() {
                let gv = src[oy * ow + ox];
                dst[y0 * w + x0] += gv * (1.0 - ly) * (1.0 - lx);
                dst[y0 * w + x1] += gv * (1.0 - ly) * lx;
                dst[y1 * w + x0] += gv * ly * (1.0 - lx);
                dst[y1 * w + x1] += gv * ly * lx;
            }
        }
    }
    gx
}

pub(crate) fn maxpool_backward(in_shape: &[usize], argmax: &[usize], g: &Tensor) -> Tensor {
    let mut gx = Tensor::zeros(in_shape);
    let d = gx.data_mut();
    for (&src, gv) in argmax.iter().zip(g.data()) {
        d[src] += gv;
    }
    gx
}

impl Tape {
    /// Doubles both spatial extents by bilinear interpolation with
    /// half-pixel centers.
    pub fn upsample_bilinear_x2(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        planes(self.shape(x), "bilinear_upsample_x2")?;
        let out = upsample2x_forward(self.value(x));
        self.push("bilinear_upsample_x2", out, Op::Upsample2x { x })
    }

    /// Max over `kernel x kernel` windows. Ties go to the first element in
    /// row-major window order, which also receives the whole gradient.
    pub fn maxpool2d(&mut self, x: Var, kernel: usize, stride: usize) -> Result<Var> {
        self.check(x)?;
        let (n_planes, h, w) = planes(self.shape(x), "maxpool2d")?;
        if kernel == 0 || stride == 0 {
            return Err(Error::InvalidArgument(
                "maxpool2d kernel and stride must be >= 1".into(),
            ));
        }
        for (axis, size) in [("height", h), ("width", w)] {
            if size < kernel || !(size - kernel).is_multiple_of(stride) {
                return Err(Error::NonIntegerExtent {
                    op: "maxpool2d",
                    axis,
                    detail: format!("extent {size} with kernel {kernel} and stride {stride}"),
                });
            }
        }
        let oh = (h - kernel) / stride + 1;
        let ow = (w - kernel) / stride + 1;
        let xd = self.value(x).data();
        let mut out = Vec::with_capacity(n_planes * oh * ow);
        let mut argmax = Vec::with_capacity(n_planes * oh * ow);
        for p in 0..n_planes {
            let base = p * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = base + oy * stride * w + ox * stride;
                    for ky in 0..kernel {
                        for kx in 0..kernel {
                            let i = base + (oy * stride + ky) * w + ox * stride + kx;
                            if xd[i] > xd[best] {
                                best = i;
                            }
                        }
                    }
                    out.push(xd[best]);
                    argmax.push(best);
                }
            }
        }
        let mut shape = self.shape(x).to_vec();
        let r = shape.len();
        shape[r - 2] = oh;
        shape[r - 1] = ow;
        let out = Tensor::from_parts(shape, out);
        self.push("maxpool2d", out, Op::MaxPool2d { x, argmax })
    }
}
