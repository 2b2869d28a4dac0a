//! 2-D cross-correlation lowered to matrix products via im2col.

use crate::error::{Error, Result};
use crate::tape::{Op, Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug)]
struct Geometry {
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    padding: usize,
    oh: usize,
    ow: usize,
}

impl Geometry {
    fn patch(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    fn out_px(&self) -> usize {
        self.oh * self.ow
    }
}

/// Output extent for one spatial axis: `floor((size + 2p - k) / stride) + 1`.
pub fn conv_out_extent(size: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = size + 2 * padding;
    (stride >= 1 && padded >= kernel).then(|| (padded - kernel) / stride + 1)
}

/// `c = a * b + beta * c` for row-major `a: m x k`, `b: k x n`; either input
/// may be read transposed.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    beta: f64,
    c: &mut [f64],
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let (rsa, csa) = if a_t {
        (1, m as isize)
    } else {
        (k as isize, 1)
    };
    let (rsb, csb) = if b_t {
        (1, k as isize)
    } else {
        (n as isize, 1)
    };
    // SAFETY: bounds asserted above; strides describe the row-major layouts.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Output columns `ox` whose input column `ox * stride + k - padding` lies in `0..size`.
fn valid_range(out: usize, size: usize, k: usize, stride: usize, padding: usize) -> (usize, usize) {
    let lo = padding.saturating_sub(k).div_ceil(stride);
    let hi = if size + padding > k {
        ((size + padding - k - 1) / stride + 1).min(out)
    } else {
        0
    };
    (lo.min(hi), hi)
}

fn im2col(x: &[f64], g: &Geometry, cols: &mut [f64]) {
    let px = g.out_px();
    for c in 0..g.cin {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.kh {
            let (y0, y1) = valid_range(g.oh, g.h, ky, g.stride, g.padding);
            for kx in 0..g.kw {
                let (x0, x1) = valid_range(g.ow, g.w, kx, g.stride, g.padding);
                let row = (c * g.kh + ky) * g.kw + kx;
                let dst = &mut cols[row * px..(row + 1) * px];
                dst[..y0 * g.ow].fill(0.0);
                dst[y1 * g.ow..].fill(0.0);
                for oy in y0..y1 {
                    let iy = oy * g.stride + ky - g.padding;
                    let src = &plane[iy * g.w..(iy + 1) * g.w];
                    let d = &mut dst[oy * g.ow..(oy + 1) * g.ow];
                    d[..x0].fill(0.0);
                    d[x1..].fill(0.0);
                    if g.stride == 1 {
                        let ix0 = x0 + kx - g.padding;
                        d[x0..x1].copy_from_slice(&src[ix0..ix0 + (x1 - x0)]);
                    } else {
                        for ox in x0..x1 {
                            d[ox] = src[ox * g.stride + kx - g.padding];
                        }
                    }
                }
            }
        }
    }
}

fn col2im(cols: &[f64], g: &Geometry, dx: &mut [f64]) {
    let px = g.out_px();
    for c in 0..g.cin {
        let plane = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.kh {
            let (y0, y1) = valid_range(g.oh, g.h, ky, g.stride, g.padding);
            for kx in 0..g.kw {
                let (x0, x1) = valid_range(g.ow, g.w, kx, g.stride, g.padding);
                let row = (c * g.kh + ky) * g.kw + kx;
                let src = &cols[row * px..(row + 1) * px];
                for oy in y0..y1 {
                    let iy = oy * g.stride + ky - g.padding;
                    let dst = &mut plane[iy * g.w..(iy + 1) * g.w];
                    for ox in x0..x1 {
                        dst[ox * g.stride + kx - g.padding] += src[oy * g.ow + ox];
                    }
                }
            }
        }
    }
}

fn is_pointwise(g: &Geometry) -> bool {
    g.kh == 1 && g.kw == 1 && g.stride == 1 && g.padding == 0
}

fn geometry(x: &[usize], w: &[usize], stride: usize, padding: usize) -> Geometry {
    Geometry {
        cin: x[1],
        h: x[2],
        w: x[3],
        kh: w[2],
        kw: w[3],
        stride,
        padding,
        oh: conv_out_extent(x[2], w[2], stride, padding).unwrap(),
        ow: conv_out_extent(x[3], w[3], stride, padding).unwrap(),
    }
}

fn validate(
    x: &[usize],
    w: &[usize],
    bias: Option<&[usize]>,
    stride: usize,
    padding: usize,
) -> Result<()> {
    if x.len() != 4 {
        return Err(Error::shape(
            "conv2d",
            format!(
                "input rank {} (shape {x:?}), expected [N, Cin, H, W]",
                x.len()
            ),
        ));
    }
    if w.len() != 4 {
        return Err(Error::shape(
            "conv2d",
            format!(
                "weight rank {} (shape {w:?}), expected [Cout, Cin, kh, kw]",
                w.len()
            ),
        ));
    }
    if w[1] != x[1] {
        return Err(Error::shape(
            "conv2d",
            format!(
                "input channels: input has {}, weight expects {}",
                x[1], w[1]
            ),
        ));
    }
    if w[2].is_multiple_of(2) || w[3].is_multiple_of(2) {
        return Err(Error::InvalidArgument(format!(
            "conv2d kernel extents must be odd, got {}x{}",
            w[2], w[3]
        )));
    }
    if stride == 0 {
        return Err(Error::InvalidArgument("conv2d stride must be >= 1".into()));
    }
    if let Some(b) = bias {
        if b != [w[0]] {
            return Err(Error::shape(
                "conv2d",
                format!("bias shape {b:?}, expected [{}] (output channels)", w[0]),
            ));
        }
    }
    for (axis, size, k) in [("height", x[2], w[2]), ("width", x[3], w[3])] {
        if size + 2 * padding < k {
            return Err(Error::NonIntegerExtent {
                op: "conv2d",
                axis,
                detail: format!(
                    "padded extent {} is smaller than kernel {k}",
                    size + 2 * padding
                ),
            });
        }
    }
    Ok(())
}

pub(crate) fn conv2d_forward(
    x: &Tensor,
    w: &Tensor,
    bias: Option<&Tensor>,
    stride: usize,
    padding: usize,
) -> Tensor {
    let g = geometry(x.shape(), w.shape(), stride, padding);
    let n = x.shape()[0];
    let cout = w.shape()[0];
    let px = g.out_px();
    let in_plane = g.cin * g.h * g.w;
    let mut out = vec![0.0; n * cout * px];
    let mut cols = if is_pointwise(&g) {
        Vec::new()
    } else {
        vec![0.0; g.patch() * px]
    };
    for b in 0..n {
        let xb = &x.data()[b * in_plane..(b + 1) * in_plane];
        let ob = &mut out[b * cout * px..(b + 1) * cout * px];
        if let Some(bias) = bias {
            for (co, row) in ob.chunks_mut(px).enumerate() {
                row.fill(bias.data()[co]);
            }
        }
        let beta = if bias.is_some() { 1.0 } else { 0.0 };
        if is_pointwise(&g) {
            gemm(cout, g.patch(), px, w.data(), false, xb, false, beta, ob);
        } else {
            im2col(xb, &g, &mut cols);
            gemm(cout, g.patch(), px, w.data(), false, &cols, false, beta, ob);
        }
    }
    Tensor::from_parts(vec![n, cout, g.oh, g.ow], out)
}

/// Gradients for input, weight and bias. Input/weight gradients are only
/// computed when requested.
pub(crate) fn conv2d_backward(
    x: &Tensor,
    w: &Tensor,
    gout: &Tensor,
    stride: usize,
    padding: usize,
    (need_x, need_w): (bool, bool),
) -> (Option<Tensor>, Option<Tensor>, Tensor) {
    let g = geometry(x.shape(), w.shape(), stride, padding);
    let n = x.shape()[0];
    let cout = w.shape()[0];
    let px = g.out_px();
    let in_plane = g.cin * g.h * g.w;
    let pointwise = is_pointwise(&g);

    let mut gb = vec![0.0; cout];
    for b in 0..n {
        #[allow(clippy::needless_range_loop)]
        for co in 0..cout {
            let off = (b * cout + co) * px;
            gb[co] += gout.data()[off..off + px].iter().sum::<f64>();
        }
    }

    let mut gw = need_w.then(|| vec![0.0; w.numel()]);
    let mut gx = need_x.then(|| vec![0.0; x.numel()]);
    let mut cols = vec![0.0; if pointwise { 0 } else { g.patch() * px }];
    let mut dcols = vec![
        0.0;
        if need_x && !pointwise {
            g.patch() * px
        } else {
            0
        }
    ];
    for b in 0..n {
        let xb = &x.data()[b * in_plane..(b + 1) * in_plane];
        let gb_out = &gout.data()[b * cout * px..(b + 1) * cout * px];
        if let Some(gw) = gw.as_mut() {
            let patches: &[f64] = if pointwise {
                xb
            } else {
                im2col(xb, &g, &mut cols);
                &cols
            };
            // gw[cout, patch] += gout[cout, px] * patches[patch, px]^T
            gemm(cout, px, g.patch(), gb_out, false, patches, true, 1.0, gw);
        }
        if let Some(gx) = gx.as_mut() {
            let dst = &mut gx[b * in_plane..(b + 1) * in_plane];
            if pointwise {
                gemm(g.patch(), cout, px, w.data(), true, gb_out, false, 1.0, dst);
            } else {
                gemm(
                    g.patch(),
                    cout,
                    px,
                    w.data(),
                    true,
                    gb_out,
                    false,
                    0.0,
                    &mut dcols,
                );
                col2im(&dcols, &g, dst);
            }
        }
    }
    (
        gx.map(|d| Tensor::from_parts(x.shape().to_vec(), d)),
        gw.map(|d| Tensor::from_parts(w.shape().to_vec(), d)),
        Tensor::from_parts(vec![cout], gb),
    )
}

impl Tape {
    /// Cross-correlation of `x: [N, Cin, H, W]` with `weight: [Cout, Cin, kh, kw]`.
    ///
    /// Output extents are `floor((H + 2p - kh) / stride) + 1`.
    pub fn conv2d(
        &mut self,
        x: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        self.check(x)?;
        self.check(weight)?;
        if let Some(b) = bias {
            self.check(b)?;
        }
        validate(
            self.shape(x),
            self.shape(weight),
            bias.map(|b| self.shape(b)),
            stride,
            padding,
        )?;
        let out = conv2d_forward(
            self.value(x),
            self.value(weight),
            bias.map(|b| self.value(b)),
            stride,
            padding,
        );
        self.push(
            "conv2d",
            out,
            Op::Conv2d {
                x,
                weight,
                bias,
                stride,
                padding,
            },
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lcg(seed: u64) -> impl FnMut() -> f64 {
        let mut s = seed;
        move || {
            s = s
                .wrapping_mul(6364136223846793005)
                .wrapping_add(1442695040888963407);
            ((s >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
        }
    }

    /// Direct six-loop reference (batch, out channel, out y, out x, in channel, kernel).
    fn reference(x: &Tensor, w: &Tensor, b: &Tensor, stride: usize, pad: usize) -> Tensor {
        let (n, cin, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        let (cout, kh, kw) = (w.shape()[0], w.shape()[2], w.shape()[3]);
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (wd + 2 * pad - kw) / stride + 1;
        let mut out = Tensor::zeros(&[n, cout, oh, ow]);
        for bi in 0..n {
            for co in 0..cout {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = b.data()[co];
                        for ci in 0..cin {
                            for ky in 0..kh {
                                for kx in 0..kw {
                                    let iy = (oy * stride + ky) as isize - pad as isize;
                                    let ix = (ox * stride + kx) as isize - pad as isize;
                                    if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd
                                    {
                                        acc += w.at(&[co, ci, ky, kx])
                                            * x.at(&[bi, ci, iy as usize, ix as usize]);
                                    }
                                }
                            }
                        }
                        out.set(&[bi, co, oy, ox], acc);
                    }
                }
            }
        }
        out
    }

    fn run(x: &Tensor, w: &Tensor, b: &Tensor, stride: usize, pad: usize) -> Result<Tensor> {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let wv = tape.constant(w.clone());
        let bv = tape.constant(b.clone());
        let y = tape.conv2d(xv, wv, Some(bv), stride, pad)?;
        Ok(tape.value(y).clone())
    }

    #[test]
    fn identity_pointwise_kernel() {
        let mut r = lcg(1);
        let x = Tensor::from_fn(&[2, 3, 4, 5], |_| r());
        let w = Tensor::from_fn(&[3, 3, 1, 1], |i| if i / 3 == i % 3 { 1.0 } else { 0.0 });
        let y = run(&x, &w, &Tensor::zeros(&[3]), 1, 0).unwrap();
        assert!(y.bit_eq(&x));
    }

    #[test]
    fn all_ones_kernel_counts_neighbours() {
        let x = Tensor::ones(&[1, 1, 4, 4]);
        let w = Tensor::ones(&[1, 1, 3, 3]);
        let y = run(&x, &w, &Tensor::zeros(&[1]), 1, 1).unwrap();
        assert_eq!(y.at(&[0, 0, 0, 0]), 4.0);
        assert_eq!(y.at(&[0, 0, 3, 3]), 4.0);
        assert_eq!(y.at(&[0, 0, 0, 1]), 6.0);
        assert_eq!(y.at(&[0, 0, 1, 2]), 9.0);
    }

    #[test]
    fn matches_nested_loop_reference() {
        let mut r = lcg(7);
        let cases = [
            ([1, 2, 5, 5], [3, 2, 3, 3], 1, 1),
            ([2, 3, 6, 7], [4, 3, 3, 3], 2, 1),
            ([1, 4, 8, 8], [2, 4, 1, 1], 1, 0),
            ([1, 2, 7, 5], [2, 2, 5, 3], 1, 2),
            ([2, 2, 9, 9], [3, 2, 3, 3], 3, 0),
        ];
        for (xs, ws, stride, pad) in cases {
            let x = Tensor::from_fn(&xs, |_| r());
            let w = Tensor::from_fn(&ws, |_| r());
            let b = Tensor::from_fn(&[ws[0]], |_| r());
            let got = run(&x, &w, &b, stride, pad).unwrap();
            let want = reference(&x, &w, &b, stride, pad);
            assert_eq!(got.shape(), want.shape());
            assert!(got.max_abs_diff(&want) <= 1e-12, "{xs:?} {ws:?}");
        }
    }

    #[test]
    fn stride_two_floors_like_standard_frameworks() {
        let y = run(
            &Tensor::ones(&[1, 1, 16, 16]),
            &Tensor::ones(&[1, 1, 3, 3]),
            &Tensor::zeros(&[1]),
            2,
            1,
        )
        .unwrap();
        assert_eq!(y.shape(), &[1, 1, 8, 8]);
    }

    #[test]
    fn shape_errors_name_the_dimension() {
        let err = run(
            &Tensor::ones(&[1, 2, 4, 4]),
            &Tensor::ones(&[1, 3, 3, 3]),
            &Tensor::zeros(&[1]),
            1,
            1,
        )
        .unwrap_err();
        assert!(err.to_string().contains("input channels"), "{err}");

        let err = run(
            &Tensor::ones(&[1, 1, 2, 2]),
            &Tensor::ones(&[1, 1, 5, 5]),
            &Tensor::zeros(&[1]),
            1,
            0,
        )
        .unwrap_err();
        assert!(matches!(
            err,
            Error::NonIntegerExtent { axis: "height", .. }
        ));

        assert!(run(
            &Tensor::ones(&[1, 1, 4, 4]),
            &Tensor::ones(&[1, 1, 2, 2]),
            &Tensor::zeros(&[1]),
            1,
            0
        )
        .is_err());
    }
}
