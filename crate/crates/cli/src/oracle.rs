//! Brute-force reference implementations used by the checks.
//!
//! Everything here is written with plain index loops and
//! shares no code with the tape kernels it is compared against.

#![allow(clippy::needless_range_loop)]

use rcnet_core::config::NeckConfig;
use rcnet_core::Tensor;

pub fn conv(x: &Tensor, w: &Tensor, b: &Tensor, stride: usize, pad: usize) -> Tensor {
    let (n, ci, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (co, kh, kw) = (w.shape()[0], w.shape()[2], w.shape()[3]);
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (wd + 2 * pad - kw) / stride + 1;
    let (xd, wt) = (x.data(), w.data());
    let mut out = vec![0.0; n * co * oh * ow];
    for s in 0..n {
        for o in 0..co {
            for y in 0..oh {
                for xx in 0..ow {
                    let mut acc = b.data()[o];
                    for c in 0..ci {
                        for ky in 0..kh {
                            let iy = (y * stride + ky) as isize - pad as isize;
                            if iy < 0 || iy as usize >= h {
                                continue;
                            }
                            for kx in 0..kw {
                                let ix = (xx * stride + kx) as isize - pad as isize;
                                if ix < 0 || ix as usize >= wd {
                                    continue;
                                }
                                let xi = ((s * ci + c) * h + iy as usize) * wd + ix as usize;
                                acc += xd[xi] * wt[((o * ci + c) * kh + ky) * kw + kx];
                            }
                        }
                    }
                    out[((s * co + o) * oh + y) * ow + xx] = acc;
                }
            }
        }
    }
    Tensor::new(&[n, co, oh, ow], out).unwrap()
}

/// 2x2, stride 2.
pub fn maxpool(x: &Tensor) -> Tensor {
    let (n, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let mut out = Tensor::zeros(&[n, c, h / 2, w / 2]);
    for s in 0..n {
        for ch in 0..c {
            for i in 0..h / 2 {
                for j in 0..w / 2 {
                    let mut m = f64::NEG_INFINITY;
                    for dy in 0..2 {
                        for dx in 0..2 {
                            m = m.max(x.at(&[s, ch, 2 * i + dy, 2 * j + dx]));
                        }
                    }
                    out.set(&[s, ch, i, j], m);
                }
            }
        }
    }
    out
}

/// Bilinear x2 with half-pixel centers, clamped at the border.
pub fn upsample(x: &Tensor) -> Tensor {
    let (n, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let src = |o: usize, size: usize| {
        let s = ((o as f64 + 0.5) / 2.0 - 0.5).max(0.0);
        let i0 = (s.floor() as usize).min(size - 1);
        (i0, (i0 + 1).min(size - 1), s - i0 as f64)
    };
    let mut out = Tensor::zeros(&[n, c, 2 * h, 2 * w]);
    for s in 0..n {
        for ch in 0..c {
            for oy in 0..2 * h {
                let (y0, y1, ly) = src(oy, h);
                for ox in 0..2 * w {
                    let (x0, x1, lx) = src(ox, w);
                    let v = |i, j| x.at(&[s, ch, i, j]);
                    let top = (1.0 - lx) * v(y0, x0) + lx * v(y0, x1);
                    let bottom = (1.0 - lx) * v(y1, x0) + lx * v(y1, x1);
                    out.set(&[s, ch, oy, ox], (1.0 - ly) * top + ly * bottom);
                }
            }
        }
    }
    out
}

/// Resizes a level-`from` map to level `to` by repeated pooling or upsampling.
pub fn resize(x: &Tensor, from: usize, to: usize) -> Tensor {
    let mut y = x.clone();
    for _ in to..from {
        y = upsample(&y);
    }
    for _ in from..to {
        y = maxpool(&y);
    }
    y
}

/// Batch-statistics normalization over every axis except 1.
pub fn norm(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> Tensor {
    let c = x.shape()[1];
    let inner: usize = x.shape()[2..].iter().product();
    let outer = x.shape()[0];
    let mut out = x.clone();
    for ch in 0..c {
        let idx: Vec<usize> = (0..outer)
            .flat_map(|b| (0..inner).map(move |i| (b * c + ch) * inner + i))
            .collect();
        let m = idx.len() as f64;
        let mean = idx.iter().map(|&i| x.data()[i]).sum::<f64>() / m;
        let var = idx
            .iter()
            .map(|&i| (x.data()[i] - mean).powi(2))
            .sum::<f64>()
            / m;
        let sd = (var + eps).sqrt();
        for &i in &idx {
            out.data_mut()[i] = gamma.data()[ch] * (x.data()[i] - mean) / sd + beta.data()[ch];
        }
    }
    out
}

pub fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

/// Concatenation of two `[N, C, ...]` tensors along the channel axis.
pub fn concat_channels(a: &Tensor, b: &Tensor) -> Tensor {
    let n = a.shape()[0];
    let (ca, cb) = (a.shape()[1], b.shape()[1]);
    let inner: usize = a.shape()[2..].iter().product();
    let mut shape = a.shape().to_vec();
    shape[1] = ca + cb;
    let mut data = Vec::with_capacity(n * (ca + cb) * inner);
    for s in 0..n {
        data.extend_from_slice(&a.data()[s * ca * inner..(s + 1) * ca * inner]);
        data.extend_from_slice(&b.data()[s * cb * inner..(s + 1) * cb * inner]);
    }
    Tensor::new(&shape, data).unwrap()
}

/// `sigmoid(w . gap(concat(a, b)) + bias)` per sample.
pub fn dynamic_weight(a: &Tensor, b: &Tensor, w: &Tensor, bias: f64) -> Vec<f64> {
    let joint = concat_channels(a, b);
    let (n, c) = (joint.shape()[0], joint.shape()[1]);
    let hw = joint.shape()[2] * joint.shape()[3];
    (0..n)
        .map(|s| {
            let mut z = bias;
            for ch in 0..c {
                let start = (s * c + ch) * hw;
                let mean = joint.data()[start..start + hw].iter().sum::<f64>() / hw as f64;
                z += w.data()[ch] * mean;
            }
            sigmoid(z)
        })
        .collect()
}

/// `w[s] * a + (1 - w[s]) * b` per sample.
pub fn blend(w: &[f64], a: &Tensor, b: &Tensor) -> Tensor {
    let per = a.numel() / a.shape()[0];
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .enumerate()
        .map(|(i, (x, y))| {
            let ws = w[i / per];
            ws * x + (1.0 - ws) * y
        })
        .collect();
    Tensor::new(a.shape(), data).unwrap()
}

/// Feature-guided upsampling with explicit softmax. Returns `(guided, weight)`.
pub fn fgu(
    current: &Tensor,
    next: &Tensor,
    w: &Tensor,
    b: &Tensor,
    temperature: f64,
) -> (Tensor, Tensor) {
    let u = upsample(next);
    let d = current.shape()[1] as f64;
    let logits = conv(&concat_channels(current, &u), w, b, 1, 1);
    let (n, h, wd) = (u.shape()[0], u.shape()[2], u.shape()[3]);
    let hw = h * wd;
    let mut weight = Tensor::zeros(&[n, 1, h, wd]);
    for s in 0..n {
        let z: Vec<f64> = logits.data()[s * hw..(s + 1) * hw]
            .iter()
            .map(|v| v * temperature / d.sqrt())
            .collect();
        let top = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let total: f64 = z.iter().map(|v| (v - top).exp()).sum();
        for (i, v) in z.iter().enumerate() {
            weight.data_mut()[s * hw + i] = (v - top).exp() / total * hw as f64;
        }
    }
    let mut guided = u.clone();
    let c = u.shape()[1];
    for s in 0..n {
        for ch in 0..c {
            for i in 0..hw {
                guided.data_mut()[(s * c + ch) * hw + i] *= weight.data()[s * hw + i];
            }
        }
    }
    (guided, weight)
}

/// 1x1 conv applied to every scale slice of an `[N, C, n, h, w]` stack.
pub fn pointwise(x: &Tensor, w: &Tensor, b: &Tensor) -> Tensor {
    let s = x.shape();
    let (n, ci, sc, hw) = (s[0], s[1], s[2], s[3] * s[4]);
    let co = w.shape()[0];
    let mut out = Tensor::zeros(&[n, co, sc, s[3], s[4]]);
    for bi in 0..n {
        for o in 0..co {
            for k in 0..sc * hw {
                let mut acc = b.data()[o];
                for c in 0..ci {
                    acc += w.data()[o * ci + c] * x.data()[(bi * ci + c) * sc * hw + k];
                }
                out.data_mut()[(bi * co + o) * sc * hw + k] = acc;
            }
        }
    }
    out
}

/// Weight and bias of a `d -> d` 1x1 conv.
pub type Linear<'a> = (&'a Tensor, &'a Tensor);

fn linear(w: Linear, x: &[f64]) -> Vec<f64> {
    let d = x.len();
    (0..w.0.shape()[0])
        .map(|o| w.1.data()[o] + (0..d).map(|c| w.0.data()[o * d + c] * x[c]).sum::<f64>())
        .collect()
}

fn softmax_scaled(v: &[f64]) -> Vec<f64> {
    let top = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = v.iter().map(|x| (x - top).exp()).collect();
    let total: f64 = e.iter().sum();
    e.iter().map(|x| x / total * v.len() as f64).collect()
}

/// Scale-wise and spatial context branches, step by step on an `[N, d, n, h, w]` stack.
pub fn dual_context(y: &Tensor, scale: (Linear, Linear), spatial: (Linear, Linear)) -> Tensor {
    let s = y.shape();
    let (nb, d, n, hw) = (s[0], s[1], s[2], s[3] * s[4]);
    let at = |b: usize, c: usize, k: usize, p: usize| y.data()[((b * d + c) * n + k) * hw + p];
    let mut out = y.clone();
    for b in 0..nb {
        // Scale branch: per-scale descriptors, softmax over scales, mean over scales.
        let mut a = vec![vec![0.0; n]; d];
        for k in 0..n {
            let u: Vec<f64> = (0..d)
                .map(|c| (0..hw).map(|p| at(b, c, k, p)).sum::<f64>() / hw as f64)
                .collect();
            for (c, v) in linear(scale.0, &u).into_iter().enumerate() {
                a[c][k] = v;
            }
        }
        let a: Vec<Vec<f64>> = a.iter().map(|row| softmax_scaled(row)).collect();
        let mut out1 = vec![vec![0.0; hw]; d];
        for p in 0..hw {
            let z: Vec<f64> = (0..d)
                .map(|c| (0..n).map(|k| at(b, c, k, p) * a[c][k]).sum::<f64>() / n as f64)
                .collect();
            for (c, v) in linear(scale.1, &z).into_iter().enumerate() {
                out1[c][p] = v;
            }
        }

        // Spatial branch: mean over scales, softmax over positions, mean over positions.
        let mut m = vec![vec![0.0; hw]; d];
        for p in 0..hw {
            let u: Vec<f64> = (0..d)
                .map(|c| (0..n).map(|k| at(b, c, k, p)).sum::<f64>() / n as f64)
                .collect();
            for (c, v) in linear(spatial.0, &u).into_iter().enumerate() {
                m[c][p] = v;
            }
        }
        let a2: Vec<Vec<f64>> = m.iter().map(|row| softmax_scaled(row)).collect();
        let mut out2 = vec![vec![0.0; n]; d];
        for k in 0..n {
            let z: Vec<f64> = (0..d)
                .map(|c| (0..hw).map(|p| at(b, c, k, p) * a2[c][p]).sum::<f64>() / hw as f64)
                .collect();
            for (c, v) in linear(spatial.1, &z).into_iter().enumerate() {
                out2[c][k] = v;
            }
        }

        for c in 0..d {
            for k in 0..n {
                for p in 0..hw {
                    out.data_mut()[((b * d + c) * n + k) * hw + p] += out1[c][p] + out2[c][k];
                }
            }
        }
    }
    out
}

/// Rolls an `[N, C, n, h, w]` stack by `t` along the scale axis: `out[s] = x[s - t]`.
pub fn roll_scale(x: &Tensor, t: usize) -> Tensor {
    let s = x.shape();
    let (sc, hw) = (s[2], s[3] * s[4]);
    let mut out = x.clone();
    for nc in 0..s[0] * s[1] {
        for i in 0..sc {
            let src = (i + sc - t % sc) % sc;
            let (a, b) = ((nc * sc + i) * hw, (nc * sc + src) * hw);
            out.data_mut()[a..a + hw].copy_from_slice(&x.data()[b..b + hw]);
        }
    }
    out
}

/// `Y_i = sum_j W_j * P_{(i + j - 3) mod n}` for `j = 1..=5`, per channel,
/// written as a kernel-5 convolution along the scale axis with circulant padding.
pub fn circulant_scale_conv(x: &Tensor, taps: &[f64; 5]) -> Tensor {
    let s = x.shape();
    let (sc, hw) = (s[2] as isize, s[3] * s[4]);
    let mut out = Tensor::zeros(s);
    for nc in 0..s[0] * s[1] {
        for i in 0..sc {
            for k in 0..hw {
                let mut acc = 0.0;
                for (j, w) in taps.iter().enumerate() {
                    let src = (i + j as isize - 2).rem_euclid(sc) as usize;
                    acc += w * x.data()[(nc * sc as usize + src) * hw + k];
                }
                out.data_mut()[(nc * sc as usize + i as usize) * hw + k] = acc;
            }
        }
    }
    out
}

/// Closed-form parameter counts, derived from the layer inventory by hand.
pub mod params {
    use super::NeckConfig;

    pub fn conv(cin: usize, cout: usize, k: usize) -> usize {
        cout * cin * k * k + cout
    }

    pub fn stem(cfg: &NeckConfig) -> usize {
        let d = cfg.channels;
        let extra = cfg.stem_levels().count();
        if extra == 0 {
            return 0;
        }
        let top = *cfg.backbone_channels.last().unwrap();
        conv(top, d, 3) + (extra - 1) * conv(d, d, 3)
    }

    pub fn fpn(cfg: &NeckConfig) -> usize {
        let d = cfg.channels;
        let per: usize = cfg
            .backbone_channels
            .iter()
            .take(cfg.backbone_levels().count())
            .map(|&c| conv(c, d, 1) + conv(d, d, 3))
            .sum();
        per + stem(cfg)
    }

    pub fn revfp(cfg: &NeckConfig) -> usize {
        let d = cfg.channels;
        let n = cfg.n_levels();
        let laterals: usize = cfg
            .levels()
            .map(|l| conv(cfg.input_channels(l), d, 1))
            .sum();
        let fusion = conv(2 * d, 1, 1) + conv(d, d, 3) + 2 * d;
        let fgu = conv(2 * d, 1, 3) + 1;
        laterals + (n - 1) * (fgu + fusion) + (n - 1) * fusion + stem(cfg)
    }

    pub fn csn(cfg: &NeckConfig) -> usize {
        let d = cfg.channels;
        conv(d + d / cfg.shift_ratio, d, 1) + 2 * d + conv(d, d, 1) + 4 * conv(d, d, 1)
    }

    /// Multiply-accumulates of the FPN neck, stem included.
    pub fn fpn_macs(cfg: &NeckConfig) -> usize {
        let (d, n) = (cfg.channels, cfg.batch);
        let px = |l: usize| {
            let (h, w) = cfg.resolution(l);
            h * w
        };
        let mut total = 0;
        for (i, l) in cfg.backbone_levels().enumerate() {
            total += n * px(l) * d * cfg.backbone_channels[i];
            total += n * px(l) * d * d * 9;
        }
        for l in cfg.stem_levels() {
            let cin = if l == *cfg.stem_levels().start() {
                *cfg.backbone_channels.last().unwrap()
            } else {
                d
            };
            total += n * px(l) * d * cin * 9;
        }
        total
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conv_forced_values() {
        let x = Tensor::ones(&[1, 1, 4, 4]);
        let w = Tensor::ones(&[1, 1, 3, 3]);
        let y = conv(&x, &w, &Tensor::zeros(&[1]), 1, 1);
        assert_eq!(y.at(&[0, 0, 0, 0]), 4.0);
        assert_eq!(y.at(&[0, 0, 1, 1]), 9.0);
    }

    #[test]
    fn upsample_hand_values() {
        let x = Tensor::new(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let y = upsample(&x);
        // Corner clamps, first interior sample sits a quarter of the way in.
        assert_eq!(y.at(&[0, 0, 0, 0]), 1.0);
        assert_eq!(y.at(&[0, 0, 0, 1]), 1.25);
        assert_eq!(y.at(&[0, 0, 1, 1]), 1.25 + 0.5);
        assert_eq!(y.at(&[0, 0, 3, 3]), 4.0);
    }

    #[test]
    fn circulant_identity_and_roll() {
        let x = Tensor::from_fn(&[1, 2, 5, 1, 2], |i| i as f64);
        assert!(circulant_scale_conv(&x, &[0.0, 0.0, 1.0, 0.0, 0.0]).bit_eq(&x));
        // A single tap at j = 4 reads scale i + 1, a roll by -1.
        let y = circulant_scale_conv(&x, &[0.0, 0.0, 0.0, 1.0, 0.0]);
        assert!(y.bit_eq(&roll_scale(&x, 4)));
    }

    #[test]
    fn pointwise_conv_count() {
        assert_eq!(params::conv(4, 4, 1), 20);
    }
}
