//! Per-channel normalization with batch statistics.

use crate::error::{Error, Result};
use crate::tape::{Op, Tape, Var};
use crate::tensor::Tensor;

use super::elementwise::index_map;

pub const DEFAULT_EPS: f64 = 1e-5;

fn channel_map(shape: &[usize]) -> (Vec<usize>, usize) {
    let mut reduced = vec![1; shape.len()];
    reduced[1] = shape[1];
    let map = index_map(shape, &reduced);
    // map[i] is the flat index into [1, C, 1, ...], i.e. the channel.
    (map, shape.iter().product::<usize>() / shape[1])
}

pub(crate) fn channel_norm_backward(
    xhat: &Tensor,
    inv_std: &[f64],
    gamma: &Tensor,
    g: &Tensor,
) -> (Tensor, Tensor, Tensor) {
    let c = inv_std.len();
    let (map, m) = channel_map(xhat.shape());
    let mut sum_g = vec![0.0; c];
    let mut sum_gx = vec![0.0; c];
    for ((&ch, gv), xv) in map.iter().zip(g.data()).zip(xhat.data()) {
        sum_g[ch] += gv;
        sum_gx[ch] += gv * xv;
    }
    let m_f = m as f64;
    let gd = gamma.data();
    let gx = map
        .iter()
        .zip(g.data())
        .zip(xhat.data())
        .map(|((&ch, gv), xv)| {
            gd[ch] * inv_std[ch] / m_f * (m_f * gv - sum_g[ch] - xv * sum_gx[ch])
        })
        .collect();
    (
        Tensor::from_parts(xhat.shape().to_vec(), gx),
        Tensor::from_parts(vec![c], sum_gx),
        Tensor::from_parts(vec![c], sum_g),
    )
}

impl Tape {
    /// Standardizes each channel (axis 1) with statistics over every other
    /// axis, then applies `gamma * x_hat + beta`. Works on rank-4 maps and
    /// rank-5 scale stacks alike.
    pub fn channel_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        self.check(x)?;
        self.check(gamma)?;
        self.check(beta)?;
        // Also rejects NaN.
        #[allow(clippy::neg_cmp_op_on_partial_ord)]
        if !(eps > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "channel_norm eps must be positive, got {eps}"
            )));
        }
        let shape = self.shape(x).to_vec();
        if shape.len() < 2 {
            return Err(Error::shape("channel_norm", "rank below 2"));
        }
        let c = shape[1];
        for (name, v) in [("gamma", gamma), ("beta", beta)] {
            if self.shape(v) != [c] {
                return Err(Error::shape(
                    "channel_norm",
                    format!("{name} has shape {:?}, expected [{c}]", self.shape(v)),
                ));
            }
        }
        let (map, m) = channel_map(&shape);
        if m < 2 {
            return Err(Error::InvalidArgument(format!(
                "channel_norm needs at least 2 samples per channel, got {m} for shape {shape:?}"
            )));
        }
        let xd = self.value(x).data();
        let mut mean = vec![0.0; c];
        for (&ch, v) in map.iter().zip(xd) {
            mean[ch] += v;
        }
        mean.iter_mut().for_each(|v| *v /= m as f64);
        let mut var = vec![0.0; c];
        for (&ch, v) in map.iter().zip(xd) {
            let d = v - mean[ch];
            var[ch] += d * d;
        }
        let inv_std: Vec<f64> = var
            .iter()
            .map(|v| 1.0 / (v / m as f64 + eps).sqrt())
            .collect();
        let xhat_data: Vec<f64> = map
            .iter()
            .zip(xd)
            .map(|(&ch, v)| (v - mean[ch]) * inv_std[ch])
            .collect();
        let (gd, bd) = (self.value(gamma).data(), self.value(beta).data());
        let out_data = map
            .iter()
            .zip(&xhat_data)
            .map(|(&ch, xh)| gd[ch] * xh + bd[ch])
            .collect();
        let out = Tensor::from_parts(shape.clone(), out_data);
        let xhat = Tensor::from_parts(shape, xhat_data);
        self.push(
            "channel_norm",
            out,
            Op::ChannelNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
        )
    }
}
