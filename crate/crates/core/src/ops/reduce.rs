//! Axis reductions: means and softmax over an axis set.

use crate::error::{Error, Result};
use crate::tape::{Op, Tape, Var};
use crate::tensor::Tensor;

use super::elementwise::index_map;

/// Shape with every axis in `axes` collapsed to 1, plus the element-to-group
/// map and the group size.
fn groups(shape: &[usize], axes: &[usize]) -> Result<(Vec<usize>, Vec<usize>, usize)> {
    if axes.is_empty() {
        return Err(Error::InvalidArgument("empty axis set".into()));
    }
    let mut reduced = shape.to_vec();
    let mut count = 1;
    for &a in axes {
        if a >= shape.len() {
            return Err(Error::InvalidArgument(format!(
                "axis {a} out of range for rank {}",
                shape.len()
            )));
        }
        if reduced[a] == 1 && shape[a] != 1 {
            return Err(Error::InvalidArgument(format!("axis {a} repeated")));
        }
        count *= shape[a];
        reduced[a] = 1;
    }
    let map = index_map(shape, &reduced);
    Ok((reduced, map, count))
}

pub(crate) fn softmax_backward(y: &Tensor, map: &[usize], g: &Tensor) -> Tensor {
    let groups = map.iter().copied().max().map_or(0, |m| m + 1);
    let mut dot = vec![0.0; groups];
    for ((&o, yv), gv) in map.iter().zip(y.data()).zip(g.data()) {
        dot[o] += yv * gv;
    }
    let data = map
        .iter()
        .zip(y.data())
        .zip(g.data())
        .map(|((&o, yv), gv)| yv * (gv - dot[o]))
        .collect();
    Tensor::from_parts(y.shape().to_vec(), data)
}

impl Tape {
    /// Arithmetic mean over `axes`, keeping them as extent-1 dimensions.
    pub fn mean_axes(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        self.check(x)?;
        let (reduced, map, count) = groups(self.shape(x), axes)?;
        let mut out = Tensor::zeros(&reduced);
        {
            let d = out.data_mut();
            for (&o, v) in map.iter().zip(self.value(x).data()) {
                d[o] += v;
            }
            let inv = 1.0 / count as f64;
            d.iter_mut().for_each(|v| *v *= inv);
        }
        self.push("mean", out, Op::Mean { x, map, count })
    }

    /// Mean over the trailing two (spatial) axes: `[..., H, W] -> [..., 1, 1]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let r = self.shape(x).len();
        if r < 2 {
            return Err(Error::shape(
                "global_avg_pool",
                format!("rank {r} has no spatial axes"),
            ));
        }
        self.mean_axes(x, &[r - 2, r - 1])
    }

    /// Softmax normalized jointly over `axes`, with max subtraction.
    pub fn softmax(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        self.check(x)?;
        let (reduced, map, _) = groups(self.shape(x), axes)?;
        let n_groups: usize = reduced.iter().product();
        let xd = self.value(x).data();
        let mut max = vec![f64::NEG_INFINITY; n_groups];
        for (&o, &v) in map.iter().zip(xd) {
            if v > max[o] {
                max[o] = v;
            }
        }
        let mut data: Vec<f64> = map
            .iter()
            .zip(xd)
            .map(|(&o, &v)| (v - max[o]).exp())
            .collect();
        let mut sum = vec![0.0; n_groups];
        for (&o, &e) in map.iter().zip(&data) {
            sum[o] += e;
        }
        for (&o, e) in map.iter().zip(data.iter_mut()) {
            *e /= sum[o];
        }
        let out = Tensor::from_parts(self.shape(x).to_vec(), data);
        self.push("softmax", out, Op::Softmax { x, map })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gap_by_hand() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(&[1, 1, 2, 2], vec![0.0, 2.0, 4.0, 6.0]).unwrap());
        let m = tape.global_avg_pool(x).unwrap();
        assert_eq!(tape.shape(m), &[1, 1, 1, 1]);
        assert_eq!(tape.value(m).data(), &[3.0]);
    }

    #[test]
    fn gap_of_constant() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::full(&[2, 3, 5, 7], -1.25));
        let m = tape.global_avg_pool(x).unwrap();
        assert!(tape.value(m).data().iter().all(|&v| v == -1.25));
    }

    #[test]
    fn softmax_uniform_and_shift_invariant() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::full(&[2, 4], 3.0));
        let s = tape.softmax(x, &[1]).unwrap();
        assert!(tape.value(s).data().iter().all(|&v| v == 0.25));

        let raw = Tensor::from_fn(&[3, 5], |i| ((i * 7) % 11) as f64 * 0.3);
        let a = tape.constant(raw.clone());
        let b = tape.constant(raw.map(|v| v + 17.0));
        let sa = tape.softmax(a, &[0, 1]).unwrap();
        let sb = tape.softmax(b, &[0, 1]).unwrap();
        assert!(tape.value(sa).max_abs_diff(tape.value(sb)) < 1e-15);
        assert!((tape.value(sa).sum() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn rejects_bad_axes() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::ones(&[2, 3]));
        assert!(tape.softmax(x, &[]).is_err());
        assert!(tape.softmax(x, &[2]).is_err());
        assert!(tape.mean_axes(x, &[1, 1]).is_err());
    }
}
