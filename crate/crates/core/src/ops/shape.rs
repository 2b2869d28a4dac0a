//! Data movement: concatenation, reshaping, broadcasting and gathers.
//! None of these perform arithmetic on values.

use crate::error::{Error, Result};
use crate::tape::{Op, Tape, Var};
use crate::tensor::Tensor;

use super::elementwise::{broadcast_shape, index_map};

pub(crate) fn concat_backward(shapes: &[&[usize]], axis: usize, g: &Tensor) -> Vec<Tensor> {
    let outer: usize = g.shape()[..axis].iter().product();
    let inner: usize = g.shape()[axis + 1..].iter().product();
    let total = g.shape()[axis] * inner;
    let mut start = 0;
    shapes
        .iter()
        .map(|s| {
            let width = s[axis] * inner;
            let mut data = Vec::with_capacity(outer * width);
            for o in 0..outer {
                let base = o * total + start;
                data.extend_from_slice(&g.data()[base..base + width]);
            }
            start += width;
            Tensor::from_parts(s.to_vec(), data)
        })
        .collect()
}

impl Tape {
    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = *inputs
            .first()
            .ok_or_else(|| Error::InvalidArgument("concat of zero tensors".into()))?;
        for &v in inputs {
            self.check(v)?;
        }
        let base = self.shape(first).to_vec();
        if axis >= base.len() {
            return Err(Error::InvalidArgument(format!(
                "concat axis {axis} out of range for rank {}",
                base.len()
            )));
        }
        let mut out_shape = base.clone();
        out_shape[axis] = 0;
        for &v in inputs {
            let s = self.shape(v);
            if s.len() != base.len() {
                return Err(Error::shape(
                    "concat",
                    format!("rank {} vs {}", s.len(), base.len()),
                ));
            }
            for (d, (&e, &b)) in s.iter().zip(&base).enumerate() {
                if d != axis && e != b {
                    return Err(Error::shape(
                        "concat",
                        format!("dimension {d} is {e}, expected {b}"),
                    ));
                }
            }
            out_shape[axis] += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(out_shape.iter().product());
        for o in 0..outer {
            for &v in inputs {
                let width = self.shape(v)[axis] * inner;
                data.extend_from_slice(&self.value(v).data()[o * width..(o + 1) * width]);
            }
        }
        let out = Tensor::from_parts(out_shape, data);
        self.push(
            "concat",
            out,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
        )
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        self.check(x)?;
        let out = self.value(x).reshaped(shape)?;
        self.push("reshape", out, Op::Reshape { x })
    }

    /// Broadcasts `x` to `shape` (right-aligned); the backward pass sums.
    pub fn broadcast_to(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        self.check(x)?;
        let src = self.shape(x).to_vec();
        if broadcast_shape(&src, shape).as_deref() != Some(shape) {
            return Err(Error::shape(
                "broadcast",
                format!("{src:?} cannot broadcast to {shape:?}"),
            ));
        }
        let d = self.value(x).data();
        let data = index_map(shape, &src).into_iter().map(|i| d[i]).collect();
        let out = Tensor::from_parts(shape.to_vec(), data);
        self.push("broadcast", out, Op::Broadcast { x })
    }

    /// Gathers `out[i] = x[index[i]]` by flat index. `kind` names the
    /// operator for cost accounting.
    pub fn take(
        &mut self,
        x: Var,
        index: Vec<usize>,
        shape: &[usize],
        kind: &'static str,
    ) -> Result<Var> {
        self.take_blocks(x, index, 1, shape, kind)
    }

    /// Gathers `block` contiguous elements starting at each index.
    pub fn take_blocks(
        &mut self,
        x: Var,
        index: Vec<usize>,
        block: usize,
        shape: &[usize],
        kind: &'static str,
    ) -> Result<Var> {
        self.check(x)?;
        let src = self.value(x);
        if block == 0 || shape.iter().product::<usize>() != index.len() * block {
            return Err(Error::shape(
                kind,
                format!(
                    "{} blocks of {block} for output shape {shape:?}",
                    index.len()
                ),
            ));
        }
        if let Some(&bad) = index.iter().find(|&&i| i + block > src.numel()) {
            return Err(Error::InvalidArgument(format!(
                "{kind}: block at {bad} out of range for {} elements",
                src.numel()
            )));
        }
        let mut data = Vec::with_capacity(index.len() * block);
        for &i in &index {
            data.extend_from_slice(&src.data()[i..i + block]);
        }
        let out = Tensor::from_parts(shape.to_vec(), data);
        self.push(
            kind,
            out,
            Op::Take {
                x,
                index,
                block,
                kind,
            },
        )
    }

    /// Slice `start..start + len` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        self.check(x)?;
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(Error::InvalidArgument(format!(
                "narrow {start}..{} on axis {axis} of {shape:?}",
                start + len
            )));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let mut index = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * shape[axis] * inner + start * inner;
            index.extend(base..base + len * inner);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        self.take(x, index, &out_shape, "narrow")
    }

    /// Sum of all elements, as a one-element tensor.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let out = Tensor::scalar(self.value(x).sum());
        self.push("sum", out, Op::Sum { x })
    }

    /// Inner product with a constant tensor of the same shape.
    pub fn project(&mut self, x: Var, direction: &Tensor) -> Result<Var> {
        if self.shape(x) != direction.shape() {
            return Err(Error::shape(
                "project",
                format!("{:?} vs {:?}", self.shape(x), direction.shape()),
            ));
        }
        let d = self.constant(direction.clone());
        let p = self.mul(x, d)?;
        self.sum(p)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn concat_on_channel_axis() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[1, 2, 4, 4]));
        let b = tape.constant(Tensor::ones(&[1, 3, 4, 4]));
        let c = tape.concat(&[a, b], 1).unwrap();
        assert_eq!(tape.shape(c), &[1, 5, 4, 4]);
        assert_eq!(tape.value(c).at(&[0, 1, 3, 3]), 0.0);
        assert_eq!(tape.value(c).at(&[0, 2, 0, 0]), 1.0);
    }

    #[test]
    fn concat_rejects_mismatched_extents() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[1, 2, 4, 4]));
        let b = tape.constant(Tensor::zeros(&[1, 3, 4, 5]));
        let err = tape.concat(&[a, b], 1).unwrap_err();
        assert!(err.to_string().contains("dimension 3"), "{err}");
    }

    #[test]
    fn concat_backward_splits() {
        let mut tape = Tape::new();
        let a = tape.input(Tensor::zeros(&[2, 1, 3]));
        let b = tape.input(Tensor::zeros(&[2, 2, 3]));
        let c = tape.concat(&[a, b], 1).unwrap();
        let w = Tensor::from_fn(&[2, 3, 3], |i| i as f64);
        let loss = tape.project(c, &w).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(a).unwrap().data(), &[0., 1., 2., 9., 10., 11.]);
        assert_eq!(tape.grad(b).unwrap().data()[..3], [3., 4., 5.]);
    }

    #[test]
    fn narrow_selects_slice() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_fn(&[2, 4, 3], |i| i as f64));
        let y = tape.narrow(x, 1, 1, 2).unwrap();
        assert_eq!(tape.shape(y), &[2, 2, 3]);
        assert_eq!(tape.value(y).at(&[1, 0, 0]), 15.0);
    }

    #[test]
    fn broadcast_to_and_back() {
        let mut tape = Tape::new();
        let x = tape.input(Tensor::new(&[1, 2, 1], vec![1.0, 2.0]).unwrap());
        let y = tape.broadcast_to(x, &[3, 2, 4]).unwrap();
        assert_eq!(tape.value(y).at(&[2, 1, 3]), 2.0);
        let loss = tape.sum(y).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[12.0, 12.0]);
        assert!(tape.broadcast_to(x, &[3, 3, 4]).is_err());
    }
}
