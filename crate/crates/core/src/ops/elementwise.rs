//! Broadcasting arithmetic and pointwise activations.

use crate::error::{Error, Result};
use crate::tape::{Op, Tape, Var};
use crate::tensor::{strides_of, Tensor};

/// Right-aligned broadcast of two shapes, numpy style.
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank {
            a[i + a.len() - rank]
        } else {
            1
        };
        let db = if i + b.len() >= rank {
            b[i + b.len() - rank]
        } else {
            1
        };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// For each flat index of `out`, the flat index of the element of `inp` it
/// reads under right-aligned broadcasting.
pub(crate) fn index_map(out: &[usize], inp: &[usize]) -> Vec<usize> {
    let rank = out.len();
    debug_assert!(inp.len() <= rank);
    if inp.iter().product::<usize>() == out.iter().product::<usize>() {
        return (0..out.iter().product()).collect();
    }
    let off = rank - inp.len();
    let raw = strides_of(inp);
    let mut strides = vec![0; rank];
    for (i, &e) in inp.iter().enumerate() {
        if e != 1 {
            strides[off + i] = raw[i];
        }
    }
    let n: usize = out.iter().product();
    let mut map = Vec::with_capacity(n);
    let mut idx = vec![0; rank];
    let mut cur = 0;
    for _ in 0..n {
        map.push(cur);
        for d in (0..rank).rev() {
            idx[d] += 1;
            cur += strides[d];
            if idx[d] < out[d] {
                break;
            }
            cur -= strides[d] * idx[d];
            idx[d] = 0;
        }
    }
    map
}

/// Sums `g` down to `shape`, undoing a broadcast.
pub(crate) fn reduce_to(g: &Tensor, shape: &[usize]) -> Tensor {
    if g.shape() == shape {
        return g.clone();
    }
    let map = index_map(g.shape(), shape);
    let mut out = Tensor::zeros(shape);
    let d = out.data_mut();
    for (&o, v) in map.iter().zip(g.data()) {
        d[o] += v;
    }
    out
}

fn expand(t: &Tensor, shape: &[usize]) -> Tensor {
    if t.shape() == shape {
        return t.clone();
    }
    let src = t.data();
    let data = index_map(shape, t.shape())
        .into_iter()
        .map(|i| src[i])
        .collect();
    Tensor::from_parts(shape.to_vec(), data)
}

pub(crate) fn mul_backward(a: &Tensor, b: &Tensor, g: &Tensor) -> (Tensor, Tensor) {
    let shape = g.shape();
    let ae = expand(a, shape);
    let be = expand(b, shape);
    let ga: Vec<f64> = g.data().iter().zip(be.data()).map(|(x, y)| x * y).collect();
    let gb: Vec<f64> = g.data().iter().zip(ae.data()).map(|(x, y)| x * y).collect();
    (
        reduce_to(&Tensor::from_parts(shape.to_vec(), ga), a.shape()),
        reduce_to(&Tensor::from_parts(shape.to_vec(), gb), b.shape()),
    )
}

fn binary(op: &'static str, a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
    if a.shape() == b.shape() {
        let data = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        return Ok(Tensor::from_parts(a.shape().to_vec(), data));
    }
    let shape = broadcast_shape(a.shape(), b.shape()).ok_or_else(|| {
        Error::shape(
            op,
            format!("{:?} and {:?} do not broadcast", a.shape(), b.shape()),
        )
    })?;
    let (ad, bd) = (a.data(), b.data());
    let data = index_map(&shape, a.shape())
        .into_iter()
        .zip(index_map(&shape, b.shape()))
        .map(|(i, j)| f(ad[i], bd[j]))
        .collect();
    Ok(Tensor::from_parts(shape, data))
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Tape {
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let out = binary("add", self.value(a), self.value(b), |x, y| x + y)?;
        self.push("add", out, Op::Add { a, b })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let out = binary("sub", self.value(a), self.value(b), |x, y| x - y)?;
        self.push("sub", out, Op::Sub { a, b })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let out = binary("mul", self.value(a), self.value(b), |x, y| x * y)?;
        self.push("mul", out, Op::Mul { a, b })
    }

    /// Multiplies every element by a fixed scalar.
    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        self.check(x)?;
        let out = self.value(x).map(|v| v * factor);
        self.push("scale", out, Op::Scale { x, factor })
    }

    /// Adds a fixed scalar to every element.
    pub fn offset(&mut self, x: Var, value: f64) -> Result<Var> {
        self.check(x)?;
        let out = self.value(x).map(|v| v + value);
        self.push("offset", out, Op::Offset { x })
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let out = self.value(x).map(sigmoid);
        self.push("sigmoid", out, Op::Sigmoid { x })
    }

    /// `max(x, 0)`; the backward pass uses subgradient 0 at 0.
    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let out = self.value(x).map(|v| v.max(0.0));
        self.push("relu", out, Op::Relu { x })
    }

    /// Convex blend `w * a + (1 - w) * b` with `w` broadcast over `a` and `b`.
    pub fn blend(&mut self, w: Var, a: Var, b: Var) -> Result<Var> {
        let wa = self.mul(w, a)?;
        let one_minus = self.scale(w, -1.0)?;
        let one_minus = self.offset(one_minus, 1.0)?;
        let wb = self.mul(one_minus, b)?;
        self.add(wa, wb)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn broadcast_shapes() {
        assert_eq!(broadcast_shape(&[2, 1, 4], &[3, 1]), Some(vec![2, 3, 4]));
        assert_eq!(broadcast_shape(&[1], &[2, 5]), Some(vec![2, 5]));
        assert_eq!(broadcast_shape(&[2, 3], &[4, 3]), None);
    }

    #[test]
    fn index_map_matches_manual_expansion() {
        let map = index_map(&[2, 3], &[2, 1]);
        assert_eq!(map, vec![0, 0, 0, 1, 1, 1]);
        let map = index_map(&[2, 3], &[3]);
        assert_eq!(map, vec![0, 1, 2, 0, 1, 2]);
    }

    #[test]
    fn activations_at_reference_points() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(&[3], vec![0.0, -1.0, 2.0]).unwrap());
        let s = tape.sigmoid(x).unwrap();
        assert_eq!(tape.value(s).data()[0], 0.5);
        let r = tape.relu(x).unwrap();
        assert_eq!(tape.value(r).data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn sigmoid_saturates_exactly() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(&[2], vec![1e3, -1e3]).unwrap());
        let s = tape.sigmoid(x).unwrap();
        assert_eq!(tape.value(s).data(), &[1.0, 0.0]);
    }

    #[test]
    fn incompatible_shapes_error() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::ones(&[2, 3]));
        let b = tape.constant(Tensor::ones(&[4, 3]));
        assert!(matches!(
            tape.add(a, b),
            Err(Error::ShapeMismatch { op: "add", .. })
        ));
    }

    #[test]
    fn broadcast_mul_reduces_gradient() {
        let mut tape = Tape::new();
        let w = tape.input(Tensor::new(&[2, 1], vec![2.0, 3.0]).unwrap());
        let x = tape.input(Tensor::from_fn(&[2, 3], |i| i as f64));
        let y = tape.mul(w, x).unwrap();
        let loss = tape.sum(y).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(w).unwrap().data(), &[3.0, 12.0]);
        assert_eq!(
            tape.grad(x).unwrap().data(),
            &[2.0, 2.0, 2.0, 3.0, 3.0, 3.0]
        );
    }

    #[test]
    fn blend_endpoints_are_exact() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::from_fn(&[1, 2, 2, 2], |i| (i as f64).cos()));
        let b = tape.constant(Tensor::from_fn(&[1, 2, 2, 2], |i| (i as f64).sin()));
        let one = tape.constant(Tensor::ones(&[1, 1, 1, 1]));
        let zero = tape.constant(Tensor::zeros(&[1, 1, 1, 1]));
        let ba = tape.blend(one, a, b).unwrap();
        let bb = tape.blend(zero, a, b).unwrap();
        assert!(tape.value(ba).bit_eq(tape.value(a)));
        assert!(tape.value(bb).bit_eq(tape.value(b)));
    }
}
