//! Level-indexed feature pyramids.

use std::collections::BTreeMap;

use crate::config::NeckConfig;
use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Ordered map from pyramid level to a per-level value.
#[derive(Clone, Debug, PartialEq)]
pub struct Pyramid<T> {
    levels: BTreeMap<usize, T>,
}

/// A pyramid of `[batch, channels, H, W]` tensors, where each level halves
/// the spatial extents of the one below.
pub type FeaturePyramid = Pyramid<Tensor>;

impl<T> Default for Pyramid<T> {
    fn default() -> Self {
        Self {
            levels: BTreeMap::new(),
        }
    }
}

impl<T> Pyramid<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, level: usize, value: T) -> Option<T> {
        self.levels.insert(level, value)
    }

    pub fn get(&self, level: usize) -> Result<&T> {
        self.levels.get(&level).ok_or(Error::MissingLevel(level))
    }

    pub fn get_mut(&mut self, level: usize) -> Result<&mut T> {
        self.levels
            .get_mut(&level)
            .ok_or(Error::MissingLevel(level))
    }

    pub fn contains(&self, level: usize) -> bool {
        self.levels.contains_key(&level)
    }

    pub fn len(&self) -> usize {
        self.levels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.levels.is_empty()
    }

    pub fn levels(&self) -> impl Iterator<Item = usize> + '_ {
        self.levels.keys().copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, &T)> {
        self.levels.iter().map(|(&l, v)| (l, v))
    }

    pub fn lowest(&self) -> Option<usize> {
        self.levels.keys().next().copied()
    }

    pub fn highest(&self) -> Option<usize> {
        self.levels.keys().next_back().copied()
    }

    pub fn map<U>(&self, mut f: impl FnMut(usize, &T) -> U) -> Pyramid<U> {
        Pyramid {
            levels: self.levels.iter().map(|(&l, v)| (l, f(l, v))).collect(),
        }
    }

    pub fn try_map<U>(&self, mut f: impl FnMut(usize, &T) -> Result<U>) -> Result<Pyramid<U>> {
        let mut out = Pyramid::new();
        for (&l, v) in &self.levels {
            out.insert(l, f(l, v)?);
        }
        Ok(out)
    }

    /// Fails with [`Error::MissingLevel`] unless every level in `range` is present.
    pub fn require(&self, range: impl IntoIterator<Item = usize>) -> Result<()> {
        for l in range {
            self.get(l)?;
        }
        Ok(())
    }
}

impl<T> FromIterator<(usize, T)> for Pyramid<T> {
    fn from_iter<I: IntoIterator<Item = (usize, T)>>(iter: I) -> Self {
        Self {
            levels: iter.into_iter().collect(),
        }
    }
}

impl FeaturePyramid {
    /// Checks rank, shared batch extent and exact halving between
    /// consecutive levels.
    pub fn validate(&self) -> Result<()> {
        let mut prev: Option<(usize, &Tensor)> = None;
        for (level, t) in self.iter() {
            let s = t.shape();
            if s.len() != 4 {
                return Err(Error::Resolution {
                    level,
                    detail: format!("expected [N, C, H, W], got {s:?}"),
                });
            }
            if let Some((pl, pt)) = prev {
                let ps = pt.shape();
                if level != pl + 1 {
                    return Err(Error::MissingLevel(pl + 1));
                }
                if s[0] != ps[0] {
                    return Err(Error::Resolution {
                        level,
                        detail: format!("batch {} differs from level {pl} batch {}", s[0], ps[0]),
                    });
                }
                if ps[2] != 2 * s[2] || ps[3] != 2 * s[3] {
                    return Err(Error::Resolution {
                        level,
                        detail: format!(
                            "extent {}x{} is not half of level {pl} extent {}x{}",
                            s[2], s[3], ps[2], ps[3]
                        ),
                    });
                }
            }
            prev = Some((level, t));
        }
        Ok(())
    }

    /// Checks the pyramid covers `levels` with the shapes `cfg` implies.
    /// `channels(level)` gives the expected channel extent.
    pub fn check_shapes(
        &self,
        cfg: &NeckConfig,
        levels: impl IntoIterator<Item = usize>,
        channels: impl Fn(usize) -> usize,
    ) -> Result<()> {
        for level in levels {
            let t = self.get(level)?;
            let (h, w) = cfg.resolution(level);
            let want = [cfg.batch, channels(level), h, w];
            if t.shape() != want {
                return Err(Error::Resolution {
                    level,
                    detail: format!("shape {:?}, expected {want:?}", t.shape()),
                });
            }
        }
        Ok(())
    }

    pub fn bit_eq(&self, other: &FeaturePyramid) -> bool {
        self.len() == other.len()
            && self
                .iter()
                .zip(other.iter())
                .all(|((la, a), (lb, b))| la == lb && a.bit_eq(b))
    }

    /// Largest elementwise difference over all shared levels.
    pub fn max_abs_diff(&self, other: &FeaturePyramid) -> f64 {
        self.iter()
            .filter_map(|(l, a)| other.get(l).ok().map(|b| a.max_abs_diff(b)))
            .fold(0.0, f64::max)
    }

    /// Records every level on `tape` as a constant.
    pub fn record_constant(&self, tape: &mut Tape) -> Pyramid<Var> {
        self.map(|_, t| tape.constant(t.clone()))
    }

    /// Records every level on `tape` as a gradient-tracking input.
    pub fn record_input(&self, tape: &mut Tape) -> Pyramid<Var> {
        self.map(|_, t| tape.input(t.clone()))
    }
}

impl Pyramid<Var> {
    pub fn values(&self, tape: &Tape) -> FeaturePyramid {
        self.map(|_, &v| tape.value(v).clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pyr(extents: &[(usize, usize)]) -> FeaturePyramid {
        extents
            .iter()
            .map(|&(l, e)| (l, Tensor::zeros(&[1, 2, e, e])))
            .collect()
    }

    #[test]
    fn halving_is_enforced() {
        pyr(&[(3, 8), (4, 4), (5, 2)]).validate().unwrap();
        let err = pyr(&[(3, 8), (4, 3)]).validate().unwrap_err();
        assert!(matches!(err, Error::Resolution { level: 4, .. }));
        let err = pyr(&[(3, 8), (5, 2)]).validate().unwrap_err();
        assert_eq!(err, Error::MissingLevel(4));
    }

    #[test]
    fn missing_level_lookup() {
        let p = pyr(&[(3, 8)]);
        assert_eq!(p.get(4).unwrap_err(), Error::MissingLevel(4));
        assert_eq!(p.require(3..=4).unwrap_err(), Error::MissingLevel(4));
    }
}
