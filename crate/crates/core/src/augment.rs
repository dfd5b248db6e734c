//! Split-and-flip transforms.
//!
//! A transform cuts the patch at `floor(n / 2)` along one axis and mirrors
//! each half in place. It only permutes pixels and is its own inverse, so it
//! serves both as augmentation and as the group action for consistency
//! regularization.

use ndarray::{Array, Array2, Array3, ArrayBase, Axis, Data, Dimension};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{BinaryMask, ImagePatch, InstanceMap, ProbMap};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitFlipTransform {
    /// Cut along the vertical midline; left and right halves are mirrored horizontally.
    HorizontalSplit,
    /// Cut along the horizontal midline; top and bottom halves are mirrored vertically.
    VerticalSplit,
}

impl SplitFlipTransform {
    pub const ALL: [SplitFlipTransform; 2] =
        [SplitFlipTransform::HorizontalSplit, SplitFlipTransform::VerticalSplit];

    /// Index permutation of length `n`: `out[i] = in[perm[i]]`.
    pub fn permutation(n: usize) -> Vec<usize> {
        let half = n / 2;
        (0..n)
            .map(|i| if i < half { half - 1 - i } else { half + (n - 1 - i) })
            .collect()
    }

    /// Applies the transform to an array whose last two axes are `(height, width)`.
    pub fn apply_array<A, S, D>(self, arr: &ArrayBase<S, D>) -> Result<Array<A, D>>
    where
        A: Clone,
        S: Data<Elem = A>,
        D: Dimension + ndarray::RemoveAxis,
    {
        let nd = arr.ndim();
        if nd < 2 {
            return Err(Error::Transform(format!("expected at least 2 axes, got {nd}")));
        }
        let axis = match self {
            SplitFlipTransform::HorizontalSplit => Axis(nd - 1),
            SplitFlipTransform::VerticalSplit => Axis(nd - 2),
        };
        let n = arr.len_of(axis);
        if n < 2 {
            return Err(Error::Transform(format!(
                "{self:?} needs at least 2 pixels along the split axis, got {n}"
            )));
        }
        Ok(arr.select(axis, &Self::permutation(n)))
    }
}

/// Types that carry a pixel grid a split-and-flip can act on.
pub trait SplitFlip: Sized {
    fn split_flip(&self, t: SplitFlipTransform) -> Result<Self>;
}

impl<A: Clone> SplitFlip for Array2<A> {
    fn split_flip(&self, t: SplitFlipTransform) -> Result<Self> {
        t.apply_array(self)
    }
}

impl<A: Clone> SplitFlip for Array3<A> {
    fn split_flip(&self, t: SplitFlipTransform) -> Result<Self> {
        t.apply_array(self)
    }
}

impl SplitFlip for ImagePatch {
    fn split_flip(&self, t: SplitFlipTransform) -> Result<Self> {
        Ok(ImagePatch {
            id: self.id.clone(),
            pixels: t.apply_array(&self.pixels)?,
        })
    }
}

impl SplitFlip for BinaryMask {
    fn split_flip(&self, t: SplitFlipTransform) -> Result<Self> {
        Ok(BinaryMask {
            id: self.id.clone(),
            pixels: t.apply_array(&self.pixels)?,
        })
    }
}

impl SplitFlip for ProbMap {
    fn split_flip(&self, t: SplitFlipTransform) -> Result<Self> {
        Ok(ProbMap {
            id: self.id.clone(),
            pixels: t.apply_array(&self.pixels)?,
        })
    }
}

impl SplitFlip for InstanceMap {
    fn split_flip(&self, t: SplitFlipTransform) -> Result<Self> {
        Ok(InstanceMap::new(self.id.clone(), t.apply_array(&self.pixels)?))
    }
}

pub fn apply<T: SplitFlip>(t: SplitFlipTransform, x: &T) -> Result<T> {
    x.split_flip(t)
}

/// Applies an optional transform; `None` is the identity.
pub fn apply_maybe<T: SplitFlip + Clone>(t: Option<SplitFlipTransform>, x: &T) -> Result<T> {
    match t {
        Some(t) => x.split_flip(t),
        None => Ok(x.clone()),
    }
}

/// Returns `None` (identity) with probability `p_identity`, otherwise one of
/// `enabled` chosen uniformly. An empty `enabled` list always yields identity.
pub fn sample_transform<R: Rng + ?Sized>(
    rng: &mut R,
    p_identity: f64,
    enabled: &[SplitFlipTransform],
) -> Option<SplitFlipTransform> {
    let p = p_identity.clamp(0.0, 1.0);
    if enabled.is_empty() || rng.random::<f64>() < p {
        return None;
    }
    Some(enabled[rng.random_range(0..enabled.len())])
}
