//! Edit boxes, binary masks, multi-level box expansion, cropping and fusion.
//!
//! Coordinates are `(row, col)` with inclusive corners throughout. The
//! vertical expansion step `alpha` moves rows and the horizontal step `beta`
//! moves columns.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Inclusive rectangle `[top, left, bottom, right]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BoxCorners {
    pub top: usize,
    pub left: usize,
    pub bottom: usize,
    pub right: usize,
}

impl BoxCorners {
    pub fn new(top: usize, left: usize, bottom: usize, right: usize) -> Self {
        Self {
            top,
            left,
            bottom,
            right,
        }
    }

    /// Builds corners from signed input, rejecting anything outside the image
    /// or inverted.
    pub fn checked(top: i64, left: i64, bottom: i64, right: i64, height: usize, width: usize) -> Result<Self> {
        let err = || Error::InvalidBox {
            top,
            left,
            bottom,
            right,
            height,
            width,
        };
        if top < 0 || left < 0 || top > bottom || left > right {
            return Err(err());
        }
        if bottom as u64 >= height as u64 || right as u64 >= width as u64 {
            return Err(err());
        }
        Ok(Self::new(top as usize, left as usize, bottom as usize, right as usize))
    }

    pub fn validate(&self, height: usize, width: usize) -> Result<()> {
        Self::checked(
            self.top as i64,
            self.left as i64,
            self.bottom as i64,
            self.right as i64,
            height,
            width,
        )
        .map(|_| ())
    }

    pub fn height(&self) -> usize {
        self.bottom - self.top + 1
    }

    pub fn width(&self) -> usize {
        self.right - self.left + 1
    }

    pub fn area(&self) -> usize {
        self.height() * self.width()
    }

    pub fn contains(&self, row: usize, col: usize) -> bool {
        (self.top..=self.bottom).contains(&row) && (self.left..=self.right).contains(&col)
    }

    pub fn contains_box(&self, other: &BoxCorners) -> bool {
        self.top <= other.top
            && self.left <= other.left
            && self.bottom >= other.bottom
            && self.right >= other.right
    }

    pub fn as_array(&self) -> [usize; 4] {
        [self.top, self.left, self.bottom, self.right]
    }
}

/// A user's edit request: where to edit and what to put there.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct EditBox {
    pub corners: BoxCorners,
    pub target_label: u8,
}

impl EditBox {
    pub fn new(corners: BoxCorners, target_label: u8) -> Self {
        Self {
            corners,
            target_label,
        }
    }
}

/// Binary H×W mask.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    height: usize,
    width: usize,
    data: Vec<bool>,
}

impl Mask {
    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![false; height * width],
        }
    }

    pub fn ones(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![true; height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for r in 0..height {
            for c in 0..width {
                data.push(f(r, c));
            }
        }
        Self {
            height,
            width,
            data,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> bool {
        self.data[row * self.width + col]
    }

    pub fn set(&mut self, row: usize, col: usize, value: bool) {
        self.data[row * self.width + col] = value;
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.data.iter().any(|&b| b)
    }

    /// Tight bounding rectangle of the set pixels, or `None` for an empty mask.
    pub fn bounding_box(&self) -> Option<BoxCorners> {
        let mut bounds: Option<BoxCorners> = None;
        for r in 0..self.height {
            for c in 0..self.width {
                if !self.get(r, c) {
                    continue;
                }
                bounds = Some(match bounds {
                    None => BoxCorners::new(r, c, r, c),
                    Some(b) => BoxCorners::new(b.top.min(r), b.left.min(c), b.bottom.max(r), b.right.max(c)),
                });
            }
        }
        bounds
    }

    pub fn is_subset_of(&self, other: &Mask) -> bool {
        self.data.iter().zip(&other.data).all(|(&a, &b)| !a || b)
    }

    /// The mask as a 1×H×W tensor of 0.0/1.0.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_fn(1, self.height, self.width, |_, r, c| {
            if self.get(r, c) {
                1.0
            } else {
                0.0
            }
        })
    }
}

/// Number of expansion levels and their step sizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExpansionSchedule {
    /// Levels beyond level 0, so there are `q + 1` levels in total.
    pub q: usize,
    /// Row step per level.
    pub alpha: usize,
    /// Column step per level.
    pub beta: usize,
    /// `true` crops each level to its expanded box (MEx); `false` keeps the
    /// full canvas (A-MEx).
    pub cropped: bool,
}

impl ExpansionSchedule {
    pub fn new(q: usize, alpha: usize, beta: usize, cropped: bool) -> Result<Self> {
        let sched = Self {
            q,
            alpha,
            beta,
            cropped,
        };
        sched.validate()?;
        Ok(sched)
    }

    pub fn validate(&self) -> Result<()> {
        if self.alpha == 0 || self.beta == 0 {
            return Err(Error::Config(format!(
                "expansion steps must be positive (alpha={}, beta={})",
                self.alpha, self.beta
            )));
        }
        Ok(())
    }

    pub fn levels(&self) -> usize {
        self.q + 1
    }
}

/// Mask with ones exactly on the inclusive rectangle of `corners`.
pub fn make_mask(corners: &BoxCorners, height: usize, width: usize) -> Result<Mask> {
    corners.validate(height, width)?;
    Ok(Mask::from_fn(height, width, |r, c| corners.contains(r, c)))
}

/// Corners of level `level`: the box grown by `level·alpha` rows and
/// `level·beta` columns on every side, clamped into the image.
pub fn expand_box(
    corners: &BoxCorners,
    level: usize,
    sched: &ExpansionSchedule,
    height: usize,
    width: usize,
) -> BoxCorners {
    debug_assert!(height > 0 && width > 0);
    let dr = level.saturating_mul(sched.alpha);
    let dc = level.saturating_mul(sched.beta);
    BoxCorners {
        top: corners.top.saturating_sub(dr),
        left: corners.left.saturating_sub(dc),
        bottom: corners.bottom.saturating_add(dr).min(height - 1),
        right: corners.right.saturating_add(dc).min(width - 1),
    }
}

/// Result of [`crop_nonzero`]: the region and where it sat in the source.
#[derive(Debug, Clone, PartialEq)]
pub struct Cropped {
    pub region: Tensor,
    pub top: usize,
    pub left: usize,
}

impl Cropped {
    /// Writes the region back into a zero canvas of the source size.
    pub fn place(&self, height: usize, width: usize) -> Tensor {
        let mut canvas = Tensor::zeros(self.region.channels(), height, width);
        for c in 0..self.region.channels() {
            for r in 0..self.region.height() {
                for col in 0..self.region.width() {
                    *canvas.at_mut(c, self.top + r, self.left + col) = self.region.at(c, r, col);
                }
            }
        }
        canvas
    }
}

/// `image × mask`, cut down to the tight bounding rectangle of the mask's
/// set pixels. Zero-valued pixels inside the mask are kept.
pub fn crop_nonzero(image: &Tensor, mask: &Mask) -> Result<Cropped> {
    let bounds = mask.bounding_box().ok_or(Error::EmptyMask)?;
    let masked = image.masked(mask)?;
    Ok(Cropped {
        region: masked.crop(bounds.top, bounds.left, bounds.height(), bounds.width()),
        top: bounds.top,
        left: bounds.left,
    })
}

/// One level of an expansion set.
#[derive(Debug, Clone, PartialEq)]
pub struct MexLevel {
    pub area: Tensor,
    pub condition: Tensor,
    pub mask: Mask,
    pub corners: BoxCorners,
}

/// Expansion areas for one image, ordered by level.
#[derive(Debug, Clone, PartialEq)]
pub struct MexAreaSet {
    pub levels: Vec<MexLevel>,
}

/// Expanded masks `M^E_0 ..= M^E_q` for a box.
pub fn expansion_masks(
    corners: &BoxCorners,
    sched: &ExpansionSchedule,
    height: usize,
    width: usize,
) -> Result<Vec<(BoxCorners, Mask)>> {
    corners.validate(height, width)?;
    sched.validate()?;
    (0..sched.levels())
        .map(|j| {
            let expanded = expand_box(corners, j, sched, height, width);
            Ok((expanded, make_mask(&expanded, height, width)?))
        })
        .collect()
}

/// Builds the per-level areas of the ground truth and the manipulated map,
/// each paired with the equally masked (and cropped) condition.
pub fn mex_areas(
    ground_truth: &Tensor,
    manipulated: &Tensor,
    condition: &Tensor,
    corners: &BoxCorners,
    sched: &ExpansionSchedule,
) -> Result<(MexAreaSet, MexAreaSet)> {
    let (h, w) = (ground_truth.height(), ground_truth.width());
    if manipulated.height() != h || manipulated.width() != w || condition.height() != h || condition.width() != w {
        return Err(Error::shape(format!(
            "mex_areas: ground truth {:?}, manipulated {:?}, condition {:?}",
            ground_truth.shape(),
            manipulated.shape(),
            condition.shape()
        )));
    }
    let mut real = Vec::new();
    let mut fake = Vec::new();
    for (expanded, mask) in expansion_masks(corners, sched, h, w)? {
        let take = |img: &Tensor| -> Result<Tensor> {
            if sched.cropped {
                Ok(crop_nonzero(img, &mask)?.region)
            } else {
                img.masked(&mask)
            }
        };
        let cond = take(condition)?;
        real.push(MexLevel {
            area: take(ground_truth)?,
            condition: cond.clone(),
            mask: mask.clone(),
            corners: expanded,
        });
        fake.push(MexLevel {
            area: take(manipulated)?,
            condition: cond,
            mask,
            corners: expanded,
        });
    }
    Ok((MexAreaSet { levels: real }, MexAreaSet { levels: fake }))
}

/// `initial` inside the mask, `context` outside, per pixel and channel.
pub fn fuse(initial: &Tensor, context: &Tensor, mask: &Mask) -> Result<Tensor> {
    initial.expect_same_shape(context, "fuse")?;
    initial.expect_mask(mask)?;
    let n = initial.plane_len();
    let data = initial
        .data()
        .iter()
        .zip(context.data())
        .enumerate()
        .map(|(i, (&a, &b))| if mask.data()[i % n] { a } else { b })
        .collect();
    Tensor::from_vec(initial.channels(), initial.height(), initial.width(), data)
}

/// [`fuse`] for interleaved 8-bit pixels (`channels` values per pixel).
pub fn fuse_pixels(initial: &[u8], context: &[u8], channels: usize, mask: &Mask) -> Result<Vec<u8>> {
    let expected = mask.height() * mask.width() * channels;
    if initial.len() != expected || context.len() != expected {
        return Err(Error::shape(format!(
            "fuse_pixels: {} and {} bytes for {expected}",
            initial.len(),
            context.len()
        )));
    }
    Ok(initial
        .iter()
        .zip(context)
        .enumerate()
        .map(|(i, (&a, &b))| if mask.data()[i / channels] { a } else { b })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sched(q: usize, alpha: usize, beta: usize, cropped: bool) -> ExpansionSchedule {
        ExpansionSchedule::new(q, alpha, beta, cropped).unwrap()
    }

    #[test]
    fn full_box_gives_all_ones() {
        let m = make_mask(&BoxCorners::new(0, 0, 5, 6), 6, 7).unwrap();
        assert_eq!(m.count(), 42);
    }

    #[test]
    fn small_box_mask() {
        let m = make_mask(&BoxCorners::new(1, 1, 2, 2), 4, 4).unwrap();
        assert_eq!(m.count(), 4);
        for r in 0..4 {
            for c in 0..4 {
                assert_eq!(m.get(r, c), (1..=2).contains(&r) && (1..=2).contains(&c));
            }
        }
        let one = make_mask(&BoxCorners::new(2, 2, 2, 2), 4, 4).unwrap();
        assert_eq!(one.count(), 1);
        assert!(one.get(2, 2));
    }

    #[test]
    fn out_of_bounds_box_rejected() {
        assert!(make_mask(&BoxCorners::new(0, 0, 4, 3), 4, 4).is_err());
        assert!(make_mask(&BoxCorners::new(2, 0, 1, 3), 4, 4).is_err());
        assert!(BoxCorners::checked(-1, 0, 2, 2, 4, 4).is_err());
    }

    #[test]
    fn expansion_examples() {
        let b = BoxCorners::new(10, 10, 50, 50);
        let s = sched(4, 5, 5, true);
        assert_eq!(expand_box(&b, 0, &s, 128, 128), b);
        assert_eq!(expand_box(&b, 2, &s, 128, 128), BoxCorners::new(0, 0, 60, 60));
        let b = BoxCorners::new(2, 3, 100, 120);
        assert_eq!(expand_box(&b, 1, &s, 104, 124), BoxCorners::new(0, 0, 103, 123));
    }

    #[test]
    fn expansion_uses_alpha_for_rows() {
        let b = BoxCorners::new(10, 10, 12, 12);
        let s = sched(1, 1, 3, true);
        assert_eq!(expand_box(&b, 1, &s, 32, 32), BoxCorners::new(9, 7, 13, 15));
    }

    #[test]
    fn crop_examples() {
        let img = Tensor::from_fn(1, 4, 4, |_, r, c| (r * 4 + c) as f64 + 1.0);
        let all = crop_nonzero(&img, &Mask::ones(4, 4)).unwrap();
        assert_eq!(all.region, img);

        let rows = Mask::from_fn(4, 4, |r, _| (1..=2).contains(&r));
        let cropped = crop_nonzero(&img, &rows).unwrap();
        assert_eq!(cropped.region.shape(), (1, 2, 4));
        assert_eq!((cropped.top, cropped.left), (1, 0));
        assert_eq!(cropped.region.at(0, 0, 0), 5.0);

        let single = Mask::from_fn(4, 4, |r, c| r == 3 && c == 1);
        let px = crop_nonzero(&img, &single).unwrap();
        assert_eq!(px.region.shape(), (1, 1, 1));
        assert_eq!(px.region.at(0, 0, 0), 14.0);

        assert!(matches!(crop_nonzero(&img, &Mask::zeros(4, 4)), Err(Error::EmptyMask)));
    }

    #[test]
    fn crop_keeps_zero_pixels_inside_mask() {
        let img = Tensor::zeros(3, 5, 5);
        let mask = make_mask(&BoxCorners::new(1, 2, 3, 3), 5, 5).unwrap();
        let c = crop_nonzero(&img, &mask).unwrap();
        assert_eq!(c.region.shape(), (3, 3, 2));
    }

    #[test]
    fn mex_areas_level_zero_is_the_box_crop() {
        let gt = Tensor::from_fn(3, 8, 8, |c, r, col| (c * 64 + r * 8 + col) as f64);
        let fake = gt.map(|x| -x);
        let cond = Tensor::from_fn(2, 8, 8, |c, r, _| (c + r) as f64);
        let b = BoxCorners::new(2, 3, 4, 6);
        let (real, gen) = mex_areas(&gt, &fake, &cond, &b, &sched(0, 2, 2, true)).unwrap();
        assert_eq!(real.levels.len(), 1);
        assert_eq!(real.levels[0].area, gt.crop(2, 3, 3, 4));
        assert_eq!(gen.levels[0].area, fake.crop(2, 3, 3, 4));
        assert_eq!(gen.levels[0].condition, cond.crop(2, 3, 3, 4));
    }

    #[test]
    fn uncropped_levels_are_full_size_and_nested() {
        let gt = Tensor::filled(3, 16, 16, 1.0);
        let cond = Tensor::filled(1, 16, 16, 1.0);
        let b = BoxCorners::new(6, 6, 8, 8);
        let (real, _) = mex_areas(&gt, &gt, &cond, &b, &sched(2, 2, 2, false)).unwrap();
        assert_eq!(real.levels.len(), 3);
        for level in &real.levels {
            assert_eq!(level.area.shape(), (3, 16, 16));
        }
        for j in 1..3 {
            let (inner, outer) = (&real.levels[j - 1].mask, &real.levels[j].mask);
            assert!(inner.is_subset_of(outer));
            assert!(outer.count() > inner.count());
        }
    }

    #[test]
    fn border_box_saturates() {
        let gt = Tensor::filled(3, 6, 6, 1.0);
        let b = BoxCorners::new(0, 0, 5, 5);
        let (real, _) = mex_areas(&gt, &gt, &gt, &b, &sched(3, 1, 1, true)).unwrap();
        assert!(real.levels.windows(2).all(|w| w[0].mask == w[1].mask));
    }

    #[test]
    fn fuse_examples() {
        let a = Tensor::from_fn(3, 4, 4, |c, r, col| (c + r * col) as f64);
        let b = a.map(|x| x + 100.0);
        assert_eq!(fuse(&a, &b, &Mask::zeros(4, 4)).unwrap(), b);
        assert_eq!(fuse(&a, &b, &Mask::ones(4, 4)).unwrap(), a);
        let checker = Mask::from_fn(4, 4, |r, c| (r + c) % 2 == 0);
        let f = fuse(&a, &b, &checker).unwrap();
        for c in 0..3 {
            for r in 0..4 {
                for col in 0..4 {
                    let src = if checker.get(r, col) { &a } else { &b };
                    assert_eq!(f.at(c, r, col), src.at(c, r, col));
                }
            }
        }
        assert!(fuse(&a, &Tensor::zeros(3, 4, 5), &checker).is_err());
    }

    #[test]
    fn fuse_pixels_selects_per_pixel() {
        let mask = Mask::from_fn(1, 2, |_, c| c == 1);
        let out = fuse_pixels(&[1, 2, 3, 4, 5, 6], &[9, 9, 9, 8, 8, 8], 3, &mask).unwrap();
        assert_eq!(out, vec![9, 9, 9, 4, 5, 6]);
    }
}
