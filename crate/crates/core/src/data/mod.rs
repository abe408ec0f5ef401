//! Image sets, volumes and the intensity preprocessing applied before
//! training and evaluation.

mod io;
mod phantom;

pub use io::{decode_pgm16, encode_pgm16, load_set, save_set, IMGSET_MAGIC};
pub use phantom::phantom_generate;

use crate::error::{invalid, Error, Result};
use crate::Scalar;

/// Percentile used for intensity clipping when none is given.
pub const DEFAULT_CLIP_PERCENTILE: f64 = 95.0;
/// Slices removed from the top of each volume by default.
pub const DEFAULT_DISCARD_TOP: usize = 6;
/// Slices removed from the bottom of each volume by default.
pub const DEFAULT_DISCARD_BOTTOM: usize = 8;

/// An ordered collection of same-shape 2-D grayscale images, stored as one
/// contiguous row-major buffer.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageSet<T> {
    height: usize,
    width: usize,
    pixels: Vec<T>,
    labels: Option<Vec<String>>,
}

impl<T: Scalar> ImageSet<T> {
    /// Wraps `pixels` (count·H·W values) as a set of `height × width` images.
    pub fn new(height: usize, width: usize, pixels: Vec<T>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(invalid("image dimensions must be positive"));
        }
        if !pixels.len().is_multiple_of(height * width) {
            return Err(Error::Shape(format!(
                "{} pixels do not divide into {height}x{width} images",
                pixels.len()
            )));
        }
        Ok(Self { height, width, pixels, labels: None })
    }

    pub fn from_images(height: usize, width: usize, images: Vec<Vec<T>>) -> Result<Self> {
        let mut pixels = Vec::with_capacity(images.len() * height * width);
        for (i, img) in images.into_iter().enumerate() {
            if img.len() != height * width {
                return Err(Error::Shape(format!(
                    "image {i} has {} pixels, expected {}",
                    img.len(),
                    height * width
                )));
            }
            pixels.extend(img);
        }
        Self::new(height, width, pixels)
    }

    /// Attaches one source label per image.
    pub fn with_labels(mut self, labels: Vec<String>) -> Result<Self> {
        if labels.len() != self.len() {
            return Err(invalid(format!(
                "{} labels for {} images",
                labels.len(),
                self.len()
            )));
        }
        self.labels = Some(labels);
        Ok(self)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixels_per_image(&self) -> usize {
        self.height * self.width
    }

    pub fn len(&self) -> usize {
        self.pixels.len() / self.pixels_per_image()
    }

    pub fn is_empty(&self) -> bool {
        self.pixels.is_empty()
    }

    pub fn image(&self, index: usize) -> &[T] {
        let n = self.pixels_per_image();
        &self.pixels[index * n..(index + 1) * n]
    }

    pub fn image_mut(&mut self, index: usize) -> &mut [T] {
        let n = self.pixels_per_image();
        &mut self.pixels[index * n..(index + 1) * n]
    }

    pub fn images(&self) -> std::slice::Chunks<'_, T> {
        self.pixels.chunks(self.pixels_per_image())
    }

    pub fn pixels(&self) -> &[T] {
        &self.pixels
    }

    pub fn into_pixels(self) -> Vec<T> {
        self.pixels
    }

    pub fn labels(&self) -> Option<&[String]> {
        self.labels.as_deref()
    }

    pub fn same_shape(&self, other: &ImageSet<T>) -> bool {
        self.height == other.height && self.width == other.width
    }

    /// New set holding the images at `indices`, in that order (labels follow).
    pub fn select(&self, indices: &[usize]) -> Self {
        let mut pixels = Vec::with_capacity(indices.len() * self.pixels_per_image());
        for &i in indices {
            pixels.extend_from_slice(self.image(i));
        }
        let labels = self
            .labels
            .as_ref()
            .map(|l| indices.iter().map(|&i| l[i].clone()).collect());
        Self { height: self.height, width: self.width, pixels, labels }
    }

    /// Appends every image of `other`; both sets must share a shape.
    pub fn extend(&mut self, other: &ImageSet<T>) -> Result<()> {
        if !self.same_shape(other) {
            return Err(Error::Shape("cannot concatenate sets of different image size".into()));
        }
        self.labels = match (self.labels.take(), other.labels()) {
            (Some(mut a), Some(b)) => {
                a.extend(b.iter().cloned());
                Some(a)
            }
            _ => None,
        };
        self.pixels.extend_from_slice(&other.pixels);
        Ok(())
    }

    /// Checks that every pixel lies in `[0, 1]`.
    pub fn validate_unit_range(&self) -> Result<()> {
        match self
            .pixels
            .iter()
            .position(|&v| !(v >= T::zero() && v <= T::one()))
        {
            None => Ok(()),
            Some(p) => Err(invalid(format!(
                "pixel {} of image {} is {} (expected a value in [0, 1])",
                p % self.pixels_per_image(),
                p / self.pixels_per_image(),
                self.pixels[p]
            ))),
        }
    }

    pub fn cast<U: Scalar>(&self) -> ImageSet<U> {
        ImageSet {
            height: self.height,
            width: self.width,
            pixels: self.pixels.iter().map(|v| U::of(v.as_f64())).collect(),
            labels: self.labels.clone(),
        }
    }
}

/// A stack of 2-D slices ordered bottom-to-top.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume<T> {
    slices: ImageSet<T>,
}

impl<T: Scalar> Volume<T> {
    pub fn from_slices(slices: ImageSet<T>) -> Self {
        Self { slices }
    }

    pub fn depth(&self) -> usize {
        self.slices.len()
    }

    pub fn slices(&self) -> &ImageSet<T> {
        &self.slices
    }
}

fn ensure_nonempty<T: Scalar>(set: &ImageSet<T>) -> Result<()> {
    if set.is_empty() {
        return Err(invalid("image set is empty"));
    }
    Ok(())
}

/// Nearest-rank percentile of `values`: the element at 1-based rank
/// `ceil(p/100 · N)` of the ascending sort.
pub fn nearest_rank_percentile<T: Scalar>(values: &[T], p: f64) -> Result<T> {
    if values.is_empty() {
        return Err(invalid("percentile of an empty image"));
    }
    if !(p > 0.0 && p <= 100.0) {
        return Err(invalid(format!("percentile {p} outside (0, 100]")));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
    let n = sorted.len();
    let rank = ((p * n as f64) / 100.0).ceil() as usize;
    Ok(sorted[rank.clamp(1, n) - 1])
}

/// Caps every image at its own `p`-th percentile.
pub fn clip_percentile<T: Scalar>(set: &ImageSet<T>, p: f64) -> Result<ImageSet<T>> {
    ensure_nonempty(set)?;
    let mut out = set.clone();
    for i in 0..out.len() {
        let cap = nearest_rank_percentile(set.image(i), p)?;
        for v in out.image_mut(i) {
            if *v > cap {
                *v = cap;
            }
        }
    }
    Ok(out)
}

/// Divides every image by its own maximum so that it spans `[0, 1]`.
pub fn normalize_max<T: Scalar>(set: &ImageSet<T>) -> Result<ImageSet<T>> {
    ensure_nonempty(set)?;
    let mut out = set.clone();
    for i in 0..out.len() {
        let img = out.image_mut(i);
        if img.iter().any(|v| *v < T::zero() || !v.is_finite()) {
            return Err(invalid(format!("image {i} has negative or non-finite intensities")));
        }
        let max = img.iter().copied().fold(T::zero(), T::max);
        if max <= T::zero() {
            return Err(Error::Degenerate(format!("image {i} is all zeros")));
        }
        for v in img.iter_mut() {
            *v /= max;
        }
    }
    Ok(out)
}

/// Drops `discard_top` slices from the top and `discard_bottom` from the
/// bottom, returning the rest in their original order.
pub fn trim_volume<T: Scalar>(
    volume: &Volume<T>,
    discard_top: usize,
    discard_bottom: usize,
) -> Result<ImageSet<T>> {
    let depth = volume.depth();
    if discard_top + discard_bottom >= depth {
        return Err(invalid(format!(
            "discarding {discard_top} top and {discard_bottom} bottom slices leaves nothing of a {depth}-slice volume"
        )));
    }
    let keep: Vec<usize> = (discard_bottom..depth - discard_top).collect();
    Ok(volume.slices.select(&keep))
}
