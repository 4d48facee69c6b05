use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

use super::image::load_image;
use super::manifest::ManifestEntry;

/// One image with its vessel label and optional field-of-view mask.
#[derive(Clone, Debug)]
pub struct Sample<T: Real = f32> {
    pub id: String,
    /// `(1, 3, H, W)` in `[0, 1]`.
    pub image: Tensor<T>,
    /// `(1, 1, H, W)`, exactly 0 or 1.
    pub label: Tensor<T>,
    pub fov_mask: Option<Tensor<T>>,
}

/// Collapses channels by maximum and thresholds at half of the source maximum.
pub fn binarize<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let s = x.shape();
    Tensor::from_fn([s.n, 1, s.h, s.w], |n, _, h, w| {
        let peak = (0..s.c)
            .map(|c| x.at(n, c, h, w).as_f64())
            .fold(f64::MIN, f64::max);
        if peak >= 0.5 {
            T::one()
        } else {
            T::zero()
        }
    })
}

/// Replicates a single-channel image to three channels; RGB passes through.
pub fn ensure_rgb<T: Real>(x: Tensor<T>) -> Result<Tensor<T>> {
    let s = x.shape();
    match s.c {
        3 => Ok(x),
        1 => Ok(Tensor::from_fn([s.n, 3, s.h, s.w], |n, _, h, w| {
            x.at(n, 0, h, w)
        })),
        c => Err(Error::Dataset(format!(
            "images must have 1 or 3 channels, found {c}"
        ))),
    }
}

fn check_dims<T: Real>(
    what: &str,
    path: &std::path::Path,
    image: &Tensor<T>,
    other: &Tensor<T>,
) -> Result<()> {
    let (a, b) = (image.shape(), other.shape());
    if (a.h, a.w) != (b.h, b.w) {
        return Err(Error::Dataset(format!(
            "{what} {} is {}x{}, image is {}x{}",
            path.display(),
            b.h,
            b.w,
            a.h,
            a.w
        )));
    }
    Ok(())
}

pub fn load_sample<T: Real>(entry: &ManifestEntry) -> Result<Sample<T>> {
    let image = ensure_rgb(load_image::<T>(&entry.image)?)?;
    let label = binarize(&load_image::<T>(&entry.label)?);
    check_dims("label", &entry.label, &image, &label)?;
    let fov_mask = match &entry.mask {
        Some(path) => {
            let mask = binarize(&load_image::<T>(path)?);
            check_dims("mask", path, &image, &mask)?;
            Some(mask)
        }
        None => None,
    };
    Ok(Sample {
        id: entry.id(),
        image,
        label,
        fov_mask,
    })
}

/// Augmentation hook applied to training samples before each step. The
/// default leaves samples untouched.
pub trait Augment<T: Real> {
    fn apply(&self, sample: Sample<T>, epoch: usize) -> Sample<T>;
}

#[derive(Clone, Copy, Debug, Default)]
pub struct NoAugment;

impl<T: Real> Augment<T> for NoAugment {
    fn apply(&self, sample: Sample<T>, _epoch: usize) -> Sample<T> {
        sample
    }
}
