use crate::error::{Error, Result};
use crate::tensor::{Real, Shape, Tensor};

/// Original spatial size of a padded tensor.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct CropRecord {
    pub height: usize,
    pub width: usize,
    pub pad_bottom: usize,
    pub pad_right: usize,
}

impl CropRecord {
    pub fn is_empty(&self) -> bool {
        self.pad_bottom == 0 && self.pad_right == 0
    }
}

/// Zero-pads bottom/right up to `(height, width)`.
pub fn pad_to<T: Real>(
    x: &Tensor<T>,
    height: usize,
    width: usize,
) -> Result<(Tensor<T>, CropRecord)> {
    let s = x.shape();
    if height < s.h || width < s.w {
        return Err(Error::shape(
            "pad_to",
            format!("target {height}x{width} is smaller than {}x{}", s.h, s.w),
        ));
    }
    let record = CropRecord {
        height: s.h,
        width: s.w,
        pad_bottom: height - s.h,
        pad_right: width - s.w,
    };
    if record.is_empty() {
        return Ok((x.clone(), record));
    }
    let padded = Tensor::from_fn([s.n, s.c, height, width], |n, c, h, w| {
        if h < s.h && w < s.w {
            x.at(n, c, h, w)
        } else {
            T::zero()
        }
    });
    Ok((padded, record))
}

/// Zero-pads bottom/right to the next multiples of `m`.
pub fn pad_to_multiple<T: Real>(x: &Tensor<T>, m: usize) -> Result<(Tensor<T>, CropRecord)> {
    if m == 0 {
        return Err(Error::Config(
            "alignment multiple must be at least 1".into(),
        ));
    }
    let s = x.shape();
    pad_to(x, s.h.div_ceil(m) * m, s.w.div_ceil(m) * m)
}

/// Undoes [`pad_to`] / [`pad_to_multiple`].
pub fn crop<T: Real>(x: &Tensor<T>, record: &CropRecord) -> Result<Tensor<T>> {
    let s = x.shape();
    if s.h != record.height + record.pad_bottom || s.w != record.width + record.pad_right {
        return Err(Error::shape(
            "crop",
            format!("tensor {s} does not match crop record {record:?}"),
        ));
    }
    if record.is_empty() {
        return Ok(x.clone());
    }
    Ok(Tensor::from_fn(
        Shape::new(s.n, s.c, record.height, record.width),
        |n, c, h, w| x.at(n, c, h, w),
    ))
}
