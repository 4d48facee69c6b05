use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::Mode;
use crate::autodiff::{Backward, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Real, Shape, Tensor};

#[derive(Clone, Copy, PartialEq, Debug)]
pub struct DropBlockSpec {
    pub block_size: usize,
    pub keep_prob: f64,
    pub mode: Mode,
    pub rng_seed: u64,
}

impl DropBlockSpec {
    pub fn new(block_size: usize, keep_prob: f64, mode: Mode, rng_seed: u64) -> Self {
        DropBlockSpec {
            block_size,
            keep_prob,
            mode,
            rng_seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.block_size == 0 || self.block_size.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "dropblock block_size must be odd and positive, got {}",
                self.block_size
            )));
        }
        if !(self.keep_prob > 0.0 && self.keep_prob <= 1.0) {
            return Err(Error::Config(format!(
                "dropblock keep_prob must lie in (0, 1], got {}",
                self.keep_prob
            )));
        }
        Ok(())
    }

    /// Bernoulli rate for block centres so that roughly `1 - keep_prob` of an
    /// `h×w` map ends up dropped.
    pub fn center_rate(&self, h: usize, w: usize) -> f64 {
        let b = self.block_size as f64;
        let valid = ((h - self.block_size + 1) * (w - self.block_size + 1)) as f64;
        (1.0 - self.keep_prob) / (b * b) * (h * w) as f64 / valid
    }

    fn is_identity(&self) -> bool {
        self.mode == Mode::Eval || self.keep_prob >= 1.0
    }
}

/// Multiplicative mask for `shape`: zero on dropped squares, `total/kept`
/// elsewhere. `None` when the spec acts as the identity.
pub fn dropblock_mask<T: Real>(shape: Shape, spec: &DropBlockSpec) -> Result<Option<Tensor<T>>> {
    spec.validate()?;
    if spec.block_size > shape.h || spec.block_size > shape.w {
        return Err(Error::shape(
            "dropblock",
            format!(
                "block size {} exceeds map {}x{}",
                spec.block_size, shape.h, shape.w
            ),
        ));
    }
    if spec.is_identity() {
        return Ok(None);
    }
    let gamma = spec.center_rate(shape.h, shape.w);
    let half = spec.block_size / 2;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.rng_seed);
    let mut keep = vec![true; shape.len()];
    for n in 0..shape.n {
        for c in 0..shape.c {
            for cy in half..shape.h - half {
                for cx in half..shape.w - half {
                    if !rng.gen_bool(gamma) {
                        continue;
                    }
                    for y in cy - half..=cy + half {
                        let row = shape.index(n, c, y, 0);
                        keep[row + cx - half..=row + cx + half].fill(false);
                    }
                }
            }
        }
    }
    let kept = keep.iter().filter(|&&k| k).count();
    let scale = if kept == 0 {
        T::zero()
    } else {
        T::from_f64_lossy(shape.len() as f64 / kept as f64)
    };
    let data = keep
        .into_iter()
        .map(|k| if k { scale } else { T::zero() })
        .collect();
    Ok(Some(Tensor::from_parts(shape, data)))
}

struct MaskRule<T: Real> {
    mask: Tensor<T>,
}

impl<T: Real> Backward<T> for MaskRule<T> {
    fn backward(&self, g: &Tensor<T>, _needs: &[bool]) -> Result<Vec<Option<Tensor<T>>>> {
        Ok(vec![Some(g.zip_map(&self.mask, |g, m| g * m)?)])
    }
}

/// Structured dropout: zeroes `block_size×block_size` squares and rescales
/// the survivors. Identity in eval mode or with `keep_prob == 1`.
pub fn dropblock<T: Real>(tape: &mut Tape<T>, x: &Var<T>, spec: &DropBlockSpec) -> Result<Var<T>> {
    let Some(mask) = dropblock_mask::<T>(x.shape(), spec)? else {
        return Ok(x.clone());
    };
    let out = x.value().zip_map(&mask, |v, m| v * m)?;
    tape.record("dropblock", out, &[x], move || MaskRule { mask })
}
