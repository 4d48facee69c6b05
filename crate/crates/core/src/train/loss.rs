use std::rc::Rc;

use crate::autodiff::{Backward, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Probability clamp applied before taking logarithms.
pub const BCE_EPSILON: f64 = 1e-7;

struct BceRule<T: Real> {
    pred: Rc<Tensor<T>>,
    label: Tensor<T>,
    mask: Option<Tensor<T>>,
    count: f64,
}

impl<T: Real> Backward<T> for BceRule<T> {
    fn backward(&self, g: &Tensor<T>, needs: &[bool]) -> Result<Vec<Option<Tensor<T>>>> {
        let scale = g.item()?.as_f64() / self.count;
        let grad = needs[0].then(|| {
            let mut out = Tensor::zeros(self.pred.shape());
            for (i, o) in out.data_mut().iter_mut().enumerate() {
                if self.mask.as_ref().is_some_and(|m| m.data()[i] == T::zero()) {
                    continue;
                }
                let p = self.pred.data()[i].as_f64();
                if p <= BCE_EPSILON || p >= 1.0 - BCE_EPSILON {
                    continue;
                }
                let y = self.label.data()[i].as_f64();
                *o = T::from_f64_lossy(scale * ((1.0 - y) / (1.0 - p) - y / p));
            }
            out
        });
        Ok(vec![grad])
    }
}

/// Mean binary cross-entropy over the pixels where `mask` is nonzero (all
/// pixels without a mask). Predictions are clamped to `[ε, 1 − ε]`; the
/// clamped region passes no gradient.
pub fn bce_loss<T: Real>(
    tape: &mut Tape<T>,
    pred: &Var<T>,
    label: &Tensor<T>,
    mask: Option<&Tensor<T>>,
) -> Result<Var<T>> {
    let shape = pred.shape();
    label.expect_shape(shape, "bce_loss label")?;
    if let Some(m) = mask {
        m.expect_shape(shape, "bce_loss mask")?;
    }
    pred.value().ensure_finite("bce_loss")?;
    let mut total = 0.0;
    let mut count = 0usize;
    for (i, (&p, &y)) in pred.value().data().iter().zip(label.data()).enumerate() {
        if mask.is_some_and(|m| m.data()[i] == T::zero()) {
            continue;
        }
        let p = p.as_f64().clamp(BCE_EPSILON, 1.0 - BCE_EPSILON);
        let y = y.as_f64();
        total -= y * p.ln() + (1.0 - y) * (1.0 - p).ln();
        count += 1;
    }
    if count == 0 {
        return Err(Error::numeric("bce_loss", "mask selects no pixels"));
    }
    let value = Tensor::scalar(T::from_f64_lossy(total / count as f64));
    tape.record("bce_loss", value, &[pred], || BceRule {
        pred: pred.value_rc(),
        label: label.clone(),
        mask: mask.cloned(),
        count: count as f64,
    })
}
