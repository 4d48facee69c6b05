use super::Mode;
use crate::autodiff::{Backward, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Real, Shape, Tensor};

pub const BN_EPSILON: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Running statistics and hyperparameters of one batch-norm layer. The
/// affine `gamma`/`beta` are trainable and passed to [`batchnorm2d`] as vars.
#[derive(Clone, Debug)]
pub struct BatchNormState<T: Real> {
    pub running_mean: Tensor<T>,
    pub running_var: Tensor<T>,
    pub momentum: f64,
    pub epsilon: f64,
    pub mode: Mode,
}

impl<T: Real> BatchNormState<T> {
    pub fn new(channels: usize, mode: Mode) -> Self {
        BatchNormState {
            running_mean: Tensor::zeros([1, channels, 1, 1]),
            running_var: Tensor::ones([1, channels, 1, 1]),
            momentum: BN_MOMENTUM,
            epsilon: BN_EPSILON,
            mode,
        }
    }

    pub fn channels(&self) -> usize {
        self.running_mean.shape().c
    }
}

struct BatchNormRule<T: Real> {
    normalized: Tensor<T>,
    inv_std: Vec<f64>,
    gamma: Vec<T>,
    mode: Mode,
}

impl<T: Real> Backward<T> for BatchNormRule<T> {
    fn backward(&self, g: &Tensor<T>, needs: &[bool]) -> Result<Vec<Option<Tensor<T>>>> {
        let s = g.shape();
        let count = (s.n * s.plane()) as f64;
        let mut sum_g = vec![0.0; s.c];
        let mut sum_gx = vec![0.0; s.c];
        for n in 0..s.n {
            for c in 0..s.c {
                for (&gv, &xh) in g.plane(n, c).iter().zip(self.normalized.plane(n, c)) {
                    sum_g[c] += gv.as_f64();
                    sum_gx[c] += gv.as_f64() * xh.as_f64();
                }
            }
        }
        let gx = needs[0].then(|| {
            let mut out = Tensor::zeros(s);
            for n in 0..s.n {
                for c in 0..s.c {
                    let scale = self.gamma[c].as_f64() * self.inv_std[c];
                    let start = s.index(n, c, 0, 0);
                    let dst = &mut out.data_mut()[start..start + s.plane()];
                    let src = g.plane(n, c).iter().zip(self.normalized.plane(n, c));
                    for (d, (&gv, &xh)) in dst.iter_mut().zip(src) {
                        let v = match self.mode {
                            Mode::Eval => scale * gv.as_f64(),
                            Mode::Train => {
                                scale
                                    * (gv.as_f64()
                                        - sum_g[c] / count
                                        - xh.as_f64() * sum_gx[c] / count)
                            }
                        };
                        *d = T::from_f64_lossy(v);
                    }
                }
            }
            out
        });
        let per_channel =
            |v: &[f64]| Tensor::from_fn([1, s.c, 1, 1], |_, c, _, _| T::from_f64_lossy(v[c]));
        let ggamma = needs[1].then(|| per_channel(&sum_gx));
        let gbeta = needs[2].then(|| per_channel(&sum_g));
        Ok(vec![gx, ggamma, gbeta])
    }
}

/// Normalizes each channel, then applies `gamma·x̂ + beta`. In train mode the
/// batch statistics are used and folded into `state`'s running estimates.
pub fn batchnorm2d<T: Real>(
    tape: &mut Tape<T>,
    x: &Var<T>,
    gamma: &Var<T>,
    beta: &Var<T>,
    state: &mut BatchNormState<T>,
) -> Result<Var<T>> {
    let s = x.shape();
    let param_shape = Shape::new(1, s.c, 1, 1);
    if state.channels() != s.c || gamma.shape() != param_shape || beta.shape() != param_shape {
        return Err(Error::shape(
            "batchnorm2d",
            format!(
                "input has {} channels; state has {}, gamma {}, beta {}",
                s.c,
                state.channels(),
                gamma.shape(),
                beta.shape()
            ),
        ));
    }
    if state.epsilon <= 0.0 || !(0.0..1.0).contains(&state.momentum) || state.momentum == 0.0 {
        return Err(Error::Config(format!(
            "batchnorm needs epsilon > 0 and momentum in (0,1), got {} / {}",
            state.epsilon, state.momentum
        )));
    }
    let count = s.n * s.plane();
    if state.mode == Mode::Train && count < 2 {
        return Err(Error::shape(
            "batchnorm2d",
            format!("train mode needs at least 2 values per channel, got {count}"),
        ));
    }

    let (mean, var): (Vec<f64>, Vec<f64>) = match state.mode {
        Mode::Eval => (
            state
                .running_mean
                .data()
                .iter()
                .map(|v| v.as_f64())
                .collect(),
            state
                .running_var
                .data()
                .iter()
                .map(|v| v.as_f64())
                .collect(),
        ),
        Mode::Train => (0..s.c)
            .map(|c| {
                let values =
                    || (0..s.n).flat_map(move |n| x.value().plane(n, c).iter().map(|v| v.as_f64()));
                let mean = values().sum::<f64>() / count as f64;
                let var = values().map(|v| (v - mean) * (v - mean)).sum::<f64>() / count as f64;
                (mean, var)
            })
            .unzip(),
    };
    let inv_std: Vec<f64> = var
        .iter()
        .map(|v| 1.0 / (v.max(0.0) + state.epsilon).sqrt())
        .collect();

    let mut normalized = Tensor::zeros(s);
    let mut out = Tensor::zeros(s);
    let gamma_v = gamma.value().data().to_vec();
    let beta_v = beta.value().data();
    for n in 0..s.n {
        for c in 0..s.c {
            let start = s.index(n, c, 0, 0);
            let src = x.value().plane(n, c);
            let (g, b) = (gamma_v[c].as_f64(), beta_v[c].as_f64());
            for (i, &v) in src.iter().enumerate() {
                let xh = (v.as_f64() - mean[c]) * inv_std[c];
                normalized.data_mut()[start + i] = T::from_f64_lossy(xh);
                out.data_mut()[start + i] = T::from_f64_lossy(g * xh + b);
            }
        }
    }

    if state.mode == Mode::Train {
        let m = state.momentum;
        let unbiased = count as f64 / (count as f64 - 1.0);
        for c in 0..s.c {
            let rm = &mut state.running_mean.data_mut()[c];
            *rm = T::from_f64_lossy((1.0 - m) * rm.as_f64() + m * mean[c]);
            let rv = &mut state.running_var.data_mut()[c];
            *rv = T::from_f64_lossy((1.0 - m) * rv.as_f64() + m * var[c] * unbiased);
        }
    }

    let mode = state.mode;
    tape.record("batchnorm2d", out, &[x, gamma, beta], move || {
        BatchNormRule {
            normalized,
            inv_std,
            gamma: gamma_v,
            mode,
        }
    })
}
