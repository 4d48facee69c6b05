use std::rc::Rc;

use super::{Backward, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Real, Shape, Tensor};

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum Elementwise {
    Add,
    Mul,
    Relu,
    Sigmoid,
}

/// Dispatches to the elementwise operation `kind`; binary kinds require `b`.
pub fn elementwise<T: Real>(
    tape: &mut Tape<T>,
    kind: Elementwise,
    a: &Var<T>,
    b: Option<&Var<T>>,
) -> Result<Var<T>> {
    match (kind, b) {
        (Elementwise::Add, Some(b)) => add(tape, a, b),
        (Elementwise::Mul, Some(b)) => mul(tape, a, b),
        (Elementwise::Relu, None) => relu(tape, a),
        (Elementwise::Sigmoid, None) => sigmoid(tape, a),
        (kind, _) => Err(Error::shape(
            "elementwise",
            format!("wrong operand count for {kind:?}"),
        )),
    }
}

fn binary_operands<T: Real>(op: &'static str, a: &Var<T>, b: &Var<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, format!("{} vs {}", a.shape(), b.shape())));
    }
    a.value().ensure_finite(op)?;
    b.value().ensure_finite(op)
}

struct AddRule;

impl<T: Real> Backward<T> for AddRule {
    fn backward(&self, g: &Tensor<T>, needs: &[bool]) -> Result<Vec<Option<Tensor<T>>>> {
        Ok(needs.iter().map(|&n| n.then(|| g.clone())).collect())
    }
}

pub fn add<T: Real>(tape: &mut Tape<T>, a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
    binary_operands("add", a, b)?;
    let out = a.value().zip_map(b.value(), |x, y| x + y)?;
    tape.record("add", out, &[a, b], || AddRule)
}

struct MulRule<T: Real> {
    a: Rc<Tensor<T>>,
    b: Rc<Tensor<T>>,
}

impl<T: Real> Backward<T> for MulRule<T> {
    fn backward(&self, g: &Tensor<T>, needs: &[bool]) -> Result<Vec<Option<Tensor<T>>>> {
        let ga = if needs[0] {
            Some(g.zip_map(&self.b, |g, b| g * b)?)
        } else {
            None
        };
        let gb = if needs[1] {
            Some(g.zip_map(&self.a, |g, a| g * a)?)
        } else {
            None
        };
        Ok(vec![ga, gb])
    }
}

pub fn mul<T: Real>(tape: &mut Tape<T>, a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
    binary_operands("mul", a, b)?;
    let out = a.value().zip_map(b.value(), |x, y| x * y)?;
    tape.record("mul", out, &[a, b], || MulRule {
        a: a.value_rc(),
        b: b.value_rc(),
    })
}

struct ReluRule<T: Real> {
    input: Rc<Tensor<T>>,
}

impl<T: Real> Backward<T> for ReluRule<T> {
    fn backward(&self, g: &Tensor<T>, _needs: &[bool]) -> Result<Vec<Option<Tensor<T>>>> {
        // subgradient 0 at the kink
        let gx = g.zip_map(
            &self.input,
            |g, x| if x > T::zero() { g } else { T::zero() },
        )?;
        Ok(vec![Some(gx)])
    }
}

pub fn relu<T: Real>(tape: &mut Tape<T>, x: &Var<T>) -> Result<Var<T>> {
    x.value().ensure_finite("relu")?;
    let out = x.value().map(|v| if v > T::zero() { v } else { T::zero() });
    tape.record("relu", out, &[x], || ReluRule {
        input: x.value_rc(),
    })
}

struct SigmoidRule<T: Real> {
    output: Tensor<T>,
}

impl<T: Real> Backward<T> for SigmoidRule<T> {
    fn backward(&self, g: &Tensor<T>, _needs: &[bool]) -> Result<Vec<Option<Tensor<T>>>> {
        let gx = g.zip_map(&self.output, |g, s| g * s * (T::one() - s))?;
        Ok(vec![Some(gx)])
    }
}

/// Logistic function, kept strictly inside `(0, 1)` at the precision of `T`.
pub(crate) fn logistic<T: Real>(v: T) -> T {
    let one = T::one();
    let s = if v >= T::zero() {
        one / (one + (-v).exp())
    } else {
        let e = v.exp();
        e / (one + e)
    };
    let upper = one - T::epsilon() / (one + one);
    s.max(T::min_positive_value()).min(upper)
}

pub fn sigmoid<T: Real>(tape: &mut Tape<T>, x: &Var<T>) -> Result<Var<T>> {
    x.value().ensure_finite("sigmoid")?;
    let out = x.value().map(logistic);
    let saved = out.clone();
    tape.record("sigmoid", out, &[x], move || SigmoidRule { output: saved })
}

struct ConcatRule {
    channels: Vec<usize>,
}

impl<T: Real> Backward<T> for ConcatRule {
    fn backward(&self, g: &Tensor<T>, needs: &[bool]) -> Result<Vec<Option<Tensor<T>>>> {
        let s = g.shape();
        let plane = s.plane();
        let mut offset = 0;
        let mut out = Vec::with_capacity(self.channels.len());
        for (&c, &need) in self.channels.iter().zip(needs) {
            if need {
                let mut data = Vec::with_capacity(s.n * c * plane);
                for n in 0..s.n {
                    let start = (n * s.c + offset) * plane;
                    data.extend_from_slice(&g.data()[start..start + c * plane]);
                }
                out.push(Some(Tensor::from_parts(Shape::new(s.n, c, s.h, s.w), data)));
            } else {
                out.push(None);
            }
            offset += c;
        }
        Ok(out)
    }
}

/// Stacks `parts` along the channel axis, in order.
pub fn concat_channels<T: Real>(tape: &mut Tape<T>, parts: &[&Var<T>]) -> Result<Var<T>> {
    let first = parts
        .first()
        .ok_or_else(|| Error::shape("concat_channels", "no inputs"))?
        .shape();
    for p in parts {
        let s = p.shape();
        if (s.n, s.h, s.w) != (first.n, first.h, first.w) {
            return Err(Error::shape(
                "concat_channels",
                format!("{s} is incompatible with {first} outside the channel axis"),
            ));
        }
    }
    let channels: Vec<usize> = parts.iter().map(|p| p.shape().c).collect();
    let total: usize = channels.iter().sum();
    let out_shape = Shape::new(first.n, total, first.h, first.w);
    let plane = first.plane();
    let mut data = Vec::with_capacity(out_shape.len());
    for n in 0..first.n {
        for p in parts {
            let c = p.shape().c;
            let start = n * c * plane;
            data.extend_from_slice(&p.value().data()[start..start + c * plane]);
        }
    }
    let out = Tensor::from_parts(out_shape, data);
    tape.record("concat_channels", out, parts, || ConcatRule { channels })
}

struct PadRule {
    input: Shape,
    pad_h: usize,
    pad_w: usize,
}

impl<T: Real> Backward<T> for PadRule {
    fn backward(&self, g: &Tensor<T>, _needs: &[bool]) -> Result<Vec<Option<Tensor<T>>>> {
        let s = self.input;
        let gs = g.shape();
        let gx = Tensor::from_fn(s, |n, c, h, w| {
            g.data()[gs.index(n, c, h + self.pad_h, w + self.pad_w)]
        });
        Ok(vec![Some(gx)])
    }
}

/// Pads height by `pad_h` and width by `pad_w` on both sides with `value`.
pub fn pad2d<T: Real>(
    tape: &mut Tape<T>,
    x: &Var<T>,
    pad_h: usize,
    pad_w: usize,
    value: T,
) -> Result<Var<T>> {
    let s = x.shape();
    if pad_h == 0 && pad_w == 0 {
        return Ok(x.clone());
    }
    let out_shape = Shape::new(s.n, s.c, s.h + 2 * pad_h, s.w + 2 * pad_w);
    let mut out = Tensor::full(out_shape, value);
    let src = x.value().data();
    let dst = out.data_mut();
    for n in 0..s.n {
        for c in 0..s.c {
            for h in 0..s.h {
                let from = s.index(n, c, h, 0);
                let to = out_shape.index(n, c, h + pad_h, pad_w);
                dst[to..to + s.w].copy_from_slice(&src[from..from + s.w]);
            }
        }
    }
    tape.record("pad2d", out, &[x], || PadRule {
        input: s,
        pad_h,
        pad_w,
    })
}

struct FillRule {
    shape: Shape,
    scale: f64,
}

impl<T: Real> Backward<T> for FillRule {
    fn backward(&self, g: &Tensor<T>, _needs: &[bool]) -> Result<Vec<Option<Tensor<T>>>> {
        let v = g.item()? * T::from_f64_lossy(self.scale);
        Ok(vec![Some(Tensor::full(self.shape, v))])
    }
}

/// Sum of all elements as a `1x1x1x1` tensor. Accumulates in `f64`.
pub fn sum<T: Real>(tape: &mut Tape<T>, x: &Var<T>) -> Result<Var<T>> {
    let out = Tensor::scalar(T::from_f64_lossy(x.value().sum_f64()));
    let shape = x.shape();
    tape.record("sum", out, &[x], || FillRule { shape, scale: 1.0 })
}

/// Mean of all elements as a `1x1x1x1` tensor.
pub fn mean<T: Real>(tape: &mut Tape<T>, x: &Var<T>) -> Result<Var<T>> {
    let count = x.shape().len() as f64;
    let out = Tensor::scalar(T::from_f64_lossy(x.value().sum_f64() / count));
    let shape = x.shape();
    tape.record("mean", out, &[x], || FillRule {
        shape,
        scale: 1.0 / count,
    })
}

struct MulSpatialRule<T: Real> {
    x: Rc<Tensor<T>>,
    gate: Rc<Tensor<T>>,
}

impl<T: Real> Backward<T> for MulSpatialRule<T> {
    fn backward(&self, g: &Tensor<T>, needs: &[bool]) -> Result<Vec<Option<Tensor<T>>>> {
        let s = self.x.shape();
        let plane = s.plane();
        let gx = needs[0].then(|| {
            let mut out = g.clone();
            for n in 0..s.n {
                let gate = self.gate.plane(n, 0);
                for c in 0..s.c {
                    let start = s.index(n, c, 0, 0);
                    for (v, &m) in out.data_mut()[start..start + plane].iter_mut().zip(gate) {
                        *v = *v * m;
                    }
                }
            }
            out
        });
        let ggate = needs[1].then(|| {
            let mut out = Tensor::zeros(self.gate.shape());
            for n in 0..s.n {
                let acc = &mut out.data_mut()[n * plane..(n + 1) * plane];
                for c in 0..s.c {
                    let start = s.index(n, c, 0, 0);
                    let gp = &g.data()[start..start + plane];
                    let xp = &self.x.data()[start..start + plane];
                    for ((a, &gv), &xv) in acc.iter_mut().zip(gp).zip(xp) {
                        *a = *a + gv * xv;
                    }
                }
            }
            out
        });
        Ok(vec![gx, ggate])
    }
}

/// Multiplies every channel of `x` by the single-channel `gate` map.
pub fn mul_spatial<T: Real>(tape: &mut Tape<T>, x: &Var<T>, gate: &Var<T>) -> Result<Var<T>> {
    let s = x.shape();
    let gs = gate.shape();
    if gs != Shape::new(s.n, 1, s.h, s.w) {
        return Err(Error::shape(
            "mul_spatial",
            format!("gate {gs} does not fit input {s}"),
        ));
    }
    let plane = s.plane();
    let mut out = x.value().clone();
    for n in 0..s.n {
        let g = gate.value().plane(n, 0);
        for c in 0..s.c {
            let start = s.index(n, c, 0, 0);
            for (v, &m) in out.data_mut()[start..start + plane].iter_mut().zip(g) {
                *v = *v * m;
            }
        }
    }
    tape.record("mul_spatial", out, &[x, gate], || MulSpatialRule {
        x: x.value_rc(),
        gate: gate.value_rc(),
    })
}
