use std::rc::Rc;

use crate::autodiff::{Backward, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Real, Shape, Tensor};

struct ScatterRule {
    input: Shape,
    /// Flat input index receiving each output cell's gradient.
    argmax: Rc<Vec<usize>>,
}

impl<T: Real> Backward<T> for ScatterRule {
    fn backward(&self, g: &Tensor<T>, _needs: &[bool]) -> Result<Vec<Option<Tensor<T>>>> {
        let mut gx = Tensor::zeros(self.input);
        let dst = gx.data_mut();
        for (&i, &v) in self.argmax.iter().zip(g.data()) {
            dst[i] = dst[i] + v;
        }
        Ok(vec![Some(gx)])
    }
}

/// Max pooling over `kernel×kernel` windows. Returns the pooled map and the
/// flat input index chosen for every output cell; ties go to the first
/// maximum in row-major window order.
pub fn maxpool2d<T: Real>(
    tape: &mut Tape<T>,
    x: &Var<T>,
    kernel: usize,
    stride: usize,
) -> Result<(Var<T>, Vec<usize>)> {
    let s = x.shape();
    if kernel == 0 || stride == 0 {
        return Err(Error::shape(
            "maxpool2d",
            "kernel and stride must be positive",
        ));
    }
    if kernel > s.h || kernel > s.w {
        return Err(Error::shape(
            "maxpool2d",
            format!("kernel {kernel} exceeds input {}x{}", s.h, s.w),
        ));
    }
    let oh = (s.h - kernel) / stride + 1;
    let ow = (s.w - kernel) / stride + 1;
    let out_shape = Shape::new(s.n, s.c, oh, ow);
    let src = x.value().data();
    let mut out = Vec::with_capacity(out_shape.len());
    let mut argmax = Vec::with_capacity(out_shape.len());
    for n in 0..s.n {
        for c in 0..s.c {
            let base = s.index(n, c, 0, 0);
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = base + oy * stride * s.w + ox * stride;
                    for ky in 0..kernel {
                        let row = base + (oy * stride + ky) * s.w + ox * stride;
                        for i in row..row + kernel {
                            if src[i] > src[best] {
                                best = i;
                            }
                        }
                    }
                    out.push(src[best]);
                    argmax.push(best);
                }
            }
        }
    }
    let argmax = Rc::new(argmax);
    let indices = argmax.as_ref().clone();
    let out = Tensor::from_parts(out_shape, out);
    let var = tape.record("maxpool2d", out, &[x], || ScatterRule { input: s, argmax })?;
    Ok((var, indices))
}

struct ChannelPoolRule {
    input: Shape,
    argmax: Vec<usize>,
}

impl<T: Real> Backward<T> for ChannelPoolRule {
    fn backward(&self, g: &Tensor<T>, _needs: &[bool]) -> Result<Vec<Option<Tensor<T>>>> {
        let s = self.input;
        let p = s.plane();
        let inv_c = T::from_f64_lossy(1.0 / s.c as f64);
        let mut gx = Tensor::zeros(s);
        let dst = gx.data_mut();
        for n in 0..s.n {
            let g_max = g.plane(n, 0);
            let g_avg = g.plane(n, 1);
            for c in 0..s.c {
                let start = s.index(n, c, 0, 0);
                for (v, &ga) in dst[start..start + p].iter_mut().zip(g_avg) {
                    *v = ga * inv_c;
                }
            }
            for (pos, &gm) in g_max.iter().enumerate() {
                let i = self.argmax[n * p + pos];
                dst[i] = dst[i] + gm;
            }
        }
        Ok(vec![Some(gx)])
    }
}

/// Per-position max (channel 0) and mean (channel 1) across channels.
pub fn channel_pool<T: Real>(tape: &mut Tape<T>, x: &Var<T>) -> Result<Var<T>> {
    let s = x.shape();
    let p = s.plane();
    let out_shape = Shape::new(s.n, 2, s.h, s.w);
    let mut out = Tensor::zeros(out_shape);
    let mut argmax = Vec::with_capacity(s.n * p);
    let inv_c = T::from_f64_lossy(1.0 / s.c as f64);
    let src = x.value();
    for n in 0..s.n {
        let mut best: Vec<usize> = (0..p).map(|pos| s.index(n, 0, 0, 0) + pos).collect();
        let mut total = src.plane(n, 0).to_vec();
        for c in 1..s.c {
            let plane = src.plane(n, c);
            let start = s.index(n, c, 0, 0);
            for pos in 0..p {
                if plane[pos] > src.data()[best[pos]] {
                    best[pos] = start + pos;
                }
                total[pos] = total[pos] + plane[pos];
            }
        }
        let od = out.data_mut();
        let max_start = out_shape.index(n, 0, 0, 0);
        let avg_start = out_shape.index(n, 1, 0, 0);
        for pos in 0..p {
            od[max_start + pos] = src.data()[best[pos]];
            od[avg_start + pos] = total[pos] * inv_c;
        }
        argmax.extend(best);
    }
    tape.record("channel_pool", out, &[x], || ChannelPoolRule {
        input: s,
        argmax,
    })
}

/// Source row/column for target index `i` under nearest-neighbour resizing.
#[inline]
pub fn nearest_source(i: usize, src: usize, target: usize) -> usize {
    i * src / target
}

/// Nearest-neighbour resize to `(target_h, target_w)`; gradients of every
/// replicated group are summed back into its source cell.
pub fn upsample_nearest<T: Real>(
    tape: &mut Tape<T>,
    x: &Var<T>,
    target_h: usize,
    target_w: usize,
) -> Result<Var<T>> {
    let s = x.shape();
    if target_h < s.h || target_w < s.w {
        return Err(Error::shape(
            "upsample_nearest",
            format!(
                "target {target_h}x{target_w} is smaller than source {}x{}",
                s.h, s.w
            ),
        ));
    }
    if (target_h, target_w) == (s.h, s.w) {
        return Ok(x.clone());
    }
    let out_shape = Shape::new(s.n, s.c, target_h, target_w);
    let mut index = Vec::with_capacity(out_shape.len());
    for n in 0..s.n {
        for c in 0..s.c {
            for y in 0..target_h {
                let sy = nearest_source(y, s.h, target_h);
                for xx in 0..target_w {
                    index.push(s.index(n, c, sy, nearest_source(xx, s.w, target_w)));
                }
            }
        }
    }
    let src = x.value().data();
    let out = Tensor::from_parts(out_shape, index.iter().map(|&i| src[i]).collect());
    tape.record("upsample_nearest", out, &[x], || ScatterRule {
        input: s,
        argmax: Rc::new(index),
    })
}
