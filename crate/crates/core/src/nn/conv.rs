//! Dilated 2-D convolution and the stride-2 transposed convolution used for
//! decoder upsampling.
//!
//! Two interchangeable kernels are provided for `conv2d`: a direct loop that
//! serves as the reference, and an im2col lowering that feeds a packed GEMM.
//! The lowering is tiled over output rows so the column buffer stays bounded
//! at full fundus resolution.

use std::rc::Rc;

use crate::autodiff::{Backward, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Real, Shape, Tensor};

/// Upper bound on column-buffer elements per tile.
const TILE_ELEMS: usize = 1 << 20;
/// Below this many multiply-accumulates the direct loop wins over lowering.
const DIRECT_MAC_LIMIT: usize = 1 << 14;

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub dilation: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvSpec {
    /// Stride-1 convolution padded so `(H, W)` is preserved. Needs an odd kernel.
    pub fn same(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        dilation: usize,
    ) -> Result<Self> {
        if kernel.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "same-size convolution needs an odd kernel, got {kernel}"
            )));
        }
        let spec = ConvSpec {
            in_channels,
            out_channels,
            kernel,
            dilation,
            stride: 1,
            padding: dilation * (kernel - 1) / 2,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn pointwise(in_channels: usize, out_channels: usize) -> Self {
        ConvSpec {
            in_channels,
            out_channels,
            kernel: 1,
            dilation: 1,
            stride: 1,
            padding: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0
            || self.out_channels == 0
            || self.kernel == 0
            || self.dilation == 0
            || self.stride == 0
        {
            return Err(Error::Config(format!(
                "convolution parameters must be positive: {self:?}"
            )));
        }
        Ok(())
    }

    pub fn weight_shape(&self) -> Shape {
        Shape::new(
            self.out_channels,
            self.in_channels,
            self.kernel,
            self.kernel,
        )
    }

    pub fn bias_shape(&self) -> Shape {
        Shape::new(1, self.out_channels, 1, 1)
    }

    pub fn parameter_count(&self) -> usize {
        self.weight_shape().len() + self.out_channels
    }

    fn extent(&self) -> usize {
        self.dilation * (self.kernel - 1) + 1
    }

    /// Output `(H, W)`, or `None` if either would be non-positive.
    pub fn output_hw(&self, h: usize, w: usize) -> Option<(usize, usize)> {
        let f = |len: usize| {
            let padded = len + 2 * self.padding;
            (padded >= self.extent()).then(|| (padded - self.extent()) / self.stride + 1)
        };
        Some((f(h)?, f(w)?))
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.padding == 0
    }
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum ConvAlgorithm {
    Auto,
    Direct,
    Im2col,
}

impl ConvAlgorithm {
    fn resolve(self, spec: &ConvSpec, out: Shape) -> ConvAlgorithm {
        match self {
            ConvAlgorithm::Auto => {
                let macs = out.len() * spec.in_channels * spec.kernel * spec.kernel;
                if macs < DIRECT_MAC_LIMIT {
                    ConvAlgorithm::Direct
                } else {
                    ConvAlgorithm::Im2col
                }
            }
            other => other,
        }
    }
}

fn check_conv<T: Real>(
    x: &Var<T>,
    weight: &Var<T>,
    bias: Option<&Var<T>>,
    spec: &ConvSpec,
) -> Result<Shape> {
    spec.validate()?;
    let s = x.shape();
    if s.c != spec.in_channels {
        return Err(Error::shape(
            "conv2d",
            format!(
                "input has {} channels, spec expects {}",
                s.c, spec.in_channels
            ),
        ));
    }
    if weight.shape() != spec.weight_shape() {
        return Err(Error::shape(
            "conv2d",
            format!(
                "weight {} does not match {}",
                weight.shape(),
                spec.weight_shape()
            ),
        ));
    }
    if let Some(b) = bias {
        if b.shape() != spec.bias_shape() {
            return Err(Error::shape(
                "conv2d",
                format!("bias {} does not match {}", b.shape(), spec.bias_shape()),
            ));
        }
    }
    let (oh, ow) = spec.output_hw(s.h, s.w).ok_or_else(|| {
        Error::shape(
            "conv2d",
            format!(
                "output would be empty for input {}x{} with {spec:?}",
                s.h, s.w
            ),
        )
    })?;
    Ok(Shape::new(s.n, spec.out_channels, oh, ow))
}

pub fn conv2d<T: Real>(
    tape: &mut Tape<T>,
    x: &Var<T>,
    weight: &Var<T>,
    bias: Option<&Var<T>>,
    spec: &ConvSpec,
) -> Result<Var<T>> {
    conv2d_with(tape, x, weight, bias, spec, ConvAlgorithm::Auto)
}

/// `y = Σ x[i + r·k]·w[k] + b` with zero padding, using the chosen kernel.
pub fn conv2d_with<T: Real>(
    tape: &mut Tape<T>,
    x: &Var<T>,
    weight: &Var<T>,
    bias: Option<&Var<T>>,
    spec: &ConvSpec,
    algorithm: ConvAlgorithm,
) -> Result<Var<T>> {
    let out_shape = check_conv(x, weight, bias, spec)?;
    let algorithm = algorithm.resolve(spec, out_shape);
    let mut out = match algorithm {
        ConvAlgorithm::Direct => direct_forward(x.value(), weight.value(), spec, out_shape),
        _ => lowered_forward(x.value(), weight.value(), spec, out_shape),
    };
    if let Some(b) = bias {
        add_channel_bias(&mut out, b.value());
    }
    let mut inputs = vec![x, weight];
    inputs.extend(bias);
    tape.record("conv2d", out, &inputs, || ConvRule {
        x: x.value_rc(),
        weight: weight.value_rc(),
        spec: *spec,
        algorithm,
    })
}

fn add_channel_bias<T: Real>(out: &mut Tensor<T>, bias: &Tensor<T>) {
    let s = out.shape();
    let plane = s.plane();
    let b = bias.data();
    for n in 0..s.n {
        for (c, &bc) in b.iter().enumerate() {
            let start = s.index(n, c, 0, 0);
            for v in &mut out.data_mut()[start..start + plane] {
                *v = *v + bc;
            }
        }
    }
}

fn channel_sums<T: Real>(g: &Tensor<T>) -> Tensor<T> {
    let s = g.shape();
    Tensor::from_fn([1, s.c, 1, 1], |_, c, _, _| {
        (0..s.n)
            .map(|n| g.plane(n, c).iter().copied().sum::<T>())
            .sum()
    })
}

struct ConvRule<T: Real> {
    x: Rc<Tensor<T>>,
    weight: Rc<Tensor<T>>,
    spec: ConvSpec,
    algorithm: ConvAlgorithm,
}

impl<T: Real> Backward<T> for ConvRule<T> {
    fn backward(&self, g: &Tensor<T>, needs: &[bool]) -> Result<Vec<Option<Tensor<T>>>> {
        let (gx, gw) = match self.algorithm {
            ConvAlgorithm::Direct => {
                direct_backward(&self.x, &self.weight, g, &self.spec, needs[0], needs[1])
            }
            _ => lowered_backward(&self.x, &self.weight, g, &self.spec, needs[0], needs[1]),
        };
        let mut grads = vec![gx, gw];
        if needs.len() == 3 {
            grads.push(needs[2].then(|| channel_sums(g)));
        }
        Ok(grads)
    }
}

/// Input coordinate read by output coordinate `o` at tap `k`, if in bounds.
#[inline]
fn source(o: usize, k: usize, spec: &ConvSpec, len: usize) -> Option<usize> {
    let pos = (o * spec.stride + k * spec.dilation) as isize - spec.padding as isize;
    (pos >= 0 && (pos as usize) < len).then_some(pos as usize)
}

fn direct_forward<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    spec: &ConvSpec,
    out_shape: Shape,
) -> Tensor<T> {
    let s = x.shape();
    let k = spec.kernel;
    let mut out = Tensor::zeros(out_shape);
    let od = out.data_mut();
    for n in 0..s.n {
        for o in 0..spec.out_channels {
            for oy in 0..out_shape.h {
                for ox in 0..out_shape.w {
                    let mut acc = T::zero();
                    for ci in 0..spec.in_channels {
                        for ky in 0..k {
                            let Some(iy) = source(oy, ky, spec, s.h) else {
                                continue;
                            };
                            for kx in 0..k {
                                let Some(ix) = source(ox, kx, spec, s.w) else {
                                    continue;
                                };
                                acc = acc + x.at(n, ci, iy, ix) * w.at(o, ci, ky, kx);
                            }
                        }
                    }
                    od[out_shape.index(n, o, oy, ox)] = acc;
                }
            }
        }
    }
    out
}

fn direct_backward<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    g: &Tensor<T>,
    spec: &ConvSpec,
    need_x: bool,
    need_w: bool,
) -> (Option<Tensor<T>>, Option<Tensor<T>>) {
    let s = x.shape();
    let gs = g.shape();
    let ws = w.shape();
    let k = spec.kernel;
    let mut gx = need_x.then(|| Tensor::zeros(s));
    let mut gw = need_w.then(|| Tensor::zeros(ws));
    for n in 0..s.n {
        for o in 0..spec.out_channels {
            for oy in 0..gs.h {
                for ox in 0..gs.w {
                    let go = g.at(n, o, oy, ox);
                    for ci in 0..spec.in_channels {
                        for ky in 0..k {
                            let Some(iy) = source(oy, ky, spec, s.h) else {
                                continue;
                            };
                            for kx in 0..k {
                                let Some(ix) = source(ox, kx, spec, s.w) else {
                                    continue;
                                };
                                if let Some(gx) = gx.as_mut() {
                                    let i = s.index(n, ci, iy, ix);
                                    gx.data_mut()[i] = gx.data()[i] + go * w.at(o, ci, ky, kx);
                                }
                                if let Some(gw) = gw.as_mut() {
                                    let i = ws.index(o, ci, ky, kx);
                                    gw.data_mut()[i] = gw.data()[i] + go * x.at(n, ci, iy, ix);
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    (gx, gw)
}

/// Output-row tiling for the lowered kernel.
fn row_tiles(spec: &ConvSpec, out_h: usize, out_w: usize) -> impl Iterator<Item = (usize, usize)> {
    let rows_k = spec.in_channels * spec.kernel * spec.kernel;
    let per_tile = (TILE_ELEMS / (rows_k * out_w).max(1)).clamp(1, out_h);
    (0..out_h)
        .step_by(per_tile)
        .map(move |start| (start, (start + per_tile).min(out_h)))
}

/// Fills `cols` (`K × rows·out_w`, row-major) for output rows `[y0, y1)` of sample `n`.
fn im2col<T: Real>(
    x: &Tensor<T>,
    n: usize,
    spec: &ConvSpec,
    out_w: usize,
    y0: usize,
    y1: usize,
    cols: &mut [T],
) {
    let s = x.shape();
    let k = spec.kernel;
    let tile = (y1 - y0) * out_w;
    for ci in 0..spec.in_channels {
        let src = x.plane(n, ci);
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst = &mut cols[row * tile..(row + 1) * tile];
                for (t, oy) in (y0..y1).enumerate() {
                    let line = &mut dst[t * out_w..(t + 1) * out_w];
                    match source(oy, ky, spec, s.h) {
                        None => line.fill(T::zero()),
                        Some(iy) => {
                            let src_row = &src[iy * s.w..(iy + 1) * s.w];
                            for (ox, v) in line.iter_mut().enumerate() {
                                *v = match source(ox, kx, spec, s.w) {
                                    Some(ix) => src_row[ix],
                                    None => T::zero(),
                                };
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Scatter-adds `cols` back into the gradient plane set of sample `n`.
#[allow(clippy::too_many_arguments)]
fn col2im<T: Real>(
    cols: &[T],
    gx: &mut Tensor<T>,
    n: usize,
    spec: &ConvSpec,
    out_w: usize,
    y0: usize,
    y1: usize,
) {
    let s = gx.shape();
    let k = spec.kernel;
    let tile = (y1 - y0) * out_w;
    for ci in 0..spec.in_channels {
        let base = s.index(n, ci, 0, 0);
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = &cols[row * tile..(row + 1) * tile];
                for (t, oy) in (y0..y1).enumerate() {
                    let Some(iy) = source(oy, ky, spec, s.h) else {
                        continue;
                    };
                    let line = &src[t * out_w..(t + 1) * out_w];
                    let dst = gx.data_mut();
                    for (ox, &v) in line.iter().enumerate() {
                        if let Some(ix) = source(ox, kx, spec, s.w) {
                            let i = base + iy * s.w + ix;
                            dst[i] = dst[i] + v;
                        }
                    }
                }
            }
        }
    }
}

fn lowered_forward<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    spec: &ConvSpec,
    out_shape: Shape,
) -> Tensor<T> {
    let s = x.shape();
    let kk = spec.in_channels * spec.kernel * spec.kernel;
    let oc = spec.out_channels;
    let p = out_shape.plane();
    let mut out = Tensor::zeros(out_shape);
    if spec.is_pointwise() {
        for n in 0..s.n {
            let xs = &x.data()[n * s.c * p..(n + 1) * s.c * p];
            let ys = &mut out.data_mut()[n * oc * p..(n + 1) * oc * p];
            T::gemm(oc, kk, p, w.data(), (kk, 1), xs, (p, 1), ys, (p, 1), false);
        }
        return out;
    }
    let mut cols = Vec::new();
    for n in 0..s.n {
        for (y0, y1) in row_tiles(spec, out_shape.h, out_shape.w) {
            let tile = (y1 - y0) * out_shape.w;
            cols.resize(kk * tile, T::zero());
            im2col(x, n, spec, out_shape.w, y0, y1, &mut cols);
            let offset = n * oc * p + y0 * out_shape.w;
            let ys = &mut out.data_mut()[offset..];
            T::gemm(
                oc,
                kk,
                tile,
                w.data(),
                (kk, 1),
                &cols,
                (tile, 1),
                ys,
                (p, 1),
                false,
            );
        }
    }
    out
}

fn lowered_backward<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    g: &Tensor<T>,
    spec: &ConvSpec,
    need_x: bool,
    need_w: bool,
) -> (Option<Tensor<T>>, Option<Tensor<T>>) {
    let s = x.shape();
    let gs = g.shape();
    let kk = spec.in_channels * spec.kernel * spec.kernel;
    let oc = spec.out_channels;
    let p = gs.plane();
    let mut gx = need_x.then(|| Tensor::zeros(s));
    let mut gw = need_w.then(|| Tensor::zeros(w.shape()));

    if spec.is_pointwise() {
        for n in 0..s.n {
            let gn = &g.data()[n * oc * p..(n + 1) * oc * p];
            if let Some(gw) = gw.as_mut() {
                let xs = &x.data()[n * s.c * p..(n + 1) * s.c * p];
                T::gemm(
                    oc,
                    p,
                    kk,
                    gn,
                    (p, 1),
                    xs,
                    (1, p),
                    gw.data_mut(),
                    (kk, 1),
                    true,
                );
            }
            if let Some(gx) = gx.as_mut() {
                let dst = &mut gx.data_mut()[n * s.c * p..(n + 1) * s.c * p];
                T::gemm(kk, oc, p, w.data(), (1, kk), gn, (p, 1), dst, (p, 1), false);
            }
        }
        return (gx, gw);
    }

    let mut cols = Vec::new();
    for n in 0..s.n {
        for (y0, y1) in row_tiles(spec, gs.h, gs.w) {
            let tile = (y1 - y0) * gs.w;
            let gn = &g.data()[n * oc * p + y0 * gs.w..];
            cols.resize(kk * tile, T::zero());
            if let Some(gw) = gw.as_mut() {
                im2col(x, n, spec, gs.w, y0, y1, &mut cols);
                T::gemm(
                    oc,
                    tile,
                    kk,
                    gn,
                    (p, 1),
                    &cols,
                    (1, tile),
                    gw.data_mut(),
                    (kk, 1),
                    true,
                );
            }
            if let Some(gx) = gx.as_mut() {
                T::gemm(
                    kk,
                    oc,
                    tile,
                    w.data(),
                    (1, kk),
                    gn,
                    (p, 1),
                    &mut cols,
                    (tile, 1),
                    false,
                );
                col2im(&cols, gx, n, spec, gs.w, y0, y1);
            }
        }
    }
    (gx, gw)
}

/// Weight layout `(in, out, 2, 2)`; every input cell writes its own 2×2 output block.
pub fn upsample_conv<T: Real>(
    tape: &mut Tape<T>,
    x: &Var<T>,
    weight: &Var<T>,
    bias: Option<&Var<T>>,
) -> Result<Var<T>> {
    let s = x.shape();
    let ws = weight.shape();
    if ws.n != s.c || ws.h != 2 || ws.w != 2 {
        return Err(Error::shape(
            "upsample_conv",
            format!(
                "weight {ws} does not fit input {s}; expected ({}, out, 2, 2)",
                s.c
            ),
        ));
    }
    let oc = ws.c;
    if let Some(b) = bias {
        if b.shape() != Shape::new(1, oc, 1, 1) {
            return Err(Error::shape(
                "upsample_conv",
                format!("bias {} for {oc} outputs", b.shape()),
            ));
        }
    }
    let out_shape = Shape::new(s.n, oc, 2 * s.h, 2 * s.w);
    let p = s.plane();
    let cols = oc * 4;
    let mut out = Tensor::zeros(out_shape);
    let mut scratch = vec![T::zero(); cols * p];
    for n in 0..s.n {
        let xs = &x.value().data()[n * s.c * p..(n + 1) * s.c * p];
        T::gemm(
            cols,
            s.c,
            p,
            weight.value().data(),
            (1, cols),
            xs,
            (p, 1),
            &mut scratch,
            (p, 1),
            false,
        );
        let od = out.data_mut();
        for o in 0..oc {
            let b = bias.map_or(T::zero(), |b| b.value().data()[o]);
            for a in 0..2 {
                for bx in 0..2 {
                    let row = &scratch[(o * 4 + a * 2 + bx) * p..(o * 4 + a * 2 + bx + 1) * p];
                    for h in 0..s.h {
                        for w in 0..s.w {
                            od[out_shape.index(n, o, 2 * h + a, 2 * w + bx)] = row[h * s.w + w] + b;
                        }
                    }
                }
            }
        }
    }
    let mut inputs = vec![x, weight];
    inputs.extend(bias);
    tape.record("upsample_conv", out, &inputs, || UpConvRule {
        x: x.value_rc(),
        weight: weight.value_rc(),
    })
}

struct UpConvRule<T: Real> {
    x: Rc<Tensor<T>>,
    weight: Rc<Tensor<T>>,
}

impl<T: Real> Backward<T> for UpConvRule<T> {
    fn backward(&self, g: &Tensor<T>, needs: &[bool]) -> Result<Vec<Option<Tensor<T>>>> {
        let s = self.x.shape();
        let oc = self.weight.shape().c;
        let p = s.plane();
        let cols = oc * 4;
        let gs = g.shape();
        let mut gx = needs[0].then(|| Tensor::zeros(s));
        let mut gw = needs[1].then(|| Tensor::zeros(self.weight.shape()));
        let mut gathered = vec![T::zero(); cols * p];
        for n in 0..s.n {
            for o in 0..oc {
                for a in 0..2 {
                    for bx in 0..2 {
                        let row =
                            &mut gathered[(o * 4 + a * 2 + bx) * p..(o * 4 + a * 2 + bx + 1) * p];
                        for h in 0..s.h {
                            for w in 0..s.w {
                                row[h * s.w + w] = g.data()[gs.index(n, o, 2 * h + a, 2 * w + bx)];
                            }
                        }
                    }
                }
            }
            if let Some(gx) = gx.as_mut() {
                let dst = &mut gx.data_mut()[n * s.c * p..(n + 1) * s.c * p];
                T::gemm(
                    s.c,
                    cols,
                    p,
                    self.weight.data(),
                    (cols, 1),
                    &gathered,
                    (p, 1),
                    dst,
                    (p, 1),
                    false,
                );
            }
            if let Some(gw) = gw.as_mut() {
                let xs = &self.x.data()[n * s.c * p..(n + 1) * s.c * p];
                T::gemm(
                    s.c,
                    p,
                    cols,
                    xs,
                    (p, 1),
                    &gathered,
                    (1, p),
                    gw.data_mut(),
                    (cols, 1),
                    true,
                );
            }
        }
        let mut grads = vec![gx, gw];
        if needs.len() == 3 {
            grads.push(needs[2].then(|| channel_sums(g)));
        }
        Ok(grads)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run(x: Tensor<f64>, w: Tensor<f64>, spec: ConvSpec, algo: ConvAlgorithm) -> Tensor<f64> {
        let mut tape = Tape::no_grad();
        conv2d_with(
            &mut tape,
            &Var::constant(x),
            &Var::constant(w),
            None,
            &spec,
            algo,
        )
        .unwrap()
        .into_value()
    }

    fn spec(c_in: usize, c_out: usize, k: usize, r: usize, p: usize) -> ConvSpec {
        ConvSpec {
            in_channels: c_in,
            out_channels: c_out,
            kernel: k,
            dilation: r,
            stride: 1,
            padding: p,
        }
    }

    #[test]
    fn ones_kernel_counts_in_bounds_taps() {
        for algo in [ConvAlgorithm::Direct, ConvAlgorithm::Im2col] {
            let y = run(
                Tensor::ones([1, 1, 5, 5]),
                Tensor::ones([1, 1, 3, 3]),
                spec(1, 1, 3, 1, 1),
                algo,
            );
            assert_eq!(y.dims(), [1, 1, 5, 5]);
            assert_eq!(y.at(0, 0, 2, 2), 9.0);
            assert_eq!(y.at(0, 0, 0, 0), 4.0);
            assert_eq!(y.at(0, 0, 4, 4), 4.0);

            let y = run(
                Tensor::ones([1, 1, 5, 5]),
                Tensor::ones([1, 1, 3, 3]),
                spec(1, 1, 3, 2, 2),
                algo,
            );
            assert_eq!(y.dims(), [1, 1, 5, 5]);
            assert_eq!(y.at(0, 0, 2, 2), 9.0);
            assert_eq!(y.at(0, 0, 0, 0), 4.0);
        }
    }

    #[test]
    fn delta_kernel_is_identity() {
        let x = Tensor::<f64>::from_fn([1, 1, 4, 5], |_, _, h, w| (h * 5 + w) as f64);
        let mut k = Tensor::zeros([1, 1, 3, 3]);
        k.data_mut()[4] = 1.0;
        for algo in [ConvAlgorithm::Direct, ConvAlgorithm::Im2col] {
            assert_eq!(run(x.clone(), k.clone(), spec(1, 1, 3, 1, 1), algo), x);
        }
    }

    #[test]
    fn same_padding_preserves_size() {
        for r in [1, 3, 5] {
            let s = ConvSpec::same(2, 3, 3, r).unwrap();
            assert_eq!(s.padding, r);
            assert_eq!(s.output_hw(9, 11), Some((9, 11)));
        }
        assert!(ConvSpec::same(1, 1, 2, 1).is_err());
    }

    #[test]
    fn strided_output_size() {
        let s = ConvSpec {
            stride: 2,
            ..spec(1, 1, 3, 1, 1)
        };
        assert_eq!(s.output_hw(7, 8), Some((4, 4)));
        assert_eq!(spec(1, 1, 3, 3, 0).output_hw(6, 9), None);
    }

    #[test]
    fn rejects_channel_mismatch_and_empty_output() {
        let mut tape = Tape::<f64>::no_grad();
        let x = Var::constant(Tensor::ones([1, 2, 4, 4]));
        let w = Var::constant(Tensor::ones([1, 1, 3, 3]));
        assert!(conv2d(&mut tape, &x, &w, None, &spec(1, 1, 3, 1, 1)).is_err());
        let x1 = Var::constant(Tensor::ones([1, 1, 2, 2]));
        assert!(conv2d(&mut tape, &x1, &w, None, &spec(1, 1, 3, 1, 0)).is_err());
    }

    #[test]
    fn tiled_lowering_matches_direct_on_tall_input() {
        // Enough rows that the lowering splits into several tiles.
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(7);
        let x = Tensor::<f64>::rand_uniform([1, 8, 300, 60], -1.0, 1.0, &mut rng);
        let w = Tensor::<f64>::rand_uniform([2, 8, 3, 3], -1.0, 1.0, &mut rng);
        let s = spec(8, 2, 3, 2, 2);
        assert!(row_tiles(&s, 300, 60).count() > 1);
        let a = run(x.clone(), w.clone(), s, ConvAlgorithm::Direct);
        let b = run(x, w, s, ConvAlgorithm::Im2col);
        assert!(a.max_abs_diff(&b) < 1e-10);
    }

    #[test]
    fn upsample_conv_fills_blocks() {
        let mut tape = Tape::<f64>::no_grad();
        let x = Var::constant(Tensor::from_vec([1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let w = Var::constant(Tensor::ones([1, 1, 2, 2]));
        let y = upsample_conv(&mut tape, &x, &w, None).unwrap().into_value();
        assert_eq!(y.dims(), [1, 1, 4, 4]);
        let want = [
            1., 1., 2., 2., 1., 1., 2., 2., 3., 3., 4., 4., 3., 3., 4., 4.,
        ];
        assert_eq!(y.data(), &want);

        let zero = Var::constant(Tensor::zeros([1, 3, 2, 2]));
        let b = Var::constant(Tensor::from_vec([1, 3, 1, 1], vec![0.5, -1.0, 2.0]).unwrap());
        let y = upsample_conv(&mut tape, &x, &zero, Some(&b))
            .unwrap()
            .into_value();
        assert_eq!(y.dims(), [1, 3, 4, 4]);
        assert!(y.plane(0, 1).iter().all(|&v| v == -1.0));

        let wrong = Var::constant(Tensor::ones([2, 1, 2, 2]));
        assert!(upsample_conv(&mut tape, &x, &wrong, None).is_err());
    }
}
