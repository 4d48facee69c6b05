//! Bottleneck modules: spatial attention, dense atrous convolution,
//! multi-kernel pooling and the fusion of their outputs.

use super::config::FusionMode;
use crate::autodiff::{self, Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{self, ConvSpec};
use crate::tensor::Real;

/// Weight and bias of one convolution.
#[derive(Clone, Debug)]
pub struct ConvParams<T: Real> {
    pub weight: Var<T>,
    pub bias: Var<T>,
}

impl<T: Real> ConvParams<T> {
    pub fn new(weight: Var<T>, bias: Var<T>) -> Self {
        ConvParams { weight, bias }
    }

    fn apply(&self, tape: &mut Tape<T>, x: &Var<T>, spec: &ConvSpec) -> Result<Var<T>> {
        nn::conv2d(tape, x, &self.weight, Some(&self.bias), spec)
    }

    fn pointwise(&self, tape: &mut Tape<T>, x: &Var<T>) -> Result<Var<T>> {
        let w = self.weight.shape();
        self.apply(tape, x, &ConvSpec::pointwise(w.c, w.n))
    }
}

pub const ATTENTION_KERNEL: usize = 7;

/// Output of [`spatial_attention`].
pub struct Attention<T: Real> {
    pub output: Var<T>,
    /// `σ(conv7×7([max; mean]))`, shape `(N, 1, H, W)`.
    pub map: Var<T>,
}

/// Gates `input` by a per-position map computed from its channel-wise max
/// and mean. `conv` maps 2 channels to 1 with a 7×7 kernel.
pub fn spatial_attention<T: Real>(
    tape: &mut Tape<T>,
    input: &Var<T>,
    conv: &ConvParams<T>,
) -> Result<Attention<T>> {
    let s = input.shape();
    if s.h == 0 || s.w == 0 {
        return Err(Error::shape("spatial_attention", "empty spatial extent"));
    }
    let pooled = nn::channel_pool(tape, input)?;
    let spec = ConvSpec::same(2, 1, ATTENTION_KERNEL, 1)?;
    let logits = conv.apply(tape, &pooled, &spec)?;
    let map = autodiff::sigmoid(tape, &logits)?;
    let output = autodiff::mul_spatial(tape, input, &map)?;
    Ok(Attention { output, map })
}

/// Parameters of the dense atrous convolution block: one same-size 3×3
/// convolution per cascade stage plus the 1×1 projection closing the
/// deepest branch.
#[derive(Clone, Debug)]
pub struct DacParams<T: Real> {
    pub stages: Vec<ConvParams<T>>,
    pub projection: ConvParams<T>,
}

/// Cascaded dilated convolutions. Stage `j` convolves the ReLU of stage
/// `j-1` at rate `rates[j]`; every stage output is a branch, and the last
/// stage additionally feeds a 1×1 projection branch. The result is the sum
/// of all branches, plus `x` when `residual` is set.
pub fn dac<T: Real>(
    tape: &mut Tape<T>,
    x: &Var<T>,
    params: &DacParams<T>,
    rates: &[usize],
    residual: bool,
) -> Result<Var<T>> {
    let c = x.shape().c;
    if params.stages.len() != rates.len() {
        return Err(Error::shape(
            "dac",
            format!(
                "{} stage parameter sets for {} rates",
                params.stages.len(),
                rates.len()
            ),
        ));
    }
    let mut branches = Vec::with_capacity(rates.len() + 1);
    let mut current = x.clone();
    for (stage, &rate) in params.stages.iter().zip(rates) {
        let spec = ConvSpec::same(c, c, 3, rate)?;
        let branch = stage.apply(tape, &current, &spec)?;
        current = autodiff::relu(tape, &branch)?;
        branches.push(branch);
    }
    branches.push(params.projection.pointwise(tape, &current)?);

    let mut total = if residual {
        x.clone()
    } else {
        branches.remove(0)
    };
    for b in &branches {
        total = autodiff::add(tape, &total, b)?;
    }
    Ok(total)
}

/// Multi-kernel pooling: for each kernel `k`, max-pool with stride `k`,
/// reduce to one channel with a 1×1 conv, and resize back to the input
/// size; the branch maps are appended to the input channels.
pub fn mkp<T: Real>(
    tape: &mut Tape<T>,
    d: &Var<T>,
    branches: &[ConvParams<T>],
    kernels: &[usize],
) -> Result<Var<T>> {
    let s = d.shape();
    if branches.len() != kernels.len() {
        return Err(Error::shape(
            "mkp",
            format!(
                "{} branch parameter sets for {} kernels",
                branches.len(),
                kernels.len()
            ),
        ));
    }
    let largest = kernels.iter().copied().max().unwrap_or(0);
    if s.h < largest || s.w < largest {
        return Err(Error::shape(
            "mkp",
            format!(
                "input {}x{} is smaller than the largest kernel {largest}",
                s.h, s.w
            ),
        ));
    }
    let mut parts = vec![d.clone()];
    for (conv, &k) in branches.iter().zip(kernels) {
        let (pooled, _) = nn::maxpool2d(tape, d, k, k)?;
        let reduced = conv.pointwise(tape, &pooled)?;
        parts.push(nn::upsample_nearest(tape, &reduced, s.h, s.w)?);
    }
    let refs: Vec<&Var<T>> = parts.iter().collect();
    autodiff::concat_channels(tape, &refs)
}

/// Combines the attention arm and the context (DAC→MKP) arm. `projection`
/// is the 1×1 conv whose input width depends on `mode`.
pub fn fuse<T: Real>(
    tape: &mut Tape<T>,
    attention: &Var<T>,
    context: &Var<T>,
    projection: &ConvParams<T>,
    mode: FusionMode,
) -> Result<Var<T>> {
    let (a, c) = (attention.shape(), context.shape());
    if (a.n, a.h, a.w) != (c.n, c.h, c.w) {
        return Err(Error::shape(
            "fuse",
            format!("attention {a} and context {c} differ spatially"),
        ));
    }
    match mode {
        FusionMode::ConcatThenProject => {
            let joined = autodiff::concat_channels(tape, &[attention, context])?;
            projection.pointwise(tape, &joined)
        }
        FusionMode::Add => {
            let projected = projection.pointwise(tape, context)?;
            if projected.shape() != a {
                return Err(Error::shape(
                    "fuse",
                    format!(
                        "projected context {} does not match attention {a}",
                        projected.shape()
                    ),
                ));
            }
            autodiff::add(tape, attention, &projected)
        }
    }
}
