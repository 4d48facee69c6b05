//! Central finite-difference verification of every differentiable operator
//! and of the assembled network.
//!
//! Each case builds a scalar probe `L = Σ out ⊙ R` with a fixed random `R`.
//! Operator cases compare the full analytic gradient of every input against
//! per-element differences; the error is `max|a − n| / max(max|a|, max|n|)`.
//! The network case compares directional derivatives `Σ gᵢ·dᵢ` along random
//! directions over the image and all parameters together, with the error
//! taken relative to `Σ |gᵢ·dᵢ|`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::arch::{
    dac, fuse, mkp, spatial_attention, ConvParams, DacParams, ForwardOptions, FusionMode, Model,
    NetworkConfig,
};
use crate::autodiff::{self, Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{self, BatchNormState, ConvAlgorithm, ConvSpec, DropBlockSpec, Mode};
use crate::tensor::{Real, Tensor};
use crate::train::bce_loss;

pub const TOLERANCE_F64: f64 = 1e-5;
pub const TOLERANCE_F32: f64 = 1e-3;

#[derive(Clone, Debug, Default)]
pub struct GradcheckOptions {
    pub seed: u64,
    /// Case name whose analytic gradient is deliberately perturbed before
    /// comparison; used to confirm the harness detects a faulty backward.
    pub corrupt: Option<String>,
    /// Restricts the run to cases whose name contains this substring.
    pub filter: Option<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub precision: &'static str,
    pub max_rel_err: f64,
    pub tolerance: f64,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tolerance
    }
}

#[derive(Clone, Copy, Debug)]
enum Fill {
    Normal,
    /// Distinct values at least `gap` apart in random order, so max and
    /// ReLU selections stay fixed under perturbation.
    Spaced {
        gap: f64,
    },
    Uniform {
        lo: f64,
        hi: f64,
    },
    /// Binary, not differentiated.
    Labels,
}

#[derive(Clone, Copy, Debug)]
struct Input {
    shape: [usize; 4],
    fill: Fill,
}

fn input(shape: [usize; 4], fill: Fill) -> Input {
    Input { shape, fill }
}

fn normal(shape: [usize; 4]) -> Input {
    input(shape, Fill::Normal)
}

fn spaced(shape: [usize; 4]) -> Input {
    input(shape, Fill::Spaced { gap: 0.05 })
}

#[derive(Clone, Debug)]
enum Op {
    Add,
    Mul,
    Relu,
    Sigmoid,
    Concat,
    Pad,
    MulSpatial,
    Mean,
    Conv {
        spec: ConvSpec,
        algorithm: ConvAlgorithm,
    },
    MaxPool {
        kernel: usize,
        stride: usize,
    },
    ChannelPool,
    UpsampleNearest {
        h: usize,
        w: usize,
    },
    UpsampleConv,
    BatchNorm(Mode),
    DropBlock(Mode),
    SpatialAttention,
    Dac {
        rates: Vec<usize>,
        residual: bool,
    },
    Mkp {
        kernels: Vec<usize>,
    },
    Fuse(FusionMode),
    Bce,
}

struct Case {
    name: String,
    op: Op,
    inputs: Vec<Input>,
}

fn case(name: impl Into<String>, op: Op, inputs: Vec<Input>) -> Case {
    Case {
        name: name.into(),
        op,
        inputs,
    }
}

fn conv_case(name: String, spec: ConvSpec, algorithm: ConvAlgorithm, hw: usize) -> Case {
    let inputs = vec![
        normal([1, spec.in_channels, hw, hw]),
        normal(spec.weight_shape().dims()),
        normal(spec.bias_shape().dims()),
    ];
    case(name, Op::Conv { spec, algorithm }, inputs)
}

fn cases() -> Result<Vec<Case>> {
    let mut out = vec![
        case(
            "add",
            Op::Add,
            vec![normal([1, 2, 3, 3]), normal([1, 2, 3, 3])],
        ),
        case(
            "mul",
            Op::Mul,
            vec![normal([1, 2, 3, 3]), normal([1, 2, 3, 3])],
        ),
        case("relu", Op::Relu, vec![spaced([1, 2, 4, 4])]),
        case("sigmoid", Op::Sigmoid, vec![normal([1, 2, 4, 4])]),
        case(
            "concat_channels",
            Op::Concat,
            vec![normal([1, 2, 3, 3]), normal([1, 1, 3, 3])],
        ),
        case("pad2d", Op::Pad, vec![normal([1, 2, 3, 4])]),
        case(
            "mul_spatial",
            Op::MulSpatial,
            vec![normal([1, 3, 3, 3]), normal([1, 1, 3, 3])],
        ),
        case("mean", Op::Mean, vec![normal([1, 2, 3, 3])]),
    ];
    for rate in [1, 2, 3, 5] {
        for (tag, algorithm) in [
            ("direct", ConvAlgorithm::Direct),
            ("im2col", ConvAlgorithm::Im2col),
        ] {
            out.push(conv_case(
                format!("conv2d_r{rate}_{tag}"),
                ConvSpec::same(2, 3, 3, rate)?,
                algorithm,
                7,
            ));
        }
    }
    let strided = ConvSpec {
        stride: 2,
        ..ConvSpec::same(2, 2, 3, 1)?
    };
    out.push(conv_case(
        "conv2d_stride2".into(),
        strided,
        ConvAlgorithm::Im2col,
        7,
    ));
    out.push(conv_case(
        "conv2d_pointwise".into(),
        ConvSpec::pointwise(3, 2),
        ConvAlgorithm::Auto,
        5,
    ));
    out.extend([
        case(
            "maxpool_k2",
            Op::MaxPool {
                kernel: 2,
                stride: 2,
            },
            vec![spaced([1, 2, 6, 6])],
        ),
        case(
            "maxpool_k3",
            Op::MaxPool {
                kernel: 3,
                stride: 3,
            },
            vec![spaced([1, 2, 7, 7])],
        ),
        case(
            "maxpool_k3_s1",
            Op::MaxPool {
                kernel: 3,
                stride: 1,
            },
            vec![spaced([1, 1, 5, 5])],
        ),
        case("channel_pool", Op::ChannelPool, vec![spaced([1, 3, 4, 4])]),
        case(
            "upsample_nearest",
            Op::UpsampleNearest { h: 7, w: 5 },
            vec![normal([1, 2, 3, 2])],
        ),
        case(
            "upsample_conv",
            Op::UpsampleConv,
            vec![
                normal([1, 3, 3, 3]),
                normal([3, 2, 2, 2]),
                normal([1, 2, 1, 1]),
            ],
        ),
        case(
            "batchnorm_train",
            Op::BatchNorm(Mode::Train),
            vec![
                normal([2, 3, 3, 3]),
                normal([1, 3, 1, 1]),
                normal([1, 3, 1, 1]),
            ],
        ),
        case(
            "batchnorm_eval",
            Op::BatchNorm(Mode::Eval),
            vec![
                normal([2, 3, 3, 3]),
                normal([1, 3, 1, 1]),
                normal([1, 3, 1, 1]),
            ],
        ),
        case(
            "dropblock_eval",
            Op::DropBlock(Mode::Eval),
            vec![normal([1, 2, 8, 8])],
        ),
        case(
            "dropblock_train",
            Op::DropBlock(Mode::Train),
            vec![normal([1, 2, 8, 8])],
        ),
        case(
            "spatial_attention",
            Op::SpatialAttention,
            vec![
                spaced([1, 3, 6, 6]),
                normal([1, 2, 7, 7]),
                normal([1, 1, 1, 1]),
            ],
        ),
        case(
            "dac",
            Op::Dac {
                rates: vec![1, 3, 5],
                residual: true,
            },
            {
                let mut v = vec![normal([1, 2, 6, 6])];
                for _ in 0..3 {
                    v.extend([normal([2, 2, 3, 3]), normal([1, 2, 1, 1])]);
                }
                v.extend([normal([2, 2, 1, 1]), normal([1, 2, 1, 1])]);
                v
            },
        ),
        case(
            "mkp",
            Op::Mkp {
                kernels: vec![2, 3, 5, 6],
            },
            {
                let mut v = vec![spaced([1, 2, 12, 12])];
                for _ in 0..4 {
                    v.extend([normal([1, 2, 1, 1]), normal([1, 1, 1, 1])]);
                }
                v
            },
        ),
        case(
            "fuse_concat",
            Op::Fuse(FusionMode::ConcatThenProject),
            vec![
                normal([1, 2, 3, 3]),
                normal([1, 3, 3, 3]),
                normal([2, 5, 1, 1]),
                normal([1, 2, 1, 1]),
            ],
        ),
        case(
            "fuse_add",
            Op::Fuse(FusionMode::Add),
            vec![
                normal([1, 2, 3, 3]),
                normal([1, 3, 3, 3]),
                normal([2, 3, 1, 1]),
                normal([1, 2, 1, 1]),
            ],
        ),
        case(
            "bce",
            Op::Bce,
            vec![
                input([1, 1, 4, 4], Fill::Uniform { lo: 0.05, hi: 0.95 }),
                input([1, 1, 4, 4], Fill::Labels),
            ],
        ),
    ]);
    Ok(out)
}

fn conv_params<T: Real>(w: &Var<T>, b: &Var<T>) -> ConvParams<T> {
    ConvParams::new(w.clone(), b.clone())
}

fn build<T: Real>(op: &Op, tape: &mut Tape<T>, v: &[Var<T>]) -> Result<Var<T>> {
    match op {
        Op::Add => autodiff::add(tape, &v[0], &v[1]),
        Op::Mul => autodiff::mul(tape, &v[0], &v[1]),
        Op::Relu => autodiff::relu(tape, &v[0]),
        Op::Sigmoid => autodiff::sigmoid(tape, &v[0]),
        Op::Concat => autodiff::concat_channels(tape, &[&v[0], &v[1]]),
        Op::Pad => autodiff::pad2d(tape, &v[0], 2, 1, T::zero()),
        Op::MulSpatial => autodiff::mul_spatial(tape, &v[0], &v[1]),
        Op::Mean => autodiff::mean(tape, &v[0]),
        Op::Conv { spec, algorithm } => {
            nn::conv2d_with(tape, &v[0], &v[1], Some(&v[2]), spec, *algorithm)
        }
        Op::MaxPool { kernel, stride } => Ok(nn::maxpool2d(tape, &v[0], *kernel, *stride)?.0),
        Op::ChannelPool => nn::channel_pool(tape, &v[0]),
        Op::UpsampleNearest { h, w } => nn::upsample_nearest(tape, &v[0], *h, *w),
        Op::UpsampleConv => nn::upsample_conv(tape, &v[0], &v[1], Some(&v[2])),
        Op::BatchNorm(mode) => {
            let c = v[0].shape().c;
            let mut state = BatchNormState::new(c, *mode);
            state.running_mean = Tensor::from_fn([1, c, 1, 1], |_, c, _, _| {
                T::from_f64_lossy(0.1 * c as f64 - 0.1)
            });
            state.running_var = Tensor::from_fn([1, c, 1, 1], |_, c, _, _| {
                T::from_f64_lossy(0.5 + 0.25 * c as f64)
            });
            nn::batchnorm2d(tape, &v[0], &v[1], &v[2], &mut state)
        }
        Op::DropBlock(mode) => nn::dropblock(tape, &v[0], &DropBlockSpec::new(3, 0.8, *mode, 11)),
        Op::SpatialAttention => {
            Ok(spatial_attention(tape, &v[0], &conv_params(&v[1], &v[2]))?.output)
        }
        Op::Dac { rates, residual } => {
            let stages = (0..rates.len())
                .map(|j| conv_params(&v[1 + 2 * j], &v[2 + 2 * j]))
                .collect();
            let k = 1 + 2 * rates.len();
            let params = DacParams {
                stages,
                projection: conv_params(&v[k], &v[k + 1]),
            };
            dac(tape, &v[0], &params, rates, *residual)
        }
        Op::Mkp { kernels } => {
            let branches: Vec<_> = (0..kernels.len())
                .map(|j| conv_params(&v[1 + 2 * j], &v[2 + 2 * j]))
                .collect();
            mkp(tape, &v[0], &branches, kernels)
        }
        Op::Fuse(mode) => fuse(tape, &v[0], &v[1], &conv_params(&v[2], &v[3]), *mode),
        Op::Bce => bce_loss(tape, &v[0], v[1].value(), None),
    }
}

fn fill_tensor(inp: &Input, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n: usize = inp.shape.iter().product();
    let data: Vec<f64> = match inp.fill {
        Fill::Normal => (0..n)
            .map(|_| rng.sample::<f64, _>(StandardNormal))
            .collect(),
        Fill::Uniform { lo, hi } => (0..n).map(|_| rng.gen_range(lo..hi)).collect(),
        Fill::Labels => (0..n)
            .map(|_| if rng.gen_bool(0.5) { 1.0 } else { 0.0 })
            .collect(),
        Fill::Spaced { gap } => {
            // Half-integer multiples of `gap`, so no value sits on the ReLU kink.
            let mut slots: Vec<f64> = (0..n)
                .map(|i| (i as f64 - (n / 2) as f64 + 0.5) * gap)
                .collect();
            rand::seq::SliceRandom::shuffle(slots.as_mut_slice(), rng);
            slots
        }
    };
    Tensor::from_vec(inp.shape, data).expect("input shape is valid")
}

/// `Σ out ⊙ R` accumulated in f64.
fn probe<T: Real>(out: &Tensor<T>, r: &Tensor<f64>) -> f64 {
    out.data()
        .iter()
        .zip(r.data())
        .map(|(o, r)| o.as_f64() * r)
        .sum()
}

fn rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    let scale = analytic
        .iter()
        .chain(numeric)
        .fold(0.0f64, |m, v| m.max(v.abs()));
    let diff = analytic
        .iter()
        .zip(numeric)
        .fold(0.0f64, |m, (a, n)| m.max((a - n).abs()));
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}

/// Finite-difference step for operator cases.
const OP_STEP: f64 = 1e-6;
/// Central steps tried for the network case.
const NETWORK_STEPS: [f64; 3] = [1e-5, 1e-6, 1e-7];
/// One-sided steps tried for the network case.
const NETWORK_ONE_SIDED_STEPS: [f64; 4] = [1e-5, 1e-6, 1e-7, 1e-8];

fn tolerance<T: Real>() -> f64 {
    if T::NAME == "f64" {
        TOLERANCE_F64
    } else {
        TOLERANCE_F32
    }
}

fn evaluate_op<T: Real>(op: &Op, values: &[Tensor<T>]) -> Result<Tensor<T>> {
    let mut tape = Tape::no_grad();
    let vars: Vec<Var<T>> = values.iter().map(|t| tape.constant(t.clone())).collect();
    Ok(build(op, &mut tape, &vars)?.into_value())
}

fn check_op<T: Real>(c: &Case, seed: u64, corrupt: bool) -> Result<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let values: Vec<Tensor<T>> = c
        .inputs
        .iter()
        .map(|i| fill_tensor(i, &mut rng).cast())
        .collect();

    let mut tape = Tape::new();
    let vars: Vec<Var<T>> = values
        .iter()
        .zip(&c.inputs)
        .map(|(t, i)| match i.fill {
            Fill::Labels => tape.constant(t.clone()),
            _ => tape.param(t.clone()),
        })
        .collect();
    let out = build(&c.op, &mut tape, &vars)?;
    let r = Tensor::<f64>::randn(out.shape(), 1.0, &mut rng);
    let weights = tape.constant(r.cast());
    let weighted = autodiff::mul(&mut tape, &out, &weights)?;
    let loss = autodiff::sum(&mut tape, &weighted)?;
    let grads = tape.backward(&loss)?;

    // The reference is always taken in f64 at the (possibly rounded) inputs,
    // so a 32-bit run measures the error of the 32-bit backward pass.
    let base: Vec<Tensor<f64>> = values.iter().map(Tensor::cast).collect();
    let mut analytic = Vec::new();
    let mut numeric = Vec::new();
    for (k, (var, inp)) in vars.iter().zip(&c.inputs).enumerate() {
        if matches!(inp.fill, Fill::Labels) {
            continue;
        }
        let g = grads
            .get(var)
            .ok_or_else(|| Error::Autodiff(format!("{}: no gradient for input {k}", c.name)))?;
        analytic.extend(g.data().iter().map(|v| v.as_f64()));
        for i in 0..base[k].len() {
            let mut shifted = base.clone();
            let x0 = base[k].data()[i];
            shifted[k].data_mut()[i] = x0 + OP_STEP;
            let up = probe(&evaluate_op(&c.op, &shifted)?, &r);
            shifted[k].data_mut()[i] = x0 - OP_STEP;
            let down = probe(&evaluate_op(&c.op, &shifted)?, &r);
            numeric.push((up - down) / (2.0 * OP_STEP));
        }
    }
    if corrupt {
        corrupt_gradient(&mut analytic);
    }
    Ok(CheckResult {
        name: c.name.clone(),
        precision: T::NAME,
        max_rel_err: rel_err(&analytic, &numeric),
        tolerance: tolerance::<T>(),
    })
}

fn corrupt_gradient(g: &mut [f64]) {
    for v in g.iter_mut() {
        *v *= 1.05;
    }
    if let Some(first) = g.first_mut() {
        *first += 0.1;
    }
}

/// Configuration used by the whole-network case: all modules on, a 48×48
/// input and narrow widths so the check stays quick.
pub fn network_check_config(seed: u64) -> NetworkConfig {
    NetworkConfig {
        base_channels: 4,
        bottleneck_channels: 8,
        seed,
        ..Default::default()
    }
}

pub const NETWORK_INPUT_SIDE: usize = 48;
const NETWORK_DIRECTIONS: usize = 3;

fn network_probe<T: Real>(model: &Model<T>, image: &Tensor<T>, r: &Tensor<f64>) -> Result<f64> {
    let mut tape = Tape::no_grad();
    let bindings = model.bind(&mut tape, false);
    let x = tape.constant(image.clone());
    let options = ForwardOptions {
        mode: Mode::Train,
        step: 0,
    };
    Ok(probe(
        model
            .forward_pass(&mut tape, &bindings, &x, options)?
            .output
            .value(),
        r,
    ))
}

fn shifted_network<T: Real>(
    base: &Model<T>,
    image: &Tensor<T>,
    directions: &[(String, Tensor<f64>)],
    image_dir: &Tensor<f64>,
    t: f64,
) -> Result<(Model<T>, Tensor<T>)> {
    let mut params = base.params().clone();
    for (name, d) in directions {
        let p = params
            .get_mut(name)
            .expect("direction names come from the store");
        for (v, dv) in p.data_mut().iter_mut().zip(d.data()) {
            *v = T::from_f64_lossy(v.as_f64() + t * dv);
        }
    }
    let img = image.zip_map(&image_dir.cast(), |a, b| a + T::from_f64_lossy(t) * b)?;
    Ok((Model::from_parts(base.config().clone(), params)?, img))
}

fn check_network<T: Real>(seed: u64, corrupt: bool) -> Result<CheckResult> {
    let side = NETWORK_INPUT_SIDE;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6e65_7477_6f72_6b00);
    // Freshly initialized biases are zero, so a convolution over a dead ReLU
    // region yields exact zeros that sit on the next ReLU's kink. Jittering
    // every trainable tensor moves the check to a generic point.
    let mut fresh = Model::<f64>::new(network_check_config(seed))?;
    for (_, t) in fresh.params_mut().trainable_mut() {
        let noise = Tensor::<f64>::randn(t.shape(), 0.1, &mut rng);
        t.add_assign(&noise)?;
    }
    let base: Model<T> = fresh.cast();
    let image: Tensor<T> =
        Tensor::<f64>::rand_uniform([1, 3, side, side], 0.0, 1.0, &mut rng).cast();
    let r = Tensor::<f64>::randn([1, 1, side, side], 1.0, &mut rng);

    let mut tape = Tape::new();
    let bindings = base.bind(&mut tape, true);
    let x = tape.param(image.clone());
    let options = ForwardOptions {
        mode: Mode::Train,
        step: 0,
    };
    let out = base.forward_pass(&mut tape, &bindings, &x, options)?.output;
    let weights = tape.constant(r.cast());
    let weighted = autodiff::mul(&mut tape, &out, &weights)?;
    let loss = autodiff::sum(&mut tape, &weighted)?;
    let grads = tape.backward(&loss)?;

    let base64: Model<f64> = base.cast();
    let image64: Tensor<f64> = image.cast();
    let mut analytic = Vec::with_capacity(NETWORK_DIRECTIONS);
    let mut numeric = Vec::with_capacity(NETWORK_DIRECTIONS);
    let mut magnitudes = Vec::with_capacity(NETWORK_DIRECTIONS);
    for _ in 0..NETWORK_DIRECTIONS {
        // Directions scaled to each tensor's own magnitude.
        let mut directions = Vec::new();
        let mut dot = 0.0;
        let mut mag = 0.0;
        for (name, var) in bindings.iter() {
            let value = var.value();
            let scale = (value.data().iter().map(|v| v.as_f64().powi(2)).sum::<f64>()
                / value.len() as f64)
                .sqrt()
                .max(0.1);
            let d = Tensor::<f64>::randn(value.shape(), scale, &mut rng);
            let g = grads.get(var).expect("every bound parameter is reached");
            dot += g
                .data()
                .iter()
                .zip(d.data())
                .map(|(g, d)| g.as_f64() * d)
                .sum::<f64>();
            mag += g
                .data()
                .iter()
                .zip(d.data())
                .map(|(g, d)| (g.as_f64() * d).abs())
                .sum::<f64>();
            directions.push((name.to_string(), d));
        }
        let image_dir = Tensor::<f64>::randn(image.shape(), 0.1, &mut rng);
        let gx = grads.get(&x).expect("input is tracked");
        dot += gx
            .data()
            .iter()
            .zip(image_dir.data())
            .map(|(g, d)| g.as_f64() * d)
            .sum::<f64>();
        mag += gx
            .data()
            .iter()
            .zip(image_dir.data())
            .map(|(g, d)| (g.as_f64() * d).abs())
            .sum::<f64>();

        // DropBlock zeroes whole blocks ahead of batch norm, so many ReLU
        // inputs share one value and cross zero together; a difference that
        // straddles such a crossing is useless. Central and both one-sided
        // differences at several steps are formed and the closest counts.
        let probe_at = |t: f64| -> Result<f64> {
            let (m, img) = shifted_network(&base64, &image64, &directions, &image_dir, t)?;
            network_probe(&m, &img, &r)
        };
        let center = probe_at(0.0)?;
        let mut estimates = Vec::new();
        for h in NETWORK_STEPS {
            estimates.push((probe_at(h)? - probe_at(-h)?) / (2.0 * h));
        }
        for h in NETWORK_ONE_SIDED_STEPS {
            estimates.push((probe_at(h)? - center) / h);
            estimates.push((center - probe_at(-h)?) / h);
        }
        analytic.push(dot);
        magnitudes.push(mag);
        numeric.push(estimates);
    }
    if corrupt {
        corrupt_gradient(&mut analytic);
    }
    // A directional derivative is a long dot product whose terms cancel;
    // its error is judged against the sum of absolute terms.
    let max_rel_err = analytic
        .iter()
        .zip(&numeric)
        .zip(&magnitudes)
        .map(|((a, ns), mag)| {
            ns.iter()
                .map(|n| (a - n).abs() / a.abs().max(n.abs()).max(*mag))
                .fold(f64::INFINITY, f64::min)
        })
        .fold(0.0, f64::max);
    Ok(CheckResult {
        name: "network_48x48".into(),
        precision: T::NAME,
        max_rel_err,
        tolerance: tolerance::<T>(),
    })
}

/// Names of every case, in run order.
pub fn case_names() -> Vec<String> {
    let mut names: Vec<String> = cases()
        .map(|cs| cs.into_iter().map(|c| c.name).collect())
        .unwrap_or_default();
    names.push("network_48x48".into());
    names
}

/// Runs every case in 64-bit and 32-bit precision.
pub fn run_suite(options: &GradcheckOptions) -> Result<Vec<CheckResult>> {
    let selected = |name: &str| options.filter.as_deref().is_none_or(|f| name.contains(f));
    let corrupt = |name: &str| options.corrupt.as_deref() == Some(name);
    let mut results = Vec::new();
    for (i, c) in cases()?.iter().enumerate() {
        if !selected(&c.name) {
            continue;
        }
        let seed = options.seed.wrapping_mul(1000).wrapping_add(i as u64);
        results.push(check_op::<f64>(c, seed, corrupt(&c.name))?);
        results.push(check_op::<f32>(c, seed, corrupt(&c.name))?);
    }
    if selected("network_48x48") {
        let name = "network_48x48";
        results.push(check_network::<f64>(options.seed, corrupt(name))?);
        results.push(check_network::<f32>(options.seed, corrupt(name))?);
    }
    Ok(results)
}

/// One line per result: `name precision max_rel_err tolerance PASS|FAIL`.
pub fn format_report(results: &[CheckResult]) -> String {
    let width = results.iter().map(|r| r.name.len()).max().unwrap_or(0);
    results
        .iter()
        .map(|r| {
            format!(
                "{:<width$} {} {:.3e} < {:.0e} {}\n",
                r.name,
                r.precision,
                r.max_rel_err,
                r.tolerance,
                if r.passed() { "PASS" } else { "FAIL" }
            )
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spaced_fill_is_distinct_and_nonzero() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let t = fill_tensor(&spaced([1, 1, 4, 4]), &mut rng);
        let mut v = t.data().to_vec();
        assert!(v.iter().all(|x| x.abs() >= 0.025 - 1e-12));
        v.sort_by(f64::total_cmp);
        assert!(v.windows(2).all(|w| w[1] - w[0] > 0.049));
    }

    #[test]
    fn rel_err_scale() {
        assert_eq!(rel_err(&[0.0], &[0.0]), 0.0);
        assert!((rel_err(&[1.0, 2.0], &[1.0, 2.02]) - 0.02 / 2.02).abs() < 1e-12);
    }

    #[test]
    fn corruption_is_detected() {
        let opts = GradcheckOptions {
            seed: 1,
            corrupt: Some("mul".into()),
            filter: Some("mul".into()),
        };
        let results = run_suite(&opts).unwrap();
        let mul: Vec<_> = results.iter().filter(|r| r.name == "mul").collect();
        assert_eq!(mul.len(), 2);
        assert!(mul.iter().all(|r| !r.passed()));
        assert!(results
            .iter()
            .filter(|r| r.name == "mul_spatial")
            .all(CheckResult::passed));
    }
}
