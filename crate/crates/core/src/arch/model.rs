use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::blocks::{self, ConvParams, DacParams, ATTENTION_KERNEL};
use super::config::{FusionMode, NetworkConfig, LEVELS};
use crate::autodiff::{self, Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{self, BatchNormState, ConvSpec, DropBlockSpec, Mode, BN_EPSILON, BN_MOMENTUM};
use crate::tensor::{Real, Shape, Tensor};

#[derive(Clone, Copy, PartialEq, Debug)]
pub enum Init {
    /// Normal with standard deviation `sqrt(2 / fan_in)`.
    HeNormal {
        fan_in: usize,
    },
    Zeros,
    Ones,
}

#[derive(Clone, PartialEq, Debug)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Shape,
    pub init: Init,
    pub trainable: bool,
}

#[derive(Default)]
struct Layout {
    entries: Vec<ParamSpec>,
}

impl Layout {
    fn push(&mut self, name: String, shape: Shape, init: Init, trainable: bool) {
        self.entries.push(ParamSpec {
            name,
            shape,
            init,
            trainable,
        });
    }

    fn conv(&mut self, prefix: &str, spec: &ConvSpec, bias: bool) {
        let fan_in = spec.in_channels * spec.kernel * spec.kernel;
        self.push(
            format!("{prefix}/weight"),
            spec.weight_shape(),
            Init::HeNormal { fan_in },
            true,
        );
        if bias {
            self.push(
                format!("{prefix}/bias"),
                spec.bias_shape(),
                Init::Zeros,
                true,
            );
        }
    }

    fn batchnorm(&mut self, prefix: &str, channels: usize) {
        let shape = Shape::new(1, channels, 1, 1);
        self.push(format!("{prefix}/gamma"), shape, Init::Ones, true);
        self.push(format!("{prefix}/beta"), shape, Init::Zeros, true);
        self.push(format!("{prefix}/running_mean"), shape, Init::Zeros, false);
        self.push(format!("{prefix}/running_var"), shape, Init::Ones, false);
    }

    fn conv_block(&mut self, prefix: &str, in_c: usize, out_c: usize) {
        for (i, c_in) in [in_c, out_c].into_iter().enumerate() {
            let spec = ConvSpec::same(c_in, out_c, 3, 1).expect("odd kernel");
            self.conv(&format!("{prefix}/conv{i}"), &spec, false);
            self.batchnorm(&format!("{prefix}/bn{i}"), out_c);
        }
    }
}

fn layout(cfg: &NetworkConfig) -> Layout {
    let mut l = Layout::default();
    let levels = cfg.levels();
    let bott = cfg.bottleneck_channels;

    let mut c_in = cfg.in_channels;
    for (i, &c) in levels.iter().enumerate() {
        l.conv_block(&format!("enc{i}/block"), c_in, c);
        c_in = c;
    }
    l.conv_block("bottleneck/block", c_in, bott);
    if cfg.use_sa {
        l.conv(
            "bottleneck/sa/conv",
            &ConvSpec::same(2, 1, ATTENTION_KERNEL, 1).expect("odd"),
            true,
        );
    }
    if cfg.use_dac {
        for (j, &rate) in cfg.dac_rates.iter().enumerate() {
            let spec = ConvSpec::same(bott, bott, 3, rate).expect("odd kernel");
            l.conv(&format!("bottleneck/dac/stage{j}"), &spec, true);
        }
        l.conv(
            "bottleneck/dac/projection",
            &ConvSpec::pointwise(bott, bott),
            true,
        );
    }
    if cfg.use_mkp {
        for &k in &cfg.mkp_kernels {
            l.conv(
                &format!("bottleneck/mkp/pool{k}"),
                &ConvSpec::pointwise(bott, 1),
                true,
            );
        }
    }
    if cfg.has_context_arm() {
        let arm = bott
            + if cfg.use_mkp {
                cfg.mkp_kernels.len()
            } else {
                0
            };
        let fuse_in = match cfg.fusion_mode {
            FusionMode::ConcatThenProject => bott + arm,
            FusionMode::Add => arm,
        };
        l.conv(
            "bottleneck/fuse/projection",
            &ConvSpec::pointwise(fuse_in, bott),
            true,
        );
    }

    let mut below = bott;
    for i in (0..LEVELS).rev() {
        let c = levels[i];
        l.push(
            format!("dec{i}/up/weight"),
            Shape::new(below, c, 2, 2),
            Init::HeNormal { fan_in: below },
            true,
        );
        l.push(
            format!("dec{i}/up/bias"),
            Shape::new(1, c, 1, 1),
            Init::Zeros,
            true,
        );
        l.conv_block(&format!("dec{i}/block"), 2 * c, c);
        below = c;
    }
    l.conv("head/conv", &ConvSpec::pointwise(levels[0], 1), true);
    l
}

/// Parameter and buffer specifications of a network, in registration order.
pub fn parameter_layout(cfg: &NetworkConfig) -> Vec<ParamSpec> {
    layout(cfg).entries
}

/// Trainable parameters contributed by the DAC block: one biased 3×3
/// convolution per rate plus the biased 1×1 projection.
pub fn dac_parameter_total(cfg: &NetworkConfig) -> usize {
    let c = cfg.bottleneck_channels;
    cfg.dac_rates.len() * (c * c * 9 + c) + (c * c + c)
}

/// Trainable parameters contributed by MKP: each kernel's biased 1×1
/// reduction to one channel, plus the fusion projection weights consuming
/// the extra channels.
pub fn mkp_parameter_total(cfg: &NetworkConfig) -> usize {
    let c = cfg.bottleneck_channels;
    let k = cfg.mkp_kernels.len();
    k * (c + 1) + k * c
}

/// Trainable parameters of the fusion projection for an arm without MKP.
pub fn fusion_parameter_total(cfg: &NetworkConfig) -> usize {
    let c = cfg.bottleneck_channels;
    match cfg.fusion_mode {
        FusionMode::ConcatThenProject => 2 * c * c + c,
        FusionMode::Add => c * c + c,
    }
}

fn is_buffer(name: &str) -> bool {
    name.ends_with("/running_mean") || name.ends_with("/running_var")
}

/// Named tensors of a model, ordered by name. Batch-norm running
/// statistics live here too but are not trainable.
#[derive(Clone, PartialEq, Debug, Default)]
pub struct ParamStore<T: Real = f32> {
    entries: BTreeMap<String, Tensor<T>>,
}

impl<T: Real> ParamStore<T> {
    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.entries.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.entries.get_mut(name)
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) -> Option<Tensor<T>> {
        self.entries.insert(name.into(), value)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn is_trainable(name: &str) -> bool {
        !is_buffer(name)
    }

    pub fn trainable(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.iter().filter(|(k, _)| Self::is_trainable(k))
    }

    pub fn trainable_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.entries
            .iter_mut()
            .filter(|(k, _)| Self::is_trainable(k))
            .map(|(k, v)| (k.as_str(), v))
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|(k, v)| (k.clone(), v.cast()))
                .collect(),
        }
    }
}

/// Tape handles for every trainable parameter of one forward pass.
pub struct Bindings<T: Real> {
    vars: BTreeMap<String, Var<T>>,
}

impl<T: Real> Bindings<T> {
    pub fn get(&self, name: &str) -> Result<&Var<T>> {
        self.vars
            .get(name)
            .ok_or_else(|| Error::Config(format!("missing parameter {name}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Var<T>)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), v))
    }

    fn conv(&self, prefix: &str) -> Result<ConvParams<T>> {
        Ok(ConvParams::new(
            self.get(&format!("{prefix}/weight"))?.clone(),
            self.get(&format!("{prefix}/bias"))?.clone(),
        ))
    }
}

/// How a forward pass treats stochastic and batch-statistic layers.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct ForwardOptions {
    pub mode: Mode,
    /// Mixed into the DropBlock seeds; successive training steps use successive values.
    pub step: u64,
}

pub struct ForwardOutput<T: Real> {
    /// Probability map `(N, 1, H, W)`.
    pub output: Var<T>,
    /// Updated batch-norm running statistics (train mode only).
    pub running_stats: Vec<(String, Tensor<T>)>,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn fnv1a(text: &str) -> u64 {
    text.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0100_0000_01b3)
    })
}

struct Pass<'a, T: Real> {
    tape: &'a mut Tape<T>,
    params: &'a Bindings<T>,
    store: &'a ParamStore<T>,
    config: &'a NetworkConfig,
    options: ForwardOptions,
    dropblock_calls: u64,
    running_stats: Vec<(String, Tensor<T>)>,
}

impl<T: Real> Pass<'_, T> {
    fn dropblock(&mut self, x: &Var<T>) -> Result<Var<T>> {
        let s = x.shape();
        let side = s.h.min(s.w);
        let largest_odd = if side % 2 == 1 { side } else { side - 1 };
        let db = self.config.dropblock;
        let seed = splitmix64(
            self.config.seed ^ splitmix64(self.options.step) ^ splitmix64(!self.dropblock_calls),
        );
        self.dropblock_calls += 1;
        let spec = DropBlockSpec::new(
            db.block_size.min(largest_odd),
            db.keep_prob,
            self.options.mode,
            seed,
        );
        nn::dropblock(self.tape, x, &spec)
    }

    fn batchnorm(&mut self, prefix: &str, x: &Var<T>) -> Result<Var<T>> {
        let buffer = |suffix: &str| {
            self.store
                .get(&format!("{prefix}/{suffix}"))
                .cloned()
                .ok_or_else(|| Error::Config(format!("missing buffer {prefix}/{suffix}")))
        };
        let mut state = BatchNormState {
            running_mean: buffer("running_mean")?,
            running_var: buffer("running_var")?,
            momentum: BN_MOMENTUM,
            epsilon: BN_EPSILON,
            mode: self.options.mode,
        };
        let gamma = self.params.get(&format!("{prefix}/gamma"))?;
        let beta = self.params.get(&format!("{prefix}/beta"))?;
        let y = nn::batchnorm2d(self.tape, x, gamma, beta, &mut state)?;
        if self.options.mode == Mode::Train {
            self.running_stats
                .push((format!("{prefix}/running_mean"), state.running_mean));
            self.running_stats
                .push((format!("{prefix}/running_var"), state.running_var));
        }
        Ok(y)
    }

    /// `(conv3×3 → DropBlock → BN → ReLU) × 2`.
    fn conv_block(&mut self, prefix: &str, x: &Var<T>, out_c: usize) -> Result<Var<T>> {
        let mut h = x.clone();
        for i in 0..2 {
            let spec = ConvSpec::same(h.shape().c, out_c, 3, 1)?;
            let w = self.params.get(&format!("{prefix}/conv{i}/weight"))?;
            h = nn::conv2d(self.tape, &h, w, None, &spec)?;
            h = self.dropblock(&h)?;
            h = self.batchnorm(&format!("{prefix}/bn{i}"), &h)?;
            h = autodiff::relu(self.tape, &h)?;
        }
        Ok(h)
    }

    fn bottleneck(&mut self, x: &Var<T>) -> Result<Var<T>> {
        let cfg = self.config;
        let base = self.conv_block("bottleneck/block", x, cfg.bottleneck_channels)?;
        let attention = if cfg.use_sa {
            let conv = self.params.conv("bottleneck/sa/conv")?;
            blocks::spatial_attention(self.tape, &base, &conv)?.output
        } else {
            base.clone()
        };
        if !cfg.has_context_arm() {
            return Ok(attention);
        }
        let dense = if cfg.use_dac {
            let params = DacParams {
                stages: (0..cfg.dac_rates.len())
                    .map(|j| self.params.conv(&format!("bottleneck/dac/stage{j}")))
                    .collect::<Result<_>>()?,
                projection: self.params.conv("bottleneck/dac/projection")?,
            };
            blocks::dac(self.tape, &base, &params, &cfg.dac_rates, cfg.dac_residual)?
        } else {
            base
        };
        let context = if cfg.use_mkp {
            let branches = cfg
                .mkp_kernels
                .iter()
                .map(|k| self.params.conv(&format!("bottleneck/mkp/pool{k}")))
                .collect::<Result<Vec<_>>>()?;
            blocks::mkp(self.tape, &dense, &branches, &cfg.mkp_kernels)?
        } else {
            dense
        };
        let projection = self.params.conv("bottleneck/fuse/projection")?;
        blocks::fuse(
            self.tape,
            &attention,
            &context,
            &projection,
            cfg.fusion_mode,
        )
    }

    fn network(&mut self, image: &Var<T>) -> Result<Var<T>> {
        let levels = self.config.levels();
        let mut skips = Vec::with_capacity(LEVELS);
        let mut h = image.clone();
        for (i, &c) in levels.iter().enumerate() {
            let e = self.conv_block(&format!("enc{i}/block"), &h, c)?;
            h = nn::maxpool2d(self.tape, &e, 2, 2)?.0;
            skips.push(e);
        }
        h = self.bottleneck(&h)?;
        for i in (0..LEVELS).rev() {
            let up = nn::upsample_conv(
                self.tape,
                &h,
                self.params.get(&format!("dec{i}/up/weight"))?,
                Some(self.params.get(&format!("dec{i}/up/bias"))?),
            )?;
            let joined = autodiff::concat_channels(self.tape, &[&up, &skips[i]])?;
            h = self.conv_block(&format!("dec{i}/block"), &joined, levels[i])?;
        }
        let head = self.params.conv("head/conv")?;
        let logits = nn::conv2d(
            self.tape,
            &h,
            &head.weight,
            Some(&head.bias),
            &ConvSpec::pointwise(levels[0], 1),
        )?;
        autodiff::sigmoid(self.tape, &logits)
    }
}

/// The three-level MC-UNet with its parameters and batch-norm statistics.
#[derive(Clone, Debug)]
pub struct Model<T: Real = f32> {
    config: NetworkConfig,
    params: ParamStore<T>,
    mode: Mode,
    step: u64,
}

impl<T: Real> Model<T> {
    /// Builds a freshly initialized network. Every tensor is drawn from its
    /// own generator seeded by `(config.seed, name)`, so toggling a module
    /// leaves all other initial values untouched.
    pub fn new(config: NetworkConfig) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::default();
        for spec in parameter_layout(&config) {
            let value = match spec.init {
                Init::Zeros => Tensor::zeros(spec.shape),
                Init::Ones => Tensor::ones(spec.shape),
                Init::HeNormal { fan_in } => {
                    let mut rng =
                        ChaCha8Rng::seed_from_u64(splitmix64(config.seed ^ fnv1a(&spec.name)));
                    Tensor::randn(spec.shape, (2.0 / fan_in as f64).sqrt(), &mut rng)
                }
            };
            params.insert(spec.name, value);
        }
        Ok(Model {
            config,
            params,
            mode: Mode::Train,
            step: 0,
        })
    }

    /// Assembles a model from stored tensors, checking them against the layout.
    pub fn from_parts(config: NetworkConfig, params: ParamStore<T>) -> Result<Self> {
        config.validate()?;
        let expected = parameter_layout(&config);
        if expected.len() != params.len() {
            return Err(Error::Checkpoint(format!(
                "config expects {} tensors, found {}",
                expected.len(),
                params.len()
            )));
        }
        for spec in &expected {
            match params.get(&spec.name) {
                None => return Err(Error::Checkpoint(format!("missing tensor {}", spec.name))),
                Some(t) if t.shape() != spec.shape => {
                    return Err(Error::Checkpoint(format!(
                        "tensor {} has dims {}, expected {}",
                        spec.name,
                        t.shape(),
                        spec.shape
                    )))
                }
                Some(_) => {}
            }
        }
        Ok(Model {
            config,
            params,
            mode: Mode::Eval,
            step: 0,
        })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn set_mode(&mut self, mode: Mode) {
        self.mode = mode;
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    /// Number of trainable scalars.
    pub fn parameter_count(&self) -> usize {
        self.params.trainable().map(|(_, t)| t.len()).sum()
    }

    pub fn cast<U: Real>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            params: self.params.cast(),
            mode: self.mode,
            step: self.step,
        }
    }

    /// Places every trainable parameter on `tape`, tracked when `track` is set.
    pub fn bind(&self, tape: &mut Tape<T>, track: bool) -> Bindings<T> {
        let vars = self
            .params
            .trainable()
            .map(|(name, t)| {
                let v = if track {
                    tape.param(t.clone())
                } else {
                    tape.constant(t.clone())
                };
                (name.to_string(), v)
            })
            .collect();
        Bindings { vars }
    }

    /// Smallest accepted input size that covers `height x width`.
    pub fn aligned_dims(&self, height: usize, width: usize) -> (usize, usize) {
        let align = 1 << LEVELS;
        let min = self.config.min_input_side();
        let target = |v: usize| v.max(min).div_ceil(align) * align;
        (target(height), target(width))
    }

    /// Verifies that an input of `shape` can pass through the network.
    pub fn check_input(&self, shape: Shape) -> Result<()> {
        if shape.c != self.config.in_channels {
            return Err(Error::shape(
                "forward",
                format!(
                    "image has {} channels, network expects {}",
                    shape.c, self.config.in_channels
                ),
            ));
        }
        let align = 1 << LEVELS;
        let min = self.config.min_input_side();
        let (th, tw) = self.aligned_dims(shape.h, shape.w);
        if (th, tw) != (shape.h, shape.w) {
            return Err(Error::shape(
                "forward",
                format!(
                    "input {}x{} must have sides that are multiples of {align} and at least {min}; \
                     pad to {th}x{tw} (+{} rows, +{} cols)",
                    shape.h,
                    shape.w,
                    th - shape.h,
                    tw - shape.w
                ),
            ));
        }
        Ok(())
    }

    /// Runs the network without touching model state.
    pub fn forward_pass(
        &self,
        tape: &mut Tape<T>,
        bindings: &Bindings<T>,
        image: &Var<T>,
        options: ForwardOptions,
    ) -> Result<ForwardOutput<T>> {
        self.check_input(image.shape())?;
        let mut pass = Pass {
            tape,
            params: bindings,
            store: &self.params,
            config: &self.config,
            options,
            dropblock_calls: 0,
            running_stats: Vec::new(),
        };
        let output = pass.network(image)?;
        Ok(ForwardOutput {
            output,
            running_stats: pass.running_stats,
        })
    }

    /// Forward pass in the model's current mode. In train mode the
    /// batch-norm running statistics are updated and the DropBlock step
    /// counter advances.
    pub fn forward(
        &mut self,
        tape: &mut Tape<T>,
        bindings: &Bindings<T>,
        image: &Var<T>,
    ) -> Result<Var<T>> {
        let options = ForwardOptions {
            mode: self.mode,
            step: self.step,
        };
        let out = self.forward_pass(tape, bindings, image, options)?;
        if self.mode == Mode::Train {
            for (name, value) in out.running_stats {
                self.params.insert(name, value);
            }
            self.step += 1;
        }
        Ok(out.output)
    }

    /// Eval-mode probability map for `image`. Safe to call concurrently.
    pub fn predict(&self, image: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::no_grad();
        let bindings = self.bind(&mut tape, false);
        let options = ForwardOptions {
            mode: Mode::Eval,
            step: 0,
        };
        let out =
            self.forward_pass(&mut tape, &bindings, &Var::constant(image.clone()), options)?;
        Ok(out.output.into_value())
    }
}
