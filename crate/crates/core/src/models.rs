//! Generator and discriminator construction.
//!
//! Generator: `k7` stem, two stride-2 `k3` down-convs, residual blocks
//! (`conv-bn-relu-conv-bn` plus skip), two stride-2 `k4` transposed convs and
//! a `k7` output conv with tanh. Every conv except the output conv is followed
//! by batch norm.
//!
//! Discriminator: six `k4` hidden convs with leaky ReLU (batch norm from the
//! second on) whose stride drops from 2 to 1 (`k3`) once the map reaches 4×4,
//! then a two-conv head ending in a one-channel sigmoid score map.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::gradcheck::{self, Coverage, OpCheck};
use crate::tensor::{BatchStats, Element, RunningStats, Tape, Tensor, Var};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.9;
pub const LEAKY_SLOPE: f64 = 0.2;
pub const INIT_STD: f64 = 0.02;

/// Number of hidden convs in the discriminator.
pub const DISCRIMINATOR_HIDDEN: usize = 6;
/// Smallest score-map side reached by stride-2 discriminator layers.
const MIN_PATCH: usize = 4;

/// Declarative architecture description shared by both networks.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ModelSpec {
    /// Square input side in pixels; a multiple of 4.
    pub image_size: usize,
    /// Channels after the stem conv; deeper layers use multiples of it.
    pub base_width: usize,
    pub residual_blocks: usize,
    /// Generator input channels: RGB plus the skeleton plane.
    pub generator_in_channels: usize,
    pub paper_scale: bool,
}

impl ModelSpec {
    pub const DISCRIMINATOR_IN_CHANNELS: usize = 3;
    pub const OUT_CHANNELS: usize = 3;

    /// 128×128 input, 64 base channels, nine residual blocks.
    pub fn paper() -> Self {
        Self {
            image_size: 128,
            base_width: 64,
            residual_blocks: 9,
            generator_in_channels: 4,
            paper_scale: true,
        }
    }

    pub fn desk(image_size: usize, base_width: usize, residual_blocks: usize) -> Self {
        Self {
            image_size,
            base_width,
            residual_blocks,
            generator_in_channels: 4,
            paper_scale: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.paper_scale
            && (self.image_size != 128 || self.residual_blocks != 9 || self.generator_in_channels != 4)
        {
            return Err(Error::InvalidSpec(
                "paper scale requires 128px input, 9 residual blocks and 4 input channels".into(),
            ));
        }
        if self.base_width < 4 {
            return Err(Error::InvalidSpec(format!("base width {} < 4", self.base_width)));
        }
        if self.residual_blocks < 1 {
            return Err(Error::InvalidSpec("at least one residual block is required".into()));
        }
        if self.image_size < 8 || self.image_size % 4 != 0 {
            return Err(Error::InvalidSpec(format!(
                "image size {} must be a multiple of 4 and at least 8",
                self.image_size
            )));
        }
        if self.generator_in_channels == 0 {
            return Err(Error::InvalidSpec("generator needs input channels".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    Weight,
    Bias,
    Gamma,
    Beta,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub kind: ParamKind,
    pub value: Tensor<T>,
}

#[derive(Clone, Debug, PartialEq)]
enum Layer {
    Conv {
        weight: usize,
        bias: Option<usize>,
        stride: usize,
        pad: usize,
    },
    ConvTranspose {
        weight: usize,
        bias: Option<usize>,
        stride: usize,
        pad: usize,
    },
    Norm {
        gamma: usize,
        beta: usize,
        stats: usize,
    },
    Relu,
    LeakyRelu,
    Tanh,
    Sigmoid,
    Residual(Vec<Layer>),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics; running averages are reported for update.
    Train,
    /// Running statistics.
    Eval,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NetKind {
    Generator,
    Discriminator,
}

/// A parameterized feed-forward network.
#[derive(Clone, Debug, PartialEq)]
pub struct Network<T> {
    kind: NetKind,
    spec: ModelSpec,
    params: Vec<Param<T>>,
    running: Vec<(String, RunningStats<T>)>,
    layers: Vec<Layer>,
}

/// Batch statistics gathered during a training-mode forward pass.
pub struct StatUpdates<T> {
    updates: Vec<(usize, BatchStats<T>)>,
}

struct Builder<T> {
    params: Vec<Param<T>>,
    running: Vec<(String, RunningStats<T>)>,
}

impl<T: Element> Builder<T> {
    fn param(&mut self, name: String, kind: ParamKind, shape: &[usize]) -> usize {
        let init = match kind {
            ParamKind::Gamma => T::one(),
            _ => T::zero(),
        };
        self.params.push(Param {
            name,
            kind,
            value: Tensor::full(shape, init),
        });
        self.params.len() - 1
    }

    fn conv(&mut self, name: &str, c_in: usize, c_out: usize, k: usize, stride: usize, pad: usize, bias: bool) -> Layer {
        let weight = self.param(format!("{name}.weight"), ParamKind::Weight, &[c_out, c_in, k, k]);
        let bias = bias.then(|| self.param(format!("{name}.bias"), ParamKind::Bias, &[c_out]));
        Layer::Conv {
            weight,
            bias,
            stride,
            pad,
        }
    }

    fn conv_transpose(&mut self, name: &str, c_in: usize, c_out: usize, k: usize, stride: usize, pad: usize) -> Layer {
        let weight = self.param(format!("{name}.weight"), ParamKind::Weight, &[c_in, c_out, k, k]);
        Layer::ConvTranspose {
            weight,
            bias: None,
            stride,
            pad,
        }
    }

    fn norm(&mut self, name: &str, channels: usize) -> Layer {
        let gamma = self.param(format!("{name}.gamma"), ParamKind::Gamma, &[channels]);
        let beta = self.param(format!("{name}.beta"), ParamKind::Beta, &[channels]);
        self.running.push((name.to_string(), RunningStats::new(channels)));
        Layer::Norm {
            gamma,
            beta,
            stats: self.running.len() - 1,
        }
    }
}

/// Generator mapping `generator_in_channels×H×W` to `3×H×W` in `[-1, 1]`.
pub fn build_generator<T: Element>(spec: &ModelSpec) -> Result<Network<T>> {
    spec.validate()?;
    let w = spec.base_width;
    let mut b = Builder {
        params: vec![],
        running: vec![],
    };
    let mut layers = vec![
        b.conv("stem", spec.generator_in_channels, w, 7, 1, 3, false),
        b.norm("stem.bn", w),
        Layer::Relu,
    ];
    let mut ch = w;
    for i in 0..2 {
        layers.push(b.conv(&format!("down{i}"), ch, ch * 2, 3, 2, 1, false));
        layers.push(b.norm(&format!("down{i}.bn"), ch * 2));
        layers.push(Layer::Relu);
        ch *= 2;
    }
    for i in 0..spec.residual_blocks {
        let name = format!("res{i}");
        let body = vec![
            b.conv(&format!("{name}.conv0"), ch, ch, 3, 1, 1, false),
            b.norm(&format!("{name}.bn0"), ch),
            Layer::Relu,
            b.conv(&format!("{name}.conv1"), ch, ch, 3, 1, 1, false),
            b.norm(&format!("{name}.bn1"), ch),
        ];
        layers.push(Layer::Residual(body));
    }
    for i in 0..2 {
        layers.push(b.conv_transpose(&format!("up{i}"), ch, ch / 2, 4, 2, 1));
        layers.push(b.norm(&format!("up{i}.bn"), ch / 2));
        layers.push(Layer::Relu);
        ch /= 2;
    }
    layers.push(b.conv("out", ch, ModelSpec::OUT_CHANNELS, 7, 1, 3, true));
    layers.push(Layer::Tanh);
    Ok(Network {
        kind: NetKind::Generator,
        spec: *spec,
        params: b.params,
        running: b.running,
        layers,
    })
}

/// Discriminator mapping `3×H×W` to a `1×P×P` map of scores in `(0, 1)`.
pub fn build_discriminator<T: Element>(spec: &ModelSpec) -> Result<Network<T>> {
    spec.validate()?;
    let w = spec.base_width;
    let mut b = Builder {
        params: vec![],
        running: vec![],
    };
    let mut layers = vec![];
    let mut ch = ModelSpec::DISCRIMINATOR_IN_CHANNELS;
    let mut side = spec.image_size;
    for i in 0..DISCRIMINATOR_HIDDEN {
        let out = (w << i.min(3)).min(w * 8);
        let name = format!("hidden{i}");
        if side / 2 >= MIN_PATCH {
            layers.push(b.conv(&name, ch, out, 4, 2, 1, i == 0));
            side /= 2;
        } else {
            layers.push(b.conv(&name, ch, out, 3, 1, 1, i == 0));
        }
        if i > 0 {
            layers.push(b.norm(&format!("{name}.bn"), out));
        }
        layers.push(Layer::LeakyRelu);
        ch = out;
    }
    layers.push(b.conv("head0", ch, ch, 3, 1, 1, false));
    layers.push(b.norm("head0.bn", ch));
    layers.push(Layer::LeakyRelu);
    layers.push(b.conv("head1", ch, 1, 3, 1, 1, true));
    layers.push(Layer::Sigmoid);
    Ok(Network {
        kind: NetKind::Discriminator,
        spec: *spec,
        params: b.params,
        running: b.running,
        layers,
    })
}

impl<T: Element> Network<T> {
    pub fn kind(&self) -> NetKind {
        self.kind
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn params(&self) -> &[Param<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param<T>] {
        &mut self.params
    }

    pub fn running_stats(&self) -> &[(String, RunningStats<T>)] {
        &self.running
    }

    pub fn running_stats_mut(&mut self) -> &mut [(String, RunningStats<T>)] {
        &mut self.running
    }

    pub fn param_tensors(&self) -> Vec<Tensor<T>> {
        self.params.iter().map(|p| p.value.clone()).collect()
    }

    /// Total scalar parameter count.
    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn conv_layer_count(&self) -> usize {
        fn count(layers: &[Layer]) -> usize {
            layers
                .iter()
                .map(|l| match l {
                    Layer::Conv { .. } | Layer::ConvTranspose { .. } => 1,
                    Layer::Residual(body) => count(body),
                    _ => 0,
                })
                .sum()
        }
        count(&self.layers)
    }

    /// Draws weights from `N(0, 0.02)`, gammas from `N(1, 0.02)`, zeroes biases
    /// and betas, and resets running statistics. Fully determined by `seed`.
    pub fn init_params(&mut self, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, INIT_STD).expect("finite std");
        for p in &mut self.params {
            for v in p.value.data_mut() {
                *v = match p.kind {
                    ParamKind::Weight => T::from_f64(normal.sample(&mut rng)),
                    ParamKind::Gamma => T::from_f64(1.0 + normal.sample(&mut rng)),
                    ParamKind::Bias | ParamKind::Beta => T::zero(),
                };
            }
        }
        for (_, stats) in &mut self.running {
            *stats = RunningStats::new(stats.mean.numel());
        }
    }

    /// Records every parameter on `tape` as a differentiable leaf.
    pub fn bind(&self, tape: &mut Tape<T>) -> Vec<Var> {
        self.params.iter().map(|p| tape.leaf(p.value.clone())).collect()
    }

    /// Records every parameter as a constant (no gradients).
    pub fn bind_frozen(&self, tape: &mut Tape<T>) -> Vec<Var> {
        self.params.iter().map(|p| tape.constant(p.value.clone())).collect()
    }

    /// Runs the network on `input` using parameter handles from [`Network::bind`].
    pub fn forward(&self, tape: &mut Tape<T>, params: &[Var], input: Var, mode: Mode) -> Result<(Var, StatUpdates<T>)> {
        if params.len() != self.params.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} parameter handles for {} parameters",
                params.len(),
                self.params.len()
            )));
        }
        let expected_in = match self.kind {
            NetKind::Generator => self.spec.generator_in_channels,
            NetKind::Discriminator => ModelSpec::DISCRIMINATOR_IN_CHANNELS,
        };
        let (_, c, _, _) = tape.value(input).dims4()?;
        if c != expected_in {
            return Err(Error::ShapeMismatch(format!(
                "{:?} expects {} input channels, got {}",
                self.kind, expected_in, c
            )));
        }
        let mut updates = StatUpdates { updates: vec![] };
        let out = self.run(&self.layers, tape, params, input, mode, &mut updates)?;
        Ok((out, updates))
    }

    fn run(&self, layers: &[Layer], tape: &mut Tape<T>, p: &[Var], mut x: Var, mode: Mode, updates: &mut StatUpdates<T>) -> Result<Var> {
        for layer in layers {
            x = match layer {
                Layer::Conv {
                    weight,
                    bias,
                    stride,
                    pad,
                } => tape.conv2d(x, p[*weight], bias.map(|b| p[b]), *stride, *pad)?,
                Layer::ConvTranspose {
                    weight,
                    bias,
                    stride,
                    pad,
                } => tape.conv_transpose2d(x, p[*weight], bias.map(|b| p[b]), *stride, *pad)?,
                Layer::Norm { gamma, beta, stats } => match mode {
                    Mode::Train => {
                        let (y, batch) = tape.batch_norm_train(x, p[*gamma], p[*beta], BN_EPS)?;
                        updates.updates.push((*stats, batch));
                        y
                    }
                    Mode::Eval => tape.batch_norm_eval(x, p[*gamma], p[*beta], &self.running[*stats].1, BN_EPS)?,
                },
                Layer::Relu => tape.relu(x),
                Layer::LeakyRelu => tape.leaky_relu(x, LEAKY_SLOPE),
                Layer::Tanh => tape.tanh(x),
                Layer::Sigmoid => tape.sigmoid(x),
                Layer::Residual(body) => {
                    let y = self.run(body, tape, p, x, mode, updates)?;
                    tape.add(x, y)?
                }
            };
        }
        Ok(x)
    }

    /// Folds training-mode batch statistics into the running averages.
    pub fn absorb(&mut self, updates: StatUpdates<T>) {
        for (idx, batch) in updates.updates {
            self.running[idx].1.update(&batch, BN_MOMENTUM);
        }
    }

    /// Forward pass on plain tensors, outside any training graph.
    pub fn infer(&self, input: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let params = self.bind_frozen(&mut tape);
        let x = tape.constant(input.clone());
        let (y, _) = self.forward(&mut tape, &params, x, mode)?;
        Ok(tape.value(y).clone())
    }
}

/// Attempts per configuration before giving up on finding a draw whose
/// probes all stay on one linear piece.
const MAX_DRAWS: usize = 20;

/// Finite-difference checks of full generator and discriminator forward passes
/// (training-mode batch norm, double precision) over random small specs.
///
/// A draw whose probes straddle a relu or leaky-relu kink is replaced by a
/// fresh draw of input and weights; the number of replacements is reported.
pub fn composite_checks(seed: u64, configs: usize, coords_per_tensor: usize) -> Result<Vec<OpCheck>> {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = vec![];
    for kind in [NetKind::Generator, NetKind::Discriminator] {
        let mut worst = 0.0f64;
        let mut redrawn = 0;
        for i in 0..configs {
            let spec = ModelSpec::desk(8, 4, rng.random_range(1..3));
            let batch = rng.random_range(2..4);
            let mut accepted = false;
            for draw in 0..MAX_DRAWS {
                let draw_seed = seed
                    .wrapping_mul(1_000_003)
                    .wrapping_add((i * MAX_DRAWS + draw) as u64);
                let check = composite_draw(kind, &spec, batch, draw_seed, coords_per_tensor)?;
                if check.kink_crossings == 0 {
                    worst = worst.max(check.max_rel_error);
                    accepted = true;
                    break;
                }
                redrawn += 1;
            }
            if !accepted {
                return Err(Error::NumericalFailure(format!(
                    "{kind:?} config {i}: every draw crossed a kink"
                )));
            }
        }
        out.push(OpCheck {
            name: match kind {
                NetKind::Generator => "generator",
                NetKind::Discriminator => "discriminator",
            },
            configs,
            max_rel_error: worst,
            redrawn,
        });
    }
    Ok(out)
}

fn composite_draw(
    kind: NetKind,
    spec: &ModelSpec,
    batch: usize,
    seed: u64,
    coords_per_tensor: usize,
) -> Result<gradcheck::KinkAwareCheck> {
    let mut net: Network<f64> = match kind {
        NetKind::Generator => build_generator(spec)?,
        NetKind::Discriminator => build_discriminator(spec)?,
    };
    net.init_params(seed);
    // Larger weights keep activations and gradients well above the
    // finite-difference noise floor.
    for p in net.params_mut() {
        if p.kind == ParamKind::Weight {
            for v in p.value.data_mut() {
                *v *= 10.0;
            }
        }
    }
    let in_ch = match kind {
        NetKind::Generator => spec.generator_in_channels,
        NetKind::Discriminator => ModelSpec::DISCRIMINATOR_IN_CHANNELS,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = gradcheck::uniform(&mut rng, &[batch, in_ch, spec.image_size, spec.image_size], -1.0, 1.0);
    let mut inputs = vec![x];
    inputs.extend(net.param_tensors());
    let f = |tape: &mut Tape<f64>, vars: &[Var]| {
        let (y, _) = net.forward(tape, &vars[1..], vars[0], Mode::Train)?;
        gradcheck::weighted_sum(tape, y, seed)
    };
    gradcheck::grad_check_kink_aware(
        f,
        &inputs,
        gradcheck::DEFAULT_STEP,
        Coverage::Sample {
            per_input: coords_per_tensor,
            seed,
        },
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generator_output_range_and_shape() {
        let spec = ModelSpec::desk(32, 16, 2);
        let mut g: Network<f32> = build_generator(&spec).unwrap();
        g.init_params(1);
        let y = g.infer(&Tensor::zeros(&[1, 4, 32, 32]), Mode::Eval).unwrap();
        assert_eq!(y.shape(), &[1, 3, 32, 32]);
        assert!(y.data().iter().all(|v| v.is_finite() && v.abs() <= 1.0));
    }

    #[test]
    fn generator_preserves_spatial_size() {
        for size in [32, 64, 128] {
            let spec = ModelSpec::desk(size, 4, 1);
            let mut g: Network<f32> = build_generator(&spec).unwrap();
            g.init_params(2);
            let y = g.infer(&Tensor::zeros(&[1, 4, size, size]), Mode::Eval).unwrap();
            assert_eq!(y.shape(), &[1, 3, size, size]);
        }
    }

    #[test]
    fn generator_parameter_count_matches_layer_list() {
        let (w, blocks) = (8usize, 3usize);
        let g: Network<f64> = build_generator(&ModelSpec::desk(32, w, blocks)).unwrap();
        let conv = |cin: usize, cout: usize, k: usize| cout * cin * k * k;
        let bn = |c: usize| 2 * c;
        let expected = conv(4, w, 7) + bn(w)
            + conv(w, 2 * w, 3) + bn(2 * w)
            + conv(2 * w, 4 * w, 3) + bn(4 * w)
            + blocks * 2 * (conv(4 * w, 4 * w, 3) + bn(4 * w))
            + conv(4 * w, 2 * w, 4) + bn(2 * w)
            + conv(2 * w, w, 4) + bn(w)
            + conv(w, 3, 7) + 3;
        assert_eq!(g.parameter_count(), expected);
    }

    #[test]
    fn discriminator_has_eight_convs_and_unit_interval_scores() {
        for w in [4, 8, 16] {
            let spec = ModelSpec::desk(32, w, 1);
            let mut d: Network<f64> = build_discriminator(&spec).unwrap();
            assert_eq!(d.conv_layer_count(), 8);
            d.init_params(3);
            let x = gradcheck::uniform(&mut ChaCha8Rng::seed_from_u64(4), &[2, 3, 32, 32], -1.0, 1.0);
            let y = d.infer(&x, Mode::Train).unwrap();
            assert_eq!(y.shape(), &[2, 1, 4, 4]);
            assert!(y.data().iter().all(|&v| v > 0.0 && v < 1.0));
        }
    }

    #[test]
    fn init_is_deterministic_with_expected_moments() {
        let spec = ModelSpec::desk(32, 16, 2);
        let mut a: Network<f64> = build_generator(&spec).unwrap();
        let mut b: Network<f64> = build_generator(&spec).unwrap();
        a.init_params(7);
        b.init_params(7);
        assert_eq!(a, b);

        let weights: Vec<f64> = a
            .params()
            .iter()
            .filter(|p| p.kind == ParamKind::Weight)
            .flat_map(|p| p.value.data().iter().copied())
            .take(10_000)
            .collect();
        assert_eq!(weights.len(), 10_000);
        let mean = weights.iter().sum::<f64>() / 1e4;
        assert!(mean.abs() < 3.0 * INIT_STD / 100.0, "weight mean {mean}");

        let gammas: Vec<f64> = a
            .params()
            .iter()
            .filter(|p| p.kind == ParamKind::Gamma)
            .flat_map(|p| p.value.data().iter().copied())
            .collect();
        let gmean = gammas.iter().sum::<f64>() / gammas.len() as f64;
        let bound = 3.0 * INIT_STD / (gammas.len() as f64).sqrt();
        assert!((gmean - 1.0).abs() < bound, "gamma mean {gmean} over {}", gammas.len());
    }

    #[test]
    fn spec_validation() {
        assert!(ModelSpec::paper().validate().is_ok());
        let mut bad = ModelSpec::paper();
        bad.residual_blocks = 2;
        assert!(matches!(bad.validate(), Err(Error::InvalidSpec(_))));
        assert!(ModelSpec::desk(32, 2, 1).validate().is_err());
        assert!(ModelSpec::desk(30, 8, 1).validate().is_err());
        assert!(ModelSpec::desk(32, 8, 0).validate().is_err());
    }

    #[test]
    fn composites_pass_gradient_check() {
        for c in composite_checks(11, 3, 3).unwrap() {
            assert!(c.passed(), "{} error {} ({} redrawn)", c.name, c.max_rel_error, c.redrawn);
        }
    }
}
