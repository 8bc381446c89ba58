//! Two-generator, two-discriminator training with skeleton-guided inputs.
//!
//! `G_y` maps domain X to Y and `G_x` maps Y to X. `D_x` scores domain-X
//! images and `D_y` domain-Y images. One step runs both generators on both
//! cycles, updates the discriminators on the fresh fakes and then updates the
//! generators against the updated discriminators.

mod checkpoint;
mod diversity;

use std::fmt;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::SeedableRng;
use rand::RngCore;
use rand_chacha::ChaCha8Rng;

use crate::data::{steps_per_epoch, EpochOrder};
use crate::error::{Error, Result};
use crate::imgcore::{check_threshold, BinaryGrid, RasterImage, DEFAULT_THRESHOLD};
use crate::losses::{
    adv_loss_d, adv_loss_g, cycle_loss, ske_loss, total_loss, GanLoss, LossBreakdown, LossWeights, SkeGrad,
};
use crate::models::{build_discriminator, build_generator, Mode, ModelSpec, Network};
use crate::sgce::{rgb_to_tensor, skeleton_plane, skeleton_planes, tensor_to_image};
use crate::skeleton::ske;
use crate::tensor::{AdamConfig, AdamState, Element, Tape, Tensor, Var};

pub use checkpoint::{load_checkpoint, save_checkpoint, state_from_container, state_to_container};
pub use diversity::{diversity_diagnostic, mean_pairwise_distance, DiversityReport, DUPLICATE_DISTANCE};

/// Training hyperparameters.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: u64,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub weights: LossWeights,
    pub spec: ModelSpec,
    pub seed: u64,
    pub threshold: f64,
    pub sgce_enabled: bool,
    /// Save a checkpoint every this many steps; 0 disables periodic saves.
    pub checkpoint_every: u64,
    /// Stop after this many steps even if epochs remain.
    pub max_steps: Option<u64>,
    pub gan_loss: GanLoss,
    pub ske_grad: SkeGrad,
}

impl TrainConfig {
    /// Desk-scale defaults: batch 4 on the given spec.
    pub fn desk(spec: ModelSpec, seed: u64) -> Self {
        Self {
            epochs: 1,
            batch_size: 4,
            adam: AdamConfig::default(),
            weights: LossWeights::default(),
            spec,
            seed,
            threshold: DEFAULT_THRESHOLD,
            sgce_enabled: true,
            checkpoint_every: 0,
            max_steps: None,
            gan_loss: GanLoss::default(),
            ske_grad: SkeGrad::default(),
        }
    }

    /// Paper-scale architecture with batch size 1.
    pub fn paper(seed: u64) -> Self {
        Self {
            batch_size: 1,
            ..Self::desk(ModelSpec::paper(), seed)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs < 1 {
            return Err(Error::InvalidConfig("epochs must be at least 1".into()));
        }
        if self.batch_size < 1 {
            return Err(Error::InvalidConfig("batch size must be at least 1".into()));
        }
        if !(self.adam.learning_rate > 0.0) || !self.adam.learning_rate.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "learning rate {} must be positive",
                self.adam.learning_rate
            )));
        }
        if !(0.0..1.0).contains(&self.adam.beta1) || !(0.0..1.0).contains(&self.adam.beta2) {
            return Err(Error::InvalidConfig("adam betas must lie in [0, 1)".into()));
        }
        LossWeights::new(self.weights.cyc, self.weights.ske)?;
        check_threshold(self.threshold)?;
        self.spec.validate()?;
        if self.spec.generator_in_channels != 4 {
            return Err(Error::InvalidSpec("generators take RGB plus one skeleton channel".into()));
        }
        Ok(())
    }

    /// Weights actually applied: the skeleton term is off without expansion.
    pub fn effective_weights(&self) -> LossWeights {
        LossWeights {
            cyc: self.weights.cyc,
            ske: if self.sgce_enabled { self.weights.ske } else { 0.0 },
        }
    }
}

/// The four networks.
#[derive(Clone, Debug, PartialEq)]
pub struct Nets<T> {
    /// Y → X.
    pub g_x: Network<T>,
    /// X → Y.
    pub g_y: Network<T>,
    pub d_x: Network<T>,
    pub d_y: Network<T>,
}

impl<T: Element> Nets<T> {
    /// Builds and initializes all four networks from one seed.
    pub fn new(spec: &ModelSpec, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut nets = Self {
            g_x: build_generator(spec)?,
            g_y: build_generator(spec)?,
            d_x: build_discriminator(spec)?,
            d_y: build_discriminator(spec)?,
        };
        nets.g_x.init_params(rng.next_u64());
        nets.g_y.init_params(rng.next_u64());
        nets.d_x.init_params(rng.next_u64());
        nets.d_y.init_params(rng.next_u64());
        Ok(nets)
    }

    pub fn generator_params(&self) -> Vec<Tensor<T>> {
        let mut p = self.g_x.param_tensors();
        p.extend(self.g_y.param_tensors());
        p
    }

    pub fn discriminator_params(&self) -> Vec<Tensor<T>> {
        let mut p = self.d_x.param_tensors();
        p.extend(self.d_y.param_tensors());
        p
    }
}

/// Everything needed to continue training bit-exactly.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState<T> {
    pub cfg: TrainConfig,
    pub nets: Nets<T>,
    /// Adam state over `G_x` then `G_y` parameters.
    pub opt_g: AdamState<T>,
    /// Adam state over `D_x` then `D_y` parameters.
    pub opt_d: AdamState<T>,
    pub step: u64,
    pub epoch: u64,
    pub step_in_epoch: usize,
    /// Visiting order of the current epoch, once drawn.
    pub order: Option<EpochOrder>,
    /// Source of epoch orders.
    pub rng: ChaCha8Rng,
}

/// Stream of the shuffling RNG, kept apart from weight initialization.
const SHUFFLE_STREAM: u64 = 1;

impl<T: Element> TrainState<T> {
    pub fn new(cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let nets = Nets::new(&cfg.spec, cfg.seed)?;
        let opt_g = AdamState::new(cfg.adam, nets.generator_params().iter())?;
        let opt_d = AdamState::new(cfg.adam, nets.discriminator_params().iter())?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(SHUFFLE_STREAM);
        Ok(Self {
            cfg,
            nets,
            opt_g,
            opt_d,
            step: 0,
            epoch: 0,
            step_in_epoch: 0,
            order: None,
            rng,
        })
    }
}

/// Source and target training images.
#[derive(Clone, Debug, PartialEq)]
pub struct UnpairedData {
    pub x: Vec<RasterImage>,
    pub y: Vec<RasterImage>,
}

/// `[N, 3, H, W]` batch in `[-1, 1]`.
pub fn batch_tensor<T: Element>(images: &[RasterImage]) -> Result<Tensor<T>> {
    let planes = images.iter().map(rgb_to_tensor).collect::<Result<Vec<_>>>()?;
    Tensor::stack(&planes)
}

/// Skeleton channel for a batch of real images: skeleton planes when the
/// expansion is on, a constant `-1` plane otherwise.
fn input_skeletons<T: Element>(images: &[RasterImage], cfg: &TrainConfig) -> Result<(Tensor<T>, Vec<BinaryGrid>)> {
    let grids = images
        .iter()
        .map(|img| ske(img, cfg.threshold))
        .collect::<Result<Vec<_>>>()?;
    let planes = if cfg.sgce_enabled {
        Tensor::stack(&grids.iter().map(skeleton_plane).collect::<Vec<_>>())?
    } else {
        constant_plane(images.len(), images[0].height(), images[0].width())
    };
    Ok((planes, grids))
}

fn constant_plane<T: Element>(n: usize, h: usize, w: usize) -> Tensor<T> {
    Tensor::full(&[n, 1, h, w], -T::one())
}

/// Skeleton channel for generated images recorded on `tape`.
fn generated_skeleton<T: Element>(tape: &mut Tape<T>, generated: Var, cfg: &TrainConfig) -> Result<Var> {
    let (n, _, h, w) = tape.value(generated).dims4()?;
    let plane = if cfg.sgce_enabled {
        skeleton_planes(tape.value(generated), cfg.threshold)?.0
    } else {
        constant_plane(n, h, w)
    };
    Ok(tape.constant(plane))
}

fn scalar<T: Element>(tape: &Tape<T>, v: Var) -> f64 {
    tape.value(v).item().as_f64()
}

fn check_finite(step: u64, what: &str, values: &[(&str, f64)]) -> Result<()> {
    if values.iter().all(|(_, v)| v.is_finite()) {
        return Ok(());
    }
    let detail = values
        .iter()
        .map(|(k, v)| format!("{k}={v}"))
        .collect::<Vec<_>>()
        .join(" ");
    Err(Error::NonFiniteLoss {
        step,
        detail: format!("{what}: {detail}"),
    })
}

/// Gradients of `vars` in order, zero where a parameter did not contribute.
fn collect_grads<T: Element>(tape: &Tape<T>, loss: Var, vars: &[Var]) -> Result<Vec<Tensor<T>>> {
    let mut grads = tape.backward(loss)?;
    Ok(vars
        .iter()
        .map(|&v| {
            grads
                .take(v)
                .unwrap_or_else(|| Tensor::zeros(tape.value(v).shape()))
        })
        .collect())
}

fn apply_update<T: Element>(opt: &mut AdamState<T>, nets: [&mut Network<T>; 2], grads: &[Tensor<T>]) -> Result<()> {
    let [a, b] = nets;
    let mut params = a.param_tensors();
    let split = params.len();
    params.extend(b.param_tensors());
    opt.step(&mut params, grads)?;
    let (pa, pb) = params.split_at(split);
    for (dst, src) in a.params_mut().iter_mut().zip(pa) {
        dst.value = src.clone();
    }
    for (dst, src) in b.params_mut().iter_mut().zip(pb) {
        dst.value = src.clone();
    }
    Ok(())
}

/// One optimization step on an unpaired batch. Increments `state.step`.
pub fn train_step<T: Element>(state: &mut TrainState<T>, batch_x: &[RasterImage], batch_y: &[RasterImage]) -> Result<LossBreakdown> {
    if batch_x.len() != batch_y.len() || batch_x.is_empty() {
        return Err(Error::ShapeMismatch(format!(
            "unpaired batches of {} and {} images",
            batch_x.len(),
            batch_y.len()
        )));
    }
    let size = state.cfg.spec.image_size;
    for img in batch_x.iter().chain(batch_y) {
        if (img.width(), img.height()) != (size, size) {
            return Err(Error::ShapeMismatch(format!(
                "image {}x{} in a {size}x{size} model",
                img.width(),
                img.height()
            )));
        }
    }
    let cfg = state.cfg.clone();
    let step = state.step;
    let nets = &mut state.nets;

    let x_t: Tensor<T> = batch_tensor(batch_x)?;
    let y_t: Tensor<T> = batch_tensor(batch_y)?;
    let (sx, grids_x) = input_skeletons::<T>(batch_x, &cfg)?;
    let (sy, grids_y) = input_skeletons::<T>(batch_y, &cfg)?;

    // Generators, both cycles.
    let mut g = Tape::new();
    let gx_vars = nets.g_x.bind(&mut g);
    let gy_vars = nets.g_y.bind(&mut g);
    let x = g.constant(x_t);
    let y = g.constant(y_t);
    let sx = g.constant(sx);
    let sy = g.constant(sy);

    let cex = g.concat_channels(&[x, sx])?;
    let (fake_y, st_gy1) = nets.g_y.forward(&mut g, &gy_vars, cex, Mode::Train)?;
    let s_fake_y = generated_skeleton(&mut g, fake_y, &cfg)?;
    let ce_fake_y = g.concat_channels(&[fake_y, s_fake_y])?;
    let (rec_x, st_gx1) = nets.g_x.forward(&mut g, &gx_vars, ce_fake_y, Mode::Train)?;

    let cey = g.concat_channels(&[y, sy])?;
    let (fake_x, st_gx2) = nets.g_x.forward(&mut g, &gx_vars, cey, Mode::Train)?;
    let s_fake_x = generated_skeleton(&mut g, fake_x, &cfg)?;
    let ce_fake_x = g.concat_channels(&[fake_x, s_fake_x])?;
    let (rec_y, st_gy2) = nets.g_y.forward(&mut g, &gy_vars, ce_fake_x, Mode::Train)?;

    // Discriminators on real images and the current fakes.
    let mut d = Tape::new();
    let dx_vars = nets.d_x.bind(&mut d);
    let dy_vars = nets.d_y.bind(&mut d);
    let real_x = d.constant(g.value(x).clone());
    let real_y = d.constant(g.value(y).clone());
    let fx = d.constant(g.value(fake_x).clone());
    let fy = d.constant(g.value(fake_y).clone());
    let (dx_real, st_dx1) = nets.d_x.forward(&mut d, &dx_vars, real_x, Mode::Train)?;
    let (dx_fake, st_dx2) = nets.d_x.forward(&mut d, &dx_vars, fx, Mode::Train)?;
    let (dy_real, st_dy1) = nets.d_y.forward(&mut d, &dy_vars, real_y, Mode::Train)?;
    let (dy_fake, st_dy2) = nets.d_y.forward(&mut d, &dy_vars, fy, Mode::Train)?;
    let loss_dx = adv_loss_d(&mut d, dx_real, dx_fake)?;
    let loss_dy = adv_loss_d(&mut d, dy_real, dy_fake)?;
    let loss_d = d.add(loss_dx, loss_dy)?;
    check_finite(
        step,
        "discriminator",
        &[("d_x", scalar(&d, loss_dx)), ("d_y", scalar(&d, loss_dy))],
    )?;
    let mut d_vars = dx_vars.clone();
    d_vars.extend(&dy_vars);
    let d_grads = collect_grads(&d, loss_d, &d_vars)?;
    drop(d);
    apply_update(&mut state.opt_d, [&mut nets.d_x, &mut nets.d_y], &d_grads)?;
    for st in [st_dx1, st_dx2] {
        nets.d_x.absorb(st);
    }
    for st in [st_dy1, st_dy2] {
        nets.d_y.absorb(st);
    }

    // Generator objective against the updated discriminators.
    let dx_frozen = nets.d_x.bind_frozen(&mut g);
    let dy_frozen = nets.d_y.bind_frozen(&mut g);
    let (score_x, st_dx3) = nets.d_x.forward(&mut g, &dx_frozen, fake_x, Mode::Train)?;
    let (score_y, st_dy3) = nets.d_y.forward(&mut g, &dy_frozen, fake_y, Mode::Train)?;
    let adv_x = adv_loss_g(&mut g, score_x, cfg.gan_loss);
    let adv_y = adv_loss_g(&mut g, score_y, cfg.gan_loss);
    let cyc_x = cycle_loss(&mut g, x, rec_x)?;
    let cyc_y = cycle_loss(&mut g, y, rec_y)?;
    let cyc = g.add(cyc_x, cyc_y)?;
    let weights = cfg.effective_weights();
    let ske_grad = if weights.ske > 0.0 { cfg.ske_grad } else { SkeGrad::None };
    let ske_x = ske_loss(&mut g, &grids_x, rec_x, cfg.threshold, ske_grad)?;
    let ske_y = ske_loss(&mut g, &grids_y, rec_y, cfg.threshold, ske_grad)?;
    let ske_sum = g.add(ske_x, ske_y)?;

    let adv = g.add(adv_x, adv_y)?;
    let weighted_cyc = g.affine(cyc, weights.cyc, 0.0);
    let mut total = g.add(adv, weighted_cyc)?;
    if weights.ske > 0.0 && cfg.ske_grad == SkeGrad::MaskedIntensity {
        let weighted_ske = g.affine(ske_sum, weights.ske, 0.0);
        total = g.add(total, weighted_ske)?;
    }
    let breakdown = total_loss(
        scalar(&g, adv_x),
        scalar(&g, adv_y),
        scalar(&g, cyc),
        scalar(&g, ske_sum),
        &weights,
    );
    check_finite(
        step,
        "generator",
        &[
            ("adv_x", breakdown.adv_x),
            ("adv_y", breakdown.adv_y),
            ("cyc", breakdown.cyc),
            ("ske", breakdown.ske),
            ("total", scalar(&g, total)),
        ],
    )?;
    let mut g_vars = gx_vars.clone();
    g_vars.extend(&gy_vars);
    let g_grads = collect_grads(&g, total, &g_vars)?;
    drop(g);
    apply_update(&mut state.opt_g, [&mut nets.g_x, &mut nets.g_y], &g_grads)?;
    for st in [st_gx1, st_gx2] {
        nets.g_x.absorb(st);
    }
    for st in [st_gy1, st_gy2] {
        nets.g_y.absorb(st);
    }
    nets.d_x.absorb(st_dx3);
    nets.d_y.absorb(st_dy3);

    state.step += 1;
    Ok(breakdown)
}

/// Where training writes its outputs.
#[derive(Clone, Debug, Default)]
pub struct TrainOutputs {
    /// CSV loss log, one row per step.
    pub log: Option<PathBuf>,
    /// Directory for periodic `step-XXXXXXXX.sgce` checkpoints.
    pub checkpoint_dir: Option<PathBuf>,
}

/// Total steps the configuration asks for on this data.
pub fn planned_steps(cfg: &TrainConfig, data: &UnpairedData) -> Result<u64> {
    let per_epoch = steps_per_epoch(data.x.len(), data.y.len(), cfg.batch_size) as u64;
    if per_epoch == 0 {
        return Err(Error::InvalidConfig(format!(
            "batch size {} exceeds the smaller domain ({} images)",
            cfg.batch_size,
            data.x.len().min(data.y.len())
        )));
    }
    let total = cfg.epochs * per_epoch;
    Ok(cfg.max_steps.map_or(total, |m| m.min(total)))
}

fn open_log(path: &Path, keep_rows: u64) -> Result<File> {
    let mut kept = vec![LossBreakdown::CSV_HEADER.to_string()];
    if keep_rows > 0 {
        let existing = File::open(path).map_err(|e| Error::UnreadableFile {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        kept.extend(
            BufReader::new(existing)
                .lines()
                .skip(1)
                .take(keep_rows as usize)
                .collect::<std::io::Result<Vec<_>>>()?,
        );
    }
    let mut f = File::create(path)?;
    for line in &kept {
        writeln!(f, "{line}")?;
    }
    drop(f);
    Ok(OpenOptions::new().append(true).open(path)?)
}

pub fn checkpoint_path(dir: &Path, step: u64) -> PathBuf {
    dir.join(format!("step-{step:08}.sgce"))
}

/// Trains from scratch.
pub fn train<T: Element>(cfg: TrainConfig, data: &UnpairedData, out: &TrainOutputs) -> Result<TrainState<T>> {
    let state = TrainState::new(cfg)?;
    resume(state, data, out)
}

/// Continues training from `state` until the configured number of steps.
/// The log keeps its first `state.step` rows and is appended to from there.
pub fn resume<T: Element>(mut state: TrainState<T>, data: &UnpairedData, out: &TrainOutputs) -> Result<TrainState<T>> {
    if data.x.is_empty() || data.y.is_empty() {
        return Err(Error::DataEmpty("both domains need training images".into()));
    }
    let total = planned_steps(&state.cfg, data)?;
    let per_epoch = steps_per_epoch(data.x.len(), data.y.len(), state.cfg.batch_size);
    let mut log = match &out.log {
        Some(p) => Some(open_log(p, state.step)?),
        None => None,
    };
    if let Some(dir) = &out.checkpoint_dir {
        std::fs::create_dir_all(dir)?;
    }
    let batch = state.cfg.batch_size;
    while state.step < total {
        if state.order.is_none() {
            state.order = Some(EpochOrder::draw(data.x.len(), data.y.len(), &mut state.rng));
        }
        let (ix, iy) = state.order.as_ref().expect("drawn above").batch(state.step_in_epoch, batch);
        let bx: Vec<RasterImage> = ix.iter().map(|&i| data.x[i].clone()).collect();
        let by: Vec<RasterImage> = iy.iter().map(|&i| data.y[i].clone()).collect();
        let losses = train_step(&mut state, &bx, &by)?;
        if let Some(f) = log.as_mut() {
            writeln!(f, "{}", losses.csv_row(state.step))?;
        }
        state.step_in_epoch += 1;
        if state.step_in_epoch == per_epoch {
            state.epoch += 1;
            state.step_in_epoch = 0;
            state.order = None;
        }
        if let Some(dir) = &out.checkpoint_dir {
            if state.cfg.checkpoint_every > 0 && state.step % state.cfg.checkpoint_every == 0 {
                save_checkpoint(&state, &checkpoint_path(dir, state.step))?;
            }
        }
    }
    Ok(state)
}

/// Translation direction.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    /// Source font to target font, through `G_y`.
    XToY,
    /// Target font to source font, through `G_x`.
    YToX,
}

impl FromStr for Direction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "x2y" => Ok(Direction::XToY),
            "y2x" => Ok(Direction::YToX),
            other => Err(Error::InvalidConfig(format!(
                "direction '{other}' (expected x2y or y2x)"
            ))),
        }
    }
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Direction::XToY => "x2y",
            Direction::YToX => "y2x",
        })
    }
}

const GENERATE_CHUNK: usize = 16;

/// Translates `images` with eval-mode batch norm; outputs are RGB in `[0, 1]`.
pub fn generate<T: Element>(state: &TrainState<T>, images: &[RasterImage], direction: Direction) -> Result<Vec<RasterImage>> {
    let net = match direction {
        Direction::XToY => &state.nets.g_y,
        Direction::YToX => &state.nets.g_x,
    };
    let size = state.cfg.spec.image_size;
    let mut out = Vec::with_capacity(images.len());
    for chunk in images.chunks(GENERATE_CHUNK) {
        let resized = chunk
            .iter()
            .map(|img| crate::imgcore::resize(img, size, size))
            .collect::<Result<Vec<_>>>()?;
        let x: Tensor<T> = batch_tensor(&resized)?;
        let (s, _) = input_skeletons::<T>(&resized, &state.cfg)?;
        let mut tape = Tape::new();
        let params = net.bind_frozen(&mut tape);
        let xv = tape.constant(x);
        let sv = tape.constant(s);
        let input = tape.concat_channels(&[xv, sv])?;
        let (y, _) = net.forward(&mut tape, &params, input, Mode::Eval)?;
        for t in tape.value(y).unstack() {
            out.push(tensor_to_image(&t)?);
        }
    }
    Ok(out)
}
