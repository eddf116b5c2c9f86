//! Alternating discriminator / generator optimization.

use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::data::{one_hot, sample_box, ColorPalette, Dataset, RgbImage, Split, TrainingTriple};
use crate::error::{Error, Result};
use crate::geometry::{make_mask, BoxCorners, ExpansionSchedule, Mask};
use crate::graph::{Graph, Var};
use crate::losses::{basic_nodes, expansion_nodes, LossWeights};
use crate::metrics::report::{evaluate, EvalOptions};
use crate::networks::{
    stream_rng, Discriminator, DiscriminatorSpec, EncoderSpec, Generator, GeneratorSpec, ParamSet,
    RandomPyramidEncoder,
};
use crate::par::Exec;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    /// Global adversarial + feature matching + perceptual.
    Basic,
    /// Basic plus one local discriminator on the box crop. Runs as the
    /// cropped expansion loss with `q = 0`.
    Gl,
    /// Basic plus the cropped expansion loss, one discriminator per level.
    Mex,
    /// Basic plus the uncropped expansion loss with one shared discriminator.
    AMex,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::Basic => "basic",
            Variant::Gl => "gl",
            Variant::Mex => "mex",
            Variant::AMex => "a-mex",
        }
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "basic" => Ok(Variant::Basic),
            "gl" => Ok(Variant::Gl),
            "mex" => Ok(Variant::Mex),
            "a-mex" => Ok(Variant::AMex),
            _ => Err(Error::Config(format!("unknown variant {s:?} (basic, gl, mex, a-mex)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Task {
    /// Label maps in, color maps out.
    Segmentation,
    /// Masked RGB images in, RGB images out.
    Inpainting,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeneratorArch {
    pub downsamples: usize,
    pub res_blocks: usize,
    pub base_width: usize,
}

impl Default for GeneratorArch {
    fn default() -> Self {
        Self {
            downsamples: 2,
            res_blocks: 4,
            base_width: 16,
        }
    }
}

/// Inpainting hole sizes, as fractions of the image side.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HoleSpec {
    pub min_frac: f64,
    pub max_frac: f64,
}

impl Default for HoleSpec {
    fn default() -> Self {
        Self {
            min_frac: 0.25,
            max_frac: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub task: Task,
    pub variant: Variant,
    pub epochs: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// First epoch with a reduced learning rate; decays linearly to 0 at `epochs`.
    pub decay_start: usize,
    pub batch_size: usize,
    pub weights: LossWeights,
    pub seed: u64,
    pub generator: GeneratorArch,
    pub disc_width: usize,
    pub encoder: EncoderSpec,
    /// Checkpoint every N epochs (the final epoch is always saved).
    pub checkpoint_every: usize,
    /// Evaluate on the test split every N epochs; 0 disables.
    pub eval_every: usize,
    pub holes: HoleSpec,
    pub parallel: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            task: Task::Segmentation,
            variant: Variant::Mex,
            epochs: 200,
            lr: 2e-4,
            beta1: 0.5,
            beta2: 0.999,
            adam_eps: 1e-8,
            decay_start: 100,
            batch_size: 4,
            weights: LossWeights::default(),
            seed: 0,
            generator: GeneratorArch::default(),
            disc_width: 16,
            encoder: EncoderSpec::default(),
            checkpoint_every: 10,
            eval_every: 0,
            holes: HoleSpec::default(),
            parallel: true,
        }
    }
}

impl TrainConfig {
    /// Defaults of the inpainting pipeline: `q = α = β = 4`, 2000 epochs.
    pub fn inpainting() -> Self {
        let mut c = Self {
            task: Task::Inpainting,
            variant: Variant::AMex,
            epochs: 2000,
            ..Self::default()
        };
        c.weights.schedule = ExpansionSchedule {
            q: 4,
            alpha: 4,
            beta: 4,
            cropped: false,
        };
        c
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if self.decay_start > self.epochs {
            return Err(Error::Config(format!(
                "decay_start {} exceeds epochs {}",
                self.decay_start, self.epochs
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("Adam betas must lie in [0, 1)".into()));
        }
        if self.generator.base_width == 0 || self.disc_width == 0 {
            return Err(Error::Config("network widths must be positive".into()));
        }
        let h = self.holes;
        if !(0.0 < h.min_frac && h.min_frac <= h.max_frac && h.max_frac <= 1.0) {
            return Err(Error::Config(format!("hole fractions {h:?} must satisfy 0 < min <= max <= 1")));
        }
        self.weights.validate()
    }

    /// The expansion schedule the variant trains with, if any.
    pub fn expansion(&self) -> Option<ExpansionSchedule> {
        let s = self.weights.schedule;
        match self.variant {
            Variant::Basic => None,
            Variant::Gl => Some(ExpansionSchedule { q: 0, cropped: true, ..s }),
            Variant::Mex => Some(ExpansionSchedule { cropped: true, ..s }),
            Variant::AMex => Some(ExpansionSchedule { cropped: false, ..s }),
        }
    }

    pub fn exec(&self) -> Exec {
        if self.parallel {
            Exec::Parallel
        } else {
            Exec::Sequential
        }
    }

    /// `(generator input, discriminator condition)` channel counts.
    pub fn channels(&self, palette: Option<&ColorPalette>) -> Result<(usize, usize)> {
        match self.task {
            Task::Segmentation => {
                let k = palette
                    .ok_or_else(|| Error::Config("segmentation needs a palette".into()))?
                    .len();
                Ok((k + 1, k))
            }
            Task::Inpainting => Ok((4, 3)),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let c: Self = serde_json::from_str(&fs::read_to_string(path)?)?;
        c.validate()?;
        Ok(c)
    }
}

/// Learning rate of an epoch: constant, then linear decay to 0 at `epochs`.
pub fn lr_at(epoch: usize, config: &TrainConfig) -> Result<f64> {
    if epoch > config.epochs {
        return Err(Error::Config(format!("epoch {epoch} beyond {}", config.epochs)));
    }
    if epoch < config.decay_start {
        return Ok(config.lr);
    }
    if config.epochs == config.decay_start {
        return Ok(0.0);
    }
    Ok(config.lr * (config.epochs - epoch) as f64 / (config.epochs - config.decay_start) as f64)
}

/// Adam moments for one parameter set.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(params: &ParamSet) -> Self {
        let zeros: Vec<Tensor> = params
            .tensors()
            .iter()
            .map(|t| Tensor::zeros(t.channels(), t.height(), t.width()))
            .collect();
        Self {
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// One bias-corrected update; `t` counts updates from 1.
    pub fn step(&mut self, params: &mut ParamSet, grads: &[Tensor], t: u64, lr: f64, cfg: &TrainConfig) {
        let (b1, b2) = (cfg.beta1, cfg.beta2);
        let c1 = 1.0 - b1.powi(t as i32);
        let c2 = 1.0 - b2.powi(t as i32);
        for (((p, g), m), v) in params.tensors_mut().iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            for (((p, &g), m), v) in p.data_mut().iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut()) {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                *p -= lr * (*m / c1) / ((*v / c2).sqrt() + cfg.adam_eps);
            }
        }
    }

    fn named(&self, prefix: &str, names: &[String]) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        for (n, t) in names.iter().zip(&self.m) {
            out.push((format!("{prefix}m/{n}"), t.clone()));
        }
        for (n, t) in names.iter().zip(&self.v) {
            out.push((format!("{prefix}v/{n}"), t.clone()));
        }
        out
    }

    fn load(&mut self, ck: &Checkpoint, prefix: &str) -> Result<()> {
        for (slot, which) in [(&mut self.m, "m/"), (&mut self.v, "v/")] {
            let group = ck.group(&format!("{prefix}{which}"));
            if group.len() != slot.len() {
                return Err(Error::shape(format!("optimizer state {prefix}{which}: {} tensors", group.len())));
            }
            for (dst, (_, src)) in slot.iter_mut().zip(group) {
                if !dst.same_shape(&src) {
                    return Err(Error::shape(format!("optimizer state {prefix}{which}")));
                }
                *dst = src;
            }
        }
        Ok(())
    }
}

/// All networks of one run.
#[derive(Debug, Clone, PartialEq)]
pub struct Models {
    pub generator: Generator,
    pub global_disc: Discriminator,
    pub expansion_discs: Vec<Discriminator>,
    pub encoder: RandomPyramidEncoder,
}

impl Models {
    /// Fresh networks. Every network draws from its own seeded stream, so the
    /// generator and global discriminator start identical across variants.
    pub fn init(config: &TrainConfig, palette: Option<&ColorPalette>) -> Result<Self> {
        let (gen_in, cond) = config.channels(palette)?;
        let gen_spec = GeneratorSpec {
            in_channels: gen_in,
            out_channels: 3,
            downsamples: config.generator.downsamples,
            res_blocks: config.generator.res_blocks,
            base_width: config.generator.base_width,
        };
        let disc_spec = DiscriminatorSpec {
            candidate_channels: 3,
            condition_channels: cond,
            base_width: config.disc_width,
        };
        let n_exp = match config.expansion() {
            None => 0,
            Some(s) if s.cropped => s.levels(),
            Some(_) => 1,
        };
        let mut exp_rng = stream_rng(config.seed, "disc_expansion");
        Ok(Self {
            generator: Generator::new(gen_spec, &mut stream_rng(config.seed, "generator")),
            global_disc: Discriminator::new(disc_spec, &mut stream_rng(config.seed, "disc_global")),
            expansion_discs: (0..n_exp).map(|_| Discriminator::new(disc_spec, &mut exp_rng)).collect(),
            encoder: RandomPyramidEncoder::new(config.encoder.clone())?,
        })
    }
}

/// One training or evaluation example as network tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct NetSample {
    pub gen_input: Tensor,
    pub condition: Tensor,
    pub ground_truth: Tensor,
    /// What the fused map shows outside the mask.
    pub context: Tensor,
    pub mask: Arc<Mask>,
    pub corners: BoxCorners,
}

impl NetSample {
    pub fn segmentation(triple: &TrainingTriple, palette: &ColorPalette) -> Result<Self> {
        let onehot = one_hot(&triple.incomplete, palette)?;
        Ok(Self {
            gen_input: onehot.concat_channels(&triple.mask.to_tensor())?,
            condition: onehot,
            ground_truth: triple.ground_truth_color.clone(),
            context: triple.context_color.clone(),
            mask: Arc::new(triple.mask.clone()),
            corners: triple.edit.corners,
        })
    }

    /// The image with the hole set to 0 (mid-gray) as input and condition.
    pub fn inpainting(image: &RgbImage, corners: BoxCorners) -> Result<Self> {
        let mask = make_mask(&corners, image.height(), image.width())?;
        let truth = image.to_tensor();
        let hole = Mask::from_fn(mask.height(), mask.width(), |r, c| !mask.get(r, c));
        let masked = truth.masked(&hole)?;
        Ok(Self {
            gen_input: masked.concat_channels(&mask.to_tensor())?,
            condition: masked,
            ground_truth: truth.clone(),
            context: truth,
            mask: Arc::new(mask),
            corners,
        })
    }
}

/// A random rectangular hole with sides in `[min_frac, max_frac]` of the image.
pub fn random_hole<R: Rng + ?Sized>(height: usize, width: usize, holes: &HoleSpec, rng: &mut R) -> BoxCorners {
    let side = |n: usize, rng: &mut R| {
        let lo = ((n as f64 * holes.min_frac).round() as usize).clamp(1, n);
        let hi = ((n as f64 * holes.max_frac).round() as usize).clamp(lo, n);
        rng.random_range(lo..=hi)
    };
    let h = side(height, rng);
    let w = side(width, rng);
    let top = rng.random_range(0..=height - h);
    let left = rng.random_range(0..=width - w);
    BoxCorners::new(top, left, top + h - 1, left + w - 1)
}

/// Examples for one epoch, in shuffled order, with freshly drawn boxes.
/// Images without a qualifying edit box are skipped.
pub fn epoch_samples(train: &Dataset, config: &TrainConfig, epoch: usize) -> Result<Vec<NetSample>> {
    let mut rng = stream_rng(config.seed, &format!("epoch{epoch}"));
    let mut order: Vec<usize> = (0..train.len()).collect();
    order.shuffle(&mut rng);
    let spec = train.spec(PathBuf::new(), Split::Train);
    let mut out = Vec::with_capacity(order.len());
    for i in order {
        let rec = &train.records[i];
        match config.task {
            Task::Segmentation => {
                if let Some(edit) = sample_box(&rec.labels, &spec, &mut rng) {
                    let triple = TrainingTriple::new(rec.name.clone(), &rec.labels, edit, &train.palette)?;
                    out.push(NetSample::segmentation(&triple, &train.palette)?);
                }
            }
            Task::Inpainting => {
                let img = rec
                    .image
                    .as_ref()
                    .ok_or_else(|| Error::Dataset(format!("{} has no RGB image", rec.name)))?;
                let hole = random_hole(img.height(), img.width(), &config.holes, &mut rng);
                out.push(NetSample::inpainting(img, hole)?);
            }
        }
    }
    Ok(out)
}

/// Loss terms of one step, averaged over the batch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub step: u64,
    pub epoch: usize,
    pub lr: f64,
    pub adv: f64,
    pub fea: f64,
    pub pec: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mex: Option<f64>,
    pub g_total: f64,
    pub d_global: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub d_mex: Option<f64>,
}

struct DiscPass {
    global: Vec<Tensor>,
    expansion: Vec<Vec<Tensor>>,
    d_global: f64,
    d_mex: Option<f64>,
}

struct GenPass {
    grads: Vec<Tensor>,
    adv: f64,
    fea: f64,
    pec: f64,
    mex: Option<f64>,
    total: f64,
}

fn disc_pass(models: &Models, s: &NetSample, config: &TrainConfig) -> Result<DiscPass> {
    let fake_value = models.generator.forward(&s.gen_input)?;
    let mut g = Graph::new();
    let fake = g.constant(fake_value);
    let real = g.constant(s.ground_truth.clone());
    let cond = g.constant(s.condition.clone());
    let dy = models.global_disc.params().bind(&mut g, true);
    let r = models.global_disc.forward_graph(&mut g, &dy, real, cond)?;
    let f = models.global_disc.forward_graph(&mut g, &dy, fake, cond)?;
    let adv = crate::losses::adversarial_node(&mut g, r.score, f.score, config.weights.form);
    let mut terms = vec![(adv.disc, 1.0)];
    let de: Vec<Vec<Var>> = models
        .expansion_discs
        .iter()
        .map(|d| d.params().bind(&mut g, true))
        .collect();
    let mut d_mex = None;
    if let Some(schedule) = config.expansion() {
        let context = g.constant(s.context.clone());
        let fused = g.blend(fake, context, s.mask.clone());
        let pairs: Vec<(&Discriminator, &[Var])> = models
            .expansion_discs
            .iter()
            .zip(de.iter().map(Vec::as_slice))
            .collect();
        let e = expansion_nodes(&mut g, fused, real, cond, &s.corners, &schedule, &pairs, config.weights.form)?;
        d_mex = Some(g.scalar(e.disc));
        terms.push((e.disc, 1.0));
    }
    let loss = g.weighted_sum(&terms);
    let mut grads = g.backward(loss);
    Ok(DiscPass {
        global: models.global_disc.params().gradients(&dy, &mut grads),
        expansion: models
            .expansion_discs
            .iter()
            .zip(&de)
            .map(|(d, b)| d.params().gradients(b, &mut grads))
            .collect(),
        d_global: g.scalar(adv.disc),
        d_mex,
    })
}

fn gen_pass(models: &Models, s: &NetSample, config: &TrainConfig) -> Result<GenPass> {
    let w = &config.weights;
    let mut g = Graph::new();
    let input = g.constant(s.gen_input.clone());
    let gp = models.generator.params().bind(&mut g, true);
    let fake = models.generator.forward_graph(&mut g, &gp, input)?;
    let real = g.constant(s.ground_truth.clone());
    let cond = g.constant(s.condition.clone());
    let dy = models.global_disc.params().bind(&mut g, false);
    let basic = basic_nodes(&mut g, fake, real, cond, &models.global_disc, &dy, &models.encoder, w.form)?;
    let mut terms = vec![(basic.adv.gen, w.lambda1), (basic.fea, w.lambda2), (basic.pec, w.lambda3)];
    let mut mex = None;
    if let Some(schedule) = config.expansion() {
        let de: Vec<Vec<Var>> = models
            .expansion_discs
            .iter()
            .map(|d| d.params().bind(&mut g, false))
            .collect();
        let context = g.constant(s.context.clone());
        let fused = g.blend(fake, context, s.mask.clone());
        let pairs: Vec<(&Discriminator, &[Var])> = models
            .expansion_discs
            .iter()
            .zip(de.iter().map(Vec::as_slice))
            .collect();
        let e = expansion_nodes(&mut g, fused, real, cond, &s.corners, &schedule, &pairs, w.form)?;
        mex = Some(g.scalar(e.gen));
        terms.push((e.gen, w.lambda4));
    }
    let loss = g.weighted_sum(&terms);
    let mut grads = g.backward(loss);
    Ok(GenPass {
        grads: models.generator.params().gradients(&gp, &mut grads),
        adv: g.scalar(basic.adv.gen),
        fea: g.scalar(basic.fea),
        pec: g.scalar(basic.pec),
        mex,
        total: g.scalar(loss),
    })
}

/// Sums in batch order, then divides, so the result does not depend on how
/// the per-sample passes were scheduled.
fn mean_grads<'a>(mut sets: impl Iterator<Item = &'a [Tensor]>, n: usize) -> Vec<Tensor> {
    let mut acc: Vec<Tensor> = sets.next().expect("non-empty batch").to_vec();
    for set in sets {
        for (a, g) in acc.iter_mut().zip(set) {
            a.add_assign(g);
        }
    }
    for a in &mut acc {
        a.scale(1.0 / n as f64);
    }
    acc
}

fn mean(values: impl Iterator<Item = f64>, n: usize) -> f64 {
    values.sum::<f64>() / n as f64
}

/// Optimizer state plus networks; everything needed to continue a run.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub config: TrainConfig,
    pub palette: Option<ColorPalette>,
    pub epoch: usize,
    pub step: u64,
    pub models: Models,
    opt_g: Adam,
    opt_global: Adam,
    opt_expansion: Vec<Adam>,
}

impl TrainState {
    pub fn new(config: TrainConfig, palette: Option<ColorPalette>) -> Result<Self> {
        config.validate()?;
        let models = Models::init(&config, palette.as_ref())?;
        Ok(Self {
            opt_g: Adam::new(models.generator.params()),
            opt_global: Adam::new(models.global_disc.params()),
            opt_expansion: models.expansion_discs.iter().map(|d| Adam::new(d.params())).collect(),
            config,
            palette,
            epoch: 0,
            step: 0,
            models,
        })
    }

    /// One discriminator update (every discriminator of the variant), then
    /// one generator update against the updated discriminators.
    pub fn train_step(&mut self, batch: &[NetSample]) -> Result<StepReport> {
        if batch.is_empty() {
            return Err(Error::Empty("batch"));
        }
        let cfg = &self.config;
        let exec = cfg.exec();
        let n = batch.len();
        let lr = lr_at(self.epoch.min(cfg.epochs), cfg)?;
        let t = self.step + 1;
        let non_finite = |term: &str, v: f64| -> Result<()> {
            if v.is_finite() {
                Ok(())
            } else {
                Err(Error::NonFinite {
                    term: term.to_string(),
                    step: self.step,
                })
            }
        };

        let models = &self.models;
        let d: Vec<DiscPass> = exec
            .map(batch, |s| disc_pass(models, s, cfg))
            .into_iter()
            .collect::<Result<_>>()?;
        let d_global = mean(d.iter().map(|p| p.d_global), n);
        let d_mex = d[0].d_mex.map(|_| mean(d.iter().filter_map(|p| p.d_mex), n));
        non_finite("d_global", d_global)?;
        if let Some(v) = d_mex {
            non_finite("d_mex", v)?;
        }
        let gy = mean_grads(d.iter().map(|p| p.global.as_slice()), n);
        let ge: Vec<Vec<Tensor>> = (0..self.models.expansion_discs.len())
            .map(|j| mean_grads(d.iter().map(|p| p.expansion[j].as_slice()), n))
            .collect();
        drop(d);

        // the generator pass sees the updated discriminators
        self.opt_global.step(self.models.global_disc.params_mut(), &gy, t, lr, cfg);
        for ((disc, opt), grads) in self.models.expansion_discs.iter_mut().zip(&mut self.opt_expansion).zip(&ge) {
            opt.step(disc.params_mut(), grads, t, lr, cfg);
        }
        let models = &self.models;
        let gen: Vec<GenPass> = exec
            .map(batch, |s| gen_pass(models, s, cfg))
            .into_iter()
            .collect::<Result<_>>()?;
        let report = StepReport {
            step: self.step,
            epoch: self.epoch,
            lr,
            adv: mean(gen.iter().map(|p| p.adv), n),
            fea: mean(gen.iter().map(|p| p.fea), n),
            pec: mean(gen.iter().map(|p| p.pec), n),
            mex: gen[0].mex.map(|_| mean(gen.iter().filter_map(|p| p.mex), n)),
            g_total: mean(gen.iter().map(|p| p.total), n),
            d_global,
            d_mex,
        };
        for (term, v) in [("adv", report.adv), ("fea", report.fea), ("pec", report.pec), ("g_total", report.g_total)] {
            non_finite(term, v)?;
        }
        if let Some(v) = report.mex {
            non_finite("mex", v)?;
        }
        let gg = mean_grads(gen.iter().map(|p| p.grads.as_slice()), n);
        self.opt_g.step(self.models.generator.params_mut(), &gg, t, lr, &self.config);
        self.step += 1;
        Ok(report)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut tensors = Vec::new();
        let mut push = |prefix: &str, p: &ParamSet| {
            tensors.extend(p.named().into_iter().map(|(n, t)| (format!("{prefix}{n}"), t)));
        };
        push("g/", self.models.generator.params());
        push("dy/", self.models.global_disc.params());
        for (j, d) in self.models.expansion_discs.iter().enumerate() {
            push(&format!("de{j}/"), d.params());
        }
        tensors.extend(self.opt_g.named("opt/g/", self.models.generator.params().names()));
        tensors.extend(self.opt_global.named("opt/dy/", self.models.global_disc.params().names()));
        for (j, (o, d)) in self.opt_expansion.iter().zip(&self.models.expansion_discs).enumerate() {
            tensors.extend(o.named(&format!("opt/de{j}/"), d.params().names()));
        }
        Checkpoint {
            config: self.config.clone(),
            palette: self.palette.clone(),
            epoch: self.epoch,
            step: self.step,
            tensors,
        }
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let mut s = Self::new(ck.config.clone(), ck.palette.clone())?;
        s.models.generator.params_mut().load(&ck.group("g/"))?;
        s.models.global_disc.params_mut().load(&ck.group("dy/"))?;
        for (j, d) in s.models.expansion_discs.iter_mut().enumerate() {
            d.params_mut().load(&ck.group(&format!("de{j}/")))?;
        }
        s.opt_g.load(ck, "opt/g/")?;
        s.opt_global.load(ck, "opt/dy/")?;
        for (j, o) in s.opt_expansion.iter_mut().enumerate() {
            o.load(ck, &format!("opt/de{j}/"))?;
        }
        s.epoch = ck.epoch;
        s.step = ck.step;
        Ok(s)
    }
}

/// Generator and palette from a checkpoint, for inference.
pub fn load_generator(ck: &Checkpoint) -> Result<Generator> {
    let (gen_in, _) = ck.config.channels(ck.palette.as_ref())?;
    let spec = GeneratorSpec {
        in_channels: gen_in,
        out_channels: 3,
        downsamples: ck.config.generator.downsamples,
        res_blocks: ck.config.generator.res_blocks,
        base_width: ck.config.generator.base_width,
    };
    let mut g = Generator::new(spec, &mut stream_rng(ck.config.seed, "generator"));
    g.params_mut().load(&ck.group("g/"))?;
    Ok(g)
}

/// Runs the remaining steps of the current epoch and advances the epoch
/// counter. `on_step` sees every report; the state is left as of the last
/// successful step when an error is returned.
pub fn train_epoch(
    train: &Dataset,
    state: &mut TrainState,
    mut on_step: impl FnMut(&StepReport) -> Result<()>,
) -> Result<()> {
    let samples = epoch_samples(train, &state.config, state.epoch)?;
    for batch in samples.chunks(state.config.batch_size) {
        let report = state.train_step(batch)?;
        on_step(&report)?;
    }
    state.epoch += 1;
    Ok(())
}

/// Trains to `config.epochs` without touching the file system.
pub fn fit(train: &Dataset, mut state: TrainState) -> Result<TrainState> {
    if train.is_empty() {
        return Err(Error::Empty("training set"));
    }
    while state.epoch < state.config.epochs {
        train_epoch(train, &mut state, |_| Ok(()))?;
    }
    Ok(state)
}

/// Run directory: `config.json`, `log.jsonl`, `checkpoints/epoch_N`, and
/// `evals.jsonl` when periodic evaluation is on.
#[derive(Debug, Clone)]
pub struct RunDir {
    pub root: PathBuf,
}

impl RunDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn checkpoint(&self, epoch: usize) -> PathBuf {
        self.root.join("checkpoints").join(format!("epoch_{epoch}"))
    }

    pub fn config(&self) -> PathBuf {
        self.root.join("config.json")
    }

    pub fn log(&self) -> PathBuf {
        self.root.join("log.jsonl")
    }

    pub fn evals(&self) -> PathBuf {
        self.root.join("evals.jsonl")
    }
}

fn append_line(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut f = OpenOptions::new().create(true).append(true).open(path)?;
    writeln!(f, "{}", serde_json::to_string(value)?)?;
    Ok(())
}

/// Trains from `state` until `config.epochs`, writing the run directory.
/// On a non-finite loss the current state is saved as
/// `checkpoints/abort_step_N` before the error is returned.
pub fn run_training(train: &Dataset, mut state: TrainState, out: &RunDir, test: Option<&Dataset>) -> Result<TrainState> {
    if train.is_empty() {
        return Err(Error::Empty("training set"));
    }
    fs::create_dir_all(out.root.join("checkpoints"))?;
    {
        let mut f = BufWriter::new(File::create(out.config())?);
        serde_json::to_writer_pretty(&mut f, &state.config)?;
        f.flush()?;
    }
    let epochs = state.config.epochs;
    while state.epoch < epochs {
        let mut log = BufWriter::new(OpenOptions::new().create(true).append(true).open(out.log())?);
        let result = train_epoch(train, &mut state, |r| {
            writeln!(log, "{}", serde_json::to_string(r)?)?;
            Ok(())
        });
        log.flush()?;
        match result {
            Ok(()) => {}
            Err(e @ Error::NonFinite { .. }) => {
                state
                    .to_checkpoint()
                    .save(&out.root.join("checkpoints").join(format!("abort_step_{}", state.step)))?;
                return Err(e);
            }
            Err(e) => return Err(e),
        }
        let every = state.config.checkpoint_every;
        if state.epoch == epochs || (every > 0 && state.epoch.is_multiple_of(every)) {
            state.to_checkpoint().save(&out.checkpoint(state.epoch))?;
        }
        let eval_every = state.config.eval_every;
        if let Some(test) = test {
            if eval_every > 0 && (state.epoch.is_multiple_of(eval_every) || state.epoch == epochs) {
                let report = evaluate(
                    &state.models.generator,
                    &state.config,
                    &test.palette,
                    test,
                    &EvalOptions::default(),
                )?;
                append_line(&out.evals(), &serde_json::json!({"epoch": state.epoch, "report": report}))?;
            }
        }
    }
    Ok(state)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synthetic_dataset;

    fn tiny(variant: Variant) -> TrainConfig {
        let mut c = TrainConfig {
            variant,
            epochs: 2,
            decay_start: 1,
            batch_size: 2,
            generator: GeneratorArch {
                downsamples: 1,
                res_blocks: 1,
                base_width: 4,
            },
            disc_width: 4,
            ..TrainConfig::default()
        };
        c.weights.schedule = ExpansionSchedule::new(1, 2, 2, true).unwrap();
        c
    }

    #[test]
    fn lr_schedule() {
        let c = TrainConfig::default();
        assert_eq!(lr_at(0, &c).unwrap(), 2e-4);
        assert!((lr_at(150, &c).unwrap() - 1e-4).abs() < 1e-18);
        assert_eq!(lr_at(200, &c).unwrap(), 0.0);
        assert!(lr_at(201, &c).is_err());
        let mut last = f64::INFINITY;
        for e in 0..=200 {
            let v = lr_at(e, &c).unwrap();
            assert!(v <= last);
            last = v;
        }
    }

    #[test]
    fn config_validation_and_json() {
        assert!(TrainConfig { decay_start: 300, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig { lr: 0.0, ..TrainConfig::default() }.validate().is_err());
        let c: TrainConfig = serde_json::from_str(r#"{"variant": "a-mex", "epochs": 30, "decay_start": 15}"#).unwrap();
        assert_eq!(c.variant, Variant::AMex);
        assert_eq!(c.lr, 2e-4);
        assert_eq!(c.weights.schedule.q, 4);
        assert!(serde_json::from_str::<TrainConfig>(r#"{"variant": "nope"}"#).is_err());
    }

    #[test]
    fn variant_gating_and_update_isolation() {
        let data = synthetic_dataset(4, 32, 32, 1, false);
        let basic = tiny(Variant::Basic);
        let mut s = TrainState::new(basic.clone(), Some(data.palette.clone())).unwrap();
        assert!(s.models.expansion_discs.is_empty());
        let samples = epoch_samples(&data, &basic, 0).unwrap();
        let encoder_before = s.models.encoder.clone();
        let r = s.train_step(&samples[..2]).unwrap();
        assert!(r.mex.is_none() && r.d_mex.is_none());
        assert_eq!(s.models.encoder, encoder_before);

        let mex = tiny(Variant::Mex);
        let mut m = TrainState::new(mex.clone(), Some(data.palette.clone())).unwrap();
        assert_eq!(m.models.expansion_discs.len(), 2);
        let r = m.train_step(&samples[..2]).unwrap();
        assert!(r.mex.is_some() && r.d_mex.is_some());

        let amex = tiny(Variant::AMex);
        let m = TrainState::new(amex, Some(data.palette.clone())).unwrap();
        assert_eq!(m.models.expansion_discs.len(), 1);
    }

    #[test]
    fn checkpoint_restores_state_exactly() {
        let data = synthetic_dataset(4, 32, 32, 2, false);
        let cfg = tiny(Variant::Mex);
        let mut s = TrainState::new(cfg.clone(), Some(data.palette.clone())).unwrap();
        let samples = epoch_samples(&data, &cfg, 0).unwrap();
        s.train_step(&samples[..2]).unwrap();
        let restored = TrainState::from_checkpoint(&s.to_checkpoint()).unwrap();
        assert_eq!(restored, s);
        let mut a = s.clone();
        let mut b = restored;
        assert_eq!(a.train_step(&samples[2..]).unwrap(), b.train_step(&samples[2..]).unwrap());
    }

    #[test]
    fn inpainting_samples() {
        let data = synthetic_dataset(3, 32, 32, 3, true);
        let cfg = TrainConfig {
            task: Task::Inpainting,
            ..tiny(Variant::AMex)
        };
        let samples = epoch_samples(&data, &cfg, 0).unwrap();
        assert_eq!(samples.len(), 3);
        for s in &samples {
            assert_eq!(s.gen_input.channels(), 4);
            let b = s.corners;
            assert!(b.height() >= 8 && b.height() <= 16 && b.width() >= 8 && b.width() <= 16);
            assert_eq!(s.condition.at(0, b.top, b.left), 0.0);
        }
        let mut st = TrainState::new(cfg, None).unwrap();
        assert!(st.train_step(&samples).unwrap().g_total.is_finite());
    }
}
