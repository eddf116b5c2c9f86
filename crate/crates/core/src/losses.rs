//! Training objectives: the conditional adversarial, feature-matching and
//! perceptual terms of the basic model, and the expansion losses on top.
//!
//! Each objective comes in two shapes: a `*_node` builder that records onto
//! a [`Graph`] for training, and a plain function on tensors for evaluation
//! and tests.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{expansion_masks, BoxCorners, ExpansionSchedule};
use crate::graph::{Graph, Var, LOG_EPS};
use crate::networks::{Discriminator, DiscriminatorSpec, FeatureEncoder};
use crate::tensor::Tensor;

/// How the adversarial terms are formed.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AdversarialForm {
    /// D: `−mean ln D(real) − mean ln(1 − D(fake))`; G: `−mean ln D(fake)`.
    #[default]
    CrossEntropy,
    /// D: `−mean ln D(real) − 1 + mean ln D(fake)`; G: `1 − mean ln D(fake)`.
    /// Unbounded below for D; kept for fidelity experiments only.
    Literal,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    /// Global adversarial term.
    pub lambda1: f64,
    /// Feature matching.
    pub lambda2: f64,
    /// Perceptual.
    pub lambda3: f64,
    /// Expansion (MEx / A-MEx) term.
    pub lambda4: f64,
    pub schedule: ExpansionSchedule,
    pub form: AdversarialForm,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda1: 1.0,
            lambda2: 1.0,
            lambda3: 1.0,
            lambda4: 1.0,
            schedule: ExpansionSchedule {
                q: 4,
                alpha: 5,
                beta: 5,
                cropped: true,
            },
            form: AdversarialForm::CrossEntropy,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda1", self.lambda1),
            ("lambda2", self.lambda2),
            ("lambda3", self.lambda3),
            ("lambda4", self.lambda4),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be a finite non-negative number, got {v}")));
            }
        }
        self.schedule.validate()
    }
}

/// Generator- and discriminator-side values of one adversarial loss.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdvPair {
    pub gen: f64,
    pub disc: f64,
}

impl AdvPair {
    fn add(self, o: AdvPair) -> AdvPair {
        AdvPair {
            gen: self.gen + o.gen,
            disc: self.disc + o.disc,
        }
    }
}

fn clamped_mean_log(scores: &Tensor, complement: bool) -> f64 {
    let s: f64 = scores
        .data()
        .iter()
        .map(|&v| {
            let p = if complement { 1.0 - v } else { v };
            p.clamp(LOG_EPS, 1.0 - LOG_EPS).ln()
        })
        .sum();
    s / scores.len() as f64
}

/// Adversarial terms from real and fake score fields.
pub fn adversarial_loss(real: &Tensor, fake: &Tensor, form: AdversarialForm) -> Result<AdvPair> {
    if real.is_empty() || fake.is_empty() {
        return Err(Error::Empty("score field"));
    }
    let log_real = clamped_mean_log(real, false);
    let log_fake = clamped_mean_log(fake, false);
    Ok(match form {
        AdversarialForm::CrossEntropy => AdvPair {
            gen: -log_fake,
            disc: -log_real - clamped_mean_log(fake, true),
        },
        AdversarialForm::Literal => AdvPair {
            gen: 1.0 - log_fake,
            disc: -log_real - 1.0 + log_fake,
        },
    })
}

/// Graph nodes of one adversarial loss.
#[derive(Debug, Clone, Copy)]
pub struct AdvNodes {
    pub gen: Var,
    pub disc: Var,
}

pub fn adversarial_node(g: &mut Graph, real: Var, fake: Var, form: AdversarialForm) -> AdvNodes {
    let log_real = g.mean_log(real, false);
    let log_fake = g.mean_log(fake, false);
    match form {
        AdversarialForm::CrossEntropy => {
            let log_not_fake = g.mean_log(fake, true);
            AdvNodes {
                gen: g.weighted_sum(&[(log_fake, -1.0)]),
                disc: g.weighted_sum(&[(log_real, -1.0), (log_not_fake, -1.0)]),
            }
        }
        AdversarialForm::Literal => {
            let one = g.constant(Tensor::scalar(1.0));
            AdvNodes {
                gen: g.weighted_sum(&[(one, 1.0), (log_fake, -1.0)]),
                disc: g.weighted_sum(&[(log_real, -1.0), (one, -1.0), (log_fake, 1.0)]),
            }
        }
    }
}

fn check_layers(real: &[Tensor], fake: &[Tensor]) -> Result<()> {
    if real.len() != fake.len() {
        return Err(Error::shape(format!("{} real layers vs {} fake layers", real.len(), fake.len())));
    }
    for (i, (r, f)) in real.iter().zip(fake).enumerate() {
        if !r.same_shape(f) {
            return Err(Error::shape(format!("feature layer {i}: {:?} vs {:?}", r.shape(), f.shape())));
        }
    }
    Ok(())
}

/// `Σ_i mean|real_i − fake_i|` over discriminator layers.
pub fn feature_matching_loss(real: &[Tensor], fake: &[Tensor]) -> Result<f64> {
    check_layers(real, fake)?;
    Ok(real
        .iter()
        .zip(fake)
        .map(|(r, f)| r.data().iter().zip(f.data()).map(|(a, b)| (a - b).abs()).sum::<f64>() / r.len() as f64)
        .sum())
}

pub fn feature_matching_node(g: &mut Graph, real: &[Var], fake: &[Var]) -> Result<Var> {
    let rv: Vec<Tensor> = real.iter().map(|&v| g.value(v).clone()).collect();
    let fv: Vec<Tensor> = fake.iter().map(|&v| g.value(v).clone()).collect();
    check_layers(&rv, &fv)?;
    let terms: Vec<(Var, f64)> = real
        .iter()
        .zip(fake)
        .map(|(&r, &f)| (g.mean_abs_diff(r, f), 1.0))
        .collect();
    Ok(g.weighted_sum(&terms))
}

/// `Σ_i w_i · mean|E_i(generated) − E_i(ground_truth)|`.
pub fn perceptual_node(g: &mut Graph, encoder: &dyn FeatureEncoder, generated: Var, ground_truth: Var) -> Result<Var> {
    g.value(generated).expect_same_shape(g.value(ground_truth), "perceptual inputs")?;
    let a = encoder.taps(g, generated);
    let b = encoder.taps(g, ground_truth);
    let w = encoder.tap_weights();
    if a.len() != w.len() {
        return Err(Error::shape(format!("{} encoder taps for {} weights", a.len(), w.len())));
    }
    let terms: Vec<(Var, f64)> = a
        .iter()
        .zip(&b)
        .zip(w)
        .map(|((&x, &y), &wi)| (g.mean_abs_diff(x, y), wi))
        .collect();
    Ok(g.weighted_sum(&terms))
}

pub fn perceptual_loss(generated: &Tensor, ground_truth: &Tensor, encoder: &dyn FeatureEncoder) -> Result<f64> {
    let mut g = Graph::new();
    let a = g.constant(generated.clone());
    let b = g.constant(ground_truth.clone());
    let v = perceptual_node(&mut g, encoder, a, b)?;
    Ok(g.scalar(v))
}

/// Terms of the basic objective.
#[derive(Debug, Clone, Copy)]
pub struct BasicNodes {
    pub adv: AdvNodes,
    pub fea: Var,
    pub pec: Var,
}

impl BasicNodes {
    /// `λ1·adv + λ2·fea + λ3·pec`, generator side.
    pub fn generator_objective(&self, g: &mut Graph, w: &LossWeights) -> Var {
        g.weighted_sum(&[(self.adv.gen, w.lambda1), (self.fea, w.lambda2), (self.pec, w.lambda3)])
    }
}

/// Global conditional discriminator on the full generated map plus the
/// feature-matching and perceptual terms.
#[allow(clippy::too_many_arguments)]
pub fn basic_nodes(
    g: &mut Graph,
    generated: Var,
    ground_truth: Var,
    condition: Var,
    disc: &Discriminator,
    disc_params: &[Var],
    encoder: &dyn FeatureEncoder,
    form: AdversarialForm,
) -> Result<BasicNodes> {
    let real = disc.forward_graph(g, disc_params, ground_truth, condition)?;
    let fake = disc.forward_graph(g, disc_params, generated, condition)?;
    Ok(BasicNodes {
        adv: adversarial_node(g, real.score, fake.score, form),
        fea: feature_matching_node(g, &real.features, &fake.features)?,
        pec: perceptual_node(g, encoder, generated, ground_truth)?,
    })
}

/// Basic objective on plain tensors: `(generator side, discriminator side)`.
pub fn basic_loss(
    generated: &Tensor,
    ground_truth: &Tensor,
    condition: &Tensor,
    disc: &Discriminator,
    encoder: &dyn FeatureEncoder,
    weights: &LossWeights,
) -> Result<AdvPair> {
    let mut g = Graph::new();
    let x = g.constant(generated.clone());
    let y = g.constant(ground_truth.clone());
    let c = g.constant(condition.clone());
    let p = disc.params().bind(&mut g, false);
    let n = basic_nodes(&mut g, x, y, c, disc, &p, encoder, weights.form)?;
    let obj = n.generator_objective(&mut g, weights);
    Ok(AdvPair {
        gen: g.scalar(obj),
        disc: g.scalar(n.adv.disc),
    })
}

/// Per-level and summed expansion terms.
#[derive(Debug, Clone)]
pub struct ExpansionNodes {
    pub levels: Vec<AdvNodes>,
    pub gen: Var,
    pub disc: Var,
}

/// Expansion loss over levels `0..=q`. `discs` holds one discriminator per
/// level when the schedule is cropped and exactly one shared discriminator
/// otherwise, each paired with its bound parameters.
///
/// Every level input is `x × M^E_j`, so `fused` only matters inside the
/// largest expanded box. Cropped levels smaller than the discriminator's
/// minimum side are zero-padded on the bottom/right.
#[allow(clippy::too_many_arguments)]
pub fn expansion_nodes(
    g: &mut Graph,
    fused: Var,
    ground_truth: Var,
    condition: Var,
    corners: &BoxCorners,
    schedule: &ExpansionSchedule,
    discs: &[(&Discriminator, &[Var])],
    form: AdversarialForm,
) -> Result<ExpansionNodes> {
    let expected = if schedule.cropped { schedule.levels() } else { 1 };
    if discs.len() != expected {
        return Err(Error::Config(format!(
            "{} discriminators for a {} schedule with q={} (need {expected})",
            discs.len(),
            if schedule.cropped { "cropped" } else { "shared" },
            schedule.q
        )));
    }
    let (_, h, w) = g.value(fused).shape();
    g.value(fused).expect_same_shape(g.value(ground_truth), "fused vs ground truth")?;
    let (_, ch, cw) = g.value(condition).shape();
    if (ch, cw) != (h, w) {
        return Err(Error::shape(format!("condition {ch}x{cw} vs image {h}x{w}")));
    }
    let side = DiscriminatorSpec::MIN_SIDE;
    let mut levels = Vec::with_capacity(schedule.levels());
    for (j, (expanded, mask)) in expansion_masks(corners, schedule, h, w)?.into_iter().enumerate() {
        let mask = Arc::new(mask);
        let (disc, params) = discs[if schedule.cropped { j } else { 0 }];
        let mut view = |x: Var| {
            let m = g.masked(x, mask.clone());
            if schedule.cropped {
                let c = g.crop(m, expanded.top, expanded.left, expanded.height(), expanded.width());
                g.pad_to(c, side, side)
            } else {
                m
            }
        };
        let real = view(ground_truth);
        let fake = view(fused);
        let cond = view(condition);
        let r = disc.forward_graph(g, params, real, cond)?;
        let f = disc.forward_graph(g, params, fake, cond)?;
        levels.push(adversarial_node(g, r.score, f.score, form));
    }
    let gen: Vec<(Var, f64)> = levels.iter().map(|l| (l.gen, 1.0)).collect();
    let disc: Vec<(Var, f64)> = levels.iter().map(|l| (l.disc, 1.0)).collect();
    Ok(ExpansionNodes {
        gen: g.weighted_sum(&gen),
        disc: g.weighted_sum(&disc),
        levels,
    })
}

fn expansion_plain(
    fused: &Tensor,
    ground_truth: &Tensor,
    condition: &Tensor,
    corners: &BoxCorners,
    schedule: &ExpansionSchedule,
    discs: &[&Discriminator],
    form: AdversarialForm,
) -> Result<AdvPair> {
    let mut g = Graph::new();
    let f = g.constant(fused.clone());
    let y = g.constant(ground_truth.clone());
    let c = g.constant(condition.clone());
    let bound: Vec<Vec<Var>> = discs.iter().map(|d| d.params().bind(&mut g, false)).collect();
    let pairs: Vec<(&Discriminator, &[Var])> = discs.iter().copied().zip(bound.iter().map(Vec::as_slice)).collect();
    let n = expansion_nodes(&mut g, f, y, c, corners, schedule, &pairs, form)?;
    Ok(AdvPair {
        gen: g.scalar(n.gen),
        disc: g.scalar(n.disc),
    })
}

/// Cropped expansion loss with one discriminator per level.
pub fn mex_loss(
    fused: &Tensor,
    ground_truth: &Tensor,
    condition: &Tensor,
    corners: &BoxCorners,
    schedule: &ExpansionSchedule,
    discs: &[Discriminator],
    form: AdversarialForm,
) -> Result<AdvPair> {
    if !schedule.cropped {
        return Err(Error::Config("mex_loss needs a cropped schedule".into()));
    }
    let refs: Vec<&Discriminator> = discs.iter().collect();
    expansion_plain(fused, ground_truth, condition, corners, schedule, &refs, form)
}

/// Uncropped expansion loss through one shared discriminator.
pub fn a_mex_loss(
    fused: &Tensor,
    ground_truth: &Tensor,
    condition: &Tensor,
    corners: &BoxCorners,
    schedule: &ExpansionSchedule,
    disc: &Discriminator,
    form: AdversarialForm,
) -> Result<AdvPair> {
    if schedule.cropped {
        return Err(Error::Config("a_mex_loss needs an uncropped schedule".into()));
    }
    expansion_plain(fused, ground_truth, condition, corners, schedule, &[disc], form)
}

/// Adversarial loss of one discriminator on the raw box crop of the fused
/// map, ground truth and condition (the local term of a global+local model).
pub fn local_adversarial_loss(
    fused: &Tensor,
    ground_truth: &Tensor,
    condition: &Tensor,
    corners: &BoxCorners,
    disc: &Discriminator,
    form: AdversarialForm,
) -> Result<AdvPair> {
    corners.validate(fused.height(), fused.width())?;
    let side = DiscriminatorSpec::MIN_SIDE;
    let cut = |t: &Tensor| {
        t.crop(corners.top, corners.left, corners.height(), corners.width())
            .pad_to(side, side)
    };
    let (real, _) = disc.forward(&cut(ground_truth), &cut(condition))?;
    let (fake, _) = disc.forward(&cut(fused), &cut(condition))?;
    adversarial_loss(&real, &fake, form)
}

/// Which expansion term, if any, is added to the basic objective.
pub enum Expansion<'a> {
    None,
    Mex(&'a [Discriminator]),
    AMex(&'a Discriminator),
}

/// Basic objective plus `λ4` times the selected expansion term. The
/// discriminator side is the sum of the global and expansion sides.
#[allow(clippy::too_many_arguments)]
pub fn mexgan_loss(
    generated: &Tensor,
    fused: &Tensor,
    ground_truth: &Tensor,
    condition: &Tensor,
    corners: &BoxCorners,
    global_disc: &Discriminator,
    expansion: Expansion<'_>,
    encoder: &dyn FeatureEncoder,
    weights: &LossWeights,
) -> Result<AdvPair> {
    let basic = basic_loss(generated, ground_truth, condition, global_disc, encoder, weights)?;
    let ext = match expansion {
        Expansion::None => return Ok(basic),
        Expansion::Mex(d) => mex_loss(fused, ground_truth, condition, corners, &weights.schedule, d, weights.form)?,
        Expansion::AMex(d) => a_mex_loss(fused, ground_truth, condition, corners, &weights.schedule, d, weights.form)?,
    };
    Ok(AdvPair {
        gen: basic.gen + weights.lambda4 * ext.gen,
        disc: basic.disc,
    }
    .add(AdvPair {
        gen: 0.0,
        disc: ext.disc,
    }))
}
