//! Test-set evaluation and the q-sensitivity sweep.

use std::fmt::Write as _;
use std::path::PathBuf;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{fid, hamm, l1, ssim_with_range, tiou, Embedder, RandomConvEmbedding};
use crate::data::{color_encode, test_masking, ColorPalette, Dataset, Split, TEST_SEED};
use crate::error::{Error, Result};
use crate::networks::Generator;
use crate::par::Exec;
use crate::pipeline::{edit_map, inpaint_image};
use crate::tensor::Tensor;
use crate::training::{fit, random_hole, Task, TrainConfig, TrainState};

/// Which set FID treats as real.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FidReference {
    /// The ground truth of each evaluated sample.
    #[default]
    Matched,
    /// Every test record once, masked or not.
    AllTest,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalOptions {
    /// Seeds the test-time boxes.
    pub seed: u64,
    /// Holes per image in inpainting evaluation.
    pub masks_per_image: usize,
    pub fid_reference: FidReference,
    /// Added to covariance diagonals so small test sets stay well-defined.
    pub fid_shrinkage: f64,
    pub parallel: bool,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            seed: TEST_SEED,
            masks_per_image: 4,
            fid_reference: FidReference::Matched,
            fid_shrinkage: 1e-6,
            parallel: true,
        }
    }
}

/// Aggregate report; fields that do not apply to the task are `null`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub variant: String,
    pub seed: u64,
    pub n_samples: usize,
    pub tiou_mean: Option<f64>,
    pub hamm_mean: Option<f64>,
    pub fid: Option<f64>,
    pub ssim_mean: Option<f64>,
    pub l1_mean: Option<f64>,
}

/// Per-sample scores.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleScore {
    pub name: String,
    pub corners: [usize; 4],
    #[serde(skip_serializing_if = "Option::is_none")]
    pub target: Option<u8>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tiou: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub hamm: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ssim: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub l1: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub report: EvalReport,
    pub samples: Vec<SampleScore>,
}

fn mean_of(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Vec<f64> = values.flatten().collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

fn unit(t: &Tensor) -> Tensor {
    t.map(|v| (v + 1.0) / 2.0)
}

pub fn evaluate(
    generator: &Generator,
    config: &TrainConfig,
    palette: &ColorPalette,
    test: &Dataset,
    opts: &EvalOptions,
) -> Result<EvalReport> {
    Ok(evaluate_detailed(generator, config, palette, test, opts)?.report)
}

/// Scores the generator on deterministic test-time boxes.
///
/// Segmentation: the generated map is fused with the context, label-decoded
/// and scored with tIOU and hamm inside the box. Inpainting: SSIM and L1 on
/// intensities scaled to `[0, 1]`. FID compares fused outputs with the
/// reference set under [`RandomConvEmbedding`].
pub fn evaluate_detailed(
    generator: &Generator,
    config: &TrainConfig,
    palette: &ColorPalette,
    test: &Dataset,
    opts: &EvalOptions,
) -> Result<Evaluation> {
    let exec = if opts.parallel { Exec::Parallel } else { Exec::Sequential };
    let embed = RandomConvEmbedding::default();
    let (samples, generated, matched, all): (Vec<SampleScore>, Vec<Tensor>, Vec<Tensor>, Vec<Tensor>) = match config.task {
        Task::Segmentation => {
            let mut spec = test.spec(PathBuf::new(), Split::Test);
            spec.test_seed = opts.seed;
            let triples = test_masking(test, &spec)?;
            let results = exec.map(&triples, |t| -> Result<(SampleScore, Tensor)> {
                let out = edit_map(generator, palette, &t.complete, &t.edit)?;
                Ok((
                    SampleScore {
                        name: t.name.clone(),
                        corners: t.edit.corners.as_array(),
                        target: Some(t.edit.target_label),
                        tiou: Some(tiou(&out.manipulated_labels, &t.complete, &t.mask, t.edit.target_label)?),
                        hamm: Some(hamm(&out.manipulated_labels, &t.complete, &t.mask)?),
                        ssim: None,
                        l1: None,
                    },
                    out.manipulated_color.to_tensor(),
                ))
            });
            let mut scores = Vec::new();
            let mut gen = Vec::new();
            for r in results {
                let (s, g) = r?;
                scores.push(s);
                gen.push(g);
            }
            let matched = triples.iter().map(|t| t.ground_truth_color.clone()).collect();
            let all = test
                .records
                .iter()
                .map(|r| Ok(color_encode(&r.labels, palette)?.to_tensor()))
                .collect::<Result<_>>()?;
            (scores, gen, matched, all)
        }
        Task::Inpainting => {
            if !test.has_images() {
                return Err(Error::Dataset("inpainting evaluation needs RGB images".into()));
            }
            let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
            let mut jobs = Vec::new();
            for rec in &test.records {
                let img = rec.image.as_ref().expect("checked above");
                for k in 0..opts.masks_per_image {
                    let hole = random_hole(img.height(), img.width(), &config.holes, &mut rng);
                    jobs.push((format!("{}#{k}", rec.name), img, hole));
                }
            }
            let results = exec.map(&jobs, |(name, img, hole)| -> Result<(SampleScore, Tensor)> {
                let out = inpaint_image(generator, img, hole)?.to_tensor();
                let truth = img.to_tensor();
                Ok((
                    SampleScore {
                        name: name.clone(),
                        corners: hole.as_array(),
                        target: None,
                        tiou: None,
                        hamm: None,
                        ssim: Some(ssim_with_range(&unit(&out), &unit(&truth), 1.0)?),
                        l1: Some(l1(&unit(&out), &unit(&truth))?),
                    },
                    out,
                ))
            });
            let mut scores = Vec::new();
            let mut gen = Vec::new();
            for r in results {
                let (s, g) = r?;
                scores.push(s);
                gen.push(g);
            }
            let matched = jobs.iter().map(|(_, img, _)| img.to_tensor()).collect();
            let all = test
                .records
                .iter()
                .map(|r| r.image.as_ref().expect("checked above").to_tensor())
                .collect();
            (scores, gen, matched, all)
        }
    };
    if samples.is_empty() {
        return Err(Error::Empty("no test sample has a qualifying box"));
    }
    let reference = match opts.fid_reference {
        FidReference::Matched => &matched,
        FidReference::AllTest => &all,
    };
    let fid_value = fid(&generated, reference, &embed as &dyn Embedder, opts.fid_shrinkage)?;
    let report = EvalReport {
        variant: config.variant.name().to_string(),
        seed: opts.seed,
        n_samples: samples.len(),
        tiou_mean: mean_of(samples.iter().map(|s| s.tiou)),
        hamm_mean: mean_of(samples.iter().map(|s| s.hamm)),
        fid: Some(fid_value),
        ssim_mean: mean_of(samples.iter().map(|s| s.ssim)),
        l1_mean: mean_of(samples.iter().map(|s| s.l1)),
    };
    Ok(Evaluation { report, samples })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QRow {
    pub q: usize,
    pub tiou: f64,
    pub hamm: f64,
}

/// Trains one model per `q` from the same seed and scores each on the test
/// split.
pub fn q_sweep(
    train: &Dataset,
    test: &Dataset,
    base: &TrainConfig,
    qs: &[usize],
    opts: &EvalOptions,
) -> Result<Vec<QRow>> {
    if base.task != Task::Segmentation {
        return Err(Error::Config("q sweep scores tIOU/hamm and needs the segmentation task".into()));
    }
    qs.iter()
        .map(|&q| {
            let mut cfg = base.clone();
            cfg.weights.schedule.q = q;
            let state = fit(train, TrainState::new(cfg.clone(), Some(train.palette.clone()))?)?;
            let r = evaluate(&state.models.generator, &cfg, &test.palette, test, opts)?;
            Ok(QRow {
                q,
                tiou: r.tiou_mean.unwrap_or(f64::NAN),
                hamm: r.hamm_mean.unwrap_or(f64::NAN),
            })
        })
        .collect()
}

/// `q,tiou,hamm` CSV with shortest round-trip float formatting.
pub fn q_sweep_csv(rows: &[QRow]) -> String {
    let mut s = String::from("q,tiou,hamm\n");
    for r in rows {
        writeln!(s, "{},{},{}", r.q, r.tiou, r.hamm).expect("write to string");
    }
    s
}
