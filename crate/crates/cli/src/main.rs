//! `mexgan` command-line entry point.
//!
//! Exit codes: 0 success, 2 usage or configuration error, 3 non-finite loss.

use std::fs;
use std::net::{IpAddr, SocketAddr};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use mexgan::checkpoint::Checkpoint;
use mexgan::data::{synthetic_dataset, Dataset, LabelMap, Split};
use mexgan::geometry::{BoxCorners, EditBox};
use mexgan::metrics::report::{evaluate_detailed, q_sweep, q_sweep_csv, EvalOptions, FidReference};
use mexgan::pipeline::edit_map;
use mexgan::training::{load_generator, run_training, RunDir, Task, TrainConfig, TrainState, Variant};
use mexgan_service::{AppState, GeneratorTranslator, Model, Translator};
use serde_json::Value;

/// Size of the bundled synthetic dataset used when `--data` is omitted.
const BUNDLED: (usize, usize, usize, usize) = (64, 16, 32, 32);
const BUNDLED_SEED: u64 = 1;

#[derive(Parser)]
#[command(name = "mexgan", version, about = "Semantic editing of segmentation maps with multi-expansion losses")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a segmentation-editing model.
    Train(TrainArgs),
    /// Score a checkpoint on the test split.
    Evaluate(EvalArgs),
    /// Apply one box edit to a label map.
    Edit(EditArgs),
    /// Train and evaluate the natural-image inpainting pipeline.
    Inpaint(InpaintArgs),
    /// Write the synthetic dataset to disk.
    SynthData(SynthArgs),
    /// Train one model per q and report tIOU/hamm as CSV.
    QSweep(QSweepArgs),
    /// Run the HTTP edit service.
    Serve(ServeArgs),
}

/// Flags shared by the training commands; each overrides the config file.
#[derive(Args, Clone, Default)]
struct Overrides {
    #[arg(long)]
    q: Option<usize>,
    #[arg(long)]
    alpha: Option<usize>,
    #[arg(long)]
    beta: Option<usize>,
    /// Training seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    decay_start: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Use the sequential code path instead of the thread pool.
    #[arg(long)]
    sequential: bool,
}

#[derive(Args)]
struct TrainArgs {
    /// JSON training config.
    #[arg(long, required_unless_present = "resume")]
    config: Option<PathBuf>,
    /// Dataset root holding palette.json, train/ and test/; the bundled
    /// synthetic set when omitted.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, value_enum)]
    variant: Option<VariantArg>,
    #[command(flatten)]
    overrides: Overrides,
    /// Run directory.
    #[arg(long, default_value = "runs/train")]
    out: PathBuf,
    /// Continue from a checkpoint; its config is used, `--epochs` may extend it.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum VariantArg {
    Basic,
    Gl,
    Mex,
    AMex,
}

impl From<VariantArg> for Variant {
    fn from(v: VariantArg) -> Self {
        match v {
            VariantArg::Basic => Variant::Basic,
            VariantArg::Gl => Variant::Gl,
            VariantArg::Mex => Variant::Mex,
            VariantArg::AMex => Variant::AMex,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum InpaintVariant {
    Gl,
    GlAMex,
}

#[derive(Clone, Copy, ValueEnum)]
enum FidRefArg {
    Matched,
    AllTest,
}

#[derive(Args)]
struct EvalFlags {
    /// Seed of the test-time boxes.
    #[arg(long = "eval-seed", default_value_t = EvalOptions::default().seed)]
    eval_seed: u64,
    #[arg(long, value_enum, default_value = "matched")]
    fid_reference: FidRefArg,
    /// Holes per test image for inpainting.
    #[arg(long, default_value_t = EvalOptions::default().masks_per_image)]
    masks_per_image: usize,
}

impl EvalFlags {
    fn options(&self, sequential: bool) -> EvalOptions {
        EvalOptions {
            seed: self.eval_seed,
            masks_per_image: self.masks_per_image,
            fid_reference: match self.fid_reference {
                FidRefArg::Matched => FidReference::Matched,
                FidRefArg::AllTest => FidReference::AllTest,
            },
            parallel: !sequential,
            ..EvalOptions::default()
        }
    }
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: Option<PathBuf>,
    #[command(flatten)]
    eval: EvalFlags,
    #[arg(long)]
    sequential: bool,
    /// Report path; printed to stdout either way.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Per-sample scores as JSON lines.
    #[arg(long)]
    samples: Option<PathBuf>,
}

#[derive(Args)]
struct EditArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// 8-bit grayscale PNG of label ids.
    #[arg(long)]
    label_map: PathBuf,
    /// Inclusive box `r1,c1,r2,c2`.
    #[arg(long = "box", value_parser = parse_box, allow_hyphen_values = true)]
    bbox: [i64; 4],
    /// Target label id.
    #[arg(long)]
    target: u8,
    /// Output directory for `color.png` and `labels.png`.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct InpaintArgs {
    #[arg(long, value_enum, default_value = "gl-a-mex")]
    variant: InpaintVariant,
    /// Optional JSON config over the inpainting defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset root with RGB images; the bundled synthetic set when omitted.
    #[arg(long)]
    data: Option<PathBuf>,
    #[command(flatten)]
    overrides: Overrides,
    #[command(flatten)]
    eval: EvalFlags,
    #[arg(long, default_value = "runs/inpaint")]
    out: PathBuf,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = BUNDLED.0)]
    train: usize,
    #[arg(long, default_value_t = BUNDLED.1)]
    test: usize,
    #[arg(long, default_value_t = BUNDLED.2)]
    height: usize,
    #[arg(long, default_value_t = BUNDLED.3)]
    width: usize,
    /// Train split seed; the test split uses `seed + 1`.
    #[arg(long, default_value_t = BUNDLED_SEED)]
    seed: u64,
    /// Also render RGB images for inpainting.
    #[arg(long)]
    images: bool,
}

#[derive(Args)]
struct QSweepArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, value_enum)]
    variant: Option<VariantArg>,
    /// Comma-separated q values.
    #[arg(long, value_delimiter = ',', default_value = "0,1,2,3,4")]
    qs: Vec<usize>,
    #[command(flatten)]
    overrides: Overrides,
    #[command(flatten)]
    eval: EvalFlags,
    /// CSV path; printed to stdout either way.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ServeArgs {
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Dataset root whose test split is served under /api/samples.
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long, default_value_t = 8080)]
    port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    host: IpAddr,
    /// Generator used as the downstream label-to-image model.
    #[arg(long)]
    translate_checkpoint: Option<PathBuf>,
    /// Directory with the built editor bundle.
    #[arg(long = "static")]
    static_dir: Option<PathBuf>,
}

fn parse_box(s: &str) -> Result<[i64; 4], String> {
    let parts: Vec<i64> = s
        .split(',')
        .map(|p| p.trim().parse::<i64>().map_err(|e| format!("{p:?}: {e}")))
        .collect::<Result<_, _>>()?;
    parts
        .try_into()
        .map_err(|v: Vec<i64>| format!("expected r1,c1,r2,c2, got {} values", v.len()))
}

/// Overlays `file` on `base`, rejecting keys the base does not have.
fn merge(base: &mut Value, file: Value, path: &str) -> Result<()> {
    match (base, file) {
        (Value::Object(b), Value::Object(f)) => {
            for (k, v) in f {
                let key = if path.is_empty() { k.clone() } else { format!("{path}.{k}") };
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v, &key)?,
                    None => bail!("unknown config key {key:?}"),
                }
            }
            Ok(())
        }
        (b, f) => {
            *b = f;
            Ok(())
        }
    }
}

/// Default, then file, then flags.
fn build_config(base: TrainConfig, file: Option<&Path>, variant: Option<Variant>, o: &Overrides) -> Result<TrainConfig> {
    let mut v = serde_json::to_value(&base)?;
    if let Some(path) = file {
        let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let parsed: Value = serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
        merge(&mut v, parsed, "")?;
    }
    let mut cfg: TrainConfig = serde_json::from_value(v).context("config")?;
    if let Some(variant) = variant {
        cfg.variant = variant;
    }
    apply_overrides(&mut cfg, o);
    cfg.validate()?;
    Ok(cfg)
}

fn apply_overrides(cfg: &mut TrainConfig, o: &Overrides) {
    let s = &mut cfg.weights.schedule;
    s.q = o.q.unwrap_or(s.q);
    s.alpha = o.alpha.unwrap_or(s.alpha);
    s.beta = o.beta.unwrap_or(s.beta);
    cfg.seed = o.seed.unwrap_or(cfg.seed);
    cfg.batch_size = o.batch_size.unwrap_or(cfg.batch_size);
    if let Some(e) = o.epochs {
        cfg.epochs = e;
        if o.decay_start.is_none() && cfg.decay_start > e {
            cfg.decay_start = e / 2;
            eprintln!("note: decay_start lowered to {} for {e} epochs", cfg.decay_start);
        }
    }
    cfg.decay_start = o.decay_start.unwrap_or(cfg.decay_start);
    if o.sequential {
        cfg.parallel = false;
    }
}

fn bundled(images: bool) -> (Dataset, Dataset) {
    let (n_train, n_test, h, w) = BUNDLED;
    (
        synthetic_dataset(n_train, h, w, BUNDLED_SEED, images),
        synthetic_dataset(n_test, h, w, BUNDLED_SEED + 1, images),
    )
}

fn load_split(root: &Path, split: Split) -> Result<Dataset> {
    Dataset::load(root, split).with_context(|| format!("loading {} split of {}", split.dir_name(), root.display()))
}

fn train_and_test(data: Option<&Path>, images: bool) -> Result<(Dataset, Option<Dataset>)> {
    match data {
        Some(root) => {
            let test = if root.join(Split::Test.dir_name()).exists() {
                Some(load_split(root, Split::Test)?)
            } else {
                None
            };
            Ok((load_split(root, Split::Train)?, test))
        }
        None => {
            let (train, test) = bundled(images);
            Ok((train, Some(test)))
        }
    }
}

fn test_split(data: Option<&Path>, images: bool) -> Result<Dataset> {
    match data {
        Some(root) => load_split(root, Split::Test),
        None => Ok(bundled(images).1),
    }
}

fn write_json(path: &Path, value: &Value) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

fn train(args: TrainArgs) -> Result<()> {
    enum Start {
        Resume(Box<Checkpoint>),
        Fresh(Box<TrainConfig>),
    }
    let start = match &args.resume {
        Some(path) => Start::Resume(Box::new(Checkpoint::load(path)?)),
        None => Start::Fresh(Box::new(build_config(
            TrainConfig::default(),
            args.config.as_deref(),
            args.variant.map(Variant::from),
            &args.overrides,
        )?)),
    };
    let task = match &start {
        Start::Resume(ck) => ck.config.task,
        Start::Fresh(cfg) => cfg.task,
    };
    let (train, test) = train_and_test(args.data.as_deref(), task == Task::Inpainting)?;
    let state = match start {
        Start::Resume(ck) => {
            let mut state = TrainState::from_checkpoint(&ck)?;
            apply_overrides(&mut state.config, &Overrides {
                epochs: args.overrides.epochs,
                decay_start: args.overrides.decay_start,
                sequential: args.overrides.sequential,
                ..Overrides::default()
            });
            state.config.validate()?;
            state
        }
        Start::Fresh(cfg) => TrainState::new(*cfg, Some(train.palette.clone()))?,
    };
    let out = RunDir::new(&args.out);
    let state = run_training(&train, state, &out, test.as_ref())?;
    println!(
        "{}",
        serde_json::json!({
            "variant": state.config.variant.name(),
            "epoch": state.epoch,
            "step": state.step,
            "checkpoint": out.checkpoint(state.epoch),
        })
    );
    Ok(())
}

fn evaluate(args: EvalArgs) -> Result<()> {
    let ck = Checkpoint::load(&args.checkpoint)?;
    let generator = load_generator(&ck)?;
    let test = test_split(args.data.as_deref(), ck.config.task == Task::Inpainting)?;
    let palette = ck.palette.clone().unwrap_or_else(|| test.palette.clone());
    let eval = evaluate_detailed(&generator, &ck.config, &palette, &test, &args.eval.options(args.sequential))?;
    if let Some(path) = &args.out {
        write_json(path, &serde_json::to_value(&eval.report)?)?;
    }
    if let Some(path) = &args.samples {
        let lines: Vec<String> = eval
            .samples
            .iter()
            .map(serde_json::to_string)
            .collect::<Result<_, _>>()?;
        fs::write(path, lines.join("\n") + "\n")?;
    }
    println!("{}", serde_json::to_string_pretty(&eval.report)?);
    Ok(())
}

fn edit(args: EditArgs) -> Result<()> {
    let ck = Checkpoint::load(&args.checkpoint)?;
    let model = Model::from_checkpoint(&ck)?;
    let labels = LabelMap::load_png(&args.label_map)?;
    let [r1, c1, r2, c2] = args.bbox;
    let corners = BoxCorners::checked(r1, c1, r2, c2, labels.height(), labels.width())?;
    let out = edit_map(&model.generator, &model.palette, &labels, &EditBox::new(corners, args.target))?;
    fs::create_dir_all(&args.out)?;
    out.manipulated_color.save_png(&args.out.join("color.png"))?;
    out.manipulated_labels.save_png(&args.out.join("labels.png"))?;
    Ok(())
}

fn inpaint(args: InpaintArgs) -> Result<()> {
    let variant = match args.variant {
        InpaintVariant::Gl => Variant::Gl,
        InpaintVariant::GlAMex => Variant::AMex,
    };
    let cfg = build_config(TrainConfig::inpainting(), args.config.as_deref(), Some(variant), &args.overrides)?;
    if cfg.task != Task::Inpainting {
        bail!("inpaint needs task \"inpainting\"");
    }
    let (train, test) = train_and_test(args.data.as_deref(), true)?;
    let test = test.context("inpaint needs a test split")?;
    let out = RunDir::new(&args.out);
    let state = run_training(&train, TrainState::new(cfg, None)?, &out, Some(&test))?;
    let eval = evaluate_detailed(
        &state.models.generator,
        &state.config,
        &test.palette,
        &test,
        &args.eval.options(!state.config.parallel),
    )?;
    write_json(&args.out.join("report.json"), &serde_json::to_value(&eval.report)?)?;
    println!("{}", serde_json::to_string_pretty(&eval.report)?);
    Ok(())
}

fn synth_data(args: SynthArgs) -> Result<()> {
    if args.height < 8 || args.width < 8 || args.train == 0 || args.test == 0 {
        bail!("synthetic data needs at least one 8x8 map per split");
    }
    synthetic_dataset(args.train, args.height, args.width, args.seed, args.images).save(&args.out, Split::Train)?;
    synthetic_dataset(args.test, args.height, args.width, args.seed + 1, args.images).save(&args.out, Split::Test)?;
    Ok(())
}

fn sweep(args: QSweepArgs) -> Result<()> {
    let cfg = build_config(
        TrainConfig::default(),
        args.config.as_deref(),
        args.variant.map(Variant::from),
        &args.overrides,
    )?;
    let (train, test) = train_and_test(args.data.as_deref(), false)?;
    let test = test.context("q-sweep needs a test split")?;
    let rows = q_sweep(&train, &test, &cfg, &args.qs, &args.eval.options(!cfg.parallel))?;
    let csv = q_sweep_csv(&rows);
    if let Some(path) = &args.out {
        fs::write(path, &csv)?;
    }
    print!("{csv}");
    Ok(())
}

fn serve(args: ServeArgs) -> Result<()> {
    let model = args
        .checkpoint
        .as_deref()
        .map(|p| Checkpoint::load(p).and_then(|ck| Model::from_checkpoint(&ck)))
        .transpose()?;
    let dataset = args.dataset.as_deref().map(|root| load_split(root, Split::Test)).transpose()?;
    let translator = match &args.translate_checkpoint {
        Some(p) => {
            let t: Arc<dyn Translator> = Arc::new(GeneratorTranslator {
                generator: Model::from_checkpoint(&Checkpoint::load(p)?)?.generator,
            });
            Some(t)
        }
        None => None,
    };
    let state = Arc::new(AppState::new(model, dataset, translator));
    let addr = SocketAddr::new(args.host, args.port);
    let rt = tokio::runtime::Runtime::new()?;
    eprintln!("listening on http://{addr}");
    rt.block_on(mexgan_service::serve(state, args.static_dir, addr))?;
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train(a) => train(a),
        Command::Evaluate(a) => evaluate(a),
        Command::Edit(a) => edit(a),
        Command::Inpaint(a) => inpaint(a),
        Command::SynthData(a) => synth_data(a),
        Command::QSweep(a) => sweep(a),
        Command::Serve(a) => serve(a),
    }
}

fn main() -> ExitCode {
    // clap exits with 2 on usage errors.
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let non_finite = e
                .chain()
                .any(|c| matches!(c.downcast_ref::<mexgan::Error>(), Some(mexgan::Error::NonFinite { .. })));
            ExitCode::from(if non_finite { 3 } else { 2 })
        }
    }
}
