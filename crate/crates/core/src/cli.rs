//! Command-line interface.
//!
//! Exit codes: 0 success, 1 usage error, 2 validation or format error,
//! 3 numeric failure (NaN, failed gradient check, checksum mismatch).

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::codec::{self, WeightState};
use crate::cost::{compare, model_cost, CostTable};
use crate::error::{Error, Result};
use crate::gradcheck::layer_grad_check;
use crate::network::{self, convert_with, to_standard, ArchDescriptor, ConvertOptions, LayerSpec, Model};
use crate::train::{
    self, ablate_families, evaluate, sweep_hyperparams, Algorithm, Dataset, DatasetSpec, OptimConfig, Schedule,
    SweepAxis, SweepValue, Task, TrainOptions,
};
use crate::transforms::{sample_hyperparams, Bounds, ChannelParams, HyperBounds, TransformFamily};

#[derive(Debug, Parser)]
#[command(name = "sinefm", version, about = "Seed-filter CNN layers: training, cost accounting and compact packs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train a network and write it as a SeedPack.
    Train(TrainArgs),
    /// Evaluate a SeedPack on a dataset.
    Eval(EvalArgs),
    /// Print the parameter and FLOP report of an architecture.
    Flops(FlopsArgs),
    /// Write a SeedPack from a JSON weight state (or a freshly initialised architecture).
    Pack(PackArgs),
    /// Read a SeedPack back into a JSON weight state.
    Unpack(UnpackArgs),
    /// Finite-difference check of a SineFM layer's gradients.
    Gradcheck(GradcheckArgs),
    /// Train one converted network per transform family and trial.
    Ablate(AblateArgs),
    /// Train converted networks across values of one hyperparameter.
    Sweep(SweepArgs),
    /// Print the transform hyperparameters drawn from a seed.
    SampleHparams(SampleArgs),
}

#[derive(Debug, Clone, Args)]
struct DataArgs {
    /// Dataset: synth-class, synth-seg, or a directory of images.
    #[arg(long, default_value = "synth-class")]
    data: String,
    /// Training items (synthetic data).
    #[arg(long)]
    train_count: Option<usize>,
    /// Test items (synthetic data), or held-out images for a directory.
    #[arg(long)]
    test_count: Option<usize>,
    /// Gaussian noise standard deviation (synthetic data).
    #[arg(long)]
    noise: Option<f64>,
}

#[derive(Debug, Clone, Args)]
struct ConvertArgs {
    /// Seed channels per converted layer.
    #[arg(long = "c-s", default_value_t = 16)]
    c_s: usize,
    /// Transforms per seed channel.
    #[arg(long, default_value_t = 5)]
    fanout: usize,
    /// Transform family.
    #[arg(long, default_value = "sinusoidal")]
    family: String,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum OptimName {
    Adamw,
    SgdMomentum,
}

#[derive(Debug, Clone, Args)]
struct OptimArgs {
    #[arg(long, default_value_t = 20)]
    epochs: usize,
    #[arg(long, default_value_t = 32)]
    batch: usize,
    /// Initial learning rate (annealed to zero on a cosine schedule).
    #[arg(long, default_value_t = 6e-4)]
    lr: f64,
    #[arg(long, value_enum, default_value = "adamw")]
    optim: OptimName,
    #[arg(long, default_value_t = 1e-4)]
    weight_decay: f64,
    /// Keep the learning rate constant.
    #[arg(long)]
    constant_lr: bool,
    /// Disable random flips of training items.
    #[arg(long)]
    no_augment: bool,
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// Built-in architecture (tiny-vgg, tiny-resnet, tiny-unet, resnet50) or descriptor file.
    #[arg(long)]
    arch: String,
    /// Output SeedPack.
    #[arg(long)]
    out: PathBuf,
    /// Convert standard convolutions to SineFM layers before training.
    #[arg(long)]
    sinefm: bool,
    #[command(flatten)]
    convert: ConvertArgs,
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    optim: OptimArgs,
    /// Per-epoch history CSV.
    #[arg(long)]
    history: Option<PathBuf>,
    /// Threads for the final evaluation.
    #[arg(long, default_value_t = 1)]
    threads: usize,
    /// Master seed for initialisation, transforms, data and shuffling.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Format {
    Text,
    Csv,
    Json,
}

#[derive(Debug, Args)]
struct EvalArgs {
    /// SeedPack to evaluate.
    #[arg(long)]
    model: PathBuf,
    #[command(flatten)]
    data: DataArgs,
    /// Evaluate the training split instead of the test split.
    #[arg(long)]
    train_split: bool,
    #[arg(long, default_value_t = 1)]
    threads: usize,
    #[arg(long, value_enum, default_value = "text")]
    format: Format,
    /// Seed for dataset generation.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Debug, Args)]
struct FlopsArgs {
    /// Built-in architecture or descriptor file.
    #[arg(long)]
    arch: String,
    /// Input height and width (defaults to the descriptor's).
    #[arg(long, num_args = 2, value_names = ["H", "W"])]
    hw: Option<Vec<usize>>,
    /// Also report the standard-convolution network and the reduction ratios.
    /// A purely standard architecture is converted first.
    #[arg(long)]
    compare_standard: bool,
    #[command(flatten)]
    convert: ConvertArgs,
    #[arg(long, value_enum, default_value = "csv")]
    format: Format,
    /// Seed for converted layers' transforms.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Debug, Args)]
struct PackArgs {
    /// JSON weight state to pack.
    #[arg(long, conflicts_with = "arch")]
    state: Option<PathBuf>,
    /// Pack a freshly initialised architecture instead.
    #[arg(long)]
    arch: Option<String>,
    /// Output SeedPack.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Debug, Args)]
struct UnpackArgs {
    /// SeedPack to read.
    #[arg(long)]
    input: PathBuf,
    /// Output JSON weight state (omit to only verify).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Print the section table with a hex dump.
    #[arg(long)]
    hex_dump: bool,
    /// Print the size breakdown as JSON.
    #[arg(long)]
    size_report: bool,
}

#[derive(Debug, Args)]
struct GradcheckArgs {
    /// Transform family, or "all".
    #[arg(long, default_value = "all")]
    family: String,
    /// Central-difference step.
    #[arg(long, default_value_t = 1e-5)]
    eps: f64,
    /// Largest acceptable relative error.
    #[arg(long, default_value_t = 1e-4)]
    tolerance: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Debug, Args)]
struct AblateArgs {
    /// Built-in architecture or descriptor file.
    #[arg(long, default_value = "tiny-vgg")]
    arch: String,
    /// Comma-separated families, or "all".
    #[arg(long, default_value = "all")]
    families: String,
    #[arg(long, default_value_t = 3)]
    trials: usize,
    #[command(flatten)]
    convert: ConvertArgs,
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    optim: OptimArgs,
    /// Write the per-trial CSV here instead of standard output.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Print the per-family summary (mean, std, rank) after the table.
    #[arg(long)]
    summary: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Debug, Args)]
struct SweepArgs {
    /// Built-in architecture or descriptor file.
    #[arg(long, default_value = "tiny-vgg")]
    arch: String,
    /// omega_bounds, psi_bounds, fanout or c_s.
    #[arg(long)]
    axis: String,
    /// Comma-separated values: integers, or lo:hi ranges for bound axes.
    #[arg(long, value_delimiter = ',', required = true)]
    values: Vec<String>,
    #[command(flatten)]
    convert: ConvertArgs,
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    optim: OptimArgs,
    /// Write the sweep CSV here instead of standard output.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Debug, Args)]
struct SampleArgs {
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    family: String,
    #[arg(long)]
    count: usize,
    /// Sampling intervals (lo:hi) for the family's hyperparameters, in draw order.
    #[arg(long, num_args = 1..)]
    bounds: Vec<String>,
}

/// Process exit code for an error.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Argument(_) => 1,
        Error::Numeric(_) | Error::Corruption { .. } => 3,
        _ => 2,
    }
}

/// Runs the CLI on `argv` (including the program name), writing data to
/// `out` and diagnostics to `err`. Returns the exit code.
pub fn run_with<I, S>(argv: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let rendered = e.render().to_string();
            return if e.use_stderr() {
                let _ = write!(err, "{rendered}");
                1
            } else {
                let _ = write!(out, "{rendered}");
                0
            };
        }
    };
    match dispatch(cli.command, out, err) {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            exit_code(&e)
        }
    }
}

pub fn run() -> i32 {
    let stdout = std::io::stdout();
    let stderr = std::io::stderr();
    run_with(std::env::args_os(), &mut stdout.lock(), &mut stderr.lock())
}

fn dispatch(command: Command, out: &mut dyn Write, err: &mut dyn Write) -> Result<i32> {
    match command {
        Command::Train(a) => cmd_train(a, out, err),
        Command::Eval(a) => cmd_eval(a, out),
        Command::Flops(a) => cmd_flops(a, out),
        Command::Pack(a) => cmd_pack(a, out),
        Command::Unpack(a) => cmd_unpack(a, out),
        Command::Gradcheck(a) => cmd_gradcheck(a, out),
        Command::Ablate(a) => cmd_ablate(a, out, err),
        Command::Sweep(a) => cmd_sweep(a, out, err),
        Command::SampleHparams(a) => cmd_sample(a, out),
    }
}

fn io(e: std::io::Error) -> Error {
    Error::Io(e)
}

fn parse_family(s: &str) -> Result<TransformFamily> {
    s.parse()
}

/// Resolves a built-in name, shaped for `task` and `hw` when given, or
/// reads a descriptor file.
fn resolve_arch(arch: &str, task: Option<(Task, (usize, usize))>) -> Result<ArchDescriptor> {
    if let Some(desc) = network::builtin(arch) {
        return Ok(match (arch, task) {
            ("tiny-vgg", Some((t, (h, _)))) => network::tiny_vgg(t.classes(), h),
            ("tiny-resnet", Some((t, (h, _)))) => network::tiny_resnet(t.classes(), h),
            ("tiny-unet", Some((t, (h, _)))) => network::tiny_unet(t.classes(), h),
            _ => desc,
        });
    }
    let path = Path::new(arch);
    if !path.exists() {
        return Err(Error::arg(format!(
            "'{arch}' is neither a built-in architecture ({}) nor a file",
            network::BUILTIN_NAMES.join(", ")
        )));
    }
    let desc = ArchDescriptor::from_text(&std::fs::read_to_string(path).map_err(io)?)?;
    desc.validate()?;
    Ok(desc)
}

fn convert_options(c: &ConvertArgs, seed: u64) -> Result<ConvertOptions> {
    if c.c_s == 0 || c.fanout == 0 {
        return Err(Error::arg("--c-s and --fanout must be positive"));
    }
    Ok(ConvertOptions::new(c.c_s, c.fanout, parse_family(&c.family)?, seed))
}

fn dataset_spec(d: &DataArgs, seed: u64) -> DatasetSpec {
    let mut spec = match d.data.as_str() {
        "synth-class" => DatasetSpec::synth_class(800, 200, seed),
        "synth-seg" => DatasetSpec::synth_seg(160, 40, seed),
        dir => DatasetSpec::image_folder(dir, 0, seed),
    };
    if let Some(n) = d.train_count {
        spec.train_count = n;
    }
    if let Some(n) = d.test_count {
        spec.test_count = n;
    }
    if let Some(v) = d.noise {
        spec.noise = v;
    }
    spec
}

fn load_data(d: &DataArgs, seed: u64) -> Result<Dataset<f32>> {
    if !matches!(d.data.as_str(), "synth-class" | "synth-seg") && !Path::new(&d.data).is_dir() {
        return Err(Error::arg(format!("unknown dataset '{}' (synth-class, synth-seg or a directory)", d.data)));
    }
    Dataset::generate(&dataset_spec(d, seed))
}

fn optim_config(o: &OptimArgs) -> OptimConfig {
    OptimConfig {
        algorithm: match o.optim {
            OptimName::Adamw => Algorithm::AdamW,
            OptimName::SgdMomentum => Algorithm::SgdMomentum,
        },
        lr: o.lr,
        schedule: if o.constant_lr { Schedule::Constant } else { Schedule::Cosine },
        epochs: o.epochs,
        batch: o.batch,
        weight_decay: o.weight_decay,
    }
}

fn data_hw(data: &Dataset<f32>) -> (usize, usize) {
    let s = data.train.images.shape();
    (s.h(), s.w())
}

fn cmd_train(a: TrainArgs, out: &mut dyn Write, err: &mut dyn Write) -> Result<i32> {
    let data = load_data(&a.data, a.seed)?;
    let mut desc = resolve_arch(&a.arch, Some((data.task, data_hw(&data))))?;
    if a.sinefm {
        desc = convert_with(&desc, &convert_options(&a.convert, a.seed)?);
    }
    let optim = optim_config(&a.optim);
    let mut model = Model::<f32>::build(&desc, a.seed)?;
    let opts = TrainOptions {
        seed: a.seed,
        augment: !a.optim.no_augment,
    };
    let history = train::train_with(&mut model, &data, &optim, &opts, |r| {
        let _ = writeln!(err, "epoch {:>3}  loss {:.4}  train {:.4}  lr {:.2e}", r.epoch, r.loss, r.metric, r.lr);
    })?;
    if let Some(path) = &a.history {
        std::fs::write(path, history.to_csv()).map_err(io)?;
    }
    let train_m = evaluate(&model, &data.train, data.task, a.threads)?;
    let test_m = evaluate(&model, &data.test, data.task, a.threads)?;
    let bytes = codec::pack(&model);
    std::fs::write(&a.out, &bytes).map_err(io)?;
    let label = match data.task {
        Task::Classification { .. } => "accuracy",
        Task::Segmentation { .. } => "miou",
    };
    writeln!(out, "params {}", model.learnable_count()).map_err(io)?;
    writeln!(out, "train_{label} {:.6}", train::headline(&train_m, data.task)).map_err(io)?;
    writeln!(out, "test_{label} {:.6}", train::headline(&test_m, data.task)).map_err(io)?;
    writeln!(out, "pack {} ({} bytes)", a.out.display(), bytes.len()).map_err(io)?;
    Ok(0)
}

fn read_pack(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(io)
}

fn cmd_eval(a: EvalArgs, out: &mut dyn Write) -> Result<i32> {
    let model = codec::unpack(&read_pack(&a.model)?)?;
    let data = load_data(&a.data, a.seed)?;
    let split = if a.train_split { &data.train } else { &data.test };
    let m = evaluate(&model, split, data.task, a.threads)?;
    match a.format {
        Format::Json => writeln!(out, "{}", serde_json::to_string_pretty(&m).expect("metrics serialise")),
        Format::Csv => writeln!(out, "accuracy,miou,mean_f1\n{:.6},{:.6},{:.6}", m.accuracy, m.miou, m.mean_f1),
        Format::Text => writeln!(
            out,
            "accuracy {:.6}\nmiou     {:.6}\nmean_f1  {:.6}\nitems    {}",
            m.accuracy,
            m.miou,
            m.mean_f1,
            split.len()
        ),
    }
    .map_err(io)?;
    Ok(0)
}

fn cmd_flops(a: FlopsArgs, out: &mut dyn Write) -> Result<i32> {
    let desc = resolve_arch(&a.arch, None)?;
    let hw = match a.hw.as_deref() {
        Some([h, w]) => Some((*h, *w)),
        Some(_) => return Err(Error::arg("--hw takes H and W")),
        None => None,
    };
    let table = CostTable::V1;
    let has_sinefm = desc.layers.iter().any(|l| matches!(l, LayerSpec::SineFM(_)));
    let (candidate, reference) = if a.compare_standard {
        if has_sinefm {
            (desc.clone(), Some(to_standard(&desc)))
        } else {
            (convert_with(&desc, &convert_options(&a.convert, a.seed)?), Some(desc.clone()))
        }
    } else {
        (desc, None)
    };
    let report = model_cost(&candidate, hw, &table)?;
    let Some(reference) = reference else {
        let text = match a.format {
            Format::Text => report.to_text(),
            Format::Csv => report.to_csv(),
            Format::Json => report.to_json(),
        };
        write!(out, "{text}").map_err(io)?;
        return Ok(0);
    };
    let base = model_cost(&reference, hw, &table)?;
    let ratio = compare(&report, &base)?;
    let sizes = codec::size_report(&candidate);
    match a.format {
        Format::Csv => {
            write!(out, "{}", report.to_csv()).map_err(io)?;
            writeln!(out, "standard,,,,,{},{}", base.total_params, base.total_flops).map_err(io)?;
            writeln!(out, "ratio,,,,,{:.4},{:.4}", ratio.param_ratio, ratio.flop_ratio).map_err(io)?;
        }
        Format::Text => {
            write!(out, "{}", report.to_text()).map_err(io)?;
            writeln!(out, "standard params {}  flops {}", base.total_params, base.total_flops).map_err(io)?;
            writeln!(out, "param ratio {:.4}  flop ratio {:.4}", ratio.param_ratio, ratio.flop_ratio).map_err(io)?;
            writeln!(
                out,
                "packed bytes {} vs {} standard ({:.4}x)",
                sizes.total_bytes, sizes.standard_bytes, sizes.ratio
            )
            .map_err(io)?;
        }
        Format::Json => {
            let v = serde_json::json!({
                "candidate": report,
                "standard": base,
                "ratio": ratio,
                "packed": sizes,
            });
            writeln!(out, "{}", serde_json::to_string_pretty(&v).expect("report serialises")).map_err(io)?;
        }
    }
    Ok(0)
}

fn cmd_pack(a: PackArgs, out: &mut dyn Write) -> Result<i32> {
    let model = match (&a.state, &a.arch) {
        (Some(path), None) => WeightState::from_json(&std::fs::read_to_string(path).map_err(io)?)?.to_model()?,
        (None, Some(arch)) => Model::<f32>::build(&resolve_arch(arch, None)?, a.seed)?,
        _ => return Err(Error::arg("pass exactly one of --state or --arch")),
    };
    let bytes = codec::pack(&model);
    std::fs::write(&a.out, &bytes).map_err(io)?;
    writeln!(out, "wrote {} ({} bytes)", a.out.display(), bytes.len()).map_err(io)?;
    Ok(0)
}

fn cmd_unpack(a: UnpackArgs, out: &mut dyn Write) -> Result<i32> {
    let bytes = read_pack(&a.input)?;
    let model = codec::unpack(&bytes)?;
    if a.hex_dump {
        write!(out, "{}", codec::hex_dump(&bytes, 64)?).map_err(io)?;
    }
    if a.size_report {
        let r = codec::size_report(model.descriptor());
        writeln!(out, "{}", serde_json::to_string_pretty(&r).expect("report serialises")).map_err(io)?;
    }
    if let Some(path) = &a.out {
        std::fs::write(path, WeightState::from_model(&model).to_json()).map_err(io)?;
        writeln!(out, "wrote {}", path.display()).map_err(io)?;
    } else if !a.hex_dump && !a.size_report {
        writeln!(out, "ok: {} layers, {} parameters", model.layers().len(), model.learnable_count()).map_err(io)?;
    }
    Ok(0)
}

fn cmd_gradcheck(a: GradcheckArgs, out: &mut dyn Write) -> Result<i32> {
    let families = if a.family == "all" {
        TransformFamily::ALL.to_vec()
    } else {
        vec![parse_family(&a.family)?]
    };
    let mut worst: f64 = 0.0;
    writeln!(out, "family,max_rel_error,checked,skipped").map_err(io)?;
    for family in families {
        let r = layer_grad_check(family, a.seed, a.eps)?;
        worst = worst.max(r.max_rel_error);
        writeln!(out, "{family},{:.3e},{},{}", r.max_rel_error, r.checked, r.skipped).map_err(io)?;
    }
    if worst < a.tolerance {
        Ok(0)
    } else {
        Err(Error::Numeric(format!("max relative error {worst:.3e} exceeds {:.1e}", a.tolerance)))
    }
}

fn write_or_print(path: &Option<PathBuf>, text: &str, out: &mut dyn Write) -> Result<()> {
    match path {
        Some(p) => std::fs::write(p, text).map_err(io),
        None => write!(out, "{text}").map_err(io),
    }
}

fn cmd_ablate(a: AblateArgs, out: &mut dyn Write, err: &mut dyn Write) -> Result<i32> {
    let families: Vec<TransformFamily> = if a.families == "all" {
        TransformFamily::ALL.to_vec()
    } else {
        a.families.split(',').map(|f| parse_family(f.trim())).collect::<Result<_>>()?
    };
    let data = load_data(&a.data, a.seed)?;
    let desc = resolve_arch(&a.arch, Some((data.task, data_hw(&data))))?;
    let table = ablate_families(
        &desc,
        &families,
        &data,
        &optim_config(&a.optim),
        a.trials,
        &convert_options(&a.convert, a.seed)?,
    )?;
    write_or_print(&a.out, &table.to_csv(), out)?;
    if a.summary {
        write!(out, "{}", table.summary_csv()).map_err(io)?;
    }
    let _ = writeln!(err, "{} runs", table.rows.len());
    Ok(0)
}

fn cmd_sweep(a: SweepArgs, out: &mut dyn Write, err: &mut dyn Write) -> Result<i32> {
    let axis: SweepAxis = a.axis.parse()?;
    let values = a.values.iter().map(|v| v.parse()).collect::<Result<Vec<SweepValue>>>()?;
    let data = load_data(&a.data, a.seed)?;
    let desc = resolve_arch(&a.arch, Some((data.task, data_hw(&data))))?;
    let curve = sweep_hyperparams(
        &desc,
        axis,
        &values,
        &data,
        &optim_config(&a.optim),
        &convert_options(&a.convert, a.seed)?,
    )?;
    write_or_print(&a.out, &curve.to_csv(), out)?;
    let _ = writeln!(err, "{} points", curve.points.len());
    Ok(0)
}

fn cmd_sample(a: SampleArgs, out: &mut dyn Write) -> Result<i32> {
    let family = parse_family(&a.family)?;
    let bounds = if a.bounds.is_empty() {
        HyperBounds::default()
    } else {
        let pairs = a.bounds.iter().map(|b| b.parse::<Bounds>()).collect::<Result<Vec<_>>>()?;
        HyperBounds::with_family_bounds(family, &pairs)?
    };
    let spec = sample_hyperparams(a.seed, family, a.count, &bounds)?;
    let params = spec.params();
    let header = match params.first() {
        Some(ChannelParams::Monomial { .. }) => "channel,beta",
        Some(ChannelParams::Polynomial { .. }) => "channel,degree",
        Some(ChannelParams::Rbf { .. }) => "channel,epsilon",
        _ => "channel,omega,psi",
    };
    writeln!(out, "{header}").map_err(io)?;
    for (i, p) in params.iter().enumerate() {
        match p {
            ChannelParams::Monomial { beta } => writeln!(out, "{i},{beta:?}"),
            ChannelParams::Polynomial { degree } => writeln!(out, "{i},{degree}"),
            ChannelParams::Rbf { epsilon } => writeln!(out, "{i},{epsilon:?}"),
            ChannelParams::Sinusoidal { omega, psi } => writeln!(out, "{i},{omega:?},{psi:?}"),
        }
        .map_err(io)?;
    }
    Ok(0)
}
