//! `ndnet`: analyze, build, train, evaluate and benchmark the narrow deep
//! segmentation networks.
//!
//! Exit codes: 0 on success, 1 for validation errors (bad flags, missing
//! files, invalid presets, malformed sizes), 2 for runtime failures.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use ndnet_core::bench::{benchmark_fps, SystemClock};
use ndnet_core::data::{
    generate_synthetic_dataset, load_checkpoint, load_dataset_dir, save_checkpoint,
    DatasetManifest, RemapTable,
};
use ndnet_core::ops::argmax_channels;
use ndnet_core::{
    build_fcn32, count_exact, design_rule_check, miou, train, update_confusion, ConfusionMatrix,
    Error, LayerGraph, NetworkSpec, SgdState, TrainConfig,
};

#[derive(Parser)]
#[command(
    name = "ndnet",
    about = "Narrow deep segmentation backbones: cost analysis, training, evaluation, benchmarking",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Parameter and Multi-adds report for an architecture, with closed-form
    /// cross-checks and design-rule evaluation.
    Analyze(AnalyzeArgs),
    /// Resolve an architecture to a spec file (and optionally an initialized
    /// checkpoint).
    Build(BuildArgs),
    /// Train on a dataset directory and write a checkpoint plus a loss CSV.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset directory: per-class IoU and mIoU.
    Eval(EvalArgs),
    /// Measure eval-mode forward throughput.
    Bench(BenchArgs),
    /// Generate a synthetic segmentation dataset.
    Synth(SynthArgs),
}

#[derive(Args)]
struct ArchSelect {
    /// Preset name (ndnet29, ndnet45, ndnet61, ndnet29-wide) or a spec JSON file.
    #[arg(long)]
    arch: Option<String>,
    /// Override the expansion factor (e.g. 2 for the slim variants).
    #[arg(long)]
    expansion: Option<usize>,
    /// Override the class count.
    #[arg(long)]
    classes: Option<usize>,
}

impl ArchSelect {
    fn resolve(&self) -> Result<NetworkSpec, Error> {
        let name = self
            .arch
            .as_deref()
            .ok_or_else(|| Error::Spec("--arch is required".into()))?;
        let mut spec = match NetworkSpec::preset(name) {
            Some(spec) => spec,
            None => {
                let path = Path::new(name);
                if !path.is_file() {
                    return Err(Error::Spec(format!(
                        "'{name}' is neither a preset ({}) nor a readable spec file",
                        NetworkSpec::preset_names().join(", ")
                    )));
                }
                let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
                serde_json::from_str(&text)?
            }
        };
        if let Some(e) = self.expansion {
            spec.expansion = e;
        }
        if let Some(k) = self.classes {
            spec.num_classes = k;
        }
        spec.validate()?;
        Ok(spec)
    }
}

#[derive(Args)]
struct AnalyzeArgs {
    #[command(flatten)]
    arch: ArchSelect,
    /// Analyze the architecture stored in a checkpoint instead.
    #[arg(long, conflicts_with = "arch")]
    ckpt: Option<PathBuf>,
    /// Probe input size as HxW.
    #[arg(long, default_value = "1024x2048")]
    input: String,
    /// Measured FPS to evaluate the throughput design rule against.
    #[arg(long)]
    fps: Option<f64>,
    /// Write per-layer rows to a CSV file.
    #[arg(long)]
    csv: Option<PathBuf>,
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct BuildArgs {
    #[command(flatten)]
    arch: ArchSelect,
    /// Where to write the architecture spec JSON.
    #[arg(long)]
    out: PathBuf,
    /// Also write an initialized checkpoint here.
    #[arg(long)]
    ckpt: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    arch: ArchSelect,
    /// Dataset directory (images/ + labels/ trees).
    #[arg(long)]
    data: PathBuf,
    /// Optional raw-id,train-id remap CSV.
    #[arg(long)]
    remap: Option<PathBuf>,
    #[arg(long)]
    steps: u64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Checkpoint output path.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 16)]
    batch: usize,
    /// Crop size as HxW.
    #[arg(long, default_value = "1024x1024")]
    crop: String,
    #[arg(long, default_value_t = 0.1)]
    lr: f64,
    /// Augmentation scales (comma-separated).
    #[arg(long, default_value = "0.75,1,1.25,1.5,2", value_delimiter = ',')]
    scales: Vec<f64>,
    /// Loss trace CSV path (defaults to the checkpoint path with .csv).
    #[arg(long)]
    loss_csv: Option<PathBuf>,
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    remap: Option<PathBuf>,
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct BenchArgs {
    #[command(flatten)]
    arch: ArchSelect,
    /// Benchmark the network stored in a checkpoint instead.
    #[arg(long, conflicts_with = "arch")]
    ckpt: Option<PathBuf>,
    /// Input size as HxW.
    #[arg(long, default_value = "1024x2048")]
    input: String,
    #[arg(long, default_value_t = 10)]
    runs: usize,
    #[arg(long, default_value_t = 2)]
    warmup: usize,
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct SynthArgs {
    /// Output dataset directory.
    #[arg(long)]
    out: PathBuf,
    /// Number of samples.
    #[arg(long)]
    n: usize,
    /// Sample size as HxW.
    #[arg(long, default_value = "64x64")]
    size: String,
    #[arg(long, default_value_t = 3)]
    classes: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    json: bool,
}

fn parse_size(text: &str) -> Result<(usize, usize), Error> {
    let (h, w) = text
        .split_once(['x', 'X'])
        .ok_or_else(|| Error::Spec(format!("size '{text}' is not of the form HxW")))?;
    let parse = |s: &str| {
        s.trim()
            .parse::<usize>()
            .map_err(|_| Error::Spec(format!("size '{text}' is not of the form HxW")))
            .and_then(|v| {
                if v == 0 {
                    Err(Error::Spec(format!("size '{text}' has a zero dimension")))
                } else {
                    Ok(v)
                }
            })
    };
    Ok((parse(h)?, parse(w)?))
}

/// Validation errors (exit 1) versus runtime failures (exit 2).
fn exit_code_for(err: &Error) -> u8 {
    match err {
        Error::Spec(_)
        | Error::Shape(_)
        | Error::Dataset(_)
        | Error::Checkpoint(_)
        | Error::Json(_)
        | Error::Image(_) => 1,
        Error::Numeric(_) | Error::Io { .. } => 2,
    }
}

fn echo_config(json: bool, command: &str, fields: &[(&str, String)]) {
    if json {
        return; // the final JSON object embeds the config
    }
    println!("{command} configuration:");
    for (k, v) in fields {
        println!("  {k}: {v}");
    }
    println!();
}

fn config_json(fields: &[(&str, String)]) -> serde_json::Value {
    let mut map = serde_json::Map::new();
    for (k, v) in fields {
        map.insert((*k).to_string(), serde_json::Value::String(v.clone()));
    }
    serde_json::Value::Object(map)
}

fn load_manifest(data: &Path, remap: Option<&PathBuf>) -> Result<DatasetManifest, Error> {
    let remap = match remap {
        Some(path) => Some(RemapTable::from_csv_file(path)?),
        None => None,
    };
    load_dataset_dir(data, remap)
}

fn graph_for_analysis(args: &AnalyzeArgs) -> Result<(LayerGraph<f32>, String), Error> {
    match &args.ckpt {
        Some(path) => {
            let ck = load_checkpoint(path)?;
            Ok((ck.graph, format!("checkpoint {}", path.display())))
        }
        None => {
            let spec = args.arch.resolve()?;
            Ok((build_fcn32::<f32>(&spec)?, format!("{spec:?}")))
        }
    }
}

fn cmd_analyze(args: AnalyzeArgs) -> Result<(), Error> {
    let (h, w) = parse_size(&args.input)?;
    let (graph, source) = graph_for_analysis(&args)?;
    let fields = [
        ("source", source),
        ("input", format!("{h}x{w}")),
        ("fps", args.fps.map_or("none".into(), |f| format!("{f:.2}"))),
    ];
    echo_config(args.json, "analyze", &fields);

    let report = count_exact(&graph, [1, 3, h, w])?;
    let rules = design_rule_check(&graph, args.fps);

    if let Some(csv_path) = &args.csv {
        std::fs::write(csv_path, report.to_csv()).map_err(|e| Error::io(csv_path, e))?;
    }
    if args.json {
        let out = serde_json::json!({
            "config": config_json(&fields),
            "report": report,
            "design_rules": rules,
        });
        println!("{}", serde_json::to_string_pretty(&out)?);
    } else {
        print!("{}", report.render_text());
        println!();
        print!("{}", rules.render_text());
    }
    Ok(())
}

fn cmd_build(args: BuildArgs) -> Result<(), Error> {
    let spec = args.arch.resolve()?;
    let fields = [
        ("spec", format!("{spec:?}")),
        ("out", args.out.display().to_string()),
        (
            "ckpt",
            args.ckpt
                .as_ref()
                .map_or("none".into(), |p| p.display().to_string()),
        ),
        ("seed", args.seed.to_string()),
    ];
    echo_config(args.json, "build", &fields);

    std::fs::write(&args.out, serde_json::to_string_pretty(&spec)?)
        .map_err(|e| Error::io(&args.out, e))?;
    if let Some(ckpt_path) = &args.ckpt {
        let mut graph = build_fcn32::<f32>(&spec)?;
        graph.init_params(args.seed);
        graph.ensure_eval_ready();
        save_checkpoint(&graph, None, 0, ckpt_path)?;
    }
    if args.json {
        let out = serde_json::json!({
            "config": config_json(&fields),
            "spec": spec,
            "nominal_depth": spec.nominal_depth(),
            "max_width": spec.max_width(),
        });
        println!("{}", serde_json::to_string_pretty(&out)?);
    } else {
        println!(
            "wrote {} (nominal depth {}, max width {})",
            args.out.display(),
            spec.nominal_depth(),
            spec.max_width()
        );
    }
    Ok(())
}

fn cmd_train(args: TrainArgs) -> Result<(), Error> {
    let manifest = load_manifest(&args.data, args.remap.as_ref())?;
    let mut spec = args.arch.resolve()?;
    if args.arch.classes.is_none() {
        spec.num_classes = manifest.num_classes;
    }
    let (crop_h, crop_w) = parse_size(&args.crop)?;
    let cfg = TrainConfig {
        base_lr: args.lr,
        total_steps: args.steps,
        batch_size: args.batch,
        crop: (crop_h, crop_w),
        scales: args.scales.clone(),
        ignore_index: manifest.ignore_index,
        seed: args.seed,
        ..TrainConfig::default()
    };
    cfg.validate()?;
    let loss_csv = args
        .loss_csv
        .clone()
        .unwrap_or_else(|| args.out.with_extension("csv"));
    let fields = [
        ("spec", format!("{spec:?}")),
        ("data", format!("{} ({} samples, {} classes)", args.data.display(), manifest.len(), manifest.num_classes)),
        ("steps", cfg.total_steps.to_string()),
        ("batch", cfg.batch_size.to_string()),
        ("crop", format!("{crop_h}x{crop_w}")),
        ("lr", cfg.base_lr.to_string()),
        ("scales", format!("{:?}", cfg.scales)),
        ("seed", cfg.seed.to_string()),
        ("out", args.out.display().to_string()),
        ("loss_csv", loss_csv.display().to_string()),
    ];
    echo_config(args.json, "train", &fields);

    let samples = manifest.load_all()?;
    let mut graph = build_fcn32::<f32>(&spec)?;
    graph.init_params(cfg.seed);

    let mut trace = Vec::new();
    let outcome = train(&mut graph, &samples, &cfg, &mut trace);

    let mut csv = String::from("step,loss\n");
    for (step, loss) in trace.iter().enumerate() {
        csv.push_str(&format!("{step},{loss}\n"));
    }
    std::fs::write(&loss_csv, csv).map_err(|e| Error::io(&loss_csv, e))?;
    outcome?;

    let mut sgd = SgdState::new(&mut graph);
    let _ = &mut sgd; // velocities end the run zeroed; momentum state is not carried across runs
    save_checkpoint(&graph, Some(&sgd), cfg.total_steps, &args.out)?;

    let first = trace.first().copied().unwrap_or(f64::NAN);
    let last = trace.last().copied().unwrap_or(f64::NAN);
    if args.json {
        let out = serde_json::json!({
            "config": config_json(&fields),
            "steps": trace.len(),
            "initial_loss": first,
            "final_loss": last,
            "checkpoint": args.out.display().to_string(),
            "loss_csv": loss_csv.display().to_string(),
        });
        println!("{}", serde_json::to_string_pretty(&out)?);
    } else {
        println!(
            "trained {} steps, loss {first:.4} -> {last:.4}; checkpoint {}",
            trace.len(),
            args.out.display()
        );
    }
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> Result<(), Error> {
    let ck = load_checkpoint(&args.ckpt)?;
    let manifest = load_manifest(&args.data, args.remap.as_ref())?;
    let spec = ck
        .graph
        .network_spec
        .clone()
        .ok_or_else(|| Error::Checkpoint("checkpoint graph carries no network spec".into()))?;
    if spec.num_classes != manifest.num_classes {
        return Err(Error::Dataset(format!(
            "checkpoint predicts {} classes but the dataset declares {}",
            spec.num_classes, manifest.num_classes
        )));
    }
    let fields = [
        ("ckpt", args.ckpt.display().to_string()),
        ("data", format!("{} ({} samples, {} classes)", args.data.display(), manifest.len(), manifest.num_classes)),
    ];
    echo_config(args.json, "eval", &fields);

    let mut cm = ConfusionMatrix::new(manifest.num_classes)?;
    for i in 0..manifest.len() {
        let sample = manifest.load_sample(i)?;
        let logits = ck.graph.forward_eval(&sample.image)?;
        let pred = argmax_channels(&logits);
        update_confusion(&mut cm, &pred, &sample.label, manifest.ignore_index)?;
    }
    let report = miou(&cm)?;
    if args.json {
        let out = serde_json::json!({
            "config": config_json(&fields),
            "per_class_iou": report.per_class,
            "miou": report.mean,
        });
        println!("{}", serde_json::to_string_pretty(&out)?);
    } else {
        print!("{}", report.render_text());
    }
    Ok(())
}

fn cmd_bench(args: BenchArgs) -> Result<(), Error> {
    let (h, w) = parse_size(&args.input)?;
    let (graph, source) = match &args.ckpt {
        Some(path) => (load_checkpoint(path)?.graph, format!("checkpoint {}", path.display())),
        None => {
            let spec = args.arch.resolve()?;
            let mut g = build_fcn32::<f32>(&spec)?;
            g.init_params(0);
            g.ensure_eval_ready();
            (g, format!("{spec:?}"))
        }
    };
    let fields = [
        ("source", source),
        ("input", format!("{h}x{w}")),
        ("runs", args.runs.to_string()),
        ("warmup", args.warmup.to_string()),
    ];
    echo_config(args.json, "bench", &fields);

    let mut clock = SystemClock::new();
    let report = benchmark_fps(&graph, [1, 3, h, w], args.runs, args.warmup, &mut clock)?;
    if args.json {
        let out = serde_json::json!({
            "config": config_json(&fields),
            "report": report,
        });
        println!("{}", serde_json::to_string_pretty(&out)?);
    } else {
        print!("{}", report.render_text());
    }
    Ok(())
}

fn cmd_synth(args: SynthArgs) -> Result<(), Error> {
    let (h, w) = parse_size(&args.size)?;
    let fields = [
        ("out", args.out.display().to_string()),
        ("n", args.n.to_string()),
        ("size", format!("{h}x{w}")),
        ("classes", args.classes.to_string()),
        ("seed", args.seed.to_string()),
    ];
    echo_config(args.json, "synth", &fields);

    let manifest = generate_synthetic_dataset(&args.out, args.n, h, w, args.classes, args.seed)?;
    if args.json {
        let out = serde_json::json!({
            "config": config_json(&fields),
            "samples": manifest.len(),
            "num_classes": manifest.num_classes,
            "root": manifest.root.display().to_string(),
        });
        println!("{}", serde_json::to_string_pretty(&out)?);
    } else {
        println!(
            "wrote {} samples ({} classes) under {}",
            manifest.len(),
            manifest.num_classes,
            manifest.root.display()
        );
    }
    Ok(())
}

fn main() -> ExitCode {
    ndnet_core::configure_threads_from_env();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(err) => {
            // help/version requests are not errors
            use clap::error::ErrorKind;
            let kind = err.kind();
            let _ = err.print();
            return if matches!(kind, ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(1)
            };
        }
    };
    let result = match cli.command {
        Command::Analyze(args) => cmd_analyze(args),
        Command::Build(args) => cmd_build(args),
        Command::Train(args) => cmd_train(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Bench(args) => cmd_bench(args),
        Command::Synth(args) => cmd_synth(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code_for(&err))
        }
    }
}
