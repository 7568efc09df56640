use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::str::FromStr;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use serde::Serialize;

use tca::condensation::CondensationPlan;
use tca::flops::{flops_estimate, planned_loads, vanilla_flops};
use tca::synthetic::{StreamSpec, SyntheticTask};
use tca::{
    inspect, Dataset, Direction, EncoderConfig, Mode, Model, Pipeline, RunConfig, RunSummary, Strategy, TensorArchive,
};

#[derive(Parser)]
#[command(
    name = "tca",
    version,
    about = "Test-time token condensation for CLIP zero-shot classification"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Adapt over a dataset stream and write per-sample and summary reports.
    Run(RunArgs),
    /// Print the analytic compute estimate for a geometry and keep rate.
    Flops(FlopsArgs),
    /// Sweep comma-separated hyperparameter lists; one CSV row per cell.
    Ablate(AblateArgs),
    /// List an archive's entries and check its layout.
    Inspect(InspectArgs),
    /// Write a seeded toy model, class embeddings and synthetic stream.
    Toy(ToyArgs),
}

#[derive(Args, Clone)]
struct Inputs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    text: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Attention heads; defaults to the archive's `visual/heads` entry.
    #[arg(long)]
    heads: Option<usize>,
    /// Compute in f64 instead of f32.
    #[arg(long)]
    f64: bool,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    inputs: Inputs,
    #[arg(long, default_value_t = 0.9)]
    rate: f64,
    #[arg(long, default_value_t = 2.0)]
    ratio: f64,
    #[arg(long, default_value_t = 2)]
    k: usize,
    #[arg(long, default_value_t = 2.0)]
    lambda: f64,
    #[arg(long, default_value_t = 0.05)]
    beta: f64,
    #[arg(long, default_value = "shallow")]
    direction: Direction,
    #[arg(long, default_value_t = 3)]
    reservoir: usize,
    #[arg(long, default_value = "diversity")]
    strategy: Strategy,
    /// Comma-separated 1-indexed blocks; defaults to the model archive's
    /// list, else 4,7,10.
    #[arg(long)]
    blocks: Option<String>,
    #[arg(long, default_value_t = 0.01)]
    tau: f64,
    #[arg(long, default_value = "tca")]
    mode: Mode,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Report prefix: writes `<out>.jsonl` and `<out>.summary.json`.
    #[arg(long, default_value = "report")]
    out: PathBuf,
    /// Warm-start the reservoir from a snapshot archive.
    #[arg(long)]
    reservoir_in: Option<PathBuf>,
    /// Save the final reservoir as an archive.
    #[arg(long)]
    reservoir_out: Option<PathBuf>,
    /// Record wall-clock latency per sample (reports are then not reproducible).
    #[arg(long)]
    timing: bool,
}

#[derive(Args)]
struct FlopsArgs {
    #[arg(long, default_value_t = 224)]
    image_side: usize,
    #[arg(long, default_value_t = 16)]
    patch_side: usize,
    #[arg(long, default_value_t = 12)]
    layers: usize,
    #[arg(long, default_value_t = 12)]
    heads: usize,
    #[arg(long, default_value_t = 768)]
    width: usize,
    #[arg(long, default_value_t = 4.0)]
    mlp_ratio: f64,
    #[arg(long, default_value_t = 512)]
    embed_dim: usize,
    #[arg(long, default_value = "4,7,10")]
    blocks: String,
    #[arg(long, default_value_t = 0.9)]
    rate: f64,
    #[arg(long, default_value_t = 2.0)]
    ratio: f64,
    #[arg(long, default_value_t = 2)]
    k: usize,
}

#[derive(Args)]
struct AblateArgs {
    #[command(flatten)]
    inputs: Inputs,
    #[arg(long, default_value = "0.9")]
    rate: String,
    #[arg(long, default_value = "2.0")]
    ratio: String,
    #[arg(long, default_value = "2")]
    k: String,
    #[arg(long, default_value = "2.0")]
    lambda: String,
    #[arg(long, default_value = "0.05")]
    beta: String,
    #[arg(long, default_value = "shallow")]
    direction: String,
    #[arg(long, default_value = "3")]
    reservoir: String,
    #[arg(long, default_value = "diversity")]
    strategy: String,
    #[arg(long, default_value = "tca")]
    mode: String,
    #[arg(long)]
    blocks: Option<String>,
    #[arg(long, default_value_t = 0.01)]
    tau: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// CSV destination; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct InspectArgs {
    path: PathBuf,
}

#[derive(Args)]
struct ToyArgs {
    #[arg(long, default_value = "toy.tca")]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 300)]
    samples: usize,
}

fn parse_list<T: FromStr>(flag: &str, raw: &str) -> Result<Vec<T>>
where
    T::Err: std::fmt::Display,
{
    let items: Vec<&str> = raw.split(',').map(str::trim).filter(|s| !s.is_empty()).collect();
    if items.is_empty() {
        bail!("--{flag}: empty list");
    }
    items
        .into_iter()
        .map(|s| s.parse::<T>().map_err(|e| anyhow::anyhow!("--{flag}: {s:?}: {e}")))
        .collect()
}

fn read_archive(path: &Path) -> Result<TensorArchive> {
    TensorArchive::read(path).with_context(|| format!("reading {}", path.display()))
}

/// Archives behind `--model`, `--text` and `--data`, read once each.
struct Loaded {
    model: TensorArchive,
    text: Option<TensorArchive>,
    data: Option<TensorArchive>,
}

impl Loaded {
    fn read(inputs: &Inputs) -> Result<Self> {
        let model = read_archive(&inputs.model)?;
        let text = (inputs.text != inputs.model)
            .then(|| read_archive(&inputs.text))
            .transpose()?;
        let data = (inputs.data != inputs.model && inputs.data != inputs.text)
            .then(|| read_archive(&inputs.data))
            .transpose()?;
        Ok(Self { model, text, data })
    }

    fn text(&self) -> &TensorArchive {
        self.text.as_ref().unwrap_or(&self.model)
    }

    fn data(&self, inputs: &Inputs) -> &TensorArchive {
        match &self.data {
            Some(d) => d,
            None if inputs.data == inputs.text => self.text(),
            None => &self.model,
        }
    }
}

fn resolve_blocks(flag: Option<&str>, encoder: &EncoderConfig) -> Result<Vec<usize>> {
    match flag {
        Some(raw) => parse_list("blocks", raw),
        None if !encoder.condense_blocks.is_empty() => Ok(encoder.condense_blocks.clone()),
        None => Ok(RunConfig::default().condense_blocks),
    }
}

fn cmd_run(args: &RunArgs) -> Result<()> {
    if args.inputs.f64 {
        run_typed::<f64>(args)
    } else {
        run_typed::<f32>(args)
    }
}

fn run_typed<T: tca::Scalar>(args: &RunArgs) -> Result<()> {
    let loaded = Loaded::read(&args.inputs)?;
    let model = Model::<T>::from_archives(&loaded.model, loaded.text(), args.inputs.heads)?;
    let dataset = Dataset::new(loaded.data(&args.inputs))?;
    if dataset.image_side() != model.encoder.image_side {
        bail!(
            "dataset image side {} does not match model input side {}",
            dataset.image_side(),
            model.encoder.image_side
        );
    }
    let config = RunConfig {
        keep_rate: args.rate,
        merge_prune_ratio: args.ratio,
        centers: args.k,
        lambda: args.lambda,
        beta: args.beta,
        direction: args.direction,
        reservoir_size: args.reservoir,
        strategy: args.strategy,
        condense_blocks: resolve_blocks(args.blocks.as_deref(), &model.encoder)?,
        tau: args.tau,
        mode: args.mode,
        seed: args.seed,
        record_latency: args.timing,
    };
    let mut pipeline = Pipeline::new(&model, config)?;
    if let Some(path) = &args.reservoir_in {
        pipeline.load_reservoir(&read_archive(path)?)?;
    }

    let jsonl = args.out.with_extension("jsonl");
    let mut writer = BufWriter::new(File::create(&jsonl).with_context(|| format!("creating {}", jsonl.display()))?);
    let summary = pipeline.run_stream(dataset.iter::<T>(), |r| {
        serde_json::to_writer(&mut writer, r)?;
        writer.write_all(b"\n")?;
        Ok(())
    })?;
    writer.flush()?;

    let summary_path = args.out.with_extension("summary.json");
    std::fs::write(&summary_path, serde_json::to_vec_pretty(&summary)?)
        .with_context(|| format!("writing {}", summary_path.display()))?;
    if let Some(path) = &args.reservoir_out {
        let mut a = TensorArchive::new();
        pipeline.reservoir().write_to(&mut a)?;
        a.write(path).with_context(|| format!("writing {}", path.display()))?;
    }
    say(&summary_line(&summary))?;
    Ok(())
}

fn summary_line(s: &RunSummary) -> String {
    let acc = s.accuracy.map_or("n/a".to_string(), |a| format!("{a:.4}"));
    format!(
        "mode={} samples={} accuracy={} flops_ratio={:.4} errors={}",
        s.mode, s.samples, acc, s.flops_ratio, s.errors
    )
}

#[derive(Serialize)]
struct FlopsReport {
    geometry: EncoderConfig,
    plan: CondensationPlan,
    vanilla_flops: u64,
    flops: u64,
    ratio: f64,
    patches_per_block: Vec<usize>,
}

fn cmd_flops(args: &FlopsArgs) -> Result<()> {
    let cfg = EncoderConfig {
        image_side: args.image_side,
        patch_side: args.patch_side,
        layers: args.layers,
        heads: args.heads,
        width: args.width,
        mlp_ratio: args.mlp_ratio,
        embed_dim: args.embed_dim,
        condense_blocks: parse_list("blocks", &args.blocks)?,
    };
    cfg.validate()?;
    let plan = CondensationPlan::new(args.rate, args.ratio, args.k)?;
    let vanilla = vanilla_flops(&cfg);
    let flops = flops_estimate(&cfg, &plan);
    let report = FlopsReport {
        patches_per_block: planned_loads(&cfg, &plan).iter().map(|l| l.mlp_tokens - 1).collect(),
        geometry: cfg,
        plan,
        vanilla_flops: vanilla,
        flops,
        ratio: flops as f64 / vanilla as f64,
    };
    say(&serde_json::to_string_pretty(&report)?)?;
    Ok(())
}

#[derive(Serialize)]
struct AblateRow {
    mode: Mode,
    rate: f64,
    ratio: f64,
    k: usize,
    lambda: f64,
    beta: f64,
    direction: Direction,
    reservoir: usize,
    strategy: Strategy,
    samples: usize,
    accuracy: Option<f64>,
    flops_mean: f64,
    flops_ratio: f64,
    errors: usize,
}

fn cmd_ablate(args: &AblateArgs) -> Result<()> {
    if args.inputs.f64 {
        ablate_typed::<f64>(args)
    } else {
        ablate_typed::<f32>(args)
    }
}

fn ablate_typed<T: tca::Scalar>(args: &AblateArgs) -> Result<()> {
    let modes: Vec<Mode> = parse_list("mode", &args.mode)?;
    let rates: Vec<f64> = parse_list("rate", &args.rate)?;
    let ratios: Vec<f64> = parse_list("ratio", &args.ratio)?;
    let ks: Vec<usize> = parse_list("k", &args.k)?;
    let lambdas: Vec<f64> = parse_list("lambda", &args.lambda)?;
    let betas: Vec<f64> = parse_list("beta", &args.beta)?;
    let directions: Vec<Direction> = parse_list("direction", &args.direction)?;
    let sizes: Vec<usize> = parse_list("reservoir", &args.reservoir)?;
    let strategies: Vec<Strategy> = parse_list("strategy", &args.strategy)?;

    let loaded = Loaded::read(&args.inputs)?;
    let model = Model::<T>::from_archives(&loaded.model, loaded.text(), args.inputs.heads)?;
    let dataset = Dataset::new(loaded.data(&args.inputs))?;
    let samples = dataset.iter::<T>().collect::<tca::Result<Vec<_>>>()?;
    let blocks = resolve_blocks(args.blocks.as_deref(), &model.encoder)?;

    let mut cells = Vec::new();
    for &mode in &modes {
        for &keep_rate in &rates {
            for &merge_prune_ratio in &ratios {
                for &centers in &ks {
                    for &lambda in &lambdas {
                        for &beta in &betas {
                            for &direction in &directions {
                                for &reservoir_size in &sizes {
                                    for &strategy in &strategies {
                                        cells.push(RunConfig {
                                            keep_rate,
                                            merge_prune_ratio,
                                            centers,
                                            lambda,
                                            beta,
                                            direction,
                                            reservoir_size,
                                            strategy,
                                            condense_blocks: blocks.clone(),
                                            tau: args.tau,
                                            mode,
                                            seed: args.seed,
                                            record_latency: false,
                                        });
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    let rows = cells
        .into_par_iter()
        .map(|config| -> Result<AblateRow> {
            let mut pipeline = Pipeline::new(&model, config.clone())?;
            let s = pipeline.run_stream(samples.iter().cloned().map(Ok), |_| Ok(()))?;
            Ok(AblateRow {
                mode: config.mode,
                rate: config.keep_rate,
                ratio: config.merge_prune_ratio,
                k: config.centers,
                lambda: config.lambda,
                beta: config.beta,
                direction: config.direction,
                reservoir: config.reservoir_size,
                strategy: config.strategy,
                samples: s.samples,
                accuracy: s.accuracy,
                flops_mean: s.flops_mean,
                flops_ratio: s.flops_ratio,
                errors: s.errors,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let sink: Box<dyn Write> = match &args.out {
        Some(path) => Box::new(File::create(path).with_context(|| format!("creating {}", path.display()))?),
        None => Box::new(std::io::stdout().lock()),
    };
    let mut csv = csv::Writer::from_writer(sink);
    for row in &rows {
        csv.serialize(row)?;
    }
    csv.flush()?;
    Ok(())
}

fn cmd_inspect(args: &InspectArgs) -> Result<bool> {
    let bytes = std::fs::read(&args.path).with_context(|| format!("reading {}", args.path.display()))?;
    let report = inspect(&bytes);
    let listing = (|| -> std::io::Result<()> {
        let mut out = std::io::stdout().lock();
        writeln!(
            out,
            "manifest {} bytes, payload at {}",
            report.manifest_len, report.payload_start
        )?;
        for (name, meta) in &report.entries {
            writeln!(
                out,
                "{name}\t{}\t{:?}\toffset={}\tlength={}",
                meta.dtype, meta.shape, meta.offset, meta.length
            )?;
        }
        out.flush()
    })();
    if let Err(e) = listing {
        if e.kind() != std::io::ErrorKind::BrokenPipe {
            return Err(e.into());
        }
    }
    for v in &report.violations {
        eprintln!("violation: {v}");
    }
    Ok(report.is_valid())
}

fn cmd_toy(args: &ToyArgs) -> Result<()> {
    let spec = StreamSpec {
        samples: args.samples,
        ..Default::default()
    };
    let task = SyntheticTask::<f32>::new(spec, args.seed)?;
    let stream = task.stream(args.seed.wrapping_add(1));
    task.to_archive(&stream)?
        .write(&args.out)
        .with_context(|| format!("writing {}", args.out.display()))?;
    say(&format!("wrote {} ({} samples)", args.out.display(), stream.len()))?;
    Ok(())
}

/// One line to stdout.
fn say(line: &str) -> std::io::Result<()> {
    let mut out = std::io::stdout().lock();
    writeln!(out, "{line}")?;
    out.flush()
}

/// A reader that closed stdout early (`| head`) is not a failure.
fn is_broken_pipe(e: &anyhow::Error) -> bool {
    e.chain().any(|c| {
        c.downcast_ref::<std::io::Error>()
            .is_some_and(|io| io.kind() == std::io::ErrorKind::BrokenPipe)
    })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match &cli.command {
        Command::Run(a) => cmd_run(a).map(|_| true),
        Command::Flops(a) => cmd_flops(a).map(|_| true),
        Command::Ablate(a) => cmd_ablate(a).map(|_| true),
        Command::Inspect(a) => cmd_inspect(a),
        Command::Toy(a) => cmd_toy(a).map(|_| true),
    };
    match outcome {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) if is_broken_pipe(&e) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
