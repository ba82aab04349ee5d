//! `gpsnet` command-line front end.
//!
//! Exit codes: 0 success, 2 input or spec error, 3 numerical failure.

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use gpsnet::model::{
    self, gradcheck_model, read_trained_checkpoint, train_toy, write_metrics, write_trained_checkpoint, GradcheckConfig,
    ModelConfig, ModelError, SuperNetModel, TrainConfig,
};
use gpsnet::netspec::{Builtin, ChannelProfile, GraphSpec, NodeKind};
use gpsnet::rf::{self, render::render_graph, ReportInput};
use gpsnet::tensor::{NormMode, Shape, Tensor4};
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "gpsnet", version, about = "Gated atrous-pyramid networks: analysis, checks and toy training")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// RF / SR / parameter report (reference rows when no graph is given).
    Analyze(AnalyzeArgs),
    /// Sample-position CSV and graymap files per branch and for the union.
    RenderSamples(RenderArgs),
    /// Forward pass on random input; prints shapes and gate mask statistics.
    Forward(ForwardArgs),
    /// Analytic vs finite-difference gradients per parameter block.
    Gradcheck(GradcheckArgs),
    /// Train on the synthetic shapes dataset.
    TrainToy(TrainArgs),
    /// Per-gate mask graymaps for one held-out image.
    GatesDump(GatesArgs),
}

#[derive(Args)]
struct GraphSource {
    /// Builtin graph name (repeatable for analyze).
    #[arg(long)]
    builtin: Vec<String>,
    /// Graph spec JSON file (repeatable for analyze).
    #[arg(long)]
    spec: Vec<PathBuf>,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Text,
    Json,
    Csv,
    Pgm,
}

#[derive(Args)]
struct AnalyzeArgs {
    #[command(flatten)]
    source: GraphSource,
    /// Write report.txt and report.json here instead of printing.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "text")]
    format: Format,
}

#[derive(Args)]
struct RenderArgs {
    #[command(flatten)]
    source: GraphSource,
    #[arg(long)]
    out: PathBuf,
    /// Only CSV or only graymaps; both by default.
    #[arg(long, value_enum)]
    format: Option<Format>,
}

#[derive(Args)]
struct ModelArgs {
    #[command(flatten)]
    source: GraphSource,
    /// Input shape `n,c,h,w`.
    #[arg(long, default_value = "1,8,17,17")]
    shape: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Width of the fusion conv after the graph.
    #[arg(long, default_value_t = 16)]
    head_ch: usize,
}

#[derive(Args)]
struct ForwardArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "text")]
    format: Format,
}

#[derive(Args)]
struct GradcheckArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long, default_value_t = 1e-5)]
    step: f64,
    #[arg(long, default_value_t = 1e-4)]
    tol: f64,
    /// Coordinates checked per parameter block (0 = all).
    #[arg(long, default_value_t = 2)]
    samples: usize,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "text")]
    format: Format,
    /// Negative control: scale the ReLU backward rule by this factor.
    #[arg(long, hide = true)]
    corrupt_backward: Option<f64>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Overrides the seed in the config file.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct GatesArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Index into the held-out synthetic set.
    #[arg(long, default_value_t = 0)]
    image: usize,
    /// Held-out set seed; defaults to the training seed stored in the
    /// checkpoint.
    #[arg(long)]
    seed: Option<u64>,
    /// Image side length; defaults to the training crop.
    #[arg(long)]
    size: Option<usize>,
}

/// Training config file.
#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ToyConfig {
    /// Builtin graph name, instantiated with desk channel widths.
    #[serde(default)]
    builtin: Option<String>,
    /// Inline graph spec, used instead of `builtin`.
    #[serde(default)]
    graph: Option<GraphSpec>,
    head_ch: usize,
    train: TrainConfig,
}

enum Failure {
    Input(anyhow::Error),
    Numeric(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Input(e)
    }
}

type Outcome<T = ()> = Result<T, Failure>;

fn input<E: Into<anyhow::Error>>(e: E) -> Failure {
    Failure::Input(e.into())
}

/// Files produced by a command: written into `--out` atomically, or printed.
struct Output {
    files: Vec<(String, Vec<u8>)>,
}

impl Output {
    fn new() -> Self {
        Output { files: Vec::new() }
    }

    fn add(&mut self, name: impl Into<String>, bytes: impl Into<Vec<u8>>) {
        self.files.push((name.into(), bytes.into()));
    }

    /// Stages everything in a sibling directory and moves it into place only
    /// once all files are written, so a failure leaves no partial output.
    fn commit(self, out: &Path) -> anyhow::Result<()> {
        let parent = out.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
        let stem = out.file_name().ok_or_else(|| anyhow!("bad output path {}", out.display()))?;
        let staging = parent.join(format!(".{}.partial", stem.to_string_lossy()));
        if staging.exists() {
            fs::remove_dir_all(&staging)?;
        }
        fs::create_dir_all(&staging)?;
        let result = (|| -> anyhow::Result<()> {
            for (name, bytes) in &self.files {
                fs::write(staging.join(name), bytes)?;
            }
            if out.exists() {
                for (name, _) in &self.files {
                    fs::rename(staging.join(name), out.join(name))?;
                }
                fs::remove_dir(&staging)?;
            } else {
                fs::rename(&staging, out)?;
            }
            Ok(())
        })();
        if result.is_err() {
            let _ = fs::remove_dir_all(&staging);
        }
        result.with_context(|| format!("writing {}", out.display()))
    }
}

fn read_spec(path: &Path) -> Outcome<GraphSpec> {
    let text = fs::read_to_string(path)
        .with_context(|| format!("reading {}", path.display()))
        .map_err(Failure::Input)?;
    GraphSpec::from_json(&text)
        .with_context(|| format!("spec {}", path.display()))
        .map_err(Failure::Input)
}

fn parse_builtin(name: &str) -> Outcome<Builtin> {
    name.parse::<Builtin>().map_err(input)
}

/// Exactly one graph for the model-running commands; builtins get desk
/// channel widths matching the input channel count.
fn single_graph(source: &GraphSource, in_ch: u32) -> Outcome<GraphSpec> {
    match (source.builtin.as_slice(), source.spec.as_slice()) {
        ([name], []) => parse_builtin(name)?
            .build(ChannelProfile::Desk { in_ch })
            .map_err(input),
        ([], [path]) => read_spec(path),
        _ => Err(input(anyhow!("give exactly one of --builtin or --spec"))),
    }
}

fn parse_shape(s: &str) -> Outcome<Shape> {
    let dims: Vec<usize> = s
        .split(',')
        .map(|p| p.trim().parse::<usize>())
        .collect::<Result<_, _>>()
        .map_err(|e| input(anyhow!("bad --shape `{s}`: {e}")))?;
    match dims[..] {
        [n, c, h, w] if n > 0 && c > 0 && h > 0 && w > 0 => Ok(Shape::new(n, c, h, w)),
        _ => Err(input(anyhow!("--shape needs four positive integers n,c,h,w, got `{s}`"))),
    }
}

fn dilation_setting(g: &GraphSpec) -> String {
    let order = g.topo_order().unwrap_or_default();
    let rates: Vec<String> = order
        .into_iter()
        .map(|i| &g.nodes[i])
        .filter(|n| n.kind == NodeKind::Atrous3x3)
        .map(|n| n.dilation.unwrap_or(1).to_string())
        .collect();
    format!("{{{}}}", rates.join(","))
}

fn cmd_analyze(args: &AnalyzeArgs) -> Outcome {
    let report = if args.source.builtin.is_empty() && args.source.spec.is_empty() {
        rf::reference_report().map_err(input)?
    } else {
        let mut inputs = Vec::new();
        for name in &args.source.builtin {
            inputs.push(ReportInput::builtin(parse_builtin(name)?).map_err(input)?);
        }
        for path in &args.source.spec {
            let graph = read_spec(path)?;
            let params = model::count_graph_params(&graph, model::CountPolicy::WEIGHTS_ONLY)
                .map_err(input)?
                .total;
            inputs.push(ReportInput {
                method: graph.name.clone(),
                dilations: dilation_setting(&graph),
                graph,
                params: Some(params),
                closed_form: None,
                published: None,
            });
        }
        rf::analysis_report(&inputs).map_err(input)?
    };
    match &args.out {
        Some(out) => {
            let mut o = Output::new();
            o.add("report.txt", report.to_text());
            o.add("report.json", report.to_json());
            o.commit(out)?;
        }
        None => match args.format {
            Format::Json => print!("{}", report.to_json()),
            Format::Text => print!("{}", report.to_text()),
            _ => return Err(input(anyhow!("analyze prints text or json"))),
        },
    }
    Ok(())
}

fn cmd_render(args: &RenderArgs) -> Outcome {
    let graph = match (args.source.builtin.as_slice(), args.source.spec.as_slice()) {
        ([name], []) => parse_builtin(name)?
            .build(ChannelProfile::Reference)
            .map_err(input)?,
        ([], [path]) => read_spec(path)?,
        _ => return Err(input(anyhow!("give exactly one of --builtin or --spec"))),
    };
    let keep = |name: &str| match args.format {
        None => true,
        Some(Format::Csv) => name.ends_with(".csv"),
        Some(Format::Pgm) => name.ends_with(".pgm"),
        Some(_) => false,
    };
    if matches!(args.format, Some(Format::Text | Format::Json)) {
        return Err(input(anyhow!("render-samples writes csv or pgm")));
    }
    let mut o = Output::new();
    for (name, body) in render_graph(&graph).map_err(input)? {
        if keep(&name) {
            o.add(name, body);
        }
    }
    o.commit(&args.out)?;
    Ok(())
}

fn build_model(args: &ModelArgs, num_classes: Option<usize>) -> Outcome<(SuperNetModel, Tensor4)> {
    let shape = parse_shape(&args.shape)?;
    let graph = single_graph(&args.source, shape.c as u32)?;
    let model = SuperNetModel::new(
        graph,
        ModelConfig {
            head_ch: args.head_ch,
            num_classes,
        },
        args.seed,
    )
    .map_err(input)?;
    if model.in_ch() != shape.c {
        return Err(input(anyhow!(
            "graph expects {} input channels, --shape gives {}",
            model.in_ch(),
            shape.c
        )));
    }
    let x = Tensor4::uniform(shape, -1.0, 1.0, args.seed.wrapping_add(1));
    Ok((model, x))
}

#[derive(Serialize)]
struct Stats {
    min: f64,
    mean: f64,
    max: f64,
}

impl Stats {
    fn of(t: &Tensor4) -> Stats {
        let d = t.data();
        Stats {
            min: d.iter().copied().fold(f64::INFINITY, f64::min),
            mean: d.iter().sum::<f64>() / d.len() as f64,
            max: d.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        }
    }
}

#[derive(Serialize)]
struct GateStats {
    gate: String,
    mask_v: Stats,
    mask_h: Stats,
}

#[derive(Serialize)]
struct ForwardSummary {
    graph: String,
    input: [usize; 4],
    output: [usize; 4],
    output_stats: Stats,
    gates: Vec<GateStats>,
}

fn numeric_ok(t: &Tensor4, what: &str) -> Outcome {
    if t.is_finite() {
        Ok(())
    } else {
        Err(Failure::Numeric(anyhow!("{what} contains non-finite values")))
    }
}

fn cmd_forward(args: &ForwardArgs) -> Outcome {
    let (model, x) = build_model(&args.model, None)?;
    let out = model.infer(&x, NormMode::Train).map_err(input)?;
    numeric_ok(&out.features, "output")?;
    let summary = ForwardSummary {
        graph: model.graph.name.clone(),
        input: x.shape().dims(),
        output: out.features.shape().dims(),
        output_stats: Stats::of(&out.features),
        gates: out
            .masks
            .iter()
            .map(|(k, (v, h))| GateStats {
                gate: k.clone(),
                mask_v: Stats::of(v),
                mask_h: Stats::of(h),
            })
            .collect(),
    };
    let mut text = format!(
        "graph {}\ninput {}\noutput {}\noutput min {:.6} mean {:.6} max {:.6}\n",
        summary.graph,
        x.shape(),
        out.features.shape(),
        summary.output_stats.min,
        summary.output_stats.mean,
        summary.output_stats.max
    );
    for g in &summary.gates {
        text.push_str(&format!(
            "gate {} mask_v min {:.6} mean {:.6} max {:.6} | mask_h min {:.6} mean {:.6} max {:.6}\n",
            g.gate, g.mask_v.min, g.mask_v.mean, g.mask_v.max, g.mask_h.min, g.mask_h.mean, g.mask_h.max
        ));
    }
    let json = serde_json::to_string_pretty(&summary).map_err(input)? + "\n";
    emit(args.out.as_deref(), args.format, "forward", text, json)
}

fn emit(out: Option<&Path>, format: Format, stem: &str, text: String, json: String) -> Outcome {
    match out {
        Some(dir) => {
            let mut o = Output::new();
            o.add(format!("{stem}.txt"), text);
            o.add(format!("{stem}.json"), json);
            o.commit(dir)?;
        }
        None => match format {
            Format::Json => print!("{json}"),
            _ => print!("{text}"),
        },
    }
    Ok(())
}

fn cmd_gradcheck(args: &GradcheckArgs) -> Outcome {
    if !(args.step > 0.0) || !(args.tol > 0.0) {
        return Err(input(anyhow!("--step and --tol must be positive")));
    }
    let (model, x) = build_model(&args.model, None)?;
    let cfg = GradcheckConfig {
        step: args.step,
        tol: args.tol,
        samples_per_block: args.samples,
        seed: args.model.seed,
        mode: NormMode::Train,
    };
    let report = gradcheck_model(&model, &x, &cfg, args.corrupt_backward).map_err(input)?;
    let mut text = String::new();
    for b in &report.blocks {
        text.push_str(&format!(
            "{} {} checked {} kinks {} max_rel_err {:.3e}\n",
            if b.pass { "pass" } else { "FAIL" },
            b.name,
            b.checked,
            b.kinks,
            b.max_rel_err
        ));
    }
    let failed = report.blocks.iter().filter(|b| !b.pass).count();
    text.push_str(&format!(
        "{}: {} blocks, {failed} failed, tol {:e}\n",
        if report.pass { "PASS" } else { "FAIL" },
        report.blocks.len(),
        args.tol
    ));
    let json = serde_json::to_string_pretty(&report).map_err(input)? + "\n";
    emit(args.out.as_deref(), args.format, "gradcheck", text, json)?;
    if report.pass {
        Ok(())
    } else {
        Err(Failure::Numeric(anyhow!("{failed} parameter blocks exceed tolerance {:e}", args.tol)))
    }
}

#[derive(Serialize)]
struct TrainSummary {
    graph: String,
    iterations: usize,
    final_miou: f64,
    window_loss: Vec<f64>,
}

fn cmd_train(args: &TrainArgs) -> Outcome {
    let text = fs::read_to_string(&args.config)
        .with_context(|| format!("reading {}", args.config.display()))
        .map_err(Failure::Input)?;
    let mut cfg: ToyConfig = serde_json::from_str(&text)
        .with_context(|| format!("config {}", args.config.display()))
        .map_err(Failure::Input)?;
    if let Some(seed) = args.seed {
        cfg.train.seed = seed;
    }
    cfg.train.validate().map_err(input)?;
    let graph = match (&cfg.builtin, cfg.graph.take()) {
        (Some(name), None) => parse_builtin(name)?
            .build(ChannelProfile::Desk {
                in_ch: model::IMAGE_CHANNELS as u32,
            })
            .map_err(input)?,
        (None, Some(g)) => g.checked_owned().map_err(input)?,
        _ => return Err(input(anyhow!("config needs exactly one of `builtin` or `graph`"))),
    };
    let mut net = SuperNetModel::new(
        graph,
        ModelConfig {
            head_ch: cfg.head_ch,
            num_classes: Some(cfg.train.num_classes),
        },
        cfg.train.seed,
    )
    .map_err(input)?;
    let report = match train_toy(&mut net, &cfg.train) {
        Ok(r) => r,
        Err(e @ ModelError::Divergence { .. }) => return Err(Failure::Numeric(e.into())),
        Err(e) => return Err(input(e)),
    };
    let mut ckpt = Vec::new();
    write_trained_checkpoint(&net, Some(&cfg.train), &mut ckpt).map_err(input)?;
    let mut metrics = Vec::new();
    write_metrics(&report.history, &mut metrics).map_err(input)?;
    let summary = TrainSummary {
        graph: net.graph.name.clone(),
        iterations: report.history.len(),
        final_miou: report.final_miou,
        window_loss: model::windowed_loss(&report.history, 100),
    };
    let mut o = Output::new();
    o.add("checkpoint.bin", ckpt);
    o.add("metrics.jsonl", metrics);
    o.add("summary.json", serde_json::to_string_pretty(&summary).map_err(input)? + "\n");
    o.commit(&args.out)?;
    println!(
        "trained {} for {} iterations; held-out mIoU {:.4}",
        summary.graph, summary.iterations, summary.final_miou
    );
    Ok(())
}

/// Graymap of one mask plane, min-max normalized with the given range.
fn mask_pgm(t: &Tensor4, lo: f64, hi: f64) -> String {
    let s = t.shape();
    let mut out = format!("P2\n{} {}\n255\n", s.w, s.h);
    for y in 0..s.h {
        let row: Vec<String> = (0..s.w)
            .map(|x| {
                let v = if hi > lo { (t.at(0, 0, y, x) - lo) / (hi - lo) } else { 0.0 };
                ((v * 255.0).round() as u8).to_string()
            })
            .collect();
        out.push_str(&row.join(" "));
        out.push('\n');
    }
    out
}

#[derive(Serialize)]
struct MaskDump {
    gate: String,
    raw_mask_v: Stats,
    raw_mask_h: Stats,
}

fn cmd_gates(args: &GatesArgs) -> Outcome {
    let bytes = fs::read(&args.checkpoint)
        .with_context(|| format!("reading {}", args.checkpoint.display()))
        .map_err(Failure::Input)?;
    let (net, train) = read_trained_checkpoint(&mut bytes.as_slice()).map_err(input)?;
    if net.gates.is_empty() {
        return Err(input(anyhow!("graph `{}` has no gates", net.graph.name)));
    }
    let train = train.unwrap_or_default();
    let seed = args.seed.unwrap_or(train.seed);
    let size = args.size.unwrap_or(train.crop);
    let classes = net.config.num_classes.unwrap_or(train.num_classes);
    let data =
        model::gen_synthetic_dataset(model::train::val_seed(seed), args.image + 1, size, classes).map_err(input)?;
    let (x, _) = data.batch(&[args.image]);
    if x.shape().c != net.in_ch() {
        return Err(input(anyhow!("checkpoint expects {} input channels", net.in_ch())));
    }
    let out = net.infer(&x, NormMode::Eval).map_err(input)?;
    let mut o = Output::new();
    let mut dumps = Vec::new();
    for (gate, (v, h)) in &out.masks {
        numeric_ok(v, "mask")?;
        numeric_ok(h, "mask")?;
        let (sv, sh) = (Stats::of(v), Stats::of(h));
        let lo = sv.min.min(sh.min);
        let hi = sv.max.max(sh.max);
        o.add(format!("{gate}.mask_v.pgm"), mask_pgm(v, lo, hi));
        o.add(format!("{gate}.mask_h.pgm"), mask_pgm(h, lo, hi));
        dumps.push(MaskDump {
            gate: gate.clone(),
            raw_mask_v: sv,
            raw_mask_h: sh,
        });
    }
    o.add("masks.json", serde_json::to_string_pretty(&dumps).map_err(input)? + "\n");
    o.commit(&args.out)?;
    Ok(())
}

trait CheckedOwned: Sized {
    fn checked_owned(self) -> anyhow::Result<Self>;
}

impl CheckedOwned for GraphSpec {
    fn checked_owned(self) -> anyhow::Result<Self> {
        self.ensure_valid()?;
        Ok(self)
    }
}

fn run(cli: &Cli) -> Outcome {
    match &cli.command {
        Command::Analyze(a) => cmd_analyze(a),
        Command::RenderSamples(a) => cmd_render(a),
        Command::Forward(a) => cmd_forward(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
        Command::TrainToy(a) => cmd_train(a),
        Command::GatesDump(a) => cmd_gates(a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Input(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
        Err(Failure::Numeric(e)) => {
            eprintln!("numerical failure: {e:#}");
            ExitCode::from(3)
        }
    }
}
