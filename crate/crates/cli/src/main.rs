mod config;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use candle_core::DType;
use clap::{Args, Parser, Subcommand};
use geocycle::data::{decode_image, generate_synthetic_dataset, preprocess, save_png, to_rgb_image, DatasetManifest, TextureStyle};
use geocycle::eval::{compare_methods, RepeatProtocol};
use geocycle::networks::{build_loss_network, ImageBatch, LossNetworkConfig, LossNetworkProvider};
use geocycle::train::{load_bundle, run_training, Architecture, Direction, Mode, ModelBundle, RunOptions};
use geocycle::{Error, Result};

use config::{output_dir, RunConfigFile};

#[derive(Parser)]
#[command(name = "geocycle", version, about = "Unpaired sketch-to-photo translation with a geometry discriminator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a procedural two-domain face dataset.
    Synthesize(SynthesizeArgs),
    /// Train one mode on a dataset.
    Train(TrainArgs),
    /// Translate a directory of images with a trained checkpoint.
    Translate(TranslateArgs),
    /// Compare the three modes on a dataset's test split.
    Evaluate(EvaluateArgs),
    /// Print the network shapes implied by a config.
    Inspect(InspectArgs),
}

#[derive(Args)]
struct SynthesizeArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long = "n")]
    n_identities: Option<usize>,
    #[arg(long)]
    train_frac: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    jitter: Option<f64>,
    #[arg(long)]
    resolution: Option<usize>,
    #[arg(long, value_parser = parse_style)]
    style: Option<TextureStyle>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset directory; overrides `data.root`.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    mode: Option<Mode>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    resolution: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lambda_cyc: Option<f64>,
    #[arg(long)]
    lambda_geo: Option<f64>,
    #[arg(long)]
    lambda_patch: Option<f64>,
    /// Continue from the latest checkpoint in the output directory.
    #[arg(long)]
    resume: bool,
}

#[derive(Args)]
struct TranslateArgs {
    /// Checkpoint directory or training run directory.
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value = "a_to_b")]
    direction: Direction,
    /// Expected model resolution; a checkpoint of another resolution is rejected.
    #[arg(long)]
    resolution: Option<usize>,
    /// Expected architecture, from the `model` and `train` sections.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    full: Option<PathBuf>,
    #[arg(long)]
    no_geometry: Option<PathBuf>,
    #[arg(long)]
    baseline: Option<PathBuf>,
    #[arg(long)]
    repeats: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_parser = parse_protocol)]
    protocol: Option<RepeatProtocol>,
}

#[derive(Args)]
struct InspectArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    resolution: Option<usize>,
}

fn parse_style(s: &str) -> std::result::Result<TextureStyle, String> {
    serde_json::from_value(serde_json::Value::String(s.to_string()))
        .map_err(|_| format!("unknown style `{s}` (pencil, charcoal, composite)"))
}

fn parse_protocol(s: &str) -> std::result::Result<RepeatProtocol, String> {
    serde_json::from_value(serde_json::Value::String(s.replace('-', "_")))
        .map_err(|_| format!("unknown protocol `{s}` (retrain, evaluation_only)"))
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Domain(_) | Error::Dimension(_) | Error::Protocol(_) => 2,
        Error::Io { .. } | Error::Load { .. } | Error::Dataset(_) | Error::Decode { .. } => 3,
        Error::Divergence { .. } => 4,
        Error::Compatibility(_) => 5,
        _ => 1,
    }
}

fn data_root(flag: Option<PathBuf>, cfg: &mut RunConfigFile) -> Result<PathBuf> {
    if let Some(d) = flag {
        cfg.data.root = Some(d);
    }
    cfg.data.root.clone().ok_or_else(|| Error::Config("no dataset: pass --data or set data.root".into()))
}

fn synthesize(args: SynthesizeArgs) -> Result<()> {
    let mut cfg = RunConfigFile::load(args.config.as_deref())?;
    let s = &mut cfg.data.synthetic;
    if let Some(v) = args.n_identities {
        s.n_identities = v;
    }
    if let Some(v) = args.train_frac {
        s.train_fraction = v;
    }
    if let Some(v) = args.seed {
        s.seed = v;
    }
    if let Some(v) = args.jitter {
        s.geometry_jitter = v;
    }
    if let Some(v) = args.resolution {
        s.resolution = v;
    }
    if let Some(v) = args.style {
        s.texture_style = v;
    }
    if s.n_identities < 2 {
        return Err(Error::Domain("need ≥ 2 identities".into()));
    }
    let out = output_dir(args.out, "data");
    cfg.data.root = Some(out.clone());
    let dump = cfg.dump(&out)?;
    let m = generate_synthetic_dataset(&cfg.data.synthetic, &out)?;
    println!(
        "identities: {} (train {}, test {})",
        m.splits.train.len() + m.splits.test.len(),
        m.splits.train.len(),
        m.splits.test.len()
    );
    println!("manifest: {}", out.join(geocycle::data::manifest::MANIFEST_FILE).display());
    println!("config: {}", dump.display());
    Ok(())
}

fn train(args: TrainArgs) -> Result<()> {
    let mut cfg = RunConfigFile::load(args.config.as_deref())?;
    let root = data_root(args.data, &mut cfg)?;
    let t = &mut cfg.train;
    if let Some(v) = args.mode {
        t.mode = v;
    }
    if let Some(v) = args.epochs {
        t.epochs = v;
    }
    if let Some(v) = args.resolution {
        t.resolution = v;
    }
    if let Some(v) = args.seed {
        t.seed = v;
    }
    if let Some(v) = args.lr {
        t.learning_rate = v;
    }
    if let Some(v) = args.batch_size {
        t.batch_size = v;
    }
    if let Some(v) = args.lambda_cyc {
        t.weights.lambda_cyc = v;
    }
    if let Some(v) = args.lambda_geo {
        t.weights.lambda_geo = v;
    }
    if let Some(v) = args.lambda_patch {
        t.weights.lambda_patch = v;
    }
    t.validate()?;
    Architecture::resolve(&cfg.model, t.resolution)?;
    let out = output_dir(args.out, &format!("train_{}_s{}", t.mode.name(), t.seed));
    let dump = cfg.dump(&out)?;
    println!("config: {}", dump.display());
    let manifest = DatasetManifest::load(&root)?;
    let opts = RunOptions { resume: args.resume, ..Default::default() };
    match run_training(&manifest, &cfg.model, &cfg.train, &out, opts) {
        Ok(r) => {
            if let Some(last) = r.metrics.last() {
                println!("epoch {}: total {:.4} cycle {:.4}", last.epoch, last.mean.total, last.cycle);
            }
            println!("metrics: {}", out.join(geocycle::train::METRICS_FILE).display());
            println!("checkpoint: {}", r.final_checkpoint.display());
            Ok(())
        }
        Err(Error::Divergence { term, breakdown, last_good_checkpoint }) => {
            match &last_good_checkpoint {
                Some(p) => eprintln!("last good checkpoint: {}", p.display()),
                None => eprintln!("last good checkpoint: none"),
            }
            Err(Error::Divergence { term, breakdown, last_good_checkpoint })
        }
        Err(e) => Err(e),
    }
}

fn image_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let ext = path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase);
        if matches!(ext.as_deref(), Some("png" | "jpg" | "jpeg" | "bmp")) {
            files.push(path);
        }
    }
    files.sort();
    Ok(files)
}

fn translate(args: TranslateArgs) -> Result<()> {
    let expected = match &args.config {
        Some(p) => {
            let cfg = RunConfigFile::load(Some(p))?;
            let res = args.resolution.unwrap_or(cfg.train.resolution);
            Some(Architecture::resolve(&cfg.model, res)?)
        }
        None => None,
    };
    let (bundle, _) = load_bundle(&args.checkpoint, expected.as_ref())?;
    let res = bundle.arch.resolution;
    if let Some(r) = args.resolution {
        if r != res {
            return Err(Error::Compatibility(format!("checkpoint is {res}², expected {r}²")));
        }
    }
    let files = image_files(&args.input)?;
    if files.is_empty() {
        return Err(Error::Dataset(format!("no images under {}", args.input.display())));
    }
    let out = output_dir(args.out, "translated");
    std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    for f in &files {
        let x = preprocess(&decode_image(f)?, res)?.to_dtype(bundle.dtype())?.unsqueeze(0)?;
        let y = bundle.translate(&ImageBatch::new(x)?, args.direction)?;
        let stem = f.file_stem().and_then(|s| s.to_str()).unwrap_or("image");
        let img = to_rgb_image(&y.tensor().get(0)?)?;
        save_png(&img, &out.join(format!("{stem}.png")))?;
    }
    println!("translated {} images into {}", files.len(), out.display());
    Ok(())
}

fn evaluate(args: EvaluateArgs) -> Result<()> {
    let mut cfg = RunConfigFile::load(args.config.as_deref())?;
    let root = data_root(args.data, &mut cfg)?;
    if let Some(v) = args.repeats {
        cfg.eval.repeats = v;
    }
    if let Some(v) = args.seed {
        cfg.eval.seed = v;
    }
    if let Some(v) = args.protocol {
        cfg.eval.protocol = v;
    }
    cfg.eval.validate()?;
    let given = [(Mode::Full, args.full, "--full"), (Mode::NoGeometry, args.no_geometry, "--no-geometry"), (Mode::CycleganBaseline, args.baseline, "--baseline")];
    let mut checkpoints = BTreeMap::new();
    for (mode, path, flag) in given {
        match path {
            Some(p) => {
                checkpoints.insert(mode, p);
            }
            None => return Err(Error::Config(format!("missing checkpoint for mode {mode} ({flag})"))),
        }
    }
    let out = output_dir(args.out, "eval");
    let dump = cfg.dump(&out)?;
    let manifest = DatasetManifest::load(&root)?;
    let c = compare_methods(&checkpoints, &manifest, &cfg.eval, &out)?;
    print!("{}", c.table);
    println!("config: {}", dump.display());
    println!("reports: {}", c.report_path.display());
    println!("table: {}", c.table_path.display());
    if let Some(g) = c.grids.first() {
        println!("grids: {} ({} images)", g.parent().unwrap_or(&out).display(), c.grids.len());
    }
    Ok(())
}

fn inspect(args: InspectArgs) -> Result<()> {
    let cfg = RunConfigFile::load(args.config.as_deref())?;
    let res = args.resolution.unwrap_or(cfg.train.resolution);
    let arch = Architecture::resolve(&cfg.model, res)?;
    let spec = &arch.loss_network;
    let sizes = spec.tap_sizes(res);
    let channels = spec.tap_channels();
    println!("resolution: {res}x{res}");
    println!("loss network taps (stages {:?}):", spec.tap_stages);
    for i in 0..3 {
        println!("  tap {}: {} x {s}x{s}", i + 1, channels[i], s = sizes[i]);
    }
    let g = &arch.geometry;
    println!("geometry discriminator: {} stride-2 convs", g.layer_count());
    for (i, l) in g.layers().iter().enumerate() {
        let concat = match i {
            1 => format!(" = {} + tap 2 ({})", l.in_channels - channels[1], channels[1]),
            2 => format!(" = {} + tap 3 ({})", l.in_channels - channels[2], channels[2]),
            _ => String::new(),
        };
        println!(
            "  conv {}: {}{concat} -> {} channels, {k}x{k}/{}, output {s}x{s}",
            i + 1,
            l.in_channels,
            l.out_channels,
            l.stride,
            k = l.kernel,
            s = l.output_size
        );
    }
    let patch = arch.patch.output_size(res).map(|s| format!("{s}x{s}")).unwrap_or_else(|| "none".into());
    println!("patch discriminator output: {patch}");
    let phi_cfg = LossNetworkConfig { spec: spec.clone(), provider: LossNetworkProvider::FixedRandom { seed: 0 } };
    let phi = build_loss_network(&phi_cfg, res, DType::F32)?;
    let bundle = ModelBundle::new(&arch, phi, 0)?;
    println!("parameters:");
    for (name, params) in bundle.networks() {
        println!("  {name}: {}", params.parameter_count());
    }
    println!("  phi: {}", bundle.phi.params().parameter_count());
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let result = match cli.command {
        Command::Synthesize(a) => synthesize(a),
        Command::Train(a) => train(a),
        Command::Translate(a) => translate(a),
        Command::Evaluate(a) => evaluate(a),
        Command::Inspect(a) => inspect(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
