//! Command-line front end: `train`, `generate`, `eval` and `ablate`.
//!
//! Exit codes are 0 on success, 1 when a run fails part way and 2 for bad
//! usage or unreadable inputs.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::attention::{dump_file_name, map_to_pgm, map_to_text};
use crate::error::Error;
use crate::eval::{
    detect, detections_from_csv, detections_to_csv, evaluate, report_rows_to_csv, report_to_json, Detection,
    DetectorConfig, EvalItem, MetricsReport,
};
use crate::guidance::{generate, GuidanceConfig, Generation};
use crate::image::{read_ppm, write_ppm};
use crate::layout::{parse_layout, Layout};
use crate::losses::{trace_to_csv, Ablation};
use crate::model::{
    load_checkpoint, loss_curve_to_csv, make_dataset, parse_manifest, checkpoint_to_string, train, Color,
    ModelConfig, NoiseSchedule, SceneConfig, TokenVocabulary, ToyDenoiser, TrainConfig,
};

pub const OUT_ENV: &str = "MACGUIDE_OUT";

#[derive(Debug, Parser)]
#[command(name = "macguide", version, about = "Layout-guided sampling with a toy diffusion model")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train the toy denoiser on a scene manifest.
    Train(TrainArgs),
    /// Sample images for one layout, one per seed.
    Generate(GenerateArgs),
    /// Score images or a detections file against ground-truth layouts.
    Eval(EvalArgs),
    /// Compare unguided sampling with the R, R+M and R+M+Reg loss settings.
    Ablate(AblateArgs),
}

#[derive(Debug, Args)]
pub struct OutArgs {
    /// Output directory, created if absent.
    #[arg(long, env = OUT_ENV, default_value = "macguide_out")]
    pub out: PathBuf,
    /// Overwrite existing output files.
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Scene manifest: one spec such as `two red square and one blue circle` per line.
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long, default_value_t = 10)]
    pub epochs: usize,
    #[arg(long, default_value_t = 16)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 2e-3)]
    pub lr: f64,
    #[arg(long, default_value_t = 0.1)]
    pub cond_dropout: f64,
    #[arg(long, default_value_t = 1.0)]
    pub grad_clip: f64,
    /// Optimizer steps per loss-curve row.
    #[arg(long, default_value_t = 10)]
    pub log_every: usize,
    /// Seeds parameter init, batching and noise; scene `i` renders with seed `seed + i`.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Use the 16x16 miniature model instead of the 32x32 one.
    #[arg(long)]
    pub tiny: bool,
    #[command(flatten)]
    pub output: OutArgs,
}

#[derive(Debug, Args)]
pub struct GuidanceFlags {
    /// `key = value` file with any guidance setting; flags take precedence.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub eta: Option<f64>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub tau: Option<u32>,
    #[arg(long)]
    pub total_steps: Option<usize>,
    #[arg(long)]
    pub optim_steps: Option<usize>,
    #[arg(long)]
    pub max_inner_iters: Option<usize>,
    #[arg(long)]
    pub early_stop_threshold: Option<f64>,
    #[arg(long)]
    pub cfg_weight: Option<f64>,
    #[arg(long)]
    pub clip_sample: Option<bool>,
    /// Seeds as a list (`0,3,7`) or a half-open range (`0..5`).
    #[arg(long)]
    pub seeds: Option<String>,
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub layout: PathBuf,
    /// Loss setting: r, rm or rmreg.
    #[arg(long)]
    pub ablation: Option<Ablation>,
    /// Skip latent optimization entirely.
    #[arg(long)]
    pub no_guidance: bool,
    /// Also write each attention dump as a PGM image.
    #[arg(long)]
    pub pgm: bool,
    #[command(flatten)]
    pub guidance: GuidanceFlags,
    #[command(flatten)]
    pub output: OutArgs,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Ground-truth layouts, one per image; the file stem is the image id.
    #[arg(long, required = true, num_args = 1..)]
    pub layout: Vec<PathBuf>,
    /// PPM images, paired with the layouts in order.
    #[arg(long, num_args = 1.., conflicts_with = "detections")]
    pub images: Vec<PathBuf>,
    /// Detections CSV whose image ids are the layout file stems.
    #[arg(long)]
    pub detections: Option<PathBuf>,
    #[command(flatten)]
    pub output: OutArgs,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, required = true, num_args = 1..)]
    pub layout: Vec<PathBuf>,
    #[command(flatten)]
    pub guidance: GuidanceFlags,
    #[command(flatten)]
    pub output: OutArgs,
}

/// Why a command stopped.
#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Runtime(String),
}

impl Failure {
    pub fn exit_code(&self) -> i32 {
        match self {
            Failure::Usage(_) => 2,
            Failure::Runtime(_) => 1,
        }
    }
}

impl std::fmt::Display for Failure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Failure::Usage(m) | Failure::Runtime(m) => f.write_str(m),
        }
    }
}

trait Classify<T> {
    fn input(self) -> Result<T, Failure>;
    fn runtime(self) -> Result<T, Failure>;
}

impl<T> Classify<T> for crate::Result<T> {
    fn input(self) -> Result<T, Failure> {
        self.map_err(|e| Failure::Usage(e.to_string()))
    }
    fn runtime(self) -> Result<T, Failure> {
        self.map_err(|e| Failure::Runtime(e.to_string()))
    }
}

/// Parses `args` (program name first), runs the command and returns the exit
/// code. Errors are printed to stderr.
pub fn run_from<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(f) => {
            eprintln!("error: {f}");
            f.exit_code()
        }
    }
}

pub fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Generate(a) => cmd_generate(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Ablate(a) => cmd_ablate(a),
    }
}

/// Output directory that refuses to replace existing files unless forced.
struct Output {
    dir: PathBuf,
    force: bool,
}

impl Output {
    fn open(args: &OutArgs) -> Result<Self, Failure> {
        std::fs::create_dir_all(&args.out).map_err(|e| Failure::Usage(Error::io(&args.out, e).to_string()))?;
        Ok(Self {
            dir: args.out.clone(),
            force: args.force,
        })
    }

    fn write(&self, name: &str, bytes: impl AsRef<[u8]>) -> Result<PathBuf, Failure> {
        let path = self.dir.join(name);
        if path.exists() && !self.force {
            return Err(Failure::Usage(format!(
                "{} already exists; pass --force to overwrite",
                path.display()
            )));
        }
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| Failure::Runtime(Error::io(parent, e).to_string()))?;
        }
        std::fs::write(&path, bytes).map_err(|e| Failure::Runtime(Error::io(&path, e).to_string()))?;
        Ok(path)
    }

    fn image(&self, stem: &str, image: &crate::numeric::Tensor) -> Result<(), Failure> {
        let path = self.write(&format!("{stem}.ppm"), [])?;
        write_ppm(&path, image).runtime()?;
        #[cfg(feature = "png")]
        {
            let png = self.write(&format!("{stem}.png"), [])?;
            crate::image::write_png(&png, image).runtime()?;
        }
        Ok(())
    }
}

fn read_text(path: &Path) -> Result<String, Failure> {
    std::fs::read_to_string(path).map_err(|e| Failure::Usage(Error::io(path, e).to_string()))
}

fn read_layout(path: &Path) -> Result<Layout, Failure> {
    parse_layout(&read_text(path)?).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))
}

fn stem(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

/// Parses `0,3,7`, `0..5` or a single seed.
pub fn parse_seeds(text: &str) -> Result<Vec<u64>, String> {
    let bad = || format!("invalid seed list `{text}`");
    if let Some((a, b)) = text.split_once("..") {
        let a: u64 = a.trim().parse().map_err(|_| bad())?;
        let b: u64 = b.trim().parse().map_err(|_| bad())?;
        if a >= b {
            return Err(bad());
        }
        return Ok((a..b).collect());
    }
    text.split(',').map(|s| s.trim().parse().map_err(|_| bad())).collect()
}

/// Defaults, then the config file, then flags.
fn guidance_config(flags: &GuidanceFlags) -> Result<(GuidanceConfig, Vec<u64>), Failure> {
    let mut cfg = GuidanceConfig::default();
    if let Some(path) = &flags.config {
        cfg.apply_text(&read_text(path)?)
            .map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))?;
    }
    macro_rules! over {
        ($($f:ident),*) => { $(if let Some(v) = flags.$f { cfg.$f = v; })* };
    }
    over!(
        eta,
        lambda,
        alpha,
        tau,
        total_steps,
        optim_steps,
        max_inner_iters,
        early_stop_threshold,
        cfg_weight,
        clip_sample
    );
    cfg.validate().input()?;
    let seeds = match &flags.seeds {
        Some(s) => parse_seeds(s).map_err(Failure::Usage)?,
        None => vec![cfg.seed],
    };
    Ok((cfg, seeds))
}

fn cmd_train(args: TrainArgs) -> Result<(), Failure> {
    let specs = parse_manifest(&read_text(&args.manifest)?)
        .map_err(|e| Failure::Usage(format!("{}: {e}", args.manifest.display())))?;
    if specs.is_empty() {
        return Err(Failure::Usage(format!("{} lists no scenes", args.manifest.display())));
    }
    let cfg = TrainConfig {
        epochs: args.epochs,
        batch_size: args.batch_size,
        lr: args.lr,
        cond_dropout: args.cond_dropout,
        grad_clip: args.grad_clip,
        log_every: args.log_every,
        seed: args.seed,
    };
    let model_cfg = if args.tiny { ModelConfig::tiny() } else { ModelConfig::default() };
    let out = Output::open(&args.output)?;
    let echo = serde_json::json!({ "train": cfg, "model": model_cfg, "manifest": args.manifest });
    out.write("train_config.json", serde_json::to_string_pretty(&echo).unwrap_or_default())?;

    let scenes = make_dataset(&specs, args.seed, &SceneConfig::for_size(model_cfg.image_size)).input()?;
    let mut model = ToyDenoiser::new(model_cfg, TokenVocabulary::default(), NoiseSchedule::default(), args.seed)
        .input()?;
    log::info!(
        "training {} parameters on {} scenes for {} epochs",
        model.parameter_count(),
        scenes.len(),
        cfg.epochs
    );
    let curve = train(&mut model, &scenes, &cfg).runtime()?;
    out.write("model.json", checkpoint_to_string(&model).runtime()?)?;
    out.write("loss.csv", loss_curve_to_csv(&curve))?;
    println!("wrote {}", out.dir.display());
    Ok(())
}

fn load_model(path: &Path) -> Result<ToyDenoiser, Failure> {
    load_checkpoint(path).input()
}

fn encode(model: &ToyDenoiser, layout: &Layout, path: &Path) -> Result<Vec<usize>, Failure> {
    model
        .vocab
        .encode(&layout.prompt_tokens)
        .map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))
}

fn write_generation(out: &Output, stem: &str, g: &Generation, dumps: bool, pgm: bool) -> Result<(), Failure> {
    out.image(stem, &g.image)?;
    if dumps {
        out.write(&format!("trace_{stem}.csv"), trace_to_csv(&g.trace))?;
        for dump in &g.dumps {
            for m in &dump.maps {
                let name = format!("attn_{stem}/{}", dump_file_name(dump.step, m.phrase_index));
                out.write(&name, map_to_text(&m.map))?;
                if pgm {
                    out.write(&name.replace(".txt", ".pgm"), map_to_pgm(&m.map))?;
                }
            }
        }
    }
    Ok(())
}

fn seeds_comment(seeds: &[u64]) -> String {
    let list: Vec<String> = seeds.iter().map(u64::to_string).collect();
    format!("# seeds: {}\n", list.join(","))
}

fn cmd_generate(args: GenerateArgs) -> Result<(), Failure> {
    let (mut cfg, seeds) = guidance_config(&args.guidance)?;
    if let Some(a) = args.ablation {
        cfg.ablation = a;
    }
    if args.no_guidance {
        cfg.optim_steps = 0;
    }
    let model = load_model(&args.checkpoint)?;
    let layout = read_layout(&args.layout)?;
    let tokens = encode(&model, &layout, &args.layout)?;
    let out = Output::open(&args.output)?;
    out.write("config.txt", format!("{}{}", seeds_comment(&seeds), cfg.to_text()))?;
    log::info!("effective config:\n{}", cfg.to_text());
    let guided = cfg.optim_steps > 0;
    for &seed in &seeds {
        let g = generate(&tokens, &layout, &GuidanceConfig { seed, ..cfg }, &model).runtime()?;
        for w in &g.warnings {
            log::warn!("seed {seed}, step {}: {}", w.step, w.message);
        }
        write_generation(&out, &format!("s{seed}"), &g, guided, args.pgm)?;
    }
    println!("wrote {} image(s) to {}", seeds.len(), out.dir.display());
    Ok(())
}

fn write_report(out: &Output, prefix: &str, report: &MetricsReport) -> Result<(), Failure> {
    out.write(&format!("{prefix}.json"), report_to_json(report).runtime()?)?;
    out.write(&format!("{prefix}.csv"), report_rows_to_csv(&report.rows))?;
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> Result<(), Failure> {
    let layouts = args
        .layout
        .iter()
        .map(|p| Ok((stem(p), read_layout(p)?)))
        .collect::<Result<Vec<_>, Failure>>()?;
    let mut items = Vec::new();
    let mut detected: Vec<(String, Detection)> = Vec::new();
    if let Some(path) = &args.detections {
        let rows = detections_from_csv(&read_text(path)?)
            .map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))?;
        if let Some((id, _)) = rows.iter().find(|(id, _)| layouts.iter().all(|(s, _)| s != id)) {
            return Err(Failure::Usage(format!(
                "{}: image id `{id}` has no matching layout",
                path.display()
            )));
        }
        for (id, layout) in layouts {
            let detections = rows.iter().filter(|(i, _)| *i == id).map(|(_, d)| d.clone()).collect();
            items.push(EvalItem {
                image_id: id,
                layout,
                detections,
            });
        }
    } else {
        if args.images.len() != layouts.len() {
            return Err(Failure::Usage(format!(
                "got {} image(s) but {} layout(s)",
                args.images.len(),
                layouts.len()
            )));
        }
        for (path, (id, layout)) in args.images.iter().zip(layouts) {
            let image = read_ppm(path).input()?;
            let detections = detect(&image, &Color::ALL, &DetectorConfig::default());
            detected.extend(detections.iter().map(|d| (id.clone(), d.clone())));
            items.push(EvalItem {
                image_id: id,
                layout,
                detections,
            });
        }
    }
    let report = evaluate(&items).runtime()?;
    let out = Output::open(&args.output)?;
    write_report(&out, "report", &report)?;
    if args.detections.is_none() {
        out.write("detections.csv", detections_to_csv(&detected))?;
    }
    println!(
        "precision {:.2}  recall {:.2}  F1 {:.2}",
        report.precision, report.recall, report.f1
    );
    Ok(())
}

/// One row of the ablation table.
#[derive(Debug, Clone)]
pub struct AblationRow {
    pub mode: String,
    pub report: MetricsReport,
    pub initial_loss: Option<f64>,
    pub final_loss: Option<f64>,
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |v| format!("{v:.2}"))
}

pub fn ablation_table(rows: &[AblationRow]) -> String {
    let mut s = String::from("| mode | precision | recall | F1 | color acc | initial L_mac | final L_mac |\n");
    s.push_str("|---|---|---|---|---|---|---|\n");
    for r in rows {
        let _ = writeln!(
            s,
            "| {} | {:.2} | {:.2} | {:.2} | {} | {} | {} |",
            r.mode,
            r.report.precision,
            r.report.recall,
            r.report.f1,
            fmt_opt(r.report.color_acc),
            r.initial_loss.map_or("-".into(), |v| format!("{v:.4}")),
            r.final_loss.map_or("-".into(), |v| format!("{v:.4}")),
        );
    }
    s
}

fn cmd_ablate(args: AblateArgs) -> Result<(), Failure> {
    let (cfg, seeds) = guidance_config(&args.guidance)?;
    let model = load_model(&args.checkpoint)?;
    let layouts = args
        .layout
        .iter()
        .map(|p| {
            let layout = read_layout(p)?;
            let tokens = encode(&model, &layout, p)?;
            Ok((stem(p), layout, tokens))
        })
        .collect::<Result<Vec<_>, Failure>>()?;
    let out = Output::open(&args.output)?;
    out.write("config.txt", format!("{}{}", seeds_comment(&seeds), cfg.to_text()))?;

    let mut modes = vec![("unguided".to_string(), "none".to_string(), GuidanceConfig { optim_steps: 0, ..cfg })];
    for a in Ablation::ALL {
        modes.push((a.label().to_string(), a.to_string(), GuidanceConfig { ablation: a, ..cfg }));
    }
    let mut rows = Vec::new();
    for (mode, dir, mode_cfg) in modes {
        let mut items = Vec::new();
        let (mut first, mut last) = (Vec::new(), Vec::new());
        for (name, layout, tokens) in &layouts {
            for &seed in &seeds {
                let g = generate(tokens, layout, &GuidanceConfig { seed, ..mode_cfg }, &model).runtime()?;
                if let (Some(a), Some(b)) = (g.trace.first(), g.trace.last()) {
                    first.push(a.loss.combined);
                    last.push(b.loss.combined);
                }
                let stem = format!("{name}_s{seed}");
                out.image(&format!("{dir}/{stem}"), &g.image)?;
                items.push(EvalItem {
                    image_id: stem,
                    layout: layout.clone(),
                    detections: detect(&g.image, &Color::ALL, &DetectorConfig::default()),
                });
            }
        }
        let report = evaluate(&items).runtime()?;
        write_report(&out, &format!("{dir}/report"), &report)?;
        let mean = |v: &[f64]| (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64);
        log::info!("{mode}: F1 {:.2}", report.f1);
        rows.push(AblationRow {
            mode,
            initial_loss: mean(&first),
            final_loss: mean(&last),
            report,
        });
    }
    let table = ablation_table(&rows);
    out.write("ablation.md", &table)?;
    print!("{table}");
    Ok(())
}
