//! Command-line surface: `generate`, `trace`, `ablate` and `schedules`.
//!
//! Exit codes: 0 success, 1 generation failure, 2 invalid config or
//! usage (including empty prompt lists), 3 I/O failure.

use std::ffi::OsString;
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};
use image::{Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use crate::analysis::{
    ablation_grid, run_id, schedule_grid, trace_generation, write_ablation_csv, write_schedule_csv,
    write_trace_csv,
};
use crate::config::{
    validate_config, ConfigDocument, ConfigError, GenerationConfig, InterventionConfig,
};
use crate::engine::{Generation, Generator};
use crate::error::Error;
use crate::interventions::ScheduleKind;
use crate::metrics::MetricSuite;
use crate::types::ImageBatch;

pub const EXIT_OK: i32 = 0;
pub const EXIT_GENERATION: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_IO: i32 = 3;

pub const SEED_ENV: &str = "SCALESTYLE_SEED";
pub const GRID_GUTTER: u32 = 2;

#[derive(Parser, Debug)]
#[command(
    name = "scalestyle",
    version,
    about = "Style-aligned batch generation with next-scale prediction"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate one style-aligned batch: PNG per prompt, a grid and a manifest.
    Generate(GenerateArgs),
    /// Generate and record per-step similarity to the final output.
    Trace {
        #[command(flatten)]
        generate: GenerateArgs,
        #[arg(long)]
        trace_out: PathBuf,
    },
    /// Nested intervention ablation over prompt sets and seeds.
    Ablate(GridArgs),
    /// Compare injection schedules over prompt sets and seeds.
    Schedules {
        #[command(flatten)]
        grid: GridArgs,
        /// Comma-separated schedule names.
        #[arg(
            long,
            value_delimiter = ',',
            default_value = "ours,constant,linear,concave_up,concave_down,cosine"
        )]
        kinds: Vec<String>,
    },
}

#[derive(Args, Debug)]
struct GenerateArgs {
    /// A prompt; repeat for each image in the batch.
    #[arg(long = "prompts", conflicts_with = "from_manifest")]
    prompts: Vec<String>,
    /// File with one prompt per line.
    #[arg(long, conflicts_with = "from_manifest")]
    prompts_file: Option<PathBuf>,
    /// JSON config with optional `generation` and `intervention` sections.
    #[arg(long, conflicts_with = "from_manifest")]
    config: Option<PathBuf>,
    /// Rerun the configs and prompts recorded in a manifest.
    #[arg(long)]
    from_manifest: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Turn off all three interventions.
    #[arg(long)]
    no_interventions: bool,
    /// Omit wall-clock fields so reruns write byte-equal manifests.
    #[arg(long)]
    reproducible: bool,
}

#[derive(Args, Debug)]
struct GridArgs {
    /// Number of seeds, starting at the config seed.
    #[arg(long)]
    seeds: usize,
    /// File with one prompt set per line, prompts separated by `|`.
    #[arg(long)]
    prompt_sets: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

/// Process environment the commands read, passed in so tests can set it.
#[derive(Clone, Debug, Default)]
pub struct Env {
    pub seed: Option<String>,
    pub source_date_epoch: Option<String>,
}

impl Env {
    pub fn from_process() -> Self {
        Env {
            seed: std::env::var(SEED_ENV).ok(),
            source_date_epoch: std::env::var("SOURCE_DATE_EPOCH").ok(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub run_id: String,
    /// Unix seconds.
    pub timestamp: u64,
    pub generation: GenerationConfig,
    pub intervention: InterventionConfig,
    pub prompts: Vec<String>,
    /// Image file names relative to the manifest's directory.
    pub outputs: Vec<String>,
    pub grid: String,
    /// Wall-clock seconds of the batch divided by its size; absent in reproducible runs.
    pub per_image_seconds: Option<f64>,
}

#[derive(Debug)]
enum CliError {
    Usage(String),
    Config(Vec<ConfigError>),
    Generation(Error),
    Io(String),
}

impl CliError {
    fn code(&self) -> i32 {
        match self {
            CliError::Usage(_) | CliError::Config(_) => EXIT_USAGE,
            CliError::Generation(_) => EXIT_GENERATION,
            CliError::Io(_) => EXIT_IO,
        }
    }

    fn io(path: &Path, err: impl fmt::Display) -> Self {
        CliError::Io(format!("{}: {err}", path.display()))
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(msg) => write!(f, "error: {msg}"),
            CliError::Config(errors) => {
                writeln!(f, "error: invalid config")?;
                for e in errors {
                    writeln!(f, "  - {e}")?;
                }
                Ok(())
            }
            CliError::Generation(e) => write!(f, "error: generation failed: {e}"),
            CliError::Io(msg) => write!(f, "error: {msg}"),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::InvalidConfig(errors) => CliError::Config(errors),
            Error::Config(msg) | Error::Input(msg) => CliError::Usage(msg),
            other => CliError::Generation(other),
        }
    }
}

/// Parses `args` (program name first), runs the command and returns its exit code.
pub fn run<I, T>(args: I, env: &Env, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let rendered = e.render().to_string();
            let _ = if e.use_stderr() {
                write!(stderr, "{rendered}")
            } else {
                write!(stdout, "{rendered}")
            };
            return code;
        }
    };
    let result = match cli.command {
        Command::Generate(args) => cmd_generate(&args, None, env, stdout),
        Command::Trace {
            generate,
            trace_out,
        } => cmd_generate(&generate, Some(&trace_out), env, stdout),
        Command::Ablate(args) => cmd_ablate(&args, env, stdout),
        Command::Schedules { grid, kinds } => cmd_schedules(&grid, &kinds, env, stdout),
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(e) => {
            let _ = writeln!(stderr, "{e}");
            e.code()
        }
    }
}

fn read_text(path: &Path) -> Result<String, CliError> {
    fs::read_to_string(path).map_err(|e| CliError::io(path, e))
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    fs::write(path, bytes).map_err(|e| CliError::io(path, e))
}

fn create_dir(path: &Path) -> Result<(), CliError> {
    fs::create_dir_all(path).map_err(|e| CliError::io(path, e))
}

/// Config file (or defaults) with the seed override applied, validated.
fn load_config(
    path: Option<&Path>,
    env: &Env,
) -> Result<(GenerationConfig, InterventionConfig), CliError> {
    let mut doc = match path {
        Some(p) => ConfigDocument::from_json(&read_text(p)?)
            .map_err(|e| CliError::Usage(format!("{}: {e}", p.display())))?,
        None => ConfigDocument::default(),
    };
    if let Some(raw) = &env.seed {
        doc.generation.seed = raw.trim().parse().map_err(|_| {
            CliError::Usage(format!("{SEED_ENV} is not an unsigned integer: {raw:?}"))
        })?;
    }
    validate_config(doc.generation, doc.intervention).map_err(CliError::Config)
}

fn parse_prompt_lines(text: &str) -> Vec<String> {
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(String::from)
        .collect()
}

pub fn parse_prompt_sets(text: &str) -> Vec<Vec<String>> {
    parse_prompt_lines(text)
        .iter()
        .map(|line| {
            line.split('|')
                .map(str::trim)
                .filter(|p| !p.is_empty())
                .map(String::from)
                .collect()
        })
        .collect()
}

struct Job {
    generation: GenerationConfig,
    intervention: InterventionConfig,
    prompts: Vec<String>,
}

fn resolve_job(args: &GenerateArgs, env: &Env) -> Result<Job, CliError> {
    let mut job = if let Some(path) = &args.from_manifest {
        let manifest: RunManifest = serde_json::from_str(&read_text(path)?)
            .map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
        let (generation, intervention) =
            validate_config(manifest.generation, manifest.intervention)
                .map_err(CliError::Config)?;
        Job {
            generation,
            intervention,
            prompts: manifest.prompts,
        }
    } else {
        let (generation, intervention) = load_config(args.config.as_deref(), env)?;
        let mut prompts: Vec<String> = args
            .prompts
            .iter()
            .map(|p| p.trim().to_string())
            .filter(|p| !p.is_empty())
            .collect();
        if let Some(path) = &args.prompts_file {
            prompts.extend(parse_prompt_lines(&read_text(path)?));
        }
        Job {
            generation,
            intervention,
            prompts,
        }
    };
    if job.prompts.is_empty() {
        return Err(CliError::Usage("no prompts given".into()));
    }
    if args.no_interventions {
        job.intervention = job.intervention.disabled();
    }
    Ok(job)
}

fn timestamp(env: &Env, reproducible: bool) -> u64 {
    if reproducible {
        env.source_date_epoch
            .as_deref()
            .and_then(|s| s.trim().parse().ok())
            .unwrap_or(0)
    } else {
        SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0)
    }
}

fn rgb_image(images: &ImageBatch, n: usize) -> RgbImage {
    RgbImage::from_raw(
        images.width() as u32,
        images.height() as u32,
        images.to_rgb8(n),
    )
    .expect("buffer matches image size")
}

/// Images left to right, separated by a white gutter.
pub fn grid_image(images: &ImageBatch) -> RgbImage {
    let (w, h) = (images.width() as u32, images.height() as u32);
    let n = images.len() as u32;
    let mut grid = RgbImage::from_pixel(n * w + (n - 1) * GRID_GUTTER, h, Rgb([255, 255, 255]));
    for i in 0..n {
        let tile = rgb_image(images, i as usize);
        image::imageops::replace(&mut grid, &tile, (i * (w + GRID_GUTTER)) as i64, 0);
    }
    grid
}

fn save_png(img: &RgbImage, path: &Path) -> Result<(), CliError> {
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| CliError::io(path, e))
}

#[derive(Serialize)]
struct RunIdentity<'a> {
    generation: &'a GenerationConfig,
    intervention: &'a InterventionConfig,
    prompts: &'a [String],
}

fn cmd_generate(
    args: &GenerateArgs,
    trace_out: Option<&Path>,
    env: &Env,
    stdout: &mut dyn Write,
) -> Result<(), CliError> {
    let job = resolve_job(args, env)?;
    if trace_out.is_some() && job.prompts.len() < 2 {
        return Err(CliError::Usage("tracing needs at least 2 prompts".into()));
    }
    let generator = Generator::new(&job.generation)?;
    let start = Instant::now();
    let run: Generation =
        generator.generate(&job.prompts, &job.intervention, trace_out.is_some())?;
    let per_image = start.elapsed().as_secs_f64() / job.prompts.len() as f64;

    create_dir(&args.out)?;
    let mut outputs = Vec::with_capacity(job.prompts.len());
    for n in 0..run.images.len() {
        let name = format!("image_{}.png", n + 1);
        save_png(&rgb_image(&run.images, n), &args.out.join(&name))?;
        outputs.push(name);
    }
    let grid = "grid.png".to_string();
    save_png(&grid_image(&run.images), &args.out.join(&grid))?;

    if let Some(path) = trace_out {
        let traces = trace_generation(
            &generator,
            &run,
            job.intervention.anchor_index,
            &MetricSuite::default(),
        )?;
        let mut buf = Vec::new();
        write_trace_csv(&traces, &mut buf).expect("writing to memory");
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            create_dir(parent)?;
        }
        write_bytes(path, &buf)?;
    }

    let manifest = RunManifest {
        run_id: run_id(&RunIdentity {
            generation: &job.generation,
            intervention: &job.intervention,
            prompts: &job.prompts,
        }),
        timestamp: timestamp(env, args.reproducible),
        generation: job.generation,
        intervention: job.intervention,
        prompts: job.prompts,
        outputs,
        grid,
        per_image_seconds: (!args.reproducible).then_some(per_image),
    };
    let mut json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    json.push('\n');
    write_bytes(&args.out.join("manifest.json"), json.as_bytes())?;

    let _ = writeln!(
        stdout,
        "wrote {} images to {}",
        manifest.outputs.len(),
        args.out.display()
    );
    let _ = writeln!(stdout, "per-image seconds: {per_image:.3}");
    Ok(())
}

struct GridJob {
    generation: GenerationConfig,
    intervention: InterventionConfig,
    prompt_sets: Vec<Vec<String>>,
    seeds: Vec<u64>,
}

fn resolve_grid(args: &GridArgs, env: &Env) -> Result<GridJob, CliError> {
    if args.seeds == 0 {
        return Err(CliError::Usage("--seeds must be at least 1".into()));
    }
    let (generation, intervention) = load_config(args.config.as_deref(), env)?;
    let prompt_sets = parse_prompt_sets(&read_text(&args.prompt_sets)?);
    if prompt_sets.is_empty() {
        return Err(CliError::Usage("no prompt sets given".into()));
    }
    let base = generation.seed;
    let seeds = (0..args.seeds as u64)
        .map(|k| {
            base.checked_add(k)
                .ok_or_else(|| CliError::Usage("seed range overflows u64".into()))
        })
        .collect::<Result<_, _>>()?;
    Ok(GridJob {
        generation,
        intervention,
        prompt_sets,
        seeds,
    })
}

#[derive(Serialize)]
struct GridIdentity<'a> {
    command: &'a str,
    generation: &'a GenerationConfig,
    intervention: &'a InterventionConfig,
    prompt_sets: &'a [Vec<String>],
    seeds: &'a [u64],
    kinds: &'a [ScheduleKind],
}

fn write_grid_outputs<T: Serialize>(
    out: &Path,
    stem: &str,
    csv: &[u8],
    rows: &T,
    stdout: &mut dyn Write,
) -> Result<(), CliError> {
    create_dir(out)?;
    let csv_path = out.join(format!("{stem}.csv"));
    write_bytes(&csv_path, csv)?;
    let mut json = serde_json::to_string_pretty(rows).expect("summary serializes");
    json.push('\n');
    write_bytes(&out.join(format!("{stem}.json")), json.as_bytes())?;
    let _ = stdout.write_all(csv);
    let _ = writeln!(stdout, "wrote {}", csv_path.display());
    Ok(())
}

fn cmd_ablate(args: &GridArgs, env: &Env, stdout: &mut dyn Write) -> Result<(), CliError> {
    let job = resolve_grid(args, env)?;
    let rows = ablation_grid(
        &job.prompt_sets,
        &job.seeds,
        &job.generation,
        &job.intervention,
        &MetricSuite::default(),
    )?;
    let id = run_id(&GridIdentity {
        command: "ablate",
        generation: &job.generation,
        intervention: &job.intervention,
        prompt_sets: &job.prompt_sets,
        seeds: &job.seeds,
        kinds: &[],
    });
    let mut csv = Vec::new();
    write_ablation_csv(&rows, &mut csv).expect("writing to memory");
    write_grid_outputs(&args.out, &format!("ablation_{id}"), &csv, &rows, stdout)
}

fn cmd_schedules(
    args: &GridArgs,
    kinds: &[String],
    env: &Env,
    stdout: &mut dyn Write,
) -> Result<(), CliError> {
    let kinds = kinds
        .iter()
        .map(|k| k.trim().parse::<ScheduleKind>())
        .collect::<Result<Vec<_>, _>>()?;
    let job = resolve_grid(args, env)?;
    let rows = schedule_grid(
        &job.prompt_sets,
        &job.seeds,
        &job.generation,
        &job.intervention,
        &kinds,
        &MetricSuite::default(),
    )?;
    let id = run_id(&GridIdentity {
        command: "schedules",
        generation: &job.generation,
        intervention: &job.intervention,
        prompt_sets: &job.prompt_sets,
        seeds: &job.seeds,
        kinds: &kinds,
    });
    let mut csv = Vec::new();
    write_schedule_csv(&rows, &mut csv).expect("writing to memory");
    write_grid_outputs(&args.out, &format!("schedules_{id}"), &csv, &rows, stdout)
}
