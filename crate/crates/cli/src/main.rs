//! `dc2` command-line tool.
//!
//! Machine-readable results always go to files named on the command line;
//! logs go to standard error. Exit codes: 0 success, 1 usage or
//! configuration error, 2 backend failure, 3 dataset or input error.

use std::fmt;
use std::fs;
use std::io::IsTerminal;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand, ValueEnum};
use dc2::backend::{CallCounter, SharedBackend};
use dc2::combine::VisualMemory;
use dc2::config::{load_config, ConfigError, PipelineConfig};
use dc2::eval::{
    evaluate, load_dataset, sweep_theta, write_sweep_csv, Dc2Runner, EvalOptions, EvalReport, PlainRunner, Runner,
    REPORT_SCHEMA,
};
use dc2::inference::{Pipeline, PipelineError};
use dc2::raster::load_image;
use dc2::synth;
use serde_json::json;
use tracing::{info, warn};

#[derive(Parser)]
#[command(name = "dc2", version, about = "Divide, Conquer and Combine: high-resolution image question answering")]
struct Cli {
    /// More log output on standard error (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Divide, caption and combine an image; write its visual memory as JSON.
    Describe {
        #[arg(long)]
        image: PathBuf,
        /// Memory JSON output path.
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        pipeline: PipelineFlags,
    },
    /// Answer a free-form question about an image.
    Ask {
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        question: String,
        /// Reuse a memory written by `describe` or `--memory-out` instead of
        /// rebuilding it.
        #[arg(long, conflicts_with = "memory_out")]
        memory_in: Option<PathBuf>,
        /// Also write the built memory here.
        #[arg(long)]
        memory_out: Option<PathBuf>,
        /// Write the answer, retrieved hits and patch descriptions as JSON.
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        pipeline: PipelineFlags,
    },
    /// Evaluate a runner on a JSONL benchmark.
    Eval {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, value_enum, default_value_t = RunnerKind::Dc2)]
        runner: RunnerKind,
        /// Report JSON output path.
        #[arg(long)]
        out: PathBuf,
        /// Per-sample CSV output path.
        #[arg(long)]
        csv: Option<PathBuf>,
        #[command(flatten)]
        pipeline: PipelineFlags,
    },
    /// Measure throughput and accuracy of the full pipeline across θ values.
    Throughput {
        #[arg(long)]
        dataset: PathBuf,
        /// Comma-separated θ values.
        #[arg(long = "thetas", value_delimiter = ',', default_values_t = [0.1, 0.2, 0.3])]
        thetas: Vec<f64>,
        /// CSV output path (theta, throughput, accuracy, backend_calls).
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        pipeline: PipelineFlags,
    },
    /// Write a synthetic benchmark (images, dataset.jsonl, scenes.json) for
    /// the mock backend.
    Synth {
        #[arg(long, value_enum, default_value_t = SuiteKind::Hr)]
        suite: SuiteKind,
        #[arg(long, default_value_t = 20)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out_dir: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum RunnerKind {
    Dc2,
    Baseline,
    NoImage,
    TextOnly,
}

#[derive(Clone, Copy, ValueEnum)]
enum SuiteKind {
    Hr,
    Quadrant,
}

#[derive(Clone, Copy, ValueEnum)]
enum BackendArg {
    Http,
    Mock,
}

/// Flags shared by every pipeline command. Each one overrides the key of
/// the same name in the config file.
#[derive(Args)]
struct PipelineFlags {
    /// TOML config file, or a report JSON whose embedded config is reused.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    theta: Option<f64>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    max_depth: Option<u32>,
    #[arg(long)]
    patch_size: Option<u32>,
    #[arg(long)]
    top_k: Option<usize>,
    #[arg(long)]
    nms_threshold: Option<f64>,
    #[arg(long)]
    temperature: Option<f64>,
    #[arg(long, value_enum)]
    backend: Option<BackendArg>,
    #[arg(long)]
    base_url: Option<String>,
    #[arg(long)]
    model: Option<String>,
    #[arg(long)]
    concurrency: Option<usize>,
    #[arg(long)]
    cache_dir: Option<PathBuf>,
    /// Scenes JSON for the mock backend.
    #[arg(long)]
    mock_scenes: Option<PathBuf>,
    /// Any other config key, as KEY=VALUE (VALUE parsed as TOML, falling
    /// back to a string).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn usage(message: impl fmt::Display) -> Self {
        Self { code: 1, message: message.to_string() }
    }
    fn backend(message: impl fmt::Display) -> Self {
        Self { code: 2, message: message.to_string() }
    }
    fn data(message: impl fmt::Display) -> Self {
        Self { code: 3, message: message.to_string() }
    }
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        match e {
            ConfigError::Backend(_) => Failure::backend(e),
            _ => Failure::usage(e),
        }
    }
}

impl From<PipelineError> for Failure {
    fn from(e: PipelineError) -> Self {
        if e.is_backend_failure() {
            Failure::backend(e)
        } else {
            Failure::data(e)
        }
    }
}

type CmdResult = Result<(), Failure>;

fn toml_value(raw: &str) -> toml::Value {
    format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

/// Key/value pairs taken from a report's embedded config.
fn report_config(path: &Path) -> Result<Vec<(String, toml::Value)>, Failure> {
    let text = fs::read_to_string(path).map_err(|e| Failure::usage(format!("reading {}: {e}", path.display())))?;
    let value: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| Failure::usage(format!("{}: {e}", path.display())))?;
    let config =
        if value.get("schema").and_then(|s| s.as_str()) == Some(REPORT_SCHEMA) { &value["config"] } else { &value };
    let table = config
        .as_object()
        .ok_or_else(|| Failure::usage(format!("{}: expected a JSON object of config keys", path.display())))?;
    table
        .iter()
        .filter(|(_, v)| !v.is_null())
        .map(|(k, v)| {
            toml::Value::try_from(v).map(|v| (k.clone(), v)).map_err(|e| Failure::usage(format!("config key {k}: {e}")))
        })
        .collect()
}

impl PipelineFlags {
    fn overrides(&self) -> Result<Vec<(String, toml::Value)>, Failure> {
        use toml::Value as V;
        let mut out: Vec<(String, V)> = Vec::new();
        let mut put = |key: &str, value: Option<V>| {
            if let Some(v) = value {
                out.push((key.to_string(), v));
            }
        };
        put("theta", self.theta.map(V::Float));
        put("alpha", self.alpha.map(V::Float));
        put("max_depth", self.max_depth.map(|v| V::Integer(v.into())));
        put("patch_size", self.patch_size.map(|v| V::Integer(v.into())));
        put("top_k", self.top_k.map(|v| V::Integer(v as i64)));
        put("nms_threshold", self.nms_threshold.map(V::Float));
        put("temperature", self.temperature.map(V::Float));
        put(
            "backend",
            self.backend.map(|b| {
                V::String(
                    match b {
                        BackendArg::Http => "http",
                        BackendArg::Mock => "mock",
                    }
                    .into(),
                )
            }),
        );
        put("base_url", self.base_url.clone().map(V::String));
        put("model", self.model.clone().map(V::String));
        put("concurrency", self.concurrency.map(|v| V::Integer(v as i64)));
        put("cache_dir", self.cache_dir.as_ref().map(|p| V::String(p.display().to_string())));
        put("mock_scenes", self.mock_scenes.as_ref().map(|p| V::String(p.display().to_string())));
        for pair in &self.set {
            let (key, raw) =
                pair.split_once('=').ok_or_else(|| Failure::usage(format!("--set expects KEY=VALUE, got {pair:?}")))?;
            out.push((key.trim().to_string(), toml_value(raw.trim())));
        }
        Ok(out)
    }

    fn resolve(&self) -> Result<PipelineConfig, Failure> {
        let flags = self.overrides()?;
        let config = match &self.config {
            Some(path) if path.extension().is_some_and(|e| e == "json") => {
                let mut all = report_config(path)?;
                all.extend(flags);
                load_config(None, &all)?
            }
            file => load_config(file.as_deref(), &flags)?,
        };
        info!(?config, "resolved configuration");
        Ok(config)
    }
}

fn pipeline(config: &PipelineConfig, backend: SharedBackend) -> Result<Pipeline, Failure> {
    Ok(Pipeline::new(backend, config.prompts()?, config.model_settings(), config.pipeline_params()))
}

fn image_id(path: &Path) -> String {
    path.file_stem().map_or_else(|| "image".into(), |s| s.to_string_lossy().into_owned())
}

fn write_file(path: &Path, contents: &str) -> CmdResult {
    fs::write(path, contents).map_err(|e| Failure::usage(format!("writing {}: {e}", path.display())))
}

fn describe(image: &Path, out: &Path, flags: &PipelineFlags) -> CmdResult {
    let config = flags.resolve()?;
    let pipeline = pipeline(&config, config.build_backend()?)?;
    let raster = load_image(image).map_err(|e| Failure::data(format!("{}: {e}", image.display())))?;
    let (tree, memory) = pipeline.build_memory(&image_id(image), &raster)?;
    memory.save(out).map_err(|e| Failure::usage(format!("writing {}: {e}", out.display())))?;
    eprintln!("{} patches, {} memory records -> {}", tree.node_count(), memory.len(), out.display());
    Ok(())
}

struct AskArgs<'a> {
    image: &'a Path,
    question: &'a str,
    memory_in: Option<&'a Path>,
    memory_out: Option<&'a Path>,
    out: Option<&'a Path>,
}

fn ask(args: AskArgs, flags: &PipelineFlags) -> CmdResult {
    let config = flags.resolve()?;
    let pipeline = pipeline(&config, config.build_backend()?)?;
    let raster = load_image(args.image).map_err(|e| Failure::data(format!("{}: {e}", args.image.display())))?;
    let memory = match args.memory_in {
        Some(path) => {
            let memory = VisualMemory::load(path).map_err(|e| Failure::data(format!("{}: {e}", path.display())))?;
            if memory.root_size() != raster.dimensions() {
                return Err(Failure::data(format!(
                    "memory {} was built for a {:?} image, {} is {:?}",
                    path.display(),
                    memory.root_size(),
                    args.image.display(),
                    raster.dimensions()
                )));
            }
            memory
        }
        None => pipeline.build_memory(&image_id(args.image), &raster)?.1,
    };
    if let Some(path) = args.memory_out {
        memory.save(path).map_err(|e| Failure::usage(format!("writing {}: {e}", path.display())))?;
    }
    let output = pipeline.answer_with_memory(Arc::new(memory), &raster, args.question, args.question, false)?;
    if let Some(path) = args.out {
        let doc = json!({
            "question": args.question,
            "answer": output.response.text,
            "hits": output.hits,
            "patch_descriptions": output.aux_text,
        });
        write_file(path, &serde_json::to_string_pretty(&doc).expect("JSON value"))?;
    }
    println!("{}", output.response.text);
    Ok(())
}

fn config_echo(config: &PipelineConfig) -> serde_json::Value {
    serde_json::to_value(config).expect("config serializes")
}

fn eval(dataset: &Path, kind: RunnerKind, out: &Path, csv: Option<&Path>, flags: &PipelineFlags) -> CmdResult {
    let config = flags.resolve()?;
    let entries = load_dataset(dataset).map_err(Failure::data)?;
    let runner: Box<dyn Runner> = match kind {
        RunnerKind::Dc2 => Box::new(Dc2Runner::new(pipeline(&config, config.build_backend()?)?)),
        RunnerKind::Baseline => Box::new(PlainRunner::baseline(pipeline(&config, config.build_backend()?)?)),
        RunnerKind::NoImage => Box::new(PlainRunner::no_image(pipeline(&config, config.build_backend()?)?)),
        RunnerKind::TextOnly => {
            let p = Pipeline::new(
                config.build_text_backend()?,
                config.prompts()?,
                config.text_model_settings(),
                config.pipeline_params(),
            );
            Box::new(PlainRunner::text_only(p))
        }
    };
    let report =
        evaluate(&entries, runner.as_ref(), EvalOptions { concurrency: config.concurrency }, config_echo(&config));
    report.write_json(out).map_err(Failure::usage)?;
    if let Some(path) = csv {
        report.write_csv(path).map_err(Failure::usage)?;
    }
    summarize(&report);
    if report.samples > 0 && report.failed == report.samples {
        return Err(Failure::backend(format!(
            "every sample failed; first error: {}",
            report.rows.iter().find_map(|r| r.error.clone()).unwrap_or_default()
        )));
    }
    Ok(())
}

fn summarize(report: &EvalReport) {
    eprintln!(
        "{}: {} samples ({} failed), ACC {:.4}, {:.2} samples/min",
        report.runner, report.samples, report.failed, report.overall_acc, report.throughput_spm
    );
    for (name, value) in
        [("FSP", report.fsp_acc), ("FCP", report.fcp_acc), ("Recall@2", report.recall_at_2), ("mIoU", report.miou)]
    {
        if let Some(v) = value {
            eprintln!("  {name}: {v:.4}");
        }
    }
}

fn throughput(dataset: &Path, thetas: &[f64], out: &Path, flags: &PipelineFlags) -> CmdResult {
    let config = flags.resolve()?;
    if thetas.is_empty() {
        return Err(Failure::usage("--thetas needs at least one value"));
    }
    for &theta in thetas {
        let mut probe = config.clone();
        probe.theta = theta;
        probe.validate()?;
    }
    if config.cache_dir.is_some() {
        warn!("a response cache makes later θ values look faster; consider running without cache_dir");
    }
    let entries = load_dataset(dataset).map_err(Failure::data)?;
    let backend = config.build_backend()?;
    let prompts = config.prompts()?;
    let build = |theta: f64| -> (Box<dyn Runner>, Arc<CallCounter>) {
        let counter = Arc::new(CallCounter::new(backend.clone()));
        let mut c = config.clone();
        c.theta = theta;
        let p = Pipeline::new(counter.clone(), prompts.clone(), c.model_settings(), c.pipeline_params());
        (Box::new(Dc2Runner::new(p)), counter)
    };
    let points = sweep_theta(&entries, thetas, EvalOptions { concurrency: config.concurrency }, &build);
    write_sweep_csv(&points, out).map_err(Failure::usage)?;
    for p in &points {
        eprintln!(
            "θ={}: {:.2} samples/min, ACC {:.4}, {} backend calls",
            p.theta, p.throughput, p.accuracy, p.backend_calls
        );
    }
    Ok(())
}

fn synth_suite(suite: SuiteKind, count: usize, seed: u64, out_dir: &Path) -> CmdResult {
    let cases = match suite {
        SuiteKind::Hr => synth::hr_suite(seed, count),
        SuiteKind::Quadrant => synth::quadrant_suite(seed, count),
    };
    let dataset =
        synth::write_suite(&cases, out_dir).map_err(|e| Failure::usage(format!("{}: {e}", out_dir.display())))?;
    eprintln!("{count} samples -> {} (scenes: {})", dataset.display(), out_dir.join("scenes.json").display());
    Ok(())
}

fn init_logging(verbose: u8) {
    let default = match verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    let filter = tracing_subscriber::EnvFilter::try_from_default_env()
        .unwrap_or_else(|_| tracing_subscriber::EnvFilter::new(default));
    tracing_subscriber::fmt()
        .with_env_filter(filter)
        .with_writer(std::io::stderr)
        .with_ansi(std::io::stderr().is_terminal())
        .init();
}

fn run(cli: Cli) -> CmdResult {
    match &cli.command {
        Command::Describe { image, out, pipeline } => describe(image, out, pipeline),
        Command::Ask { image, question, memory_in, memory_out, out, pipeline } => ask(
            AskArgs {
                image,
                question,
                memory_in: memory_in.as_deref(),
                memory_out: memory_out.as_deref(),
                out: out.as_deref(),
            },
            pipeline,
        ),
        Command::Eval { dataset, runner, out, csv, pipeline } => eval(dataset, *runner, out, csv.as_deref(), pipeline),
        Command::Throughput { dataset, thetas, out, pipeline } => throughput(dataset, thetas, out, pipeline),
        Command::Synth { suite, count, seed, out_dir } => synth_suite(*suite, *count, *seed, out_dir),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    init_logging(cli.verbose);
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use dc2::config::BackendKind;

    #[test]
    fn set_values_parse_as_toml() {
        assert_eq!(toml_value("0.25"), toml::Value::Float(0.25));
        assert_eq!(toml_value("7"), toml::Value::Integer(7));
        assert_eq!(toml_value("\"x\""), toml::Value::String("x".into()));
        assert_eq!(toml_value("llava-1.5"), toml::Value::String("llava-1.5".into()));
    }

    #[test]
    fn cli_definition_is_consistent() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }

    #[test]
    fn backend_flag_maps_to_config() {
        let cli = Cli::try_parse_from([
            "dc2",
            "describe",
            "--image",
            "a.png",
            "--out",
            "m.json",
            "--backend",
            "mock",
            "--theta",
            "0.3",
        ])
        .unwrap();
        let Command::Describe { pipeline, .. } = cli.command else { panic!() };
        let config = pipeline.resolve().ok().unwrap();
        assert_eq!(config.backend, BackendKind::Mock);
        assert_eq!(config.theta, 0.3);
    }
}
