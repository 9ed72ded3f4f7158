use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use gct_core::config::{self, parse_override, ExperimentConfig, TaskId};
use gct_core::data::{load_or_generate, Ratio};
use gct_core::experiment;
use gct_core::metrics::{flawmap_from_images, report, write_curves_svg, ImageEncoding};

/// Named flags, collected as `key=value` override strings.
#[derive(Default)]
struct Overrides(Vec<String>);

impl Overrides {
    fn string(&mut self, key: &str, value: &str) {
        let quoted = value.replace('\\', "\\\\").replace('"', "\\\"");
        self.0.push(format!("{key}=\"{quoted}\""));
    }

    fn int(&mut self, key: &str, value: i64) {
        self.0.push(format!("{key}={value}"));
    }

    fn into_tables(self) -> Result<Vec<config::Table>> {
        self.0.iter().map(|s| Ok(parse_override(s)?)).collect()
    }
}

#[derive(Parser)]
#[command(name = "gct", version, about = "Train and compare semi-supervised dense-prediction methods on synthetic tasks")]
struct Cli {
    /// Single-threaded, bit-reproducible execution (same as GCT_DETERMINISTIC=1).
    #[arg(long, global = true)]
    deterministic: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one run and write its directory.
    Train(TrainArgs),
    /// Evaluate a stored checkpoint on the validation set.
    Eval {
        #[arg(long)]
        run: PathBuf,
        /// Defaults to the run's best.ckpt.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Aggregate finished runs into a comparison table.
    Report {
        /// Run directories, or directories containing run directories.
        #[arg(long, num_args = 1.., required = true)]
        runs: Vec<PathBuf>,
        #[arg(long, default_value = "report.txt")]
        out: PathBuf,
        #[arg(long, value_enum, default_value_t = Format::Text)]
        format: Format,
        /// Also plot validation curves to this SVG file.
        #[arg(long)]
        curves: Option<PathBuf>,
    },
    /// Flaw map of a prediction image against a label image, or the
    /// predicted and ground-truth flaw maps of a trained run.
    Flawmap {
        /// Run directory; `--out` is then a directory of PNG files.
        #[arg(long, required_unless_present = "pred", conflicts_with_all = ["pred", "label"])]
        run: Option<PathBuf>,
        /// Prediction image: class indices for segmentation, RGB for denoising.
        #[arg(long, requires = "label")]
        pred: Option<PathBuf>,
        #[arg(long, requires = "pred")]
        label: Option<PathBuf>,
        /// Task whose pipeline settings apply to `--pred`/`--label`.
        #[arg(long, default_value = "synth_seg")]
        task: String,
        #[arg(long)]
        out: PathBuf,
        /// Validation images per model when reading a run.
        #[arg(long, default_value_t = 4)]
        count: usize,
    },
    /// Write the labeled/unlabeled split of a configuration.
    MakeSplit {
        #[command(flatten)]
        exp: ExpArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate the datasets of a configuration into a cache directory.
    GenData {
        #[command(flatten)]
        exp: ExpArgs,
        #[arg(long)]
        cache_dir: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Text,
    Csv,
    Tsv,
}

/// Values that select and override an experiment configuration.
#[derive(Args)]
struct ExpArgs {
    /// TOML experiment file; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    preset: Option<String>,
    #[arg(long)]
    method: Option<String>,
    #[arg(long)]
    task: Option<String>,
    #[arg(long)]
    ratio: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Override any key, e.g. `--set ssl.xi=0.4`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    exp: ExpArgs,
    #[arg(long)]
    output_dir: Option<PathBuf>,
    /// Fixed epoch count instead of the sample-count rule.
    #[arg(long)]
    epochs: Option<u32>,
}

impl ExpArgs {
    fn resolve(&self, extra: Overrides) -> Result<ExperimentConfig> {
        let file = match &self.config {
            Some(p) => Some(std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?),
            None => None,
        };
        let mut layers = Vec::new();
        for s in &self.set {
            layers.push(parse_override(s)?);
        }
        let mut named = Overrides::default();
        if let Some(t) = &self.task {
            t.parse::<TaskId>()?;
            named.string("task", t);
        }
        if let Some(p) = &self.preset {
            named.string("preset", p);
        }
        if let Some(m) = &self.method {
            named.string("method", m);
        }
        if let Some(r) = &self.ratio {
            r.parse::<Ratio>()?;
            named.string("ratio", r);
        }
        if let Some(s) = self.seed {
            named.int("seed", s as i64);
        }
        layers.extend(named.into_tables()?);
        layers.extend(extra.into_tables()?);
        Ok(ExperimentConfig::resolve(file.as_deref(), &layers)?)
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(d) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(d).with_context(|| format!("creating {}", d.display()))?;
    }
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn train(args: &TrainArgs) -> Result<()> {
    let mut extra = Overrides::default();
    if let Some(d) = &args.output_dir {
        extra.string("output_dir", &d.to_string_lossy());
    }
    if let Some(e) = args.epochs {
        extra.int("training.epochs", e as i64);
    }
    let cfg = args.exp.resolve(extra)?;
    let dir = cfg.run_dir();
    let outcome = experiment::run(&cfg, Some(&dir))?;
    let r = &outcome.report;
    println!(
        "{} {} best {:.4} final {:.4} samples {}",
        dir.display(),
        r.metric.name(),
        r.best_metric,
        r.final_metric,
        r.samples_seen
    );
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train(args) => train(&args),
        Command::Eval { run, checkpoint } => {
            let cfg = experiment::load_run_config(&run)?;
            let m = experiment::evaluate_run(&run, checkpoint.as_deref())?;
            println!("{} {:.6}", cfg.task_spec().metric.name(), m);
            Ok(())
        }
        Command::Report {
            runs,
            out,
            format,
            curves,
        } => {
            let reports = experiment::collect_reports(&runs)?;
            let table = report(&reports)?;
            let text = match format {
                Format::Text => table.to_text(),
                Format::Csv => table.to_delimited(','),
                Format::Tsv => table.to_delimited('\t'),
            };
            write_text(&out, &text)?;
            if let Some(svg) = curves {
                write_curves_svg(&svg, &reports)?;
            }
            print!("{text}");
            Ok(())
        }
        Command::Flawmap {
            run: Some(run),
            out,
            count,
            ..
        } => {
            if count == 0 {
                bail!("--count must be at least 1");
            }
            let files = experiment::dump_run_flawmaps(&run, &out, count)?;
            println!("wrote {} images to {}", files.len(), out.display());
            Ok(())
        }
        Command::Flawmap {
            pred, label, task, out, ..
        } => {
            let (Some(pred), Some(label)) = (pred, label) else {
                bail!("--pred and --label are required without --run");
            };
            let task: TaskId = task.parse()?;
            let mut named = Overrides::default();
            named.string("task", task.id());
            let cfg = ExperimentConfig::resolve(None, &named.into_tables()?)?;
            let encoding = match task {
                TaskId::SynthSeg => ImageEncoding::ClassIndex {
                    classes: cfg.data.classes,
                },
                TaskId::SynthDenoise => ImageEncoding::Rgb,
            };
            let map = flawmap_from_images(&pred, &label, &out, &cfg.pipeline, encoding)?;
            println!("{} {}x{} max {:.4}", out.display(), map.width(), map.height(), map.max());
            Ok(())
        }
        Command::MakeSplit { exp, out } => {
            let cfg = exp.resolve(Overrides::default())?;
            let manifest = experiment::split_for(&cfg)?;
            manifest.save(&out)?;
            println!(
                "{}: {} labeled, {} unlabeled",
                out.display(),
                manifest.labeled_ids.len(),
                manifest.unlabeled_ids.len()
            );
            Ok(())
        }
        Command::GenData { exp, cache_dir } => {
            let cfg = exp.resolve(Overrides::default())?;
            for spec in [cfg.train_spec(), cfg.val_spec()] {
                let ds = load_or_generate(&spec, Some(&cache_dir))?;
                println!("{} {} samples", spec.name(), ds.len());
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if cli.deterministic || config::deterministic_requested() {
        config::enable_deterministic_mode();
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
