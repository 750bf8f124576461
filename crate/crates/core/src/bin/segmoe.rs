use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use segmoe::data::load_csv;
use segmoe::descriptors::dump_prompts;
use segmoe::experiment::{
    ablation_run, evaluate_linear, evaluate_model, evaluate_persistence, promotion_run, run,
    showcase, sweep_run, Prepared, SweepAxis,
};
use segmoe::model::gradcheck::run_standard;
use segmoe::synth::{SynthKind, SynthSpec};
use segmoe::{Checkpoint, Error, Result, RunConfig};

#[derive(Parser)]
#[command(name = "segmoe", version, about = "Segment-prompt fusion forecaster")]
struct Cli {
    /// Worker threads (defaults to all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct RunArgs {
    /// ETT-format CSV.
    #[arg(long)]
    data: PathBuf,
    /// Flat `key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// `key=value` override, repeatable. Applied after the config file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Parent of the per-run output directory.
    #[arg(long, default_value = "runs")]
    out: PathBuf,
    /// Print a text table of the report.
    #[arg(long)]
    table: bool,
    /// Write plot-ready CSV next to the report.
    #[arg(long)]
    plot_data: bool,
}

impl RunArgs {
    fn resolve(&self) -> Result<RunConfig> {
        let mut overrides = self.overrides.clone();
        if let Some(s) = self.seed {
            overrides.push(format!("seed={s}"));
        }
        RunConfig::resolve(self.config.as_deref(), &overrides)
    }

    fn name(&self) -> String {
        self.data
            .file_stem()
            .map_or_else(|| "data".into(), |s| s.to_string_lossy().into_owned())
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic series as CSV.
    Synth {
        #[arg(long, default_value = "sine")]
        kind: String,
        #[arg(long, default_value_t = 2000)]
        length: usize,
        #[arg(long, default_value_t = 1)]
        channels: usize,
        #[arg(long, default_value_t = 24)]
        period: usize,
        #[arg(long, default_value_t = 96)]
        block: usize,
        #[arg(long, default_value_t = 1.0)]
        amplitude: f64,
        #[arg(long, default_value_t = 0.0)]
        noise: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one model and evaluate it on the test split.
    Train(RunArgs),
    /// Evaluate a checkpoint (and the baselines) on the test split.
    Evaluate {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Train the four ablation variants for each seed.
    Ablate {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, value_delimiter = ',', default_value = "1,2,3")]
        seeds: Vec<u64>,
    },
    /// Single expert against the mixture for several hidden widths.
    Promote {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, value_delimiter = ',', default_value = "32,64,128")]
        sizes: Vec<usize>,
        #[arg(long, value_delimiter = ',', default_value = "1")]
        seeds: Vec<u64>,
    },
    /// One run per value of a hyperparameter.
    Sweep {
        #[command(flatten)]
        run: RunArgs,
        /// hidden_dim, input_len or segment_len.
        #[arg(long)]
        axis: String,
        #[arg(long, value_delimiter = ',')]
        values: Vec<usize>,
    },
    /// Check analytic gradients against finite differences.
    Gradcheck {
        #[arg(long, default_value_t = 7)]
        seed: u64,
    },
    /// Print the prompts of one context window as JSON lines.
    DumpPrompts {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        #[arg(long, default_value_t = 0)]
        channel: usize,
        /// First row of the window.
        #[arg(long, default_value_t = 0)]
        row: usize,
        /// Window length (defaults to context_len).
        #[arg(long)]
        length: Option<usize>,
    },
}

fn write(path: &Path, contents: &[u8]) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write(path, text.as_bytes())
}

/// Creates `<root>/<hash>` and records the resolved config in it.
fn run_dir(root: &Path, command: &str, cfg: &RunConfig) -> Result<PathBuf> {
    let dir = root.join(format!("{command}-{}", cfg.content_hash()));
    fs::create_dir_all(&dir).map_err(|e| Error::Io {
        path: dir.clone(),
        source: e,
    })?;
    write(&dir.join("config.txt"), cfg.to_text().as_bytes())?;
    Ok(dir)
}

fn prepare(args: &RunArgs, cfg: &RunConfig) -> Result<Prepared> {
    Prepared::new(&args.name(), load_csv(&args.data)?, cfg)
}

fn execute(cli: Cli) -> Result<bool> {
    if let Some(j) = cli.jobs {
        rayon::ThreadPoolBuilder::new()
            .num_threads(j.max(1))
            .build_global()
            .map_err(|e| Error::Config(e.to_string()))?;
    }
    match cli.command {
        Command::Synth {
            kind,
            length,
            channels,
            period,
            block,
            amplitude,
            noise,
            seed,
            out,
        } => {
            let spec = SynthSpec {
                kind: kind.parse::<SynthKind>()?,
                length,
                channels,
                period,
                block,
                amplitude,
                noise,
                seed,
                ..SynthSpec::default()
            };
            spec.generate()?.write_csv(&out)?;
            println!("{}", out.display());
        }
        Command::Train(args) => {
            let cfg = args.resolve()?;
            let prepared = prepare(&args, &cfg)?;
            let out = run(&prepared, &cfg)?;
            let dir = run_dir(&args.out, "train", &cfg)?;
            write_json(&dir.join("run_record.json"), &out.record)?;
            write_json(&dir.join("report.json"), &out.report)?;
            out.checkpoint(&cfg).save(dir.join("checkpoint.json"))?;
            if args.plot_data {
                plot_showcase(&dir, &prepared, &out.model, &cfg)?;
            }
            if args.table {
                print!("{}", out.report.table());
            }
            println!("{}", dir.display());
        }
        Command::Evaluate { run: args, checkpoint } => {
            let ckpt = Checkpoint::load(&checkpoint)?;
            // the checkpoint's own config is the base, flags still override
            let mut cfg: RunConfig = match &ckpt.metadata {
                Some(m) => serde_json::from_value(m.clone())
                    .map_err(|e| Error::Checkpoint(format!("metadata is not a run config: {e}")))?,
                None => RunConfig::default(),
            };
            if let Some(f) = &args.config {
                cfg.apply_file(f)?;
            }
            cfg.apply_overrides(&args.overrides)?;
            if let Some(s) = args.seed {
                cfg.seed = s;
            }
            cfg.validate()?;
            let model = ckpt.to_model()?;
            if model.config.segment_len != cfg.segment_len || model.config.hidden_dim != cfg.hidden_dim {
                return Err(Error::Config(
                    "segment_len and hidden_dim must match the checkpoint".into(),
                ));
            }
            let prepared = prepare(&args, &cfg)?;
            let reports = vec![
                evaluate_model(&prepared, &model, &cfg)?,
                evaluate_persistence(&prepared, &cfg)?,
                evaluate_linear(&prepared, &cfg)?,
            ];
            let dir = run_dir(&args.out, "evaluate", &cfg)?;
            write_json(&dir.join("report.json"), &reports)?;
            if args.plot_data {
                plot_showcase(&dir, &prepared, &model, &cfg)?;
            }
            if args.table {
                for r in &reports {
                    println!("{}", r.table());
                }
            }
            println!("{}", dir.display());
        }
        Command::Ablate { run: args, seeds } => {
            let cfg = args.resolve()?;
            let prepared = prepare(&args, &cfg)?;
            let report = ablation_run(&prepared, &cfg, &seeds)?;
            let dir = run_dir(&args.out, "ablate", &cfg)?;
            write_json(&dir.join("ablation.json"), &report)?;
            if args.table {
                print!("{}", report.table());
            }
            println!("{}", dir.display());
        }
        Command::Promote {
            run: args,
            sizes,
            seeds,
        } => {
            let cfg = args.resolve()?;
            let report = promotion_run(&args.name(), &load_csv(&args.data)?, &cfg, &sizes, &seeds)?;
            let dir = run_dir(&args.out, "promote", &cfg)?;
            write_json(&dir.join("promotion.json"), &report)?;
            if args.table {
                print!("{}", report.table());
            }
            println!("{}", dir.display());
        }
        Command::Sweep {
            run: args,
            axis,
            values,
        } => {
            let cfg = args.resolve()?;
            let axis: SweepAxis = axis.parse()?;
            let report = sweep_run(&args.name(), &load_csv(&args.data)?, &cfg, axis, &values)?;
            let dir = run_dir(&args.out, "sweep", &cfg)?;
            write_json(&dir.join("sweep.json"), &report)?;
            if args.plot_data {
                write(&dir.join(format!("sweep_{}.csv", axis.name())), report.plot_csv().as_bytes())?;
            }
            if args.table {
                print!("{}", report.table());
            }
            println!("{}", dir.display());
        }
        Command::Gradcheck { seed } => {
            let report = run_standard(seed)?;
            for b in &report.blocks {
                println!("{:<18} {:>6} {:.3e}", b.name, b.size, b.max_rel_error);
            }
            println!("{:<18} {:>6} {:.3e}", "theta closed form", 1, report.theta_closed_form_error);
            println!("{:<18} {:>6} {:.3e}", "fusion derivative", "", report.fuse_closed_form_error);
            let ok = report.passes(1e-4, 1e-10);
            println!("max relative error {:.3e}: {}", report.max_rel_error(), if ok { "pass" } else { "FAIL" });
            return Ok(ok);
        }
        Command::DumpPrompts {
            data,
            config,
            overrides,
            channel,
            row,
            length,
        } => {
            let cfg = RunConfig::resolve(config.as_deref(), &overrides)?;
            let frame = load_csv(&data)?;
            let len = length.unwrap_or(cfg.context_len);
            if channel >= frame.n_channels() || row + len > frame.len() {
                return Err(Error::Config(format!(
                    "window of {len} rows at row {row}, channel {channel} is outside the data"
                )));
            }
            let values = &frame.channel(channel)[row..row + len];
            let dumps = dump_prompts(values, frame.timestamp(row), frame.freq(), cfg.segment_len, cfg.prompt_decimals)?;
            let stdout = std::io::stdout();
            let mut lock = stdout.lock();
            for d in dumps {
                let line = serde_json::to_string(&d)?;
                writeln!(lock, "{line}").map_err(|e| Error::Io {
                    path: PathBuf::from("<stdout>"),
                    source: e,
                })?;
            }
        }
    }
    Ok(true)
}

fn plot_showcase(dir: &Path, prepared: &Prepared, model: &segmoe::Model, cfg: &RunConfig) -> Result<()> {
    let horizon = *cfg.horizons.iter().max().unwrap_or(&cfg.base_horizon);
    let rows = showcase(prepared, model, cfg, 0, horizon)?;
    let mut csv = String::from("t,truth,prediction\n");
    for (t, truth, pred) in rows {
        csv += &format!("{t},{truth},{pred}\n");
    }
    write(&dir.join("showcase.csv"), csv.as_bytes())
}

fn main() -> ExitCode {
    match execute(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            let report = serde_json::to_string(&e.to_report()).unwrap_or_else(|_| e.to_string());
            eprintln!("{report}");
            ExitCode::FAILURE
        }
    }
}
