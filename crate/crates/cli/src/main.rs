//! `l2a` command-line tool. Exit status: 0 on success, 1 for configuration
//! and usage errors, 2 for failures during a run.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use l2a::harness::{aggregate_to, report_aggregate, Ablation, Harness, RunConfig, SweepKind};
use l2a::Error;

#[derive(Parser, Debug)]
#[command(name = "l2a", version, about = "Distillation with learned augmentation")]
struct Cli {
    /// Log progress to stderr (repeat for more detail).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct ConfigArg {
    /// Run config JSON.
    #[arg(short, long)]
    config: PathBuf,
}

#[derive(Args, Debug, Clone, Copy)]
struct AblationArgs {
    /// Do not augment source-domain examples.
    #[arg(long)]
    wo_src: bool,
    /// Do not augment target-domain examples.
    #[arg(long)]
    wo_tgt: bool,
    /// Drop the attention-map loss.
    #[arg(long)]
    wo_att: bool,
    /// Drop the hidden-state loss.
    #[arg(long)]
    wo_hidden: bool,
    /// Drop the soft-label loss.
    #[arg(long)]
    wo_dark: bool,
}

impl From<AblationArgs> for Ablation {
    fn from(a: AblationArgs) -> Self {
        Ablation {
            wo_src: a.wo_src,
            wo_tgt: a.wo_tgt,
            wo_att: a.wo_att,
            wo_hidden: a.wo_hidden,
            wo_dark: a.wo_dark,
        }
    }
}

#[derive(ValueEnum, Debug, Clone, Copy)]
enum SweepOver {
    /// `sweep.n_per_class`.
    NPerClass,
    /// `sweep.alpha` × `sweep.temperature`.
    AlphaTemperature,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write the synthetic benchmark splits as JSONL.
    SynthData(ConfigArg),
    /// Masked-LM pretraining of the generator.
    PretrainGenerator(ConfigArg),
    /// Teacher fine-tuning on source and the full target pool.
    TrainTeacher(ConfigArg),
    /// Student fine-tuning baseline on the target subsample.
    TrainStudent(ConfigArg),
    /// Distillation from the trained teacher, on augmented data unless
    /// `--no-aug`.
    Distill {
        #[command(flatten)]
        config: ConfigArg,
        /// Distill on the original examples only.
        #[arg(long)]
        no_aug: bool,
    },
    /// Distillation with the learned sampler and selector.
    DistillL2a {
        #[command(flatten)]
        config: ConfigArg,
        #[command(flatten)]
        ablation: AblationArgs,
    },
    /// Test-split comparison of the trained models.
    Evaluate {
        #[command(flatten)]
        config: ConfigArg,
        #[command(flatten)]
        ablation: AblationArgs,
    },
    /// Every stage for every seed, reusing finished artifacts, then evaluate.
    Run {
        #[command(flatten)]
        config: ConfigArg,
        #[command(flatten)]
        ablation: AblationArgs,
    },
    /// Full comparison at every point of a sweep grid.
    Sweep {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long, value_enum)]
        over: SweepOver,
    },
    /// Mean ± stdev per method across the reports of several run directories.
    Aggregate {
        /// Directory for aggregate.csv and aggregate.dat.
        #[arg(short, long)]
        out: PathBuf,
        /// Directories holding a report.json.
        #[arg(required = true)]
        runs: Vec<PathBuf>,
    },
}

fn harness(path: &Path) -> Result<Harness, Error> {
    Harness::new(RunConfig::load(path)?)
}

fn print_dirs(dirs: &[PathBuf]) {
    for d in dirs {
        println!("{}", d.display());
    }
}

fn execute(command: Command) -> Result<(), Error> {
    match command {
        Command::SynthData(c) => print_dirs(&[harness(&c.config)?.synth_data()?]),
        Command::PretrainGenerator(c) => {
            let h = harness(&c.config)?;
            let train = h.config().train.clone();
            for &s in &h.config().seeds {
                print_dirs(&[h.pretrain_generator(&train, s, false)?]);
            }
        }
        Command::TrainTeacher(c) => {
            let h = harness(&c.config)?;
            let train = h.config().train.clone();
            for &s in &h.config().seeds {
                print_dirs(&[h.train_teacher(&train, s, false)?]);
            }
        }
        Command::TrainStudent(c) => {
            let h = harness(&c.config)?;
            let train = h.config().train.clone();
            for &s in &h.config().seeds {
                print_dirs(&[h.train_student(&train, s, false)?]);
            }
        }
        Command::Distill { config, no_aug } => {
            let h = harness(&config.config)?;
            let train = h.config().train.clone();
            for &s in &h.config().seeds {
                print_dirs(&[h.distill(&train, s, !no_aug, false)?]);
            }
        }
        Command::DistillL2a { config, ablation } => {
            let h = harness(&config.config)?;
            let train = h.config().train.clone();
            let ablation = Ablation::from(ablation);
            for &s in &h.config().seeds {
                print_dirs(&[h.distill_l2a(&train, &ablation, s, false)?]);
            }
        }
        Command::Evaluate { config, ablation } => {
            let h = harness(&config.config)?;
            let train = h.config().train.clone();
            let ablation = Ablation::from(ablation);
            let mut dirs = Vec::new();
            for &s in &h.config().seeds {
                let (_, dir) = h.evaluate(&train, &ablation, s)?;
                println!("{}", dir.display());
                dirs.push(dir);
            }
            print!("{}", report_aggregate(&dirs)?.display());
        }
        Command::Run { config, ablation } => {
            let h = harness(&config.config)?;
            let train = h.config().train.clone();
            let (_, dir) = h.run(&train, &Ablation::from(ablation))?;
            println!("{}", dir.display());
            print!("{}", report_aggregate(&[dir])?.display());
        }
        Command::Sweep { config, over } => {
            let h = harness(&config.config)?;
            let kind = match over {
                SweepOver::NPerClass => SweepKind::NPerClass,
                SweepOver::AlphaTemperature => SweepKind::AlphaTemperature,
            };
            let (report, dir) = h.sweep(kind)?;
            println!("{}", dir.display());
            print!("{}", report.csv());
        }
        Command::Aggregate { out, runs } => {
            print!("{}", aggregate_to(&runs, &out)?.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_config_error() { 1 } else { 2 })
        }
    }
}
