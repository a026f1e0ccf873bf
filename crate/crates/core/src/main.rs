//! `xcross` command-line interface.

mod cli;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use xcross::evalharness::{SweepMethod, Variant};
use xcross::recdata::Split;
use xcross::training::PhaseKind;
use xcross::Error;

use cli::commands;

/// Cross-domain sequential recommendation with layer-wise integration of
/// LoRA-adapted encoders.
#[derive(Parser)]
#[command(name = "xcross", version)]
struct Cli {
    /// TOML configuration file; missing fields take their defaults.
    #[arg(long, short, global = true)]
    config: Option<PathBuf>,

    /// Override a configuration field, e.g. `--set xcross.lr=1e-3`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,

    /// Experiment seed (overrides the configuration file).
    #[arg(long, env = "XCROSS_SEED", global = true)]
    seed: Option<u64>,

    /// Experiment directory holding one subdirectory per stage.
    #[arg(long, short, default_value = "runs", global = true)]
    work: PathBuf,

    /// Replace an existing run directory.
    #[arg(long, global = true)]
    overwrite: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic domains into <work>/data.
    GenData,
    /// Pretrain the base encoder on the pooled source domains.
    Pretrain,
    /// Train LoRA adapters for one domain on the frozen base.
    TrainSource {
        domain: u16,
    },
    /// Rank trained source adapters by zero-shot Hit@1 on the target.
    SelectSources {
        #[arg(long)]
        target: Option<u16>,
        #[arg(long)]
        n: Option<usize>,
    },
    /// Train X-Cross on the target over the selected sources.
    TrainXcross {
        /// Comma-separated source domains; defaults to the selection.
        #[arg(long, value_delimiter = ',')]
        sources: Option<Vec<u16>>,
    },
    /// Evaluate a stored model (a stage name such as `xcross` or `source-0`).
    Eval {
        model: String,
        /// Defaults to the target for X-Cross and to the adapter's own domain otherwise.
        #[arg(long)]
        domain: Option<u16>,
        #[arg(long, default_value = "test")]
        split: Split,
        /// Second stage to compare with a paired t-test on per-instance Hit@1.
        #[arg(long)]
        against: Option<String>,
    },
    /// Train and evaluate an ablated X-Cross (-Layers, -Interactions, -Experts).
    Ablate {
        #[arg(allow_hyphen_values = true)]
        variant: Variant,
    },
    /// Hit@1 sweeps on the target domain.
    #[command(subcommand)]
    Sweep(SweepKind),
    /// Check analytic gradients against finite differences on a tiny model.
    GradCheck {
        /// base, lora, xcross or all.
        #[arg(long, default_value = "all")]
        scope: String,
        #[arg(long, default_value_t = 30)]
        candidates: usize,
        #[arg(long, default_value_t = 1e-5)]
        eps: f64,
        #[arg(long, default_value_t = 1e-5)]
        tol: f64,
    },
    /// Trainable parameter counts of the integrator versus one LoRA matrix.
    ParamReport {
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        d: Option<usize>,
        #[arg(long)]
        rank: Option<usize>,
    },
}

#[derive(Subcommand)]
enum SweepKind {
    /// X-Cross and fresh target LoRA trained on growing target subsets.
    DataEfficiency {
        #[arg(long, value_delimiter = ',')]
        sizes: Option<Vec<usize>>,
        #[arg(long)]
        subsets: Option<usize>,
        /// xcross, target-lora or both.
        #[arg(long, default_value = "both")]
        methods: String,
        /// Skip a method's larger sizes once it beats the reference.
        #[arg(long)]
        stop_when_crossed: bool,
    },
    /// X-Cross with different numbers of integrated top layers.
    Layers {
        #[arg(long, value_delimiter = ',')]
        counts: Option<Vec<usize>>,
    },
}

const EXIT_FAILURE: u8 = 1;
const EXIT_CONFIG: u8 = 2;
const EXIT_MISSING: u8 = 3;
const EXIT_CHECK_FAILED: u8 = 4;

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Usage(_) => EXIT_CONFIG,
        Error::Missing(_) => EXIT_MISSING,
        _ => EXIT_FAILURE,
    }
}

fn phases(scope: &str) -> xcross::Result<Vec<PhaseKind>> {
    Ok(match scope {
        "all" => vec![PhaseKind::Base, PhaseKind::Lora, PhaseKind::Xcross],
        "base" => vec![PhaseKind::Base],
        "lora" => vec![PhaseKind::Lora],
        "xcross" => vec![PhaseKind::Xcross],
        other => return Err(Error::Usage(format!("unknown grad-check scope `{other}`"))),
    })
}

fn methods(name: &str) -> xcross::Result<Vec<SweepMethod>> {
    Ok(match name {
        "both" => vec![SweepMethod::Xcross, SweepMethod::TargetLora],
        "xcross" => vec![SweepMethod::Xcross],
        "target-lora" => vec![SweepMethod::TargetLora],
        other => return Err(Error::Usage(format!("unknown sweep method `{other}`"))),
    })
}

fn run(cli: Cli) -> xcross::Result<u8> {
    let mut overrides = cli.overrides.clone();
    if let Command::SelectSources { target, n } = &cli.command {
        overrides.extend(target.map(|t| format!("experiment.target={t}")));
        overrides.extend(n.map(|n| format!("experiment.num_sources={n}")));
    }
    let raw = cli::config::load(cli.config.as_deref(), &overrides, cli.seed)?;
    let cfg = raw.seeded();
    let (work, ow) = (cli.work.as_path(), cli.overwrite);
    match cli.command {
        Command::GenData => commands::gen_data(&cfg, work, ow)?,
        Command::Pretrain => commands::pretrain(&cfg, work, ow)?,
        Command::TrainSource { domain } => commands::train_source(&cfg, work, domain, ow)?,
        Command::SelectSources { .. } => commands::select_sources(&cfg, work, ow)?,
        Command::TrainXcross { sources } => commands::train_xcross(&cfg, work, sources, ow)?,
        Command::Eval {
            model,
            domain,
            split,
            against,
        } => commands::eval(&cfg, work, &model, domain, split, against.as_deref(), ow)?,
        Command::Ablate { variant } => commands::ablate(&cfg, work, variant, ow)?,
        Command::Sweep(SweepKind::DataEfficiency {
            sizes,
            subsets,
            methods: m,
            stop_when_crossed,
        }) => commands::sweep_data_efficiency(&cfg, work, sizes, subsets, methods(&m)?, stop_when_crossed, ow)?,
        Command::Sweep(SweepKind::Layers { counts }) => commands::sweep_layers(&cfg, work, counts, ow)?,
        Command::GradCheck {
            scope,
            candidates,
            eps,
            tol,
        } => {
            if !commands::grad_check(&phases(&scope)?, candidates, eps, tol, cfg.seed)? {
                return Ok(EXIT_CHECK_FAILED);
            }
        }
        Command::ParamReport { n, d, rank } => {
            let r = commands::param_report(&cfg, n, d, rank)?;
            println!("n = {}, d = {}, r = {}", r.n, r.d, r.rank);
            println!("integrator per layer      {:>10}", r.integrator_per_layer);
            println!("LoRA per adapted matrix   {:>10}", r.lora_per_matrix);
            println!("ratio                     {:>10.2}%", 100.0 * r.ratio);
            println!(
                "X-Cross trainable total   {:>10}  ({} integrated layers, mixer, head)",
                r.xcross_trainable, r.integrated_layers
            );
        }
    }
    Ok(0)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
