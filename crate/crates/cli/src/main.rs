use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};
use endd::distill::DistObjective;
use endd::eval::RankingMetric;
use endd::uncertainty::Aggregate;
use endd_cli::commands;
use endd_cli::config::{PipelineConfig, OUTPUT_DIR_ENV};
use endd_cli::pipeline::{Student, System, TestSet};

#[derive(Parser)]
#[command(
    name = "endd",
    version,
    about = "Ensemble and ensemble-distribution distillation for sequence correction"
)]
struct Cli {
    #[command(flatten)]
    overrides: Overrides,
    #[command(subcommand)]
    command: Command,
}

/// Flags that override keys of the configuration file.
#[derive(Args, Default)]
struct Overrides {
    /// TOML configuration file; missing keys take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true, env = OUTPUT_DIR_ENV)]
    output_dir: Option<PathBuf>,
    #[arg(long, global = true)]
    data_dir: Option<PathBuf>,
    #[arg(long, global = true)]
    checkpoint_dir: Option<PathBuf>,
    #[arg(long, global = true)]
    ensemble_size: Option<usize>,
    /// Master training seed; member i uses seed + i.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Corpus generation seed.
    #[arg(long, global = true)]
    data_seed: Option<u64>,
    #[arg(long, global = true)]
    train_size: Option<usize>,
    /// Size of each test split.
    #[arg(long, global = true)]
    test_size: Option<usize>,
    #[arg(long, global = true)]
    epochs: Option<usize>,
    #[arg(long, global = true)]
    student_epochs: Option<usize>,
    #[arg(long, global = true)]
    batch_size: Option<usize>,
    #[arg(long, global = true)]
    learning_rate: Option<f64>,
    #[arg(long, global = true)]
    embed_dim: Option<usize>,
    #[arg(long, global = true)]
    hidden_dim: Option<usize>,
    /// Ensemble evaluation temperature.
    #[arg(long, global = true)]
    temperature: Option<f64>,
    #[arg(long, global = true)]
    grid_step: Option<f64>,
    /// Rank sentences by per-token rates instead of sums.
    #[arg(long, global = true)]
    rate: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the training, in-domain test and out-of-domain test corpora.
    GenData,
    /// Train the ensemble members.
    TrainEnsemble,
    /// Distil the ensemble mean into a softmax student.
    Distill,
    /// Distil the ensemble distribution into a Dirichlet student.
    DistillDist {
        #[arg(long, default_value = "kl")]
        objective: DistObjective,
    },
    /// Decode test sets and write annotations and result tables.
    Evaluate {
        /// Comma-separated subset of ind,ens,dist,nll,kl,gua.
        #[arg(long, value_delimiter = ',', default_value = "ind,ens,dist,nll,kl,gua")]
        systems: Vec<System>,
        /// Comma-separated subset of id,ood,mix.
        #[arg(long, value_delimiter = ',', default_value = "id,ood,mix")]
        testsets: Vec<TestSet>,
    },
    /// Rejection curve of one annotations file under one ranking.
    RejectCurve {
        #[arg(long)]
        annotations: PathBuf,
        /// length, tu, du, ku or manual; the configured metric when omitted.
        #[arg(long)]
        metric: Option<RankingMetric>,
        #[arg(long)]
        out: PathBuf,
        /// Also write an SVG plot.
        #[arg(long)]
        svg: Option<PathBuf>,
    },
    /// Print the effective configuration.
    ShowConfig,
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Self::GenData => "gen-data",
            Self::TrainEnsemble => "train-ensemble",
            Self::Distill => "distill",
            Self::DistillDist { .. } => "distill-dist",
            Self::Evaluate { .. } => "evaluate",
            Self::RejectCurve { .. } => "reject-curve",
            Self::ShowConfig => "show-config",
        }
    }
}

fn effective_config(o: &Overrides) -> Result<PipelineConfig> {
    let mut cfg = match &o.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    if let Some(v) = &o.output_dir {
        cfg.paths.output_dir = v.clone();
    }
    if let Some(v) = &o.data_dir {
        cfg.paths.data_dir = Some(v.clone());
    }
    if let Some(v) = &o.checkpoint_dir {
        cfg.paths.checkpoint_dir = Some(v.clone());
    }
    if let Some(v) = o.ensemble_size {
        cfg.ensemble_size = v;
    }
    if let Some(v) = o.seed {
        cfg.train.seed = v;
        cfg.train.model.seed = v;
    }
    if let Some(v) = o.data_seed {
        cfg.grammar.seed = v;
    }
    if let Some(v) = o.train_size {
        cfg.corpus.train = v;
    }
    if let Some(v) = o.test_size {
        cfg.corpus.test_id = v;
        cfg.corpus.test_ood = v;
    }
    if let Some(v) = o.epochs {
        cfg.train.epochs = v;
    }
    if let Some(v) = o.student_epochs {
        cfg.student_epochs = Some(v);
    }
    if let Some(v) = o.batch_size {
        cfg.train.batch_size = v;
    }
    if let Some(v) = o.learning_rate {
        cfg.train.learning_rate = v;
    }
    if let Some(v) = o.embed_dim {
        cfg.train.model.embed_dim = v;
    }
    if let Some(v) = o.hidden_dim {
        cfg.train.model.hidden_dim = v;
    }
    if let Some(v) = o.temperature {
        cfg.eval.temperature = v;
    }
    if let Some(v) = o.grid_step {
        cfg.eval.grid_step = v;
    }
    if o.rate {
        cfg.eval.aggregate = Aggregate::Rate;
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    let cfg = effective_config(&cli.overrides)?;
    match cli.command {
        Command::GenData => {
            let table = commands::gen_data(&cfg)?;
            print!("{}", table.to_text());
        }
        Command::TrainEnsemble => {
            for p in commands::train_ensemble_cmd(&cfg)? {
                println!("wrote {}", p.display());
            }
        }
        Command::Distill => {
            let p = commands::distill_cmd(&cfg, Student::Dist)?;
            println!("wrote {}", p.display());
        }
        Command::DistillDist { objective } => {
            let p = commands::distill_dist_cmd(&cfg, objective)?;
            println!("wrote {}", p.display());
        }
        Command::Evaluate { systems, testsets } => {
            let out = commands::evaluate_cmd(&cfg, &systems, &testsets)?;
            for (_, t) in &out.tables {
                println!("{}", t.to_text());
            }
            println!("results in {}", cfg.paths.results().display());
        }
        Command::RejectCurve {
            annotations,
            metric,
            out,
            svg,
        } => {
            let metric = metric.unwrap_or(cfg.eval.ranking_metric);
            let res = commands::reject_curve_cmd(
                &annotations,
                metric,
                cfg.eval.aggregate,
                cfg.eval.grid_step,
                &out,
                svg.as_deref(),
            )?;
            println!(
                "metric={metric} auc={:.6} auc_rr={:.6} csv={}",
                res.curve.auc,
                res.auc_rr,
                res.csv.display()
            );
        }
        Command::ShowConfig => {
            cfg.validate()?;
            print!("{}", cfg.to_toml());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    let command = cli.command.name();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let message = format!("{e:#}").replace(['\n', '\r'], " ");
            eprintln!("error: command={command} message={message:?}");
            ExitCode::FAILURE
        }
    }
}
