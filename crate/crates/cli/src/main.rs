use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use unforge::baselines::Method;
use unforge::collect::eta_monte_carlo;
use unforge::data::{DatasetName, ForgetSpec};
use unforge_cli::error::StageExt;
use unforge_cli::{run_cycles, run_pipeline, sweep_k, CliError, ExperimentConfig, Run, RunMethod};

#[derive(Parser)]
#[command(name = "unforge", version, about = "Machine unlearning via condensation and modular training")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum ForgetModeArg {
    Random,
    Class,
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    /// Class-0 forgetting on the toy set.
    Toy,
    /// Random 10% forgetting on the toy set.
    ToyRandom,
}

/// A config file plus the data flags that override it.
#[derive(Args)]
struct ConfigArgs {
    /// Experiment config (JSON)
    #[arg(long, short)]
    config: PathBuf,
    /// cifar10, svhn or synthetic_gaussians
    #[arg(long)]
    dataset: Option<String>,
    /// Dataset cache root
    #[arg(long)]
    cache_dir: Option<PathBuf>,
    #[arg(long, value_enum)]
    forget_mode: Option<ForgetModeArg>,
    /// Share of training samples to forget (random mode)
    #[arg(long)]
    forget_fraction: Option<f64>,
    /// Class to forget (class mode)
    #[arg(long)]
    forget_class: Option<usize>,
    /// Run seed
    #[arg(long)]
    seed: Option<u64>,
}

impl ConfigArgs {
    fn load(&self) -> Result<ExperimentConfig, CliError> {
        let mut cfg = ExperimentConfig::load(&self.config)?;
        if let Some(d) = &self.dataset {
            cfg.dataset.name = d.parse::<DatasetName>().map_err(|e| CliError::Config(e.to_string()))?;
        }
        if let Some(c) = &self.cache_dir {
            cfg.dataset.cache_dir = Some(c.clone());
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        let mode = self.forget_mode.or(match (self.forget_fraction, self.forget_class) {
            (Some(_), None) => Some(ForgetModeArg::Random),
            (None, Some(_)) => Some(ForgetModeArg::Class),
            _ => None,
        });
        match mode {
            Some(ForgetModeArg::Random) => {
                let f = self
                    .forget_fraction
                    .ok_or_else(|| CliError::Config("--forget-mode random needs --forget-fraction".into()))?;
                cfg.forget = ForgetSpec::random(f, self.seed.unwrap_or(cfg.forget.seed));
            }
            Some(ForgetModeArg::Class) => {
                let c = self
                    .forget_class
                    .ok_or_else(|| CliError::Config("--forget-mode class needs --forget-class".into()))?;
                cfg.forget = ForgetSpec::class(c);
            }
            None => {}
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn open(&self) -> Result<Run, CliError> {
        Run::open(self.load()?)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Write a preset config file.
    Init {
        #[arg(long, value_enum, default_value = "toy")]
        preset: Preset,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, short)]
        out: PathBuf,
    },
    /// Run every stage of the pipeline.
    Run(ConfigArgs),
    /// Train the model and run the offline phase.
    Pretrain(ConfigArgs),
    /// Per-class k-means on penultimate features.
    Cluster(ConfigArgs),
    /// Condense every cluster to one image.
    Condense(ConfigArgs),
    /// Apply the forget request: split, reduced retain set and η.
    Collect(ConfigArgs),
    /// η estimates for balanced clusters.
    Eta {
        #[arg(long)]
        c: usize,
        #[arg(long)]
        k: usize,
        #[arg(long)]
        nd: usize,
        #[arg(long)]
        nf: usize,
        #[arg(long, default_value_t = 10_000)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Online phase of the modular scheme.
    Unlearn(ConfigArgs),
    /// Run baselines; all baselines of the config when no method is given.
    Baseline {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        method: Option<Method>,
    },
    /// Measure every unlearned model in the run directory.
    Evaluate(ConfigArgs),
    /// Membership-inference defense on the pretrained model.
    Defend(ConfigArgs),
    /// Inversion audit of an unlearned model.
    Invert {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, default_value = "MU")]
        method: RunMethod,
        #[arg(long, default_value_t = 4)]
        k: usize,
    },
    /// Unlearning on an autoencoder-bodied model with a head swap.
    CondenseModel(ConfigArgs),
    /// Repeated random deletion.
    Cycles {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, default_value_t = 5)]
        cycles: usize,
        #[arg(long, default_value_t = 0.1)]
        fraction: f64,
    },
    /// Modular unlearning over several K.
    SweepK {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, value_delimiter = ',', required = true)]
        k: Vec<usize>,
    },
    /// Relative best error over the evaluated methods.
    Report(ConfigArgs),
}

fn print<T: Serialize>(v: &T) {
    println!("{}", serde_json::to_string_pretty(v).expect("serializable"));
}

fn dispatch(cmd: Command) -> Result<(), CliError> {
    match cmd {
        Command::Init { preset, seed, out } => {
            let cfg = match preset {
                Preset::Toy => ExperimentConfig::toy(seed),
                Preset::ToyRandom => ExperimentConfig::toy_random(seed, 0.1),
            };
            std::fs::write(&out, cfg.to_json() + "\n").stage("init")?;
        }
        Command::Run(a) => {
            let s = run_pipeline(a.load()?)?;
            print(&serde_json::json!({ "dir": s.dir, "reports": s.reports, "rbe": s.rbe }));
        }
        Command::Pretrain(a) => {
            let run = a.open()?;
            run.pretrain()?;
            print(&serde_json::json!({ "dir": run.dir, "snapshots": ["pretrained.snap", "offline.snap"] }));
        }
        Command::Cluster(a) => {
            let idx = a.open()?.cluster()?;
            print(&serde_json::json!({ "clusters": idx.len(), "warnings": idx.warnings }));
        }
        Command::Condense(a) => {
            let set = a.open()?.condense()?;
            print(&serde_json::json!({ "images": set.len(), "method": set.method }));
        }
        Command::Collect(a) => {
            let out = a.open()?.collect()?;
            print(&serde_json::json!({
                "forget": out.split.forget.len(),
                "n_r": out.reduced.n_r(),
                "touched_clusters": out.reduced.touched_clusters,
                "eta": out.eta,
            }));
        }
        Command::Eta {
            c,
            k,
            nd,
            nf,
            trials,
            seed,
        } => {
            let e = eta_monte_carlo(c, k, nd, nf, trials, seed).map_err(|e| CliError::Config(e.to_string()))?;
            print(&e);
        }
        Command::Unlearn(a) => print(&a.open()?.unlearn()?),
        Command::Baseline { cfg, method } => {
            let run = cfg.open()?;
            let methods: Vec<Method> = match method {
                Some(m) => vec![m],
                None => run
                    .cfg
                    .methods
                    .iter()
                    .filter_map(|m| match m {
                        RunMethod::Baseline(b) => Some(*b),
                        RunMethod::Mu => None,
                    })
                    .collect(),
            };
            let mut out = Vec::new();
            for m in methods {
                out.push(run.baseline(m)?);
            }
            print(&out);
        }
        Command::Evaluate(a) => print(&a.open()?.evaluate()?),
        Command::Defend(a) => {
            let r = a.open()?.defend()?;
            print(&serde_json::json!({
                "mia_before": r.mia_before,
                "mia_after": r.mia_after,
                "test_accuracy_before": r.test_accuracy_before,
                "test_accuracy_after": r.test_accuracy_after,
                "overfit_samples": r.partition.as_ref().map(|p| p.overfit_indices.len()),
                "note": r.note,
            }));
        }
        Command::Invert { cfg, method, k } => print(&cfg.open()?.invert(method, k)?),
        Command::CondenseModel(a) => {
            let mut r = a.open()?.condense_model()?;
            r.records.clear();
            print(&r);
        }
        Command::Cycles { cfg, cycles, fraction } => print(&run_cycles(cfg.load()?, cycles, fraction)?),
        Command::SweepK { cfg, k } => print(&sweep_k(cfg.load()?, &k)?),
        Command::Report(a) => print(&a.open()?.report()?),
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("unforge: {e}");
            e.exit_code()
        }
    }
}
