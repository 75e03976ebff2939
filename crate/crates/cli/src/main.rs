use std::path::{Path, PathBuf};
use std::process::ExitCode;

use bellman_lab::features::ParamBall;
use bellman_lab::harness::report::{load_runs, RoundSummary};
use bellman_lab::harness::{
    self, spectral_run, summarize_runs, verify_instance, Instance, InstanceSpec, SpectralInit, SpectralMethod,
    SpectralSettings, SvdRelations, Tolerances, TrainConfig, VerifySettings, SEED_ENV,
};
use bellman_lab::ibe::{compute_ibe, InnerMethod};
use bellman_lab::io::write_json;
use bellman_lab::Error;
use clap::{Parser, Subcommand, ValueEnum};

const EXIT_FAILED: u8 = 1;
const EXIT_USAGE: u8 = 2;

#[derive(Parser)]
#[command(name = "bellman-lab", version, about = "Spectral Bellman representation learning on finite MDPs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Kind {
    Chain,
    DeepSea,
    Linear,
}

#[derive(Clone, Copy, ValueEnum)]
enum Inner {
    Chebyshev,
    LeastSquares,
}

#[derive(Clone, Copy, ValueEnum)]
enum Method {
    Power,
    Sbm,
}

#[derive(Clone, Copy, ValueEnum)]
enum Init {
    Random,
    Base,
}

#[derive(Clone, Copy, ValueEnum)]
enum Relations {
    Consistent,
    Literal,
}

#[derive(Subcommand)]
enum Command {
    /// Write an instance JSON from one of the factories.
    Gen {
        #[arg(long, value_enum)]
        kind: Kind,
        #[arg(long, default_value_t = 0.9)]
        gamma: f64,
        /// Chain: number of transient states.
        #[arg(long, default_value_t = 5)]
        length: usize,
        #[arg(long, default_value_t = 0.0)]
        slip: f64,
        #[arg(long, default_value_t = 1.0)]
        goal_reward: f64,
        /// DeepSea: grid size and horizon.
        #[arg(long, default_value_t = 10)]
        depth: usize,
        /// Linear MDP: states, actions, feature dimension.
        #[arg(long, default_value_t = 10)]
        states: usize,
        #[arg(long, default_value_t = 2)]
        actions: usize,
        #[arg(long, default_value_t = 3)]
        dim: usize,
        #[arg(long, default_value_t = 1.0)]
        reward_scale: f64,
        #[arg(long, env = SEED_ENV, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Estimate the inherent Bellman error of the instance features.
    Ibe {
        #[arg(long)]
        instance: PathBuf,
        /// Use one-hot features even when the instance stores its own.
        #[arg(long)]
        one_hot: bool,
        #[arg(long, default_value_t = 64)]
        grid: usize,
        #[arg(long, default_value_t = 1)]
        horizon: usize,
        #[arg(long, value_enum, default_value_t = Inner::Chebyshev)]
        inner: Inner,
        #[arg(long, env = SEED_ENV, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the power method or SBM minimization and write a per-iteration CSV.
    Spectral {
        #[arg(long)]
        instance: PathBuf,
        #[arg(long, value_enum, default_value_t = Method::Power)]
        method: Method,
        #[arg(long, value_enum, default_value_t = Init::Random)]
        init: Init,
        #[arg(long, default_value_t = 200)]
        iters: usize,
        #[arg(long, default_value_t = 50)]
        grid: usize,
        #[arg(long, default_value_t = 1.0)]
        grid_std: f64,
        #[arg(long, default_value_t = 0.5)]
        step_size: f64,
        #[arg(long, default_value_t = 1.0)]
        lambda_orth: f64,
        #[arg(long, env = SEED_ENV, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Check the spectral identities, SVD relations and fixed-point
    /// equivalence on a Linear-MDP instance.
    Verify {
        #[arg(long)]
        instance: PathBuf,
        #[arg(long, default_value_t = 50)]
        grid: usize,
        #[arg(long, default_value_t = 1.0)]
        grid_std: f64,
        #[arg(long, value_enum, default_value_t = Relations::Consistent)]
        svd_relations: Relations,
        /// JSON file overriding individual tolerances.
        #[arg(long)]
        tolerances: Option<PathBuf>,
        #[arg(long, env = SEED_ENV, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the agent for every configured seed.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        /// Replaces the config's seed list.
        #[arg(long, env = SEED_ENV)]
        seed: Option<u64>,
    },
    /// Median and quartiles across training CSVs.
    Report {
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        /// Return counted as reaching the goal.
        #[arg(long)]
        goal: Option<f64>,
        #[arg(long)]
        out: PathBuf,
        /// Also write the per-round rows as CSV.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
}

enum Failure {
    Usage(String),
    Failed(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Io(_)
            | Error::Json(_)
            | Error::Csv(_)
            | Error::Format(_)
            | Error::InvalidArgument(_)
            | Error::Shape { .. }
            | Error::NotStochastic { .. } => Failure::Usage(e.to_string()),
            other => Failure::Failed(other.to_string()),
        }
    }
}

fn require(path: &Path) -> Result<(), Failure> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Failure::Usage(format!("input file {} not found", path.display())))
    }
}

fn run(command: Command) -> Result<bool, Failure> {
    match command {
        Command::Gen {
            kind,
            gamma,
            length,
            slip,
            goal_reward,
            depth,
            states,
            actions,
            dim,
            reward_scale,
            seed,
            out,
        } => {
            let spec = match kind {
                Kind::Chain => InstanceSpec::Chain {
                    length,
                    slip,
                    goal_reward,
                    gamma,
                },
                Kind::DeepSea => InstanceSpec::DeepSea { depth, gamma },
                Kind::Linear => InstanceSpec::Linear {
                    n_states: states,
                    n_actions: actions,
                    dim,
                    gamma,
                    seed,
                    reward_scale,
                },
            };
            Instance::generate(&spec)?.save(&out)?;
            Ok(true)
        }
        Command::Ibe {
            instance,
            one_hot,
            grid,
            horizon,
            inner,
            seed,
            out,
        } => {
            require(&instance)?;
            let inst = Instance::load(&instance)?;
            let features = if one_hot {
                bellman_lab::Features::one_hot(inst.mdp.n_states(), inst.mdp.n_actions())
            } else {
                inst.features_or_one_hot()
            };
            let ball = ParamBall::new(inst.mdp.default_param_bound(), features)?;
            let method = match inner {
                Inner::Chebyshev => InnerMethod::Chebyshev,
                Inner::LeastSquares => InnerMethod::LeastSquares,
            };
            let report = compute_ibe(&inst.mdp, &ball, grid, seed, horizon, method)?;
            write_json(&out, &report)?;
            Ok(true)
        }
        Command::Spectral {
            instance,
            method,
            init,
            iters,
            grid,
            grid_std,
            step_size,
            lambda_orth,
            seed,
            out,
        } => {
            require(&instance)?;
            let inst = Instance::load(&instance)?;
            let settings = SpectralSettings {
                method: match method {
                    Method::Power => SpectralMethod::Power,
                    Method::Sbm => SpectralMethod::Sbm,
                },
                init: match init {
                    Init::Random => SpectralInit::Random,
                    Init::Base => SpectralInit::Base,
                },
                iters,
                grid_size: grid,
                grid_std,
                step_size,
                lambda_orth,
                ..SpectralSettings::default()
            };
            let rows = harness::run_spectral(&inst, &settings, seed)?;
            spectral_run::write_trace(&out, &rows)?;
            Ok(true)
        }
        Command::Verify {
            instance,
            grid,
            grid_std,
            svd_relations,
            tolerances,
            seed,
            out,
        } => {
            require(&instance)?;
            let tol: Tolerances = match &tolerances {
                Some(p) => {
                    require(p)?;
                    bellman_lab::io::read_json(p)?
                }
                None => Tolerances::default(),
            };
            let inst = Instance::load(&instance)?;
            let settings = VerifySettings {
                grid_size: grid,
                grid_std,
                svd_relations: match svd_relations {
                    Relations::Consistent => SvdRelations::Consistent,
                    Relations::Literal => SvdRelations::Literal,
                },
                ..VerifySettings::default()
            };
            let report = verify_instance(&inst, &settings, &tol, seed)?;
            write_json(&out, &report)?;
            for c in report.checks.iter().filter(|c| !c.passed) {
                eprintln!("FAIL {}: {:e} > {:e}", c.name, c.value, c.threshold);
            }
            Ok(report.passed)
        }
        Command::Train { config, out_dir, seed } => {
            require(&config)?;
            let mut cfg = TrainConfig::load(&config)?;
            if let Some(s) = seed {
                cfg.seeds = vec![s];
            }
            require(&cfg.instance)?;
            let inst = Instance::load(&cfg.instance)?;
            let outcome = harness::train(&cfg, &inst, &out_dir)?;
            for log in outcome.logs.iter().filter(|l| l.error.is_some()) {
                eprintln!("seed {} stopped: {}", log.seed, log.error.as_deref().unwrap_or_default());
            }
            Ok(outcome.all_ok())
        }
        Command::Report { runs, goal, out, csv } => {
            for p in &runs {
                require(p)?;
            }
            let summary = summarize_runs(&load_runs(&runs)?, goal)?;
            if let Some(path) = &csv {
                harness::write_csv::<RoundSummary>(path, &summary.rounds)?;
            }
            write_json(&out, &summary)?;
            Ok(true)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(EXIT_USAGE) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli.command) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(EXIT_FAILED),
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(EXIT_USAGE)
        }
        Err(Failure::Failed(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(EXIT_FAILED)
        }
    }
}
