use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use gossip_langevin::harness::{
    self, cmd_bounds, cmd_consensus, cmd_convergence, cmd_selftest, cmd_spectra, config::parse_step_policy,
    ExperimentConfig, Faults, HarnessError, Overrides,
};

#[derive(Parser)]
#[command(name = "gossip-langevin", version, about = "Decentralized Langevin sampling over gossip networks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Mixing matrix, spectrum and spectral gaps of the configured network.
    Spectra(RunArgs),
    /// Consensus error of the agent iterates, or first-passage times with --fine-sde.
    Consensus {
        #[command(flatten)]
        run: RunArgs,
        /// Integrate the continuous dynamics with a fine step instead.
        #[arg(long)]
        fine_sde: bool,
    },
    /// Wasserstein distance of the average iterate to the target law.
    Convergence(RunArgs),
    /// Closed-form bounds and preconditions for the configured instance.
    Bounds(RunArgs),
    /// Built-in property suite.
    Selftest {
        #[arg(long, hide = true)]
        inject_corrupt_weights: bool,
        #[arg(long, hide = true)]
        inject_permuted_assignment: bool,
    },
}

#[derive(Args)]
struct RunArgs {
    /// JSON experiment configuration.
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    replicas: Option<usize>,
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Step policy: H, const:H or inverse_k:OFFSET.
    #[arg(long = "h")]
    h: Option<String>,
    #[arg(long)]
    sigma: Option<f64>,
}

impl RunArgs {
    fn load(&self) -> Result<ExperimentConfig, HarnessError> {
        let mut cfg = ExperimentConfig::read(&self.config)?;
        let h = self.h.as_deref().map(parse_step_policy).transpose()?;
        cfg.apply(&Overrides {
            seed: self.seed,
            replicas: self.replicas,
            steps: self.steps,
            out: self.out.clone(),
            h,
            sigma: self.sigma,
        });
        cfg.validate()?;
        Ok(cfg)
    }
}

fn print<T: serde::Serialize>(value: &T) {
    println!("{}", serde_json::to_string_pretty(value).expect("reports serialize"));
}

fn run(cli: Cli) -> Result<i32, HarnessError> {
    let vacuous = |v: bool| if v { harness::EXIT_VACUOUS } else { harness::EXIT_OK };
    match cli.command {
        Command::Spectra(args) => {
            print(&cmd_spectra(&args.load()?)?);
            Ok(harness::EXIT_OK)
        }
        Command::Consensus { run, fine_sde } => {
            let cfg = run.load()?;
            let report = cmd_consensus(&cfg, fine_sde)?;
            match &report.fine {
                Some(f) => print(&serde_json::json!({
                    "eps": f.eps,
                    "first_passage": f.first_passage,
                    "mean_replica_first_passage": f.mean_replica_first_passage,
                    "bound": f.bound,
                    "out": cfg.out,
                })),
                None => print(&serde_json::json!({
                    "energy_fit": report.energy_fit,
                    "w2_dirac_fit": report.w2_dirac_fit,
                    "fit_error": report.fit_error,
                    "out": cfg.out,
                })),
            }
            Ok(vacuous(report.vacuous))
        }
        Command::Convergence(args) => {
            let cfg = args.load()?;
            let report = cmd_convergence(&cfg)?;
            print(&serde_json::json!({
                "mode": report.mode,
                "fit": report.fit,
                "fit_error": report.fit_error,
                "plateau": report.plateau,
                "limit_bound": report.limit_bound,
                "out": cfg.out,
            }));
            Ok(vacuous(report.vacuous))
        }
        Command::Bounds(args) => {
            let report = cmd_bounds(&args.load()?)?;
            print(&report);
            Ok(vacuous(report.vacuous))
        }
        Command::Selftest { inject_corrupt_weights, inject_permuted_assignment } => {
            let report = cmd_selftest(Faults {
                corrupt_weights: inject_corrupt_weights,
                permute_assignment: inject_permuted_assignment,
            });
            for r in &report.results {
                println!("{} {}: {}", if r.passed { "PASS" } else { "FAIL" }, r.name, r.detail);
            }
            if report.passed() {
                Ok(harness::EXIT_OK)
            } else {
                Err(HarnessError::SelfTest(report.failures().join(", ")))
            }
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
