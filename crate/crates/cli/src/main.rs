use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use ntklev::config::{ExperimentConfig, InitScheme};
use ntklev::harness::{experiment_dataset, run_experiment};
use ntklev::nn::{init_gaussian, init_leverage, train, write_records_csv, TrainOptions};
use ntklev::{
    validate_dataset, Error, ExperimentKind, ExperimentReport, RegularizedKernel, SeedStream,
};

const EXIT_FAIL: u8 = 1;
const EXIT_CONFIG: u8 = 2;

#[derive(Parser)]
#[command(name = "ntklev", version, about = "Leverage-score NTK experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Draw the dataset and write data.csv and test.csv.
    GenData(Common),
    /// Write the exact kernel Gram and test-point kernel vector.
    Kernel(Common),
    /// Leverage-score feature sampling and its spectral sandwich.
    Features(Common),
    /// Kernel ridge regression gradient flow.
    Krr(Common),
    /// Train one network for `steps` steps at step size `eta`.
    Train(Common),
    /// Run a named experiment (default chosen from `init`).
    Equiv(EquivArgs),
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Override the trial count.
    #[arg(long)]
    trials: Option<usize>,
    /// Override the master seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct EquivArgs {
    #[command(flatten)]
    common: Common,
    /// One of spectral_sandwich, concentration, krr_flow, train_equiv,
    /// test_equiv, leverage_equiv.
    #[arg(long)]
    experiment: Option<String>,
}

enum Outcome {
    Pass,
    Fail,
}

impl Common {
    fn load(&self) -> ntklev::Result<ExperimentConfig> {
        let mut cfg = ExperimentConfig::load(&self.config)?;
        if let Some(t) = self.trials {
            cfg.trials = Some(t);
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        cfg.validate()?;
        std::fs::create_dir_all(&self.out)?;
        Ok(cfg)
    }
}

fn gate_line(pass: bool, name: &str, detail: impl std::fmt::Display) -> Outcome {
    println!("{} {name}: {detail}", if pass { "PASS" } else { "FAIL" });
    if pass {
        Outcome::Pass
    } else {
        Outcome::Fail
    }
}

fn gen_data(args: &Common) -> ntklev::Result<Outcome> {
    let cfg = args.load()?;
    let ds = experiment_dataset(&cfg)?;
    ds.write_csv(args.out.join("data.csv"))?;
    ds.write_test_csv(args.out.join("test.csv"))?;
    let violations = validate_dataset(&ds, cfg.delta_sep);
    Ok(gate_line(
        violations.is_empty(),
        "dataset_valid",
        format!("{} violations", violations.len()),
    ))
}

fn kernel(args: &Common) -> ntklev::Result<Outcome> {
    let cfg = args.load()?;
    let ds = experiment_dataset(&cfg)?;
    let family = cfg.family();
    let k = family.exact_kernel(&ds.x)?;
    let lambda = cfg.ridge(k.spectral_norm(), cfg.m);
    k.write_csv(args.out.join("gram.csv"), Some(lambda))?;
    let kv = family.exact_kernel_vec(ds.test_point()?, &ds.x)?;
    write_column(&args.out.join("kernel_vec.csv"), "k", kv.as_slice())?;
    let min_eig = ntklev::kernels::min_eigenvalue(&k);
    Ok(gate_line(
        min_eig > 0.0,
        "gram_positive_definite",
        format!("min eigenvalue {min_eig:e}"),
    ))
}

fn write_column(path: &Path, header: &str, values: &[f64]) -> ntklev::Result<()> {
    let mut text = format!("{header}\n");
    for v in values {
        text.push_str(&format!("{v}\n"));
    }
    std::fs::write(path, text)?;
    Ok(())
}

fn train_once(args: &Common) -> ntklev::Result<Outcome> {
    let cfg = args.load()?;
    let ds = experiment_dataset(&cfg)?;
    let k = ntklev::kernels::ntk_gram(&ds.x)?;
    let lambda = cfg.ridge(k.spectral_norm(), cfg.m);
    let seed = SeedStream::new(cfg.seed, 1);
    let mut net = match cfg.init {
        InitScheme::Gaussian => init_gaussian(cfg.m, cfg.d, cfg.kappa, lambda, seed)?,
        InitScheme::Leverage => {
            let reg = RegularizedKernel::new(k.clone(), lambda)?;
            init_leverage(cfg.m, &ds.x, &reg, cfg.kappa, lambda, seed)?
        }
    };
    let opts = TrainOptions {
        eta: cfg.eta,
        steps: cfg.steps,
        diag_every: cfg.diag_every,
        u_star: None,
        x_test: ds.x_test.clone(),
    };
    let records = match train(&mut net, &ds.x, &ds.y, &opts) {
        Ok(r) => r,
        Err(e @ Error::Diverged { .. }) => return Ok(gate_line(false, "training_converged", e)),
        Err(e) => return Err(e),
    };
    write_records_csv(args.out.join("records.csv"), &records)?;
    net.write_checkpoint(args.out.join("checkpoint"))?;
    let first = records[0].loss;
    let last = records.last().map_or(first, |r| r.loss);
    Ok(gate_line(
        last <= first,
        "loss_decreased",
        format!("{first:e} -> {last:e}"),
    ))
}

fn parse_kind(name: &str) -> ntklev::Result<ExperimentKind> {
    ExperimentKind::ALL
        .into_iter()
        .find(|k| k.name() == name)
        .ok_or_else(|| Error::InvalidConfig {
            field: "--experiment".into(),
            message: format!("unknown experiment `{name}`"),
        })
}

fn experiment(args: &Common, kind: Option<ExperimentKind>) -> ntklev::Result<Outcome> {
    let cfg = args.load()?;
    let kind = kind.unwrap_or(match cfg.init {
        InitScheme::Gaussian => ExperimentKind::TrainEquiv,
        InitScheme::Leverage => ExperimentKind::LeverageEquiv,
    });
    let report = run_experiment(kind, &cfg, Some(&args.out))?;
    report.write_json(args.out.join("report.json"))?;
    Ok(summarize(&report))
}

fn summarize(report: &ExperimentReport) -> Outcome {
    for gate in &report.gates {
        println!("{}", gate.summary_line());
    }
    println!(
        "{} {} ({:.1}s)",
        if report.pass { "PASS" } else { "FAIL" },
        report.experiment.name(),
        report.elapsed
    );
    if report.pass {
        Outcome::Pass
    } else {
        Outcome::Fail
    }
}

fn run(cli: Cli) -> ntklev::Result<Outcome> {
    match &cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Kernel(a) => kernel(a),
        Command::Features(a) => experiment(a, Some(ExperimentKind::SpectralSandwich)),
        Command::Krr(a) => experiment(a, Some(ExperimentKind::KrrFlow)),
        Command::Train(a) => train_once(a),
        Command::Equiv(a) => {
            let kind = a.experiment.as_deref().map(parse_kind).transpose()?;
            experiment(&a.common, kind)
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(Outcome::Pass) => ExitCode::SUCCESS,
        Ok(Outcome::Fail) => ExitCode::from(EXIT_FAIL),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_configuration() {
                EXIT_CONFIG
            } else {
                EXIT_FAIL
            })
        }
    }
}
