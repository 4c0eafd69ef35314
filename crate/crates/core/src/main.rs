use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use transmodel_iv::io::{read_dataset, render_comparison, write_json, ColumnMapping, FitConfig, FitReport, FitSection};
use transmodel_iv::score::FitResult;
use transmodel_iv::sim::{calibrate_censoring, coverage_study, run_study, CaseId, CaseSpec, StudyOptions};
use transmodel_iv::variance::{bootstrap_covariance, Estimator};
use transmodel_iv::{estimate_iv, estimate_naive, FitOptions, HazardFamily, LtmError, Result, SurvivalDataset};

#[derive(Parser)]
#[command(name = "transmodel-iv", version, about = "Linear transformation models with instrumental-variable correction")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum VarianceMethod {
    Plugin,
    Bootstrap,
}

#[derive(Subcommand)]
enum Command {
    /// Fit naive and IV-corrected models to a CSV dataset.
    Fit {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        time_col: String,
        #[arg(long)]
        status_col: String,
        #[arg(long, value_delimiter = ',', required = true)]
        z_cols: Vec<String>,
        #[arg(long, value_delimiter = ',', required = true)]
        w_cols: Vec<String>,
        #[arg(long, default_value = "ph")]
        family: HazardFamily,
        #[arg(long, value_enum, default_value = "plugin")]
        variance: VarianceMethod,
        #[arg(long, default_value_t = 200)]
        boot_reps: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, default_value_t = 0.95)]
        ci_level: f64,
        #[arg(long, default_value_t = 100)]
        max_iter: usize,
        /// Include the intermediate variance matrices in the report.
        #[arg(long)]
        components: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Monte Carlo study for one of the simulation designs.
    Simulate {
        #[arg(long)]
        case: CaseId,
        #[arg(long)]
        n: usize,
        #[arg(long, value_delimiter = ',')]
        beta: Option<Vec<f64>>,
        #[arg(long, default_value = "ph")]
        family: HazardFamily,
        #[arg(long)]
        reps: usize,
        #[arg(long)]
        seed: u64,
        #[arg(long, default_value_t = 0.2)]
        target_censoring: f64,
        /// Also compute plug-in standard errors, coverage and interval width.
        #[arg(long)]
        coverage: bool,
        #[arg(long, default_value_t = 0.95)]
        ci_level: f64,
        #[arg(long)]
        workers: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the censoring constant `c` that hits the target rate.
    Calibrate {
        #[arg(long)]
        case: CaseId,
        #[arg(long, value_delimiter = ',')]
        beta: Option<Vec<f64>>,
        #[arg(long, default_value = "ph")]
        family: HazardFamily,
        #[arg(long)]
        target_censoring: f64,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
}

fn section(
    data: &SurvivalDataset,
    family: HazardFamily,
    options: &FitOptions,
    estimator: Estimator,
    variance: VarianceMethod,
    boot_reps: usize,
    seed: u64,
    components: bool,
) -> (FitSection, Option<LtmError>) {
    let model = match estimator {
        Estimator::InstrumentalVariable => estimate_iv(data, family, options),
        Estimator::Naive => estimate_naive(data, family, options),
    };
    let model = match model {
        Ok(m) => m,
        Err(e) => {
            let sec = FitSection {
                converged: false,
                iterations: 0,
                final_score_norm: f64::NAN,
                beta_hat: Vec::new(),
                std_errors: None,
                conf_intervals: None,
                covariance: None,
                transform: Vec::new(),
                q_hat: None,
                sigma_eta_sq: None,
                components: None,
                error: Some(e.to_string()),
            };
            return (sec, Some(e));
        }
    };
    if !model.converged {
        let err = model.clone().into_error();
        return (FitSection::from_failure(&model, &err), Some(err));
    }
    let finished = match variance {
        VarianceMethod::Plugin => transmodel_iv::score::finish(model.clone(), options.ci_level),
        VarianceMethod::Bootstrap => bootstrap_covariance(data, family, options, boot_reps, seed, estimator)
            .and_then(|cov| FitResult::assemble(&model, cov, None, options.ci_level)),
    };
    match finished {
        Ok(result) => (FitSection::from_result(&result, components), None),
        Err(e) => (FitSection::from_failure(&model, &e), Some(e)),
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Fit {
            input,
            time_col,
            status_col,
            z_cols,
            w_cols,
            family,
            variance,
            boot_reps,
            seed,
            ci_level,
            max_iter,
            components,
            out,
        } => {
            let columns = ColumnMapping {
                time: time_col,
                status: status_col,
                z: z_cols,
                w: w_cols,
            };
            let options = FitOptions {
                ci_level,
                max_outer_iters: max_iter,
                ..FitOptions::default()
            };
            let data = read_dataset(&input, &columns)?;
            options.validate(data.p())?;
            let (naive, naive_err) =
                section(&data, family, &options, Estimator::Naive, variance, boot_reps, seed, components);
            let (proposed, proposed_err) =
                section(&data, family, &options, Estimator::InstrumentalVariable, variance, boot_reps, seed, components);
            print!("{}", render_comparison(&columns.z, &naive, &proposed, ci_level));
            let bootstrap = matches!(variance, VarianceMethod::Bootstrap);
            let report = FitReport {
                version: env!("CARGO_PKG_VERSION").to_string(),
                config: FitConfig {
                    data: input.display().to_string(),
                    columns,
                    family,
                    variance: if bootstrap { "bootstrap" } else { "plugin" }.to_string(),
                    bootstrap_reps: bootstrap.then_some(boot_reps),
                    seed: bootstrap.then_some(seed),
                    options,
                },
                n: data.n(),
                n_events: data.outcomes().n_events(),
                naive,
                proposed,
            };
            write_json(&report, &out)?;
            match proposed_err.or(naive_err) {
                Some(e) => Err(e),
                None => Ok(()),
            }
        }
        Command::Simulate {
            case,
            n,
            beta,
            family,
            reps,
            seed,
            target_censoring,
            coverage,
            ci_level,
            workers,
            out,
        } => {
            let beta = beta.unwrap_or_else(|| CaseSpec::default_beta(case));
            let mut spec = CaseSpec::new(case, n, beta, family, reps, seed)?;
            spec.target_censoring = target_censoring;
            let options = StudyOptions {
                fit: FitOptions {
                    ci_level,
                    ..FitOptions::default()
                },
                workers,
            };
            let report = if coverage {
                coverage_study(&spec, &options)?
            } else {
                run_study(&spec, &options)?
            };
            println!(
                "case {} n={} r={} reps={} used={} censoring={:.4} c={:.6e}",
                case,
                n,
                family.r(),
                reps,
                report.n_used,
                report.empirical_censoring_rate,
                report.spec.censoring_constant.unwrap_or(f64::NAN)
            );
            for j in 0..report.bias.len() {
                print!("beta{}: bias={:.4} mse={:.4}", j + 1, report.bias[j], report.mse[j]);
                if let (Some(cp), Some(aw)) = (&report.coverage_probability, &report.average_width) {
                    print!(" cp={:.4} aw={:.4}", cp[j], aw[j]);
                }
                println!();
            }
            write_json(&report, &out)
        }
        Command::Calibrate {
            case,
            beta,
            family,
            target_censoring,
            seed,
        } => {
            let beta = beta.unwrap_or_else(|| CaseSpec::default_beta(case));
            let mut spec = CaseSpec::new(case, 100, beta, family, 1, seed)?;
            spec.target_censoring = target_censoring;
            let c = calibrate_censoring(&spec)?;
            println!("{c:.10e}");
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
