use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use pml_core::datagen::{
    read_binary, sample_matrix, sample_signal, write_binary, write_csv, SignalEnsemble,
};
use pml_core::equivalence::coarse_sufficient;
use pml_core::estimators::{
    default_alpha, least_squares_spectral, ls_likelihood, mle_gradient_ascent,
    pmle_gradient_ascent, pmle_score_corrected, write_trace_csv, EstimatorId, Init, LsDomain,
};
use pml_core::harness::{self, ExperimentConfig, BUILTIN_EXPERIMENTS};
use pml_core::info_params::{compute, InfoParams, Method};
use pml_core::likelihoods::{
    builtin, Likelihood, LikelihoodPair, ModelId, ModelParams, ParameterSpace,
};
use pml_core::optimize::AscentOptions;
use pml_core::parisi::{maximizer_set, minimize_psi, GridOptions, ParisiProblem, PsiOptions};
use pml_core::Result;

#[derive(Parser)]
#[command(
    name = "pml",
    version,
    about = "Pseudo-maximum-likelihood estimation for spiked matrix models"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Information parameters (β₁ β₂ β₃ β₄ β* β_LS class) of a task.
    InfoParams {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long, value_enum, default_value_t = MethodArg::Quad)]
        method: MethodArg,
        #[arg(long, default_value_t = 200_000)]
        samples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Sample a signal and an observation matrix.
    Simulate {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_enum, default_value_t = FormatArg::Bin)]
        format: FormatArg,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run one estimator on sampled or stored data.
    Estimate {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long, default_value = "pmle")]
        estimator: String,
        /// Matrix written by `simulate --format bin`; sampled afresh if absent.
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long, default_value_t = 500)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_enum, default_value_t = InitArg::Random)]
        init: InitArg,
        #[arg(long, default_value_t = 1)]
        init_seed: u64,
        #[arg(long, default_value_t = 500)]
        max_iter: usize,
        #[arg(long)]
        alpha: Option<f64>,
        /// Slope of the Gaussian pseudo-likelihood for the ls estimators.
        #[arg(long)]
        ls_lambda: Option<f64>,
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// Zero-temperature variational value ψ at given overlaps, or its maximizer set.
    Parisi {
        #[command(flatten)]
        model: ModelArgs,
        /// Use `b1,b2,b3,b4` instead of the model's information parameters.
        #[arg(long, value_delimiter = ',')]
        betas: Option<Vec<f64>>,
        #[arg(long)]
        s: Option<f64>,
        #[arg(long)]
        m: Option<f64>,
        #[arg(long)]
        v: Option<f64>,
        /// Ridge of the score correction.
        #[arg(long)]
        alpha: Option<f64>,
        #[arg(long, default_value_t = 2)]
        k_max: usize,
        #[arg(long, default_value_t = 61)]
        nodes: usize,
        /// Scan the effective domain and print the maximizer plateau.
        #[arg(long)]
        grid: bool,
        #[arg(long, default_value_t = 0.05)]
        step: f64,
    },
    /// Strong and coarse equivalence of two tasks.
    Equivalence {
        /// `id[:k=v,...]`
        a: String,
        b: String,
        #[arg(long)]
        alpha_a: Option<f64>,
        #[arg(long)]
        alpha_b: Option<f64>,
    },
    /// Run, report or list configured experiments.
    Experiment {
        #[command(subcommand)]
        action: ExperimentAction,
    },
}

#[derive(Subcommand)]
enum ExperimentAction {
    /// Run a config file or builtin experiment (resumes completed cells).
    Run {
        config: String,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Re-read an output directory and compare against theory.
    Report { dir: PathBuf },
    /// List builtin experiments.
    List,
}

#[derive(Args, Clone)]
struct ModelArgs {
    #[arg(long, default_value = "spiked_wigner")]
    model: String,
    /// Model parameter `k=v`; repeatable.
    #[arg(long = "param", short = 'p')]
    params: Vec<String>,
    #[arg(long)]
    signal: Option<String>,
    #[arg(long)]
    omega: Option<String>,
}

impl ModelArgs {
    fn pair(&self) -> Result<LikelihoodPair> {
        let model: ModelId = self.model.parse()?;
        let mut pair = builtin(model, &ModelParams::parse(&self.params.join(","))?)?;
        if let Some(s) = &self.signal {
            pair = pair.with_signal(s.parse::<SignalEnsemble>()?);
        }
        if let Some(o) = &self.omega {
            pair = pair.with_omega(o.parse::<ParameterSpace>()?);
        }
        Ok(pair)
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum MethodArg {
    Quad,
    Mc,
}

#[derive(Clone, Copy, ValueEnum)]
enum FormatArg {
    Bin,
    Csv,
}

#[derive(Clone, Copy, ValueEnum)]
enum InitArg {
    Random,
    Spectral,
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

/// `Ok(false)` when a theory comparison failed.
fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::InfoParams {
            model,
            method,
            samples,
            seed,
        } => {
            let pair = model.pair()?;
            let method = match method {
                MethodArg::Quad => Method::Quadrature,
                MethodArg::Mc => Method::MonteCarlo { samples, seed },
            };
            let ip = compute(&pair, &method)?;
            println!("# {}", pair.name);
            println!("beta1 beta2 beta3 beta4 beta_star beta_ls class");
            println!("{ip}");
        }
        Command::Simulate {
            model,
            n,
            seed,
            format,
            out,
        } => {
            let pair = model.pair()?;
            let x0 = sample_signal(&pair.signal, n, seed);
            let obs = sample_matrix(&pair, &x0, seed)?;
            let w = BufWriter::new(File::create(&out)?);
            match format {
                FormatArg::Bin => write_binary(&obs, w)?,
                FormatArg::Csv => write_csv(&obs, w)?,
            }
            println!("wrote {} ({} x {}, seed {seed})", out.display(), n, n);
        }
        Command::Estimate {
            model,
            estimator,
            input,
            n,
            seed,
            init,
            init_seed,
            max_iter,
            alpha,
            ls_lambda,
            trace,
        } => {
            let pair = model.pair()?;
            let id: EstimatorId = estimator.parse()?;
            let obs = match input {
                Some(path) => read_binary(BufReader::new(File::open(path)?))?,
                None => sample_matrix(&pair, &sample_signal(&pair.signal, n, seed), seed)?,
            };
            let init = match init {
                InitArg::Random => Init::Random { seed: init_seed },
                InitArg::Spectral => Init::Spectral,
            };
            let opts = AscentOptions {
                max_iter,
                ..AscentOptions::default()
            };
            let lambda = ls_lambda.unwrap_or(match pair.pseudo {
                Likelihood::Gaussian { slope, .. } => slope,
                _ => 1.0,
            });
            let mean = pair.signal.moments().0;
            let alpha_for = |p: &LikelihoodPair| -> Result<f64> {
                Ok(match alpha {
                    Some(a) => a,
                    None => default_alpha(&compute(p, &Method::Quadrature)?, mean),
                })
            };
            let ls_pair = || {
                let mut p = pair.clone();
                p.pseudo = ls_likelihood(lambda);
                p
            };
            let res = match id {
                EstimatorId::Pmle => pmle_gradient_ascent(&pair, &obs, &init, &opts)?,
                EstimatorId::PmleCorrected => {
                    pmle_score_corrected(&pair, &obs, alpha_for(&pair)?, &init, &opts)?
                }
                EstimatorId::Mle => mle_gradient_ascent(&pair, &obs, &init, &opts)?,
                EstimatorId::Ls | EstimatorId::LsCorrected => {
                    let a = if id.is_corrected() {
                        alpha_for(&ls_pair())?
                    } else {
                        0.0
                    };
                    least_squares_spectral(
                        &obs,
                        lambda,
                        &LsDomain::Bounded(pair.omega.clone()),
                        id.is_corrected(),
                        a,
                        &init,
                        &opts,
                    )?
                }
                EstimatorId::LsSpectral | EstimatorId::LsSpectralCorrected => {
                    let a = if id.is_corrected() {
                        alpha_for(&ls_pair())?
                    } else {
                        0.0
                    };
                    least_squares_spectral(
                        &obs,
                        lambda,
                        &LsDomain::AllSpace,
                        id.is_corrected(),
                        a,
                        &init,
                        &opts,
                    )?
                }
            };
            if let Some(path) = trace {
                write_trace_csv(&res, BufWriter::new(File::create(path)?))?;
            }
            let st = res.stats;
            println!("estimator S M v cos cos_with_ones objective_per_n converged iterations");
            println!(
                "{} {:.6} {:.6} {:.6} {:.6} {:.6} {:.6} {} {}",
                res.estimator_id,
                st.s,
                st.m,
                st.v,
                st.cos,
                res.cos_with_ones,
                res.objective / obs.n() as f64,
                res.converged,
                res.iterations
            );
        }
        Command::Parisi {
            model,
            betas,
            s,
            m,
            v,
            alpha,
            k_max,
            nodes,
            grid,
            step,
        } => {
            let pair = model.pair()?;
            let ip = match betas {
                Some(b) if b.len() == 4 => InfoParams::from_betas(b[0], b[1], b[2], b[3]),
                Some(_) => {
                    return Err(pml_core::Error::InvalidParameter {
                        name: "betas".into(),
                        reason: "expected b1,b2,b3,b4".into(),
                    })
                }
                None => compute(&pair, &Method::Quadrature)?,
            };
            let mut problem = ParisiProblem::new(ip, pair.omega.clone(), pair.signal.law());
            if let Some(a) = alpha {
                problem = problem.with_alpha(a);
            }
            let psi = PsiOptions {
                k_max,
                nodes,
                ..PsiOptions::default()
            };
            if grid {
                let set = maximizer_set(
                    &problem,
                    &GridOptions {
                        step,
                        psi,
                        ..GridOptions::default()
                    },
                )?;
                println!("S M v psi width");
                for p in &set.plateau {
                    println!(
                        "{:.4} {:.4} {} {:.6} {:.2e}",
                        p.s,
                        p.m,
                        p.v.map_or("-".into(), |v| format!("{v:.4}")),
                        p.psi,
                        p.width
                    );
                }
            } else {
                let (Some(s), Some(m)) = (s, m) else {
                    return Err(pml_core::Error::InvalidParameter {
                        name: "s/m".into(),
                        reason: "both are required without --grid".into(),
                    });
                };
                let r = minimize_psi(&problem, s, m, v, &psi)?;
                let c = &r.certificate;
                println!("psi {:.6}", r.psi);
                println!(
                    "bracket [{:.6}, {:.6}] width {:.3e}",
                    c.lower, c.upper, c.width
                );
                println!(
                    "extrapolation_error {:.3e} node_delta {:.3e} monotone {} converged {}",
                    c.extrapolation_error, c.node_delta, c.monotone, c.converged
                );
                for (l, phi) in &r.levels {
                    println!("L {l} phi {phi:.6}");
                }
            }
        }
        Command::Equivalence {
            a,
            b,
            alpha_a,
            alpha_b,
        } => {
            let pa = pml_core::likelihoods::builtin_from_spec(&a)?;
            let pb = pml_core::likelihoods::builtin_from_spec(&b)?;
            let ia = compute(&pa, &Method::Quadrature)?;
            let ib = compute(&pb, &Method::Quadrature)?;
            let rep = coarse_sufficient(&ia, &ib, &pa.omega, alpha_a, alpha_b)?;
            println!("{}: {ia}", pa.name);
            println!("{}: {ib}", pb.name);
            println!("strong {}", rep.strong);
            println!(
                "coarse {} (sqrt-beta1 form: {})",
                rep.coarse_sufficient, rep.coarse_sufficient_sqrt_beta1
            );
            for (label, r) in rep.labels.iter().zip(&rep.ratios) {
                println!(
                    "ratio {label} {}",
                    r.map_or("0/0".into(), |x| format!("{x:.6}"))
                );
            }
            for note in &rep.notes {
                println!("note: {note}");
            }
        }
        Command::Experiment { action } => match action {
            ExperimentAction::Run { config, output } => {
                let mut cfg = ExperimentConfig::resolve(&config)?;
                if let Some(dir) = output {
                    cfg = cfg.with_output(dir);
                }
                let outcome = harness::execute(&cfg)?;
                print!("{outcome}");
                println!("output: {}", cfg.output.display());
                return Ok(outcome.passed().unwrap_or(true));
            }
            ExperimentAction::Report { dir } => {
                let outcome = harness::report(&dir)?;
                print!("{outcome}");
                return Ok(outcome.passed().unwrap_or(true));
            }
            ExperimentAction::List => {
                for id in BUILTIN_EXPERIMENTS {
                    println!("{id}");
                }
            }
        },
    }
    Ok(true)
}
