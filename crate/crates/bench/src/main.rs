use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Duration;

use bomm::design::{maximin_lhd, LhdConfig};
use bomm::estimators::{batch_bomm_plus, DiagnosticConfig, Method, SearchConfig};
use bomm::marginal::{marginal_posteriors, write_trace, TailParams};
use bomm::testbed::{oracle_minimize, CUSTOM_EXP_LAMBDAS, Objective, OracleConfig, TestFunction};
use bomm::{fit, BommError, Dataset, Domain, FitConfig, ModelVariant, Result, RngState};
use bomm_bench::external::{parse_point, serve};
use bomm_bench::*;
use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "bomm", version, about = "Marginal-mean estimators for one-shot black-box optimization")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Args, Clone)]
struct Target {
    /// Built-in test function, e.g. wing_weight, piston or custom_exp@0.3.
    #[arg(long, conflicts_with = "command")]
    function: Option<String>,
    /// Shell command evaluating the objective (needs --domain).
    #[arg(long, requires = "domain")]
    command: Option<String>,
    /// JSON file with `lower` and `upper` arrays.
    #[arg(long)]
    domain: Option<PathBuf>,
    /// Keep one objective process alive and talk `EVAL`/`OK` to it.
    #[arg(long)]
    persistent: bool,
    /// Per-evaluation timeout in seconds.
    #[arg(long, default_value_t = 3600)]
    timeout: u64,
}

impl Target {
    fn resolve(&self) -> Result<ObjectiveSpec> {
        match (&self.function, &self.command) {
            (Some(f), None) => Ok(ObjectiveSpec::Builtin(f.parse()?)),
            (None, Some(cmd)) => {
                let path = self.domain.as_ref().expect("clap enforces --domain");
                let mode = if self.persistent {
                    ExternalMode::Persistent
                } else {
                    ExternalMode::PerProcess
                };
                let ext = ExternalObjective::new(cmd.clone(), Domain::load(path)?, mode)
                    .with_timeout(Duration::from_secs(self.timeout));
                Ok(ObjectiveSpec::External(ext))
            }
            _ => Err(BommError::InvalidParameter("give exactly one of --function or --command".into())),
        }
    }
}

#[derive(Args, Clone)]
struct ModelOpts {
    /// Threshold T on eta in the non-additivity diagnostic.
    #[arg(long, default_value_t = 0.4)]
    threshold: f64,
    /// Tail branch when xi > 1 - rho.
    #[arg(long, default_value_t = 0.3)]
    rho: f64,
    /// Importance samples for the diagnostic.
    #[arg(long, default_value_t = 2000)]
    n_is: usize,
    /// Points of the per-dimension search grid.
    #[arg(long, default_value_t = 1001)]
    grid: usize,
    /// Likelihood multistarts.
    #[arg(long, default_value_t = 10)]
    fit_starts: usize,
    /// Swap iterations of the maximin search (default 10000 d).
    #[arg(long)]
    maximin_iters: Option<usize>,
}

impl ModelOpts {
    fn diagnostic(&self) -> DiagnosticConfig {
        DiagnosticConfig {
            threshold: self.threshold,
            rho: self.rho,
            n_is: self.n_is,
            grid_size: self.grid,
            ..DiagnosticConfig::default()
        }
    }

    fn fit(&self, variant: ModelVariant) -> FitConfig {
        let mut f = FitConfig::new(variant);
        f.starts = self.fit_starts;
        f
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Csv,
    Json,
}

#[derive(Subcommand)]
enum Cmd {
    /// Maximin Latin hypercube design, written as CSV.
    Design {
        #[arg(long)]
        n: usize,
        #[arg(long)]
        d: Option<usize>,
        /// Scale the design to this function's domain (otherwise the unit cube).
        #[arg(long)]
        function: Option<String>,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long)]
        maximin_iters: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Replicated one-shot benchmark, one JSON line per (method, seed).
    Bench {
        #[command(flatten)]
        target: Target,
        /// Sample size (default 10 d).
        #[arg(long)]
        n: Option<usize>,
        #[arg(long, default_value_t = 20)]
        reps: usize,
        #[arg(long, value_delimiter = ',', default_value = "pw,sbo-sqexp,sbo-taag,sbo-tag,bomm-plus")]
        methods: Vec<String>,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Oracle fixture to use instead of the bundled one.
        #[arg(long)]
        oracle: Option<PathBuf>,
        /// Record wall_ms (makes the output run-dependent).
        #[arg(long)]
        timing: bool,
        #[command(flatten)]
        model: ModelOpts,
    },
    /// Brute-force minimum of a built-in function.
    Oracle {
        #[arg(long)]
        function: String,
        #[arg(long, default_value_t = 1_000_000)]
        budget: usize,
        #[arg(long, default_value_t = 20_240_601)]
        seed: u64,
        /// Fixture file to insert the record into (created if missing).
        #[arg(long)]
        update: Option<PathBuf>,
    },
    /// Batch-sequential loop: one estimate plus b-1 exploration points per batch.
    Batch {
        #[command(flatten)]
        target: Target,
        #[arg(long)]
        n_ini: usize,
        #[arg(long)]
        b: usize,
        #[arg(long)]
        budget: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        model: ModelOpts,
    },
    /// Per-method quartiles of a results file.
    Summarize {
        input: PathBuf,
        #[arg(long, value_enum, default_value = "csv")]
        format: Format,
    },
    /// Tail-branch rates on the custom exponential function.
    Nonadd {
        #[arg(long, value_delimiter = ',')]
        lambdas: Option<Vec<f64>>,
        #[arg(long, default_value_t = 90)]
        n: usize,
        #[arg(long, default_value_t = 10)]
        reps: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[command(flatten)]
        model: ModelOpts,
    },
    /// Fits a model to a CSV dataset (x1..xd,f) and reports an estimate.
    Optimize {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        domain: PathBuf,
        #[arg(long, default_value = "bomm-plus")]
        method: String,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Write fitted hyperparameters as JSON.
        #[arg(long)]
        dump: Option<PathBuf>,
        /// Write marginal mean, variance and tail mean profiles as CSV.
        #[arg(long)]
        trace: Option<PathBuf>,
        /// Tail level used in the trace.
        #[arg(long, default_value_t = 1.0)]
        alpha: f64,
        #[command(flatten)]
        model: ModelOpts,
    },
    /// Reads one CSV point per line on stdin and prints the function value.
    Eval {
        #[arg(long)]
        function: String,
    },
    /// Serves a built-in function over the `EVAL`/`OK` line protocol.
    Serve {
        #[arg(long)]
        function: String,
    },
}

fn output(path: &Option<PathBuf>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(File::create(p)?)),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    })
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Cmd::Design {
            n,
            d,
            function,
            seed,
            maximin_iters,
            out,
        } => {
            let f: Option<TestFunction> = function.map(|s| s.parse()).transpose()?;
            let dims = match (d, &f) {
                (Some(d), _) => d,
                (None, Some(f)) => f.dims(),
                (None, None) => return Err(BommError::InvalidParameter("give --d or --function".into())),
            };
            let mut cfg = LhdConfig::new(n, dims);
            if let Some(it) = maximin_iters {
                cfg.maximin_iters = it;
            }
            let mut design = maximin_lhd(&cfg, &mut RngState::new(seed).derive_str("design").rng())?;
            if let Some(f) = f {
                design = design.unscaled(&f.domain())?;
            }
            design.write_csv(output(&out)?)
        }
        Cmd::Bench {
            target,
            n,
            reps,
            methods,
            seed,
            out,
            oracle,
            timing,
            model,
        } => {
            let methods = methods.iter().map(|m| m.parse()).collect::<Result<Vec<Method>>>()?;
            let mut cfg = ExperimentConfig::new(target.resolve()?, methods);
            cfg.n = n;
            cfg.replications = reps;
            cfg.seed = seed;
            cfg.timing = timing;
            cfg.fit = model.fit(ModelVariant::Taag);
            cfg.diagnostic = model.diagnostic();
            cfg.search.grid_size = model.grid;
            cfg.maximin_iters = model.maximin_iters;
            let fixtures = load_oracle(oracle.as_deref())?;
            let records = run_experiment(&cfg, &fixtures)?;
            write_jsonl(&records, output(&out)?)
        }
        Cmd::Oracle {
            function,
            budget,
            seed,
            update,
        } => {
            let f: TestFunction = function.parse()?;
            let cfg = OracleConfig {
                budget,
                seed,
                ..OracleConfig::default()
            };
            let rec = oracle_minimize(&f, &cfg)?;
            println!("{}", serde_json::to_string(&rec)?);
            if let Some(path) = update {
                let mut fx = if path.exists() {
                    bomm::testbed::OracleFixtures::load(&path)?
                } else {
                    Default::default()
                };
                fx.upsert(rec);
                fx.save(&path)?;
            }
            Ok(())
        }
        Cmd::Batch {
            target,
            n_ini,
            b,
            budget,
            seed,
            out,
            model,
        } => {
            let spec = target.resolve()?;
            let mut batch = default_batch(n_ini, b, budget);
            batch.maximin_iters = model.maximin_iters;
            let traj = batch_bomm_plus(
                spec.as_objective(),
                &batch,
                &model.diagnostic(),
                &model.fit(ModelVariant::Taag),
                RngState::new(seed),
            )?;
            let mut w = output(&out)?;
            for r in batch_records(&traj) {
                writeln!(w, "{}", serde_json::to_string(&r)?)?;
            }
            w.flush()?;
            if let Some(msg) = traj.aborted {
                return Err(BommError::Evaluation(format!(
                    "stopped after {} evaluations: {msg}",
                    traj.evaluations
                )));
            }
            Ok(())
        }
        Cmd::Summarize { input, format } => {
            let records = read_jsonl(BufReader::new(File::open(input)?))?;
            let summaries = summarize(&records);
            let mut w = output(&None)?;
            match format {
                Format::Csv => write_summary_csv(&summaries, w)?,
                Format::Json => {
                    for s in &summaries {
                        writeln!(w, "{}", serde_json::to_string(s)?)?;
                    }
                    w.flush()?;
                }
            }
            Ok(())
        }
        Cmd::Nonadd {
            lambdas,
            n,
            reps,
            seed,
            model,
        } => {
            let lambdas = lambdas.unwrap_or_else(|| CUSTOM_EXP_LAMBDAS.to_vec());
            let f = TestFunction::custom_exp(lambdas[0])?;
            let mut cfg = ExperimentConfig::new(ObjectiveSpec::Builtin(f), vec![Method::BommPlus]);
            cfg.n = Some(n);
            cfg.replications = reps;
            cfg.seed = seed;
            cfg.fit = model.fit(ModelVariant::Taag);
            cfg.diagnostic = model.diagnostic();
            cfg.maximin_iters = model.maximin_iters;
            let rates = run_nonadditivity_suite(&lambdas, &cfg)?;
            write_branch_rates_csv(&rates, output(&None)?)
        }
        Cmd::Optimize {
            data,
            domain,
            method,
            seed,
            dump,
            trace,
            alpha,
            model,
        } => {
            let method: Method = method.parse()?;
            let dom = Domain::load(domain)?;
            let data = Dataset::load_csv(dom, data)?;
            let rs = RngState::new(seed);
            let est = match method {
                Method::Pw => bomm::estimators::pick_the_winner(&data)?,
                m => {
                    let variant = m.model_variant().expect("surrogate method");
                    let fitted = fit(&data, &model.fit(variant), rs.derive_str("fit"))?;
                    if let Some(p) = &dump {
                        std::fs::write(p, serde_json::to_string_pretty(&fitted.dump())? + "\n")?;
                    }
                    if let Some(p) = &trace {
                        let profiles = marginal_posteriors(&fitted, model.grid)?;
                        write_trace(&profiles, &TailParams::new(alpha)?, File::create(p)?)?;
                    }
                    let search = SearchConfig {
                        grid_size: model.grid,
                        ..SearchConfig::default()
                    };
                    estimate_with_model(m, &fitted, &model.diagnostic(), &search, rs.derive_str(m.label()))?
                }
            };
            println!("{}", serde_json::to_string(&est)?);
            Ok(())
        }
        Cmd::Eval { function } => {
            let f: TestFunction = function.parse()?;
            let mut input = String::new();
            io::stdin().read_to_string(&mut input)?;
            let mut w = output(&None)?;
            for line in input.lines().filter(|l| !l.trim().is_empty()) {
                writeln!(w, "{:?}", f.evaluate(&parse_point(line)?)?)?;
            }
            w.flush()?;
            Ok(())
        }
        Cmd::Serve { function } => {
            let f: TestFunction = function.parse()?;
            serve(&f, io::stdin().lock(), io::stdout().lock())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
