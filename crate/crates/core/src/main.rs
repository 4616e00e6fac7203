use std::fs::File;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use fimatch::data::{load_samples, write_fractional, MatchingProblem, RoleMap};
use fimatch::engine::{pps_collapse, run_matching, EmConfig, EmTrace, Method};
use fimatch::measurement::{
    fit_calibration, naive_estimator, run_em_me, wrc_estimator, CalibrationSpec, MeDonors, MeVariant,
};
use fimatch::models::{ConditionalModel, LogisticModel};
use fimatch::rng::{derive_seed, substream, tags};
use fimatch::scoretest::{confidence_set, matching_setup, score_test, ConfidenceSet, ScoreTestResult};
use fimatch::simlab::{format_table, run_study, write_csv, Estimator, StudyConfig, StudyKind};
use fimatch::splitq::{fit_theta_splitq, impute_y2_for_a, imputed_mean_mu2, SplitqEstimate};
use fimatch::twostage::{two_stage_least_squares, TslsSummary};
use fimatch::variance::{mle_variance, StageA, VarianceReport};
use fimatch::{engine::Recipients, FiError};

/// Statistical matching and measurement-error correction by fractional imputation.
#[derive(Parser)]
#[command(name = "fimatch", version)]
struct Cli {
    /// Worker threads (default: all cores). FIMATCH_THREADS takes precedence.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fuse two samples by fractional imputation of y1 into sample B.
    Match(MatchArgs),
    /// Monte Carlo study.
    Simulate(SimulateArgs),
    /// Measurement-error correction with an external calibration sample.
    MeCorrect(MeArgs),
    /// Two-stage least squares with x2 as instruments.
    Tsls(TslsArgs),
    /// Split-questionnaire imputation and the imputed mean of y2.
    Splitq(SplitqArgs),
    /// Score test for one outcome-model parameter, with optional test inversion.
    ScoreTest(ScoreArgs),
}

#[derive(Args, Serialize, Clone)]
struct SampleArgs {
    /// CSV with x and y1 (an optional `weight` column).
    #[arg(long)]
    sample_a: PathBuf,
    /// CSV with x and y2 (an optional `weight` column).
    #[arg(long)]
    sample_b: PathBuf,
    /// Outcome-model covariates, comma separated.
    #[arg(long, value_delimiter = ',')]
    x1: Vec<String>,
    /// Instruments, comma separated.
    #[arg(long, value_delimiter = ',', required = true)]
    x2: Vec<String>,
    #[arg(long)]
    y1: String,
    #[arg(long)]
    y2: String,
}

impl SampleArgs {
    fn load(&self) -> fimatch::Result<MatchingProblem> {
        let x1: Vec<&str> = self.x1.iter().map(String::as_str).collect();
        let x2: Vec<&str> = self.x2.iter().map(String::as_str).collect();
        load_samples(&self.sample_a, &self.sample_b, &RoleMap::new(&x1, &x2, &self.y1, &self.y2))
    }
}

#[derive(Args, Serialize, Clone)]
struct EmArgs {
    /// Imputations per recipient.
    #[arg(long, default_value_t = 10)]
    m: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Stop when the largest parameter change is below this.
    #[arg(long, default_value_t = 1e-8)]
    tol: f64,
    #[arg(long, default_value_t = 500)]
    max_iter: usize,
}

impl EmArgs {
    fn config(&self, method: Method) -> EmConfig {
        EmConfig {
            m: self.m,
            tol: self.tol,
            max_iter: self.max_iter,
            seed: self.seed,
            method,
        }
    }
}

#[derive(Args, Serialize)]
struct MatchArgs {
    #[command(flatten)]
    samples: SampleArgs,
    /// pfi, hdfi or sri.
    #[arg(long, default_value = "pfi")]
    method: String,
    #[command(flatten)]
    em: EmArgs,
    /// Fused CSV output.
    #[arg(long)]
    out: PathBuf,
    /// JSON report.
    #[arg(long)]
    report: PathBuf,
    /// Collapse to one donor per recipient, drawn with probability equal to its weight.
    #[arg(long)]
    collapse_pps: bool,
}

#[derive(Args, Serialize)]
struct SimulateArgs {
    /// sim1, sim1-sens, sim2 or splitq.
    study: String,
    #[arg(long)]
    reps: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Instrument violation in sim1-sens.
    #[arg(long)]
    rho: Option<f64>,
    #[arg(long)]
    m: Option<usize>,
    /// Size of each of samples A and B.
    #[arg(long)]
    n: Option<usize>,
    /// Estimators, comma separated (default depends on the study).
    #[arg(long, value_delimiter = ',')]
    methods: Vec<String>,
    /// Skip linearization variance estimates.
    #[arg(long)]
    no_variance: bool,
    /// Summary CSV.
    #[arg(long)]
    out: PathBuf,
    /// Text table (also printed to stdout).
    #[arg(long)]
    table: Option<PathBuf>,
    /// JSON with the configuration, summary and per-replicate records.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args, Serialize)]
struct MeArgs {
    /// Calibration sample with the true covariate and its proxy.
    #[arg(long)]
    sample_a: PathBuf,
    /// Main sample with the proxy and the binary response.
    #[arg(long)]
    sample_b: PathBuf,
    /// True covariate column (sample A).
    #[arg(long)]
    x: String,
    /// Proxy column (both samples).
    #[arg(long)]
    z: String,
    /// Binary response column (sample B).
    #[arg(long)]
    y: String,
    /// direct, working (pfi) or hdfi.
    #[arg(long, default_value = "working")]
    variant: String,
    #[command(flatten)]
    em: EmArgs,
    #[arg(long)]
    report: PathBuf,
}

impl MeArgs {
    fn load(&self) -> fimatch::Result<MatchingProblem> {
        load_samples(&self.sample_a, &self.sample_b, &RoleMap::new(&[], &[&self.z], &self.x, &self.y))
    }
}

#[derive(Args, Serialize)]
struct TslsArgs {
    #[command(flatten)]
    samples: SampleArgs,
    #[arg(long)]
    report: PathBuf,
}

#[derive(Args, Serialize)]
struct SplitqArgs {
    #[command(flatten)]
    samples: SampleArgs,
    #[command(flatten)]
    em: EmArgs,
    /// Fused CSV of sample B with imputed y1.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    report: PathBuf,
}

#[derive(Args, Serialize)]
struct ScoreArgs {
    /// matching (normal outcome, CSV roles as in `match`) or me (logistic outcome).
    #[arg(long, default_value = "matching")]
    setting: String,
    /// Sample A (matching) or the calibration sample (me).
    #[arg(long)]
    sample_a: PathBuf,
    /// Sample B (matching) or the main sample (me).
    #[arg(long)]
    sample_b: PathBuf,
    /// Outcome-model covariates (matching only).
    #[arg(long, value_delimiter = ',')]
    x1: Vec<String>,
    /// Instruments (matching) or the proxy column (me).
    #[arg(long, value_delimiter = ',', required = true)]
    x2: Vec<String>,
    /// y1 (matching) or the true covariate (me).
    #[arg(long)]
    y1: String,
    /// y2 (matching) or the binary response (me).
    #[arg(long)]
    y2: String,
    /// pfi or hdfi (matching); working, direct or hdfi (me).
    #[arg(long, default_value = "pfi")]
    method: String,
    /// Index of the tested outcome parameter (default: the y1 coefficient).
    #[arg(long)]
    param: Option<usize>,
    /// Value of the tested parameter under the null.
    #[arg(long)]
    null_value: f64,
    /// Test size; the confidence level is 1 - alpha.
    #[arg(long, default_value_t = 0.05)]
    alpha: f64,
    /// Treat stage-A parameters as known.
    #[arg(long)]
    known_stage_a: bool,
    /// Confidence-set grid `lo,hi`.
    #[arg(long, value_delimiter = ',', allow_negative_numbers = true)]
    grid: Option<Vec<f64>>,
    /// Grid points for the confidence set.
    #[arg(long, default_value_t = 201)]
    grid_points: usize,
    #[command(flatten)]
    em: EmArgs,
    #[arg(long)]
    report: PathBuf,
}

#[derive(Serialize)]
struct RunReport<C: Serialize, P: Serialize> {
    command: &'static str,
    config: C,
    method: String,
    estimates: P,
    covariance: Option<VarianceReport>,
    iterations: usize,
    converged: bool,
    trace: EmTrace,
    seconds: f64,
}

enum Outcome {
    Done,
    NotConverged,
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> fimatch::Result<()> {
    let io = |source| FiError::Io {
        path: path.display().to_string(),
        source,
    };
    let mut f = File::create(path).map_err(io)?;
    let text = serde_json::to_string_pretty(value).map_err(|e| FiError::Argument(e.to_string()))?;
    f.write_all(text.as_bytes()).map_err(io)?;
    f.write_all(b"\n").map_err(io)
}

fn status(converged: bool) -> Outcome {
    if converged {
        Outcome::Done
    } else {
        Outcome::NotConverged
    }
}

#[derive(Serialize)]
struct MatchEstimates {
    theta1: Vec<f64>,
    theta2: Vec<f64>,
    standard_errors: Option<Vec<f64>>,
}

fn cmd_match(args: &MatchArgs) -> fimatch::Result<Outcome> {
    let t = Instant::now();
    let method: Method = args.method.parse()?;
    let problem = args.samples.load()?;
    let fit = run_matching(&problem, &args.em.config(method))?;
    let cov = if method == Method::Sri {
        None
    } else {
        Some(mle_variance(&fit.donors, &fit.recipients, &fit.dataset, &fit.theta.theta2, StageA::Estimated)?)
    };
    if args.collapse_pps {
        let mut rng = substream(derive_seed(args.em.seed, tags::PPS), 0);
        write_fractional(&pps_collapse(&fit.dataset, &mut rng), &problem, &args.out)?;
    } else {
        write_fractional(&fit.dataset, &problem, &args.out)?;
    }
    let report = RunReport {
        command: "match",
        config: args,
        method: args.method.to_lowercase(),
        estimates: MatchEstimates {
            theta1: fit.theta.theta1.params().iter().copied().collect(),
            theta2: fit.theta.theta2.params().iter().copied().collect(),
            standard_errors: cov.as_ref().map(VarianceReport::standard_errors),
        },
        covariance: cov,
        iterations: fit.iterations,
        converged: fit.converged,
        trace: fit.trace,
        seconds: t.elapsed().as_secs_f64(),
    };
    write_json(&args.report, &report)?;
    Ok(status(fit.converged))
}

fn cmd_simulate(args: &SimulateArgs) -> fimatch::Result<Outcome> {
    let study: StudyKind = args.study.parse()?;
    let mut config = StudyConfig::default_for(study);
    if let Some(r) = args.reps {
        config.replicates = r;
    }
    if let Some(s) = args.seed {
        config.seed = s;
    }
    if let Some(m) = args.m {
        config.m = m;
    }
    if let Some(n) = args.n {
        config.n_a = n;
        config.n_b = n;
    }
    if args.rho.is_some() {
        config.rho = args.rho;
    }
    if !args.methods.is_empty() {
        config.methods = args.methods.iter().map(|m| m.parse()).collect::<fimatch::Result<Vec<Estimator>>>()?;
    }
    config.variance = !args.no_variance;
    let summary = run_study(&config)?;
    let table = format_table(&summary);
    print!("{table}");
    let io = |p: &Path| {
        let p = p.display().to_string();
        move |source| FiError::Io { path: p, source }
    };
    write_csv(&summary, File::create(&args.out).map_err(io(&args.out))?)?;
    if let Some(p) = &args.table {
        std::fs::write(p, &table).map_err(io(p))?;
    }
    if let Some(p) = &args.report {
        write_json(p, &summary)?;
    }
    let failed = summary.failures().len();
    if failed > 0 {
        eprintln!("{failed} estimator runs failed; see the report for reasons");
    }
    Ok(Outcome::Done)
}

#[derive(Serialize)]
struct MeEstimates {
    gamma: Vec<f64>,
    standard_errors: Vec<f64>,
    naive: Vec<f64>,
    wrc: Vec<f64>,
    wrc_excluded: usize,
}

fn cmd_me(args: &MeArgs) -> fimatch::Result<Outcome> {
    let t = Instant::now();
    let variant: MeVariant = args.variant.parse()?;
    let problem = args.load()?;
    let spec = if variant == MeVariant::Direct {
        CalibrationSpec::Direct
    } else {
        CalibrationSpec::Working
    };
    let calib = fit_calibration(&problem, spec)?;
    let start = LogisticModel::new(0.0, vec![0.0])?;
    let fit = run_em_me(&problem, &calib, &start, &args.em.config(Method::Pfi), variant)?;
    let cov = mle_variance(&fit.donors, &fit.recipients, &fit.dataset, &fit.outcome, StageA::Estimated)?;
    let naive = naive_estimator(&problem)?;
    let wrc = wrc_estimator(&problem)?;
    let pair = |m: &LogisticModel| vec![m.gamma0, m.gamma_x[0]];
    let report = RunReport {
        command: "me-correct",
        config: args,
        method: args.variant.to_lowercase(),
        estimates: MeEstimates {
            gamma: pair(&fit.outcome),
            standard_errors: cov.standard_errors(),
            naive: pair(&naive),
            wrc: pair(&wrc.outcome),
            wrc_excluded: wrc.excluded,
        },
        covariance: Some(cov),
        iterations: fit.iterations,
        converged: fit.converged,
        trace: fit.trace,
        seconds: t.elapsed().as_secs_f64(),
    };
    write_json(&args.report, &report)?;
    Ok(status(fit.converged))
}

#[derive(Serialize)]
struct TslsReport<'a> {
    command: &'static str,
    config: &'a TslsArgs,
    estimates: TslsSummary,
}

fn cmd_tsls(args: &TslsArgs) -> fimatch::Result<Outcome> {
    let problem = args.samples.load()?;
    let fit = two_stage_least_squares(&problem)?;
    write_json(
        &args.report,
        &TslsReport {
            command: "tsls",
            config: args,
            estimates: fit.summary(),
        },
    )?;
    Ok(Outcome::Done)
}

#[derive(Serialize)]
struct SplitqEstimates {
    theta1: Vec<f64>,
    theta2: Vec<f64>,
    mu2: SplitqEstimate,
}

fn cmd_splitq(args: &SplitqArgs) -> fimatch::Result<Outcome> {
    let t = Instant::now();
    let problem = args.samples.load()?;
    let fit = fit_theta_splitq(&problem, &args.em.config(Method::Pfi))?;
    let imputed = impute_y2_for_a(&problem, &fit.theta.theta2, args.em.m, args.em.seed)?;
    let mu2 = imputed_mean_mu2(&problem, &fit, &imputed)?;
    if let Some(out) = &args.out {
        write_fractional(&fit.dataset, &problem, out)?;
    }
    let cov = mle_variance(&fit.donors, &fit.recipients, &fit.dataset, &fit.theta.theta2, StageA::Estimated)?;
    let report = RunReport {
        command: "splitq",
        config: args,
        method: "pfi".into(),
        estimates: SplitqEstimates {
            theta1: fit.theta.theta1.params().iter().copied().collect(),
            theta2: fit.theta.theta2.params().iter().copied().collect(),
            mu2,
        },
        covariance: Some(cov),
        iterations: fit.iterations,
        converged: fit.converged,
        trace: fit.trace,
        seconds: t.elapsed().as_secs_f64(),
    };
    write_json(&args.report, &report)?;
    Ok(status(fit.converged))
}

#[derive(Serialize)]
struct ScoreReport<'a> {
    command: &'static str,
    config: &'a ScoreArgs,
    test: ScoreTestResult,
    rejected: bool,
    confidence_set: Option<ConfidenceSet>,
}

fn cmd_score(args: &ScoreArgs) -> fimatch::Result<Outcome> {
    let stage_a = if args.known_stage_a { StageA::Known } else { StageA::Estimated };
    let x1: Vec<&str> = args.x1.iter().map(String::as_str).collect();
    let x2: Vec<&str> = args.x2.iter().map(String::as_str).collect();
    let roles = RoleMap::new(&x1, &x2, &args.y1, &args.y2);
    let problem = load_samples(&args.sample_a, &args.sample_b, &roles)?;
    let grid = match args.grid.as_deref() {
        None => None,
        Some([lo, hi]) => Some((*lo, *hi)),
        Some(_) => return Err(FiError::Argument("--grid takes exactly two values lo,hi".into())),
    };
    let (test, set) = match args.setting.as_str() {
        "matching" => {
            let method: Method = args.method.parse()?;
            let (donors, rec, start) = matching_setup(&problem, method)?;
            let k = args.param.unwrap_or(x1.len() + 1);
            let config = args.em.config(method);
            let test = score_test(&donors, &rec, &start, &[(k, args.null_value)], &config, stage_a)?;
            let set = grid
                .map(|g| confidence_set(&donors, &rec, &start, k, g, args.grid_points, args.alpha, &config, stage_a))
                .transpose()?;
            (test, set)
        }
        "me" => {
            let variant: MeVariant = args.method.parse()?;
            let spec = if variant == MeVariant::Direct {
                CalibrationSpec::Direct
            } else {
                CalibrationSpec::Working
            };
            let calib = fit_calibration(&problem, spec)?;
            let donors = MeDonors::new(&problem, &calib, variant)?;
            let rec = Recipients::from_problem(&problem);
            let start = LogisticModel::new(0.0, vec![0.0])?;
            let k = args.param.unwrap_or(1);
            let config = args.em.config(Method::Pfi);
            let test = score_test(&donors, &rec, &start, &[(k, args.null_value)], &config, stage_a)?;
            let set = grid
                .map(|g| confidence_set(&donors, &rec, &start, k, g, args.grid_points, args.alpha, &config, stage_a))
                .transpose()?;
            (test, set)
        }
        other => return Err(FiError::Argument(format!("--setting must be matching or me, got `{other}`"))),
    };
    let converged = test.converged;
    write_json(
        &args.report,
        &ScoreReport {
            command: "score-test",
            config: args,
            rejected: test.rejects(args.alpha),
            test,
            confidence_set: set,
        },
    )?;
    Ok(status(converged))
}

fn threads(flag: Option<usize>) -> Result<Option<usize>, String> {
    match std::env::var("FIMATCH_THREADS") {
        Ok(v) => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| format!("FIMATCH_THREADS must be a positive integer, got `{v}`")),
        Err(_) => Ok(flag),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match threads(cli.threads) {
        Ok(Some(n)) if n > 0 => {
            if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
                eprintln!("error: {e}");
                return ExitCode::from(1);
            }
        }
        Ok(Some(_)) => {
            eprintln!("error: thread count must be positive");
            return ExitCode::from(1);
        }
        Ok(None) => {}
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    }
    let result = match &cli.command {
        Command::Match(a) => cmd_match(a),
        Command::Simulate(a) => cmd_simulate(a),
        Command::MeCorrect(a) => cmd_me(a),
        Command::Tsls(a) => cmd_tsls(a),
        Command::Splitq(a) => cmd_splitq(a),
        Command::ScoreTest(a) => cmd_score(a),
    };
    match result {
        Ok(Outcome::Done) => ExitCode::SUCCESS,
        Ok(Outcome::NotConverged) => {
            eprintln!("warning: EM did not converge; outputs were written");
            ExitCode::from(2)
        }
        Err(e @ FiError::NonConvergence { .. }) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
