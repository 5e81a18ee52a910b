//! `strata-u`: heterogeneity tests on stratified observational data,
//! simulation presets and dataset checks.
//!
//! Exit codes: 0 success, 2 usage or validation error, 3 numerical failure.

mod summary;

use std::fs::File;
use std::io::{self, BufReader, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use strata_u::data::{load_dataset, load_strata, HFunction, Schema};
use strata_u::inference::{adjusted_u_test, lrt_test, HeterogeneityReport, LrtReport, TestConfig};
use strata_u::report::{fmt17, to_json};
use strata_u::simgen::{preset_grid, run_experiment, ErrorDist, ExperimentConfig, Preset};
use strata_u::ustat::{KernelPolicy, SampleSize};
use strata_u::{Error, Exec, TrimPolicy};

#[derive(Parser, Debug)]
#[command(name = "strata-u", version, about = "Propensity-adjusted U tests for treatment-effect heterogeneity across strata")]
struct Cli {
    /// Worker threads (default: all available cores). Results do not depend on it.
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run the global heterogeneity test on a CSV file.
    Test(TestArgs),
    /// Run a simulation preset and write a result table.
    Simulate(SimulateArgs),
    /// Summarise group sizes and covariate balance without testing.
    Validate(ValidateArgs),
}

#[derive(Args, Debug)]
struct SchemaArgs {
    /// Input CSV file with a header row.
    #[arg(long)]
    input: PathBuf,
    /// Stratum label column.
    #[arg(long, default_value = "stratum")]
    stratum_col: String,
    /// Treatment column; values 0/1 or true/false.
    #[arg(long, default_value = "treatment")]
    treatment_col: String,
    /// Outcome column.
    #[arg(long, default_value = "outcome")]
    outcome_col: String,
    /// Comma-separated covariate columns for the propensity model.
    #[arg(long, value_delimiter = ',')]
    covariates: Vec<String>,
}

impl SchemaArgs {
    fn schema(&self) -> Schema {
        Schema {
            stratum_col: self.stratum_col.clone(),
            treatment_col: self.treatment_col.clone(),
            outcome_col: self.outcome_col.clone(),
            covariates: self.covariates.iter().filter(|c| !c.is_empty()).cloned().collect(),
            ..Schema::default()
        }
    }

    fn open(&self) -> Result<BufReader<File>, Error> {
        File::open(&self.input)
            .map(BufReader::new)
            .map_err(|e| Error::InvalidArgument(format!("cannot open {}: {e}", self.input.display())))
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum HArg {
    One,
    Treated,
    Control,
    Overlap,
}

impl From<HArg> for HFunction {
    fn from(h: HArg) -> Self {
        match h {
            HArg::One => HFunction::One,
            HArg::Treated => HFunction::Treated,
            HArg::Control => HFunction::Control,
            HArg::Overlap => HFunction::Overlap,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum TrimArg {
    None,
    Overlap,
    Hard,
    Both,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum KernelArg {
    /// Exact up to 1e7 tuples per pair, sampled above.
    Auto,
    /// Always exact.
    Exact,
    /// Always sampled, m = k N tuples per pair.
    Sampled,
}

#[derive(Clone, Copy, Debug, PartialEq, ValueEnum)]
enum Format {
    Json,
    Tsv,
}

#[derive(Args, Debug)]
struct MethodArgs {
    /// Target population: one (combined), treated, control or overlap.
    #[arg(long, value_enum, default_value = "one")]
    h: HArg,
    /// Propensity trimming rule applied before weighting (followed by a refit).
    #[arg(long, value_enum, default_value = "overlap")]
    trim: TrimArg,
    /// Threshold for hard trimming: keep e in [gamma, 1 - gamma], 0 < gamma < 0.5.
    #[arg(long)]
    gamma: Option<f64>,
    /// Kernel evaluation mode.
    #[arg(long, value_enum, default_value = "auto")]
    kernel: KernelArg,
    /// Sampled tuples per pair as a multiple of the total sample size N.
    #[arg(long, default_value_t = 1000)]
    kernel_samples: u64,
    /// Number of reference draws L for the p-value.
    #[arg(long, default_value_t = 100_000)]
    ref_samples: usize,
    /// Significance level.
    #[arg(long, default_value_t = 0.05)]
    alpha: f64,
}

impl MethodArgs {
    fn trim_policy(&self) -> Result<TrimPolicy, Error> {
        let gamma = || {
            let g = self
                .gamma
                .ok_or_else(|| Error::InvalidArgument("--gamma is required for --trim hard/both".into()))?;
            if !(g > 0.0 && g < 0.5) {
                return Err(Error::InvalidArgument(format!("--gamma must lie in (0, 0.5), got {g}")));
            }
            Ok(g)
        };
        Ok(match self.trim {
            TrimArg::None => TrimPolicy::None,
            TrimArg::Overlap => TrimPolicy::Overlap,
            TrimArg::Hard => TrimPolicy::Hard { gamma: gamma()? },
            TrimArg::Both => TrimPolicy::Both { gamma: gamma()? },
        })
    }

    fn config(&self, exec: Exec) -> Result<TestConfig, Error> {
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::InvalidArgument(format!("--alpha must lie in (0, 1), got {}", self.alpha)));
        }
        if self.kernel_samples == 0 || self.ref_samples == 0 {
            return Err(Error::InvalidArgument("--kernel-samples and --ref-samples must be positive".into()));
        }
        let samples = SampleSize::PerSubject(self.kernel_samples);
        let kernel = match self.kernel {
            KernelArg::Auto => KernelPolicy::Auto {
                max_exact_tuples: 10_000_000,
                samples,
            },
            KernelArg::Exact => KernelPolicy::Exact,
            KernelArg::Sampled => KernelPolicy::Sampled { samples },
        };
        Ok(TestConfig {
            h: self.h.into(),
            trim: self.trim_policy()?,
            kernel,
            reference_draws: self.ref_samples,
            alpha: self.alpha,
            max_statistic: false,
            exec,
        })
    }
}

#[derive(Args, Debug)]
struct TestArgs {
    #[command(flatten)]
    schema: SchemaArgs,
    #[command(flatten)]
    method: MethodArgs,
    /// Seed for kernel sampling and reference draws (required).
    #[arg(long)]
    seed: u64,
    /// Also run the regression likelihood-ratio test.
    #[arg(long)]
    with_lrt: bool,
    /// Also report the max-statistic sqrt(N) max |U - 1/2| (experimental).
    #[arg(long)]
    max_stat: bool,
    /// Output file (default: standard output).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Output format.
    #[arg(long, value_enum, default_value = "json")]
    format: Format,
}

#[derive(Args, Debug)]
struct SimulateArgs {
    /// validity, power or sensitivity.
    #[arg(long)]
    preset: String,
    /// Seed for the whole experiment (required).
    #[arg(long)]
    seed: u64,
    /// Replications per cell (default 500, or 2000 with --full-scale).
    #[arg(long)]
    reps: Option<usize>,
    /// Restrict to one error distribution: normal, uniform, t4, bimodal.
    #[arg(long)]
    error: Option<String>,
    /// Subjects per stratum.
    #[arg(long)]
    n: Option<usize>,
    /// Full-scale settings (2000 reps, m = 1000 N, L = 1e5) instead of desk scale (500, 200 N, 2e4).
    #[arg(long)]
    full_scale: bool,
    /// Nominal level for the rejection rates.
    #[arg(long, default_value_t = 0.05)]
    alpha: f64,
    /// Output file (default: standard output).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Output format.
    #[arg(long, value_enum, default_value = "tsv")]
    format: Format,
}

#[derive(Args, Debug)]
struct ValidateArgs {
    #[command(flatten)]
    schema: SchemaArgs,
    /// Target population used for the weighted columns.
    #[arg(long, value_enum, default_value = "one")]
    h: HArg,
    /// Trimming rule used for the weighted columns.
    #[arg(long, value_enum, default_value = "overlap")]
    trim: TrimArg,
    /// Threshold for hard trimming.
    #[arg(long)]
    gamma: Option<f64>,
    /// Write the JSON (or TSV) summary here.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Output format.
    #[arg(long, value_enum, default_value = "json")]
    format: Format,
}

#[derive(Serialize)]
struct TestOutput<'a> {
    #[serde(flatten)]
    report: &'a HeterogeneityReport,
    #[serde(skip_serializing_if = "Option::is_none")]
    lrt: Option<&'a LrtReport>,
}

fn write_output(out: Option<&Path>, text: &str) -> Result<(), Error> {
    match out {
        Some(path) => std::fs::write(path, text)?,
        None => {
            let mut stdout = io::stdout().lock();
            stdout.write_all(text.as_bytes())?;
            stdout.flush()?;
        }
    }
    Ok(())
}

fn exec_for(threads: Option<usize>) -> Exec {
    if threads == Some(1) {
        Exec::Sequential
    } else {
        Exec::Parallel
    }
}

fn report_tsv(r: &HeterogeneityReport, lrt: Option<&LrtReport>) -> String {
    let mut s = String::from("p\tq\tp_id\tq_id\tu\tci_lo\tci_hi\tsigma2\tmode\tn_eval\n");
    for p in &r.pairs {
        s.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\n",
            p.p,
            p.q,
            p.p_id,
            p.q_id,
            fmt17(p.u),
            fmt17(p.ci_lo),
            fmt17(p.ci_hi),
            fmt17(p.sigma2),
            serde_json::to_value(p.mode).ok().and_then(|v| v.as_str().map(String::from)).unwrap_or_default(),
            p.n_eval
        ));
    }
    s.push_str(&format!("# t_a\t{}\n# p_value\t{}\n# seed\t{}\n", fmt17(r.t_a), fmt17(r.p_value), r.seed));
    if let Some(l) = lrt {
        s.push_str(&format!("# lrt_statistic\t{}\n# lrt_p_value\t{}\n", fmt17(l.statistic), fmt17(l.p_value)));
    }
    s
}

fn cmd_test(args: &TestArgs, exec: Exec) -> Result<(), Error> {
    let mut cfg = args.method.config(exec)?;
    cfg.max_statistic = args.max_stat;
    let ds = load_dataset(args.schema.open()?, &args.schema.schema())?;
    let report = adjusted_u_test(&ds, &cfg, args.seed)?;
    let lrt = if args.with_lrt { Some(lrt_test(&ds)?) } else { None };
    println!(
        "T_a={} p={} S={} N={}",
        report.t_a, report.p_value, report.num_strata, report.n_total
    );
    let text = match args.format {
        Format::Json => {
            let mut t = to_json(&TestOutput {
                report: &report,
                lrt: lrt.as_ref(),
            })?;
            t.push('\n');
            t
        }
        Format::Tsv => report_tsv(&report, lrt.as_ref()),
    };
    write_output(args.out.as_deref(), &text)
}

fn cmd_simulate(args: &SimulateArgs, exec: Exec) -> Result<(), Error> {
    let preset: Preset = args.preset.parse()?;
    let error = args.error.as_deref().map(str::parse::<ErrorDist>).transpose()?;
    if !(args.alpha > 0.0 && args.alpha < 1.0) {
        return Err(Error::InvalidArgument(format!("--alpha must lie in (0, 1), got {}", args.alpha)));
    }
    let (cells, methods) = preset_grid(preset, args.n, error)?;
    let base = if args.full_scale {
        ExperimentConfig::full(args.seed)
    } else {
        ExperimentConfig::desk(args.seed)
    };
    let cfg = ExperimentConfig {
        reps: args.reps.unwrap_or(base.reps),
        alpha: args.alpha,
        exec,
        ..base
    };
    let table = run_experiment(&cells, &methods, &cfg);
    let text = match args.format {
        Format::Tsv => format!("# seed\t{}\n{}", table.seed, table.to_tsv()),
        Format::Json => to_json(&table)? + "\n",
    };
    write_output(args.out.as_deref(), &text)
}

fn cmd_validate(args: &ValidateArgs) -> Result<(), Error> {
    let trim = MethodArgs {
        h: args.h,
        trim: args.trim,
        gamma: args.gamma,
        kernel: KernelArg::Auto,
        kernel_samples: 1,
        ref_samples: 1,
        alpha: 0.05,
    }
    .trim_policy()?;
    let schema = args.schema.schema();
    let strata = load_strata(args.schema.open()?, &schema)?;
    let summary = summary::summarise(&strata, &schema.covariates, args.h.into(), trim);
    print!("{}", summary.human());
    if let Some(out) = &args.out {
        let text = match args.format {
            Format::Json => to_json(&summary)? + "\n",
            Format::Tsv => summary.tsv(),
        };
        write_output(Some(out), &text)?;
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("error: --threads must be at least 1");
            return ExitCode::from(2);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: cannot configure thread pool: {e}");
            return ExitCode::from(2);
        }
    }
    let exec = exec_for(cli.threads);
    let result = match &cli.command {
        Command::Test(a) => cmd_test(a, exec),
        Command::Simulate(a) => cmd_simulate(a, exec),
        Command::Validate(a) => cmd_validate(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_numerical() { 3 } else { 2 })
        }
    }
}
