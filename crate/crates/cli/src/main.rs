//! `micl`: clustering with variable selection from the command line.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.

mod report;

use std::fs::File;
use std::io::BufReader;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use micl_core::estimation::EmConfig;
use micl_core::rng::stream;
use micl_core::simulation::{adjusted_rand_index, run_table_experiment, DesignRegistry, ExperimentConfig};
use micl_core::{
    fit_em, load_data, load_labeled, select_model, CriterionRegistry, DataMatrix, Error,
    Hyperparams, ModelSpec, ParseOptions, SearchConfig,
};

use report::{ConfigEcho, CriterionTable, InputDigest, RunReport, SelectedModel, SCHEMA_VERSION};

const FIT_TAG: u64 = 0xF17;

#[derive(Parser)]
#[command(name = "micl", version, about = "Model-based clustering with variable selection")]
struct Cli {
    /// Worker threads (0 = all cores).
    #[arg(long, global = true, env = "MICL_THREADS")]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Select the number of components and the relevant variables, then fit the selected model.
    Select(SelectArgs),
    /// Fit a given model by EM.
    Fit(FitArgs),
    /// Run a simulation design over replicates.
    Experiment(ExperimentArgs),
}

#[derive(Args)]
struct InputArgs {
    /// CSV or TSV file of numeric columns.
    #[arg(long)]
    input: PathBuf,
    /// Column (header name or 1-based index) holding reference labels; excluded from the data.
    #[arg(long)]
    labels_column: Option<String>,
    #[arg(long, default_value_t = Hyperparams::DEFAULT_ALPHA)]
    alpha: f64,
    #[arg(long, default_value_t = Hyperparams::DEFAULT_BETA)]
    beta: f64,
    #[arg(long, default_value_t = Hyperparams::DEFAULT_DELTA)]
    delta: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// EM initializations for the final fit.
    #[arg(long, default_value_t = 10)]
    em_starts: usize,
    /// Write the machine-readable report here.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Include wall-clock time in the machine-readable report.
    #[arg(long)]
    timing: bool,
}

#[derive(Args)]
struct SelectArgs {
    #[command(flatten)]
    input: InputArgs,
    #[arg(long, default_value_t = 6)]
    gmax: usize,
    /// Fix the number of components (overrides --gmax).
    #[arg(long)]
    g: Option<usize>,
    #[arg(long, default_value_t = 50)]
    starts: usize,
    /// Record per-start criterion traces in the report.
    #[arg(long)]
    trace: bool,
}

#[derive(Args)]
struct FitArgs {
    #[command(flatten)]
    input: InputArgs,
    #[arg(long)]
    g: usize,
    /// Relevance bitstring, one character per column.
    #[arg(long)]
    omega: String,
}

#[derive(Args)]
struct ExperimentArgs {
    /// table1, table2 or table4-scenario1..5.
    #[arg(long)]
    design: String,
    #[arg(long, default_value_t = 20)]
    replicates: usize,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    epsilon: Option<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 50)]
    starts: usize,
    #[arg(long, default_value_t = 10)]
    em_starts: usize,
    /// Comma-separated criteria for exhaustive designs.
    #[arg(long, default_value = "micl,icl,bic", value_delimiter = ',')]
    criteria: Vec<String>,
    /// Write the machine-readable table here.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Write the tab-separated summary here.
    #[arg(long)]
    tsv: Option<PathBuf>,
}

/// Failure with its exit code.
struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match &e {
            _ if e.is_numerical() => 3,
            Error::Parse { .. } | Error::EmptyInput | Error::Io(_) => 2,
            _ => 1,
        };
        Failure { code, message: e.to_string() }
    }
}

fn io_failure(path: &Path, e: std::io::Error) -> Failure {
    Failure { code: 2, message: format!("{}: {e}", path.display()) }
}

fn write_file(path: &Path, text: &str) -> Result<(), Failure> {
    std::fs::write(path, text).map_err(|e| io_failure(path, e))
}

fn load(args: &InputArgs) -> Result<(DataMatrix, Option<Vec<String>>), Failure> {
    let file = File::open(&args.input).map_err(|e| io_failure(&args.input, e))?;
    let reader = BufReader::new(file);
    let options = ParseOptions::default();
    Ok(match &args.labels_column {
        Some(col) => {
            let (x, labels) = load_labeled(reader, &options, col)?;
            (x, Some(labels))
        }
        None => (load_data(reader, &options)?, None),
    })
}

fn encode_labels(labels: &[String]) -> Vec<usize> {
    let mut seen: Vec<&str> = Vec::new();
    labels
        .iter()
        .map(|l| match seen.iter().position(|s| *s == l.as_str()) {
            Some(k) => k,
            None => {
                seen.push(l);
                seen.len() - 1
            }
        })
        .collect()
}

fn base_report(command: &str, args: &InputArgs, x: &DataMatrix, hp: &Hyperparams, m: &ModelSpec) -> RunReport {
    RunReport {
        schema_version: SCHEMA_VERSION,
        command: command.to_string(),
        input: InputDigest {
            path: args.input.display().to_string(),
            n: x.n(),
            d: x.d(),
            column_names: x.column_names().to_vec(),
        },
        config: ConfigEcho {
            g_max: None,
            fixed_g: None,
            n_starts: None,
            em_starts: args.em_starts,
            seed: args.seed,
            hyperparameters: hp.clone(),
        },
        selected: SelectedModel::new(m, x.column_names()),
        criteria: CriterionTable { per_g: Vec::new(), micl: None, icl: None, bic: None, loglik: None },
        micl_partition: None,
        fit: None,
        fit_error: None,
        ari: None,
        search_violations: 0,
        em_violations: 0,
        trace: None,
        wall_time_secs: None,
    }
}

/// Fits `m`, fills the report and returns the numerical error if the fit failed.
fn finish_fit(
    report: &mut RunReport,
    x: &DataMatrix,
    m: &ModelSpec,
    hp: &Hyperparams,
    args: &InputArgs,
    labels: Option<&[String]>,
) -> Result<Option<Failure>, Failure> {
    let em = EmConfig { n_em_starts: args.em_starts, ..EmConfig::default() };
    match fit_em(x, m, hp, &em, &mut stream(args.seed, &[FIT_TAG])) {
        Ok(fit) => {
            report.attach_fit(&fit);
            if let Some(l) = labels {
                report.ari = Some(adjusted_rand_index(fit.map_partition.labels(), &encode_labels(l))?);
            }
            Ok(None)
        }
        Err(e) if e.is_numerical() => {
            report.fit_error = Some(e.to_string());
            Ok(Some(e.into()))
        }
        Err(e) => Err(e.into()),
    }
}

fn emit(report: &mut RunReport, args: &InputArgs, started: Instant) -> Result<(), Failure> {
    let elapsed = started.elapsed().as_secs_f64();
    if args.timing {
        report.wall_time_secs = Some(elapsed);
    }
    print!("{}", report.render());
    if !args.timing {
        println!("wall time: {elapsed:.2}s");
    }
    if let Some(path) = &args.out {
        write_file(path, &report.to_json())?;
    }
    Ok(())
}

fn cmd_select(args: SelectArgs) -> Result<(), Failure> {
    let started = Instant::now();
    let (x, labels) = load(&args.input)?;
    let hp = Hyperparams::with_scalars(&x, args.input.alpha, args.input.beta, args.input.delta)?;
    let config = SearchConfig {
        g_max: args.gmax,
        fixed_g: args.g,
        n_starts: args.starts,
        seed: args.input.seed,
        record_trace: args.trace,
        ..SearchConfig::default()
    };
    let result = select_model(&x, &hp, &config)?;
    let mut report = base_report("select", &args.input, &x, &hp, &result.best_model);
    report.config.g_max = Some(args.gmax);
    report.config.fixed_g = args.g;
    report.config.n_starts = Some(args.starts);
    report.criteria.per_g = result.per_g.clone();
    report.criteria.micl = Some(result.micl.value);
    report.micl_partition = Some(result.best_partition.one_based());
    report.search_violations = result.monotonicity_violations;
    report.em_violations = result.em_violations;
    report.trace = result.trace.clone();
    let failed = finish_fit(&mut report, &x, &result.best_model, &hp, &args.input, labels.as_deref())?;
    emit(&mut report, &args.input, started)?;
    failed.map_or(Ok(()), Err)
}

fn cmd_fit(args: FitArgs) -> Result<(), Failure> {
    let started = Instant::now();
    let (x, labels) = load(&args.input)?;
    let omega = ModelSpec::parse_omega(&args.omega, x.d())?;
    let m = ModelSpec::new(args.g, omega)?;
    let hp = Hyperparams::with_scalars(&x, args.input.alpha, args.input.beta, args.input.delta)?;
    let mut report = base_report("fit", &args.input, &x, &hp, &m);
    report.config.fixed_g = Some(args.g);
    let failed = finish_fit(&mut report, &x, &m, &hp, &args.input, labels.as_deref())?;
    emit(&mut report, &args.input, started)?;
    failed.map_or(Ok(()), Err)
}

fn cmd_experiment(args: ExperimentArgs) -> Result<(), Failure> {
    let designs = DesignRegistry::with_builtin();
    let design = designs.get(&args.design)?;
    let scenario = design.scenario(args.n, args.epsilon)?;
    let config = ExperimentConfig {
        replicates: args.replicates,
        seed: args.seed,
        criteria: args.criteria.clone(),
        search: SearchConfig { n_starts: args.starts, ..SearchConfig::default() },
        em: EmConfig { n_em_starts: args.em_starts, ..EmConfig::default() },
    };
    let table = run_table_experiment(design.as_ref(), &scenario, &config, &CriterionRegistry::with_builtin())?;
    let tsv = table.to_tsv();
    print!("{tsv}");
    println!(
        "# design={} n={} epsilon={} seed={} replicates={}",
        table.design, scenario.n, scenario.epsilon, args.seed, args.replicates
    );
    if let Some(path) = &args.tsv {
        write_file(path, &tsv)?;
    }
    if let Some(path) = &args.out {
        let mut json = serde_json::to_string_pretty(&table).expect("table is serializable");
        json.push('\n');
        write_file(path, &json)?;
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    if let Some(threads) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global() {
            eprintln!("error: cannot configure thread pool: {e}");
            return ExitCode::from(1);
        }
    }
    let outcome = match cli.command {
        Command::Select(a) => cmd_select(a),
        Command::Fit(a) => cmd_fit(a),
        Command::Experiment(a) => cmd_experiment(a),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
