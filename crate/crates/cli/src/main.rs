use std::fs::{self, File};
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use bmdsel::simulation::{run_replicates, summarize, write_replicate_csv, SubjectsConfig};
use bmdsel::{
    analyze, load_dataset, standardize_doses, AnalysisOptions, Estimator, Execution, ExperimentConfig, ModelSpec,
    PresetDesign, QuantalDataset, Selector, TauGradient,
};
use clap::{Args, Parser, Subcommand, ValueEnum};

mod report;

use report::RunReport;

#[derive(Parser)]
#[command(name = "bmdsel", version, about = "Benchmark dose estimation with model selection for quantal data")]
struct Cli {
    /// Worker threads for projections and simulation; 1 runs sequentially.
    #[arg(long, global = true)]
    jobs: Option<usize>,

    /// Machine-readable JSON on standard output.
    #[arg(long, global = true, conflicts_with = "csv")]
    json: bool,

    /// CSV on standard output.
    #[arg(long, global = true)]
    csv: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Maximum likelihood fits and information criteria.
    Fit(DataArgs),
    /// Model chosen by each selector at each BMR.
    Select(AnalysisArgs),
    /// BMD estimates for every estimator and BMR.
    Bmd(BmdArgs),
    /// Focused risk matrices.
    RiskMatrix(AnalysisArgs),
    /// Monte Carlo experiment from a config file or a preset.
    Simulate(SimulateArgs),
}

#[derive(Args)]
struct DataArgs {
    /// CSV with columns dose,n,y.
    data: PathBuf,

    /// Model classes, comma separated (LG1,LG2,MS1,MS2).
    #[arg(long, value_delimiter = ',', default_values_t = ModelSpec::STANDARD)]
    models: Vec<ModelSpec>,

    /// Analyse doses as given instead of dividing by the largest dose.
    #[arg(long)]
    no_standardize: bool,
}

#[derive(Args)]
struct AnalysisArgs {
    #[command(flatten)]
    data: DataArgs,

    /// Benchmark responses, comma separated.
    #[arg(long, value_delimiter = ',', default_values_t = [0.01, 0.05, 0.10])]
    bmr: Vec<f64>,

    /// Use the implicit-differentiation BMD gradient in the variance term.
    #[arg(long)]
    exact_gradient: bool,
}

#[derive(Args)]
struct BmdArgs {
    #[command(flatten)]
    analysis: AnalysisArgs,

    /// Estimators, comma separated.
    #[arg(long, value_delimiter = ',', default_values_t = Estimator::ALL)]
    estimators: Vec<Estimator>,

    /// Write fitted curves and the PAVA polyline as long-format CSV.
    #[arg(long, value_name = "FILE")]
    plot_data: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum DesignArg {
    J4,
    J8,
}

#[derive(Args)]
struct SimulateArgs {
    /// Experiment config (TOML).
    config: Option<PathBuf>,

    /// Built-in experiment, expt1 to expt9.
    #[arg(long, conflicts_with = "config")]
    preset: Option<String>,

    /// Dose design for a preset.
    #[arg(long, value_enum, requires = "preset")]
    design: Option<DesignArg>,

    /// Subjects per dose group.
    #[arg(long)]
    n: Option<u64>,

    #[arg(long)]
    seed: Option<u64>,

    #[arg(long)]
    mreps: Option<usize>,

    #[arg(long, value_delimiter = ',')]
    bmr: Option<Vec<f64>>,

    #[arg(long, value_delimiter = ',')]
    models: Option<Vec<ModelSpec>>,

    #[arg(long)]
    exact_gradient: bool,

    /// Directory for estimators.csv, selections.csv, summary.json and
    /// config.toml. Defaults to the experiment name.
    #[arg(long)]
    output_dir: Option<PathBuf>,

    /// Write every replicate's BMD estimates as long-format CSV.
    #[arg(long, value_name = "FILE")]
    plot_data: Option<PathBuf>,
}

#[derive(Clone, Copy)]
enum Format {
    Table,
    Json,
    Csv,
}

/// Fatal error with the exit status it maps to.
struct Failure {
    code: u8,
    error: anyhow::Error,
}

trait OrExit<T> {
    fn input(self) -> Result<T, Failure>;
    fn runtime(self) -> Result<T, Failure>;
}

impl<T, E: Into<anyhow::Error>> OrExit<T> for Result<T, E> {
    fn input(self) -> Result<T, Failure> {
        self.map_err(|e| Failure { code: 2, error: e.into() })
    }

    fn runtime(self) -> Result<T, Failure> {
        self.map_err(|e| Failure { code: 1, error: e.into() })
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.code)
        }
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    let execution = execution(cli.jobs).input()?;
    let format = if cli.json {
        Format::Json
    } else if cli.csv {
        Format::Csv
    } else {
        Format::Table
    };
    let mut out = io::stdout().lock();
    match cli.command {
        Command::Fit(args) => {
            let data = read_data(&args)?;
            let options = AnalysisOptions {
                models: args.models.clone(),
                bmrs: vec![],
                estimators: vec![],
                selectors: vec![],
                ..Default::default()
            };
            let analysis = analyze(&data, &options).runtime()?;
            let report = RunReport::new(&args.data, &data, !args.no_standardize, &analysis, false);
            report.write_fits(&mut out, format).runtime()
        }
        Command::Select(args) => {
            let (data, options) = analysis_setup(&args, vec![], execution)?;
            let analysis = analyze(&data, &options).input()?;
            let report = RunReport::new(&args.data.data, &data, !args.data.no_standardize, &analysis, false);
            report.write_selections(&mut out, format).runtime()
        }
        Command::Bmd(args) => {
            let (data, mut options) = analysis_setup(&args.analysis, args.estimators.clone(), execution)?;
            options.selectors = Selector::ALL.to_vec();
            let analysis = analyze(&data, &options).input()?;
            let a = &args.analysis.data;
            let report = RunReport::new(&a.data, &data, !a.no_standardize, &analysis, false);
            if let Some(path) = &args.plot_data {
                let file = File::create(path).with_context(|| format!("creating {}", path.display())).runtime()?;
                report::write_curves(file, &data, &analysis).runtime()?;
            }
            report.write_bmds(&mut out, format).runtime()
        }
        Command::RiskMatrix(args) => {
            let (data, options) = analysis_setup(&args, vec![], execution)?;
            let analysis = analyze(&data, &options).input()?;
            let report = RunReport::new(&args.data.data, &data, !args.data.no_standardize, &analysis, true);
            report.write_risk_matrices(&mut out, format).runtime()
        }
        Command::Simulate(args) => simulate(args, execution, format, &mut out),
    }
}

fn execution(jobs: Option<usize>) -> anyhow::Result<Execution> {
    match jobs {
        Some(0) => anyhow::bail!("--jobs must be at least 1"),
        Some(1) => Ok(Execution::Sequential),
        #[cfg(feature = "parallel")]
        Some(n) => {
            rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
            Ok(Execution::Parallel)
        }
        #[cfg(not(feature = "parallel"))]
        Some(_) => Ok(Execution::Sequential),
        None if cfg!(feature = "parallel") => Ok(Execution::Parallel),
        None => Ok(Execution::Sequential),
    }
}

fn read_data(args: &DataArgs) -> Result<QuantalDataset, Failure> {
    let file = File::open(&args.data).with_context(|| format!("opening {}", args.data.display())).input()?;
    let data = load_dataset(file).with_context(|| format!("reading {}", args.data.display())).input()?;
    if args.no_standardize {
        Ok(data)
    } else {
        standardize_doses(&data).input()
    }
}

fn analysis_setup(
    args: &AnalysisArgs,
    estimators: Vec<Estimator>,
    execution: Execution,
) -> Result<(QuantalDataset, AnalysisOptions), Failure> {
    let data = read_data(&args.data)?;
    let mut options = AnalysisOptions {
        models: args.data.models.clone(),
        bmrs: args.bmr.clone(),
        estimators,
        selectors: Selector::ALL.to_vec(),
        ..Default::default()
    };
    options.focused.execution = execution;
    if args.exact_gradient {
        options.focused.gradient = TauGradient::Exact;
    }
    Ok((data, options))
}

fn simulate(args: SimulateArgs, execution: Execution, format: Format, out: &mut impl Write) -> Result<(), Failure> {
    let mut cfg = match (&args.config, &args.preset) {
        (Some(path), None) => {
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display())).input()?;
            let mut cfg = ExperimentConfig::from_toml(&text).input()?;
            if let Some(n) = args.n {
                cfg.subjects = SubjectsConfig::PerDose(n);
            }
            cfg
        }
        (None, Some(name)) => {
            let design = args.design.map(|d| match d {
                DesignArg::J4 => PresetDesign::J4,
                DesignArg::J8 => PresetDesign::J8,
            });
            ExperimentConfig::preset(name, design, args.n).input()?
        }
        _ => return Err(anyhow::anyhow!("give either a config file or --preset")).input(),
    };
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(m) = args.mreps {
        cfg.mreps = m;
    }
    if let Some(b) = args.bmr {
        cfg.bmrs = b;
    }
    if let Some(m) = args.models {
        cfg.models = m;
    }
    if args.exact_gradient {
        cfg.gradient = TauGradient::Exact;
    }
    cfg.validate().input()?;

    let records = run_replicates(&cfg, execution).runtime()?;
    let summary = summarize(&cfg, &records).runtime()?;
    let dir = args.output_dir.unwrap_or_else(|| PathBuf::from(&cfg.name));
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display())).runtime()?;
    summary.write_to_dir(&dir).runtime()?;
    fs::write(dir.join("config.toml"), cfg.to_toml().runtime()?).runtime()?;
    if let Some(path) = &args.plot_data {
        write_replicates(path, &cfg, &records).runtime()?;
    }
    report::write_summary(out, &summary, format).runtime()
}

fn write_replicates(path: &Path, cfg: &ExperimentConfig, records: &[bmdsel::simulation::ReplicateRecord]) -> anyhow::Result<()> {
    let file = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    write_replicate_csv(cfg, records, file)?;
    Ok(())
}
