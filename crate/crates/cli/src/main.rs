use std::io::IsTerminal;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use tracing_subscriber::EnvFilter;

use dci_core::analysis::{bounds_grid, cost_grid, dilution_monte_carlo, LogBase, TheoryParams};
use dci_core::analysis::{DEFAULT_C0, DEFAULT_C2};
use dci_core::harness::{
    emit_report, load_labels, render_csv, render_json, run_experiment, BackendKind, Config,
    ExperimentSpec, HarnessError, ReportFormat,
};
use dci_core::{dci_classify, flat_classify, Backend, FinalPrediction, GroupSize, ImageRef, RunTrace};

#[derive(Parser)]
#[command(name = "dci", version, about = "Divide-and-conquer classification over large label spaces")]
struct Cli {
    /// Log filter, e.g. `info` or `dci_core=debug`. Overrides RUST_LOG.
    #[arg(long, global = true)]
    log: Option<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Classify one image against a label file.
    Classify(ClassifyArgs),
    /// Run an experiment file and write its report.
    Evaluate(EvaluateArgs),
    /// Tabulate the cost model or the information bounds.
    Analyze {
        #[command(subcommand)]
        what: AnalyzeCommand,
    },
    /// Monte Carlo estimate of attention dilution.
    Simulate(SimulateArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum BackendArg {
    Oracle,
    Http,
}

#[derive(Clone, Copy, ValueEnum)]
enum FormatArg {
    Csv,
    Json,
}

impl From<FormatArg> for ReportFormat {
    fn from(f: FormatArg) -> Self {
        match f {
            FormatArg::Csv => ReportFormat::Csv,
            FormatArg::Json => ReportFormat::Json,
        }
    }
}

#[derive(Args)]
struct ClassifyArgs {
    /// Image path, http(s) URL or data URL.
    #[arg(long)]
    image: String,
    /// One label per line.
    #[arg(long)]
    labels: PathBuf,
    /// TOML config; omitted sections take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Group size, overriding the config.
    #[arg(long)]
    k: Option<usize>,
    /// Backend, overriding the config.
    #[arg(long, value_enum)]
    backend: Option<BackendArg>,
    /// Ground truth for the simulated oracle.
    #[arg(long)]
    true_label: Option<String>,
    /// Single flat query over every label instead of divide-and-conquer.
    #[arg(long)]
    flat: bool,
    /// Write the full trace as JSON.
    #[arg(long)]
    trace_out: Option<PathBuf>,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Experiment TOML.
    #[arg(long)]
    spec: PathBuf,
    /// Report destination; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "csv")]
    format: FormatArg,
}

#[derive(Subcommand)]
enum AnalyzeCommand {
    /// Closed-form divide-and-conquer cost against the flat cost.
    Cost {
        #[arg(long = "n", value_delimiter = ',', required = true)]
        ns: Vec<u64>,
        #[arg(long = "k", value_delimiter = ',', required = true)]
        ks: Vec<usize>,
        #[arg(long, default_value_t = DEFAULT_C0)]
        c0: f64,
        #[arg(long, default_value_t = DEFAULT_C2)]
        c2: f64,
        #[arg(long, value_enum, default_value = "csv")]
        format: FormatArg,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Entropy demand, attention SNR, capacity and the flat error bound.
    Bounds {
        /// Label-space sizes.
        #[arg(long = "k", value_delimiter = ',', required = true)]
        ks: Vec<u64>,
        #[arg(long, default_value_t = 1.0)]
        beta: f64,
        #[arg(long, default_value_t = 0.0)]
        i_max: f64,
        #[arg(long, default_value_t = 1.0)]
        w: f64,
        /// Work in bits instead of nats.
        #[arg(long)]
        bits: bool,
        #[arg(long, value_enum, default_value = "csv")]
        format: FormatArg,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct SimulateArgs {
    #[arg(long = "k", value_delimiter = ',', required = true)]
    ks: Vec<usize>,
    #[arg(long, default_value_t = 10_000)]
    trials: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value = "csv")]
    format: FormatArg,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let filter = match &cli.log {
        Some(f) => EnvFilter::new(f),
        None => EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new("warn")),
    };
    tracing_subscriber::fmt()
        .with_env_filter(filter)
        .with_writer(std::io::stderr)
        .with_ansi(std::io::stderr().is_terminal())
        .init();

    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Classify(a) => classify(a),
        Command::Evaluate(a) => evaluate(a),
        Command::Analyze { what } => analyze(what),
        Command::Simulate(a) => simulate(a),
    }
}

fn write_or_print(out: Option<&Path>, body: &str) -> Result<()> {
    match out {
        Some(p) => std::fs::write(p, body).with_context(|| format!("writing {}", p.display())),
        None => {
            print!("{body}");
            Ok(())
        }
    }
}

fn image_ref(s: &str) -> ImageRef {
    if s.starts_with("http://") || s.starts_with("https://") || s.starts_with("data:") {
        ImageRef::Url(s.to_owned())
    } else {
        ImageRef::Path(s.into())
    }
}

fn classify(a: ClassifyArgs) -> Result<()> {
    let mut cfg = match &a.config {
        Some(p) => Config::load(p)?,
        None => Config::default(),
    };
    if let Some(k) = a.k {
        cfg.engine.k = k;
    }
    match a.backend {
        Some(BackendArg::Oracle) => cfg.backend.kind = BackendKind::Oracle,
        Some(BackendArg::Http) => cfg.backend.kind = BackendKind::Http,
        None => {}
    }
    let labels = load_labels(&a.labels)?;
    let image = image_ref(&a.image);

    let backend: Box<dyn Backend> = match cfg.backend.kind {
        BackendKind::Http => cfg.live_backend()?,
        BackendKind::Oracle => {
            let Some(truth) = &a.true_label else {
                bail!("the oracle backend needs --true-label");
            };
            if !labels.contains(truth) {
                bail!("--true-label {truth:?} is not in {}", a.labels.display());
            }
            Box::new(cfg.oracle_backend(truth)?)
        }
    };

    let result = if a.flat {
        flat_classify(&image, &labels, backend.as_ref(), &cfg.parse_policy()?, &cfg.template()?)
    } else {
        dci_classify(&image, &labels, &cfg.engine_config()?, backend.as_ref())
    };
    let trace = match result {
        Ok(t) => t,
        Err(e) => {
            if let (Some(p), Some(partial)) = (&a.trace_out, e.partial_trace()) {
                write_trace(p, partial)?;
                eprintln!("partial trace written to {}", p.display());
            }
            return Err(e.into());
        }
    };
    if let Some(p) = &a.trace_out {
        write_trace(p, &trace)?;
    }
    let prediction = match &trace.final_prediction {
        FinalPrediction::Predicted(l) => l.as_str(),
        FinalPrediction::NonePrediction => "None",
    };
    println!(
        "prediction: {prediction}\ncalls: {}\nlevels: {}\nsimulated_s: {:.4}\nwall_s: {:.4}",
        trace.total_calls,
        trace.depth(),
        trace.total_sim_s,
        trace.total_wall_s
    );
    Ok(())
}

fn write_trace(p: &Path, t: &RunTrace) -> Result<()> {
    std::fs::write(p, t.to_json()).with_context(|| format!("writing {}", p.display()))
}

fn evaluate(a: EvaluateArgs) -> Result<()> {
    let spec = ExperimentSpec::load(&a.spec)?;
    let format = ReportFormat::from(a.format);
    let emit = |r: &_| -> Result<()> {
        match &a.out {
            Some(p) => Ok(emit_report(r, format, p)?),
            None => {
                let body = match format {
                    ReportFormat::Csv => render_csv(r),
                    ReportFormat::Json => render_json(r),
                };
                write_or_print(None, &body)
            }
        }
    };
    match run_experiment(&spec) {
        Ok(r) => emit(&r),
        Err(e @ HarnessError::Aborted { .. }) => {
            if let Some(partial) = e.partial_report() {
                emit(partial)?;
                eprintln!("experiment aborted; report holds the {} completed rows", partial.rows.len());
            }
            Err(e.into())
        }
        Err(e) => Err(e.into()),
    }
}

fn analyze(what: AnalyzeCommand) -> Result<()> {
    match what {
        AnalyzeCommand::Cost { ns, ks, c0, c2, format, out } => {
            let ks = ks
                .into_iter()
                .map(GroupSize::new)
                .collect::<Result<Vec<_>, _>>()?;
            let report = cost_grid(&ns, &ks, c0, c2)?;
            let body = match format {
                FormatArg::Csv => report.to_csv(),
                FormatArg::Json => report.to_json() + "\n",
            };
            write_or_print(out.as_deref(), &body)
        }
        AnalyzeCommand::Bounds { ks, beta, i_max, w, bits, format, out } => {
            let mut base = TheoryParams::new(2, beta, i_max)?;
            base.w_bandwidth = w;
            if bits {
                base.log_base = LogBase::Base2;
            }
            base.validate()?;
            let report = bounds_grid(&base, &ks)?;
            let body = match format {
                FormatArg::Csv => report.to_csv(),
                FormatArg::Json => serde_json::to_string_pretty(&report)? + "\n",
            };
            write_or_print(out.as_deref(), &body)
        }
    }
}

fn simulate(a: SimulateArgs) -> Result<()> {
    let stats = a
        .ks
        .iter()
        .map(|&k| dilution_monte_carlo(k, a.trials, a.seed))
        .collect::<Result<Vec<_>, _>>()?;
    let body = match a.format {
        FormatArg::Json => serde_json::to_string_pretty(&stats)? + "\n",
        FormatArg::Csv => {
            let mut s = String::from("k,trials,mean,variance,one_over_k\n");
            for st in &stats {
                s.push_str(&format!(
                    "{},{},{:.6},{:.6e},{:.6}\n",
                    st.k,
                    st.trials,
                    st.mean,
                    st.variance,
                    1.0 / st.k.max(1) as f64
                ));
            }
            s
        }
    };
    write_or_print(None, &body)
}
