use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use sketchreg::harness::{
    approx_error_study, grid_search, sketch_quality_suite, train_sequence, write_checks_csv, write_csv_header,
    write_report_csv, Method, QualityConfig, RunConfig,
};
use sketchreg::importance::Regime;
use sketchreg::nn::MlpSpec;
use sketchreg::tasks::{load_mnist, permuted_mnist, synthetic2d, TaskSequence};
use sketchreg::{Error, Result};

#[derive(Parser)]
#[command(
    name = "sketchreg",
    version,
    about = "Sketched structural regularization experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Continual learning on the synthetic 2D task sequence.
    Synthetic {
        #[command(flatten)]
        run: RunArgs,
        /// Also write the generated tasks (first seed) to this CSV.
        #[arg(long)]
        export_data: Option<PathBuf>,
    },
    /// Continual learning on permuted MNIST, with a grid search over λ.
    Pmnist {
        #[command(flatten)]
        run: RunArgs,
        /// Directory holding the four uncompressed MNIST IDX files.
        #[arg(long)]
        mnist_dir: PathBuf,
        /// Training examples per task.
        #[arg(long, default_value_t = 5000)]
        subsample: usize,
        /// Test examples per task.
        #[arg(long, default_value_t = 1000)]
        test_subsample: usize,
    },
    /// Monte Carlo checks of the sketch's statistical guarantees.
    SketchQuality {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Relative Frobenius error of each importance representation on the
    /// synthetic first task.
    ApproxError {
        #[command(flatten)]
        run: RunArgs,
    },
}

#[derive(Args)]
struct RunArgs {
    /// Comma-separated: none, diagonal, block, sketched, lowrank, full.
    #[arg(long, value_delimiter = ',', default_value = "sketched")]
    method: Vec<Method>,
    /// Comma-separated: ewc, mas.
    #[arg(long, value_delimiter = ',', default_value = "ewc")]
    regime: Vec<Regime>,
    /// Comma-separated; several values trigger a grid search.
    #[arg(long, value_delimiter = ',')]
    lambda: Vec<f64>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long, default_value_t = 50)]
    sketch_size: usize,
    #[arg(long, default_value_t = 50)]
    block_size: usize,
    #[arg(long, default_value_t = 50)]
    rank: usize,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long, default_value_t = 100)]
    batch: usize,
    /// First seed.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Number of consecutive seeds to run.
    #[arg(long, default_value_t = 1)]
    seeds: u64,
    /// Keep only the first K tasks.
    #[arg(long)]
    tasks: Option<usize>,
    /// CSV destination; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

impl RunArgs {
    fn configs(&self, defaults: &RunConfig) -> Vec<RunConfig> {
        let mut out = Vec::new();
        for &regime in &self.regime {
            for &method in &self.method {
                for seed in self.seed..self.seed + self.seeds {
                    out.push(RunConfig {
                        method,
                        regime,
                        lambda: self.lambda.first().copied().unwrap_or(defaults.lambda),
                        alpha: self.alpha.unwrap_or(defaults.alpha),
                        sketch_size: self.sketch_size,
                        block_size: self.block_size,
                        rank: self.rank,
                        lr: self.lr.unwrap_or(defaults.lr),
                        epochs: self.epochs.unwrap_or(defaults.epochs),
                        batch: self.batch,
                        seed,
                    });
                }
            }
        }
        out
    }

    fn trim(&self, seq: TaskSequence) -> TaskSequence {
        match self.tasks {
            Some(k) => seq.truncate(k),
            None => seq,
        }
    }
}

fn run_id(dataset: &str, cfg: &RunConfig) -> String {
    format!("{dataset}-{}-{}-s{}", cfg.regime.name(), cfg.method, cfg.seed)
}

fn open_out(path: Option<&Path>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(File::create(p).map_err(|e| Error::io(p, e))?)),
        None => Box::new(BufWriter::new(io::stdout())),
    })
}

fn io_err(path: Option<&Path>) -> impl Fn(io::Error) -> Error + '_ {
    move |e| Error::io(path.unwrap_or(Path::new("<stdout>")), e)
}

fn synthetic(run: &RunArgs, export: Option<&Path>) -> Result<()> {
    let out_path = run.out.as_deref();
    let err = io_err(out_path);
    if let Some(p) = export {
        let f = File::create(p).map_err(|e| Error::io(p, e))?;
        run.trim(synthetic2d(run.seed))
            .write_csv(BufWriter::new(f), false)
            .map_err(|e| Error::io(p, e))?;
    }
    let defaults = RunConfig::synthetic(Method::None, Regime::Ewc, 0);
    let mut out = open_out(out_path)?;
    write_csv_header(&mut out).map_err(&err)?;
    for cfg in run.configs(&defaults) {
        let seq = run.trim(synthetic2d(cfg.seed));
        let report = train_sequence(&cfg, &MlpSpec::synthetic(), &seq, &run_id("synthetic", &cfg))?;
        eprintln!(
            "{}: final average accuracy {:.4}",
            report.run_id,
            report.final_average()
        );
        write_report_csv(&mut out, &report).map_err(&err)?;
    }
    out.flush().map_err(&err)
}

fn pmnist(run: &RunArgs, dir: &Path, subsample: usize, test_subsample: usize) -> Result<()> {
    let out_path = run.out.as_deref();
    let err = io_err(out_path);
    let base = load_mnist(dir)?;
    let defaults = RunConfig::pmnist(Method::None, Regime::Ewc, 1e3, 0);
    let lambdas = if run.lambda.is_empty() {
        vec![1e2, 1e3, 1e4, 1e5, 1e6]
    } else {
        run.lambda.clone()
    };
    let spec = MlpSpec::mnist();
    let mut out = open_out(out_path)?;
    write_csv_header(&mut out).map_err(&err)?;
    for cfg in run.configs(&defaults) {
        let seq = permuted_mnist(&base, run.tasks.unwrap_or(5), subsample, test_subsample, cfg.seed)?;
        let prefix = run_id("pmnist", &cfg);
        let grid = grid_search(&cfg, &lambdas, &spec, &seq, &prefix)?;
        for r in &grid.runs {
            eprintln!("{}: final average accuracy {:.4}", r.run_id, r.final_average());
            write_report_csv(&mut out, r).map_err(&err)?;
        }
        let best = grid.best_run();
        writeln!(
            out,
            "{prefix},{},{},,,best_lambda,{}",
            cfg.method,
            cfg.regime.name(),
            best.config.lambda
        )
        .map_err(&err)?;
    }
    out.flush().map_err(&err)
}

fn approx_error(run: &RunArgs) -> Result<()> {
    let out_path = run.out.as_deref();
    let err = io_err(out_path);
    let defaults = RunConfig::synthetic(Method::None, Regime::Ewc, 0);
    let mut out = open_out(out_path)?;
    writeln!(out, "regime,seed,representation,relative_error").map_err(&err)?;
    // one study per (regime, seed); the method list is irrelevant here
    for cfg in run.configs(&defaults).into_iter().filter(|c| c.method == run.method[0]) {
        let seq = synthetic2d(cfg.seed);
        let e = approx_error_study(&cfg, &MlpSpec::synthetic(), &seq)?;
        let r = cfg.regime.name();
        for (name, v) in [
            ("lowrank", e.lowrank),
            ("sketched", e.sketched),
            ("block", e.block),
            ("diagonal", e.diagonal),
        ] {
            writeln!(out, "{r},{},{name},{v}", cfg.seed).map_err(&err)?;
        }
    }
    out.flush().map_err(&err)
}

fn sketch_quality(seed: u64, out_path: Option<&Path>) -> Result<()> {
    let err = io_err(out_path);
    let checks = sketch_quality_suite(&QualityConfig {
        seed,
        ..QualityConfig::default()
    })?;
    let mut out = open_out(out_path)?;
    write_checks_csv(&mut out, &checks).map_err(&err)?;
    out.flush().map_err(&err)?;
    let failed: Vec<&str> = checks.iter().filter(|c| !c.pass).map(|c| c.name.as_str()).collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("failed checks: {}", failed.join(", "))))
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let res = match &cli.command {
        Command::Synthetic { run, export_data } => synthetic(run, export_data.as_deref()),
        Command::Pmnist {
            run,
            mnist_dir,
            subsample,
            test_subsample,
        } => pmnist(run, mnist_dir, *subsample, *test_subsample),
        Command::SketchQuality { seed, out } => sketch_quality(*seed, out.as_deref()),
        Command::ApproxError { run } => approx_error(run),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
