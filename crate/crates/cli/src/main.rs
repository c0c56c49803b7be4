//! `fdabnn` command-line tool: training, evaluation, ablation sweeps and the
//! numerical analysis tables.

use std::f64::consts::PI;
use std::fs;
use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand, ValueEnum};
use fdabnn::analysis::{fs_mse, parseval_mse, spectrum, spectrum_deltas, SpectrumFn, SPECTRUM_SAMPLES};
use fdabnn::error::{EXIT_CONFIG, EXIT_DATA};
use fdabnn::train::{ablation_sweep, evaluate, load_splits, sweep_csv, train_on, EpochMetrics, SweepSpec, TrainConfig};
use fdabnn::Error;

#[derive(Parser)]
#[command(
    name = "fdabnn",
    version,
    about = "Binary neural networks trained with Fourier-series sign surrogates"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model from a key=value config file
    Train {
        #[arg(long)]
        config: PathBuf,

        /// Replace one config entry, e.g. `--override epochs=2` (repeatable)
        #[arg(long = "override", value_name = "KEY=VALUE")]
        overrides: Vec<String>,

        #[arg(long)]
        quiet: bool,
    },

    /// Test accuracy of a checkpoint through the packed XNOR path
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,

        /// Directory holding the dataset files
        #[arg(long)]
        dataset: PathBuf,

        /// Only score the first N test images (0 = all)
        #[arg(long, default_value_t = 0)]
        limit: usize,
    },

    /// Run an ablation grid described by a spec file
    Sweep {
        #[arg(long)]
        spec: PathBuf,
    },

    /// Emit analysis tables as CSV
    Analyze {
        #[command(subcommand)]
        table: Table,

        /// Write to this file instead of stdout
        #[arg(long, global = true)]
        out: Option<PathBuf>,
    },
}

#[derive(Subcommand)]
enum Table {
    /// Mean-square error of the truncated series against the square wave
    Mse {
        #[arg(long, value_delimiter = ',', default_value = "0,1,2,4,8,16,32,64")]
        terms: Vec<usize>,

        #[arg(long, default_value_t = PI)]
        omega: f64,

        #[arg(long, default_value_t = 200_000)]
        samples: usize,
    },

    /// Projection coefficients of a surrogate and their difference from sign
    Spectrum {
        #[arg(long, value_enum, default_value_t = FnArg::Fda)]
        function: FnArg,

        /// Series terms for `fda`
        #[arg(long, default_value_t = 5)]
        terms: usize,

        /// Sharpness for `tanh` and `signswish`
        #[arg(long, default_value_t = 5.0)]
        beta: f64,

        #[arg(long, default_value_t = 2.0)]
        period: f64,

        #[arg(long, default_value_t = 25)]
        max_harmonic: usize,

        #[arg(long, default_value_t = SPECTRUM_SAMPLES)]
        samples: usize,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum FnArg {
    Sign,
    Fda,
    Tanh,
    Signswish,
}

fn print_epoch(m: &EpochMetrics) {
    eprintln!(
        "epoch {:>3}  loss {:.4}  train {:.2}%  test {:.2}%  n={}  alpha={:.4}",
        m.epoch, m.train_loss, m.train_acc, m.test_acc, m.n_terms, m.alpha
    );
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Train {
            config,
            overrides,
            quiet,
        } => {
            let text = fs::read_to_string(&config)
                .map_err(|e| Error::Config(format!("cannot read {}: {e}", config.display())))?;
            let cfg = TrainConfig::parse(&text, &overrides)?;
            let (train_set, test_set) = load_splits(&cfg)?;
            let mut progress = |m: &EpochMetrics| {
                if !quiet {
                    print_epoch(m)
                }
            };
            let run = train_on(&cfg, &train_set, &test_set, &mut progress)?;
            println!("metrics: {}", run.metrics_path.display());
            println!("checkpoint: {}", run.checkpoint_path.display());
            println!("final test accuracy: {:.2}%", run.final_test_acc());
        }
        Command::Eval {
            checkpoint,
            dataset,
            limit,
        } => {
            let acc = evaluate(&checkpoint, &dataset, limit)?;
            println!("test accuracy: {acc:.2}%");
        }
        Command::Sweep { spec } => {
            let text =
                fs::read_to_string(&spec).map_err(|e| Error::Config(format!("cannot read {}: {e}", spec.display())))?;
            let spec = SweepSpec::parse(&text)?;
            let (path, rows) = ablation_sweep(&spec, &mut |variant, m| {
                eprint!("[{variant}] ");
                print_epoch(m);
            })?;
            print!("{}", sweep_csv(&rows));
            eprintln!("table: {}", path.display());
        }
        Command::Analyze { table, out } => {
            let csv = match table {
                Table::Mse { terms, omega, samples } => mse_table(&terms, omega, samples)?,
                Table::Spectrum {
                    function,
                    terms,
                    beta,
                    period,
                    max_harmonic,
                    samples,
                } => {
                    let f = match function {
                        FnArg::Sign => SpectrumFn::Sign,
                        FnArg::Fda => SpectrumFn::Fda { n: terms },
                        FnArg::Tanh => SpectrumFn::TanhAlike { beta },
                        FnArg::Signswish => SpectrumFn::SignSwish { beta },
                    };
                    spectrum_table(f, period, max_harmonic, samples)?
                }
            };
            match out {
                Some(p) => fs::write(&p, csv).with_context(|| format!("writing {}", p.display()))?,
                None => std::io::stdout().write_all(csv.as_bytes())?,
            }
        }
    }
    Ok(())
}

fn mse_table(terms: &[usize], omega: f64, samples: usize) -> fdabnn::Result<String> {
    let mut s = String::from("n,fs_mse,parseval_mse\n");
    for &n in terms {
        s += &format!("{n},{:.10},{:.10}\n", fs_mse(n, omega, samples)?, parseval_mse(n));
    }
    Ok(s)
}

fn spectrum_table(f: SpectrumFn, period: f64, max_harmonic: usize, samples: usize) -> fdabnn::Result<String> {
    let report = spectrum(f, period, max_harmonic, samples)?;
    let reference = spectrum(SpectrumFn::Sign, period, max_harmonic, samples)?;
    let mut s = String::from("function,harmonic,sine,cosine,sign_sine,delta_sine,delta_amplitude,delta_energy\n");
    for ((h, da, de), r) in spectrum_deltas(&report, &reference)?
        .into_iter()
        .zip(&reference.harmonics)
    {
        s += &format!(
            "{},{},{:.12},{:.12},{:.12},{:.12},{:.12},{:.12}\n",
            f.label(),
            h.index,
            h.sine,
            h.cosine,
            r.sine,
            h.sine - r.sine,
            da,
            de
        );
    }
    Ok(s)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(EXIT_CONFIG as u8)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let code = match e.downcast_ref::<Error>() {
                Some(err) => err.exit_code(),
                None if e.downcast_ref::<std::io::Error>().is_some() => EXIT_DATA,
                None => EXIT_CONFIG,
            };
            ExitCode::from(code as u8)
        }
    }
}
