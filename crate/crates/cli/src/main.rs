//! `musle`: synthetic data, training, evaluation and diagnostics.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 data error,
//! 3 numeric failure.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use musle::config::RunConfig;
use musle::data::load_dataset;
use musle::gmm::{load_bank, save_bank};
use musle::pipeline::{evaluate, gradient_check, inspect, train_with, CheckInstance, Scorer};
use musle::sketch::{random_pair, relative_rmse, shift_benchmark, sketch_inner_product_stats};
use musle::synth::{generate, GeneratorConfig};
use musle::Error;

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

#[derive(Parser)]
#[command(name = "musle", version, about = "Multi-scale sub-graph action prototypes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write train.jsonl, test.jsonl and truth.jsonl for a planted-motif dataset.
    Gen {
        /// Generator config (TOML `key = value` or JSON); defaults when absent.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the config seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train a prototype bank.
    Train {
        /// Run config (TOML `key = value` or JSON); defaults when absent.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the number of epochs.
        #[arg(long)]
        epochs: Option<usize>,
        /// Also write per-epoch records as JSON lines.
        #[arg(long)]
        log_json: Option<PathBuf>,
    },
    /// Classify a dataset and write a JSON report.
    Eval {
        #[arg(long)]
        bank: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        report: PathBuf,
        /// Test-time sub-graph budget; the training budget when absent.
        #[arg(long)]
        test_budget: Option<usize>,
        /// Restrict inference to these scales, comma separated.
        #[arg(long, value_delimiter = ',')]
        scales: Option<Vec<usize>>,
    },
    /// Dump one (class, scale) prototype cell.
    Inspect {
        #[arg(long)]
        bank: PathBuf,
        #[arg(long = "class")]
        class: usize,
        #[arg(long)]
        scale: usize,
        /// Rank this dataset's sub-graphs of the class against each kernel.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value_t = 5)]
        top: usize,
        /// Also write the dump as JSON.
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Finite-difference check of the training loss gradients.
    Gradcheck {
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
        #[arg(long, default_value_t = 1e-5)]
        eps: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Tensor-sketch accuracy, unbiasedness and movement regression benchmark.
    Sketchbench {
        #[arg(long, default_value_t = 200)]
        pairs: usize,
        #[arg(long, default_value_t = 64)]
        d: usize,
        #[arg(long, value_delimiter = ',', default_values_t = vec![64, 256, 1024])]
        sizes: Vec<usize>,
        #[arg(long, default_value_t = 1000)]
        unbias_seeds: u64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

enum Failure {
    Usage(String),
    Data(String),
    Numeric(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let msg = e.to_string();
        match e {
            Error::NonFinite(_) | Error::DegenerateKernel { .. } => Failure::Numeric(msg),
            Error::Config(_) | Error::InvalidArgument(_) => Failure::Usage(msg),
            _ => Failure::Data(msg),
        }
    }
}

fn write_file(path: &Path, text: &str) -> Result<(), Failure> {
    fs::write(path, text).map_err(|e| Failure::Data(format!("{}: {e}", path.display())))
}

fn to_json<T: serde::Serialize>(v: &T) -> String {
    serde_json::to_string_pretty(v).expect("report serializes")
}

fn run(cmd: Command) -> Result<(), Failure> {
    match cmd {
        Command::Gen { config, out, seed } => {
            let mut cfg = match config {
                Some(p) => GeneratorConfig::load(p)?,
                None => GeneratorConfig::default(),
            };
            if let Some(s) = seed {
                cfg.seed = s;
            }
            let g = generate(&cfg)?;
            g.write(&out)?;
            println!(
                "wrote {} train and {} test videos ({} classes) to {}",
                g.train.records.len(),
                g.test.records.len(),
                cfg.num_classes,
                out.display()
            );
        }
        Command::Train {
            config,
            data,
            out,
            epochs,
            log_json,
        } => {
            let mut cfg = match config {
                Some(p) => RunConfig::load(p)?,
                None => RunConfig::default(),
            };
            if let Some(e) = epochs {
                cfg.epochs = e;
            }
            cfg.validate()?;
            let ds = load_dataset(&data)?;
            let mut records = Vec::new();
            let bank = train_with(&cfg, &ds, |r| {
                log::info!(
                    "epoch {:>3} class {} scale {} steps {:>3} loss {:>12.4} nll {:>12.4} K {}",
                    r.epoch,
                    r.class,
                    r.scale,
                    r.steps,
                    r.mean_loss,
                    r.mean_nll,
                    r.k
                );
                records.push(serde_json::to_string(r).expect("record serializes"));
            })?;
            save_bank(&bank, &out)?;
            if let Some(p) = log_json {
                let mut text = records.join("\n");
                text.push('\n');
                write_file(&p, &text)?;
            }
            let ks: Vec<String> = bank.cells.iter().map(|c| format!("c{}s{}:{}", c.class, c.scale, c.ema.k())).collect();
            println!("saved bank to {} (final K {})", out.display(), ks.join(" "));
        }
        Command::Eval {
            bank,
            data,
            report,
            test_budget,
            scales,
        } => {
            let bank = load_bank(&bank)?;
            let ds = load_dataset(&data)?;
            let mut scorer = match &scales {
                Some(s) => Scorer::with_scales(&bank, s)?,
                None => Scorer::new(&bank)?,
            };
            if let Some(b) = test_budget {
                if b == 0 {
                    return Err(Failure::Usage("--test-budget must be >= 1".into()));
                }
                scorer = scorer.budget(b);
            }
            let rep = evaluate(&ds, &scorer)?;
            write_file(&report, &to_json(&rep))?;
            print!("{}", rep.summary());
        }
        Command::Inspect {
            bank,
            class,
            scale,
            data,
            top,
            json,
        } => {
            let bank = load_bank(&bank)?;
            let ds = data.map(load_dataset).transpose()?;
            let rep = inspect(&bank, class, scale, ds.as_ref(), top)?;
            print!("{}", rep.summary());
            if let Some(p) = json {
                write_file(&p, &to_json(&rep))?;
            }
        }
        Command::Gradcheck { tol, eps, seed } => {
            let inst = CheckInstance::default();
            let rep = gradient_check(&inst, seed, eps, tol)?;
            for p in &rep.params {
                println!(
                    "{:<22} checked {:>5} excluded {:>3} max rel err {:.3e}",
                    p.name, p.checked, p.excluded, p.max_rel_error
                );
            }
            println!("max relative error {:.3e} (tol {tol:e})", rep.max_rel_error());
            if !rep.passed() {
                return Err(Failure::Numeric(format!(
                    "gradient check failed: {:.3e} > {tol:e}",
                    rep.max_rel_error()
                )));
            }
            println!("PASS");
        }
        Command::Sketchbench {
            pairs,
            d,
            sizes,
            unbias_seeds,
            seed,
        } => {
            if pairs == 0 || d == 0 || sizes.contains(&0) || unbias_seeds < 2 {
                return Err(Failure::Usage("pairs, d and sizes must be >= 1, unbias-seeds >= 2".into()));
            }
            println!("relative RMSE of the sketched kernel over {pairs} random 3x3x{d} grid pairs");
            for &s in &sizes {
                println!("  d_sketch {s:>5}  {:.4}", relative_rmse(pairs, (3, 3, d), s, seed)?);
            }
            let (x, y) = random_pair(d, seed);
            let target = x.iter().zip(&y).map(|(a, b)| a * b).sum::<f64>().powi(2);
            let (mean, se) = sketch_inner_product_stats(&x, &y, 512, unbias_seeds, seed)?;
            println!(
                "unbiasedness over {unbias_seeds} sketches: mean {mean:.3} vs (x.y)^2 {target:.3}, {:.2} standard errors",
                (mean - target).abs() / se
            );
            let b = shift_benchmark(d, 512, 200, seed)?;
            println!(
                "movement regressor: train loss {:.3e}, held-out +1 cell shifts with positive dcx {}/{}",
                b.train_loss, b.positive, b.held_out
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            let (code, msg) = match f {
                Failure::Usage(m) => (1, m),
                Failure::Data(m) => (2, m),
                Failure::Numeric(m) => (3, m),
            };
            eprintln!("error: {msg}");
            ExitCode::from(code)
        }
    }
}
