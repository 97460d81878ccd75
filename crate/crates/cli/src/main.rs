use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use lsbq_core::accounting::{param_accounting, ShapeTable};
use lsbq_core::io::{
    atomic_write, hessian_csv, histogram_csv, load_checkpoint, load_config, metrics_csv, quantizer_table,
    quantizer_table_csv, resolve_data, save_checkpoint, scheme_csv, sensitivity_csv, RunReport,
};
use lsbq_core::numerics::{streams, RngStream};
use lsbq_core::quantize::QuantizerKind;
use lsbq_core::train::{build_model, evaluate, layer_sensitivities, train_run, HessianConfig};
use lsbq_core::{Error, Result};
use tracing_subscriber::EnvFilter;

#[derive(Parser)]
#[command(
    name = "lsbq",
    version,
    about = "Mixed-precision QAT with LSB sparsification and bit pruning"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train from a JSON config; writes report.json, metrics.csv, scheme.csv,
    /// sensitivity.csv and model.ckpt.
    Train {
        config: PathBuf,
        /// Overrides the config's output directory.
        #[arg(long)]
        output_dir: Option<PathBuf>,
    },
    /// Validation accuracy of a checkpoint under its own forward policy.
    Eval {
        checkpoint: PathBuf,
        /// MNIST directory or JSON data spec.
        data: PathBuf,
    },
    /// Per-layer bit widths of a finished run as CSV.
    Scheme {
        report: PathBuf,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Per-layer Hessian trace and sensitivity of a checkpoint as CSV.
    HessianReport {
        checkpoint: PathBuf,
        data: PathBuf,
        #[arg(long, default_value_t = 16)]
        samples: usize,
        #[arg(long, default_value_t = 512)]
        batch: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Trainable-parameter counts for per-weight versus per-bit training.
    Accounting {
        shape_table: PathBuf,
        #[arg(long)]
        bits: u8,
        /// Print JSON instead of a table.
        #[arg(long)]
        json: bool,
    },
    /// Quantizer bin map over an even grid on [0, 1].
    QuantizerTable {
        #[arg(long, default_value_t = 3)]
        bits: u8,
        #[arg(long, default_value_t = 1)]
        lsb: u8,
        #[arg(long, value_enum, default_value = "round-clamp")]
        quantizer: Quantizer,
        #[arg(long, default_value_t = 1025)]
        points: usize,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Latent and quantized weight histograms of a checkpoint.
    Histogram {
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 64)]
        bins: usize,
        #[arg(long)]
        output: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum Quantizer {
    RoundClamp,
    Dorefa,
}

impl From<Quantizer> for QuantizerKind {
    fn from(q: Quantizer) -> Self {
        match q {
            Quantizer::RoundClamp => QuantizerKind::RoundClamp,
            Quantizer::Dorefa => QuantizerKind::DoReFa,
        }
    }
}

fn emit(bytes: &[u8], output: Option<&Path>) -> Result<()> {
    match output {
        Some(p) => atomic_write(p, bytes),
        None => std::io::stdout()
            .write_all(bytes)
            .map_err(|e| Error::Internal(format!("stdout: {e}"))),
    }
}

fn millions(n: u64) -> String {
    format!("{:.2}M", n as f64 / 1e6)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { config, output_dir } => {
            let (cfg, base) = load_config(&config)?;
            let out = output_dir.unwrap_or_else(|| base.join(&cfg.output_dir));
            let (train, val) = cfg.data.load(&base)?;
            let mut model = build_model(&cfg.model, &cfg.train)?;
            let outcome = train_run(&mut model, &train, &val, &cfg.train)?;
            let report = RunReport {
                param_count: model.param_count(),
                config: cfg,
                outcome,
            };
            atomic_write(&out.join("metrics.csv"), &metrics_csv(&report.outcome.metrics)?)?;
            atomic_write(&out.join("scheme.csv"), &scheme_csv(&report)?)?;
            atomic_write(&out.join("sensitivity.csv"), &sensitivity_csv(&report.outcome)?)?;
            save_checkpoint(&model, &out.join("model.ckpt"))?;
            report.save(&out.join("report.json"))?;
            tracing::info!(out = %out.display(), "wrote run artifacts");
            let bits: Vec<u8> = report.outcome.scheme.layers.iter().map(|l| l.bits).collect();
            println!(
                "val_acc={:.4} gamma={:.6} compression={:.2}x bits={bits:?} out={}",
                report.outcome.final_val_acc,
                report.outcome.scheme.size_fraction(),
                report.outcome.scheme.compression_ratio(),
                out.display()
            );
        }
        Command::Eval { checkpoint, data } => {
            let model = load_checkpoint(&checkpoint)?;
            let (_, val) = resolve_data(&data)?;
            println!("accuracy={:.4} samples={}", evaluate(&model, &val)?, val.len());
        }
        Command::Scheme { report, output } => {
            emit(&scheme_csv(&RunReport::load(&report)?)?, output.as_deref())?;
        }
        Command::HessianReport {
            checkpoint,
            data,
            samples,
            batch,
            seed,
            output,
        } => {
            let model = load_checkpoint(&checkpoint)?;
            let (train, _) = resolve_data(&data)?;
            let mut order: Vec<usize> = (0..train.len()).collect();
            RngStream::new(seed, streams::HESSIAN_BATCH).shuffle(&mut order);
            let (x, y) = train.batch(&order[..batch.min(train.len())]);
            let cfg = HessianConfig {
                samples,
                batch,
                ..HessianConfig::default()
            };
            let records = layer_sensitivities(&model, &x, &y, &cfg, seed, 0)?;
            let bits: Vec<u8> = model.quant_layers().iter().map(|q| q.bits()).collect();
            emit(&hessian_csv(&records, &bits)?, output.as_deref())?;
        }
        Command::Accounting {
            shape_table,
            bits,
            json,
        } => {
            let text = std::fs::read_to_string(&shape_table).map_err(|e| Error::Io {
                path: shape_table.clone(),
                source: e,
            })?;
            let table: ShapeTable = serde_json::from_str(&text).map_err(|e| Error::Format {
                path: shape_table.clone(),
                message: e.to_string(),
            })?;
            let a = param_accounting(&table.counts(), bits)?;
            if json {
                println!("{}", serde_json::to_string(&a)?);
            } else {
                println!("model      {}", table.name);
                println!("tensors    {}", table.layers.len());
                println!("per-weight {} ({})", a.per_weight_params, millions(a.per_weight_params));
                println!("bit-split  {} ({})", a.bit_split_params, millions(a.bit_split_params));
                println!("ratio      {:.2}", a.ratio);
            }
        }
        Command::QuantizerTable {
            bits,
            lsb,
            quantizer,
            points,
            output,
        } => {
            let rows = quantizer_table(bits, lsb, quantizer.into(), points)?;
            emit(&quantizer_table_csv(&rows)?, output.as_deref())?;
        }
        Command::Histogram {
            checkpoint,
            bins,
            output,
        } => {
            let model = load_checkpoint(&checkpoint)?;
            emit(&histogram_csv(&model, bins)?, output.as_deref())?;
        }
    }
    Ok(())
}

fn kind(e: &Error) -> &'static str {
    match e {
        Error::Config(_) | Error::Json(_) => "config",
        Error::UnsupportedQuantizer(_) => "unsupported-quantizer",
        Error::Divergence { .. } => "divergence",
        Error::Format { .. } => "format",
        Error::Consistency(_) => "consistency",
        Error::Io { .. } => "io",
        Error::Csv(_) => "csv",
        Error::Dimension(_) => "dimension",
        Error::Input(_) => "input",
        Error::StateMachine(_) => "state-machine",
        Error::Internal(_) => "internal",
    }
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
    tracing_subscriber::fmt()
        .with_env_filter(EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new("warn")))
        .with_writer(std::io::stderr)
        .init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let code = e.exit_code();
            let message = serde_json::to_string(&e.to_string().replace('\n', " ")).unwrap_or_else(|_| "\"?\"".into());
            eprintln!("error kind={} exit={code} message={message}", kind(&e));
            ExitCode::from(code as u8)
        }
    }
}
