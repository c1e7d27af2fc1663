use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use minifloat_qat::checkpoint::{load_checkpoint, save_checkpoint, write_atomic};
use minifloat_qat::codec::enumerate_values;
use minifloat_qat::config::RunConfig;
use minifloat_qat::export::export_quantized;
use minifloat_qat::format::{MinifloatFormat, QuantRange, ZeroEncoding};
use minifloat_qat::hw::{lut_report, sweep_multiplier, test_vector_line};
use minifloat_qat::train::{evaluate, load_datasets, Phase, Session};
use minifloat_qat::{Error, Result};

#[derive(Parser)]
#[command(name = "minifloat-qat", version, about = "Minifloat quantization, QAT and hardware golden models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Print the range and value grid of a format at a given bias.
    InspectFormat {
        /// Format such as E3M2, optionally suffixed with :zp or :zb.
        format: String,
        #[arg(long)]
        bias: Option<i32>,
        /// Zero encoding when the format has no suffix.
        #[arg(long, default_value = "point")]
        zero: ZeroEncoding,
    },
    /// Run warm-up calibration on a trained checkpoint and save the result.
    Calibrate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Full-precision training.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output directory for checkpoint and metrics.
        #[arg(long)]
        out: PathBuf,
        /// Continue from the checkpoint in the output directory, if any.
        #[arg(long)]
        resume: bool,
    },
    /// Quantization-aware fine-tuning of a trained checkpoint.
    QatFinetune {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Pretrained (or partially fine-tuned) checkpoint.
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Report mean IoU or top-1 accuracy of a checkpoint on its test set.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Evaluate with this configuration's data instead of the stored one.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Write packed quantized weights.
    Export {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Exhaustive multiplier verification with optional test-vector output.
    Hwsim {
        #[arg(long)]
        format: String,
        #[arg(long)]
        bias: Option<i32>,
        #[arg(long, default_value = "point")]
        zero: ZeroEncoding,
        /// File receiving one hex test vector per input pair.
        #[arg(long)]
        vectors: Option<PathBuf>,
    },
    /// Print the multiplier LUT cost table.
    LutReport,
    /// Print the default configuration file.
    DefaultConfig,
}

fn format_arg(s: &str, zero: ZeroEncoding) -> Result<MinifloatFormat> {
    let (fmt, explicit) = MinifloatFormat::parse_with_suffix(s)?;
    Ok(if explicit { fmt } else { fmt.with_zero_encoding(zero) })
}

fn inspect_format(fmt: &str, bias: Option<i32>, zero: ZeroEncoding) -> Result<()> {
    let fmt = format_arg(fmt, zero)?;
    let bias = bias.unwrap_or(fmt.ieee_bias());
    let range = QuantRange::new(fmt, bias)?;
    let values = enumerate_values(fmt, bias)?;
    println!("format {fmt} zero={} bias={bias}", fmt.zero_encoding());
    println!("x_min {:?}", range.x_min);
    println!("x_max {:?}", range.x_max);
    println!("values {}", values.len());
    let grid: Vec<String> = values.iter().map(|v| format!("{v:?}")).collect();
    println!("grid {}", grid.join(" "));
    Ok(())
}

/// Rewrites metrics and log files from the full history, so a resumed run
/// produces the same files as an uninterrupted one.
fn write_reports(dir: &Path, s: &Session) -> Result<()> {
    let mut metrics = String::new();
    let mut log = String::new();
    for r in &s.history {
        metrics.push_str(&r.to_line());
        metrics.push('\n');
        let phase = if r.phase == Phase::Qat { "qat" } else { "fp" };
        log.push_str(&format!(
            "[{phase}] epoch {:>3}  loss {:.6}  metric {:.4}  lr {:.3e}\n",
            r.epoch, r.loss, r.metric, r.lr
        ));
    }
    log.push_str(&s.bias_table());
    write_atomic(&dir.join("metrics.txt"), metrics.as_bytes())?;
    write_atomic(&dir.join("train.log"), log.as_bytes())
}

fn drive(mut s: Session, out: &Path) -> Result<()> {
    fs::create_dir_all(out)?;
    let (train, test) = load_datasets(&s.config)?;
    let ckpt = out.join("checkpoint.ckpt");
    save_checkpoint(&s, &ckpt)?;
    s.run(&train, &test, |s, r| {
        eprintln!("{}", r.to_line());
        save_checkpoint(s, &ckpt)?;
        write_reports(out, s)
    })?;
    write_reports(out, &s)?;
    if let Some(last) = s.history.last() {
        println!("final epoch {} loss {} metric {}", last.epoch, last.loss, last.metric);
    }
    println!("checkpoint {}", ckpt.display());
    Ok(())
}

fn train(config: Option<&Path>, out: &Path, resume: bool) -> Result<()> {
    let ckpt = out.join("checkpoint.ckpt");
    let session = if resume && ckpt.exists() {
        let s = load_checkpoint(&ckpt)?;
        if s.phase != Phase::FullPrecision {
            return Err(Error::Checkpoint(format!("{} is a fine-tuning checkpoint", ckpt.display())));
        }
        eprintln!("resuming at epoch {}", s.epoch);
        s
    } else {
        Session::new(RunConfig::resolve(config)?)?
    };
    drive(session, out)
}

fn qat_session(config: Option<&Path>, checkpoint: &Path) -> Result<Session> {
    let s = load_checkpoint(checkpoint)?;
    if s.phase == Phase::Qat {
        eprintln!("continuing fine-tuning at epoch {}", s.epoch);
        return Ok(s);
    }
    let cfg = match config {
        Some(_) => RunConfig::resolve(config)?,
        None => match std::env::var_os(minifloat_qat::config::CONFIG_ENV) {
            Some(_) => RunConfig::resolve(None)?,
            None => s.config.clone(),
        },
    };
    let (train, _) = load_datasets(&cfg)?;
    let (s, _) = s.start_qat(cfg, &train)?;
    eprint!("{}", s.bias_table());
    Ok(s)
}

fn eval(checkpoint: &Path, config: Option<&Path>) -> Result<()> {
    let mut s = load_checkpoint(checkpoint)?;
    let cfg = match config {
        Some(p) => RunConfig::load(p)?,
        None => s.config.clone(),
    };
    let (_, test) = load_datasets(&cfg)?;
    let metric = evaluate(&mut s.model, &test, &cfg)?;
    let name = if cfg.model.is_segmentation() { "mean_iou" } else { "top1" };
    println!("{name} {metric}");
    println!("samples {}", test.len());
    Ok(())
}

fn export(checkpoint: &Path, out: &Path) -> Result<()> {
    let s = load_checkpoint(checkpoint)?;
    let e = export_quantized(&s.model)?;
    e.write(out)?;
    let count: u64 = e.manifest.tensors.iter().map(|t| t.count).sum();
    println!("tensors {}", e.manifest.tensors.len());
    println!("elements {count}");
    println!("payload_bytes {}", e.manifest.payload_bytes);
    println!("f32_bytes {}", count * 4);
    println!("ratio {:.3}", (count * 4) as f64 / e.manifest.payload_bytes as f64);
    Ok(())
}

fn hwsim(fmt: &str, bias: Option<i32>, zero: ZeroEncoding, vectors: Option<&Path>) -> Result<()> {
    let fmt = format_arg(fmt, zero)?;
    let bias = bias.unwrap_or(fmt.ieee_bias());
    if fmt.width() > 12 {
        return Err(Error::InvalidArgument(format!("{fmt} has too many input pairs for an exhaustive sweep")));
    }
    let mut writer = match vectors {
        Some(p) => Some(BufWriter::new(fs::File::create(p)?)),
        None => None,
    };
    let sweep = sweep_multiplier(fmt, bias, |a, b, r| {
        if let Some(w) = &mut writer {
            writeln!(w, "{}", test_vector_line(a, b, r))?;
        }
        Ok(())
    })?;
    if let Some(mut w) = writer {
        w.flush()?;
    }
    println!("{}/{} pairs exact", sweep.exact, sweep.pairs);
    println!("max relative truncation error {:e} (bound {:e})", sweep.max_rel_error, 0.5f64.powi(fmt.man_bits() as i32));
    if let Some((a, b)) = sweep.first_mismatch {
        return Err(Error::InvalidArgument(format!("mismatch at {:#x} x {:#x}", a.0, b.0)));
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::InspectFormat { format, bias, zero } => inspect_format(&format, bias, zero),
        Command::Calibrate { config, checkpoint, out } => {
            let s = qat_session(config.as_deref(), &checkpoint)?;
            save_checkpoint(&s, &out)?;
            print!("{}", s.bias_table());
            Ok(())
        }
        Command::Train { config, out, resume } => train(config.as_deref(), &out, resume),
        Command::QatFinetune { config, checkpoint, out } => drive(qat_session(config.as_deref(), &checkpoint)?, &out),
        Command::Eval { checkpoint, config } => eval(&checkpoint, config.as_deref()),
        Command::Export { checkpoint, out } => export(&checkpoint, &out),
        Command::Hwsim { format, bias, zero, vectors } => hwsim(&format, bias, zero, vectors.as_deref()),
        Command::LutReport => {
            print!("{}", lut_report());
            Ok(())
        }
        Command::DefaultConfig => {
            print!("{}", RunConfig::default().to_toml());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.to_string().replace('\n', " "));
            ExitCode::FAILURE
        }
    }
}
