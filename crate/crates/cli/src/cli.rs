//! Command-line front end.

use std::ffi::OsString;
use std::fs;
use std::path::PathBuf;

use clap::{Parser, Subcommand, ValueEnum};
use udmamba_core::io::Checkpoint;
use udmamba_core::synth::Dataset;

use crate::bench::{bench_scan, to_csv};
use crate::config::TrainConfig;
use crate::error::{CliError, CliResult};
use crate::evaluate::evaluate;
use crate::inspect::inspect;
use crate::train::{default_out_dir, load_dataset, restore, train};

#[derive(Debug, Parser)]
#[command(name = "udmamba", version, about = "Uncertainty-driven selective-scan segmentation")]
pub struct Cli {
    /// Worker threads; 1 guarantees bit-reproducible runs.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum Split {
    Train,
    Val,
    Test,
    All,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a network; writes logs, alpha trace, and checkpoints.
    Train {
        /// JSON configuration; defaults when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_os_t = default_out_dir())]
        out: PathBuf,
        /// `--key value` overrides of configuration fields (dotted paths).
        #[arg(trailing_var_arg = true, allow_hyphen_values = true, value_name = "OVERRIDES")]
        overrides: Vec<String>,
    },
    /// Evaluate a checkpoint; per-class and macro metrics as CSV and JSON.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset directory; the checkpoint's data settings when omitted.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "test")]
        split: Split,
        /// Directory for metrics.csv / metrics.json; JSON to stdout otherwise.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Time the sequential and parallel scan kernels.
    BenchScan {
        #[arg(long, value_delimiter = ',', default_values_t = [1024usize, 2048, 4096, 8192, 16384, 32768])]
        lengths: Vec<usize>,
        #[arg(long, default_value_t = 16)]
        channels: usize,
        #[arg(long, default_value_t = 8)]
        state: usize,
        #[arg(long, default_value_t = 5)]
        reps: usize,
        /// CSV destination; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Dump uncertainty maps and scan orders of every UD block for an image.
    Inspect {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write a synthetic dataset directory.
    Synth {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(trailing_var_arg = true, allow_hyphen_values = true, value_name = "OVERRIDES")]
        overrides: Vec<String>,
    },
}

fn write_err(e: std::io::Error, path: &std::path::Path) -> CliError {
    CliError::Io(format!("{}: {e}", path.display()))
}

pub fn dispatch(cmd: Command) -> CliResult<()> {
    match cmd {
        Command::Train { config, out, overrides } => {
            let cfg = TrainConfig::load(config.as_deref(), &overrides)?;
            let start = std::time::Instant::now();
            let run = train(&cfg, Some(&out))?;
            let s = &run.summary;
            eprintln!(
                "trained {} steps in {:.1}s: final loss {:.6}, best val DSC {:.4} (epoch {}), final train DSC {:.4}",
                s.steps,
                start.elapsed().as_secs_f64(),
                s.final_loss,
                s.best_val_dsc,
                s.best_epoch,
                s.final_train_dsc
            );
            Ok(())
        }
        Command::Eval { checkpoint, data, split, out } => {
            let ck = Checkpoint::load(&checkpoint)?;
            let (mut cfg, net) = restore(&ck)?;
            if data.is_some() {
                cfg.data_dir = data;
            }
            let ds = match &cfg.data_dir {
                Some(dir) => Dataset::read_dir(dir)?,
                None => load_dataset(&cfg)?,
            };
            let sp = &ds.manifest.splits;
            let indices = match split {
                Split::Train => sp.train.clone(),
                Split::Val => sp.val.clone(),
                Split::Test => sp.test.clone(),
                Split::All => (0..ds.samples.len()).collect(),
            };
            let report = evaluate(&net, &ds, &indices, cfg.eval_batch_size)?;
            let json = report.to_json()?;
            match out {
                Some(dir) => {
                    fs::create_dir_all(&dir).map_err(|e| write_err(e, &dir))?;
                    fs::write(dir.join("metrics.csv"), report.to_csv())?;
                    fs::write(dir.join("metrics.json"), &json)?;
                }
                None => println!("{json}"),
            }
            for (k, m) in report.per_class.iter().enumerate() {
                if m.hd95.is_infinite() {
                    eprintln!("warning: class {} has an empty mask in some sample; HD95 is infinite", k + 1);
                }
            }
            Ok(())
        }
        Command::BenchScan { lengths, channels, state, reps, out } => {
            if channels == 0 || state == 0 || reps == 0 || lengths.contains(&0) {
                return Err(CliError::Config("lengths, channels, state and reps must be positive".into()));
            }
            let csv = to_csv(&bench_scan(&lengths, channels, state, reps, 0)?);
            match out {
                Some(p) => fs::write(&p, csv).map_err(|e| write_err(e, &p))?,
                None => print!("{csv}"),
            }
            Ok(())
        }
        Command::Inspect { checkpoint, image, out } => {
            let (_, net) = restore(&Checkpoint::load(&checkpoint)?)?;
            let labels = inspect(&net, &image, &out)?;
            eprintln!("wrote {} dumps to {}", labels.len(), out.display());
            Ok(())
        }
        Command::Synth { config, out, overrides } => {
            let cfg = TrainConfig::load(config.as_deref(), &overrides)?;
            let ds = Dataset::synthesize(&cfg.synth, cfg.val_fraction, cfg.test_fraction)?;
            ds.write_dir(&out)?;
            eprintln!("wrote {} samples to {}", ds.samples.len(), out.display());
            Ok(())
        }
    }
}

/// Parse arguments and run; returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    let threads = cli.threads.unwrap_or(0);
    let pool = match rayon::ThreadPoolBuilder::new().num_threads(threads).build() {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: thread pool: {e}");
            return crate::error::EXIT_CONFIG;
        }
    };
    match pool.install(|| dispatch(cli.command)) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
