//! Command-line front end for the alignment pipeline.
//!
//! Every subcommand writes all of its outputs under `--out`, echoes the
//! effective configuration to `run.cfg`, and holds a lockfile for the
//! lifetime of the run. Errors print one line on stderr. Exit codes:
//! 0 success, 2 usage, 3 config validation, 4 numeric failure, 1 other.

mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use neuralign::checkpoint::{load_checkpoint, save_checkpoint};
use neuralign::data::{load_dataset, save_dataset, save_array, CfgFile, Dataset, RoleTag};
use neuralign::error::{Error, Result};
use neuralign::evalkit::{retrieval_report, rsm, window_sweep};
use neuralign::model::Model;
use neuralign::synth::gen_split;
use neuralign::trainer::{train_stage1, train_stage2, TrainReport};
use neuralign::verify::{gradient_suite, invariant_suite};

#[derive(Parser)]
#[command(name = "neuralign", version, about = "language-anchored brain-vision alignment pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a paired synthetic dataset (train/ and test/ splits).
    Gen {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Stage-1 training on one modality.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Stage-2 fine-tuning of a new modality against a stage-1 checkpoint.
    Finetune {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// N-way top-k retrieval report over a test split.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Representational similarity matrix of brain embeddings.
    Rsm {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train/evaluate across temporal window truncations.
    Sweep {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Comma-separated window lengths in timesteps.
        #[arg(long, value_delimiter = ',')]
        windows: Vec<usize>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Gradient oracle over every differentiable block.
    Gradcheck,
    /// Invariant plus gradient suites.
    Selftest,
}

/// Holds `<out>/.lock` for the lifetime of a run.
struct OutDir {
    path: PathBuf,
}

impl OutDir {
    fn prepare(path: &Path) -> Result<Self> {
        std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))?;
        let lock = path.join(".lock");
        match std::fs::OpenOptions::new().write(true).create_new(true).open(&lock) {
            Ok(_) => Ok(OutDir { path: path.to_path_buf() }),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::Invalid(format!(
                "output directory {} is locked by another run (delete {} if stale)",
                path.display(),
                lock.display()
            ))),
            Err(e) => Err(Error::io(&lock, e)),
        }
    }

    fn join(&self, name: &str) -> PathBuf {
        self.path.join(name)
    }
}

impl Drop for OutDir {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(self.path.join(".lock"));
    }
}

fn load_cfg_file(path: &Option<PathBuf>) -> Result<Option<CfgFile>> {
    match path {
        None => Ok(None),
        Some(p) => Ok(Some(CfgFile::read(p)?)),
    }
}

enum Split {
    Train,
    Test,
}

/// Accept either a split directory itself or a parent holding
/// `train/` and `test/`.
fn resolve_split(data: &Path, split: Split) -> Result<PathBuf> {
    if data.join("meta.cfg").exists() {
        return Ok(data.to_path_buf());
    }
    let name = match split {
        Split::Train => "train",
        Split::Test => "test",
    };
    let sub = data.join(name);
    if sub.join("meta.cfg").exists() {
        return Ok(sub);
    }
    Err(Error::Invalid(format!(
        "{} is not a dataset directory (no meta.cfg) and has no {name}/ split",
        data.display()
    )))
}

fn write_report(out: &OutDir, report: &TrainReport) -> Result<()> {
    let mut cfg = CfgFile::new();
    cfg.set("report", "steps", report.steps);
    cfg.set("report", "initial_loss", report.initial_loss);
    cfg.set("report", "final_loss", report.final_loss);
    for (i, l) in report.epoch_mean_loss.iter().enumerate() {
        cfg.set("epoch_loss", &i.to_string(), l);
    }
    cfg.write(out.join("report.cfg"))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Gen { out, config, seed } => {
            let cfg = load_cfg_file(&config)?;
            let (run_cfg, eval_cfg) = config::RunConfig::resolve(cfg.as_ref(), 1, seed)?;
            let out = OutDir::prepare(&out)?;
            let (train_ds, test_ds) = gen_split::<f32>(&run_cfg.data)?;
            save_dataset(out.join("train"), &train_ds)?;
            save_dataset(out.join("test"), &test_ds)?;
            run_cfg.echo(&eval_cfg).write(out.join("run.cfg"))?;
            println!(
                "generated {} train + {} test samples under {}",
                train_ds.n_samples(),
                test_ds.n_samples(),
                out.path.display()
            );
            Ok(())
        }

        Command::Train { data, out, config, seed } => {
            let cfg = load_cfg_file(&config)?;
            let (run_cfg, eval_cfg) = config::RunConfig::resolve(cfg.as_ref(), 1, seed)?;
            let out = OutDir::prepare(&out)?;
            let split = resolve_split(&data, Split::Train)?;
            let ds: Dataset<f32> = load_dataset(&split)?;
            let mcfg = run_cfg.model_cfg(ds.brain.channels(), ds.brain.timesteps(), ds.vision.dim());
            let mut model = Model::<f32>::init(mcfg, run_cfg.train.seed)?;
            let report = train_stage1(&mut model, &ds, &run_cfg.train)?;
            save_checkpoint(out.join("checkpoint"), &model, 1)?;
            write_report(&out, &report)?;
            run_cfg.echo(&eval_cfg).write(out.join("run.cfg"))?;
            println!(
                "stage 1: {} steps, loss {:.4} -> {:.4}, checkpoint at {}",
                report.steps,
                report.initial_loss,
                report.final_loss,
                out.join("checkpoint").display()
            );
            Ok(())
        }

        Command::Finetune { data, ckpt, out, config, seed } => {
            let cfg = load_cfg_file(&config)?;
            let (run_cfg, eval_cfg) = config::RunConfig::resolve(cfg.as_ref(), 2, seed)?;
            let out = OutDir::prepare(&out)?;
            let split = resolve_split(&data, Split::Train)?;
            let ds: Dataset<f32> = load_dataset(&split)?;
            let (mut model, _) = load_checkpoint::<f32>(&ckpt)?;
            let report = train_stage2(&mut model, &ds, &run_cfg.train)?;
            save_checkpoint(out.join("checkpoint"), &model, 2)?;
            write_report(&out, &report)?;
            run_cfg.echo(&eval_cfg).write(out.join("run.cfg"))?;
            println!(
                "stage 2: {} steps, loss {:.4} -> {:.4}, checkpoint at {}",
                report.steps,
                report.initial_loss,
                report.final_loss,
                out.join("checkpoint").display()
            );
            Ok(())
        }

        Command::Eval { data, ckpt, out, config, seed } => {
            let cfg = load_cfg_file(&config)?;
            let (run_cfg, eval_cfg) = config::RunConfig::resolve(cfg.as_ref(), 1, seed)?;
            let out = OutDir::prepare(&out)?;
            let split = resolve_split(&data, Split::Test)?;
            let ds: Dataset<f32> = load_dataset(&split)?;
            let (model, _) = load_checkpoint::<f32>(&ckpt)?;
            let (f_brain, f_vis) = model.embed_dataset(&ds)?;
            let report = retrieval_report(
                &f_brain,
                &f_vis,
                &eval_cfg.n_ways,
                &eval_cfg.ks,
                eval_cfg.trials,
                eval_cfg.seed,
            )?;
            std::fs::write(out.join("retrieval.csv"), report.to_csv())
                .map_err(|e| Error::io(out.join("retrieval.csv"), e))?;
            // raw embeddings for external analysis tools
            save_array(out.join("f_brain.bten"), f_brain.values(), RoleTag::Embedding)?;
            save_array(out.join("f_vis.bten"), f_vis.values(), RoleTag::Embedding)?;
            run_cfg.echo(&eval_cfg).write(out.join("run.cfg"))?;
            for c in &report.cells {
                println!("{}-way top-{}: {:.4}", c.n_way, c.k, c.accuracy);
            }
            Ok(())
        }

        Command::Rsm { data, ckpt, out, config, seed } => {
            let cfg = load_cfg_file(&config)?;
            let (run_cfg, eval_cfg) = config::RunConfig::resolve(cfg.as_ref(), 1, seed)?;
            let out = OutDir::prepare(&out)?;
            let split = resolve_split(&data, Split::Test)?;
            let ds: Dataset<f32> = load_dataset(&split)?;
            let (model, _) = load_checkpoint::<f32>(&ckpt)?;
            let (f_brain, _) = model.embed_dataset(&ds)?;
            let labels: Vec<usize> = match &ds.labels {
                Some(l) => l.clone(),
                None => (0..ds.n_samples()).collect(),
            };
            let r = rsm(&f_brain, &labels)?;
            save_array(out.join("rsm.bten"), &r.matrix, RoleTag::Similarity)?;
            let mut sidecar = CfgFile::new();
            for (row, (label, orig)) in r.labels.iter().zip(&r.order).enumerate() {
                sidecar.set("labels", &row.to_string(), format!("{label} sample={orig}"));
            }
            for (label, start) in &r.boundaries {
                sidecar.set("boundaries", &label.to_string(), start);
            }
            sidecar.write(out.join("rsm_labels.cfg"))?;
            run_cfg.echo(&eval_cfg).write(out.join("run.cfg"))?;
            println!(
                "rsm over {} samples ({} categories) at {}",
                r.labels.len(),
                r.boundaries.len(),
                out.join("rsm.bten").display()
            );
            Ok(())
        }

        Command::Sweep { data, out, windows, config, seed } => {
            let cfg = load_cfg_file(&config)?;
            let (run_cfg, eval_cfg) = config::RunConfig::resolve(cfg.as_ref(), 1, seed)?;
            let out = OutDir::prepare(&out)?;
            let train_split = resolve_split(&data, Split::Train)?;
            let test_split = resolve_split(&data, Split::Test)?;
            let train_ds: Dataset<f32> = load_dataset(&train_split)?;
            let test_ds: Dataset<f32> = load_dataset(&test_split)?;
            let base = run_cfg.model_cfg(
                train_ds.brain.channels(),
                train_ds.brain.timesteps(),
                train_ds.vision.dim(),
            );
            let n_way = match eval_cfg.sweep_n_way {
                0 => test_ds.n_samples(),
                v => v,
            };
            let report = window_sweep(
                &train_ds,
                &test_ds,
                &windows,
                &base,
                &run_cfg.train,
                n_way,
                eval_cfg.trials,
                eval_cfg.seed,
            )?;
            std::fs::write(out.join("sweep.csv"), report.to_csv())
                .map_err(|e| Error::io(out.join("sweep.csv"), e))?;
            run_cfg.echo(&eval_cfg).write(out.join("run.cfg"))?;
            for row in &report.rows {
                println!("window {}: top-1 {:.4}", row.window, row.top1);
            }
            Ok(())
        }

        Command::Gradcheck => {
            let entries = gradient_suite()?;
            let mut failed = false;
            for e in &entries {
                let status = if e.passed { "ok" } else { "FAIL" };
                println!("{status} {} ({} params): {}", e.name, e.params, e.detail);
                failed |= !e.passed;
            }
            if failed {
                Err(Error::NonFinite("gradient suite failed".into()))
            } else {
                Ok(())
            }
        }

        Command::Selftest => {
            let mut failed = false;
            for e in invariant_suite() {
                let status = if e.passed { "ok" } else { "FAIL" };
                println!("{status} {}: {}", e.name, e.detail);
                failed |= !e.passed;
            }
            for e in gradient_suite()? {
                let status = if e.passed { "ok" } else { "FAIL" };
                println!("{status} {} ({} params): {}", e.name, e.params, e.detail);
                failed |= !e.passed;
            }
            if failed {
                Err(Error::Invalid("selftest failed".into()))
            } else {
                println!("selftest passed");
                Ok(())
            }
        }
    }
}

fn exit_code_for(err: &Error) -> u8 {
    match err {
        Error::Config(_) => 3,
        Error::NonFinite(_) | Error::Diverged { .. } => 4,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code_for(&e))
        }
    }
}
