use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use tape_core::degrade::{read_ppm, write_ppm, CleanSource};
use tape_core::gradcheck::{run_suite, TOLERANCE};
use tape_core::metrics::evaluate_set;
use tape_core::pipeline::{
    compare_pretrain_effect, finetune, load_checkpoint, parse_config, pretrain_from, restore_image,
    save_checkpoint, Checkpoint, TrainConfig,
};

/// Train, fine-tune and evaluate prior-query restoration models.
#[derive(Parser)]
#[command(name = "tape", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Task-agnostic pre-training on the config's pretrain-known tasks.
    Pretrain(Flags),
    /// Fine-tune a pre-trained checkpoint on one task.
    Finetune(Flags),
    /// Evaluate a checkpoint on a task's fixed evaluation set.
    Eval(Flags),
    /// Restore a single P6 image.
    Restore(Flags),
    /// Fine-tune from scratch and from pre-training, report both.
    Compare(Flags),
    /// Finite-difference check of every differentiable operation.
    Gradcheck(Flags),
}

#[derive(Args)]
struct Flags {
    /// JSON experiment config; defaults apply to missing fields.
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Input checkpoint.
    #[arg(long, value_name = "FILE")]
    ckpt: Option<PathBuf>,
    /// Output checkpoint or report.
    #[arg(long, value_name = "FILE")]
    out: Option<PathBuf>,
    #[arg(long, value_name = "NAME")]
    task: Option<String>,
    #[arg(long, value_name = "FILE")]
    input: Option<PathBuf>,
    #[arg(long, value_name = "FILE")]
    output: Option<PathBuf>,
    /// Overrides the config's master seed.
    #[arg(long, value_name = "N")]
    seed: Option<u64>,
}

impl Flags {
    fn config(&self) -> Result<TrainConfig> {
        let mut cfg = match &self.config {
            Some(path) => parse_config(path)?,
            None => TrainConfig::default(),
        };
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn task(&self, cfg: &TrainConfig, ckpt: Option<&Checkpoint>) -> Result<String> {
        self.task
            .clone()
            .or_else(|| cfg.finetune_task.clone())
            .or_else(|| ckpt.and_then(|c| c.task.clone()))
            .ok_or_else(|| anyhow!("no task given: pass --task or set finetune_task in the config"))
    }

    fn checkpoint(&self) -> Result<Checkpoint> {
        let path = self.ckpt.as_ref().ok_or_else(|| anyhow!("--ckpt is required"))?;
        load_checkpoint(path).with_context(|| format!("loading {}", path.display()))
    }

    fn out_or(&self, fallback: Option<&PathBuf>, default: &str) -> PathBuf {
        self.out.clone().or_else(|| fallback.cloned()).unwrap_or_else(|| default.into())
    }
}

fn sidecar(out: &Path, suffix: &str) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(suffix);
    s.into()
}

/// Writes the effective config next to an output, for reproducibility.
fn echo_config(cfg: &TrainConfig, out: &Path) -> Result<()> {
    let path = sidecar(out, ".config.json");
    std::fs::write(&path, cfg.to_json() + "\n").with_context(|| format!("writing {}", path.display()))
}

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Pretrain(f) => {
            let cfg = f.config()?;
            let out = f.out_or(cfg.pretrain_checkpoint.as_ref(), "pretrain.ckpt");
            echo_config(&cfg, &out)?;
            let start = match &f.ckpt {
                Some(_) => f.checkpoint()?,
                None => Checkpoint::init(&cfg.model, cfg.seed),
            };
            let (ckpt, log) = pretrain_from(&cfg, start)?;
            save_checkpoint(&ckpt, &out)?;
            log.write_csv(sidecar(&out, ".log.csv"))?;
            let n = log.records.len();
            if n > 0 {
                let w = n.min(50);
                println!(
                    "pretrained {} iterations; mean L1 first {w}: {:.5}, last {w}: {:.5}",
                    ckpt.iteration,
                    log.mean_l1(0..w),
                    log.mean_l1(n - w..n)
                );
            }
            println!("wrote {}", out.display());
        }
        Command::Finetune(f) => {
            let cfg = f.config()?;
            let init = f.checkpoint()?;
            let task = f.task(&cfg, Some(&init))?;
            let out = f.out_or(cfg.finetune_checkpoint.as_ref(), "finetune.ckpt");
            echo_config(&cfg, &out)?;
            let (ckpt, log) = finetune(&cfg, init, &task)?;
            save_checkpoint(&ckpt, &out)?;
            log.write_csv(sidecar(&out, ".log.csv"))?;
            println!("fine-tuned on {task} ({:?}); wrote {}", cfg.finetune_mode, out.display());
        }
        Command::Eval(f) => {
            let cfg = f.config()?;
            let ckpt = f.checkpoint()?;
            let task = f.task(&cfg, Some(&ckpt))?;
            let out = f.out_or(None, "eval.csv");
            echo_config(&cfg, &out)?;
            let source = match &cfg.clean_dir {
                Some(dir) => CleanSource::from_dir(dir)?,
                None => CleanSource::Synthetic,
            };
            let pairs = cfg.tasks.eval_pairs(&task, cfg.eval_images, cfg.height, cfg.width, &source)?;
            let report = evaluate_set(&ckpt, &pairs)?;
            write(&out, &report.to_csv())?;
            print!("{}", report.table());
        }
        Command::Restore(f) => {
            let ckpt = f.checkpoint()?;
            let input = f.input.as_ref().ok_or_else(|| anyhow!("--input is required"))?;
            let output = f.output.as_ref().ok_or_else(|| anyhow!("--output is required"))?;
            let image = read_ppm(input)?;
            let restored = restore_image(&ckpt, &image)?;
            write_ppm(output, &restored)?;
            println!("wrote {}", output.display());
        }
        Command::Compare(f) => {
            let cfg = f.config()?;
            let pretrained = f.ckpt.as_ref().map(|_| f.checkpoint()).transpose()?;
            let task = f.task(&cfg, None)?;
            let out = f.out_or(None, "compare.csv");
            echo_config(&cfg, &out)?;
            let cmp = compare_pretrain_effect(&cfg, &task, pretrained)?;
            write(&out, &cmp.to_csv())?;
            println!(
                "{task}: scratch {:.4} dB, pretrained {:.4} dB, delta {:+.4} dB (SSIM {:.4} vs {:.4})",
                cmp.scratch.mean_psnr(),
                cmp.pretrained.mean_psnr(),
                cmp.delta_psnr(),
                cmp.scratch.mean_ssim(),
                cmp.pretrained.mean_ssim()
            );
        }
        Command::Gradcheck(f) => {
            let reports = run_suite(20, f.seed.unwrap_or(7))?;
            println!("{:<14} {:>9} {:>12} {:>6}  worst input", "op", "instances", "max rel err", "kinks");
            for r in &reports {
                println!(
                    "{:<14} {:>9} {:>12.3e} {:>6}  {}",
                    r.op, r.instances, r.max_rel_err, r.kinks, r.worst_group
                );
            }
            let failed: Vec<_> = reports.iter().filter(|r| !r.passed()).map(|r| r.op).collect();
            if !failed.is_empty() {
                bail!("relative error above {TOLERANCE:e} for: {}", failed.join(", "));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
