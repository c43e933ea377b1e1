//! `pmt`: train, evaluate and verify the pyramidal multimodal transformer.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use pmt_core::checkpoint::{self, Checkpoint};
use pmt_core::config::FloatWidth;
use pmt_core::data::{DataConfig, Split, Splits};
use pmt_core::gradcheck::{gradcheck, GradcheckOptions};
use pmt_core::train::{evaluate, task_samples, DiagnosticRow, Metrics, Outputs, Trainer};
use pmt_core::{ModelConfig, Pmt, RunConfig, Task};
use pmt_tensor::Real;

#[derive(Parser)]
#[command(name = "pmt", version, about = "Pyramidal multimodal transformer for video question answering")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model, writing checkpoints and a per-epoch metrics log.
    Train {
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Evaluate a checkpoint on a data split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// train, val or test.
        #[arg(long, default_value = "test")]
        split: String,
        /// Where readout diagnostics go when `diagnostics=true`.
        #[arg(long)]
        diagnostics_out: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Finite-difference check of every parameter group on a tiny model.
    Gradcheck {
        /// Check one task instead of all three.
        #[arg(long)]
        task: Option<Task>,
        /// Coordinates per parameter tensor (default: all).
        #[arg(long)]
        coords: Option<usize>,
        #[command(flatten)]
        common: Common,
    },
    /// Generate a synthetic train/val/test dataset.
    GenData {
        /// Output directory; defaults to the `dataset` key.
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
}

#[derive(Args)]
struct Common {
    /// Configuration file of `key=value` lines.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides as `--key value` or `--key=value`, after the options above.
    #[arg(trailing_var_arg = true, allow_hyphen_values = true, value_name = "--KEY VALUE")]
    overrides: Vec<String>,
}

fn parse_overrides(args: &[String]) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    let mut it = args.iter();
    while let Some(a) = it.next() {
        let Some(key) = a.strip_prefix("--") else {
            bail!(pmt_core::Error::Config(format!("expected --key, got {a:?}")));
        };
        match key.split_once('=') {
            Some((k, v)) => out.push((k.to_string(), v.to_string())),
            None => {
                let v = it
                    .next()
                    .ok_or_else(|| pmt_core::Error::Config(format!("--{key} needs a value")))?;
                out.push((key.to_string(), v.clone()));
            }
        }
    }
    Ok(out)
}

impl Common {
    /// `base`, then the config file, then the overrides.
    fn resolve(&self, base: RunConfig) -> Result<RunConfig> {
        let mut cfg = base;
        if let Some(path) = &self.config {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            cfg.apply_text(&text)?;
        }
        for (k, v) in parse_overrides(&self.overrides)? {
            cfg.set(&k, &v)?;
        }
        Ok(cfg)
    }
}

fn load_data(cfg: &RunConfig) -> Result<Splits> {
    Ok(match &cfg.dataset {
        Some(dir) => Splits::load(dir).with_context(|| format!("loading dataset {}", dir.display()))?,
        None => Splits::generate(
            &DataConfig::from_run(cfg),
            cfg.seed,
            [cfg.train_size, cfg.val_size, cfg.test_size],
            &cfg.tasks(),
        )?,
    })
}

fn metrics_text(m: &Metrics) -> String {
    let mut s = format!("samples={}\nloss={}\n", m.samples, m.total);
    for (l, v) in m.per_level.iter().enumerate() {
        s += &format!("loss_l{}={v}\n", l + 1);
    }
    s += &format!("step_loss={}\n", m.step_loss);
    if let Some(a) = m.accuracy {
        s += &format!("accuracy={a}\n");
    }
    if let (Some(raw), Some(rounded)) = (m.mse_raw, m.mse_rounded) {
        s += &format!("mse_raw={raw}\nmse_rounded={rounded}\n");
    }
    s
}

fn train<F: Real>(cfg: RunConfig, resume: Option<&Path>) -> Result<()> {
    let splits = load_data(&cfg)?;
    let mut trainer = match resume {
        Some(path) => {
            let ckpt: Checkpoint<F> = checkpoint::load(path).with_context(|| format!("loading {}", path.display()))?;
            Trainer::<F>::resume(cfg.clone(), &splits, &ckpt)?
        }
        None => Trainer::<F>::new(cfg.clone(), &splits)?,
    };
    let out = Outputs::from_config(&cfg);
    eprintln!(
        "training {} on {} samples ({} val), {} parameters",
        cfg.model.task,
        trainer.train.len(),
        trainer.val.len(),
        trainer.model.store.iter().filter(|(_, p)| p.trainable).map(|(_, p)| p.value.numel()).sum::<usize>()
    );
    trainer.run(&out, cfg.max_epochs, |r| {
        let metric = match (r.val.accuracy, r.val.mse_rounded) {
            (Some(a), _) => format!("val_acc {a:.4}"),
            (None, Some(m)) => format!("val_mse_rounded {m:.4}"),
            _ => String::new(),
        };
        eprintln!(
            "epoch {:>3}  lr {:.3e}  train {:.4}  val {:.4}  {metric}  ({:.1}s)",
            r.epoch, r.lr, r.train.total, r.val.total, r.seconds
        );
        true
    })?;
    println!(
        "best epoch {} score {}",
        trainer.state.best_epoch, trainer.state.best_score
    );
    Ok(())
}

fn eval<F: Real>(common: &Common, ckpt_path: &Path, split: Split, diag_out: Option<PathBuf>) -> Result<()> {
    let ckpt: Checkpoint<F> =
        checkpoint::load(ckpt_path).with_context(|| format!("loading {}", ckpt_path.display()))?;
    let base = if common.config.is_some() {
        RunConfig::default()
    } else {
        RunConfig::from_text(&ckpt.config)?
    };
    let cfg = common.resolve(base)?;
    cfg.validate()?;
    let mut model = Pmt::<F>::new(cfg.model.clone(), cfg.seed)?;
    checkpoint::restore(&ckpt, &mut model, None)?;
    let splits = load_data(&cfg)?;
    let samples = task_samples(splits.get(split), cfg.model.task);
    let (m, diag) = evaluate(&model, &cfg, &samples, cfg.diagnostics)?;
    print!("split={}\ntask={}\n{}", split.name(), cfg.model.task, metrics_text(&m));
    if cfg.diagnostics {
        let path = diag_out.unwrap_or_else(|| ckpt_path.with_extension("diag.tsv"));
        let mut text = format!("{}\n", DiagnosticRow::HEADER);
        for row in &diag {
            text += &row.to_row();
            text.push('\n');
        }
        std::fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?;
        eprintln!("diagnostics written to {}", path.display());
    }
    Ok(())
}

fn run_gradcheck(cfg: &RunConfig, task: Option<Task>, coords: Option<usize>) -> Result<bool> {
    let tasks = task.map_or(Task::ALL.to_vec(), |t| vec![t]);
    let opts = GradcheckOptions {
        seed: cfg.seed,
        coords_per_param: coords,
        ..GradcheckOptions::default()
    };
    let mut ok = true;
    for t in tasks {
        // Tiny dimensions with the run's ablation switches.
        let m = &cfg.model;
        let tiny = ModelConfig {
            no_decomposition: m.no_decomposition,
            topdown: m.topdown,
            no_constraint: m.no_constraint,
            attention_scale: m.attention_scale,
            lambda: m.lambda,
            ..ModelConfig::tiny(t)
        };
        let start = Instant::now();
        let report = gradcheck(&tiny, &opts)?;
        print!("{}", report.to_text());
        println!("  {:.1}s", start.elapsed().as_secs_f64());
        ok &= report.passed();
    }
    println!("{}", if ok { "gradcheck PASS" } else { "gradcheck FAIL" });
    Ok(ok)
}

fn gen_data(cfg: &RunConfig, out: &Path) -> Result<()> {
    let splits = Splits::generate(
        &DataConfig::from_run(cfg),
        cfg.seed,
        [cfg.train_size, cfg.val_size, cfg.test_size],
        &cfg.tasks(),
    )?;
    splits.save(out).with_context(|| format!("writing dataset to {}", out.display()))?;
    println!(
        "wrote {} train, {} val, {} test samples and {} words to {}",
        splits.train.len(),
        splits.val.len(),
        splits.test.len(),
        splits.vocab.len(),
        out.display()
    );
    Ok(())
}

fn parse_split(s: &str) -> Result<Split> {
    Split::ALL
        .into_iter()
        .find(|x| x.name() == s)
        .ok_or_else(|| pmt_core::Error::Config(format!("unknown split {s:?}, expected train, val or test")).into())
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Train { resume, common } => {
            let mut cfg = common.resolve(RunConfig::default())?;
            if cfg.checkpoint_dir.is_none() {
                cfg.checkpoint_dir = Some(PathBuf::from("runs"));
            }
            if cfg.metrics.is_none() {
                cfg.metrics = cfg.checkpoint_dir.as_ref().map(|d| d.join("metrics.tsv"));
            }
            cfg.validate()?;
            match cfg.float {
                FloatWidth::F32 => train::<f32>(cfg, resume.as_deref())?,
                FloatWidth::F64 => train::<f64>(cfg, resume.as_deref())?,
            }
        }
        Command::Eval {
            checkpoint,
            split,
            diagnostics_out,
            common,
        } => {
            let split = parse_split(&split)?;
            // The checkpoint's own scalar type decides the float width.
            match checkpoint::load::<f32>(&checkpoint) {
                Ok(_) => eval::<f32>(&common, &checkpoint, split, diagnostics_out)?,
                Err(pmt_core::Error::Checkpoint(_)) => eval::<f64>(&common, &checkpoint, split, diagnostics_out)?,
                Err(e) => return Err(e).with_context(|| format!("loading {}", checkpoint.display())),
            }
        }
        Command::Gradcheck { task, coords, common } => {
            let cfg = common.resolve(RunConfig::default())?;
            cfg.validate()?;
            if !run_gradcheck(&cfg, task, coords)? {
                return Ok(ExitCode::from(2));
            }
        }
        Command::GenData { out, common } => {
            let cfg = common.resolve(RunConfig::default())?;
            cfg.validate()?;
            let out = out
                .or_else(|| cfg.dataset.clone())
                .ok_or_else(|| pmt_core::Error::Config("gen-data needs --out or a dataset key".into()))?;
            gen_data(&cfg, &out)?;
        }
    }
    Ok(ExitCode::SUCCESS)
}

/// 1 usage or configuration, 2 numeric, 3 I/O.
fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<pmt_core::Error>() {
            return e.exit_code() as u8;
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return 3;
        }
    }
    1
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}
