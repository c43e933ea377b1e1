//! Training loop, evaluation and the per-epoch metrics log.

use std::fs::OpenOptions;
use std::io::{BufRead, BufReader, Write as _};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;

use pmt_tensor::rng::{derive_seed, seeded};
use pmt_tensor::{Real, Rng, Tape};

use crate::checkpoint::{self, Checkpoint, TrainState};
use crate::config::{PlateauOn, RunConfig, Task};
use crate::data::qa::Answer;
use crate::data::sampling::{augment, sample_frames, SampleMode};
use crate::data::{Sample, Splits};
use crate::decoders::{Mode, Targets};
use crate::error::{Error, Result};
use crate::model::{Example, Forward, Pmt, Prediction};
use crate::optim::Adam;

/// Seed stream of the per-epoch generator (shuffle, frame choice, augmentation).
const EPOCH_STREAM: u64 = 0x4550_4f43;
pub const LAST_CHECKPOINT: &str = "last.ckpt";
pub const BEST_CHECKPOINT: &str = "best.ckpt";

/// Averaged losses and task metric over a pass.
#[derive(Debug, Clone, PartialEq)]
pub struct Metrics {
    pub per_level: Vec<f64>,
    pub step_loss: f64,
    pub total: f64,
    /// Open-ended and multi-choice.
    pub accuracy: Option<f64>,
    /// Count: squared error of the raw output and of the rounded count.
    pub mse_raw: Option<f64>,
    pub mse_rounded: Option<f64>,
    pub samples: usize,
}

impl Metrics {
    /// Higher is better: accuracy, or negated rounded MSE.
    pub fn score(&self) -> f64 {
        match (self.accuracy, self.mse_rounded) {
            (Some(a), _) => a,
            (None, Some(m)) => -m,
            _ => f64::NEG_INFINITY,
        }
    }
}

#[derive(Default)]
struct Accumulator {
    per_level: Vec<f64>,
    step: f64,
    total: f64,
    correct: usize,
    sq_raw: f64,
    sq_rounded: f64,
    n: usize,
}

impl Accumulator {
    fn add_losses(&mut self, per_level: &[f64], step: f64, total: f64, n: usize) {
        if self.per_level.is_empty() {
            self.per_level = vec![0.0; per_level.len()];
        }
        let w = n as f64;
        for (a, l) in self.per_level.iter_mut().zip(per_level) {
            *a += w * l;
        }
        self.step += w * step;
        self.total += w * total;
    }

    fn add_predictions(&mut self, preds: &[Prediction], samples: &[&Sample]) {
        for (p, s) in preds.iter().zip(samples) {
            match (*p, s.qa.answer) {
                (Prediction::Class(k), Answer::Class(y)) | (Prediction::Choice(k), Answer::Choice(y)) => {
                    self.correct += usize::from(k == y)
                }
                (Prediction::Count { raw, rounded }, Answer::Count(y)) => {
                    self.sq_raw += (raw - y as f64).powi(2);
                    self.sq_rounded += (rounded as f64 - y as f64).powi(2);
                }
                _ => {}
            }
            self.n += 1;
        }
    }

    fn finish(self, task: Task) -> Metrics {
        let n = self.n.max(1) as f64;
        let count = task == Task::Count;
        Metrics {
            per_level: self.per_level.iter().map(|l| l / n).collect(),
            step_loss: self.step / n,
            total: self.total / n,
            accuracy: (!count).then(|| self.correct as f64 / n),
            mse_raw: count.then(|| self.sq_raw / n),
            mse_rounded: count.then(|| self.sq_rounded / n),
            samples: self.n,
        }
    }
}

/// One row of the metrics log.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Learning rate used during the epoch.
    pub lr: f64,
    pub train: Metrics,
    pub val: Metrics,
    /// `(alpha, beta)` per level after the epoch.
    pub mix: Vec<(f64, f64)>,
    /// Largest `|alpha + beta - 1|` seen after any step of the epoch.
    pub mix_deviation: f64,
    pub seconds: f64,
}

fn metric_columns(prefix: &str, levels: usize, task: Task) -> Vec<String> {
    let mut cols: Vec<String> = (1..=levels).map(|l| format!("{prefix}_loss_l{l}")).collect();
    cols.push(format!("{prefix}_step_loss"));
    cols.push(format!("{prefix}_total"));
    if task == Task::Count {
        cols.push(format!("{prefix}_mse_raw"));
        cols.push(format!("{prefix}_mse_rounded"));
    } else {
        cols.push(format!("{prefix}_acc"));
    }
    cols
}

/// Column names of the metrics log.
pub fn metrics_header(levels: usize, task: Task) -> Vec<String> {
    let mut cols = vec!["epoch".to_string(), "lr".to_string()];
    cols.extend(metric_columns("train", levels, task));
    cols.extend(metric_columns("val", levels, task));
    for l in 1..=levels {
        cols.push(format!("alpha_l{l}"));
        cols.push(format!("beta_l{l}"));
    }
    cols.push("mix_sum_max_dev".into());
    cols
}

fn metric_values(m: &Metrics) -> Vec<String> {
    let mut v: Vec<String> = m.per_level.iter().map(f64::to_string).collect();
    v.push(m.step_loss.to_string());
    v.push(m.total.to_string());
    for x in [m.mse_raw, m.mse_rounded, m.accuracy].into_iter().flatten() {
        v.push(x.to_string());
    }
    v
}

impl EpochRecord {
    pub fn to_row(&self) -> String {
        let mut v = vec![self.epoch.to_string(), self.lr.to_string()];
        v.extend(metric_values(&self.train));
        v.extend(metric_values(&self.val));
        for (a, b) in &self.mix {
            v.push(a.to_string());
            v.push(b.to_string());
        }
        v.push(self.mix_deviation.to_string());
        v.join("\t")
    }
}

/// Samples of `task` only.
pub fn task_samples(samples: &[Sample], task: Task) -> Vec<Sample> {
    samples.iter().filter(|s| s.qa.task == task).cloned().collect()
}

/// Model inputs for `samples`, with segment sampling and, for training,
/// augmentation drawn from `rng`.
pub fn examples<F: Real>(
    cfg: &RunConfig,
    samples: &[&Sample],
    mode: SampleMode,
    rng: &mut Rng,
) -> Result<Vec<Example<F>>> {
    samples
        .iter()
        .map(|s| {
            let clip = sample_frames(&s.frames, s.qa.id, cfg.model.frames, mode, rng)?;
            let clip = match mode {
                SampleMode::Train => augment(&clip, rng, &cfg.augment),
                SampleMode::Test => clip,
            };
            Ok(Example {
                frames: clip.to_tensor(),
                questions: s.qa.sequences(),
            })
        })
        .collect()
}

pub fn targets(task: Task, samples: &[&Sample]) -> Result<Targets> {
    let wrong = |s: &Sample| Error::Input(format!("sample {} does not carry a {task} answer", s.qa.id));
    Ok(match task {
        Task::OpenEnded => Targets::Classes(
            samples
                .iter()
                .map(|s| match s.qa.answer {
                    Answer::Class(c) => Ok(c),
                    _ => Err(wrong(s)),
                })
                .collect::<Result<_>>()?,
        ),
        Task::Count => Targets::Counts(
            samples
                .iter()
                .map(|s| match s.qa.answer {
                    Answer::Count(c) => Ok(c as f64),
                    _ => Err(wrong(s)),
                })
                .collect::<Result<_>>()?,
        ),
        Task::MultiChoice => Targets::Choices {
            correct: samples
                .iter()
                .map(|s| match s.qa.answer {
                    Answer::Choice(c) => Ok(c),
                    _ => Err(wrong(s)),
                })
                .collect::<Result<_>>()?,
            candidates: samples.first().map_or(0, |s| s.qa.candidates.len()),
        },
    })
}

/// Readout weights of one sequence at one level.
#[derive(Debug, Clone, PartialEq)]
pub struct DiagnosticRow {
    pub sample_id: u64,
    pub sequence: usize,
    pub level: usize,
    pub alpha: f64,
    pub beta: f64,
    pub eta: Vec<f64>,
    pub gamma: Vec<f64>,
}

impl DiagnosticRow {
    pub const HEADER: &'static str = "sample_id\tsequence\tlevel\talpha\tbeta\teta\tgamma";

    pub fn to_row(&self) -> String {
        let join = |v: &[f64]| v.iter().map(f64::to_string).collect::<Vec<_>>().join(",");
        format!(
            "{}\t{}\t{}\t{}\t{}\t{}\t{}",
            self.sample_id,
            self.sequence,
            self.level,
            self.alpha,
            self.beta,
            join(&self.eta),
            join(&self.gamma)
        )
    }
}

fn diagnostics<F: Real>(tape: &Tape<F>, fwd: &Forward, samples: &[&Sample]) -> Vec<DiagnosticRow> {
    let values = |v| tape.value(v).data().iter().map(|x: &F| x.as_f64()).collect::<Vec<_>>();
    let mut rows = Vec::new();
    for (i, pyr) in fwd.pyramids.iter().enumerate() {
        let (s, q) = (i / fwd.candidates, i % fwd.candidates);
        for (l, level) in pyr.levels.iter().enumerate() {
            let mix = values(level.readout.mix);
            rows.push(DiagnosticRow {
                sample_id: samples[s].qa.id,
                sequence: q,
                level: l + 1,
                alpha: mix[0],
                beta: mix[1],
                eta: values(level.readout.eta),
                gamma: values(level.readout.gamma),
            });
        }
    }
    rows
}

/// Eval-mode pass with mid-segment frames; answers come from the finest
/// level. Returns the metrics and, if requested, readout diagnostics.
pub fn evaluate<F: Real>(
    model: &Pmt<F>,
    cfg: &RunConfig,
    samples: &[Sample],
    with_diagnostics: bool,
) -> Result<(Metrics, Vec<DiagnosticRow>)> {
    let task = model.cfg.task;
    let mut acc = Accumulator::default();
    let mut diag = Vec::new();
    let mut rng = seeded(0);
    for chunk in samples.chunks(cfg.batch_size.max(1)) {
        let refs: Vec<&Sample> = chunk.iter().collect();
        let batch = examples::<F>(cfg, &refs, SampleMode::Test, &mut rng)?;
        let mut g = model.graph();
        let fwd = model.forward(&mut g, &batch, Mode::Eval)?;
        let lv = model.loss(&mut g.tape, &fwd, &targets(task, &refs)?)?;
        let b = lv.bundle(&g.tape);
        acc.add_losses(&b.per_level, b.step_loss, b.total, refs.len());
        acc.add_predictions(&model.predictions(&g.tape, &fwd), &refs);
        if with_diagnostics {
            diag.extend(diagnostics(&g.tape, &fwd, &refs));
        }
    }
    Ok((acc.finish(task), diag))
}

/// Where the trainer writes its outputs.
#[derive(Debug, Clone, Default)]
pub struct Outputs {
    pub checkpoint_dir: Option<PathBuf>,
    pub metrics: Option<PathBuf>,
    /// Readout weights of every validation sample, per epoch.
    pub diagnostics: Option<PathBuf>,
}

impl Outputs {
    /// Paths named by `cfg`; diagnostics go next to the metrics log.
    pub fn from_config(cfg: &RunConfig) -> Self {
        let diagnostics = cfg
            .diagnostics
            .then(|| cfg.metrics.as_ref().map(|m| m.with_extension("diag.tsv")))
            .flatten();
        Outputs {
            checkpoint_dir: cfg.checkpoint_dir.clone(),
            metrics: cfg.metrics.clone(),
            diagnostics,
        }
    }
}

pub struct Trainer<F: Real> {
    pub cfg: RunConfig,
    pub model: Pmt<F>,
    pub adam: Adam<F>,
    pub state: TrainState,
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
}

fn check_data(cfg: &RunConfig, splits: &Splits) -> Result<()> {
    if splits.vocab.len() > cfg.model.vocab_size {
        return Err(Error::Config(format!(
            "vocabulary has {} words but vocab_size is {}",
            splits.vocab.len(),
            cfg.model.vocab_size
        )));
    }
    for s in splits.train.iter().chain(&splits.val).chain(&splits.test) {
        let f = &s.frames;
        if f.height != cfg.model.height || f.width != cfg.model.width || f.count < cfg.model.frames {
            return Err(Error::Input(format!(
                "sample {} has {}×{}×{} frames, model needs ≥{}×{}×{}",
                s.qa.id, f.count, f.height, f.width, cfg.model.frames, cfg.model.height, cfg.model.width
            )));
        }
    }
    Ok(())
}

impl<F: Real> Trainer<F> {
    pub fn new(cfg: RunConfig, splits: &Splits) -> Result<Self> {
        cfg.validate()?;
        check_data(&cfg, splits)?;
        let model = Pmt::new(cfg.model.clone(), cfg.seed)?;
        let adam = Adam::new(&model.store);
        let state = TrainState::new(cfg.lr, cfg.patience, cfg.seed);
        let task = cfg.model.task;
        let train = task_samples(&splits.train, task);
        let val = task_samples(&splits.val, task);
        if train.len() < 2 {
            return Err(Error::Input(format!("{} training samples of task {task}", train.len())));
        }
        Ok(Trainer {
            cfg,
            model,
            adam,
            state,
            train,
            val,
        })
    }

    /// Continue from a checkpoint written by [`Trainer::run`].
    pub fn resume(cfg: RunConfig, splits: &Splits, ckpt: &Checkpoint<F>) -> Result<Self> {
        let mut t = Trainer::new(cfg, splits)?;
        checkpoint::restore(ckpt, &mut t.model, Some(&mut t.adam))?;
        t.state = ckpt.state.clone();
        Ok(t)
    }

    fn epoch_rng(&self, epoch: usize) -> Rng {
        seeded(derive_seed(self.state.seed, &[EPOCH_STREAM, epoch as u64]))
    }

    fn train_epoch(&mut self, epoch: usize) -> Result<(Metrics, f64)> {
        let task = self.model.cfg.task;
        let mut rng = self.epoch_rng(epoch);
        let mut order: Vec<usize> = (0..self.train.len()).collect();
        order.shuffle(&mut rng);
        let mut acc = Accumulator::default();
        let mut deviation = 0.0f64;
        let bs = self.cfg.batch_size;
        for idx in order.chunks(bs) {
            // Batch statistics need two rows.
            if idx.len() < 2 && task != Task::MultiChoice && !self.model.cfg.bn_running_stats {
                continue;
            }
            let refs: Vec<&Sample> = idx.iter().map(|&i| &self.train[i]).collect();
            let batch = examples::<F>(&self.cfg, &refs, SampleMode::Train, &mut rng)?;
            let tg = targets(task, &refs)?;
            let mut g = self.model.graph();
            let fwd = self.model.forward(&mut g, &batch, Mode::Train)?;
            let lv = self.model.loss(&mut g.tape, &fwd, &tg)?;
            let bundle = lv.bundle(&g.tape);
            bundle.check()?;
            let mut grads = g.tape.backward(lv.total)?;
            let mut updates = Vec::new();
            for (id, var) in g.tape.bound_params() {
                if !self.model.store.get(id).trainable {
                    continue;
                }
                if let Some(gr) = grads.take(var) {
                    if let Some(i) = gr.iter().position(|x| !x.is_finite()) {
                        return Err(Error::Numeric(format!(
                            "non-finite gradient at {}[{i}]",
                            self.model.store.get(id).name
                        )));
                    }
                    updates.push((id, gr));
                }
            }
            acc.add_losses(&bundle.per_level, bundle.step_loss, bundle.total, refs.len());
            acc.add_predictions(&self.model.predictions(&g.tape, &fwd), &refs);
            let stats = fwd.batch_stats(&g.tape);
            drop(g);
            self.adam.update(&mut self.model.store, &updates, self.state.lr)?;
            self.model.update_running_stats(&stats);
            for (a, b) in self.model.mix_weights() {
                deviation = deviation.max((a + b - 1.0).abs());
            }
        }
        Ok((acc.finish(task), deviation))
    }

    /// Train until `until` epochs are complete (capped by `max_epochs`) or
    /// `hook` returns `false`. Metrics rows and checkpoints are written to
    /// `out` after every epoch.
    pub fn run(
        &mut self,
        out: &Outputs,
        until: usize,
        mut hook: impl FnMut(&EpochRecord) -> bool,
    ) -> Result<Vec<EpochRecord>> {
        let header = metrics_header(self.model.cfg.levels, self.model.cfg.task).join("\t");
        if let Some(path) = &out.metrics {
            prepare_log(path, &header, self.state.epoch)?;
        }
        if let Some(dir) = &out.checkpoint_dir {
            std::fs::create_dir_all(dir)?;
        }
        if let (Some(path), 0) = (&out.diagnostics, self.state.epoch) {
            std::fs::write(path, format!("epoch\t{}\n", DiagnosticRow::HEADER))?;
        }
        let config_echo = self.cfg.to_text();
        let mut records = Vec::new();
        while self.state.epoch < until.min(self.cfg.max_epochs) {
            let start = Instant::now();
            let epoch = self.state.epoch + 1;
            let lr = self.state.lr;
            let (train, mix_deviation) = self.train_epoch(epoch)?;
            let (val, diag) = evaluate(&self.model, &self.cfg, &self.val, out.diagnostics.is_some())?;
            if let Some(path) = &out.diagnostics {
                let mut f = OpenOptions::new().create(true).append(true).open(path)?;
                for row in &diag {
                    writeln!(f, "{epoch}\t{}", row.to_row())?;
                }
            }
            let monitored = match self.cfg.plateau_on {
                PlateauOn::Val if val.samples > 0 => val.total,
                _ => train.total,
            };
            if !monitored.is_finite() {
                return Err(Error::Numeric(format!("loss became {monitored} in epoch {epoch}")));
            }
            self.state.lr = self.state.plateau.observe(monitored, lr);
            self.state.epoch = epoch;
            let improved = val.score() > self.state.best_score;
            if improved {
                self.state.best_score = val.score();
                self.state.best_epoch = epoch;
            }
            let rec = EpochRecord {
                epoch,
                lr,
                train,
                val,
                mix: self.model.mix_weights(),
                mix_deviation,
                seconds: start.elapsed().as_secs_f64(),
            };
            if let Some(dir) = &out.checkpoint_dir {
                if improved {
                    checkpoint::save(&dir.join(BEST_CHECKPOINT), &self.model, &self.adam, &self.state, &config_echo)?;
                }
                checkpoint::save(&dir.join(LAST_CHECKPOINT), &self.model, &self.adam, &self.state, &config_echo)?;
            }
            if let Some(path) = &out.metrics {
                let mut f = OpenOptions::new().append(true).open(path)?;
                writeln!(f, "{}", rec.to_row())?;
            }
            let go_on = hook(&rec);
            records.push(rec);
            if !go_on {
                break;
            }
        }
        Ok(records)
    }
}

/// Start a fresh log, or on resume keep the header and the first
/// `completed` rows so the log continues exactly where the checkpoint did.
fn prepare_log(path: &Path, header: &str, completed: usize) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)?;
    }
    let mut lines = Vec::new();
    if completed > 0 && path.exists() {
        let reader = BufReader::new(std::fs::File::open(path)?);
        for line in reader.lines().take(completed + 1) {
            lines.push(line?);
        }
        if lines.first().map(String::as_str) != Some(header) {
            return Err(Error::Checkpoint(format!(
                "metrics log {} has a different header than this run",
                path.display()
            )));
        }
    } else {
        lines.push(header.to_string());
    }
    let mut text = lines.join("\n");
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}
