//! The ten acceptance criteria, run in order with one PASS/FAIL line each.
//!
//! Lines go straight to the stderr handle so they show up without
//! `--nocapture`. The learning criteria train the default model and take
//! tens of minutes on one core.

mod common;

use std::io::Write;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::Instant;

use rand::Rng as _;

use common::{spatial_oracle, temporal_oracle};
use pmt_core::bottom_up::{decompose_spatial, decompose_temporal, transformer_block};
use pmt_core::config::{ModelConfig, RunConfig, Task};
use pmt_core::data::qa::Answer;
use pmt_core::data::{DataConfig, Sample, Splits};
use pmt_core::decoders::{multistep_loss, multistep_loss_var, total_loss, total_loss_var, Mode};
use pmt_core::gradcheck::{gradcheck, GradcheckOptions, THRESHOLD};
use pmt_core::params::Linear;
use pmt_core::top_down::cmb;
use pmt_core::train::{evaluate, task_samples, Outputs, Trainer};
use pmt_core::{Example, Graph, Pmt};
use pmt_tensor::rng::{seeded, uniform};
use pmt_tensor::{OpKind, ParamStore, Tape, Tensor};

const SOFTMAX_TOL: f64 = 1e-6;
const EPOCH_BUDGET: usize = 30;
const OPEN_TARGET: f64 = 0.90;
const COUNT_TARGET: f64 = 0.5;
const COUNT_BASELINE_FLOOR: f64 = 1.5;
const CHOICE_TARGET: f64 = 0.85;
/// Epochs given to both variants in the ablation comparison.
const ABLATION_EPOCHS: usize = 8;

struct Outcome {
    passed: bool,
    /// Soft criteria report a failure without failing the suite.
    soft: bool,
    detail: String,
}

fn hard(passed: bool, detail: String) -> Outcome {
    Outcome { passed, soft: false, detail }
}

fn report(line: &str) {
    let mut err = std::io::stderr().lock();
    let _ = writeln!(err, "{line}");
}

fn run_criterion(n: usize, name: &str, f: impl FnOnce() -> Outcome) -> Outcome {
    let start = Instant::now();
    let out = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
        let msg = e
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_default();
        hard(false, format!("panicked: {msg}"))
    });
    let tag = match (out.passed, out.soft) {
        (true, _) => "PASS",
        (false, false) => "FAIL",
        (false, true) => "FLAG",
    };
    report(&format!(
        "[{tag}] {n:>2} {name}: {} ({:.1}s)",
        out.detail,
        start.elapsed().as_secs_f64()
    ));
    out
}

// 1 ------------------------------------------------------------------------

fn decomposition_oracle() -> Outcome {
    let start = Instant::now();
    let mut rng = seeded(1);
    let mut mismatches = 0;
    let cases = 1000;
    for _ in 0..cases {
        let r = [1, 2, 4][rng.gen_range(0..3)];
        let ext = |rng: &mut pmt_tensor::Rng| r * rng.gen_range(1..=8 / r);
        let shape = [ext(&mut rng), ext(&mut rng), ext(&mut rng), rng.gen_range(1..=8)];
        let x = uniform::<f64>(&mut rng, &shape, -5.0, 5.0);
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let s = decompose_spatial(&mut tape, xv, r).unwrap();
        let m = decompose_temporal(&mut tape, xv, r).unwrap();
        let [t, h, w, d] = shape;
        mismatches += usize::from(tape.shape(s) != [h / r, w / r, d]);
        mismatches += usize::from(tape.shape(m) != [t / r, d]);
        mismatches += usize::from(tape.value(s).data() != spatial_oracle(x.data(), shape, r).as_slice());
        mismatches += usize::from(tape.value(m).data() != temporal_oracle(x.data(), shape, r).as_slice());
    }
    let secs = start.elapsed().as_secs_f64();
    hard(
        mismatches == 0 && secs < 10.0,
        format!("{cases} tensors, {mismatches} mismatches, {secs:.2}s (limit 10s)"),
    )
}

// 2 ------------------------------------------------------------------------

fn gradient_suite() -> Outcome {
    let start = Instant::now();
    let mut worst = 0.0f64;
    let mut failed = Vec::new();
    for task in Task::ALL {
        let r = gradcheck(&ModelConfig::tiny(task), &GradcheckOptions::default()).unwrap();
        for g in &r.groups {
            worst = worst.max(g.max_error);
        }
        failed.extend(r.failed_groups().iter().map(|g| format!("{task}/{g}")));
    }
    let secs = start.elapsed().as_secs_f64();
    hard(
        failed.is_empty() && secs < 300.0,
        format!(
            "all coordinates of 3 tasks, max relative error {worst:.2e} (limit {THRESHOLD:.0e}), failed {failed:?}, {secs:.1}s"
        ),
    )
}

// 3 ------------------------------------------------------------------------

/// Largest deviation from 1 of any softmax row recorded on `tape`.
fn softmax_deviation(tape: &Tape<f64>) -> f64 {
    let mut dev = 0.0f64;
    for v in tape.vars().filter(|&v| tape.kind(v) == OpKind::Softmax) {
        let t = tape.value(v);
        let c = *t.shape().last().unwrap();
        for row in t.data().chunks(c) {
            dev = dev.max((row.iter().sum::<f64>() - 1.0).abs());
        }
    }
    dev
}

fn shape_invariants() -> Outcome {
    let mut problems = Vec::new();
    let mut worst = 0.0f64;
    let mut checked = 0;
    for levels in 1..=3 {
        for frames in [8, 16] {
            for task in Task::ALL {
                let cfg = ModelConfig {
                    frames,
                    height: 16,
                    width: 16,
                    d_model: 8,
                    heads: 2,
                    levels,
                    channels: [2, 2, 2],
                    task,
                    ..ModelConfig::default()
                };
                let model = Pmt::<f64>::new(cfg.clone(), 3).unwrap();
                let mut rng = seeded(4);
                let cands = if task == Task::MultiChoice { 4 } else { 1 };
                let batch: Vec<Example<f64>> = (0..2)
                    .map(|_| Example {
                        frames: uniform(&mut rng, &[frames, 16, 16, 3], 0.0, 1.0),
                        questions: (0..cands).map(|c| vec![1, 2 + c, 3]).collect(),
                    })
                    .collect();
                let mut g = model.graph();
                let fwd = model.forward(&mut g, &batch, Mode::Train).unwrap();
                let (gh, gw) = (4, 4);
                for p in &fwd.pyramids {
                    for (l, lv) in p.levels.iter().enumerate() {
                        let r = 1 << l;
                        let s = g.tape.shape(lv.s_hat);
                        let m = g.tape.shape(lv.m_hat);
                        if s != [gh / r, gw / r, 8] || m != [frames / r, 8] {
                            problems.push(format!("L{levels} T{frames} {task} level {}: S {s:?} M {m:?}", l + 1));
                        }
                        for v in [lv.readout.eta, lv.readout.gamma, lv.readout.mix] {
                            worst = worst.max((g.tape.value(v).data().iter().sum::<f64>() - 1.0).abs());
                        }
                    }
                }
                worst = worst.max(softmax_deviation(&g.tape));
                checked += 1;
            }
        }
    }

    // The mix constraint after every optimizer step.
    let (cfg, splits) = tiny_run(Task::OpenEnded, 0);
    let mut t = Trainer::<f64>::new(RunConfig { max_epochs: 3, ..cfg }, &splits).unwrap();
    let recs = t.run(&Outputs::default(), 3, |_| true).unwrap();
    let mix_dev = recs.iter().map(|r| r.mix_deviation).fold(0.0, f64::max);
    if recs.len() != 3 {
        problems.push(format!("{} epochs ran", recs.len()));
    }

    hard(
        problems.is_empty() && worst <= SOFTMAX_TOL && mix_dev <= SOFTMAX_TOL,
        format!(
            "{checked} configs, extent mismatches {problems:?}, softmax/eta/gamma max |sum-1| {worst:.1e}, alpha+beta max |sum-1| over 3 epochs {mix_dev:.1e}"
        ),
    )
}

// 4 ------------------------------------------------------------------------

fn multistep_semantics() -> Outcome {
    let a = multistep_loss(&[1.0, 2.0, 3.0]);
    let b = multistep_loss(&[3.0, 2.0, 1.0]);
    let c = total_loss(&[1.0, 1.0, 1.0], 0.0, 0.1);
    // The tape form must agree.
    let mut tape = Tape::<f64>::new();
    let ls: Vec<_> = [3.0, 2.0, 1.0].iter().map(|&v| tape.constant(Tensor::scalar(v))).collect();
    let step = multistep_loss_var(&mut tape, &ls).unwrap().unwrap();
    let tv = tape.value(step).item();
    let ones: Vec<_> = (0..3).map(|_| tape.constant(Tensor::scalar(1.0))).collect();
    let zero = tape.constant(Tensor::scalar(0.0));
    let total = total_loss_var(&mut tape, &ones, Some(zero), 0.1).unwrap();
    let tt = tape.value(total).item();
    hard(
        a == 0.0 && b == 2.0 && (c - 1.2).abs() <= 1e-9 && tv == 2.0 && (tt - 1.2).abs() <= 1e-9,
        format!("multistep [1,2,3]={a} [3,2,1]={b}, total [1,1,1] step 0 lambda 0.1 = {c} (tape {tv}, {tt})"),
    )
}

// 5 ------------------------------------------------------------------------

fn residual_identities() -> Outcome {
    let mut model = Pmt::<f64>::new(ModelConfig::tiny(Task::OpenEnded), 5).unwrap();
    let block = model.params.blocks[0].clone();
    for sp in [&block.spatial, &block.temporal] {
        for id in [sp.mixer, sp.ffn_in.w, sp.ffn_in.b, sp.ffn_out.w, sp.ffn_out.b] {
            model.store.value_mut(id).data_mut().fill(0.0);
        }
    }
    let mut rng = seeded(6);
    let s = uniform::<f64>(&mut rng, &[2, 2, 8], -3.0, 3.0);
    let m = uniform::<f64>(&mut rng, &[4, 8], -3.0, 3.0);
    let lang = uniform::<f64>(&mut rng, &[5, 8], -1.0, 1.0);
    let mut g = model.graph();
    let (sv, mv, lv) = (g.tape.constant(s.clone()), g.tape.constant(m.clone()), g.tape.constant(lang));
    let so = transformer_block(&mut g, sv, lv, &block, &block.spatial, 2.0).unwrap();
    let mo = transformer_block(&mut g, mv, lv, &block, &block.temporal, 2.0).unwrap();
    let block_ok = g.tape.value(so) == &s && g.tape.value(mo) == &m;

    let mut store = ParamStore::new();
    let f = Linear {
        w: store.add("f.w", "t", uniform(&mut rng, &[8, 8], -0.8, 0.8)),
        b: store.add("f.b", "t", uniform(&mut rng, &[8], -0.3, 0.3)),
    };
    let target = uniform::<f64>(&mut rng, &[6, 8], -2.0, 2.0);
    let other = uniform::<f64>(&mut rng, &[5, 8], -2.0, 2.0);
    let mut g = Graph::new(&store);
    let tv = g.tape.constant(target.clone());
    let zero = g.tape.constant(Tensor::zeros(&[3, 8]));
    let ov = g.tape.constant(other);
    let c = cmb(&mut g, tv, zero, ov, &f).unwrap();
    let cmb_ok = g.tape.value(c.out) == &target;
    hard(
        block_ok && cmb_ok,
        format!("zeroed level-1 block is identity: {block_ok}; zero upper stream makes fusion identity: {cmb_ok}"),
    )
}

// Learning ------------------------------------------------------------------

fn tiny_run(task: Task, seed: u64) -> (RunConfig, Splits) {
    let mut cfg = RunConfig {
        model: ModelConfig::tiny(task),
        batch_size: 4,
        seed,
        raw_frames: 8,
        task_mix: vec![task],
        lr: 3e-3,
        ..RunConfig::default()
    };
    cfg.model.classes = 8;
    cfg.augment.crop_min = 6;
    cfg.augment.mask_max = 2;
    if task == Task::Count {
        cfg.model.max_count = 3;
    }
    let mut data = DataConfig::from_run(&cfg);
    data.scene.margin = 0;
    data.scene.min_size = 1;
    data.scene.max_size = 1;
    data.scene.min_visible = 2;
    data.vocab_size = 32;
    let splits = Splits::generate(&data, seed, [16, 4, 4], &[task]).unwrap();
    (cfg, splits)
}

/// Default desk configuration for `task`, 1024/256/256 samples.
fn desk_run(task: Task, seed: u64) -> (RunConfig, Splits) {
    let mut cfg = RunConfig {
        seed,
        max_epochs: EPOCH_BUDGET,
        task_mix: vec![task],
        ..RunConfig::default()
    };
    cfg.model.task = task;
    let splits = Splits::generate(&DataConfig::from_run(&cfg), seed, [1024, 256, 256], &[task]).unwrap();
    (cfg, splits)
}

/// Per-epoch test score (accuracy, or rounded MSE for counting).
struct Curve {
    scores: Vec<f64>,
    /// First epoch meeting the target.
    reached: Option<usize>,
    seconds: f64,
}

/// Train epoch by epoch, scoring the test split after each, until `target`
/// holds and at least `min_epochs` ran, or the budget is spent.
fn learn(cfg: &RunConfig, splits: &Splits, min_epochs: usize, target: impl Fn(f64) -> bool) -> Curve {
    let start = Instant::now();
    let task = cfg.model.task;
    let test: Vec<Sample> = task_samples(&splits.test, task);
    let mut t = Trainer::<f32>::new(cfg.clone(), splits).unwrap();
    let mut curve = Curve {
        scores: Vec::new(),
        reached: None,
        seconds: 0.0,
    };
    for epoch in 1..=EPOCH_BUDGET {
        t.run(&Outputs::default(), epoch, |_| true).unwrap();
        let (m, _) = evaluate(&t.model, cfg, &test, false).unwrap();
        let score = m.accuracy.or(m.mse_rounded).unwrap();
        curve.scores.push(score);
        if curve.reached.is_none() && target(score) {
            curve.reached = Some(epoch);
        }
        if curve.reached.is_some() && epoch >= min_epochs {
            break;
        }
    }
    curve.seconds = start.elapsed().as_secs_f64();
    curve
}

fn describe(c: &Curve) -> String {
    match c.reached {
        Some(e) => format!("epoch {e} ({:.4})", c.scores[e - 1]),
        None => format!("not reached, best {:.4}", c.scores.iter().copied().fold(f64::NAN, f64::max)),
    }
}

// 6 ------------------------------------------------------------------------

fn open_ended_learning(full_at_budget: &mut Vec<f64>) -> Outcome {
    let mut all = true;
    let mut parts = Vec::new();
    let mut seconds = 0.0;
    for seed in 0..3 {
        let (cfg, splits) = desk_run(Task::OpenEnded, seed);
        let c = learn(&cfg, &splits, ABLATION_EPOCHS, |a| a >= OPEN_TARGET);
        all &= c.reached.is_some();
        seconds += c.seconds;
        full_at_budget.push(c.scores.get(ABLATION_EPOCHS - 1).copied().unwrap_or(f64::NAN));
        parts.push(format!("seed {seed}: {}", describe(&c)));
    }
    hard(
        all && seconds < 3600.0,
        format!("test accuracy >= {OPEN_TARGET} within {EPOCH_BUDGET} epochs; {}", parts.join(", ")),
    )
}

// 7 ------------------------------------------------------------------------

fn count_learning() -> Outcome {
    let (cfg, splits) = desk_run(Task::Count, 0);
    let labels = |s: &[Sample]| -> Vec<f64> {
        s.iter()
            .filter_map(|x| match x.qa.answer {
                Answer::Count(n) => Some(n as f64),
                _ => None,
            })
            .collect()
    };
    let (train, test) = (labels(&splits.train), labels(&splits.test));
    // Best constant integer fitted on the training labels.
    let constant = (train.iter().sum::<f64>() / train.len() as f64).round();
    let baseline = test.iter().map(|y| (y - constant).powi(2)).sum::<f64>() / test.len() as f64;
    let c = learn(&cfg, &splits, 1, |mse| mse <= COUNT_TARGET);
    hard(
        c.reached.is_some() && baseline >= COUNT_BASELINE_FLOOR,
        format!(
            "test rounded MSE <= {COUNT_TARGET}: {}; constant {constant} baseline {baseline:.4} (needs >= {COUNT_BASELINE_FLOOR})",
            describe(&c)
        ),
    )
}

// 8 ------------------------------------------------------------------------

fn multi_choice_learning() -> Outcome {
    let (cfg, splits) = desk_run(Task::MultiChoice, 0);
    let c = learn(&cfg, &splits, 1, |a| a >= CHOICE_TARGET);
    hard(
        c.reached.is_some(),
        format!("test accuracy >= {CHOICE_TARGET} within {EPOCH_BUDGET} epochs: {}", describe(&c)),
    )
}

// 9 ------------------------------------------------------------------------

fn ablation_direction(full: &[f64]) -> Outcome {
    let mut ablated = Vec::new();
    for seed in 0..3 {
        let (mut cfg, splits) = desk_run(Task::OpenEnded, seed);
        cfg.model.no_decomposition = true;
        let test = task_samples(&splits.test, Task::OpenEnded);
        let mut t = Trainer::<f32>::new(cfg.clone(), &splits).unwrap();
        t.run(&Outputs::default(), ABLATION_EPOCHS, |_| true).unwrap();
        let (m, _) = evaluate(&t.model, &cfg, &test, false).unwrap();
        ablated.push(m.accuracy.unwrap());
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let (f, a) = (mean(full), mean(&ablated));
    Outcome {
        passed: full.len() == 3 && f >= a,
        soft: true,
        detail: format!(
            "test accuracy after {ABLATION_EPOCHS} epochs, full {full:.4?} mean {f:.4} vs no_decomposition {ablated:.4?} mean {a:.4}"
        ),
    }
}

// 10 -----------------------------------------------------------------------

fn determinism_and_resume() -> Outcome {
    let mut problems = Vec::new();
    for task in Task::ALL {
        let (cfg, splits) = tiny_run(task, 9);
        let dirs: Vec<_> = (0..3).map(|_| tempfile::tempdir().unwrap()).collect();
        let with = |i: usize| RunConfig {
            checkpoint_dir: Some(dirs[i].path().to_path_buf()),
            metrics: Some(dirs[i].path().join("metrics.tsv")),
            max_epochs: 4,
            ..cfg.clone()
        };
        for i in 0..2 {
            let c = with(i);
            Trainer::<f32>::new(c.clone(), &splits)
                .unwrap()
                .run(&Outputs::from_config(&c), 4, |_| true)
                .unwrap();
        }
        let c = with(2);
        Trainer::<f32>::new(c.clone(), &splits)
            .unwrap()
            .run(&Outputs::from_config(&c), 2, |_| true)
            .unwrap();
        let ckpt = pmt_core::checkpoint::load::<f32>(&dirs[2].path().join("last.ckpt")).unwrap();
        Trainer::resume(c.clone(), &splits, &ckpt)
            .unwrap()
            .run(&Outputs::from_config(&c), 4, |_| true)
            .unwrap();
        let log = |i: usize| std::fs::read(dirs[i].path().join("metrics.tsv")).unwrap();
        if log(0) != log(1) {
            problems.push(format!("{task}: repeated run differs"));
        }
        if log(0) != log(2) {
            problems.push(format!("{task}: resumed run differs"));
        }
    }
    hard(
        problems.is_empty(),
        format!("3 tasks, 4 epochs, resume after 2; problems {problems:?}"),
    )
}

#[test]
fn acceptance_criteria() {
    report("acceptance criteria");
    let mut full_at_budget = Vec::new();
    let outcomes = vec![
        run_criterion(1, "decomposition oracle", decomposition_oracle),
        run_criterion(2, "gradient suite", gradient_suite),
        run_criterion(3, "shape and normalization invariants", shape_invariants),
        run_criterion(4, "multistep loss semantics", multistep_semantics),
        run_criterion(5, "residual identities", residual_identities),
        run_criterion(6, "open-ended learning", || open_ended_learning(&mut full_at_budget)),
        run_criterion(7, "count learning", count_learning),
        run_criterion(8, "multi-choice learning", multi_choice_learning),
        run_criterion(9, "ablation direction (soft)", || ablation_direction(&full_at_budget)),
        run_criterion(10, "determinism and resume", determinism_and_resume),
    ];
    let hard_failures: Vec<usize> = outcomes
        .iter()
        .enumerate()
        .filter(|(_, o)| !o.passed && !o.soft)
        .map(|(i, _)| i + 1)
        .collect();
    report(&format!(
        "acceptance: {} of {} passed{}",
        outcomes.iter().filter(|o| o.passed).count(),
        outcomes.len(),
        if outcomes[8].passed { "" } else { "; criterion 9 flagged for investigation" }
    ));
    assert!(hard_failures.is_empty(), "failed criteria {hard_failures:?}");
}
