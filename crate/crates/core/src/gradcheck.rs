//! Finite-difference verification of every parameter group through the
//! full training loss, in 64-bit precision on a tiny model.

use std::collections::BTreeMap;

use rand::Rng as _;

use pmt_tensor::rng::{derive_seed, seeded, uniform};
use pmt_tensor::{relative_error, OpKind, ParamId};

use crate::config::{ModelConfig, Task};
use crate::decoders::{Mode, Targets};
use crate::error::{Error, Result};
use crate::model::{Example, Pmt};

pub const THRESHOLD: f64 = 1e-4;

#[derive(Debug, Clone)]
pub struct GradcheckOptions {
    pub seed: u64,
    /// Coordinates checked per parameter tensor; `None` checks all.
    pub coords_per_param: Option<usize>,
    pub step: f64,
    pub batch: usize,
    /// Inputs are redrawn until every max-pool gap and rectifier input is
    /// at least this far from its kink.
    pub kink_floor: f64,
    pub max_attempts: usize,
    /// Scale the backward rule of one op kind, to test the harness itself.
    pub fault: Option<(OpKind, f64)>,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        GradcheckOptions {
            seed: 0,
            coords_per_param: None,
            step: 1e-6,
            batch: 3,
            kink_floor: 1e-4,
            max_attempts: 50,
            fault: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroupReport {
    pub group: String,
    pub max_error: f64,
    pub coords: usize,
}

impl GroupReport {
    pub fn passed(&self) -> bool {
        self.max_error < THRESHOLD
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckReport {
    pub task: Task,
    pub groups: Vec<GroupReport>,
    /// Kink margin of the accepted inputs.
    pub margin: f64,
    pub attempts: usize,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.groups.iter().all(GroupReport::passed)
    }

    pub fn failed_groups(&self) -> Vec<&str> {
        self.groups.iter().filter(|g| !g.passed()).map(|g| g.group.as_str()).collect()
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("task {} (margin {:.3e}, attempt {})\n", self.task, self.margin, self.attempts);
        for g in &self.groups {
            s += &format!(
                "  {:<20} max_rel_err {:.3e} over {:>4} coords  {}\n",
                g.group,
                g.max_error,
                g.coords,
                if g.passed() { "PASS" } else { "FAIL" }
            );
        }
        s
    }
}

struct Problem {
    batch: Vec<Example<f64>>,
    targets: Targets,
}

fn draw_problem(cfg: &ModelConfig, n: usize, seed: u64) -> Problem {
    let mut rng = seeded(seed);
    let cands = if cfg.task == Task::MultiChoice { 3 } else { 1 };
    let batch = (0..n)
        .map(|_| Example {
            frames: uniform(&mut rng, &[cfg.frames, cfg.height, cfg.width, 3], 0.0, 1.0),
            questions: (0..cands)
                .map(|_| {
                    let len = rng.gen_range(2..=5);
                    (0..len).map(|_| rng.gen_range(0..cfg.vocab_size)).collect()
                })
                .collect(),
        })
        .collect();
    let targets = match cfg.task {
        Task::OpenEnded => Targets::Classes((0..n).map(|_| rng.gen_range(0..cfg.classes)).collect()),
        Task::Count => Targets::Counts((0..n).map(|_| rng.gen_range(1..=cfg.max_count) as f64).collect()),
        Task::MultiChoice => Targets::Choices {
            correct: (0..n).map(|_| rng.gen_range(0..cands)).collect(),
            candidates: cands,
        },
    };
    Problem { batch, targets }
}

/// Total loss and its kink margin, with optional gradients.
fn evaluate(
    model: &Pmt<f64>,
    p: &Problem,
    fault: Option<(OpKind, f64)>,
    want_grads: bool,
) -> Result<(f64, f64, BTreeMap<ParamId, Vec<f64>>)> {
    let mut g = model.graph();
    if let Some((kind, factor)) = fault {
        g.tape.inject_fault(kind, factor);
    }
    let fwd = model.forward(&mut g, &p.batch, Mode::Train)?;
    let lv = model.loss(&mut g.tape, &fwd, &p.targets)?;
    let loss = g.tape.value(lv.total).item();
    let margin = g.tape.kink_margin();
    let mut grads = BTreeMap::new();
    if want_grads {
        let mut all = g.tape.backward(lv.total)?;
        for (id, v) in g.tape.bound_params() {
            if let Some(gr) = all.take(v) {
                grads.insert(id, gr);
            }
        }
    }
    Ok((loss, margin, grads))
}

/// Check the gradient of the total loss with respect to every trainable
/// parameter of `cfg`, grouped by parameter group.
pub fn gradcheck(cfg: &ModelConfig, opts: &GradcheckOptions) -> Result<GradcheckReport> {
    let mut model = Pmt::<f64>::new(cfg.clone(), opts.seed)?;
    // Readout mix logits start at zero; move them off the symmetric point.
    let mut rng = seeded(derive_seed(opts.seed, &[1]));
    for &id in &model.params.context.mix {
        for v in model.store.value_mut(id).data_mut() {
            *v = rng.gen_range(-0.5..0.5);
        }
    }

    let mut accepted = None;
    for attempt in 0..opts.max_attempts {
        let p = draw_problem(cfg, opts.batch, derive_seed(opts.seed, &[2, attempt as u64]));
        let (_, margin, _) = evaluate(&model, &p, None, false)?;
        if margin >= opts.kink_floor {
            accepted = Some((p, margin, attempt + 1));
            break;
        }
    }
    let (problem, margin, attempts) = accepted.ok_or_else(|| {
        Error::Numeric(format!(
            "no inputs with kink margin ≥ {} in {} attempts",
            opts.kink_floor, opts.max_attempts
        ))
    })?;

    let (_, _, analytic) = evaluate(&model, &problem, opts.fault, true)?;
    let mut groups: BTreeMap<String, GroupReport> = BTreeMap::new();
    let ids: Vec<ParamId> = model.store.ids().filter(|&id| model.store.get(id).trainable).collect();
    for id in ids {
        let (name, group, numel) = {
            let p = model.store.get(id);
            (p.name.clone(), p.group.clone(), p.value.numel())
        };
        let coords: Vec<usize> = match opts.coords_per_param {
            Some(k) if k < numel => {
                let mut r = seeded(derive_seed(opts.seed, &[3, id.index() as u64]));
                (0..k).map(|_| r.gen_range(0..numel)).collect()
            }
            _ => (0..numel).collect(),
        };
        let entry = groups.entry(group.clone()).or_insert(GroupReport {
            group,
            max_error: 0.0,
            coords: 0,
        });
        for c in coords {
            let a = analytic.get(&id).map_or(0.0, |g| g[c]);
            let orig = model.store.value(id).data()[c];
            model.store.value_mut(id).data_mut()[c] = orig + opts.step;
            let (lp, _, _) = evaluate(&model, &problem, None, false)?;
            model.store.value_mut(id).data_mut()[c] = orig - opts.step;
            let (lm, _, _) = evaluate(&model, &problem, None, false)?;
            model.store.value_mut(id).data_mut()[c] = orig;
            let n = (lp - lm) / (2.0 * opts.step);
            let err = relative_error(a, n);
            if !err.is_finite() {
                return Err(Error::Numeric(format!("non-finite gradient check value at {name}[{c}]")));
            }
            entry.max_error = entry.max_error.max(err);
            entry.coords += 1;
        }
    }
    Ok(GradcheckReport {
        task: cfg.task,
        groups: groups.into_values().collect(),
        margin,
        attempts,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn report_text_marks_failures() {
        let r = GradcheckReport {
            task: Task::Count,
            groups: vec![
                GroupReport {
                    group: "a".into(),
                    max_error: 1e-9,
                    coords: 3,
                },
                GroupReport {
                    group: "b".into(),
                    max_error: 1e-2,
                    coords: 3,
                },
            ],
            margin: 1.0,
            attempts: 1,
        };
        assert!(!r.passed());
        assert_eq!(r.failed_groups(), vec!["b"]);
        assert!(r.to_text().contains("FAIL"));
    }

    #[test]
    fn tiny_count_model_passes() {
        let cfg = ModelConfig::tiny(Task::Count);
        let r = gradcheck(
            &cfg,
            &GradcheckOptions {
                coords_per_param: Some(2),
                ..GradcheckOptions::default()
            },
        )
        .unwrap();
        assert!(r.passed(), "{}", r.to_text());
    }
}
