//! The full model: encoders, both pyramid pathways, decoders and losses.

use pmt_tensor::{ParamStore, Real, Tape, Tensor, Var};

use crate::bottom_up::run_bottom_up;
use crate::config::{ModelConfig, Task};
use crate::decoders::{
    count_postprocess, decode, multistep_loss_var, task_loss, total_loss_var, LossBundle, Mode, Targets,
};
use crate::encoders::{embed_tokens, encode_language, encode_video, LanguageFeature};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::params::PmtParams;
use crate::top_down::{run_top_down, PyramidOutputs};

/// Running-statistics momentum of the decoder batch norms.
pub const BN_MOMENTUM: f64 = 0.1;

/// One clip with its token sequences: a single question, or one
/// question-plus-candidate sequence per multi-choice candidate.
#[derive(Debug, Clone)]
pub struct Example<F> {
    /// `[T × H × W × 3]`, values in `[0, 1]`.
    pub frames: Tensor<F>,
    pub questions: Vec<Vec<usize>>,
}

#[derive(Debug, Clone)]
pub struct Forward {
    /// Decoder output per level, `[rows × out]`.
    pub outputs: Vec<Var>,
    /// Batch-norm node per level.
    pub norms: Vec<Var>,
    pub pyramids: Vec<PyramidOutputs>,
    pub languages: Vec<LanguageFeature>,
    pub samples: usize,
    pub candidates: usize,
}

#[derive(Debug, Clone)]
pub struct LossVars {
    pub per_level: Vec<Var>,
    pub step: Option<Var>,
    pub total: Var,
    pub lambda: f64,
}

impl LossVars {
    pub fn bundle<F: Real>(&self, tape: &Tape<F>) -> LossBundle {
        LossBundle {
            per_level: self.per_level.iter().map(|&v| tape.value(v).item().as_f64()).collect(),
            step_loss: self.step.map_or(0.0, |v| tape.value(v).item().as_f64()),
            total: tape.value(self.total).item().as_f64(),
            lambda: self.lambda,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Prediction {
    Class(usize),
    Count { raw: f64, rounded: usize },
    Choice(usize),
}

#[derive(Debug, Clone)]
pub struct Pmt<F: Real> {
    pub cfg: ModelConfig,
    pub store: ParamStore<F>,
    pub params: PmtParams,
}

impl<F: Real> Pmt<F> {
    /// Validate `cfg` and initialize parameters from `seed`.
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let params = PmtParams::init(&cfg, &mut store, seed);
        Ok(Pmt { cfg, store, params })
    }

    pub fn graph(&self) -> Graph<'_, F> {
        Graph::new(&self.store)
    }

    /// `(alpha, beta)` per level from the current readout logits.
    pub fn mix_weights(&self) -> Vec<(f64, f64)> {
        self.params
            .context
            .mix
            .iter()
            .map(|&id| {
                let v = self.store.value(id).data();
                let (a, b) = (v[0].as_f64(), v[1].as_f64());
                let m = a.max(b);
                let (ea, eb) = ((a - m).exp(), (b - m).exp());
                (ea / (ea + eb), eb / (ea + eb))
            })
            .collect()
    }

    /// Encode, run both pathways and decode every level for a batch.
    pub fn forward(&self, g: &mut Graph<F>, batch: &[Example<F>], mode: Mode) -> Result<Forward> {
        let cfg = &self.cfg;
        let p = &self.params;
        let first = batch.first().ok_or_else(|| Error::Input("empty batch".into()))?;
        let candidates = first.questions.len();
        let expect = if cfg.task == Task::MultiChoice { candidates.max(2) } else { 1 };
        if batch.iter().any(|e| e.questions.len() != expect) {
            return Err(Error::Input(format!(
                "every {} example needs {expect} token sequences",
                cfg.task
            )));
        }
        let mut per_level: Vec<Vec<Var>> = vec![Vec::new(); cfg.levels];
        let mut pyramids = Vec::new();
        let mut languages = Vec::new();
        for ex in batch {
            let clip = g.tape.constant(ex.frames.clone());
            let x = encode_video(g, &p.video, cfg, clip)?;
            for q in &ex.questions {
                let emb = embed_tokens(g, &p.language, cfg, q)?;
                let lang = encode_language(g, &p.language, cfg, emb)?;
                let bottom = run_bottom_up(g, x, &lang, &p.blocks, cfg)?;
                let pyr = run_top_down(g, &bottom, lang.g_bar, &p.context, cfg)?;
                for (l, level) in pyr.levels.iter().enumerate() {
                    per_level[l].push(level.readout.o);
                }
                pyramids.push(pyr);
                languages.push(lang);
            }
        }
        let mut outputs = Vec::with_capacity(cfg.levels);
        let mut norms = Vec::with_capacity(cfg.levels);
        for (rows, dec) in per_level.iter().zip(&p.decoders) {
            let o = g.tape.concat(rows, 0)?;
            let (out, bn) = decode(g, o, dec, mode, cfg.bn_running_stats)?;
            outputs.push(out);
            norms.push(bn);
        }
        Ok(Forward {
            outputs,
            norms,
            pyramids,
            languages,
            samples: batch.len(),
            candidates: expect,
        })
    }

    /// Per-level task losses, the multistep term and the weighted total.
    pub fn loss(&self, tape: &mut Tape<F>, fwd: &Forward, targets: &Targets) -> Result<LossVars> {
        if targets.len() != fwd.samples {
            return Err(Error::Input(format!("{} targets for {} samples", targets.len(), fwd.samples)));
        }
        let per_level = fwd
            .outputs
            .iter()
            .map(|&out| task_loss(tape, out, self.cfg.task, targets))
            .collect::<Result<Vec<_>>>()?;
        let step = if self.cfg.no_constraint {
            None
        } else {
            multistep_loss_var(tape, &per_level)?
        };
        let total = total_loss_var(tape, &per_level, step, self.cfg.lambda)?;
        Ok(LossVars {
            per_level,
            step,
            total,
            lambda: self.cfg.lambda,
        })
    }

    /// Answers read from the finest level only.
    pub fn predictions(&self, tape: &Tape<F>, fwd: &Forward) -> Vec<Prediction> {
        let out = tape.value(fwd.outputs[0]).data();
        let argmax = |row: &[F]| {
            row.iter()
                .enumerate()
                .fold((0, F::neg_infinity()), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
                .0
        };
        match self.cfg.task {
            Task::OpenEnded => out.chunks(self.cfg.classes).map(|r| Prediction::Class(argmax(r))).collect(),
            Task::Count => out
                .iter()
                .map(|&v| Prediction::Count {
                    raw: v.as_f64(),
                    rounded: count_postprocess(v.as_f64(), self.cfg.max_count),
                })
                .collect(),
            Task::MultiChoice => out.chunks(fwd.candidates).map(|r| Prediction::Choice(argmax(r))).collect(),
        }
    }

    /// Blend the batch statistics recorded in `fwd` into the running
    /// estimates. Variance is stored unbiased.
    pub fn update_running_stats(&mut self, stats: &[(Vec<F>, Vec<F>, usize)]) {
        let mom = F::lit(BN_MOMENTUM);
        for ((mean, var, n), dec) in stats.iter().zip(&self.params.decoders) {
            let unbias = F::lit(*n as f64 / (*n as f64 - 1.0));
            for (r, &m) in self.store.value_mut(dec.running_mean).data_mut().iter_mut().zip(mean) {
                *r = (F::one() - mom) * *r + mom * m;
            }
            for (r, &v) in self.store.value_mut(dec.running_var).data_mut().iter_mut().zip(var) {
                *r = (F::one() - mom) * *r + mom * v * unbias;
            }
        }
    }
}

impl Forward {
    /// `(mean, biased variance, rows)` of each batch-statistics norm node.
    pub fn batch_stats<F: Real>(&self, tape: &Tape<F>) -> Vec<(Vec<F>, Vec<F>, usize)> {
        self.norms
            .iter()
            .filter_map(|&v| {
                tape.batch_norm_stats(v)
                    .map(|(m, s)| (m.to_vec(), s.to_vec(), tape.shape(v)[0]))
            })
            .collect()
    }
}
