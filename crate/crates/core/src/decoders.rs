//! Per-level decoders, task losses and the multistep constraint.

use pmt_tensor::{BatchNormMode, Real, Tape, Tensor, TensorError, Var};

use crate::config::Task;
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::params::DecoderParams;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Supervision for one batch.
#[derive(Debug, Clone, PartialEq)]
pub enum Targets {
    Classes(Vec<usize>),
    Counts(Vec<f64>),
    /// Index of the correct candidate per sample; scores arrive as
    /// `[B·C × 1]`, candidate-major within each sample.
    Choices { correct: Vec<usize>, candidates: usize },
}

impl Targets {
    pub fn task(&self) -> Task {
        match self {
            Targets::Classes(_) => Task::OpenEnded,
            Targets::Counts(_) => Task::Count,
            Targets::Choices { .. } => Task::MultiChoice,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            Targets::Classes(v) => v.len(),
            Targets::Counts(v) => v.len(),
            Targets::Choices { correct, .. } => correct.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// `affine → batch norm → ELU → affine` over `o[rows × D]`. Returns the
/// output and the normalization node.
pub fn decode<F: Real>(
    g: &mut Graph<F>,
    o: Var,
    p: &DecoderParams,
    mode: Mode,
    running_in_train: bool,
) -> Result<(Var, Var)> {
    let h = g.linear(o, &p.hidden)?;
    let use_running = mode == Mode::Eval || running_in_train;
    let bn_mode = if use_running {
        BatchNormMode::Fixed {
            mean: g.store.value(p.running_mean).data().to_vec(),
            var: g.store.value(p.running_var).data().to_vec(),
        }
    } else {
        let rows = g.tape.shape(h)[0];
        if rows < 2 {
            return Err(Error::Tensor(TensorError::Contract(format!(
                "batch statistics need at least 2 rows, got {rows}; enable bn_running_stats"
            ))));
        }
        BatchNormMode::Batch
    };
    let gain = g.p(p.bn.gain);
    let bias = g.p(p.bn.bias);
    let bn = g.tape.batch_norm(h, gain, bias, bn_mode)?;
    let a = g.tape.elu(bn);
    let out = g.linear(a, &p.out)?;
    Ok((out, bn))
}

/// Task loss of one level's decoder output.
pub fn task_loss<F: Real>(tape: &mut Tape<F>, out: Var, task: Task, targets: &Targets) -> Result<Var> {
    if targets.task() != task {
        return Err(Error::Input(format!("{} targets for a {task} head", targets.task())));
    }
    let shape = tape.shape(out).to_vec();
    match targets {
        Targets::Classes(ids) => Ok(tape.softmax_cross_entropy(out, ids)?),
        Targets::Counts(values) => {
            if shape != [values.len(), 1] {
                return Err(Error::Input(format!("count output {shape:?} for {} targets", values.len())));
            }
            let t = tape.constant(Tensor::from_f64(&shape, values)?);
            let diff = tape.sub(out, t)?;
            let sq = tape.mul(diff, diff)?;
            Ok(tape.mean(sq))
        }
        Targets::Choices { correct, candidates } => {
            let (b, c) = (correct.len(), *candidates);
            if shape != [b * c, 1] || c < 2 {
                return Err(Error::Input(format!("choice scores {shape:?} for {b} samples of {c} candidates")));
            }
            if let Some(&bad) = correct.iter().find(|&&i| i >= c) {
                return Err(Error::Input(format!("correct index {bad} out of {c} candidates")));
            }
            let scores = tape.reshape(out, &[b, c])?;
            let mut onehot = vec![0.0; b * c];
            for (i, &k) in correct.iter().enumerate() {
                onehot[i * c + k] = 1.0;
            }
            let wrong: Vec<f64> = onehot.iter().map(|v| 1.0 - v).collect();
            let y = tape.constant(Tensor::from_f64(&[b, c], &onehot)?);
            let picked = tape.mul(scores, y)?;
            let ones_col = tape.constant(Tensor::ones(&[c, 1]));
            let s_correct = tape.matmul(picked, ones_col)?;
            let ones_row = tape.constant(Tensor::ones(&[1, c]));
            let spread = tape.matmul(s_correct, ones_row)?;
            let margin = tape.sub(scores, spread)?;
            let margin = tape.add_const(margin, F::one());
            let hinge = tape.relu(margin);
            let mask = tape.constant(Tensor::from_f64(&[b, c], &wrong)?);
            let hinge = tape.mul(hinge, mask)?;
            let total = tape.sum(hinge);
            Ok(tape.scale(total, F::lit(1.0 / (b * c) as f64)))
        }
    }
}

/// `sum_l max(0, L_l - L_{l+1})`.
pub fn multistep_loss(per_level: &[f64]) -> f64 {
    per_level.windows(2).map(|w| (w[0] - w[1]).max(0.0)).sum()
}

/// `L_1 + lambda * sum_{l>=2} L_l + step`.
pub fn total_loss(per_level: &[f64], step: f64, lambda: f64) -> f64 {
    let first = per_level.first().copied().unwrap_or(0.0);
    let rest: f64 = per_level.iter().skip(1).sum();
    first + lambda * rest + step
}

/// Tape form of [`multistep_loss`]; `None` for a single level.
pub fn multistep_loss_var<F: Real>(tape: &mut Tape<F>, per_level: &[Var]) -> Result<Option<Var>> {
    let mut acc: Option<Var> = None;
    for w in per_level.windows(2) {
        let d = tape.sub(w[0], w[1])?;
        let r = tape.relu(d);
        acc = Some(match acc {
            Some(a) => tape.add(a, r)?,
            None => r,
        });
    }
    Ok(acc)
}

/// Tape form of [`total_loss`].
pub fn total_loss_var<F: Real>(tape: &mut Tape<F>, per_level: &[Var], step: Option<Var>, lambda: f64) -> Result<Var> {
    let (&first, rest) = per_level
        .split_first()
        .ok_or_else(|| Error::Input("no per-level losses".into()))?;
    let mut total = first;
    for &l in rest {
        let s = tape.scale(l, F::lit(lambda));
        total = tape.add(total, s)?;
    }
    if let Some(step) = step {
        total = tape.add(total, step)?;
    }
    Ok(total)
}

/// Round half up, then clamp into `[1, max_count]`.
pub fn count_postprocess(raw: f64, max_count: usize) -> usize {
    let r = (raw + 0.5).floor();
    if r.is_nan() || r < 1.0 {
        1
    } else {
        (r as usize).min(max_count)
    }
}

/// Loss values of one batch.
#[derive(Debug, Clone, PartialEq)]
pub struct LossBundle {
    pub per_level: Vec<f64>,
    pub step_loss: f64,
    pub total: f64,
    pub lambda: f64,
}

impl LossBundle {
    /// Check `step >= 0` and the assembly identity within `1e-6`.
    pub fn check(&self) -> Result<()> {
        if !self.total.is_finite() {
            return Err(Error::Numeric(format!("total loss became {}", self.total)));
        }
        if !(self.step_loss >= 0.0) {
            return Err(Error::Numeric(format!("negative step loss {}", self.step_loss)));
        }
        let expect = total_loss(&self.per_level, self.step_loss, self.lambda);
        let tol = 1e-6 * expect.abs().max(1.0);
        if (expect - self.total).abs() > tol {
            return Err(Error::Numeric(format!("total loss {} does not match assembly {expect}", self.total)));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn multistep_examples() {
        assert_eq!(multistep_loss(&[1.0, 2.0, 3.0]), 0.0);
        assert_eq!(multistep_loss(&[3.0, 2.0, 1.0]), 2.0);
        assert_eq!(multistep_loss(&[0.7]), 0.0);
        assert!((total_loss(&[1.0, 1.0, 1.0], 0.0, 0.1) - 1.2).abs() < 1e-9);
        assert_eq!(total_loss(&[0.4, 9.0], 0.0, 0.0), 0.4);
    }

    #[test]
    fn rounding_convention() {
        assert_eq!(count_postprocess(3.4, 10), 3);
        assert_eq!(count_postprocess(3.5, 10), 4);
        assert_eq!(count_postprocess(-0.3, 10), 1);
        assert_eq!(count_postprocess(42.0, 5), 5);
        assert_eq!(count_postprocess(f64::NAN, 5), 1);
    }

    #[test]
    fn task_losses() {
        let mut tape = Tape::<f64>::new();
        let logits = tape.constant(Tensor::zeros(&[2, 4]));
        let ce = task_loss(&mut tape, logits, Task::OpenEnded, &Targets::Classes(vec![1, 3])).unwrap();
        assert!((tape.value(ce).item() - 4f64.ln()).abs() < 1e-12);

        let pred = tape.constant(Tensor::new(&[2, 1], vec![3.0, 1.0]).unwrap());
        let mse = task_loss(&mut tape, pred, Task::Count, &Targets::Counts(vec![3.0, 1.0])).unwrap();
        assert_eq!(tape.value(mse).item(), 0.0);

        let scores = tape.constant(Tensor::new(&[4, 1], vec![0.0, 2.5, -1.0, 1.4]).unwrap());
        let t = Targets::Choices {
            correct: vec![1, 0],
            candidates: 2,
        };
        let h = task_loss(&mut tape, scores, Task::MultiChoice, &t).unwrap();
        // first sample satisfied; second: max(0, 1 + 1.4 + 1) / 2 averaged over 2 samples
        assert!((tape.value(h).item() - 3.4 / 4.0).abs() < 1e-12);

        assert!(matches!(
            task_loss(&mut tape, pred, Task::OpenEnded, &Targets::Counts(vec![1.0, 2.0])),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn tape_and_scalar_assembly_agree() {
        let mut tape = Tape::<f64>::new();
        let vals = [0.9, 1.3, 0.2];
        let vars: Vec<Var> = vals.iter().map(|&v| tape.constant(Tensor::scalar(v))).collect();
        let step = multistep_loss_var(&mut tape, &vars).unwrap();
        let total = total_loss_var(&mut tape, &vars, step, 0.1).unwrap();
        let s = multistep_loss(&vals);
        assert!((tape.value(step.unwrap()).item() - s).abs() < 1e-15);
        assert!((tape.value(total).item() - total_loss(&vals, s, 0.1)).abs() < 1e-15);
    }

    #[test]
    fn bundle_check() {
        let mut b = LossBundle {
            per_level: vec![1.0, 1.0, 1.0],
            step_loss: 0.0,
            total: 1.2,
            lambda: 0.1,
        };
        b.check().unwrap();
        b.total = 1.3;
        assert!(b.check().is_err());
    }
}
