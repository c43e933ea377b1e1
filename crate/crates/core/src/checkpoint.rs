//! Checkpoints: parameters, buffers and optimizer moments, the training
//! state, and an echo of the run configuration.
//!
//! ```text
//! "PMTC" | version u8 | (len u64 | section) × 3
//! sections: tensor records, training state (key=value), configuration (key=value)
//! ```

use std::collections::HashMap;
use std::io::Write as _;
use std::path::Path;

use pmt_tensor::serialize::{read_tensors, write_tensors};
use pmt_tensor::{Real, Tensor};

use crate::error::{Error, Result};
use crate::model::Pmt;
use crate::optim::{Adam, Plateau};

const MAGIC: &[u8; 4] = b"PMTC";
const VERSION: u8 = 1;

/// Everything besides tensors needed to continue a run exactly. Per-epoch
/// randomness is derived from `(seed, epoch)`, so the epoch counter is the
/// generator state.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    /// Completed epochs.
    pub epoch: usize,
    pub lr: f64,
    pub plateau: Plateau,
    /// Best validation score so far (accuracy, or negated rounded MSE).
    pub best_score: f64,
    pub best_epoch: usize,
    pub seed: u64,
}

impl TrainState {
    pub fn new(lr: f64, patience: usize, seed: u64) -> Self {
        TrainState {
            epoch: 0,
            lr,
            plateau: Plateau::new(patience),
            best_score: f64::NEG_INFINITY,
            best_epoch: 0,
            seed,
        }
    }

    pub fn to_text(&self, adam_step: u64) -> String {
        format!(
            "epoch={}\nlr={}\nplateau_best={}\nplateau_counter={}\npatience={}\nfactor={}\nbest_score={}\nbest_epoch={}\nseed={}\nadam_step={}\n",
            self.epoch,
            self.lr,
            self.plateau.best,
            self.plateau.counter,
            self.plateau.patience,
            self.plateau.factor,
            self.best_score,
            self.best_epoch,
            self.seed,
            adam_step,
        )
    }

    /// Parse [`TrainState::to_text`]; returns the state and the Adam step.
    pub fn from_text(text: &str) -> Result<(TrainState, u64)> {
        let kv: HashMap<&str, &str> = text.lines().filter_map(|l| l.split_once('=')).collect();
        fn get<T: std::str::FromStr>(kv: &HashMap<&str, &str>, k: &str) -> Result<T> {
            kv.get(k)
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| Error::Checkpoint(format!("training state missing or invalid {k}")))
        }
        let state = TrainState {
            epoch: get(&kv, "epoch")?,
            lr: get(&kv, "lr")?,
            plateau: Plateau {
                best: get(&kv, "plateau_best")?,
                counter: get(&kv, "plateau_counter")?,
                patience: get(&kv, "patience")?,
                factor: get(&kv, "factor")?,
            },
            best_score: get(&kv, "best_score")?,
            best_epoch: get(&kv, "best_epoch")?,
            seed: get(&kv, "seed")?,
        };
        Ok((state, get(&kv, "adam_step")?))
    }
}

#[derive(Debug, Clone)]
pub struct Checkpoint<F> {
    pub tensors: Vec<(String, Tensor<F>)>,
    pub state: TrainState,
    pub adam_step: u64,
    pub config: String,
}

fn section(out: &mut Vec<u8>, bytes: &[u8]) {
    out.extend_from_slice(&(bytes.len() as u64).to_le_bytes());
    out.extend_from_slice(bytes);
}

pub fn save<F: Real>(path: &Path, model: &Pmt<F>, adam: &Adam<F>, state: &TrainState, config: &str) -> Result<()> {
    let mut records: Vec<(String, &Tensor<F>)> = Vec::new();
    for (id, p) in model.store.iter() {
        records.push((format!("param:{}", p.name), &p.value));
        if let (Some(m), Some(v)) = (&adam.m[id.index()], &adam.v[id.index()]) {
            records.push((format!("adam.m:{}", p.name), m));
            records.push((format!("adam.v:{}", p.name), v));
        }
    }
    let refs: Vec<(&str, &Tensor<F>)> = records.iter().map(|(n, t)| (n.as_str(), *t)).collect();
    let mut tensors = Vec::new();
    write_tensors(&mut tensors, &refs)?;

    let mut out = Vec::with_capacity(tensors.len() + 1024);
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    section(&mut out, &tensors);
    section(&mut out, state.to_text(adam.step).as_bytes());
    section(&mut out, config.as_bytes());

    let tmp = path.with_extension("tmp");
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(&out)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load<F: Real>(path: &Path) -> Result<Checkpoint<F>> {
    let buf = std::fs::read(path)?;
    if buf.len() < 5 || &buf[..4] != MAGIC {
        return Err(Error::Format(format!("{} is not a checkpoint", path.display())));
    }
    if buf[4] != VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {}", buf[4])));
    }
    let mut pos = 5;
    let mut sections = Vec::with_capacity(3);
    for _ in 0..3 {
        let len = buf
            .get(pos..pos + 8)
            .map(|b| u64::from_le_bytes(b.try_into().unwrap()) as usize)
            .ok_or_else(|| Error::Format("truncated checkpoint".into()))?;
        pos += 8;
        let body = buf
            .get(pos..pos.saturating_add(len))
            .ok_or_else(|| Error::Format("truncated checkpoint".into()))?;
        sections.push(body);
        pos += len;
    }
    if pos != buf.len() {
        return Err(Error::Format("trailing bytes after checkpoint".into()));
    }
    let tensors = read_tensors::<F, _>(&mut &sections[0][..])?;
    let text = |b: &[u8]| String::from_utf8(b.to_vec()).map_err(|_| Error::Format("checkpoint text is not UTF-8".into()));
    let (state, adam_step) = TrainState::from_text(&text(sections[1])?)?;
    Ok(Checkpoint {
        tensors,
        state,
        adam_step,
        config: text(sections[2])?,
    })
}

/// Copy checkpoint tensors into `model` and `adam`. Every model tensor must
/// be present with identical extents; all differences are listed.
pub fn restore<F: Real>(ckpt: &Checkpoint<F>, model: &mut Pmt<F>, adam: Option<&mut Adam<F>>) -> Result<()> {
    let by_name: HashMap<&str, &Tensor<F>> = ckpt.tensors.iter().map(|(n, t)| (n.as_str(), t)).collect();
    let mut problems = Vec::new();
    let mut expect = |key: String, shape: &[usize]| match by_name.get(key.as_str()) {
        None => problems.push(format!("{key}: missing")),
        Some(t) if t.shape() != shape => {
            problems.push(format!("{key}: checkpoint {:?} vs model {:?}", t.shape(), shape))
        }
        _ => {}
    };
    for (_, p) in model.store.iter() {
        expect(format!("param:{}", p.name), p.value.shape());
        if adam.is_some() && p.trainable {
            expect(format!("adam.m:{}", p.name), p.value.shape());
            expect(format!("adam.v:{}", p.name), p.value.shape());
        }
    }
    let known = model.store.len();
    let extra = ckpt.tensors.iter().filter(|(n, _)| n.starts_with("param:")).count();
    if extra != known {
        problems.push(format!("checkpoint holds {extra} parameters, model has {known}"));
    }
    if !problems.is_empty() {
        return Err(Error::Checkpoint(format!("architecture mismatch:\n  {}", problems.join("\n  "))));
    }
    let ids: Vec<_> = model.store.ids().collect();
    for id in ids {
        let name = model.store.get(id).name.clone();
        *model.store.value_mut(id) = by_name[format!("param:{name}").as_str()].clone();
    }
    if let Some(adam) = adam {
        adam.step = ckpt.adam_step;
        for (id, p) in model.store.iter() {
            if p.trainable {
                adam.m[id.index()] = Some(by_name[format!("adam.m:{}", p.name).as_str()].clone());
                adam.v[id.index()] = Some(by_name[format!("adam.v:{}", p.name).as_str()].clone());
            }
        }
    }
    Ok(())
}
