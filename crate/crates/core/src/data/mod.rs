//! Synthetic video question answering data.

pub mod io;
pub mod qa;
pub mod sampling;
pub mod scene;

use std::path::Path;

use pmt_tensor::rng::{derive_seed, seeded};

use crate::config::{RunConfig, Task};
use crate::error::{Error, Result};
use qa::{question_for, scene_for, QASample, TextQa, Vocabulary};
use scene::{render, Color, Frames, Motion, SceneConfig, SceneSpec};

pub const VOCAB_FILE: &str = "vocab.txt";

/// Raw frames with their question and label.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Sample {
    pub qa: QASample,
    pub frames: Frames,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    fn tag(self) -> u64 {
        match self {
            Split::Train => 1,
            Split::Val => 2,
            Split::Test => 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DataConfig {
    pub scene: SceneConfig,
    /// Static shapes of other kinds added to each scene.
    pub distractors: usize,
    pub max_count: usize,
    pub vocab_size: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            scene: SceneConfig::default(),
            distractors: 0,
            max_count: 5,
            vocab_size: 64,
        }
    }
}

impl DataConfig {
    pub fn from_run(cfg: &RunConfig) -> Self {
        DataConfig {
            scene: SceneConfig {
                canvas: cfg.model.height,
                frames: cfg.raw_frames,
                ..SceneConfig::default()
            },
            distractors: 0,
            max_count: cfg.model.max_count,
            vocab_size: cfg.model.vocab_size,
        }
    }

    /// Number of distinct labels of `task`.
    pub fn label_count(&self, task: Task) -> usize {
        match task {
            Task::OpenEnded => Color::ALL.len(),
            Task::Count => self.max_count,
            Task::MultiChoice => Motion::MOVING.len(),
        }
    }
}

/// A generated sample before vocabulary lookup, with its scene.
#[derive(Debug, Clone, PartialEq)]
pub struct Generated {
    pub id: u64,
    pub spec: SceneSpec,
    pub frames: Frames,
    pub text: TextQa,
}

/// Generate `n` samples of `split`. Sample `i` draws from its own seed
/// `derive_seed(seed, [split, i])`, cycles through `tasks`, and takes the
/// labels of each task in turn so classes stay balanced.
pub fn generate_text_split(cfg: &DataConfig, seed: u64, split: Split, n: usize, tasks: &[Task]) -> Result<Vec<Generated>> {
    if tasks.is_empty() {
        return Err(Error::Config("no tasks to generate".into()));
    }
    (0..n)
        .map(|i| {
            let mut rng = seeded(derive_seed(seed, &[split.tag(), i as u64]));
            let task = tasks[i % tasks.len()];
            let label = (i / tasks.len()) % cfg.label_count(task);
            let spec = scene_for(task, label, cfg.distractors, &mut rng, &cfg.scene)?;
            let frames = render(&spec);
            let text = question_for(&spec, task, &mut rng)?;
            Ok(Generated {
                id: (split.tag() << 32) | i as u64,
                spec,
                frames,
                text,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Splits {
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
    pub test: Vec<Sample>,
    pub vocab: Vocabulary,
}

impl Splits {
    pub fn get(&self, split: Split) -> &[Sample] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    /// Generate all three splits from disjoint seed streams; the vocabulary
    /// comes from the training questions.
    pub fn generate(cfg: &DataConfig, seed: u64, sizes: [usize; 3], tasks: &[Task]) -> Result<Splits> {
        let raw = Split::ALL
            .iter()
            .zip(sizes)
            .map(|(&s, n)| generate_text_split(cfg, seed, s, n, tasks))
            .collect::<Result<Vec<_>>>()?;
        let texts = raw[0]
            .iter()
            .flat_map(|g| std::iter::once(g.text.question.as_slice()).chain(g.text.candidates.iter().map(Vec::as_slice)));
        let vocab = Vocabulary::build(texts, cfg.vocab_size)?;
        let encode = |gs: &[Generated]| -> Result<Vec<Sample>> {
            gs.iter()
                .map(|g| {
                    Ok(Sample {
                        qa: vocab.encode_qa(g.id, &g.text)?,
                        frames: g.frames.clone(),
                    })
                })
                .collect()
        };
        Ok(Splits {
            train: encode(&raw[0])?,
            val: encode(&raw[1])?,
            test: encode(&raw[2])?,
            vocab: vocab.clone(),
        })
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        self.vocab.save(&dir.join(VOCAB_FILE))?;
        for s in Split::ALL {
            io::write_split(dir, s.name(), self.get(s), VOCAB_FILE)?;
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Splits> {
        Ok(Splits {
            train: io::read_split(dir, Split::Train.name())?,
            val: io::read_split(dir, Split::Val.name())?,
            test: io::read_split(dir, Split::Test.name())?,
            vocab: Vocabulary::load(&dir.join(VOCAB_FILE))?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn splits_use_disjoint_streams() {
        let cfg = DataConfig::default();
        let s = Splits::generate(&cfg, 3, [4, 4, 4], &[Task::OpenEnded]).unwrap();
        assert_ne!(s.train[0].frames, s.val[0].frames);
        assert_ne!(s.val[0].frames, s.test[0].frames);
        assert!(s.vocab.len() <= 64);
    }

    #[test]
    fn labels_cycle_per_task() {
        let cfg = DataConfig::default();
        let g = generate_text_split(&cfg, 0, Split::Train, 6, &[Task::Count, Task::MultiChoice]).unwrap();
        let tasks: Vec<Task> = g.iter().map(|x| x.text.task).collect();
        assert_eq!(tasks[..2], [Task::Count, Task::MultiChoice]);
        assert_eq!(g[0].text.answer, qa::Answer::Count(1));
        assert_eq!(g[2].text.answer, qa::Answer::Count(2));
    }
}
