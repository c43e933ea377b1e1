//! Templated questions, labels and the closed vocabulary.

use std::collections::HashMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng as _;

use pmt_tensor::Rng;

use crate::config::Task;
use crate::data::scene::{Color, Motion, SceneConfig, SceneSpec, ShapeKind, ShapeSpec};
use crate::error::{Error, Result};

/// Every word a template can produce.
pub fn lexicon() -> Vec<&'static str> {
    let mut words = vec!["what", "color", "is", "the", "moving", "how", "many", "appear", "does", "do"];
    for k in ShapeKind::ALL {
        words.push(k.word());
        words.push(k.plural());
    }
    words.extend(Motion::MOVING.iter().map(|m| m.word()));
    words
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Answer {
    /// Palette index of the asked color.
    Class(usize),
    Count(usize),
    /// Position of the correct candidate.
    Choice(usize),
}

/// A question in words, before vocabulary lookup.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TextQa {
    pub task: Task,
    pub question: Vec<String>,
    pub candidates: Vec<Vec<String>>,
    pub answer: Answer,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QASample {
    pub id: u64,
    pub task: Task,
    pub question: Vec<usize>,
    pub candidates: Vec<Vec<usize>>,
    pub answer: Answer,
}

impl QASample {
    /// Token sequences fed to the model: the question alone, or the question
    /// followed by each candidate.
    pub fn sequences(&self) -> Vec<Vec<usize>> {
        if self.candidates.is_empty() {
            vec![self.question.clone()]
        } else {
            self.candidates
                .iter()
                .map(|c| self.question.iter().chain(c).copied().collect())
                .collect()
        }
    }
}

fn words(s: &str) -> Vec<String> {
    s.split_whitespace().map(str::to_string).collect()
}

fn single_mover(spec: &SceneSpec) -> Result<&ShapeSpec> {
    let movers: Vec<&ShapeSpec> = spec.shapes.iter().filter(|s| s.motion != Motion::Static).collect();
    match movers.as_slice() {
        [one] => Ok(one),
        _ => Err(Error::Input(format!("scene has {} moving shapes, need exactly one", movers.len()))),
    }
}

/// Build the question for `task` about `spec`. Multi-choice candidates are
/// shuffled with `rng`.
pub fn question_for(spec: &SceneSpec, task: Task, rng: &mut Rng) -> Result<TextQa> {
    match task {
        Task::OpenEnded => {
            let s = single_mover(spec)?;
            Ok(TextQa {
                task,
                question: words(&format!("what color is the moving {}", s.kind.word())),
                candidates: Vec::new(),
                answer: Answer::Class(s.color.index()),
            })
        }
        Task::Count => {
            let kind = spec.shapes[0].kind;
            let n = spec.shapes.iter().filter(|s| s.kind == kind).count();
            Ok(TextQa {
                task,
                question: words(&format!("how many {} appear", kind.plural())),
                candidates: Vec::new(),
                answer: Answer::Count(n),
            })
        }
        Task::MultiChoice => {
            let s = single_mover(spec)?;
            let mut options = Motion::MOVING.to_vec();
            options.shuffle(rng);
            let correct = options.iter().position(|&m| m == s.motion).unwrap();
            Ok(TextQa {
                task,
                question: words(&format!("what does the {} do", s.kind.word())),
                candidates: options.iter().map(|m| vec![m.word().to_string()]).collect(),
                answer: Answer::Choice(correct),
            })
        }
    }
}

/// Scene whose answer to `task` is the `label`-th value of that task: a
/// palette index, a count minus one, or a motion index.
pub fn scene_for(task: Task, label: usize, distractors: usize, rng: &mut Rng, cfg: &SceneConfig) -> Result<SceneSpec> {
    let mut shapes = Vec::new();
    let kind = ShapeKind::ALL[rng.gen_range(0..3)];
    let others: Vec<ShapeKind> = ShapeKind::ALL.iter().copied().filter(|&k| k != kind).collect();
    match task {
        Task::OpenEnded | Task::MultiChoice => {
            let (color, motion) = if task == Task::OpenEnded {
                (Color::ALL[label % 8], Motion::MOVING[rng.gen_range(0..4)])
            } else {
                (Color::ALL[rng.gen_range(0..8)], Motion::MOVING[label % 4])
            };
            shapes.push(cfg.place(rng, kind, color, motion)?);
            for _ in 0..distractors {
                let k = others[rng.gen_range(0..others.len())];
                let c = Color::ALL[rng.gen_range(0..8)];
                shapes.push(cfg.place(rng, k, c, Motion::Static)?);
            }
        }
        Task::Count => {
            let count = label + 1;
            let cells = grid_cells(cfg);
            if count + distractors > cells.len() {
                return Err(Error::Config(format!(
                    "{} shapes do not fit {} grid cells",
                    count + distractors,
                    cells.len()
                )));
            }
            let mut order: Vec<usize> = (0..cells.len()).collect();
            order.shuffle(rng);
            for (n, &cell) in order.iter().take(count + distractors).enumerate() {
                let k = if n < count { kind } else { others[rng.gen_range(0..others.len())] };
                let color = Color::ALL[rng.gen_range(0..8)];
                let size = cfg.random_size(rng);
                let (cx, cy, side) = cells[cell];
                let slack = side.saturating_sub(size);
                let mut s = ShapeSpec {
                    kind: k,
                    color,
                    motion: Motion::Static,
                    size,
                    x: cx + rng.gen_range(0..=slack) as i64,
                    y: cy + rng.gen_range(0..=slack) as i64,
                    speed: cfg.speed,
                    visible: (0, cfg.frames),
                };
                let min_len = cfg.min_visible.max(cfg.frames / 2).min(cfg.frames);
                let len = rng.gen_range(min_len..=cfg.frames);
                let start = rng.gen_range(0..=cfg.frames - len);
                s.visible = (start, start + len);
                shapes.push(s);
            }
        }
    }
    let spec = SceneSpec {
        shapes,
        canvas: cfg.canvas,
        frames: cfg.frames,
    };
    spec.validate()?;
    Ok(spec)
}

/// Disjoint square cells `(x, y, side)` inside the margins.
fn grid_cells(cfg: &SceneConfig) -> Vec<(i64, i64, usize)> {
    let usable = cfg.canvas.saturating_sub(2 * cfg.margin);
    let side = cfg.max_size + 1;
    let per = (usable / side).max(1);
    let mut out = Vec::new();
    for r in 0..per {
        for c in 0..per {
            out.push(((cfg.margin + c * side) as i64, (cfg.margin + r * side) as i64, side));
        }
    }
    out
}

/// Closed word list; the line index is the token id.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    words: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    pub fn from_words(words: Vec<String>) -> Result<Self> {
        let mut index = HashMap::new();
        for (i, w) in words.iter().enumerate() {
            if w.is_empty() || w.contains(char::is_whitespace) {
                return Err(Error::Format(format!("invalid vocabulary entry {w:?} at line {}", i + 1)));
            }
            if index.insert(w.clone(), i).is_some() {
                return Err(Error::Format(format!("duplicate vocabulary entry {w:?}")));
            }
        }
        Ok(Vocabulary { words, index })
    }

    /// The `k` most frequent words of `texts` (ties alphabetical), then the
    /// rest of the template lexicon while room remains.
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a [String]>, k: usize) -> Result<Self> {
        let mut freq: HashMap<&str, usize> = HashMap::new();
        for t in texts {
            for w in t {
                *freq.entry(w.as_str()).or_default() += 1;
            }
        }
        let mut ranked: Vec<(&str, usize)> = freq.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
        let mut words: Vec<String> = ranked.into_iter().take(k).map(|(w, _)| w.to_string()).collect();
        for w in lexicon() {
            if words.len() >= k {
                break;
            }
            if !words.iter().any(|x| x == w) {
                words.push(w.to_string());
            }
        }
        Vocabulary::from_words(words)
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn id(&self, word: &str) -> Option<usize> {
        self.index.get(word).copied()
    }

    pub fn word(&self, id: usize) -> Option<&str> {
        self.words.get(id).map(String::as_str)
    }

    pub fn encode(&self, words: &[String]) -> Result<Vec<usize>> {
        words
            .iter()
            .map(|w| self.id(w).ok_or_else(|| Error::Input(format!("word {w:?} not in vocabulary"))))
            .collect()
    }

    pub fn encode_qa(&self, id: u64, qa: &TextQa) -> Result<QASample> {
        Ok(QASample {
            id,
            task: qa.task,
            question: self.encode(&qa.question)?,
            candidates: qa.candidates.iter().map(|c| self.encode(c)).collect::<Result<_>>()?,
            answer: qa.answer.clone(),
        })
    }

    pub fn to_text(&self) -> String {
        self.words.iter().map(|w| format!("{w}\n")).collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        Ok(std::fs::write(path, self.to_text())?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Vocabulary::from_words(text.lines().map(str::to_string).collect())
    }
}

/// Question and answer for `task` about `spec`, encoded with `vocab`.
pub fn generate_qa(spec: &SceneSpec, task: Task, rng: &mut Rng, vocab: &Vocabulary, id: u64) -> Result<QASample> {
    let text = question_for(spec, task, rng)?;
    vocab.encode_qa(id, &text)
}

#[cfg(test)]
mod tests {
    use super::*;
    use pmt_tensor::rng::seeded;

    #[test]
    fn vocabulary_orders_by_frequency() {
        let a = words("the the the red");
        let b = words("red is");
        let v = Vocabulary::build([a.as_slice(), b.as_slice()], 64).unwrap();
        assert_eq!(&v.words()[..3], &["the", "red", "is"]);
        assert!(v.id("triangle").is_some());
        let small = Vocabulary::build([a.as_slice()], 2).unwrap();
        assert_eq!(small.len(), 2);
        assert!(small.encode(&words("moving")).is_err());
    }

    #[test]
    fn vocabulary_text_round_trip() {
        let v = Vocabulary::build(std::iter::empty::<&[String]>(), 64).unwrap();
        let back = Vocabulary::from_words(v.to_text().lines().map(str::to_string).collect()).unwrap();
        assert_eq!(back, v);
        assert!(Vocabulary::from_words(vec!["a".into(), "a".into()]).is_err());
    }

    #[test]
    fn count_needs_enough_cells() {
        let cfg = SceneConfig::default();
        assert!(scene_for(Task::Count, 8, 2, &mut seeded(1), &cfg).is_err());
        let s = scene_for(Task::Count, 4, 0, &mut seeded(1), &cfg).unwrap();
        assert_eq!(s.shapes.len(), 5);
    }

    #[test]
    fn static_scene_rejects_motion_questions() {
        let cfg = SceneConfig::default();
        let spec = scene_for(Task::Count, 1, 0, &mut seeded(2), &cfg).unwrap();
        assert!(matches!(question_for(&spec, Task::OpenEnded, &mut seeded(0)), Err(Error::Input(_))));
        assert!(question_for(&spec, Task::MultiChoice, &mut seeded(0)).is_err());
    }
}
