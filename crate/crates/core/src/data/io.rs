//! On-disk dataset container: a `key=value` manifest plus a binary blob.
//!
//! Blob layout, little-endian:
//!
//! ```text
//! "PMTD" | version u8 | count u32 | offset u64 × count | records
//! record: id u64 | task u8 | frames u16 | height u16 | width u16 | frame bytes
//!         | qlen u16 | ids u16 × qlen | ncand u8 | (len u16 | ids u16 × len) × ncand
//!         | answer tag u8 | answer u32
//! ```

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use crate::config::Task;
use crate::data::qa::{Answer, QASample};
use crate::data::scene::Frames;
use crate::data::Sample;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"PMTD";
pub const VERSION: u8 = 1;

fn push_u16(out: &mut Vec<u8>, v: usize, what: &str) -> Result<()> {
    let v = u16::try_from(v).map_err(|_| Error::Format(format!("{what} {v} exceeds u16")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

fn encode_record(s: &Sample, out: &mut Vec<u8>) -> Result<()> {
    let (qa, f) = (&s.qa, &s.frames);
    out.extend_from_slice(&qa.id.to_le_bytes());
    out.push(qa.task.tag());
    push_u16(out, f.count, "frame count")?;
    push_u16(out, f.height, "height")?;
    push_u16(out, f.width, "width")?;
    out.extend_from_slice(&f.data);
    push_u16(out, qa.question.len(), "question length")?;
    for &id in &qa.question {
        push_u16(out, id, "token id")?;
    }
    let n = u8::try_from(qa.candidates.len()).map_err(|_| Error::Format("too many candidates".into()))?;
    out.push(n);
    for c in &qa.candidates {
        push_u16(out, c.len(), "candidate length")?;
        for &id in c {
            push_u16(out, id, "token id")?;
        }
    }
    let (tag, v) = match qa.answer {
        Answer::Class(v) => (0u8, v),
        Answer::Count(v) => (1, v),
        Answer::Choice(v) => (2, v),
    };
    out.push(tag);
    let v = u32::try_from(v).map_err(|_| Error::Format("answer exceeds u32".into()))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

pub fn encode_blob(samples: &[Sample]) -> Result<Vec<u8>> {
    let mut records = Vec::new();
    let mut offsets = Vec::with_capacity(samples.len());
    let header = 4 + 1 + 4 + 8 * samples.len();
    for s in samples {
        offsets.push((header + records.len()) as u64);
        encode_record(s, &mut records)?;
    }
    let mut out = Vec::with_capacity(header + records.len());
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    let count = u32::try_from(samples.len()).map_err(|_| Error::Format("too many samples".into()))?;
    out.extend_from_slice(&count.to_le_bytes());
    for o in offsets {
        out.extend_from_slice(&o.to_le_bytes());
    }
    out.extend_from_slice(&records);
    Ok(out)
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| {
            Error::Format(format!("truncated blob: need {n} bytes at offset {}", self.pos))
        })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<usize> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()) as usize)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn ids(&mut self) -> Result<Vec<usize>> {
        let n = self.u16()?;
        (0..n).map(|_| self.u16()).collect()
    }
}

fn decode_record(c: &mut Cursor) -> Result<Sample> {
    let id = c.u64()?;
    let tag = c.u8()?;
    let task = Task::from_tag(tag).ok_or_else(|| Error::Format(format!("unknown task tag {tag}")))?;
    let (count, height, width) = (c.u16()?, c.u16()?, c.u16()?);
    let data = c.take(count * height * width * 3)?.to_vec();
    let question = c.ids()?;
    let n = c.u8()? as usize;
    let candidates = (0..n).map(|_| c.ids()).collect::<Result<Vec<_>>>()?;
    let answer = match (c.u8()?, c.u32()? as usize) {
        (0, v) => Answer::Class(v),
        (1, v) => Answer::Count(v),
        (2, v) => Answer::Choice(v),
        (t, _) => return Err(Error::Format(format!("unknown answer tag {t}"))),
    };
    Ok(Sample {
        qa: QASample {
            id,
            task,
            question,
            candidates,
            answer,
        },
        frames: Frames {
            count,
            height,
            width,
            data,
        },
    })
}

/// Parse a whole blob; any inconsistency fails the entire read.
pub fn decode_blob(buf: &[u8]) -> Result<Vec<Sample>> {
    let mut c = Cursor { buf, pos: 0 };
    if c.take(4)? != MAGIC {
        return Err(Error::Format("bad magic, not a dataset blob".into()));
    }
    let version = c.u8()?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported blob version {version}")));
    }
    let count = c.u32()? as usize;
    if count.saturating_mul(8) > buf.len() {
        return Err(Error::Format(format!("record count {count} exceeds blob size")));
    }
    let offsets = (0..count).map(|_| c.u64()).collect::<Result<Vec<_>>>()?;
    let mut out = Vec::with_capacity(count);
    for (i, &o) in offsets.iter().enumerate() {
        if o as usize != c.pos {
            return Err(Error::Format(format!("record {i} offset {o} does not match position {}", c.pos)));
        }
        out.push(decode_record(&mut c)?);
    }
    if c.pos != buf.len() {
        return Err(Error::Format(format!("{} trailing bytes after records", buf.len() - c.pos)));
    }
    Ok(out)
}

pub fn manifest_path(dir: &Path, split: &str) -> PathBuf {
    dir.join(format!("{split}.manifest"))
}

pub fn blob_path(dir: &Path, split: &str) -> PathBuf {
    dir.join(format!("{split}.pmtd"))
}

/// Write `{split}.manifest` and `{split}.pmtd` into `dir`.
pub fn write_split(dir: &Path, split: &str, samples: &[Sample], vocabulary: &str) -> Result<()> {
    let mut mix: BTreeMap<&str, usize> = BTreeMap::new();
    for s in samples {
        *mix.entry(s.qa.task.name()).or_default() += 1;
    }
    let mix: Vec<String> = mix.iter().map(|(k, v)| format!("{k}:{v}")).collect();
    let blob = blob_path(dir, split);
    let manifest = format!(
        "format_version={VERSION}\nsample_count={}\ntask_mix={}\nvocabulary={vocabulary}\nblob={}\n",
        samples.len(),
        mix.join(","),
        blob.file_name().unwrap().to_string_lossy(),
    );
    std::fs::write(&blob, encode_blob(samples)?)?;
    std::fs::write(manifest_path(dir, split), manifest)?;
    Ok(())
}

fn parse_manifest(text: &str) -> Result<BTreeMap<String, String>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            l.split_once('=')
                .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
                .ok_or_else(|| Error::Format(format!("bad manifest line {l:?}")))
        })
        .collect()
}

/// Read a split written by [`write_split`], cross-checking the manifest.
pub fn read_split(dir: &Path, split: &str) -> Result<Vec<Sample>> {
    let manifest = parse_manifest(&std::fs::read_to_string(manifest_path(dir, split))?)?;
    let get = |k: &str| {
        manifest
            .get(k)
            .ok_or_else(|| Error::Format(format!("manifest missing {k}")))
    };
    if get("format_version")? != &VERSION.to_string() {
        return Err(Error::Format(format!("unsupported manifest version {}", get("format_version")?)));
    }
    let expected: usize = get("sample_count")?
        .parse()
        .map_err(|_| Error::Format("bad sample_count".into()))?;
    let blob = std::fs::read(dir.join(get("blob")?))?;
    let samples = decode_blob(&blob)?;
    if samples.len() != expected {
        return Err(Error::Format(format!(
            "manifest lists {expected} samples, blob holds {}",
            samples.len()
        )));
    }
    Ok(samples)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(id: u64) -> Sample {
        Sample {
            qa: QASample {
                id,
                task: Task::MultiChoice,
                question: vec![1, 2, 3],
                candidates: vec![vec![4], vec![5, 6]],
                answer: Answer::Choice(1),
            },
            frames: Frames {
                count: 2,
                height: 2,
                width: 1,
                data: (0..12).collect(),
            },
        }
    }

    #[test]
    fn blob_round_trip() {
        let s = vec![sample(1), sample(2)];
        assert_eq!(decode_blob(&encode_blob(&s).unwrap()).unwrap(), s);
        assert_eq!(decode_blob(&encode_blob(&[]).unwrap()).unwrap(), vec![]);
    }

    #[test]
    fn corruption_is_detected() {
        let blob = encode_blob(&[sample(1)]).unwrap();
        let mut bad = blob.clone();
        bad[0] = b'X';
        assert!(matches!(decode_blob(&bad), Err(Error::Format(_))));
        let mut bad = blob.clone();
        bad[4] = 9;
        assert!(decode_blob(&bad).is_err());
        assert!(decode_blob(&blob[..blob.len() - 1]).is_err());
        let mut long = blob.clone();
        long.push(0);
        assert!(decode_blob(&long).is_err());
    }
}
