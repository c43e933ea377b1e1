//! Segment-based frame sampling and clip augmentation.

use rand::Rng as _;

use pmt_tensor::{Real, Rng, Tensor};

use crate::config::AugmentConfig;
use crate::data::scene::Frames;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SampleMode {
    /// One random frame per segment.
    Train,
    /// The middle frame of each segment.
    Test,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VideoClip {
    pub sample_id: u64,
    pub frames: Frames,
}

impl VideoClip {
    /// `[T × H × W × 3]` with values scaled to `[0, 1]`.
    pub fn to_tensor<F: Real>(&self) -> Tensor<F> {
        let f = &self.frames;
        let scale = 1.0 / 255.0;
        let data = f.data.iter().map(|&b| F::lit(b as f64 * scale)).collect();
        Tensor::new(&[f.count, f.height, f.width, 3], data).expect("frame buffer matches its extents")
    }
}

/// Frame indices chosen from `total` frames split into `t` equal segments.
pub fn segment_indices(total: usize, t: usize, mode: SampleMode, rng: &mut Rng) -> Result<Vec<usize>> {
    if t == 0 || total < t {
        return Err(Error::Input(format!("cannot sample {t} frames from {total}")));
    }
    Ok((0..t)
        .map(|i| {
            let start = i * total / t;
            let end = (i + 1) * total / t;
            match mode {
                SampleMode::Train => rng.gen_range(start..end),
                SampleMode::Test => start + (end - start) / 2,
            }
        })
        .collect())
}

/// Pick `t` frames, one per segment.
pub fn sample_frames(frames: &Frames, sample_id: u64, t: usize, mode: SampleMode, rng: &mut Rng) -> Result<VideoClip> {
    let idx = segment_indices(frames.count, t, mode, rng)?;
    let mut data = Vec::with_capacity(t * frames.frame_len());
    for &i in &idx {
        data.extend_from_slice(frames.frame(i));
    }
    Ok(VideoClip {
        sample_id,
        frames: Frames {
            count: t,
            height: frames.height,
            width: frames.width,
            data,
        },
    })
}

/// Remap every frame through `src(y, x) -> Option<(sy, sx)>`; unmapped
/// pixels become black.
fn remap(frames: &Frames, src: impl Fn(usize, usize) -> Option<(usize, usize)>) -> Frames {
    let mut out = Frames::black(frames.count, frames.height, frames.width);
    for f in 0..frames.count {
        for y in 0..frames.height {
            for x in 0..frames.width {
                if let Some((sy, sx)) = src(y, x) {
                    let o = ((f * frames.height + y) * frames.width + x) * 3;
                    out.data[o..o + 3].copy_from_slice(&frames.pixel(f, sy, sx));
                }
            }
        }
    }
    out
}

fn crop_resize(frames: &Frames, rng: &mut Rng, min_side: usize) -> Frames {
    let (h, w) = (frames.height, frames.width);
    let min_side = min_side.min(w).min(h);
    let cw = rng.gen_range(min_side..=w);
    // Height keeps the aspect ratio within [0.8, 1.2].
    let lo = ((cw as f64 / 1.2).ceil() as usize).max(min_side);
    let hi = ((cw as f64 / 0.8).floor() as usize).min(h);
    let ch = if lo <= hi { rng.gen_range(lo..=hi) } else { cw.min(h) };
    let x0 = rng.gen_range(0..=w - cw);
    let y0 = rng.gen_range(0..=h - ch);
    remap(frames, |y, x| Some((y0 + y * ch / h, x0 + x * cw / w)))
}

fn mask(frames: &mut Frames, rng: &mut Rng, max_side: usize) {
    let (h, w) = (frames.height, frames.width);
    let mh = rng.gen_range(1..=max_side.min(h));
    let mw = rng.gen_range(1..=max_side.min(w));
    let y0 = rng.gen_range(0..=h - mh);
    let x0 = rng.gen_range(0..=w - mw);
    for f in 0..frames.count {
        for y in y0..y0 + mh {
            let o = ((f * h + y) * w + x0) * 3;
            frames.data[o..o + mw * 3].fill(0);
        }
    }
}

fn rotate(frames: &Frames, degrees: f64) -> Frames {
    let (h, w) = (frames.height, frames.width);
    let (s, c) = degrees.to_radians().sin_cos();
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    remap(frames, |y, x| {
        let (dy, dx) = (y as f64 - cy, x as f64 - cx);
        let sx = (c * dx + s * dy + cx).round();
        let sy = (-s * dx + c * dy + cy).round();
        (sx >= 0.0 && sy >= 0.0 && sx < w as f64 && sy < h as f64).then_some((sy as usize, sx as usize))
    })
}

fn box_blur(frames: &Frames) -> Frames {
    let (h, w) = (frames.height, frames.width);
    let mut out = frames.clone();
    for f in 0..frames.count {
        for y in 0..h {
            for x in 0..w {
                let mut acc = [0u32; 3];
                let mut n = 0;
                for yy in y.saturating_sub(1)..=(y + 1).min(h - 1) {
                    for xx in x.saturating_sub(1)..=(x + 1).min(w - 1) {
                        let p = frames.pixel(f, yy, xx);
                        for k in 0..3 {
                            acc[k] += p[k] as u32;
                        }
                        n += 1;
                    }
                }
                let o = ((f * h + y) * w + x) * 3;
                for k in 0..3 {
                    out.data[o + k] = ((acc[k] + n / 2) / n) as u8;
                }
            }
        }
    }
    out
}

/// Random crop-and-resize, rectangular mask, and optional rotation and
/// blur; the same transform applies to every frame of the clip.
pub fn augment(clip: &VideoClip, rng: &mut Rng, cfg: &AugmentConfig) -> VideoClip {
    if !cfg.enabled {
        return clip.clone();
    }
    let mut frames = clip.frames.clone();
    if cfg.crop {
        frames = crop_resize(&frames, rng, cfg.crop_min);
    }
    if cfg.mask && cfg.mask_max > 0 {
        mask(&mut frames, rng, cfg.mask_max);
    }
    if cfg.rotate && cfg.max_degrees > 0.0 {
        let deg = rng.gen_range(-cfg.max_degrees..=cfg.max_degrees);
        frames = rotate(&frames, deg);
    }
    if cfg.blur {
        frames = box_blur(&frames);
    }
    VideoClip {
        sample_id: clip.sample_id,
        frames,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use pmt_tensor::rng::seeded;

    fn ramp(count: usize) -> Frames {
        let mut f = Frames::black(count, 8, 8);
        for (i, v) in f.data.iter_mut().enumerate() {
            *v = (i % 251) as u8;
        }
        f
    }

    #[test]
    fn too_few_frames() {
        assert!(sample_frames(&ramp(3), 0, 4, SampleMode::Test, &mut seeded(0)).is_err());
    }

    #[test]
    fn train_indices_stay_in_segments() {
        let mut rng = seeded(5);
        for _ in 0..50 {
            let idx = segment_indices(32, 16, SampleMode::Train, &mut rng).unwrap();
            for (i, &k) in idx.iter().enumerate() {
                assert!(k / 2 == i);
            }
        }
    }

    #[test]
    fn disabled_augmentation_is_identity() {
        let clip = VideoClip {
            sample_id: 1,
            frames: ramp(2),
        };
        let cfg = AugmentConfig {
            enabled: false,
            ..AugmentConfig::default()
        };
        assert_eq!(augment(&clip, &mut seeded(1), &cfg), clip);
    }

    #[test]
    fn full_crop_without_mask_is_identity() {
        let clip = VideoClip {
            sample_id: 1,
            frames: ramp(2),
        };
        let cfg = AugmentConfig {
            crop_min: 8,
            mask_max: 0,
            ..AugmentConfig::default()
        };
        // With crop_min equal to the frame size the only crop is the frame.
        assert_eq!(augment(&clip, &mut seeded(3), &cfg), clip);
    }

    #[test]
    fn zero_rotation_and_flat_blur_are_identity() {
        let f = ramp(1);
        assert_eq!(rotate(&f, 0.0), f);
        let flat = Frames {
            data: vec![77; f.data.len()],
            ..f.clone()
        };
        assert_eq!(box_blur(&flat), flat);
    }

    #[test]
    fn tensor_scaling() {
        let clip = VideoClip {
            sample_id: 0,
            frames: Frames {
                count: 1,
                height: 1,
                width: 1,
                data: vec![0, 255, 51],
            },
        };
        let t: Tensor<f64> = clip.to_tensor();
        assert_eq!(t.shape(), &[1, 1, 1, 3]);
        assert_eq!(t.data(), &[0.0, 1.0, 0.2]);
    }
}
