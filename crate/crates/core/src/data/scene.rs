//! Moving-shape scenes and their rasterization.

use rand::Rng as _;

use pmt_tensor::Rng;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ShapeKind {
    Square,
    Circle,
    Triangle,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 3] = [ShapeKind::Square, ShapeKind::Circle, ShapeKind::Triangle];

    pub fn word(self) -> &'static str {
        match self {
            ShapeKind::Square => "square",
            ShapeKind::Circle => "circle",
            ShapeKind::Triangle => "triangle",
        }
    }

    pub fn plural(self) -> &'static str {
        match self {
            ShapeKind::Square => "squares",
            ShapeKind::Circle => "circles",
            ShapeKind::Triangle => "triangles",
        }
    }

    /// Whether pixel `(dx, dy)` of a `size × size` box is covered.
    pub fn covers(self, size: usize, dx: usize, dy: usize) -> bool {
        match self {
            ShapeKind::Square => true,
            ShapeKind::Circle => {
                let c = (size as f64 - 1.0) / 2.0;
                let r = size as f64 / 2.0;
                let (x, y) = (dx as f64 - c, dy as f64 - c);
                x * x + y * y <= r * r
            }
            ShapeKind::Triangle => {
                let half = dy * (size / 2) / (size - 1).max(1);
                let mid = size / 2;
                dx + half >= mid && dx <= mid + half
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Color {
    Red,
    Green,
    Blue,
    Yellow,
    Cyan,
    Magenta,
    White,
    Orange,
}

impl Color {
    pub const ALL: [Color; 8] = [
        Color::Red,
        Color::Green,
        Color::Blue,
        Color::Yellow,
        Color::Cyan,
        Color::Magenta,
        Color::White,
        Color::Orange,
    ];

    pub fn index(self) -> usize {
        Color::ALL.iter().position(|&c| c == self).unwrap()
    }

    pub fn word(self) -> &'static str {
        match self {
            Color::Red => "red",
            Color::Green => "green",
            Color::Blue => "blue",
            Color::Yellow => "yellow",
            Color::Cyan => "cyan",
            Color::Magenta => "magenta",
            Color::White => "white",
            Color::Orange => "orange",
        }
    }

    pub fn rgb(self) -> [u8; 3] {
        match self {
            Color::Red => [255, 0, 0],
            Color::Green => [0, 255, 0],
            Color::Blue => [0, 0, 255],
            Color::Yellow => [255, 255, 0],
            Color::Cyan => [0, 255, 255],
            Color::Magenta => [255, 0, 255],
            Color::White => [255, 255, 255],
            Color::Orange => [255, 128, 0],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Motion {
    Left,
    Right,
    Up,
    Down,
    Static,
}

impl Motion {
    pub const MOVING: [Motion; 4] = [Motion::Left, Motion::Right, Motion::Up, Motion::Down];

    pub fn word(self) -> &'static str {
        match self {
            Motion::Left => "left",
            Motion::Right => "right",
            Motion::Up => "up",
            Motion::Down => "down",
            Motion::Static => "still",
        }
    }

    /// Unit step `(dx, dy)` in image coordinates (y grows downwards).
    pub fn direction(self) -> (i64, i64) {
        match self {
            Motion::Left => (-1, 0),
            Motion::Right => (1, 0),
            Motion::Up => (0, -1),
            Motion::Down => (0, 1),
            Motion::Static => (0, 0),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ShapeSpec {
    pub kind: ShapeKind,
    pub color: Color,
    pub motion: Motion,
    /// Side of the bounding box in pixels.
    pub size: usize,
    /// Top-left corner at frame 0.
    pub x: i64,
    pub y: i64,
    /// Pixels per frame.
    pub speed: f64,
    /// Visible frames `[start, end)`.
    pub visible: (usize, usize),
}

impl ShapeSpec {
    /// Top-left corner at frame `f`.
    pub fn position(&self, f: usize) -> (i64, i64) {
        let travel = (self.speed * f as f64).floor() as i64;
        let (dx, dy) = self.motion.direction();
        (self.x + dx * travel, self.y + dy * travel)
    }

    pub fn is_visible(&self, f: usize) -> bool {
        f >= self.visible.0 && f < self.visible.1
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneSpec {
    pub shapes: Vec<ShapeSpec>,
    pub canvas: usize,
    pub frames: usize,
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.shapes.is_empty() {
            return Err(Error::Input("scene has no shapes".into()));
        }
        for (i, s) in self.shapes.iter().enumerate() {
            let (a, b) = s.visible;
            if a >= b || b > self.frames {
                return Err(Error::Input(format!("shape {i}: interval [{a}, {b}) outside {} frames", self.frames)));
            }
            for f in 0..self.frames {
                let (x, y) = s.position(f);
                let far = self.canvas as i64 - s.size as i64;
                if x < 0 || y < 0 || x > far || y > far {
                    return Err(Error::Input(format!("shape {i} leaves the canvas at frame {f}")));
                }
            }
        }
        Ok(())
    }
}

/// Raw `u8` video, `[frames × height × width × 3]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Frames {
    pub count: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

impl Frames {
    pub fn black(count: usize, height: usize, width: usize) -> Self {
        Frames {
            count,
            height,
            width,
            data: vec![0; count * height * width * 3],
        }
    }

    pub fn frame_len(&self) -> usize {
        self.height * self.width * 3
    }

    pub fn frame(&self, f: usize) -> &[u8] {
        let n = self.frame_len();
        &self.data[f * n..(f + 1) * n]
    }

    pub fn pixel(&self, f: usize, y: usize, x: usize) -> [u8; 3] {
        let i = ((f * self.height + y) * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }
}

/// Rasterize every visible shape, later shapes on top.
pub fn render(spec: &SceneSpec) -> Frames {
    let n = spec.canvas;
    let mut out = Frames::black(spec.frames, n, n);
    for f in 0..spec.frames {
        for s in spec.shapes.iter().filter(|s| s.is_visible(f)) {
            let (x0, y0) = s.position(f);
            let rgb = s.color.rgb();
            for dy in 0..s.size {
                for dx in 0..s.size {
                    if !s.kind.covers(s.size, dx, dy) {
                        continue;
                    }
                    let (x, y) = (x0 + dx as i64, y0 + dy as i64);
                    if x < 0 || y < 0 || x >= n as i64 || y >= n as i64 {
                        continue;
                    }
                    let i = ((f * n + y as usize) * n + x as usize) * 3;
                    out.data[i..i + 3].copy_from_slice(&rgb);
                }
            }
        }
    }
    out
}

/// Geometry of generated scenes.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneConfig {
    pub canvas: usize,
    pub frames: usize,
    /// Minimum gap between any shape and the canvas border.
    pub margin: usize,
    /// Odd shape sizes are drawn from `[min_size, max_size]`.
    pub min_size: usize,
    pub max_size: usize,
    pub speed: f64,
    pub min_visible: usize,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            canvas: 32,
            frames: 32,
            margin: 4,
            min_size: 5,
            max_size: 7,
            speed: 0.5,
            min_visible: 4,
        }
    }
}

impl SceneConfig {
    pub fn travel(&self) -> i64 {
        (self.speed * (self.frames - 1) as f64).floor() as i64
    }

    pub fn random_size(&self, rng: &mut Rng) -> usize {
        let sizes: Vec<usize> = (self.min_size..=self.max_size).filter(|s| s % 2 == 1).collect();
        sizes[rng.gen_range(0..sizes.len())]
    }

    /// A shape of `kind`, `color` and `motion` whose whole trajectory stays
    /// at least `margin` pixels inside the canvas.
    pub fn place(&self, rng: &mut Rng, kind: ShapeKind, color: Color, motion: Motion) -> Result<ShapeSpec> {
        let size = self.random_size(rng);
        let lo = self.margin as i64;
        let hi = self.canvas as i64 - self.margin as i64 - size as i64;
        let travel = if motion == Motion::Static { 0 } else { self.travel() };
        if hi - lo < travel {
            return Err(Error::Config(format!(
                "canvas {} too small for travel {travel} with margin {}",
                self.canvas, self.margin
            )));
        }
        let (dx, dy) = motion.direction();
        let mut coord = |d: i64| {
            let (a, b) = match d {
                1 => (lo, hi - travel),
                -1 => (lo + travel, hi),
                _ => (lo, hi),
            };
            rng.gen_range(a..=b)
        };
        let x = coord(dx);
        let y = coord(dy);
        Ok(ShapeSpec {
            kind,
            color,
            motion,
            size,
            x,
            y,
            speed: self.speed,
            visible: (0, self.frames),
        })
    }

    /// Random visibility interval of at least `min_visible` frames.
    pub fn random_interval(&self, rng: &mut Rng) -> (usize, usize) {
        let len = rng.gen_range(self.min_visible.min(self.frames)..=self.frames);
        let start = rng.gen_range(0..=self.frames - len);
        (start, start + len)
    }
}

/// A free-form scene of one to three shapes with random attributes.
pub fn generate_scene(rng: &mut Rng, cfg: &SceneConfig) -> Result<(SceneSpec, Frames)> {
    let n = rng.gen_range(1..=3);
    let mut shapes = Vec::with_capacity(n);
    for _ in 0..n {
        let kind = ShapeKind::ALL[rng.gen_range(0..3)];
        let color = Color::ALL[rng.gen_range(0..8)];
        let motion = [Motion::Left, Motion::Right, Motion::Up, Motion::Down, Motion::Static][rng.gen_range(0..5)];
        let mut s = cfg.place(rng, kind, color, motion)?;
        s.visible = cfg.random_interval(rng);
        shapes.push(s);
    }
    let spec = SceneSpec {
        shapes,
        canvas: cfg.canvas,
        frames: cfg.frames,
    };
    spec.validate()?;
    let frames = render(&spec);
    Ok((spec, frames))
}

#[cfg(test)]
mod tests {
    use super::*;
    use pmt_tensor::rng::seeded;

    #[test]
    fn seeded_scenes_repeat() {
        let cfg = SceneConfig::default();
        let a = generate_scene(&mut seeded(4), &cfg).unwrap();
        let b = generate_scene(&mut seeded(4), &cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn triangle_and_circle_masks() {
        let tri: Vec<usize> = (0..5).map(|dy| (0..5).filter(|&dx| ShapeKind::Triangle.covers(5, dx, dy)).count()).collect();
        assert_eq!(tri, vec![1, 1, 3, 3, 5]);
        assert!(!ShapeKind::Circle.covers(5, 0, 0));
        assert!(ShapeKind::Circle.covers(5, 2, 0));
    }

    #[test]
    fn placement_respects_margin() {
        let cfg = SceneConfig::default();
        let mut rng = seeded(9);
        for _ in 0..200 {
            for m in Motion::MOVING {
                let s = cfg.place(&mut rng, ShapeKind::Square, Color::Red, m).unwrap();
                for f in 0..cfg.frames {
                    let (x, y) = s.position(f);
                    assert!(x >= 4 && y >= 4 && x + s.size as i64 <= 28 && y + s.size as i64 <= 28);
                }
            }
        }
    }

    #[test]
    fn invalid_scene_is_rejected() {
        let cfg = SceneConfig::default();
        let mut s = cfg.place(&mut seeded(1), ShapeKind::Circle, Color::Blue, Motion::Static).unwrap();
        s.x = 30;
        let spec = SceneSpec {
            shapes: vec![s],
            canvas: 32,
            frames: 32,
        };
        assert!(spec.validate().is_err());
        let empty = SceneSpec {
            shapes: vec![],
            canvas: 32,
            frames: 32,
        };
        assert!(empty.validate().is_err());
    }
}
