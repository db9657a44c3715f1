//! Seeded synthetic three-frame clips: coloured rectangles and ellipses on a
//! background, each translated by its own integer shift between frames.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vidseg_tensor::{msat, AnyTensor, Tensor};

use crate::error::{param_err, Error, Result};
use crate::model::FRAMES;

const PLACEMENT_ATTEMPTS: usize = 500;

/// Fixed class colours; class 0 is the background.
const PALETTE: [[f32; 3]; 8] = [
    [0.15, 0.15, 0.15],
    [0.9, 0.2, 0.2],
    [0.2, 0.8, 0.3],
    [0.25, 0.35, 0.95],
    [0.9, 0.85, 0.2],
    [0.8, 0.3, 0.85],
    [0.2, 0.85, 0.85],
    [0.95, 0.6, 0.2],
];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Shape {
    Rect,
    Ellipse,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GenConfig {
    pub height: usize,
    pub width: usize,
    pub classes: usize,
    pub objects: usize,
    /// Object sides are drawn from `[min_size, max_size]`.
    pub min_size: usize,
    pub max_size: usize,
    /// Largest per-frame shift along each axis.
    pub max_shift: i32,
    /// Half-width of the uniform pixel noise.
    pub noise: f32,
    /// Snap current-frame object boxes to this grid (1 disables snapping).
    pub grid: usize,
    pub ellipses: bool,
    /// The top two classes share a colour; the lower one never moves and the
    /// upper one always does, so only motion tells them apart.
    pub motion_coded: bool,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            height: 64,
            width: 64,
            classes: 4,
            objects: 3,
            min_size: 12,
            max_size: 24,
            max_shift: 3,
            noise: 0.05,
            grid: 1,
            ellipses: true,
            motion_coded: false,
        }
    }
}

impl GenConfig {
    fn validate(&self) -> Result<()> {
        if self.height % 8 != 0 || self.width % 8 != 0 || self.height == 0 || self.width == 0 {
            return param_err(format!("frame {}x{} must be divisible by 8", self.height, self.width));
        }
        if self.classes < 2 || self.classes > PALETTE.len() {
            return param_err(format!("classes must be in 2..={}, got {}", PALETTE.len(), self.classes));
        }
        if self.motion_coded && self.classes < 3 {
            return param_err("motion-coded clips need at least 3 classes");
        }
        if self.grid == 0 || self.min_size == 0 || self.min_size > self.max_size {
            return param_err("object sizes and grid must be positive with min <= max");
        }
        if self.max_shift < 0 || (self.motion_coded && self.max_shift == 0) {
            return param_err("max shift must be non-negative (positive for motion-coded clips)");
        }
        Ok(())
    }
}

/// One object as placed in the current frame.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ObjectSpec {
    pub class: u32,
    pub shape: Shape,
    pub top: i32,
    pub left: i32,
    pub height: usize,
    pub width: usize,
    pub color: [f32; 3],
    /// Per-frame displacement `(rows, cols)`: the object sits at
    /// `(top, left) − k·shift` in frame `t−k`.
    pub shift: (i32, i32),
}

impl ObjectSpec {
    fn covers_local(&self, r: i32, c: i32) -> bool {
        let (h, w) = (self.height as i32, self.width as i32);
        if r < 0 || c < 0 || r >= h || c >= w {
            return false;
        }
        match self.shape {
            Shape::Rect => true,
            Shape::Ellipse => {
                let dy = (r as f64 + 0.5) / h as f64 - 0.5;
                let dx = (c as f64 + 0.5) / w as f64 - 0.5;
                dy * dy + dx * dx <= 0.25
            }
        }
    }

    /// Whether the object covers pixel `(r, c)` in frame `t − back`.
    pub fn covers(&self, back: usize, r: usize, c: usize) -> bool {
        let k = back as i32;
        let top = self.top - k * self.shift.0;
        let left = self.left - k * self.shift.1;
        self.covers_local(r as i32 - top, c as i32 - left)
    }

    /// Row-major coverage mask in frame `t − back`.
    pub fn mask(&self, back: usize, height: usize, width: usize) -> Vec<bool> {
        (0..height * width).map(|i| self.covers(back, i / width, i % width)).collect()
    }

    fn overlaps(&self, other: &ObjectSpec) -> bool {
        let (a0, a1) = (self.top, self.top + self.height as i32);
        let (b0, b1) = (other.top, other.top + other.height as i32);
        let (c0, c1) = (self.left, self.left + self.width as i32);
        let (d0, d1) = (other.left, other.left + other.width as i32);
        a0 < b1 && b0 < a1 && c0 < d1 && d0 < c1
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSequence {
    /// Frames `t−2`, `t−1`, `t`, each `3×H×W` in `[0, 1]`.
    pub frames: [Tensor<f32>; FRAMES],
    /// Labels of the current frame, `H×W`.
    pub gt: Tensor<u32>,
    pub objects: Vec<ObjectSpec>,
}

fn random_object(cfg: &GenConfig, rng: &mut ChaCha8Rng) -> ObjectSpec {
    let g = cfg.grid;
    let side = |rng: &mut ChaCha8Rng, limit: usize| {
        let lo = cfg.min_size.div_ceil(g);
        let hi = (cfg.max_size.min(limit) / g).max(lo);
        rng.gen_range(lo..=hi) * g
    };
    let height = side(rng, cfg.height);
    let width = side(rng, cfg.width);
    let top = (rng.gen_range(0..=(cfg.height.saturating_sub(height)) / g) * g) as i32;
    let left = (rng.gen_range(0..=(cfg.width.saturating_sub(width)) / g) * g) as i32;
    let top_class = cfg.classes as u32 - 1;
    let class = rng.gen_range(1..=top_class);
    let shape = if cfg.ellipses && rng.gen_bool(0.5) {
        Shape::Ellipse
    } else {
        Shape::Rect
    };
    let s = cfg.max_shift;
    let mut shift = (rng.gen_range(-s..=s), rng.gen_range(-s..=s));
    let mut color = PALETTE[class as usize];
    if cfg.motion_coded {
        if class == top_class {
            while shift == (0, 0) {
                shift = (rng.gen_range(-s..=s), rng.gen_range(-s..=s));
            }
        } else if class == top_class - 1 {
            shift = (0, 0);
        }
        if class >= top_class - 1 {
            color = PALETTE[top_class as usize - 1];
        }
    }
    ObjectSpec {
        class,
        shape,
        top,
        left,
        height,
        width,
        color,
        shift,
    }
}

/// Generates one clip. The same seed and config always give identical output.
pub fn gen_synthetic_video(seed: u64, cfg: &GenConfig) -> Result<SyntheticSequence> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut objects: Vec<ObjectSpec> = Vec::with_capacity(cfg.objects);
    for i in 0..cfg.objects {
        let mut placed = None;
        for _ in 0..PLACEMENT_ATTEMPTS {
            let o = random_object(cfg, &mut rng);
            if objects.iter().all(|p| !p.overlaps(&o)) {
                placed = Some(o);
                break;
            }
        }
        match placed {
            Some(o) => objects.push(o),
            None => {
                return param_err(format!(
                    "could not place object {} of {} in a {}x{} frame",
                    i + 1,
                    cfg.objects,
                    cfg.height,
                    cfg.width
                ))
            }
        }
    }
    render(cfg, objects, &mut rng)
}

/// Draws frames and labels for explicitly placed objects.
pub fn render(cfg: &GenConfig, objects: Vec<ObjectSpec>, rng: &mut impl Rng) -> Result<SyntheticSequence> {
    cfg.validate()?;
    if let Some(o) = objects.iter().find(|o| o.class as usize >= cfg.classes) {
        return param_err(format!("object class {} out of range", o.class));
    }
    let (h, w) = (cfg.height, cfg.width);
    let n = h * w;
    let mut frames = Vec::with_capacity(FRAMES);
    for f in 0..FRAMES {
        let back = FRAMES - 1 - f;
        let mut img = vec![0f32; 3 * n];
        for px in 0..n {
            let (r, c) = (px / w, px % w);
            let color = objects
                .iter()
                .rev()
                .find(|o| o.covers(back, r, c))
                .map_or(PALETTE[0], |o| o.color);
            for ch in 0..3 {
                let noise = if cfg.noise > 0.0 {
                    rng.gen_range(-cfg.noise..=cfg.noise)
                } else {
                    0.0
                };
                img[ch * n + px] = (color[ch] + noise).clamp(0.0, 1.0);
            }
        }
        frames.push(Tensor::from_vec(&[3, h, w], img)?);
    }
    let labels = (0..n)
        .map(|px| {
            objects
                .iter()
                .rev()
                .find(|o| o.covers(0, px / w, px % w))
                .map_or(0, |o| o.class)
        })
        .collect();
    let gt = Tensor::from_vec(&[h, w], labels)?;
    Ok(SyntheticSequence {
        frames: frames.try_into().expect("three frames"),
        gt,
        objects,
    })
}

/// `count` clips whose seeds are drawn from `seed`.
pub fn gen_dataset(seed: u64, count: usize, cfg: &GenConfig) -> Result<Vec<SyntheticSequence>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count).map(|_| gen_synthetic_video(rng.gen(), cfg)).collect()
}

fn flip_last_axis<T: vidseg_tensor::Element>(x: &Tensor<T>) -> Tensor<T> {
    let w = *x.shape().last().expect("rank >= 1");
    let d = x.data();
    Tensor::from_fn(x.shape(), |i| d[i - i % w + (w - 1 - i % w)])
}

impl SyntheticSequence {
    /// Mirrors frames and labels left to right.
    pub fn flipped(&self) -> Self {
        Self {
            frames: [0, 1, 2].map(|i| flip_last_axis(&self.frames[i])),
            gt: flip_last_axis(&self.gt),
            objects: Vec::new(),
        }
    }

    const FILES: [&'static str; 4] = ["frame_t-2.msat", "frame_t-1.msat", "frame_t.msat", "gt.msat"];

    /// Writes the frames and labels as MSAT files into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(crate::error::io_err(dir))?;
        for (i, f) in self.frames.iter().enumerate() {
            msat::write(dir.join(Self::FILES[i]), &AnyTensor::from(f.clone()))?;
        }
        msat::write(dir.join(Self::FILES[3]), &AnyTensor::from(self.gt.clone()))?;
        Ok(())
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let mut frames = Vec::with_capacity(FRAMES);
        for name in &Self::FILES[..3] {
            match msat::read(dir.join(name))? {
                AnyTensor::F32(t) => frames.push(t),
                other => return Err(Error::Checkpoint(format!("{name}: expected f32, got {:?}", other.dtype()))),
            }
        }
        let gt = match msat::read(dir.join(Self::FILES[3]))? {
            AnyTensor::U32(t) => t,
            other => return Err(Error::Checkpoint(format!("gt.msat: expected u32, got {:?}", other.dtype()))),
        };
        Ok(Self {
            frames: frames.try_into().expect("three frames"),
            gt,
            objects: Vec::new(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_is_bit_identical() {
        let cfg = GenConfig::default();
        let a = gen_synthetic_video(7, &cfg).unwrap();
        let b = gen_synthetic_video(7, &cfg).unwrap();
        assert_eq!(a, b);
        let c = gen_synthetic_video(8, &cfg).unwrap();
        assert_ne!(a.frames[2].data(), c.frames[2].data());
    }

    #[test]
    fn no_objects_is_all_background() {
        let cfg = GenConfig {
            objects: 0,
            ..GenConfig::default()
        };
        let s = gen_synthetic_video(1, &cfg).unwrap();
        assert!(s.gt.data().iter().all(|&l| l == 0));
    }

    #[test]
    fn declared_shift_translates_the_mask() {
        let cfg = GenConfig::default();
        let obj = ObjectSpec {
            class: 1,
            shape: Shape::Ellipse,
            top: 20,
            left: 20,
            height: 14,
            width: 10,
            color: [1.0, 0.0, 0.0],
            shift: (0, 2),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let s = render(&cfg, vec![obj], &mut rng).unwrap();
        let (h, w) = (64, 64);
        let now = obj.mask(0, h, w);
        let before = obj.mask(1, h, w);
        for r in 0..h {
            for c in 2..w {
                assert_eq!(now[r * w + c], before[r * w + c - 2]);
            }
        }
        let gt_mask: Vec<bool> = s.gt.data().iter().map(|&l| l == 1).collect();
        assert_eq!(gt_mask, now);
    }

    #[test]
    fn frames_differ_only_by_shift_and_noise() {
        let cfg = GenConfig {
            noise: 0.05,
            ..GenConfig::default()
        };
        let s = gen_synthetic_video(3, &cfg).unwrap();
        let n = 64 * 64;
        for px in 0..n {
            let (r, c) = (px / 64, px % 64);
            for back in 0..3 {
                let colour = s
                    .objects
                    .iter()
                    .rev()
                    .find(|o| o.covers(back, r, c))
                    .map_or(PALETTE[0], |o| o.color);
                for ch in 0..3 {
                    let v = s.frames[2 - back].data()[ch * n + px];
                    assert!((v - colour[ch]).abs() <= 0.05 + 1e-6);
                }
            }
        }
    }

    #[test]
    fn labels_are_in_range_and_objects_disjoint() {
        let cfg = GenConfig {
            objects: 4,
            grid: 8,
            min_size: 16,
            max_size: 24,
            ..GenConfig::default()
        };
        for seed in 0..20 {
            let s = gen_synthetic_video(seed, &cfg).unwrap();
            assert!(s.gt.data().iter().all(|&l| l < 4));
            for (i, a) in s.objects.iter().enumerate() {
                assert_eq!(a.top % 8, 0);
                assert_eq!(a.height % 8, 0);
                for b in &s.objects[i + 1..] {
                    assert!(!a.overlaps(b));
                }
            }
        }
    }

    #[test]
    fn overcrowded_frames_are_rejected() {
        let cfg = GenConfig {
            objects: 30,
            min_size: 24,
            max_size: 32,
            ..GenConfig::default()
        };
        assert!(matches!(gen_synthetic_video(1, &cfg), Err(Error::Parameter(_))));
        let bad = GenConfig {
            height: 60,
            ..GenConfig::default()
        };
        assert!(gen_synthetic_video(1, &bad).is_err());
    }

    #[test]
    fn motion_coded_classes_share_colour() {
        let cfg = GenConfig {
            motion_coded: true,
            objects: 4,
            ..GenConfig::default()
        };
        for seed in 0..20 {
            for o in gen_synthetic_video(seed, &cfg).unwrap().objects {
                match o.class {
                    3 => {
                        assert_ne!(o.shift, (0, 0));
                        assert_eq!(o.color, PALETTE[2]);
                    }
                    2 => {
                        assert_eq!(o.shift, (0, 0));
                        assert_eq!(o.color, PALETTE[2]);
                    }
                    _ => {}
                }
            }
        }
    }

    #[test]
    fn flip_mirrors_columns() {
        let s = gen_synthetic_video(2, &GenConfig::default()).unwrap();
        let f = s.flipped();
        assert_eq!(f.gt.at(&[5, 0]), s.gt.at(&[5, 63]));
        assert_eq!(f.frames[1].at(&[2, 7, 10]), s.frames[1].at(&[2, 7, 53]));
        assert_eq!(f.flipped().gt, s.gt);
    }

    #[test]
    fn clip_files_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let s = gen_synthetic_video(4, &GenConfig::default()).unwrap();
        s.write(dir.path()).unwrap();
        let back = SyntheticSequence::read(dir.path()).unwrap();
        assert_eq!(back.frames, s.frames);
        assert_eq!(back.gt, s.gt);
    }
}
