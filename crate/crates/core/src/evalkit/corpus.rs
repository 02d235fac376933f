//! Procedural images of colored shapes on textured backgrounds.

use diffcore::Tensor;
use rand::Rng;

use crate::error::{CloveError, Result};
use crate::rng::{stream, TAG_CORPUS};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ShapeClass {
    Circle = 0,
    Rect = 1,
    Triangle = 2,
}

pub const N_CLASSES: usize = 3;

impl ShapeClass {
    pub fn from_index(i: usize) -> Self {
        match i % N_CLASSES {
            0 => ShapeClass::Circle,
            1 => ShapeClass::Rect,
            _ => ShapeClass::Triangle,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Shape {
    pub class: ShapeClass,
    /// Canonical center in `[0,1]²`.
    pub center: (f64, f64),
    /// Half extent as a fraction of the image side.
    pub size: f64,
    pub hue: f64,
    pub rgb: [f32; 3],
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticImage {
    pub id: u64,
    /// `[3,H,W]` in `[0,1]`.
    pub image: Tensor,
    pub shapes: Vec<Shape>,
    /// Per pixel: 0 for background, `k+1` for `shapes[k]`.
    pub regions: Vec<u8>,
}

impl SyntheticImage {
    /// Class covering the most visible pixels; ties go to the lower class.
    pub fn dominant_class(&self) -> ShapeClass {
        let mut area = [0usize; N_CLASSES];
        for &r in &self.regions {
            if r > 0 {
                area[self.shapes[r as usize - 1].class as usize] += 1;
            }
        }
        let best = (0..N_CLASSES).fold(0, |b, c| if area[c] > area[b] { c } else { b });
        ShapeClass::from_index(best)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Eval,
}

impl Split {
    fn base(self) -> u64 {
        match self {
            Split::Train => 0,
            Split::Eval => 1 << 32,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CorpusProfile {
    pub resolution: usize,
    pub min_shapes: usize,
    pub max_shapes: usize,
}

impl Default for CorpusProfile {
    fn default() -> Self {
        Self {
            resolution: 32,
            min_shapes: 2,
            max_shapes: 5,
        }
    }
}

pub fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f32; 3] {
    let h6 = h.rem_euclid(1.0) * 6.0;
    let c = v * s;
    let x = c * (1.0 - (h6 % 2.0 - 1.0).abs());
    let (r, g, b) = match h6 as usize {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [(r + m) as f32, (g + m) as f32, (b + m) as f32]
}

fn inside(shape: &Shape, x: f64, y: f64) -> bool {
    let (cx, cy) = shape.center;
    let (dx, dy) = (x - cx, y - cy);
    let s = shape.size;
    match shape.class {
        ShapeClass::Circle => dx * dx + dy * dy <= s * s,
        ShapeClass::Rect => dx.abs() <= s && dy.abs() <= s * 0.75,
        // upward isosceles triangle inscribed in the size box
        ShapeClass::Triangle => dy <= s && dy >= -s && dx.abs() <= (dy + s) * 0.5,
    }
}

fn render(id: u64, rng: &mut impl Rng, p: &CorpusProfile) -> SyntheticImage {
    let n = p.resolution;
    let bg_hue: f64 = rng.gen();
    let bg = hsv_to_rgb(bg_hue, rng.gen_range(0.05..0.25), rng.gen_range(0.3..0.6));
    let angle: f64 = rng.gen_range(0.0..std::f64::consts::PI);
    let freq: f64 = rng.gen_range(3.0..8.0);
    let phase: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
    let amp: f32 = rng.gen_range(0.04..0.12);

    let count = rng.gen_range(p.min_shapes..=p.max_shapes);
    let offset: f64 = rng.gen();
    let shapes: Vec<Shape> = (0..count)
        .map(|k| {
            let hue = (offset + (k as f64 + rng.gen_range(0.0..0.5)) / count as f64).rem_euclid(1.0);
            Shape {
                class: ShapeClass::from_index(rng.gen_range(0..N_CLASSES)),
                center: (rng.gen_range(0.15..0.85), rng.gen_range(0.15..0.85)),
                size: rng.gen_range(0.1..0.25),
                hue,
                rgb: hsv_to_rgb(hue, rng.gen_range(0.7..1.0), rng.gen_range(0.7..1.0)),
            }
        })
        .collect();

    let mut data = vec![0.0f32; 3 * n * n];
    let mut regions = vec![0u8; n * n];
    let (ca, sa) = (angle.cos(), angle.sin());
    for py in 0..n {
        for px in 0..n {
            let (x, y) = ((px as f64 + 0.5) / n as f64, (py as f64 + 0.5) / n as f64);
            let stripe = ((x * ca + y * sa) * freq * std::f64::consts::TAU + phase).sin() as f32;
            let noise: f32 = rng.gen_range(-0.03..0.03);
            let mut rgb = bg.map(|c| c + amp * stripe + noise);
            for (k, s) in shapes.iter().enumerate() {
                if inside(s, x, y) {
                    rgb = s.rgb.map(|c| c + noise);
                    regions[py * n + px] = k as u8 + 1;
                }
            }
            for c in 0..3 {
                data[c * n * n + py * n + px] = rgb[c].clamp(0.0, 1.0);
            }
        }
    }
    SyntheticImage {
        id,
        image: Tensor::new(vec![3, n, n], data).expect("shape matches"),
        shapes,
        regions,
    }
}

/// One image, a pure function of `(seed, split, index)`.
pub fn generate_image(seed: u64, split: Split, index: usize, profile: &CorpusProfile) -> SyntheticImage {
    let id = split.base() + index as u64;
    render(id, &mut stream(seed, &[TAG_CORPUS, id]), profile)
}

pub fn generate_corpus(n: usize, seed: u64, split: Split, profile: &CorpusProfile) -> Result<Vec<SyntheticImage>> {
    if n == 0 {
        return Err(CloveError::config("data.size", "corpus needs at least one image"));
    }
    if profile.resolution < 4 || profile.min_shapes == 0 || profile.min_shapes > profile.max_shapes || profile.max_shapes > 250 {
        return Err(CloveError::config("data", "invalid corpus profile"));
    }
    Ok((0..n).map(|i| generate_image(seed, split, i, profile)).collect())
}
