//! Stochastic views with exact coordinate bookkeeping.
//!
//! A view is produced by crop → resize → horizontal flip, followed by
//! photometric jitter that never touches geometry. Every view carries the
//! [`ViewGeometry`] that maps its pixels back to the canonical frame: the
//! original image with both axes normalized to `[0, 1]`.

use diffcore::Tensor;
use rand::Rng;

use crate::error::{CloveError, Result};

/// A location in the original image, normalized by its width and height.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CanonicalPoint {
    pub x: f64,
    pub y: f64,
}

impl CanonicalPoint {
    pub fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    /// Inside the original frame.
    pub fn in_frame(&self) -> bool {
        (0.0..=1.0).contains(&self.x) && (0.0..=1.0).contains(&self.y)
    }

    pub fn distance(&self, other: &CanonicalPoint) -> f64 {
        ((self.x - other.x).powi(2) + (self.y - other.y).powi(2)).sqrt()
    }
}

/// Crop box (fractions of the original), flip flag and output resolution.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ViewGeometry {
    pub left: f64,
    pub top: f64,
    pub width: f64,
    pub height: f64,
    pub flip: bool,
    pub out_h: usize,
    pub out_w: usize,
}

const FRAME_SLACK: f64 = 1e-9;

impl ViewGeometry {
    pub fn new(left: f64, top: f64, width: f64, height: f64, flip: bool, out_h: usize, out_w: usize) -> Result<Self> {
        let g = Self {
            left,
            top,
            width,
            height,
            flip,
            out_h,
            out_w,
        };
        g.validate()?;
        Ok(g)
    }

    pub fn identity(out_h: usize, out_w: usize) -> Self {
        Self {
            left: 0.0,
            top: 0.0,
            width: 1.0,
            height: 1.0,
            flip: false,
            out_h,
            out_w,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.left, self.top, self.width, self.height]
            .iter()
            .all(|v| v.is_finite());
        let inside = self.left >= -FRAME_SLACK
            && self.top >= -FRAME_SLACK
            && self.left + self.width <= 1.0 + FRAME_SLACK
            && self.top + self.height <= 1.0 + FRAME_SLACK;
        if !finite || self.width <= 0.0 || self.height <= 0.0 || !inside || self.out_h == 0 || self.out_w == 0 {
            return Err(CloveError::Contract(format!("invalid view geometry {self:?}")));
        }
        Ok(())
    }

    /// Same crop with the flip flag toggled.
    pub fn flipped(&self) -> Self {
        Self {
            flip: !self.flip,
            ..*self
        }
    }

    /// Canonical location sampled by the view-pixel coordinate `(px, py)`,
    /// where pixel `(i, j)` covers `[i, i+1) × [j, j+1)`.
    pub fn view_to_canonical(&self, px: f64, py: f64) -> CanonicalPoint {
        let mut u = px / self.out_w as f64;
        let v = py / self.out_h as f64;
        if self.flip {
            u = 1.0 - u;
        }
        CanonicalPoint::new(self.left + u * self.width, self.top + v * self.height)
    }

    /// Forward map: view-pixel coordinate of a canonical location.
    pub fn canonical_to_view(&self, p: CanonicalPoint) -> (f64, f64) {
        let mut u = (p.x - self.left) / self.width;
        let v = (p.y - self.top) / self.height;
        if self.flip {
            u = 1.0 - u;
        }
        (u * self.out_w as f64, v * self.out_h as f64)
    }
}

/// Free-function form of [`ViewGeometry::view_to_canonical`].
pub fn view_point_to_canonical(geom: &ViewGeometry, px: f64, py: f64) -> CanonicalPoint {
    geom.view_to_canonical(px, py)
}

/// Photometric parameters actually applied to a view.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Photometric {
    pub brightness: f32,
    pub contrast: f32,
    pub saturation: f32,
    pub jittered: bool,
    pub grayscale: bool,
}

impl Photometric {
    pub fn none() -> Self {
        Self {
            brightness: 1.0,
            contrast: 1.0,
            saturation: 1.0,
            jittered: false,
            grayscale: false,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ViewRecord {
    /// `[3, out_h, out_w]`, values in `[0, 1]`.
    pub image: Tensor,
    pub geometry: ViewGeometry,
    pub photometric: Photometric,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AugmentProfile {
    /// Range of crop area as a fraction of the original area.
    pub crop_scale: (f64, f64),
    pub aspect: (f64, f64),
    pub flip_prob: f64,
    pub jitter_prob: f64,
    pub brightness: f32,
    pub contrast: f32,
    pub saturation: f32,
    pub grayscale_prob: f64,
    pub out_h: usize,
    pub out_w: usize,
}

impl AugmentProfile {
    /// Crop/flip/color-jitter/grayscale recipe for global views.
    pub fn global(resolution: usize) -> Self {
        Self {
            crop_scale: (0.08, 1.0),
            aspect: (3.0 / 4.0, 4.0 / 3.0),
            flip_prob: 0.5,
            jitter_prob: 0.8,
            brightness: 0.4,
            contrast: 0.4,
            saturation: 0.2,
            grayscale_prob: 0.2,
            out_h: resolution,
            out_w: resolution,
        }
    }

    /// Small low-resolution crops for multi-crop training.
    pub fn local(resolution: usize) -> Self {
        Self {
            crop_scale: (0.05, 0.4),
            ..Self::global(resolution)
        }
    }

    /// Full crop, no flip, no jitter.
    pub fn identity(resolution: usize) -> Self {
        Self {
            crop_scale: (1.0, 1.0),
            aspect: (1.0, 1.0),
            flip_prob: 0.0,
            jitter_prob: 0.0,
            brightness: 0.0,
            contrast: 0.0,
            saturation: 0.0,
            grayscale_prob: 0.0,
            out_h: resolution,
            out_w: resolution,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.crop_scale;
        let (alo, ahi) = self.aspect;
        let probs = [self.flip_prob, self.jitter_prob, self.grayscale_prob];
        if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
            return Err(CloveError::config("aug.crop_scale", format!("need 0 < min <= max <= 1, got {lo}..{hi}")));
        }
        if !(alo > 0.0 && alo <= ahi) {
            return Err(CloveError::config("aug.aspect", "need 0 < min <= max"));
        }
        if probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(CloveError::config("aug", "probabilities must lie in [0, 1]"));
        }
        if self.out_h == 0 || self.out_w == 0 {
            return Err(CloveError::config("aug.resolution", "must be positive"));
        }
        Ok(())
    }
}

/// Global and local profiles used by [`make_multicrop`].
#[derive(Debug, Clone, PartialEq)]
pub struct MultiCrop {
    pub global: AugmentProfile,
    pub local: AugmentProfile,
}

impl MultiCrop {
    pub fn new(global_resolution: usize) -> Self {
        Self {
            global: AugmentProfile::global(global_resolution),
            local: AugmentProfile::local((global_resolution / 2).max(1)),
        }
    }
}

fn image_dims(image: &Tensor) -> Result<(usize, usize)> {
    match image.shape() {
        [3, h, w] => Ok((*h, *w)),
        s => Err(CloveError::Contract(format!("expected a [3,H,W] image, got {s:?}"))),
    }
}

const CROP_ATTEMPTS: usize = 10;

/// Random-resized-crop box in canonical fractions; falls back to the full
/// frame when no attempt fits.
fn sample_crop(rng: &mut impl Rng, h: usize, w: usize, p: &AugmentProfile) -> (f64, f64, f64, f64) {
    let area = (h * w) as f64;
    let (ln_lo, ln_hi) = (p.aspect.0.ln(), p.aspect.1.ln());
    for _ in 0..CROP_ATTEMPTS {
        let scale = if p.crop_scale.0 < p.crop_scale.1 {
            rng.gen_range(p.crop_scale.0..=p.crop_scale.1)
        } else {
            p.crop_scale.0
        };
        let ratio = if ln_lo < ln_hi {
            rng.gen_range(ln_lo..=ln_hi).exp()
        } else {
            p.aspect.0
        };
        let cw = (scale * area * ratio).sqrt();
        let ch = (scale * area / ratio).sqrt();
        // at least one source pixel per side, never zero area
        if cw >= 1.0 && ch >= 1.0 && cw <= w as f64 && ch <= h as f64 {
            let left = if cw < w as f64 { rng.gen_range(0.0..=(w as f64 - cw)) } else { 0.0 };
            let top = if ch < h as f64 { rng.gen_range(0.0..=(h as f64 - ch)) } else { 0.0 };
            return (left / w as f64, top / h as f64, cw / w as f64, ch / h as f64);
        }
    }
    (0.0, 0.0, 1.0, 1.0)
}

/// Crop, resize (bilinear, edge-clamped) and flip `image` per `geom`.
pub fn render_view(image: &Tensor, geom: &ViewGeometry) -> Result<Tensor> {
    let (h, w) = image_dims(image)?;
    geom.validate()?;
    let (oh, ow) = (geom.out_h, geom.out_w);
    let src = image.data();
    let mut out = vec![0.0f32; 3 * oh * ow];
    for oy in 0..oh {
        for ox in 0..ow {
            let p = geom.view_to_canonical(ox as f64 + 0.5, oy as f64 + 0.5);
            let sx = (p.x * w as f64 - 0.5).clamp(0.0, (w - 1) as f64);
            let sy = (p.y * h as f64 - 0.5).clamp(0.0, (h - 1) as f64);
            let (x0, y0) = (sx.floor() as usize, sy.floor() as usize);
            let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
            let (fx, fy) = (sx - x0 as f64, sy - y0 as f64);
            for c in 0..3 {
                let plane = &src[c * h * w..(c + 1) * h * w];
                let top = plane[y0 * w + x0] as f64 * (1.0 - fx) + plane[y0 * w + x1] as f64 * fx;
                let bot = plane[y1 * w + x0] as f64 * (1.0 - fx) + plane[y1 * w + x1] as f64 * fx;
                out[(c * oh + oy) * ow + ox] = (top * (1.0 - fy) + bot * fy) as f32;
            }
        }
    }
    Ok(Tensor::new(vec![3, oh, ow], out)?)
}

fn luma(r: f32, g: f32, b: f32) -> f32 {
    0.299 * r + 0.587 * g + 0.114 * b
}

fn jitter_factor(rng: &mut impl Rng, strength: f32) -> f32 {
    if strength > 0.0 {
        rng.gen_range((1.0 - strength).max(0.0)..=1.0 + strength)
    } else {
        1.0
    }
}

/// Applies color jitter and grayscale in place; geometry is untouched.
pub fn apply_photometric(image: &mut Tensor, params: &Photometric) {
    let n = image.numel() / 3;
    let data = image.data_mut();
    if params.jittered {
        for v in data.iter_mut() {
            *v = (*v * params.brightness).clamp(0.0, 1.0);
        }
        let mean_gray = (0..n)
            .map(|i| luma(data[i], data[n + i], data[2 * n + i]) as f64)
            .sum::<f64>() as f32
            / n as f32;
        for v in data.iter_mut() {
            *v = ((*v - mean_gray) * params.contrast + mean_gray).clamp(0.0, 1.0);
        }
        for i in 0..n {
            let gray = luma(data[i], data[n + i], data[2 * n + i]);
            for c in 0..3 {
                let v = &mut data[c * n + i];
                *v = ((*v - gray) * params.saturation + gray).clamp(0.0, 1.0);
            }
        }
    }
    if params.grayscale {
        for i in 0..n {
            let gray = luma(data[i], data[n + i], data[2 * n + i]);
            for c in 0..3 {
                data[c * n + i] = gray;
            }
        }
    }
}

/// Draws one augmented view of a `[3,H,W]` image in `[0,1]`.
pub fn sample_view(image: &Tensor, rng: &mut impl Rng, profile: &AugmentProfile) -> Result<ViewRecord> {
    let (h, w) = image_dims(image)?;
    if h < 1 || w < 1 {
        return Err(CloveError::Contract("image too small to crop".into()));
    }
    profile.validate()?;
    let (left, top, width, height) = sample_crop(rng, h, w, profile);
    let flip = profile.flip_prob > 0.0 && rng.gen_bool(profile.flip_prob);
    let geometry = ViewGeometry::new(left, top, width, height, flip, profile.out_h, profile.out_w)?;
    let mut view = render_view(image, &geometry)?;

    let mut photometric = Photometric::none();
    if profile.jitter_prob > 0.0 && rng.gen_bool(profile.jitter_prob) {
        photometric.jittered = true;
        photometric.brightness = jitter_factor(rng, profile.brightness);
        photometric.contrast = jitter_factor(rng, profile.contrast);
        photometric.saturation = jitter_factor(rng, profile.saturation);
    }
    photometric.grayscale = profile.grayscale_prob > 0.0 && rng.gen_bool(profile.grayscale_prob);
    apply_photometric(&mut view, &photometric);

    Ok(ViewRecord {
        image: view,
        geometry,
        photometric,
    })
}

/// `n_global` full-resolution views followed by `n_local` small crops.
pub fn make_multicrop(
    image: &Tensor,
    rng: &mut impl Rng,
    n_global: usize,
    n_local: usize,
    profiles: &MultiCrop,
) -> Result<Vec<ViewRecord>> {
    let mut views = Vec::with_capacity(n_global + n_local);
    for _ in 0..n_global {
        views.push(sample_view(image, rng, &profiles.global)?);
    }
    for _ in 0..n_local {
        views.push(sample_view(image, rng, &profiles.local)?);
    }
    Ok(views)
}
