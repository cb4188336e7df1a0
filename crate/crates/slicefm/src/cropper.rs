//! Background detection and content-aware multi-crop generation.
//!
//! A pixel is background iff its intensity is below `tau_bg` AND the
//! standard deviation of its k x k neighborhood is below `tau_var`. Images
//! with more than half background are discarded outright; crops are
//! rejection-sampled against a 70% background budget with a flagged
//! best-effort fallback after `max_attempts`.

use crate::dataio::{SliceImage, Volume};
use crate::error::{Error, Result};
use crate::util::{bilinear_resize, gaussian_blur, Integral2D};
use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub const MIN_CROP_PX: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CropKind {
    Global,
    Local,
}

#[derive(Clone, Debug)]
pub struct CropBox {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
    pub bg_fraction: f64,
    pub kind: CropKind,
    /// True when no attempt met the background budget and this is the
    /// minimum-background attempt instead.
    pub fallback: bool,
}

/// One crop's resized pixels plus the geometry it came from.
#[derive(Clone, Debug)]
pub struct CropView {
    pub pixels: Array2<f64>,
    pub bbox: CropBox,
}

#[derive(Clone, Debug)]
pub struct MultiCropSet {
    /// Exactly 2, resized to (r_g, r_g). Offsets for the masker live in
    /// each crop's bbox.
    pub globals: Vec<CropView>,
    /// Exactly 8, resized to (r_l, r_l).
    pub locals: Vec<CropView>,
    pub source: (String, usize),
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct JitterConfig {
    /// Probability of applying brightness/contrast jitter to a crop.
    pub p_photo: f64,
    pub brightness: f64,
    pub contrast: f64,
    pub p_blur: f64,
    pub blur_sigma: [f64; 2],
}

impl Default for JitterConfig {
    fn default() -> Self {
        Self {
            p_photo: 0.8,
            brightness: 0.2,
            contrast: 0.2,
            p_blur: 0.5,
            blur_sigma: [0.1, 1.2],
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct CropConfig {
    pub tau_bg: f64,
    pub tau_var: f64,
    /// Side of the neighborhood window for the variance test.
    pub var_window: usize,
    pub max_attempts: usize,
    /// Reject an image iff its background fraction exceeds this.
    pub admit_max_bg: f64,
    /// Accept a crop iff its background fraction is at most this.
    pub crop_max_bg: f64,
    pub global_scale: [f64; 2],
    pub local_scale: [f64; 2],
    #[serde(rename = "R_g")]
    pub r_g: usize,
    #[serde(rename = "R_l")]
    pub r_l: usize,
    pub jitter: JitterConfig,
}

impl Default for CropConfig {
    fn default() -> Self {
        Self {
            tau_bg: 0.05,
            tau_var: 0.01,
            var_window: 5,
            max_attempts: 20,
            admit_max_bg: 0.5,
            crop_max_bg: 0.7,
            global_scale: [0.32, 1.0],
            local_scale: [0.05, 0.32],
            r_g: 32,
            r_l: 16,
            jitter: JitterConfig::default(),
        }
    }
}

impl CropConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.r_l < self.r_g) {
            return Err(Error::validation("R_l", "local resolution must be below global"));
        }
        if self.var_window == 0 || self.var_window % 2 == 0 {
            return Err(Error::validation("var_window", "must be odd and positive"));
        }
        if self.max_attempts == 0 {
            return Err(Error::validation("max_attempts", "must be >= 1"));
        }
        for (name, [lo, hi]) in [("global_scale", self.global_scale), ("local_scale", self.local_scale)] {
            if !(0.0 < lo && lo <= hi && hi <= 1.0) {
                return Err(Error::validation(name, "need 0 < lo <= hi <= 1"));
            }
        }
        Ok(())
    }
}

/// true = background. Total and deterministic.
pub fn background_mask(pixels: &Array2<f64>, cfg: &CropConfig) -> Array2<bool> {
    let (h, w) = pixels.dim();
    let i1 = Integral2D::new(pixels);
    let i2 = Integral2D::new(&pixels.mapv(|x| x * x));
    let r = cfg.var_window / 2;
    Array2::from_shape_fn((h, w), |(i, j)| {
        if pixels[[i, j]] >= cfg.tau_bg {
            return false;
        }
        let r0 = i.saturating_sub(r);
        let r1 = (i + r + 1).min(h);
        let c0 = j.saturating_sub(r);
        let c1 = (j + r + 1).min(w);
        let n = ((r1 - r0) * (c1 - c0)) as f64;
        let mean = i1.box_sum(r0, c0, r1, c1) / n;
        let var = (i2.box_sum(r0, c0, r1, c1) / n - mean * mean).max(0.0);
        var.sqrt() < cfg.tau_var
    })
}

pub fn bg_fraction(mask: &Array2<bool>) -> f64 {
    mask.iter().filter(|&&b| b).count() as f64 / mask.len() as f64
}

/// Build a SliceImage, deriving its foreground mask from the pixels.
pub fn make_slice_image(pixels: Array2<f64>, source: (String, usize), cfg: &CropConfig) -> SliceImage {
    let foreground = background_mask(&pixels, cfg).mapv(|b| !b);
    SliceImage { pixels, foreground, source }
}

pub fn slice_from_volume(
    v: &Volume,
    id: &str,
    idx: usize,
    norm: &crate::dataio::NormalizeConfig,
    cfg: &CropConfig,
) -> Result<SliceImage> {
    let pixels = v.slice_normalized(idx, norm)?;
    Ok(make_slice_image(pixels, (id.to_string(), idx), cfg))
}

/// Keep an image iff its background fraction does not exceed the admit
/// threshold (strict "more than half is discarded" semantics).
pub fn admit_image(img: &SliceImage, cfg: &CropConfig) -> bool {
    let bg = 1.0 - img.foreground.iter().filter(|&&b| b).count() as f64 / img.foreground.len() as f64;
    bg <= cfg.admit_max_bg
}

/// Rejection-sample a crop box under the background budget.
pub fn sample_crop(
    img: &SliceImage,
    kind: CropKind,
    scale_range: [f64; 2],
    cfg: &CropConfig,
    rng: &mut ChaCha8Rng,
) -> Result<CropBox> {
    let (h, w) = img.pixels.dim();
    if h < MIN_CROP_PX || w < MIN_CROP_PX {
        return Err(Error::geometry(format!(
            "image {h}x{w} below minimum crop size {MIN_CROP_PX}"
        )));
    }
    let fg_integral = Integral2D::from_bool(&img.foreground);
    let mut best: Option<CropBox> = None;
    for _ in 0..cfg.max_attempts {
        let area_frac = rng.gen_range(scale_range[0]..=scale_range[1]);
        let aspect = rng.gen_range(0.75..=4.0 / 3.0);
        let area = area_frac * (h * w) as f64;
        let ch = ((area / aspect).sqrt().round() as usize).clamp(MIN_CROP_PX, h);
        let cw = ((area * aspect).sqrt().round() as usize).clamp(MIN_CROP_PX, w);
        let top = rng.gen_range(0..=h - ch);
        let left = rng.gen_range(0..=w - cw);
        let fg = fg_integral.box_sum(top, left, top + ch, left + cw);
        let bg = 1.0 - fg / (ch * cw) as f64;
        let cand = CropBox { top, left, height: ch, width: cw, bg_fraction: bg, kind, fallback: false };
        if bg <= cfg.crop_max_bg {
            return Ok(cand);
        }
        if best.as_ref().map_or(true, |b| bg < b.bg_fraction) {
            best = Some(cand);
        }
    }
    let mut fb = best.expect("max_attempts >= 1");
    fb.fallback = true;
    Ok(fb)
}

fn extract_resized(img: &SliceImage, b: &CropBox, out: usize) -> Array2<f64> {
    let patch = img
        .pixels
        .slice(ndarray::s![b.top..b.top + b.height, b.left..b.left + b.width])
        .to_owned();
    bilinear_resize(&patch, out, out)
}

fn apply_jitter(pixels: &mut Array2<f64>, jit: &JitterConfig, rng: &mut ChaCha8Rng) {
    if rng.gen_bool(jit.p_photo.clamp(0.0, 1.0)) {
        let b = rng.gen_range(-jit.brightness..=jit.brightness);
        let c = rng.gen_range(1.0 - jit.contrast..=1.0 + jit.contrast);
        let mean = pixels.mean().unwrap_or(0.0);
        pixels.mapv_inplace(|x| (x - mean) * c + mean + b);
    }
    if rng.gen_bool(jit.p_blur.clamp(0.0, 1.0)) {
        let sigma = rng.gen_range(jit.blur_sigma[0]..=jit.blur_sigma[1]);
        *pixels = gaussian_blur(pixels, sigma);
    }
    pixels.mapv_inplace(|x| x.clamp(0.0, 1.0));
}

/// 2 global + 8 local jittered crops of one admitted image.
pub fn make_multicrop(img: &SliceImage, cfg: &CropConfig, rng: &mut ChaCha8Rng) -> Result<MultiCropSet> {
    let mut globals = Vec::with_capacity(2);
    for _ in 0..2 {
        let b = sample_crop(img, CropKind::Global, cfg.global_scale, cfg, rng)?;
        let mut pixels = extract_resized(img, &b, cfg.r_g);
        apply_jitter(&mut pixels, &cfg.jitter, rng);
        globals.push(CropView { pixels, bbox: b });
    }
    let mut locals = Vec::with_capacity(8);
    for _ in 0..8 {
        let b = sample_crop(img, CropKind::Local, cfg.local_scale, cfg, rng)?;
        let mut pixels = extract_resized(img, &b, cfg.r_l);
        apply_jitter(&mut pixels, &cfg.jitter, rng);
        locals.push(CropView { pixels, bbox: b });
    }
    Ok(MultiCropSet { globals, locals, source: img.source.clone() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::{generate_phantoms, NormalizeConfig, PhantomSpec};
    use crate::util::stream_rng;

    fn cfg() -> CropConfig {
        CropConfig::default()
    }

    fn disk_image(size: usize, radius_frac: f64) -> SliceImage {
        let c = size as f64 / 2.0;
        let r = radius_frac * size as f64;
        let pixels = Array2::from_shape_fn((size, size), |(i, j)| {
            let (di, dj) = (i as f64 + 0.5 - c, j as f64 + 0.5 - c);
            if di * di + dj * dj <= r * r {
                0.8
            } else {
                0.0
            }
        });
        make_slice_image(pixels, ("disk".into(), 0), &cfg())
    }

    #[test]
    fn background_mask_extremes() {
        let zeros = Array2::zeros((16, 16));
        assert!(background_mask(&zeros, &cfg()).iter().all(|&b| b));
        let ones = Array2::from_elem((16, 16), 1.0);
        assert!(background_mask(&ones, &cfg()).iter().all(|&b| !b));
    }

    #[test]
    fn background_mask_flips_for_uniform_binary_images() {
        let c = cfg();
        for img in [Array2::zeros((12, 12)), Array2::from_elem((12, 12), 1.0)] {
            let m = background_mask(&img, &c);
            let flipped = background_mask(&img.mapv(|x| 1.0 - x), &c);
            assert!(m.iter().zip(flipped.iter()).all(|(&a, &b)| a != b));
        }
    }

    #[test]
    fn split_image_bg_fraction_near_half() {
        let c = cfg();
        let n = 32;
        let img = Array2::from_shape_fn((n, n), |(_, j)| if j < n / 2 { 0.0 } else { 1.0 });
        let frac = bg_fraction(&background_mask(&img, &c));
        assert!(
            (frac - 0.5).abs() <= c.var_window as f64 / n as f64,
            "fraction {frac}"
        );
    }

    #[test]
    fn admit_boundary_is_strict() {
        let c = cfg();
        let pixels = Array2::zeros((8, 8));
        let mut foreground = Array2::from_elem((8, 8), false);
        for i in 0..8 {
            for j in 0..4 {
                foreground[[i, j]] = true;
            }
        }
        // Exactly half background: admitted ("more than" is strict).
        let img = SliceImage { pixels: pixels.clone(), foreground, source: ("t".into(), 0) };
        assert!(admit_image(&img, &c));
        let mut fg = img.foreground.clone();
        fg[[0, 0]] = false;
        let img = SliceImage { pixels, foreground: fg, source: ("t".into(), 0) };
        assert!(!admit_image(&img, &c));
    }

    #[test]
    fn sample_crop_fully_foreground_accepts_first() {
        let c = cfg();
        let pixels = Array2::from_elem((32, 32), 0.9);
        let img = make_slice_image(pixels, ("fg".into(), 0), &c);
        let mut rng = stream_rng(5, &[1]);
        let b = sample_crop(&img, CropKind::Global, c.global_scale, &c, &mut rng).unwrap();
        assert_eq!(b.bg_fraction, 0.0);
        assert!(!b.fallback);
        assert!(b.top + b.height <= 32 && b.left + b.width <= 32);
    }

    #[test]
    fn sample_crop_is_deterministic() {
        let c = cfg();
        let img = disk_image(48, 0.33);
        let seq = |seed: u64| {
            let mut rng = stream_rng(seed, &[2]);
            (0..20)
                .map(|_| {
                    let b = sample_crop(&img, CropKind::Local, c.local_scale, &c, &mut rng).unwrap();
                    (b.top, b.left, b.height, b.width)
                })
                .collect::<Vec<_>>()
        };
        assert_eq!(seq(9), seq(9));
        assert_ne!(seq(9), seq(10));
    }

    #[test]
    fn crop_budget_or_flagged_fallback() {
        let c = cfg();
        // Disk covering ~35% of the image area.
        let img = disk_image(48, (0.35f64 / std::f64::consts::PI).sqrt());
        let mut rng = stream_rng(11, &[3]);
        let mut fallbacks = 0usize;
        for _ in 0..2000 {
            let b = sample_crop(&img, CropKind::Global, c.global_scale, &c, &mut rng).unwrap();
            if !b.fallback {
                assert!(b.bg_fraction <= c.crop_max_bg, "bg {}", b.bg_fraction);
            } else {
                fallbacks += 1;
            }
        }
        println!("fallback rate: {}", fallbacks as f64 / 2000.0);
    }

    #[test]
    fn multicrop_shapes_and_pure_resample_mode() {
        let mut c = cfg();
        c.jitter.p_photo = 0.0;
        c.jitter.p_blur = 0.0;
        let img = disk_image(48, 0.4);
        let mut rng = stream_rng(3, &[4]);
        let set = make_multicrop(&img, &c, &mut rng).unwrap();
        assert_eq!(set.globals.len(), 2);
        assert_eq!(set.locals.len(), 8);
        for g in &set.globals {
            assert_eq!(g.pixels.dim(), (c.r_g, c.r_g));
            let manual = extract_resized(&img, &g.bbox, c.r_g);
            assert_eq!(g.pixels, manual);
        }
        for l in &set.locals {
            assert_eq!(l.pixels.dim(), (c.r_l, c.r_l));
        }
    }

    #[test]
    fn global_crop_centers_concentrate_on_foreground() {
        let c = cfg();
        let img = disk_image(48, 0.30);
        let mut rng = stream_rng(21, &[5]);
        let (mut sum_r, mut sum_c, mut n) = (0.0, 0.0, 0);
        for _ in 0..300 {
            let set = make_multicrop(&img, &c, &mut rng).unwrap();
            for g in &set.globals {
                sum_r += g.bbox.top as f64 + g.bbox.height as f64 / 2.0;
                sum_c += g.bbox.left as f64 + g.bbox.width as f64 / 2.0;
                n += 1;
            }
        }
        let (mean_r, mean_c) = (sum_r / n as f64, sum_c / n as f64);
        // Foreground bounding box of a centered disk of radius 0.3*48.
        let (lo, hi) = (24.0 - 0.30 * 48.0, 24.0 + 0.30 * 48.0);
        assert!(mean_r > lo && mean_r < hi, "mean row {mean_r}");
        assert!(mean_c > lo && mean_c < hi, "mean col {mean_c}");
    }

    #[test]
    fn high_background_phantoms_have_discarded_central_slices() {
        let spec = PhantomSpec {
            num_volumes: 24,
            grid: [12, 48, 48],
            organ_count: 4,
            background_fraction_range: [0.9, 0.95],
            noise_sigma: 2.0,
            seed: 31,
        };
        let c = cfg();
        let norm = NormalizeConfig::default();
        for (i, v) in generate_phantoms(&spec).unwrap().iter().enumerate() {
            let mid = v.voxels.dim().0 / 2;
            let img = slice_from_volume(v, &format!("p{i}"), mid, &norm, &c).unwrap();
            assert!(
                !admit_image(&img, &c),
                "volume {i} central slice admitted (bg target {:?})",
                v.label_f64("bg_target")
            );
        }
    }
}
