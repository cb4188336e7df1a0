//! Blockwise patch masking with an anatomy-centered Gaussian prior.
//!
//! Block centers are drawn from a truncated discrete Gaussian over an
//! extended placement lattice (blocks may straddle the grid edge and are
//! clipped), which makes the uniform-prior mode exactly uniform per cell.
//! Masks are built by OR-ing blocks until the target patch count is
//! reached, then trimmed farthest-from-center first; ties break randomly so
//! the uniform mode stays uniform.

use crate::cropper::CropBox;
use crate::dataio::SliceImage;
use crate::error::{Error, Result};
use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Geometric};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug)]
pub struct GaussianPrior {
    /// (row, col) in patch-grid units, clamped into the grid.
    pub center: (f64, f64),
    /// Per-axis spread in patch units; infinite sigma = uniform prior.
    pub sigma: (f64, f64),
    /// Center before clamping, kept for offset-correction checks.
    pub raw_center: (f64, f64),
    /// True when the crop held no foreground and defaults were used.
    pub degenerate: bool,
}

#[derive(Clone, Debug)]
pub struct PatchMask {
    pub grid: Array2<bool>,
    pub target_ratio: f64,
    pub realized_ratio: f64,
}

impl PatchMask {
    pub fn masked_count(&self) -> usize {
        self.grid.iter().filter(|&&b| b).count()
    }

    pub fn masked_indices(&self) -> Vec<usize> {
        let (_, gc) = self.grid.dim();
        self.grid
            .indexed_iter()
            .filter(|(_, &b)| b)
            .map(|((r, c), _)| r * gc + c)
            .collect()
    }

    pub fn empty(grid: (usize, usize)) -> Self {
        Self {
            grid: Array2::from_elem(grid, false),
            target_ratio: 0.0,
            realized_ratio: 0.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PriorMode {
    Gaussian,
    Uniform,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct PriorConfig {
    pub mode: PriorMode,
}

impl Default for PriorConfig {
    fn default() -> Self {
        Self { mode: PriorMode::Gaussian }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct MaskConfig {
    pub mask_ratio: f64,
    pub mean_block_area: f64,
    pub aspect_bounds: [f64; 2],
    pub prior: PriorConfig,
}

impl Default for MaskConfig {
    fn default() -> Self {
        Self {
            mask_ratio: 0.4,
            mean_block_area: 4.0,
            aspect_bounds: [0.3, 1.0 / 0.3],
            prior: PriorConfig::default(),
        }
    }
}

impl MaskConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.mask_ratio > 0.0 && self.mask_ratio < 1.0) {
            return Err(Error::validation("mask_ratio", "must be in (0,1)"));
        }
        if !(self.mean_block_area >= 1.0) {
            return Err(Error::validation("mean_block_area", "must be >= 1"));
        }
        let [lo, hi] = self.aspect_bounds;
        if !(0.0 < lo && lo <= hi) {
            return Err(Error::validation("aspect_bounds", "need 0 < lo <= hi"));
        }
        Ok(())
    }
}

/// Prior for a uniform-mode mask over the given grid.
pub fn uniform_prior(grid: (usize, usize)) -> GaussianPrior {
    let center = ((grid.0 as f64 - 1.0) / 2.0, (grid.1 as f64 - 1.0) / 2.0);
    GaussianPrior {
        center,
        sigma: (f64::INFINITY, f64::INFINITY),
        raw_center: center,
        degenerate: false,
    }
}

/// Anatomy prior for one global crop: foreground centroid translated by the
/// crop offset and expressed in the crop's patch units; sigma from the
/// foreground bounding box inside the crop.
pub fn prior_from_crop(img: &SliceImage, crop: &CropBox, grid: (usize, usize)) -> GaussianPrior {
    let (g_r, g_c) = grid;
    let ps_r = crop.height as f64 / g_r as f64;
    let ps_c = crop.width as f64 / g_c as f64;

    let (mut sum_r, mut sum_c, mut n) = (0.0f64, 0.0f64, 0usize);
    for ((i, j), &fg) in img.foreground.indexed_iter() {
        if fg {
            sum_r += i as f64;
            sum_c += j as f64;
            n += 1;
        }
    }
    // Foreground bounding box restricted to the crop, for sigma.
    let (mut rl, mut rh, mut cl, mut ch) = (usize::MAX, 0usize, usize::MAX, 0usize);
    let mut in_crop = 0usize;
    for i in crop.top..crop.top + crop.height {
        for j in crop.left..crop.left + crop.width {
            if img.foreground[[i, j]] {
                rl = rl.min(i);
                rh = rh.max(i);
                cl = cl.min(j);
                ch = ch.max(j);
                in_crop += 1;
            }
        }
    }
    if n == 0 || in_crop == 0 {
        let center = ((g_r as f64 - 1.0) / 2.0, (g_c as f64 - 1.0) / 2.0);
        return GaussianPrior {
            center,
            sigma: (g_r as f64 / 4.0, g_c as f64 / 4.0),
            raw_center: center,
            degenerate: true,
        };
    }
    let raw = (
        (sum_r / n as f64 - crop.top as f64) / ps_r,
        (sum_c / n as f64 - crop.left as f64) / ps_c,
    );
    let center = (
        raw.0.clamp(0.0, g_r as f64 - 1.0),
        raw.1.clamp(0.0, g_c as f64 - 1.0),
    );
    let sigma = (
        (((rh - rl + 1) as f64 / 2.0) / ps_r).max(1.0),
        (((ch - cl + 1) as f64 / 2.0) / ps_c).max(1.0),
    );
    GaussianPrior { center, sigma, raw_center: raw, degenerate: false }
}

/// Normalized prior density per grid cell (constant for infinite sigma).
pub fn prior_density(prior: &GaussianPrior, grid: (usize, usize)) -> Array2<f64> {
    let mut d = Array2::from_shape_fn(grid, |(r, c)| {
        let zr = if prior.sigma.0.is_finite() {
            (r as f64 - prior.center.0) / prior.sigma.0
        } else {
            0.0
        };
        let zc = if prior.sigma.1.is_finite() {
            (c as f64 - prior.center.1) / prior.sigma.1
        } else {
            0.0
        };
        (-0.5 * (zr * zr + zc * zc)).exp()
    });
    let total = d.sum();
    d.mapv_inplace(|x| x / total);
    d
}

pub struct MaskSample {
    pub mask: PatchMask,
    /// Clipped blocks OR-ed together before trimming.
    pub blocks: Vec<(usize, usize, usize, usize)>,
    pub pre_trim: Array2<bool>,
}

// Weighted choice of a block top coordinate over the extended lattice
// [1-len, dim-1]; weight of top t is the prior evaluated at the block center.
fn sample_top(
    dim: usize,
    len: usize,
    mu: f64,
    sigma: f64,
    rng: &mut ChaCha8Rng,
) -> i64 {
    let lo = 1 - len as i64;
    let hi = dim as i64 - 1;
    let mut weights = Vec::with_capacity((hi - lo + 1) as usize);
    let mut total = 0.0;
    for t in lo..=hi {
        let center = t as f64 + (len as f64 - 1.0) / 2.0;
        let w = if sigma.is_finite() {
            let z = (center - mu) / sigma;
            (-0.5 * z * z).exp()
        } else {
            1.0
        };
        weights.push(w);
        total += w;
    }
    let mut u = rng.gen_range(0.0..total);
    for (i, w) in weights.iter().enumerate() {
        u -= w;
        if u <= 0.0 {
            return lo + i as i64;
        }
    }
    hi
}

/// Blockwise mask targeting `target_ratio` of the grid. Pre: 0 < ratio < 1.
pub fn sample_mask(
    grid: (usize, usize),
    target_ratio: f64,
    prior: &GaussianPrior,
    cfg: &MaskConfig,
    rng: &mut ChaCha8Rng,
) -> PatchMask {
    sample_mask_detailed(grid, target_ratio, prior, cfg, rng).mask
}

pub fn sample_mask_detailed(
    grid: (usize, usize),
    target_ratio: f64,
    prior: &GaussianPrior,
    cfg: &MaskConfig,
    rng: &mut ChaCha8Rng,
) -> MaskSample {
    assert!(target_ratio > 0.0 && target_ratio < 1.0, "target_ratio in (0,1)");
    let (g_r, g_c) = grid;
    let n = g_r * g_c;
    let target = ((target_ratio * n as f64).round() as usize).clamp(1, n - 1);
    let geom = Geometric::new(1.0 / cfg.mean_block_area).expect("valid geometric p");
    let (ln_lo, ln_hi) = (cfg.aspect_bounds[0].ln(), cfg.aspect_bounds[1].ln());

    let mut mask = Array2::from_elem(grid, false);
    let mut blocks = Vec::new();
    let mut count = 0usize;
    let mut iters = 0usize;
    while count < target && iters < 10 * n {
        iters += 1;
        let area = (1 + geom.sample(rng) as usize).min(n);
        let aspect = (rng.gen_range(ln_lo..=ln_hi)).exp();
        let bh = (((area as f64 * aspect).sqrt()).round() as usize).clamp(1, g_r);
        let bw = (((area as f64 / aspect).sqrt()).round() as usize).clamp(1, g_c);
        let top = sample_top(g_r, bh, prior.center.0, prior.sigma.0, rng);
        let left = sample_top(g_c, bw, prior.center.1, prior.sigma.1, rng);
        let r0 = top.max(0) as usize;
        let r1 = ((top + bh as i64).min(g_r as i64)) as usize;
        let c0 = left.max(0) as usize;
        let c1 = ((left + bw as i64).min(g_c as i64)) as usize;
        if r0 >= r1 || c0 >= c1 {
            continue;
        }
        blocks.push((r0, c0, r1 - r0, c1 - c0));
        for r in r0..r1 {
            for c in c0..c1 {
                if !mask[[r, c]] {
                    mask[[r, c]] = true;
                    count += 1;
                }
            }
        }
    }
    let pre_trim = mask.clone();

    if count < target {
        // Greedy fill by prior density, densest first, index order on ties.
        let density = prior_density(prior, grid);
        let mut cells: Vec<(usize, usize)> = mask
            .indexed_iter()
            .filter(|(_, &b)| !b)
            .map(|((r, c), _)| (r, c))
            .collect();
        cells.sort_by(|a, b| density[[b.0, b.1]].partial_cmp(&density[[a.0, a.1]]).unwrap());
        for (r, c) in cells.into_iter().take(target - count) {
            mask[[r, c]] = true;
            count += 1;
        }
    } else if count > target {
        // Trim farthest from the prior center in sigma-normalized distance;
        // random tie-break keeps the uniform mode uniform.
        let mut cells: Vec<(f64, u64, usize, usize)> = mask
            .indexed_iter()
            .filter(|(_, &b)| b)
            .map(|((r, c), _)| {
                let zr = if prior.sigma.0.is_finite() {
                    (r as f64 - prior.center.0) / prior.sigma.0
                } else {
                    0.0
                };
                let zc = if prior.sigma.1.is_finite() {
                    (c as f64 - prior.center.1) / prior.sigma.1
                } else {
                    0.0
                };
                (zr * zr + zc * zc, rng.gen::<u64>(), r, c)
            })
            .collect();
        cells.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
        for &(_, _, r, c) in cells.iter().take(count - target) {
            mask[[r, c]] = false;
            count -= 1;
        }
    }

    let realized = count as f64 / n as f64;
    debug_assert!((realized - target_ratio).abs() <= 2.0 / n as f64);
    MaskSample {
        mask: PatchMask { grid: mask, target_ratio, realized_ratio: realized },
        blocks,
        pre_trim,
    }
}

/// Replace masked token rows with the mask token. Plain (non-tape) version.
pub fn apply_mask(
    tokens: &Array2<f64>,
    mask: &PatchMask,
    mask_token: &Array2<f64>,
) -> Result<Array2<f64>> {
    let (g_r, g_c) = mask.grid.dim();
    let (n, dim) = tokens.dim();
    if n != g_r * g_c {
        return Err(Error::geometry(format!(
            "token count {n} does not match mask grid {g_r}x{g_c}"
        )));
    }
    if mask_token.dim() != (1, dim) {
        return Err(Error::geometry(format!(
            "mask token shape {:?}, expected (1, {dim})",
            mask_token.dim()
        )));
    }
    let mut out = tokens.clone();
    for (k, ((_, _), &m)) in mask.grid.indexed_iter().enumerate() {
        if m {
            out.row_mut(k).assign(&mask_token.row(0));
        }
    }
    Ok(out)
}
