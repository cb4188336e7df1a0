//! Numeric helpers shared across the crate: seeded RNG streams, exact
//! (order-insensitive) summation, image resampling, and integral images.

use ndarray::Array2;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Derive a reproducible RNG from a base seed and a list of stream tags.
///
/// Streams derived from distinct tag lists are independent, so parallel or
/// reordered consumers cannot perturb each other's draws.
pub fn stream_rng(seed: u64, tags: &[u64]) -> ChaCha8Rng {
    let mut state = seed ^ 0x9e37_79b9_7f4a_7c15;
    for &t in tags {
        state = splitmix64(state.wrapping_add(t).wrapping_mul(0xff51_afd7_ed55_8ccd));
    }
    ChaCha8Rng::seed_from_u64(splitmix64(state))
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    let bv = s - a;
    let av = s - bv;
    (s, (a - av) + (b - bv))
}

/// Sum of `values` as a nonoverlapping floating-point expansion (exact).
fn expansion_sum(values: &[f64]) -> Vec<f64> {
    let mut exp: Vec<f64> = Vec::new();
    for &b in values {
        let mut q = b;
        let mut out = Vec::with_capacity(exp.len() + 1);
        for &e in &exp {
            let (s, err) = two_sum(e, q);
            if err != 0.0 {
                out.push(err);
            }
            q = s;
        }
        out.push(q);
        exp = out;
    }
    exp
}

/// Correctly rounded sum, independent of input order.
///
/// Inputs are reduced with error-free transformations, so any permutation of
/// `values` (and exact doubling of the whole list) reaches the same f64.
pub fn exact_sum(values: &[f64]) -> f64 {
    let exp = expansion_sum(values);
    let mut r: f64 = exp.iter().sum();
    // Two correction sweeps against the exact residual pin the rounding.
    for _ in 0..2 {
        let mut resid = exp.clone();
        resid.push(-r);
        let delta: f64 = expansion_sum(&resid).iter().sum();
        if delta == 0.0 {
            break;
        }
        r += delta;
    }
    r
}

/// Mean that is bitwise invariant under permutation and whole-list duplication.
pub fn exact_mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    exact_sum(values) / values.len() as f64
}

/// Bilinear resize with half-pixel center alignment and edge clamping.
pub fn bilinear_resize(src: &Array2<f64>, out_h: usize, out_w: usize) -> Array2<f64> {
    let (h, w) = src.dim();
    assert!(h > 0 && w > 0 && out_h > 0 && out_w > 0);
    let sy = h as f64 / out_h as f64;
    let sx = w as f64 / out_w as f64;
    Array2::from_shape_fn((out_h, out_w), |(i, j)| {
        let fy = ((i as f64 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f64);
        let fx = ((j as f64 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f64);
        let y0 = fy.floor() as usize;
        let x0 = fx.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let x1 = (x0 + 1).min(w - 1);
        let dy = fy - y0 as f64;
        let dx = fx - x0 as f64;
        src[[y0, x0]] * (1.0 - dy) * (1.0 - dx)
            + src[[y0, x1]] * (1.0 - dy) * dx
            + src[[y1, x0]] * dy * (1.0 - dx)
            + src[[y1, x1]] * dy * dx
    })
}

/// Separable Gaussian blur with edge clamping. `sigma <= 0` is the identity.
pub fn gaussian_blur(src: &Array2<f64>, sigma: f64) -> Array2<f64> {
    if sigma <= 0.0 {
        return src.clone();
    }
    let radius = (3.0 * sigma).ceil() as i64;
    let mut kernel = Vec::with_capacity((2 * radius + 1) as usize);
    for k in -radius..=radius {
        kernel.push((-0.5 * (k as f64 / sigma).powi(2)).exp());
    }
    let norm: f64 = kernel.iter().sum();
    for k in &mut kernel {
        *k /= norm;
    }
    let (h, w) = src.dim();
    let mut tmp = Array2::zeros((h, w));
    for i in 0..h {
        for j in 0..w {
            let mut acc = 0.0;
            for (ki, kv) in kernel.iter().enumerate() {
                let jj = (j as i64 + ki as i64 - radius).clamp(0, w as i64 - 1) as usize;
                acc += kv * src[[i, jj]];
            }
            tmp[[i, j]] = acc;
        }
    }
    let mut out = Array2::zeros((h, w));
    for i in 0..h {
        for j in 0..w {
            let mut acc = 0.0;
            for (ki, kv) in kernel.iter().enumerate() {
                let ii = (i as i64 + ki as i64 - radius).clamp(0, h as i64 - 1) as usize;
                acc += kv * tmp[[ii, j]];
            }
            out[[i, j]] = acc;
        }
    }
    out
}

/// Summed-area table over an `h x w` grid for O(1) box sums.
pub struct Integral2D {
    cumsum: Array2<f64>,
}

impl Integral2D {
    pub fn new(grid: &Array2<f64>) -> Self {
        let (h, w) = grid.dim();
        let mut cumsum = Array2::zeros((h + 1, w + 1));
        for i in 0..h {
            for j in 0..w {
                cumsum[[i + 1, j + 1]] =
                    grid[[i, j]] + cumsum[[i, j + 1]] + cumsum[[i + 1, j]] - cumsum[[i, j]];
            }
        }
        Self { cumsum }
    }

    pub fn from_bool(grid: &Array2<bool>) -> Self {
        Self::new(&grid.mapv(|b| if b { 1.0 } else { 0.0 }))
    }

    /// Sum over rows `r0..r1`, cols `c0..c1` (half-open).
    pub fn box_sum(&self, r0: usize, c0: usize, r1: usize, c1: usize) -> f64 {
        self.cumsum[[r1, c1]] - self.cumsum[[r0, c1]] - self.cumsum[[r1, c0]]
            + self.cumsum[[r0, c0]]
    }
}

/// Percentile with linear interpolation between order statistics, `p` in [0,100].
pub fn percentile(values: &[f64], p: f64) -> f64 {
    assert!(!values.is_empty());
    let mut sorted: Vec<f64> = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let rank = p / 100.0 * (sorted.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    let frac = rank - lo as f64;
    sorted[lo] * (1.0 - frac) + sorted[hi] * frac
}

/// `n` evenly spaced points from `a` to `b` inclusive.
pub fn linspace(a: f64, b: f64, n: usize) -> Vec<f64> {
    assert!(n >= 2);
    (0..n)
        .map(|i| a + (b - a) * i as f64 / (n - 1) as f64)
        .collect()
}
