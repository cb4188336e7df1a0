//! Synthetic phantom volumes, intensity normalization, and the on-disk
//! volume container.
//!
//! Phantoms are unions of ellipsoidal "organs" with per-class intensity
//! bands on a zero background. Geometry is sampled so that the realized
//! background fraction of each volume lands inside the requested range, and
//! organ depth positions are stratified so no single slice is swamped by
//! overlapping organ cross-sections.

use crate::error::{Error, Result};
use crate::util::{percentile, stream_rng};
use ndarray::{Array2, Array3, Axis};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};
use std::io::{Read, Write};
use std::path::Path;

pub const RVOL_MAGIC: &[u8; 8] = b"RVOL0001";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Modality {
    CT,
    MR,
}

impl Modality {
    pub fn as_str(&self) -> &'static str {
        match self {
            Modality::CT => "CT",
            Modality::MR => "MR",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "CT" => Ok(Modality::CT),
            "MR" => Ok(Modality::MR),
            other => Err(Error::validation(
                "modality",
                format!("unknown modality {other:?}, expected \"CT\" or \"MR\""),
            )),
        }
    }
}

pub type Labels = Map<String, Value>;

#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    /// Raw intensities, depth x height x width.
    pub voxels: Array3<f32>,
    /// Millimeters per voxel along (x, y, z) as stored in the file header.
    pub spacing: [f64; 3],
    pub modality: Modality,
    pub labels: Labels,
}

impl Volume {
    pub fn validate(&self) -> Result<()> {
        let (d, h, w) = self.voxels.dim();
        if d < 5 {
            return Err(Error::validation("depth", format!("need >= 5 slices, got {d}")));
        }
        if h < 8 || w < 8 {
            return Err(Error::validation(
                "shape",
                format!("height and width must be >= 8, got {h}x{w}"),
            ));
        }
        if self.voxels.iter().any(|v| !v.is_finite()) {
            return Err(Error::validation("voxels", "non-finite intensity"));
        }
        Ok(())
    }

    pub fn label_f64(&self, name: &str) -> Option<f64> {
        self.labels.get(name).and_then(Value::as_f64)
    }

    /// Normalization bounds (lo, hi) in raw units; None means constant input.
    pub fn normalize_bounds(&self, cfg: &NormalizeConfig) -> Option<(f64, f64)> {
        match self.modality {
            Modality::CT => Some(cfg.ct_bounds()),
            Modality::MR => {
                let vals: Vec<f64> = self.voxels.iter().map(|&v| v as f64).collect();
                let lo = percentile(&vals, cfg.mr_p_lo);
                let hi = percentile(&vals, cfg.mr_p_hi);
                if hi - lo <= f64::EPSILON * lo.abs().max(1.0) {
                    None
                } else {
                    Some((lo, hi))
                }
            }
        }
    }

    pub fn normalized(&self, cfg: &NormalizeConfig) -> Array3<f64> {
        match self.normalize_bounds(cfg) {
            None => Array3::from_elem(self.voxels.dim(), 0.5),
            Some((lo, hi)) => self
                .voxels
                .mapv(|v| ((v as f64 - lo) / (hi - lo)).clamp(0.0, 1.0)),
        }
    }

    /// One normalized slice, using volume-level bounds so MR percentile
    /// scaling is consistent across slices of the same volume.
    pub fn slice_normalized(&self, idx: usize, cfg: &NormalizeConfig) -> Result<Array2<f64>> {
        let (d, _, _) = self.voxels.dim();
        if idx >= d {
            return Err(Error::geometry(format!("slice {idx} out of {d}")));
        }
        let plane = self.voxels.index_axis(Axis(0), idx);
        Ok(match self.normalize_bounds(cfg) {
            None => Array2::from_elem(plane.dim(), 0.5),
            Some((lo, hi)) => plane.mapv(|v| ((v as f64 - lo) / (hi - lo)).clamp(0.0, 1.0)),
        })
    }
}

/// A normalized 2-D slice with its derived foreground mask.
#[derive(Clone, Debug)]
pub struct SliceImage {
    /// Values in [0,1].
    pub pixels: Array2<f64>,
    /// true = foreground (complement of the background mask).
    pub foreground: Array2<bool>,
    /// (volume id, slice index)
    pub source: (String, usize),
}

/// Intensity normalization: fixed window for CT, per-volume percentile
/// scaling for MR. The CT window is `[wl - ww/2, wl + ww/2]`.
///
/// Default window [0, 400] (wl=200) maps the phantoms' zero background to
/// 0.0 so background detection thresholds apply directly.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct NormalizeConfig {
    pub ct_wl: f64,
    pub ct_ww: f64,
    pub mr_p_lo: f64,
    pub mr_p_hi: f64,
}

impl Default for NormalizeConfig {
    fn default() -> Self {
        Self { ct_wl: 200.0, ct_ww: 400.0, mr_p_lo: 1.0, mr_p_hi: 99.0 }
    }
}

impl NormalizeConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.ct_ww > 0.0) {
            return Err(Error::validation("ct_ww", "window width must be > 0"));
        }
        if !(0.0 <= self.mr_p_lo && self.mr_p_lo < self.mr_p_hi && self.mr_p_hi <= 100.0) {
            return Err(Error::validation("mr_p", "need 0 <= p_lo < p_hi <= 100"));
        }
        Ok(())
    }

    fn ct_bounds(&self) -> (f64, f64) {
        (self.ct_wl - self.ct_ww / 2.0, self.ct_wl + self.ct_ww / 2.0)
    }
}

/// Window/percentile normalization of a bare 2-D array (MR percentiles are
/// then taken over this array alone).
pub fn window_normalize2(raw: &Array2<f64>, modality: Modality, cfg: &NormalizeConfig) -> Array2<f64> {
    let bounds = match modality {
        Modality::CT => Some(cfg.ct_bounds()),
        Modality::MR => {
            let vals: Vec<f64> = raw.iter().copied().collect();
            let lo = percentile(&vals, cfg.mr_p_lo);
            let hi = percentile(&vals, cfg.mr_p_hi);
            if hi - lo <= f64::EPSILON * lo.abs().max(1.0) {
                None
            } else {
                Some((lo, hi))
            }
        }
    };
    match bounds {
        None => Array2::from_elem(raw.dim(), 0.5),
        Some((lo, hi)) => raw.mapv(|v| ((v - lo) / (hi - lo)).clamp(0.0, 1.0)),
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct PhantomSpec {
    pub num_volumes: usize,
    /// (depth, height, width)
    pub grid: [usize; 3],
    pub organ_count: usize,
    pub background_fraction_range: [f64; 2],
    /// Additive Gaussian noise in raw units.
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self {
            num_volumes: 64,
            grid: [12, 48, 48],
            organ_count: 4,
            background_fraction_range: [0.5, 0.8],
            noise_sigma: 2.0,
            seed: 0,
        }
    }
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_volumes == 0 {
            return Err(Error::validation("num_volumes", "must be >= 1"));
        }
        let [d, h, w] = self.grid;
        if d < 5 {
            return Err(Error::validation("grid", format!("depth must be >= 5, got {d}")));
        }
        if h < 8 || w < 8 {
            return Err(Error::validation("grid", format!("height/width must be >= 8, got {h}x{w}")));
        }
        if self.organ_count < 2 {
            return Err(Error::validation("organ_count", "must be >= 2"));
        }
        let [lo, hi] = self.background_fraction_range;
        if !(0.0 <= lo && lo <= hi && hi <= 1.0) {
            return Err(Error::validation(
                "background_fraction_range",
                format!("need 0 <= lo <= hi <= 1, got [{lo}, {hi}]"),
            ));
        }
        if self.noise_sigma < 0.0 {
            return Err(Error::validation("noise_sigma", "must be >= 0"));
        }
        Ok(())
    }
}

/// Ellipsoid geometry in fractional volume coordinates (z, y, x).
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Ellipsoid {
    pub class: usize,
    pub center: [f64; 3],
    pub radii: [f64; 3],
    pub intensity: f64,
}

impl Ellipsoid {
    pub fn contains(&self, z: f64, y: f64, x: f64) -> bool {
        let dz = (z - self.center[0]) / self.radii[0];
        let dy = (y - self.center[1]) / self.radii[1];
        let dx = (x - self.center[2]) / self.radii[2];
        dz * dz + dy * dy + dx * dx <= 1.0
    }
}

/// Organ geometry stored in a volume's labels, if present.
pub fn organs_from_labels(v: &Volume) -> Vec<Ellipsoid> {
    v.labels
        .get("organs")
        .and_then(|o| serde_json::from_value(o.clone()).ok())
        .unwrap_or_default()
}

/// Raw intensity band for an organ class (1-based) among `organ_count`.
pub fn class_intensity(class: usize, organ_count: usize) -> f64 {
    40.0 + 320.0 * (class - 1) as f64 / (organ_count - 1).max(1) as f64
}

// Depth band available to organ centers, with a dead zone between strata so
// organ cross-sections from different strata cannot all peak on one slice.
const DEPTH_BAND: (f64, f64) = (0.30, 0.70);
const DEPTH_GAP: f64 = 0.06;
const MAX_STRUCTURES: usize = 5;

struct OrganDraw {
    class: usize,
    center: [f64; 3],
    base_radii: [f64; 3],
}

fn fraction_inside(grid: [usize; 3], organs: &[OrganDraw], scale: f64) -> f64 {
    let [d, h, w] = grid;
    let mut hit = 0usize;
    for iz in 0..d {
        let z = (iz as f64 + 0.5) / d as f64;
        for iy in 0..h {
            let y = (iy as f64 + 0.5) / h as f64;
            for ix in 0..w {
                let x = (ix as f64 + 0.5) / w as f64;
                for o in organs {
                    let dz = (z - o.center[0]) / (o.base_radii[0] * scale);
                    let dy = (y - o.center[1]) / (o.base_radii[1] * scale);
                    let dx = (x - o.center[2]) / (o.base_radii[2] * scale);
                    if dz * dz + dy * dy + dx * dx <= 1.0 {
                        hit += 1;
                        break;
                    }
                }
            }
        }
    }
    hit as f64 / (d * h * w) as f64
}

/// Deterministic phantom generation; a pure function of the spec.
pub fn generate_phantoms(spec: &PhantomSpec) -> Result<Vec<Volume>> {
    spec.validate()?;
    let [d, h, w] = spec.grid;
    let [bg_lo, bg_hi] = spec.background_fraction_range;
    let mut volumes = Vec::with_capacity(spec.num_volumes);
    for vi in 0..spec.num_volumes {
        let mut rng = stream_rng(spec.seed, &[0xda7a, vi as u64]);
        let target_bg = rng.gen_range(bg_lo..=bg_hi);
        let fg_target = (1.0 - target_bg).max(1e-3);
        // At least 2 structures so distinct intensity bands always coexist;
        // at most MAX_STRUCTURES so depth strata stay wide enough.
        let n = rng.gen_range(2..=spec.organ_count.min(MAX_STRUCTURES).max(2));
        let mut classes: Vec<usize> = (1..=spec.organ_count).collect();
        for i in 0..n {
            let j = rng.gen_range(i..classes.len());
            classes.swap(i, j);
        }
        classes.truncate(n);

        let mut shares: Vec<f64> = (0..n).map(|_| rng.gen_range(0.5..1.0)).collect();
        let total: f64 = shares.iter().sum();
        for s in &mut shares {
            *s /= total;
        }

        let stratum_w = ((DEPTH_BAND.1 - DEPTH_BAND.0) - DEPTH_GAP * (n - 1) as f64) / n as f64;
        let mut organs: Vec<OrganDraw> = Vec::with_capacity(n);
        for (i, (&class, &share)) in classes.iter().zip(&shares).enumerate() {
            let rho = rng.gen_range(0.7..0.95);
            let aspect = rng.gen_range(0.75..1.33);
            let cz = DEPTH_BAND.0 + i as f64 * (stratum_w + DEPTH_GAP) + rng.gen_range(0.0..1.0) * stratum_w;
            let cy = rng.gen_range(0.38..0.62);
            let cx = rng.gen_range(0.38..0.62);
            let vol = fg_target * share;
            let ryx = (3.0 * vol / (4.0 * std::f64::consts::PI * rho)).powf(2.0 / 3.0);
            let ry = (ryx * aspect).sqrt();
            let rx = (ryx / aspect).sqrt();
            let rz = rho * ryx.sqrt();
            organs.push(OrganDraw { class, center: [cz, cy, cx], base_radii: [rz, ry, rx] });
        }

        // Bisection on a global radius scale to hit the background target.
        let (mut s_lo, mut s_hi) = (0.25, 2.0);
        let mut scale = 1.0;
        for _ in 0..24 {
            scale = 0.5 * (s_lo + s_hi);
            let fg = fraction_inside(spec.grid, &organs, scale);
            if (fg - fg_target).abs() <= 0.015 {
                break;
            }
            if fg < fg_target {
                s_lo = scale;
            } else {
                s_hi = scale;
            }
        }

        let mut ellipsoids: Vec<Ellipsoid> = organs
            .iter()
            .map(|o| Ellipsoid {
                class: o.class,
                center: o.center,
                radii: [
                    o.base_radii[0] * scale,
                    o.base_radii[1] * scale,
                    o.base_radii[2] * scale,
                ],
                intensity: class_intensity(o.class, spec.organ_count),
            })
            .collect();
        // Paint large organs first so smaller ones stay visible on top.
        let organ_vol = |e: &Ellipsoid| e.radii[0] * e.radii[1] * e.radii[2];
        ellipsoids.sort_by(|a, b| organ_vol(b).partial_cmp(&organ_vol(a)).unwrap());

        let mut voxels = Array3::<f32>::zeros((d, h, w));
        for e in &ellipsoids {
            paint(&mut voxels, e, e.intensity as f32);
        }

        let primary = ellipsoids
            .iter()
            .max_by(|a, b| organ_vol(a).partial_cmp(&organ_vol(b)).unwrap())
            .unwrap()
            .clone();
        // Lesion = a dark cavity inside the primary organ. It adds no new
        // intensity plateau (cavity value equals the background).
        let lesion = rng.gen_bool(0.5);
        if lesion {
            let cavity = Ellipsoid {
                class: 0,
                center: primary.center,
                radii: [
                    primary.radii[0] * 0.35,
                    primary.radii[1] * 0.35,
                    primary.radii[2] * 0.35,
                ],
                intensity: 0.0,
            };
            paint(&mut voxels, &cavity, 0.0);
        }

        let bg_realized = voxels.iter().filter(|&&v| v == 0.0).count() as f64 / (d * h * w) as f64;

        if spec.noise_sigma > 0.0 {
            let normal = Normal::new(0.0, spec.noise_sigma).unwrap();
            for v in voxels.iter_mut() {
                *v = (*v as f64 + normal.sample(&mut rng)).max(0.0) as f32;
            }
        }

        let age: f64 = ellipsoids
            .iter()
            .map(|e| 100.0 * (e.radii[0] + e.radii[1] + e.radii[2]) / 3.0)
            .sum();
        let mean_r = (primary.radii[0] + primary.radii[1] + primary.radii[2]) / 3.0;
        let hazard = (6.0 * (mean_r - 0.18)).exp();
        let u: f64 = rng.gen_range(1e-9..1.0);
        let mut time = -u.ln() / hazard;
        let censored = rng.gen_bool(0.3);
        if censored {
            time *= rng.gen_range(0.25..0.95);
        }
        let mut present = vec![0u8; spec.organ_count];
        for e in &ellipsoids {
            present[e.class - 1] = 1;
        }

        let mut labels = Map::new();
        labels.insert("organ_class".into(), json!(primary.class - 1));
        labels.insert("organs_present".into(), json!(present));
        labels.insert("age".into(), json!(age));
        labels.insert("lesion".into(), json!(if lesion { 1 } else { 0 }));
        labels.insert("survival_time".into(), json!(time.max(1e-6)));
        labels.insert("survival_event".into(), json!(if censored { 0 } else { 1 }));
        labels.insert("bg_target".into(), json!(target_bg));
        labels.insert("bg_realized".into(), json!(bg_realized));
        labels.insert("organs".into(), serde_json::to_value(&ellipsoids)?);

        let vol = Volume {
            voxels,
            spacing: [1.0, 1.0, 1.0],
            modality: Modality::CT,
            labels,
        };
        vol.validate()?;
        volumes.push(vol);
    }
    Ok(volumes)
}

fn paint(voxels: &mut Array3<f32>, e: &Ellipsoid, value: f32) {
    let (d, h, w) = voxels.dim();
    let lo = |c: f64, r: f64, n: usize| (((c - r) * n as f64).floor().max(0.0)) as usize;
    let hi = |c: f64, r: f64, n: usize| (((c + r) * n as f64).ceil().min(n as f64)) as usize;
    for iz in lo(e.center[0], e.radii[0], d)..hi(e.center[0], e.radii[0], d) {
        let z = (iz as f64 + 0.5) / d as f64;
        for iy in lo(e.center[1], e.radii[1], h)..hi(e.center[1], e.radii[1], h) {
            let y = (iy as f64 + 0.5) / h as f64;
            for ix in lo(e.center[2], e.radii[2], w)..hi(e.center[2], e.radii[2], w) {
                let x = (ix as f64 + 0.5) / w as f64;
                if e.contains(z, y, x) {
                    voxels[[iz, iy, ix]] = value;
                }
            }
        }
    }
}

#[derive(Serialize, Deserialize)]
struct RvolHeader {
    shape: [usize; 3],
    spacing: [f64; 3],
    modality: String,
    dtype: String,
    labels: Labels,
}

pub fn save_volume(v: &Volume, path: &Path) -> Result<()> {
    v.validate()?;
    let (d, h, w) = v.voxels.dim();
    let header = RvolHeader {
        shape: [d, h, w],
        spacing: v.spacing,
        modality: v.modality.as_str().to_string(),
        dtype: "f32".into(),
        labels: v.labels.clone(),
    };
    let header_bytes = serde_json::to_vec(&header)?;
    let mut payload = Vec::with_capacity(d * h * w * 4);
    for &val in v.voxels.iter() {
        payload.extend_from_slice(&val.to_le_bytes());
    }
    let mut hasher = crc32fast::Hasher::new();
    hasher.update(&payload);
    let crc = hasher.finalize();

    let mut f = std::fs::File::create(path)?;
    f.write_all(RVOL_MAGIC)?;
    f.write_all(&(header_bytes.len() as u32).to_le_bytes())?;
    f.write_all(&header_bytes)?;
    f.write_all(&payload)?;
    f.write_all(&crc.to_le_bytes())?;
    Ok(())
}

pub fn load_volume(path: &Path) -> Result<Volume> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    load_volume_bytes(&bytes)
}

pub fn load_volume_bytes(bytes: &[u8]) -> Result<Volume> {
    if bytes.len() < 12 || &bytes[..8] != RVOL_MAGIC {
        return Err(Error::MalformedHeader("bad magic".into()));
    }
    let hlen = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    if bytes.len() < 12 + hlen {
        return Err(Error::MalformedHeader(format!(
            "header length {hlen} exceeds file size"
        )));
    }
    let header: RvolHeader = serde_json::from_slice(&bytes[12..12 + hlen])
        .map_err(|e| Error::MalformedHeader(format!("header json: {e}")))?;
    if header.dtype != "f32" {
        return Err(Error::validation(
            "dtype",
            format!("unsupported dtype {:?}", header.dtype),
        ));
    }
    let modality = Modality::parse(&header.modality)?;
    let [d, h, w] = header.shape;
    let need = d
        .checked_mul(h)
        .and_then(|x| x.checked_mul(w))
        .and_then(|x| x.checked_mul(4))
        .ok_or_else(|| Error::MalformedHeader("shape overflow".into()))?;
    let rest = &bytes[12 + hlen..];
    if rest.len() < need + 4 {
        return Err(Error::TruncatedPayload { expected: need + 4, found: rest.len() });
    }
    let payload = &rest[..need];
    let mut hasher = crc32fast::Hasher::new();
    hasher.update(payload);
    let computed = hasher.finalize();
    let stored = u32::from_le_bytes(rest[need..need + 4].try_into().unwrap());
    if stored != computed {
        return Err(Error::ChecksumMismatch { stored, computed });
    }
    let mut data = Vec::with_capacity(d * h * w);
    for chunk in payload.chunks_exact(4) {
        data.push(f32::from_le_bytes(chunk.try_into().unwrap()));
    }
    let voxels = Array3::from_shape_vec((d, h, w), data)
        .map_err(|e| Error::MalformedHeader(format!("shape: {e}")))?;
    let vol = Volume { voxels, spacing: header.spacing, modality, labels: header.labels };
    vol.validate()?;
    Ok(vol)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_spec() -> PhantomSpec {
        PhantomSpec {
            num_volumes: 6,
            grid: [10, 32, 32],
            organ_count: 3,
            background_fraction_range: [0.6, 0.8],
            noise_sigma: 2.0,
            seed: 7,
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate_phantoms(&tiny_spec()).unwrap();
        let b = generate_phantoms(&tiny_spec()).unwrap();
        assert_eq!(a.len(), b.len());
        for (va, vb) in a.iter().zip(&b) {
            assert_eq!(va.voxels, vb.voxels);
            assert_eq!(va.labels, vb.labels);
        }
    }

    #[test]
    fn noiseless_volumes_have_exactly_n_nonzero_plateaus() {
        let spec = PhantomSpec {
            organ_count: 2,
            noise_sigma: 0.0,
            num_volumes: 8,
            ..tiny_spec()
        };
        for v in generate_phantoms(&spec).unwrap() {
            let mut values: Vec<u32> = v
                .voxels
                .iter()
                .filter(|&&x| x != 0.0)
                .map(|x| x.to_bits())
                .collect();
            values.sort_unstable();
            values.dedup();
            assert_eq!(values.len(), 2, "labels: {:?}", v.labels);
        }
    }

    #[test]
    fn realized_background_within_spec_band() {
        let spec = PhantomSpec { num_volumes: 12, ..tiny_spec() };
        let [lo, hi] = spec.background_fraction_range;
        for v in generate_phantoms(&spec).unwrap() {
            let bg = v.label_f64("bg_realized").unwrap();
            assert!(bg >= lo - 0.05 && bg <= hi + 0.05, "bg {bg} outside [{lo},{hi}] +- 0.05");
        }
    }

    #[test]
    fn invalid_spec_reports_field() {
        let spec = PhantomSpec { organ_count: 1, ..tiny_spec() };
        match generate_phantoms(&spec) {
            Err(Error::Validation { field, .. }) => assert_eq!(field, "organ_count"),
            other => panic!("expected validation error, got {other:?}"),
        }
    }

    #[test]
    fn ct_window_examples() {
        let cfg = NormalizeConfig { ct_wl: 0.0, ct_ww: 400.0, ..Default::default() };
        let raw = Array2::from_elem((4, 4), -200.0);
        let out = window_normalize2(&raw, Modality::CT, &cfg);
        assert!(out.iter().all(|&v| v == 0.0));
        // Window [0,1] is the identity on already-normalized input.
        let cfg01 = NormalizeConfig { ct_wl: 0.5, ct_ww: 1.0, ..Default::default() };
        let raw = Array2::from_shape_fn((3, 3), |(i, j)| (i * 3 + j) as f64 / 8.0);
        let out = window_normalize2(&raw, Modality::CT, &cfg01);
        assert!(out
            .iter()
            .zip(raw.iter())
            .all(|(&a, &b)| (a - b).abs() < 1e-12));
    }

    #[test]
    fn mr_normalization_examples() {
        let cfg = NormalizeConfig::default();
        let constant = Array2::from_elem((5, 5), 42.0);
        let out = window_normalize2(&constant, Modality::MR, &cfg);
        assert!(out.iter().all(|&v| v == 0.5));
        let ramp = Array2::from_shape_fn((10, 101), |(_, j)| j as f64 * 10.0);
        let out = window_normalize2(&ramp, Modality::MR, &cfg);
        let min = out.iter().cloned().fold(f64::INFINITY, f64::min);
        let max = out.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        assert_eq!(min, 0.0);
        assert_eq!(max, 1.0);
    }

    #[test]
    fn normalize_is_monotone_and_bounded() {
        let cfg = NormalizeConfig::default();
        let raw = Array2::from_shape_fn((1, 50), |(_, j)| j as f64 * 11.0 - 60.0);
        let out = window_normalize2(&raw, Modality::CT, &cfg);
        assert!(out.iter().all(|&v| (0.0..=1.0).contains(&v)));
        for j in 1..50 {
            assert!(out[[0, j]] >= out[[0, j - 1]]);
        }
    }

    #[test]
    fn rvol_round_trip_is_bit_exact() {
        let vols = generate_phantoms(&tiny_spec()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v.rvol");
        save_volume(&vols[0], &path).unwrap();
        let back = load_volume(&path).unwrap();
        assert_eq!(vols[0], back);
    }

    #[test]
    fn rvol_error_kinds_are_distinct() {
        let vols = generate_phantoms(&tiny_spec()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v.rvol");
        save_volume(&vols[0], &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();

        let mut bad_magic = bytes.clone();
        bad_magic[0] = b'X';
        assert!(matches!(load_volume_bytes(&bad_magic), Err(Error::MalformedHeader(_))));

        // Header promising more slices than the payload holds.
        let hlen = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let mut header: RvolHeader = serde_json::from_slice(&bytes[12..12 + hlen]).unwrap();
        header.shape[0] += 1;
        let new_header = serde_json::to_vec(&header).unwrap();
        let mut truncated = Vec::new();
        truncated.extend_from_slice(&bytes[..8]);
        truncated.extend_from_slice(&(new_header.len() as u32).to_le_bytes());
        truncated.extend_from_slice(&new_header);
        truncated.extend_from_slice(&bytes[12 + hlen..]);
        assert!(matches!(
            load_volume_bytes(&truncated),
            Err(Error::TruncatedPayload { .. })
        ));

        let mut corrupt = bytes.clone();
        let payload_start = 12 + hlen;
        corrupt[payload_start + 5] ^= 0xff;
        assert!(matches!(
            load_volume_bytes(&corrupt),
            Err(Error::ChecksumMismatch { .. })
        ));

        let mut header: RvolHeader = serde_json::from_slice(&bytes[12..12 + hlen]).unwrap();
        header.modality = "XR".into();
        let new_header = serde_json::to_vec(&header).unwrap();
        let mut bad_modality = Vec::new();
        bad_modality.extend_from_slice(&bytes[..8]);
        bad_modality.extend_from_slice(&(new_header.len() as u32).to_le_bytes());
        bad_modality.extend_from_slice(&new_header);
        bad_modality.extend_from_slice(&bytes[12 + hlen..]);
        assert!(matches!(
            load_volume_bytes(&bad_modality),
            Err(Error::Validation { .. })
        ));
    }

    #[test]
    fn labels_cover_probe_tasks() {
        let vols = generate_phantoms(&tiny_spec()).unwrap();
        for v in &vols {
            assert!(v.label_f64("organ_class").is_some());
            assert!(v.label_f64("age").unwrap() > 0.0);
            assert!(v.label_f64("survival_time").unwrap() > 0.0);
            let ev = v.label_f64("survival_event").unwrap();
            assert!(ev == 0.0 || ev == 1.0);
            assert!(!organs_from_labels(v).is_empty());
        }
    }
}
