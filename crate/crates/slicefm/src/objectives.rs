//! Training losses — self-distillation over crop pairs, masked-patch
//! consistency, the isotropic-Gaussian regularizer and its nearest-neighbor
//! baseline — plus teacher centering and the EMA update.
//!
//! Teacher quantities enter as plain matrices (already detached); only
//! student inputs are tape nodes, so the teacher structurally cannot
//! receive gradients.

use crate::autodiff::{Tape, Var, M};
use crate::encoder::EncoderParams;
use crate::error::{Error, Result};
use crate::masker::PatchMask;
use ndarray::{Array2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RegKind {
    Sigreg,
    Koleo,
    None,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct SigRegConfig {
    /// Fresh random projection directions per step.
    pub dirs: usize,
    /// Characteristic-function evaluation points.
    pub grid: usize,
    /// Grid spans [-range, range].
    pub range: f64,
}

impl Default for SigRegConfig {
    fn default() -> Self {
        Self { dirs: 16, grid: 17, range: 4.0 }
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct ObjectiveConfig {
    pub reg: RegKind,
    pub w_dino: f64,
    pub w_ibot: f64,
    pub w_reg: f64,
    pub tau_s: f64,
    /// Teacher temperature warmup: start value -> end value over the first
    /// 10% of steps.
    pub tau_t_warmup: [f64; 2],
    pub center_rate: f64,
    pub sigreg: SigRegConfig,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        Self {
            reg: RegKind::Sigreg,
            w_dino: 1.0,
            w_ibot: 1.0,
            w_reg: 0.1,
            tau_s: 0.1,
            tau_t_warmup: [0.04, 0.07],
            center_rate: 0.9,
            sigreg: SigRegConfig::default(),
        }
    }
}

impl ObjectiveConfig {
    pub fn validate(&self) -> Result<()> {
        if self.tau_s <= 0.0 {
            return Err(Error::validation("tau_s", "must be positive"));
        }
        for t in self.tau_t_warmup {
            if t <= 0.0 || t > 1.0 {
                return Err(Error::validation("tau_t_warmup", "values must lie in (0, 1]"));
            }
        }
        if !(0.0..=1.0).contains(&self.center_rate) {
            return Err(Error::validation("center_rate", "must lie in [0, 1]"));
        }
        if self.sigreg.dirs == 0 || self.sigreg.grid == 0 || self.sigreg.range <= 0.0 {
            return Err(Error::validation("sigreg", "dirs/grid must be positive"));
        }
        for (name, w) in [("w_dino", self.w_dino), ("w_ibot", self.w_ibot), ("w_reg", self.w_reg)]
        {
            if !w.is_finite() || w < 0.0 {
                return Err(Error::validation(name, "must be finite and non-negative"));
            }
        }
        Ok(())
    }

    /// Teacher temperature at `step`: linear warmup over the first tenth of
    /// `total_steps`, then flat.
    pub fn tau_teacher_at(&self, step: u64, total_steps: u64) -> f64 {
        let [start, end] = self.tau_t_warmup;
        let warm = (total_steps / 10).max(1);
        if step >= warm {
            end
        } else {
            start + (end - start) * step as f64 / warm as f64
        }
    }
}

/// Momentum teacher: a parameter copy plus running logit centers.
#[derive(Clone, Debug)]
pub struct TeacherState {
    pub params: EncoderParams,
    /// Running center of class-token logits, (1, K).
    pub center_cls: M,
    /// Running center of patch-token logits, (1, K).
    pub center_patch: M,
    pub center_rate: f64,
}

impl TeacherState {
    pub fn new(student: &EncoderParams, center_rate: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&center_rate) {
            return Err(Error::validation("center_rate", "must lie in [0, 1]"));
        }
        let k = student.cfg.head_prototypes;
        Ok(Self {
            params: student.clone(),
            center_cls: Array2::zeros((1, k)),
            center_patch: Array2::zeros((1, k)),
            center_rate,
        })
    }
}

/// Weighted loss parts for one step. `total` is set once at composition;
/// recomputing `w·parts` reproduces it bit-exactly.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub dino: f64,
    pub ibot: f64,
    pub reg: f64,
    pub weights: (f64, f64, f64),
    pub total: f64,
}

impl LossBreakdown {
    pub fn compose(dino: f64, ibot: f64, reg: f64, weights: (f64, f64, f64)) -> Self {
        let total = weights.0 * dino + weights.1 * ibot + weights.2 * reg;
        Self { dino, ibot, reg, weights, total }
    }

    pub fn recompute_total(&self) -> f64 {
        self.weights.0 * self.dino + self.weights.1 * self.ibot + self.weights.2 * self.reg
    }

    pub fn is_finite(&self) -> bool {
        self.dino.is_finite() && self.ibot.is_finite() && self.reg.is_finite()
    }
}

/// Stable row-wise softmax of `(logits - center) / tau` — the (detached)
/// teacher distribution.
pub fn teacher_probs(logits: &M, center: &M, tau: f64) -> M {
    let mut out = logits - center;
    for mut row in out.axis_iter_mut(Axis(0)) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|x| ((x - max) / tau).exp());
        let sum = row.sum();
        row.mapv_inplace(|x| x / sum);
    }
    out
}

/// Mean Shannon entropy of probability rows.
pub fn mean_row_entropy(probs: &M) -> f64 {
    let (r, _) = probs.dim();
    let mut acc = 0.0;
    for row in probs.axis_iter(Axis(0)) {
        acc -= row.iter().filter(|&&p| p > 0.0).map(|&p| p * p.ln()).sum::<f64>();
    }
    acc / r as f64
}

/// Cross-entropy of constant probability rows `p` against the row-wise
/// log-softmax of `logits / tau`, averaged over rows. Tape-side core shared
/// by the distillation losses and the trainer's per-image accumulation.
pub fn ce_rows_mean(tape: &mut Tape, p: &M, logits: Var, tau: f64) -> Var {
    let scaled = tape.scale(logits, 1.0 / tau);
    let lse = tape.logsumexp_rows(scaled);
    let logp = tape.sub(scaled, lse);
    let pl = tape.leaf(p.clone());
    let prod = tape.mul(pl, logp);
    let rows = tape.sum_rows(prod);
    let m = tape.mean_all(rows);
    tape.neg(m)
}

/// Self-distillation loss over (teacher global, student view) pairs with the
/// same-view pairs excluded. `student_logits[v]` and `teacher_logits[g]` are
/// (B, K); view `v` of the student corresponds to view `g == v` of the
/// teacher.
pub fn dino_loss(
    tape: &mut Tape,
    student_logits: &[Var],
    teacher_logits: &[M],
    center: &M,
    tau_s: f64,
    tau_t: f64,
) -> Result<Var> {
    if tau_s <= 0.0 || tau_t <= 0.0 {
        return Err(Error::validation("tau", "temperatures must be positive"));
    }
    if teacher_logits.is_empty() || student_logits.is_empty() {
        return Err(Error::validation("views", "need at least one view on each side"));
    }
    let k = center.dim().1;
    for t in teacher_logits {
        if t.dim().1 != k {
            return Err(Error::validation("teacher_logits", "prototype count mismatch"));
        }
    }
    let mut acc: Option<Var> = None;
    let mut pairs = 0usize;
    for (g, t) in teacher_logits.iter().enumerate() {
        let p = teacher_probs(t, center, tau_t);
        for (v, &s) in student_logits.iter().enumerate() {
            if v == g {
                continue;
            }
            if tape.value(s).dim() != t.dim() {
                return Err(Error::validation("student_logits", "shape mismatch with teacher"));
            }
            let ce = ce_rows_mean(tape, &p, s, tau_s);
            acc = Some(match acc {
                Some(a) => tape.add(a, ce),
                None => ce,
            });
            pairs += 1;
        }
    }
    let acc = acc.ok_or_else(|| {
        Error::validation("views", "every pair is a same-view pair; nothing to distill")
    })?;
    Ok(tape.scale(acc, 1.0 / pairs as f64))
}

/// Masked-patch loss terms for one image: summed cross-entropy over masked
/// positions and the count, or `None` when the mask is empty (the caller's
/// flag). Teacher logits come from the *unmasked* view.
pub fn ibot_terms(
    tape: &mut Tape,
    student_patch_logits: Var,
    teacher_patch_logits: &M,
    mask: &PatchMask,
    center_patch: &M,
    tau_s: f64,
    tau_t: f64,
) -> Result<Option<(Var, usize)>> {
    if tau_s <= 0.0 || tau_t <= 0.0 {
        return Err(Error::validation("tau", "temperatures must be positive"));
    }
    let sdim = tape.value(student_patch_logits).dim();
    if sdim != teacher_patch_logits.dim() {
        return Err(Error::validation("patch_logits", "student/teacher shape mismatch"));
    }
    let n = mask.grid.len();
    if n != sdim.0 {
        return Err(Error::geometry(format!(
            "mask has {n} cells but logits have {} rows",
            sdim.0
        )));
    }
    let idx = mask.masked_indices();
    if idx.is_empty() {
        return Ok(None);
    }
    let count = idx.len();
    let t_sel = teacher_patch_logits.select(Axis(0), &idx);
    let p = teacher_probs(&t_sel, center_patch, tau_t);
    let s_sel = tape.select_rows(student_patch_logits, &idx);
    let mean = ce_rows_mean(tape, &p, s_sel, tau_s);
    let sum = tape.scale(mean, count as f64);
    Ok(Some((sum, count)))
}

/// Masked-patch loss for a single view: mean cross-entropy over masked
/// positions. The boolean flags an empty mask (loss fixed at 0).
pub fn ibot_loss(
    tape: &mut Tape,
    student_patch_logits: Var,
    teacher_patch_logits: &M,
    mask: &PatchMask,
    center_patch: &M,
    tau_s: f64,
    tau_t: f64,
) -> Result<(Var, bool)> {
    match ibot_terms(tape, student_patch_logits, teacher_patch_logits, mask, center_patch, tau_s, tau_t)? {
        Some((sum, count)) => Ok((tape.scale(sum, 1.0 / count as f64), false)),
        None => Ok((tape.leaf(Array2::zeros((1, 1))), true)),
    }
}

/// Evaluation grid for the characteristic-function discrepancy.
pub fn sigreg_t_grid(points: usize, range: f64) -> Vec<f64> {
    crate::util::linspace(-range, range, points)
}

/// Random unit columns, d x m.
pub fn sample_directions(d: usize, m: usize, rng: &mut impl Rng) -> M {
    let normal = rand_distr::Normal::new(0.0, 1.0).unwrap();
    let mut out = Array2::zeros((d, m));
    for j in 0..m {
        loop {
            let col: Vec<f64> =
                (0..d).map(|_| rand_distr::Distribution::sample(&normal, rng)).collect();
            let norm = col.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > 1e-12 {
                for (i, v) in col.iter().enumerate() {
                    out[[i, j]] = v / norm;
                }
                break;
            }
        }
    }
    out
}

/// Normalized Gaussian weights over the evaluation grid.
fn sigreg_weights(t_grid: &[f64]) -> Vec<f64> {
    let raw: Vec<f64> = t_grid.iter().map(|&t| (-t * t / 2.0).exp()).collect();
    let sum: f64 = raw.iter().sum();
    raw.iter().map(|w| w / sum).collect()
}

/// Loss value of a fully collapsed batch (all projections constant):
/// phi_hat(t) = 1, so the discrepancy is a closed form of the grid alone.
pub fn sigreg_collapsed_value(t_grid: &[f64]) -> f64 {
    let w = sigreg_weights(t_grid);
    t_grid
        .iter()
        .zip(&w)
        .map(|(&t, &wt)| {
            let gap = 1.0 - (-t * t / 2.0).exp();
            wt * gap * gap
        })
        .sum()
}

/// Sliced characteristic-function discrepancy against an isotropic Gaussian.
/// Projections are standardized per direction (std floored at 1e-6), then
/// compared to the standard-normal characteristic function on `t_grid`.
pub fn sigreg_loss(
    tape: &mut Tape,
    embeddings: Var,
    directions: &M,
    t_grid: &[f64],
) -> Result<Var> {
    let (b, d) = tape.value(embeddings).dim();
    if b < 2 {
        return Err(Error::validation("embeddings", "need at least 2 rows"));
    }
    let (dd, m) = directions.dim();
    if dd != d || m == 0 {
        return Err(Error::validation("directions", "must be d x M with M >= 1"));
    }
    for j in 0..m {
        let norm: f64 = (0..dd).map(|i| directions[[i, j]].powi(2)).sum::<f64>().sqrt();
        if (norm - 1.0).abs() > 1e-6 {
            return Err(Error::validation("directions", "columns must be unit-norm"));
        }
    }
    if t_grid.is_empty() {
        return Err(Error::validation("t_grid", "must be nonempty"));
    }
    let w = sigreg_weights(t_grid);
    let mut acc: Option<Var> = None;
    for j in 0..m {
        let u = Array2::from_shape_fn((d, 1), |(i, _)| directions[[i, j]]);
        let ul = tape.leaf(u);
        let proj = tape.matmul(embeddings, ul);
        let mean = tape.mean_all(proj);
        let centered = tape.sub(proj, mean);
        let sq = tape.square(centered);
        let var = tape.mean_all(sq);
        let std = tape.sqrt(var);
        let std_f = tape.max_with_scalar(std, 1e-6);
        let y = tape.div(centered, std_f);
        let mut dir_acc: Option<Var> = None;
        for (&t, &wt) in t_grid.iter().zip(&w) {
            let ty = tape.scale(y, t);
            let c = tape.cos(ty);
            let s = tape.sin(ty);
            let re = tape.mean_all(c);
            let im = tape.mean_all(s);
            let dre = tape.add_scalar(re, -(-t * t / 2.0).exp());
            let dre2 = tape.square(dre);
            let im2 = tape.square(im);
            let term = tape.add(dre2, im2);
            let wterm = tape.scale(term, wt);
            dir_acc = Some(match dir_acc {
                Some(a) => tape.add(a, wterm),
                None => wterm,
            });
        }
        let dl = dir_acc.unwrap();
        acc = Some(match acc {
            Some(a) => tape.add(a, dl),
            None => dl,
        });
    }
    Ok(tape.scale(acc.unwrap(), 1.0 / m as f64))
}

/// Nearest-neighbor spreading loss: L2-normalize rows, then
/// -(1/B) sum_i ln(min_{j != i} ||x_i - x_j|| + eps).
pub fn koleo_loss(tape: &mut Tape, embeddings: Var) -> Result<Var> {
    const EPS: f64 = 1e-8;
    let (b, _) = tape.value(embeddings).dim();
    if b < 2 {
        return Err(Error::validation("embeddings", "need at least 2 rows"));
    }
    let sq = tape.square(embeddings);
    let ss = tape.sum_rows(sq);
    let norm = tape.sqrt(ss);
    let floored = tape.max_with_scalar(norm, EPS);
    let xn = tape.div(embeddings, floored);
    let xt = tape.transpose(xn);
    let gram = tape.matmul(xn, xt);
    let neg2 = tape.scale(gram, -2.0);
    let d2 = tape.add_scalar(neg2, 2.0);
    let d2c = tape.max_with_scalar(d2, 0.0);
    let dist = tape.sqrt(d2c);
    // Push the diagonal out of the row minimum.
    let diag = Array2::from_shape_fn((b, b), |(i, j)| if i == j { 1e9 } else { 0.0 });
    let dl = tape.leaf(diag);
    let shifted = tape.add(dist, dl);
    let mins = tape.row_min(shifted);
    let le = tape.add_scalar(mins, EPS);
    let ln = tape.ln(le);
    let mean = tape.mean_all(ln);
    Ok(tape.neg(mean))
}

/// Every teacher tensor <- m * teacher + (1 - m) * student.
pub fn ema_update(teacher: &mut EncoderParams, student: &EncoderParams, m: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&m) {
        return Err(Error::validation("momentum", "must lie in [0, 1]"));
    }
    if teacher.t.len() != student.t.len() {
        return Err(Error::validation("params", "tensor sets differ"));
    }
    for (name, tv) in teacher.t.iter_mut() {
        let sv = student
            .t
            .get(name)
            .ok_or_else(|| Error::validation("params", format!("missing tensor {name}")))?;
        if sv.dim() != tv.dim() {
            return Err(Error::validation("params", format!("shape mismatch for {name}")));
        }
        tv.zip_mut_with(sv, |t, &s| *t = m * *t + (1.0 - m) * s);
    }
    Ok(())
}

/// center <- rate * center + (1 - rate) * row-mean of the batch logits.
pub fn update_center(center: &mut M, batch_teacher_logits: &M, rate: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&rate) {
        return Err(Error::validation("center_rate", "must lie in [0, 1]"));
    }
    let (b, k) = batch_teacher_logits.dim();
    if b == 0 || k != center.dim().1 {
        return Err(Error::validation("batch_teacher_logits", "empty batch or K mismatch"));
    }
    let mean = batch_teacher_logits.mean_axis(Axis(0)).unwrap();
    for (c, &m) in center.iter_mut().zip(mean.iter()) {
        *c = rate * *c + (1.0 - rate) * m;
    }
    Ok(())
}

impl TeacherState {
    pub fn ema_from(&mut self, student: &EncoderParams, m: f64) -> Result<()> {
        ema_update(&mut self.params, student, m)
    }

    pub fn update_centers(&mut self, cls_logits: &M, patch_logits: Option<&M>) -> Result<()> {
        update_center(&mut self.center_cls, cls_logits, self.center_rate)?;
        if let Some(p) = patch_logits {
            update_center(&mut self.center_patch, p, self.center_rate)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::fd_max_rel_err;
    use crate::util::stream_rng;
    use rand::Rng;

    fn rand_m(r: usize, c: usize, rng: &mut impl Rng) -> M {
        Array2::from_shape_fn((r, c), |_| 2.0 * rng.gen::<f64>() - 1.0)
    }

    #[test]
    fn dino_identical_logits_equals_teacher_entropy() {
        let mut rng = stream_rng(1, &[1]);
        let logits = rand_m(3, 6, &mut rng);
        let center = Array2::zeros((1, 6));
        let tau = 0.2;
        let mut tape = Tape::new();
        let s = tape.leaf(logits.clone());
        // Teacher view 0 pairs only with student view 1 (same logits).
        let loss = dino_loss(&mut tape, &[s, s], &[logits.clone()], &center, tau, tau).unwrap();
        let entropy = mean_row_entropy(&teacher_probs(&logits, &center, tau));
        assert!((tape.scalar(loss) - entropy).abs() < 1e-12);
    }

    #[test]
    fn dino_onehot_teacher_uniform_student_is_ln_k() {
        let k = 7;
        let mut teacher = Array2::zeros((1, k));
        teacher[[0, 3]] = 1000.0;
        let center = Array2::zeros((1, k));
        let mut tape = Tape::new();
        let s = tape.leaf(Array2::zeros((1, k)));
        let loss = dino_loss(&mut tape, &[s, s], &[teacher], &center, 0.1, 0.04).unwrap();
        assert!((tape.scalar(loss) - (k as f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn dino_matches_brute_force_pairwise_oracle() {
        let mut rng = stream_rng(2, &[2]);
        let (b, k) = (4, 5);
        let (tau_s, tau_t) = (0.1, 0.06);
        for trial in 0..5 {
            let center = rand_m(1, k, &mut rng);
            let teacher: Vec<M> = (0..2).map(|_| rand_m(b, k, &mut rng)).collect();
            let student: Vec<M> = (0..3).map(|_| rand_m(b, k, &mut rng)).collect();

            // Brute force: every (teacher global, student view) pair except
            // same-view, cross-entropy per row, grand mean over pairs.
            let mut total = 0.0;
            let mut pairs = 0;
            for (g, t) in teacher.iter().enumerate() {
                let p = teacher_probs(t, &center, tau_t);
                for (v, s) in student.iter().enumerate() {
                    if v == g {
                        continue;
                    }
                    let mut pair_acc = 0.0;
                    for i in 0..b {
                        let row: Vec<f64> = (0..k).map(|j| s[[i, j]] / tau_s).collect();
                        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                        let lse =
                            max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
                        for j in 0..k {
                            pair_acc -= p[[i, j]] * (row[j] - lse);
                        }
                    }
                    total += pair_acc / b as f64;
                    pairs += 1;
                }
            }
            let oracle = total / pairs as f64;

            let mut tape = Tape::new();
            let svars: Vec<Var> = student.iter().map(|s| tape.leaf(s.clone())).collect();
            let loss =
                dino_loss(&mut tape, &svars, &teacher, &center, tau_s, tau_t).unwrap();
            assert!(
                (tape.scalar(loss) - oracle).abs() < 1e-12,
                "trial {trial}: {} vs {oracle}",
                tape.scalar(loss)
            );
        }
    }

    #[test]
    fn dino_is_at_least_teacher_entropy() {
        let mut rng = stream_rng(3, &[3]);
        for _ in 0..10 {
            let t = rand_m(2, 8, &mut rng);
            let center = rand_m(1, 8, &mut rng);
            let mut tape = Tape::new();
            let s0 = tape.leaf(rand_m(2, 8, &mut rng));
            let s1 = tape.leaf(rand_m(2, 8, &mut rng));
            let loss =
                dino_loss(&mut tape, &[s0, s1], &[t.clone()], &center, 0.07, 0.07).unwrap();
            let h = mean_row_entropy(&teacher_probs(&t, &center, 0.07));
            assert!(tape.scalar(loss) >= h - 1e-10);
        }
    }

    #[test]
    fn dino_gradients_match_finite_differences() {
        let mut rng = stream_rng(4, &[4]);
        for _ in 0..3 {
            let teacher: Vec<M> = (0..2).map(|_| rand_m(3, 6, &mut rng)).collect();
            let center = rand_m(1, 6, &mut rng);
            let s: Vec<M> = (0..3).map(|_| rand_m(3, 6, &mut rng)).collect();
            let t2 = teacher.clone();
            let c2 = center.clone();
            let err = fd_max_rel_err(&s, move |tape, vs| {
                dino_loss(tape, vs, &t2, &c2, 0.1, 0.05).unwrap()
            });
            assert!(err < 1e-4, "dino fd err {err}");
        }
    }

    fn mask_from_indices(grid: (usize, usize), idx: &[usize]) -> PatchMask {
        let mut m = PatchMask::empty(grid);
        for &i in idx {
            m.grid[[i / grid.1, i % grid.1]] = true;
        }
        m
    }

    #[test]
    fn ibot_empty_mask_is_zero_with_flag() {
        let mut tape = Tape::new();
        let s = tape.leaf(Array2::zeros((4, 5)));
        let t = Array2::zeros((4, 5));
        let c = Array2::zeros((1, 5));
        let (loss, empty) =
            ibot_loss(&mut tape, s, &t, &PatchMask::empty((2, 2)), &c, 0.1, 0.05).unwrap();
        assert!(empty);
        assert_eq!(tape.scalar(loss), 0.0);
    }

    #[test]
    fn ibot_single_position_identical_logits_is_entropy() {
        let mut rng = stream_rng(5, &[5]);
        let logits = rand_m(4, 6, &mut rng);
        let c = Array2::zeros((1, 6));
        let mask = mask_from_indices((2, 2), &[2]);
        let mut tape = Tape::new();
        let s = tape.leaf(logits.clone());
        let (loss, empty) = ibot_loss(&mut tape, s, &logits, &mask, &c, 0.2, 0.2).unwrap();
        assert!(!empty);
        let row = logits.select(Axis(0), &[2]);
        let h = mean_row_entropy(&teacher_probs(&row, &c, 0.2));
        assert!((tape.scalar(loss) - h).abs() < 1e-12);
    }

    #[test]
    fn ibot_two_positions_match_hand_oracle() {
        let mut rng = stream_rng(6, &[6]);
        let (tau_s, tau_t) = (0.1, 0.07);
        let s_logits = rand_m(4, 3, &mut rng);
        let t_logits = rand_m(4, 3, &mut rng);
        let center = rand_m(1, 3, &mut rng);
        let mask = mask_from_indices((2, 2), &[1, 3]);

        let mut oracle = 0.0;
        for &pos in &[1usize, 3] {
            let t_row = t_logits.select(Axis(0), &[pos]);
            let p = teacher_probs(&t_row, &center, tau_t);
            let row: Vec<f64> = (0..3).map(|j| s_logits[[pos, j]] / tau_s).collect();
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            for j in 0..3 {
                oracle -= p[[0, j]] * (row[j] - lse);
            }
        }
        oracle /= 2.0;

        let mut tape = Tape::new();
        let s = tape.leaf(s_logits);
        let (loss, _) = ibot_loss(&mut tape, s, &t_logits, &mask, &center, tau_s, tau_t).unwrap();
        assert!((tape.scalar(loss) - oracle).abs() < 1e-12);
    }

    #[test]
    fn ibot_gradients_match_finite_differences() {
        let mut rng = stream_rng(7, &[7]);
        for _ in 0..3 {
            let t = rand_m(6, 5, &mut rng);
            let c = rand_m(1, 5, &mut rng);
            let mask = mask_from_indices((2, 3), &[0, 4, 5]);
            let s = rand_m(6, 5, &mut rng);
            let err = fd_max_rel_err(&[s], move |tape, vs| {
                ibot_loss(tape, vs[0], &t, &mask, &c, 0.1, 0.05).unwrap().0
            });
            assert!(err < 1e-4, "ibot fd err {err}");
        }
    }

    #[test]
    fn sigreg_rejects_tiny_batch_and_bad_directions() {
        let mut tape = Tape::new();
        let e = tape.leaf(Array2::zeros((1, 4)));
        let dirs = sample_directions(4, 2, &mut stream_rng(8, &[8]));
        let grid = sigreg_t_grid(17, 4.0);
        assert!(matches!(
            sigreg_loss(&mut tape, e, &dirs, &grid),
            Err(Error::Validation { .. })
        ));
        let e2 = tape.leaf(Array2::zeros((4, 4)));
        let bad = &dirs * 2.0;
        assert!(matches!(
            sigreg_loss(&mut tape, e2, &bad, &grid),
            Err(Error::Validation { .. })
        ));
    }

    #[test]
    fn sigreg_collapsed_batch_matches_closed_form() {
        let grid = sigreg_t_grid(17, 4.0);
        let dirs = sample_directions(5, 3, &mut stream_rng(9, &[9]));
        let mut tape = Tape::new();
        let e = tape.leaf(Array2::from_elem((8, 5), 0.37));
        let loss = sigreg_loss(&mut tape, e, &dirs, &grid).unwrap();
        let oracle = sigreg_collapsed_value(&grid);
        assert!((tape.scalar(loss) - oracle).abs() < 1e-12);
    }

    #[test]
    fn sigreg_invariant_under_batch_shift() {
        let mut rng = stream_rng(10, &[10]);
        let e = rand_m(16, 6, &mut rng);
        let shift = rand_m(1, 6, &mut rng);
        let shifted = &e + &shift;
        let dirs = sample_directions(6, 4, &mut rng);
        let grid = sigreg_t_grid(17, 4.0);
        let mut tape = Tape::new();
        let v1 = tape.leaf(e);
        let v2 = tape.leaf(shifted);
        let l1 = sigreg_loss(&mut tape, v1, &dirs, &grid).unwrap();
        let l2 = sigreg_loss(&mut tape, v2, &dirs, &grid).unwrap();
        assert!((tape.scalar(l1) - tape.scalar(l2)).abs() < 1e-9);
    }

    #[test]
    fn sigreg_gradients_match_finite_differences() {
        let mut rng = stream_rng(11, &[11]);
        for _ in 0..3 {
            let e = rand_m(6, 4, &mut rng);
            let dirs = sample_directions(4, 3, &mut rng);
            let grid = sigreg_t_grid(9, 4.0);
            let err = fd_max_rel_err(&[e], move |tape, vs| {
                sigreg_loss(tape, vs[0], &dirs, &grid).unwrap()
            });
            assert!(err < 1e-4, "sigreg fd err {err}");
        }
    }

    #[test]
    fn koleo_antipodal_pair_is_minus_ln_2() {
        let e = Array2::from_shape_vec((2, 2), vec![1.0, 0.0, -1.0, 0.0]).unwrap();
        let mut tape = Tape::new();
        let v = tape.leaf(e);
        let loss = koleo_loss(&mut tape, v).unwrap();
        assert_eq!(tape.scalar(loss), -(2.0f64 + 1e-8).ln());
    }

    #[test]
    fn koleo_is_permutation_invariant() {
        let mut rng = stream_rng(12, &[12]);
        let e = rand_m(7, 5, &mut rng);
        let perm = [3usize, 0, 6, 1, 5, 2, 4];
        let ep = e.select(Axis(0), &perm);
        let mut tape = Tape::new();
        let v1 = tape.leaf(e);
        let v2 = tape.leaf(ep);
        let l1 = koleo_loss(&mut tape, v1).unwrap();
        let l2 = koleo_loss(&mut tape, v2).unwrap();
        assert_eq!(tape.scalar(l1), tape.scalar(l2));
    }

    #[test]
    fn koleo_duplicate_row_blows_up() {
        let e = Array2::from_shape_vec(
            (3, 2),
            vec![1.0, 0.0, 1.0, 0.0, 0.0, 1.0],
        )
        .unwrap();
        let mut tape = Tape::new();
        let v = tape.leaf(e);
        let loss = koleo_loss(&mut tape, v).unwrap();
        // Two of three terms are ln(eps); the value is large and positive.
        let val = tape.scalar(loss);
        assert!(val > 10.0 && val.is_finite(), "got {val}");
    }

    #[test]
    fn koleo_decreases_as_points_spread() {
        let make = |theta: f64| {
            Array2::from_shape_vec(
                (3, 2),
                vec![
                    1.0,
                    0.0,
                    theta.cos(),
                    theta.sin(),
                    (2.0 * theta).cos(),
                    (2.0 * theta).sin(),
                ],
            )
            .unwrap()
        };
        let mut vals = Vec::new();
        for theta in [0.2, 0.4, 0.8] {
            let mut tape = Tape::new();
            let v = tape.leaf(make(theta));
            let loss = koleo_loss(&mut tape, v).unwrap();
            vals.push(tape.scalar(loss));
        }
        assert!(vals[0] > vals[1] && vals[1] > vals[2], "{vals:?}");
    }

    #[test]
    fn koleo_gradients_match_finite_differences() {
        let mut rng = stream_rng(13, &[13]);
        for _ in 0..3 {
            // Spread points: FD needs the argmin structure stable under h.
            let e = rand_m(5, 4, &mut rng) * 3.0;
            let err =
                fd_max_rel_err(&[e], |tape, vs| koleo_loss(tape, vs[0]).unwrap());
            assert!(err < 1e-4, "koleo fd err {err}");
        }
    }

    #[test]
    fn ema_update_examples() {
        let cfg = crate::encoder::EncoderConfig {
            image_size: 8,
            patch_size: 4,
            dim: 8,
            depth: 1,
            heads: 2,
            head_prototypes: 8,
            head_bottleneck: 4,
            head_hidden: 8,
        };
        let student = EncoderParams::new(&cfg, 1).unwrap();
        let mut teacher = EncoderParams::new(&cfg, 2).unwrap();
        let orig = teacher.clone();

        ema_update(&mut teacher, &student, 1.0).unwrap();
        assert_eq!(teacher.t, orig.t);

        ema_update(&mut teacher, &student, 0.0).unwrap();
        assert_eq!(teacher.t, student.t);

        let mut t2 = orig.clone();
        for m in t2.t.values_mut() {
            m.fill(2.0);
        }
        let mut s2 = student.clone();
        for m in s2.t.values_mut() {
            m.fill(4.0);
        }
        ema_update(&mut t2, &s2, 0.5).unwrap();
        assert!(t2.t.values().all(|m| m.iter().all(|&v| v == 3.0)));
    }

    #[test]
    fn ema_shape_mismatch_is_validation_error() {
        let cfg_a = crate::encoder::EncoderConfig {
            image_size: 8,
            patch_size: 4,
            dim: 8,
            depth: 1,
            heads: 2,
            head_prototypes: 8,
            head_bottleneck: 4,
            head_hidden: 8,
        };
        let cfg_b = crate::encoder::EncoderConfig { dim: 16, heads: 4, ..cfg_a.clone() };
        let student = EncoderParams::new(&cfg_b, 1).unwrap();
        let mut teacher = EncoderParams::new(&cfg_a, 2).unwrap();
        assert!(matches!(
            ema_update(&mut teacher, &student, 0.9),
            Err(Error::Validation { .. })
        ));
    }

    #[test]
    fn update_center_examples() {
        let mut rng = stream_rng(14, &[14]);
        let batch = rand_m(6, 4, &mut rng);
        let mean = batch.mean_axis(Axis(0)).unwrap();

        let mut c = rand_m(1, 4, &mut rng);
        let orig = c.clone();
        update_center(&mut c, &batch, 1.0).unwrap();
        assert_eq!(c, orig);

        update_center(&mut c, &batch, 0.0).unwrap();
        for j in 0..4 {
            assert!((c[[0, j]] - mean[j]).abs() < 1e-15);
        }

        // Two applications at rate 0.5: center = 0.75 mean + 0.25 center0.
        let mut c2 = orig.clone();
        update_center(&mut c2, &batch, 0.5).unwrap();
        update_center(&mut c2, &batch, 0.5).unwrap();
        for j in 0..4 {
            let expect = 0.75 * mean[j] + 0.25 * orig[[0, j]];
            assert!((c2[[0, j]] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn loss_breakdown_total_recomputes_exactly() {
        let mut rng = stream_rng(15, &[15]);
        for _ in 0..20 {
            let lb = LossBreakdown::compose(
                rng.gen::<f64>(),
                rng.gen::<f64>(),
                rng.gen::<f64>(),
                (1.0, rng.gen::<f64>(), 0.1),
            );
            assert_eq!(lb.total, lb.recompute_total());
        }
    }

    #[test]
    fn tau_teacher_warmup_schedule() {
        let cfg = ObjectiveConfig::default();
        let total = 1000;
        assert_eq!(cfg.tau_teacher_at(0, total), 0.04);
        assert_eq!(cfg.tau_teacher_at(100, total), 0.07);
        assert_eq!(cfg.tau_teacher_at(999, total), 0.07);
        let mid = cfg.tau_teacher_at(50, total);
        assert!((mid - 0.055).abs() < 1e-12);
    }
}
