//! Frozen-feature evaluation: class-token feature extraction on a per-slice
//! (2-D) or volume-averaged (3-D) track, simple regularized heads for
//! classification, multi-label, regression, and survival targets, seed-
//! averaged benchmark reports, few-shot sweeps, and patch-similarity maps.
//!
//! Heads are fit by full-batch gradient descent with Armijo backtracking
//! (ridge regression closed-form) on standardized features; the
//! regularization strength is selected on the validation split from a fixed
//! log grid. Volume-level features use an order-independent exact mean over
//! slice embeddings, so the 3-D track is bitwise invariant to slice
//! permutation and to duplicating every slice.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::M;
use crate::dataio::{NormalizeConfig, Volume};
use crate::encoder::{embed_image, EncoderParams};
use crate::error::{Error, Result};
use crate::util::{bilinear_resize, exact_mean, exact_sum, stream_rng};

const TAG_HEAD: u64 = 0x4ead;
const TAG_SHOT: u64 = 0x5407;

/// Regularization strengths tried during head fitting, weakest first.
pub const LAMBDA_GRID: [f64; 7] = [1e-4, 1e-3, 1e-2, 1e-1, 1.0, 1e1, 1e2];

/// Seeds used for report averaging.
pub const BENCH_SEEDS: [u64; 5] = [0, 1, 2, 3, 4];

const GD_MAX_ITERS: usize = 10_000;
const GD_GRAD_TOL: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Classification,
    Multilabel,
    Regression,
    Survival,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum Track {
    #[serde(rename = "2d")]
    TwoD,
    #[serde(rename = "3d")]
    ThreeD,
    #[default]
    #[serde(rename = "both")]
    Both,
}

/// Per-kind targets, one entry per feature row.
#[derive(Clone, Debug)]
pub enum Targets {
    /// Class ids.
    Classes(Vec<usize>),
    /// N x L matrix of {0,1} label indicators.
    Binary(Array2<f64>),
    Reals(Vec<f64>),
    /// (time, event observed) pairs; times must be positive.
    Survival(Vec<(f64, bool)>),
}

impl Targets {
    pub fn len(&self) -> usize {
        match self {
            Targets::Classes(v) => v.len(),
            Targets::Binary(m) => m.nrows(),
            Targets::Reals(v) => v.len(),
            Targets::Survival(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn matches(&self, kind: TaskKind) -> bool {
        matches!(
            (self, kind),
            (Targets::Classes(_), TaskKind::Classification)
                | (Targets::Binary(_), TaskKind::Multilabel)
                | (Targets::Reals(_), TaskKind::Regression)
                | (Targets::Survival(_), TaskKind::Survival)
        )
    }
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct Splits {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// Interleaved 60/20/20 split by row index; deterministic.
pub fn default_splits(n: usize) -> Splits {
    let mut s = Splits::default();
    for i in 0..n {
        match i % 5 {
            0 | 1 | 2 => s.train.push(i),
            3 => s.val.push(i),
            _ => s.test.push(i),
        }
    }
    s
}

#[derive(Clone, Debug)]
pub struct ProbeTask {
    pub name: String,
    pub kind: TaskKind,
    pub track: Track,
    /// N x d frozen features.
    pub features: M,
    pub targets: Targets,
    pub splits: Splits,
}

impl ProbeTask {
    pub fn validate(&self) -> Result<()> {
        if self.name.is_empty() {
            return Err(Error::validation("name", "task name must be nonempty"));
        }
        let n = self.features.nrows();
        if self.targets.len() != n {
            return Err(Error::validation(
                self.name.clone(),
                format!("{} feature rows but {} targets", n, self.targets.len()),
            ));
        }
        if !self.targets.matches(self.kind) {
            return Err(Error::validation(
                self.name.clone(),
                "target variant does not match the task kind",
            ));
        }
        let mut seen = vec![false; n];
        for (set, idx) in
            [("train", &self.splits.train), ("val", &self.splits.val), ("test", &self.splits.test)]
        {
            for &i in idx {
                if i >= n {
                    return Err(Error::validation(
                        self.name.clone(),
                        format!("{set} split index {i} out of {n} rows"),
                    ));
                }
                if seen[i] {
                    return Err(Error::validation(
                        self.name.clone(),
                        format!("splits overlap at row {i}"),
                    ));
                }
                seen[i] = true;
            }
        }
        match &self.targets {
            Targets::Survival(pairs) => {
                if pairs.iter().any(|&(t, _)| !(t > 0.0)) {
                    return Err(Error::validation(
                        self.name.clone(),
                        "survival times must be positive",
                    ));
                }
            }
            Targets::Binary(m) => {
                if m.iter().any(|&v| v != 0.0 && v != 1.0) {
                    return Err(Error::validation(
                        self.name.clone(),
                        "multilabel targets must be 0 or 1",
                    ));
                }
            }
            _ => {}
        }
        Ok(())
    }
}

/// One metric averaged over seeds; mean and std always recompute from the
/// stored per-seed values.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MetricReport {
    pub task: String,
    pub metric: String,
    pub values: Vec<f64>,
    pub mean: f64,
    pub std: f64,
}

impl MetricReport {
    pub fn from_values(task: String, metric: String, values: Vec<f64>) -> Self {
        let mean = exact_mean(&values);
        let std = sample_std(&values);
        MetricReport { task, metric, values, mean, std }
    }
}

/// Sample standard deviation (n-1 denominator); 0 for fewer than 2 values.
pub fn sample_std(values: &[f64]) -> f64 {
    if values.len() < 2 {
        return 0.0;
    }
    let m = exact_mean(values);
    let sq: Vec<f64> = values.iter().map(|v| (v - m) * (v - m)).collect();
    (exact_sum(&sq) / (values.len() - 1) as f64).sqrt()
}

// ---------------------------------------------------------------------------
// Feature extraction

/// Class-token features. 2-D track: one row per slice, in input order.
/// 3-D track: one row per volume, the exact per-dimension mean over its
/// slices (bitwise invariant to slice order and whole-volume duplication).
pub fn extract_features(
    params: &EncoderParams,
    volumes: &[Vec<Array2<f64>>],
    track: Track,
) -> Result<M> {
    if volumes.is_empty() {
        return Err(Error::validation("volumes", "no input volumes"));
    }
    for (i, v) in volumes.iter().enumerate() {
        if v.is_empty() {
            return Err(Error::validation("volumes", format!("volume {i} has no slices")));
        }
    }
    let d = params.cfg.dim;
    match track {
        Track::Both => {
            Err(Error::validation("track", "extraction requires a concrete track (2d or 3d)"))
        }
        Track::TwoD => {
            let total: usize = volumes.iter().map(Vec::len).sum();
            let mut out = Array2::zeros((total, d));
            let mut r = 0;
            for v in volumes {
                for slice in v {
                    let (cls, _) = embed_image(params, slice, None)?;
                    out.row_mut(r).assign(&cls.row(0));
                    r += 1;
                }
            }
            Ok(out)
        }
        Track::ThreeD => {
            let mut out = Array2::zeros((volumes.len(), d));
            for (r, v) in volumes.iter().enumerate() {
                let mut cols: Vec<Vec<f64>> = vec![Vec::with_capacity(v.len()); d];
                for slice in v {
                    let (cls, _) = embed_image(params, slice, None)?;
                    for (j, col) in cols.iter_mut().enumerate() {
                        col.push(cls[[0, j]]);
                    }
                }
                for (j, col) in cols.iter().enumerate() {
                    out[[r, j]] = exact_mean(col);
                }
            }
            Ok(out)
        }
    }
}

/// Normalized slices of one volume, resized to `resolution`.
pub fn volume_slices(
    v: &Volume,
    ncfg: &NormalizeConfig,
    resolution: usize,
) -> Result<Vec<Array2<f64>>> {
    let depth = v.voxels.dim().0;
    (0..depth)
        .map(|i| {
            v.slice_normalized(i, ncfg).map(|p| bilinear_resize(&p, resolution, resolution))
        })
        .collect()
}

/// 2-D or 3-D features straight from stored volumes.
pub fn volume_features(
    params: &EncoderParams,
    volumes: &[Volume],
    ncfg: &NormalizeConfig,
    resolution: usize,
    track: Track,
) -> Result<M> {
    let slices: Vec<Vec<Array2<f64>>> = volumes
        .iter()
        .map(|v| volume_slices(v, ncfg, resolution))
        .collect::<Result<_>>()?;
    extract_features(params, &slices, track)
}

// ---------------------------------------------------------------------------
// Metrics

/// Fraction of exact matches; None on empty input.
pub fn accuracy(pred: &[usize], truth: &[usize]) -> Option<f64> {
    if truth.is_empty() {
        return None;
    }
    let hits = pred.iter().zip(truth).filter(|(p, t)| p == t).count();
    Some(hits as f64 / truth.len() as f64)
}

/// Mean per-class recall over the classes present in `truth`; undefined
/// (None) when the evaluation set holds fewer than two classes.
pub fn balanced_accuracy(pred: &[usize], truth: &[usize]) -> Option<f64> {
    let classes: BTreeSet<usize> = truth.iter().copied().collect();
    if classes.len() < 2 {
        return None;
    }
    let recalls: Vec<f64> = classes
        .iter()
        .map(|&c| {
            let total = truth.iter().filter(|&&t| t == c).count();
            let hits = pred.iter().zip(truth).filter(|&(&p, &t)| t == c && p == c).count();
            hits as f64 / total as f64
        })
        .collect();
    Some(exact_mean(&recalls))
}

/// Mann-Whitney AUC via average ranks; tied scores count one half. None when
/// either class is absent.
pub fn auc_mann_whitney(scores: &[f64], positive: &[bool]) -> Option<f64> {
    assert_eq!(scores.len(), positive.len());
    let p = positive.iter().filter(|&&b| b).count();
    let n = scores.len() - p;
    if p == 0 || n == 0 {
        return None;
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_pos = 0.0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j < idx.len() && scores[idx[j]] == scores[idx[i]] {
            j += 1;
        }
        // Average 1-based rank of the tie group [i, j).
        let avg = (i + 1 + j) as f64 / 2.0;
        for &k in &idx[i..j] {
            if positive[k] {
                rank_pos += avg;
            }
        }
        i = j;
    }
    let u = rank_pos - (p * (p + 1)) as f64 / 2.0;
    Some(u / (p as f64 * n as f64))
}

/// 1 - SS_res/SS_tot about the truth mean; undefined when truth is constant.
pub fn r_squared(pred: &[f64], truth: &[f64]) -> Option<f64> {
    if truth.is_empty() {
        return None;
    }
    let m = exact_mean(truth);
    let tot: Vec<f64> = truth.iter().map(|t| (t - m) * (t - m)).collect();
    let ss_tot = exact_sum(&tot);
    if ss_tot == 0.0 {
        return None;
    }
    let res: Vec<f64> = pred.iter().zip(truth).map(|(p, t)| (t - p) * (t - p)).collect();
    Some(1.0 - exact_sum(&res) / ss_tot)
}

/// Concordance over comparable pairs: (i, j) is comparable when i has an
/// observed event strictly before j's time. Concordant when the earlier
/// failure carries the higher risk; risk ties count one half. None when no
/// pair is comparable.
pub fn concordance_index(risk: &[f64], time: &[f64], event: &[bool]) -> Option<f64> {
    let n = risk.len();
    let mut num = 0.0;
    let mut den = 0.0;
    for i in 0..n {
        if !event[i] {
            continue;
        }
        for j in 0..n {
            if time[i] < time[j] {
                den += 1.0;
                if risk[i] > risk[j] {
                    num += 1.0;
                } else if risk[i] == risk[j] {
                    num += 0.5;
                }
            }
        }
    }
    if den == 0.0 {
        None
    } else {
        Some(num / den)
    }
}

/// Metric the reports average for each task kind.
pub fn primary_metric(kind: TaskKind) -> &'static str {
    match kind {
        TaskKind::Classification => "bacc",
        TaskKind::Multilabel => "auc",
        TaskKind::Regression => "r2",
        TaskKind::Survival => "cindex",
    }
}

#[derive(Clone, Debug)]
pub struct Metric {
    pub name: &'static str,
    /// None marks a metric that is undefined on this evaluation set (for
    /// example a single-class test split), as opposed to a zero score.
    pub value: Option<f64>,
}

// ---------------------------------------------------------------------------
// Heads

/// A fitted linear head plus the feature standardization it was trained
/// under. Weight layout: classification (d+1) x C and multilabel (d+1) x L
/// score columns, both with the bias in the last row; regression (d+1) x 1;
/// survival d x 1 (the proportional-hazards intercept cancels).
#[derive(Clone, Debug)]
pub struct HeadWeights {
    pub kind: TaskKind,
    pub lambda: f64,
    pub mu: Array1<f64>,
    pub sd: Array1<f64>,
    pub w: M,
}

fn standardize_stats(features: &M, idx: &[usize]) -> (Array1<f64>, Array1<f64>) {
    let d = features.ncols();
    let mut mu = Array1::zeros(d);
    let mut sd = Array1::ones(d);
    if idx.is_empty() {
        return (mu, sd);
    }
    for j in 0..d {
        let vals: Vec<f64> = idx.iter().map(|&i| features[[i, j]]).collect();
        let m = exact_mean(&vals);
        let sq: Vec<f64> = vals.iter().map(|v| (v - m) * (v - m)).collect();
        let s = exact_mean(&sq).sqrt();
        mu[j] = m;
        sd[j] = if s < 1e-12 { 1.0 } else { s };
    }
    (mu, sd)
}

fn design(features: &M, idx: &[usize], mu: &Array1<f64>, sd: &Array1<f64>, bias: bool) -> M {
    let d = features.ncols();
    let mut z = Array2::zeros((idx.len(), d + bias as usize));
    for (r, &i) in idx.iter().enumerate() {
        for j in 0..d {
            z[[r, j]] = (features[[i, j]] - mu[j]) / sd[j];
        }
        if bias {
            z[[r, d]] = 1.0;
        }
    }
    z
}

/// Full-batch gradient descent with Armijo backtracking, run until the
/// gradient norm drops below 1e-6 or 10,000 iterations elapse.
fn gd_minimize(mut w: M, obj: &dyn Fn(&M) -> (f64, M)) -> M {
    let (mut f, mut g) = obj(&w);
    let mut t_prev = 1.0f64;
    for _ in 0..GD_MAX_ITERS {
        let gnorm2: f64 = g.iter().map(|v| v * v).sum();
        if gnorm2.sqrt() < GD_GRAD_TOL {
            break;
        }
        let mut t = (t_prev * 2.0).min(1e6);
        let mut accepted = false;
        while t >= 1e-20 {
            let cand = &w - &g.mapv(|v| v * t);
            let (fc, gc) = obj(&cand);
            if fc.is_finite() && fc <= f - 0.5 * t * gnorm2 {
                w = cand;
                f = fc;
                g = gc;
                accepted = true;
                break;
            }
            t *= 0.5;
        }
        if !accepted {
            break;
        }
        t_prev = t;
    }
    w
}

fn seeded_init(rows: usize, cols: usize, seed: u64, tag: u64) -> M {
    let mut rng = stream_rng(seed, &[TAG_HEAD, tag]);
    Array2::from_shape_fn((rows, cols), |_| 0.01 * rng.sample::<f64, _>(StandardNormal))
}

/// Softmax cross-entropy head on design matrix `z` (bias column last); the
/// bias row is not regularized.
fn fit_softmax(z: &M, y: &[usize], classes: usize, lambda: f64, seed: u64, tag: u64) -> M {
    let n = z.nrows() as f64;
    let d_w = z.ncols() - 1;
    let obj = move |w: &M| -> (f64, M) {
        let mut p = z.dot(w);
        let mut data_loss = 0.0;
        for (i, mut row) in p.rows_mut().into_iter().enumerate() {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            data_loss += lse - row[y[i]];
            for v in row.iter_mut() {
                *v = (*v - lse).exp();
            }
            row[y[i]] -= 1.0;
        }
        let mut grad = z.t().dot(&p);
        grad.mapv_inplace(|v| v / n);
        let mut reg = 0.0;
        for r in 0..d_w {
            for c in 0..w.ncols() {
                let v = w[[r, c]];
                reg += v * v;
                grad[[r, c]] += 2.0 * lambda * v;
            }
        }
        (data_loss / n + lambda * reg, grad)
    };
    gd_minimize(seeded_init(z.ncols(), classes, seed, tag), &obj)
}

/// Proportional-hazards head: negative log partial likelihood with Breslow
/// tie handling, normalized per event. `order` sorts rows by time descending
/// so the risk set accumulates incrementally.
fn fit_cox(
    z: &M,
    order: &[usize],
    time: &[f64],
    event: &[bool],
    lambda: f64,
    seed: u64,
    tag: u64,
) -> M {
    let d = z.ncols();
    let obj = move |w: &M| -> (f64, M) {
        let eta = z.dot(w);
        let m = eta.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut s_sum = 0.0;
        let mut wv = Array1::<f64>::zeros(d);
        let mut loss = 0.0;
        let mut grad = Array1::<f64>::zeros(d);
        let mut n_ev = 0usize;
        let mut i = 0;
        while i < order.len() {
            let t0 = time[order[i]];
            let mut j = i;
            while j < order.len() && time[order[j]] == t0 {
                let r = order[j];
                let e = (eta[[r, 0]] - m).exp();
                s_sum += e;
                wv.scaled_add(e, &z.row(r));
                j += 1;
            }
            for &r in &order[i..j] {
                if event[r] {
                    n_ev += 1;
                    loss += s_sum.ln() + m - eta[[r, 0]];
                    grad.scaled_add(1.0 / s_sum, &wv);
                    grad -= &z.row(r);
                }
            }
            i = j;
        }
        let ne = n_ev as f64;
        let mut g2 = grad.insert_axis(Axis(1));
        g2.mapv_inplace(|v| v / ne);
        let mut reg = 0.0;
        for r in 0..d {
            let v = w[[r, 0]];
            reg += v * v;
            g2[[r, 0]] += 2.0 * lambda * v;
        }
        (loss / ne + lambda * reg, g2)
    };
    gd_minimize(seeded_init(d, 1, seed, tag), &obj)
}

fn cholesky(a: &M) -> Result<M> {
    let n = a.nrows();
    let mut l = Array2::<f64>::zeros((n, n));
    for i in 0..n {
        for j in 0..=i {
            let mut s = a[[i, j]];
            for k in 0..j {
                s -= l[[i, k]] * l[[j, k]];
            }
            if i == j {
                if s <= 0.0 {
                    return Err(Error::validation("ridge", "normal matrix is not positive definite"));
                }
                l[[i, i]] = s.sqrt();
            } else {
                l[[i, j]] = s / l[[j, j]];
            }
        }
    }
    Ok(l)
}

fn chol_solve(l: &M, b: &Array1<f64>) -> Array1<f64> {
    let n = l.nrows();
    let mut y = Array1::zeros(n);
    for i in 0..n {
        let mut s = b[i];
        for k in 0..i {
            s -= l[[i, k]] * y[k];
        }
        y[i] = s / l[[i, i]];
    }
    let mut x = Array1::zeros(n);
    for i in (0..n).rev() {
        let mut s = y[i];
        for k in i + 1..n {
            s -= l[[k, i]] * x[k];
        }
        x[i] = s / l[[i, i]];
    }
    x
}

/// Closed-form ridge on the design matrix; the bias column (last) is not
/// regularized, which keeps the normal matrix positive definite for any
/// lambda > 0.
fn ridge_solve(z: &M, y: &[f64], lambda: f64) -> Result<M> {
    let p = z.ncols();
    let mut a = z.t().dot(z);
    for j in 0..p - 1 {
        a[[j, j]] += lambda;
    }
    let b = z.t().dot(&Array1::from(y.to_vec()));
    let l = cholesky(&a)?;
    Ok(chol_solve(&l, &b).insert_axis(Axis(1)))
}

fn fit_at(task: &ProbeTask, seed: u64, lambda: f64) -> Result<HeadWeights> {
    let train = &task.splits.train;
    let (mu, sd) = standardize_stats(&task.features, train);
    let tag = name_tag(&task.name);
    let w = match &task.targets {
        Targets::Classes(y) => {
            let ytr: Vec<usize> = train.iter().map(|&i| y[i]).collect();
            let distinct: BTreeSet<usize> = ytr.iter().copied().collect();
            if distinct.len() < 2 {
                return Err(Error::validation(
                    task.name.clone(),
                    "train split holds a single class",
                ));
            }
            let z = design(&task.features, train, &mu, &sd, true);
            let classes = y.iter().copied().max().unwrap_or(0) + 1;
            fit_softmax(&z, &ytr, classes, lambda, seed, tag)
        }
        Targets::Binary(b) => {
            let z = design(&task.features, train, &mu, &sd, true);
            let mut w = Array2::zeros((z.ncols(), b.ncols()));
            for l in 0..b.ncols() {
                let ytr: Vec<usize> = train.iter().map(|&i| (b[[i, l]] != 0.0) as usize).collect();
                let distinct: BTreeSet<usize> = ytr.iter().copied().collect();
                if distinct.len() < 2 {
                    // Constant label: leave a zero score column; its AUC is
                    // undefined wherever the test split is also one-sided.
                    continue;
                }
                let wl = fit_softmax(&z, &ytr, 2, lambda, seed, tag ^ (l as u64 + 1));
                for r in 0..z.ncols() {
                    w[[r, l]] = wl[[r, 1]] - wl[[r, 0]];
                }
            }
            w
        }
        Targets::Reals(y) => {
            let z = design(&task.features, train, &mu, &sd, true);
            let ytr: Vec<f64> = train.iter().map(|&i| y[i]).collect();
            ridge_solve(&z, &ytr, lambda)?
        }
        Targets::Survival(pairs) => {
            if !train.iter().any(|&i| pairs[i].1) {
                return Err(Error::validation(
                    task.name.clone(),
                    "train split has no observed events",
                ));
            }
            let z = design(&task.features, train, &mu, &sd, false);
            let time: Vec<f64> = train.iter().map(|&i| pairs[i].0).collect();
            let event: Vec<bool> = train.iter().map(|&i| pairs[i].1).collect();
            let mut order: Vec<usize> = (0..time.len()).collect();
            order.sort_by(|&a, &b| time[b].total_cmp(&time[a]));
            fit_cox(&z, &order, &time, &event, lambda, seed, tag)
        }
    };
    Ok(HeadWeights { kind: task.kind, lambda, mu, sd, w })
}

/// Fit the task's head at every grid regularization strength and keep the
/// one scoring best on the validation split (train split when validation is
/// empty or undefined; earliest grid entry wins ties). Deterministic given
/// (task, seed).
pub fn fit_head(task: &ProbeTask, seed: u64) -> Result<HeadWeights> {
    task.validate()?;
    if task.splits.train.is_empty() {
        return Err(Error::validation(task.name.clone(), "train split is empty"));
    }
    let mut best: Option<(f64, HeadWeights)> = None;
    for &lambda in &LAMBDA_GRID {
        let head = fit_at(task, seed, lambda)?;
        let score = metric_on(task, &head, &task.splits.val)
            .or_else(|| metric_on(task, &head, &task.splits.train))
            .unwrap_or(f64::NEG_INFINITY);
        if best.as_ref().map_or(true, |(b, _)| score > *b) {
            best = Some((score, head));
        }
    }
    Ok(best.expect("grid is nonempty").1)
}

/// Raw head outputs for the given rows: class logits, per-label scores,
/// predictions, or risk scores depending on kind.
fn head_scores(head: &HeadWeights, features: &M, idx: &[usize]) -> M {
    let bias = head.kind != TaskKind::Survival;
    design(features, idx, &head.mu, &head.sd, bias).dot(&head.w)
}

fn argmax_rows(scores: &M) -> Vec<usize> {
    scores
        .rows()
        .into_iter()
        .map(|row| {
            let mut best = 0;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}

fn metrics_on(task: &ProbeTask, head: &HeadWeights, idx: &[usize]) -> Vec<Metric> {
    if idx.is_empty() {
        return Vec::new();
    }
    let s = head_scores(head, &task.features, idx);
    match &task.targets {
        Targets::Classes(y) => {
            let truth: Vec<usize> = idx.iter().map(|&i| y[i]).collect();
            let pred = argmax_rows(&s);
            let mut out = vec![
                Metric { name: "bacc", value: balanced_accuracy(&pred, &truth) },
                Metric { name: "acc", value: accuracy(&pred, &truth) },
            ];
            if s.ncols() == 2 {
                let scores: Vec<f64> = (0..idx.len()).map(|r| s[[r, 1]] - s[[r, 0]]).collect();
                let pos: Vec<bool> = truth.iter().map(|&t| t == 1).collect();
                out.push(Metric { name: "auc", value: auc_mann_whitney(&scores, &pos) });
            }
            out
        }
        Targets::Binary(b) => {
            let mut per = Vec::new();
            for l in 0..b.ncols() {
                let pos: Vec<bool> = idx.iter().map(|&i| b[[i, l]] != 0.0).collect();
                let scores: Vec<f64> = (0..idx.len()).map(|r| s[[r, l]]).collect();
                if let Some(a) = auc_mann_whitney(&scores, &pos) {
                    per.push(a);
                }
            }
            let value = if per.is_empty() { None } else { Some(exact_mean(&per)) };
            vec![Metric { name: "auc", value }]
        }
        Targets::Reals(y) => {
            let truth: Vec<f64> = idx.iter().map(|&i| y[i]).collect();
            let pred: Vec<f64> = (0..idx.len()).map(|r| s[[r, 0]]).collect();
            vec![Metric { name: "r2", value: r_squared(&pred, &truth) }]
        }
        Targets::Survival(pairs) => {
            let time: Vec<f64> = idx.iter().map(|&i| pairs[i].0).collect();
            let event: Vec<bool> = idx.iter().map(|&i| pairs[i].1).collect();
            let risk: Vec<f64> = (0..idx.len()).map(|r| s[[r, 0]]).collect();
            vec![Metric { name: "cindex", value: concordance_index(&risk, &time, &event) }]
        }
    }
}

/// The task's primary metric over an arbitrary row set; None when the set is
/// empty or the metric is undefined on it.
fn metric_on(task: &ProbeTask, head: &HeadWeights, idx: &[usize]) -> Option<f64> {
    let want = primary_metric(task.kind);
    metrics_on(task, head, idx).into_iter().find(|m| m.name == want).and_then(|m| m.value)
}

/// All applicable metrics on the test split.
pub fn evaluate(task: &ProbeTask, head: &HeadWeights) -> Result<Vec<Metric>> {
    if task.splits.test.is_empty() {
        return Err(Error::validation(task.name.clone(), "test split is empty"));
    }
    Ok(metrics_on(task, head, &task.splits.test))
}

// ---------------------------------------------------------------------------
// Benchmark harness

#[derive(Clone, Debug)]
pub struct BenchmarkReport {
    pub seeds: Vec<u64>,
    /// One report per completed task, in task order.
    pub reports: Vec<MetricReport>,
    /// Unweighted mean of the per-task means, over completed tasks.
    pub aggregate: f64,
    /// One entry per failed task.
    pub warnings: Vec<String>,
}

fn bench_task(task: &ProbeTask, seeds: &[u64]) -> Result<MetricReport> {
    let mut values = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let head = fit_head(task, seed)?;
        if task.splits.test.is_empty() {
            return Err(Error::validation(task.name.clone(), "test split is empty"));
        }
        let v = metric_on(task, &head, &task.splits.test).ok_or_else(|| {
            Error::validation(
                task.name.clone(),
                format!("{} undefined on the test split", primary_metric(task.kind)),
            )
        })?;
        values.push(v);
    }
    Ok(MetricReport::from_values(
        task.name.clone(),
        primary_metric(task.kind).to_string(),
        values,
    ))
}

/// Fit and evaluate every task once per seed. Task failures become warnings;
/// the aggregate averages the tasks that completed.
pub fn run_benchmark(tasks: &[ProbeTask], seeds: &[u64]) -> Result<BenchmarkReport> {
    if tasks.is_empty() {
        return Err(Error::validation("tasks", "no tasks given"));
    }
    if seeds.is_empty() {
        return Err(Error::validation("seeds", "need at least one seed"));
    }
    let mut reports = Vec::new();
    let mut warnings = Vec::new();
    for task in tasks {
        match bench_task(task, seeds) {
            Ok(r) => reports.push(r),
            Err(e) => warnings.push(format!("task {}: {e}", task.name)),
        }
    }
    if reports.is_empty() {
        return Err(Error::validation("tasks", "no task completed"));
    }
    let means: Vec<f64> = reports.iter().map(|r| r.mean).collect();
    Ok(BenchmarkReport { seeds: seeds.to_vec(), reports, aggregate: exact_mean(&means), warnings })
}

/// CSV rows (task, seed, metric, value): one row per task per seed, then a
/// single aggregate row.
pub fn report_csv(report: &BenchmarkReport) -> String {
    let mut out = String::from("task,seed,metric,value\n");
    for r in &report.reports {
        for (seed, v) in report.seeds.iter().zip(&r.values) {
            out.push_str(&format!("{},{},{},{}\n", r.task, seed, r.metric, v));
        }
    }
    out.push_str(&format!("aggregate,all,mean,{}\n", report.aggregate));
    out
}

pub fn write_report_csv(report: &BenchmarkReport, path: &Path) -> Result<()> {
    fs::write(path, report_csv(report))?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Few-shot sweep

#[derive(Clone, Debug)]
pub struct FewShotPoint {
    pub shots: usize,
    /// None marks a point skipped because some class lacks `shots` examples.
    pub report: Option<MetricReport>,
}

/// For each shot count k, subsample k training examples per class (fresh
/// draw per seed), fit, and evaluate the primary metric on the full test
/// split. Classification tasks only.
pub fn few_shot_sweep(
    task: &ProbeTask,
    shots: &[usize],
    seeds: &[u64],
) -> Result<Vec<FewShotPoint>> {
    task.validate()?;
    if seeds.is_empty() {
        return Err(Error::validation("seeds", "need at least one seed"));
    }
    let Targets::Classes(y) = &task.targets else {
        return Err(Error::validation(
            task.name.clone(),
            "few-shot sweep requires a classification task",
        ));
    };
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for &i in &task.splits.train {
        by_class.entry(y[i]).or_default().push(i);
    }
    if by_class.len() < 2 {
        return Err(Error::validation(task.name.clone(), "train split holds a single class"));
    }
    let min_avail = by_class.values().map(Vec::len).min().unwrap();
    let tag = name_tag(&task.name);
    let mut out = Vec::with_capacity(shots.len());
    for &k in shots {
        if k == 0 || k > min_avail {
            out.push(FewShotPoint { shots: k, report: None });
            continue;
        }
        let mut values = Vec::with_capacity(seeds.len());
        for &seed in seeds {
            let mut rng = stream_rng(seed, &[TAG_SHOT, tag, k as u64]);
            let mut train = Vec::with_capacity(k * by_class.len());
            for list in by_class.values() {
                let mut pool = list.clone();
                pool.shuffle(&mut rng);
                train.extend_from_slice(&pool[..k]);
            }
            train.sort_unstable();
            let sub = ProbeTask {
                name: task.name.clone(),
                kind: task.kind,
                track: task.track,
                features: task.features.clone(),
                targets: task.targets.clone(),
                splits: Splits {
                    train,
                    val: task.splits.val.clone(),
                    test: task.splits.test.clone(),
                },
            };
            let head = fit_head(&sub, seed)?;
            let v = metric_on(&sub, &head, &sub.splits.test).ok_or_else(|| {
                Error::validation(
                    task.name.clone(),
                    format!("{} undefined on the test split", primary_metric(task.kind)),
                )
            })?;
            values.push(v);
        }
        out.push(FewShotPoint {
            shots: k,
            report: Some(MetricReport::from_values(
                task.name.clone(),
                primary_metric(task.kind).to_string(),
                values,
            )),
        });
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Patch similarity maps

#[derive(Clone, Debug)]
pub struct SimilarityMap {
    /// Cosine similarity per target patch, reshaped to the patch grid;
    /// values in [-1, 1].
    pub values: Array2<f64>,
    /// True when the query or any target patch had a zero-norm token, which
    /// leaves those cells undefined (written as 0).
    pub zero_norm: bool,
}

/// Cosine similarity between one query patch token and every patch token of
/// each target image.
pub fn similarity_map(
    params: &EncoderParams,
    query_image: &Array2<f64>,
    query_patch: usize,
    targets: &[Array2<f64>],
) -> Result<Vec<SimilarityMap>> {
    let (_, qp) = embed_image(params, query_image, None)?;
    let t = qp.nrows();
    if query_patch >= t {
        return Err(Error::validation(
            "query_patch",
            format!("index {query_patch} out of {t} patches"),
        ));
    }
    let q = qp.row(query_patch).to_owned();
    let qn = q.dot(&q).sqrt();
    let mut out = Vec::with_capacity(targets.len());
    for img in targets {
        let (_, tp) = embed_image(params, img, None)?;
        let g = img.dim().0 / params.cfg.patch_size;
        let mut values = Array2::zeros((g, g));
        let mut zero_norm = qn == 0.0;
        for (i, row) in tp.rows().into_iter().enumerate() {
            let rn = row.dot(&row).sqrt();
            let v = if qn == 0.0 || rn == 0.0 {
                zero_norm = true;
                0.0
            } else {
                (q.dot(&row) / (qn * rn)).clamp(-1.0, 1.0)
            };
            values[[i / g, i % g]] = v;
        }
        out.push(SimilarityMap { values, zero_norm });
    }
    Ok(out)
}

/// Raw similarity grid as CSV rows.
pub fn simmap_csv(map: &SimilarityMap) -> String {
    let mut out = String::new();
    for row in map.values.rows() {
        let cells: Vec<String> = row.iter().map(|v| format!("{v}")).collect();
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    out
}

// ---------------------------------------------------------------------------
// Phantom task suite and task manifests

/// Task names the phantom volume labels support.
pub const SUITE_TASKS: [&str; 5] = ["organ_class", "organs_present", "age", "lesion", "survival"];

fn label_f64(v: &Volume, i: usize, name: &str) -> Result<f64> {
    v.label_f64(name)
        .ok_or_else(|| Error::validation("labels", format!("volume {i} lacks label {name}")))
}

/// Build the volume-level (3-D track) evaluation tasks from phantom labels.
/// Empty `names` selects the full suite.
pub fn phantom_suite(
    params: &EncoderParams,
    volumes: &[Volume],
    ncfg: &NormalizeConfig,
    resolution: usize,
    names: &[String],
) -> Result<Vec<ProbeTask>> {
    if volumes.is_empty() {
        return Err(Error::validation("volumes", "no volumes given"));
    }
    let features = volume_features(params, volumes, ncfg, resolution, Track::ThreeD)?;
    let splits = default_splits(volumes.len());
    let wanted: Vec<&str> = if names.is_empty() {
        SUITE_TASKS.to_vec()
    } else {
        names.iter().map(String::as_str).collect()
    };
    let mut tasks = Vec::with_capacity(wanted.len());
    for name in wanted {
        let (kind, targets) = match name {
            "organ_class" => {
                let mut y = Vec::with_capacity(volumes.len());
                for (i, v) in volumes.iter().enumerate() {
                    y.push(label_f64(v, i, "organ_class")? as usize);
                }
                (TaskKind::Classification, Targets::Classes(y))
            }
            "organs_present" => {
                let first = volumes[0]
                    .labels
                    .get("organs_present")
                    .and_then(|v| v.as_array())
                    .ok_or_else(|| {
                        Error::validation("labels", "volume 0 lacks label organs_present")
                    })?;
                let l = first.len();
                let mut b = Array2::zeros((volumes.len(), l));
                for (i, v) in volumes.iter().enumerate() {
                    let arr = v
                        .labels
                        .get("organs_present")
                        .and_then(|v| v.as_array())
                        .ok_or_else(|| {
                            Error::validation(
                                "labels",
                                format!("volume {i} lacks label organs_present"),
                            )
                        })?;
                    if arr.len() != l {
                        return Err(Error::validation(
                            "labels",
                            format!("volume {i} has {} organ flags, expected {l}", arr.len()),
                        ));
                    }
                    for (j, f) in arr.iter().enumerate() {
                        b[[i, j]] = if f.as_u64().unwrap_or(0) != 0 { 1.0 } else { 0.0 };
                    }
                }
                (TaskKind::Multilabel, Targets::Binary(b))
            }
            "age" => {
                let mut y = Vec::with_capacity(volumes.len());
                for (i, v) in volumes.iter().enumerate() {
                    y.push(label_f64(v, i, "age")?);
                }
                (TaskKind::Regression, Targets::Reals(y))
            }
            "lesion" => {
                let mut y = Vec::with_capacity(volumes.len());
                for (i, v) in volumes.iter().enumerate() {
                    y.push(label_f64(v, i, "lesion")? as usize);
                }
                (TaskKind::Classification, Targets::Classes(y))
            }
            "survival" => {
                let mut y = Vec::with_capacity(volumes.len());
                for (i, v) in volumes.iter().enumerate() {
                    let t = label_f64(v, i, "survival_time")?;
                    let e = label_f64(v, i, "survival_event")? != 0.0;
                    y.push((t, e));
                }
                (TaskKind::Survival, Targets::Survival(y))
            }
            other => {
                return Err(Error::validation("suite", format!("unknown task {other}")));
            }
        };
        let task = ProbeTask {
            name: name.to_string(),
            kind,
            track: Track::ThreeD,
            features: features.clone(),
            targets,
            splits: splits.clone(),
        };
        task.validate()?;
        tasks.push(task);
    }
    Ok(tasks)
}

/// On-disk task list: phantom-suite tasks extracted from a volume directory
/// and/or generic features+targets CSV tasks.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TaskManifest {
    /// Directory of stored volumes (with an index file), for suite tasks.
    #[serde(default)]
    pub data_dir: Option<PathBuf>,
    /// Extraction resolution for suite tasks.
    #[serde(default = "default_resolution")]
    pub resolution: usize,
    /// Normalization applied to suite-task slices.
    #[serde(default)]
    pub normalize: NormalizeConfig,
    /// Suite task names; empty selects all of them (when data_dir is set).
    #[serde(default)]
    pub suite: Vec<String>,
    #[serde(default)]
    pub csv_tasks: Vec<CsvTaskSpec>,
}

fn default_resolution() -> usize {
    32
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CsvTaskSpec {
    pub name: String,
    pub kind: TaskKind,
    #[serde(default)]
    pub track: Track,
    /// Features CSV: one row per example, plain comma-separated numbers.
    pub features: PathBuf,
    /// Targets CSV: classification/regression one column; multilabel one
    /// column per label; survival two columns (time, event).
    pub targets: PathBuf,
    /// Explicit splits; defaults to the interleaved 60/20/20 rule.
    #[serde(default)]
    pub splits: Option<Splits>,
}

pub fn load_manifest(path: &Path) -> Result<TaskManifest> {
    let text = fs::read_to_string(path)?;
    Ok(serde_json::from_str(&text)?)
}

fn read_matrix_csv(path: &Path) -> Result<M> {
    let text = fs::read_to_string(path)?;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let mut row = Vec::new();
        for cell in line.split(',') {
            let v = cell.trim().parse::<f64>().map_err(|_| {
                Error::validation(
                    "csv",
                    format!("{}:{}: not a number: {cell}", path.display(), ln + 1),
                )
            })?;
            row.push(v);
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(Error::validation("csv", format!("{}: empty file", path.display())));
    }
    let w = rows[0].len();
    if rows.iter().any(|r| r.len() != w) {
        return Err(Error::validation("csv", format!("{}: ragged rows", path.display())));
    }
    let n = rows.len();
    Array2::from_shape_vec((n, w), rows.concat())
        .map_err(|e| Error::validation("csv", e.to_string()))
}

fn class_column(m: &M, path: &Path) -> Result<Vec<usize>> {
    m.column(0)
        .iter()
        .map(|&v| {
            if v >= 0.0 && v.fract() == 0.0 {
                Ok(v as usize)
            } else {
                Err(Error::validation(
                    "csv",
                    format!("{}: class id must be a nonnegative integer, got {v}", path.display()),
                ))
            }
        })
        .collect()
}

/// Load one generic CSV task; relative paths resolve against `base`.
pub fn load_csv_task(spec: &CsvTaskSpec, base: &Path) -> Result<ProbeTask> {
    let features = read_matrix_csv(&base.join(&spec.features))?;
    let tpath = base.join(&spec.targets);
    let tm = read_matrix_csv(&tpath)?;
    if tm.nrows() != features.nrows() {
        return Err(Error::validation(
            spec.name.clone(),
            format!("{} feature rows but {} target rows", features.nrows(), tm.nrows()),
        ));
    }
    let expect_cols = |want: usize| -> Result<()> {
        if tm.ncols() != want {
            return Err(Error::validation(
                spec.name.clone(),
                format!("targets need {want} columns, got {}", tm.ncols()),
            ));
        }
        Ok(())
    };
    let targets = match spec.kind {
        TaskKind::Classification => {
            expect_cols(1)?;
            Targets::Classes(class_column(&tm, &tpath)?)
        }
        TaskKind::Multilabel => Targets::Binary(tm),
        TaskKind::Regression => {
            expect_cols(1)?;
            Targets::Reals(tm.column(0).to_vec())
        }
        TaskKind::Survival => {
            expect_cols(2)?;
            Targets::Survival(
                tm.rows().into_iter().map(|r| (r[0], r[1] != 0.0)).collect(),
            )
        }
    };
    let splits = spec.splits.clone().unwrap_or_else(|| default_splits(features.nrows()));
    let task = ProbeTask {
        name: spec.name.clone(),
        kind: spec.kind,
        track: spec.track,
        features,
        targets,
        splits,
    };
    task.validate()?;
    Ok(task)
}

fn name_tag(name: &str) -> u64 {
    let mut h = 0xcbf29ce484222325u64;
    for b in name.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}
