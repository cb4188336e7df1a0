//! Self-supervised pre-training loop: multi-crop batches, student/teacher
//! forwards, loss aggregation, schedules, optimizer, checkpoints, and the
//! high-resolution fine-tuning stage.
//!
//! Each step stacks all same-size crops into batched forwards on one tape
//! (globals and locals separately), builds every objective — including the
//! batch-coupled regularizer — on that tape, and runs a single backward
//! sweep, so gradients are exact and row-wise work stays in large matrices.

use crate::autodiff::{Tape, Var, M};
use crate::cropper::{make_multicrop, CropConfig, MultiCropSet};
use crate::dataio::SliceImage;
use crate::encoder::{
    forward_batch, head_logits, interpolate_pos_embed, is_no_decay, leaf_shared, save_checkpoint,
    Checkpoint, EncoderParams, Stage,
};
use crate::error::{Error, Result};
use crate::masker::{prior_from_crop, sample_mask, uniform_prior, MaskConfig, PatchMask, PriorMode};
use crate::objectives::{
    ce_rows_mean, koleo_loss, sample_directions, sigreg_loss, sigreg_t_grid, teacher_probs,
    update_center, LossBreakdown, ObjectiveConfig, RegKind, TeacherState,
};
use crate::util::{bilinear_resize, stream_rng};
use ndarray::Array2;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::rc::Rc;

const TAG_EPOCH: u64 = 0xe90c;
const TAG_BATCH: u64 = 0xba7c;
const TAG_DIRS: u64 = 0xd125;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LrSchedule {
    Cosine,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct TrainConfig {
    pub steps: u64,
    pub batch_size: usize,
    pub lr_peak: f64,
    pub lr_schedule: LrSchedule,
    /// Cosine tail value.
    pub lr_floor: f64,
    pub warmup_steps: u64,
    pub weight_decay: f64,
    /// Teacher EMA momentum, linear from start to end over the run.
    pub momentum_schedule: [f64; 2],
    /// Square side of global crops; locals use half of it.
    pub resolution: usize,
    pub seed: u64,
    pub stage: Stage,
    pub checkpoint_every: u64,
    pub probe_every: u64,
    /// Mean per-dimension class-embedding std below this flags collapse.
    pub collapse_threshold: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 3000,
            batch_size: 32,
            lr_peak: 1e-3,
            lr_schedule: LrSchedule::Cosine,
            lr_floor: 1e-6,
            // Warmup length, decay, and momentum range are desk defaults.
            warmup_steps: 300,
            weight_decay: 0.04,
            momentum_schedule: [0.992, 1.0],
            resolution: 32,
            seed: 0,
            stage: Stage::Pretrain,
            checkpoint_every: 1000,
            probe_every: 250,
            collapse_threshold: 1e-3,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.warmup_steps > self.steps {
            return Err(Error::validation("warmup_steps", "must not exceed steps"));
        }
        let [m0, m1] = self.momentum_schedule;
        if !(0.0..=1.0).contains(&m0) || !(0.0..=1.0).contains(&m1) || m0 > m1 {
            return Err(Error::validation(
                "momentum_schedule",
                "need 0 <= m_start <= m_end <= 1",
            ));
        }
        if self.batch_size == 0 {
            return Err(Error::validation("batch_size", "must be positive"));
        }
        if self.lr_peak < 0.0 || self.lr_floor < 0.0 || self.lr_floor > self.lr_peak.max(0.0) {
            return Err(Error::validation("lr", "need 0 <= lr_floor <= lr_peak"));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::validation("weight_decay", "must be non-negative"));
        }
        if self.checkpoint_every == 0 || self.probe_every == 0 {
            return Err(Error::validation("cadence", "checkpoint/probe cadence must be >= 1"));
        }
        Ok(())
    }
}

/// Learning rate at `step`: linear 0 -> peak over warmup, then cosine to
/// the floor at `steps`.
pub fn lr_at(cfg: &TrainConfig, step: u64) -> f64 {
    if step < cfg.warmup_steps {
        return cfg.lr_peak * step as f64 / cfg.warmup_steps as f64;
    }
    let span = cfg.steps.saturating_sub(cfg.warmup_steps);
    if span == 0 {
        return if step >= cfg.steps { cfg.lr_floor } else { cfg.lr_peak };
    }
    let t = ((step - cfg.warmup_steps) as f64 / span as f64).min(1.0);
    cfg.lr_floor + 0.5 * (cfg.lr_peak - cfg.lr_floor) * (1.0 + (std::f64::consts::PI * t).cos())
}

/// Teacher momentum at `step`: linear from m_start to m_end over the run.
pub fn momentum_at(cfg: &TrainConfig, step: u64) -> f64 {
    let [m0, m1] = cfg.momentum_schedule;
    if cfg.steps == 0 {
        return m1;
    }
    let t = (step as f64 / cfg.steps as f64).min(1.0);
    m0 + (m1 - m0) * t
}

/// AdamW moment estimates, keyed like the parameter map.
#[derive(Clone, Debug)]
pub struct OptState {
    m1: BTreeMap<String, M>,
    m2: BTreeMap<String, M>,
    t: u64,
}

impl OptState {
    pub fn new(params: &EncoderParams) -> Self {
        let zeros: BTreeMap<String, M> =
            params.t.iter().map(|(k, v)| (k.clone(), Array2::zeros(v.dim()))).collect();
        Self { m1: zeros.clone(), m2: zeros, t: 0 }
    }
}

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// One decoupled-weight-decay Adam step. Tensors without a gradient entry
/// step with g = 0 (their moments still decay).
pub fn adamw_step(
    params: &mut EncoderParams,
    grads: &BTreeMap<String, M>,
    opt: &mut OptState,
    lr: f64,
    weight_decay: f64,
) {
    opt.t += 1;
    let bc1 = 1.0 - BETA1.powi(opt.t as i32);
    let bc2 = 1.0 - BETA2.powi(opt.t as i32);
    for (name, p) in params.t.iter_mut() {
        let m1 = opt.m1.get_mut(name).expect("opt state tracks params");
        let m2 = opt.m2.get_mut(name).expect("opt state tracks params");
        let zero;
        let g = match grads.get(name) {
            Some(g) => g,
            None => {
                zero = Array2::zeros(p.dim());
                &zero
            }
        };
        if !is_no_decay(name) && weight_decay != 0.0 {
            p.mapv_inplace(|x| x - lr * weight_decay * x);
        }
        ndarray::Zip::from(p).and(m1).and(m2).and(g).for_each(|p, m1, m2, &g| {
            *m1 = BETA1 * *m1 + (1.0 - BETA1) * g;
            *m2 = BETA2 * *m2 + (1.0 - BETA2) * g * g;
            let mh = *m1 / bc1;
            let vh = *m2 / bc2;
            *p -= lr * mh / (vh.sqrt() + ADAM_EPS);
        });
    }
}

/// One image's training views: crops plus a mask per global crop.
#[derive(Clone, Debug)]
pub struct TrainSample {
    pub crops: MultiCropSet,
    pub masks: Vec<PatchMask>,
}

/// Crop and mask a batch of admitted images. `grid` is the patch grid of a
/// global crop at the training resolution.
pub fn build_batch(
    pool: &[SliceImage],
    indices: &[usize],
    ccfg: &CropConfig,
    mcfg: &MaskConfig,
    grid: (usize, usize),
    rng: &mut rand_chacha::ChaCha8Rng,
) -> Result<Vec<TrainSample>> {
    let mut out = Vec::with_capacity(indices.len());
    for &i in indices {
        let img = pool
            .get(i)
            .ok_or_else(|| Error::validation("indices", format!("image {i} out of range")))?;
        let crops = make_multicrop(img, ccfg, rng)?;
        let mut masks = Vec::with_capacity(crops.globals.len());
        for g in &crops.globals {
            let prior = match mcfg.prior.mode {
                PriorMode::Gaussian => prior_from_crop(img, &g.bbox, grid),
                PriorMode::Uniform => uniform_prior(grid),
            };
            masks.push(sample_mask(grid, mcfg.mask_ratio, &prior, mcfg, rng));
        }
        out.push(TrainSample { crops, masks });
    }
    Ok(out)
}

/// Teacher prototype logits over all global crops, detached from any tape:
/// stacked class logits (`n_glob*b` rows, view-group-major) and stacked
/// patch logits (`n_glob*b*tokens` rows, same order).
///
/// Values are read off a throwaway tape that is never backpropagated, so no
/// gradient can reach the teacher.
fn teacher_logits(
    teacher: &TeacherState,
    rc: &BTreeMap<String, Rc<M>>,
    glob_imgs: &[&Array2<f64>],
) -> Result<(M, M, usize)> {
    let mut tape = Tape::new();
    let vars = leaf_shared(&mut tape, rc);
    let no_masks: Vec<Option<&PatchMask>> = vec![None; glob_imgs.len()];
    let out = forward_batch(&mut tape, &teacher.params, &vars, glob_imgs, &no_masks)?;
    let cl = head_logits(&mut tape, &vars, out.cls);
    let pl = head_logits(&mut tape, &vars, out.patches);
    Ok((tape.value(cl).clone(), tape.value(pl).clone(), out.tokens_per_image))
}

fn grad_norm(grads: &BTreeMap<String, M>) -> f64 {
    grads.values().map(|g| g.iter().map(|v| v * v).sum::<f64>()).sum::<f64>().sqrt()
}

/// One optimization step over a multi-crop batch. Returns the loss parts;
/// on a non-finite loss the step aborts with a diagnostic and no update.
pub fn train_step(
    student: &mut EncoderParams,
    teacher: &mut TeacherState,
    opt: &mut OptState,
    batch: &[TrainSample],
    tcfg: &TrainConfig,
    ocfg: &ObjectiveConfig,
    step: u64,
) -> Result<LossBreakdown> {
    if batch.is_empty() {
        return Err(Error::validation("batch", "must be nonempty"));
    }
    let b = batch.len();
    let d = student.cfg.dim;
    let tau_s = ocfg.tau_s;
    let tau_t = ocfg.tau_teacher_at(step, tcfg.steps);
    let lr = lr_at(tcfg, step);
    let m = momentum_at(tcfg, step);

    // Weights are shared across every tape leaf in this step (one copy here
    // instead of one per tape).
    let student_rc = student.rc_tensors();
    let teacher_rc = teacher.params.rc_tensors();

    // Crop stacks in view-group-major order: all images' view 0, then all
    // images' view 1, ... Row blocks of everything downstream follow it.
    let n_glob = batch[0].crops.globals.len();
    let n_loc = batch[0].crops.locals.len();
    let n_views = n_glob + n_loc;
    let pairs = n_glob * n_views - n_glob;
    let glob_imgs: Vec<&Array2<f64>> = (0..n_glob)
        .flat_map(|g| batch.iter().map(move |s| &s.crops.globals[g].pixels))
        .collect();
    let glob_masks: Vec<Option<&PatchMask>> =
        (0..n_glob).flat_map(|g| batch.iter().map(move |s| Some(&s.masks[g]))).collect();
    let loc_imgs: Vec<&Array2<f64>> = (0..n_loc)
        .flat_map(|l| batch.iter().map(move |s| &s.crops.locals[l].pixels))
        .collect();

    // Teacher pass: detached logit stacks over unmasked globals.
    let (t_cls_logits, t_patch_logits, t_tokens) =
        teacher_logits(teacher, &teacher_rc, &glob_imgs)?;

    // Student pass: the whole batch shares one tape, so the batch-coupled
    // regularizer differentiates through the stacked class node directly and
    // a single backward sweep yields exact gradients for every objective.
    let mut tape = Tape::new();
    let vars = leaf_shared(&mut tape, &student_rc);
    let g_out = forward_batch(&mut tape, student, &vars, &glob_imgs, &glob_masks)?;
    debug_assert_eq!(g_out.tokens_per_image, t_tokens);
    let cls_all = if n_loc > 0 {
        let no_masks: Vec<Option<&PatchMask>> = vec![None; loc_imgs.len()];
        let l_out = forward_batch(&mut tape, student, &vars, &loc_imgs, &no_masks)?;
        tape.concat_rows(&[g_out.cls, l_out.cls])
    } else {
        g_out.cls
    };
    let view_logits = head_logits(&mut tape, &vars, cls_all);

    // Self-distillation: every (teacher global, student view) pair except a
    // view against itself; each slice is the b rows of one view.
    let mut dino_sum: Option<Var> = None;
    for g in 0..n_glob {
        let t_rows = t_cls_logits.slice(ndarray::s![g * b..(g + 1) * b, ..]).to_owned();
        let probs = teacher_probs(&t_rows, &teacher.center_cls, tau_t);
        for v in 0..n_views {
            if v == g {
                continue;
            }
            let s_logits = tape.slice_rows(view_logits, v * b, (v + 1) * b);
            let ce = ce_rows_mean(&mut tape, &probs, s_logits, tau_s);
            dino_sum = Some(match dino_sum {
                Some(acc) => tape.add(acc, ce),
                None => ce,
            });
        }
    }
    let dino_node = dino_sum.map(|nd| tape.scale(nd, 1.0 / pairs.max(1) as f64));

    // Masked-patch prediction: one gather of every masked row in the global
    // patch stack, one head pass, one cross-entropy mean.
    let mut midx = Vec::new();
    for g in 0..n_glob {
        for (i, s) in batch.iter().enumerate() {
            let grid = &s.masks[g].grid;
            let (mr, mc) = grid.dim();
            for r in 0..mr {
                for c in 0..mc {
                    if grid[[r, c]] {
                        midx.push((g * b + i) * t_tokens + r * mc + c);
                    }
                }
            }
        }
    }
    let total_masked = midx.len();
    let ibot_node = if midx.is_empty() {
        None
    } else {
        let sel = tape.select_rows(g_out.patches, &midx);
        let s_logits = head_logits(&mut tape, &vars, sel);
        let mut t_rows = Array2::zeros((total_masked, t_patch_logits.dim().1));
        for (k, &ri) in midx.iter().enumerate() {
            t_rows.row_mut(k).assign(&t_patch_logits.row(ri));
        }
        let probs = teacher_probs(&t_rows, &teacher.center_patch, tau_t);
        Some(ce_rows_mean(&mut tape, &probs, s_logits, tau_s))
    };

    // Batch regularizer over the stacked class embeddings of masked globals.
    let reg_node = match ocfg.reg {
        RegKind::None => None,
        RegKind::Sigreg => {
            let mut rng = stream_rng(tcfg.seed, &[TAG_DIRS, step]);
            let dirs = sample_directions(d, ocfg.sigreg.dirs, &mut rng);
            let grid = sigreg_t_grid(ocfg.sigreg.grid, ocfg.sigreg.range);
            Some(sigreg_loss(&mut tape, g_out.cls, &dirs, &grid)?)
        }
        RegKind::Koleo => Some(koleo_loss(&mut tape, g_out.cls)?),
    };

    let dino_val = dino_node.map(|nd| tape.scalar(nd)).unwrap_or(0.0);
    let ibot_val = ibot_node.map(|nd| tape.scalar(nd)).unwrap_or(0.0);
    let reg_val = reg_node.map(|nd| tape.scalar(nd)).unwrap_or(0.0);

    let one = |w: f64| Array2::from_elem((1, 1), w);
    let mut seeds: Vec<(Var, M)> = Vec::new();
    if let Some(nd) = dino_node {
        seeds.push((nd, one(ocfg.w_dino)));
    }
    if let Some(nd) = ibot_node {
        seeds.push((nd, one(ocfg.w_ibot)));
    }
    if let Some(nd) = reg_node {
        seeds.push((nd, one(ocfg.w_reg)));
    }
    let grads = tape.backward(&seeds);
    let mut grad_acc: BTreeMap<String, M> = BTreeMap::new();
    for (name, var) in &vars {
        if let Some(g) = grads.get(*var) {
            grad_acc.insert(name.clone(), g.clone());
        }
    }

    let breakdown =
        LossBreakdown::compose(dino_val, ibot_val, reg_val, (ocfg.w_dino, ocfg.w_ibot, ocfg.w_reg));
    if !breakdown.is_finite() || !grad_acc.values().all(|g| g.iter().all(|v| v.is_finite())) {
        return Err(Error::NonFinite {
            step,
            detail: format!(
                "dino={} ibot={} reg={} grad_norm={}",
                breakdown.dino,
                breakdown.ibot,
                breakdown.reg,
                grad_norm(&grad_acc)
            ),
        });
    }

    adamw_step(student, &grad_acc, opt, lr, tcfg.weight_decay);
    teacher.ema_from(student, m)?;
    update_center(&mut teacher.center_cls, &t_cls_logits, teacher.center_rate)?;
    update_center(&mut teacher.center_patch, &t_patch_logits, teacher.center_rate)?;

    Ok(breakdown)
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct TrainLogRow {
    pub step: u64,
    pub dino: f64,
    pub ibot: f64,
    pub reg: f64,
    pub total: f64,
    pub lr: f64,
    pub m: f64,
    pub probe_metric: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub rows: Vec<TrainLogRow>,
    /// Steps at which the collapse detector fired (warning, not abort).
    pub collapse_steps: Vec<u64>,
}

impl TrainLog {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = String::from("step,dino,ibot,reg,total,lr,m,probe_metric\n");
        for r in &self.rows {
            let probe = r.probe_metric.map(|p| p.to_string()).unwrap_or_default();
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{}\n",
                r.step, r.dino, r.ibot, r.reg, r.total, r.lr, r.m, probe
            ));
        }
        std::fs::write(path, out)?;
        Ok(())
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut lines = text.lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::validation("train_log", "empty file"))?;
        if header != "step,dino,ibot,reg,total,lr,m,probe_metric" {
            return Err(Error::validation("train_log", format!("bad header: {header}")));
        }
        let mut rows = Vec::new();
        for (ln, line) in lines.enumerate() {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 8 {
                return Err(Error::validation(
                    "train_log",
                    format!("line {}: expected 8 fields, got {}", ln + 2, f.len()),
                ));
            }
            let num = |s: &str| -> Result<f64> {
                s.parse::<f64>()
                    .map_err(|e| Error::validation("train_log", format!("line {}: {e}", ln + 2)))
            };
            rows.push(TrainLogRow {
                step: f[0]
                    .parse()
                    .map_err(|e| Error::validation("train_log", format!("line {}: {e}", ln + 2)))?,
                dino: num(f[1])?,
                ibot: num(f[2])?,
                reg: num(f[3])?,
                total: num(f[4])?,
                lr: num(f[5])?,
                m: num(f[6])?,
                probe_metric: if f[7].is_empty() { None } else { Some(num(f[7])?) },
            });
        }
        Ok(Self { rows, collapse_steps: Vec::new() })
    }
}

/// Optional side effects of a training run.
#[derive(Default)]
pub struct TrainHooks<'a> {
    /// Called every `probe_every` steps with the current student; the value
    /// lands in the log's probe_metric column.
    pub probe: Option<&'a dyn Fn(&EncoderParams) -> f64>,
    /// Periodic checkpoints are written here when set.
    pub checkpoint_dir: Option<PathBuf>,
}

/// Deterministic reshuffled-epoch index stream.
struct ImageCursor {
    order: Vec<usize>,
    pos: usize,
    epoch: u64,
    seed: u64,
    n: usize,
}

impl ImageCursor {
    fn new(n: usize, seed: u64) -> Self {
        let mut c = Self { order: Vec::new(), pos: 0, epoch: 0, seed, n };
        c.reshuffle();
        c
    }

    fn reshuffle(&mut self) {
        let mut rng = stream_rng(self.seed, &[TAG_EPOCH, self.epoch]);
        self.order = (0..self.n).collect();
        self.order.shuffle(&mut rng);
        self.pos = 0;
        self.epoch += 1;
    }

    fn take(&mut self, count: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(count);
        while out.len() < count {
            if self.pos == self.order.len() {
                self.reshuffle();
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

/// Class embeddings of a list of images, (B, dim), computed without
/// gradients.
pub fn class_embeddings(params: &EncoderParams, images: &[Array2<f64>]) -> Result<M> {
    let d = params.cfg.dim;
    let mut out = Array2::zeros((images.len(), d));
    for (i, img) in images.iter().enumerate() {
        let (cls, _) = crate::encoder::embed_image(params, img, None)?;
        out.row_mut(i).assign(&cls.row(0));
    }
    Ok(out)
}

/// Collapse statistic: mean per-dimension standard deviation of the class
/// embeddings of a fixed probe set.
pub fn feature_std(params: &EncoderParams, images: &[Array2<f64>]) -> Result<f64> {
    let e = class_embeddings(params, images)?;
    let (b, d) = e.dim();
    if b < 2 {
        return Err(Error::validation("images", "need at least 2 probe images"));
    }
    let mut acc = 0.0;
    for j in 0..d {
        let col = e.column(j);
        let mean = col.mean().unwrap();
        let var = col.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / b as f64;
        acc += var.sqrt();
    }
    Ok(acc / d as f64)
}

/// Evenly spaced slice sample resized to the training resolution, used for
/// collapse checks.
pub fn probe_pixels(pool: &[SliceImage], count: usize, resolution: usize) -> Vec<Array2<f64>> {
    let n = pool.len().min(count);
    (0..n)
        .map(|i| {
            let idx = i * pool.len() / n;
            bilinear_resize(&pool[idx].pixels, resolution, resolution)
        })
        .collect()
}

fn run_loop(
    mut student: EncoderParams,
    mut teacher: TeacherState,
    pool: &[SliceImage],
    tcfg: &TrainConfig,
    ccfg: &CropConfig,
    mcfg: &MaskConfig,
    ocfg: &ObjectiveConfig,
    hooks: &TrainHooks,
) -> Result<(Checkpoint, TrainLog)> {
    tcfg.validate()?;
    ocfg.validate()?;
    mcfg.validate()?;
    if pool.is_empty() {
        return Err(Error::validation("pool", "admitted image stream is empty"));
    }
    let patch = student.cfg.patch_size;
    if tcfg.resolution % (2 * patch) != 0 {
        return Err(Error::geometry(format!(
            "resolution {} must be divisible by twice the patch size {patch}",
            tcfg.resolution
        )));
    }
    if student.image_size() != tcfg.resolution {
        return Err(Error::geometry(format!(
            "params expect {}px images but the run resolution is {}",
            student.image_size(),
            tcfg.resolution
        )));
    }
    let mut ccfg = ccfg.clone();
    ccfg.r_g = tcfg.resolution;
    ccfg.r_l = tcfg.resolution / 2;
    ccfg.validate()?;
    let grid = (tcfg.resolution / patch, tcfg.resolution / patch);

    let probe_set = probe_pixels(pool, 256, tcfg.resolution);
    let mut opt = OptState::new(&student);
    let mut cursor = ImageCursor::new(pool.len(), tcfg.seed);
    let mut log = TrainLog::default();

    for step in 0..tcfg.steps {
        let indices = cursor.take(tcfg.batch_size);
        let mut rng = stream_rng(tcfg.seed, &[TAG_BATCH, step]);
        let batch = build_batch(pool, &indices, &ccfg, mcfg, grid, &mut rng)?;
        let breakdown = train_step(&mut student, &mut teacher, &mut opt, &batch, tcfg, ocfg, step)?;

        let cadence_hit = (step + 1) % tcfg.probe_every == 0 || step + 1 == tcfg.steps;
        let mut probe_metric = None;
        if cadence_hit {
            if probe_set.len() >= 2 && feature_std(&student, &probe_set)? < tcfg.collapse_threshold
            {
                log.collapse_steps.push(step);
            }
            if let Some(f) = hooks.probe {
                probe_metric = Some(f(&student));
            }
        }
        log.rows.push(TrainLogRow {
            step,
            dino: breakdown.dino,
            ibot: breakdown.ibot,
            reg: breakdown.reg,
            total: breakdown.total,
            lr: lr_at(tcfg, step),
            m: momentum_at(tcfg, step),
            probe_metric,
        });

        if let Some(dir) = &hooks.checkpoint_dir {
            if (step + 1) % tcfg.checkpoint_every == 0 && step + 1 != tcfg.steps {
                let ckpt = snapshot(&student, &teacher, step + 1, tcfg, ocfg);
                save_checkpoint(&ckpt, &dir.join(format!("step{:06}.ckpt", step + 1)))?;
            }
        }
    }

    let ckpt = snapshot(&student, &teacher, tcfg.steps, tcfg, ocfg);
    Ok((ckpt, log))
}

fn snapshot(
    student: &EncoderParams,
    teacher: &TeacherState,
    step: u64,
    tcfg: &TrainConfig,
    ocfg: &ObjectiveConfig,
) -> Checkpoint {
    Checkpoint {
        student: student.clone(),
        teacher: teacher.params.clone(),
        center_cls: teacher.center_cls.clone(),
        center_patch: teacher.center_patch.clone(),
        step,
        stage: tcfg.stage,
        extra: serde_json::json!({ "train": tcfg, "objectives": ocfg }),
    }
}

/// Full pre-training run from a fresh student.
pub fn run_pretrain(
    pool: &[SliceImage],
    student: EncoderParams,
    tcfg: &TrainConfig,
    ccfg: &CropConfig,
    mcfg: &MaskConfig,
    ocfg: &ObjectiveConfig,
    hooks: &TrainHooks,
) -> Result<(Checkpoint, TrainLog)> {
    if tcfg.stage != Stage::Pretrain {
        return Err(Error::validation("stage", "run_pretrain requires the pretrain stage"));
    }
    let teacher = TeacherState::new(&student, ocfg.center_rate)?;
    run_loop(student, teacher, pool, tcfg, ccfg, mcfg, ocfg, hooks)
}

/// Short fine-tuning pass at a higher resolution: positional embeddings of
/// both student and teacher are resampled, then training continues.
pub fn run_highres_finetune(
    ckpt: &Checkpoint,
    pool: &[SliceImage],
    tcfg: &TrainConfig,
    ccfg: &CropConfig,
    mcfg: &MaskConfig,
    ocfg: &ObjectiveConfig,
    hooks: &TrainHooks,
) -> Result<(Checkpoint, TrainLog)> {
    if tcfg.stage != Stage::HighresFinetune {
        return Err(Error::validation("stage", "run_highres_finetune requires the finetune stage"));
    }
    let old_res = ckpt.student.image_size();
    if tcfg.resolution <= old_res {
        return Err(Error::geometry(format!(
            "fine-tune resolution {} must exceed the checkpoint's {old_res}",
            tcfg.resolution
        )));
    }
    let student = interpolate_pos_embed(&ckpt.student, tcfg.resolution)?;
    let teacher_params = interpolate_pos_embed(&ckpt.teacher, tcfg.resolution)?;
    let teacher = TeacherState {
        params: teacher_params,
        center_cls: ckpt.center_cls.clone(),
        center_patch: ckpt.center_patch.clone(),
        center_rate: ocfg.center_rate,
    };
    if tcfg.steps == 0 {
        let mut out = snapshot(&student, &teacher, ckpt.step, tcfg, ocfg);
        out.step = ckpt.step;
        return Ok((out, TrainLog::default()));
    }
    run_loop(student, teacher, pool, tcfg, ccfg, mcfg, ocfg, hooks)
}
