//! Small Vision Transformer on the autodiff tape: patch embedding, pre-LN
//! transformer blocks, class/mask tokens, projection heads with weight-
//! normalized prototypes, positional-embedding interpolation, and the
//! checkpoint container.
//!
//! Parameters live in a flat name -> matrix map so the optimizer, EMA,
//! and checkpoint code treat every tensor uniformly.

use crate::autodiff::{Tape, Var, M};
use crate::error::{Error, Result};
use crate::masker::PatchMask;
use crate::util::stream_rng;
use ndarray::Array2;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;
use std::rc::Rc;

pub const CKPT_MAGIC: &[u8; 8] = b"SFCK0001";
const LN_EPS: f64 = 1e-6;
const NORM_FLOOR: f64 = 1e-8;

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq, Eq)]
#[serde(default)]
pub struct EncoderConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub head_prototypes: usize,
    pub head_bottleneck: usize,
    pub head_hidden: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            patch_size: 8,
            dim: 96,
            depth: 4,
            heads: 4,
            head_prototypes: 1024,
            head_bottleneck: 64,
            head_hidden: 192,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || self.image_size % self.patch_size != 0 {
            return Err(Error::validation(
                "image_size",
                format!("{} not divisible by patch_size {}", self.image_size, self.patch_size),
            ));
        }
        if self.heads == 0 || self.dim % self.heads != 0 {
            return Err(Error::validation(
                "dim",
                format!("{} not divisible by heads {}", self.dim, self.heads),
            ));
        }
        if self.dim == 0 || self.head_prototypes == 0 || self.head_bottleneck == 0 || self.head_hidden == 0
        {
            return Err(Error::validation("encoder", "zero-sized dimension"));
        }
        Ok(())
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    /// Closed-form parameter count; asserted in tests to guard config drift.
    pub fn param_count(&self) -> usize {
        let (p, d, g) = (self.patch_size, self.dim, self.grid());
        let (k, b, hh) = (self.head_prototypes, self.head_bottleneck, self.head_hidden);
        let embed = p * p * d + d;
        let pos = (g * g + 1) * d;
        let tokens = 2 * d;
        let block = 2 * (2 * d) + 4 * (d * d + d) + (d * 4 * d + 4 * d) + (4 * d * d + d);
        let final_ln = 2 * d;
        let head = d * hh + hh + hh * hh + hh + hh * b + b + k * b;
        embed + pos + tokens + self.depth * block + final_ln + head
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderParams {
    pub cfg: EncoderConfig,
    pub t: BTreeMap<String, M>,
}

/// Tensors exempt from weight decay: biases, norms, tokens, positions.
pub fn is_no_decay(name: &str) -> bool {
    name.ends_with(".b")
        || name.ends_with(".b1")
        || name.ends_with(".b2")
        || name.ends_with(".b3")
        || name.ends_with(".bq")
        || name.ends_with(".bk")
        || name.ends_with(".bv")
        || name.ends_with(".bo")
        || name.contains(".ln")
        || name.starts_with("norm.")
        || name == "cls_token"
        || name == "mask_token"
        || name == "pos_embed"
}

impl EncoderParams {
    pub fn new(cfg: &EncoderConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = stream_rng(seed, &[0x1417]);
        let mut t = BTreeMap::new();
        // Weight matrices use fan-in scaling so activations (and the head
        // bottleneck norm in particular) stay O(1) at init; tiny norms make
        // the L2-normalized head nearly degenerate.
        let rnd = |shape: (usize, usize), std: f64, rng: &mut rand_chacha::ChaCha8Rng| {
            let normal = Normal::new(0.0, std).unwrap();
            Array2::from_shape_fn(shape, |_| normal.sample(rng))
        };
        let fan = |n: usize| 1.0 / (n as f64).sqrt();
        let (p, d, g) = (cfg.patch_size, cfg.dim, cfg.grid());
        t.insert("patch_embed.w".into(), rnd((p * p, d), fan(p * p), &mut rng));
        t.insert("patch_embed.b".into(), Array2::zeros((1, d)));
        t.insert("pos_embed".into(), rnd((g * g + 1, d), 0.02, &mut rng));
        t.insert("cls_token".into(), rnd((1, d), 0.02, &mut rng));
        t.insert("mask_token".into(), rnd((1, d), 0.02, &mut rng));
        for i in 0..cfg.depth {
            let pre = format!("block{i}");
            t.insert(format!("{pre}.ln1.g"), Array2::ones((1, d)));
            t.insert(format!("{pre}.ln1.b"), Array2::zeros((1, d)));
            for w in ["wq", "wk", "wv", "wo"] {
                t.insert(format!("{pre}.attn.{w}"), rnd((d, d), fan(d), &mut rng));
            }
            for b in ["bq", "bk", "bv", "bo"] {
                t.insert(format!("{pre}.attn.{b}"), Array2::zeros((1, d)));
            }
            t.insert(format!("{pre}.ln2.g"), Array2::ones((1, d)));
            t.insert(format!("{pre}.ln2.b"), Array2::zeros((1, d)));
            t.insert(format!("{pre}.mlp.w1"), rnd((d, 4 * d), fan(d), &mut rng));
            t.insert(format!("{pre}.mlp.b1"), Array2::zeros((1, 4 * d)));
            t.insert(format!("{pre}.mlp.w2"), rnd((4 * d, d), fan(4 * d), &mut rng));
            t.insert(format!("{pre}.mlp.b2"), Array2::zeros((1, d)));
        }
        t.insert("norm.g".into(), Array2::ones((1, d)));
        t.insert("norm.b".into(), Array2::zeros((1, d)));
        let (hh, hb) = (cfg.head_hidden, cfg.head_bottleneck);
        t.insert("head.w1".into(), rnd((d, hh), fan(d), &mut rng));
        t.insert("head.b1".into(), Array2::zeros((1, hh)));
        t.insert("head.w2".into(), rnd((hh, hh), fan(hh), &mut rng));
        t.insert("head.b2".into(), Array2::zeros((1, hh)));
        t.insert("head.w3".into(), rnd((hh, hb), fan(hh), &mut rng));
        t.insert("head.b3".into(), Array2::zeros((1, hb)));
        t.insert("head.protos".into(), rnd((cfg.head_prototypes, hb), fan(hb), &mut rng));
        Ok(Self { cfg: cfg.clone(), t })
    }

    /// Patch-grid side implied by the positional embedding row count.
    pub fn grid(&self) -> usize {
        let rows = self.t["pos_embed"].dim().0;
        ((rows - 1) as f64).sqrt().round() as usize
    }

    pub fn image_size(&self) -> usize {
        self.grid() * self.cfg.patch_size
    }

    pub fn total_len(&self) -> usize {
        self.t.values().map(|m| m.len()).sum()
    }

    /// Insert every tensor as a tape leaf; gradients accumulate there.
    pub fn leaf_all(&self, tape: &mut Tape) -> BTreeMap<String, Var> {
        self.t.iter().map(|(k, v)| (k.clone(), tape.leaf(v.clone()))).collect()
    }

    /// Snapshot tensors behind shared pointers. Pair with [`leaf_shared`] to
    /// build many tapes over the same weights with one copy total.
    pub fn rc_tensors(&self) -> BTreeMap<String, Rc<M>> {
        self.t.iter().map(|(k, v)| (k.clone(), Rc::new(v.clone()))).collect()
    }

    /// Round every tensor through f32, matching on-disk precision.
    pub fn round_f32(&mut self) {
        for m in self.t.values_mut() {
            m.mapv_inplace(|x| x as f32 as f64);
        }
    }
}

/// Insert shared tensors as tape leaves without copying their data.
pub fn leaf_shared(tape: &mut Tape, rc: &BTreeMap<String, Rc<M>>) -> BTreeMap<String, Var> {
    rc.iter().map(|(k, v)| (k.clone(), tape.leaf_rc(v.clone()))).collect()
}

/// Class and patch outputs of one forward pass, as tape nodes.
pub struct TokenEmbeddings {
    pub cls: Var,
    pub patches: Var,
}

fn layernorm(tape: &mut Tape, x: Var, g: Var, b: Var) -> Var {
    tape.layernorm_rows(x, g, b, LN_EPS)
}

fn gelu(tape: &mut Tape, x: Var) -> Var {
    tape.gelu(x)
}

/// Rows scaled to unit L2 norm with a floor on the norm.
fn l2_normalize_rows(tape: &mut Tape, x: Var) -> Var {
    let sq = tape.square(x);
    let ss = tape.sum_rows(sq);
    let norm = tape.sqrt(ss);
    let floored = tape.max_with_scalar(norm, NORM_FLOOR);
    tape.div(x, floored)
}

fn patchify(image: &Array2<f64>, patch: usize) -> Result<M> {
    let (h, w) = image.dim();
    if h % patch != 0 || w % patch != 0 || h != w {
        return Err(Error::geometry(format!(
            "image {h}x{w} not square multiple of patch {patch}"
        )));
    }
    let g = h / patch;
    let mut x = Array2::zeros((g * g, patch * patch));
    for r in 0..g {
        for c in 0..g {
            for pr in 0..patch {
                for pc in 0..patch {
                    x[[r * g + c, pr * patch + pc]] = image[[r * patch + pr, c * patch + pc]];
                }
            }
        }
    }
    Ok(x)
}

/// Single-image encoder forward: the one-element case of [`forward_batch`].
pub fn forward(
    tape: &mut Tape,
    params: &EncoderParams,
    vars: &BTreeMap<String, Var>,
    image: &Array2<f64>,
    mask: Option<&PatchMask>,
) -> Result<TokenEmbeddings> {
    let out = forward_batch(tape, params, vars, &[image], &[mask])?;
    Ok(TokenEmbeddings { cls: out.cls, patches: out.patches })
}

/// Class and patch outputs of a batched forward pass, as tape nodes.
pub struct BatchTokens {
    /// One row per image, in input order.
    pub cls: Var,
    /// `tokens_per_image` rows per image, concatenated in input order.
    pub patches: Var,
    pub tokens_per_image: usize,
}

/// Encoder forward over a batch of same-size images on one tape. Row-wise
/// work (embedding, layernorm, attention projections, MLP) runs on the
/// stacked token matrix; only the attention scores are computed per image.
///
/// Square inputs whose side is any multiple of the patch size are accepted;
/// when the implied grid differs from the stored positional grid, the
/// positional embeddings are resampled on the tape (a constant-matrix
/// product, so the resampling is differentiable back to `pos_embed`).
///
/// Masking replaces patch embeddings with the mask token *before* the
/// positional embeddings are added, so masked positions keep their
/// positional identity for the masked-token objective.
pub fn forward_batch(
    tape: &mut Tape,
    params: &EncoderParams,
    vars: &BTreeMap<String, Var>,
    images: &[&Array2<f64>],
    masks: &[Option<&PatchMask>],
) -> Result<BatchTokens> {
    let cfg = &params.cfg;
    let g0 = params.grid();
    let n = images.len();
    if n == 0 {
        return Err(Error::validation("images", "batch must be nonempty"));
    }
    if masks.len() != n {
        return Err(Error::validation("masks", "one mask slot per image"));
    }
    let (h, w) = images[0].dim();
    if h != w || h == 0 || h % cfg.patch_size != 0 {
        return Err(Error::geometry(format!(
            "image {h}x{w} is not a square multiple of patch {}",
            cfg.patch_size
        )));
    }
    if images.iter().any(|im| im.dim() != (h, w)) {
        return Err(Error::geometry("batched images must share one size"));
    }
    let g = h / cfg.patch_size;
    let t = g * g;
    let tp1 = t + 1;

    let mut px = Array2::zeros((n * t, cfg.patch_size * cfg.patch_size));
    for (i, img) in images.iter().enumerate() {
        px.slice_mut(ndarray::s![i * t..(i + 1) * t, ..])
            .assign(&patchify(img, cfg.patch_size)?);
    }
    let x_leaf = tape.leaf(px);
    let embedded = tape.matmul(x_leaf, vars["patch_embed.w"]);
    let mut tokens = tape.add(embedded, vars["patch_embed.b"]);

    // One stacked 0/1 column selects masked positions across the batch.
    let mut mcol = Array2::zeros((n * t, 1));
    let mut any_masked = false;
    for (i, mask) in masks.iter().enumerate() {
        if let Some(m) = mask {
            let (mr, mc) = m.grid.dim();
            if mr * mc != t {
                return Err(Error::geometry(format!(
                    "mask grid {mr}x{mc} does not match token grid {g}x{g}"
                )));
            }
            for r in 0..mr {
                for c in 0..mc {
                    if m.grid[[r, c]] {
                        mcol[[i * t + r * mc + c, 0]] = 1.0;
                        any_masked = true;
                    }
                }
            }
        }
    }
    if any_masked {
        let keep = tape.leaf(mcol.mapv(|v| 1.0 - v));
        let msk = tape.leaf(mcol);
        let kept = tape.mul(tokens, keep);
        let filler = tape.matmul(msk, vars["mask_token"]);
        tokens = tape.add(kept, filler);
    }

    // Interleave one cls row ahead of each image's token block, then add the
    // per-image-tiled positional table.
    let mut parts = Vec::with_capacity(2 * n);
    for i in 0..n {
        parts.push(vars["cls_token"]);
        parts.push(tape.slice_rows(tokens, i * t, (i + 1) * t));
    }
    let with_cls = tape.concat_rows(&parts);
    let pos1 = if g == g0 {
        vars["pos_embed"]
    } else {
        let pmat = tape.leaf(pos_interp_matrix(g0, g));
        let pos_cls = tape.slice_rows(vars["pos_embed"], 0, 1);
        let pos_patches = tape.slice_rows(vars["pos_embed"], 1, g0 * g0 + 1);
        let resampled = tape.matmul(pmat, pos_patches);
        tape.concat_rows(&[pos_cls, resampled])
    };
    let pos = if n == 1 { pos1 } else { tape.concat_rows(&vec![pos1; n]) };
    let mut x = tape.add(with_cls, pos);

    let dh = cfg.dim / cfg.heads;
    for i in 0..cfg.depth {
        let pre = format!("block{i}");
        let ln1 = layernorm(tape, x, vars[&format!("{pre}.ln1.g")], vars[&format!("{pre}.ln1.b")]);
        let q0 = tape.matmul(ln1, vars[&format!("{pre}.attn.wq")]);
        let q = tape.add(q0, vars[&format!("{pre}.attn.bq")]);
        let k0 = tape.matmul(ln1, vars[&format!("{pre}.attn.wk")]);
        let k = tape.add(k0, vars[&format!("{pre}.attn.bk")]);
        let v0 = tape.matmul(ln1, vars[&format!("{pre}.attn.wv")]);
        let v = tape.add(v0, vars[&format!("{pre}.attn.bv")]);
        let mut head_outs = Vec::with_capacity(cfg.heads);
        for head_idx in 0..cfg.heads {
            let (c0, c1) = (head_idx * dh, (head_idx + 1) * dh);
            let qh = tape.slice_cols(q, c0, c1);
            let kh = tape.slice_cols(k, c0, c1);
            let vh = tape.slice_cols(v, c0, c1);
            let mut img_outs = Vec::with_capacity(n);
            for b in 0..n {
                let (r0, r1) = (b * tp1, (b + 1) * tp1);
                let qb = tape.slice_rows(qh, r0, r1);
                let kb = tape.slice_rows(kh, r0, r1);
                let vb = tape.slice_rows(vh, r0, r1);
                let kt = tape.transpose(kb);
                let scores0 = tape.matmul(qb, kt);
                let scores = tape.scale(scores0, 1.0 / (dh as f64).sqrt());
                let attn = tape.softmax_rows(scores);
                img_outs.push(tape.matmul(attn, vb));
            }
            head_outs.push(if n == 1 { img_outs[0] } else { tape.concat_rows(&img_outs) });
        }
        let merged = tape.concat_cols(&head_outs);
        let proj0 = tape.matmul(merged, vars[&format!("{pre}.attn.wo")]);
        let proj = tape.add(proj0, vars[&format!("{pre}.attn.bo")]);
        x = tape.add(x, proj);

        let ln2 = layernorm(tape, x, vars[&format!("{pre}.ln2.g")], vars[&format!("{pre}.ln2.b")]);
        let h1l = tape.matmul(ln2, vars[&format!("{pre}.mlp.w1")]);
        let h1b = tape.add(h1l, vars[&format!("{pre}.mlp.b1")]);
        let h1 = gelu(tape, h1b);
        let h2l = tape.matmul(h1, vars[&format!("{pre}.mlp.w2")]);
        let h2 = tape.add(h2l, vars[&format!("{pre}.mlp.b2")]);
        x = tape.add(x, h2);
    }
    let y = layernorm(tape, x, vars["norm.g"], vars["norm.b"]);
    let cls_idx: Vec<usize> = (0..n).map(|i| i * tp1).collect();
    let patch_idx: Vec<usize> =
        (0..n).flat_map(|i| (1..tp1).map(move |p| i * tp1 + p)).collect();
    Ok(BatchTokens {
        cls: tape.select_rows(y, &cls_idx),
        patches: tape.select_rows(y, &patch_idx),
        tokens_per_image: t,
    })
}

/// Bottleneck MLP of the projection head (rows = independent embeddings).
pub fn head_bottleneck(tape: &mut Tape, vars: &BTreeMap<String, Var>, emb: Var) -> Var {
    let h1l = tape.matmul(emb, vars["head.w1"]);
    let h1b = tape.add(h1l, vars["head.b1"]);
    let h1 = gelu(tape, h1b);
    let h2l = tape.matmul(h1, vars["head.w2"]);
    let h2b = tape.add(h2l, vars["head.b2"]);
    let h2 = gelu(tape, h2b);
    let zl = tape.matmul(h2, vars["head.w3"]);
    tape.add(zl, vars["head.b3"])
}

/// Prototype logits from a bottleneck output: L2-normalize, then multiply
/// by the row-normalized prototype matrix.
pub fn head_logits_from_bottleneck(tape: &mut Tape, vars: &BTreeMap<String, Var>, z: Var) -> Var {
    let zn = l2_normalize_rows(tape, z);
    let pn = l2_normalize_rows(tape, vars["head.protos"]);
    let pt = tape.transpose(pn);
    tape.matmul(zn, pt)
}

/// Full projection head: embeddings (R x dim) -> prototype logits (R x K).
pub fn head_logits(tape: &mut Tape, vars: &BTreeMap<String, Var>, emb: Var) -> Var {
    let z = head_bottleneck(tape, vars, emb);
    head_logits_from_bottleneck(tape, vars, z)
}

/// 1-D Catmull-Rom resampling matrix (align-corners, linear extrapolation
/// at the borders so ramps and constants reproduce exactly).
fn catmull_rom_1d(g0: usize, g1: usize) -> M {
    if g0 == 1 {
        return Array2::ones((g1, 1));
    }
    let mut p = Array2::zeros((g1, g0));
    for i in 0..g1 {
        let src = if g1 == 1 {
            0.0
        } else {
            i as f64 * (g0 - 1) as f64 / (g1 - 1) as f64
        };
        let f = src.floor().min((g0 - 2) as f64);
        let t = src - f;
        let f = f as i64;
        let t2 = t * t;
        let t3 = t2 * t;
        let ws = [
            -0.5 * t3 + t2 - 0.5 * t,
            1.5 * t3 - 2.5 * t2 + 1.0,
            -1.5 * t3 + 2.0 * t2 + 0.5 * t,
            0.5 * t3 - 0.5 * t2,
        ];
        for (k, &wk) in ws.iter().enumerate() {
            let j = f - 1 + k as i64;
            if j < 0 {
                // Virtual point v[-1] = 2 v[0] - v[1].
                p[[i, 0]] += 2.0 * wk;
                p[[i, 1]] -= wk;
            } else if j >= g0 as i64 {
                p[[i, g0 - 1]] += 2.0 * wk;
                p[[i, g0 - 2]] -= wk;
            } else {
                p[[i, j as usize]] += wk;
            }
        }
    }
    p
}

/// Constant matrix mapping an old patch-position grid to a new one
/// (bicubic, separable). Shape (g1*g1, g0*g0).
pub fn pos_interp_matrix(g0: usize, g1: usize) -> M {
    let pr = catmull_rom_1d(g0, g1);
    let mut out = Array2::zeros((g1 * g1, g0 * g0));
    for r1 in 0..g1 {
        for c1 in 0..g1 {
            for r0 in 0..g0 {
                for c0 in 0..g0 {
                    out[[r1 * g1 + c1, r0 * g0 + c0]] = pr[[r1, r0]] * pr[[c1, c0]];
                }
            }
        }
    }
    out
}

/// Params with positional embeddings resampled for a new image size. The
/// class-token slot is untouched; an unchanged size returns a bit-identical
/// copy.
pub fn interpolate_pos_embed(params: &EncoderParams, new_image_size: usize) -> Result<EncoderParams> {
    if new_image_size == 0 || new_image_size % params.cfg.patch_size != 0 {
        return Err(Error::geometry(format!(
            "image size {new_image_size} not divisible by patch {}",
            params.cfg.patch_size
        )));
    }
    let g0 = params.grid();
    let g1 = new_image_size / params.cfg.patch_size;
    let mut out = params.clone();
    out.cfg.image_size = new_image_size;
    if g1 == g0 {
        return Ok(out);
    }
    let pos = &params.t["pos_embed"];
    let d = pos.dim().1;
    let old_patches = pos.slice(ndarray::s![1.., ..]).to_owned();
    let p = pos_interp_matrix(g0, g1);
    let new_patches = p.dot(&old_patches);
    let mut new_pos = Array2::zeros((g1 * g1 + 1, d));
    new_pos.row_mut(0).assign(&pos.row(0));
    new_pos.slice_mut(ndarray::s![1.., ..]).assign(&new_patches);
    out.t.insert("pos_embed".into(), new_pos);
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Pretrain,
    HighresFinetune,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub student: EncoderParams,
    pub teacher: EncoderParams,
    /// Running center of teacher class logits, (1, K).
    pub center_cls: M,
    /// Running center of teacher patch logits, (1, K).
    pub center_patch: M,
    pub step: u64,
    pub stage: Stage,
    /// Run configuration as recorded by the trainer, for provenance.
    pub extra: serde_json::Value,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    rows: usize,
    cols: usize,
}

#[derive(Serialize, Deserialize)]
struct CkptManifest {
    config: EncoderConfig,
    step: u64,
    stage: Stage,
    extra: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    let mut tensors: Vec<(String, &M)> = Vec::new();
    for (k, v) in &ckpt.student.t {
        tensors.push((format!("student.{k}"), v));
    }
    for (k, v) in &ckpt.teacher.t {
        tensors.push((format!("teacher.{k}"), v));
    }
    tensors.push(("center.cls".into(), &ckpt.center_cls));
    tensors.push(("center.patch".into(), &ckpt.center_patch));

    let manifest = CkptManifest {
        config: ckpt.student.cfg.clone(),
        step: ckpt.step,
        stage: ckpt.stage,
        extra: ckpt.extra.clone(),
        tensors: tensors
            .iter()
            .map(|(n, m)| TensorEntry { name: n.clone(), rows: m.dim().0, cols: m.dim().1 })
            .collect(),
    };
    let mjson = serde_json::to_vec(&manifest)?;
    let mut f = std::fs::File::create(path)?;
    f.write_all(CKPT_MAGIC)?;
    f.write_all(&(mjson.len() as u32).to_le_bytes())?;
    f.write_all(&mjson)?;
    for (_, m) in &tensors {
        for &v in m.iter() {
            f.write_all(&(v as f32).to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() < 12 || &bytes[..8] != CKPT_MAGIC {
        return Err(Error::MalformedHeader("bad checkpoint magic".into()));
    }
    let mlen = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    if bytes.len() < 12 + mlen {
        return Err(Error::MalformedHeader("manifest length exceeds file".into()));
    }
    let manifest: CkptManifest = serde_json::from_slice(&bytes[12..12 + mlen])
        .map_err(|e| Error::MalformedHeader(format!("manifest json: {e}")))?;
    let mut off = 12 + mlen;
    let mut named: BTreeMap<String, M> = BTreeMap::new();
    for e in &manifest.tensors {
        let need = e.rows * e.cols * 4;
        if bytes.len() < off + need {
            return Err(Error::TruncatedPayload { expected: off + need, found: bytes.len() });
        }
        let mut data = Vec::with_capacity(e.rows * e.cols);
        for chunk in bytes[off..off + need].chunks_exact(4) {
            data.push(f32::from_le_bytes(chunk.try_into().unwrap()) as f64);
        }
        off += need;
        let m = Array2::from_shape_vec((e.rows, e.cols), data)
            .map_err(|err| Error::MalformedHeader(format!("tensor {}: {err}", e.name)))?;
        named.insert(e.name.clone(), m);
    }
    let mut student = BTreeMap::new();
    let mut teacher = BTreeMap::new();
    let mut center_cls = None;
    let mut center_patch = None;
    for (name, m) in named {
        if let Some(rest) = name.strip_prefix("student.") {
            student.insert(rest.to_string(), m);
        } else if let Some(rest) = name.strip_prefix("teacher.") {
            teacher.insert(rest.to_string(), m);
        } else if name == "center.cls" {
            center_cls = Some(m);
        } else if name == "center.patch" {
            center_patch = Some(m);
        } else {
            return Err(Error::MalformedHeader(format!("unexpected tensor {name}")));
        }
    }
    let k = manifest.config.head_prototypes;
    Ok(Checkpoint {
        student: EncoderParams { cfg: manifest.config.clone(), t: student },
        teacher: EncoderParams { cfg: manifest.config.clone(), t: teacher },
        center_cls: center_cls.unwrap_or_else(|| Array2::zeros((1, k))),
        center_patch: center_patch.unwrap_or_else(|| Array2::zeros((1, k))),
        step: manifest.step,
        stage: manifest.stage,
        extra: manifest.extra,
    })
}

/// Inference helper: forward on a throwaway tape, returning plain values.
pub fn embed_image(
    params: &EncoderParams,
    image: &Array2<f64>,
    mask: Option<&PatchMask>,
) -> Result<(M, M)> {
    let mut tape = Tape::new();
    let vars = params.leaf_all(&mut tape);
    let out = forward(&mut tape, params, &vars, image, mask)?;
    Ok((tape.value(out.cls).clone(), tape.value(out.patches).clone()))
}
