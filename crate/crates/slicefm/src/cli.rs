//! Command-line interface: one binary, subcommand per pipeline stage.
//! All run configuration lives in JSON files; flags carry only paths.
//! Exit codes: 0 success, 2 usage/validation error, 3 runtime failure.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Parser, Subcommand};
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::config::{RunConfig, RunManifest};
use crate::cropper::{admit_image, slice_from_volume};
use crate::dataio::{
    generate_phantoms, load_volume, save_volume, NormalizeConfig, PhantomSpec, SliceImage, Volume,
};
use crate::encoder::{
    embed_image, interpolate_pos_embed, load_checkpoint, save_checkpoint, EncoderParams, Stage,
};
use crate::error::{Error, Result};
use crate::plot;
use crate::probe::{
    few_shot_sweep, load_csv_task, load_manifest, phantom_suite, run_benchmark, similarity_map,
    simmap_csv, write_report_csv, ProbeTask, TaskKind, BENCH_SEEDS,
};
use crate::trainer::{run_highres_finetune, run_pretrain, TrainHooks, TrainLog};
use crate::util::bilinear_resize;

const CONFIG_HELP: &str = "\
Run configs are JSON objects with six optional blocks; omitted keys take \
defaults, so `{}` is valid. Keys:

  encoder:    image_size, patch_size, dim, depth, heads,
              head_prototypes, head_bottleneck, head_hidden
  train:      steps, batch_size, lr_peak, lr_schedule (\"cosine\"), lr_floor,
              warmup_steps, weight_decay, momentum_schedule [start, end],
              resolution, seed, stage (\"pretrain\" | \"highres_finetune\"),
              checkpoint_every, probe_every, collapse_threshold
  crop:       tau_bg, tau_var, var_window, max_attempts, admit_max_bg,
              crop_max_bg, global_scale [lo, hi], local_scale [lo, hi],
              R_g, R_l, jitter { p_photo, brightness, contrast, p_blur,
              blur_sigma [lo, hi] }
  mask:       mask_ratio, mean_block_area, aspect_bounds [lo, hi],
              prior { mode: \"gaussian\" | \"uniform\" }
  objectives: reg (\"sigreg\" | \"koleo\" | \"none\"), w_dino, w_ibot, w_reg,
              tau_s, tau_t_warmup [start, end], center_rate,
              sigreg { dirs, grid, range }
  normalize:  ct_wl, ct_ww, mr_p_lo, mr_p_hi

Task manifests (probe/fewshot --tasks) are JSON:
  { data_dir, resolution, normalize { ... }, suite [names],
    csv_tasks [ { name, kind, track, features, targets, splits } ] }";

#[derive(Parser)]
#[command(name = "slicefm", version, about = "Self-supervised slice encoder pipeline", after_long_help = CONFIG_HELP)]
pub struct Cli {
    #[command(subcommand)]
    pub cmd: Cmd,
}

#[derive(Subcommand)]
pub enum Cmd {
    /// Generate a synthetic phantom volume set.
    GenerateData {
        /// Phantom spec JSON file.
        #[arg(long)]
        spec: PathBuf,
        /// Output directory for .rvol files and index.json.
        #[arg(long)]
        out: PathBuf,
    },
    /// Self-supervised pre-training from scratch.
    Pretrain {
        /// Run config JSON file.
        #[arg(long)]
        config: PathBuf,
        /// Volume directory (from generate-data).
        #[arg(long)]
        data: PathBuf,
        /// Output directory for checkpoints, trainlog.csv, manifest.json.
        #[arg(long)]
        out: PathBuf,
    },
    /// Continue training a checkpoint at a higher resolution.
    FinetuneHighres {
        /// Run config JSON file; train.resolution must exceed the checkpoint's.
        #[arg(long)]
        config: PathBuf,
        /// Checkpoint to start from.
        #[arg(long)]
        ckpt: PathBuf,
        /// Volume directory (from generate-data).
        #[arg(long)]
        data: PathBuf,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Frozen-feature benchmark over a task manifest.
    Probe {
        /// Checkpoint file.
        #[arg(long)]
        ckpt: PathBuf,
        /// Task manifest JSON file.
        #[arg(long)]
        tasks: PathBuf,
        /// Output directory for report.csv.
        #[arg(long)]
        out: PathBuf,
    },
    /// Few-shot accuracy sweep on one classification task.
    Fewshot {
        /// Checkpoint file.
        #[arg(long)]
        ckpt: PathBuf,
        /// Task manifest JSON file.
        #[arg(long)]
        tasks: PathBuf,
        /// Task name within the manifest.
        #[arg(long, default_value = "organ_class")]
        task: String,
        /// Shots per class at each sweep point.
        #[arg(long, value_delimiter = ',', default_value = "1,2,4,8,16")]
        shots: Vec<usize>,
        /// Output directory for fewshot.csv and fewshot.png.
        #[arg(long)]
        out: PathBuf,
    },
    /// Patch-similarity heatmaps of one query patch against target volumes.
    Simmap {
        /// Checkpoint file.
        #[arg(long)]
        ckpt: PathBuf,
        /// Query as VOLUME.rvol:SLICE:PATCH (slice and patch are indices).
        #[arg(long)]
        query: String,
        /// Directory of target volumes; the middle slice of each is used.
        #[arg(long)]
        targets: PathBuf,
        /// Output directory for sim_*.png and sim_*.csv.
        #[arg(long)]
        out: PathBuf,
    },
    /// Render loss and probe-metric charts from training logs.
    Plot {
        /// Training log CSV (repeat to overlay runs).
        #[arg(long, required = true, num_args = 1..)]
        log: Vec<PathBuf>,
        /// Output PNG path.
        #[arg(long)]
        out: PathBuf,
    },
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::GenerateData { spec, out } => cmd_generate_data(&spec, &out),
        Cmd::Pretrain { config, data, out } => cmd_train(&config, None, &data, &out),
        Cmd::FinetuneHighres { config, ckpt, data, out } => {
            cmd_train(&config, Some(&ckpt), &data, &out)
        }
        Cmd::Probe { ckpt, tasks, out } => cmd_probe(&ckpt, &tasks, &out),
        Cmd::Fewshot { ckpt, tasks, task, shots, out } => {
            cmd_fewshot(&ckpt, &tasks, &task, &shots, &out)
        }
        Cmd::Simmap { ckpt, query, targets, out } => cmd_simmap(&ckpt, &query, &targets, &out),
        Cmd::Plot { log, out } => cmd_plot(&log, &out),
    }
}

/// Input paths are user input: a missing one is a validation error, while a
/// file that exists but cannot be parsed keeps its own error kind.
fn require_file(path: &Path, what: &str) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Error::validation(what, format!("{} is not a file", path.display())))
    }
}

fn require_dir(path: &Path, what: &str) -> Result<()> {
    if path.is_dir() {
        Ok(())
    } else {
        Err(Error::validation(what, format!("{} is not a directory", path.display())))
    }
}

// ---------------------------------------------------------------------------
// generate-data

/// Directory listing written by generate-data; preserves generation order.
#[derive(Serialize, Deserialize)]
struct VolumeIndex {
    spec: PhantomSpec,
    files: Vec<String>,
}

fn cmd_generate_data(spec_path: &Path, out: &Path) -> Result<()> {
    require_file(spec_path, "--spec")?;
    let text = fs::read_to_string(spec_path)
        .map_err(|e| Error::validation("--spec", format!("{}: {e}", spec_path.display())))?;
    let spec: PhantomSpec = serde_json::from_str(&text)
        .map_err(|e| Error::validation("--spec", format!("{}: {e}", spec_path.display())))?;
    spec.validate()?;
    let volumes = generate_phantoms(&spec)?;
    fs::create_dir_all(out)?;
    let mut files = Vec::with_capacity(volumes.len());
    for (i, v) in volumes.iter().enumerate() {
        let name = format!("vol_{i:05}.rvol");
        save_volume(v, &out.join(&name))?;
        files.push(name);
    }
    let index = VolumeIndex { spec, files };
    fs::write(out.join("index.json"), serde_json::to_string_pretty(&index)?)?;
    println!("wrote {} volumes to {}", volumes.len(), out.display());
    Ok(())
}

/// Load a volume directory in index order (sorted *.rvol when no index).
fn load_volume_dir(dir: &Path) -> Result<Vec<Volume>> {
    require_dir(dir, "data dir")?;
    let names = volume_file_names(dir)?;
    if names.is_empty() {
        return Err(Error::validation("data dir", format!("no .rvol files in {}", dir.display())));
    }
    names.iter().map(|n| load_volume(&dir.join(n))).collect()
}

fn volume_file_names(dir: &Path) -> Result<Vec<String>> {
    let index = dir.join("index.json");
    if index.is_file() {
        let text = fs::read_to_string(&index)?;
        let idx: VolumeIndex = serde_json::from_str(&text)
            .map_err(|e| Error::validation("index.json", format!("{}: {e}", index.display())))?;
        return Ok(idx.files);
    }
    let mut names: Vec<String> = fs::read_dir(dir)?
        .filter_map(|e| e.ok())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .filter(|n| n.ends_with(".rvol"))
        .collect();
    names.sort();
    Ok(names)
}

// ---------------------------------------------------------------------------
// pretrain / finetune-highres

/// Every admitted slice of every volume, in file order then slice order.
fn build_pool(volumes: &[Volume], names: &[String], cfg: &RunConfig) -> Vec<SliceImage> {
    let mut pool = Vec::new();
    for (v, name) in volumes.iter().zip(names) {
        let id = name.trim_end_matches(".rvol");
        for idx in 0..v.voxels.dim().0 {
            if let Ok(img) = slice_from_volume(v, id, idx, &cfg.normalize, &cfg.crop) {
                if admit_image(&img, &cfg.crop) {
                    pool.push(img);
                }
            }
        }
    }
    pool
}

/// Cheap training-time metric: nearest-centroid organ classification on
/// middle-slice features of up to 48 evenly spaced volumes. First half of
/// the selection provides the class centroids, second half is scored.
struct OrganProbe {
    images: Vec<Array2<f64>>,
    classes: Vec<usize>,
}

impl OrganProbe {
    fn new(volumes: &[Volume], ncfg: &NormalizeConfig, resolution: usize) -> Self {
        let cap = 48usize;
        let stride = volumes.len().div_ceil(cap).max(1);
        let mut images = Vec::new();
        let mut classes = Vec::new();
        for v in volumes.iter().step_by(stride) {
            let Some(class) = v.labels.get("organ_class").and_then(|x| x.as_u64()) else {
                continue;
            };
            let mid = v.voxels.dim().0 / 2;
            let Ok(slice) = v.slice_normalized(mid, ncfg) else { continue };
            images.push(bilinear_resize(&slice, resolution, resolution));
            classes.push(class as usize);
        }
        Self { images, classes }
    }

    fn accuracy(&self, params: &EncoderParams) -> f64 {
        let n = self.images.len();
        if n < 4 {
            return f64::NAN;
        }
        let mut feats = Vec::with_capacity(n);
        for img in &self.images {
            match embed_image(params, img, None) {
                Ok((cls, _)) => feats.push(cls.row(0).to_owned()),
                Err(_) => return f64::NAN,
            }
        }
        let half = n / 2;
        let k = self.classes.iter().max().copied().unwrap_or(0) + 1;
        let d = feats[0].len();
        let mut sums = vec![ndarray::Array1::<f64>::zeros(d); k];
        let mut counts = vec![0usize; k];
        for i in 0..half {
            sums[self.classes[i]] += &feats[i];
            counts[self.classes[i]] += 1;
        }
        let centroids: Vec<(usize, ndarray::Array1<f64>)> = (0..k)
            .filter(|&c| counts[c] > 0)
            .map(|c| (c, &sums[c] / counts[c] as f64))
            .collect();
        if centroids.is_empty() || half == n {
            return f64::NAN;
        }
        let mut hits = 0usize;
        for i in half..n {
            let best = centroids
                .iter()
                .min_by(|a, b| {
                    let da = (&a.1 - &feats[i]).mapv(|x| x * x).sum();
                    let db = (&b.1 - &feats[i]).mapv(|x| x * x).sum();
                    da.total_cmp(&db)
                })
                .map(|(c, _)| *c)
                .unwrap();
            if best == self.classes[i] {
                hits += 1;
            }
        }
        hits as f64 / (n - half) as f64
    }
}

fn cmd_train(config: &Path, ckpt: Option<&Path>, data: &Path, out: &Path) -> Result<()> {
    let started = Instant::now();
    let mut cfg = RunConfig::load(config)?;
    // The subcommand, not the config file, decides the stage.
    cfg.train.stage = if ckpt.is_some() { Stage::HighresFinetune } else { Stage::Pretrain };

    let names = volume_file_names(data)?;
    let volumes = load_volume_dir(data)?;
    let pool = build_pool(&volumes, &names, &cfg);
    println!("admitted {} of {} slices", pool.len(), volumes.iter().map(|v| v.voxels.dim().0).sum::<usize>());

    fs::create_dir_all(out)?;
    let organ_probe = OrganProbe::new(&volumes, &cfg.normalize, cfg.train.resolution);
    let probe_fn = |p: &EncoderParams| organ_probe.accuracy(p);
    let hooks = TrainHooks { probe: Some(&probe_fn), checkpoint_dir: Some(out.to_path_buf()) };

    let (final_ckpt, log) = match ckpt {
        None => {
            let student = EncoderParams::new(&cfg.encoder, cfg.train.seed)?;
            run_pretrain(&pool, student, &cfg.train, &cfg.crop, &cfg.mask, &cfg.objectives, &hooks)?
        }
        Some(ckpt_path) => {
            require_file(ckpt_path, "--ckpt")?;
            let start = load_checkpoint(ckpt_path)?;
            run_highres_finetune(
                &start,
                &pool,
                &cfg.train,
                &cfg.crop,
                &cfg.mask,
                &cfg.objectives,
                &hooks,
            )?
        }
    };

    save_checkpoint(&final_ckpt, &out.join("final.ckpt"))?;
    log.write_csv(&out.join("trainlog.csv"))?;
    cfg.write(&out.join("config.json"))?;
    let outputs = vec!["final.ckpt".into(), "trainlog.csv".into(), "config.json".into()];
    RunManifest::new(&cfg, outputs, started.elapsed().as_secs_f64())?
        .write(&out.join("manifest.json"))?;
    if !log.collapse_steps.is_empty() {
        eprintln!("warning: collapse detector fired at steps {:?}", log.collapse_steps);
    }
    let total = log.rows.last().map(|r| r.total).unwrap_or(f64::NAN);
    println!("trained {} steps (final total loss {total:.4}); outputs in {}", final_ckpt.step, out.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// probe / fewshot

/// Teacher weights from a checkpoint, with positional embeddings brought to
/// `resolution` (identity when the sizes already match).
fn teacher_at(ckpt_path: &Path, resolution: usize) -> Result<EncoderParams> {
    require_file(ckpt_path, "--ckpt")?;
    let ckpt = load_checkpoint(ckpt_path)?;
    interpolate_pos_embed(&ckpt.teacher, resolution)
}

fn manifest_tasks(params: &EncoderParams, tasks_path: &Path, resolution: usize) -> Result<Vec<ProbeTask>> {
    require_file(tasks_path, "--tasks")?;
    let manifest = load_manifest(tasks_path)?;
    let base = tasks_path.parent().unwrap_or(Path::new("."));
    let mut out = Vec::new();
    if let Some(data_dir) = &manifest.data_dir {
        let dir = if data_dir.is_absolute() { data_dir.clone() } else { base.join(data_dir) };
        let volumes = load_volume_dir(&dir)?;
        out.extend(phantom_suite(params, &volumes, &manifest.normalize, resolution, &manifest.suite)?);
    }
    for spec in &manifest.csv_tasks {
        out.push(load_csv_task(spec, base)?);
    }
    if out.is_empty() {
        return Err(Error::validation("--tasks", "manifest defines no tasks"));
    }
    Ok(out)
}

fn cmd_probe(ckpt: &Path, tasks: &Path, out: &Path) -> Result<()> {
    require_file(tasks, "--tasks")?;
    let manifest = load_manifest(tasks)?;
    let params = teacher_at(ckpt, manifest.resolution)?;
    let task_list = manifest_tasks(&params, tasks, manifest.resolution)?;
    let report = run_benchmark(&task_list, &BENCH_SEEDS)?;
    for w in &report.warnings {
        eprintln!("warning: {w}");
    }
    fs::create_dir_all(out)?;
    write_report_csv(&report, &out.join("report.csv"))?;
    println!(
        "probed {} tasks x {} seeds (aggregate {:.4}); report in {}",
        report.reports.len(),
        report.seeds.len(),
        report.aggregate,
        out.display()
    );
    Ok(())
}

fn cmd_fewshot(ckpt: &Path, tasks: &Path, task_name: &str, shots: &[usize], out: &Path) -> Result<()> {
    require_file(tasks, "--tasks")?;
    let manifest = load_manifest(tasks)?;
    let params = teacher_at(ckpt, manifest.resolution)?;
    let task_list = manifest_tasks(&params, tasks, manifest.resolution)?;
    let task = task_list
        .iter()
        .find(|t| t.name == task_name)
        .ok_or_else(|| Error::validation("--task", format!("no task named {task_name}")))?;
    if task.kind != TaskKind::Classification {
        return Err(Error::validation("--task", "few-shot sweep needs a classification task"));
    }
    let points = few_shot_sweep(task, shots, &BENCH_SEEDS)?;

    fs::create_dir_all(out)?;
    let mut csv = String::from("shots,seed,metric,value\n");
    for p in &points {
        match &p.report {
            Some(r) => {
                for (seed, v) in BENCH_SEEDS.iter().zip(&r.values) {
                    csv.push_str(&format!("{},{},{},{}\n", p.shots, seed, r.metric, v));
                }
            }
            None => csv.push_str(&format!("{},all,bacc,skipped\n", p.shots)),
        }
    }
    fs::write(out.join("fewshot.csv"), csv)?;
    let chart = plot::few_shot_chart(task_name, &points)?;
    plot::save_png(&chart, &out.join("fewshot.png"))?;
    println!("few-shot sweep over {:?} done; outputs in {}", shots, out.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// simmap

fn parse_query(query: &str) -> Result<(PathBuf, usize, usize)> {
    let parts: Vec<&str> = query.rsplitn(3, ':').collect();
    if parts.len() != 3 {
        return Err(Error::validation("--query", "expected VOLUME.rvol:SLICE:PATCH"));
    }
    let patch: usize = parts[0]
        .parse()
        .map_err(|_| Error::validation("--query", format!("bad patch index {:?}", parts[0])))?;
    let slice: usize = parts[1]
        .parse()
        .map_err(|_| Error::validation("--query", format!("bad slice index {:?}", parts[1])))?;
    Ok((PathBuf::from(parts[2]), slice, patch))
}

fn cmd_simmap(ckpt: &Path, query: &str, targets: &Path, out: &Path) -> Result<()> {
    require_file(ckpt, "--ckpt")?;
    let ckpt = load_checkpoint(ckpt)?;
    let params = ckpt.teacher;
    let res = params.image_size();
    let ncfg = NormalizeConfig::default();

    let (qpath, qslice, qpatch) = parse_query(query)?;
    require_file(&qpath, "--query")?;
    let qvol = load_volume(&qpath)?;
    let qimg = bilinear_resize(&qvol.slice_normalized(qslice, &ncfg)?, res, res);

    let names = volume_file_names(targets)?;
    if names.is_empty() {
        return Err(Error::validation("--targets", format!("no .rvol files in {}", targets.display())));
    }
    let mut target_imgs = Vec::with_capacity(names.len());
    for n in &names {
        let v = load_volume(&targets.join(n))?;
        let mid = v.voxels.dim().0 / 2;
        target_imgs.push(bilinear_resize(&v.slice_normalized(mid, &ncfg)?, res, res));
    }

    let maps = similarity_map(&params, &qimg, qpatch, &target_imgs)?;
    fs::create_dir_all(out)?;
    for (i, m) in maps.iter().enumerate() {
        if m.zero_norm {
            eprintln!("warning: zero-norm patch token in map {i}; affected cells written as 0");
        }
        let canvas = plot::heatmap(&m.values, -1.0, 1.0, 16);
        plot::save_png(&canvas.to_image(), &out.join(format!("sim_{i:03}.png")))?;
        fs::write(out.join(format!("sim_{i:03}.csv")), simmap_csv(m))?;
    }
    println!("wrote {} similarity maps to {}", maps.len(), out.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// plot

fn cmd_plot(logs: &[PathBuf], out: &Path) -> Result<()> {
    let mut runs = Vec::with_capacity(logs.len());
    for p in logs {
        require_file(p, "--log")?;
        let name = p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        runs.push((name, TrainLog::read_csv(p)?));
    }
    let borrowed: Vec<(String, &TrainLog)> =
        runs.iter().map(|(n, l)| (n.clone(), l)).collect();
    let img = plot::train_log_charts(&borrowed)?;
    if let Some(dir) = out.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    plot::save_png(&img, out)?;
    println!("wrote chart to {}", out.display());
    Ok(())
}
