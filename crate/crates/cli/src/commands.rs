use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use voxflow::chunked::{peak_bytes, reset_peak, unbounded_generate, ChunkConfig, StagedDevice};
use voxflow::flow::{
    generate_scene, level_checkpoint, level_model_from_checkpoint, level_net_config, train_step, FlowMode,
    LevelContext, LevelModel, SceneCondition, Transition,
};
use voxflow::layout::{encode_attributes, read_manifest, AttributeVocab, SceneAttributes, VectorLayout};
use voxflow::metrics::{evaluate as run_metrics, scene_sample, EmdMode, MetricConfig, MetricReport};
use voxflow::net::{read_checkpoint, write_checkpoint, AdamW, AdamWConfig, ModelParams};
use voxflow::rng::derive_seed;
use voxflow::toy::{attribute_vocab, build_dataset as build_toy, load_pairs, DatasetIndex, Domain, Lighting, Split,
    ToyWorldConfig, INDEX_FILE};
use voxflow::volume::{default_iso, extract_mesh, read_volume, write_volume, GridSpec, HierarchySpec, LevelSpec,
    VoxelGrid};

use crate::config::RunConfig;
use crate::CliError;

type Res<T> = Result<T, CliError>;

pub const SNAPSHOT_FILE: &str = "config.txt";
pub const CHECKPOINT_FILE: &str = "checkpoint.wfc";
pub const LOSS_FILE: &str = "loss.csv";

pub const BUILD_DEFAULTS: &[(&str, &str)] = &[
    ("domain", "rooms"),
    ("n", "100"),
    ("out", ""),
    ("seed", "0"),
    ("base_dims", "32"),
    // Meters; empty picks the domain default.
    ("extent", ""),
    // day, night or empty for a coin flip per scene.
    ("lighting", ""),
];

pub const TRAIN_DEFAULTS: &[(&str, &str)] = &[
    ("dataset", ""),
    ("level", "1"),
    ("mode", "through"),
    ("steps", "100"),
    ("batch", "2"),
    ("lr", "1e-4"),
    ("weight_decay", "0"),
    ("base_width", "16"),
    ("depth", "2"),
    ("embed", "32"),
    ("groups", "4"),
    ("attention", "2"),
    ("sigma", "0.05"),
    ("layout", "true"),
    ("attrs", "true"),
    ("mask_attrs", "true"),
    ("truncation", ""),
    ("limit", "0"),
    ("log_every", "10"),
    ("resume", ""),
    ("seed", "0"),
    ("out", ""),
];

pub const GENERATE_DEFAULTS: &[(&str, &str)] = &[
    ("checkpoints", ""),
    ("layout", ""),
    ("attrs", ""),
    ("steps", "50"),
    ("seed", "0"),
    ("out", ""),
];

pub const UNBOUNDED_DEFAULTS: &[(&str, &str)] = &[
    ("checkpoints", ""),
    ("layout", ""),
    ("attrs", ""),
    ("steps", "50"),
    ("seed", "0"),
    ("out", ""),
    // Level-1 voxels; empty keeps the training grid.
    ("world", ""),
    ("chunk", "64"),
    ("overlap", "16"),
    ("margin", "16"),
    ("gamma_min", "0.01"),
    ("workers", "1"),
    ("budget_mb", ""),
    ("sequential", "false"),
];

pub const EXTRACT_DEFAULTS: &[(&str, &str)] = &[
    ("input", ""),
    ("out", ""),
    ("iso", ""),
    ("truncation", ""),
    ("seed", "0"),
];

pub const EVALUATE_DEFAULTS: &[(&str, &str)] = &[
    ("generated", ""),
    ("reference", ""),
    ("file", "level2.wfv"),
    ("split", "heldout"),
    ("points", "2048"),
    ("scenes", "1000"),
    ("emd", "approx"),
    ("chamfer", "squared"),
    ("jsd_dims", "32"),
    ("threshold", "0.5"),
    ("truncation", ""),
    ("seed", "0"),
    ("out", ""),
];

fn existing(cfg: &RunConfig, key: &str) -> Res<PathBuf> {
    let p = PathBuf::from(cfg.required(key)?);
    if !p.exists() {
        return Err(CliError::Usage(format!("{key} {} does not exist", p.display())));
    }
    Ok(p)
}

fn out_dir(cfg: &RunConfig) -> Res<PathBuf> {
    let dir = PathBuf::from(cfg.required("out")?);
    fs::create_dir_all(&dir).map_err(|e| CliError::Runtime(format!("cannot create {}: {e}", dir.display())))?;
    fs::write(dir.join(SNAPSHOT_FILE), cfg.snapshot())
        .map_err(|e| CliError::Runtime(format!("cannot write {}: {e}", dir.join(SNAPSHOT_FILE).display())))?;
    Ok(dir)
}

fn dims_text(d: [usize; 3]) -> String {
    format!("{}x{}x{}", d[0], d[1], d[2])
}

pub fn build_dataset(cfg: &RunConfig) -> Res<String> {
    let domain = cfg.raw("domain");
    let domain = Domain::parse(domain).ok_or_else(|| CliError::Usage(format!("unknown domain {domain:?}")))?;
    let seed: u64 = cfg.get("seed")?;
    let base_dims: usize = cfg.get("base_dims")?;
    let extent = match cfg.opt("extent") {
        Some(_) => cfg.get("extent")?,
        None => ToyWorldConfig::for_domain(domain, seed).extent,
    };
    let mut toy = ToyWorldConfig::two_level(domain, extent, base_dims, seed)?;
    toy.lighting = match cfg.opt("lighting") {
        None => None,
        Some(l) => Some(Lighting::parse(l).ok_or_else(|| CliError::Usage(format!("unknown lighting {l:?}")))?),
    };
    let n: usize = cfg.get("n")?;
    let dir = out_dir(cfg)?;
    eprintln!("building {n} {} scenes in {}", domain.name(), dir.display());
    let s = build_toy(&toy, n, &dir)?;
    Ok(format!(
        "scenes={} train={} heldout={} unchanged={}",
        s.index.records.len(),
        s.index.count(Split::Train),
        s.index.count(Split::HeldOut),
        s.unchanged()
    ))
}

/// Hierarchy of a dataset, read off the level volumes of its first scene.
fn dataset_hierarchy(root: &Path, index: &DatasetIndex, truncation: Option<f32>) -> Res<(HierarchySpec, GridSpec)> {
    let first = index
        .records
        .first()
        .ok_or_else(|| CliError::Usage(format!("dataset {} has no scenes", root.display())))?;
    let mut levels = Vec::new();
    let mut base = None;
    for (i, p) in first.levels.iter().enumerate() {
        let v = read_volume(&root.join(p))?;
        base.get_or_insert(v.spec);
        levels.push(LevelSpec {
            index: i + 1,
            voxel_size: v.spec.voxel_size,
            rgb: v.channels() > 1,
        });
    }
    let finest = levels.last().map_or(1.0, |l| l.voxel_size);
    let h = HierarchySpec::new(levels, truncation.unwrap_or(4.0 * finest))?;
    Ok((h, base.expect("dataset records have levels")))
}

fn opt_f32(cfg: &RunConfig, key: &str) -> Res<Option<f32>> {
    cfg.opt(key).map(|_| cfg.get(key)).transpose()
}

pub fn train(cfg: &RunConfig) -> Res<String> {
    let root = existing(cfg, "dataset")?;
    let index = DatasetIndex::read(root.join(INDEX_FILE))?;
    index.validate()?;
    let level: usize = cfg.get("level")?;
    if level == 0 || level > index.level_count() {
        return Err(CliError::Usage(format!(
            "level {level} is not in a dataset with {} levels",
            index.level_count()
        )));
    }
    let mode_name = cfg.raw("mode");
    let mode = FlowMode::parse(mode_name).ok_or_else(|| CliError::Usage(format!("unknown mode {mode_name:?}")))?;
    let (hierarchy, base) = dataset_hierarchy(&root, &index, opt_f32(cfg, "truncation")?)?;
    let t = Transition::from_hierarchy(&hierarchy, level, cfg.get("sigma")?)?;
    let with_layout = cfg.flag("layout")?;
    let vocab = if cfg.flag("attrs")? { attribute_vocab() } else { AttributeVocab::new(Vec::<String>::new()) };

    let mut pairs = load_pairs(&root, &index, level, Split::Train, &vocab, with_layout)?;
    let limit: usize = cfg.get("limit")?;
    if limit > 0 {
        pairs.truncate(limit);
    }
    if pairs.is_empty() {
        return Err(CliError::Usage("the training split is empty".into()));
    }
    let layout_channels = pairs[0].layout.as_ref().map_or(0, |l| l.channels());

    let mut net = level_net_config(&t, mode, layout_channels, vocab.len());
    net.base_width = cfg.get("base_width")?;
    net.depth = cfg.get("depth")?;
    net.embed_dim = cfg.get("embed")?;
    net.groups = cfg.get("groups")?;
    net.attention_at = cfg.list("attention")?;
    net.validate()?;
    let m = net.dim_multiple();
    if pairs[0].target.dims().iter().any(|d| d % m != 0) {
        return Err(CliError::Usage(format!(
            "grid {} is not divisible by {m}; lower depth",
            dims_text(pairs[0].target.dims())
        )));
    }
    let opt_cfg = AdamWConfig {
        lr: cfg.get("lr")?,
        weight_decay: cfg.get("weight_decay")?,
        ..AdamWConfig::default()
    };
    let seed: u64 = cfg.get("seed")?;

    let (mut params, mut opt, start) = match cfg.opt("resume") {
        Some(_) => {
            let ck = read_checkpoint(existing(cfg, "resume")?)?;
            let (model, _) = level_model_from_checkpoint(&ck)?;
            if model.transition.level != level || model.mode != mode {
                return Err(CliError::Usage(format!(
                    "checkpoint is level {} {}, run asks for level {level} {}",
                    model.transition.level,
                    model.mode.name(),
                    mode.name()
                )));
            }
            if model.params.config != net {
                return Err(CliError::Usage("checkpoint network does not match the configured network".into()));
            }
            let opt = match ck.optimizer {
                Some(o) => o,
                None => AdamW::new(opt_cfg, &model.params)?,
            };
            (model.params, opt, ck.step as usize)
        }
        None => {
            let p = ModelParams::init(&net, derive_seed(seed, 2))?;
            let o = AdamW::new(opt_cfg, &p)?;
            (p, o, 0)
        }
    };

    let dir = out_dir(cfg)?;
    let loss_path = dir.join(LOSS_FILE);
    let mut log = fs::OpenOptions::new()
        .create(true)
        .append(start > 0)
        .write(true)
        .truncate(start == 0)
        .open(&loss_path)
        .map_err(|e| CliError::Runtime(format!("cannot open {}: {e}", loss_path.display())))?;
    if start == 0 {
        writeln!(log, "step,wall_ms,loss,loss_udf,loss_attr").map_err(|e| CliError::Runtime(e.to_string()))?;
    }

    let steps: usize = cfg.get("steps")?;
    let batch: usize = cfg.get("batch")?;
    if batch == 0 {
        return Err(CliError::Usage("batch must be >= 1".into()));
    }
    let log_every: usize = cfg.get::<usize>("log_every")?.max(1);
    let mask_attrs = cfg.flag("mask_attrs")?;
    eprintln!(
        "training level {level} ({}) on {} scenes, {} parameters",
        mode.name(),
        pairs.len(),
        params.count()
    );
    let started = Instant::now();
    let mut last = None;
    for step in start..steps {
        let bseed = derive_seed(derive_seed(seed, 0), step as u64);
        let items: Vec<_> = (0..batch)
            .map(|j| pairs[(derive_seed(bseed, j as u64) % pairs.len() as u64) as usize].clone())
            .collect();
        let tseed = derive_seed(derive_seed(seed, 1), step as u64);
        let r = train_step(&mut params, &mut opt, &items, &t, mode, mask_attrs, tseed)?;
        let l = r.loss;
        writeln!(
            log,
            "{},{},{},{},{}",
            step + 1,
            started.elapsed().as_millis(),
            l.total,
            l.udf,
            l.attr
        )
        .map_err(|e| CliError::Runtime(e.to_string()))?;
        if (step + 1) % log_every == 0 || step + 1 == steps {
            eprintln!("step {:>6} loss {:.6}", step + 1, l.total);
        }
        last = Some(l.total);
    }

    let line_width = read_manifest(root.join(&index.records[0].layout))
        .ok()
        .and_then(|m| m.line_width)
        .unwrap_or(0.0);
    let ctx = LevelContext {
        base,
        truncation: hierarchy.truncation,
        vocab: vocab.names().to_vec(),
        line_width,
    };
    let model = LevelModel {
        params,
        transition: t,
        mode,
    };
    let ck_path = dir.join(CHECKPOINT_FILE);
    write_checkpoint(&ck_path, &level_checkpoint(&model, &ctx, Some(opt), steps.max(start) as u64, seed))?;
    Ok(format!(
        "level={level} steps={} loss={} checkpoint={}",
        steps.max(start),
        last.map_or("none".to_string(), |l| l.to_string()),
        ck_path.display()
    ))
}

/// Level models listed under `checkpoints`, coarsest first, and the first one's context.
fn load_levels(cfg: &RunConfig) -> Res<(Vec<LevelModel>, LevelContext)> {
    let paths: Vec<PathBuf> = cfg.list("checkpoints")?;
    if paths.is_empty() {
        return Err(CliError::Usage(format!("{} needs --ckpt", cfg.command)));
    }
    let mut models = Vec::new();
    let mut ctx = None;
    for p in &paths {
        if !p.exists() {
            return Err(CliError::Usage(format!("checkpoint {} does not exist", p.display())));
        }
        let (m, c) = level_model_from_checkpoint(&read_checkpoint(p)?)?;
        models.push(m);
        ctx.get_or_insert(c);
    }
    Ok((models, ctx.expect("at least one checkpoint")))
}

fn condition(cfg: &RunConfig, ctx: &LevelContext, attr_channels: usize) -> Res<SceneCondition> {
    let manifest = match cfg.opt("layout") {
        Some(_) => Some(read_manifest(existing(cfg, "layout")?)?),
        None => None,
    };
    let names: Vec<String> = match cfg.opt("attrs") {
        Some(_) => cfg.list("attrs")?,
        None => manifest.as_ref().map(|m| m.attrs.clone()).unwrap_or_default(),
    };
    let attrs = if attr_channels == 0 {
        if !names.is_empty() {
            eprintln!("warning: the model takes no attributes; ignoring {names:?}");
        }
        Vec::new()
    } else {
        let vocab = AttributeVocab::new(ctx.vocab.iter().cloned());
        let tags = SceneAttributes::from_names(&vocab, &names).map_err(|e| CliError::Usage(e.to_string()))?;
        encode_attributes(&tags, attr_channels)?
    };
    let line_width = manifest.as_ref().and_then(|m| m.line_width).unwrap_or(ctx.line_width);
    Ok(SceneCondition {
        layout: manifest.map(|m| m.layout).filter(|l: &VectorLayout| !l.is_empty()),
        attrs,
        line_width,
    })
}

/// Writes `level<i>.wfv` and `level<i>.obj`; returns triangle counts.
fn write_levels(dir: &Path, levels: &[VoxelGrid], truncation: f32) -> Res<Vec<usize>> {
    let mut tris = Vec::new();
    for (i, v) in levels.iter().enumerate() {
        write_volume(v, &dir.join(format!("level{}.wfv", i + 1)))?;
        let ex = extract_mesh(v, default_iso(v.spec.voxel_size, truncation))?;
        if ex.is_empty() {
            eprintln!("warning: level {} has no surface", i + 1);
        }
        ex.mesh.write_obj(&dir.join(format!("level{}.obj", i + 1)))?;
        tris.push(ex.mesh.triangles.len());
    }
    Ok(tris)
}

fn join<T: ToString>(v: &[T]) -> String {
    v.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

pub fn generate(cfg: &RunConfig) -> Res<String> {
    let (models, ctx) = load_levels(cfg)?;
    let cond = condition(cfg, &ctx, models[0].params.config.attr_channels)?;
    let dir = out_dir(cfg)?;
    eprintln!("sampling {} levels on {}", models.len(), dims_text(ctx.base.dims));
    let levels = generate_scene(&models, &ctx.base, &cond, cfg.get("seed")?, cfg.get("steps")?)?;
    let tris = write_levels(&dir, &levels, ctx.truncation)?;
    Ok(format!(
        "levels={} dims={} triangles={}",
        levels.len(),
        dims_text(levels.last().expect("one level at least").dims()),
        join(&tris)
    ))
}

pub fn generate_unbounded(cfg: &RunConfig) -> Res<String> {
    let (models, ctx) = load_levels(cfg)?;
    let cond = condition(cfg, &ctx, models[0].params.config.attr_channels)?;
    let world = match cfg.opt("world") {
        Some(_) => cfg.triple("world")?,
        None => ctx.base.dims,
    };
    let base = GridSpec::covering(ctx.base.world_min(), world, ctx.base.voxel_size)?;
    let chunks = ChunkConfig {
        chunk: cfg.triple("chunk")?,
        overlap: cfg.get("overlap")?,
        margin: cfg.get("margin")?,
        gamma_min: cfg.get("gamma_min")?,
        workers: cfg.get::<usize>("workers")?.max(1),
        sequential_outpainting: cfg.flag("sequential")?,
    };
    let budget = match cfg.opt("budget_mb") {
        Some(_) => Some(cfg.get::<usize>("budget_mb")? << 20),
        None => None,
    };
    let dir = out_dir(cfg)?;
    let device = StagedDevice::new(budget);
    eprintln!("sampling a {} world in {} chunks", dims_text(world), dims_text(chunks.chunk));
    reset_peak();
    let out = unbounded_generate(&models, &base, &cond, &chunks, cfg.get("seed")?, cfg.get("steps")?, &device)?;
    let peak = peak_bytes();
    let tris = write_levels(&dir, &out.levels, ctx.truncation)?;
    let step_ms: Vec<String> = out.step_seconds.iter().map(|s| format!("{:.1}", s * 1e3)).collect();
    Ok(format!(
        "levels={} dims={} chunks={} triangles={} peak_bytes={} step_ms={}",
        out.levels.len(),
        dims_text(out.levels.last().expect("one level at least").dims()),
        join(&out.chunk_counts),
        join(&tris),
        peak,
        step_ms.join(",")
    ))
}

pub fn extract(cfg: &RunConfig) -> Res<String> {
    let input = existing(cfg, "input")?;
    let out = PathBuf::from(cfg.required("out")?);
    let v = read_volume(&input)?;
    let iso = match opt_f32(cfg, "iso")? {
        Some(iso) => iso,
        None => {
            let tau = opt_f32(cfg, "truncation")?.unwrap_or(4.0 * v.spec.voxel_size);
            default_iso(v.spec.voxel_size, tau)
        }
    };
    let ex = extract_mesh(&v, iso)?;
    if ex.is_empty() {
        eprintln!("warning: {} has no surface at iso {iso}", input.display());
    }
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| CliError::Runtime(e.to_string()))?;
    }
    ex.mesh.write_obj(&out)?;
    Ok(format!(
        "vertices={} triangles={} iso={iso}",
        ex.mesh.vertices.len(),
        ex.mesh.triangles.len()
    ))
}

fn collect_files(dir: &Path, name: &str, out: &mut Vec<PathBuf>) -> Res<()> {
    let entries = fs::read_dir(dir).map_err(|e| CliError::Runtime(format!("{}: {e}", dir.display())))?;
    for e in entries {
        let p = e.map_err(|e| CliError::Runtime(e.to_string()))?.path();
        if p.is_dir() {
            collect_files(&p, name, out)?;
        } else if p.file_name().is_some_and(|f| f == name) {
            out.push(p);
        }
    }
    Ok(())
}

/// Volumes of a scene set: a single file, the `split` records of a dataset,
/// or every file named `file` below a directory.
fn scene_files(cfg: &RunConfig, key: &str) -> Res<Vec<PathBuf>> {
    let root = existing(cfg, key)?;
    if root.is_file() {
        return Ok(vec![root]);
    }
    let name = cfg.raw("file");
    let index_path = root.join(INDEX_FILE);
    let mut files = Vec::new();
    if index_path.exists() {
        let split = cfg.raw("split");
        let split = Split::parse(split).ok_or_else(|| CliError::Usage(format!("unknown split {split:?}")))?;
        for r in DatasetIndex::read(&index_path)?.records.iter().filter(|r| r.split == split) {
            let p = r
                .levels
                .iter()
                .find(|l| l.file_name().is_some_and(|f| f == name))
                .ok_or_else(|| CliError::Usage(format!("dataset scene {} has no {name}", r.id)))?;
            files.push(root.join(p));
        }
    } else {
        collect_files(&root, name, &mut files)?;
        files.sort();
    }
    Ok(files)
}

pub fn evaluate(cfg: &RunConfig) -> Res<String> {
    let emd_mode = match cfg.raw("emd") {
        "approx" => EmdMode::Approx,
        "exact" => EmdMode::Exact,
        v => return Err(CliError::Usage(format!("emd={v:?}: expected approx or exact"))),
    };
    let squared_chamfer = match cfg.raw("chamfer") {
        "squared" => true,
        "plain" => false,
        v => return Err(CliError::Usage(format!("chamfer={v:?}: expected squared or plain"))),
    };
    let metric = MetricConfig {
        points_per_scene: cfg.get("points")?,
        scenes_per_set: cfg.get("scenes")?,
        emd_mode,
        squared_chamfer,
        jsd_dims: cfg.triple("jsd_dims")?,
        occupancy_threshold: cfg.get("threshold")?,
        seed: cfg.get("seed")?,
    };
    metric.validate()?;
    let tau = opt_f32(cfg, "truncation")?;
    let mut sets = Vec::new();
    for key in ["generated", "reference"] {
        let mut files = scene_files(cfg, key)?;
        files.truncate(metric.scenes_per_set);
        if files.len() < 2 {
            return Err(CliError::Usage(format!("{key} set has {} scenes; at least two are needed", files.len())));
        }
        let mut samples = Vec::with_capacity(files.len());
        let mut empty = 0;
        for (i, f) in files.iter().enumerate() {
            let v = read_volume(f)?;
            let t = tau.unwrap_or(4.0 * v.spec.voxel_size);
            let (s, e) = scene_sample(&v, t, &metric, derive_seed(metric.seed, i as u64))?;
            empty += e as usize;
            samples.push(s);
        }
        if empty > 0 {
            eprintln!("warning: {empty} {key} scenes have no surface and stand in as a single point");
        }
        eprintln!("{key}: {} scenes", samples.len());
        sets.push(samples);
    }
    let report = run_metrics(&sets[0], &sets[1], &metric)?;
    eprintln!("{}", MetricReport::CSV_HEADER);
    if let Some(out) = cfg.opt("out") {
        let text = format!("{}\n{}\n", MetricReport::CSV_HEADER, report.csv_row());
        fs::write(out, text).map_err(|e| CliError::Runtime(format!("cannot write {out}: {e}")))?;
    }
    Ok(report.csv_row())
}
